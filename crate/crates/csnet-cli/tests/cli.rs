//! End-to-end exercise of the `csnet` binary: dataset generation, graph
//! building (including edge-family flags and rebuild idempotence), a tiny
//! training run, evaluation, ablation and attention export, plus exit-code
//! and config-validation behavior.

use std::path::Path;
use std::process::{Command, Output};

use csnet::graph::{load_graph, EdgeKind};

const BIN: &str = env!("CARGO_BIN_EXE_csnet");

/// Small enough to run the whole workflow in seconds.
const CONFIG: &str = r#"
[dataset]
subjects = 3
seed = 11

[graph]
patch_size_px = 16
patch_spacing_mm = 1.212

[model]
hidden_dim = 8
heads = 2
num_layers = 2
base_channels = 4

[train]
lr = 1e-3
batch_size = 2
pretrain_epochs = 1
epochs = 1
head_epochs = 2
"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn csnet")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "csnet {:?} failed:\n{}\n{}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn path_str(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

#[test]
fn full_workflow_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, CONFIG).unwrap();
    let cfg = path_str(&cfg_path);
    let data = path_str(&dir.path().join("data"));
    let graphs = path_str(&dir.path().join("graphs"));
    let trained = path_str(&dir.path().join("trained"));

    // --- usage errors exit with 1 -------------------------------------
    assert_eq!(code(&["definitely-not-a-subcommand"]), 1);
    assert_eq!(code(&["gen"]), 1); // missing required --out
    assert_eq!(code(&["--help"]), 0);

    // Unknown config keys are rejected before any work happens.
    let bad_cfg = dir.path().join("bad.toml");
    std::fs::write(&bad_cfg, "[train]\nlearning_rate = 0.1\n").unwrap();
    assert_eq!(
        code(&["--config", bad_cfg.to_str().unwrap(), "gen", "--out", &data]),
        1
    );

    // --- gen ----------------------------------------------------------
    ok(&["--config", &cfg, "gen", "--out", &data]);
    assert!(Path::new(&data).join("manifest.json").exists());
    assert!(Path::new(&data).join("subject0000.json").exists());
    assert!(Path::new(&data).join("config.toml").exists(), "config echo");

    // Existing non-empty output dir without --force is a usage error...
    assert_eq!(code(&["--config", &cfg, "gen", "--out", &data]), 1);
    // ...and --force allows the rerun.
    ok(&["--config", &cfg, "--force", "gen", "--out", &data]);

    // Zero subjects is a valid (empty) dataset.
    let empty = path_str(&dir.path().join("empty"));
    ok(&["--config", &cfg, "gen", "--out", &empty, "--subjects", "0"]);

    // --- build-graph ----------------------------------------------------
    let summary = ok(&["--config", &cfg, "build-graph", "--manifest", &data, "--out", &graphs]);
    assert_eq!(summary.lines().filter(|l| l.contains("vertices=")).count(), 3);
    let g0_path = Path::new(&graphs).join("subject0000.graph");
    let g0 = load_graph(&g0_path).unwrap();
    assert!(g0.vertices.len() > 10);
    assert!(g0.csr.kinds.iter().any(|&k| k == EdgeKind::Adjacent));

    // Rebuilding produces byte-identical graph files.
    let before = std::fs::read(&g0_path).unwrap();
    ok(&["--config", &cfg, "--force", "build-graph", "--manifest", &data, "--out", &graphs]);
    assert_eq!(before, std::fs::read(&g0_path).unwrap());

    // Edge-family flags drop exactly the requested family.
    let no_adj = path_str(&dir.path().join("graphs_no_adj"));
    let summary = ok(&[
        "--config", &cfg, "build-graph", "--manifest", &data,
        "--out", &no_adj, "--no-adjacent",
    ]);
    assert!(summary.lines().all(|l| !l.contains("vertices=") || l.contains("adjacent=0")));
    let g = load_graph(&Path::new(&no_adj).join("subject0000.graph")).unwrap();
    assert!(g.csr.kinds.iter().all(|&k| k != EdgeKind::Adjacent));
    assert!(g.csr.kinds.iter().any(|&k| k == EdgeKind::Surface));

    // Missing manifest is a data error (exit 2).
    let nowhere = path_str(&dir.path().join("nowhere"));
    let fresh_out = path_str(&dir.path().join("graphs_fresh"));
    assert_eq!(
        code(&["--config", &cfg, "build-graph", "--manifest", &nowhere, "--out", &fresh_out]),
        2
    );

    // --- train (pretrain + subject + patch head + eval) -----------------
    let report = ok(&["--config", &cfg, "train", "--graphs", &graphs, "--out", &trained]);
    for level in ["subject", "slice", "patch"] {
        assert!(report.contains(&format!("\"level\": \"{level}\"")), "{level} in report");
    }
    let model = path_str(&Path::new(&trained).join("model.csck"));
    assert!(Path::new(&model).exists());
    let log = std::fs::read_to_string(Path::new(&trained).join("train_log.jsonl")).unwrap();
    // One pretrain epoch, one subject epoch, two head epochs.
    assert_eq!(log.lines().count(), 4);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["loss"].as_f64().unwrap().is_finite());
    }

    // --- eval ------------------------------------------------------------
    let report_path = dir.path().join("report.json");
    ok(&[
        "--config", &cfg, "eval", "--graphs", &graphs, "--model", &model,
        "--out", report_path.to_str().unwrap(),
    ]);
    let reports: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 3);

    // Evaluating a nonexistent model is a data error.
    let no_model = path_str(&dir.path().join("missing.csck"));
    assert_eq!(code(&["--config", &cfg, "eval", "--graphs", &graphs, "--model", &no_model]), 2);

    // --- fit-patch-head on the trained model ----------------------------
    let refit = path_str(&dir.path().join("refit"));
    ok(&["--config", &cfg, "fit-patch-head", "--graphs", &graphs, "--model", &model, "--out", &refit]);
    assert!(Path::new(&refit).join("model.csck").exists());

    // --- export-attention -------------------------------------------------
    let ply = dir.path().join("attn.ply");
    ok(&[
        "--config", &cfg, "export-attention", "--model", &model,
        "--graph", &path_str(&g0_path), "--class", "2",
        "--out", ply.to_str().unwrap(), "--edges",
    ]);
    let text = std::fs::read_to_string(&ply).unwrap();
    assert!(text.starts_with("ply\nformat ascii 1.0\n"));
    assert!(text.contains(&format!("element vertex {}", g0.vertices.len())));
    assert!(text.contains("element edge "));

    // An out-of-range class is a usage error.
    assert_eq!(
        code(&[
            "--config", &cfg, "export-attention", "--model", &model,
            "--graph", &path_str(&g0_path), "--class", "7",
            "--out", ply.to_str().unwrap(),
        ]),
        1
    );
}

#[test]
fn ablate_writes_seven_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, CONFIG).unwrap();
    let cfg = path_str(&cfg_path);
    let data = path_str(&dir.path().join("data"));
    let graphs = path_str(&dir.path().join("graphs"));
    let abl = path_str(&dir.path().join("ablation"));

    ok(&["--config", &cfg, "gen", "--out", &data]);
    ok(&["--config", &cfg, "build-graph", "--manifest", &data, "--out", &graphs]);
    let csv = ok(&[
        "--config", &cfg, "ablate", "--graphs", &graphs, "--eval-graphs", &graphs, "--out", &abl,
    ]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "mask,acc,rec,auc");
    assert_eq!(lines.len(), 8);
    for name in ["all", "no-adjacent", "no-cross", "no-surface", "surface-only", "cross-only", "adjacent-only"] {
        assert!(lines.iter().any(|l| l.starts_with(&format!("{name},"))), "{name} row");
    }
    assert_eq!(
        csv,
        std::fs::read_to_string(Path::new(&abl).join("ablation.csv")).unwrap()
    );
}

#[test]
fn seed_flag_changes_generated_data_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, CONFIG).unwrap();
    let cfg = path_str(&cfg_path);

    let gen = |name: &str, seed: &str| {
        let out = path_str(&dir.path().join(name));
        ok(&["--config", &cfg, "--seed", seed, "gen", "--out", &out, "--subjects", "1"]);
        std::fs::read(Path::new(&out).join("subject0000.intensity.raw")).unwrap()
    };
    let a = gen("a", "5");
    let b = gen("b", "5");
    let c = gen("c", "6");
    assert_eq!(a, b, "same seed reproduces the dataset bit-for-bit");
    assert_ne!(a, c, "different seed changes the dataset");
}
