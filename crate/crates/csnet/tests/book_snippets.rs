//! Every code snippet shown in the guide (`book/`) lives here, compiled and
//! run as ordinary tests. Chapters include these snippets by anchor, so the
//! book can never drift from the real API.

use csnet::graph::{build_graph, GraphBuildConfig};
use csnet::phantom::{generate_phantom, PhantomSpec};
use csnet::pipeline::{batch_merge, build_labeled_graph, EdgeMask, TrainedModel};

fn small_graph_config() -> GraphBuildConfig {
    GraphBuildConfig {
        patch_size_px: 16,
        patch_spacing_mm: 19.392 / 16.0,
        ..GraphBuildConfig::default()
    }
}

#[test]
fn phantom_to_graph() {
    // ANCHOR: phantom_to_graph
    use csnet::graph::{build_graph, GraphBuildConfig};
    use csnet::phantom::{generate_phantom, PhantomSpec};

    // A deterministic knee-like phantom: three bones, a bright cartilage
    // band, and one severe (grade 2) defect.
    let spec = PhantomSpec::example(7);
    let (volume, truth) = generate_phantom(&spec).unwrap();
    assert_eq!(truth.subject_grade, 2);

    // Turn it into a surface graph: one vertex per surface patch.
    let cfg = GraphBuildConfig {
        patch_size_px: 32,
        ..GraphBuildConfig::default()
    };
    let graph = build_graph(&volume, &cfg).unwrap();
    assert!(graph.vertices.len() > 100);
    graph.validate().unwrap();
    // ANCHOR_END: phantom_to_graph
}

#[test]
fn edge_families() {
    // ANCHOR: edge_families
    use csnet::graph::EdgeKind;

    let (volume, _) = generate_phantom(&PhantomSpec::example(3)).unwrap();
    let graph = build_graph(&volume, &small_graph_config()).unwrap();

    // Each stored edge is typed; self-loops keep every neighborhood
    // non-empty. Surface edges link arc-consecutive patches on one slice,
    // cross edges link nearby patches of different cartilages, adjacent
    // edges link the same cartilage across neighboring slices.
    let count = |kind: EdgeKind| graph.csr.kinds.iter().filter(|&&k| k == kind).count();
    assert_eq!(count(EdgeKind::SelfLoop), graph.vertices.len());
    assert!(count(EdgeKind::Surface) > 0);
    assert!(count(EdgeKind::Adjacent) > 0);
    // ANCHOR_END: edge_families
}

#[test]
fn autodiff_basics() {
    // ANCHOR: autodiff_basics
    use csnet::tensor::{ops, Tape};
    use ndarray::{ArrayD, IxDyn};

    // Build a computation on a tape, then run reverse-mode autodiff.
    let tape = Tape::<f64>::new();
    let x = tape.leaf(ArrayD::from_elem(IxDyn(&[2, 2]), 3.0), true);
    let y = ops::sum(&ops::mul(&x, &x).unwrap());
    y.backward().unwrap();

    // d(sum(x*x))/dx = 2x = 6 everywhere.
    let grad = x.grad().unwrap();
    assert!(grad.iter().all(|&g| (g - 6.0).abs() < 1e-12));
    // ANCHOR_END: autodiff_basics
}

#[test]
fn batching_and_masks() {
    // ANCHOR: batching_and_masks
    use csnet::pipeline::{batch_merge, EdgeMask};

    let graphs: Vec<_> = (0..2)
        .map(|seed| {
            let (volume, truth) = generate_phantom(&PhantomSpec::example(seed)).unwrap();
            build_labeled_graph(&volume, &truth, &small_graph_config(), &format!("s{seed}"))
                .unwrap()
        })
        .collect();

    // Merge graphs block-diagonally: no edge crosses a subject boundary,
    // so batched and per-subject forward passes agree.
    let refs: Vec<&_> = graphs.iter().collect();
    let batch = batch_merge(&refs, EdgeMask::default()).unwrap();
    assert_eq!(batch.inputs.num_subjects(), 2);

    // Edge masks drop whole families (for ablation); self-loops survive.
    let no_cross = EdgeMask { cross: false, ..EdgeMask::default() };
    let masked = batch_merge(&refs, no_cross).unwrap();
    assert!(masked.inputs.edge_rows.len() <= batch.inputs.edge_rows.len());
    // ANCHOR_END: batching_and_masks
}

#[test]
fn train_and_evaluate() {
    // ANCHOR: train_and_evaluate
    use csnet::model::ModelConfig;
    use csnet::pipeline::{
        evaluate, fit_patch_head, pretrain_patch_classifier, train_subject, EvalLevel,
        TrainConfig, TrainedModel,
    };

    // A labeled training set (normally dozens of subjects; three keep this
    // snippet fast). Labels come from the phantom ground truth.
    use csnet::phantom::DefectGrade;
    let grades = [(2u64, 0usize, DefectGrade::G1), (5, 1, DefectGrade::G1), (7, 1, DefectGrade::G2)];
    let graphs: Vec<_> = grades
        .iter()
        .map(|&(seed, n_defects, defect_grade)| {
            let spec = PhantomSpec { n_defects, defect_grade, ..PhantomSpec::example(seed) };
            let (volume, truth) = generate_phantom(&spec).unwrap();
            build_labeled_graph(&volume, &truth, &small_graph_config(), &format!("s{seed}"))
                .unwrap()
        })
        .collect();

    // Small architecture + short schedule for demonstration purposes.
    let mcfg = ModelConfig { hidden_dim: 8, heads: 2, num_layers: 2, base_channels: 4 };
    let tcfg = TrainConfig {
        pretrain_epochs: 1,
        epochs: 1,
        head_epochs: 2,
        ..TrainConfig::default()
    };

    // The three training stages: patch pretraining (conv weights are shared
    // with the backbone by name), subject-level training, patch-head fit.
    let mut model = TrainedModel::init(mcfg, tcfg.seed).unwrap();
    pretrain_patch_classifier(&mut model, &graphs, &tcfg).unwrap();
    train_subject(&mut model, &graphs, &tcfg).unwrap();
    fit_patch_head(&mut model, &graphs, &tcfg).unwrap();

    // Evaluate at any of the three levels.
    let report = evaluate(&model, &graphs, EvalLevel::Subject, EdgeMask::default()).unwrap();
    assert_eq!(report.n, graphs.len());
    // ANCHOR_END: train_and_evaluate
}

#[test]
fn checkpoint_round_trip() {
    // ANCHOR: checkpoint_round_trip
    use csnet::model::ModelConfig;

    let mcfg = ModelConfig { hidden_dim: 8, heads: 2, num_layers: 2, base_channels: 4 };
    let model = TrainedModel::init(mcfg, 0).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.csck");
    model.save(&path).unwrap();

    // Checkpoints are byte-stable and carry the architecture with them.
    let restored = TrainedModel::load(&path).unwrap();
    assert_eq!(restored.cfg, mcfg);
    assert_eq!(restored.params, model.params);
    // ANCHOR_END: checkpoint_round_trip
}

#[test]
fn attention_export() {
    // ANCHOR: attention_export
    use csnet::model::{vertex_attention, ModelConfig};
    use csnet::viz::export_attention_ply;

    let (volume, truth) = generate_phantom(&PhantomSpec::example(9)).unwrap();
    let graph =
        build_labeled_graph(&volume, &truth, &small_graph_config(), "demo").unwrap();

    let mcfg = ModelConfig { hidden_dim: 8, heads: 2, num_layers: 2, base_channels: 4 };
    let model = TrainedModel::init(mcfg, 0).unwrap();

    // Per-vertex evidence for class 2 (severe), min-max normalized to [0,1].
    let batch = batch_merge(&[&graph], EdgeMask::default()).unwrap();
    let attention =
        vertex_attention(&model.cfg, &model.params, &model.buffers, &batch.inputs, 2).unwrap();
    assert!(attention.iter().all(|a| (0.0..=1.0).contains(a)));

    // Write an ASCII PLY point set with grades, attention and cartilage ids.
    let grades = vec![0u8; graph.vertices.len()];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("attention.ply");
    export_attention_ply(&graph, &grades, &attention, true, &path).unwrap();
    assert!(path.exists());
    // ANCHOR_END: attention_export
}
