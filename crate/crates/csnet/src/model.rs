//! The cartilage surface network: stacked layers that interleave per-vertex
//! patch convolution with masked self-attention graph convolution over the
//! surface graph, followed by pooled subject/slice heads and a per-vertex
//! patch head.
//!
//! Parameters live in a flat name → array map ([`Params`]); a forward pass
//! lifts them onto a gradient tape ([`Vars`]) so the same weights drive f32
//! training and f64 gradient checks. Batch-norm running statistics are kept
//! in a separate buffer map and updated from the per-batch statistics the
//! forward pass reports.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{Array1, ArrayD, Ix1, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops;
use crate::tensor::{conv2d, conv_bn, BnMode, Elem, Params, Tape, Tensor};

pub const NUM_CLASSES: usize = 3;

/// Batch-norm statistics momentum: `running = (1-m)·running + m·batch`.
pub const BN_MOMENTUM: f64 = 0.1;

const BN_EPS: f64 = 1e-5;
const LN_EPS: f64 = 1e-5;

/// Architecture hyperparameters. The pooled output width of the last patch
/// convolution stage must equal the graph hidden width, so
/// `base_channels · 2^(num_layers-1) == hidden_dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Graph feature width d_H carried by the residual stream.
    pub hidden_dim: usize,
    /// Attention head count h; per-head width is `hidden_dim / heads`.
    pub heads: usize,
    /// Number of stacked surface convolution layers L.
    pub num_layers: usize,
    /// Channels produced by the first patch convolution stage.
    pub base_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 128,
            heads: 4,
            num_layers: 4,
            base_channels: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.heads == 0 || self.base_channels == 0 {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden_dim {} not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        let final_channels = self.base_channels << (self.num_layers - 1);
        if final_channels != self.hidden_dim {
            return Err(Error::InvalidConfig(format!(
                "base_channels {} over {} layers gives {} final channels, hidden_dim is {}",
                self.base_channels, self.num_layers, final_channels, self.hidden_dim
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    /// Input channels of patch convolution stage `l` (0-based).
    pub fn stage_in_channels(&self, l: usize) -> usize {
        if l == 0 {
            1
        } else {
            self.base_channels << (l - 1)
        }
    }

    /// Output channels of patch convolution stage `l`.
    pub fn stage_out_channels(&self, l: usize) -> usize {
        self.base_channels << l
    }

    /// Smallest patch edge that survives all stride-2 stages with spatial
    /// size ≥ 1: each stage needs input ≥ 2 and halves it.
    pub fn min_patch_px(&self) -> usize {
        1 << self.num_layers
    }
}

/// Merged graph tensors the model consumes: per-vertex patches and
/// normalized coordinates plus a flattened, row-sorted edge list with CSR
/// row offsets and per-subject vertex ranges.
pub struct GraphInputs<E: Elem> {
    /// `[N, 1, p, p]` intensity patches.
    pub patches: ArrayD<E>,
    /// `[N, 3]` coordinates normalized to [-1, 1] per axis.
    pub coords: ArrayD<E>,
    /// Source vertex of every stored edge, sorted ascending.
    pub edge_rows: Rc<Vec<u32>>,
    /// Target vertex of every stored edge.
    pub edge_cols: Rc<Vec<u32>>,
    /// CSR row pointers over the edge list, length N+1. Every segment is
    /// non-empty (self-loops guarantee it).
    pub row_offsets: Rc<Vec<usize>>,
    /// Vertex ranges per subject in the batch, length B+1.
    pub subject_offsets: Rc<Vec<usize>>,
}

impl<E: Elem> GraphInputs<E> {
    pub fn num_vertices(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn num_subjects(&self) -> usize {
        self.subject_offsets.len() - 1
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_vertices();
        if self.patches.ndim() != 4 || self.patches.shape()[1] != 1 {
            return Err(Error::InvalidGraph("patches must be [N,1,p,p]".into()));
        }
        if self.coords.shape() != [n, 3] {
            return Err(Error::InvalidGraph("coords must be [N,3]".into()));
        }
        if self.row_offsets.len() != n + 1
            || self.row_offsets[0] != 0
            || *self.row_offsets.last().unwrap() != self.edge_rows.len()
            || self.edge_rows.len() != self.edge_cols.len()
        {
            return Err(Error::InvalidGraph("edge list inconsistent with row offsets".into()));
        }
        for i in 0..n {
            if self.row_offsets[i] >= self.row_offsets[i + 1] {
                return Err(Error::InvalidGraph(format!("vertex {i} has no edges")));
            }
        }
        if self.subject_offsets.first() != Some(&0)
            || self.subject_offsets.last() != Some(&n)
            || self.subject_offsets.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::InvalidGraph("bad subject offsets".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// parameter initialization
// ---------------------------------------------------------------------------

fn kaiming<E: Elem>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<E> {
    let bound = (6.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        E::from_f64_(rng.random_range(-bound..bound))
    })
}

/// Fresh parameters and batch-norm buffers for the given architecture.
/// Deterministic in `seed`; names are stable and shared with checkpoints.
pub fn init_params<E: Elem>(cfg: &ModelConfig, seed: u64) -> Result<(Params<E>, Params<E>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::new();
    let mut buffers = Params::new();
    let d = cfg.hidden_dim;

    params.insert("coord.w".into(), kaiming(&mut rng, &[3, d], 3));
    params.insert("coord.b".into(), ArrayD::zeros(IxDyn(&[d])));

    for l in 0..cfg.num_layers {
        let (c_in, c_out) = (cfg.stage_in_channels(l), cfg.stage_out_channels(l));
        for b in 0..4 {
            let (ci, co) = if b == 0 { (c_in, c_out) } else { (c_out, c_out) };
            let prefix = format!("l{l}.conv{b}");
            params.insert(format!("{prefix}.w"), kaiming(&mut rng, &[co, ci, 3, 3], ci * 9));
            params.insert(format!("{prefix}.gamma"), ArrayD::ones(IxDyn(&[co])));
            params.insert(format!("{prefix}.beta"), ArrayD::zeros(IxDyn(&[co])));
            buffers.insert(format!("{prefix}.running_mean"), ArrayD::zeros(IxDyn(&[co])));
            buffers.insert(format!("{prefix}.running_var"), ArrayD::ones(IxDyn(&[co])));
        }
        params.insert(
            format!("l{l}.shortcut.w"),
            kaiming(&mut rng, &[c_out, c_in, 1, 1], c_in),
        );
        params.insert(format!("l{l}.ln.gamma"), ArrayD::ones(IxDyn(&[d])));
        params.insert(format!("l{l}.ln.beta"), ArrayD::zeros(IxDyn(&[d])));
        params.insert(format!("l{l}.attn.w_qkv"), kaiming(&mut rng, &[d, 3 * d], d));
        params.insert(format!("l{l}.attn.w_o"), kaiming(&mut rng, &[d, d], d));
        params.insert(format!("l{l}.attn.b_o"), ArrayD::zeros(IxDyn(&[d])));
        params.insert(format!("l{l}.w_p"), kaiming(&mut rng, &[c_out, d], c_out));
    }

    params.insert("head.w_g".into(), kaiming(&mut rng, &[d, NUM_CLASSES], d));
    params.insert("head.patch.w".into(), kaiming(&mut rng, &[d, NUM_CLASSES], d));
    params.insert("head.patch.b".into(), ArrayD::zeros(IxDyn(&[NUM_CLASSES])));
    Ok((params, buffers))
}

/// Names trained when only the patch head is being fitted.
pub fn is_patch_head_param(name: &str) -> bool {
    name.starts_with("head.patch.")
}

// ---------------------------------------------------------------------------
// tape lifting
// ---------------------------------------------------------------------------

/// Parameters lifted onto a gradient tape for one forward/backward pass.
pub struct Vars<E: Elem> {
    tensors: BTreeMap<String, Tensor<E>>,
}

impl<E: Elem> Vars<E> {
    /// Lift every parameter; `trainable` decides which leaves require
    /// gradients.
    pub fn new(tape: &Tape<E>, params: &Params<E>, trainable: impl Fn(&str) -> bool) -> Self {
        let tensors = params
            .iter()
            .map(|(name, value)| {
                let t = tape.leaf(value.clone(), trainable(name));
                (name.clone(), t)
            })
            .collect();
        Vars { tensors }
    }

    pub fn get(&self, name: &str) -> &Tensor<E> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    /// Accumulated gradients of all trainable leaves, keyed like the
    /// parameter map. Leaves without a gradient are skipped.
    pub fn grads(&self) -> Params<E> {
        self.tensors
            .iter()
            .filter_map(|(name, t)| t.grad().map(|g| (name.clone(), g)))
            .collect()
    }
}

fn buffer1<E: Elem>(buffers: &Params<E>, name: &str) -> Array1<E> {
    buffers
        .get(name)
        .unwrap_or_else(|| panic!("unknown buffer '{name}'"))
        .view()
        .into_dimensionality::<Ix1>()
        .expect("1-d buffer")
        .to_owned()
}

/// Fold per-batch statistics from a training forward into the running
/// estimates.
pub fn update_running_stats<E: Elem>(
    buffers: &mut Params<E>,
    stats: &[(String, Array1<E>, Array1<E>)],
) {
    let m = E::from_f64_(BN_MOMENTUM);
    let keep = E::one() - m;
    for (prefix, mean, var) in stats {
        for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
            let slot = buffers
                .get_mut(&format!("{prefix}.{suffix}"))
                .expect("buffer exists");
            for (r, &b) in slot.iter_mut().zip(batch.iter()) {
                *r = keep * *r + m * b;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// forward passes
// ---------------------------------------------------------------------------

/// Result of running the backbone: final per-vertex graph features, one
/// attention tensor `[E, heads]` per layer (rows align with the stored edge
/// list), and the batch-norm statistics gathered in training mode.
#[derive(Debug)]
pub struct BackboneOut<E: Elem> {
    pub h_final: Tensor<E>,
    pub attention: Vec<Tensor<E>>,
    pub bn_stats: Vec<(String, Array1<E>, Array1<E>)>,
}

fn bn_mode<E: Elem>(buffers: &Params<E>, prefix: &str, train_bn: bool) -> BnMode<E> {
    if train_bn {
        BnMode::Train
    } else {
        BnMode::Eval {
            mean: buffer1(buffers, &format!("{prefix}.running_mean")),
            var: buffer1(buffers, &format!("{prefix}.running_var")),
        }
    }
}

/// One patch convolution stage: four conv(3×3)-BN-ReLU blocks, the first
/// with stride 2, plus a stride-2 1×1 projection shortcut added before the
/// final ReLU. Halves the spatial size and doubles the channels.
pub(crate) fn patch_conv_stage<E: Elem>(
    cfg: &ModelConfig,
    vars: &Vars<E>,
    buffers: &Params<E>,
    layer: usize,
    x: &Tensor<E>,
    train_bn: bool,
    stats: &mut Vec<(String, Array1<E>, Array1<E>)>,
) -> Result<Tensor<E>> {
    let shape = x.shape();
    if shape[2] < 2 || shape[3] < 2 {
        return Err(Error::InvalidConfig(format!(
            "patch convolution stage {layer} needs spatial size >= 2, got {}x{} \
             (too many layers for this patch size)",
            shape[2], shape[3]
        )));
    }
    let eps = E::from_f64_(BN_EPS);
    let shortcut = conv2d(x, vars.get(&format!("l{layer}.shortcut.w")), 2, 0)?;
    let mut y = x.clone();
    for b in 0..4 {
        let prefix = format!("l{layer}.conv{b}");
        let stride = if b == 0 { 2 } else { 1 };
        let mode = bn_mode(buffers, &prefix, train_bn);
        let relu = b < 3;
        let (out, batch_stats) = conv_bn(
            &y,
            vars.get(&format!("{prefix}.w")),
            vars.get(&format!("{prefix}.gamma")),
            vars.get(&format!("{prefix}.beta")),
            stride,
            1,
            &mode,
            eps,
            relu,
        )?;
        if let Some((mean, var)) = batch_stats {
            stats.push((prefix, mean, var));
        }
        y = out;
    }
    let _ = cfg;
    Ok(ops::relu(&ops::add(&y, &shortcut)?))
}

/// The full patch convolution cascade over all stages followed by global
/// average pooling: `[N,1,p,p]` patches to `[N, hidden_dim]` features. Used
/// standalone for pretraining; the backbone runs the identical stages.
pub fn patch_cascade<E: Elem>(
    cfg: &ModelConfig,
    vars: &Vars<E>,
    buffers: &Params<E>,
    tape: &Tape<E>,
    patches: &ArrayD<E>,
    train_bn: bool,
) -> Result<(Tensor<E>, Vec<(String, Array1<E>, Array1<E>)>)> {
    let mut stats = Vec::new();
    let mut x = tape.leaf(patches.clone(), false);
    for l in 0..cfg.num_layers {
        x = patch_conv_stage(cfg, vars, buffers, l, &x, train_bn, &mut stats)?;
    }
    Ok((ops::global_avg_pool2d(&x)?, stats))
}

/// Full backbone: coordinate embedding, then every layer runs its patch
/// convolution stage and a masked self-attention graph convolution whose
/// update is `relu(linear(messages)) + pool(X)·W_p + H_prev`.
pub fn backbone<E: Elem>(
    cfg: &ModelConfig,
    vars: &Vars<E>,
    buffers: &Params<E>,
    tape: &Tape<E>,
    g: &GraphInputs<E>,
    train_bn: bool,
) -> Result<BackboneOut<E>> {
    cfg.validate()?;
    g.validate()?;
    let p = g.patches.shape()[2];
    if p < cfg.min_patch_px() {
        return Err(Error::InvalidConfig(format!(
            "patch size {p} too small for {} stride-2 stages (minimum {})",
            cfg.num_layers,
            cfg.min_patch_px()
        )));
    }
    let ln_eps = E::from_f64_(LN_EPS);
    let mut stats = Vec::new();
    let mut attention = Vec::new();

    let coords = tape.leaf(g.coords.clone(), false);
    let mut h = ops::linear(&coords, vars.get("coord.w"), Some(vars.get("coord.b")))?;
    let mut x = tape.leaf(g.patches.clone(), false);

    for l in 0..cfg.num_layers {
        x = patch_conv_stage(cfg, vars, buffers, l, &x, train_bn, &mut stats)?;
        let pooled = ops::global_avg_pool2d(&x)?;

        let ln = ops::layernorm(
            &h,
            vars.get(&format!("l{l}.ln.gamma")),
            vars.get(&format!("l{l}.ln.beta")),
            ln_eps,
        )?;
        let qkv = ops::matmul(&ln, vars.get(&format!("l{l}.attn.w_qkv")))?;
        let d = cfg.hidden_dim;
        let q = ops::slice_cols(&qkv, 0, d)?;
        let k = ops::slice_cols(&qkv, d, d)?;
        let v = ops::slice_cols(&qkv, 2 * d, d)?;
        let scores = ops::edge_scores(
            &q,
            &k,
            Rc::clone(&g.edge_rows),
            Rc::clone(&g.edge_cols),
            cfg.heads,
        )?;
        let attn = ops::softmax_over_segments(&scores, Rc::clone(&g.row_offsets))?;
        let messages = ops::edge_mix(
            &attn,
            &v,
            Rc::clone(&g.edge_rows),
            Rc::clone(&g.edge_cols),
            cfg.heads,
        )?;
        attention.push(attn);

        let ffn = ops::relu(&ops::linear(
            &messages,
            vars.get(&format!("l{l}.attn.w_o")),
            Some(vars.get(&format!("l{l}.attn.b_o"))),
        )?);
        let proj = ops::matmul(&pooled, vars.get(&format!("l{l}.w_p")))?;
        h = ops::add(&ops::add(&ffn, &proj)?, &h)?;
    }

    Ok(BackboneOut {
        h_final: h,
        attention,
        bn_stats: stats,
    })
}

/// Classification logits for pooled vertex groups: mean of `h` rows over
/// each `offsets` segment, then the shared classification head. Subject
/// logits use the per-subject offsets, slice logits a per-slice segmentation
/// of the same vertex order.
pub fn pooled_logits<E: Elem>(
    vars: &Vars<E>,
    h: &Tensor<E>,
    offsets: Rc<Vec<usize>>,
) -> Result<Tensor<E>> {
    let pooled = ops::segment_mean(h, offsets)?;
    ops::matmul(&pooled, vars.get("head.w_g"))
}

/// Per-vertex grade logits from the patch head.
pub fn patch_logits<E: Elem>(vars: &Vars<E>, h: &Tensor<E>) -> Result<Tensor<E>> {
    ops::linear(h, vars.get("head.patch.w"), Some(vars.get("head.patch.b")))
}

/// Per-vertex contribution of class `class_k` to the subject logit,
/// min-max normalized to [0,1] over the graph. Degenerate (constant) scores
/// map to 0.5 everywhere. Inference only (running batch-norm statistics).
pub fn vertex_attention<E: Elem>(
    cfg: &ModelConfig,
    params: &Params<E>,
    buffers: &Params<E>,
    g: &GraphInputs<E>,
    class_k: usize,
) -> Result<Vec<E>> {
    if class_k >= NUM_CLASSES {
        return Err(Error::InvalidConfig(format!("class {class_k} out of range")));
    }
    let tape = Tape::new();
    let vars = Vars::new(&tape, params, |_| false);
    let out = backbone(cfg, &vars, buffers, &tape, g, false)?;
    let h = out.h_final.value();
    let wg = params.get("head.w_g").expect("head.w_g");
    let n = g.num_vertices();
    let d = cfg.hidden_dim;
    let mut raw = Vec::with_capacity(n);
    for i in 0..n {
        let mut a = E::zero();
        for j in 0..d {
            a += h[IxDyn(&[i, j])] * wg[IxDyn(&[j, class_k])];
        }
        raw.push(a);
    }
    let lo = raw.iter().copied().fold(E::infinity(), E::min);
    let hi = raw.iter().copied().fold(E::neg_infinity(), E::max);
    let span = hi - lo;
    let half = E::from_f64_(0.5);
    Ok(raw
        .into_iter()
        .map(|a| if span > E::zero() { (a - lo) / span } else { half })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            hidden_dim: 8,
            heads: 2,
            num_layers: 2,
            base_channels: 4,
        }
    }

    /// Random symmetric adjacency with self-loops over `n` vertices, plus
    /// the flattened edge list, as f64 inputs with `p`-pixel patches.
    fn random_inputs(seed: u64, n: usize, p: usize) -> GraphInputs<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut adj: Vec<std::collections::BTreeSet<usize>> =
            (0..n).map(|i| std::collections::BTreeSet::from([i])).collect();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random_range(0.0..1.0) < 0.4 {
                    adj[i].insert(j);
                    adj[j].insert(i);
                }
            }
        }
        build_inputs(&mut rng, adj, n, p)
    }

    fn build_inputs(
        rng: &mut ChaCha8Rng,
        adj: Vec<std::collections::BTreeSet<usize>>,
        n: usize,
        p: usize,
    ) -> GraphInputs<f64> {
        let mut rows = Vec::new();
        let mut cols = Vec::new();
        let mut offsets = vec![0usize];
        for (i, nbrs) in adj.iter().enumerate() {
            for &j in nbrs {
                rows.push(i as u32);
                cols.push(j as u32);
            }
            offsets.push(rows.len());
        }
        GraphInputs {
            patches: ArrayD::from_shape_fn(IxDyn(&[n, 1, p, p]), |_| rng.random_range(-1.0..1.0)),
            coords: ArrayD::from_shape_fn(IxDyn(&[n, 3]), |_| rng.random_range(-1.0..1.0)),
            edge_rows: Rc::new(rows),
            edge_cols: Rc::new(cols),
            row_offsets: Rc::new(offsets),
            subject_offsets: Rc::new(vec![0, n]),
        }
    }

    #[test]
    fn default_config_shape_plan() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.head_dim(), 32);
        assert_eq!(
            (0..4).map(|l| cfg.stage_out_channels(l)).collect::<Vec<_>>(),
            vec![16, 32, 64, 128]
        );
        assert_eq!(cfg.min_patch_px(), 16);
        // Mismatched channel plan is rejected.
        let bad = ModelConfig { base_channels: 8, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn stage_shapes_for_64px_patches() {
        // Stage 1 on 64x64 gives 16-channel 32x32 maps; the full default
        // cascade ends at 128-channel 4x4 maps.
        let cfg = ModelConfig::default();
        let (params, buffers) = init_params::<f32>(&cfg, 0).unwrap();
        let tape = Tape::new();
        let vars = Vars::new(&tape, &params, |_| false);
        let mut x = tape.leaf(ArrayD::zeros(IxDyn(&[2, 1, 64, 64])), false);
        let mut stats = Vec::new();
        let expected = [(16, 32), (32, 16), (64, 8), (128, 4)];
        for l in 0..4 {
            x = patch_conv_stage(&cfg, &vars, &buffers, l, &x, false, &mut stats).unwrap();
            let (c, s) = expected[l];
            assert_eq!(x.shape(), vec![2, c, s, s], "after stage {l}");
        }
    }

    #[test]
    fn undersized_patch_is_rejected() {
        let cfg = ModelConfig::default();
        let (params, buffers) = init_params::<f64>(&cfg, 0).unwrap();
        let tape = Tape::new();
        let vars = Vars::new(&tape, &params, |_| false);
        let mut g = random_inputs(1, 3, 8);
        g.patches = ArrayD::zeros(IxDyn(&[3, 1, 8, 8]));
        let err = backbone(&cfg, &vars, &buffers, &tape, &g, false).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)), "{err}");
    }

    #[test]
    fn zero_conv_blocks_reduce_to_shortcut() {
        // With all conv weights zero and neutral BN (eval, mean 0 / var 1),
        // a stage outputs exactly relu(shortcut(x)).
        let cfg = small_cfg();
        let (mut params, buffers) = init_params::<f64>(&cfg, 3).unwrap();
        for b in 0..4 {
            params.get_mut(&format!("l0.conv{b}.w")).unwrap().fill(0.0);
        }
        let tape = Tape::new();
        let vars = Vars::new(&tape, &params, |_| false);
        let x = tape.leaf(
            ArrayD::from_shape_fn(IxDyn(&[2, 1, 8, 8]), |ix| (ix[3] as f64) - 3.5),
            false,
        );
        let mut stats = Vec::new();
        let y = patch_conv_stage(&cfg, &vars, &buffers, 0, &x, false, &mut stats).unwrap();
        let sc = ops::relu(&conv2d(&x, vars.get("l0.shortcut.w"), 2, 0).unwrap());
        assert_eq!(*y.value(), *sc.value());
    }

    #[test]
    fn residual_identity_when_layer_outputs_are_zeroed() {
        // Zeroing the attention output projection, its bias and W_p makes
        // every layer a bitwise identity on the graph stream.
        let cfg = small_cfg();
        let (mut params, buffers) = init_params::<f64>(&cfg, 4).unwrap();
        for l in 0..cfg.num_layers {
            params.get_mut(&format!("l{l}.attn.w_o")).unwrap().fill(0.0);
            params.get_mut(&format!("l{l}.attn.b_o")).unwrap().fill(0.0);
            params.get_mut(&format!("l{l}.w_p")).unwrap().fill(0.0);
        }
        let g = random_inputs(5, 6, 8);
        let tape = Tape::new();
        let vars = Vars::new(&tape, &params, |_| false);
        let out = backbone(&cfg, &vars, &buffers, &tape, &g, false).unwrap();
        let coords = tape.leaf(g.coords.clone(), false);
        let h0 = ops::linear(&coords, vars.get("coord.w"), Some(vars.get("coord.b"))).unwrap();
        assert_eq!(*out.h_final.value(), *h0.value());
    }

    #[test]
    fn self_loop_only_graph_gives_identity_attention() {
        let cfg = small_cfg();
        let (params, buffers) = init_params::<f64>(&cfg, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 5;
        let adj = (0..n).map(|i| std::collections::BTreeSet::from([i])).collect();
        let g = build_inputs(&mut rng, adj, n, 8);
        let tape = Tape::new();
        let vars = Vars::new(&tape, &params, |_| false);
        let out = backbone(&cfg, &vars, &buffers, &tape, &g, false).unwrap();
        for attn in &out.attention {
            assert!(attn.value().iter().all(|&a| a == 1.0));
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_match_dense_oracle() {
        // Layer-1 attention recomputed densely from the raw parameters with
        // -inf masking of non-edges must match the CSR path.
        let cfg = small_cfg();
        let (params, buffers) = init_params::<f64>(&cfg, 8).unwrap();
        let g = random_inputs(9, 6, 8);
        let n = g.num_vertices();
        let tape = Tape::new();
        let vars = Vars::new(&tape, &params, |_| false);
        let out = backbone(&cfg, &vars, &buffers, &tape, &g, false).unwrap();
        let attn = out.attention[0].value();

        // Row sums over each vertex's neighbor segment.
        for i in 0..n {
            for hd in 0..cfg.heads {
                let s: f64 = (g.row_offsets[i]..g.row_offsets[i + 1])
                    .map(|e| attn[IxDyn(&[e, hd])])
                    .sum();
                assert!((s - 1.0).abs() < 1e-12, "row {i} head {hd} sums to {s}");
            }
        }

        // Dense oracle: H0 = coords·W + b, layernorm, QKV, masked softmax.
        let coords = g.coords.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let w = params["coord.w"].view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b = params["coord.b"].view().into_dimensionality::<Ix1>().unwrap();
        let h0 = coords.dot(&w) + &b;
        let d = cfg.hidden_dim;
        let mut ln = Array2::<f64>::zeros((n, d));
        let lg = params["l0.ln.gamma"].view().into_dimensionality::<Ix1>().unwrap();
        let lb = params["l0.ln.beta"].view().into_dimensionality::<Ix1>().unwrap();
        for i in 0..n {
            let row = h0.row(i);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = (var + LN_EPS).sqrt().recip();
            for j in 0..d {
                ln[(i, j)] = (row[j] - mean) * inv * lg[j] + lb[j];
            }
        }
        let wqkv = params["l0.attn.w_qkv"].view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let qkv = ln.dot(&wqkv);
        let hd_dim = cfg.head_dim();
        let edge_set: std::collections::HashSet<(usize, usize)> = g
            .edge_rows
            .iter()
            .zip(g.edge_cols.iter())
            .map(|(&r, &c)| (r as usize, c as usize))
            .collect();
        for hd in 0..cfg.heads {
            let base = hd * hd_dim;
            let mut dense = Array2::<f64>::from_elem((n, n), f64::NEG_INFINITY);
            for i in 0..n {
                for j in 0..n {
                    if edge_set.contains(&(i, j)) {
                        let mut dot = 0.0;
                        for t in 0..hd_dim {
                            dot += qkv[(i, base + t)] * qkv[(j, d + base + t)];
                        }
                        dense[(i, j)] = dot / (hd_dim as f64).sqrt();
                    }
                }
            }
            for i in 0..n {
                let max = dense.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = dense.row(i).iter().map(|&s| (s - max).exp()).sum();
                for e in g.row_offsets[i]..g.row_offsets[i + 1] {
                    let j = g.edge_cols[e] as usize;
                    let expect = (dense[(i, j)] - max).exp() / total;
                    let got = attn[IxDyn(&[e, hd])];
                    assert!(
                        (got - expect).abs() < 1e-12,
                        "edge ({i},{j}) head {hd}: {got} vs dense {expect}"
                    );
                }
            }
        }
    }

    #[test]
    fn subject_logits_invariant_under_vertex_permutation() {
        let cfg = small_cfg();
        let (params, buffers) = init_params::<f64>(&cfg, 10).unwrap();
        let g = random_inputs(11, 7, 8);
        let n = g.num_vertices();
        let forward = |g: &GraphInputs<f64>| -> Vec<f64> {
            let tape = Tape::new();
            let vars = Vars::new(&tape, &params, |_| false);
            let out = backbone(&cfg, &vars, &buffers, &tape, g, false).unwrap();
            let logits =
                pooled_logits(&vars, &out.h_final, Rc::clone(&g.subject_offsets)).unwrap();
            logits.value().iter().copied().collect()
        };
        let base = forward(&g);

        // Reverse the vertex order, remapping edges accordingly.
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut adj: Vec<std::collections::BTreeSet<usize>> =
            vec![std::collections::BTreeSet::new(); n];
        for (&r, &c) in g.edge_rows.iter().zip(g.edge_cols.iter()) {
            adj[inv[r as usize]].insert(inv[c as usize]);
        }
        let mut rows = Vec::new();
        let mut cols = Vec::new();
        let mut offsets = vec![0usize];
        for nbrs in &adj {
            for &j in nbrs {
                rows.push(0u32 + offsets.len() as u32 - 1);
                cols.push(j as u32);
            }
            offsets.push(rows.len());
        }
        let mut patches = ArrayD::zeros(g.patches.raw_dim());
        let mut coords = ArrayD::zeros(g.coords.raw_dim());
        for (new, &old) in perm.iter().enumerate() {
            patches
                .slice_mut(ndarray::s![new, .., .., ..])
                .assign(&g.patches.slice(ndarray::s![old, .., .., ..]));
            coords
                .slice_mut(ndarray::s![new, ..])
                .assign(&g.coords.slice(ndarray::s![old, ..]));
        }
        let permuted = GraphInputs {
            patches,
            coords,
            edge_rows: Rc::new(rows),
            edge_cols: Rc::new(cols),
            row_offsets: Rc::new(offsets),
            subject_offsets: Rc::new(vec![0, n]),
        };
        let swapped = forward(&permuted);
        for (a, b) in base.iter().zip(swapped.iter()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn batched_forward_matches_independent_subjects() {
        // Two subjects merged block-diagonally give the same logits as two
        // separate single-subject forwards.
        let cfg = small_cfg();
        let (params, buffers) = init_params::<f64>(&cfg, 12).unwrap();
        let g1 = random_inputs(13, 5, 8);
        let g2 = random_inputs(14, 6, 8);
        let single = |g: &GraphInputs<f64>| -> Vec<f64> {
            let tape = Tape::new();
            let vars = Vars::new(&tape, &params, |_| false);
            let out = backbone(&cfg, &vars, &buffers, &tape, g, false).unwrap();
            pooled_logits(&vars, &out.h_final, Rc::clone(&g.subject_offsets))
                .unwrap()
                .value()
                .iter()
                .copied()
                .collect()
        };
        let (n1, n2) = (g1.num_vertices(), g2.num_vertices());
        let mut patches = ArrayD::zeros(IxDyn(&[n1 + n2, 1, 8, 8]));
        patches.slice_mut(ndarray::s![..n1, .., .., ..]).assign(&g1.patches);
        patches.slice_mut(ndarray::s![n1.., .., .., ..]).assign(&g2.patches);
        let mut coords = ArrayD::zeros(IxDyn(&[n1 + n2, 3]));
        coords.slice_mut(ndarray::s![..n1, ..]).assign(&g1.coords);
        coords.slice_mut(ndarray::s![n1.., ..]).assign(&g2.coords);
        let mut rows = g1.edge_rows.to_vec();
        let mut cols = g1.edge_cols.to_vec();
        rows.extend(g2.edge_rows.iter().map(|&r| r + n1 as u32));
        cols.extend(g2.edge_cols.iter().map(|&c| c + n1 as u32));
        let mut offsets = g1.row_offsets.to_vec();
        offsets.extend(g2.row_offsets[1..].iter().map(|&o| o + g1.edge_rows.len()));
        let merged = GraphInputs {
            patches,
            coords,
            edge_rows: Rc::new(rows),
            edge_cols: Rc::new(cols),
            row_offsets: Rc::new(offsets),
            subject_offsets: Rc::new(vec![0, n1, n1 + n2]),
        };
        // Eval-mode BN is per-vertex, so batching is exact.
        let tape = Tape::new();
        let vars = Vars::new(&tape, &params, |_| false);
        let out = backbone(&cfg, &vars, &buffers, &tape, &merged, false).unwrap();
        let logits = pooled_logits(&vars, &out.h_final, Rc::clone(&merged.subject_offsets))
            .unwrap();
        let lv = logits.value();
        let (a, b) = (single(&g1), single(&g2));
        for c in 0..NUM_CLASSES {
            assert!((lv[IxDyn(&[0, c])] - a[c]).abs() < 1e-9);
            assert!((lv[IxDyn(&[1, c])] - b[c]).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_scores_mean_equals_subject_logit() {
        let cfg = small_cfg();
        let (params, buffers) = init_params::<f64>(&cfg, 15).unwrap();
        let g = random_inputs(16, 6, 8);
        let tape = Tape::new();
        let vars = Vars::new(&tape, &params, |_| false);
        let out = backbone(&cfg, &vars, &buffers, &tape, &g, false).unwrap();
        let logits = pooled_logits(&vars, &out.h_final, Rc::clone(&g.subject_offsets)).unwrap();
        let h = out.h_final.value();
        let wg = &params["head.w_g"];
        let n = g.num_vertices();
        for k in 0..NUM_CLASSES {
            let mean: f64 = (0..n)
                .map(|i| (0..cfg.hidden_dim).map(|j| h[IxDyn(&[i, j])] * wg[IxDyn(&[j, k])]).sum::<f64>())
                .sum::<f64>()
                / n as f64;
            assert!((mean - logits.value()[IxDyn(&[0, k])]).abs() < 1e-10);
        }
        // Normalized scores stay in [0,1]; a zeroed head column degenerates
        // to 0.5 everywhere.
        let scores = vertex_attention(&cfg, &params, &buffers, &g, 1).unwrap();
        assert!(scores.iter().all(|&s| (0.0..=1.0).contains(&s)));
        let mut flat = params.clone();
        flat.get_mut("head.w_g").unwrap().fill(0.0);
        let degenerate = vertex_attention(&cfg, &flat, &buffers, &g, 0).unwrap();
        assert!(degenerate.iter().all(|&s| s == 0.5));
    }

    #[test]
    fn slice_pooled_features_partition_the_subject_mean() {
        // Vertex-count-weighted mean of per-segment logits equals the
        // subject logits (pooling is a partition of the mean and the head
        // is linear).
        let cfg = small_cfg();
        let (params, buffers) = init_params::<f64>(&cfg, 17).unwrap();
        let g = random_inputs(18, 9, 8);
        let tape = Tape::new();
        let vars = Vars::new(&tape, &params, |_| false);
        let out = backbone(&cfg, &vars, &buffers, &tape, &g, false).unwrap();
        let subject =
            pooled_logits(&vars, &out.h_final, Rc::clone(&g.subject_offsets)).unwrap();
        let seg = Rc::new(vec![0usize, 2, 5, 9]);
        let slices = pooled_logits(&vars, &out.h_final, Rc::clone(&seg)).unwrap();
        let sv = slices.value();
        for c in 0..NUM_CLASSES {
            let weighted: f64 = seg
                .windows(2)
                .enumerate()
                .map(|(s, w)| sv[IxDyn(&[s, c])] * (w[1] - w[0]) as f64)
                .sum::<f64>()
                / 9.0;
            assert!((weighted - subject.value()[IxDyn(&[0, c])]).abs() < 1e-10);
        }
    }

    #[test]
    fn full_model_gradient_check() {
        // Every parameter's analytic gradient through the complete model
        // (backbone + subject head + cross-entropy) matches central finite
        // differences at 1e-4 relative tolerance in f64.
        let cfg = small_cfg();
        let (params, buffers) = init_params::<f64>(&cfg, 20).unwrap();
        let g = random_inputs(21, 6, 8);
        let targets = Rc::new(vec![1usize]);

        let loss_of = |p: &Params<f64>| -> f64 {
            let tape = Tape::new();
            let vars = Vars::new(&tape, p, |_| false);
            let out = backbone(&cfg, &vars, &buffers, &tape, &g, true).unwrap();
            let logits =
                pooled_logits(&vars, &out.h_final, Rc::clone(&g.subject_offsets)).unwrap();
            let patch = patch_logits(&vars, &out.h_final).unwrap();
            let loss = ops::add(
                &ops::cross_entropy(&logits, Rc::clone(&targets)).unwrap(),
                &ops::cross_entropy(&patch, Rc::new(vec![0, 1, 2, 0, 1, 2])).unwrap(),
            )
            .unwrap();
            loss.value()[IxDyn(&[])]
        };

        let tape = Tape::new();
        let vars = Vars::new(&tape, &params, |_| true);
        let out = backbone(&cfg, &vars, &buffers, &tape, &g, true).unwrap();
        let logits = pooled_logits(&vars, &out.h_final, Rc::clone(&g.subject_offsets)).unwrap();
        let patch = patch_logits(&vars, &out.h_final).unwrap();
        let loss = ops::add(
            &ops::cross_entropy(&logits, Rc::clone(&targets)).unwrap(),
            &ops::cross_entropy(&patch, Rc::new(vec![0, 1, 2, 0, 1, 2])).unwrap(),
        )
        .unwrap();
        loss.backward().unwrap();
        let grads = vars.grads();

        let h = 1e-5;
        let mut checked = 0usize;
        for (name, grad) in &grads {
            let gs = grad.as_slice().unwrap();
            let len = params[name].len();
            // Subsample large tensors; always check small ones fully.
            let step = (len / 24).max(1);
            for i in (0..len).step_by(step) {
                let mut plus = params.clone();
                plus.get_mut(name).unwrap().as_slice_mut().unwrap()[i] += h;
                let mut minus = params.clone();
                minus.get_mut(name).unwrap().as_slice_mut().unwrap()[i] -= h;
                let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let denom = numeric.abs().max(gs[i].abs()).max(1e-3);
                assert!(
                    (numeric - gs[i]).abs() / denom < 1e-4,
                    "{name}[{i}]: analytic {} vs numeric {numeric}",
                    gs[i]
                );
                checked += 1;
            }
        }
        assert!(checked > 200, "only {checked} gradient entries checked");
    }

    #[test]
    fn running_stats_update_moves_toward_batch() {
        let mut buffers = Params::<f64>::new();
        buffers.insert("l0.conv0.running_mean".into(), ArrayD::zeros(IxDyn(&[2])));
        buffers.insert("l0.conv0.running_var".into(), ArrayD::ones(IxDyn(&[2])));
        let stats = vec![(
            "l0.conv0".to_string(),
            Array1::from_vec(vec![1.0, -1.0]),
            Array1::from_vec(vec![2.0, 0.5]),
        )];
        update_running_stats(&mut buffers, &stats);
        let m = &buffers["l0.conv0.running_mean"];
        let v = &buffers["l0.conv0.running_var"];
        assert!((m[IxDyn(&[0])] - 0.1).abs() < 1e-12);
        assert!((m[IxDyn(&[1])] + 0.1).abs() < 1e-12);
        assert!((v[IxDyn(&[0])] - (0.9 + 0.2)).abs() < 1e-12);
        assert!((v[IxDyn(&[1])] - (0.9 + 0.05)).abs() < 1e-12);
    }
}
