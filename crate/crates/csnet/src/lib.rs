//! Cartilage surface graphs and surface-convolution networks.
//!
//! This crate turns labeled knee-like volumes into graph representations of
//! the cartilage surfaces and grades cartilage defects with a stacked
//! surface-convolution network (CSNet). It is organized as a pipeline:
//!
//! 1. [`volume`] — anisotropic labeled volumes, bundle I/O and slice-wise
//!    morphological label refinement.
//! 2. [`phantom`] — procedural knee-like phantoms with a synthetic cartilage
//!    band and injectable defects, providing patch/slice/subject ground truth.
//! 3. [`graph`] — field-of-view adjustment, contour tracing, vertex placement
//!    with patch extraction, and typed edge construction (surface,
//!    cross-cartilage, adjacent-slice, self-loops).
//! 4. [`tensor`] — a small dense tensor engine with reverse-mode automatic
//!    differentiation and the Adam optimizer.
//! 5. [`model`] — the CSNet itself: patch convolution interleaved with masked
//!    self-attention graph convolution, multi-level heads, and per-vertex
//!    attention extraction.
//! 6. [`pipeline`] — block-diagonal graph batching, two-stage training,
//!    metrics, and the edge-ablation harness.
//! 7. [`viz`] — PLY export of per-vertex predictions and attention.
//!
//! A quick tour, building a graph from a generated phantom:
//!
//! ```
//! use csnet::phantom::{PhantomSpec, generate_phantom};
//! use csnet::graph::{GraphBuildConfig, build_graph};
//!
//! let spec = PhantomSpec::example(7);
//! let (vol, _truth) = generate_phantom(&spec).unwrap();
//! let cfg = GraphBuildConfig { patch_size_px: 32, ..GraphBuildConfig::default() };
//! let graph = build_graph(&vol, &cfg).unwrap();
//! assert!(graph.vertices.len() > 0);
//! ```

pub mod error;
pub mod graph;
pub mod model;
pub mod phantom;
pub mod pipeline;
pub mod tensor;
pub mod viz;
pub mod volume;

pub use error::Error;
