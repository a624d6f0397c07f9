//! Surface visualization export: per-vertex predicted grades and attention
//! scores on the vertex point set as an ASCII PLY file, with the on-contour
//! chain edges optionally included as PLY edges.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{CartilageGraph, EdgeKind};

/// Write `graph`'s vertices as an ASCII PLY point set. Each point carries
/// its mm coordinates, the predicted grade, an attention score in [0,1] and
/// the cartilage id. With `with_surface_edges`, each stored surface edge
/// (counted once per unordered pair) becomes a PLY edge.
pub fn export_attention_ply(
    graph: &CartilageGraph,
    grades: &[u8],
    attention: &[f32],
    with_surface_edges: bool,
    path: &Path,
) -> Result<()> {
    let n = graph.vertices.len();
    if grades.len() != n || attention.len() != n {
        return Err(Error::InvalidGraph(format!(
            "{n} vertices but {} grades and {} attention scores",
            grades.len(),
            attention.len()
        )));
    }
    if attention.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::InvalidGraph("attention scores must lie in [0,1]".into()));
    }

    let mut edges = Vec::new();
    if with_surface_edges {
        for i in 0..n {
            let (nbrs, kinds) = graph.csr.neighbors(i);
            for (&j, &k) in nbrs.iter().zip(kinds) {
                if k == EdgeKind::Surface && (j as usize) > i {
                    edges.push((i, j as usize));
                }
            }
        }
    }

    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "comment subject {}", graph.subject_id);
    let _ = writeln!(out, "element vertex {n}");
    out.push_str(
        "property float x\nproperty float y\nproperty float z\n\
         property uchar grade_pred\nproperty float attention\nproperty uchar cartilage_id\n",
    );
    if with_surface_edges {
        let _ = writeln!(out, "element edge {}", edges.len());
        out.push_str("property int vertex1\nproperty int vertex2\n");
    }
    out.push_str("end_header\n");
    for (i, v) in graph.vertices.iter().enumerate() {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {}",
            v.coord_mm[0], v.coord_mm[1], v.coord_mm[2], grades[i], attention[i], v.cartilage_id
        );
    }
    for (a, b) in edges {
        let _ = writeln!(out, "{a} {b}");
    }
    fs::write(path, out)?;
    Ok(())
}
