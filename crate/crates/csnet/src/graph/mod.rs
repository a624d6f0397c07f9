//! Cartilage surface graphs: field-of-view adjustment, contour tracing,
//! IoU-controlled vertex placement with patch extraction, and typed edge
//! construction.
//!
//! The graph over a subject has one vertex per surface patch. Vertices carry
//! the physical coordinate `h = (s·t, x, y)` and a 2-D intensity patch;
//! edges come in three families plus self-loops:
//!
//! * `Surface`: arc-consecutive vertices on the same cartilage and slice,
//! * `Cross`: vertices of different cartilages on the same slice closer
//!   than `d_c_mm`,
//! * `Adjacent`: vertices of the same cartilage on adjacent slices closer
//!   than `d_a_factor · √(t² + p_mm²)`.

pub mod contour;
mod io;

pub use io::{load_graph, save_graph};

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::volume::{flip_right_knee, refine_labels, LabeledVolume, LABEL_PATELLA};

use contour::Contour;

/// Field-of-view margins in mm relative to the patella extremes.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FovMargins {
    pub superior: f64,
    pub extent_si: f64,
    pub anterior: f64,
    pub extent_ap: f64,
}

impl Default for FovMargins {
    fn default() -> Self {
        FovMargins {
            superior: 9.0,
            extent_si: 100.0,
            anterior: 3.0,
            extent_ap: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphBuildConfig {
    /// Patch side length p in pixels; even and ≥ 8.
    pub patch_size_px: usize,
    /// In-patch sample spacing in mm.
    pub patch_spacing_mm: f64,
    /// Overlap of neighboring patches along the contour, in (0, 1).
    pub target_iou: f64,
    /// Cross-cartilage distance threshold D_c in mm.
    pub d_c_mm: f64,
    /// The factor in D_a = factor · √(t² + p_mm²).
    pub d_a_factor: f64,
    pub fov_margins_mm: FovMargins,
    /// Disk radius of the label-refinement opening, in voxels.
    pub opening_radius_vox: usize,
}

impl Default for GraphBuildConfig {
    fn default() -> Self {
        GraphBuildConfig {
            patch_size_px: 64,
            patch_spacing_mm: 0.303,
            target_iou: 1.0 / 3.0,
            d_c_mm: 9.696,
            d_a_factor: 0.8,
            fov_margins_mm: FovMargins::default(),
            opening_radius_vox: 1,
        }
    }
}

impl GraphBuildConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size_px < 8 || self.patch_size_px % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "patch_size_px must be even and >= 8, got {}",
                self.patch_size_px
            )));
        }
        if self.patch_spacing_mm <= 0.0 || self.d_c_mm <= 0.0 || self.d_a_factor <= 0.0 {
            return Err(Error::InvalidConfig("thresholds must be positive".into()));
        }
        if !(self.target_iou > 0.0 && self.target_iou < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "target_iou must be in (0,1), got {}",
                self.target_iou
            )));
        }
        Ok(())
    }

    /// Physical patch side length p_mm.
    pub fn patch_extent_mm(&self) -> f64 {
        self.patch_size_px as f64 * self.patch_spacing_mm
    }

    /// Arc step Δ between vertex centers. Two axis-aligned p×p patches whose
    /// centers differ by δ along one axis have IoU (p−δ)/(p+δ); solving for
    /// the target IoU gives δ = p·(1−IoU)/(1+IoU). The default 1/3 yields
    /// δ = p_mm/2.
    pub fn vertex_step_mm(&self) -> f64 {
        self.patch_extent_mm() * (1.0 - self.target_iou) / (1.0 + self.target_iou)
    }

    /// Adjacent-slice distance threshold for inter-slice spacing `t_mm`.
    pub fn d_a_mm(&self, t_mm: f64) -> f64 {
        let p_mm = self.patch_extent_mm();
        self.d_a_factor * (t_mm * t_mm + p_mm * p_mm).sqrt()
    }
}

/// Axis-aligned mm box plus inclusive slice range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fov {
    pub superior_mm: f32,
    pub inferior_mm: f32,
    pub anterior_mm: f32,
    pub posterior_mm: f32,
    pub slice_range: (usize, usize),
}

impl Fov {
    pub fn contains(&self, y_mm: f64, x_mm: f64) -> bool {
        y_mm >= self.superior_mm as f64
            && y_mm <= self.inferior_mm as f64
            && x_mm >= self.anterior_mm as f64
            && x_mm <= self.posterior_mm as f64
    }
}

/// One surface patch: anchor on a traced bone contour plus its image patch.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceVertex {
    /// 0 = femur, 1 = tibia, 2 = patella.
    pub cartilage_id: u8,
    pub slice_index: usize,
    /// h = (s·t, x, y) in mm.
    pub coord_mm: [f32; 3],
    /// Position along the traced contour, in mm.
    pub arc_pos_mm: f32,
    pub patch: Array2<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum EdgeKind {
    SelfLoop = 0,
    Surface = 1,
    Cross = 2,
    Adjacent = 3,
}

impl EdgeKind {
    pub fn from_u8(v: u8) -> Option<EdgeKind> {
        match v {
            0 => Some(EdgeKind::SelfLoop),
            1 => Some(EdgeKind::Surface),
            2 => Some(EdgeKind::Cross),
            3 => Some(EdgeKind::Adjacent),
            _ => None,
        }
    }
}

/// Compressed sparse rows with per-edge kinds; columns sorted within a row.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub row_ptr: Vec<u32>,
    pub cols: Vec<u32>,
    pub kinds: Vec<EdgeKind>,
}

impl Csr {
    pub fn n(&self) -> usize {
        self.row_ptr.len().saturating_sub(1)
    }

    pub fn neighbors(&self, i: usize) -> (&[u32], &[EdgeKind]) {
        let (a, b) = (self.row_ptr[i] as usize, self.row_ptr[i + 1] as usize);
        (&self.cols[a..b], &self.kinds[a..b])
    }

    pub fn kind_of(&self, i: usize, j: usize) -> Option<EdgeKind> {
        let (cols, kinds) = self.neighbors(i);
        cols.binary_search(&(j as u32)).ok().map(|k| kinds[k])
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.row_ptr.len() != n + 1 || self.row_ptr.first() != Some(&0) {
            return Err(Error::InvalidGraph("bad row pointer table".into()));
        }
        if self.row_ptr.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidGraph("row pointers not monotonic".into()));
        }
        if *self.row_ptr.last().unwrap() as usize != self.cols.len()
            || self.cols.len() != self.kinds.len()
        {
            return Err(Error::InvalidGraph("edge count mismatch".into()));
        }
        if self.cols.iter().any(|&c| c as usize >= n) {
            return Err(Error::InvalidGraph("column index out of range".into()));
        }
        for i in 0..n {
            let (cols, _) = self.neighbors(i);
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidGraph(format!("row {i} not strictly sorted")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CartilageGraph {
    pub subject_id: String,
    pub inter_slice_spacing_mm: f32,
    pub fov: Fov,
    pub patch_size_px: usize,
    pub vertices: Vec<SurfaceVertex>,
    pub csr: Csr,
    pub subject_grade: Option<u8>,
    pub slice_grades: Option<Vec<u8>>,
    pub patch_grades: Option<Vec<u8>>,
}

impl CartilageGraph {
    /// Structural invariants: CSR well-formed, symmetric with matching kinds,
    /// exactly one self-loop per vertex, and each kind obeying its
    /// vertex-attribute rule.
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        self.csr.validate(n)?;
        for i in 0..n {
            let (cols, kinds) = self.csr.neighbors(i);
            let mut self_loops = 0;
            for (&j, &kind) in cols.iter().zip(kinds) {
                let j = j as usize;
                if self.csr.kind_of(j, i) != Some(kind) {
                    return Err(Error::InvalidGraph(format!(
                        "edge ({i},{j}) not symmetric with matching kind"
                    )));
                }
                let (vi, vj) = (&self.vertices[i], &self.vertices[j]);
                let ok = match kind {
                    EdgeKind::SelfLoop => {
                        self_loops += 1;
                        i == j
                    }
                    EdgeKind::Surface => {
                        i != j
                            && vi.cartilage_id == vj.cartilage_id
                            && vi.slice_index == vj.slice_index
                    }
                    EdgeKind::Cross => {
                        vi.cartilage_id != vj.cartilage_id && vi.slice_index == vj.slice_index
                    }
                    EdgeKind::Adjacent => {
                        vi.cartilage_id == vj.cartilage_id
                            && vi.slice_index.abs_diff(vj.slice_index) == 1
                    }
                };
                if !ok {
                    return Err(Error::InvalidGraph(format!(
                        "edge ({i},{j}) violates kind rule {kind:?}"
                    )));
                }
            }
            if self_loops != 1 {
                return Err(Error::InvalidGraph(format!(
                    "vertex {i} has {self_loops} self-loops"
                )));
            }
        }
        if let Some(p) = &self.patch_grades {
            if p.len() != n {
                return Err(Error::InvalidGraph("patch grade count mismatch".into()));
            }
        }
        Ok(())
    }
}

/// Compute the FOV box from the patella extremes and the bone slice range.
/// Right knees are standardized to left before measuring.
pub fn adjust_fov(vol: &LabeledVolume, cfg: &GraphBuildConfig) -> Result<Fov> {
    let vol = flip_right_knee(vol);
    let (s, h, w) = vol.dims();
    let (row_sp, col_sp) = vol.in_slice_spacing_mm;
    let mut patella_top: Option<usize> = None;
    let mut patella_front: Option<usize> = None;
    let mut first_bone: Option<usize> = None;
    let mut last_bone = 0usize;
    for si in 0..s {
        let mut any = false;
        for y in 0..h {
            for x in 0..w {
                let l = vol.labels[(si, y, x)];
                if l != 0 {
                    any = true;
                    if l == LABEL_PATELLA {
                        patella_top = Some(patella_top.map_or(y, |t| t.min(y)));
                        patella_front = Some(patella_front.map_or(x, |f| f.min(x)));
                    }
                }
            }
        }
        if any {
            first_bone.get_or_insert(si);
            last_bone = si;
        }
    }
    let top = patella_top.ok_or(Error::NoPatella)?;
    let front = patella_front.unwrap();
    let m = &cfg.fov_margins_mm;
    let superior = top as f64 * row_sp - m.superior;
    let anterior = front as f64 * col_sp - m.anterior;
    Ok(Fov {
        superior_mm: superior as f32,
        inferior_mm: (superior + m.extent_si) as f32,
        anterior_mm: anterior as f32,
        posterior_mm: (anterior + m.extent_ap) as f32,
        slice_range: (first_bone.unwrap(), last_bone),
    })
}

/// One bone's contour on one slice, with its FOV-clipped index runs.
/// Arc positions always refer to the full traced contour, so downstream
/// consumers (ground truth, vertex anchors) share one parameterization.
#[derive(Debug, Clone)]
pub struct BoneContour {
    pub cartilage_id: u8,
    pub slice_index: usize,
    pub contour: Contour,
    /// Maximal in-FOV point-index runs, in trace order; a run crossing the
    /// trace origin of a closed contour is merged across the seam.
    pub runs: Vec<Vec<usize>>,
}

fn clip_runs(contour: &Contour, inside: &[bool]) -> Vec<Vec<usize>> {
    let n = inside.len();
    if inside.iter().all(|&b| b) {
        return vec![(0..n).collect()];
    }
    let mut runs: Vec<Vec<usize>> = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    for (k, &ok) in inside.iter().enumerate() {
        if ok {
            cur.push(k);
        } else if !cur.is_empty() {
            runs.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        runs.push(cur);
    }
    // Merge a wrap-around pair on closed contours.
    if contour.closed && runs.len() >= 2 && inside[0] && inside[n - 1] {
        let head = runs.remove(0);
        runs.last_mut().unwrap().extend(head);
    }
    runs
}

/// Trace the boundary of each bone on each in-range slice. Labels are
/// expected to be refined (one component per bone per slice); only the
/// scan-order-first component is traced otherwise.
pub fn trace_contours(vol: &LabeledVolume, fov: &Fov) -> Vec<BoneContour> {
    let spacing = vol.in_slice_spacing_mm;
    let mut out = Vec::new();
    for si in fov.slice_range.0..=fov.slice_range.1 {
        let slice = vol.labels.index_axis(ndarray::Axis(0), si);
        for bone in 1u8..=3 {
            let mask = slice.mapv(|l| l == bone);
            let Some(contour) = contour::trace_mask_contour(&mask, spacing) else {
                continue;
            };
            let inside: Vec<bool> = (0..contour.points.len())
                .map(|k| {
                    let (y, x) = contour.point_mm(k, spacing);
                    fov.contains(y, x)
                })
                .collect();
            let runs = clip_runs(&contour, &inside);
            if runs.is_empty() {
                continue;
            }
            out.push(BoneContour {
                cartilage_id: bone - 1,
                slice_index: si,
                contour,
                runs,
            });
        }
    }
    out
}

/// Bilinear sample of a p×p axis-aligned patch centered at `(y, x)` mm,
/// zero-padded outside the slice.
fn sample_patch(
    slice: ArrayView2<f32>,
    center: (f64, f64),
    p: usize,
    step_mm: f64,
    spacing: (f64, f64),
) -> Array2<f32> {
    let (h, w) = slice.dim();
    let half = (p as f64 - 1.0) / 2.0;
    Array2::from_shape_fn((p, p), |(i, j)| {
        let y = center.0 + (i as f64 - half) * step_mm;
        let x = center.1 + (j as f64 - half) * step_mm;
        let r = y / spacing.0;
        let c = x / spacing.1;
        if r < 0.0 || c < 0.0 || r > (h - 1) as f64 || c > (w - 1) as f64 {
            return 0.0;
        }
        let (r0, c0) = (r.floor() as usize, c.floor() as usize);
        let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
        let (fr, fc) = (r - r0 as f64, c - c0 as f64);
        let v00 = slice[(r0, c0)] as f64;
        let v01 = slice[(r0, c1)] as f64;
        let v10 = slice[(r1, c0)] as f64;
        let v11 = slice[(r1, c1)] as f64;
        let v = v00 * (1.0 - fr) * (1.0 - fc)
            + v01 * (1.0 - fr) * fc
            + v10 * fr * (1.0 - fc)
            + v11 * fr * fc;
        v as f32
    })
}

/// Arc positions (on the full contour) at which vertices are placed for one
/// clipped run. Runs shorter than one patch side get a single centered
/// vertex; otherwise uniform steps of Δ with count floor(len/Δ)+1.
fn run_vertex_arcs(
    contour: &Contour,
    run: &[usize],
    step: f64,
    patch_extent: f64,
) -> Vec<f64> {
    let full = run.len() == contour.points.len() && contour.closed;
    // Points after a wrap-around seam continue past total_len.
    let arc_at = |k: usize| -> f64 {
        let a = contour.arc_mm[run[k]];
        if run[k] < run[0] {
            a + contour.total_len_mm
        } else {
            a
        }
    };
    let start = contour.arc_mm[run[0]];
    let len = if full {
        contour.total_len_mm
    } else {
        arc_at(run.len() - 1) - start
    };
    if len < patch_extent {
        return vec![wrap_arc(start + len / 2.0, contour.total_len_mm)];
    }
    let mut n = (len / step).floor() as usize + 1;
    // On a fully closed contour the step lattice may land back on the start.
    if full && (n - 1) as f64 * step >= len - 1e-9 {
        n -= 1;
    }
    (0..n)
        .map(|k| wrap_arc(start + k as f64 * step, contour.total_len_mm))
        .collect()
}

fn wrap_arc(a: f64, total: f64) -> f64 {
    if total > 0.0 && a >= total {
        a - total
    } else {
        a
    }
}

/// Place vertices along all contour runs and extract their patches.
pub fn place_vertices(
    contours: &[BoneContour],
    vol: &LabeledVolume,
    cfg: &GraphBuildConfig,
) -> Vec<SurfaceVertex> {
    let step = cfg.vertex_step_mm();
    let extent = cfg.patch_extent_mm();
    let spacing = vol.in_slice_spacing_mm;
    let t = vol.inter_slice_spacing_mm;
    let mut vertices = Vec::new();
    for bc in contours {
        let slice = vol.intensity.index_axis(ndarray::Axis(0), bc.slice_index);
        for run in &bc.runs {
            for arc in run_vertex_arcs(&bc.contour, run, step, extent) {
                let (y, x) = bc.contour.position_at(arc, spacing);
                let patch =
                    sample_patch(slice, (y, x), cfg.patch_size_px, cfg.patch_spacing_mm, spacing);
                vertices.push(SurfaceVertex {
                    cartilage_id: bc.cartilage_id,
                    slice_index: bc.slice_index,
                    coord_mm: [
                        (bc.slice_index as f64 * t) as f32,
                        x as f32,
                        y as f32,
                    ],
                    arc_pos_mm: arc as f32,
                    patch,
                });
            }
        }
    }
    vertices
}

fn dist3(a: &[f32; 3], b: &[f32; 3]) -> f64 {
    let mut s = 0.0f64;
    for k in 0..3 {
        let d = a[k] as f64 - b[k] as f64;
        s += d * d;
    }
    s.sqrt()
}

/// Build the typed CSR adjacency. Where several rules would fire for one
/// pair, kind precedence is Surface > Cross > Adjacent.
pub fn build_edges(vertices: &[SurfaceVertex], cfg: &GraphBuildConfig, t_mm: f64) -> Csr {
    let n = vertices.len();
    let d_c = cfg.d_c_mm;
    let d_a = cfg.d_a_mm(t_mm);
    let mut adj: Vec<std::collections::BTreeMap<u32, EdgeKind>> = vec![Default::default(); n];
    for (i, row) in adj.iter_mut().enumerate() {
        row.insert(i as u32, EdgeKind::SelfLoop);
    }
    let mut connect = |i: usize, j: usize, kind: EdgeKind| {
        adj[i].entry(j as u32).or_insert(kind);
        adj[j].entry(i as u32).or_insert(kind);
    };
    // Surface: consecutive in arc order within each (cartilage, slice).
    let mut groups: std::collections::BTreeMap<(u8, usize), Vec<usize>> = Default::default();
    for (i, v) in vertices.iter().enumerate() {
        groups.entry((v.cartilage_id, v.slice_index)).or_default().push(i);
    }
    for members in groups.values_mut() {
        members.sort_by(|&a, &b| {
            vertices[a]
                .arc_pos_mm
                .partial_cmp(&vertices[b].arc_pos_mm)
                .unwrap()
                .then(a.cmp(&b))
        });
        for w in members.windows(2) {
            connect(w[0], w[1], EdgeKind::Surface);
        }
    }
    // Cross and Adjacent by pairwise distance.
    for i in 0..n {
        for j in (i + 1)..n {
            let (vi, vj) = (&vertices[i], &vertices[j]);
            let d = dist3(&vi.coord_mm, &vj.coord_mm);
            if vi.slice_index == vj.slice_index && vi.cartilage_id != vj.cartilage_id && d < d_c {
                connect(i, j, EdgeKind::Cross);
            } else if vi.cartilage_id == vj.cartilage_id
                && vi.slice_index.abs_diff(vj.slice_index) == 1
                && d < d_a
            {
                connect(i, j, EdgeKind::Adjacent);
            }
        }
    }
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut cols = Vec::new();
    let mut kinds = Vec::new();
    row_ptr.push(0u32);
    for row in &adj {
        for (&j, &k) in row {
            cols.push(j);
            kinds.push(k);
        }
        row_ptr.push(cols.len() as u32);
    }
    Csr { row_ptr, cols, kinds }
}

/// Full construction: refine labels, standardize laterality, adjust the FOV,
/// trace contours, place vertices, build edges.
pub fn build_graph(vol: &LabeledVolume, cfg: &GraphBuildConfig) -> Result<CartilageGraph> {
    cfg.validate()?;
    vol.validate()?;
    let refined = refine_labels(vol, cfg.opening_radius_vox);
    let vol = flip_right_knee(&refined);
    let fov = adjust_fov(&vol, cfg)?;
    let contours = trace_contours(&vol, &fov);
    let vertices = place_vertices(&contours, &vol, cfg);
    let csr = build_edges(&vertices, cfg, vol.inter_slice_spacing_mm);
    let graph = CartilageGraph {
        subject_id: String::new(),
        inter_slice_spacing_mm: vol.inter_slice_spacing_mm as f32,
        fov,
        patch_size_px: cfg.patch_size_px,
        vertices,
        csr,
        subject_grade: None,
        slice_grades: None,
        patch_grades: None,
    };
    graph.validate()?;
    Ok(graph)
}
