//! Procedural knee-like phantoms.
//!
//! Each phantom has three ellipsoidal "bones" (femur, tibia, patella) in a
//! sagittal-knee arrangement, a bright 2mm cartilage band lining a randomized
//! angular sector of each articular surface, and optionally injected defects:
//! grade 1 dims the band to 40% and halves its thickness, grade 2 removes it.
//! The random sector ends look locally defect-like, so patch-only models see
//! ambiguous evidence that graph context can resolve.
//!
//! Defects are expressed as arc intervals on the Moore-traced bone contour,
//! the same parameterization used when vertices are placed, so ground truth
//! and graph anchors agree by construction. Labels are refined with the
//! default radius-1 opening before anything is measured; refinement is
//! idempotent, so a later rebuild of the contours sees identical masks.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::contour::{trace_mask_contour, Contour};
use crate::graph::SurfaceVertex;
use crate::volume::{refine_labels, LabeledVolume, Laterality};

pub const BAND_THICKNESS_MM: f64 = 2.0;

const BACKGROUND_INTENSITY: f32 = 0.08;
const BONE_INTENSITY: f32 = 0.35;
const CARTILAGE_INTENSITY: f32 = 0.92;
const G1_DIM_FACTOR: f32 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DefectGrade {
    G1,
    G2,
}

impl DefectGrade {
    pub fn as_u8(self) -> u8 {
        match self {
            DefectGrade::G1 => 1,
            DefectGrade::G2 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    /// [S, H, W] voxel counts.
    pub dims: [usize; 3],
    pub inter_slice_spacing_mm: f64,
    pub in_slice_spacing_mm: (f64, f64),
    pub laterality: Laterality,
    pub n_defects: usize,
    pub defect_grade: DefectGrade,
    /// Arc length of each defect along the contour, in mm.
    pub arc_len_mm: f64,
    /// Remaining thickness fraction of a G1 defect, in (0, 1].
    pub depth_fraction: f64,
    /// Number of consecutive slices each defect spans (≥ 1).
    pub slice_span: usize,
    pub noise_sigma: f64,
}

impl PhantomSpec {
    /// A small, fully deterministic spec with one severe defect.
    pub fn example(seed: u64) -> Self {
        PhantomSpec {
            seed,
            dims: [20, 120, 120],
            inter_slice_spacing_mm: 4.5,
            in_slice_spacing_mm: (0.6, 0.6),
            laterality: Laterality::Left,
            n_defects: 1,
            defect_grade: DefectGrade::G2,
            arc_len_mm: 12.0,
            depth_fraction: 0.5,
            slice_span: 3,
            noise_sigma: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [s, h, w] = self.dims;
        if s < 4 || h < 40 || w < 40 {
            return Err(Error::InvalidSpec(format!("dims too small: {:?}", self.dims)));
        }
        if self.inter_slice_spacing_mm <= 0.0
            || self.in_slice_spacing_mm.0 <= 0.0
            || self.in_slice_spacing_mm.1 <= 0.0
        {
            return Err(Error::InvalidSpec("spacings must be positive".into()));
        }
        if self.n_defects > 0 {
            if self.slice_span < 1 {
                return Err(Error::InvalidSpec("slice_span must be >= 1".into()));
            }
            if !(self.depth_fraction > 0.0 && self.depth_fraction <= 1.0) {
                return Err(Error::InvalidSpec(format!(
                    "depth_fraction must be in (0,1], got {}",
                    self.depth_fraction
                )));
            }
            if self.arc_len_mm <= 0.0 {
                return Err(Error::InvalidSpec("arc_len_mm must be positive".into()));
            }
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidSpec("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// One contiguous defect interval on one slice's contour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectRegion {
    pub cartilage_id: u8,
    pub slice_index: usize,
    pub arc_start_mm: f64,
    pub arc_end_mm: f64,
    /// 1 or 2.
    pub grade: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub subject_grade: u8,
    pub slice_grades: Vec<u8>,
    pub defect_regions: Vec<DefectRegion>,
}

impl GroundTruth {
    pub fn validate(&self) -> Result<()> {
        let max_slice = self.slice_grades.iter().copied().max().unwrap_or(0);
        if self.subject_grade != max_slice {
            return Err(Error::InvalidSpec(format!(
                "subject grade {} != max slice grade {max_slice}",
                self.subject_grade
            )));
        }
        for (s, &g) in self.slice_grades.iter().enumerate() {
            let from_regions = self
                .defect_regions
                .iter()
                .filter(|r| r.slice_index == s)
                .map(|r| r.grade)
                .max()
                .unwrap_or(0);
            if g != from_regions {
                return Err(Error::InvalidSpec(format!(
                    "slice {s} grade {g} != max region grade {from_regions}"
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// geometry
// ---------------------------------------------------------------------------

struct BoneGeom {
    /// Ellipse center (y, x) in mm; shared across slices.
    center: (f64, f64),
    /// In-slice radii (ry, rx) in mm at the widest slice.
    radii: (f64, f64),
    /// Half-extent along the slice axis in mm.
    rz: f64,
    /// Cartilage sector [lo, hi] in radians of atan2(y−cy, x−cx); may wrap.
    sector: (f64, f64),
}

impl BoneGeom {
    /// In-slice radius scale at slice position z (mm); None if absent.
    /// The quarter-power profile keeps mid-volume slices near full size, so
    /// contour curvature stays well below the adjacent-edge reach.
    fn shrink(&self, z: f64, z_mid: f64) -> Option<f64> {
        let u = (z - z_mid) / self.rz;
        let s2 = 1.0 - u * u;
        (s2 > 0.01).then(|| s2.powf(0.25))
    }
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a < 0.0 {
        a += std::f64::consts::TAU;
    }
    a
}

fn in_sector(theta: f64, sector: (f64, f64)) -> bool {
    wrap_angle(theta - sector.0) <= wrap_angle(sector.1 - sector.0)
}

fn jitter(rng: &mut ChaCha8Rng, mag: f64) -> f64 {
    (rng.random::<f64>() * 2.0 - 1.0) * mag
}

fn bone_geometry(rng: &mut ChaCha8Rng, span_mm: f64) -> [BoneGeom; 3] {
    let deg = std::f64::consts::PI / 180.0;
    let mut make = |cy: f64, cx: f64, ry: f64, rx: f64, lo_deg: f64, hi_deg: f64| {
        let center = (cy + jitter(rng, 0.8), cx + jitter(rng, 0.8));
        let scale = 0.95 + rng_f(rng) * 0.10;
        let radii = (ry * scale, rx * scale);
        let rz = (1.04 + rng_f(rng) * 0.12) * span_mm / 2.0;
        let sector = (
            (lo_deg + jitter(rng, 10.0)) * deg,
            (hi_deg + jitter(rng, 10.0)) * deg,
        );
        BoneGeom {
            center,
            radii,
            rz,
            sector,
        }
    };
    [
        // Femur: cartilage faces inferior (toward the tibia).
        make(30.0, 40.0, 11.0, 13.0, 20.0, 160.0),
        // Tibia: cartilage faces superior.
        make(57.0, 52.0, 9.5, 13.5, -160.0, -20.0),
        // Patella: cartilage faces posterior (toward the femur).
        make(24.0, 12.0, 5.0, 4.5, -60.0, 60.0),
    ]
}

fn rng_f(rng: &mut ChaCha8Rng) -> f64 {
    rng.random::<f64>()
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

// ---------------------------------------------------------------------------
// generation
// ---------------------------------------------------------------------------

struct SliceSurface {
    bone: usize,
    slice: usize,
    contour: Contour,
    /// Per contour point: cartilage sector membership and defect flags.
    in_sector: Vec<bool>,
    g1: Vec<bool>,
    g2: Vec<bool>,
}

/// Generate a phantom volume and its ground truth. Pure in the spec: the
/// same spec always yields byte-identical output.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(LabeledVolume, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [s_n, h, w] = spec.dims;
    let t = spec.inter_slice_spacing_mm;
    let (rs, cs) = spec.in_slice_spacing_mm;
    let span_mm = (s_n - 1) as f64 * t;
    let z_mid = span_mm / 2.0;
    let bones = bone_geometry(&mut rng, span_mm);

    // Rasterize bones; higher label code wins on (theoretical) overlap.
    let mut labels = Array3::<u8>::zeros((s_n, h, w));
    for (b, geom) in bones.iter().enumerate() {
        for si in 0..s_n {
            let Some(g) = geom.shrink(si as f64 * t, z_mid) else {
                continue;
            };
            let (ry, rx) = (geom.radii.0 * g, geom.radii.1 * g);
            for y in 0..h {
                for x in 0..w {
                    let dy = (y as f64 * rs - geom.center.0) / ry;
                    let dx = (x as f64 * cs - geom.center.1) / rx;
                    if dy * dy + dx * dx <= 1.0 {
                        labels[(si, y, x)] = b as u8 + 1;
                    }
                }
            }
        }
    }
    let mut vol = LabeledVolume {
        intensity: Array3::from_elem((s_n, h, w), BACKGROUND_INTENSITY),
        labels,
        inter_slice_spacing_mm: t,
        in_slice_spacing_mm: (rs, cs),
        laterality: Laterality::Left,
    };
    // Measure against refined labels; refinement is idempotent, so graph
    // construction later traces exactly these masks.
    vol = refine_labels(&vol, 1);
    for (v, &l) in vol.intensity.iter_mut().zip(vol.labels.iter()) {
        if l != 0 {
            *v = BONE_INTENSITY;
        }
    }

    // Trace every bone contour and classify points by sector membership.
    let mut surfaces: Vec<SliceSurface> = Vec::new();
    for si in 0..s_n {
        let slice = vol.labels.index_axis(ndarray::Axis(0), si);
        for (b, geom) in bones.iter().enumerate() {
            let mask = slice.mapv(|l| l == b as u8 + 1);
            let Some(contour) = trace_mask_contour(&mask, (rs, cs)) else {
                continue;
            };
            let in_sector: Vec<bool> = (0..contour.points.len())
                .map(|k| {
                    let (y, x) = contour.point_mm(k, (rs, cs));
                    let theta = (y - geom.center.0).atan2(x - geom.center.1);
                    in_sector(theta, geom.sector)
                })
                .collect();
            let n = contour.points.len();
            surfaces.push(SliceSurface {
                bone: b,
                slice: si,
                contour,
                in_sector,
                g1: vec![false; n],
                g2: vec![false; n],
            });
        }
    }

    inject_defects(spec, &mut rng, &bones, &mut surfaces)?;

    // Render the cartilage band: voxels within the band thickness outside a
    // bone, attributed to the nearest contour point of that bone.
    for surf in &surfaces {
        render_band(spec, &mut vol, surf);
    }

    if spec.noise_sigma > 0.0 {
        for v in vol.intensity.iter_mut() {
            *v += (spec.noise_sigma * sample_normal(&mut rng)) as f32;
        }
    }

    let truth = ground_truth(s_n, &surfaces);
    truth.validate()?;

    if spec.laterality == Laterality::Right {
        vol.intensity = vol.intensity.slice(ndarray::s![..;-1, .., ..]).to_owned();
        vol.labels = vol.labels.slice(ndarray::s![..;-1, .., ..]).to_owned();
        vol.laterality = Laterality::Right;
    }
    Ok((vol, truth))
}

fn cyc_dist(a: f64, b: f64, total: f64) -> f64 {
    let d = (a - b).abs();
    d.min(total - d)
}

fn inject_defects(
    spec: &PhantomSpec,
    rng: &mut ChaCha8Rng,
    bones: &[BoneGeom; 3],
    surfaces: &mut [SliceSurface],
) -> Result<()> {
    for _ in 0..spec.n_defects {
        let bone = rng.random_range(0..2usize); // defects on femur or tibia only
        // Candidate slices: central portion of the slices where this bone
        // has an in-sector surface.
        let present: Vec<usize> = surfaces
            .iter()
            .filter(|s| s.bone == bone && s.in_sector.iter().any(|&b| b))
            .map(|s| s.slice)
            .collect();
        if present.is_empty() {
            return Err(Error::InvalidSpec("bone has no cartilage surface".into()));
        }
        let margin = present.len() / 5;
        let span = spec.slice_span.min(present.len().saturating_sub(2 * margin).max(1));
        let hi = present.len() - margin - span;
        let lo = margin.min(hi);
        let k0 = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let slices: Vec<usize> = present[k0..k0 + span].to_vec();
        let center_slice = slices[span / 2];

        // Pick the defect direction from eligible points on the center slice.
        let center_surf = surfaces
            .iter()
            .position(|s| s.bone == bone && s.slice == center_slice)
            .expect("center slice surface present");
        let theta_d = {
            let surf = &surfaces[center_surf];
            let eligible = eligible_centers(surf, spec.arc_len_mm);
            if eligible.is_empty() {
                let avail = sector_arc_len(surf);
                return Err(Error::DefectArcTooLong {
                    requested_mm: spec.arc_len_mm,
                    available_mm: avail,
                });
            }
            let k = eligible[rng.random_range(0..eligible.len())];
            let (y, x) = surf.contour.point_mm(k, (spec.in_slice_spacing_mm.0, spec.in_slice_spacing_mm.1));
            (y - bones[bone].center.0).atan2(x - bones[bone].center.1)
        };

        for surf in surfaces.iter_mut() {
            if surf.bone != bone || !slices.contains(&surf.slice) {
                continue;
            }
            mark_defect(surf, theta_d, spec, bones[bone].center);
        }
    }
    Ok(())
}

/// Total arc length of in-sector points (sum of steps between consecutive
/// in-sector contour points).
fn sector_arc_len(surf: &SliceSurface) -> f64 {
    let n = surf.contour.points.len();
    let mut total = 0.0;
    for k in 0..n {
        let j = (k + 1) % n;
        if surf.in_sector[k] && surf.in_sector[j] {
            let a0 = surf.contour.arc_mm[k];
            let a1 = if j == 0 {
                surf.contour.total_len_mm
            } else {
                surf.contour.arc_mm[j]
            };
            total += a1 - a0;
        }
    }
    total
}

/// Contour points from which a defect of the given arc length can expand
/// half a length in both directions without leaving the sector.
fn eligible_centers(surf: &SliceSurface, arc_len: f64) -> Vec<usize> {
    let n = surf.contour.points.len();
    let total = surf.contour.total_len_mm;
    let half = arc_len / 2.0;
    (0..n)
        .filter(|&k| {
            if !surf.in_sector[k] {
                return false;
            }
            for dir in [1i64, -1i64] {
                let mut j = k as i64;
                loop {
                    j = (j + dir).rem_euclid(n as i64);
                    let ju = j as usize;
                    if cyc_dist(surf.contour.arc_mm[ju], surf.contour.arc_mm[k], total) > half {
                        break;
                    }
                    if !surf.in_sector[ju] {
                        return false;
                    }
                    if ju == k {
                        break;
                    }
                }
            }
            true
        })
        .collect()
}

/// Flag the contour points of one slice covered by a defect centered at
/// direction `theta_d`, expanding along the arc while staying in-sector.
fn mark_defect(surf: &mut SliceSurface, theta_d: f64, spec: &PhantomSpec, center: (f64, f64)) {
    let n = surf.contour.points.len();
    let total = surf.contour.total_len_mm;
    let spacing = spec.in_slice_spacing_mm;
    let mut best: Option<(f64, usize)> = None;
    for k in 0..n {
        if !surf.in_sector[k] {
            continue;
        }
        let (y, x) = surf.contour.point_mm(k, spacing);
        let theta = (y - center.0).atan2(x - center.1);
        let d = wrap_angle(theta - theta_d).min(wrap_angle(theta_d - theta));
        if best.map_or(true, |(bd, _)| d < bd) {
            best = Some((d, k));
        }
    }
    let Some((_, k_star)) = best else { return };
    let half = spec.arc_len_mm / 2.0;
    let SliceSurface {
        contour,
        in_sector,
        g1,
        g2,
        ..
    } = surf;
    let flags = match spec.defect_grade {
        DefectGrade::G1 => g1,
        DefectGrade::G2 => g2,
    };
    flags[k_star] = true;
    for dir in [1i64, -1i64] {
        let mut j = k_star as i64;
        loop {
            j = (j + dir).rem_euclid(n as i64);
            let ju = j as usize;
            if ju == k_star
                || !in_sector[ju]
                || cyc_dist(contour.arc_mm[ju], contour.arc_mm[k_star], total) > half
            {
                break;
            }
            flags[ju] = true;
        }
    }
}

fn render_band(spec: &PhantomSpec, vol: &mut LabeledVolume, surf: &SliceSurface) {
    let (rs, cs) = spec.in_slice_spacing_mm;
    let [_, h, w] = spec.dims;
    let pts_mm: Vec<(f64, f64)> = (0..surf.contour.points.len())
        .map(|k| surf.contour.point_mm(k, (rs, cs)))
        .collect();
    let reach = BAND_THICKNESS_MM + rs.max(cs);
    let r_lo = ((pts_mm.iter().map(|p| p.0).fold(f64::MAX, f64::min) - reach) / rs).floor().max(0.0) as usize;
    let r_hi = ((pts_mm.iter().map(|p| p.0).fold(f64::MIN, f64::max) + reach) / rs).ceil().min((h - 1) as f64) as usize;
    let c_lo = ((pts_mm.iter().map(|p| p.1).fold(f64::MAX, f64::min) - reach) / cs).floor().max(0.0) as usize;
    let c_hi = ((pts_mm.iter().map(|p| p.1).fold(f64::MIN, f64::max) + reach) / cs).ceil().min((w - 1) as f64) as usize;
    for y in r_lo..=r_hi {
        for x in c_lo..=c_hi {
            if vol.labels[(surf.slice, y, x)] != 0 {
                continue;
            }
            let (ym, xm) = (y as f64 * rs, x as f64 * cs);
            let mut nearest = (f64::MAX, 0usize);
            for (k, &(py, px)) in pts_mm.iter().enumerate() {
                let d = (ym - py).hypot(xm - px);
                if d < nearest.0 {
                    nearest = (d, k);
                }
            }
            let (d, k) = nearest;
            if d > BAND_THICKNESS_MM || !surf.in_sector[k] {
                continue;
            }
            if surf.g2[k] {
                continue;
            }
            if surf.g1[k] {
                if d <= BAND_THICKNESS_MM * spec.depth_fraction {
                    vol.intensity[(surf.slice, y, x)] = CARTILAGE_INTENSITY * G1_DIM_FACTOR;
                }
            } else {
                vol.intensity[(surf.slice, y, x)] = CARTILAGE_INTENSITY;
            }
        }
    }
}

fn ground_truth(s_n: usize, surfaces: &[SliceSurface]) -> GroundTruth {
    let mut regions = Vec::new();
    for surf in surfaces {
        for (grade, flags) in [(1u8, &surf.g1), (2u8, &surf.g2)] {
            // Linear runs of flagged points; a cyclic defect crossing the
            // trace origin yields two intervals.
            let n = flags.len();
            let mut k = 0;
            while k < n {
                if !flags[k] {
                    k += 1;
                    continue;
                }
                let start = k;
                while k < n && flags[k] {
                    k += 1;
                }
                regions.push(DefectRegion {
                    cartilage_id: surf.bone as u8,
                    slice_index: surf.slice,
                    arc_start_mm: surf.contour.arc_mm[start],
                    arc_end_mm: surf.contour.arc_mm[k - 1],
                    grade,
                });
            }
        }
    }
    let mut slice_grades = vec![0u8; s_n];
    for r in &regions {
        slice_grades[r.slice_index] = slice_grades[r.slice_index].max(r.grade);
    }
    let subject_grade = slice_grades.iter().copied().max().unwrap_or(0);
    GroundTruth {
        subject_grade,
        slice_grades,
        defect_regions: regions,
    }
}

/// Geometric patch labels: each vertex gets the maximum grade over defect
/// regions of its cartilage and slice whose arc interval intersects the
/// patch footprint `[arc − extent/2, arc + extent/2]`.
pub fn label_patches(
    vol: &LabeledVolume,
    gt: &GroundTruth,
    vertices: &[SurfaceVertex],
    patch_extent_mm: f64,
) -> Result<Vec<u8>> {
    let (s, h, w) = vol.dims();
    let (rs, cs) = vol.in_slice_spacing_mm;
    let half = patch_extent_mm / 2.0;
    let mut out = Vec::with_capacity(vertices.len());
    for (i, v) in vertices.iter().enumerate() {
        let y = v.coord_mm[2] as f64;
        let x = v.coord_mm[1] as f64;
        if v.slice_index >= s || y < 0.0 || x < 0.0 || y > (h - 1) as f64 * rs || x > (w - 1) as f64 * cs {
            return Err(Error::InvalidGraph(format!("vertex {i} outside volume bounds")));
        }
        let (lo, hi) = (v.arc_pos_mm as f64 - half, v.arc_pos_mm as f64 + half);
        let grade = gt
            .defect_regions
            .iter()
            .filter(|r| {
                r.cartilage_id == v.cartilage_id
                    && r.slice_index == v.slice_index
                    && r.arc_start_mm <= hi
                    && r.arc_end_mm >= lo
            })
            .map(|r| r.grade)
            .max()
            .unwrap_or(0);
        out.push(grade);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// dataset builder
// ---------------------------------------------------------------------------

/// Grade mix of generated datasets, mirroring a 518/370/317 cohort split.
pub const GRADE_MIX: [f64; 3] = [0.43, 0.31, 0.26];

/// Draw per-subject specs for a dataset of `n` subjects with the standard
/// grade mix and heterogeneous spacings/slice counts. `t_override` pins the
/// inter-slice spacing (used by the cross-spacing study).
pub fn dataset_specs(n: usize, seed: u64, t_override: Option<f64>) -> Vec<PhantomSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n0 = (GRADE_MIX[0] * n as f64).round() as usize;
    let n1 = (GRADE_MIX[1] * n as f64).round() as usize;
    let mut grades: Vec<u8> = Vec::with_capacity(n);
    for _ in 0..n0.min(n) {
        grades.push(0);
    }
    while grades.len() < (n0 + n1).min(n) {
        grades.push(1);
    }
    while grades.len() < n {
        grades.push(2);
    }
    grades.shuffle(&mut rng);
    grades
        .into_iter()
        .map(|g| {
            let s = match rng.random_range(0..100u32) {
                0..55 => 20usize,
                55..75 => 18,
                _ => rng.random_range(22..=29),
            };
            let t = t_override.unwrap_or_else(|| match rng.random_range(0..100u32) {
                0..30 => 3.3,
                30..65 => 3.6 + 0.1 * rng.random_range(0..=6) as f64,
                _ => 4.5,
            });
            let laterality = if rng.random::<bool>() {
                Laterality::Left
            } else {
                Laterality::Right
            };
            let n_defects = if g == 0 { 0 } else { rng.random_range(1..=2) };
            PhantomSpec {
                seed: rng.random(),
                dims: [s, 120, 120],
                inter_slice_spacing_mm: t,
                in_slice_spacing_mm: (0.6, 0.6),
                laterality,
                n_defects,
                defect_grade: if g == 2 { DefectGrade::G2 } else { DefectGrade::G1 },
                arc_len_mm: 14.0 + rng_f(&mut rng) * 8.0,
                depth_fraction: 0.5,
                slice_span: rng.random_range(2..=4).min(s / 4),
                noise_sigma: 0.01 + rng_f(&mut rng) * 0.01,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub volume: PathBuf,
    pub truth: PathBuf,
}

/// Generate `n` subjects to disk: volume bundles, ground-truth JSON and a
/// `manifest.json` listing both. Returns the manifest.
pub fn generate_dataset(
    n: usize,
    seed: u64,
    out_dir: &Path,
    t_override: Option<f64>,
) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(out_dir)?;
    let mut manifest = Vec::with_capacity(n);
    for (i, spec) in dataset_specs(n, seed, t_override).iter().enumerate() {
        let (vol, truth) = generate_phantom(spec)?;
        let subject_id = format!("subject{i:04}");
        let vol_path = out_dir.join(format!("{subject_id}.json"));
        let truth_path = out_dir.join(format!("{subject_id}.truth.json"));
        crate::volume::save_volume(&vol, &vol_path)?;
        std::fs::write(&truth_path, serde_json::to_vec_pretty(&truth)?)?;
        manifest.push(ManifestEntry {
            subject_id,
            volume: vol_path,
            truth: truth_path,
        });
    }
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let bytes = std::fs::read(dir.join("manifest.json"))?;
    Ok(serde_json::from_slice(&bytes)?)
}
