//! Anisotropic labeled 3-D volumes: data model, bundle I/O, laterality
//! flipping and the slice-wise morphological label refinement applied before
//! graph construction.
//!
//! A volume bundle on disk is a JSON header next to two raw little-endian
//! payload files (intensity and labels) in slice-major order.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_FEMUR: u8 = 1;
pub const LABEL_TIBIA: u8 = 2;
pub const LABEL_PATELLA: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Laterality {
    Left,
    Right,
}

/// Intensity + per-voxel bone labels on an anisotropic grid.
///
/// Axis order is `[S, H, W]`: sagittal slice (left-right), row
/// (superior-inferior) and column (anterior-posterior). Physical in-slice
/// coordinates are `y = row · row_spacing` and `x = col · col_spacing`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVolume {
    pub intensity: Array3<f32>,
    pub labels: Array3<u8>,
    /// The inter-slice spacing `t`, in mm.
    pub inter_slice_spacing_mm: f64,
    /// (row, col) spacing in mm.
    pub in_slice_spacing_mm: (f64, f64),
    pub laterality: Laterality,
}

impl LabeledVolume {
    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.intensity.dim();
        (d.0, d.1, d.2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.intensity.dim() != self.labels.dim() {
            return Err(Error::InvalidVolume(format!(
                "intensity {:?} vs labels {:?}",
                self.intensity.dim(),
                self.labels.dim()
            )));
        }
        let (s, _, _) = self.dims();
        if s < 2 {
            return Err(Error::InvalidVolume(format!("need at least 2 slices, got {s}")));
        }
        if self.inter_slice_spacing_mm <= 0.0
            || self.in_slice_spacing_mm.0 <= 0.0
            || self.in_slice_spacing_mm.1 <= 0.0
        {
            return Err(Error::InvalidVolume("spacings must be positive".into()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l > LABEL_PATELLA) {
            return Err(Error::InvalidVolume(format!("unknown label code {bad}")));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct BundleHeader {
    dims: [usize; 3],
    dtype: String,
    spacing_mm: [f64; 3],
    laterality: Laterality,
    intensity: String,
    labels: String,
}

/// Write a volume bundle: `<path>` holds the JSON header, payloads go next
/// to it as `<stem>.intensity.raw` and `<stem>.labels.raw`.
pub fn save_volume(vol: &LabeledVolume, path: &Path) -> Result<()> {
    vol.validate()?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidVolume(format!("bad bundle path {path:?}")))?;
    let intensity_name = format!("{stem}.intensity.raw");
    let labels_name = format!("{stem}.labels.raw");
    let (s, h, w) = vol.dims();
    let header = BundleHeader {
        dims: [s, h, w],
        dtype: "f32".into(),
        spacing_mm: [
            vol.inter_slice_spacing_mm,
            vol.in_slice_spacing_mm.0,
            vol.in_slice_spacing_mm.1,
        ],
        laterality: vol.laterality,
        intensity: intensity_name.clone(),
        labels: labels_name.clone(),
    };
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    fs::write(path, serde_json::to_vec_pretty(&header)?)?;
    // Iterate in logical order so non-standard layouts serialize correctly.
    let mut ibytes = Vec::with_capacity(s * h * w * 4);
    for v in vol.intensity.iter() {
        ibytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(dir.join(&intensity_name), ibytes)?;
    fs::write(dir.join(&labels_name), vol.labels.iter().copied().collect::<Vec<u8>>())?;
    Ok(())
}

/// Read a volume bundle written by [`save_volume`] (or any bundle matching
/// the header contract). Round-trips bit-exactly for `f32` intensity.
pub fn load_volume(path: &Path) -> Result<LabeledVolume> {
    let header: BundleHeader = serde_json::from_slice(&fs::read(path)?)?;
    let [s, h, w] = header.dims;
    let n = s * h * w;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let ibytes = fs::read(dir.join(&header.intensity))?;
    let intensity: Vec<f32> = match header.dtype.as_str() {
        "f32" => {
            if ibytes.len() != n * 4 {
                return Err(Error::Format(format!(
                    "intensity payload is {} bytes, header declares {} voxels",
                    ibytes.len(),
                    n
                )));
            }
            ibytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        }
        "u8" => {
            if ibytes.len() != n {
                return Err(Error::Format(format!(
                    "intensity payload is {} bytes, header declares {} voxels",
                    ibytes.len(),
                    n
                )));
            }
            ibytes.iter().map(|&b| b as f32).collect()
        }
        other => return Err(Error::Format(format!("unknown dtype '{other}'"))),
    };
    let lbytes = fs::read(dir.join(&header.labels))?;
    if lbytes.len() != n {
        return Err(Error::Format(format!(
            "labels payload is {} bytes, header declares {} voxels",
            lbytes.len(),
            n
        )));
    }
    let vol = LabeledVolume {
        intensity: Array3::from_shape_vec((s, h, w), intensity)
            .map_err(|e| Error::Format(e.to_string()))?,
        labels: Array3::from_shape_vec((s, h, w), lbytes).map_err(|e| Error::Format(e.to_string()))?,
        inter_slice_spacing_mm: header.spacing_mm[0],
        in_slice_spacing_mm: (header.spacing_mm[1], header.spacing_mm[2]),
        laterality: header.laterality,
    };
    vol.validate()?;
    Ok(vol)
}

/// Standardize to a left knee: right knees get their slice order reversed
/// along the left-right axis; left knees pass through unchanged.
pub fn flip_right_knee(vol: &LabeledVolume) -> LabeledVolume {
    match vol.laterality {
        Laterality::Left => vol.clone(),
        Laterality::Right => {
            let mut out = vol.clone();
            out.intensity = out.intensity.slice(ndarray::s![..;-1, .., ..]).to_owned();
            out.labels = out.labels.slice(ndarray::s![..;-1, .., ..]).to_owned();
            out.laterality = Laterality::Left;
            out
        }
    }
}

// ---------------------------------------------------------------------------
// slice-wise binary morphology (4-connectivity)
// ---------------------------------------------------------------------------

fn disk_offsets(radius: i64) -> Vec<(i64, i64)> {
    let mut offs = Vec::new();
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if dy * dy + dx * dx <= radius * radius {
                offs.push((dy, dx));
            }
        }
    }
    offs
}

fn erode(mask: &Array2<bool>, offs: &[(i64, i64)]) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        offs.iter().all(|&(dy, dx)| {
            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
            ny >= 0 && nx >= 0 && ny < h as i64 && nx < w as i64 && mask[(ny as usize, nx as usize)]
        })
    })
}

fn dilate(mask: &Array2<bool>, offs: &[(i64, i64)]) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut out = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            if mask[(y, x)] {
                for &(dy, dx) in offs {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny >= 0 && nx >= 0 && ny < h as i64 && nx < w as i64 {
                        out[(ny as usize, nx as usize)] = true;
                    }
                }
            }
        }
    }
    out
}

/// Morphological opening with a disk structuring element.
pub fn binary_open(mask: &Array2<bool>, radius: usize) -> Array2<bool> {
    if radius == 0 {
        return mask.clone();
    }
    let offs = disk_offsets(radius as i64);
    dilate(&erode(mask, &offs), &offs)
}

/// Fill background regions (4-connected) not reachable from the image border.
pub fn fill_holes(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut outside = Array2::from_elem((h, w), false);
    let mut stack = Vec::new();
    for y in 0..h {
        for &x in &[0, w - 1] {
            if !mask[(y, x)] && !outside[(y, x)] {
                outside[(y, x)] = true;
                stack.push((y, x));
            }
        }
    }
    for x in 0..w {
        for &y in &[0, h - 1] {
            if !mask[(y, x)] && !outside[(y, x)] {
                outside[(y, x)] = true;
                stack.push((y, x));
            }
        }
    }
    while let Some((y, x)) = stack.pop() {
        let neighbors = [
            (y.wrapping_sub(1), x),
            (y + 1, x),
            (y, x.wrapping_sub(1)),
            (y, x + 1),
        ];
        for (ny, nx) in neighbors {
            if ny < h && nx < w && !mask[(ny, nx)] && !outside[(ny, nx)] {
                outside[(ny, nx)] = true;
                stack.push((ny, nx));
            }
        }
    }
    Array2::from_shape_fn((h, w), |(y, x)| mask[(y, x)] || !outside[(y, x)])
}

/// 4-connected component labels (0 = background), plus per-component sizes.
pub fn label_components(mask: &Array2<bool>) -> (Array2<u32>, Vec<usize>) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask[(y, x)] && labels[(y, x)] == 0 {
                let id = sizes.len() as u32 + 1;
                let mut size = 0usize;
                labels[(y, x)] = id;
                stack.push((y, x));
                while let Some((cy, cx)) = stack.pop() {
                    size += 1;
                    let neighbors = [
                        (cy.wrapping_sub(1), cx),
                        (cy + 1, cx),
                        (cy, cx.wrapping_sub(1)),
                        (cy, cx + 1),
                    ];
                    for (ny, nx) in neighbors {
                        if ny < h && nx < w && mask[(ny, nx)] && labels[(ny, nx)] == 0 {
                            labels[(ny, nx)] = id;
                            stack.push((ny, nx));
                        }
                    }
                }
                sizes.push(size);
            }
        }
    }
    (labels, sizes)
}

/// Keep only the largest 4-connected component. Ties break toward the
/// component encountered first in scan order.
pub fn largest_component(mask: &Array2<bool>) -> Array2<bool> {
    let (labels, sizes) = label_components(mask);
    let best = match sizes.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0))) {
        Some((i, _)) => i as u32 + 1,
        None => return mask.clone(),
    };
    labels.mapv(|l| l == best)
}

/// Slice-wise label refinement: per slice and per bone label, binary opening
/// with a disk of `opening_radius_vox`, hole filling, then retention of the
/// largest 4-connected component. Voxels carrying other labels are never
/// overwritten during a bone's pass.
pub fn refine_labels(vol: &LabeledVolume, opening_radius_vox: usize) -> LabeledVolume {
    let (s, h, w) = vol.dims();
    let mut out = vol.clone();
    for si in 0..s {
        let orig = vol.labels.index_axis(ndarray::Axis(0), si).to_owned();
        for bone in [LABEL_FEMUR, LABEL_TIBIA, LABEL_PATELLA] {
            let mask = orig.mapv(|l| l == bone);
            if !mask.iter().any(|&m| m) {
                continue;
            }
            let kept = largest_component(&fill_holes(&binary_open(&mask, opening_radius_vox)));
            for y in 0..h {
                for x in 0..w {
                    let o = orig[(y, x)];
                    if o == bone && !kept[(y, x)] {
                        out.labels[(si, y, x)] = LABEL_BACKGROUND;
                    } else if kept[(y, x)] && o == LABEL_BACKGROUND {
                        out.labels[(si, y, x)] = bone;
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use tempfile::TempDir;

    fn test_volume(s: usize, h: usize, w: usize) -> LabeledVolume {
        let mut intensity = Array3::<f32>::zeros((s, h, w));
        let mut labels = Array3::<u8>::zeros((s, h, w));
        for si in 0..s {
            for y in 0..h {
                for x in 0..w {
                    intensity[(si, y, x)] = (si * h * w + y * w + x) as f32 * 0.01;
                    labels[(si, y, x)] = ((si + y + x) % 4) as u8;
                }
            }
        }
        LabeledVolume {
            intensity,
            labels,
            inter_slice_spacing_mm: 4.5,
            in_slice_spacing_mm: (0.6, 0.6),
            laterality: Laterality::Left,
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = TempDir::new().unwrap();
        let vol = test_volume(20, 64, 64);
        let path = dir.path().join("vol.json");
        save_volume(&vol, &path).unwrap();
        let loaded = load_volume(&path).unwrap();
        assert_eq!(vol, loaded);
        assert_eq!(loaded.inter_slice_spacing_mm, 4.5);
    }

    #[test]
    fn intensity_payload_length() {
        let dir = TempDir::new().unwrap();
        let vol = test_volume(20, 64, 64);
        let path = dir.path().join("vol.json");
        save_volume(&vol, &path).unwrap();
        let bytes = std::fs::read(dir.path().join("vol.intensity.raw")).unwrap();
        assert_eq!(bytes.len(), 20 * 64 * 64 * 4);
    }

    #[test]
    fn header_size_mismatch_is_error() {
        let dir = TempDir::new().unwrap();
        let vol = test_volume(20, 16, 16);
        let path = dir.path().join("vol.json");
        save_volume(&vol, &path).unwrap();
        // Rewrite the header to claim 18 slices against a 20-slice payload.
        let header = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, header.replace("20", "18")).unwrap();
        assert!(matches!(load_volume(&path), Err(Error::Format(_))));
    }

    #[test]
    fn laterality_serialized_lowercase() {
        let dir = TempDir::new().unwrap();
        let mut vol = test_volume(3, 8, 8);
        vol.laterality = Laterality::Right;
        let path = dir.path().join("vol.json");
        save_volume(&vol, &path).unwrap();
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.contains("\"laterality\": \"right\""));
    }

    #[test]
    fn flip_left_is_noop() {
        let vol = test_volume(5, 8, 8);
        assert_eq!(flip_right_knee(&vol), vol);
    }

    #[test]
    fn flip_right_reverses_slices() {
        let mut vol = test_volume(5, 8, 8);
        vol.laterality = Laterality::Right;
        vol.intensity[(0, 3, 3)] = 999.0;
        let flipped = flip_right_knee(&vol);
        assert_eq!(flipped.laterality, Laterality::Left);
        assert_eq!(flipped.intensity[(4, 3, 3)], 999.0);

        let mut again = flipped.clone();
        again.laterality = Laterality::Right;
        let double = flip_right_knee(&again);
        assert_eq!(double.intensity, vol.intensity);
    }

    #[test]
    fn unknown_label_code_rejected() {
        let mut vol = test_volume(3, 8, 8);
        vol.labels[(0, 0, 0)] = 9;
        assert!(vol.validate().is_err());
    }

    fn blob_volume(place: impl Fn(&mut Array3<u8>)) -> LabeledVolume {
        let mut labels = Array3::<u8>::zeros((2, 32, 32));
        place(&mut labels);
        LabeledVolume {
            intensity: Array3::zeros((2, 32, 32)),
            labels,
            inter_slice_spacing_mm: 3.3,
            in_slice_spacing_mm: (0.5, 0.5),
            laterality: Laterality::Left,
        }
    }

    #[test]
    fn refine_removes_speck() {
        let vol = blob_volume(|labels| {
            for y in 5..15 {
                for x in 5..15 {
                    labels[(0, y, x)] = LABEL_FEMUR;
                }
            }
            labels[(0, 28, 28)] = LABEL_FEMUR; // isolated speck
        });
        let refined = refine_labels(&vol, 1);
        assert_eq!(refined.labels[(0, 28, 28)], 0);
        assert_eq!(refined.labels[(0, 10, 10)], LABEL_FEMUR);
    }

    #[test]
    fn refine_fills_interior_hole() {
        let vol = blob_volume(|labels| {
            for y in 5..20 {
                for x in 5..20 {
                    labels[(0, y, x)] = LABEL_TIBIA;
                }
            }
            for y in 10..12 {
                for x in 10..12 {
                    labels[(0, y, x)] = 0;
                }
            }
        });
        let refined = refine_labels(&vol, 1);
        assert_eq!(refined.labels[(0, 10, 10)], LABEL_TIBIA);
        assert_eq!(refined.labels[(0, 11, 11)], LABEL_TIBIA);
    }

    #[test]
    fn refine_keeps_largest_blob() {
        // Two disjoint femur blobs: 100 voxels and 40 voxels.
        let vol = blob_volume(|labels| {
            for y in 2..12 {
                for x in 2..12 {
                    labels[(0, y, x)] = LABEL_FEMUR;
                }
            }
            for y in 20..25 {
                for x in 20..28 {
                    labels[(0, y, x)] = LABEL_FEMUR;
                }
            }
        });
        // Oracle: brute-force component labeling on the femur mask.
        let mask = vol
            .labels
            .index_axis(ndarray::Axis(0), 0)
            .mapv(|l| l == LABEL_FEMUR);
        let (_, sizes) = label_components(&mask);
        assert_eq!(sizes.len(), 2);
        assert_eq!(*sizes.iter().max().unwrap(), 100);

        let refined = refine_labels(&vol, 0);
        let kept: usize = refined
            .labels
            .index_axis(ndarray::Axis(0), 0)
            .iter()
            .filter(|&&l| l == LABEL_FEMUR)
            .count();
        assert_eq!(kept, 100);
        assert_eq!(refined.labels[(0, 22, 22)], 0);
    }

    #[test]
    fn refine_other_labels_untouched() {
        let vol = blob_volume(|labels| {
            for y in 5..20 {
                for x in 5..20 {
                    labels[(0, y, x)] = LABEL_FEMUR;
                }
            }
            // A tibia voxel inside what would be a femur hole.
            labels[(0, 10, 10)] = LABEL_TIBIA;
        });
        let refined = refine_labels(&vol, 0);
        assert_eq!(refined.labels[(0, 10, 10)], LABEL_TIBIA);
    }

    #[test]
    fn refine_is_idempotent_on_blobs() {
        let vol = blob_volume(|labels| {
            for y in 4..18 {
                for x in 6..22 {
                    if (y as i64 - 11).pow(2) + (x as i64 - 14).pow(2) <= 49 {
                        labels[(0, y, x)] = LABEL_FEMUR;
                    }
                }
            }
            for y in 20..30 {
                for x in 3..14 {
                    labels[(1, y, x)] = LABEL_TIBIA;
                }
            }
            labels[(1, 25, 7)] = 0; // pinhole
        });
        let once = refine_labels(&vol, 1);
        let twice = refine_labels(&once, 1);
        assert_eq!(once.labels, twice.labels);
    }

    #[test]
    fn refine_single_component_per_slice() {
        let vol = blob_volume(|labels| {
            for y in 2..12 {
                for x in 2..12 {
                    labels[(0, y, x)] = LABEL_FEMUR;
                }
            }
            for y in 20..28 {
                for x in 20..28 {
                    labels[(0, y, x)] = LABEL_FEMUR;
                }
            }
        });
        let refined = refine_labels(&vol, 1);
        let mask = refined
            .labels
            .index_axis(ndarray::Axis(0), 0)
            .mapv(|l| l == LABEL_FEMUR);
        let (_, sizes) = label_components(&mask);
        assert_eq!(sizes.len(), 1);
    }
}
