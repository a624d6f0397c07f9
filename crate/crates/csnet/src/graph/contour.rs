//! Moore boundary tracing and arc-length parameterization of slice masks.
//!
//! The arc parameterization here is the coordinate system shared by vertex
//! placement and by phantom ground truth, so both must go through this module.

use ndarray::Array2;

/// Ordered boundary of one connected mask on one slice.
///
/// `arc_mm[k]` is the cumulative polyline length from the trace start to
/// point `k`; for closed contours `total_len_mm` additionally includes the
/// segment from the last point back to the first.
#[derive(Debug, Clone)]
pub struct Contour {
    /// (row, col) voxel positions in trace order.
    pub points: Vec<(usize, usize)>,
    pub arc_mm: Vec<f64>,
    pub total_len_mm: f64,
    pub closed: bool,
}

impl Contour {
    /// Physical (y, x) mm position of point `k`.
    pub fn point_mm(&self, k: usize, spacing: (f64, f64)) -> (f64, f64) {
        let (r, c) = self.points[k];
        (r as f64 * spacing.0, c as f64 * spacing.1)
    }

    /// Linear interpolation of the (y, x) mm position at arc position `a`.
    /// For closed contours `a` may fall in the closing segment.
    pub fn position_at(&self, a: f64, spacing: (f64, f64)) -> (f64, f64) {
        let n = self.points.len();
        if n == 1 {
            return self.point_mm(0, spacing);
        }
        let a = a.clamp(0.0, self.total_len_mm);
        // Find the segment [k, k+1] containing a (closing segment wraps to 0).
        let k = match self.arc_mm.binary_search_by(|x| x.partial_cmp(&a).unwrap()) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        let (p0, a0) = (self.point_mm(k, spacing), self.arc_mm[k]);
        let (p1, a1) = if k + 1 < n {
            (self.point_mm(k + 1, spacing), self.arc_mm[k + 1])
        } else {
            (self.point_mm(0, spacing), self.total_len_mm)
        };
        let seg = a1 - a0;
        let f = if seg > 0.0 { (a - a0) / seg } else { 0.0 };
        (p0.0 + f * (p1.0 - p0.0), p0.1 + f * (p1.1 - p0.1))
    }
}

/// Clockwise Moore neighborhood in (row, col) with rows growing downward,
/// starting from the west neighbor.
const MOORE: [(i64, i64); 8] = [
    (0, -1),  // W
    (-1, -1), // NW
    (-1, 0),  // N
    (-1, 1),  // NE
    (0, 1),   // E
    (1, 1),   // SE
    (1, 0),   // S
    (1, -1),  // SW
];

fn fg(mask: &Array2<bool>, r: i64, c: i64) -> bool {
    let (h, w) = mask.dim();
    r >= 0 && c >= 0 && r < h as i64 && c < w as i64 && mask[(r as usize, c as usize)]
}

/// Moore boundary trace of the foreground of `mask`, oriented
/// counter-clockwise in (x, y). Returns `None` for an empty mask. Thin
/// structures may visit a voxel more than once; the result is still a closed
/// walk. Only the component containing the scan-order-first voxel is traced.
pub fn trace_mask_contour(mask: &Array2<bool>, spacing: (f64, f64)) -> Option<Contour> {
    let (h, w) = mask.dim();
    let start = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .find(|&(r, c)| mask[(r, c)])?;
    let mut points = vec![start];
    // The scan-order-first voxel has a background west neighbor; that cell is
    // the initial backtrack.
    let mut cur = (start.0 as i64, start.1 as i64);
    let mut back = (cur.0, cur.1 - 1);
    let initial = (cur, back);
    let mut seen = std::collections::HashSet::new();
    seen.insert(initial);
    let max_steps = 4 * h * w + 8;
    let mut steps = 0;
    loop {
        // The backtrack is always Chebyshev-adjacent to `cur`; scan the Moore
        // ring clockwise starting just past it.
        let back_dir = MOORE
            .iter()
            .position(|&d| d == (back.0 - cur.0, back.1 - cur.1))
            .expect("backtrack adjacent to current voxel");
        let mut last_bg = back;
        let mut found = None;
        for off in 1..=8 {
            let d = (back_dir + off) % 8;
            let cell = (cur.0 + MOORE[d].0, cur.1 + MOORE[d].1);
            if fg(mask, cell.0, cell.1) {
                found = Some(cell);
                break;
            }
            last_bg = cell;
        }
        let next = match found {
            Some(x) => x,
            None => break, // isolated voxel
        };
        back = last_bg;
        cur = next;
        steps += 1;
        if !seen.insert((cur, back)) || steps > max_steps {
            break;
        }
        points.push((cur.0 as usize, cur.1 as usize));
    }
    if points.len() > 1 && points.last() == points.first() {
        points.pop();
    }

    orient_ccw(&mut points);
    let (arc_mm, total_len_mm) = parameterize(&points, spacing);
    Some(Contour {
        closed: points.len() > 1,
        points,
        arc_mm,
        total_len_mm,
    })
}

fn dist(a: (usize, usize), b: (usize, usize), spacing: (f64, f64)) -> f64 {
    let dy = (a.0 as f64 - b.0 as f64) * spacing.0;
    let dx = (a.1 as f64 - b.1 as f64) * spacing.1;
    (dy * dy + dx * dx).sqrt()
}

fn parameterize(points: &[(usize, usize)], spacing: (f64, f64)) -> (Vec<f64>, f64) {
    let mut arc = Vec::with_capacity(points.len());
    let mut acc = 0.0;
    arc.push(0.0);
    for k in 1..points.len() {
        acc += dist(points[k - 1], points[k], spacing);
        arc.push(acc);
    }
    if points.len() > 1 {
        acc += dist(points[points.len() - 1], points[0], spacing);
    }
    (arc, acc)
}

/// Enforce counter-clockwise orientation in (x, y) via the shoelace sign,
/// keeping the start point fixed.
fn orient_ccw(points: &mut [(usize, usize)]) {
    if points.len() < 3 {
        return;
    }
    let mut area2 = 0.0f64;
    for k in 0..points.len() {
        let (y0, x0) = points[k];
        let (y1, x1) = points[(k + 1) % points.len()];
        area2 += x0 as f64 * y1 as f64 - x1 as f64 * y0 as f64;
    }
    if area2 < 0.0 {
        points[1..].reverse();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use std::collections::BTreeSet;

    fn square_mask(side: usize, pad: usize) -> Array2<bool> {
        let n = side + 2 * pad;
        Array2::from_shape_fn((n, n), |(r, c)| {
            r >= pad && r < pad + side && c >= pad && c < pad + side
        })
    }

    /// Brute-force boundary set: foreground voxels with a non-foreground
    /// 8-neighbor (or on the image edge).
    fn boundary_set(mask: &Array2<bool>) -> BTreeSet<(usize, usize)> {
        let (h, w) = mask.dim();
        let mut out = BTreeSet::new();
        for r in 0..h {
            for c in 0..w {
                if !mask[(r, c)] {
                    continue;
                }
                let mut edge = false;
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        if !fg(mask, r as i64 + dr, c as i64 + dc) {
                            edge = true;
                        }
                    }
                }
                if edge {
                    out.insert((r, c));
                }
            }
        }
        out
    }

    #[test]
    fn square_contour_matches_boundary_oracle() {
        let mask = square_mask(10, 3);
        let contour = trace_mask_contour(&mask, (1.0, 1.0)).unwrap();
        assert_eq!(contour.points.len(), 36);
        let traced: BTreeSet<_> = contour.points.iter().copied().collect();
        assert_eq!(traced, boundary_set(&mask));
    }

    #[test]
    fn single_voxel_contour() {
        let mut mask = Array2::from_elem((5, 5), false);
        mask[(2, 3)] = true;
        let contour = trace_mask_contour(&mask, (0.5, 0.5)).unwrap();
        assert_eq!(contour.points, vec![(2, 3)]);
        assert!(!contour.closed);
        assert_eq!(contour.total_len_mm, 0.0);
    }

    #[test]
    fn contour_is_closed_cycle() {
        let mask = square_mask(7, 2);
        let contour = trace_mask_contour(&mask, (1.0, 1.0)).unwrap();
        let first = contour.points[0];
        let last = *contour.points.last().unwrap();
        let dr = (first.0 as i64 - last.0 as i64).abs();
        let dc = (first.1 as i64 - last.1 as i64).abs();
        assert!(dr <= 1 && dc <= 1);
        assert!(contour.closed);
    }

    #[test]
    fn orientation_counter_clockwise() {
        let mask = square_mask(6, 2);
        let contour = trace_mask_contour(&mask, (1.0, 1.0)).unwrap();
        let mut area2 = 0.0;
        for k in 0..contour.points.len() {
            let (y0, x0) = contour.points[k];
            let (y1, x1) = contour.points[(k + 1) % contour.points.len()];
            area2 += x0 as f64 * y1 as f64 - x1 as f64 * y0 as f64;
        }
        assert!(area2 > 0.0);
    }

    #[test]
    fn arc_lengths_monotonic_and_anisotropic() {
        let mask = square_mask(8, 2);
        let contour = trace_mask_contour(&mask, (0.5, 2.0)).unwrap();
        for k in 1..contour.arc_mm.len() {
            assert!(contour.arc_mm[k] > contour.arc_mm[k - 1]);
        }
        assert!(contour.total_len_mm > *contour.arc_mm.last().unwrap());
        // Perimeter of a 7x7-step square with spacings (0.5, 2.0):
        // two sides of 7 steps each in rows (0.5mm) and cols (2.0mm).
        let expected = 2.0 * (7.0 * 0.5 + 7.0 * 2.0);
        assert!((contour.total_len_mm - expected).abs() < 1e-9);
    }

    #[test]
    fn position_at_interpolates() {
        let mask = square_mask(4, 1);
        let contour = trace_mask_contour(&mask, (1.0, 1.0)).unwrap();
        let (y0, x0) = contour.position_at(0.0, (1.0, 1.0));
        assert_eq!((y0, x0), contour.point_mm(0, (1.0, 1.0)));
        let (y, x) = contour.position_at(0.5, (1.0, 1.0));
        // Half a step along the first unit segment.
        let d0 = (y - y0).hypot(x - x0);
        assert!((d0 - 0.5).abs() < 1e-9);
    }

    #[test]
    fn thin_line_traced_as_walk() {
        let mut mask = Array2::from_elem((5, 8), false);
        for c in 2..6 {
            mask[(2, c)] = true;
        }
        let contour = trace_mask_contour(&mask, (1.0, 1.0)).unwrap();
        // A 1x4 line walks out and back: every voxel appears, interior twice.
        let traced: BTreeSet<_> = contour.points.iter().copied().collect();
        assert_eq!(traced.len(), 4);
        assert!(contour.points.len() >= 4);
    }
}
