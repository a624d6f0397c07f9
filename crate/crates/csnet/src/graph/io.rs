//! Versioned binary graph files with bit-exact round trips.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

use super::{CartilageGraph, Csr, EdgeKind, Fov, SurfaceVertex};

const MAGIC: &[u8; 4] = b"CSGR";
const VERSION: u32 = 1;

const FLAG_SUBJECT: u8 = 1;
const FLAG_SLICES: u8 = 2;
const FLAG_PATCHES: u8 = 4;

pub fn save_graph(g: &CartilageGraph, path: &Path) -> Result<()> {
    let n = g.vertices.len();
    let e = g.csr.cols.len();
    if n > u32::MAX as usize || g.fov.slice_range.1 > u16::MAX as usize {
        return Err(Error::InvalidGraph("graph too large for file format".into()));
    }
    let p = g.patch_size_px;
    let mut out = Vec::with_capacity(64 + n * (8 + 16 + 4 * p * p) + e * 5);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let id = g.subject_id.as_bytes();
    out.extend_from_slice(&(id.len() as u16).to_le_bytes());
    out.extend_from_slice(id);
    out.extend_from_slice(&g.inter_slice_spacing_mm.to_le_bytes());
    for v in [
        g.fov.superior_mm,
        g.fov.inferior_mm,
        g.fov.anterior_mm,
        g.fov.posterior_mm,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(g.fov.slice_range.0 as u16).to_le_bytes());
    out.extend_from_slice(&(g.fov.slice_range.1 as u16).to_le_bytes());
    out.extend_from_slice(&(p as u16).to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(e as u32).to_le_bytes());
    for v in &g.vertices {
        if v.patch.dim() != (p, p) || v.slice_index > u16::MAX as usize {
            return Err(Error::InvalidGraph("vertex out of format range".into()));
        }
        out.push(v.cartilage_id);
        out.extend_from_slice(&(v.slice_index as u16).to_le_bytes());
        for c in v.coord_mm {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out.extend_from_slice(&v.arc_pos_mm.to_le_bytes());
    }
    for v in &g.vertices {
        for x in v.patch.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    for &r in &g.csr.row_ptr {
        out.extend_from_slice(&r.to_le_bytes());
    }
    for &c in &g.csr.cols {
        out.extend_from_slice(&c.to_le_bytes());
    }
    for &k in &g.csr.kinds {
        out.push(k as u8);
    }
    let mut flags = 0u8;
    if g.subject_grade.is_some() {
        flags |= FLAG_SUBJECT;
    }
    if g.slice_grades.is_some() {
        flags |= FLAG_SLICES;
    }
    if g.patch_grades.is_some() {
        flags |= FLAG_PATCHES;
    }
    out.push(flags);
    if let Some(s) = g.subject_grade {
        out.push(s);
    }
    if let Some(s) = &g.slice_grades {
        out.extend_from_slice(&(s.len() as u16).to_le_bytes());
        out.extend_from_slice(s);
    }
    if let Some(pg) = &g.patch_grades {
        if pg.len() != n {
            return Err(Error::InvalidGraph("patch grade count mismatch".into()));
        }
        out.extend_from_slice(pg);
    }
    fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("graph file truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_graph(path: &Path) -> Result<CartilageGraph> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a graph file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported graph version {version}")));
    }
    let id_len = r.u16()? as usize;
    let subject_id = String::from_utf8(r.take(id_len)?.to_vec())
        .map_err(|_| Error::Format("invalid subject id".into()))?;
    let inter_slice_spacing_mm = r.f32()?;
    let fov = Fov {
        superior_mm: r.f32()?,
        inferior_mm: r.f32()?,
        anterior_mm: r.f32()?,
        posterior_mm: r.f32()?,
        slice_range: {
            let lo = r.u16()? as usize;
            let hi = r.u16()? as usize;
            (lo, hi)
        },
    };
    let p = r.u16()? as usize;
    let n = r.u32()? as usize;
    let e = r.u32()? as usize;
    let mut vertices = Vec::with_capacity(n);
    for _ in 0..n {
        vertices.push(SurfaceVertex {
            cartilage_id: r.u8()?,
            slice_index: r.u16()? as usize,
            coord_mm: [r.f32()?, r.f32()?, r.f32()?],
            arc_pos_mm: r.f32()?,
            patch: Array2::zeros((0, 0)),
        });
    }
    for v in &mut vertices {
        if v.cartilage_id > 2 {
            return Err(Error::Format(format!("bad cartilage id {}", v.cartilage_id)));
        }
        let raw = r.take(4 * p * p)?;
        let vals: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        v.patch = Array2::from_shape_vec((p, p), vals).expect("patch shape");
    }
    let mut row_ptr = Vec::with_capacity(n + 1);
    for _ in 0..=n {
        row_ptr.push(r.u32()?);
    }
    let mut cols = Vec::with_capacity(e);
    for _ in 0..e {
        cols.push(r.u32()?);
    }
    let mut kinds = Vec::with_capacity(e);
    for _ in 0..e {
        let k = r.u8()?;
        kinds.push(EdgeKind::from_u8(k).ok_or_else(|| Error::Format(format!("bad edge kind {k}")))?);
    }
    let csr = Csr { row_ptr, cols, kinds };
    csr.validate(n)?;
    let flags = r.u8()?;
    if flags & !(FLAG_SUBJECT | FLAG_SLICES | FLAG_PATCHES) != 0 {
        return Err(Error::Format(format!("bad label flags {flags:#x}")));
    }
    let subject_grade = if flags & FLAG_SUBJECT != 0 {
        Some(r.u8()?)
    } else {
        None
    };
    let slice_grades = if flags & FLAG_SLICES != 0 {
        let len = r.u16()? as usize;
        Some(r.take(len)?.to_vec())
    } else {
        None
    };
    let patch_grades = if flags & FLAG_PATCHES != 0 {
        Some(r.take(n)?.to_vec())
    } else {
        None
    };
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes in graph file".into()));
    }
    Ok(CartilageGraph {
        subject_id,
        inter_slice_spacing_mm,
        fov,
        patch_size_px: p,
        vertices,
        csr,
        subject_grade,
        slice_grades,
        patch_grades,
    })
}
