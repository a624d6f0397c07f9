//! Versioned binary container for named tensors: model parameters, buffers
//! (running statistics) and optional optimizer state. Byte-stable across
//! save/load since parameter maps iterate in name order.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use super::{Adam, AdamConfig, Elem, Params};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CSCK";
const VERSION: u32 = 1;

#[derive(Debug)]
pub struct Checkpoint<E: Elem> {
    pub params: Params<E>,
    pub buffers: Params<E>,
    /// (step count, first moments, second moments)
    pub adam: Option<(u64, Params<E>, Params<E>)>,
}

impl<E: Elem> Checkpoint<E> {
    pub fn adam_state(&self, cfg: AdamConfig<E>) -> Option<Adam<E>> {
        self.adam.as_ref().map(|(step, m, v)| Adam {
            cfg,
            step_count: *step,
            m: m.clone(),
            v: v.clone(),
        })
    }
}

fn write_section<E: Elem>(out: &mut Vec<u8>, params: &Params<E>) {
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, arr) in params {
        let nb = name.as_bytes();
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.push(E::DTYPE);
        out.push(arr.ndim() as u8);
        for &d in arr.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let data = arr.as_slice().expect("contiguous tensor");
        out.extend_from_slice(&((data.len() * std::mem::size_of::<E>()) as u64).to_le_bytes());
        E::append_le(data, out);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

fn read_section<E: Elem>(r: &mut Reader) -> Result<Params<E>> {
    let count = r.u32()?;
    let mut params = Params::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("invalid tensor name".into()))?;
        let dtype = r.u8()?;
        if dtype != E::DTYPE {
            return Err(Error::Format(format!(
                "dtype mismatch for '{name}': file has {dtype}, expected {} ({})",
                E::DTYPE,
                E::DTYPE_NAME
            )));
        }
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let byte_len = r.u64()? as usize;
        let numel: usize = shape.iter().product();
        if byte_len != numel * std::mem::size_of::<E>() {
            return Err(Error::Format(format!(
                "payload length mismatch for '{name}': {byte_len} bytes for shape {shape:?}"
            )));
        }
        let values = E::parse_le(r.take(byte_len)?)
            .ok_or_else(|| Error::Format(format!("bad payload for '{name}'")))?;
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), values)
            .map_err(|e| Error::Format(format!("bad shape for '{name}': {e}")))?;
        params.insert(name, arr);
    }
    Ok(params)
}

pub fn save_checkpoint<E: Elem>(ckpt: &Checkpoint<E>, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    write_section(&mut out, &ckpt.params);
    write_section(&mut out, &ckpt.buffers);
    match &ckpt.adam {
        Some((step, m, v)) => {
            out.push(1);
            out.extend_from_slice(&step.to_le_bytes());
            write_section(&mut out, m);
            write_section(&mut out, v);
        }
        None => out.push(0),
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint<E: Elem>(path: &Path) -> Result<Checkpoint<E>> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let params = read_section(&mut r)?;
    let buffers = read_section(&mut r)?;
    let adam = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let m = read_section(&mut r)?;
            let v = read_section(&mut r)?;
            Some((step, m, v))
        }
        other => return Err(Error::Format(format!("bad optimizer flag {other}"))),
    };
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    Ok(Checkpoint {
        params,
        buffers,
        adam,
    })
}
