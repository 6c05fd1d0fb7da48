//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `ASTGP`, format version `u32`, the model
//! dimensions `d_h, N, T_h, F` as `u32`, a block count `u32`, then per block
//! its name (`u32` length + UTF-8), rank `u32`, extents `u32 x rank` and the
//! `f64` payload. An optional optimizer appendix follows: magic `ADAM`, step
//! `u64`, block count `u32` and the first / second moment blocks named
//! `m.<param>` and `v.<param>`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelParams};
use crate::tensor::Tensor;
use crate::training::AdamState;

const MAGIC: &[u8; 5] = b"ASTGP";
const ADAM_MAGIC: &[u8; 4] = b"ADAM";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: Option<AdamState>,
}

pub fn encode(params: &ModelParams, optimizer: Option<&AdamState>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let d = params.dims();
    for x in [d.hidden, d.vertices, d.steps, d.features] {
        put_u32(&mut out, x as u32);
    }
    let entries = params.entries();
    put_u32(&mut out, entries.len() as u32);
    for (name, t) in &entries {
        put_block(&mut out, name, t);
    }
    if let Some(opt) = optimizer {
        out.extend_from_slice(ADAM_MAGIC);
        out.extend_from_slice(&opt.step.to_le_bytes());
        put_u32(&mut out, 2 * entries.len() as u32);
        for (prefix, moments) in [("m", &opt.m), ("v", &opt.v)] {
            for ((name, _), t) in entries.iter().zip(moments) {
                put_block(&mut out, &format!("{prefix}.{name}"), t);
            }
        }
    }
    out
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, origin };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(r.fail("not a parameter checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(&format!("unsupported checkpoint version {version}")));
    }
    let dims = ModelDims {
        hidden: r.u32()? as usize,
        vertices: r.u32()? as usize,
        steps: r.u32()? as usize,
        features: r.u32()? as usize,
    };
    dims.validate()?;
    let template = ModelParams::zeros(dims);
    let n = r.u32()? as usize;
    if n != template.len() {
        return Err(r.fail(&format!("expected {} parameter blocks, found {n}", template.len())));
    }
    let params = template.try_map(|name, t| r.block(name, t.shape()))?;

    let optimizer = if r.pos == bytes.len() {
        None
    } else {
        if r.take(ADAM_MAGIC.len())? != ADAM_MAGIC {
            return Err(r.fail("unexpected trailing bytes"));
        }
        let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let n = r.u32()? as usize;
        if n != 2 * template.len() {
            return Err(r.fail(&format!("expected {} optimizer blocks, found {n}", 2 * template.len())));
        }
        let mut moments = [Vec::new(), Vec::new()];
        for (prefix, slot) in ["m", "v"].iter().zip(moments.iter_mut()) {
            for (name, t) in template.entries() {
                slot.push(r.block(&format!("{prefix}.{name}"), t.shape())?);
            }
        }
        let [m, v] = moments;
        if r.pos != bytes.len() {
            return Err(r.fail("unexpected trailing bytes"));
        }
        Some(AdamState { step, m, v })
    };
    Ok(Checkpoint { params, optimizer })
}

pub fn write_checkpoint(path: impl AsRef<Path>, params: &ModelParams, optimizer: Option<&AdamState>) -> Result<()> {
    std::fs::write(path, encode(params, optimizer))?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    decode(&bytes, path)
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_block(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.ndim() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: &str) -> Error {
        Error::format(self.origin, format!("{msg} (at byte {})", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn block(&mut self, want_name: &str, want_shape: &[usize]) -> Result<Tensor> {
        let len = self.u32()? as usize;
        let name = self.take(len)?;
        if name != want_name.as_bytes() {
            return Err(self.fail(&format!(
                "expected block {want_name}, found {}",
                String::from_utf8_lossy(name)
            )));
        }
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        if shape != want_shape {
            return Err(self.fail(&format!("block {want_name} has shape {shape:?}, expected {want_shape:?}")));
        }
        let count: usize = shape.iter().product();
        let raw = self.take(count * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data)
    }
}
