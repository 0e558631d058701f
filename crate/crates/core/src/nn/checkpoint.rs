//! Checkpoint container: magic `WRCKPT1`, the training counters, then a flat
//! list of named tensors in raw little-endian form. One element type per
//! file; the loader detects it and hands back the matching variant.
//!
//! Writes go through a temp file and a rename so an interrupted run can never
//! leave a half-written checkpoint under the real name.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::scalar::{Dtype, Scalar};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"WRCKPT1";

#[derive(Debug, Clone)]
pub struct Checkpoint<S> {
    pub epoch: u64,
    pub global_step: u64,
    pub base_seed: u64,
    pub tensors: Vec<(String, Tensor<S>)>,
}

#[derive(Debug)]
pub enum CheckpointData {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl<S: Scalar> Checkpoint<S> {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

pub fn write_checkpoint<S: Scalar>(path: impl AsRef<Path>, ck: &Checkpoint<S>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let file = fs::File::create(&tmp)?;
        let mut w = std::io::BufWriter::new(file);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&ck.epoch.to_le_bytes())?;
        w.write_all(&ck.global_step.to_le_bytes())?;
        w.write_all(&ck.base_seed.to_le_bytes())?;
        w.write_all(&(ck.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &ck.tensors {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize {
                return Err(Error::data(format!("tensor name too long: {name}")));
            }
            w.write_all(&(nb.len() as u16).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&[S::DTYPE as u8])?;
            if t.shape.len() > u8::MAX as usize {
                return Err(Error::data(format!("tensor {name} has too many dims")));
            }
            w.write_all(&[t.shape.len() as u8])?;
            for &d in &t.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in &t.data {
                w.write_all(&v.to_le_bytes_vec())?;
            }
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format("checkpoint truncated"));
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
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointData> {
    let path = path.as_ref();
    let buf = fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(Error::format(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let epoch = r.u64()?;
    let global_step = r.u64()?;
    let base_seed = r.u64()?;
    let count = r.u32()? as usize;

    let mut dtype: Option<Dtype> = None;
    let mut raw: Vec<(String, Vec<usize>, &[u8])> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::format("tensor name is not UTF-8"))?
            .to_string();
        let dt = Dtype::from_u8(r.u8()?)
            .ok_or_else(|| Error::format(format!("unknown dtype tag for tensor {name}")))?;
        match dtype {
            None => dtype = Some(dt),
            Some(prev) if prev != dt => {
                return Err(Error::format("mixed element types in one checkpoint"));
            }
            _ => {}
        }
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = r.take(
            numel
                .checked_mul(dt.size_bytes())
                .ok_or_else(|| Error::format("tensor size overflow"))?,
        )?;
        raw.push((name, shape, bytes));
    }
    if r.pos != buf.len() {
        return Err(Error::format("trailing bytes after last tensor"));
    }

    fn decode<S: Scalar>(raw: &[(String, Vec<usize>, &[u8])]) -> Vec<(String, Tensor<S>)> {
        raw.iter()
            .map(|(name, shape, bytes)| {
                let sz = S::DTYPE.size_bytes();
                let data = bytes.chunks_exact(sz).map(S::from_le_slice).collect();
                (
                    name.clone(),
                    Tensor {
                        shape: shape.clone(),
                        data,
                    },
                )
            })
            .collect()
    }

    Ok(match dtype.unwrap_or(Dtype::F32) {
        Dtype::F32 => CheckpointData::F32(Checkpoint {
            epoch,
            global_step,
            base_seed,
            tensors: decode(&raw),
        }),
        Dtype::F64 => CheckpointData::F64(Checkpoint {
            epoch,
            global_step,
            base_seed,
            tensors: decode(&raw),
        }),
    })
}
