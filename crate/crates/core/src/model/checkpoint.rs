//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//! `"HUSE"`, `u32` version, `u32` tensor count, then per tensor:
//! `u32` name length, UTF-8 name, `u32` rank, `u64` per dim, `f64` values.
//! Besides the parameters, scalar tensors `image.dropout`, `text.dropout`
//! and `norm_epsilon` carry the configuration needed to rebuild the model.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Dense, HuseModel, SharedClassifier, Tower};
use crate::error::{HuseError, Result};
use crate::numerics::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HUSE";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl HuseModel {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut entries: Vec<(String, Vec<usize>, Vec<f64>)> = self
            .tensors()
            .into_iter()
            .map(|(n, d, v)| (n, d, v.to_vec()))
            .collect();
        entries.push((
            "image.dropout".into(),
            vec![1],
            vec![self.image.config.dropout_rate],
        ));
        entries.push((
            "text.dropout".into(),
            vec![1],
            vec![self.text.config.dropout_rate],
        ));
        entries.push((
            "norm_epsilon".into(),
            vec![1],
            vec![self.image.norm_epsilon],
        ));

        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, dims, data) in entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(HuseError::CorruptCheckpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(HuseError::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| HuseError::CorruptCheckpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(HuseError::CorruptCheckpoint(format!(
                    "tensor {name} has rank {rank}"
                )));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u64()? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| {
                    HuseError::CorruptCheckpoint(format!("tensor {name} is too large"))
                })?;
            if n > bytes.len() {
                return Err(HuseError::CorruptCheckpoint(format!(
                    "tensor {name} is truncated"
                )));
            }
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
            if tensors
                .insert(name.clone(), Tensor { dims, data })
                .is_some()
            {
                return Err(HuseError::CorruptCheckpoint(format!(
                    "duplicate tensor {name}"
                )));
            }
        }
        if r.pos != bytes.len() {
            return Err(HuseError::CorruptCheckpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        rebuild(tensors).map_err(|e| match e {
            HuseError::CorruptCheckpoint(_) => e,
            other => HuseError::CorruptCheckpoint(other.to_string()),
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes()).map_err(|e| HuseError::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| HuseError::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                HuseError::CorruptCheckpoint(format!("unexpected end of file at byte {}", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn scalar(tensors: &mut BTreeMap<String, Tensor>, name: &str) -> Result<f64> {
    let t = tensors
        .remove(name)
        .ok_or_else(|| HuseError::CorruptCheckpoint(format!("missing tensor {name}")))?;
    match t.data.as_slice() {
        [v] => Ok(*v),
        _ => Err(HuseError::CorruptCheckpoint(format!(
            "{name} is not a scalar"
        ))),
    }
}

fn matrix(t: Tensor, name: &str) -> Result<Matrix> {
    match t.dims.as_slice() {
        [r, c] => Matrix::new(*r, *c, t.data),
        _ => Err(HuseError::CorruptCheckpoint(format!(
            "{name} is not rank 2"
        ))),
    }
}

fn vector(t: Tensor, name: &str) -> Result<Vec<f64>> {
    match t.dims.as_slice() {
        [_] => Ok(t.data),
        _ => Err(HuseError::CorruptCheckpoint(format!(
            "{name} is not rank 1"
        ))),
    }
}

fn take_layer(tensors: &mut BTreeMap<String, Tensor>, prefix: &str) -> Result<Option<Dense>> {
    let wname = format!("{prefix}.weight");
    let bname = format!("{prefix}.bias");
    let Some(w) = tensors.remove(&wname) else {
        return Ok(None);
    };
    let b = tensors
        .remove(&bname)
        .ok_or_else(|| HuseError::CorruptCheckpoint(format!("missing tensor {bname}")))?;
    Ok(Some(Dense {
        weight: matrix(w, &wname)?,
        bias: vector(b, &bname)?,
    }))
}

fn rebuild(mut tensors: BTreeMap<String, Tensor>) -> Result<HuseModel> {
    let eps = scalar(&mut tensors, "norm_epsilon")?;
    let mut towers = Vec::new();
    for name in ["image", "text"] {
        let dropout = scalar(&mut tensors, &format!("{name}.dropout"))?;
        let mut layers = Vec::new();
        while let Some(layer) = take_layer(&mut tensors, &format!("{name}.{}", layers.len()))? {
            layers.push(layer);
        }
        towers.push(Tower::from_layers(layers, dropout, eps)?);
    }
    let head = take_layer(&mut tensors, "classifier")?
        .ok_or_else(|| HuseError::CorruptCheckpoint("missing classifier".into()))?;
    if let Some(extra) = tensors.keys().next() {
        return Err(HuseError::CorruptCheckpoint(format!(
            "unexpected tensor {extra}"
        )));
    }
    let text = towers.pop().unwrap();
    let image = towers.pop().unwrap();
    HuseModel::from_parts(image, text, SharedClassifier::new(head.weight, head.bias)?)
}
