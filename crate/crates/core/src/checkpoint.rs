//! Binary checkpoint format.
//!
//! Layout: magic `NFCK`, version u32 LE, u32 JSON meta length + UTF-8 JSON
//! (config, actnorm flags, training step count), then one record per
//! parameter in lexicographic name order:
//! `{u16 name length, name bytes, u8 dtype (0=f32, 1=f64), u8 rank,
//! u32 dims…, raw little-endian values}`.

use crate::error::{FlowError, Result};
use crate::model::{FlowConfig, FlowModel};
use crate::tensor::{Dtype, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 4] = b"NFCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    flow: FlowConfig,
    actnorm_initialized: BTreeMap<String, bool>,
    train_steps: u64,
}

pub fn save<T: Scalar>(model: &FlowModel<T>, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        flow: model.config.clone(),
        actnorm_initialized: model.actnorm_flags().into_iter().collect(),
        train_steps: model.train_steps,
    };
    let meta_json = serde_json::to_vec(&meta)
        .map_err(|e| FlowError::Invalid(format!("checkpoint meta encoding: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    // ParamStore iterates in lexicographic name order already.
    for (name, tensor) in model.params.iter() {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(T::DTYPE.tag());
        out.push(tensor.rank() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match T::DTYPE {
            Dtype::F32 => {
                for &v in tensor.data() {
                    out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
                }
            }
            Dtype::F64 => {
                for &v in tensor.data() {
                    out.extend_from_slice(&v.to_f64().to_le_bytes());
                }
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(FlowError::Checkpoint {
                offset: self.offset,
                reason: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn done(&self) -> bool {
        self.offset == self.bytes.len()
    }
}

pub fn load<T: Scalar>(path: &Path) -> Result<FlowModel<T>> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        offset: 0,
    };
    if cur.take(4, "magic")? != MAGIC {
        return Err(FlowError::Checkpoint {
            offset: 0,
            reason: "bad magic (expected NFCK)".to_string(),
        });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(FlowError::Checkpoint {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let meta_len = cur.u32("meta length")? as usize;
    let meta_offset = cur.offset;
    let meta_bytes = cur.take(meta_len, "meta json")?;
    let meta: CheckpointMeta =
        serde_json::from_slice(meta_bytes).map_err(|e| FlowError::Checkpoint {
            offset: meta_offset,
            reason: format!("bad meta json: {e}"),
        })?;

    let mut model = FlowModel::<T>::build(meta.flow, 0)?;
    let mut seen: BTreeMap<String, bool> = model
        .params
        .iter()
        .map(|(n, _)| (n.clone(), false))
        .collect();

    while !cur.done() {
        let record_offset = cur.offset;
        let name_len = cur.u16("parameter name length")? as usize;
        let name_bytes = cur.take(name_len, "parameter name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| FlowError::Checkpoint {
                offset: record_offset,
                reason: "parameter name is not UTF-8".to_string(),
            })?
            .to_string();
        let dtype = Dtype::from_tag(cur.u8("dtype tag")?).ok_or(FlowError::Checkpoint {
            offset: cur.offset - 1,
            reason: "unknown dtype tag".to_string(),
        })?;
        let rank = cur.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * dtype.byte_width(), "parameter values")?;
        match seen.get_mut(&name) {
            Some(flag) => *flag = true,
            None => {
                return Err(FlowError::Checkpoint {
                    offset: record_offset,
                    reason: format!("unknown parameter name '{name}'"),
                });
            }
        }
        let expected_shape = model.params.get(&name)?.shape().to_vec();
        if expected_shape != shape {
            return Err(FlowError::Checkpoint {
                offset: record_offset,
                reason: format!(
                    "parameter '{name}': shape {shape:?} vs model shape {expected_shape:?}"
                ),
            });
        }
        let data: Vec<T> = match dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|b| T::from_f64(f32::from_le_bytes(b.try_into().unwrap()) as f64))
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|b| T::from_f64(f64::from_le_bytes(b.try_into().unwrap())))
                .collect(),
        };
        model.params.set(&name, Tensor::new(shape, data)?)?;
    }
    if let Some((missing, _)) = seen.iter().find(|(_, &present)| !present) {
        return Err(FlowError::Checkpoint {
            offset: bytes.len(),
            reason: format!("missing parameter '{missing}'"),
        });
    }
    for (name, flag) in &meta.actnorm_initialized {
        model.set_actnorm_flag(name, *flag)?;
    }
    model.train_steps = meta.train_steps;
    Ok(model)
}
