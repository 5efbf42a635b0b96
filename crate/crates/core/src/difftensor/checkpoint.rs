//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "HVPRCKPT"  u32 version  u32 count  count x tensor-record
//! then zero or more sections, each a 4-byte tag:
//!   "OPTM"  u64 step  u32 count  count x tensor-record (first moments)
//!                     u32 count  count x tensor-record (second moments)
//!   "CONF"  u64 length  UTF-8 text
//! tensor-record: u32 name length, UTF-8 name, u32 rank, rank x u64 extent,
//!                numel x f64 value
//! ```

use crate::difftensor::optim::AdamState;
use crate::difftensor::tensor::{ParamStore, Tensor};
use crate::error::{HvprError, Result};

pub const MAGIC: &[u8; 8] = b"HVPRCKPT";
pub const FORMAT_VERSION: u32 = 1;
const TAG_OPTIMIZER: &[u8; 4] = b"OPTM";
const TAG_CONFIG: &[u8; 4] = b"CONF";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<(u64, Vec<(String, Tensor)>, Vec<(String, Tensor)>)>,
    pub config: Option<String>,
}

fn put_record(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &e in shape {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(store: &ParamStore, optimizer: Option<&AdamState>, config: Option<&str>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        put_record(&mut out, &p.name, p.tensor.shape(), p.tensor.data());
    }
    if let Some(state) = optimizer {
        out.extend_from_slice(TAG_OPTIMIZER);
        out.extend_from_slice(&state.step.to_le_bytes());
        for moments in [&state.m, &state.v] {
            out.extend_from_slice(&(store.len() as u32).to_le_bytes());
            for ((_, p), m) in store.iter().zip(moments) {
                put_record(&mut out, &p.name, p.tensor.shape(), m);
            }
        }
    }
    if let Some(text) = config {
        out.extend_from_slice(TAG_CONFIG);
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(HvprError::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            ))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn record(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|e| HvprError::Checkpoint(format!("parameter name is not UTF-8: {e}")))?
            .to_string();
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= self.bytes.len()))
            .ok_or_else(|| {
                HvprError::Checkpoint(format!("`{name}` has implausible shape {shape:?}"))
            })?;
        let raw = self.take(numel * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, Tensor::new(&shape, values)?))
    }

    fn records(&mut self) -> Result<Vec<(String, Tensor)>> {
        let count = self.u32()? as usize;
        (0..count).map(|_| self.record()).collect()
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(HvprError::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(HvprError::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let params = r.records()?;
    let mut ckpt = Checkpoint {
        params,
        optimizer: None,
        config: None,
    };
    while r.pos < bytes.len() {
        let tag = r.take(4)?;
        if tag == TAG_OPTIMIZER {
            let step = r.u64()?;
            let m = r.records()?;
            let v = r.records()?;
            ckpt.optimizer = Some((step, m, v));
        } else if tag == TAG_CONFIG {
            let len = r.u64()? as usize;
            let text = std::str::from_utf8(r.take(len)?)
                .map_err(|e| HvprError::Checkpoint(format!("config is not UTF-8: {e}")))?;
            ckpt.config = Some(text.to_string());
        } else {
            return Err(HvprError::Checkpoint(format!(
                "unknown section tag {:?} at byte {}",
                String::from_utf8_lossy(tag),
                r.pos - 4
            )));
        }
    }
    Ok(ckpt)
}

impl Checkpoint {
    /// Copies every stored tensor into the same-named entry of `store`.
    /// The checkpoint must cover exactly the store's parameters.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(HvprError::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| HvprError::Checkpoint(format!("unexpected parameter `{name}`")))?;
            let dst = &mut store.get_mut(id).tensor;
            if dst.shape() != t.shape() {
                return Err(HvprError::Checkpoint(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    /// Rebuilds optimizer moments aligned with `store` order.
    pub fn optimizer_state(&self, store: &ParamStore) -> Result<Option<AdamState>> {
        let Some((step, m, v)) = &self.optimizer else {
            return Ok(None);
        };
        let align = |records: &Vec<(String, Tensor)>| -> Result<Vec<Vec<f64>>> {
            store
                .iter()
                .map(|(_, p)| {
                    records
                        .iter()
                        .find(|(n, _)| n == &p.name)
                        .map(|(_, t)| t.data().to_vec())
                        .ok_or_else(|| {
                            HvprError::Checkpoint(format!("no optimizer state for `{}`", p.name))
                        })
                })
                .collect()
        };
        Ok(Some(AdamState {
            step: *step,
            m: align(m)?,
            v: align(v)?,
        }))
    }
}
