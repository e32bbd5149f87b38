//! Binary checkpoints.
//!
//! ```text
//! "SDPM"                      magic
//! u32   version               (1)
//! u32   n, [u8; n]            model config as key=value lines
//! u64   training step
//! u64 × 3                     rng seed, stream, counter
//! u64   optimizer step count
//! u32   tensor count
//! per tensor:
//!   u16 n, [u8; n]            name
//!   u8                        dtype (0 = f32, 1 = f64)
//!   u8                        ndim
//!   u64 × ndim                dims
//!   u64                       payload bytes
//!   payload                   little-endian values
//! ```
//!
//! All integers are little-endian. Optimizer moments are stored as
//! `adam.m.<param>` and `adam.v.<param>`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::rng::RngStream;
use crate::tensor::{DType, Scalar, Tensor};
use crate::unet::{Parameterized, SpikingUNet, TensorRole, UNetConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: [u8; 4] = *b"SDPM";
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

/// Position of a random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub counter: u64,
}

impl RngState {
    pub fn of(rng: &RngStream) -> Self {
        Self { seed: rng.seed(), stream: rng.stream_id(), counter: rng.counter() }
    }

    pub fn stream(&self) -> RngStream {
        RngStream::at(self.seed, self.stream, self.counter)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F: Scalar = f32> {
    pub config: UNetConfig,
    pub step: u64,
    pub rng: RngState,
    pub adam_step: u64,
    /// Model parameters and buffers in visit order, then optimizer moments.
    pub tensors: Vec<(String, Tensor<F>)>,
}

impl<F: Scalar> Checkpoint<F> {
    /// Snapshot of a model, its optimizer and the training stream position.
    pub fn capture(model: &mut SpikingUNet<F>, adam: &AdamState<F>, step: u64, rng: &RngStream) -> Self {
        let mut tensors = Vec::new();
        model.visit(&mut |name, t, _| tensors.push((name, Tensor::from_vec(t.shape(), t.data().to_vec()).expect("same shape"))));
        for (name, (m, v)) in &adam.moments {
            tensors.push((format!("{ADAM_M}{name}"), m.clone()));
            tensors.push((format!("{ADAM_V}{name}"), v.clone()));
        }
        Self { config: model.config().clone(), step, rng: RngState::of(rng), adam_step: adam.step_count, tensors }
    }

    /// Rebuilds the model and optimizer. Every model tensor must be present with its exact shape.
    pub fn restore(&self) -> Result<(SpikingUNet<F>, AdamState<F>)> {
        let mut model = SpikingUNet::<F>::new(self.config.clone(), 0)?;
        let mut by_name: BTreeMap<&str, &Tensor<F>> = BTreeMap::new();
        for (name, t) in &self.tensors {
            if by_name.insert(name.as_str(), t).is_some() {
                return Err(Error::CorruptTensor { name: name.clone(), detail: "stored twice".into() });
            }
        }
        let mut problem = None;
        let mut params = Vec::new();
        model.visit(&mut |name, t, role| {
            if problem.is_some() {
                return;
            }
            match by_name.remove(name.as_str()) {
                Some(src) if src.shape() == t.shape() => t.data_mut().copy_from_slice(src.data()),
                Some(src) => {
                    problem = Some(Error::CorruptTensor {
                        name: name.clone(),
                        detail: format!("shape {:?} does not match model shape {:?}", src.shape(), t.shape()),
                    })
                }
                None => problem = Some(Error::CorruptTensor { name: name.clone(), detail: "missing from checkpoint".into() }),
            }
            if role == TensorRole::Param {
                params.push((name, t.shape().to_vec()));
            }
        });
        if let Some(e) = problem {
            return Err(e);
        }

        let mut adam = AdamState::<F>::new();
        adam.step_count = self.adam_step;
        for (name, shape) in params {
            let m = by_name.remove(format!("{ADAM_M}{name}").as_str());
            let v = by_name.remove(format!("{ADAM_V}{name}").as_str());
            match (m, v) {
                (Some(m), Some(v)) if m.shape() == shape.as_slice() && v.shape() == shape.as_slice() => {
                    adam.moments.insert(name, (m.clone(), v.clone()));
                }
                (None, None) => {}
                _ => {
                    return Err(Error::CorruptTensor {
                        name: format!("{ADAM_M}{name}"),
                        detail: "optimizer moments incomplete or misshapen".into(),
                    })
                }
            }
        }
        if let Some((name, _)) = by_name.into_iter().next() {
            return Err(Error::CorruptTensor { name: name.to_string(), detail: "not part of the model".into() });
        }
        Ok((model, adam))
    }
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn encode<F: Scalar>(ck: &Checkpoint<F>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let cfg = ck.config.to_text();
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(cfg.as_bytes());
    put_u64(&mut out, ck.step);
    put_u64(&mut out, ck.rng.seed);
    put_u64(&mut out, ck.rng.stream);
    put_u64(&mut out, ck.rng.counter);
    put_u64(&mut out, ck.adam_step);
    put_u32(&mut out, ck.tensors.len() as u32);
    for (name, t) in &ck.tensors {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidArgument(format!("tensor name too long: {name}")))?;
        put_u16(&mut out, name_len);
        out.extend_from_slice(name.as_bytes());
        out.push(F::DTYPE.code());
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            put_u64(&mut out, d as u64);
        }
        put_u64(&mut out, (t.len() * F::DTYPE.size()) as u64);
        for &v in t.data() {
            match F::DTYPE {
                DType::F32 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                DType::F64 => out.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
    }
    Ok(out)
}

/// Writes to a sibling temporary file, then renames it over `path`.
pub fn save_checkpoint<F: Scalar>(ck: &Checkpoint<F>, path: &Path) -> Result<()> {
    let bytes = encode(ck)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: impl FnOnce() -> String) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated { what: what(), needed: n, available: self.bytes.len() - self.pos }),
        }
    }

    fn u8(&mut self, what: impl FnOnce() -> String) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: impl FnOnce() -> String) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self, what: impl FnOnce() -> String) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: impl FnOnce() -> String) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

struct Entry<'a> {
    name: String,
    shape: Vec<usize>,
    payload: &'a [u8],
}

/// Parses and validates a checkpoint. Nothing is materialized until every
/// tensor header and byte length has been checked.
pub fn decode_checkpoint<F: Scalar>(bytes: &[u8]) -> Result<Checkpoint<F>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, || "checkpoint magic".into())?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            what: "checkpoint",
            expected: u32::from_be_bytes(MAGIC),
            found: u32::from_be_bytes(magic.try_into().expect("4 bytes")),
        });
    }
    let version = r.u32(|| "checkpoint version".into())?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let cfg_len = r.u32(|| "config length".into())? as usize;
    let cfg_bytes = r.take(cfg_len, || "model config".into())?;
    let cfg_text = std::str::from_utf8(cfg_bytes).map_err(|_| Error::Config("checkpoint config is not UTF-8".into()))?;
    let config = UNetConfig::from_text(cfg_text)?;
    let step = r.u64(|| "step counter".into())?;
    let rng = RngState {
        seed: r.u64(|| "rng state".into())?,
        stream: r.u64(|| "rng state".into())?,
        counter: r.u64(|| "rng state".into())?,
    };
    let adam_step = r.u64(|| "optimizer step".into())?;
    let count = r.u32(|| "tensor count".into())? as usize;

    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let at = |what: &str| format!("{what} of tensor #{i}");
        let name_len = r.u16(|| at("name length"))? as usize;
        let name = std::str::from_utf8(r.take(name_len, || at("name"))?)
            .map_err(|_| Error::CorruptTensor { name: format!("#{i}"), detail: "name is not UTF-8".into() })?
            .to_string();
        let corrupt = |detail: String| Error::CorruptTensor { name: name.clone(), detail };
        let dtype = r.u8(|| format!("dtype of tensor `{name}`"))?;
        match DType::from_code(dtype) {
            Some(d) if d == F::DTYPE => {}
            Some(d) => return Err(corrupt(format!("stored as {d:?}, expected {:?}", F::DTYPE))),
            None => return Err(corrupt(format!("unknown dtype code {dtype}"))),
        }
        let ndim = r.u8(|| format!("rank of tensor `{name}`"))? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64(|| format!("dims of tensor `{name}`"))? as usize);
        }
        let byte_len = r.u64(|| format!("byte length of tensor `{name}`"))?;
        let expect = shape
            .iter()
            .try_fold(F::DTYPE.size(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| corrupt("dims overflow".into()))?;
        if byte_len != expect as u64 {
            return Err(corrupt(format!("payload of {byte_len} bytes, shape {shape:?} needs {expect}")));
        }
        let payload = r.take(expect, || format!("payload of tensor `{name}`"))?;
        entries.push(Entry { name, shape, payload });
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptTensor {
            name: entries.last().map_or_else(|| "<header>".into(), |e| e.name.clone()),
            detail: format!("{} trailing bytes after the tensor table", bytes.len() - r.pos),
        });
    }

    let tensors = entries
        .into_iter()
        .map(|e| {
            let data: Vec<F> = match F::DTYPE {
                DType::F32 => e.payload.chunks_exact(4).map(|c| F::of(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect(),
                DType::F64 => e.payload.chunks_exact(8).map(|c| F::of(f64::from_le_bytes(c.try_into().unwrap()))).collect(),
            };
            Ok((e.name, Tensor::from_vec(&e.shape, data)?))
        })
        .collect::<Result<_>>()?;
    Ok(Checkpoint { config, step, rng, adam_step, tensors })
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<Checkpoint<F>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
