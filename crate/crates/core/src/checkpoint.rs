//! `CMUW` weight container.
//!
//! ```text
//! "CMUW" | version u32 | entry count u32 | entries...
//! entry: name_len u32 | name | dtype u8 | ndim u32 | dims u32 * ndim | values
//! ```
//!
//! Integers and values are little-endian. dtype 0 is f32, 1 is f64 and 2 is
//! UTF-8 text, used only by the `__meta__` entry that carries the JSON
//! metadata. The metadata entry is always written first.

use std::fs;
use std::path::Path;

use cmunet_tensor::{DType, Element, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CmUnet, ModelConfig};

pub const MAGIC: &[u8; 4] = b"CMUW";
pub const VERSION: u32 = 1;
pub const META_ENTRY: &str = "__meta__";
const TEXT_DTYPE: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_elements<T: Element>(&self) -> Vec<T> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| T::lit(f64::from(x))).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::lit(x)).collect(),
        }
    }

    pub fn from_elements<T: Element>(v: &[T]) -> Self {
        match T::DTYPE {
            DType::F32 => TensorData::F32(v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN) as f32).collect()),
            DType::F64 => TensorData::F64(v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
    #[serde(default)]
    pub val_miou: Option<f64>,
    /// Full run configuration, when written by training.
    #[serde(default)]
    pub run: Option<serde_json::Value>,
}

impl CheckpointMeta {
    pub fn new(model: ModelConfig) -> Self {
        let seed = model.seed;
        Self { model, epoch: 0, step: 0, seed, val_miou: None, run: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    /// Snapshot of every parameter and buffer of `model`, in creation order.
    pub fn from_model<T: Element>(model: &CmUnet<T>, meta: CheckpointMeta) -> Self {
        let params = model.store.params().iter().map(|p| Entry {
            name: p.name().to_string(),
            shape: p.shape(),
            data: TensorData::from_elements(p.tensor().data()),
        });
        let buffers = model.store.buffers().iter().map(|b| Entry {
            name: b.name().to_string(),
            shape: b.shape().to_vec(),
            data: TensorData::from_elements(&b.get()),
        });
        Self { meta, entries: params.chain(buffers).collect() }
    }

    /// Rebuilds the model from the stored config and loads the weights.
    pub fn to_model<T: Element>(&self) -> Result<CmUnet<T>> {
        let model = CmUnet::new(self.meta.model.clone())?;
        self.load_into(&model)?;
        Ok(model)
    }

    /// Copies weights into `model`; every parameter and buffer must appear exactly once.
    pub fn load_into<T: Element>(&self, model: &CmUnet<T>) -> Result<()> {
        let expected = model.store.params().len() + model.store.buffers().len();
        if self.entries.len() != expected {
            return Err(Error::format(META_ENTRY, format!("{} tensors stored, model has {expected}", self.entries.len())));
        }
        let find = |name: &str, shape: &[usize]| -> Result<&Entry> {
            let e = self.entries.iter().find(|e| e.name == name).ok_or_else(|| Error::format(name, "missing from checkpoint"))?;
            if e.shape != shape {
                return Err(Error::format(name, format!("shape {:?}, model expects {shape:?}", e.shape)));
            }
            Ok(e)
        };
        for p in model.store.params() {
            p.set_data(find(p.name(), &p.shape())?.data.to_elements())?;
        }
        for b in model.store.buffers() {
            b.set(find(b.name(), b.shape())?.data.to_elements())?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32 + 1).to_le_bytes());
        let json = serde_json::to_vec(&self.meta).expect("metadata serializes");
        put_header(&mut out, META_ENTRY, TEXT_DTYPE, &[json.len()]);
        out.extend_from_slice(&json);
        for e in &self.entries {
            match &e.data {
                TensorData::F32(v) => {
                    put_header(&mut out, &e.name, DType::F32.code(), &e.shape);
                    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
                TensorData::F64(v) => {
                    put_header(&mut out, &e.name, DType::F64.code(), &e.shape);
                    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "header")? != MAGIC {
            return Err(Error::format("header", "bad magic"));
        }
        let version = r.u32("header")?;
        if version != VERSION {
            return Err(Error::format("header", format!("unsupported version {version}")));
        }
        let count = r.u32("header")? as usize;
        let mut meta = None;
        let mut entries = Vec::new();
        for i in 0..count {
            let ctx = format!("entry {i}");
            let len = r.u32(&ctx)? as usize;
            let name = String::from_utf8(r.take(len, &ctx)?.to_vec()).map_err(|_| Error::format(&ctx, "name is not UTF-8"))?;
            let dtype = r.take(1, &name)?[0];
            let ndim = r.u32(&name)? as usize;
            if ndim > 8 {
                return Err(Error::format(&name, format!("implausible rank {ndim}")));
            }
            let shape = (0..ndim).map(|_| r.u32(&name).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::format(&name, "dims overflow"))?;
            let width = match dtype {
                TEXT_DTYPE => 1,
                c => DType::from_code(c).ok_or_else(|| Error::format(&name, format!("unknown dtype {c}")))?.size_of(),
            };
            let nbytes = numel.checked_mul(width).ok_or_else(|| Error::format(&name, "dims overflow"))?;
            let raw = r.take(nbytes, &name)?;
            if dtype == TEXT_DTYPE {
                if name != META_ENTRY || meta.is_some() || ndim != 1 {
                    return Err(Error::format(&name, "unexpected text entry"));
                }
                meta = Some(serde_json::from_slice(raw).map_err(|e| Error::format(&name, e.to_string()))?);
                continue;
            }
            if entries.iter().any(|e: &Entry| e.name == name) || name == META_ENTRY {
                return Err(Error::format(&name, "duplicate entry"));
            }
            let data = if dtype == DType::F32.code() {
                TensorData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
            } else {
                TensorData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
            };
            entries.push(Entry { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::format("trailer", format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
        }
        let meta = meta.ok_or_else(|| Error::format(META_ENTRY, "missing"))?;
        Ok(Self { meta, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// A stored tensor by name, widened to f64.
    pub fn tensor(&self, name: &str) -> Option<Tensor<f64>> {
        let e = self.entries.iter().find(|e| e.name == name)?;
        Tensor::new(&e.shape, e.data.to_elements()).ok()
    }
}

fn put_header(out: &mut Vec<u8>, name: &str, dtype: u8, shape: &[usize]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, ctx: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::format(ctx, "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, ctx: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, ctx)?.try_into().expect("4 bytes")))
    }
}
