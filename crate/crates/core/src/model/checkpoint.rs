//! `CMVC` checkpoint files.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic        4 bytes "CMVC"
//! version      u32     1
//! count        u32     number of entries
//! manifest, per entry:
//!   name_len   u32
//!   name       UTF-8 bytes
//!   dtype      u8      0 = f32, 1 = u64
//!   ndim       u32
//!   dims       u32 × ndim
//! payloads, in manifest order: raw f32 or u64 values
//! ```
//!
//! Learnable tensors are stored under `param.<name>`; the trainer adds
//! optimizer moments (`adam.m.<name>`, `adam.v.<name>`) and `u64`
//! bookkeeping entries (`meta.*`) needed to resume a run.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::cmae::{CmaeModel, ModelConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CMVC";
pub const CHECKPOINT_VERSION: u32 = 1;
const MODEL_META: &str = "meta.model.";

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U64(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn push_tensor<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.entries.push(Entry {
            name: name.into(),
            shape: t.shape().to_vec(),
            payload: Payload::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
        });
    }

    pub fn push_u64(&mut self, name: impl Into<String>, values: &[u64]) {
        self.entries.push(Entry {
            name: name.into(),
            shape: vec![values.len().max(1)],
            payload: Payload::U64(values.to_vec()),
        });
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self.entry(name).ok_or_else(|| ck(format!("missing entry {name}")))?;
        match &e.payload {
            Payload::F32(v) => Ok(Tensor::new(e.shape.clone(), v.iter().map(|&x| T::lit(x as f64)).collect())?),
            Payload::U64(_) => Err(ck(format!("{name} is not an f32 tensor"))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.entry(name).map(|e| &e.payload) {
            Some(Payload::U64(v)) => Ok(v),
            Some(_) => Err(ck(format!("{name} is not a u64 entry"))),
            None => Err(ck(format!("missing entry {name}"))),
        }
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        self.u64s(name)?.first().copied().ok_or_else(|| ck(format!("{name} is empty")))
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u32).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            let dtype: u8 = match e.payload {
                Payload::F32(_) => 0,
                Payload::U64(_) => 1,
            };
            w.write_all(&[dtype])?;
            w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
            for &d in &e.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
        }
        for e in &self.entries {
            match &e.payload {
                Payload::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
                Payload::U64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
            }
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ck(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(ck(format!("unsupported version {version}")));
        }
        let count = read_u32(r)? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| ck("entry name is not UTF-8"))?;
            let mut dtype = [0u8];
            r.read_exact(&mut dtype)?;
            let ndim = read_u32(r)? as usize;
            let shape = (0..ndim).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            manifest.push((name, dtype[0], shape));
        }
        let mut entries = Vec::with_capacity(count);
        for (name, dtype, shape) in manifest {
            let n: usize = shape.iter().product();
            let payload = match dtype {
                0 => {
                    let mut buf = vec![0u8; 4 * n];
                    r.read_exact(&mut buf)?;
                    Payload::F32(buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
                }
                1 => {
                    let mut buf = vec![0u8; 8 * n];
                    r.read_exact(&mut buf)?;
                    Payload::U64(buf.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
                }
                other => return Err(ck(format!("unknown dtype {other} for {name}"))),
            };
            entries.push(Entry { name, shape, payload });
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }

    /// Records every model parameter and the model configuration.
    pub fn add_model<T: Scalar>(&mut self, model: &CmaeModel<T>) -> Result<()> {
        let value = serde_json::to_value(&model.cfg)?;
        for (key, v) in value.as_object().expect("config is a struct") {
            let n = v
                .as_u64()
                .or_else(|| v.as_bool().map(u64::from))
                .ok_or_else(|| ck(format!("config field {key} is not integral")))?;
            self.push_u64(format!("{MODEL_META}{key}"), &[n]);
        }
        for (_, name, t) in model.params.iter() {
            self.push_tensor(format!("param.{name}"), t);
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut obj = serde_json::Map::new();
        for e in &self.entries {
            if let (Some(key), Payload::U64(v)) = (e.name.strip_prefix(MODEL_META), &e.payload) {
                let n = v.first().copied().unwrap_or(0);
                let value = if key == "use_feature_decoder" {
                    serde_json::Value::Bool(n != 0)
                } else {
                    serde_json::Value::from(n)
                };
                obj.insert(key.to_string(), value);
            }
        }
        Ok(serde_json::from_value(serde_json::Value::Object(obj))?)
    }

    /// Rebuilds the model recorded by [`Checkpoint::add_model`].
    pub fn to_model<T: Scalar>(&self) -> Result<CmaeModel<T>> {
        let mut model = CmaeModel::new(self.model_config()?)?;
        self.load_params(&mut model)?;
        Ok(model)
    }

    /// Overwrites every parameter of `model` from this checkpoint.
    pub fn load_params<T: Scalar>(&self, model: &mut CmaeModel<T>) -> Result<()> {
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let name = format!("param.{}", model.params.name(id));
            let t = self.tensor(&name)?;
            model.params.set(id, t).map_err(|e| ck(format!("{name}: {e}")))?;
        }
        Ok(())
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
