//! `SPKV` checkpoints: the run configuration plus every named tensor.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::SpeakerModel;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SPKV";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

/// Serialize parameters and batch-norm buffers of `model`.
///
/// The model and loss sections of the embedded configuration are taken from `model` itself.
pub fn encode(model: &SpeakerModel, cfg: &RunConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = RunConfig {
        model: model.cfg.clone(),
        loss: model.classifier.cfg.clone(),
        ..cfg.clone()
    };
    let text = cfg.to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let tensors: Vec<(&str, &Tensor)> = model
        .store
        .params()
        .iter()
        .map(|p| (p.name.as_str(), &p.value))
        .chain(model.store.buffers())
        .collect();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("SPKV", format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parse a checkpoint into its configuration and named tensors.
pub fn decode_raw(bytes: &[u8]) -> Result<(RunConfig, HashMap<String, Tensor>)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::format("SPKV", "bad magic"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::format("SPKV", format!("unsupported version {version}")));
    }
    let len = c.u32()? as usize;
    let text = std::str::from_utf8(c.take(len)?).map_err(|_| Error::format("SPKV", "config is not UTF-8"))?;
    let cfg = RunConfig::from_text(text)?;
    let count = c.u32()?;
    let mut tensors = HashMap::new();
    for _ in 0..count {
        let n = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(n)?)
            .map_err(|_| Error::format("SPKV", "tensor name is not UTF-8"))?
            .to_string();
        let dtype = c.u8()?;
        let rank = c.u8()? as usize;
        let shape = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = match dtype {
            DTYPE_F32 => c
                .take(len * 4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect(),
            DTYPE_F64 => c
                .take(len * 8)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
            other => return Err(Error::format("SPKV", format!("{name}: unknown dtype tag {other}"))),
        };
        tensors.insert(name, Tensor::new(&shape, data)?);
    }
    if c.pos != bytes.len() {
        return Err(Error::format("SPKV", "trailing bytes"));
    }
    Ok((cfg, tensors))
}

/// Rebuild the model described by a checkpoint and load its tensors.
pub fn decode(bytes: &[u8]) -> Result<(RunConfig, SpeakerModel)> {
    let (cfg, tensors) = decode_raw(bytes)?;
    let mut model = SpeakerModel::new(&cfg.model, &cfg.loss)?;
    let expected = model.store.params().len() + model.store.buffers().count();
    if tensors.len() != expected {
        return Err(Error::format(
            "SPKV",
            format!("{} tensors, model has {expected}", tensors.len()),
        ));
    }
    model.store.load_named(&tensors)?;
    Ok((cfg, model))
}

pub fn save(path: &Path, model: &SpeakerModel, cfg: &RunConfig) -> Result<()> {
    fs::write(path, encode(model, cfg))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(RunConfig, SpeakerModel)> {
    decode(&fs::read(path)?)
}
