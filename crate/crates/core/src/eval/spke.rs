//! SPKE embedding files: `SPKE`, version, dim, count, then `u16` id length,
//! UTF-8 id and `dim` little-endian `f32` per record.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::SpeakerEmbedding;

const MAGIC: &[u8; 4] = b"SPKE";
const VERSION: u32 = 1;

pub fn encode(embs: &[SpeakerEmbedding]) -> Result<Vec<u8>> {
    let dim = embs.first().map_or(0, |e| e.vector.len());
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in [VERSION, dim as u32, embs.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for e in embs {
        if e.vector.len() != dim {
            return Err(Error::InvalidArgument("embeddings differ in dimension".into()));
        }
        let id = e.id.as_bytes();
        let n = u16::try_from(id.len()).map_err(|_| Error::InvalidArgument(format!("id too long: {}", e.id)))?;
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(id);
        for &x in &e.vector {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<SpeakerEmbedding>> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::format("SPKE", "truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(Error::format("SPKE", "bad magic"));
    }
    let rd = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let version = rd(take(4)?);
    if version != VERSION {
        return Err(Error::format("SPKE", format!("unsupported version {version}")));
    }
    let dim = rd(take(4)?) as usize;
    let count = rd(take(4)?) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let n = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let id = std::str::from_utf8(take(n)?)
            .map_err(|_| Error::format("SPKE", "id is not UTF-8"))?
            .to_string();
        let vector = take(4 * dim)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.push(SpeakerEmbedding { id, vector });
    }
    if pos != bytes.len() {
        return Err(Error::format("SPKE", "trailing bytes"));
    }
    Ok(out)
}

pub fn save(path: &Path, embs: &[SpeakerEmbedding]) -> Result<()> {
    std::fs::write(path, encode(embs)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<SpeakerEmbedding>> {
    decode(&std::fs::read(path)?)
}
