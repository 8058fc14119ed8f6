use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::AcousticFeatures;
use crate::error::{Error, Result};

const LMFB_MAGIC: &[u8; 4] = b"LMFB";
const LMFB_VERSION: u32 = 1;

/// Mono 16-bit PCM samples scaled to `[-1, 1)`, with the sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::format("wav", format!("{}: {} channels, expected mono", path.display(), spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::format("wav", format!("{}: expected 16-bit PCM", path.display())));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((samples, spec.sample_rate))
}

/// Write samples in `[-1, 1]` as mono 16-bit PCM; values outside are clipped.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample((s * 32767.0).round().clamp(-32768.0, 32767.0) as i16)?;
    }
    w.finalize()?;
    Ok(())
}

pub fn write_lmfb(path: &Path, feats: &AcousticFeatures) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(LMFB_MAGIC)?;
    w.write_all(&LMFB_VERSION.to_le_bytes())?;
    w.write_all(&(feats.n_mels as u32).to_le_bytes())?;
    w.write_all(&(feats.n_frames as u32).to_le_bytes())?;
    w.write_all(&(feats.frame_shift_ms as f32).to_le_bytes())?;
    for v in &feats.mels {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_lmfb(path: &Path) -> Result<AcousticFeatures> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let bad = |d: &str| Error::format("LMFB", format!("{}: {d}", path.display()));
    if bytes.len() < 20 || &bytes[..4] != LMFB_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    if u32_at(4) != LMFB_VERSION {
        return Err(bad("unsupported version"));
    }
    let (n_mels, n_frames) = (u32_at(8) as usize, u32_at(12) as usize);
    let shift = f32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes"));
    let body = &bytes[20..];
    if body.len() != n_mels * n_frames * 4 {
        return Err(bad("payload length does not match header"));
    }
    let mels = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let mut f = AcousticFeatures::new(n_mels, n_frames, mels)?;
    f.frame_shift_ms = shift as f64;
    Ok(f)
}
