//! Log-Mel features, sliding-window mean normalization and energy VAD.

mod io;
mod mel;

pub use io::{read_lmfb, read_wav, write_lmfb, write_wav};
pub use mel::mel_center_frequencies;

use rustfft::num_complex::Complex;

use crate::config::{Duration, FrontendConfig};
use crate::error::{Error, Result};
use crate::par::*;
use crate::tensor::Tensor;

/// Frames per second of audio at the 10 ms shift.
pub const FRAMES_PER_SECOND: usize = 100;

/// A log-Mel matrix stored bin-major: value `(bin, t)` at `bin * n_frames + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct AcousticFeatures {
    pub n_mels: usize,
    pub n_frames: usize,
    pub mels: Vec<f64>,
    pub frame_shift_ms: f64,
    pub frame_length_ms: f64,
    pub sample_rate_hz: u32,
}

impl AcousticFeatures {
    pub fn new(n_mels: usize, n_frames: usize, mels: Vec<f64>) -> Result<Self> {
        if n_mels == 0 || n_frames == 0 || mels.len() != n_mels * n_frames {
            return Err(Error::shape(
                "features",
                format!("{} values for {n_mels} bins x {n_frames} frames", mels.len()),
            ));
        }
        Ok(Self {
            n_mels,
            n_frames,
            mels,
            frame_shift_ms: 10.0,
            frame_length_ms: 25.0,
            sample_rate_hz: 16000,
        })
    }

    pub fn at(&self, bin: usize, t: usize) -> f64 {
        self.mels[bin * self.n_frames + t]
    }

    fn with_mels(&self, n_frames: usize, mels: Vec<f64>) -> Self {
        Self {
            n_frames,
            mels,
            ..self.clone()
        }
    }

    /// Frames in `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut mels = Vec::with_capacity(self.n_mels * indices.len());
        for bin in 0..self.n_mels {
            let row = &self.mels[bin * self.n_frames..(bin + 1) * self.n_frames];
            mels.extend(indices.iter().map(|&t| row[t]));
        }
        self.with_mels(indices.len(), mels)
    }

    /// `len` frames starting at `start`, wrapping around the end of the utterance.
    pub fn crop_wrapped(&self, start: usize, len: usize) -> Self {
        let idx: Vec<usize> = (0..len).map(|i| (start + i) % self.n_frames).collect();
        self.select(&idx)
    }

    /// Network input `[1, 1, n_mels, n_frames]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 1, self.n_mels, self.n_frames], self.mels.clone()).expect("consistent extents")
    }

    /// Frame energies in dB recovered from the log-Mel energies.
    pub fn frame_energy_db(&self) -> Vec<f64> {
        (0..self.n_frames)
            .map(|t| {
                let col = (0..self.n_mels).map(|b| self.at(b, t));
                let m = col.clone().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + col.map(|v| (v - m).exp()).sum::<f64>().ln();
                10.0 * lse / std::f64::consts::LN_10
            })
            .collect()
    }
}

/// Log-Mel filterbank features of a mono waveform with samples in `[-1, 1]`.
pub fn compute_logmel(pcm: &[f64], sample_rate: u32, cfg: &FrontendConfig) -> Result<AcousticFeatures> {
    if sample_rate < 8000 {
        return Err(Error::InvalidArgument(format!("sample rate {sample_rate} Hz is below 8 kHz")));
    }
    let sr = sample_rate as f64;
    let frame_len = (sr * cfg.frame_length_ms / 1000.0).round() as usize;
    let shift = (sr * cfg.frame_shift_ms / 1000.0).round() as usize;
    if frame_len == 0 || shift == 0 {
        return Err(Error::Config("frame length and shift must be positive".into()));
    }
    if pcm.len() < frame_len {
        return Err(Error::InvalidArgument(format!(
            "waveform of {} samples is shorter than one {frame_len}-sample frame",
            pcm.len()
        )));
    }
    let n_fft = cfg.n_fft.max(frame_len.next_power_of_two());
    let nyquist = sr / 2.0;
    let fmax = if cfg.fmax_hz > 0.0 { cfg.fmax_hz.min(nyquist) } else { nyquist };
    if cfg.fmin_hz >= fmax {
        return Err(Error::Config(format!("mel range {}..{fmax} Hz is empty", cfg.fmin_hz)));
    }
    let bank = mel::MelBank::new(cfg.n_mels, n_fft, sr, cfg.fmin_hz, fmax);
    let framer = mel::Framer::new(frame_len, shift, n_fft);
    let t = framer.num_frames(pcm.len());
    let floor = cfg.log_floor;

    let columns: Vec<Vec<f64>> = (0..t)
        .into_par_iter()
        .map(|i| {
            let mut buf = Vec::<Complex<f64>>::with_capacity(n_fft);
            let mut power = vec![0.0; n_fft / 2 + 1];
            let mut col = vec![0.0; cfg.n_mels];
            framer.power(pcm, i, &mut buf, &mut power);
            bank.apply(&power, &mut col);
            for v in &mut col {
                *v = v.max(floor).ln();
            }
            col
        })
        .collect();

    let mut mels = vec![0.0; cfg.n_mels * t];
    for (i, col) in columns.iter().enumerate() {
        for (b, v) in col.iter().enumerate() {
            mels[b * t + i] = *v;
        }
    }
    if !mels.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("compute_logmel"));
    }
    Ok(AcousticFeatures {
        n_mels: cfg.n_mels,
        n_frames: t,
        mels,
        frame_shift_ms: cfg.frame_shift_ms,
        frame_length_ms: cfg.frame_length_ms,
        sample_rate_hz: sample_rate,
    })
}

/// Start of the `window`-frame normalization window of frame `t`.
///
/// The window is centred on `t` and shifted inward near the edges so it stays
/// inside the utterance; an utterance shorter than the window uses all frames.
pub fn norm_window(t: usize, n_frames: usize, window: usize) -> (usize, usize) {
    let w = window.min(n_frames).max(1);
    let start = t.saturating_sub(w / 2).min(n_frames - w);
    (start, w)
}

/// Subtract from every frame the per-bin mean of its normalization window.
pub fn mean_normalize_sliding(feats: &AcousticFeatures, window: usize) -> AcousticFeatures {
    let n = feats.n_frames;
    let mut out = vec![0.0; feats.mels.len()];
    let mut prefix = vec![0.0; n + 1];
    for bin in 0..feats.n_mels {
        let row = &feats.mels[bin * n..(bin + 1) * n];
        for (i, v) in row.iter().enumerate() {
            prefix[i + 1] = prefix[i] + v;
        }
        for (t, v) in row.iter().enumerate() {
            let (s, w) = norm_window(t, n, window);
            out[bin * n + t] = v - (prefix[s + w] - prefix[s]) / w as f64;
        }
    }
    feats.with_mels(n, out)
}

/// Per-frame speech flags.
pub type VadMask = Vec<bool>;

/// A frame is speech when its energy is within `vad_range_db` of the loudest
/// frame and above the absolute floor `vad_floor_db`.
pub fn energy_vad(feats: &AcousticFeatures, cfg: &FrontendConfig) -> VadMask {
    let e = feats.frame_energy_db();
    let max = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    e.iter()
        .map(|&v| v > max - cfg.vad_range_db && v > cfg.vad_floor_db)
        .collect()
}

/// The first `N` speech frames under `mask`, `N = seconds * 100`.
///
/// Fewer speech frames than `N` returns all of them. `Full` returns the input
/// unchanged, as does a mask with no speech at all.
pub fn trim_with_mask(feats: &AcousticFeatures, mask: &[bool], duration: Duration) -> AcousticFeatures {
    let Duration::Seconds(s) = duration else {
        return feats.clone();
    };
    let limit = s as usize * FRAMES_PER_SECOND;
    let idx: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| i)
        .take(limit)
        .collect();
    if idx.is_empty() {
        log::warn!("VAD found no speech in {} frames; using the untrimmed utterance", feats.n_frames);
        return feats.clone();
    }
    feats.select(&idx)
}

pub fn energy_vad_trim(feats: &AcousticFeatures, duration: Duration, cfg: &FrontendConfig) -> AcousticFeatures {
    match duration {
        Duration::Full => feats.clone(),
        d => trim_with_mask(feats, &energy_vad(feats, cfg), d),
    }
}

/// Test-time pipeline on raw log-Mel: mean normalization over the whole
/// utterance, then selection of the first speech frames. The VAD mask is
/// computed from the raw energies.
pub fn test_features(raw: &AcousticFeatures, duration: Duration, cfg: &FrontendConfig) -> AcousticFeatures {
    let normalized = mean_normalize_sliding(raw, cfg.norm_window_frames);
    match duration {
        Duration::Full => normalized,
        d => trim_with_mask(&normalized, &energy_vad(raw, cfg), d),
    }
}
