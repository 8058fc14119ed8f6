use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Centre frequencies in Hz of `n_mels` triangular filters spanning `[fmin, fmax]`.
pub fn mel_center_frequencies(n_mels: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    mel_edges(n_mels, fmin, fmax)[1..=n_mels].to_vec()
}

fn mel_edges(n_mels: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Triangular filters on the linear-frequency grid of an `n_fft` transform.
#[derive(Clone, Debug)]
pub(crate) struct MelBank {
    /// Per filter: first FFT bin and weights from there on.
    filters: Vec<(usize, Vec<f64>)>,
}

impl MelBank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: f64, fmin: f64, fmax: f64) -> Self {
        let edges = mel_edges(n_mels, fmin, fmax);
        let bin_hz = sample_rate / n_fft as f64;
        let n_bins = n_fft / 2 + 1;
        let filters = (0..n_mels)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                let mut start = None;
                let mut w = Vec::new();
                for k in 0..n_bins {
                    let f = k as f64 * bin_hz;
                    let v = if f > l && f <= c {
                        (f - l) / (c - l)
                    } else if f > c && f < r {
                        (r - f) / (r - c)
                    } else {
                        0.0
                    };
                    if v > 0.0 {
                        start.get_or_insert(k);
                        w.push(v);
                    } else if start.is_some() {
                        break;
                    }
                }
                (start.unwrap_or(0), w)
            })
            .collect();
        Self { filters }
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (o, (start, w)) in out.iter_mut().zip(&self.filters) {
            *o = w.iter().zip(&power[*start..]).map(|(a, b)| a * b).sum();
        }
    }
}

/// Windowed power-spectrum framer.
pub(crate) struct Framer {
    pub frame_len: usize,
    pub shift: usize,
    pub n_fft: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Framer {
    pub fn new(frame_len: usize, shift: usize, n_fft: usize) -> Self {
        let n = frame_len as f64 - 1.0;
        let window = (0..frame_len)
            .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / n).cos())
            .collect();
        Self {
            frame_len,
            shift,
            n_fft,
            window,
            fft: FftPlanner::new().plan_fft_forward(n_fft),
        }
    }

    pub fn num_frames(&self, len: usize) -> usize {
        if len < self.frame_len {
            0
        } else {
            1 + (len - self.frame_len) / self.shift
        }
    }

    /// Power spectrum `|X_k|^2` of frame `t`, `k = 0..=n_fft/2`.
    pub fn power(&self, pcm: &[f64], t: usize, buf: &mut Vec<Complex<f64>>, out: &mut [f64]) {
        buf.clear();
        let frame = &pcm[t * self.shift..t * self.shift + self.frame_len];
        buf.extend(frame.iter().zip(&self.window).map(|(x, w)| Complex::new(x * w, 0.0)));
        buf.resize(self.n_fft, Complex::new(0.0, 0.0));
        self.fft.process(buf);
        for (o, c) in out.iter_mut().zip(buf.iter()) {
            *o = c.norm_sqr();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_scale_round_trips() {
        for f in [0.0, 20.0, 440.0, 1000.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
        }
        assert!((hz_to_mel(1000.0) - 1000.0).abs() < 0.1);
    }

    #[test]
    fn centres_are_increasing_within_range() {
        let c = mel_center_frequencies(64, 20.0, 8000.0);
        assert_eq!(c.len(), 64);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        assert!(c[0] > 20.0 && c[63] < 8000.0);
    }
}
