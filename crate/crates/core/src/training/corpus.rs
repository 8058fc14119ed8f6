//! Deterministic source-filter speech-like corpus.
//!
//! Each speaker has a fixed fundamental frequency and vocal-tract formants.
//! An utterance is a sequence of voiced syllables separated by pauses; the
//! syllable vowel shifts the formants by a factor shared across speakers, so
//! content varies while the speaker cues stay put.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::CorpusConfig;
use crate::error::{Error, Result};
use crate::par::*;

/// Vowel-dependent formant multipliers.
const VOWELS: [[f64; 3]; 5] = [
    [1.00, 1.00, 1.00],
    [0.80, 1.25, 1.05],
    [1.20, 0.85, 0.97],
    [0.70, 0.75, 1.02],
    [1.10, 1.15, 0.95],
];

/// Background noise standard deviation.
const NOISE_STD: f64 = 0.0005;

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerRecipe {
    pub f0_hz: f64,
    /// `(centre, bandwidth)` in Hz.
    pub formants: Vec<(f64, f64)>,
    /// Relative standard deviation of the pitch period.
    pub jitter: f64,
    /// One-pole glottal low-pass coefficient in `[0, 1)`.
    pub tilt: f64,
}

impl SpeakerRecipe {
    /// Recipe for speaker `index` of `count`: pitch spread log-uniformly over 90–260 Hz.
    pub fn generate(index: usize, count: usize, rng: &mut impl Rng) -> Self {
        let pos = if count > 1 { index as f64 / (count - 1) as f64 } else { 0.5 };
        let f0 = 90.0 * (260.0f64 / 90.0).powf(pos) * rng.random_range(0.98..1.02);
        let f1 = rng.random_range(350.0..850.0);
        let f2 = rng.random_range(1000.0..2300.0);
        let f3 = rng.random_range(2400.0..3400.0);
        Self {
            f0_hz: f0,
            formants: vec![(f1, 80.0), (f2, 110.0), (f3, 160.0)],
            jitter: rng.random_range(0.005..0.02),
            tilt: rng.random_range(0.6..0.85),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: usize,
    pub samples: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub sample_rate: u32,
    pub recipes: Vec<SpeakerRecipe>,
    pub utterances: Vec<Utterance>,
}

fn stream(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a.wrapping_mul(1_000_003).wrapping_add(b));
    rng
}

/// Two-pole resonator normalized to unit gain at its centre frequency.
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bw: f64, sr: f64) -> Self {
        let r = (-std::f64::consts::PI * bw / sr).exp();
        let theta = 2.0 * std::f64::consts::PI * freq / sr;
        Self {
            a1: 2.0 * r * theta.cos(),
            a2: -r * r,
            gain: (1.0 - r) * (1.0 - 2.0 * r * (2.0 * theta).cos() + r * r).sqrt(),
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// One utterance of `duration_s` seconds for `recipe`, driven by `rng`.
pub fn synthesize(recipe: &SpeakerRecipe, duration_s: f64, sample_rate: u32, rng: &mut impl Rng) -> Vec<f64> {
    let sr = sample_rate as f64;
    let n = (duration_s * sr).round() as usize;
    let mut out = vec![0.0; n];
    let period_noise = Normal::new(0.0, recipe.jitter.max(1e-9)).expect("finite std");
    let mut pos = rng.random_range(0..(0.15 * sr) as usize + 1);
    while pos < n {
        let syl = ((rng.random_range(0.15..0.40)) * sr) as usize;
        let end = (pos + syl).min(n);
        let vowel = VOWELS[rng.random_range(0..VOWELS.len())];
        let mut res: Vec<Resonator> = recipe
            .formants
            .iter()
            .zip(vowel)
            .map(|(&(f, bw), k)| Resonator::new((f * k).min(0.45 * sr), bw, sr))
            .collect();
        let contour = rng.random_range(-0.06..0.06);
        let amp = rng.random_range(0.6..1.0);
        let mut next_pulse = pos as f64;
        let mut glottal = 0.0;
        for (i, o) in out[pos..end].iter_mut().enumerate() {
            let t = pos + i;
            let mut src = 0.0;
            if t as f64 >= next_pulse {
                src = 1.0;
                let prog = i as f64 / (end - pos) as f64;
                let f0 = recipe.f0_hz * (1.0 + contour * (prog - 0.5));
                next_pulse += sr / f0 * (1.0 + period_noise.sample(rng)).max(0.5);
            }
            glottal = recipe.tilt * glottal + (1.0 - recipe.tilt) * src;
            let mut y = glottal;
            for r in &mut res {
                y = r.step(y);
            }
            let frac = i as f64 / (end - pos) as f64;
            let env = (std::f64::consts::PI * frac).sin().powf(0.5);
            *o = amp * env * y;
        }
        pos = end + ((rng.random_range(0.05..0.30)) * sr) as usize;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { 0.5 / peak } else { 0.0 };
    let noise = Normal::new(0.0, NOISE_STD).expect("finite std");
    for v in &mut out {
        *v = *v * scale + noise.sample(rng);
    }
    out
}

/// Generate `num_speakers x utts_per_speaker` utterances.
///
/// Every speaker and utterance draws from its own seeded stream, so the
/// result is independent of thread count and bit-identical across runs.
pub fn gen_synthetic_corpus(cfg: &CorpusConfig) -> Result<SyntheticCorpus> {
    if cfg.num_speakers < 2 {
        return Err(Error::Config("corpus.num_speakers must be at least 2".into()));
    }
    if !(cfg.min_duration_s > 0.0 && cfg.min_duration_s <= cfg.max_duration_s) {
        return Err(Error::Config("corpus durations must satisfy 0 < min <= max".into()));
    }
    let recipes: Vec<SpeakerRecipe> = (0..cfg.num_speakers)
        .map(|s| SpeakerRecipe::generate(s, cfg.num_speakers, &mut stream(cfg.seed, s as u64, u64::MAX)))
        .collect();
    let jobs: Vec<(usize, usize)> = (0..cfg.num_speakers)
        .flat_map(|s| (0..cfg.utts_per_speaker).map(move |u| (s, u)))
        .collect();
    let utterances = jobs
        .par_iter()
        .map(|&(s, u)| {
            let mut rng = stream(cfg.seed, s as u64, u as u64);
            let dur = rng.random_range(cfg.min_duration_s..=cfg.max_duration_s);
            Utterance {
                id: format!("spk{s:03}/utt{u:03}"),
                speaker: s,
                samples: synthesize(&recipes[s], dur, cfg.sample_rate, &mut rng),
            }
        })
        .collect();
    Ok(SyntheticCorpus {
        sample_rate: cfg.sample_rate,
        recipes,
        utterances,
    })
}
