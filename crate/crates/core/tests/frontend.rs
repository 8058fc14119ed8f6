mod common;

use common::*;
use fpm_sv::config::{Duration, FrontendConfig};
use fpm_sv::frontend::*;
use proptest::prelude::*;

fn sine(freq: f64, seconds: f64) -> Vec<f64> {
    let n = (seconds * 16000.0) as usize;
    (0..n).map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin()).collect()
}

fn feats(n_mels: usize, t: usize, seed: u64) -> AcousticFeatures {
    AcousticFeatures::new(n_mels, t, randn(&[n_mels * t], seed).into_data()).unwrap()
}

#[test]
fn three_seconds_give_298_frames_of_64_bins() {
    let f = compute_logmel(&sine(300.0, 3.0), 16000, &FrontendConfig::default()).unwrap();
    assert_eq!((f.n_mels, f.n_frames), (64, 298));
    assert!(f.mels.iter().all(|v| v.is_finite()));
}

#[test]
fn silence_sits_on_the_log_floor() {
    let cfg = FrontendConfig::default();
    let f = compute_logmel(&vec![0.0; 8000], 16000, &cfg).unwrap();
    let floor = cfg.log_floor.ln();
    assert!(f.mels.iter().all(|&v| v == floor));
}

#[test]
fn a_440_hz_tone_peaks_in_the_nearest_mel_bin() {
    let f = compute_logmel(&sine(440.0, 1.0), 16000, &FrontendConfig::default()).unwrap();
    let centres = mel_center_frequencies(64, 20.0, 8000.0);
    let nearest = (0..64)
        .min_by(|&a, &b| (centres[a] - 440.0).abs().total_cmp(&(centres[b] - 440.0).abs()))
        .unwrap();
    for t in 0..f.n_frames {
        let arg = (0..64).max_by(|&a, &b| f.at(a, t).total_cmp(&f.at(b, t))).unwrap();
        assert_eq!(arg, nearest, "frame {t}");
    }
}

#[test]
fn one_frame_shift_shifts_the_columns() {
    let cfg = FrontendConfig::default();
    let x: Vec<f64> = randn(&[16000], 3).data().iter().map(|v| 0.1 * v).collect();
    let a = compute_logmel(&x, 16000, &cfg).unwrap();
    let b = compute_logmel(&x[160..], 16000, &cfg).unwrap();
    assert_eq!(b.n_frames, a.n_frames - 1);
    for bin in 0..64 {
        for t in 0..b.n_frames {
            assert!((a.at(bin, t + 1) - b.at(bin, t)).abs() < 1e-8);
        }
    }
}

#[test]
fn too_short_or_slow_input_is_rejected() {
    let cfg = FrontendConfig::default();
    assert!(compute_logmel(&[0.0; 100], 16000, &cfg).is_err());
    assert!(compute_logmel(&[0.0; 1000], 4000, &cfg).is_err());
}

fn naive_normalize(f: &AcousticFeatures, window: usize) -> Vec<f64> {
    let n = f.n_frames;
    let w = window.min(n);
    let mut out = vec![0.0; f.mels.len()];
    for bin in 0..f.n_mels {
        for t in 0..n {
            let start = (t as isize - (w / 2) as isize).clamp(0, (n - w) as isize) as usize;
            let mean: f64 = (start..start + w).map(|s| f.at(bin, s)).sum::<f64>() / w as f64;
            out[bin * n + t] = f.at(bin, t) - mean;
        }
    }
    out
}

#[test]
fn sliding_normalization_matches_the_naive_window() {
    let f = feats(64, 500, 9);
    let got = mean_normalize_sliding(&f, 300);
    for (a, b) in got.mels.iter().zip(naive_normalize(&f, 300)) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn short_utterances_subtract_the_global_mean() {
    let f = feats(4, 120, 2);
    let got = mean_normalize_sliding(&f, 300);
    for bin in 0..4 {
        let mean: f64 = (0..120).map(|t| f.at(bin, t)).sum::<f64>() / 120.0;
        for t in 0..120 {
            assert!((got.at(bin, t) - (f.at(bin, t) - mean)).abs() < 1e-12);
        }
    }
}

#[test]
fn constant_features_normalize_to_zero() {
    let f = AcousticFeatures::new(3, 400, vec![2.5; 1200]).unwrap();
    assert!(mean_normalize_sliding(&f, 300).mels.iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn utterances_within_one_window_have_zero_bin_means() {
    let f = feats(3, 250, 5);
    let g = mean_normalize_sliding(&f, 300);
    for bin in 0..3 {
        let m: f64 = (0..250).map(|t| g.at(bin, t)).sum::<f64>() / 250.0;
        assert!(m.abs() < 1e-8, "{m}");
    }
}

/// Frames whose energy is loud (speech) or far below it (silence), by mask.
fn scripted(mask: &[bool]) -> AcousticFeatures {
    let t = mask.len();
    let mut mels = vec![0.0; 4 * t];
    for (i, &m) in mask.iter().enumerate() {
        for b in 0..4 {
            mels[b * t + i] = if m { 5.0 + b as f64 + i as f64 * 1e-3 } else { -20.0 };
        }
    }
    AcousticFeatures::new(4, t, mels).unwrap()
}

#[test]
fn vad_keeps_the_first_second_of_150_speech_frames() {
    let cfg = FrontendConfig::default();
    let f = scripted(&vec![true; 150]);
    let out = energy_vad_trim(&f, Duration::Seconds(1), &cfg);
    assert_eq!(out.n_frames, 100);
    assert_eq!(out.mels[..100], f.mels[..100]);
}

#[test]
fn vad_returns_all_80_frames_when_short() {
    let f = scripted(&vec![true; 80]);
    assert_eq!(energy_vad_trim(&f, Duration::Seconds(2), &FrontendConfig::default()), f);
}

#[test]
fn vad_selects_exactly_the_scripted_speech_frames() {
    let cfg = FrontendConfig::default();
    let mask: Vec<bool> = (0..300).map(|i| i % 2 == 0).collect();
    let f = scripted(&mask);
    assert_eq!(energy_vad(&f, &cfg), mask);
    let out = energy_vad_trim(&f, Duration::Seconds(1), &cfg);
    let expect: Vec<usize> = (0..200).step_by(2).collect();
    assert_eq!(out, f.select(&expect));
}

#[test]
fn full_duration_is_untouched() {
    let f = scripted(&[true, false, true, true, false, false, true, true, true, true]);
    assert_eq!(energy_vad_trim(&f, Duration::Full, &FrontendConfig::default()), f);
}

#[test]
fn test_pipeline_selects_from_whole_utterance_normalization() {
    let cfg = FrontendConfig::default();
    let mask: Vec<bool> = (0..400).map(|i| i % 4 != 0).collect();
    let raw = scripted(&mask);
    let norm = mean_normalize_sliding(&raw, cfg.norm_window_frames);
    let out = test_features(&raw, Duration::Seconds(2), &cfg);
    let idx: Vec<usize> = (0..400).filter(|i| i % 4 != 0).take(200).collect();
    assert_eq!(out, norm.select(&idx));
    assert_eq!(test_features(&raw, Duration::Full, &cfg), norm);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn vad_never_grows_or_reorders(mask in prop::collection::vec(any::<bool>(), 1..500), secs in 1u32..6) {
        let f = scripted(&mask);
        let out = energy_vad_trim(&f, Duration::Seconds(secs), &FrontendConfig::default());
        if mask.iter().any(|m| *m) {
            prop_assert!(out.n_frames <= secs as usize * 100);
            // Energies rise with the frame index, so order is visible in bin 0.
            let row = &out.mels[..out.n_frames];
            prop_assert!(row.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn normalization_matches_the_naive_window(t in 1usize..700, w in 1usize..400, seed in 0u64..1000) {
        let f = feats(2, t, seed);
        let got = mean_normalize_sliding(&f, w);
        for (a, b) in got.mels.iter().zip(naive_normalize(&f, w)) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn feature_and_wave_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let f = feats(64, 37, 4);
    let p = dir.path().join("x.lmfb");
    write_lmfb(&p, &f).unwrap();
    let back = read_lmfb(&p).unwrap();
    assert_eq!(back.n_frames, f.n_frames);
    for (a, b) in back.mels.iter().zip(&f.mels) {
        assert_eq!(*a as f32, *b as f32);
    }

    let wav = dir.path().join("x.wav");
    let x = sine(200.0, 0.1);
    write_wav(&wav, &x, 16000).unwrap();
    let (y, sr) = read_wav(&wav).unwrap();
    assert_eq!((sr, y.len()), (16000, x.len()));
    assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 2.0 / 32767.0));
    std::fs::write(dir.path().join("bad.lmfb"), b"nope").unwrap();
    assert!(read_lmfb(&dir.path().join("bad.lmfb")).is_err());
}
