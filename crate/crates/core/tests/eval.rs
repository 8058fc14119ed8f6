mod common;

use common::*;
use fpm_sv::config::{Duration, EvalConfig, FrontendConfig, LossConfig};
use fpm_sv::eval::*;
use fpm_sv::frontend::AcousticFeatures;
use fpm_sv::model::{SpeakerEmbedding, SpeakerModel};
use proptest::prelude::*;
use std::collections::HashMap;

const HAND: ([f64; 3], [f64; 3]) = ([0.9, 0.8, 0.4], [0.6, 0.3, 0.2]);

fn hand_case() -> (Vec<f64>, Vec<bool>) {
    let mut s = HAND.0.to_vec();
    s.extend(HAND.1);
    (s, vec![true, true, true, false, false, false])
}

#[test]
fn hand_case_matches_frozen_values() {
    let (s, l) = hand_case();
    let (eer, _) = compute_eer(&s, &l).unwrap();
    assert!((eer - 1.0 / 3.0).abs() < 1e-12);
    let dcf = compute_mindcf(&s, &l, DcfParams::default()).unwrap();
    assert!((dcf - brute_force_mindcf(&s, &l, 0.01, 1.0, 1.0)).abs() < 1e-12);
    // Accepting only 0.9 and 0.8 costs 0.01 * 1/3 normalized by 0.01.
    assert!((dcf - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn separated_scores_cost_nothing() {
    let s = [0.9, 0.8, 0.7, 0.1, 0.0];
    let l = [true, true, true, false, false];
    assert_eq!(compute_eer(&s, &l).unwrap().0, 0.0);
    assert_eq!(compute_mindcf(&s, &l, DcfParams::default()).unwrap(), 0.0);
}

#[test]
fn symmetric_set_is_at_chance() {
    let s: Vec<f64> = (0..50).flat_map(|i| [i as f64, i as f64]).collect();
    let l: Vec<bool> = (0..50).flat_map(|_| [true, false]).collect();
    assert!((compute_eer(&s, &l).unwrap().0 - 0.5).abs() < 1e-12);
}

#[test]
fn mindcf_never_exceeds_the_dumb_policy() {
    let s = [0.1, 0.9, 0.5, 0.3];
    let l = [true, false, true, false];
    assert!(compute_mindcf(&s, &l, DcfParams::default()).unwrap() <= 1.0);
}

#[test]
fn degenerate_inputs_are_rejected() {
    assert!(compute_eer(&[0.1, 0.2], &[true, true]).is_err());
    assert!(compute_eer(&[0.1, f64::NAN], &[true, false]).is_err());
    assert!(compute_eer(&[0.1], &[true, false]).is_err());
    let bad = DcfParams { p_target: 1.0, ..DcfParams::default() };
    assert!(compute_mindcf(&[0.1, 0.2], &[true, false], bad).is_err());
}

fn scores_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..400)
        .prop_flat_map(|n| {
            (
                // Coarse grid so that ties between scores are frequent.
                prop::collection::vec((-40i32..40).prop_map(|v| v as f64 / 8.0), n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
        .prop_filter("both classes", |(_, l)| l.iter().any(|v| *v) && l.iter().any(|v| !*v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn eer_and_mindcf_match_the_brute_force_sweep((s, l) in scores_and_labels(), p in 0.001f64..0.5) {
        let eer = compute_eer(&s, &l).unwrap().0;
        prop_assert!((eer - brute_force_eer(&s, &l)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&eer));
        let params = DcfParams { p_target: p, c_miss: 1.0, c_fa: 1.0 };
        let dcf = compute_mindcf(&s, &l, params).unwrap();
        prop_assert!((dcf - brute_force_mindcf(&s, &l, p, 1.0, 1.0)).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&dcf));
    }

    #[test]
    fn metrics_ignore_positive_affine_maps((s, l) in scores_and_labels(), a in 0.5f64..4.0, b in -3.0f64..3.0) {
        // Powers of two keep the mapped scores exactly ordered and tied as before.
        let scale = a.log2().round().exp2();
        let t: Vec<f64> = s.iter().map(|v| v * scale + b.round()).collect();
        prop_assert!((compute_eer(&s, &l).unwrap().0 - compute_eer(&t, &l).unwrap().0).abs() < 1e-12);
        let p = DcfParams::default();
        prop_assert!((compute_mindcf(&s, &l, p).unwrap() - compute_mindcf(&t, &l, p).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn cosine_ignores_positive_rescaling(v in prop::collection::vec(-5.0f64..5.0, 8), w in prop::collection::vec(-5.0f64..5.0, 8), k in 0.01f64..100.0) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-3) && w.iter().any(|x| x.abs() > 1e-3));
        let c = cosine_score(&v, &w).unwrap();
        let scaled: Vec<f64> = v.iter().map(|x| x * k).collect();
        prop_assert!((c - cosine_score(&scaled, &w).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&c));
    }
}

#[test]
fn large_random_lists_match_the_oracle() {
    use rand::Rng;
    let mut r = rng(11);
    for n in [1000usize, 10_000] {
        let l: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
        let s: Vec<f64> = l.iter().map(|&t| r.random::<f64>() + if t { 0.4 } else { 0.0 }).collect();
        assert!((compute_eer(&s, &l).unwrap().0 - brute_force_eer(&s, &l)).abs() < 1e-12);
        let p = DcfParams::default();
        assert!((compute_mindcf(&s, &l, p).unwrap() - brute_force_mindcf(&s, &l, 0.01, 1.0, 1.0)).abs() < 1e-12);
    }
}

#[test]
fn cosine_of_special_pairs() {
    let e = [0.3, -1.2, 2.0];
    let neg: Vec<f64> = e.iter().map(|v| -v).collect();
    assert!((cosine_score(&e, &e).unwrap() - 1.0).abs() < 1e-15);
    assert!((cosine_score(&e, &neg).unwrap() + 1.0).abs() < 1e-15);
    assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
    assert!(cosine_score(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    assert!(cosine_score(&[1.0], &[1.0, 0.0]).is_err());
}

#[test]
fn trial_lists_round_trip() {
    let text = "1 spk000/utt001 spk000/utt002\n0 spk000/utt001 spk003/utt004\n";
    let trials = parse_trials(text).unwrap();
    assert_eq!(trials.len(), 2);
    assert!(trials[0].target && !trials[1].target);
    assert_eq!(parse_trials(&format_trials(&trials)).unwrap(), trials);
    assert!(parse_trials("2 a b\n").is_err());
    assert!(parse_trials("1 a\n").is_err());
}

#[test]
fn sampled_trials_are_balanced_and_reproducible() {
    let utts: Vec<(String, usize)> = (0..4).flat_map(|s| (0..5).map(move |u| (format!("s{s}/u{u}"), s))).collect();
    let a = sample_trials(&utts, 10, 12, 3).unwrap();
    assert_eq!(a, sample_trials(&utts, 10, 12, 3).unwrap());
    assert_eq!(a.iter().filter(|t| t.target).count(), 10);
    assert_eq!(a.len(), 22);
    for t in &a {
        assert_ne!(t.enroll, t.test);
        let spk = |id: &str| id[1..2].to_string();
        assert_eq!(t.target, spk(&t.enroll) == spk(&t.test));
    }
}

#[test]
fn embedding_file_round_trips() {
    let embs = vec![
        SpeakerEmbedding { id: "a/b".into(), vector: vec![0.5, -1.25, 3.0] },
        SpeakerEmbedding { id: "é".into(), vector: vec![0.0, 1.0, 2.0] },
    ];
    let bytes = spke::encode(&embs).unwrap();
    assert_eq!(&bytes[..4], b"SPKE");
    assert_eq!(spke::decode(&bytes).unwrap(), embs);
    assert!(spke::decode(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(spke::decode(&bad).is_err());
}

fn tiny_source(n: usize) -> HashMap<String, AcousticFeatures> {
    (0..n)
        .map(|i| {
            let t = 120 + 30 * i;
            let data = randn(&[64 * t], 100 + i as u64).into_data();
            (format!("u{i}"), AcousticFeatures::new(64, t, data).unwrap())
        })
        .collect()
}

#[test]
fn run_trials_is_deterministic_and_reports_every_condition() {
    use fpm_sv::config::{AggregationMode, FpmVariant, PoolingKind};
    let model = SpeakerModel::new(&narrow(AggregationMode::Msea, FpmVariant::Transposed, PoolingKind::Gap), &LossConfig::default()).unwrap();
    let src = tiny_source(4);
    let trials = vec![
        Trial { target: true, enroll: "u0".into(), test: "u1".into() },
        Trial { target: false, enroll: "u0".into(), test: "u2".into() },
        Trial { target: true, enroll: "u2".into(), test: "u3".into() },
        Trial { target: false, enroll: "u1".into(), test: "u3".into() },
        Trial { target: false, enroll: "u1".into(), test: "missing".into() },
    ];
    let cfg = EvalConfig::default();
    let fe = FrontendConfig::default();
    let a = run_trials(&model, &trials, &src, &fe, &cfg).unwrap();
    let b = run_trials(&model, &trials, &src, &fe, &cfg).unwrap();
    assert_eq!(a.results, b.results);
    assert_eq!(a.results.len(), 5);
    assert_eq!(a.results.last().unwrap().condition, Duration::Full);
    assert!(a.results.iter().all(|r| r.num_trials == 4));
    assert!(a.rejects.iter().any(|r| r.utterance == "missing"));

    let mut csv = Vec::new();
    write_results_csv(&mut csv, &a.results).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    assert!(csv.starts_with("condition,eer,min_dcf,num_trials\n"));
    assert_eq!(csv.lines().count(), 6);
    let table = results_table("msea+fpm-tc", &a.results);
    assert!(table.contains("msea+fpm-tc EER (%)") && table.contains("msea+fpm-tc minDCF"));
}
