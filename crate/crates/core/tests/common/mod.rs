#![allow(dead_code)]

pub mod grads;

use fpm_sv::config::{AggregationMode, FpmVariant, ModelConfig, PoolingKind};
use fpm_sv::eval::OperatingPoint;
use fpm_sv::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// A narrow backbone that keeps every structural feature of the full model.
pub fn narrow(mode: AggregationMode, fpm: FpmVariant, pooling: PoolingKind) -> ModelConfig {
    ModelConfig {
        mode,
        fpm,
        pooling,
        num_speakers: 3,
        stage_channels: vec![4, 6, 8, 10],
        stage_blocks: vec![1, 1, 1, 1],
        pyramid_channels: 4,
        proj_channels: 6,
        lde_dim: 4,
        lde_codewords: 3,
        sap_hidden: 5,
        conv1_kernel: 3,
        ..ModelConfig::default()
    }
}

/// Per-threshold sweep over every distinct score, with no sorting tricks.
pub fn brute_force_points(scores: &[f64], labels: &[bool]) -> Vec<OperatingPoint> {
    let nt = labels.iter().filter(|l| **l).count() as f64;
    let nn = labels.len() as f64 - nt;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut out = vec![OperatingPoint {
        threshold: f64::INFINITY,
        p_miss: 1.0,
        p_fa: 0.0,
    }];
    for th in thresholds {
        let mut miss = 0usize;
        let mut fa = 0usize;
        for (s, l) in scores.iter().zip(labels) {
            let accept = *s >= th;
            if *l && !accept {
                miss += 1;
            }
            if !*l && accept {
                fa += 1;
            }
        }
        out.push(OperatingPoint {
            threshold: th,
            p_miss: miss as f64 / nt,
            p_fa: fa as f64 / nn,
        });
    }
    out
}

/// EER by linear interpolation at the first crossing of the brute-force curve.
pub fn brute_force_eer(scores: &[f64], labels: &[bool]) -> f64 {
    let pts = brute_force_points(scores, labels);
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let da = a.p_miss - a.p_fa;
        let db = b.p_miss - b.p_fa;
        if db <= 0.0 {
            if da == db {
                return a.p_miss;
            }
            let t = da / (da - db);
            return a.p_miss + t * (b.p_miss - a.p_miss);
        }
    }
    unreachable!("the last point accepts everything")
}

pub fn brute_force_mindcf(scores: &[f64], labels: &[bool], p_target: f64, c_miss: f64, c_fa: f64) -> f64 {
    let norm = (c_miss * p_target).min(c_fa * (1.0 - p_target));
    brute_force_points(scores, labels)
        .iter()
        .map(|p| (c_miss * p.p_miss * p_target + c_fa * p.p_fa * (1.0 - p_target)) / norm)
        .fold(f64::INFINITY, f64::min)
}
