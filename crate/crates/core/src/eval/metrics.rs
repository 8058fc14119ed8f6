//! Threshold-sweep verification metrics. A trial is accepted when `score >= threshold`.

use crate::error::{Error, Result};

/// One point of the sweep: accept scores `>= threshold`.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

fn counts(labels: &[bool]) -> Result<(usize, usize)> {
    let nt = labels.iter().filter(|&&l| l).count();
    let nn = labels.len() - nt;
    if nt == 0 || nn == 0 {
        return Err(Error::InvalidArgument(
            "metrics need at least one target and one nontarget trial".into(),
        ));
    }
    Ok((nt, nn))
}

/// Operating points from "reject all" (`+inf`) down through every distinct score.
pub fn operating_points(scores: &[f64], labels: &[bool]) -> Result<Vec<OperatingPoint>> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("trial scores"));
    }
    let (nt, nn) = counts(labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = Vec::with_capacity(scores.len() + 1);
    pts.push(OperatingPoint {
        threshold: f64::INFINITY,
        p_miss: 1.0,
        p_fa: 0.0,
    });
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push(OperatingPoint {
            threshold: s,
            p_miss: (nt - tp) as f64 / nt as f64,
            p_fa: fp as f64 / nn as f64,
        });
    }
    Ok(pts)
}

/// Equal error rate (fraction in `[0, 1]`) and its threshold from a sweep.
///
/// The crossing of miss and false-alarm rates is interpolated linearly between
/// the adjacent operating points that bracket it. When the rates are equal on
/// a run of consecutive points, the lowest threshold of the run is reported.
pub fn eer_from_points(pts: &[OperatingPoint]) -> (f64, f64) {
    let diff = |p: &OperatingPoint| p.p_miss - p.p_fa;
    let i = pts.iter().position(|p| diff(p) <= 0.0).expect("last point accepts all");
    if diff(&pts[i]) == 0.0 {
        let mut j = i;
        while j + 1 < pts.len() && diff(&pts[j + 1]) == 0.0 {
            j += 1;
        }
        return (pts[i].p_miss, pts[j].threshold);
    }
    let (a, b) = (&pts[i - 1], &pts[i]);
    let t = diff(a) / (diff(a) - diff(b));
    let eer = a.p_miss + t * (b.p_miss - a.p_miss);
    let thr = if a.threshold.is_finite() {
        a.threshold + t * (b.threshold - a.threshold)
    } else {
        b.threshold
    };
    (eer, thr)
}

/// EER as a fraction and the threshold where it occurs.
pub fn compute_eer(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    Ok(eer_from_points(&operating_points(scores, labels)?))
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfParams {
    /// Cost of the better of "accept all" and "reject all".
    pub fn default_cost(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }

    pub fn normalized_cost(&self, p_miss: f64, p_fa: f64) -> f64 {
        (self.c_miss * p_miss * self.p_target + self.c_fa * p_fa * (1.0 - self.p_target)) / self.default_cost()
    }
}

pub fn mindcf_from_points(pts: &[OperatingPoint], p: DcfParams) -> (f64, f64) {
    pts.iter()
        .map(|op| (p.normalized_cost(op.p_miss, op.p_fa), op.threshold))
        .fold((f64::INFINITY, f64::INFINITY), |best, c| if c.0 < best.0 { c } else { best })
}

/// Normalized minimum detection cost.
pub fn compute_mindcf(scores: &[f64], labels: &[bool], p: DcfParams) -> Result<f64> {
    if !(p.p_target > 0.0 && p.p_target < 1.0 && p.c_miss > 0.0 && p.c_fa > 0.0) {
        return Err(Error::InvalidArgument("DCF needs 0 < p_target < 1 and positive costs".into()));
    }
    Ok(mindcf_from_points(&operating_points(scores, labels)?, p).0)
}

/// Cosine similarity; errors on a zero-norm vector.
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument("embeddings differ in dimension".into()));
    }
    let (na, nb) = (a.iter().map(|v| v * v).sum::<f64>().sqrt(), b.iter().map(|v| v * v).sum::<f64>().sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("zero-norm embedding".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
