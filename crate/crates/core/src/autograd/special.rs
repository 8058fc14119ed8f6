//! Fused ops with hand-derived backward passes: dictionary encoding and the
//! classification objectives.

use super::reduce::softmax_in_place;
use super::{BackwardArgs, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor on the soft-assignment mass of a codeword.
pub const LDE_MASS_EPS: f64 = 1e-8;

/// Chebyshev polynomials `T_m(c)` and `U_{m-1}(c)`.
fn chebyshev(m: u32, c: f64) -> (f64, f64) {
    let (mut t_prev, mut t) = (1.0, c);
    let (mut u_prev, mut u) = (0.0, 1.0);
    for _ in 1..m {
        (t_prev, t) = (t, 2.0 * c * t - t_prev);
        (u_prev, u) = (u, 2.0 * c * u - u_prev);
    }
    if m == 0 {
        return (1.0, 0.0);
    }
    (t, u)
}

/// Angular margin function `psi(theta) = (-1)^k cos(m theta) - 2k` as a
/// function of `c = cos(theta)`, with its derivative `d psi / d c`.
pub fn margin_psi(m: u32, c: f64) -> (f64, f64) {
    let c = c.clamp(-1.0, 1.0);
    let theta = c.acos();
    let k = ((m as f64 * theta / std::f64::consts::PI).floor() as u32).min(m.saturating_sub(1));
    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
    let (t, u) = chebyshev(m, c);
    (sign * t - 2.0 * k as f64, sign * m as f64 * u)
}

impl Tape {
    /// Soft-assignment residual encoding of frames `x [B, D, T]` against a
    /// codebook `[K, D]` with per-codeword smoothing `scales [K]`.
    ///
    /// `w_tk = softmax_k(-s_k |x_t - mu_k|^2)`, `e_k = sum_t w_tk (x_t - mu_k) / sum_t w_tk`,
    /// output `[B, K*D]` laid out codeword-major.
    pub fn lde(&mut self, x: Var, codebook: Var, scales: Var) -> Result<Var> {
        let [b, d, t] = self.value(x).dims3("lde")?;
        let [k, cd] = self.value(codebook).dims2("lde codebook")?;
        if cd != d {
            return Err(Error::shape("lde", format!("frames have dim {d}, codebook {cd}")));
        }
        if self.shape(scales) != [k] {
            return Err(Error::shape("lde", format!("scales must be [{k}]")));
        }
        let fwd = lde_forward(self.value(x).data(), self.value(codebook).data(), self.value(scales).data(), b, d, t, k);
        let value = Tensor::new(&[b, k * d], fwd.out.clone())?;
        self.push_op(
            "lde",
            value,
            &[x, codebook, scales],
            Box::new(move |a: &BackwardArgs<'_>| {
                let xd = a.inputs[0].data();
                let mu = a.inputs[1].data();
                let s = a.inputs[2].data();
                let gd = a.grad.data();
                let mut dx = vec![0.0; b * d * t];
                let mut dmu = vec![0.0; k * d];
                let mut ds = vec![0.0; k];
                let mut r = vec![0.0; d];
                let mut coef = vec![0.0; k];
                for bi in 0..b {
                    let w = &fwd.weights[bi * t * k..(bi + 1) * t * k];
                    let mass = &fwd.mass[bi * k..(bi + 1) * k];
                    let e = &fwd.out[bi * k * d..(bi + 1) * k * d];
                    let g = &gd[bi * k * d..(bi + 1) * k * d];
                    for ti in 0..t {
                        // a_k = G_k . (r_k - e_k) / W_k, then softmax backward.
                        for kk in 0..k {
                            let acc: f64 = (0..d)
                                .map(|j| {
                                    let rv = xd[(bi * d + j) * t + ti] - mu[kk * d + j];
                                    g[kk * d + j] * (rv - e[kk * d + j])
                                })
                                .sum();
                            coef[kk] = if mass[kk] > LDE_MASS_EPS {
                                acc / mass[kk]
                            } else {
                                (0..d)
                                    .map(|j| g[kk * d + j] * (xd[(bi * d + j) * t + ti] - mu[kk * d + j]))
                                    .sum::<f64>()
                                    / LDE_MASS_EPS
                            };
                        }
                        let wt = &w[ti * k..(ti + 1) * k];
                        let mean_a: f64 = wt.iter().zip(&coef).map(|(p, q)| p * q).sum();
                        for kk in 0..k {
                            let bq = wt[kk] * (coef[kk] - mean_a);
                            let denom = mass[kk].max(LDE_MASS_EPS);
                            let mut r2 = 0.0;
                            for (j, rj) in r.iter_mut().enumerate() {
                                *rj = xd[(bi * d + j) * t + ti] - mu[kk * d + j];
                                r2 += *rj * *rj;
                            }
                            ds[kk] -= bq * r2;
                            for j in 0..d {
                                let dr = wt[kk] * g[kk * d + j] / denom - 2.0 * s[kk] * bq * r[j];
                                dx[(bi * d + j) * t + ti] += dr;
                                dmu[kk * d + j] -= dr;
                            }
                        }
                    }
                }
                vec![
                    a.needs[0].then(|| Tensor::new(&[b, d, t], dx).expect("lde dx")),
                    a.needs[1].then(|| Tensor::new(&[k, d], dmu).expect("lde dmu")),
                    a.needs[2].then(|| Tensor::new(&[k], ds).expect("lde ds")),
                ]
            }),
        )
    }

    /// Mean cross-entropy of `logits [B, S]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [b, s] = self.value(logits).dims2("softmax_cross_entropy")?;
        if labels.len() != b {
            return Err(Error::shape("softmax_cross_entropy", format!("{} labels for batch {b}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {s} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(s).zip(labels) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            softmax_in_place(row);
        }
        loss /= b as f64;
        let labels = labels.to_vec();
        self.push_op(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            &[logits],
            Box::new(move |a: &BackwardArgs<'_>| {
                let g = a.grad.data()[0] / b as f64;
                let mut d = probs.clone();
                for (row, &y) in d.chunks_mut(s).zip(&labels) {
                    row[y] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= g;
                    }
                }
                vec![Some(Tensor::new(&[b, s], d).expect("ce grad"))]
            }),
        )
    }

    /// A-softmax logits. `w_hat [S, D]` must already have unit rows.
    ///
    /// Non-target logits are `w_j . x`; the target logit is
    /// `(blend * w_y . x + |x| psi(theta_y)) / (1 + blend)`.
    pub fn angular_margin_logits(
        &mut self,
        x: Var,
        w_hat: Var,
        labels: &[usize],
        margin: u32,
        blend: f64,
    ) -> Result<Var> {
        let [b, d] = self.value(x).dims2("a_softmax")?;
        let [s, wd] = self.value(w_hat).dims2("a_softmax weight")?;
        if wd != d {
            return Err(Error::shape("a_softmax", format!("embedding dim {d}, weight dim {wd}")));
        }
        if labels.len() != b {
            return Err(Error::shape("a_softmax", "label count"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= s) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {s} classes")));
        }
        if margin == 0 {
            return Err(Error::InvalidArgument("angular margin must be >= 1".into()));
        }
        let xd = self.value(x).data();
        let wv = self.value(w_hat).data();
        let mut logits = vec![0.0; b * s];
        // (norm, cos, psi, dpsi) per sample
        let mut geo = Vec::with_capacity(b);
        for bi in 0..b {
            let xb = &xd[bi * d..(bi + 1) * d];
            let n = xb.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < 1e-12 {
                return Err(Error::InvalidArgument("zero-norm embedding in A-softmax".into()));
            }
            for j in 0..s {
                logits[bi * s + j] = xb.iter().zip(&wv[j * d..(j + 1) * d]).map(|(p, q)| p * q).sum();
            }
            let y = labels[bi];
            let dot = logits[bi * s + y];
            let c = dot / n;
            let (psi, dpsi) = margin_psi(margin, c);
            logits[bi * s + y] = (blend * dot + n * psi) / (1.0 + blend);
            geo.push((n, c, psi, dpsi));
        }
        let value = Tensor::new(&[b, s], logits)?;
        let labels = labels.to_vec();
        self.push_op(
            "a_softmax",
            value,
            &[x, w_hat],
            Box::new(move |a: &BackwardArgs<'_>| {
                let xd = a.inputs[0].data();
                let wv = a.inputs[1].data();
                let gd = a.grad.data();
                let mut dx = vec![0.0; b * d];
                let mut dw = vec![0.0; s * d];
                for bi in 0..b {
                    let y = labels[bi];
                    let (n, c, psi, dpsi) = geo[bi];
                    let xb = &xd[bi * d..(bi + 1) * d];
                    for j in 0..s {
                        let g = gd[bi * s + j];
                        let wj = &wv[j * d..(j + 1) * d];
                        if j == y {
                            let k = 1.0 / (1.0 + blend);
                            for q in 0..d {
                                let gx = blend * wj[q] + psi * xb[q] / n + dpsi * (wj[q] - c * xb[q] / n);
                                dx[bi * d + q] += g * k * gx;
                                dw[j * d + q] += g * k * (blend + dpsi) * xb[q];
                            }
                        } else {
                            for q in 0..d {
                                dx[bi * d + q] += g * wj[q];
                                dw[j * d + q] += g * xb[q];
                            }
                        }
                    }
                }
                vec![
                    a.needs[0].then(|| Tensor::new(&[b, d], dx).expect("asm dx")),
                    a.needs[1].then(|| Tensor::new(&[s, d], dw).expect("asm dw")),
                ]
            }),
        )
    }

    /// `weight / 2 * mean_b (|x_b| - radius)^2` with `radius [1]`.
    pub fn ring_loss(&mut self, x: Var, radius: Var, weight: f64) -> Result<Var> {
        let [b, d] = self.value(x).dims2("ring_loss")?;
        if self.shape(radius) != [1] {
            return Err(Error::shape("ring_loss", "radius must be [1]"));
        }
        let r = self.scalar(radius);
        let norms: Vec<f64> = self
            .value(x)
            .data()
            .chunks(d)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let loss = weight / 2.0 * norms.iter().map(|n| (n - r) * (n - r)).sum::<f64>() / b as f64;
        self.push_op(
            "ring_loss",
            Tensor::scalar(loss),
            &[x, radius],
            Box::new(move |a: &BackwardArgs<'_>| {
                let g = a.grad.data()[0] * weight / b as f64;
                let xd = a.inputs[0].data();
                let dx = a.needs[0].then(|| {
                    let mut dx = vec![0.0; b * d];
                    for bi in 0..b {
                        let n = norms[bi];
                        if n > 0.0 {
                            let k = g * (n - r) / n;
                            for q in 0..d {
                                dx[bi * d + q] = k * xd[bi * d + q];
                            }
                        }
                    }
                    Tensor::new(&[b, d], dx).expect("ring dx")
                });
                let dr = a.needs[1].then(|| {
                    Tensor::scalar(-g * norms.iter().map(|n| n - r).sum::<f64>())
                });
                vec![dx, dr]
            }),
        )
    }
}

struct LdeForward {
    out: Vec<f64>,
    /// `[B, T, K]` soft assignments.
    weights: Vec<f64>,
    /// `[B, K]` assignment mass per codeword.
    mass: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn lde_forward(x: &[f64], mu: &[f64], s: &[f64], b: usize, d: usize, t: usize, k: usize) -> LdeForward {
    let mut out = vec![0.0; b * k * d];
    let mut weights = vec![0.0; b * t * k];
    let mut mass = vec![0.0; b * k];
    for bi in 0..b {
        for ti in 0..t {
            let logits = &mut weights[(bi * t + ti) * k..(bi * t + ti + 1) * k];
            for kk in 0..k {
                let r2: f64 = (0..d)
                    .map(|j| {
                        let r = x[(bi * d + j) * t + ti] - mu[kk * d + j];
                        r * r
                    })
                    .sum();
                logits[kk] = -s[kk] * r2;
            }
            softmax_in_place(logits);
            for kk in 0..k {
                let w = logits[kk];
                mass[bi * k + kk] += w;
                for j in 0..d {
                    out[(bi * k + kk) * d + j] += w * (x[(bi * d + j) * t + ti] - mu[kk * d + j]);
                }
            }
        }
        for kk in 0..k {
            let m = mass[bi * k + kk].max(LDE_MASS_EPS);
            for j in 0..d {
                out[(bi * k + kk) * d + j] /= m;
            }
        }
    }
    LdeForward { out, weights, mass }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psi_is_one_at_zero_angle_for_every_margin() {
        for m in 1..=4 {
            assert!((margin_psi(m, 1.0).0 - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn psi_is_continuous_and_decreasing_in_angle() {
        for m in 1..=4 {
            let mut prev = f64::INFINITY;
            for i in 0..=2000 {
                let theta = std::f64::consts::PI * i as f64 / 2000.0;
                let (psi, _) = margin_psi(m, theta.cos());
                assert!(psi <= prev + 1e-9, "m={m} theta={theta}");
                prev = psi;
            }
            assert!((margin_psi(m, -1.0).0 - (-(2.0 * m as f64) + 1.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn psi_derivative_matches_finite_difference() {
        for m in 1..=4 {
            for &c in &[0.93, 0.4, -0.1, -0.77] {
                let h = 1e-6;
                let fd = (margin_psi(m, c + h).0 - margin_psi(m, c - h).0) / (2.0 * h);
                assert!((fd - margin_psi(m, c).1).abs() < 1e-5, "m={m} c={c}");
            }
        }
    }

    #[test]
    fn two_tied_classes_cost_ln2() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::new(&[1, 2], vec![0.3, 0.3]).unwrap(), false);
        let l = tape.softmax_cross_entropy(z, &[1]).unwrap();
        assert!((tape.scalar(l) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(&[1, 2]), false);
        assert!(tape.softmax_cross_entropy(z, &[2]).is_err());
    }

    #[test]
    fn ring_loss_hand_value() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 2], vec![3.0, 0.0]).unwrap(), true);
        let r = tape.leaf(Tensor::scalar(1.0), true);
        let l = tape.ring_loss(x, r, 0.01).unwrap();
        assert!((tape.scalar(l) - 0.02).abs() < 1e-15);
        let g = tape.backward(l).unwrap();
        // lambda (1 - R/|x|) x
        let gx = g.get(x).unwrap().data();
        assert!((gx[0] - 0.01 * (1.0 - 1.0 / 3.0) * 3.0).abs() < 1e-15);
        assert_eq!(gx[1], 0.0);
    }

    #[test]
    fn zero_embedding_is_rejected_by_a_softmax() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2]), false);
        let w = tape.leaf(Tensor::new(&[2, 2], vec![1., 0., 0., 1.]).unwrap(), false);
        assert!(tape.angular_margin_logits(x, w, &[0], 4, 0.0).is_err());
    }
}
