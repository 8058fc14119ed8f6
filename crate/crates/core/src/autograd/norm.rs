use super::{BackwardArgs, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the estimator folded into running statistics.
    pub var_unbiased: Vec<f64>,
}

fn check_affine(op: &'static str, tape: &Tape, gamma: Var, beta: Var, c: usize) -> Result<()> {
    if tape.shape(gamma) != [c] || tape.shape(beta) != [c] {
        return Err(Error::shape(op, format!("gamma/beta must be [{c}]")));
    }
    Ok(())
}

/// Iterate `(channel, plane)` over a `[B, C, H, W]` buffer.
fn planes(d: &[f64], c: usize, plane: usize) -> impl Iterator<Item = (usize, &[f64])> {
    d.chunks(plane).enumerate().map(move |(i, p)| (i % c, p))
}

impl Tape {
    /// Normalize with batch statistics over `(B, H, W)` per channel.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let [b, c, h, w] = self.value(x).dims4("batch_norm")?;
        check_affine("batch_norm", self, gamma, beta, c)?;
        let plane = h * w;
        let count = (b * plane) as f64;
        let xd = self.value(x).data();
        let mut mean = vec![0.0; c];
        for (ch, p) in planes(xd, c, plane) {
            mean[ch] += p.iter().sum::<f64>();
        }
        for m in &mut mean {
            *m /= count;
        }
        let mut var = vec![0.0; c];
        for (ch, p) in planes(xd, c, plane) {
            let mu = mean[ch];
            var[ch] += p.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
        }
        let var_unbiased = var
            .iter()
            .map(|v| if count > 1.0 { v / (count - 1.0) } else { 0.0 })
            .collect();
        for v in &mut var {
            *v /= count;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = Vec::with_capacity(xd.len());
        for (ch, p) in planes(xd, c, plane) {
            let (mu, is, g, bb) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
            out.extend(p.iter().map(|v| g * (v - mu) * is + bb));
        }
        let value = Tensor::new(&[b, c, h, w], out)?;
        let stats = BatchStats {
            mean: mean.clone(),
            var_unbiased,
        };
        let var = self.push_op(
            "batch_norm",
            value,
            &[x, gamma, beta],
            Box::new(move |a: &BackwardArgs<'_>| {
                let xd = a.inputs[0].data();
                let gamma = a.inputs[1].data();
                let gd = a.grad.data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (i, (ch, p)) in planes(xd, c, plane).enumerate() {
                    let gp = &gd[i * plane..(i + 1) * plane];
                    let (mu, is) = (mean[ch], inv_std[ch]);
                    for (g, v) in gp.iter().zip(p) {
                        sum_g[ch] += g;
                        sum_gx[ch] += g * (v - mu) * is;
                    }
                }
                let dx = a.needs[0].then(|| {
                    let mut d = Vec::with_capacity(xd.len());
                    for (i, (ch, p)) in planes(xd, c, plane).enumerate() {
                        let gp = &gd[i * plane..(i + 1) * plane];
                        let (mu, is) = (mean[ch], inv_std[ch]);
                        let mg = sum_g[ch] / count;
                        let mgx = sum_gx[ch] / count;
                        let k = gamma[ch] * is;
                        d.extend(gp.iter().zip(p).map(|(g, v)| k * (g - mg - (v - mu) * is * mgx)));
                    }
                    Tensor::new(&[b, c, h, w], d).expect("bn dx")
                });
                vec![
                    dx,
                    a.needs[1].then(|| Tensor::new(&[c], sum_gx.clone()).expect("bn dgamma")),
                    a.needs[2].then(|| Tensor::new(&[c], sum_g.clone()).expect("bn dbeta")),
                ]
            }),
        )?;
        Ok((var, stats))
    }

    /// Normalize with fixed statistics: a per-channel affine map.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4("batch_norm")?;
        check_affine("batch_norm", self, gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm", "running statistics width"));
        }
        let plane = h * w;
        let mean = running_mean.to_vec();
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xd = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = Vec::with_capacity(xd.len());
        for (ch, p) in planes(xd, c, plane) {
            let (mu, is, g, bb) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
            out.extend(p.iter().map(|v| g * (v - mu) * is + bb));
        }
        let value = Tensor::new(&[b, c, h, w], out)?;
        self.push_op(
            "batch_norm",
            value,
            &[x, gamma, beta],
            Box::new(move |a: &BackwardArgs<'_>| {
                let xd = a.inputs[0].data();
                let gamma = a.inputs[1].data();
                let gd = a.grad.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = Vec::with_capacity(xd.len());
                for (i, (ch, p)) in planes(xd, c, plane).enumerate() {
                    let gp = &gd[i * plane..(i + 1) * plane];
                    let (mu, is) = (mean[ch], inv_std[ch]);
                    for (g, v) in gp.iter().zip(p) {
                        dgamma[ch] += g * (v - mu) * is;
                        dbeta[ch] += g;
                        dx.push(g * gamma[ch] * is);
                    }
                }
                vec![
                    a.needs[0].then(|| Tensor::new(&[b, c, h, w], dx).expect("bn dx")),
                    a.needs[1].then(|| Tensor::new(&[c], dgamma).expect("bn dgamma")),
                    a.needs[2].then(|| Tensor::new(&[c], dbeta).expect("bn dbeta")),
                ]
            }),
        )
    }

    /// Scale each row of `[N, D]` to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let [n, d] = self.value(x).dims2("l2_normalize_rows")?;
        let xd = self.value(x).data();
        let norms: Vec<f64> = xd
            .chunks(d)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12))
            .collect();
        let out: Vec<f64> = xd
            .chunks(d)
            .zip(&norms)
            .flat_map(|(r, nv)| r.iter().map(move |v| v / nv))
            .collect();
        let value = Tensor::new(&[n, d], out)?;
        self.push_op(
            "l2_normalize_rows",
            value,
            &[x],
            Box::new(move |a: &BackwardArgs<'_>| {
                let y = a.output.data();
                let gd = a.grad.data();
                let mut dx = Vec::with_capacity(n * d);
                for r in 0..n {
                    let ys = &y[r * d..(r + 1) * d];
                    let gs = &gd[r * d..(r + 1) * d];
                    let dot: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                    dx.extend(ys.iter().zip(gs).map(|(yv, gv)| (gv - yv * dot) / norms[r]));
                }
                vec![Some(Tensor::new(&[n, d], dx).expect("l2n grad"))]
            }),
        )
    }
}
