use super::{BackwardArgs, Tape, Var};
use crate::error::{Error, Result};
use crate::gemm::gemm;
use crate::tensor::Tensor;

/// Added under the square root of every standard deviation.
pub const STD_EPS: f64 = 1e-10;

impl Tape {
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let out = Tensor::scalar(self.value(a).sum());
        self.push_op(
            "sum_all",
            out,
            &[a],
            Box::new(move |g: &BackwardArgs<'_>| vec![Some(Tensor::full(&shape, g.grad.data()[0]))]),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean over every axis after the first two: `[B, C, ...] -> [B, C]`.
    pub fn mean_spatial(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 3 {
            return Err(Error::shape("mean_spatial", format!("rank >= 3 required, got {shape:?}")));
        }
        let (b, c) = (shape[0], shape[1]);
        let n: usize = shape[2..].iter().product();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(n)
            .map(|p| p.iter().sum::<f64>() / n as f64)
            .collect();
        let value = Tensor::new(&[b, c], out)?;
        self.push_op(
            "mean_spatial",
            value,
            &[a],
            Box::new(move |g: &BackwardArgs<'_>| {
                let mut d = Vec::with_capacity(b * c * n);
                for &gv in g.grad.data() {
                    d.extend(std::iter::repeat_n(gv / n as f64, n));
                }
                vec![Some(Tensor::new(&shape, d).expect("mean grad"))]
            }),
        )
    }

    /// Biased standard deviation over every axis after the first two.
    pub fn std_spatial(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 3 {
            return Err(Error::shape("std_spatial", format!("rank >= 3 required, got {shape:?}")));
        }
        let (b, c) = (shape[0], shape[1]);
        let n: usize = shape[2..].iter().product();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(n)
            .map(|p| {
                let mu = p.iter().sum::<f64>() / n as f64;
                let var = p.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                (var + STD_EPS).sqrt()
            })
            .collect();
        let value = Tensor::new(&[b, c], out)?;
        self.push_op(
            "std_spatial",
            value,
            &[a],
            Box::new(move |g: &BackwardArgs<'_>| {
                let x = g.inputs[0].data();
                let mut d = Vec::with_capacity(x.len());
                for (i, p) in x.chunks(n).enumerate() {
                    let mu = p.iter().sum::<f64>() / n as f64;
                    let k = g.grad.data()[i] / (n as f64 * g.output.data()[i]);
                    d.extend(p.iter().map(|v| (v - mu) * k));
                }
                vec![Some(Tensor::new(&shape, d).expect("std grad"))]
            }),
        )
    }

    /// Mean over the frequency axis: `[B, C, F, T] -> [B, C, T]`.
    pub fn mean_freq(&mut self, a: Var) -> Result<Var> {
        let [b, c, f, t] = self.value(a).dims4("mean_freq")?;
        let x = self.value(a).data();
        let mut out = vec![0.0; b * c * t];
        for (bc, plane) in x.chunks(f * t).enumerate() {
            let o = &mut out[bc * t..(bc + 1) * t];
            for row in plane.chunks(t) {
                for (acc, v) in o.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            for v in o.iter_mut() {
                *v /= f as f64;
            }
        }
        let value = Tensor::new(&[b, c, t], out)?;
        self.push_op(
            "mean_freq",
            value,
            &[a],
            Box::new(move |g: &BackwardArgs<'_>| {
                let gd = g.grad.data();
                let mut d = Vec::with_capacity(b * c * f * t);
                for bc in 0..b * c {
                    let row = &gd[bc * t..(bc + 1) * t];
                    for _ in 0..f {
                        d.extend(row.iter().map(|v| v / f as f64));
                    }
                }
                vec![Some(Tensor::new(&[b, c, f, t], d).expect("mean_freq grad"))]
            }),
        )
    }

    /// Affine map `x [N, I] -> x w^T + b` with `w [O, I]`, `b [O]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let [n, i] = self.value(x).dims2("linear")?;
        let [o, wi] = self.value(w).dims2("linear weight")?;
        if wi != i {
            return Err(Error::shape("linear", format!("input width {i}, weight expects {wi}")));
        }
        let mut out = vec![0.0; n * o];
        gemm(n, i, o, self.value(x).data(), false, self.value(w).data(), true, 0.0, &mut out);
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != [o] {
                return Err(Error::shape("linear", format!("bias must be [{o}]")));
            }
            for row in out.chunks_mut(o) {
                for (v, bb) in row.iter_mut().zip(bv.data()) {
                    *v += bb;
                }
            }
        }
        let value = Tensor::new(&[n, o], out)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        self.push_op(
            "linear",
            value,
            &parents,
            Box::new(move |g: &BackwardArgs<'_>| {
                let gd = g.grad.data();
                let dx = g.needs[0].then(|| {
                    let mut d = vec![0.0; n * i];
                    gemm(n, o, i, gd, false, g.inputs[1].data(), false, 0.0, &mut d);
                    Tensor::new(&[n, i], d).expect("linear dx")
                });
                let dw = g.needs[1].then(|| {
                    let mut d = vec![0.0; o * i];
                    gemm(o, n, i, gd, true, g.inputs[0].data(), false, 0.0, &mut d);
                    Tensor::new(&[o, i], d).expect("linear dw")
                });
                let mut grads = vec![dx, dw];
                if g.inputs.len() == 3 {
                    grads.push(g.needs[2].then(|| {
                        let mut db = vec![0.0; o];
                        for row in gd.chunks(o) {
                            for (acc, v) in db.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        Tensor::new(&[o], db).expect("linear db")
                    }));
                }
                grads
            }),
        )
    }

    /// Softmax over the last axis of a rank-2 tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let [n, k] = self.value(a).dims2("softmax_rows")?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(k) {
            softmax_in_place(row);
        }
        let value = Tensor::new(&[n, k], out)?;
        self.push_op(
            "softmax_rows",
            value,
            &[a],
            Box::new(move |g: &BackwardArgs<'_>| {
                let y = g.output.data();
                let gd = g.grad.data();
                let mut d = vec![0.0; n * k];
                for r in 0..n {
                    let ys = &y[r * k..(r + 1) * k];
                    let gs = &gd[r * k..(r + 1) * k];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        d[r * k + j] = ys[j] * (gs[j] - dot);
                    }
                }
                vec![Some(Tensor::new(&[n, k], d).expect("softmax grad"))]
            }),
        )
    }

    /// `out[b, c] = sum_t alpha[b, t] * h[b, c, t]`.
    pub fn weighted_time_sum(&mut self, h: Var, alpha: Var) -> Result<Var> {
        let [b, c, t] = self.value(h).dims3("weighted_time_sum")?;
        if self.shape(alpha) != [b, t] {
            return Err(Error::shape(
                "weighted_time_sum",
                format!("weights {:?} do not match frames [{b}, {t}]", self.shape(alpha)),
            ));
        }
        let hv = self.value(h).data();
        let av = self.value(alpha).data();
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            let w = &av[bi * t..(bi + 1) * t];
            for ci in 0..c {
                let row = &hv[(bi * c + ci) * t..(bi * c + ci + 1) * t];
                out[bi * c + ci] = row.iter().zip(w).map(|(x, y)| x * y).sum();
            }
        }
        let value = Tensor::new(&[b, c], out)?;
        self.push_op(
            "weighted_time_sum",
            value,
            &[h, alpha],
            Box::new(move |g: &BackwardArgs<'_>| {
                let gd = g.grad.data();
                let hv = g.inputs[0].data();
                let av = g.inputs[1].data();
                let dh = g.needs[0].then(|| {
                    let mut d = vec![0.0; b * c * t];
                    for bi in 0..b {
                        for ci in 0..c {
                            let gv = gd[bi * c + ci];
                            for ti in 0..t {
                                d[(bi * c + ci) * t + ti] = gv * av[bi * t + ti];
                            }
                        }
                    }
                    Tensor::new(&[b, c, t], d).expect("dh")
                });
                let da = g.needs[1].then(|| {
                    let mut d = vec![0.0; b * t];
                    for bi in 0..b {
                        for ci in 0..c {
                            let gv = gd[bi * c + ci];
                            for ti in 0..t {
                                d[bi * t + ti] += gv * hv[(bi * c + ci) * t + ti];
                            }
                        }
                    }
                    Tensor::new(&[b, t], d).expect("dalpha")
                });
                vec![dh, da]
            }),
        )
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
