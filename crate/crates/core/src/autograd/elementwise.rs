use super::{BackwardArgs, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push_op(
            "add",
            out,
            &[a, b],
            Box::new(|g: &BackwardArgs<'_>| {
                vec![
                    g.needs[0].then(|| g.grad.clone()),
                    g.needs[1].then(|| g.grad.clone()),
                ]
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape(), data)?;
        self.push_op(
            "mul",
            out,
            &[a, b],
            Box::new(|g: &BackwardArgs<'_>| {
                let prod = |other: &Tensor| {
                    let d = g.grad.data().iter().zip(other.data()).map(|(x, y)| x * y).collect();
                    Tensor::new(g.grad.shape(), d).expect("mul grad")
                };
                vec![
                    g.needs[0].then(|| prod(g.inputs[1])),
                    g.needs[1].then(|| prod(g.inputs[0])),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        self.push_op(
            "scale",
            out,
            &[a],
            Box::new(move |g: &BackwardArgs<'_>| vec![Some(g.grad.map(|v| v * s))]),
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        let mask: Vec<bool> = self.value(a).data().iter().map(|&v| v > 0.0).collect();
        self.record_pattern(mask.iter().copied());
        self.push_op(
            "relu",
            out,
            &[a],
            Box::new(|g: &BackwardArgs<'_>| {
                let d = g
                    .grad
                    .data()
                    .iter()
                    .zip(g.inputs[0].data())
                    .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                vec![Some(Tensor::new(g.grad.shape(), d).expect("relu grad"))]
            }),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push_op(
            "tanh",
            out,
            &[a],
            Box::new(|g: &BackwardArgs<'_>| {
                let d = g
                    .grad
                    .data()
                    .iter()
                    .zip(g.output.data())
                    .map(|(&gv, &y)| gv * (1.0 - y * y))
                    .collect();
                vec![Some(Tensor::new(g.grad.shape(), d).expect("tanh grad"))]
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(a).to_vec();
        let out = self.value(a).clone().reshape(shape)?;
        self.push_op(
            "reshape",
            out,
            &[a],
            Box::new(move |g: &BackwardArgs<'_>| {
                vec![Some(g.grad.clone().reshape(&from).expect("reshape grad"))]
            }),
        )
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range")));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{:?} vs {:?} on axis {axis}", s, base)));
            }
            widths.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = widths.iter().sum();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let value = Tensor::new(&shape, out)?;
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
        self.push_op(
            "concat",
            value,
            parts,
            Box::new(move |g: &BackwardArgs<'_>| {
                let gd = g.grad.data();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for (i, &w) in widths.iter().enumerate() {
                    if g.needs[i] {
                        let mut d = Vec::with_capacity(outer * w * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[start..start + w * inner]);
                        }
                        grads.push(Some(Tensor::new(&shapes[i], d).expect("concat grad")));
                    } else {
                        grads.push(None);
                    }
                    offset += w;
                }
                grads
            }),
        )
    }

    /// Swap the last two axes of a rank-3 tensor.
    pub fn transpose12(&mut self, a: Var) -> Result<Var> {
        let [b, m, n] = self.value(a).dims3("transpose12")?;
        let out = transpose_batched(self.value(a).data(), b, m, n);
        let value = Tensor::new(&[b, n, m], out)?;
        self.push_op(
            "transpose12",
            value,
            &[a],
            Box::new(move |g: &BackwardArgs<'_>| {
                let d = transpose_batched(g.grad.data(), b, n, m);
                vec![Some(Tensor::new(&[b, m, n], d).expect("transpose grad"))]
            }),
        )
    }
}

fn transpose_batched(d: &[f64], b: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for k in 0..b {
        for i in 0..m {
            for j in 0..n {
                out[(k * n + j) * m + i] = d[(k * m + i) * n + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_with_zero_lateral_is_identity() {
        let mut tape = Tape::new();
        let top = Tensor::new(&[1, 1, 2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap();
        let a = tape.leaf(top.clone(), false);
        let z = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]), false);
        let y = tape.add(a, z).unwrap();
        assert_eq!(tape.value(y), &top);
    }

    #[test]
    fn concat_middle_axis_and_its_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(&[2, 1, 2], vec![1., 2., 3., 4.]).unwrap(), true);
        let b = tape.leaf(Tensor::new(&[2, 2, 2], vec![5., 6., 7., 8., 9., 10., 11., 12.]).unwrap(), true);
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 2]);
        assert_eq!(tape.value(c).data(), &[1., 2., 5., 6., 7., 8., 3., 4., 9., 10., 11., 12.]);
        let w = tape.leaf(Tensor::new(&[2, 3, 2], (0..12).map(f64::from).collect()).unwrap(), false);
        let y = tape.mul(c, w).unwrap();
        let s = tape.sum_all(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0., 1., 6., 7.]);
        assert_eq!(g.get(b).unwrap().data(), &[2., 3., 4., 5., 8., 9., 10., 11.]);
    }

    #[test]
    fn relu_changes_pattern_only_on_sign_flips() {
        let pattern = |v: f64| {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(&[2], vec![v, 1.0]).unwrap(), true);
            tape.relu(x).unwrap();
            tape.activation_pattern()
        };
        assert_eq!(pattern(0.5), pattern(0.7));
        assert_ne!(pattern(0.5), pattern(-0.5));
    }
}
