use super::{BackwardArgs, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sample-grid convention of bilinear resampling.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub enum Alignment {
    /// Pixel centers at `i + 0.5`; source coordinate `(o + 0.5) / s - 0.5`, clamped.
    #[default]
    HalfPixel,
    /// First and last samples of input and output coincide.
    AlignCorners,
}

/// Per-output-index `(lo, hi, weight_lo, weight_hi)`.
pub(crate) fn interp_table(n_in: usize, n_out: usize, align: Alignment) -> Vec<(usize, usize, f64, f64)> {
    (0..n_out)
        .map(|o| {
            let src = match align {
                Alignment::HalfPixel => {
                    let s = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
                    s.clamp(0.0, (n_in - 1) as f64)
                }
                Alignment::AlignCorners if n_out > 1 => {
                    o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
                }
                Alignment::AlignCorners => 0.0,
            };
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            let frac = src - lo as f64;
            (lo, hi, 1.0 - frac, frac)
        })
        .collect()
}

impl Tape {
    /// Bilinear upsampling of both spatial axes of `[B, C, H, W]`. Only `factor == 2` is supported.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize, align: Alignment) -> Result<Var> {
        if factor != 2 {
            return Err(Error::InvalidArgument(format!(
                "bilinear upsampling supports factor 2 only, got {factor}"
            )));
        }
        let [b, c, h, w] = self.value(x).dims4("upsample_bilinear")?;
        if h == 0 || w == 0 {
            return Err(Error::shape("upsample_bilinear", "empty spatial extent"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let ty = interp_table(h, oh, align);
        let tx = interp_table(w, ow, align);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for plane in xd.chunks(h * w) {
            for &(y0, y1, wy0, wy1) in &ty {
                let r0 = &plane[y0 * w..(y0 + 1) * w];
                let r1 = &plane[y1 * w..(y1 + 1) * w];
                for &(x0, x1, wx0, wx1) in &tx {
                    out.push(wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]));
                }
            }
        }
        let value = Tensor::new(&[b, c, oh, ow], out)?;
        self.push_op(
            "upsample_bilinear",
            value,
            &[x],
            Box::new(move |a: &BackwardArgs<'_>| {
                let mut dx = vec![0.0; b * c * h * w];
                for (plane, gp) in dx.chunks_mut(h * w).zip(a.grad.data().chunks(oh * ow)) {
                    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                            let g = gp[oy * ow + ox];
                            plane[y0 * w + x0] += g * wy0 * wx0;
                            plane[y0 * w + x1] += g * wy0 * wx1;
                            plane[y1 * w + x0] += g * wy1 * wx0;
                            plane[y1 * w + x1] += g * wy1 * wx1;
                        }
                    }
                }
                vec![Some(Tensor::new(&[b, c, h, w], dx).expect("upsample grad"))]
            }),
        )
    }

    /// Extend the last axis to `target` by reflecting about the final sample.
    pub fn reflect_pad_time(&mut self, x: Var, target: usize) -> Result<Var> {
        let [b, c, f, t] = self.value(x).dims4("reflect_pad_time")?;
        if target < t {
            return Err(Error::shape("reflect_pad_time", format!("target {target} < length {t}")));
        }
        let extra = target - t;
        if extra > 0 && extra >= t {
            return Err(Error::shape(
                "reflect_pad_time",
                format!("cannot reflect {extra} frames of a {t}-frame input"),
            ));
        }
        if extra == 0 {
            return Ok(x);
        }
        let src_index = move |j: usize| if j < t { j } else { 2 * (t - 1) - j };
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * f * target);
        for row in xd.chunks(t) {
            out.extend((0..target).map(|j| row[src_index(j)]));
        }
        let value = Tensor::new(&[b, c, f, target], out)?;
        self.push_op(
            "reflect_pad_time",
            value,
            &[x],
            Box::new(move |a: &BackwardArgs<'_>| {
                let mut dx = vec![0.0; b * c * f * t];
                for (drow, grow) in dx.chunks_mut(t).zip(a.grad.data().chunks(target)) {
                    for (j, g) in grow.iter().enumerate() {
                        drow[src_index(j)] += g;
                    }
                }
                vec![Some(Tensor::new(&[b, c, f, t], dx).expect("pad grad"))]
            }),
        )
    }
}
