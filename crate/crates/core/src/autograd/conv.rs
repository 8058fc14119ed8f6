//! 2-D convolution and transposed convolution via im2col + GEMM.

use super::{BackwardArgs, Tape, Var};
use crate::error::{Error, Result};
use crate::gemm::gemm;
use crate::par::*;
use crate::tensor::Tensor;

/// Samples per weight-gradient partial. Partials are summed in chunk order,
/// so the result does not depend on how many threads computed them.
const WGRAD_CHUNK: usize = 4;

/// Stride and zero padding of a convolution. The kernel extent comes from the weight.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv2dGeom {
    pub fn new(stride: usize, pad: usize) -> Self {
        Self {
            stride: (stride, stride),
            pad: (pad, pad),
        }
    }

    /// `floor((in + 2p - k) / s) + 1`, or `None` when the padded input is smaller than the kernel.
    pub fn out_extent(&self, input: (usize, usize), kernel: (usize, usize)) -> Option<(usize, usize)> {
        let one = |n: usize, k: usize, s: usize, p: usize| {
            (n + 2 * p >= k && s > 0).then(|| (n + 2 * p - k) / s + 1)
        };
        Some((
            one(input.0, kernel.0, self.stride.0, self.pad.0)?,
            one(input.1, kernel.1, self.stride.1, self.pad.1)?,
        ))
    }
}

/// Geometry of a transposed convolution: output = `(in - 1) * s - 2p + k`.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct TransposedGeom {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl TransposedGeom {
    pub fn new(stride: usize, pad: usize) -> Self {
        Self {
            stride: (stride, stride),
            pad: (pad, pad),
        }
    }

    pub fn out_extent(&self, input: (usize, usize), kernel: (usize, usize)) -> Option<(usize, usize)> {
        let one = |n: usize, k: usize, s: usize, p: usize| {
            let full = (n.checked_sub(1)?) * s + k;
            full.checked_sub(2 * p).filter(|&o| o > 0)
        };
        Some((
            one(input.0, kernel.0, self.stride.0, self.pad.0)?,
            one(input.1, kernel.1, self.stride.1, self.pad.1)?,
        ))
    }

    fn as_conv(&self) -> Conv2dGeom {
        Conv2dGeom {
            stride: self.stride,
            pad: self.pad,
        }
    }
}

#[derive(Copy, Clone)]
struct Layout {
    channels: usize,
    img: (usize, usize),
    kernel: (usize, usize),
    grid: (usize, usize),
    geom: Conv2dGeom,
}

impl Layout {
    fn rows(&self) -> usize {
        self.channels * self.kernel.0 * self.kernel.1
    }

    fn cols(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// 1x1 stride-1 unpadded kernels need no unfolding.
    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.geom.stride == (1, 1) && self.geom.pad == (0, 0)
    }
}

/// Output columns `ox` whose input column `ox * s + kj - p` lies in `0..w`.
fn valid_cols(gw: usize, w: usize, s: usize, kj: usize, p: usize) -> (usize, usize) {
    let lo = p.saturating_sub(kj).div_ceil(s).min(gw);
    let hi = if w + p > kj { ((w + p - kj - 1) / s + 1).min(gw) } else { 0 };
    (lo, hi.max(lo))
}

/// Unfold `img [C, H, W]` into `cols [C*kh*kw, gh*gw]`.
fn im2col(img: &[f64], l: &Layout, cols: &mut [f64]) {
    let (h, w) = l.img;
    let (kh, kw) = l.kernel;
    let (gh, gw) = l.grid;
    let (sh, sw) = l.geom.stride;
    let (ph, pw) = l.geom.pad;
    for c in 0..l.channels {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut cols[row * gh * gw..(row + 1) * gh * gw];
                let (lo, hi) = valid_cols(gw, w, sw, kj, pw);
                for oy in 0..gh {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    let line = &mut dst[oy * gw..(oy + 1) * gw];
                    if iy < 0 || iy >= h as isize || lo == hi {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &img[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let x0 = lo * sw + kj - pw;
                    if sw == 1 {
                        line[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                    } else {
                        for (d, v) in line[lo..hi].iter_mut().zip(src[x0..].iter().step_by(sw)) {
                            *d = *v;
                        }
                    }
                }
            }
        }
    }
}

/// Fold `cols` back into `img`, accumulating overlaps. Inverse-adjoint of [`im2col`].
fn col2im(cols: &[f64], l: &Layout, img: &mut [f64]) {
    let (h, w) = l.img;
    let (kh, kw) = l.kernel;
    let (gh, gw) = l.grid;
    let (sh, sw) = l.geom.stride;
    let (ph, pw) = l.geom.pad;
    for c in 0..l.channels {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &cols[row * gh * gw..(row + 1) * gh * gw];
                let (lo, hi) = valid_cols(gw, w, sw, kj, pw);
                if lo == hi {
                    continue;
                }
                let x0 = lo * sw + kj - pw;
                for oy in 0..gh {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut img[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    let line = &src[oy * gw + lo..oy * gw + hi];
                    if sw == 1 {
                        for (d, v) in dst[x0..x0 + hi - lo].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (d, v) in dst[x0..].iter_mut().step_by(sw).zip(line) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

thread_local! {
    static SCRATCH: std::cell::Cell<Vec<f64>> = const { std::cell::Cell::new(Vec::new()) };
}

/// Run `f` on a reused per-thread buffer of `n` values with unspecified contents.
fn with_scratch<R>(n: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    let mut buf = SCRATCH.with(|s| s.take());
    if buf.len() < n {
        buf.resize(n, 0.0);
    }
    let r = f(&mut buf[..n]);
    SCRATCH.with(|s| s.set(buf));
    r
}

/// `f` sees the column matrix of `img`; pointwise layouts skip the copy.
fn with_unfolded<R>(img: &[f64], l: &Layout, f: impl FnOnce(&[f64]) -> R) -> R {
    if l.is_pointwise() {
        f(img)
    } else {
        with_scratch(l.rows() * l.cols(), |cols| {
            im2col(img, l, cols);
            f(cols)
        })
    }
}

fn bias_grad(grad: &Tensor, channels: usize) -> Tensor {
    let g = grad.shape();
    let plane: usize = g[2] * g[3];
    let mut db = vec![0.0; channels];
    for b in 0..g[0] {
        for (c, acc) in db.iter_mut().enumerate() {
            let off = (b * channels + c) * plane;
            *acc += grad.data()[off..off + plane].iter().sum::<f64>();
        }
    }
    Tensor::new(&[channels], db).expect("bias grad shape")
}

fn add_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (chunk, &bv) in out.chunks_mut(plane).zip(bias.iter().cycle()) {
        for v in chunk {
            *v += bv;
        }
    }
}

/// Sum `f(sample)` weight-gradient partials in a fixed order.
fn chunked_sum(batch: usize, len: usize, f: impl Fn(usize, &mut [f64]) + Sync) -> Vec<f64> {
    let chunks = batch.div_ceil(WGRAD_CHUNK);
    let partials: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|ci| {
            let mut acc = vec![0.0; len];
            for b in ci * WGRAD_CHUNK..((ci + 1) * WGRAD_CHUNK).min(batch) {
                f(b, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; len];
    for p in &partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

impl Tape {
    /// Cross-correlation of `x [B, Cin, H, W]` with `w [Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, geom: Conv2dGeom) -> Result<Var> {
        let [batch, cin, h, wd] = self.value(x).dims4("conv2d")?;
        let [cout, wcin, kh, kw] = self.value(w).dims4("conv2d weight")?;
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels, weight expects {wcin}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv2d", format!("bias must be [{cout}]")));
            }
        }
        let (oh, ow) = geom.out_extent((h, wd), (kh, kw)).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("padded input {h}x{wd} smaller than kernel {kh}x{kw}"),
            )
        })?;
        let layout = Layout {
            channels: cin,
            img: (h, wd),
            kernel: (kh, kw),
            grid: (oh, ow),
            geom,
        };
        let k = layout.rows();
        let p = layout.cols();
        let xin = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; batch * cout * p];
        out.par_chunks_mut(cout * p).enumerate().for_each(|(b, o)| {
            with_unfolded(&xin[b * cin * h * wd..(b + 1) * cin * h * wd], &layout, |cols| {
                gemm(cout, k, p, wv, false, cols, false, 0.0, o)
            });
        });
        if let Some(bv) = bias {
            add_bias(&mut out, self.value(bv).data(), p);
        }
        let value = Tensor::new(&[batch, cout, oh, ow], out)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        self.push_op(
            "conv2d",
            value,
            &parents,
            Box::new(move |a: &BackwardArgs<'_>| {
                let g = a.grad.data();
                let xin = a.inputs[0].data();
                let wv = a.inputs[1].data();
                let img = cin * h * wd;
                let dx = a.needs[0].then(|| {
                    let mut dx = vec![0.0; batch * img];
                    dx.par_chunks_mut(img).enumerate().for_each(|(b, dxb)| {
                        let gb = &g[b * cout * p..(b + 1) * cout * p];
                        if layout.is_pointwise() {
                            gemm(k, cout, p, wv, true, gb, false, 0.0, dxb);
                        } else {
                            with_scratch(k * p, |dcols| {
                                gemm(k, cout, p, wv, true, gb, false, 0.0, dcols);
                                col2im(dcols, &layout, dxb);
                            });
                        }
                    });
                    Tensor::new(&[batch, cin, h, wd], dx).expect("dx shape")
                });
                let dw = a.needs[1].then(|| {
                    let dw = chunked_sum(batch, cout * k, |b, acc| {
                        with_unfolded(&xin[b * img..(b + 1) * img], &layout, |cols| {
                            gemm(cout, p, k, &g[b * cout * p..(b + 1) * cout * p], false, cols, true, 1.0, acc)
                        });
                    });
                    Tensor::new(&[cout, cin, kh, kw], dw).expect("dw shape")
                });
                let mut grads = vec![dx, dw];
                if a.inputs.len() == 3 {
                    grads.push(a.needs[2].then(|| bias_grad(a.grad, cout)));
                }
                grads
            }),
        )
    }

    /// Transposed convolution of `x [B, Cin, H, W]` with `w [Cin, Cout, kh, kw]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: TransposedGeom,
    ) -> Result<Var> {
        let [batch, cin, h, wd] = self.value(x).dims4("conv_transpose2d")?;
        let [wcin, cout, kh, kw] = self.value(w).dims4("conv_transpose2d weight")?;
        if wcin != cin {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input has {cin} channels, weight expects {wcin}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv_transpose2d", format!("bias must be [{cout}]")));
            }
        }
        let (oh, ow) = geom.out_extent((h, wd), (kh, kw)).ok_or_else(|| {
            Error::shape("conv_transpose2d", "degenerate output extent")
        })?;
        // The transposed op scatters each input pixel through the kernel:
        // it is col2im over an output "image" whose unfold grid is the input.
        let layout = Layout {
            channels: cout,
            img: (oh, ow),
            kernel: (kh, kw),
            grid: (h, wd),
            geom: geom.as_conv(),
        };
        let k = layout.rows();
        let p = layout.cols();
        let out_img = cout * oh * ow;
        let xin = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; batch * out_img];
        out.par_chunks_mut(out_img).enumerate().for_each(|(b, o)| {
            with_scratch(k * p, |cols| {
                gemm(k, cin, p, wv, true, &xin[b * cin * p..(b + 1) * cin * p], false, 0.0, cols);
                col2im(cols, &layout, o);
            });
        });
        if let Some(bv) = bias {
            add_bias(&mut out, self.value(bv).data(), oh * ow);
        }
        let value = Tensor::new(&[batch, cout, oh, ow], out)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        self.push_op(
            "conv_transpose2d",
            value,
            &parents,
            Box::new(move |a: &BackwardArgs<'_>| {
                let g = a.grad.data();
                let xin = a.inputs[0].data();
                let wv = a.inputs[1].data();
                let dx = a.needs[0].then(|| {
                    let mut dx = vec![0.0; batch * cin * p];
                    dx.par_chunks_mut(cin * p).enumerate().for_each(|(b, dxb)| {
                        with_unfolded(&g[b * out_img..(b + 1) * out_img], &layout, |dcols| {
                            gemm(cin, k, p, wv, false, dcols, false, 0.0, dxb)
                        });
                    });
                    Tensor::new(&[batch, cin, h, wd], dx).expect("dx shape")
                });
                let dw = a.needs[1].then(|| {
                    let dw = chunked_sum(batch, cin * k, |b, acc| {
                        with_unfolded(&g[b * out_img..(b + 1) * out_img], &layout, |dcols| {
                            gemm(cin, p, k, &xin[b * cin * p..(b + 1) * cin * p], false, dcols, true, 1.0, acc)
                        });
                    });
                    Tensor::new(&[cin, cout, kh, kw], dw).expect("dw shape")
                });
                let mut grads = vec![dx, dw];
                if a.inputs.len() == 3 {
                    grads.push(a.needs[2].then(|| bias_grad(a.grad, cout)));
                }
                grads
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop cross-correlation.
    fn naive_conv(x: &Tensor, w: &Tensor, sh: usize, sw: usize, ph: usize, pw: usize) -> Tensor {
        let [b, cin, h, wd] = x.dims4("x").unwrap();
        let [cout, _, kh, kw] = w.dims4("w").unwrap();
        let oh = (h + 2 * ph - kh) / sh + 1;
        let ow = (wd + 2 * pw - kw) / sw + 1;
        let mut out = Tensor::zeros(&[b, cout, oh, ow]);
        for n in 0..b {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * sh + ki) as isize - ph as isize;
                                    let ix = (ox * sw + kj) as isize - pw as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.at4(n, ci, iy as usize, ix as usize) * w.at4(co, ci, ki, kj);
                                    }
                                }
                            }
                        }
                        out.data_mut()[((n * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn run_conv(x: &Tensor, w: &Tensor, geom: Conv2dGeom) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let wv = tape.leaf(w.clone(), false);
        let y = tape.conv2d(xv, wv, None, geom).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn ones_kernel_counts_overlaps() {
        let y = run_conv(&Tensor::ones(&[1, 1, 4, 4]), &Tensor::ones(&[1, 1, 3, 3]), Conv2dGeom::new(1, 1));
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(y.at4(0, 0, 1, 1), 9.0);
        assert_eq!(y.at4(0, 0, 0, 0), 4.0);
        assert_eq!(y.at4(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&[1, 2, 5, 7], 1.0, &mut rng);
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 2, 0), (1, 1, 0), (2, 1, 0)] {
            let w = Tensor::randn(&[3, 2, k, k], 1.0, &mut rng);
            let got = run_conv(&x, &w, Conv2dGeom::new(s, p));
            let want = naive_conv(&x, &w, s, s, p, p);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12, "k={k} s={s} p={p}");
        }
    }

    #[test]
    fn output_extent_formula() {
        let g = Conv2dGeom::new(1, 3);
        assert_eq!(g.out_extent((64, 300), (7, 7)), Some((64, 300)));
        let g = Conv2dGeom::new(2, 1);
        assert_eq!(g.out_extent((64, 304), (3, 3)), Some((32, 152)));
        assert_eq!(Conv2dGeom::new(2, 0).out_extent((64, 304), (1, 1)), Some((32, 152)));
        assert_eq!(Conv2dGeom::new(1, 0).out_extent((2, 2), (3, 3)), None);
    }

    #[test]
    fn conv1_of_table_shape() {
        let mut tape = Tape::inference();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 64, 300]), false);
        let w = tape.leaf(Tensor::zeros(&[32, 1, 7, 7]), false);
        let y = tape.conv2d(x, w, None, Conv2dGeom::new(1, 3)).unwrap();
        assert_eq!(tape.shape(y), &[1, 32, 64, 300]);
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 4, 4]), false);
        let w = tape.leaf(Tensor::zeros(&[1, 3, 3, 3]), false);
        let err = tape.conv2d(x, w, None, Conv2dGeom::new(1, 1)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut tape = Tape::new();
        let mut xv = Tensor::zeros(&[1, 1, 3, 3]);
        xv.data_mut()[4] = f64::NAN;
        let x = tape.leaf(xv, false);
        let w = tape.leaf(Tensor::ones(&[1, 1, 3, 3]), false);
        let err = tape.conv2d(x, w, None, Conv2dGeom::new(1, 1)).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    fn run_tconv(x: &Tensor, w: &Tensor, geom: TransposedGeom) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let wv = tape.leaf(w.clone(), false);
        let y = tape.conv_transpose2d(xv, wv, None, geom).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn transposed_tiles_disjoint_blocks() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = run_tconv(&x, &Tensor::ones(&[1, 1, 2, 2]), TransposedGeom::new(2, 0));
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        let want = [
            1., 1., 2., 2., //
            1., 1., 2., 2., //
            3., 3., 4., 4., //
            3., 3., 4., 4.,
        ];
        assert_eq!(y.data(), &want);
    }

    #[test]
    fn transposed_extent_doubles() {
        let g = TransposedGeom::new(2, 1);
        assert_eq!(g.out_extent((8, 38), (4, 4)), Some((16, 76)));
        assert_eq!(TransposedGeom::new(2, 0).out_extent((8, 38), (2, 2)), Some((16, 76)));
    }

    /// Zero-stuff the input by the stride, pad by `k - 1 - p`, and correlate
    /// with the spatially flipped, channel-swapped kernel.
    fn zero_stuffed_oracle(x: &Tensor, w: &Tensor, s: usize, p: usize) -> Tensor {
        let [b, cin, h, wd] = x.dims4("x").unwrap();
        let [_, cout, kh, kw] = w.dims4("w").unwrap();
        let sh = (h - 1) * s + 1;
        let sw = (wd - 1) * s + 1;
        let mut stuffed = Tensor::zeros(&[b, cin, sh, sw]);
        for n in 0..b {
            for c in 0..cin {
                for i in 0..h {
                    for j in 0..wd {
                        stuffed.data_mut()[((n * cin + c) * sh + i * s) * sw + j * s] = x.at4(n, c, i, j);
                    }
                }
            }
        }
        let mut flipped = Tensor::zeros(&[cout, cin, kh, kw]);
        for co in 0..cout {
            for ci in 0..cin {
                for i in 0..kh {
                    for j in 0..kw {
                        flipped.data_mut()[((co * cin + ci) * kh + i) * kw + j] =
                            w.at4(ci, co, kh - 1 - i, kw - 1 - j);
                    }
                }
            }
        }
        naive_conv(&stuffed, &flipped, 1, 1, kh - 1 - p, kw - 1 - p)
    }

    #[test]
    fn transposed_matches_zero_stuffing_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[1, 1, 3, 3], 1.0, &mut rng);
        for (k, p) in [(4, 1), (2, 0), (3, 1)] {
            let w = Tensor::randn(&[1, 1, k, k], 1.0, &mut rng);
            let got = run_tconv(&x, &w, TransposedGeom::new(2, p));
            let want = zero_stuffed_oracle(&x, &w, 2, p);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
        let x = Tensor::randn(&[2, 3, 3, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 2, 4, 4], 1.0, &mut rng);
        let got = run_tconv(&x, &w, TransposedGeom::new(2, 1));
        assert!(got.max_abs_diff(&zero_stuffed_oracle(&x, &w, 2, 1)) < 1e-12);
    }
}
