//! Pooling from a variable-size feature map `[B, C, F, T]` to a fixed vector.
//!
//! SAP and LDE work on frames: the frequency axis is averaged away first so
//! each time step contributes one `C`-dimensional vector.

use rand::Rng;

use crate::autograd::Var;
use crate::config::PoolingKind;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Self-attentive pooling: `alpha_t = softmax_t(u . tanh(W h_t + b))`, output `sum_t alpha_t h_t`.
#[derive(Clone, Debug)]
pub struct Sap {
    pub proj: Linear,
    pub context: Linear,
    pub dim: usize,
}

impl Sap {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let hidden = if hidden == 0 { dim } else { hidden };
        Self {
            proj: Linear::new(store, &format!("{name}.proj"), dim, hidden, true, rng),
            context: Linear::new(store, &format!("{name}.context"), hidden, 1, false, rng),
            dim,
        }
    }

    /// Attention weights `[B, T]` for frames `h [B, C, T]`.
    pub fn attention(&self, ctx: &mut Ctx<'_>, h: Var) -> Result<Var> {
        let [b, c, t] = ctx.tape.value(h).dims3("sap")?;
        if c != self.dim {
            return Err(Error::shape("sap", format!("expected {} channels, got {c}", self.dim)));
        }
        let rows = ctx.tape.transpose12(h)?;
        let rows = ctx.tape.reshape(rows, &[b * t, c])?;
        let z = self.proj.forward(ctx, rows)?;
        let z = ctx.tape.tanh(z)?;
        let logits = self.context.forward(ctx, z)?;
        let logits = ctx.tape.reshape(logits, &[b, t])?;
        ctx.tape.softmax_rows(logits)
    }

    pub fn pool_frames(&self, ctx: &mut Ctx<'_>, h: Var) -> Result<Var> {
        let alpha = self.attention(ctx, h)?;
        ctx.tape.weighted_time_sum(h, alpha)
    }
}

/// Learnable dictionary encoding with per-codeword smoothing scales.
///
/// A single instance may be applied to several maps; its codebook is then one
/// shared parameter.
#[derive(Clone, Debug)]
pub struct Lde {
    pub codebook: ParamId,
    pub scales: ParamId,
    pub codewords: usize,
    pub dim: usize,
}

impl Lde {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, codewords: usize, rng: &mut impl Rng) -> Self {
        let mu = Tensor::randn(&[codewords, dim], (1.0 / dim as f64).sqrt(), rng);
        Self {
            codebook: store.add(format!("{name}.codebook"), mu, true),
            scales: store.add(format!("{name}.scales"), Tensor::ones(&[codewords]), true),
            codewords,
            dim,
        }
    }

    /// L2-normalized encoding `[B, K*D]` of frames `h [B, D, T]`.
    pub fn encode_frames(&self, ctx: &mut Ctx<'_>, h: Var) -> Result<Var> {
        let mu = ctx.p(self.codebook);
        let s = ctx.p(self.scales);
        let e = ctx.tape.lde(h, mu, s)?;
        ctx.tape.l2_normalize_rows(e)
    }

    pub fn out_dim(&self) -> usize {
        self.codewords * self.dim
    }
}

/// A pooling operator bound to its parameters.
#[derive(Clone, Debug)]
pub enum Pooling {
    Gap,
    Stats,
    Sap(Sap),
    Lde(Lde),
}

/// Settings for [`Pooling::build`].
#[derive(Copy, Clone, Debug)]
pub struct PoolingSpec {
    pub kind: PoolingKind,
    pub sap_hidden: usize,
    pub lde_codewords: usize,
}

impl Pooling {
    /// Pooling over `channels`-channel maps. LDE requires the input already projected to its frame dimension.
    pub fn build(store: &mut ParamStore, name: &str, channels: usize, spec: PoolingSpec, rng: &mut impl Rng) -> Self {
        match spec.kind {
            PoolingKind::Gap => Pooling::Gap,
            PoolingKind::Stats => Pooling::Stats,
            PoolingKind::Sap => Pooling::Sap(Sap::new(store, name, channels, spec.sap_hidden, rng)),
            PoolingKind::Lde => Pooling::Lde(Lde::new(store, name, channels, spec.lde_codewords, rng)),
        }
    }

    /// Output length for `channels`-channel input.
    pub fn out_dim(&self, channels: usize) -> usize {
        match self {
            Pooling::Gap | Pooling::Sap(_) => channels,
            Pooling::Stats => 2 * channels,
            Pooling::Lde(l) => l.out_dim(),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        match self {
            Pooling::Gap => gap(ctx, x),
            Pooling::Stats => statistics_pool(ctx, x),
            Pooling::Sap(sap) => {
                let h = ctx.tape.mean_freq(x)?;
                sap.pool_frames(ctx, h)
            }
            Pooling::Lde(lde) => {
                let h = ctx.tape.mean_freq(x)?;
                lde.encode_frames(ctx, h)
            }
        }
    }
}

/// Mean over all spatial positions: `[B, C, ...] -> [B, C]`.
pub fn gap(ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
    ctx.tape.mean_spatial(x)
}

/// Per-channel mean and biased standard deviation: `[B, C, ...] -> [B, 2C]`.
pub fn statistics_pool(ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
    let m = ctx.tape.mean_spatial(x)?;
    let s = ctx.tape.std_spatial(x)?;
    ctx.tape.concat(&[m, s], 1)
}
