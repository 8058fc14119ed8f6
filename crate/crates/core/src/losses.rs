//! Speaker-classification objectives used for training the embedding.

use rand::Rng;

use crate::autograd::Var;
use crate::config::{LossConfig, LossKind};
use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const PREFIX: &str = "classifier";

/// Loss value plus the scores used for training accuracy.
pub struct LossOutput {
    pub loss: Var,
    /// `[B, S]` class scores: affine logits, or cosines to the normalized class weights.
    pub scores: Var,
}

#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub radius: Option<ParamId>,
    pub cfg: LossConfig,
    pub num_speakers: usize,
}

impl ClassifierHead {
    pub fn build(store: &mut ParamStore, cfg: &LossConfig, embedding_dim: usize, num_speakers: usize, rng: &mut impl Rng) -> Result<Self> {
        if num_speakers < 2 {
            return Err(Error::Config("need at least 2 speakers".into()));
        }
        if cfg.kind == LossKind::ASoftmaxRing && !(1..=4).contains(&cfg.margin) {
            return Err(Error::Config("loss.margin must be in 1..=4".into()));
        }
        let w = Tensor::randn(&[num_speakers, embedding_dim], (1.0 / embedding_dim as f64).sqrt(), rng);
        let weight = store.add(format!("{PREFIX}.weight"), w, true);
        let (bias, radius) = match cfg.kind {
            LossKind::Softmax => (Some(store.add(format!("{PREFIX}.bias"), Tensor::zeros(&[num_speakers]), true)), None),
            LossKind::ASoftmaxRing => (None, Some(store.add(format!("{PREFIX}.ring_radius"), Tensor::ones(&[1]), false))),
        };
        Ok(Self {
            weight,
            bias,
            radius,
            cfg: cfg.clone(),
            num_speakers,
        })
    }

    pub fn param_count(cfg: &LossConfig, embedding_dim: usize, num_speakers: usize) -> usize {
        num_speakers * embedding_dim
            + match cfg.kind {
                LossKind::Softmax => num_speakers,
                LossKind::ASoftmaxRing => 1,
            }
    }

    /// Weight on `cos(theta)` in the blended target logit at iteration `iter`.
    pub fn anneal_blend(&self, iter: usize) -> f64 {
        let c = &self.cfg;
        (c.anneal_base * (1.0 + c.anneal_gamma * iter as f64).powf(-c.anneal_power)).max(c.anneal_min)
    }

    /// Set the ring radius to the mean norm of `embeddings [B, E]`.
    pub fn init_radius(&self, store: &mut ParamStore, embeddings: &Tensor) -> Result<()> {
        let Some(r) = self.radius else { return Ok(()) };
        let [b, e] = embeddings.dims2("init_radius")?;
        let mean = embeddings
            .data()
            .chunks(e)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum::<f64>()
            / b as f64;
        if !(mean > 0.0 && mean.is_finite()) {
            return Err(Error::NonFinite("ring radius initialization"));
        }
        store.param_mut(r).value.data_mut()[0] = mean;
        Ok(())
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var, labels: &[usize], iter: usize) -> Result<LossOutput> {
        let w = ctx.p(self.weight);
        match self.cfg.kind {
            LossKind::Softmax => {
                let b = self.bias.map(|b| ctx.p(b));
                let logits = ctx.tape.linear(x, w, b)?;
                let loss = ctx.tape.softmax_cross_entropy(logits, labels)?;
                Ok(LossOutput { loss, scores: logits })
            }
            LossKind::ASoftmaxRing => {
                let loss = self.a_softmax(ctx, x, w, labels, self.cfg.margin, self.anneal_blend(iter))?;
                let r = ctx.p(self.radius.expect("built with radius"));
                let ring = ctx.tape.ring_loss(x, r, self.cfg.ring_weight)?;
                let total = ctx.tape.add(loss, ring)?;
                let w_hat = ctx.tape.l2_normalize_rows(w)?;
                let xn = ctx.tape.l2_normalize_rows(x)?;
                let scores = ctx.tape.linear(xn, w_hat, None)?;
                Ok(LossOutput { loss: total, scores })
            }
        }
    }

    /// A-softmax cross-entropy with weight rows normalized on every call.
    pub fn a_softmax(&self, ctx: &mut Ctx<'_>, x: Var, w: Var, labels: &[usize], margin: u32, blend: f64) -> Result<Var> {
        let w_hat = ctx.tape.l2_normalize_rows(w)?;
        let logits = ctx.tape.angular_margin_logits(x, w_hat, labels, margin, blend)?;
        ctx.tape.softmax_cross_entropy(logits, labels)
    }
}

/// Fraction of rows whose highest score is the label.
pub fn accuracy(scores: &Tensor, labels: &[usize]) -> f64 {
    let s = scores.shape()[1];
    let hits = scores
        .data()
        .chunks(s)
        .zip(labels)
        .filter(|(row, &l)| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i == l)
                .unwrap_or(false)
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}
