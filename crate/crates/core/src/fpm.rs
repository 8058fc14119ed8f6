//! Feature pyramid module: lateral 1x1 connections, a top-down x2 pathway
//! and a smoothing conv on every merged map.
//!
//! `M_top = lateral(C_top)`, `M_i = up(M_{i+1}) + lateral(C_i)`, `P_i = smooth(M_i)`.

use rand::Rng;

use crate::autograd::{Alignment, Var};
use crate::config::{FpmVariant, ModelConfig};
use crate::error::{Error, Result};
use crate::extractor::StageOutputs;
use crate::nn::{BatchNorm2d, Conv2d, ConvTranspose2d, Ctx, ParamStore};

pub const PREFIX: &str = "fpm";

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Upsampler {
    Bilinear,
    Transposed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FpmConfig {
    pub upsampler: Upsampler,
    pub pyramid_channels: usize,
    pub smooth_bn_relu: bool,
    /// Transposed-conv kernel: 4 (stride 2, pad 1) or 2 (stride 2, pad 0).
    pub tc_kernel: usize,
    pub align: Alignment,
    /// Ascending, contiguous stage indices ending at stage 4.
    pub stages: Vec<usize>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl FpmConfig {
    /// `None` when the model runs without a pyramid.
    pub fn from_model(cfg: &ModelConfig, stages: &[usize]) -> Result<Option<Self>> {
        let upsampler = match cfg.fpm {
            FpmVariant::None => return Ok(None),
            FpmVariant::Bilinear => Upsampler::Bilinear,
            FpmVariant::Transposed => Upsampler::Transposed,
        };
        let fpm = Self {
            upsampler,
            pyramid_channels: cfg.pyramid_channels,
            smooth_bn_relu: cfg.fpm_smooth_bn_relu,
            tc_kernel: cfg.tc_kernel,
            align: cfg.upsample_align,
            stages: stages.to_vec(),
            bn_eps: cfg.bn_eps,
            bn_momentum: cfg.bn_momentum,
        };
        fpm.validate(cfg.stage_channels.first().copied().unwrap_or(0))?;
        Ok(Some(fpm))
    }

    /// `lowest_width` is the channel count of the lowest backbone stage.
    pub fn validate(&self, lowest_width: usize) -> Result<()> {
        if self.pyramid_channels != lowest_width {
            return Err(Error::Config(format!(
                "pyramid width {} must equal the lowest stage width {lowest_width}",
                self.pyramid_channels
            )));
        }
        if self.stages.last() != Some(&4) {
            return Err(Error::Config("pyramid stages must include the top stage 4".into()));
        }
        if self.stages.windows(2).any(|w| w[1] != w[0] + 1) || self.stages[0] < 1 {
            return Err(Error::Config("pyramid stages must be ascending and contiguous".into()));
        }
        if !matches!(self.tc_kernel, 2 | 4) {
            return Err(Error::Config("model.tc_kernel must be 2 or 4".into()));
        }
        Ok(())
    }
}

/// Pyramid maps `P_i` for the configured stages.
#[derive(Clone, Debug)]
pub struct PyramidOutputs {
    /// `(stage, P)` in ascending stage order.
    pub maps: Vec<(usize, Var)>,
}

impl PyramidOutputs {
    pub fn stage(&self, stage: usize) -> Option<Var> {
        self.maps.iter().find(|(s, _)| *s == stage).map(|&(_, v)| v)
    }

    /// Map `P_i` with `i` in 2..=5.
    pub fn p(&self, i: usize) -> Option<Var> {
        self.stage(i.checked_sub(1)?)
    }
}

#[derive(Clone, Debug)]
struct Smooth {
    conv: Conv2d,
    bn: Option<BatchNorm2d>,
}

#[derive(Clone, Debug)]
pub struct Fpm {
    pub cfg: FpmConfig,
    laterals: Vec<Conv2d>,
    /// Upsampler feeding stage `stages[i]` from the stage above; one per non-top stage.
    transposed: Vec<Option<ConvTranspose2d>>,
    smooth: Vec<Smooth>,
}

impl Fpm {
    pub fn build(store: &mut ParamStore, cfg: &FpmConfig, stage_channels: &[usize], rng: &mut impl Rng) -> Self {
        let p = cfg.pyramid_channels;
        let mut laterals = Vec::new();
        let mut transposed = Vec::new();
        let mut smooth = Vec::new();
        for &s in &cfg.stages {
            let name = format!("{PREFIX}.stage{s}");
            laterals.push(Conv2d::new(store, &format!("{name}.lateral"), stage_channels[s - 1], p, 1, 1, 0, true, rng));
            if s < 4 {
                transposed.push((cfg.upsampler == Upsampler::Transposed).then(|| {
                    let pad = if cfg.tc_kernel == 4 { 1 } else { 0 };
                    ConvTranspose2d::new(store, &format!("{name}.upsample"), p, p, cfg.tc_kernel, 2, pad, false, rng)
                }));
            }
            let conv = Conv2d::new(store, &format!("{name}.smooth"), p, p, 3, 1, 1, !cfg.smooth_bn_relu, rng);
            let bn = cfg
                .smooth_bn_relu
                .then(|| BatchNorm2d::new(store, &format!("{name}.smooth_bn"), p, cfg.bn_eps, cfg.bn_momentum));
            smooth.push(Smooth { conv, bn });
        }
        Self {
            cfg: cfg.clone(),
            laterals,
            transposed,
            smooth,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, c: &StageOutputs) -> Result<PyramidOutputs> {
        self.forward_inner(ctx, c, true)
    }

    /// Pyramid with the top-down term removed: `P_i = smooth(lateral(C_i))`.
    pub fn forward_lateral_only(&self, ctx: &mut Ctx<'_>, c: &StageOutputs) -> Result<PyramidOutputs> {
        self.forward_inner(ctx, c, false)
    }

    fn forward_inner(&self, ctx: &mut Ctx<'_>, c: &StageOutputs, top_down: bool) -> Result<PyramidOutputs> {
        let n = self.cfg.stages.len();
        let mut merged: Vec<Option<Var>> = vec![None; n];
        for i in (0..n).rev() {
            let lateral = self.laterals[i].forward(ctx, c.stage(self.cfg.stages[i]))?;
            merged[i] = Some(match merged.get(i + 1).copied().flatten() {
                Some(above) if top_down => {
                    let up = match &self.transposed[i] {
                        Some(tc) => tc.forward(ctx, above)?,
                        None => ctx.tape.upsample_bilinear(above, 2, self.cfg.align)?,
                    };
                    if ctx.tape.shape(up) != ctx.tape.shape(lateral) {
                        return Err(Error::shape(
                            "fpm",
                            format!(
                                "top-down map {:?} does not match lateral map {:?}",
                                ctx.tape.shape(up),
                                ctx.tape.shape(lateral)
                            ),
                        ));
                    }
                    ctx.tape.add(up, lateral)?
                }
                _ => lateral,
            });
        }
        let mut maps = Vec::with_capacity(n);
        for (i, m) in merged.into_iter().enumerate() {
            let sm = &self.smooth[i];
            let mut p = sm.conv.forward(ctx, m.expect("filled above"))?;
            if let Some(bn) = &sm.bn {
                p = bn.forward(ctx, p)?;
                p = ctx.tape.relu(p)?;
            }
            maps.push((self.cfg.stages[i], p));
        }
        Ok(PyramidOutputs { maps })
    }
}

/// Closed-form trainable parameter count of the pyramid.
pub fn fpm_param_count(cfg: &FpmConfig, stage_channels: &[usize]) -> usize {
    let p = cfg.pyramid_channels;
    cfg.stages
        .iter()
        .map(|&s| {
            let lateral = stage_channels[s - 1] * p + p;
            let up = if s < 4 && cfg.upsampler == Upsampler::Transposed {
                p * p * cfg.tc_kernel * cfg.tc_kernel
            } else {
                0
            };
            let smooth = p * p * 9 + if cfg.smooth_bn_relu { 2 * p } else { p };
            lateral + up + smooth
        })
        .sum()
}
