//! ResNet-34 feature extractor exposing the four stage outputs.
//!
//! | layer   | output            |
//! |---------|-------------------|
//! | conv1   | 64 x T x 32       |
//! | conv2_x | 64 x T x 32       |
//! | conv3_x | 32 x T/2 x 64     |
//! | conv4_x | 16 x T/4 x 128    |
//! | conv5_x | 8 x T/8 x 256     |

use rand::Rng;

use crate::autograd::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Ctx, ParamStore};

/// Total time downsampling of the extractor.
pub const TIME_REDUCTION: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub stage_blocks: [usize; 4],
    pub stage_channels: [usize; 4],
    pub conv1_kernel: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::resnet34()
    }
}

impl BackboneConfig {
    pub fn resnet34() -> Self {
        Self {
            stage_blocks: [3, 4, 6, 3],
            stage_channels: [32, 64, 128, 256],
            conv1_kernel: 7,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn from_model(cfg: &ModelConfig) -> Result<Self> {
        let four = |v: &[usize], what: &str| -> Result<[usize; 4]> {
            let arr: [usize; 4] = v
                .try_into()
                .map_err(|_| Error::Config(format!("model.{what} needs exactly 4 entries")))?;
            if arr.contains(&0) {
                return Err(Error::Config(format!("model.{what} entries must be positive")));
            }
            Ok(arr)
        };
        if cfg.conv1_kernel % 2 == 0 {
            return Err(Error::Config("model.conv1_kernel must be odd".into()));
        }
        Ok(Self {
            stage_blocks: four(&cfg.stage_blocks, "stage_blocks")?,
            stage_channels: four(&cfg.stage_channels, "stage_channels")?,
            conv1_kernel: cfg.conv1_kernel,
            bn_eps: cfg.bn_eps,
            bn_momentum: cfg.bn_momentum,
        })
    }

    pub fn stage_stride(stage: usize) -> usize {
        if stage == 1 {
            1
        } else {
            2
        }
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, cfg: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let bn = |store: &mut ParamStore, n: &str| BatchNorm2d::new(store, &format!("{name}.{n}"), cout, cfg.bn_eps, cfg.bn_momentum);
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, stride, 1, false, rng);
        let bn1 = bn(store, "bn1");
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1, false, rng);
        let bn2 = bn(store, "bn2");
        let shortcut = (stride != 1 || cin != cout).then(|| {
            let c = Conv2d::new(store, &format!("{name}.shortcut.conv"), cin, cout, 1, stride, 0, false, rng);
            (c, bn(store, "shortcut.bn"))
        });
        Self {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        }
    }

    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(ctx, x)?;
        let h = self.bn1.forward(ctx, h)?;
        let h = ctx.tape.relu(h)?;
        let h = self.conv2.forward(ctx, h)?;
        let h = self.bn2.forward(ctx, h)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(ctx, x)?;
                bn.forward(ctx, s)?
            }
            None => x,
        };
        let sum = ctx.tape.add(h, skip)?;
        ctx.tape.relu(sum)
    }
}

/// Outputs of conv2_x..conv5_x; stage `i` produces `C_{i+1}`.
#[derive(Copy, Clone, Debug)]
pub struct StageOutputs {
    pub c2: Var,
    pub c3: Var,
    pub c4: Var,
    pub c5: Var,
}

impl StageOutputs {
    /// Map produced by stage `stage` (1..=4).
    pub fn stage(&self, stage: usize) -> Var {
        match stage {
            1 => self.c2,
            2 => self.c3,
            3 => self.c4,
            4 => self.c5,
            _ => panic!("stage index {stage} outside 1..=4"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    conv1: Conv2d,
    bn1: BatchNorm2d,
    stages: Vec<Vec<BasicBlock>>,
}

/// Prefix of every backbone parameter name.
pub const PREFIX: &str = "backbone";

impl Backbone {
    pub fn build(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let k = cfg.conv1_kernel;
        let c0 = cfg.stage_channels[0];
        let conv1 = Conv2d::new(store, &format!("{PREFIX}.conv1"), 1, c0, k, 1, k / 2, false, rng);
        let bn1 = BatchNorm2d::new(store, &format!("{PREFIX}.bn1"), c0, cfg.bn_eps, cfg.bn_momentum);
        let mut stages = Vec::new();
        let mut cin = c0;
        for s in 0..4 {
            let cout = cfg.stage_channels[s];
            let blocks = (0..cfg.stage_blocks[s])
                .map(|b| {
                    let stride = if b == 0 { BackboneConfig::stage_stride(s + 1) } else { 1 };
                    let name = format!("{PREFIX}.stage{}.block{b}", s + 1);
                    let block = BasicBlock::new(store, &name, if b == 0 { cin } else { cout }, cout, stride, cfg, rng);
                    block
                })
                .collect();
            stages.push(blocks);
            cin = cout;
        }
        Self {
            cfg: cfg.clone(),
            conv1,
            bn1,
            stages,
        }
    }

    /// Run the extractor on `x [B, 1, F, T]`.
    ///
    /// The time axis is reflect-padded on the right up to a multiple of 8.
    pub fn forward_stages(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<StageOutputs> {
        let [_, c, _, t] = ctx.tape.value(x).dims4("backbone")?;
        if c != 1 {
            return Err(Error::shape("backbone", format!("expected 1 input channel, got {c}")));
        }
        if t < TIME_REDUCTION {
            return Err(Error::shape("backbone", format!("need at least {TIME_REDUCTION} frames, got {t}")));
        }
        let x = ctx.tape.reflect_pad_time(x, padded_frames(t))?;
        let h = self.conv1.forward(ctx, x)?;
        let h = self.bn1.forward(ctx, h)?;
        let mut h = ctx.tape.relu(h)?;
        let mut outs = Vec::with_capacity(4);
        for blocks in &self.stages {
            for block in blocks {
                h = block.forward(ctx, h)?;
            }
            outs.push(h);
        }
        Ok(StageOutputs {
            c2: outs[0],
            c3: outs[1],
            c4: outs[2],
            c5: outs[3],
        })
    }
}

/// Frame count after padding to the extractor's time reduction.
pub fn padded_frames(t: usize) -> usize {
    t.div_ceil(TIME_REDUCTION) * TIME_REDUCTION
}

/// Closed-form trainable parameter count of the backbone.
pub fn backbone_param_count(cfg: &BackboneConfig) -> usize {
    let bn = |c: usize| 2 * c;
    let k = cfg.conv1_kernel;
    let c0 = cfg.stage_channels[0];
    let mut total = c0 * k * k + bn(c0);
    let mut cin = c0;
    for s in 0..4 {
        let cout = cfg.stage_channels[s];
        for b in 0..cfg.stage_blocks[s] {
            let i = if b == 0 { cin } else { cout };
            total += i * cout * 9 + bn(cout) + cout * cout * 9 + bn(cout);
            if b == 0 && (s > 0 || i != cout) {
                total += i * cout + bn(cout);
            }
        }
        cin = cout;
    }
    total
}
