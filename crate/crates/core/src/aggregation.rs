//! Embedding heads over one or several stage maps.
//!
//! * Single: pool the top map, FC.
//! * MSFA: bring three maps to the middle resolution (learned stride-2 conv
//!   for the lowest, bilinear x2 for the highest), concatenate channels, pool once, FC.
//! * MSEA: per-stage 1x1 conv and pooling, concatenate the pooled vectors, FC.

use rand::Rng;

use crate::autograd::{Alignment, Var};
use crate::config::{AggregationMode, ModelConfig, PoolingKind};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Ctx, Linear, ParamStore};
use crate::pooling::{Lde, Pooling, PoolingSpec};

pub const PREFIX: &str = "head";

fn spec(cfg: &ModelConfig) -> PoolingSpec {
    PoolingSpec {
        kind: cfg.pooling,
        sap_hidden: cfg.sap_hidden,
        lde_codewords: cfg.lde_codewords,
    }
}

/// Optional 1x1 projection followed by pooling and an FC layer.
#[derive(Clone, Debug)]
struct PoolFc {
    proj: Option<Conv2d>,
    pool: Pooling,
    fc: Linear,
}

impl PoolFc {
    fn build(store: &mut ParamStore, name: &str, channels: usize, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (proj, width) = if cfg.pooling == PoolingKind::Lde {
            let c = Conv2d::new(store, &format!("{name}.proj"), channels, cfg.lde_dim, 1, 1, 0, true, rng);
            (Some(c), cfg.lde_dim)
        } else {
            (None, channels)
        };
        let pool = Pooling::build(store, &format!("{name}.pool"), width, spec(cfg), rng);
        let fc = Linear::new(store, &format!("{name}.fc"), pool.out_dim(width), cfg.embedding_dim, true, rng);
        Self { proj, pool, fc }
    }

    fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let x = match &self.proj {
            Some(p) => p.forward(ctx, x)?,
            None => x,
        };
        let v = self.pool.forward(ctx, x)?;
        self.fc.forward(ctx, v)
    }
}

#[derive(Clone, Debug)]
pub struct MsfaHead {
    down: Conv2d,
    down_bn: BatchNorm2d,
    align: Alignment,
    tail: PoolFc,
    pub concat_channels: usize,
}

#[derive(Clone, Debug)]
enum MseaPool {
    /// GAP, stats or SAP; SAP parameters are per stage.
    PerStage(Vec<Pooling>),
    /// One LDE and one FC shared by every stage.
    SharedLde { lde: Lde, fc: Linear },
}

#[derive(Clone, Debug)]
pub struct MseaHead {
    proj: Vec<Conv2d>,
    pool: MseaPool,
    fc: Linear,
    fc_relu: bool,
    pub concat_dim: usize,
}

#[derive(Clone, Debug)]
pub enum Head {
    Single(PoolFcHead),
    Msfa(MsfaHead),
    Msea(MseaHead),
}

#[derive(Clone, Debug)]
pub struct PoolFcHead(PoolFc);

impl Head {
    /// `channels[i]` is the width of the map fed for the `i`-th used stage.
    pub fn build(store: &mut ParamStore, cfg: &ModelConfig, channels: &[usize], rng: &mut impl Rng) -> Result<Self> {
        match cfg.mode {
            AggregationMode::Single => {
                let &[c] = channels else {
                    return Err(Error::Config("single mode takes exactly one map".into()));
                };
                Ok(Head::Single(PoolFcHead(PoolFc::build(store, PREFIX, c, cfg, rng))))
            }
            AggregationMode::Msfa => {
                let &[lo, mid, hi] = channels else {
                    return Err(Error::Config("msfa aggregates exactly 3 stages".into()));
                };
                let k = cfg.msfa_down_kernel;
                let down = Conv2d::new(store, &format!("{PREFIX}.down"), lo, lo, k, 2, 1, false, rng);
                let down_bn = BatchNorm2d::new(store, &format!("{PREFIX}.down_bn"), lo, cfg.bn_eps, cfg.bn_momentum);
                let concat_channels = lo + mid + hi;
                Ok(Head::Msfa(MsfaHead {
                    down,
                    down_bn,
                    align: cfg.upsample_align,
                    tail: PoolFc::build(store, PREFIX, concat_channels, cfg, rng),
                    concat_channels,
                }))
            }
            AggregationMode::Msea => {
                if channels.is_empty() {
                    return Err(Error::Config("msea needs at least one stage".into()));
                }
                let lde = cfg.pooling == PoolingKind::Lde;
                let width = if lde { cfg.lde_dim } else { cfg.proj_channels };
                let proj = channels
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| Conv2d::new(store, &format!("{PREFIX}.branch{i}.proj"), c, width, 1, 1, 0, true, rng))
                    .collect();
                let (pool, per_stage) = if lde {
                    let l = Lde::new(store, &format!("{PREFIX}.lde"), width, cfg.lde_codewords, rng);
                    let fc = Linear::new(store, &format!("{PREFIX}.lde_fc"), l.out_dim(), cfg.embedding_dim, true, rng);
                    (MseaPool::SharedLde { lde: l, fc }, cfg.embedding_dim)
                } else {
                    let pools: Vec<Pooling> = (0..channels.len())
                        .map(|i| Pooling::build(store, &format!("{PREFIX}.branch{i}.pool"), width, spec(cfg), rng))
                        .collect();
                    let d = pools[0].out_dim(width);
                    (MseaPool::PerStage(pools), d)
                };
                let concat_dim = per_stage * channels.len();
                let fc = Linear::new(store, &format!("{PREFIX}.fc"), concat_dim, cfg.embedding_dim, true, rng);
                Ok(Head::Msea(MseaHead {
                    proj,
                    pool,
                    fc,
                    fc_relu: cfg.msea_fc_relu,
                    concat_dim,
                }))
            }
        }
    }

    /// Embeddings `[B, E]` from the maps of the used stages, lowest first.
    pub fn forward(&self, ctx: &mut Ctx<'_>, maps: &[Var]) -> Result<Var> {
        match self {
            Head::Single(h) => {
                let &[x] = maps else {
                    return Err(Error::shape("single head", "expects one map"));
                };
                h.0.forward(ctx, x)
            }
            Head::Msfa(h) => {
                let &[lo, mid, hi] = maps else {
                    return Err(Error::shape("msfa", "expects three maps"));
                };
                let cat = h.merge(ctx, lo, mid, hi)?;
                h.tail.forward(ctx, cat)
            }
            Head::Msea(h) => h.forward(ctx, maps),
        }
    }
}

impl MsfaHead {
    /// Resample to the middle map's resolution and concatenate channels.
    pub fn merge(&self, ctx: &mut Ctx<'_>, lo: Var, mid: Var, hi: Var) -> Result<Var> {
        let d = self.down.forward(ctx, lo)?;
        let d = self.down_bn.forward(ctx, d)?;
        let d = ctx.tape.relu(d)?;
        let u = ctx.tape.upsample_bilinear(hi, 2, self.align)?;
        let target = &ctx.tape.shape(mid)[2..];
        for (what, v) in [("downsampled", d), ("upsampled", u)] {
            if &ctx.tape.shape(v)[2..] != target {
                return Err(Error::shape(
                    "msfa",
                    format!("{what} map {:?} does not match {:?}", ctx.tape.shape(v), ctx.tape.shape(mid)),
                ));
            }
        }
        ctx.tape.concat(&[d, mid, u], 1)
    }
}

impl MseaHead {
    fn forward(&self, ctx: &mut Ctx<'_>, maps: &[Var]) -> Result<Var> {
        if maps.len() != self.proj.len() {
            return Err(Error::shape(
                "msea",
                format!("expects {} maps, got {}", self.proj.len(), maps.len()),
            ));
        }
        let mut parts = Vec::with_capacity(maps.len());
        for (i, &m) in maps.iter().enumerate() {
            let x = self.proj[i].forward(ctx, m)?;
            let v = match &self.pool {
                MseaPool::PerStage(pools) => pools[i].forward(ctx, x)?,
                MseaPool::SharedLde { lde, fc } => {
                    let h = ctx.tape.mean_freq(x)?;
                    let e = lde.encode_frames(ctx, h)?;
                    fc.forward(ctx, e)?
                }
            };
            parts.push(v);
        }
        let cat = ctx.tape.concat(&parts, 1)?;
        let e = self.fc.forward(ctx, cat)?;
        if self.fc_relu {
            ctx.tape.relu(e)
        } else {
            Ok(e)
        }
    }
}
