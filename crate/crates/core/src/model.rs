//! The full network: extractor, optional pyramid, embedding head and classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{self, Head};
use crate::autograd::{Tape, Var};
use crate::config::{AggregationMode, FpmVariant, LossConfig, ModelConfig, PoolingKind};
use crate::error::{Error, Result};
use crate::extractor::{self, Backbone, BackboneConfig, StageOutputs};
use crate::fpm::{self, Fpm, FpmConfig, PyramidOutputs};
use crate::frontend::AcousticFeatures;
use crate::losses::{self, ClassifierHead, LossOutput};
use crate::nn::{Ctx, Mode, ParamStore};
use crate::par::*;
use crate::tensor::Tensor;

/// One utterance's embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding {
    pub id: String,
    pub vector: Vec<f64>,
}

/// Intermediate maps of one forward pass.
pub struct Forward {
    pub stages: StageOutputs,
    pub pyramid: Option<PyramidOutputs>,
    pub embedding: Var,
}

/// Stages whose maps feed the head.
pub fn used_stages(cfg: &ModelConfig) -> Vec<usize> {
    match cfg.mode {
        AggregationMode::Single => vec![4],
        _ => cfg.stages.clone(),
    }
}

pub fn validate(cfg: &ModelConfig) -> Result<()> {
    BackboneConfig::from_model(cfg)?;
    let stages = used_stages(cfg);
    if stages.is_empty() {
        return Err(Error::Config("model.stages is empty".into()));
    }
    if stages.iter().any(|s| !(1..=4).contains(s)) || stages.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("model.stages must be ascending indices in 1..=4".into()));
    }
    if cfg.mode == AggregationMode::Msfa && (stages.len() != 3 || stages.windows(2).any(|w| w[1] != w[0] + 1)) {
        return Err(Error::Config("msfa uses exactly 3 consecutive stages".into()));
    }
    if !matches!(cfg.msfa_down_kernel, 3 | 4) {
        return Err(Error::Config("model.msfa_down_kernel must be 3 or 4".into()));
    }
    if !matches!(cfg.embedding_dim, 128 | 256) {
        return Err(Error::Config("model.embedding_dim must be 128 or 256".into()));
    }
    if cfg.num_speakers < 2 {
        return Err(Error::Config("model.num_speakers must be at least 2".into()));
    }
    if cfg.pooling == PoolingKind::Lde && (cfg.lde_dim == 0 || cfg.lde_codewords == 0) {
        return Err(Error::Config("LDE dimensions must be positive".into()));
    }
    if cfg.mode == AggregationMode::Msea && cfg.pooling != PoolingKind::Lde && cfg.proj_channels == 0 {
        return Err(Error::Config("model.proj_channels must be positive".into()));
    }
    FpmConfig::from_model(cfg, &stages)?;
    Ok(())
}

/// Widths of the maps entering the head, one per used stage.
fn head_inputs(cfg: &ModelConfig) -> Vec<usize> {
    used_stages(cfg)
        .iter()
        .map(|&s| if cfg.fpm == FpmVariant::None { cfg.stage_channels[s - 1] } else { cfg.pyramid_channels })
        .collect()
}

/// Trainable parameters per submodule, computed from the configuration alone.
pub fn param_breakdown(cfg: &ModelConfig, loss: &LossConfig) -> Result<Vec<(&'static str, usize)>> {
    validate(cfg)?;
    let bb = BackboneConfig::from_model(cfg)?;
    let stages = used_stages(cfg);
    let fpm = FpmConfig::from_model(cfg, &stages)?.map_or(0, |f| fpm::fpm_param_count(&f, &cfg.stage_channels));
    Ok(vec![
        (extractor::PREFIX, extractor::backbone_param_count(&bb)),
        (fpm::PREFIX, fpm),
        (aggregation::PREFIX, head_param_count(cfg)),
        (losses::PREFIX, ClassifierHead::param_count(loss, cfg.embedding_dim, cfg.num_speakers)),
    ])
}

pub fn count_params(cfg: &ModelConfig, loss: &LossConfig) -> Result<usize> {
    Ok(param_breakdown(cfg, loss)?.iter().map(|(_, n)| n).sum())
}

fn head_param_count(cfg: &ModelConfig) -> usize {
    let ch = head_inputs(cfg);
    let e = cfg.embedding_dim;
    let lde = cfg.pooling == PoolingKind::Lde;
    let pool_count = |c: usize| -> (usize, usize) {
        // (parameters, output length)
        match cfg.pooling {
            PoolingKind::Gap => (0, c),
            PoolingKind::Stats => (0, 2 * c),
            PoolingKind::Sap => {
                let h = if cfg.sap_hidden == 0 { c } else { cfg.sap_hidden };
                (c * h + h + h, c)
            }
            PoolingKind::Lde => (cfg.lde_codewords * c + cfg.lde_codewords, cfg.lde_codewords * c),
        }
    };
    let pool_fc = |c: usize| {
        let (proj, width) = if lde { (c * cfg.lde_dim + cfg.lde_dim, cfg.lde_dim) } else { (0, c) };
        let (p, d) = pool_count(width);
        proj + p + d * e + e
    };
    match cfg.mode {
        AggregationMode::Single => pool_fc(ch[0]),
        AggregationMode::Msfa => {
            let k = cfg.msfa_down_kernel;
            ch[0] * ch[0] * k * k + 2 * ch[0] + pool_fc(ch.iter().sum())
        }
        AggregationMode::Msea => {
            let width = if lde { cfg.lde_dim } else { cfg.proj_channels };
            let proj: usize = ch.iter().map(|c| c * width + width).sum();
            let (pools, per_stage) = if lde {
                let (p, d) = pool_count(width);
                (p + d * e + e, e)
            } else {
                let (p, d) = pool_count(width);
                (p * ch.len(), d)
            };
            proj + pools + per_stage * ch.len() * e + e
        }
    }
}

/// A built speaker network with its parameters.
#[derive(Clone, Debug)]
pub struct SpeakerModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub fpm: Option<Fpm>,
    pub head: Head,
    pub classifier: ClassifierHead,
    stages: Vec<usize>,
}

impl SpeakerModel {
    /// Build with deterministic initialization from `cfg.init_seed`.
    pub fn new(cfg: &ModelConfig, loss: &LossConfig) -> Result<Self> {
        validate(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::build(&mut store, &BackboneConfig::from_model(cfg)?, &mut rng);
        let stages = used_stages(cfg);
        let fpm = FpmConfig::from_model(cfg, &stages)?.map(|f| Fpm::build(&mut store, &f, &cfg.stage_channels, &mut rng));
        let head = Head::build(&mut store, cfg, &head_inputs(cfg), &mut rng)?;
        let classifier = ClassifierHead::build(&mut store, loss, cfg.embedding_dim, cfg.num_speakers, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            backbone,
            fpm,
            head,
            classifier,
            stages,
        })
    }

    pub fn stages(&self) -> &[usize] {
        &self.stages
    }

    /// Trainable scalars per submodule, counted from the built parameters.
    pub fn param_report(&self) -> Vec<(&'static str, usize)> {
        [extractor::PREFIX, fpm::PREFIX, aggregation::PREFIX, losses::PREFIX]
            .into_iter()
            .map(|p| (p, self.store.count_prefix(&format!("{p}."))))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.store.num_trainable()
    }

    /// Embeddings `[B, E]` for input `x [B, 1, F, T]`, keeping the intermediate maps.
    pub fn forward_full(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Forward> {
        let stages = self.backbone.forward_stages(ctx, x)?;
        let pyramid = match &self.fpm {
            Some(f) => Some(f.forward(ctx, &stages)?),
            None => None,
        };
        let maps: Vec<Var> = self
            .stages
            .iter()
            .map(|&s| match &pyramid {
                Some(p) => p.stage(s).expect("pyramid covers the used stages"),
                None => stages.stage(s),
            })
            .collect();
        let embedding = self.head.forward(ctx, &maps)?;
        Ok(Forward {
            stages,
            pyramid,
            embedding,
        })
    }

    pub fn embed(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        Ok(self.forward_full(ctx, x)?.embedding)
    }

    /// Training objective on a batch; `iter` drives the A-softmax annealing.
    pub fn loss(&self, ctx: &mut Ctx<'_>, x: Var, labels: &[usize], iter: usize) -> Result<(LossOutput, Var)> {
        let e = self.embed(ctx, x)?;
        Ok((self.classifier.forward(ctx, e, labels, iter)?, e))
    }

    /// Eval-mode embedding of a whole utterance.
    pub fn extract_embedding(&self, feats: &AcousticFeatures) -> Result<Vec<f64>> {
        if feats.n_frames < extractor::TIME_REDUCTION {
            return Err(Error::InvalidArgument(format!(
                "utterance has {} frames; at least {} are needed",
                feats.n_frames,
                extractor::TIME_REDUCTION
            )));
        }
        let mut tape = Tape::inference();
        let mut ctx = Ctx::new(&mut tape, &self.store, Mode::Eval);
        let x = ctx.tape.leaf(feats.to_tensor(), false);
        let e = self.embed(&mut ctx, x)?;
        let v = ctx.tape.value(e).data().to_vec();
        if v.iter().all(|x| *x == 0.0) {
            return Err(Error::NonFinite("embedding has zero norm"));
        }
        Ok(v)
    }

    /// Embeddings of many utterances; each is computed independently.
    pub fn extract_embeddings(&self, feats: &[AcousticFeatures]) -> Result<Vec<Vec<f64>>> {
        feats.par_iter().map(|f| self.extract_embedding(f)).collect()
    }

    /// Batch input tensor `[B, 1, F, T]` from equal-length feature matrices.
    pub fn batch_tensor(feats: &[AcousticFeatures]) -> Result<Tensor> {
        let first = feats.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let (f, t) = (first.n_mels, first.n_frames);
        let mut data = Vec::with_capacity(feats.len() * f * t);
        for x in feats {
            if (x.n_mels, x.n_frames) != (f, t) {
                return Err(Error::shape("batch", "utterances differ in extent"));
            }
            data.extend_from_slice(&x.mels);
        }
        Tensor::new(&[feats.len(), 1, f, t], data)
    }
}

/// The seven Table 2 configurations.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum System {
    Single,
    MsfaNoFpm,
    MsfaFpmB,
    MsfaFpmTc,
    MseaNoFpm,
    MseaFpmB,
    MseaFpmTc,
}

impl System {
    pub const ALL: [System; 7] = [
        System::Single,
        System::MsfaNoFpm,
        System::MsfaFpmB,
        System::MsfaFpmTc,
        System::MseaNoFpm,
        System::MseaFpmB,
        System::MseaFpmTc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            System::Single => "single",
            System::MsfaNoFpm => "msfa",
            System::MsfaFpmB => "msfa+fpm-b",
            System::MsfaFpmTc => "msfa+fpm-tc",
            System::MseaNoFpm => "msea",
            System::MseaFpmB => "msea+fpm-b",
            System::MseaFpmTc => "msea+fpm-tc",
        }
    }

    /// Apply this system's head and pyramid choice to `base`, keeping every other knob.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let (mode, fpm) = match self {
            System::Single => (AggregationMode::Single, FpmVariant::None),
            System::MsfaNoFpm => (AggregationMode::Msfa, FpmVariant::None),
            System::MsfaFpmB => (AggregationMode::Msfa, FpmVariant::Bilinear),
            System::MsfaFpmTc => (AggregationMode::Msfa, FpmVariant::Transposed),
            System::MseaNoFpm => (AggregationMode::Msea, FpmVariant::None),
            System::MseaFpmB => (AggregationMode::Msea, FpmVariant::Bilinear),
            System::MseaFpmTc => (AggregationMode::Msea, FpmVariant::Transposed),
        };
        ModelConfig {
            mode,
            fpm,
            ..base.clone()
        }
    }
}
