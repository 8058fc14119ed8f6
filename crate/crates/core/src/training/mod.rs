//! Desk-scale training: synthetic corpus, SGD loop and checkpoints.

pub mod checkpoint;
mod corpus;
mod optim;

pub use corpus::{gen_synthetic_corpus, synthesize, SpeakerRecipe, SyntheticCorpus, Utterance};
pub use optim::{lr_schedule, Sgd};

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::config::{FrontendConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::frontend::{compute_logmel, mean_normalize_sliding, AcousticFeatures};
use crate::losses::accuracy;
use crate::model::SpeakerModel;
use crate::nn::{Ctx, Mode};
use crate::par::*;

/// Utterances with index `< per_speaker - holdout` within their speaker
/// train; the rest are held out for verification trials.
pub fn split_holdout(corpus: &SyntheticCorpus, holdout: usize) -> (Vec<&Utterance>, Vec<&Utterance>) {
    let mut rank = vec![0usize; corpus.recipes.len()];
    let mut count = vec![0usize; corpus.recipes.len()];
    for u in &corpus.utterances {
        count[u.speaker] += 1;
    }
    corpus.utterances.iter().partition(|u| {
        let r = rank[u.speaker];
        rank[u.speaker] += 1;
        r + holdout < count[u.speaker]
    })
}

/// Parse `speaker_id<TAB>wav_path` lines.
pub fn parse_manifest(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let (s, p) = l
                .split_once('\t')
                .ok_or_else(|| Error::format("manifest", format!("line {}: expected speaker<TAB>path", n + 1)))?;
            Ok((s.trim().to_string(), p.trim().to_string()))
        })
        .collect()
}

/// Normalized training features with speaker labels.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub feats: Vec<AcousticFeatures>,
    pub labels: Vec<usize>,
}

impl TrainData {
    /// Log-Mel and mean-normalize every utterance (no VAD in training).
    pub fn from_corpus(utts: &[&Utterance], sample_rate: u32, cfg: &FrontendConfig) -> Result<Self> {
        let feats = utts
            .par_iter()
            .map(|u| {
                let raw = compute_logmel(&u.samples, sample_rate, cfg)?;
                Ok(mean_normalize_sliding(&raw, cfg.norm_window_frames))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            feats,
            labels: utts.iter().map(|u| u.speaker).collect(),
        })
    }

    pub fn num_speakers(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

/// CSV header and rows `epoch,lr,loss,accuracy`.
pub fn write_metrics_csv(w: &mut impl Write, rows: &[EpochMetrics]) -> std::io::Result<()> {
    writeln!(w, "epoch,lr,loss,accuracy")?;
    for m in rows {
        writeln!(w, "{},{},{},{}", m.epoch, m.lr, m.loss, m.accuracy)?;
    }
    Ok(())
}

/// Random contiguous crop of `len` frames; shorter utterances wrap around.
pub fn random_crop(f: &AcousticFeatures, len: usize, rng: &mut impl Rng) -> AcousticFeatures {
    let start = if f.n_frames > len { rng.random_range(0..=f.n_frames - len) } else { 0 };
    f.crop_wrapped(start, len)
}

/// Train in place. `on_epoch` sees the model after every epoch and may
/// persist checkpoints; an error from it aborts training.
pub fn train_with(
    model: &mut SpeakerModel,
    data: &TrainData,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &SpeakerModel) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    if data.num_speakers() < 2 {
        return Err(Error::InvalidArgument("training data must cover at least 2 speakers".into()));
    }
    if data.num_speakers() > model.cfg.num_speakers {
        return Err(Error::Config(format!(
            "data has {} speakers but model.num_speakers is {}",
            data.num_speakers(),
            model.cfg.num_speakers
        )));
    }
    if cfg.batch_size < 2 {
        return Err(Error::Config("train.batch_size must be at least 2".into()));
    }
    let mut sgd = Sgd::new(&model.store, cfg.momentum, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut iter = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..data.feats.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hit_sum, mut seen) = (0.0, 0.0, 0usize);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            if batch.len() < 2 {
                continue;
            }
            let crops: Vec<AcousticFeatures> = batch
                .iter()
                .map(|&i| random_crop(&data.feats[i], cfg.crop_frames, &mut rng))
                .collect();
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let x = SpeakerModel::batch_tensor(&crops)?;
            let diverged = |loss: f64| Error::Diverged { epoch, step, loss };

            if iter == 0 && model.classifier.radius.is_some() {
                let mut tape = Tape::inference();
                let mut ctx = Ctx::new(&mut tape, &model.store, Mode::Train);
                let xv = ctx.tape.leaf(x.clone(), false);
                let e = model.embed(&mut ctx, xv).map_err(|_| diverged(f64::NAN))?;
                let e = ctx.tape.value(e).clone();
                model.classifier.init_radius(&mut model.store, &e)?;
            }

            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, &model.store, Mode::Train);
            let xv = ctx.tape.leaf(x, false);
            let (out, _) = match model.loss(&mut ctx, xv, &labels, iter) {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            };
            let updates = ctx.into_updates();
            let loss = tape.scalar(out.loss);
            if !loss.is_finite() {
                return Err(diverged(loss));
            }
            let grads = tape.backward(out.loss).map_err(|e| match e {
                Error::NonFinite(_) => diverged(loss),
                e => e,
            })?;
            model.store.zero_grads();
            model.store.accumulate(&grads);
            model.store.apply_stat_updates(updates);
            sgd.step(&mut model.store, lr);

            loss_sum += loss * batch.len() as f64;
            hit_sum += accuracy(tape.value(out.scores), &labels) * batch.len() as f64;
            seen += batch.len();
            iter += 1;
        }
        let m = EpochMetrics {
            epoch,
            lr,
            loss: loss_sum / seen.max(1) as f64,
            accuracy: hit_sum / seen.max(1) as f64,
        };
        log::info!("epoch {epoch}: lr {lr} loss {:.4} acc {:.3}", m.loss, m.accuracy);
        on_epoch(&m, model)?;
        history.push(m);
    }
    Ok(history)
}

pub fn train(model: &mut SpeakerModel, data: &TrainData, cfg: &TrainConfig) -> Result<Vec<EpochMetrics>> {
    train_with(model, data, cfg, |_, _| Ok(()))
}
