//! `fpmsv`: feature extraction, corpus generation, training, embedding and
//! evaluation for the multi-scale speaker verification models.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric divergence.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fpm_sv::config::{Duration, RunConfig, ENV_PREFIX};
use fpm_sv::eval::{self, FileSource, FeatureSource};
use fpm_sv::frontend::{self, compute_logmel, mean_normalize_sliding, read_wav, write_lmfb, write_wav};
use fpm_sv::model::{self, SpeakerEmbedding, SpeakerModel, System};
use fpm_sv::training::{self, checkpoint, EpochMetrics, TrainData};
use fpm_sv::{par, Error};

#[derive(Parser, Debug)]
#[command(name = "fpmsv", version, about = "Speaker embeddings with multi-scale aggregation and a feature pyramid")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// `key=value` config file applied over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Parallel utterance workers (sets train.workers; 0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Do not print the resolved config.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write LMFB log-Mel files for WAV inputs. Relative input paths are
    /// mirrored under the output directory.
    Features {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Store mean-normalized features instead of raw log-Mel energies.
        #[arg(long)]
        normalize: bool,
    },
    /// Synthesize a corpus of WAVs with a manifest and a held-out trial list.
    GenCorpus {
        #[arg(long)]
        out_dir: PathBuf,
        /// Utterances per speaker kept out of `train.tsv`.
        #[arg(long, default_value_t = 10)]
        holdout: usize,
        /// Target and nontarget trials each, drawn from held-out utterances.
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Train a model on a `speaker<TAB>wav` manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write an SPKE file of embeddings for WAV or LMFB inputs.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Test-segment duration applied through VAD.
        #[arg(long, default_value = "full")]
        duration: Duration,
        /// File with one input path per line, in addition to positional inputs.
        #[arg(long)]
        list: Option<PathBuf>,
        inputs: Vec<PathBuf>,
    },
    /// Cosine-score a trial list against SPKE embeddings.
    Score {
        #[arg(long)]
        trials: PathBuf,
        /// One or more SPKE files; ids must be unique across them.
        #[arg(long, required = true)]
        embeddings: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score a trial list at every test duration and report EER and minDCF.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        /// Directory trial paths are relative to (default: the trial list's directory).
        #[arg(long)]
        root: Option<PathBuf>,
        /// Comma-separated test durations, e.g. `1,2,3,5,full` (sets eval.durations).
        #[arg(long)]
        durations: Option<String>,
        #[arg(long)]
        enroll_duration: Option<Duration>,
        #[arg(long)]
        p_target: Option<f64>,
        #[arg(long)]
        c_miss: Option<f64>,
        #[arg(long)]
        c_fa: Option<f64>,
        /// Results CSV `condition,eer,min_dcf,num_trials`.
        #[arg(long)]
        output: PathBuf,
        /// Directory for per-condition operating-point CSVs.
        #[arg(long)]
        det_dir: Option<PathBuf>,
        #[arg(long)]
        rejects: Option<PathBuf>,
    },
    /// Print per-submodule parameter counts.
    Params {
        /// Also print the seven standard systems with the resolved settings.
        #[arg(long)]
        systems: bool,
    },
}

/// A problem with how the tool was invoked.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => 1,
                Error::Diverged { .. } | Error::NonFinite(_) => 3,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Defaults, then `base` (a checkpoint's config), the config file,
/// `FPMSV_*` variables, `--set` pairs and `--workers`.
fn resolve(common: &Common, base: Option<RunConfig>) -> Result<RunConfig> {
    let mut cfg = base.unwrap_or_default();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        cfg.apply_text(&text)?;
    }
    cfg.apply_env(std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)))?;
    for kv in &common.sets {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(w) = common.workers {
        cfg.train.workers = w;
    }
    Ok(cfg)
}

fn print_config(common: &Common, cfg: &RunConfig) {
    if !common.quiet {
        eprintln!("# resolved config");
        eprint!("{}", cfg.to_text());
        eprintln!("# end config");
    }
}

/// Load a checkpoint and resolve the run config on top of its embedded one.
/// Model and loss settings always come from the checkpoint.
fn load_checkpoint(common: &Common, path: &Path) -> Result<(RunConfig, SpeakerModel)> {
    let (stored, model) = checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let mut cfg = resolve(common, Some(stored))?;
    if cfg.model != model.cfg || cfg.loss != model.classifier.cfg {
        log::warn!("model and loss settings are fixed by the checkpoint; overrides ignored");
        cfg.model = model.cfg.clone();
        cfg.loss = model.classifier.cfg.clone();
    }
    Ok((cfg, model))
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match &cli.cmd {
        Command::Features { inputs, out_dir, normalize } => {
            let cfg = resolve(common, None)?;
            print_config(common, &cfg);
            fs::create_dir_all(out_dir)?;
            par::with_workers(cfg.train.workers, || features(inputs, out_dir, *normalize, &cfg))
        }
        Command::GenCorpus { out_dir, holdout, trials } => {
            let cfg = resolve(common, None)?;
            print_config(common, &cfg);
            par::with_workers(cfg.train.workers, || gen_corpus(out_dir, *holdout, *trials, &cfg))
        }
        Command::Train { manifest, out_dir } => {
            let mut cfg = resolve(common, None)?;
            let text = fs::read_to_string(manifest).with_context(|| format!("reading {}", manifest.display()))?;
            let entries = training::parse_manifest(&text)?;
            let speakers: BTreeMap<&str, usize> = {
                let mut names: Vec<&str> = entries.iter().map(|(s, _)| s.as_str()).collect();
                names.sort_unstable();
                names.dedup();
                names.into_iter().enumerate().map(|(i, s)| (s, i)).collect()
            };
            if speakers.len() < 2 {
                bail!(Error::InvalidArgument("manifest must list at least 2 speakers".into()));
            }
            cfg.model.num_speakers = speakers.len();
            print_config(common, &cfg);
            let base = manifest.parent().unwrap_or(Path::new("."));
            par::with_workers(cfg.train.workers, || train(&cfg, &entries, &speakers, base, out_dir))
        }
        Command::Embed { checkpoint, output, duration, list, inputs } => {
            let (cfg, model) = load_checkpoint(common, checkpoint)?;
            print_config(common, &cfg);
            let mut ids: Vec<String> = inputs.iter().map(|p| p.display().to_string()).collect();
            if let Some(l) = list {
                let text = fs::read_to_string(l).with_context(|| format!("reading {}", l.display()))?;
                ids.extend(text.lines().map(str::trim).filter(|s| !s.is_empty()).map(String::from));
            }
            if ids.is_empty() {
                return Err(usage("embed needs at least one input"));
            }
            let src = FileSource {
                root: PathBuf::new(),
                frontend: cfg.frontend.clone(),
            };
            let vectors = par::with_workers(cfg.train.workers, || {
                use par::*;
                ids.par_iter()
                    .map(|id| {
                        let raw = src.raw_features(id).with_context(|| format!("reading {id}"))?;
                        let f = frontend::test_features(&raw, *duration, &cfg.frontend);
                        Ok(model.extract_embedding(&f)?)
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            let embs: Vec<SpeakerEmbedding> = ids
                .into_iter()
                .zip(vectors)
                .map(|(id, vector)| SpeakerEmbedding { id, vector })
                .collect();
            eval::spke::save(output, &embs)?;
            println!("wrote {} embeddings to {}", embs.len(), output.display());
            Ok(())
        }
        Command::Score { trials, embeddings, output } => {
            let cfg = resolve(common, None)?;
            print_config(common, &cfg);
            score(trials, embeddings, output, &cfg)
        }
        Command::Eval {
            checkpoint,
            trials,
            root,
            durations,
            enroll_duration,
            p_target,
            c_miss,
            c_fa,
            output,
            det_dir,
            rejects,
        } => {
            let (mut cfg, model) = load_checkpoint(common, checkpoint)?;
            if let Some(d) = durations {
                cfg.set("eval.durations", d)?;
            }
            if let Some(d) = enroll_duration {
                cfg.eval.enroll_duration = *d;
            }
            cfg.eval.p_target = p_target.unwrap_or(cfg.eval.p_target);
            cfg.eval.c_miss = c_miss.unwrap_or(cfg.eval.c_miss);
            cfg.eval.c_fa = c_fa.unwrap_or(cfg.eval.c_fa);
            print_config(common, &cfg);
            let text = fs::read_to_string(trials).with_context(|| format!("reading {}", trials.display()))?;
            let list = eval::parse_trials(&text)?;
            let src = FileSource {
                root: root.clone().unwrap_or_else(|| trials.parent().unwrap_or(Path::new(".")).to_path_buf()),
                frontend: cfg.frontend.clone(),
            };
            let report = par::with_workers(cfg.train.workers, || {
                eval::run_trials(&model, &list, &src, &cfg.frontend, &cfg.eval)
            })?;
            let mut f = fs::File::create(output)?;
            eval::write_results_csv(&mut f, &report.results)?;
            let system = format!("{}+{}", cfg.model.mode, cfg.model.fpm);
            print!("{}", eval::results_table(&system, &report.results));
            if let Some(dir) = det_dir {
                fs::create_dir_all(dir)?;
                for (r, pairs) in report.results.iter().zip(&report.scores) {
                    let (s, l): (Vec<f64>, Vec<bool>) = pairs.iter().copied().unzip();
                    let pts = eval::operating_points(&s, &l)?;
                    let mut f = fs::File::create(dir.join(format!("det_{}.csv", r.condition)))?;
                    eval::write_det_csv(&mut f, &pts)?;
                }
            }
            if let Some(path) = rejects {
                eval::write_rejects(path, &report.rejects)?;
            }
            if !report.rejects.is_empty() {
                eprintln!("{} utterance segments rejected", report.rejects.len());
            }
            Ok(())
        }
        Command::Params { systems } => {
            let cfg = resolve(common, None)?;
            print_config(common, &cfg);
            let breakdown = model::param_breakdown(&cfg.model, &cfg.loss)?;
            for (name, n) in &breakdown {
                println!("{name:<12} {n:>10}");
            }
            println!("{:<12} {:>10}", "total", breakdown.iter().map(|(_, n)| n).sum::<usize>());
            if *systems {
                println!();
                for s in System::ALL {
                    let n = model::count_params(&s.apply(&cfg.model), &cfg.loss)?;
                    println!("{:<16} {:>10}  ({:.2}M)", s.name(), n, n as f64 / 1e6);
                }
            }
            Ok(())
        }
    }
}

fn features(inputs: &[PathBuf], out_dir: &Path, normalize: bool, cfg: &RunConfig) -> Result<()> {
    use par::*;
    inputs
        .par_iter()
        .map(|path| {
            let (pcm, sr) = read_wav(path).with_context(|| format!("reading {}", path.display()))?;
            let mut f = compute_logmel(&pcm, sr, &cfg.frontend)?;
            if normalize {
                f = mean_normalize_sliding(&f, cfg.frontend.norm_window_frames);
            }
            let out = out_dir.join(feature_path(path)?);
            if let Some(parent) = out.parent() {
                fs::create_dir_all(parent)?;
            }
            write_lmfb(&out, &f)?;
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    println!("wrote {} feature files to {}", inputs.len(), out_dir.display());
    Ok(())
}

/// Relative inputs keep their directory layout under the output directory;
/// absolute ones keep only the file name.
fn feature_path(input: &Path) -> Result<PathBuf> {
    let rel: PathBuf = if input.is_absolute() {
        input.file_name().map(PathBuf::from).unwrap_or_default()
    } else {
        input
            .components()
            .filter(|c| matches!(c, std::path::Component::Normal(_)))
            .collect()
    };
    if rel.as_os_str().is_empty() {
        return Err(usage(format!("bad input {}", input.display())));
    }
    Ok(rel.with_extension("lmfb"))
}

fn gen_corpus(out_dir: &Path, holdout: usize, trials: usize, cfg: &RunConfig) -> Result<()> {
    if holdout >= cfg.corpus.utts_per_speaker {
        return Err(usage("--holdout must be smaller than corpus.utts_per_speaker"));
    }
    let corpus = training::gen_synthetic_corpus(&cfg.corpus)?;
    for u in &corpus.utterances {
        let path = out_dir.join(format!("{}.wav", u.id));
        fs::create_dir_all(path.parent().expect("has parent"))?;
        write_wav(&path, &u.samples, corpus.sample_rate)?;
    }
    let (train, held) = training::split_holdout(&corpus, holdout);
    let manifest = |utts: &[&training::Utterance]| -> String {
        utts.iter()
            .map(|u| format!("spk{:03}\t{}.wav\n", u.speaker, u.id))
            .collect()
    };
    fs::write(out_dir.join("train.tsv"), manifest(&train))?;
    fs::write(out_dir.join("heldout.tsv"), manifest(&held))?;
    if trials > 0 && !held.is_empty() {
        let pool: Vec<(String, usize)> = held.iter().map(|u| (format!("{}.wav", u.id), u.speaker)).collect();
        let list = eval::sample_trials(&pool, trials, trials, cfg.corpus.seed)?;
        fs::write(out_dir.join("trials.txt"), eval::format_trials(&list))?;
    }
    println!(
        "wrote {} utterances ({} train, {} held out) to {}",
        corpus.utterances.len(),
        train.len(),
        held.len(),
        out_dir.display()
    );
    Ok(())
}

fn train(
    cfg: &RunConfig,
    entries: &[(String, String)],
    speakers: &BTreeMap<&str, usize>,
    base: &Path,
    out_dir: &Path,
) -> Result<()> {
    use par::*;
    fs::create_dir_all(out_dir)?;
    let feats = entries
        .par_iter()
        .map(|(_, p)| {
            let path = base.join(p);
            let (pcm, sr) = read_wav(&path).with_context(|| format!("reading {}", path.display()))?;
            let raw = compute_logmel(&pcm, sr, &cfg.frontend)?;
            Ok(mean_normalize_sliding(&raw, cfg.frontend.norm_window_frames))
        })
        .collect::<Result<Vec<_>>>()?;
    let data = TrainData {
        feats,
        labels: entries.iter().map(|(s, _)| speakers[s.as_str()]).collect(),
    };
    let mut model = SpeakerModel::new(&cfg.model, &cfg.loss)?;
    println!("training {} parameters on {} utterances", model.num_params(), data.feats.len());
    let mut best = f64::INFINITY;
    let mut rows: Vec<EpochMetrics> = Vec::new();
    let csv = out_dir.join("metrics.csv");
    let result = training::train_with(&mut model, &data, &cfg.train, |m, model| {
        println!("epoch {:>3}  lr {:<8} loss {:.5}  acc {:.4}", m.epoch, m.lr, m.loss, m.accuracy);
        rows.push(m.clone());
        let mut f = fs::File::create(&csv)?;
        training::write_metrics_csv(&mut f, &rows)?;
        if m.loss < best {
            best = m.loss;
            checkpoint::save(&out_dir.join("best.spkv"), model, cfg)?;
        }
        Ok(())
    });
    if let Err(e) = result {
        return Err(anyhow!(e).context("training aborted"));
    }
    checkpoint::save(&out_dir.join("final.spkv"), &model, cfg)?;
    println!("wrote {} and {}", out_dir.join("final.spkv").display(), csv.display());
    Ok(())
}

fn score(trials: &Path, embeddings: &[PathBuf], output: &Path, cfg: &RunConfig) -> Result<()> {
    let mut table: HashMap<String, Vec<f64>> = HashMap::new();
    for path in embeddings {
        for e in eval::spke::load(path).with_context(|| format!("reading {}", path.display()))? {
            if table.insert(e.id.clone(), e.vector).is_some() {
                bail!(Error::InvalidArgument(format!("embedding id {} appears twice", e.id)));
            }
        }
    }
    let text = fs::read_to_string(trials).with_context(|| format!("reading {}", trials.display()))?;
    let list = eval::parse_trials(&text)?;
    let mut out = std::io::BufWriter::new(fs::File::create(output)?);
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for t in &list {
        let get = |id: &str| {
            table
                .get(id)
                .ok_or_else(|| Error::InvalidArgument(format!("no embedding for {id}")))
        };
        let s = eval::cosine_score(get(&t.enroll)?, get(&t.test)?)?;
        writeln!(out, "{s} {} {} {}", t.target as u8, t.enroll, t.test)?;
        scores.push(s);
        labels.push(t.target);
    }
    out.flush()?;
    if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
        let (eer, _) = eval::compute_eer(&scores, &labels)?;
        let dcf = eval::compute_mindcf(
            &scores,
            &labels,
            eval::DcfParams {
                p_target: cfg.eval.p_target,
                c_miss: cfg.eval.c_miss,
                c_fa: cfg.eval.c_fa,
            },
        )?;
        println!("{} trials  EER {:.3}%  minDCF {:.4}", list.len(), 100.0 * eer, dcf);
    }
    Ok(())
}
