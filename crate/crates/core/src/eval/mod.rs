//! Trial scoring and duration-bucketed verification results.

mod metrics;
pub mod spke;

pub use metrics::{
    compute_eer, compute_mindcf, cosine_score, eer_from_points, mindcf_from_points, operating_points, DcfParams,
    OperatingPoint,
};

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Duration, EvalConfig, FrontendConfig};
use crate::error::{Error, Result};
use crate::frontend::{compute_logmel, read_lmfb, read_wav, test_features, AcousticFeatures};
use crate::model::SpeakerModel;
use crate::par::*;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub target: bool,
    pub enroll: String,
    pub test: String,
}

/// Parse `label enroll test` lines; blank lines and `#` comments are skipped.
pub fn parse_trials(text: &str) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |why: &str| Error::format("trial list", format!("line {}: {why}", n + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        let [label, enroll, test] = f[..] else {
            return Err(bad("expected `label enroll test`"));
        };
        let target = match label {
            "1" => true,
            "0" => false,
            _ => return Err(bad("label must be 0 or 1")),
        };
        out.push(Trial {
            target,
            enroll: enroll.to_string(),
            test: test.to_string(),
        });
    }
    Ok(out)
}

/// Draw `targets` same-speaker and `nontargets` cross-speaker pairs of
/// distinct utterances `(id, speaker)`, without repeating a pair.
pub fn sample_trials(utts: &[(String, usize)], targets: usize, nontargets: usize, seed: u64) -> Result<Vec<Trial>> {
    let n = utts.len();
    let same = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).filter(|&(i, j)| utts[i].1 == utts[j].1).count();
    let total = n * n.saturating_sub(1) / 2;
    if same < targets || total - same < nontargets {
        return Err(Error::InvalidArgument(format!(
            "{n} utterances give {same} target and {} nontarget pairs; asked for {targets} and {nontargets}",
            total - same
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let (mut nt, mut nn) = (0, 0);
    let mut out = Vec::with_capacity(targets + nontargets);
    while nt < targets || nn < nontargets {
        let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
        if i == j || !seen.insert((i.min(j), i.max(j))) {
            continue;
        }
        let target = utts[i].1 == utts[j].1;
        let slot = if target { &mut nt } else { &mut nn };
        if *slot < if target { targets } else { nontargets } {
            *slot += 1;
            out.push(Trial {
                target,
                enroll: utts[i].0.clone(),
                test: utts[j].0.clone(),
            });
        }
    }
    Ok(out)
}

pub fn format_trials(trials: &[Trial]) -> String {
    let mut s = String::new();
    for t in trials {
        let _ = writeln!(s, "{} {} {}", t.target as u8, t.enroll, t.test);
    }
    s
}

/// Where un-normalized log-Mel features of an utterance come from.
pub trait FeatureSource: Sync {
    fn raw_features(&self, id: &str) -> Result<AcousticFeatures>;
}

/// Utterance ids are paths (relative to `root`) to `.wav` or `.lmfb` files.
/// LMFB files are expected to hold raw log-Mel energies.
pub struct FileSource {
    pub root: PathBuf,
    pub frontend: FrontendConfig,
}

impl FeatureSource for FileSource {
    fn raw_features(&self, id: &str) -> Result<AcousticFeatures> {
        let path = self.root.join(id);
        let lmfb = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("lmfb"));
        if lmfb {
            read_lmfb(&path)
        } else {
            let (pcm, sr) = read_wav(&path)?;
            compute_logmel(&pcm, sr, &self.frontend)
        }
    }
}

impl FeatureSource for HashMap<String, AcousticFeatures> {
    fn raw_features(&self, id: &str) -> Result<AcousticFeatures> {
        self.get(id)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown utterance {id}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub condition: Duration,
    pub eer_percent: f64,
    pub min_dcf: f64,
    pub num_trials: usize,
    pub threshold_at_eer: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reject {
    pub utterance: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub results: Vec<EvalResult>,
    pub rejects: Vec<Reject>,
    /// Per condition, the scored trials as `(score, target)`.
    pub scores: Vec<Vec<(f64, bool)>>,
}

/// Embeddings for `(utterance, duration)` pairs, computed once each.
pub struct EmbeddingCache<'a, S: FeatureSource + ?Sized> {
    model: &'a SpeakerModel,
    source: &'a S,
    frontend: FrontendConfig,
    entries: HashMap<(String, Duration), std::result::Result<Vec<f64>, String>>,
}

impl<'a, S: FeatureSource + ?Sized> EmbeddingCache<'a, S> {
    pub fn new(model: &'a SpeakerModel, source: &'a S, frontend: &FrontendConfig) -> Self {
        Self {
            model,
            source,
            frontend: frontend.clone(),
            entries: HashMap::new(),
        }
    }

    /// Compute every missing key (in parallel); failures are remembered, not raised.
    pub fn fill(&mut self, keys: &[(String, Duration)]) {
        let todo: Vec<(String, Duration)> = keys
            .iter()
            .filter(|k| !self.entries.contains_key(*k))
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let (model, source, fe) = (self.model, self.source, &self.frontend);
        let done: Vec<_> = todo
            .par_iter()
            .map(|(id, d)| {
                let r = source
                    .raw_features(id)
                    .and_then(|raw| model.extract_embedding(&test_features(&raw, *d, fe)))
                    .map_err(|e| e.to_string());
                ((id.clone(), *d), r)
            })
            .collect();
        self.entries.extend(done);
    }

    pub fn get(&self, id: &str, d: Duration) -> Option<&std::result::Result<Vec<f64>, String>> {
        self.entries.get(&(id.to_string(), d))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Score `trials` once per test duration with enrollment segments of `cfg.enroll_duration`.
///
/// Trials whose audio cannot be loaded or embedded are dropped and listed in
/// `rejects`; a condition left without both trial classes is an error.
pub fn run_trials<S: FeatureSource + ?Sized>(
    model: &SpeakerModel,
    trials: &[Trial],
    source: &S,
    frontend: &FrontendConfig,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let mut cache = EmbeddingCache::new(model, source, frontend);
    run_trials_cached(&mut cache, trials, cfg)
}

pub fn run_trials_cached<S: FeatureSource + ?Sized>(
    cache: &mut EmbeddingCache<'_, S>,
    trials: &[Trial],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if cfg.durations.is_empty() {
        return Err(Error::Config("eval.durations is empty".into()));
    }
    let dcf = DcfParams {
        p_target: cfg.p_target,
        c_miss: cfg.c_miss,
        c_fa: cfg.c_fa,
    };
    let mut keys: Vec<(String, Duration)> = trials.iter().map(|t| (t.enroll.clone(), cfg.enroll_duration)).collect();
    for &d in &cfg.durations {
        keys.extend(trials.iter().map(|t| (t.test.clone(), d)));
    }
    cache.fill(&keys);

    let mut report = EvalReport::default();
    let mut rejected = BTreeSet::new();
    for &d in &cfg.durations {
        let mut pairs = Vec::with_capacity(trials.len());
        for t in trials {
            let e = cache.get(&t.enroll, cfg.enroll_duration).expect("filled");
            let x = cache.get(&t.test, d).expect("filled");
            match (e, x) {
                (Ok(e), Ok(x)) => pairs.push((cosine_score(e, x)?, t.target)),
                (e, x) => {
                    for (id, dur, r) in [(&t.enroll, cfg.enroll_duration, e), (&t.test, d, x)] {
                        if let Err(reason) = r {
                            if rejected.insert((id.clone(), dur)) {
                                report.rejects.push(Reject {
                                    utterance: id.clone(),
                                    reason: format!("{dur}: {reason}"),
                                });
                            }
                        }
                    }
                }
            }
        }
        let (scores, labels): (Vec<f64>, Vec<bool>) = pairs.iter().copied().unzip();
        let pts = operating_points(&scores, &labels)?;
        let (eer, thr) = eer_from_points(&pts);
        report.results.push(EvalResult {
            condition: d,
            eer_percent: 100.0 * eer,
            min_dcf: mindcf_from_points(&pts, dcf).0,
            num_trials: pairs.len(),
            threshold_at_eer: thr,
        });
        report.scores.push(pairs);
    }
    for r in &report.rejects {
        log::warn!("rejected {}: {}", r.utterance, r.reason);
    }
    Ok(report)
}

/// `condition,eer,min_dcf,num_trials` with EER in percent.
pub fn write_results_csv(w: &mut impl Write, results: &[EvalResult]) -> std::io::Result<()> {
    writeln!(w, "condition,eer,min_dcf,num_trials")?;
    for r in results {
        writeln!(w, "{},{},{},{}", r.condition, r.eer_percent, r.min_dcf, r.num_trials)?;
    }
    Ok(())
}

/// One column per test duration, like a results table in a paper.
pub fn results_table(system: &str, results: &[EvalResult]) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<24}", "System");
    for r in results {
        let _ = write!(s, "{:>9}", r.condition.to_string());
    }
    s.push('\n');
    for (label, f) in [
        ("EER (%)", (|r: &EvalResult| r.eer_percent) as fn(&EvalResult) -> f64),
        ("minDCF", |r: &EvalResult| r.min_dcf),
    ] {
        let _ = write!(s, "{:<24}", format!("{system} {label}"));
        for r in results {
            let _ = write!(s, "{:>9.3}", f(r));
        }
        s.push('\n');
    }
    s
}

/// Operating points `threshold,p_miss,p_fa` of one condition.
pub fn write_det_csv(w: &mut impl Write, pts: &[OperatingPoint]) -> std::io::Result<()> {
    writeln!(w, "threshold,p_miss,p_fa")?;
    for p in pts {
        writeln!(w, "{},{},{}", p.threshold, p.p_miss, p.p_fa)?;
    }
    Ok(())
}

pub fn write_rejects(path: &Path, rejects: &[Reject]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rejects {
        writeln!(f, "{}\t{}", r.utterance, r.reason)?;
    }
    f.flush()
}
