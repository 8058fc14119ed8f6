//! Run configuration as canonical `key=value` text.
//!
//! Every tunable knob lives here. The rendered text is what gets embedded in
//! checkpoints and printed at the start of every CLI run, and parsing that
//! text back yields an identical [`RunConfig`].

use std::fmt;
use std::str::FromStr;

use crate::autograd::Alignment;
use crate::error::{Error, Result};

/// Prefix for environment-variable overrides, e.g. `FPMSV_TRAIN_EPOCHS=5`.
pub const ENV_PREFIX: &str = "FPMSV_";

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

scalar_value!(usize, u32, u64, f64, bool);

impl<T: ConfigValue> ConfigValue for Vec<T> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|p| T::parse_value(p.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(ConfigValue::render).collect::<Vec<_>>().join(",")
    }
}

macro_rules! keyword_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),* $(,)? }) => {
        $(#[$m])*
        #[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
        pub enum $name { $($variant),* }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $text),* })
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($text => Ok(Self::$variant),)*
                    other => Err(format!(
                        "unknown {} {other:?}; expected one of {}",
                        stringify!($name),
                        [$($text),*].join("|")
                    )),
                }
            }
        }

        impl ConfigValue for $name {
            fn parse_value(s: &str) -> std::result::Result<Self, String> { s.parse() }
            fn render(&self) -> String { self.to_string() }
        }
    };
}

keyword_enum!(
    /// How stage feature maps become one embedding.
    AggregationMode { Single => "single", Msfa => "msfa", Msea => "msea" }
);
keyword_enum!(
    /// Top-down upsampler of the feature pyramid, or no pyramid at all.
    FpmVariant { None => "none", Bilinear => "b", Transposed => "tc" }
);
keyword_enum!(PoolingKind { Gap => "gap", Stats => "stats", Sap => "sap", Lde => "lde" });
keyword_enum!(LossKind { Softmax => "softmax", ASoftmaxRing => "asoftmax_ring" });

impl ConfigValue for Alignment {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "half_pixel" => Ok(Alignment::HalfPixel),
            "align_corners" => Ok(Alignment::AlignCorners),
            other => Err(format!("unknown alignment {other:?}; expected half_pixel|align_corners")),
        }
    }
    fn render(&self) -> String {
        match self {
            Alignment::HalfPixel => "half_pixel".into(),
            Alignment::AlignCorners => "align_corners".into(),
        }
    }
}

/// Test-segment length: a whole number of seconds of speech, or the full utterance.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Duration {
    Seconds(u32),
    Full,
}

impl fmt::Display for Duration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Duration::Seconds(s) => write!(f, "{s}s"),
            Duration::Full => f.write_str("full"),
        }
    }
}

impl FromStr for Duration {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("full") {
            return Ok(Duration::Full);
        }
        let n: u32 = s
            .trim_end_matches('s')
            .parse()
            .map_err(|_| format!("invalid duration {s:?}"))?;
        if n == 0 {
            return Err("duration must be positive".into());
        }
        Ok(Duration::Seconds(n))
    }
}

impl ConfigValue for Duration {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

macro_rules! config_section {
    (
        $(#[$sm:meta])*
        $name:ident {
            $( $(#[$m:meta])* $field:ident : $ty:ty = $default:expr ),* $(,)?
        }
    ) => {
        $(#[$sm])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            $( $(#[$m])* pub $field: $ty, )*
        }

        impl Default for $name {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl $name {
            fn set_key(&mut self, key: &str, value: &str) -> Option<std::result::Result<(), String>> {
                match key {
                    $( stringify!($field) => Some(
                        <$ty as ConfigValue>::parse_value(value).map(|v| self.$field = v)
                    ), )*
                    _ => None,
                }
            }

            fn render_keys(&self, section: &str, out: &mut Vec<(String, String)>) {
                $( out.push((format!("{section}.{}", stringify!($field)), self.$field.render())); )*
            }
        }
    };
}

config_section!(
    /// Network architecture.
    ModelConfig {
        mode: AggregationMode = AggregationMode::Msea,
        fpm: FpmVariant = FpmVariant::Transposed,
        pooling: PoolingKind = PoolingKind::Gap,
        /// Stage indices 1..=4; stage `i` produces map `C_{i+1}`.
        stages: Vec<usize> = vec![2, 3, 4],
        embedding_dim: usize = 128,
        num_speakers: usize = 1211,
        stage_channels: Vec<usize> = vec![32, 64, 128, 256],
        stage_blocks: Vec<usize> = vec![3, 4, 6, 3],
        conv1_kernel: usize = 7,
        /// Width of the per-stage 1x1 projection in MSEA with GAP/SAP/stats pooling.
        proj_channels: usize = 512,
        lde_dim: usize = 64,
        lde_codewords: usize = 64,
        /// SAP attention width; 0 means the frame dimension.
        sap_hidden: usize = 0,
        pyramid_channels: usize = 32,
        fpm_smooth_bn_relu: bool = true,
        /// 4 gives kernel 4 / stride 2 / pad 1; 2 gives kernel 2 / stride 2 / pad 0.
        tc_kernel: usize = 4,
        upsample_align: Alignment = Alignment::HalfPixel,
        /// Kernel of the stride-2 conv that downsamples the lowest MSFA map (3 or 4, pad 1).
        msfa_down_kernel: usize = 4,
        msea_fc_relu: bool = false,
        bn_eps: f64 = 1e-5,
        bn_momentum: f64 = 0.1,
        init_seed: u64 = 0,
    }
);

config_section!(
    LossConfig {
        kind: LossKind = LossKind::Softmax,
        margin: u32 = 4,
        ring_weight: f64 = 0.01,
        /// Target-logit blend `max(min, base * (1 + gamma * iter)^-power)`.
        anneal_base: f64 = 1000.0,
        anneal_gamma: f64 = 0.12,
        anneal_power: f64 = 1.0,
        anneal_min: f64 = 5.0,
    }
);

config_section!(
    TrainConfig {
        batch_size: usize = 64,
        momentum: f64 = 0.9,
        weight_decay: f64 = 1e-4,
        lr: f64 = 0.1,
        epochs: usize = 30,
        seed: u64 = 1,
        crop_frames: usize = 300,
        /// Fractions of total epochs at which the learning rate drops.
        lr_decay_at: Vec<f64> = vec![0.5, 0.75],
        lr_decay_factor: f64 = 0.1,
        workers: usize = 1,
    }
);

config_section!(
    FrontendConfig {
        n_mels: usize = 64,
        frame_length_ms: f64 = 25.0,
        frame_shift_ms: f64 = 10.0,
        n_fft: usize = 512,
        fmin_hz: f64 = 20.0,
        /// 0 means the Nyquist frequency of the input.
        fmax_hz: f64 = 0.0,
        log_floor: f64 = 1e-10,
        norm_window_frames: usize = 300,
        vad_range_db: f64 = 40.0,
        vad_floor_db: f64 = -50.0,
    }
);

config_section!(
    CorpusConfig {
        num_speakers: usize = 20,
        utts_per_speaker: usize = 50,
        min_duration_s: f64 = 2.0,
        max_duration_s: f64 = 8.0,
        sample_rate: u32 = 16000,
        seed: u64 = 7,
    }
);

config_section!(
    EvalConfig {
        p_target: f64 = 0.01,
        c_miss: f64 = 1.0,
        c_fa: f64 = 1.0,
        enroll_duration: Duration = Duration::Full,
        durations: Vec<Duration> = vec![
            Duration::Seconds(1),
            Duration::Seconds(2),
            Duration::Seconds(3),
            Duration::Seconds(5),
            Duration::Full,
        ],
    }
);

/// Every knob of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub frontend: FrontendConfig,
    pub corpus: CorpusConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Set one dotted key such as `train.epochs`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("key {key:?} has no section")))?;
        let outcome = match section {
            "model" => self.model.set_key(field, value),
            "loss" => self.loss.set_key(field, value),
            "train" => self.train.set_key(field, value),
            "frontend" => self.frontend.set_key(field, value),
            "corpus" => self.corpus.set_key(field, value),
            "eval" => self.eval.set_key(field, value),
            _ => None,
        };
        match outcome {
            None => Err(Error::Config(format!("unknown key {key:?}"))),
            Some(Err(e)) => Err(Error::Config(format!("{key}: {e}"))),
            Some(Ok(())) => Ok(()),
        }
    }

    /// `(key, value)` pairs in canonical order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        self.model.render_keys("model", &mut out);
        self.loss.render_keys("loss", &mut out);
        self.train.render_keys("train", &mut out);
        self.frontend.render_keys("frontend", &mut out);
        self.corpus.render_keys("corpus", &mut out);
        self.eval.render_keys("eval", &mut out);
        out
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Apply `key=value` lines over the current values. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Apply overrides from variables named `FPMSV_<SECTION>_<FIELD>`.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        let keys: Vec<String> = self.entries().into_iter().map(|(k, _)| k).collect();
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let wanted = rest.to_ascii_lowercase();
            let key = keys
                .iter()
                .find(|k| k.replace('.', "_") == wanted)
                .ok_or_else(|| Error::Config(format!("environment override {name} matches no key")))?;
            self.set(&key.clone(), &value)?;
        }
        Ok(())
    }
}
