//! Run settings. Every key can come from a `key=value` config file or from
//! the matching `--key` flag (underscores become dashes). Flags win over the
//! file, the file wins over the defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mpq_core::admm::{AdmmConfig, AlphaInit};
use mpq_core::corpus::TokenMode;
use mpq_core::model::{ModelKind, ModelSpec, TieGranularity};
use mpq_core::nas::SearchConfig;
use mpq_core::quant::BIT_WIDTHS;
use mpq_core::sensitivity::{HutchinsonConfig, Method, Probe, SampleSpec};
use mpq_core::solver::BudgetSpec;
use mpq_core::train::TrainConfig;
use mpq_core::{Error, Result};

pub trait SettingValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl SettingValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse::<$t>().map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(usize, u64, u8, f64, bool, String);

impl SettingValue for PathBuf {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl<T: SettingValue> SettingValue for Option<T> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() || s == "none" {
            Ok(None)
        } else {
            T::parse_value(s).map(Some)
        }
    }
    fn render(&self) -> String {
        self.as_ref().map_or_else(|| "none".to_string(), T::render)
    }
}

macro_rules! settings {
    ($( $(#[doc = $doc:literal])* $field:ident : $ty:ty = $default:expr ; )*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct Settings {
            $( $(#[doc = $doc])* pub $field: $ty, )*
        }

        impl Default for Settings {
            fn default() -> Self {
                Settings { $( $field: $default, )* }
            }
        }

        impl Settings {
            pub const KEYS: &'static [&'static str] = &[$( stringify!($field) ),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($field) => {
                        self.$field = <$ty as SettingValue>::parse_value(value)
                            .map_err(|e| Error::config(format!("{key}={value:?}: {e}")))?;
                    } )*
                    _ => return Err(Error::config(format!("unknown setting {key:?}"))),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $( stringify!($field) => Some(SettingValue::render(&self.$field)), )*
                    _ => None,
                }
            }
        }

        #[derive(clap::Args, Debug, Clone, Default)]
        pub struct Overrides {
            $( $(#[doc = $doc])* #[arg(long, global = true, value_name = "VALUE")] pub $field: Option<String>, )*
        }

        impl Overrides {
            pub fn pairs(&self) -> Vec<(&'static str, String)> {
                let mut out = Vec::new();
                $( if let Some(v) = &self.$field { out.push((stringify!($field), v.clone())); } )*
                out
            }
        }
    };
}

settings! {
    /// Training text, one document per line.
    train_text: Option<PathBuf> = None;
    /// Validation text; without it the last lines of the training text are held out.
    valid_text: Option<PathBuf> = None;
    /// Fraction of training lines held out when no validation text is given.
    valid_fraction: f64 = 0.1;
    /// Vocabulary file, one token per line.
    vocab: Option<PathBuf> = None;
    /// word | char
    tokenizer: String = "word".into();
    max_vocab: Option<usize> = Some(5000);
    min_count: usize = 1;
    /// lstm | transformer
    model_kind: String = "lstm".into();
    embed_dim: usize = 64;
    hidden_dim: usize = 64;
    num_layers: usize = 2;
    num_heads: usize = 2;
    max_context: usize = 32;
    /// Feed-forward width; none means four times the hidden width.
    ff_dim: Option<usize> = None;
    /// layer | node
    tie: String = "layer".into();
    seed: u64 = 0;
    batch_size: usize = 32;
    epochs: usize = 10;
    lr: f64 = 3e-3;
    clip_norm: Option<f64> = Some(5.0);
    /// Validation plateaus before stopping; each one halves the learning rate.
    train_patience: usize = 2;
    /// Admissible bit-widths; only 1,2,4,8 is supported.
    bit_widths: String = "1,2,4,8".into();
    bits: Option<u8> = None;
    /// admm | modbp | offline
    quant_method: String = "admm".into();
    gamma: f64 = 1e-3;
    eta1: f64 = 0.02;
    eta2: f64 = 0.001;
    max_outer: usize = 20;
    max_inner: usize = 20;
    inner_tol: f64 = 1e-9;
    /// auto or a positive number.
    alpha_init: String = "auto".into();
    /// Minibatch steps per outer iteration; none means one epoch.
    steps_per_outer: Option<usize> = None;
    admm_patience: usize = 3;
    divergence_factor: f64 = 10.0;
    admm_clip: Option<f64> = None;
    modbp_lr: f64 = 0.02;
    /// kl | hes
    sens_method: String = "kl".into();
    /// Sensitivity minibatches: a count or all.
    batches: String = "1".into();
    sens_batch_size: usize = 32;
    /// Hutchinson probes per cluster.
    hutchinson_samples: usize = 50;
    /// rademacher | gaussian
    probe: String = "rademacher".into();
    /// Target average bits for the assignment solver.
    budget: f64 = 2.0;
    /// nearest | cap
    budget_mode: String = "nearest".into();
    /// Target average bits for the architecture search.
    beta_target: f64 = 2.0;
    nas_steps: usize = 2000;
    nas_lr: f64 = 0.01;
    bisect_steps: usize = 8;
    sample_lines: usize = 4000;
    /// Full-precision checkpoint.
    checkpoint: Option<PathBuf> = None;
    /// Comma-separated uniform prototypes.
    prototypes: Option<String> = None;
    report: Option<PathBuf> = None;
    assignment: Option<PathBuf> = None;
    model: Option<PathBuf> = None;
    text: Option<PathBuf> = None;
    out: Option<PathBuf> = None;
}

impl Settings {
    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("config line {}: expected key=value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Defaults, then the config file, then flag overrides.
    pub fn resolve(config: Option<&Path>, overrides: &[(&str, String)]) -> Result<Settings> {
        let mut s = Settings::default();
        if let Some(path) = config {
            let text = std::fs::read_to_string(path)?;
            s.apply_text(&text)?;
        }
        for (k, v) in overrides {
            s.set(k, v)?;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in Self::KEYS {
            let _ = writeln!(out, "{k}={}", self.get(k).expect("listed key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let widths: Vec<u8> = self
            .bit_widths
            .split(',')
            .map(|w| w.trim().parse::<u8>().map_err(|_| Error::config(format!("bad bit width {w:?}"))))
            .collect::<Result<_>>()?;
        if widths != BIT_WIDTHS {
            return Err(Error::config(format!("bit_widths must be 1,2,4,8, got {}", self.bit_widths)));
        }
        if !(self.valid_fraction > 0.0 && self.valid_fraction < 1.0) {
            return Err(Error::config("valid_fraction must lie in (0, 1)"));
        }
        if !matches!(self.quant_method.as_str(), "admm" | "modbp" | "offline") {
            return Err(Error::config(format!("quant_method must be admm, modbp or offline, got {:?}", self.quant_method)));
        }
        self.token_mode()?;
        self.admm()?;
        self.method()?;
        self.sample()?;
        self.hutchinson()?;
        self.budget_spec()?;
        self.model_kind.parse::<ModelKind>()?;
        self.tie.parse::<TieGranularity>()?;
        Ok(())
    }

    pub fn require<'a, T>(&self, value: &'a Option<T>, key: &str) -> Result<&'a T> {
        value.as_ref().ok_or_else(|| Error::config(format!("missing setting {key} (--{})", key.replace('_', "-"))))
    }

    pub fn token_mode(&self) -> Result<TokenMode> {
        self.tokenizer.parse()
    }

    pub fn model_spec(&self, vocab_size: usize) -> Result<ModelSpec> {
        let kind: ModelKind = self.model_kind.parse()?;
        let mut spec = match kind {
            ModelKind::Lstm => ModelSpec::lstm(vocab_size, self.hidden_dim, self.num_layers),
            ModelKind::Transformer => ModelSpec::transformer(vocab_size, self.hidden_dim, self.num_layers, self.num_heads),
        };
        spec.embed_dim = self.embed_dim;
        spec.max_context = self.max_context;
        if kind == ModelKind::Transformer {
            spec.ff_dim = self.ff_dim.unwrap_or(4 * self.hidden_dim);
        }
        spec.tie_granularity = self.tie.parse()?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed: self.seed,
            clip_norm: self.clip_norm,
            patience: self.train_patience,
        }
    }

    pub fn admm(&self) -> Result<AdmmConfig> {
        let cfg = AdmmConfig {
            gamma: self.gamma,
            eta1: self.eta1,
            eta2: self.eta2,
            max_outer: self.max_outer,
            max_inner: self.max_inner,
            inner_tol: self.inner_tol,
            batch_size: self.batch_size,
            seed: self.seed,
            alpha_init: self.alpha_init.parse::<AlphaInit>()?,
            steps_per_outer: self.steps_per_outer,
            patience: self.admm_patience,
            divergence_factor: self.divergence_factor,
            clip_norm: self.admm_clip,
            modbp_lr: self.modbp_lr,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn method(&self) -> Result<Method> {
        self.sens_method.parse()
    }

    pub fn sample(&self) -> Result<SampleSpec> {
        let num_batches = match self.batches.as_str() {
            "all" => None,
            k => Some(
                k.parse::<usize>()
                    .ok()
                    .filter(|k| *k > 0)
                    .ok_or_else(|| Error::config(format!("batches must be a positive count or \"all\", got {k:?}")))?,
            ),
        };
        Ok(SampleSpec { num_batches, batch_size: self.sens_batch_size, seed: self.seed })
    }

    pub fn hutchinson(&self) -> Result<HutchinsonConfig> {
        let probe: Probe = self.probe.parse()?;
        if probe == Probe::Basis {
            return Err(Error::config("probe must be rademacher or gaussian"));
        }
        if self.hutchinson_samples == 0 {
            return Err(Error::config("hutchinson_samples must be >= 1"));
        }
        Ok(HutchinsonConfig { samples: self.hutchinson_samples, probe, eps: None })
    }

    pub fn budget_spec(&self) -> Result<BudgetSpec> {
        let hard_cap = match self.budget_mode.as_str() {
            "nearest" => false,
            "cap" => true,
            m => return Err(Error::config(format!("budget_mode must be nearest or cap, got {m:?}"))),
        };
        let b = BudgetSpec { target_avg_bits: self.budget, hard_cap };
        b.validate()?;
        Ok(b)
    }

    pub fn search(&self) -> SearchConfig {
        SearchConfig { steps: self.nas_steps, lr: self.nas_lr, batch_size: self.batch_size, seed: self.seed, log_every: 100 }
    }

    pub fn prototype_paths(&self) -> Result<Vec<PathBuf>> {
        let list = self.require(&self.prototypes, "prototypes")?;
        let paths: Vec<PathBuf> = list.split(',').map(str::trim).filter(|p| !p.is_empty()).map(PathBuf::from).collect();
        if paths.is_empty() {
            return Err(Error::config("prototypes list is empty"));
        }
        Ok(paths)
    }
}
