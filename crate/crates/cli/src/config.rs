//! Flat key/value run configuration, loaded from TOML and overridden from
//! the command line. Keys are documented in `docs/config.md`.

use serde::{Deserialize, Serialize};

use layerprune_core::engine::{AccelRunConfig, CalibrationSpec, PruneRunConfig};
use layerprune_core::importance::SimilarityFn;
use layerprune_core::model::ModelConfig;
use layerprune_core::scheduler::LrConfig;
use layerprune_core::train::{AdamWConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub corpus: String,
    pub corpus_seed: u64,
    pub eval_fraction: f64,

    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_channels: usize,
    pub max_seq_len: usize,

    pub batch_size: usize,
    pub seq_len: usize,
    pub train_steps: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_frac: f64,
    pub decay_frac: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,

    pub sparsity: f64,
    pub iterations: usize,
    pub amplitude: f64,
    pub sim_fn: String,
    pub calibration_sequences: usize,
    pub calibration_max_len: usize,
    pub calibration_seed: u64,

    pub interleaves: usize,
    /// Absolute parameter target; 0 means `target_ratio` of the source.
    pub target_params: usize,
    pub target_ratio: f64,
    /// Cap on training tokens used by `accel`; 0 means the whole training split.
    pub accel_tokens: usize,
    pub shuffle_block: usize,

    pub eval_max_len: usize,
    /// Cap on evaluation tokens; 0 means the whole evaluation split.
    pub eval_tokens: usize,
    pub sensitivity_sparsity: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: "synthetic:2000000".into(),
            corpus_seed: 0,
            eval_fraction: 0.05,
            hidden: 32,
            layers: 4,
            heads: 4,
            mlp_channels: 64,
            max_seq_len: 64,
            batch_size: 8,
            seq_len: 64,
            train_steps: 200,
            lr: 3e-3,
            min_lr: 3e-4,
            warmup_frac: 0.05,
            decay_frac: 0.10,
            weight_decay: 0.01,
            grad_clip: 1.0,
            sparsity: 0.4,
            iterations: 10,
            amplitude: 0.02,
            sim_fn: "cosine".into(),
            calibration_sequences: 512,
            calibration_max_len: 64,
            calibration_seed: 0,
            interleaves: 8,
            target_params: 0,
            target_ratio: 0.5,
            accel_tokens: 0,
            shuffle_block: 4096,
            eval_max_len: 64,
            eval_tokens: 0,
            sensitivity_sparsity: 0.5,
        }
    }
}

/// A configuration problem, always naming the offending key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config field `{}`: {}", self.field, self.reason)
    }
}

fn bad<T>(field: &str, reason: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError {
        field: field.into(),
        reason: reason.into(),
    })
}

/// Parses `key=value`; values that are not valid TOML are taken as strings.
pub fn parse_override(s: &str) -> Result<(String, toml::Value), ConfigError> {
    let Some((k, v)) = s.split_once('=') else {
        return bad(s, "override must look like key=value");
    };
    let (k, v) = (k.trim(), v.trim());
    let value = match toml::from_str::<toml::Table>(&format!("v = {v}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(v.to_string()),
    };
    Ok((k.to_string(), value))
}

impl RunConfig {
    /// Defaults, then the optional TOML file, then overrides in order.
    pub fn build(file: Option<&str>, overrides: &[(String, toml::Value)]) -> Result<Self, ConfigError> {
        let known = match toml::Value::try_from(RunConfig::default()) {
            Ok(toml::Value::Table(t)) => t,
            _ => unreachable!("config serializes to a table"),
        };
        let mut table = known.clone();
        let mut apply = |k: &str, v: toml::Value| -> Result<(), ConfigError> {
            let Some(default) = known.get(k) else {
                return bad(k, "unknown key");
            };
            // integers are accepted where floats are expected
            let v = match (default, v) {
                (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                (_, v) => v,
            };
            if default.type_str() != v.type_str() {
                return bad(k, format!("expected {}, got {}", default.type_str(), v.type_str()));
            }
            table.insert(k.to_string(), v);
            Ok(())
        };
        if let Some(text) = file {
            let parsed: toml::Table = toml::from_str(text).map_err(|e| ConfigError {
                field: "config".into(),
                reason: e.to_string(),
            })?;
            for (k, v) in parsed {
                apply(&k, v)?;
            }
        }
        for (k, v) in overrides {
            apply(k, v.clone())?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| ConfigError {
            field: "config".into(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let unit_open = |f: &str, x: f64| {
            if x > 0.0 && x < 1.0 {
                Ok(())
            } else {
                bad(f, format!("{x} is outside (0, 1)"))
            }
        };
        unit_open("sparsity", self.sparsity)?;
        unit_open("sensitivity_sparsity", self.sensitivity_sparsity)?;
        unit_open("eval_fraction", self.eval_fraction)?;
        unit_open("target_ratio", self.target_ratio)?;
        for (f, v) in [
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("heads", self.heads),
            ("mlp_channels", self.mlp_channels),
            ("max_seq_len", self.max_seq_len),
            ("batch_size", self.batch_size),
            ("seq_len", self.seq_len),
            ("iterations", self.iterations),
            ("interleaves", self.interleaves),
            ("calibration_sequences", self.calibration_sequences),
            ("shuffle_block", self.shuffle_block),
        ] {
            if v == 0 {
                return bad(f, "must be positive");
            }
        }
        if self.layers < 2 {
            return bad("layers", "at least 2 layers are needed to compare importance");
        }
        if self.seq_len > self.max_seq_len {
            return bad("seq_len", format!("{} exceeds max_seq_len {}", self.seq_len, self.max_seq_len));
        }
        if self.eval_max_len < 2 || self.eval_max_len - 1 > self.max_seq_len {
            return bad("eval_max_len", format!("must be in [2, max_seq_len + 1], got {}", self.eval_max_len));
        }
        if self.calibration_max_len < 2 || self.calibration_max_len > self.max_seq_len {
            return bad("calibration_max_len", "must be in [2, max_seq_len]");
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return bad("amplitude", format!("{} must be a finite non-negative number", self.amplitude));
        }
        if !(self.lr >= 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return bad("min_lr", "need 0 <= min_lr <= lr");
        }
        if !(self.warmup_frac >= 0.0 && self.decay_frac >= 0.0 && self.warmup_frac + self.decay_frac < 1.0) {
            return bad("warmup_frac", "warmup_frac + decay_frac must be below 1");
        }
        if self.sim_fn.parse::<SimilarityFn>().is_err() {
            return bad("sim_fn", format!("unknown similarity {:?} (cosine, euclidean, manhattan)", self.sim_fn));
        }
        if self.corpus.is_empty() {
            return bad("corpus", "must name a file, directory or synthetic:<bytes>");
        }
        self.model_config().map(|_| ())
    }

    pub fn model_config(&self) -> Result<ModelConfig, ConfigError> {
        ModelConfig::uniform(
            layerprune_core::data::VOCAB_SIZE,
            self.hidden,
            self.layers,
            self.heads,
            self.mlp_channels,
            self.max_seq_len,
        )
        .map_err(|e| match e {
            layerprune_core::Error::Config { field, reason } => ConfigError {
                field: field.into(),
                reason,
            },
            other => ConfigError {
                field: "model".into(),
                reason: other.to_string(),
            },
        })
    }

    pub fn similarity(&self) -> SimilarityFn {
        self.sim_fn.parse().unwrap_or_default()
    }

    pub fn calibration(&self) -> CalibrationSpec {
        CalibrationSpec {
            sequences: self.calibration_sequences,
            max_len: self.calibration_max_len,
            seed: self.calibration_seed,
        }
    }

    pub fn lr_config(&self) -> LrConfig {
        LrConfig {
            max_lr: self.lr,
            min_lr: self.min_lr,
            warmup_frac: self.warmup_frac,
            decay_frac: self.decay_frac,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            seq_len: self.seq_len,
            seed: self.seed,
            optimizer: AdamWConfig {
                weight_decay: self.weight_decay,
                grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
                ..AdamWConfig::default()
            },
        }
    }

    pub fn prune_config(&self) -> PruneRunConfig {
        PruneRunConfig {
            sparsity: self.sparsity,
            iterations: self.iterations,
            amplitude: self.amplitude,
            sim_fn: self.similarity(),
            calibration: self.calibration(),
            seed: self.seed,
        }
    }

    pub fn accel_config(&self, source_params: usize) -> AccelRunConfig {
        let target = if self.target_params > 0 {
            self.target_params
        } else {
            (self.target_ratio * source_params as f64).round() as usize
        };
        AccelRunConfig {
            target_params: target,
            interleaves: self.interleaves,
            amplitude: self.amplitude,
            sim_fn: self.similarity(),
            calibration: self.calibration(),
            train: self.train_config(),
            lr: self.lr_config(),
            shuffle_block: self.shuffle_block,
            seed: self.seed,
        }
    }
}
