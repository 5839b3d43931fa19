//! Run configuration: a flat `key=value` file plus command-line overrides.
//!
//! The canonical text form lists every key in a fixed order; without the
//! file paths it is what gets hashed into report provenance and stored in
//! checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use stunet_core::data::{DiffusionOperator, SplitFractions};
use stunet_core::sampling::UnpoolMode;
use stunet_core::train::TrainConfig;
use stunet_core::{LambdaMax, Reduce, StunetConfig, Variant};

use crate::error::{Error, Result};
use crate::io::AdjacencyFormat;

/// Parameters of the `synth` subcommand.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub rows: usize,
    pub cols: usize,
    pub steps: usize,
    pub alpha: f64,
    pub noise: f64,
    pub features: usize,
    pub operator: DiffusionOperator,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            rows: 4,
            cols: 8,
            steps: 2000,
            alpha: 0.6,
            noise: 0.05,
            features: 1,
            operator: DiffusionOperator::RandomWalk,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: StunetConfig,
    pub train: TrainConfig,
    pub seed: u64,
    /// Seeds of the multi-seed comparisons.
    pub seeds: Vec<u64>,
    pub variant: Option<Variant>,
    pub horizons: Vec<usize>,
    pub interval_minutes: Option<f64>,
    pub period: Option<usize>,
    pub split: SplitFractions,
    pub mape_threshold: f64,
    pub adj: Option<PathBuf>,
    pub adj_format: AdjacencyFormat,
    /// Node count for edge lists whose highest-numbered nodes are isolated.
    pub nodes: Option<usize>,
    pub series: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub level: usize,
    pub synth: SynthParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: StunetConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            variant: None,
            horizons: vec![3, 6, 12],
            interval_minutes: None,
            period: None,
            split: SplitFractions::default(),
            mape_threshold: 1e-3,
            adj: None,
            adj_format: AdjacencyFormat::DenseCsv,
            nodes: None,
            series: None,
            ckpt: None,
            out: None,
            level: 1,
            synth: SynthParams::default(),
        }
    }
}

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> Error {
    Error::Config {
        key: key.to_string(),
        message: format!("invalid value '{value}': {why}"),
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e| bad(key, value, e))
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match value.trim() {
        "none" | "" => Ok(None),
        v => num(key, v).map(Some),
    }
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        v => Err(bad(key, v, "expected true or false")),
    }
}

fn path(value: &str) -> Option<PathBuf> {
    match value.trim() {
        "" | "none" => None,
        v => Some(PathBuf::from(v)),
    }
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn show<T: std::fmt::Display>(x: &Option<T>) -> String {
    x.as_ref().map_or_else(|| "none".to_string(), ToString::to_string)
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

fn operator_name(op: DiffusionOperator) -> &'static str {
    match op {
        DiffusionOperator::RandomWalk => "random_walk",
        DiffusionOperator::Symmetric => "symmetric",
    }
}

impl RunConfig {
    /// Reads a config file. Blank lines and lines starting with `#` are
    /// skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text).map_err(|e| match e {
            Error::Config { key, message } => Error::Config {
                key: format!("{}: {key}", path.display()),
                message,
            },
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.set_pair(line)?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let Some((key, value)) = pair.split_once('=') else {
            return Err(Error::Config {
                key: pair.to_string(),
                message: "expected key=value".into(),
            });
        };
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "order" => m.order = num(key, value)?,
            "pool_level" => m.pool_level = num(key, value)?,
            "dilation" => m.dilation = num(key, value)?,
            "hidden" => m.hidden = list(key, value)?,
            "pool_mode" => {
                m.pool_mode = match value {
                    "max" => Reduce::Max,
                    "mean" => Reduce::Mean,
                    v => return Err(bad(key, v, "expected max or mean")),
                }
            }
            "unpool" => m.unpool = value.parse::<UnpoolMode>().map_err(|e| bad(key, value, e))?,
            "layer_norm" => m.layer_norm = flag(key, value)?,
            "input_len" => m.input_len = num(key, value)?,
            "horizon" => m.horizon = num(key, value)?,
            "input_dim" => m.input_dim = num(key, value)?,
            "output_dim" => m.output_dim = num(key, value)?,
            "lambda_max" => {
                m.lambda_max = match value {
                    "estimate" => LambdaMax::Estimate,
                    v => LambdaMax::Fixed(num(key, v)?),
                }
            }
            "epochs" => t.epochs = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "learning_rate" => t.learning_rate = num(key, value)?,
            "lr_decay" => t.lr_decay = num(key, value)?,
            "decay_every" => t.decay_every = num(key, value)?,
            "clip_norm" => t.clip_norm = optional(key, value)?,
            "forcing_tau" => t.forcing_tau = optional(key, value)?,
            "shuffle" => t.shuffle = flag(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "seeds" => self.seeds = list(key, value)?,
            "variant" => {
                self.variant = match value {
                    "none" | "" => None,
                    v => Some(v.parse().map_err(|e| bad(key, v, e))?),
                }
            }
            "horizons" => self.horizons = list(key, value)?,
            "interval_minutes" => self.interval_minutes = optional(key, value)?,
            "period" => self.period = optional(key, value)?,
            "split" => {
                let parts: Vec<f64> = list(key, value)?;
                let [train, val, test] = parts[..] else {
                    return Err(bad(key, value, "expected train,val,test fractions"));
                };
                self.split = SplitFractions { train, val, test };
            }
            "mape_threshold" => self.mape_threshold = num(key, value)?,
            "adj" => self.adj = path(value),
            "adj_format" => self.adj_format = value.parse().map_err(|e| bad(key, value, e))?,
            "nodes" => self.nodes = optional(key, value)?,
            "series" => self.series = path(value),
            "ckpt" => self.ckpt = path(value),
            "out" => self.out = path(value),
            "level" => self.level = num(key, value)?,
            "synth.rows" => self.synth.rows = num(key, value)?,
            "synth.cols" => self.synth.cols = num(key, value)?,
            "synth.steps" => self.synth.steps = num(key, value)?,
            "synth.alpha" => self.synth.alpha = num(key, value)?,
            "synth.noise" => self.synth.noise = num(key, value)?,
            "synth.features" => self.synth.features = num(key, value)?,
            "synth.operator" => {
                self.synth.operator = match value {
                    "random_walk" => DiffusionOperator::RandomWalk,
                    "symmetric" => DiffusionOperator::Symmetric,
                    v => return Err(bad(key, v, "expected random_walk or symmetric")),
                }
            }
            _ => {
                return Err(Error::Config {
                    key: key.to_string(),
                    message: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    /// Every key in a fixed order. Floats use Rust's shortest round-trip
    /// formatting, so `apply_text(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        self.render(true)
    }

    /// Like [`RunConfig::to_text`] without the file locations. This is what
    /// checkpoints store and reports hash, so moving a run elsewhere does
    /// not change its identity.
    pub fn settings_text(&self) -> String {
        self.render(false)
    }

    fn render(&self, with_paths: bool) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("order", m.order.to_string());
        kv("pool_level", m.pool_level.to_string());
        kv("dilation", m.dilation.to_string());
        kv("hidden", join(&m.hidden));
        kv(
            "pool_mode",
            match m.pool_mode {
                Reduce::Max => "max",
                Reduce::Mean => "mean",
            }
            .into(),
        );
        kv("unpool", m.unpool.name().into());
        kv("layer_norm", m.layer_norm.to_string());
        kv("input_len", m.input_len.to_string());
        kv("horizon", m.horizon.to_string());
        kv("input_dim", m.input_dim.to_string());
        kv("output_dim", m.output_dim.to_string());
        kv(
            "lambda_max",
            match m.lambda_max {
                LambdaMax::Estimate => "estimate".into(),
                LambdaMax::Fixed(v) => v.to_string(),
            },
        );
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("learning_rate", t.learning_rate.to_string());
        kv("lr_decay", t.lr_decay.to_string());
        kv("decay_every", t.decay_every.to_string());
        kv("clip_norm", show(&t.clip_norm));
        kv("forcing_tau", show(&t.forcing_tau));
        kv("shuffle", t.shuffle.to_string());
        kv("seed", self.seed.to_string());
        kv("seeds", join(&self.seeds));
        kv("variant", show(&self.variant));
        kv("horizons", join(&self.horizons));
        kv("interval_minutes", show(&self.interval_minutes));
        kv("period", show(&self.period));
        kv("split", format!("{},{},{}", self.split.train, self.split.val, self.split.test));
        kv("mape_threshold", self.mape_threshold.to_string());
        if with_paths {
            kv("adj", show_path(&self.adj));
        }
        kv("adj_format", self.adj_format.to_string());
        kv("nodes", show(&self.nodes));
        if with_paths {
            kv("series", show_path(&self.series));
            kv("ckpt", show_path(&self.ckpt));
            kv("out", show_path(&self.out));
        }
        kv("level", self.level.to_string());
        kv("synth.rows", self.synth.rows.to_string());
        kv("synth.cols", self.synth.cols.to_string());
        kv("synth.steps", self.synth.steps.to_string());
        kv("synth.alpha", self.synth.alpha.to_string());
        kv("synth.noise", self.synth.noise.to_string());
        kv("synth.features", self.synth.features.to_string());
        kv("synth.operator", operator_name(self.synth.operator).into());
        s
    }

    /// SHA-256 of [`RunConfig::settings_text`], hex encoded.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.settings_text().as_bytes()))
    }

    /// Model config with the variant (if any) applied and the run seed.
    pub fn effective_model(&self) -> StunetConfig {
        let base = StunetConfig {
            seed: self.seed,
            ..self.model.clone()
        };
        match self.variant {
            Some(v) => v.apply(&base),
            None => base,
        }
    }

    pub fn effective_train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.effective_model().validate()?;
        self.effective_train().validate()?;
        if self.horizons.is_empty() || self.horizons.iter().any(|&h| h == 0 || h > self.model.horizon) {
            return Err(Error::Config {
                key: "horizons".into(),
                message: format!("every horizon must be in 1..={}", self.model.horizon),
            });
        }
        Ok(())
    }

    /// Fetches a required path, naming the flag when it is missing.
    pub fn require<'a>(&self, p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        p.as_deref().ok_or_else(|| Error::Config {
            key: key.to_string(),
            message: format!("missing; pass --{key} or set {key}= in the config"),
        })
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set_pair("hidden=8,16").unwrap();
        c.set_pair("lambda_max=2").unwrap();
        c.set_pair("variant=T-UNet").unwrap();
        c.set_pair("adj_format=distance_gaussian:0.5:0.1").unwrap();
        c.set_pair("interval_minutes=5").unwrap();
        let mut d = RunConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
        assert_eq!(c.hash(), d.hash());
        assert_ne!(c.hash(), RunConfig::default().hash());
        d.set("out", "/elsewhere").unwrap();
        assert_eq!(c.hash(), d.hash());
    }

    #[test]
    fn unknown_key_and_bad_value_name_the_field() {
        let mut c = RunConfig::default();
        let e = c.set_pair("colour=red").unwrap_err().to_string();
        assert!(e.contains("colour"), "{e}");
        let e = c.set_pair("epochs=many").unwrap_err().to_string();
        assert!(e.contains("epochs"), "{e}");
    }

    #[test]
    fn variant_is_applied() {
        let mut c = RunConfig::default();
        c.set("variant", "GCGRU").unwrap();
        let m = c.effective_model();
        assert_eq!((m.pool_level, m.dilation), (0, 1));
    }
}
