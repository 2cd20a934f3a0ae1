//! Experiment configuration: a flat text format of dotted keys
//! (`training.lambda=0.1`), with the same keys usable as command-line
//! overrides. Unknown keys are rejected, and a parsed config with all
//! defaults filled can be written back out and re-parsed to the identical
//! configuration.

use crate::env::{EnvConfig, Variant};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelVariant};
use crate::selectivity::SelectivityMode;
use crate::train::{Estimator, TrainConfig};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Number of probe states metrics are averaged over.
    pub probe_set_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { probe_set_size: 256 }
    }
}

/// Everything one experiment needs, with defaults reproducing the basic
/// (shared-parameter) setup.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    pub env: EnvConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            output_dir: PathBuf::from("out"),
            env: EnvConfig::default(),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, ctx: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{ctx}: bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str, ctx: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "{ctx}: bad value `{value}` for `{key}` (expected true|false)"
        ))),
    }
}

impl ExperimentConfig {
    /// Set one dotted key. `ctx` names the source (file line or flag) for
    /// error messages.
    pub fn set(&mut self, key: &str, value: &str, ctx: &str) -> Result<()> {
        match key {
            "name" => self.name = value.to_string(),
            "output_dir" => self.output_dir = PathBuf::from(value),

            "env.variant" => self.env.variant = Variant::parse(value)?,
            "env.grid_height" => self.env.grid_height = parse_num(key, value, ctx)?,
            "env.grid_width" => self.env.grid_width = parse_num(key, value, ctx)?,
            "env.square_size" => self.env.square_size = parse_num(key, value, ctx)?,
            "env.color_step" => self.env.color_step = parse_num(key, value, ctx)?,
            "env.color_min" => self.env.color_min = parse_num(key, value, ctx)?,
            "env.color_max" => self.env.color_max = parse_num(key, value, ctx)?,
            "env.seed" => self.env.seed = parse_num(key, value, ctx)?,

            "model.variant" => self.model.variant = ModelVariant::parse(value)?,
            "model.latent" => self.model.latent = parse_num(key, value, ctx)?,
            "model.hidden" => self.model.hidden = parse_num(key, value, ctx)?,
            "model.conv_channels" => self.model.conv_channels = parse_num(key, value, ctx)?,
            "model.allow_variant_mismatch" => {
                self.model.allow_variant_mismatch = parse_bool(key, value, ctx)?
            }

            "selectivity.mode" => self.training.mode = SelectivityMode::parse(value)?,
            "selectivity.denom_epsilon" => {
                self.training.denom_epsilon = parse_num(key, value, ctx)?
            }
            "selectivity.log_floor_epsilon" => {
                self.training.log_floor_epsilon = parse_num(key, value, ctx)?
            }

            "training.steps" => self.training.steps = parse_num(key, value, ctx)?,
            "training.eta_f" => self.training.eta_f = parse_num(key, value, ctx)?,
            "training.eta_g" => self.training.eta_g = parse_num(key, value, ctx)?,
            "training.eta_k" => self.training.eta_k = parse_num(key, value, ctx)?,
            "training.lambda" => self.training.lambda = parse_num(key, value, ctx)?,
            "training.estimator" => self.training.estimator = Estimator::parse(value)?,
            "training.reinforce_samples" => {
                self.training.reinforce_samples = parse_num(key, value, ctx)?
            }
            "training.seed" => self.training.seed = parse_num(key, value, ctx)?,
            "training.eval_interval" => self.training.eval_interval = parse_num(key, value, ctx)?,
            "training.batch_size" => self.training.batch_size = parse_num(key, value, ctx)?,
            "training.aggregate_feature_updates" => {
                self.training.aggregate_feature_updates = parse_bool(key, value, ctx)?
            }
            "training.detach_policy_trunk" => {
                self.training.detach_policy_trunk = parse_bool(key, value, ctx)?
            }

            "eval.probe_set_size" => self.eval.probe_set_size = parse_num(key, value, ctx)?,

            _ => {
                return Err(Error::UnknownKey {
                    key: key.to_string(),
                    context: Some(ctx.to_string()),
                })
            }
        }
        Ok(())
    }

    /// Parse the flat `key=value` format. Empty files and comment lines
    /// (`#`) are fine; every present key must be known.
    pub fn parse_str(text: &str, source: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let ctx = format!("{source}:{}", i + 1);
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{ctx}: expected key=value, got `{line}`")))?;
            cfg.set(key.trim(), value.trim(), &ctx)?;
        }
        Ok(cfg)
    }

    pub fn parse_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text, &path.display().to_string())
    }

    /// Apply `--key value` style overrides on top of the parsed file.
    pub fn apply_overrides(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (key, value) in pairs {
            self.set(key, value, &format!("--{key}"))?;
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order. Parsing the
    /// snapshot reproduces this configuration exactly.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").unwrap();
        kv("name", self.name.clone());
        kv("output_dir", self.output_dir.display().to_string());
        kv("env.variant", self.env.variant.as_str().into());
        kv("env.grid_height", self.env.grid_height.to_string());
        kv("env.grid_width", self.env.grid_width.to_string());
        kv("env.square_size", self.env.square_size.to_string());
        kv("env.color_step", format!("{}", self.env.color_step));
        kv("env.color_min", format!("{}", self.env.color_min));
        kv("env.color_max", format!("{}", self.env.color_max));
        kv("env.seed", self.env.seed.to_string());
        kv("model.variant", self.model.variant.as_str().into());
        kv("model.latent", self.model.latent.to_string());
        kv("model.hidden", self.model.hidden.to_string());
        kv("model.conv_channels", self.model.conv_channels.to_string());
        kv(
            "model.allow_variant_mismatch",
            self.model.allow_variant_mismatch.to_string(),
        );
        kv("selectivity.mode", self.training.mode.as_str().into());
        kv(
            "selectivity.denom_epsilon",
            format!("{}", self.training.denom_epsilon),
        );
        kv(
            "selectivity.log_floor_epsilon",
            format!("{}", self.training.log_floor_epsilon),
        );
        kv("training.steps", self.training.steps.to_string());
        kv("training.eta_f", format!("{}", self.training.eta_f));
        kv("training.eta_g", format!("{}", self.training.eta_g));
        kv("training.eta_k", format!("{}", self.training.eta_k));
        kv("training.lambda", format!("{}", self.training.lambda));
        kv("training.estimator", self.training.estimator.as_str().into());
        kv(
            "training.reinforce_samples",
            self.training.reinforce_samples.to_string(),
        );
        kv("training.seed", self.training.seed.to_string());
        kv(
            "training.eval_interval",
            self.training.eval_interval.to_string(),
        );
        kv("training.batch_size", self.training.batch_size.to_string());
        kv(
            "training.aggregate_feature_updates",
            self.training.aggregate_feature_updates.to_string(),
        );
        kv(
            "training.detach_policy_trunk",
            self.training.detach_policy_trunk.to_string(),
        );
        kv("eval.probe_set_size", self.eval.probe_set_size.to_string());
        s
    }

    /// Structural constraints beyond per-key parsing.
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.training.validate()?;
        if self.eval.probe_set_size == 0 {
            return Err(Error::Config("eval.probe_set_size must be positive".into()));
        }
        let compatible = matches!(
            (self.model.variant, self.env.variant),
            (ModelVariant::Shared, Variant::Basic) | (ModelVariant::Separate, Variant::Extended)
        );
        if !compatible && !self.model.allow_variant_mismatch {
            return Err(Error::Config(format!(
                "model variant `{}` pairs with env variant `{}` by default; \
                 set model.allow_variant_mismatch=true to override",
                self.model.variant.as_str(),
                match self.model.variant {
                    ModelVariant::Shared => "basic",
                    ModelVariant::Separate => "extended",
                }
            )));
        }
        Ok(())
    }
}
