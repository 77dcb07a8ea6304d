//! Plain-text experiment configuration.
//!
//! The format is INI-style: `[section]` headers followed by `key = value`
//! lines, with full-line comments starting with `#` or `;`. Five sections are
//! recognized — `[dataset]`, `[net]`, `[train]`, `[attacks]`, and `[run]` —
//! and every key inside them is checked against the schema below; unknown
//! sections, unknown keys, and duplicate keys are errors that name the
//! offender and its line. An empty file yields the full default
//! configuration.
//!
//! Numeric values accept fractions (`eps = 8/255`) anywhere a decimal is
//! accepted, and `none` clears optional keys. Attack descriptions are one
//! line each: a family name (`pgd`, `latent-pgd`, `latent-search`) followed
//! by order-insensitive `key=value` pairs (`eps`, `step`, `steps`, and for
//! latent search `lambda1`/`lambda2`); omitted pairs keep that family's
//! stock values. The `[attacks]` section takes repeated `attack =` lines;
//! the first replaces the default evaluation battery and the rest append.
//!
//! One seed in `[run]` drives everything: the dataset split, initialization,
//! batching, and evaluation streams all derive from it, and the training
//! output directory comes from `[run] output_dir`. Serialization
//! ([`ExperimentConfig::to_text`]) writes every key back out in canonical
//! order, so parse → serialize → parse is the identity.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::attacks::{AttackFamily, AttackSpec};
use crate::datasets::{DatasetOptions, DATASET_NAMES};
use crate::losses::GanMode;
use crate::trainer::{LrSchedule, StopMetric, TrainConfig};

/// Environment variable naming the dataset cache root used when neither the
/// config file nor a CLI flag provides one.
pub const DATA_ROOT_ENV: &str = "ADVTRAIN_DATA_ROOT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value` or `[section]`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown section [{name}]")]
    UnknownSection { line: usize, name: String },
    #[error("line {line}: key `{key}` appears before any [section] header")]
    KeyOutsideSection { line: usize, key: String },
    #[error("line {line}: unknown key `{key}` in [{section}]")]
    UnknownKey {
        line: usize,
        section: String,
        key: String,
    },
    #[error("line {line}: duplicate key `{key}` in [{section}]")]
    DuplicateKey {
        line: usize,
        section: String,
        key: String,
    },
    #[error("key `{key}`: cannot parse `{value}` as {expected}")]
    Value {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("key `{key}`: {message}")]
    Constraint { key: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Everything one experiment run needs: dataset choice and sizing, network
/// sizing, training hyperparameters, the evaluation attack battery, the
/// output directory, and the single seed that drives all randomness.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset_name: String,
    /// Cache root for on-disk datasets; `None` falls back to the
    /// [`DATA_ROOT_ENV`] variable and then the current directory.
    pub dataset_root: Option<PathBuf>,
    pub dataset: DatasetOptions,
    pub train: TrainConfig,
    /// Attacks run at evaluation time, in file order.
    pub attack_battery: Vec<AttackSpec>,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = Self {
            dataset_name: "gauss2d".to_string(),
            dataset_root: None,
            dataset: DatasetOptions::default(),
            train: TrainConfig::default(),
            attack_battery: vec![
                AttackSpec::pixel_pgd(2.0 / 255.0, 1.0 / 255.0, 20),
                AttackSpec::pixel_pgd(4.0 / 255.0, 1.0 / 255.0, 20),
                AttackSpec::pixel_pgd(8.0 / 255.0, 1.0 / 255.0, 20),
            ],
            seed: 0,
            output_dir: None,
        };
        cfg.synchronize();
        cfg
    }
}

impl ExperimentConfig {
    /// Pushes the run-level seed and output directory into the nested
    /// dataset and training configs so there is one source of truth.
    pub fn synchronize(&mut self) {
        self.dataset.seed = self.seed;
        self.train.seed = self.seed;
        self.train.output_dir = self.output_dir.clone();
    }

    /// Applies CLI-level overrides and re-synchronizes nested configs.
    pub fn with_overrides(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.output_dir = Some(o);
        }
        self.synchronize();
        self
    }

    /// Dataset cache root: explicit key, then the environment variable, then
    /// the current directory.
    pub fn resolved_root(&self) -> PathBuf {
        if let Some(root) = &self.dataset_root {
            return root.clone();
        }
        if let Ok(v) = std::env::var(DATA_ROOT_ENV) {
            if !v.is_empty() {
                return PathBuf::from(v);
            }
        }
        PathBuf::from(".")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !DATASET_NAMES.contains(&self.dataset_name.as_str()) {
            return Err(ConfigError::Constraint {
                key: "dataset.name".to_string(),
                message: format!(
                    "unknown dataset `{}`; expected one of {}",
                    self.dataset_name,
                    DATASET_NAMES.join(", ")
                ),
            });
        }
        if !(0.0..1.0).contains(&self.dataset.validation_fraction) {
            return Err(ConfigError::Constraint {
                key: "dataset.validation_fraction".to_string(),
                message: format!(
                    "must lie in [0, 1), got {}",
                    self.dataset.validation_fraction
                ),
            });
        }
        if self.dataset.synth_classes < 2 {
            return Err(ConfigError::Constraint {
                key: "dataset.synth_classes".to_string(),
                message: format!("need at least 2 classes, got {}", self.dataset.synth_classes),
            });
        }
        self.train
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (i, spec) in self.attack_battery.iter().enumerate() {
            spec.validate().map_err(|e| ConfigError::Constraint {
                key: format!("attacks.attack[{i}]"),
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Canonical text form: every key of every section, in fixed order.
    /// Parsing the output reproduces this config exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let opt_path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "none".to_string())
        };
        let opt_num = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_else(|| "none".into());

        writeln!(out, "[dataset]").unwrap();
        writeln!(out, "name = {}", self.dataset_name).unwrap();
        writeln!(out, "root = {}", opt_path(&self.dataset_root)).unwrap();
        let n_lab = self
            .dataset
            .n_labeled
            .map(|v| v.to_string())
            .unwrap_or_else(|| "none".into());
        writeln!(out, "n_labeled = {n_lab}").unwrap();
        writeln!(
            out,
            "validation_fraction = {}",
            self.dataset.validation_fraction
        )
        .unwrap();
        writeln!(out, "synth_classes = {}", self.dataset.synth_classes).unwrap();
        writeln!(
            out,
            "synth_train_per_class = {}",
            self.dataset.synth_train_per_class
        )
        .unwrap();
        writeln!(
            out,
            "synth_test_per_class = {}",
            self.dataset.synth_test_per_class
        )
        .unwrap();
        writeln!(out, "synth_noise = {}", self.dataset.synth_noise).unwrap();

        let net = &self.train.net;
        writeln!(out, "\n[net]").unwrap();
        writeln!(out, "data_dim = {}", net.data_dim).unwrap();
        writeln!(out, "noise_dim = {}", net.noise_dim).unwrap();
        writeln!(out, "label_embed_dim = {}", net.label_embed_dim).unwrap();
        writeln!(out, "generator_channels = {}", net.generator_channels).unwrap();
        writeln!(
            out,
            "discriminator_channels = {}",
            net.discriminator_channels
        )
        .unwrap();
        writeln!(out, "attacker_hidden = {}", net.attacker_hidden).unwrap();
        writeln!(out, "classifier_depth = {}", net.classifier_depth).unwrap();
        writeln!(out, "classifier_width = {}", net.classifier_width).unwrap();
        writeln!(out, "attacker_clamp = {}", opt_num(net.attacker_clamp)).unwrap();

        let t = &self.train;
        writeln!(out, "\n[train]").unwrap();
        writeln!(out, "lambda = {}", t.weights.lambda).unwrap();
        writeln!(out, "gamma = {}", t.weights.gamma).unwrap();
        writeln!(out, "beta = {}", t.weights.beta).unwrap();
        writeln!(out, "alpha = {}", t.weights.alpha).unwrap();
        writeln!(out, "lr = {}", t.optimizer.lr).unwrap();
        writeln!(out, "weight_decay = {}", t.optimizer.weight_decay).unwrap();
        writeln!(out, "momentum = {}", t.optimizer.momentum).unwrap();
        writeln!(out, "nesterov = {}", t.optimizer.nesterov).unwrap();
        let schedule = match t.optimizer.schedule {
            LrSchedule::Constant => "constant".to_string(),
            LrSchedule::CosineCyclic { cycles } => {
                if cycles == 1 {
                    "cosine".to_string()
                } else {
                    format!("cosine:{cycles}")
                }
            }
        };
        writeln!(out, "schedule = {schedule}").unwrap();
        writeln!(out, "aux_lr_scale = {}", t.optimizer.aux_lr_scale).unwrap();
        writeln!(out, "batch_labeled = {}", t.batch_labeled).unwrap();
        writeln!(out, "batch_unlabeled = {}", t.batch_unlabeled).unwrap();
        writeln!(out, "t_pre = {}", t.t_pre).unwrap();
        writeln!(out, "t_train = {}", t.t_train).unwrap();
        writeln!(out, "patience = {}", t.early_stopping.patience).unwrap();
        let metric = match t.early_stopping.metric {
            StopMetric::RobustAccuracy => "robust",
            StopMetric::NaturalAccuracy => "natural",
        };
        writeln!(out, "stop_metric = {metric}").unwrap();
        let mode = match t.gan_mode {
            GanMode::Hinge => "hinge",
            GanMode::Linear => "linear",
        };
        writeln!(out, "gan_mode = {mode}").unwrap();
        writeln!(out, "ema_decay = {}", t.ema_decay).unwrap();
        writeln!(out, "ema_ramp_frac = {}", t.ema_ramp_frac).unwrap();
        writeln!(
            out,
            "pseudo_label_threshold = {}",
            opt_num(t.pseudo_label_threshold)
        )
        .unwrap();
        writeln!(out, "rae_attack = {}", attack_to_string(&t.rae_attack)).unwrap();
        writeln!(out, "eval_attack = {}", attack_to_string(&t.eval_attack)).unwrap();

        writeln!(out, "\n[attacks]").unwrap();
        for spec in &self.attack_battery {
            writeln!(out, "attack = {}", attack_to_string(spec)).unwrap();
        }

        writeln!(out, "\n[run]").unwrap();
        writeln!(out, "seed = {}", self.seed).unwrap();
        writeln!(out, "output_dir = {}", opt_path(&self.output_dir)).unwrap();
        out
    }

    /// Reproducibility manifest: code version, seed, and the full config
    /// snapshot, ready to write next to run artifacts.
    pub fn manifest(&self) -> String {
        format!(
            "# advtrain {}\n# seed {}\n{}",
            env!("CARGO_PKG_VERSION"),
            self.seed,
            self.to_text()
        )
    }
}

fn parse_number(key: &str, value: &str) -> Result<f64, ConfigError> {
    const EXPECTED: &str = "a number (fractions like 8/255 accepted)";
    let err = || ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        expected: EXPECTED,
    };
    let v = value.trim();
    let parsed = if let Some((num, den)) = v.split_once('/') {
        let n: f64 = num.trim().parse().map_err(|_| err())?;
        let d: f64 = den.trim().parse().map_err(|_| err())?;
        if d == 0.0 {
            return Err(err());
        }
        n / d
    } else {
        v.parse::<f64>().map_err(|_| err())?
    };
    if parsed.is_finite() {
        Ok(parsed)
    } else {
        Err(err())
    }
}

fn parse_opt_number(key: &str, value: &str) -> Result<Option<f64>, ConfigError> {
    if value.trim().eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        parse_number(key, value).map(Some)
    }
}

fn parse_usize(key: &str, value: &str) -> Result<usize, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        expected: "a non-negative integer",
    })
}

fn parse_u64(key: &str, value: &str) -> Result<u64, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        expected: "a non-negative integer",
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ConfigError::Value {
            key: key.to_string(),
            value: value.to_string(),
            expected: "`true` or `false`",
        }),
    }
}

fn non_negative(key: &str, v: f64) -> Result<f64, ConfigError> {
    if v >= 0.0 {
        Ok(v)
    } else {
        Err(ConfigError::Constraint {
            key: key.to_string(),
            message: format!("must be ≥ 0, got {v}"),
        })
    }
}

/// Parses one attack description: family name plus `key=value` pairs.
/// Missing pairs keep the family's stock values (pixel PGD: ε=8/255,
/// step=1/255, 20 steps; latent PGD: ε=0.1, step=0.1, 20 steps; latent
/// search: 200 steps, step=0.1, λ₁=λ₂=100).
pub fn parse_attack(key: &str, text: &str) -> Result<AttackSpec, ConfigError> {
    let mut parts = text.split_whitespace();
    let family = parts.next().ok_or_else(|| ConfigError::Value {
        key: key.to_string(),
        value: text.to_string(),
        expected: "an attack description starting with its family name",
    })?;
    let mut spec = match family {
        "pgd" => AttackSpec::pixel_pgd(8.0 / 255.0, 1.0 / 255.0, 20),
        "latent-pgd" => AttackSpec::latent_pgd(0.1, 0.1, 20),
        "latent-search" => AttackSpec::latent_search(200, 0.1, 100.0, 100.0),
        _ => {
            return Err(ConfigError::Value {
                key: key.to_string(),
                value: text.to_string(),
                expected: "a family in {pgd, latent-pgd, latent-search}",
            })
        }
    };
    for pair in parts {
        let (k, v) = pair.split_once('=').ok_or_else(|| ConfigError::Value {
            key: key.to_string(),
            value: pair.to_string(),
            expected: "`name=value` attack parameters",
        })?;
        let sub = format!("{key}.{k}");
        match k {
            "eps" => spec.epsilon = non_negative(&sub, parse_number(&sub, v)?)?,
            "step" => spec.step_size = parse_number(&sub, v)?,
            "steps" => spec.steps = parse_usize(&sub, v)?,
            "lambda1" if spec.family == AttackFamily::LatentSearch => {
                spec.realism_weights.0 = non_negative(&sub, parse_number(&sub, v)?)?;
            }
            "lambda2" if spec.family == AttackFamily::LatentSearch => {
                spec.realism_weights.1 = non_negative(&sub, parse_number(&sub, v)?)?;
            }
            _ => {
                return Err(ConfigError::Constraint {
                    key: key.to_string(),
                    message: format!("unknown parameter `{k}` for family `{family}`"),
                })
            }
        }
    }
    Ok(spec)
}

/// Inverse of [`parse_attack`] up to number formatting.
pub fn attack_to_string(spec: &AttackSpec) -> String {
    match spec.family {
        AttackFamily::PixelPgd => format!(
            "pgd eps={} step={} steps={}",
            spec.epsilon, spec.step_size, spec.steps
        ),
        AttackFamily::LatentPgd => format!(
            "latent-pgd eps={} step={} steps={}",
            spec.epsilon, spec.step_size, spec.steps
        ),
        AttackFamily::LatentSearch => format!(
            "latent-search eps={} step={} steps={} lambda1={} lambda2={}",
            spec.epsilon, spec.step_size, spec.steps, spec.realism_weights.0, spec.realism_weights.1
        ),
    }
}

fn parse_schedule(key: &str, value: &str) -> Result<LrSchedule, ConfigError> {
    let v = value.trim();
    if v == "constant" {
        return Ok(LrSchedule::Constant);
    }
    if v == "cosine" {
        return Ok(LrSchedule::CosineCyclic { cycles: 1 });
    }
    if let Some(n) = v.strip_prefix("cosine:") {
        if let Ok(cycles) = n.parse::<u32>() {
            if cycles >= 1 {
                return Ok(LrSchedule::CosineCyclic { cycles });
            }
        }
    }
    Err(ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        expected: "`constant`, `cosine`, or `cosine:<cycles>`",
    })
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}

/// Parses configuration text, applying defaults for absent keys and
/// validating the result. See the module docs for the format.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = ExperimentConfig::default();
    let mut section: Option<String> = None;
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let mut battery_replaced = false;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with(';') {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| ConfigError::Syntax {
                    line,
                    text: trimmed.to_string(),
                })?
                .trim()
                .to_string();
            if !["dataset", "net", "train", "attacks", "run"].contains(&name.as_str()) {
                return Err(ConfigError::UnknownSection { line, name });
            }
            section = Some(name);
            continue;
        }
        let (key, value) = trimmed.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            text: trimmed.to_string(),
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        let section = section.clone().ok_or_else(|| ConfigError::KeyOutsideSection {
            line,
            key: key.clone(),
        })?;
        let repeatable = section == "attacks" && key == "attack";
        if !repeatable && !seen.insert((section.clone(), key.clone())) {
            return Err(ConfigError::DuplicateKey { line, section, key });
        }
        assign(&mut cfg, &section, &key, &value, line, &mut battery_replaced)?;
    }

    cfg.synchronize();
    cfg.validate()?;
    Ok(cfg)
}

fn assign(
    cfg: &mut ExperimentConfig,
    section: &str,
    key: &str,
    value: &str,
    line: usize,
    battery_replaced: &mut bool,
) -> Result<(), ConfigError> {
    let unknown = || {
        Err(ConfigError::UnknownKey {
            line,
            section: section.to_string(),
            key: key.to_string(),
        })
    };
    match section {
        "dataset" => match key {
            "name" => cfg.dataset_name = value.to_string(),
            "root" => {
                cfg.dataset_root = if value.eq_ignore_ascii_case("none") {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "n_labeled" => {
                cfg.dataset.n_labeled = if value.eq_ignore_ascii_case("none") {
                    None
                } else {
                    Some(parse_usize(key, value)?)
                }
            }
            "validation_fraction" => cfg.dataset.validation_fraction = parse_number(key, value)?,
            "synth_classes" => cfg.dataset.synth_classes = parse_usize(key, value)?,
            "synth_train_per_class" => {
                cfg.dataset.synth_train_per_class = parse_usize(key, value)?
            }
            "synth_test_per_class" => cfg.dataset.synth_test_per_class = parse_usize(key, value)?,
            "synth_noise" => cfg.dataset.synth_noise = non_negative(key, parse_number(key, value)?)?,
            _ => return unknown(),
        },
        "net" => {
            let net = &mut cfg.train.net;
            match key {
                "data_dim" => net.data_dim = parse_usize(key, value)?,
                "noise_dim" => net.noise_dim = parse_usize(key, value)?,
                "label_embed_dim" => net.label_embed_dim = parse_usize(key, value)?,
                "generator_channels" => net.generator_channels = parse_usize(key, value)?,
                "discriminator_channels" => net.discriminator_channels = parse_usize(key, value)?,
                "attacker_hidden" => net.attacker_hidden = parse_usize(key, value)?,
                "classifier_depth" => net.classifier_depth = parse_usize(key, value)?,
                "classifier_width" => net.classifier_width = parse_usize(key, value)?,
                "attacker_clamp" => net.attacker_clamp = parse_opt_number(key, value)?,
                _ => return unknown(),
            }
        }
        "train" => {
            let t = &mut cfg.train;
            match key {
                "lambda" => t.weights.lambda = non_negative(key, parse_number(key, value)?)?,
                "gamma" => t.weights.gamma = non_negative(key, parse_number(key, value)?)?,
                "beta" => t.weights.beta = non_negative(key, parse_number(key, value)?)?,
                "alpha" => t.weights.alpha = non_negative(key, parse_number(key, value)?)?,
                "lr" => t.optimizer.lr = parse_number(key, value)?,
                "weight_decay" => t.optimizer.weight_decay = parse_number(key, value)?,
                "momentum" => t.optimizer.momentum = parse_number(key, value)?,
                "nesterov" => t.optimizer.nesterov = parse_bool(key, value)?,
                "schedule" => t.optimizer.schedule = parse_schedule(key, value)?,
                "aux_lr_scale" => t.optimizer.aux_lr_scale = parse_number(key, value)?,
                "batch_labeled" => t.batch_labeled = parse_usize(key, value)?,
                "batch_unlabeled" => t.batch_unlabeled = parse_usize(key, value)?,
                "t_pre" => t.t_pre = parse_usize(key, value)?,
                "t_train" => t.t_train = parse_usize(key, value)?,
                "patience" => t.early_stopping.patience = parse_usize(key, value)?,
                "stop_metric" => {
                    t.early_stopping.metric = match value {
                        "robust" => StopMetric::RobustAccuracy,
                        "natural" => StopMetric::NaturalAccuracy,
                        _ => {
                            return Err(ConfigError::Value {
                                key: key.to_string(),
                                value: value.to_string(),
                                expected: "`robust` or `natural`",
                            })
                        }
                    }
                }
                "gan_mode" => {
                    t.gan_mode = match value {
                        "hinge" => GanMode::Hinge,
                        "linear" => GanMode::Linear,
                        _ => {
                            return Err(ConfigError::Value {
                                key: key.to_string(),
                                value: value.to_string(),
                                expected: "`hinge` or `linear`",
                            })
                        }
                    }
                }
                "ema_decay" => t.ema_decay = parse_number(key, value)?,
                "ema_ramp_frac" => t.ema_ramp_frac = parse_number(key, value)?,
                "pseudo_label_threshold" => {
                    t.pseudo_label_threshold = parse_opt_number(key, value)?
                }
                "rae_attack" => t.rae_attack = parse_attack(key, value)?,
                "eval_attack" => t.eval_attack = parse_attack(key, value)?,
                _ => return unknown(),
            }
        }
        "attacks" => match key {
            "attack" => {
                if !*battery_replaced {
                    cfg.attack_battery.clear();
                    *battery_replaced = true;
                }
                cfg.attack_battery.push(parse_attack(key, value)?);
            }
            _ => return unknown(),
        },
        "run" => match key {
            "seed" => cfg.seed = parse_u64(key, value)?,
            "output_dir" => {
                cfg.output_dir = if value.eq_ignore_ascii_case("none") {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            _ => return unknown(),
        },
        _ => unreachable!("section names are checked at the header"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn empty_text_yields_the_full_default_config() {
        let cfg = parse_config_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_abs_diff_eq!(cfg.train.weights.lambda, 10.0);
        assert_abs_diff_eq!(cfg.train.weights.beta, 6.0);
        assert_abs_diff_eq!(cfg.train.weights.gamma, 0.03);
        assert_abs_diff_eq!(cfg.train.weights.alpha, 50.0);
        assert_abs_diff_eq!(cfg.train.optimizer.lr, 0.2);
        assert_eq!(cfg.train.batch_labeled, 256);
        assert_eq!(cfg.train.gan_mode, GanMode::Hinge);
        assert_eq!(cfg.attack_battery.len(), 3);
        assert_abs_diff_eq!(cfg.attack_battery[2].epsilon, 8.0 / 255.0);
        // Comments and blank lines parse as nothing.
        let cfg2 = parse_config_str("# a comment\n\n; another\n").unwrap();
        assert_eq!(cfg2, cfg);
    }

    #[test]
    fn a_full_file_reaches_every_section() {
        let text = "\
[dataset]
name = rings2d
root = /tmp/cache
n_labeled = 300
validation_fraction = 0.25
synth_classes = 4
synth_train_per_class = 500
synth_test_per_class = 100
synth_noise = 0.1

[net]
data_dim = 2
noise_dim = 8
label_embed_dim = 4
generator_channels = 16
discriminator_channels = 16
attacker_hidden = 12
classifier_depth = 6
classifier_width = 1
attacker_clamp = 3.0

[train]
lambda = 5.0
gamma = 0.1
beta = 0
alpha = 25
lr = 0.1
weight_decay = 5/10000
momentum = 0.8
nesterov = false
schedule = cosine:3
aux_lr_scale = 0.1
batch_labeled = 64
batch_unlabeled = 128
t_pre = 1
t_train = 10
patience = 3
stop_metric = natural
gan_mode = linear
ema_decay = 0.99
ema_ramp_frac = 0.05
pseudo_label_threshold = 0.9
rae_attack = pgd eps=4/255 step=1/255 steps=10
eval_attack = pgd eps=8/255 steps=20 step=1/255

[attacks]
attack = pgd eps=2/255
attack = latent-pgd eps=0.1 step=0.1 steps=20
attack = latent-search steps=200 step=0.1 lambda1=100 lambda2=50

[run]
seed = 11
output_dir = out/exp1
";
        let cfg = parse_config_str(text).unwrap();
        assert_eq!(cfg.dataset_name, "rings2d");
        assert_eq!(cfg.dataset_root, Some(PathBuf::from("/tmp/cache")));
        assert_eq!(cfg.dataset.n_labeled, Some(300));
        assert_eq!(cfg.dataset.synth_classes, 4);
        assert_eq!(cfg.train.net.attacker_clamp, Some(3.0));
        assert_eq!(cfg.train.net.classifier_depth, 6);
        assert_abs_diff_eq!(cfg.train.weights.lambda, 5.0);
        assert_abs_diff_eq!(cfg.train.weights.beta, 0.0);
        // Fractions parse to the exact f64 quotient.
        assert_eq!(cfg.train.optimizer.weight_decay, 5.0 / 10000.0);
        assert_eq!(
            cfg.train.optimizer.schedule,
            LrSchedule::CosineCyclic { cycles: 3 }
        );
        assert!(!cfg.train.optimizer.nesterov);
        assert_eq!(cfg.train.early_stopping.metric, StopMetric::NaturalAccuracy);
        assert_eq!(cfg.train.gan_mode, GanMode::Linear);
        assert_eq!(cfg.train.pseudo_label_threshold, Some(0.9));
        // The documented attack grammar is order-insensitive.
        assert_eq!(cfg.train.eval_attack.epsilon, 8.0 / 255.0);
        assert_eq!(cfg.train.eval_attack.step_size, 1.0 / 255.0);
        assert_eq!(cfg.train.eval_attack.steps, 20);
        // The battery replaced the default three entries.
        assert_eq!(cfg.attack_battery.len(), 3);
        assert_eq!(cfg.attack_battery[0].epsilon, 2.0 / 255.0);
        assert_eq!(cfg.attack_battery[0].steps, 20); // stock value kept
        assert_eq!(cfg.attack_battery[1].family, AttackFamily::LatentPgd);
        assert_eq!(cfg.attack_battery[2].realism_weights, (100.0, 50.0));
        // Run keys propagate into the nested configs.
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.train.seed, 11);
        assert_eq!(cfg.dataset.seed, 11);
        assert_eq!(cfg.output_dir, Some(PathBuf::from("out/exp1")));
        assert_eq!(cfg.train.output_dir, Some(PathBuf::from("out/exp1")));
    }

    #[test]
    #[allow(clippy::field_reassign_with_default)]
    fn round_trip_is_the_identity() {
        let default = ExperimentConfig::default();
        let reparsed = parse_config_str(&default.to_text()).unwrap();
        assert_eq!(reparsed, default);

        // A config full of awkward floats survives exactly.
        let mut cfg = ExperimentConfig::default();
        cfg.dataset_name = "rings2d".to_string();
        cfg.dataset.synth_noise = 0.1 + 0.2;
        cfg.train.weights.lambda = 1.0 / 3.0;
        cfg.train.optimizer.lr = 0.07;
        cfg.train.optimizer.schedule = LrSchedule::CosineCyclic { cycles: 7 };
        cfg.train.net.attacker_clamp = Some(2.5);
        cfg.train.pseudo_label_threshold = Some(0.95);
        cfg.train.rae_attack = AttackSpec::pixel_pgd(3.0 / 255.0, 1.0 / 255.0, 7);
        cfg.attack_battery = vec![
            AttackSpec::latent_search(150, 0.05, 99.5, 100.25),
            AttackSpec::pixel_pgd(8.0 / 255.0, 1.0 / 255.0, 20),
        ];
        cfg.seed = 42;
        cfg.output_dir = Some(PathBuf::from("out/x"));
        cfg.synchronize();
        let text = cfg.to_text();
        let reparsed = parse_config_str(&text).unwrap();
        assert_eq!(reparsed, cfg);
        // And serialization is a fixed point.
        assert_eq!(reparsed.to_text(), text);
    }

    #[test]
    fn structural_errors_name_the_line_and_offender() {
        let err = parse_config_str("[nope]\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownSection { line: 1, .. }));

        let err = parse_config_str("[train]\nwat = 1\n").unwrap_err();
        match err {
            ConfigError::UnknownKey { line, section, key } => {
                assert_eq!((line, section.as_str(), key.as_str()), (2, "train", "wat"));
            }
            other => panic!("unexpected: {other}"),
        }

        let err = parse_config_str("[train]\nlr = 0.1\nlr = 0.2\n").unwrap_err();
        assert!(matches!(err, ConfigError::DuplicateKey { line: 3, .. }));

        let err = parse_config_str("lr = 0.1\n").unwrap_err();
        assert!(matches!(err, ConfigError::KeyOutsideSection { line: 1, .. }));

        let err = parse_config_str("[train\n").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 1, .. }));

        let err = parse_config_str("[train]\njust words\n").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 2, .. }));
    }

    #[test]
    fn value_errors_name_the_key() {
        let err = parse_config_str("[train]\nlambda = -1\n").unwrap_err();
        assert!(err.to_string().contains("lambda"), "{err}");

        let err = parse_config_str("[train]\nlr = fast\n").unwrap_err();
        match &err {
            ConfigError::Value { key, .. } => assert_eq!(key, "lr"),
            other => panic!("unexpected: {other}"),
        }

        let err = parse_config_str("[train]\nlambda = 1/0\n").unwrap_err();
        assert!(matches!(err, ConfigError::Value { .. }));

        let err = parse_config_str("[train]\nschedule = linear-warmup\n").unwrap_err();
        assert!(err.to_string().contains("schedule"), "{err}");

        // Constraints checked by the nested training config still surface.
        let err = parse_config_str("[train]\nmomentum = 1.5\n").unwrap_err();
        assert!(err.to_string().contains("momentum"), "{err}");

        let err = parse_config_str("[dataset]\nvalidation_fraction = 1.5\n").unwrap_err();
        assert!(err.to_string().contains("validation_fraction"), "{err}");

        let err = parse_config_str("[dataset]\nname = imagenet\n").unwrap_err();
        assert!(err.to_string().contains("imagenet"), "{err}");
    }

    #[test]
    fn attack_grammar_covers_families_defaults_and_rejections() {
        // The documented single-line form parses to the exact quotients.
        let spec = parse_attack("attack", "pgd eps=8/255 steps=20 step=1/255").unwrap();
        assert_eq!(spec, AttackSpec::pixel_pgd(8.0 / 255.0, 1.0 / 255.0, 20));

        // A bare family name uses stock values.
        assert_eq!(
            parse_attack("attack", "pgd").unwrap(),
            AttackSpec::pixel_pgd(8.0 / 255.0, 1.0 / 255.0, 20)
        );
        assert_eq!(
            parse_attack("attack", "latent-pgd").unwrap(),
            AttackSpec::latent_pgd(0.1, 0.1, 20)
        );
        assert_eq!(
            parse_attack("attack", "latent-search").unwrap(),
            AttackSpec::latent_search(200, 0.1, 100.0, 100.0)
        );

        assert!(parse_attack("attack", "fgsm eps=0.1").is_err());
        assert!(parse_attack("attack", "pgd eps").is_err());
        // Realism weights only make sense for latent search.
        assert!(parse_attack("attack", "pgd lambda1=5").is_err());
        assert!(parse_attack("attack", "pgd eps=-0.5").is_err());

        for spec in [
            AttackSpec::pixel_pgd(0.05, 0.01, 12),
            AttackSpec::latent_pgd(0.01, 0.1, 20),
            AttackSpec::latent_search(200, 0.1, 100.0, 100.0),
        ] {
            let text = attack_to_string(&spec);
            assert_eq!(parse_attack("attack", &text).unwrap(), spec);
        }
    }

    #[test]
    fn overrides_resync_the_nested_configs() {
        let cfg = ExperimentConfig::default()
            .with_overrides(Some(99), Some(PathBuf::from("elsewhere")));
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.train.seed, 99);
        assert_eq!(cfg.dataset.seed, 99);
        assert_eq!(cfg.train.output_dir, Some(PathBuf::from("elsewhere")));
        // No overrides: unchanged.
        let cfg2 = cfg.clone().with_overrides(None, None);
        assert_eq!(cfg2, cfg);
    }

    #[test]
    fn manifest_carries_version_seed_and_snapshot() {
        let cfg = ExperimentConfig::default().with_overrides(Some(5), None);
        let m = cfg.manifest();
        let mut lines = m.lines();
        assert!(lines.next().unwrap().starts_with("# advtrain "));
        assert_eq!(lines.next().unwrap(), "# seed 5");
        // The remainder is the parseable snapshot.
        let body: String = m.lines().skip(2).collect::<Vec<_>>().join("\n");
        assert_eq!(parse_config_str(&body).unwrap(), cfg);
    }

    #[test]
    fn files_parse_like_strings() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.cfg");
        std::fs::write(&path, "[run]\nseed = 3\n").unwrap();
        let cfg = parse_config(&path).unwrap();
        assert_eq!(cfg.seed, 3);
        assert!(parse_config(&dir.path().join("missing.cfg")).is_err());
    }

    #[test]
    fn resolved_root_prefers_the_explicit_key() {
        let cfg = ExperimentConfig {
            dataset_root: Some(PathBuf::from("/explicit")),
            ..ExperimentConfig::default()
        };
        assert_eq!(cfg.resolved_root(), PathBuf::from("/explicit"));
    }
}
