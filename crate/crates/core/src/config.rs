//! Experiment-file parsing: a flat TOML document mapping onto
//! [`SimConfig`], plus an optional one-key sweep expanding into several
//! configs that differ only in that key.

use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::learner::TrainConfig;
use crate::simulator::{
    AttackKind, AttackParams, DataSpec, DefenseKind, RuleKind, SimConfig,
};
use crate::tailored::WhichCluster;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid value for key {key}: {message}")]
    Value { key: String, message: String },
}

fn default_c0() -> f64 {
    8.0
}
fn default_e() -> usize {
    50
}
fn default_beta() -> f64 {
    0.7
}
fn default_c_floor() -> f64 {
    0.5
}
fn default_p() -> f64 {
    0.01
}
fn default_eps() -> f64 {
    1e-6
}
fn default_lambda() -> f64 {
    1e6
}
fn default_spread() -> f64 {
    0.35
}
fn default_test_per_class() -> usize {
    100
}
fn default_root_size() -> usize {
    100
}
fn default_flcert_groups() -> usize {
    5
}
fn default_fldetector_rounds() -> usize {
    20
}
fn default_fldetector_window() -> usize {
    10
}
fn default_defense_n() -> usize {
    20
}
fn default_local_epochs() -> usize {
    1
}
fn default_batch_size() -> usize {
    10
}
fn default_which_cluster() -> String {
    "lower".to_string()
}
fn default_probe_norms() -> Vec<f64> {
    vec![0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0]
}

/// The raw experiment document; every simulator knob appears exactly once.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub n_genuine: usize,
    pub fake_fraction: f64,
    pub participation_rate: f64,
    pub rounds: usize,
    pub seed: u64,
    pub hidden_layers: Vec<usize>,
    pub learning_rate: f64,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub n_classes: usize,
    pub feature_dim: usize,
    pub examples_per_client: usize,
    #[serde(default = "default_spread")]
    pub spread: f64,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    pub q: f64,
    pub attack: String,
    pub rule: String,
    #[serde(default = "default_c0")]
    pub c0: f64,
    #[serde(default = "default_e")]
    pub e: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_c_floor")]
    pub c_floor: f64,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub ablate_same_magnitude: bool,
    #[serde(default)]
    pub ablate_fixed_scale: Option<f64>,
    #[serde(default = "default_root_size")]
    pub root_size: usize,
    #[serde(default = "default_flcert_groups")]
    pub flcert_groups: usize,
    #[serde(default = "default_fldetector_rounds")]
    pub fldetector_rounds: usize,
    #[serde(default = "default_fldetector_window")]
    pub fldetector_window: usize,
    #[serde(default)]
    pub defense: Option<String>,
    #[serde(default = "default_defense_n")]
    pub defense_n: usize,
    #[serde(default)]
    pub defense_b: Option<f64>,
    #[serde(default = "default_which_cluster")]
    pub which_cluster: String,
    #[serde(default = "default_probe_norms")]
    pub probe_norms: Vec<f64>,
    #[serde(default)]
    pub sweep: Option<Sweep>,
}

/// One swept key and its values; each value yields one experiment.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub key: String,
    pub values: Vec<f64>,
}

impl ExperimentFile {
    pub fn from_str_named(text: &str, path: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_string(),
            message: e.to_string(),
        })
    }

    fn to_sim_config(&self) -> Result<SimConfig, ConfigError> {
        let attack = AttackKind::from_key(&self.attack).ok_or_else(|| ConfigError::Value {
            key: "attack".into(),
            message: format!("unknown attack key {:?}", self.attack),
        })?;
        let rule = RuleKind::from_key(&self.rule).ok_or_else(|| ConfigError::Value {
            key: "rule".into(),
            message: format!("unknown rule key {:?}", self.rule),
        })?;
        let defense = match &self.defense {
            None => None,
            Some(key) => Some(DefenseKind::from_key(key).ok_or_else(|| ConfigError::Value {
                key: "defense".into(),
                message: format!("unknown defense key {key:?}"),
            })?),
        };
        let which_cluster = match self.which_cluster.as_str() {
            "lower" => WhichCluster::LowerIsFake,
            "higher" => WhichCluster::HigherIsFake,
            other => {
                return Err(ConfigError::Value {
                    key: "which_cluster".into(),
                    message: format!("expected \"lower\" or \"higher\", got {other:?}"),
                })
            }
        };
        let cfg = SimConfig {
            n_genuine: self.n_genuine,
            fake_fraction: self.fake_fraction,
            participation_rate: self.participation_rate,
            rounds: self.rounds,
            seed: self.seed,
            hidden_layers: self.hidden_layers.clone(),
            train: TrainConfig {
                learning_rate: self.learning_rate,
                local_epochs: self.local_epochs,
                batch_size: self.batch_size,
            },
            data: DataSpec {
                n_classes: self.n_classes,
                feature_dim: self.feature_dim,
                examples_per_client: self.examples_per_client,
                spread: self.spread,
                test_per_class: self.test_per_class,
            },
            q: self.q,
            attack,
            attack_params: AttackParams {
                c0: self.c0,
                e: self.e,
                beta: self.beta,
                c_floor: self.c_floor,
                p: self.p,
                alpha: self.alpha,
                eps: self.eps,
                gamma: self.gamma,
                lambda: self.lambda,
                ablate_same_magnitude: self.ablate_same_magnitude,
                ablate_fixed_scale: self.ablate_fixed_scale,
            },
            rule,
            root_size: self.root_size,
            flcert_groups: self.flcert_groups,
            fldetector_rounds: self.fldetector_rounds,
            fldetector_window: self.fldetector_window,
            defense,
            defense_n: self.defense_n,
            defense_b: self.defense_b,
            which_cluster,
        };
        cfg.validate().map_err(|e| ConfigError::Value {
            key: "(validation)".into(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    fn with_swept(&self, key: &str, value: f64) -> Result<ExperimentFile, ConfigError> {
        let mut out = self.clone();
        let as_usize = || -> Result<usize, ConfigError> {
            if value < 0.0 || value.fract() != 0.0 {
                return Err(ConfigError::Value {
                    key: key.to_string(),
                    message: format!("sweep value {value} is not a non-negative integer"),
                });
            }
            Ok(value as usize)
        };
        match key {
            "fake_fraction" => out.fake_fraction = value,
            "participation_rate" => out.participation_rate = value,
            "q" => out.q = value,
            "alpha" => out.alpha = value,
            "gamma" => out.gamma = value,
            "lambda" => out.lambda = value,
            "learning_rate" => out.learning_rate = value,
            "seed" => out.seed = as_usize()? as u64,
            "rounds" => out.rounds = as_usize()?,
            "defense_n" => out.defense_n = as_usize()?,
            other => {
                return Err(ConfigError::Value {
                    key: "sweep.key".into(),
                    message: format!("key {other:?} is not sweepable"),
                })
            }
        }
        out.sweep = None;
        Ok(out)
    }

    /// Expands the document into its experiment list. Labels are the
    /// swept `key=value` (or `"single"` without a sweep).
    pub fn experiments(&self) -> Result<Vec<(String, SimConfig)>, ConfigError> {
        match &self.sweep {
            None => Ok(vec![("single".to_string(), self.to_sim_config()?)]),
            Some(sweep) => {
                if sweep.values.is_empty() {
                    return Err(ConfigError::Value {
                        key: "sweep.values".into(),
                        message: "sweep needs at least one value".into(),
                    });
                }
                sweep
                    .values
                    .iter()
                    .map(|&v| {
                        let label = format!("{}={v}", sweep.key);
                        Ok((label, self.with_swept(&sweep.key, v)?.to_sim_config()?))
                    })
                    .collect()
            }
        }
    }
}

/// Reads and expands an experiment file; also returns the raw text for
/// content hashing.
pub fn parse_config(path: &Path) -> Result<(ExperimentFile, String), ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file = ExperimentFile::from_str_named(&text, &path.display().to_string())?;
    Ok((file, text))
}
