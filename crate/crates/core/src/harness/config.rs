//! Scenario files and the built-in presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adversary::BackdoorSpec;
use crate::economics::{EconParams, Stake, StakeBook};
use crate::error::{Error, Result};
use crate::learning::{DomainSpec, FedAdamState, ModelKind, TrainerConfig};
use crate::protocol::FilterPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    /// Validated, filtered, stake-weighted rounds.
    Flock,
    Fedavg,
    Scaffold,
    Fedadam,
    /// Every trainer keeps training its own model; nothing is shared.
    LocalOnly,
}

impl AggregatorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AggregatorKind::Flock => "flock",
            AggregatorKind::Fedavg => "fedavg",
            AggregatorKind::Scaffold => "scaffold",
            AggregatorKind::Fedadam => "fedadam",
            AggregatorKind::LocalOnly => "local_only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedAdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub server_lr: f64,
}

impl Default for FedAdamConfig {
    fn default() -> Self {
        FedAdamConfig {
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-3,
            server_lr: 0.03,
        }
    }
}

/// Central training of the initial global model on the undistorted base
/// distribution, standing in for a pretrained base model that the federation
/// then fine-tunes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub samples: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub spec: BackdoorSpec,
    /// Indices of the malicious trainers.
    pub attackers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub trainers: Vec<Stake>,
    pub validators: Vec<Stake>,
    pub econ: EconParams,
    pub filter: FilterPolicy,
    pub trainer: TrainerConfig,
    pub aggregator: AggregatorKind,
    #[serde(default)]
    pub fedadam: FedAdamConfig,
    #[serde(default)]
    pub attack: Option<AttackConfig>,
    /// Absent means every run starts from the default initialization.
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
    pub rounds: usize,
    pub data: DomainSpec,
    pub master_seed: u64,
}

fn at<T>(path: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::InvalidParameter { field, reason } if path.is_empty() => Error::config(field, reason),
        Error::InvalidParameter { field, reason } => Error::config(format!("{path}.{field}"), reason),
        other => Error::config(path, other.to_string()),
    })
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trainers.is_empty() {
            return Err(Error::config("trainers", "need at least one trainer"));
        }
        if self.validators.is_empty() {
            return Err(Error::config("validators", "need at least one validator"));
        }
        for (i, s) in self.trainers.iter().enumerate() {
            at("", s.validate(&format!("trainers[{i}]")))?;
        }
        for (j, s) in self.validators.iter().enumerate() {
            at("", s.validate(&format!("validators[{j}]")))?;
        }
        at("stakes", StakeBook::new(self.trainers.clone(), self.validators.clone()))?;
        at("econ", self.econ.validate())?;
        at("filter", self.filter.validate())?;
        at("trainer", self.trainer.validate())?;
        if self.aggregator == AggregatorKind::Scaffold
            && (self.trainer.local_epochs == 0 || self.trainer.learning_rate == 0.0)
        {
            return Err(Error::config(
                "trainer",
                "scaffold needs local_epochs >= 1 and learning_rate > 0",
            ));
        }
        let f = self.fedadam;
        at("fedadam", FedAdamState::new(0, f.beta1, f.beta2, f.epsilon, f.server_lr).map(|_| ()))?;
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be >= 1"));
        }
        let d = &self.data;
        if d.domains == 0 || d.features == 0 || d.classes == 0 {
            return Err(Error::config("data", "domains, features and classes must be >= 1"));
        }
        if d.samples_per_domain < 10 * self.validators.len().max(1) {
            return Err(Error::config(
                "data.samples_per_domain",
                "too few samples to give every validator a validation split",
            ));
        }
        if d.nuisance >= d.features {
            return Err(Error::config("data.nuisance", "must leave at least one informative feature"));
        }
        for (name, v) in [("data.separation", d.separation), ("data.rotation", d.rotation), ("data.shift", d.shift)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(name, "must be finite and >= 0"));
            }
        }
        if let Some(p) = self.pretrain {
            if p.samples == 0 {
                return Err(Error::config("pretrain.samples", "must be >= 1"));
            }
        }
        if let Some(a) = &self.attack {
            at("attack.spec", a.spec.validate(d.features, d.classes))?;
            if a.attackers.is_empty() {
                return Err(Error::config("attack.attackers", "must name at least one trainer"));
            }
            if let Some(bad) = a.attackers.iter().find(|&&i| i >= self.trainers.len()) {
                return Err(Error::config(
                    "attack.attackers",
                    format!("trainer {bad} does not exist"),
                ));
            }
        }
        Ok(())
    }

    pub fn stake_book(&self) -> Result<StakeBook> {
        StakeBook::new(self.trainers.clone(), self.validators.clone())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(text).map_err(|e| Error::config(json_path_hint(&e), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        ScenarioConfig::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Returns a copy with the value at `dotted.key` replaced.
    ///
    /// `value` is parsed as JSON when possible and taken as a string otherwise,
    /// so both `0.5` and `fedavg` work on the command line.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        let mut node = &mut tree;
        for part in key.split('.') {
            node = match node {
                serde_json::Value::Object(map) => map
                    .get_mut(part)
                    .ok_or_else(|| Error::config(key, format!("no field `{part}`")))?,
                serde_json::Value::Array(items) => {
                    let idx: usize = part
                        .parse()
                        .map_err(|_| Error::config(key, format!("`{part}` is not an index")))?;
                    items
                        .get_mut(idx)
                        .ok_or_else(|| Error::config(key, format!("index {idx} out of range")))?
                }
                _ => return Err(Error::config(key, format!("cannot descend into `{part}`"))),
            };
        }
        *node = serde_json::from_str(value).unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        let cfg: ScenarioConfig =
            serde_json::from_value(tree).map_err(|e| Error::config(key, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn json_path_hint(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    // serde reports the offending field name in backticks
    msg.split('`').nth(1).map_or_else(|| format!("line {}", e.line()), str::to_string)
}

pub const PRESETS: [&str; 3] = ["attack-comparison", "cross-domain", "local-vs-fed"];

fn base(name: &str) -> ScenarioConfig {
    ScenarioConfig {
        name: name.to_string(),
        trainers: vec![
            Stake {
                own: 100.0,
                delegated: 50.0,
                commission: 0.1,
            };
            8
        ],
        validators: vec![
            Stake {
                own: 200.0,
                delegated: 100.0,
                commission: 0.05,
            };
            4
        ],
        econ: EconParams::default(),
        filter: FilterPolicy::default(),
        trainer: TrainerConfig {
            local_epochs: 1,
            batch_size: 32,
            learning_rate: 0.05,
            model: ModelKind::Logistic,
        },
        aggregator: AggregatorKind::Flock,
        fedadam: FedAdamConfig::default(),
        attack: None,
        pretrain: Some(PretrainConfig {
            samples: 2000,
            epochs: 1,
        }),
        rounds: 200,
        data: DomainSpec::default(),
        master_seed: 1,
    }
}

/// Built-in scenario presets.
pub fn preset(name: &str) -> Result<ScenarioConfig> {
    let cfg = match name {
        "attack-comparison" => {
            let mut c = base(name);
            c.attack = Some(AttackConfig {
                spec: BackdoorSpec::default_for(c.data.features, 0),
                attackers: vec![0],
            });
            c
        }
        "cross-domain" => {
            let mut c = base(name);
            c.rounds = 60;
            c
        }
        "local-vs-fed" => {
            let mut c = base(name);
            c.aggregator = AggregatorKind::LocalOnly;
            c.rounds = 60;
            c
        }
        other => {
            return Err(Error::config(
                "preset",
                format!("unknown preset `{other}` (known: {})", PRESETS.join(", ")),
            ))
        }
    };
    cfg.validate()?;
    Ok(cfg)
}
