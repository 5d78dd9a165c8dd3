use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{AggregatorKind, ScenarioConfig};
use crate::adversary::{attack_success_rate, poison_dataset, BackdoorSpec};
use crate::economics::StakeBook;
use crate::error::{Error, Result};
use crate::learning::{
    cross_domain_matrix, evaluate, fedadam_round, fedavg, local_train, scaffold_round, synth_base, synth_domains, Dataset,
    FedAdamState, ModelShape, ParamVector, ScaffoldClient, ScaffoldState, TrainerConfig,
};
use crate::ledger::Ledger;
use crate::matrix::Matrix;
use crate::protocol::{run_round, Behavior, Network, ProtocolState, TrainerNode};
use crate::rng;

/// One line of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// 1-based index of the completed round.
    pub round: usize,
    pub accuracy: f64,
    pub loss: f64,
    /// Present iff an attack is configured.
    pub asr: Option<f64>,
    pub accepted: usize,
    pub slashed_total: f64,
    pub reward_trainers: f64,
    pub reward_validators: f64,
    /// Per-trainer consensus score; empty when nothing was validated.
    pub consensus: Vec<f64>,
}

pub const METRICS_FIXED_COLUMNS: [&str; 8] = [
    "round",
    "accuracy",
    "loss",
    "asr",
    "accepted",
    "slashed_total",
    "reward_trainers",
    "reward_validators",
];

pub fn metrics_header(trainers: usize) -> Vec<String> {
    METRICS_FIXED_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain((0..trainers).map(|i| format!("consensus_{i}")))
        .collect()
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], trainers: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(metrics_header(trainers))?;
    for r in rows {
        let mut rec = vec![
            r.round.to_string(),
            r.accuracy.to_string(),
            r.loss.to_string(),
            r.asr.map(|a| a.to_string()).unwrap_or_default(),
            r.accepted.to_string(),
            r.slashed_total.to_string(),
            r.reward_trainers.to_string(),
            r.reward_validators.to_string(),
        ];
        for i in 0..trainers {
            rec.push(r.consensus.get(i).map(|c| c.to_string()).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Data as the simulation partitions it.
#[derive(Debug, Clone)]
pub struct ScenarioData {
    /// Training data per trainer (poisoned for attackers).
    pub trainer_data: Vec<Dataset>,
    /// Held-out set per validator.
    pub validation_sets: Vec<Dataset>,
    /// Clean evaluation split of each domain.
    pub domain_tests: Vec<Dataset>,
    /// All domain evaluation splits stacked.
    pub eval: Dataset,
}

impl ScenarioData {
    /// Trainer `i` gets domain `i mod k`. Each domain's test split is halved:
    /// the first half is clean evaluation data, the second is dealt
    /// round-robin to the validators.
    pub fn build(cfg: &ScenarioConfig) -> Result<Self> {
        let domains = synth_domains(&cfg.data, cfg.master_seed)?;
        let m = cfg.validators.len();
        let mut domain_tests = Vec::with_capacity(domains.len());
        let mut validator_rows: Vec<Vec<&Dataset>> = vec![Vec::new(); m];
        let mut val_parts: Vec<Dataset> = Vec::new();
        for d in &domains {
            let n = d.test.len();
            let half = n / 2;
            domain_tests.push(d.test.subset(&(0..half).collect::<Vec<_>>())?);
            for j in 0..m {
                let rows: Vec<usize> = (half..n).filter(|r| (r - half) % m == j).collect();
                val_parts.push(d.test.subset(&rows)?);
            }
        }
        for (k, part) in val_parts.iter().enumerate() {
            validator_rows[k % m].push(part);
        }
        let validation_sets = validator_rows
            .iter()
            .map(|parts| Dataset::concat(parts))
            .collect::<Result<Vec<_>>>()?;
        let eval = Dataset::concat(&domain_tests.iter().collect::<Vec<_>>())?;

        let mut trainer_data = Vec::with_capacity(cfg.trainers.len());
        for i in 0..cfg.trainers.len() {
            let clean = &domains[i % domains.len()].train;
            let data = match attacker_spec(cfg, i) {
                Some(spec) => {
                    let mut s = rng::stream(cfg.master_seed, "poison", &[i as u64]);
                    poison_dataset(clean, spec, &mut s)?
                }
                None => clean.clone(),
            };
            trainer_data.push(data);
        }
        Ok(ScenarioData {
            trainer_data,
            validation_sets,
            domain_tests,
            eval,
        })
    }
}

fn attacker_spec(cfg: &ScenarioConfig, i: usize) -> Option<&BackdoorSpec> {
    cfg.attack
        .as_ref()
        .filter(|a| a.attackers.contains(&i))
        .map(|a| &a.spec)
}

enum Engine {
    Flock(ProtocolState),
    Fedavg(ParamVector),
    Scaffold(ParamVector, ScaffoldState),
    Fedadam(ParamVector, FedAdamState),
    LocalOnly(Vec<ParamVector>),
}

/// A scenario stepped one round at a time.
pub struct Simulation {
    config: ScenarioConfig,
    data: ScenarioData,
    network: Network,
    engine: Engine,
    round: usize,
    metrics: Vec<MetricsRow>,
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub config: ScenarioConfig,
    pub metrics: Vec<MetricsRow>,
    /// Present for the `flock` aggregator only.
    pub ledger: Option<Ledger>,
    /// The global model, or one model per trainer for `local_only`.
    pub final_models: Vec<ParamVector>,
    /// Accuracy of each final model (rows) on each domain's clean test split.
    pub cross_domain: Matrix,
    pub final_stakes: Option<StakeBook>,
}

impl Simulation {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let data = ScenarioData::build(&config)?;
        let trainers = data
            .trainer_data
            .iter()
            .enumerate()
            .map(|(i, d)| TrainerNode {
                data: d.clone(),
                behavior: match attacker_spec(&config, i) {
                    Some(spec) => Behavior::Backdoor(spec.clone()),
                    None => Behavior::Honest,
                },
            })
            .collect();
        let network = Network {
            trainers,
            validation_sets: data.validation_sets.clone(),
            trainer_config: config.trainer,
            filter: config.filter,
            econ: config.econ,
            master_seed: config.master_seed,
        };
        let shape = ModelShape::new(config.data.features, config.data.classes, config.trainer.model);
        let mut init = ParamVector::init(shape, &mut rng::stream(config.master_seed, "init", &[]));
        if let Some(p) = config.pretrain {
            let base = synth_base(&config.data, config.master_seed, p.samples)?;
            let cfg = TrainerConfig {
                local_epochs: p.epochs,
                ..config.trainer
            };
            init = local_train(&init, &base, &cfg, &mut rng::stream(config.master_seed, "pretrain", &[]))?;
        }
        let n = config.trainers.len();
        let engine = match config.aggregator {
            AggregatorKind::Flock => Engine::Flock(ProtocolState::new(init, config.stake_book()?)),
            AggregatorKind::Fedavg => Engine::Fedavg(init),
            AggregatorKind::Scaffold => Engine::Scaffold(init, ScaffoldState::new(shape, n)),
            AggregatorKind::Fedadam => {
                let f = config.fedadam;
                let st = FedAdamState::new(shape.len(), f.beta1, f.beta2, f.epsilon, f.server_lr)?;
                Engine::Fedadam(init, st)
            }
            AggregatorKind::LocalOnly => Engine::LocalOnly(vec![init; n]),
        };
        Ok(Simulation {
            config,
            data,
            network,
            engine,
            round: 0,
            metrics: Vec::new(),
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn data(&self) -> &ScenarioData {
        &self.data
    }

    pub fn rounds_done(&self) -> usize {
        self.round
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    /// Current shared model(s): one global model, or every specialist for `local_only`.
    pub fn models(&self) -> Vec<ParamVector> {
        match &self.engine {
            Engine::Flock(st) => vec![st.global.clone()],
            Engine::Fedavg(g) | Engine::Scaffold(g, _) | Engine::Fedadam(g, _) => vec![g.clone()],
            Engine::LocalOnly(ms) => ms.clone(),
        }
    }

    fn client_sizes(&self) -> Vec<f64> {
        self.data.trainer_data.iter().map(|d| d.len() as f64).collect()
    }

    fn local_updates(&self, global: &ParamVector, round: u64) -> Result<Vec<ParamVector>> {
        (0..self.network.trainers.len())
            .into_par_iter()
            .map(|i| self.network.local_update(i, global, round))
            .collect()
    }

    /// Runs one round and returns its metrics row.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let round = self.round as u64;
        let n = self.config.trainers.len();
        let mut row = MetricsRow {
            round: self.round + 1,
            accuracy: 0.0,
            loss: 0.0,
            asr: None,
            accepted: n,
            slashed_total: 0.0,
            reward_trainers: 0.0,
            reward_validators: 0.0,
            consensus: Vec::new(),
        };
        let engine = std::mem::replace(&mut self.engine, Engine::LocalOnly(Vec::new()));
        let next = match engine {
            Engine::Flock(mut st) => {
                let rec = run_round(&mut st, &self.network)?;
                row.accepted = rec.accepted.len();
                row.slashed_total = rec.slashed_total();
                let rs = &rec.reward_statement;
                row.reward_trainers = rs.trainer_operator_rewards.iter().sum::<f64>()
                    + rs.trainer_delegator_rewards.iter().sum::<f64>();
                row.reward_validators = rs.validator_operator_rewards.iter().sum::<f64>()
                    + rs.validator_delegator_rewards.iter().sum::<f64>();
                row.consensus = rec.consensus;
                Engine::Flock(st)
            }
            Engine::Fedavg(g) => {
                let updates = self.local_updates(&g, round)?;
                Engine::Fedavg(fedavg(&updates, &self.client_sizes())?)
            }
            Engine::Fedadam(g, st) => {
                let updates = self.local_updates(&g, round)?;
                let (g, st) = fedadam_round(&g, &st, &updates, &self.client_sizes())?;
                Engine::Fedadam(g, st)
            }
            Engine::Scaffold(g, st) => {
                let clients = self
                    .data
                    .trainer_data
                    .iter()
                    .enumerate()
                    .map(|(i, d)| {
                        let attack = attacker_spec(&self.config, i);
                        ScaffoldClient {
                            dataset: d,
                            rng: rng::stream(self.config.master_seed, "local", &[i as u64, round]),
                            weight: d.len() as f64,
                            // attackers craft the same plain, boosted update as under every aggregator
                            boost: attack.map_or(1.0, |s| s.boost_factor),
                            corrected: attack.is_none(),
                        }
                    })
                    .collect();
                let (g, st) = scaffold_round(&g, &st, clients, &self.config.trainer)?;
                Engine::Scaffold(g, st)
            }
            Engine::LocalOnly(models) => {
                let next = models
                    .par_iter()
                    .enumerate()
                    .map(|(i, m)| self.network.local_update(i, m, round))
                    .collect::<Result<Vec<_>>>()?;
                Engine::LocalOnly(next)
            }
        };
        self.engine = next;

        let models = self.models();
        let spec = self.config.attack.as_ref().map(|a| &a.spec);
        let evals = models
            .par_iter()
            .map(|m| {
                let (acc, loss) = evaluate(m, &self.data.eval)?;
                let asr = spec.map(|s| attack_success_rate(m, &self.data.eval, s)).transpose()?;
                Ok((acc, loss, asr))
            })
            .collect::<Result<Vec<_>>>()?;
        let k = evals.len() as f64;
        row.accuracy = evals.iter().map(|e| e.0).sum::<f64>() / k;
        row.loss = evals.iter().map(|e| e.1).sum::<f64>() / k;
        row.asr = spec.map(|_| evals.iter().filter_map(|e| e.2).sum::<f64>() / k);

        let finite = [row.accuracy, row.loss, row.slashed_total, row.reward_trainers, row.reward_validators]
            .iter()
            .chain(row.asr.iter())
            .chain(row.consensus.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite(format!("metrics of round {}", row.round)));
        }
        self.round += 1;
        self.metrics.push(row.clone());
        Ok(row)
    }

    pub fn run(mut self) -> Result<ScenarioResult> {
        while self.round < self.config.rounds {
            self.step()?;
        }
        self.finish()
    }

    pub fn finish(self) -> Result<ScenarioResult> {
        let final_models = self.models();
        let cross_domain = cross_domain_matrix(&final_models, &self.data.domain_tests)?;
        let (ledger, final_stakes) = match self.engine {
            Engine::Flock(st) => (Some(st.ledger), Some(st.stakes)),
            _ => (None, None),
        };
        Ok(ScenarioResult {
            config: self.config,
            metrics: self.metrics,
            ledger,
            final_models,
            cross_domain,
            final_stakes,
        })
    }
}

/// Runs `config.rounds` rounds.
pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioResult> {
    Simulation::new(config.clone())?.run()
}

impl ScenarioResult {
    pub fn metrics_csv(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        write_metrics_csv(&self.metrics, self.config.trainers.len(), &mut buf)?;
        Ok(buf)
    }

    pub fn cross_domain_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["model".to_string()];
        header.extend((0..self.cross_domain.cols()).map(|b| format!("domain_{b}")));
        w.write_record(&header)?;
        for a in 0..self.cross_domain.rows() {
            let label = if self.config.aggregator == AggregatorKind::LocalOnly {
                format!("trainer_{a}")
            } else {
                "global".to_string()
            };
            let mut rec = vec![label];
            rec.extend(self.cross_domain.row(a).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }

    /// Writes `metrics.csv`, `cross_domain.csv`, `final_models.json`,
    /// `config.json`, and for `flock` runs `ledger.bin` plus `ledger.jsonl`.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), self.metrics_csv()?)?;
        std::fs::write(dir.join("cross_domain.csv"), self.cross_domain_csv()?)?;
        std::fs::write(
            dir.join("final_models.json"),
            serde_json::to_vec(&self.final_models)?,
        )?;
        std::fs::write(dir.join("config.json"), self.config.to_json_pretty())?;
        if let Some(ledger) = &self.ledger {
            ledger.save(&dir.join("ledger.bin"))?;
            ledger.export_jsonl(&dir.join("ledger.jsonl"))?;
        }
        Ok(())
    }
}
