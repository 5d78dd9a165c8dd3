//! The validation round: trainers submit locally trained models, every
//! validator scores every submission, consensus scores drive filtering and
//! slashing, survivors are aggregated, rewards are settled, and the round is
//! committed to the ledger.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{craft_malicious_update, BackdoorSpec};
use crate::economics::{consensus_scores, settle, EconParams, RewardStatement, ScoreMatrix, StakeBook};
use crate::error::{Error, Result};
use crate::learning::{accuracy, local_train, Dataset, ParamVector, TrainerConfig};
use crate::ledger::Ledger;
use crate::rng;

/// A trainer's model upload for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct Submission {
    pub trainer_id: usize,
    pub round: u64,
    pub params: ParamVector,
    pub payload_digest: [u8; 32],
}

impl Submission {
    pub fn new(trainer_id: usize, round: u64, params: ParamVector) -> Self {
        let payload_digest = params.digest();
        Submission {
            trainer_id,
            round,
            params,
            payload_digest,
        }
    }

    pub fn digest_matches(&self) -> bool {
        self.params.digest() == self.payload_digest
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterPolicy {
    /// Multiplier on the median absolute deviation.
    pub kappa: f64,
    /// Absolute minimum consensus score.
    pub floor: f64,
    /// Fraction of stake removed from a rejected trainer.
    pub slash_fraction: f64,
}

impl Default for FilterPolicy {
    /// `floor` is half the clean FedAvg accuracy (about 0.95) reached on the
    /// default synthetic task.
    fn default() -> Self {
        FilterPolicy {
            kappa: 3.0,
            floor: 0.475,
            slash_fraction: 0.1,
        }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa.is_finite() && self.kappa >= 0.0) {
            return Err(Error::invalid("kappa", "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.floor) {
            return Err(Error::invalid("floor", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.slash_fraction) {
            return Err(Error::invalid("slash_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub accepted: Vec<usize>,
    pub rejected: Vec<usize>,
    /// Score a submission needed to pass.
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlashEvent {
    pub trainer: usize,
    pub amount: f64,
}

/// Everything decided in one round; the ledger payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    /// Hex SHA-256 of each trainer's submitted parameters.
    pub submissions: Vec<String>,
    pub score_matrix: ScoreMatrix,
    pub consensus: Vec<f64>,
    pub accepted: Vec<usize>,
    pub slashes: BTreeMap<usize, f64>,
    /// Stakes the settlement was computed against (after this round's slashing).
    pub stakes: StakeBook,
    pub econ: EconParams,
    pub reward_statement: RewardStatement,
    /// Hex SHA-256 of the aggregated global model.
    pub global_digest: String,
}

impl RoundRecord {
    pub fn slashed_total(&self) -> f64 {
        self.slashes.values().sum()
    }
}

/// Accuracy of each submission on each validator's held-out set.
pub fn score_submissions(submissions: &[Submission], validation_sets: &[Dataset]) -> Result<ScoreMatrix> {
    if validation_sets.iter().any(Dataset::is_empty) {
        return Err(Error::Empty("validator holds an empty validation set".into()));
    }
    for s in submissions {
        if !s.digest_matches() {
            return Err(Error::invalid(
                "submission",
                format!("payload digest of trainer {} does not match", s.trainer_id),
            ));
        }
    }
    let rows: Vec<Vec<f64>> = validation_sets
        .par_iter()
        .map(|vs| {
            submissions
                .iter()
                .map(|s| accuracy(&s.params, vs))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    ScoreMatrix::from_rows(rows)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Rejects submissions scoring below `max(floor, median - kappa * MAD)`.
///
/// If that would reject everyone, the highest scorer (lowest index on ties)
/// is kept alone.
pub fn filter_submissions(consensus: &[f64], policy: &FilterPolicy) -> FilterOutcome {
    if consensus.is_empty() {
        return FilterOutcome {
            accepted: vec![],
            rejected: vec![],
            threshold: policy.floor,
        };
    }
    let med = median(consensus);
    let deviations: Vec<f64> = consensus.iter().map(|c| (c - med).abs()).collect();
    let mad = median(&deviations);
    let threshold = policy.floor.max(med - policy.kappa * mad);
    let (mut accepted, mut rejected): (Vec<usize>, Vec<usize>) =
        (0..consensus.len()).partition(|&i| consensus[i] >= threshold);
    if accepted.is_empty() {
        let best = (0..consensus.len())
            .reduce(|a, b| if consensus[b] > consensus[a] { b } else { a })
            .unwrap_or(0);
        rejected.retain(|&i| i != best);
        accepted.push(best);
    }
    FilterOutcome {
        accepted,
        rejected,
        threshold,
    }
}

/// Scales the own and delegated stake of each rejected trainer by
/// `1 - slash_fraction`.
pub fn slash(stakes: &StakeBook, rejected: &[usize], policy: &FilterPolicy) -> Result<(StakeBook, Vec<SlashEvent>)> {
    let mut out = stakes.clone();
    let mut events = Vec::with_capacity(rejected.len());
    let keep = 1.0 - policy.slash_fraction;
    for &i in rejected {
        let s = out
            .trainers
            .get_mut(i)
            .ok_or_else(|| Error::invalid("rejected", format!("no trainer {i}")))?;
        let before = s.total();
        s.own = (s.own * keep).max(0.0);
        s.delegated = (s.delegated * keep).max(0.0);
        events.push(SlashEvent {
            trainer: i,
            amount: before - s.total(),
        });
    }
    Ok((out, events))
}

/// Mean of the accepted submissions weighted by `stake * consensus`.
pub fn aggregate_accepted(
    submissions: &[Submission],
    accepted: &[usize],
    consensus: &[f64],
    stakes: &StakeBook,
) -> Result<ParamVector> {
    if accepted.is_empty() {
        return Err(Error::Empty("no accepted submissions to aggregate".into()));
    }
    let find = |i: usize| {
        submissions
            .iter()
            .find(|s| s.trainer_id == i)
            .ok_or_else(|| Error::invalid("accepted", format!("trainer {i} submitted nothing")))
    };
    let weights: Vec<f64> = accepted
        .iter()
        .map(|&i| {
            let stake = stakes.trainers.get(i).map(|s| s.total()).unwrap_or(0.0);
            stake * consensus.get(i).copied().unwrap_or(0.0)
        })
        .collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateStake(
            "accepted submissions carry no stake-weighted score".into(),
        ));
    }
    let first = find(accepted[0])?;
    if accepted.len() == 1 {
        return Ok(first.params.clone());
    }
    // offsets from the first survivor keep identical submissions exact
    let mut out = first.params.clone();
    for (&i, w) in accepted.iter().zip(&weights).skip(1) {
        let s = find(i)?;
        first.params.check_same_shape(&s.params)?;
        let w = w / total;
        for ((o, v), f) in out.values.iter_mut().zip(&s.params.values).zip(&first.params.values) {
            *o += w * (v - f);
        }
    }
    Ok(out)
}

/// How a trainer produces its submission.
#[derive(Debug, Clone, PartialEq)]
pub enum Behavior {
    Honest,
    /// Trains on its (already poisoned) data and boosts the delta.
    Backdoor(BackdoorSpec),
}

#[derive(Debug, Clone)]
pub struct TrainerNode {
    pub data: Dataset,
    pub behavior: Behavior,
}

/// Static description of the network a round runs on.
#[derive(Debug, Clone)]
pub struct Network {
    pub trainers: Vec<TrainerNode>,
    /// One held-out set per validator.
    pub validation_sets: Vec<Dataset>,
    pub trainer_config: TrainerConfig,
    pub filter: FilterPolicy,
    pub econ: EconParams,
    pub master_seed: u64,
}

impl Network {
    /// Local update of trainer `i` starting from `global` in `round`.
    pub fn local_update(&self, i: usize, global: &ParamVector, round: u64) -> Result<ParamVector> {
        let node = &self.trainers[i];
        let mut stream = rng::stream(self.master_seed, "local", &[i as u64, round]);
        match &node.behavior {
            Behavior::Honest => local_train(global, &node.data, &self.trainer_config, &mut stream),
            Behavior::Backdoor(spec) => {
                craft_malicious_update(global, &node.data, &self.trainer_config, spec, &mut stream)
            }
        }
    }
}

/// Mutable protocol state carried between rounds.
#[derive(Debug, Clone)]
pub struct ProtocolState {
    pub global: ParamVector,
    pub stakes: StakeBook,
    /// Index of the next round to run.
    pub round: u64,
    pub ledger: Ledger,
}

impl ProtocolState {
    pub fn new(global: ParamVector, stakes: StakeBook) -> Self {
        ProtocolState {
            global,
            stakes,
            round: 0,
            ledger: Ledger::new(),
        }
    }
}

/// Runs one full round and commits it to the ledger.
pub fn run_round(state: &mut ProtocolState, net: &Network) -> Result<RoundRecord> {
    let n = net.trainers.len();
    if state.stakes.trainers.len() != n || state.stakes.validators.len() != net.validation_sets.len() {
        return Err(Error::DimensionMismatch(
            "stake book does not match the network".into(),
        ));
    }
    let round = state.round;

    let submissions: Vec<Submission> = (0..n)
        .into_par_iter()
        .map(|i| {
            net.local_update(i, &state.global, round)
                .map(|p| Submission::new(i, round, p))
        })
        .collect::<Result<_>>()?;

    let scores = score_submissions(&submissions, &net.validation_sets)?;
    let consensus = consensus_scores(&scores, &state.stakes.validators)?;
    let outcome = filter_submissions(&consensus, &net.filter);
    let (stakes, events) = slash(&state.stakes, &outcome.rejected, &net.filter)?;
    let global = aggregate_accepted(&submissions, &outcome.accepted, &consensus, &stakes)?;
    let reward_statement = settle(&net.econ, &stakes, &scores)?;

    let record = RoundRecord {
        round,
        submissions: submissions.iter().map(|s| hex::encode(s.payload_digest)).collect(),
        score_matrix: scores,
        consensus,
        accepted: outcome.accepted,
        slashes: events.iter().map(|e| (e.trainer, e.amount)).collect(),
        stakes: stakes.clone(),
        econ: net.econ,
        reward_statement,
        global_digest: hex::encode(global.digest()),
    };
    state.ledger.append(&record)?;
    state.global = global;
    state.stakes = stakes;
    state.round += 1;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::economics::Stake;
    use crate::learning::{synth_domains, DomainSpec, ModelKind, ModelShape};

    fn policy() -> FilterPolicy {
        FilterPolicy {
            kappa: 3.0,
            floor: 0.5,
            slash_fraction: 0.1,
        }
    }

    #[test]
    fn filter_examples() {
        let out = filter_submissions(&[0.7; 5], &FilterPolicy { floor: 0.0, ..policy() });
        assert_eq!(out.accepted, vec![0, 1, 2, 3, 4]);
        assert_eq!(out.threshold, 0.7);

        let out = filter_submissions(&[0.9, 0.9, 0.9, 0.2], &policy());
        assert_eq!(out.accepted, vec![0, 1, 2]);
        assert_eq!(out.rejected, vec![3]);

        let out = filter_submissions(&[0.1], &policy());
        assert_eq!(out.accepted, vec![0]);

        // everyone under the floor: the best one survives
        let out = filter_submissions(&[0.2, 0.4, 0.1], &policy());
        assert_eq!(out.accepted, vec![1]);
        assert_eq!(out.rejected, vec![0, 2]);
    }

    #[test]
    fn filter_uses_mad() {
        // median .78, deviations (.02, 0, .04, .02, .28) -> MAD .02, threshold .72
        let out = filter_submissions(&[0.8, 0.78, 0.82, 0.76, 0.5], &FilterPolicy { floor: 0.0, ..policy() });
        assert!((out.threshold - 0.72).abs() < 1e-12);
        assert_eq!(out.rejected, vec![4]);
    }

    #[test]
    fn slash_examples() {
        let book = StakeBook::new(
            vec![Stake::new(10.0, 10.0, 0.1).unwrap(), Stake::solo(5.0)],
            vec![Stake::solo(1.0)],
        )
        .unwrap();
        let (after, ev) = slash(&book, &[0], &policy()).unwrap();
        assert!((after.trainers[0].own - 9.0).abs() < 1e-12);
        assert!((after.trainers[0].delegated - 9.0).abs() < 1e-12);
        assert!((ev[0].amount - 2.0).abs() < 1e-12);
        assert_eq!(after.trainers[1], book.trainers[1]);

        let (same, ev) = slash(&book, &[], &policy()).unwrap();
        assert_eq!((same, ev.len()), (book.clone(), 0));
        let (same, _) = slash(&book, &[0, 1], &FilterPolicy { slash_fraction: 0.0, ..policy() }).unwrap();
        assert_eq!(same, book);
        assert!(slash(&book, &[7], &policy()).is_err());
    }

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_values(v.to_vec(), ModelShape::new(1, v.len() / 2, ModelKind::Logistic)).unwrap()
    }

    #[test]
    fn aggregate_examples() {
        let book = StakeBook::new(vec![Stake::solo(2.0); 3], vec![Stake::solo(1.0)]).unwrap();
        let subs = vec![
            Submission::new(0, 0, pv(&[0.0, 2.0])),
            Submission::new(1, 0, pv(&[2.0, 4.0])),
            Submission::new(2, 0, pv(&[9.0, 9.0])),
        ];
        let c = [0.5, 0.5, 0.5];
        assert_eq!(aggregate_accepted(&subs, &[2], &c, &book).unwrap(), subs[2].params);
        assert_eq!(aggregate_accepted(&subs, &[0, 1], &c, &book).unwrap().values, vec![1.0, 3.0]);
        assert!(aggregate_accepted(&subs, &[], &c, &book).is_err());
    }

    #[test]
    fn aggregate_against_scalar_loop() {
        let book = StakeBook::new(
            vec![Stake::solo(1.0), Stake::new(2.0, 1.5, 0.3).unwrap(), Stake::solo(0.5)],
            vec![Stake::solo(1.0)],
        )
        .unwrap();
        let subs = vec![
            Submission::new(0, 0, pv(&[1.0, -1.0, 0.5, 2.0])),
            Submission::new(1, 0, pv(&[0.0, 3.0, -2.0, 1.0])),
            Submission::new(2, 0, pv(&[4.0, 0.0, 1.0, 1.0])),
        ];
        let c = [0.9, 0.6, 0.75];
        let got = aggregate_accepted(&subs, &[0, 1, 2], &c, &book).unwrap();
        let w = [1.0 * 0.9, 3.5 * 0.6, 0.5 * 0.75];
        let wsum: f64 = w.iter().sum();
        for k in 0..4 {
            let mut acc = 0.0;
            for i in 0..3 {
                acc += w[i] * subs[i].params.values[k];
            }
            assert!((got.values[k] - acc / wsum).abs() < 1e-14);
        }
    }

    #[test]
    fn scoring_examples() {
        let ds = Dataset::new(vec![1.0, -1.0, 2.0, -3.0], vec![1, 0, 1, 0], 1, 2, 0).unwrap();
        // sign classifier is perfect, bias-only model always says class 0
        let perfect = Submission::new(0, 0, pv(&[-1.0, 1.0, 0.0, 0.0]));
        let constant = Submission::new(1, 0, pv(&[0.0, 0.0, 1.0, 0.0]));
        let m = score_submissions(&[perfect, constant], &[ds.clone(), ds.clone()]).unwrap();
        assert_eq!((m.get(0, 0), m.get(1, 0)), (1.0, 1.0));
        assert_eq!((m.get(0, 1), m.get(1, 1)), (0.5, 0.5));

        let mut forged = Submission::new(0, 0, pv(&[0.0, 0.0, 0.0, 0.0]));
        forged.params.values[0] = 1.0;
        assert!(score_submissions(&[forged], &[ds]).is_err());
    }

    fn tiny_network(epochs: usize) -> (Network, ProtocolState) {
        let spec = DomainSpec {
            domains: 3,
            features: 6,
            classes: 3,
            samples_per_domain: 150,
            nuisance: 0,
            ..DomainSpec::default()
        };
        let doms = synth_domains(&spec, 21).unwrap();
        let trainers = doms
            .iter()
            .map(|d| TrainerNode {
                data: d.train.clone(),
                behavior: Behavior::Honest,
            })
            .collect();
        let tests: Vec<&Dataset> = doms.iter().map(|d| &d.test).collect();
        let pooled = Dataset::concat(&tests).unwrap();
        let half: Vec<usize> = (0..pooled.len()).collect();
        let validation_sets = vec![
            pooled.subset(&half[..pooled.len() / 2]).unwrap(),
            pooled.subset(&half[pooled.len() / 2..]).unwrap(),
        ];
        let cfg = TrainerConfig {
            local_epochs: epochs,
            batch_size: 16,
            learning_rate: 0.05,
            model: ModelKind::Logistic,
        };
        let net = Network {
            trainers,
            validation_sets,
            trainer_config: cfg,
            filter: FilterPolicy { floor: 0.2, ..policy() },
            econ: EconParams::default(),
            master_seed: 5,
        };
        let stakes = StakeBook::new(
            vec![Stake::solo(10.0), Stake::new(5.0, 5.0, 0.2).unwrap(), Stake::solo(20.0)],
            vec![Stake::solo(7.0), Stake::new(3.0, 6.0, 0.1).unwrap()],
        )
        .unwrap();
        let state = ProtocolState::new(ParamVector::zeros(ModelShape::new(6, 3, ModelKind::Logistic)), stakes);
        (net, state)
    }

    #[test]
    fn zero_local_steps_leave_global_unchanged() {
        let (net, mut state) = tiny_network(0);
        let before = state.global.clone();
        let rec = run_round(&mut state, &net).unwrap();
        assert_eq!(state.global, before);
        assert!(rec.submissions.iter().all(|d| d == &rec.submissions[0]));
        assert_eq!(rec.accepted, vec![0, 1, 2]);
        assert!(rec.slashes.is_empty());
    }

    #[test]
    fn replayed_rounds_are_bit_identical() {
        let (net, mut a) = tiny_network(1);
        let (_, mut b) = tiny_network(1);
        for _ in 0..3 {
            run_round(&mut a, &net).unwrap();
            run_round(&mut b, &net).unwrap();
        }
        let da: Vec<_> = a.ledger.entries().iter().map(|e| e.digest).collect();
        let db: Vec<_> = b.ledger.entries().iter().map(|e| e.digest).collect();
        assert_eq!(da, db);
    }

    #[test]
    fn round_matches_hand_driven_composition() {
        let (net, mut state) = tiny_network(2);
        let start = state.clone();
        let rec = run_round(&mut state, &net).unwrap();

        let subs: Vec<Submission> = (0..3)
            .map(|i| {
                let mut s = rng::stream(5, "local", &[i as u64, 0]);
                let p = local_train(&start.global, &net.trainers[i].data, &net.trainer_config, &mut s).unwrap();
                Submission::new(i, 0, p)
            })
            .collect();
        let scores = score_submissions(&subs, &net.validation_sets).unwrap();
        let consensus = consensus_scores(&scores, &start.stakes.validators).unwrap();
        let f = filter_submissions(&consensus, &net.filter);
        let (stakes, _) = slash(&start.stakes, &f.rejected, &net.filter).unwrap();
        let global = aggregate_accepted(&subs, &f.accepted, &consensus, &stakes).unwrap();
        let statement = settle(&net.econ, &stakes, &scores).unwrap();

        assert_eq!(rec.score_matrix, scores);
        assert_eq!(rec.consensus, consensus);
        assert_eq!(rec.accepted, f.accepted);
        assert_eq!(rec.reward_statement, statement);
        assert_eq!(state.global, global);
        assert_eq!(state.ledger.len(), 1);
    }
}
