//! Reward economics for a single validation task.
//!
//! A task reward `r0` is split into a trainer pool and a validator pool,
//! interpolating between a flat split and a stake-proportional one. Trainers
//! are paid by rank (geometric weights) combined with stake; validators are
//! paid by how close their scores sit to the stake-weighted consensus, through
//! a softmax over negative distance scaled by stake. Every gross reward is
//! then divided between the operator and its delegators using the operator's
//! commission rate.
//!
//! Everything here is pure `f64` arithmetic with no randomness and no I/O.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::matrix::Matrix;

/// Stake backing one participant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stake {
    pub own: f64,
    pub delegated: f64,
    /// Fraction of gross reward the operator keeps before the delegator split.
    pub commission: f64,
}

impl Stake {
    pub fn new(own: f64, delegated: f64, commission: f64) -> Result<Self> {
        let stake = Stake {
            own,
            delegated,
            commission,
        };
        stake.validate("stake")?;
        Ok(stake)
    }

    /// Stake with no delegation and zero commission.
    pub fn solo(own: f64) -> Self {
        Stake {
            own,
            delegated: 0.0,
            commission: 0.0,
        }
    }

    pub fn total(&self) -> f64 {
        self.own + self.delegated
    }

    pub(crate) fn validate(&self, path: &str) -> Result<()> {
        if !(self.own.is_finite() && self.own >= 0.0) {
            return Err(Error::invalid(&format!("{path}.own"), "must be finite and >= 0"));
        }
        if !(self.delegated.is_finite() && self.delegated >= 0.0) {
            return Err(Error::invalid(
                &format!("{path}.delegated"),
                "must be finite and >= 0",
            ));
        }
        if !(0.0..=1.0).contains(&self.commission) {
            return Err(Error::invalid(
                &format!("{path}.commission"),
                "must lie in [0, 1]",
            ));
        }
        Ok(())
    }
}

/// Stakes of every trainer and validator taking part in a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StakeBook {
    pub trainers: Vec<Stake>,
    pub validators: Vec<Stake>,
}

impl StakeBook {
    pub fn new(trainers: Vec<Stake>, validators: Vec<Stake>) -> Result<Self> {
        let book = StakeBook {
            trainers,
            validators,
        };
        book.validate()?;
        Ok(book)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trainers.is_empty() {
            return Err(Error::Empty("stake book has no trainers".into()));
        }
        if self.validators.is_empty() {
            return Err(Error::Empty("stake book has no validators".into()));
        }
        for (i, s) in self.trainers.iter().enumerate() {
            s.validate(&format!("trainers[{i}]"))?;
        }
        for (j, s) in self.validators.iter().enumerate() {
            s.validate(&format!("validators[{j}]"))?;
        }
        if self.trainer_total() <= 0.0 {
            return Err(Error::DegenerateStake("no trainer holds stake".into()));
        }
        if self.validator_total() <= 0.0 {
            return Err(Error::DegenerateStake("no validator holds stake".into()));
        }
        Ok(())
    }

    pub fn trainer_total(&self) -> f64 {
        self.trainers.iter().map(Stake::total).sum()
    }

    pub fn validator_total(&self) -> f64 {
        self.validators.iter().map(Stake::total).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EconParams {
    /// Reward released per task.
    pub r0: f64,
    /// Flat share of the pool split, in `[0, 0.5]`.
    pub gamma: f64,
    /// Common ratio of the rank weights, in `(0, 1)`.
    pub q: f64,
    pub alpha_t: f64,
    pub alpha_v: f64,
    /// Sensitivity of validator rewards to score distance.
    pub lambda_v: f64,
}

impl Default for EconParams {
    fn default() -> Self {
        EconParams {
            r0: 1000.0,
            gamma: 0.2,
            q: 0.8,
            alpha_t: 1.0,
            alpha_v: 1.0,
            lambda_v: 10.0,
        }
    }
}

impl EconParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.r0.is_finite() && self.r0 > 0.0) {
            return Err(Error::invalid("r0", "must be finite and > 0"));
        }
        if !(0.0..=0.5).contains(&self.gamma) {
            return Err(Error::invalid("gamma", "must lie in [0, 0.5]"));
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(Error::invalid("q", "must lie in (0, 1)"));
        }
        for (name, v) in [
            ("alpha_t", self.alpha_t),
            ("alpha_v", self.alpha_v),
            ("lambda_v", self.lambda_v),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(name, "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// Validator judgments: entry `(j, i)` is validator `j`'s score of submission `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScoreMatrix(Matrix);

impl ScoreMatrix {
    /// Builds a score matrix from validator rows, clamping each entry into `[0, 1]`.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Matrix::from_rows(rows)?;
        for v in m.values_mut() {
            if v.is_nan() {
                return Err(Error::NonFinite("score matrix".into()));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(ScoreMatrix(m))
    }

    pub fn validators(&self) -> usize {
        self.0.rows()
    }

    pub fn submissions(&self) -> usize {
        self.0.cols()
    }

    pub fn get(&self, validator: usize, submission: usize) -> f64 {
        self.0.get(validator, submission)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }
}

/// Outcome of settling one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardStatement {
    pub pool_train: f64,
    pub pool_val: f64,
    /// 1-based rank of each trainer, indexed by trainer.
    pub trainer_ranks: Vec<usize>,
    pub trainer_shares: Vec<f64>,
    pub trainer_operator_rewards: Vec<f64>,
    pub trainer_delegator_rewards: Vec<f64>,
    /// Fraction of the validator pool earned by each validator.
    pub validator_shares: Vec<f64>,
    pub validator_operator_rewards: Vec<f64>,
    pub validator_delegator_rewards: Vec<f64>,
    pub consensus: Vec<f64>,
}

impl RewardStatement {
    pub fn total_distributed(&self) -> f64 {
        self.trainer_operator_rewards
            .iter()
            .chain(&self.trainer_delegator_rewards)
            .chain(&self.validator_operator_rewards)
            .chain(&self.validator_delegator_rewards)
            .sum()
    }

    pub fn trainer_gross(&self, i: usize) -> f64 {
        self.trainer_operator_rewards[i] + self.trainer_delegator_rewards[i]
    }

    pub fn validator_gross(&self, j: usize) -> f64 {
        self.validator_operator_rewards[j] + self.validator_delegator_rewards[j]
    }
}

/// `base^exponent` with `0^0 = 1` and `0^a = 0` for `a > 0`.
pub fn stake_power(base: f64, exponent: f64) -> f64 {
    if exponent == 0.0 {
        1.0
    } else if base == 0.0 {
        0.0
    } else {
        base.powf(exponent)
    }
}

/// Stake-weighted mean of validator scores for each submission.
pub fn consensus_scores(scores: &ScoreMatrix, validators: &[Stake]) -> Result<Vec<f64>> {
    if scores.validators() != validators.len() {
        return Err(Error::DimensionMismatch(format!(
            "score matrix has {} validator rows but {} validator stakes were given",
            scores.validators(),
            validators.len()
        )));
    }
    let total: f64 = validators.iter().map(Stake::total).sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateStake(
            "total validator stake is zero".into(),
        ));
    }
    let consensus = (0..scores.submissions())
        .map(|i| {
            let weighted: f64 = validators
                .iter()
                .enumerate()
                .map(|(j, s)| scores.get(j, i) * s.total())
                .sum();
            (weighted / total).clamp(0.0, 1.0)
        })
        .collect();
    Ok(consensus)
}

/// Splits `r0` into `(pool_train, pool_val)`.
pub fn split_reward_pools(params: &EconParams, stakes: &StakeBook) -> Result<(f64, f64)> {
    let t = stakes.trainer_total();
    let s = stakes.validator_total();
    let sum = t + s;
    if !(sum > 0.0) {
        return Err(Error::DegenerateStake("every stake is zero".into()));
    }
    let slope = 1.0 - 2.0 * params.gamma;
    let pool_train = params.r0 * (params.gamma + slope * t / sum);
    let pool_val = params.r0 * (params.gamma + slope * s / sum);
    Ok((pool_train, pool_val))
}

/// Normalized geometric rank weights `g_1 > g_2 > ... > g_n`.
pub fn rank_weights(n: usize, q: f64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("n", "need at least one rank"));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::invalid("q", "must lie in (0, 1)"));
    }
    let head = (1.0 - q) / (1.0 - q.powi(n as i32));
    let mut weights = Vec::with_capacity(n);
    let mut power = 1.0;
    for _ in 0..n {
        weights.push(head * power);
        power *= q;
    }
    Ok(weights)
}

/// Assigns 1-based ranks by descending consensus score.
///
/// Ties go to the higher total stake, then to the lower trainer index.
pub fn rank_trainers(consensus: &[f64], trainers: &[Stake]) -> Result<Vec<usize>> {
    if consensus.len() != trainers.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} consensus scores for {} trainers",
            consensus.len(),
            trainers.len()
        )));
    }
    let mut order: Vec<usize> = (0..consensus.len()).collect();
    order.sort_by(|&a, &b| {
        consensus[b]
            .total_cmp(&consensus[a])
            .then_with(|| trainers[b].total().total_cmp(&trainers[a].total()))
            .then_with(|| a.cmp(&b))
    });
    let mut ranks = vec![0; consensus.len()];
    for (pos, &trainer) in order.iter().enumerate() {
        ranks[trainer] = pos + 1;
    }
    Ok(ranks)
}

/// Fraction of the trainer pool owed to each trainer.
pub fn trainer_shares(ranks: &[usize], trainers: &[Stake], params: &EconParams) -> Result<Vec<f64>> {
    let n = trainers.len();
    if ranks.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} ranks for {n} trainers",
            ranks.len()
        )));
    }
    let g = rank_weights(n, params.q)?;
    let mut seen = vec![false; n];
    for &r in ranks {
        if r == 0 || r > n || std::mem::replace(&mut seen[r - 1], true) {
            return Err(Error::invalid("ranks", "must be a permutation of 1..=n"));
        }
    }
    let numerators: Vec<f64> = ranks
        .iter()
        .zip(trainers)
        .map(|(&r, s)| g[r - 1] * stake_power(s.total(), params.alpha_t))
        .collect();
    let denom: f64 = numerators.iter().sum();
    if !(denom > 0.0) {
        return Err(Error::DegenerateStake(
            "every trainer share numerator is zero".into(),
        ));
    }
    Ok(numerators.into_iter().map(|x| x / denom).collect())
}

/// Divides a gross reward into `(operator, delegators)`.
///
/// A participant with no stake at all has no delegators, so the operator
/// keeps everything.
pub fn split_with_commission(gross: f64, stake: &Stake) -> (f64, f64) {
    let total = stake.total();
    if !(total > 0.0) {
        return (gross, 0.0);
    }
    let sigma = stake.commission;
    let operator = gross * (sigma + (1.0 - sigma) * stake.own / total);
    (operator, gross - operator)
}

/// Absolute deviation of every validator score from the consensus.
pub fn validator_distances(scores: &ScoreMatrix, consensus: &[f64]) -> Result<Matrix> {
    if scores.submissions() != consensus.len() {
        return Err(Error::DimensionMismatch(format!(
            "score matrix has {} submissions but consensus has {}",
            scores.submissions(),
            consensus.len()
        )));
    }
    let mut out = Matrix::zeros(scores.validators(), scores.submissions());
    for j in 0..scores.validators() {
        for (i, &c) in consensus.iter().enumerate() {
            out.set(j, i, (c - scores.get(j, i)).abs());
        }
    }
    Ok(out)
}

/// Per-submission validator shares: each column is a softmax over
/// `-lambda_v * distance` weighted by `stake^alpha_v`.
pub fn validator_shares(distances: &Matrix, validators: &[Stake], params: &EconParams) -> Result<Matrix> {
    if distances.rows() != validators.len() {
        return Err(Error::DimensionMismatch(format!(
            "distance matrix has {} rows for {} validators",
            distances.rows(),
            validators.len()
        )));
    }
    let weights: Vec<f64> = validators
        .iter()
        .map(|s| stake_power(s.total(), params.alpha_v))
        .collect();
    let mut out = Matrix::zeros(distances.rows(), distances.cols());
    for i in 0..distances.cols() {
        // Shifting by the column's minimum distance leaves the softmax unchanged.
        let min_d = (0..distances.rows())
            .map(|j| distances.get(j, i))
            .fold(f64::INFINITY, f64::min);
        let mut denom = 0.0;
        for (j, w) in weights.iter().enumerate() {
            let num = (-params.lambda_v * (distances.get(j, i) - min_d)).exp() * w;
            out.set(j, i, num);
            denom += num;
        }
        if !(denom > 0.0) {
            return Err(Error::DegenerateSoftmax { column: i });
        }
        for j in 0..distances.rows() {
            out.set(j, i, out.get(j, i) / denom);
        }
    }
    Ok(out)
}

/// Settles one task: pools, ranks, shares, and the commission split for
/// every trainer and validator.
pub fn settle(params: &EconParams, stakes: &StakeBook, scores: &ScoreMatrix) -> Result<RewardStatement> {
    params.validate()?;
    stakes.validate()?;
    let n = stakes.trainers.len();
    let m = stakes.validators.len();
    if scores.validators() != m || scores.submissions() != n {
        return Err(Error::DimensionMismatch(format!(
            "score matrix is {}x{} but stake book has {m} validators and {n} trainers",
            scores.validators(),
            scores.submissions()
        )));
    }

    let consensus = consensus_scores(scores, &stakes.validators)?;
    let (pool_train, pool_val) = split_reward_pools(params, stakes)?;

    let ranks = rank_trainers(&consensus, &stakes.trainers)?;
    let shares = trainer_shares(&ranks, &stakes.trainers, params)?;
    let (trainer_operator_rewards, trainer_delegator_rewards) = shares
        .iter()
        .zip(&stakes.trainers)
        .map(|(share, stake)| split_with_commission(share * pool_train, stake))
        .unzip();

    let distances = validator_distances(scores, &consensus)?;
    let per_task = validator_shares(&distances, &stakes.validators, params)?;
    // Each column sums to one, so dividing by n makes the validator shares sum to one.
    let validator_shares: Vec<f64> = (0..m)
        .map(|j| per_task.row(j).iter().sum::<f64>() / n as f64)
        .collect();
    let (validator_operator_rewards, validator_delegator_rewards) = validator_shares
        .iter()
        .zip(&stakes.validators)
        .map(|(share, stake)| split_with_commission(share * pool_val, stake))
        .unzip();

    Ok(RewardStatement {
        pool_train,
        pool_val,
        trainer_ranks: ranks,
        trainer_shares: shares,
        trainer_operator_rewards,
        trainer_delegator_rewards,
        validator_shares,
        validator_operator_rewards,
        validator_delegator_rewards,
        consensus,
    })
}
