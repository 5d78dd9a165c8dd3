//! Straight-line settlement in exact rational arithmetic.
//!
//! Written independently of the library: no shared helpers, no floats. The
//! only transcendental step, `exp(-lambda * delta)`, is restricted to
//! `lambda = 10 ln 2` with `delta` a multiple of 1/10, where it equals the
//! exact rational `2^(-10 delta)`.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

pub type Q = BigRational;

/// `num / den` as an exact rational.
pub fn q(num: i64, den: i64) -> Q {
    Q::new(BigInt::from(num), BigInt::from(den))
}

pub fn to_f64(x: &Q) -> f64 {
    x.to_f64().expect("finite rational")
}

#[derive(Clone)]
pub struct StakeQ {
    pub own: Q,
    pub delegated: Q,
    pub commission: Q,
}

pub struct Inputs {
    pub r0: Q,
    pub gamma: Q,
    pub q: Q,
    /// Integer stake exponents keep powers rational.
    pub alpha_t: u32,
    pub alpha_v: u32,
    pub trainers: Vec<StakeQ>,
    pub validators: Vec<StakeQ>,
    /// `scores[j][i]`: validator j's score of trainer i.
    pub scores: Vec<Vec<Q>>,
}

pub struct Outputs {
    pub consensus: Vec<Q>,
    pub pool_train: Q,
    pub pool_val: Q,
    /// 1-based rank of each trainer.
    pub ranks: Vec<usize>,
    pub trainer_shares: Vec<Q>,
    pub trainer_operator: Vec<Q>,
    pub trainer_delegators: Vec<Q>,
    pub validator_shares: Vec<Q>,
    pub validator_operator: Vec<Q>,
    pub validator_delegators: Vec<Q>,
}

fn pow(base: &Q, e: u32) -> Q {
    let mut acc = Q::one();
    for _ in 0..e {
        acc *= base;
    }
    acc
}

/// `2^(-10 delta)`, the exact value of `exp(-(10 ln 2) delta)`.
fn softmax_kernel(delta: &Q) -> Q {
    let tenths = delta * q(10, 1);
    assert!(tenths.is_integer(), "distance {delta} is not a multiple of 1/10");
    let k = tenths.to_integer().to_u32().expect("small non-negative exponent");
    Q::new(BigInt::one(), BigInt::one() << k)
}

fn operator_part(gross: &Q, s: &StakeQ) -> Q {
    let total = &s.own + &s.delegated;
    if total.is_zero() {
        return gross.clone();
    }
    gross * (&s.commission + (Q::one() - &s.commission) * &s.own / total)
}

/// Settlement with the validator reward normalized by the trainer count.
pub fn settle_exact(x: &Inputs) -> Outputs {
    let n = x.trainers.len();
    let m = x.validators.len();
    let t: Vec<Q> = x.trainers.iter().map(|s| &s.own + &s.delegated).collect();
    let s: Vec<Q> = x.validators.iter().map(|v| &v.own + &v.delegated).collect();
    let sum_t: Q = t.iter().fold(Q::zero(), |a, b| a + b);
    let sum_s: Q = s.iter().fold(Q::zero(), |a, b| a + b);

    // stake-weighted consensus
    let mut consensus = Vec::with_capacity(n);
    for i in 0..n {
        let mut num = Q::zero();
        for j in 0..m {
            num += &x.scores[j][i] * &s[j];
        }
        consensus.push(num / &sum_s);
    }

    // pools
    let two = q(2, 1);
    let pool_train = &x.r0 * (&x.gamma + (Q::one() - &two * &x.gamma) * &sum_t / (&sum_t + &sum_s));
    let pool_val = &x.r0 * (&x.gamma + (Q::one() - &two * &x.gamma) * &sum_s / (&sum_t + &sum_s));

    // ranks: by consensus desc, then stake desc, then index asc
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        consensus[b]
            .cmp(&consensus[a])
            .then(t[b].cmp(&t[a]))
            .then(a.cmp(&b))
    });
    let mut ranks = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        ranks[i] = pos + 1;
    }

    // geometric rank weights
    let norm = (Q::one() - &x.q) / (Q::one() - pow(&x.q, n as u32));
    let g: Vec<Q> = (0..n).map(|k| &norm * pow(&x.q, k as u32)).collect();
    let numer: Vec<Q> = (0..n).map(|i| &g[ranks[i] - 1] * pow(&t[i], x.alpha_t)).collect();
    let denom: Q = numer.iter().fold(Q::zero(), |a, b| a + b);
    let trainer_shares: Vec<Q> = numer.iter().map(|v| v / &denom).collect();

    let mut trainer_operator = Vec::new();
    let mut trainer_delegators = Vec::new();
    for i in 0..n {
        let gross = &trainer_shares[i] * &pool_train;
        let op = operator_part(&gross, &x.trainers[i]);
        trainer_delegators.push(&gross - &op);
        trainer_operator.push(op);
    }

    // validator softmax over each column, then summed per validator / n
    let mut summed = vec![Q::zero(); m];
    for i in 0..n {
        let weights: Vec<Q> = (0..m)
            .map(|j| {
                let delta = (&consensus[i] - &x.scores[j][i]).abs();
                softmax_kernel(&delta) * pow(&s[j], x.alpha_v)
            })
            .collect();
        let col: Q = weights.iter().fold(Q::zero(), |a, b| a + b);
        for j in 0..m {
            summed[j] += &weights[j] / &col;
        }
    }
    let validator_shares: Vec<Q> = summed.iter().map(|v| v / q(n as i64, 1)).collect();
    let mut validator_operator = Vec::new();
    let mut validator_delegators = Vec::new();
    for j in 0..m {
        let gross = &validator_shares[j] * &pool_val;
        let op = operator_part(&gross, &x.validators[j]);
        validator_delegators.push(&gross - &op);
        validator_operator.push(op);
    }

    Outputs {
        consensus,
        pool_train,
        pool_val,
        ranks,
        trainer_shares,
        trainer_operator,
        trainer_delegators,
        validator_shares,
        validator_operator,
        validator_delegators,
    }
}

/// The three-trainer, two-validator reference case.
///
/// Validator stakes are 1 and 3, and each trainer's two scores differ by a
/// multiple of 0.4, so every distance to consensus is a multiple of 0.1.
/// Trainers 0 and 1 tie on consensus (0.6) and are separated by stake.
pub fn reference_case() -> Inputs {
    let st = |own: i64, del: i64, c: (i64, i64)| StakeQ {
        own: q(own, 1),
        delegated: q(del, 1),
        commission: q(c.0, c.1),
    };
    Inputs {
        r0: q(100, 1),
        gamma: q(1, 10),
        q: q(1, 2),
        alpha_t: 1,
        alpha_v: 1,
        trainers: vec![st(2, 2, (1, 10)), st(5, 1, (1, 4)), st(1, 0, (1, 2))],
        validators: vec![st(1, 0, (1, 5)), st(2, 1, (1, 10))],
        scores: vec![
            vec![q(9, 10), q(0, 1), q(7, 10)],
            vec![q(1, 2), q(4, 5), q(7, 10)],
        ],
    }
}
