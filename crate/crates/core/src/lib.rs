//! Deterministic simulator of a stake-weighted decentralized federated
//! learning protocol: reward economics, the validation round state machine,
//! baseline aggregators, backdoor adversaries, and a hash-chained ledger.

pub mod adversary;
pub mod economics;
pub mod error;
pub mod harness;
pub mod learning;
pub mod ledger;
pub mod matrix;
pub mod protocol;
pub mod rng;

pub use error::{Error, Result};
