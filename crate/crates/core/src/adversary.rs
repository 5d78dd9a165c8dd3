//! Backdoor poisoning attacker and the attack success rate metric.
//!
//! The trigger is a feature-space pattern: a fixed set of coordinates forced
//! to an out-of-range value. Poisoned rows carry the trigger and the target
//! label, and the attacker scales its resulting model delta before upload so
//! that the backdoor survives averaging with honest clients.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learning::{local_train, predict, Dataset, ParamVector, TrainerConfig};
use crate::rng::Stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackdoorSpec {
    pub trigger_dims: BTreeSet<usize>,
    pub trigger_value: f64,
    pub target_class: usize,
    pub poison_fraction: f64,
    pub boost_factor: f64,
}

impl BackdoorSpec {
    /// Trigger on the last three features at `+4`, 30% poisoning, boost 3.
    pub fn default_for(features: usize, target_class: usize) -> Self {
        BackdoorSpec {
            trigger_dims: (features.saturating_sub(3)..features).collect(),
            trigger_value: 4.0,
            target_class,
            poison_fraction: 0.3,
            boost_factor: 3.0,
        }
    }

    pub fn validate(&self, features: usize, classes: usize) -> Result<()> {
        if self.trigger_dims.is_empty() {
            return Err(Error::invalid("trigger_dims", "must not be empty"));
        }
        if let Some(&d) = self.trigger_dims.iter().find(|&&d| d >= features) {
            return Err(Error::invalid(
                "trigger_dims",
                format!("feature {d} outside [0, {features})"),
            ));
        }
        if !self.trigger_value.is_finite() {
            return Err(Error::invalid("trigger_value", "must be finite"));
        }
        if self.target_class >= classes {
            return Err(Error::invalid(
                "target_class",
                format!("must be below {classes}"),
            ));
        }
        if !(0.0..=1.0).contains(&self.poison_fraction) {
            return Err(Error::invalid("poison_fraction", "must lie in [0, 1]"));
        }
        // boost 0 is accepted: it degenerates to resubmitting the global model
        if !(self.boost_factor.is_finite() && self.boost_factor >= 0.0) {
            return Err(Error::invalid("boost_factor", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// Writes the trigger into a feature row.
    pub fn stamp(&self, row: &mut [f64]) {
        for &d in &self.trigger_dims {
            row[d] = self.trigger_value;
        }
    }
}

/// Stamps the trigger onto `round(poison_fraction * N)` randomly chosen rows
/// and relabels them to the target class.
pub fn poison_dataset(dataset: &Dataset, spec: &BackdoorSpec, rng: &mut Stream) -> Result<Dataset> {
    spec.validate(dataset.dim(), dataset.classes())?;
    let mut out = dataset.clone();
    let count = (spec.poison_fraction * dataset.len() as f64).round() as usize;
    let mut rows: Vec<usize> = (0..dataset.len()).collect();
    rows.shuffle(rng);
    for &r in &rows[..count.min(rows.len())] {
        spec.stamp(out.row_mut(r));
        out.set_label(r, spec.target_class);
    }
    Ok(out)
}

/// Trains on poisoned data and returns `global + boost * (trained - global)`.
pub fn craft_malicious_update(
    global: &ParamVector,
    poisoned: &Dataset,
    config: &TrainerConfig,
    spec: &BackdoorSpec,
    rng: &mut Stream,
) -> Result<ParamVector> {
    let trained = local_train(global, poisoned, config, rng)?;
    if spec.boost_factor == 1.0 {
        return Ok(trained);
    }
    global.lerp(&trained, spec.boost_factor)
}

/// Fraction of triggered non-target test samples classified as the target.
pub fn attack_success_rate(model: &ParamVector, clean_test: &Dataset, spec: &BackdoorSpec) -> Result<f64> {
    spec.validate(clean_test.dim(), clean_test.classes())?;
    let mut row = vec![0.0; clean_test.dim()];
    let mut eligible = 0usize;
    let mut hits = 0usize;
    for i in 0..clean_test.len() {
        if clean_test.label(i) == spec.target_class {
            continue;
        }
        eligible += 1;
        row.copy_from_slice(clean_test.row(i));
        spec.stamp(&mut row);
        if predict(model, &row) == spec.target_class {
            hits += 1;
        }
    }
    if eligible == 0 {
        return Err(Error::UndefinedAsr);
    }
    Ok(hits as f64 / eligible as f64)
}
