use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::model::{loss_and_grad, ModelKind, ParamVector};
use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub model: ModelKind,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            local_epochs: 1,
            batch_size: 32,
            learning_rate: 0.05,
            model: ModelKind::Logistic,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid("learning_rate", "must be finite and >= 0"));
        }
        if let ModelKind::Mlp1 { hidden: 0 } = self.model {
            return Err(Error::invalid("model.hidden", "must be >= 1"));
        }
        Ok(())
    }

    /// Number of SGD steps one call to [`local_train`] takes on `n` samples.
    pub fn steps_for(&self, n: usize) -> usize {
        self.local_epochs * n.div_ceil(self.batch_size.max(1))
    }
}

/// Mini-batch SGD with a fresh shuffle every epoch.
///
/// With `correction`, each step uses `grad + correction` instead of `grad`.
/// Returns the number of steps taken.
pub(crate) fn sgd(
    params: &mut ParamVector,
    data: &Dataset,
    config: &TrainerConfig,
    rng: &mut Stream,
    correction: Option<&[f64]>,
) -> Result<usize> {
    config.validate()?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut steps = 0;
    for _ in 0..config.local_epochs {
        order.shuffle(rng);
        for batch in order.chunks(config.batch_size) {
            let (_, grad) = loss_and_grad(params, data, batch)?;
            let lr = config.learning_rate;
            match correction {
                None => {
                    for (w, g) in params.values.iter_mut().zip(&grad.values) {
                        *w -= lr * g;
                    }
                }
                Some(c) => {
                    for ((w, g), c) in params.values.iter_mut().zip(&grad.values).zip(c) {
                        *w -= lr * (g + c);
                    }
                }
            }
            steps += 1;
        }
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("parameters after local training".into()));
    }
    Ok(steps)
}

/// Runs `config.local_epochs` epochs of mini-batch SGD from `params`.
pub fn local_train(
    params: &ParamVector,
    data: &Dataset,
    config: &TrainerConfig,
    rng: &mut Stream,
) -> Result<ParamVector> {
    let mut out = params.clone();
    sgd(&mut out, data, config, rng, None)?;
    Ok(out)
}
