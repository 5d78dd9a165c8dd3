//! Unprotected server-side aggregators: FedAvg, SCAFFOLD and FedAdam.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::model::{ModelShape, ParamVector};
use super::train::{sgd, TrainerConfig};
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Weighted mean of client parameter vectors.
pub fn fedavg(clients: &[ParamVector], sizes: &[f64]) -> Result<ParamVector> {
    let first = clients
        .first()
        .ok_or_else(|| Error::Empty("fedavg needs at least one client".into()))?;
    if sizes.len() != clients.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} sizes for {} clients",
            sizes.len(),
            clients.len()
        )));
    }
    if sizes.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::invalid("client_sizes", "must be finite and >= 0"));
    }
    let total: f64 = sizes.iter().sum();
    if !(total > 0.0) {
        return Err(Error::invalid("client_sizes", "total size is zero"));
    }
    for c in clients {
        first.check_same_shape(c)?;
    }
    if clients.len() == 1 {
        return Ok(first.clone());
    }
    // accumulated as offsets from the first client, so identical clients
    // reproduce their parameters exactly
    let mut out = first.clone();
    for (c, &s) in clients.iter().zip(sizes).skip(1) {
        let w = s / total;
        for ((o, v), f) in out.values.iter_mut().zip(&c.values).zip(&first.values) {
            *o += w * (v - f);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaffoldState {
    pub server_control: ParamVector,
    pub client_controls: Vec<ParamVector>,
}

impl ScaffoldState {
    pub fn new(shape: ModelShape, clients: usize) -> Self {
        ScaffoldState {
            server_control: ParamVector::zeros(shape),
            client_controls: vec![ParamVector::zeros(shape); clients],
        }
    }
}

/// One participant in a SCAFFOLD round.
pub struct ScaffoldClient<'a> {
    pub dataset: &'a Dataset,
    pub rng: Stream,
    /// Aggregation weight (usually the dataset size).
    pub weight: f64,
    /// Scales the uploaded model delta (not the control update); 1 for honest clients.
    pub boost: f64,
    /// Honest clients apply the drift correction `c - c_i`. A client that
    /// ignores it trains plainly and reports its mean local gradient
    /// `(x - y) / (K lr)` as its new control variate.
    pub corrected: bool,
}

impl<'a> ScaffoldClient<'a> {
    pub fn honest(dataset: &'a Dataset, rng: Stream) -> Self {
        ScaffoldClient {
            dataset,
            rng,
            weight: dataset.len() as f64,
            boost: 1.0,
            corrected: true,
        }
    }
}

/// One SCAFFOLD round with full participation and control-variate
/// update "option II".
///
/// Client `i` runs drift-corrected SGD `y <- y - lr (g - c_i + c)` and then
/// sets `c_i <- c_i - c + (x - y) / (K lr)` where `K` is its step count. The
/// server moves to the weighted mean of client models and adds the mean
/// control delta to `c`.
pub fn scaffold_round(
    global: &ParamVector,
    state: &ScaffoldState,
    clients: Vec<ScaffoldClient<'_>>,
    config: &TrainerConfig,
) -> Result<(ParamVector, ScaffoldState)> {
    if clients.is_empty() {
        return Err(Error::Empty("scaffold round has no clients".into()));
    }
    if clients.len() != state.client_controls.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} clients but {} client controls",
            clients.len(),
            state.client_controls.len()
        )));
    }
    global.check_same_shape(&state.server_control)?;
    for c in &state.client_controls {
        global.check_same_shape(c)?;
    }

    let updates: Vec<(ParamVector, ParamVector, f64)> = clients
        .into_par_iter()
        .zip(state.client_controls.par_iter())
        .map(|(mut client, c_i)| {
            let correction: Vec<f64> = state
                .server_control
                .values
                .iter()
                .zip(&c_i.values)
                .map(|(c, ci)| c - ci)
                .collect();
            let mut y = global.clone();
            let correction = client.corrected.then_some(correction.as_slice());
            let steps = sgd(&mut y, client.dataset, config, &mut client.rng, correction)?;
            let k_lr = steps as f64 * config.learning_rate;
            if !(k_lr > 0.0) {
                return Err(Error::invalid(
                    "trainer",
                    "SCAFFOLD needs at least one local step and a positive learning rate",
                ));
            }
            let mut new_ci = c_i.clone();
            for (((n, ci), c), (x, yv)) in new_ci
                .values
                .iter_mut()
                .zip(&c_i.values)
                .zip(&state.server_control.values)
                .zip(global.values.iter().zip(&y.values))
            {
                *n = (x - yv) / k_lr;
                if client.corrected {
                    *n += ci - c;
                }
            }
            // only the uploaded model is boosted, never the reported control
            if client.boost != 1.0 {
                y = global.lerp(&y, client.boost)?;
            }
            Ok((y, new_ci, client.weight))
        })
        .collect::<Result<_>>()?;

    let models: Vec<ParamVector> = updates.iter().map(|u| u.0.clone()).collect();
    let weights: Vec<f64> = updates.iter().map(|u| u.2).collect();
    let new_global = fedavg(&models, &weights)?;

    let n = updates.len() as f64;
    let mut server_control = state.server_control.clone();
    for ((_, new_ci, _), old_ci) in updates.iter().zip(&state.client_controls) {
        for ((c, a), b) in server_control
            .values
            .iter_mut()
            .zip(&new_ci.values)
            .zip(&old_ci.values)
        {
            *c += (a - b) / n;
        }
    }
    let client_controls = updates.into_iter().map(|u| u.1).collect();
    Ok((
        new_global,
        ScaffoldState {
            server_control,
            client_controls,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedAdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub server_lr: f64,
    /// Completed server steps, used for bias correction.
    pub step: u64,
}

impl FedAdamState {
    pub fn new(dim: usize, beta1: f64, beta2: f64, epsilon: f64, server_lr: f64) -> Result<Self> {
        let st = FedAdamState {
            first_moment: vec![0.0; dim],
            second_moment: vec![0.0; dim],
            beta1,
            beta2,
            epsilon,
            server_lr,
            step: 0,
        };
        st.validate()?;
        Ok(st)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::invalid("beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("beta2", "must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid("epsilon", "must be finite and > 0"));
        }
        if !(self.server_lr > 0.0 && self.server_lr.is_finite()) {
            return Err(Error::invalid("server_lr", "must be finite and > 0"));
        }
        Ok(())
    }
}

/// One FedAdam server step on the pseudo-gradient `global - fedavg(clients)`.
pub fn fedadam_round(
    global: &ParamVector,
    state: &FedAdamState,
    client_params: &[ParamVector],
    client_sizes: &[f64],
) -> Result<(ParamVector, FedAdamState)> {
    state.validate()?;
    if state.first_moment.len() != global.len() || state.second_moment.len() != global.len() {
        return Err(Error::DimensionMismatch("FedAdam moments vs model".into()));
    }
    let avg = fedavg(client_params, client_sizes)?;
    global.check_same_shape(&avg)?;

    let mut next = state.clone();
    next.step += 1;
    let t = next.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let mut out = global.clone();
    for (k, w) in out.values.iter_mut().enumerate() {
        let delta = global.values[k] - avg.values[k];
        let m = state.beta1 * state.first_moment[k] + (1.0 - state.beta1) * delta;
        let v = state.beta2 * state.second_moment[k] + (1.0 - state.beta2) * delta * delta;
        next.first_moment[k] = m;
        next.second_moment[k] = v;
        *w -= state.server_lr * (m / bc1) / ((v / bc2).sqrt() + state.epsilon);
    }
    Ok((out, next))
}
