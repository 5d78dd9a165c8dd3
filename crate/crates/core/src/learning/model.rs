//! Softmax classifiers over flat parameter vectors.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::Dataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    /// Multinomial logistic regression.
    Logistic,
    /// One tanh hidden layer.
    Mlp1 { hidden: usize },
}

/// Layer dimensions of a parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub inputs: usize,
    pub classes: usize,
    pub kind: ModelKind,
}

impl ModelShape {
    pub fn new(inputs: usize, classes: usize, kind: ModelKind) -> Self {
        ModelShape {
            inputs,
            classes,
            kind,
        }
    }

    pub fn len(&self) -> usize {
        let (d, c) = (self.inputs, self.classes);
        match self.kind {
            ModelKind::Logistic => c * d + c,
            ModelKind::Mlp1 { hidden: h } => h * d + h + c * h + c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat model parameters.
///
/// Logistic layout: `W (C x d)` row-major, then `b (C)`.
/// MLP layout: `W1 (h x d)`, `b1 (h)`, `W2 (C x h)`, `b2 (C)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub shape: ModelShape,
}

impl ParamVector {
    pub fn zeros(shape: ModelShape) -> Self {
        ParamVector {
            values: vec![0.0; shape.len()],
            shape,
        }
    }

    pub fn from_values(values: Vec<f64>, shape: ModelShape) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a model of size {}",
                values.len(),
                shape.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        Ok(ParamVector { values, shape })
    }

    /// Zero logistic weights, or small Gaussian hidden weights for an MLP.
    pub fn init<R: Rng>(shape: ModelShape, rng: &mut R) -> Self {
        let mut p = ParamVector::zeros(shape);
        if let ModelKind::Mlp1 { hidden } = shape.kind {
            let scale = 1.0 / (shape.inputs as f64).sqrt();
            for v in &mut p.values[..hidden * shape.inputs] {
                *v = scale * rng.sample::<f64, _>(StandardNormal);
            }
            let start = hidden * shape.inputs + hidden;
            let scale = 1.0 / (hidden as f64).sqrt();
            for v in &mut p.values[start..start + shape.classes * hidden] {
                *v = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        p
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Little-endian IEEE-754 doubles in index order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// SHA-256 of [`ParamVector::to_le_bytes`].
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_le_bytes()).into()
    }

    pub(crate) fn check_same_shape(&self, other: &ParamVector) -> Result<()> {
        if self.shape != other.shape || self.len() != other.len() {
            return Err(Error::DimensionMismatch(
                "parameter vectors have different shapes".into(),
            ));
        }
        Ok(())
    }

    /// `self + scale * (other - self)`.
    pub fn lerp(&self, other: &ParamVector, scale: f64) -> Result<ParamVector> {
        self.check_same_shape(other)?;
        Ok(ParamVector {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + scale * (b - a))
                .collect(),
            shape: self.shape,
        })
    }
}

/// Reusable forward/backward buffers.
struct Scratch {
    hidden: Vec<f64>,
    logits: Vec<f64>,
    dhidden: Vec<f64>,
}

impl Scratch {
    fn new(shape: &ModelShape) -> Self {
        let h = match shape.kind {
            ModelKind::Logistic => 0,
            ModelKind::Mlp1 { hidden } => hidden,
        };
        Scratch {
            hidden: vec![0.0; h],
            logits: vec![0.0; shape.classes],
            dhidden: vec![0.0; h],
        }
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (o, (row, bias)) in out.iter_mut().zip(w.chunks_exact(d).zip(b)) {
        *o = bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Fills `scratch.logits` for input `x`.
fn forward(params: &ParamVector, x: &[f64], scratch: &mut Scratch) {
    let s = &params.shape;
    let v = &params.values;
    match s.kind {
        ModelKind::Logistic => {
            let (w, b) = v.split_at(s.classes * s.inputs);
            affine(w, b, x, &mut scratch.logits);
        }
        ModelKind::Mlp1 { hidden } => {
            let (w1, rest) = v.split_at(hidden * s.inputs);
            let (b1, rest) = rest.split_at(hidden);
            let (w2, b2) = rest.split_at(s.classes * hidden);
            affine(w1, b1, x, &mut scratch.hidden);
            for h in scratch.hidden.iter_mut() {
                *h = h.tanh();
            }
            affine(w2, b2, &scratch.hidden, &mut scratch.logits);
        }
    }
}

/// Turns logits into probabilities in place and returns `log-sum-exp`.
fn softmax_in_place(logits: &mut [f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    for z in logits.iter_mut() {
        *z = (*z - lse).exp();
    }
    lse
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn check_compatible(params: &ParamVector, data: &Dataset) -> Result<()> {
    if params.shape.inputs != data.dim() || params.shape.classes != data.classes() {
        return Err(Error::DimensionMismatch(format!(
            "model expects {} features / {} classes, dataset has {} / {}",
            params.shape.inputs,
            params.shape.classes,
            data.dim(),
            data.classes()
        )));
    }
    if params.values.len() != params.shape.len() {
        return Err(Error::DimensionMismatch("parameter vector length".into()));
    }
    Ok(())
}

/// Mean cross-entropy over `rows` of `data` and its gradient.
pub fn loss_and_grad(params: &ParamVector, data: &Dataset, rows: &[usize]) -> Result<(f64, ParamVector)> {
    check_compatible(params, data)?;
    if rows.is_empty() {
        return Err(Error::Empty("batch".into()));
    }
    let s = params.shape;
    let (d, c) = (s.inputs, s.classes);
    let mut grad = ParamVector::zeros(s);
    let mut scratch = Scratch::new(&s);
    let mut loss = 0.0;
    let inv = 1.0 / rows.len() as f64;

    for &r in rows {
        let x = data.row(r);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("features of row {r}")));
        }
        let y = data.label(r);
        forward(params, x, &mut scratch);
        let true_logit = scratch.logits[y];
        loss += softmax_in_place(&mut scratch.logits) - true_logit;
        scratch.logits[y] -= 1.0;
        // scratch.logits now holds dL/dlogits for this sample
        match s.kind {
            ModelKind::Logistic => {
                let (gw, gb) = grad.values.split_at_mut(c * d);
                for (k, &delta) in scratch.logits.iter().enumerate() {
                    let delta = delta * inv;
                    for (g, xi) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                        *g += delta * xi;
                    }
                    gb[k] += delta;
                }
            }
            ModelKind::Mlp1 { hidden: h } => {
                let w2 = &params.values[h * d + h..h * d + h + c * h];
                let (gw1, rest) = grad.values.split_at_mut(h * d);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(c * h);
                scratch.dhidden.iter_mut().for_each(|v| *v = 0.0);
                for (k, &delta) in scratch.logits.iter().enumerate() {
                    let delta = delta * inv;
                    for u in 0..h {
                        gw2[k * h + u] += delta * scratch.hidden[u];
                        scratch.dhidden[u] += delta * w2[k * h + u];
                    }
                    gb2[k] += delta;
                }
                for u in 0..h {
                    let a = scratch.hidden[u];
                    let dz = scratch.dhidden[u] * (1.0 - a * a);
                    for (g, xi) in gw1[u * d..(u + 1) * d].iter_mut().zip(x) {
                        *g += dz * xi;
                    }
                    gb1[u] += dz;
                }
            }
        }
    }
    Ok((loss * inv, grad))
}

/// Mean cross-entropy without the gradient.
pub fn loss(params: &ParamVector, data: &Dataset, rows: &[usize]) -> Result<f64> {
    check_compatible(params, data)?;
    if rows.is_empty() {
        return Err(Error::Empty("batch".into()));
    }
    let mut scratch = Scratch::new(&params.shape);
    let mut total = 0.0;
    for &r in rows {
        forward(params, data.row(r), &mut scratch);
        let lse = softmax_logsumexp(&scratch.logits);
        total += lse - scratch.logits[data.label(r)];
    }
    Ok(total / rows.len() as f64)
}

fn softmax_logsumexp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Predicted class (lowest index wins ties).
pub fn predict(params: &ParamVector, x: &[f64]) -> usize {
    let mut scratch = Scratch::new(&params.shape);
    forward(params, x, &mut scratch);
    argmax(&scratch.logits)
}

/// Argmax accuracy and mean cross-entropy over a whole dataset.
pub fn evaluate(params: &ParamVector, data: &Dataset) -> Result<(f64, f64)> {
    check_compatible(params, data)?;
    let mut scratch = Scratch::new(&params.shape);
    let mut correct = 0usize;
    let mut total = 0.0;
    for r in 0..data.len() {
        forward(params, data.row(r), &mut scratch);
        let y = data.label(r);
        if argmax(&scratch.logits) == y {
            correct += 1;
        }
        total += softmax_logsumexp(&scratch.logits) - scratch.logits[y];
    }
    let n = data.len() as f64;
    Ok((correct as f64 / n, total / n))
}

/// Accuracy only.
pub fn accuracy(params: &ParamVector, data: &Dataset) -> Result<f64> {
    check_compatible(params, data)?;
    let mut scratch = Scratch::new(&params.shape);
    let correct = (0..data.len())
        .filter(|&r| {
            forward(params, data.row(r), &mut scratch);
            argmax(&scratch.logits) == data.label(r)
        })
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Entry `(a, b)` is the accuracy of model `a` on test set `b`.
pub fn cross_domain_matrix(models: &[ParamVector], test_sets: &[Dataset]) -> Result<Matrix> {
    if let Some(first) = models.first() {
        for m in models {
            first.check_same_shape(m)?;
        }
    }
    let mut out = Matrix::zeros(models.len(), test_sets.len());
    for (a, m) in models.iter().enumerate() {
        for (b, t) in test_sets.iter().enumerate() {
            out.set(a, b, accuracy(m, t)?);
        }
    }
    Ok(out)
}
