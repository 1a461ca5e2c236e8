//! Minimal neural-network substrate shared by the grade model, the CGAN and
//! the Q-network bank: dense / LSTM / embedding layers, losses, Adam and
//! decaying-SGD optimizers, finite-difference gradient verification and a
//! binary checkpoint format.
//!
//! Everything is double precision. Activations flow through the network as
//! small row-major matrices ([`Mat`]); a plain vector is a 1-row matrix and
//! sequence data is one row per time step.

mod checkpoint;
mod gradcheck;
mod network;
mod optimizer;

pub use checkpoint::{read_container, read_network, write_container, write_network, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, CONTAINER_MAGIC};
pub use gradcheck::gradient_check;
pub use network::{accumulate_grads, lstm_step, scale_grads, Cache, LayerParams, LstmGates, NetInput, Network};
pub use optimizer::{adam_update, decay_step_size, sgd_update, OptimizerKind, OptimizerState};

use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Row-major matrix of f64.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Mat { rows: r, cols: c, data: rows.into_iter().flatten().collect() }
    }

    pub fn row_vec(v: Vec<f64>) -> Self {
        Mat { rows: 1, cols: v.len(), data: v }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Element-wise (or row-wise, for softmax) activation function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    /// Leaky ReLU with the given negative-side slope.
    LeakyRelu(f64),
    /// Row-wise softmax; only valid as the final activation of a network.
    Softmax,
    Sigmoid,
}

impl Activation {
    /// Applies the activation in place to one row.
    pub fn apply(&self, row: &mut [f64]) {
        match *self {
            Activation::Identity => {}
            Activation::Relu => {
                for v in row {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            Activation::LeakyRelu(slope) => {
                for v in row {
                    if *v < 0.0 {
                        *v *= slope;
                    }
                }
            }
            Activation::Softmax => {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row {
                    *v /= sum;
                }
            }
            Activation::Sigmoid => {
                for v in row {
                    *v = 1.0 / (1.0 + (-*v).exp());
                }
            }
        }
    }
}

/// Layer kinds understood by [`Network`].
///
/// A network is a sequential chain. `Embedding` looks up the token side input
/// and stores the result in a conditioning register; `Multiply` gates the
/// running activation element-wise by that register (the CGAN conditioning
/// path). `Reshape` reinterprets a 1-row activation as a matrix whose rows
/// the following layers process independently (dense) or as a sequence
/// (lstm).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Dense,
    Lstm,
    Embedding,
    Dropout,
    Multiply,
    Reshape,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
    /// L1 penalty coefficient on this layer's weight matrix (dense/lstm only).
    pub l1_coefficient: f64,
    /// Keep-probability complement for dropout layers, in [0, 1).
    pub dropout_rate: f64,
}

impl LayerSpec {
    pub fn dense(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        LayerSpec { kind: LayerKind::Dense, input_dim, output_dim, activation, l1_coefficient: 0.0, dropout_rate: 0.0 }
    }

    pub fn dense_l1(input_dim: usize, output_dim: usize, activation: Activation, l1: f64) -> Self {
        LayerSpec { l1_coefficient: l1, ..Self::dense(input_dim, output_dim, activation) }
    }

    pub fn lstm(input_dim: usize, hidden: usize) -> Self {
        LayerSpec { kind: LayerKind::Lstm, input_dim, output_dim: hidden, activation: Activation::Identity, l1_coefficient: 0.0, dropout_rate: 0.0 }
    }

    pub fn embedding(vocab: usize, dim: usize) -> Self {
        LayerSpec { kind: LayerKind::Embedding, input_dim: vocab, output_dim: dim, activation: Activation::Identity, l1_coefficient: 0.0, dropout_rate: 0.0 }
    }

    pub fn dropout(width: usize, rate: f64) -> Self {
        LayerSpec { kind: LayerKind::Dropout, input_dim: width, output_dim: width, activation: Activation::Identity, l1_coefficient: 0.0, dropout_rate: rate }
    }

    pub fn multiply(width: usize) -> Self {
        LayerSpec { kind: LayerKind::Multiply, input_dim: width, output_dim: width, activation: Activation::Identity, l1_coefficient: 0.0, dropout_rate: 0.0 }
    }

    /// Reshape a 1-row activation of width `total` into `total / row_width`
    /// rows of `row_width`.
    pub fn reshape(total: usize, row_width: usize) -> Self {
        LayerSpec { kind: LayerKind::Reshape, input_dim: total, output_dim: row_width, activation: Activation::Identity, l1_coefficient: 0.0, dropout_rate: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Loss {
    Mse,
    /// Softmax cross-entropy over class-id targets, one id per output row.
    CrossEntropy,
    /// Binary cross-entropy against a sigmoid output.
    BinaryCrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub loss: Loss,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>, loss: Loss) -> Result<Self> {
        let spec = NetworkSpec { layers, loss };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks chain consistency: adjacent widths match, dropout rates and l1
    /// coefficients are in range, softmax appears only at the end.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        let mut width: Option<usize> = None;
        let mut side: Option<usize> = None;
        for (i, l) in self.layers.iter().enumerate() {
            if l.l1_coefficient < 0.0 {
                return Err(Error::Config(format!("layer {i}: negative l1 coefficient")));
            }
            if !(0.0..1.0).contains(&l.dropout_rate) {
                return Err(Error::Config(format!("layer {i}: dropout rate must be in [0,1)")));
            }
            if matches!(l.activation, Activation::Softmax) && i + 1 != self.layers.len() {
                return Err(Error::Config(format!("layer {i}: softmax is only supported on the final layer")));
            }
            match l.kind {
                LayerKind::Dense | LayerKind::Lstm => {
                    if let Some(w) = width {
                        if w != l.input_dim {
                            return Err(Error::Config(format!("layer {i}: input_dim {} != previous width {w}", l.input_dim)));
                        }
                    }
                    width = Some(l.output_dim);
                }
                LayerKind::Embedding => {
                    side = Some(l.output_dim);
                }
                LayerKind::Multiply => {
                    if l.input_dim != l.output_dim {
                        return Err(Error::Config(format!("layer {i}: multiply must preserve width")));
                    }
                    match side {
                        Some(s) if s == l.input_dim => {}
                        Some(s) => {
                            return Err(Error::Config(format!("layer {i}: multiply width {} != embedding width {s}", l.input_dim)))
                        }
                        None => return Err(Error::Config(format!("layer {i}: multiply without a preceding embedding"))),
                    }
                    if let Some(w) = width {
                        if w != l.input_dim {
                            return Err(Error::Config(format!("layer {i}: multiply width {} != previous width {w}", l.input_dim)));
                        }
                    }
                    width = Some(l.output_dim);
                }
                LayerKind::Dropout => {
                    if let Some(w) = width {
                        if w != l.input_dim {
                            return Err(Error::Config(format!("layer {i}: dropout width {} != previous width {w}", l.input_dim)));
                        }
                    }
                    width = Some(l.output_dim);
                }
                LayerKind::Reshape => {
                    if let Some(w) = width {
                        if w != l.input_dim {
                            return Err(Error::Config(format!("layer {i}: reshape input {} != previous width {w}", l.input_dim)));
                        }
                    }
                    if l.output_dim == 0 || l.input_dim % l.output_dim != 0 {
                        return Err(Error::Config(format!("layer {i}: reshape {} not divisible by {}", l.input_dim, l.output_dim)));
                    }
                    width = Some(l.output_dim);
                }
            }
        }
        if self.loss == Loss::CrossEntropy {
            let last = self.layers.last().unwrap();
            if last.activation != Activation::Softmax {
                return Err(Error::Config("cross-entropy loss requires a softmax final layer".into()));
            }
        }
        Ok(())
    }

    /// Width of the final activation (per row).
    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.output_dim).unwrap_or(0)
    }
}

/// Loss value and gradient with respect to the network output.
///
/// For `CrossEntropy` the targets are class ids, one per output row; for the
/// other losses they are a matrix of the output's shape.
pub enum LossTarget<'a> {
    Values(&'a Mat),
    Classes(&'a [usize]),
}

pub fn loss_and_grad(loss: Loss, output: &Mat, target: &LossTarget) -> Result<(f64, Mat)> {
    let mut grad = Mat::zeros(output.rows, output.cols);
    let mut value = 0.0;
    match (loss, target) {
        (Loss::Mse, LossTarget::Values(t)) => {
            if t.rows != output.rows || t.cols != output.cols {
                return Err(Error::Dimension("mse target shape mismatch".into()));
            }
            for (i, (&y, &t)) in output.data.iter().zip(&t.data).enumerate() {
                let d = y - t;
                value += d * d;
                grad.data[i] = 2.0 * d;
            }
        }
        (Loss::CrossEntropy, LossTarget::Classes(ids)) => {
            if ids.len() != output.rows {
                return Err(Error::Dimension("cross-entropy needs one class per output row".into()));
            }
            for (r, &id) in ids.iter().enumerate() {
                if id >= output.cols {
                    return Err(Error::RejectedInput(format!("class id {id} out of range")));
                }
                let p = output.row(r)[id].max(1e-300);
                value -= p.ln();
                grad.row_mut(r)[id] = -1.0 / p.max(1e-12);
            }
        }
        (Loss::BinaryCrossEntropy, LossTarget::Values(t)) => {
            if t.rows != output.rows || t.cols != output.cols {
                return Err(Error::Dimension("bce target shape mismatch".into()));
            }
            for (i, (&y, &t)) in output.data.iter().zip(&t.data).enumerate() {
                let yc = y.clamp(1e-12, 1.0 - 1e-12);
                value -= t * yc.ln() + (1.0 - t) * (1.0 - yc).ln();
                grad.data[i] = (yc - t) / (yc * (1.0 - yc));
            }
        }
        _ => return Err(Error::Protocol("loss/target kind mismatch".into())),
    }
    Ok((value, grad))
}

/// Draws an index from a probability row. The row must be non-negative and
/// sum to 1 within 1e-9.
pub fn sample_categorical<R: Rng>(probabilities: &[f64], rng: &mut R) -> Result<usize> {
    if probabilities.is_empty() {
        return Err(Error::RejectedInput("empty probability row".into()));
    }
    let mut sum = 0.0;
    for &p in probabilities {
        if !(p >= 0.0) {
            return Err(Error::RejectedInput(format!("negative or NaN probability {p}")));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::RejectedInput(format!("probabilities sum to {sum}, not 1")));
    }
    let u: f64 = rng.gen::<f64>() * sum;
    let mut acc = 0.0;
    for (i, &p) in probabilities.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(probabilities.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn softmax_is_a_simplex_row() {
        let mut row = vec![1.0, -3.0, 0.25, 10.0];
        Activation::Softmax.apply(&mut row);
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn sample_categorical_degenerate() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..50 {
            assert_eq!(sample_categorical(&[1.0, 0.0, 0.0], &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn sample_categorical_is_seed_deterministic() {
        let draw = |seed| {
            let mut rng = StdRng::seed_from_u64(seed);
            (0..20)
                .map(|_| sample_categorical(&[0.5, 0.5], &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(42), draw(42));
    }

    #[test]
    fn sample_categorical_rejects_unnormalized() {
        let mut rng = StdRng::seed_from_u64(0);
        assert!(sample_categorical(&[0.5, 0.4], &mut rng).is_err());
        assert!(sample_categorical(&[-0.1, 1.1], &mut rng).is_err());
    }

    #[test]
    fn sample_categorical_frequencies_match() {
        // Law-of-large-numbers check at 100k draws.
        let probs = [0.2, 0.3, 0.5];
        let mut rng = StdRng::seed_from_u64(99);
        let mut counts = [0usize; 3];
        let n = 100_000;
        for _ in 0..n {
            counts[sample_categorical(&probs, &mut rng).unwrap()] += 1;
        }
        for (c, p) in counts.iter().zip(&probs) {
            let freq = *c as f64 / n as f64;
            assert!((freq - p).abs() < 0.01, "freq {freq} vs p {p}");
        }
    }

    #[test]
    fn validate_rejects_bad_chains() {
        // width mismatch
        let bad = NetworkSpec {
            layers: vec![
                LayerSpec::dense(2, 3, Activation::Relu),
                LayerSpec::dense(4, 1, Activation::Identity),
            ],
            loss: Loss::Mse,
        };
        assert!(bad.validate().is_err());
        // multiply without embedding
        let bad = NetworkSpec { layers: vec![LayerSpec::multiply(4)], loss: Loss::Mse };
        assert!(bad.validate().is_err());
        // mid-network softmax
        let bad = NetworkSpec {
            layers: vec![
                LayerSpec::dense(2, 2, Activation::Softmax),
                LayerSpec::dense(2, 1, Activation::Identity),
            ],
            loss: Loss::Mse,
        };
        assert!(bad.validate().is_err());
    }
}
