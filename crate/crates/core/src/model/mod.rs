//! Small differentiable models over flat parameter vectors.
//!
//! Three architectures share one interface: linear regression (single
//! output), multinomial logistic regression and a one-hidden-layer tanh MLP.
//! Every model decomposes into a featurizer and a classifier; for the linear
//! and logistic models the featurizer is the identity, for the MLP it is the
//! hidden layer. Gradients are analytic throughout.

mod optim;
mod params;

pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use params::{Block, Layout, ParamVector};

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("parameter layouts do not match")]
    LayoutMismatch,
    #[error("unknown parameter block '{0}'")]
    UnknownBlock(String),
    #[error("expected {expected} input features, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("gradient contains a non-finite entry")]
    NonFiniteGradient,
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("cross-entropy requires at least 2 outputs")]
    CrossEntropyNeedsClasses,
    #[error("target shape does not match model output")]
    TargetMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Linear,
    Logistic,
    Mlp,
}

/// Architecture plus dimensions; the featurizer/classifier boundary is
/// implied by the architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub classes: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
}

fn default_hidden() -> usize {
    16
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 {
            return Err(ModelError::InvalidSpec("input_dim must be >= 1".into()));
        }
        match self.architecture {
            Architecture::Linear => {}
            Architecture::Logistic | Architecture::Mlp => {
                if self.classes < 2 {
                    return Err(ModelError::InvalidSpec(
                        "logistic and mlp models need classes >= 2".into(),
                    ));
                }
            }
        }
        if self.architecture == Architecture::Mlp && self.hidden == 0 {
            return Err(ModelError::InvalidSpec("hidden width must be >= 1".into()));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        match self.architecture {
            Architecture::Linear => 1,
            _ => self.classes,
        }
    }

    pub fn representation_dim(&self) -> usize {
        match self.architecture {
            Architecture::Mlp => self.hidden,
            _ => self.input_dim,
        }
    }

    pub fn layout(&self) -> Layout {
        let (p, k) = (self.input_dim, self.output_dim());
        match self.architecture {
            Architecture::Linear | Architecture::Logistic => {
                Layout::new(&[("classifier.weight", p * k), ("classifier.bias", k)])
            }
            Architecture::Mlp => {
                let h = self.hidden;
                Layout::new(&[
                    ("featurizer.weight", p * h),
                    ("featurizer.bias", h),
                    ("classifier.weight", h * k),
                    ("classifier.bias", k),
                ])
            }
        }
    }

    /// Seeded initialization: weights uniform in (-1/sqrt(fan_in),
    /// 1/sqrt(fan_in)), biases zero.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamVector::zeros(self.layout());
        let mut fill = |params: &mut ParamVector, name: &str, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let range = params.layout().range(name).expect("block exists");
            for v in &mut params.values_mut()[range] {
                *v = rng.random_range(-bound..bound);
            }
        };
        match self.architecture {
            Architecture::Linear | Architecture::Logistic => {
                fill(&mut params, "classifier.weight", self.input_dim);
            }
            Architecture::Mlp => {
                fill(&mut params, "featurizer.weight", self.input_dim);
                fill(&mut params, "classifier.weight", self.hidden);
            }
        }
        params
    }
}

/// Logits plus the featurizer output for a batch.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Array2<f64>,
    pub representation: Array2<f64>,
}

fn weight_view<'a>(
    params: &'a ParamVector,
    name: &str,
    rows: usize,
    cols: usize,
) -> Result<ArrayView2<'a, f64>, ModelError> {
    let range = params.layout().range(name)?;
    ArrayView2::from_shape((rows, cols), &params.values()[range])
        .map_err(|_| ModelError::LayoutMismatch)
}

fn check_batch(spec: &ModelSpec, x: &ArrayView2<f64>) -> Result<(), ModelError> {
    if x.nrows() == 0 {
        return Err(ModelError::EmptyBatch);
    }
    if x.ncols() != spec.input_dim {
        return Err(ModelError::DimensionMismatch {
            expected: spec.input_dim,
            found: x.ncols(),
        });
    }
    Ok(())
}

pub fn forward(
    spec: &ModelSpec,
    params: &ParamVector,
    x: ArrayView2<f64>,
) -> Result<ForwardPass, ModelError> {
    check_batch(spec, &x)?;
    let k = spec.output_dim();
    match spec.architecture {
        Architecture::Linear | Architecture::Logistic => {
            let w = weight_view(params, "classifier.weight", spec.input_dim, k)?;
            let b = params.block("classifier.bias")?;
            let mut logits = x.dot(&w);
            for mut row in logits.rows_mut() {
                for (v, &bias) in row.iter_mut().zip(b) {
                    *v += bias;
                }
            }
            Ok(ForwardPass {
                logits,
                representation: x.to_owned(),
            })
        }
        Architecture::Mlp => {
            let h = spec.hidden;
            let w1 = weight_view(params, "featurizer.weight", spec.input_dim, h)?;
            let b1 = params.block("featurizer.bias")?;
            let w2 = weight_view(params, "classifier.weight", h, k)?;
            let b2 = params.block("classifier.bias")?;
            let mut hidden = x.dot(&w1);
            for mut row in hidden.rows_mut() {
                for (v, &bias) in row.iter_mut().zip(b1) {
                    *v = (*v + bias).tanh();
                }
            }
            let mut logits = hidden.dot(&w2);
            for mut row in logits.rows_mut() {
                for (v, &bias) in row.iter_mut().zip(b2) {
                    *v += bias;
                }
            }
            Ok(ForwardPass {
                logits,
                representation: hidden,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "cross-entropy")]
    CrossEntropy,
    #[serde(rename = "squared")]
    Squared,
}

/// Prediction targets: class ids, or an explicit per-output matrix (soft
/// labels from mixup, regression values).
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Hard(&'a [usize]),
    Soft(ArrayView2<'a, f64>),
}

impl Targets<'_> {
    fn len(&self) -> usize {
        match self {
            Targets::Hard(y) => y.len(),
            Targets::Soft(t) => t.nrows(),
        }
    }

    /// Dense n x k target matrix.
    fn dense(&self, k: usize) -> Result<Array2<f64>, ModelError> {
        match self {
            Targets::Hard(y) => {
                let mut t = Array2::zeros((y.len(), k));
                for (i, &label) in y.iter().enumerate() {
                    if k == 1 {
                        t[(i, 0)] = label as f64;
                    } else {
                        if label >= k {
                            return Err(ModelError::InvalidLabel { label, classes: k });
                        }
                        t[(i, label)] = 1.0;
                    }
                }
                Ok(t)
            }
            Targets::Soft(t) => {
                if t.ncols() != k {
                    return Err(ModelError::TargetMismatch);
                }
                Ok(t.to_owned())
            }
        }
    }
}

/// Row-wise softmax with the max subtracted for stability.
pub(crate) fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean loss and the gradient of the mean loss with respect to the logits.
fn loss_and_logit_grad(
    spec: &ModelSpec,
    logits: &Array2<f64>,
    targets: &Targets,
    loss: LossKind,
) -> Result<(f64, Array2<f64>), ModelError> {
    let n = logits.nrows();
    if targets.len() != n {
        return Err(ModelError::TargetMismatch);
    }
    let k = spec.output_dim();
    let t = targets.dense(k)?;
    match loss {
        LossKind::CrossEntropy => {
            if k < 2 {
                return Err(ModelError::CrossEntropyNeedsClasses);
            }
            let probs = softmax(logits);
            let mut total = 0.0;
            for i in 0..n {
                for j in 0..k {
                    if t[(i, j)] != 0.0 {
                        total -= t[(i, j)] * probs[(i, j)].max(f64::MIN_POSITIVE).ln();
                    }
                }
            }
            let grad = (&probs - &t) / n as f64;
            Ok((total / n as f64, grad))
        }
        LossKind::Squared => {
            let diff = logits - &t;
            let total: f64 = diff.iter().map(|d| d * d).sum();
            let grad = diff * (2.0 / n as f64);
            Ok((total / n as f64, grad))
        }
    }
}

pub fn loss_value(
    spec: &ModelSpec,
    params: &ParamVector,
    x: ArrayView2<f64>,
    targets: Targets,
    loss: LossKind,
) -> Result<f64, ModelError> {
    let pass = forward(spec, params, x)?;
    let (value, _) = loss_and_logit_grad(spec, &pass.logits, &targets, loss)?;
    Ok(value)
}

/// Mean loss over the batch and its analytic gradient.
pub fn loss_and_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    x: ArrayView2<f64>,
    targets: Targets,
    loss: LossKind,
) -> Result<(f64, ParamVector), ModelError> {
    let pass = forward(spec, params, x)?;
    let (value, logit_grad) = loss_and_logit_grad(spec, &pass.logits, &targets, loss)?;
    let grad = backward_from_logits(spec, params, x, logit_grad.view())?;
    Ok((value, grad))
}

/// Chains a gradient with respect to the logits back to the parameters.
pub fn backward_from_logits(
    spec: &ModelSpec,
    params: &ParamVector,
    x: ArrayView2<f64>,
    logit_grad: ArrayView2<f64>,
) -> Result<ParamVector, ModelError> {
    check_batch(spec, &x)?;
    let k = spec.output_dim();
    if logit_grad.nrows() != x.nrows() || logit_grad.ncols() != k {
        return Err(ModelError::TargetMismatch);
    }
    let mut grad = ParamVector::zeros(spec.layout());
    match spec.architecture {
        Architecture::Linear | Architecture::Logistic => {
            let dw = x.t().dot(&logit_grad);
            let db = logit_grad.sum_axis(Axis(0));
            grad.set_block("classifier.weight", dw.as_slice().expect("contiguous"))?;
            grad.set_block("classifier.bias", db.as_slice().expect("contiguous"))?;
        }
        Architecture::Mlp => {
            let pass = forward(spec, params, x)?;
            let hidden = &pass.representation;
            let w2 = weight_view(params, "classifier.weight", spec.hidden, k)?;
            let dw2 = hidden.t().dot(&logit_grad);
            let db2 = logit_grad.sum_axis(Axis(0));
            let mut dh = logit_grad.dot(&w2.t());
            for (v, &a) in dh.iter_mut().zip(hidden.iter()) {
                *v *= 1.0 - a * a;
            }
            let dw1 = x.t().dot(&dh);
            let db1 = dh.sum_axis(Axis(0));
            grad.set_block("featurizer.weight", dw1.as_slice().expect("contiguous"))?;
            grad.set_block("featurizer.bias", db1.as_slice().expect("contiguous"))?;
            grad.set_block("classifier.weight", dw2.as_slice().expect("contiguous"))?;
            grad.set_block("classifier.bias", db2.as_slice().expect("contiguous"))?;
        }
    }
    Ok(grad)
}

/// Chains a gradient with respect to the representation back to the
/// parameters. Identity featurizers contribute nothing.
pub fn backward_from_representation(
    spec: &ModelSpec,
    params: &ParamVector,
    x: ArrayView2<f64>,
    repr_grad: ArrayView2<f64>,
) -> Result<ParamVector, ModelError> {
    check_batch(spec, &x)?;
    if repr_grad.nrows() != x.nrows() || repr_grad.ncols() != spec.representation_dim() {
        return Err(ModelError::TargetMismatch);
    }
    let mut grad = ParamVector::zeros(spec.layout());
    if spec.architecture == Architecture::Mlp {
        let pass = forward(spec, params, x)?;
        let hidden = &pass.representation;
        let mut dh = repr_grad.to_owned();
        for (v, &a) in dh.iter_mut().zip(hidden.iter()) {
            *v *= 1.0 - a * a;
        }
        let dw1 = x.t().dot(&dh);
        let db1 = dh.sum_axis(Axis(0));
        grad.set_block("featurizer.weight", dw1.as_slice().expect("contiguous"))?;
        grad.set_block("featurizer.bias", db1.as_slice().expect("contiguous"))?;
    }
    Ok(grad)
}
