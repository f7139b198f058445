//! Deterministic differentiable models: multinomial logistic regression and
//! a one-hidden-layer MLP (sigmoid hidden units, softmax output,
//! cross-entropy loss).
//!
//! Parameters live in a single flat [`ParamVector`] so the collectives can
//! treat models as opaque payloads. Layout, in order:
//!
//! * logreg: `W (classes x input_dim, row-major), b (classes)`
//! * mlp:    `W1 (hidden x input_dim, row-major), b1 (hidden),
//!            W2 (classes x hidden, row-major), b2 (classes)`
//!
//! Gradients are mean-reduced over the batch, so duplicating every sample
//! leaves the gradient unchanged and the learning rate is batch-size free.

use crate::tensor::{sigmoid, softmax, GradVector, Matrix, ParamVector, Rng};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("parameter vector has length {got}, spec requires {want}")]
    ParamLength { got: usize, want: usize },
    #[error("batch input dim {got} does not match spec input dim {want}")]
    InputDim { got: usize, want: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite activation at sample {sample} (divergence)")]
    NonFinite { sample: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    LogReg,
    Mlp,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::LogReg => "logreg",
            ModelKind::Mlp => "mlp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    /// 0 for logreg.
    pub hidden_dim: usize,
    pub classes: usize,
}

impl ModelSpec {
    pub fn logreg(input_dim: usize, classes: usize) -> Self {
        Self {
            kind: ModelKind::LogReg,
            input_dim,
            hidden_dim: 0,
            classes,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp,
            input_dim,
            hidden_dim,
            classes,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim < 1 {
            return Err(ModelError::InvalidSpec("input_dim must be >= 1".into()));
        }
        if self.classes < 2 {
            return Err(ModelError::InvalidSpec("classes must be >= 2".into()));
        }
        match self.kind {
            ModelKind::LogReg => {
                if self.hidden_dim != 0 {
                    return Err(ModelError::InvalidSpec(
                        "logreg must have hidden_dim = 0".into(),
                    ));
                }
            }
            ModelKind::Mlp => {
                if self.hidden_dim < 1 {
                    return Err(ModelError::InvalidSpec(
                        "mlp must have hidden_dim >= 1".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Total parameter count, a pure function of the spec.
    pub fn param_count(&self) -> usize {
        match self.kind {
            ModelKind::LogReg => self.classes * self.input_dim + self.classes,
            ModelKind::Mlp => {
                self.hidden_dim * self.input_dim
                    + self.hidden_dim
                    + self.classes * self.hidden_dim
                    + self.classes
            }
        }
    }
}

/// One mini-batch: `batch_size x input_dim` inputs plus class labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Self {
        assert_eq!(inputs.rows(), labels.len(), "inputs/labels row mismatch");
        Self { inputs, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn check_batch(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<(), ModelError> {
    spec.validate()?;
    if params.len() != spec.param_count() {
        return Err(ModelError::ParamLength {
            got: params.len(),
            want: spec.param_count(),
        });
    }
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if batch.inputs.cols() != spec.input_dim {
        return Err(ModelError::InputDim {
            got: batch.inputs.cols(),
            want: spec.input_dim,
        });
    }
    for &label in &batch.labels {
        if label >= spec.classes {
            return Err(ModelError::LabelRange {
                label,
                classes: spec.classes,
            });
        }
    }
    Ok(())
}

/// Weights uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], biases zero.
/// Same spec and seed always produce the same vector.
pub fn init_params(spec: &ModelSpec, rng: &mut Rng) -> Result<ParamVector, ModelError> {
    spec.validate()?;
    let mut data = Vec::with_capacity(spec.param_count());
    match spec.kind {
        ModelKind::LogReg => {
            let bound = 1.0 / (spec.input_dim as f64).sqrt();
            for _ in 0..spec.classes * spec.input_dim {
                data.push(rng.uniform(-bound, bound));
            }
            data.extend(std::iter::repeat(0.0).take(spec.classes));
        }
        ModelKind::Mlp => {
            let bound1 = 1.0 / (spec.input_dim as f64).sqrt();
            for _ in 0..spec.hidden_dim * spec.input_dim {
                data.push(rng.uniform(-bound1, bound1));
            }
            data.extend(std::iter::repeat(0.0).take(spec.hidden_dim));
            let bound2 = 1.0 / (spec.hidden_dim as f64).sqrt();
            for _ in 0..spec.classes * spec.hidden_dim {
                data.push(rng.uniform(-bound2, bound2));
            }
            data.extend(std::iter::repeat(0.0).take(spec.classes));
        }
    }
    Ok(ParamVector::from_vec(data))
}

struct MlpViews<'a> {
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
}

fn mlp_views<'a>(spec: &ModelSpec, p: &'a [f64]) -> MlpViews<'a> {
    let (h, d, c) = (spec.hidden_dim, spec.input_dim, spec.classes);
    let w1_end = h * d;
    let b1_end = w1_end + h;
    let w2_end = b1_end + c * h;
    MlpViews {
        w1: &p[..w1_end],
        b1: &p[w1_end..b1_end],
        w2: &p[b1_end..w2_end],
        b2: &p[w2_end..],
    }
}

fn forward_logits(spec: &ModelSpec, params: &[f64], x: &[f64]) -> (Vec<f64>, Option<Vec<f64>>) {
    match spec.kind {
        ModelKind::LogReg => {
            let (c, d) = (spec.classes, spec.input_dim);
            let w = &params[..c * d];
            let b = &params[c * d..];
            let mut logits = Vec::with_capacity(c);
            for k in 0..c {
                let mut z = b[k];
                for i in 0..d {
                    z += w[k * d + i] * x[i];
                }
                logits.push(z);
            }
            (logits, None)
        }
        ModelKind::Mlp => {
            let (h, d, c) = (spec.hidden_dim, spec.input_dim, spec.classes);
            let v = mlp_views(spec, params);
            let mut hidden = Vec::with_capacity(h);
            for j in 0..h {
                let mut z = v.b1[j];
                for i in 0..d {
                    z += v.w1[j * d + i] * x[i];
                }
                hidden.push(sigmoid(z));
            }
            let mut logits = Vec::with_capacity(c);
            for k in 0..c {
                let mut z = v.b2[k];
                for j in 0..h {
                    z += v.w2[k * h + j] * hidden[j];
                }
                logits.push(z);
            }
            (logits, Some(hidden))
        }
    }
}

/// Mean cross-entropy gradient and loss over the batch.
pub fn compute_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
) -> Result<(GradVector, f64), ModelError> {
    check_batch(spec, params, batch)?;
    let p = params.as_slice();
    let mut grad = vec![0.0; params.len()];
    let mut loss_sum = 0.0;
    let b = batch.len() as f64;

    for s in 0..batch.len() {
        let x = batch.inputs.row(s);
        let label = batch.labels[s];
        let (logits, hidden) = forward_logits(spec, p, x);
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite { sample: s });
        }
        let probs = softmax(&logits);
        loss_sum += -probs[label].max(f64::MIN_POSITIVE).ln();

        // dL/dz = softmax - onehot
        let mut dz: Vec<f64> = probs;
        dz[label] -= 1.0;

        match spec.kind {
            ModelKind::LogReg => {
                let (c, d) = (spec.classes, spec.input_dim);
                for k in 0..c {
                    for i in 0..d {
                        grad[k * d + i] += dz[k] * x[i];
                    }
                    grad[c * d + k] += dz[k];
                }
            }
            ModelKind::Mlp => {
                let (h, d, c) = (spec.hidden_dim, spec.input_dim, spec.classes);
                let v = mlp_views(spec, p);
                let hidden = hidden.as_ref().expect("mlp forward produces hidden");
                let w1_end = h * d;
                let b1_end = w1_end + h;
                let w2_end = b1_end + c * h;
                for k in 0..c {
                    for j in 0..h {
                        grad[b1_end + k * h + j] += dz[k] * hidden[j];
                    }
                    grad[w2_end + k] += dz[k];
                }
                for j in 0..h {
                    let mut dh = 0.0;
                    for k in 0..c {
                        dh += v.w2[k * h + j] * dz[k];
                    }
                    let dz1 = dh * hidden[j] * (1.0 - hidden[j]);
                    for i in 0..d {
                        grad[j * d + i] += dz1 * x[i];
                    }
                    grad[w1_end + j] += dz1;
                }
            }
        }
    }

    for g in &mut grad {
        *g /= b;
    }
    let grad = GradVector::from_vec(grad);
    if !grad.is_finite() {
        return Err(ModelError::NonFinite { sample: 0 });
    }
    Ok((grad, loss_sum / b))
}

/// Accuracy (argmax ties resolved toward the lowest class index) and mean
/// cross-entropy loss over `data`.
pub fn evaluate(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Batch,
) -> Result<(f64, f64), ModelError> {
    check_batch(spec, params, data)?;
    let p = params.as_slice();
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    for s in 0..data.len() {
        let x = data.inputs.row(s);
        let label = data.labels[s];
        let (logits, _) = forward_logits(spec, p, x);
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite { sample: s });
        }
        let probs = softmax(&logits);
        loss_sum += -probs[label].max(f64::MIN_POSITIVE).ln();
        let mut best = 0usize;
        for (k, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = k;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok((correct as f64 / data.len() as f64, loss_sum / data.len() as f64))
}
