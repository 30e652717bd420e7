//! Scalar training objectives: the contrastive InfoNCE loss and its margin
//! variant, classification cross-entropy, and the student objective that mixes
//! cross-entropy with a weighted distillation term.
//!
//! All losses are evaluated in `f64` with max-subtracted log-sum-exp and
//! reduced by the arithmetic mean over the batch. Each has a `*_with_grad`
//! twin returning the analytic gradient.

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

/// Allowed deviation of an embedding's Euclidean norm from 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;

/// Query embeddings, their positive keys, and a set of negatives shared by
/// every query in the batch.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    queries: Matrix,
    positives: Matrix,
    negatives: Matrix,
}

impl ContrastiveBatch {
    pub fn new(queries: Matrix, positives: Matrix, negatives: Matrix) -> Result<Self> {
        let (b, d) = (queries.rows(), queries.cols());
        if b == 0 {
            return Err(Error::Shape("contrastive batch has no queries".into()));
        }
        if negatives.rows() == 0 {
            return Err(Error::Shape("contrastive batch has no negatives".into()));
        }
        if d < 2 {
            return Err(Error::Shape(format!("embedding dimension {d} < 2")));
        }
        if positives.rows() != b || positives.cols() != d {
            return Err(Error::Shape(format!(
                "positives are {}x{}, queries are {b}x{d}",
                positives.rows(),
                positives.cols()
            )));
        }
        if negatives.cols() != d {
            return Err(Error::Shape(format!(
                "negatives have dimension {}, queries have {d}",
                negatives.cols()
            )));
        }
        for (name, m) in [
            ("queries", &queries),
            ("positives", &positives),
            ("negatives", &negatives),
        ] {
            let err = m.max_unit_norm_error();
            if !(err <= UNIT_NORM_TOLERANCE) {
                return Err(Error::Validation(format!(
                    "{name} rows are not unit-norm (max deviation {err:e})"
                )));
            }
        }
        Ok(Self {
            queries,
            positives,
            negatives,
        })
    }

    pub fn queries(&self) -> &Matrix {
        &self.queries
    }

    pub fn positives(&self) -> &Matrix {
        &self.positives
    }

    pub fn negatives(&self) -> &Matrix {
        &self.negatives
    }

    pub fn batch_size(&self) -> usize {
        self.queries.rows()
    }

    pub fn num_negatives(&self) -> usize {
        self.negatives.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveLossConfig {
    pub temperature: f64,
    pub margin: f64,
}

impl Default for ContrastiveLossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            margin: 0.6,
        }
    }
}

impl ContrastiveLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Validation(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::Validation(format!(
                "margin must lie in [0, 1), got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phase2LossConfig {
    /// Weight of the distillation term in the student objective.
    pub distill_weight: f64,
}

impl Default for Phase2LossConfig {
    fn default() -> Self {
        Self {
            distill_weight: 1e-4,
        }
    }
}

impl Phase2LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.distill_weight >= 0.0 && self.distill_weight.is_finite()) {
            return Err(Error::Validation(format!(
                "distillation weight must be nonnegative, got {}",
                self.distill_weight
            )));
        }
        Ok(())
    }
}

/// Gradient of a contrastive loss with respect to every embedding.
#[derive(Debug, Clone)]
pub struct ContrastiveGrad {
    pub queries: Matrix,
    pub positives: Matrix,
    pub negatives: Matrix,
}

/// Plain InfoNCE. The configured margin is ignored.
pub fn info_nce_loss(batch: &ContrastiveBatch, cfg: &ContrastiveLossConfig) -> Result<f64> {
    cfg.validate()?;
    Ok(contrastive(batch, cfg.temperature, 0.0, false).0)
}

pub fn info_nce_loss_with_grad(
    batch: &ContrastiveBatch,
    cfg: &ContrastiveLossConfig,
) -> Result<(f64, ContrastiveGrad)> {
    cfg.validate()?;
    let (loss, grad) = contrastive(batch, cfg.temperature, 0.0, true);
    Ok((loss, grad.expect("gradient requested")))
}

/// InfoNCE with the positive logit lowered to `(q·k⁺ − m) / τ`.
pub fn margin_info_nce_loss(batch: &ContrastiveBatch, cfg: &ContrastiveLossConfig) -> Result<f64> {
    cfg.validate()?;
    Ok(contrastive(batch, cfg.temperature, cfg.margin, false).0)
}

pub fn margin_info_nce_loss_with_grad(
    batch: &ContrastiveBatch,
    cfg: &ContrastiveLossConfig,
) -> Result<(f64, ContrastiveGrad)> {
    cfg.validate()?;
    let (loss, grad) = contrastive(batch, cfg.temperature, cfg.margin, true);
    Ok((loss, grad.expect("gradient requested")))
}

fn contrastive(
    batch: &ContrastiveBatch,
    temperature: f64,
    margin: f64,
    want_grad: bool,
) -> (f64, Option<ContrastiveGrad>) {
    let b = batch.batch_size();
    let n = batch.num_negatives();
    let d = batch.queries.cols();
    let inv_t = 1.0 / temperature;
    let scale = 1.0 / b as f64;

    let mut grad = want_grad.then(|| ContrastiveGrad {
        queries: Matrix::zeros(b, d),
        positives: Matrix::zeros(b, d),
        negatives: Matrix::zeros(n, d),
    });

    let mut logits = vec![0.0; n + 1];
    let mut total = 0.0;
    for i in 0..b {
        let q = batch.queries.row(i);
        let kp = batch.positives.row(i);
        logits[0] = (dot(q, kp) - margin) * inv_t;
        for (j, kn) in batch.negatives.iter_rows().enumerate() {
            logits[j + 1] = dot(q, kn) * inv_t;
        }
        let lse = log_sum_exp(&logits);
        total += lse - logits[0];

        if let Some(g) = grad.as_mut() {
            // d loss_i / d logit_j = softmax_j - [j == positive]
            let coeff_pos = ((logits[0] - lse).exp() - 1.0) * inv_t * scale;
            let gq = g.queries.row_mut(i);
            for (a, &k) in gq.iter_mut().zip(kp) {
                *a += coeff_pos * k;
            }
            for (a, &qv) in g.positives.row_mut(i).iter_mut().zip(q) {
                *a += coeff_pos * qv;
            }
            for j in 0..n {
                let coeff = (logits[j + 1] - lse).exp() * inv_t * scale;
                let kn = batch.negatives.row(j);
                let gq = g.queries.row_mut(i);
                for (a, &k) in gq.iter_mut().zip(kn) {
                    *a += coeff * k;
                }
                for (a, &qv) in g.negatives.row_mut(j).iter_mut().zip(q) {
                    *a += coeff * qv;
                }
            }
        }
    }
    (total * scale, grad)
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_labels(logits: &Matrix, labels: &[usize]) -> Result<()> {
    if logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows but {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if logits.rows() == 0 || logits.cols() == 0 {
        return Err(Error::Shape("empty logits".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(Error::Validation(format!(
            "label {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    Ok(())
}

/// Mean of `−log softmax(logits)[label]` over the batch.
pub fn cross_entropy_loss(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(logits, labels)?;
    let total: f64 = logits
        .iter_rows()
        .zip(labels)
        .map(|(row, &y)| log_sum_exp(row) - row[y])
        .sum();
    Ok(total / labels.len() as f64)
}

/// Cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_loss_with_grad(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    check_labels(logits, labels)?;
    let scale = 1.0 / labels.len() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (i, (row, &y)) in logits.iter_rows().zip(labels).enumerate() {
        let lse = log_sum_exp(row);
        total += lse - row[y];
        let g = grad.row_mut(i);
        for (gj, &z) in g.iter_mut().zip(row) {
            *gj = (z - lse).exp() * scale;
        }
        g[y] -= scale;
    }
    Ok((total * scale, grad))
}

/// `ce + λ · distill`.
pub fn combined_student_loss(ce: f64, distill: f64, cfg: &Phase2LossConfig) -> Result<f64> {
    cfg.validate()?;
    if !(ce >= 0.0 && distill >= 0.0) || !ce.is_finite() || !distill.is_finite() {
        return Err(Error::Validation(format!(
            "loss terms must be finite and nonnegative (ce {ce}, distill {distill})"
        )));
    }
    Ok(ce + cfg.distill_weight * distill)
}
