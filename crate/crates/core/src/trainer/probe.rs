//! Linear probing of frozen features and top-1 evaluation.

use log::info;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, Phase};
use super::config::{Section, TeacherSource, TrainConfig};
use super::phase1::load_encoder;
use super::{argmax, epoch_order, eval_batches, stats_from_meta, to_matrix};
use crate::data::{AugmentationPolicy, LabeledImages};
use crate::error::{Error, Result};
use crate::losses::cross_entropy_loss_with_grad;
use crate::matrix::Matrix;
use crate::nn::layers::NormMode;
use crate::nn::{Backbone, ClassifierNet, Mat, ModelState, Sgd};

const EVAL_CHUNK: usize = 100;

/// Affine classifier over standardized backbone features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub classes: usize,
    pub dim: usize,
    /// Row-major `[classes × dim]`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    /// Standardization fitted on the training features.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LinearProbe {
    fn standardize(&self, features: &Mat) -> Matrix {
        let mut z = to_matrix(features);
        for r in 0..z.rows() {
            for ((v, m), s) in z.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        z
    }

    fn logits(&self, z: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(z.rows(), self.classes);
        for r in 0..z.rows() {
            let x = z.row(r);
            for c in 0..self.classes {
                let w = &self.weight[c * self.dim..(c + 1) * self.dim];
                out.set(r, c, self.bias[c] + crate::matrix::dot(w, x));
            }
        }
        out
    }

    pub fn predict(&self, features: &Mat) -> Vec<usize> {
        let logits = self.logits(&self.standardize(features));
        (0..logits.rows())
            .map(|r| argmax(&logits.row(r).iter().map(|&v| v as f32).collect::<Vec<_>>()))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub probe: LinearProbe,
    pub train_top1: f64,
    pub val_top1: Option<f64>,
    /// Digest of the frozen model state before and after probing.
    pub backbone_digests: (String, String),
}

/// Backbone and state of a checkpoint: the query encoder of phase 1 or the
/// classifier trunk of phase 2.
fn backbone_of(ckpt: &Checkpoint) -> Result<(Backbone, ModelState)> {
    match ckpt.phase {
        Phase::Phase1 => {
            let (encoder, state) = load_encoder(ckpt, TeacherSource::Query)?;
            Ok((encoder.backbone, state))
        }
        Phase::Phase2 => {
            let (net, state) = classifier_of(ckpt)?;
            Ok((net.backbone, state))
        }
    }
}

fn classifier_of(ckpt: &Checkpoint) -> Result<(ClassifierNet, ModelState)> {
    let cfg = TrainConfig::from_map(&ckpt.config)?;
    let classes: usize = ckpt.meta_value("classes")?;
    let (net, _) = ClassifierNet::build(&cfg.model.backbone(), classes, 0)?;
    let state = ckpt.load_state("model", &net.layout)?;
    Ok((net, state))
}

/// Pooled inference-mode features of every image, in order.
pub fn extract_features(
    backbone: &Backbone,
    state: &ModelState,
    data: &LabeledImages,
    policy: &AugmentationPolicy,
) -> Result<Mat> {
    let dim = backbone.feature_dim();
    let mut out = Mat::zeros(data.len(), dim);
    let mut row = 0;
    for x in eval_batches(data.images(), policy, EVAL_CHUNK) {
        let x = x?;
        let (o, _) = backbone.forward(&state.params, &mut NormMode::Running(&state.buffers), &x);
        out.data[row * dim..(row + o.features.rows) * dim].copy_from_slice(&o.features.data);
        row += o.features.rows;
    }
    Ok(out)
}

/// Eval preprocessing recorded in the checkpoint: its crop size and the
/// normalization statistics of its training data.
fn eval_policy(ckpt: &Checkpoint, data: &LabeledImages) -> Result<AugmentationPolicy> {
    let cfg = TrainConfig::from_map(&ckpt.config)?;
    Ok(cfg.augment.eval_policy(stats_from_meta(ckpt).unwrap_or(data.stats())))
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let correct = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    correct as f64 / labels.len().max(1) as f64
}

/// Trains an affine classifier on frozen, standardized features of the
/// checkpoint's backbone and reports top-1 accuracy.
pub fn linear_probe(
    cfg: &TrainConfig,
    ckpt: &Checkpoint,
    train: &LabeledImages,
    val: Option<&LabeledImages>,
) -> Result<ProbeReport> {
    cfg.probe.validate()?;
    let pc = &cfg.probe;
    let (backbone, state) = backbone_of(ckpt)?;
    let before = state.digest();
    let policy = eval_policy(ckpt, train)?;
    let feats = extract_features(&backbone, &state, train, &policy)?;
    let (n, dim) = (feats.rows, feats.cols);
    let classes = train.classes();

    let mut mean = vec![0.0; dim];
    let mut var = vec![0.0; dim];
    for r in 0..n {
        for (m, &v) in mean.iter_mut().zip(feats.row(r)) {
            *m += f64::from(v) / n as f64;
        }
    }
    for r in 0..n {
        for ((s, &v), m) in var.iter_mut().zip(feats.row(r)).zip(&mean) {
            *s += (f64::from(v) - m).powi(2) / n as f64;
        }
    }
    let mut probe = LinearProbe {
        classes,
        dim,
        weight: vec![0.0; classes * dim],
        bias: vec![0.0; classes],
        mean,
        std: var.iter().map(|v| v.sqrt().max(1e-6)).collect(),
    };
    let z = probe.standardize(&feats);

    let batch = pc.batch_size.min(n);
    // Weight decay is applied to the weights only, below.
    let mut opt = Sgd::new(classes * (dim + 1), f64::from(pc.sgd_momentum), 0.0);
    let wd = f64::from(pc.weight_decay);
    let mut params = vec![0.0; classes * (dim + 1)];
    for epoch in 0..pc.epochs {
        let lr = pc.lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / pc.epochs as f64).cos());
        for idx in epoch_order(n, pc.seed, epoch).chunks(batch) {
            let mut zb = Matrix::zeros(idx.len(), dim);
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels()[i]).collect();
            for (r, &i) in idx.iter().enumerate() {
                zb.row_mut(r).copy_from_slice(z.row(i));
            }
            let (_, d_logits) = cross_entropy_loss_with_grad(&probe.logits(&zb), &labels)?;
            let mut grad = vec![0.0; params.len()];
            for r in 0..idx.len() {
                for c in 0..classes {
                    let g = d_logits.get(r, c);
                    for (gw, &x) in grad[c * dim..(c + 1) * dim].iter_mut().zip(zb.row(r)) {
                        *gw += g * x;
                    }
                    grad[classes * dim + c] += g;
                }
            }
            for (g, p) in grad[..classes * dim].iter_mut().zip(&params[..classes * dim]) {
                *g += wd * p;
            }
            opt.step(lr, &mut params, &grad);
            probe.weight.copy_from_slice(&params[..classes * dim]);
            probe.bias.copy_from_slice(&params[classes * dim..]);
        }
    }

    let train_top1 = accuracy(&probe.predict(&feats), train.labels());
    let val_top1 = match val {
        Some(v) => Some(accuracy(
            &probe.predict(&extract_features(&backbone, &state, v, &policy)?),
            v.labels(),
        )),
        None => None,
    };
    let after = state.digest();
    info!(
        "linear probe: train top1 {train_top1:.3}{}",
        val_top1.map(|a| format!(", val top1 {a:.3}")).unwrap_or_default()
    );
    Ok(ProbeReport {
        probe,
        train_top1,
        val_top1,
        backbone_digests: (before, after),
    })
}

pub(crate) fn classifier_top1(
    net: &ClassifierNet,
    state: &ModelState,
    data: &LabeledImages,
    policy: &AugmentationPolicy,
) -> Result<f64> {
    let mut pred = Vec::with_capacity(data.len());
    for x in eval_batches(data.images(), policy, EVAL_CHUNK) {
        let (logits, _, _) = net.forward(&state.params, &mut NormMode::Running(&state.buffers), &x?);
        pred.extend((0..logits.rows).map(|r| argmax(logits.row(r))));
    }
    Ok(accuracy(&pred, data.labels()))
}

/// Top-1 accuracy of a checkpoint on `data` using deterministic eval
/// preprocessing. Phase-2 checkpoints use their classifier unless a probe
/// is supplied; phase-1 checkpoints need a probe.
pub fn evaluate_top1(ckpt: &Checkpoint, data: &LabeledImages, probe: Option<&LinearProbe>) -> Result<f64> {
    let policy = eval_policy(ckpt, data)?;
    match (probe, ckpt.phase) {
        (Some(probe), _) => {
            let (backbone, state) = backbone_of(ckpt)?;
            if probe.dim != backbone.feature_dim() {
                return Err(Error::Shape(format!(
                    "probe expects {} features, backbone emits {}",
                    probe.dim,
                    backbone.feature_dim()
                )));
            }
            let feats = extract_features(&backbone, &state, data, &policy)?;
            Ok(accuracy(&probe.predict(&feats), data.labels()))
        }
        (None, Phase::Phase2) => {
            let (net, state) = classifier_of(ckpt)?;
            if net.classes() != data.classes() {
                return Err(Error::Validation(format!(
                    "classifier has {} classes, data has {}",
                    net.classes(),
                    data.classes()
                )));
            }
            classifier_top1(&net, &state, data, &policy)
        }
        (None, Phase::Phase1) => Err(Error::Validation(
            "phase1 checkpoint has no classifier head; supply a linear probe".into(),
        )),
    }
}
