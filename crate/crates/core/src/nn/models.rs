//! Complete networks assembled from the backbone: the phase-1 embedding
//! encoder and the phase-2 classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{l2_normalize_rows, l2_normalize_rows_backward, relu_backward_in_place, relu_in_place, Linear, NormMode};
use super::params::{Layout, LayoutBuilder, ModelState};
use super::resnet::{Backbone, BackboneConfig, BackboneOutput, BackboneTrace};
use super::tensor::{Mat, Tensor};
use crate::error::Result;

/// Two-layer MLP projection head: `fc2(relu(fc1(x)))`.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct HeadTrace {
    input: Mat,
    hidden: Mat,
    embedding: Mat,
    norms: Vec<f32>,
}

impl ProjectionHead {
    pub fn build(b: &mut LayoutBuilder<'_>, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Self {
            fc1: b.scoped("fc1", |b| Linear::build(b, in_dim, hidden)),
            fc2: b.scoped("fc2", |b| Linear::build(b, hidden, out_dim)),
        }
    }

    /// Projects and unit-normalizes.
    pub fn forward(&self, params: &[f32], x: &Mat) -> (Mat, HeadTrace) {
        let mut hidden = self.fc1.forward(params, x);
        relu_in_place(&mut hidden.data);
        let z = self.fc2.forward(params, &hidden);
        let (embedding, norms) = l2_normalize_rows(&z);
        let trace = HeadTrace {
            input: x.clone(),
            hidden,
            embedding: embedding.clone(),
            norms,
        };
        (embedding, trace)
    }

    pub fn backward(&self, params: &[f32], trace: &HeadTrace, d_embedding: &Mat, grad: &mut [f32]) -> Mat {
        let dz = l2_normalize_rows_backward(&trace.embedding, &trace.norms, d_embedding);
        let mut dh = self.fc2.backward(params, &trace.hidden, &dz, grad);
        relu_backward_in_place(&mut dh.data, &trace.hidden.data);
        self.fc1.backward(params, &trace.input, &dh, grad)
    }
}

/// Backbone followed by a projection head producing unit-norm embeddings.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub backbone: Backbone,
    pub head: ProjectionHead,
    pub layout: Layout,
}

#[derive(Debug, Clone)]
pub struct EncoderTrace {
    backbone: BackboneTrace,
    head: HeadTrace,
}

impl Encoder {
    /// Builds the network and a freshly initialized state from `seed`.
    pub fn build(config: &BackboneConfig, embed_dim: usize, seed: u64) -> Result<(Self, ModelState)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = LayoutBuilder::new(&mut rng);
        let backbone = b.scoped("backbone", |b| Backbone::build(b, config))?;
        let dim = backbone.feature_dim();
        let head = b.scoped("head", |b| ProjectionHead::build(b, dim, dim, embed_dim));
        let (layout, state) = b.finish();
        Ok((
            Self {
                backbone,
                head,
                layout,
            },
            state,
        ))
    }

    pub fn embed(&self, params: &[f32], mode: &mut NormMode<'_>, x: &Tensor) -> (Mat, EncoderTrace) {
        let (out, backbone) = self.backbone.forward(params, mode, x);
        let (emb, head) = self.head.forward(params, &out.features);
        (emb, EncoderTrace { backbone, head })
    }

    pub fn backward(&self, params: &[f32], trace: &EncoderTrace, d_embedding: &Mat, grad: &mut [f32]) {
        let df = self.head.backward(params, &trace.head, d_embedding, grad);
        self.backbone.backward(params, &trace.backbone, Some(&df), &[], grad);
    }
}

/// Backbone followed by an affine classifier.
#[derive(Debug, Clone)]
pub struct ClassifierNet {
    pub backbone: Backbone,
    pub fc: Linear,
    pub layout: Layout,
}

impl ClassifierNet {
    /// The classifier head starts at zero; the backbone is randomly initialized.
    pub fn build(config: &BackboneConfig, classes: usize, seed: u64) -> Result<(Self, ModelState)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = LayoutBuilder::new(&mut rng);
        let backbone = b.scoped("backbone", |b| Backbone::build(b, config))?;
        let dim = backbone.feature_dim();
        let fc = b.scoped("fc", |b| Linear::build_zeroed(b, dim, classes));
        let (layout, state) = b.finish();
        Ok((
            Self {
                backbone,
                fc,
                layout,
            },
            state,
        ))
    }

    pub fn classes(&self) -> usize {
        self.fc.out_features
    }

    /// Returns logits, the backbone output (features and stage maps) and the trace.
    pub fn forward(&self, params: &[f32], mode: &mut NormMode<'_>, x: &Tensor) -> (Mat, BackboneOutput, BackboneTrace) {
        let (out, trace) = self.backbone.forward(params, mode, x);
        let logits = self.fc.forward(params, &out.features);
        (logits, out, trace)
    }

    pub fn backward(
        &self,
        params: &[f32],
        out: &BackboneOutput,
        trace: &BackboneTrace,
        d_logits: &Mat,
        d_stages: &[Option<Tensor>],
        grad: &mut [f32],
    ) {
        let df = self.fc.backward(params, &out.features, d_logits, grad);
        self.backbone.backward(params, trace, Some(&df), d_stages, grad);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn head_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut b = LayoutBuilder::new(&mut rng);
        let head = ProjectionHead::build(&mut b, 4, 5, 3);
        let (layout, state) = b.finish();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Mat {
            rows: 2,
            cols: 4,
            data: (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let w: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let obj = |p: &[f32]| -> f64 {
            let (e, _) = head.forward(p, &x);
            e.data.iter().zip(&w).map(|(a, b)| f64::from(a * b)).sum()
        };
        let (_, trace) = head.forward(&state.params, &x);
        let dy = Mat {
            rows: 2,
            cols: 3,
            data: w.clone(),
        };
        let mut grad = vec![0.0; layout.num_params()];
        head.backward(&state.params, &trace, &dy, &mut grad);
        for idx in 0..state.params.len() {
            let mut p = state.params.clone();
            p[idx] += 1e-3;
            let up = obj(&p);
            p[idx] -= 2e-3;
            let fd = (up - obj(&p)) / 2e-3;
            assert!((fd - f64::from(grad[idx])).abs() < 2e-3, "param {idx}: {fd} vs {}", grad[idx]);
        }
    }

    #[test]
    fn classifier_head_starts_at_zero() {
        let cfg = BackboneConfig {
            widths: vec![2, 4],
            blocks: vec![1, 1],
            stem_stride: 1,
            in_channels: 3,
        };
        let (net, state) = ClassifierNet::build(&cfg, 5, 0).unwrap();
        let w = net.layout.param("fc.weight").unwrap();
        assert!(state.params[w.range()].iter().all(|&v| v == 0.0));
        assert_eq!(net.classes(), 5);
    }

    #[test]
    fn encoder_and_classifier_share_backbone_init() {
        let cfg = BackboneConfig::resnet18_like(2);
        let (enc, es) = Encoder::build(&cfg, 8, 5).unwrap();
        let (cls, cs) = ClassifierNet::build(&cfg, 3, 5).unwrap();
        let name = "backbone.layer2.0.conv1.weight";
        let a = enc.layout.param(name).unwrap();
        let b = cls.layout.param(name).unwrap();
        assert_eq!(es.params[a.range()], cs.params[b.range()]);
    }
}
