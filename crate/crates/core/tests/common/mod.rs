#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vprior_core::data::synth::render_shape;
use vprior_core::data::{ChannelStats, Image, LabeledImages};
use vprior_core::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_rows(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut data = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.iter().map(|x| x / n));
    }
    Matrix::from_vec(rows, dim, data).unwrap()
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// `per_class` rendered shapes for each of `classes` classes, in class order.
pub fn shapes(classes: usize, per_class: usize, size: usize, seed: u64) -> LabeledImages {
    let mut r = rng(seed);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for c in 0..classes {
        for _ in 0..per_class {
            images.push(render_shape(c, size, &mut r));
            labels.push(c);
        }
    }
    LabeledImages::new(images, labels, classes, ChannelStats::default()).unwrap()
}

/// Two classes: dark and bright images with mild noise.
pub fn dark_bright(per_class: usize, size: usize, seed: u64) -> LabeledImages {
    let mut r = rng(seed);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for c in 0..2 {
        for _ in 0..per_class {
            let base = if c == 0 { 0.15 } else { 0.85 };
            let data = (0..3 * size * size).map(|_| base + r.gen_range(-0.1..0.1)).collect();
            images.push(Image::new(size, size, data).unwrap());
            labels.push(c);
        }
    }
    LabeledImages::new(images, labels, 2, ChannelStats::default()).unwrap()
}

/// Two-stage backbone on 16-pixel crops; small enough for debug-mode tests.
pub fn tiny_config() -> vprior_core::trainer::TrainConfig {
    use vprior_core::trainer::{ScheduleKind, TrainConfig};
    let mut cfg = TrainConfig::default();
    cfg.model.widths = vec![4, 8];
    cfg.model.blocks = vec![1, 1];
    cfg.model.stem_stride = 1;
    cfg.model.embed_dim = 8;
    cfg.augment.crop_size = 16;
    cfg.phase1.epochs = 2;
    cfg.phase1.batch_size = 4;
    cfg.phase1.queue_size = 8;
    cfg.phase1.schedule = ScheduleKind::Cosine;
    cfg.phase2.epochs = 2;
    cfg.phase2.batch_size = 4;
    cfg.phase2.stages = vec!["stage1".into(), "stage2".into()];
    cfg.phase2.eval_every = 1;
    cfg.probe.epochs = 30;
    cfg.probe.batch_size = 8;
    cfg
}
