//! Training orchestration: contrastive pre-training, supervised fine-tuning
//! with self-distillation, linear probing and evaluation.
//!
//! Every random draw is derived from a configured seed through
//! [`mix_seed`], keyed by epoch and sample position, so runs are
//! reproducible and can resume from any epoch boundary.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod phase1;
pub mod phase2;
pub mod probe;
pub mod schedule;

pub use checkpoint::{Checkpoint, NamedTensor, Phase, TensorData};
pub use config::{
    AugmentConfig, ConfigMap, ModelConfig, Phase1Config, Phase2Config, ProbeConfig, QueueInit, Section,
    TeacherSource, TrainConfig,
};
pub use metrics::{
    read_metrics, EpochRecord, JsonlSink, MemorySink, MetricRecord, MetricsSink, NullSink, StepRecord,
};
pub use phase1::{initial_phase1_checkpoint, load_encoder, pretrain_phase1, pretrain_phase1_until, resume_phase1};
pub use phase2::{finetune_phase2, finetune_plain, ParamGroup, Phase2Outcome};
pub use probe::{evaluate_top1, linear_probe, LinearProbe, ProbeReport};
pub use schedule::{lr_at, LrSchedule, ScheduleKind};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{ChannelStats, Image};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{Mat, Tensor};

/// Stream tags keeping independent uses of one seed apart.
pub(crate) mod stream {
    pub const SHUFFLE: u64 = 1;
    pub const AUGMENT: u64 = 2;
    pub const QUEUE: u64 = 3;
    pub const CONNECTOR: u64 = 4;
    pub const WARM_START: u64 = 5;
}

/// Combines a seed with stream, epoch and position into a new seed
/// (SplitMix64 finalizer applied per component).
pub fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

/// Shuffled sample order of one epoch.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[stream::SHUFFLE, epoch as u64]));
    order.shuffle(&mut rng);
    order
}

/// Full batches of one epoch; the incomplete tail is dropped.
pub(crate) fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > len {
        return Err(Error::Config(format!(
            "batch size {batch_size} does not fit a dataset of {len} images"
        )));
    }
    let order = epoch_order(len, seed, epoch);
    Ok(order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
}

/// Augmentation seed of the sample at `position` in `epoch`.
pub(crate) fn sample_seed(seed: u64, epoch: usize, position: usize) -> u64 {
    mix_seed(seed, &[stream::AUGMENT, epoch as u64, position as u64])
}

pub(crate) fn stack(views: &[Vec<f32>], crop: usize) -> Tensor {
    Tensor::from_samples(views, 3, crop, crop)
}

pub(crate) fn to_matrix(m: &Mat) -> Matrix {
    Matrix::from_f32(m.rows, m.cols, &m.data).expect("Mat dimensions are consistent")
}

pub(crate) fn to_mat(m: &Matrix) -> Mat {
    Mat {
        rows: m.rows(),
        cols: m.cols(),
        data: m.to_f32(),
    }
}

pub(crate) fn check_finite(
    phase: &str,
    epoch: usize,
    step: usize,
    lr: f64,
    components: &[(&str, f64)],
) -> Result<()> {
    if components.iter().all(|(_, v)| v.is_finite()) {
        return Ok(());
    }
    let components = components
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(", ");
    log::error!("non-finite loss: phase {phase} epoch {epoch} step {step} lr {lr}: {components}");
    Err(Error::NonFinite {
        phase: phase.to_string(),
        epoch,
        step,
        lr,
        components,
    })
}

pub(crate) fn stats_to_meta(stats: &ChannelStats) -> [(String, String); 2] {
    let join = |v: &[f32; 3]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
    [
        ("stats_mean".into(), join(&stats.mean)),
        ("stats_std".into(), join(&stats.std)),
    ]
}

pub(crate) fn stats_from_meta(ckpt: &Checkpoint) -> Option<ChannelStats> {
    let triple = |key: &str| -> Option<[f32; 3]> {
        let v: Vec<f32> = ckpt
            .meta
            .get(key)?
            .split(',')
            .map(|p| p.parse().ok())
            .collect::<Option<_>>()?;
        v.try_into().ok()
    };
    Some(ChannelStats {
        mean: triple("stats_mean")?,
        std: triple("stats_std")?,
    })
}

/// Deterministic eval-mode inputs of `images`, in order, in chunks of `chunk`.
pub(crate) fn eval_batches<'a>(
    images: &'a [Image],
    policy: &'a crate::data::AugmentationPolicy,
    chunk: usize,
) -> impl Iterator<Item = Result<Tensor>> + 'a {
    images.chunks(chunk).map(move |imgs| {
        let views = imgs
            .iter()
            .map(|img| crate::data::supervised_augment(img, policy, 0))
            .collect::<Result<Vec<_>>>()?;
        Ok(stack(&views, policy.crop_size))
    })
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(50, 3, 1);
        assert_eq!(a, epoch_order(50, 3, 1));
        assert_ne!(a, epoch_order(50, 3, 2));
        assert_ne!(a, epoch_order(50, 4, 1));
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn batches_drop_the_tail() {
        let b = epoch_batches(10, 4, 0, 0).unwrap();
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|x| x.len() == 4));
        assert!(epoch_batches(3, 4, 0, 0).is_err());
    }

    #[test]
    fn mixing_separates_streams() {
        let seeds: std::collections::HashSet<u64> = (0..100)
            .flat_map(|e| (0..10).map(move |p| sample_seed(7, e, p)))
            .collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(mix_seed(1, &[2, 3]), mix_seed(1, &[3, 2]));
    }

    #[test]
    fn non_finite_components_abort() {
        assert!(check_finite("phase1", 0, 0, 0.1, &[("loss", 1.0)]).is_ok());
        let err = check_finite("phase1", 2, 5, 0.1, &[("loss", f64::NAN)]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { epoch: 2, step: 5, .. }));
    }

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5, -1.0]), 1);
    }
}
