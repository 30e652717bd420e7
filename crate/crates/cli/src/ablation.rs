//! Desk-scale ablations: probe accuracy over queue sizes and margins, and
//! the four-arm comparison of training pipelines.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use vprior_core::data::LabeledImages;
use vprior_core::trainer::{
    finetune_phase2, finetune_plain, initial_phase1_checkpoint, linear_probe, pretrain_phase1, MetricsSink,
    NullSink, TrainConfig,
};
use vprior_core::Result;

/// One (queue size, margin, seed) cell of the negatives ablation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NegativeCell {
    pub queue_size: usize,
    pub margin: f64,
    pub seed: u64,
    pub probe_top1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    RandomInitProbe,
    SupervisedScratch,
    Phase1Probe,
    Phase1Finetune,
    Phase1Phase2,
}

impl Arm {
    pub const ALL: [Arm; 5] = [
        Arm::RandomInitProbe,
        Arm::SupervisedScratch,
        Arm::Phase1Probe,
        Arm::Phase1Finetune,
        Arm::Phase1Phase2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::RandomInitProbe => "random_init_probe",
            Arm::SupervisedScratch => "supervised_scratch",
            Arm::Phase1Probe => "phase1_probe",
            Arm::Phase1Finetune => "phase1_finetune",
            Arm::Phase1Phase2 => "phase1_phase2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub seed: u64,
    pub top1: f64,
}

/// Sets every stream seed of the configuration.
pub fn with_seed(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    let mut cfg = cfg.clone();
    cfg.phase1.seed = seed;
    cfg.phase2.seed = seed;
    cfg.probe.seed = seed;
    cfg
}

/// Pre-trains with queue size `k` and margin `m`, then reports validation
/// probe accuracy.
pub fn negative_cell(
    cfg: &TrainConfig,
    k: usize,
    m: f64,
    seed: u64,
    train: &LabeledImages,
    val: &LabeledImages,
    sink: &mut dyn MetricsSink,
) -> Result<NegativeCell> {
    let mut cfg = with_seed(cfg, seed);
    cfg.phase1.queue_size = k;
    cfg.phase1.margin = m;
    let ckpt = pretrain_phase1(&cfg, &train.unlabeled(), sink)?;
    let report = linear_probe(&cfg, &ckpt, train, Some(val))?;
    Ok(NegativeCell {
        queue_size: k,
        margin: m,
        seed,
        probe_top1: report.val_top1.expect("validation set given"),
    })
}

/// Every combination of queue size, margin and seed, margins outermost.
pub fn ablate_negatives(
    cfg: &TrainConfig,
    queue_sizes: &[usize],
    margins: &[f64],
    seeds: &[u64],
    train: &LabeledImages,
    val: &LabeledImages,
) -> Result<Vec<NegativeCell>> {
    let mut cells = Vec::new();
    for &m in margins {
        for &k in queue_sizes {
            for &seed in seeds {
                cells.push(negative_cell(cfg, k, m, seed, train, val, &mut NullSink)?);
            }
        }
    }
    Ok(cells)
}

/// Validation top-1 of every arm for one seed. The three pre-trained arms
/// share a single phase-1 run.
pub fn pipeline_arms(
    cfg: &TrainConfig,
    seed: u64,
    arms: &[Arm],
    train: &LabeledImages,
    val: &LabeledImages,
) -> Result<Vec<ArmResult>> {
    let cfg = with_seed(cfg, seed);
    let needs_phase1 = arms
        .iter()
        .any(|a| matches!(a, Arm::Phase1Probe | Arm::Phase1Finetune | Arm::Phase1Phase2));
    let phase1 = if needs_phase1 {
        Some(pretrain_phase1(&cfg, &train.unlabeled(), &mut NullSink)?)
    } else {
        None
    };
    let mut out = Vec::new();
    for &arm in arms {
        let top1 = match arm {
            Arm::RandomInitProbe => {
                let init = initial_phase1_checkpoint(&cfg, &train.unlabeled())?;
                linear_probe(&cfg, &init, train, Some(val))?.val_top1
            }
            Arm::SupervisedScratch => finetune_plain(&cfg, None, train, Some(val), &mut NullSink)?.val_top1,
            Arm::Phase1Probe => linear_probe(&cfg, phase1.as_ref().expect("pre-trained"), train, Some(val))?.val_top1,
            Arm::Phase1Finetune => {
                finetune_plain(&cfg, phase1.as_ref(), train, Some(val), &mut NullSink)?.val_top1
            }
            Arm::Phase1Phase2 => {
                finetune_phase2(&cfg, phase1.as_ref().expect("pre-trained"), train, Some(val), &mut NullSink)?.val_top1
            }
        };
        out.push(ArmResult {
            arm,
            seed,
            top1: top1.expect("validation set given"),
        });
    }
    Ok(out)
}

pub fn ablate_pipeline(
    cfg: &TrainConfig,
    seeds: &[u64],
    train: &LabeledImages,
    val: &LabeledImages,
) -> Result<Vec<ArmResult>> {
    let mut out = Vec::new();
    for &seed in seeds {
        out.extend(pipeline_arms(cfg, seed, &Arm::ALL, train, val)?);
    }
    Ok(out)
}

/// Median of a nonempty sample; the mean of the two middle values for even
/// sizes.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Median probe accuracy of each (margin, queue size) pair over seeds.
pub fn negative_medians(cells: &[NegativeCell]) -> Vec<(f64, usize, f64)> {
    let mut keys: Vec<(f64, usize)> = Vec::new();
    for c in cells {
        if !keys.contains(&(c.margin, c.queue_size)) {
            keys.push((c.margin, c.queue_size));
        }
    }
    keys.into_iter()
        .map(|(m, k)| {
            let v: Vec<f64> = cells
                .iter()
                .filter(|c| c.margin == m && c.queue_size == k)
                .map(|c| c.probe_top1)
                .collect();
            (m, k, median(&v))
        })
        .collect()
}

/// Median accuracy at the largest queue size minus that at the smallest, for
/// the given margin.
pub fn accuracy_drop(cells: &[NegativeCell], margin: f64) -> Option<f64> {
    let medians: Vec<(usize, f64)> = negative_medians(cells)
        .into_iter()
        .filter(|&(m, _, _)| m == margin)
        .map(|(_, k, a)| (k, a))
        .collect();
    let largest = medians.iter().max_by_key(|(k, _)| *k)?;
    let smallest = medians.iter().min_by_key(|(k, _)| *k)?;
    Some(largest.1 - smallest.1)
}

pub fn arm_median(results: &[ArmResult], arm: Arm) -> Option<f64> {
    let v: Vec<f64> = results.iter().filter(|r| r.arm == arm).map(|r| r.top1).collect();
    (!v.is_empty()).then(|| median(&v))
}

pub fn negatives_csv(cells: &[NegativeCell]) -> String {
    let mut out = String::from("loss,margin,queue_size,seed,probe_top1\n");
    for c in cells {
        let loss = if c.margin == 0.0 { "info_nce" } else { "margin_info_nce" };
        writeln!(out, "{loss},{},{},{},{:.6}", c.margin, c.queue_size, c.seed, c.probe_top1).expect("string write");
    }
    out
}

pub fn pipeline_csv(results: &[ArmResult]) -> String {
    let mut out = String::from("arm,seed,top1\n");
    for r in results {
        writeln!(out, "{},{},{:.6}", r.arm.name(), r.seed, r.top1).expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even_samples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn drop_uses_extreme_queue_sizes() {
        let cell = |k, m, seed, a| NegativeCell {
            queue_size: k,
            margin: m,
            seed,
            probe_top1: a,
        };
        let cells = vec![
            cell(64, 0.0, 0, 0.2),
            cell(64, 0.0, 1, 0.3),
            cell(64, 0.0, 2, 0.1),
            cell(1024, 0.0, 0, 0.5),
            cell(256, 0.0, 0, 0.9),
            cell(64, 0.6, 0, 0.4),
            cell(1024, 0.6, 0, 0.45),
        ];
        assert!((accuracy_drop(&cells, 0.0).unwrap() - 0.3).abs() < 1e-12);
        assert!((accuracy_drop(&cells, 0.6).unwrap() - 0.05).abs() < 1e-12);
        assert_eq!(accuracy_drop(&cells, 0.4), None);
    }

    #[test]
    fn csv_has_header_and_one_row_per_cell() {
        let cells = [NegativeCell {
            queue_size: 8,
            margin: 0.0,
            seed: 1,
            probe_top1: 0.5,
        }];
        assert_eq!(negatives_csv(&cells), "loss,margin,queue_size,seed,probe_top1\ninfo_nce,0,8,1,0.500000\n");
        let rows = [ArmResult {
            arm: Arm::Phase1Probe,
            seed: 2,
            top1: 0.25,
        }];
        assert_eq!(pipeline_csv(&rows), "arm,seed,top1\nphase1_probe,2,0.250000\n");
    }
}
