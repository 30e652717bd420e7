//! Supervised fine-tuning of a classifier, optionally regularized by
//! feature distillation from a frozen copy of the pre-trained backbone.

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, Phase};
use super::config::TrainConfig;
use super::metrics::{EpochRecord, MetricRecord, MetricsLog, MetricsSink, StepRecord};
use super::phase1::load_encoder;
use super::probe::classifier_top1;
use super::schedule::lr_at;
use super::{
    check_finite, epoch_batches, mix_seed, sample_seed, stack, stats_to_meta, stream, to_mat,
    to_matrix,
};
use crate::data::{supervised_augment, LabeledImages};
use crate::distiller::{
    distill_loss_with_grad, freeze_teacher, Connector, FeatureMap, FeatureMapSet, FrozenTeacher, StagePair,
};
use crate::error::{Error, Result};
use crate::losses::{combined_student_loss, cross_entropy_loss_with_grad, Phase2LossConfig};
use crate::nn::layers::NormMode;
use crate::nn::params::LayoutBuilder;
use crate::nn::{Backbone, BackboneConfig, ClassifierNet, Layout, ModelState, Sgd, Tensor};

const PHASE: &str = "phase2";

/// A block of parameters updated by the phase-2 optimizer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: String,
    /// Names of the tensors in the group.
    pub tensors: Vec<String>,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct Phase2Outcome {
    pub checkpoint: Checkpoint,
    /// Everything the optimizer touched. Teacher tensors never appear here.
    pub param_groups: Vec<ParamGroup>,
    /// Teacher parameter digest before and after training.
    pub teacher_digests: Option<(String, String)>,
    /// Validation accuracy after the last epoch, when a validation set was given.
    pub val_top1: Option<f64>,
    pub train_top1: f64,
}

/// Fine-tunes a student initialized from a phase-1 checkpoint with the loss
/// `ce + λ·distill`, where the teacher is a frozen copy of the same
/// pre-trained backbone.
pub fn finetune_phase2(
    cfg: &TrainConfig,
    phase1: &Checkpoint,
    train: &LabeledImages,
    val: Option<&LabeledImages>,
    sink: &mut dyn MetricsSink,
) -> Result<Phase2Outcome> {
    train_classifier(cfg, Some(phase1), true, train, val, sink)
}

/// Plain cross-entropy training, with no teacher. With `init = None` the
/// backbone starts from random weights.
pub fn finetune_plain(
    cfg: &TrainConfig,
    init: Option<&Checkpoint>,
    train: &LabeledImages,
    val: Option<&LabeledImages>,
    sink: &mut dyn MetricsSink,
) -> Result<Phase2Outcome> {
    train_classifier(cfg, init, false, train, val, sink)
}

fn backbone_only(config: &BackboneConfig) -> Result<(Backbone, Layout, ModelState)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut b = LayoutBuilder::new(&mut rng);
    let backbone = b.scoped("backbone", |b| Backbone::build(b, config))?;
    let (layout, state) = b.finish();
    Ok((backbone, layout, state))
}

fn stage_indices(cfg: &TrainConfig, backbone: &BackboneConfig) -> Result<Vec<usize>> {
    let names = backbone.stage_names();
    cfg.phase2
        .stages
        .iter()
        .map(|s| {
            names.iter().position(|n| n == s).ok_or_else(|| {
                Error::Config(format!("stage {s} is not a backbone stage (have {})", names.join(",")))
            })
        })
        .collect()
}

fn to_f64_map(t: &Tensor) -> FeatureMap<f64> {
    FeatureMap::new(
        t.channels,
        t.batch,
        t.height,
        t.width,
        t.data.iter().map(|&v| f64::from(v)).collect(),
    )
    .expect("tensor dimensions are consistent")
}

fn train_classifier(
    cfg: &TrainConfig,
    init: Option<&Checkpoint>,
    distill: bool,
    train: &LabeledImages,
    val: Option<&LabeledImages>,
    sink: &mut dyn MetricsSink,
) -> Result<Phase2Outcome> {
    cfg.validate()?;
    let p = &cfg.phase2;
    // The architecture is the checkpoint's when there is one.
    let model_cfg = match init {
        Some(ckpt) => TrainConfig::from_map(&ckpt.config)?.model,
        None => cfg.model.clone(),
    };
    let backbone_cfg = model_cfg.backbone();
    let (net, mut state) = ClassifierNet::build(&backbone_cfg, train.classes(), p.seed)?;

    let mut teacher: Option<FrozenTeacher> = None;
    if let Some(ckpt) = init {
        let (encoder, enc_state) = load_encoder(ckpt, p.teacher)?;
        state.copy_prefix_from(&net.layout, &enc_state, &encoder.layout, "backbone.")?;
        if distill {
            let (backbone, layout, mut t_state) = backbone_only(&backbone_cfg)?;
            t_state.copy_prefix_from(&layout, &enc_state, &encoder.layout, "backbone.")?;
            teacher = Some(freeze_teacher(backbone, t_state));
        }
    } else if distill {
        return Err(Error::Config("distillation needs a phase-1 checkpoint".into()));
    }
    let stages = stage_indices(cfg, &backbone_cfg)?;
    let mut conn_rng = ChaCha8Rng::seed_from_u64(mix_seed(p.seed, &[stream::CONNECTOR]));
    let mut connectors: Vec<Connector<f64>> = match &teacher {
        Some(_) => stages
            .iter()
            .map(|&s| {
                let c = backbone_cfg.widths[s];
                Connector::random(c, c, p.connector_norm, &mut conn_rng)
            })
            .collect(),
        None => Vec::new(),
    };
    let teacher_before = teacher.as_ref().map(FrozenTeacher::digest);

    let mut param_groups = vec![
        ParamGroup {
            name: "student.backbone".into(),
            tensors: net.layout.params.iter().filter(|s| s.name.starts_with("backbone.")).map(|s| s.name.clone()).collect(),
            len: 0,
        },
        ParamGroup {
            name: "student.fc".into(),
            tensors: net.layout.params.iter().filter(|s| s.name.starts_with("fc.")).map(|s| s.name.clone()).collect(),
            len: 0,
        },
    ];
    for g in &mut param_groups {
        g.len = g.tensors.iter().filter_map(|t| net.layout.param(t)).map(|s| s.len()).sum();
    }
    if !connectors.is_empty() {
        param_groups.push(ParamGroup {
            name: "connectors".into(),
            tensors: stages.iter().map(|s| format!("connector.stage{}", s + 1)).collect(),
            len: connectors.iter().map(|c| c.params().len()).sum(),
        });
    }

    let loss_cfg = Phase2LossConfig {
        distill_weight: p.distill_weight,
    };
    let schedule = p.lr_schedule();
    let policy = cfg.augment.supervised_policy(train.stats());
    let mut optimizer = Sgd::new(state.params.len(), p.sgd_momentum, p.weight_decay);
    let mut conn_opt: Vec<Sgd<f64>> = connectors
        .iter()
        .map(|c| Sgd::new(c.params().len(), f64::from(p.sgd_momentum), f64::from(p.weight_decay)))
        .collect();
    let mut grad = vec![0.0f32; state.params.len()];
    let mut log = MetricsLog::new(sink);
    let mut step = 0;
    let mut val_top1 = None;
    let eval_stats = train.stats();

    for epoch in 0..p.epochs {
        let lr = lr_at(&schedule, epoch);
        let mut loss_sum = 0.0;
        let batches = epoch_batches(train.len(), p.batch_size, p.seed, epoch)?;
        for (b, indices) in batches.iter().enumerate() {
            let views = indices
                .iter()
                .enumerate()
                .map(|(i, &idx)| {
                    supervised_augment(&train.images()[idx], &policy, sample_seed(p.seed, epoch, b * p.batch_size + i))
                })
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = indices.iter().map(|&i| train.labels()[i]).collect();
            let x = stack(&views, policy.crop_size);

            let (logits, out, trace) = net.forward(&state.params, &mut NormMode::Batch(&mut state.buffers), &x);
            let (ce, d_logits) = cross_entropy_loss_with_grad(&to_matrix(&logits), &labels)?;

            let mut d_stages: Vec<Option<Tensor>> = vec![None; out.stages.len()];
            let mut distill_value = None;
            if let Some(t) = &teacher {
                let t_stages = t.stage_features(&x);
                let pairs = stages
                    .iter()
                    .map(|&s| StagePair {
                        teacher: to_f64_map(&t_stages[s]),
                        student: to_f64_map(&out.stages[s]),
                    })
                    .collect();
                let d = distill_loss_with_grad(&FeatureMapSet::new(pairs)?, &connectors)?;
                distill_value = Some(d.loss);
                if p.distill_weight != 0.0 {
                    let w = p.distill_weight;
                    for (&s, g) in stages.iter().zip(&d.student_grads) {
                        let mut dt = Tensor::zeros_like(&out.stages[s]);
                        dt.data.iter_mut().zip(&g.data).for_each(|(o, &v)| *o = (w * v) as f32);
                        d_stages[s] = Some(dt);
                    }
                    for ((c, opt), g) in connectors.iter_mut().zip(&mut conn_opt).zip(&d.connector_grads) {
                        let scaled: Vec<f64> = g.iter().map(|v| w * v).collect();
                        opt.step(lr, c.params_mut(), &scaled);
                    }
                }
            }
            let total = match distill_value {
                Some(dv) => combined_student_loss(ce, dv, &loss_cfg)?,
                None => ce,
            };
            check_finite(
                PHASE,
                epoch,
                step,
                lr,
                &[("loss_total", total), ("loss_ce", ce), ("loss_distill", distill_value.unwrap_or(0.0))],
            )?;

            grad.iter_mut().for_each(|v| *v = 0.0);
            net.backward(&state.params, &out, &trace, &to_mat(&d_logits), &d_stages, &mut grad);
            optimizer.step(lr as f32, &mut state.params, &grad);

            loss_sum += total;
            log.record(MetricRecord::Step(StepRecord {
                phase: PHASE.into(),
                epoch,
                step,
                lr,
                loss_total: total,
                loss_ce: Some(ce),
                loss_distill: distill_value,
                loss_contrastive: None,
            }))?;
            step += 1;
        }
        let last = epoch + 1 == p.epochs;
        let top1 = match val {
            Some(v) if last || (epoch + 1) % p.eval_every == 0 => {
                Some(classifier_top1(&net, &state, v, &cfg.augment.eval_policy(eval_stats))?)
            }
            _ => None,
        };
        if top1.is_some() {
            val_top1 = top1;
        }
        let mean_loss = loss_sum / batches.len() as f64;
        info!(
            "phase2 epoch {}/{} lr {lr:.5} loss {mean_loss:.4}{}",
            epoch + 1,
            p.epochs,
            top1.map(|a| format!(" top1 {a:.3}")).unwrap_or_default()
        );
        log.record(MetricRecord::Epoch(EpochRecord {
            phase: PHASE.into(),
            epoch,
            mean_loss,
            top1,
        }))?;
    }

    let train_top1 = classifier_top1(&net, &state, train, &cfg.augment.eval_policy(eval_stats))?;
    let teacher_digests = match (teacher_before, &teacher) {
        (Some(before), Some(t)) => Some((before, t.digest())),
        _ => None,
    };

    let mut config = cfg.to_map();
    if init.is_some() {
        let mut model = crate::trainer::config::ConfigMap::new();
        crate::trainer::config::Section::write(&model_cfg, "model", &mut model);
        config.merge(&model);
    }
    let mut ckpt = Checkpoint::new(Phase::Phase2, p.epochs, config);
    ckpt.metrics_digest = log.digest();
    ckpt.push_state("model", &net.layout, &state);
    ckpt.push_f32("velocity/model", vec![state.params.len()], optimizer.velocity().to_vec());
    for (&s, c) in stages.iter().zip(&connectors) {
        ckpt.push_f64(format!("connector/stage{}", s + 1), vec![c.params().len()], c.params().to_vec());
    }
    ckpt.meta.insert("classes".into(), train.classes().to_string());
    ckpt.meta.insert(
        "init".into(),
        if init.is_some() { "phase1" } else { "scratch" }.into(),
    );
    if let Some((before, _)) = &teacher_digests {
        ckpt.meta.insert("teacher_digest".into(), before.clone());
    }
    ckpt.meta.extend(stats_to_meta(&eval_stats));
    Ok(Phase2Outcome {
        checkpoint: ckpt,
        param_groups,
        teacher_digests,
        val_top1,
        train_top1,
    })
}
