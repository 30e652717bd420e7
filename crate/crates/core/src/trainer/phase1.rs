//! Contrastive pre-training with a momentum key encoder and a negative
//! queue.

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, Phase};
use super::config::{QueueInit, TeacherSource, TrainConfig};
use super::metrics::{EpochRecord, MetricRecord, MetricsLog, MetricsSink, StepRecord};
use super::schedule::lr_at;
use super::{check_finite, epoch_batches, mix_seed, sample_seed, stack, stats_to_meta, stream, to_mat, to_matrix};
use crate::data::{two_view_augment, AugmentationPolicy, UnlabeledImages};
use crate::encoder_state::{MomentumEncoderPair, NegativeQueue};
use crate::error::{Error, Result};
use crate::losses::{margin_info_nce_loss_with_grad, ContrastiveBatch, ContrastiveLossConfig};
use crate::matrix::Matrix;
use crate::nn::{Encoder, ModelState, NormMode, Sgd};

const PHASE: &str = "phase1";

struct Phase1State {
    encoder: Encoder,
    pair: MomentumEncoderPair,
    query_buffers: Vec<f32>,
    key_buffers: Vec<f32>,
    queue: NegativeQueue,
    optimizer: Sgd<f32>,
    epoch: usize,
}

/// Runs `cfg.phase1.epochs` epochs of pre-training from a fresh
/// initialization. Only images are consumed; labels never reach this phase.
pub fn pretrain_phase1(cfg: &TrainConfig, data: &UnlabeledImages, sink: &mut dyn MetricsSink) -> Result<Checkpoint> {
    pretrain_phase1_until(cfg, data, cfg.phase1.epochs, sink)
}

/// Like [`pretrain_phase1`] but stops after `stop` epochs, keeping the
/// learning-rate schedule of the full run. The checkpoint can be continued
/// with [`resume_phase1`].
pub fn pretrain_phase1_until(
    cfg: &TrainConfig,
    data: &UnlabeledImages,
    stop: usize,
    sink: &mut dyn MetricsSink,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut state = fresh_state(cfg)?;
    let policy = cfg.augment.two_view_policy(data.stats());
    match cfg.phase1.queue_init {
        QueueInit::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.phase1.seed, &[stream::QUEUE]));
            state.queue.warm_start_random(&mut rng);
        }
        QueueInit::Strict => strict_warm_start(cfg, &mut state, data, &policy)?,
    }
    run(cfg, state, data, &policy, stop.min(cfg.phase1.epochs), sink)
}

/// Continues a phase-1 checkpoint until `cfg.phase1.epochs` epochs are
/// complete. The result is identical to an uninterrupted run.
pub fn resume_phase1(
    cfg: &TrainConfig,
    ckpt: &Checkpoint,
    data: &UnlabeledImages,
    sink: &mut dyn MetricsSink,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if ckpt.phase != Phase::Phase1 {
        return Err(Error::Checkpoint("resume needs a phase1 checkpoint".into()));
    }
    let saved = TrainConfig::from_map(&ckpt.config)?;
    if saved.model != cfg.model {
        return Err(Error::Config("model configuration differs from the checkpoint".into()));
    }
    let (encoder, query) = load_encoder(ckpt, TeacherSource::Query)?;
    let key = ckpt.load_state("key", &encoder.layout)?;
    let velocity = ckpt.f32("velocity/query")?.to_vec();
    if velocity.len() != query.params.len() {
        return Err(Error::Checkpoint("optimizer state size mismatch".into()));
    }
    let capacity: usize = ckpt.meta_value("queue_capacity")?;
    if capacity != cfg.phase1.queue_size {
        return Err(Error::Config(format!(
            "queue size {} differs from the checkpoint's {capacity}",
            cfg.phase1.queue_size
        )));
    }
    let queue = NegativeQueue::from_state(
        capacity,
        cfg.model.embed_dim,
        ckpt.f64("queue/storage")?.to_vec(),
        ckpt.meta_value("queue_cursor")?,
        ckpt.meta_value("queue_len")?,
    )?;
    let mut optimizer = Sgd::new(query.params.len(), cfg.phase1.sgd_momentum, cfg.phase1.weight_decay);
    optimizer.set_velocity(velocity);
    let state = Phase1State {
        encoder,
        pair: MomentumEncoderPair::from_parts(query.params, key.params, cfg.phase1.momentum)?,
        query_buffers: query.buffers,
        key_buffers: key.buffers,
        queue,
        optimizer,
        epoch: ckpt.epoch,
    };
    let policy = cfg.augment.two_view_policy(data.stats());
    run(cfg, state, data, &policy, cfg.phase1.epochs, sink)
}

/// Checkpoint of the untrained encoder pair, used as the random-init
/// baseline.
pub fn initial_phase1_checkpoint(cfg: &TrainConfig, data: &UnlabeledImages) -> Result<Checkpoint> {
    cfg.validate()?;
    let state = fresh_state(cfg)?;
    Ok(to_checkpoint(cfg, &state, data, String::new()))
}

/// Rebuilds the query or key encoder stored in a phase-1 checkpoint.
pub fn load_encoder(ckpt: &Checkpoint, which: TeacherSource) -> Result<(Encoder, ModelState)> {
    if ckpt.phase != Phase::Phase1 {
        return Err(Error::Checkpoint(format!("expected a phase1 checkpoint, got {}", ckpt.phase)));
    }
    let cfg = TrainConfig::from_map(&ckpt.config)?;
    let (encoder, _) = Encoder::build(&cfg.model.backbone(), cfg.model.embed_dim, 0)?;
    let group = match which {
        TeacherSource::Query => "query",
        TeacherSource::Key => "key",
    };
    let state = ckpt.load_state(group, &encoder.layout)?;
    Ok((encoder, state))
}

fn fresh_state(cfg: &TrainConfig) -> Result<Phase1State> {
    let p = &cfg.phase1;
    let (encoder, init) = Encoder::build(&cfg.model.backbone(), cfg.model.embed_dim, p.seed)?;
    Ok(Phase1State {
        pair: MomentumEncoderPair::new(init.params.clone(), p.momentum)?,
        query_buffers: init.buffers.clone(),
        key_buffers: init.buffers,
        queue: NegativeQueue::new(p.queue_size, cfg.model.embed_dim)?,
        optimizer: Sgd::new(init.params.len(), p.sgd_momentum, p.weight_decay),
        encoder,
        epoch: 0,
    })
}

/// Fills the queue with keys of the untrained key encoder. Batch statistics
/// are used, but the key encoder's running statistics are left untouched.
fn strict_warm_start(
    cfg: &TrainConfig,
    state: &mut Phase1State,
    data: &UnlabeledImages,
    policy: &AugmentationPolicy,
) -> Result<()> {
    let batch = cfg.phase1.batch_size.min(data.len());
    let needed = cfg.phase1.queue_size.div_ceil(batch);
    let warm_seed = mix_seed(cfg.phase1.seed, &[stream::WARM_START]);
    let mut scratch = state.key_buffers.clone();
    let mut keys = Vec::with_capacity(needed);
    for round in 0..needed {
        let views = (0..batch)
            .map(|i| {
                let idx = (round * batch + i) % data.len();
                let seed = mix_seed(warm_seed, &[idx as u64, round as u64]);
                two_view_augment(&data.images()[idx], policy, seed).map(|(_, k)| k)
            })
            .collect::<Result<Vec<_>>>()?;
        let x = stack(&views, policy.crop_size);
        let (k, _) = state.encoder.embed(state.pair.key(), &mut NormMode::Batch(&mut scratch), &x);
        keys.push(to_matrix(&k));
    }
    state.queue.warm_start(keys)
}

fn run(
    cfg: &TrainConfig,
    mut state: Phase1State,
    data: &UnlabeledImages,
    policy: &AugmentationPolicy,
    stop: usize,
    sink: &mut dyn MetricsSink,
) -> Result<Checkpoint> {
    let p = &cfg.phase1;
    let schedule = p.lr_schedule();
    let loss_cfg = ContrastiveLossConfig {
        temperature: p.temperature,
        margin: p.margin,
    };
    let mut log = MetricsLog::new(sink);
    let mut grad = vec![0.0f32; state.pair.query().len()];
    let mut step = state.epoch * (data.len() / p.batch_size.max(1));
    while state.epoch < stop {
        let epoch = state.epoch;
        let lr = lr_at(&schedule, epoch);
        let mut loss_sum = 0.0;
        let batches = epoch_batches(data.len(), p.batch_size, p.seed, epoch)?;
        for (b, indices) in batches.iter().enumerate() {
            let mut views_q = Vec::with_capacity(indices.len());
            let mut views_k = Vec::with_capacity(indices.len());
            for (i, &idx) in indices.iter().enumerate() {
                let seed = sample_seed(p.seed, epoch, b * p.batch_size + i);
                let (a, k) = two_view_augment(&data.images()[idx], policy, seed)?;
                views_q.push(a);
                views_k.push(k);
            }
            let xq = stack(&views_q, policy.crop_size);
            let xk = stack(&views_k, policy.crop_size);

            let (q, trace) = state
                .encoder
                .embed(state.pair.query(), &mut NormMode::Batch(&mut state.query_buffers), &xq);
            let (k, _) = state
                .encoder
                .embed(state.pair.key(), &mut NormMode::Batch(&mut state.key_buffers), &xk);
            let keys = to_matrix(&k);
            let batch = ContrastiveBatch::new(to_matrix(&q), keys.clone(), state.queue.snapshot()?)?;
            let (loss, g) = margin_info_nce_loss_with_grad(&batch, &loss_cfg)?;
            check_finite(PHASE, epoch, step, lr, &[("loss_contrastive", loss)])?;

            grad.iter_mut().for_each(|v| *v = 0.0);
            state
                .encoder
                .backward(state.pair.query(), &trace, &to_mat(&g.queries), &mut grad);
            state.optimizer.step(lr as f32, state.pair.query_mut(), &grad);
            state.pair.momentum_update();
            state.queue.enqueue(&keys)?;

            loss_sum += loss;
            log.record(MetricRecord::Step(StepRecord {
                phase: PHASE.into(),
                epoch,
                step,
                lr,
                loss_total: loss,
                loss_ce: None,
                loss_distill: None,
                loss_contrastive: Some(loss),
            }))?;
            step += 1;
        }
        let mean_loss = loss_sum / batches.len() as f64;
        info!("phase1 epoch {}/{} lr {lr:.5} loss {mean_loss:.4}", epoch + 1, p.epochs);
        log.record(MetricRecord::Epoch(EpochRecord {
            phase: PHASE.into(),
            epoch,
            mean_loss,
            top1: None,
        }))?;
        state.epoch += 1;
    }
    Ok(to_checkpoint(cfg, &state, data, log.digest()))
}

fn to_checkpoint(cfg: &TrainConfig, state: &Phase1State, data: &UnlabeledImages, metrics_digest: String) -> Checkpoint {
    let mut ckpt = Checkpoint::new(Phase::Phase1, state.epoch, cfg.to_map());
    ckpt.metrics_digest = metrics_digest;
    let layout = &state.encoder.layout;
    let query = ModelState {
        params: state.pair.query().to_vec(),
        buffers: state.query_buffers.clone(),
    };
    let key = ModelState {
        params: state.pair.key().to_vec(),
        buffers: state.key_buffers.clone(),
    };
    ckpt.push_state("query", layout, &query);
    ckpt.push_state("key", layout, &key);
    ckpt.push_f32("velocity/query", vec![query.params.len()], state.optimizer.velocity().to_vec());
    let q = &state.queue;
    ckpt.push_f64("queue/storage", vec![q.capacity(), q.dim()], q.storage().to_vec());
    ckpt.meta.insert("queue_capacity".into(), q.capacity().to_string());
    ckpt.meta.insert("queue_cursor".into(), q.cursor().to_string());
    ckpt.meta.insert("queue_len".into(), q.len().to_string());
    ckpt.meta.extend(stats_to_meta(&data.stats()));
    ckpt
}

/// Query-encoder embeddings of `x` in inference mode.
pub fn embed_eval(encoder: &Encoder, state: &ModelState, x: &crate::nn::Tensor) -> Matrix {
    let (e, _) = encoder.embed(&state.params, &mut NormMode::Running(&state.buffers), x);
    to_matrix(&e)
}
