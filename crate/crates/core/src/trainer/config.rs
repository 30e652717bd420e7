//! Run configuration: typed sections serialized as flat `dotted.key = value`
//! text.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::schedule::{LrSchedule, ScheduleKind};
use crate::data::{AugmentationPolicy, ChannelStats};
use crate::error::{Error, Result};
use crate::nn::BackboneConfig;

/// Ordered map of dotted keys to string values.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `key = value` lines; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = Self::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            map.set_assignment(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(map)
    }

    /// Applies a single `key=value` assignment.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key = value, got {assignment:?}")))?;
        let key = key.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(Error::Config(format!("invalid key {key:?}")));
        }
        self.set(key, value.trim());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries of `other` replace entries of `self`.
    pub fn merge(&mut self, other: &ConfigMap) {
        for (k, v) in other.iter() {
            self.set(k, v);
        }
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

impl fmt::Display for ConfigMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Reads typed fields under a key prefix.
struct Reader<'a> {
    map: &'a ConfigMap,
    prefix: &'a str,
}

impl Reader<'_> {
    fn field<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: fmt::Display,
    {
        let full = format!("{}.{key}", self.prefix);
        if let Some(raw) = self.map.get(&full) {
            *slot = raw
                .parse()
                .map_err(|e| Error::Config(format!("{full} = {raw:?}: {e}")))?;
        }
        Ok(())
    }

    fn list<T: FromStr>(&self, key: &str, slot: &mut Vec<T>) -> Result<()>
    where
        T::Err: fmt::Display,
    {
        let full = format!("{}.{key}", self.prefix);
        if let Some(raw) = self.map.get(&full) {
            *slot = parse_list(raw).map_err(|e| Error::Config(format!("{full} = {raw:?}: {e}")))?;
        }
        Ok(())
    }
}

pub(crate) fn parse_list<T: FromStr>(raw: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    if raw.trim().is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|e| e.to_string()))
        .collect()
}

pub(crate) fn join_list<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

struct Writer<'a> {
    map: &'a mut ConfigMap,
    prefix: &'a str,
}

impl Writer<'_> {
    fn field(&mut self, key: &str, value: impl fmt::Display) {
        self.map.set(&format!("{}.{key}", self.prefix), value);
    }
}

/// A configuration section that round-trips through [`ConfigMap`].
pub trait Section: Sized {
    fn write(&self, prefix: &str, out: &mut ConfigMap);
    /// Overwrites the fields present in `map`; absent keys keep their value.
    fn read(&mut self, prefix: &str, map: &ConfigMap) -> Result<()>;
    fn validate(&self) -> Result<()>;
}

/// How the negative queue is filled before the first loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueueInit {
    /// Unit-normalized Gaussian vectors.
    Random,
    /// Keys of the untrained key encoder over the training images.
    Strict,
}

impl fmt::Display for QueueInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueueInit::Random => "random",
            QueueInit::Strict => "strict",
        })
    }
}

impl FromStr for QueueInit {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "random" => Ok(QueueInit::Random),
            "strict" => Ok(QueueInit::Strict),
            _ => Err(format!("unknown queue init {s:?} (random|strict)")),
        }
    }
}

/// Which phase-1 encoder initializes the phase-2 teacher and student.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherSource {
    Query,
    Key,
}

impl fmt::Display for TeacherSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TeacherSource::Query => "query",
            TeacherSource::Key => "key",
        })
    }
}

impl FromStr for TeacherSource {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "query" => Ok(TeacherSource::Query),
            "key" => Ok(TeacherSource::Key),
            _ => Err(format!("unknown encoder {s:?} (query|key)")),
        }
    }
}

/// Backbone shape and embedding size.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    pub stem_stride: usize,
    /// Output dimension of the phase-1 projection head.
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let b = BackboneConfig::resnet18_like(64);
        Self {
            widths: b.widths,
            blocks: b.blocks,
            stem_stride: b.stem_stride,
            embed_dim: 128,
        }
    }
}

impl ModelConfig {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            widths: self.widths.clone(),
            blocks: self.blocks.clone(),
            stem_stride: self.stem_stride,
            in_channels: 3,
        }
    }
}

impl Section for ModelConfig {
    fn write(&self, prefix: &str, out: &mut ConfigMap) {
        let mut w = Writer { map: out, prefix };
        w.field("widths", join_list(&self.widths));
        w.field("blocks", join_list(&self.blocks));
        w.field("stem_stride", self.stem_stride);
        w.field("embed_dim", self.embed_dim);
    }

    fn read(&mut self, prefix: &str, map: &ConfigMap) -> Result<()> {
        let r = Reader { map, prefix };
        r.list("widths", &mut self.widths)?;
        r.list("blocks", &mut self.blocks)?;
        r.field("stem_stride", &mut self.stem_stride)?;
        r.field("embed_dim", &mut self.embed_dim)
    }

    fn validate(&self) -> Result<()> {
        self.backbone().validate()?;
        if self.embed_dim < 2 {
            return Err(Error::Config("model.embed_dim must be at least 2".into()));
        }
        Ok(())
    }
}

/// Augmentation parameters shared by the contrastive, supervised and eval
/// pipelines.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub crop_size: usize,
    pub contrastive_scale_min: f32,
    pub supervised_scale_min: f32,
    pub jitter_prob: f32,
    pub grayscale_prob: f32,
    pub blur_prob: f32,
    pub blur_sigma_max: f32,
    pub flip_prob: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        let p = AugmentationPolicy::two_view(224, ChannelStats::default());
        Self {
            crop_size: p.crop_size,
            contrastive_scale_min: p.scale.0,
            supervised_scale_min: AugmentationPolicy::supervised(224, ChannelStats::default()).scale.0,
            jitter_prob: p.jitter_prob,
            grayscale_prob: p.grayscale_prob,
            blur_prob: p.blur_prob,
            blur_sigma_max: p.blur_sigma.1,
            flip_prob: p.flip_prob,
        }
    }
}

impl AugmentConfig {
    pub fn two_view_policy(&self, stats: ChannelStats) -> AugmentationPolicy {
        let mut p = AugmentationPolicy::two_view(self.crop_size, stats);
        p.scale.0 = self.contrastive_scale_min;
        p.jitter_prob = self.jitter_prob;
        p.grayscale_prob = self.grayscale_prob;
        p.blur_prob = self.blur_prob;
        p.blur_sigma.1 = self.blur_sigma_max;
        p.flip_prob = self.flip_prob;
        p
    }

    pub fn supervised_policy(&self, stats: ChannelStats) -> AugmentationPolicy {
        let mut p = AugmentationPolicy::supervised(self.crop_size, stats);
        p.scale.0 = self.supervised_scale_min;
        p.flip_prob = self.flip_prob;
        p
    }

    pub fn eval_policy(&self, stats: ChannelStats) -> AugmentationPolicy {
        AugmentationPolicy::eval(self.crop_size, stats)
    }
}

impl Section for AugmentConfig {
    fn write(&self, prefix: &str, out: &mut ConfigMap) {
        let mut w = Writer { map: out, prefix };
        w.field("crop_size", self.crop_size);
        w.field("contrastive_scale_min", self.contrastive_scale_min);
        w.field("supervised_scale_min", self.supervised_scale_min);
        w.field("jitter_prob", self.jitter_prob);
        w.field("grayscale_prob", self.grayscale_prob);
        w.field("blur_prob", self.blur_prob);
        w.field("blur_sigma_max", self.blur_sigma_max);
        w.field("flip_prob", self.flip_prob);
    }

    fn read(&mut self, prefix: &str, map: &ConfigMap) -> Result<()> {
        let r = Reader { map, prefix };
        r.field("crop_size", &mut self.crop_size)?;
        r.field("contrastive_scale_min", &mut self.contrastive_scale_min)?;
        r.field("supervised_scale_min", &mut self.supervised_scale_min)?;
        r.field("jitter_prob", &mut self.jitter_prob)?;
        r.field("grayscale_prob", &mut self.grayscale_prob)?;
        r.field("blur_prob", &mut self.blur_prob)?;
        r.field("blur_sigma_max", &mut self.blur_sigma_max)?;
        r.field("flip_prob", &mut self.flip_prob)
    }

    fn validate(&self) -> Result<()> {
        let stats = ChannelStats::default();
        self.two_view_policy(stats).validate()?;
        self.supervised_policy(stats).validate()
    }
}

/// Self-supervised pre-training with a momentum encoder and negative queue.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase1Config {
    pub epochs: usize,
    pub lr: f64,
    pub schedule: ScheduleKind,
    pub lr_gamma: f64,
    /// Key-encoder momentum η.
    pub momentum: f32,
    pub queue_size: usize,
    pub queue_init: QueueInit,
    pub temperature: f64,
    pub margin: f64,
    pub batch_size: usize,
    pub sgd_momentum: f32,
    pub weight_decay: f32,
    pub seed: u64,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Self {
            epochs: 800,
            lr: 0.03,
            schedule: ScheduleKind::Milestones(vec![120, 160]),
            lr_gamma: 0.1,
            momentum: 0.999,
            queue_size: 4096,
            queue_init: QueueInit::Random,
            temperature: 0.2,
            margin: 0.6,
            batch_size: 256,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl Phase1Config {
    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule::new(self.lr, self.schedule.clone(), self.lr_gamma, self.epochs)
    }
}

impl Section for Phase1Config {
    fn write(&self, prefix: &str, out: &mut ConfigMap) {
        let mut w = Writer { map: out, prefix };
        w.field("epochs", self.epochs);
        w.field("lr", self.lr);
        w.field("schedule", &self.schedule);
        w.field("lr_gamma", self.lr_gamma);
        w.field("momentum", self.momentum);
        w.field("queue_size", self.queue_size);
        w.field("queue_init", self.queue_init);
        w.field("temperature", self.temperature);
        w.field("margin", self.margin);
        w.field("batch_size", self.batch_size);
        w.field("sgd_momentum", self.sgd_momentum);
        w.field("weight_decay", self.weight_decay);
        w.field("seed", self.seed);
    }

    fn read(&mut self, prefix: &str, map: &ConfigMap) -> Result<()> {
        let r = Reader { map, prefix };
        r.field("epochs", &mut self.epochs)?;
        r.field("lr", &mut self.lr)?;
        r.field("schedule", &mut self.schedule)?;
        r.field("lr_gamma", &mut self.lr_gamma)?;
        r.field("momentum", &mut self.momentum)?;
        r.field("queue_size", &mut self.queue_size)?;
        r.field("queue_init", &mut self.queue_init)?;
        r.field("temperature", &mut self.temperature)?;
        r.field("margin", &mut self.margin)?;
        r.field("batch_size", &mut self.batch_size)?;
        r.field("sgd_momentum", &mut self.sgd_momentum)?;
        r.field("weight_decay", &mut self.weight_decay)?;
        r.field("seed", &mut self.seed)
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.queue_size == 0 {
            return Err(Error::Config("phase1 epochs, batch_size and queue_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_gamma > 0.0) {
            return Err(Error::Config("phase1 lr and lr_gamma must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("phase1.momentum {} outside [0, 1]", self.momentum)));
        }
        if self.batch_size > self.queue_size {
            return Err(Error::Config(format!(
                "phase1.batch_size {} exceeds queue_size {}",
                self.batch_size, self.queue_size
            )));
        }
        crate::losses::ContrastiveLossConfig {
            temperature: self.temperature,
            margin: self.margin,
        }
        .validate()
        .map_err(as_config_error)?;
        self.lr_schedule().validate()
    }
}

/// Supervised fine-tuning with optional self-distillation from a frozen
/// teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase2Config {
    pub epochs: usize,
    pub lr: f64,
    pub schedule: ScheduleKind,
    pub lr_gamma: f64,
    /// Weight λ of the distillation term.
    pub distill_weight: f64,
    /// Backbone stages whose outputs are distilled.
    pub stages: Vec<String>,
    /// Per-channel normalization after each connector projection.
    pub connector_norm: bool,
    pub teacher: TeacherSource,
    pub batch_size: usize,
    pub sgd_momentum: f32,
    pub weight_decay: f32,
    /// Validation accuracy is measured every this many epochs and after the last.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for Phase2Config {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.1,
            schedule: ScheduleKind::Every(30),
            lr_gamma: 0.1,
            distill_weight: 1e-4,
            stages: BackboneConfig::resnet18_like(64).stage_names(),
            connector_norm: true,
            teacher: TeacherSource::Query,
            batch_size: 256,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            eval_every: 1,
            seed: 0,
        }
    }
}

impl Phase2Config {
    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule::new(self.lr, self.schedule.clone(), self.lr_gamma, self.epochs)
    }
}

impl Section for Phase2Config {
    fn write(&self, prefix: &str, out: &mut ConfigMap) {
        let mut w = Writer { map: out, prefix };
        w.field("epochs", self.epochs);
        w.field("lr", self.lr);
        w.field("schedule", &self.schedule);
        w.field("lr_gamma", self.lr_gamma);
        w.field("distill_weight", self.distill_weight);
        w.field("stages", join_list(&self.stages));
        w.field("connector_norm", self.connector_norm);
        w.field("teacher", self.teacher);
        w.field("batch_size", self.batch_size);
        w.field("sgd_momentum", self.sgd_momentum);
        w.field("weight_decay", self.weight_decay);
        w.field("eval_every", self.eval_every);
        w.field("seed", self.seed);
    }

    fn read(&mut self, prefix: &str, map: &ConfigMap) -> Result<()> {
        let r = Reader { map, prefix };
        r.field("epochs", &mut self.epochs)?;
        r.field("lr", &mut self.lr)?;
        r.field("schedule", &mut self.schedule)?;
        r.field("lr_gamma", &mut self.lr_gamma)?;
        r.field("distill_weight", &mut self.distill_weight)?;
        r.list("stages", &mut self.stages)?;
        r.field("connector_norm", &mut self.connector_norm)?;
        r.field("teacher", &mut self.teacher)?;
        r.field("batch_size", &mut self.batch_size)?;
        r.field("sgd_momentum", &mut self.sgd_momentum)?;
        r.field("weight_decay", &mut self.weight_decay)?;
        r.field("eval_every", &mut self.eval_every)?;
        r.field("seed", &mut self.seed)
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("phase2 epochs, batch_size and eval_every must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_gamma > 0.0) {
            return Err(Error::Config("phase2 lr and lr_gamma must be positive".into()));
        }
        crate::losses::Phase2LossConfig {
            distill_weight: self.distill_weight,
        }
        .validate()
        .map_err(as_config_error)?;
        self.lr_schedule().validate()
    }
}

/// Linear classifier trained on frozen, standardized backbone features.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub sgd_momentum: f32,
    pub weight_decay: f32,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.1,
            batch_size: 64,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl Section for ProbeConfig {
    fn write(&self, prefix: &str, out: &mut ConfigMap) {
        let mut w = Writer { map: out, prefix };
        w.field("epochs", self.epochs);
        w.field("lr", self.lr);
        w.field("batch_size", self.batch_size);
        w.field("sgd_momentum", self.sgd_momentum);
        w.field("weight_decay", self.weight_decay);
        w.field("seed", self.seed);
    }

    fn read(&mut self, prefix: &str, map: &ConfigMap) -> Result<()> {
        let r = Reader { map, prefix };
        r.field("epochs", &mut self.epochs)?;
        r.field("lr", &mut self.lr)?;
        r.field("batch_size", &mut self.batch_size)?;
        r.field("sgd_momentum", &mut self.sgd_momentum)?;
        r.field("weight_decay", &mut self.weight_decay)?;
        r.field("seed", &mut self.seed)
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("probe epochs, batch_size and lr must be positive".into()));
        }
        Ok(())
    }
}

/// Every section needed by the training operations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub phase1: Phase1Config,
    pub phase2: Phase2Config,
    pub probe: ProbeConfig,
}

impl TrainConfig {
    pub fn to_map(&self) -> ConfigMap {
        let mut map = ConfigMap::new();
        self.model.write("model", &mut map);
        self.augment.write("augment", &mut map);
        self.phase1.write("phase1", &mut map);
        self.phase2.write("phase2", &mut map);
        self.probe.write("probe", &mut map);
        map
    }

    /// Applies `map` on top of `self`. Keys outside the known sections are
    /// rejected.
    pub fn apply(&mut self, map: &ConfigMap) -> Result<()> {
        let known = Self::default().to_map();
        if let Some(unknown) = map.keys().find(|k| known.get(k).is_none()) {
            return Err(Error::Config(format!("unknown configuration key {unknown}")));
        }
        self.model.read("model", map)?;
        self.augment.read("augment", map)?;
        self.phase1.read("phase1", map)?;
        self.phase2.read("phase2", map)?;
        self.probe.read("probe", map)
    }

    /// Defaults overridden by `map`, validated.
    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(map)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment.validate()?;
        self.phase1.validate()?;
        self.phase2.validate()?;
        self.probe.validate()?;
        let names = self.model.backbone().stage_names();
        if let Some(bad) = self.phase2.stages.iter().find(|s| !names.contains(s)) {
            return Err(Error::Config(format!(
                "phase2.stages entry {bad} is not a backbone stage (have {})",
                names.join(",")
            )));
        }
        Ok(())
    }

    /// Scaled-down settings that train on one CPU core in minutes: 32-px
    /// crops, a four-stage backbone with one block per stage and short
    /// schedules.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.model.widths = vec![16, 32, 64, 128];
        cfg.model.blocks = vec![1, 1, 1, 1];
        cfg.model.stem_stride = 2;
        cfg.augment.crop_size = 32;
        cfg.phase1.epochs = 100;
        cfg.phase1.batch_size = 32;
        // Smaller than the 500-image toy set, so an image rarely meets
        // itself among the negatives. Short runs need a faster key encoder.
        cfg.phase1.queue_size = 256;
        cfg.phase1.momentum = 0.99;
        cfg.phase1.schedule = ScheduleKind::Cosine;
        cfg.phase2.epochs = 30;
        cfg.phase2.batch_size = 32;
        cfg.phase2.schedule = ScheduleKind::Every(10);
        cfg.phase2.eval_every = 30;
        cfg.probe.epochs = 100;
        cfg
    }
}

fn as_config_error(e: Error) -> Error {
    match e {
        Error::Validation(msg) => Error::Config(msg),
        other => other,
    }
}
