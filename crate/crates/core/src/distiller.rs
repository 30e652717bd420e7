//! Feature-map distillation from a frozen teacher into a trainable student.
//!
//! For every tapped stage the student map passes through a connector (a
//! 1×1 channel projection, optionally followed by per-channel batch
//! normalization) and is compared against the teacher map by mean squared
//! error. Stage losses are summed. Teacher maps are constants: no gradient
//! is ever produced for them.

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::layers::NormMode;
use crate::nn::{Backbone, ModelState, Tensor};

/// Feature map stored channel-major, `data[((c * batch + n) * height + y) * width + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Float> FeatureMap<T> {
    pub fn new(channels: usize, batch: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * batch * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{batch}x{height}x{width} feature map",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            batch,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            batch,
            height,
            width,
            data: vec![T::zero(); channels * batch * height * width],
        }
    }

    /// Positions per channel.
    pub fn positions(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.positions();
        &self.data[c * p..(c + 1) * p]
    }

    fn same_positions(&self, other: &Self) -> bool {
        self.batch == other.batch && self.height == other.height && self.width == other.width
    }
}

impl From<Tensor> for FeatureMap<f32> {
    fn from(t: Tensor) -> Self {
        Self {
            channels: t.channels,
            batch: t.batch,
            height: t.height,
            width: t.width,
            data: t.data,
        }
    }
}

impl From<FeatureMap<f32>> for Tensor {
    fn from(f: FeatureMap<f32>) -> Self {
        Tensor {
            channels: f.channels,
            batch: f.batch,
            height: f.height,
            width: f.width,
            data: f.data,
        }
    }
}

/// Teacher and student maps of one tapped stage.
#[derive(Debug, Clone)]
pub struct StagePair<T> {
    /// Treated as a constant.
    pub teacher: FeatureMap<T>,
    pub student: FeatureMap<T>,
}

/// Stage pairs ordered by network depth.
#[derive(Debug, Clone)]
pub struct FeatureMapSet<T> {
    stages: Vec<StagePair<T>>,
}

impl<T: Float> FeatureMapSet<T> {
    pub fn new(stages: Vec<StagePair<T>>) -> Result<Self> {
        for (i, s) in stages.iter().enumerate() {
            if !s.teacher.same_positions(&s.student) {
                return Err(Error::Shape(format!(
                    "stage {i}: teacher map is {}x{}x{}, student map is {}x{}x{}",
                    s.teacher.batch, s.teacher.height, s.teacher.width, s.student.batch, s.student.height, s.student.width
                )));
            }
        }
        Ok(Self { stages })
    }

    pub fn stages(&self) -> &[StagePair<T>] {
        &self.stages
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }
}

/// Student-to-teacher channel projection for one stage.
///
/// Parameters live in one flat vector: the `[teacher × student]` weight,
/// then, when normalization is enabled, per-output-channel scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct Connector<T> {
    student_channels: usize,
    teacher_channels: usize,
    normalize: bool,
    params: Vec<T>,
}

impl<T: Float> Connector<T> {
    const EPS: f64 = 1e-5;

    /// Zero-mean weights with standard deviation 0.01 and a fresh
    /// normalization (unit scale, zero shift) when `normalize` is set.
    pub fn random<R: Rng + ?Sized>(student_channels: usize, teacher_channels: usize, normalize: bool, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, 0.01).expect("valid std");
        let mut params: Vec<T> = (0..student_channels * teacher_channels)
            .map(|_| T::from(dist.sample(rng)).expect("representable"))
            .collect();
        if normalize {
            params.extend(std::iter::repeat_n(T::one(), teacher_channels));
            params.extend(std::iter::repeat_n(T::zero(), teacher_channels));
        }
        Self {
            student_channels,
            teacher_channels,
            normalize,
            params,
        }
    }

    pub fn from_weight(student_channels: usize, teacher_channels: usize, weight: Vec<T>) -> Result<Self> {
        if weight.len() != student_channels * teacher_channels {
            return Err(Error::Shape(format!(
                "connector weight has {} entries, expected {teacher_channels}x{student_channels}",
                weight.len()
            )));
        }
        Ok(Self {
            student_channels,
            teacher_channels,
            normalize: false,
            params: weight,
        })
    }

    pub fn identity(channels: usize) -> Self {
        let mut w = vec![T::zero(); channels * channels];
        for c in 0..channels {
            w[c * channels + c] = T::one();
        }
        Self::from_weight(channels, channels, w).expect("square identity")
    }

    /// Adds per-channel normalization with the given scale and shift.
    pub fn with_normalization(mut self, gamma: Vec<T>, beta: Vec<T>) -> Result<Self> {
        if gamma.len() != self.teacher_channels || beta.len() != self.teacher_channels {
            return Err(Error::Shape("normalization parameters must match teacher channels".into()));
        }
        self.params.truncate(self.student_channels * self.teacher_channels);
        self.params.extend(gamma);
        self.params.extend(beta);
        self.normalize = true;
        Ok(self)
    }

    pub fn student_channels(&self) -> usize {
        self.student_channels
    }

    pub fn teacher_channels(&self) -> usize {
        self.teacher_channels
    }

    pub fn normalizes(&self) -> bool {
        self.normalize
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    fn weight(&self) -> &[T] {
        &self.params[..self.student_channels * self.teacher_channels]
    }

    fn gamma(&self) -> &[T] {
        let w = self.student_channels * self.teacher_channels;
        &self.params[w..w + self.teacher_channels]
    }

    fn beta(&self) -> &[T] {
        let w = self.student_channels * self.teacher_channels;
        &self.params[w + self.teacher_channels..]
    }
}

/// Intermediate values of a connector forward pass.
#[derive(Debug, Clone)]
pub struct ConnectorCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

/// Applies the connector: a channel projection at every position, then the
/// optional batch-statistics normalization.
pub fn connector_transform<T: Float>(student: &FeatureMap<T>, connector: &Connector<T>) -> Result<FeatureMap<T>> {
    connector_forward(student, connector).map(|(out, _)| out)
}

pub fn connector_forward<T: Float>(
    student: &FeatureMap<T>,
    connector: &Connector<T>,
) -> Result<(FeatureMap<T>, ConnectorCache<T>)> {
    if student.channels != connector.student_channels {
        return Err(Error::Shape(format!(
            "connector expects {} student channels, map has {}",
            connector.student_channels, student.channels
        )));
    }
    let p = student.positions();
    let (cs, ct) = (connector.student_channels, connector.teacher_channels);
    let mut out = FeatureMap::zeros(ct, student.batch, student.height, student.width);
    let w = connector.weight();
    for t in 0..ct {
        let dst = &mut out.data[t * p..(t + 1) * p];
        for s in 0..cs {
            let ws = w[t * cs + s];
            if ws == T::zero() {
                continue;
            }
            for (o, &v) in dst.iter_mut().zip(student.channel(s)) {
                *o = *o + ws * v;
            }
        }
    }
    let mut cache = ConnectorCache {
        xhat: Vec::new(),
        inv_std: Vec::new(),
    };
    if connector.normalize {
        let n = T::from(p).expect("representable");
        let eps = T::from(Connector::<T>::EPS).expect("representable");
        cache.xhat = vec![T::zero(); ct * p];
        cache.inv_std = vec![T::zero(); ct];
        for t in 0..ct {
            let ch = &mut out.data[t * p..(t + 1) * p];
            let mean = ch.iter().fold(T::zero(), |a, &v| a + v) / n;
            let var = ch.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            let inv = T::one() / (var + eps).sqrt();
            cache.inv_std[t] = inv;
            let (g, b) = (connector.gamma()[t], connector.beta()[t]);
            for (o, h) in ch.iter_mut().zip(&mut cache.xhat[t * p..(t + 1) * p]) {
                *h = (*o - mean) * inv;
                *o = g * *h + b;
            }
        }
    }
    Ok((out, cache))
}

/// Returns the gradient with respect to the student map and the flat
/// gradient of the connector parameters.
pub fn connector_backward<T: Float>(
    student: &FeatureMap<T>,
    connector: &Connector<T>,
    cache: &ConnectorCache<T>,
    d_out: &FeatureMap<T>,
) -> (FeatureMap<T>, Vec<T>) {
    let p = student.positions();
    let (cs, ct) = (connector.student_channels, connector.teacher_channels);
    let mut d_params = vec![T::zero(); connector.params.len()];
    let mut d_proj = d_out.data.clone();
    if connector.normalize {
        let n = T::from(p).expect("representable");
        let wlen = cs * ct;
        for t in 0..ct {
            let dy = &d_out.data[t * p..(t + 1) * p];
            let xh = &cache.xhat[t * p..(t + 1) * p];
            let sum_dy = dy.iter().fold(T::zero(), |a, &v| a + v);
            let sum_dy_xh = dy.iter().zip(xh).fold(T::zero(), |a, (&d, &h)| a + d * h);
            d_params[wlen + t] = sum_dy_xh;
            d_params[wlen + ct + t] = sum_dy;
            let k = connector.gamma()[t] * cache.inv_std[t];
            let (mdy, mdyx) = (sum_dy / n, sum_dy_xh / n);
            for ((o, &d), &h) in d_proj[t * p..(t + 1) * p].iter_mut().zip(dy).zip(xh) {
                *o = k * (d - mdy - h * mdyx);
            }
        }
    }
    let w = connector.weight();
    let mut d_student = FeatureMap::zeros(cs, student.batch, student.height, student.width);
    for t in 0..ct {
        let dp = &d_proj[t * p..(t + 1) * p];
        for s in 0..cs {
            let xs = student.channel(s);
            d_params[t * cs + s] = dp.iter().zip(xs).fold(T::zero(), |a, (&g, &v)| a + g * v);
            let ws = w[t * cs + s];
            for (o, &g) in d_student.data[s * p..(s + 1) * p].iter_mut().zip(dp) {
                *o = *o + ws * g;
            }
        }
    }
    (d_student, d_params)
}

/// Distillation loss with per-stage values and gradients for the student
/// maps and the connectors.
#[derive(Debug, Clone)]
pub struct DistillOutput<T> {
    pub loss: T,
    pub stage_losses: Vec<T>,
    pub student_grads: Vec<FeatureMap<T>>,
    pub connector_grads: Vec<Vec<T>>,
}

fn check_stage_count<T: Float>(features: &FeatureMapSet<T>, connectors: &[Connector<T>]) -> Result<()> {
    if features.len() != connectors.len() {
        return Err(Error::Validation(format!(
            "{} tapped stages but {} connectors",
            features.len(),
            connectors.len()
        )));
    }
    Ok(())
}

fn stage_mse<T: Float>(teacher: &FeatureMap<T>, projected: &FeatureMap<T>, index: usize) -> Result<T> {
    if teacher.channels != projected.channels {
        return Err(Error::Shape(format!(
            "stage {index}: connector emits {} channels, teacher has {}",
            projected.channels, teacher.channels
        )));
    }
    let n = T::from(teacher.data.len()).expect("representable");
    let sum = teacher
        .data
        .iter()
        .zip(&projected.data)
        .fold(T::zero(), |a, (&t, &r)| a + (r - t) * (r - t));
    Ok(sum / n)
}

/// Σ over stages of the mean squared difference between the teacher map
/// and the connector-transformed student map.
pub fn distill_loss<T: Float>(features: &FeatureMapSet<T>, connectors: &[Connector<T>]) -> Result<T> {
    check_stage_count(features, connectors)?;
    let mut total = T::zero();
    for (i, (pair, conn)) in features.stages.iter().zip(connectors).enumerate() {
        let projected = connector_transform(&pair.student, conn)?;
        total = total + stage_mse(&pair.teacher, &projected, i)?;
    }
    Ok(total)
}

pub fn distill_loss_with_grad<T: Float>(features: &FeatureMapSet<T>, connectors: &[Connector<T>]) -> Result<DistillOutput<T>> {
    check_stage_count(features, connectors)?;
    let mut out = DistillOutput {
        loss: T::zero(),
        stage_losses: Vec::with_capacity(features.len()),
        student_grads: Vec::with_capacity(features.len()),
        connector_grads: Vec::with_capacity(features.len()),
    };
    for (i, (pair, conn)) in features.stages.iter().zip(connectors).enumerate() {
        let (projected, cache) = connector_forward(&pair.student, conn)?;
        let loss = stage_mse(&pair.teacher, &projected, i)?;
        let scale = T::from(2.0).expect("representable") / T::from(projected.data.len()).expect("representable");
        let mut d_proj = projected;
        for (r, &t) in d_proj.data.iter_mut().zip(&pair.teacher.data) {
            *r = (*r - t) * scale;
        }
        let (d_student, d_conn) = connector_backward(&pair.student, conn, &cache, &d_proj);
        out.loss = out.loss + loss;
        out.stage_losses.push(loss);
        out.student_grads.push(d_student);
        out.connector_grads.push(d_conn);
    }
    Ok(out)
}

/// Teacher backbone whose parameters can no longer change.
///
/// The parameters are owned privately and only read by inference-mode
/// forward passes, which use the stored normalization statistics.
#[derive(Debug, Clone)]
pub struct FrozenTeacher {
    backbone: Backbone,
    state: ModelState,
}

/// Freezes a backbone and its parameters for use as a distillation teacher.
pub fn freeze_teacher(backbone: Backbone, state: ModelState) -> FrozenTeacher {
    FrozenTeacher { backbone, state }
}

impl FrozenTeacher {
    /// Output of every residual stage for `x`, computed in inference mode.
    pub fn stage_features(&self, x: &Tensor) -> Vec<Tensor> {
        let mut mode = NormMode::Running(&self.state.buffers);
        self.backbone.forward(&self.state.params, &mut mode, x).0.stages
    }

    pub fn digest(&self) -> String {
        self.state.digest()
    }

    pub fn num_params(&self) -> usize {
        self.state.params.len()
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, c: usize, b: usize, h: usize, w: usize) -> FeatureMap<f64> {
        let data = (0..c * b * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMap::new(c, b, h, w, data).unwrap()
    }

    #[test]
    fn identity_connector_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fs = random_map(&mut rng, 4, 2, 3, 3);
        let out = connector_transform(&fs, &Connector::identity(4)).unwrap();
        assert_eq!(out, fs);
    }

    #[test]
    fn zero_connector_gives_zero_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fs = random_map(&mut rng, 3, 2, 2, 2);
        let conn = Connector::from_weight(3, 5, vec![0.0; 15]).unwrap();
        let out = connector_transform(&fs, &conn).unwrap();
        assert_eq!(out.channels, 5);
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_matches_per_position_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (b, cs, ct, h, w) = (2, 3, 5, 2, 2);
        let fs = random_map(&mut rng, cs, b, h, w);
        let weight: Vec<f64> = (0..cs * ct).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let conn = Connector::from_weight(cs, ct, weight.clone()).unwrap();
        let out = connector_transform(&fs, &conn).unwrap();
        for n in 0..b {
            for y in 0..h {
                for x in 0..w {
                    for t in 0..ct {
                        let mut acc = 0.0;
                        for s in 0..cs {
                            acc += weight[t * cs + s] * fs.data[((s * b + n) * h + y) * w + x];
                        }
                        let got = out.data[((t * b + n) * h + y) * w + x];
                        assert!(((got - acc) / acc).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn transform_rejects_channel_mismatch() {
        let fs = FeatureMap::<f64>::zeros(3, 1, 2, 2);
        assert!(matches!(
            connector_transform(&fs, &Connector::identity(4)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn matching_maps_have_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fs = random_map(&mut rng, 4, 2, 3, 3);
        let set = FeatureMapSet::new(vec![StagePair {
            teacher: fs.clone(),
            student: fs,
        }])
        .unwrap();
        assert_eq!(distill_loss(&set, &[Connector::identity(4)]).unwrap(), 0.0);
    }

    #[test]
    fn ones_against_zeros_is_one() {
        let teacher = FeatureMap::<f64>::zeros(2, 1, 2, 2);
        let student = FeatureMap::new(2, 1, 2, 2, vec![1.0; 8]).unwrap();
        let set = FeatureMapSet::new(vec![StagePair { teacher, student }]).unwrap();
        let loss = distill_loss(&set, &[Connector::identity(2)]).unwrap();
        assert!((loss - 1.0).abs() < 1e-15);
    }

    #[test]
    fn random_pair_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let teacher = random_map(&mut rng, 3, 2, 4, 4);
        let student = random_map(&mut rng, 3, 2, 4, 4);
        let mut sum = 0.0;
        for i in 0..teacher.data.len() {
            sum += (student.data[i] - teacher.data[i]).powi(2);
        }
        let reference = sum / teacher.data.len() as f64;
        let set = FeatureMapSet::new(vec![StagePair { teacher, student }]).unwrap();
        let loss = distill_loss(&set, &[Connector::identity(3)]).unwrap();
        assert!(((loss - reference) / reference).abs() < 1e-6);
    }

    #[test]
    fn stage_count_and_spatial_mismatch() {
        let a = FeatureMap::<f64>::zeros(2, 1, 2, 2);
        let b = FeatureMap::<f64>::zeros(2, 1, 3, 3);
        assert!(matches!(
            FeatureMapSet::new(vec![StagePair { teacher: a.clone(), student: b }]),
            Err(Error::Shape(_))
        ));
        let set = FeatureMapSet::new(vec![StagePair {
            teacher: a.clone(),
            student: a,
        }])
        .unwrap();
        assert!(matches!(distill_loss(&set, &[]), Err(Error::Validation(_))));
    }

    #[test]
    fn normalized_connector_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fs = random_map(&mut rng, 4, 3, 2, 2);
        let weight = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let conn = Connector::from_weight(4, 6, weight)
            .unwrap()
            .with_normalization(vec![1.0; 6], vec![0.0; 6])
            .unwrap();
        let out = connector_transform(&fs, &conn).unwrap();
        for t in 0..6 {
            let ch = out.channel(t);
            let mean: f64 = ch.iter().sum::<f64>() / ch.len() as f64;
            let var: f64 = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ch.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }
}
