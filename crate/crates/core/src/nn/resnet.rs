//! Residual convolutional backbone with explicit forward traces and a
//! hand-written backward pass.

use super::layers::{
    global_avg_pool, global_avg_pool_backward, relu_backward_in_place, relu_in_place, BatchNorm2d,
    BnCache, Conv2d, ConvCache, NormMode,
};
use super::params::LayoutBuilder;
use super::tensor::{Mat, Tensor};
use crate::error::{Error, Result};

/// Shape of a ResNet-style backbone built from basic residual blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Output channels of each residual stage. The stem emits `widths[0]`.
    pub widths: Vec<usize>,
    /// Number of basic blocks per stage.
    pub blocks: Vec<usize>,
    /// Stride of the 3×3 stem convolution.
    pub stem_stride: usize,
    pub in_channels: usize,
}

impl BackboneConfig {
    /// Four stages of two blocks each, the 18-layer arrangement.
    pub fn resnet18_like(base_width: usize) -> Self {
        Self {
            widths: vec![base_width, base_width * 2, base_width * 4, base_width * 8],
            blocks: vec![2, 2, 2, 2],
            stem_stride: 1,
            in_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.blocks.len() {
            return Err(Error::Config(format!(
                "backbone needs one block count per stage width ({:?} vs {:?})",
                self.widths, self.blocks
            )));
        }
        if self.widths.contains(&0) || self.blocks.contains(&0) || self.stem_stride == 0 || self.in_channels == 0 {
            return Err(Error::Config("backbone sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn stage_names(&self) -> Vec<String> {
        (1..=self.widths.len()).map(|i| format!("stage{i}")).collect()
    }
}

#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

#[derive(Debug, Clone)]
struct ConvBnCache {
    conv: ConvCache,
    bn: Option<BnCache>,
}

impl ConvBn {
    fn build(b: &mut LayoutBuilder<'_>, conv: &str, bn: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self {
            conv: b.scoped(conv, |b| Conv2d::build(b, cin, cout, k, stride)),
            bn: b.scoped(bn, |b| BatchNorm2d::build(b, cout)),
        }
    }

    fn forward(&self, params: &[f32], mode: &mut NormMode<'_>, x: &Tensor) -> (Tensor, ConvBnCache) {
        let (y, conv) = self.conv.forward(params, x);
        let (y, bn) = self.bn.forward(params, mode, &y);
        (y, ConvBnCache { conv, bn })
    }

    fn backward(&self, params: &[f32], cache: &ConvBnCache, dy: &Tensor, grad: &mut [f32], need_dx: bool) -> Option<Tensor> {
        let bn = cache.bn.as_ref().expect("backward requires a batch-statistics forward pass");
        let d = self.bn.backward(params, bn, dy, grad);
        self.conv.backward(params, &cache.conv, &d, grad, need_dx)
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    first: ConvBn,
    second: ConvBn,
    shortcut: Option<ConvBn>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    first: ConvBnCache,
    mid: Tensor,
    second: ConvBnCache,
    shortcut: Option<ConvBnCache>,
    out: Tensor,
}

impl BasicBlock {
    fn build(b: &mut LayoutBuilder<'_>, cin: usize, cout: usize, stride: usize) -> Self {
        let first = ConvBn::build(b, "conv1", "bn1", cin, cout, 3, stride);
        let second = ConvBn::build(b, "conv2", "bn2", cout, cout, 3, 1);
        let shortcut = (stride != 1 || cin != cout).then(|| {
            b.scoped("downsample", |b| ConvBn::build(b, "0", "1", cin, cout, 1, stride))
        });
        Self {
            first,
            second,
            shortcut,
        }
    }

    fn forward(&self, params: &[f32], mode: &mut NormMode<'_>, x: &Tensor) -> (Tensor, BlockCache) {
        let (mut mid, first) = self.first.forward(params, mode, x);
        relu_in_place(&mut mid.data);
        let (mut out, second) = self.second.forward(params, mode, &mid);
        let shortcut = match &self.shortcut {
            Some(sc) => {
                let (s, c) = sc.forward(params, mode, x);
                out.data.iter_mut().zip(&s.data).for_each(|(o, v)| *o += v);
                Some(c)
            }
            None => {
                out.data.iter_mut().zip(&x.data).for_each(|(o, v)| *o += v);
                None
            }
        };
        relu_in_place(&mut out.data);
        let cache = BlockCache {
            first,
            mid,
            second,
            shortcut,
            out: out.clone(),
        };
        (out, cache)
    }

    fn backward(&self, params: &[f32], cache: &BlockCache, dout: &Tensor, grad: &mut [f32]) -> Tensor {
        let mut d = dout.clone();
        relu_backward_in_place(&mut d.data, &cache.out.data);
        let mut dmid = self.second.backward(params, &cache.second, &d, grad, true).expect("input grad");
        relu_backward_in_place(&mut dmid.data, &cache.mid.data);
        let mut dx = self.first.backward(params, &cache.first, &dmid, grad, true).expect("input grad");
        match (&self.shortcut, &cache.shortcut) {
            (Some(sc), Some(c)) => {
                let ds = sc.backward(params, c, &d, grad, true).expect("input grad");
                dx.data.iter_mut().zip(&ds.data).for_each(|(a, b)| *a += b);
            }
            _ => dx.data.iter_mut().zip(&d.data).for_each(|(a, b)| *a += b),
        }
        dx
    }
}

/// Residual backbone: a 3×3 stem followed by residual stages and global
/// average pooling.
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    stem: ConvBn,
    stages: Vec<Vec<BasicBlock>>,
}

/// Pooled features plus the output of every residual stage.
#[derive(Debug, Clone)]
pub struct BackboneOutput {
    pub features: Mat,
    pub stages: Vec<Tensor>,
}

/// Everything the backward pass needs from a batch-statistics forward pass.
#[derive(Debug, Clone)]
pub struct BackboneTrace {
    stem: ConvBnCache,
    stem_out: Tensor,
    blocks: Vec<Vec<BlockCache>>,
}

impl Backbone {
    pub fn build(b: &mut LayoutBuilder<'_>, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let stem = ConvBn::build(b, "conv1", "bn1", config.in_channels, config.widths[0], 3, config.stem_stride);
        let mut stages = Vec::with_capacity(config.widths.len());
        let mut cin = config.widths[0];
        for (i, (&width, &count)) in config.widths.iter().zip(&config.blocks).enumerate() {
            let blocks = b.scoped(format!("layer{}", i + 1), |b| {
                (0..count)
                    .map(|j| {
                        let stride = if i > 0 && j == 0 { 2 } else { 1 };
                        let block = b.scoped(j.to_string(), |b| BasicBlock::build(b, cin, width, stride));
                        cin = width;
                        block
                    })
                    .collect()
            });
            stages.push(blocks);
        }
        Ok(Self {
            config: config.clone(),
            stem,
            stages,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn forward(&self, params: &[f32], mode: &mut NormMode<'_>, x: &Tensor) -> (BackboneOutput, BackboneTrace) {
        let (mut h, stem) = self.stem.forward(params, mode, x);
        relu_in_place(&mut h.data);
        let stem_out = h.clone();
        let mut stage_outputs = Vec::with_capacity(self.stages.len());
        let mut caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let mut stage_caches = Vec::with_capacity(stage.len());
            for block in stage {
                let (out, cache) = block.forward(params, mode, &h);
                stage_caches.push(cache);
                h = out;
            }
            caches.push(stage_caches);
            stage_outputs.push(h.clone());
        }
        let features = global_avg_pool(&h);
        (
            BackboneOutput {
                features,
                stages: stage_outputs,
            },
            BackboneTrace {
                stem,
                stem_out,
                blocks: caches,
            },
        )
    }

    /// Back-propagates gradients arriving at the pooled features and,
    /// optionally, at individual stage outputs. Accumulates into `grad`.
    pub fn backward(
        &self,
        params: &[f32],
        trace: &BackboneTrace,
        d_features: Option<&Mat>,
        d_stages: &[Option<Tensor>],
        grad: &mut [f32],
    ) {
        let last = &trace.blocks.last().and_then(|s| s.last()).expect("non-empty backbone").out;
        let mut d = match d_features {
            Some(df) => global_avg_pool_backward(df, last.channels, last.batch, last.height, last.width),
            None => Tensor::zeros_like(last),
        };
        for (s, stage) in self.stages.iter().enumerate().rev() {
            if let Some(Some(extra)) = d_stages.get(s) {
                assert!(extra.same_shape(&d), "stage {s} gradient shape");
                d.data.iter_mut().zip(&extra.data).for_each(|(a, b)| *a += b);
            }
            for (block, cache) in stage.iter().zip(&trace.blocks[s]).rev() {
                d = block.backward(params, cache, &d, grad);
            }
        }
        relu_backward_in_place(&mut d.data, &trace.stem_out.data);
        self.stem.backward(params, &trace.stem, &d, grad, false);
    }
}
