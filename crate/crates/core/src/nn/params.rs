use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Name, shape and position of one tensor inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Describes how a model's trainable parameters and non-trainable buffers
/// (normalization running statistics) are packed into two flat vectors.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Layout {
    pub params: Vec<TensorSpec>,
    pub buffers: Vec<TensorSpec>,
    param_len: usize,
    buffer_len: usize,
}

impl Layout {
    pub fn num_params(&self) -> usize {
        self.param_len
    }

    pub fn num_buffers(&self) -> usize {
        self.buffer_len
    }

    pub fn param(&self, name: &str) -> Option<&TensorSpec> {
        self.params.iter().find(|s| s.name == name)
    }

    pub fn buffer(&self, name: &str) -> Option<&TensorSpec> {
        self.buffers.iter().find(|s| s.name == name)
    }
}

/// Flat parameter and buffer storage for one model instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub params: Vec<f32>,
    pub buffers: Vec<f32>,
}

impl ModelState {
    /// SHA-256 over the little-endian bytes of parameters then buffers.
    pub fn digest(&self) -> String {
        digest_f32(&[&self.params, &self.buffers])
    }

    /// Copies every tensor whose name starts with `prefix` from `src` into
    /// `self`, matching tensors by name. Shapes must agree.
    pub fn copy_prefix_from(
        &mut self,
        layout: &Layout,
        src: &ModelState,
        src_layout: &Layout,
        prefix: &str,
    ) -> Result<usize> {
        let mut copied = 0;
        for (dst_specs, dst, src_specs, src_vals) in [
            (&layout.params, &mut self.params, &src_layout.params, &src.params),
            (&layout.buffers, &mut self.buffers, &src_layout.buffers, &src.buffers),
        ] {
            for spec in dst_specs.iter().filter(|s| s.name.starts_with(prefix)) {
                let from = src_specs
                    .iter()
                    .find(|s| s.name == spec.name)
                    .ok_or_else(|| Error::Shape(format!("source has no tensor {}", spec.name)))?;
                if from.shape != spec.shape {
                    return Err(Error::Shape(format!(
                        "{}: shape {:?} vs {:?}",
                        spec.name, from.shape, spec.shape
                    )));
                }
                dst[spec.range()].copy_from_slice(&src_vals[from.range()]);
                copied += 1;
            }
        }
        Ok(copied)
    }
}

pub fn digest_f32(parts: &[&[f32]]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        for v in part.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal { std: f32 },
    Uniform { bound: f32 },
}

/// Allocates named tensors in registration order and draws their initial
/// values.
pub struct LayoutBuilder<'r> {
    layout: Layout,
    params: Vec<f32>,
    buffers: Vec<f32>,
    scope: Vec<String>,
    rng: &'r mut ChaCha8Rng,
}

impl<'r> LayoutBuilder<'r> {
    pub fn new(rng: &'r mut ChaCha8Rng) -> Self {
        Self {
            layout: Layout::default(),
            params: Vec::new(),
            buffers: Vec::new(),
            scope: Vec::new(),
            rng,
        }
    }

    fn qualified(&self, name: &str) -> String {
        let mut parts = self.scope.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    pub fn scoped<T>(&mut self, scope: impl Into<String>, f: impl FnOnce(&mut Self) -> T) -> T {
        self.scope.push(scope.into());
        let out = f(self);
        self.scope.pop();
        out
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> usize {
        let spec = TensorSpec {
            name: self.qualified(name),
            shape: shape.to_vec(),
            offset: self.layout.param_len,
        };
        let len = spec.len();
        match init {
            Init::Zeros => self.params.extend(std::iter::repeat_n(0.0, len)),
            Init::Ones => self.params.extend(std::iter::repeat_n(1.0, len)),
            Init::Normal { std } => {
                let dist = Normal::new(0.0f32, std).expect("valid std");
                for _ in 0..len {
                    self.params.push(dist.sample(self.rng));
                }
            }
            Init::Uniform { bound } => {
                let dist = Uniform::new_inclusive(-bound, bound);
                for _ in 0..len {
                    self.params.push(self.rng.sample(dist));
                }
            }
        }
        self.layout.param_len += len;
        self.layout.params.push(spec);
        self.layout.param_len - len
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], fill: f32) -> usize {
        let spec = TensorSpec {
            name: self.qualified(name),
            shape: shape.to_vec(),
            offset: self.layout.buffer_len,
        };
        let len = spec.len();
        self.buffers.extend(std::iter::repeat_n(fill, len));
        self.layout.buffer_len += len;
        self.layout.buffers.push(spec);
        self.layout.buffer_len - len
    }

    pub fn finish(self) -> (Layout, ModelState) {
        (
            self.layout,
            ModelState {
                params: self.params,
                buffers: self.buffers,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn offsets_and_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = LayoutBuilder::new(&mut rng);
        let w = b.scoped("net", |b| b.scoped("fc", |b| b.param("weight", &[3, 2], Init::Ones)));
        let bias = b.param("bias", &[3], Init::Zeros);
        let rm = b.buffer("mean", &[4], 0.0);
        let (layout, state) = b.finish();
        assert_eq!((w, bias, rm), (0, 6, 0));
        assert_eq!(layout.params[0].name, "net.fc.weight");
        assert_eq!(layout.num_params(), 9);
        assert_eq!(state.params.len(), 9);
        assert_eq!(state.buffers.len(), 4);
        assert!(layout.param("bias").is_some());
    }

    #[test]
    fn copy_prefix_by_name() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = LayoutBuilder::new(&mut rng);
        b.param("backbone.w", &[2], Init::Ones);
        b.param("head.w", &[2], Init::Ones);
        let (src_layout, src) = b.finish();

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = LayoutBuilder::new(&mut rng);
        b.param("fc.w", &[5], Init::Zeros);
        b.param("backbone.w", &[2], Init::Zeros);
        let (layout, mut dst) = b.finish();
        let n = dst.copy_prefix_from(&layout, &src, &src_layout, "backbone.").unwrap();
        assert_eq!(n, 1);
        assert_eq!(dst.params, vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
    }
}
