/// Activation tensor stored channel-major: `data[((c * batch + n) * height + y) * width + x]`.
///
/// Keeping channels outermost makes a convolution a single matrix product
/// over the whole batch and turns per-channel statistics into contiguous
/// reductions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            batch,
            height,
            width,
            data: vec![0.0; channels * batch * height * width],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(other.channels, other.batch, other.height, other.width)
    }

    /// Number of positions per channel (`batch * height * width`).
    pub fn plane(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.channels == other.channels
            && self.batch == other.batch
            && self.height == other.height
            && self.width == other.width
    }

    /// Builds a channel-major tensor from per-sample `[C][H][W]` images.
    pub fn from_samples(samples: &[Vec<f32>], channels: usize, height: usize, width: usize) -> Self {
        let batch = samples.len();
        let hw = height * width;
        let mut t = Self::zeros(channels, batch, height, width);
        for (n, s) in samples.iter().enumerate() {
            assert_eq!(s.len(), channels * hw, "sample {n} has the wrong size");
            for c in 0..channels {
                let dst = (c * batch + n) * hw;
                t.data[dst..dst + hw].copy_from_slice(&s[c * hw..(c + 1) * hw]);
            }
        }
        t
    }

    /// Extracts sample `n` as a `[C][H][W]` vector.
    pub fn sample(&self, n: usize) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = Vec::with_capacity(self.channels * hw);
        for c in 0..self.channels {
            let src = (c * self.batch + n) * hw;
            out.extend_from_slice(&self.data[src..src + hw]);
        }
        out
    }
}

/// Row-major `f32` matrix, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}
