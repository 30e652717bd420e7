use super::gemm::sgemm;
use super::params::{Init, LayoutBuilder};
use super::tensor::{Mat, Tensor};

/// How batch normalization obtains its statistics.
pub enum NormMode<'a> {
    /// Batch statistics; running statistics in the buffer slice are updated.
    Batch(&'a mut [f32]),
    /// Stored running statistics; nothing is written.
    Running(&'a [f32]),
}

/// 2-D convolution without bias over channel-major tensors.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    weight: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    col: Vec<f32>,
    batch: usize,
    in_h: usize,
    in_w: usize,
}

impl Conv2d {
    pub fn build(
        b: &mut LayoutBuilder<'_>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        // Kaiming normal, fan-out mode.
        let std = (2.0 / (out_ch * kernel * kernel) as f32).sqrt();
        let weight = b.param("weight", &[out_ch, in_ch, kernel, kernel], Init::Normal { std });
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad: kernel / 2,
            weight,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel
    }

    pub fn forward(&self, params: &[f32], x: &Tensor) -> (Tensor, ConvCache) {
        assert_eq!(x.channels, self.in_ch, "conv input channels");
        let (ho, wo) = self.out_size(x.height, x.width);
        let col = im2col(x, self.kernel, self.stride, self.pad, ho, wo);
        let np = x.batch * ho * wo;
        let rows = self.in_ch * self.kernel * self.kernel;
        let mut y = Tensor::zeros(self.out_ch, x.batch, ho, wo);
        let w = &params[self.weight..self.weight + self.weight_len()];
        sgemm(self.out_ch, rows, np, w, false, &col, false, &mut y.data, false);
        let cache = ConvCache {
            col,
            batch: x.batch,
            in_h: x.height,
            in_w: x.width,
        };
        (y, cache)
    }

    /// Accumulates the weight gradient into `grad` and returns the input
    /// gradient when `need_input_grad` is set.
    pub fn backward(
        &self,
        params: &[f32],
        cache: &ConvCache,
        dy: &Tensor,
        grad: &mut [f32],
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let rows = self.in_ch * self.kernel * self.kernel;
        let np = dy.plane();
        let gw = &mut grad[self.weight..self.weight + self.weight_len()];
        // dW = dY · colᵀ
        sgemm(self.out_ch, np, rows, &dy.data, false, &cache.col, true, gw, true);
        if !need_input_grad {
            return None;
        }
        let w = &params[self.weight..self.weight + self.weight_len()];
        let mut dcol = vec![0.0; rows * np];
        // dcol = Wᵀ · dY
        sgemm(rows, self.out_ch, np, w, true, &dy.data, false, &mut dcol, false);
        let mut dx = Tensor::zeros(self.in_ch, cache.batch, cache.in_h, cache.in_w);
        col2im(&dcol, &mut dx, self.kernel, self.stride, self.pad, dy.height, dy.width);
        Some(dx)
    }
}

/// Valid output-column range for kernel column `kw`: `ow*stride + kw - pad` in `[0, w)`.
fn valid_range(out: usize, input: usize, k_off: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k_off >= pad { 0 } else { (pad - k_off).div_ceil(stride) };
    let hi = if input + pad > k_off {
        ((input + pad - k_off - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<f32> {
    let (h, w, n) = (x.height, x.width, x.batch);
    let np = n * ho * wo;
    let mut col = vec![0.0f32; x.channels * k * k * np];
    let (oh_lo_all, oh_hi_all): (Vec<_>, Vec<_>) =
        (0..k).map(|kh| valid_range(ho, h, kh, stride, pad)).unzip();
    for ci in 0..x.channels {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let dst = &mut col[row * np..(row + 1) * np];
                let (ow_lo, ow_hi) = valid_range(wo, w, kw, stride, pad);
                for s in 0..n {
                    let src = &x.data[(ci * n + s) * h * w..(ci * n + s + 1) * h * w];
                    for oh in oh_lo_all[kh]..oh_hi_all[kh] {
                        let ih = oh * stride + kh - pad;
                        let d = &mut dst[(s * ho + oh) * wo..(s * ho + oh + 1) * wo];
                        let srow = &src[ih * w..(ih + 1) * w];
                        if stride == 1 {
                            let start = ow_lo + kw - pad;
                            d[ow_lo..ow_hi].copy_from_slice(&srow[start..start + ow_hi - ow_lo]);
                        } else {
                            for ow in ow_lo..ow_hi {
                                d[ow] = srow[ow * stride + kw - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(dcol: &[f32], dx: &mut Tensor, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) {
    let (h, w, n) = (dx.height, dx.width, dx.batch);
    let np = n * ho * wo;
    for ci in 0..dx.channels {
        for kh in 0..k {
            let (oh_lo, oh_hi) = valid_range(ho, h, kh, stride, pad);
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let src = &dcol[row * np..(row + 1) * np];
                let (ow_lo, ow_hi) = valid_range(wo, w, kw, stride, pad);
                for s in 0..n {
                    let plane = &mut dx.data[(ci * n + s) * h * w..(ci * n + s + 1) * h * w];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * stride + kh - pad;
                        let srow = &src[(s * ho + oh) * wo..(s * ho + oh + 1) * wo];
                        let drow = &mut plane[ih * w..(ih + 1) * w];
                        for ow in ow_lo..ow_hi {
                            drow[ow * stride + kw - pad] += srow[ow];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub channels: usize,
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
    momentum: f32,
    eps: f32,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
}

impl BatchNorm2d {
    pub fn build(b: &mut LayoutBuilder<'_>, channels: usize) -> Self {
        Self {
            channels,
            gamma: b.param("weight", &[channels], Init::Ones),
            beta: b.param("bias", &[channels], Init::Zeros),
            running_mean: b.buffer("running_mean", &[channels], 0.0),
            running_var: b.buffer("running_var", &[channels], 1.0),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Returns the normalized output and, in batch mode, the cache needed
    /// for the backward pass.
    pub fn forward(&self, params: &[f32], mode: &mut NormMode<'_>, x: &Tensor) -> (Tensor, Option<BnCache>) {
        let p = x.plane();
        let mut y = Tensor::zeros_like(x);
        match mode {
            NormMode::Running(bufs) => {
                for c in 0..self.channels {
                    let mean = bufs[self.running_mean + c];
                    let inv = 1.0 / (bufs[self.running_var + c] + self.eps).sqrt();
                    let g = params[self.gamma + c] * inv;
                    let sh = params[self.beta + c] - mean * g;
                    for (o, &v) in y.data[c * p..(c + 1) * p].iter_mut().zip(x.channel(c)) {
                        *o = v * g + sh;
                    }
                }
                (y, None)
            }
            NormMode::Batch(bufs) => {
                let mut xhat = vec![0.0f32; x.data.len()];
                let mut inv_std = vec![0.0f32; self.channels];
                for c in 0..self.channels {
                    let xs = x.channel(c);
                    let mean = xs.iter().map(|&v| f64::from(v)).sum::<f64>() / p as f64;
                    let var = xs
                        .iter()
                        .map(|&v| {
                            let d = f64::from(v) - mean;
                            d * d
                        })
                        .sum::<f64>()
                        / p as f64;
                    let inv = 1.0 / (var + f64::from(self.eps)).sqrt();
                    inv_std[c] = inv as f32;
                    let (g, be) = (params[self.gamma + c], params[self.beta + c]);
                    let (mean32, inv32) = (mean as f32, inv as f32);
                    let xh = &mut xhat[c * p..(c + 1) * p];
                    for ((h, o), &v) in xh.iter_mut().zip(&mut y.data[c * p..(c + 1) * p]).zip(xs) {
                        *h = (v - mean32) * inv32;
                        *o = *h * g + be;
                    }
                    let unbiased = if p > 1 { var * p as f64 / (p - 1) as f64 } else { var };
                    let m = self.momentum;
                    let rm = &mut bufs[self.running_mean + c];
                    *rm = (1.0 - m) * *rm + m * mean32;
                    let rv = &mut bufs[self.running_var + c];
                    *rv = (1.0 - m) * *rv + m * unbiased as f32;
                }
                (y, Some(BnCache { xhat, inv_std }))
            }
        }
    }

    pub fn backward(&self, params: &[f32], cache: &BnCache, dy: &Tensor, grad: &mut [f32]) -> Tensor {
        let p = dy.plane();
        let mut dx = Tensor::zeros_like(dy);
        for c in 0..self.channels {
            let dys = dy.channel(c);
            let xh = &cache.xhat[c * p..(c + 1) * p];
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xh = 0.0f64;
            for (&d, &h) in dys.iter().zip(xh) {
                sum_dy += f64::from(d);
                sum_dy_xh += f64::from(d) * f64::from(h);
            }
            grad[self.gamma + c] += sum_dy_xh as f32;
            grad[self.beta + c] += sum_dy as f32;
            let g = params[self.gamma + c];
            let k = g * cache.inv_std[c];
            let mean_dy = (sum_dy / p as f64) as f32;
            let mean_dy_xh = (sum_dy_xh / p as f64) as f32;
            for ((o, &d), &h) in dx.data[c * p..(c + 1) * p].iter_mut().zip(dys).zip(xh) {
                *o = k * (d - mean_dy - h * mean_dy_xh);
            }
        }
        dx
    }
}

pub fn relu_in_place(x: &mut [f32]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward_in_place(grad: &mut [f32], output: &[f32]) {
    for (g, &o) in grad.iter_mut().zip(output) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Fully connected layer on row-major `[rows × in]` inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    weight: usize,
    bias: usize,
}

impl Linear {
    pub fn build(b: &mut LayoutBuilder<'_>, in_features: usize, out_features: usize) -> Self {
        let bound = 1.0 / (in_features as f32).sqrt();
        Self {
            in_features,
            out_features,
            weight: b.param("weight", &[out_features, in_features], Init::Uniform { bound }),
            bias: b.param("bias", &[out_features], Init::Uniform { bound }),
        }
    }

    pub fn build_zeroed(b: &mut LayoutBuilder<'_>, in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: b.param("weight", &[out_features, in_features], Init::Zeros),
            bias: b.param("bias", &[out_features], Init::Zeros),
        }
    }

    pub fn forward(&self, params: &[f32], x: &Mat) -> Mat {
        assert_eq!(x.cols, self.in_features, "linear input width");
        let mut y = Mat::zeros(x.rows, self.out_features);
        for r in 0..x.rows {
            y.data[r * self.out_features..(r + 1) * self.out_features]
                .copy_from_slice(&params[self.bias..self.bias + self.out_features]);
        }
        let w = &params[self.weight..self.weight + self.in_features * self.out_features];
        sgemm(x.rows, self.in_features, self.out_features, &x.data, false, w, true, &mut y.data, true);
        y
    }

    pub fn backward(&self, params: &[f32], x: &Mat, dy: &Mat, grad: &mut [f32]) -> Mat {
        let (i, o) = (self.in_features, self.out_features);
        sgemm(o, x.rows, i, &dy.data, true, &x.data, false, &mut grad[self.weight..self.weight + i * o], true);
        for r in 0..dy.rows {
            for (g, &d) in grad[self.bias..self.bias + o].iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        let mut dx = Mat::zeros(x.rows, i);
        sgemm(x.rows, o, i, &dy.data, false, &params[self.weight..self.weight + i * o], false, &mut dx.data, false);
        dx
    }
}

/// Mean over spatial positions: `[C, N, H, W]` → `[N × C]`.
pub fn global_avg_pool(x: &Tensor) -> Mat {
    let hw = x.height * x.width;
    let mut out = Mat::zeros(x.batch, x.channels);
    for c in 0..x.channels {
        for n in 0..x.batch {
            let s: f32 = x.data[(c * x.batch + n) * hw..(c * x.batch + n + 1) * hw].iter().sum();
            out.data[n * x.channels + c] = s / hw as f32;
        }
    }
    out
}

pub fn global_avg_pool_backward(d: &Mat, channels: usize, batch: usize, h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let mut dx = Tensor::zeros(channels, batch, h, w);
    for c in 0..channels {
        for n in 0..batch {
            let g = d.data[n * channels + c] / hw as f32;
            dx.data[(c * batch + n) * hw..(c * batch + n + 1) * hw].fill(g);
        }
    }
    dx
}

/// Scales each row to unit norm; returns the normalized rows and the
/// original norms.
pub fn l2_normalize_rows(x: &Mat) -> (Mat, Vec<f32>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows);
    for r in out.data.chunks_exact_mut(x.cols) {
        let n = r.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt().max(1e-12) as f32;
        r.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    (out, norms)
}

/// Backward of [`l2_normalize_rows`]: `dz = (dy − y·(y·dy)) / ‖z‖`.
pub fn l2_normalize_rows_backward(y: &Mat, norms: &[f32], dy: &Mat) -> Mat {
    let mut dz = Mat::zeros(y.rows, y.cols);
    for (r, &norm) in norms.iter().enumerate().take(y.rows) {
        let yr = y.row(r);
        let dr = dy.row(r);
        let proj: f32 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &dv) in dz.data[r * y.cols..(r + 1) * y.cols].iter_mut().zip(yr).zip(dr) {
            *o = (dv - yv * proj) / norm;
        }
    }
    dz
}
