//! Stochastic image augmentation.
//!
//! The contrastive policy applies, in order: random resized crop, color
//! jitter, random grayscale, Gaussian blur and horizontal flip, followed by
//! per-channel normalization. Every draw comes from a generator seeded by the
//! caller, so a given `(image, seed)` pair always yields the same output.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::Image;
use super::manifest::ChannelStats;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMode {
    TwoViewContrastive,
    SupervisedTrain,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPolicy {
    pub mode: AugmentMode,
    /// Side of the square output.
    pub crop_size: usize,
    /// Range of the crop area as a fraction of the source area.
    pub scale: (f32, f32),
    /// Range of the crop aspect ratio (width / height).
    pub ratio: (f32, f32),
    pub jitter_prob: f32,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
    pub grayscale_prob: f32,
    pub blur_prob: f32,
    pub blur_sigma: (f32, f32),
    pub flip_prob: f32,
    /// Eval resizes the short side to `crop_size / eval_crop_fraction`
    /// before the center crop.
    pub eval_crop_fraction: f32,
    pub stats: ChannelStats,
}

impl AugmentationPolicy {
    pub fn two_view(crop_size: usize, stats: ChannelStats) -> Self {
        Self {
            mode: AugmentMode::TwoViewContrastive,
            crop_size,
            scale: (0.2, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma: (0.1, 2.0),
            flip_prob: 0.5,
            eval_crop_fraction: 0.875,
            stats,
        }
    }

    pub fn supervised(crop_size: usize, stats: ChannelStats) -> Self {
        Self {
            mode: AugmentMode::SupervisedTrain,
            scale: (0.08, 1.0),
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            ..Self::two_view(crop_size, stats)
        }
    }

    pub fn eval(crop_size: usize, stats: ChannelStats) -> Self {
        Self {
            mode: AugmentMode::Eval,
            flip_prob: 0.0,
            ..Self::supervised(crop_size, stats)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f32| (0.0..=1.0).contains(&p);
        let ok = self.crop_size > 0
            && self.scale.0 > 0.0
            && self.scale.0 <= self.scale.1
            && self.scale.1 <= 1.0
            && self.ratio.0 > 0.0
            && self.ratio.0 <= self.ratio.1
            && [self.jitter_prob, self.grayscale_prob, self.blur_prob, self.flip_prob]
                .into_iter()
                .all(prob)
            && self.blur_sigma.0 > 0.0
            && self.blur_sigma.0 <= self.blur_sigma.1
            && self.eval_crop_fraction > 0.0
            && self.eval_crop_fraction <= 1.0
            && self.stats.std.iter().all(|&s| s > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation policy {self:?}")))
        }
    }
}

/// Two independently augmented views of one image.
pub fn two_view_augment(image: &Image, policy: &AugmentationPolicy, seed: u64) -> Result<(Vec<f32>, Vec<f32>)> {
    if policy.mode != AugmentMode::TwoViewContrastive {
        return Err(Error::Config(format!("two-view augmentation needs a contrastive policy, got {:?}", policy.mode)));
    }
    policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = contrastive_view(image, policy, &mut rng);
    let second = contrastive_view(image, policy, &mut rng);
    Ok((first, second))
}

/// Random resized crop and flip in training mode, resize and center crop in
/// eval mode. Output is normalized `[3][crop][crop]`.
pub fn supervised_augment(image: &Image, policy: &AugmentationPolicy, seed: u64) -> Result<Vec<f32>> {
    policy.validate()?;
    match policy.mode {
        AugmentMode::SupervisedTrain => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let region = random_resized_crop(image, policy, &mut rng);
            let mut out = crop_resize(image, region, policy.crop_size);
            if rng.gen::<f32>() < policy.flip_prob {
                hflip(&mut out);
            }
            Ok(normalize(out, &policy.stats))
        }
        AugmentMode::Eval => {
            let out = crop_resize(image, center_region(image, policy), policy.crop_size);
            Ok(normalize(out, &policy.stats))
        }
        AugmentMode::TwoViewContrastive => Err(Error::Config(
            "supervised augmentation needs a supervised_train or eval policy".into(),
        )),
    }
}

fn contrastive_view(image: &Image, policy: &AugmentationPolicy, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let region = random_resized_crop(image, policy, rng);
    let mut view = crop_resize(image, region, policy.crop_size);
    if rng.gen::<f32>() < policy.jitter_prob {
        color_jitter(&mut view, policy, rng);
    }
    if rng.gen::<f32>() < policy.grayscale_prob {
        grayscale(&mut view);
    }
    if rng.gen::<f32>() < policy.blur_prob {
        let sigma = rng.gen_range(policy.blur_sigma.0..=policy.blur_sigma.1);
        gaussian_blur(&mut view, sigma);
    }
    if rng.gen::<f32>() < policy.flip_prob {
        hflip(&mut view);
    }
    normalize(view, &policy.stats)
}

/// Crop window `(top, left, height, width)` in source pixels.
type Region = (f32, f32, f32, f32);

fn random_resized_crop(image: &Image, policy: &AugmentationPolicy, rng: &mut ChaCha8Rng) -> Region {
    let (h, w) = (image.height as f32, image.width as f32);
    let area = h * w;
    let (log_lo, log_hi) = (policy.ratio.0.ln(), policy.ratio.1.ln());
    for _ in 0..10 {
        let target = area * uniform(rng, policy.scale.0, policy.scale.1);
        let aspect = uniform(rng, log_lo, log_hi).exp();
        let cw = (target * aspect).sqrt().round();
        let ch = (target / aspect).sqrt().round();
        if cw > 0.0 && ch > 0.0 && cw <= w && ch <= h {
            let top = rng.gen_range(0..=(h - ch) as usize) as f32;
            let left = rng.gen_range(0..=(w - cw) as usize) as f32;
            return (top, left, ch, cw);
        }
    }
    // Fallback: central crop clamped to the ratio range.
    let in_ratio = w / h;
    let (cw, ch) = if in_ratio < policy.ratio.0 {
        (w, (w / policy.ratio.0).round())
    } else if in_ratio > policy.ratio.1 {
        ((h * policy.ratio.1).round(), h)
    } else {
        (w, h)
    };
    (((h - ch) / 2.0).floor(), ((w - cw) / 2.0).floor(), ch, cw)
}

fn uniform(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> f32 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn center_region(image: &Image, policy: &AugmentationPolicy) -> Region {
    let short = image.height.min(image.width) as f32;
    let side = (short * policy.eval_crop_fraction).min(short);
    let (h, w) = (image.height as f32, image.width as f32);
    ((h - side) / 2.0, (w - side) / 2.0, side, side)
}

/// Bilinear resampling of a source window to `size × size`, sampling at
/// pixel centers.
fn crop_resize(image: &Image, (top, left, ch, cw): Region, size: usize) -> Image {
    let (h, w) = (image.height, image.width);
    let (sy, sx) = (ch / size as f32, cw / size as f32);
    let taps = |o: usize, scale: f32, offset: f32, limit: usize| {
        let pos = (offset + (o as f32 + 0.5) * scale - 0.5).clamp(0.0, (limit - 1) as f32);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(limit - 1);
        (i0, i1, pos - i0 as f32)
    };
    let ys: Vec<_> = (0..size).map(|o| taps(o, sy, top, h)).collect();
    let xs: Vec<_> = (0..size).map(|o| taps(o, sx, left, w)).collect();
    let mut data = vec![0.0; 3 * size * size];
    for c in 0..3 {
        let src = image.plane(c);
        let dst = &mut data[c * size * size..(c + 1) * size * size];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top_row = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * size + ox] = top_row * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Image {
        height: size,
        width: size,
        data,
    }
}

fn luminance(img: &Image) -> Vec<f32> {
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    r.iter()
        .zip(g)
        .zip(b)
        .map(|((&r, &g), &b)| 0.299 * r + 0.587 * g + 0.114 * b)
        .collect()
}

fn blend_with(img: &mut Image, other: &[f32], factor: f32, per_channel_other: bool) {
    let hw = img.height * img.width;
    for c in 0..3 {
        for (i, v) in img.data[c * hw..(c + 1) * hw].iter_mut().enumerate() {
            let o = if per_channel_other { other[c * hw + i] } else { other[i % other.len()] };
            *v = (factor * *v + (1.0 - factor) * o).clamp(0.0, 1.0);
        }
    }
}

fn color_jitter(img: &mut Image, policy: &AugmentationPolicy, rng: &mut ChaCha8Rng) {
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    let factor = |rng: &mut ChaCha8Rng, amount: f32| uniform(rng, (1.0 - amount).max(0.0), 1.0 + amount);
    for op in order {
        match op {
            0 if policy.brightness > 0.0 => {
                let f = factor(rng, policy.brightness);
                img.data.iter_mut().for_each(|v| *v = (*v * f).clamp(0.0, 1.0));
            }
            1 if policy.contrast > 0.0 => {
                let f = factor(rng, policy.contrast);
                let lum = luminance(img);
                let mean = lum.iter().sum::<f32>() / lum.len() as f32;
                blend_with(img, &[mean], f, false);
            }
            2 if policy.saturation > 0.0 => {
                let f = factor(rng, policy.saturation);
                let lum = luminance(img);
                blend_with(img, &lum, f, false);
            }
            3 if policy.hue > 0.0 => {
                let shift = uniform(rng, -policy.hue, policy.hue);
                shift_hue(img, shift);
            }
            _ => {}
        }
    }
}

fn shift_hue(img: &mut Image, shift: f32) {
    let hw = img.height * img.width;
    for i in 0..hw {
        let (r, g, b) = (img.data[i], img.data[hw + i], img.data[2 * hw + i]);
        let (h, s, v) = rgb_to_hsv(r, g, b);
        let (r, g, b) = hsv_to_rgb((h + shift).rem_euclid(1.0), s, v);
        img.data[i] = r;
        img.data[hw + i] = g;
        img.data[2 * hw + i] = b;
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn grayscale(img: &mut Image) {
    let lum = luminance(img);
    let hw = lum.len();
    for c in 0..3 {
        img.data[c * hw..(c + 1) * hw].copy_from_slice(&lum);
    }
}

fn gaussian_blur(img: &mut Image, sigma: f32) {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-((i * i) as f32) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let (h, w) = (img.height as isize, img.width as isize);
    let clampi = |v: isize, hi: isize| v.clamp(0, hi - 1) as usize;
    let mut tmp = vec![0.0; (h * w) as usize];
    for c in 0..3 {
        let plane = &mut img.data[c * (h * w) as usize..(c + 1) * (h * w) as usize];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    acc += kv * plane[(y * w) as usize + clampi(x + k as isize - radius, w)];
                }
                tmp[(y * w + x) as usize] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    acc += kv * tmp[clampi(y + k as isize - radius, h) * w as usize + x as usize];
                }
                plane[(y * w + x) as usize] = acc;
            }
        }
    }
}

fn hflip(img: &mut Image) {
    let w = img.width;
    for row in img.data.chunks_exact_mut(w) {
        row.reverse();
    }
}

fn normalize(img: Image, stats: &ChannelStats) -> Vec<f32> {
    let hw = img.height * img.width;
    let mut data = img.data;
    for c in 0..3 {
        let (m, s) = (stats.mean[c], stats.std[c]);
        data[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    data
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(h: usize, w: usize) -> Image {
        let mut data = vec![0.0; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[(c * h + y) * w + x] = ((x * 7 + y * 13 + c * 29) % 17) as f32 / 16.0;
                }
            }
        }
        Image::new(h, w, data).unwrap()
    }

    fn stats() -> ChannelStats {
        ChannelStats {
            mean: [0.4, 0.5, 0.6],
            std: [0.2, 0.25, 0.3],
        }
    }

    #[test]
    fn same_seed_same_views() {
        let img = textured(40, 48);
        let p = AugmentationPolicy::two_view(16, stats());
        assert_eq!(two_view_augment(&img, &p, 9).unwrap(), two_view_augment(&img, &p, 9).unwrap());
    }

    #[test]
    fn views_differ_for_a_stochastic_policy() {
        let img = textured(64, 64);
        let p = AugmentationPolicy::two_view(16, stats());
        let differing = (0..100)
            .filter(|&s| {
                let (a, b) = two_view_augment(&img, &p, s).unwrap();
                a != b
            })
            .count();
        assert!(differing >= 99, "{differing}");
    }

    #[test]
    fn degenerate_policy_returns_resized_original() {
        let img = textured(32, 32);
        let p = AugmentationPolicy {
            scale: (1.0, 1.0),
            ratio: (1.0, 1.0),
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            flip_prob: 0.0,
            ..AugmentationPolicy::two_view(16, stats())
        };
        let (a, b) = two_view_augment(&img, &p, 3).unwrap();
        let expected = normalize(crop_resize(&img, (0.0, 0.0, 32.0, 32.0), 16), &stats());
        assert_eq!(a, b);
        assert_eq!(a, expected);
    }

    #[test]
    fn eval_is_deterministic_and_sized() {
        let p = AugmentationPolicy::eval(24, stats());
        for (h, w) in [(64, 64), (30, 50), (24, 24), (100, 37)] {
            let img = textured(h, w);
            let a = supervised_augment(&img, &p, 1).unwrap();
            let b = supervised_augment(&img, &p, 2).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.len(), 3 * 24 * 24);
        }
        let train = AugmentationPolicy::supervised(24, stats());
        assert_eq!(supervised_augment(&textured(50, 70), &train, 4).unwrap().len(), 3 * 24 * 24);
    }

    #[test]
    fn constant_image_normalizes_per_channel() {
        let img = Image::filled(20, 20, [0.8, 0.1, 0.5]);
        for p in [AugmentationPolicy::eval(8, stats()), AugmentationPolicy::supervised(8, stats())] {
            let out = supervised_augment(&img, &p, 5).unwrap();
            for c in 0..3 {
                let expected = ([0.8, 0.1, 0.5][c] - stats().mean[c]) / stats().std[c];
                assert!(out[c * 64..(c + 1) * 64].iter().all(|v| (v - expected).abs() < 1e-5));
            }
        }
    }

    #[test]
    fn mode_mismatch_is_rejected() {
        let img = textured(8, 8);
        assert!(two_view_augment(&img, &AugmentationPolicy::eval(4, stats()), 0).is_err());
        assert!(supervised_augment(&img, &AugmentationPolicy::two_view(4, stats()), 0).is_err());
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2, 0.4, 0.9), (1.0, 0.0, 0.0), (0.5, 0.5, 0.5), (0.1, 0.9, 0.3)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-5 && (g - g2).abs() < 1e-5 && (b - b2).abs() < 1e-5);
        }
    }

    #[test]
    fn blur_preserves_constant_planes() {
        let mut img = Image::filled(10, 10, [0.3, 0.6, 0.9]);
        gaussian_blur(&mut img, 1.5);
        assert!(img.plane(1).iter().all(|v| (v - 0.6).abs() < 1e-6));
    }
}
