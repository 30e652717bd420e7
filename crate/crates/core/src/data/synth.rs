//! Procedural shape dataset for desk-scale experiments.
//!
//! Each class is a geometric shape drawn with random position, scale,
//! rotation and colors over a noisy gradient background with distractor
//! rectangles. Color carries no class information, so a useful
//! representation has to encode shape.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::image::Image;
use crate::error::{Error, Result};

pub const SHAPE_NAMES: [&str; 10] = [
    "disc", "square", "triangle", "plus", "ring", "diamond", "cross", "hstripes", "vstripes", "dots",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDatasetSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            train_per_class: 50,
            val_per_class: 50,
            image_size: 64,
            seed: 0,
        }
    }
}

/// Writes `root/{train,val}/<NN_shape>/<index>.png`.
pub fn generate_toy_dataset(root: &Path, spec: &ToyDatasetSpec) -> Result<()> {
    if spec.classes == 0 || spec.classes > SHAPE_NAMES.len() {
        return Err(Error::Config(format!("classes must be in 1..={}", SHAPE_NAMES.len())));
    }
    if spec.image_size < 8 {
        return Err(Error::Config("image_size must be at least 8".into()));
    }
    for (split, count, stream) in [("train", spec.train_per_class, 0u64), ("val", spec.val_per_class, 1)] {
        for (class, name) in SHAPE_NAMES.iter().enumerate().take(spec.classes) {
            let dir = root.join(split).join(format!("{class:02}_{name}"));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(stream * 64 + class as u64);
            for i in 0..count {
                let path = dir.join(format!("{i:04}.png"));
                render_shape(class, spec.image_size, &mut rng)
                    .to_rgb8()
                    .save(&path)
                    .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
            }
        }
    }
    Ok(())
}

fn luma(c: [f32; 3]) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// Membership test in the shape's unit frame, where the shape fits in
/// `[-1, 1]^2`.
fn inside(class: usize, u: f32, v: f32) -> bool {
    let r2 = u * u + v * v;
    match class {
        0 => r2 <= 0.8,
        1 => u.abs() <= 0.75 && v.abs() <= 0.75,
        2 => (-0.8..=0.7).contains(&v) && u.abs() <= (0.7 - v) * 0.6,
        3 => (u.abs() <= 0.25 && v.abs() <= 0.9) || (v.abs() <= 0.25 && u.abs() <= 0.9),
        4 => (0.45..=0.85).contains(&r2),
        5 => u.abs() + v.abs() <= 0.95,
        6 => ((u - v).abs() <= 0.3 || (u + v).abs() <= 0.3) && u.abs() <= 0.8 && v.abs() <= 0.8,
        7 => u.abs() <= 0.85 && v.abs() <= 0.85 && ((v + 0.85) / 0.34) as i32 % 2 == 0,
        8 => u.abs() <= 0.85 && v.abs() <= 0.85 && ((u + 0.85) / 0.34) as i32 % 2 == 0,
        _ => (u - 0.45).powi(2) + v * v <= 0.12 || (u + 0.45).powi(2) + v * v <= 0.12,
    }
}

/// Renders one sample of `class` at `size × size`.
pub fn render_shape(class: usize, size: usize, rng: &mut ChaCha8Rng) -> Image {
    let fg = random_color(rng);
    let mut bg = random_color(rng);
    while (luma(fg) - luma(bg)).abs() < 0.3 {
        bg = random_color(rng);
    }
    let bg2: [f32; 3] = std::array::from_fn(|c| (bg[c] + rng.gen_range(-0.15..0.15)).clamp(0.0, 1.0));
    let grad_angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (gx, gy) = (grad_angle.cos(), grad_angle.sin());

    let s = size as f32;
    let radius = s * rng.gen_range(0.22..0.34);
    let cx = s * 0.5 + rng.gen_range(-0.12..0.12) * s;
    let cy = s * 0.5 + rng.gen_range(-0.12..0.12) * s;
    let theta: f32 = rng.gen_range(-20f32..20.0).to_radians();
    let (sin, cos) = theta.sin_cos();

    let distractors: Vec<([f32; 3], [f32; 4])> = (0..rng.gen_range(1..=2))
        .map(|_| {
            let w = s * rng.gen_range(0.05..0.15);
            let h = s * rng.gen_range(0.05..0.15);
            let x = rng.gen_range(0.0..s - w);
            let y = rng.gen_range(0.0..s - h);
            (random_color(rng), [x, y, x + w, y + h])
        })
        .collect();

    let noise = Normal::new(0.0f32, 0.03).expect("valid std");
    let hw = size * size;
    let mut data = vec![0.0; 3 * hw];
    for y in 0..size {
        for x in 0..size {
            let t = 0.5 + 0.5 * (gx * (x as f32 / s - 0.5) + gy * (y as f32 / s - 0.5));
            let mut px: [f32; 3] = std::array::from_fn(|c| bg[c] * (1.0 - t) + bg2[c] * t);
            for (color, [x0, y0, x1, y1]) in &distractors {
                let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
                if fx >= *x0 && fx < *x1 && fy >= *y0 && fy < *y1 {
                    px = *color;
                }
            }
            let mut coverage = 0.0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let dx = (x as f32 + ox - cx) / radius;
                let dy = (y as f32 + oy - cy) / radius;
                let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
                if inside(class, u, v) {
                    coverage += 0.25;
                }
            }
            for c in 0..3 {
                let value = px[c] * (1.0 - coverage) + fg[c] * coverage + noise.sample(rng);
                data[c * hw + y * size + x] = value.clamp(0.0, 1.0);
            }
        }
    }
    Image {
        height: size,
        width: size,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_manifest;

    #[test]
    fn every_shape_covers_part_of_its_frame() {
        for class in 0..SHAPE_NAMES.len() {
            let mut hits = 0;
            for i in 0..40 {
                for j in 0..40 {
                    let (u, v) = (i as f32 / 20.0 - 1.0, j as f32 / 20.0 - 1.0);
                    hits += usize::from(inside(class, u, v));
                }
            }
            assert!(hits > 80 && hits < 1400, "class {class}: {hits}");
        }
    }

    #[test]
    fn generation_is_deterministic_and_loadable() {
        let spec = ToyDatasetSpec {
            classes: 3,
            train_per_class: 2,
            val_per_class: 1,
            image_size: 16,
            seed: 4,
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_toy_dataset(a.path(), &spec).unwrap();
        generate_toy_dataset(b.path(), &spec).unwrap();
        let train = load_manifest(a.path(), "train").unwrap();
        let val = load_manifest(a.path(), "val").unwrap();
        assert_eq!(train.len(), 6);
        assert_eq!(val.len(), 3);
        assert_eq!(train.class_names[2], "02_triangle");
        train.check_disjoint(&val).unwrap();
        for e in &train.entries {
            let x = fs::read(a.path().join(&e.path)).unwrap();
            let y = fs::read(b.path().join(&e.path)).unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToyDatasetSpec {
            classes: 11,
            ..Default::default()
        };
        assert!(generate_toy_dataset(dir.path(), &spec).is_err());
    }
}
