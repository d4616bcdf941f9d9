use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SegmentationSample;
use crate::error::{Error, Result};
use crate::seed::derive_seed;

const SUPERSAMPLE: usize = 4;
const MIN_FOREGROUND: f64 = 0.05;
const MAX_FOREGROUND: f64 = 0.40;
const MAX_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, Copy)]
enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, angle: f64 },
    Rect { cy: f64, cx: f64, hy: f64, hx: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx, angle } => {
                let (s, c) = angle.sin_cos();
                let (dy, dx) = (y - cy, x - cx);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Rect { cy, cx, hy, hx } => (y - cy).abs() <= hy && (x - cx).abs() <= hx,
        }
    }

    fn random<R: Rng>(rng: &mut R, size: f64) -> Shape {
        let cy = rng.random_range(0.2..0.8) * size;
        let cx = rng.random_range(0.2..0.8) * size;
        let a = rng.random_range(0.08..0.22) * size;
        let b = rng.random_range(0.08..0.22) * size;
        if rng.random_bool(0.5) {
            Shape::Ellipse { cy, cx, ry: a, rx: b, angle: rng.random_range(0.0..std::f64::consts::PI) }
        } else {
            Shape::Rect { cy, cx, hy: a * 0.85, hx: b * 0.85 }
        }
    }
}

/// Per-class fill color; foreground classes are brighter than the background and distinct per channel.
fn class_color(class: usize, label_classes: usize, channel: usize) -> f64 {
    let t = class as f64 / (label_classes - 1).max(1) as f64;
    let phase = channel as f64 * 2.1 + class as f64 * 1.3;
    (0.55 + 0.35 * t + 0.08 * phase.sin()).clamp(0.0, 1.0)
}

/// `count` reproducible images of anti-aliased shapes over textured noise.
///
/// Labels run over `0..max(num_classes, 2)`; each foreground class gets one
/// or two shapes, later shapes painting over earlier ones. Layouts whose
/// foreground covers less than 5% or more than 40% of the image are redrawn.
pub fn generate_synthetic(count: usize, size: usize, num_classes: usize, seed: u64) -> Result<Vec<SegmentationSample>> {
    if size == 0 || !size.is_multiple_of(16) {
        return Err(Error::Config(format!("synthetic size {size} must be a positive multiple of 16")));
    }
    if num_classes == 0 || num_classes > 255 {
        return Err(Error::Config(format!("num_classes {num_classes} outside 1..=255")));
    }
    let label_classes = num_classes.max(2);
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
            generate_one(&mut rng, format!("synth_{i:05}"), size, label_classes)
        })
        .collect()
}

fn generate_one(rng: &mut ChaCha8Rng, id: String, size: usize, label_classes: usize) -> Result<SegmentationSample> {
    let s = size as f64;
    for _ in 0..MAX_ATTEMPTS {
        let mut shapes: Vec<(usize, Shape)> = Vec::new();
        for class in 1..label_classes {
            for _ in 0..rng.random_range(1..=2) {
                shapes.push((class, Shape::random(rng, s)));
            }
        }
        let label_at = |y: f64, x: f64| shapes.iter().rev().find(|(_, sh)| sh.contains(y, x)).map_or(0, |(c, _)| *c);
        let mask: Vec<u8> =
            (0..size * size).map(|p| label_at((p / size) as f64 + 0.5, (p % size) as f64 + 0.5) as u8).collect();
        let fraction = mask.iter().filter(|&&l| l != 0).count() as f64 / (size * size) as f64;
        if !(MIN_FOREGROUND..=MAX_FOREGROUND).contains(&fraction) {
            continue;
        }
        let image = render(rng, size, label_classes, &label_at);
        return Ok(SegmentationSample { id, channels: 3, height: size, width: size, image, mask });
    }
    Err(Error::Data(format!("{id}: no layout within the foreground bounds")))
}

fn render(rng: &mut ChaCha8Rng, size: usize, label_classes: usize, label_at: &dyn Fn(f64, f64) -> usize) -> Vec<f32> {
    let hw = size * size;
    let (fy, fx) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
    let (py, px) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
    let mut image = vec![0f32; 3 * hw];
    let step = 1.0 / SUPERSAMPLE as f64;
    for p in 0..hw {
        let (y, x) = ((p / size) as f64, (p % size) as f64);
        let mut coverage = vec![0.0f64; label_classes];
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let l = label_at(y + (sy as f64 + 0.5) * step, x + (sx as f64 + 0.5) * step);
                coverage[l] += step * step;
            }
        }
        let wave = 0.06 * ((y / size as f64 * fy * 6.3 + py).sin() + (x / size as f64 * fx * 6.3 + px).cos());
        for c in 0..3 {
            let background = 0.25 + wave + rng.random_range(-0.06..0.06);
            let mut v = coverage[0] * background;
            for (class, &cov) in coverage.iter().enumerate().skip(1) {
                v += cov * (class_color(class, label_classes, c) + rng.random_range(-0.04..0.04));
            }
            image[c * hw + p] = v.clamp(0.0, 1.0) as f32;
        }
    }
    image
}
