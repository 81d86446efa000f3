//! Synthetic bi-temporal change pairs.
//!
//! Each pair shares a smooth random texture background. A few shapes appear in
//! both frames (unchanged objects); one to three shapes are inserted into or
//! removed from the second frame. The second frame also gets a global brightness
//! shift and fresh sensor noise, so raw pixel differences are not a perfect cue.
//! The mask is exactly the set of pixels whose object content differs.
//!
//! Fixed constants: shapes are axis-aligned rectangles (sides 10–26 px), discs
//! (radius 6–13 px) and triangles (bounding box 14–28 px), scaled by
//! `image_size / 64`; background texture amplitude 0.08, per-pixel noise σ 0.03,
//! brightness shift ±0.05; 10 % of pairs contain no change.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::dataset::save_sample;
use crate::data::grid::{Grid, RgbImage};
use crate::data::sample::BiTemporalSample;
use crate::error::{Error, Result};

pub const TEXTURE_AMPLITUDE: f32 = 0.08;
pub const NOISE_STD: f32 = 0.03;
pub const BRIGHTNESS_SHIFT: f32 = 0.05;
pub const NO_CHANGE_FRACTION: f64 = 0.1;
pub const TEST_FRACTION_DENOM: usize = 5;

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { r0: f32, c0: f32, r1: f32, c1: f32 },
    Disc { r: f32, c: f32, radius: f32 },
    Triangle { pts: [(f32, f32); 3] },
}

impl Shape {
    fn random<R: Rng>(rng: &mut R, size: usize) -> Self {
        let s = size as f32 / 64.0;
        let n = size as f32;
        match rng.gen_range(0..3) {
            0 => {
                let h = rng.gen_range(10.0..=26.0) * s;
                let w = rng.gen_range(10.0..=26.0) * s;
                let r0 = rng.gen_range(0.0..(n - h));
                let c0 = rng.gen_range(0.0..(n - w));
                Shape::Rect { r0, c0, r1: r0 + h, c1: c0 + w }
            }
            1 => {
                let radius = rng.gen_range(6.0..=13.0) * s;
                Shape::Disc {
                    r: rng.gen_range(radius..(n - radius)),
                    c: rng.gen_range(radius..(n - radius)),
                    radius,
                }
            }
            _ => {
                let bh = rng.gen_range(14.0..=28.0) * s;
                let bw = rng.gen_range(14.0..=28.0) * s;
                let r0 = rng.gen_range(0.0..(n - bh));
                let c0 = rng.gen_range(0.0..(n - bw));
                let apex = c0 + rng.gen_range(0.0..=bw);
                Shape::Triangle { pts: [(r0, apex), (r0 + bh, c0), (r0 + bh, c0 + bw)] }
            }
        }
    }

    /// Pixel-centre containment test.
    fn contains(&self, row: usize, col: usize) -> bool {
        let (y, x) = (row as f32 + 0.5, col as f32 + 0.5);
        match *self {
            Shape::Rect { r0, c0, r1, c1 } => y >= r0 && y < r1 && x >= c0 && x < c1,
            Shape::Disc { r, c, radius } => (y - r).powi(2) + (x - c).powi(2) <= radius * radius,
            Shape::Triangle { pts } => {
                let sign = |a: (f32, f32), b: (f32, f32)| (x - b.1) * (a.0 - b.0) - (a.1 - b.1) * (y - b.0);
                let d1 = sign(pts[0], pts[1]);
                let d2 = sign(pts[1], pts[2]);
                let d3 = sign(pts[2], pts[0]);
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Object {
    shape: Shape,
    color: [f32; 3],
}

fn random_color<R: Rng>(rng: &mut R) -> [f32; 3] {
    [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]
}

struct Texture {
    base: [f32; 3],
    waves: Vec<([f32; 3], f32, f32, f32)>,
}

impl Texture {
    fn random<R: Rng>(rng: &mut R, size: usize) -> Self {
        let base = [rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75)];
        let waves = (0..3)
            .map(|_| {
                let amp = [
                    rng.gen_range(-1.0..1.0f32),
                    rng.gen_range(-1.0..1.0f32),
                    rng.gen_range(-1.0..1.0f32),
                ];
                let fy = rng.gen_range(0.5..3.0) * std::f32::consts::TAU / size as f32;
                let fx = rng.gen_range(0.5..3.0) * std::f32::consts::TAU / size as f32;
                (amp, fy, fx, rng.gen_range(0.0..std::f32::consts::TAU))
            })
            .collect();
        Self { base, waves }
    }

    fn at(&self, r: usize, c: usize) -> [f32; 3] {
        let mut px = self.base;
        for (amp, fy, fx, phase) in &self.waves {
            let v = (fy * r as f32 + fx * c as f32 + phase).sin() * TEXTURE_AMPLITUDE;
            for ch in 0..3 {
                px[ch] += amp[ch] * v;
            }
        }
        px
    }
}

/// Renders one frame; returns the image and the per-pixel object index (0 = background).
fn render<R: Rng>(
    rng: &mut R,
    size: usize,
    texture: &Texture,
    objects: &[(usize, Object)],
    brightness: f32,
) -> (RgbImage, Grid<usize>) {
    let mut img = RgbImage::zeros(size, size);
    let mut ids = Grid::filled(size, size, 0usize);
    for r in 0..size {
        for c in 0..size {
            let mut px = texture.at(r, c);
            for &(id, obj) in objects {
                if obj.shape.contains(r, c) {
                    px = obj.color;
                    ids.set(r, c, id);
                }
            }
            for v in px.iter_mut() {
                let noise: f32 = rng.sample::<f32, _>(StandardNormal) * NOISE_STD;
                *v = (*v + brightness + noise).clamp(0.0, 1.0);
            }
            // quantize so that a write/read round trip is lossless
            img.set_pixel(r, c, px.map(|v| (v * 255.0).round() / 255.0));
        }
    }
    (img, ids)
}

/// Generates one change pair with the given id.
pub fn synth_sample<R: Rng>(rng: &mut R, id: &str, size: usize) -> BiTemporalSample {
    let texture = Texture::random(rng, size);
    let n_static = rng.gen_range(0..=2);
    let n_changes = if rng.gen_bool(NO_CHANGE_FRACTION) { 0 } else { rng.gen_range(1..=3) };
    let mut next_id = 1;
    let mut t1_objects = Vec::new();
    let mut t2_objects = Vec::new();
    for _ in 0..n_static {
        let obj = Object { shape: Shape::random(rng, size), color: random_color(rng) };
        t1_objects.push((next_id, obj));
        t2_objects.push((next_id, obj));
        next_id += 1;
    }
    for _ in 0..n_changes {
        let obj = Object { shape: Shape::random(rng, size), color: random_color(rng) };
        if rng.gen_bool(0.5) {
            t2_objects.push((next_id, obj));
        } else {
            t1_objects.push((next_id, obj));
        }
        next_id += 1;
    }
    let shift = rng.gen_range(-BRIGHTNESS_SHIFT..=BRIGHTNESS_SHIFT);
    let (t1, ids1) = render(rng, size, &texture, &t1_objects, 0.0);
    let (t2, ids2) = render(rng, size, &texture, &t2_objects, shift);
    let mask = Grid::from_fn(size, size, |r, c| u8::from(ids1.get(r, c) != ids2.get(r, c)));
    BiTemporalSample::new(id, t1, t2, Some(mask)).expect("generator produces consistent shapes")
}

/// Train/test sample counts for a generated dataset of `n` pairs.
pub fn split_sizes(n: usize) -> (usize, usize) {
    let test = n / TEST_FRACTION_DENOM;
    (n - test, test)
}

/// Generates `n` pairs (80 % `train`, 20 % `test`) into `out_dir`.
pub fn synth_dataset(out_dir: &Path, n_samples: usize, image_size: usize, seed: u64) -> Result<()> {
    if image_size == 0 || image_size % 64 != 0 {
        return Err(Error::Divisibility(format!("image size {image_size} must be a positive multiple of 64")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_train, _) = split_sizes(n_samples);
    for i in 0..n_samples {
        let (split, idx) = if i < n_train { ("train", i) } else { ("test", i - n_train) };
        let sample = synth_sample(&mut rng, &format!("{idx:05}"), image_size);
        save_sample(out_dir, split, &sample)?;
    }
    Ok(())
}

/// In-memory variant used by tests and benchmarks.
pub fn synth_samples(n_samples: usize, image_size: usize, seed: u64) -> Vec<BiTemporalSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_samples).map(|i| synth_sample(&mut rng, &format!("{i:05}"), image_size)).collect()
}
