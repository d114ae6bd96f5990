//! Geometric augmentation applied identically to image and mask: flips,
//! quarter-turn rotations, rescaling and a crop (or reflect pad) back to size.

use cmunet_tensor::{resize_taps, ResizeMode, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::SegSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip: bool,
    pub vflip: bool,
    pub rotate: bool,
    /// Candidate scale factors, drawn uniformly.
    pub scales: Vec<f64>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { hflip: true, vflip: true, rotate: true, scales: vec![0.5, 0.75, 1.0, 1.25, 1.5] }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self { hflip: false, vflip: false, rotate: false, scales: vec![1.0] }
    }
}

/// One concrete draw of every random choice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentPlan {
    pub hflip: bool,
    pub vflip: bool,
    /// Counter-clockwise quarter turns.
    pub rot90: u8,
    pub scale: f64,
    /// Crop / pad placement in `[0, 1)` along each axis.
    pub offset: (f64, f64),
}

impl AugmentPlan {
    pub const IDENTITY: AugmentPlan = AugmentPlan { hflip: false, vflip: false, rot90: 0, scale: 1.0, offset: (0.0, 0.0) };

    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        Self {
            hflip: cfg.hflip && rng.gen(),
            vflip: cfg.vflip && rng.gen(),
            rot90: if cfg.rotate { rng.gen_range(0..4) } else { 0 },
            scale: if cfg.scales.is_empty() { 1.0 } else { cfg.scales[rng.gen_range(0..cfg.scales.len())] },
            offset: (rng.gen(), rng.gen()),
        }
    }
}

/// Gathers `c` planes of `h x w` into `h2 x w2` through `src(y, x) -> (sy, sx)`.
fn remap<T: Copy>(data: &[T], c: usize, h: usize, w: usize, h2: usize, w2: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Vec<T> {
    let mut out = Vec::with_capacity(c * h2 * w2);
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for y in 0..h2 {
            for x in 0..w2 {
                let (sy, sx) = src(y, x);
                out.push(plane[sy * w + sx]);
            }
        }
    }
    out
}

pub fn flip_h<T: Copy>(data: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    remap(data, c, h, w, h, w, |y, x| (y, w - 1 - x))
}

pub fn flip_v<T: Copy>(data: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    remap(data, c, h, w, h, w, |y, x| (h - 1 - y, x))
}

/// One counter-clockwise quarter turn; the result is `w x h`.
pub fn rot90<T: Copy>(data: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    remap(data, c, h, w, w, h, |y, x| (x, w - 1 - y))
}

/// Mirror index into `[0, n)` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Crops or reflect-pads each axis to the target size. `frac` places the window.
fn fit<T: Copy>(data: &[T], c: usize, h: usize, w: usize, size: usize, frac: (f64, f64)) -> Vec<T> {
    let start = |n: usize, f: f64| -> isize {
        if n >= size {
            ((n - size + 1) as f64 * f).floor().min((n - size) as f64) as isize
        } else {
            -(((size - n + 1) as f64 * f).floor().min((size - n) as f64) as isize)
        }
    };
    let (oy, ox) = (start(h, frac.0), start(w, frac.1));
    remap(data, c, h, w, size, size, |y, x| (reflect(oy + y as isize, h), reflect(ox + x as isize, w)))
}

/// Applies `plan` and returns a `size x size` sample.
pub fn apply_plan(sample: &SegSample, plan: &AugmentPlan, size: usize) -> SegSample {
    let (mut h, mut w) = (sample.height(), sample.width());
    let mut img = sample.image.to_vec();
    let mut mask = sample.mask.clone();
    if plan.hflip {
        img = flip_h(&img, 3, h, w);
        mask = flip_h(&mask, 1, h, w);
    }
    if plan.vflip {
        img = flip_v(&img, 3, h, w);
        mask = flip_v(&mask, 1, h, w);
    }
    for _ in 0..plan.rot90 % 4 {
        img = rot90(&img, 3, h, w);
        mask = rot90(&mask, 1, h, w);
        std::mem::swap(&mut h, &mut w);
    }
    if plan.scale != 1.0 {
        let (h2, w2) = (((h as f64 * plan.scale).round() as usize).max(1), ((w as f64 * plan.scale).round() as usize).max(1));
        img = Tensor::new(&[1, 3, h, w], img)
            .and_then(|t| t.resize(h2, w2, ResizeMode::Bilinear))
            .expect("resize of a valid image")
            .to_vec();
        let ty = resize_taps(h, h2, ResizeMode::Nearest);
        let tx = resize_taps(w, w2, ResizeMode::Nearest);
        mask = remap(&mask, 1, h, w, h2, w2, |y, x| (ty[y].0, tx[x].0));
        (h, w) = (h2, w2);
    }
    if (h, w) != (size, size) {
        img = fit(&img, 3, h, w, size, plan.offset);
        mask = fit(&mask, 1, h, w, size, plan.offset);
    }
    let image = Tensor::new(&[3, size, size], img).expect("augmented shape");
    SegSample::new(sample.id.clone(), image, mask).expect("augmented sample")
}

/// Draws a plan from `rng` and applies it.
pub fn augment<R: Rng + ?Sized>(sample: &SegSample, cfg: &AugmentConfig, size: usize, rng: &mut R) -> SegSample {
    apply_plan(sample, &AugmentPlan::sample(cfg, rng), size)
}
