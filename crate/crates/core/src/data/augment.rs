//! Training-time augmentation on planar `[0, 1]` images:
//! zero padding, horizontal flip, random crop back to 32x32, random erasing
//! and per-channel normalization, in that order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CHANNELS, SIDE};

pub const NORM_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const NORM_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub pad: usize,
    pub flip_p: f64,
    /// Random crop offset; centered when false.
    pub random_crop: bool,
    pub erase_p: f64,
    /// Erased area as a fraction of the image, drawn uniformly.
    pub erase_area: (f64, f64),
    pub normalize: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            pad: 4,
            flip_p: 0.5,
            random_crop: true,
            erase_p: 0.5,
            erase_area: (0.02, 0.2),
            normalize: true,
        }
    }
}

impl AugmentConfig {
    /// Only normalization.
    pub fn eval() -> Self {
        Self {
            pad: 0,
            flip_p: 0.0,
            random_crop: false,
            erase_p: 0.0,
            erase_area: (0.0, 0.0),
            normalize: true,
        }
    }
}

/// Generator for sample `index` at `epoch`; independent of visiting order.
pub fn sample_rng(seed: u64, index: u64, epoch: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    key[16..24].copy_from_slice(&epoch.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Zero-pad every plane of a `side x side` image by `pad` pixels.
pub fn pad(image: &[f32], side: usize, pad: usize) -> Vec<f32> {
    let ps = side + 2 * pad;
    let mut out = vec![0.0; CHANNELS * ps * ps];
    for c in 0..CHANNELS {
        for y in 0..side {
            let src = &image[(c * side + y) * side..][..side];
            out[(c * ps + y + pad) * ps + pad..][..side].copy_from_slice(src);
        }
    }
    out
}

pub fn flip_horizontal(image: &mut [f32], side: usize) {
    for row in image.chunks_mut(side) {
        row.reverse();
    }
}

/// `out x out` window at `(top, left)` of a `side x side` image.
pub fn crop(image: &[f32], side: usize, out: usize, top: usize, left: usize) -> Vec<f32> {
    let mut res = Vec::with_capacity(CHANNELS * out * out);
    for c in 0..CHANNELS {
        for y in 0..out {
            res.extend_from_slice(&image[(c * side + top + y) * side + left..][..out]);
        }
    }
    res
}

/// Zero an `h x w` rectangle at `(top, left)` in every channel.
pub fn erase(image: &mut [f32], side: usize, top: usize, left: usize, h: usize, w: usize) {
    for c in 0..CHANNELS {
        for y in top..top + h {
            image[(c * side + y) * side + left..][..w].fill(0.0);
        }
    }
}

pub fn normalize(image: &mut [f32]) {
    for (c, plane) in image.chunks_mut(SIDE * SIDE).enumerate() {
        let (m, s) = (NORM_MEAN[c], NORM_STD[c]);
        plane.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
}

/// Pick an erase rectangle: area fraction uniform in `area`, aspect ratio
/// log-uniform in `[0.3, 3.3]`, up to ten attempts to fit.
fn erase_rect(rng: &mut impl Rng, area: (f64, f64)) -> Option<(usize, usize, usize, usize)> {
    let total = (SIDE * SIDE) as f64;
    for _ in 0..10 {
        let a = total * rng.gen_range(area.0..=area.1);
        let r = rng.gen_range(0.3f64.ln()..=3.3f64.ln()).exp();
        let h = (a * r).sqrt().round() as usize;
        let w = (a / r).sqrt().round() as usize;
        if h > 0 && w > 0 && h < SIDE && w < SIDE {
            let top = rng.gen_range(0..=SIDE - h);
            let left = rng.gen_range(0..=SIDE - w);
            return Some((top, left, h, w));
        }
    }
    None
}

/// Apply the configured stages to a planar 3x32x32 `[0, 1]` image.
pub fn augment(image: &[f32], cfg: &AugmentConfig, rng: &mut impl Rng) -> Vec<f32> {
    let side = SIDE + 2 * cfg.pad;
    let mut x = if cfg.pad > 0 { pad(image, SIDE, cfg.pad) } else { image.to_vec() };
    if cfg.flip_p > 0.0 && rng.gen_bool(cfg.flip_p.min(1.0)) {
        flip_horizontal(&mut x, side);
    }
    let (top, left) = if cfg.random_crop && cfg.pad > 0 {
        (rng.gen_range(0..=2 * cfg.pad), rng.gen_range(0..=2 * cfg.pad))
    } else {
        (cfg.pad, cfg.pad)
    };
    let mut x = if cfg.pad > 0 { crop(&x, side, SIDE, top, left) } else { x };
    if cfg.erase_p > 0.0 && rng.gen_bool(cfg.erase_p.min(1.0)) {
        if let Some((t, l, h, w)) = erase_rect(rng, cfg.erase_area) {
            erase(&mut x, SIDE, t, l, h, w);
        }
    }
    if cfg.normalize {
        normalize(&mut x);
    }
    x
}
