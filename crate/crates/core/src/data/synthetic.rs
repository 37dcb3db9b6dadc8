//! Small generated image sets for fast runs.
//!
//! `two-gaussians-images`: two classes, every pixel drawn independently from
//! N(0.3, 0.1²) or N(0.7, 0.1²).
//!
//! `striped-patterns`: ten classes, sinusoidal stripes that vary along rows
//! or along columns at one of five frequencies, with random phase, random
//! per-channel contrast and pixel noise. Flips and crops keep the class.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DataError, Dataset, CHANNELS, IMAGE_BYTES, SIDE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    TwoGaussians,
    StripedPatterns,
}

impl SyntheticKind {
    pub fn classes(self) -> usize {
        match self {
            SyntheticKind::TwoGaussians => 2,
            SyntheticKind::StripedPatterns => 10,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SyntheticKind::TwoGaussians => "two-gaussians-images",
            SyntheticKind::StripedPatterns => "striped-patterns",
        }
    }
}

impl FromStr for SyntheticKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "two-gaussians-images" => Ok(Self::TwoGaussians),
            "striped-patterns" => Ok(Self::StripedPatterns),
            other => Err(DataError::Unknown(other.to_string())),
        }
    }
}

const FREQUENCIES: [f32; 5] = [1.0, 2.0, 3.0, 5.0, 8.0];

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// `n` examples with labels cycling through the classes.
pub fn synthetic_dataset(kind: SyntheticKind, n: usize, seed: u64) -> Result<Dataset, DataError> {
    if n == 0 {
        return Err(DataError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = kind.classes();
    let mut pixels = Vec::with_capacity(n * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(n);
    let noise = Normal::new(0.0f32, 0.1).expect("valid deviation");
    for i in 0..n {
        let label = i % classes;
        labels.push(label as u8);
        match kind {
            SyntheticKind::TwoGaussians => {
                let mean = if label == 0 { 0.3 } else { 0.7 };
                pixels.extend((0..IMAGE_BYTES).map(|_| to_byte(mean + noise.sample(&mut rng))));
            }
            SyntheticKind::StripedPatterns => {
                let along_rows = label < 5;
                let freq = FREQUENCIES[label % 5];
                let phase = rng.gen_range(0.0..std::f32::consts::TAU);
                for _ in 0..CHANNELS {
                    let amp = rng.gen_range(0.2f32..0.4);
                    for y in 0..SIDE {
                        for x in 0..SIDE {
                            let t = if along_rows { y } else { x } as f32;
                            let v = 0.5
                                + amp * (std::f32::consts::TAU * freq * t / SIDE as f32 + phase).sin()
                                + 0.5 * noise.sample(&mut rng);
                            pixels.push(to_byte(v));
                        }
                    }
                }
            }
        }
    }
    Dataset::new(pixels, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = synthetic_dataset(SyntheticKind::TwoGaussians, 1000, 5).unwrap();
        let b = synthetic_dataset(SyntheticKind::TwoGaussians, 1000, 5).unwrap();
        assert_eq!(a, b);
        let c = synthetic_dataset(SyntheticKind::TwoGaussians, 1000, 6).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.labels(), c.labels());
        assert_eq!(a.labels().iter().filter(|&&l| l == 0).count(), 500);
    }

    #[test]
    fn gaussian_class_means_are_apart() {
        let d = synthetic_dataset(SyntheticKind::TwoGaussians, 20, 1).unwrap();
        for i in 0..d.len() {
            let m: f32 = d.image(i).iter().sum::<f32>() / IMAGE_BYTES as f32;
            let want = if d.label(i) == 0 { 0.3 } else { 0.7 };
            assert!((m - want).abs() < 0.02, "{m}");
        }
    }

    #[test]
    fn stripes_are_flip_invariant_in_class_structure() {
        let d = synthetic_dataset(SyntheticKind::StripedPatterns, 10, 2).unwrap();
        assert_eq!(d.classes(), 10);
        // Row-varying stripes are constant along each row up to noise.
        let img = d.image(0);
        let row: Vec<f32> = img[..SIDE].to_vec();
        let spread = row.iter().cloned().fold(f32::MIN, f32::max) - row.iter().cloned().fold(f32::MAX, f32::min);
        assert!(spread < 0.5);
    }

    #[test]
    fn zero_examples_rejected() {
        assert!(matches!(
            synthetic_dataset(SyntheticKind::StripedPatterns, 0, 0),
            Err(DataError::Empty)
        ));
        assert!("nope".parse::<SyntheticKind>().is_err());
    }
}
