//! Differentiable per-channel number format.
//!
//! A channel's weights are stored as signed integers on the grid
//! `2^e · k`, `k ∈ [-2^(b-1), 2^(b-1) - 1]`, where both the bit depth `b`
//! and the exponent `e` are real-valued and trained. Rounding uses
//! ties-to-even so that `b = 0` maps every input to exactly zero.
//!
//! Gradients use the straight-through estimator for the rounding step and
//! the exact derivative everywhere else:
//!
//! | region          | ∂q/∂x | ∂q/∂b                 | ∂q/∂e        |
//! |-----------------|-------|-----------------------|--------------|
//! | `v <= lo`       | 0     | `-ln2 · 2^(e+b-1)`    | `ln2 · q`    |
//! | `v >= hi`       | 0     | `+ln2 · 2^(e+b-1)`    | `ln2 · q`    |
//! | `lo < v < hi`   | 1     | 0                     | `ln2 · (q-x)`|
//!
//! with `v = 2^-e · x`, `lo = -2^(b-1)`, `hi = 2^(b-1) - 1`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{CustomOp, GraphError};
use crate::tensor::{Element, Tensor};

/// Largest trainable bit depth.
pub const B_MAX: f32 = 16.0;
/// Bit depth every channel starts from.
pub const B_INIT: f32 = 8.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("bit depth must be non-negative, got {0}")]
    NegativeBits(f64),
    #[error("initial bit depth {0} leaves no positive grid values")]
    InitBits(f64),
    #[error("cannot derive a format from an empty weight slice")]
    EmptySlice,
    #[error("upstream shape {upstream:?} differs from input shape {input:?}")]
    Shape {
        upstream: Vec<usize>,
        input: Vec<usize>,
    },
}

/// Per-channel `(b, e)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantFormat {
    pub bits: f32,
    pub exponent: f32,
}

/// Integer range `[lo, hi]` of the grid for bit depth `b`.
#[inline]
pub fn grid_bounds<T: Element>(bits: T) -> (T, T) {
    let half = (bits - T::one()).exp2();
    (-half, half - T::one())
}

/// Precomputed per-channel constants.
#[derive(Clone, Copy)]
struct Grid<T> {
    scale: T,
    inv_scale: T,
    lo: T,
    hi: T,
    half: T,
}

impl<T: Element> Grid<T> {
    fn new(bits: T, exponent: T) -> Self {
        let (lo, hi) = grid_bounds(bits);
        Self {
            scale: exponent.exp2(),
            inv_scale: (-exponent).exp2(),
            lo,
            hi,
            half: -lo,
        }
    }

    #[inline]
    fn forward(&self, x: T) -> T {
        self.scale * (x * self.inv_scale).max(self.lo).min(self.hi).round_even()
    }

    /// `(q, dq/dx, dq/db, dq/de)` for one element.
    #[inline]
    fn partials(&self, x: T) -> (T, T, T, T) {
        let v = x * self.inv_scale;
        let db_mag = self.scale * T::LN_2 * self.half;
        if v <= self.lo {
            let q = self.scale * self.lo.round_even();
            (q, T::zero(), -db_mag, T::LN_2 * q)
        } else if v >= self.hi {
            let q = self.scale * self.hi.round_even();
            (q, T::zero(), db_mag, T::LN_2 * q)
        } else {
            let q = self.scale * v.round_even();
            (q, T::one(), T::zero(), T::LN_2 * (q - x))
        }
    }
}

fn check_bits<T: Element>(bits: T) -> Result<(), QuantError> {
    if bits < T::zero() || bits.is_nan() {
        return Err(QuantError::NegativeBits(bits.as_f64()));
    }
    Ok(())
}

/// Scalar quantization `2^e · round(clamp(2^-e · x, lo, hi))`.
pub fn quantize_value<T: Element>(x: T, bits: T, exponent: T) -> Result<T, QuantError> {
    check_bits(bits)?;
    Ok(Grid::new(bits, exponent).forward(x))
}

/// Quantize every element of `x` with a single `(b, e)`.
pub fn quantize<T: Element>(x: &Tensor<T>, bits: T, exponent: T) -> Result<Tensor<T>, QuantError> {
    check_bits(bits)?;
    let grid = Grid::new(bits, exponent);
    Ok(x.map(|v| grid.forward(v)))
}

/// Straight-through gradients of [`quantize`]; the `b` and `e` gradients
/// are summed over all elements.
pub fn quantize_backward<T: Element>(
    upstream: &Tensor<T>,
    x: &Tensor<T>,
    bits: T,
    exponent: T,
) -> Result<(Tensor<T>, T, T), QuantError> {
    check_bits(bits)?;
    if upstream.shape() != x.shape() {
        return Err(QuantError::Shape {
            upstream: upstream.shape().to_vec(),
            input: x.shape().to_vec(),
        });
    }
    let grid = Grid::new(bits, exponent);
    let (dx, db, de) = slice_backward(&grid, upstream.data(), x.data());
    let dx = Tensor::new(x.shape().to_vec(), dx).expect("same shape");
    Ok((dx, T::of_f64(db), T::of_f64(de)))
}

fn slice_backward<T: Element>(grid: &Grid<T>, upstream: &[T], x: &[T]) -> (Vec<T>, f64, f64) {
    let mut dx = Vec::with_capacity(x.len());
    let (mut db, mut de) = (0.0f64, 0.0f64);
    for (&u, &v) in upstream.iter().zip(x) {
        let (_, px, pb, pe) = grid.partials(v);
        dx.push(u * px);
        db += (u * pb).as_f64();
        de += (u * pe).as_f64();
    }
    (dx, db, de)
}

/// Initial format for a weight slice: `b = b_init` and the smallest
/// integer `e` whose grid covers `max |w|` (`e = 0` for an all-zero slice).
pub fn init_format(weights: &[f32], b_init: f32) -> Result<QuantFormat, QuantError> {
    if weights.is_empty() {
        return Err(QuantError::EmptySlice);
    }
    if !(b_init > 1.0) {
        return Err(QuantError::InitBits(b_init as f64));
    }
    let top = (b_init as f64 - 1.0).exp2() - 1.0;
    let max = weights.iter().fold(0.0f64, |m, w| m.max((*w as f64).abs()));
    if max == 0.0 {
        return Ok(QuantFormat {
            bits: b_init,
            exponent: 0.0,
        });
    }
    let mut e = (max / top).log2().ceil();
    // log2 can land one off near exact powers of two.
    while max > e.exp2() * top {
        e += 1.0;
    }
    while max <= (e - 1.0).exp2() * top {
        e -= 1.0;
    }
    Ok(QuantFormat {
        bits: b_init,
        exponent: e as f32,
    })
}

/// Fused per-output-channel quantizer: inputs `[w, bits, exponents]` with
/// `w` shaped `[O, ...]` and one `(b, e)` per row.
pub struct ChannelQuantizer;

impl ChannelQuantizer {
    fn check<T: Element>(inputs: &[&Tensor<T>]) -> Result<usize, GraphError> {
        let [w, b, e] = inputs else {
            return Err(GraphError::Invalid {
                op: "quantize_channels",
                detail: format!("expected 3 inputs, got {}", inputs.len()),
            });
        };
        if w.rank() == 0 || b.shape() != [w.dim(0)] || e.shape() != [w.dim(0)] {
            return Err(GraphError::Shape {
                op: "quantize_channels",
                detail: format!("weights {:?}, bits {:?}, exponents {:?}", w.shape(), b.shape(), e.shape()),
            });
        }
        if let Some(bad) = b.data().iter().find(|v| !(**v >= T::zero())) {
            return Err(GraphError::Invalid {
                op: "quantize_channels",
                detail: format!("negative bit depth {bad}"),
            });
        }
        Ok(w.len() / w.dim(0).max(1))
    }
}

impl<T: Element> CustomOp<T> for ChannelQuantizer {
    fn name(&self) -> &'static str {
        "quantize_channels"
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, GraphError> {
        let per = Self::check(inputs)?;
        let (w, b, e) = (inputs[0], inputs[1], inputs[2]);
        let mut out = Vec::with_capacity(w.len());
        for (row, (&bits, &exp)) in w.data().chunks(per.max(1)).zip(b.data().iter().zip(e.data())) {
            let grid = Grid::new(bits, exp);
            out.extend(row.iter().map(|&x| grid.forward(x)));
        }
        Ok(Tensor::new(w.shape().to_vec(), out).expect("same shape"))
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        upstream: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>, GraphError> {
        let per = Self::check(inputs)?.max(1);
        let (w, b, e) = (inputs[0], inputs[1], inputs[2]);
        let mut dw = Vec::with_capacity(w.len());
        let mut db = Vec::with_capacity(b.len());
        let mut de = Vec::with_capacity(e.len());
        for (ch, (row, up)) in w.data().chunks(per).zip(upstream.data().chunks(per)).enumerate() {
            let grid = Grid::new(b.data()[ch], e.data()[ch]);
            let (dx, gb, ge) = slice_backward(&grid, up, row);
            dw.extend(dx);
            db.push(T::of_f64(gb));
            de.push(T::of_f64(ge));
        }
        Ok(vec![
            Some(Tensor::new(w.shape().to_vec(), dw).expect("same shape")),
            Some(Tensor::from_vec(db)),
            Some(Tensor::from_vec(de)),
        ])
    }
}
