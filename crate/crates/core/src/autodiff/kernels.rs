//! Dense kernels behind the graph ops.
//!
//! Image tensors use channel-major `[C, N, H, W]` layout so that a whole
//! batch of convolutions is one GEMM and per-channel reductions walk
//! contiguous memory.

use crate::tensor::{Element, Tensor};

/// Upper bound on the im2col scratch buffer, in elements. The batch is
/// processed in fixed-size image chunks derived only from the shapes, so the
/// accumulation order never depends on anything but the inputs.
const COLS_LIMIT: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub fn conv_output_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

impl ConvGeometry {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self, String> {
        if x.len() != 4 || w.len() != 4 {
            return Err(format!("conv2d expects rank-4 input and kernel, got {x:?} and {w:?}"));
        }
        let (channels, batch, height, width) = (x[0], x[1], x[2], x[3]);
        let (out_channels, in_channels, kernel_h, kernel_w) = (w[0], w[1], w[2], w[3]);
        if in_channels != channels {
            return Err(format!(
                "kernel expects {in_channels} input channels but input has {channels}"
            ));
        }
        let out_h = conv_output_dim(height, kernel_h, stride, pad)
            .ok_or_else(|| format!("kernel {kernel_h} does not fit height {height}"))?;
        let out_w = conv_output_dim(width, kernel_w, stride, pad)
            .ok_or_else(|| format!("kernel {kernel_w} does not fit width {width}"))?;
        Ok(Self {
            channels,
            batch,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    fn patch(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn chunk(&self) -> usize {
        let per_image = (self.patch() * self.positions()).max(1);
        (COLS_LIMIT / per_image).clamp(1, self.batch.max(1))
    }

    fn chunks(&self) -> impl Iterator<Item = (usize, usize)> {
        let step = self.chunk();
        let batch = self.batch;
        (0..batch)
            .step_by(step)
            .map(move |n0| (n0, (n0 + step).min(batch)))
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.out_channels, self.batch, self.out_h, self.out_w]
    }
}

fn im2col<T: Element>(g: &ConvGeometry, x: &[T], n0: usize, n1: usize, cols: &mut [T]) {
    let p = g.positions();
    let width = (n1 - n0) * p;
    let plane = g.height * g.width;
    for c in 0..g.channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * width..(row + 1) * width];
                for n in n0..n1 {
                    let src = &x[(c * g.batch + n) * plane..][..plane];
                    for oh in 0..g.out_h {
                        let out_row = &mut dst[((n - n0) * g.out_h + oh) * g.out_w..][..g.out_w];
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.height as isize {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src_row = &src[ih as usize * g.width..][..g.width];
                        for (ow, slot) in out_row.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            *slot = if iw < 0 || iw >= g.width as isize {
                                T::zero()
                            } else {
                                src_row[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(g: &ConvGeometry, cols: &[T], n0: usize, n1: usize, dx: &mut [T]) {
    let p = g.positions();
    let width = (n1 - n0) * p;
    let plane = g.height * g.width;
    for c in 0..g.channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * width..(row + 1) * width];
                for n in n0..n1 {
                    let dst = &mut dx[(c * g.batch + n) * plane..][..plane];
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        let in_row = &src[((n - n0) * g.out_h + oh) * g.out_w..][..g.out_w];
                        let dst_row = &mut dst[ih as usize * g.width..][..g.width];
                        for (ow, &v) in in_row.iter().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.width as isize {
                                dst_row[iw as usize] = dst_row[iw as usize] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Element>(g: &ConvGeometry, x: &[T], w: &[T]) -> Tensor<T> {
    let p = g.positions();
    let row_stride = (g.batch * p) as isize;
    let mut out = Tensor::zeros(g.output_shape());
    let mut cols = Vec::new();
    for (n0, n1) in g.chunks() {
        let width = (n1 - n0) * p;
        cols.resize(g.patch() * width, T::zero());
        im2col(g, x, n0, n1, &mut cols);
        T::gemm(
            g.out_channels,
            g.patch(),
            width,
            T::one(),
            w,
            (g.patch() as isize, 1),
            &cols,
            (width as isize, 1),
            T::zero(),
            &mut out.data_mut()[n0 * p..],
            (row_stride, 1),
        );
    }
    out
}

/// Returns `(dx, dw)`, each only when requested.
pub fn conv2d_backward<T: Element>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    dout: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let p = g.positions();
    let row_stride = (g.batch * p) as isize;
    let mut dx = need_dx.then(|| Tensor::zeros([g.channels, g.batch, g.height, g.width]));
    let mut dw = need_dw.then(|| Tensor::zeros([g.out_channels, g.channels, g.kernel_h, g.kernel_w]));
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    for (n0, n1) in g.chunks() {
        let width = (n1 - n0) * p;
        if let Some(dw) = dw.as_mut() {
            cols.resize(g.patch() * width, T::zero());
            im2col(g, x, n0, n1, &mut cols);
            T::gemm(
                g.out_channels,
                width,
                g.patch(),
                T::one(),
                &dout[n0 * p..],
                (row_stride, 1),
                &cols,
                (1, width as isize),
                T::one(),
                dw.data_mut(),
                (g.patch() as isize, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            dcols.resize(g.patch() * width, T::zero());
            T::gemm(
                g.patch(),
                g.out_channels,
                width,
                T::one(),
                w,
                (1, g.patch() as isize),
                &dout[n0 * p..],
                (row_stride, 1),
                T::zero(),
                &mut dcols,
                (width as isize, 1),
            );
            col2im_add(g, &dcols, n0, n1, dx.data_mut());
        }
    }
    (dx, dw)
}

/// 2x2 max pooling with stride 2 over the last two axes. Odd trailing
/// rows/columns are dropped. Returns the output and flat argmax indices.
pub fn max_pool2<T: Element>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>), String> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(format!("max_pool2 needs rank >= 2, got {shape:?}"));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(format!("max_pool2 input {h}x{w} too small"));
    }
    let planes: usize = shape[..shape.len() - 2].iter().product();
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    let data = x.data();
    for plane in 0..planes {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                arg.push(best as u32);
            }
        }
    }
    let mut out_shape = shape.to_vec();
    let r = out_shape.len();
    out_shape[r - 2] = oh;
    out_shape[r - 1] = ow;
    Ok((Tensor::new(out_shape, out).map_err(|e| e.to_string())?, arg))
}

/// Softmax cross-entropy averaged over the batch. Returns the loss and the
/// softmax probabilities.
pub fn softmax_cross_entropy<T: Element>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Vec<T>), String> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(format!(
            "logits {shape:?} incompatible with {} labels",
            labels.len()
        ));
    }
    let classes = shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(format!("label {bad} out of range for {classes} classes"));
    }
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = 0.0f64;
    for (n, &label) in labels.iter().enumerate() {
        let row = &logits.data()[n * classes..(n + 1) * classes];
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut denom = 0.0f64;
        for (k, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            probs[n * classes + k] = e;
            denom += e.as_f64();
        }
        let inv = T::of_f64(1.0 / denom);
        for p in &mut probs[n * classes..(n + 1) * classes] {
            *p = *p * inv;
        }
        total += denom.ln() - (row[label] - max).as_f64();
    }
    Ok((T::of_f64(total / labels.len().max(1) as f64), probs))
}

/// Sequential index-order sum with an `f64` accumulator.
pub fn ordered_sum<T: Element>(values: &[T]) -> f64 {
    values.iter().fold(0.0f64, |acc, v| acc + v.as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(
        x: &[f64],
        w: &[f64],
        c: usize,
        n: usize,
        h: usize,
        wd: usize,
        o: usize,
        k: usize,
        s: usize,
        p: usize,
    ) -> Vec<f64> {
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (wd + 2 * p - k) / s + 1;
        let mut out = vec![0.0; o * n * oh * ow];
        for oc in 0..o {
            for b in 0..n {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let ih = (i * s + ki) as isize - p as isize;
                                    let iw = (j * s + kj) as isize - p as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                        continue;
                                    }
                                    acc += x[((ic * n + b) * h + ih as usize) * wd + iw as usize]
                                        * w[((oc * c + ic) * k + ki) * k + kj];
                                }
                            }
                        }
                        out[((oc * n + b) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_summation() {
        for &(s, p) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
            let (c, n, h, wd, o, k) = (2, 3, 5, 6, 3, 3);
            let x: Vec<f64> = (0..c * n * h * wd).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
            let w: Vec<f64> = (0..o * c * k * k).map(|i| ((i * 5) % 7) as f64 * 0.25 - 0.75).collect();
            let g = ConvGeometry::new(&[c, n, h, wd], &[o, c, k, k], s, p).unwrap();
            let got = conv2d_forward(&g, &x, &w);
            let want = naive_conv(&x, &w, c, n, h, wd, o, k, s, p);
            assert_eq!(got.data(), &want[..], "stride {s} pad {p}");
        }
    }

    #[test]
    fn geometry_rejects_bad_shapes() {
        assert!(ConvGeometry::new(&[2, 1, 4, 4], &[3, 3, 3, 3], 1, 0).is_err());
        assert!(ConvGeometry::new(&[2, 1, 2, 2], &[3, 2, 3, 3], 1, 0).is_err());
        assert!(ConvGeometry::new(&[2, 1, 4], &[3, 2, 3, 3], 1, 0).is_err());
    }

    #[test]
    fn max_pool_picks_maximum() {
        let x = Tensor::<f32>::new([1, 2, 2], vec![1., 4., 3., 2.]).unwrap();
        let (y, arg) = max_pool2(&x).unwrap();
        assert_eq!(y.data(), &[4.]);
        assert_eq!(arg, vec![1]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_k() {
        let logits = Tensor::<f64>::zeros([2, 4]);
        let (loss, probs) = softmax_cross_entropy(&logits, &[0, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!(probs.iter().all(|&p| (p - 0.25).abs() < 1e-12));
        assert!(softmax_cross_entropy(&logits, &[4, 0]).is_err());
    }
}
