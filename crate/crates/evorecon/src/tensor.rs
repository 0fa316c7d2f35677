//! Dense NHWC tensors and the raw differentiable ops the graph executor
//! dispatches to: same-padded stride-1 convolution, 2x2 pooling,
//! nearest-neighbor upsampling, channel concat, elementwise add, ReLU, and
//! the mean-squared-error loss.
//!
//! Element type is generic over [`Scalar`] (f32 for speed, f64 for the
//! gradient and oracle tests). Every op is pure and its accumulation order
//! is fixed, so results are bit-reproducible run to run.

use std::fmt;
use std::iter::Sum;

use num_traits::Float;
use thiserror::Error;

/// Element types the engine computes with.
pub trait Scalar:
    Float + Sum<Self> + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    /// Dtype code used by the tensor file format.
    const DTYPE: u8;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: u8 = 1;

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: u8 = 2;

    fn from_f64(x: f64) -> Self {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dims {dims:?} do not match {len} elements")]
    BadLength { dims: [usize; 4], len: usize },
}

/// Dense 4-D array in (batch, height, width, channels) order.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Tensor {
            dims: [n, h, w, c],
            data: vec![T::zero(); n * h * w * c],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self, TensorError> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(TensorError::BadLength {
                dims,
                len: data.len(),
            });
        }
        Ok(Tensor { dims, data })
    }

    pub fn filled(dims: [usize; 4], value: T) -> Self {
        Tensor {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn height(&self) -> usize {
        self.dims[1]
    }

    pub fn width(&self) -> usize {
        self.dims[2]
    }

    pub fn channels(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, y: usize, x: usize) -> usize {
        ((n * self.dims[1] + y) * self.dims[2] + x) * self.dims[3]
    }

    #[inline]
    pub fn get(&self, n: usize, y: usize, x: usize, c: usize) -> T {
        self.data[self.offset(n, y, x) + c]
    }

    #[inline]
    pub fn set(&mut self, n: usize, y: usize, x: usize, c: usize, v: T) {
        let i = self.offset(n, y, x) + c;
        self.data[i] = v;
    }

    /// Channel row at a (batch, y, x) position.
    #[inline]
    pub fn pixel(&self, n: usize, y: usize, x: usize) -> &[T] {
        let o = self.offset(n, y, x);
        &self.data[o..o + self.dims[3]]
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        self.map(|v| v.to_f64())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.dims)
    }
}

#[inline]
fn debug_check_finite<T: Scalar>(t: &Tensor<T>, op: &str) {
    #[cfg(debug_assertions)]
    {
        debug_assert!(t.all_finite(), "{op} produced a non-finite value");
    }
    #[cfg(not(debug_assertions))]
    {
        let _ = (t, op);
    }
}

/// Same-padded stride-1 2-D convolution. Weights are laid out
/// (K_h, K_w, C_in, C_out) and kernels must have odd extents.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &[T]) -> Result<Tensor<T>, TensorError> {
    let [n, h, wd, c_in] = x.dims();
    let [kh, kw, wc_in, c_out] = w.dims();
    if wc_in != c_in {
        return Err(TensorError::ShapeMismatch(format!(
            "conv weights expect {wc_in} input channels, tensor has {c_in}"
        )));
    }
    if b.len() != c_out {
        return Err(TensorError::ShapeMismatch(format!(
            "bias length {} != {c_out} output channels",
            b.len()
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(TensorError::ShapeMismatch(format!(
            "kernel extents must be odd, got {kh}x{kw}"
        )));
    }
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = Tensor::zeros(n, h, wd, c_out);
    let wdat = w.as_slice();
    let mut acc = vec![T::zero(); c_out];
    for bn in 0..n {
        for y in 0..h {
            for xx in 0..wd {
                acc.copy_from_slice(b);
                for ky in 0..kh {
                    let sy = (y + ky).wrapping_sub(ph);
                    if sy >= h {
                        continue;
                    }
                    for kx in 0..kw {
                        let sx = (xx + kx).wrapping_sub(pw);
                        if sx >= wd {
                            continue;
                        }
                        let src = x.pixel(bn, sy, sx);
                        let wbase = ((ky * kw) + kx) * c_in * c_out;
                        for (ci, &s) in src.iter().enumerate() {
                            let wrow = &wdat[wbase + ci * c_out..wbase + (ci + 1) * c_out];
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a = *a + s * wv;
                            }
                        }
                    }
                }
                let o = out.offset(bn, y, xx);
                out.as_mut_slice()[o..o + c_out].copy_from_slice(&acc);
            }
        }
    }
    debug_check_finite(&out, "conv2d");
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weights, and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let [n, h, wd, c_in] = x.dims();
    let [kh, kw, _, c_out] = w.dims();
    let (ph, pw) = (kh / 2, kw / 2);

    // Transposed weight copy (ky, kx, c_out, c_in) so the dx inner loop is
    // contiguous over c_in.
    let mut wt = vec![T::zero(); kh * kw * c_out * c_in];
    let wdat = w.as_slice();
    for ky in 0..kh {
        for kx in 0..kw {
            let base = ((ky * kw) + kx) * c_in * c_out;
            let tbase = ((ky * kw) + kx) * c_out * c_in;
            for ci in 0..c_in {
                for co in 0..c_out {
                    wt[tbase + co * c_in + ci] = wdat[base + ci * c_out + co];
                }
            }
        }
    }

    let mut dx = Tensor::zeros(n, h, wd, c_in);
    let mut dw = Tensor::zeros(kh, kw, c_in, c_out);
    let mut db = vec![T::zero(); c_out];

    for bn in 0..n {
        for y in 0..h {
            for xx in 0..wd {
                let o_g = dout.offset(bn, y, xx);
                for ky in 0..kh {
                    let sy = (y + ky).wrapping_sub(ph);
                    if sy >= h {
                        continue;
                    }
                    for kx in 0..kw {
                        let sx = (xx + kx).wrapping_sub(pw);
                        if sx >= wd {
                            continue;
                        }
                        let koff = (ky * kw) + kx;
                        // dx[sy, sx, :] += g . w^T
                        {
                            let o = dx.offset(bn, sy, sx);
                            let drow = &mut dx.as_mut_slice()[o..o + c_in];
                            let tbase = koff * c_out * c_in;
                            for co in 0..c_out {
                                let gv = dout.as_slice()[o_g + co];
                                let wrow = &wt[tbase + co * c_in..tbase + (co + 1) * c_in];
                                for (d, &wv) in drow.iter_mut().zip(wrow) {
                                    *d = *d + gv * wv;
                                }
                            }
                        }
                        // dw[ky, kx, ci, :] += x[sy, sx, ci] * g
                        {
                            let g = &dout.as_slice()[o_g..o_g + c_out];
                            let xo = x.offset(bn, sy, sx);
                            let base = koff * c_in * c_out;
                            let dwd = dw.as_mut_slice();
                            for ci in 0..c_in {
                                let s = x.as_slice()[xo + ci];
                                let wrow = &mut dwd[base + ci * c_out..base + (ci + 1) * c_out];
                                for (d, &gv) in wrow.iter_mut().zip(g) {
                                    *d = *d + s * gv;
                                }
                            }
                        }
                    }
                }
                let g = &dout.as_slice()[o_g..o_g + c_out];
                for (d, &gv) in db.iter_mut().zip(g) {
                    *d = *d + gv;
                }
            }
        }
    }
    (dx, dw, db)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// 2x2 window, stride-2 pooling. Requires even spatial dims.
pub fn pool2<T: Scalar>(x: &Tensor<T>, kind: PoolKind) -> Result<Tensor<T>, TensorError> {
    let [n, h, w, c] = x.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::ShapeMismatch(format!(
            "pooling requires even spatial dims, got {h}x{w}"
        )));
    }
    let quarter = T::from_f64(0.25);
    let mut out = Tensor::zeros(n, h / 2, w / 2, c);
    for bn in 0..n {
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                let o = out.offset(bn, oy, ox);
                for ch in 0..c {
                    let v00 = x.get(bn, 2 * oy, 2 * ox, ch);
                    let v01 = x.get(bn, 2 * oy, 2 * ox + 1, ch);
                    let v10 = x.get(bn, 2 * oy + 1, 2 * ox, ch);
                    let v11 = x.get(bn, 2 * oy + 1, 2 * ox + 1, ch);
                    let v = match kind {
                        PoolKind::Max => v00.max(v01).max(v10).max(v11),
                        PoolKind::Avg => (v00 + v01 + v10 + v11) * quarter,
                    };
                    out.as_mut_slice()[o + ch] = v;
                }
            }
        }
    }
    debug_check_finite(&out, "pool2");
    Ok(out)
}

/// Backward of [`pool2`]. Max routes the gradient to the first maximal
/// element in row-major window order; Avg spreads it evenly.
pub fn pool2_backward<T: Scalar>(x: &Tensor<T>, kind: PoolKind, dout: &Tensor<T>) -> Tensor<T> {
    let [n, h, w, c] = x.dims();
    let quarter = T::from_f64(0.25);
    let mut dx = Tensor::zeros(n, h, w, c);
    for bn in 0..n {
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                for ch in 0..c {
                    let g = dout.get(bn, oy, ox, ch);
                    match kind {
                        PoolKind::Avg => {
                            let gq = g * quarter;
                            for (dy, dxx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let i = dx.offset(bn, 2 * oy + dy, 2 * ox + dxx) + ch;
                                dx.as_mut_slice()[i] = dx.as_mut_slice()[i] + gq;
                            }
                        }
                        PoolKind::Max => {
                            let mut best = (0usize, 0usize);
                            let mut best_v = x.get(bn, 2 * oy, 2 * ox, ch);
                            for (dy, dxx) in [(0, 1), (1, 0), (1, 1)] {
                                let v = x.get(bn, 2 * oy + dy, 2 * ox + dxx, ch);
                                if v > best_v {
                                    best_v = v;
                                    best = (dy, dxx);
                                }
                            }
                            let i = dx.offset(bn, 2 * oy + best.0, 2 * ox + best.1) + ch;
                            dx.as_mut_slice()[i] = dx.as_mut_slice()[i] + g;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Nearest-neighbor 2x upsampling in both spatial dims.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, h, w, c] = x.dims();
    let mut out = Tensor::zeros(n, 2 * h, 2 * w, c);
    for bn in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let src = x.pixel(bn, y, xx);
                for (dy, dxx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let o = out.offset(bn, 2 * y + dy, 2 * xx + dxx);
                    out.as_mut_slice()[o..o + c].copy_from_slice(src);
                }
            }
        }
    }
    out
}

/// Backward of [`upsample2`]: each source pixel collects the 2x2 block sum
/// of the upstream gradient.
pub fn upsample2_backward<T: Scalar>(dout: &Tensor<T>) -> Tensor<T> {
    let [n, h2, w2, c] = dout.dims();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(n, h, w, c);
    for bn in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let o = dx.offset(bn, y, xx);
                for (dy, dxx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let src = dout.pixel(bn, 2 * y + dy, 2 * xx + dxx);
                    let row = &mut dx.as_mut_slice()[o..o + c];
                    for (d, &g) in row.iter_mut().zip(src) {
                        *d = *d + g;
                    }
                }
            }
        }
    }
    dx
}

/// Channel-axis concatenation. Inputs must agree on batch and spatial dims.
pub fn concat<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>, TensorError> {
    let first = xs
        .first()
        .ok_or_else(|| TensorError::ShapeMismatch("concat of zero tensors".to_string()))?;
    let [n, h, w, _] = first.dims();
    let mut c_total = 0;
    for t in xs {
        let [tn, th, tw, tc] = t.dims();
        if (tn, th, tw) != (n, h, w) {
            return Err(TensorError::ShapeMismatch(format!(
                "concat spatial mismatch: {:?} vs {:?}",
                first.dims(),
                t.dims()
            )));
        }
        c_total += tc;
    }
    let mut out = Tensor::zeros(n, h, w, c_total);
    for bn in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let o = out.offset(bn, y, xx);
                let mut at = 0;
                for t in xs {
                    let src = t.pixel(bn, y, xx);
                    out.as_mut_slice()[o + at..o + at + src.len()].copy_from_slice(src);
                    at += src.len();
                }
            }
        }
    }
    Ok(out)
}

/// Split the upstream gradient of a concat back into per-input gradients.
pub fn concat_backward<T: Scalar>(dout: &Tensor<T>, channel_counts: &[usize]) -> Vec<Tensor<T>> {
    let [n, h, w, _] = dout.dims();
    let mut outs: Vec<Tensor<T>> = channel_counts
        .iter()
        .map(|&c| Tensor::zeros(n, h, w, c))
        .collect();
    for bn in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let src = dout.pixel(bn, y, xx);
                let mut at = 0;
                for (t, &c) in outs.iter_mut().zip(channel_counts) {
                    let o = t.offset(bn, y, xx);
                    t.as_mut_slice()[o..o + c].copy_from_slice(&src[at..at + c]);
                    at += c;
                }
            }
        }
    }
    outs
}

/// Elementwise sum of identically shaped tensors.
pub fn add<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>, TensorError> {
    let first = xs
        .first()
        .ok_or_else(|| TensorError::ShapeMismatch("add of zero tensors".to_string()))?;
    for t in xs {
        if t.dims() != first.dims() {
            return Err(TensorError::ShapeMismatch(format!(
                "add shape mismatch: {:?} vs {:?}",
                first.dims(),
                t.dims()
            )));
        }
    }
    let mut out = (*first).clone();
    for t in &xs[1..] {
        for (o, &v) in out.as_mut_slice().iter_mut().zip(t.as_slice()) {
            *o = *o + v;
        }
    }
    Ok(out)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Backward of [`relu`]: passes gradient where the input was positive.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dout: &Tensor<T>) -> Tensor<T> {
    let mut dx = dout.clone();
    for (d, &v) in dx.as_mut_slice().iter_mut().zip(x.as_slice()) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

/// Mean squared error over all elements (pixel mean averaged over the
/// batch).
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T, TensorError> {
    if pred.dims() != target.dims() {
        return Err(TensorError::ShapeMismatch(format!(
            "mse operands differ: {:?} vs {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    let total = T::from_f64(pred.len() as f64);
    let sum: T = pred
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(&p, &t)| {
            let d = p - t;
            d * d
        })
        .sum();
    Ok(sum / total)
}

/// Loss value plus the gradient of the loss with respect to `pred`.
pub fn mse_loss_and_grad<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<(T, Tensor<T>), TensorError> {
    let loss = mse_loss(pred, target)?;
    let scale = T::from_f64(2.0 / pred.len() as f64);
    let mut grad = pred.clone();
    for (g, &t) in grad.as_mut_slice().iter_mut().zip(target.as_slice()) {
        *g = (*g - t) * scale;
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng_from;
    use rand::Rng;

    fn random_tensor(dims: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = rng_from(seed);
        let data = (0..dims.iter().product())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Tensor::from_vec(dims, data).unwrap()
    }

    /// Naive direct convolution, the oracle for the tuned implementation.
    fn conv2d_naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Tensor<f64> {
        let [n, h, wd, c_in] = x.dims();
        let [kh, kw, _, c_out] = w.dims();
        let (ph, pw) = (kh as isize / 2, kw as isize / 2);
        let mut out = Tensor::zeros(n, h, wd, c_out);
        for bn in 0..n {
            for y in 0..h {
                for xx in 0..wd {
                    for co in 0..c_out {
                        let mut acc = b[co];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let sy = y as isize + ky as isize - ph;
                                let sx = xx as isize + kx as isize - pw;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                for ci in 0..c_in {
                                    acc += x.get(bn, sy as usize, sx as usize, ci)
                                        * w.get(ky, kx, ci, co);
                                }
                            }
                        }
                        out.set(bn, y, xx, co, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_zero_input_broadcasts_bias() {
        let x = Tensor::<f64>::zeros(1, 4, 4, 2);
        let w = Tensor::<f64>::zeros(3, 3, 2, 3);
        let out = conv2d(&x, &w, &[1.0, 2.0, 3.0]).unwrap();
        for y in 0..4 {
            for xx in 0..4 {
                assert_eq!(out.pixel(0, y, xx), &[1.0, 2.0, 3.0]);
            }
        }
    }

    #[test]
    fn conv_1x1_identity_permutation_permutes_channels() {
        let x = random_tensor([1, 3, 3, 2], 5);
        // Weights swap channel 0 and 1.
        let w = Tensor::from_vec([1, 1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = conv2d(&x, &w, &[0.0, 0.0]).unwrap();
        for y in 0..3 {
            for xx in 0..3 {
                assert_eq!(out.get(0, y, xx, 0), x.get(0, y, xx, 1));
                assert_eq!(out.get(0, y, xx, 1), x.get(0, y, xx, 0));
            }
        }
    }

    #[test]
    fn conv_all_ones_on_ramp_matches_hand_grid() {
        // 4x4 ramp image, 3x3 all-ones kernel, zero-padded borders.
        let ramp: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = Tensor::from_vec([1, 4, 4, 1], ramp).unwrap();
        let w = Tensor::filled([3, 3, 1, 1], 1.0);
        let out = conv2d(&x, &w, &[0.0]).unwrap();
        let expected = [
            [10.0, 18.0, 24.0, 18.0],
            [27.0, 45.0, 54.0, 39.0],
            [51.0, 81.0, 90.0, 63.0],
            [46.0, 72.0, 78.0, 54.0],
        ];
        for y in 0..4 {
            for xx in 0..4 {
                assert!(
                    (out.get(0, y, xx, 0) - expected[y][xx]).abs() < 1e-12,
                    "({y},{xx}): {} vs {}",
                    out.get(0, y, xx, 0),
                    expected[y][xx]
                );
            }
        }
    }

    #[test]
    fn conv_matches_naive_oracle() {
        for (seed, dims, k) in [
            (1u64, [2, 6, 6, 3], (3, 3)),
            (2, [1, 8, 5, 2], (5, 5)),
            (3, [1, 7, 7, 4], (3, 1)),
            (4, [2, 5, 9, 1], (1, 7)),
            (5, [1, 4, 4, 2], (1, 1)),
        ] {
            let x = random_tensor(dims, seed);
            let w = random_tensor([k.0, k.1, dims[3], 3], seed + 100);
            let b: Vec<f64> = (0..3).map(|i| i as f64 * 0.1).collect();
            let fast = conv2d(&x, &w, &b).unwrap();
            let slow = conv2d_naive(&x, &w, &b);
            for (a, e) in fast.as_slice().iter().zip(slow.as_slice()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_is_linear_with_zero_bias() {
        let x = random_tensor([1, 6, 6, 2], 7);
        let y = random_tensor([1, 6, 6, 2], 8);
        let w = random_tensor([3, 3, 2, 3], 9);
        let b = vec![0.0; 3];
        let (alpha, beta) = (0.7, -1.3);
        let mixed = Tensor::from_vec(
            x.dims(),
            x.as_slice()
                .iter()
                .zip(y.as_slice())
                .map(|(&a, &b_)| alpha * a + beta * b_)
                .collect(),
        )
        .unwrap();
        let lhs = conv2d(&mixed, &w, &b).unwrap();
        let cx = conv2d(&x, &w, &b).unwrap();
        let cy = conv2d(&y, &w, &b).unwrap();
        for i in 0..lhs.len() {
            let rhs = alpha * cx.as_slice()[i] + beta * cy.as_slice()[i];
            assert!((lhs.as_slice()[i] - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_basics() {
        let x = Tensor::from_vec([1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(pool2(&x, PoolKind::Max).unwrap().as_slice(), &[4.0]);
        assert_eq!(pool2(&x, PoolKind::Avg).unwrap().as_slice(), &[2.5]);
        let odd = Tensor::<f64>::zeros(1, 3, 4, 1);
        assert!(pool2(&odd, PoolKind::Max).is_err());
    }

    #[test]
    fn upsample_round_trip_with_avg_pool() {
        let x = random_tensor([1, 3, 3, 2], 11);
        let up = upsample2(&x);
        assert_eq!(up.dims(), [1, 6, 6, 2]);
        let down = pool2(&up, PoolKind::Avg).unwrap();
        for (a, e) in down.as_slice().iter().zip(x.as_slice()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_of_single_pixel_replicates() {
        let x = Tensor::from_vec([1, 1, 1, 1], vec![3.5]).unwrap();
        let up = upsample2(&x);
        assert_eq!(up.as_slice(), &[3.5; 4]);
    }

    #[test]
    fn concat_and_add_contracts() {
        let a = random_tensor([1, 2, 2, 2], 1);
        let b = random_tensor([1, 2, 2, 3], 2);
        let cat = concat(&[&a, &b]).unwrap();
        assert_eq!(cat.channels(), 5);
        assert_eq!(cat.pixel(0, 1, 1)[..2], *a.pixel(0, 1, 1));

        let zero = Tensor::<f64>::zeros(1, 2, 2, 2);
        let sum = add(&[&a, &zero]).unwrap();
        assert_eq!(sum.as_slice(), a.as_slice());
        assert!(add(&[&a, &b]).is_err());
    }

    #[test]
    fn mse_basics() {
        let a = Tensor::filled([1, 4, 4, 1], 0.6);
        let b = Tensor::filled([1, 4, 4, 1], 0.5);
        assert!((mse_loss(&a, &a).unwrap() - 0.0).abs() < 1e-15);
        assert!((mse_loss(&a, &b).unwrap() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn mse_matches_brute_force_sum() {
        let a = random_tensor([2, 5, 5, 1], 21);
        let b = random_tensor([2, 5, 5, 1], 22);
        let brute: f64 = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<f64>()
            / a.len() as f64;
        assert!((mse_loss(&a, &b).unwrap() - brute).abs() < 1e-12);
    }

    /// Central finite difference of a scalar readout against an analytic
    /// gradient, probing a spread of slots.
    fn fd_check(x: &Tensor<f64>, analytic: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) {
        let h = 1e-5;
        for i in (0..x.len()).step_by((x.len() / 24).max(1)) {
            let mut plus = x.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = x.clone();
            minus.as_mut_slice()[i] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let an = analytic.as_slice()[i];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                ((fd - an) / denom).abs() < 1e-4,
                "slot {i}: fd {fd} vs analytic {an}"
            );
        }
    }

    fn loss_of(t: &Tensor<f64>) -> f64 {
        // Quadratic readout with per-slot weights so gradients are nontrivial.
        t.as_slice()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * v * (1.0 + (i % 3) as f64))
            .sum()
    }

    fn upstream_of(t: &Tensor<f64>) -> Tensor<f64> {
        let mut g = t.clone();
        for (i, v) in g.as_mut_slice().iter_mut().enumerate() {
            *v = 2.0 * *v * (1.0 + (i % 3) as f64);
        }
        g
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let x = random_tensor([1, 5, 5, 2], 31);
        let w = random_tensor([3, 3, 2, 3], 32);
        let b: Vec<f64> = vec![0.1, -0.2, 0.3];
        let run = |x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]| loss_of(&conv2d(x, w, b).unwrap());
        let out = conv2d(&x, &w, &b).unwrap();
        let dout = upstream_of(&out);
        let (dx, dw, db) = conv2d_backward(&x, &w, &dout);

        fd_check(&x, &dx, |xt| run(xt, &w, &b));
        fd_check(&w, &dw, |wt| run(&x, wt, &b));
        let h = 1e-5;
        for i in 0..b.len() {
            let mut bp = b.clone();
            bp[i] += h;
            let mut bm = b.clone();
            bm[i] -= h;
            let fd = (run(&x, &w, &bp) - run(&x, &w, &bm)) / (2.0 * h);
            assert!(((fd - db[i]) / fd.abs().max(1e-8)).abs() < 1e-4);
        }
    }

    #[test]
    fn pool_backwards_match_finite_differences() {
        let x = random_tensor([1, 4, 4, 2], 41);
        for kind in [PoolKind::Max, PoolKind::Avg] {
            let out = pool2(&x, kind).unwrap();
            let dout = upstream_of(&out);
            let dx = pool2_backward(&x, kind, &dout);
            fd_check(&x, &dx, |xt| loss_of(&pool2(xt, kind).unwrap()));
        }
    }

    #[test]
    fn upsample_backward_is_block_sum() {
        let x = random_tensor([1, 3, 3, 1], 51);
        let out = upsample2(&x);
        let dout = upstream_of(&out);
        let dx = upsample2_backward(&dout);
        fd_check(&x, &dx, |xt| loss_of(&upsample2(xt)));
        for y in 0..3 {
            for xx in 0..3 {
                let sum = dout.get(0, 2 * y, 2 * xx, 0)
                    + dout.get(0, 2 * y, 2 * xx + 1, 0)
                    + dout.get(0, 2 * y + 1, 2 * xx, 0)
                    + dout.get(0, 2 * y + 1, 2 * xx + 1, 0);
                assert!((dx.get(0, y, xx, 0) - sum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn relu_gradient_masks_negative_side() {
        let x = Tensor::from_vec([1, 1, 1, 4], vec![-1.0, -0.1, 0.2, 2.0]).unwrap();
        let out = relu(&x);
        assert_eq!(out.as_slice(), &[0.0, 0.0, 0.2, 2.0]);
        let dout = Tensor::filled([1, 1, 1, 4], 1.0);
        let dx = relu_backward(&x, &dout);
        assert_eq!(dx.as_slice(), &[0.0, 0.0, 1.0, 1.0]);
        fd_check(&x, &dx, |xt| relu(xt).as_slice().iter().sum());
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let p = random_tensor([1, 4, 4, 1], 61);
        let t = random_tensor([1, 4, 4, 1], 62);
        let (_, grad) = mse_loss_and_grad(&p, &t).unwrap();
        fd_check(&p, &grad, |pt| mse_loss(pt, &t).unwrap());
    }

    #[test]
    fn concat_backward_splits_exactly() {
        let a = random_tensor([1, 2, 2, 2], 71);
        let b = random_tensor([1, 2, 2, 3], 72);
        let cat = concat(&[&a, &b]).unwrap();
        let dout = upstream_of(&cat);
        let parts = concat_backward(&dout, &[2, 3]);
        assert_eq!(parts[0].dims(), a.dims());
        assert_eq!(parts[1].dims(), b.dims());
        let recat = concat(&[&parts[0], &parts[1]]).unwrap();
        assert_eq!(recat.as_slice(), dout.as_slice());
    }

    #[test]
    fn max_pool_gradient_routes_by_argmax() {
        // Tie: both top cells equal; gradient goes to the first in row-major
        // order.
        let x = Tensor::from_vec([1, 2, 2, 1], vec![5.0, 5.0, 1.0, 0.0]).unwrap();
        let dout = Tensor::from_vec([1, 1, 1, 1], vec![1.0]).unwrap();
        let dx = pool2_backward(&x, PoolKind::Max, &dout);
        assert_eq!(dx.as_slice(), &[1.0, 0.0, 0.0, 0.0]);
    }
}
