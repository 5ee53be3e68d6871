//! Forward and backward kernels for the operator set shared by every block:
//! zero-padded convolution, ReLU, decimation, average pooling, batch
//! normalization, the linear head and the softmax cross-entropy loss.
//!
//! Kernels here work on plain tensors. [`crate::tape`] records them for
//! reverse-mode differentiation.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Scalar, Tensor4};

/// Samples per partial weight-gradient sum. Fixed so the reduction order does
/// not depend on the thread count.
const WGRAD_GROUP: usize = 4;

/// Padding used for a `k x k` kernel: 1 for 3x3, 0 for 1x1.
#[inline]
pub fn padding_for(k: usize) -> usize {
    k / 2
}

#[inline]
pub fn conv_out_dim(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// Checks a kernel geometry against the supported set.
pub fn check_geometry(k: usize, stride: usize) -> Result<()> {
    if k != 1 && k != 3 {
        return Err(Error::config(format!("unsupported kernel size {k}x{k}")));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::config(format!("unsupported stride {stride}")));
    }
    Ok(())
}

struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x_shape: [usize; 4], w_shape: [usize; 4], stride: usize) -> Result<Self> {
        let [_, c, h, w] = x_shape;
        let [_, c_in, kh, kw] = w_shape;
        if kh != kw {
            return Err(Error::config(format!("non-square kernel {kh}x{kw}")));
        }
        check_geometry(kh, stride)?;
        if c != c_in {
            return Err(Error::shape(format!(
                "conv2d: input has {c} channels, kernel expects {c_in}"
            )));
        }
        let pad = padding_for(kh);
        if h + 2 * pad < kh || w + 2 * pad < kh {
            return Err(Error::shape(format!("conv2d: input {h}x{w} smaller than kernel")));
        }
        Ok(ConvGeom {
            c_in,
            h,
            w,
            k: kh,
            stride,
            pad,
            ho: conv_out_dim(h, kh, stride, pad),
            wo: conv_out_dim(w, kh, stride, pad),
        })
    }

    #[inline]
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    #[inline]
    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1x1 stride-1 convolution reads the input directly.
    #[inline]
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let (k, s, p, ho, wo) = (self.k, self.stride, self.pad, self.ho, self.wo);
        for ci in 0..self.c_in {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        let out = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= self.h as isize {
                            out.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            *o = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], x: &mut [T]) {
        let (k, s, p, ho, wo) = (self.k, self.stride, self.pad, self.ho, self.wo);
        x.fill(T::zero());
        for ci in 0..self.c_in {
            let plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..wo {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded 2-D convolution (cross-correlation) with kernel `w` of shape
/// `(c_out, c_in, k, k)`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    bias: Option<&[T]>,
    stride: usize,
) -> Result<Tensor4<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride)?;
    let c_out = w.n;
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(Error::shape(format!("bias length {} for {c_out} outputs", b.len())));
        }
    }
    let mut y = Tensor4::zeros([x.n, c_out, g.ho, g.wo]);
    let (patch, plane) = (g.patch(), g.out_plane());
    let wd = w.data();
    par::for_each_chunk_mut(y.data_mut(), c_out * plane, |n, out| {
        let xs = x.sample(n);
        let mut buf;
        let col: &[T] = if g.is_pointwise() {
            xs
        } else {
            buf = vec![T::zero(); patch * plane];
            g.im2col(xs, &mut buf);
            &buf
        };
        T::gemm(
            c_out, patch, plane, T::one(), wd, patch as isize, 1, col, plane as isize, 1,
            T::zero(), out, plane as isize, 1,
        );
        if let Some(b) = bias {
            for (co, row) in out.chunks_mut(plane).enumerate() {
                row.iter_mut().for_each(|v| *v += b[co]);
            }
        }
    });
    Ok(y)
}

/// Gradient of the convolution with respect to its input.
pub fn conv2d_backward_input<T: Scalar>(
    dy: &Tensor4<T>,
    w: &Tensor4<T>,
    x_shape: [usize; 4],
    stride: usize,
) -> Result<Tensor4<T>> {
    let g = ConvGeom::new(x_shape, w.shape(), stride)?;
    let c_out = w.n;
    if dy.shape() != [x_shape[0], c_out, g.ho, g.wo] {
        return Err(Error::shape(format!("conv2d backward: dy {:?}", dy.shape())));
    }
    let (patch, plane) = (g.patch(), g.out_plane());
    let mut dx = Tensor4::zeros(x_shape);
    let sample = x_shape[1] * x_shape[2] * x_shape[3];
    let wd = w.data();
    par::for_each_chunk_mut(dx.data_mut(), sample, |n, dxs| {
        let dys = dy.sample(n);
        if g.is_pointwise() {
            T::gemm(
                patch, c_out, plane, T::one(), wd, 1, patch as isize, dys, plane as isize, 1,
                T::zero(), dxs, plane as isize, 1,
            );
        } else {
            let mut col = vec![T::zero(); patch * plane];
            T::gemm(
                patch, c_out, plane, T::one(), wd, 1, patch as isize, dys, plane as isize, 1,
                T::zero(), &mut col, plane as isize, 1,
            );
            g.col2im(&col, dxs);
        }
    });
    Ok(dx)
}

/// Gradient of the convolution with respect to its kernel.
pub fn conv2d_backward_weight<T: Scalar>(
    dy: &Tensor4<T>,
    x: &Tensor4<T>,
    w_shape: [usize; 4],
    stride: usize,
) -> Result<Tensor4<T>> {
    let g = ConvGeom::new(x.shape(), w_shape, stride)?;
    let c_out = w_shape[0];
    if dy.shape() != [x.n, c_out, g.ho, g.wo] {
        return Err(Error::shape(format!("conv2d backward: dy {:?}", dy.shape())));
    }
    let (patch, plane) = (g.patch(), g.out_plane());
    let groups = x.n.div_ceil(WGRAD_GROUP);
    let partials = par::map_range(groups, |gi| {
        let mut acc = vec![T::zero(); c_out * patch];
        let mut buf = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); patch * plane] };
        for n in gi * WGRAD_GROUP..((gi + 1) * WGRAD_GROUP).min(x.n) {
            let xs = x.sample(n);
            let col: &[T] = if g.is_pointwise() {
                xs
            } else {
                g.im2col(xs, &mut buf);
                &buf
            };
            T::gemm(
                c_out, plane, patch, T::one(), dy.sample(n), plane as isize, 1, col, 1,
                plane as isize, T::one(), &mut acc, patch as isize, 1,
            );
        }
        acc
    });
    let mut dw = Tensor4::zeros(w_shape);
    for p in &partials {
        for (d, &v) in dw.data_mut().iter_mut().zip(p) {
            *d += v;
        }
    }
    Ok(dw)
}

/// Per-output-channel sum of `dy`, the gradient of a convolution bias.
pub fn channel_sums<T: Scalar>(dy: &Tensor4<T>) -> Vec<T> {
    let plane = dy.plane_len();
    let mut out = vec![T::zero(); dy.c];
    for n in 0..dy.n {
        for (c, o) in out.iter_mut().enumerate() {
            let start = dy.index(n, c, 0, 0);
            *o += dy.data()[start..start + plane].iter().copied().sum::<T>();
        }
    }
    out
}

pub fn relu<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v < T::zero() { T::zero() } else { v })
}

/// Passes `dy` where the forward input was positive.
pub fn relu_backward<T: Scalar>(dy: &Tensor4<T>, x: &Tensor4<T>) -> Result<Tensor4<T>> {
    dy.zip_map(x, |g, v| if v > T::zero() { g } else { T::zero() })
}

/// Decimation keeping entries at even 0-based (odd 1-based) positions:
/// `out[i][j] = x[2i][2j]`.
pub fn subsample<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let (ho, wo) = (x.h.div_ceil(2), x.w.div_ceil(2));
    Tensor4::from_fn([x.n, x.c, ho, wo], |n, c, y, xx| x.at(n, c, 2 * y, 2 * xx))
}

pub fn subsample_backward<T: Scalar>(dy: &Tensor4<T>, x_shape: [usize; 4]) -> Tensor4<T> {
    let mut dx = Tensor4::zeros(x_shape);
    for n in 0..dy.n {
        for c in 0..dy.c {
            for y in 0..dy.h {
                for xx in 0..dy.w {
                    dx.set(n, c, 2 * y, 2 * xx, dy.at(n, c, y, xx));
                }
            }
        }
    }
    dx
}

pub fn global_avg_pool<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let plane = x.plane_len();
    let inv = T::one() / T::of(plane as f64);
    let data = x.data().chunks(plane).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    Tensor4::from_vec([x.n, x.c, 1, 1], data).expect("pool shape")
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &Tensor4<T>, x_shape: [usize; 4]) -> Tensor4<T> {
    let plane = x_shape[2] * x_shape[3];
    let inv = T::one() / T::of(plane as f64);
    let mut dx = Tensor4::zeros(x_shape);
    for (chunk, &g) in dx.data_mut().chunks_mut(plane).zip(dy.data()) {
        chunk.fill(g * inv);
    }
    dx
}

/// `y = x W^T + b` on the flattened sample. `w` has shape `(out, features, 1, 1)`.
pub fn linear_forward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    b: Option<&Tensor4<T>>,
) -> Result<Tensor4<T>> {
    let f = x.sample_len();
    let out = w.n;
    if w.sample_len() != f {
        return Err(Error::shape(format!(
            "linear: {f} input features, weight expects {}",
            w.sample_len()
        )));
    }
    if let Some(b) = b {
        if b.len() != out {
            return Err(Error::shape(format!("linear: bias length {} for {out} outputs", b.len())));
        }
    }
    let mut y = Tensor4::zeros([x.n, out, 1, 1]);
    T::gemm(
        x.n, f, out, T::one(), x.data(), f as isize, 1, w.data(), 1, f as isize, T::zero(),
        y.data_mut(), out as isize, 1,
    );
    if let Some(b) = b {
        for row in y.data_mut().chunks_mut(out) {
            row.iter_mut().zip(b.data()).for_each(|(v, &bb)| *v += bb);
        }
    }
    Ok(y)
}

/// Returns `(dx, dw, db)` for [`linear_forward`].
pub fn linear_backward<T: Scalar>(
    dy: &Tensor4<T>,
    x: &Tensor4<T>,
    w: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>, Tensor4<T>)> {
    let (n, f, out) = (x.n, x.sample_len(), w.n);
    if dy.shape() != [n, out, 1, 1] {
        return Err(Error::shape(format!("linear backward: dy {:?}", dy.shape())));
    }
    let mut dx = Tensor4::zeros(x.shape());
    T::gemm(
        n, out, f, T::one(), dy.data(), out as isize, 1, w.data(), f as isize, 1, T::zero(),
        dx.data_mut(), f as isize, 1,
    );
    let mut dw = Tensor4::zeros(w.shape());
    T::gemm(
        out, n, f, T::one(), dy.data(), 1, out as isize, x.data(), f as isize, 1, T::zero(),
        dw.data_mut(), f as isize, 1,
    );
    let mut db = Tensor4::zeros([1, out, 1, 1]);
    for row in dy.data().chunks(out) {
        db.data_mut().iter_mut().zip(row).for_each(|(d, &g)| *d += g);
    }
    Ok((dx, dw, db))
}

/// Mean softmax cross-entropy over the batch. `logits` has shape `(N, K, 1, 1)`.
/// Returns the loss and the softmax probabilities.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor4<T>,
    labels: &[usize],
) -> Result<(T, Tensor4<T>)> {
    let k = logits.sample_len();
    if labels.len() != logits.n {
        return Err(Error::shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            logits.n
        )));
    }
    let mut probs = logits.clone();
    let mut loss = 0.0f64;
    for (row, &y) in probs.data_mut().chunks_mut(k).zip(labels) {
        if y >= k {
            return Err(Error::OutOfRange(format!("label {y} with {k} classes")));
        }
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
        let p = row[y].as_f64();
        loss -= if p.is_nan() { p } else { p.max(f64::MIN_POSITIVE).ln() };
    }
    Ok((T::of(loss / logits.n as f64), probs))
}

pub fn softmax_cross_entropy_backward<T: Scalar>(
    probs: &Tensor4<T>,
    labels: &[usize],
    scale: T,
) -> Tensor4<T> {
    let k = probs.sample_len();
    let inv = scale / T::of(probs.n as f64);
    let mut d = probs.clone();
    for (row, &y) in d.data_mut().chunks_mut(k).zip(labels) {
        row[y] -= T::one();
        row.iter_mut().for_each(|v| *v *= inv);
    }
    d
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel batch normalization parameters and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNormState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
    pub mode: BnMode,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::of(1e-5),
            momentum: T::of(0.1),
            mode: BnMode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Blends batch statistics into the running estimates.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        update_running(&mut self.running_mean, &mut self.running_var, self.momentum, stats);
    }
}

pub(crate) fn update_running<T: Scalar>(
    mean: &mut [T],
    var: &mut [T],
    momentum: T,
    stats: &BatchStats<T>,
) {
    let keep = T::one() - momentum;
    for c in 0..mean.len() {
        mean[c] = keep * mean[c] + momentum * stats.mean[c];
        var[c] = keep * var[c] + momentum * stats.unbiased_var[c];
    }
}

/// Statistics of one training batch, per channel.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance, used for normalization.
    pub var: Vec<T>,
    /// Unbiased variance, used for the running estimate.
    pub unbiased_var: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Batch statistics over `(N, H, W)` per channel.
pub fn batch_stats<T: Scalar>(x: &Tensor4<T>, eps: T) -> Result<BatchStats<T>> {
    if x.n == 0 {
        return Err(Error::shape("batch normalization of an empty batch"));
    }
    let plane = x.plane_len();
    let m = (x.n * plane) as f64;
    let mut mean = vec![T::zero(); x.c];
    let mut var = vec![T::zero(); x.c];
    for c in 0..x.c {
        let mut s = 0.0f64;
        for n in 0..x.n {
            let i = x.index(n, c, 0, 0);
            s += x.data()[i..i + plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mu = s / m;
        let mut q = 0.0f64;
        for n in 0..x.n {
            let i = x.index(n, c, 0, 0);
            q += x.data()[i..i + plane].iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>();
        }
        mean[c] = T::of(mu);
        var[c] = T::of(q / m);
    }
    let unbiased_var = var
        .iter()
        .map(|&v| if m > 1.0 { v * T::of(m / (m - 1.0)) } else { v })
        .collect();
    let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    Ok(BatchStats { mean, var, unbiased_var, inv_std })
}

/// `y[c] = gamma[c] * (x[c] - mean[c]) * inv_std[c] + beta[c]`.
pub fn channel_affine<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    inv_std: &[T],
) -> Result<Tensor4<T>> {
    let c = x.c;
    if gamma.len() != c || beta.len() != c || mean.len() != c || inv_std.len() != c {
        return Err(Error::shape(format!(
            "batch normalization over {c} channels with {} parameters",
            gamma.len()
        )));
    }
    let plane = x.plane_len();
    let mut y = x.clone();
    for (i, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
        let ch = i % c;
        let (s, m, b) = (gamma[ch] * inv_std[ch], mean[ch], beta[ch]);
        chunk.iter_mut().for_each(|v| *v = (*v - m) * s + b);
    }
    Ok(y)
}

/// Backward of [`channel_affine`] with fixed statistics: returns `(dx, dgamma, dbeta)`.
pub fn channel_affine_backward<T: Scalar>(
    dy: &Tensor4<T>,
    x: &Tensor4<T>,
    gamma: &[T],
    mean: &[T],
    inv_std: &[T],
) -> (Tensor4<T>, Vec<T>, Vec<T>) {
    let c = x.c;
    let plane = x.plane_len();
    let mut dx = dy.clone();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (i, (dchunk, xchunk)) in dx.data_mut().chunks_mut(plane).zip(x.data().chunks(plane)).enumerate() {
        let ch = i % c;
        for (d, &xv) in dchunk.iter_mut().zip(xchunk) {
            dgamma[ch] += *d * (xv - mean[ch]) * inv_std[ch];
            dbeta[ch] += *d;
            *d *= gamma[ch] * inv_std[ch];
        }
    }
    (dx, dgamma, dbeta)
}

/// Backward of training-mode batch normalization, where mean and variance
/// depend on `x`. Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_train_backward<T: Scalar>(
    dy: &Tensor4<T>,
    x: &Tensor4<T>,
    gamma: &[T],
    stats: &BatchStats<T>,
) -> (Tensor4<T>, Vec<T>, Vec<T>) {
    let c = x.c;
    let plane = x.plane_len();
    let m = T::of((x.n * plane) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (i, (dchunk, xchunk)) in dy.data().chunks(plane).zip(x.data().chunks(plane)).enumerate() {
        let ch = i % c;
        for (&d, &xv) in dchunk.iter().zip(xchunk) {
            dgamma[ch] += d * (xv - stats.mean[ch]) * stats.inv_std[ch];
            dbeta[ch] += d;
        }
    }
    let mut dx = dy.clone();
    for (i, (dchunk, xchunk)) in dx.data_mut().chunks_mut(plane).zip(x.data().chunks(plane)).enumerate() {
        let ch = i % c;
        let (mu, is, g) = (stats.mean[ch], stats.inv_std[ch], gamma[ch]);
        // dx = g*is/m * (m*dy - sum(dy) - xhat*sum(dy*xhat))
        let k = g * is / m;
        for (d, &xv) in dchunk.iter_mut().zip(xchunk) {
            let xhat = (xv - mu) * is;
            *d = k * (m * *d - dbeta[ch] - xhat * dgamma[ch]);
        }
    }
    (dx, dgamma, dbeta)
}

/// Batch normalization through a standalone state. Training mode normalizes
/// with batch statistics and updates the running estimates; evaluation mode
/// uses the running estimates.
pub fn batchnorm<T: Scalar>(x: &Tensor4<T>, s: &mut BatchNormState<T>) -> Result<Tensor4<T>> {
    if x.c != s.channels() {
        return Err(Error::shape(format!(
            "batchnorm: {} channels, state has {}",
            x.c,
            s.channels()
        )));
    }
    if x.n == 0 {
        return Err(Error::shape("batch normalization of an empty batch"));
    }
    match s.mode {
        BnMode::Train => {
            let stats = batch_stats(x, s.eps)?;
            let y = channel_affine(x, &s.gamma, &s.beta, &stats.mean, &stats.inv_std)?;
            s.update_running(&stats);
            Ok(y)
        }
        BnMode::Eval => {
            let inv_std: Vec<T> = s.running_var.iter().map(|&v| T::one() / (v + s.eps).sqrt()).collect();
            channel_affine(x, &s.gamma, &s.beta, &s.running_mean, &inv_std)
        }
    }
}
