//! Forward and backward kernels for the operations the encoding models use.
//!
//! Spatial tensors are `[B, C, H, W]`; the public forward functions also accept an
//! unbatched `[C, H, W]` image and return an output of the same rank.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Zero padding policy of a stride-1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Output keeps the input size, zero-padded by `(k - 1) / 2`.
    Same,
    /// No padding, output shrinks by `k - 1`.
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Softplus,
}

impl Activation {
    #[inline]
    pub fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Relu => x.max(S::zero()),
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative, with the relu subgradient taken as 0 at the kink.
    #[inline]
    pub fn derivative<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Relu => {
                if x > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Softplus => sigmoid(x),
        }
    }
}

/// `ln(1 + e^x)` without overflow for large `x`.
#[inline]
pub fn softplus<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Interprets a 3-D or 4-D tensor as `[B, C, H, W]`.
pub(crate) fn as_batched(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [c, h, w] => Ok([1, c, h, w]),
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => shape_err(format!("expected [C,H,W] or [B,C,H,W], got {shape:?}")),
    }
}

fn restore_rank<S: Scalar>(like: &[usize], out: Tensor<S>) -> Result<Tensor<S>> {
    if like.len() == 3 {
        let s = out.shape()[1..].to_vec();
        out.reshape(&s)
    } else {
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(input: [usize; 4], kernel: &[usize], padding: Padding) -> Result<Self> {
        let [batch, c_in, h, w] = input;
        let &[c_out, kc, k, k2] = kernel else {
            return shape_err(format!("kernel must be [C_out,C_in,k,k], got {kernel:?}"));
        };
        if k != k2 {
            return Err(Error::Invalid(format!("non-square kernel {k}x{k2}")));
        }
        if k % 2 == 0 {
            return Err(Error::Invalid(format!("kernel size {k} is not odd")));
        }
        if kc != c_in {
            return shape_err(format!(
                "channel mismatch: input has {c_in} channels, kernel expects {kc}"
            ));
        }
        let (pad, h_out, w_out) = match padding {
            Padding::Same => ((k - 1) / 2, h, w),
            Padding::Valid => {
                if h < k || w < k {
                    return shape_err(format!(
                        "valid convolution of {h}x{w} input with {k}x{k} kernel leaves no output"
                    ));
                }
                (0, h - k + 1, w - k + 1)
            }
        };
        Ok(ConvGeometry {
            batch,
            c_in,
            h,
            w,
            c_out,
            k,
            pad,
            h_out,
            w_out,
        })
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Output columns `[lo, hi)` whose input column `ox + off` lies inside `[0, w)`.
fn valid_span(off: isize, w: usize, w_out: usize) -> (usize, usize) {
    let lo = (-off).clamp(0, w_out as isize) as usize;
    let hi = (w as isize - off).clamp(lo as isize, w_out as isize) as usize;
    (lo, hi)
}

fn im2col<S: Scalar>(g: &ConvGeometry, x: &[S], col: &mut [S]) {
    let (k, pad) = (g.k, g.pad as isize);
    let hw_out = g.col_cols();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                let off = kx as isize - pad;
                let (lo, hi) = valid_span(off, g.w, g.w_out);
                for oy in 0..g.h_out {
                    let iy = oy as isize + ky as isize - pad;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(S::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(S::zero());
                    line[hi..].fill(S::zero());
                    let s0 = (lo as isize + off) as usize;
                    line[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                }
            }
        }
    }
}

fn col2im_add<S: Scalar>(g: &ConvGeometry, col: &[S], dx: &mut [S]) {
    let (k, pad) = (g.k, g.pad as isize);
    let hw_out = g.col_cols();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * hw_out..(row + 1) * hw_out];
                let off = kx as isize - pad;
                let (lo, hi) = valid_span(off, g.w, g.w_out);
                for oy in 0..g.h_out {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let s0 = (lo as isize + off) as usize;
                    let dst = &mut plane[iy as usize * g.w + s0..iy as usize * g.w + s0 + (hi - lo)];
                    for (d, v) in dst.iter_mut().zip(&src[oy * g.w_out + lo..oy * g.w_out + hi]) {
                        *d += *v;
                    }
                }
            }
        }
    }
}

/// Raw batched convolution, `x` laid out `[B, C_in, H, W]`.
pub fn conv2d_forward_raw<S: Scalar>(g: &ConvGeometry, x: &[S], kernel: &[S]) -> Vec<S> {
    let (kr, hw) = (g.col_rows(), g.col_cols());
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * hw;
    let mut out = vec![S::zero(); g.batch * out_stride];
    let mut col = vec![S::zero(); kr * hw];
    for b in 0..g.batch {
        im2col(g, &x[b * in_stride..(b + 1) * in_stride], &mut col);
        S::gemm(
            g.c_out,
            kr,
            hw,
            S::one(),
            kernel,
            kr as isize,
            1,
            &col,
            hw as isize,
            1,
            S::zero(),
            &mut out[b * out_stride..(b + 1) * out_stride],
            hw as isize,
            1,
        );
    }
    out
}

/// Gradients of a batched convolution. Either output may be skipped.
pub fn conv2d_backward_raw<S: Scalar>(
    g: &ConvGeometry,
    x: &[S],
    kernel: &[S],
    dout: &[S],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>) {
    let (kr, hw) = (g.col_rows(), g.col_cols());
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * hw;
    let mut dx = want_dx.then(|| vec![S::zero(); g.batch * in_stride]);
    let mut dw = want_dw.then(|| vec![S::zero(); g.c_out * kr]);
    let mut col = vec![S::zero(); kr * hw];
    for b in 0..g.batch {
        let dy = &dout[b * out_stride..(b + 1) * out_stride];
        if let Some(dw) = dw.as_mut() {
            im2col(g, &x[b * in_stride..(b + 1) * in_stride], &mut col);
            // dW[co, r] += dY[co, p] * col[r, p]
            S::gemm(
                g.c_out,
                hw,
                kr,
                S::one(),
                dy,
                hw as isize,
                1,
                &col,
                1,
                hw as isize,
                S::one(),
                dw,
                kr as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcol[r, p] = W[co, r] * dY[co, p]
            S::gemm(
                kr,
                g.c_out,
                hw,
                S::one(),
                kernel,
                1,
                kr as isize,
                dy,
                hw as isize,
                1,
                S::zero(),
                &mut col,
                hw as isize,
                1,
            );
            col2im_add(g, &col, &mut dx[b * in_stride..(b + 1) * in_stride]);
        }
    }
    (dx, dw)
}

/// Stride-1, bias-free 2-D convolution (cross-correlation).
pub fn conv2d<S: Scalar>(input: &Tensor<S>, kernel: &Tensor<S>, padding: Padding) -> Result<Tensor<S>> {
    let g = ConvGeometry::new(as_batched(input.shape())?, kernel.shape(), padding)?;
    let out = conv2d_forward_raw(&g, input.data(), kernel.data());
    let t = Tensor::from_vec(&[g.batch, g.c_out, g.h_out, g.w_out], out)?;
    restore_rank(input.shape(), t)
}

// ---------------------------------------------------------------------------
// Batch normalization

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel affine normalization parameters with running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<S: Scalar = f64> {
    pub scale: Tensor<S>,
    pub shift: Tensor<S>,
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
    pub epsilon: S,
    pub momentum: S,
}

impl<S: Scalar> BatchNormParams<S> {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            scale: Tensor::full(&[channels], S::one()),
            shift: Tensor::zeros(&[channels]),
            running_mean: vec![S::zero(); channels],
            running_var: vec![S::one(); channels],
            epsilon: S::lit(1e-5),
            momentum: S::lit(0.1),
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Exponential moving update with `momentum` weight on the new batch statistics.
    pub fn update_running(&mut self, mean: &[S], var_unbiased: &[S]) {
        let m = self.momentum;
        for (r, &x) in self.running_mean.iter_mut().zip(mean) {
            *r = (S::one() - m) * *r + m * x;
        }
        for (r, &x) in self.running_var.iter_mut().zip(var_unbiased) {
            *r = (S::one() - m) * *r + m * x;
        }
    }
}

/// Saved state for the normalization backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<S: Scalar> {
    pub dims: [usize; 4],
    pub xhat: Vec<S>,
    pub inv_std: Vec<S>,
    pub mode: BnMode,
    /// Batch mean and unbiased variance (train mode only).
    pub batch_stats: Option<(Vec<S>, Vec<S>)>,
}

pub fn batchnorm_forward_raw<S: Scalar>(
    dims: [usize; 4],
    x: &[S],
    gamma: &[S],
    beta: &[S],
    running: (&[S], &[S]),
    epsilon: S,
    mode: BnMode,
) -> Result<(Vec<S>, BnCache<S>)> {
    let [b, c, h, w] = dims;
    if gamma.len() != c || beta.len() != c || running.0.len() != c || running.1.len() != c {
        return shape_err(format!(
            "batchnorm: input has {c} channels, parameters have {}",
            gamma.len()
        ));
    }
    let hw = h * w;
    let n = b * hw;
    if n == 0 {
        return Err(Error::Invalid("batchnorm over an empty batch".into()));
    }
    let (mean, var, batch_stats) = match mode {
        BnMode::Train => {
            let mut mean = vec![S::zero(); c];
            let mut var = vec![S::zero(); c];
            let inv_n = S::one() / S::lit(n as f64);
            for ch in 0..c {
                let mut s = S::zero();
                for bi in 0..b {
                    let base = (bi * c + ch) * hw;
                    for &v in &x[base..base + hw] {
                        s += v;
                    }
                }
                let mu = s * inv_n;
                let mut q = S::zero();
                for bi in 0..b {
                    let base = (bi * c + ch) * hw;
                    for &v in &x[base..base + hw] {
                        let d = v - mu;
                        q += d * d;
                    }
                }
                mean[ch] = mu;
                var[ch] = q * inv_n;
            }
            let unbiased = if n > 1 {
                let f = S::lit(n as f64 / (n as f64 - 1.0));
                var.iter().map(|&v| v * f).collect()
            } else {
                var.clone()
            };
            let stats = Some((mean.clone(), unbiased));
            (mean, var, stats)
        }
        BnMode::Eval => (running.0.to_vec(), running.1.to_vec(), None),
    };
    let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + epsilon).sqrt()).collect();
    let mut xhat = vec![S::zero(); x.len()];
    let mut y = vec![S::zero(); x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * hw;
            let (mu, is, g, be) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for i in base..base + hw {
                let z = (x[i] - mu) * is;
                xhat[i] = z;
                y[i] = g * z + be;
            }
        }
    }
    Ok((
        y,
        BnCache {
            dims,
            xhat,
            inv_std,
            mode,
            batch_stats,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward_raw<S: Scalar>(
    cache: &BnCache<S>,
    gamma: &[S],
    dy: &[S],
    want_dx: bool,
) -> (Option<Vec<S>>, Vec<S>, Vec<S>) {
    let [b, c, h, w] = cache.dims;
    let hw = h * w;
    let n = S::lit((b * hw) as f64);
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * hw;
            for (g, x) in dy[base..base + hw].iter().zip(&cache.xhat[base..base + hw]) {
                dgamma[ch] += *g * *x;
                dbeta[ch] += *g;
            }
        }
    }
    let dx = want_dx.then(|| {
        let mut dx = vec![S::zero(); dy.len()];
        for ch in 0..c {
            let g = gamma[ch] * cache.inv_std[ch];
            match cache.mode {
                BnMode::Eval => {
                    for bi in 0..b {
                        let base = (bi * c + ch) * hw;
                        for i in base..base + hw {
                            dx[i] = dy[i] * g;
                        }
                    }
                }
                BnMode::Train => {
                    // dxhat = dy * gamma; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
                    let mean_dy = dbeta[ch] / n;
                    let mean_dy_xhat = dgamma[ch] / n;
                    for bi in 0..b {
                        let base = (bi * c + ch) * hw;
                        for i in base..base + hw {
                            dx[i] = g * (dy[i] - mean_dy - cache.xhat[i] * mean_dy_xhat);
                        }
                    }
                }
            }
        }
        dx
    });
    (dx, dgamma, dbeta)
}

/// Batch normalization of a `[C,H,W]` or `[B,C,H,W]` tensor.
///
/// In train mode the batch statistics over `(B, H, W)` are used and the running
/// statistics in `params` are updated; in eval mode the running statistics are used.
pub fn batchnorm<S: Scalar>(
    input: &Tensor<S>,
    params: &mut BatchNormParams<S>,
    mode: BnMode,
) -> Result<Tensor<S>> {
    let dims = as_batched(input.shape())?;
    let (y, cache) = batchnorm_forward_raw(
        dims,
        input.data(),
        params.scale.data(),
        params.shift.data(),
        (&params.running_mean, &params.running_var),
        params.epsilon,
        mode,
    )?;
    if let Some((mean, var)) = &cache.batch_stats {
        params.update_running(mean, var);
    }
    Tensor::from_vec(input.shape(), y)
}

// ---------------------------------------------------------------------------
// Activation and pooling

pub fn activation<S: Scalar>(input: &Tensor<S>, kind: Activation) -> Tensor<S> {
    input.map(|x| kind.apply(x))
}

pub const POOL: usize = 3;

pub fn avgpool_forward_raw<S: Scalar>(dims: [usize; 4], x: &[S]) -> Vec<S> {
    let [b, c, h, w] = dims;
    let (ho, wo) = (h / POOL, w / POOL);
    let inv = S::one() / S::lit((POOL * POOL) as f64);
    let mut out = vec![S::zero(); b * c * ho * wo];
    for plane in 0..b * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = S::zero();
                for dy in 0..POOL {
                    for dx in 0..POOL {
                        s += src[(oy * POOL + dy) * w + ox * POOL + dx];
                    }
                }
                dst[oy * wo + ox] = s * inv;
            }
        }
    }
    out
}

pub fn avgpool_backward_raw<S: Scalar>(dims: [usize; 4], dout: &[S]) -> Vec<S> {
    let [b, c, h, w] = dims;
    let (ho, wo) = (h / POOL, w / POOL);
    let inv = S::one() / S::lit((POOL * POOL) as f64);
    let mut dx = vec![S::zero(); b * c * h * w];
    for plane in 0..b * c {
        let src = &dout[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let g = src[oy * wo + ox] * inv;
                for dy in 0..POOL {
                    for dxx in 0..POOL {
                        dst[(oy * POOL + dy) * w + ox * POOL + dxx] = g;
                    }
                }
            }
        }
    }
    dx
}

/// Non-overlapping 3x3 mean pooling with stride 3; trailing rows/columns are dropped.
pub fn avgpool<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    let dims = as_batched(input.shape())?;
    let [b, c, h, w] = dims;
    if h < POOL || w < POOL {
        return shape_err(format!("pooling needs at least {POOL}x{POOL}, got {h}x{w}"));
    }
    let out = avgpool_forward_raw(dims, input.data());
    let t = Tensor::from_vec(&[b, c, h / POOL, w / POOL], out)?;
    restore_rank(input.shape(), t)
}

// ---------------------------------------------------------------------------
// Factorized readout

#[derive(Clone, Copy, Debug)]
pub struct ReadoutDims {
    pub batch: usize,
    pub channels: usize,
    pub hw: usize,
    pub neurons: usize,
}

/// Returns `(drive [B,N], projection [B,C,N])` where the projection is the
/// spatially-masked channel response kept for the backward pass.
pub fn readout_forward_raw<S: Scalar>(
    d: ReadoutDims,
    x: &[S],
    mask: &[S],
    features: &[S],
    bias: &[S],
) -> (Vec<S>, Vec<S>) {
    let ReadoutDims {
        batch,
        channels,
        hw,
        neurons,
    } = d;
    let rows = batch * channels;
    let mut proj = vec![S::zero(); rows * neurons];
    // proj[(b,c), n] = sum_p x[(b,c), p] * mask[n, p]
    S::gemm(
        rows,
        hw,
        neurons,
        S::one(),
        x,
        hw as isize,
        1,
        mask,
        1,
        hw as isize,
        S::zero(),
        &mut proj,
        neurons as isize,
        1,
    );
    let mut out = vec![S::zero(); batch * neurons];
    for b in 0..batch {
        for n in 0..neurons {
            let mut s = bias[n];
            for c in 0..channels {
                s += proj[(b * channels + c) * neurons + n] * features[n * channels + c];
            }
            out[b * neurons + n] = s;
        }
    }
    (out, proj)
}

/// Returns `(dx, dmask, dfeatures, dbias)`.
pub fn readout_backward_raw<S: Scalar>(
    d: ReadoutDims,
    x: &[S],
    mask: &[S],
    features: &[S],
    proj: &[S],
    dout: &[S],
    want_dx: bool,
) -> (Option<Vec<S>>, Vec<S>, Vec<S>, Vec<S>) {
    let ReadoutDims {
        batch,
        channels,
        hw,
        neurons,
    } = d;
    let rows = batch * channels;
    let mut dproj = vec![S::zero(); rows * neurons];
    let mut dfeat = vec![S::zero(); neurons * channels];
    let mut dbias = vec![S::zero(); neurons];
    for b in 0..batch {
        for n in 0..neurons {
            let g = dout[b * neurons + n];
            dbias[n] += g;
            for c in 0..channels {
                let r = (b * channels + c) * neurons + n;
                dproj[r] = g * features[n * channels + c];
                dfeat[n * channels + c] += g * proj[r];
            }
        }
    }
    let mut dmask = vec![S::zero(); neurons * hw];
    // dmask[n, p] = sum_r dproj[r, n] * x[r, p]
    S::gemm(
        neurons,
        rows,
        hw,
        S::one(),
        &dproj,
        1,
        neurons as isize,
        x,
        hw as isize,
        1,
        S::zero(),
        &mut dmask,
        hw as isize,
        1,
    );
    let dx = want_dx.then(|| {
        let mut dx = vec![S::zero(); rows * hw];
        S::gemm(
            rows,
            neurons,
            hw,
            S::one(),
            &dproj,
            neurons as isize,
            1,
            mask,
            hw as isize,
            1,
            S::zero(),
            &mut dx,
            hw as isize,
            1,
        );
        dx
    });
    (dx, dmask, dfeat, dbias)
}

/// Discrete Laplacian of each `k x k` kernel slice over its interior, stencil
/// `[0,1,0; 1,-4,1; 0,1,0]`. Output is `[C_out, C_in, k-2, k-2]` flattened.
pub fn laplacian_interior<S: Scalar>(kernel: &[S], slices: usize, k: usize) -> Vec<S> {
    let m = k - 2;
    let four = S::lit(4.0);
    let mut out = Vec::with_capacity(slices * m * m);
    for s in 0..slices {
        let p = &kernel[s * k * k..(s + 1) * k * k];
        for y in 1..k - 1 {
            for x in 1..k - 1 {
                out.push(
                    p[(y - 1) * k + x] + p[(y + 1) * k + x] + p[y * k + x - 1] + p[y * k + x + 1]
                        - four * p[y * k + x],
                );
            }
        }
    }
    out
}

/// Adjoint of [`laplacian_interior`].
pub fn laplacian_interior_adjoint<S: Scalar>(dlap: &[S], slices: usize, k: usize) -> Vec<S> {
    let m = k - 2;
    let four = S::lit(4.0);
    let mut d = vec![S::zero(); slices * k * k];
    for s in 0..slices {
        let g = &dlap[s * m * m..(s + 1) * m * m];
        let p = &mut d[s * k * k..(s + 1) * k * k];
        for y in 1..k - 1 {
            for x in 1..k - 1 {
                let v = g[(y - 1) * m + x - 1];
                p[(y - 1) * k + x] += v;
                p[(y + 1) * k + x] += v;
                p[y * k + x - 1] += v;
                p[y * k + x + 1] += v;
                p[y * k + x] -= four * v;
            }
        }
    }
    d
}
