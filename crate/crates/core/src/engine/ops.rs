//! Forward and backward kernels for every op kind.
//!
//! Layouts: dense activations are `[N, F]` with weights `[F_in, F_out]` (the
//! `a W + b` convention); image activations are `NCHW` with convolution weights
//! `[C_out, C_in, K, K]`. Convolutions use stride 1 and symmetric zero padding.
//!
//! Kernels are plain functions over slices so the tape can decide separately
//! which of their intermediates survive the forward pass.

use crate::engine::tensor::Tensor;
use crate::error::{Error, Result};

// ── dense ────────────────────────────────────────────────────────────

pub fn dense_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, fin) = as_matrix(x, "dense input")?;
    let (win, fout) = as_matrix(weight, "dense weight")?;
    if fin != win || bias.numel() != fout {
        return Err(Error::Shape(format!(
            "dense: input {:?}, weight {:?}, bias {:?}",
            x.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let (xd, wd, bd) = (x.data(), weight.data(), bias.data());
    let mut out = vec![0.0; n * fout];
    for r in 0..n {
        let row = &mut out[r * fout..(r + 1) * fout];
        row.copy_from_slice(bd);
        for i in 0..fin {
            let xv = xd[r * fin + i];
            if xv == 0.0 {
                continue;
            }
            let wrow = &wd[i * fout..(i + 1) * fout];
            for (o, w) in row.iter_mut().zip(wrow) {
                *o += xv * w;
            }
        }
    }
    Tensor::new(vec![n, fout], out)
}

/// `dW = xᵀ·dy`, `db = Σ_n dy` (batch-summed).
pub fn dense_backward_params(x: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, fin) = as_matrix(x, "dense input")?;
    let (_, fout) = as_matrix(dy, "dense output grad")?;
    let (xd, gd) = (x.data(), dy.data());
    let mut dw = vec![0.0; fin * fout];
    let mut db = vec![0.0; fout];
    for r in 0..n {
        let grow = &gd[r * fout..(r + 1) * fout];
        for (b, g) in db.iter_mut().zip(grow) {
            *b += g;
        }
        for i in 0..fin {
            let xv = xd[r * fin + i];
            let dwrow = &mut dw[i * fout..(i + 1) * fout];
            for (w, g) in dwrow.iter_mut().zip(grow) {
                *w += xv * g;
            }
        }
    }
    Ok((
        Tensor::new(vec![fin, fout], dw)?,
        Tensor::new(vec![fout], db)?,
    ))
}

/// `dx = dy·Wᵀ`.
pub fn dense_backward_input(weight: &Tensor, dy: &Tensor) -> Result<Tensor> {
    let (fin, fout) = as_matrix(weight, "dense weight")?;
    let (n, _) = as_matrix(dy, "dense output grad")?;
    let (wd, gd) = (weight.data(), dy.data());
    let mut dx = vec![0.0; n * fin];
    for r in 0..n {
        let grow = &gd[r * fout..(r + 1) * fout];
        for i in 0..fin {
            let wrow = &wd[i * fout..(i + 1) * fout];
            dx[r * fin + i] = wrow.iter().zip(grow).map(|(w, g)| w * g).sum();
        }
    }
    Tensor::new(vec![n, fin], dx)
}

// ── matrix product ───────────────────────────────────────────────────

/// Storage order of a dense matrix operand.
#[derive(Debug, Clone, Copy)]
enum Layout {
    RowMajor,
    ColMajor,
}

/// `c = a·b` with `a: [m, k]`, `b: [k, n]` and row-major `c: [m, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], la: Layout, b: &[f64], lb: Layout, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    let strides = |layout: Layout, rows: usize, cols: usize| match layout {
        Layout::RowMajor => (cols as isize, 1),
        Layout::ColMajor => (1, rows as isize),
    };
    let (rsa, csa) = strides(la, m, k);
    let (rsb, csb) = strides(lb, k, n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the assertion above bounds every index reachable through these
    // shapes and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// ── conv2d ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x_shape: &[usize], w_shape: &[usize], pad: usize) -> Result<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects rank-4 input and weight, got {x_shape:?} and {w_shape:?}"
            )));
        }
        let (n, cin, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (cout, wcin, k, k2) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if wcin != cin || k != k2 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::Shape(format!(
                "conv2d: input {x_shape:?} incompatible with weight {w_shape:?} (padding {pad})"
            )));
        }
        Ok(ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            k,
            pad,
            ho: h + 2 * pad - k + 1,
            wo: w + 2 * pad - k + 1,
        })
    }

    /// Output index range along one axis for which `o + kk - pad` lands in `[0, len)`.
    #[inline]
    fn valid(&self, kk: usize, len: usize, out_len: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kk);
        let hi = (len + self.pad).saturating_sub(kk).min(out_len);
        (lo, hi.max(lo))
    }
}

pub fn conv2d_output_shape(input: &[usize], weight: &[usize], pad: usize) -> Result<Vec<usize>> {
    let g = ConvGeom::new(input, weight, pad)?;
    Ok(vec![g.n, g.cout, g.ho, g.wo])
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }

    /// `[cin·k·k, n·ho·wo]` patch matrix of `x`.
    fn im2col(&self, xd: &[f64]) -> Vec<f64> {
        let (hw, ohw, ncols) = (self.h * self.w, self.ho * self.wo, self.cols());
        let mut cols = vec![0.0; self.rows() * ncols];
        for c in 0..self.cin {
            for kh in 0..self.k {
                let (oh_lo, oh_hi) = self.valid(kh, self.h, self.ho);
                for kw in 0..self.k {
                    let (ow_lo, ow_hi) = self.valid(kw, self.w, self.wo);
                    let r = (c * self.k + kh) * self.k + kw;
                    let row = &mut cols[r * ncols..(r + 1) * ncols];
                    for n in 0..self.n {
                        let iplane = &xd[(n * self.cin + c) * hw..(n * self.cin + c + 1) * hw];
                        for oh in oh_lo..oh_hi {
                            let ih = oh + kh - self.pad;
                            let dst = n * ohw + oh * self.wo;
                            let src = ih * self.w + kw + ow_lo - self.pad;
                            let len = ow_hi - ow_lo;
                            row[dst + ow_lo..dst + ow_hi].copy_from_slice(&iplane[src..src + len]);
                        }
                    }
                }
            }
        }
        cols
    }

    /// Scatter-add a patch matrix back into an input-shaped buffer.
    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let (hw, ohw, ncols) = (self.h * self.w, self.ho * self.wo, self.cols());
        let mut dx = vec![0.0; self.n * self.cin * hw];
        for c in 0..self.cin {
            for kh in 0..self.k {
                let (oh_lo, oh_hi) = self.valid(kh, self.h, self.ho);
                for kw in 0..self.k {
                    let (ow_lo, ow_hi) = self.valid(kw, self.w, self.wo);
                    let r = (c * self.k + kh) * self.k + kw;
                    let row = &cols[r * ncols..(r + 1) * ncols];
                    for n in 0..self.n {
                        let dplane = &mut dx[(n * self.cin + c) * hw..(n * self.cin + c + 1) * hw];
                        for oh in oh_lo..oh_hi {
                            let ih = oh + kh - self.pad;
                            let src = n * ohw + oh * self.wo;
                            let dst = ih * self.w + kw + ow_lo - self.pad;
                            let len = ow_hi - ow_lo;
                            for (d, v) in dplane[dst..dst + len].iter_mut().zip(&row[src + ow_lo..src + ow_hi]) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// NCHW `dy` as a `[cout, n·ho·wo]` matrix.
    fn nchw_to_mat(&self, d: &[f64]) -> Vec<f64> {
        let (ohw, ncols) = (self.ho * self.wo, self.cols());
        let mut m = vec![0.0; self.cout * ncols];
        for n in 0..self.n {
            for o in 0..self.cout {
                m[o * ncols + n * ohw..o * ncols + (n + 1) * ohw]
                    .copy_from_slice(&d[(n * self.cout + o) * ohw..(n * self.cout + o + 1) * ohw]);
            }
        }
        m
    }
}

pub fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: &Tensor, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::new(x.shape(), weight.shape(), pad)?;
    if bias.numel() != g.cout {
        return Err(Error::Shape(format!(
            "conv2d bias {:?} for {} output channels",
            bias.shape(),
            g.cout
        )));
    }
    let bd = bias.data();
    let cols = g.im2col(x.data());
    let (rows, ncols, ohw) = (g.rows(), g.cols(), g.ho * g.wo);
    let mut acc = vec![0.0; g.cout * ncols];
    gemm(g.cout, rows, ncols, weight.data(), Layout::RowMajor, &cols, Layout::RowMajor, &mut acc);
    let mut out = vec![0.0; g.n * g.cout * ohw];
    for o in 0..g.cout {
        for n in 0..g.n {
            let src = &acc[o * ncols + n * ohw..o * ncols + (n + 1) * ohw];
            for (d, v) in out[(n * g.cout + o) * ohw..(n * g.cout + o + 1) * ohw].iter_mut().zip(src) {
                *d = v + bd[o];
            }
        }
    }
    Tensor::new(vec![g.n, g.cout, g.ho, g.wo], out)
}

/// Weight and bias gradients; needs the layer input.
pub fn conv2d_backward_params(
    x: &Tensor,
    weight_shape: &[usize],
    dy: &Tensor,
    pad: usize,
) -> Result<(Tensor, Tensor)> {
    let g = ConvGeom::new(x.shape(), weight_shape, pad)?;
    let cols = g.im2col(x.data());
    let dm = g.nchw_to_mat(dy.data());
    let (rows, ncols) = (g.rows(), g.cols());
    let mut dw = vec![0.0; g.cout * rows];
    gemm(g.cout, ncols, rows, &dm, Layout::RowMajor, &cols, Layout::ColMajor, &mut dw);
    let db: Vec<f64> = dm.chunks(ncols).map(|row| row.iter().sum()).collect();
    Ok((
        Tensor::new(weight_shape.to_vec(), dw)?,
        Tensor::new(vec![g.cout], db)?,
    ))
}

/// Input gradient; needs only the weight.
pub fn conv2d_backward_input(
    input_shape: &[usize],
    weight: &Tensor,
    dy: &Tensor,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(input_shape, weight.shape(), pad)?;
    let dm = g.nchw_to_mat(dy.data());
    let (rows, ncols) = (g.rows(), g.cols());
    let mut dcols = vec![0.0; rows * ncols];
    gemm(rows, g.cout, ncols, weight.data(), Layout::ColMajor, &dm, Layout::RowMajor, &mut dcols);
    Tensor::new(input_shape.to_vec(), g.col2im(&dcols))
}

// ── batch norm ───────────────────────────────────────────────────────

/// Channel count and number of elements reduced per channel for `[N, C]` or `[N, C, H, W]`.
fn bn_geometry(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        2 => Ok((shape[0], shape[1], 1)),
        4 => Ok((shape[0], shape[1], shape[2] * shape[3])),
        _ => Err(Error::Shape(format!(
            "batchnorm expects rank 2 or 4, got {shape:?}"
        ))),
    }
}

pub fn bn_channels(shape: &[usize]) -> Result<usize> {
    bn_geometry(shape).map(|(_, c, _)| c)
}

#[inline]
fn for_channel<F: FnMut(usize)>(n: usize, c: usize, ch: usize, spatial: usize, mut f: F) {
    for b in 0..n {
        let base = (b * c + ch) * spatial;
        for i in base..base + spatial {
            f(i);
        }
    }
}

/// Output of batch-statistics normalization.
#[derive(Debug, Clone)]
pub struct BnBatchForward {
    pub output: Tensor,
    pub normalized: Tensor,
    /// Per-channel `1 / sqrt(var + eps)`.
    pub inv_std: Tensor,
    pub mean: Vec<f64>,
    /// Biased per-channel variance.
    pub var: Vec<f64>,
}

pub fn bn_forward_batch(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<BnBatchForward> {
    let (n, c, spatial) = bn_geometry(x.shape())?;
    check_channels(gamma, beta, c)?;
    let m = (n * spatial) as f64;
    let xd = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    let mut inv_std = vec![0.0; c];
    let mut xhat = vec![0.0; xd.len()];
    let mut out = vec![0.0; xd.len()];
    for ch in 0..c {
        let mut s = 0.0;
        for_channel(n, c, ch, spatial, |i| s += xd[i]);
        let mu = s / m;
        let mut v = 0.0;
        for_channel(n, c, ch, spatial, |i| v += (xd[i] - mu) * (xd[i] - mu));
        let v = v / m;
        let is = 1.0 / (v + eps).sqrt();
        let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
        for_channel(n, c, ch, spatial, |i| {
            xhat[i] = (xd[i] - mu) * is;
            out[i] = gm * xhat[i] + bt;
        });
        mean[ch] = mu;
        var[ch] = v;
        inv_std[ch] = is;
    }
    Ok(BnBatchForward {
        output: Tensor::new(x.shape().to_vec(), out)?,
        normalized: Tensor::new(x.shape().to_vec(), xhat)?,
        inv_std: Tensor::new(vec![c], inv_std)?,
        mean,
        var,
    })
}

/// Normalization with stored running statistics; returns `(output, normalized)`.
pub fn bn_forward_running(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f64,
) -> Result<(Tensor, Tensor)> {
    let (n, c, spatial) = bn_geometry(x.shape())?;
    check_channels(gamma, beta, c)?;
    check_channels(running_mean, running_var, c)?;
    let xd = x.data();
    let mut xhat = vec![0.0; xd.len()];
    let mut out = vec![0.0; xd.len()];
    for ch in 0..c {
        let mu = running_mean.data()[ch];
        let is = 1.0 / (running_var.data()[ch] + eps).sqrt();
        let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
        for_channel(n, c, ch, spatial, |i| {
            xhat[i] = (xd[i] - mu) * is;
            out[i] = gm * xhat[i] + bt;
        });
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        Tensor::new(x.shape().to_vec(), xhat)?,
    ))
}

/// `dγ = Σ dy·x̂`, `dβ = Σ dy`; identical in both statistics modes.
pub fn bn_backward_params(normalized: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, c, spatial) = bn_geometry(normalized.shape())?;
    let (xh, gd) = (normalized.data(), dy.data());
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let (mut sg, mut sb) = (0.0, 0.0);
        for_channel(n, c, ch, spatial, |i| {
            sg += gd[i] * xh[i];
            sb += gd[i];
        });
        dgamma[ch] = sg;
        dbeta[ch] = sb;
    }
    Ok((Tensor::new(vec![c], dgamma)?, Tensor::new(vec![c], dbeta)?))
}

/// Input gradient under batch statistics:
/// `dx = γ·inv_std/m · (m·dy − Σdy − x̂·Σ(dy·x̂))`.
pub fn bn_backward_input_batch(
    normalized: &Tensor,
    inv_std: &Tensor,
    gamma: &Tensor,
    dy: &Tensor,
) -> Result<Tensor> {
    let (n, c, spatial) = bn_geometry(normalized.shape())?;
    let m = (n * spatial) as f64;
    let (xh, gd) = (normalized.data(), dy.data());
    let mut dx = vec![0.0; gd.len()];
    for ch in 0..c {
        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
        for_channel(n, c, ch, spatial, |i| {
            sum_g += gd[i];
            sum_gx += gd[i] * xh[i];
        });
        let scale = gamma.data()[ch] * inv_std.data()[ch] / m;
        for_channel(n, c, ch, spatial, |i| {
            dx[i] = scale * (m * gd[i] - sum_g - xh[i] * sum_gx);
        });
    }
    Tensor::new(dy.shape().to_vec(), dx)
}

/// Input gradient under running statistics: `dx = dy·γ/sqrt(var_run + eps)`.
pub fn bn_backward_input_running(
    gamma: &Tensor,
    running_var: &Tensor,
    eps: f64,
    dy: &Tensor,
) -> Result<Tensor> {
    let (n, c, spatial) = bn_geometry(dy.shape())?;
    let gd = dy.data();
    let mut dx = vec![0.0; gd.len()];
    for ch in 0..c {
        let scale = gamma.data()[ch] / (running_var.data()[ch] + eps).sqrt();
        for_channel(n, c, ch, spatial, |i| dx[i] = scale * gd[i]);
    }
    Tensor::new(dy.shape().to_vec(), dx)
}

fn check_channels(a: &Tensor, b: &Tensor, c: usize) -> Result<()> {
    if a.numel() != c || b.numel() != c {
        return Err(Error::Shape(format!(
            "batchnorm parameters {:?}/{:?} for {c} channels",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

// ── relu ─────────────────────────────────────────────────────────────

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

/// Uses the forward output as the mask (`y > 0`).
pub fn relu_backward(output: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if output.shape() != dy.shape() {
        return Err(Error::Shape("relu grad shape mismatch".into()));
    }
    let data = output
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(dy.shape().to_vec(), data)
}

// ── 2×2 max pooling ─────────────────────────────────────────────────

pub fn maxpool_output_shape(input: &[usize]) -> Result<Vec<usize>> {
    if input.len() != 4 || !input[2].is_multiple_of(2) || !input[3].is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "2x2 max pooling needs NCHW with even H and W, got {input:?}"
        )));
    }
    Ok(vec![input[0], input[1], input[2] / 2, input[3] / 2])
}

/// Returns `(output, argmax)`; `argmax` stores the flat input index of each maximum.
pub fn maxpool_forward(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let oshape = maxpool_output_shape(x.shape())?;
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let (ho, wo) = (oshape[2], oshape[3]);
    let planes = oshape[0] * oshape[1];
    let xd = x.data();
    let mut out = vec![0.0; planes * ho * wo];
    let mut arg = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = p * h * w + (2 * oh) * w + 2 * ow;
                for (dh, dw) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = p * h * w + (2 * oh + dh) * w + 2 * ow + dw;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                let o = (p * ho + oh) * wo + ow;
                out[o] = xd[best];
                arg[o] = best as f64;
            }
        }
    }
    Ok((Tensor::new(oshape.clone(), out)?, Tensor::new(oshape, arg)?))
}

pub fn maxpool_backward(argmax: &Tensor, input_shape: &[usize], dy: &Tensor) -> Result<Tensor> {
    if argmax.shape() != dy.shape() {
        return Err(Error::Shape("maxpool grad shape mismatch".into()));
    }
    let mut dx = Tensor::zeros(input_shape);
    let dxd = dx.data_mut();
    for (&a, &g) in argmax.data().iter().zip(dy.data()) {
        dxd[a as usize] += g;
    }
    Ok(dx)
}

// ── helpers ──────────────────────────────────────────────────────────

fn as_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("{what} must be rank 2, got {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn dense_shape_rule() {
        let x = t(&[1, 3], &[1.0, 2.0, 3.0]);
        let w = Tensor::zeros(&[3, 2]);
        let b = Tensor::zeros(&[2]);
        assert_eq!(dense_forward(&x, &w, &b).unwrap().shape(), &[1, 2]);
        assert!(dense_forward(&x, &Tensor::zeros(&[2, 2]), &b).is_err());
    }

    #[test]
    fn dense_weight_grad_is_input_for_unit_upstream() {
        // loss = W·x with W 1×3 stored as [3, 1]
        let x = t(&[1, 3], &[1.0, 2.0, 3.0]);
        let dy = t(&[1, 1], &[1.0]);
        let (dw, db) = dense_backward_params(&x, &dy).unwrap();
        assert_eq!(dw.data(), &[1.0, 2.0, 3.0]);
        assert_eq!(db.data(), &[1.0]);
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let y = conv2d_forward(&x, &w, &Tensor::zeros(&[1]), 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[3, 1, 3, 3]);
        assert!(conv2d_forward(&x, &w, &Tensor::zeros(&[3]), 1).is_err());
    }

    #[test]
    fn batch_stats_with_single_sample_stay_finite() {
        let x = t(&[1, 2], &[0.3, -1.2]);
        let out = bn_forward_batch(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), 1e-5).unwrap();
        assert!(out.output.is_finite());
        assert_eq!(out.var, vec![0.0, 0.0]);
        assert!(out.output.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = t(&[1, 1, 2, 2], &[0.1, 0.9, 0.3, 0.2]);
        let (y, arg) = maxpool_forward(&x).unwrap();
        assert_eq!(y.data(), &[0.9]);
        let dx = maxpool_backward(&arg, x.shape(), &t(&[1, 1, 1, 1], &[2.0])).unwrap();
        assert_eq!(dx.data(), &[0.0, 2.0, 0.0, 0.0]);
    }
}
