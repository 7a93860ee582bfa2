//! Numeric kernels behind the tensor ops.
//!
//! Every kernel accumulates each output element in a fixed sequential order,
//! so results are bitwise reproducible run to run. Convolution lowers to
//! im2col plus matmul; the backward pass recomputes im2col instead of keeping
//! the column buffers alive.

use super::Scalar;

/// C = A x B with A `[m, k]`, B `[k, n]`, all row-major. `c` must hold `m * n`
/// zeros (or prior values to accumulate onto).
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// C += A x B^T with A `[m, k]`, B `[n, k]`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

/// C += A^T x B with A `[k, m]`, B `[k, n]`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// Convolution geometry shared by forward and backward.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn in_per_group(&self) -> usize {
        self.in_c / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_c / self.groups
    }

    /// Rows of the im2col matrix: receptive-field size per output pixel.
    pub fn patch(&self) -> usize {
        self.in_per_group() * self.kh * self.kw
    }
}

/// Expands one sample's channels for one group into a `[patch, out_h * out_w]`
/// row-major matrix. Out-of-bounds taps read as zero.
fn im2col<T: Scalar>(xg: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (h, w) = (g.in_h, g.in_w);
    let (oh, ow) = (g.out_h, g.out_w);
    let ohw = oh * ow;
    debug_assert_eq!(cols.len(), g.patch() * ohw);
    cols.fill(T::zero());
    let mut row = 0;
    for c in 0..g.in_per_group() {
        let plane = &xg[c * h * w..(c + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let out_row = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut out_row[oy * ow..(oy + 1) * ow];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ox] = src[ix as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add of a `[patch, out_h * out_w]` gradient back onto one sample's
/// input channels for one group; exact adjoint of [`im2col`].
fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dxg: &mut [T]) {
    let (h, w) = (g.in_h, g.in_w);
    let (oh, ow) = (g.out_h, g.out_w);
    let ohw = oh * ow;
    let mut row = 0;
    for c in 0..g.in_per_group() {
        let plane = &mut dxg[c * h * w..(c + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let col_row = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &col_row[oy * ow..(oy + 1) * ow];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Forward convolution; returns the `[batch, out_c, out_h, out_w]` buffer.
pub fn conv_forward<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let ohw = g.out_h * g.out_w;
    let (cpg_in, cpg_out) = (g.in_per_group(), g.out_per_group());
    let patch = g.patch();
    let mut out = vec![T::zero(); g.batch * g.out_c * ohw];
    let mut cols = vec![T::zero(); patch * ohw];
    for nidx in 0..g.batch {
        let x_n = &x[nidx * g.in_c * g.in_h * g.in_w..];
        let out_n = &mut out[nidx * g.out_c * ohw..(nidx + 1) * g.out_c * ohw];
        for grp in 0..g.groups {
            let xg = &x_n[grp * cpg_in * g.in_h * g.in_w..(grp + 1) * cpg_in * g.in_h * g.in_w];
            im2col(xg, g, &mut cols);
            let wg = &weight[grp * cpg_out * patch..(grp + 1) * cpg_out * patch];
            let og = &mut out_n[grp * cpg_out * ohw..(grp + 1) * cpg_out * ohw];
            matmul_nn(wg, &cols, og, cpg_out, patch, ohw);
        }
        if let Some(b) = bias {
            for (c, &bv) in b.iter().enumerate() {
                for v in &mut out_n[c * ohw..(c + 1) * ohw] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Gradients of a convolution w.r.t. input, weight, and bias.
pub fn conv_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    has_bias: bool,
    g: &ConvGeom,
    dout: &[T],
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    let ohw = g.out_h * g.out_w;
    let (cpg_in, cpg_out) = (g.in_per_group(), g.out_per_group());
    let patch = g.patch();
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); weight.len()];
    let mut dbias = has_bias.then(|| vec![T::zero(); g.out_c]);
    let mut cols = vec![T::zero(); patch * ohw];
    let mut dcols = vec![T::zero(); patch * ohw];
    for nidx in 0..g.batch {
        let x_n = &x[nidx * g.in_c * g.in_h * g.in_w..];
        let dx_n = &mut dx[nidx * g.in_c * g.in_h * g.in_w..];
        let dout_n = &dout[nidx * g.out_c * ohw..(nidx + 1) * g.out_c * ohw];
        for grp in 0..g.groups {
            let xg = &x_n[grp * cpg_in * g.in_h * g.in_w..(grp + 1) * cpg_in * g.in_h * g.in_w];
            im2col(xg, g, &mut cols);
            let wg = &weight[grp * cpg_out * patch..(grp + 1) * cpg_out * patch];
            let dwg = &mut dw[grp * cpg_out * patch..(grp + 1) * cpg_out * patch];
            let dog = &dout_n[grp * cpg_out * ohw..(grp + 1) * cpg_out * ohw];
            // dW = dOut x cols^T, dcols = W^T x dOut
            matmul_nt(dog, &cols, dwg, cpg_out, ohw, patch);
            dcols.fill(T::zero());
            matmul_tn(wg, dog, &mut dcols, patch, cpg_out, ohw);
            let dxg =
                &mut dx_n[grp * cpg_in * g.in_h * g.in_w..(grp + 1) * cpg_in * g.in_h * g.in_w];
            col2im_add(&dcols, g, dxg);
        }
        if let Some(db) = dbias.as_mut() {
            for c in 0..g.out_c {
                let mut acc = T::zero();
                for &v in &dout_n[c * ohw..(c + 1) * ohw] {
                    acc += v;
                }
                db[c] += acc;
            }
        }
    }
    (dx, dw, dbias)
}

/// Row-wise softmax over the last axis, numerically stabilized by the row max.
pub fn softmax_rows<T: Scalar>(x: &[T], row_len: usize) -> Vec<T> {
    debug_assert!(row_len > 0 && x.len() % row_len == 0);
    let mut out = vec![T::zero(); x.len()];
    for (row, orow) in x.chunks_exact(row_len).zip(out.chunks_exact_mut(row_len)) {
        let mut mx = row[0];
        for &v in row {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v - mx).exp();
            *o = e;
            sum += e;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Per-channel batch statistics and the normalized output for training-mode
/// batch norm over a `[batch, c, h, w]` input. Variance is the biased one
/// used for normalization; `inv_std` already includes `eps`.
pub struct BnForward<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

pub fn bn_forward_train<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    n: usize,
    c: usize,
    hw: usize,
    eps: f64,
) -> BnForward<T> {
    let m = T::from_f64((n * hw) as f64);
    let chw = c * hw;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for nidx in 0..n {
            let plane = &x[nidx * chw + ch * hw..nidx * chw + (ch + 1) * hw];
            for &v in plane {
                acc += v;
            }
        }
        let mu = acc / m;
        let mut vacc = T::zero();
        for nidx in 0..n {
            let plane = &x[nidx * chw + ch * hw..nidx * chw + (ch + 1) * hw];
            for &v in plane {
                let d = v - mu;
                vacc += d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = vacc / m;
    }
    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::one() / (v + T::from_f64(eps)).sqrt())
        .collect();
    let (y, xhat) = bn_normalize(x, gamma, beta, &mean, &inv_std, n, c, hw);
    BnForward {
        y,
        xhat,
        mean,
        var,
        inv_std,
    }
}

/// Normalizes with the provided per-channel statistics (eval mode reuses this
/// with running stats). Returns `(y, xhat)`.
pub fn bn_normalize<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    inv_std: &[T],
    n: usize,
    c: usize,
    hw: usize,
) -> (Vec<T>, Vec<T>) {
    let chw = c * hw;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for nidx in 0..n {
        for ch in 0..c {
            let base = nidx * chw + ch * hw;
            let (mu, istd, ga, be) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for i in 0..hw {
                let xh = (x[base + i] - mu) * istd;
                xhat[base + i] = xh;
                y[base + i] = ga * xh + be;
            }
        }
    }
    (y, xhat)
}

/// Training-mode batch norm backward: gradients couple through the batch
/// statistics. Returns `(dx, dgamma, dbeta)`.
pub fn bn_backward_train<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    n: usize,
    c: usize,
    hw: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let m = T::from_f64((n * hw) as f64);
    let chw = c * hw;
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for nidx in 0..n {
            let base = nidx * chw + ch * hw;
            for i in 0..hw {
                sum_dy += dy[base + i];
                sum_dy_xhat += dy[base + i] * xhat[base + i];
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let scale = gamma[ch] * inv_std[ch] / m;
        for nidx in 0..n {
            let base = nidx * chw + ch * hw;
            for i in 0..hw {
                dx[base + i] =
                    scale * (m * dy[base + i] - sum_dy - xhat[base + i] * sum_dy_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Eval-mode batch norm backward: the statistics are constants, so dx is a
/// plain per-channel scaling. Returns `(dx, dgamma, dbeta)`.
pub fn bn_backward_eval<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    n: usize,
    c: usize,
    hw: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let chw = c * hw;
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let scale = gamma[ch] * inv_std[ch];
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for nidx in 0..n {
            let base = nidx * chw + ch * hw;
            for i in 0..hw {
                sum_dy += dy[base + i];
                sum_dy_xhat += dy[base + i] * xhat[base + i];
                dx[base + i] = dy[base + i] * scale;
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
    }
    (dx, dgamma, dbeta)
}
