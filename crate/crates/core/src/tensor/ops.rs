//! Forward ops. Each method validates shapes, computes the output buffer via
//! the kernels, and records a graph node when any input tracks gradients.

use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::{autograd_enabled, Scalar, Tensor};
use crate::error::{Error, Result};

/// Values below this are clamped before taking the log; the gradient is zero
/// on the clamped region. Keeps log-of-softmax finite when a probability
/// underflows.
pub(crate) const LOG_FLOOR: f64 = 1e-30;

pub(crate) struct Node<T: Scalar> {
    pub op: Op<T>,
}

pub(crate) enum Op<T: Scalar> {
    Add {
        lhs: Tensor<T>,
        rhs: Tensor<T>,
    },
    Mul {
        lhs: Tensor<T>,
        rhs: Tensor<T>,
    },
    Matmul {
        lhs: Tensor<T>,
        rhs: Tensor<T>,
    },
    Conv2d {
        input: Tensor<T>,
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
        geom: ConvGeom,
    },
    Relu {
        input: Tensor<T>,
    },
    BatchNorm {
        input: Tensor<T>,
        gamma: Tensor<T>,
        beta: Tensor<T>,
        xhat: Arc<Vec<T>>,
        inv_std: Arc<Vec<T>>,
        training: bool,
    },
    Softmax {
        input: Tensor<T>,
        output: Arc<Vec<T>>,
    },
    Log {
        input: Tensor<T>,
    },
    Sum {
        input: Tensor<T>,
        axes: Option<Vec<usize>>,
    },
    Mean {
        input: Tensor<T>,
        axes: Option<Vec<usize>>,
    },
    Pad {
        input: Tensor<T>,
        pads: Vec<(usize, usize)>,
    },
    Crop {
        input: Tensor<T>,
        offsets: Vec<usize>,
    },
}

/// Right-aligned broadcast shape of two operands, NumPy rules: paired extents
/// must match or one of them must be 1.
pub(crate) fn broadcast_shapes(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::shape(
                op,
                format!("cannot broadcast {:?} with {:?} (dim {}: {} vs {})", a, b, i, da, db),
            ));
        };
    }
    Ok(out)
}

/// Strides mapping an index in `out_shape` to an element of a tensor with
/// `shape`, right-aligned, 0 on broadcast dimensions.
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1usize;
    for d in (0..shape.len()).rev() {
        strides[offset + d] = if shape[d] == 1 { 0 } else { s };
        s *= shape[d];
    }
    strides
}

/// Walks every index of `shape` in row-major order, handing `f` the linear
/// offsets into two broadcast operands.
pub(crate) fn for_each_broadcast(
    shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = shape.len();
    let n: usize = shape.iter().product();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for lin in 0..n {
        f(lin, oa, ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
        }
    }
}

/// Output shape of a reduction with the reduced axes removed, plus a stride
/// table mapping each input dimension into the output buffer (0 on reduced
/// dims).
pub(crate) fn reduce_layout(
    op: &'static str,
    shape: &[usize],
    axes: Option<&[usize]>,
) -> Result<(Vec<usize>, Vec<usize>, usize)> {
    let rank = shape.len();
    let mut reduced = vec![false; rank];
    match axes {
        None => reduced.fill(true),
        Some(list) => {
            for &a in list {
                if a >= rank {
                    return Err(Error::shape(
                        op,
                        format!("axis {} out of range for shape {:?}", a, shape),
                    ));
                }
                if reduced[a] {
                    return Err(Error::shape(op, format!("axis {} repeated", a)));
                }
                reduced[a] = true;
            }
        }
    }
    let out_shape: Vec<usize> = (0..rank).filter(|&d| !reduced[d]).map(|d| shape[d]).collect();
    let mut map = vec![0usize; rank];
    let mut s = 1usize;
    for d in (0..rank).rev() {
        if !reduced[d] {
            map[d] = s;
            s *= shape[d];
        }
    }
    let count: usize = (0..rank).filter(|&d| reduced[d]).map(|d| shape[d]).product();
    Ok((out_shape, map, count))
}

/// Linear offsets into the reduction output for each input element, in input
/// row-major order.
pub(crate) fn for_each_reduce_target(shape: &[usize], map: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    let n: usize = shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for lin in 0..n {
        f(lin, off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += map[d];
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
            off -= map[d] * shape[d];
        }
    }
}

fn binary<T: Scalar>(
    name: &'static str,
    lhs: &Tensor<T>,
    rhs: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<(Vec<T>, Vec<usize>)> {
    let (a, b) = (lhs.data(), rhs.data());
    if lhs.shape() == rhs.shape() {
        let out: Vec<T> = a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
        return Ok((out, lhs.shape().to_vec()));
    }
    let out_shape = broadcast_shapes(name, lhs.shape(), rhs.shape())?;
    let sa = broadcast_strides(lhs.shape(), &out_shape);
    let sb = broadcast_strides(rhs.shape(), &out_shape);
    let mut out = vec![T::zero(); out_shape.iter().product()];
    for_each_broadcast(&out_shape, &sa, &sb, |lin, oa, ob| {
        out[lin] = f(a[oa], b[ob]);
    });
    Ok((out, out_shape))
}

fn record<T: Scalar>(data: Vec<T>, shape: Vec<usize>, wants: bool, op: impl FnOnce() -> Op<T>) -> Tensor<T> {
    let node = (wants && autograd_enabled()).then(|| Node { op: op() });
    Tensor::from_parts(data, shape, node)
}

impl<T: Scalar> Tensor<T> {
    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (data, shape) = binary("add", self, rhs, |a, b| a + b)?;
        let wants = self.requires_grad() || rhs.requires_grad();
        Ok(record(data, shape, wants, || Op::Add {
            lhs: self.clone(),
            rhs: rhs.clone(),
        }))
    }

    /// Elementwise product with right-aligned broadcasting.
    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (data, shape) = binary("mul", self, rhs, |a, b| a * b)?;
        let wants = self.requires_grad() || rhs.requires_grad();
        Ok(record(data, shape, wants, || Op::Mul {
            lhs: self.clone(),
            rhs: rhs.clone(),
        }))
    }

    /// Multiplication by a constant, recorded as `mul` with a rank-0 operand.
    pub fn scale(&self, k: f64) -> Tensor<T> {
        self.mul(&Tensor::scalar(T::from_f64(k)))
            .expect("rank-0 broadcasts with anything")
    }

    /// `self - rhs`, composed from `add` and a scaled operand.
    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.add(&rhs.scale(-1.0))
    }

    /// 2-D matrix product `[m, k] x [k, n]`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() != 2 || rhs.rank() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("expects two rank-2 tensors, got {:?} and {:?}", self.shape(), rhs.shape()),
            ));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (rhs.shape()[0], rhs.shape()[1]);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dims differ: {:?} x {:?}", self.shape(), rhs.shape()),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nn(self.data(), rhs.data(), &mut out, m, k, n);
        let wants = self.requires_grad() || rhs.requires_grad();
        Ok(record(out, vec![m, n], wants, || Op::Matmul {
            lhs: self.clone(),
            rhs: rhs.clone(),
        }))
    }

    /// 2-D convolution over `[batch, in_c, h, w]` with weight
    /// `[out_c, in_c / groups, kh, kw]` and optional `[out_c]` bias.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Tensor<T>> {
        if self.rank() != 4 || weight.rank() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "expects rank-4 input and weight, got {:?} and {:?}",
                    self.shape(),
                    weight.shape()
                ),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (batch, in_c, h, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        let (out_c, w_in, kh, kw) = (
            weight.shape()[0],
            weight.shape()[1],
            weight.shape()[2],
            weight.shape()[3],
        );
        if groups == 0 || in_c % groups != 0 || out_c % groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("groups {} must divide in_c {} and out_c {}", groups, in_c, out_c),
            ));
        }
        if w_in != in_c / groups {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "weight expects {} input channels per group, input has {} ({} groups)",
                    w_in,
                    in_c / groups,
                    groups
                ),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [out_c] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?} does not match out_c {}", b.shape(), out_c),
                ));
            }
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "kernel {}x{} exceeds padded input {}x{}",
                    kh,
                    kw,
                    h + 2 * padding,
                    w + 2 * padding
                ),
            ));
        }
        let out_h = (h + 2 * padding - kh) / stride + 1;
        let out_w = (w + 2 * padding - kw) / stride + 1;
        let geom = ConvGeom {
            batch,
            in_c,
            in_h: h,
            in_w: w,
            out_c,
            kh,
            kw,
            stride,
            padding,
            groups,
            out_h,
            out_w,
        };
        let out = kernels::conv_forward(self.data(), weight.data(), bias.map(|b| b.data()), &geom);
        let wants = self.requires_grad()
            || weight.requires_grad()
            || bias.is_some_and(|b| b.requires_grad());
        Ok(record(out, vec![batch, out_c, out_h, out_w], wants, || {
            Op::Conv2d {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.cloned(),
                geom,
            }
        }))
    }

    /// Depthwise convolution: one filter per channel, `groups == in_c`.
    pub fn depthwise_conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        let in_c = if self.rank() == 4 { self.shape()[1] } else { 0 };
        self.conv2d(weight, bias, stride, padding, in_c.max(1))
    }

    /// Elementwise max(x, 0). The subgradient at 0 is 0.
    pub fn relu(&self) -> Tensor<T> {
        let data: Vec<T> = self
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        record(data, self.shape().to_vec(), self.requires_grad(), || {
            Op::Relu { input: self.clone() }
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor<T>> {
        if self.rank() == 0 {
            return Err(Error::shape("softmax", "rank-0 tensor has no axis"));
        }
        let row = self.shape()[self.rank() - 1];
        let out = kernels::softmax_rows(self.data(), row);
        let saved = Arc::new(out.clone());
        Ok(record(out, self.shape().to_vec(), self.requires_grad(), || {
            Op::Softmax {
                input: self.clone(),
                output: saved,
            }
        }))
    }

    /// Elementwise natural log; inputs are clamped at 1e-30 first.
    pub fn log(&self) -> Tensor<T> {
        let floor = T::from_f64(LOG_FLOOR);
        let data: Vec<T> = self
            .data()
            .iter()
            .map(|&v| if v > floor { v.ln() } else { floor.ln() })
            .collect();
        record(data, self.shape().to_vec(), self.requires_grad(), || {
            Op::Log { input: self.clone() }
        })
    }

    /// Sum of every element, rank-0 result.
    pub fn sum_all(&self) -> Tensor<T> {
        self.sum_axes_impl(None).expect("full reduction is always valid")
    }

    /// Mean of every element, rank-0 result.
    pub fn mean_all(&self) -> Tensor<T> {
        self.mean_axes_impl(None).expect("full reduction is always valid")
    }

    /// Sum over the given axes; reduced axes are removed from the shape.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Tensor<T>> {
        self.sum_axes_impl(Some(axes))
    }

    /// Mean over the given axes; reduced axes are removed from the shape.
    pub fn mean_axes(&self, axes: &[usize]) -> Result<Tensor<T>> {
        self.mean_axes_impl(Some(axes))
    }

    fn sum_axes_impl(&self, axes: Option<&[usize]>) -> Result<Tensor<T>> {
        let (out_shape, map, _) = reduce_layout("sum", self.shape(), axes)?;
        let mut out = vec![T::zero(); out_shape.iter().product()];
        let data = self.data();
        for_each_reduce_target(self.shape(), &map, |lin, off| {
            out[off] += data[lin];
        });
        let axes = axes.map(|a| a.to_vec());
        Ok(record(out, out_shape, self.requires_grad(), || Op::Sum {
            input: self.clone(),
            axes,
        }))
    }

    fn mean_axes_impl(&self, axes: Option<&[usize]>) -> Result<Tensor<T>> {
        let (out_shape, map, count) = reduce_layout("mean", self.shape(), axes)?;
        if count == 0 {
            return Err(Error::InvalidArgument(
                "mean over an empty extent is undefined".into(),
            ));
        }
        let inv = T::one() / T::from_f64(count as f64);
        let mut out = vec![T::zero(); out_shape.iter().product()];
        let data = self.data();
        for_each_reduce_target(self.shape(), &map, |lin, off| {
            out[off] += data[lin];
        });
        for v in &mut out {
            *v *= inv;
        }
        let axes = axes.map(|a| a.to_vec());
        Ok(record(out, out_shape, self.requires_grad(), || Op::Mean {
            input: self.clone(),
            axes,
        }))
    }

    /// Zero padding, `(before, after)` per dimension.
    pub fn pad(&self, pads: &[(usize, usize)]) -> Result<Tensor<T>> {
        if pads.len() != self.rank() {
            return Err(Error::shape(
                "pad",
                format!("{} pad pairs for rank {}", pads.len(), self.rank()),
            ));
        }
        let out_shape: Vec<usize> = self
            .shape()
            .iter()
            .zip(pads)
            .map(|(&d, &(b, a))| d + b + a)
            .collect();
        let mut out = vec![T::zero(); out_shape.iter().product()];
        let offsets: Vec<usize> = pads.iter().map(|&(b, _)| b).collect();
        scatter_region(self.data(), self.shape(), &mut out, &out_shape, &offsets);
        let pads = pads.to_vec();
        Ok(record(out, out_shape, self.requires_grad(), || Op::Pad {
            input: self.clone(),
            pads,
        }))
    }

    /// Rectangular slice starting at `offsets` with extents `sizes`.
    pub fn crop(&self, offsets: &[usize], sizes: &[usize]) -> Result<Tensor<T>> {
        if offsets.len() != self.rank() || sizes.len() != self.rank() {
            return Err(Error::shape(
                "crop",
                format!(
                    "offsets/sizes rank {}/{} for tensor rank {}",
                    offsets.len(),
                    sizes.len(),
                    self.rank()
                ),
            ));
        }
        for d in 0..self.rank() {
            if sizes[d] == 0 || offsets[d] + sizes[d] > self.shape()[d] {
                return Err(Error::shape(
                    "crop",
                    format!(
                        "dim {}: offset {} + size {} exceeds extent {}",
                        d, offsets[d], sizes[d], self.shape()[d]
                    ),
                ));
            }
        }
        let mut out = vec![T::zero(); sizes.iter().product()];
        gather_region(self.data(), self.shape(), &mut out, sizes, offsets);
        let offsets_v = offsets.to_vec();
        Ok(record(out, sizes.to_vec(), self.requires_grad(), || Op::Crop {
            input: self.clone(),
            offsets: offsets_v,
        }))
    }
}

/// Row offsets of the region `offsets..offsets+small_shape` inside a
/// `big_shape` buffer, walked in the small tensor's row-major order.
fn for_each_region_row(
    small_shape: &[usize],
    big_shape: &[usize],
    offsets: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = small_shape.len();
    if rank == 0 {
        f(0, 0, 1);
        return;
    }
    let mut big_strides = vec![1usize; rank];
    for d in (0..rank - 1).rev() {
        big_strides[d] = big_strides[d + 1] * big_shape[d + 1];
    }
    let row = small_shape[rank - 1];
    let rows: usize = small_shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    for r in 0..rows {
        let mut big_off = offsets[rank - 1];
        for d in 0..rank - 1 {
            big_off += (idx[d] + offsets[d]) * big_strides[d];
        }
        f(r * row, big_off, row);
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < small_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Writes the small tensor into a region of the big one.
pub(crate) fn scatter_region<T: Scalar>(
    small: &[T],
    small_shape: &[usize],
    big: &mut [T],
    big_shape: &[usize],
    offsets: &[usize],
) {
    for_each_region_row(small_shape, big_shape, offsets, |s_off, b_off, len| {
        big[b_off..b_off + len].copy_from_slice(&small[s_off..s_off + len]);
    });
}

/// Reads a region of the big tensor into the small one.
pub(crate) fn gather_region<T: Scalar>(
    big: &[T],
    big_shape: &[usize],
    small: &mut [T],
    small_shape: &[usize],
    offsets: &[usize],
) {
    for_each_region_row(small_shape, big_shape, offsets, |s_off, b_off, len| {
        small[s_off..s_off + len].copy_from_slice(&big[b_off..b_off + len]);
    });
}

/// Training-mode batch norm over `[batch, c, h, w]`: normalizes by batch
/// statistics and returns them so the caller can update running estimates.
pub fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BnStats<T>)> {
    let (n, c, hw) = bn_dims(x, gamma, beta)?;
    if n == 0 {
        return Err(Error::InvalidArgument(
            "batchnorm got an empty batch in training mode".into(),
        ));
    }
    let fwd = kernels::bn_forward_train(x.data(), gamma.data(), beta.data(), n, c, hw, eps);
    let xhat = Arc::new(fwd.xhat);
    let inv_std = Arc::new(fwd.inv_std);
    let wants = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    let out = record(fwd.y, x.shape().to_vec(), wants, || Op::BatchNorm {
        input: x.clone(),
        gamma: gamma.clone(),
        beta: beta.clone(),
        xhat: Arc::clone(&xhat),
        inv_std: Arc::clone(&inv_std),
        training: true,
    });
    Ok((
        out,
        BnStats {
            mean: fwd.mean,
            var: fwd.var,
            count: n * hw,
        },
    ))
}

/// Eval-mode batch norm: normalizes by the provided running statistics, which
/// are treated as constants by the gradient.
pub fn batchnorm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> Result<Tensor<T>> {
    let (n, c, hw) = bn_dims(x, gamma, beta)?;
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::shape(
            "batchnorm",
            format!(
                "running stats hold {}/{} channels, input has {}",
                running_mean.len(),
                running_var.len(),
                c
            ),
        ));
    }
    let inv_std: Vec<T> = running_var
        .iter()
        .map(|&v| T::one() / (v + T::from_f64(eps)).sqrt())
        .collect();
    let (y, xhat) = kernels::bn_normalize(
        x.data(),
        gamma.data(),
        beta.data(),
        running_mean,
        &inv_std,
        n,
        c,
        hw,
    );
    let xhat = Arc::new(xhat);
    let inv_std = Arc::new(inv_std);
    let wants = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    Ok(record(y, x.shape().to_vec(), wants, || Op::BatchNorm {
        input: x.clone(),
        gamma: gamma.clone(),
        beta: beta.clone(),
        xhat: Arc::clone(&xhat),
        inv_std: Arc::clone(&inv_std),
        training: false,
    }))
}

/// Batch statistics handed back by [`batchnorm_train`]; `var` is the biased
/// estimate used for normalization and `count` the elements per channel.
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

fn bn_dims<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    if x.rank() != 4 {
        return Err(Error::shape(
            "batchnorm",
            format!("expects [batch, c, h, w], got {:?}", x.shape()),
        ));
    }
    let c = x.shape()[1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "batchnorm",
            format!(
                "gamma {:?} / beta {:?} must both be [{}]",
                gamma.shape(),
                beta.shape(),
                c
            ),
        ));
    }
    Ok((x.shape()[0], c, x.shape()[2] * x.shape()[3]))
}

/// The op vocabulary, for callers that dispatch dynamically (gradient checks,
/// the Python bindings).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Matmul,
    Conv2d,
    DepthwiseConv2d,
    Add,
    Mul,
    Relu,
    BatchNorm,
    Softmax,
    Log,
    Sum,
    Mean,
    Pad,
    Crop,
}

impl OpKind {
    pub const ALL: [OpKind; 13] = [
        OpKind::Matmul,
        OpKind::Conv2d,
        OpKind::DepthwiseConv2d,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Relu,
        OpKind::BatchNorm,
        OpKind::Softmax,
        OpKind::Log,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Pad,
        OpKind::Crop,
    ];
}

/// Attributes for [`forward_op`]; unused fields are ignored by each op.
#[derive(Debug, Clone, Default)]
pub struct Attrs {
    pub stride: Option<usize>,
    pub padding: Option<usize>,
    pub axes: Option<Vec<usize>>,
    pub eps: Option<f64>,
    pub training: bool,
    pub pads: Option<Vec<(usize, usize)>>,
    pub offsets: Option<Vec<usize>>,
    pub sizes: Option<Vec<usize>>,
}

/// Uniform entry point over the op vocabulary. Conv takes inputs
/// `[x, weight]` or `[x, weight, bias]`; batch norm takes `[x, gamma, beta]`
/// in training mode and `[x, gamma, beta, mean, var]` in eval mode.
pub fn forward_op<T: Scalar>(
    kind: OpKind,
    inputs: &[&Tensor<T>],
    attrs: &Attrs,
) -> Result<Tensor<T>> {
    let want = |n: usize| -> Result<()> {
        if inputs.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{:?} takes {} inputs, got {}",
                kind,
                n,
                inputs.len()
            )));
        }
        Ok(())
    };
    let stride = attrs.stride.unwrap_or(1);
    let padding = attrs.padding.unwrap_or(0);
    match kind {
        OpKind::Matmul => {
            want(2)?;
            inputs[0].matmul(inputs[1])
        }
        OpKind::Conv2d | OpKind::DepthwiseConv2d => {
            if inputs.len() != 2 && inputs.len() != 3 {
                return Err(Error::InvalidArgument(format!(
                    "{:?} takes [x, weight] or [x, weight, bias], got {} inputs",
                    kind,
                    inputs.len()
                )));
            }
            let bias = inputs.get(2).copied();
            if kind == OpKind::DepthwiseConv2d {
                inputs[0].depthwise_conv2d(inputs[1], bias, stride, padding)
            } else {
                inputs[0].conv2d(inputs[1], bias, stride, padding, 1)
            }
        }
        OpKind::Add => {
            want(2)?;
            inputs[0].add(inputs[1])
        }
        OpKind::Mul => {
            want(2)?;
            inputs[0].mul(inputs[1])
        }
        OpKind::Relu => {
            want(1)?;
            Ok(inputs[0].relu())
        }
        OpKind::BatchNorm => {
            let eps = attrs.eps.unwrap_or(1e-5);
            if attrs.training {
                want(3)?;
                Ok(batchnorm_train(inputs[0], inputs[1], inputs[2], eps)?.0)
            } else {
                want(5)?;
                batchnorm_eval(
                    inputs[0],
                    inputs[1],
                    inputs[2],
                    inputs[3].data(),
                    inputs[4].data(),
                    eps,
                )
            }
        }
        OpKind::Softmax => {
            want(1)?;
            inputs[0].softmax()
        }
        OpKind::Log => {
            want(1)?;
            Ok(inputs[0].log())
        }
        OpKind::Sum => {
            want(1)?;
            match &attrs.axes {
                Some(a) => inputs[0].sum_axes(a),
                None => Ok(inputs[0].sum_all()),
            }
        }
        OpKind::Mean => {
            want(1)?;
            match &attrs.axes {
                Some(a) => inputs[0].mean_axes(a),
                None => Ok(inputs[0].mean_all()),
            }
        }
        OpKind::Pad => {
            want(1)?;
            let pads = attrs
                .pads
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("pad needs attrs.pads".into()))?;
            inputs[0].pad(pads)
        }
        OpKind::Crop => {
            want(1)?;
            let (offsets, sizes) = match (&attrs.offsets, &attrs.sizes) {
                (Some(o), Some(s)) => (o, s),
                _ => {
                    return Err(Error::InvalidArgument(
                        "crop needs attrs.offsets and attrs.sizes".into(),
                    ))
                }
            };
            inputs[0].crop(offsets, sizes)
        }
    }
}
