//! Reverse-mode gradient computation.
//!
//! `backward` walks the op graph hanging off a scalar loss once, in reverse
//! topological order, accumulating vector-Jacobian products. Interior
//! gradients are dropped as soon as their node has been processed; what
//! remains is one gradient buffer per participating leaf.

use std::collections::{HashMap, HashSet};

use super::kernels;
use super::ops::{
    broadcast_strides, for_each_broadcast, for_each_reduce_target, reduce_layout, Op, LOG_FLOOR,
};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Gradients keyed by leaf tensor, as returned by [`Tensor::backward`].
pub struct GradStore<T: Scalar> {
    grads: HashMap<u64, Vec<T>>,
}

impl<T: Scalar> GradStore<T> {
    /// Gradient for a leaf, if it participated in the loss.
    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.grads.get(&t.id()).map(|v| v.as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }
}

fn add_into<T: Scalar>(acc: &mut [T], delta: &[T]) {
    for (a, &d) in acc.iter_mut().zip(delta) {
        *a += d;
    }
}

struct Sink<'g, T: Scalar> {
    grads: &'g mut HashMap<u64, Vec<T>>,
}

impl<T: Scalar> Sink<'_, T> {
    /// Accumulation buffer for `t`, or `None` when `t` tracks no gradient.
    fn slot(&mut self, t: &Tensor<T>) -> Option<&mut Vec<T>> {
        if !t.requires_grad() {
            return None;
        }
        Some(
            self.grads
                .entry(t.id())
                .or_insert_with(|| vec![T::zero(); t.numel()]),
        )
    }

    fn add(&mut self, t: &Tensor<T>, delta: &[T]) {
        if let Some(slot) = self.slot(t) {
            add_into(slot, delta);
        }
    }
}

impl<T: Scalar> Op<T> {
    pub(crate) fn parents(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::Add { lhs, rhs } | Op::Mul { lhs, rhs } | Op::Matmul { lhs, rhs } => {
                vec![lhs, rhs]
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut p = vec![input, weight];
                if let Some(b) = bias {
                    p.push(b);
                }
                p
            }
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![input, gamma, beta],
            Op::Relu { input }
            | Op::Softmax { input, .. }
            | Op::Log { input }
            | Op::Sum { input, .. }
            | Op::Mean { input, .. }
            | Op::Pad { input, .. }
            | Op::Crop { input, .. } => vec![input],
        }
    }
}

/// Adds `g` (laid out over `out_shape`) into the gradient of a broadcast
/// operand, collapsing broadcast dimensions by summation.
fn add_reduced<T: Scalar>(sink: &mut Sink<T>, t: &Tensor<T>, g: &[T], out_shape: &[usize]) {
    let Some(slot) = sink.slot(t) else { return };
    if t.shape() == out_shape {
        add_into(slot, g);
        return;
    }
    let st = broadcast_strides(t.shape(), out_shape);
    let zero = vec![0usize; out_shape.len()];
    let slot = &mut slot[..];
    for_each_broadcast(out_shape, &st, &zero, |lin, ot, _| {
        slot[ot] += g[lin];
    });
}

fn vjp<T: Scalar>(op: &Op<T>, out_shape: &[usize], g: &[T], sink: &mut Sink<T>) {
    match op {
        Op::Add { lhs, rhs } => {
            add_reduced(sink, lhs, g, out_shape);
            add_reduced(sink, rhs, g, out_shape);
        }
        Op::Mul { lhs, rhs } => {
            let (a, b) = (lhs.data(), rhs.data());
            let sa = broadcast_strides(lhs.shape(), out_shape);
            let sb = broadcast_strides(rhs.shape(), out_shape);
            if lhs.requires_grad() {
                let slot = sink.slot(lhs).expect("requires_grad");
                let slot = &mut slot[..];
                for_each_broadcast(out_shape, &sa, &sb, |lin, oa, ob| {
                    slot[oa] += g[lin] * b[ob];
                });
            }
            if rhs.requires_grad() {
                let slot = sink.slot(rhs).expect("requires_grad");
                let slot = &mut slot[..];
                for_each_broadcast(out_shape, &sa, &sb, |lin, oa, ob| {
                    slot[ob] += g[lin] * a[oa];
                });
            }
        }
        Op::Matmul { lhs, rhs } => {
            let (m, k) = (lhs.shape()[0], lhs.shape()[1]);
            let n = rhs.shape()[1];
            if lhs.requires_grad() {
                let da = sink.slot(lhs).expect("requires_grad");
                kernels::matmul_nt(g, rhs.data(), da, m, n, k);
            }
            if rhs.requires_grad() {
                let db = sink.slot(rhs).expect("requires_grad");
                kernels::matmul_tn(lhs.data(), g, db, k, m, n);
            }
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
        } => {
            let (dx, dw, dbias) =
                kernels::conv_backward(input.data(), weight.data(), bias.is_some(), geom, g);
            if input.requires_grad() {
                sink.add(input, &dx);
            }
            sink.add(weight, &dw);
            if let (Some(b), Some(db)) = (bias, dbias) {
                sink.add(b, &db);
            }
        }
        Op::Relu { input } => {
            if let Some(slot) = sink.slot(input) {
                for ((s, &gv), &x) in slot.iter_mut().zip(g).zip(input.data()) {
                    if x > T::zero() {
                        *s += gv;
                    }
                }
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            training,
        } => {
            let n = input.shape()[0];
            let c = input.shape()[1];
            let hw = input.shape()[2] * input.shape()[3];
            let (dx, dgamma, dbeta) = if *training {
                kernels::bn_backward_train(g, xhat, inv_std, gamma.data(), n, c, hw)
            } else {
                kernels::bn_backward_eval(g, xhat, inv_std, gamma.data(), n, c, hw)
            };
            if input.requires_grad() {
                sink.add(input, &dx);
            }
            sink.add(gamma, &dgamma);
            sink.add(beta, &dbeta);
        }
        Op::Softmax { input, output } => {
            if let Some(slot) = sink.slot(input) {
                let row = *out_shape.last().expect("softmax needs an axis");
                for ((srow, grow), yrow) in slot
                    .chunks_exact_mut(row)
                    .zip(g.chunks_exact(row))
                    .zip(output.chunks_exact(row))
                {
                    let mut dot = T::zero();
                    for (&gv, &yv) in grow.iter().zip(yrow) {
                        dot += gv * yv;
                    }
                    for ((s, &gv), &yv) in srow.iter_mut().zip(grow).zip(yrow) {
                        *s += yv * (gv - dot);
                    }
                }
            }
        }
        Op::Log { input } => {
            if let Some(slot) = sink.slot(input) {
                let floor = T::from_f64(LOG_FLOOR);
                for ((s, &gv), &x) in slot.iter_mut().zip(g).zip(input.data()) {
                    if x > floor {
                        *s += gv / x;
                    }
                }
            }
        }
        Op::Sum { input, axes } => {
            if let Some(slot) = sink.slot(input) {
                let (_, map, _) = reduce_layout("sum", input.shape(), axes.as_deref())
                    .expect("validated in forward");
                let slot = &mut slot[..];
                for_each_reduce_target(input.shape(), &map, |lin, off| {
                    slot[lin] += g[off];
                });
            }
        }
        Op::Mean { input, axes } => {
            if let Some(slot) = sink.slot(input) {
                let (_, map, count) = reduce_layout("mean", input.shape(), axes.as_deref())
                    .expect("validated in forward");
                let inv = T::one() / T::from_f64(count as f64);
                let slot = &mut slot[..];
                for_each_reduce_target(input.shape(), &map, |lin, off| {
                    slot[lin] += g[off] * inv;
                });
            }
        }
        Op::Pad { input, pads } => {
            if let Some(slot) = sink.slot(input) {
                let offsets: Vec<usize> = pads.iter().map(|&(b, _)| b).collect();
                let small_shape = input.shape().to_vec();
                add_region(slot, &small_shape, g, out_shape, &offsets, true);
            }
        }
        Op::Crop { input, offsets } => {
            if let Some(slot) = sink.slot(input) {
                let big_shape = input.shape().to_vec();
                add_region(slot, out_shape, g, &big_shape, offsets, false);
            }
        }
    }
}

/// Adds between a region of a big buffer and a small buffer.
/// `small_is_dst`: pad backward gathers the region into the small gradient;
/// crop backward scatters the small gradient into the region.
fn add_region<T: Scalar>(
    slot: &mut [T],
    small_shape: &[usize],
    g: &[T],
    big_shape: &[usize],
    offsets: &[usize],
    small_is_dst: bool,
) {
    let rank = small_shape.len();
    if rank == 0 {
        slot[0] += g[0];
        return;
    }
    let mut big_strides = vec![1usize; rank];
    for d in (0..rank - 1).rev() {
        big_strides[d] = big_strides[d + 1] * big_shape[d + 1];
    }
    let row = small_shape[rank - 1];
    let rows: usize = small_shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    for r in 0..rows {
        let mut big_off = offsets[rank - 1];
        for d in 0..rank - 1 {
            big_off += (idx[d] + offsets[d]) * big_strides[d];
        }
        if small_is_dst {
            // slot is small (input of pad), g is big (padded gradient)
            for (s, &gv) in slot[r * row..(r + 1) * row]
                .iter_mut()
                .zip(&g[big_off..big_off + row])
            {
                *s += gv;
            }
        } else {
            // slot is big (input of crop), g is small (cropped gradient)
            for (s, &gv) in slot[big_off..big_off + row]
                .iter_mut()
                .zip(&g[r * row..(r + 1) * row])
            {
                *s += gv;
            }
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < small_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

impl<T: Scalar> Tensor<T> {
    /// Computes gradients of this scalar w.r.t. every participating leaf.
    ///
    /// The graph is consumed conceptually: dropping the loss (and any
    /// intermediates the caller kept) frees it, and a fresh forward pass
    /// records a fresh graph, so no stale gradients can leak between steps.
    pub fn backward(&self) -> Result<GradStore<T>> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Err(Error::InvalidArgument(
                "backward on a tensor with no gradient provenance".into(),
            ));
        }

        enum Frame<T: Scalar> {
            Enter(Tensor<T>),
            Exit(Tensor<T>),
        }
        let mut topo: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack = vec![Frame::Enter(self.clone())];
        while let Some(frame) = stack.pop() {
            match frame {
                Frame::Enter(t) => {
                    if !visited.insert(t.id()) {
                        continue;
                    }
                    stack.push(Frame::Exit(t.clone()));
                    if let Some(node) = &t.node {
                        for p in node.op.parents() {
                            if p.requires_grad() && !visited.contains(&p.id()) {
                                stack.push(Frame::Enter(p.clone()));
                            }
                        }
                    }
                }
                Frame::Exit(t) => topo.push(t),
            }
        }

        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);
        for t in topo.iter().rev() {
            if t.node.is_none() {
                continue; // leaf: keep its accumulated gradient
            }
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            let node = t.node.as_ref().expect("checked above");
            let mut sink = Sink { grads: &mut grads };
            vjp(&node.op, t.shape(), &g, &mut sink);
        }
        Ok(GradStore { grads })
    }
}
