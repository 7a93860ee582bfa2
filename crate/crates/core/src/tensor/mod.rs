//! Dense row-major tensors with reverse-mode autodiff.
//!
//! Every op builds a fresh node in an implicit per-forward-pass graph; calling
//! [`Tensor::backward`] walks that graph once and returns a [`GradStore`] with
//! gradients for the leaf tensors that requested them. The graph is dropped
//! with the loss tensor, so there is no persistent tape to clear between
//! steps. Float32 is the training dtype; float64 exists so gradient-check
//! builds can compare against central finite differences at tight tolerance.

mod backward;
mod kernels;
mod ops;
mod sgd;

pub use backward::GradStore;
pub use ops::{batchnorm_eval, batchnorm_train, forward_op, Attrs, BnStats, OpKind};
pub use sgd::sgd_step;

use std::fmt;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Element type tag used in serialized headers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Dtype> {
        match tag {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

/// Element trait for the two supported dtypes.
pub trait Scalar:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + Send
    + Sync
    + Default
    + fmt::Debug
    + fmt::Display
    + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn from_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte f32"))
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte f64"))
    }
}

fn fresh_id() -> u64 {
    static NEXT: AtomicU64 = AtomicU64::new(1);
    NEXT.fetch_add(1, Ordering::Relaxed)
}

thread_local! {
    static GRAD_DISABLED: std::cell::Cell<u32> = const { std::cell::Cell::new(0) };
}

pub(crate) fn autograd_enabled() -> bool {
    GRAD_DISABLED.with(|d| d.get() == 0)
}

/// Runs `f` with graph recording disabled. Ops inside produce plain value
/// tensors regardless of their inputs' grad flags; nesting is fine.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Guard;
    impl Drop for Guard {
        fn drop(&mut self) {
            GRAD_DISABLED.with(|d| d.set(d.get() - 1));
        }
    }
    GRAD_DISABLED.with(|d| d.set(d.get() + 1));
    let _guard = Guard;
    f()
}

/// Dense n-dimensional tensor. Clones share the underlying buffer.
///
/// `product(shape) == data.len()` always holds; rank-0 tensors hold one
/// element. The `node` link is the autodiff provenance: `None` for leaves and
/// for anything built under [`no_grad`].
#[derive(Clone)]
pub struct Tensor<T: Scalar> {
    id: u64,
    shape: Arc<Vec<usize>>,
    data: Arc<Vec<T>>,
    pub(crate) node: Option<Arc<ops::Node<T>>>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    /// Leaf tensor that does not track gradients.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} needs {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor {
            id: fresh_id(),
            shape: Arc::new(shape.to_vec()),
            data: Arc::new(data),
            node: None,
            requires_grad: false,
        })
    }

    /// Leaf tensor that accumulates a gradient during backward.
    pub fn var(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let mut t = Self::from_vec(data, shape)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self::from_vec(vec![T::zero(); n], shape).expect("consistent by construction")
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n: usize = shape.iter().product();
        Self::from_vec(vec![value; n], shape).expect("consistent by construction")
    }

    /// Rank-0 constant.
    pub fn scalar(value: T) -> Self {
        Self::from_vec(vec![value], &[]).expect("consistent by construction")
    }

    pub(crate) fn from_parts(data: Vec<T>, shape: Vec<usize>, node: Option<ops::Node<T>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let node = node.map(Arc::new);
        let requires_grad = node.is_some();
        Tensor {
            id: fresh_id(),
            shape: Arc::new(shape),
            data: Arc::new(data),
            node,
            requires_grad,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> Dtype {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.is_none()
    }

    /// Element at a full index; test and debugging helper.
    pub fn get(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        let mut off = 0;
        let mut stride = 1;
        for d in (0..self.rank()).rev() {
            assert!(index[d] < self.shape[d], "index out of bounds");
            off += index[d] * stride;
            stride *= self.shape[d];
        }
        self.data[off]
    }

    /// Same buffer, no graph link, no gradient tracking.
    pub fn detach(&self) -> Self {
        Tensor {
            id: fresh_id(),
            shape: Arc::clone(&self.shape),
            data: Arc::clone(&self.data),
            node: None,
            requires_grad: false,
        }
    }

    /// Element-converted copy; the result is a constant leaf.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data: Vec<U> = self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect();
        Tensor::from_vec(data, &self.shape).expect("same shape")
    }

    /// Mutable access to a leaf's buffer, copy-on-write if the buffer is
    /// shared with an old graph. Interior tensors stay immutable.
    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        assert!(self.node.is_none(), "cannot mutate an op output in place");
        if Arc::strong_count(&self.data) != 1 || Arc::weak_count(&self.data) != 0 {
            self.data = Arc::new(self.data.as_ref().clone());
        }
        Arc::get_mut(&mut self.data)
            .expect("uniquely owned after copy-on-write")
            .as_mut_slice()
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor<{}> shape={:?} grad={}",
            T::DTYPE,
            self.shape,
            self.requires_grad
        )
    }
}

/// Trainable value with its accumulated gradient and momentum state.
pub struct Parameter<T: Scalar> {
    value: Tensor<T>,
    grad: Vec<T>,
    velocity: Option<Vec<T>>,
    trainable: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let value = Tensor::var(data, shape)?;
        let n = value.numel();
        Ok(Parameter {
            value,
            grad: vec![T::zero(); n],
            velocity: None,
            trainable: true,
        })
    }

    /// Excluded from optimizer steps and never asked for a gradient.
    pub fn frozen(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let value = Tensor::from_vec(data, shape)?;
        let n = value.numel();
        Ok(Parameter {
            value,
            grad: vec![T::zero(); n],
            velocity: None,
            trainable: false,
        })
    }

    /// Leaf tensor to use in forward passes; clones share the buffer.
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn data(&self) -> &[T] {
        self.value.data()
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        self.value.data_mut()
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn grad(&self) -> &[T] {
        &self.grad
    }

    /// Adds this parameter's entry from a backward pass, if any.
    pub fn accumulate(&mut self, grads: &GradStore<T>) {
        if let Some(g) = grads.get(&self.value) {
            for (acc, &gv) in self.grad.iter_mut().zip(g) {
                *acc += gv;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub(crate) fn velocity_mut(&mut self) -> &mut Vec<T> {
        let n = self.value.numel();
        self.velocity.get_or_insert_with(|| vec![T::zero(); n])
    }
}

impl<T: Scalar> Clone for Parameter<T> {
    fn clone(&self) -> Self {
        // A cloned parameter is an independent leaf: sharing the grad slot or
        // the value's id with the original would cross-wire two nets.
        let mut p = if self.trainable {
            Parameter::new(self.value.data().to_vec(), self.value.shape())
        } else {
            Parameter::frozen(self.value.data().to_vec(), self.value.shape())
        }
        .expect("shape already validated");
        p.grad = self.grad.clone();
        p.velocity = self.velocity.clone();
        p
    }
}

/// Writes `dtype tag (u8), rank (u8), extents (u32 little-endian each)` then
/// the raw row-major payload, little-endian per element.
pub fn write_tensor<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> std::io::Result<()> {
    let mut header = Vec::with_capacity(2 + 4 * t.rank());
    header.push(T::DTYPE.tag());
    header.push(t.rank() as u8);
    for &d in t.shape() {
        header.extend_from_slice(&(d as u32).to_le_bytes());
    }
    w.write_all(&header)?;
    let mut payload = Vec::with_capacity(t.numel() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(&mut payload);
    }
    w.write_all(&payload)
}

/// Inverse of [`write_tensor`]; rejects a header whose dtype differs from `T`.
pub fn read_tensor<T: Scalar, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    let corrupt = |offset: u64, detail: String| Error::Corrupt {
        path: "<tensor stream>".into(),
        offset,
        detail,
    };
    let mut head = [0u8; 2];
    r.read_exact(&mut head)
        .map_err(|e| corrupt(0, format!("reading header: {}", e)))?;
    let dtype = Dtype::from_tag(head[0])
        .ok_or_else(|| corrupt(0, format!("unknown dtype tag {:#04x}", head[0])))?;
    if dtype != T::DTYPE {
        return Err(corrupt(
            0,
            format!("expected dtype {}, file holds {}", T::DTYPE, dtype),
        ));
    }
    let rank = head[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut ext = [0u8; 4];
    for d in 0..rank {
        r.read_exact(&mut ext)
            .map_err(|e| corrupt(2 + 4 * d as u64, format!("reading extent {}: {}", d, e)))?;
        shape.push(u32::from_le_bytes(ext) as usize);
    }
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * T::DTYPE.size()];
    let payload_off = 2 + 4 * rank as u64;
    r.read_exact(&mut payload)
        .map_err(|e| corrupt(payload_off, format!("reading {} elements: {}", n, e)))?;
    let step = T::DTYPE.size();
    let data: Vec<T> = payload.chunks_exact(step).map(T::from_le).collect();
    Tensor::from_vec(data, &shape)
}
