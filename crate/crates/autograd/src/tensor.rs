use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::ops::Op;

/// Storage precision of a tensor.
///
/// Arithmetic is carried out in `f64`; an `F32` tensor rounds every value it
/// stores to the nearest single-precision float, so its contents are always
/// exactly representable as `f32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum DType {
    #[default]
    F32,
    F64,
}

impl DType {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }

    /// The wider of two precisions.
    pub fn promote(self, other: DType) -> DType {
        if self == DType::F64 || other == DType::F64 {
            DType::F64
        } else {
            DType::F32
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(u64);

impl TensorId {
    fn fresh() -> Self {
        static NEXT: AtomicU64 = AtomicU64::new(1);
        TensorId(NEXT.fetch_add(1, Ordering::Relaxed))
    }

    pub fn raw(self) -> u64 {
        self.0
    }
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) parents: Vec<Tensor>,
}

pub(crate) struct Inner {
    pub(crate) id: TensorId,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) dtype: DType,
    pub(crate) requires_grad: bool,
    pub(crate) name: Option<String>,
    pub(crate) node: Option<Node>,
}

/// Dense row-major array with an optional record of the operation that
/// produced it.
///
/// Cloning is cheap (reference counted). A tensor built from inputs that
/// require gradients keeps those inputs alive until it is dropped, so the
/// graph of a forward pass is released together with its loss.
#[derive(Clone)]
pub struct Tensor(pub(crate) Arc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("id", &self.0.id.0).field("shape", &self.0.shape);
        if let Some(name) = &self.0.name {
            s.field("name", name);
        }
        s.field("dtype", &self.0.dtype)
            .field("requires_grad", &self.0.requires_grad);
        if self.numel() <= 16 {
            s.field("data", &self.0.data);
        }
        s.finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(
        shape: &[usize],
        mut data: Vec<f64>,
        dtype: DType,
        requires_grad: bool,
        name: Option<String>,
    ) -> Result<Self> {
        let expected = numel_of(shape);
        if shape.contains(&0) || expected != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        if dtype == DType::F32 {
            data.iter_mut().for_each(|v| *v = dtype.round(*v));
        }
        Ok(Tensor(Arc::new(Inner {
            id: TensorId::fresh(),
            shape: shape.to_vec(),
            data,
            dtype,
            requires_grad,
            name,
            node: None,
        })))
    }

    /// Constant single-precision tensor.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::build(shape, data, DType::F32, false, None)
    }

    /// Constant tensor with an explicit precision.
    pub fn new_in(shape: &[usize], data: Vec<f64>, dtype: DType) -> Result<Self> {
        Self::build(shape, data, dtype, false, None)
    }

    /// Unnamed leaf that requires gradients.
    pub fn variable(shape: &[usize], data: Vec<f64>, dtype: DType) -> Result<Self> {
        Self::build(shape, data, dtype, true, None)
    }

    /// Named trainable leaf.
    pub fn parameter(
        name: impl Into<String>,
        shape: &[usize],
        data: Vec<f64>,
        dtype: DType,
    ) -> Result<Self> {
        Self::build(shape, data, dtype, true, Some(name.into()))
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Result<Self> {
        Self::build(shape, vec![0.0; numel_of(shape)], dtype, false, None)
    }

    pub fn full(shape: &[usize], value: f64, dtype: DType) -> Result<Self> {
        Self::build(shape, vec![value; numel_of(shape)], dtype, false, None)
    }

    /// Rank-0 constant.
    pub fn scalar(value: f64, dtype: DType) -> Self {
        Self::build(&[], vec![value], dtype, false, None).expect("scalar shape is valid")
    }

    /// Result of an operation. Records `op` only when some parent requires
    /// gradients.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        mut data: Vec<f64>,
        op: Op,
        parents: &[&Tensor],
    ) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        let dtype = parents
            .iter()
            .fold(DType::F32, |acc, p| acc.promote(p.dtype()));
        if dtype == DType::F32 {
            data.iter_mut().for_each(|v| *v = dtype.round(*v));
        }
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let node = requires_grad.then(|| Node {
            op,
            parents: parents.iter().map(|p| (*p).clone()).collect(),
        });
        Tensor(Arc::new(Inner {
            id: TensorId::fresh(),
            shape,
            data,
            dtype,
            requires_grad,
            name: None,
            node,
        }))
    }

    /// Same leaf identity (id, name, flags) with new values. Used by
    /// optimizers to update parameters in place of the old tensor.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        if self.0.node.is_some() {
            return Err(TensorError::Argument {
                op: "with_data",
                reason: "only leaf tensors can be updated".into(),
            });
        }
        if data.len() != self.numel() {
            return Err(TensorError::DataLength {
                shape: self.0.shape.clone(),
                expected: self.numel(),
                actual: data.len(),
            });
        }
        let dtype = self.0.dtype;
        Ok(Tensor(Arc::new(Inner {
            id: self.0.id,
            shape: self.0.shape.clone(),
            data: data.into_iter().map(|v| dtype.round(v)).collect(),
            dtype,
            requires_grad: self.0.requires_grad,
            name: self.0.name.clone(),
            node: None,
        })))
    }

    /// Constant copy with a fresh identity and no graph.
    pub fn detach(&self) -> Self {
        Self::build(&self.0.shape, self.0.data.clone(), self.0.dtype, false, None)
            .expect("existing tensor has a valid shape")
    }

    /// Copy converted to another precision; the result is a constant.
    pub fn to_dtype(&self, dtype: DType) -> Self {
        Self::build(&self.0.shape, self.0.data.clone(), dtype, false, None)
            .expect("existing tensor has a valid shape")
    }

    pub fn id(&self) -> TensorId {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.0.data.iter().map(|&v| v as f32).collect()
    }

    pub fn dtype(&self) -> DType {
        self.0.dtype
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn name(&self) -> Option<&str> {
        self.0.name.as_deref()
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(TensorError::Argument {
                op: "item",
                reason: format!("shape {:?} holds more than one value", self.shape()),
            });
        }
        Ok(self.0.data[0])
    }

    /// `(rows, cols)` of a matrix.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.0.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: self.0.shape.clone(),
            }),
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        let cols = self.0.shape[self.0.shape.len() - 1];
        self.0.data[row * cols + col]
    }

    /// True when both tensors hold identical shapes and bit-identical values.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
