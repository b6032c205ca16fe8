//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! The op set is what the reader model needs and nothing more: matrix
//! products, elementwise arithmetic, row broadcasts, softmax / layer-norm
//! style group transforms, reductions, concatenation, and indexed row
//! gather / scatter. An op records onto a [`Tape`] when any operand is
//! attached to one; tensors without a tape are plain values, which is how
//! inference runs. Rank is at most 2 and a rank-0 tensor is a scalar.

mod checkpoint;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use tape::Tape;

use crate::scalar::Scalar;
use std::sync::Arc;
use tape::{Op, Src};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {shape:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    LengthMismatch {
        op: &'static str,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of bounds for size {size}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{op}: operands belong to different tapes")]
    MixedTapes { op: &'static str },
    #[error("{op}: needs at least one input")]
    EmptyInput { op: &'static str },
    #[error("backward: loss must be scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward: tensor is not attached to a tape")]
    NoTape,
}

/// Strided view of the groups a reduction or normalization runs over.
/// Element `i` of group `g` sits at flat index `g * step + i * stride`.
pub(crate) struct Groups {
    pub(crate) count: usize,
    pub(crate) len: usize,
    step: usize,
    stride: usize,
}

impl Groups {
    #[inline]
    pub(crate) fn at(&self, group: usize, i: usize) -> usize {
        group * self.step + i * self.stride
    }
}

pub(crate) fn groups_for(shape: &[usize], axis: usize) -> Result<Groups, TensorError> {
    match (shape.len(), axis) {
        (1, 0) => Ok(Groups {
            count: 1,
            len: shape[0],
            step: 0,
            stride: 1,
        }),
        (2, 0) => Ok(Groups {
            count: shape[1],
            len: shape[0],
            step: 1,
            stride: shape[1],
        }),
        (2, 1) => Ok(Groups {
            count: shape[0],
            len: shape[1],
            step: shape[1],
            stride: 1,
        }),
        _ => Err(TensorError::BadShape {
            op: "axis op",
            expected: "rank 1 with axis 0, or rank 2 with axis 0/1",
            shape: shape.to_vec(),
        }),
    }
}

/// `a` is m×k, `b` is k×n; returns a·b as m×n.
pub(crate) fn mm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// `a` is m×k, `b` is n×k; returns a·bᵀ as m×n.
pub(crate) fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `a` is m×k, `b` is m×n; returns aᵀ·b as k×n.
pub(crate) fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = arow[p];
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// Dense tensor. Cloning shares the data buffer.
pub struct Tensor<T: Scalar> {
    pub(in crate::tensor) shape: Vec<usize>,
    pub(in crate::tensor) data: Arc<Vec<T>>,
    pub(in crate::tensor) node: Option<(Tape<T>, usize)>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: self.node.clone(),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<&T> = self.data.iter().take(8).collect();
        let ellipsis = if self.data.len() > 8 { ", .." } else { "" };
        write!(
            f,
            "Tensor{:?} {:?}{} (grad: {})",
            self.shape,
            preview,
            ellipsis,
            self.node.is_some()
        )
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::LengthMismatch {
                op: "from_vec",
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; numel]),
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: Arc::new(vec![v]),
            node: None,
        }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Element (i, j) of a rank-2 tensor.
    pub fn get2(&self, i: usize, j: usize) -> T {
        assert_eq!(self.rank(), 2, "get2() on tensor of shape {:?}", self.shape);
        self.data[i * self.shape[1] + j]
    }

    /// Same values, no tape attachment. Shares the buffer.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Mutable access for in-place updates (the optimizer). Copy-on-write if
    /// the buffer is shared, and always detaches from any tape, since the
    /// recorded values would no longer match.
    pub fn data_mut(&mut self) -> &mut [T] {
        self.node = None;
        let buf: &mut Vec<T> = Arc::make_mut(&mut self.data);
        buf.as_mut_slice()
    }

    /// Accumulated gradient if this tensor is a tape leaf that has received
    /// one since the last reset.
    pub fn grad(&self) -> Option<Tensor<T>> {
        let (tape, id) = self.node.as_ref()?;
        tape.leaf_grad(*id, &self.shape)
    }

    /// Reverse pass from a scalar loss; leaf gradients accumulate.
    pub fn backward(&self) -> Result<(), TensorError> {
        let Some((tape, id)) = &self.node else {
            return Err(TensorError::NoTape);
        };
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape.clone(),
            });
        }
        tape.backward_from(*id)
    }

    fn src(&self) -> Src<T> {
        Src {
            id: self.node.as_ref().map(|(_, id)| *id),
            data: Arc::clone(&self.data),
            shape: self.shape.clone(),
        }
    }

    fn tape_with(&self, other: &Tensor<T>, op: &'static str) -> Result<Option<Tape<T>>, TensorError> {
        merge_tapes(op, &[self, other])
    }

    fn finish(tape: Option<Tape<T>>, shape: Vec<usize>, data: Arc<Vec<T>>, op: Op<T>) -> Tensor<T> {
        let node = tape.map(|t| {
            let id = t.push(shape.clone(), op);
            (t, id)
        });
        Tensor { shape, data, node }
    }

    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let tape = self.tape_with(rhs, "matmul")?;
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let out = Arc::new(mm_nn(&self.data, &rhs.data, m, k, n));
        Ok(Self::finish(
            tape,
            vec![m, n],
            out,
            Op::Matmul {
                a: self.src(),
                b: rhs.src(),
            },
        ))
    }

    /// `self · rhsᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, rhs: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape[1] != rhs.shape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let tape = self.tape_with(rhs, "matmul_nt")?;
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[0]);
        let out = Arc::new(mm_nt(&self.data, &rhs.data, m, k, n));
        Ok(Self::finish(
            tape,
            vec![m, n],
            out,
            Op::MatmulNt {
                a: self.src(),
                b: rhs.src(),
            },
        ))
    }

    fn zip_elementwise(
        &self,
        rhs: &Tensor<T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Option<Tape<T>>, Arc<Vec<T>>), TensorError> {
        if self.shape != rhs.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let tape = self.tape_with(rhs, op)?;
        let out: Vec<T> = self
            .data
            .iter()
            .zip(rhs.data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((tape, Arc::new(out)))
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (tape, out) = self.zip_elementwise(rhs, "add", |x, y| x + y)?;
        Ok(Self::finish(
            tape,
            self.shape.clone(),
            out,
            Op::Add {
                a: self.src(),
                b: rhs.src(),
            },
        ))
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (tape, out) = self.zip_elementwise(rhs, "sub", |x, y| x - y)?;
        Ok(Self::finish(
            tape,
            self.shape.clone(),
            out,
            Op::Sub {
                a: self.src(),
                b: rhs.src(),
            },
        ))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (tape, out) = self.zip_elementwise(rhs, "mul", |x, y| x * y)?;
        Ok(Self::finish(
            tape,
            self.shape.clone(),
            out,
            Op::Mul {
                a: self.src(),
                b: rhs.src(),
            },
        ))
    }

    fn check_row_broadcast(&self, row: &Tensor<T>, op: &'static str) -> Result<(), TensorError> {
        if self.rank() != 2 || row.rank() != 1 || row.shape[0] != self.shape[1] {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: row.shape.clone(),
            });
        }
        Ok(())
    }

    /// Add a length-c vector to every row of an r×c tensor.
    pub fn add_row(&self, row: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.check_row_broadcast(row, "add_row")?;
        let tape = self.tape_with(row, "add_row")?;
        let c = self.shape[1];
        let out: Vec<T> = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + row.data[i % c])
            .collect();
        Ok(Self::finish(
            tape,
            self.shape.clone(),
            Arc::new(out),
            Op::AddRow {
                a: self.src(),
                row: row.src(),
            },
        ))
    }

    /// Multiply every row of an r×c tensor by a length-c vector.
    pub fn mul_row(&self, row: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.check_row_broadcast(row, "mul_row")?;
        let tape = self.tape_with(row, "mul_row")?;
        let c = self.shape[1];
        let out: Vec<T> = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x * row.data[i % c])
            .collect();
        Ok(Self::finish(
            tape,
            self.shape.clone(),
            Arc::new(out),
            Op::MulRow {
                a: self.src(),
                row: row.src(),
            },
        ))
    }

    /// Multiply by a compile-time-known constant (no gradient for `c`).
    pub fn scale(&self, c: T) -> Result<Tensor<T>, TensorError> {
        let tape = merge_tapes("scale", &[self])?;
        let out: Vec<T> = self.data.iter().map(|&x| x * c).collect();
        Ok(Self::finish(
            tape,
            self.shape.clone(),
            Arc::new(out),
            Op::Scale { a: self.src(), c },
        ))
    }

    /// Multiply by a scalar tensor; gradient flows into both factors.
    pub fn scale_by(&self, s: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        if s.numel() != 1 {
            return Err(TensorError::BadShape {
                op: "scale_by",
                expected: "a one-element scalar",
                shape: s.shape.clone(),
            });
        }
        let tape = self.tape_with(s, "scale_by")?;
        let sv = s.data[0];
        let out: Vec<T> = self.data.iter().map(|&x| x * sv).collect();
        Ok(Self::finish(
            tape,
            self.shape.clone(),
            Arc::new(out),
            Op::ScaleBy {
                a: self.src(),
                s: s.src(),
            },
        ))
    }

    pub fn relu(&self) -> Result<Tensor<T>, TensorError> {
        let tape = merge_tapes("relu", &[self])?;
        let out: Vec<T> = self
            .data
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        Ok(Self::finish(
            tape,
            self.shape.clone(),
            Arc::new(out),
            Op::Relu { a: self.src() },
        ))
    }

    pub fn sigmoid(&self) -> Result<Tensor<T>, TensorError> {
        let tape = merge_tapes("sigmoid", &[self])?;
        let out: Vec<T> = self
            .data
            .iter()
            .map(|&x| T::one() / (T::one() + (-x).exp()))
            .collect();
        let out = Arc::new(out);
        Ok(Self::finish(
            tape,
            self.shape.clone(),
            Arc::clone(&out),
            Op::Sigmoid {
                a: self.src(),
                out,
            },
        ))
    }

    /// Elementwise reciprocal.
    pub fn recip(&self) -> Result<Tensor<T>, TensorError> {
        let tape = merge_tapes("recip", &[self])?;
        let out: Vec<T> = self.data.iter().map(|&x| T::one() / x).collect();
        let out = Arc::new(out);
        Ok(Self::finish(
            tape,
            self.shape.clone(),
            Arc::clone(&out),
            Op::Recip {
                a: self.src(),
                out,
            },
        ))
    }

    /// Numerically stable softmax along `axis` (normalizes each row for
    /// axis 1, each column for axis 0; a rank-1 tensor is one group).
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>, TensorError> {
        let gr = groups_for(&self.shape, axis)?;
        let tape = merge_tapes("softmax", &[self])?;
        let mut out = vec![T::zero(); self.data.len()];
        for g in 0..gr.count {
            let mut max = T::neg_infinity();
            for i in 0..gr.len {
                max = max.max(self.data[gr.at(g, i)]);
            }
            let mut sum = T::zero();
            for i in 0..gr.len {
                let idx = gr.at(g, i);
                let e = (self.data[idx] - max).exp();
                out[idx] = e;
                sum += e;
            }
            for i in 0..gr.len {
                out[gr.at(g, i)] /= sum;
            }
        }
        let out = Arc::new(out);
        Ok(Self::finish(
            tape,
            self.shape.clone(),
            Arc::clone(&out),
            Op::Softmax {
                a: self.src(),
                axis,
                out,
            },
        ))
    }

    /// Numerically stable log-softmax along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<T>, TensorError> {
        let gr = groups_for(&self.shape, axis)?;
        let tape = merge_tapes("log_softmax", &[self])?;
        let mut out = vec![T::zero(); self.data.len()];
        for g in 0..gr.count {
            let mut max = T::neg_infinity();
            for i in 0..gr.len {
                max = max.max(self.data[gr.at(g, i)]);
            }
            let mut sum = T::zero();
            for i in 0..gr.len {
                sum += (self.data[gr.at(g, i)] - max).exp();
            }
            let log_z = max + sum.ln();
            for i in 0..gr.len {
                let idx = gr.at(g, i);
                out[idx] = self.data[idx] - log_z;
            }
        }
        let out = Arc::new(out);
        Ok(Self::finish(
            tape,
            self.shape.clone(),
            Arc::clone(&out),
            Op::LogSoftmax {
                a: self.src(),
                axis,
                out,
            },
        ))
    }

    /// Normalize each group along `axis` to zero mean and unit variance
    /// (population variance, no affine part; compose with `mul_row` /
    /// `add_row` for a learned gain and bias).
    pub fn layer_norm(&self, axis: usize, eps: T) -> Result<Tensor<T>, TensorError> {
        let gr = groups_for(&self.shape, axis)?;
        let tape = merge_tapes("layer_norm", &[self])?;
        let len_t = T::from_usize(gr.len).expect("group length fits scalar");
        let mut out = vec![T::zero(); self.data.len()];
        let mut inv_std = vec![T::zero(); gr.count];
        for g in 0..gr.count {
            let mut mean = T::zero();
            for i in 0..gr.len {
                mean += self.data[gr.at(g, i)];
            }
            mean = mean / len_t;
            let mut var = T::zero();
            for i in 0..gr.len {
                let d = self.data[gr.at(g, i)] - mean;
                var += d * d;
            }
            var = var / len_t;
            let is = T::one() / (var + eps).sqrt();
            inv_std[g] = is;
            for i in 0..gr.len {
                let idx = gr.at(g, i);
                out[idx] = (self.data[idx] - mean) * is;
            }
        }
        let out = Arc::new(out);
        Ok(Self::finish(
            tape,
            self.shape.clone(),
            Arc::clone(&out),
            Op::LayerNorm {
                a: self.src(),
                axis,
                normed: out,
                inv_std,
            },
        ))
    }

    /// Mean along `axis`; rank drops by one. `mean(0)` of r×c is length c.
    pub fn mean(&self, axis: usize) -> Result<Tensor<T>, TensorError> {
        if self.rank() != 2 {
            return Err(TensorError::BadShape {
                op: "mean",
                expected: "rank 2",
                shape: self.shape.clone(),
            });
        }
        let gr = groups_for(&self.shape, axis)?;
        if gr.len == 0 {
            return Err(TensorError::BadShape {
                op: "mean",
                expected: "a non-empty reduction axis",
                shape: self.shape.clone(),
            });
        }
        let tape = merge_tapes("mean", &[self])?;
        let len_t = T::from_usize(gr.len).expect("group length fits scalar");
        let mut out = vec![T::zero(); gr.count];
        for g in 0..gr.count {
            let mut acc = T::zero();
            for i in 0..gr.len {
                acc += self.data[gr.at(g, i)];
            }
            out[g] = acc / len_t;
        }
        Ok(Self::finish(
            tape,
            vec![gr.count],
            Arc::new(out),
            Op::Mean {
                a: self.src(),
                axis,
            },
        ))
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum_all(&self) -> Result<Tensor<T>, TensorError> {
        let tape = merge_tapes("sum_all", &[self])?;
        let mut acc = T::zero();
        for &x in self.data.iter() {
            acc += x;
        }
        Ok(Self::finish(
            tape,
            Vec::new(),
            Arc::new(vec![acc]),
            Op::SumAll { a: self.src() },
        ))
    }

    /// Concatenate rank-2 tensors along `axis` (0 stacks rows, 1 widens).
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat" });
        }
        if axis > 1 {
            return Err(TensorError::BadShape {
                op: "concat",
                expected: "axis 0 or 1",
                shape: vec![axis],
            });
        }
        let fixed_axis = 1 - axis;
        for p in parts {
            if p.rank() != 2 || p.shape[fixed_axis] != parts[0].shape[fixed_axis] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: parts[0].shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let tape = merge_tapes("concat", parts)?;
        let shape;
        let mut out;
        if axis == 0 {
            let cols = parts[0].shape[1];
            let rows: usize = parts.iter().map(|p| p.shape[0]).sum();
            out = Vec::with_capacity(rows * cols);
            for p in parts {
                out.extend_from_slice(&p.data);
            }
            shape = vec![rows, cols];
        } else {
            let rows = parts[0].shape[0];
            let cols: usize = parts.iter().map(|p| p.shape[1]).sum();
            out = vec![T::zero(); rows * cols];
            let mut col0 = 0;
            for p in parts {
                let c = p.shape[1];
                for r in 0..rows {
                    out[r * cols + col0..r * cols + col0 + c]
                        .copy_from_slice(&p.data[r * c..(r + 1) * c]);
                }
                col0 += c;
            }
            shape = vec![rows, cols];
        }
        let srcs = parts.iter().map(|p| p.src()).collect();
        Ok(Self::finish(
            tape,
            shape,
            Arc::new(out),
            Op::Concat { parts: srcs, axis },
        ))
    }

    /// Stack row vectors (shape [c] or [1, c]) into an n×c tensor.
    pub fn stack_rows(parts: &[&Tensor<T>]) -> Result<Tensor<T>, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "stack_rows" });
        }
        let mut reshaped = Vec::with_capacity(parts.len());
        for p in parts {
            reshaped.push(p.reshape(&[1, p.numel()])?);
        }
        let refs: Vec<&Tensor<T>> = reshaped.iter().collect();
        Self::concat(&refs, 0)
    }

    /// View with a new shape over the same buffer (row-major order).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let tape = merge_tapes("reshape", &[self])?;
        Ok(Self::finish(
            tape,
            shape.to_vec(),
            Arc::clone(&self.data),
            Op::Reshape { a: self.src() },
        ))
    }

    /// Embedding lookup: rows of `table` selected by token id.
    pub fn embed(table: &Tensor<T>, ids: &[u32]) -> Result<Tensor<T>, TensorError> {
        let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        table.slice_rows(&rows)
    }

    /// Gather rows by index; an index may repeat.
    pub fn slice_rows(&self, rows: &[usize]) -> Result<Tensor<T>, TensorError> {
        if self.rank() != 2 {
            return Err(TensorError::BadShape {
                op: "slice_rows",
                expected: "rank 2",
                shape: self.shape.clone(),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        for &row in rows {
            if row >= r {
                return Err(TensorError::IndexOutOfBounds {
                    op: "slice_rows",
                    index: row,
                    size: r,
                });
            }
        }
        let tape = merge_tapes("slice_rows", &[self])?;
        let mut out = Vec::with_capacity(rows.len() * c);
        for &row in rows {
            out.extend_from_slice(&self.data[row * c..(row + 1) * c]);
        }
        Ok(Self::finish(
            tape,
            vec![rows.len(), c],
            Arc::new(out),
            Op::GatherRows {
                a: self.src(),
                rows: Arc::new(rows.to_vec()),
            },
        ))
    }

    /// Copy of `self` with `src` rows added at the given row indices.
    /// Repeated indices accumulate. With no indices this is the identity.
    pub fn scatter_add(&self, rows: &[usize], src: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        if self.rank() != 2 || src.rank() != 2 || self.shape[1] != src.shape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_add",
                lhs: self.shape.clone(),
                rhs: src.shape.clone(),
            });
        }
        if rows.len() != src.shape[0] {
            return Err(TensorError::LengthMismatch {
                op: "scatter_add",
                len: rows.len(),
                shape: src.shape.clone(),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        for &row in rows {
            if row >= r {
                return Err(TensorError::IndexOutOfBounds {
                    op: "scatter_add",
                    index: row,
                    size: r,
                });
            }
        }
        let tape = self.tape_with(src, "scatter_add")?;
        let out = if rows.is_empty() {
            Arc::clone(&self.data)
        } else {
            let mut out = self.data.as_ref().clone();
            for (i, &row) in rows.iter().enumerate() {
                for j in 0..c {
                    out[row * c + j] += src.data[i * c + j];
                }
            }
            Arc::new(out)
        };
        Ok(Self::finish(
            tape,
            self.shape.clone(),
            out,
            Op::ScatterAdd {
                base: self.src(),
                add: src.src(),
                rows: Arc::new(rows.to_vec()),
            },
        ))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor<T>, TensorError> {
        if self.rank() != 2 {
            return Err(TensorError::BadShape {
                op: "slice_cols",
                expected: "rank 2",
                shape: self.shape.clone(),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        if start > end || end > c {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice_cols",
                index: end,
                size: c,
            });
        }
        let tape = merge_tapes("slice_cols", &[self])?;
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for row in 0..r {
            out.extend_from_slice(&self.data[row * c + start..row * c + end]);
        }
        Ok(Self::finish(
            tape,
            vec![r, w],
            Arc::new(out),
            Op::SliceCols {
                a: self.src(),
                start,
            },
        ))
    }

    /// Mean negative log-likelihood: `self` holds log-probabilities (m×V),
    /// `targets` one class per row.
    pub fn nll_mean(&self, targets: &[usize]) -> Result<Tensor<T>, TensorError> {
        if self.rank() != 2 || targets.len() != self.shape[0] {
            return Err(TensorError::BadShape {
                op: "nll_mean",
                expected: "rank 2 with one target per row",
                shape: self.shape.clone(),
            });
        }
        let cols = self.shape[1];
        for &t in targets {
            if t >= cols {
                return Err(TensorError::IndexOutOfBounds {
                    op: "nll_mean",
                    index: t,
                    size: cols,
                });
            }
        }
        if targets.is_empty() {
            return Err(TensorError::EmptyInput { op: "nll_mean" });
        }
        let tape = merge_tapes("nll_mean", &[self])?;
        let mut acc = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            acc += self.data[i * cols + t];
        }
        let loss = -acc / T::from_usize(targets.len()).expect("fits");
        Ok(Self::finish(
            tape,
            Vec::new(),
            Arc::new(vec![loss]),
            Op::NllMean {
                logp: self.src(),
                targets: targets.to_vec(),
            },
        ))
    }

    /// Index of the maximum in each row (first on ties). Inference only.
    pub fn argmax_rows(&self) -> Vec<usize> {
        assert_eq!(self.rank(), 2, "argmax_rows on shape {:?}", self.shape);
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let row = &self.data[i * c..(i + 1) * c];
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
        out
    }
}

fn merge_tapes<T: Scalar>(
    op: &'static str,
    tensors: &[&Tensor<T>],
) -> Result<Option<Tape<T>>, TensorError> {
    let mut found: Option<&Tape<T>> = None;
    for t in tensors {
        if let Some((tape, _)) = &t.node {
            match found {
                None => found = Some(tape),
                Some(existing) => {
                    if !existing.same_as(tape) {
                        return Err(TensorError::MixedTapes { op });
                    }
                }
            }
        }
    }
    Ok(found.cloned())
}
