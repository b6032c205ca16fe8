//! Reverse-mode tape: op records, leaf binding, and gradient accumulation.
//!
//! Ops append records to the tape in execution order. `backward` walks the
//! records in reverse, propagating gradients through locals that live only
//! for the duration of the call; gradients that reach leaves accumulate in
//! persistent per-leaf buffers until [`Tape::zero_grad`] clears them.

use super::{groups_for, mm_nn, mm_nt, mm_tn, Tensor, TensorError};
use crate::scalar::Scalar;
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

/// Captured operand: node id when tape-attached, plus value and shape for
/// the backward formulas.
pub(crate) struct Src<T: Scalar> {
    pub(crate) id: Option<usize>,
    pub(crate) data: Arc<Vec<T>>,
    pub(crate) shape: Vec<usize>,
}

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Matmul { a: Src<T>, b: Src<T> },
    MatmulNt { a: Src<T>, b: Src<T> },
    Add { a: Src<T>, b: Src<T> },
    Sub { a: Src<T>, b: Src<T> },
    Mul { a: Src<T>, b: Src<T> },
    AddRow { a: Src<T>, row: Src<T> },
    MulRow { a: Src<T>, row: Src<T> },
    Scale { a: Src<T>, c: T },
    ScaleBy { a: Src<T>, s: Src<T> },
    Relu { a: Src<T> },
    Sigmoid { a: Src<T>, out: Arc<Vec<T>> },
    Recip { a: Src<T>, out: Arc<Vec<T>> },
    Softmax { a: Src<T>, axis: usize, out: Arc<Vec<T>> },
    LogSoftmax { a: Src<T>, axis: usize, out: Arc<Vec<T>> },
    LayerNorm { a: Src<T>, axis: usize, normed: Arc<Vec<T>>, inv_std: Vec<T> },
    Mean { a: Src<T>, axis: usize },
    SumAll { a: Src<T> },
    Concat { parts: Vec<Src<T>>, axis: usize },
    GatherRows { a: Src<T>, rows: Arc<Vec<usize>> },
    ScatterAdd { base: Src<T>, add: Src<T>, rows: Arc<Vec<usize>> },
    SliceCols { a: Src<T>, start: usize },
    Reshape { a: Src<T> },
    NllMean { logp: Src<T>, targets: Vec<usize> },
}

struct TapeInner<T: Scalar> {
    /// (output shape, op) per node, in execution order.
    ops: Vec<(Vec<usize>, Op<T>)>,
    /// Accumulated gradients for leaf nodes, by node id.
    leaf_grads: HashMap<usize, Vec<T>>,
    /// Leaf dedupe: data-buffer address -> node id. Binding the same storage
    /// twice must yield one leaf or its gradient would split.
    bound: HashMap<usize, usize>,
}

/// Shared handle to one recording. Cloning is cheap; all clones append to
/// the same record list. A tape is single-threaded by design.
pub struct Tape<T: Scalar>(Rc<RefCell<TapeInner<T>>>);

impl<T: Scalar> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape(Rc::clone(&self.0))
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape(Rc::new(RefCell::new(TapeInner {
            ops: Vec::new(),
            leaf_grads: HashMap::new(),
            bound: HashMap::new(),
        })))
    }

    /// Attach `t` to this tape as a differentiable leaf. Tensors backed by
    /// the same storage bind to the same leaf node.
    pub fn leaf(&self, t: &Tensor<T>) -> Tensor<T> {
        if let Some((tape, _)) = &t.node {
            if self.same_as(tape) {
                return t.clone();
            }
        }
        let key = Arc::as_ptr(&t.data) as *const u8 as usize;
        let mut inner = self.0.borrow_mut();
        let id = match inner.bound.get(&key) {
            Some(&id) => id,
            None => {
                let id = inner.ops.len();
                inner.ops.push((t.shape.clone(), Op::Leaf));
                inner.bound.insert(key, id);
                id
            }
        };
        Tensor {
            shape: t.shape.clone(),
            data: Arc::clone(&t.data),
            node: Some((self.clone(), id)),
        }
    }

    /// Drop all accumulated leaf gradients.
    pub fn zero_grad(&self) {
        self.0.borrow_mut().leaf_grads.clear();
    }

    /// Number of recorded nodes, leaves included.
    pub fn op_count(&self) -> usize {
        self.0.borrow().ops.len()
    }

    /// Accumulated gradient for a tensor bound to this tape, looked up by
    /// its storage address. None if it never received gradient.
    pub fn grad_of(&self, t: &Tensor<T>) -> Option<Tensor<T>> {
        let key = Arc::as_ptr(&t.data) as *const u8 as usize;
        let inner = self.0.borrow();
        let id = *inner.bound.get(&key)?;
        let g = inner.leaf_grads.get(&id)?;
        Some(Tensor {
            shape: t.shape.clone(),
            data: Arc::new(g.clone()),
            node: None,
        })
    }

    pub(crate) fn same_as(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub(crate) fn push(&self, shape: Vec<usize>, op: Op<T>) -> usize {
        let mut inner = self.0.borrow_mut();
        let id = inner.ops.len();
        inner.ops.push((shape, op));
        id
    }

    pub(crate) fn leaf_grad(&self, id: usize, shape: &[usize]) -> Option<Tensor<T>> {
        let inner = self.0.borrow();
        let g = inner.leaf_grads.get(&id)?;
        Some(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(g.clone()),
            node: None,
        })
    }

    /// Reverse pass seeded with d(loss)/d(loss) = 1 at `loss_id`.
    pub(crate) fn backward_from(&self, loss_id: usize) -> Result<(), TensorError> {
        let mut inner = self.0.borrow_mut();
        let TapeInner {
            ops, leaf_grads, ..
        } = &mut *inner;

        // Transient gradients per node for this call only; leaf gradients
        // accumulate across calls in `leaf_grads`.
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss_id + 1);
        grads.resize_with(loss_id + 1, || None);
        grads[loss_id] = Some(vec![T::one()]);

        for id in (0..=loss_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &ops[id].1 {
                Op::Leaf => {
                    let slot = leaf_grads
                        .entry(id)
                        .or_insert_with(|| vec![T::zero(); g.len()]);
                    for (d, s) in slot.iter_mut().zip(&g) {
                        *d += *s;
                    }
                }
                Op::Matmul { a, b } => {
                    let (m, k) = (a.shape[0], a.shape[1]);
                    let n = b.shape[1];
                    if a.id.is_some() {
                        add_into(&mut grads, a.id, mm_nt(&g, &b.data, m, n, k));
                    }
                    if b.id.is_some() {
                        add_into(&mut grads, b.id, mm_tn(&a.data, &g, m, k, n));
                    }
                }
                Op::MatmulNt { a, b } => {
                    let (m, k) = (a.shape[0], a.shape[1]);
                    let n = b.shape[0];
                    if a.id.is_some() {
                        add_into(&mut grads, a.id, mm_nn(&g, &b.data, m, n, k));
                    }
                    if b.id.is_some() {
                        add_into(&mut grads, b.id, mm_tn(&g, &a.data, m, n, k));
                    }
                }
                Op::Add { a, b } => {
                    if a.id.is_some() {
                        add_into(&mut grads, a.id, g.clone());
                    }
                    if b.id.is_some() {
                        add_into(&mut grads, b.id, g);
                    }
                }
                Op::Sub { a, b } => {
                    if a.id.is_some() {
                        add_into(&mut grads, a.id, g.clone());
                    }
                    if b.id.is_some() {
                        add_into(&mut grads, b.id, g.iter().map(|&x| -x).collect());
                    }
                }
                Op::Mul { a, b } => {
                    if a.id.is_some() {
                        let da = g.iter().zip(b.data.iter()).map(|(&x, &y)| x * y).collect();
                        add_into(&mut grads, a.id, da);
                    }
                    if b.id.is_some() {
                        let db = g.iter().zip(a.data.iter()).map(|(&x, &y)| x * y).collect();
                        add_into(&mut grads, b.id, db);
                    }
                }
                Op::AddRow { a, row } => {
                    let c = row.shape[0];
                    if a.id.is_some() {
                        add_into(&mut grads, a.id, g.clone());
                    }
                    if row.id.is_some() {
                        let mut dr = vec![T::zero(); c];
                        for (i, &gv) in g.iter().enumerate() {
                            dr[i % c] += gv;
                        }
                        add_into(&mut grads, row.id, dr);
                    }
                }
                Op::MulRow { a, row } => {
                    let c = row.shape[0];
                    if a.id.is_some() {
                        let da = g
                            .iter()
                            .enumerate()
                            .map(|(i, &gv)| gv * row.data[i % c])
                            .collect();
                        add_into(&mut grads, a.id, da);
                    }
                    if row.id.is_some() {
                        let mut dr = vec![T::zero(); c];
                        for (i, &gv) in g.iter().enumerate() {
                            dr[i % c] += gv * a.data[i];
                        }
                        add_into(&mut grads, row.id, dr);
                    }
                }
                Op::Scale { a, c } => {
                    if a.id.is_some() {
                        add_into(&mut grads, a.id, g.iter().map(|&x| x * *c).collect());
                    }
                }
                Op::ScaleBy { a, s } => {
                    let sv = s.data[0];
                    if a.id.is_some() {
                        add_into(&mut grads, a.id, g.iter().map(|&x| x * sv).collect());
                    }
                    if s.id.is_some() {
                        let mut ds = T::zero();
                        for (&gv, &av) in g.iter().zip(a.data.iter()) {
                            ds += gv * av;
                        }
                        add_into(&mut grads, s.id, vec![ds]);
                    }
                }
                Op::Relu { a } => {
                    if a.id.is_some() {
                        let da = g
                            .iter()
                            .zip(a.data.iter())
                            .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                            .collect();
                        add_into(&mut grads, a.id, da);
                    }
                }
                Op::Sigmoid { a, out } => {
                    if a.id.is_some() {
                        let da = g
                            .iter()
                            .zip(out.iter())
                            .map(|(&gv, &y)| gv * y * (T::one() - y))
                            .collect();
                        add_into(&mut grads, a.id, da);
                    }
                }
                Op::Recip { a, out } => {
                    if a.id.is_some() {
                        let da = g
                            .iter()
                            .zip(out.iter())
                            .map(|(&gv, &y)| -gv * y * y)
                            .collect();
                        add_into(&mut grads, a.id, da);
                    }
                }
                Op::Softmax { a, axis, out } => {
                    if a.id.is_some() {
                        let gr = groups_for(&a.shape, *axis).expect("checked at forward");
                        let mut da = vec![T::zero(); g.len()];
                        for gi in 0..gr.count {
                            let mut dot = T::zero();
                            for i in 0..gr.len {
                                let idx = gr.at(gi, i);
                                dot += g[idx] * out[idx];
                            }
                            for i in 0..gr.len {
                                let idx = gr.at(gi, i);
                                da[idx] = out[idx] * (g[idx] - dot);
                            }
                        }
                        add_into(&mut grads, a.id, da);
                    }
                }
                Op::LogSoftmax { a, axis, out } => {
                    if a.id.is_some() {
                        let gr = groups_for(&a.shape, *axis).expect("checked at forward");
                        let mut da = vec![T::zero(); g.len()];
                        for gi in 0..gr.count {
                            let mut gsum = T::zero();
                            for i in 0..gr.len {
                                gsum += g[gr.at(gi, i)];
                            }
                            for i in 0..gr.len {
                                let idx = gr.at(gi, i);
                                da[idx] = g[idx] - out[idx].exp() * gsum;
                            }
                        }
                        add_into(&mut grads, a.id, da);
                    }
                }
                Op::LayerNorm {
                    a,
                    axis,
                    normed,
                    inv_std,
                } => {
                    if a.id.is_some() {
                        let gr = groups_for(&a.shape, *axis).expect("checked at forward");
                        let mut da = vec![T::zero(); g.len()];
                        let len_t = T::from_usize(gr.len).expect("group length fits scalar");
                        for gi in 0..gr.count {
                            let mut gmean = T::zero();
                            let mut gymean = T::zero();
                            for i in 0..gr.len {
                                let idx = gr.at(gi, i);
                                gmean += g[idx];
                                gymean += g[idx] * normed[idx];
                            }
                            gmean = gmean / len_t;
                            gymean = gymean / len_t;
                            for i in 0..gr.len {
                                let idx = gr.at(gi, i);
                                da[idx] = inv_std[gi] * (g[idx] - gmean - normed[idx] * gymean);
                            }
                        }
                        add_into(&mut grads, a.id, da);
                    }
                }
                Op::Mean { a, axis } => {
                    if a.id.is_some() {
                        let gr = groups_for(&a.shape, *axis).expect("checked at forward");
                        let inv_len = T::one() / T::from_usize(gr.len).expect("length fits");
                        let mut da = vec![T::zero(); a.data.len()];
                        for gi in 0..gr.count {
                            let spread = g[gi] * inv_len;
                            for i in 0..gr.len {
                                da[gr.at(gi, i)] = spread;
                            }
                        }
                        add_into(&mut grads, a.id, da);
                    }
                }
                Op::SumAll { a } => {
                    if a.id.is_some() {
                        add_into(&mut grads, a.id, vec![g[0]; a.data.len()]);
                    }
                }
                Op::Concat { parts, axis } => match axis {
                    0 => {
                        let mut offset = 0;
                        for p in parts {
                            let n = p.data.len();
                            if p.id.is_some() {
                                add_into(&mut grads, p.id, g[offset..offset + n].to_vec());
                            }
                            offset += n;
                        }
                    }
                    _ => {
                        let rows = parts[0].shape[0];
                        let total_cols: usize = parts.iter().map(|p| p.shape[1]).sum();
                        let mut col0 = 0;
                        for p in parts {
                            let c = p.shape[1];
                            if p.id.is_some() {
                                let mut dp = vec![T::zero(); rows * c];
                                for r in 0..rows {
                                    for j in 0..c {
                                        dp[r * c + j] = g[r * total_cols + col0 + j];
                                    }
                                }
                                add_into(&mut grads, p.id, dp);
                            }
                            col0 += c;
                        }
                    }
                },
                Op::GatherRows { a, rows } => {
                    if a.id.is_some() {
                        let c = a.shape[1];
                        let mut da = vec![T::zero(); a.data.len()];
                        for (i, &r) in rows.iter().enumerate() {
                            for j in 0..c {
                                da[r * c + j] += g[i * c + j];
                            }
                        }
                        add_into(&mut grads, a.id, da);
                    }
                }
                Op::ScatterAdd { base, add, rows } => {
                    if base.id.is_some() {
                        add_into(&mut grads, base.id, g.clone());
                    }
                    if add.id.is_some() {
                        let c = add.shape[1];
                        let mut da = vec![T::zero(); add.data.len()];
                        for (i, &r) in rows.iter().enumerate() {
                            for j in 0..c {
                                da[i * c + j] = g[r * c + j];
                            }
                        }
                        add_into(&mut grads, add.id, da);
                    }
                }
                Op::SliceCols { a, start } => {
                    if a.id.is_some() {
                        let (rows, cols) = (a.shape[0], a.shape[1]);
                        let width = ops[id].0[1];
                        let mut da = vec![T::zero(); rows * cols];
                        for r in 0..rows {
                            for j in 0..width {
                                da[r * cols + start + j] = g[r * width + j];
                            }
                        }
                        add_into(&mut grads, a.id, da);
                    }
                }
                Op::Reshape { a } => {
                    if a.id.is_some() {
                        add_into(&mut grads, a.id, g);
                    }
                }
                Op::NllMean { logp, targets } => {
                    if logp.id.is_some() {
                        let cols = logp.shape[1];
                        let inv_m = T::one() / T::from_usize(targets.len()).expect("fits");
                        let mut da = vec![T::zero(); logp.data.len()];
                        for (i, &t) in targets.iter().enumerate() {
                            da[i * cols + t] = -g[0] * inv_m;
                        }
                        add_into(&mut grads, logp.id, da);
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_into<T: Scalar>(grads: &mut [Option<Vec<T>>], id: Option<usize>, contrib: Vec<T>) {
    let Some(id) = id else { return };
    match &mut grads[id] {
        Some(acc) => {
            for (d, s) in acc.iter_mut().zip(&contrib) {
                *d += *s;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}
