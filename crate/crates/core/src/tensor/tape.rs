//! Reverse-mode differentiation over a linear record of executed operations.
//!
//! A [`Tape`] owns every intermediate value. Operations return [`Var`]
//! handles; [`Tape::backward`] replays the record in reverse. Handles carry
//! the identity and generation of the tape that produced them, so a stale
//! handle (other tape, or recorded before [`Tape::clear`]) is rejected.

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernel::{self, Layout};
use super::{check_labels, ParamId, ParamStore, Tensor};
use crate::error::{DasError, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    generation: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Sum(usize),
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    generation: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Handles from before the clear become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.generation += 1;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            generation: self.generation,
            index: self.nodes.len() - 1,
        }
    }

    fn resolve(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.generation != self.generation || v.index >= self.nodes.len() {
            return Err(DasError::usage("variable does not belong to the current tape"));
        }
        Ok(v.index)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Input data; never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Free differentiable leaf, for gradient checks.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; differentiable unless the parameter is frozen.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let mut value = p.tensor.clone();
        value.grad = None;
        self.push(value, Op::Param(id), !p.frozen)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.resolve(v)?].value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.resolve(a)?, self.resolve(b)?);
        let out = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        let rg = self.needs(ia) || self.needs(ib);
        Ok(self.push(out, Op::MatMul(ia, ib), rg))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.resolve(x)?, self.resolve(bias)?);
        let out = self.nodes[ix].value.add_bias(&self.nodes[ib].value)?;
        let rg = self.needs(ix) || self.needs(ib);
        Ok(self.push(out, Op::AddBias(ix, ib), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.resolve(a)?, self.resolve(b)?);
        let out = self.nodes[ia].value.add(&self.nodes[ib].value)?;
        let rg = self.needs(ia) || self.needs(ib);
        Ok(self.push(out, Op::Add(ia, ib), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.resolve(a)?, self.resolve(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(DasError::Dimension {
                op: "mul",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let values = va.values().iter().zip(vb.values()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), values)?;
        let rg = self.needs(ia) || self.needs(ib);
        Ok(self.push(out, Op::Mul(ia, ib), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let ix = self.resolve(x)?;
        let out = self.nodes[ix].value.relu();
        let rg = self.needs(ix);
        Ok(self.push(out, Op::Relu(ix), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let ix = self.resolve(x)?;
        let out = self.nodes[ix].value.sigmoid();
        let rg = self.needs(ix);
        Ok(self.push(out, Op::Sigmoid(ix), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.resolve(x)?;
        let out = Tensor::scalar(self.nodes[ix].value.values().iter().sum());
        let rg = self.needs(ix);
        Ok(self.push(out, Op::Sum(ix), rg))
    }

    /// Mean softmax cross-entropy of `logits` (`batch x classes`) against `labels`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.resolve(logits)?;
        let (rows, classes) = self.nodes[il].value.dims2("softmax_cross_entropy")?;
        check_labels(rows, classes, labels)?;
        let (probs, loss) =
            kernel::softmax_xent_forward(self.nodes[il].value.values(), classes, labels);
        let rg = self.needs(il);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: il,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every differentiable node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.resolve(loss)?;
        if self.nodes[root].value.numel() != 1 {
            return Err(DasError::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut visited = Vec::new();
        grads[root] = Some(vec![1.0]);

        for i in (0..=root).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited.push(i);
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            generation: self.generation,
            grads,
            visited,
        })
    }

    /// Runs [`Tape::backward`] and accumulates into the gradient slots of
    /// every non-frozen parameter bound on this tape.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.get_mut(*id).accumulate_grad(g);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Constant | Op::Leaf | Op::Param(_) => {}
            &Op::MatMul(a, b) => {
                let (p, q) = dims(&self.nodes[a].value);
                let r = dims(&self.nodes[b].value).1;
                if self.needs(a) {
                    // dA = dC * B^T
                    let slot = slot(grads, a, p * q);
                    kernel::gemm(
                        p,
                        r,
                        q,
                        g,
                        Layout::Normal,
                        self.nodes[b].value.values(),
                        Layout::Transposed,
                        slot,
                        true,
                    );
                }
                if self.needs(b) {
                    // dB = A^T * dC
                    let slot = slot(grads, b, q * r);
                    kernel::gemm(
                        q,
                        p,
                        r,
                        self.nodes[a].value.values(),
                        Layout::Transposed,
                        g,
                        Layout::Normal,
                        slot,
                        true,
                    );
                }
            }
            &Op::AddBias(x, b) => {
                if self.needs(x) {
                    add_into(slot(grads, x, g.len()), g);
                }
                if self.needs(b) {
                    let cols = self.nodes[b].value.numel();
                    let slot = slot(grads, b, cols);
                    for row in g.chunks_exact(cols) {
                        add_into(slot, row);
                    }
                }
            }
            &Op::Add(a, b) => {
                for k in [a, b] {
                    if self.needs(k) {
                        add_into(slot(grads, k, g.len()), g);
                    }
                }
            }
            &Op::Mul(a, b) => {
                for (k, other) in [(a, b), (b, a)] {
                    if self.needs(k) {
                        let ov = self.nodes[other].value.values();
                        let slot = slot(grads, k, g.len());
                        for ((s, gi), o) in slot.iter_mut().zip(g).zip(ov) {
                            *s += gi * o;
                        }
                    }
                }
            }
            &Op::Relu(x) => {
                let xv = self.nodes[x].value.values();
                let slot = slot(grads, x, g.len());
                for ((s, gi), &xi) in slot.iter_mut().zip(g).zip(xv) {
                    // subgradient at exactly zero is zero
                    if xi > 0.0 {
                        *s += gi;
                    }
                }
            }
            &Op::Sigmoid(x) => {
                let yv = node.value.values();
                let slot = slot(grads, x, g.len());
                for ((s, gi), &y) in slot.iter_mut().zip(g).zip(yv) {
                    *s += gi * y * (1.0 - y);
                }
            }
            &Op::Sum(x) => {
                let n = self.nodes[x].value.numel();
                slot(grads, x, n).iter_mut().for_each(|s| *s += g[0]);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let classes = dims(&self.nodes[*logits].value).1;
                let scale = g[0] / labels.len() as f64;
                let slot = slot(grads, *logits, probs.len());
                for (r, &label) in labels.iter().enumerate() {
                    let base = r * classes;
                    for c in 0..classes {
                        let target = if c == label { 1.0 } else { 0.0 };
                        slot[base + c] += scale * (probs[base + c] - target);
                    }
                }
            }
        }
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    (s[0], s[1])
}

fn slot(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut [f64] {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Result of one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    generation: u64,
    grads: Vec<Option<Vec<f64>>>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Gradient with respect to `v`; `None` when `v` is not differentiable or
    /// does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape || v.generation != self.generation {
            return None;
        }
        self.grads.get(v.index)?.as_deref()
    }

    /// Node indices in the order the backward sweep processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamGroup, Parameter};

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::matrix(2, 3, vec![1.0; 6]).unwrap());
        let loss = tape.sum(w).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn unrelated_leaf_gets_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::zeros(&[2, 2]));
        let x = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(w).unwrap_or(&[0.0; 4]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_all_negative_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 3, vec![-1.0, -2.0, -0.5]).unwrap());
        let y = tape.relu(x).unwrap();
        assert!(tape.value(y).unwrap().values().iter().all(|&v| v == 0.0));
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 3, vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x).unwrap();
        let loss = tape.sum(y).unwrap();
        assert_eq!(tape.backward(loss).unwrap().wrt(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_foreign_and_stale_vars() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.leaf(Tensor::scalar(1.0));
        let y = b.leaf(Tensor::scalar(1.0));
        assert!(matches!(a.backward(y), Err(DasError::Usage(_))));
        a.clear();
        assert!(matches!(a.backward(x), Err(DasError::Usage(_))));
        assert!(a.is_empty());
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn visits_in_reverse_execution_order() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 3.0]).unwrap());
        let w = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let h = tape.matmul(x, w).unwrap();
        let r = tape.relu(h).unwrap();
        let s = tape.sigmoid(r).unwrap();
        let loss = tape.sum(s).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.visit_order(), &[5, 4, 3, 2, 1, 0]);
    }

    #[test]
    fn frozen_param_receives_nothing_and_gradients_accumulate() {
        let mut store = ParamStore::new();
        let frozen = store
            .insert("f", ParamGroup::Block, Parameter::new(Tensor::scalar(2.0), true))
            .unwrap();
        let live = store
            .insert("l", ParamGroup::Head, Parameter::new(Tensor::scalar(3.0), false))
            .unwrap();
        let mut tape = Tape::new();
        for _ in 0..2 {
            tape.clear();
            let f = tape.param(&store, frozen);
            let l = tape.param(&store, live);
            let p = tape.mul(f, l).unwrap();
            let loss = tape.sum(p).unwrap();
            tape.backward_into(loss, &mut store).unwrap();
        }
        assert!(store.get(frozen).grad().is_none());
        assert_eq!(store.get(live).grad().unwrap(), &[4.0]);
    }

    #[test]
    fn cleared_tape_reproduces_forward() {
        let run = |tape: &mut Tape| {
            let x = tape.constant(Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap());
            let w = tape.leaf(Tensor::matrix(3, 2, vec![1.0, -1.0, 0.5, 0.25, -2.0, 3.0]).unwrap());
            let h = tape.matmul(x, w).unwrap();
            let loss = tape.softmax_cross_entropy(h, &[0, 1]).unwrap();
            let v = tape.value(loss).unwrap().values()[0];
            tape.backward(loss).unwrap();
            v
        };
        let mut tape = Tape::new();
        let first = run(&mut tape);
        tape.clear();
        let second = run(&mut tape);
        assert_eq!(first.to_bits(), second.to_bits());
        assert_eq!(first.to_bits(), run(&mut Tape::new()).to_bits());
    }
}
