//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is an append-only arena of operation nodes. Every operation
//! records its inputs and enough metadata to run its backward rule, so a
//! single reverse sweep in index order (which is already topological)
//! computes gradients for the whole graph. Backward rules work on raw
//! tensor values and are never themselves recorded.
//!
//! The tape also doubles as the instrumentation point for cost accounting:
//! it counts multiply–accumulates for every matmul it executes, and the
//! attention layers log the shape of each attention matrix they form.

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::tensor::{Elem, Tensor, TensorError};

#[derive(Debug, Error, PartialEq)]
pub enum TapeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("variable belongs to a different tape")]
    ForeignVar,
    #[error("backward target must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward target does not depend on any gradient-enabled leaf")]
    DetachedLoss,
    #[error("backward already ran on this tape; call clear_grads to run it again")]
    BackwardTwice,
    #[error("gradients not computed yet; run backward first")]
    NoBackward,
    #[error("variable does not require gradients")]
    NoGrad,
}

pub type Result<V> = std::result::Result<V, TapeError>;

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    node: usize,
    tape: u64,
}

/// Shape of one attention matrix formed during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionEvent {
    pub queries: usize,
    pub keys: usize,
    pub heads: usize,
}

/// Counters accumulated while a tape executes forward operations.
#[derive(Clone, Debug, Default)]
pub struct TapeStats {
    /// Total multiply–accumulates across all matmuls.
    pub matmul_macs: u64,
    /// One entry per attention matrix, in execution order.
    pub attention: Vec<AttentionEvent>,
}

enum Rule<T: Elem> {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(T),
    Matmul,
    Reshape,
    Transpose(Vec<usize>),
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    Softmax { axis: usize },
    LayerNorm { eps: T },
    Gelu,
    BilinearResize,
    SumAll,
    MeanAll,
    SumAxis(usize),
    MeanAxis(usize),
    VarAxis(usize),
    CrossEntropyMean { targets: Vec<usize> },
}

struct Node<T: Elem> {
    value: Tensor<T>,
    parents: Vec<usize>,
    rule: Rule<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

pub struct Tape<T: Elem> {
    id: u64,
    nodes: Vec<Node<T>>,
    backward_done: bool,
    stats: TapeStats,
}

impl<T: Elem> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            backward_done: false,
            stats: TapeStats::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn stats(&self) -> &TapeStats {
        &self.stats
    }

    /// Logs the shape of an attention matrix; called by the attention
    /// layers right where the matrix is formed.
    pub fn record_attention(&mut self, event: AttentionEvent) {
        self.stats.attention.push(event);
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.node >= self.nodes.len() {
            return Err(TapeError::ForeignVar);
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor<T>, parents: Vec<usize>, rule: Rule<T>) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.push_with_grad_flag(value, parents, rule, requires_grad)
    }

    fn push_with_grad_flag(
        &mut self,
        value: Tensor<T>,
        parents: Vec<usize>,
        rule: Rule<T>,
        requires_grad: bool,
    ) -> Var {
        let node = self.nodes.len();
        self.nodes.push(Node {
            value,
            parents,
            rule,
            requires_grad,
            grad: None,
        });
        Var {
            node,
            tape: self.id,
        }
    }

    // ── inputs ──────────────────────────────────────────────────────────

    /// Records an input tensor. Gradient-enabled leaves are the targets
    /// reported by [`Tape::grad`] after a backward pass.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_with_grad_flag(value, Vec::new(), Rule::Leaf, requires_grad)
    }

    /// Records an input that never needs gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Forward value of a variable. Panics if the variable belongs to a
    /// different tape; operations report that case as an error instead.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert!(
            v.tape == self.id && v.node < self.nodes.len(),
            "variable belongs to a different tape"
        );
        &self.nodes[v.node].value
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        self.check(v)?;
        Ok(self.nodes[v.node].requires_grad)
    }

    // ── recorded operations ─────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = self.nodes[a.node].value.add(&self.nodes[b.node].value)?;
        Ok(self.push(value, vec![a.node, b.node], Rule::Add))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = self.nodes[a.node].value.sub(&self.nodes[b.node].value)?;
        Ok(self.push(value, vec![a.node, b.node], Rule::Sub))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let value = self.nodes[a.node].value.mul(&self.nodes[b.node].value)?;
        Ok(self.push(value, vec![a.node, b.node], Rule::Mul))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Result<Var> {
        self.check(a)?;
        let value = self.nodes[a.node].value.scale(k);
        Ok(self.push(value, vec![a.node], Rule::Scale(k)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (&self.nodes[a.node].value, &self.nodes[b.node].value);
        let macs = av.matmul_macs(bv);
        let value = av.matmul(bv)?;
        self.stats.matmul_macs += macs;
        Ok(self.push(value, vec![a.node, b.node], Rule::Matmul))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let value = self.nodes[a.node].value.reshape(shape)?;
        Ok(self.push(value, vec![a.node], Rule::Reshape))
    }

    pub fn transpose(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        self.check(a)?;
        let value = self.nodes[a.node].value.transpose(perm)?;
        Ok(self.push(value, vec![a.node], Rule::Transpose(perm.to_vec())))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        for &p in parts {
            self.check(p)?;
        }
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|p| &self.nodes[p.node].value).collect();
        let value = Tensor::concat(&tensors, axis)?;
        let parents = parts.iter().map(|p| p.node).collect();
        Ok(self.push(value, parents, Rule::Concat { axis }))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check(a)?;
        let value = self.nodes[a.node].value.slice(axis, start, end)?;
        Ok(self.push(value, vec![a.node], Rule::Slice { axis, start }))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check(a)?;
        let value = self.nodes[a.node].value.softmax(axis)?;
        Ok(self.push(value, vec![a.node], Rule::Softmax { axis }))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let value = self.nodes[x.node].value.layer_norm(
            &self.nodes[gamma.node].value,
            &self.nodes[beta.node].value,
            eps,
        )?;
        Ok(self.push(
            value,
            vec![x.node, gamma.node, beta.node],
            Rule::LayerNorm { eps },
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let value = self.nodes[a.node].value.gelu();
        Ok(self.push(value, vec![a.node], Rule::Gelu))
    }

    pub fn bilinear_resize(&mut self, a: Var, new_h: usize, new_w: usize) -> Result<Var> {
        self.check(a)?;
        let value = self.nodes[a.node].value.bilinear_resize(new_h, new_w)?;
        Ok(self.push(value, vec![a.node], Rule::BilinearResize))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let value = Tensor::scalar(self.nodes[a.node].value.sum_all());
        Ok(self.push(value, vec![a.node], Rule::SumAll))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let value = Tensor::scalar(self.nodes[a.node].value.mean_all());
        Ok(self.push(value, vec![a.node], Rule::MeanAll))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check(a)?;
        let value = self.nodes[a.node].value.sum_axis(axis)?;
        Ok(self.push(value, vec![a.node], Rule::SumAxis(axis)))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check(a)?;
        let value = self.nodes[a.node].value.mean_axis(axis)?;
        Ok(self.push(value, vec![a.node], Rule::MeanAxis(axis)))
    }

    pub fn var_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check(a)?;
        let value = self.nodes[a.node].value.var_axis(axis)?;
        Ok(self.push(value, vec![a.node], Rule::VarAxis(axis)))
    }

    /// Mean cross entropy of `[rows, classes]` logits against integer
    /// targets; the result is a scalar suitable as a backward target.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let value = Tensor::scalar(self.nodes[logits.node].value.cross_entropy_mean(targets)?);
        Ok(self.push(
            value,
            vec![logits.node],
            Rule::CrossEntropyMean {
                targets: targets.to_vec(),
            },
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from `loss`, accumulating gradients into every
    /// gradient-enabled node that `loss` depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.backward_done {
            return Err(TapeError::BackwardTwice);
        }
        let node = &self.nodes[loss.node];
        if !node.value.is_scalar() {
            return Err(TapeError::NonScalarLoss(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(TapeError::DetachedLoss);
        }
        self.nodes[loss.node].grad = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.node).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].parents.is_empty() {
                continue;
            }
            let Some(g) = self.nodes[i].grad.clone() else {
                continue;
            };
            let contributions = self.propagate(i, &g)?;
            for (parent, contribution) in contributions {
                if !self.nodes[parent].requires_grad {
                    continue;
                }
                let acc = match self.nodes[parent].grad.take() {
                    Some(old) => old.add(&contribution).map_err(TapeError::Tensor)?,
                    None => contribution,
                };
                self.nodes[parent].grad = Some(acc);
            }
        }
        self.backward_done = true;
        Ok(())
    }

    /// Gradient contributions of node `i` to each of its parents given the
    /// upstream gradient `g`.
    fn propagate(
        &self,
        i: usize,
        g: &Tensor<T>,
    ) -> std::result::Result<Vec<(usize, Tensor<T>)>, TensorError> {
        let node = &self.nodes[i];
        let parent = |k: usize| &self.nodes[node.parents[k]].value;
        let out = match &node.rule {
            Rule::Leaf => Vec::new(),
            Rule::Add => vec![
                (node.parents[0], g.reduce_to_shape(parent(0).shape())),
                (node.parents[1], g.reduce_to_shape(parent(1).shape())),
            ],
            Rule::Sub => vec![
                (node.parents[0], g.reduce_to_shape(parent(0).shape())),
                (node.parents[1], g.neg().reduce_to_shape(parent(1).shape())),
            ],
            Rule::Mul => vec![
                (
                    node.parents[0],
                    g.mul(parent(1))?.reduce_to_shape(parent(0).shape()),
                ),
                (
                    node.parents[1],
                    g.mul(parent(0))?.reduce_to_shape(parent(1).shape()),
                ),
            ],
            Rule::Scale(k) => vec![(node.parents[0], g.scale(*k))],
            Rule::Matmul => {
                let (a, b) = (parent(0), parent(1));
                let swap_a = swap_last_two(a.rank());
                let swap_b = swap_last_two(b.rank());
                let da = g.matmul(&b.transpose(&swap_b)?)?;
                let db = a.transpose(&swap_a)?.matmul(g)?;
                vec![(node.parents[0], da), (node.parents[1], db)]
            }
            Rule::Reshape => vec![(node.parents[0], g.reshape(parent(0).shape())?)],
            Rule::Transpose(perm) => {
                let inv = Tensor::<T>::invert_perm(perm);
                vec![(node.parents[0], g.transpose(&inv)?)]
            }
            Rule::Concat { axis } => {
                let mut out = Vec::with_capacity(node.parents.len());
                let mut offset = 0;
                for (k, &p) in node.parents.iter().enumerate() {
                    let len = parent(k).shape()[*axis];
                    out.push((p, g.slice(*axis, offset, offset + len)?));
                    offset += len;
                }
                out
            }
            Rule::Slice { axis, start } => vec![(
                node.parents[0],
                g.embed_slice(parent(0).shape(), *axis, *start),
            )],
            Rule::Softmax { axis } => vec![(
                node.parents[0],
                Tensor::softmax_backward(&node.value, g, *axis),
            )],
            Rule::LayerNorm { eps } => {
                let (dx, dgamma, dbeta) =
                    Tensor::layer_norm_backward(parent(0), parent(1), *eps, g);
                vec![
                    (node.parents[0], dx),
                    (node.parents[1], dgamma),
                    (node.parents[2], dbeta),
                ]
            }
            Rule::Gelu => vec![(node.parents[0], Tensor::gelu_backward(parent(0), g))],
            Rule::BilinearResize => {
                let src = parent(0).shape();
                vec![(node.parents[0], g.bilinear_resize_adjoint(src[0], src[1]))]
            }
            Rule::SumAll => vec![(
                node.parents[0],
                Tensor::full(parent(0).shape(), g.item()?),
            )],
            Rule::MeanAll => {
                let n = T::from_f64(parent(0).numel() as f64);
                vec![(
                    node.parents[0],
                    Tensor::full(parent(0).shape(), g.item()? / n),
                )]
            }
            Rule::SumAxis(axis) => {
                let len = parent(0).shape()[*axis];
                vec![(node.parents[0], g.expand_axis(*axis, len))]
            }
            Rule::MeanAxis(axis) => {
                let len = parent(0).shape()[*axis];
                let inv = T::one() / T::from_f64(len as f64);
                vec![(node.parents[0], g.expand_axis(*axis, len).scale(inv))]
            }
            Rule::VarAxis(axis) => {
                let x = parent(0);
                let len = x.shape()[*axis];
                let two_over_n = T::from_f64(2.0 / len as f64);
                let mean = x.mean_axis(*axis)?.expand_axis(*axis, len);
                let centered = x.sub(&mean)?;
                let dx = centered
                    .mul(&g.expand_axis(*axis, len))?
                    .scale(two_over_n);
                vec![(node.parents[0], dx)]
            }
            Rule::CrossEntropyMean { targets } => vec![(
                node.parents[0],
                parent(0).cross_entropy_mean_backward(targets, g.item()?),
            )],
        };
        Ok(out)
    }

    /// Gradient of the backward target with respect to `v`. A
    /// gradient-enabled leaf the loss never touched reports a zero tensor.
    pub fn grad(&self, v: Var) -> Result<Tensor<T>> {
        self.check(v)?;
        if !self.backward_done {
            return Err(TapeError::NoBackward);
        }
        let node = &self.nodes[v.node];
        if !node.requires_grad {
            return Err(TapeError::NoGrad);
        }
        Ok(node
            .grad
            .clone()
            .unwrap_or_else(|| node.value.zeros_like()))
    }

    /// Drops all gradients so another backward pass can run.
    pub fn clear_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }
}

fn swap_last_two(rank: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..rank).collect();
    perm.swap(rank - 2, rank - 1);
    perm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_fn;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn check_op(
        x: Tensor<f64>,
        f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>,
    ) {
        let report = grad_check_fn(&x, 1e-5, f).unwrap();
        assert!(
            report.passes(1e-6),
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn grad_add_broadcast() {
        check_op(random_tensor(&[3, 4], 1), |t, x| {
            let b = t.constant(random_tensor(&[4], 2));
            let y = t.add(x, b)?;
            t.sum_all(y)
        });
        // Same but through the broadcast operand.
        check_op(random_tensor(&[4], 3), |t, b| {
            let x = t.constant(random_tensor(&[3, 4], 4));
            let y = t.add(x, b)?;
            t.sum_all(y)
        });
    }

    #[test]
    fn grad_sub_mul_scale() {
        check_op(random_tensor(&[2, 3], 5), |t, x| {
            let c = t.constant(random_tensor(&[2, 3], 6));
            let d = t.sub(x, c)?;
            let e = t.mul(d, x)?;
            let f = t.scale(e, -1.7)?;
            t.sum_all(f)
        });
    }

    #[test]
    fn grad_matmul_both_sides() {
        let a = random_tensor(&[3, 4], 7);
        let b = random_tensor(&[4, 2], 8);
        check_op(a.clone(), |t, x| {
            let bv = t.constant(b.clone());
            let y = t.matmul(x, bv)?;
            t.sum_all(y)
        });
        check_op(b.clone(), |t, x| {
            let av = t.constant(a.clone());
            let y = t.matmul(av, x)?;
            t.sum_all(y)
        });
    }

    #[test]
    fn grad_matmul_batched() {
        check_op(random_tensor(&[2, 3, 4], 9), |t, x| {
            let b = t.constant(random_tensor(&[2, 4, 3], 10));
            let y = t.matmul(x, b)?;
            t.sum_all(y)
        });
    }

    #[test]
    fn grad_reshape_transpose_chain() {
        check_op(random_tensor(&[2, 3, 4], 11), |t, x| {
            let y = t.transpose(x, &[2, 0, 1])?;
            let z = t.reshape(y, &[4, 6])?;
            let w = t.mul(z, z)?;
            t.sum_all(w)
        });
    }

    #[test]
    fn grad_concat_slice() {
        check_op(random_tensor(&[3, 2], 12), |t, x| {
            let c = t.constant(random_tensor(&[2, 2], 13));
            let joined = t.concat(&[x, c], 0)?;
            let window = t.slice(joined, 0, 1, 4)?;
            let sq = t.mul(window, window)?;
            t.sum_all(sq)
        });
    }

    #[test]
    fn grad_softmax() {
        check_op(random_tensor(&[3, 5], 14), |t, x| {
            let y = t.softmax(x, 1)?;
            let w = t.constant(random_tensor(&[3, 5], 15));
            let z = t.mul(y, w)?;
            t.sum_all(z)
        });
    }

    #[test]
    fn grad_layer_norm_all_inputs() {
        let gamma = random_tensor(&[6], 16);
        let beta = random_tensor(&[6], 17);
        let x = random_tensor(&[4, 6], 18);
        check_op(x.clone(), |t, v| {
            let g = t.constant(gamma.clone());
            let b = t.constant(beta.clone());
            let y = t.layer_norm(v, g, b, 1e-6)?;
            let w = t.constant(random_tensor(&[4, 6], 19));
            let z = t.mul(y, w)?;
            t.sum_all(z)
        });
        check_op(gamma.clone(), |t, g| {
            let xv = t.constant(x.clone());
            let b = t.constant(beta.clone());
            let y = t.layer_norm(xv, g, b, 1e-6)?;
            t.sum_all(y)
        });
        check_op(beta.clone(), |t, b| {
            let xv = t.constant(x.clone());
            let g = t.constant(gamma.clone());
            let y = t.layer_norm(xv, g, b, 1e-6)?;
            t.sum_all(y)
        });
    }

    #[test]
    fn grad_gelu() {
        check_op(random_tensor(&[4, 3], 20), |t, x| {
            let y = t.gelu(x)?;
            t.sum_all(y)
        });
    }

    #[test]
    fn grad_bilinear_resize_up_and_down() {
        check_op(random_tensor(&[3, 4, 2], 21), |t, x| {
            let y = t.bilinear_resize(x, 5, 7)?;
            let w = t.constant(random_tensor(&[5, 7, 2], 22));
            let z = t.mul(y, w)?;
            t.sum_all(z)
        });
        check_op(random_tensor(&[5, 7, 2], 23), |t, x| {
            let y = t.bilinear_resize(x, 3, 4)?;
            t.sum_all(y)
        });
    }

    #[test]
    fn grad_reductions() {
        check_op(random_tensor(&[3, 4], 24), |t, x| {
            let s = t.sum_axis(x, 0)?;
            let m = t.mean_axis(s, 0)?;
            t.sum_all(m)
        });
        check_op(random_tensor(&[3, 4], 25), |t, x| t.mean_all(x));
        check_op(random_tensor(&[3, 4], 26), |t, x| {
            let v = t.var_axis(x, 1)?;
            t.sum_all(v)
        });
    }

    #[test]
    fn grad_cross_entropy() {
        check_op(random_tensor(&[4, 3], 27), |t, x| {
            t.cross_entropy_mean(x, &[0, 2, 1, 2])
        });
    }

    #[test]
    fn gradients_accumulate_across_reuse() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0f64), true);
        let y = tape.add(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item().unwrap(), 2.0);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0f64), true);
        let unused = tape.leaf(Tensor::<f64>::ones(&[2, 2]), true);
        let y = tape.scale(x, 2.0).unwrap();
        tape.backward(y).unwrap();
        let g = tape.grad(unused).unwrap();
        assert_eq!(g.shape(), &[2, 2]);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::ones(&[2]), true);
        assert!(matches!(
            tape.backward(x).unwrap_err(),
            TapeError::NonScalarLoss(_)
        ));
    }

    #[test]
    fn backward_rejects_detached_loss() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1.0f64));
        let y = tape.scale(x, 2.0).unwrap();
        assert_eq!(tape.backward(y).unwrap_err(), TapeError::DetachedLoss);
    }

    #[test]
    fn backward_twice_requires_clear() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0f64), true);
        let y = tape.scale(x, 2.0).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.backward(y).unwrap_err(), TapeError::BackwardTwice);
        tape.clear_grads();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item().unwrap(), 2.0);
    }

    #[test]
    fn cross_tape_vars_are_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.leaf(Tensor::scalar(1.0f64), true);
        let y = b.leaf(Tensor::scalar(1.0f64), true);
        assert_eq!(b.add(y, x).unwrap_err(), TapeError::ForeignVar);
        assert_eq!(a.grad(y).unwrap_err(), TapeError::ForeignVar);
    }

    #[test]
    fn grad_before_backward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0f64), true);
        assert_eq!(tape.grad(x).unwrap_err(), TapeError::NoBackward);
        let c = tape.constant(Tensor::scalar(2.0f64));
        let y = tape.mul(x, c).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(c).unwrap_err(), TapeError::NoGrad);
    }

    #[test]
    fn matmul_macs_are_counted() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 4]));
        tape.matmul(a, b).unwrap();
        assert_eq!(tape.stats().matmul_macs, 24);
        // Backward is never instrumented: reverse sweep leaves stats alone.
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::ones(&[2, 3]), true);
        let b = tape.constant(Tensor::ones(&[3, 4]));
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(c).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.stats().matmul_macs, 24);
    }

    #[test]
    fn requires_grad_propagates_through_ops() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::scalar(1.0));
        let b = tape.constant(Tensor::scalar(2.0));
        let c = tape.add(a, b).unwrap();
        assert!(!tape.requires_grad(c).unwrap());
        let d = tape.leaf(Tensor::scalar(3.0), true);
        let e = tape.add(c, d).unwrap();
        assert!(tape.requires_grad(e).unwrap());
    }
}
