//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in evaluation order, so every node's inputs precede
//! it and a single reverse sweep over the tape is a valid topological
//! order for the adjoint pass.

use super::ops;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        rstds: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Nll {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::add(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::mul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = ops::scale(self.value(a), s);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = ops::sum(self.value(a));
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = ops::gelu(self.value(a));
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = ops::softmax_rows(self.value(a))?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (value, rstds) =
            ops::layer_norm_with_stats(self.value(x), self.value(gain), self.value(bias), eps)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                rstds,
            },
            rg,
        ))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let value = ops::gather_rows(self.value(table), ids)?;
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = ops::reshape(self.value(x), shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = ops::permute(self.value(x), perm)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Permute(x, perm.to_vec()), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = ops::concat(&tensors, axis)?;
        let rg = self.any_grad(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = ops::slice(self.value(x), axis, start, len)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Slice { x, axis, start }, rg))
    }

    /// Weighted sum of per-row negative log-likelihoods (scalar).
    pub fn weighted_nll(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (loss, probs) = ops::weighted_nll(self.value(logits), targets, weights)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Nll {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean token cross-entropy.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = targets.len().max(1);
        self.weighted_nll(logits, targets, &vec![1.0 / t as f64; targets.len()])
    }

    /// Propagates adjoints from a scalar `root` back to every node that
    /// requires a gradient.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar root of shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            // only leaf adjoints are returned; interior ones are dropped
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (da, db) = ops::matmul_backward(self.value(*a), self.value(*b), g);
                acc(*a, da);
                acc(*b, db);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul(a, b) => {
                acc(*a, ops::mul(g, self.value(*b)).expect("shapes checked"));
                acc(*b, ops::mul(g, self.value(*a)).expect("shapes checked"));
            }
            Op::Scale(a, s) => acc(*a, ops::scale(g, *s)),
            Op::Sum(a) => acc(*a, Tensor::full(self.value(*a).shape(), g.data()[0])),
            Op::Gelu(a) => acc(*a, ops::gelu_backward(self.value(*a), g)),
            Op::Softmax(a) => acc(*a, ops::softmax_backward(&node.value, g)),
            Op::LayerNorm {
                x,
                gain,
                bias,
                rstds,
            } => {
                let (dx, dg, db) =
                    ops::layer_norm_backward(self.value(*x), self.value(*gain), rstds, g);
                acc(*x, dx);
                acc(*gain, dg);
                acc(*bias, db);
            }
            Op::Gather { table, ids } => {
                acc(
                    *table,
                    ops::gather_rows_backward(self.value(*table).shape(), ids, g),
                );
            }
            Op::Reshape(x) => acc(
                *x,
                Tensor::from_parts(self.value(*x).shape().to_vec(), g.data().to_vec()),
            ),
            Op::Permute(x, perm) => acc(
                *x,
                ops::permute(g, &ops::inverse_permutation(perm)).expect("valid permutation"),
            ),
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).shape()[*axis];
                    acc(p, ops::slice(g, *axis, start, len).expect("in range"));
                    start += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let mut dx = Tensor::zeros(self.value(*x).shape());
                ops::slice_accumulate(&mut dx, g, *axis, *start);
                acc(*x, dx);
            }
            Op::Nll {
                logits,
                targets,
                weights,
                probs,
            } => acc(
                *logits,
                ops::weighted_nll_backward(probs, targets, weights, g.data()[0]),
            ),
        }
    }
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to the leaf `v`, or `None` when
    /// `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but materialises zeros for unreached nodes.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}
