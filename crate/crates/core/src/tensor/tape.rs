//! Wengert-list reverse-mode differentiation.
//!
//! Each forward call appends a node holding its output value and the
//! information its backward rule needs. [`Tape::backward`] walks the list
//! once, in exact reverse order of recording.

use super::ops::{self, LayerNormCache};
use super::{Precision, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    Add(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cache: LayerNormCache,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    SwapLeading(Var),
    Broadcast(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Tensor,
    },
    SumScalars(Vec<Var>),
    SumSquares(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single-owner recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visit_order: Vec<usize>,
}

impl Gradients {
    /// Gradient of a recorded value, if the loss depends on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter; zeros when the loss does not reach it.
    pub fn param(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }

    /// Node indices in the order the backward pass visited them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visit_order
    }
}

impl Tape {
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record an input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Record a trainable parameter.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Param, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::from_parts(
            va.shape().to_vec(),
            data,
            va.precision().join(vb.precision()),
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, factor), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Matmul(a, b), ng))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Linear { x, w, b }, ng))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = ops::gelu(self.value(x));
        let ng = self.needs(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = ops::softmax_lastdim(self.value(x));
        let ng = self.needs(x);
        self.push(out, Op::Softmax(x), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (out, cache) = ops::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            },
            ng,
        ))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (out, probs) = ops::attention(self.value(q), self.value(k), self.value(v), heads)?;
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat(&values, axis)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow(axis, start, len)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Narrow { x, axis, start }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// `[a, b, ..] -> [b, a, ..]`
    pub fn swap_leading_axes(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).swap_leading_axes()?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::SwapLeading(x), ng))
    }

    /// Repeat `x` along a new leading axis of extent `count`.
    pub fn broadcast(&mut self, x: Var, count: usize) -> Result<Var> {
        if count == 0 {
            return Err(Error::invalid("broadcast", "count must be >= 1"));
        }
        let src = self.value(x);
        let mut shape = vec![count];
        shape.extend_from_slice(src.shape());
        let data = src.data().repeat(count);
        let out = Tensor::from_parts(shape, data, src.precision());
        let ng = self.needs(x);
        Ok(self.push(out, Op::Broadcast(x), ng))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::mean_axis(self.value(x), axis)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::MeanAxis { x, axis }, ng))
    }

    /// Cross-entropy of a flat logit vector against `label`; a scalar.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy(self.value(logits), label)?;
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            ng,
        ))
    }

    /// Sum of single-element values.
    pub fn sum_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        if terms.is_empty() {
            return Err(Error::invalid("sum_scalars", "no terms"));
        }
        let mut total = 0.0;
        for &t in terms {
            let v = self.value(t);
            if v.len() != 1 {
                return Err(Error::invalid(
                    "sum_scalars",
                    format!("term of shape {:?} is not a scalar", v.shape()),
                ));
            }
            total += v.data()[0];
        }
        let ng = terms.iter().any(|&t| self.needs(t));
        Ok(self.push(Tensor::scalar(total), Op::SumScalars(terms.to_vec()), ng))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().map(|v| v * v).sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(total), Op::SumSquares(x), ng)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a single value, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        let mut visit_order = Vec::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            visit_order.push(i);
            self.propagate(&node.op, &node.value, &g, &mut grads);
            if matches!(node.op, Op::Param) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads, visit_order })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Constant | Op::Param => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, g.map(|v| v * f));
            }
            Op::Matmul(a, b) => {
                let (da, db) = ops::matmul_backward(self.value(*a), self.value(*b), g);
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Linear { x, w, b } => {
                let lg = ops::linear_backward(self.value(*x), self.value(*w), b.is_some(), g);
                self.accumulate(grads, *x, lg.dx);
                self.accumulate(grads, *w, lg.dw);
                if let (Some(b), Some(db)) = (b, lg.db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Gelu(x) => {
                self.accumulate(grads, *x, ops::gelu_backward(self.value(*x), g));
            }
            Op::Softmax(x) => {
                self.accumulate(grads, *x, ops::softmax_backward(out, g));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            } => {
                let (dx, dgain, dbias) = ops::layer_norm_backward(cache, self.value(*gain), g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dgain);
                self.accumulate(grads, *bias, dbias);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (dq, dk, dv) = ops::attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    probs,
                    *heads,
                    g,
                );
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).shape()[*axis];
                    if self.needs(p) {
                        let piece = g.narrow(*axis, start, len).expect("concat slice");
                        self.accumulate(grads, p, piece);
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let src = self.value(*x);
                let outer: usize = src.shape()[..*axis].iter().product();
                let inner: usize = src.shape()[*axis + 1..].iter().product();
                let extent = src.shape()[*axis];
                let len = g.shape()[*axis];
                let mut dx = vec![0.0; src.len()];
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    let from = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g.data()[from..from + len * inner]);
                }
                self.accumulate(
                    grads,
                    *x,
                    Tensor::from_parts(src.shape().to_vec(), dx, Precision::F64),
                );
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape();
                self.accumulate(grads, *x, g.reshape(shape).expect("reshape back"));
            }
            Op::SwapLeading(x) => {
                self.accumulate(grads, *x, g.swap_leading_axes().expect("swap back"));
            }
            Op::Broadcast(x) => {
                let src = self.value(*x);
                let mut acc = vec![0.0; src.len()];
                for chunk in g.data().chunks(src.len()) {
                    for (a, v) in acc.iter_mut().zip(chunk) {
                        *a += v;
                    }
                }
                self.accumulate(
                    grads,
                    *x,
                    Tensor::from_parts(src.shape().to_vec(), acc, Precision::F64),
                );
            }
            Op::MeanAxis { x, axis } => {
                let shape = self.value(*x).shape();
                self.accumulate(grads, *x, ops::mean_axis_backward(shape, *axis, g));
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let scale = g.data()[0];
                let mut d = probs.map(|p| p * scale);
                d.data_mut()[*label] -= scale;
                self.accumulate(grads, *logits, d);
            }
            Op::SumScalars(terms) => {
                for &t in terms {
                    self.accumulate(grads, t, g.reshape(self.value(t).shape()).expect("scalar"));
                }
            }
            Op::SumSquares(x) => {
                let scale = 2.0 * g.data()[0];
                self.accumulate(grads, *x, self.value(*x).map(|v| v * scale));
            }
        }
    }
}
