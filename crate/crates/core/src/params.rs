//! Parameter trees.
//!
//! Every parameter struct is generic over its leaf type: `Tensor` for
//! storage, [`Var`] once bound to a tape. Visiting order is fixed by each
//! struct's field order, so flattening, binding and gradient collection
//! always line up.

use crate::error::{Error, Result};
use crate::synthbench::Prng;
use crate::tensor::{Gradients, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

pub trait ParamTree<W> {
    type Mapped<U>;

    fn map<U>(&self, f: &mut impl FnMut(&W) -> U) -> Self::Mapped<U>;
    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a W))
    where
        W: 'a;
    fn visit_mut(&mut self, f: &mut impl FnMut(&mut W));
}

/// Conveniences for trees of stored tensors.
pub trait TensorTree: ParamTree<Tensor> {
    fn bind(&self, tape: &mut Tape) -> Self::Mapped<Var> {
        self.map(&mut |t| tape.param(t.clone()))
    }

    fn flatten(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit(&mut |t| out.push(t.clone()));
        out
    }

    fn num_tensors(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_| n += 1);
        n
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |t| n += t.len());
        n
    }

    /// Overwrite every leaf, in visiting order, with `values`.
    fn assign(&mut self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.num_tensors() {
            return Err(Error::invalid(
                "assign parameters",
                format!(
                    "expected {} tensors, got {}",
                    self.num_tensors(),
                    values.len()
                ),
            ));
        }
        let mut it = values.iter();
        let mut err = None;
        self.visit_mut(&mut |t| {
            let v = it.next().unwrap();
            if v.shape() != t.shape() {
                err.get_or_insert(Error::shape("assign parameters", t.shape(), v.shape()));
            } else {
                *t = v.clone();
            }
        });
        err.map_or(Ok(()), Err)
    }
}

impl<T: ParamTree<Tensor>> TensorTree for T {}

/// Collect gradients of a bound tree in visiting order.
pub fn collect_grads<P: ParamTree<Var>>(bound: &P, tape: &Tape, grads: &Gradients) -> Vec<Tensor> {
    let mut out = Vec::new();
    bound.visit(&mut |&v| out.push(grads.param(tape, v)));
    out
}

pub(crate) fn normal(rng: &mut Prng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| INIT_STD * rng.next_normal())
}

/// Two-layer perceptron `gelu(x·W1 + b1)·W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<W = Tensor> {
    pub w1: W,
    pub b1: W,
    pub w2: W,
    pub b2: W,
}

impl MlpParams<Tensor> {
    pub fn init(rng: &mut Prng, din: usize, hidden: usize, dout: usize) -> Self {
        Self {
            w1: normal(rng, &[din, hidden]),
            b1: normal(rng, &[hidden]),
            w2: normal(rng, &[hidden, dout]),
            b2: normal(rng, &[dout]),
        }
    }
}

impl<W> ParamTree<W> for MlpParams<W> {
    type Mapped<U> = MlpParams<U>;

    fn map<U>(&self, f: &mut impl FnMut(&W) -> U) -> MlpParams<U> {
        MlpParams {
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
        }
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a W))
    where
        W: 'a,
    {
        f(&self.w1);
        f(&self.b1);
        f(&self.w2);
        f(&self.b2);
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut W)) {
        f(&mut self.w1);
        f(&mut self.b1);
        f(&mut self.w2);
        f(&mut self.b2);
    }
}

impl MlpParams<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.linear(x, self.w1, Some(self.b1))?;
        let h = tape.gelu(h);
        tape.linear(h, self.w2, Some(self.b2))
    }
}

impl<W, T: ParamTree<W>> ParamTree<W> for Vec<T> {
    type Mapped<U> = Vec<T::Mapped<U>>;

    fn map<U>(&self, f: &mut impl FnMut(&W) -> U) -> Self::Mapped<U> {
        self.iter().map(|t| t.map(f)).collect()
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a W))
    where
        W: 'a,
    {
        for t in self {
            t.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut W)) {
        for t in self {
            t.visit_mut(f);
        }
    }
}

/// A flat list of leaves, for checking raw kernels whose inputs act as
/// parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Leaves<W = Tensor>(pub Vec<W>);

impl<W> ParamTree<W> for Leaves<W> {
    type Mapped<U> = Leaves<U>;

    fn map<U>(&self, f: &mut impl FnMut(&W) -> U) -> Leaves<U> {
        Leaves(self.0.iter().map(f).collect())
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a W))
    where
        W: 'a,
    {
        self.0.iter().for_each(f);
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut W)) {
        self.0.iter_mut().for_each(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assign_round_trips_and_checks_shapes() {
        let mut rng = Prng::new(1);
        let a = MlpParams::init(&mut rng, 3, 4, 2);
        let mut b = MlpParams::init(&mut rng, 3, 4, 2);
        assert_ne!(a, b);
        b.assign(&a.flatten()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_params(), 3 * 4 + 4 + 4 * 2 + 2);
        let mut wrong = a.flatten();
        wrong[0] = Tensor::zeros(&[4, 3]);
        assert!(b.assign(&wrong).is_err());
        assert!(b.assign(&wrong[1..]).is_err());
    }
}
