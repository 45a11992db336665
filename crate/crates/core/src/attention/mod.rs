//! Multi-head attention and the Q-Former stack.
//!
//! A Q-Former here is a stack of pre-norm residual blocks over a fixed set
//! of learnable queries:
//!
//! ```text
//! x ← x + SelfAttn(LN(x))
//! x ← x + CrossAttn(LN(x), LN(kv))
//! x ← x + FFN(LN(x))            FFN = linear → gelu → linear
//! ```
//!
//! All entry points accept either a single key/value sequence `[Lkv×D]` or
//! a batch of independent sequences `[G×Lkv×D]`; the same parameters are
//! applied to every group.

mod positional;

use std::fmt;
use std::str::FromStr;

pub use positional::{apply_positional_encoding, sinusoidal_table};

use crate::error::{Error, Result};
use crate::params::{normal, MlpParams, ParamTree, TensorTree};
use crate::synthbench::Prng;
use crate::tensor::ops::LAYER_NORM_EPS;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PeMode {
    #[default]
    Sinusoidal,
    Disabled,
}

impl fmt::Display for PeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PeMode::Sinusoidal => "sinusoidal",
            PeMode::Disabled => "disabled",
        })
    }
}

impl FromStr for PeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "sinusoidal" | "on" | "true" => Ok(PeMode::Sinusoidal),
            "disabled" | "off" | "false" | "none" => Ok(PeMode::Disabled),
            other => Err(format!(
                "expected `sinusoidal` or `disabled`, got `{other}`"
            )),
        }
    }
}

/// Bias-free Q/K/V/O projections.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<W = Tensor> {
    pub w_q: W,
    pub w_k: W,
    pub w_v: W,
    pub w_o: W,
    pub heads: usize,
}

impl AttentionParams<Tensor> {
    pub fn init(rng: &mut Prng, dim: usize, heads: usize) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(Self {
            w_q: normal(rng, &[dim, dim]),
            w_k: normal(rng, &[dim, dim]),
            w_v: normal(rng, &[dim, dim]),
            w_o: normal(rng, &[dim, dim]),
            heads,
        })
    }
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::invalid(
            "attention",
            format!("{heads} heads do not divide width {dim}"),
        ));
    }
    Ok(())
}

impl<W> ParamTree<W> for AttentionParams<W> {
    type Mapped<U> = AttentionParams<U>;

    fn map<U>(&self, f: &mut impl FnMut(&W) -> U) -> AttentionParams<U> {
        AttentionParams {
            w_q: f(&self.w_q),
            w_k: f(&self.w_k),
            w_v: f(&self.w_v),
            w_o: f(&self.w_o),
            heads: self.heads,
        }
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a W))
    where
        W: 'a,
    {
        f(&self.w_q);
        f(&self.w_k);
        f(&self.w_v);
        f(&self.w_o);
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut W)) {
        f(&mut self.w_q);
        f(&mut self.w_k);
        f(&mut self.w_v);
        f(&mut self.w_o);
    }
}

impl AttentionParams<Var> {
    pub fn forward(&self, tape: &mut Tape, q_in: Var, kv_in: Var) -> Result<Var> {
        let q = tape.linear(q_in, self.w_q, None)?;
        let k = tape.linear(kv_in, self.w_k, None)?;
        let v = tape.linear(kv_in, self.w_v, None)?;
        let o = tape.attention(q, k, v, self.heads)?;
        tape.linear(o, self.w_o, None)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<W = Tensor> {
    pub gain: W,
    pub bias: W,
}

impl LayerNormParams<Tensor> {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Tensor::ones(&[dim]),
            bias: Tensor::zeros(&[dim]),
        }
    }
}

impl<W> ParamTree<W> for LayerNormParams<W> {
    type Mapped<U> = LayerNormParams<U>;

    fn map<U>(&self, f: &mut impl FnMut(&W) -> U) -> LayerNormParams<U> {
        LayerNormParams {
            gain: f(&self.gain),
            bias: f(&self.bias),
        }
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a W))
    where
        W: 'a,
    {
        f(&self.gain);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut W)) {
        f(&mut self.gain);
        f(&mut self.bias);
    }
}

impl LayerNormParams<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gain, self.bias, LAYER_NORM_EPS)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<W = Tensor> {
    pub ln_self: LayerNormParams<W>,
    pub self_attn: AttentionParams<W>,
    pub ln_cross: LayerNormParams<W>,
    pub ln_kv: LayerNormParams<W>,
    pub cross_attn: AttentionParams<W>,
    pub ln_ffn: LayerNormParams<W>,
    pub ffn: MlpParams<W>,
}

impl BlockParams<Tensor> {
    pub fn init(rng: &mut Prng, dim: usize, heads: usize, ffn_mult: usize) -> Result<Self> {
        if ffn_mult == 0 {
            return Err(Error::invalid("qformer block", "ffn_mult must be >= 1"));
        }
        Ok(Self {
            ln_self: LayerNormParams::new(dim),
            self_attn: AttentionParams::init(rng, dim, heads)?,
            ln_cross: LayerNormParams::new(dim),
            ln_kv: LayerNormParams::new(dim),
            cross_attn: AttentionParams::init(rng, dim, heads)?,
            ln_ffn: LayerNormParams::new(dim),
            ffn: MlpParams::init(rng, dim, ffn_mult * dim, dim),
        })
    }
}

impl<W> ParamTree<W> for BlockParams<W> {
    type Mapped<U> = BlockParams<U>;

    fn map<U>(&self, f: &mut impl FnMut(&W) -> U) -> BlockParams<U> {
        BlockParams {
            ln_self: self.ln_self.map(f),
            self_attn: self.self_attn.map(f),
            ln_cross: self.ln_cross.map(f),
            ln_kv: self.ln_kv.map(f),
            cross_attn: self.cross_attn.map(f),
            ln_ffn: self.ln_ffn.map(f),
            ffn: self.ffn.map(f),
        }
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a W))
    where
        W: 'a,
    {
        self.ln_self.visit(f);
        self.self_attn.visit(f);
        self.ln_cross.visit(f);
        self.ln_kv.visit(f);
        self.cross_attn.visit(f);
        self.ln_ffn.visit(f);
        self.ffn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut W)) {
        self.ln_self.visit_mut(f);
        self.self_attn.visit_mut(f);
        self.ln_cross.visit_mut(f);
        self.ln_kv.visit_mut(f);
        self.cross_attn.visit_mut(f);
        self.ln_ffn.visit_mut(f);
        self.ffn.visit_mut(f);
    }
}

impl BlockParams<Var> {
    /// One block; `x` is `[L×D]` or `[G×L×D]`, `kv` matches its rank.
    pub fn forward(&self, tape: &mut Tape, x: Var, kv: Var) -> Result<Var> {
        let h = self.ln_self.forward(tape, x)?;
        let a = self.self_attn.forward(tape, h, h)?;
        let x = tape.add(x, a)?;

        let h = self.ln_cross.forward(tape, x)?;
        let kvn = self.ln_kv.forward(tape, kv)?;
        let c = self.cross_attn.forward(tape, h, kvn)?;
        let x = tape.add(x, c)?;

        let h = self.ln_ffn.forward(tape, x)?;
        let f = self.ffn.forward(tape, h)?;
        tape.add(x, f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QFormerParams<W = Tensor> {
    /// Learnable queries `[L×D]`.
    pub queries: W,
    pub blocks: Vec<BlockParams<W>>,
}

/// Shape hyperparameters of one Q-Former.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QFormerShape {
    pub queries: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_mult: usize,
}

impl QFormerShape {
    /// Exact number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        let hidden = self.ffn_mult * d;
        let attention = 4 * d * d;
        let ffn = d * hidden + hidden + hidden * d + d;
        let norms = 4 * 2 * d;
        self.queries * d + self.blocks * (2 * attention + ffn + norms)
    }
}

impl QFormerParams<Tensor> {
    pub fn init(rng: &mut Prng, shape: QFormerShape) -> Result<Self> {
        if shape.queries == 0 || shape.blocks == 0 {
            return Err(Error::invalid(
                "qformer",
                format!("needs >= 1 query and block, got {shape:?}"),
            ));
        }
        let queries = normal(rng, &[shape.queries, shape.dim]);
        let blocks = (0..shape.blocks)
            .map(|_| BlockParams::init(rng, shape.dim, shape.heads, shape.ffn_mult))
            .collect::<Result<_>>()?;
        Ok(Self { queries, blocks })
    }

    pub fn shape(&self) -> QFormerShape {
        let b = &self.blocks[0];
        QFormerShape {
            queries: self.queries.shape()[0],
            dim: self.queries.shape()[1],
            heads: b.self_attn.heads,
            blocks: self.blocks.len(),
            ffn_mult: b.ffn.w1.shape()[1] / self.queries.shape()[1],
        }
    }
}

impl<W> ParamTree<W> for QFormerParams<W> {
    type Mapped<U> = QFormerParams<U>;

    fn map<U>(&self, f: &mut impl FnMut(&W) -> U) -> QFormerParams<U> {
        QFormerParams {
            queries: f(&self.queries),
            blocks: self.blocks.map(f),
        }
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a W))
    where
        W: 'a,
    {
        f(&self.queries);
        self.blocks.visit(f);
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut W)) {
        f(&mut self.queries);
        self.blocks.visit_mut(f);
    }
}

impl QFormerParams<Var> {
    /// Pool `kv` (`[Lkv×D]` or `[G×Lkv×D]`) into `[L×D]` (or `[G×L×D]`).
    pub fn forward(&self, tape: &mut Tape, kv: Var, pe: PeMode) -> Result<Var> {
        let kv_shape = tape.value(kv).shape().to_vec();
        let dim = tape.value(self.queries).shape()[1];
        if !(kv_shape.len() == 2 || kv_shape.len() == 3) || kv_shape[kv_shape.len() - 1] != dim {
            return Err(Error::shape(
                "qformer",
                tape.value(self.queries).shape(),
                &kv_shape,
            ));
        }
        let kv = add_positional(tape, kv, pe)?;
        let mut x = if kv_shape.len() == 3 {
            tape.broadcast(self.queries, kv_shape[0])?
        } else {
            self.queries
        };
        for block in &self.blocks {
            x = block.forward(tape, x, kv)?;
        }
        Ok(x)
    }
}

/// Add the positional table along the second-to-last axis of `kv`.
pub fn add_positional(tape: &mut Tape, kv: Var, pe: PeMode) -> Result<Var> {
    match pe {
        PeMode::Disabled => Ok(kv),
        PeMode::Sinusoidal => {
            let shape = tape.value(kv).shape().to_vec();
            let table = sinusoidal_table(shape[shape.len() - 2], shape[shape.len() - 1])?;
            let full = if shape.len() == 3 {
                Tensor::new(&shape, table.data().repeat(shape[0]))?
            } else {
                table
            };
            let c = tape.constant(full);
            tape.add(kv, c)
        }
    }
}

/// Cross-attention of `q` over `kv` without a caller-managed tape.
pub fn multihead_cross_attention(
    q: &Tensor,
    kv: &Tensor,
    params: &AttentionParams,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let (q, kv) = (tape.constant(q.clone()), tape.constant(kv.clone()));
    let out = bound.forward(&mut tape, q, kv)?;
    Ok(tape.value(out).clone())
}

pub fn qformer_block(x: &Tensor, kv: &Tensor, params: &BlockParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let (x, kv) = (tape.constant(x.clone()), tape.constant(kv.clone()));
    let out = bound.forward(&mut tape, x, kv)?;
    Ok(tape.value(out).clone())
}

pub fn qformer_forward(kv: &Tensor, params: &QFormerParams, pe: PeMode) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let kv = tape.constant(kv.clone());
    let out = bound.forward(&mut tape, kv, pe)?;
    Ok(tape.value(out).clone())
}
