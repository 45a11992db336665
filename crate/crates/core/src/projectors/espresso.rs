use std::ops::Range;

use super::{FeatureVideo, ProjectorOutput, TokenPath, TokenSource};
use crate::attention::{PeMode, QFormerParams, QFormerShape};
use crate::error::{Error, Result};
use crate::params::{MlpParams, ParamTree, TensorTree};
use crate::synthbench::Prng;
use crate::tensor::{Tape, Tensor, Var};

/// Hyperparameters shared by Espresso and the baseline projectors.
///
/// `p`, `t` and `n` only apply to Espresso and `pr_queries` only to the
/// Perceiver-Resampler baseline; the widths and Q-Former shape apply to
/// every kind that uses them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EspressoConfig {
    pub d_v: usize,
    pub d_llm: usize,
    pub p: usize,
    pub t: usize,
    pub n: usize,
    pub pr_queries: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_mult: usize,
    pub pe: PeMode,
    pub seed: u64,
}

impl Default for EspressoConfig {
    fn default() -> Self {
        Self {
            d_v: 16,
            d_llm: 32,
            p: 4,
            t: 4,
            n: 1,
            pr_queries: 8,
            heads: 4,
            blocks: 2,
            ffn_mult: 4,
            pe: PeMode::Sinusoidal,
            seed: 0,
        }
    }
}

impl EspressoConfig {
    /// Check every field; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("p", self.p),
            ("t", self.t),
            ("n", self.n),
            ("pr_queries", self.pr_queries),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("ffn_mult", self.ffn_mult),
            ("d_v", self.d_v),
            ("d_llm", self.d_llm),
        ];
        for (key, value) in positive {
            if value == 0 {
                return Err(Error::config(key, "must be >= 1"));
            }
        }
        for (key, width) in [("d_v", self.d_v), ("d_llm", self.d_llm)] {
            if width % 2 != 0 {
                return Err(Error::config(key, format!("{width} is not even")));
            }
            if width % self.heads != 0 {
                return Err(Error::config(
                    key,
                    format!("{width} is not divisible by heads = {}", self.heads),
                ));
            }
        }
        Ok(())
    }

    /// Output length `n(p + t)`.
    pub fn output_tokens(&self) -> usize {
        self.n * (self.p + self.t)
    }

    pub(crate) fn qformer_shape(&self, queries: usize) -> QFormerShape {
        QFormerShape {
            queries,
            dim: self.d_v,
            heads: self.heads,
            blocks: self.blocks,
            ffn_mult: self.ffn_mult,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EspressoParams<W = Tensor> {
    pub temporal_pooler: QFormerParams<W>,
    pub spatial_pooler: QFormerParams<W>,
    pub spatial_compressor: QFormerParams<W>,
    pub temporal_compressor: QFormerParams<W>,
    pub out_mlp: MlpParams<W>,
}

/// Deterministic initialization from `seed`.
pub fn param_init(cfg: &EspressoConfig, seed: u64) -> Result<EspressoParams> {
    cfg.validate()?;
    let mut rng = Prng::new(seed);
    Ok(EspressoParams {
        temporal_pooler: QFormerParams::init(&mut rng, cfg.qformer_shape(1))?,
        spatial_pooler: QFormerParams::init(&mut rng, cfg.qformer_shape(1))?,
        spatial_compressor: QFormerParams::init(&mut rng, cfg.qformer_shape(cfg.p))?,
        temporal_compressor: QFormerParams::init(&mut rng, cfg.qformer_shape(cfg.t))?,
        out_mlp: MlpParams::init(&mut rng, cfg.d_v, cfg.d_llm, cfg.d_llm),
    })
}

impl<W> ParamTree<W> for EspressoParams<W> {
    type Mapped<U> = EspressoParams<U>;

    fn map<U>(&self, f: &mut impl FnMut(&W) -> U) -> EspressoParams<U> {
        EspressoParams {
            temporal_pooler: self.temporal_pooler.map(f),
            spatial_pooler: self.spatial_pooler.map(f),
            spatial_compressor: self.spatial_compressor.map(f),
            temporal_compressor: self.temporal_compressor.map(f),
            out_mlp: self.out_mlp.map(f),
        }
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a W))
    where
        W: 'a,
    {
        self.temporal_pooler.visit(f);
        self.spatial_pooler.visit(f);
        self.spatial_compressor.visit(f);
        self.temporal_compressor.visit(f);
        self.out_mlp.visit(f);
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut W)) {
        self.temporal_pooler.visit_mut(f);
        self.spatial_pooler.visit_mut(f);
        self.spatial_compressor.visit_mut(f);
        self.temporal_compressor.visit_mut(f);
        self.out_mlp.visit_mut(f);
    }
}

impl EspressoParams<Tensor> {
    /// Check that the stored shapes agree with `cfg`.
    pub fn check_config(&self, cfg: &EspressoConfig) -> Result<()> {
        let expected = [
            ("temporal_pooler", cfg.qformer_shape(1)),
            ("spatial_pooler", cfg.qformer_shape(1)),
            ("spatial_compressor", cfg.qformer_shape(cfg.p)),
            ("temporal_compressor", cfg.qformer_shape(cfg.t)),
        ];
        let actual = [
            &self.temporal_pooler,
            &self.spatial_pooler,
            &self.spatial_compressor,
            &self.temporal_compressor,
        ];
        for ((name, want), have) in expected.iter().zip(actual) {
            if have.shape() != *want {
                return Err(Error::invalid(
                    "espresso parameters",
                    format!("{name} has shape {:?}, config wants {want:?}", have.shape()),
                ));
            }
        }
        let mlp = [self.out_mlp.w1.shape(), self.out_mlp.w2.shape()];
        if mlp != [&[cfg.d_v, cfg.d_llm][..], &[cfg.d_llm, cfg.d_llm][..]] {
            return Err(Error::invalid(
                "espresso parameters",
                format!("out_mlp shapes {mlp:?} disagree with d_v/d_llm"),
            ));
        }
        Ok(())
    }
}

/// Frame ranges of the `n` segments: `[⌊sT/n⌋, ⌊(s+1)T/n⌋)`.
pub fn segment_bounds(frames: usize, n: usize) -> Result<Vec<Range<usize>>> {
    if n == 0 || frames < n {
        return Err(Error::invalid(
            "split_segments",
            format!("cannot split {frames} frames into {n} segments"),
        ));
    }
    Ok((0..n)
        .map(|s| s * frames / n..(s + 1) * frames / n)
        .collect())
}

pub fn split_segments(v: &FeatureVideo, n: usize) -> Result<Vec<FeatureVideo>> {
    segment_bounds(v.frames(), n)?
        .into_iter()
        .map(|r| v.frame_range(r.start, r.len()))
        .collect()
}

/// `[T_s×P×D]` → `[P×D]`: one query per spatial location, over time.
pub fn temporal_pool_on(
    tape: &mut Tape,
    pooler: &QFormerParams<Var>,
    seg: Var,
    pe: PeMode,
) -> Result<Var> {
    let shape = tape.value(seg).shape().to_vec();
    let by_patch = tape.swap_leading_axes(seg)?;
    let pooled = pooler.forward(tape, by_patch, pe)?;
    tape.reshape(pooled, &[shape[1], shape[2]])
}

/// `[T_s×P×D]` → `[T_s×D]`: one query per frame, over its patches.
pub fn spatial_pool_on(
    tape: &mut Tape,
    pooler: &QFormerParams<Var>,
    seg: Var,
    pe: PeMode,
) -> Result<Var> {
    let shape = tape.value(seg).shape().to_vec();
    let pooled = pooler.forward(tape, seg, pe)?;
    tape.reshape(pooled, &[shape[0], shape[2]])
}

impl EspressoParams<Var> {
    /// Tokens of one segment before the output MLP: `[(p+t)×D_v]`.
    pub fn segment_tokens(&self, tape: &mut Tape, seg: Var, pe: PeMode) -> Result<Var> {
        let x_s = temporal_pool_on(tape, &self.temporal_pooler, seg, pe)?;
        let spatial = self.spatial_compressor.forward(tape, x_s, pe)?;
        let x_t = spatial_pool_on(tape, &self.spatial_pooler, seg, pe)?;
        let temporal = self.temporal_compressor.forward(tape, x_t, pe)?;
        tape.concat(&[spatial, temporal], 0)
    }

    /// Full projector on a tape. Returns `[n(p+t)×D_llm]` tokens.
    pub fn forward(
        &self,
        tape: &mut Tape,
        video: &FeatureVideo,
        n: usize,
        pe: PeMode,
    ) -> Result<(Var, Vec<TokenSource>)> {
        let p = tape.value(self.spatial_compressor.queries).shape()[0];
        let t = tape.value(self.temporal_compressor.queries).shape()[0];
        let mut blocks = Vec::with_capacity(n);
        let mut provenance = Vec::with_capacity(n * (p + t));
        for (s, range) in segment_bounds(video.frames(), n)?.into_iter().enumerate() {
            let seg = video.features().narrow(0, range.start, range.len())?;
            let seg = tape.constant(seg);
            blocks.push(self.segment_tokens(tape, seg, pe)?);
            provenance.extend((0..p).map(|_| TokenSource::new(s, TokenPath::Spatial)));
            provenance.extend((0..t).map(|_| TokenSource::new(s, TokenPath::Temporal)));
        }
        let tokens = tape.concat(&blocks, 0)?;
        Ok((self.out_mlp.forward(tape, tokens)?, provenance))
    }
}

fn run_segment_op(
    seg: &FeatureVideo,
    op: impl FnOnce(&mut Tape, Var) -> Result<Var>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(seg.features().clone());
    let out = op(&mut tape, x)?;
    Ok(tape.value(out).clone())
}

/// Pool each spatial location across the segment's frames: `[P×D_v]`.
pub fn temporal_pool(seg: &FeatureVideo, pooler: &QFormerParams, pe: PeMode) -> Result<Tensor> {
    run_segment_op(seg, |tape, x| {
        let q = pooler.bind(tape);
        temporal_pool_on(tape, &q, x, pe)
    })
}

/// Pool each frame across its patches: `[T_s×D_v]`.
pub fn spatial_pool(seg: &FeatureVideo, pooler: &QFormerParams, pe: PeMode) -> Result<Tensor> {
    run_segment_op(seg, |tape, x| {
        let q = pooler.bind(tape);
        spatial_pool_on(tape, &q, x, pe)
    })
}

fn compress(x: &Tensor, compressor: &QFormerParams, pe: PeMode) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::invalid(
            "compress",
            format!("expected [L, D] input, got {:?}", x.shape()),
        ));
    }
    crate::attention::qformer_forward(x, compressor, pe)
}

/// `[P×D_v]` → `[p×D_v]`.
pub fn spatial_compress(x_s: &Tensor, compressor: &QFormerParams, pe: PeMode) -> Result<Tensor> {
    compress(x_s, compressor, pe)
}

/// `[T_s×D_v]` → `[t×D_v]`.
pub fn temporal_compress(x_t: &Tensor, compressor: &QFormerParams, pe: PeMode) -> Result<Tensor> {
    compress(x_t, compressor, pe)
}

pub fn espresso_forward(
    v: &FeatureVideo,
    params: &EspressoParams,
    cfg: &EspressoConfig,
) -> Result<ProjectorOutput> {
    cfg.validate()?;
    params.check_config(cfg)?;
    if v.dim() != cfg.d_v {
        return Err(Error::invalid(
            "espresso_forward",
            format!("feature width {} != d_v {}", v.dim(), cfg.d_v),
        ));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let (tokens, provenance) = bound.forward(&mut tape, v, cfg.n, cfg.pe)?;
    Ok(ProjectorOutput {
        tokens: tape.value(tokens).clone(),
        provenance,
    })
}
