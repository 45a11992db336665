//! Video projectors: Espresso and three baselines.
//!
//! Every projector maps a [`FeatureVideo`] `[T×P×D_v]` to a token sequence
//! `[L_out×D_llm]` with one [`TokenSource`] per token. [`ProjectorParams`]
//! wraps all four parameter sets so training and the cost model can treat
//! them uniformly.

mod baselines;
mod espresso;
mod video;

use std::fmt;
use std::str::FromStr;

pub use baselines::{
    meanpool_baseline_forward, meanpool_tokens, mlp_baseline_forward, mlp_tokens,
    pr_baseline_forward, PrParams,
};
pub use espresso::{
    espresso_forward, param_init, segment_bounds, spatial_compress, spatial_pool, spatial_pool_on,
    split_segments, temporal_compress, temporal_pool, temporal_pool_on, EspressoConfig,
    EspressoParams,
};
pub use video::{FeatureVideo, MAGIC, VERSION};

use crate::attention::QFormerParams;
use crate::error::{Error, Result};
use crate::params::{MlpParams, ParamTree};
use crate::synthbench::Prng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenPath {
    /// Spatial compressor token (or per-patch mean token).
    Spatial,
    /// Temporal compressor token (or per-frame mean token).
    Temporal,
    /// One input patch mapped independently.
    Patch,
    /// Global resampler query.
    Query,
}

impl TokenPath {
    pub fn name(self) -> &'static str {
        match self {
            TokenPath::Spatial => "spatial",
            TokenPath::Temporal => "temporal",
            TokenPath::Patch => "patch",
            TokenPath::Query => "query",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TokenSource {
    pub segment: usize,
    pub path: TokenPath,
}

impl TokenSource {
    pub fn new(segment: usize, path: TokenPath) -> Self {
        Self { segment, path }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorOutput {
    /// `[L_out×D_llm]`.
    pub tokens: Tensor,
    pub provenance: Vec<TokenSource>,
}

impl ProjectorOutput {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProjectorKind {
    Espresso,
    Mlp,
    Pr,
    MeanPool,
}

impl ProjectorKind {
    pub const ALL: [ProjectorKind; 4] = [
        ProjectorKind::Espresso,
        ProjectorKind::Mlp,
        ProjectorKind::Pr,
        ProjectorKind::MeanPool,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProjectorKind::Espresso => "espresso",
            ProjectorKind::Mlp => "mlp",
            ProjectorKind::Pr => "pr",
            ProjectorKind::MeanPool => "meanpool",
        }
    }
}

impl fmt::Display for ProjectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProjectorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        ProjectorKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| format!("unknown projector kind `{}`", s.trim()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProjectorParams<W = Tensor> {
    Espresso(EspressoParams<W>),
    Mlp(MlpParams<W>),
    Pr(PrParams<W>),
    MeanPool(MlpParams<W>),
}

impl ProjectorParams<Tensor> {
    /// Initialize a projector of `kind` from `cfg.seed`.
    pub fn init(kind: ProjectorKind, cfg: &EspressoConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Prng::new(cfg.seed);
        let out_mlp = |rng: &mut Prng| MlpParams::init(rng, cfg.d_v, cfg.d_llm, cfg.d_llm);
        Ok(match kind {
            ProjectorKind::Espresso => ProjectorParams::Espresso(param_init(cfg, cfg.seed)?),
            ProjectorKind::Mlp => ProjectorParams::Mlp(out_mlp(&mut rng)),
            ProjectorKind::Pr => {
                let qformer = QFormerParams::init(&mut rng, cfg.qformer_shape(cfg.pr_queries))?;
                ProjectorParams::Pr(PrParams {
                    qformer,
                    out_mlp: out_mlp(&mut rng),
                })
            }
            ProjectorKind::MeanPool => ProjectorParams::MeanPool(out_mlp(&mut rng)),
        })
    }

    /// Run the projector without keeping a tape.
    pub fn project(&self, video: &FeatureVideo, cfg: &EspressoConfig) -> Result<ProjectorOutput> {
        match self {
            ProjectorParams::Espresso(p) => espresso_forward(video, p, cfg),
            ProjectorParams::Mlp(p) => mlp_baseline_forward(video, p),
            ProjectorParams::Pr(p) => pr_baseline_forward(video, p, cfg.pe),
            ProjectorParams::MeanPool(p) => meanpool_baseline_forward(video, p),
        }
    }
}

impl<W> ProjectorParams<W> {
    pub fn kind(&self) -> ProjectorKind {
        match self {
            ProjectorParams::Espresso(_) => ProjectorKind::Espresso,
            ProjectorParams::Mlp(_) => ProjectorKind::Mlp,
            ProjectorParams::Pr(_) => ProjectorKind::Pr,
            ProjectorParams::MeanPool(_) => ProjectorKind::MeanPool,
        }
    }
}

impl ProjectorParams<Var> {
    /// Record the projector on `tape`; returns `[L_out×D_llm]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        video: &FeatureVideo,
        cfg: &EspressoConfig,
    ) -> Result<(Var, Vec<TokenSource>)> {
        if video.dim() != cfg.d_v {
            return Err(Error::invalid(
                "projector",
                format!("feature width {} != d_v {}", video.dim(), cfg.d_v),
            ));
        }
        match self {
            ProjectorParams::Espresso(p) => p.forward(tape, video, cfg.n, cfg.pe),
            ProjectorParams::Mlp(p) => mlp_tokens(p, tape, video),
            ProjectorParams::Pr(p) => p.forward(tape, video, cfg.pe),
            ProjectorParams::MeanPool(p) => meanpool_tokens(p, tape, video),
        }
    }
}

impl<W> ParamTree<W> for ProjectorParams<W> {
    type Mapped<U> = ProjectorParams<U>;

    fn map<U>(&self, f: &mut impl FnMut(&W) -> U) -> ProjectorParams<U> {
        match self {
            ProjectorParams::Espresso(p) => ProjectorParams::Espresso(p.map(f)),
            ProjectorParams::Mlp(p) => ProjectorParams::Mlp(p.map(f)),
            ProjectorParams::Pr(p) => ProjectorParams::Pr(p.map(f)),
            ProjectorParams::MeanPool(p) => ProjectorParams::MeanPool(p.map(f)),
        }
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a W))
    where
        W: 'a,
    {
        match self {
            ProjectorParams::Espresso(p) => p.visit(f),
            ProjectorParams::Mlp(p) | ProjectorParams::MeanPool(p) => p.visit(f),
            ProjectorParams::Pr(p) => p.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut W)) {
        match self {
            ProjectorParams::Espresso(p) => p.visit_mut(f),
            ProjectorParams::Mlp(p) | ProjectorParams::MeanPool(p) => p.visit_mut(f),
            ProjectorParams::Pr(p) => p.visit_mut(f),
        }
    }
}
