//! Token, parameter and multiply-accumulate accounting for every projector
//! kind, plus a warm-up-then-measure wall-clock harness.
//!
//! MAC counts cover matrix products only (linear layers and the two
//! products inside attention); softmax, normalization and activations are
//! excluded. [`flop_estimate`] reproduces the instrumented counter of
//! [`crate::tensor::ops::count_macs`] exactly.

use std::time::{Duration, Instant};

use crate::attention::QFormerShape;
use crate::error::{Error, Result};
use crate::projectors::{
    segment_bounds, EspressoConfig, FeatureVideo, ProjectorKind, ProjectorParams,
};
use crate::synthbench::Prng;
use crate::tensor::Tensor;

/// Frame counts of the default scaling sweep.
pub const DEFAULT_FRAMES: [usize; 5] = [8, 16, 32, 64, 128];
pub const DEFAULT_WARMUPS: usize = 2;
pub const DEFAULT_RUNS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectorDescriptor {
    pub kind: ProjectorKind,
    pub config: EspressoConfig,
}

impl ProjectorDescriptor {
    pub fn new(kind: ProjectorKind, config: EspressoConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { kind, config })
    }
}

fn check_input(d: &ProjectorDescriptor, frames: usize, patches: usize) -> Result<()> {
    d.config.validate()?;
    if frames == 0 || patches == 0 {
        return Err(Error::invalid(
            "cost model",
            format!("input needs T >= 1 and P >= 1, got T={frames} P={patches}"),
        ));
    }
    if d.kind == ProjectorKind::Espresso && frames < d.config.n {
        return Err(Error::invalid(
            "cost model",
            format!("T={frames} < n={}", d.config.n),
        ));
    }
    Ok(())
}

/// Number of tokens handed to the language model.
pub fn token_count(d: &ProjectorDescriptor, frames: usize, patches: usize) -> Result<usize> {
    check_input(d, frames, patches)?;
    let c = &d.config;
    Ok(match d.kind {
        ProjectorKind::Espresso => c.output_tokens(),
        ProjectorKind::Mlp => frames * patches,
        ProjectorKind::Pr => c.pr_queries,
        ProjectorKind::MeanPool => frames + patches,
    })
}

fn out_mlp_params(c: &EspressoConfig) -> usize {
    c.d_v * c.d_llm + c.d_llm + c.d_llm * c.d_llm + c.d_llm
}

fn qformer(c: &EspressoConfig, queries: usize) -> QFormerShape {
    QFormerShape {
        queries,
        dim: c.d_v,
        heads: c.heads,
        blocks: c.blocks,
        ffn_mult: c.ffn_mult,
    }
}

/// Closed-form parameter count.
pub fn param_count(d: &ProjectorDescriptor) -> Result<usize> {
    let c = &d.config;
    c.validate()?;
    let mlp = out_mlp_params(c);
    Ok(match d.kind {
        ProjectorKind::Espresso => {
            2 * qformer(c, 1).param_count()
                + qformer(c, c.p).param_count()
                + qformer(c, c.t).param_count()
                + mlp
        }
        ProjectorKind::Mlp | ProjectorKind::MeanPool => mlp,
        ProjectorKind::Pr => qformer(c, c.pr_queries).param_count() + mlp,
    })
}

/// MACs of one Q-Former run over `groups` independent key/value sets.
fn qformer_macs(s: QFormerShape, groups: usize, keys: usize) -> u64 {
    let (l, lk, d, f) = (
        s.queries as u64,
        keys as u64,
        s.dim as u64,
        s.ffn_mult as u64,
    );
    let self_attn = 4 * l * d * d + 2 * l * l * d;
    let cross_attn = 2 * l * d * d + 2 * lk * d * d + 2 * l * lk * d;
    let ffn = 2 * f * l * d * d;
    groups as u64 * s.blocks as u64 * (self_attn + cross_attn + ffn)
}

fn out_mlp_macs(c: &EspressoConfig, rows: usize) -> u64 {
    let (dv, dl) = (c.d_v as u64, c.d_llm as u64);
    rows as u64 * (dv * dl + dl * dl)
}

/// Multiply-accumulates of one forward pass on a `[T×P×D_v]` input.
pub fn flop_estimate(d: &ProjectorDescriptor, frames: usize, patches: usize) -> Result<u64> {
    check_input(d, frames, patches)?;
    let c = &d.config;
    Ok(match d.kind {
        ProjectorKind::Espresso => {
            let mut total = 0;
            for seg in segment_bounds(frames, c.n)? {
                let ts = seg.len();
                total += qformer_macs(qformer(c, 1), patches, ts)
                    + qformer_macs(qformer(c, c.p), 1, patches)
                    + qformer_macs(qformer(c, 1), ts, patches)
                    + qformer_macs(qformer(c, c.t), 1, ts);
            }
            total + out_mlp_macs(c, c.output_tokens())
        }
        ProjectorKind::Mlp => out_mlp_macs(c, frames * patches),
        ProjectorKind::Pr => {
            qformer_macs(qformer(c, c.pr_queries), 1, frames * patches)
                + out_mlp_macs(c, c.pr_queries)
        }
        ProjectorKind::MeanPool => out_mlp_macs(c, frames + patches),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeReport {
    pub warmup_count: usize,
    pub run_count: usize,
    pub samples: Vec<Duration>,
    pub mean: Duration,
    pub min: Duration,
    pub max: Duration,
}

/// Run `f` `warmups` times untimed, then `runs` times timed.
pub fn measure_runtime(
    mut f: impl FnMut() -> Result<()>,
    warmups: usize,
    runs: usize,
) -> Result<RuntimeReport> {
    if runs == 0 {
        return Err(Error::invalid("measure_runtime", "runs must be >= 1"));
    }
    for _ in 0..warmups {
        f()?;
    }
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        f()?;
        samples.push(start.elapsed());
    }
    let total: Duration = samples.iter().sum();
    Ok(RuntimeReport {
        warmup_count: warmups,
        run_count: runs,
        mean: total / runs as u32,
        min: *samples.iter().min().unwrap(),
        max: *samples.iter().max().unwrap(),
        samples,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub kind: ProjectorKind,
    pub frames: usize,
    pub patches: usize,
    pub tokens: usize,
    pub params: usize,
    pub macs: u64,
    pub runtime: Option<RuntimeReport>,
}

/// Timing protocol for [`scaling_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Timing {
    pub warmups: usize,
    pub runs: usize,
}

impl Default for Timing {
    fn default() -> Self {
        Self {
            warmups: DEFAULT_WARMUPS,
            runs: DEFAULT_RUNS,
        }
    }
}

/// A random input video, deterministic in `seed`.
pub fn random_video(frames: usize, patches: usize, dim: usize, seed: u64) -> Result<FeatureVideo> {
    let mut rng = Prng::new(seed);
    FeatureVideo::new(Tensor::new(
        &[frames, patches, dim],
        (0..frames * patches * dim)
            .map(|_| rng.next_normal())
            .collect(),
    )?)
}

/// One row per `(descriptor, T)`, descriptors outermost.
pub fn scaling_report(
    kinds: &[ProjectorDescriptor],
    frames: &[usize],
    patches: usize,
    timing: Option<Timing>,
) -> Result<Vec<CostRow>> {
    if kinds.is_empty() || frames.is_empty() {
        return Err(Error::invalid(
            "scaling_report",
            "needs at least one projector and one frame count",
        ));
    }
    let mut rows = Vec::with_capacity(kinds.len() * frames.len());
    for d in kinds {
        let params = match timing {
            Some(_) => Some(ProjectorParams::init(d.kind, &d.config)?),
            None => None,
        };
        for &t in frames {
            let runtime = match (timing, &params) {
                (Some(timing), Some(params)) => {
                    let video = random_video(t, patches, d.config.d_v, d.config.seed)?;
                    Some(measure_runtime(
                        || params.project(&video, &d.config).map(|_| ()),
                        timing.warmups,
                        timing.runs,
                    )?)
                }
                _ => None,
            };
            rows.push(CostRow {
                kind: d.kind,
                frames: t,
                patches,
                tokens: token_count(d, t, patches)?,
                params: param_count(d)?,
                macs: flop_estimate(d, t, patches)?,
                runtime,
            });
        }
    }
    Ok(rows)
}
