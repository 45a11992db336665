//! Reference projectors: a per-token MLP, a single Perceiver-Resampler
//! Q-Former over all tokens, and parameter-free mean pooling followed by
//! an MLP.

use super::{FeatureVideo, ProjectorOutput, TokenPath, TokenSource};
use crate::attention::{PeMode, QFormerParams};
use crate::error::{Error, Result};
use crate::params::{MlpParams, ParamTree, TensorTree};
use crate::tensor::{Tape, Tensor, Var};

/// Perceiver-Resampler: one Q-Former over the flattened `T·P` tokens,
/// then the output MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct PrParams<W = Tensor> {
    pub qformer: QFormerParams<W>,
    pub out_mlp: MlpParams<W>,
}

impl<W> ParamTree<W> for PrParams<W> {
    type Mapped<U> = PrParams<U>;

    fn map<U>(&self, f: &mut impl FnMut(&W) -> U) -> PrParams<U> {
        PrParams {
            qformer: self.qformer.map(f),
            out_mlp: self.out_mlp.map(f),
        }
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a W))
    where
        W: 'a,
    {
        self.qformer.visit(f);
        self.out_mlp.visit(f);
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut W)) {
        self.qformer.visit_mut(f);
        self.out_mlp.visit_mut(f);
    }
}

fn flat_tokens(tape: &mut Tape, video: &FeatureVideo) -> Result<Var> {
    let flat = video
        .features()
        .reshape(&[video.frames() * video.patches(), video.dim()])?;
    Ok(tape.constant(flat))
}

/// `T·P` tokens in frame-major, patch-minor order.
pub fn mlp_tokens(
    mlp: &MlpParams<Var>,
    tape: &mut Tape,
    video: &FeatureVideo,
) -> Result<(Var, Vec<TokenSource>)> {
    let x = flat_tokens(tape, video)?;
    let out = mlp.forward(tape, x)?;
    let provenance = vec![TokenSource::new(0, TokenPath::Patch); video.frames() * video.patches()];
    Ok((out, provenance))
}

impl PrParams<Var> {
    pub fn forward(
        &self,
        tape: &mut Tape,
        video: &FeatureVideo,
        pe: PeMode,
    ) -> Result<(Var, Vec<TokenSource>)> {
        let x = flat_tokens(tape, video)?;
        let pooled = self.qformer.forward(tape, x, pe)?;
        let queries = tape.value(pooled).shape()[0];
        let out = self.out_mlp.forward(tape, pooled)?;
        Ok((out, vec![TokenSource::new(0, TokenPath::Query); queries]))
    }
}

/// `P` per-patch means over time, then `T` per-frame means over patches,
/// then the MLP.
pub fn meanpool_tokens(
    mlp: &MlpParams<Var>,
    tape: &mut Tape,
    video: &FeatureVideo,
) -> Result<(Var, Vec<TokenSource>)> {
    let x = tape.constant(video.features().clone());
    let spatial = tape.mean_axis(x, 0)?;
    let temporal = tape.mean_axis(x, 1)?;
    let tokens = tape.concat(&[spatial, temporal], 0)?;
    let out = mlp.forward(tape, tokens)?;
    let mut provenance = vec![TokenSource::new(0, TokenPath::Spatial); video.patches()];
    provenance.extend(vec![
        TokenSource::new(0, TokenPath::Temporal);
        video.frames()
    ]);
    Ok((out, provenance))
}

fn check_width(op: &'static str, video: &FeatureVideo, mlp: &MlpParams) -> Result<()> {
    if mlp.w1.shape()[0] != video.dim() {
        return Err(Error::invalid(
            op,
            format!(
                "feature width {} != projector input width {}",
                video.dim(),
                mlp.w1.shape()[0]
            ),
        ));
    }
    Ok(())
}

fn finish(tape: Tape, out: (Var, Vec<TokenSource>)) -> ProjectorOutput {
    ProjectorOutput {
        tokens: tape.value(out.0).clone(),
        provenance: out.1,
    }
}

pub fn mlp_baseline_forward(v: &FeatureVideo, params: &MlpParams) -> Result<ProjectorOutput> {
    check_width("mlp_baseline_forward", v, params)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = mlp_tokens(&bound, &mut tape, v)?;
    Ok(finish(tape, out))
}

pub fn pr_baseline_forward(
    v: &FeatureVideo,
    params: &PrParams,
    pe: PeMode,
) -> Result<ProjectorOutput> {
    check_width("pr_baseline_forward", v, &params.out_mlp)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = bound.forward(&mut tape, v, pe)?;
    Ok(finish(tape, out))
}

pub fn meanpool_baseline_forward(v: &FeatureVideo, params: &MlpParams) -> Result<ProjectorOutput> {
    check_width("meanpool_baseline_forward", v, params)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = meanpool_tokens(&bound, &mut tape, v)?;
    Ok(finish(tape, out))
}
