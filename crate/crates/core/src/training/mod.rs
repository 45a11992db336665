//! Projector + probe training on the needle task.
//!
//! A probe reads the flattened projector tokens together with the one-hot
//! index of the scene being asked about and predicts that scene's motif
//! class. Two probe forms are available:
//!
//! * [`ProbeKind::Linear`]: one linear map on `[tokens; onehot]`. Its
//!   logits decompose as `f(tokens) + g(target)`, so the target can only
//!   shift the class scores by a per-target constant.
//! * [`ProbeKind::TargetGated`]: one linear map on
//!   `[onehot ⊗ tokens; onehot]`, i.e. a separate token read-out per target
//!   scene. This is the default used for training.

pub mod checkpoint;
mod suite;

use std::fmt;
use std::str::FromStr;

pub use suite::{gradient_suite, suite_config, GradSuiteEntry, SUITE_STEP, SUITE_TOLERANCE};

use crate::costmodel::{token_count, ProjectorDescriptor};
use crate::error::{Error, Result};
use crate::params::{collect_grads, normal, ParamTree, TensorTree};
use crate::projectors::{EspressoConfig, ProjectorKind, ProjectorOutput, ProjectorParams};
use crate::synthbench::{NeedleComposite, NeedleDataset, Prng, SCENES};
use crate::tensor::{Tape, Tensor, Var};

pub const TRAIN_BASE_SEED: u64 = 0;
pub const EVAL_BASE_SEED: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub enum ProbeKind {
    Linear,
    #[default]
    TargetGated,
}

impl ProbeKind {
    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Linear => "linear",
            ProbeKind::TargetGated => "gated",
        }
    }

    /// Probe input width for `features` flattened token values.
    pub fn input_width(self, features: usize) -> usize {
        match self {
            ProbeKind::Linear => features + SCENES,
            ProbeKind::TargetGated => SCENES * features + SCENES,
        }
    }
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProbeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "linear" => Ok(ProbeKind::Linear),
            "gated" => Ok(ProbeKind::TargetGated),
            other => Err(format!("expected `linear` or `gated`, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeParams<W = Tensor> {
    /// `[input_width × M]`.
    pub w: W,
    /// `[M]`.
    pub b: W,
    pub kind: ProbeKind,
}

impl ProbeParams<Tensor> {
    pub fn init(rng: &mut Prng, kind: ProbeKind, features: usize, classes: usize) -> Self {
        Self {
            w: normal(rng, &[kind.input_width(features), classes]),
            b: normal(rng, &[classes]),
            kind,
        }
    }

    pub fn zeros(kind: ProbeKind, features: usize, classes: usize) -> Self {
        Self {
            w: Tensor::zeros(&[kind.input_width(features), classes]),
            b: Tensor::zeros(&[classes]),
            kind,
        }
    }
}

impl<W> ParamTree<W> for ProbeParams<W> {
    type Mapped<U> = ProbeParams<U>;

    fn map<U>(&self, f: &mut impl FnMut(&W) -> U) -> ProbeParams<U> {
        ProbeParams {
            w: f(&self.w),
            b: f(&self.b),
            kind: self.kind,
        }
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a W))
    where
        W: 'a,
    {
        f(&self.w);
        f(&self.b);
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut W)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

impl ProbeParams<Var> {
    /// Logits `[M]` from tokens `[L×D]` and the target one-hot.
    pub fn forward(&self, tape: &mut Tape, tokens: Var, target: &[f64; SCENES]) -> Result<Var> {
        let features = tape.value(tokens).len();
        let rows = tape.value(self.w).shape()[0];
        if rows != self.kind.input_width(features) {
            return Err(Error::invalid(
                "probe_forward",
                format!(
                    "{} probe with {rows} input rows cannot read {features} token values",
                    self.kind
                ),
            ));
        }
        let flat = tape.reshape(tokens, &[1, features])?;
        let onehot = tape.constant(Tensor::new(&[1, SCENES], target.to_vec())?);
        let parts: Vec<Var> = match self.kind {
            ProbeKind::Linear => vec![flat, onehot],
            ProbeKind::TargetGated => target
                .iter()
                .map(|&g| tape.scale(flat, g))
                .chain([onehot])
                .collect(),
        };
        let input = tape.concat(&parts, 1)?;
        let logits = tape.linear(input, self.w, Some(self.b))?;
        let classes = tape.value(logits).len();
        tape.reshape(logits, &[classes])
    }
}

pub fn probe_forward(
    out: &ProjectorOutput,
    target_onehot: &[f64; SCENES],
    probe: &ProbeParams,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = probe.bind(&mut tape);
    let tokens = tape.constant(out.tokens.clone());
    let logits = bound.forward(&mut tape, tokens, target_onehot)?;
    Ok(tape.value(logits).clone())
}

/// Projector followed by probe.
#[derive(Debug, Clone, PartialEq)]
pub struct NeedleModel<W = Tensor> {
    pub projector: ProjectorParams<W>,
    pub probe: ProbeParams<W>,
}

impl<W> ParamTree<W> for NeedleModel<W> {
    type Mapped<U> = NeedleModel<U>;

    fn map<U>(&self, f: &mut impl FnMut(&W) -> U) -> NeedleModel<U> {
        NeedleModel {
            projector: self.projector.map(f),
            probe: self.probe.map(f),
        }
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a W))
    where
        W: 'a,
    {
        self.projector.visit(f);
        self.probe.visit(f);
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&mut W)) {
        self.projector.visit_mut(f);
        self.probe.visit_mut(f);
    }
}

impl NeedleModel<Tensor> {
    /// Fresh model for composites of `frames × patches`. The projector
    /// draws from `cfg.seed`; the probe continues on `rng`.
    pub fn init(
        kind: ProjectorKind,
        cfg: &EspressoConfig,
        probe: ProbeKind,
        frames: usize,
        patches: usize,
        classes: usize,
        rng: &mut Prng,
    ) -> Result<Self> {
        let descriptor = ProjectorDescriptor::new(kind, *cfg)?;
        let features = token_count(&descriptor, frames, patches)? * cfg.d_llm;
        Ok(Self {
            projector: ProjectorParams::init(kind, cfg)?,
            probe: ProbeParams::init(rng, probe, features, classes),
        })
    }

    pub fn logits(&self, composite: &NeedleComposite, cfg: &EspressoConfig) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let logits = bound.logits(&mut tape, composite, cfg)?;
        Ok(tape.value(logits).clone())
    }
}

impl NeedleModel<Var> {
    pub fn logits(
        &self,
        tape: &mut Tape,
        composite: &NeedleComposite,
        cfg: &EspressoConfig,
    ) -> Result<Var> {
        let (tokens, _) = self.projector.forward(tape, &composite.features, cfg)?;
        self.probe.forward(tape, tokens, &composite.target_onehot())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub hyper: AdamConfig,
}

impl OptimState {
    pub fn new(params: &[Tensor], hyper: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            hyper,
        }
    }

    pub fn for_tree<P: TensorTree>(params: &P, hyper: AdamConfig) -> Self {
        Self::new(&params.flatten(), hyper)
    }
}

fn adam_update(p: &mut Tensor, g: &Tensor, m: &mut Tensor, v: &mut Tensor, h: &AdamConfig, t: u64) {
    let c1 = 1.0 - h.beta1.powi(t as i32);
    let c2 = 1.0 - h.beta2.powi(t as i32);
    let (md, vd) = (m.data_mut(), v.data_mut());
    for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
        md[i] = h.beta1 * md[i] + (1.0 - h.beta1) * gv;
        vd[i] = h.beta2 * vd[i] + (1.0 - h.beta2) * gv * gv;
        let m_hat = md[i] / c1;
        let v_hat = vd[i] / c2;
        *pv -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
    }
}

fn check_adam_shapes<'a>(
    params: impl Iterator<Item = &'a [usize]>,
    grads: &[Tensor],
    state: &OptimState,
) -> Result<()> {
    let shapes: Vec<&[usize]> = params.collect();
    if shapes.len() != grads.len() || shapes.len() != state.m.len() {
        return Err(Error::invalid(
            "adam_step",
            format!(
                "{} parameters, {} gradients, {} moment slots",
                shapes.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for ((s, g), m) in shapes.iter().zip(grads).zip(&state.m) {
        if *s != g.shape() || *s != m.shape() {
            return Err(Error::shape("adam_step", s, g.shape()));
        }
    }
    Ok(())
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut OptimState) -> Result<()> {
    check_adam_shapes(params.iter().map(|p| p.shape()), grads, state)?;
    state.step += 1;
    let (t, h) = (state.step, state.hyper);
    for (i, p) in params.iter_mut().enumerate() {
        adam_update(p, &grads[i], &mut state.m[i], &mut state.v[i], &h, t);
    }
    Ok(())
}

/// [`adam_step`] applied in place to every leaf of a tree.
pub fn adam_step_tree<P: TensorTree>(
    params: &mut P,
    grads: &[Tensor],
    state: &mut OptimState,
) -> Result<()> {
    let mut shapes = Vec::new();
    params.visit(&mut |t| shapes.push(t.shape().to_vec()));
    check_adam_shapes(shapes.iter().map(|s| s.as_slice()), grads, state)?;
    state.step += 1;
    let (t, h) = (state.step, state.hyper);
    let mut i = 0;
    params.visit_mut(&mut |p| {
        adam_update(p, &grads[i], &mut state.m[i], &mut state.v[i], &h, t);
        i += 1;
    });
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub kind: ProjectorKind,
    pub projector: EspressoConfig,
    pub probe: ProbeKind,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: ProjectorKind::Espresso,
            projector: EspressoConfig {
                n: 4,
                ..EspressoConfig::default()
            },
            probe: ProbeKind::default(),
            steps: 2000,
            batch: 32,
            seed: 7,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss before each update.
    pub losses: Vec<f64>,
    pub final_loss: f64,
    pub eval_accuracy: Option<f64>,
    /// Configuration as run; `projector.seed` holds the derived init seed.
    pub config: TrainConfig,
    pub seed: u64,
}

impl TrainReport {
    /// Mean of the first `n` losses (or all, if fewer).
    pub fn head_mean(&self, n: usize) -> f64 {
        let k = n.min(self.losses.len());
        self.losses[..k].iter().sum::<f64>() / k as f64
    }

    /// Mean of the last `n` losses (or all, if fewer).
    pub fn tail_mean(&self, n: usize) -> f64 {
        let k = n.min(self.losses.len());
        self.losses[self.losses.len() - k..].iter().sum::<f64>() / k as f64
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: NeedleModel,
    pub report: TrainReport,
}

fn dataset_shape(data: &NeedleDataset) -> Result<(usize, usize)> {
    let first = data
        .examples
        .first()
        .ok_or_else(|| Error::invalid("needle dataset", "dataset is empty"))?;
    let f = &first.composite.features;
    Ok((f.frames(), f.patches()))
}

/// Average cross-entropy of `indices` and its gradient.
fn batch_loss(
    model: &NeedleModel,
    data: &NeedleDataset,
    indices: &[usize],
    cfg: &EspressoConfig,
) -> Result<(f64, Vec<Tensor>)> {
    let mut total = 0.0;
    let mut grads: Option<Vec<Tensor>> = None;
    for &i in indices {
        let ex = &data.examples[i];
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let logits = bound.logits(&mut tape, &ex.composite, cfg)?;
        let loss = tape.cross_entropy(logits, ex.label())?;
        total += tape.value(loss).data()[0];
        let g = collect_grads(&bound, &tape, &tape.backward(loss)?);
        match grads.as_mut() {
            None => grads = Some(g),
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
        }
    }
    let scale = 1.0 / indices.len() as f64;
    let grads = grads
        .unwrap_or_default()
        .into_iter()
        .map(|g| g.map(|v| v * scale))
        .collect();
    Ok((total * scale, grads))
}

/// Minibatch Adam on `train`; batches are drawn with replacement.
///
/// All randomness derives from `cfg.seed`: the first draw seeds the
/// projector, the next values initialize the probe, and the remaining
/// stream samples batches.
pub fn train_needle(
    cfg: &TrainConfig,
    train: &NeedleDataset,
    eval: Option<&NeedleDataset>,
) -> Result<TrainOutcome> {
    if cfg.steps == 0 {
        return Err(Error::config("steps", "must be >= 1"));
    }
    if cfg.batch == 0 {
        return Err(Error::config("batch", "must be >= 1"));
    }
    let (frames, patches) = dataset_shape(train)?;
    let mut rng = Prng::new(cfg.seed);
    let projector = EspressoConfig {
        seed: rng.next_u64(),
        ..cfg.projector
    };
    let mut model = NeedleModel::init(
        cfg.kind,
        &projector,
        cfg.probe,
        frames,
        patches,
        train.classes,
        &mut rng,
    )?;
    let mut state = OptimState::for_tree(&model, cfg.adam);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut indices = vec![0; cfg.batch];
    for step in 0..cfg.steps {
        for i in indices.iter_mut() {
            *i = rng.next_below(train.len());
        }
        let (loss, grads) = batch_loss(&model, train, &indices, &projector)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        losses.push(loss);
        adam_step_tree(&mut model, &grads, &mut state)?;
    }
    let eval_accuracy = match eval {
        Some(data) => Some(evaluate_accuracy(&model, &projector, data)?),
        None => None,
    };
    let report = TrainReport {
        final_loss: *losses.last().unwrap(),
        losses,
        eval_accuracy,
        config: TrainConfig { projector, ..*cfg },
        seed: cfg.seed,
    };
    Ok(TrainOutcome { model, report })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Fraction of examples whose argmax logit equals the label.
pub fn evaluate_accuracy(
    model: &NeedleModel,
    cfg: &EspressoConfig,
    data: &NeedleDataset,
) -> Result<f64> {
    accuracy_by(data, |c| model.logits(c, cfg))
}

/// Accuracy of an arbitrary logit function over `data`.
pub fn accuracy_by(
    data: &NeedleDataset,
    mut logits: impl FnMut(&NeedleComposite) -> Result<Tensor>,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("evaluate_accuracy", "dataset is empty"));
    }
    let mut correct = 0usize;
    for ex in &data.examples {
        if argmax(logits(&ex.composite)?.data()) == ex.label() {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests;
