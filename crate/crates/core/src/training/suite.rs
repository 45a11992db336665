use super::{NeedleModel, ProbeKind, ProbeParams};
use crate::attention::{AttentionParams, BlockParams, PeMode, QFormerParams};
use crate::error::Result;
use crate::params::{collect_grads, Leaves, MlpParams, ParamTree, TensorTree};
use crate::projectors::{
    spatial_pool_on, temporal_pool_on, EspressoConfig, FeatureVideo, ProjectorKind, ProjectorParams,
};
use crate::synthbench::{make_needle_example, Prng, SceneTemplate};
use crate::tensor::ops::LAYER_NORM_EPS;
use crate::tensor::{finite_diff_grad_check, GradCheckReport, Tape, Tensor, Var};

pub const SUITE_STEP: f64 = 1e-5;
pub const SUITE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradSuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl GradSuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= SUITE_TOLERANCE
    }
}

/// Small configuration used by the end-to-end checks: `n = 4`, `p = t = 4`,
/// `D_v = D_llm = 8`.
pub fn suite_config() -> EspressoConfig {
    EspressoConfig {
        d_v: 8,
        d_llm: 8,
        n: 4,
        seed: 5,
        ..EspressoConfig::default()
    }
}

fn check<P>(
    name: &'static str,
    params: &P,
    loss: impl Fn(&mut Tape, &P::Mapped<Var>) -> Result<Var>,
) -> Result<GradSuiteEntry>
where
    P: TensorTree + Clone,
    P::Mapped<Var>: ParamTree<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let l = loss(&mut tape, &bound)?;
    let analytic = collect_grads(&bound, &tape, &tape.backward(l)?);
    let mut work = params.clone();
    let report = finite_diff_grad_check(&params.flatten(), &analytic, SUITE_STEP, |values| {
        work.assign(values)?;
        let mut tape = Tape::new();
        let bound = work.bind(&mut tape);
        let l = loss(&mut tape, &bound)?;
        Ok(tape.value(l).data()[0])
    })?;
    Ok(GradSuiteEntry { name, report })
}

fn random(rng: &mut Prng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.next_normal())
}

/// Scalar read-out `Σ (x·R)²` with a fixed random `R`, so every output
/// entry influences the loss.
fn readout(tape: &mut Tape, x: Var) -> Result<Var> {
    let width = tape.value(x).last_dim();
    let mut rng = Prng::new(0xC0FFEE);
    let r = tape.constant(random(&mut rng, &[width, 3]));
    let y = tape.linear(x, r, None)?;
    Ok(tape.sum_squares(y))
}

fn video(rng: &mut Prng, t: usize, p: usize, d: usize) -> Result<FeatureVideo> {
    FeatureVideo::new(random(rng, &[t, p, d]))
}

/// Central-difference checks of every differentiable kernel and every
/// parameterized module, ending with cross-entropy ∘ probe ∘ projector.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradSuiteEntry>> {
    let mut rng = Prng::new(seed);
    let mut out = Vec::new();

    let leaves = Leaves(vec![
        random(&mut rng, &[3, 5]),
        random(&mut rng, &[5, 4]),
        random(&mut rng, &[4]),
    ]);
    out.push(check("linear", &leaves, |tape, p| {
        let y = tape.linear(p.0[0], p.0[1], Some(p.0[2]))?;
        readout(tape, y)
    })?);

    let leaves = Leaves(vec![random(&mut rng, &[3, 4]), random(&mut rng, &[4, 2])]);
    out.push(check("matmul", &leaves, |tape, p| {
        let y = tape.matmul(p.0[0], p.0[1])?;
        readout(tape, y)
    })?);

    let gain = random(&mut rng, &[6]).map(|v| 1.0 + 0.3 * v);
    let leaves = Leaves(vec![
        random(&mut rng, &[2, 3, 6]),
        gain,
        random(&mut rng, &[6]),
    ]);
    out.push(check("layer_norm", &leaves, |tape, p| {
        let y = tape.layer_norm(p.0[0], p.0[1], p.0[2], LAYER_NORM_EPS)?;
        readout(tape, y)
    })?);

    let leaves = Leaves(vec![random(&mut rng, &[2, 5])]);
    out.push(check("softmax", &leaves, |tape, p| {
        let y = tape.softmax(p.0[0]);
        readout(tape, y)
    })?);
    out.push(check("gelu", &leaves, |tape, p| {
        let y = tape.gelu(p.0[0]);
        readout(tape, y)
    })?);

    let leaves = Leaves(vec![
        random(&mut rng, &[2, 3, 8]),
        random(&mut rng, &[2, 5, 8]),
        random(&mut rng, &[2, 5, 8]),
    ]);
    out.push(check("attention", &leaves, |tape, p| {
        let y = tape.attention(p.0[0], p.0[1], p.0[2], 2)?;
        readout(tape, y)
    })?);

    let leaves = Leaves(vec![random(&mut rng, &[4])]);
    out.push(check("cross_entropy", &leaves, |tape, p| {
        tape.cross_entropy(p.0[0], 2)
    })?);

    let x = random(&mut rng, &[3, 8]);
    let kv = random(&mut rng, &[5, 8]);
    let grouped = random(&mut rng, &[2, 5, 8]);

    let mlp = MlpParams::init(&mut rng, 8, 16, 8);
    out.push(check("mlp", &mlp, |tape, p| {
        let x = tape.constant(x.clone());
        let y = p.forward(tape, x)?;
        readout(tape, y)
    })?);

    let attn = AttentionParams::init(&mut rng, 8, 4)?;
    out.push(check("multihead_attention", &attn, |tape, p| {
        let (q, kv) = (tape.constant(x.clone()), tape.constant(kv.clone()));
        let y = p.forward(tape, q, kv)?;
        readout(tape, y)
    })?);

    let block = BlockParams::init(&mut rng, 8, 4, 2)?;
    out.push(check("qformer_block", &block, |tape, p| {
        let (q, kv) = (tape.constant(x.clone()), tape.constant(kv.clone()));
        let y = p.forward(tape, q, kv)?;
        readout(tape, y)
    })?);

    let cfg = suite_config();
    let qformer = QFormerParams::init(&mut rng, cfg.qformer_shape(3))?;
    out.push(check("qformer", &qformer, |tape, p| {
        let kv = tape.constant(grouped.clone());
        let y = p.forward(tape, kv, PeMode::Sinusoidal)?;
        readout(tape, y)
    })?);

    let seg = random(&mut rng, &[2, 4, 8]);
    let pooler = QFormerParams::init(&mut rng, cfg.qformer_shape(1))?;
    out.push(check("temporal_pool", &pooler, |tape, p| {
        let s = tape.constant(seg.clone());
        let y = temporal_pool_on(tape, p, s, PeMode::Sinusoidal)?;
        readout(tape, y)
    })?);
    out.push(check("spatial_pool", &pooler, |tape, p| {
        let s = tape.constant(seg.clone());
        let y = spatial_pool_on(tape, p, s, PeMode::Sinusoidal)?;
        readout(tape, y)
    })?);
    let compressor = QFormerParams::init(&mut rng, cfg.qformer_shape(4))?;
    for (name, rows) in [("spatial_compress", 4), ("temporal_compress", 2)] {
        let input = random(&mut rng, &[rows, 8]);
        out.push(check(name, &compressor, |tape, p| {
            let x = tape.constant(input.clone());
            let y = p.forward(tape, x, PeMode::Sinusoidal)?;
            readout(tape, y)
        })?);
    }

    let v = video(&mut rng, 8, 4, 8)?;
    for (name, kind) in [
        ("espresso_forward", ProjectorKind::Espresso),
        ("mlp_baseline", ProjectorKind::Mlp),
        ("pr_baseline", ProjectorKind::Pr),
        ("meanpool_baseline", ProjectorKind::MeanPool),
    ] {
        let params = ProjectorParams::init(kind, &cfg)?;
        out.push(check(name, &params, |tape, p| {
            let (y, _) = p.forward(tape, &v, &cfg)?;
            readout(tape, y)
        })?);
    }

    let tokens = random(&mut rng, &[6, 8]);
    let target = [0.0, 0.0, 1.0, 0.0];
    for (name, kind) in [
        ("probe_linear", ProbeKind::Linear),
        ("probe_gated", ProbeKind::TargetGated),
    ] {
        let probe = ProbeParams::init(&mut rng, kind, tokens.len(), 4);
        out.push(check(name, &probe, |tape, p| {
            let t = tape.constant(tokens.clone());
            let logits = p.forward(tape, t, &target)?;
            tape.cross_entropy(logits, 1)
        })?);
    }

    let template = SceneTemplate {
        frames: 2,
        patches: 4,
        dim: 8,
        ..SceneTemplate::default()
    };
    let example = make_needle_example(seed, &template, 4)?;
    for (name, probe) in [
        ("pipeline_gated", ProbeKind::TargetGated),
        ("pipeline_linear", ProbeKind::Linear),
    ] {
        let model = NeedleModel::init(ProjectorKind::Espresso, &cfg, probe, 8, 4, 4, &mut rng)?;
        out.push(check(name, &model, |tape, p| {
            let logits = p.logits(tape, &example.composite, &cfg)?;
            tape.cross_entropy(logits, example.label())
        })?);
    }

    Ok(out)
}
