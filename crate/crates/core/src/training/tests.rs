use super::*;
use crate::synthbench::{make_needle_dataset, SceneTemplate, Split};

fn tiny_template() -> SceneTemplate {
    SceneTemplate {
        frames: 2,
        patches: 4,
        dim: 8,
        ..SceneTemplate::default()
    }
}

fn tiny_config(steps: usize) -> TrainConfig {
    TrainConfig {
        projector: EspressoConfig {
            d_v: 8,
            d_llm: 8,
            n: 4,
            blocks: 1,
            ..EspressoConfig::default()
        },
        steps,
        batch: 4,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn output(tokens: Tensor) -> ProjectorOutput {
    ProjectorOutput {
        provenance: vec![],
        tokens,
    }
}

#[test]
fn zero_probe_returns_bias() {
    let mut probe = ProbeParams::zeros(ProbeKind::Linear, 6, 4);
    probe.b = Tensor::new(&[4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
    let mut rng = Prng::new(1);
    let out = output(normal(&mut rng, &[3, 2]));
    let logits = probe_forward(&out, &[0.0, 1.0, 0.0, 0.0], &probe).unwrap();
    assert_eq!(logits.data(), probe.b.data());
}

#[test]
fn target_slot_matters_unless_columns_match() {
    let mut rng = Prng::new(2);
    let out = output(normal(&mut rng, &[3, 2]));
    for kind in [ProbeKind::Linear, ProbeKind::TargetGated] {
        let mut probe = ProbeParams::init(&mut rng, kind, 6, 4);
        let a = probe_forward(&out, &[1.0, 0.0, 0.0, 0.0], &probe).unwrap();
        let b = probe_forward(&out, &[0.0, 1.0, 0.0, 0.0], &probe).unwrap();
        assert_ne!(a, b, "{kind}");

        // Make target rows 0 and 1 read identically.
        let rows = probe.w.shape()[0];
        let stride = if kind == ProbeKind::Linear { 0 } else { 6 };
        let w = probe.w.data_mut();
        for c in 0..4 {
            w[(rows - 3) * 4 + c] = w[(rows - 4) * 4 + c];
            for f in 0..stride {
                w[(stride + f) * 4 + c] = w[f * 4 + c];
            }
        }
        let a = probe_forward(&out, &[1.0, 0.0, 0.0, 0.0], &probe).unwrap();
        let b = probe_forward(&out, &[0.0, 1.0, 0.0, 0.0], &probe).unwrap();
        assert_eq!(a, b, "{kind}");
    }
}

#[test]
fn linear_probe_target_effect_ignores_tokens() {
    // Logit differences between two targets are the same for every token
    // input, so the linear probe cannot route a question to one scene.
    let mut rng = Prng::new(3);
    let probe = ProbeParams::init(&mut rng, ProbeKind::Linear, 6, 4);
    let diff = |tokens: Tensor| {
        let out = output(tokens);
        let a = probe_forward(&out, &[1.0, 0.0, 0.0, 0.0], &probe).unwrap();
        let b = probe_forward(&out, &[0.0, 0.0, 1.0, 0.0], &probe).unwrap();
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| x - y)
            .collect::<Vec<_>>()
    };
    let d1 = diff(normal(&mut rng, &[3, 2]).map(|v| 100.0 * v));
    let d2 = diff(normal(&mut rng, &[3, 2]).map(|v| 100.0 * v));
    for (x, y) in d1.iter().zip(&d2) {
        assert!((x - y).abs() < 1e-12);
    }

    let gated = ProbeParams::init(&mut rng, ProbeKind::TargetGated, 6, 4);
    let gdiff = |tokens: Tensor| {
        let out = output(tokens);
        let a = probe_forward(&out, &[1.0, 0.0, 0.0, 0.0], &gated).unwrap();
        let b = probe_forward(&out, &[0.0, 0.0, 1.0, 0.0], &gated).unwrap();
        a.data()[0] - b.data()[0]
    };
    let g1 = gdiff(normal(&mut rng, &[3, 2]).map(|v| 100.0 * v));
    let g2 = gdiff(normal(&mut rng, &[3, 2]).map(|v| 100.0 * v));
    assert!((g1 - g2).abs() > 1e-3);
}

#[test]
fn probe_rejects_wrong_token_count() {
    let probe = ProbeParams::zeros(ProbeKind::TargetGated, 6, 4);
    let out = output(Tensor::zeros(&[4, 2]));
    assert!(probe_forward(&out, &[1.0, 0.0, 0.0, 0.0], &probe).is_err());
    assert_eq!(ProbeKind::TargetGated.input_width(6), 28);
    assert_eq!(
        "gated".parse::<ProbeKind>().unwrap(),
        ProbeKind::TargetGated
    );
    assert!("mlp".parse::<ProbeKind>().is_err());
}

#[test]
fn adam_zero_gradient_keeps_params() {
    let mut params = vec![Tensor::from_fn(&[3], |i| i as f64)];
    let before = params.clone();
    let mut state = OptimState::new(&params, AdamConfig::default());
    adam_step(&mut params, &[Tensor::zeros(&[3])], &mut state).unwrap();
    assert_eq!(params, before);
    assert_eq!(state.step, 1);
}

#[test]
fn adam_first_step_matches_hand_evaluation() {
    let h = AdamConfig::default();
    let (theta, g) = (0.3, -0.25);
    let mut params = vec![Tensor::scalar(theta)];
    let mut state = OptimState::new(&params, h);
    adam_step(&mut params, &[Tensor::scalar(g)], &mut state).unwrap();
    let m = (1.0 - h.beta1) * g;
    let v = (1.0 - h.beta2) * g * g;
    let m_hat = m / (1.0 - h.beta1);
    let v_hat = v / (1.0 - h.beta2);
    let expected = theta - h.lr * m_hat / (v_hat.sqrt() + h.eps);
    assert!((params[0].data()[0] - expected).abs() < 1e-15);
    // The first step moves by almost exactly lr against the gradient sign.
    assert!((params[0].data()[0] - (theta + h.lr)).abs() < 1e-10);
}

#[test]
fn adam_tree_matches_flat_and_checks_shapes() {
    let mut rng = Prng::new(4);
    let mut tree = ProbeParams::init(&mut rng, ProbeKind::Linear, 4, 3);
    let mut flat = tree.flatten();
    let grads: Vec<Tensor> = flat.iter().map(|t| normal(&mut rng, t.shape())).collect();
    let mut s1 = OptimState::for_tree(&tree, AdamConfig::default());
    let mut s2 = s1.clone();
    for _ in 0..3 {
        adam_step_tree(&mut tree, &grads, &mut s1).unwrap();
        adam_step(&mut flat, &grads, &mut s2).unwrap();
    }
    assert_eq!(tree.flatten(), flat);
    assert_eq!(s1, s2);
    assert!(adam_step(&mut flat, &grads[..1], &mut s2).is_err());
    let wrong = vec![Tensor::zeros(&[1]), Tensor::zeros(&[3])];
    assert!(adam_step_tree(&mut tree, &wrong, &mut s1).is_err());
}

#[test]
fn training_history_and_initial_loss() {
    let data = make_needle_dataset(16, 0, &tiny_template(), 4, Split::Train).unwrap();
    let one = train_needle(&tiny_config(1), &data, None).unwrap();
    assert_eq!(one.report.losses.len(), 1);
    assert!((one.report.losses[0] - 4f64.ln()).abs() <= 0.3);
    assert_eq!(one.report.final_loss, one.report.losses[0]);

    let a = train_needle(&tiny_config(5), &data, Some(&data)).unwrap();
    let b = train_needle(&tiny_config(5), &data, Some(&data)).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.model, b.model);
    assert_eq!(a.report.losses.len(), 5);
    let acc = a.report.eval_accuracy.unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn training_rejects_bad_inputs() {
    let data = make_needle_dataset(4, 0, &tiny_template(), 4, Split::Train).unwrap();
    let empty = make_needle_dataset(0, 0, &tiny_template(), 4, Split::Train).unwrap();
    assert!(train_needle(&tiny_config(0), &data, None).is_err());
    assert!(train_needle(&tiny_config(1), &empty, None).is_err());
    let no_batch = TrainConfig {
        batch: 0,
        ..tiny_config(1)
    };
    assert!(train_needle(&no_batch, &data, None).is_err());
}

#[test]
fn accuracy_chance_perfect_and_order_free() {
    let data = make_needle_dataset(400, 50, &tiny_template(), 4, Split::Eval).unwrap();
    let constant = accuracy_by(&data, |_| Tensor::new(&[4], vec![1.0, 0.0, 0.0, 0.0])).unwrap();
    assert!((constant - 0.25).abs() < 0.1, "{constant}");
    let perfect = accuracy_by(&data, |c| {
        let mut v = vec![0.0; 4];
        v[c.label()] = 100.0;
        Tensor::new(&[4], v)
    })
    .unwrap();
    assert_eq!(perfect, 1.0);

    let cfg = tiny_config(1);
    let mut rng = Prng::new(9);
    let model = NeedleModel::init(cfg.kind, &cfg.projector, cfg.probe, 8, 4, 4, &mut rng).unwrap();
    let small = NeedleDataset {
        examples: data.examples[..40].to_vec(),
        ..data.clone()
    };
    let mut reversed = small.clone();
    reversed.examples.reverse();
    let a = evaluate_accuracy(&model, &cfg.projector, &small).unwrap();
    let b = evaluate_accuracy(&model, &cfg.projector, &reversed).unwrap();
    assert_eq!(a, b);
    let empty = NeedleDataset {
        examples: vec![],
        ..small
    };
    assert!(evaluate_accuracy(&model, &cfg.projector, &empty).is_err());
}

#[test]
fn argmax_prefers_lowest_index_on_ties() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
    assert_eq!(argmax(&[2.0, 2.0]), 0);
}

#[test]
fn gradient_suite_passes() {
    let entries = gradient_suite(1).unwrap();
    assert!(entries.len() >= 20);
    for e in &entries {
        assert!(e.passed(), "{}: {:?}", e.name, e.report);
        assert!(e.report.entries > 0);
    }
    for e in entries.iter().filter(|e| e.name.starts_with("probe_")) {
        assert!(e.report.max_rel_error <= 1e-6, "{}: {:?}", e.name, e.report);
    }
}
