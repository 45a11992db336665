use espresso::costmodel::{
    flop_estimate, measure_runtime, param_count, random_video, scaling_report, token_count,
    ProjectorDescriptor, Timing, DEFAULT_FRAMES,
};
use espresso::params::TensorTree;
use espresso::projectors::{EspressoConfig, ProjectorKind, ProjectorParams};
use espresso::tensor::ops::count_macs;
use proptest::prelude::*;

fn descriptor(
    kind: ProjectorKind,
    n: usize,
    p: usize,
    t: usize,
    blocks: usize,
) -> ProjectorDescriptor {
    let config = EspressoConfig {
        d_v: 8,
        d_llm: 12,
        n,
        p,
        t,
        pr_queries: 5,
        heads: 2,
        blocks,
        ffn_mult: 3,
        ..EspressoConfig::default()
    };
    ProjectorDescriptor::new(kind, config).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn estimate_matches_instrumented_counter(
        n in 1usize..=3,
        p in 1usize..=4,
        t in 1usize..=4,
        blocks in 1usize..=2,
        extra in 0usize..=6,
        patches in 1usize..=6,
        seed in 0u64..100,
    ) {
        let frames = n + extra;
        for kind in ProjectorKind::ALL {
            let d = descriptor(kind, n, p, t, blocks);
            let params = ProjectorParams::init(kind, &d.config).unwrap();
            let v = random_video(frames, patches, 8, seed).unwrap();
            let (out, macs) = count_macs(|| params.project(&v, &d.config));
            out.unwrap();
            prop_assert_eq!(macs, flop_estimate(&d, frames, patches).unwrap(), "{}", kind);
            prop_assert_eq!(param_count(&d).unwrap(), params.num_params());
        }
    }
}

#[test]
fn token_columns_over_frame_grid() {
    for patches in [16, 64, 576] {
        let rows = scaling_report(
            &ProjectorKind::ALL.map(|k| descriptor(k, 4, 4, 4, 2)),
            &DEFAULT_FRAMES,
            patches,
            None,
        )
        .unwrap();
        assert_eq!(rows.len(), 4 * DEFAULT_FRAMES.len());
        for r in &rows {
            let expected = match r.kind {
                ProjectorKind::Espresso => 32,
                ProjectorKind::Pr => 5,
                ProjectorKind::Mlp => r.frames * patches,
                ProjectorKind::MeanPool => r.frames + patches,
            };
            assert_eq!(r.tokens, expected);
            assert!(r.runtime.is_none());
        }
    }
}

#[test]
fn espresso_macs_grow_linearly_in_frames() {
    let d = descriptor(ProjectorKind::Espresso, 2, 4, 4, 2);
    let m = |t| flop_estimate(&d, t, 16).unwrap();
    // Frame-proportional part doubles; the per-segment part is constant.
    let (a, b, c) = (m(8), m(16), m(32));
    assert!(b > a && c > b);
    assert_eq!(c - b, 2 * (b - a));
}

#[test]
fn parameters_do_not_depend_on_input_size() {
    for kind in ProjectorKind::ALL {
        let d = descriptor(kind, 2, 3, 2, 1);
        let count = param_count(&d).unwrap();
        let rows = scaling_report(&[d], &[2, 9, 40], 7, None).unwrap();
        assert!(rows.iter().all(|r| r.params == count));
    }
}

#[test]
fn domain_edges() {
    let d = descriptor(ProjectorKind::Pr, 1, 1, 1, 1);
    assert!(flop_estimate(&d, 0, 4).is_err());
    assert!(token_count(&d, 4, 0).is_err());
    let e = descriptor(ProjectorKind::Espresso, 8, 1, 1, 1);
    assert!(token_count(&e, 4, 4).is_err());
    assert!(scaling_report(&[], &DEFAULT_FRAMES, 4, None).is_err());
    assert!(scaling_report(&[d], &[], 4, None).is_err());
}

#[test]
fn runtime_protocol() {
    let mut calls = 0;
    let r = measure_runtime(
        || {
            calls += 1;
            Ok(())
        },
        2,
        10,
    )
    .unwrap();
    assert_eq!(calls, 12);
    assert_eq!((r.warmup_count, r.run_count, r.samples.len()), (2, 10, 10));
    assert!(r.min <= r.mean && r.mean <= r.max);

    let one = measure_runtime(|| Ok(()), 0, 1).unwrap();
    assert_eq!(one.samples.len(), 1);
    assert!(one.mean == one.min && one.min == one.max && one.max == one.samples[0]);
    assert!(measure_runtime(|| Ok(()), 2, 0).is_err());

    let d = descriptor(ProjectorKind::Espresso, 2, 2, 2, 1);
    let rows = scaling_report(&[d], &[4, 8], 3, Some(Timing::default())).unwrap();
    for r in rows {
        let rt = r.runtime.unwrap();
        assert_eq!((rt.warmup_count, rt.run_count), (2, 10));
    }
}
