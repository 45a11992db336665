use espresso::attention::PeMode;
use espresso::params::ParamTree;
use espresso::projectors::{
    espresso_forward, param_init, segment_bounds, EspressoConfig, EspressoParams, FeatureVideo,
    ProjectorKind, ProjectorParams,
};
use espresso::synthbench::Prng;
use espresso::tensor::Tensor;
use proptest::prelude::*;

fn video(seed: u64, t: usize, p: usize, d: usize) -> FeatureVideo {
    let mut rng = Prng::new(seed);
    FeatureVideo::new(Tensor::from_fn(&[t, p, d], |_| rng.next_normal())).unwrap()
}

fn small_config(n: usize, p: usize, t: usize, pe: PeMode, seed: u64) -> EspressoConfig {
    EspressoConfig {
        d_v: 8,
        d_llm: 8,
        p,
        t,
        n,
        pr_queries: 3,
        heads: 2,
        blocks: 1,
        ffn_mult: 2,
        pe,
        seed,
    }
}

/// Rebuild `v` with `frame_of(t)` and `patch_of(t, p)` as the source indices.
fn remap(
    v: &FeatureVideo,
    frame_of: impl Fn(usize) -> usize,
    patch_of: impl Fn(usize, usize) -> usize,
) -> FeatureVideo {
    let (t, p, d) = (v.frames(), v.patches(), v.dim());
    let src = v.features();
    FeatureVideo::new(Tensor::from_fn(&[t, p, d], |i| {
        let (ti, pi, di) = (i / (p * d), (i / d) % p, i % d);
        src.at(&[frame_of(ti), patch_of(ti, pi), di])
    }))
    .unwrap()
}

/// Takes the std-0.02 initialization to std-0.1 weights.
const GENERIC_SCALE: f64 = 5.0;

fn scaled(params: &EspressoParams, s: f64) -> EspressoParams {
    params.map(&mut |t: &Tensor| t.map(|x| x * s))
}

fn shuffled(len: usize, rng: &mut Prng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut v);
    v
}

/// A frame permutation acting independently inside each segment.
fn frame_perm(frames: usize, n: usize, rng: &mut Prng) -> Vec<usize> {
    let mut out = Vec::with_capacity(frames);
    for r in segment_bounds(frames, n).unwrap() {
        out.extend(shuffled(r.len(), rng).into_iter().map(|i| r.start + i));
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn output_length_is_fixed(
        n in 1usize..=4,
        p in 1usize..=3,
        t in 1usize..=3,
        extra in 0usize..=9,
        patches in 1usize..=5,
        seed in 0u64..1000,
    ) {
        let frames = n + extra;
        let cfg = small_config(n, p, t, PeMode::Sinusoidal, seed);
        let v = video(seed, frames, patches, 8);
        for kind in ProjectorKind::ALL {
            let params = ProjectorParams::init(kind, &cfg).unwrap();
            let out = params.project(&v, &cfg).unwrap();
            let expected = match kind {
                ProjectorKind::Espresso => n * (p + t),
                ProjectorKind::Mlp => frames * patches,
                ProjectorKind::Pr => 3,
                ProjectorKind::MeanPool => frames + patches,
            };
            prop_assert_eq!(out.tokens.shape(), &[expected, 8][..]);
            prop_assert_eq!(out.provenance.len(), expected);
        }
    }

    #[test]
    fn perturbing_one_frame_only_touches_its_segment(
        n in 2usize..=4,
        extra in 0usize..=8,
        patches in 1usize..=4,
        seed in 0u64..1000,
        pick in 0usize..1000,
        delta in 0.1f64..5.0,
    ) {
        let frames = n + extra;
        let cfg = small_config(n, 2, 2, PeMode::Sinusoidal, seed);
        let params = param_init(&cfg, seed).unwrap();
        let v = video(seed, frames, patches, 8);
        let frame = pick % frames;
        let segment = segment_bounds(frames, n)
            .unwrap()
            .iter()
            .position(|r| r.contains(&frame))
            .unwrap();
        // Non-constant along the feature axis.
        let mut f = v.features().clone();
        let width = patches * 8;
        for (j, x) in f.data_mut()[frame * width..(frame + 1) * width].iter_mut().enumerate() {
            *x += delta * (j % 3) as f64;
        }
        let w = FeatureVideo::new(f).unwrap();
        let a = espresso_forward(&v, &params, &cfg).unwrap();
        let b = espresso_forward(&w, &params, &cfg).unwrap();
        let d = a.tokens.shape()[1];
        let mut changed = false;
        for (i, src) in a.provenance.iter().enumerate() {
            let (ra, rb) = (&a.tokens.data()[i * d..(i + 1) * d], &b.tokens.data()[i * d..(i + 1) * d]);
            if src.segment == segment {
                changed |= ra != rb;
            } else {
                prop_assert!(ra == rb, "token {} of segment {} moved", i, src.segment);
            }
        }
        prop_assert!(changed);
    }

    #[test]
    fn without_positions_output_ignores_orderings(
        n in 1usize..=3,
        extra in 0usize..=6,
        patches in 1usize..=5,
        seed in 0u64..1000,
        scale in prop::sample::select(vec![1.0, GENERIC_SCALE]),
    ) {
        let frames = n + extra;
        let cfg = small_config(n, 2, 2, PeMode::Disabled, seed);
        let params = scaled(&param_init(&cfg, seed).unwrap(), scale);
        let v = video(seed, frames, patches, 8);
        let base = espresso_forward(&v, &params, &cfg).unwrap().tokens;
        let mut rng = Prng::new(seed ^ 0xABCD);

        let fp = frame_perm(frames, n, &mut rng);
        let moved = remap(&v, |t| fp[t], |_, p| p);
        let out = espresso_forward(&moved, &params, &cfg).unwrap().tokens;
        prop_assert!(out.rel_distance(&base).unwrap() <= 1e-6);

        // One patch order per segment, shared by the segment's frames.
        let bounds = segment_bounds(frames, n).unwrap();
        let perms: Vec<Vec<usize>> = bounds.iter().map(|_| shuffled(patches, &mut rng)).collect();
        let seg_of = |t: usize| bounds.iter().position(|r| r.contains(&t)).unwrap();
        let moved = remap(&v, |t| t, |t, p| perms[seg_of(t)][p]);
        let out = espresso_forward(&moved, &params, &cfg).unwrap().tokens;
        prop_assert!(out.rel_distance(&base).unwrap() <= 1e-6);
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000, n in 1usize..=3) {
        let cfg = small_config(n, 2, 3, PeMode::Sinusoidal, seed);
        let v = video(seed, 6, 3, 8);
        for kind in ProjectorKind::ALL {
            let a = ProjectorParams::init(kind, &cfg).unwrap().project(&v, &cfg).unwrap();
            let b = ProjectorParams::init(kind, &cfg).unwrap().project(&v, &cfg).unwrap();
            prop_assert_eq!(a.tokens.data(), b.tokens.data());
            prop_assert_eq!(a.provenance, b.provenance);
        }
    }
}

#[test]
fn positions_make_frame_order_visible() {
    let cfg = EspressoConfig {
        n: 2,
        ..EspressoConfig::default()
    };
    let params = scaled(&param_init(&cfg, 11).unwrap(), GENERIC_SCALE);
    let v = video(3, 16, 16, cfg.d_v);
    let base = espresso_forward(&v, &params, &cfg).unwrap().tokens;
    let reversed_first_segment = remap(&v, |t| if t < 8 { 7 - t } else { t }, |_, p| p);
    let out = espresso_forward(&reversed_first_segment, &params, &cfg)
        .unwrap()
        .tokens;
    let rel = out.rel_distance(&base).unwrap();
    assert!(rel > 1e-3, "relative change {rel}");
}

#[test]
fn per_frame_patch_shuffles_are_visible_to_the_temporal_pooler() {
    let cfg = small_config(1, 2, 2, PeMode::Disabled, 4);
    let params = param_init(&cfg, 4).unwrap();
    let v = video(8, 4, 3, 8);
    let base = espresso_forward(&v, &params, &cfg).unwrap().tokens;
    let moved = remap(&v, |t| t, |t, p| if t == 0 { (p + 1) % 3 } else { p });
    let out = espresso_forward(&moved, &params, &cfg).unwrap().tokens;
    assert!(out.rel_distance(&base).unwrap() > 1e-9);
}
