//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use espresso::attention::PeMode;
use espresso::cli::{dispatch, parse_config};
use espresso::costmodel::{flop_estimate, token_count, ProjectorDescriptor, DEFAULT_FRAMES};
use espresso::params::ParamTree;
use espresso::projectors::{
    espresso_forward, param_init, segment_bounds, EspressoConfig, EspressoParams, FeatureVideo,
    ProjectorKind, ProjectorParams,
};
use espresso::synthbench::{
    compression_sweep, make_needle_dataset, parse_metric_csv, Prng, SceneTemplate, Split,
};
use espresso::tensor::ops::count_macs;
use espresso::tensor::Tensor;
use espresso::training::{
    gradient_suite, train_needle, TrainConfig, TrainOutcome, EVAL_BASE_SEED, SUITE_STEP,
    SUITE_TOLERANCE, TRAIN_BASE_SEED,
};

const FIXED_LENGTH_BUDGET: Duration = Duration::from_secs(60);
const GRADIENT_BUDGET: Duration = Duration::from_secs(5 * 60);
const INVARIANCE_TOL: f64 = 1e-6;
const SENSITIVITY_MIN: f64 = 1e-3;
/// Weight multiplier for the order-sensitivity check (std 0.02 -> 0.1).
const GENERIC_SCALE: f64 = 5.0;
const PEARSON_BUDGET: Duration = Duration::from_secs(1);
/// (table, expected r, tolerance)
const PEARSON_TARGETS: [(&str, f64, f64); 4] = [
    ("segments_default", 0.97, 0.005),
    ("segments_needle", 0.99, 0.005),
    ("spatial_one_segment", 0.39, 0.01),
    ("temporal_full_segment", 0.37, 0.01),
];
const COST_SHAPES: usize = 24;
const TRAIN_SIZE: usize = 4096;
const EVAL_SIZE: usize = 512;
const MIN_ACCURACY: f64 = 0.80;
const LOSS_WINDOW: usize = 100;
const LOSS_RATIO: f64 = 0.5;
const TRAIN_BUDGET: Duration = Duration::from_secs(30 * 60);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

type Outcome = Result<Verdict, String>;

fn video(seed: u64, t: usize, p: usize, d: usize) -> FeatureVideo {
    let mut rng = Prng::new(seed);
    FeatureVideo::new(Tensor::from_fn(&[t, p, d], |_| rng.next_normal())).unwrap()
}

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

fn scaled(params: &EspressoParams, s: f64) -> EspressoParams {
    params.map(&mut |t: &Tensor| t.map(|x| x * s))
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn fixed_length() -> Outcome {
    let start = Instant::now();
    let base = EspressoConfig::default();
    let mut checked = 0;
    for p in [16, 64, 576] {
        for t in DEFAULT_FRAMES {
            let v = video((t * p) as u64, t, p, base.d_v);
            for (kind, expected) in [
                (ProjectorKind::Mlp, t * p),
                (ProjectorKind::Pr, base.pr_queries),
            ] {
                let out = ProjectorParams::init(kind, &base)
                    .map_err(e)?
                    .project(&v, &base)
                    .map_err(e)?;
                if out.tokens.shape()[0] != expected {
                    return Ok(verdict(false, format!("{kind} T={t} P={p}: {}", out.len())));
                }
                checked += 1;
            }
            for n in [1, 2, 4, 8].into_iter().filter(|&n| n <= t) {
                let cfg = EspressoConfig { n, ..base };
                let out = ProjectorParams::init(ProjectorKind::Espresso, &cfg)
                    .map_err(e)?
                    .project(&v, &cfg)
                    .map_err(e)?;
                let expected = n * (cfg.p + cfg.t);
                if out.tokens.shape()[0] != expected {
                    return Ok(verdict(false, format!("espresso T={t} P={p} n={n}")));
                }
                checked += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    Ok(verdict(
        elapsed < FIXED_LENGTH_BUDGET,
        format!("{checked} exact token counts in {elapsed:.1?}"),
    ))
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let entries = gradient_suite(1).map_err(e)?;
    let elapsed = start.elapsed();
    let worst = entries
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .unwrap();
    let names: Vec<&str> = entries.iter().map(|e| e.name).collect();
    let pass = entries.iter().all(|e| e.passed())
        && names.contains(&"pipeline_gated")
        && elapsed < GRADIENT_BUDGET;
    Ok(verdict(
        pass,
        format!(
            "{} checks at h={SUITE_STEP:e}, worst {} = {:.2e} (tol {SUITE_TOLERANCE:e}) in {elapsed:.1?}",
            entries.len(),
            worst.name,
            worst.report.max_rel_error
        ),
    ))
}

fn permutation_properties() -> Outcome {
    let (frames, patches, n) = (16, 16, 2);
    let off = EspressoConfig {
        n,
        pe: PeMode::Disabled,
        ..EspressoConfig::default()
    };
    let init = param_init(&off, 21).map_err(e)?;
    let generic = scaled(&init, GENERIC_SCALE);
    let v = video(4, frames, patches, off.d_v);
    let bounds = segment_bounds(frames, n).map_err(e)?;
    let seg_of = |t: usize| bounds.iter().position(|r| r.contains(&t)).unwrap();
    let mut rng = Prng::new(99);
    let mut worst_invariance = 0.0f64;
    for params in [&init, &generic] {
        let base = espresso_forward(&v, params, &off).map_err(e)?.tokens;
        for _ in 0..4 {
            let mut fp = Vec::new();
            for r in &bounds {
                let mut idx: Vec<usize> = r.clone().collect();
                rng.shuffle(&mut idx);
                fp.extend(idx);
            }
            let perms: Vec<Vec<usize>> = bounds
                .iter()
                .map(|_| {
                    let mut p: Vec<usize> = (0..patches).collect();
                    rng.shuffle(&mut p);
                    p
                })
                .collect();
            for moved in [
                remap(&v, |t| fp[t], |_, p| p),
                remap(&v, |t| t, |t, p| perms[seg_of(t)][p]),
            ] {
                let out = espresso_forward(&moved, params, &off).map_err(e)?.tokens;
                worst_invariance = worst_invariance.max(out.rel_distance(&base).map_err(e)?);
            }
        }
    }

    let on = EspressoConfig {
        pe: PeMode::Sinusoidal,
        ..off
    };
    let reversed = remap(&v, |t| if t < 8 { 7 - t } else { t }, |_, p| p);
    let change = |params: &EspressoParams| -> Result<f64, String> {
        let a = espresso_forward(&v, params, &on).map_err(e)?.tokens;
        let b = espresso_forward(&reversed, params, &on).map_err(e)?.tokens;
        b.rel_distance(&a).map_err(e)
    };
    let at_init = change(&init)?;
    let at_generic = change(&generic)?;
    Ok(verdict(
        worst_invariance <= INVARIANCE_TOL && at_generic > SENSITIVITY_MIN,
        format!(
            "pe off: worst change {worst_invariance:.1e}; pe on, reversed segment: {at_generic:.3e} \
             at x{GENERIC_SCALE} weights ({at_init:.1e} at initialization)"
        ),
    ))
}

fn segment_locality() -> Outcome {
    let cfg = EspressoConfig {
        n: 4,
        ..EspressoConfig::default()
    };
    let params = param_init(&cfg, 8).map_err(e)?;
    let v = video(12, 18, 6, cfg.d_v);
    let base = espresso_forward(&v, &params, &cfg).map_err(e)?;
    let d = cfg.d_llm;
    let mut rng = Prng::new(5);
    for (s, r) in segment_bounds(18, 4).map_err(e)?.iter().enumerate() {
        let frame = r.start + rng.next_below(r.len());
        let mut f = v.features().clone();
        let width = 6 * cfg.d_v;
        for x in &mut f.data_mut()[frame * width..(frame + 1) * width] {
            *x += rng.next_normal();
        }
        let out = espresso_forward(&FeatureVideo::new(f).map_err(e)?, &params, &cfg).map_err(e)?;
        let mut own_changed = false;
        for (i, src) in base.provenance.iter().enumerate() {
            let same =
                base.tokens.data()[i * d..(i + 1) * d] == out.tokens.data()[i * d..(i + 1) * d];
            if src.segment == s {
                own_changed |= !same;
            } else if !same {
                return Ok(verdict(false, format!("frame {frame} moved token {i}")));
            }
        }
        if !own_changed {
            return Ok(verdict(false, format!("frame {frame} changed nothing")));
        }
    }
    Ok(verdict(
        true,
        "other segments bit-identical for one frame per segment",
    ))
}

fn pearson_reproduction() -> Outcome {
    let start = Instant::now();
    let mut details = Vec::new();
    let mut pass = true;
    for (name, expected, tol) in PEARSON_TARGETS {
        let path = format!("{}/data/{name}.csv", env!("CARGO_MANIFEST_DIR"));
        let text = fs::read_to_string(&path).map_err(e)?;
        let (axis, values, metrics) = parse_metric_csv(&text, None).map_err(e)?;
        let mut next = metrics.iter();
        let r = compression_sweep(axis, &values, |_| Ok(*next.next().unwrap()))
            .map_err(e)?
            .r;
        pass &= (r - expected).abs() <= tol;
        details.push(format!("{name} r={r:.4}"));
    }
    let elapsed = start.elapsed();
    Ok(verdict(
        pass && elapsed < PEARSON_BUDGET,
        format!("{} in {elapsed:.1?}", details.join(", ")),
    ))
}

fn cost_model_oracle() -> Outcome {
    let mut rng = Prng::new(2024);
    for shape in 0..COST_SHAPES {
        let heads = 1 + rng.next_below(2);
        let config = EspressoConfig {
            d_v: 4 * heads * (1 + rng.next_below(2)),
            d_llm: 4 * heads * (1 + rng.next_below(3)),
            p: 1 + rng.next_below(4),
            t: 1 + rng.next_below(4),
            n: 1 + rng.next_below(3),
            pr_queries: 1 + rng.next_below(6),
            heads,
            blocks: 1 + rng.next_below(2),
            ffn_mult: 1 + rng.next_below(3),
            pe: PeMode::Sinusoidal,
            seed: shape as u64,
        };
        let frames = config.n + rng.next_below(8);
        let patches = 1 + rng.next_below(7);
        let v = video(shape as u64, frames, patches, config.d_v);
        for kind in ProjectorKind::ALL {
            let d = ProjectorDescriptor::new(kind, config).map_err(e)?;
            let params = ProjectorParams::init(kind, &config).map_err(e)?;
            let (out, counted) = count_macs(|| params.project(&v, &config));
            out.map_err(e)?;
            let estimate = flop_estimate(&d, frames, patches).map_err(e)?;
            if estimate != counted {
                return Ok(verdict(
                    false,
                    format!("{kind} shape {shape}: estimate {estimate} vs counted {counted}"),
                ));
            }
        }
    }
    let cfg = EspressoConfig::default();
    let tokens = |kind| -> Result<Vec<usize>, String> {
        let d = ProjectorDescriptor::new(kind, cfg).map_err(e)?;
        DEFAULT_FRAMES
            .iter()
            .map(|&t| token_count(&d, t, 576).map_err(e))
            .collect()
    };
    let constant = |v: &[usize]| v.iter().all(|&x| x == v[0]);
    let esp = tokens(ProjectorKind::Espresso)?;
    let pr = tokens(ProjectorKind::Pr)?;
    let mlp = tokens(ProjectorKind::Mlp)?;
    let linear = mlp.iter().zip(DEFAULT_FRAMES).all(|(&m, t)| m == 576 * t);
    Ok(verdict(
        constant(&esp) && constant(&pr) && linear,
        format!(
            "{COST_SHAPES} shapes x 4 kinds exact; tokens espresso {esp:?}, pr {pr:?}, mlp {mlp:?}"
        ),
    ))
}

fn train_run(kind: ProjectorKind, pr_queries: usize) -> Result<(TrainOutcome, Duration), String> {
    let template = SceneTemplate::default();
    let train =
        make_needle_dataset(TRAIN_SIZE, TRAIN_BASE_SEED, &template, 4, Split::Train).map_err(e)?;
    let eval =
        make_needle_dataset(EVAL_SIZE, EVAL_BASE_SEED, &template, 4, Split::Eval).map_err(e)?;
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        kind,
        projector: EspressoConfig {
            pr_queries,
            ..defaults.projector
        },
        ..defaults
    };
    let start = Instant::now();
    let out = train_needle(&cfg, &train, Some(&eval)).map_err(e)?;
    Ok((out, start.elapsed()))
}

fn needle_trainability() -> Outcome {
    let (esp, pr) = std::thread::scope(|s| {
        let pr = s.spawn(|| train_run(ProjectorKind::Pr, 8));
        let esp = train_run(ProjectorKind::Espresso, 8);
        (esp, pr.join().unwrap())
    });
    let (esp, esp_time) = esp?;
    let (pr, pr_time) = pr?;
    let r = &esp.report;
    let acc = r.eval_accuracy.unwrap();
    let (head, tail) = (r.head_mean(LOSS_WINDOW), r.tail_mean(LOSS_WINDOW));
    let pr_acc = pr.report.eval_accuracy.unwrap();
    let order = if acc > pr_acc {
        "espresso ahead of pr"
    } else if acc == pr_acc {
        "espresso tied with pr"
    } else {
        "pr ahead of espresso"
    };
    Ok(verdict(
        acc >= MIN_ACCURACY && tail < LOSS_RATIO * head && esp_time < TRAIN_BUDGET,
        format!(
            "espresso accuracy {acc:.4}, loss {head:.4} -> {tail:.4} in {esp_time:.0?}; \
             pr(L=8) accuracy {pr_acc:.4}, loss {:.4} -> {:.4} in {pr_time:.0?}; {order}",
            pr.report.head_mean(LOSS_WINDOW),
            pr.report.tail_mean(LOSS_WINDOW)
        ),
    ))
}

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = fs::read(&path).unwrap();
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let table = format!("{}/data/segments_needle.csv", env!("CARGO_MANIFEST_DIR"));
    let needle = "--t-scene 4 --patches 8 --train-size 64 --eval-size 32";
    let commands = [
        "scaling --kind all --output OUT/scaling.csv".to_string(),
        "scaling --kind all --format structured --output OUT/scaling.txt".to_string(),
        "gradcheck --output OUT/grad.csv".to_string(),
        format!("stats --table {table} --output OUT/stats.txt --format structured"),
        format!("needle-gen {needle} --output OUT/data"),
        format!("train {needle} --steps 40 --batch 8 --output OUT/train"),
        format!("train {needle} --steps 40 --batch 8 --format structured --output OUT/train_s"),
        format!("eval {needle} --checkpoint OUT/train/model.ckpt --output OUT/eval.csv"),
    ];
    let mut runs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(e)?;
        let root = dir.path().to_str().unwrap().to_string();
        for c in &commands {
            let line = c.replace("OUT", &root);
            let argv = std::iter::once("espresso").chain(line.split_whitespace());
            let cfg = parse_config(argv).map_err(|err| format!("{c}: {err}"))?;
            dispatch(&cfg).map_err(|err| format!("{c}: {err}"))?;
        }
        runs.push(files_under(dir.path()));
    }
    let count = runs[0].len();
    let differing: Vec<String> = runs[0]
        .iter()
        .zip(&runs[1])
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.display().to_string())
        .collect();
    Ok(verdict(
        differing.is_empty() && runs[0].len() == runs[1].len() && count >= 12,
        format!(
            "{count} report files from {} commands byte-identical across two runs{}",
            commands.len(),
            if differing.is_empty() {
                String::new()
            } else {
                format!("; differing: {}", differing.join(", "))
            }
        ),
    ))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 8] = [
        ("fixed-length output", fixed_length),
        ("gradient fidelity", gradient_fidelity),
        ("permutation properties", permutation_properties),
        ("segment locality", segment_locality),
        ("pearson reproduction", pearson_reproduction),
        ("cost-model oracle", cost_model_oracle),
        ("needle trainability", needle_trainability),
        ("determinism", determinism),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (pass, detail) = match check() {
            Ok(v) => (v.pass, v.detail),
            Err(err) => (false, format!("error: {err}")),
        };
        failures += usize::from(!pass);
        println!(
            "{} criterion {}: {name} ({:.1?}) | {detail}",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            start.elapsed()
        );
    }
    if failures > 0 {
        println!("{failures} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", criteria.len());
}
