use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::report::{write_report, Report, Value};
use super::{parse_config_text, Command, RunConfig};
use crate::costmodel::{scaling_report, ProjectorDescriptor, Timing};
use crate::error::{Error, Result};
use crate::params::TensorTree;
use crate::synthbench::{
    compression_sweep, make_needle_dataset, parse_metric_csv, NeedleDataset, Prng, Split,
};
use crate::training::checkpoint::{load_checkpoint, save_checkpoint};
use crate::training::{
    evaluate_accuracy, gradient_suite, train_needle, NeedleModel, EVAL_BASE_SEED, TRAIN_BASE_SEED,
};

/// Result of a successful dispatch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Outcome {
    /// Human-readable summary for stdout.
    pub summary: String,
    /// `false` when the command ran but its check failed (gradcheck).
    pub success: bool,
    pub written: Vec<PathBuf>,
}

/// Window used for the head/tail loss means in training summaries.
const LOSS_WINDOW: usize = 100;

/// Keys stored in a checkpoint header; enough to rebuild the model.
const ARCH_KEYS: [&str; 15] = [
    "kind",
    "probe",
    "d_v",
    "d_llm",
    "p",
    "t",
    "n",
    "pr_queries",
    "heads",
    "blocks",
    "ffn_mult",
    "pe",
    "t_scene",
    "patches",
    "classes",
];

pub fn dispatch(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    match cfg.command {
        Command::Gradcheck => gradcheck(cfg),
        Command::Scaling | Command::Bench => scaling(cfg),
        Command::NeedleGen => needle_gen(cfg),
        Command::Train => train(cfg),
        Command::Eval => eval(cfg),
        Command::Stats => stats(cfg),
    }
}

fn finish(cfg: &RunConfig, report: &Report, summary: String, success: bool) -> Result<Outcome> {
    let mut written = Vec::new();
    let summary = match &cfg.output {
        Some(path) => {
            write_report(report, cfg.format, path)?;
            written.push(path.clone());
            summary
        }
        None => report.render(cfg.format)? + &summary,
    };
    Ok(Outcome {
        summary,
        success,
        written,
    })
}

fn gradcheck(cfg: &RunConfig) -> Result<Outcome> {
    let entries = gradient_suite(cfg.seed)?;
    let mut report = Report::new(&[
        "check",
        "max_rel_error",
        "entries",
        "worst_tensor",
        "worst_entry",
        "passed",
    ]);
    let mut summary = String::new();
    let mut worst = 0.0f64;
    for e in &entries {
        report.push(vec![
            e.name.into(),
            e.report.max_rel_error.into(),
            e.report.entries.into(),
            e.report.worst.0.into(),
            e.report.worst.1.into(),
            e.passed().into(),
        ])?;
        worst = worst.max(e.report.max_rel_error);
    }
    let all = entries.iter().all(|e| e.passed());
    writeln!(
        summary,
        "gradcheck: {} checks, max relative error {worst:e}, {}",
        entries.len(),
        if all { "all passed" } else { "FAILED" }
    )
    .unwrap();
    finish(cfg, &report, summary, all)
}

fn scaling(cfg: &RunConfig) -> Result<Outcome> {
    let projector = crate::projectors::EspressoConfig {
        seed: cfg.seed,
        ..cfg.projector
    };
    let descriptors = cfg
        .kinds
        .iter()
        .map(|&k| ProjectorDescriptor::new(k, projector))
        .collect::<Result<Vec<_>>>()?;
    let timing = (cfg.command == Command::Bench).then_some(Timing {
        warmups: cfg.warmups,
        runs: cfg.runs,
    });
    let rows = scaling_report(&descriptors, &cfg.frames, cfg.patches, timing)?;
    let mut columns = vec!["kind", "frames", "patches", "tokens", "params", "macs"];
    if timing.is_some() {
        columns.extend(["warmups", "runs", "mean_ns", "min_ns", "max_ns"]);
    }
    let mut report = Report::new(&columns);
    for r in &rows {
        let mut row: Vec<Value> = vec![
            r.kind.name().into(),
            r.frames.into(),
            r.patches.into(),
            r.tokens.into(),
            r.params.into(),
            r.macs.into(),
        ];
        if let Some(rt) = &r.runtime {
            row.extend([
                rt.warmup_count.into(),
                rt.run_count.into(),
                (rt.mean.as_nanos() as u64).into(),
                (rt.min.as_nanos() as u64).into(),
                (rt.max.as_nanos() as u64).into(),
            ]);
        }
        report.push(row)?;
    }
    let summary = format!("{}: {} rows\n", cfg.command, rows.len());
    finish(cfg, &report, summary, true)
}

fn datasets(cfg: &RunConfig, train: bool) -> Result<(Option<NeedleDataset>, NeedleDataset)> {
    let template = cfg.template();
    let train = match train {
        true => Some(make_needle_dataset(
            cfg.train_size,
            TRAIN_BASE_SEED,
            &template,
            cfg.classes,
            Split::Train,
        )?),
        false => None,
    };
    let eval = make_needle_dataset(
        cfg.eval_size,
        EVAL_BASE_SEED,
        &template,
        cfg.classes,
        Split::Eval,
    )?;
    Ok((train, eval))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn needle_gen(cfg: &RunConfig) -> Result<Outcome> {
    let dir = cfg.require_output()?;
    let (train, eval) = datasets(cfg, true)?;
    create_dir(dir)?;
    let mut written = Vec::new();
    let mut summary = String::new();
    for data in [train.as_ref().unwrap(), &eval] {
        let split = data.split.name();
        let manifest = dir.join(format!("{split}_manifest.txt"));
        crate::files::write_atomic(&manifest, data.manifest().as_bytes())?;
        // Concatenated FeatureVideo records, one per example.
        let mut features = Vec::new();
        for ex in &data.examples {
            ex.composite
                .features
                .write_to(&mut features)
                .map_err(|e| Error::io(dir, e))?;
        }
        let bin = dir.join(format!("{split}_features.bin"));
        crate::files::write_atomic(&bin, &features)?;
        writeln!(summary, "{split}: {} examples", data.len()).unwrap();
        written.extend([manifest, bin]);
    }
    Ok(Outcome {
        summary,
        success: true,
        written,
    })
}

fn arch_header(cfg: &RunConfig) -> String {
    let p = &cfg.projector;
    let values = [
        cfg.kinds[0].name().to_string(),
        cfg.probe.name().to_string(),
        p.d_v.to_string(),
        p.d_llm.to_string(),
        p.p.to_string(),
        p.t.to_string(),
        p.n.to_string(),
        p.pr_queries.to_string(),
        p.heads.to_string(),
        p.blocks.to_string(),
        p.ffn_mult.to_string(),
        p.pe.to_string(),
        cfg.t_scene.to_string(),
        cfg.patches.to_string(),
        cfg.classes.to_string(),
    ];
    ARCH_KEYS
        .iter()
        .zip(values)
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

fn train(cfg: &RunConfig) -> Result<Outcome> {
    let tc = cfg.train_config()?;
    let (train, eval) = datasets(cfg, true)?;
    let outcome = train_needle(&tc, train.as_ref().unwrap(), Some(&eval))?;
    let r = &outcome.report;
    let accuracy = r.eval_accuracy.unwrap_or(f64::NAN);

    let mut summary_report = Report::new(&[
        "kind",
        "probe",
        "steps",
        "batch",
        "lr",
        "seed",
        "init_seed",
        "train_size",
        "eval_size",
        "first_loss",
        "final_loss",
        "head_mean",
        "tail_mean",
        "eval_accuracy",
    ]);
    summary_report.push(vec![
        tc.kind.name().into(),
        tc.probe.name().into(),
        tc.steps.into(),
        tc.batch.into(),
        tc.adam.lr.into(),
        tc.seed.into(),
        r.config.projector.seed.into(),
        cfg.train_size.into(),
        cfg.eval_size.into(),
        r.losses[0].into(),
        r.final_loss.into(),
        r.head_mean(LOSS_WINDOW).into(),
        r.tail_mean(LOSS_WINDOW).into(),
        accuracy.into(),
    ])?;
    let mut losses = Report::new(&["step", "loss"]);
    for (i, &l) in r.losses.iter().enumerate() {
        losses.push(vec![i.into(), l.into()])?;
    }

    let mut summary = format!(
        "train: {} steps, loss {:.4} -> {:.4}, eval accuracy {accuracy:.4}\n",
        tc.steps,
        r.head_mean(LOSS_WINDOW),
        r.tail_mean(LOSS_WINDOW)
    );
    let mut written = Vec::new();
    if let Some(dir) = &cfg.output {
        create_dir(dir)?;
        let ext = cfg.format.extension();
        let summary_path = dir.join(format!("summary.{ext}"));
        let losses_path = dir.join(format!("losses.{ext}"));
        let ckpt = dir.join("model.ckpt");
        write_report(&summary_report, cfg.format, &summary_path)?;
        write_report(&losses, cfg.format, &losses_path)?;
        save_checkpoint(&ckpt, &arch_header(cfg), &outcome.model.flatten())?;
        written.extend([summary_path, losses_path, ckpt]);
    } else {
        summary = summary_report.render(cfg.format)? + &summary;
    }
    Ok(Outcome {
        summary,
        success: true,
        written,
    })
}

fn eval(cfg: &RunConfig) -> Result<Outcome> {
    let path = cfg.checkpoint.as_ref().unwrap();
    let (header, tensors) = load_checkpoint(path)?;
    let mut arch = cfg.clone();
    for (k, v) in parse_config_text(&header)? {
        if !ARCH_KEYS.contains(&k.as_str()) {
            return Err(Error::Format {
                path: path.clone(),
                reason: format!("unexpected header key `{k}`"),
            });
        }
        arch.set(&k, &v)?;
    }
    arch.validate()?;
    let kind = arch.single_kind()?;
    let mut model = NeedleModel::init(
        kind,
        &arch.projector,
        arch.probe,
        crate::synthbench::SCENES * arch.t_scene,
        arch.patches,
        arch.classes,
        &mut Prng::new(0),
    )?;
    model.assign(&tensors).map_err(|e| Error::Format {
        path: path.clone(),
        reason: format!("parameters do not fit the header: {e}"),
    })?;
    let (_, data) = datasets(&arch, false)?;
    let accuracy = evaluate_accuracy(&model, &arch.projector, &data)?;
    let mut report = Report::new(&["kind", "probe", "eval_size", "accuracy"]);
    report.push(vec![
        kind.name().into(),
        arch.probe.name().into(),
        data.len().into(),
        accuracy.into(),
    ])?;
    let summary = format!("eval: accuracy {accuracy:.4} on {} examples\n", data.len());
    finish(cfg, &report, summary, true)
}

fn stats(cfg: &RunConfig) -> Result<Outcome> {
    let path = cfg.table.as_ref().unwrap();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (axis, values, metrics) = parse_metric_csv(&text, cfg.axis).map_err(|e| Error::Format {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let mut next = metrics.iter();
    let sweep = compression_sweep(axis, &values, |_| Ok(*next.next().unwrap()))?;
    let mut report = Report::new(&["axis", "value", "rate", "metric", "r"]);
    for row in &sweep.rows {
        report.push(vec![
            axis.name().into(),
            row.value.into(),
            row.rate.into(),
            row.metric.into(),
            sweep.r.into(),
        ])?;
    }
    let summary = format!("stats: {axis} r = {:.5}\n", sweep.r);
    finish(cfg, &report, summary, true)
}
