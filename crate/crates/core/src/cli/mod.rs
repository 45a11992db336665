//! Command-line configuration, dispatch and report output.
//!
//! Settings come from an optional `key = value` file (`--config`, `#`
//! starts a comment) and from `--key value` flags, which take precedence.
//! File keys use underscores; flags use dashes (`d_llm` / `--d-llm`).

mod commands;
mod report;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Parser;

pub use commands::{dispatch, Outcome};
pub use report::{write_report, Report, ReportFormat, Value};

use crate::costmodel::DEFAULT_FRAMES;
use crate::error::{Error, Result};
use crate::projectors::{EspressoConfig, ProjectorKind};
use crate::synthbench::{SceneTemplate, SweepAxis, SCENES};
use crate::training::{AdamConfig, ProbeKind, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Gradcheck,
    Scaling,
    Bench,
    NeedleGen,
    Train,
    Eval,
    Stats,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::Gradcheck,
        Command::Scaling,
        Command::Bench,
        Command::NeedleGen,
        Command::Train,
        Command::Eval,
        Command::Stats,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Gradcheck => "gradcheck",
            Command::Scaling => "scaling",
            Command::Bench => "bench",
            Command::NeedleGen => "needle-gen",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Stats => "stats",
        }
    }

    fn trains(self) -> bool {
        matches!(self, Command::Train | Command::Eval | Command::NeedleGen)
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s.trim())
            .ok_or_else(|| format!("unknown command `{}`", s.trim()))
    }
}

/// Fully resolved and validated run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub kinds: Vec<ProjectorKind>,
    /// Projector hyperparameters; `seed` initializes projector weights for
    /// the cost commands.
    pub projector: EspressoConfig,
    pub probe: ProbeKind,
    /// Frame counts `T` for `scaling` and `bench`.
    pub frames: Vec<usize>,
    pub patches: usize,
    pub t_scene: usize,
    pub classes: usize,
    pub amplitude: f64,
    pub sigma: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub train_size: usize,
    pub eval_size: usize,
    pub seed: u64,
    pub warmups: usize,
    pub runs: usize,
    pub output: Option<PathBuf>,
    pub format: ReportFormat,
    pub table: Option<PathBuf>,
    pub axis: Option<SweepAxis>,
    pub checkpoint: Option<PathBuf>,
}

impl RunConfig {
    /// Defaults for `command` before any file or flag is applied.
    pub fn defaults(command: Command) -> Self {
        let train = TrainConfig::default();
        let template = SceneTemplate::default();
        Self {
            command,
            kinds: vec![ProjectorKind::Espresso],
            projector: if command.trains() {
                train.projector
            } else {
                EspressoConfig::default()
            },
            probe: train.probe,
            frames: DEFAULT_FRAMES.to_vec(),
            patches: template.patches,
            t_scene: template.frames,
            classes: SCENES,
            amplitude: template.amplitude,
            sigma: template.noise_sigma,
            steps: train.steps,
            batch: train.batch,
            lr: train.adam.lr,
            train_size: 4096,
            eval_size: 512,
            seed: if command.trains() { train.seed } else { 0 },
            warmups: crate::costmodel::DEFAULT_WARMUPS,
            runs: crate::costmodel::DEFAULT_RUNS,
            output: None,
            format: ReportFormat::Csv,
            table: None,
            axis: None,
            checkpoint: None,
        }
    }

    /// Set one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let k = key.as_str();
        match k {
            "command" => self.command = parse(k, value)?,
            "kind" => self.kinds = parse_kinds(value)?,
            "d_v" => self.projector.d_v = parse(k, value)?,
            "d_llm" => self.projector.d_llm = parse(k, value)?,
            "p" => self.projector.p = parse(k, value)?,
            "t" => self.projector.t = parse(k, value)?,
            "n" => self.projector.n = parse(k, value)?,
            "pr_queries" => self.projector.pr_queries = parse(k, value)?,
            "heads" => self.projector.heads = parse(k, value)?,
            "blocks" => self.projector.blocks = parse(k, value)?,
            "ffn_mult" => self.projector.ffn_mult = parse(k, value)?,
            "pe" => self.projector.pe = parse(k, value)?,
            "probe" => self.probe = parse(k, value)?,
            "frames" => {
                self.frames = value
                    .split(',')
                    .map(|v| parse(k, v))
                    .collect::<Result<_>>()?
            }
            "patches" => self.patches = parse(k, value)?,
            "t_scene" => self.t_scene = parse(k, value)?,
            "classes" => self.classes = parse(k, value)?,
            "amplitude" => self.amplitude = parse(k, value)?,
            "sigma" => self.sigma = parse(k, value)?,
            "steps" => self.steps = parse(k, value)?,
            "batch" => self.batch = parse(k, value)?,
            "lr" => self.lr = parse(k, value)?,
            "train_size" => self.train_size = parse(k, value)?,
            "eval_size" => self.eval_size = parse(k, value)?,
            "seed" => self.seed = parse(k, value)?,
            "warmups" => self.warmups = parse(k, value)?,
            "runs" => self.runs = parse(k, value)?,
            "output" => self.output = Some(path(k, value)?),
            "format" => self.format = parse(k, value)?,
            "table" => self.table = Some(path(k, value)?),
            "axis" => self.axis = Some(parse(k, value)?),
            "checkpoint" => self.checkpoint = Some(path(k, value)?),
            _ => return Err(Error::UnknownKey(key)),
        }
        Ok(())
    }

    /// Check every constraint the selected command depends on.
    pub fn validate(&self) -> Result<()> {
        self.projector.validate()?;
        if self.kinds.is_empty() {
            return Err(Error::config("kind", "no projector kind given"));
        }
        match self.command {
            Command::Gradcheck => {}
            Command::Scaling | Command::Bench => {
                if self.frames.is_empty() {
                    return Err(Error::config("frames", "empty frame list"));
                }
                positive("patches", self.patches)?;
                for &t in &self.frames {
                    positive("frames", t)?;
                    if self.kinds.contains(&ProjectorKind::Espresso) && t < self.projector.n {
                        return Err(Error::config(
                            "frames",
                            format!("T = {t} is below n = {}", self.projector.n),
                        ));
                    }
                }
                if self.command == Command::Bench {
                    positive("runs", self.runs)?;
                }
            }
            Command::NeedleGen | Command::Train | Command::Eval => {
                self.validate_task()?;
                match self.command {
                    Command::NeedleGen => {
                        positive("train_size", self.train_size)?;
                        self.require_output()?;
                    }
                    Command::Train => {
                        self.single_kind()?;
                        positive("train_size", self.train_size)?;
                        positive("steps", self.steps)?;
                        positive("batch", self.batch)?;
                        if !(self.lr > 0.0 && self.lr.is_finite()) {
                            return Err(Error::config("lr", "must be a positive number"));
                        }
                    }
                    _ => {
                        if self.checkpoint.is_none() {
                            return Err(Error::config("checkpoint", "required by `eval`"));
                        }
                    }
                }
            }
            Command::Stats => {
                if self.table.is_none() {
                    return Err(Error::config("table", "required by `stats`"));
                }
            }
        }
        Ok(())
    }

    fn validate_task(&self) -> Result<()> {
        positive("t_scene", self.t_scene)?;
        positive("patches", self.patches)?;
        positive("eval_size", self.eval_size)?;
        if self.classes < SCENES {
            return Err(Error::config(
                "classes",
                format!("need at least {SCENES} motif classes"),
            ));
        }
        if self.classes > self.projector.d_v {
            return Err(Error::config(
                "classes",
                format!("{} exceeds d_v = {}", self.classes, self.projector.d_v),
            ));
        }
        for (key, v) in [("amplitude", self.amplitude), ("sigma", self.sigma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be a finite number >= 0"));
            }
        }
        let frames = SCENES * self.t_scene;
        if self.kinds.contains(&ProjectorKind::Espresso) && frames < self.projector.n {
            return Err(Error::config(
                "t_scene",
                format!(
                    "composites have {frames} frames, fewer than n = {}",
                    self.projector.n
                ),
            ));
        }
        Ok(())
    }

    fn single_kind(&self) -> Result<ProjectorKind> {
        match self.kinds[..] {
            [kind] => Ok(kind),
            _ => Err(Error::config(
                "kind",
                format!("`{}` needs exactly one projector kind", self.command),
            )),
        }
    }

    fn require_output(&self) -> Result<&Path> {
        self.output
            .as_deref()
            .ok_or_else(|| Error::config("output", format!("required by `{}`", self.command)))
    }

    pub fn template(&self) -> SceneTemplate {
        SceneTemplate {
            frames: self.t_scene,
            patches: self.patches,
            dim: self.projector.d_v,
            amplitude: self.amplitude,
            noise_sigma: self.sigma,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            kind: self.single_kind()?,
            projector: self.projector,
            probe: self.probe,
            steps: self.steps,
            batch: self.batch,
            seed: self.seed,
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
        })
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e: T::Err| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn path(key: &str, value: &str) -> Result<PathBuf> {
    if value.is_empty() {
        return Err(Error::config(key, "empty path"));
    }
    Ok(PathBuf::from(value))
}

fn parse_kinds(value: &str) -> Result<Vec<ProjectorKind>> {
    if value.trim() == "all" {
        return Ok(ProjectorKind::ALL.to_vec());
    }
    value.split(',').map(|v| parse("kind", v)).collect()
}

fn positive(key: &str, value: usize) -> Result<()> {
    if value == 0 {
        return Err(Error::config(key, "must be >= 1"));
    }
    Ok(())
}

/// Parse a `key = value` file body into ordered pairs.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::invalid(
                "config file",
                format!("line {}: expected `key = value`, got `{line}`", i + 1),
            )
        })?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

macro_rules! flags {
    ($($field:ident: $help:literal),* $(,)?) => {
        /// Command-line arguments; every flag overrides the config file.
        #[derive(Debug, Parser)]
        #[command(name = "espresso", about = "Fixed-length video projector experiments", after_help = COMMANDS_HELP)]
        pub struct Args {
            /// Command to run.
            pub command: Option<String>,
            /// `key = value` configuration file.
            #[arg(long)]
            pub config: Option<PathBuf>,
            $(
                #[arg(long, value_name = "VALUE", help = $help)]
                pub $field: Option<String>,
            )*
        }

        impl Args {
            fn overrides(&self) -> Vec<(&'static str, &str)> {
                let mut out = Vec::new();
                $(
                    if let Some(v) = &self.$field {
                        out.push((stringify!($field), v.as_str()));
                    }
                )*
                out
            }
        }
    };
}

flags! {
    kind: "Projector kind(s): espresso, mlp, pr, meanpool, a comma list or `all`",
    d_v: "Input feature width",
    d_llm: "Output token width",
    p: "Spatial queries per segment",
    t: "Temporal queries per segment",
    n: "Segment count",
    pr_queries: "Query count of the pr baseline",
    heads: "Attention heads",
    blocks: "Q-Former blocks",
    ffn_mult: "Feed-forward width multiplier",
    pe: "Positional encoding: sinusoidal or disabled",
    probe: "Probe form: gated or linear",
    frames: "Comma-separated frame counts for scaling and bench",
    patches: "Patches per frame",
    t_scene: "Frames per needle scene",
    classes: "Motif classes",
    amplitude: "Motif amplitude",
    sigma: "Noise standard deviation",
    steps: "Training steps",
    batch: "Training batch size",
    lr: "Adam learning rate",
    train_size: "Training examples",
    eval_size: "Evaluation examples",
    seed: "Random seed",
    warmups: "Untimed warm-up runs",
    runs: "Timed runs",
    output: "Report file (directory for needle-gen and train)",
    format: "Report format: csv or structured",
    table: "Metric table for stats",
    axis: "Sweep axis for stats: spatial, temporal or segments",
    checkpoint: "Checkpoint to evaluate",
}

const COMMANDS_HELP: &str = "\
Commands:
  gradcheck   finite-difference check of every differentiable operation
  scaling     token counts, parameter counts and multiply-accumulates per frame count
  bench       scaling plus measured forward runtime
  needle-gen  write needle datasets and manifests to the output directory
  train       train projector and probe on the needle task
  eval        evaluate a checkpoint on the needle eval split
  stats       correlate a metric table with its compression rate";

/// Short usage text printed after errors.
pub fn usage() -> String {
    let names: Vec<&str> = Command::ALL.iter().map(|c| c.name()).collect();
    format!(
        "usage: espresso <{}> [--config FILE] [--KEY VALUE ...]\n       espresso --help for all keys",
        names.join("|")
    )
}

impl RunConfig {
    /// Resolve parsed arguments: defaults, then the file, then flags.
    pub fn from_args(args: &Args) -> Result<RunConfig> {
        let mut pairs = match &args.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                parse_config_text(&text)?
            }
            None => Vec::new(),
        };
        if let Some(c) = &args.command {
            pairs.push(("command".into(), c.clone()));
        }
        for (k, v) in args.overrides() {
            pairs.push((k.into(), v.into()));
        }
        let command = pairs
            .iter()
            .rev()
            .find(|(k, _)| k.trim() == "command")
            .map(|(_, v)| parse::<Command>("command", v))
            .transpose()?
            .ok_or_else(|| Error::config("command", "no command given"))?;
        let mut cfg = RunConfig::defaults(command);
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parse `argv` (program name first) into a validated configuration.
pub fn parse_config<I, S>(argv: I) -> Result<RunConfig>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let args = Args::try_parse_from(argv)
        .map_err(|e| Error::invalid("arguments", e.render().to_string()))?;
    RunConfig::from_args(&args)
}

/// Entry point shared by the binary and the tests; returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match RunConfig::from_args(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}\n{}", usage());
            return 2;
        }
    };
    match dispatch(&cfg) {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            i32::from(!outcome.success)
        }
        Err(e) => {
            eprintln!("error: {e}\n{}", usage());
            1
        }
    }
}
