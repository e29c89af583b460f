//! Command-line flags. Every numeric flag is optional so that only the
//! flags actually given override the config file.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use oms_lab::diffusion::{LrSchedule, OmsTarget};
use oms_lab::nn::Activation;
use oms_lab::PredKind;
use serde_json::{Map, Value};

use crate::config::{Overrides, ScheduleName, Synthetic};

#[derive(Debug, Parser)]
#[command(
    name = "oms-lab",
    version,
    about = "Terminal-SNR diagnostics and one-more-step sampling on toy data"
)]
pub struct Cli {
    /// Worker threads for sampling, training and Monte-Carlo loops.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,

    /// JSON file with config fields for the command; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Re-run the command recorded in a manifest.
    #[arg(long, conflicts_with = "config")]
    pub from_manifest: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print terminal statistics of a noise schedule.
    Schedule(ScheduleArgs),
    /// Train-versus-sample radius of the terminal latents.
    Radius(RadiusArgs),
    /// Generate the toy dataset.
    GenData(GenDataArgs),
    /// Train the base denoiser.
    TrainDenoiser(TrainDenoiserArgs),
    /// Train the OMS module.
    TrainOms(TrainOmsArgs),
    /// Sample with DDIM, optionally preceded by the OMS step.
    Sample(SampleArgs),
    /// Mean-bias report of generated samples against the data.
    Report(ReportArgs),
    /// Full recipe with a before/after bias table.
    Demo(DemoArgs),
}

#[derive(Debug, Args)]
pub struct SeedArg {
    /// Seed; falls back to OMS_LAB_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ScheduleFlags {
    #[arg(long = "T")]
    pub num_steps: Option<usize>,
    /// Rescale to zero terminal SNR.
    #[arg(long)]
    pub rescale: bool,
    #[arg(long)]
    pub beta_start: Option<f64>,
    #[arg(long)]
    pub beta_end: Option<f64>,
    #[arg(long)]
    pub cosine_s: Option<f64>,
    #[arg(long)]
    pub cosine_clip: Option<f64>,
}

impl ScheduleFlags {
    fn apply(&self, o: &mut Overrides, prefix: &str, kind: Option<ScheduleName>) {
        let k = |f: &str| format!("{prefix}{f}");
        o.set(&k("kind"), &kind)
            .set(&k("T"), &self.num_steps)
            .flag(&k("rescale"), self.rescale)
            .set(&k("beta_start"), &self.beta_start)
            .set(&k("beta_end"), &self.beta_end)
            .set(&k("cosine_s"), &self.cosine_s)
            .set(&k("cosine_clip"), &self.cosine_clip);
    }
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[arg(value_enum)]
    pub kind: Option<ScheduleName>,
    #[command(flatten)]
    pub schedule: ScheduleFlags,
    /// Write the schedule as JSON.
    #[arg(long, alias = "json")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RadiusArgs {
    #[arg(long, value_enum, value_delimiter = ',')]
    pub schedules: Option<Vec<ScheduleName>>,
    #[arg(long = "T")]
    pub num_steps: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Data CSV whose rows stand in for x0.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub synthetic: Option<Synthetic>,
    /// Per-coordinate second moment of the synthetic data.
    #[arg(long)]
    pub m2: Option<f64>,
    #[arg(long)]
    pub synthetic_rows: Option<usize>,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Dataset spec JSON (overrides the three-class flags).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub offset_std: Option<f64>,
    #[arg(long)]
    pub n_per_class: Option<usize>,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleName>,
    #[command(flatten)]
    pub sched: ScheduleFlags,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_parser = parse_lr_schedule)]
    pub lr_schedule: Option<LrSchedule>,
    #[arg(long)]
    pub cond_dropout: Option<f64>,
    /// Offset-noise strength (off when absent).
    #[arg(long)]
    pub offset_noise: Option<f64>,
    #[arg(long)]
    pub offset_groups: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long, value_parser = parse_activation)]
    pub activation: Option<Activation>,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl TrainFlags {
    fn apply(&self, o: &mut Overrides) {
        o.set("data", &self.data)
            .set("train.iterations", &self.iterations)
            .set("train.batch_size", &self.batch_size)
            .set("train.learning_rate", &self.lr)
            .set("train.lr_schedule", &self.lr_schedule)
            .set("train.cond_dropout_p", &self.cond_dropout)
            .set("train.offset_noise", &self.offset_noise)
            .set("train.offset_groups", &self.offset_groups)
            .set("net.hidden", &self.hidden)
            .set("net.activation", &self.activation)
            .set("seed", &self.seed.seed)
            .set("out", &self.out);
        self.sched.apply(o, "schedule.", self.schedule);
    }
}

#[derive(Debug, Args)]
pub struct TrainDenoiserArgs {
    #[arg(long, value_parser = parse_pred)]
    pub pred: Option<PredKind>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct TrainOmsArgs {
    /// Read the network output as `v` (default) or as `x0`.
    #[arg(long, value_parser = parse_target)]
    pub target: Option<OmsTarget>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub denoiser: Option<PathBuf>,
    #[arg(long)]
    pub oms: Option<PathBuf>,
    /// Skip the OMS step even when a module is given.
    #[arg(long)]
    pub no_oms: bool,
    /// Base conditions: names (dark, mid, light, null) or ids.
    #[arg(long = "class", value_delimiter = ',')]
    pub classes: Option<Vec<String>>,
    /// Samples per class.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub omega_theta: Option<f64>,
    #[arg(long)]
    pub omega_psi: Option<f64>,
    #[arg(long)]
    pub oms_sigma: Option<f64>,
    /// `same` or a class for the OMS step.
    #[arg(long)]
    pub oms_condition: Option<String>,
    #[arg(long)]
    pub negative_condition: Option<String>,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub generated: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub bins: Option<usize>,
    /// Histogram range as `lo,hi`.
    #[arg(
        long,
        value_delimiter = ',',
        num_args = 2,
        allow_negative_numbers = true
    )]
    pub range: Option<Vec<f64>>,
    /// Write the per-sample-mean histogram CSV here.
    #[arg(long)]
    pub hist: Option<PathBuf>,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub denoiser_iterations: Option<usize>,
    #[arg(long)]
    pub oms_iterations: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[command(flatten)]
    pub seed: SeedArg,
}

fn parse_pred(s: &str) -> Result<PredKind, String> {
    s.parse().map_err(|e: oms_lab::Error| e.to_string())
}

fn parse_activation(s: &str) -> Result<Activation, String> {
    s.parse().map_err(|e: oms_lab::Error| e.to_string())
}

fn parse_target(s: &str) -> Result<OmsTarget, String> {
    match s {
        "v" => Ok(OmsTarget::V),
        "x0" => Ok(OmsTarget::X0),
        _ => Err(format!("unknown OMS target `{s}` (use v or x0)")),
    }
}

fn parse_lr_schedule(s: &str) -> Result<LrSchedule, String> {
    match s {
        "constant" => Ok(LrSchedule::Constant),
        "cosine" => Ok(LrSchedule::Cosine),
        _ => Err(format!(
            "unknown learning-rate schedule `{s}` (use constant or cosine)"
        )),
    }
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Schedule(_) => "schedule",
            Command::Radius(_) => "radius",
            Command::GenData(_) => "gen-data",
            Command::TrainDenoiser(_) => "train-denoiser",
            Command::TrainOms(_) => "train-oms",
            Command::Sample(_) => "sample",
            Command::Report(_) => "report",
            Command::Demo(_) => "demo",
        }
    }

    /// The explicitly given flags as a config overlay.
    pub fn overrides(&self) -> Map<String, Value> {
        let mut o = Overrides::default();
        match self {
            Command::Schedule(a) => {
                a.schedule.apply(&mut o, "schedule.", a.kind);
                o.set("out", &a.out);
            }
            Command::Radius(a) => {
                o.set("schedules", &a.schedules)
                    .set("T", &a.num_steps)
                    .set("dim", &a.dim)
                    .set("n", &a.n)
                    .set("data", &a.data)
                    .set("synthetic", &a.synthetic)
                    .set("m2", &a.m2)
                    .set("synthetic_rows", &a.synthetic_rows)
                    .set("seed", &a.seed.seed)
                    .set("out", &a.out);
            }
            Command::GenData(a) => {
                o.set("spec", &a.spec)
                    .set("dim", &a.dim)
                    .set("scale", &a.scale)
                    .set("offset_std", &a.offset_std)
                    .set("n_per_class", &a.n_per_class)
                    .set("seed", &a.seed.seed)
                    .set("out", &a.out);
            }
            Command::TrainDenoiser(a) => {
                o.set("pred", &a.pred);
                a.train.apply(&mut o);
            }
            Command::TrainOms(a) => {
                o.set("target", &a.target);
                a.train.apply(&mut o);
            }
            Command::Sample(a) => {
                o.set("denoiser", &a.denoiser)
                    .set("oms", &a.oms)
                    .flag("no_oms", a.no_oms)
                    .set("classes", &a.classes)
                    .set("n", &a.n)
                    .set("steps", &a.steps)
                    .set("eta", &a.eta)
                    .set("omega_theta", &a.omega_theta)
                    .set("omega_psi", &a.omega_psi)
                    .set("oms_sigma", &a.oms_sigma)
                    .set("oms_condition", &a.oms_condition)
                    .set("negative_condition", &a.negative_condition)
                    .set("seed", &a.seed.seed)
                    .set("out", &a.out);
            }
            Command::Report(a) => {
                o.set("generated", &a.generated)
                    .set("data", &a.data)
                    .set("bins", &a.bins)
                    .set("range", &a.range)
                    .set("hist", &a.hist)
                    .set("seed", &a.seed.seed)
                    .set("out", &a.out);
            }
            Command::Demo(a) => {
                o.set("out_dir", &a.out_dir)
                    .set("denoiser_iterations", &a.denoiser_iterations)
                    .set("oms_iterations", &a.oms_iterations)
                    .set("n", &a.n)
                    .set("seed", &a.seed.seed);
            }
        }
        o.into_map()
    }
}
