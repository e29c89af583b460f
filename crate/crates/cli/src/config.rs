//! Resolved per-command configurations and the layering that builds them:
//! defaults, then `OMS_LAB_SEED`, then a JSON config file, then flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ValueEnum;
use oms_lab::diffusion::{LrSchedule, OmsTarget, DARK, LIGHT, MID};
use oms_lab::nn::Activation;
use oms_lab::schedule::{
    build_cosine_schedule, build_ldm_schedule, build_linear_schedule, rescale_zero_terminal,
    Schedule,
};
use oms_lab::{PredKind, NULL_CLASS};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::UsageError;

pub const SEED_ENV: &str = "OMS_LAB_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleName {
    Linear,
    Cosine,
    Ldm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleName,
    #[serde(rename = "T")]
    pub num_steps: usize,
    pub rescale: bool,
    pub beta_start: f64,
    pub beta_end: f64,
    pub cosine_s: f64,
    pub cosine_clip: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            kind: ScheduleName::Ldm,
            num_steps: 1000,
            rescale: false,
            beta_start: 1e-4,
            beta_end: 0.02,
            cosine_s: 0.008,
            cosine_clip: 0.999,
        }
    }
}

impl ScheduleSpec {
    pub fn with_kind(kind: ScheduleName, num_steps: usize) -> ScheduleSpec {
        ScheduleSpec {
            kind,
            num_steps,
            ..ScheduleSpec::default()
        }
    }

    pub fn build(&self) -> Result<Schedule> {
        let t = self.num_steps;
        let base = match self.kind {
            ScheduleName::Linear => build_linear_schedule(t, self.beta_start, self.beta_end),
            ScheduleName::Cosine => build_cosine_schedule(t, self.cosine_s, self.cosine_clip),
            ScheduleName::Ldm => build_ldm_schedule(t),
        }
        .map_err(usage)?;
        if self.rescale {
            Ok(rescale_zero_terminal(&base).map_err(usage)?)
        } else {
            Ok(base)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleCmd {
    pub schedule: ScheduleSpec,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Synthetic {
    /// Rows drawn from `N(0, m2·I)`.
    ZeroMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadiusCmd {
    pub schedules: Vec<ScheduleName>,
    #[serde(rename = "T")]
    pub num_steps: usize,
    pub dim: usize,
    pub n: usize,
    pub data: Option<PathBuf>,
    pub synthetic: Option<Synthetic>,
    pub m2: f64,
    pub synthetic_rows: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RadiusCmd {
    fn default() -> Self {
        RadiusCmd {
            schedules: vec![
                ScheduleName::Cosine,
                ScheduleName::Linear,
                ScheduleName::Ldm,
            ],
            num_steps: 1000,
            dim: 16384,
            n: 20_000,
            data: None,
            synthetic: None,
            m2: 0.5,
            synthetic_rows: 16,
            seed: 0,
            out: PathBuf::from("radius.csv"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataCmd {
    /// A full dataset spec; when absent the three-class toy set is built
    /// from the fields below.
    pub spec: Option<PathBuf>,
    pub dim: usize,
    pub scale: f64,
    pub offset_std: f64,
    pub n_per_class: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for GenDataCmd {
    fn default() -> Self {
        GenDataCmd {
            spec: None,
            dim: 16,
            scale: 0.2,
            offset_std: 0.6,
            n_per_class: 4096,
            seed: 0,
            out: PathBuf::from("data.csv"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_embed_dim: usize,
    pub class_embed_dim: usize,
}

impl Default for NetSpec {
    fn default() -> Self {
        NetSpec {
            hidden: vec![256, 256],
            activation: Activation::Silu,
            time_embed_dim: 32,
            class_embed_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub cond_dropout_p: f64,
    pub offset_noise: Option<f64>,
    pub offset_groups: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec::with_iterations(8000)
    }
}

impl TrainSpec {
    fn with_iterations(iterations: usize) -> TrainSpec {
        TrainSpec {
            iterations,
            batch_size: 128,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            cond_dropout_p: 0.1,
            offset_noise: None,
            offset_groups: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainDenoiserCmd {
    pub data: PathBuf,
    pub pred: PredKind,
    pub schedule: ScheduleSpec,
    pub train: TrainSpec,
    pub net: NetSpec,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for TrainDenoiserCmd {
    fn default() -> Self {
        TrainDenoiserCmd {
            data: PathBuf::from("data.csv"),
            pred: PredKind::Epsilon,
            schedule: ScheduleSpec::default(),
            train: TrainSpec::with_iterations(8000),
            net: NetSpec::default(),
            seed: 0,
            out: PathBuf::from("denoiser.json"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOmsCmd {
    pub data: PathBuf,
    pub target: OmsTarget,
    pub schedule: ScheduleSpec,
    pub train: TrainSpec,
    pub net: NetSpec,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for TrainOmsCmd {
    fn default() -> Self {
        TrainOmsCmd {
            data: PathBuf::from("data.csv"),
            target: OmsTarget::V,
            schedule: ScheduleSpec::default(),
            train: TrainSpec::with_iterations(2000),
            net: NetSpec::default(),
            seed: 0,
            out: PathBuf::from("oms.json"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleCmd {
    pub denoiser: PathBuf,
    pub oms: Option<PathBuf>,
    pub no_oms: bool,
    /// Base conditions, by name (`dark`, `mid`, `light`, `null`) or id.
    pub classes: Vec<String>,
    pub n: usize,
    pub steps: usize,
    pub eta: f64,
    pub omega_theta: f64,
    pub omega_psi: f64,
    pub oms_sigma: f64,
    /// `same`, a class name or an id.
    pub oms_condition: String,
    pub negative_condition: String,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for SampleCmd {
    fn default() -> Self {
        SampleCmd {
            denoiser: PathBuf::from("denoiser.json"),
            oms: None,
            no_oms: false,
            classes: vec!["dark".into(), "mid".into(), "light".into()],
            n: 2048,
            steps: 50,
            eta: 0.0,
            omega_theta: 1.0,
            omega_psi: 1.0,
            oms_sigma: 0.0,
            oms_condition: "same".into(),
            negative_condition: "null".into(),
            seed: 0,
            out: PathBuf::from("samples.csv"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportCmd {
    pub generated: PathBuf,
    pub data: PathBuf,
    pub bins: usize,
    pub range: (f64, f64),
    pub hist: Option<PathBuf>,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for ReportCmd {
    fn default() -> Self {
        ReportCmd {
            generated: PathBuf::from("samples.csv"),
            data: PathBuf::from("data.csv"),
            bins: oms_lab::metrics::DEFAULT_HIST_BINS,
            range: oms_lab::metrics::DEFAULT_HIST_RANGE,
            hist: None,
            seed: 0,
            out: PathBuf::from("report.json"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoCmd {
    pub out_dir: PathBuf,
    pub denoiser_iterations: usize,
    pub oms_iterations: usize,
    pub n: usize,
    pub seed: u64,
}

impl Default for DemoCmd {
    fn default() -> Self {
        DemoCmd {
            out_dir: PathBuf::from("oms-demo"),
            denoiser_iterations: 8000,
            oms_iterations: 2000,
            n: 2048,
            seed: 0,
        }
    }
}

/// Class id from a name or a number.
pub fn parse_class(s: &str) -> Result<usize> {
    match s.trim() {
        "null" | "none" => Ok(NULL_CLASS),
        "dark" => Ok(DARK),
        "mid" => Ok(MID),
        "light" => Ok(LIGHT),
        other => other.parse().map_err(|_| {
            UsageError(format!(
                "unknown class `{other}` (use dark, mid, light, null or an id)"
            ))
            .into()
        }),
    }
}

pub(crate) fn usage<E: std::fmt::Display>(e: E) -> anyhow::Error {
    UsageError(e.to_string()).into()
}

/// Recursively overlays `top` onto `base`; objects merge key by key, every
/// other value replaces.
pub fn deep_merge(base: &mut Value, top: &Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => deep_merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, t) => *b = t.clone(),
    }
}

/// Builds a command config from its defaults, the seed environment
/// variable, an optional JSON file and the explicitly given flags.
pub fn resolve<C>(file: Option<&Path>, flags: Map<String, Value>) -> Result<C>
where
    C: Serialize + DeserializeOwned + Default,
{
    let mut value = serde_json::to_value(C::default())?;
    if let Ok(seed) = std::env::var(SEED_ENV) {
        if let Some(obj) = value.as_object_mut() {
            if obj.contains_key("seed") {
                let seed: u64 = seed.trim().parse().map_err(|_| {
                    UsageError(format!(
                        "{SEED_ENV} must be an unsigned integer, got `{seed}`"
                    ))
                })?;
                obj.insert("seed".into(), seed.into());
            }
        }
    }
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let overlay: Value = serde_json::from_str(&text)
            .map_err(|e| usage(format!("config {}: {e}", path.display())))?;
        if !overlay.is_object() {
            return Err(usage(format!(
                "config {} must hold a JSON object",
                path.display()
            )));
        }
        deep_merge(&mut value, &overlay);
    }
    deep_merge(&mut value, &Value::Object(flags));
    serde_json::from_value(value).map_err(|e| usage(format!("invalid configuration: {e}")))
}

/// Collects explicitly given flags into a (possibly nested) JSON object.
#[derive(Default)]
pub struct Overrides(Map<String, Value>);

impl Overrides {
    pub fn set<T: Serialize>(&mut self, key: &str, value: &Option<T>) -> &mut Self {
        if let Some(v) = value {
            self.insert(key, serde_json::to_value(v).expect("flag values serialize"));
        }
        self
    }

    pub fn flag(&mut self, key: &str, on: bool) -> &mut Self {
        if on {
            self.insert(key, Value::Bool(true));
        }
        self
    }

    /// `key` may be dotted (`train.iterations`) to reach a nested field.
    fn insert(&mut self, key: &str, value: Value) {
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().expect("non-empty key");
        let mut map = &mut self.0;
        for p in parts {
            map = map
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("nested override is an object");
        }
        map.insert(last.to_string(), value);
    }

    pub fn into_map(self) -> Map<String, Value> {
        self.0
    }
}
