//! Synthetic conditional data, the forward noising process, offset noise,
//! and the two training loops: the base denoiser and the one-more-step
//! (OMS) module that maps pure noise to the terminal latent the denoiser
//! was trained on.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::batch::{Batch, NULL_CLASS};
use crate::error::{check_same_len, invalid, Error, Result};
use crate::nn::{step_net, AdamState, DenseNet, Grads, NetArch, WeightsJson};
use crate::par;
use crate::param::{self, PredKind};
use crate::rng::{self, stream, Rng};
use crate::schedule::{Schedule, ScheduleJson};

/// Minibatch rows per gradient work unit. Fixed so the reduction order
/// never depends on the worker count.
const GRAD_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub mean: Vec<f64>,
    pub scale: f64,
    /// Std of a per-item offset shared by every coordinate (a brightness
    /// shift along 𝟙).
    #[serde(default)]
    pub offset_std: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub class_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub components: Vec<Component>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDatasetSpec {
    pub dim: usize,
    pub classes: Vec<ClassSpec>,
    pub n_per_class: usize,
    pub seed: u64,
}

pub const DARK: usize = 1;
pub const MID: usize = 2;
pub const LIGHT: usize = 3;

impl ToyDatasetSpec {
    /// The default dataset: `three_class(16, 0.2, 0.6, 4096)`. The per-item
    /// brightness offset is what makes the leaked terminal signal matter;
    /// without it the class label alone pins the mean.
    pub fn toy_default() -> ToyDatasetSpec {
        ToyDatasetSpec::three_class(16, 0.2, 0.6, 4096)
    }

    /// Classes "dark", "mid" and "light" with means −0.7·𝟙, 0 and +0.7·𝟙.
    pub fn three_class(
        dim: usize,
        scale: f64,
        offset_std: f64,
        n_per_class: usize,
    ) -> ToyDatasetSpec {
        let class = |id: usize, name: &str, m: f64| ClassSpec {
            class_id: id,
            name: Some(name.into()),
            components: vec![Component {
                mean: vec![m; dim],
                scale,
                offset_std,
                weight: 1.0,
            }],
        };
        ToyDatasetSpec {
            dim,
            classes: vec![
                class(DARK, "dark", -0.7),
                class(MID, "mid", 0.0),
                class(LIGHT, "light", 0.7),
            ],
            n_per_class,
            seed: 0,
        }
    }

    /// Largest class id + 1, i.e. the class-embedding table size needed.
    pub fn class_count(&self) -> usize {
        self.classes.iter().map(|c| c.class_id).max().unwrap_or(0) + 1
    }

    pub fn class_by_name(&self, name: &str) -> Option<usize> {
        self.classes
            .iter()
            .find(|c| c.name.as_deref() == Some(name))
            .map(|c| c.class_id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_per_class == 0 || self.classes.is_empty() {
            return invalid("dataset needs dim >= 1, n_per_class >= 1 and at least one class");
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.classes {
            if c.class_id == NULL_CLASS {
                return invalid("class id 0 is reserved for the null condition");
            }
            if !seen.insert(c.class_id) {
                return invalid(format!("duplicate class id {}", c.class_id));
            }
            if c.components.is_empty() {
                return invalid(format!("class {} has no components", c.class_id));
            }
            let total: f64 = c.components.iter().map(|k| k.weight).sum();
            if (total - 1.0).abs() > 1e-12 {
                return invalid(format!(
                    "class {} component weights sum to {total}, not 1",
                    c.class_id
                ));
            }
            for k in &c.components {
                if k.mean.len() != self.dim {
                    return invalid(format!(
                        "class {} component mean has wrong dimension",
                        c.class_id
                    ));
                }
                if !(k.weight > 0.0)
                    || !(k.scale >= 0.0)
                    || !(k.offset_std >= 0.0)
                    || k.mean.iter().any(|v| !v.is_finite())
                {
                    return invalid(format!("class {} has an invalid component", c.class_id));
                }
            }
        }
        Ok(())
    }
}

/// Draws `n_per_class` points per class: a component by weight, then
/// `mean + offset_std·b·𝟙 + scale·N(0, I)` with `b ~ N(0, 1)`. Item `i`
/// uses its own generator.
pub fn generate_dataset(spec: &ToyDatasetSpec) -> Result<Batch> {
    spec.validate()?;
    let n = spec.n_per_class;
    let total = n * spec.classes.len();
    let mut values = Array2::zeros((total, spec.dim));
    let mut ids = Vec::with_capacity(total);
    for (k, class) in spec.classes.iter().enumerate() {
        for i in 0..n {
            let row_idx = k * n + i;
            let mut r = rng::item_rng(spec.seed, stream::DATASET, row_idx as u64);
            let u: f64 = r.random();
            let mut acc = 0.0;
            let mut comp = &class.components[class.components.len() - 1];
            for c in &class.components {
                acc += c.weight;
                if u < acc {
                    comp = c;
                    break;
                }
            }
            let shift = comp.offset_std * rng::standard_normal(&mut r);
            let mut row = values.row_mut(row_idx);
            for (j, v) in row.iter_mut().enumerate() {
                *v = comp.mean[j] + shift + comp.scale * rng::standard_normal(&mut r);
            }
            ids.push(class.class_id);
        }
    }
    Batch::new(values, ids)
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·noise`.
pub fn forward_sample(x0: &[f64], t: usize, sched: &Schedule, noise: &[f64]) -> Result<Vec<f64>> {
    check_same_len(x0, noise, "forward_sample")?;
    let ab = sched.alpha_bar(t)?;
    if t == 0 {
        return invalid("forward_sample needs t >= 1");
    }
    Ok(forward_mix(x0, ab, noise))
}

fn forward_mix(x0: &[f64], ab: f64, noise: &[f64]) -> Vec<f64> {
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.iter().zip(noise).map(|(x, z)| a * x + b * z).collect()
}

/// Offset noise: iid N(0,1) plus one shared `√strength·N(0,1)` per group of
/// `dim/groups` consecutive coordinates.
pub fn offset_noise_with(
    r: &mut Rng,
    dim: usize,
    groups: usize,
    strength: f64,
) -> Result<Vec<f64>> {
    if groups == 0 || !dim.is_multiple_of(groups) {
        return invalid(format!(
            "offset noise groups ({groups}) must divide dim ({dim})"
        ));
    }
    if !(strength >= 0.0) {
        return invalid("offset noise strength must be >= 0");
    }
    let mut z = rng::normal_vec(r, dim);
    let size = dim / groups;
    let amp = strength.sqrt();
    for g in 0..groups {
        let w = amp * rng::standard_normal(r);
        for v in &mut z[g * size..(g + 1) * size] {
            *v += w;
        }
    }
    Ok(z)
}

pub fn offset_noise_sample(
    dim: usize,
    groups: usize,
    strength: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut r = rng::item_rng(seed, stream::OFFSET_NOISE, 0);
    offset_noise_with(&mut r, dim, groups, strength)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub pred_type: PredKind,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    pub cond_dropout_p: f64,
    /// Offset-noise strength, or `None` for plain Gaussian noise.
    pub offset_noise: Option<f64>,
    pub offset_groups: usize,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
}

/// Learning-rate schedule over the training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero at the last iteration.
    #[default]
    Cosine,
}

impl LrSchedule {
    pub fn rate(self, base: f64, iteration: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let frac = iteration as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

impl TrainConfig {
    pub fn new(pred_type: PredKind, schedule: Schedule) -> TrainConfig {
        TrainConfig {
            pred_type,
            schedule,
            batch_size: 128,
            learning_rate: 1e-3,
            iterations: 8000,
            cond_dropout_p: 0.1,
            offset_noise: None,
            offset_groups: 1,
            lr_schedule: LrSchedule::Cosine,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return invalid("iterations and batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return invalid("learning_rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.cond_dropout_p) {
            return invalid("cond_dropout_p must lie in [0, 1)");
        }
        if self.pred_type == PredKind::Epsilon && self.schedule.is_zero_terminal() {
            return invalid(
                "epsilon-prediction on a zero-terminal-SNR schedule is singular: \
                 x0 = (x_t - sqrt(1 - abar_T) eps) / sqrt(abar_T) divides by zero at t = T; \
                 train with v-prediction instead",
            );
        }
        if let Some(s) = self.offset_noise {
            if !(s >= 0.0) {
                return invalid("offset noise strength must be >= 0");
            }
        }
        Ok(())
    }
}

/// A trained base denoiser θ, frozen after training.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    pub net: DenseNet,
    pub pred_type: PredKind,
    pub schedule: Schedule,
    pub loss_history: Vec<f64>,
}

impl DenoiserModel {
    pub fn dim(&self) -> usize {
        self.net.data_dim()
    }

    /// Raw network output for rows of `x` at timestep `t` under `class_id`.
    pub fn predict(&self, x: ArrayView2<f64>, t: usize, class_id: usize) -> Result<Array2<f64>> {
        let big_t = self.schedule.num_steps();
        if t == 0 || t > big_t {
            return invalid(format!("timestep {t} outside 1..={big_t}"));
        }
        let n = x.nrows();
        let tn = vec![t as f64 / big_t as f64; n];
        self.net.forward_batch(x, &tn, &vec![class_id; n])
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            CheckpointKind::Denoiser,
            self.pred_type,
            &self.net,
            &self.schedule,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<DenoiserModel> {
        ck.expect_kind(CheckpointKind::Denoiser)?;
        Ok(DenoiserModel {
            net: DenseNet::from_parts(ck.arch.clone(), &ck.weights)?,
            pred_type: ck.pred_type,
            schedule: Schedule::from_json(&ck.schedule)?,
            loss_history: Vec::new(),
        })
    }
}

/// How the OMS network output is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OmsTarget {
    /// Output is `v` at SNR = 0, trained towards `−x0`.
    V,
    /// Output is `x̃0` directly; `v = −output`.
    X0,
}

/// A trained OMS module ψ.
#[derive(Debug, Clone, PartialEq)]
pub struct OmsModule {
    pub net: DenseNet,
    pub target: OmsTarget,
    /// Schedule of the pre-trained model this module feeds.
    pub schedule: Schedule,
    pub loss_history: Vec<f64>,
}

impl OmsModule {
    pub fn dim(&self) -> usize {
        self.net.data_dim()
    }

    /// v-prediction at SNR = 0 for rows of pure-noise input.
    pub fn predict_v(&self, x: ArrayView2<f64>, class_id: usize) -> Result<Array2<f64>> {
        let n = x.nrows();
        let out = self
            .net
            .forward_batch(x, &vec![1.0; n], &vec![class_id; n])?;
        Ok(match self.target {
            OmsTarget::V => out,
            OmsTarget::X0 => -out,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let pred = match self.target {
            OmsTarget::V => PredKind::V,
            OmsTarget::X0 => PredKind::X0,
        };
        Checkpoint::new(CheckpointKind::Oms, pred, &self.net, &self.schedule)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<OmsModule> {
        ck.expect_kind(CheckpointKind::Oms)?;
        let target = match ck.pred_type {
            PredKind::V => OmsTarget::V,
            PredKind::X0 => OmsTarget::X0,
            PredKind::Epsilon => {
                return invalid("an OMS checkpoint cannot be epsilon-parameterised")
            }
        };
        Ok(OmsModule {
            net: DenseNet::from_parts(ck.arch.clone(), &ck.weights)?,
            target,
            schedule: Schedule::from_json(&ck.schedule)?,
            loss_history: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Denoiser,
    Oms,
}

/// On-disk model format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub pred_type: PredKind,
    pub arch: NetArch,
    pub schedule: ScheduleJson,
    pub weights: WeightsJson,
}

impl Checkpoint {
    fn new(
        kind: CheckpointKind,
        pred_type: PredKind,
        net: &DenseNet,
        schedule: &Schedule,
    ) -> Checkpoint {
        Checkpoint {
            format_version: 1,
            kind,
            pred_type,
            arch: net.arch().clone(),
            schedule: schedule.to_json(),
            weights: net.to_weights_json(),
        }
    }

    fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.format_version != 1 {
            return Err(Error::Parse(format!(
                "unsupported checkpoint format_version {}",
                self.format_version
            )));
        }
        if self.kind != kind {
            return invalid(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.kind
            ));
        }
        Ok(())
    }
}

struct Minibatch {
    inputs: Array2<f64>,
    t_norm: Vec<f64>,
    classes: Vec<usize>,
    targets: Array2<f64>,
}

/// Mean squared error and its gradient over a minibatch, evaluated in fixed
/// chunks and reduced in chunk order.
fn mse_step(net: &DenseNet, mb: &Minibatch) -> Result<(f64, Grads)> {
    let n = mb.inputs.nrows();
    let d = mb.inputs.ncols();
    let norm = 1.0 / (n * d) as f64;
    let ranges = par::chunk_ranges(n, GRAD_CHUNK);
    let parts = par::map_indexed(ranges.len(), |k| {
        let r = ranges[k].clone();
        let x = mb.inputs.slice(ndarray::s![r.clone(), ..]);
        let target = mb.targets.slice(ndarray::s![r.clone(), ..]);
        let mut sse = 0.0;
        let res = net.forward_backward_batch(x, &mb.t_norm[r.clone()], &mb.classes[r], |out| {
            let diff = out - &target;
            sse = diff.iter().map(|v| v * v).sum();
            diff * (2.0 * norm)
        });
        res.map(|(_, g)| (sse, g))
    });
    let mut total = Grads::zeros_like(net);
    let mut sse = 0.0;
    for part in parts {
        let (s, g) = part?;
        sse += s;
        total.add_assign(&g);
    }
    Ok((sse * norm, total))
}

fn check_data(data: &Batch, net: &DenseNet) -> Result<()> {
    if data.is_empty() {
        return invalid("training data is empty");
    }
    if net.data_dim() != data.dim() {
        return invalid(format!(
            "network dimension {} does not match data dimension {}",
            net.data_dim(),
            data.dim()
        ));
    }
    if let Some(&c) = data
        .class_ids()
        .iter()
        .find(|&&c| c >= net.arch().class_count)
    {
        return invalid(format!("data class id {c} exceeds the network class table"));
    }
    Ok(())
}

fn draw_condition(r: &mut Rng, class_id: usize, dropout: f64) -> usize {
    let u: f64 = r.random();
    if u < dropout {
        NULL_CLASS
    } else {
        class_id
    }
}

/// Trains the base denoiser θ on MSE against ε, v or x0 targets.
pub fn train_denoiser(
    data: &Batch,
    mut net: DenseNet,
    config: &TrainConfig,
) -> Result<DenoiserModel> {
    config.validate()?;
    check_data(data, &net)?;
    let sched = &config.schedule;
    let big_t = sched.num_steps();
    let (b, d) = (config.batch_size, data.dim());
    let mut master = rng::item_rng(config.seed, stream::TRAIN, 0);
    let mut adam = AdamState::for_net(&mut net, config.learning_rate);
    let mut history = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        adam.learning_rate = config
            .lr_schedule
            .rate(config.learning_rate, it, config.iterations);
        let mut mb = Minibatch {
            inputs: Array2::zeros((b, d)),
            t_norm: Vec::with_capacity(b),
            classes: Vec::with_capacity(b),
            targets: Array2::zeros((b, d)),
        };
        for i in 0..b {
            let idx = master.random_range(0..data.len());
            let x0 = data.row(idx).to_vec();
            let c = draw_condition(&mut master, data.class_ids()[idx], config.cond_dropout_p);
            let t = master.random_range(1..=big_t);
            let noise = match config.offset_noise {
                Some(s) => offset_noise_with(&mut master, d, config.offset_groups, s)?,
                None => rng::normal_vec(&mut master, d),
            };
            let ab = sched.alpha_bar(t)?;
            let xt = forward_mix(&x0, ab, &noise);
            let target = match config.pred_type {
                PredKind::Epsilon => noise,
                PredKind::V => param::v_from_x0_eps(&x0, &noise, ab)?,
                PredKind::X0 => x0,
            };
            mb.inputs.row_mut(i).assign(&ndarray::ArrayView1::from(&xt));
            mb.targets
                .row_mut(i)
                .assign(&ndarray::ArrayView1::from(&target));
            mb.t_norm.push(t as f64 / big_t as f64);
            mb.classes.push(c);
        }
        let (loss, grads) = mse_step(&net, &mb)?;
        step_net(&mut net, &grads, &mut adam)?;
        history.push(loss);
    }
    if !net.all_finite() {
        return invalid("training diverged: non-finite parameters");
    }
    Ok(DenoiserModel {
        net,
        pred_type: config.pred_type,
        schedule: config.schedule.clone(),
        loss_history: history,
    })
}

/// Trains ψ: pure-noise input independent of x0, target `−x0` (v mode) or
/// `x0` (x0 mode), conditioned on the class with null-condition dropout.
pub fn train_oms(
    data: &Batch,
    mut net: DenseNet,
    config: &TrainConfig,
    target: OmsTarget,
) -> Result<OmsModule> {
    config.validate()?;
    if config.pred_type == PredKind::Epsilon {
        return invalid(
            "the OMS module predicts at SNR = 0 where epsilon-prediction is singular; use v",
        );
    }
    check_data(data, &net)?;
    let (b, d) = (config.batch_size, data.dim());
    let sign = match target {
        OmsTarget::V => -1.0,
        OmsTarget::X0 => 1.0,
    };
    let mut master = rng::item_rng(config.seed, stream::TRAIN, 1);
    let mut adam = AdamState::for_net(&mut net, config.learning_rate);
    let mut history = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        adam.learning_rate = config
            .lr_schedule
            .rate(config.learning_rate, it, config.iterations);
        let mut mb = Minibatch {
            inputs: Array2::zeros((b, d)),
            t_norm: vec![1.0; b],
            classes: Vec::with_capacity(b),
            targets: Array2::zeros((b, d)),
        };
        for i in 0..b {
            let idx = master.random_range(0..data.len());
            let c = draw_condition(&mut master, data.class_ids()[idx], config.cond_dropout_p);
            let mut row = mb.inputs.row_mut(i);
            rng::fill_standard_normal(&mut master, row.as_slice_mut().expect("contiguous row"));
            mb.targets.row_mut(i).assign(&(&data.row(idx) * sign));
            mb.classes.push(c);
        }
        let (loss, grads) = mse_step(&net, &mb)?;
        step_net(&mut net, &grads, &mut adam)?;
        history.push(loss);
    }
    if !net.all_finite() {
        return invalid("training diverged: non-finite parameters");
    }
    Ok(OmsModule {
        net,
        target,
        schedule: config.schedule.clone(),
        loss_history: history,
    })
}

/// Per class, `−(mean of x0 over that class)`: the Bayes-optimal OMS
/// output when the input carries no information about x0.
pub fn oracle_oms(data: &Batch) -> Result<BTreeMap<usize, Vec<f64>>> {
    if data.is_empty() {
        return invalid("oracle_oms needs at least one sample");
    }
    let mut out = BTreeMap::new();
    for (c, idx) in data.indices_by_class() {
        if idx.is_empty() {
            return invalid(format!("class {c} has no samples"));
        }
        let mean = data
            .select(&idx)
            .values()
            .mean_axis(Axis(0))
            .expect("non-empty class");
        out.insert(c, mean.iter().map(|v| -v).collect());
    }
    Ok(out)
}

/// Oracle ψ as a lookup table; the null condition maps to −(global mean).
#[derive(Debug, Clone, PartialEq)]
pub struct OracleOms {
    pub table: BTreeMap<usize, Vec<f64>>,
    dim: usize,
}

impl OracleOms {
    pub fn from_data(data: &Batch) -> Result<OracleOms> {
        let mut table = oracle_oms(data)?;
        let global = data.values().mean_axis(Axis(0)).expect("non-empty data");
        table
            .entry(NULL_CLASS)
            .or_insert_with(|| global.iter().map(|v| -v).collect());
        Ok(OracleOms {
            table,
            dim: data.dim(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn predict_v(&self, x: ArrayView2<f64>, class_id: usize) -> Result<Array2<f64>> {
        let row = self
            .table
            .get(&class_id)
            .ok_or_else(|| Error::InvalidArgument(format!("oracle has no class {class_id}")))?;
        let mut out = Array2::zeros((x.nrows(), self.dim));
        for mut r in out.outer_iter_mut() {
            r.assign(&ndarray::ArrayView1::from(row));
        }
        Ok(out)
    }
}
