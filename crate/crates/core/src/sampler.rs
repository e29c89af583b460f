//! Reverse-process samplers: ancestral DDPM, DDIM, the v-prediction
//! terminal step, the OMS step, classifier-free guidance, and the full
//! sampling pipeline with an optional OMS stage in front of the DDIM loop.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::batch::{Batch, NULL_CLASS};
use crate::diffusion::{DenoiserModel, OmsModule, OracleOms};
use crate::error::{check_same_len, invalid, Error, Result};
use crate::par;
use crate::param::{self, PredKind, Prediction};
use crate::rng::{self, stream, Rng};
use crate::schedule::Schedule;

/// Chains per work unit. Fixed so output never depends on worker count.
const CHAIN_CHUNK: usize = 64;

/// A frozen base model θ.
pub trait Denoiser: Sync {
    fn pred_kind(&self) -> PredKind;
    fn schedule(&self) -> &Schedule;
    fn dim(&self) -> usize;
    /// Predictions for each row of `x` at timestep `t` under `class_id`.
    fn predict(&self, x: ArrayView2<f64>, t: usize, class_id: usize) -> Result<Array2<f64>>;
}

/// A frozen OMS module ψ emitting v-predictions at SNR = 0.
pub trait OmsPredictor: Sync {
    fn dim(&self) -> usize;
    fn predict_v(&self, x: ArrayView2<f64>, class_id: usize) -> Result<Array2<f64>>;
}

impl Denoiser for DenoiserModel {
    fn pred_kind(&self) -> PredKind {
        self.pred_type
    }

    fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    fn dim(&self) -> usize {
        DenoiserModel::dim(self)
    }

    fn predict(&self, x: ArrayView2<f64>, t: usize, class_id: usize) -> Result<Array2<f64>> {
        DenoiserModel::predict(self, x, t, class_id)
    }
}

impl OmsPredictor for OmsModule {
    fn dim(&self) -> usize {
        OmsModule::dim(self)
    }

    fn predict_v(&self, x: ArrayView2<f64>, class_id: usize) -> Result<Array2<f64>> {
        OmsModule::predict_v(self, x, class_id)
    }
}

impl OmsPredictor for OracleOms {
    fn dim(&self) -> usize {
        OracleOms::dim(self)
    }

    fn predict_v(&self, x: ArrayView2<f64>, class_id: usize) -> Result<Array2<f64>> {
        OracleOms::predict_v(self, x, class_id)
    }
}

/// Exact ε-predictor for isotropic Gaussian data `N(mean·𝟙, std²·I)`:
/// `ε̂ = √(1−ᾱ)·(x − √ᾱ·m)/(ᾱ·s² + 1 − ᾱ)`. Ignores the class.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOracle {
    pub mean: f64,
    pub std: f64,
    pub dim: usize,
    pub schedule: Schedule,
}

impl GaussianOracle {
    pub fn eps(&self, x: f64, alpha_bar: f64) -> f64 {
        let var = alpha_bar * self.std * self.std + 1.0 - alpha_bar;
        (1.0 - alpha_bar).sqrt() * (x - alpha_bar.sqrt() * self.mean) / var
    }
}

impl Denoiser for GaussianOracle {
    fn pred_kind(&self) -> PredKind {
        PredKind::Epsilon
    }

    fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, x: ArrayView2<f64>, t: usize, _class_id: usize) -> Result<Array2<f64>> {
        let ab = self.schedule.alpha_bar(t)?;
        Ok(x.mapv(|v| self.eps(v, ab)))
    }
}

/// Condition used by the OMS stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", untagged)]
pub enum OmsCondition {
    Class(usize),
    #[serde(with = "same_tag")]
    Same,
}

mod same_tag {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("same")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "same" {
            Ok(())
        } else {
            Err(serde::de::Error::custom(format!(
                "expected \"same\", got {s:?}"
            )))
        }
    }
}

impl OmsCondition {
    pub fn resolve(self, base: usize) -> usize {
        match self {
            OmsCondition::Same => base,
            OmsCondition::Class(c) => c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Strictly decreasing timesteps ending at 1.
    pub step_grid: Vec<usize>,
    pub eta: f64,
    pub omega_theta: f64,
    pub omega_psi: f64,
    pub oms_sigma: f64,
    pub base_condition: usize,
    pub oms_condition: OmsCondition,
    pub negative_condition: usize,
    pub seed: u64,
}

impl SamplerConfig {
    /// Deterministic DDIM on the default 50-step grid, guidance disabled.
    pub fn new(num_steps: usize, base_condition: usize) -> SamplerConfig {
        SamplerConfig {
            step_grid: default_grid(num_steps, 50),
            eta: 0.0,
            omega_theta: 1.0,
            omega_psi: 1.0,
            oms_sigma: 0.0,
            base_condition,
            oms_condition: OmsCondition::Same,
            negative_condition: NULL_CLASS,
            seed: 0,
        }
    }

    pub fn validate(&self, sched: &Schedule) -> Result<()> {
        let big_t = sched.num_steps();
        let g = &self.step_grid;
        if g.is_empty() || *g.last().unwrap() != 1 {
            return invalid("step grid must be non-empty and end at timestep 1");
        }
        if g.iter().any(|&t| t == 0 || t > big_t) {
            return invalid(format!("step grid entries must lie in 1..={big_t}"));
        }
        if g.windows(2).any(|w| w[0] <= w[1]) {
            return invalid("step grid must be strictly decreasing");
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return invalid("eta must lie in [0, 1]");
        }
        if !(self.omega_theta >= 0.0) || !(self.omega_psi >= 0.0) || !(self.oms_sigma >= 0.0) {
            return invalid("guidance weights and oms_sigma must be >= 0");
        }
        if self.oms_sigma * self.oms_sigma > 1.0 - sched.terminal_alpha_bar() {
            return invalid("oms_sigma^2 exceeds 1 - alpha_bar_T");
        }
        Ok(())
    }
}

/// `steps` timesteps `1, 1+k, 1+2k, …` with stride `k = T/steps`, plus T
/// itself, in decreasing order.
pub fn default_grid(num_steps: usize, steps: usize) -> Vec<usize> {
    let steps = steps.clamp(1, num_steps);
    let stride = (num_steps / steps).max(1);
    let mut grid: Vec<usize> = (0..steps).map(|k| 1 + k * stride).collect();
    grid.push(num_steps);
    grid.sort_unstable_by(|a, b| b.cmp(a));
    grid.dedup();
    grid
}

/// Every timestep `T, T−1, …, 1`.
pub fn full_grid(num_steps: usize) -> Vec<usize> {
    (1..=num_steps).rev().collect()
}

/// `uncond + ω·(cond − uncond)`.
pub fn cfg_combine(uncond: &[f64], cond: &[f64], omega: f64) -> Result<Vec<f64>> {
    check_same_len(uncond, cond, "cfg_combine")?;
    Ok(uncond
        .iter()
        .zip(cond)
        .map(|(u, c)| u + omega * (c - u))
        .collect())
}

fn cfg_rows(uncond: Array2<f64>, cond: &Array2<f64>, omega: f64) -> Array2<f64> {
    let mut out = uncond;
    ndarray::Zip::from(&mut out)
        .and(cond)
        .for_each(|u, &c| *u += omega * (c - *u));
    out
}

/// One ancestral DDPM step with an ε-prediction. The noise term is dropped
/// at `t = 1`.
pub fn ddpm_step(
    xt: &[f64],
    eps_hat: &[f64],
    t: usize,
    sched: &Schedule,
    noise: &[f64],
) -> Result<Vec<f64>> {
    check_same_len(xt, eps_hat, "ddpm_step")?;
    check_same_len(xt, noise, "ddpm_step")?;
    let ab = sched.alpha_bar(t)?;
    if t == 0 {
        return invalid("ddpm_step needs t >= 1");
    }
    if ab == 0.0 {
        return Err(Error::SingularParameterization(
            "ancestral epsilon step at alpha_bar_t = 0 divides by sqrt(alpha_t) = 0".into(),
        ));
    }
    let alpha = sched.alpha(t)?;
    let beta = sched.beta(t)?;
    let ab_prev = sched.alpha_bar(t - 1)?;
    let coef = beta / (1.0 - ab).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let sigma = if t > 1 {
        ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt()
    } else {
        0.0
    };
    Ok(xt
        .iter()
        .zip(eps_hat)
        .zip(noise)
        .map(|((x, e), z)| inv * (x - coef * e) + sigma * z)
        .collect())
}

/// DDIM σ for a jump `t → t_prev`:
/// `η·√((1−ᾱ_prev)/(1−ᾱ_t))·√(1−ᾱ_t/ᾱ_prev)`.
pub fn ddim_sigma(eta: f64, ab_t: f64, ab_prev: f64) -> f64 {
    if eta == 0.0 {
        return 0.0;
    }
    eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).max(0.0).sqrt()
}

/// One DDIM update from `t` to `t_prev` (`t_prev = 0` lands on data).
pub fn ddim_step(
    xt: &[f64],
    pred: &Prediction,
    t: usize,
    t_prev: usize,
    sched: &Schedule,
    eta: f64,
    noise: &[f64],
) -> Result<Vec<f64>> {
    check_same_len(xt, &pred.values, "ddim_step")?;
    check_same_len(xt, noise, "ddim_step")?;
    if t <= t_prev {
        return invalid(format!("ddim_step needs t > t_prev, got {t} -> {t_prev}"));
    }
    let ab_t = sched.alpha_bar(t)?;
    let ab_prev = sched.alpha_bar(t_prev)?;
    let (x0, eps) = param::x0_and_eps(xt, pred, ab_t)?;
    let sigma = ddim_sigma(eta, ab_t, ab_prev);
    let room = 1.0 - ab_prev - sigma * sigma;
    if room < -1e-12 {
        return invalid(format!(
            "ddim_step: sigma^2 = {} exceeds 1 - alpha_bar_prev = {}",
            sigma * sigma,
            1.0 - ab_prev
        ));
    }
    let (a, b) = (ab_prev.sqrt(), room.max(0.0).sqrt());
    Ok(x0
        .iter()
        .zip(&eps)
        .zip(noise)
        .map(|((x, e), z)| a * x + b * e + sigma * z)
        .collect())
}

/// Terminal ancestral step at zero SNR with a v-prediction:
/// `x_{T−1} = −√ᾱ_{T−1}·v̂ + σ_T·z`.
pub fn v_terminal_step(
    xt: &[f64],
    v_hat: &[f64],
    sched: &Schedule,
    sigma_t: f64,
    noise: &[f64],
) -> Result<Vec<f64>> {
    check_same_len(xt, v_hat, "v_terminal_step")?;
    check_same_len(xt, noise, "v_terminal_step")?;
    let ab_prev = sched.alpha_bar(sched.num_steps() - 1)?;
    let a = ab_prev.sqrt();
    Ok(v_hat
        .iter()
        .zip(noise)
        .map(|(v, z)| -a * v + sigma_t * z)
        .collect())
}

/// The OMS step: `x̃0 = −v̂`, then
/// `√ᾱ_T·x̃0 + √(1−ᾱ_T−σ²)·x_T^S + σ·z` using the pre-trained schedule.
pub fn oms_step(
    x_ts: &[f64],
    v_hat: &[f64],
    sched: &Schedule,
    sigma: f64,
    noise: &[f64],
) -> Result<Vec<f64>> {
    check_same_len(x_ts, v_hat, "oms_step")?;
    check_same_len(x_ts, noise, "oms_step")?;
    let ab = sched.terminal_alpha_bar();
    let room = 1.0 - ab - sigma * sigma;
    if room < 0.0 {
        return invalid(format!(
            "oms_step: sigma^2 = {} exceeds 1 - alpha_bar_T = {}",
            sigma * sigma,
            1.0 - ab
        ));
    }
    let (a, b) = (ab.sqrt(), room.sqrt());
    Ok(x_ts
        .iter()
        .zip(v_hat)
        .zip(noise)
        .map(|((x, v), z)| a * -v + b * x + sigma * z)
        .collect())
}

fn check_pipeline(
    denoiser: &dyn Denoiser,
    oms: Option<&dyn OmsPredictor>,
    config: &SamplerConfig,
) -> Result<()> {
    let sched = denoiser.schedule();
    config.validate(sched)?;
    if let Some(o) = oms {
        if o.dim() != denoiser.dim() {
            return invalid(format!(
                "OMS dimension {} does not match denoiser dimension {}",
                o.dim(),
                denoiser.dim()
            ));
        }
    }
    if denoiser.pred_kind() == PredKind::Epsilon
        && config
            .step_grid
            .iter()
            .any(|&t| sched.alpha_bar(t).is_ok_and(|a| a == 0.0))
    {
        return Err(Error::SingularParameterization(
            "epsilon-prediction denoiser evaluated at a zero-SNR timestep".into(),
        ));
    }
    Ok(())
}

struct ChainState {
    rngs: Vec<Rng>,
    x: Array2<f64>,
}

fn normal_rows(rngs: &mut [Rng], dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rngs.len(), dim));
    for (r, mut row) in rngs.iter_mut().zip(out.outer_iter_mut()) {
        rng::fill_standard_normal(r, row.as_slice_mut().expect("contiguous row"));
    }
    out
}

/// Draws `x_T^S` for each chain and, with an OMS module, replaces it by the
/// OMS-stage output `x̃_T^T`. The OMS noise is drawn either way so that the
/// downstream random streams are identical with and without OMS.
fn start_chains(
    range: std::ops::Range<usize>,
    dim: usize,
    sched: &Schedule,
    oms: Option<&dyn OmsPredictor>,
    config: &SamplerConfig,
) -> Result<ChainState> {
    let mut rngs: Vec<Rng> = range
        .map(|i| rng::item_rng(config.seed, stream::CHAIN, i as u64))
        .collect();
    let x_s = normal_rows(&mut rngs, dim);
    let z = normal_rows(&mut rngs, dim);
    let Some(oms) = oms else {
        return Ok(ChainState { rngs, x: x_s });
    };
    let cond_class = config.oms_condition.resolve(config.base_condition);
    let cond = oms.predict_v(x_s.view(), cond_class)?;
    let v = if config.omega_psi == 1.0 {
        cond
    } else {
        let uncond = oms.predict_v(x_s.view(), config.negative_condition)?;
        cfg_rows(uncond, &cond, config.omega_psi)
    };
    let mut x = Array2::zeros(x_s.raw_dim());
    for i in 0..x_s.nrows() {
        let row = oms_step(
            x_s.row(i).as_slice().expect("contiguous"),
            v.row(i).as_slice().expect("contiguous"),
            sched,
            config.oms_sigma,
            z.row(i).as_slice().expect("contiguous"),
        )?;
        x.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
    }
    Ok(ChainState { rngs, x })
}

fn guided_prediction(
    denoiser: &dyn Denoiser,
    x: ArrayView2<f64>,
    t: usize,
    config: &SamplerConfig,
) -> Result<Array2<f64>> {
    let cond = denoiser.predict(x, t, config.base_condition)?;
    if config.omega_theta == 1.0 {
        return Ok(cond);
    }
    let uncond = denoiser.predict(x, t, config.negative_condition)?;
    Ok(cfg_rows(uncond, &cond, config.omega_theta))
}

fn run_ddim(
    denoiser: &dyn Denoiser,
    mut state: ChainState,
    config: &SamplerConfig,
) -> Result<Array2<f64>> {
    let sched = denoiser.schedule();
    let kind = denoiser.pred_kind();
    let dim = denoiser.dim();
    let grid = &config.step_grid;
    for (k, &t) in grid.iter().enumerate() {
        let t_prev = grid.get(k + 1).copied().unwrap_or(0);
        let pred = guided_prediction(denoiser, state.x.view(), t, config)?;
        let stochastic = config.eta > 0.0 && t_prev > 0;
        let noise = if stochastic {
            normal_rows(&mut state.rngs, dim)
        } else {
            Array2::zeros((state.x.nrows(), dim))
        };
        for i in 0..state.x.nrows() {
            let p = Prediction {
                kind,
                values: pred.row(i).to_vec(),
            };
            let next = ddim_step(
                state.x.row(i).as_slice().expect("contiguous"),
                &p,
                t,
                t_prev,
                sched,
                config.eta,
                noise.row(i).as_slice().expect("contiguous"),
            )?;
            state.x.row_mut(i).assign(&ndarray::ArrayView1::from(&next));
        }
    }
    Ok(state.x)
}

fn collect_chunks(parts: Vec<Result<Array2<f64>>>, dim: usize) -> Result<Array2<f64>> {
    let parts: Vec<Array2<f64>> = parts.into_iter().collect::<Result<_>>()?;
    if parts.is_empty() {
        return Ok(Array2::zeros((0, dim)));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// The terminal latents handed to the base model: `x̃_T^T` with OMS, plain
/// `x_T^S` without. Uses the same random streams as [`sample_pipeline`].
pub fn initial_latents(
    denoiser: &dyn Denoiser,
    oms: Option<&dyn OmsPredictor>,
    n: usize,
    config: &SamplerConfig,
) -> Result<Array2<f64>> {
    check_pipeline(denoiser, oms, config)?;
    let dim = denoiser.dim();
    let ranges = par::chunk_ranges(n, CHAIN_CHUNK);
    let parts = par::map_indexed(ranges.len(), |k| {
        start_chains(ranges[k].clone(), dim, denoiser.schedule(), oms, config).map(|s| s.x)
    });
    collect_chunks(parts, dim)
}

/// DDIM sampling with an optional OMS stage. Chain `i` draws all of its
/// randomness from `(config.seed, i)`.
pub fn sample_pipeline(
    denoiser: &dyn Denoiser,
    oms: Option<&dyn OmsPredictor>,
    n: usize,
    config: &SamplerConfig,
) -> Result<Batch> {
    check_pipeline(denoiser, oms, config)?;
    let dim = denoiser.dim();
    let ranges = par::chunk_ranges(n, CHAIN_CHUNK);
    let parts = par::map_indexed(ranges.len(), |k| {
        let state = start_chains(ranges[k].clone(), dim, denoiser.schedule(), oms, config)?;
        run_ddim(denoiser, state, config)
    });
    let values = collect_chunks(parts, dim)?;
    Batch::new(values, vec![config.base_condition; n])
}

/// Ancestral DDPM over every timestep `T…1`, starting from `N(0, I)`.
pub fn sample_ddpm(denoiser: &dyn Denoiser, n: usize, class_id: usize, seed: u64) -> Result<Batch> {
    let sched = denoiser.schedule();
    if sched.is_zero_terminal() && denoiser.pred_kind() == PredKind::Epsilon {
        return Err(Error::SingularParameterization(
            "ancestral epsilon sampling on a zero-terminal schedule".into(),
        ));
    }
    let dim = denoiser.dim();
    let ranges = par::chunk_ranges(n, CHAIN_CHUNK);
    let parts = par::map_indexed(ranges.len(), |k| -> Result<Array2<f64>> {
        let mut rngs: Vec<Rng> = ranges[k]
            .clone()
            .map(|i| rng::item_rng(seed, stream::CHAIN, i as u64))
            .collect();
        let mut x = normal_rows(&mut rngs, dim);
        for t in (1..=sched.num_steps()).rev() {
            let ab = sched.alpha_bar(t)?;
            let pred = denoiser.predict(x.view(), t, class_id)?;
            let noise = if t > 1 {
                normal_rows(&mut rngs, dim)
            } else {
                Array2::zeros(x.raw_dim())
            };
            for i in 0..x.nrows() {
                let xt = x.row(i).to_vec();
                let p = Prediction {
                    kind: denoiser.pred_kind(),
                    values: pred.row(i).to_vec(),
                };
                let (_, eps) = param::x0_and_eps(&xt, &p, ab)?;
                let next = ddpm_step(
                    &xt,
                    &eps,
                    t,
                    sched,
                    noise.row(i).as_slice().expect("contiguous"),
                )?;
                x.row_mut(i).assign(&ndarray::ArrayView1::from(&next));
            }
        }
        Ok(x)
    });
    let values = collect_chunks(parts, dim)?;
    Batch::new(values, vec![class_id; n])
}
