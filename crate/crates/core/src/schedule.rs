//! Discrete variance-preserving noise schedules.
//!
//! Timesteps are 1-based: `t ∈ 1..=T`. `alpha_bar(0)` is the virtual
//! boundary value 1 used by reverse steps that land on clean data.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleKind {
    Linear { beta_start: f64, beta_end: f64 },
    Cosine { s: f64, beta_clip: f64 },
    Ldm,
    Rescaled(Box<ScheduleKind>),
}

impl ScheduleKind {
    pub fn name(&self) -> String {
        match self {
            ScheduleKind::Linear { .. } => "linear".into(),
            ScheduleKind::Cosine { .. } => "cosine".into(),
            ScheduleKind::Ldm => "ldm".into(),
            ScheduleKind::Rescaled(inner) => format!("rescaled({})", inner.name()),
        }
    }

    pub fn is_rescaled(&self) -> bool {
        matches!(self, ScheduleKind::Rescaled(_))
    }

    fn params(&self) -> Value {
        match self {
            ScheduleKind::Linear {
                beta_start,
                beta_end,
            } => json!({ "beta_start": beta_start, "beta_end": beta_end }),
            ScheduleKind::Cosine { s, beta_clip } => json!({ "s": s, "beta_clip": beta_clip }),
            ScheduleKind::Ldm => json!({}),
            ScheduleKind::Rescaled(inner) => inner.params(),
        }
    }

    fn parse(name: &str, params: &Value) -> Result<ScheduleKind> {
        let num = |key: &str| -> Result<f64> {
            params
                .get(key)
                .and_then(Value::as_f64)
                .ok_or_else(|| Error::Parse(format!("schedule params missing `{key}`")))
        };
        if let Some(inner) = name
            .strip_prefix("rescaled(")
            .and_then(|rest| rest.strip_suffix(')'))
        {
            return Ok(ScheduleKind::Rescaled(Box::new(Self::parse(
                inner, params,
            )?)));
        }
        match name {
            "linear" => Ok(ScheduleKind::Linear {
                beta_start: num("beta_start")?,
                beta_end: num("beta_end")?,
            }),
            "cosine" => Ok(ScheduleKind::Cosine {
                s: num("s")?,
                beta_clip: num("beta_clip")?,
            }),
            "ldm" => Ok(ScheduleKind::Ldm),
            other => Err(Error::Parse(format!("unknown schedule kind `{other}`"))),
        }
    }
}

/// An immutable discrete VP schedule. All arithmetic is in f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Schedule {
    /// Builds a schedule from its betas, recomputing `alphas` and the
    /// cumulative products, and checks every schedule invariant.
    pub fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Result<Schedule> {
        if betas.len() < 2 {
            return invalid(format!("schedule needs T >= 2, got {}", betas.len()));
        }
        let last = betas.len() - 1;
        for (i, &b) in betas.iter().enumerate() {
            let ok = if kind.is_rescaled() && i == last {
                b == 1.0
            } else {
                b > 0.0 && b < 1.0
            };
            if !ok || !b.is_finite() {
                return invalid(format!("beta_{} = {b} outside the valid range", i + 1));
            }
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        for t in 1..alpha_bars.len() {
            if alpha_bars[t] >= alpha_bars[t - 1] {
                return invalid(format!(
                    "alpha_bar not strictly decreasing at t = {}",
                    t + 1
                ));
            }
        }
        if !kind.is_rescaled() && alpha_bars[last] <= 0.0 {
            return invalid("alpha_bar_T underflowed to zero");
        }
        Ok(Schedule {
            kind,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn kind(&self) -> &ScheduleKind {
        &self.kind
    }

    pub fn name(&self) -> String {
        self.kind.name()
    }

    /// T, the number of diffusion steps.
    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return invalid(format!("timestep {t} outside 1..={}", self.num_steps()));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alphas[t - 1])
    }

    /// ᾱ_t for `t ∈ 0..=T`, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_t(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    pub fn terminal_alpha_bar(&self) -> f64 {
        self.alpha_bars[self.num_steps() - 1]
    }

    pub fn is_zero_terminal(&self) -> bool {
        self.terminal_alpha_bar() == 0.0
    }

    pub fn snr(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return invalid("snr needs 1 <= t <= T");
        }
        Ok(snr_of(self.alpha_bar(t)?))
    }

    pub fn terminal_snr(&self) -> f64 {
        snr_of(self.terminal_alpha_bar())
    }

    pub fn to_json(&self) -> ScheduleJson {
        ScheduleJson {
            kind: self.kind.name(),
            num_steps: self.num_steps(),
            params: self.kind.params(),
            betas: self.betas.clone(),
        }
    }

    pub fn from_json(doc: &ScheduleJson) -> Result<Schedule> {
        if doc.betas.len() != doc.num_steps {
            return invalid(format!(
                "schedule T = {} but {} betas given",
                doc.num_steps,
                doc.betas.len()
            ));
        }
        let kind = ScheduleKind::parse(&doc.kind, &doc.params)?;
        Schedule::from_betas(kind, doc.betas.clone())
    }
}

/// On-disk form of a schedule. Only betas are stored; everything else is
/// recomputed and re-validated on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleJson {
    pub kind: String,
    #[serde(rename = "T")]
    pub num_steps: usize,
    pub params: Value,
    pub betas: Vec<f64>,
}

/// ᾱ/(1−ᾱ), exactly 0 when ᾱ = 0.
pub fn snr_of(alpha_bar: f64) -> f64 {
    if alpha_bar == 0.0 {
        0.0
    } else {
        alpha_bar / (1.0 - alpha_bar)
    }
}

/// Scaled-linear schedule used by latent diffusion:
/// `β_t = (√0.00085·(T−t)/(T−1) + √0.012·(t−1)/(T−1))²`.
pub fn build_ldm_schedule(num_steps: usize) -> Result<Schedule> {
    if num_steps < 2 {
        return invalid(format!("ldm schedule needs T >= 2, got {num_steps}"));
    }
    let (lo, hi) = (0.00085_f64.sqrt(), 0.012_f64.sqrt());
    let denom = (num_steps - 1) as f64;
    let betas = (1..=num_steps)
        .map(|t| {
            let b = lo * (num_steps - t) as f64 / denom + hi * (t - 1) as f64 / denom;
            b * b
        })
        .collect();
    Schedule::from_betas(ScheduleKind::Ldm, betas)
}

pub fn build_linear_schedule(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Schedule> {
    if num_steps < 2 {
        return invalid(format!("linear schedule needs T >= 2, got {num_steps}"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return invalid(format!(
            "linear schedule needs 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        ));
    }
    let denom = (num_steps - 1) as f64;
    let betas = (0..num_steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / denom)
        .collect();
    Schedule::from_betas(
        ScheduleKind::Linear {
            beta_start,
            beta_end,
        },
        betas,
    )
}

pub fn build_cosine_schedule(num_steps: usize, s: f64, beta_clip: f64) -> Result<Schedule> {
    if num_steps < 2 {
        return invalid(format!("cosine schedule needs T >= 2, got {num_steps}"));
    }
    if !(s > 0.0) || !(beta_clip > 0.0 && beta_clip < 1.0) {
        return invalid(format!(
            "cosine schedule needs s > 0 and 0 < beta_clip < 1, got {s}, {beta_clip}"
        ));
    }
    let big_t = num_steps as f64;
    let f = |u: f64| {
        let c = ((u / big_t + s) / (1.0 + s) * FRAC_PI_2).cos();
        c * c
    };
    let betas = (1..=num_steps)
        .map(|t| {
            let b = 1.0 - f(t as f64) / f((t - 1) as f64);
            b.min(beta_clip)
        })
        .collect();
    Schedule::from_betas(ScheduleKind::Cosine { s, beta_clip }, betas)
}

/// Shift-and-scale `√ᾱ` so that ᾱ_T = 0 while ᾱ_1 is kept.
pub fn rescale_zero_terminal(sched: &Schedule) -> Result<Schedule> {
    if sched.is_zero_terminal() {
        return invalid("schedule already has zero terminal SNR; refusing to rescale twice");
    }
    let roots: Vec<f64> = sched.alpha_bars.iter().map(|a| a.sqrt()).collect();
    let first = roots[0];
    let last = roots[roots.len() - 1];
    let scale = first / (first - last);
    let mut rescaled: Vec<f64> = roots
        .iter()
        .map(|u| {
            let v = (u - last) * scale;
            v * v
        })
        .collect();
    rescaled[0] = sched.alpha_bars[0];
    let n = rescaled.len();
    rescaled[n - 1] = 0.0;

    let mut betas = Vec::with_capacity(n);
    let mut prev = 1.0;
    for &ab in &rescaled {
        betas.push(1.0 - ab / prev);
        prev = ab;
    }
    Schedule::from_betas(ScheduleKind::Rescaled(Box::new(sched.kind.clone())), betas)
}

/// Closed-form `KL(N(√ᾱ_T·x0, (1−ᾱ_T)I) ‖ N(0, I))` in nats.
pub fn terminal_kl(sched: &Schedule, x0: &[f64]) -> Result<f64> {
    gaussian_terminal_kl(sched.terminal_alpha_bar(), x0)
}

pub fn gaussian_terminal_kl(alpha_bar: f64, x0: &[f64]) -> Result<f64> {
    if x0.is_empty() {
        return invalid("terminal_kl needs d >= 1");
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return invalid("terminal_kl: x0 must be finite");
    }
    if !(0.0..1.0).contains(&alpha_bar) {
        return invalid(format!(
            "terminal_kl: degenerate kernel with alpha_bar_T = {alpha_bar}"
        ));
    }
    let d = x0.len() as f64;
    let norm_sq: f64 = x0.iter().map(|v| v * v).sum();
    // (1-ā) - 1 - ln(1-ā) == -ā - ln1p(-ā)
    let per_dim = -alpha_bar - (-alpha_bar).ln_1p();
    Ok((0.5 * (d * per_dim + alpha_bar * norm_sq)).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_builders(t: usize) -> Vec<Schedule> {
        vec![
            build_ldm_schedule(t).unwrap(),
            build_linear_schedule(t, 1e-4, 0.02).unwrap(),
            build_cosine_schedule(t, 0.008, 0.999).unwrap(),
        ]
    }

    #[test]
    fn ldm_constants_at_t1000() {
        let s = build_ldm_schedule(1000).unwrap();
        let snr = s.snr(1000).unwrap();
        assert!((snr / 0.004682 - 1.0).abs() < 1e-3, "snr {snr}");
        let ab = s.terminal_alpha_bar();
        assert!((ab.sqrt() - 0.068265).abs() < 5e-6);
        assert!(((1.0 - ab).sqrt() - 0.997667).abs() < 5e-6);
    }

    #[test]
    fn two_step_endpoints() {
        let s = build_ldm_schedule(2).unwrap();
        assert!((s.betas()[0] - 0.00085).abs() < 1e-15);
        assert!((s.betas()[1] - 0.012).abs() < 1e-15);
        let l = build_linear_schedule(2, 1e-4, 0.02).unwrap();
        assert_eq!(l.betas(), &[1e-4, 0.02]);
        let l3 = build_linear_schedule(3, 1e-4, 0.02).unwrap();
        assert!((l3.betas()[1] - 0.01005).abs() < 1e-15);
    }

    #[test]
    fn builders_reject_bad_arguments() {
        assert!(build_ldm_schedule(1).is_err());
        assert!(build_linear_schedule(10, 0.02, 1e-4).is_err());
        assert!(build_linear_schedule(10, 0.0, 0.02).is_err());
        assert!(build_linear_schedule(1, 1e-4, 0.02).is_err());
        assert!(build_cosine_schedule(10, 0.0, 0.999).is_err());
        assert!(build_cosine_schedule(10, 0.008, 1.0).is_err());
    }

    #[test]
    fn terminal_snr_ordering() {
        let [ldm, lin, cos]: [Schedule; 3] = all_builders(1000).try_into().unwrap();
        assert!(cos.terminal_snr() < lin.terminal_snr());
        assert!(lin.terminal_snr() < ldm.terminal_snr());
        assert!((lin.terminal_snr() / 4.036e-5 - 1.0).abs() < 1e-3);
        let ratio = cos.terminal_snr() / 2.428e-9;
        assert!(
            (0.5..=2.0).contains(&ratio),
            "cosine snr {}",
            cos.terminal_snr()
        );
    }

    #[test]
    fn builder_invariants_hold_for_many_lengths() {
        for t in [2, 10, 100, 1000] {
            for s in all_builders(t) {
                let ab = s.alpha_bars();
                for i in 1..t {
                    assert!(ab[i] < ab[i - 1]);
                    assert!(s.snr(i + 1).unwrap() < s.snr(i).unwrap());
                }
                for (&b, &a) in s.betas().iter().zip(s.alphas()) {
                    assert_eq!(a, 1.0 - b);
                    assert!(b > 0.0 && b < 1.0);
                    if let ScheduleKind::Cosine { beta_clip, .. } = s.kind() {
                        assert!(b <= *beta_clip);
                    }
                }
                let mut acc = 1.0;
                for (i, b) in s.betas().iter().enumerate() {
                    acc *= 1.0 - b;
                    assert!(((acc - ab[i]) / ab[i]).abs() <= 1e-15);
                }
            }
        }
    }

    #[test]
    fn snr_edge_values() {
        assert_eq!(snr_of(0.5), 1.0);
        assert_eq!(snr_of(0.0), 0.0);
        let s = build_ldm_schedule(10).unwrap();
        assert!(s.snr(0).is_err());
        assert!(s.snr(11).is_err());
    }

    #[test]
    fn rescale_reaches_zero_and_keeps_first_step() {
        let base = build_ldm_schedule(1000).unwrap();
        let r = rescale_zero_terminal(&base).unwrap();
        assert_eq!(r.terminal_alpha_bar(), 0.0);
        assert_eq!(r.terminal_alpha_bar().sqrt(), 0.0);
        assert_eq!(r.betas()[999], 1.0);
        assert_eq!(r.snr(1000).unwrap(), 0.0);
        assert!((r.alpha_bars()[0] - base.alpha_bars()[0]).abs() < 1e-12);
        for t in 1..1000 {
            assert!(r.alpha_bars()[t] < r.alpha_bars()[t - 1]);
        }
        assert_eq!(r.name(), "rescaled(ldm)");
        assert!(rescale_zero_terminal(&r).is_err());
    }

    #[test]
    fn terminal_kl_cases() {
        assert_eq!(gaussian_terminal_kl(0.0, &[3.0, -1.0]).unwrap(), 0.0);
        let d = 16384;
        let ab: f64 = 0.00466;
        let zero = vec![0.0; d];
        let want = 0.5 * d as f64 * (-ab - (1.0 - ab).ln());
        let got = gaussian_terminal_kl(ab, &zero).unwrap();
        assert!((got - want).abs() < 1e-9 * want);
        assert!(gaussian_terminal_kl(1.0, &[1.0]).is_err());

        let x = vec![0.5; 8];
        let x2: Vec<f64> = x.iter().map(|v| v * 2f64.sqrt()).collect();
        let n2: f64 = x.iter().map(|v| v * v).sum();
        let diff = gaussian_terminal_kl(0.1, &x2).unwrap() - gaussian_terminal_kl(0.1, &x).unwrap();
        assert!((diff - 0.1 * n2 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip_recomputes_and_validates() {
        for s in [
            build_cosine_schedule(50, 0.008, 0.999).unwrap(),
            rescale_zero_terminal(&build_ldm_schedule(50).unwrap()).unwrap(),
        ] {
            let text = serde_json::to_string(&s.to_json()).unwrap();
            let back: ScheduleJson = serde_json::from_str(&text).unwrap();
            assert_eq!(Schedule::from_json(&back).unwrap(), s);
        }
        let mut bad = build_ldm_schedule(10).unwrap().to_json();
        bad.betas[3] = 1.5;
        assert!(Schedule::from_json(&bad).is_err());
        bad.kind = "bogus".into();
        assert!(Schedule::from_json(&bad).is_err());
    }
}
