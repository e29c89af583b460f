//! Conversions between ε-, v- and x0-predictions, and the angular view of
//! DDIM in which `√ᾱ = cos φ` and `√(1−ᾱ) = sin φ`.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{check_same_len, invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredKind {
    Epsilon,
    V,
    X0,
}

impl std::fmt::Display for PredKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PredKind::Epsilon => "epsilon",
            PredKind::V => "v",
            PredKind::X0 => "x0",
        })
    }
}

impl std::str::FromStr for PredKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epsilon" | "eps" => Ok(PredKind::Epsilon),
            "v" => Ok(PredKind::V),
            "x0" => Ok(PredKind::X0),
            other => Err(Error::Parse(format!("unknown prediction type `{other}`"))),
        }
    }
}

/// A network output tagged with its parameterisation.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub kind: PredKind,
    pub values: Vec<f64>,
}

impl Prediction {
    pub fn new(kind: PredKind, values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("prediction contains non-finite values");
        }
        Ok(Prediction { kind, values })
    }
}

fn coeffs(abar: f64) -> (f64, f64) {
    (abar.sqrt(), (1.0 - abar).max(0.0).sqrt())
}

fn combine(a: &[f64], ca: f64, b: &[f64], cb: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| ca * x + cb * y).collect()
}

/// `v = √ᾱ·ε − √(1−ᾱ)·x0`.
pub fn v_from_x0_eps(x0: &[f64], eps: &[f64], abar: f64) -> Result<Vec<f64>> {
    check_same_len(x0, eps, "v_from_x0_eps")?;
    let (c, s) = coeffs(abar);
    Ok(combine(eps, c, x0, -s))
}

/// `x0 = √ᾱ·x_t − √(1−ᾱ)·v`.
pub fn x0_from_v(xt: &[f64], v: &[f64], abar: f64) -> Result<Vec<f64>> {
    check_same_len(xt, v, "x0_from_v")?;
    let (c, s) = coeffs(abar);
    Ok(combine(xt, c, v, -s))
}

/// `x0 = (x_t − √(1−ᾱ)·ε)/√ᾱ`; undefined at ᾱ = 0.
pub fn x0_from_eps(xt: &[f64], eps: &[f64], abar: f64) -> Result<Vec<f64>> {
    check_same_len(xt, eps, "x0_from_eps")?;
    if abar <= 0.0 {
        return Err(Error::SingularParameterization(
            "x0 from an epsilon prediction divides by sqrt(alpha_bar) = 0; \
             use v- or x0-prediction at zero terminal SNR"
                .into(),
        ));
    }
    let (c, s) = coeffs(abar);
    Ok(xt.iter().zip(eps).map(|(x, e)| (x - s * e) / c).collect())
}

/// `ε = sin φ·z + cos φ·v`.
pub fn eps_from_v(zt: &[f64], v: &[f64], abar: f64) -> Result<Vec<f64>> {
    check_same_len(zt, v, "eps_from_v")?;
    let (c, s) = coeffs(abar);
    Ok(combine(zt, s, v, c))
}

/// `ε = (x_t − √ᾱ·x0)/√(1−ᾱ)`; undefined at ᾱ = 1.
pub fn eps_from_x0(xt: &[f64], x0: &[f64], abar: f64) -> Result<Vec<f64>> {
    check_same_len(xt, x0, "eps_from_x0")?;
    let (c, s) = coeffs(abar);
    if s == 0.0 {
        return Err(Error::SingularParameterization(
            "epsilon from x0 divides by sqrt(1 - alpha_bar) = 0".into(),
        ));
    }
    Ok(xt.iter().zip(x0).map(|(x, x0)| (x - c * x0) / s).collect())
}

/// Both `(x̃0, ε̂)` implied by a prediction at noise level `abar`.
pub fn x0_and_eps(xt: &[f64], pred: &Prediction, abar: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    match pred.kind {
        PredKind::Epsilon => Ok((x0_from_eps(xt, &pred.values, abar)?, pred.values.clone())),
        PredKind::V => Ok((
            x0_from_v(xt, &pred.values, abar)?,
            eps_from_v(xt, &pred.values, abar)?,
        )),
        PredKind::X0 => Ok((pred.values.clone(), eps_from_x0(xt, &pred.values, abar)?)),
    }
}

/// `φ = atan(√(1−ᾱ)/√ᾱ)`, with ᾱ = 0 mapped to exactly π/2.
pub fn phi_of(abar: f64) -> f64 {
    if abar <= 0.0 {
        return FRAC_PI_2;
    }
    let (c, s) = coeffs(abar.min(1.0));
    s.atan2(c)
}

/// Rotate `z_φ` by `delta` towards the data axis:
/// `z_{φ−δ} = cos δ·z_φ − sin δ·v̂`.
pub fn ddim_rotate(z_phi: &[f64], v_hat: &[f64], delta: f64) -> Result<Vec<f64>> {
    check_same_len(z_phi, v_hat, "ddim_rotate")?;
    Ok(combine(z_phi, delta.cos(), v_hat, -delta.sin()))
}
