//! High-dimensional Gaussian diagnostics: the concentration radius of the
//! terminal latents during training versus sampling, and Monte-Carlo checks
//! of the annulus and equator concentration bounds.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::error::{invalid, Result};
use crate::par;
use crate::rng::{self, stream};
use crate::schedule::Schedule;

/// Samples per work unit in the Monte-Carlo loops.
const MC_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiusReport {
    pub schedule_name: String,
    pub snr_terminal: f64,
    pub r_train: f64,
    pub r_sample: f64,
    pub delta_r: f64,
    pub dim: usize,
    pub n_samples: usize,
    pub seed: u64,
}

/// `σ·√d`.
pub fn gaussian_radius(sigma: f64, dim: usize) -> Result<f64> {
    if !(sigma > 0.0) || dim == 0 {
        return invalid(format!(
            "gaussian_radius needs sigma > 0 and dim >= 1, got {sigma}, {dim}"
        ));
    }
    Ok(sigma * (dim as f64).sqrt())
}

/// `√(mean ‖x‖²)` over the batch.
pub fn empirical_radius(samples: &Batch) -> Result<f64> {
    if samples.is_empty() {
        return invalid("empirical_radius of an empty batch");
    }
    let total: f64 = samples
        .values()
        .outer_iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>())
        .sum();
    Ok((total / samples.len() as f64).sqrt())
}

/// Sum over `n` samples of `g(i)`, evaluated chunk-parallel and reduced in
/// chunk order.
fn chunked_sums(n: usize, width: usize, g: impl Fn(usize, &mut [f64]) + Sync + Send) -> Vec<f64> {
    let ranges = par::chunk_ranges(n, MC_CHUNK);
    let parts = par::map_indexed(ranges.len(), |c| {
        let mut acc = vec![0.0; width];
        let mut item = vec![0.0; width];
        for i in ranges[c].clone() {
            item.iter_mut().for_each(|v| *v = 0.0);
            g(i, &mut item);
            acc.iter_mut().zip(&item).for_each(|(a, v)| *a += v);
        }
        acc
    });
    let mut total = vec![0.0; width];
    for p in parts {
        total.iter_mut().zip(&p).for_each(|(a, v)| *a += v);
    }
    total
}

/// One [`RadiusReport`] per schedule. Sample `i` draws one noise vector `z`
/// and one data row `x0` and uses them for every column: `r_sample` from
/// `‖z‖` and each schedule's `r_train` from `‖√ᾱ_T·x0 + √(1−ᾱ_T)·z‖`.
/// Sharing the draws keeps the `Δr` comparison between schedules tight.
pub fn radius_table(
    schedules: &[Schedule],
    data: &Batch,
    n: usize,
    seed: u64,
) -> Result<Vec<RadiusReport>> {
    if data.is_empty() {
        return invalid("radius_table needs at least one data point");
    }
    if n == 0 {
        return invalid("radius_table needs n >= 1");
    }
    let dim = data.dim();
    let values = data.values();
    let rows = data.len();
    let coefs: Vec<(f64, f64)> = schedules
        .iter()
        .map(|s| {
            let ab = s.terminal_alpha_bar();
            (ab.sqrt(), (1.0 - ab).sqrt())
        })
        .collect();
    let k = schedules.len();
    let sums = chunked_sums(n, k + 1, |i, acc| {
        let mut r = rng::item_rng(seed, stream::RADIUS_SAMPLE, i as u64);
        let pick = rand::Rng::random_range(&mut r, 0..rows);
        for &x0 in values.row(pick) {
            let z = rng::standard_normal(&mut r);
            acc[k] += z * z;
            for (j, &(a, b)) in coefs.iter().enumerate() {
                let v = a * x0 + b * z;
                acc[j] += v * v;
            }
        }
    });
    let r_sample = (sums[k] / n as f64).sqrt();
    Ok(schedules
        .iter()
        .enumerate()
        .map(|(j, sched)| {
            let r_train = (sums[j] / n as f64).sqrt();
            RadiusReport {
                schedule_name: sched.name(),
                snr_terminal: sched.terminal_snr(),
                r_train,
                r_sample,
                delta_r: r_sample - r_train,
                dim,
                n_samples: n,
                seed,
            }
        })
        .collect())
}

/// Closed-form training radius `√(d·(ᾱ_T·m2 + 1 − ᾱ_T))`, with `m2` the
/// per-coordinate second moment of the data.
pub fn expected_train_radius(data: &Batch, alpha_bar: f64) -> Result<f64> {
    if data.is_empty() {
        return invalid("expected_train_radius needs at least one data point");
    }
    let d = data.dim() as f64;
    let m2 = data.values().iter().map(|v| v * v).sum::<f64>() / (data.len() as f64 * d);
    Ok((d * (alpha_bar * m2 + 1.0 - alpha_bar)).sqrt())
}

pub const RADIUS_CSV_HEADER: &str = "schedule,snr_T,r_train,r_sample,delta_r,dim,n,seed";

pub fn radius_csv(reports: &[RadiusReport]) -> String {
    let mut out = String::from(RADIUS_CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.schedule_name,
            sig9(r.snr_terminal),
            sig9(r.r_train),
            sig9(r.r_sample),
            sig9(r.delta_r),
            r.dim,
            r.n_samples,
            r.seed
        ));
    }
    out
}

/// Nine significant digits, plain decimal where that stays readable.
pub fn sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-4..=8).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        format!("{v:.decimals$}")
    } else {
        format!("{v:.8e}")
    }
}

fn squared_norms(dim: usize, n: usize, seed: u64, tag: u64) -> Vec<f64> {
    let ranges = par::chunk_ranges(n, MC_CHUNK);
    par::map_indexed(ranges.len(), |c| {
        ranges[c]
            .clone()
            .map(|i| {
                let mut r = rng::item_rng(seed, tag, i as u64);
                (0..dim)
                    .map(|_| {
                        let z = rng::standard_normal(&mut r);
                        z * z
                    })
                    .sum::<f64>()
            })
            .collect::<Vec<f64>>()
    })
    .concat()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnulusCheck {
    pub c: f64,
    pub fraction_outside: f64,
    pub bound: f64,
}

/// Fraction of standard-normal samples whose norm falls outside
/// `[√(d−1) − c, √(d−1) + c]`, against the bound `(4/c²)·e^{−c²/4}`.
pub fn annulus_mass_check(dim: usize, c: f64, n: usize, seed: u64) -> Result<AnnulusCheck> {
    Ok(annulus_mass_checks(dim, &[c], n, seed)?[0])
}

/// Several widths evaluated on the same samples.
pub fn annulus_mass_checks(
    dim: usize,
    cs: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<AnnulusCheck>> {
    if dim < 2 || n < 1000 {
        return invalid(format!(
            "annulus check needs dim >= 2 and n >= 1000, got {dim}, {n}"
        ));
    }
    if cs.iter().any(|c| !(*c > 0.0)) {
        return invalid("annulus width c must be > 0");
    }
    let norms: Vec<f64> = squared_norms(dim, n, seed, stream::ANNULUS)
        .into_iter()
        .map(f64::sqrt)
        .collect();
    let centre = ((dim - 1) as f64).sqrt();
    Ok(cs
        .iter()
        .map(|&c| {
            let outside = norms.iter().filter(|&&r| (r - centre).abs() > c).count();
            AnnulusCheck {
                c,
                fraction_outside: outside as f64 / n as f64,
                bound: 4.0 / (c * c) * (-c * c / 4.0).exp(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlabCheck {
    pub c: f64,
    pub fraction_above: f64,
    pub bound: f64,
}

/// Fraction of uniform points on the unit-sphere hemisphere `x1 ≥ 0` with
/// `x1 > c/√(d−1)`, against the bound `(2/c)·e^{−c²/2}`.
pub fn hemisphere_slab_check(dim: usize, c: f64, n: usize, seed: u64) -> Result<SlabCheck> {
    Ok(hemisphere_slab_checks(dim, &[c], n, seed)?[0])
}

pub fn hemisphere_slab_checks(
    dim: usize,
    cs: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<SlabCheck>> {
    if dim < 3 || n == 0 {
        return invalid(format!(
            "hemisphere check needs dim >= 3 and n >= 1, got {dim}, {n}"
        ));
    }
    if cs.iter().any(|c| !(*c > 0.0)) {
        return invalid("slab offset c must be > 0");
    }
    // First coordinate of a normalised Gaussian, sign-flipped onto x1 >= 0.
    let ranges = par::chunk_ranges(n, MC_CHUNK);
    let heights: Vec<f64> = par::map_indexed(ranges.len(), |k| {
        ranges[k]
            .clone()
            .map(|i| {
                let mut r = rng::item_rng(seed, stream::HEMISPHERE, i as u64);
                let x1 = rng::standard_normal(&mut r);
                let rest: f64 = (1..dim)
                    .map(|_| {
                        let z = rng::standard_normal(&mut r);
                        z * z
                    })
                    .sum();
                x1.abs() / (x1 * x1 + rest).sqrt()
            })
            .collect::<Vec<f64>>()
    })
    .concat();
    let scale = ((dim - 1) as f64).sqrt();
    Ok(cs
        .iter()
        .map(|&c| {
            let above = heights.iter().filter(|&&h| h > c / scale).count();
            SlabCheck {
                c,
                fraction_above: above as f64 / n as f64,
                bound: 2.0 / c * (-c * c / 2.0).exp(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphereMeasures {
    pub area: f64,
    pub volume: f64,
}

/// Surface area `2π^{d/2}/Γ(d/2)` and volume `π^{d/2}/((d/2)·Γ(d/2))` of the
/// unit sphere in d dimensions.
pub fn unit_sphere_measures(dim: usize) -> Result<SphereMeasures> {
    if dim == 0 {
        return invalid("unit_sphere_measures needs dim >= 1");
    }
    let half = dim as f64 / 2.0;
    let lg = statrs::function::gamma::ln_gamma(half);
    let log_pi_term = half * PI.ln();
    Ok(SphereMeasures {
        area: (std::f64::consts::LN_2 + log_pi_term - lg).exp(),
        volume: (log_pi_term - half.ln() - lg).exp(),
    })
}
