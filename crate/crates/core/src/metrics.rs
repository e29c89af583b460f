//! Mean-bias diagnostics: per-sample means, histograms, 1-D Wasserstein
//! distance and the per-class bias report.

use std::io::Write;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::batch::{format_float, Batch};
use crate::error::{invalid, Result};
use crate::rng::{self, stream};

/// Arithmetic mean over the coordinates of each item.
pub fn sample_means(batch: &Batch) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return invalid("sample_means of an empty batch");
    }
    let d = batch.dim() as f64;
    Ok(batch.values().outer_iter().map(|r| r.sum() / d).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
    pub below: usize,
    pub above: usize,
}

impl Histogram {
    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.below + self.above
    }

    /// `bin_lo,bin_hi,count` rows. Overflow counts are not included.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "bin_lo,bin_hi,count")?;
        let w = self.bin_width();
        for (k, c) in self.counts.iter().enumerate() {
            let lo = self.lo + k as f64 * w;
            let hi = if k + 1 == self.counts.len() {
                self.hi
            } else {
                self.lo + (k + 1) as f64 * w
            };
            writeln!(out, "{},{},{c}", format_float(lo), format_float(hi))?;
        }
        Ok(())
    }
}

pub const DEFAULT_HIST_BINS: usize = 60;
pub const DEFAULT_HIST_RANGE: (f64, f64) = (-1.0, 1.0);

/// Half-open bins over `[lo, hi]` with the last bin closed on the right.
pub fn mean_histogram(values: &[f64], bins: usize, range: (f64, f64)) -> Result<Histogram> {
    let (lo, hi) = range;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return invalid(format!(
            "histogram range must satisfy lo < hi, got [{lo}, {hi}]"
        ));
    }
    if bins == 0 {
        return invalid("histogram needs at least one bin");
    }
    let mut h = Histogram {
        lo,
        hi,
        counts: vec![0; bins],
        below: 0,
        above: 0,
    };
    let w = (hi - lo) / bins as f64;
    for &v in values {
        if v < lo || v.is_nan() {
            h.below += 1;
        } else if v > hi {
            h.above += 1;
        } else {
            let k = (((v - lo) / w) as usize).min(bins - 1);
            h.counts[k] += 1;
        }
    }
    Ok(h)
}

/// Exact 1-D Wasserstein-1 distance between two equal-length samples.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || a.len() != b.len() {
        return invalid(format!(
            "wasserstein1 needs equal non-empty lengths, got {} and {}",
            a.len(),
            b.len()
        ));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let sum: f64 = sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum();
    Ok(sum / a.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBias {
    pub class_id: usize,
    pub data_mean: f64,
    pub generated_mean: f64,
    pub abs_error: f64,
    pub wasserstein_means: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub per_class: Vec<ClassBias>,
    pub global_wasserstein: f64,
    pub n_generated: usize,
    pub n_data: usize,
    pub config_digest: String,
}

impl BiasReport {
    pub fn class(&self, class_id: usize) -> Option<&ClassBias> {
        self.per_class.iter().find(|c| c.class_id == class_id)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn grand_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Trims the longer list to the shorter length by a seeded choice without
/// replacement, keeping the original order.
fn equalize(a: &[f64], b: &[f64], seed: u64, index_: u64) -> (Vec<f64>, Vec<f64>) {
    let n = a.len().min(b.len());
    let pick = |v: &[f64], which: u64| -> Vec<f64> {
        if v.len() == n {
            return v.to_vec();
        }
        let mut r = rng::item_rng(seed, stream::SUBSAMPLE, 2 * index_ + which);
        let mut idx = index::sample(&mut r, v.len(), n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| v[i]).collect()
    };
    (pick(a, 0), pick(b, 1))
}

/// Per-class grand-mean error and Wasserstein-1 between per-sample-mean
/// lists, plus a pooled Wasserstein over every generated class. Data
/// classes absent from `generated` are ignored.
pub fn bias_report(
    generated: &Batch,
    data: &Batch,
    config_digest: &str,
    seed: u64,
) -> Result<BiasReport> {
    let gen_means = sample_means(generated)?;
    let data_means = sample_means(data)?;
    let gen_groups = generated.indices_by_class();
    let data_groups = data.indices_by_class();
    let mut per_class = Vec::new();
    let mut pooled_gen = Vec::new();
    let mut pooled_data = Vec::new();
    for (&class_id, gi) in &gen_groups {
        let Some(di) = data_groups.get(&class_id) else {
            return invalid(format!(
                "class {class_id} is generated but absent from the data"
            ));
        };
        let g: Vec<f64> = gi.iter().map(|&i| gen_means[i]).collect();
        let d: Vec<f64> = di.iter().map(|&i| data_means[i]).collect();
        let (gs, ds) = equalize(&g, &d, seed, class_id as u64 + 1);
        let data_mean = grand_mean(&d);
        let generated_mean = grand_mean(&g);
        per_class.push(ClassBias {
            class_id,
            data_mean,
            generated_mean,
            abs_error: (generated_mean - data_mean).abs(),
            wasserstein_means: wasserstein1(&gs, &ds)?,
        });
        pooled_gen.extend(g);
        pooled_data.extend(d);
    }
    let (gs, ds) = equalize(&pooled_gen, &pooled_data, seed, 0);
    Ok(BiasReport {
        per_class,
        global_wasserstein: wasserstein1(&gs, &ds)?,
        n_generated: generated.len(),
        n_data: data.len(),
        config_digest: config_digest.to_string(),
    })
}
