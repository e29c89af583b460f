//! Command bodies. Each takes a fully resolved config, writes its artifacts
//! and a manifest, and prints a short summary.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use oms_lab::diffusion::{
    generate_dataset, train_denoiser, train_oms, Checkpoint, DenoiserModel, OmsModule,
    ToyDatasetSpec, TrainConfig,
};
use oms_lab::geometry::{radius_csv, radius_table, sig9};
use oms_lab::metrics::{bias_report, mean_histogram, sample_means, BiasReport};
use oms_lab::nn::{DenseNet, NetArch};
use oms_lab::rng::{derive_seed, stream};
use oms_lab::sampler::{default_grid, sample_pipeline, OmsCondition, OmsPredictor, SamplerConfig};
use oms_lab::schedule::gaussian_terminal_kl;
use oms_lab::{Batch, PredKind};

use crate::config::*;
use crate::manifest::{manifest_path, sha256_hex, write_atomic, Manifest};

fn read_batch(path: &Path) -> Result<Batch> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Batch::read_csv(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn write_batch(path: &Path, b: &Batch) -> Result<()> {
    let mut buf = Vec::new();
    b.write_csv(&mut buf)?;
    write_atomic(path, &buf)
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading checkpoint {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing checkpoint {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn schedule(cfg: &ScheduleCmd) -> Result<()> {
    let s = cfg.schedule.build()?;
    let ab = s.terminal_alpha_bar();
    // KL of the terminal marginal from N(0, 1) for a unit-variance scalar x0 = 1.
    let kl = gaussian_terminal_kl(ab, &[1.0])?;
    println!("schedule        {}", s.name());
    println!("T               {}", s.num_steps());
    println!("snr_T           {}", sig9(s.terminal_snr()));
    println!("sqrt_abar_T     {}", sig9(ab.sqrt()));
    println!("sqrt_1m_abar_T  {}", sig9((1.0 - ab).sqrt()));
    println!("terminal_kl     {}", sig9(kl));
    if let Some(out) = &cfg.out {
        write_json(out, &s.to_json())?;
        let mut m = Manifest::new("schedule", cfg)?;
        m.output(out)?;
        m.write_beside(out)?;
    }
    Ok(())
}

pub fn radius(cfg: &RadiusCmd) -> Result<()> {
    if cfg.schedules.is_empty() {
        return Err(usage("radius needs at least one schedule"));
    }
    let data = match (&cfg.data, cfg.synthetic) {
        (Some(path), _) => read_batch(path)?,
        (None, Some(Synthetic::ZeroMean)) => {
            if !(cfg.m2 > 0.0) || cfg.synthetic_rows == 0 {
                return Err(usage("synthetic data needs m2 > 0 and synthetic_rows >= 1"));
            }
            let spec = ToyDatasetSpec {
                dim: cfg.dim,
                classes: vec![oms_lab::diffusion::ClassSpec {
                    class_id: 1,
                    name: None,
                    components: vec![oms_lab::diffusion::Component {
                        mean: vec![0.0; cfg.dim],
                        scale: cfg.m2.sqrt(),
                        offset_std: 0.0,
                        weight: 1.0,
                    }],
                }],
                n_per_class: cfg.synthetic_rows,
                seed: cfg.seed,
            };
            generate_dataset(&spec).map_err(usage)?
        }
        (None, None) => return Err(usage("radius needs --data or --synthetic")),
    };
    let schedules = cfg
        .schedules
        .iter()
        .map(|&k| ScheduleSpec::with_kind(k, cfg.num_steps).build())
        .collect::<Result<Vec<_>>>()?;
    let rows = radius_table(&schedules, &data, cfg.n, cfg.seed).map_err(usage)?;
    let csv = radius_csv(&rows);
    print!("{csv}");
    write_atomic(&cfg.out, csv.as_bytes())?;
    let mut m = Manifest::new("radius", cfg)?;
    if let Some(p) = &cfg.data {
        m.input(p)?;
    }
    m.output(&cfg.out)?;
    m.write_beside(&cfg.out)?;
    Ok(())
}

pub fn gen_data(cfg: &GenDataCmd) -> Result<()> {
    let spec = match &cfg.spec {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut spec: ToyDatasetSpec = serde_json::from_str(&text)
                .map_err(|e| usage(format!("dataset spec {}: {e}", path.display())))?;
            spec.seed = cfg.seed;
            spec
        }
        None => {
            let mut spec =
                ToyDatasetSpec::three_class(cfg.dim, cfg.scale, cfg.offset_std, cfg.n_per_class);
            spec.seed = cfg.seed;
            spec
        }
    };
    let data = generate_dataset(&spec).map_err(usage)?;
    write_batch(&cfg.out, &data)?;
    let mut m = Manifest::new("gen-data", cfg)?;
    if let Some(p) = &cfg.spec {
        m.input(p)?;
    }
    m.output(&cfg.out)?;
    m.write_beside(&cfg.out)?;
    println!(
        "wrote {} rows of dimension {} to {}",
        data.len(),
        data.dim(),
        cfg.out.display()
    );
    Ok(())
}

fn build_net(net: &NetSpec, data: &Batch, seed: u64) -> Result<DenseNet> {
    let class_count = data.class_ids().iter().max().copied().unwrap_or(0) + 1;
    let arch = NetArch::new(
        data.dim(),
        &net.hidden,
        net.activation,
        net.time_embed_dim,
        net.class_embed_dim,
        class_count,
    )
    .map_err(usage)?;
    Ok(DenseNet::init(arch, seed)?)
}

fn train_config(
    pred: PredKind,
    schedule: &ScheduleSpec,
    t: &TrainSpec,
    seed: u64,
) -> Result<TrainConfig> {
    let mut c = TrainConfig::new(pred, schedule.build()?);
    c.iterations = t.iterations;
    c.batch_size = t.batch_size;
    c.learning_rate = t.learning_rate;
    c.lr_schedule = t.lr_schedule;
    c.cond_dropout_p = t.cond_dropout_p;
    c.offset_noise = t.offset_noise;
    c.offset_groups = t.offset_groups;
    c.seed = seed;
    c.validate().map_err(usage)?;
    Ok(c)
}

fn tail_loss(h: &[f64]) -> f64 {
    let k = h.len().clamp(1, 100);
    h[h.len().saturating_sub(k)..].iter().sum::<f64>() / k as f64
}

pub fn train_denoiser_cmd(cfg: &TrainDenoiserCmd) -> Result<()> {
    let tc = train_config(cfg.pred, &cfg.schedule, &cfg.train, cfg.seed)?;
    let data = read_batch(&cfg.data)?;
    let net = build_net(&cfg.net, &data, cfg.seed)?;
    let model = train_denoiser(&data, net, &tc)?;
    write_json(&cfg.out, &model.to_checkpoint())?;
    let mut m = Manifest::new("train-denoiser", cfg)?;
    m.input(&cfg.data)?;
    m.output(&cfg.out)?;
    m.write_beside(&cfg.out)?;
    println!(
        "trained {}-prediction denoiser on {} for {} iterations, final loss {}",
        cfg.pred,
        model.schedule.name(),
        cfg.train.iterations,
        sig9(tail_loss(&model.loss_history))
    );
    Ok(())
}

pub fn train_oms_cmd(cfg: &TrainOmsCmd) -> Result<()> {
    let tc = train_config(PredKind::V, &cfg.schedule, &cfg.train, cfg.seed)?;
    let data = read_batch(&cfg.data)?;
    let net = build_net(&cfg.net, &data, cfg.seed.wrapping_add(1))?;
    let model = train_oms(&data, net, &tc, cfg.target)?;
    write_json(&cfg.out, &model.to_checkpoint())?;
    let mut m = Manifest::new("train-oms", cfg)?;
    m.input(&cfg.data)?;
    m.output(&cfg.out)?;
    m.write_beside(&cfg.out)?;
    println!(
        "trained OMS module for {} iterations, final loss {}",
        cfg.train.iterations,
        sig9(tail_loss(&model.loss_history))
    );
    Ok(())
}

fn oms_condition(s: &str) -> Result<OmsCondition> {
    if s.trim() == "same" {
        Ok(OmsCondition::Same)
    } else {
        Ok(OmsCondition::Class(parse_class(s)?))
    }
}

pub fn sample(cfg: &SampleCmd) -> Result<()> {
    let den = DenoiserModel::from_checkpoint(&read_checkpoint(&cfg.denoiser)?)
        .with_context(|| format!("loading denoiser {}", cfg.denoiser.display()))?;
    let oms = match (&cfg.oms, cfg.no_oms) {
        (Some(p), false) => Some(
            OmsModule::from_checkpoint(&read_checkpoint(p)?)
                .with_context(|| format!("loading OMS module {}", p.display()))?,
        ),
        _ => None,
    };
    if cfg.classes.is_empty() || cfg.n == 0 || cfg.steps == 0 {
        return Err(usage(
            "sample needs at least one class, n >= 1 and steps >= 1",
        ));
    }
    let big_t = den.schedule.num_steps();
    let oms_cond = oms_condition(&cfg.oms_condition)?;
    let negative = parse_class(&cfg.negative_condition)?;
    let mut parts = Vec::new();
    for name in &cfg.classes {
        let class_id = parse_class(name)?;
        let sc = SamplerConfig {
            step_grid: default_grid(big_t, cfg.steps),
            eta: cfg.eta,
            omega_theta: cfg.omega_theta,
            omega_psi: cfg.omega_psi,
            oms_sigma: cfg.oms_sigma,
            base_condition: class_id,
            oms_condition: oms_cond,
            negative_condition: negative,
            seed: derive_seed(cfg.seed, stream::CHAIN, class_id as u64),
        };
        sc.validate(&den.schedule).map_err(usage)?;
        let o = oms.as_ref().map(|m| m as &dyn OmsPredictor);
        parts.push(sample_pipeline(&den, o, cfg.n, &sc)?);
    }
    let all = Batch::concat(&parts)?;
    write_batch(&cfg.out, &all)?;
    let mut m = Manifest::new("sample", cfg)?;
    m.input(&cfg.denoiser)?;
    if let (Some(p), false) = (&cfg.oms, cfg.no_oms) {
        m.input(p)?;
    }
    m.output(&cfg.out)?;
    m.write_beside(&cfg.out)?;
    println!(
        "wrote {} samples ({} per class, {} steps{}) to {}",
        all.len(),
        cfg.n,
        default_grid(big_t, cfg.steps).len(),
        if oms.is_some() { ", with OMS" } else { "" },
        cfg.out.display()
    );
    Ok(())
}

/// Digest identifying the run that produced `generated`: the hash of its
/// manifest's config when one exists, else of the file itself.
fn config_digest(generated: &Path) -> Result<String> {
    let mp = manifest_path(generated);
    if mp.exists() {
        let m = Manifest::read(&mp)?;
        Ok(sha256_hex(serde_json::to_string(&m.config)?.as_bytes()))
    } else {
        Ok(sha256_hex(&fs::read(generated)?))
    }
}

pub fn print_report(r: &BiasReport) {
    println!("class  data_mean   generated_mean  abs_error   w1_means");
    for c in &r.per_class {
        println!(
            "{:<6} {:>10.5} {:>15.5} {:>10.5} {:>10.5}",
            c.class_id, c.data_mean, c.generated_mean, c.abs_error, c.wasserstein_means
        );
    }
    println!("global w1 {:.5}", r.global_wasserstein);
}

pub fn report(cfg: &ReportCmd) -> Result<BiasReport> {
    let generated = read_batch(&cfg.generated)?;
    let data = read_batch(&cfg.data)?;
    let digest = config_digest(&cfg.generated)?;
    let r = bias_report(&generated, &data, &digest, cfg.seed).map_err(usage)?;
    let mut text = r.to_json()?;
    text.push('\n');
    write_atomic(&cfg.out, text.as_bytes())?;
    let mut m = Manifest::new("report", cfg)?;
    m.input(&cfg.generated)?;
    m.input(&cfg.data)?;
    m.output(&cfg.out)?;
    if let Some(h) = &cfg.hist {
        let hist =
            mean_histogram(&sample_means(&generated)?, cfg.bins, cfg.range).map_err(usage)?;
        let mut buf = Vec::new();
        hist.write_csv(&mut buf)?;
        write_atomic(h, &buf)?;
        m.output(h)?;
    }
    m.write_beside(&cfg.out)?;
    print_report(&r);
    Ok(r)
}

/// The full recipe: data, base model, OMS module, sampling with and without
/// OMS, and a report for each.
pub fn demo(cfg: &DemoCmd) -> Result<()> {
    let dir = &cfg.out_dir;
    let at = |name: &str| -> PathBuf { dir.join(name) };
    let data = GenDataCmd {
        seed: cfg.seed,
        out: at("data.csv"),
        ..GenDataCmd::default()
    };
    gen_data(&data)?;
    let mut den = TrainDenoiserCmd {
        data: data.out.clone(),
        seed: cfg.seed,
        out: at("denoiser.json"),
        ..TrainDenoiserCmd::default()
    };
    den.train.iterations = cfg.denoiser_iterations;
    train_denoiser_cmd(&den)?;
    let mut oms = TrainOmsCmd {
        data: data.out.clone(),
        seed: cfg.seed,
        out: at("oms.json"),
        ..TrainOmsCmd::default()
    };
    oms.train.iterations = cfg.oms_iterations;
    train_oms_cmd(&oms)?;
    let mut reports = Vec::new();
    for (tag, use_oms) in [("no-oms", false), ("oms", true)] {
        let s = SampleCmd {
            denoiser: den.out.clone(),
            oms: Some(oms.out.clone()),
            no_oms: !use_oms,
            n: cfg.n,
            seed: cfg.seed,
            out: at(&format!("samples-{tag}.csv")),
            ..SampleCmd::default()
        };
        sample(&s)?;
        let r = ReportCmd {
            generated: s.out.clone(),
            data: data.out.clone(),
            hist: Some(at(&format!("hist-{tag}.csv"))),
            seed: cfg.seed,
            out: at(&format!("report-{tag}.json")),
            ..ReportCmd::default()
        };
        println!("-- {tag}");
        reports.push(report(&r)?);
    }
    println!();
    println!("class  data_mean   err_no_oms  err_oms     w1_no_oms   w1_oms");
    for (a, b) in reports[0].per_class.iter().zip(&reports[1].per_class) {
        println!(
            "{:<6} {:>10.5} {:>11.5} {:>10.5} {:>11.5} {:>9.5}",
            a.class_id,
            a.data_mean,
            a.abs_error,
            b.abs_error,
            a.wasserstein_means,
            b.wasserstein_means
        );
    }
    println!(
        "global w1: {:.5} without OMS, {:.5} with OMS",
        reports[0].global_wasserstein, reports[1].global_wasserstein
    );
    let mut m = Manifest::new("demo", cfg)?;
    for name in ["data.csv", "denoiser.json", "oms.json"] {
        m.output(&at(name))?;
    }
    for tag in ["no-oms", "oms"] {
        for name in [
            format!("samples-{tag}.csv"),
            format!("hist-{tag}.csv"),
            format!("report-{tag}.json"),
        ] {
            m.output(&at(&name))?;
        }
    }
    m.write_beside(&at("demo"))?;
    Ok(())
}
