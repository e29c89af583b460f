//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line, even when run through a
//! plain `cargo test`.

use std::fs;
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::Array2;
use oms_lab::diffusion::{
    generate_dataset, offset_noise_with, train_oms, ClassSpec, Component, OmsTarget, OracleOms,
    ToyDatasetSpec, TrainConfig,
};
use oms_lab::geometry::{
    annulus_mass_checks, expected_train_radius, hemisphere_slab_checks, radius_table,
    unit_sphere_measures,
};
use oms_lab::metrics::sample_means;
use oms_lab::nn::{Activation, DenseNet, NetArch};
use oms_lab::param::{
    ddim_rotate, eps_from_v, eps_from_x0, phi_of, v_from_x0_eps, x0_and_eps, x0_from_eps, x0_from_v,
};
use oms_lab::rng::{self, rng_from, standard_normal};
use oms_lab::sampler::{
    cfg_combine, ddim_step, full_grid, oms_step, sample_ddpm, sample_pipeline, GaussianOracle,
    SamplerConfig,
};
use oms_lab::schedule::{
    build_cosine_schedule, build_ldm_schedule, build_linear_schedule, rescale_zero_terminal,
};
use oms_lab::{Batch, PredKind, Prediction, NULL_CLASS};
use oms_lab_cli::manifest::{digest_file, manifest_path};
use rand::Rng as _;
use serde_json::Value;

type Check = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Check);

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_oms-lab")
}

fn oms_lab(args: &[&str]) -> std::process::Output {
    Command::new(bin())
        .args(args)
        .env_remove("OMS_LAB_SEED")
        .output()
        .expect("running oms-lab")
}

fn run_ok(args: &[&str]) -> Result<String, String> {
    let out = oms_lab(args);
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "`oms-lab {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_batch(path: &Path) -> Batch {
    Batch::read_csv(BufReader::new(fs::File::open(path).unwrap())).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn scratch() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| tempfile::tempdir().unwrap()).path()
}

/// Default demo recipe, run once and shared by the criteria that need
/// trained models. Returns the output directory and the wall time.
fn demo_run() -> Result<(&'static Path, f64), String> {
    static DEMO: OnceLock<Result<(PathBuf, f64), String>> = OnceLock::new();
    DEMO.get_or_init(|| {
        let dir = scratch().join("demo");
        let start = Instant::now();
        run_ok(&["demo", "--out-dir", p(&dir)])?;
        Ok((dir, start.elapsed().as_secs_f64()))
    })
    .as_ref()
    .map(|(d, t)| (d.as_path(), *t))
    .map_err(Clone::clone)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn schedule_constants() -> Check {
    let s = build_ldm_schedule(1000).map_err(|e| e.to_string())?;
    let snr = s.terminal_snr();
    let ab = s.terminal_alpha_bar();
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let out = run_ok(&["schedule", "ldm", "--T", "1000"])?;
    let printed_ok = out.contains("0.00468191") && out.contains("0.0682649");
    ensure(
        rel(snr, 0.004682) < 1e-3
            && (a - 0.068265).abs() < 5e-6
            && (b - 0.997667).abs() < 5e-6
            && printed_ok,
        format!("SNR(T)={snr:.6e} sqrt_abar={a:.6} sqrt_1m_abar={b:.6}"),
    )
}

fn table_snr() -> Check {
    let lin = build_linear_schedule(1000, 1e-4, 0.02)
        .unwrap()
        .terminal_snr();
    let cos = build_cosine_schedule(1000, 0.008, 0.999)
        .unwrap()
        .terminal_snr();
    let ldm = build_ldm_schedule(1000).unwrap().terminal_snr();
    let ratio = cos / 2.428e-9;
    ensure(
        rel(lin, 4.036e-5) < 1e-3 && (0.5..=2.0).contains(&ratio) && cos < lin && lin < ldm,
        format!("linear={lin:.4e} cosine={cos:.4e} (x{ratio:.3} of table) ldm={ldm:.4e}"),
    )
}

fn zero_mean_rows(dim: usize, m2: f64, rows: usize, seed: u64) -> Batch {
    let spec = ToyDatasetSpec {
        dim,
        classes: vec![ClassSpec {
            class_id: 1,
            name: None,
            components: vec![Component {
                mean: vec![0.0; dim],
                scale: m2.sqrt(),
                offset_std: 0.0,
                weight: 1.0,
            }],
        }],
        n_per_class: rows,
        seed,
    };
    generate_dataset(&spec).unwrap()
}

fn table_radius() -> Check {
    let scheds = [
        build_cosine_schedule(1000, 0.008, 0.999).unwrap(),
        build_linear_schedule(1000, 1e-4, 0.02).unwrap(),
        build_ldm_schedule(1000).unwrap(),
    ];
    let mut detail = Vec::new();
    let mut ok = true;
    for (dim, want) in [(196_608, 443.405), (16_384, 128.0)] {
        let data = zero_mean_rows(dim, 0.5, 16, 0);
        let rows = radius_table(&scheds, &data, 20_000, 0).map_err(|e| e.to_string())?;
        let r_s = rows[0].r_sample;
        ok &= (r_s - want).abs() <= 0.05;
        ok &= rows[0].delta_r < rows[1].delta_r && rows[1].delta_r < rows[2].delta_r;
        let mut worst = 0.0f64;
        for (row, s) in rows.iter().zip(&scheds) {
            let closed = expected_train_radius(&data, s.terminal_alpha_bar()).unwrap();
            worst = worst.max((row.r_train - closed).abs());
        }
        ok &= worst <= 0.05;
        detail.push(format!(
            "d={dim}: r_S={r_s:.3} dr=[{:.2e},{:.2e},{:.3}] |r_T-closed|<={worst:.4}",
            rows[0].delta_r, rows[1].delta_r, rows[2].delta_r
        ));
    }
    ensure(ok, detail.join("; "))
}

fn parameterization_identities() -> Check {
    let mut r = rng_from(2024);
    let mut worst = 0.0f64;
    let s = build_ldm_schedule(1000).unwrap();
    for _ in 0..100 {
        let d = r.random_range(1..12);
        let x0: Vec<f64> = (0..d).map(|_| standard_normal(&mut r)).collect();
        let eps: Vec<f64> = (0..d).map(|_| standard_normal(&mut r)).collect();
        let t = r.random_range(2..=1000);
        let t_prev = r.random_range(1..t);
        let ab = s.alpha_bar(t).unwrap();
        let xt: Vec<f64> = x0
            .iter()
            .zip(&eps)
            .map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e)
            .collect();
        let v = v_from_x0_eps(&x0, &eps, ab).unwrap();
        let diff = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        };
        worst = worst
            .max(diff(&x0_from_v(&xt, &v, ab).unwrap(), &x0))
            .max(diff(&eps_from_v(&xt, &v, ab).unwrap(), &eps))
            .max(diff(&x0_from_eps(&xt, &eps, ab).unwrap(), &x0))
            .max(diff(&eps_from_x0(&xt, &x0, ab).unwrap(), &eps));
        let (x0b, epsb) =
            x0_and_eps(&xt, &Prediction::new(PredKind::V, v.clone()).unwrap(), ab).unwrap();
        worst = worst.max(diff(&x0b, &x0)).max(diff(&epsb, &eps));
        let delta = phi_of(ab) - phi_of(s.alpha_bar(t_prev).unwrap());
        let rotated = ddim_rotate(&xt, &v, delta).unwrap();
        let zeros = vec![0.0; d];
        let pred = Prediction::new(PredKind::V, v).unwrap();
        let stepped = ddim_step(&xt, &pred, t, t_prev, &s, 0.0, &zeros).unwrap();
        worst = worst.max(diff(&rotated, &stepped));
    }
    ensure(
        worst < 1e-10,
        format!("max deviation {worst:.2e} over 100 cases"),
    )
}

fn concentration_bounds() -> Check {
    let cs = [2.0, 3.0, 4.0];
    let ann = annulus_mass_checks(10_000, &cs, 100_000, 11).map_err(|e| e.to_string())?;
    let slab = hemisphere_slab_checks(10_000, &cs, 100_000, 12).map_err(|e| e.to_string())?;
    let mut ok = ann.iter().all(|a| a.fraction_outside <= a.bound)
        && slab.iter().all(|s| s.fraction_above <= s.bound);
    let mut worst = 0.0f64;
    for d in 1..=60 {
        let m = unit_sphere_measures(d).unwrap();
        worst = worst.max(rel(m.area, d as f64 * m.volume));
    }
    let v50 = unit_sphere_measures(50).unwrap().volume;
    ok &= worst < 1e-12 && v50 < 1e-12;
    let fmt = |v: Vec<String>| v.join(" ");
    ensure(
        ok,
        format!(
            "annulus {} | slab {} | A=dV rel {worst:.1e} | V(50)={v50:.2e}",
            fmt(ann
                .iter()
                .map(|a| format!("c{}:{:.1e}<={:.1e}", a.c, a.fraction_outside, a.bound))
                .collect()),
            fmt(slab
                .iter()
                .map(|s| format!("c{}:{:.1e}<={:.1e}", s.c, s.fraction_above, s.bound))
                .collect()),
        ),
    )
}

fn gradient_check() -> Check {
    let arch = NetArch::new(3, &[6, 5, 4], Activation::Silu, 4, 2, 3).map_err(|e| e.to_string())?;
    let mut net = DenseNet::init(arch, 5).map_err(|e| e.to_string())?;
    let mut r = rng_from(6);
    let x = Array2::from_shape_fn((3, 3), |_| standard_normal(&mut r));
    let u = Array2::from_shape_fn((3, 3), |_| standard_normal(&mut r));
    let t = [0.1, 0.5, 0.93];
    let c = [0, 2, 1];
    let loss = |net: &DenseNet| (&net.forward_batch(x.view(), &t, &c).unwrap() * &u).sum();
    let grads = net
        .backward_batch(x.view(), &t, &c, u.view())
        .map_err(|e| e.to_string())?;
    let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut count = 0;
    for (g, group) in analytic.iter().enumerate() {
        for (j, &a) in group.iter().enumerate() {
            let orig = net.param_slices_mut()[g][j];
            net.param_slices_mut()[g][j] = orig + h;
            let up = loss(&net);
            net.param_slices_mut()[g][j] = orig - h;
            let down = loss(&net);
            net.param_slices_mut()[g][j] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6));
            count += 1;
        }
    }
    ensure(
        worst < 1e-4,
        format!("max relative error {worst:.2e} over {count} parameters"),
    )
}

fn oracle_sampler() -> Check {
    let o = GaussianOracle {
        mean: 1.5,
        std: 0.5,
        dim: 1,
        schedule: build_linear_schedule(1000, 1e-4, 0.02).unwrap(),
    };
    let moments = |b: &Batch| {
        let v: Vec<f64> = b.values().iter().copied().collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
        (m, s)
    };
    let mut runs = vec![(
        "ddpm",
        moments(&sample_ddpm(&o, 4096, 1, 3).map_err(|e| e.to_string())?),
    )];
    for (name, eta) in [("ddim0", 0.0), ("ddim1", 1.0)] {
        let mut c = SamplerConfig::new(1000, 1);
        c.step_grid = full_grid(1000);
        c.eta = eta;
        c.seed = 4;
        runs.push((
            name,
            moments(&sample_pipeline(&o, None, 4096, &c).map_err(|e| e.to_string())?),
        ));
    }
    let ok = runs
        .iter()
        .all(|(_, (m, s))| rel(*m, 1.5) < 0.02 && rel(*s, 0.5) < 0.05);
    let detail = runs
        .iter()
        .map(|(n, (m, s))| format!("{n}: mean {m:.4} std {s:.4}"))
        .collect::<Vec<_>>();
    ensure(ok, detail.join(", "))
}

fn toy_bias() -> Check {
    let (dir, secs) = demo_run()?;
    let before = read_json(&dir.join("report-no-oms.json"));
    let after = read_json(&dir.join("report-oms.json"));
    let field = |rep: &Value, class: u64, key: &str| {
        rep["per_class"]
            .as_array()
            .unwrap()
            .iter()
            .find(|c| c["class_id"] == class)
            .map(|c| c[key].as_f64().unwrap())
            .unwrap()
    };
    let mut ok = secs < 600.0;
    let mut detail = Vec::new();
    for (name, id) in [("dark", 1), ("light", 3)] {
        let (e0, e1) = (
            field(&before, id, "abs_error"),
            field(&after, id, "abs_error"),
        );
        ok &= e0 >= 3.0 * e1 && e1 < 0.1;
        detail.push(format!("{name} err {e0:.4}->{e1:.4}"));
    }
    let (w0, w1) = (
        before["global_wasserstein"].as_f64().unwrap(),
        after["global_wasserstein"].as_f64().unwrap(),
    );
    ok &= w1 < w0;
    detail.push(format!("W1 {w0:.4}->{w1:.4}, recipe {secs:.0}s"));
    ensure(ok, detail.join(", "))
}

fn toy_oms(data: &Batch, dim: usize, classes: usize) -> oms_lab::diffusion::OmsModule {
    let mut cfg = TrainConfig::new(PredKind::V, build_ldm_schedule(1000).unwrap());
    cfg.iterations = 2000;
    cfg.seed = 3;
    let net = DenseNet::init(NetArch::toy_default(dim, classes), 4).unwrap();
    train_oms(data, net, &cfg, OmsTarget::V).unwrap()
}

fn bayes_oracle() -> Check {
    let spec = ToyDatasetSpec::toy_default();
    let data = generate_dataset(&spec).unwrap();
    let oms = toy_oms(&data, spec.dim, spec.class_count());
    let oracle = OracleOms::from_data(&data).unwrap();
    let mut r = rng_from(77);
    let x = Array2::from_shape_fn((256, spec.dim), |_| standard_normal(&mut r));
    let rms = |a: &Array2<f64>, b: &Array2<f64>| (a - b).mapv(|v| v * v).mean().unwrap().sqrt();
    let mut worst = 0.0f64;
    for c in [1, 2, 3, NULL_CLASS] {
        let got = oms.predict_v(x.view(), c).unwrap();
        worst = worst.max(rms(&got, &oracle.predict_v(x.view(), c).unwrap()));
    }

    let dim = 8;
    let comp = |m: f64| Component {
        mean: vec![m; dim],
        scale: 0.1,
        offset_std: 0.0,
        weight: 0.5,
    };
    let split = ToyDatasetSpec {
        dim,
        classes: vec![ClassSpec {
            class_id: 1,
            name: None,
            components: vec![comp(-1.0), comp(1.0)],
        }],
        n_per_class: 4096,
        seed: 2,
    };
    let split_data = generate_dataset(&split).unwrap();
    let oms2 = toy_oms(&split_data, dim, 2);
    let x2 = Array2::from_shape_fn((256, dim), |_| standard_normal(&mut r));
    let out = oms2.predict_v(x2.view(), 1).unwrap();
    let bimodal = out.mapv(|v| v * v).mean().unwrap().sqrt();
    ensure(
        worst < 0.05 && bimodal < 0.1,
        format!("rms vs -class mean {worst:.4}; bimodal output rms {bimodal:.4}"),
    )
}

fn guidance_shift() -> Check {
    let mut r = rng_from(31);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let u: Vec<f64> = (0..5).map(|_| standard_normal(&mut r)).collect();
        let c: Vec<f64> = (0..5).map(|_| standard_normal(&mut r)).collect();
        let w = r.random_range(-2.0..8.0);
        let got = cfg_combine(&u, &c, w).unwrap();
        let one = cfg_combine(&u, &c, 1.0).unwrap();
        let zero = cfg_combine(&u, &c, 0.0).unwrap();
        for i in 0..5 {
            worst = worst
                .max((got[i] - (u[i] + w * (c[i] - u[i]))).abs())
                .max((one[i] - c[i]).abs())
                .max((zero[i] - u[i]).abs());
        }
    }

    let (dir, _) = demo_run()?;
    let mut means = Vec::new();
    for cond in ["dark", "same", "light"] {
        let out = scratch().join(format!("cond-{cond}.csv"));
        run_ok(&[
            "sample",
            "--denoiser",
            p(&dir.join("denoiser.json")),
            "--oms",
            p(&dir.join("oms.json")),
            "--class",
            "mid",
            "--n",
            "256",
            "--oms-condition",
            cond,
            "--seed",
            "5",
            "--out",
            p(&out),
        ])?;
        means.push(sample_means(&read_batch(&out)).unwrap());
    }
    // The three runs share every random draw, so per-chain differences
    // isolate the effect of the OMS condition.
    let paired = |a: &[f64], b: &[f64]| {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
        let n = d.len() as f64;
        let m = d.iter().sum::<f64>() / n;
        let se = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        (m, m / se)
    };
    let (d1, z1) = paired(&means[0], &means[1]);
    let (d2, z2) = paired(&means[1], &means[2]);
    ensure(
        worst < 1e-12 && z1 > 3.0 && z2 > 3.0,
        format!("cfg dev {worst:.1e}; same-dark {d1:+.4} ({z1:.1} se), light-same {d2:+.4} ({z2:.1} se)"),
    )
}

fn zero_terminal_noop() -> Check {
    let s = rescale_zero_terminal(&build_ldm_schedule(1000).unwrap()).unwrap();
    let mut r = rng_from(1);
    let x: Vec<f64> = (0..16).map(|_| standard_normal(&mut r)).collect();
    let v: Vec<f64> = (0..16).map(|_| standard_normal(&mut r)).collect();
    let z: Vec<f64> = (0..16).map(|_| standard_normal(&mut r)).collect();
    let same = oms_step(&x, &v, &s, 0.0, &z).map_err(|e| e.to_string())? == x;
    let cfg = TrainConfig::new(PredKind::Epsilon, s.clone());
    let rejected = cfg.validate().is_err();
    let cli = oms_lab(&[
        "train-denoiser",
        "--pred",
        "epsilon",
        "--rescale",
        "--data",
        "missing.csv",
    ]);
    ensure(
        same && rejected && cli.status.code() == Some(2),
        format!(
            "identity {same}, library rejects eps {rejected}, cli exit {:?}",
            cli.status.code()
        ),
    )
}

fn offset_noise() -> Check {
    let d = 4;
    let n = 100_000;
    let mut cov = [[0.0; 4]; 4];
    for i in 0..n {
        let mut r = rng::item_rng(8, 1, i as u64);
        let z = offset_noise_with(&mut r, d, 1, 0.1).map_err(|e| e.to_string())?;
        for a in 0..d {
            for b in 0..d {
                cov[a][b] += z[a] * z[b] / n as f64;
            }
        }
    }
    let mut diag = 0.0f64;
    let mut off = 0.0f64;
    for (a, row) in cov.iter().enumerate() {
        for (b, &c) in row.iter().enumerate() {
            if a == b {
                diag = diag.max((c - 1.1).abs());
            } else {
                off = off.max((c - 0.1).abs());
            }
        }
    }
    ensure(
        diag < 0.02 && off < 0.02,
        format!("max |diag-1.1| {diag:.4}, max |off-0.1| {off:.4}"),
    )
}

fn outputs_of(manifest: &Path) -> Vec<(PathBuf, String)> {
    read_json(manifest)["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| {
            (
                PathBuf::from(o["path"].as_str().unwrap()),
                o["sha256"].as_str().unwrap().to_string(),
            )
        })
        .collect()
}

fn sha(path: &Path) -> String {
    digest_file(path).unwrap().sha256
}

fn determinism() -> Check {
    let dir = scratch().join("replay");
    let f = |name: &str| dir.join(name);
    let iters = ["--iterations", "150"];
    let steps: Vec<Vec<String>> = vec![
        vec![
            "schedule",
            "cosine",
            "--rescale",
            "--out",
            p(&f("sched.json")),
        ],
        vec![
            "radius",
            "--schedules",
            "linear,ldm",
            "--dim",
            "64",
            "--n",
            "500",
            "--synthetic",
            "zero-mean",
            "--out",
            p(&f("radius.csv")),
        ],
        vec![
            "gen-data",
            "--n-per-class",
            "128",
            "--seed",
            "4",
            "--out",
            p(&f("data.csv")),
        ],
        [
            vec![
                "train-denoiser",
                "--pred",
                "v",
                "--hidden",
                "32,32",
                "--data",
                p(&f("data.csv")),
                "--out",
                p(&f("den.json")),
            ],
            iters.to_vec(),
        ]
        .concat(),
        [
            vec![
                "train-oms",
                "--hidden",
                "32",
                "--data",
                p(&f("data.csv")),
                "--out",
                p(&f("oms.json")),
            ],
            iters.to_vec(),
        ]
        .concat(),
        vec![
            "sample",
            "--denoiser",
            p(&f("den.json")),
            "--oms",
            p(&f("oms.json")),
            "--n",
            "200",
            "--steps",
            "20",
            "--eta",
            "0.5",
            "--out",
            p(&f("samples.csv")),
        ],
        vec![
            "report",
            "--generated",
            p(&f("samples.csv")),
            "--data",
            p(&f("data.csv")),
            "--hist",
            p(&f("hist.csv")),
            "--out",
            p(&f("report.json")),
        ],
        vec![
            "demo",
            "--out-dir",
            p(&f("demo")),
            "--denoiser-iterations",
            "100",
            "--oms-iterations",
            "100",
            "--n",
            "64",
        ],
    ]
    .into_iter()
    .map(|v| v.into_iter().map(String::from).collect())
    .collect();
    fs::create_dir_all(&dir).unwrap();
    for s in &steps {
        run_ok(&s.iter().map(String::as_str).collect::<Vec<_>>())?;
    }
    let mut manifests: Vec<PathBuf> = [
        "sched.json",
        "radius.csv",
        "data.csv",
        "den.json",
        "oms.json",
        "samples.csv",
        "report.json",
    ]
    .iter()
    .map(|m| manifest_path(&f(m)))
    .collect();
    manifests.push(f("demo/demo.manifest.json"));
    let mut checked = 0;
    let mut mismatches = Vec::new();
    for manifest in &manifests {
        let recorded = outputs_of(manifest);
        run_ok(&["--workers", "1", "--from-manifest", p(manifest)])?;
        for (path, digest) in recorded {
            checked += 1;
            if sha(&path) != digest {
                mismatches.push(path.display().to_string());
            }
        }
    }
    let recorded = sha(&f("samples.csv"));
    run_ok(&[
        "--workers",
        "4",
        "--from-manifest",
        p(&manifest_path(&f("samples.csv"))),
    ])?;
    let multi = sha(&f("samples.csv")) == recorded;
    ensure(
        mismatches.is_empty() && multi && checked >= manifests.len(),
        format!("{checked} artifacts replayed, mismatches {mismatches:?}, 4-worker sample identical {multi}"),
    )
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        (1, "schedule constants", schedule_constants),
        (2, "terminal SNR column", table_snr),
        (3, "terminal radius", table_radius),
        (
            4,
            "parameterization identities",
            parameterization_identities,
        ),
        (5, "concentration bounds", concentration_bounds),
        (6, "gradient check", gradient_check),
        (7, "oracle sampler", oracle_sampler),
        (8, "toy bias experiment", toy_bias),
        (9, "Bayes-oracle OMS", bayes_oracle),
        (10, "guidance and OMS condition", guidance_shift),
        (11, "zero-terminal no-op", zero_terminal_noop),
        (12, "offset-noise covariance", offset_noise),
        (13, "determinism", determinism),
    ];
    let only: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("acceptance {id:>2} {tag} [{secs:6.1}s] {name}: {detail}");
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
