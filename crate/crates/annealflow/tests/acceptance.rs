//! Acceptance criteria, one line each: `PASS`, `FAIL` or `SKIP`.
//!
//! Runs without the libtest harness so every criterion is reported even when
//! an earlier one fails. Pass criterion numbers to run a subset:
//! `cargo test --test acceptance -- 3 7`. The paper-scale mixture run takes
//! hours and only runs with `ANNEALFLOW_PAPER_SCALE=1`.
//!
//! A criterion listed in [`UNATTAINABLE`] is still measured and printed as
//! `FAIL` but does not set the exit status.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use annealflow::checkpoint::{decode, encode};
use annealflow::config::{RunConfig, TemperatureSpec, GMM_CONFIG, GMM_DESK_CONFIG, TORUS_CONFIG};
use annealflow::core::ais::{ais_log_weights, clash_model_ess, gaussian_is_ess, is_log_weights, AisConfig, HmcConfig};
use annealflow::core::annealing::{geometric_schedule, linear_schedule, resample_buffer, run_annealing, AnnealingSchedule};
use annealflow::core::diffgraph::Dense;
use annealflow::core::flow::{init_flow, FlowConfig, FlowModel};
use annealflow::core::metrics::reverse_ess;
use annealflow::core::targets::GaussianTarget;
use annealflow::core::training::train_reverse_kld;
use annealflow::core::SeedRng;
use annealflow::pipeline::{gradcheck, Evaluation, Pipeline};
use rand::{Rng, SeedableRng};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Criteria that cannot hold as stated (see the README).
const UNATTAINABLE: &[&str] = &["9b"];

struct Outcome {
    id: &'static str,
    name: &'static str,
    status: Status,
    detail: String,
}

#[derive(PartialEq)]
enum Status {
    Pass,
    Fail,
    Skip,
}

fn check(id: &'static str, name: &'static str, ok: bool, detail: String) -> Outcome {
    Outcome { id, name, status: if ok { Status::Pass } else { Status::Fail }, detail }
}

fn emit(o: &Outcome) {
    let tag = match o.status {
        Status::Pass => "PASS",
        Status::Fail if UNATTAINABLE.contains(&o.id) => "FAIL (unattainable as stated)",
        Status::Fail => "FAIL",
        Status::Skip => "SKIP",
    };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "criterion {:<3} {:<34} {tag}  {}", o.id, o.name, o.detail);
}

fn perturbed(cfg: &FlowConfig, scale: f64, rng: &mut SeedRng) -> FlowModel {
    let mut m = init_flow(cfg, rng).unwrap();
    let p: Vec<f64> = m.params().flatten().iter().map(|v| v + scale * (rng.random::<f64>() - 0.5)).collect();
    m.params_mut().assign_flat(&p);
    m
}

struct GmmRun {
    evaluation: Evaluation,
    elapsed: Duration,
    model: FlowModel,
}

fn run_gmm(text: &str) -> GmmRun {
    let cfg = RunConfig::from_toml_str(text).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let mut p = Pipeline::open(cfg, dir.path()).unwrap();
    let s = p.run(None).unwrap();
    let elapsed = start.elapsed();
    let model = decode(&std::fs::read(p.dir.checkpoint(s.final_stage)).unwrap(), None).unwrap().model;
    GmmRun { evaluation: s.evaluation, elapsed, model }
}

fn desk_run() -> &'static GmmRun {
    static RUN: OnceLock<GmmRun> = OnceLock::new();
    RUN.get_or_init(|| run_gmm(GMM_DESK_CONFIG))
}

fn c1() -> Vec<Outcome> {
    let name = "paper-scale mixture";
    if std::env::var_os("ANNEALFLOW_PAPER_SCALE").is_none() {
        return vec![Outcome {
            id: "1",
            name,
            status: Status::Skip,
            detail: "hours of compute; set ANNEALFLOW_PAPER_SCALE=1 (thresholds NLL <= 6.95, ESS >= 0.93)".into(),
        }];
    }
    let r = run_gmm(GMM_CONFIG);
    let (n, e) = (r.evaluation.report.nll, r.evaluation.report.reverse_ess);
    vec![check("1", name, n <= 6.95 && e >= 0.93, format!("NLL {n:.4} (<= 6.95), ESS {e:.4} (>= 0.93), {:.0?}", r.elapsed))]
}

fn c2() -> Vec<Outcome> {
    let r = desk_run();
    let (n, e) = (r.evaluation.report.nll, r.evaluation.report.reverse_ess);
    let (covered, total) = r.evaluation.coverage.unwrap_or((0, 40));
    let minutes = r.elapsed.as_secs_f64() / 60.0;
    vec![check(
        "2",
        "desk-scale mixture",
        n <= 7.3 && e >= 0.75 && minutes <= 30.0 && covered == 40 && total == 40,
        format!("NLL {n:.4} (<= 7.3), ESS {e:.4} (>= 0.75), modes {covered}/{total}, {minutes:.1} min (<= 30)"),
    )]
}

fn c3() -> Vec<Outcome> {
    let printed = [30.0, 18.45, 11.35, 6.98, 4.30, 2.64, 1.63, 1.00];
    let s = geometric_schedule(30.0, 1.0, 8).unwrap();
    let dev = s.iter().zip(printed).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let second = geometric_schedule(1200.0, 300.0, 10).unwrap()[1];
    vec![check(
        "3",
        "geometric schedule values",
        s.len() == 8 && dev <= 0.01 && (second - 1028.69).abs() <= 0.01,
        format!("max deviation {dev:.4} (<= 0.01), second of 1200->300 is {second:.4}"),
    )]
}

fn c4() -> Vec<Outcome> {
    let cfg = FlowConfig { layers: 2, hidden: vec![8], ..FlowConfig::gmm() };
    let target = RunConfig::from_toml_str(GMM_DESK_CONFIG).unwrap().target.build().unwrap();
    let (mut rev, mut fwd) = (0.0f64, 0.0f64);
    for point in 0..20 {
        let mut rng = SeedRng::seed_from_u64(400 + point);
        let mut m = perturbed(&cfg, 0.4, &mut rng);
        let g = gradcheck(&mut m, &target, 30.0, 16, usize::MAX, &mut rng).unwrap();
        rev = rev.max(g.reverse_max_rel);
        fwd = fwd.max(g.forward_max_rel);
    }
    vec![check(
        "4",
        "gradients vs finite differences",
        rev <= 1e-4 && fwd <= 1e-4,
        format!("max rel error reverse {rev:.2e}, forward {fwd:.2e} (<= 1e-4, 20 points, all parameters)"),
    )]
}

fn c5() -> Vec<Outcome> {
    let mut rng = SeedRng::seed_from_u64(5);
    let m = perturbed(&FlowConfig::gmm(), 0.2, &mut rng);
    let n = 10_000;
    let x = Dense::from_vec(n, 2, (0..2 * n).map(|_| rng.random_range(-49.9..49.9)).collect());
    let (z, ld_inv) = m.inverse_map(&x).unwrap();
    let (back, ld_fwd) = m.forward_map(&z).unwrap();
    let roundtrip = x.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let residual = ld_inv.iter().zip(&ld_fwd).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max);
    // central differences of g on 200 latent points
    let h = 1e-6;
    let mut jac_err = 0.0f64;
    for r in 0..200 {
        let z0 = z.row(r).to_vec();
        let mut cols = [[0.0; 2]; 2];
        for (d, col) in cols.iter_mut().enumerate() {
            let mut pts = Dense::from_vec(2, 2, [z0.clone(), z0.clone()].concat());
            pts.row_mut(0)[d] += h;
            pts.row_mut(1)[d] -= h;
            let (xs, _) = m.forward_map(&pts).unwrap();
            for k in 0..2 {
                col[k] = (xs.get(0, k) - xs.get(1, k)) / (2.0 * h);
            }
        }
        let det = cols[0][0] * cols[1][1] - cols[0][1] * cols[1][0];
        let (_, ld) = m.forward_map(&Dense::from_vec(1, 2, z0)).unwrap();
        jac_err = jac_err.max((det.abs().ln() - ld[0]).abs());
    }
    vec![check(
        "5",
        "bijection and log-det",
        roundtrip <= 1e-8 && residual <= 1e-8 && jac_err <= 1e-5,
        format!("roundtrip {roundtrip:.2e}, log-det residual {residual:.2e} (<= 1e-8), FD Jacobian {jac_err:.2e} (<= 1e-5)"),
    )]
}

fn c6() -> Vec<Outcome> {
    let m = &desk_run().model;
    let (n, lo, hi) = (400, -50.0, 50.0);
    let w = (hi - lo) / n as f64;
    let mut pts = Dense::zeros(n * n, 2);
    for i in 0..n {
        for j in 0..n {
            let r = pts.row_mut(i * n + j);
            r[0] = lo + (i as f64 + 0.5) * w;
            r[1] = lo + (j as f64 + 0.5) * w;
        }
    }
    let total: f64 = m.log_prob(&pts).unwrap().iter().map(|l| l.exp()).sum::<f64>() * w * w;
    vec![check(
        "6",
        "trained density normalization",
        (total - 1.0).abs() <= 1e-2,
        format!("integral {total:.5} on a 400x400 grid (|I - 1| <= 1e-2)"),
    )]
}

fn c7() -> Vec<Outcome> {
    let mut rng = SeedRng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for trial in 0..200 {
        let n = 1 + trial % 50;
        let logw: Vec<f64> = (0..n).map(|_| rng.random_range(-8.0..8.0)).collect();
        let w: Vec<f64> = logw.iter().map(|l| l.exp()).collect();
        let (s, s2) = (w.iter().sum::<f64>(), w.iter().map(|v| v * v).sum::<f64>());
        let brute = s * s / (n as f64 * s2);
        worst = worst.max((reverse_ess(&logw).unwrap() - brute).abs());
    }
    let logw: Vec<f64> = (0..20).map(|k| (1.0 + k as f64).ln() - 0.1 * k as f64).collect();
    let m = 100_000;
    let idx = resample_buffer(&logw, m, &mut rng).unwrap();
    let mut counts = [0usize; 20];
    idx.iter().for_each(|&i| counts[i] += 1);
    let wsum: f64 = logw.iter().map(|l| l.exp()).sum();
    let stat: f64 = counts
        .iter()
        .zip(&logw)
        .map(|(&c, l)| {
            let e = m as f64 * l.exp() / wsum;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    let p = 1.0 - ChiSquared::new(19.0).unwrap().cdf(stat);
    vec![
        check("7a", "reverse ESS vs brute force", worst <= 1e-12, format!("max abs difference {worst:.2e} (<= 1e-12)")),
        check("7b", "resampling chi-square", p > 1e-3, format!("chi2 {stat:.2} on 19 dof, p = {p:.4} (> 0.001), M = 1e5")),
    ]
}

/// Minimum per-iteration buffer ESS of the torus run for one seed, under
/// the geometric and the linear ladder with the same number of levels.
fn torus_min_ess(seed: u64) -> (f64, f64) {
    let mut cfg = RunConfig::from_toml_str(TORUS_CONFIG).unwrap();
    cfg.seed = seed;
    let target = cfg.target.build().unwrap();
    let mut rng = SeedRng::seed_from_u64(seed);
    let mut model = init_flow(&cfg.flow, &mut rng).unwrap();
    let t0 = cfg.pretrain.temperature;
    train_reverse_kld(&mut model, &target, t0, &cfg.pretrain.train, &mut rng, &mut |_, _| {}).unwrap();
    let TemperatureSpec::Geometric { levels, .. } = cfg.annealing.temperatures else {
        panic!("the torus configuration uses a geometric ladder")
    };
    let a = &cfg.annealing;
    let mut result = [0.0; 2];
    for (k, temps) in [geometric_schedule(t0, 1.0, levels).unwrap(), linear_schedule(t0, 1.0, levels).unwrap()]
        .into_iter()
        .enumerate()
    {
        let schedule = AnnealingSchedule {
            temperatures: temps,
            draws: a.draws,
            resample: a.resample,
            forward_steps: a.forward_steps,
            clip_fraction: a.clip_fraction,
        };
        let mut m = model.clone();
        let mut r = SeedRng::seed_from_u64(seed ^ 0xab);
        let reports = run_annealing(&mut m, &target, &schedule, &a.train, &mut r, &mut |_, _| Ok(()), &mut |_, _, _| {})
            .unwrap();
        result[k] = reports.iter().map(|r| r.buffer_ess).fold(f64::INFINITY, f64::min);
    }
    (result[0], result[1])
}

fn c8() -> Vec<Outcome> {
    let runs: Vec<(f64, f64)> = (0..4).map(|s| torus_min_ess(80 + s)).collect();
    let wins = runs.iter().filter(|(g, l)| g > l).count();
    let detail: Vec<String> = runs.iter().map(|(g, l)| format!("{g:.3}/{l:.3}")).collect();
    vec![check(
        "8",
        "geometric beats linear on the torus",
        wins >= 3,
        format!("{wins}/4 seeds (>= 3); min ESS geometric/linear: {}", detail.join(", ")),
    )]
}

fn c9() -> Vec<Outcome> {
    let n = 64;
    let q = GaussianTarget::isotropic(n, 1.1).unwrap();
    let p = GaussianTarget::isotropic(n, 1.0).unwrap();
    let samples = 5000;
    let is = reverse_ess(&is_log_weights(&q, &p, samples, &mut SeedRng::seed_from_u64(90))).unwrap();
    let closed = gaussian_is_ess(1.1, 1.0).powi(n as i32);
    let printed = 0.98485f64.powi(n as i32);
    let cfg = AisConfig { dim: n, intermediates: 5 * n, samples: 1000, hmc: HmcConfig::default(), seed: 0 };
    let ais = reverse_ess(&ais_log_weights(&q, &p, &cfg, &mut SeedRng::seed_from_u64(91)).unwrap()).unwrap();
    let (eta, dims, m) = (0.01, 100, 100_000);
    let clash = clash_model_ess(eta, dims, m, &mut SeedRng::seed_from_u64(92));
    let expect = (1.0f64 - eta).powi(dims as i32);
    let sigma = (expect * (1.0 - expect) / m as f64).sqrt();
    vec![
        check(
            "9a",
            "IS ESS near closed form at N=64",
            is >= printed / 2.0 && is <= printed * 2.0,
            format!("IS {is:.4} vs 0.98485^64 = {printed:.4} (closed form {closed:.4}), factor 2"),
        ),
        check(
            "9b",
            "AIS T=5N at least 5x IS at N=64",
            ais >= 5.0 * is,
            format!("AIS {ais:.4} vs 5 x IS = {:.4}; ESS fractions cannot exceed 1", 5.0 * is),
        ),
        check(
            "9c",
            "clash model ESS",
            (clash - expect).abs() <= 3.0 * sigma,
            format!("{clash:.4} vs (1-0.01)^100 = {expect:.4} (3 sigma = {:.4})", 3.0 * sigma),
        ),
    ]
}

const SMALL: &str = r#"
name = "repro"
seed = 5

[target]
kind = "gmm40"

[flow]
layers = 3
bins = 8
hidden = [16]

[[flow.dims]]
kind = "standard"
lo = -50.0
hi = 50.0
base = { kind = "truncated-normal", mean = 0.0, std = 10.0 }

[[flow.dims]]
kind = "standard"
lo = -50.0
hi = 50.0
base = { kind = "truncated-normal", mean = 0.0, std = 10.0 }

[pretrain]
temperature = 30.0

[pretrain.train]
batch_size = 64
steps = 100
lr = 1e-3

[annealing]
draws = 2000
resample = 2000
forward_steps = 50

[annealing.temperatures]
kind = "geometric"
target = 1.0
levels = 4
fine_tune = 1

[annealing.train]
batch_size = 64
steps = 0
lr = 1e-3

[evaluation]
nll_samples = 500
ess_samples = 500
coverage_samples = 1000
"#;

fn c10() -> Vec<Outcome> {
    let cfg = RunConfig::from_toml_str(SMALL).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    Pipeline::open(cfg.clone(), a.path()).unwrap().run(None).unwrap();
    Pipeline::open(cfg, b.path()).unwrap().run(None).unwrap();
    let ma = std::fs::read(a.path().join("metrics.csv")).unwrap();
    let mb = std::fs::read(b.path().join("metrics.csv")).unwrap();
    let same_metrics = ma == mb && !ma.is_empty();
    let ck = a.path().join("checkpoints/stage_04.ckpt");
    let original = decode(&std::fs::read(&ck).unwrap(), None).unwrap().model;
    let reloaded = decode(&encode(&original, 4), None).unwrap().model;
    let mut rng = SeedRng::seed_from_u64(10);
    let x = Dense::from_vec(100, 2, (0..200).map(|_| rng.random_range(-50.0..50.0)).collect());
    let (la, lb) = (original.log_prob(&x).unwrap(), reloaded.log_prob(&x).unwrap());
    let bitwise = la.iter().zip(&lb).all(|(u, v)| u.to_bits() == v.to_bits());
    vec![check(
        "10",
        "reproducibility",
        same_metrics && bitwise,
        format!("metrics.csv identical: {same_metrics}, logq bitwise after save/load: {bitwise}"),
    )]
}

fn main() {
    let selected: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Vec<Outcome>); 10] = [
        ("1", c1),
        ("2", c2),
        ("3", c3),
        ("4", c4),
        ("5", c5),
        ("6", c6),
        ("7", c7),
        ("8", c8),
        ("9", c9),
        ("10", c10),
    ];
    let mut failed = Vec::new();
    for (id, f) in criteria {
        if !selected.is_empty() && !selected.iter().any(|s| s == id) {
            continue;
        }
        for o in f() {
            emit(&o);
            if o.status == Status::Fail && !UNATTAINABLE.contains(&o.id) {
                failed.push(o.id);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("acceptance: failed criteria {}", failed.join(", "));
        std::process::exit(1);
    }
}
