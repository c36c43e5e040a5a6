use std::path::Path;

use annealflow::checkpoint::load_checkpoint;
use annealflow::config::RunConfig;
use annealflow::pipeline::Pipeline;

/// A few seconds of work on the 40-mode mixture.
const TINY: &str = r#"
name = "tiny"
seed = 11

[target]
kind = "gmm40"

[flow]
layers = 2
bins = 6
hidden = [12]
mask = "alternating"

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
batch_size = 32
steps = 40
lr = 1e-3

[annealing]
draws = 500
resample = 400
forward_steps = 15

[annealing.temperatures]
kind = "geometric"
target = 1.0
levels = 3
fine_tune = 1

[annealing.train]
batch_size = 32
steps = 0
lr = 1e-3

[evaluation]
nll_samples = 200
ess_samples = 200
coverage_samples = 500

[evaluation.histogram]
bins = 8
ranges = [[-50.0, 50.0], [-50.0, 50.0]]
reference_samples = 1000
model_samples = 1000

[evaluation.grid]
resolution = 6
ranges = [[-50.0, 50.0], [-50.0, 50.0]]
pixel_scale = 1

[output]
curve_interval = 10
"#;

fn tiny() -> RunConfig {
    RunConfig::from_toml_str(TINY).unwrap()
}

fn run(cfg: RunConfig, dir: &Path) -> annealflow::pipeline::RunSummary {
    Pipeline::open(cfg, dir).unwrap().run(None).unwrap()
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn run_directory_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let s = run(tiny(), tmp.path());
    assert_eq!(s.final_stage, 3);
    let root = tmp.path();
    assert_eq!(RunConfig::from_toml_str(&read(root.join("config.snapshot"))).unwrap(), tiny());
    for stage in 0..=3 {
        assert!(root.join(format!("checkpoints/stage_{stage:02}.ckpt")).exists());
    }
    let metrics = read(root.join("metrics.csv"));
    let kinds: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(kinds, ["pretrain", "anneal", "anneal", "anneal", "eval"]);
    let eval: Vec<&str> = metrics.lines().last().unwrap().split(',').collect();
    assert_eq!(eval[11].parse::<f64>().unwrap(), s.evaluation.report.nll);
    assert_eq!(eval[13].parse::<f64>().unwrap(), s.evaluation.report.reverse_ess);
    let curves = read(root.join("curves.csv"));
    // steps 0, 10, 20, 30, 39 of pretraining and 0, 10, 14 of each iteration
    assert_eq!(curves.lines().count(), 1 + 5 + 3 * 3);
    for f in ["model_stage_03", "target_t03", "hist_stage_03"] {
        assert!(root.join(format!("plots/{f}.ppm")).exists(), "{f}");
        assert!(root.join(format!("grids/{f}.csv")).exists(), "{f}");
    }
}

#[test]
fn target_evaluations_stay_within_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let s = run(tiny(), tmp.path());
    assert_eq!(s.eval_budget, 32 * 40 + 3 * 500);
    assert!(s.target_evals <= s.eval_budget, "{} > {}", s.target_evals, s.eval_budget);
    assert!(s.target_evals > 0);
}

#[test]
fn identical_seeds_give_identical_metrics() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(tiny(), a.path());
    run(tiny(), b.path());
    assert_eq!(read(a.path().join("metrics.csv")), read(b.path().join("metrics.csv")));
    assert_eq!(read(a.path().join("curves.csv")), read(b.path().join("curves.csv")));
    let c = tempfile::tempdir().unwrap();
    let mut other = tiny();
    other.seed = 12;
    run(other, c.path());
    assert_ne!(read(a.path().join("metrics.csv")), read(c.path().join("metrics.csv")));
}

#[test]
fn resuming_reproduces_an_uninterrupted_run() {
    let (full, part) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(tiny(), full.path());
    let mut p = Pipeline::open(tiny(), part.path()).unwrap();
    let m = p.pretrain().unwrap();
    p.anneal(m, 0).unwrap();
    let ck = part.path().join("checkpoints/stage_02.ckpt");
    // discard the last stage and pick up from stage 2 in a fresh process
    std::fs::remove_file(part.path().join("checkpoints/stage_03.ckpt")).unwrap();
    let metrics: Vec<String> = read(part.path().join("metrics.csv")).lines().take(4).map(String::from).collect();
    std::fs::write(part.path().join("metrics.csv"), metrics.join("\n") + "\n").unwrap();
    let mut q = Pipeline::open(tiny(), part.path()).unwrap();
    q.run(Some(&ck)).unwrap();
    assert_eq!(read(full.path().join("metrics.csv")), read(part.path().join("metrics.csv")));
    let a = load_checkpoint(&full.path().join("checkpoints/stage_03.ckpt"), None).unwrap();
    let b = load_checkpoint(&part.path().join("checkpoints/stage_03.ckpt"), None).unwrap();
    assert_eq!(a.model.params().flatten(), b.model.params().flatten());
}

#[test]
fn no_op_schedule_keeps_pretrained_parameters() {
    let text = TINY
        .replace("kind = \"geometric\"\ntarget = 1.0\nlevels = 3\nfine_tune = 1", "kind = \"explicit\"\ntemperatures = [30.0, 30.0]")
        .replace("forward_steps = 15", "forward_steps = 0");
    let cfg = RunConfig::from_toml_str(&text).unwrap();
    assert_eq!(cfg.temperatures().unwrap(), vec![30.0, 30.0]);
    let tmp = tempfile::tempdir().unwrap();
    let s = run(cfg, tmp.path());
    assert_eq!(s.final_stage, 1);
    let a = load_checkpoint(&tmp.path().join("checkpoints/stage_00.ckpt"), None).unwrap();
    let b = load_checkpoint(&tmp.path().join("checkpoints/stage_01.ckpt"), None).unwrap();
    assert_eq!(a.model.params().flatten(), b.model.params().flatten());
}

#[test]
fn run_directory_rejects_another_config() {
    let tmp = tempfile::tempdir().unwrap();
    Pipeline::open(tiny(), tmp.path()).unwrap();
    let mut other = tiny();
    other.seed = 3;
    let err = Pipeline::open(other, tmp.path()).err().unwrap().to_string();
    assert!(err.contains("different configuration"), "{err}");
}

#[test]
fn invalid_fields_are_named() {
    let err = RunConfig::from_toml_str(&TINY.replace("draws = 500", "draws = 0")).unwrap_err().to_string();
    assert!(err.contains("annealing"), "{err}");
    let err = RunConfig::from_toml_str(&TINY.replace("batch_size = 32\nsteps = 40", "batch_size = 0\nsteps = 40"))
        .unwrap_err()
        .to_string();
    assert!(err.contains("pretrain.train"), "{err}");
    let err = RunConfig::from_toml_str(&TINY.replace("resolution = 6", "resolution = 0")).unwrap_err().to_string();
    assert!(err.contains("evaluation.grid"), "{err}");
}
