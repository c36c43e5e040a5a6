use std::path::{Path, PathBuf};
use std::process::ExitCode;

use annealflow::config::{RunConfig, GMM_DESK_CONFIG};
use annealflow::core::ais::{AisConfig, HmcConfig};
use annealflow::core::flow::{init_flow, FlowConfig};
use annealflow::core::SeedRng;
use annealflow::pipeline::{ais_demo, gradcheck, Pipeline, RunDir};
use annealflow::RunError;
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};

/// Temperature-annealed normalizing-flow sampler.
#[derive(Parser)]
#[command(name = "annealflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML). Defaults to the bundled desk-scale mixture.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the master seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory. Defaults to a timestamped directory under the
    /// configured output root, or the run of the --resume checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stage checkpoint to continue from or to evaluate.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Pretraining, every annealing stage, evaluation and plots.
    Run(Common),
    /// Reverse KL pretraining only (stage 0).
    Pretrain(Common),
    /// Annealing stages after --resume (or the latest checkpoint in --out).
    Anneal(Common),
    /// Metrics of a checkpoint, appended to metrics.csv and printed.
    Evaluate(Common),
    /// Free-energy grids and heatmaps of a checkpoint.
    Plot(Common),
    /// Dimension sweep of importance sampling against AIS.
    AisDemo {
        #[arg(long, default_value = "ais-demo")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated dimensions.
        #[arg(long, default_value = "1,2,4,8,16,32,64", value_delimiter = ',')]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        /// Intermediate distributions of the fixed-length AIS column.
        #[arg(long, default_value_t = 10)]
        intermediates: usize,
    },
    /// Compares analytic loss gradients with finite differences.
    Gradcheck {
        /// Check the flow of this configuration instead of a small test flow.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        probes: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
    },
}

fn load_config(c: &Common) -> Result<RunConfig, RunError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::from_toml_str(GMM_DESK_CONFIG)?,
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Run directory that owns a checkpoint at `<run>/checkpoints/stage_NN.ckpt`.
fn run_of_checkpoint(ckpt: &Path) -> Option<PathBuf> {
    let run = ckpt.parent()?.parent()?;
    run.join("config.snapshot").exists().then(|| run.to_path_buf())
}

fn open(c: &Common) -> Result<Pipeline, RunError> {
    let cfg = load_config(c)?;
    let root = c
        .out
        .clone()
        .or_else(|| c.resume.as_deref().and_then(run_of_checkpoint))
        .unwrap_or_else(|| RunDir::timestamped(&cfg.output.root, &cfg.name));
    let mut p = Pipeline::open(cfg, &root)?;
    p.verbose = !c.quiet;
    if p.verbose {
        eprintln!("run directory {}", root.display());
    }
    Ok(p)
}

fn checkpoint_arg(p: &Pipeline, c: &Common) -> Result<PathBuf, RunError> {
    c.resume
        .clone()
        .or_else(|| p.dir.latest_checkpoint())
        .ok_or_else(|| RunError::Config("no checkpoint: pass --resume or an --out directory with checkpoints".into()))
}

fn execute(cmd: Command) -> Result<(), RunError> {
    match cmd {
        Command::Run(c) => {
            let mut p = open(&c)?;
            let s = p.run(c.resume.as_deref())?;
            print!("{}", s.evaluation.report.to_key_value());
            if let Some((k, n)) = s.evaluation.coverage {
                println!("modes_covered={k}/{n}");
            }
            println!("target_evals={}", s.target_evals);
            println!("target_eval_budget={}", s.eval_budget);
            println!("run_dir={}", s.dir.display());
        }
        Command::Pretrain(c) => {
            let mut p = open(&c)?;
            p.pretrain()?;
            println!("checkpoint={}", p.dir.checkpoint(0).display());
        }
        Command::Anneal(c) => {
            let mut p = open(&c)?;
            let ck = p.load(&checkpoint_arg(&p, &c)?)?;
            let stage = ck.stage;
            p.anneal(ck.model, stage)?;
            println!("checkpoint={}", p.dir.checkpoint(p.final_stage()).display());
        }
        Command::Evaluate(c) => {
            let p = open(&c)?;
            let ck = p.load(&checkpoint_arg(&p, &c)?)?;
            let e = p.evaluate(&ck.model, ck.stage)?;
            println!("stage={}", e.stage);
            println!("temperature={}", e.temperature);
            print!("{}", e.report.to_key_value());
            if let Some((k, n)) = e.coverage {
                println!("modes_covered={k}/{n}");
            }
        }
        Command::Plot(c) => {
            let p = open(&c)?;
            let ck = p.load(&checkpoint_arg(&p, &c)?)?;
            for path in p.plot(&ck.model, ck.stage)? {
                println!("{}", path.display());
            }
        }
        Command::AisDemo { out, seed, dims, samples, intermediates } => {
            let mut dims = dims;
            dims.sort_unstable();
            let template = AisConfig { dim: 1, intermediates, samples, hmc: HmcConfig::default(), seed };
            println!("N,ess_is,ess_ais_fixed,ess_ais_scaled");
            for r in ais_demo(&out, &dims, &template)? {
                println!("{},{:.6},{:.6},{:.6}", r.dim, r.ess_is, r.ess_ais_fixed, r.ess_ais_scaled);
            }
        }
        Command::Gradcheck { config, seed, probes, batch } => {
            let mut rng = SeedRng::seed_from_u64(seed);
            let (flow, target, t) = match config {
                Some(path) => {
                    let cfg = RunConfig::load(&path)?;
                    (cfg.flow.clone(), cfg.target.build()?, cfg.pretrain.temperature)
                }
                None => {
                    let flow = FlowConfig { layers: 2, hidden: vec![8], ..FlowConfig::gmm() };
                    (flow, RunConfig::from_toml_str(GMM_DESK_CONFIG)?.target.build()?, 30.0)
                }
            };
            let mut model = init_flow(&flow, &mut rng)?;
            // move away from the identity initialization
            let p: Vec<f64> = model.params().flatten().iter().map(|v| v + 0.1 * (rng.random::<f64>() - 0.5)).collect();
            model.params_mut().assign_flat(&p);
            let g = gradcheck(&mut model, &target, t, batch, probes, &mut rng)?;
            println!("probes={}", g.probes);
            println!("reverse_kld_max_rel_error={:e}", g.reverse_max_rel);
            println!("forward_kld_max_rel_error={:e}", g.forward_max_rel);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
