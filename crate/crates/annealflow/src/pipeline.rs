//! The pretrain → anneal → evaluate pipeline and its run directory.
//!
//! ```text
//! <run>/
//!   config.snapshot          canonical TOML of the run configuration
//!   checkpoints/stage_NN.ckpt
//!   metrics.csv              see crate::csv::METRICS_HEADER
//!   curves.csv               training curves, every `curve_interval` steps
//!   grids/*.csv              free-energy grids
//!   plots/*.ppm              heatmaps of those grids
//! ```
//!
//! Stage 0 is pretraining, stage `i` the `i`-th annealing iteration. Every
//! stage draws from its own generator seeded with
//! [`derive_seed`]`(seed, stage)`, and evaluation uses stage
//! [`EVAL_SEED_STAGE`], so resuming from any checkpoint reproduces the rows
//! an uninterrupted run would have written.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use annealflow_core::annealing::{clip_top_weights, importance_log_weights, run_annealing, AnnealingSchedule};
use annealflow_core::diffgraph::Dense;
use annealflow_core::flow::{init_flow, FlowModel};
use annealflow_core::metrics::{nll, reverse_ess, Hist2d, MetricsReport};
use annealflow_core::targets::{tempered_logdensities, CountingTarget, Target, TargetDensity};
use annealflow_core::training::{forward_kld_loss_grad, reverse_kld_loss_grad, train_reverse_kld, TrainConfig};
use annealflow_core::{Error, SeedRng};
use rand::SeedableRng;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{GridConfig, RunConfig};
use crate::csv::{self, CsvWriter, CURVES_HEADER, METRICS_HEADER};
use crate::image::{log_curve_plot, render_heatmap, FreeEnergyGrid};
use crate::{derive_seed, RunError};

/// Seed stage of the evaluation generator.
pub const EVAL_SEED_STAGE: u64 = 10_000;

/// Probability floor of histogram heatmaps.
pub const HIST_FLOOR: f64 = 1e-12;

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// `parent/<name>-<unix seconds>`, with a numeric suffix if taken.
    pub fn timestamped(parent: &Path, name: &str) -> PathBuf {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let base = parent.join(format!("{name}-{secs}"));
        let mut path = base.clone();
        let mut k = 1;
        while path.exists() {
            path = PathBuf::from(format!("{}-{k}", base.display()));
            k += 1;
        }
        path
    }

    pub fn create(root: &Path) -> Result<Self, RunError> {
        let dir = Self { root: root.to_path_buf() };
        for d in [dir.root.clone(), dir.checkpoints(), dir.grids(), dir.plots()] {
            std::fs::create_dir_all(&d).map_err(RunError::io(&d))?;
        }
        Ok(dir)
    }

    pub fn config_snapshot(&self) -> PathBuf {
        self.root.join("config.snapshot")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, stage: usize) -> PathBuf {
        self.checkpoints().join(format!("stage_{stage:02}.ckpt"))
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn curves(&self) -> PathBuf {
        self.root.join("curves.csv")
    }

    pub fn grids(&self) -> PathBuf {
        self.root.join("grids")
    }

    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }

    /// Highest-numbered stage checkpoint present.
    pub fn latest_checkpoint(&self) -> Option<PathBuf> {
        let mut best: Option<(usize, PathBuf)> = None;
        for entry in std::fs::read_dir(self.checkpoints()).ok()?.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            let stage = name.strip_prefix("stage_").and_then(|s| s.strip_suffix(".ckpt")).and_then(|s| s.parse().ok());
            if let Some(s) = stage {
                if best.as_ref().is_none_or(|(b, _)| s > *b) {
                    best = Some((s, entry.path()));
                }
            }
        }
        best.map(|(_, p)| p)
    }
}

/// Results of evaluating one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub stage: usize,
    pub temperature: f64,
    pub report: MetricsReport,
    /// `(covered, total)` mixture means, when measured.
    pub coverage: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub final_stage: usize,
    /// Target energy evaluations spent by training stages in this process.
    pub target_evals: u64,
    /// Pretraining batch × steps plus the draw count of every annealing
    /// iteration run in this process.
    pub eval_budget: u64,
    pub evaluation: Evaluation,
}

pub struct Pipeline {
    pub config: RunConfig,
    pub dir: RunDir,
    target: Target,
    temperatures: Vec<f64>,
    /// Progress lines on stderr.
    pub verbose: bool,
    target_evals: u64,
    eval_budget: u64,
}

impl Pipeline {
    /// Opens (or creates) the run directory and writes the configuration
    /// snapshot. An existing snapshot must match `config`.
    pub fn open(config: RunConfig, root: &Path) -> Result<Self, RunError> {
        config.validate()?;
        let dir = RunDir::create(root)?;
        let text = config.to_toml();
        let snap = dir.config_snapshot();
        match std::fs::read_to_string(&snap) {
            Ok(old) if old != text => {
                return Err(RunError::Config(format!(
                    "{} belongs to a different configuration",
                    dir.root.display()
                )))
            }
            Ok(_) => {}
            Err(_) => csv::write_text(&snap, &text)?,
        }
        let target = config.target.build()?;
        let temperatures = config.temperatures()?;
        Ok(Self { config, dir, target, temperatures, verbose: false, target_evals: 0, eval_budget: 0 })
    }

    pub fn target(&self) -> &Target {
        &self.target
    }

    /// Temperature of the model after `stage`.
    pub fn stage_temperature(&self, stage: usize) -> f64 {
        self.temperatures[stage.min(self.temperatures.len() - 1)]
    }

    /// Index of the last stage.
    pub fn final_stage(&self) -> usize {
        self.temperatures.len() - 1
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn stage_rng(&self, stage: u64) -> SeedRng {
        SeedRng::seed_from_u64(derive_seed(self.config.seed, stage))
    }

    fn writers(&self) -> Result<(CsvWriter, CsvWriter), RunError> {
        Ok((
            CsvWriter::append(&self.dir.metrics(), METRICS_HEADER)?,
            CsvWriter::append(&self.dir.curves(), CURVES_HEADER)?,
        ))
    }

    /// Initializes the flow and trains it by reverse KL at the pretraining
    /// temperature. Writes `stage_00.ckpt`.
    pub fn pretrain(&mut self) -> Result<FlowModel, RunError> {
        let start = Instant::now();
        let mut rng = self.stage_rng(0);
        let mut model = init_flow(&self.config.flow, &mut rng)?;
        let (mut metrics, mut curves) = self.writers()?;
        let cfg = &self.config.pretrain.train;
        let t = self.config.pretrain.temperature;
        let counter = CountingTarget::new(&self.target);
        let interval = self.config.output.curve_interval;
        let verbose = self.verbose;
        let mut io = Ok(());
        let summary = train_reverse_kld(&mut model, &counter, t, cfg, &mut rng, &mut |step, rep| {
            if step % interval == 0 || step + 1 == cfg.steps {
                if io.is_ok() {
                    io = curves.line(&csv::curve_row(0, step, rep));
                }
                if verbose && step % (interval * 10) == 0 {
                    eprintln!("  pretrain step {step:>6}  loss {:.5}", rep.loss);
                }
            }
        })?;
        io?;
        let evals = counter.count();
        self.target_evals += evals;
        self.eval_budget += (cfg.batch_size * cfg.steps) as u64;
        let loss = summary.last.map_or(f64::NAN, |r| r.loss);
        metrics.line(&csv::pretrain_row(t, loss, evals, summary.aborted))?;
        metrics.flush()?;
        curves.flush()?;
        save_checkpoint(&model, 0, &self.dir.checkpoint(0))?;
        self.log(format!("pretrain done at T={t} in {:.1?}, loss {loss:.5}", start.elapsed()));
        Ok(model)
    }

    /// Runs annealing iterations `from + 1 ..= final_stage()`, checkpointing
    /// after each one.
    pub fn anneal(&mut self, mut model: FlowModel, from: usize) -> Result<FlowModel, RunError> {
        let (mut metrics, mut curves) = self.writers()?;
        let a = &self.config.annealing;
        let interval = self.config.output.curve_interval;
        let train: TrainConfig = a.train.clone();
        for stage in from + 1..=self.final_stage() {
            let start = Instant::now();
            let schedule = AnnealingSchedule {
                temperatures: vec![self.temperatures[stage - 1], self.temperatures[stage]],
                draws: a.draws,
                resample: a.resample,
                forward_steps: a.forward_steps,
                clip_fraction: a.clip_fraction,
            };
            let mut rng = self.stage_rng(stage as u64);
            let counter = CountingTarget::new(&self.target);
            let mut io = Ok(());
            let mut reports = run_annealing(
                &mut model,
                &counter,
                &schedule,
                &train,
                &mut rng,
                &mut |_, _| Ok(()),
                &mut |_, step, rep| {
                    if (step % interval == 0 || step + 1 == schedule.forward_steps) && io.is_ok() {
                        io = curves.line(&csv::curve_row(stage, step, rep));
                    }
                },
            )
            .map_err(|e| match e {
                Error::Annealing { source, .. } => Error::Annealing { iteration: stage, source },
                e => e,
            })?;
            io?;
            let mut report = reports.pop().expect("one iteration per stage");
            report.iteration = stage;
            report.target_evals = counter.count();
            self.target_evals += report.target_evals;
            self.eval_budget += a.draws as u64;
            metrics.line(&csv::iteration_row(&report))?;
            metrics.flush()?;
            curves.flush()?;
            save_checkpoint(&model, stage, &self.dir.checkpoint(stage))?;
            self.log(format!(
                "stage {stage:>2}: T {:.4} -> {:.4}  buffer ESS {:.4}  loss {:.5}  ({:.1?})",
                report.t_from,
                report.t_to,
                report.buffer_ess,
                report.final_loss,
                start.elapsed()
            ));
        }
        Ok(model)
    }

    /// NLL, reverse ESS, histogram divergences and mode coverage of `model`.
    /// NLL and histograms compare against exact samples of the target
    /// itself; the ESS is taken at the temperature of `stage`. Appends an
    /// `eval` row to metrics.csv.
    pub fn evaluate(&self, model: &FlowModel, stage: usize) -> Result<Evaluation, RunError> {
        let ev = &self.config.evaluation;
        let temperature = self.stage_temperature(stage);
        let reg = self.config.annealing.train.regularization.as_ref();
        let mut rng = self.stage_rng(EVAL_SEED_STAGE);
        let truth = self.reference_samples(ev.nll_samples, &mut rng)?;
        let nll_report = nll(model, &truth)?;
        let (x, lq) = model.sample(ev.ess_samples, &mut rng)?;
        let logw = importance_log_weights(&lq, &self.target, temperature, &x, reg)?;
        let ess = reverse_ess(&logw)?;
        let (mut hist_kld, mut hist_kld_reweighted) = (None, None);
        if let Some(h) = &ev.histogram {
            let ranges = h.ranges.map(|[a, b]| (a, b));
            let reference = self.reference_samples(h.reference_samples, &mut rng)?;
            let (xm, lqm) = model.sample(h.model_samples, &mut rng)?;
            let lw = importance_log_weights(&lqm, &self.target, temperature, &xm, reg)?;
            let lw = clip_top_weights(&lw, ev.clip_fraction);
            let p = Hist2d::build(&reference, h.bins, ranges, None)?;
            let q = Hist2d::build(&xm, h.bins, ranges, None)?;
            let qw = Hist2d::build(&xm, h.bins, ranges, Some(&lw))?;
            hist_kld = Some(p.kld_to(&q));
            hist_kld_reweighted = Some(p.kld_to(&qw));
        }
        let coverage = match &self.target {
            Target::Gmm(g) if ev.coverage_samples > 0 => {
                let (xc, _) = model.sample(ev.coverage_samples, &mut rng)?;
                let r2 = ev.coverage_radius * ev.coverage_radius;
                let covered = (0..g.components())
                    .filter(|&k| {
                        let mu = g.mean(k);
                        (0..xc.rows()).any(|r| xc.row(r).iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() < r2)
                    })
                    .count();
                Some((covered, g.components()))
            }
            _ => None,
        };
        let report = MetricsReport {
            nll: nll_report.nll,
            nll_sentinels: nll_report.sentinel_hits,
            reverse_ess: ess,
            hist_kld,
            hist_kld_reweighted,
            nll_samples: ev.nll_samples,
            ess_samples: ev.ess_samples,
            clip_fraction: ev.clip_fraction,
        };
        let mut metrics = CsvWriter::append(&self.dir.metrics(), METRICS_HEADER)?;
        metrics.line(&csv::eval_row(stage, temperature, &report, coverage))?;
        metrics.flush()?;
        let cov = coverage.map_or(String::new(), |(c, n)| format!("  modes {c}/{n}"));
        self.log(format!("evaluation at stage {stage}: NLL {:.4}  ESS {:.4}{cov}", report.nll, report.reverse_ess));
        Ok(Evaluation { stage, temperature, report, coverage })
    }

    fn reference_samples(&self, n: usize, rng: &mut SeedRng) -> Result<Dense, RunError> {
        self.target.sample(n, rng).ok_or_else(|| RunError::Config("target has no exact sampler".into()))
    }

    /// Free-energy grids and heatmaps of the model at `stage` and of the
    /// target at the same temperature, plus histogram heatmaps when
    /// configured. Returns the written image paths.
    pub fn plot(&self, model: &FlowModel, stage: usize) -> Result<Vec<PathBuf>, RunError> {
        let mut written = Vec::new();
        let temperature = self.stage_temperature(stage);
        if let Some(g) = &self.config.evaluation.grid {
            let pts = grid_points(g);
            let model_lp = model.log_prob(&pts)?;
            let target_lp = tempered_logdensities(&self.target, temperature, &pts, None)?;
            for (name, lp) in [(format!("model_stage_{stage:02}"), model_lp), (format!("target_t{stage:02}"), target_lp)] {
                let grid = FreeEnergyGrid::from_log_density(
                    g.resolution,
                    g.resolution,
                    g.ranges.map(|[a, b]| (a, b)),
                    &lp,
                    f64::MIN_POSITIVE,
                );
                let img = self.dir.plots().join(format!("{name}.ppm"));
                render_heatmap(&grid, g.free_energy_span, g.pixel_scale, &img, &self.dir.grids().join(format!("{name}.csv")))?;
                written.push(img);
            }
        }
        if let (Some(h), Some(g)) = (&self.config.evaluation.histogram, &self.config.evaluation.grid) {
            let mut rng = self.stage_rng(EVAL_SEED_STAGE + 1);
            let (xm, _) = model.sample(h.model_samples, &mut rng)?;
            let hist = Hist2d::build(&xm, h.bins, h.ranges.map(|[a, b]| (a, b)), None)?;
            let grid = FreeEnergyGrid::from_hist(&hist, HIST_FLOOR);
            let name = format!("hist_stage_{stage:02}");
            let img = self.dir.plots().join(format!("{name}.ppm"));
            let scale = (g.resolution * g.pixel_scale).div_ceil(h.bins).max(1);
            render_heatmap(&grid, g.free_energy_span, scale, &img, &self.dir.grids().join(format!("{name}.csv")))?;
            written.push(img);
        }
        Ok(written)
    }

    /// Loads the checkpoint of a stage, checking it against this run's
    /// flow configuration.
    pub fn load(&self, path: &Path) -> Result<Checkpoint, RunError> {
        let ck = load_checkpoint(path, Some(&self.config.flow))?;
        if ck.stage > self.final_stage() {
            return Err(RunError::Config(format!(
                "checkpoint stage {} is past the last stage {}",
                ck.stage,
                self.final_stage()
            )));
        }
        Ok(ck)
    }

    /// Full run: pretraining (or `resume`), the remaining annealing stages,
    /// evaluation at the final temperature and plots.
    pub fn run(&mut self, resume: Option<&Path>) -> Result<RunSummary, RunError> {
        let (model, from) = match resume {
            Some(p) => {
                let ck = self.load(p)?;
                self.log(format!("resuming after stage {}", ck.stage));
                (ck.model, ck.stage)
            }
            None => (self.pretrain()?, 0),
        };
        let model = self.anneal(model, from)?;
        let last = self.final_stage();
        let evaluation = self.evaluate(&model, last)?;
        self.plot(&model, last)?;
        Ok(RunSummary {
            dir: self.dir.root.clone(),
            final_stage: last,
            target_evals: self.target_evals,
            eval_budget: self.eval_budget,
            evaluation,
        })
    }
}

/// Cell centers of a grid, x-major.
pub fn grid_points(g: &GridConfig) -> Dense {
    let n = g.resolution;
    let mut pts = Dense::zeros(n * n, 2);
    let [[x0, x1], [y0, y1]] = g.ranges;
    for i in 0..n {
        for j in 0..n {
            let row = pts.row_mut(i * n + j);
            row[0] = x0 + (i as f64 + 0.5) * (x1 - x0) / n as f64;
            row[1] = y0 + (j as f64 + 0.5) * (y1 - y0) / n as f64;
        }
    }
    pts
}

/// Largest relative deviation between analytic and central finite
/// difference gradients of both losses, over `probes` randomly chosen
/// parameters of `model` (all of them when `probes` covers the count).
/// Relative errors use `max(|fd|, |analytic|, 1e-4)` as the denominator so
/// vanishing gradients are compared absolutely.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub reverse_max_rel: f64,
    pub forward_max_rel: f64,
    pub probes: usize,
}

pub fn gradcheck<D: TargetDensity + ?Sized>(
    model: &mut FlowModel,
    target: &D,
    temperature: f64,
    batch: usize,
    probes: usize,
    rng: &mut SeedRng,
) -> Result<GradCheck, RunError> {
    use rand::Rng;
    let dim = model.dim();
    let mut z = Dense::zeros(batch, dim);
    for r in 0..batch {
        model.base().sample_into(rng, z.row_mut(r));
    }
    let (x, _) = model.sample(batch, rng)?;
    let cfg = TrainConfig::new(batch, 1, 0.0);
    let total = model.params().scalar_count();
    let picks: Vec<usize> =
        if probes >= total { (0..total).collect() } else { (0..probes).map(|_| rng.random_range(0..total)).collect() };
    let h = 1e-5;
    let mut worst = [0.0f64; 2];
    for (which, w) in worst.iter_mut().enumerate() {
        let loss = |m: &mut FlowModel| -> Result<f64, Error> {
            Ok(if which == 0 {
                reverse_kld_loss_grad(m, target, temperature, &z, &cfg)?.loss
            } else {
                forward_kld_loss_grad(m, &x, cfg.micro_batch)?.loss
            })
        };
        loss(model)?;
        let analytic = model.params().flatten_grad();
        let base = model.params().flatten();
        for &k in &picks {
            let mut p = base.clone();
            p[k] = base[k] + h;
            model.params_mut().assign_flat(&p);
            let up = loss(model)?;
            p[k] = base[k] - h;
            model.params_mut().assign_flat(&p);
            let down = loss(model)?;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-4);
            *w = w.max(rel);
        }
        model.params_mut().assign_flat(&base);
    }
    Ok(GradCheck { reverse_max_rel: worst[0], forward_max_rel: worst[1], probes: picks.len() })
}

/// Dimension sweep of IS against AIS, written as `ais_curve.csv` and a
/// log-scale plot `ais_curve.ppm` under `out`.
pub fn ais_demo(
    out: &Path,
    dims: &[usize],
    template: &annealflow_core::ais::AisConfig,
) -> Result<Vec<annealflow_core::ais::CurveRow>, RunError> {
    std::fs::create_dir_all(out).map_err(RunError::io(out))?;
    let rows = annealflow_core::ais::is_vs_ais_curve(dims, template)?;
    let mut w = CsvWriter::create(&out.join("ais_curve.csv"), "N,ess_is,ess_ais_fixed,ess_ais_scaled")?;
    for r in &rows {
        w.line(&format!("{},{},{},{}", r.dim, csv::num(r.ess_is), csv::num(r.ess_ais_fixed), csv::num(r.ess_ais_scaled)))?;
    }
    w.flush()?;
    let xs: Vec<f64> = rows.iter().map(|r| r.dim as f64).collect();
    let series = vec![
        rows.iter().map(|r| r.ess_is).collect(),
        rows.iter().map(|r| r.ess_ais_fixed).collect(),
        rows.iter().map(|r| r.ess_ais_scaled).collect(),
    ];
    let img = log_curve_plot(&xs, &series, 480, 320);
    let path = out.join("ais_curve.ppm");
    std::fs::write(&path, img.to_ppm()).map_err(RunError::io(&path))?;
    Ok(rows)
}
