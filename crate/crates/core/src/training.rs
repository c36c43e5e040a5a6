//! Reverse KL training from target energies, forward KL (maximum
//! likelihood) training on sample buffers, Adam and learning-rate schedules.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffgraph::{Dense, ParamStore};
use crate::flow::{Direction, FlowModel, SplineKind};
use crate::targets::{check_temperature, EnergyRegularization, TargetDensity};
use crate::{is_valid_log, math, Error};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    #[default]
    Constant,
    /// One half-cosine from the base rate down to zero.
    Cosine,
    /// Linear ramp from zero over the warmup steps, then the cosine.
    WarmupCosine,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub base: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    /// Learning rate at `step`; steps past the end are clamped to the end.
    pub fn lr_at(&self, step: usize) -> f64 {
        let step = step.min(self.total);
        let cosine = |s: usize, span: usize| {
            if span == 0 {
                return 0.0;
            }
            0.5 * self.base * (1.0 + math::cos(core::f64::consts::PI * s as f64 / span as f64))
        };
        match self.kind {
            ScheduleKind::Constant => self.base,
            ScheduleKind::Cosine => cosine(step, self.total),
            ScheduleKind::WarmupCosine => {
                let warmup = self.warmup.min(self.total);
                if step < warmup {
                    self.base * step as f64 / warmup as f64
                } else if step == warmup {
                    self.base
                } else {
                    cosine(step - warmup, self.total - warmup)
                }
            }
        }
    }
}

pub fn lr_at(schedule: &LrSchedule, step: usize) -> f64 {
    schedule.lr_at(step)
}

fn default_micro_batch() -> usize {
    1024
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    #[serde(default)]
    pub schedule: ScheduleKind,
    #[serde(default)]
    pub warmup_steps: usize,
    /// Global gradient-norm limit.
    #[serde(default)]
    pub clip_grad_norm: Option<f64>,
    /// Number of highest-energy samples dropped from each reverse-KL batch.
    #[serde(default)]
    pub remove_top_k: usize,
    #[serde(default)]
    pub regularization: Option<EnergyRegularization>,
    /// Rows traced at once; bounds the memory of one gradient pass.
    #[serde(default = "default_micro_batch")]
    pub micro_batch: usize,
}

impl TrainConfig {
    pub fn new(batch_size: usize, steps: usize, lr: f64) -> Self {
        Self {
            batch_size,
            steps,
            lr,
            schedule: ScheduleKind::Constant,
            warmup_steps: 0,
            clip_grad_norm: None,
            remove_top_k: 0,
            regularization: None,
            micro_batch: default_micro_batch(),
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("lr must be finite and non-negative".into()));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_grad_norm must be positive".into()));
            }
        }
        if self.remove_top_k >= self.batch_size {
            return Err(Error::Config("remove_top_k must be smaller than batch_size".into()));
        }
        if self.micro_batch == 0 {
            return Err(Error::Config("micro_batch must be positive".into()));
        }
        if let Some(r) = &self.regularization {
            r.validate()?;
        }
        Ok(())
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule { kind: self.schedule, base: self.lr, warmup: self.warmup_steps, total: self.steps }
    }
}

/// Adam moments for every parameter array of one store.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    beta1_pow: f64,
    beta2_pow: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn adam(params: &ParamStore) -> Self {
        let shapes: Vec<usize> = params.iter().map(|(_, v, _)| v.len()).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            beta1_pow: 1.0,
            beta2_pow: 1.0,
            m: shapes.iter().map(|&n| alloc::vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| alloc::vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One Adam update from the gradients currently held by `params`.
    pub fn update(&mut self, params: &mut ParamStore, lr: f64) {
        self.step += 1;
        self.beta1_pow *= self.beta1;
        self.beta2_pow *= self.beta2;
        let (c1, c2) = (1.0 - self.beta1_pow, 1.0 - self.beta2_pow);
        for ((value, grad), (m, v)) in params.iter_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                value[i] -= lr * mhat / (math::sqrt(vhat) + self.eps);
            }
        }
    }
}

/// Global L2 norm of all gradient accumulators.
pub fn grad_norm(params: &ParamStore) -> f64 {
    math::sqrt(params.iter().flat_map(|(_, _, g)| g.iter()).map(|g| g * g).sum())
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in params.iter_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// `false` for the `remove` entries with the largest energy (NaN counts as
/// largest, ties keep the earlier index).
pub fn keep_mask(energies: &[f64], remove: usize) -> Vec<bool> {
    let key = |e: f64| if e.is_nan() { f64::INFINITY } else { e };
    let mut order: Vec<usize> = (0..energies.len()).collect();
    order.sort_by(|&a, &b| key(energies[b]).total_cmp(&key(energies[a])));
    let mut keep = alloc::vec![true; energies.len()];
    for &i in order.iter().take(remove) {
        keep[i] = false;
    }
    keep
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepReport {
    pub loss: f64,
    pub lr: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub removed: usize,
    /// Rows skipped because their log-density was not finite.
    pub excluded: usize,
}

/// Loss value and bookkeeping from a gradient pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOutcome {
    pub loss: f64,
    pub removed: usize,
    pub excluded: usize,
}

fn scale_grads(params: &mut ParamStore, s: f64) {
    for (_, g) in params.iter_mut() {
        g.iter_mut().for_each(|x| *x *= s);
    }
}

fn grads_finite(params: &ParamStore) -> bool {
    params.iter().all(|(_, _, g)| g.iter().all(|x| x.is_finite()))
}

/// Reverse KL loss `mean_i [E(g(z_i)) / T - log|det J_{z->x}(z_i)|]` over the
/// kept rows of `z`, with its parameter gradient left in the store.
pub fn reverse_kld_loss_grad<D: TargetDensity + ?Sized>(
    model: &mut FlowModel,
    target: &D,
    temperature: f64,
    z: &Dense,
    cfg: &TrainConfig,
) -> Result<LossOutcome, Error> {
    check_temperature(temperature)?;
    model.params_mut().zero_grad();
    let n = z.rows();
    let dim = model.dim();
    let micro = cfg.micro_batch.max(1);
    let reg = cfg.regularization.as_ref();

    // one trace when it fits, otherwise a plain forward pass for the energies
    // and a second traced pass per chunk for the gradient
    let single = if n <= micro { Some(model.trace(z, Direction::Forward)?) } else { None };
    let (x, ld) = match &single {
        Some(t) => (t.output().clone(), t.log_det().to_vec()),
        None => model.forward_map(z)?,
    };

    let mut energy = Vec::with_capacity(n);
    let mut slope = Vec::with_capacity(n);
    let mut egrad = Dense::zeros(n, dim);
    for r in 0..n {
        let e = target.energy_grad(x.row(r), egrad.row_mut(r));
        match reg {
            Some(g) => {
                energy.push(g.apply(e));
                slope.push(g.derivative(e));
            }
            None => {
                energy.push(e);
                slope.push(1.0);
            }
        }
    }
    let keep = keep_mask(&energy, cfg.remove_top_k);
    let kept = keep.iter().filter(|&&k| k).count();
    let mut total = 0.0;
    for r in 0..n {
        if keep[r] {
            total += energy[r] / temperature - ld[r];
        }
    }
    let loss = total / kept as f64;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(alloc::format!("reverse KL loss is {loss} at T = {temperature}")));
    }

    let inv = 1.0 / kept as f64;
    let cotangents = |rows: core::ops::Range<usize>| {
        let mut g_x = Dense::zeros(rows.len(), dim);
        let mut g_ld = alloc::vec![0.0; rows.len()];
        for (i, r) in rows.enumerate() {
            if keep[r] {
                let s = slope[r] * inv / temperature;
                for (o, &e) in g_x.row_mut(i).iter_mut().zip(egrad.row(r)) {
                    *o = s * e;
                }
                g_ld[i] = -inv;
            }
        }
        (g_x, g_ld)
    };
    match single {
        Some(t) => {
            let (g_x, g_ld) = cotangents(0..n);
            model.backprop(&t, &g_x, &g_ld)?;
        }
        None => {
            let mut start = 0;
            while start < n {
                let end = (start + micro).min(n);
                let chunk = Dense::from_vec(end - start, dim, z.data()[start * dim..end * dim].to_vec());
                let t = model.trace(&chunk, Direction::Forward)?;
                let (g_x, g_ld) = cotangents(start..end);
                model.backprop(&t, &g_x, &g_ld)?;
                start = end;
            }
        }
    }
    Ok(LossOutcome { loss, removed: n - kept, excluded: 0 })
}

fn in_support(model: &FlowModel, row: &[f64]) -> bool {
    model.config().dims.iter().zip(row).all(|(d, &v)| match d.kind {
        _ if !v.is_finite() => false,
        SplineKind::Circular => true,
        SplineKind::Standard => v >= d.lo && v <= d.hi,
    })
}

/// Forward KL (negative log-likelihood) loss `-mean_i log q(x_i)` with its
/// parameter gradient left in the store. Rows whose log-density is not
/// finite are excluded and counted.
pub fn forward_kld_loss_grad(model: &mut FlowModel, x: &Dense, micro_batch: usize) -> Result<LossOutcome, Error> {
    model.params_mut().zero_grad();
    let dim = model.dim();
    if x.cols() != dim {
        return Err(Error::Dimension { expected: dim, got: x.cols() });
    }
    let rows: Vec<usize> = (0..x.rows()).filter(|&r| in_support(model, x.row(r))).collect();
    let mut excluded = x.rows() - rows.len();
    let mut valid = 0usize;
    let mut total = 0.0;
    for chunk_rows in rows.chunks(micro_batch.max(1)) {
        let mut chunk = Dense::zeros(chunk_rows.len(), dim);
        for (i, &r) in chunk_rows.iter().enumerate() {
            chunk.row_mut(i).copy_from_slice(x.row(r));
        }
        let t = model.trace(&chunk, Direction::Inverse)?;
        let z = t.output();
        let mut g_z = Dense::zeros(chunk.rows(), dim);
        let mut g_ld = alloc::vec![0.0; chunk.rows()];
        for i in 0..chunk.rows() {
            let lq = model.base().log_density(z.row(i)) + t.log_det()[i];
            if is_valid_log(lq) {
                valid += 1;
                total += lq;
                model.base().grad_log_density(z.row(i), g_z.row_mut(i));
                g_z.row_mut(i).iter_mut().for_each(|g| *g = -*g);
                g_ld[i] = -1.0;
            } else {
                excluded += 1;
            }
        }
        model.backprop(&t, &g_z, &g_ld)?;
    }
    if valid == 0 {
        return Err(Error::NonFiniteLoss("every row of the batch has a non-finite log-density".into()));
    }
    scale_grads(model.params_mut(), 1.0 / valid as f64);
    Ok(LossOutcome { loss: -total / valid as f64, removed: 0, excluded })
}

fn apply_update(
    model: &mut FlowModel,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    step: usize,
    outcome: LossOutcome,
) -> Result<StepReport, Error> {
    if !grads_finite(model.params()) {
        return Err(Error::NonFiniteLoss("non-finite gradient".into()));
    }
    let norm = match cfg.clip_grad_norm {
        Some(c) => clip_grad_norm(model.params_mut(), c),
        None => grad_norm(model.params()),
    };
    let lr = cfg.lr_schedule().lr_at(step);
    opt.update(model.params_mut(), lr);
    Ok(StepReport { loss: outcome.loss, lr, grad_norm: norm, removed: outcome.removed, excluded: outcome.excluded })
}

/// One reverse KL update on a fresh batch drawn from the latent
/// distribution. On error the parameters are left untouched.
pub fn reverse_kld_step<D: TargetDensity + ?Sized, R: Rng + ?Sized>(
    model: &mut FlowModel,
    target: &D,
    temperature: f64,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    step: usize,
    rng: &mut R,
) -> Result<StepReport, Error> {
    let mut z = Dense::zeros(cfg.batch_size, model.dim());
    for r in 0..cfg.batch_size {
        model.base().sample_into(rng, z.row_mut(r));
    }
    let outcome = reverse_kld_loss_grad(model, target, temperature, &z, cfg)?;
    apply_update(model, cfg, opt, step, outcome)
}

/// One maximum-likelihood update on `batch`.
pub fn forward_kld_step(
    model: &mut FlowModel,
    batch: &Dense,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    step: usize,
) -> Result<StepReport, Error> {
    let outcome = forward_kld_loss_grad(model, batch, cfg.micro_batch)?;
    apply_update(model, cfg, opt, step, outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainSummary {
    pub steps: usize,
    /// Steps skipped because the loss or gradient was not finite.
    pub aborted: usize,
    pub last: Option<StepReport>,
}

/// Consecutive aborted steps after which training gives up.
const MAX_CONSECUTIVE_ABORTS: usize = 20;

fn record(
    summary: &mut TrainSummary,
    streak: &mut usize,
    step: usize,
    result: Result<StepReport, Error>,
    on_step: &mut dyn FnMut(usize, &StepReport),
) -> Result<(), Error> {
    summary.steps += 1;
    match result {
        Ok(rep) => {
            *streak = 0;
            on_step(step, &rep);
            summary.last = Some(rep);
            Ok(())
        }
        Err(Error::NonFiniteLoss(msg)) => {
            summary.aborted += 1;
            *streak += 1;
            if *streak >= MAX_CONSECUTIVE_ABORTS {
                return Err(Error::NonFiniteLoss(alloc::format!("{MAX_CONSECUTIVE_ABORTS} steps in a row: {msg}")));
            }
            Ok(())
        }
        Err(e) => Err(e),
    }
}

/// Runs `cfg.steps` reverse KL updates with a fresh Adam state.
pub fn train_reverse_kld<D: TargetDensity + ?Sized, R: Rng + ?Sized>(
    model: &mut FlowModel,
    target: &D,
    temperature: f64,
    cfg: &TrainConfig,
    rng: &mut R,
    on_step: &mut dyn FnMut(usize, &StepReport),
) -> Result<TrainSummary, Error> {
    cfg.validate()?;
    check_temperature(temperature)?;
    let mut opt = OptimizerState::adam(model.params());
    let mut summary = TrainSummary::default();
    let mut streak = 0;
    for step in 0..cfg.steps {
        let res = reverse_kld_step(model, target, temperature, cfg, &mut opt, step, rng);
        record(&mut summary, &mut streak, step, res, on_step)?;
    }
    Ok(summary)
}

/// Runs `cfg.steps` maximum-likelihood updates on mini-batches drawn from
/// `data` without replacement, reshuffling after every pass.
pub fn train_forward_kld<R: Rng + ?Sized>(
    model: &mut FlowModel,
    data: &Dense,
    cfg: &TrainConfig,
    rng: &mut R,
    on_step: &mut dyn FnMut(usize, &StepReport),
) -> Result<TrainSummary, Error> {
    cfg.validate()?;
    let mut summary = TrainSummary::default();
    if cfg.steps == 0 {
        return Ok(summary);
    }
    if data.rows() == 0 {
        return Err(Error::Parameter("forward KL training needs data".into()));
    }
    let dim = model.dim();
    let batch = cfg.batch_size.min(data.rows());
    let mut order: Vec<usize> = (0..data.rows()).collect();
    order.shuffle(rng);
    let mut cursor = 0;
    let mut opt = OptimizerState::adam(model.params());
    let mut streak = 0;
    let mut buf = Dense::zeros(batch, dim);
    for step in 0..cfg.steps {
        for i in 0..batch {
            if cursor == order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            buf.row_mut(i).copy_from_slice(data.row(order[cursor]));
            cursor += 1;
        }
        let res = forward_kld_step(model, &buf, cfg, &mut opt, step);
        record(&mut summary, &mut streak, step, res, on_step)?;
    }
    Ok(summary)
}
