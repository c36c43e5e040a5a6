//! Temperature annealing of a trained flow: draw a buffer, importance-weight
//! it to the next temperature, resample with replacement and refit with the
//! forward KL divergence.

use alloc::boxed::Box;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffgraph::Dense;
use crate::flow::FlowModel;
use crate::metrics::{normalized_weights, reverse_ess};
use crate::targets::{check_temperature, tempered_logdensities, EnergyRegularization, TargetDensity};
use crate::training::{train_forward_kld, StepReport, TrainConfig};
use crate::{is_valid_log, math, Error, LOG_ZERO};

/// `T_i = T_start (T_target / T_start)^((i - 1) / (K - 1))` for `i = 1..=K`.
pub fn geometric_schedule(t_start: f64, t_target: f64, levels: usize) -> Result<Vec<f64>, Error> {
    check_endpoints(t_start, t_target, levels)?;
    if levels == 1 {
        return Ok(alloc::vec![t_start]);
    }
    let ratio = t_target / t_start;
    let mut out: Vec<f64> =
        (0..levels).map(|i| t_start * math::powf(ratio, i as f64 / (levels - 1) as f64)).collect();
    out[levels - 1] = t_target;
    Ok(out)
}

/// Evenly spaced temperatures from `t_start` to `t_target`.
pub fn linear_schedule(t_start: f64, t_target: f64, levels: usize) -> Result<Vec<f64>, Error> {
    check_endpoints(t_start, t_target, levels)?;
    if levels == 1 {
        return Ok(alloc::vec![t_start]);
    }
    let step = (t_target - t_start) / (levels - 1) as f64;
    let mut out: Vec<f64> = (0..levels).map(|i| t_start + step * i as f64).collect();
    out[levels - 1] = t_target;
    Ok(out)
}

fn check_endpoints(t_start: f64, t_target: f64, levels: usize) -> Result<(), Error> {
    check_temperature(t_start)?;
    check_temperature(t_target)?;
    if t_target > t_start {
        return Err(Error::Parameter(alloc::format!("target temperature {t_target} exceeds start {t_start}")));
    }
    if levels == 0 {
        return Err(Error::Parameter("schedule needs at least one level".into()));
    }
    if levels == 1 && t_start != t_target {
        return Err(Error::Parameter("a one-level schedule needs equal endpoints".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealingSchedule {
    /// `T_1 >= T_2 >= ...`; repeated values are fine-tuning iterations.
    pub temperatures: Vec<f64>,
    /// Flow samples drawn per iteration.
    pub draws: usize,
    /// Size of the resampled training set.
    pub resample: usize,
    /// Forward KL steps per iteration.
    pub forward_steps: usize,
    /// Fraction of the largest log-weights clipped before resampling.
    #[serde(default)]
    pub clip_fraction: f64,
}

impl AnnealingSchedule {
    pub fn validate(&self) -> Result<(), Error> {
        if self.temperatures.is_empty() {
            return Err(Error::Config("annealing schedule has no temperatures".into()));
        }
        for &t in &self.temperatures {
            check_temperature(t)?;
        }
        if self.temperatures.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Config("annealing temperatures must be non-increasing".into()));
        }
        if self.draws == 0 || self.resample == 0 {
            return Err(Error::Config("draws and resample must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.clip_fraction) {
            return Err(Error::Config("clip_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn iterations(&self) -> usize {
        self.temperatures.len().saturating_sub(1)
    }
}

/// `log p_{T_next}(x_j) - log q(x_j)`, sentinel where either side is.
pub fn importance_log_weights<D: TargetDensity + ?Sized>(
    logq: &[f64],
    target: &D,
    t_next: f64,
    samples: &Dense,
    reg: Option<&EnergyRegularization>,
) -> Result<Vec<f64>, Error> {
    if logq.len() != samples.rows() {
        return Err(Error::Dimension { expected: samples.rows(), got: logq.len() });
    }
    let logp = tempered_logdensities(target, t_next, samples, reg)?;
    Ok(combine(&logp, logq))
}

fn combine(logp: &[f64], logq: &[f64]) -> Vec<f64> {
    logp.iter()
        .zip(logq)
        .map(|(&p, &q)| {
            let w = p - q;
            if is_valid_log(p) && is_valid_log(q) && is_valid_log(w) {
                w
            } else {
                LOG_ZERO
            }
        })
        .collect()
}

/// Sets the `k = ceil(fraction N)` largest log-weights to the k-th largest.
/// `k <= 1` leaves the weights unchanged.
pub fn clip_top_weights(logw: &[f64], fraction: f64) -> Vec<f64> {
    let mut out = logw.to_vec();
    let k = math::ceil(fraction * logw.len() as f64) as usize;
    if k <= 1 || k > logw.len() {
        return out;
    }
    let mut sorted = logw.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let kth = sorted[k - 1];
    out.iter_mut().filter(|w| **w > kth).for_each(|w| *w = kth);
    out
}

/// `m` indices drawn i.i.d. from the self-normalized categorical over
/// `exp(logw)`.
pub fn resample_buffer<R: Rng + ?Sized>(logw: &[f64], m: usize, rng: &mut R) -> Result<Vec<usize>, Error> {
    let w = normalized_weights(logw)?;
    let mut cum = Vec::with_capacity(w.len());
    let mut acc = 0.0;
    for &x in &w {
        acc += x;
        cum.push(acc);
    }
    let last = w.iter().rposition(|&x| x > 0.0).unwrap_or(0);
    Ok((0..m)
        .map(|_| {
            let u = rng.random::<f64>() * acc;
            cum.partition_point(|&c| c <= u).min(last)
        })
        .collect())
}

/// Self-normalized importance estimate `sum_j wbar_j h_j`.
pub fn estimate_expectation(h: &[f64], logw: &[f64]) -> Result<f64, Error> {
    if h.len() != logw.len() {
        return Err(Error::Dimension { expected: logw.len(), got: h.len() });
    }
    let w = normalized_weights(logw)?;
    Ok(h.iter().zip(&w).filter(|(_, &w)| w > 0.0).map(|(h, w)| h * w).sum())
}

/// One iteration's buffer and its resampled training set.
#[derive(Debug, Clone)]
pub struct WeightedBuffer {
    pub samples: Dense,
    /// Flow log-density at draw time.
    pub logq: Vec<f64>,
    /// Tempered target log-density at the next temperature.
    pub logp: Vec<f64>,
    /// Clipped log-weights used for resampling.
    pub logw: Vec<f64>,
    pub indices: Vec<usize>,
}

impl WeightedBuffer {
    /// Draws `draws` flow samples, weights them to `t_next`, clips and
    /// resamples `resample` rows.
    #[allow(clippy::too_many_arguments)]
    pub fn draw<D: TargetDensity + ?Sized, R: Rng + ?Sized>(
        model: &FlowModel,
        target: &D,
        t_next: f64,
        draws: usize,
        resample: usize,
        clip_fraction: f64,
        reg: Option<&EnergyRegularization>,
        rng: &mut R,
    ) -> Result<(Self, f64), Error> {
        let (samples, logq) = model.sample(draws, rng)?;
        let logp = tempered_logdensities(target, t_next, &samples, reg)?;
        let raw = combine(&logp, &logq);
        let ess = reverse_ess(&raw)?;
        let logw = clip_top_weights(&raw, clip_fraction);
        let indices = resample_buffer(&logw, resample, rng)?;
        Ok((Self { samples, logq, logp, logw, indices }, ess))
    }

    pub fn training_set(&self) -> Dense {
        let dim = self.samples.cols();
        let mut out = Dense::zeros(self.indices.len(), dim);
        for (r, &i) in self.indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.samples.row(i));
        }
        out
    }

    /// Entropy of the empirical distribution of resampled indices.
    pub fn resample_entropy(&self) -> f64 {
        let mut counts = alloc::vec![0u32; self.samples.rows()];
        for &i in &self.indices {
            counts[i] += 1;
        }
        let m = self.indices.len() as f64;
        counts.iter().filter(|&&c| c > 0).map(|&c| -(c as f64 / m) * math::ln(c as f64 / m)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationReport {
    /// 1-based iteration index.
    pub iteration: usize,
    pub t_from: f64,
    pub t_to: f64,
    /// Reverse ESS fraction of the unclipped buffer weights.
    pub buffer_ess: f64,
    pub mean_logw: f64,
    pub max_logw: f64,
    pub resample_entropy: f64,
    /// Loss of the last forward KL step (NaN without steps).
    pub final_loss: f64,
    /// Target evaluations spent in this iteration.
    pub target_evals: u64,
    pub aborted_steps: usize,
}

/// Runs every iteration of `schedule` on a model that was pretrained at the
/// first temperature. `train` supplies batch size, learning rate and its
/// schedule (reset every iteration), clipping and micro-batching; its step
/// count is replaced by `schedule.forward_steps`. `on_iteration` sees the
/// report and the model after each iteration, `on_step` every training step.
pub fn run_annealing<D: TargetDensity + ?Sized, R: Rng + ?Sized>(
    model: &mut FlowModel,
    target: &D,
    schedule: &AnnealingSchedule,
    train: &TrainConfig,
    rng: &mut R,
    on_iteration: &mut dyn FnMut(&IterationReport, &FlowModel) -> Result<(), Error>,
    on_step: &mut dyn FnMut(usize, usize, &StepReport),
) -> Result<Vec<IterationReport>, Error> {
    schedule.validate()?;
    let mut cfg = train.clone();
    cfg.steps = schedule.forward_steps;
    cfg.validate()?;
    let mut reports = Vec::with_capacity(schedule.iterations());
    for (i, pair) in schedule.temperatures.windows(2).enumerate() {
        let iteration = i + 1;
        let wrap = |e: Error| Error::Annealing { iteration, source: Box::new(e) };
        let (t_from, t_to) = (pair[0], pair[1]);
        let (buffer, ess) = WeightedBuffer::draw(
            model,
            target,
            t_to,
            schedule.draws,
            schedule.resample,
            schedule.clip_fraction,
            cfg.regularization.as_ref(),
            rng,
        )
        .map_err(wrap)?;
        let finite: Vec<f64> = buffer.logw.iter().copied().filter(|&w| is_valid_log(w)).collect();
        let mean_logw = finite.iter().sum::<f64>() / finite.len() as f64;
        let max_logw = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let data = buffer.training_set();
        let resample_entropy = buffer.resample_entropy();
        drop(buffer);
        let summary =
            train_forward_kld(model, &data, &cfg, rng, &mut |s, rep| on_step(iteration, s, rep)).map_err(wrap)?;
        let report = IterationReport {
            iteration,
            t_from,
            t_to,
            buffer_ess: ess,
            mean_logw,
            max_logw,
            resample_entropy,
            final_loss: summary.last.map_or(f64::NAN, |r| r.loss),
            target_evals: schedule.draws as u64,
            aborted_steps: summary.aborted,
        };
        on_iteration(&report, model).map_err(wrap)?;
        reports.push(report);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn geometric_levels() {
        let s = geometric_schedule(30.0, 1.0, 8).unwrap();
        let printed = [30.0, 18.45, 11.35, 6.98, 4.30, 2.64, 1.63, 1.00];
        for (a, b) in s.iter().zip(printed) {
            assert!((a - b).abs() <= 0.01, "{a} vs {b}");
        }
        let s = geometric_schedule(1200.0, 300.0, 10).unwrap();
        assert!((s[1] - 1028.69).abs() <= 0.01);
        assert_eq!(geometric_schedule(300.0, 300.0, 5).unwrap(), alloc::vec![300.0; 5]);
        assert!(geometric_schedule(1.0, 30.0, 4).is_err());
        assert!(geometric_schedule(2.0, 1.0, 1).is_err());
        assert_eq!(geometric_schedule(2.0, 2.0, 1).unwrap(), alloc::vec![2.0]);
    }

    #[test]
    fn geometric_ratios_are_constant() {
        let s = geometric_schedule(1200.0, 300.0, 10).unwrap();
        assert_eq!(s[0], 1200.0);
        assert_eq!(s[9], 300.0);
        let r0 = s[1] / s[0];
        for w in s.windows(2) {
            assert!(w[1] <= w[0]);
            assert!((w[1] / w[0] - r0).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_rules() {
        let mut r = crate::SeedRng::seed_from_u64(0);
        let lw: Vec<f64> = (0..10_000).map(|_| r.random_range(-5.0..5.0)).collect();
        assert_eq!(clip_top_weights(&lw, 1e-4), lw);
        let lw: Vec<f64> = (0..100_000).map(|_| r.random_range(-5.0..5.0)).collect();
        let c = clip_top_weights(&lw, 1e-4);
        let mut sorted = lw.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let tenth = sorted[9];
        assert_eq!(c.iter().filter(|&&w| w == tenth).count(), 10);
        for (a, b) in lw.iter().zip(&c) {
            assert!(b <= a);
            if *a <= tenth {
                assert_eq!(a, b);
            }
        }
        assert!(reverse_ess(&c).unwrap() >= reverse_ess(&lw).unwrap());
        assert_eq!(clip_top_weights(&[1.5; 50], 0.1), alloc::vec![1.5; 50]);
        assert_eq!(clip_top_weights(&lw, 0.0), lw);
    }

    #[test]
    fn resampling_one_hot_and_failure() {
        let mut r = crate::SeedRng::seed_from_u64(1);
        let lw = [LOG_ZERO, LOG_ZERO, 0.3, LOG_ZERO];
        assert!(resample_buffer(&lw, 1000, &mut r).unwrap().iter().all(|&i| i == 2));
        assert!(matches!(resample_buffer(&[LOG_ZERO; 3], 10, &mut r), Err(Error::NoOverlap)));
    }

    #[test]
    fn resampling_two_thirds() {
        let mut r = crate::SeedRng::seed_from_u64(2);
        let lw = [(2.0f64 / 3.0).ln(), (1.0f64 / 3.0).ln()];
        let m = 100_000;
        let ones = resample_buffer(&lw, m, &mut r).unwrap().iter().filter(|&&i| i == 0).count() as f64;
        let p = 2.0 / 3.0;
        let sd = (m as f64 * p * (1.0 - p)).sqrt();
        assert!((ones - m as f64 * p).abs() < 3.0 * sd);
    }

    #[test]
    fn expectation_estimates() {
        let lw = [0.1, -2.0, 3.0];
        assert!((estimate_expectation(&[4.0; 3], &lw).unwrap() - 4.0).abs() < 1e-15);
        let eq = estimate_expectation(&[1.0, 2.0, 6.0], &[0.0; 3]).unwrap();
        assert!((eq - 3.0).abs() < 1e-15);
        assert!(estimate_expectation(&[1.0], &[LOG_ZERO]).is_err());
    }

    #[test]
    fn weights_by_hand() {
        struct Lin;
        impl TargetDensity for Lin {
            fn dim(&self) -> usize {
                1
            }
            fn energy(&self, x: &[f64]) -> f64 {
                2.0 * x[0]
            }
            fn energy_grad(&self, _: &[f64], g: &mut [f64]) -> f64 {
                g[0] = 2.0;
                0.0
            }
        }
        let x = Dense::from_vec(3, 1, alloc::vec![1.0, 2.0, 3.0]);
        let lw = importance_log_weights(&[-1.0, 0.5, LOG_ZERO], &Lin, 2.0, &x, None).unwrap();
        // -E/T - log q: -1 + 1, -2 - 0.5, sentinel
        assert_eq!(lw, alloc::vec![0.0, -2.5, LOG_ZERO]);
    }

    #[test]
    fn schedule_validation() {
        let mut s = AnnealingSchedule {
            temperatures: alloc::vec![3.0, 2.0, 2.0],
            draws: 10,
            resample: 10,
            forward_steps: 0,
            clip_fraction: 0.0,
        };
        assert!(s.validate().is_ok());
        assert_eq!(s.iterations(), 2);
        s.temperatures = alloc::vec![1.0, 2.0];
        assert!(s.validate().is_err());
        s.temperatures = alloc::vec![2.0, 1.0];
        s.clip_fraction = 1.0;
        assert!(s.validate().is_err());
    }
}
