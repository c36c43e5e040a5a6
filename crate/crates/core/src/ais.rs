//! Vanilla versus annealed importance sampling on factorized Gaussians,
//! with one Hamiltonian Monte Carlo transition per intermediate density.

use alloc::vec::Vec;
use core::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::metrics::reverse_ess;
use crate::targets::{GaussianTarget, TargetDensity};
use crate::{math, Error, SeedRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HmcConfig {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    /// Transitions per intermediate density.
    #[serde(default = "one")]
    pub transitions: usize,
}

fn one() -> usize {
    1
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self { step_size: 0.3, leapfrog_steps: 5, transitions: 1 }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.step_size > 0.0) || self.leapfrog_steps == 0 {
            return Err(Error::Parameter("HMC needs step_size > 0 and at least one leapfrog step".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AisConfig {
    pub dim: usize,
    /// Number of intermediate densities between proposal and target.
    pub intermediates: usize,
    pub samples: usize,
    #[serde(default)]
    pub hmc: HmcConfig,
    pub seed: u64,
}

impl AisConfig {
    /// Path exponents `beta_t = t / (T + 1)` for `t = 0..=T+1`.
    pub fn betas(&self) -> Vec<f64> {
        let n = self.intermediates + 1;
        (0..=n).map(|t| if t == n { 1.0 } else { t as f64 / n as f64 }).collect()
    }
}

/// Outcome of one HMC transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HmcStep {
    pub accepted: bool,
    /// Hamiltonian change of the proposal, `H(end) - H(start)`.
    pub delta_h: f64,
}

/// Momentum refresh, `L` leapfrog steps and a Metropolis test targeting
/// `exp(log_density)`. `x` is updated in place when the move is accepted.
/// `log_density` writes its gradient into the second argument.
pub fn hmc_transition<R: Rng + ?Sized>(
    x: &mut [f64],
    log_density: &dyn Fn(&[f64], &mut [f64]) -> f64,
    cfg: &HmcConfig,
    rng: &mut R,
) -> HmcStep {
    let d = x.len();
    let mut p: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let mut g = alloc::vec![0.0; d];
    let lp0 = log_density(x, &mut g);
    let k0: f64 = p.iter().map(|v| 0.5 * v * v).sum();
    let mut q = x.to_vec();
    let eps = cfg.step_size;
    for (pi, gi) in p.iter_mut().zip(&g) {
        *pi += 0.5 * eps * gi;
    }
    let mut lp = lp0;
    for l in 0..cfg.leapfrog_steps {
        for (qi, pi) in q.iter_mut().zip(&p) {
            *qi += eps * pi;
        }
        lp = log_density(&q, &mut g);
        let scale = if l + 1 == cfg.leapfrog_steps { 0.5 } else { 1.0 };
        for (pi, gi) in p.iter_mut().zip(&g) {
            *pi += scale * eps * gi;
        }
    }
    let k1: f64 = p.iter().map(|v| 0.5 * v * v).sum();
    let delta_h = (-lp + k1) - (-lp0 + k0);
    let accepted = delta_h.is_finite() && math::ln(rng.random::<f64>()) < -delta_h;
    if accepted {
        x.copy_from_slice(&q);
    }
    HmcStep { accepted, delta_h }
}

/// AIS log-weights from `proposal` to `target` along the geometric path
/// `q^(1 - beta) p^beta`. With zero intermediates this is plain importance
/// sampling and consumes the generator exactly like [`is_log_weights`].
pub fn ais_log_weights<P: TargetDensity + ?Sized, R: Rng + ?Sized>(
    proposal: &GaussianTarget,
    target: &P,
    cfg: &AisConfig,
    rng: &mut R,
) -> Result<Vec<f64>, Error> {
    cfg.hmc.validate()?;
    if proposal.dim() != cfg.dim || target.dim() != cfg.dim {
        return Err(Error::Dimension { expected: cfg.dim, got: target.dim() });
    }
    let betas = cfg.betas();
    let mut out = Vec::with_capacity(cfg.samples);
    let mut x = alloc::vec![0.0; cfg.dim];
    let scratch = RefCell::new((alloc::vec![0.0; cfg.dim], alloc::vec![0.0; cfg.dim]));
    for _ in 0..cfg.samples {
        proposal.sample_into(rng, &mut x);
        let mut logw = 0.0;
        for t in 1..betas.len() {
            let lq = -proposal.energy(&x);
            let lp = -target.energy(&x);
            logw += (betas[t] - betas[t - 1]) * (lp - lq);
            if t + 1 < betas.len() {
                let b = betas[t];
                let dens = |y: &[f64], g: &mut [f64]| -> f64 {
                    let mut s = scratch.borrow_mut();
                    let (gq, gp) = &mut *s;
                    let eq = proposal.energy_grad(y, gq);
                    let ep = target.energy_grad(y, gp);
                    for i in 0..g.len() {
                        g[i] = -((1.0 - b) * gq[i] + b * gp[i]);
                    }
                    -((1.0 - b) * eq + b * ep)
                };
                for _ in 0..cfg.hmc.transitions {
                    hmc_transition(&mut x, &dens, &cfg.hmc, rng);
                }
            }
        }
        out.push(logw);
    }
    Ok(out)
}

/// Plain importance sampling log-weights `log p(x) - log q(x)`, `x ~ q`.
pub fn is_log_weights<P: TargetDensity + ?Sized, R: Rng + ?Sized>(
    proposal: &GaussianTarget,
    target: &P,
    samples: usize,
    rng: &mut R,
) -> Vec<f64> {
    let mut x = alloc::vec![0.0; proposal.dim()];
    (0..samples)
        .map(|_| {
            proposal.sample_into(rng, &mut x);
            let lq = -proposal.energy(&x);
            let lp = -target.energy(&x);
            lp - lq
        })
        .collect()
}

/// One row of the dimension sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub dim: usize,
    pub ess_is: f64,
    pub ess_ais_fixed: f64,
    pub ess_ais_scaled: f64,
}

/// Proposal and target widths of the sweep.
pub const PROPOSAL_SIGMA: f64 = 1.1;
pub const TARGET_SIGMA: f64 = 1.0;

/// Reverse ESS of vanilla IS, AIS with `template.intermediates` and AIS with
/// `5 N` intermediates, for the `N(0, 1.1^2) -> N(0, 1)` pair in each
/// dimension of `dims`. Every row and column uses its own derived seed.
pub fn is_vs_ais_curve(dims: &[usize], template: &AisConfig) -> Result<Vec<CurveRow>, Error> {
    if dims.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Parameter("dims must be sorted ascending".into()));
    }
    let mut rows = Vec::with_capacity(dims.len());
    for (i, &n) in dims.iter().enumerate() {
        let q = GaussianTarget::isotropic(n, PROPOSAL_SIGMA)?;
        let p = GaussianTarget::isotropic(n, TARGET_SIGMA)?;
        let seed = |col: u64| template.seed.wrapping_add((i as u64) << 8).wrapping_add(col);
        let is = is_log_weights(&q, &p, template.samples, &mut SeedRng::seed_from_u64(seed(0)));
        let fixed = AisConfig { dim: n, ..*template };
        let scaled = AisConfig { dim: n, intermediates: 5 * n, ..*template };
        let a = ais_log_weights(&q, &p, &fixed, &mut SeedRng::seed_from_u64(seed(1)))?;
        let b = ais_log_weights(&q, &p, &scaled, &mut SeedRng::seed_from_u64(seed(2)))?;
        rows.push(CurveRow {
            dim: n,
            ess_is: reverse_ess(&is)?,
            ess_ais_fixed: reverse_ess(&a)?,
            ess_ais_scaled: reverse_ess(&b)?,
        });
    }
    Ok(rows)
}

/// Closed-form per-dimension reverse ESS of IS from `N(0, sq^2)` to
/// `N(0, sp^2)`: `1 / E_q[w^2]`.
pub fn gaussian_is_ess(sq: f64, sp: f64) -> f64 {
    // E_q[w^2] = integral of p^2 / q = sq^2 / (sp sqrt(2 sq^2 - sp^2))
    let r = sq * sq / (sp * math::sqrt(2.0 * sq * sq - sp * sp));
    1.0 / r
}

/// Clash model: each of `n` independent neighbourhoods clashes with
/// probability `eta`; a sample has weight 1 without clashes and 0 otherwise.
/// Returns the reverse ESS of `samples` draws.
pub fn clash_model_ess<R: Rng + ?Sized>(eta: f64, n: usize, samples: usize, rng: &mut R) -> f64 {
    let ok = (0..samples).filter(|_| (0..n).all(|_| rng.random::<f64>() >= eta)).count();
    // sum w = sum w^2 = ok, so (sum w)^2 / (M sum w^2) = ok / M
    ok as f64 / samples as f64
}
