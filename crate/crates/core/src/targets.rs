//! Unnormalized target densities, temperature scaling and energy
//! regularization. Boltzmann's constant is 1 for every target here, so
//! temperatures are dimensionless.

use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffgraph::Dense;
use crate::{math, Error, SeedRng, LOG_ZERO};

/// Seed used by [`GmmTarget::forty_modes`] when the caller has no reason to
/// pick another one.
pub const GMM_SEED: u64 = 0x6d6d_3430;

/// An energy function `E(x)` with `log p_T(x) = -E(x) / T`.
pub trait TargetDensity {
    fn dim(&self) -> usize;

    /// Energy at `x`. May be `+inf` where the density vanishes.
    fn energy(&self, x: &[f64]) -> f64;

    /// Energy at `x` with its gradient written into `grad`.
    fn energy_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

impl<T: TargetDensity + ?Sized> TargetDensity for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn energy(&self, x: &[f64]) -> f64 {
        (**self).energy(x)
    }
    fn energy_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        (**self).energy_grad(x, grad)
    }
}

/// Isotropic Gaussian mixture, normalized, with energy `-log p(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmTarget {
    dim: usize,
    means: Vec<f64>,
    sigma: f64,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
}

impl GmmTarget {
    /// `means` holds one row per component.
    pub fn new(means: &[Vec<f64>], sigma: f64, weights: &[f64]) -> Result<Self, Error> {
        if means.is_empty() || means.len() != weights.len() {
            return Err(Error::Parameter("mixture needs one weight per mean".into()));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::Parameter("mixture means must share one positive dimension".into()));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Parameter("mixture sigma must be positive".into()));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::Parameter("mixture weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        Ok(Self {
            dim,
            means: means.concat(),
            sigma,
            log_weights: weights.iter().map(|&w| math::ln(w)).collect(),
            weights,
        })
    }

    /// 40 equally weighted unit-variance components in 2-D with means drawn
    /// uniformly from `[-40, 40]^2`.
    pub fn forty_modes(seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = SeedRng::seed_from_u64(seed);
        let means: Vec<Vec<f64>> =
            (0..40).map(|_| alloc::vec![rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0)]).collect();
        Self::new(&means, 1.0, &[1.0; 40]).expect("fixture parameters are valid")
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.dim..(k + 1) * self.dim]
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Per-component log terms `log w_k + log N(x; mu_k, sigma^2 I)`.
    fn component_logs(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let s2 = self.sigma * self.sigma;
        let norm = 0.5 * self.dim as f64 * (math::LN_2PI + math::ln(s2));
        for k in 0..self.components() {
            let d2: f64 = self.mean(k).iter().zip(x).map(|(m, v)| (v - m) * (v - m)).sum();
            out.push(self.log_weights[k] - norm - 0.5 * d2 / s2);
        }
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut terms = Vec::with_capacity(self.components());
        self.component_logs(x, &mut terms);
        math::log_sum_exp(&terms)
    }
}

impl TargetDensity for GmmTarget {
    fn dim(&self) -> usize {
        self.dim
    }

    fn energy(&self, x: &[f64]) -> f64 {
        -self.log_density(x)
    }

    fn energy_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let mut terms = Vec::with_capacity(self.components());
        self.component_logs(x, &mut terms);
        let lse = math::log_sum_exp(&terms);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let s2 = self.sigma * self.sigma;
        for (k, &t) in terms.iter().enumerate() {
            let r = math::exp(t - lse);
            for ((g, &v), &m) in grad.iter_mut().zip(x).zip(self.mean(k)) {
                *g += r * (v - m) / s2;
            }
        }
        -lse
    }
}

/// Log-density of every row of `x`.
pub fn gmm_logdensity(target: &GmmTarget, x: &Dense) -> Vec<f64> {
    (0..x.rows()).map(|r| target.log_density(x.row(r))).collect()
}

/// Exact ancestral samples: a component by weight, then a normal draw.
pub fn gmm_sample<R: Rng + ?Sized>(target: &GmmTarget, n: usize, rng: &mut R) -> Dense {
    let mut cum = Vec::with_capacity(target.components());
    let mut acc = 0.0;
    for &w in &target.weights {
        acc += w;
        cum.push(acc);
    }
    let mut out = Dense::zeros(n, target.dim);
    for r in 0..n {
        let u = rng.random::<f64>() * acc;
        let k = cum.partition_point(|&c| c <= u).min(cum.len() - 1);
        for (o, &m) in out.row_mut(r).iter_mut().zip(target.mean(k)) {
            let e: f64 = StandardNormal.sample(rng);
            *o = m + target.sigma * e;
        }
    }
    out
}

/// Von Mises mixture on the unit 2-torus:
/// `E = -log sum_j a_j exp(k_j (cos 2pi(phi - mu_j) + cos 2pi(psi - nu_j)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TorusTarget {
    pub centers: Vec<[f64; 2]>,
    pub kappas: Vec<f64>,
    pub weights: Vec<f64>,
}

impl TorusTarget {
    pub fn new(centers: Vec<[f64; 2]>, kappas: Vec<f64>, weights: Vec<f64>) -> Result<Self, Error> {
        let t = Self { centers, kappas, weights };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), Error> {
        let j = self.centers.len();
        if j == 0 || self.kappas.len() != j || self.weights.len() != j {
            return Err(Error::Parameter("torus target needs matching centers, kappas and weights".into()));
        }
        if self.kappas.iter().chain(&self.weights).any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Parameter("torus kappas and weights must be positive".into()));
        }
        Ok(())
    }

    /// One dominant well and three metastable ones of different widths.
    pub fn four_wells() -> Self {
        Self {
            centers: alloc::vec![[0.25, 0.25], [0.75, 0.30], [0.30, 0.75], [0.70, 0.70]],
            kappas: alloc::vec![4.0, 3.0, 6.0, 2.0],
            weights: alloc::vec![0.55, 0.20, 0.15, 0.10],
        }
    }

    /// Exact samples by rejection from the uniform distribution, using
    /// `log sum_j a_j exp(2 k_j)` as the bound on `-E`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Dense {
        let bound: Vec<f64> = self.weights.iter().zip(&self.kappas).map(|(&a, &k)| math::ln(a) + 2.0 * k).collect();
        let bound = math::log_sum_exp(&bound);
        let mut out = Dense::zeros(n, 2);
        let mut r = 0;
        while r < n {
            let x = [rng.random::<f64>(), rng.random::<f64>()];
            let u: f64 = rng.random();
            if math::ln(u) < -self.energy(&x) - bound {
                out.row_mut(r).copy_from_slice(&x);
                r += 1;
            }
        }
        out
    }

    fn terms(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for ((c, &k), &a) in self.centers.iter().zip(&self.kappas).zip(&self.weights) {
            let s = math::cos(math::TAU * (x[0] - c[0])) + math::cos(math::TAU * (x[1] - c[1]));
            out.push(math::ln(a) + k * s);
        }
    }
}

impl TargetDensity for TorusTarget {
    fn dim(&self) -> usize {
        2
    }

    fn energy(&self, x: &[f64]) -> f64 {
        let mut t = Vec::with_capacity(self.centers.len());
        self.terms(x, &mut t);
        -math::log_sum_exp(&t)
    }

    fn energy_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let mut t = Vec::with_capacity(self.centers.len());
        self.terms(x, &mut t);
        let lse = math::log_sum_exp(&t);
        grad[0] = 0.0;
        grad[1] = 0.0;
        for (j, &tj) in t.iter().enumerate() {
            let r = math::exp(tj - lse);
            let (c, k) = (self.centers[j], self.kappas[j]);
            grad[0] += r * k * math::TAU * math::sin(math::TAU * (x[0] - c[0]));
            grad[1] += r * k * math::TAU * math::sin(math::TAU * (x[1] - c[1]));
        }
        -lse
    }
}

/// Energy of every row of `x` under a torus target.
pub fn torus_energy(target: &TorusTarget, x: &Dense) -> Vec<f64> {
    (0..x.rows()).map(|r| target.energy(x.row(r))).collect()
}

/// Isotropic normal `N(mean, sigma^2 I)`, normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTarget {
    mean: Vec<f64>,
    sigma: f64,
    log_norm: f64,
}

impl GaussianTarget {
    pub fn new(mean: Vec<f64>, sigma: f64) -> Result<Self, Error> {
        if mean.is_empty() || !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Parameter("gaussian needs a non-empty mean and sigma > 0".into()));
        }
        let log_norm = 0.5 * mean.len() as f64 * (math::LN_2PI + 2.0 * math::ln(sigma));
        Ok(Self { mean, sigma, log_norm })
    }

    pub fn isotropic(dim: usize, sigma: f64) -> Result<Self, Error> {
        Self::new(alloc::vec![0.0; dim], sigma)
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        -self.energy(x)
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        for (o, &m) in out.iter_mut().zip(&self.mean) {
            let e: f64 = StandardNormal.sample(rng);
            *o = m + self.sigma * e;
        }
    }
}

impl TargetDensity for GaussianTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn energy(&self, x: &[f64]) -> f64 {
        let d2: f64 = x.iter().zip(&self.mean).map(|(v, m)| (v - m) * (v - m)).sum();
        0.5 * d2 / (self.sigma * self.sigma) + self.log_norm
    }

    fn energy_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let s2 = self.sigma * self.sigma;
        for ((g, v), m) in grad.iter_mut().zip(x).zip(&self.mean) {
            *g = (v - m) / s2;
        }
        self.energy(x)
    }
}

/// Caps large energies logarithmically above `e_high` and flattens them
/// completely above `e_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyRegularization {
    pub e_high: f64,
    pub e_max: f64,
}

impl Default for EnergyRegularization {
    fn default() -> Self {
        Self { e_high: 1e8, e_max: 1e20 }
    }
}

impl EnergyRegularization {
    pub fn new(e_high: f64, e_max: f64) -> Result<Self, Error> {
        let r = Self { e_high, e_max };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), Error> {
        if !(self.e_high < self.e_max) || !self.e_high.is_finite() || !self.e_max.is_finite() {
            return Err(Error::Parameter("energy regularization needs finite e_high < e_max".into()));
        }
        Ok(())
    }

    pub fn apply(&self, e: f64) -> f64 {
        regularize_energy(e, self)
    }

    /// Derivative of [`apply`](Self::apply) with respect to the raw energy.
    pub fn derivative(&self, e: f64) -> f64 {
        if e <= self.e_high {
            1.0
        } else if e <= self.e_max {
            1.0 / (e - self.e_high + 1.0)
        } else {
            0.0
        }
    }
}

pub fn regularize_energy(e: f64, spec: &EnergyRegularization) -> f64 {
    if e <= spec.e_high {
        e
    } else if e <= spec.e_max {
        math::ln(e - spec.e_high + 1.0) + spec.e_high
    } else {
        math::ln(spec.e_max - spec.e_high + 1.0) + spec.e_high
    }
}

/// `-E(x) / T`, with the energy optionally regularized. Infinite or NaN
/// energies give [`LOG_ZERO`].
pub fn tempered_logdensity<D: TargetDensity + ?Sized>(
    target: &D,
    temperature: f64,
    x: &[f64],
    reg: Option<&EnergyRegularization>,
) -> Result<f64, Error> {
    check_temperature(temperature)?;
    Ok(tempered_from_energy(target.energy(x), temperature, reg))
}

/// Row-wise [`tempered_logdensity`].
pub fn tempered_logdensities<D: TargetDensity + ?Sized>(
    target: &D,
    temperature: f64,
    x: &Dense,
    reg: Option<&EnergyRegularization>,
) -> Result<Vec<f64>, Error> {
    check_temperature(temperature)?;
    Ok((0..x.rows()).map(|r| tempered_from_energy(target.energy(x.row(r)), temperature, reg)).collect())
}

pub(crate) fn check_temperature(t: f64) -> Result<(), Error> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Parameter(alloc::format!("temperature must be positive and finite, got {t}")));
    }
    Ok(())
}

pub(crate) fn tempered_from_energy(e: f64, t: f64, reg: Option<&EnergyRegularization>) -> f64 {
    let e = match reg {
        Some(r) => r.apply(e),
        None => e,
    };
    let lp = -e / t;
    if crate::is_valid_log(lp) {
        lp
    } else {
        LOG_ZERO
    }
}

/// Wraps a target and counts every energy evaluation.
#[derive(Debug, Default)]
pub struct CountingTarget<D> {
    inner: D,
    count: AtomicU64,
}

impl<D: TargetDensity> CountingTarget<D> {
    pub fn new(inner: D) -> Self {
        Self { inner, count: AtomicU64::new(0) }
    }

    pub fn count(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }

    pub fn inner(&self) -> &D {
        &self.inner
    }
}

impl<D: TargetDensity> TargetDensity for CountingTarget<D> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn energy(&self, x: &[f64]) -> f64 {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.energy(x)
    }

    fn energy_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.energy_grad(x, grad)
    }
}

/// Serializable description of a target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TargetSpec {
    /// The 40-mode mixture from [`GmmTarget::forty_modes`].
    Gmm40 {
        #[serde(default = "default_gmm_seed")]
        seed: u64,
    },
    Gmm {
        means: Vec<Vec<f64>>,
        sigma: f64,
        weights: Vec<f64>,
    },
    Torus(TorusTarget),
    Gaussian {
        mean: Vec<f64>,
        sigma: f64,
    },
}

fn default_gmm_seed() -> u64 {
    GMM_SEED
}

/// A concrete target built from a [`TargetSpec`].
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Gmm(GmmTarget),
    Torus(TorusTarget),
    Gaussian(GaussianTarget),
}

impl TargetSpec {
    pub fn build(&self) -> Result<Target, Error> {
        Ok(match self {
            TargetSpec::Gmm40 { seed } => Target::Gmm(GmmTarget::forty_modes(*seed)),
            TargetSpec::Gmm { means, sigma, weights } => Target::Gmm(GmmTarget::new(means, *sigma, weights)?),
            TargetSpec::Torus(t) => {
                t.validate()?;
                Target::Torus(t.clone())
            }
            TargetSpec::Gaussian { mean, sigma } => Target::Gaussian(GaussianTarget::new(mean.clone(), *sigma)?),
        })
    }
}

impl Target {
    /// Exact samples when the target supports them.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Option<Dense> {
        match self {
            Target::Gmm(g) => Some(gmm_sample(g, n, rng)),
            Target::Gaussian(g) => {
                let mut out = Dense::zeros(n, g.dim());
                for r in 0..n {
                    g.sample_into(rng, out.row_mut(r));
                }
                Some(out)
            }
            Target::Torus(t) => Some(t.sample(n, rng)),
        }
    }
}

impl TargetDensity for Target {
    fn dim(&self) -> usize {
        match self {
            Target::Gmm(t) => t.dim(),
            Target::Torus(t) => t.dim(),
            Target::Gaussian(t) => t.dim(),
        }
    }

    fn energy(&self, x: &[f64]) -> f64 {
        match self {
            Target::Gmm(t) => t.energy(x),
            Target::Torus(t) => t.energy(x),
            Target::Gaussian(t) => t.energy(x),
        }
    }

    fn energy_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        match self {
            Target::Gmm(t) => t.energy_grad(x, grad),
            Target::Torus(t) => t.energy_grad(x, grad),
            Target::Gaussian(t) => t.energy_grad(x, grad),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn single_component_at_mean() {
        let g = GmmTarget::new(&[alloc::vec![0.0, 0.0]], 1.0, &[1.0]).unwrap();
        assert!((g.log_density(&[0.0, 0.0]) + 1.837_877_066_409_345).abs() < 1e-12);
    }

    #[test]
    fn isolated_mean_of_forty_modes() {
        let g = GmmTarget::forty_modes(GMM_SEED);
        // brute force: sum every component's density directly
        let direct = |x: &[f64]| -> f64 {
            let mut s = 0.0;
            for k in 0..40 {
                let m = g.mean(k);
                let d2 = (x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2);
                s += (1.0 / 40.0) * (-0.5 * d2).exp() / core::f64::consts::TAU;
            }
            s.ln()
        };
        let mut found = false;
        for k in 0..40 {
            let m = g.mean(k).to_vec();
            let isolated = (0..40).filter(|&j| j != k).all(|j| {
                let o = g.mean(j);
                // beyond 8 sigma the other terms are below 1e-13 relative
                ((m[0] - o[0]).powi(2) + (m[1] - o[1]).powi(2)).sqrt() >= 8.0
            });
            if isolated {
                found = true;
                let lp = g.log_density(&m);
                assert!((lp - direct(&m)).abs() < 1e-10);
                assert!((lp - (-5.526_756_14)).abs() < 1e-6, "{lp}");
            }
        }
        // the general formula still has to agree everywhere else
        for k in 0..40 {
            let x = [g.mean(k)[0] + 0.7, g.mean(k)[1] - 1.1];
            assert!((g.log_density(&x) - direct(&x)).abs() < 1e-10);
        }
        assert!(found, "fixture has no isolated mean");
    }

    #[test]
    fn energy_gradients_match_finite_differences() {
        let targets = [
            Target::Gmm(GmmTarget::forty_modes(GMM_SEED)),
            Target::Torus(TorusTarget::four_wells()),
            Target::Gaussian(GaussianTarget::new(alloc::vec![0.3, -1.0], 1.7).unwrap()),
        ];
        let mut r = SeedRng::seed_from_u64(5);
        for t in &targets {
            for _ in 0..50 {
                let x = match t {
                    Target::Gmm(g) => {
                        let m = g.mean(r.random_range(0..40));
                        [m[0] + r.random_range(-2.0..2.0), m[1] + r.random_range(-2.0..2.0)]
                    }
                    _ => [r.random::<f64>(), r.random::<f64>()],
                };
                let mut g = [0.0; 2];
                let e = t.energy_grad(&x, &mut g);
                assert!((e - t.energy(&x)).abs() < 1e-12);
                for d in 0..2 {
                    let h = 1e-6;
                    let (mut a, mut b) = (x, x);
                    a[d] += h;
                    b[d] -= h;
                    let fd = (t.energy(&a) - t.energy(&b)) / (2.0 * h);
                    assert!((fd - g[d]).abs() <= 1e-5 * fd.abs().max(1.0), "{fd} vs {}", g[d]);
                }
            }
        }
    }

    #[test]
    fn regularization_branches() {
        let reg = EnergyRegularization::default();
        assert_eq!(regularize_energy(1e7, &reg), 1e7);
        let e = 1e8 + (core::f64::consts::E - 1.0);
        assert!((regularize_energy(e, &reg) - (1e8 + 1.0)).abs() < 1e-7);
        let sat = (1e20f64 - 1e8 + 1.0).ln() + 1e8;
        assert_eq!(regularize_energy(1e21, &reg), sat);
        assert_eq!(regularize_energy(1e8, &reg), 1e8);
        assert!(EnergyRegularization::new(2.0, 1.0).is_err());
    }

    #[test]
    fn regularization_is_monotone_and_continuous() {
        let reg = EnergyRegularization::new(10.0, 1000.0).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..20_000 {
            let e = -50.0 + i as f64 * 0.1;
            let v = reg.apply(e);
            assert!(v >= prev);
            prev = v;
        }
        assert!((reg.apply(10.0 + 1e-12) - 10.0).abs() < 1e-9);
        assert_eq!(reg.apply(2000.0), reg.apply(1e6));
    }

    #[test]
    fn tempering() {
        let g = GaussianTarget::new(alloc::vec![0.0], 1.0).unwrap();
        let x = [1.3];
        assert_eq!(tempered_logdensity(&g, 1.0, &x, None).unwrap(), -g.energy(&x));
        struct Ten;
        impl TargetDensity for Ten {
            fn dim(&self) -> usize {
                1
            }
            fn energy(&self, _: &[f64]) -> f64 {
                10.0
            }
            fn energy_grad(&self, _: &[f64], g: &mut [f64]) -> f64 {
                g[0] = 0.0;
                10.0
            }
        }
        assert_eq!(tempered_logdensity(&Ten, 2.0, &[0.0], None).unwrap(), -5.0);
        assert!(tempered_logdensity(&Ten, 0.0, &[0.0], None).is_err());
        assert!(tempered_logdensity(&Ten, -1.0, &[0.0], None).is_err());

        let gmm = GmmTarget::forty_modes(GMM_SEED);
        let mut r = SeedRng::seed_from_u64(1);
        for _ in 0..100 {
            let x = [r.random_range(-45.0..45.0), r.random_range(-45.0..45.0)];
            let lp30 = tempered_logdensity(&gmm, 30.0, &x, None).unwrap();
            assert!((lp30 - gmm.log_density(&x) / 30.0).abs() < 1e-12);
            assert!((lp30 * 30.0 - tempered_logdensity(&gmm, 1.0, &x, None).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn infinite_energy_maps_to_sentinel() {
        assert_eq!(tempered_from_energy(f64::INFINITY, 1.0, None), LOG_ZERO);
        assert_eq!(tempered_from_energy(f64::NAN, 1.0, None), LOG_ZERO);
    }

    #[test]
    fn gmm_log_density_never_overflows() {
        let g = GmmTarget::forty_modes(GMM_SEED);
        for &x in &[[1e6, 1e6], [-1e6, 3.0], [0.0, -1e6]] {
            let lp = g.log_density(&x);
            assert!(lp.is_finite() && lp < -1e10);
        }
    }

    #[test]
    fn gmm_integrates_to_one() {
        let g = GmmTarget::forty_modes(GMM_SEED);
        let (lo, hi) = (-48.0, 48.0);
        let n = 960;
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = [lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h];
                total += g.log_density(&x).exp() * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    #[test]
    fn gmm_sampling() {
        let g = GmmTarget::new(&[alloc::vec![0.0, 0.0]], 1.0, &[1.0]).unwrap();
        let n = 20_000;
        let s = gmm_sample(&g, n, &mut SeedRng::seed_from_u64(2));
        for d in 0..2 {
            let m: f64 = (0..n).map(|r| s.get(r, d)).sum::<f64>() / n as f64;
            assert!(m.abs() < 4.0 / (n as f64).sqrt());
        }
        let a = gmm_sample(&g, 10, &mut SeedRng::seed_from_u64(3));
        let b = gmm_sample(&g, 10, &mut SeedRng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn torus_samples_match_von_mises_moment() {
        let t = TorusTarget::new(alloc::vec![[0.5, 0.5]], alloc::vec![1.0], alloc::vec![1.0]).unwrap();
        // E[cos 2pi(phi - 1/2)] under exp(cos 2pi(phi - 1/2)), by midpoint quadrature
        let n = 20_000;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            let c = math::cos(math::TAU * ((i as f64 + 0.5) / n as f64 - 0.5));
            num += c * math::exp(c);
            den += math::exp(c);
        }
        let x = t.sample(20_000, &mut SeedRng::seed_from_u64(12));
        let m: f64 = (0..x.rows()).map(|r| math::cos(math::TAU * (x.get(r, 0) - 0.5))).sum::<f64>() / 20_000.0;
        assert!((m - num / den).abs() < 0.02, "{m} vs {}", num / den);
        assert!(x.data().iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn torus_energy_is_periodic_and_minimal_at_center() {
        let t = TorusTarget::new(alloc::vec![[0.5, 0.5]], alloc::vec![1.0], alloc::vec![1.0]).unwrap();
        let c = t.energy(&[0.5, 0.5]);
        let mut r = SeedRng::seed_from_u64(4);
        for _ in 0..100 {
            let x = [r.random::<f64>(), r.random::<f64>()];
            assert!(t.energy(&x) >= c);
        }
        let w = TorusTarget::four_wells();
        for _ in 0..100 {
            let (a, b) = (r.random::<f64>(), r.random::<f64>());
            assert!((w.energy(&[a, b]) - w.energy(&[a + 1.0, b])).abs() < 1e-12);
            assert!((w.energy(&[a, b]) - w.energy(&[a, b - 1.0])).abs() < 1e-12);
            // direct evaluation of the mixture formula
            let mut s = 0.0;
            for j in 0..4 {
                let (c, k) = (w.centers[j], w.kappas[j]);
                s += w.weights[j]
                    * (k * ((core::f64::consts::TAU * (a - c[0])).cos()
                        + (core::f64::consts::TAU * (b - c[1])).cos()))
                    .exp();
            }
            assert!((w.energy(&[a, b]) + s.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn counting_wrapper_counts() {
        let c = CountingTarget::new(TorusTarget::four_wells());
        let mut g = [0.0; 2];
        c.energy(&[0.1, 0.2]);
        c.energy_grad(&[0.1, 0.2], &mut g);
        assert_eq!(c.count(), 2);
    }
}
