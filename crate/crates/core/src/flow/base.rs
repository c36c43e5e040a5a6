//! Factorized latent distributions on a box.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{math, Error, LOG_ZERO};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BaseKind {
    Uniform,
    TruncatedNormal { mean: f64, std: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct BaseDim {
    kind: BaseKind,
    lo: f64,
    hi: f64,
    // log of the normalizing constant of the density restricted to [lo, hi]
    log_norm: f64,
    // probability mass of the untruncated normal inside [lo, hi]
    mass: f64,
}

/// Product of per-dimension uniform or truncated-normal densities.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseDistribution {
    dims: Vec<BaseDim>,
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + math::erf(x / core::f64::consts::SQRT_2))
}

impl BaseDistribution {
    pub fn new(dims: &[(BaseKind, f64, f64)]) -> Result<Self, Error> {
        let mut out = Vec::with_capacity(dims.len());
        for &(kind, lo, hi) in dims {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::Config(alloc::format!("invalid base support [{lo}, {hi}]")));
            }
            let (log_norm, mass) = match kind {
                BaseKind::Uniform => (math::ln(hi - lo), 1.0),
                BaseKind::TruncatedNormal { mean, std } => {
                    if !(std > 0.0) || !mean.is_finite() {
                        return Err(Error::Config("truncated normal needs finite mean and std > 0".into()));
                    }
                    let mass = std_normal_cdf((hi - mean) / std) - std_normal_cdf((lo - mean) / std);
                    if !(mass > 0.0) {
                        return Err(Error::Config("truncated normal has no mass inside its support".into()));
                    }
                    (0.5 * math::LN_2PI + math::ln(std) + math::ln(mass), mass)
                }
            };
            out.push(BaseDim { kind, lo, hi, log_norm, mass });
        }
        Ok(Self { dims: out })
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn support(&self, d: usize) -> (f64, f64) {
        (self.dims[d].lo, self.dims[d].hi)
    }

    pub fn kind(&self, d: usize) -> BaseKind {
        self.dims[d].kind
    }

    /// Normalized log-density of one point, `LOG_ZERO` outside the support.
    pub fn log_density(&self, z: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (bd, &x) in self.dims.iter().zip(z) {
            if !(x >= bd.lo && x <= bd.hi) {
                return LOG_ZERO;
            }
            acc -= bd.log_norm;
            if let BaseKind::TruncatedNormal { mean, std } = bd.kind {
                let t = (x - mean) / std;
                acc -= 0.5 * t * t;
            }
        }
        acc
    }

    /// Writes the gradient of the log-density into `grad` (zero for uniform dims).
    pub fn grad_log_density(&self, z: &[f64], grad: &mut [f64]) {
        for ((bd, &x), g) in self.dims.iter().zip(z).zip(grad.iter_mut()) {
            *g = match bd.kind {
                BaseKind::Uniform => 0.0,
                BaseKind::TruncatedNormal { mean, std } => -(x - mean) / (std * std),
            };
        }
    }

    /// Draws one point into `out`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        for (bd, o) in self.dims.iter().zip(out.iter_mut()) {
            *o = match bd.kind {
                BaseKind::Uniform => bd.lo + (bd.hi - bd.lo) * rng.random::<f64>(),
                BaseKind::TruncatedNormal { mean, std } => {
                    if bd.mass > 0.25 {
                        loop {
                            let e: f64 = StandardNormal.sample(rng);
                            let x = mean + std * e;
                            if x >= bd.lo && x <= bd.hi {
                                break x;
                            }
                        }
                    } else {
                        // uniform proposal with acceptance exp(-t^2/2) / peak
                        let peak = if mean < bd.lo {
                            bd.lo
                        } else if mean > bd.hi {
                            bd.hi
                        } else {
                            mean
                        };
                        let tp = (peak - mean) / std;
                        loop {
                            let x = bd.lo + (bd.hi - bd.lo) * rng.random::<f64>();
                            let t = (x - mean) / std;
                            if rng.random::<f64>() < math::exp(-0.5 * (t * t - tp * tp)) {
                                break x;
                            }
                        }
                    }
                }
            };
        }
    }
}
