//! Sample-quality metrics: reverse effective sample size, test-set NLL and
//! 2-D histogram divergences.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::diffgraph::Dense;
use crate::flow::FlowModel;
use crate::{is_valid_log, math, Error, LOG_ZERO_THRESHOLD};

/// Floor applied to model-side histogram bins.
pub const MODEL_BIN_FLOOR: f64 = 1e-12;

/// Self-normalized weights `w_j / sum w`, computed in log space. Sentinel
/// and NaN entries get weight zero.
pub fn normalized_weights(logw: &[f64]) -> Result<Vec<f64>, Error> {
    let lse = log_norm(logw)?;
    Ok(logw.iter().map(|&l| if is_valid_log(l) { math::exp(l - lse) } else { 0.0 }).collect())
}

fn log_norm(logw: &[f64]) -> Result<f64, Error> {
    let max = logw.iter().copied().filter(|&l| is_valid_log(l)).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::NoOverlap);
    }
    let s: f64 = logw.iter().filter(|&&l| is_valid_log(l)).map(|&l| math::exp(l - max)).sum();
    Ok(max + math::ln(s))
}

/// Reverse ESS fraction `1 / (N sum_j wbar_j^2)`.
pub fn reverse_ess(logw: &[f64]) -> Result<f64, Error> {
    let lse = log_norm(logw)?;
    let s: f64 = logw.iter().filter(|&&l| is_valid_log(l)).map(|&l| math::exp(2.0 * (l - lse))).sum();
    Ok(1.0 / (logw.len() as f64 * s))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NllReport {
    pub nll: f64,
    /// Rows whose log-density was the `-inf` sentinel.
    pub sentinel_hits: usize,
}

/// `-mean log q(x)` over the test set; sentinel values are included as they are.
pub fn nll(model: &FlowModel, test: &Dense) -> Result<NllReport, Error> {
    if test.rows() == 0 {
        return Err(Error::Parameter("NLL needs a non-empty test set".into()));
    }
    let lq = model.log_prob(test)?;
    let sentinel_hits = lq.iter().filter(|&&l| l <= LOG_ZERO_THRESHOLD).count();
    let total: f64 = lq.iter().sum();
    Ok(NllReport { nll: -total / lq.len() as f64, sentinel_hits })
}

/// Normalized 2-D histogram of the first two columns of a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct Hist2d {
    pub bins: usize,
    pub ranges: [(f64, f64); 2],
    /// Row-major `bins x bins`, first axis is column 0.
    pub probs: Vec<f64>,
    /// Samples that fell inside the ranges.
    pub count: usize,
    pub weighted: bool,
}

impl Hist2d {
    /// Bins `points` on a `bins x bins` grid. Samples outside the ranges are
    /// dropped. With `log_weights` every sample counts with its normalized
    /// importance weight.
    pub fn build(
        points: &Dense,
        bins: usize,
        ranges: [(f64, f64); 2],
        log_weights: Option<&[f64]>,
    ) -> Result<Self, Error> {
        if bins == 0 || points.cols() < 2 {
            return Err(Error::Parameter("histogram needs bins > 0 and two columns".into()));
        }
        if ranges.iter().any(|&(lo, hi)| !(lo < hi)) {
            return Err(Error::Parameter("histogram ranges need lo < hi".into()));
        }
        let weights = match log_weights {
            Some(lw) => {
                if lw.len() != points.rows() {
                    return Err(Error::Dimension { expected: points.rows(), got: lw.len() });
                }
                Some(normalized_weights(lw)?)
            }
            None => None,
        };
        let mut probs = alloc::vec![0.0; bins * bins];
        let mut count = 0;
        let idx = |v: f64, (lo, hi): (f64, f64)| -> Option<usize> {
            if !(v >= lo && v <= hi) {
                return None;
            }
            Some(((v - lo) / (hi - lo) * bins as f64).min(bins as f64 - 1.0) as usize)
        };
        for r in 0..points.rows() {
            let p = points.row(r);
            if let (Some(i), Some(j)) = (idx(p[0], ranges[0]), idx(p[1], ranges[1])) {
                probs[i * bins + j] += weights.as_ref().map_or(1.0, |w| w[r]);
                count += 1;
            }
        }
        let total: f64 = probs.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Parameter("no sample mass inside the histogram ranges".into()));
        }
        probs.iter_mut().for_each(|p| *p /= total);
        Ok(Self { bins, ranges, probs, count, weighted: weights.is_some() })
    }

    pub fn prob(&self, i: usize, j: usize) -> f64 {
        self.probs[i * self.bins + j]
    }

    /// `sum_b p(b) log(p(b) / q(b))` with `q` floored at [`MODEL_BIN_FLOOR`]
    /// and empty reference bins contributing nothing.
    pub fn kld_to(&self, model: &Hist2d) -> f64 {
        discrete_kld(&self.probs, &model.probs)
    }

    /// Grid as CSV text, one histogram row per line.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.bins {
            for j in 0..self.bins {
                if j > 0 {
                    s.push(',');
                }
                let _ = write!(s, "{:.16e}", self.prob(i, j));
            }
            s.push('\n');
        }
        s
    }
}

/// KL divergence between two discrete distributions on the same support.
pub fn discrete_kld(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (math::ln(a) - math::ln(b.max(MODEL_BIN_FLOOR))))
        .sum()
}

/// Histogram KL divergence from reference samples to (optionally
/// reweighted) model samples.
pub fn hist2d_kld(
    reference: &Dense,
    model: &Dense,
    bins: usize,
    ranges: [(f64, f64); 2],
    model_log_weights: Option<&[f64]>,
) -> Result<f64, Error> {
    let p = Hist2d::build(reference, bins, ranges, None)?;
    let q = Hist2d::build(model, bins, ranges, model_log_weights)?;
    Ok(p.kld_to(&q))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub nll: f64,
    pub nll_sentinels: usize,
    pub reverse_ess: f64,
    pub hist_kld: Option<f64>,
    pub hist_kld_reweighted: Option<f64>,
    pub nll_samples: usize,
    pub ess_samples: usize,
    pub clip_fraction: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| alloc::format!("{x:.16e}"))
}

impl MetricsReport {
    fn fields(&self) -> [(&'static str, String); 8] {
        [
            ("nll", alloc::format!("{:.16e}", self.nll)),
            ("nll_sentinels", alloc::format!("{}", self.nll_sentinels)),
            ("reverse_ess", alloc::format!("{:.16e}", self.reverse_ess)),
            ("hist_kld", opt(self.hist_kld)),
            ("hist_kld_reweighted", opt(self.hist_kld_reweighted)),
            ("nll_samples", alloc::format!("{}", self.nll_samples)),
            ("ess_samples", alloc::format!("{}", self.ess_samples)),
            ("clip_fraction", alloc::format!("{:.16e}", self.clip_fraction)),
        ]
    }

    /// `key=value` lines.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.fields() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn csv_header() -> &'static str {
        "nll,nll_sentinels,reverse_ess,hist_kld,hist_kld_reweighted,nll_samples,ess_samples,clip_fraction"
    }

    pub fn to_csv_row(&self) -> String {
        let f = self.fields();
        let v: Vec<&str> = f.iter().map(|(_, v)| v.as_str()).collect();
        v.join(",")
    }
}
