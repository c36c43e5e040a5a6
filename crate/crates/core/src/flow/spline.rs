//! Monotone rational-quadratic splines on an interval, and their circular
//! variant with a shared boundary derivative.
//!
//! A spline with `K` bins is given by bin widths and heights (each summing to
//! the interval length) and positive knot derivatives. Inside each bin the map
//! is a ratio of two quadratics; the inverse solves the quadratic in closed
//! form. Standard splines act as the identity outside `[lo, hi]`.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::dual::{Dual, Real};
use crate::{math, Error};

pub(crate) const MAX_BINS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Forward,
    Inverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplineKind {
    Standard,
    Circular,
}

/// Explicit spline parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineParams {
    kind: SplineKind,
    lo: f64,
    hi: f64,
    widths: Vec<f64>,
    heights: Vec<f64>,
    derivatives: Vec<f64>,
}

impl SplineParams {
    /// Validates and builds spline parameters. Standard splines take `K + 1`
    /// derivatives, circular splines take `K` (the last knot reuses the first).
    pub fn new(
        kind: SplineKind,
        lo: f64,
        hi: f64,
        widths: Vec<f64>,
        heights: Vec<f64>,
        derivatives: Vec<f64>,
    ) -> Result<Self, Error> {
        let k = widths.len();
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Parameter(alloc::format!("invalid interval [{lo}, {hi}]")));
        }
        if !(1..=MAX_BINS).contains(&k) || heights.len() != k {
            return Err(Error::Parameter(alloc::format!(
                "need 1..={MAX_BINS} bins with matching widths and heights"
            )));
        }
        let expected = match kind {
            SplineKind::Standard => k + 1,
            SplineKind::Circular => k,
        };
        if derivatives.len() != expected {
            return Err(Error::Parameter(alloc::format!(
                "expected {expected} knot derivatives, got {}",
                derivatives.len()
            )));
        }
        let span = hi - lo;
        for (name, v) in [("widths", &widths), ("heights", &heights)] {
            if v.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                return Err(Error::Parameter(alloc::format!("{name} must be strictly positive")));
            }
            let total: f64 = v.iter().sum();
            if (total - span).abs() > 1e-9 * span.max(1.0) {
                return Err(Error::Parameter(alloc::format!("{name} sum to {total}, interval is {span}")));
            }
        }
        if derivatives.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            return Err(Error::Parameter("knot derivatives must be strictly positive".into()));
        }
        Ok(Self { kind, lo, hi, widths, heights, derivatives })
    }

    pub fn identity(kind: SplineKind, lo: f64, hi: f64, bins: usize) -> Result<Self, Error> {
        let w = (hi - lo) / bins as f64;
        let nd = match kind {
            SplineKind::Standard => bins + 1,
            SplineKind::Circular => bins,
        };
        Self::new(kind, lo, hi, alloc::vec![w; bins], alloc::vec![w; bins], alloc::vec![1.0; nd])
    }

    /// Maps unconstrained values to valid parameters the same way the
    /// coupling layers do.
    pub fn from_raw(
        kind: SplineKind,
        lo: f64,
        hi: f64,
        bins: usize,
        raw: &[f64],
        min_bin_fraction: f64,
        min_derivative: f64,
    ) -> Result<Self, Error> {
        let spec = SplineSpec::new(kind, lo, hi, bins, min_bin_fraction, min_derivative)?;
        if raw.len() != spec.raw_len() {
            return Err(Error::Dimension { expected: spec.raw_len(), got: raw.len() });
        }
        let mut k = Knots::default();
        spec.knots(raw, &mut k);
        let widths = (0..bins).map(|i| k.wsoft[i] * spec.width_scale + spec.min_w).collect();
        let heights = (0..bins).map(|i| k.hsoft[i] * spec.width_scale + spec.min_w).collect();
        let derivatives = raw[2 * bins..].iter().map(|&r| spec.derivative(r)).collect();
        Self::new(kind, lo, hi, widths, heights, derivatives)
    }

    pub fn kind(&self) -> SplineKind {
        self.kind
    }

    pub fn bins(&self) -> usize {
        self.widths.len()
    }

    fn knots(&self) -> Knots {
        let mut k = Knots::default();
        let n = self.widths.len();
        k.bins = n;
        k.xs[0] = self.lo;
        k.ys[0] = self.lo;
        for i in 0..n {
            k.xs[i + 1] = k.xs[i] + self.widths[i];
            k.ys[i + 1] = k.ys[i] + self.heights[i];
        }
        k.xs[n] = self.hi;
        k.ys[n] = self.hi;
        for i in 0..=n {
            k.ds[i] = match self.kind {
                SplineKind::Standard => self.derivatives[i],
                SplineKind::Circular => self.derivatives[i % n],
            };
        }
        k
    }

    fn eval_one(&self, k: &Knots, u: f64, dir: Direction) -> (f64, f64) {
        match self.kind {
            SplineKind::Standard => {
                if !(u >= self.lo && u <= self.hi) {
                    return (u, 0.0);
                }
                k.eval(u, dir)
            }
            SplineKind::Circular => {
                let (v, ld) = k.eval(wrap(u, self.lo, self.hi), dir);
                (wrap(v, self.lo, self.hi), ld)
            }
        }
    }
}

/// Applies a standard rational-quadratic spline elementwise. Returns the
/// mapped values and the log-derivative of the applied direction.
pub fn rq_spline(params: &SplineParams, u: &[f64], dir: Direction) -> (Vec<f64>, Vec<f64>) {
    let k = params.knots();
    u.iter().map(|&x| params.eval_one(&k, x, dir)).unzip()
}

/// Circular spline: inputs are wrapped into `[lo, hi)` first, outputs stay
/// inside the period.
pub fn circular_rq_spline(params: &SplineParams, u: &[f64], dir: Direction) -> (Vec<f64>, Vec<f64>) {
    rq_spline(params, u, dir)
}

/// Wraps `u` into `[lo, hi)`.
#[inline]
pub fn wrap(u: f64, lo: f64, hi: f64) -> f64 {
    if u >= lo && u < hi {
        return u;
    }
    let p = hi - lo;
    let mut t = u - lo - p * math::floor((u - lo) / p);
    if t >= p {
        t -= p;
    }
    if t < 0.0 {
        t = 0.0;
    }
    lo + t
}

#[derive(Clone)]
struct Knots {
    bins: usize,
    xs: [f64; MAX_BINS + 1],
    ys: [f64; MAX_BINS + 1],
    ds: [f64; MAX_BINS + 1],
    wsoft: [f64; MAX_BINS],
    hsoft: [f64; MAX_BINS],
}

impl Default for Knots {
    fn default() -> Self {
        Self {
            bins: 0,
            xs: [0.0; MAX_BINS + 1],
            ys: [0.0; MAX_BINS + 1],
            ds: [0.0; MAX_BINS + 1],
            wsoft: [0.0; MAX_BINS],
            hsoft: [0.0; MAX_BINS],
        }
    }
}

impl Knots {
    #[inline]
    fn bin_of(edges: &[f64], bins: usize, u: f64) -> usize {
        let mut k = 0;
        while k + 1 < bins && edges[k + 1] <= u {
            k += 1;
        }
        k
    }

    #[inline]
    fn locate(&self, u: f64, dir: Direction) -> usize {
        match dir {
            Direction::Forward => Self::bin_of(&self.xs, self.bins, u),
            Direction::Inverse => Self::bin_of(&self.ys, self.bins, u),
        }
    }

    fn eval(&self, u: f64, dir: Direction) -> (f64, f64) {
        let k = self.locate(u, dir);
        segment(
            u,
            self.xs[k],
            self.xs[k + 1] - self.xs[k],
            self.ys[k],
            self.ys[k + 1] - self.ys[k],
            self.ds[k],
            self.ds[k + 1],
            dir,
        )
    }
}

/// Rational-quadratic map on one bin. Returns the output and the log of the
/// absolute derivative in the applied direction.
#[allow(clippy::too_many_arguments)]
#[inline]
fn segment<T: Real>(u: T, xk: T, wk: T, yk: T, hk: T, dk: T, dk1: T, dir: Direction) -> (T, T) {
    let two = T::cst(2.0);
    let one = T::cst(1.0);
    let s = hk / wk;
    let c2 = dk1 + dk - two * s;
    let log_slope = |xi: T| {
        let omx = one - xi;
        let xo = xi * omx;
        let den = s + c2 * xo;
        let num = s * s * (dk1 * xi * xi + two * s * xo + dk * omx * omx);
        num.ln() - two * den.ln()
    };
    match dir {
        Direction::Forward => {
            let xi = (u - xk) / wk;
            let omx = one - xi;
            let xo = xi * omx;
            let den = s + c2 * xo;
            let v = yk + hk * (s * xi * xi + dk * xo) / den;
            (v, log_slope(xi))
        }
        Direction::Inverse => {
            let dy = u - yk;
            let a = hk * (s - dk) + dy * c2;
            let b = hk * dk - dy * c2;
            let c = -(s * dy);
            let disc = b * b - T::cst(4.0) * a * c;
            let root = if disc.val() > 0.0 { disc.sqrt() } else { T::cst(0.0) };
            let xi = (two * c) / (-b - root);
            let v = xk + xi * wk;
            (v, -log_slope(xi))
        }
    }
}

/// Layout and constraints of the raw parameter block a conditioner emits for
/// one transformed dimension: `K` width logits, `K` height logits, then the
/// derivative pre-activations (`K + 1` standard, `K` circular).
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct SplineSpec {
    pub kind: SplineKind,
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
    min_w: f64,
    width_scale: f64,
    min_derivative: f64,
    deriv_shift: f64,
}

impl SplineSpec {
    pub fn new(
        kind: SplineKind,
        lo: f64,
        hi: f64,
        bins: usize,
        min_bin_fraction: f64,
        min_derivative: f64,
    ) -> Result<Self, Error> {
        if !(2..=MAX_BINS).contains(&bins) {
            return Err(Error::Config(alloc::format!("bins must be in 2..={MAX_BINS}, got {bins}")));
        }
        if !(lo < hi) {
            return Err(Error::Config(alloc::format!("invalid interval [{lo}, {hi}]")));
        }
        if !(min_bin_fraction >= 0.0 && min_bin_fraction * (bins as f64) < 1.0) {
            return Err(Error::Config("minimum bin fraction too large for bin count".into()));
        }
        if !(0.0..1.0).contains(&min_derivative) {
            return Err(Error::Config("minimum derivative must be in [0, 1)".into()));
        }
        let span = hi - lo;
        Ok(Self {
            kind,
            lo,
            hi,
            bins,
            min_w: min_bin_fraction * span,
            width_scale: (1.0 - min_bin_fraction * bins as f64) * span,
            min_derivative,
            // softplus(0 + shift) + min_derivative == 1
            deriv_shift: math::ln(math::exp(1.0 - min_derivative) - 1.0),
        })
    }

    pub fn raw_len(&self) -> usize {
        match self.kind {
            SplineKind::Standard => 3 * self.bins + 1,
            SplineKind::Circular => 3 * self.bins,
        }
    }

    #[inline]
    fn derivative(&self, r: f64) -> f64 {
        self.min_derivative + math::softplus(r + self.deriv_shift)
    }

    #[inline]
    fn softmax_into(logits: &[f64], out: &mut [f64]) {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &l) in out.iter_mut().zip(logits) {
            *o = math::exp(l - max);
            total += *o;
        }
        let inv = 1.0 / total;
        for o in out.iter_mut() {
            *o *= inv;
        }
    }

    /// Fills bin edges (and the softmax weights); derivatives are filled lazily.
    fn knots(&self, raw: &[f64], k: &mut Knots) {
        let n = self.bins;
        k.bins = n;
        Self::softmax_into(&raw[..n], &mut k.wsoft[..n]);
        Self::softmax_into(&raw[n..2 * n], &mut k.hsoft[..n]);
        k.xs[0] = self.lo;
        k.ys[0] = self.lo;
        for i in 0..n - 1 {
            k.xs[i + 1] = k.xs[i] + self.min_w + self.width_scale * k.wsoft[i];
            k.ys[i + 1] = k.ys[i] + self.min_w + self.width_scale * k.hsoft[i];
        }
        k.xs[n] = self.hi;
        k.ys[n] = self.hi;
    }

    #[inline]
    fn deriv_index(&self, i: usize) -> usize {
        match self.kind {
            SplineKind::Standard => i,
            SplineKind::Circular => i % self.bins,
        }
    }

    #[inline]
    fn in_domain(&self, u: f64) -> Option<f64> {
        match self.kind {
            SplineKind::Standard => (u >= self.lo && u <= self.hi).then_some(u),
            SplineKind::Circular => Some(wrap(u, self.lo, self.hi)),
        }
    }

    #[inline]
    fn finish(&self, v: f64) -> f64 {
        match self.kind {
            SplineKind::Standard => v,
            SplineKind::Circular => wrap(v, self.lo, self.hi),
        }
    }

    /// Evaluates the spline defined by `raw` at `u`.
    pub fn eval(&self, raw: &[f64], u: f64, dir: Direction) -> (f64, f64) {
        let Some(u) = self.in_domain(u) else {
            return (u, 0.0);
        };
        let mut k = Knots::default();
        self.knots(raw, &mut k);
        let b = k.locate(u, dir);
        let base = 2 * self.bins;
        let dk = self.derivative(raw[base + self.deriv_index(b)]);
        let dk1 = self.derivative(raw[base + self.deriv_index(b + 1)]);
        let (v, ld) = segment(u, k.xs[b], k.xs[b + 1] - k.xs[b], k.ys[b], k.ys[b + 1] - k.ys[b], dk, dk1, dir);
        (self.finish(v), ld)
    }

    /// Vector-Jacobian product of `(v, logdet)` at `u` with cotangents
    /// `(g_v, g_ld)`. Adds the raw-parameter gradient into `g_raw` and returns
    /// the gradient with respect to `u`.
    pub fn vjp(&self, raw: &[f64], u: f64, dir: Direction, g_v: f64, g_ld: f64, g_raw: &mut [f64]) -> f64 {
        let Some(u) = self.in_domain(u) else {
            return g_v;
        };
        let n = self.bins;
        let mut k = Knots::default();
        self.knots(raw, &mut k);
        let b = k.locate(u, dir);
        let base = 2 * n;
        let (i0, i1) = (self.deriv_index(b), self.deriv_index(b + 1));
        let (r0, r1) = (raw[base + i0] + self.deriv_shift, raw[base + i1] + self.deriv_shift);
        let dk = self.min_derivative + math::softplus(r0);
        let dk1 = self.min_derivative + math::softplus(r1);

        let (v, ld) = segment(
            Dual::var(u, 0),
            Dual::var(k.xs[b], 1),
            Dual::var(k.xs[b + 1] - k.xs[b], 2),
            Dual::var(k.ys[b], 3),
            Dual::var(k.ys[b + 1] - k.ys[b], 4),
            Dual::var(dk, 5),
            Dual::var(dk1, 6),
            dir,
        );
        let mut l = [0.0; 7];
        for (i, li) in l.iter_mut().enumerate() {
            *li = g_v * v.d[i] + g_ld * ld.d[i];
        }

        // edges: x_b = lo + sum_{j<b} W_j, w_b = W_b; same for heights
        let mut gw = [0.0; MAX_BINS];
        let mut gh = [0.0; MAX_BINS];
        for j in 0..b {
            gw[j] = l[1];
            gh[j] = l[3];
        }
        gw[b] += l[2];
        gh[b] += l[4];
        for (g, soft, off) in [(&gw, &k.wsoft, 0), (&gh, &k.hsoft, n)] {
            let mut dot = 0.0;
            for j in 0..n {
                dot += g[j] * soft[j];
            }
            for j in 0..n {
                g_raw[off + j] += self.width_scale * soft[j] * (g[j] - dot);
            }
        }
        g_raw[base + i0] += l[5] * math::sigmoid(r0);
        g_raw[base + i1] += l[6] * math::sigmoid(r1);
        l[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_params(r: &mut crate::SeedRng, kind: SplineKind, lo: f64, hi: f64, bins: usize) -> SplineParams {
        let n = match kind {
            SplineKind::Standard => 3 * bins + 1,
            SplineKind::Circular => 3 * bins,
        };
        let raw: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        SplineParams::from_raw(kind, lo, hi, bins, &raw, 1e-3, 1e-3).unwrap()
    }

    #[test]
    fn identity_spline() {
        let p = SplineParams::identity(SplineKind::Standard, 0.0, 1.0, 8).unwrap();
        let (v, ld) = rq_spline(&p, &[0.37], Direction::Forward);
        assert!((v[0] - 0.37).abs() < 1e-15);
        assert!(ld[0].abs() < 1e-15);
        let p = SplineParams::identity(SplineKind::Circular, 0.0, 1.0, 8).unwrap();
        let (v, ld) = circular_rq_spline(&p, &[0.9], Direction::Forward);
        assert!((v[0] - 0.9).abs() < 1e-15);
        assert!(ld[0].abs() < 1e-15);
    }

    #[test]
    fn invalid_params_rejected() {
        let w = alloc::vec![0.5, 0.5];
        assert!(SplineParams::new(SplineKind::Standard, 0.0, 1.0, w.clone(), w.clone(), alloc::vec![1.0; 2]).is_err());
        assert!(SplineParams::new(SplineKind::Standard, 0.0, 1.0, w.clone(), w.clone(), alloc::vec![1.0, -1.0, 1.0])
            .is_err());
        assert!(SplineParams::new(SplineKind::Standard, 0.0, 1.0, alloc::vec![0.2, 0.2], w, alloc::vec![1.0; 3])
            .is_err());
    }

    #[test]
    fn roundtrip_and_monotone() {
        let mut r = crate::SeedRng::seed_from_u64(1);
        for kind in [SplineKind::Standard, SplineKind::Circular] {
            for _ in 0..50 {
                let p = random_params(&mut r, kind, -3.0, 5.0, 12);
                let mut us: Vec<f64> = (0..200).map(|_| r.random_range(-3.0..5.0)).collect();
                us.sort_by(f64::total_cmp);
                let (v, ld) = rq_spline(&p, &us, Direction::Forward);
                let (back, ild) = rq_spline(&p, &v, Direction::Inverse);
                for i in 0..us.len() {
                    assert!((back[i] - us[i]).abs() < 1e-10, "{kind:?} roundtrip {} vs {}", back[i], us[i]);
                    assert!((ld[i] + ild[i]).abs() < 1e-9);
                }
                if kind == SplineKind::Standard {
                    for w in v.windows(2) {
                        assert!(w[1] >= w[0]);
                    }
                }
            }
        }
    }

    #[test]
    fn logdet_matches_finite_difference_slope() {
        let mut r = crate::SeedRng::seed_from_u64(2);
        let h = 1e-6;
        for _ in 0..50 {
            let p = random_params(&mut r, SplineKind::Standard, 0.0, 1.0, 8);
            for _ in 0..20 {
                let u = r.random_range(0.01..0.99);
                let (v, ld) = rq_spline(&p, &[u - h, u, u + h], Direction::Forward);
                let slope = (v[2] - v[0]) / (2.0 * h);
                assert!((slope.ln() - ld[1]).abs() < 1e-6, "{} vs {}", slope.ln(), ld[1]);
            }
        }
    }

    #[test]
    fn circular_derivative_continuous_at_seam() {
        let mut r = crate::SeedRng::seed_from_u64(3);
        let d = 1e-12;
        for _ in 0..20 {
            let p = random_params(&mut r, SplineKind::Circular, 0.0, 1.0, 8);
            let (_, ld) = circular_rq_spline(&p, &[1.0 - d, d], Direction::Forward);
            assert!((ld[0] - ld[1]).abs() < 1e-6, "{} vs {}", ld[0], ld[1]);
        }
    }

    #[test]
    fn circular_seam_slope_by_finite_differences() {
        // second-order one-sided differences on each side of the seam;
        // the value at hi is the value at lo plus one period
        let mut r = crate::SeedRng::seed_from_u64(13);
        let h = 1e-6;
        for _ in 0..20 {
            let p = random_params(&mut r, SplineKind::Circular, 0.0, 1.0, 8);
            let (v, _) = circular_rq_spline(&p, &[0.0, h, 2.0 * h, 1.0 - h, 1.0 - 2.0 * h], Direction::Forward);
            let above = (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * h);
            let below = (3.0 * (v[0] + 1.0) - 4.0 * v[3] + v[4]) / (2.0 * h);
            assert!((below - above).abs() < 1e-6 * below.max(1.0), "{below} vs {above}");
        }
    }

    #[test]
    fn circular_roundtrip_with_shift() {
        let mut r = crate::SeedRng::seed_from_u64(4);
        let p = random_params(&mut r, SplineKind::Circular, 0.0, 1.0, 8);
        for _ in 0..500 {
            let u: f64 = r.random_range(0.0..1.0);
            let shifted = wrap(u + 0.25, 0.0, 1.0);
            let (v, _) = circular_rq_spline(&p, &[shifted], Direction::Forward);
            let (b, _) = circular_rq_spline(&p, &v, Direction::Inverse);
            let back = wrap(b[0] - 0.25, 0.0, 1.0);
            let d = (back - u).abs();
            assert!(d.min(1.0 - d) < 1e-10);
        }
    }

    #[test]
    fn out_of_interval_is_identity() {
        let mut r = crate::SeedRng::seed_from_u64(5);
        let p = random_params(&mut r, SplineKind::Standard, -1.0, 1.0, 4);
        let (v, ld) = rq_spline(&p, &[-2.5, 3.0], Direction::Forward);
        assert_eq!(v, alloc::vec![-2.5, 3.0]);
        assert_eq!(ld, alloc::vec![0.0, 0.0]);
    }

    #[test]
    fn spec_eval_agrees_with_explicit_params() {
        let mut r = crate::SeedRng::seed_from_u64(6);
        for kind in [SplineKind::Standard, SplineKind::Circular] {
            let spec = SplineSpec::new(kind, -2.0, 2.0, 6, 1e-3, 1e-3).unwrap();
            let raw: Vec<f64> = (0..spec.raw_len()).map(|_| r.random_range(-3.0..3.0)).collect();
            let p = SplineParams::from_raw(kind, -2.0, 2.0, 6, &raw, 1e-3, 1e-3).unwrap();
            for dir in [Direction::Forward, Direction::Inverse] {
                for _ in 0..100 {
                    let u = r.random_range(-2.0..2.0);
                    let (a, la) = spec.eval(&raw, u, dir);
                    let (b, lb) = rq_spline(&p, &[u], dir);
                    assert!((a - b[0]).abs() < 1e-12 && (la - lb[0]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut r = crate::SeedRng::seed_from_u64(7);
        let h = 1e-6;
        for kind in [SplineKind::Standard, SplineKind::Circular] {
            let spec = SplineSpec::new(kind, 0.0, 1.0, 5, 1e-3, 1e-3).unwrap();
            for dir in [Direction::Forward, Direction::Inverse] {
                for _ in 0..30 {
                    let raw: Vec<f64> = (0..spec.raw_len()).map(|_| r.random_range(-1.5..1.5)).collect();
                    let u = r.random_range(0.05..0.95);
                    let (gv, gl) = (r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
                    let f = |raw: &[f64], u: f64| {
                        let (v, ld) = spec.eval(raw, u, dir);
                        gv * v + gl * ld
                    };
                    let mut g_raw = alloc::vec![0.0; raw.len()];
                    let gu = spec.vjp(&raw, u, dir, gv, gl, &mut g_raw);
                    let fd_u = (f(&raw, u + h) - f(&raw, u - h)) / (2.0 * h);
                    assert!((gu - fd_u).abs() < 1e-5 * fd_u.abs().max(1.0), "du {gu} vs {fd_u}");
                    for i in 0..raw.len() {
                        let mut p = raw.clone();
                        p[i] += h;
                        let up = f(&p, u);
                        p[i] -= 2.0 * h;
                        let down = f(&p, u);
                        let fd = (up - down) / (2.0 * h);
                        assert!((g_raw[i] - fd).abs() < 1e-5 * fd.abs().max(1.0), "raw[{i}] {} vs {fd}", g_raw[i]);
                    }
                }
            }
        }
    }
}
