//! Spline-coupling normalizing flows.
//!
//! The generative direction `g` maps latent points `z` to data points `x`
//! through the coupling layers in order; the density direction `f = g^-1`
//! runs them in reverse. The log-density of the flow is
//! `log q_X(x) = log q_Z(f(x)) + log|det J_{x->z}|`.

mod base;
mod coupling;
mod dual;
pub mod spline;

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use base::{BaseDistribution, BaseKind};
pub use coupling::{CouplingLayer, LayerTrace};
pub use spline::{circular_rq_spline, rq_spline, wrap, Direction, SplineKind, SplineParams};

use crate::diffgraph::{Dense, ParamStore};
use crate::{Error, LOG_ZERO};

/// Rows processed at once by sampling and density evaluation.
const CHUNK: usize = 4096;

/// One coordinate of the flow: spline kind, interval and latent marginal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimSpec {
    pub kind: SplineKind,
    pub lo: f64,
    pub hi: f64,
    pub base: BaseKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPolicy {
    /// Alternating swap for two dimensions, random pairs otherwise.
    #[default]
    Auto,
    /// Even and odd coordinates take turns being transformed.
    Alternating,
    /// Random balanced mask followed by its complement.
    RandomPairs,
}

fn default_min_bin() -> f64 {
    1e-3
}

fn default_min_derivative() -> f64 {
    1e-3
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub dims: Vec<DimSpec>,
    pub layers: usize,
    pub bins: usize,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub mask: MaskPolicy,
    #[serde(default = "default_min_bin")]
    pub min_bin_fraction: f64,
    #[serde(default = "default_min_derivative")]
    pub min_derivative: f64,
    /// Random fixed shift of circular coordinates after every layer.
    #[serde(default = "default_true")]
    pub periodic_shifts: bool,
}

impl FlowConfig {
    /// The 2-D mixture architecture: 13 alternating couplings, 16 bins on
    /// [-50, 50], conditioners with hidden widths [120, 120] and a latent
    /// normal with sigma 10 truncated to the box.
    pub fn gmm() -> Self {
        let d = DimSpec {
            kind: SplineKind::Standard,
            lo: -50.0,
            hi: 50.0,
            base: BaseKind::TruncatedNormal { mean: 0.0, std: 10.0 },
        };
        Self {
            dims: alloc::vec![d, d],
            layers: 13,
            bins: 16,
            hidden: alloc::vec![120, 120],
            mask: MaskPolicy::Alternating,
            min_bin_fraction: default_min_bin(),
            min_derivative: default_min_derivative(),
            periodic_shifts: true,
        }
    }

    /// Flow on the unit torus `[0, 1)^dim` with circular splines and a
    /// uniform latent distribution.
    pub fn torus(dim: usize, layers: usize, bins: usize, hidden: Vec<usize>) -> Self {
        let d = DimSpec { kind: SplineKind::Circular, lo: 0.0, hi: 1.0, base: BaseKind::Uniform };
        Self {
            dims: alloc::vec![d; dim],
            layers,
            bins,
            hidden,
            mask: MaskPolicy::Auto,
            min_bin_fraction: default_min_bin(),
            min_derivative: default_min_derivative(),
            periodic_shifts: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.dims.len() < 2 {
            return Err(Error::Config("flow needs at least two dimensions".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("flow needs at least one coupling layer".into()));
        }
        if self.bins < 2 {
            return Err(Error::Config(alloc::format!("bins must be >= 2, got {}", self.bins)));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        for (i, d) in self.dims.iter().enumerate() {
            if !(d.lo < d.hi) {
                return Err(Error::Config(alloc::format!("dims[{i}]: lo must be below hi")));
            }
        }
        Ok(())
    }

    /// Closed-form parameter count implied by the architecture.
    pub fn param_count(&self, masks: &[Vec<bool>]) -> usize {
        let mut total = 0;
        for mask in masks {
            let mut feats = 0;
            let mut raw = 0;
            for (d, &t) in self.dims.iter().zip(mask) {
                if t {
                    raw += match d.kind {
                        SplineKind::Standard => 3 * self.bins + 1,
                        SplineKind::Circular => 3 * self.bins,
                    };
                } else {
                    feats += match d.kind {
                        SplineKind::Standard => 1,
                        SplineKind::Circular => 2,
                    };
                }
            }
            let mut widths = alloc::vec![feats];
            widths.extend_from_slice(&self.hidden);
            widths.push(raw);
            total += widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>();
        }
        total
    }
}

/// Structure that is drawn at initialization and must be stored alongside
/// the parameters: the masks and the fixed periodic shifts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowLayout {
    pub masks: Vec<Vec<bool>>,
    pub shifts: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct FlowModel {
    config: FlowConfig,
    layout: FlowLayout,
    layers: Vec<CouplingLayer>,
    base: BaseDistribution,
    params: ParamStore,
}

/// Intermediate values of a differentiable pass through every layer.
#[derive(Debug, Clone)]
pub struct FlowTrace {
    dir: Direction,
    layers: Vec<LayerTrace>,
    output: Dense,
    log_det: Vec<f64>,
}

impl FlowTrace {
    pub fn output(&self) -> &Dense {
        &self.output
    }

    /// Log-det of the traced direction (`z -> x` for forward traces).
    pub fn log_det(&self) -> &[f64] {
        &self.log_det
    }
}

/// Builds a flow whose splines all start as the identity, so the initial
/// density equals the latent density.
pub fn init_flow<R: Rng + ?Sized>(config: &FlowConfig, rng: &mut R) -> Result<FlowModel, Error> {
    config.validate()?;
    let dim = config.dim();
    let policy = match config.mask {
        MaskPolicy::Auto if dim == 2 => MaskPolicy::Alternating,
        MaskPolicy::Auto => MaskPolicy::RandomPairs,
        p => p,
    };
    let mut masks = Vec::with_capacity(config.layers);
    while masks.len() < config.layers {
        match policy {
            MaskPolicy::Alternating => {
                let l = masks.len();
                masks.push((0..dim).map(|d| (d + l) % 2 == 1).collect());
            }
            _ => {
                let mut order: Vec<usize> = (0..dim).collect();
                order.shuffle(rng);
                let mut m = alloc::vec![false; dim];
                for &d in &order[..dim / 2] {
                    m[d] = true;
                }
                let complement: Vec<bool> = m.iter().map(|b| !b).collect();
                masks.push(m);
                if masks.len() < config.layers {
                    masks.push(complement);
                }
            }
        }
    }
    let shifts = (0..config.layers)
        .map(|_| {
            config
                .dims
                .iter()
                .map(|d| match d.kind {
                    SplineKind::Circular if config.periodic_shifts => rng.random_range(0.0..(d.hi - d.lo)),
                    _ => 0.0,
                })
                .collect()
        })
        .collect();
    FlowModel::build(config.clone(), FlowLayout { masks, shifts }, rng)
}

impl FlowModel {
    /// Builds a model from an explicit layout. Conditioner weights are drawn
    /// from `rng` (output layers start at zero).
    pub fn build<R: Rng + ?Sized>(config: FlowConfig, layout: FlowLayout, rng: &mut R) -> Result<Self, Error> {
        config.validate()?;
        if layout.masks.len() != config.layers || layout.shifts.len() != config.layers {
            return Err(Error::Config("layout does not match the layer count".into()));
        }
        let base = BaseDistribution::new(&config.dims.iter().map(|d| (d.base, d.lo, d.hi)).collect::<Vec<_>>())?;
        let mut params = ParamStore::new();
        let mut layers = Vec::with_capacity(config.layers);
        for (i, mask) in layout.masks.iter().enumerate() {
            if layout.shifts[i].len() != config.dim() {
                return Err(Error::Dimension { expected: config.dim(), got: layout.shifts[i].len() });
            }
            layers.push(CouplingLayer::new(
                i,
                mask.clone(),
                &config.dims,
                config.bins,
                &config.hidden,
                config.min_bin_fraction,
                config.min_derivative,
                &mut params,
                rng,
            )?);
        }
        Ok(Self { config, layout, layers, base, params })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn layout(&self) -> &FlowLayout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.config.dim()
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn base(&self) -> &BaseDistribution {
        &self.base
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn shift_rows(&self, x: &mut Dense, layer: usize, sign: f64) {
        let shifts = &self.layout.shifts[layer];
        if shifts.iter().all(|&s| s == 0.0) {
            return;
        }
        for r in 0..x.rows() {
            let row = x.row_mut(r);
            for (d, spec) in self.config.dims.iter().enumerate() {
                if spec.kind == SplineKind::Circular && shifts[d] != 0.0 {
                    row[d] = wrap(row[d] + sign * shifts[d], spec.lo, spec.hi);
                }
            }
        }
    }

    fn check_cols(&self, x: &Dense) -> Result<(), Error> {
        if x.cols() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: x.cols() });
        }
        Ok(())
    }

    /// Generative map `x = g(z)` with `log|det J_{z->x}|` per row.
    pub fn forward_map(&self, z: &Dense) -> Result<(Dense, Vec<f64>), Error> {
        self.check_cols(z)?;
        let mut x = z.clone();
        let mut ld = alloc::vec![0.0; z.rows()];
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, l, _) = layer.apply(&self.params, &x, Direction::Forward)?;
            x = y;
            for (a, b) in ld.iter_mut().zip(&l) {
                *a += b;
            }
            self.shift_rows(&mut x, i, 1.0);
        }
        Ok((x, ld))
    }

    /// Density map `z = f(x)` with `log|det J_{x->z}|` per row.
    pub fn inverse_map(&self, x: &Dense) -> Result<(Dense, Vec<f64>), Error> {
        self.check_cols(x)?;
        let mut z = x.clone();
        let mut ld = alloc::vec![0.0; x.rows()];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            self.shift_rows(&mut z, i, -1.0);
            let (y, l, _) = layer.apply(&self.params, &z, Direction::Inverse)?;
            z = y;
            for (a, b) in ld.iter_mut().zip(&l) {
                *a += b;
            }
        }
        Ok((z, ld))
    }

    /// Draws `n` points with their flow log-density
    /// `log q_Z(z) - log|det J_{z->x}|`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<(Dense, Vec<f64>), Error> {
        let dim = self.dim();
        let mut out = Dense::zeros(n, dim);
        let mut logq = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let m = CHUNK.min(n - start);
            let mut z = Dense::zeros(m, dim);
            for r in 0..m {
                self.base.sample_into(rng, z.row_mut(r));
            }
            let (x, ld) = self.forward_map(&z)?;
            for r in 0..m {
                out.row_mut(start + r).copy_from_slice(x.row(r));
                logq.push(self.base.log_density(z.row(r)) - ld[r]);
            }
            start += m;
        }
        Ok((out, logq))
    }

    /// Exact log-density of each row. Rows outside the support of a
    /// non-periodic coordinate (or non-finite rows) get [`LOG_ZERO`].
    pub fn log_prob(&self, x: &Dense) -> Result<Vec<f64>, Error> {
        self.check_cols(x)?;
        let dim = self.dim();
        let mut out = Vec::with_capacity(x.rows());
        let mut start = 0;
        while start < x.rows() {
            let m = CHUNK.min(x.rows() - start);
            let mut chunk = Dense::zeros(m, dim);
            let mut outside = alloc::vec![false; m];
            for r in 0..m {
                let src = x.row(start + r);
                let dst = chunk.row_mut(r);
                for (d, spec) in self.config.dims.iter().enumerate() {
                    let v = src[d];
                    dst[d] = match spec.kind {
                        _ if !v.is_finite() => {
                            outside[r] = true;
                            spec.lo
                        }
                        SplineKind::Circular => wrap(v, spec.lo, spec.hi),
                        SplineKind::Standard if v < spec.lo || v > spec.hi => {
                            outside[r] = true;
                            spec.lo
                        }
                        SplineKind::Standard => v,
                    };
                }
            }
            let (z, ld) = self.inverse_map(&chunk)?;
            for r in 0..m {
                let lp = if outside[r] { LOG_ZERO } else { self.base.log_density(z.row(r)) };
                out.push(if lp <= crate::LOG_ZERO_THRESHOLD { LOG_ZERO } else { lp + ld[r] });
            }
            start += m;
        }
        Ok(out)
    }

    /// Differentiable pass in `dir` (forward: from latent points, inverse:
    /// from data points). Circular inputs are wrapped first.
    pub fn trace(&self, input: &Dense, dir: Direction) -> Result<FlowTrace, Error> {
        self.check_cols(input)?;
        let mut cur = input.clone();
        for r in 0..cur.rows() {
            let row = cur.row_mut(r);
            for (d, spec) in self.config.dims.iter().enumerate() {
                if spec.kind == SplineKind::Circular {
                    row[d] = wrap(row[d], spec.lo, spec.hi);
                }
            }
        }
        let mut ld = alloc::vec![0.0; input.rows()];
        let mut traces = Vec::with_capacity(self.layers.len());
        let order: Vec<usize> = match dir {
            Direction::Forward => (0..self.layers.len()).collect(),
            Direction::Inverse => (0..self.layers.len()).rev().collect(),
        };
        for i in order {
            if dir == Direction::Inverse {
                self.shift_rows(&mut cur, i, -1.0);
            }
            let (y, l, tape) = self.layers[i].apply(&self.params, &cur, dir)?;
            traces.push(LayerTrace { input: cur, tape });
            cur = y;
            for (a, b) in ld.iter_mut().zip(&l) {
                *a += b;
            }
            if dir == Direction::Forward {
                self.shift_rows(&mut cur, i, 1.0);
            }
        }
        Ok(FlowTrace { dir, layers: traces, output: cur, log_det: ld })
    }

    /// Reverse pass through a trace with output cotangent `g_out` and
    /// log-det cotangent `g_ld`. Parameter gradients are accumulated into the
    /// store; the input cotangent is returned.
    pub fn backprop(&mut self, trace: &FlowTrace, g_out: &Dense, g_ld: &[f64]) -> Result<Dense, Error> {
        let mut g = g_out.clone();
        let n = self.layers.len();
        for (k, lt) in trace.layers.iter().enumerate().rev() {
            let layer_idx = match trace.dir {
                Direction::Forward => k,
                Direction::Inverse => n - 1 - k,
            };
            g = self.layers[layer_idx].vjp(&mut self.params, lt, &g, g_ld, trace.dir)?;
        }
        Ok(g)
    }
}
