//! Coupling layers: a subset of dimensions is pushed through per-dimension
//! splines whose parameters are predicted from the remaining dimensions.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::spline::{Direction, SplineKind, SplineSpec};
use super::DimSpec;
use crate::diffgraph::{Dense, Graph, GraphBuilder, NodeId, ParamId, ParamStore, Tape};
use crate::{math, Error};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Embed {
    /// `(x - mid) / half`: maps the interval onto [-1, 1]
    Linear { mid: f64, inv_half: f64 },
    /// `(cos, sin)` of the angle on the period
    Angle { lo: f64, scale: f64 },
}

impl Embed {
    fn width(self) -> usize {
        match self {
            Embed::Linear { .. } => 1,
            Embed::Angle { .. } => 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CouplingLayer {
    mask: Vec<bool>,
    transformed: Vec<usize>,
    conditioning: Vec<usize>,
    specs: Vec<SplineSpec>,
    raw_offsets: Vec<usize>,
    raw_cols: usize,
    embeds: Vec<Embed>,
    features: usize,
    graph: Graph,
    out: NodeId,
    param_ids: Vec<ParamId>,
}

/// Per-layer record kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub(crate) input: Dense,
    pub(crate) tape: Tape,
}

impl CouplingLayer {
    /// Builds a layer. `mask[d]` is true for dimensions that get transformed.
    /// Hidden weights are drawn uniformly in `±1/sqrt(fan_in)`; the output
    /// layer starts at zero so the layer is the identity.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<R: Rng + ?Sized>(
        index: usize,
        mask: Vec<bool>,
        dims: &[DimSpec],
        bins: usize,
        hidden: &[usize],
        min_bin_fraction: f64,
        min_derivative: f64,
        params: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self, Error> {
        if mask.len() != dims.len() {
            return Err(Error::Dimension { expected: dims.len(), got: mask.len() });
        }
        let transformed: Vec<usize> = (0..dims.len()).filter(|&d| mask[d]).collect();
        let conditioning: Vec<usize> = (0..dims.len()).filter(|&d| !mask[d]).collect();
        if transformed.is_empty() || conditioning.is_empty() {
            return Err(Error::Config(format!(
                "layer {index}: mask needs at least one transformed and one conditioning dimension"
            )));
        }
        let mut specs = Vec::new();
        let mut raw_offsets = Vec::new();
        let mut raw_cols = 0;
        for &d in &transformed {
            let ds = dims[d];
            let spec = SplineSpec::new(ds.kind, ds.lo, ds.hi, bins, min_bin_fraction, min_derivative)?;
            raw_offsets.push(raw_cols);
            raw_cols += spec.raw_len();
            specs.push(spec);
        }
        let embeds: Vec<Embed> = conditioning
            .iter()
            .map(|&d| {
                let ds = dims[d];
                match ds.kind {
                    SplineKind::Standard => {
                        Embed::Linear { mid: 0.5 * (ds.lo + ds.hi), inv_half: 2.0 / (ds.hi - ds.lo) }
                    }
                    SplineKind::Circular => Embed::Angle { lo: ds.lo, scale: math::TAU / (ds.hi - ds.lo) },
                }
            })
            .collect();
        let features: usize = embeds.iter().map(|e| e.width()).sum();

        let mut param_ids = Vec::new();
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(features);
        widths.extend_from_slice(hidden);
        widths.push(raw_cols);
        for (i, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let last = i + 2 == widths.len();
            let bound = 1.0 / math::sqrt(fan_in as f64);
            let mut draw = |n: usize| -> Vec<f64> {
                if last {
                    alloc::vec![0.0; n]
                } else {
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
            };
            let w = draw(fan_in * fan_out);
            let b = draw(fan_out);
            param_ids.push(params.add(format!("layer{index}.w{i}"), Dense::from_vec(fan_in, fan_out, w)));
            param_ids.push(params.add(format!("layer{index}.b{i}"), Dense::from_vec(1, fan_out, b)));
        }

        let mut g = GraphBuilder::new(params);
        let mut h = g.input("features", features);
        let n_lin = widths.len() - 1;
        for i in 0..n_lin {
            let w = g.param(param_ids[2 * i])?;
            let b = g.param(param_ids[2 * i + 1])?;
            h = g.matmul(&format!("layer{index}.mm{i}"), h, w)?;
            h = g.bias_add(&format!("layer{index}.bias{i}"), h, b)?;
            if i + 1 < n_lin {
                h = g.relu(&format!("layer{index}.relu{i}"), h)?;
            }
        }
        g.mark_output(h)?;
        let graph = g.build();

        Ok(Self {
            mask,
            transformed,
            conditioning,
            specs,
            raw_offsets,
            raw_cols,
            embeds,
            features,
            graph,
            out: h,
            param_ids,
        })
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn transformed(&self) -> &[usize] {
        &self.transformed
    }

    pub fn conditioning(&self) -> &[usize] {
        &self.conditioning
    }

    pub fn conditioner(&self) -> &Graph {
        &self.graph
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.param_ids
    }

    /// Width of the raw parameter block emitted by the conditioner.
    pub fn raw_width(&self) -> usize {
        self.raw_cols
    }

    fn features_of(&self, x: &Dense) -> Dense {
        let mut f = Dense::zeros(x.rows(), self.features);
        for r in 0..x.rows() {
            let row = x.row(r);
            let out = f.row_mut(r);
            let mut c = 0;
            for (&d, e) in self.conditioning.iter().zip(&self.embeds) {
                match *e {
                    Embed::Linear { mid, inv_half } => {
                        out[c] = (row[d] - mid) * inv_half;
                        c += 1;
                    }
                    Embed::Angle { lo, scale } => {
                        let a = (row[d] - lo) * scale;
                        out[c] = math::cos(a);
                        out[c + 1] = math::sin(a);
                        c += 2;
                    }
                }
            }
        }
        f
    }

    /// Applies the layer in `dir`. Returns the output, the per-row log-det
    /// of the applied direction, and the conditioner tape.
    pub fn apply(&self, params: &ParamStore, x: &Dense, dir: Direction) -> Result<(Dense, Vec<f64>, Tape), Error> {
        if x.cols() != self.mask.len() {
            return Err(Error::Dimension { expected: self.mask.len(), got: x.cols() });
        }
        let feats = self.features_of(x);
        let tape = self.graph.forward_eval(params, &[&feats])?;
        let raw = tape.value(self.out);
        let mut y = x.clone();
        let mut logdet = alloc::vec![0.0; x.rows()];
        for r in 0..x.rows() {
            let raw_row = raw.row(r);
            let mut ld = 0.0;
            for (j, &d) in self.transformed.iter().enumerate() {
                let spec = &self.specs[j];
                let off = self.raw_offsets[j];
                let (v, l) = spec.eval(&raw_row[off..off + spec.raw_len()], x.get(r, d), dir);
                y.set(r, d, v);
                ld += l;
            }
            logdet[r] = ld;
        }
        Ok((y, logdet, tape))
    }

    /// Vector-Jacobian product through the layer. Parameter gradients are
    /// accumulated into `params`; the input cotangent is returned.
    pub(crate) fn vjp(
        &self,
        params: &mut ParamStore,
        trace: &LayerTrace,
        g_out: &Dense,
        g_ld: &[f64],
        dir: Direction,
    ) -> Result<Dense, Error> {
        let x = &trace.input;
        let raw = trace.tape.value(self.out);
        let mut g_raw = Dense::zeros(x.rows(), self.raw_cols);
        let mut g_in = g_out.clone();
        for r in 0..x.rows() {
            let raw_row = raw.row(r);
            let g_raw_row = g_raw.row_mut(r);
            for (j, &d) in self.transformed.iter().enumerate() {
                let spec = &self.specs[j];
                let off = self.raw_offsets[j];
                let len = spec.raw_len();
                let gu = spec.vjp(
                    &raw_row[off..off + len],
                    x.get(r, d),
                    dir,
                    g_out.get(r, d),
                    g_ld[r],
                    &mut g_raw_row[off..off + len],
                );
                g_in.set(r, d, gu);
            }
        }
        let g_feats = self.graph.backward_seeded(&trace.tape, &[(self.out, &g_raw)], params, true)?;
        let g_feats = &g_feats[0];
        for r in 0..x.rows() {
            let gf = g_feats.row(r);
            let mut c = 0;
            for (&d, e) in self.conditioning.iter().zip(&self.embeds) {
                let add = match *e {
                    Embed::Linear { inv_half, .. } => {
                        c += 1;
                        gf[c - 1] * inv_half
                    }
                    Embed::Angle { lo, scale } => {
                        let a = (x.get(r, d) - lo) * scale;
                        c += 2;
                        (-gf[c - 2] * math::sin(a) + gf[c - 1] * math::cos(a)) * scale
                    }
                };
                let cur = g_in.get(r, d);
                g_in.set(r, d, cur + add);
            }
        }
        Ok(g_in)
    }
}
