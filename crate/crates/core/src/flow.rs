//! Flows composed of AUTM coupling layers, AUTM autoregressive layers and
//! coordinate permutations over a standard-normal base.
//!
//! Layers are listed in generative order: sampling pushes a base draw through
//! `layers[0]`, then `layers[1]`, and so on. Densities are evaluated on the
//! pull-back path, where every transformed coordinate is recovered by one
//! reverse-time integration and the log-slope accumulated along that
//! trajectory is the log-Jacobian of the inverse.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditioner::{self, Activation, ConditionerError, ConditionerNet};
use crate::integrand::{Family, Integrand, Params};
use crate::invbench::RefineConfig;
use crate::map::{self, MapError, SolverConfig};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlowError {
    #[error("expected a vector of length {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("layer {layer}, coordinate {coord}: {source}")]
    Map {
        layer: usize,
        coord: usize,
        source: MapError,
    },
    #[error("layer {layer}, coordinate {coord}: inversion stopped at residual {residual:e}")]
    NotConverged {
        layer: usize,
        coord: usize,
        residual: f64,
    },
    #[error("layer {layer}: {source}")]
    Conditioner {
        layer: usize,
        source: ConditionerError,
    },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl FlowError {
    fn at_layer(self, layer: usize) -> Self {
        match self {
            FlowError::Map { coord, source, .. } => FlowError::Map {
                layer,
                coord,
                source,
            },
            FlowError::NotConverged {
                coord, residual, ..
            } => FlowError::NotConverged {
                layer,
                coord,
                residual,
            },
            FlowError::Conditioner { source, .. } => FlowError::Conditioner { layer, source },
            other => other,
        }
    }
}

fn map_err(coord: usize) -> impl FnOnce(MapError) -> FlowError {
    move |source| FlowError::Map {
        layer: 0,
        coord,
        source,
    }
}

fn net_err(source: ConditionerError) -> FlowError {
    FlowError::Conditioner { layer: 0, source }
}

#[inline]
fn triple(out: &[f64], k: usize) -> Params {
    [out[3 * k], out[3 * k + 1], out[3 * k + 2]]
}

/// Copies one block and transforms the other coordinatewise with parameters
/// computed from the copied block.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    dim: usize,
    split: usize,
    /// `false`: transform `x[split..]` given `x[..split]`;
    /// `true`: transform `x[..split]` given `x[split..]`.
    transform_first: bool,
    family: Family,
    solver: SolverConfig,
    net: ConditionerNet,
}

impl CouplingLayer {
    pub fn new(
        dim: usize,
        split: usize,
        transform_first: bool,
        family: Family,
        solver: SolverConfig,
        net: ConditionerNet,
    ) -> Result<Self, FlowError> {
        if split == 0 || split >= dim {
            return Err(FlowError::Invalid(format!(
                "coupling split must satisfy 1 <= d < D, got d={split}, D={dim}"
            )));
        }
        let layer = Self {
            dim,
            split,
            transform_first,
            family,
            solver: solver.forward(),
            net,
        };
        let (n_cond, n_trans) = (layer.conditioning().len(), layer.transformed().len());
        if layer.net.input_dim() != n_cond || layer.net.output_dim() != 3 * n_trans {
            return Err(FlowError::Invalid(format!(
                "coupling conditioner must map {n_cond} -> {}, got {} -> {}",
                3 * n_trans,
                layer.net.input_dim(),
                layer.net.output_dim()
            )));
        }
        Ok(layer)
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn transform_first(&self) -> bool {
        self.transform_first
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn solver(&self) -> &SolverConfig {
        &self.solver
    }

    pub fn net(&self) -> &ConditionerNet {
        &self.net
    }

    pub fn conditioning(&self) -> std::ops::Range<usize> {
        if self.transform_first {
            self.split..self.dim
        } else {
            0..self.split
        }
    }

    pub fn transformed(&self) -> std::ops::Range<usize> {
        if self.transform_first {
            0..self.split
        } else {
            self.split..self.dim
        }
    }

    fn coefficients(&self, v: &[f64]) -> Result<Vec<f64>, FlowError> {
        self.net.eval(&v[self.conditioning()]).map_err(net_err)
    }

    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        let coef = self.coefficients(x)?;
        let mut y = x.to_vec();
        let mut logdet = 0.0;
        for (j, k) in self.transformed().enumerate() {
            let g = Integrand::new(self.family, triple(&coef, j));
            let r = map::forward(&g, &self.solver, x[k]).map_err(map_err(k))?;
            y[k] = r.y;
            logdet += r.log_deriv;
        }
        Ok((y, logdet))
    }

    fn inverse(&self, y: &[f64], refine: &RefineConfig) -> Result<Vec<f64>, FlowError> {
        let coef = self.coefficients(y)?;
        let mut x = y.to_vec();
        for (j, k) in self.transformed().enumerate() {
            let g = Integrand::new(self.family, triple(&coef, j));
            x[k] = invert_scalar(&g, &self.solver, y[k], refine, k)?;
        }
        Ok(x)
    }

    fn pullback(&self, y: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        let coef = self.coefficients(y)?;
        let rev = self.solver.reverse();
        let mut x = y.to_vec();
        let mut logdet = 0.0;
        for (j, k) in self.transformed().enumerate() {
            let g = Integrand::new(self.family, triple(&coef, j));
            let (r, _) = map::integrate_resolved(&g, &rev, y[k], false).map_err(map_err(k))?;
            x[k] = r.y;
            logdet += r.log_deriv;
        }
        Ok((x, logdet))
    }

    fn pullback_vjp(
        &self,
        y: &[f64],
        xbar: &[f64],
        lbar: f64,
        dparams: &mut [f64],
    ) -> Result<Vec<f64>, FlowError> {
        let cond = self.conditioning();
        let coef = self.coefficients(y)?;
        let rev = self.solver.reverse();
        let mut ybar = xbar.to_vec();
        let mut cbar = vec![0.0; coef.len()];
        for (j, k) in self.transformed().enumerate() {
            let g = Integrand::new(self.family, triple(&coef, j));
            let (_, v) = map::integrate_vjp_resolved(&g, &rev, y[k], xbar[k], lbar).map_err(map_err(k))?;
            ybar[k] = v.dx;
            cbar[3 * j..3 * j + 3].copy_from_slice(&v.dparams);
        }
        let din = self
            .net
            .vjp_into(&y[cond.clone()], &cbar, dparams)
            .map_err(net_err)?;
        for (i, k) in cond.enumerate() {
            ybar[k] += din[i];
        }
        Ok(ybar)
    }
}

/// Triangular layer whose coordinate `k` is transformed with coefficients
/// from a MADE-masked conditioner reading only earlier coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoregressiveLayer {
    dim: usize,
    /// `ordering[i]` = position of coordinate `i` in the autoregressive order.
    ordering: Vec<usize>,
    hidden: Vec<usize>,
    family: Family,
    solver: SolverConfig,
    net: ConditionerNet,
}

impl AutoregressiveLayer {
    pub fn new(
        ordering: Vec<usize>,
        hidden: Vec<usize>,
        family: Family,
        solver: SolverConfig,
        activation: Activation,
        seed: u64,
    ) -> Result<Self, FlowError> {
        let dim = ordering.len();
        let net = conditioner::masked_net(dim, &hidden, &ordering, activation, seed).map_err(net_err)?;
        Ok(Self {
            dim,
            ordering,
            hidden,
            family,
            solver: solver.forward(),
            net,
        })
    }

    pub fn ordering(&self) -> &[usize] {
        &self.ordering
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn solver(&self) -> &SolverConfig {
        &self.solver
    }

    pub fn net(&self) -> &ConditionerNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut ConditionerNet {
        &mut self.net
    }

    /// Coordinates sorted by autoregressive position.
    fn order(&self) -> Vec<usize> {
        let mut by_rank = vec![0; self.dim];
        for (k, &r) in self.ordering.iter().enumerate() {
            by_rank[r] = k;
        }
        by_rank
    }

    fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        let coef = self.net.eval(x).map_err(net_err)?;
        let mut y = x.to_vec();
        let mut logdet = 0.0;
        for k in 0..self.dim {
            let g = Integrand::new(self.family, triple(&coef, k));
            let r = map::forward(&g, &self.solver, x[k]).map_err(map_err(k))?;
            y[k] = r.y;
            logdet += r.log_deriv;
        }
        Ok((y, logdet))
    }

    /// Sequential recovery in autoregressive order; `solve` inverts one
    /// coordinate and returns `(x_k, log-slope of the inverse)`.
    fn recover(
        &self,
        y: &[f64],
        mut solve: impl FnMut(&Integrand, f64, usize) -> Result<(f64, f64), FlowError>,
    ) -> Result<(Vec<f64>, f64), FlowError> {
        let mut x = vec![0.0; self.dim];
        let mut logdet = 0.0;
        for k in self.order() {
            let coef = self.net.eval(&x).map_err(net_err)?;
            let g = Integrand::new(self.family, triple(&coef, k));
            let (xk, ld) = solve(&g, y[k], k)?;
            x[k] = xk;
            logdet += ld;
        }
        Ok((x, logdet))
    }

    fn inverse(&self, y: &[f64], refine: &RefineConfig) -> Result<Vec<f64>, FlowError> {
        self.recover(y, |g, yk, k| {
            Ok((invert_scalar(g, &self.solver, yk, refine, k)?, 0.0))
        })
        .map(|(x, _)| x)
    }

    fn pullback(&self, y: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        let rev = self.solver.reverse();
        self.recover(y, |g, yk, k| {
            let (r, _) = map::integrate_resolved(g, &rev, yk, false).map_err(map_err(k))?;
            Ok((r.y, r.log_deriv))
        })
    }

    fn pullback_vjp(
        &self,
        y: &[f64],
        xbar: &[f64],
        lbar: f64,
        dparams: &mut [f64],
    ) -> Result<Vec<f64>, FlowError> {
        let (x, _) = self.pullback(y)?;
        // masking makes block k of net(x) equal to the coefficients used
        // when coordinate k was recovered
        let coef = self.net.eval(&x).map_err(net_err)?;
        let rev = self.solver.reverse();
        let mut xbar = xbar.to_vec();
        let mut ybar = vec![0.0; self.dim];
        let mut cot = vec![0.0; coef.len()];
        for k in self.order().into_iter().rev() {
            let g = Integrand::new(self.family, triple(&coef, k));
            let (_, v) = map::integrate_vjp_resolved(&g, &rev, y[k], xbar[k], lbar).map_err(map_err(k))?;
            ybar[k] = v.dx;
            cot.iter_mut().for_each(|c| *c = 0.0);
            cot[3 * k..3 * k + 3].copy_from_slice(&v.dparams);
            let din = self.net.vjp_into(&x, &cot, dparams).map_err(net_err)?;
            for (xb, d) in xbar.iter_mut().zip(din) {
                *xb += d;
            }
        }
        Ok(ybar)
    }
}

fn invert_scalar(
    g: &Integrand,
    solver: &SolverConfig,
    y: f64,
    refine: &RefineConfig,
    coord: usize,
) -> Result<f64, FlowError> {
    let inv = map::inverse(g, &solver.reverse(), y, refine).map_err(map_err(coord))?;
    if !inv.converged {
        return Err(FlowError::NotConverged {
            layer: 0,
            coord,
            residual: inv.residual,
        });
    }
    Ok(inv.x)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Coupling(CouplingLayer),
    Autoregressive(AutoregressiveLayer),
    /// `y[i] = x[perm[i]]`
    Permutation(Vec<usize>),
}

impl Layer {
    pub fn dim(&self) -> usize {
        match self {
            Layer::Coupling(c) => c.dim,
            Layer::Autoregressive(a) => a.dim,
            Layer::Permutation(p) => p.len(),
        }
    }

    pub fn net(&self) -> Option<&ConditionerNet> {
        match self {
            Layer::Coupling(c) => Some(&c.net),
            Layer::Autoregressive(a) => Some(&a.net),
            Layer::Permutation(_) => None,
        }
    }

    fn net_mut(&mut self) -> Option<&mut ConditionerNet> {
        match self {
            Layer::Coupling(c) => Some(&mut c.net),
            Layer::Autoregressive(a) => Some(&mut a.net),
            Layer::Permutation(_) => None,
        }
    }

    pub fn n_params(&self) -> usize {
        self.net().map_or(0, |n| n.n_params())
    }

    fn check(&self, v: &[f64]) -> Result<(), FlowError> {
        if v.len() != self.dim() {
            return Err(FlowError::Dimension {
                expected: self.dim(),
                got: v.len(),
            });
        }
        Ok(())
    }

    /// `(y, log|det J|)` in the generative direction.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        self.check(x)?;
        match self {
            Layer::Coupling(c) => c.forward(x),
            Layer::Autoregressive(a) => a.forward(x),
            Layer::Permutation(p) => Ok((p.iter().map(|&i| x[i]).collect(), 0.0)),
        }
    }

    /// Exact inverse: reverse-time integration refined against the forward
    /// discretization.
    pub fn inverse(&self, y: &[f64], refine: &RefineConfig) -> Result<Vec<f64>, FlowError> {
        self.check(y)?;
        match self {
            Layer::Coupling(c) => c.inverse(y, refine),
            Layer::Autoregressive(a) => a.inverse(y, refine),
            Layer::Permutation(p) => Ok(unpermute(p, y)),
        }
    }

    /// Reverse-time pull-back used for densities: `(x, log|det J_inverse|)`.
    pub fn pullback(&self, y: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        self.check(y)?;
        match self {
            Layer::Coupling(c) => c.pullback(y),
            Layer::Autoregressive(a) => a.pullback(y),
            Layer::Permutation(p) => Ok((unpermute(p, y), 0.0)),
        }
    }

    /// Given cotangents on the pull-back outputs `(x, logdet)`, returns the
    /// cotangent on `y` and accumulates conditioner gradients into `dparams`.
    pub fn pullback_vjp(
        &self,
        y: &[f64],
        xbar: &[f64],
        lbar: f64,
        dparams: &mut [f64],
    ) -> Result<Vec<f64>, FlowError> {
        self.check(y)?;
        match self {
            Layer::Coupling(c) => c.pullback_vjp(y, xbar, lbar, dparams),
            Layer::Autoregressive(a) => a.pullback_vjp(y, xbar, lbar, dparams),
            Layer::Permutation(p) => Ok(p.iter().map(|&i| xbar[i]).collect()),
        }
    }
}

fn unpermute(perm: &[usize], y: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; y.len()];
    for (i, &p) in perm.iter().enumerate() {
        x[p] = y[i];
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    #[default]
    Coupling,
    Autoregressive,
}

/// Recipe for a freshly initialized model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub dim: usize,
    /// Number of AUTM layers (permutations not counted).
    pub layers: usize,
    pub architecture: Architecture,
    pub family: Family,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub steps: usize,
    /// Coupling split; `⌊D/2⌋` when absent.
    pub split: Option<usize>,
    /// Random permutations between AUTM layers; defaults to on for
    /// autoregressive flows and off for coupling flows.
    pub permutations: Option<bool>,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            dim: 2,
            layers: 4,
            architecture: Architecture::Coupling,
            family: Family::Quadratic,
            hidden: vec![32, 32],
            activation: Activation::Tanh,
            steps: map::DEFAULT_STEPS,
            split: None,
            permutations: None,
            seed: 0,
        }
    }
}

impl ModelSpec {
    /// Every problem with the spec, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.dim == 0 {
            out.push("dimension must be at least 1".to_string());
        }
        if self.steps == 0 {
            out.push("solver steps must be at least 1".to_string());
        }
        if self.hidden.iter().any(|&h| h == 0) {
            out.push("hidden layer widths must be positive".to_string());
        }
        if self.architecture == Architecture::Coupling && self.layers > 0 {
            if self.dim < 2 {
                out.push("coupling layers need dimension >= 2".to_string());
            } else {
                let d = self.split_or_default();
                if d == 0 || d >= self.dim {
                    out.push(format!("coupling split must satisfy 1 <= d < {}, got {d}", self.dim));
                }
            }
        }
        out
    }

    pub fn split_or_default(&self) -> usize {
        self.split.unwrap_or(self.dim / 2)
    }

    pub fn permutations_or_default(&self) -> bool {
        self.permutations
            .unwrap_or(self.architecture == Architecture::Autoregressive)
    }
}

/// A flow over `R^D` with a standard-normal base.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    dim: usize,
    layers: Vec<Layer>,
    refine: RefineConfig,
}

impl FlowModel {
    pub fn new(dim: usize, layers: Vec<Layer>) -> Result<Self, FlowError> {
        for (i, l) in layers.iter().enumerate() {
            if l.dim() != dim {
                return Err(FlowError::Invalid(format!(
                    "layer {i} has dimension {}, model has {dim}",
                    l.dim()
                )));
            }
            if let Layer::Permutation(p) = l {
                if !conditioner::is_permutation(p, dim) {
                    return Err(FlowError::Invalid(format!("layer {i} is not a permutation")));
                }
            }
        }
        Ok(Self {
            dim,
            layers,
            refine: RefineConfig::default(),
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            layers: Vec::new(),
            refine: RefineConfig::default(),
        }
    }

    pub fn build(spec: &ModelSpec) -> Result<Self, FlowError> {
        let problems = spec.problems();
        if !problems.is_empty() {
            return Err(FlowError::Invalid(problems.join("; ")));
        }
        let d = spec.dim;
        let solver = SolverConfig::rk4(spec.steps);
        let permute = spec.permutations_or_default();
        let mut layers = Vec::new();
        for i in 0..spec.layers {
            if i > 0 && permute {
                let mut perm: Vec<usize> = (0..d).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (0x9e37_79b9 + i as u64));
                perm.shuffle(&mut rng);
                layers.push(Layer::Permutation(perm));
            }
            let net_seed = spec.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let layer = match spec.architecture {
                Architecture::Coupling => {
                    let split = spec.split_or_default();
                    let transform_first = i % 2 == 1;
                    let (n_cond, n_trans) = if transform_first {
                        (d - split, split)
                    } else {
                        (split, d - split)
                    };
                    let mut dims = vec![n_cond];
                    dims.extend_from_slice(&spec.hidden);
                    dims.push(3 * n_trans);
                    let net = ConditionerNet::init(&dims, spec.activation, net_seed)
                        .map_err(|e| net_err(e).at_layer(layers.len()))?;
                    Layer::Coupling(CouplingLayer::new(d, split, transform_first, spec.family, solver, net)?)
                }
                Architecture::Autoregressive => Layer::Autoregressive(
                    AutoregressiveLayer::new(
                        (0..d).collect(),
                        spec.hidden.clone(),
                        spec.family,
                        solver,
                        spec.activation,
                        net_seed,
                    )
                    .map_err(|e| e.at_layer(layers.len()))?,
                ),
            };
            layers.push(layer);
        }
        Self::new(d, layers)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn refine(&self) -> &RefineConfig {
        &self.refine
    }

    pub fn set_refine(&mut self, refine: RefineConfig) {
        self.refine = refine;
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Layer::n_params).sum()
    }

    /// All conditioner parameters, concatenated in layer order.
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .filter_map(Layer::net)
            .flat_map(|n| n.params().iter().copied())
            .collect()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), FlowError> {
        if params.len() != self.n_params() {
            return Err(FlowError::Invalid(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                params.len()
            )));
        }
        let mut off = 0;
        for net in self.layers.iter_mut().filter_map(Layer::net_mut) {
            let n = net.n_params();
            net.params_mut().copy_from_slice(&params[off..off + n]);
            off += n;
        }
        Ok(())
    }

    fn check(&self, v: &[f64]) -> Result<(), FlowError> {
        if v.len() != self.dim {
            return Err(FlowError::Dimension {
                expected: self.dim,
                got: v.len(),
            });
        }
        Ok(())
    }

    /// Base sample → data, with the summed forward log-determinant.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        self.check(x)?;
        let mut cur = x.to_vec();
        let mut total = 0.0;
        for (i, l) in self.layers.iter().enumerate() {
            let (next, ld) = l.forward(&cur).map_err(|e| e.at_layer(i))?;
            cur = next;
            total += ld;
        }
        Ok((cur, total))
    }

    /// Data → base sample through the refined layer inverses.
    pub fn inverse(&self, y: &[f64]) -> Result<Vec<f64>, FlowError> {
        self.check(y)?;
        let mut cur = y.to_vec();
        for (i, l) in self.layers.iter().enumerate().rev() {
            cur = l.inverse(&cur, &self.refine).map_err(|e| e.at_layer(i))?;
        }
        Ok(cur)
    }

    /// Base sample and the summed inverse log-determinant along the pull-back.
    pub fn pullback(&self, y: &[f64]) -> Result<(Vec<f64>, f64), FlowError> {
        self.check(y)?;
        let mut cur = y.to_vec();
        let mut total = 0.0;
        for (i, l) in self.layers.iter().enumerate().rev() {
            let (prev, ld) = l.pullback(&cur).map_err(|e| e.at_layer(i))?;
            cur = prev;
            total += ld;
        }
        Ok((cur, total))
    }

    /// `log p(y)` in nats.
    pub fn log_density(&self, y: &[f64]) -> Result<f64, FlowError> {
        let (x, logdet) = self.pullback(y)?;
        Ok(standard_normal_log_density(&x) + logdet)
    }

    /// `log p(y)` with its gradient in the flat parameter layout and in `y`.
    pub fn log_density_grad(&self, y: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>), FlowError> {
        self.check(y)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = y.to_vec();
        let mut logdet = 0.0;
        for (i, l) in self.layers.iter().enumerate().rev() {
            let (prev, ld) = l.pullback(&cur).map_err(|e| e.at_layer(i))?;
            inputs.push(cur);
            cur = prev;
            logdet += ld;
        }
        inputs.reverse();
        let lp = standard_normal_log_density(&cur) + logdet;

        let offsets = self.param_offsets();
        let mut grad = vec![0.0; self.n_params()];
        let mut bar: Vec<f64> = cur.iter().map(|v| -v).collect();
        for (i, l) in self.layers.iter().enumerate() {
            let range = offsets[i]..offsets[i] + l.n_params();
            bar = l
                .pullback_vjp(&inputs[i], &bar, 1.0, &mut grad[range])
                .map_err(|e| e.at_layer(i))?;
        }
        Ok((lp, grad, bar))
    }

    /// Start of every layer's block in the flat parameter vector.
    pub fn param_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.layers
            .iter()
            .map(|l| {
                let start = off;
                off += l.n_params();
                start
            })
            .collect()
    }

    /// `n` seeded base draws pushed through the flow.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>, FlowError> {
        let base = standard_normal_draws(n, self.dim, seed);
        base.par_iter()
            .map(|z| self.forward(z).map(|(y, _)| y))
            .collect()
    }

    /// Like [`FlowModel::sample`], but keeps going past base draws whose
    /// trajectories leave the guard box; returns the successful samples and
    /// the indices of the draws that failed.
    pub fn sample_partial(&self, n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let base = standard_normal_draws(n, self.dim, seed);
        let results: Vec<_> = base.par_iter().map(|z| self.forward(z)).collect();
        let mut ok = Vec::with_capacity(n);
        let mut failed = Vec::new();
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok((y, _)) => ok.push(y),
                Err(_) => failed.push(i),
            }
        }
        (ok, failed)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Coupling(c) => LayerRecord::Coupling {
                    split: c.split,
                    transform_first: c.transform_first,
                    family: c.family,
                    solver: c.solver,
                    dims: c.net.dims().to_vec(),
                    activation: c.net.activation(),
                    params: c.net.params().to_vec(),
                },
                Layer::Autoregressive(a) => LayerRecord::Autoregressive {
                    ordering: a.ordering.clone(),
                    hidden: a.hidden.clone(),
                    family: a.family,
                    solver: a.solver,
                    activation: a.net.activation(),
                    params: a.net.params().to_vec(),
                },
                Layer::Permutation(p) => LayerRecord::Permutation { perm: p.clone() },
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            dim: self.dim,
            refine: self.refine,
            layers,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, FlowError> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(FlowError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let mut layers = Vec::with_capacity(ck.layers.len());
        for (i, rec) in ck.layers.iter().enumerate() {
            let layer = match rec {
                LayerRecord::Coupling {
                    split,
                    transform_first,
                    family,
                    solver,
                    dims,
                    activation,
                    params,
                } => {
                    let mut net = ConditionerNet::zeros(dims, *activation)
                        .map_err(|e| net_err(e).at_layer(i))?;
                    net.set_params(params).map_err(|e| net_err(e).at_layer(i))?;
                    Layer::Coupling(
                        CouplingLayer::new(ck.dim, *split, *transform_first, *family, *solver, net)
                            .map_err(|e| e.at_layer(i))?,
                    )
                }
                LayerRecord::Autoregressive {
                    ordering,
                    hidden,
                    family,
                    solver,
                    activation,
                    params,
                } => {
                    let mut a = AutoregressiveLayer::new(
                        ordering.clone(),
                        hidden.clone(),
                        *family,
                        *solver,
                        *activation,
                        0,
                    )
                    .map_err(|e| e.at_layer(i))?;
                    a.net.set_params(params).map_err(|e| net_err(e).at_layer(i))?;
                    Layer::Autoregressive(a)
                }
                LayerRecord::Permutation { perm } => Layer::Permutation(perm.clone()),
            };
            layers.push(layer);
        }
        let mut model = Self::new(ck.dim, layers)?;
        model.refine = ck.refine;
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_checkpoint()).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, FlowError> {
        let ck: Checkpoint =
            serde_json::from_str(s).map_err(|e| FlowError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(&ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), FlowError> {
        std::fs::write(path, self.to_json())
            .map_err(|e| FlowError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, FlowError> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| FlowError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }
}

pub const CHECKPOINT_FORMAT: &str = "autm-flow";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk model description. Floats are written in shortest round-trip
/// form and parsed with correct rounding, so parameters survive bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub refine: RefineConfig,
    pub layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerRecord {
    Coupling {
        split: usize,
        transform_first: bool,
        family: Family,
        solver: SolverConfig,
        dims: Vec<usize>,
        activation: Activation,
        params: Vec<f64>,
    },
    Autoregressive {
        ordering: Vec<usize>,
        hidden: Vec<usize>,
        family: Family,
        solver: SolverConfig,
        activation: Activation,
        params: Vec<f64>,
    },
    Permutation {
        perm: Vec<usize>,
    },
}

pub fn standard_normal_log_density(x: &[f64]) -> f64 {
    -0.5 * (x.len() as f64 * LN_2PI + x.iter().map(|v| v * v).sum::<f64>())
}

/// `n` rows of `dim` independent standard-normal draws.
pub fn standard_normal_draws(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}
