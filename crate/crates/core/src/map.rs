//! The scalar AUTM bijection.
//!
//! `q(x) = v(1)` where `v' = g(v, t)`, `v(0) = x`. The inverse integrates the
//! same dynamics from `t = 1` back to `t = 0`. Alongside `v` the solver carries
//! `ℓ' = ∂g/∂v(v, t)`, so `exp(ℓ)` is the slope of the map in the direction of
//! integration.
//!
//! Gradients are taken through the discrete solver steps (discretize, then
//! differentiate), so they are exact for the computed quantities.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrand::{Integrand, Params};
use crate::invbench::{self, RefineConfig, RefineMethod};

pub const DEFAULT_STEPS: usize = 16;
pub const DEFAULT_V_MAX: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Rk4,
    Euler,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `t: 0 → 1`
    Forward,
    /// `t: 1 → 0`
    Reverse,
}

/// Fixed-step integration over the unit latent-time interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub scheme: Scheme,
    pub steps: usize,
    pub direction: Direction,
    /// Guard box on `|v|`; leaving it aborts with [`MapError::Diverged`].
    #[serde(default = "default_v_max")]
    pub v_max: f64,
}

fn default_v_max() -> f64 {
    DEFAULT_V_MAX
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::rk4(DEFAULT_STEPS)
    }
}

impl SolverConfig {
    /// Forward RK4 with `steps` steps. Panics if `steps == 0`.
    pub fn rk4(steps: usize) -> Self {
        Self::new(Scheme::Rk4, steps)
    }

    pub fn euler(steps: usize) -> Self {
        Self::new(Scheme::Euler, steps)
    }

    pub fn new(scheme: Scheme, steps: usize) -> Self {
        assert!(steps >= 1, "solver needs at least one step");
        Self {
            scheme,
            steps,
            direction: Direction::Forward,
            v_max: DEFAULT_V_MAX,
        }
    }

    pub fn with_direction(mut self, direction: Direction) -> Self {
        self.direction = direction;
        self
    }

    pub fn forward(self) -> Self {
        self.with_direction(Direction::Forward)
    }

    pub fn reverse(self) -> Self {
        self.with_direction(Direction::Reverse)
    }

    pub fn with_v_max(mut self, v_max: f64) -> Self {
        self.v_max = v_max;
        self
    }

    /// `|h| = 1/N`.
    pub fn step_size(&self) -> f64 {
        1.0 / self.steps as f64
    }

    /// Start time of step `n` and the signed step.
    #[inline]
    fn node(&self, n: usize) -> (f64, f64) {
        let big_n = self.steps as f64;
        match self.direction {
            Direction::Forward => (n as f64 / big_n, 1.0 / big_n),
            Direction::Reverse => ((self.steps - n) as f64 / big_n, -1.0 / big_n),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum MapError {
    #[error("trajectory left the guard box |v| <= {v_max:e} near t = {t} (v = {value:e})")]
    Diverged { t: f64, value: f64, v_max: f64 },
    #[error("integrand is not finite at v = {v}, t = {t}")]
    NonFinite { v: f64, t: f64 },
    #[error("non-finite integrand parameters {0:?}")]
    BadParams(Params),
    #[error("{y} is outside the range of the map: the reverse pass lands at {x}, whose image is {image}")]
    OutsideRange { y: f64, x: f64, image: f64 },
    #[error("solver direction is {found:?}, operation needs {expected:?}")]
    WrongDirection {
        expected: Direction,
        found: Direction,
    },
}

/// Output of one integration pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    /// End-point value (`v(1)` forward, `v(0)` reverse).
    pub y: f64,
    /// `∫ ∂g/∂v dt` accumulated along the pass, signed by the direction of
    /// integration: the log-slope of the computed map.
    pub log_deriv: f64,
    /// `v` at the solver nodes, when requested.
    pub trajectory: Option<Vec<f64>>,
}

/// Reverse-mode sensitivities of `(y, log_deriv)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vjp {
    pub dx: f64,
    pub dparams: Params,
}

#[inline]
fn guard(cfg: &SolverConfig, v: f64, t: f64) -> Result<(), MapError> {
    if !v.is_finite() || v.abs() > cfg.v_max {
        return Err(MapError::Diverged {
            t,
            value: v,
            v_max: cfg.v_max,
        });
    }
    Ok(())
}

#[inline]
fn eval(g: &Integrand, v: f64, t: f64) -> Result<(f64, f64), MapError> {
    let val = g.value(v, t);
    let dv = g.dv(v, t);
    if !val.is_finite() || !dv.is_finite() {
        return Err(MapError::NonFinite { v, t });
    }
    Ok((val, dv))
}

/// One step of the augmented system; returns `(v_next, Δℓ)`.
#[inline]
fn step(
    g: &Integrand,
    cfg: &SolverConfig,
    t: f64,
    h: f64,
    v: f64,
) -> Result<(f64, f64), MapError> {
    match cfg.scheme {
        Scheme::Euler => {
            let (k1, m1) = eval(g, v, t)?;
            let next = v + h * k1;
            guard(cfg, next, t + h)?;
            Ok((next, h * m1))
        }
        Scheme::Rk4 => {
            let half = 0.5 * h;
            let (k1, m1) = eval(g, v, t)?;
            let u2 = v + half * k1;
            guard(cfg, u2, t + half)?;
            let (k2, m2) = eval(g, u2, t + half)?;
            let u3 = v + half * k2;
            guard(cfg, u3, t + half)?;
            let (k3, m3) = eval(g, u3, t + half)?;
            let u4 = v + h * k3;
            guard(cfg, u4, t + h)?;
            let (k4, m4) = eval(g, u4, t + h)?;
            let next = v + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            guard(cfg, next, t + h)?;
            Ok((next, h / 6.0 * (m1 + 2.0 * m2 + 2.0 * m3 + m4)))
        }
    }
}

/// Back-propagates `(v̄_out, ℓ̄)` through one step, accumulating into `pbar`.
/// Returns `v̄_in`.
#[inline]
fn step_vjp(
    g: &Integrand,
    scheme: Scheme,
    t: f64,
    h: f64,
    v: f64,
    vbar: f64,
    lbar: f64,
    pbar: &mut Params,
) -> f64 {
    // Contribution of a stage evaluated at `u` with cotangents on k = g(u)
    // and m = ∂g/∂v(u); returns ū.
    let mut stage = |u: f64, tt: f64, kbar: f64, mbar: f64| -> f64 {
        let s = g.stage(u, tt);
        for i in 0..3 {
            pbar[i] += kbar * s.gp[i] + mbar * s.gvp[i];
        }
        kbar * s.gv + mbar * s.gvv
    };
    match scheme {
        Scheme::Euler => vbar + stage(v, t, h * vbar, h * lbar),
        Scheme::Rk4 => {
            let half = 0.5 * h;
            let k1 = g.value(v, t);
            let u2 = v + half * k1;
            let k2 = g.value(u2, t + half);
            let u3 = v + half * k2;
            let k3 = g.value(u3, t + half);
            let u4 = v + h * k3;

            let w = h / 6.0;
            let (mut k1bar, mut k2bar, mut k3bar) = (w * vbar, 2.0 * w * vbar, 2.0 * w * vbar);
            let k4bar = w * vbar;
            let (m1bar, m2bar, m3bar, m4bar) = (w * lbar, 2.0 * w * lbar, 2.0 * w * lbar, w * lbar);

            let mut vin = vbar;
            let u4bar = stage(u4, t + h, k4bar, m4bar);
            k3bar += h * u4bar;
            vin += u4bar;
            let u3bar = stage(u3, t + half, k3bar, m3bar);
            k2bar += half * u3bar;
            vin += u3bar;
            let u2bar = stage(u2, t + half, k2bar, m2bar);
            k1bar += half * u2bar;
            vin += u2bar;
            vin + stage(v, t, k1bar, m1bar)
        }
    }
}

/// Integrates in `cfg.direction` from `x0`.
pub fn integrate(
    g: &Integrand,
    cfg: &SolverConfig,
    x0: f64,
    record: bool,
) -> Result<MapResult, MapError> {
    if !g.params_finite() {
        return Err(MapError::BadParams(g.params()));
    }
    let (t0, _) = cfg.node(0);
    guard(cfg, x0, t0)?;
    let mut traj = record.then(|| {
        let mut v = Vec::with_capacity(cfg.steps + 1);
        v.push(x0);
        v
    });
    let mut v = x0;
    let mut ell = 0.0;
    for n in 0..cfg.steps {
        let (t, h) = cfg.node(n);
        let (next, dl) = step(g, cfg, t, h, v)?;
        v = next;
        ell += dl;
        if let Some(tr) = traj.as_mut() {
            tr.push(v);
        }
    }
    Ok(MapResult {
        y: v,
        log_deriv: ell,
        trajectory: traj,
    })
}

/// VJP of `(end value, log_deriv)` of [`integrate`] in `cfg.direction`.
pub fn integrate_vjp(
    g: &Integrand,
    cfg: &SolverConfig,
    x0: f64,
    cot_y: f64,
    cot_logdet: f64,
) -> Result<(MapResult, Vjp), MapError> {
    let res = integrate(g, cfg, x0, true)?;
    let vjp = vjp_along(g, cfg, res.trajectory.as_deref().unwrap(), cot_y, cot_logdet);
    Ok((res, vjp))
}

/// Largest factor by which the `*_resolved` integrators refine the step count.
pub const MAX_STEP_REFINEMENT: usize = 64;

/// [`integrate`], retried with 2×, 4×, … up to [`MAX_STEP_REFINEMENT`]× the
/// configured steps while the trajectory leaves the guard box. Explicit RK4
/// is unstable on coarse grids when `|∂g/∂v|·h` is large, which happens
/// when reverse passes start from large values of the quadratic and cubic
/// families. A refined result is accepted only once two successive
/// doublings agree to [`RESOLVED_AGREEMENT`] (relative), so an unstable
/// grid that happens to stay inside the box is not mistaken for a solution.
///
/// Reverse passes are also checked against the forward map on the same
/// grid: the end point must map back to `x0` to within
/// [`RESOLVED_AGREEMENT`]. The quadratic and cubic families can have a
/// bounded range, and for `x0` outside it the exact reverse flow blows up
/// while a coarse grid may still return a finite, meaningless value. Such
/// inputs fail with [`MapError::OutsideRange`] when no grid passes.
///
/// Returns the result and the step count that produced it.
pub fn integrate_resolved(
    g: &Integrand,
    cfg: &SolverConfig,
    x0: f64,
    record: bool,
) -> Result<(MapResult, SolverConfig), MapError> {
    let first_err = match checked_pass(g, cfg, x0, record) {
        Ok(r) => return Ok((r, *cfg)),
        Err(e @ (MapError::Diverged { .. } | MapError::OutsideRange { .. })) => e,
        Err(e) => return Err(e),
    };
    let mut c = *cfg;
    let mut prev: Option<MapResult> = None;
    while c.steps < cfg.steps * MAX_STEP_REFINEMENT {
        c.steps *= 2;
        match checked_pass(g, &c, x0, record) {
            Ok(r) => {
                if let Some(p) = &prev {
                    if agree(p.y, r.y) && agree(p.log_deriv, r.log_deriv) {
                        return Ok((r, c));
                    }
                }
                prev = Some(r);
            }
            Err(MapError::Diverged { .. } | MapError::OutsideRange { .. }) => prev = None,
            Err(e) => return Err(e),
        }
    }
    Err(first_err)
}

fn agree(a: f64, b: f64) -> bool {
    (a - b).abs() <= RESOLVED_AGREEMENT * a.abs().max(b.abs()).max(1.0)
}

fn checked_pass(
    g: &Integrand,
    cfg: &SolverConfig,
    x0: f64,
    record: bool,
) -> Result<MapResult, MapError> {
    let r = integrate(g, cfg, x0, record)?;
    if cfg.direction == Direction::Reverse {
        let image = integrate(g, &cfg.forward(), r.y, false).map(|f| f.y).unwrap_or(f64::INFINITY);
        if !agree(image, x0) {
            return Err(MapError::OutsideRange { y: x0, x: r.y, image });
        }
    }
    Ok(r)
}

/// Relative agreement required between successive refinements in
/// [`integrate_resolved`].
pub const RESOLVED_AGREEMENT: f64 = 1e-4;

/// VJP of [`integrate_resolved`]; the primal pass selects the same step
/// count, so value and gradient describe the same function.
pub fn integrate_vjp_resolved(
    g: &Integrand,
    cfg: &SolverConfig,
    x0: f64,
    cot_y: f64,
    cot_logdet: f64,
) -> Result<(MapResult, Vjp), MapError> {
    let (res, c) = integrate_resolved(g, cfg, x0, true)?;
    let vjp = vjp_along(g, &c, res.trajectory.as_deref().unwrap(), cot_y, cot_logdet);
    Ok((res, vjp))
}

/// VJP along a previously recorded trajectory.
pub(crate) fn vjp_along(
    g: &Integrand,
    cfg: &SolverConfig,
    traj: &[f64],
    cot_y: f64,
    cot_logdet: f64,
) -> Vjp {
    debug_assert_eq!(traj.len(), cfg.steps + 1);
    let mut vbar = cot_y;
    let mut pbar = [0.0; 3];
    for n in (0..cfg.steps).rev() {
        let (t, h) = cfg.node(n);
        vbar = step_vjp(g, cfg.scheme, t, h, traj[n], vbar, cot_logdet, &mut pbar);
    }
    Vjp {
        dx: vbar,
        dparams: pbar,
    }
}

fn expect(cfg: &SolverConfig, expected: Direction) -> Result<(), MapError> {
    if cfg.direction != expected {
        return Err(MapError::WrongDirection {
            expected,
            found: cfg.direction,
        });
    }
    Ok(())
}

/// `q(x)` and `log q'(x)`.
pub fn forward(g: &Integrand, cfg: &SolverConfig, x: f64) -> Result<MapResult, MapError> {
    expect(cfg, Direction::Forward)?;
    integrate(g, cfg, x, false)
}

/// `q'(x) = exp(∫₀¹ ∂g/∂v dt)`.
pub fn derivative(g: &Integrand, cfg: &SolverConfig, x: f64) -> Result<f64, MapError> {
    Ok(forward(g, cfg, x)?.log_deriv.exp())
}

/// Sensitivities of `(q(x), log q'(x))` contracted with `(cot_y, cot_logdet)`.
pub fn forward_vjp(
    g: &Integrand,
    cfg: &SolverConfig,
    x: f64,
    cot_y: f64,
    cot_logdet: f64,
) -> Result<Vjp, MapError> {
    expect(cfg, Direction::Forward)?;
    Ok(integrate_vjp(g, cfg, x, cot_y, cot_logdet)?.1)
}

/// Result of a numerical inversion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inversion {
    pub x: f64,
    /// Refinement iterations after the reverse-time initial guess.
    pub iterations: usize,
    pub converged: bool,
    /// `|q(x) − y|` with the forward discretization.
    pub residual: f64,
}

/// `q⁻¹(y)`: reverse-time integration with the same scheme and step count
/// (refined if it leaves the guard box, see [`integrate_resolved`]),
/// then refinement against the forward discretization.
pub fn inverse(
    g: &Integrand,
    cfg: &SolverConfig,
    y: f64,
    refine: &RefineConfig,
) -> Result<Inversion, MapError> {
    expect(cfg, Direction::Reverse)?;
    let guess = integrate_resolved(g, cfg, y, false)?.0.y;
    let fwd = cfg.forward();
    match refine.method {
        RefineMethod::ReverseIntegrationOnly => {
            let residual = (forward(g, &fwd, guess)?.y - y).abs();
            Ok(Inversion {
                x: guess,
                iterations: 0,
                converged: residual <= refine.effective_tolerance(y),
                residual,
            })
        }
        RefineMethod::FixedPoint => invbench::fixed_point_from(g, &fwd, y, guess, refine),
        RefineMethod::Newton => invbench::newton_from(g, &fwd, y, guess, refine),
        RefineMethod::Bisection => invbench::bisection_around(g, &fwd, y, guess, refine)
            .map(|b| b.inversion)
            .or_else(|e| match e {
                invbench::InvertError::Map(m) => Err(m),
                invbench::InvertError::BracketNotFound { .. } => Ok(Inversion {
                    x: guess,
                    iterations: 0,
                    converged: false,
                    residual: f64::NAN,
                }),
            }),
    }
}
