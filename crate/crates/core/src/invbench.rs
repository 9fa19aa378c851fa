//! Numerical inversion of a scalar AUTM map and the bisection vs fixed-point
//! step-count benchmark.
//!
//! Both root finders solve `q(x) = y` against the forward discretization.
//! Step counts exclude the work spent on the starting point: bracket
//! expansion for bisection, the five-node trapezoid guess for fixed-point
//! iteration. Both are reported separately.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrand::{Integrand, Params};
use crate::map::{self, Inversion, MapError, SolverConfig};

/// Smallest damping factor the fixed-point iteration falls back to.
pub const DAMPING_FLOOR: f64 = 1.0 / 16.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMethod {
    Bisection,
    FixedPoint,
    ReverseIntegrationOnly,
    /// Newton's method using `q' = exp(ℓ)` from the same forward pass.
    Newton,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub method: RefineMethod,
    /// Target for `|q(x) − y|`.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Growth factor of the bisection bracket half-widths.
    pub expansion_factor: f64,
    /// Initial bracket half-width around the starting point.
    pub initial_half_width: f64,
    pub max_expansions: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            method: RefineMethod::Newton,
            tolerance: 1e-12,
            max_iterations: 50,
            expansion_factor: 2.0,
            initial_half_width: 0.5,
            max_expansions: 64,
        }
    }
}

impl RefineConfig {
    pub fn with_method(mut self, method: RefineMethod) -> Self {
        self.method = method;
        self
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn with_max_iterations(mut self, n: usize) -> Self {
        self.max_iterations = n;
        self
    }

    /// The tolerance, floored at a few ulps of `y` so that very small targets
    /// stay reachable in double precision.
    pub fn effective_tolerance(&self, y: f64) -> f64 {
        self.tolerance.max(8.0 * f64::EPSILON * y.abs())
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.tolerance > 0.0) {
            return Err(format!("tolerance must be positive, got {}", self.tolerance));
        }
        if self.max_iterations == 0 {
            return Err("max_iterations must be at least 1".into());
        }
        if !(self.expansion_factor > 1.0) {
            return Err(format!(
                "expansion factor must exceed 1, got {}",
                self.expansion_factor
            ));
        }
        if !(self.initial_half_width > 0.0) {
            return Err("initial bracket half-width must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum InvertError {
    #[error("no sign change of q(x) - {y} after {expansions} bracket expansions")]
    BracketNotFound { y: f64, expansions: usize },
    #[error(transparent)]
    Map(#[from] MapError),
}

/// Bisection outcome; `inversion.iterations` counts halvings only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bisection {
    pub inversion: Inversion,
    pub expansions: usize,
}

#[inline]
fn q(g: &Integrand, fwd: &SolverConfig, x: f64) -> Result<f64, MapError> {
    map::integrate(g, fwd, x, false).map(|r| r.y)
}

/// Bisection on a bracket grown geometrically around `center` until it
/// contains a sign change of `q(·) − y`. Stops once `q(hi) − q(lo) ≤ tol`,
/// which bounds the residual of every point in the bracket.
pub fn bisection_around(
    g: &Integrand,
    fwd: &SolverConfig,
    y: f64,
    center: f64,
    rc: &RefineConfig,
) -> Result<Bisection, InvertError> {
    let tol = rc.effective_tolerance(y);
    let mut expansions = 0;

    let mut w = rc.initial_half_width;
    let mut lo = center - w;
    let mut flo = q(g, fwd, lo)? - y;
    while flo > 0.0 {
        if expansions >= rc.max_expansions {
            return Err(InvertError::BracketNotFound { y, expansions });
        }
        expansions += 1;
        w *= rc.expansion_factor;
        lo = center - w;
        flo = q(g, fwd, lo)? - y;
    }
    let mut w = rc.initial_half_width;
    let mut hi = center + w;
    let mut fhi = q(g, fwd, hi)? - y;
    while fhi < 0.0 {
        if expansions >= rc.max_expansions {
            return Err(InvertError::BracketNotFound { y, expansions });
        }
        expansions += 1;
        w *= rc.expansion_factor;
        hi = center + w;
        fhi = q(g, fwd, hi)? - y;
    }

    let mut steps = 0;
    while fhi - flo > tol && steps < rc.max_iterations {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = q(g, fwd, mid)? - y;
        steps += 1;
        if fm <= 0.0 {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
            fhi = fm;
        }
    }
    let (x, residual) = if flo.abs() <= fhi.abs() {
        (lo, flo.abs())
    } else {
        (hi, fhi.abs())
    };
    Ok(Bisection {
        inversion: Inversion {
            x,
            iterations: steps,
            converged: residual <= tol,
            residual,
        },
        expansions,
    })
}

/// Bisection with the bracket centred on `y`.
pub fn bisection_invert(
    g: &Integrand,
    cfg: &SolverConfig,
    y: f64,
    rc: &RefineConfig,
) -> Result<Bisection, InvertError> {
    bisection_around(g, &cfg.forward(), y, y, rc)
}

/// Reverse-time explicit trapezoid over the five nodes `t = 1, ¾, ½, ¼, 0`.
pub fn five_point_guess(g: &Integrand, y: f64) -> f64 {
    let h = -0.25;
    let mut v = y;
    for n in 0..4 {
        let t = 1.0 - 0.25 * n as f64;
        let k1 = g.value(v, t);
        let k2 = g.value(v + h * k1, t + h);
        v += 0.5 * h * (k1 + k2);
    }
    v
}

/// Damped fixed-point iteration `x ← x − λ (q(x) − y)` from `x0`.
///
/// A step that would increase the residual is rejected and `λ` halves (down
/// to [`DAMPING_FLOOR`]), so accepted residuals never increase. After
/// `max_iterations` the remaining work is handed to bisection and its
/// halvings are added to the count.
pub fn fixed_point_from(
    g: &Integrand,
    fwd: &SolverConfig,
    y: f64,
    x0: f64,
    rc: &RefineConfig,
) -> Result<Inversion, MapError> {
    let tol = rc.effective_tolerance(y);
    let mut x = x0;
    let mut r = q(g, fwd, x)? - y;
    let mut lambda = 1.0;
    let mut iterations = 0;
    while r.abs() > tol && iterations < rc.max_iterations {
        iterations += 1;
        let cand = x - lambda * r;
        match q(g, fwd, cand) {
            Ok(qc) if (qc - y).abs() <= r.abs() => {
                x = cand;
                r = qc - y;
            }
            Ok(_) | Err(MapError::Diverged { .. }) => {
                lambda = (0.5 * lambda).max(DAMPING_FLOOR);
            }
            Err(e) => return Err(e),
        }
    }
    if r.abs() <= tol {
        return Ok(Inversion {
            x,
            iterations,
            converged: true,
            residual: r.abs(),
        });
    }
    match bisection_around(g, fwd, y, x, rc) {
        Ok(b) => Ok(Inversion {
            iterations: iterations + b.inversion.iterations,
            ..b.inversion
        }),
        Err(InvertError::Map(e)) => Err(e),
        Err(InvertError::BracketNotFound { .. }) => Ok(Inversion {
            x,
            iterations,
            converged: false,
            residual: r.abs(),
        }),
    }
}

/// Fixed-point inversion seeded with [`five_point_guess`].
pub fn fixedpoint_invert(
    g: &Integrand,
    cfg: &SolverConfig,
    y: f64,
    rc: &RefineConfig,
) -> Result<Inversion, MapError> {
    fixed_point_from(g, &cfg.forward(), y, five_point_guess(g, y), rc)
}

/// Newton iteration with step halving on residual growth.
pub fn newton_from(
    g: &Integrand,
    fwd: &SolverConfig,
    y: f64,
    x0: f64,
    rc: &RefineConfig,
) -> Result<Inversion, MapError> {
    // Slope of the discretized map itself (reverse-mode through the RK4
    // steps); exp(log_deriv) approximates the ODE's q' instead and slows
    // convergence to linear on coarse grids.
    let eval = |x: f64| -> Result<(f64, f64), MapError> {
        let (res, vjp) = map::integrate_vjp(g, fwd, x, 1.0, 0.0)?;
        Ok((res.y - y, vjp.dx))
    };
    let mut x = x0;
    let (mut r, mut slope) = eval(x)?;
    // Residuals below a few ulps of y, or of x scaled by the slope, are noise.
    let floor = |x: f64, slope: f64| rc.effective_tolerance(y).max(4.0 * f64::EPSILON * slope.abs() * x.abs());
    let mut iterations = 0;
    'outer: while r.abs() > floor(x, slope) && iterations < rc.max_iterations {
        iterations += 1;
        let mut dx = r / slope;
        for _ in 0..30 {
            let cand = x - dx;
            match eval(cand) {
                Ok((rc_, sc)) if rc_.abs() < r.abs() => {
                    x = cand;
                    r = rc_;
                    slope = sc;
                    continue 'outer;
                }
                Ok(_) | Err(MapError::Diverged { .. }) => dx *= 0.5,
                Err(e) => return Err(e),
            }
        }
        // no decrease along the Newton direction: round-off floor reached
        break;
    }
    Ok(Inversion {
        x,
        iterations,
        converged: r.abs() <= floor(x, slope),
        residual: r.abs(),
    })
}

/// Benchmark setup. The integrand is quadratic with the given coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub params: Params,
    pub solver: SolverConfig,
    pub tolerances: Vec<f64>,
    pub n_inputs: usize,
    pub seed: u64,
    pub refine: RefineConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            params: [0.5, 0.1, -0.2],
            solver: SolverConfig::rk4(16),
            tolerances: vec![1e-3, 1e-4, 1e-5, 1e-6],
            n_inputs: 1000,
            seed: 0,
            refine: RefineConfig {
                method: RefineMethod::FixedPoint,
                tolerance: 1e-6,
                max_iterations: 200,
                ..RefineConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub tolerance: f64,
    pub method: &'static str,
    pub mean_steps: f64,
    pub failures: usize,
    /// Mean bracket expansions (bisection) or 0 (fixed point, whose start
    /// is the trapezoid guess).
    pub mean_setup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub params: Params,
    pub solver_steps: usize,
    pub seed: u64,
    pub n_inputs: usize,
    /// Inputs whose forward map already failed; excluded from every row.
    pub excluded: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, tolerance: f64, method: &str) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.tolerance == tolerance && r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tolerance,method,mean_steps,failures\n");
        for r in &self.rows {
            let _ = writeln!(out, "{:e},{},{},{}", r.tolerance, r.method, r.mean_steps, r.failures);
        }
        out
    }

    pub fn summary(&self) -> String {
        let [a, b, c] = self.params;
        let mut out = format!(
            "integrand g(v) = {a}·v + {b} + {c}·v², RK4 N={}, {} inputs ~ U(0,1), seed {}, excluded {}\n",
            self.solver_steps, self.n_inputs, self.seed, self.excluded
        );
        let _ = writeln!(
            out,
            "{:>10} | {:>12} | {:>12} | {:>6} | {:>8}",
            "tolerance", "fixed point", "bisection", "ratio", "failures"
        );
        let mut tols: Vec<f64> = self.rows.iter().map(|r| r.tolerance).collect();
        tols.dedup();
        for t in tols {
            let fp = self.row(t, "fixed_point");
            let bi = self.row(t, "bisection");
            if let (Some(fp), Some(bi)) = (fp, bi) {
                let _ = writeln!(
                    out,
                    "{:>10.0e} | {:>12.3} | {:>12.3} | {:>6.3} | {:>8}",
                    t,
                    fp.mean_steps,
                    bi.mean_steps,
                    fp.mean_steps / bi.mean_steps,
                    fp.failures + bi.failures
                );
            }
        }
        out
    }
}

/// Inverts `q(x)` for `x ~ U(0, 1)` with both methods at every tolerance.
pub fn run_bench(cfg: &BenchConfig) -> BenchReport {
    let g = Integrand::quadratic(cfg.params[0], cfg.params[1], cfg.params[2]);
    let fwd = cfg.solver.forward();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let xs: Vec<f64> = (0..cfg.n_inputs).map(|_| rng.random::<f64>()).collect();
    let ys: Vec<Option<f64>> = xs
        .par_iter()
        .map(|&x| map::forward(&g, &fwd, x).ok().map(|r| r.y))
        .collect();
    let excluded = ys.iter().filter(|y| y.is_none()).count();
    let targets: Vec<f64> = ys.into_iter().flatten().collect();

    let mut rows = Vec::new();
    for &tol in &cfg.tolerances {
        let rc = cfg.refine.with_tolerance(tol);
        // (steps, setup) per sample, None on failure; collected in index order
        let fp: Vec<Option<(usize, usize)>> = targets
            .par_iter()
            .map(|&y| match fixedpoint_invert(&g, &fwd, y, &rc) {
                Ok(inv) if inv.converged => Some((inv.iterations, 0)),
                _ => None,
            })
            .collect();
        let bi: Vec<Option<(usize, usize)>> = targets
            .par_iter()
            .map(|&y| match bisection_invert(&g, &fwd, y, &rc) {
                Ok(b) if b.inversion.converged => Some((b.inversion.iterations, b.expansions)),
                _ => None,
            })
            .collect();
        rows.push(aggregate(tol, "fixed_point", &fp));
        rows.push(aggregate(tol, "bisection", &bi));
    }
    BenchReport {
        params: cfg.params,
        solver_steps: cfg.solver.steps,
        seed: cfg.seed,
        n_inputs: cfg.n_inputs,
        excluded,
        rows,
    }
}

fn aggregate(tolerance: f64, method: &'static str, samples: &[Option<(usize, usize)>]) -> BenchRow {
    let ok: Vec<(usize, usize)> = samples.iter().flatten().copied().collect();
    let n = ok.len().max(1) as f64;
    BenchRow {
        tolerance,
        method,
        mean_steps: ok.iter().map(|s| s.0 as f64).sum::<f64>() / n,
        failures: samples.len() - ok.len(),
        mean_setup: ok.iter().map(|s| s.1 as f64).sum::<f64>() / n,
    }
}
