//! The approximant family `q_s` built from a monotone target `φ`, and
//! numerical studies of its convergence to `φ` as `s → 0`.
//!
//! With `r = e^{−1/s}` and `G(u) = φ(u) − u`, the latent path solves the
//! scaled-argument (pantograph-type) equation
//!
//! ```text
//! v(t) = x + ∫₀ᵗ κ_s(z) · G(v(r·z)) dz,      q_s(x) = v(1),
//! ```
//!
//! which only ever reads `v` on `[0, r]`. It is solved by Picard iteration
//! from `v ≡ x`, storing each iterate on a geometric grid over `[0, r]` and
//! interpolating linearly between nodes.

use std::fmt::{self, Write as _};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UniversalityError {
    #[error("scale s must be positive and finite, got {0}")]
    BadScale(f64),
    #[error("a convergence study needs at least 4 scales, got {0}")]
    TooFewScales(usize),
    #[error("target is not strictly increasing near x = {x}")]
    NotIncreasing { x: f64 },
    #[error("invalid target: {0}")]
    BadTarget(String),
    #[error("invalid configuration: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetKind {
    /// `αx + β`, α > 0.
    Affine { alpha: f64, beta: f64 },
    /// `x + softplus(x) − ln 2`; Lipschitz constant 2.
    SoftplusShift,
    /// `x/2 + atan(2x)`; Lipschitz constant 2.5.
    ArctanBlend,
    Custom,
}

/// A strictly increasing target `φ` with a Lipschitz constant.
#[derive(Clone)]
pub struct MonotoneTarget {
    kind: TargetKind,
    lipschitz: f64,
    custom: Option<Arc<dyn Fn(f64) -> f64 + Send + Sync>>,
}

impl fmt::Debug for MonotoneTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MonotoneTarget")
            .field("kind", &self.kind)
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

impl MonotoneTarget {
    pub fn affine(alpha: f64, beta: f64) -> Result<Self, UniversalityError> {
        if !(alpha > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(UniversalityError::BadTarget(format!(
                "affine target needs alpha > 0 and finite beta, got alpha={alpha}, beta={beta}"
            )));
        }
        Ok(Self {
            kind: TargetKind::Affine { alpha, beta },
            lipschitz: alpha,
            custom: None,
        })
    }

    pub fn identity() -> Self {
        Self::affine(1.0, 0.0).expect("valid")
    }

    pub fn softplus_shift() -> Self {
        Self {
            kind: TargetKind::SoftplusShift,
            lipschitz: 2.0,
            custom: None,
        }
    }

    pub fn arctan_blend() -> Self {
        Self {
            kind: TargetKind::ArctanBlend,
            lipschitz: 2.5,
            custom: None,
        }
    }

    /// A user-supplied increasing function with a declared Lipschitz bound.
    /// Monotonicity is checked on the study grid before use.
    pub fn custom(f: Arc<dyn Fn(f64) -> f64 + Send + Sync>, lipschitz: f64) -> Self {
        Self {
            kind: TargetKind::Custom,
            lipschitz,
            custom: Some(f),
        }
    }

    pub fn kind(&self) -> TargetKind {
        self.kind
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        match self.kind {
            TargetKind::Affine { alpha, beta } => alpha * x + beta,
            TargetKind::SoftplusShift => x + softplus(x) - std::f64::consts::LN_2,
            TargetKind::ArctanBlend => 0.5 * x + (2.0 * x).atan(),
            TargetKind::Custom => (self.custom.as_ref().expect("custom target has a function"))(x),
        }
    }

    /// `φ(u) − u`.
    #[inline]
    fn gap(&self, u: f64) -> f64 {
        self.value(u) - u
    }

    /// Strict increase on `n` evenly spaced points of `[lo, hi]`.
    pub fn check_increasing(&self, lo: f64, hi: f64, n: usize) -> Result<(), UniversalityError> {
        let grid = linspace(lo, hi, n.max(2));
        let vals: Vec<f64> = grid.iter().map(|&x| self.value(x)).collect();
        for (i, w) in vals.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(UniversalityError::NotIncreasing { x: grid[i] });
            }
        }
        Ok(())
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    #[default]
    Constant,
    /// `C_s·e^{−t²/s}` normalized to unit mass on `[0, 1]`.
    GaussianNormalized,
}

impl std::str::FromStr for KernelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "constant" => Ok(KernelKind::Constant),
            "gaussian" | "gaussian_normalized" => Ok(KernelKind::GaussianNormalized),
            other => Err(format!("unknown kernel `{other}` (expected constant or gaussian)")),
        }
    }
}

/// A positive weight on `[0, 1]` with unit integral.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kernel {
    kind: KernelKind,
    s: f64,
    norm: f64,
}

impl Kernel {
    pub fn new(kind: KernelKind, s: f64) -> Result<Self, UniversalityError> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(UniversalityError::BadScale(s));
        }
        let norm = match kind {
            KernelKind::Constant => 1.0,
            KernelKind::GaussianNormalized => {
                let panels = (16.0 / s.sqrt()).ceil().max(64.0) as usize;
                1.0 / gauss_legendre_composite(|t| (-t * t / s).exp(), 0.0, 1.0, panels)
            }
        };
        Ok(Self { kind, s, norm })
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn scale(&self) -> f64 {
        self.s
    }

    /// `C_s` (1 for the constant kernel).
    pub fn normalization(&self) -> f64 {
        self.norm
    }

    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        match self.kind {
            KernelKind::Constant => 1.0,
            KernelKind::GaussianNormalized => self.norm * (-t * t / self.s).exp(),
        }
    }
}

const GL5_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683_1,
    0.0,
    0.538_469_310_105_683_1,
    0.906_179_845_938_664,
];
const GL5_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189_08,
    0.478_628_670_499_366_47,
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_47,
    0.236_926_885_056_189_08,
];

#[inline]
fn gauss_legendre(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
    half * GL5_NODES
        .iter()
        .zip(GL5_WEIGHTS)
        .map(|(&u, w)| w * f(mid + half * u))
        .sum::<f64>()
}

fn gauss_legendre_composite(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|i| gauss_legendre(&f, a + i as f64 * h, a + (i + 1) as f64 * h))
        .sum()
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PicardConfig {
    pub iterations: usize,
    /// Composite-trapezoid nodes for the outer integral over `t ∈ [0, 1]`.
    pub outer_nodes: usize,
    /// Geometric nodes on `(0, r]`, in addition to the node at 0.
    pub inner_nodes: usize,
    /// Decades spanned by the geometric grid below `r`.
    pub inner_decades: f64,
}

impl Default for PicardConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            outer_nodes: 257,
            inner_nodes: 256,
            inner_decades: 12.0,
        }
    }
}

impl PicardConfig {
    pub fn validate(&self) -> Result<(), UniversalityError> {
        if self.iterations == 0 {
            return Err(UniversalityError::BadConfig("iterations must be at least 1".into()));
        }
        if self.outer_nodes < 2 || self.inner_nodes < 2 {
            return Err(UniversalityError::BadConfig("node counts must be at least 2".into()));
        }
        if !(self.inner_decades > 0.0) {
            return Err(UniversalityError::BadConfig("inner_decades must be positive".into()));
        }
        Ok(())
    }

    fn inner_grid(&self, r: f64) -> Vec<f64> {
        let m = self.inner_nodes;
        let mut g = Vec::with_capacity(m + 1);
        g.push(0.0);
        for j in 1..=m {
            let frac = (m - j) as f64 / (m - 1) as f64;
            g.push(r * 10f64.powf(-self.inner_decades * frac));
        }
        g
    }
}

/// Piecewise-linear function on an increasing grid, constant beyond the last node.
struct Path<'a> {
    grid: &'a [f64],
    vals: Vec<f64>,
}

impl Path<'_> {
    fn at(&self, tau: f64) -> f64 {
        let g = self.grid;
        if tau >= g[g.len() - 1] {
            return self.vals[g.len() - 1];
        }
        let i = g.partition_point(|&n| n <= tau).max(1);
        let (a, b) = (g[i - 1], g[i]);
        let w = (tau - a) / (b - a);
        self.vals[i - 1] + w * (self.vals[i] - self.vals[i - 1])
    }
}

/// `q_s(x)` together with the sup-norm gap between successive Picard iterates.
#[derive(Debug, Clone, PartialEq)]
pub struct PicardRun {
    pub value: f64,
    /// `trace[k]` = max over the inner grid and `t = 1` of `|v⁽ᵏ⁺¹⁾ − v⁽ᵏ⁾|`.
    pub trace: Vec<f64>,
}

/// `q_s(x)`.
pub fn qs_eval(
    target: &MonotoneTarget,
    s: f64,
    kernel: KernelKind,
    x: f64,
    cfg: &PicardConfig,
) -> Result<f64, UniversalityError> {
    let k = Kernel::new(kernel, s)?;
    cfg.validate()?;
    Ok(qs_picard(target, &k, x, cfg).value)
}

/// Picard solve with a prepared kernel.
///
/// The outer integral is evaluated as `φ(x) + ∫₀¹ κ(t)[G(v(rt)) − G(x)] dt`,
/// which equals `x + ∫₀¹ κ(t) G(v(rt)) dt` because `κ` has unit mass, and
/// keeps the trapezoid error proportional to the (small) variation of `v`.
pub fn qs_picard(target: &MonotoneTarget, kernel: &Kernel, x: f64, cfg: &PicardConfig) -> PicardRun {
    let r = (-1.0 / kernel.scale()).exp();
    if r < f64::MIN_POSITIVE {
        return PicardRun {
            value: target.value(x),
            trace: Vec::new(),
        };
    }
    let grid = cfg.inner_grid(r);
    let gx = target.gap(x);
    let outer = |v: &Path| {
        let n = cfg.outer_nodes;
        let h = 1.0 / (n - 1) as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let t = i as f64 * h;
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            acc += w * kernel.eval(t) * (target.gap(v.at(r * t)) - gx);
        }
        target.value(x) + h * acc
    };

    let mut v = Path {
        grid: &grid,
        vals: vec![x; grid.len()],
    };
    let mut q_prev = x;
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut value = x;
    for _ in 0..cfg.iterations {
        value = outer(&v);
        let mut next = Vec::with_capacity(grid.len());
        next.push(x);
        let mut acc = 0.0;
        for w in grid.windows(2) {
            acc += gauss_legendre(|z| kernel.eval(z) * target.gap(v.at(r * z)), w[0], w[1]);
            next.push(x + acc);
        }
        let diff = next
            .iter()
            .zip(&v.vals)
            .map(|(a, b)| (a - b).abs())
            .fold((value - q_prev).abs(), f64::max);
        trace.push(diff);
        q_prev = value;
        v.vals = next;
    }
    PicardRun { value, trace }
}

/// Is `q_s` strictly increasing on `grid`?
pub fn qs_is_increasing(
    target: &MonotoneTarget,
    s: f64,
    kernel: KernelKind,
    grid: &[f64],
    cfg: &PicardConfig,
) -> Result<bool, UniversalityError> {
    let k = Kernel::new(kernel, s)?;
    cfg.validate()?;
    let vals: Vec<f64> = grid.par_iter().map(|&x| qs_picard(target, &k, x, cfg).value).collect();
    Ok(vals.windows(2).all(|w| w[1] > w[0]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub interval: (f64, f64),
    pub grid: usize,
    /// Decreasing scales.
    pub scales: Vec<f64>,
    pub kernel: KernelKind,
    pub picard: PicardConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            interval: (-1.0, 1.0),
            grid: 201,
            scales: vec![0.5, 1.0 / 3.0, 0.25, 0.2],
            kernel: KernelKind::Constant,
            picard: PicardConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub s: f64,
    pub inv_s: f64,
    pub sup_error: f64,
    pub log_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub rows: Vec<StudyRow>,
    /// `b` in `log err ≈ a − b/s`; `None` when fewer than two errors are positive.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    /// Scales at which the error failed to decrease.
    pub non_monotone_at: Vec<f64>,
}

impl StudyReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("s,1/s,sup_error,log_error\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:e},{}", r.s, r.inv_s, r.sup_error, r.log_error);
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut line = match (self.slope, self.intercept) {
            (Some(b), Some(a)) => format!("fitted slope b = {b:.6} (log sup_error = {a:.6} - b/s)"),
            _ => "fitted slope undefined (fewer than two positive errors)".to_string(),
        };
        if !self.non_monotone_at.is_empty() {
            let _ = write!(
                line,
                "; error did not decrease at s = {:?} (quadrature floor?)",
                self.non_monotone_at
            );
        }
        line
    }
}

/// Sup-norm error of `q_s` against `φ` on the study grid for each scale,
/// with a least-squares fit of `log err` against `1/s`.
pub fn convergence_study(target: &MonotoneTarget, cfg: &StudyConfig) -> Result<StudyReport, UniversalityError> {
    if cfg.scales.len() < 4 {
        return Err(UniversalityError::TooFewScales(cfg.scales.len()));
    }
    if let Some(&s) = cfg.scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(UniversalityError::BadScale(s));
    }
    let (lo, hi) = cfg.interval;
    if !(lo < hi) || cfg.grid < 2 {
        return Err(UniversalityError::BadConfig(format!(
            "study interval [{lo}, {hi}] with {} points",
            cfg.grid
        )));
    }
    cfg.picard.validate()?;
    target.check_increasing(lo, hi, cfg.grid)?;
    let grid = linspace(lo, hi, cfg.grid);

    let kernels: Vec<Kernel> = cfg
        .scales
        .iter()
        .map(|&s| Kernel::new(cfg.kernel, s))
        .collect::<Result<_, _>>()?;
    let rows: Vec<StudyRow> = kernels
        .iter()
        .map(|k| {
            let sup_error = grid
                .par_iter()
                .map(|&x| (qs_picard(target, k, x, &cfg.picard).value - target.value(x)).abs())
                .collect::<Vec<_>>()
                .into_iter()
                .fold(0.0, f64::max);
            StudyRow {
                s: k.scale(),
                inv_s: 1.0 / k.scale(),
                sup_error,
                log_error: sup_error.ln(),
            }
        })
        .collect();

    let non_monotone_at = rows
        .windows(2)
        .filter(|w| w[1].sup_error >= w[0].sup_error && w[0].sup_error > 0.0)
        .map(|w| w[1].s)
        .collect();

    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.sup_error > 0.0 && r.sup_error.is_finite())
        .map(|r| (r.inv_s, r.log_error))
        .collect();
    let (slope, intercept) = match least_squares(&pts) {
        Some((m, a)) => (Some(-m), Some(a)),
        None => (None, None),
    };
    Ok(StudyReport {
        rows,
        slope,
        intercept,
        non_monotone_at,
    })
}

/// `(slope, intercept)` of the least-squares line through `pts`.
fn least_squares(pts: &[(f64, f64)]) -> Option<(f64, f64)> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let m = sxy / sxx;
    Some((m, my - m * mx))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_kernel_is_one() {
        let k = Kernel::new(KernelKind::Constant, 0.3).unwrap();
        assert_eq!(k.eval(0.0), 1.0);
        assert_eq!(k.eval(0.77), 1.0);
    }

    #[test]
    fn gaussian_kernel_has_unit_mass() {
        for s in [0.05, 0.2, 1.0, 5.0] {
            let k = Kernel::new(KernelKind::GaussianNormalized, s).unwrap();
            // independent check: fine composite Simpson
            let n = 20000;
            let h = 1.0 / n as f64;
            let mut acc = k.eval(0.0) + k.eval(1.0);
            for i in 1..n {
                acc += if i % 2 == 1 { 4.0 } else { 2.0 } * k.eval(i as f64 * h);
            }
            assert!((acc * h / 3.0 - 1.0).abs() < 1e-10, "s={s}");
        }
    }

    #[test]
    fn identity_is_an_equilibrium() {
        let id = MonotoneTarget::identity();
        for kind in [KernelKind::Constant, KernelKind::GaussianNormalized] {
            for s in [0.1, 1.0, 20.0] {
                for x in [-3.0, 0.0, 0.4] {
                    assert_eq!(qs_eval(&id, s, kind, x, &PicardConfig::default()).unwrap(), x);
                }
            }
        }
    }

    #[test]
    fn underflow_fast_path() {
        let t = MonotoneTarget::affine(2.0, 1.0).unwrap();
        assert_eq!(qs_eval(&t, 1e-3, KernelKind::Constant, 0.3, &PicardConfig::default()).unwrap(), 1.6);
    }

    #[test]
    fn rejects_bad_inputs() {
        let t = MonotoneTarget::softplus_shift();
        assert!(qs_eval(&t, 0.0, KernelKind::Constant, 0.0, &PicardConfig::default()).is_err());
        let cfg = StudyConfig {
            scales: vec![0.5, 0.25],
            ..StudyConfig::default()
        };
        assert_eq!(convergence_study(&t, &cfg), Err(UniversalityError::TooFewScales(2)));
        assert!(MonotoneTarget::affine(-1.0, 0.0).is_err());
        let bumpy = MonotoneTarget::custom(Arc::new(|x: f64| x.sin()), 1.0);
        assert!(matches!(
            convergence_study(&bumpy, &StudyConfig { interval: (-3.0, 3.0), ..StudyConfig::default() }),
            Err(UniversalityError::NotIncreasing { .. })
        ));
    }

    #[test]
    fn identity_study_flags_undefined_slope() {
        let rep = convergence_study(&MonotoneTarget::identity(), &StudyConfig::default()).unwrap();
        assert!(rep.rows.iter().all(|r| r.sup_error == 0.0));
        assert_eq!(rep.slope, None);
        assert!(rep.summary().contains("undefined"));
    }

    #[test]
    fn builtin_targets() {
        let sp = MonotoneTarget::softplus_shift();
        assert!(sp.value(0.0).abs() < 1e-16);
        assert!((sp.value(50.0) - 100.0 + std::f64::consts::LN_2).abs() < 1e-12);
        let ab = MonotoneTarget::arctan_blend();
        assert_eq!(ab.value(0.0), 0.0);
        for t in [sp, ab] {
            t.check_increasing(-5.0, 5.0, 1001).unwrap();
        }
    }

    #[test]
    fn picard_trace_contracts() {
        let t = MonotoneTarget::affine(2.0, 1.0).unwrap();
        let k = Kernel::new(KernelKind::Constant, 0.25).unwrap();
        let run = qs_picard(&t, &k, 0.5, &PicardConfig::default());
        assert_eq!(run.trace.len(), 3);
        for w in run.trace.windows(2) {
            assert!(w[1] * 10.0 <= w[0] || w[1] < 1e-14, "{:?}", run.trace);
        }
    }

    #[test]
    fn csv_layout() {
        let t = MonotoneTarget::affine(2.0, 1.0).unwrap();
        let rep = convergence_study(
            &t,
            &StudyConfig {
                grid: 11,
                ..StudyConfig::default()
            },
        )
        .unwrap();
        let csv = rep.to_csv();
        assert!(csv.starts_with("s,1/s,sup_error,log_error\n0.5,2,"));
        assert_eq!(csv.lines().count(), 5);
    }
}
