//! Parametric integrands `g(v, t; a, b, c)` driving the latent dynamics.
//!
//! The three built-in families are explicit in `v` only:
//!
//! | family          | g(v)                 |
//! |-----------------|----------------------|
//! | `Quadratic`     | `a·v + b + c·v²`     |
//! | `Cubic`         | `a·v + b + c·v³`     |
//! | `SigmoidAffine` | `a·v + b + c·σ(v)`   |
//!
//! Besides the value and `∂g/∂v`, the solver needs `∂²g/∂v²`, `∂g/∂θ` and
//! `∂²g/∂v∂θ` to back-propagate through the discretized trajectory.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// The `(a, b, c)` coefficient triple.
pub type Params = [f64; 3];

/// Built-in integrand families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Quadratic,
    Cubic,
    SigmoidAffine,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Quadratic, Family::Cubic, Family::SigmoidAffine];

    pub fn name(self) -> &'static str {
        match self {
            Family::Quadratic => "quadratic",
            Family::Cubic => "cubic",
            Family::SigmoidAffine => "sigmoid_affine",
        }
    }

    /// The nonlinear basis term multiplying `c`, and its first three derivatives.
    #[inline]
    fn basis(self, v: f64) -> [f64; 3] {
        match self {
            Family::Quadratic => [v * v, 2.0 * v, 2.0],
            Family::Cubic => [v * v * v, 3.0 * v * v, 6.0 * v],
            Family::SigmoidAffine => {
                let s = sigmoid(v);
                let ds = s * (1.0 - s);
                [s, ds, ds * (1.0 - 2.0 * s)]
            }
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "quadratic" => Ok(Family::Quadratic),
            "cubic" => Ok(Family::Cubic),
            "sigmoid_affine" | "sigmoid" => Ok(Family::SigmoidAffine),
            other => Err(format!("unknown integrand family `{other}`")),
        }
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// User-supplied integrand. All derivatives must be the analytic ones; the
/// gradient checks compare them against finite differences.
pub trait CustomIntegrand: Send + Sync {
    fn value(&self, v: f64, t: f64, p: &Params) -> f64;
    fn dv(&self, v: f64, t: f64, p: &Params) -> f64;
    fn dvv(&self, v: f64, t: f64, p: &Params) -> f64;
    fn dparams(&self, v: f64, t: f64, p: &Params) -> Params;
    fn dv_dparams(&self, v: f64, t: f64, p: &Params) -> Params;
}

#[derive(Clone)]
enum Kind {
    Builtin(Family),
    Custom(Arc<dyn CustomIntegrand>),
}

/// An integrand family together with its coefficients.
#[derive(Clone)]
pub struct Integrand {
    kind: Kind,
    params: Params,
}

impl fmt::Debug for Integrand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let family = match &self.kind {
            Kind::Builtin(fam) => fam.name(),
            Kind::Custom(_) => "custom",
        };
        f.debug_struct("Integrand")
            .field("family", &family)
            .field("params", &self.params)
            .finish()
    }
}

impl Integrand {
    pub fn new(family: Family, params: Params) -> Self {
        Self {
            kind: Kind::Builtin(family),
            params,
        }
    }

    pub fn quadratic(a: f64, b: f64, c: f64) -> Self {
        Self::new(Family::Quadratic, [a, b, c])
    }

    pub fn cubic(a: f64, b: f64, c: f64) -> Self {
        Self::new(Family::Cubic, [a, b, c])
    }

    pub fn sigmoid_affine(a: f64, b: f64, c: f64) -> Self {
        Self::new(Family::SigmoidAffine, [a, b, c])
    }

    pub fn custom(callbacks: Arc<dyn CustomIntegrand>, params: Params) -> Self {
        Self {
            kind: Kind::Custom(callbacks),
            params,
        }
    }

    /// `None` for custom integrands.
    pub fn family(&self) -> Option<Family> {
        match self.kind {
            Kind::Builtin(f) => Some(f),
            Kind::Custom(_) => None,
        }
    }

    pub fn params(&self) -> Params {
        self.params
    }

    pub fn with_params(&self, params: Params) -> Self {
        Self {
            kind: self.kind.clone(),
            params,
        }
    }

    pub fn params_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// `g(v, t)`.
    #[inline]
    pub fn value(&self, v: f64, t: f64) -> f64 {
        let [a, b, c] = self.params;
        match &self.kind {
            Kind::Builtin(f) => a * v + b + c * f.basis(v)[0],
            Kind::Custom(cb) => cb.value(v, t, &self.params),
        }
    }

    /// `∂g/∂v (v, t)`.
    #[inline]
    pub fn dv(&self, v: f64, t: f64) -> f64 {
        let [a, _, c] = self.params;
        match &self.kind {
            Kind::Builtin(f) => a + c * f.basis(v)[1],
            Kind::Custom(cb) => cb.dv(v, t, &self.params),
        }
    }

    /// `∂²g/∂v²`.
    #[inline]
    pub fn dvv(&self, v: f64, t: f64) -> f64 {
        match &self.kind {
            Kind::Builtin(f) => self.params[2] * f.basis(v)[2],
            Kind::Custom(cb) => cb.dvv(v, t, &self.params),
        }
    }

    /// `∂g/∂(a, b, c)`.
    #[inline]
    pub fn dparams(&self, v: f64, t: f64) -> Params {
        match &self.kind {
            Kind::Builtin(f) => [v, 1.0, f.basis(v)[0]],
            Kind::Custom(cb) => cb.dparams(v, t, &self.params),
        }
    }

    /// `∂²g/∂v∂(a, b, c)`.
    #[inline]
    pub fn dv_dparams(&self, v: f64, t: f64) -> Params {
        match &self.kind {
            Kind::Builtin(f) => [1.0, 0.0, f.basis(v)[1]],
            Kind::Custom(cb) => cb.dv_dparams(v, t, &self.params),
        }
    }

    /// Everything the solver needs at one stage, in a single basis evaluation.
    #[inline]
    pub(crate) fn stage(&self, v: f64, t: f64) -> Stage {
        match &self.kind {
            Kind::Builtin(f) => {
                let [a, b, c] = self.params;
                let [p0, p1, p2] = f.basis(v);
                Stage {
                    g: a * v + b + c * p0,
                    gv: a + c * p1,
                    gvv: c * p2,
                    gp: [v, 1.0, p0],
                    gvp: [1.0, 0.0, p1],
                }
            }
            Kind::Custom(cb) => {
                let p = &self.params;
                Stage {
                    g: cb.value(v, t, p),
                    gv: cb.dv(v, t, p),
                    gvv: cb.dvv(v, t, p),
                    gp: cb.dparams(v, t, p),
                    gvp: cb.dv_dparams(v, t, p),
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Stage {
    #[allow(dead_code)]
    pub g: f64,
    pub gv: f64,
    pub gvv: f64,
    pub gp: Params,
    pub gvp: Params,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_values() {
        assert_eq!(Integrand::quadratic(0.0, 0.0, 0.0).value(3.2, 0.5), 0.0);
        assert_eq!(Integrand::quadratic(1.0, 2.0, 0.0).value(2.0, 0.0), 4.0);
        assert_eq!(Integrand::cubic(0.0, 0.0, 2.0).value(-1.5, 1.0), -6.75);
    }

    #[test]
    fn hand_derivatives() {
        let g = Integrand::quadratic(1.0, 5.0, 0.0);
        for v in [-3.0, 0.0, 2.5] {
            assert_eq!(g.dv(v, 0.3), 1.0);
        }
        assert_eq!(Integrand::quadratic(0.0, 0.0, 1.0).dv(3.0, 0.0), 6.0);
        assert_eq!(Integrand::sigmoid_affine(0.0, 0.0, 1.0).dv(0.0, 0.0), 0.25);
    }

    #[test]
    fn sigmoid_is_stable_in_tails() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-16);
    }

    #[test]
    fn family_names_parse_back() {
        for f in Family::ALL {
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
        }
        assert!("quartic".parse::<Family>().is_err());
    }

    fn central(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6 * (1.0 + x.abs());
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-6 * (1.0 + a.abs().max(b.abs()))
    }

    proptest! {
        #[test]
        fn analytic_derivatives_match_finite_differences(
            fam in 0usize..3,
            a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0,
            v in -3.0f64..3.0, t in 0.0f64..1.0,
        ) {
            let family = Family::ALL[fam];
            let g = Integrand::new(family, [a, b, c]);
            prop_assert!(close(g.dv(v, t), central(|w| g.value(w, t), v)));
            prop_assert!(close(g.dvv(v, t), central(|w| g.dv(w, t), v)));
            let gp = g.dparams(v, t);
            let gvp = g.dv_dparams(v, t);
            for k in 0..3 {
                let bump = |h: f64| {
                    let mut p = [a, b, c];
                    p[k] += h;
                    Integrand::new(family, p)
                };
                prop_assert!(close(gp[k], central(|h| bump(h).value(v, t), 0.0)));
                prop_assert!(close(gvp[k], central(|h| bump(h).dv(v, t), 0.0)));
            }
            // explicit in v only
            prop_assert_eq!(g.value(v, 0.0), g.value(v, t));
        }
    }
}
