//! Monotone bijections defined by latent-time dynamics, with explicit
//! reverse-time inverses, and the coupling/autoregressive flows built on them.
//!
//! A scalar map `q(x) = v(1)` follows `v' = g(v, t)` from `v(0) = x`. Its
//! inverse integrates the same dynamics backwards from `t = 1`, and
//! `log q'(x) = ∫₀¹ ∂g/∂v dt` is accumulated along the trajectory.
//!
//! * [`map`]: fixed-step solver, inverse, reverse-mode gradients
//! * [`invbench`]: bisection / fixed-point / Newton refinement and the step-count benchmark
//! * [`conditioner`]: dense and MADE-masked MLPs producing integrand coefficients
//! * [`flow`]: coupling, autoregressive and permutation layers; densities, sampling, checkpoints
//! * [`training`]: maximum likelihood with Adam, toy and CSV datasets
//! * [`universality`]: the `q_s` approximant family and convergence studies
//! * [`gradcheck`]: finite-difference suites for all gradients

pub mod conditioner;
pub mod flow;
pub mod gradcheck;
pub mod integrand;
pub mod invbench;
pub mod map;
pub mod training;
pub mod universality;

pub use flow::{FlowError, FlowModel, ModelSpec};
pub use integrand::{Family, Integrand, Params};
pub use invbench::{RefineConfig, RefineMethod};
pub use map::{Direction, MapError, MapResult, Scheme, SolverConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
