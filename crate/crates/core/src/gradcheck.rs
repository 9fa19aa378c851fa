//! Finite-difference checks of every reverse-mode gradient in the crate.
//!
//! Each suite draws seeded random instances, compares analytic gradients
//! against central differences and reports the worst relative error
//! `|a − f| / max(|a|, |f|, REL_FLOOR)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::conditioner::{Activation, ConditionerNet};
use crate::flow::{Architecture, FlowModel, ModelSpec};
use crate::integrand::{Family, Integrand};
use crate::map::{self, SolverConfig};
use crate::training;

/// Magnitude below which errors are measured absolutely.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub entries: usize,
    pub max_rel_error: f64,
}

/// Central difference of `f` at `x` along one coordinate.
fn central(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    let h = 1e-5 * x.abs().max(1.0);
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut *rng);
            scale * z
        })
        .collect()
}

/// Scalar map VJP: `d(ȳ·y + ℓ̄·ℓ)/d(x, a, b, c)`.
pub fn map_suite(seed: u64, cases: usize) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    let mut done = 0;
    while done < cases {
        let family = Family::ALL[rng.random_range(0..3)];
        let p = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-0.5..0.5),
        ];
        let x: f64 = rng.random_range(-1.5..1.5);
        let cfg = SolverConfig::rk4(rng.random_range(2..12));
        let (cy, cl): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let g = Integrand::new(family, p);
        let Ok(vjp) = map::forward_vjp(&g, &cfg, x, cy, cl) else {
            continue;
        };
        let obj = |g: &Integrand, x: f64| {
            let r = map::forward(g, &cfg, x).expect("neighbourhood of a solvable point");
            cy * r.y + cl * r.log_deriv
        };
        worst = worst.max(rel_error(vjp.dx, central(|x| obj(&g, x), x)));
        for k in 0..3 {
            let fd = central(
                |v| {
                    let mut q = p;
                    q[k] = v;
                    obj(&Integrand::new(family, q), x)
                },
                p[k],
            );
            worst = worst.max(rel_error(vjp.dparams[k], fd));
        }
        entries += 4;
        done += 1;
    }
    SuiteResult {
        name: "autm-core map vjp",
        cases,
        entries,
        max_rel_error: worst,
    }
}

/// Conditioner VJP with respect to inputs and parameters, plain and masked.
pub fn conditioner_suite(seed: u64, cases: usize) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    for i in 0..cases {
        let act = if i % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let d = rng.random_range(2..5);
        let mut net = if i % 3 == 0 {
            let ordering: Vec<usize> = (0..d).rev().collect();
            crate::conditioner::masked_net(d, &[6, 5], &ordering, act, seed + i as u64)
                .expect("valid masked net")
        } else {
            ConditionerNet::zeros(&[d, 5, 4, 3 * d], act).expect("valid dims")
        };
        let params = normal_vec(&mut rng, net.n_params(), 0.7);
        net.set_params(&params).expect("length matches");
        let input = normal_vec(&mut rng, d, 1.0);
        let cot = normal_vec(&mut rng, net.output_dim(), 1.0);
        let vjp = net.vjp(&input, &cot).expect("shapes match");
        let dot = |n: &ConditionerNet, x: &[f64]| -> f64 {
            n.eval(x).expect("shapes match").iter().zip(&cot).map(|(a, b)| a * b).sum()
        };
        for j in 0..d {
            let fd = central(
                |v| {
                    let mut x = input.clone();
                    x[j] = v;
                    dot(&net, &x)
                },
                input[j],
            );
            worst = worst.max(rel_error(vjp.dinput[j], fd));
        }
        for k in 0..params.len() {
            let fd = central(
                |v| {
                    let mut n = net.clone();
                    n.params_mut()[k] = v;
                    dot(&n, &input)
                },
                params[k],
            );
            worst = worst.max(rel_error(vjp.dparams[k], fd));
        }
        entries += d + params.len();
    }
    SuiteResult {
        name: "conditioner vjp",
        cases,
        entries,
        max_rel_error: worst,
    }
}

/// A small random flow: coupling or autoregressive, D ∈ {2, 3}, random family.
pub fn random_small_model(rng: &mut ChaCha8Rng) -> FlowModel {
    let spec = ModelSpec {
        dim: rng.random_range(2..4),
        layers: 2,
        architecture: if rng.random::<bool>() {
            Architecture::Coupling
        } else {
            Architecture::Autoregressive
        },
        family: Family::ALL[rng.random_range(0..3)],
        hidden: vec![4],
        steps: rng.random_range(2..7),
        seed: rng.random(),
        ..ModelSpec::default()
    };
    let mut model = FlowModel::build(&spec).expect("valid spec");
    let params = normal_vec(rng, model.n_params(), 0.3);
    model.set_params(&params).expect("length matches");
    model
}

/// `nll_and_grad` against finite differences of `nll`.
pub fn training_suite(seed: u64, models: usize) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    let mut done = 0;
    while done < models {
        let model = random_small_model(&mut rng);
        let batch: Vec<Vec<f64>> = (0..3).map(|_| normal_vec(&mut rng, model.dim(), 1.0)).collect();
        let Ok((_, grad)) = training::nll_and_grad(&model, &batch) else {
            continue;
        };
        let p0 = model.params();
        for k in 0..p0.len() {
            let fd = central(
                |v| {
                    let mut m = model.clone();
                    let mut p = p0.clone();
                    p[k] = v;
                    m.set_params(&p).expect("length matches");
                    training::nll(&m, &batch).expect("neighbourhood of a solvable point")
                },
                p0[k],
            );
            worst = worst.max(rel_error(grad[k], fd));
        }
        entries += p0.len();
        done += 1;
    }
    SuiteResult {
        name: "training nll_and_grad",
        cases: models,
        entries,
        max_rel_error: worst,
    }
}

/// All suites with their default sizes.
pub fn run_all(seed: u64) -> Vec<SuiteResult> {
    vec![
        map_suite(seed, 100),
        conditioner_suite(seed.wrapping_add(1), 12),
        training_suite(seed.wrapping_add(2), 20),
    ]
}
