#![allow(dead_code)]

use std::sync::Arc;

use cvdiff::diffusion::{DiffusionSpec, SigmaConvention};
use cvdiff::latent::AnalyticLatent;
use cvdiff::model::{lattice_config_at, CollectiveVariable, CvEval, SystemModel, SystemParams};
use cvdiff::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn paper_model() -> SystemModel {
    SystemModel::dimer(SystemParams::paper_dimer())
}

/// Lattice start with the dimer at a random extension and every coordinate
/// jittered by up to `jitter`. Longer bonds would run into the next lattice
/// site.
pub fn random_state(model: &SystemModel, rng: &mut ChaCha8Rng, jitter: f64) -> Vec<f64> {
    let z = rng.random_range(-0.1..0.1);
    let mut q = lattice_config_at(&model.params, z).into_coords();
    for x in q.iter_mut() {
        *x += rng.random_range(-jitter..jitter);
    }
    let l = model.box_len();
    q.iter().map(|x| x.rem_euclid(l)).collect()
}

pub fn random_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-scale..scale)).collect()
}

/// A smooth double well in `z` with a position-dependent effective
/// diffusion, all derivatives in closed form.
pub fn wavy_latent(beta: f64) -> AnalyticLatent {
    AnalyticLatent::new(
        beta,
        |z| 1.5 * (1.0 - (2.0 * z - 1.0).powi(2)).powi(2) + 0.3 * z,
        |z| {
            let u = 2.0 * z - 1.0;
            1.5 * 2.0 * (1.0 - u * u) * (-2.0 * u) * 2.0 + 0.3
        },
        |z| 1.0 + 0.3 * (3.0 * z).sin(),
        |z| 0.9 * (3.0 * z).cos(),
    )
}

pub fn wavy_spec(alpha: f64, kappa: f64, convention: SigmaConvention) -> DiffusionSpec {
    DiffusionSpec::new(alpha, 1.0, kappa, Arc::new(wavy_latent(1.0)), convention).unwrap()
}

/// Central difference of a scalar function along coordinate `i`.
pub fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += h;
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Checks `|a - b| <= tol * max(1, |b|)`.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

/// A collective variable with position-dependent gradient norm, to exercise
/// the general divergence formula.
#[derive(Debug)]
pub struct Wobbly;

impl CollectiveVariable for Wobbly {
    fn evaluate(&self, q: &[f64], _box_len: f64) -> Result<CvEval> {
        let (x, y, u, v) = (q[0], q[1], q[2], q[3]);
        // offset so that lattice states land near the wells of the test profiles
        let value = 0.5 * x * x + y.sin() + 0.3 * u * v + 0.2 * v - 1.0;
        let grad = vec![x, y.cos(), 0.3 * v, 0.3 * u + 0.2];
        #[rustfmt::skip]
        let hess = vec![
            1.0, 0.0, 0.0, 0.0,
            0.0, -y.sin(), 0.0, 0.0,
            0.0, 0.0, 0.0, 0.3,
            0.0, 0.0, 0.3, 0.0,
        ];
        let grad_norm_sq = grad.iter().map(|g| g * g).sum();
        Ok(CvEval {
            value,
            dim: q.len(),
            support: vec![0, 1, 2, 3],
            grad,
            hess,
            grad_norm_sq,
            constant_norm: false,
        })
    }
}

/// The paper system with [`Wobbly`] as collective variable.
pub fn wobbly_model() -> SystemModel {
    SystemModel {
        params: SystemParams::paper_dimer(),
        cv: Arc::new(Wobbly),
    }
}
