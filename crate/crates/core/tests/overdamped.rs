mod common;

use std::sync::Arc;

use common::{paper_model, random_state, rng, wavy_spec};
use cvdiff::diffusion::{DiffusionSpec, Power, SigmaConvention};
use cvdiff::harness::MarkovChain;
use cvdiff::latent::{LatentGrid, ProfileSet};
use cvdiff::model::{displacement, lattice_config, wrap_all, Configuration, SystemModel};
use cvdiff::overdamped::{
    log_acceptance, log_transition, propose, AdaptiveMala, AdaptiveParams, Mala, MalaPoint,
};
use cvdiff::rng::{chain_rng, fill_gaussian, uniform};
use nalgebra::{DMatrix, DVector};

/// Plain MALA with `D = I`, written from scratch.
fn reference_mala(
    model: &SystemModel,
    dt: f64,
    q0: Vec<f64>,
    seed: u64,
    n: usize,
) -> Vec<Vec<f64>> {
    let beta = model.beta();
    let l = model.box_len();
    let d = q0.len();
    let mut r = chain_rng(seed);
    let mut g = vec![0.0; d];
    let energy = |q: &[f64]| {
        let mut grad = vec![0.0; d];
        let v = model.energy_and_gradient(q, &mut grad).unwrap();
        (v, grad)
    };
    let log_q = |from: &[f64], grad: &[f64], to: &[f64]| {
        let s: f64 = (0..d)
            .map(|i| {
                let dx = to[i] - (from[i] - dt * grad[i]);
                let dx = dx - l * (dx / l).round();
                dx * dx
            })
            .sum();
        -beta * s / (4.0 * dt)
    };
    let mut q = q0;
    let (mut v, mut grad) = energy(&q);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        fill_gaussian(&mut r, &mut g);
        let u = uniform(&mut r);
        let mut y: Vec<f64> = (0..d)
            .map(|i| q[i] - dt * grad[i] + (2.0 * dt / beta).sqrt() * g[i])
            .collect();
        wrap_all(&mut y, l);
        let (vy, gy) = energy(&y);
        let log_r = -beta * (vy - v) + log_q(&y, &gy, &q) - log_q(&q, &grad, &y);
        if u.ln() < log_r {
            q = y;
            v = vy;
            grad = gy;
        }
        out.push(q.clone());
    }
    out
}

#[test]
fn identity_mala_matches_reference_implementation() {
    let model = paper_model();
    let q0 = lattice_config(&model.params);
    let dt = 2.6e-3;
    let expect = reference_mala(&model, dt, q0.coords().to_vec(), 77, 3000);
    let mut chain = Mala::new(model.clone(), DiffusionSpec::identity(1.0), dt, q0, 77).unwrap();
    for (n, e) in expect.iter().enumerate() {
        chain.step().unwrap();
        for (a, b) in chain.point().q.iter().zip(e) {
            assert!((a - b).abs() < 1e-12, "step {n}: {a} vs {b}");
        }
    }
    assert!(chain.accept_rate() > 0.0 && chain.accept_rate() < 1.0);
}

#[test]
fn transition_density_matches_dense_gaussian() {
    let model = paper_model();
    let mut r = rng(30);
    let spec = wavy_spec(0.8, 0.3, SigmaConvention::Profile);
    let dt = 3e-3;
    for _ in 0..10 {
        let q = random_state(&model, &mut r, 0.1);
        let from = MalaPoint::evaluate(&model, &spec, q, dt).unwrap();
        let d = from.q.len();
        let mut g = vec![0.0; d];
        fill_gaussian(&mut r, &mut g);
        let to = propose(&model, &from, dt, &g);
        // dense oracle: N(mean, 2 dt / beta D)
        let cov =
            DMatrix::from_row_slice(d, d, &from.diff.dense(Power::One)) * (2.0 * dt / model.beta());
        let chol = cov.clone().cholesky().unwrap();
        let mut disp = vec![0.0; d];
        displacement(&to, &from.mean, model.box_len(), &mut disp);
        let x = DVector::from_vec(disp);
        let quad = x.dot(&chol.solve(&x));
        let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let dense =
            -0.5 * (d as f64) * (2.0 * std::f64::consts::PI).ln() - 0.5 * logdet - 0.5 * quad;
        let ours = log_transition(&model, &from, &to, dt);
        assert!(
            (ours - dense).abs() < 1e-8 * dense.abs().max(1.0),
            "{ours} vs {dense}"
        );
    }
}

#[test]
fn acceptance_ratio_is_antisymmetric() {
    let model = paper_model();
    let mut r = rng(31);
    let spec = wavy_spec(0.5, 0.3, SigmaConvention::Unit);
    let dt = 2e-3;
    for _ in 0..20 {
        let q = random_state(&model, &mut r, 0.1);
        let from = MalaPoint::evaluate(&model, &spec, q, dt).unwrap();
        let mut g = vec![0.0; from.q.len()];
        fill_gaussian(&mut r, &mut g);
        let to = MalaPoint::evaluate(&model, &spec, propose(&model, &from, dt, &g), dt).unwrap();
        let fwd = log_acceptance(&model, &from, &to, dt);
        let bwd = log_acceptance(&model, &to, &from, dt);
        assert!((fwd + bwd).abs() < 1e-9 * fwd.abs().max(1.0));
    }
}

#[test]
fn proposal_moments() {
    let model = paper_model();
    let mut r = rng(32);
    let spec = wavy_spec(1.0, 0.5, SigmaConvention::Unit);
    let dt = 1e-3;
    let q = random_state(&model, &mut r, 0.1);
    let from = MalaPoint::evaluate(&model, &spec, q, dt).unwrap();
    let d = from.q.len();
    let n = 100_000;
    let mut g = vec![0.0; d];
    let mut disp = vec![0.0; d];
    let mut sum = DVector::<f64>::zeros(d);
    let mut outer = DMatrix::<f64>::zeros(d, d);
    for _ in 0..n {
        fill_gaussian(&mut r, &mut g);
        let to = propose(&model, &from, dt, &g);
        displacement(&to, &from.mean, model.box_len(), &mut disp);
        let x = DVector::from_column_slice(&disp);
        sum += &x;
        outer += &x * x.transpose();
    }
    let cov =
        DMatrix::from_row_slice(d, d, &from.diff.dense(Power::One)) * (2.0 * dt / model.beta());
    let emp = outer / n as f64;
    for i in 0..d {
        assert!((sum[i] / n as f64).abs() < 4.0 * (cov[(i, i)] / n as f64).sqrt());
        for j in 0..d {
            // variance of x_i x_j is cov_ii cov_jj + cov_ij^2
            let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / n as f64).sqrt();
            assert!((emp[(i, j)] - cov[(i, j)]).abs() < 4.5 * se, "({i},{j})");
        }
    }
}

#[test]
fn chain_is_deterministic_under_seed() {
    let model = paper_model();
    let spec = wavy_spec(0.4, 0.3, SigmaConvention::Unit);
    let run = |seed| {
        let mut m = Mala::new(
            model.clone(),
            spec.clone(),
            2e-3,
            lattice_config(&model.params),
            seed,
        )
        .unwrap();
        (0..500).for_each(|_| {
            m.step().unwrap();
        });
        m.point().q.clone()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn mala_rejects_bad_setup() {
    let model = paper_model();
    let q0 = lattice_config(&model.params);
    assert!(Mala::new(
        model.clone(),
        DiffusionSpec::identity(1.0),
        0.0,
        q0.clone(),
        1
    )
    .is_err());
    let short = Configuration::new(vec![1.0, 1.0, 2.0, 2.0], model.box_len()).unwrap();
    assert!(Mala::new(model, DiffusionSpec::identity(1.0), 1e-3, short, 1).is_err());
}

#[test]
fn adaptive_starts_flat_and_refreshes_on_schedule() {
    let model = paper_model();
    let grid = LatentGrid::dimer_default(100);
    let mut params = AdaptiveParams::new(grid);
    params.freeze_after = Some(1000);
    let mut chain = AdaptiveMala::new(
        model.clone(),
        0.4,
        2.6e-3,
        params,
        lattice_config(&model.params),
        3,
    )
    .unwrap();
    assert_eq!(chain.kappa(), 1.0);
    assert_eq!(chain.profiles(), &ProfileSet::flat(grid));
    // the bond may compress past the grid, so in-grid visits are counted here
    let mut inside = 0u64;
    let mut step = |chain: &mut AdaptiveMala, n: u64| {
        chain.step().unwrap();
        if n <= 1000 {
            inside += u64::from(grid.bin_index(MarkovChain::xi(chain)).is_some());
        }
    };
    for n in 1..20 {
        step(&mut chain, n);
    }
    assert_eq!(chain.refreshes(), 0);
    step(&mut chain, 20);
    assert_eq!(chain.refreshes(), 1);
    // with fewer than n_min visits everywhere the profiles stay at their defaults
    assert!(chain.profiles().mean_force.values.iter().all(|&v| v == 0.0));
    assert!((chain.kappa() - 1.0 / (32f64.sqrt() * 1.425)).abs() < 1e-12);
    for n in 21..=2020 {
        step(&mut chain, n);
    }
    assert_eq!(chain.refreshes(), 50);
    assert!(!chain.learning());
    let visited: u64 = chain.mean_force_estimator().counts().iter().sum();
    assert_eq!(visited, inside);
    // published values are the bin means where the visits suffice, else zero
    let est = chain.mean_force_estimator();
    for (i, &v) in chain.profiles().mean_force.values.iter().enumerate() {
        let expect = if est.counts()[i] >= 100 {
            est.mean(i).unwrap()
        } else {
            0.0
        };
        assert_eq!(v, expect);
    }
}

#[test]
fn adaptive_with_frozen_profiles_is_plain_mala() {
    // Once learning stops, the chain is MALA with the last published spec.
    let model = paper_model();
    let grid = LatentGrid::dimer_default(100);
    let mut params = AdaptiveParams::new(grid);
    params.freeze_after = Some(400);
    let q0 = lattice_config(&model.params);
    let mut ada = AdaptiveMala::new(model.clone(), 0.6, 2.6e-3, params, q0, 9).unwrap();
    for _ in 0..400 {
        ada.step().unwrap();
    }
    let frozen: Arc<ProfileSet> = Arc::new(ada.profiles().clone());
    assert_eq!(ada.kappa(), ada.mala().spec().kappa);
    let mut plain = ada.mala().clone();
    for _ in 0..300 {
        ada.step().unwrap();
        plain.step().unwrap();
        assert_eq!(ada.mala().point().q, plain.point().q);
    }
    assert_eq!(ada.profiles(), frozen.as_ref());
}
