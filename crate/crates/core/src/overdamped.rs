//! Metropolis-adjusted Langevin sampling with the collective-variable
//! diffusion, and its adaptive variant that learns the latent profiles on
//! the fly.

use std::sync::Arc;

use crate::diffusion::{DiffusionEval, DiffusionSpec, Power, SigmaConvention};
use crate::error::{Error, Result};
use crate::harness::{MarkovChain, StepOutcome};
use crate::latent::{
    effective_drift_integrand, effective_noise_integrand, integrate_mean_force, local_mean_force,
    local_mean_force_const_norm, BinnedEstimator, LatentGrid, Outside, ProfileSet,
};
use crate::model::{displacement, wrap_all, Configuration, SystemModel};
use crate::rng::{chain_rng, fill_gaussian, uniform, ChainRng};

/// A configuration together with everything the proposal kernel needs.
#[derive(Debug, Clone)]
pub struct MalaPoint {
    pub q: Vec<f64>,
    pub v: f64,
    pub grad_v: Vec<f64>,
    pub diff: DiffusionEval,
    /// Proposal mean `q + (-D grad V + beta^{-1} div D) dt`, not wrapped.
    pub mean: Vec<f64>,
}

impl MalaPoint {
    pub fn evaluate(
        model: &SystemModel,
        spec: &DiffusionSpec,
        q: Vec<f64>,
        dt: f64,
    ) -> Result<Self> {
        let mut grad_v = vec![0.0; q.len()];
        let v = model.energy_and_gradient(&q, &mut grad_v)?;
        let diff = spec.eval(model.cv_eval(&q)?)?;
        let mut mean = q.clone();
        diff.apply_add(Power::One, &grad_v, -dt, &mut mean);
        diff.add_divergence(dt / model.beta(), &mut mean);
        Ok(Self {
            q,
            v,
            grad_v,
            diff,
            mean,
        })
    }

    pub fn xi(&self) -> f64 {
        self.diff.cv.value
    }
}

/// `ln T(from -> to)` for the Gaussian proposal, using the minimum-image
/// displacement `to - mean(from)`.
pub fn log_transition(model: &SystemModel, from: &MalaPoint, to: &[f64], dt: f64) -> f64 {
    let beta = model.beta();
    let d = from.q.len() as f64;
    let mut r = vec![0.0; to.len()];
    displacement(to, &from.mean, model.box_len(), &mut r);
    -0.5 * d * (4.0 * std::f64::consts::PI * dt / beta).ln()
        - 0.5 * from.diff.log_det()
        - beta / (4.0 * dt) * from.diff.quad_inverse(&r)
}

/// Log of the Metropolis-Hastings ratio for moving `from -> to`.
pub fn log_acceptance(model: &SystemModel, from: &MalaPoint, to: &MalaPoint, dt: f64) -> f64 {
    -model.beta() * (to.v - from.v) + log_transition(model, to, &from.q, dt)
        - log_transition(model, from, &to.q, dt)
}

/// Proposal `mean + sqrt(2 dt / beta) D^{1/2} gauss`, wrapped into the box.
pub fn propose(model: &SystemModel, from: &MalaPoint, dt: f64, gauss: &[f64]) -> Vec<f64> {
    let mut q = from.mean.clone();
    from.diff
        .apply_add(Power::Sqrt, gauss, (2.0 * dt / model.beta()).sqrt(), &mut q);
    wrap_all(&mut q, model.box_len());
    q
}

/// MALA chain.
#[derive(Debug, Clone)]
pub struct Mala {
    model: SystemModel,
    spec: DiffusionSpec,
    dt: f64,
    cur: MalaPoint,
    rng: ChainRng,
    gauss: Vec<f64>,
    steps: u64,
    accepted: u64,
}

impl Mala {
    pub fn new(
        model: SystemModel,
        spec: DiffusionSpec,
        dt: f64,
        q0: Configuration,
        seed: u64,
    ) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!(
                "time step must be positive, got {dt}"
            )));
        }
        if q0.dim() != model.dim() {
            return Err(Error::Config(format!(
                "configuration has {} coordinates, system needs {}",
                q0.dim(),
                model.dim()
            )));
        }
        let cur = MalaPoint::evaluate(&model, &spec, q0.into_coords(), dt)?;
        let d = model.dim();
        Ok(Self {
            model,
            spec,
            dt,
            cur,
            rng: chain_rng(seed),
            gauss: vec![0.0; d],
            steps: 0,
            accepted: 0,
        })
    }

    pub fn model(&self) -> &SystemModel {
        &self.model
    }

    pub fn spec(&self) -> &DiffusionSpec {
        &self.spec
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn point(&self) -> &MalaPoint {
        &self.cur
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn accept_rate(&self) -> f64 {
        if self.steps == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.steps as f64
        }
    }

    /// Replaces the diffusion and re-evaluates the cached state.
    pub fn set_spec(&mut self, spec: DiffusionSpec) -> Result<()> {
        self.cur =
            MalaPoint::evaluate(&self.model, &spec, std::mem::take(&mut self.cur.q), self.dt)?;
        self.spec = spec;
        Ok(())
    }

    /// One proposal and accept/reject. Draws the Gaussian vector first, then
    /// the uniform.
    pub fn step(&mut self) -> Result<bool> {
        fill_gaussian(&mut self.rng, &mut self.gauss);
        let u = uniform(&mut self.rng);
        let q_new = propose(&self.model, &self.cur, self.dt, &self.gauss);
        let prop = MalaPoint::evaluate(&self.model, &self.spec, q_new, self.dt)?;
        let log_r = log_acceptance(&self.model, &self.cur, &prop, self.dt);
        self.steps += 1;
        let accept = u.ln() < log_r;
        if accept {
            self.cur = prop;
            self.accepted += 1;
        }
        Ok(accept)
    }
}

impl MarkovChain for Mala {
    fn step(&mut self) -> Result<StepOutcome> {
        Ok(if Mala::step(self)? {
            StepOutcome::Accepted
        } else {
            StepOutcome::Metropolis
        })
    }
    fn xi(&self) -> f64 {
        self.cur.xi()
    }
    fn potential(&self) -> f64 {
        self.cur.v
    }
}

/// Learning hyperparameters of [`AdaptiveMala`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveParams {
    pub grid: LatentGrid,
    /// Visits a bin needs before its estimate replaces the default.
    pub n_min: u64,
    /// Steps between profile refreshes.
    pub n_update: u64,
    /// Stop learning after this many steps.
    pub freeze_after: Option<u64>,
    pub convention: SigmaConvention,
}

impl AdaptiveParams {
    pub fn new(grid: LatentGrid) -> Self {
        Self {
            grid,
            n_min: 100,
            n_update: 20,
            freeze_after: None,
            convention: SigmaConvention::Unit,
        }
    }
}

/// MALA whose diffusion is rebuilt from on-the-fly estimates of the mean
/// force, effective drift and effective diffusion.
///
/// Every step feeds the new state into the estimators; every `n_update`
/// steps the published profiles, the free energy, the normalization constant
/// and the cached state are refreshed together. Learning makes the chain only
/// approximately unbiased until it is frozen.
#[derive(Debug, Clone)]
pub struct AdaptiveMala {
    mala: Mala,
    alpha: f64,
    params: AdaptiveParams,
    mean_force: BinnedEstimator,
    drift: BinnedEstimator,
    noise: BinnedEstimator,
    profiles: Arc<ProfileSet>,
    refreshes: u64,
}

impl AdaptiveMala {
    /// Starts from `F = 0`, `sigma = 1`, `kappa = 1`.
    pub fn new(
        model: SystemModel,
        alpha: f64,
        dt: f64,
        params: AdaptiveParams,
        q0: Configuration,
        seed: u64,
    ) -> Result<Self> {
        if params.n_update == 0 {
            return Err(Error::Config("n_update must be at least 1".into()));
        }
        let grid = params.grid;
        let profiles = Arc::new(ProfileSet::flat(grid));
        let spec = DiffusionSpec::new(
            alpha,
            model.beta(),
            1.0,
            profiles.clone(),
            params.convention,
        )?;
        let mala = Mala::new(model, spec, dt, q0, seed)?;
        Ok(Self {
            mala,
            alpha,
            params,
            mean_force: BinnedEstimator::new(grid, 0.0, params.n_min),
            drift: BinnedEstimator::new(grid, 0.0, params.n_min),
            noise: BinnedEstimator::new(grid, 1.0, params.n_min),
            profiles,
            refreshes: 0,
        })
    }

    pub fn mala(&self) -> &Mala {
        &self.mala
    }

    pub fn profiles(&self) -> &ProfileSet {
        &self.profiles
    }

    pub fn kappa(&self) -> f64 {
        self.mala.spec.kappa
    }

    pub fn refreshes(&self) -> u64 {
        self.refreshes
    }

    pub fn mean_force_estimator(&self) -> &BinnedEstimator {
        &self.mean_force
    }

    pub fn drift_estimator(&self) -> &BinnedEstimator {
        &self.drift
    }

    pub fn learning(&self) -> bool {
        self.params.freeze_after.is_none_or(|n| self.mala.steps < n)
    }

    fn accumulate(&mut self) {
        let p = &self.mala.cur;
        let cv = &p.diff.cv;
        let beta = self.mala.model.beta();
        let f = if cv.constant_norm {
            local_mean_force_const_norm(&p.grad_v, cv, beta)
        } else {
            local_mean_force(&p.grad_v, cv, beta)
        };
        self.mean_force.accumulate(cv.value, f);
        self.drift
            .accumulate(cv.value, effective_drift_integrand(&p.grad_v, cv, beta));
        self.noise
            .accumulate(cv.value, effective_noise_integrand(cv));
    }

    /// Publishes new profiles and rebuilds the diffusion.
    pub fn refresh(&mut self) -> Result<()> {
        let grid = self.params.grid;
        let mut mean_force = self.mean_force.to_profile();
        mean_force.outside = Outside::Value(0.0);
        let profiles = Arc::new(ProfileSet {
            free_energy: integrate_mean_force(&mean_force),
            mean_force,
            eff_diffusion: self.noise.to_profile(),
            eff_drift: self.drift.to_profile(),
        });
        let spec = DiffusionSpec::normalized(
            self.alpha,
            self.mala.model.beta(),
            profiles.clone(),
            self.params.convention,
            &grid,
            self.mala.model.dim(),
        )?;
        self.mala.set_spec(spec)?;
        self.profiles = profiles;
        self.refreshes += 1;
        Ok(())
    }

    pub fn step(&mut self) -> Result<bool> {
        let learning = self.learning();
        let accepted = self.mala.step()?;
        if learning {
            self.accumulate();
            if self.mala.steps % self.params.n_update == 0 {
                self.refresh()?;
            }
        }
        Ok(accepted)
    }
}

impl MarkovChain for AdaptiveMala {
    fn step(&mut self) -> Result<StepOutcome> {
        Ok(if AdaptiveMala::step(self)? {
            StepOutcome::Accepted
        } else {
            StepOutcome::Metropolis
        })
    }
    fn xi(&self) -> f64 {
        self.mala.cur.xi()
    }
    fn potential(&self) -> f64 {
        self.mala.cur.v
    }
}
