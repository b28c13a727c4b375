//! Thermodynamic integration for the dimer bond: constrained overdamped
//! Langevin sampling on level sets of the collective variable, with the
//! closed-form Lagrange multiplier of the bond-length constraint.

use crate::error::{Error, Result};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::latent::{
    grid_from_centers, integrate_mean_force, local_mean_force_const_norm, read_table,
    write_comments, LatentGrid, Outside, Profile,
};
use crate::model::{lattice_config_at, min_image, wrap_all, Configuration, DimerBond, SystemModel};
use crate::rng::{chain_rng, fill_gaussian};

/// Settings of a thermodynamic integration run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TiConfig {
    /// Levels sit at the bin midpoints of this grid.
    pub grid: LatentGrid,
    pub dt: f64,
    pub sim_time_per_level: f64,
    /// Fraction of each level's steps discarded before averaging.
    pub burn_in_fraction: f64,
    /// Batches used for the per-level standard error.
    pub n_batches: usize,
    pub seed: u64,
    /// Without noise the dynamics is a constrained gradient descent.
    pub thermal_noise: bool,
}

impl TiConfig {
    /// 100 levels on `[-0.2, 1.225]`, `dt = 2.5e-5`, 125 time units per level.
    pub fn paper(seed: u64) -> Self {
        Self {
            grid: LatentGrid::dimer_default(100),
            dt: 2.5e-5,
            sim_time_per_level: 125.0,
            burn_in_fraction: 0.05,
            n_batches: 20,
            seed,
            thermal_noise: true,
        }
    }

    pub fn steps_per_level(&self) -> usize {
        (self.sim_time_per_level / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!(
                "TI time step must be positive, got {}",
                self.dt
            )));
        }
        if !(self.sim_time_per_level > 0.0) {
            return Err(Error::Config("TI simulation time must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return Err(Error::Config("burn-in fraction must lie in [0, 1)".into()));
        }
        if self.n_batches < 2 {
            return Err(Error::Config("need at least two batches".into()));
        }
        let kept = self.steps_per_level() - self.burn_in_steps();
        if kept < self.n_batches {
            return Err(Error::Config(format!(
                "{kept} averaged steps per level cannot fill {} batches",
                self.n_batches
            )));
        }
        Ok(())
    }

    pub fn burn_in_steps(&self) -> usize {
        (self.burn_in_fraction * self.steps_per_level() as f64).floor() as usize
    }

    /// Constraint value of level `i` (0-based): the midpoint of bin `i`.
    pub fn level(&self, i: usize) -> f64 {
        self.grid.center(i)
    }
}

/// Mean-force estimate on one level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiLevel {
    pub z: f64,
    pub mean_force: f64,
    /// Batch-means standard error.
    pub std_err: f64,
    pub n_samples: usize,
    /// Steps whose proposal could not be projected onto the level.
    pub n_rejected: usize,
}

#[derive(Debug, Clone)]
pub struct TiResult {
    pub levels: Vec<TiLevel>,
    pub mean_force: Profile,
    pub free_energy: Profile,
    /// Configuration at the end of the last level.
    pub final_config: Configuration,
}

impl TiResult {
    /// Mean force and integrated free energy of finished levels, which must
    /// sit at the bin midpoints of a uniform grid.
    pub fn profiles(levels: &[TiLevel]) -> Result<(Profile, Profile)> {
        let centers: Vec<f64> = levels.iter().map(|l| l.z).collect();
        let grid = grid_from_centers(&centers)?;
        let mean_force = Profile::new(
            grid,
            levels.iter().map(|l| l.mean_force).collect(),
            Outside::Value(0.0),
        )?
        .with_counts(levels.iter().map(|l| l.n_samples as u64).collect());
        let free_energy = integrate_mean_force(&mean_force);
        Ok((mean_force, free_energy))
    }
}

const LEVEL_HEADER: &[&str] = &["z", "mean_force", "std_err", "n_samples", "n_rejected"];

/// Writes one row per level, with its standard error.
pub fn write_levels_csv<W: Write>(
    mut out: W,
    levels: &[TiLevel],
    comment: &[String],
) -> Result<()> {
    write_comments(&mut out, comment)?;
    let mut w = csv::Writer::from_writer(out);
    for l in levels {
        w.serialize(l)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_levels_csv<R: Read>(input: R) -> Result<Vec<TiLevel>> {
    read_table(input, LEVEL_HEADER)
}

/// Moves the dimer pair of `q` back onto `xi = z` along the bond, keeping its
/// center of mass. Works in the frame of particle 2 and wraps afterwards.
/// Returns the Lagrange multiplier `2 w^2 (z - xi(q))`.
///
/// Bonds longer than half the box only exist off the axes; when the scaled
/// bond would leave the minimum-image cell the point is not on the level set
/// and [`Error::Domain`] is returned with `q` untouched.
pub fn project_dimer(q: &mut [f64], z: f64, cv: &DimerBond, box_len: f64) -> Result<f64> {
    let d = min_image([q[0], q[1]], [q[2], q[3]], box_len);
    let r = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if !(r > 0.0) {
        return Err(Error::SingularCv(
            "dimer particles coincide before projection".into(),
        ));
    }
    let xi = (r - cv.r0) / (2.0 * cv.w);
    let dlambda = 2.0 * cv.w * cv.w * (z - xi);
    let s = cv.bond_length(z) / r;
    if (s * d[0]).abs() >= 0.5 * box_len || (s * d[1]).abs() >= 0.5 * box_len {
        return Err(Error::Domain(format!(
            "bond at xi = {z} leaves the minimum-image cell"
        )));
    }
    let (x2, y2) = (q[2], q[3]);
    q[0] = x2 + 0.5 * (1.0 + s) * d[0];
    q[1] = y2 + 0.5 * (1.0 + s) * d[1];
    q[2] = x2 + 0.5 * (1.0 - s) * d[0];
    q[3] = y2 + 0.5 * (1.0 - s) * d[1];
    wrap_all(&mut q[..4], box_len);
    Ok(dlambda)
}

/// One predictor-corrector step on `xi = z`: Euler-Maruyama proposal, then
/// projection of the dimer. `grad_v` must hold `grad V(q)`; `gauss` is the
/// noise (zeros for the noiseless variant). Returns the multiplier, or
/// `None` when the proposal cannot be projected onto the level set; `q` is
/// then left unchanged, which reflects the dynamics at the ends of the
/// level set.
pub fn constrained_step(
    model: &SystemModel,
    cv: &DimerBond,
    q: &mut [f64],
    grad_v: &[f64],
    z: f64,
    dt: f64,
    gauss: &[f64],
) -> Result<Option<f64>> {
    let sd = (2.0 * dt / model.beta()).sqrt();
    let mut y: Vec<f64> = q
        .iter()
        .zip(grad_v)
        .zip(gauss)
        .map(|((x, g), n)| x - g * dt + sd * n)
        .collect();
    wrap_all(&mut y, model.box_len());
    match project_dimer(&mut y, z, cv, model.box_len()) {
        Ok(dlambda) => {
            q.copy_from_slice(&y);
            Ok(Some(dlambda))
        }
        Err(Error::Domain(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Moves particle 2 so that `xi = z`, keeping particle 1 in place.
pub fn shift_to_level(q: &mut [f64], z: f64, cv: &DimerBond, box_len: f64) -> Result<()> {
    let target = cv.bond_length(z);
    let d = min_image([q[2], q[3]], [q[0], q[1]], box_len);
    let r = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if !(r > 0.0) {
        return Err(Error::SingularCv("dimer particles coincide".into()));
    }
    // Scale along the current bond; when that would leave the minimum-image
    // cell, rotate just far enough to fit.
    let half = 0.49 * box_len;
    let mut v = [d[0] * target / r, d[1] * target / r];
    let big = usize::from(v[1].abs() > v[0].abs());
    if v[big].abs() >= half {
        let other = (target * target - half * half).sqrt();
        if other >= half {
            return Err(Error::Config(format!(
                "bond length {target} does not fit in the box"
            )));
        }
        v[big] = half.copysign(d[big]);
        v[1 - big] = other.copysign(d[1 - big]);
    }
    q[2] = q[0] + v[0];
    q[3] = q[1] + v[1];
    wrap_all(&mut q[2..4], box_len);
    Ok(())
}

/// Batch-means mean and standard error.
pub fn batch_means(samples: &[f64], n_batches: usize) -> (f64, f64) {
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let size = n / n_batches;
    if size == 0 || n_batches < 2 {
        return (mean, f64::NAN);
    }
    let means: Vec<f64> = (0..n_batches)
        .map(|b| samples[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let m = means.iter().sum::<f64>() / n_batches as f64;
    let var = means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n_batches - 1) as f64;
    (mean, (var / n_batches as f64).sqrt())
}

/// Runs all levels in ascending order, warm-starting each from the end of
/// the previous one, and integrates the mean force.
///
/// Requires the dimer collective variable; `start` defaults to the lattice
/// configuration placed on the first level.
pub fn ti_run(
    model: &SystemModel,
    config: &TiConfig,
    start: Option<Configuration>,
) -> Result<TiResult> {
    ti_run_with(model, config, start, |_, _| {})
}

/// [`ti_run`] calling `on_level(index, level)` as each level finishes.
pub fn ti_run_with(
    model: &SystemModel,
    config: &TiConfig,
    start: Option<Configuration>,
    mut on_level: impl FnMut(usize, &TiLevel),
) -> Result<TiResult> {
    config.validate()?;
    let params = &model.params;
    let cv = DimerBond::new(params);
    let box_len = params.box_len;
    let beta = params.beta;
    let mut q = start
        .unwrap_or_else(|| lattice_config_at(params, config.level(0)))
        .into_coords();
    if q.len() != model.dim() {
        return Err(Error::Config(
            "start configuration has the wrong dimension".into(),
        ));
    }
    let d = q.len();
    let mut rng = chain_rng(config.seed);
    let mut gauss = vec![0.0; d];
    let mut grad_v = vec![0.0; d];
    let n_steps = config.steps_per_level();
    let burn = config.burn_in_steps();
    let mut samples = Vec::with_capacity(n_steps - burn);
    let mut levels = Vec::with_capacity(config.grid.n_bins);
    for i in 0..config.grid.n_bins {
        let z = config.level(i);
        shift_to_level(&mut q, z, &cv, box_len)?;
        samples.clear();
        let mut rejected = 0;
        model.energy_and_gradient(&q, &mut grad_v)?;
        for step in 0..n_steps {
            if config.thermal_noise {
                fill_gaussian(&mut rng, &mut gauss);
            }
            if constrained_step(model, &cv, &mut q, &grad_v, z, config.dt, &gauss)?.is_some() {
                model.energy_and_gradient(&q, &mut grad_v)?;
            } else {
                rejected += 1;
            }
            if step >= burn {
                let e = model.cv_eval(&q)?;
                samples.push(local_mean_force_const_norm(&grad_v, &e, beta));
            }
        }
        let (mean, se) = batch_means(&samples, config.n_batches);
        let level = TiLevel {
            z,
            mean_force: mean,
            std_err: se,
            n_samples: samples.len(),
            n_rejected: rejected,
        };
        on_level(i, &level);
        levels.push(level);
    }
    let (mean_force, free_energy) = TiResult::profiles(&levels)?;
    Ok(TiResult {
        levels,
        mean_force,
        free_energy,
        final_config: Configuration::new(q, box_len)?,
    })
}
