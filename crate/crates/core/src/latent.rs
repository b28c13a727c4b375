//! Latent space of the collective variable: binning, running conditional
//! averages, piecewise-constant profiles (free energy, mean force, effective
//! drift and diffusion) and the one-dimensional effective dynamics.

use std::fmt::Debug;
use std::io::{Read, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CvEval;

/// Uniform binning of `[z_min, z_max)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentGrid {
    pub z_min: f64,
    pub z_max: f64,
    pub n_bins: usize,
}

impl LatentGrid {
    pub fn new(z_min: f64, z_max: f64, n_bins: usize) -> Result<Self> {
        if !(z_min.is_finite() && z_max.is_finite() && z_min < z_max) {
            return Err(Error::Config(format!(
                "latent grid needs z_min < z_max, got [{z_min}, {z_max}]"
            )));
        }
        if n_bins == 0 {
            return Err(Error::Config("latent grid needs at least one bin".into()));
        }
        Ok(Self {
            z_min,
            z_max,
            n_bins,
        })
    }

    /// `[-0.2, 1.225]` split into `n_bins` bins.
    pub fn dimer_default(n_bins: usize) -> Self {
        Self::new(-0.2, 1.225, n_bins).expect("valid default grid")
    }

    pub fn width(&self) -> f64 {
        (self.z_max - self.z_min) / self.n_bins as f64
    }

    /// Bin holding `z`; bins are left-closed, so `z_max` itself is outside.
    #[inline]
    pub fn bin_index(&self, z: f64) -> Option<usize> {
        if !(z >= self.z_min && z < self.z_max) {
            return None;
        }
        let i = ((z - self.z_min) / self.width()).floor() as usize;
        // rounding can push values just below z_max into bin n_bins
        Some(i.min(self.n_bins - 1))
    }

    pub fn left_edge(&self, i: usize) -> f64 {
        self.z_min + i as f64 * self.width()
    }

    pub fn center(&self, i: usize) -> f64 {
        self.z_min + (i as f64 + 0.5) * self.width()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_bins).map(|i| self.center(i)).collect()
    }
}

/// Running per-bin average of an observable.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedEstimator {
    grid: LatentGrid,
    sums: Vec<f64>,
    counts: Vec<u64>,
    default_value: f64,
    n_min: u64,
}

impl BinnedEstimator {
    /// `default_value` is reported for bins with fewer than `n_min` samples.
    pub fn new(grid: LatentGrid, default_value: f64, n_min: u64) -> Self {
        Self {
            grid,
            sums: vec![0.0; grid.n_bins],
            counts: vec![0; grid.n_bins],
            default_value,
            n_min,
        }
    }

    pub fn grid(&self) -> &LatentGrid {
        &self.grid
    }

    /// Adds `value` to the bin of `z`; ignored when `z` is off the grid.
    #[inline]
    pub fn accumulate(&mut self, z: f64, value: f64) {
        if let Some(i) = self.grid.bin_index(z) {
            self.sums[i] += value;
            self.counts[i] += 1;
        }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn sums(&self) -> &[f64] {
        &self.sums
    }

    /// Plain sample mean, `None` for an empty bin.
    pub fn mean(&self, i: usize) -> Option<f64> {
        (self.counts[i] > 0).then(|| self.sums[i] / self.counts[i] as f64)
    }

    /// Sample mean, or the default when the bin is under-visited.
    pub fn estimate(&self, i: usize) -> f64 {
        if self.counts[i] >= self.n_min.max(1) {
            self.sums[i] / self.counts[i] as f64
        } else {
            self.default_value
        }
    }

    /// Estimate at `z`, the default off the grid.
    pub fn estimate_at(&self, z: f64) -> f64 {
        self.grid
            .bin_index(z)
            .map_or(self.default_value, |i| self.estimate(i))
    }

    /// Snapshot of the current estimates.
    pub fn to_profile(&self) -> Profile {
        Profile {
            grid: self.grid,
            values: (0..self.grid.n_bins).map(|i| self.estimate(i)).collect(),
            counts: self.counts.clone(),
            outside: Outside::Value(self.default_value),
        }
    }
}

/// How a profile is extended beyond its grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outside {
    /// Value of the nearest boundary bin (continuous extension).
    Boundary,
    /// A fixed value.
    Value(f64),
}

/// Piecewise-constant function on a latent grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub grid: LatentGrid,
    pub values: Vec<f64>,
    /// Samples behind each value; zero when not applicable.
    pub counts: Vec<u64>,
    pub outside: Outside,
}

impl Profile {
    pub fn new(grid: LatentGrid, values: Vec<f64>, outside: Outside) -> Result<Self> {
        if values.len() != grid.n_bins {
            return Err(Error::Config(format!(
                "profile has {} values for {} bins",
                values.len(),
                grid.n_bins
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("profile value {v} is not finite")));
        }
        let counts = vec![0; grid.n_bins];
        Ok(Self {
            grid,
            values,
            counts,
            outside,
        })
    }

    pub fn constant(grid: LatentGrid, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.n_bins],
            counts: vec![0; grid.n_bins],
            outside: Outside::Value(value),
        }
    }

    pub fn with_counts(mut self, counts: Vec<u64>) -> Self {
        assert_eq!(counts.len(), self.grid.n_bins);
        self.counts = counts;
        self
    }

    #[inline]
    pub fn eval(&self, z: f64) -> f64 {
        match self.grid.bin_index(z) {
            Some(i) => self.values[i],
            None => match self.outside {
                Outside::Value(v) => v,
                Outside::Boundary => {
                    if z < self.grid.z_min {
                        self.values[0]
                    } else {
                        self.values[self.grid.n_bins - 1]
                    }
                }
            },
        }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Writes `bin_index,z_center,value,count`, preceded by `comment` lines
    /// prefixed with `#`.
    pub fn write_csv<W: Write>(&self, mut out: W, comment: &[String]) -> Result<()> {
        write_comments(&mut out, comment)?;
        let mut w = csv::Writer::from_writer(out);
        for (i, (&value, &count)) in self.values.iter().zip(&self.counts).enumerate() {
            w.serialize(ProfileRow {
                bin_index: i,
                z_center: self.grid.center(i),
                value,
                count,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a profile written by [`Profile::write_csv`]. The grid is
    /// reconstructed from the bin centers.
    pub fn read_csv<R: Read>(input: R, outside: Outside) -> Result<Self> {
        let rows: Vec<ProfileRow> = read_table(input, PROFILE_HEADER)?;
        let mut centers = Vec::with_capacity(rows.len());
        let mut values = Vec::with_capacity(rows.len());
        let mut counts = Vec::with_capacity(rows.len());
        for (i, row) in rows.into_iter().enumerate() {
            if row.bin_index != i {
                return Err(Error::Parse(format!("row {}: bins out of order", i + 1)));
            }
            centers.push(row.z_center);
            values.push(row.value);
            counts.push(row.count);
        }
        let grid = grid_from_centers(&centers)?;
        Ok(Profile::new(grid, values, outside)?.with_counts(counts))
    }
}

const PROFILE_HEADER: &[&str] = &["bin_index", "z_center", "value", "count"];

#[derive(Debug, Serialize, Deserialize)]
struct ProfileRow {
    bin_index: usize,
    z_center: f64,
    value: f64,
    count: u64,
}

/// Writes `# ` comment lines ahead of a table.
pub fn write_comments<W: Write>(out: &mut W, comment: &[String]) -> Result<()> {
    for c in comment {
        writeln!(out, "# {c}")?;
    }
    Ok(())
}

/// Reads a CSV table with `#` comments after checking its header.
pub fn read_table<R: Read, T: DeserializeOwned>(input: R, header: &[&str]) -> Result<Vec<T>> {
    let mut rd = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(input);
    let found: Vec<&str> = rd.headers()?.iter().collect();
    if found != header {
        return Err(Error::Parse(format!(
            "expected header `{}`, found `{}`",
            header.join(","),
            found.join(",")
        )));
    }
    Ok(rd
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()?)
}

/// The grid whose bin midpoints are `centers`.
pub fn grid_from_centers(centers: &[f64]) -> Result<LatentGrid> {
    match centers.len() {
        0 => Err(Error::Parse("table has no rows".into())),
        1 => Err(Error::Parse(
            "cannot infer the bin width from one row".into(),
        )),
        n => {
            let dz = (centers[n - 1] - centers[0]) / (n - 1) as f64;
            for (i, c) in centers.iter().enumerate() {
                let expect = centers[0] + i as f64 * dz;
                if (c - expect).abs() > 1e-9 * (1.0 + dz.abs()) {
                    return Err(Error::Parse("bin centers are not evenly spaced".into()));
                }
            }
            LatentGrid::new(centers[0] - 0.5 * dz, centers[n - 1] + 0.5 * dz, n)
        }
    }
}

/// Latent functions entering the diffusion: free energy `F`, mean force
/// `F'`, effective diffusion `sigma^2` and effective drift `b`.
pub trait LatentModel: Send + Sync + Debug {
    fn free_energy(&self, z: f64) -> f64;
    fn mean_force(&self, z: f64) -> f64;
    fn eff_diffusion(&self, z: f64) -> f64;
    fn eff_drift(&self, z: f64) -> f64;
}

/// Tabulated latent functions sharing one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSet {
    pub free_energy: Profile,
    pub mean_force: Profile,
    pub eff_diffusion: Profile,
    pub eff_drift: Profile,
}

impl ProfileSet {
    /// `F = 0`, `F' = 0`, `sigma^2 = 1`, `b = 0`.
    pub fn flat(grid: LatentGrid) -> Self {
        Self {
            free_energy: Profile::constant(grid, 0.0),
            mean_force: Profile::constant(grid, 0.0),
            eff_diffusion: Profile::constant(grid, 1.0),
            eff_drift: Profile::constant(grid, 0.0),
        }
    }

    /// Builds the set from a mean-force profile and a constant effective
    /// diffusion, with `b = -sigma^2 F'`.
    pub fn from_mean_force(mean_force: Profile, sigma2: f64) -> Self {
        let grid = mean_force.grid;
        let free_energy = integrate_mean_force(&mean_force);
        let drift: Vec<f64> = mean_force.values.iter().map(|f| -sigma2 * f).collect();
        let eff_drift = Profile {
            grid,
            values: drift,
            counts: mean_force.counts.clone(),
            outside: Outside::Value(0.0),
        };
        Self {
            free_energy,
            mean_force: Profile {
                outside: Outside::Value(0.0),
                ..mean_force
            },
            eff_diffusion: Profile::constant(grid, sigma2),
            eff_drift,
        }
    }

    pub fn grid(&self) -> &LatentGrid {
        &self.free_energy.grid
    }
}

impl LatentModel for ProfileSet {
    fn free_energy(&self, z: f64) -> f64 {
        self.free_energy.eval(z)
    }
    fn mean_force(&self, z: f64) -> f64 {
        self.mean_force.eval(z)
    }
    fn eff_diffusion(&self, z: f64) -> f64 {
        self.eff_diffusion.eval(z)
    }
    fn eff_drift(&self, z: f64) -> f64 {
        self.eff_drift.eval(z)
    }
}

type ScalarFn = Box<dyn Fn(f64) -> f64 + Send + Sync>;

/// Smooth latent functions given in closed form. The effective drift is
/// derived as `b = -sigma^2 F' + beta^{-1} (sigma^2)'`.
pub struct AnalyticLatent {
    pub beta: f64,
    f: ScalarFn,
    fp: ScalarFn,
    s2: ScalarFn,
    s2p: ScalarFn,
}

impl AnalyticLatent {
    pub fn new(
        beta: f64,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        fp: impl Fn(f64) -> f64 + Send + Sync + 'static,
        s2: impl Fn(f64) -> f64 + Send + Sync + 'static,
        s2p: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            beta,
            f: Box::new(f),
            fp: Box::new(fp),
            s2: Box::new(s2),
            s2p: Box::new(s2p),
        }
    }

    /// Constant effective diffusion `sigma2`.
    pub fn with_constant_sigma(
        beta: f64,
        sigma2: f64,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        fp: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self::new(beta, f, fp, move |_| sigma2, |_| 0.0)
    }
}

impl Debug for AnalyticLatent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AnalyticLatent")
            .field("beta", &self.beta)
            .finish_non_exhaustive()
    }
}

impl LatentModel for AnalyticLatent {
    fn free_energy(&self, z: f64) -> f64 {
        (self.f)(z)
    }
    fn mean_force(&self, z: f64) -> f64 {
        (self.fp)(z)
    }
    fn eff_diffusion(&self, z: f64) -> f64 {
        (self.s2)(z)
    }
    fn eff_drift(&self, z: f64) -> f64 {
        -(self.s2)(z) * (self.fp)(z) + (self.s2p)(z) / self.beta
    }
}

/// Cumulative sum `F_k = dz * sum_{j <= k} F'_j`, shifted so the minimum over
/// the grid is 0, extended by its boundary values.
pub fn integrate_mean_force(mean_force: &Profile) -> Profile {
    let dz = mean_force.grid.width();
    let mut acc = 0.0;
    let mut values: Vec<f64> = mean_force
        .values
        .iter()
        .map(|fp| {
            acc += fp * dz;
            acc
        })
        .collect();
    let m = values.iter().copied().fold(f64::INFINITY, f64::min);
    values.iter_mut().for_each(|v| *v -= m);
    Profile {
        grid: mean_force.grid,
        values,
        counts: mean_force.counts.clone(),
        outside: Outside::Boundary,
    }
}

/// `grad V . grad xi / |grad xi|^2 - beta^{-1} div(grad xi / |grad xi|^2)`.
pub fn local_mean_force(grad_v: &[f64], cv: &CvEval, beta: f64) -> f64 {
    let n = cv.grad_norm_sq;
    let div = cv.laplacian() / n - 2.0 * cv.grad_hess_grad() / (n * n);
    cv.dot(grad_v) / n - div / beta
}

/// [`local_mean_force`] for a collective variable whose gradient norm is
/// constant, where the divergence reduces to `laplacian / |grad xi|^2`.
pub fn local_mean_force_const_norm(grad_v: &[f64], cv: &CvEval, beta: f64) -> f64 {
    let n = cv.grad_norm_sq;
    (cv.dot(grad_v) - cv.laplacian() / beta) / n
}

/// `-grad V . grad xi + beta^{-1} laplacian xi`, whose conditional average is
/// the effective drift.
pub fn effective_drift_integrand(grad_v: &[f64], cv: &CvEval, beta: f64) -> f64 {
    -cv.dot(grad_v) + cv.laplacian() / beta
}

/// `|grad xi|^2`, whose conditional average is the effective diffusion.
pub fn effective_noise_integrand(cv: &CvEval) -> f64 {
    cv.grad_norm_sq
}

/// One Euler-Maruyama step of the effective dynamics under the diffusion
/// modulation `a`: drift `a b + beta^{-1} a' sigma^2`, noise
/// `sqrt(2 a sigma^2 / beta)`.
///
/// `a_and_prime` returns `(a(z), a'(z))`.
pub fn effective_sde_step(
    z: f64,
    latent: &dyn LatentModel,
    a_and_prime: impl Fn(f64) -> (f64, f64),
    beta: f64,
    dt: f64,
    gauss: f64,
) -> f64 {
    let (a, ap) = a_and_prime(z);
    let s2 = latent.eff_diffusion(z);
    let drift = a * latent.eff_drift(z) + ap * s2 / beta;
    z + drift * dt + (2.0 * dt * a * s2 / beta).sqrt() * gauss
}
