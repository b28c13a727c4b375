//! Run configuration: the `paper-dimer` preset, TOML files and overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cvdiff::diffusion::SigmaConvention;
use cvdiff::harness::Scheme;
use cvdiff::kinetic::{JacobianMode, NewtonParams};
use cvdiff::latent::LatentGrid;
use cvdiff::model::{SystemModel, SystemParams};
use cvdiff::overdamped::AdaptiveParams;
use cvdiff::ti::TiConfig;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Base seed; every chain, cell and TI run derives its own stream.
    pub seed: u64,
    pub system: SystemSection,
    pub grid: GridSection,
    pub sampler: SamplerSection,
    pub newton: NewtonSection,
    pub adaptive: AdaptiveSection,
    pub ti: TiSection,
    pub bench: BenchSection,
    pub reject: RejectSection,
    pub io: IoSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            system: SystemSection::default(),
            grid: GridSection::default(),
            sampler: SamplerSection::default(),
            newton: NewtonSection::default(),
            adaptive: AdaptiveSection::default(),
            ti: TiSection::default(),
            bench: BenchSection::default(),
            reject: RejectSection::default(),
            io: IoSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemSection {
    pub n_particles: usize,
    /// Particles per unit area; sets the box side.
    pub density: f64,
    pub beta: f64,
    pub eps: f64,
    pub r_cap: f64,
    pub w: f64,
    pub h: f64,
}

impl Default for SystemSection {
    fn default() -> Self {
        let p = SystemParams::paper_dimer();
        Self {
            n_particles: p.n_particles,
            density: 0.7,
            beta: p.beta,
            eps: p.eps,
            r_cap: p.r_cap,
            w: p.w,
            h: p.barrier_h,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub z_min: f64,
    pub z_max: f64,
    pub n_bins: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        let g = LatentGrid::dimer_default(100);
        Self {
            z_min: g.z_min,
            z_max: g.z_max,
            n_bins: g.n_bins,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    /// `mala`, `adaptive-mala`, `rmhmc` or `rmghmc`.
    pub scheme: String,
    pub alpha: Option<f64>,
    /// Alternative to `alpha`: `alpha beta h`.
    pub alpha_beta_h: Option<f64>,
    pub dt: f64,
    pub steps: u64,
    /// Rows are written every `stride` iterations.
    pub stride: u64,
    pub gamma: f64,
    /// `unit` or `profile`.
    pub convention: String,
    /// `block` or `dense`.
    pub jacobian: String,
    /// Iterations at which adaptive runs record the learned free energy;
    /// five evenly spaced ones when empty.
    pub snapshots: Vec<u64>,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            scheme: "mala".into(),
            alpha: None,
            alpha_beta_h: None,
            dt: 2.6e-3,
            steps: 60_000,
            stride: 1,
            gamma: 1.0,
            convention: "unit".into(),
            jacobian: "block".into(),
            snapshots: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewtonSection {
    pub max_iter: usize,
    pub tol_cauchy: f64,
    pub tol_root: f64,
    pub tol_rev: f64,
}

impl Default for NewtonSection {
    fn default() -> Self {
        let n = NewtonParams::default();
        Self {
            max_iter: n.max_iter,
            tol_cauchy: n.tol_cauchy,
            tol_root: n.tol_root,
            tol_rev: n.tol_rev,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptiveSection {
    pub n_min: u64,
    pub n_update: u64,
    pub freeze_after: Option<u64>,
}

impl Default for AdaptiveSection {
    fn default() -> Self {
        let a = AdaptiveParams::new(LatentGrid::dimer_default(100));
        Self {
            n_min: a.n_min,
            n_update: a.n_update,
            freeze_after: a.freeze_after,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TiSection {
    pub dt: f64,
    pub time_per_level: f64,
    pub burn_in_fraction: f64,
    pub n_batches: usize,
}

impl Default for TiSection {
    fn default() -> Self {
        let t = TiConfig::paper(0);
        Self {
            dt: t.dt,
            time_per_level: t.sim_time_per_level,
            burn_in_fraction: t.burn_in_fraction,
            n_batches: t.n_batches,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    /// Transitions per cell.
    pub k: usize,
    pub max_steps: Option<u64>,
    /// Override of the scheme's default `alpha beta h` values.
    pub alpha_beta_h: Option<Vec<f64>>,
    /// Override of the scheme's default time steps.
    pub dts: Option<Vec<f64>>,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            k: 100_000,
            max_steps: None,
            alpha_beta_h: None,
            dts: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RejectSection {
    pub trials: u64,
    /// `[alpha beta h, dt]` pairs.
    pub cells: Vec<[f64; 2]>,
}

impl Default for RejectSection {
    fn default() -> Self {
        Self {
            trials: 1_000_000,
            cells: vec![
                [0.0, 1.0e-1],
                [0.5, 9.7e-2],
                [0.9, 1.0e-1],
                [1.5, 9.0e-2],
                [2.0, 8.3e-2],
            ],
        }
    }
}

/// Paths. Left out of the config hash, except for the content of the
/// profile file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoSection {
    /// Mean-force CSV written by `cvdiff ti`.
    pub profiles: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for IoSection {
    fn default() -> Self {
        Self {
            profiles: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

/// Recursive merge of `over` into `base`; tables merge, other values replace.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Turns `section.key=value` into a one-entry table. The value is read as a
/// TOML value, falling back to a string.
fn parse_assignment(s: &str) -> Result<toml::Table, CliError> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("`{s}` is not of the form key=value")))?;
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("just parsed"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| CliError::Config(format!("empty key in `{s}`")))?;
    let mut table = toml::Table::new();
    table.insert(last.to_string(), value);
    for p in parts.into_iter().rev() {
        let mut outer = toml::Table::new();
        outer.insert(p.to_string(), toml::Value::Table(table));
        table = outer;
    }
    Ok(table)
}

impl RunConfig {
    /// The named preset; only `paper-dimer` exists.
    pub fn preset(name: &str) -> Result<Self, CliError> {
        match name {
            "paper-dimer" => Ok(Self::default()),
            other => Err(CliError::Config(format!(
                "unknown preset `{other}` (available: paper-dimer)"
            ))),
        }
    }

    /// Preset, then the file, then `key=value` assignments.
    pub fn load(preset: &str, file: Option<&Path>, sets: &[String]) -> Result<Self, CliError> {
        let mut table = toml::Table::try_from(Self::preset(preset)?)
            .map_err(|e| CliError::Config(format!("preset: {e}")))?;
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            let over: toml::Table = text
                .parse()
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            merge(&mut table, over);
        }
        for s in sets {
            merge(&mut table, parse_assignment(s)?);
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
    }

    pub fn params(&self) -> Result<SystemParams, CliError> {
        let s = &self.system;
        if !(s.density > 0.0 && s.density.is_finite()) {
            return Err(CliError::Config(format!(
                "density must be positive, got {}",
                s.density
            )));
        }
        Ok(SystemParams::new(
            s.n_particles,
            (s.n_particles as f64 / s.density).sqrt(),
            s.beta,
            s.eps,
            s.r_cap,
            s.w,
            s.h,
        )?)
    }

    pub fn model(&self) -> Result<SystemModel, CliError> {
        Ok(SystemModel::dimer(self.params()?))
    }

    pub fn grid(&self) -> Result<LatentGrid, CliError> {
        let g = &self.grid;
        if !(g.z_min < g.z_max) {
            return Err(CliError::Config(format!(
                "grid needs z_min < z_max, got [{}, {}]",
                g.z_min, g.z_max
            )));
        }
        Ok(LatentGrid::new(g.z_min, g.z_max, g.n_bins)?)
    }

    pub fn scheme(&self) -> Result<Scheme, CliError> {
        Ok(Scheme::parse(&self.sampler.scheme)?)
    }

    /// `alpha`, given directly or as `alpha beta h`.
    pub fn alpha(&self) -> Result<f64, CliError> {
        let s = &self.sampler;
        let alpha = match (s.alpha, s.alpha_beta_h) {
            (Some(_), Some(_)) => {
                return Err(CliError::Config(
                    "give either sampler.alpha or sampler.alpha_beta_h, not both".into(),
                ))
            }
            (Some(a), None) => a,
            (None, Some(abh)) => abh / (self.system.beta * self.system.h),
            (None, None) => 0.0,
        };
        if !alpha.is_finite() {
            return Err(CliError::Config(format!(
                "alpha must be finite, got {alpha}"
            )));
        }
        Ok(alpha)
    }

    pub fn convention(&self) -> Result<SigmaConvention, CliError> {
        match self.sampler.convention.as_str() {
            "unit" => Ok(SigmaConvention::Unit),
            "profile" => Ok(SigmaConvention::Profile),
            other => Err(CliError::Config(format!(
                "unknown convention `{other}` (expected unit or profile)"
            ))),
        }
    }

    pub fn jacobian(&self) -> Result<JacobianMode, CliError> {
        match self.sampler.jacobian.as_str() {
            "block" => Ok(JacobianMode::Block),
            "dense" => Ok(JacobianMode::Dense),
            other => Err(CliError::Config(format!(
                "unknown jacobian mode `{other}` (expected block or dense)"
            ))),
        }
    }

    pub fn newton(&self) -> Result<NewtonParams, CliError> {
        let n = &self.newton;
        let params = NewtonParams {
            max_iter: n.max_iter,
            tol_cauchy: n.tol_cauchy,
            tol_root: n.tol_root,
            tol_rev: n.tol_rev,
            ..NewtonParams::default()
        };
        params.validate()?;
        Ok(params)
    }

    pub fn adaptive(&self) -> Result<AdaptiveParams, CliError> {
        let a = &self.adaptive;
        Ok(AdaptiveParams {
            n_min: a.n_min,
            n_update: a.n_update,
            freeze_after: a.freeze_after,
            convention: self.convention()?,
            ..AdaptiveParams::new(self.grid()?)
        })
    }

    pub fn ti_config(&self, seed: u64) -> Result<TiConfig, CliError> {
        let t = &self.ti;
        let config = TiConfig {
            grid: self.grid()?,
            dt: t.dt,
            sim_time_per_level: t.time_per_level,
            burn_in_fraction: t.burn_in_fraction,
            n_batches: t.n_batches,
            seed,
            thermal_noise: true,
        };
        config.validate()?;
        Ok(config)
    }

    /// Checks every section that does not depend on the command.
    pub fn validate(&self) -> Result<(), CliError> {
        self.params()?;
        self.grid()?;
        self.scheme()?;
        self.alpha()?;
        self.convention()?;
        self.jacobian()?;
        self.newton()?;
        let s = &self.sampler;
        if !(s.dt > 0.0 && s.dt.is_finite()) {
            return Err(CliError::Config(format!(
                "sampler.dt must be positive, got {}",
                s.dt
            )));
        }
        if s.stride == 0 {
            return Err(CliError::Config("sampler.stride must be at least 1".into()));
        }
        if !(s.gamma >= 0.0 && s.gamma.is_finite()) {
            return Err(CliError::Config(format!(
                "sampler.gamma must be nonnegative, got {}",
                s.gamma
            )));
        }
        if self.adaptive.n_update == 0 {
            return Err(CliError::Config(
                "adaptive.n_update must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the resolved configuration without its paths, followed by
    /// the bytes of the profile file when one is given.
    pub fn hash(&self) -> Result<String, CliError> {
        let mut bare = self.clone();
        bare.io = IoSection {
            profiles: None,
            out_dir: PathBuf::new(),
        };
        let text =
            toml::to_string(&bare).map_err(|e| CliError::Config(format!("serialize: {e}")))?;
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        if let Some(p) = &self.io.profiles {
            let bytes = fs::read(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            h.update(&bytes);
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}
