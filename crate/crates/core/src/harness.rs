//! Transition-time benchmark: metastable-state bookkeeping, `(alpha, dt)`
//! sweeps, confidence intervals and the decomposition of rejections by
//! cause.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::diffusion::{DiffusionSpec, SigmaConvention};
use crate::error::{Error, Result};
use crate::kinetic::{
    rmhmc_transition, Hamiltonian, JacobianMode, KineticParams, NewtonParams, Rmghmc, Rmhmc,
};
use crate::latent::{write_comments, LatentGrid, ProfileSet};
use crate::model::{Configuration, SystemModel};
use crate::overdamped::{AdaptiveMala, AdaptiveParams, Mala};
use crate::rng::{chain_rng, derive_seed, fill_gaussian, uniform};

/// What happened in one Metropolis-Hastings cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StepOutcome {
    Accepted,
    /// Rejected by the Metropolis test.
    Metropolis,
    FwdMomenta,
    FwdPosition,
    BwdMomenta,
    BwdPosition,
    Reversibility,
}

impl StepOutcome {
    pub const ALL: [StepOutcome; 7] = [
        StepOutcome::FwdMomenta,
        StepOutcome::FwdPosition,
        StepOutcome::BwdMomenta,
        StepOutcome::BwdPosition,
        StepOutcome::Reversibility,
        StepOutcome::Metropolis,
        StepOutcome::Accepted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StepOutcome::Accepted => "accepted",
            StepOutcome::Metropolis => "metropolis",
            StepOutcome::FwdMomenta => "fwd_momenta",
            StepOutcome::FwdPosition => "fwd_position",
            StepOutcome::BwdMomenta => "bwd_momenta",
            StepOutcome::BwdPosition => "bwd_position",
            StepOutcome::Reversibility => "reversibility",
        }
    }

    fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("listed")
    }

    pub fn is_accepted(self) -> bool {
        self == StepOutcome::Accepted
    }
}

/// A sampler advanced one Metropolis-Hastings cycle at a time.
pub trait MarkovChain {
    fn step(&mut self) -> Result<StepOutcome>;
    /// Collective variable at the current state.
    fn xi(&self) -> f64;
    /// Potential energy at the current state.
    fn potential(&self) -> f64;
    /// Total energy recorded in diagnostics; the potential unless the chain
    /// carries momenta.
    fn energy(&self) -> f64 {
        self.potential()
    }
}

/// Which metastable set a collective-variable value belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    C0,
    C1,
    Neither,
}

/// `C0 = {xi < eta}`, `C1 = {xi > 1 - eta}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetastableClassifier {
    pub eta: f64,
}

impl Default for MetastableClassifier {
    fn default() -> Self {
        Self { eta: 0.1 }
    }
}

impl MetastableClassifier {
    pub fn new(eta: f64) -> Result<Self> {
        if !(eta > 0.0 && eta < 0.5) {
            return Err(Error::Config(format!(
                "eta must lie in (0, 0.5), got {eta}"
            )));
        }
        Ok(Self { eta })
    }

    pub fn classify(&self, xi: f64) -> Region {
        if xi < self.eta {
            Region::C0
        } else if xi > 1.0 - self.eta {
            Region::C1
        } else {
            Region::Neither
        }
    }
}

/// Iteration counts between alternating entries into `C0` and `C1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    /// Set last entered (0 or 1).
    pub theta: u8,
    pub tau_samples: Vec<u64>,
    pub k_target: usize,
    since_last: u64,
}

impl TransitionRecord {
    /// Starts with the chain assigned to `C0`.
    pub fn new(k_target: usize) -> Self {
        Self {
            theta: 0,
            tau_samples: Vec::with_capacity(k_target.min(1 << 16)),
            k_target,
            since_last: 0,
        }
    }

    /// Accounts one iteration ending at `xi`; returns true on a transition.
    pub fn observe(&mut self, region: Region) -> bool {
        self.since_last += 1;
        let target = if self.theta == 0 {
            Region::C1
        } else {
            Region::C0
        };
        if region == target {
            self.tau_samples.push(self.since_last);
            self.since_last = 0;
            self.theta = 1 - self.theta;
            true
        } else {
            false
        }
    }

    pub fn done(&self) -> bool {
        self.tau_samples.len() >= self.k_target
    }
}

/// Mean with a normal-approximation 95% interval `mean +- 1.96 s / sqrt(K)`.
/// The interval is NaN for fewer than two samples.
pub fn mean_ci(samples: &[u64]) -> (f64, f64, f64) {
    let k = samples.len();
    if k == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = samples.iter().map(|&x| x as f64).sum::<f64>() / k as f64;
    if k < 2 {
        return (mean, f64::NAN, f64::NAN);
    }
    let var = samples
        .iter()
        .map(|&x| (x as f64 - mean).powi(2))
        .sum::<f64>()
        / (k - 1) as f64;
    let half = 1.96 * (var / k as f64).sqrt();
    (mean, mean - half, mean + half)
}

/// Summary of a transition experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionStats {
    pub tau_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub samples: Vec<u64>,
    pub steps: u64,
    pub accept_rate: f64,
    pub outcomes: RejectionBreakdown,
}

impl TransitionStats {
    pub fn n_transitions(&self) -> usize {
        self.samples.len()
    }
}

/// Runs `chain` until `k` transitions are seen or `max_steps` iterations
/// have been made. Rejected cycles count as iterations.
pub fn run_transitions(
    chain: &mut dyn MarkovChain,
    classifier: &MetastableClassifier,
    k: usize,
    max_steps: Option<u64>,
) -> Result<TransitionStats> {
    let mut rec = TransitionRecord::new(k);
    let mut outcomes = RejectionBreakdown::default();
    let mut steps = 0u64;
    while !rec.done() && max_steps.is_none_or(|m| steps < m) {
        let o = chain.step()?;
        outcomes.record(o);
        steps += 1;
        rec.observe(classifier.classify(chain.xi()));
    }
    let (tau_hat, ci_low, ci_high) = mean_ci(&rec.tau_samples);
    Ok(TransitionStats {
        tau_hat,
        ci_low,
        ci_high,
        samples: rec.tau_samples,
        steps,
        accept_rate: outcomes.count(StepOutcome::Accepted) as f64 / steps.max(1) as f64,
        outcomes,
    })
}

/// Counts of step outcomes; the counters partition the trials.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RejectionBreakdown {
    counts: [u64; 7],
}

impl RejectionBreakdown {
    pub fn record(&mut self, o: StepOutcome) {
        self.counts[o.index()] += 1;
    }

    pub fn count(&self, o: StepOutcome) -> u64 {
        self.counts[o.index()]
    }

    pub fn trials(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rejections(&self) -> u64 {
        self.trials() - self.count(StepOutcome::Accepted)
    }

    /// Share of trials, in percent.
    pub fn percent(&self, o: StepOutcome) -> f64 {
        100.0 * self.count(o) as f64 / self.trials().max(1) as f64
    }

    pub fn global_percent(&self) -> f64 {
        100.0 * self.rejections() as f64 / self.trials().max(1) as f64
    }

    pub fn merge(&mut self, other: &RejectionBreakdown) {
        for (a, b) in self.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
    }
}

/// One-step RMHMC trials, each restarted from `q0` with fresh momenta.
#[allow(clippy::too_many_arguments)]
pub fn rejection_stats(
    ham: &Hamiltonian,
    newton: &NewtonParams,
    mode: JacobianMode,
    dt: f64,
    q0: &Configuration,
    trials: u64,
    seed: u64,
) -> Result<RejectionBreakdown> {
    let start = ham.point(q0.coords().to_vec())?;
    let mut rng = chain_rng(seed);
    let mut gauss = vec![0.0; start.q.len()];
    let mut out = RejectionBreakdown::default();
    for _ in 0..trials {
        fill_gaussian(&mut rng, &mut gauss);
        let u = uniform(&mut rng);
        let (o, _) = rmhmc_transition(ham, newton, mode, dt, &start, &gauss, u)?;
        out.record(o);
    }
    Ok(out)
}

/// `n` points evenly spaced in log scale with exact end points.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n)
            .map(|i| {
                if i == 0 {
                    lo
                } else if i == n - 1 {
                    hi
                } else {
                    (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp()
                }
            })
            .collect(),
    }
}

/// `0, step, 2 step, ..., max` (inclusive, up to rounding).
pub fn linear_grid(max: f64, step: f64) -> Vec<f64> {
    let n = (max / step + 1e-9).floor() as usize;
    (0..=n)
        .map(|i| (i as f64 * step * 1e10).round() / 1e10)
        .collect()
}

/// Sampler families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    Mala,
    AdaptiveMala,
    Rmhmc,
    Rmghmc,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Mala => "mala",
            Scheme::AdaptiveMala => "adaptive-mala",
            Scheme::Rmhmc => "rmhmc",
            Scheme::Rmghmc => "rmghmc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mala" => Ok(Scheme::Mala),
            "adaptive-mala" => Ok(Scheme::AdaptiveMala),
            "rmhmc" => Ok(Scheme::Rmhmc),
            "rmghmc" => Ok(Scheme::Rmghmc),
            other => Err(Error::Config(format!(
                "unknown scheme `{other}` (expected mala, adaptive-mala, rmhmc or rmghmc)"
            ))),
        }
    }

    /// Default grid of `(alpha beta h, dt)` values for this scheme.
    pub fn default_grid(self) -> SweepGrid {
        let (max_abh, lo, hi) = match self {
            Scheme::Mala | Scheme::AdaptiveMala => (3.1, 1e-3, 5e-3),
            Scheme::Rmhmc => (1.5, 5e-2, 1.5e-1),
            Scheme::Rmghmc => (2.4, 1e-2, 1e-1),
        };
        SweepGrid {
            alpha_beta_h: linear_grid(max_abh, 0.1),
            dts: log_spaced(lo, hi, 16),
        }
    }
}

/// Cartesian grid of a sweep. Diffusion strengths are given as
/// `alpha beta h`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub alpha_beta_h: Vec<f64>,
    pub dts: Vec<f64>,
}

/// Everything needed to build a chain for any scheme.
#[derive(Debug, Clone)]
pub struct ExperimentSetup {
    pub model: SystemModel,
    /// Reference latent profiles; required by every scheme except MALA at
    /// `alpha = 0` and adaptive MALA.
    pub profiles: Option<Arc<ProfileSet>>,
    pub grid: LatentGrid,
    pub convention: SigmaConvention,
    pub newton: NewtonParams,
    pub mode: JacobianMode,
    pub gamma: f64,
    pub adaptive: AdaptiveParams,
    pub start: Configuration,
}

impl ExperimentSetup {
    pub fn new(
        model: SystemModel,
        profiles: Option<Arc<ProfileSet>>,
        grid: LatentGrid,
        start: Configuration,
    ) -> Self {
        Self {
            model,
            profiles,
            grid,
            convention: SigmaConvention::Unit,
            newton: NewtonParams::default(),
            mode: JacobianMode::Block,
            gamma: 1.0,
            adaptive: AdaptiveParams::new(grid),
            start,
        }
    }

    /// `alpha` from `alpha beta h`.
    pub fn alpha_from_abh(&self, abh: f64) -> f64 {
        abh / (self.model.params.beta * self.model.params.barrier_h)
    }

    /// Normalized diffusion for `alpha`; the identity when no profiles are
    /// loaded and `alpha = 0`.
    pub fn spec(&self, alpha: f64) -> Result<DiffusionSpec> {
        match &self.profiles {
            Some(p) => DiffusionSpec::normalized(
                alpha,
                self.model.beta(),
                p.clone(),
                self.convention,
                &self.grid,
                self.model.dim(),
            ),
            None if alpha == 0.0 => Ok(DiffusionSpec::identity(self.model.beta())),
            None => Err(Error::Config(
                "alpha > 0 needs free-energy profiles: run the `ti` command first or use adaptive-mala"
                    .into(),
            )),
        }
    }

    pub fn build(
        &self,
        scheme: Scheme,
        alpha: f64,
        dt: f64,
        seed: u64,
    ) -> Result<Box<dyn MarkovChain + Send>> {
        let q0 = self.start.clone();
        Ok(match scheme {
            Scheme::Mala => Box::new(Mala::new(
                self.model.clone(),
                self.spec(alpha)?,
                dt,
                q0,
                seed,
            )?),
            Scheme::AdaptiveMala => Box::new(AdaptiveMala::new(
                self.model.clone(),
                alpha,
                dt,
                self.adaptive,
                q0,
                seed,
            )?),
            Scheme::Rmhmc | Scheme::Rmghmc => {
                if self.profiles.is_none() {
                    return Err(Error::Config(
                        "Hamiltonian schemes need free-energy profiles: run the `ti` command first"
                            .into(),
                    ));
                }
                let ham = Hamiltonian::new(self.model.clone(), self.spec(alpha)?);
                let kp = KineticParams {
                    dt,
                    newton: self.newton,
                    mode: self.mode,
                };
                if scheme == Scheme::Rmhmc {
                    Box::new(Rmhmc::new(ham, kp, q0, seed)?)
                } else {
                    Box::new(Rmghmc::new(ham, kp, self.gamma, q0, seed)?)
                }
            }
        })
    }
}

/// One cell of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub scheme: Scheme,
    pub alpha: f64,
    pub dt: f64,
    /// `None` when the run aborted numerically.
    pub stats: Option<TransitionStats>,
    pub error: Option<String>,
}

impl SweepCell {
    pub fn failed(&self) -> bool {
        self.stats.is_none()
    }

    pub fn tau_hat(&self) -> f64 {
        self.stats.as_ref().map_or(f64::NAN, |s| s.tau_hat)
    }
}

/// Per-cell seed, independent of scheduling.
pub fn cell_seed(base: u64, scheme: Scheme, alpha_index: usize, dt_index: usize) -> u64 {
    derive_seed(base, &[scheme as u64, alpha_index as u64, dt_index as u64])
}

/// Runs every `(alpha beta h, dt)` cell in parallel on `threads` workers
/// (all available when `None`). Cells whose chain overflows are reported as
/// failed.
pub fn sweep(
    setup: &ExperimentSetup,
    scheme: Scheme,
    grid: &SweepGrid,
    k: usize,
    max_steps: Option<u64>,
    base_seed: u64,
    threads: Option<usize>,
) -> Result<Vec<SweepCell>> {
    let classifier = MetastableClassifier::default();
    let jobs: Vec<(usize, usize)> = (0..grid.alpha_beta_h.len())
        .flat_map(|i| (0..grid.dts.len()).map(move |j| (i, j)))
        .collect();
    let run = |&(i, j): &(usize, usize)| -> Result<SweepCell> {
        let alpha = setup.alpha_from_abh(grid.alpha_beta_h[i]);
        let dt = grid.dts[j];
        let seed = cell_seed(base_seed, scheme, i, j);
        let outcome = setup
            .build(scheme, alpha, dt, seed)
            .and_then(|mut chain| run_transitions(chain.as_mut(), &classifier, k, max_steps));
        match outcome {
            Ok(stats) => Ok(SweepCell {
                scheme,
                alpha,
                dt,
                stats: Some(stats),
                error: None,
            }),
            Err(e) if e.is_numerical() => Ok(SweepCell {
                scheme,
                alpha,
                dt,
                stats: None,
                error: Some(e.to_string()),
            }),
            Err(e) => Err(e),
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| jobs.par_iter().map(run).collect())
}

/// `(alpha, dt*, tau*)` with the smallest `tau_hat` over `dt` for each
/// `alpha`, skipping failed cells.
pub fn tau_star(cells: &[SweepCell]) -> Vec<(f64, f64, f64)> {
    let mut alphas: Vec<f64> = cells.iter().map(|c| c.alpha).collect();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    alphas
        .into_iter()
        .filter_map(|a| {
            cells
                .iter()
                .filter(|c| c.alpha == a && !c.failed() && c.tau_hat().is_finite())
                .min_by(|x, y| x.tau_hat().total_cmp(&y.tau_hat()))
                .map(|c| (a, c.dt, c.tau_hat()))
        })
        .collect()
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

#[derive(Serialize)]
struct SweepRow<'a> {
    scheme: &'a str,
    alpha: f64,
    dt: f64,
    tau_hat: f64,
    ci_low: f64,
    ci_high: f64,
    n_transitions: usize,
    accept_rate: f64,
    failed: bool,
}

/// Writes the sweep table, one row per cell.
pub fn write_sweep_csv<W: Write>(
    mut out: W,
    cells: &[SweepCell],
    comment: &[String],
) -> Result<()> {
    write_comments(&mut out, comment)?;
    let mut w = csv::Writer::from_writer(out);
    for c in cells {
        let row = match &c.stats {
            Some(s) => SweepRow {
                scheme: c.scheme.name(),
                alpha: c.alpha,
                dt: c.dt,
                tau_hat: s.tau_hat,
                ci_low: s.ci_low,
                ci_high: s.ci_high,
                n_transitions: s.n_transitions(),
                accept_rate: s.accept_rate,
                failed: false,
            },
            None => SweepRow {
                scheme: c.scheme.name(),
                alpha: c.alpha,
                dt: c.dt,
                tau_hat: f64::NAN,
                ci_low: f64::NAN,
                ci_high: f64::NAN,
                n_transitions: 0,
                accept_rate: f64::NAN,
                failed: true,
            },
        };
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct RejectionRow<'a> {
    scheme: &'a str,
    alpha: f64,
    dt: f64,
    category: &'a str,
    count: u64,
    percent: f64,
}

/// Writes one row per outcome category, then a `global` row with all
/// rejections.
pub fn write_rejection_csv<W: Write>(
    out: W,
    scheme: Scheme,
    alpha: f64,
    dt: f64,
    stats: &RejectionBreakdown,
    comment: &[String],
) -> Result<()> {
    write_rejection_table(out, &[(scheme, alpha, dt, *stats)], comment)
}

/// [`write_rejection_csv`] for several `(scheme, alpha, dt)` cells in one
/// table.
pub fn write_rejection_table<W: Write>(
    mut out: W,
    cells: &[(Scheme, f64, f64, RejectionBreakdown)],
    comment: &[String],
) -> Result<()> {
    write_comments(&mut out, comment)?;
    let mut w = csv::Writer::from_writer(out);
    for &(scheme, alpha, dt, ref stats) in cells {
        let row = |category, count, percent| RejectionRow {
            scheme: scheme.name(),
            alpha,
            dt,
            category,
            count,
            percent,
        };
        for o in StepOutcome::ALL {
            w.serialize(row(o.name(), stats.count(o), stats.percent(o)))?;
        }
        w.serialize(row("global", stats.rejections(), stats.global_percent()))?;
    }
    w.flush()?;
    Ok(())
}
