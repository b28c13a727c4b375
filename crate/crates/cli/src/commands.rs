//! The four subcommands.

use std::fs::File;
use std::io::Write;
use std::sync::Arc;

use serde::Serialize;

use cvdiff::harness::{
    rejection_stats, sweep, tau_star, write_rejection_table, write_sweep_csv, ExperimentSetup,
    MarkovChain, MetastableClassifier, Scheme, StepOutcome, SweepGrid, TransitionRecord,
};
use cvdiff::kinetic::Hamiltonian;
use cvdiff::latent::{write_comments, LatentGrid, Outside, Profile, ProfileSet};
use cvdiff::model::lattice_config;
use cvdiff::overdamped::AdaptiveMala;
use cvdiff::rng::derive_seed;
use cvdiff::ti::{ti_run_with, write_levels_csv};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::Output;

// stream tags under the base seed
const TAG_TI: u64 = 1;
const TAG_SAMPLE: u64 = 2;
const TAG_BENCH: u64 = 3;
const TAG_REJECT: u64 = 4;

/// Reference profiles from a mean-force CSV, with the effective diffusion of
/// the dimer bond, `1 / (2 w^2)`.
fn load_profiles(config: &RunConfig) -> Result<Option<Arc<ProfileSet>>, CliError> {
    let Some(path) = &config.io.profiles else {
        return Ok(None);
    };
    let file = File::open(path)
        .map_err(|e| CliError::Config(format!("cannot open {}: {e}", path.display())))?;
    let mean_force = Profile::read_csv(file, Outside::Value(0.0))
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let w = config.system.w;
    Ok(Some(Arc::new(ProfileSet::from_mean_force(
        mean_force,
        1.0 / (2.0 * w * w),
    ))))
}

fn setup(config: &RunConfig) -> Result<ExperimentSetup, CliError> {
    let model = config.model()?;
    let profiles = load_profiles(config)?;
    let grid = match &profiles {
        Some(p) => *p.grid(),
        None => config.grid()?,
    };
    let start = lattice_config(&model.params);
    let mut s = ExperimentSetup::new(model, profiles, grid, start);
    s.convention = config.convention()?;
    s.newton = config.newton()?;
    s.mode = config.jacobian()?;
    s.gamma = config.sampler.gamma;
    s.adaptive = config.adaptive()?;
    s.adaptive.grid = grid;
    Ok(s)
}

fn needs_profiles(scheme: Scheme) -> CliError {
    CliError::Config(format!(
        "{} needs free-energy profiles: run `cvdiff ti` first and pass its mean_force.csv with --profiles",
        scheme.name()
    ))
}

pub fn ti(config: &RunConfig, out: &Output) -> Result<(), CliError> {
    let model = config.model()?;
    let tc = config.ti_config(derive_seed(config.seed, &[TAG_TI]))?;
    eprintln!(
        "ti: {} levels, dt = {}, {} steps per level",
        tc.grid.n_bins,
        tc.dt,
        tc.steps_per_level()
    );
    let result = ti_run_with(&model, &tc, None, |i, l| {
        eprintln!(
            "  level {:3} z = {:+.4} mean force {:+.4} +- {:.4} ({} rejected)",
            i, l.z, l.mean_force, l.std_err, l.n_rejected
        );
    })?;
    let note = |what: &str| {
        out.comment(&[format!(
            "{what}; dt={} time_per_level={}",
            tc.dt, tc.sim_time_per_level
        )])
    };
    out.write("mean_force.csv", |w| {
        result.mean_force.write_csv(w, &note("mean force"))
    })?;
    out.write("free_energy.csv", |w| {
        result
            .free_energy
            .write_csv(w, &note("free energy, minimum 0"))
    })?;
    out.write("ti_levels.csv", |w| {
        write_levels_csv(w, &result.levels, &note("levels"))
    })?;
    let f = &result.free_energy;
    println!(
        "free energy: F(0) = {:.4}, F(1) = {:.4}",
        f.eval(0.0),
        f.eval(1.0)
    );
    Ok(())
}

#[derive(Serialize)]
struct TrajectoryRow {
    iteration: u64,
    xi: f64,
    #[serde(rename = "V")]
    v: f64,
    accepted: bool,
    bin: Option<usize>,
}

#[derive(Serialize)]
struct DiagnosticRow {
    iteration: u64,
    xi: f64,
    #[serde(rename = "H")]
    h: f64,
    cause: &'static str,
}

#[derive(Serialize)]
struct SnapshotRow {
    iteration: u64,
    bin_index: usize,
    z_center: f64,
    value: f64,
    count: u64,
}

struct Recorder {
    stride: u64,
    grid: LatentGrid,
    traj: Vec<TrajectoryRow>,
    diag: Vec<DiagnosticRow>,
    transitions: TransitionRecord,
    classifier: MetastableClassifier,
    accepted: u64,
}

impl Recorder {
    fn observe(&mut self, n: u64, o: StepOutcome, chain: &dyn MarkovChain) {
        self.accepted += u64::from(o.is_accepted());
        self.transitions
            .observe(self.classifier.classify(chain.xi()));
        if n % self.stride != 0 {
            return;
        }
        let xi = chain.xi();
        self.traj.push(TrajectoryRow {
            iteration: n,
            xi,
            v: chain.potential(),
            accepted: o.is_accepted(),
            bin: self.grid.bin_index(xi),
        });
        self.diag.push(DiagnosticRow {
            iteration: n,
            xi,
            h: chain.energy(),
            cause: o.name(),
        });
    }
}

fn snapshot_iterations(config: &RunConfig) -> Vec<u64> {
    let s = &config.sampler;
    if s.snapshots.is_empty() {
        (1..=5)
            .map(|i| i * s.steps / 5)
            .filter(|&n| n > 0)
            .collect()
    } else {
        s.snapshots.clone()
    }
}

pub fn sample(config: &RunConfig, out: &Output) -> Result<(), CliError> {
    let scheme = config.scheme()?;
    let alpha = config.alpha()?;
    let s = setup(config)?;
    if matches!(scheme, Scheme::Rmhmc | Scheme::Rmghmc) && s.profiles.is_none() {
        return Err(needs_profiles(scheme));
    }
    let seed = derive_seed(config.seed, &[TAG_SAMPLE]);
    let dt = config.sampler.dt;
    let steps = config.sampler.steps;
    let mut rec = Recorder {
        stride: config.sampler.stride,
        grid: s.grid,
        traj: Vec::new(),
        diag: Vec::new(),
        transitions: TransitionRecord::new(usize::MAX),
        classifier: MetastableClassifier::default(),
        accepted: 0,
    };
    let mut snapshots = Vec::new();
    if scheme == Scheme::AdaptiveMala {
        let mut chain = AdaptiveMala::new(
            s.model.clone(),
            alpha,
            dt,
            s.adaptive,
            s.start.clone(),
            seed,
        )?;
        let at = snapshot_iterations(config);
        for n in 1..=steps {
            let o = MarkovChain::step(&mut chain)?;
            rec.observe(n, o, &chain);
            if at.contains(&n) {
                let f = &chain.profiles().free_energy;
                snapshots.extend((0..f.grid.n_bins).map(|i| SnapshotRow {
                    iteration: n,
                    bin_index: i,
                    z_center: f.grid.center(i),
                    value: f.values[i],
                    count: chain.mean_force_estimator().counts()[i],
                }));
            }
        }
    } else {
        let mut chain = s.build(scheme, alpha, dt, seed)?;
        for n in 1..=steps {
            let o = chain.step()?;
            rec.observe(n, o, chain.as_ref());
        }
    }
    let comment = out.comment(&[format!(
        "scheme={} alpha={alpha} dt={dt} steps={steps} stride={}",
        scheme.name(),
        config.sampler.stride
    )]);
    out.write("trajectory.csv", |w| write_rows(w, &comment, &rec.traj))?;
    out.write("diagnostics.csv", |w| write_rows(w, &comment, &rec.diag))?;
    if scheme == Scheme::AdaptiveMala {
        out.write("free_energy_snapshots.csv", |w| {
            write_rows(w, &comment, &snapshots)
        })?;
    }
    println!(
        "{} steps, acceptance {:.4}, {} transitions",
        steps,
        rec.accepted as f64 / steps.max(1) as f64,
        rec.transitions.tau_samples.len()
    );
    Ok(())
}

fn write_rows<W: Write, T: Serialize>(
    mut w: W,
    comment: &[String],
    rows: &[T],
) -> cvdiff::Result<()> {
    write_comments(&mut w, comment)?;
    let mut csv = csv::Writer::from_writer(w);
    for r in rows {
        csv.serialize(r)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn bench(config: &RunConfig, out: &Output, threads: Option<usize>) -> Result<(), CliError> {
    let scheme = config.scheme()?;
    let s = setup(config)?;
    let mut grid = scheme.default_grid();
    if let Some(a) = &config.bench.alpha_beta_h {
        grid.alpha_beta_h = a.clone();
    }
    if let Some(d) = &config.bench.dts {
        grid.dts = d.clone();
    }
    check_grid(&grid)?;
    let needs = scheme != Scheme::AdaptiveMala
        && (matches!(scheme, Scheme::Rmhmc | Scheme::Rmghmc)
            || grid.alpha_beta_h.iter().any(|&a| a != 0.0));
    if needs && s.profiles.is_none() {
        return Err(needs_profiles(scheme));
    }
    let k = config.bench.k;
    eprintln!(
        "bench: {} with {} x {} cells, K = {k}",
        scheme.name(),
        grid.alpha_beta_h.len(),
        grid.dts.len()
    );
    let cells = sweep(
        &s,
        scheme,
        &grid,
        k,
        config.bench.max_steps,
        derive_seed(config.seed, &[TAG_BENCH]),
        threads,
    )?;
    let comment = out.comment(&[format!("sweep scheme={} k={k}", scheme.name())]);
    out.write("sweep.csv", |w| write_sweep_csv(w, &cells, &comment))?;
    for (alpha, dt, tau) in tau_star(&cells) {
        println!("alpha {alpha:.4}: tau* = {tau:.1} at dt = {dt:.3e}");
    }
    let failed = cells.iter().filter(|c| c.failed()).count();
    if failed > 0 {
        eprintln!("{failed} cells failed numerically (marked in sweep.csv)");
    }
    Ok(())
}

fn check_grid(grid: &SweepGrid) -> Result<(), CliError> {
    if grid.alpha_beta_h.is_empty() || grid.dts.is_empty() {
        return Err(CliError::Config("the sweep grid is empty".into()));
    }
    if let Some(d) = grid.dts.iter().find(|d| !(**d > 0.0 && d.is_finite())) {
        return Err(CliError::Config(format!(
            "time steps must be positive, got {d}"
        )));
    }
    Ok(())
}

pub fn reject(config: &RunConfig, out: &Output) -> Result<(), CliError> {
    let s = setup(config)?;
    let cells = &config.reject.cells;
    if cells.is_empty() {
        return Err(CliError::Config("reject.cells is empty".into()));
    }
    if let Some([_, dt]) = cells.iter().find(|[_, dt]| !(*dt > 0.0 && dt.is_finite())) {
        return Err(CliError::Config(format!(
            "time steps must be positive, got {dt}"
        )));
    }
    if s.profiles.is_none() && cells.iter().any(|&[abh, _]| abh != 0.0) {
        return Err(needs_profiles(Scheme::Rmhmc));
    }
    let trials = config.reject.trials;
    let mut rows = Vec::with_capacity(cells.len());
    for (i, &[abh, dt]) in cells.iter().enumerate() {
        let alpha = s.alpha_from_abh(abh);
        let ham = Hamiltonian::new(s.model.clone(), s.spec(alpha)?);
        let stats = rejection_stats(
            &ham,
            &s.newton,
            s.mode,
            dt,
            &s.start,
            trials,
            derive_seed(config.seed, &[TAG_REJECT, i as u64]),
        )?;
        println!(
            "alpha beta h {abh}, dt {dt}: global rejection {:.4}%",
            stats.global_percent()
        );
        rows.push((Scheme::Rmhmc, alpha, dt, stats));
    }
    let comment = out.comment(&[format!(
        "one-step trials from the lattice start, trials={trials}"
    )]);
    out.write("rejections.csv", |w| {
        write_rejection_table(w, &rows, &comment)
    })?;
    Ok(())
}
