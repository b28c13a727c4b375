//! Riemann-manifold HMC and generalized HMC with the collective-variable
//! diffusion as inverse mass matrix.
//!
//! The Hamiltonian `H(q, p) = V(q) - (2 beta)^{-1} ln det D(q) + p^T D(q) p / 2`
//! is integrated by the generalized Störmer-Verlet scheme. Its two implicit
//! stages are solved by Newton's method; because every nonlinear term lives
//! on the support of the collective variable, each Newton update is a
//! `k x k` solve plus an explicit update of the other components. A step is
//! only kept when the forward and backward solves converge and the round
//! trip returns to the start; otherwise the momentum-flipped input is
//! returned.

use crate::diffusion::{DiffusionEval, DiffusionSpec, Power};
use crate::error::{Error, Result};
use crate::harness::{MarkovChain, StepOutcome};
use crate::linalg::{norm, solve_in_place};
use crate::model::{torus_dist_sq, wrap_all, Configuration, SystemModel};
use crate::rng::{chain_rng, fill_gaussian, uniform, ChainRng};

/// Newton and reversibility thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonParams {
    pub max_iter: usize,
    pub tol_cauchy: f64,
    pub tol_root: f64,
    pub tol_rev: f64,
    /// Pivots smaller than this make the Jacobian count as singular.
    pub pivot_tol: f64,
}

impl Default for NewtonParams {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol_cauchy: 1e-12,
            tol_root: 1e-12,
            tol_rev: 1e-6,
            pivot_tol: 1e-14,
        }
    }
}

impl NewtonParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::Config("Newton needs at least one iteration".into()));
        }
        for (name, v) in [
            ("tol_cauchy", self.tol_cauchy),
            ("tol_root", self.tol_root),
            ("tol_rev", self.tol_rev),
            ("pivot_tol", self.pivot_tol),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.tol_rev <= self.tol_cauchy {
            return Err(Error::Config(
                "reversibility tolerance must be looser than the Newton tolerance".into(),
            ));
        }
        Ok(())
    }
}

/// How Newton linear systems are solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum JacobianMode {
    /// `k x k` solve on the support, explicit update elsewhere.
    #[default]
    Block,
    /// Full `d x d` solve, as a reference.
    Dense,
}

/// Result status of the integrator with reversibility checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GsvStatus {
    Ok,
    FailFwdMomenta,
    FailFwdPosition,
    FailBwdMomenta,
    FailBwdPosition,
    FailReversibility,
}

impl GsvStatus {
    pub fn outcome(self) -> Option<StepOutcome> {
        match self {
            GsvStatus::Ok => None,
            GsvStatus::FailFwdMomenta => Some(StepOutcome::FwdMomenta),
            GsvStatus::FailFwdPosition => Some(StepOutcome::FwdPosition),
            GsvStatus::FailBwdMomenta => Some(StepOutcome::BwdMomenta),
            GsvStatus::FailBwdPosition => Some(StepOutcome::BwdPosition),
            GsvStatus::FailReversibility => Some(StepOutcome::Reversibility),
        }
    }
}

/// Which implicit stage failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Momenta,
    Position,
}

/// Position with cached potential, force and diffusion.
#[derive(Debug, Clone)]
pub struct PhasePoint {
    pub q: Vec<f64>,
    pub v: f64,
    pub grad_v: Vec<f64>,
    pub diff: DiffusionEval,
}

impl PhasePoint {
    pub fn xi(&self) -> f64 {
        self.diff.cv.value
    }
}

/// Output of [`Hamiltonian::gsv_rev`]: `(point, p)` is the new phase state,
/// or the momentum-flipped input on failure.
#[derive(Debug, Clone)]
pub struct GsvOutcome {
    pub point: PhasePoint,
    pub p: Vec<f64>,
    pub status: GsvStatus,
    /// Round-trip residual when both passes converged.
    pub residual: Option<f64>,
}

/// Newton solve outcome: `Ok(Some(root))`, `Ok(None)` on non-convergence.
type Solve = Result<Option<Vec<f64>>>;

/// Errors that only mean a Newton iterate left the region where the model
/// is defined count as non-convergence; overflow of the diffusion aborts.
fn soft<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e @ Error::Overflow { .. }) => Err(e),
        Err(e) if e.is_numerical() => Ok(None),
        Err(e) => Err(e),
    }
}

/// The Hamiltonian of the diffusion together with its integrator.
#[derive(Debug, Clone)]
pub struct Hamiltonian {
    pub model: SystemModel,
    pub spec: DiffusionSpec,
}

impl Hamiltonian {
    pub fn new(model: SystemModel, spec: DiffusionSpec) -> Self {
        Self { model, spec }
    }

    fn beta(&self) -> f64 {
        self.model.beta()
    }

    pub fn diffusion_at(&self, q: &[f64]) -> Result<DiffusionEval> {
        self.spec.eval(self.model.cv_eval(q)?)
    }

    pub fn point(&self, q: Vec<f64>) -> Result<PhasePoint> {
        let mut grad_v = vec![0.0; q.len()];
        let v = self.model.energy_and_gradient(&q, &mut grad_v)?;
        let diff = self.diffusion_at(&q)?;
        Ok(PhasePoint { q, v, grad_v, diff })
    }

    /// `H(q, p)`, keeping the constant `-(d / 2 beta) ln kappa`.
    pub fn energy(&self, pt: &PhasePoint, p: &[f64]) -> f64 {
        let dp = pt.diff.apply(Power::One, p);
        let pdp: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
        pt.v - pt.diff.log_det() / (2.0 * self.beta()) + 0.5 * pdp
    }

    /// `grad_p H = D(q) p`.
    pub fn grad_p(&self, diff: &DiffusionEval, p: &[f64]) -> Vec<f64> {
        diff.apply(Power::One, p)
    }

    /// `grad_q H(q, p)`.
    pub fn grad_q(&self, pt: &PhasePoint, p: &[f64]) -> Vec<f64> {
        let mut out = pt.grad_v.clone();
        self.add_grad_q_cv_terms(&pt.diff, p, 1.0, &mut out);
        out
    }

    /// `out += factor * (grad_q H - grad V)`; supported on the collective
    /// variable's coordinates.
    fn add_grad_q_cv_terms(&self, diff: &DiffusionEval, p: &[f64], factor: f64, out: &mut [f64]) {
        let cv = &diff.cv;
        let (kappa, a, ap) = (diff.kappa, diff.a, diff.a_prime);
        let n = cv.grad_norm_sq;
        let s = cv.dot(p);
        let c_grad = -0.5 * ap / (a * self.beta()) + 0.5 * kappa * s * s * ap / n;
        let c_hp = kappa * (a - 1.0) * s / n;
        let hp = cv.hess_apply(p);
        let hg = (!cv.constant_norm).then(|| cv.hess_grad());
        let c_hg = -kappa * (a - 1.0) * s * s / (n * n);
        for (idx, &i) in cv.support.iter().enumerate() {
            let mut t = c_grad * cv.grad[idx] + c_hp * hp[idx];
            if let Some(hg) = &hg {
                t += c_hg * hg[idx];
            }
            out[i] += factor * t;
        }
    }

    /// `g(p) = p - p_n + (dt / 2) grad_q H(q_n, p)`.
    fn residual_momenta(&self, pt: &PhasePoint, p_n: &[f64], p: &[f64], dt: f64) -> Vec<f64> {
        let mut r: Vec<f64> = p
            .iter()
            .zip(p_n)
            .zip(&pt.grad_v)
            .map(|((x, y), g)| x - y + 0.5 * dt * g)
            .collect();
        self.add_grad_q_cv_terms(&pt.diff, p, 0.5 * dt, &mut r);
        r
    }

    /// Jacobian of `g` minus the identity, divided by `dt / 2`, restricted
    /// to the support (`k x k`).
    fn jac_momenta_support(diff: &DiffusionEval, p: &[f64]) -> Vec<f64> {
        let cv = &diff.cv;
        let k = cv.k();
        let (kappa, a, ap) = (diff.kappa, diff.a, diff.a_prime);
        let n = cv.grad_norm_sq;
        let s = cv.dot(p);
        let hp = cv.hess_apply(p);
        let hg = if cv.constant_norm {
            vec![0.0; k]
        } else {
            cv.hess_grad()
        };
        let g = &cv.grad;
        let mut m = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                m[i * k + j] = kappa * ap * s / n * g[i] * g[j]
                    + kappa * (a - 1.0) / n * hp[i] * g[j]
                    + kappa * (a - 1.0) * s / n * cv.hess[i * k + j]
                    - 2.0 * kappa * (a - 1.0) * s / (n * n) * hg[i] * g[j];
            }
        }
        m
    }

    /// Jacobian of `q -> grad_p H(q, p)` on the support (`k x k`).
    fn jac_position_support(diff: &DiffusionEval, p: &[f64]) -> Vec<f64> {
        let cv = &diff.cv;
        let k = cv.k();
        let (kappa, a, ap) = (diff.kappa, diff.a, diff.a_prime);
        let n = cv.grad_norm_sq;
        let s = cv.dot(p);
        let hp = cv.hess_apply(p);
        let hg = if cv.constant_norm {
            vec![0.0; k]
        } else {
            cv.hess_grad()
        };
        let g = &cv.grad;
        let mut m = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                m[i * k + j] = kappa
                    * (ap * s / n * g[i] * g[j]
                        + (a - 1.0) / n * g[i] * hp[j]
                        + (a - 1.0) * s / n * cv.hess[i * k + j]
                        - 2.0 * (a - 1.0) * s / (n * n) * g[i] * hg[j]);
            }
        }
        m
    }

    /// Both Jacobians from full `d`-vectors and the full Hessian of the
    /// collective variable, ignoring its sparsity. `position` selects the
    /// transpose used by the position stage.
    fn jac_dense(diff: &DiffusionEval, p: &[f64], position: bool) -> Vec<f64> {
        let cv = &diff.cv;
        let d = cv.dim;
        let (kappa, a, ap) = (diff.kappa, diff.a, diff.a_prime);
        let g = cv.grad_full();
        let h = cv.hess_full();
        let n: f64 = g.iter().map(|x| x * x).sum();
        let s: f64 = g.iter().zip(p).map(|(x, y)| x * y).sum();
        let hv = |v: &[f64]| -> Vec<f64> {
            (0..d)
                .map(|i| (0..d).map(|j| h[i * d + j] * v[j]).sum())
                .collect()
        };
        let (hp, hg) = (hv(p), hv(&g));
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                // d/dp_j of (grad_q H)_i, or its transpose
                let (r, c) = if position { (j, i) } else { (i, j) };
                m[i * d + j] = kappa * ap * s / n * g[r] * g[c]
                    + kappa * (a - 1.0) / n * hp[r] * g[c]
                    + kappa * (a - 1.0) * s / n * h[r * d + c]
                    - 2.0 * kappa * (a - 1.0) * s / (n * n) * hg[r] * g[c];
            }
        }
        m
    }

    /// Solves `(I + c M) u = rhs`, either on the support of the collective
    /// variable with the block Jacobian or as a full `d x d` system.
    fn solve_update(
        diff: &DiffusionEval,
        p: &[f64],
        c: f64,
        rhs: &[f64],
        mode: JacobianMode,
        position: bool,
        pivot_tol: f64,
    ) -> Option<Vec<f64>> {
        let support = &diff.cv.support;
        let k = support.len();
        match mode {
            JacobianMode::Block => {
                let m = if position {
                    Self::jac_position_support(diff, p)
                } else {
                    Self::jac_momenta_support(diff, p)
                };
                let mut u = rhs.to_vec();
                let mut a: Vec<f64> = m.iter().map(|x| c * x).collect();
                for i in 0..k {
                    a[i * k + i] += 1.0;
                }
                let mut b: Vec<f64> = support.iter().map(|&i| rhs[i]).collect();
                if !solve_in_place(&mut a, &mut b, k, pivot_tol) {
                    return None;
                }
                for (&i, x) in support.iter().zip(b) {
                    u[i] = x;
                }
                Some(u)
            }
            JacobianMode::Dense => {
                let d = rhs.len();
                let mut a: Vec<f64> = Self::jac_dense(diff, p, position)
                    .iter()
                    .map(|x| c * x)
                    .collect();
                for i in 0..d {
                    a[i * d + i] += 1.0;
                }
                let mut b = rhs.to_vec();
                solve_in_place(&mut a, &mut b, d, pivot_tol).then_some(b)
            }
        }
    }

    /// Solves `p = p_n - (dt / 2) grad_q H(q_n, p)`. Every Newton iterate is
    /// pushed to `trace` when given.
    pub fn newton_momenta(
        &self,
        pt: &PhasePoint,
        p_n: &[f64],
        dt: f64,
        np: &NewtonParams,
        mode: JacobianMode,
        mut trace: Option<&mut Vec<Vec<f64>>>,
    ) -> Solve {
        let mut p = p_n.to_vec();
        for (x, g) in p.iter_mut().zip(self.grad_q(pt, p_n)) {
            *x -= 0.5 * dt * g;
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(p.clone());
        }
        let mut r = self.residual_momenta(pt, p_n, &p, dt);
        for _ in 0..np.max_iter {
            let rhs: Vec<f64> = r.iter().map(|x| -x).collect();
            let Some(u) =
                Self::solve_update(&pt.diff, &p, 0.5 * dt, &rhs, mode, false, np.pivot_tol)
            else {
                return Ok(None);
            };
            for (x, du) in p.iter_mut().zip(&u) {
                *x += du;
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(p.clone());
            }
            r = self.residual_momenta(pt, p_n, &p, dt);
            let (step, res) = (norm(&u), norm(&r));
            if !(step.is_finite() && res.is_finite()) {
                return Ok(None);
            }
            if step < np.tol_cauchy && res < np.tol_root {
                return Ok(Some(p));
            }
        }
        Ok(None)
    }

    /// `h(q) = q - q_n - (dt / 2) (D(q_n) p + D(q) p)` given `D(q)`.
    fn residual_position(
        q: &[f64],
        q_n: &[f64],
        base: &[f64],
        diff: &DiffusionEval,
        p: &[f64],
        dt: f64,
    ) -> Vec<f64> {
        let mut r: Vec<f64> = q
            .iter()
            .zip(q_n)
            .zip(base)
            .map(|((x, y), b)| x - y - b)
            .collect();
        diff.apply_add(Power::One, p, -0.5 * dt, &mut r);
        r
    }

    /// Solves `q = q_n + (dt / 2) (D(q_n) p + D(q) p)`. The root is not
    /// wrapped into the box.
    pub fn newton_position(
        &self,
        start: &PhasePoint,
        p: &[f64],
        dt: f64,
        np: &NewtonParams,
        mode: JacobianMode,
        mut trace: Option<&mut Vec<Vec<f64>>>,
    ) -> Solve {
        let q_n = &start.q;
        let dp_n = start.diff.apply(Power::One, p);
        let base: Vec<f64> = dp_n.iter().map(|x| 0.5 * dt * x).collect();
        let mut q: Vec<f64> = q_n.iter().zip(&dp_n).map(|(x, v)| x + dt * v).collect();
        if let Some(t) = trace.as_deref_mut() {
            t.push(q.clone());
        }
        let Some(mut diff) = soft(self.diffusion_at(&q))? else {
            return Ok(None);
        };
        let mut r = Self::residual_position(&q, q_n, &base, &diff, p, dt);
        for _ in 0..np.max_iter {
            let rhs: Vec<f64> = r.iter().map(|x| -x).collect();
            let Some(u) = Self::solve_update(&diff, p, -0.5 * dt, &rhs, mode, true, np.pivot_tol)
            else {
                return Ok(None);
            };
            for (x, du) in q.iter_mut().zip(&u) {
                *x += du;
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(q.clone());
            }
            diff = match soft(self.diffusion_at(&q))? {
                Some(d) => d,
                None => return Ok(None),
            };
            r = Self::residual_position(&q, q_n, &base, &diff, p, dt);
            let (step, res) = (norm(&u), norm(&r));
            if !(step.is_finite() && res.is_finite()) {
                return Ok(None);
            }
            if step < np.tol_cauchy && res < np.tol_root {
                return Ok(Some(q));
            }
        }
        Ok(None)
    }

    /// One generalized Störmer-Verlet step without reversibility check.
    pub fn gsv(
        &self,
        start: &PhasePoint,
        p: &[f64],
        dt: f64,
        np: &NewtonParams,
        mode: JacobianMode,
    ) -> Result<std::result::Result<(PhasePoint, Vec<f64>), Stage>> {
        let Some(p_half) = self.newton_momenta(start, p, dt, np, mode, None)? else {
            return Ok(Err(Stage::Momenta));
        };
        let Some(mut q1) = self.newton_position(start, &p_half, dt, np, mode, None)? else {
            return Ok(Err(Stage::Position));
        };
        wrap_all(&mut q1, self.model.box_len());
        let Some(pt1) = soft(self.point(q1))? else {
            return Ok(Err(Stage::Position));
        };
        let gq = self.grad_q(&pt1, &p_half);
        let mut p1 = p_half;
        for (x, g) in p1.iter_mut().zip(gq) {
            *x -= 0.5 * dt * g;
        }
        if p1.iter().any(|x| !x.is_finite()) {
            return Ok(Err(Stage::Position));
        }
        Ok(Ok((pt1, p1)))
    }

    /// Integrator with reversibility checks: forward step, backward step from
    /// the momentum-flipped end point, and comparison with the start.
    pub fn gsv_rev(
        &self,
        start: &PhasePoint,
        p: &[f64],
        dt: f64,
        np: &NewtonParams,
        mode: JacobianMode,
    ) -> Result<GsvOutcome> {
        let fail = |status| GsvOutcome {
            point: start.clone(),
            p: p.iter().map(|x| -x).collect(),
            status,
            residual: None,
        };
        let (pt1, p1) = match self.gsv(start, p, dt, np, mode)? {
            Ok(v) => v,
            Err(Stage::Momenta) => return Ok(fail(GsvStatus::FailFwdMomenta)),
            Err(Stage::Position) => return Ok(fail(GsvStatus::FailFwdPosition)),
        };
        let minus_p1: Vec<f64> = p1.iter().map(|x| -x).collect();
        let (pt2, p2) = match self.gsv(&pt1, &minus_p1, dt, np, mode)? {
            Ok(v) => v,
            Err(Stage::Momenta) => return Ok(fail(GsvStatus::FailBwdMomenta)),
            Err(Stage::Position) => return Ok(fail(GsvStatus::FailBwdPosition)),
        };
        let dq2 = torus_dist_sq(&pt2.q, &start.q, self.model.box_len());
        let dp2: f64 = p2.iter().zip(p).map(|(x, y)| (-x - y) * (-x - y)).sum();
        let residual = (dq2 + dp2).sqrt();
        if !(residual < np.tol_rev) {
            let mut out = fail(GsvStatus::FailReversibility);
            out.residual = Some(residual);
            return Ok(out);
        }
        Ok(GsvOutcome {
            point: pt1,
            p: p1,
            status: GsvStatus::Ok,
            residual: Some(residual),
        })
    }

    /// Momenta distributed as `N(0, (beta D(q))^{-1})` from a standard
    /// Gaussian vector.
    pub fn momenta_from_gaussian(&self, diff: &DiffusionEval, gauss: &[f64]) -> Vec<f64> {
        let mut p = vec![0.0; gauss.len()];
        diff.apply_add(Power::InvSqrt, gauss, 1.0 / self.beta().sqrt(), &mut p);
        p
    }
}

/// Midpoint step of `dp = -gamma D p dt + sqrt(2 gamma / beta) dW` over
/// `dt / 2`, with the linear solve done on the eigenspaces of `D`.
pub fn ou_half_step(
    diff: &DiffusionEval,
    p: &[f64],
    dt: f64,
    gamma: f64,
    beta: f64,
    gauss: &[f64],
) -> Vec<f64> {
    let c = 0.25 * dt * gamma * diff.kappa;
    let ca = c * diff.a;
    let noise = (gamma * dt / beta).sqrt();
    let (r_perp, r_par) = ((1.0 - c) / (1.0 + c), (1.0 - ca) / (1.0 + ca));
    let (n_perp, n_par) = (noise / (1.0 + c), noise / (1.0 + ca));
    let mut out: Vec<f64> = p
        .iter()
        .zip(gauss)
        .map(|(x, g)| r_perp * x + n_perp * g)
        .collect();
    let cv = &diff.cv;
    let proj = ((r_par - r_perp) * cv.dot(p) + (n_par - n_perp) * cv.dot(gauss)) / cv.grad_norm_sq;
    cv.add_grad(proj, &mut out);
    out
}

/// One RMHMC transition from `point` with the given noise. Returns the
/// outcome and, on acceptance, the new point.
pub fn rmhmc_transition(
    ham: &Hamiltonian,
    np: &NewtonParams,
    mode: JacobianMode,
    dt: f64,
    point: &PhasePoint,
    gauss: &[f64],
    u: f64,
) -> Result<(StepOutcome, Option<PhasePoint>)> {
    let p = ham.momenta_from_gaussian(&point.diff, gauss);
    let out = ham.gsv_rev(point, &p, dt, np, mode)?;
    if let Some(cause) = out.status.outcome() {
        return Ok((cause, None));
    }
    let dh = ham.energy(&out.point, &out.p) - ham.energy(point, &p);
    if u.ln() < -ham.beta() * dh {
        Ok((StepOutcome::Accepted, Some(out.point)))
    } else {
        Ok((StepOutcome::Metropolis, None))
    }
}

/// One RMGHMC transition from `(point, p)` with noise `g1`, uniform `u` and
/// noise `g2`. Returns the outcome, the new point on acceptance and the new
/// momenta.
#[allow(clippy::too_many_arguments)]
pub fn rmghmc_transition(
    ham: &Hamiltonian,
    np: &NewtonParams,
    mode: JacobianMode,
    dt: f64,
    gamma: f64,
    point: &PhasePoint,
    p: &[f64],
    g1: &[f64],
    u: f64,
    g2: &[f64],
) -> Result<(StepOutcome, Option<PhasePoint>, Vec<f64>)> {
    let beta = ham.beta();
    let p_quarter = ou_half_step(&point.diff, p, dt, gamma, beta, g1);
    let out = ham.gsv_rev(point, &p_quarter, dt, np, mode)?;
    let (outcome, new_point, p_three_quarters) = match out.status.outcome() {
        // S applied to the flipped input gives back (q, p_quarter), whose
        // energy difference is zero: always accepted.
        Some(cause) => (cause, None, p_quarter),
        None => {
            let p_flip: Vec<f64> = out.p.iter().map(|x| -x).collect();
            let dh = ham.energy(&out.point, &p_flip) - ham.energy(point, &p_quarter);
            if u.ln() < -beta * dh {
                (StepOutcome::Accepted, Some(out.point), p_flip)
            } else {
                (StepOutcome::Metropolis, None, p_quarter)
            }
        }
    };
    let reversed: Vec<f64> = p_three_quarters.iter().map(|x| -x).collect();
    let diff = new_point.as_ref().map_or(&point.diff, |pt| &pt.diff);
    let p_next = ou_half_step(diff, &reversed, dt, gamma, beta, g2);
    Ok((outcome, new_point, p_next))
}

/// Shared sampler settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KineticParams {
    pub dt: f64,
    pub newton: NewtonParams,
    pub mode: JacobianMode,
}

impl KineticParams {
    pub fn new(dt: f64) -> Self {
        Self {
            dt,
            newton: NewtonParams::default(),
            mode: JacobianMode::Block,
        }
    }

    fn validate(&self, model: &SystemModel, q0: &Configuration) -> Result<()> {
        if q0.dim() != model.dim() {
            return Err(Error::Config(format!(
                "configuration has {} coordinates, system needs {}",
                q0.dim(),
                model.dim()
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!(
                "time step must be positive, got {}",
                self.dt
            )));
        }
        self.newton.validate()
    }
}

/// RMHMC chain: full momentum refresh every step.
#[derive(Debug, Clone)]
pub struct Rmhmc {
    ham: Hamiltonian,
    params: KineticParams,
    cur: PhasePoint,
    rng: ChainRng,
    gauss: Vec<f64>,
    /// Hamiltonian after the last momentum refresh.
    energy: f64,
    steps: u64,
    accepted: u64,
}

impl Rmhmc {
    pub fn new(
        ham: Hamiltonian,
        params: KineticParams,
        q0: Configuration,
        seed: u64,
    ) -> Result<Self> {
        params.validate(&ham.model, &q0)?;
        let cur = ham.point(q0.into_coords())?;
        let d = cur.q.len();
        Ok(Self {
            ham,
            params,
            cur,
            rng: chain_rng(seed),
            gauss: vec![0.0; d],
            energy: f64::NAN,
            steps: 0,
            accepted: 0,
        })
    }

    pub fn point(&self) -> &PhasePoint {
        &self.cur
    }

    pub fn hamiltonian(&self) -> &Hamiltonian {
        &self.ham
    }

    pub fn accept_rate(&self) -> f64 {
        self.accepted as f64 / self.steps as f64
    }

    /// `H` at the start of the last cycle, once the momenta were drawn; NaN
    /// before the first step.
    pub fn energy(&self) -> f64 {
        self.energy
    }

    /// Draws momenta, then the uniform.
    pub fn step(&mut self) -> Result<StepOutcome> {
        fill_gaussian(&mut self.rng, &mut self.gauss);
        let u = uniform(&mut self.rng);
        let p = &self.params;
        let mom = self.ham.momenta_from_gaussian(&self.cur.diff, &self.gauss);
        self.energy = self.ham.energy(&self.cur, &mom);
        let (outcome, new) = rmhmc_transition(
            &self.ham,
            &p.newton,
            p.mode,
            p.dt,
            &self.cur,
            &self.gauss,
            u,
        )?;
        self.steps += 1;
        if let Some(pt) = new {
            self.cur = pt;
            self.accepted += 1;
        }
        Ok(outcome)
    }
}

impl MarkovChain for Rmhmc {
    fn step(&mut self) -> Result<StepOutcome> {
        Rmhmc::step(self)
    }
    fn xi(&self) -> f64 {
        self.cur.xi()
    }
    fn potential(&self) -> f64 {
        self.cur.v
    }
    fn energy(&self) -> f64 {
        self.energy
    }
}

/// RMGHMC chain: partial momentum refresh by two OU half steps.
#[derive(Debug, Clone)]
pub struct Rmghmc {
    ham: Hamiltonian,
    params: KineticParams,
    gamma: f64,
    cur: PhasePoint,
    p: Vec<f64>,
    rng: ChainRng,
    g1: Vec<f64>,
    g2: Vec<f64>,
    steps: u64,
    accepted: u64,
}

impl Rmghmc {
    /// Initial momenta are drawn from their equilibrium law.
    pub fn new(
        ham: Hamiltonian,
        params: KineticParams,
        gamma: f64,
        q0: Configuration,
        seed: u64,
    ) -> Result<Self> {
        params.validate(&ham.model, &q0)?;
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::Config(format!(
                "friction must be nonnegative, got {gamma}"
            )));
        }
        let cur = ham.point(q0.into_coords())?;
        let d = cur.q.len();
        let mut rng = chain_rng(seed);
        let mut g = vec![0.0; d];
        fill_gaussian(&mut rng, &mut g);
        let p = ham.momenta_from_gaussian(&cur.diff, &g);
        Ok(Self {
            ham,
            params,
            gamma,
            cur,
            p,
            rng,
            g1: vec![0.0; d],
            g2: vec![0.0; d],
            steps: 0,
            accepted: 0,
        })
    }

    pub fn point(&self) -> &PhasePoint {
        &self.cur
    }

    pub fn momenta(&self) -> &[f64] {
        &self.p
    }

    pub fn hamiltonian(&self) -> &Hamiltonian {
        &self.ham
    }

    pub fn energy(&self) -> f64 {
        self.ham.energy(&self.cur, &self.p)
    }

    pub fn accept_rate(&self) -> f64 {
        self.accepted as f64 / self.steps as f64
    }

    /// Draws the first OU noise, the uniform, then the second OU noise.
    pub fn step(&mut self) -> Result<StepOutcome> {
        fill_gaussian(&mut self.rng, &mut self.g1);
        let u = uniform(&mut self.rng);
        fill_gaussian(&mut self.rng, &mut self.g2);
        let kp = &self.params;
        let (outcome, new, p) = rmghmc_transition(
            &self.ham, &kp.newton, kp.mode, kp.dt, self.gamma, &self.cur, &self.p, &self.g1, u,
            &self.g2,
        )?;
        self.steps += 1;
        if let Some(pt) = new {
            self.cur = pt;
            self.accepted += 1;
        }
        self.p = p;
        Ok(outcome)
    }
}

impl MarkovChain for Rmghmc {
    fn step(&mut self) -> Result<StepOutcome> {
        Rmghmc::step(self)
    }
    fn xi(&self) -> f64 {
        self.cur.xi()
    }
    fn potential(&self) -> f64 {
        self.cur.v
    }
    fn energy(&self) -> f64 {
        Rmghmc::energy(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{lattice_config, SystemParams};

    fn identity_ham() -> (Hamiltonian, PhasePoint) {
        let params = SystemParams::paper_dimer();
        let ham = Hamiltonian::new(SystemModel::dimer(params), DiffusionSpec::identity(1.0));
        let pt = ham.point(lattice_config(&params).into_coords()).unwrap();
        (ham, pt)
    }

    #[test]
    fn identity_hamiltonian_is_potential_at_rest() {
        let (ham, pt) = identity_ham();
        let p = vec![0.0; pt.q.len()];
        assert_eq!(ham.energy(&pt, &p), pt.v);
        assert_eq!(ham.grad_q(&pt, &p), pt.grad_v);
    }

    #[test]
    fn identity_newton_is_explicit() {
        let (ham, pt) = identity_ham();
        let d = pt.q.len();
        let p: Vec<f64> = (0..d).map(|i| (i as f64 * 0.37).sin()).collect();
        let np = NewtonParams::default();
        let mut trace = Vec::new();
        let ph = ham
            .newton_momenta(&pt, &p, 0.05, &np, JacobianMode::Block, Some(&mut trace))
            .unwrap()
            .unwrap();
        assert_eq!(trace.len(), 2);
        for i in 0..d {
            assert!((ph[i] - (p[i] - 0.025 * pt.grad_v[i])).abs() < 1e-14);
        }
        let q1 = ham
            .newton_position(&pt, &ph, 0.05, &np, JacobianMode::Block, None)
            .unwrap()
            .unwrap();
        for i in 0..d {
            assert!((q1[i] - (pt.q[i] + 0.05 * ph[i])).abs() < 1e-14);
        }
    }

    #[test]
    fn ou_zero_step_is_identity() {
        let (_, pt) = identity_ham();
        let p: Vec<f64> = (0..pt.q.len()).map(|i| i as f64).collect();
        let g = vec![1.0; p.len()];
        assert_eq!(ou_half_step(&pt.diff, &p, 0.0, 1.0, 1.0, &g), p);
    }

    #[test]
    fn params_validation() {
        assert!(NewtonParams::default().validate().is_ok());
        let bad = NewtonParams {
            tol_rev: 1e-13,
            ..NewtonParams::default()
        };
        assert!(bad.validate().is_err());
    }
}
