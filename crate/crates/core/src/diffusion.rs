//! The diffusion family `D(q) = kappa (I + (a(xi(q)) - 1) P(q))`, where `P` is
//! the orthogonal projector onto `grad xi` and `a(z) = exp(alpha beta F(z)) /
//! sigma^2(z)`.
//!
//! Every matrix function of `D` has the same rank-one-update form
//! `s (I + c P)`, so matrix-vector products cost `O(d)` plus work on the
//! support of the collective variable. Dense matrices exist for testing.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::latent::{LatentGrid, LatentModel, ProfileSet};
use crate::model::CvEval;

/// Largest `alpha beta F(z)` that is exponentiated.
pub const MAX_EXPONENT: f64 = 700.0;

/// Which effective diffusion enters `a`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmaConvention {
    /// `sigma = 1`, so `alpha = 0` gives a constant diffusion and
    /// `a' = alpha beta F' a`.
    #[default]
    Unit,
    /// `sigma^2` and `b` taken from the latent model.
    Profile,
}

/// Immutable description of one member of the diffusion family.
#[derive(Debug, Clone)]
pub struct DiffusionSpec {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    pub latent: Arc<dyn LatentModel>,
    pub convention: SigmaConvention,
}

impl DiffusionSpec {
    pub fn new(
        alpha: f64,
        beta: f64,
        kappa: f64,
        latent: Arc<dyn LatentModel>,
        convention: SigmaConvention,
    ) -> Result<Self> {
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(Error::Config(format!(
                "kappa must be positive, got {kappa}"
            )));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {beta}")));
        }
        if !alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be finite, got {alpha}")));
        }
        Ok(Self {
            alpha,
            beta,
            kappa,
            latent,
            convention,
        })
    }

    /// `D = I`.
    pub fn identity(beta: f64) -> Self {
        let grid = LatentGrid::new(0.0, 1.0, 1).expect("unit grid");
        Self::new(
            0.0,
            beta,
            1.0,
            Arc::new(ProfileSet::flat(grid)),
            SigmaConvention::Unit,
        )
        .expect("identity spec")
    }

    /// Spec with `kappa` set by the normalization over `grid`.
    pub fn normalized(
        alpha: f64,
        beta: f64,
        latent: Arc<dyn LatentModel>,
        convention: SigmaConvention,
        grid: &LatentGrid,
        dim: usize,
    ) -> Result<Self> {
        let mut spec = Self::new(alpha, beta, 1.0, latent, convention)?;
        spec.kappa = kappa_alpha(&spec, grid, dim)?;
        Ok(spec)
    }

    pub fn with_kappa(&self, kappa: f64) -> Result<Self> {
        Self::new(
            self.alpha,
            self.beta,
            kappa,
            self.latent.clone(),
            self.convention,
        )
    }

    fn exp_factor(&self, z: f64) -> Result<f64> {
        if self.alpha == 0.0 {
            return Ok(1.0);
        }
        let exponent = self.alpha * self.beta * self.latent.free_energy(z);
        if !(exponent <= MAX_EXPONENT) {
            return Err(Error::Overflow {
                z,
                exponent,
                limit: MAX_EXPONENT,
            });
        }
        Ok(exponent.exp())
    }

    /// `a(z)`.
    pub fn a(&self, z: f64) -> Result<f64> {
        let e = self.exp_factor(z)?;
        Ok(match self.convention {
            SigmaConvention::Unit => e,
            SigmaConvention::Profile => e / self.latent.eff_diffusion(z),
        })
    }

    /// `(a(z), a'(z))`.
    pub fn a_and_prime(&self, z: f64) -> Result<(f64, f64)> {
        let e = self.exp_factor(z)?;
        Ok(match self.convention {
            SigmaConvention::Unit => {
                let ap = if self.alpha == 0.0 {
                    0.0
                } else {
                    self.alpha * self.beta * self.latent.mean_force(z) * e
                };
                (e, ap)
            }
            SigmaConvention::Profile => {
                let s2 = self.latent.eff_diffusion(z);
                let fp = self.latent.mean_force(z);
                let b = self.latent.eff_drift(z);
                let ap = self.beta * e / (s2 * s2) * ((self.alpha - 1.0) * s2 * fp - b);
                (e / s2, ap)
            }
        })
    }

    /// Evaluates the diffusion at a configuration with collective variable
    /// data `cv`.
    pub fn eval(&self, cv: CvEval) -> Result<DiffusionEval> {
        let (a, a_prime) = self.a_and_prime(cv.value)?;
        Ok(DiffusionEval {
            cv,
            kappa: self.kappa,
            a,
            a_prime,
        })
    }
}

/// `kappa = (int sqrt(d - 1 + a(z)^2) exp(-beta F(z)) dz)^{-1}` by the
/// left-Riemann rule on `grid`.
pub fn kappa_alpha(spec: &DiffusionSpec, grid: &LatentGrid, dim: usize) -> Result<f64> {
    let dz = grid.width();
    let d1 = dim as f64 - 1.0;
    let mut integral = 0.0;
    for i in 0..grid.n_bins {
        let z = grid.left_edge(i);
        let a = spec.a(z)?;
        integral += (d1 + a * a).sqrt() * (-spec.beta * spec.latent.free_energy(z)).exp() * dz;
    }
    if !(integral > 0.0 && integral.is_finite()) {
        return Err(Error::Domain(format!(
            "normalization integral is {integral}"
        )));
    }
    Ok(1.0 / integral)
}

/// Matrix function of the diffusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Power {
    /// `D`
    One,
    /// `D^{1/2}`
    Sqrt,
    /// `D^{-1}`
    Inv,
    /// `D^{-1/2}`
    InvSqrt,
}

/// Orthogonal projector onto `grad xi`.
#[derive(Debug, Clone, Copy)]
pub struct Projector<'a> {
    pub cv: &'a CvEval,
}

impl Projector<'_> {
    /// `P v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        self.cv
            .add_grad(self.cv.dot(v) / self.cv.grad_norm_sq, &mut out);
        out
    }

    /// `(I - P) v`.
    pub fn apply_perp(&self, v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        self.cv
            .add_grad(-self.cv.dot(v) / self.cv.grad_norm_sq, &mut out);
        out
    }

    pub fn dense(&self) -> Vec<f64> {
        let g = self.cv.grad_full();
        let d = g.len();
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                m[i * d + j] = g[i] * g[j] / self.cv.grad_norm_sq;
            }
        }
        m
    }
}

/// Diffusion evaluated at one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionEval {
    pub cv: CvEval,
    pub kappa: f64,
    pub a: f64,
    pub a_prime: f64,
}

impl DiffusionEval {
    pub fn dim(&self) -> usize {
        self.cv.dim
    }

    pub fn projector(&self) -> Projector<'_> {
        Projector { cv: &self.cv }
    }

    /// `(s, c)` with the matrix function equal to `s (I + c P)`.
    #[inline]
    pub fn coefficients(&self, power: Power) -> (f64, f64) {
        match power {
            Power::One => (self.kappa, self.a - 1.0),
            Power::Sqrt => (self.kappa.sqrt(), self.a.sqrt() - 1.0),
            Power::Inv => (1.0 / self.kappa, 1.0 / self.a - 1.0),
            Power::InvSqrt => (1.0 / self.kappa.sqrt(), 1.0 / self.a.sqrt() - 1.0),
        }
    }

    /// `out += factor * M v` for the matrix function `M`.
    pub fn apply_add(&self, power: Power, v: &[f64], factor: f64, out: &mut [f64]) {
        let (s, c) = self.coefficients(power);
        let sf = s * factor;
        for (o, x) in out.iter_mut().zip(v) {
            *o += sf * x;
        }
        let proj = self.cv.dot(v) / self.cv.grad_norm_sq;
        self.cv.add_grad(sf * c * proj, out);
    }

    pub fn apply(&self, power: Power, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        self.apply_add(power, v, 1.0, &mut out);
        out
    }

    /// Dense row-major matrix function, for tests and diagnostics.
    pub fn dense(&self, power: Power) -> Vec<f64> {
        let (s, c) = self.coefficients(power);
        let d = self.dim();
        let mut m = self.projector().dense();
        for (idx, x) in m.iter_mut().enumerate() {
            *x *= s * c;
            if idx / d == idx % d {
                *x += s;
            }
        }
        m
    }

    /// `ln det D = d ln kappa + ln a`.
    pub fn log_det(&self) -> f64 {
        self.dim() as f64 * self.kappa.ln() + self.a.ln()
    }

    /// `r^T D^{-1} r`.
    pub fn quad_inverse(&self, r: &[f64]) -> f64 {
        let rr: f64 = r.iter().map(|x| x * x).sum();
        let gr = self.cv.dot(r);
        (rr + (1.0 / self.a - 1.0) * gr * gr / self.cv.grad_norm_sq) / self.kappa
    }

    /// Divergence of `D` restricted to the support of the collective
    /// variable (it vanishes elsewhere). Uses the constant-norm form when the
    /// collective variable has one.
    pub fn divergence_support(&self) -> Vec<f64> {
        if self.cv.constant_norm {
            self.divergence_support_const_norm()
        } else {
            self.divergence_support_general()
        }
    }

    /// Full divergence, valid for any collective variable.
    pub fn divergence_support_general(&self) -> Vec<f64> {
        let cv = &self.cv;
        let n = cv.grad_norm_sq;
        let hg = cv.hess_grad();
        let ghg: f64 = hg.iter().zip(&cv.grad).map(|(h, g)| h * g).sum();
        let lap = cv.laplacian();
        let am1 = self.a - 1.0;
        let cg = lap / n - 2.0 * ghg / (n * n);
        hg.iter()
            .zip(&cv.grad)
            .map(|(h, g)| self.kappa * (am1 * (h / n + cg * g) + self.a_prime * g))
            .collect()
    }

    /// Divergence when `|grad xi|` is constant: `kappa ((a - 1) lap/n + a') grad xi`.
    pub fn divergence_support_const_norm(&self) -> Vec<f64> {
        let cv = &self.cv;
        let c = self.kappa * ((self.a - 1.0) * cv.laplacian() / cv.grad_norm_sq + self.a_prime);
        cv.grad.iter().map(|g| c * g).collect()
    }

    /// `out += factor * div D`.
    pub fn add_divergence(&self, factor: f64, out: &mut [f64]) {
        if self.a == 1.0 && self.a_prime == 0.0 {
            return;
        }
        for (&i, v) in self.cv.support.iter().zip(self.divergence_support()) {
            out[i] += factor * v;
        }
    }

    pub fn divergence(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.add_divergence(1.0, &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::AnalyticLatent;
    use crate::model::{lattice_config, CollectiveVariable, DimerBond, SystemParams};

    fn cv_at_lattice() -> CvEval {
        let p = SystemParams::paper_dimer();
        let mut q = lattice_config(&p).into_coords();
        q[2] += 0.3;
        q[3] += 0.2;
        DimerBond::new(&p).evaluate(&q, p.box_len).unwrap()
    }

    #[test]
    fn alpha_zero_is_kappa_identity() {
        let spec = DiffusionSpec::identity(1.0).with_kappa(0.7).unwrap();
        let e = spec.eval(cv_at_lattice()).unwrap();
        assert_eq!((e.a, e.a_prime), (1.0, 0.0));
        let v: Vec<f64> = (0..32).map(|i| i as f64 - 3.5).collect();
        let dv = e.apply(Power::One, &v);
        for (x, y) in dv.iter().zip(&v) {
            assert_eq!(*x, 0.7 * y);
        }
        assert!(e.divergence().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn exponential_free_energy() {
        let latent = Arc::new(AnalyticLatent::with_constant_sigma(
            1.0,
            1.0,
            |z| z,
            |_| 1.0,
        ));
        let spec = DiffusionSpec::new(1.0, 1.0, 1.0, latent, SigmaConvention::Unit).unwrap();
        for z in [-0.5, 0.0, 0.3, 2.0] {
            let (a, ap) = spec.a_and_prime(z).unwrap();
            assert!((a - z.exp()).abs() < 1e-14 * a);
            assert!((ap - z.exp()).abs() < 1e-14 * a);
        }
    }

    #[test]
    fn overflow_is_reported() {
        let latent = Arc::new(AnalyticLatent::with_constant_sigma(
            1.0,
            1.0,
            |_| 1000.0,
            |_| 0.0,
        ));
        let spec = DiffusionSpec::new(1.0, 1.0, 1.0, latent, SigmaConvention::Unit).unwrap();
        assert!(matches!(spec.a(0.0), Err(Error::Overflow { .. })));
    }

    #[test]
    fn kappa_flat_unit_interval() {
        let grid = LatentGrid::new(0.0, 1.0, 50).unwrap();
        for alpha in [0.0, 0.5, 2.0] {
            let latent = Arc::new(ProfileSet::flat(grid));
            let spec =
                DiffusionSpec::normalized(alpha, 1.0, latent, SigmaConvention::Unit, &grid, 32)
                    .unwrap();
            assert!((spec.kappa - 1.0 / 32f64.sqrt()).abs() < 1e-14);
        }
    }

    #[test]
    fn projector_algebra() {
        let cv = cv_at_lattice();
        let p = Projector { cv: &cv };
        let g = cv.grad_full();
        let pg = p.apply(&g);
        for (x, y) in pg.iter().zip(&g) {
            assert!((x - y).abs() < 1e-14);
        }
        assert!(p.apply_perp(&g).iter().all(|x| x.abs() < 1e-14));
        let m = p.dense();
        let d = g.len();
        let tr: f64 = (0..d).map(|i| m[i * d + i]).sum();
        assert!((tr - 1.0).abs() < 1e-14);
        for i in 0..d {
            for j in 0..d {
                let m2: f64 = (0..d).map(|k| m[i * d + k] * m[k * d + j]).sum();
                assert!((m2 - m[i * d + j]).abs() < 1e-12);
            }
        }
    }
}
