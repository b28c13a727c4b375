//! Dimer-in-solvent system: periodic geometry, WCA and double-well pair
//! potentials, the bond-length collective variable and the lattice start.
//!
//! Positions are stored flat as `(x_1, y_1, x_2, y_2, ..., x_N, y_N)`, every
//! coordinate reduced into `[0, box_len)`. Particles 0 and 1 form the dimer.

use std::fmt::Debug;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Physical and box constants of the dimer system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemParams {
    pub n_particles: usize,
    pub box_len: f64,
    pub beta: f64,
    pub eps: f64,
    pub r_cap: f64,
    pub r0: f64,
    pub w: f64,
    pub barrier_h: f64,
}

impl SystemParams {
    /// Builds a parameter set; `r0` is derived as `2^{1/6} r_cap`.
    pub fn new(
        n_particles: usize,
        box_len: f64,
        beta: f64,
        eps: f64,
        r_cap: f64,
        w: f64,
        barrier_h: f64,
    ) -> Result<Self> {
        let params = Self {
            n_particles,
            box_len,
            beta,
            eps,
            r_cap,
            r0: 2f64.powf(1.0 / 6.0) * r_cap,
            w,
            barrier_h,
        };
        params.validate()?;
        Ok(params)
    }

    /// Box side chosen so that `N / box_len^2 = density`.
    pub fn with_density(n_particles: usize, density: f64) -> Result<Self> {
        if !(density > 0.0) {
            return Err(Error::Config(format!(
                "density must be positive, got {density}"
            )));
        }
        Self::new(
            n_particles,
            (n_particles as f64 / density).sqrt(),
            1.0,
            1.0,
            1.0,
            0.7,
            2.0,
        )
    }

    /// 16 particles at density 0.7, `beta = 1`, `w = 0.7`, `h = 2`.
    pub fn paper_dimer() -> Self {
        Self::with_density(16, 0.7).expect("preset is valid")
    }

    /// Dimer alone in a box large enough that the bond never feels its images.
    pub fn isolated_dimer(box_len: f64) -> Result<Self> {
        Self::new(2, box_len, 1.0, 1.0, 1.0, 0.7, 2.0)
    }

    pub fn dim(&self) -> usize {
        2 * self.n_particles
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 2 {
            return Err(Error::Config(
                "the dimer needs at least two particles".into(),
            ));
        }
        for (name, v) in [
            ("box_len", self.box_len),
            ("beta", self.beta),
            ("eps", self.eps),
            ("r_cap", self.r_cap),
            ("r0", self.r0),
            ("w", self.w),
            ("barrier_h", self.barrier_h),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Reduces `x` into `[0, box_len)`.
#[inline]
pub fn wrap_coord(x: f64, box_len: f64) -> f64 {
    let y = x - box_len * (x / box_len).floor();
    if y >= box_len {
        0.0
    } else {
        y
    }
}

/// Representative of `dx` in `[-box_len/2, box_len/2)`.
#[inline]
pub fn min_image_1d(dx: f64, box_len: f64) -> f64 {
    dx - box_len * (dx / box_len + 0.5).floor()
}

/// Minimum-image displacement `qi - qj` between two particles.
#[inline]
pub fn min_image(qi: [f64; 2], qj: [f64; 2], box_len: f64) -> [f64; 2] {
    [
        min_image_1d(qi[0] - qj[0], box_len),
        min_image_1d(qi[1] - qj[1], box_len),
    ]
}

/// Wraps every coordinate of `q` into the box.
pub fn wrap_all(q: &mut [f64], box_len: f64) {
    for x in q.iter_mut() {
        *x = wrap_coord(*x, box_len);
    }
}

/// Component-wise minimum-image difference `a - b`, written into `out`.
pub fn displacement(a: &[f64], b: &[f64], box_len: f64, out: &mut [f64]) {
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = min_image_1d(x - y, box_len);
    }
}

/// Squared norm of the minimum-image difference `a - b`.
pub fn torus_dist_sq(a: &[f64], b: &[f64], box_len: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = min_image_1d(x - y, box_len);
            d * d
        })
        .sum()
}

/// Particle positions of the periodic system.
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    coords: Vec<f64>,
}

impl Configuration {
    /// Wraps `coords` into `[0, box_len)`.
    pub fn new(mut coords: Vec<f64>, box_len: f64) -> Result<Self> {
        if coords.len() % 2 != 0 {
            return Err(Error::Config(format!(
                "coordinate vector must hold 2N entries, got {}",
                coords.len()
            )));
        }
        if coords.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("non-finite coordinate".into()));
        }
        wrap_all(&mut coords, box_len);
        Ok(Self { coords })
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn particle(&self, i: usize) -> [f64; 2] {
        [self.coords[2 * i], self.coords[2 * i + 1]]
    }
}

/// WCA pair energy; zero beyond `r0`.
pub fn wca(r: f64, params: &SystemParams) -> Result<f64> {
    check_distance(r)?;
    Ok(wca_unchecked(r, params))
}

/// Radial derivative of [`wca`].
pub fn wca_deriv(r: f64, params: &SystemParams) -> Result<f64> {
    check_distance(r)?;
    Ok(wca_deriv_unchecked(r, params))
}

/// Double-well bond energy `h (1 - (r - r0 - w)^2 / w^2)^2`.
pub fn dw(r: f64, params: &SystemParams) -> Result<f64> {
    check_distance(r)?;
    Ok(dw_unchecked(r, params))
}

/// Radial derivative of [`dw`].
pub fn dw_deriv(r: f64, params: &SystemParams) -> Result<f64> {
    check_distance(r)?;
    Ok(dw_deriv_unchecked(r, params))
}

fn check_distance(r: f64) -> Result<()> {
    if r > 0.0 && r.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "pair distance must be positive, got {r}"
        )))
    }
}

#[inline]
fn wca_unchecked(r: f64, p: &SystemParams) -> f64 {
    if r >= p.r0 {
        return 0.0;
    }
    let s6 = (p.r_cap / r).powi(6);
    4.0 * p.eps * (s6 * s6 - s6) + p.eps
}

#[inline]
fn wca_deriv_unchecked(r: f64, p: &SystemParams) -> f64 {
    if r >= p.r0 {
        return 0.0;
    }
    let s6 = (p.r_cap / r).powi(6);
    24.0 * p.eps * (s6 - 2.0 * s6 * s6) / r
}

#[inline]
fn dw_unchecked(r: f64, p: &SystemParams) -> f64 {
    let u = (r - p.r0 - p.w) / p.w;
    let s = 1.0 - u * u;
    p.barrier_h * s * s
}

#[inline]
fn dw_deriv_unchecked(r: f64, p: &SystemParams) -> f64 {
    let u = (r - p.r0 - p.w) / p.w;
    -4.0 * p.barrier_h * u * (1.0 - u * u) / p.w
}

/// Value and derivatives of a scalar collective variable at one configuration.
///
/// Derivatives are stored on `support`, the coordinates the variable depends
/// on; every other component of the gradient and every other Hessian entry is
/// zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CvEval {
    pub value: f64,
    pub dim: usize,
    pub support: Vec<usize>,
    /// Gradient restricted to `support`.
    pub grad: Vec<f64>,
    /// Hessian restricted to `support`, row-major `k x k`.
    pub hess: Vec<f64>,
    pub grad_norm_sq: f64,
    /// Set when `grad_norm_sq` is the same at every configuration.
    pub constant_norm: bool,
}

impl CvEval {
    pub fn k(&self) -> usize {
        self.support.len()
    }

    /// `grad xi . v` for a full-length vector `v`.
    #[inline]
    pub fn dot(&self, v: &[f64]) -> f64 {
        self.support
            .iter()
            .zip(&self.grad)
            .map(|(&i, g)| g * v[i])
            .sum()
    }

    /// `out += c * grad xi`.
    #[inline]
    pub fn add_grad(&self, c: f64, out: &mut [f64]) {
        for (&i, g) in self.support.iter().zip(&self.grad) {
            out[i] += c * g;
        }
    }

    /// Hessian applied to a full-length vector, returned on the support.
    pub fn hess_apply(&self, v: &[f64]) -> Vec<f64> {
        let k = self.k();
        (0..k)
            .map(|a| {
                (0..k)
                    .map(|b| self.hess[a * k + b] * v[self.support[b]])
                    .sum()
            })
            .collect()
    }

    /// `hess xi * grad xi` on the support.
    pub fn hess_grad(&self) -> Vec<f64> {
        let k = self.k();
        (0..k)
            .map(|a| (0..k).map(|b| self.hess[a * k + b] * self.grad[b]).sum())
            .collect()
    }

    /// `grad xi^T hess xi grad xi`.
    pub fn grad_hess_grad(&self) -> f64 {
        self.hess_grad()
            .iter()
            .zip(&self.grad)
            .map(|(h, g)| h * g)
            .sum()
    }

    /// Laplacian of the collective variable.
    pub fn laplacian(&self) -> f64 {
        let k = self.k();
        (0..k).map(|a| self.hess[a * k + a]).sum()
    }

    pub fn grad_full(&self) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        self.add_grad(1.0, &mut g);
        g
    }

    /// Dense row-major `d x d` Hessian.
    pub fn hess_full(&self) -> Vec<f64> {
        let (d, k) = (self.dim, self.k());
        let mut h = vec![0.0; d * d];
        for a in 0..k {
            for b in 0..k {
                h[self.support[a] * d + self.support[b]] = self.hess[a * k + b];
            }
        }
        h
    }
}

/// A smooth scalar map of the configuration with nonvanishing gradient.
pub trait CollectiveVariable: Send + Sync + Debug {
    fn evaluate(&self, q: &[f64], box_len: f64) -> Result<CvEval>;

    /// `Some(c)` when `|grad xi|^2 = c` everywhere.
    fn constant_grad_norm_sq(&self) -> Option<f64> {
        None
    }
}

/// Normalized dimer bond length `(|q_2 - q_1| - r0) / (2w)`: 0 when compact,
/// 1 when stretched.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DimerBond {
    pub r0: f64,
    pub w: f64,
}

impl DimerBond {
    pub fn new(params: &SystemParams) -> Self {
        Self {
            r0: params.r0,
            w: params.w,
        }
    }

    /// Bond length corresponding to the CV value `z`.
    pub fn bond_length(&self, z: f64) -> f64 {
        2.0 * self.w * z + self.r0
    }
}

impl CollectiveVariable for DimerBond {
    fn evaluate(&self, q: &[f64], box_len: f64) -> Result<CvEval> {
        let [dx, dy] = min_image([q[0], q[1]], [q[2], q[3]], box_len);
        let r2 = dx * dx + dy * dy;
        if !(r2 > 0.0) {
            return Err(Error::SingularCv("dimer particles coincide".into()));
        }
        let r = r2.sqrt();
        let c = 1.0 / (2.0 * self.w * r);
        let (ux, uy) = (dx / r, dy / r);
        let (bxx, byy, bxy) = (c * (1.0 - ux * ux), c * (1.0 - uy * uy), -c * ux * uy);
        // [[B, -B], [-B, B]] with B = c (I - u u^T)
        let hess = vec![
            bxx, bxy, -bxx, -bxy, //
            bxy, byy, -bxy, -byy, //
            -bxx, -bxy, bxx, bxy, //
            -bxy, -byy, bxy, byy,
        ];
        Ok(CvEval {
            value: (r - self.r0) / (2.0 * self.w),
            dim: q.len(),
            support: vec![0, 1, 2, 3],
            grad: vec![c * dx, c * dy, -c * dx, -c * dy],
            hess,
            grad_norm_sq: 1.0 / (2.0 * self.w * self.w),
            constant_norm: true,
        })
    }

    fn constant_grad_norm_sq(&self) -> Option<f64> {
        Some(1.0 / (2.0 * self.w * self.w))
    }
}

/// The physical system: parameters plus the collective variable used by the
/// diffusion.
#[derive(Debug, Clone)]
pub struct SystemModel {
    pub params: SystemParams,
    pub cv: Arc<dyn CollectiveVariable>,
}

impl SystemModel {
    /// System with the dimer bond-length collective variable.
    pub fn dimer(params: SystemParams) -> Self {
        Self {
            params,
            cv: Arc::new(DimerBond::new(&params)),
        }
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn beta(&self) -> f64 {
        self.params.beta
    }

    pub fn box_len(&self) -> f64 {
        self.params.box_len
    }

    pub fn cv_eval(&self, q: &[f64]) -> Result<CvEval> {
        self.cv.evaluate(q, self.params.box_len)
    }

    pub fn cv_value(&self, q: &[f64]) -> Result<f64> {
        Ok(self.cv_eval(q)?.value)
    }

    pub fn potential_energy(&self, q: &[f64]) -> Result<f64> {
        potential_energy(q, &self.params)
    }

    pub fn energy_and_gradient(&self, q: &[f64], grad: &mut [f64]) -> Result<f64> {
        energy_and_gradient(q, &self.params, grad)
    }
}

/// Double well on the dimer pair plus WCA on every other pair.
pub fn potential_energy(q: &[f64], params: &SystemParams) -> Result<f64> {
    let n = q.len() / 2;
    let l = params.box_len;
    let rc2 = params.r0 * params.r0;
    let mut v = 0.0;
    for i in 0..n {
        let qi = [q[2 * i], q[2 * i + 1]];
        for j in (i + 1)..n {
            let [dx, dy] = min_image(qi, [q[2 * j], q[2 * j + 1]], l);
            let r2 = dx * dx + dy * dy;
            if i == 0 && j == 1 {
                v += dw(r2.sqrt(), params)?;
            } else if r2 < rc2 {
                v += wca(r2.sqrt(), params)?;
            }
        }
    }
    Ok(v)
}

/// Potential energy and its gradient, in one pass over the pairs.
pub fn energy_and_gradient(q: &[f64], params: &SystemParams, grad: &mut [f64]) -> Result<f64> {
    let n = q.len() / 2;
    let l = params.box_len;
    let rc2 = params.r0 * params.r0;
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut v = 0.0;
    for i in 0..n {
        let qi = [q[2 * i], q[2 * i + 1]];
        for j in (i + 1)..n {
            let [dx, dy] = min_image(qi, [q[2 * j], q[2 * j + 1]], l);
            let r2 = dx * dx + dy * dy;
            let dimer = i == 0 && j == 1;
            if !dimer && r2 >= rc2 {
                continue;
            }
            let r = r2.sqrt();
            check_distance(r)?;
            let (e, de) = if dimer {
                (dw_unchecked(r, params), dw_deriv_unchecked(r, params))
            } else {
                (wca_unchecked(r, params), wca_deriv_unchecked(r, params))
            };
            v += e;
            let (fx, fy) = (de * dx / r, de * dy / r);
            grad[2 * i] += fx;
            grad[2 * i + 1] += fy;
            grad[2 * j] -= fx;
            grad[2 * j + 1] -= fy;
        }
    }
    Ok(v)
}

/// Gradient of [`potential_energy`].
pub fn potential_gradient(q: &[f64], params: &SystemParams) -> Result<Vec<f64>> {
    let mut g = vec![0.0; q.len()];
    energy_and_gradient(q, params, &mut g)?;
    Ok(g)
}

/// Square-lattice start with the dimer compact (`xi = 0`).
pub fn lattice_config(params: &SystemParams) -> Configuration {
    lattice_config_at(params, 0.0)
}

/// Square-lattice start with the second dimer particle shifted so that the
/// collective variable equals `z`. Only sensible for small `|z|`: the
/// stretched bond runs into the next lattice site.
pub fn lattice_config_at(params: &SystemParams, z: f64) -> Configuration {
    let n = params.n_particles;
    let side = (n as f64).sqrt().ceil() as usize;
    let a = params.box_len / (n as f64).sqrt();
    let mut coords = Vec::with_capacity(2 * n);
    for i in 0..n {
        coords.push(a * (0.5 + (i / side) as f64));
        coords.push(a * (0.5 + (i % side) as f64));
    }
    coords[3] = coords[1] + params.r0 + 2.0 * params.w * z;
    Configuration::new(coords, params.box_len).expect("lattice coordinates are finite")
}
