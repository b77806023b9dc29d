//! Macroscopic equations for the fluctuation field and the quadratic rate
//! functionals evaluated on finite bases of test functions.
//!
//! The symmetric field solves `∂_t α = h̃'(ρ) Δα - 2A(ρ) ΔH` and the
//! asymmetric one is transported, `∂_t α = -A'(ρ) ∇α`.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FepError, Result};
use crate::measures::{
    a_coef, a_coef_prime, b_coef, exact_local_expectation, exact_local_expectation_derivative, h_tilde,
    h_tilde_prime, zeta_moments, LocalFunction,
};
use crate::quad::{gauss_legendre_composite, trapezoid};
use crate::testfn::{Profile, TestFunction};

/// Tolerance of the closed-form versus enumeration cross-check.
pub const COEFFICIENT_TOLERANCE: f64 = 1e-10;

/// Transport coefficients at a density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub rho: f64,
    pub h_tilde: f64,
    /// Diffusivity `h̃'(ρ) = 1/ρ²`.
    pub diffusivity: f64,
    pub a: f64,
    pub a_prime: f64,
    pub b: f64,
}

impl Coefficients {
    /// Closed forms, checked against exact enumeration.
    pub fn new(rho: f64) -> Result<Self> {
        let c = Self {
            rho,
            h_tilde: h_tilde(rho),
            diffusivity: h_tilde_prime(rho),
            a: a_coef(rho),
            a_prime: a_coef_prime(rho),
            b: b_coef(rho),
        };
        let h = LocalFunction::h();
        let asym = LocalFunction::asym_rate();
        let checks = [
            ("h_tilde", c.h_tilde, exact_local_expectation(&h, rho)?),
            ("h_tilde_prime", c.diffusivity, exact_local_expectation_derivative(&h, rho)?),
            ("A", c.a, exact_local_expectation(&asym, rho)?),
            ("A_prime", c.a_prime, exact_local_expectation_derivative(&asym, rho)?),
            ("B", c.b, zeta_moments(rho)?.1),
        ];
        for (name, closed, enumerated) in checks {
            if (closed - enumerated).abs() > COEFFICIENT_TOLERANCE {
                return Err(FepError::CoefficientMismatch { name, closed, enumerated });
            }
        }
        Ok(c)
    }
}

/// Uniform grid on `[0, T] × [-R, R]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub horizon: f64,
    pub steps: usize,
    pub half_width: f64,
    pub cells: usize,
}

impl Grid {
    pub fn new(horizon: f64, steps: usize, half_width: f64, cells: usize) -> Self {
        Self { horizon, steps, half_width, cells }
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn du(&self) -> f64 {
        2.0 * self.half_width / self.cells as f64
    }

    pub fn positions(&self) -> Vec<f64> {
        let du = self.du();
        (0..=self.cells).map(|i| -self.half_width + du * i as f64).collect()
    }

    pub fn times(&self) -> Vec<f64> {
        let dt = self.dt();
        (0..=self.steps).map(|k| dt * k as f64).collect()
    }
}

/// `α(t, u)` on a grid; `alpha[k][i]` is the value at `times[k]`, `u[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroscopicPath {
    pub times: Vec<f64>,
    pub u: Vec<f64>,
    pub alpha: Vec<Vec<f64>>,
}

impl MacroscopicPath {
    pub fn zero(grid: &Grid) -> Self {
        let u = grid.positions();
        let times = grid.times();
        let alpha = vec![vec![0.0; u.len()]; times.len()];
        Self { times, u, alpha }
    }

    pub fn du(&self) -> f64 {
        self.u[1] - self.u[0]
    }

    /// `μ_{t_k}(G) = ∫ α(t_k, u) G(u) du` by the Riemann sum on the grid.
    pub fn pair(&self, k: usize, g: impl Fn(f64) -> f64) -> f64 {
        self.alpha[k].iter().zip(&self.u).map(|(a, &u)| a * g(u)).sum::<f64>() * self.du()
    }

    /// `μ_t(G)` at an arbitrary time, interpolating linearly between steps.
    pub fn pair_at(&self, t: f64, g: impl Fn(f64) -> f64 + Copy) -> f64 {
        let last = self.times.len() - 1;
        let k = self.times.partition_point(|&s| s <= t).clamp(1, last);
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let w = if t1 > t0 { ((t - t0) / (t1 - t0)).clamp(0.0, 1.0) } else { 1.0 };
        (1.0 - w) * self.pair(k - 1, g) + w * self.pair(k, g)
    }

    pub fn l2_norm(&self, k: usize) -> f64 {
        (self.alpha[k].iter().map(|a| a * a).sum::<f64>() * self.du()).sqrt()
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut p = self.clone();
        p.alpha.iter_mut().flatten().for_each(|a| *a *= c);
        p
    }

    /// Rows `t,u,alpha`; every `stride`-th time step.
    pub fn write_csv<W: Write>(&self, out: W, stride: usize) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "u", "alpha"])?;
        for k in (0..self.times.len()).step_by(stride.max(1)) {
            for (i, &u) in self.u.iter().enumerate() {
                w.write_record([
                    format!("{:.10e}", self.times[k]),
                    format!("{u:.10e}"),
                    format!("{:.17e}", self.alpha[k][i]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Outermost point of a profile's support.
fn reach(p: &Profile) -> f64 {
    if p.is_zero() {
        0.0
    } else {
        p.center().abs() + p.support_radius()
    }
}

/// Crank–Nicolson solution of `∂_t α = h̃' Δα - 2A ΔH` with `α(0) = φ` and
/// homogeneous Dirichlet data at `±R`.
pub fn solve_heat_forced(phi: &Profile, forcing: &TestFunction, coef: &Coefficients, grid: &Grid) -> Result<MacroscopicPath> {
    let d = coef.diffusivity;
    if !(d > 0.0) {
        return Err(FepError::UnstableGrid(format!("diffusivity {d} is not positive")));
    }
    if grid.steps == 0 || grid.cells < 4 || !(grid.horizon > 0.0) {
        return Err(FepError::UnstableGrid(format!("degenerate grid {grid:?}")));
    }
    let needed = reach(phi).max(reach(&forcing.profile)) + 4.0 * (d * grid.horizon).sqrt();
    if grid.half_width < needed {
        return Err(FepError::UnstableGrid(format!(
            "half-width {} below support plus diffusion reach {needed}",
            grid.half_width
        )));
    }
    let u = grid.positions();
    let times = grid.times();
    let m = u.len();
    let (dt, du) = (grid.dt(), grid.du());
    let r = d * dt / (du * du);
    let src = |t: f64| -> Vec<f64> {
        if forcing.is_zero() {
            vec![0.0; m]
        } else {
            u.iter().map(|&x| -2.0 * coef.a * forcing.dxx(t, x)).collect()
        }
    };

    let mut alpha = Vec::with_capacity(times.len());
    let mut cur: Vec<f64> = u.iter().map(|&x| phi.value(x)).collect();
    cur[0] = 0.0;
    cur[m - 1] = 0.0;
    alpha.push(cur.clone());

    // interior system: (1 + r) a_i - r/2 (a_{i-1} + a_{i+1}) = rhs_i
    let n = m - 2;
    let (lower, diag, upper) = (-0.5 * r, 1.0 + r, -0.5 * r);
    let mut cprime = vec![0.0; n];
    let mut dprime = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    let mut f_old = src(0.0);
    for k in 1..times.len() {
        let f_new = src(times[k]);
        for i in 1..=n {
            rhs[i - 1] = cur[i] + 0.5 * r * (cur[i - 1] - 2.0 * cur[i] + cur[i + 1]) + 0.5 * dt * (f_old[i] + f_new[i]);
        }
        // Thomas algorithm
        cprime[0] = upper / diag;
        dprime[0] = rhs[0] / diag;
        for i in 1..n {
            let denom = diag - lower * cprime[i - 1];
            cprime[i] = upper / denom;
            dprime[i] = (rhs[i] - lower * dprime[i - 1]) / denom;
        }
        let mut next = vec![0.0; m];
        next[n] = dprime[n - 1];
        for i in (1..n).rev() {
            next[i] = dprime[i - 1] - cprime[i - 1] * next[i + 1];
        }
        alpha.push(next.clone());
        cur = next;
        f_old = f_new;
    }
    Ok(MacroscopicPath { times, u, alpha })
}

/// `α(t, u) = φ(u - A'(ρ) t)`, evaluated exactly on the grid.
pub fn solve_transport(phi: &Profile, coef: &Coefficients, grid: &Grid) -> MacroscopicPath {
    let u = grid.positions();
    let times = grid.times();
    let alpha = times
        .iter()
        .map(|&t| u.iter().map(|&x| phi.value(x - coef.a_prime * t)).collect())
        .collect();
    MacroscopicPath { times, u, alpha }
}

/// Spatial operator in the linear functional.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    /// `∂_s + h̃'(ρ) Δ`.
    Heat,
    /// `∂_s + A'(ρ) ∇`.
    Transport,
}

/// `ℓ_T(μ, H) = μ_T(H_T) - μ_0(H_0) - ∫_0^T μ_s((∂_s + 𝒜) H_s) ds`, with
/// the trapezoid rule in time. Also returns the sum of the magnitudes of the
/// three terms, the natural scale of the result.
pub fn ell_t_with_scale(path: &MacroscopicPath, h: &TestFunction, coef: &Coefficients, op: Operator) -> (f64, f64) {
    let last = path.times.len() - 1;
    let t_end = path.times[last];
    let end = path.pair(last, |u| h.value(t_end, u));
    let start = path.pair(0, |u| h.value(0.0, u));
    let integrand: Vec<f64> = path
        .times
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            path.pair(k, |u| {
                h.dt(t, u)
                    + match op {
                        Operator::Heat => coef.diffusivity * h.dxx(t, u),
                        Operator::Transport => coef.a_prime * h.dx(t, u),
                    }
            })
        })
        .collect();
    let dt = if last > 0 { t_end / last as f64 } else { 0.0 };
    let integral = trapezoid(&integrand, dt);
    let magnitude: Vec<f64> = integrand.iter().map(|v| v.abs()).collect();
    let scale = end.abs() + start.abs() + trapezoid(&magnitude, dt);
    (end - start - integral, scale)
}

pub fn ell_t(path: &MacroscopicPath, h: &TestFunction, coef: &Coefficients, op: Operator) -> f64 {
    ell_t_with_scale(path, h, coef, op).0
}

/// `∫_0^T p(t) q(t) dt` for polynomial time factors.
fn time_inner(a: &TestFunction, b: &TestFunction, horizon: f64) -> f64 {
    let deg = a.time.degree() + b.time.degree();
    let panels = 1 + deg / 7;
    gauss_legendre_composite(0.0, horizon, panels, |t| a.time.value(t) * b.time.value(t))
}

/// `∫ f(G_i, G_j)(u) du` over the overlap of the supports.
fn space_inner(a: &Profile, b: &Profile, f: impl Fn(f64) -> f64) -> f64 {
    if a.is_zero() || b.is_zero() {
        return 0.0;
    }
    let lo = (a.center() - a.support_radius()).max(b.center() - b.support_radius());
    let hi = (a.center() + a.support_radius()).min(b.center() + b.support_radius());
    if hi <= lo {
        return 0.0;
    }
    gauss_legendre_composite(lo, hi, 2000, f)
}

/// Finite family of test functions with the Gram matrix of
/// `[H, G] = A(ρ) ∫_0^T ∫ ∇H ∇G du dt`.
#[derive(Debug, Clone)]
pub struct RateBasis {
    pub functions: Vec<TestFunction>,
    pub gram: DMatrix<f64>,
    pub horizon: f64,
}

impl RateBasis {
    pub fn new(functions: Vec<TestFunction>, coef: &Coefficients, horizon: f64) -> Self {
        let n = functions.len();
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
        let vals: Vec<f64> = pairs
            .par_iter()
            .map(|&(i, j)| {
                let (a, b) = (&functions[i], &functions[j]);
                coef.a * time_inner(a, b, horizon) * space_inner(&a.profile, &b.profile, |u| a.profile.d1(u) * b.profile.d1(u))
            })
            .collect();
        let mut gram = DMatrix::zeros(n, n);
        for (&(i, j), v) in pairs.iter().zip(vals) {
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
        Self { functions, gram, horizon }
    }

    /// Products `p_k(t) G_j(u)` of monomials `t^k`, `k < degrees`, and profiles.
    pub fn tensor(profiles: &[Profile], degrees: usize, coef: &Coefficients, horizon: f64) -> Self {
        let mut f = Vec::new();
        for g in profiles {
            for k in 0..degrees {
                let mut c = vec![0.0; k + 1];
                // rescaled monomials keep the Gram matrix well conditioned
                c[k] = horizon.powi(-(k as i32));
                f.push(TestFunction::new(*g, crate::testfn::TimeFactor::polynomial(c)));
            }
        }
        Self::new(f, coef, horizon)
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    /// `[H, H]` for `H = Σ c_i H_i`.
    pub fn norm_sq(&self, c: &[f64]) -> f64 {
        let v = DVector::from_column_slice(c);
        (v.transpose() * &self.gram * &v)[(0, 0)]
    }
}

/// A rate value with its maximiser over the basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateValue {
    pub basis_size: usize,
    pub value: f64,
    pub coefficients: Vec<f64>,
    /// The matrix was singular and a pseudo-inverse was used.
    pub singular: bool,
}

/// Relative eigenvalue cutoff of the pseudo-inverse.
const PINV_CUTOFF: f64 = 1e-12;

/// `M⁺ b` through the symmetric eigendecomposition.
fn pinv_solve(m: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, bool) {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l.abs()));
    let mut singular = false;
    let mut coords = eig.eigenvectors.transpose() * b;
    for (c, &l) in coords.iter_mut().zip(eig.eigenvalues.iter()) {
        if l.abs() <= PINV_CUTOFF * max || max == 0.0 {
            *c = 0.0;
            singular = true;
        } else {
            *c /= l;
        }
    }
    (&eig.eigenvectors * coords, singular)
}

/// `sup_H {ℓ_T(μ, H) - [H, H]}` over the span of the basis, `¼ bᵀ M⁻¹ b`.
pub fn q_dyn_sym(path: &MacroscopicPath, basis: &RateBasis, coef: &Coefficients) -> RateValue {
    let b: Vec<f64> = basis
        .functions
        .par_iter()
        .map(|h| ell_t(path, h, coef, Operator::Heat))
        .collect();
    let bv = DVector::from_vec(b);
    let (x, singular) = pinv_solve(&basis.gram, &bv);
    let value = 0.25 * bv.dot(&x);
    RateValue {
        basis_size: basis.len(),
        value: value.max(0.0),
        coefficients: (0.5 * x).iter().copied().collect(),
        singular,
    }
}

/// `sup_φ {μ_0(φ) - ½ B(ρ) ‖φ‖²}` over the span of `basis`, `½ bᵀ M_B⁻¹ b`
/// with `M_B = B(ρ) ∫ φ_i φ_j`.
pub fn q_ini(mu0: &Profile, basis: &[Profile], coef: &Coefficients) -> RateValue {
    let n = basis.len();
    let b: Vec<f64> = basis.iter().map(|p| space_inner(mu0, p, |u| mu0.value(u) * p.value(u))).collect();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = coef.b * space_inner(&basis[i], &basis[j], |u| basis[i].value(u) * basis[j].value(u));
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    let bv = DVector::from_vec(b);
    let (x, singular) = pinv_solve(&m, &bv);
    RateValue {
        basis_size: n,
        value: (0.5 * bv.dot(&x)).max(0.0),
        coefficients: x.iter().copied().collect(),
        singular,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "verdict")]
pub enum AsymVerdict {
    Zero { max_relative: f64 },
    Infinite { basis_index: usize, relative: f64 },
}

impl AsymVerdict {
    pub fn is_zero(&self) -> bool {
        matches!(self, AsymVerdict::Zero { .. })
    }
}

/// Default relative tolerance of [`q_dyn_asym_check`].
pub const ASYM_TOLERANCE: f64 = 1e-8;

/// The asymmetric dynamical rate is a supremum of a linear functional, so
/// it is zero when the transport functional vanishes on every basis element
/// and infinite otherwise. Each value is compared with the magnitude of the
/// terms it is made of.
pub fn q_dyn_asym_check(path: &MacroscopicPath, basis: &RateBasis, coef: &Coefficients, rel_tol: f64) -> AsymVerdict {
    let mut worst = 0.0f64;
    for (i, h) in basis.functions.iter().enumerate() {
        let (v, scale) = ell_t_with_scale(path, h, coef, Operator::Transport);
        if scale == 0.0 {
            continue;
        }
        let rel = v.abs() / scale;
        if rel > rel_tol {
            return AsymVerdict::Infinite { basis_index: i, relative: rel };
        }
        worst = worst.max(rel);
    }
    AsymVerdict::Zero { max_relative: worst }
}
