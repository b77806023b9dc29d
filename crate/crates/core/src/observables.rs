//! Density fluctuation fields, Boltzmann–Gibbs residuals and the exponential
//! martingale, as functions of configurations and as simulation observers.
//!
//! With `κ = a_N/N` and `F(s, η) = κ Σ_x (η_x - ρ) H_s(x/N)`, the martingale is
//!
//! ```text
//! log M_t = F(t, η_t) - F(0, η_0) - ∫_0^t [∂_s F + N^σ Σ_x c_x (e^{ΔF_x} - 1)] ds
//! ```
//!
//! where `ΔF_x = κ (η_{x+1} - η_x)(H(x/N) - H((x+1)/N))` is the change of `F`
//! under the swap of bond `x` and `σ` is the speed exponent.

use std::io::Write;

use crate::dynamics::{Base, Observer};
use crate::error::{FepError, Result};
use crate::lattice::{block_average, h_local, window_rate_sym, Configuration};
use crate::measures::{exact_local_expectation, exact_local_expectation_derivative, h_tilde, LocalFunction};
use crate::quad::{GL4_NODES, GL4_WEIGHTS};
use crate::testfn::{Embedding, Profile, TestFunction, TimeFactor};

/// Sites of the ring covered by the support of `profile`, as indices mod `L`.
pub fn support_sites(profile: &Profile, emb: &Embedding, len: usize) -> Result<Vec<usize>> {
    if profile.is_zero() {
        return Ok(Vec::new());
    }
    let (lo, hi) = emb.site_range(profile.center(), profile.support_radius());
    let sites = (hi - lo + 1) as usize;
    if 2 * sites > len {
        return Err(FepError::SupportExceedsRing { sites, len });
    }
    let l = len as i64;
    Ok((lo..=hi).map(|i| i.rem_euclid(l) as usize).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub t: f64,
    pub value: f64,
}

/// `μ^N(G) = a_N^{-1} Σ_x (η_x - ρ) G(x/N)`.
pub fn field(config: &Configuration, g: &Profile, rho: f64, a_n: f64, emb: &Embedding) -> Result<f64> {
    let sites = support_sites(g, emb, config.len())?;
    Ok(field_on(config, g, rho, a_n, emb, &sites))
}

fn field_on(config: &Configuration, g: &Profile, rho: f64, a_n: f64, emb: &Embedding, sites: &[usize]) -> f64 {
    let (lo, _) = emb.site_range(g.center(), g.support_radius());
    sites
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let u = (lo + k as i64 - emb.origin as i64) as f64 / emb.n;
            (config.get(i) as u8 as f64 - rho) * g.value(u)
        })
        .sum::<f64>()
        / a_n
}

/// `μ^N_t(H_t)` as a time-stamped sample.
pub fn field_sample(
    config: &Configuration,
    h: &TestFunction,
    t: f64,
    rho: f64,
    a_n: f64,
    emb: &Embedding,
) -> Result<FieldSample> {
    let v = field(config, &h.profile, rho, a_n, emb)?;
    Ok(FieldSample { t, value: h.time.value(t) * v })
}

/// Unwrapped positions `u` of the support sites, aligned with [`support_sites`].
fn support_positions(profile: &Profile, emb: &Embedding) -> Vec<f64> {
    let (lo, hi) = emb.site_range(profile.center(), profile.support_radius());
    (lo..=hi).map(|i| (i - emb.origin as i64) as f64 / emb.n).collect()
}

/// Records `μ^N_t(H_t)` for each of a list of test functions.
pub struct FieldObserver {
    names: Vec<String>,
    tests: Vec<TestFunction>,
    sites: Vec<Vec<usize>>,
    weights: Vec<Vec<f64>>,
    rho: f64,
    a_n: f64,
}

impl FieldObserver {
    pub fn new(
        names: Vec<String>,
        tests: Vec<TestFunction>,
        rho: f64,
        a_n: f64,
        emb: &Embedding,
        len: usize,
    ) -> Result<Self> {
        assert_eq!(names.len(), tests.len());
        let mut sites = Vec::new();
        let mut weights = Vec::new();
        for h in &tests {
            sites.push(support_sites(&h.profile, emb, len)?);
            weights.push(if h.profile.is_zero() {
                Vec::new()
            } else {
                support_positions(&h.profile, emb).iter().map(|&u| h.profile.value(u)).collect()
            });
        }
        Ok(Self { names, tests, sites, weights, rho, a_n })
    }
}

impl Observer for FieldObserver {
    fn columns(&self) -> Vec<String> {
        self.names.clone()
    }

    fn record(&mut self, config: &Configuration, t: f64, out: &mut Vec<f64>) {
        for ((h, sites), w) in self.tests.iter().zip(&self.sites).zip(&self.weights) {
            let s: f64 = sites
                .iter()
                .zip(w)
                .map(|(&i, &g)| (config.get(i) as u8 as f64 - self.rho) * g)
                .sum();
            out.push(h.time.value(t) * s / self.a_n);
        }
    }
}

/// `g̃(ρ)` and `g̃'(ρ)` for a local function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linearization {
    pub rho: f64,
    pub value: f64,
    pub slope: f64,
}

impl Linearization {
    pub fn exact(g: &LocalFunction, rho: f64) -> Result<Self> {
        Ok(Self {
            rho,
            value: exact_local_expectation(g, rho)?,
            slope: exact_local_expectation_derivative(g, rho)?,
        })
    }

    /// `V(g, τ_x η) = τ_x g - g̃(ρ) - g̃'(ρ)(η_x - ρ)`.
    #[inline]
    pub fn residual(&self, g: &LocalFunction, config: &Configuration, x: usize) -> f64 {
        g.eval_at(config, x) - self.value - self.slope * (config.get(x) as u8 as f64 - self.rho)
    }
}

/// `V^ℓ(g, τ_x η)`: the average of `τ_{x+y} g` over `|y| ≤ ℓ - s_g`, minus
/// the linearization evaluated at the block density `η^ℓ_x`.
pub fn block_residual(
    config: &Configuration,
    g: &LocalFunction,
    lin: &Linearization,
    half_width: usize,
    x: usize,
) -> Result<f64> {
    let density = block_average(config, x, half_width)?;
    let inner = half_width.saturating_sub(g.half_width());
    let avg = block_mean(config, g, inner, x);
    Ok(avg - lin.value - lin.slope * (density - lin.rho))
}

/// `(2ℓ+1)^{-1} Σ_{|y| ≤ ℓ} τ_{x+y} g`.
pub fn block_mean(config: &Configuration, g: &LocalFunction, half_width: usize, x: usize) -> f64 {
    let l = half_width as isize;
    let len = config.len() as isize;
    (-l..=l)
        .map(|y| g.eval_at(config, (x as isize + y).rem_euclid(len) as usize))
        .sum::<f64>()
        / (2 * half_width + 1) as f64
}

/// Integrates `a_N^{-1} Σ_x τ_x V(g, η_s) H_s(x/N)` along the path and tracks
/// the running supremum of its absolute value.
pub struct BgResidualObserver {
    name: String,
    g: LocalFunction,
    lin: Linearization,
    time: TimeFactor,
    /// Profile values indexed by ring site; zero off the support.
    weight: Vec<f64>,
    sites: Vec<usize>,
    a_n: f64,
    current: f64,
    integral: f64,
    sup: f64,
    jumps: u64,
}

impl BgResidualObserver {
    pub fn new(
        name: impl Into<String>,
        g: LocalFunction,
        lin: Linearization,
        h: &TestFunction,
        a_n: f64,
        emb: &Embedding,
        len: usize,
    ) -> Result<Self> {
        let sites = support_sites(&h.profile, emb, len)?;
        let mut weight = vec![0.0; len];
        if !h.profile.is_zero() {
            for (&i, u) in sites.iter().zip(support_positions(&h.profile, emb)) {
                weight[i] = h.profile.value(u);
            }
        }
        Ok(Self {
            name: name.into(),
            g,
            lin,
            time: h.time.clone(),
            weight,
            sites,
            a_n,
            current: 0.0,
            integral: 0.0,
            sup: 0.0,
            jumps: 0,
        })
    }

    fn full(&self, config: &Configuration) -> f64 {
        self.sites
            .iter()
            .map(|&x| self.lin.residual(&self.g, config, x) * self.weight[x])
            .sum()
    }

    fn local(&self, config: &Configuration, bond: usize) -> f64 {
        let len = config.len() as isize;
        let s = self.g.half_width() as isize;
        (bond as isize - s..=bond as isize + 1 + s)
            .map(|x| x.rem_euclid(len) as usize)
            .filter(|&x| self.weight[x] != 0.0)
            .map(|x| self.lin.residual(&self.g, config, x) * self.weight[x])
            .sum()
    }

    pub fn integral(&self) -> f64 {
        self.integral / self.a_n
    }

    pub fn sup(&self) -> f64 {
        self.sup / self.a_n
    }
}

impl Observer for BgResidualObserver {
    fn columns(&self) -> Vec<String> {
        vec![self.name.clone(), format!("{}_sup", self.name)]
    }

    fn start(&mut self, config: &Configuration, _t: f64) {
        self.current = self.full(config);
        self.integral = 0.0;
        self.sup = 0.0;
    }

    fn hold(&mut self, _config: &Configuration, from: f64, to: f64) {
        if to > from {
            self.integral += self.current * integrate_time(&self.time, from, to);
            self.sup = self.sup.max(self.integral.abs());
        }
    }

    fn before_jump(&mut self, config: &Configuration, bond: usize, _t: f64) {
        self.current -= self.local(config, bond);
    }

    fn after_jump(&mut self, config: &Configuration, bond: usize, _t: f64) {
        self.current += self.local(config, bond);
        self.jumps += 1;
        if self.jumps.is_multiple_of(100_000) {
            self.current = self.full(config);
        }
    }

    fn record(&mut self, _config: &Configuration, _t: f64, out: &mut Vec<f64>) {
        out.push(self.integral());
        out.push(self.sup());
    }
}

/// `∫_a^b p(s) ds`, exact for polynomials of degree up to seven.
fn integrate_time(p: &TimeFactor, a: f64, b: f64) -> f64 {
    if p.is_constant() {
        return p.value(a) * (b - a);
    }
    crate::quad::gauss_legendre4(a, b, |s| p.value(s))
}

/// Largest number of terms used by the series form of the compensator.
const SERIES_MAX_TERMS: usize = 40;

/// Tracks `log M_t(H)` along a path.
pub struct MartingaleObserver {
    name: String,
    base: Base,
    kappa: f64,
    scale: f64,
    rho: f64,
    time: TimeFactor,
    /// `G(x/N)` per ring site.
    g: Vec<f64>,
    /// `G(x/N) - G((x+1)/N)` per bond.
    dg: Vec<f64>,
    bonds: Vec<usize>,
    sites: Vec<usize>,
    /// `Σ_x (η_x - ρ) G(x/N)`.
    s_g: f64,
    /// `m[k] = Σ_x c_x w_x^k` with `w_x = (η_{x+1} - η_x) dg_x`; `m[0]` unused.
    m: Vec<f64>,
    terms: usize,
    f0: f64,
    drift: f64,
    compensator: f64,
    jumps: u64,
}

impl MartingaleObserver {
    /// `horizon` bounds the time factor when choosing the series length.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        base: Base,
        h: &TestFunction,
        rho: f64,
        a_n: f64,
        emb: &Embedding,
        len: usize,
        horizon: f64,
    ) -> Result<Self> {
        let n = emb.n;
        let sites = support_sites(&h.profile, emb, len)?;
        let mut g = vec![0.0; len];
        if !h.profile.is_zero() {
            for (&i, u) in sites.iter().zip(support_positions(&h.profile, emb)) {
                g[i] = h.profile.value(u);
            }
        }
        let mut bonds = Vec::new();
        if let (Some(&first), Some(&last)) = (sites.first(), sites.last()) {
            // bonds touching the support, including the one entering it
            bonds.push((first + len - 1) % len);
            bonds.extend(sites.iter().copied());
            let _ = last;
        }
        let dg: Vec<f64> = (0..len).map(|x| g[x] - g[(x + 1) % len]).collect();
        let kappa = a_n / n;
        let (lo, hi) = h.time.enclosure(0.0, horizon.max(0.0));
        let p_max = lo.abs().max(hi.abs());
        let w_max = dg.iter().fold(0.0f64, |a, &d| a.max(d.abs()));
        let x_max = kappa * p_max * w_max;
        let terms = series_terms(x_max);
        Ok(Self {
            name: name.into(),
            base,
            kappa,
            scale: n.powi(base.speed_exponent()),
            rho,
            time: h.time.clone(),
            g,
            dg,
            bonds,
            sites,
            s_g: 0.0,
            m: vec![0.0; terms.unwrap_or(0) + 1],
            terms: terms.unwrap_or(0),
            f0: 0.0,
            drift: 0.0,
            compensator: 0.0,
            jumps: 0,
        })
    }

    #[inline]
    fn w(&self, config: &Configuration, x: usize) -> f64 {
        (config.occ(x as isize + 1) as f64 - config.occ(x as isize) as f64) * self.dg[x]
    }

    fn add_bond(&mut self, config: &Configuration, x: usize, sign: f64) {
        if self.dg[x] == 0.0 {
            return;
        }
        let c = self.base.rate(config, x) as f64;
        if c == 0.0 {
            return;
        }
        let w = self.w(config, x);
        let mut pw = sign * c;
        for k in 1..=self.terms {
            pw *= w;
            self.m[k] += pw;
        }
    }

    fn add_site(&mut self, config: &Configuration, x: usize, sign: f64) {
        self.s_g += sign * (config.get(x) as u8 as f64 - self.rho) * self.g[x];
    }

    fn recompute(&mut self, config: &Configuration) {
        self.m.iter_mut().for_each(|v| *v = 0.0);
        self.s_g = 0.0;
        for i in 0..self.bonds.len() {
            let x = self.bonds[i];
            self.add_bond(config, x, 1.0);
        }
        for i in 0..self.sites.len() {
            let x = self.sites[i];
            self.add_site(config, x, 1.0);
        }
    }

    fn around(&mut self, config: &Configuration, bond: usize, sign: f64) {
        let len = config.len();
        for k in 0..5 {
            let x = (bond + len + k - 2) % len;
            self.add_bond(config, x, sign);
        }
        self.add_site(config, bond, sign);
        self.add_site(config, (bond + 1) % len, sign);
    }

    /// `Σ_x c_x (e^{κ p w_x} - 1)` in the current configuration.
    fn jump_sum(&self, config: &Configuration, p: f64) -> f64 {
        let x = self.kappa * p;
        if self.terms > 0 {
            // Σ_k x^k m_k / k!, Horner form
            let mut acc = 0.0;
            for k in (1..=self.terms).rev() {
                acc = (acc + self.m[k]) * x / k as f64;
            }
            acc
        } else {
            self.bonds
                .iter()
                .map(|&b| {
                    let c = self.base.rate(config, b) as f64;
                    if c == 0.0 {
                        0.0
                    } else {
                        c * (x * self.w(config, b)).exp_m1()
                    }
                })
                .sum()
        }
    }

    /// Instantaneous compensator density `∂_s F + N^σ Σ c (e^{ΔF} - 1)`.
    pub fn compensator_rate(&self, config: &Configuration, t: f64) -> f64 {
        self.kappa * self.time.derivative(t) * self.s_g + self.scale * self.jump_sum(config, self.time.value(t))
    }

    pub fn log_m(&self, t: f64) -> f64 {
        self.kappa * self.time.value(t) * self.s_g - self.f0 - self.drift - self.compensator
    }

    /// Number of series terms, or `None` when the direct sum is used.
    pub fn series_terms(&self) -> Option<usize> {
        (self.terms > 0).then_some(self.terms)
    }
}

/// Terms needed for `Σ_{k>K} x^k/k!` to be negligible next to `x`, or
/// `None` when the series is not worth it.
fn series_terms(x_max: f64) -> Option<usize> {
    if x_max > 0.5 {
        return None;
    }
    if x_max == 0.0 {
        return Some(1);
    }
    let mut term = x_max;
    for k in 1..SERIES_MAX_TERMS {
        term *= x_max / (k + 1) as f64;
        if term < 1e-18 * x_max {
            return Some(k);
        }
    }
    None
}

impl Observer for MartingaleObserver {
    fn columns(&self) -> Vec<String> {
        vec![self.name.clone()]
    }

    fn start(&mut self, config: &Configuration, t: f64) {
        self.recompute(config);
        self.f0 = self.kappa * self.time.value(t) * self.s_g;
        self.drift = 0.0;
        self.compensator = 0.0;
    }

    fn hold(&mut self, config: &Configuration, from: f64, to: f64) {
        if to <= from {
            return;
        }
        self.drift += self.kappa * self.s_g * (self.time.value(to) - self.time.value(from));
        let integral = if self.time.is_constant() {
            self.jump_sum(config, self.time.value(from)) * (to - from)
        } else {
            let half = 0.5 * (to - from);
            let mid = 0.5 * (to + from);
            (0..4)
                .map(|j| GL4_WEIGHTS[j] * self.jump_sum(config, self.time.value(mid + half * GL4_NODES[j])))
                .sum::<f64>()
                * half
        };
        self.compensator += self.scale * integral;
    }

    fn before_jump(&mut self, config: &Configuration, bond: usize, _t: f64) {
        self.around(config, bond, -1.0);
    }

    fn after_jump(&mut self, config: &Configuration, bond: usize, _t: f64) {
        self.around(config, bond, 1.0);
        self.jumps += 1;
        if self.jumps.is_multiple_of(100_000) {
            self.recompute(config);
        }
    }

    fn record(&mut self, _config: &Configuration, t: f64, out: &mut Vec<f64>) {
        out.push(self.log_m(t));
    }
}

/// `(N/a_N²) e^{-F} (∂_s + L_N) e^{F}` at `(t, η)` for the symmetric model,
/// from the exact exponential form.
pub fn compensator_density(
    config: &Configuration,
    h: &TestFunction,
    t: f64,
    rho: f64,
    a_n: f64,
    emb: &Embedding,
) -> Result<f64> {
    let n = emb.n;
    let kappa = a_n / n;
    let len = config.len();
    let sites = support_sites(&h.profile, emb, len)?;
    let dt_part = field(config, &h.profile, rho, a_n, emb)? * h.time.derivative(t);
    let mut jump = 0.0;
    for x in bonds_of(&sites, len) {
        let u = emb.position(x);
        let c = rate_at(config, x) as f64;
        if c == 0.0 {
            continue;
        }
        let d_eta = config.occ(x as isize + 1) as f64 - config.occ(x as isize) as f64;
        let df = kappa * d_eta * (h.value(t, u) - h.value(t, u + 1.0 / n));
        jump += c * df.exp_m1();
    }
    Ok(dt_part + n * n * n / (a_n * a_n) * jump)
}

/// Second-order expansion of [`compensator_density`]:
/// `a_N^{-1} Σ (τ_x h - h̃(ρ)) Δ_N H + (2N)^{-1} Σ c (η_{x+1} - η_x)² (∇_N H)²`,
/// plus the same time-derivative term.
pub fn compensator_expansion(
    config: &Configuration,
    h: &TestFunction,
    t: f64,
    rho: f64,
    a_n: f64,
    emb: &Embedding,
) -> Result<f64> {
    let n = emb.n;
    let len = config.len();
    let sites = support_sites(&h.profile, emb, len)?;
    let dt_part = field(config, &h.profile, rho, a_n, emb)? * h.time.derivative(t);
    let p = h.time.value(t);
    let ht = h_tilde(rho);
    let (mut first, mut second) = (0.0, 0.0);
    // Δ_N H is supported one site beyond the support of H
    let mut ext = sites.clone();
    ext.insert(0, (sites[0] + len - 1) % len);
    ext.push((sites[sites.len() - 1] + 1) % len);
    for &x in &ext {
        let u = emb.position(x);
        first += (h_local(config, x) - ht) * p * h.profile.lap_n(u, n);
    }
    for x in bonds_of(&sites, len) {
        let u = emb.position(x);
        let c = rate_at(config, x) as f64;
        let d_eta = config.occ(x as isize + 1) as f64 - config.occ(x as isize) as f64;
        second += c * d_eta * d_eta * (p * h.profile.grad_n(u, n)).powi(2);
    }
    Ok(dt_part + first / a_n + second / (2.0 * n))
}

fn rate_at(config: &Configuration, x: usize) -> u8 {
    let x = x as isize;
    window_rate_sym([config.occ(x - 1), config.occ(x), config.occ(x + 1), config.occ(x + 2)])
}

fn bonds_of(sites: &[usize], len: usize) -> Vec<usize> {
    let mut b = Vec::with_capacity(sites.len() + 1);
    if let Some(&first) = sites.first() {
        b.push((first + len - 1) % len);
        b.extend_from_slice(sites);
    }
    b
}

/// Average of `τ_x g` over the whole ring.
pub struct SpatialAverage {
    pub name: String,
    pub g: LocalFunction,
}

impl Observer for SpatialAverage {
    fn columns(&self) -> Vec<String> {
        vec![self.name.clone()]
    }

    fn record(&mut self, config: &Configuration, _t: f64, out: &mut Vec<f64>) {
        let len = config.len();
        out.push((0..len).map(|x| self.g.eval_at(config, x)).sum::<f64>() / len as f64);
    }
}

/// `(N/a_N²) log E[exp{(a_N²/N) μ}]` estimated from field samples.
pub fn log_mgf_estimate(fields: &[f64], a_n: f64, n: f64) -> f64 {
    let theta = a_n * a_n / n;
    // log-sum-exp for stability
    let max = fields.iter().map(|&f| theta * f).fold(f64::NEG_INFINITY, f64::max);
    let mean = fields.iter().map(|&f| (theta * f - max).exp()).sum::<f64>() / fields.len() as f64;
    (max + mean.ln()) / theta
}

/// Writes `replica,t,<value_name>` rows.
pub fn write_series_csv<W: Write>(
    out: W,
    value_name: &str,
    rows: impl IntoIterator<Item = (usize, f64, f64)>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["replica", "t", value_name])?;
    for (r, t, v) in rows {
        w.write_record([r.to_string(), format!("{t:.17e}"), format!("{v:.17e}")])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{simulate, RateModel, SimOptions};
    use crate::measures::{b_coef, GrandCanonical};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn field_is_linear_and_local() {
        let emb = Embedding::centered(50.0, 400);
        let g = Profile::gaussian(1.0, 0.1, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = GrandCanonical::new(0.75).unwrap().sample_ring(400, &mut rng);
        let a = field(&c, &g, 0.75, 7.0, &emb).unwrap();
        let b = field(&c, &g.scaled(2.5), 0.75, 7.0, &emb).unwrap();
        assert!((b - 2.5 * a).abs() < 1e-12);
        // one more particle at x0 shifts the field by G(x0/N)/a_N
        let x0 = (0..400).find(|&i| !c.get(i) && (emb.position(i) - 0.1).abs() < 0.1).unwrap();
        let mut d = c.clone();
        d.set(x0, true);
        let diff = field(&d, &g, 0.75, 7.0, &emb).unwrap() - a;
        assert!((diff - g.value(emb.position(x0)) / 7.0).abs() < 1e-12);
        assert_eq!(field(&c, &Profile::zero(), 0.75, 7.0, &emb).unwrap(), 0.0);
        assert!(matches!(
            field(&c, &Profile::gaussian(1.0, 0.0, 1.0), 0.75, 7.0, &emb),
            Err(FepError::SupportExceedsRing { .. })
        ));
    }

    #[test]
    fn static_field_variance() {
        let n = 200.0;
        let len = 1200;
        let emb = Embedding::centered(n, len);
        let g = Profile::gaussian(std::f64::consts::PI.powf(-0.25) / 0.15f64.sqrt(), 0.0, 0.15);
        assert!((g.l2_norm_sq() - 1.0).abs() < 1e-12);
        let gc = GrandCanonical::new(0.75).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let reps = 20_000;
        let samples: Vec<f64> = (0..reps)
            .map(|_| field(&gc.sample_ring(len, &mut rng), &g, 0.75, n.sqrt(), &emb).unwrap())
            .collect();
        let mean = samples.iter().sum::<f64>() / reps as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        assert!((var / b_coef(0.75) - 1.0).abs() < 0.05, "{var}");
        // at a_N = √N the scaled log-MGF is half the variance
        let lm = log_mgf_estimate(&samples, n.sqrt(), n);
        assert!((lm / (0.5 * b_coef(0.75)) - 1.0).abs() < 0.15, "{lm}");
    }

    #[test]
    fn linear_local_functions_have_no_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = GrandCanonical::new(0.7).unwrap().sample_ring(100, &mut rng);
        for g in [LocalFunction::occupation(), LocalFunction::constant(2.5)] {
            let lin = Linearization::exact(&g, 0.7).unwrap();
            for x in 0..100 {
                assert!(lin.residual(&g, &c, x).abs() < 1e-14);
            }
        }
        // the block version with ℓ' = ℓ vanishes for η_0
        let g = LocalFunction::occupation();
        let lin = Linearization::exact(&g, 0.7).unwrap();
        assert!(block_residual(&c, &g, &lin, 5, 17).unwrap().abs() < 1e-14);
        let full = Configuration::full(20);
        let h = LocalFunction::h();
        let lin = Linearization::exact(&h, 0.7).unwrap();
        let expect = 1.0 - lin.value - lin.slope * (1.0 - 0.7);
        assert!((block_residual(&full, &h, &lin, 3, 0).unwrap() - expect).abs() < 1e-14);
        assert!(matches!(
            block_residual(&full, &h, &lin, 10, 0),
            Err(FepError::WindowTooLarge { .. })
        ));
    }

    #[test]
    fn bg_observer_matches_direct_integration() {
        let n = 20.0;
        let len = 400;
        let emb = Embedding::centered(n, len);
        let h = TestFunction::new(Profile::gaussian(1.0, 0.0, 0.5), TimeFactor::polynomial(vec![1.0, 2.0]));
        let g = LocalFunction::h();
        let lin = Linearization::exact(&g, 0.75).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = GrandCanonical::new(0.75).unwrap().sample_ring(len, &mut rng);
        let mut obs = BgResidualObserver::new("bg", g.clone(), lin, &h, 3.0, &emb, len).unwrap();
        let mut trace = Vec::new();
        let horizon = 0.01;
        let path = simulate(
            &c,
            &RateModel::symmetric(n),
            &emb,
            horizon,
            &mut [&mut obs],
            SimOptions { trace: Some(&mut trace), ..Default::default() },
            &mut rng,
        )
        .unwrap();
        // replay the trace and integrate the piecewise-constant integrand
        let sites = support_sites(&h.profile, &emb, len).unwrap();
        let value = |cfg: &Configuration| -> f64 {
            sites
                .iter()
                .map(|&x| lin.residual(&g, cfg, x) * h.profile.value(emb.position(x)))
                .sum::<f64>()
                / 3.0
        };
        let mut cfg = c.clone();
        let (mut t, mut total) = (0.0, 0.0);
        for (dt, b) in crate::dynamics::read_trace(&trace).unwrap() {
            let p_int = (t + dt) + (t + dt).powi(2) - t - t * t;
            total += value(&cfg) * p_int;
            t += dt;
            cfg.swap_in_place(b as usize);
        }
        total += value(&cfg) * (horizon + horizon * horizon - t - t * t);
        assert!((path.last("bg").unwrap() - total).abs() < 1e-9 * (1.0 + total.abs()));
        assert!(path.last("bg_sup").unwrap() >= total.abs() - 1e-12);
    }

    #[test]
    fn martingale_trivial_cases() {
        let n = 10.0;
        let len = 200;
        let emb = Embedding::centered(n, len);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = GrandCanonical::new(0.75).unwrap().sample_ring(len, &mut rng);
        let zero = TestFunction::stationary(Profile::zero());
        let mut m0 = MartingaleObserver::new("m", Base::Symmetric, &zero, 0.75, 5.0, &emb, len, 1.0).unwrap();
        let p = simulate(&c, &RateModel::symmetric(n), &emb, 1.0, &mut [&mut m0], SimOptions::default(), &mut rng)
            .unwrap();
        assert!(p.series("m").unwrap().iter().all(|&v| v == 0.0));

        let full = Configuration::full(len);
        for time in [TimeFactor::constant(1.0), TimeFactor::polynomial(vec![1.0, -3.0, 2.0])] {
            let h = TestFunction::new(Profile::gaussian(1.0, 0.0, 0.5), time);
            let mut m = MartingaleObserver::new("m", Base::Symmetric, &h, 0.75, 5.0, &emb, len, 1.0).unwrap();
            let p = simulate(
                &full,
                &RateModel::symmetric(n),
                &emb,
                1.0,
                &mut [&mut m],
                SimOptions { sample_times: vec![0.3, 0.6], ..Default::default() },
                &mut rng,
            )
            .unwrap();
            for v in p.series("m").unwrap() {
                assert!(v.abs() < 1e-12, "{v}");
            }
        }
    }

    #[test]
    fn series_compensator_matches_direct_sum() {
        let n = 40.0;
        let len = 500;
        let emb = Embedding::centered(n, len);
        let h = TestFunction::new(Profile::gaussian(2.0, 0.1, 0.3), TimeFactor::polynomial(vec![0.5, 1.0]));
        let a_n = n.powf(0.75);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = GrandCanonical::new(0.75).unwrap().sample_ring(len, &mut rng);
        let mut m = MartingaleObserver::new("m", Base::Symmetric, &h, 0.75, a_n, &emb, len, 1.0).unwrap();
        assert!(m.series_terms().is_some());
        m.start(&c, 0.0);
        for t in [0.0, 0.4, 1.0] {
            let series = m.compensator_rate(&c, t);
            let direct = compensator_density(&c, &h, t, 0.75, a_n, &emb).unwrap() * a_n * a_n / n;
            assert!((series - direct).abs() < 1e-10 * direct.abs().max(1.0), "{series} vs {direct}");
        }
    }

    #[test]
    fn compensator_expansion_error_is_small() {
        let rho = 0.75;
        let gc = GrandCanonical::new(rho).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = TestFunction::stationary(Profile::gaussian(1.0, 0.0, 0.2));
        let mut errs = Vec::new();
        for n in [250.0f64, 1000.0, 4000.0] {
            let len = (8.0 * n) as usize;
            let emb = Embedding::centered(n, len);
            let a_n = n.powf(0.75);
            let mut worst = 0.0f64;
            for _ in 0..5 {
                let c = gc.sample_ring(len, &mut rng);
                let exact = compensator_density(&c, &h, 0.0, rho, a_n, &emb).unwrap();
                let approx = compensator_expansion(&c, &h, 0.0, rho, a_n, &emb).unwrap();
                worst = worst.max((exact - approx).abs());
            }
            // O(a_N/N²) per unit time
            assert!(worst < 10.0 * a_n / (n * n), "N={n}: {worst}");
            errs.push(worst);
        }
        assert!(errs[2] < errs[0]);
    }

    #[test]
    fn martingale_has_mean_one_on_a_small_system() {
        let n = 8.0;
        let len = 80;
        let emb = Embedding::centered(n, len);
        let h = TestFunction::new(Profile::gaussian(1.5, 0.0, 0.25), TimeFactor::polynomial(vec![1.0, 1.0]));
        let a_n = n.powf(0.8);
        let gc = GrandCanonical::new(0.75).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let reps = 4000;
        let vals: Vec<f64> = (0..reps)
            .map(|_| {
                let c = gc.sample_ring(len, &mut rng);
                let mut m = MartingaleObserver::new("m", Base::Symmetric, &h, 0.75, a_n, &emb, len, 0.05).unwrap();
                let p = simulate(&c, &RateModel::symmetric(n), &emb, 0.05, &mut [&mut m], SimOptions::default(), &mut rng)
                    .unwrap();
                p.last("m").unwrap().exp()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / reps as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        let se = sd / (reps as f64).sqrt();
        assert!(sd > 0.05, "tilt too weak to test anything: {sd}");
        assert!((mean - 1.0).abs() < 3.5 * se, "{mean} ± {se}");
    }

    #[test]
    fn series_csv() {
        let mut buf = Vec::new();
        write_series_csv(&mut buf, "value", [(0, 0.0, 1.0), (1, 0.5, -2.0)]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("replica,t,value\n0,"));
        assert_eq!(s.lines().count(), 3);
    }
}
