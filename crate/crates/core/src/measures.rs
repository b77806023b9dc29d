//! Grand-canonical, canonical and perturbed measures on the ergodic
//! component.
//!
//! Under the grand-canonical measure at density `ρ ∈ (1/2, 1)` the occupation
//! variables read left to right form a two-state Markov chain: the first site
//! is Bernoulli(ρ), an occupied site is followed by a particle with
//! probability `d(ρ) = (2ρ-1)/ρ`, and an empty site is always followed by a
//! particle. Every exact quantity below is computed from this chain.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FepError, Result};
use crate::lattice::{window_h, window_rate_asym, window_rate_sym, Configuration};
use crate::testfn::{Embedding, Profile};

/// Largest support half-width handled by exact enumeration.
pub const EXACT_HALF_WIDTH_LIMIT: usize = 6;
/// Largest support half-width a [`LocalFunction`] table may have.
pub const TABLE_HALF_WIDTH_LIMIT: usize = 10;
/// Step of the central finite-difference cross-check of `g̃'`.
pub const FD_STEP: f64 = 1e-6;

/// `d(ρ) = (2ρ-1)/ρ`.
#[inline]
pub fn d(rho: f64) -> f64 {
    (2.0 * rho - 1.0) / rho
}

/// `d'(ρ) = 1/ρ²`.
#[inline]
pub fn d_prime(rho: f64) -> f64 {
    1.0 / (rho * rho)
}

/// `h̃(ρ) = E_ρ[h] = (2ρ-1)/ρ`.
pub fn h_tilde(rho: f64) -> f64 {
    d(rho)
}

/// `h̃'(ρ) = 1/ρ²`, the macroscopic diffusivity.
pub fn h_tilde_prime(rho: f64) -> f64 {
    1.0 / (rho * rho)
}

/// `A(ρ) = (1-ρ)(2ρ-1)/ρ`.
pub fn a_coef(rho: f64) -> f64 {
    (1.0 - rho) * (2.0 * rho - 1.0) / rho
}

/// `A'(ρ) = 1/ρ² - 2`, the transport speed of asymmetric fluctuations.
pub fn a_coef_prime(rho: f64) -> f64 {
    1.0 / (rho * rho) - 2.0
}

/// `B(ρ) = (2ρ-1)ρ(1-ρ)`, the static fluctuation variance.
pub fn b_coef(rho: f64) -> f64 {
    (2.0 * rho - 1.0) * rho * (1.0 - rho)
}

fn check_density(rho: f64) -> Result<()> {
    if rho > 0.5 && rho < 1.0 {
        Ok(())
    } else {
        Err(FepError::InvalidDensity(rho))
    }
}

/// Transition probability `P(next | prev)` of the chain with parameter `dd`.
#[inline]
fn step(prev: u8, next: u8, dd: f64) -> f64 {
    match (prev, next) {
        (1, 1) => dd,
        (1, _) => 1.0 - dd,
        (_, 1) => 1.0,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrandCanonical {
    rho: f64,
}

impl GrandCanonical {
    pub fn new(rho: f64) -> Result<Self> {
        check_density(rho)?;
        Ok(Self { rho })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn d(&self) -> f64 {
        d(self.rho)
    }

    /// `d̃(ρ) = 1 - d(ρ) = (1-ρ)/ρ`.
    pub fn d_tilde(&self) -> f64 {
        1.0 - self.d()
    }

    pub fn transition(&self, prev: u8, next: u8) -> f64 {
        step(prev, next, self.d())
    }

    /// Open segment of `len` sites drawn from the chain.
    pub fn sample_segment<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Configuration {
        let dd = self.d();
        let mut c = Configuration::empty(len);
        let mut prev = rng.random::<f64>() < self.rho;
        c.set(0, prev);
        for i in 1..len {
            let next = !prev || rng.random::<f64>() < dd;
            c.set(i, next);
            prev = next;
        }
        c
    }

    /// Ring of `len` sites from the translation-invariant cyclic chain
    /// `∝ Π_i P(η_i → η_{i+1 mod L})`, by rejection on the closing bond.
    pub fn sample_ring<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Configuration {
        let dd = self.d();
        loop {
            let c = self.sample_segment(len, rng);
            let (last, first) = (c.get(len - 1) as u8, c.get(0) as u8);
            if accept_closure(last, first, self.rho, dd, rng) {
                return c;
            }
        }
    }
}

/// Acceptance step turning an open chain sample into a cyclic one. The
/// ratio of cyclic to open weight is `P(last → first)/π(first) ≤ 1/ρ`.
fn accept_closure<R: Rng + ?Sized>(last: u8, first: u8, rho: f64, dd: f64, rng: &mut R) -> bool {
    let marginal = if first == 1 { rho } else { 1.0 - rho };
    let p = rho * step(last, first, dd) / marginal;
    p >= 1.0 || rng.random::<f64>() < p
}

/// `π_ρ(η|_{1..ℓ} = σ)` from the closed-form product, for an ergodic word.
pub fn segment_pmf(word: &[u8], gc: &GrandCanonical) -> Result<f64> {
    if word.is_empty() {
        return Ok(1.0);
    }
    check_word(word)?;
    let l = word.len() as i32;
    let p = word.iter().map(|&b| b as i32).sum::<i32>();
    let (first, last) = (word[0] as i32, word[word.len() - 1] as i32);
    let dd = gc.d();
    Ok((1.0 - gc.rho) * dd.powi(2 * p - l + 1 - first - last) * (1.0 - dd).powi(l - 1 - p))
}

/// The same probability as a Markov-chain product.
pub fn segment_pmf_chain(word: &[u8], gc: &GrandCanonical) -> f64 {
    let Some(&first) = word.first() else { return 1.0 };
    let mut p = if first == 1 { gc.rho } else { 1.0 - gc.rho };
    for w in word.windows(2) {
        p *= gc.transition(w[0], w[1]);
    }
    p
}

/// `∂_ρ π_ρ(σ)` for an ergodic word, via the logarithmic derivative of the
/// chain product.
pub fn segment_pmf_derivative(word: &[u8], gc: &GrandCanonical) -> f64 {
    let Some(&first) = word.first() else { return 0.0 };
    let rho = gc.rho;
    let dd = gc.d();
    let (mut n11, mut n10) = (0.0, 0.0);
    for w in word.windows(2) {
        match (w[0], w[1]) {
            (1, 1) => n11 += 1.0,
            (1, 0) => n10 += 1.0,
            (0, 0) => return 0.0,
            _ => {}
        }
    }
    let dlog_first = if first == 1 { 1.0 / rho } else { -1.0 / (1.0 - rho) };
    let dlog = dlog_first + (n11 / dd - n10 / (1.0 - dd)) * d_prime(rho);
    segment_pmf_chain(word, gc) * dlog
}

fn check_word(word: &[u8]) -> Result<()> {
    if word.windows(2).any(|w| w[0] == 0 && w[1] == 0) {
        let s: String = word.iter().map(|b| if *b == 1 { '1' } else { '0' }).collect();
        return Err(FepError::NonErgodicWord(s));
    }
    Ok(())
}

/// Bits of `pattern` as a word of `len` sites, least significant first.
pub fn word_of(pattern: u64, len: usize) -> Vec<u8> {
    (0..len).map(|i| ((pattern >> i) & 1) as u8).collect()
}

/// All open words of length `len` without two adjacent zeros, as bit patterns.
pub fn ergodic_words(len: usize) -> Vec<u64> {
    assert!(len < 64);
    let mut out = Vec::new();
    // Extend valid prefixes one site at a time.
    let mut frontier = vec![0u64, 1u64];
    for i in 1..len {
        let mut next = Vec::with_capacity(frontier.len() * 2);
        for p in frontier {
            next.push(p | (1 << i));
            if (p >> (i - 1)) & 1 == 1 {
                next.push(p);
            }
        }
        frontier = next;
    }
    if len > 0 {
        out.extend(frontier);
    }
    out.sort_unstable();
    out
}

/// A function of the sites `-s..=s`, stored as a lookup table indexed by the
/// window bits (bit `i` is site `i - s`).
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFunction {
    half_width: usize,
    table: Vec<f64>,
}

impl LocalFunction {
    pub fn from_fn<F: Fn(&[u8]) -> f64>(half_width: usize, f: F) -> Result<Self> {
        if half_width > TABLE_HALF_WIDTH_LIMIT {
            return Err(FepError::SupportTooWide(half_width));
        }
        let width = 2 * half_width + 1;
        let table = (0..1u64 << width).map(|p| f(&word_of(p, width))).collect();
        Ok(Self { half_width, table })
    }

    pub fn constant(c: f64) -> Self {
        Self { half_width: 0, table: vec![c, c] }
    }

    /// `η_0`.
    pub fn occupation() -> Self {
        Self { half_width: 0, table: vec![0.0, 1.0] }
    }

    /// `h(η) = η_{-1}η_0 + η_0η_1 - η_{-1}η_0η_1`.
    pub fn h() -> Self {
        Self::from_fn(1, |w| window_h([w[0], w[1], w[2]]) as f64).unwrap()
    }

    /// `c_{0,1}(η)(η_0 - η_1)²` for the symmetric rate.
    pub fn bond_activity() -> Self {
        Self::from_fn(2, |w| {
            let c = window_rate_sym([w[1], w[2], w[3], w[4]]) as f64;
            c * (w[2] as f64 - w[3] as f64).powi(2)
        })
        .unwrap()
    }

    /// The asymmetric rate `c_{0,1}(η) = η_{-1}η_0(1-η_1)`.
    pub fn asym_rate() -> Self {
        Self::from_fn(1, |w| window_rate_asym([w[0], w[1], w[2]]) as f64).unwrap()
    }

    pub fn half_width(&self) -> usize {
        self.half_width
    }

    /// Value on the window given as a bit pattern.
    #[inline]
    pub fn eval_pattern(&self, pattern: u64) -> f64 {
        self.table[pattern as usize]
    }

    pub fn eval_word(&self, word: &[u8]) -> f64 {
        assert_eq!(word.len(), 2 * self.half_width + 1);
        let p = word.iter().enumerate().fold(0u64, |acc, (i, &b)| acc | ((b as u64) << i));
        self.eval_pattern(p)
    }

    /// `τ_x g(η)` on a ring.
    #[inline]
    pub fn eval_at(&self, config: &Configuration, x: usize) -> f64 {
        let s = self.half_width as isize;
        let x = x as isize;
        let mut p = 0u64;
        for (i, y) in (x - s..=x + s).enumerate() {
            p |= (config.occ(y) as u64) << i;
        }
        self.eval_pattern(p)
    }
}

/// `g̃(ρ) = E_{π_ρ}[g]` by exact enumeration of ergodic windows.
pub fn exact_local_expectation(g: &LocalFunction, rho: f64) -> Result<f64> {
    let gc = GrandCanonical::new(rho)?;
    let width = enumeration_width(g)?;
    Ok(ergodic_words(width)
        .into_iter()
        .map(|p| g.eval_pattern(p) * segment_pmf_chain(&word_of(p, width), &gc))
        .sum())
}

/// `g̃'(ρ)` from the analytic derivative of the segment probabilities.
pub fn exact_local_expectation_derivative(g: &LocalFunction, rho: f64) -> Result<f64> {
    let gc = GrandCanonical::new(rho)?;
    let width = enumeration_width(g)?;
    Ok(ergodic_words(width)
        .into_iter()
        .map(|p| g.eval_pattern(p) * segment_pmf_derivative(&word_of(p, width), &gc))
        .sum())
}

/// Central finite-difference cross-check of `g̃'(ρ)` with step [`FD_STEP`].
pub fn finite_difference_derivative(g: &LocalFunction, rho: f64) -> Result<f64> {
    let up = exact_local_expectation(g, rho + FD_STEP)?;
    let down = exact_local_expectation(g, rho - FD_STEP)?;
    Ok((up - down) / (2.0 * FD_STEP))
}

fn enumeration_width(g: &LocalFunction) -> Result<usize> {
    if g.half_width > EXACT_HALF_WIDTH_LIMIT {
        return Err(FepError::SupportTooWide(g.half_width));
    }
    Ok(2 * g.half_width + 1)
}

/// Monte Carlo estimate of `g̃(ρ)` for supports beyond exact enumeration.
/// Returns the mean and its standard error.
pub fn mc_local_expectation<R: Rng + ?Sized>(
    g: &LocalFunction,
    rho: f64,
    samples: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let gc = GrandCanonical::new(rho)?;
    let width = 2 * g.half_width + 1;
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..samples {
        let c = gc.sample_segment(width, rng);
        let v = g.eval_pattern(c.pattern());
        s += v;
        s2 += v * v;
    }
    let n = samples as f64;
    let mean = s / n;
    let var = (s2 / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    Ok((mean, (var / n).sqrt()))
}

/// `ζ_0 = ρ(η_0 - ρ) + (1-ρ)(η_{-1} - ρ)`.
pub fn zeta(prev: u8, here: u8, rho: f64) -> f64 {
    rho * (here as f64 - rho) + (1.0 - rho) * (prev as f64 - rho)
}

/// Exact mean and variance of `ζ_0` from the two-site marginal.
pub fn zeta_moments(rho: f64) -> Result<(f64, f64)> {
    let gc = GrandCanonical::new(rho)?;
    let (mut m1, mut m2) = (0.0, 0.0);
    for (a, b) in [(0u8, 1u8), (1, 0), (1, 1)] {
        let p = segment_pmf_chain(&[a, b], &gc);
        let z = zeta(a, b, rho);
        m1 += p * z;
        m2 += p * z * z;
    }
    Ok((m1, m2 - m1 * m1))
}

/// `E[ζ_0 | η_{-1} = prev]`.
pub fn zeta_conditional_mean(prev: u8, rho: f64) -> Result<f64> {
    let gc = GrandCanonical::new(rho)?;
    Ok([0u8, 1]
        .iter()
        .map(|&b| gc.transition(prev, b) * zeta(prev, b, rho))
        .sum())
}

/// `E[ζ_x² | η_{x-lag} = s]` for `lag ≥ 1`, by propagating the chain.
pub fn zeta_sq_conditional(rho: f64, lag: usize, s: u8) -> Result<f64> {
    assert!(lag >= 1);
    let gc = GrandCanonical::new(rho)?;
    // law of η_{x-1} given η_{x-lag} = s
    let mut law = if s == 1 { [0.0, 1.0] } else { [1.0, 0.0] };
    for _ in 1..lag {
        law = [
            law[1] * gc.transition(1, 0),
            law[0] * gc.transition(0, 1) + law[1] * gc.transition(1, 1),
        ];
    }
    let mut out = 0.0;
    for a in 0..2u8 {
        for b in 0..2u8 {
            out += law[a as usize] * gc.transition(a, b) * zeta(a, b, rho).powi(2);
        }
    }
    Ok(out)
}

/// Writes `word,probability` rows for all ergodic words of length `len`.
pub fn write_pmf_table<W: Write>(out: W, len: usize, gc: &GrandCanonical) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["word", "probability"])?;
    for p in ergodic_words(len) {
        let word = word_of(p, len);
        let s: String = word.iter().map(|b| if *b == 1 { '1' } else { '0' }).collect();
        w.write_record([s, format!("{:.17e}", segment_pmf(&word, gc)?)])?;
    }
    w.flush()?;
    Ok(())
}

/// `π_ρ` conditioned on `k` particles in a `2ℓ+1` window with boundary
/// occupations `left` and `right` just outside it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalWindow {
    pub half_width: usize,
    pub particles: usize,
    pub left: u8,
    pub right: u8,
}

/// Backward weights of the conditioned chain. `beta[i][s][m]` is the
/// (rescaled) weight of completing the window from site `i` in state `s`
/// with `m` particles used so far, ending in the right boundary.
struct CanonicalTable {
    width: usize,
    k: usize,
    beta: Vec<f64>,
    dd: f64,
}

impl CanonicalTable {
    #[inline]
    fn idx(&self, i: usize, s: u8, m: usize) -> usize {
        (i * 2 + s as usize) * (self.k + 1) + m
    }

    fn get(&self, i: usize, s: u8, m: usize) -> f64 {
        if m > self.k {
            0.0
        } else {
            self.beta[self.idx(i, s, m)]
        }
    }
}

impl CanonicalWindow {
    pub fn new(half_width: usize, particles: usize, left: u8, right: u8) -> Self {
        assert!(left <= 1 && right <= 1);
        Self { half_width, particles, left, right }
    }

    /// Window closest to density `rho`, with occupied boundaries.
    pub fn at_density(half_width: usize, rho: f64) -> Self {
        let width = 2 * half_width + 1;
        Self::new(half_width, (rho * width as f64).round() as usize, 1, 1)
    }

    pub fn width(&self) -> usize {
        2 * self.half_width + 1
    }

    pub fn density(&self) -> f64 {
        self.particles as f64 / self.width() as f64
    }

    fn empty_support(&self) -> FepError {
        FepError::EmptySupport {
            len: self.width(),
            particles: self.particles,
            left: self.left,
            right: self.right,
        }
    }

    fn table(&self, gc: &GrandCanonical) -> Result<CanonicalTable> {
        let width = self.width();
        let k = self.particles;
        if k > width {
            return Err(self.empty_support());
        }
        let mut t = CanonicalTable {
            width,
            k,
            beta: vec![0.0; (width + 1) * 2 * (k + 1)],
            dd: gc.d(),
        };
        // sites are 1..=width; index 0 stands for the left boundary
        for s in 0..2u8 {
            let i = t.idx(width, s, k);
            t.beta[i] = step(s, self.right, t.dd);
        }
        for i in (1..width).rev() {
            let mut max = 0.0f64;
            for s in 0..2u8 {
                for m in 0..=k {
                    let v: f64 = (0..2u8)
                        .map(|n| step(s, n, t.dd) * t.get(i + 1, n, m + n as usize))
                        .sum();
                    let j = t.idx(i, s, m);
                    t.beta[j] = v;
                    max = max.max(v);
                }
            }
            if max > 0.0 {
                for s in 0..2u8 {
                    for m in 0..=k {
                        let j = t.idx(i, s, m);
                        t.beta[j] /= max;
                    }
                }
            }
        }
        let z: f64 = (0..2u8)
            .map(|s| step(self.left, s, t.dd) * t.get(1, s, s as usize))
            .sum();
        if z <= 0.0 {
            return Err(self.empty_support());
        }
        Ok(t)
    }

    /// Exact sample of the window contents (sites `-ℓ..=ℓ`).
    pub fn sample<R: Rng + ?Sized>(&self, gc: &GrandCanonical, rng: &mut R) -> Result<Vec<u8>> {
        let t = self.table(gc)?;
        Ok(self.sample_with(&t, rng))
    }

    /// Draws `count` samples, building the weight table once.
    pub fn sample_many<R: Rng + ?Sized>(
        &self,
        gc: &GrandCanonical,
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<u8>>> {
        let t = self.table(gc)?;
        Ok((0..count).map(|_| self.sample_with(&t, rng)).collect())
    }

    fn sample_with<R: Rng + ?Sized>(&self, t: &CanonicalTable, rng: &mut R) -> Vec<u8> {
        let mut out = Vec::with_capacity(t.width);
        let (mut prev, mut used) = (self.left, 0usize);
        for i in 1..=t.width {
            let w0 = step(prev, 0, t.dd) * t.get(i, 0, used);
            let w1 = step(prev, 1, t.dd) * t.get(i, 1, used + 1);
            let next = if rng.random::<f64>() * (w0 + w1) < w1 { 1 } else { 0 };
            used += next as usize;
            out.push(next);
            prev = next;
        }
        out
    }

    /// Exact one-site occupation probabilities under the conditioned chain.
    pub fn marginals(&self, gc: &GrandCanonical) -> Result<Vec<f64>> {
        let t = self.table(gc)?;
        let k = t.k;
        // forward[s][m]: probability of being in state s at site i with m used
        let mut fwd = vec![[0.0f64; 2]; k + 1];
        let mut out = Vec::with_capacity(t.width);
        for s in 0..2u8 {
            let m = s as usize;
            if m <= k {
                fwd[m][s as usize] = step(self.left, s, t.dd);
            }
        }
        for i in 1..=t.width {
            let (mut occ, mut total) = (0.0, 0.0);
            for (m, f) in fwd.iter().enumerate() {
                for s in 0..2u8 {
                    let w = f[s as usize] * t.get(i, s, m);
                    total += w;
                    if s == 1 {
                        occ += w;
                    }
                }
            }
            out.push(occ / total);
            if i == t.width {
                break;
            }
            let mut next = vec![[0.0f64; 2]; k + 1];
            let mut norm = 0.0f64;
            for m in 0..=k {
                for s in 0..2u8 {
                    let f = fwd[m][s as usize];
                    if f == 0.0 {
                        continue;
                    }
                    for n in 0..2u8 {
                        let mm = m + n as usize;
                        if mm <= k {
                            let v = f * step(s, n, t.dd);
                            next[mm][n as usize] += v;
                            norm = norm.max(v);
                        }
                    }
                }
            }
            if norm > 0.0 {
                next.iter_mut().for_each(|f| {
                    f[0] /= norm;
                    f[1] /= norm;
                });
            }
            fwd = next;
        }
        Ok(out)
    }

    /// Largest difference between the one-site marginals computed with the
    /// chain weights of two densities.
    pub fn density_dependence(&self, rho_a: f64, rho_b: f64) -> Result<f64> {
        let a = self.marginals(&GrandCanonical::new(rho_a)?)?;
        let b = self.marginals(&GrandCanonical::new(rho_b)?)?;
        Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
    }
}

/// `π^N_{ρ,φ}`: the chain with site-dependent density `ρ + (a_N/N) φ(x/N)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbedMeasure {
    pub rho: f64,
    pub phi: Profile,
    pub a_n: f64,
    pub n: f64,
}

impl PerturbedMeasure {
    pub fn new(rho: f64, phi: Profile, a_n: f64, n: f64) -> Result<Self> {
        check_density(rho)?;
        let m = Self { rho, phi, a_n, n };
        let sup = sup_abs(&phi) * a_n / n;
        if rho + sup >= 1.0 || rho - sup <= 0.5 {
            return Err(FepError::DensityOutOfRange(format!(
                "rho {rho} +/- {sup} for amplitude {}",
                phi.amplitude()
            )));
        }
        Ok(m)
    }

    /// `ρ + (a_N/N) φ(u)`.
    #[inline]
    pub fn local_density(&self, u: f64) -> f64 {
        self.rho + self.a_n / self.n * self.phi.value(u)
    }

    /// Parameters `r_i` of sites `0..len` under `emb`.
    fn site_densities(&self, len: usize, emb: &Embedding) -> Vec<f64> {
        (0..len).map(|i| self.local_density(emb.position(i))).collect()
    }

    /// Open segment: site 0 is Bernoulli(`r_0`), the step into site `z` from
    /// an occupied site keeps a particle with probability `d(r_z)`.
    pub fn sample_segment<R: Rng + ?Sized>(
        &self,
        len: usize,
        emb: &Embedding,
        rng: &mut R,
    ) -> Configuration {
        let r = self.site_densities(len, emb);
        chain_segment(&r, rng)
    }

    /// Ring sample, closing the chain by rejection on the bond `L-1 → 0`.
    pub fn sample_ring<R: Rng + ?Sized>(
        &self,
        len: usize,
        emb: &Embedding,
        rng: &mut R,
    ) -> Configuration {
        let r = self.site_densities(len, emb);
        loop {
            let c = chain_segment(&r, rng);
            if accept_closure(c.get(len - 1) as u8, c.get(0) as u8, r[0], d(r[0]), rng) {
                return c;
            }
        }
    }

    /// Exact occupation probabilities of the open-segment chain.
    pub fn segment_marginals(&self, len: usize, emb: &Embedding) -> Vec<f64> {
        let r = self.site_densities(len, emb);
        let mut p = r[0];
        let mut out = vec![p];
        for &rz in &r[1..] {
            p = p * d(rz) + (1.0 - p);
            out.push(p);
        }
        out
    }

    /// `H(π^N_{ρ,φ} | π_ρ)` as the exact finite sum over the support of `φ`.
    pub fn relative_entropy(&self) -> f64 {
        if self.phi.is_zero() {
            return 0.0;
        }
        let (d0, dt0) = (d(self.rho), 1.0 - d(self.rho));
        let c = self.phi.center();
        let r = self.phi.support_radius();
        let lo = ((c - r) * self.n).floor() as i64;
        let hi = ((c + r) * self.n).ceil() as i64 + 1;
        let mut total = 0.0;
        let mut prev = self.local_density((lo - 1) as f64 / self.n);
        for x in lo..=hi {
            let here = self.local_density(x as f64 / self.n);
            let dx = d(here);
            let dtx = 1.0 - dx;
            total += prev * (dx * (dx / d0).ln() + dtx * (dtx / dt0).ln());
            prev = here;
        }
        total
    }
}

fn chain_segment<R: Rng + ?Sized>(r: &[f64], rng: &mut R) -> Configuration {
    let mut c = Configuration::empty(r.len());
    let mut prev = rng.random::<f64>() < r[0];
    c.set(0, prev);
    for (i, &rz) in r.iter().enumerate().skip(1) {
        let next = !prev || rng.random::<f64>() < d(rz);
        c.set(i, next);
        prev = next;
    }
    c
}

/// Upper bound on `sup |φ|`.
pub fn sup_abs(p: &Profile) -> f64 {
    match *p {
        Profile::Gaussian { amplitude, .. } => amplitude.abs(),
        Profile::Bump { amplitude, .. } | Profile::SineBump { amplitude, .. } => {
            amplitude.abs() * (-1.0f64).exp()
        }
    }
}
