//! Closed-form test functions.
//!
//! Profiles are evaluated analytically, including their first and second
//! derivatives, so that discrete gradients and Laplacians carry no grid
//! noise. A [`TestFunction`] is a spatial profile multiplied by a polynomial
//! time factor, `H(t, u) = p(t) G(u)`.

use serde::{Deserialize, Serialize};

use crate::quad;

/// Gaussian tails are cut at this many standard deviations (relative size about 2e-16).
pub const GAUSSIAN_CUTOFF: f64 = 8.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Profile {
    /// `a exp(-(u-c)^2 / (2 w^2))`
    Gaussian { amplitude: f64, center: f64, width: f64 },
    /// `a exp(-1 / (1 - r^2))` for `r = (u-c)/R`, `|r| < 1`.
    Bump { amplitude: f64, center: f64, radius: f64 },
    /// `sin(ω (u-c))` times a compact bump.
    SineBump {
        amplitude: f64,
        center: f64,
        radius: f64,
        frequency: f64,
    },
}

impl Profile {
    pub fn gaussian(amplitude: f64, center: f64, width: f64) -> Self {
        Profile::Gaussian { amplitude, center, width }
    }

    pub fn bump(amplitude: f64, center: f64, radius: f64) -> Self {
        Profile::Bump { amplitude, center, radius }
    }

    pub fn sine_bump(amplitude: f64, center: f64, radius: f64, frequency: f64) -> Self {
        Profile::SineBump { amplitude, center, radius, frequency }
    }

    pub fn zero() -> Self {
        Profile::Gaussian { amplitude: 0.0, center: 0.0, width: 1.0 }
    }

    pub fn center(&self) -> f64 {
        match *self {
            Profile::Gaussian { center, .. }
            | Profile::Bump { center, .. }
            | Profile::SineBump { center, .. } => center,
        }
    }

    pub fn amplitude(&self) -> f64 {
        match *self {
            Profile::Gaussian { amplitude, .. }
            | Profile::Bump { amplitude, .. }
            | Profile::SineBump { amplitude, .. } => amplitude,
        }
    }

    /// Half-width of the (effective) support around [`Profile::center`].
    pub fn support_radius(&self) -> f64 {
        match *self {
            Profile::Gaussian { width, .. } => GAUSSIAN_CUTOFF * width,
            Profile::Bump { radius, .. } | Profile::SineBump { radius, .. } => radius,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.amplitude() == 0.0
    }

    /// Same shape with the amplitude multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        let mut p = *self;
        match &mut p {
            Profile::Gaussian { amplitude, .. }
            | Profile::Bump { amplitude, .. }
            | Profile::SineBump { amplitude, .. } => *amplitude *= k,
        }
        p
    }

    /// Same shape moved by `du`.
    pub fn shifted(&self, du: f64) -> Self {
        let mut p = *self;
        match &mut p {
            Profile::Gaussian { center, .. }
            | Profile::Bump { center, .. }
            | Profile::SineBump { center, .. } => *center += du,
        }
        p
    }

    /// Value, first and second derivative at `u`.
    pub fn jet(&self, u: f64) -> [f64; 3] {
        match *self {
            Profile::Gaussian { amplitude, center, width } => {
                let z = (u - center) / width;
                if z.abs() > GAUSSIAN_CUTOFF {
                    return [0.0; 3];
                }
                let f = amplitude * (-0.5 * z * z).exp();
                [f, -z / width * f, (z * z - 1.0) / (width * width) * f]
            }
            Profile::Bump { amplitude, center, radius } => {
                let [b, db, ddb] = bump_jet((u - center) / radius);
                [
                    amplitude * b,
                    amplitude * db / radius,
                    amplitude * ddb / (radius * radius),
                ]
            }
            Profile::SineBump { amplitude, center, radius, frequency } => {
                let [b, db, ddb] = bump_jet((u - center) / radius);
                let (db, ddb) = (db / radius, ddb / (radius * radius));
                let (s, c) = (frequency * (u - center)).sin_cos();
                let w = frequency;
                [
                    amplitude * s * b,
                    amplitude * (w * c * b + s * db),
                    amplitude * (-w * w * s * b + 2.0 * w * c * db + s * ddb),
                ]
            }
        }
    }

    #[inline]
    pub fn value(&self, u: f64) -> f64 {
        match *self {
            Profile::Gaussian { amplitude, center, width } => {
                let z = (u - center) / width;
                if z.abs() > GAUSSIAN_CUTOFF {
                    0.0
                } else {
                    amplitude * (-0.5 * z * z).exp()
                }
            }
            _ => self.jet(u)[0],
        }
    }

    pub fn d1(&self, u: f64) -> f64 {
        self.jet(u)[1]
    }

    pub fn d2(&self, u: f64) -> f64 {
        self.jet(u)[2]
    }

    /// `‖G‖²_{L²}`.
    pub fn l2_norm_sq(&self) -> f64 {
        match *self {
            Profile::Gaussian { amplitude, width, .. } => {
                amplitude * amplitude * width * std::f64::consts::PI.sqrt()
            }
            _ => self.integrate(|p, u| p.value(u).powi(2)),
        }
    }

    /// `‖G'‖²_{L²}`.
    pub fn grad_norm_sq(&self) -> f64 {
        match *self {
            Profile::Gaussian { amplitude, width, .. } => {
                amplitude * amplitude * std::f64::consts::PI.sqrt() / (2.0 * width)
            }
            _ => self.integrate(|p, u| p.d1(u).powi(2)),
        }
    }

    /// `∫ f(self, u) du` over the support.
    pub fn integrate<F: Fn(&Self, f64) -> f64>(&self, f: F) -> f64 {
        let r = self.support_radius();
        let c = self.center();
        quad::gauss_legendre_composite(c - r, c + r, 4000, |u| f(self, u))
    }

    /// Discrete gradient `N [G(u + 1/N) - G(u)]`.
    pub fn grad_n(&self, u: f64, n: f64) -> f64 {
        n * (self.value(u + 1.0 / n) - self.value(u))
    }

    /// Discrete Laplacian `N² [G(u + 1/N) + G(u - 1/N) - 2 G(u)]`.
    pub fn lap_n(&self, u: f64, n: f64) -> f64 {
        n * n * (self.value(u + 1.0 / n) + self.value(u - 1.0 / n) - 2.0 * self.value(u))
    }
}

/// `exp(-1/(1-r²))` and its first two derivatives in `r`.
fn bump_jet(r: f64) -> [f64; 3] {
    if r.abs() >= 1.0 {
        return [0.0; 3];
    }
    let q = 1.0 - r * r;
    let f = (-1.0 / q).exp();
    if f == 0.0 {
        return [0.0; 3];
    }
    let q2 = q * q;
    let df = f * (-2.0 * r / q2);
    let ddf = f * (4.0 * r * r / (q2 * q2) - 2.0 / q2 - 8.0 * r * r / (q2 * q));
    [f, df, ddf]
}

/// Polynomial time factor `p(t) = Σ c_k t^k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeFactor {
    pub coefficients: Vec<f64>,
}

impl TimeFactor {
    pub fn constant(c: f64) -> Self {
        Self { coefficients: vec![c] }
    }

    pub fn polynomial(coefficients: Vec<f64>) -> Self {
        assert!(!coefficients.is_empty());
        Self { coefficients }
    }

    pub fn is_constant(&self) -> bool {
        self.coefficients.iter().skip(1).all(|&c| c == 0.0)
    }

    pub fn degree(&self) -> usize {
        self.coefficients
            .iter()
            .rposition(|&c| c != 0.0)
            .unwrap_or(0)
    }

    #[inline]
    pub fn value(&self, t: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, &c| acc * t + c)
    }

    pub fn derivative(&self, t: f64) -> f64 {
        self.coefficients
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(0.0, |acc, (k, &c)| acc * t + k as f64 * c)
    }

    /// An interval containing `p([a, b])`, by interval Horner evaluation.
    pub fn enclosure(&self, a: f64, b: f64) -> (f64, f64) {
        let (mut lo, mut hi) = (0.0f64, 0.0f64);
        for &c in self.coefficients.iter().rev() {
            let prods = [lo * a, lo * b, hi * a, hi * b];
            lo = prods.iter().cloned().fold(f64::INFINITY, f64::min) + c;
            hi = prods.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + c;
        }
        (lo, hi)
    }
}

impl Default for TimeFactor {
    fn default() -> Self {
        Self::constant(1.0)
    }
}

/// `H(t, u) = p(t) G(u)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub profile: Profile,
    #[serde(default)]
    pub time: TimeFactor,
}

impl TestFunction {
    pub fn new(profile: Profile, time: TimeFactor) -> Self {
        Self { profile, time }
    }

    pub fn stationary(profile: Profile) -> Self {
        Self { profile, time: TimeFactor::constant(1.0) }
    }

    pub fn is_time_independent(&self) -> bool {
        self.time.is_constant()
    }

    pub fn is_zero(&self) -> bool {
        self.profile.is_zero() || self.time.coefficients.iter().all(|&c| c == 0.0)
    }

    #[inline]
    pub fn value(&self, t: f64, u: f64) -> f64 {
        self.time.value(t) * self.profile.value(u)
    }

    pub fn dt(&self, t: f64, u: f64) -> f64 {
        self.time.derivative(t) * self.profile.value(u)
    }

    pub fn dx(&self, t: f64, u: f64) -> f64 {
        self.time.value(t) * self.profile.d1(u)
    }

    pub fn dxx(&self, t: f64, u: f64) -> f64 {
        self.time.value(t) * self.profile.d2(u)
    }

    pub fn support_radius(&self) -> f64 {
        self.profile.support_radius()
    }

    pub fn center(&self) -> f64 {
        self.profile.center()
    }
}

impl From<Profile> for TestFunction {
    fn from(p: Profile) -> Self {
        Self::stationary(p)
    }
}

/// Placement of the ring inside the macroscopic line: site `i` sits at
/// `u = (i - origin) / N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub n: f64,
    pub origin: usize,
}

impl Embedding {
    pub fn new(n: f64, origin: usize) -> Self {
        Self { n, origin }
    }

    /// Ring of `len` sites centred on `u = 0`.
    pub fn centered(n: f64, len: usize) -> Self {
        Self { n, origin: len / 2 }
    }

    #[inline]
    pub fn position(&self, site: usize) -> f64 {
        (site as f64 - self.origin as f64) / self.n
    }

    /// Site range `[lo, hi]` (unwrapped, may be negative) covering `[c-r, c+r]`.
    pub fn site_range(&self, center: f64, radius: f64) -> (i64, i64) {
        let o = self.origin as f64;
        (
            ((center - radius) * self.n + o).floor() as i64,
            ((center + radius) * self.n + o).ceil() as i64,
        )
    }
}
