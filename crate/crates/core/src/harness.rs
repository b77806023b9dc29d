//! Experiment configuration, seeded replica orchestration and result files.
//!
//! An experiment is described by an [`ExperimentConfig`], usually read from
//! TOML. [`run`] validates it, spreads replicas over a rayon pool, reduces
//! their outputs in replica order and returns a [`Summary`] with one
//! [`Check`] per acceptance condition. With an output directory set, series
//! go to `<kind>.csv` (flushed after every chunk of replicas, so an
//! interrupted run keeps the finished rows) and the summary to
//! `summary.json`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::path::{Path as FsPath, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{simulate, Base, Observer, RateModel, SimOptions, StateCounter};
use crate::error::{FepError, Result};
use crate::exact::{build_generator, exact_expectation, MAX_RING};
use crate::hydro::{
    q_dyn_asym_check, q_dyn_sym, q_ini, solve_heat_forced, solve_transport, Coefficients, Grid, RateBasis,
    ASYM_TOLERANCE,
};
use crate::lattice::Configuration;
use crate::measures::{b_coef, h_tilde, CanonicalWindow, GrandCanonical, LocalFunction, PerturbedMeasure};
use crate::observables::{field, log_mgf_estimate, BgResidualObserver, FieldObserver, Linearization, MartingaleObserver};
use crate::quad::gauss_legendre_composite;
use crate::stats::{chi_square, correlation, mean, median, std_error, variance, variance_std_error};
use crate::testfn::{Embedding, Profile, TestFunction, TimeFactor};

/// Replicas run in parallel in chunks of this size; output is flushed after each.
pub const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Stationarity,
    Clt,
    Hydro,
    Bg,
    Entropy,
    Ensembles,
    Martingale,
    Transport,
    Rate,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 9] = [
        ExperimentKind::Stationarity,
        ExperimentKind::Clt,
        ExperimentKind::Hydro,
        ExperimentKind::Bg,
        ExperimentKind::Entropy,
        ExperimentKind::Ensembles,
        ExperimentKind::Martingale,
        ExperimentKind::Transport,
        ExperimentKind::Rate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Stationarity => "stationarity",
            ExperimentKind::Clt => "clt",
            ExperimentKind::Hydro => "hydro",
            ExperimentKind::Bg => "bg",
            ExperimentKind::Entropy => "entropy",
            ExperimentKind::Ensembles => "ensembles",
            ExperimentKind::Martingale => "martingale",
            ExperimentKind::Transport => "transport",
            ExperimentKind::Rate => "rate",
        }
    }

    /// Kinds whose fields are scaled by `a_N = N^γ`.
    fn uses_scale(self) -> bool {
        matches!(
            self,
            ExperimentKind::Clt
                | ExperimentKind::Hydro
                | ExperimentKind::Bg
                | ExperimentKind::Entropy
                | ExperimentKind::Martingale
                | ExperimentKind::Transport
        )
    }

    fn uses_horizon(self) -> bool {
        matches!(
            self,
            ExperimentKind::Hydro
                | ExperimentKind::Bg
                | ExperimentKind::Martingale
                | ExperimentKind::Transport
                | ExperimentKind::Rate
        )
    }
}

impl std::fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_rho() -> f64 {
    0.75
}

fn default_n() -> f64 {
    1000.0
}

fn default_gamma() -> f64 {
    0.75
}

fn default_replicas() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Scaling parameter `N`.
    #[serde(default = "default_n")]
    pub n: f64,
    /// `a_N = N^γ`.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Ring size; derived from the supports when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub len: Option<usize>,
    /// Macroscopic time horizon `T`.
    #[serde(default)]
    pub horizon: f64,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// Particle count (stationarity).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub particles: Option<usize>,
    /// Target number of jumps (stationarity).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub events: Option<f64>,
    /// Fixed-time samples (stationarity) or window samples per size (ensembles).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    /// `H`: the field test function, tilt or forcing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_function: Option<TestFunction>,
    /// `φ`: initial density perturbation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<Profile>,
    /// Profiles the field is observed against (hydro).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub observe: Vec<Profile>,
    /// Values of `N` (bg).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sizes: Vec<f64>,
    /// Window half-widths `ℓ` (ensembles).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub half_widths: Vec<usize>,
    /// Overrides the acceptance threshold of the experiment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
}

impl ExperimentConfig {
    /// Minimal configuration of a kind; other fields take their defaults.
    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            kind,
            rho: default_rho(),
            n: default_n(),
            gamma: default_gamma(),
            len: None,
            horizon: 0.0,
            replicas: default_replicas(),
            seed: 0,
            out: None,
            threads: None,
            particles: None,
            events: None,
            samples: None,
            test_function: None,
            initial: None,
            observe: Vec::new(),
            sizes: Vec::new(),
            half_widths: Vec::new(),
            tolerance: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| FepError::ConfigInvalid(vec![e.message().to_string()]))
    }

    pub fn from_file(path: &FsPath) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn a_n(&self) -> f64 {
        self.n.powf(self.gamma)
    }

    /// Every profile the experiment places on the ring.
    fn profiles(&self) -> Vec<Profile> {
        let mut v: Vec<Profile> = self.test_function.iter().map(|h| h.profile).collect();
        v.extend(self.initial);
        v.extend(self.observe.iter().copied());
        v.retain(|p| !p.is_zero());
        v
    }

    /// Widest support among the profiles, in sites at scale `n`.
    fn support_sites(&self, n: f64) -> usize {
        self.profiles()
            .iter()
            .map(|p| {
                let (lo, hi) = Embedding::new(n, 0).site_range(p.center(), p.support_radius());
                (hi - lo + 1) as usize
            })
            .max()
            .unwrap_or(0)
    }

    /// Ring size at scale `n`: the configured one, or twice the widest support.
    pub fn ring_len(&self, n: f64) -> usize {
        self.len.unwrap_or_else(|| (2 * self.support_sites(n) + 2).max(16))
    }

    fn tolerance_or(&self, default: f64) -> f64 {
        self.tolerance.unwrap_or(default)
    }

    /// All problems with the configuration, one message per field.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let k = self.kind;
        if !(self.rho > 0.5 && self.rho < 1.0) {
            errs.push(format!("rho: must lie in (1/2, 1), got {}", self.rho));
        }
        if self.replicas == 0 {
            errs.push("replicas: must be at least 1".into());
        }
        if self.threads == Some(0) {
            errs.push("threads: must be at least 1".into());
        }
        if let Some(t) = self.tolerance {
            if !(t > 0.0) {
                errs.push(format!("tolerance: must be positive, got {t}"));
            }
        }
        if k.uses_scale() {
            // the static variance holds down to a_N = √N, so clt admits γ = 1/2
            let low_ok = if k == ExperimentKind::Clt { self.gamma >= 0.5 } else { self.gamma > 0.5 };
            if !(low_ok && self.gamma < 1.0) {
                errs.push(format!("gamma: must lie in (1/2, 1), got {}", self.gamma));
            }
            if k != ExperimentKind::Bg && !(self.n >= 2.0 && self.n.is_finite()) {
                errs.push(format!("n: must be at least 2, got {}", self.n));
            }
        }
        if k.uses_horizon() && !(self.horizon > 0.0 && self.horizon.is_finite()) {
            errs.push(format!("horizon: must be positive, got {}", self.horizon));
        }
        let needs_h = matches!(
            k,
            ExperimentKind::Clt
                | ExperimentKind::Hydro
                | ExperimentKind::Bg
                | ExperimentKind::Martingale
                | ExperimentKind::Transport
                | ExperimentKind::Rate
        );
        if needs_h && self.test_function.is_none() {
            errs.push("test_function: required for this kind".into());
        }
        match k {
            ExperimentKind::Stationarity => {
                match self.len {
                    None => errs.push("len: required for stationarity".into()),
                    Some(l) if !(3..=MAX_RING).contains(&l) => {
                        errs.push(format!("len: must lie in 3..={MAX_RING}, got {l}"))
                    }
                    _ => {}
                }
                match (self.particles, self.len) {
                    (None, _) => errs.push("particles: required for stationarity".into()),
                    (Some(p), Some(l)) if 2 * p < l || p > l => {
                        errs.push(format!("particles: need len/2 <= particles <= len, got {p} on {l}"))
                    }
                    _ => {}
                }
                if !self.events.is_some_and(|e| e >= 1.0) {
                    errs.push("events: required, at least 1".into());
                }
                if !self.samples.is_some_and(|s| s >= 1) {
                    errs.push("samples: required, at least 1".into());
                }
            }
            ExperimentKind::Hydro => {
                if self.initial.is_none() {
                    errs.push("initial: required for hydro".into());
                }
                if self.observe.is_empty() {
                    errs.push("observe: at least one profile required".into());
                }
            }
            ExperimentKind::Entropy => {
                if self.initial.is_none() {
                    errs.push("initial: required for entropy".into());
                }
            }
            ExperimentKind::Ensembles => {
                if self.half_widths.is_empty() {
                    errs.push("half_widths: at least one window size required".into());
                }
                if let Some(&l) = self.half_widths.iter().find(|&&l| l < 2) {
                    errs.push(format!("half_widths: each must be at least 2, got {l}"));
                }
                if !self.samples.is_some_and(|s| s >= 2) {
                    errs.push("samples: required, at least 2".into());
                }
            }
            ExperimentKind::Bg => {
                if self.sizes.len() < 2 {
                    errs.push("sizes: at least two values of n required".into());
                }
                if let Some(&n) = self.sizes.iter().find(|&&n| !(n >= 2.0)) {
                    errs.push(format!("sizes: each must be at least 2, got {n}"));
                }
                if self.len.is_some() {
                    errs.push("len: derived per size for bg, leave it unset".into());
                }
            }
            _ => {}
        }
        if let Some(p) = self.initial {
            let n = self.n;
            if k != ExperimentKind::Rate && PerturbedMeasure::new(self.rho.clamp(0.51, 0.99), p, self.a_n(), n).is_err() {
                errs.push(format!(
                    "initial: local density rho + (a_N/N) phi leaves (1/2, 1) at amplitude {}",
                    p.amplitude()
                ));
            }
        }
        // the ring must hold twice the widest support
        let on_ring = !matches!(k, ExperimentKind::Stationarity | ExperimentKind::Entropy | ExperimentKind::Rate);
        if on_ring && errs.is_empty() {
            let sizes: Vec<f64> = if k == ExperimentKind::Bg { self.sizes.clone() } else { vec![self.n] };
            for n in sizes {
                let sites = self.support_sites(n);
                let len = self.ring_len(n);
                if len < 2 * sites {
                    errs.push(format!("len: ring of {len} sites is below twice the test-function support ({sites} sites)"));
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(FepError::ConfigInvalid(errs))
        }
    }

    /// Non-fatal concerns about the scaling regime.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.kind == ExperimentKind::Transport {
            let n = self.n;
            let bound = n.sqrt() * n.ln().powi(2);
            if self.a_n() <= bound {
                w.push(format!(
                    "a_N = {:.1} is not above sqrt(N) (log N)^2 = {:.1}; the asymmetric regime assumes a_N well above it",
                    self.a_n(),
                    bound
                ));
            }
        }
        w
    }
}

/// Independent generator of replica `stream`: one ChaCha key per seed, one
/// 64-bit stream per replica.
pub fn replica_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream id of replica `replica` in part `part` of an experiment.
pub fn stream_id(part: usize, replica: usize) -> u64 {
    ((part as u64) << 32) | replica as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub replicas: usize,
    pub metrics: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    pub warnings: Vec<String>,
}

impl Summary {
    fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            kind: cfg.kind,
            seed: cfg.seed,
            replicas: cfg.replicas,
            metrics: BTreeMap::new(),
            checks: Vec::new(),
            warnings: cfg.warnings(),
        }
    }

    fn metric(&mut self, name: impl Into<String>, v: f64) {
        self.metrics.insert(name.into(), v);
    }

    fn check(&mut self, name: impl Into<String>, passed: bool, value: f64, threshold: f64, detail: impl Into<String>) {
        self.checks.push(Check { name: name.into(), passed, value, threshold, detail: detail.into() });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// CSV output that is a no-op without an output directory.
struct Sink {
    writer: Option<csv::Writer<File>>,
}

impl Sink {
    fn open(dir: Option<&FsPath>, name: &str, header: &[String]) -> Result<Self> {
        let writer = match dir {
            None => None,
            Some(d) => {
                let mut w = csv::Writer::from_path(d.join(name))?;
                w.write_record(header)?;
                w.flush()?;
                Some(w)
            }
        };
        Ok(Self { writer })
    }

    fn none() -> Self {
        Self { writer: None }
    }

    fn row(&mut self, fields: &[String]) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.write_record(fields)?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.flush()?;
        }
        Ok(())
    }
}

fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn num(x: f64) -> String {
    format!("{x:.17e}")
}

/// Runs `count` replicas in parallel chunks, keeping replica order, and
/// appends the rows of each finished chunk to `sink`.
fn run_replicas<T, F, W>(count: usize, sink: &mut Sink, job: F, rows: W) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
    W: Fn(usize, &T) -> Vec<Vec<String>>,
{
    let mut out = Vec::with_capacity(count);
    let mut start = 0;
    while start < count {
        let end = (start + CHUNK).min(count);
        let chunk: Vec<Result<T>> = (start..end).into_par_iter().map(&job).collect();
        for (i, r) in chunk.into_iter().enumerate() {
            let v = r?;
            for row in rows(start + i, &v) {
                sink.row(&row)?;
            }
            out.push(v);
        }
        sink.flush()?;
        start = end;
    }
    Ok(out)
}

/// Validates `cfg`, runs it and writes the summary when an output directory is set.
pub fn run(cfg: &ExperimentConfig) -> Result<Summary> {
    cfg.validate()?;
    let out = cfg.out.as_deref();
    if let Some(d) = out {
        fs::create_dir_all(d)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.unwrap_or(0))
        .build()
        .map_err(|e| FepError::Io(e.to_string()))?;
    let summary = pool.install(|| match cfg.kind {
        ExperimentKind::Stationarity => stationarity(cfg, out),
        ExperimentKind::Clt => clt(cfg, out),
        ExperimentKind::Hydro => hydro(cfg, out),
        ExperimentKind::Bg => bg(cfg, out),
        ExperimentKind::Entropy => entropy(cfg, out),
        ExperimentKind::Ensembles => ensembles(cfg, out),
        ExperimentKind::Martingale => martingale(cfg, out),
        ExperimentKind::Transport => transport(cfg, out),
        ExperimentKind::Rate => rate(cfg, out),
    })?;
    if let Some(d) = out {
        fs::write(d.join("summary.json"), summary.to_json()? + "\n")?;
    }
    Ok(summary)
}

fn model_of(base: Base, n: f64) -> RateModel {
    match base {
        Base::Symmetric => RateModel::symmetric(n),
        Base::Asymmetric => RateModel::asymmetric(n),
    }
}

fn base_name(base: Base) -> &'static str {
    match base {
        Base::Symmetric => "symmetric",
        Base::Asymmetric => "asymmetric",
    }
}

fn stationarity(cfg: &ExperimentConfig, out: Option<&FsPath>) -> Result<Summary> {
    let len = cfg.len.expect("validated");
    let k = cfg.particles.expect("validated");
    let events = cfg.events.expect("validated");
    let samples = cfg.samples.expect("validated");
    let p_min = cfg.tolerance_or(1e-3);
    let reps = cfg.replicas;
    let mut s = Summary::new(cfg);
    let mut sink = Sink::open(out, "stationarity.csv", &header(&["base", "state", "probability", "observed"]))?;
    for (part, base) in [Base::Symmetric, Base::Asymmetric].into_iter().enumerate() {
        let gen = build_generator(len, Some(k), base)?;
        let pi = gen.stationary_distribution()?;
        let total_rate = exact_expectation(&gen, &pi, |c| (0..len).map(|x| base.rate(c, x) as f64).sum());
        let horizon = events / total_rate / reps as f64;
        let per = (samples / reps).max(1);
        let model = model_of(base, 1.0);
        let emb = Embedding::new(1.0, 0);
        let runs = run_replicas(
            reps,
            &mut Sink::none(),
            |r| {
                let mut rng = replica_rng(cfg.seed, stream_id(part, r));
                // stationary start drawn from the exact law
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut idx = pi.len() - 1;
                for (i, p) in pi.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        idx = i;
                        break;
                    }
                }
                let init = Configuration::from_pattern(gen.states[idx], len);
                let mut counter = StateCounter::new();
                let opts = SimOptions {
                    sample_times: (1..=per).map(|i| horizon * i as f64 / per as f64).collect(),
                    ..SimOptions::default()
                };
                let path = simulate(&init, &model, &emb, horizon, &mut [&mut counter as &mut dyn Observer], opts, &mut rng)?;
                Ok((counter, path.events))
            },
            |_, _| Vec::new(),
        )?;
        let mut observed = vec![0u64; gen.dim()];
        let mut jumps = 0u64;
        for (counter, ev) in &runs {
            jumps += ev;
            for (&state, &c) in &counter.counts {
                let i = gen.index_of(state).ok_or(FepError::NonErgodicStart)?;
                observed[i] += c;
            }
        }
        let chi = chi_square(&observed, &pi);
        let name = base_name(base);
        for (i, &st) in gen.states.iter().enumerate() {
            sink.row(&[
                name.to_string(),
                Configuration::from_pattern(st, len).to_string(),
                num(pi[i]),
                observed[i].to_string(),
            ])?;
        }
        s.metric(format!("{name}_events"), jumps as f64);
        s.metric(format!("{name}_samples"), observed.iter().sum::<u64>() as f64);
        s.metric(format!("{name}_chi_square"), chi.statistic);
        s.metric(format!("{name}_dof"), chi.dof as f64);
        s.metric(format!("{name}_p_value"), chi.p_value);
        s.check(
            format!("{name} occupation frequencies match the exact stationary law"),
            chi.p_value > p_min,
            chi.p_value,
            p_min,
            format!("chi-square {:.2} on {} dof over {} states, {jumps} events", chi.statistic, chi.dof, gen.dim()),
        );
    }
    sink.flush()?;
    Ok(s)
}

fn clt(cfg: &ExperimentConfig, out: Option<&FsPath>) -> Result<Summary> {
    let (n, a_n, rho) = (cfg.n, cfg.a_n(), cfg.rho);
    let h = cfg.test_function.clone().expect("validated");
    let len = cfg.ring_len(n);
    let emb = Embedding::centered(n, len);
    let gc = GrandCanonical::new(rho)?;
    let p0 = h.time.value(0.0);
    let tol = cfg.tolerance_or(0.05);
    let mut sink = Sink::open(out, "clt.csv", &header(&["replica", "field"]))?;
    let values = run_replicas(
        cfg.replicas,
        &mut sink,
        |r| {
            let mut rng = replica_rng(cfg.seed, stream_id(0, r));
            let c = gc.sample_ring(len, &mut rng);
            Ok(p0 * field(&c, &h.profile, rho, a_n, &emb)?)
        },
        |r, v| vec![vec![r.to_string(), num(*v)]],
    )?;
    let target = b_coef(rho) * p0 * p0 * h.profile.l2_norm_sq() * n / (a_n * a_n);
    let mut s = Summary::new(cfg);
    if values.len() < 2 {
        s.check("variance matches B(rho) |H|^2", false, f64::NAN, tol, "need at least two replicas");
        return Ok(s);
    }
    let var = variance(&values);
    let se = variance_std_error(&values);
    let rel = (var / target - 1.0).abs();
    s.metric("ring_len", len as f64);
    s.metric("mean", mean(&values));
    s.metric("mean_std_error", std_error(&values));
    s.metric("variance", var);
    s.metric("variance_std_error", se);
    s.metric("variance_ci_lower", var - 1.96 * se);
    s.metric("variance_ci_upper", var + 1.96 * se);
    s.metric("variance_target", target);
    s.metric("relative_error", rel);
    s.metric("log_mgf", log_mgf_estimate(&values, a_n, n));
    s.metric("log_mgf_target", 0.5 * target * a_n * a_n / n);
    s.check(
        "variance matches B(rho) |H|^2",
        rel <= tol,
        rel,
        tol,
        format!("variance {var:.6e} (95% CI ±{:.2e}) vs {target:.6e}", 1.96 * se),
    );
    Ok(s)
}

fn martingale(cfg: &ExperimentConfig, out: Option<&FsPath>) -> Result<Summary> {
    let (n, a_n, rho, horizon) = (cfg.n, cfg.a_n(), cfg.rho, cfg.horizon);
    let h = cfg.test_function.clone().expect("validated");
    let len = cfg.ring_len(n);
    let emb = Embedding::centered(n, len);
    let gc = GrandCanonical::new(rho)?;
    let model = RateModel::symmetric(n);
    let k_se = cfg.tolerance_or(3.0);
    let sample_times: Vec<f64> = (1..4).map(|i| horizon * i as f64 / 4.0).collect();
    let mut sink = Sink::open(out, "martingale.csv", &header(&["replica", "t", "log_m"]))?;
    let runs = run_replicas(
        cfg.replicas,
        &mut sink,
        |r| {
            let mut rng = replica_rng(cfg.seed, stream_id(0, r));
            let init = gc.sample_ring(len, &mut rng);
            let mut obs = MartingaleObserver::new("log_m", Base::Symmetric, &h, rho, a_n, &emb, len, horizon)?;
            let opts = SimOptions { sample_times: sample_times.clone(), ..SimOptions::default() };
            let path = simulate(&init, &model, &emb, horizon, &mut [&mut obs as &mut dyn Observer], opts, &mut rng)?;
            Ok((path.times.clone(), path.values[0].clone(), path.events))
        },
        |r, (times, logm, _)| times.iter().zip(logm).map(|(t, v)| vec![r.to_string(), num(*t), num(*v)]).collect(),
    )?;
    let finals: Vec<f64> = runs.iter().map(|(_, v, _)| v.last().copied().unwrap_or(0.0).exp()).collect();
    let logs: Vec<f64> = runs.iter().map(|(_, v, _)| v.last().copied().unwrap_or(0.0)).collect();
    let mut s = Summary::new(cfg);
    let m = mean(&finals);
    let se = if finals.len() > 1 { std_error(&finals) } else { 0.0 };
    let dev = (m - 1.0).abs();
    s.metric("ring_len", len as f64);
    s.metric("mean", m);
    s.metric("std_error", se);
    s.metric("mean_log_m", mean(&logs));
    if logs.len() > 1 {
        s.metric("variance_log_m", variance(&logs));
    }
    s.metric("mean_events", runs.iter().map(|r| r.2 as f64).sum::<f64>() / runs.len() as f64);
    let z = if se > 0.0 { dev / se } else if dev < 1e-12 { 0.0 } else { f64::INFINITY };
    s.check(
        "sample mean of the exponential martingale at T is 1",
        z <= k_se,
        z,
        k_se,
        format!("mean {m:.5} ± {se:.5} over {} replicas", finals.len()),
    );
    Ok(s)
}

/// Finite-difference grid covering `profiles` and the diffusive spread over `horizon`.
pub fn pde_grid(profiles: &[Profile], coef: &Coefficients, horizon: f64, steps: usize) -> Grid {
    let reach = profiles
        .iter()
        .filter(|p| !p.is_zero())
        .map(|p| p.center().abs() + p.support_radius())
        .fold(0.0f64, f64::max);
    let scale = profiles
        .iter()
        .filter(|p| !p.is_zero())
        .map(|p| p.support_radius() / crate::testfn::GAUSSIAN_CUTOFF)
        .fold(f64::INFINITY, f64::min);
    let half = reach + 4.0 * (coef.diffusivity * horizon).sqrt() + 0.1;
    let du = scale / 50.0;
    let cells = ((2.0 * half / du).ceil() as usize).max(100);
    Grid::new(horizon, steps, half, cells)
}

fn hydro(cfg: &ExperimentConfig, out: Option<&FsPath>) -> Result<Summary> {
    let (n, a_n, rho, horizon) = (cfg.n, cfg.a_n(), cfg.rho, cfg.horizon);
    let h = cfg.test_function.clone().expect("validated");
    let phi = cfg.initial.expect("validated");
    let len = cfg.ring_len(n);
    let emb = Embedding::centered(n, len);
    let coef = Coefficients::new(rho)?;
    let pm = PerturbedMeasure::new(rho, phi, a_n, n)?;
    let model = RateModel::tilted(Base::Symmetric, n, h.clone(), a_n);
    let tol = cfg.tolerance_or(0.10);
    let names: Vec<String> = (0..cfg.observe.len()).map(|j| format!("g{j}")).collect();
    let tests: Vec<TestFunction> = cfg.observe.iter().map(|&p| TestFunction::stationary(p)).collect();
    let times = [0.0, horizon / 4.0, horizon / 2.0, horizon];
    let mut cols = header(&["replica", "t"]);
    cols.extend(names.iter().cloned());
    let mut sink = Sink::open(out, "hydro.csv", &cols)?;
    let runs = run_replicas(
        cfg.replicas,
        &mut sink,
        |r| {
            let mut rng = replica_rng(cfg.seed, stream_id(0, r));
            let init = pm.sample_ring(len, &emb, &mut rng);
            let mut obs = FieldObserver::new(names.clone(), tests.clone(), rho, a_n, &emb, len)?;
            let opts = SimOptions { sample_times: times[1..3].to_vec(), ..SimOptions::default() };
            let path = simulate(&init, &model, &emb, horizon, &mut [&mut obs as &mut dyn Observer], opts, &mut rng)?;
            // values[j][time index]
            Ok(path.values)
        },
        |r, vals| {
            (0..times.len())
                .map(|i| {
                    let mut row = vec![r.to_string(), num(times[i])];
                    row.extend(vals.iter().map(|col| num(col[i])));
                    row
                })
                .collect()
        },
    )?;

    let mut all = cfg.observe.clone();
    all.push(phi);
    all.push(h.profile);
    let grid = pde_grid(&all, &coef, horizon, 2000);
    let pde = solve_heat_forced(&phi, &h, &coef, &grid)?;

    let mut prof = Sink::open(out, "hydro_profile.csv", &header(&["t", "test", "mean", "std_error", "pde"]))?;
    let (mut diff2, mut norm2, mut noise2) = (0.0, 0.0, 0.0);
    let mut covered = 0usize;
    let mut points = 0usize;
    for (i, &t) in times.iter().enumerate() {
        for (j, g) in cfg.observe.iter().enumerate() {
            let xs: Vec<f64> = runs.iter().map(|v| v[j][i]).collect();
            let m = mean(&xs);
            let se = if xs.len() > 1 { std_error(&xs) } else { 0.0 };
            let target = pde.pair_at(t, |u| g.value(u));
            prof.row(&[num(t), j.to_string(), num(m), num(se), num(target)])?;
            if i == 0 {
                continue;
            }
            diff2 += (m - target).powi(2);
            norm2 += target * target;
            noise2 += se * se;
            points += 1;
            if (m - target).abs() <= 3.0 * se {
                covered += 1;
            }
        }
    }
    prof.flush()?;
    let rel = (diff2 / norm2).sqrt();
    let band = (noise2 / norm2).sqrt();
    let mut s = Summary::new(cfg);
    s.metric("ring_len", len as f64);
    s.metric("relative_l2_discrepancy", rel);
    s.metric("relative_mc_noise", band);
    s.metric("fraction_within_3se", covered as f64 / points as f64);
    s.metric("grid_cells", grid.cells as f64);
    s.check(
        "field profile follows the forced heat equation",
        rel <= tol,
        rel,
        tol,
        format!(
            "relative L2 discrepancy {rel:.4} over {points} points at T/4, T/2, T; Monte Carlo noise level {band:.4}; {covered}/{points} within 3 standard errors"
        ),
    );
    Ok(s)
}

fn transport(cfg: &ExperimentConfig, out: Option<&FsPath>) -> Result<Summary> {
    let (n, a_n, rho, t) = (cfg.n, cfg.a_n(), cfg.rho, cfg.horizon);
    let h = cfg.test_function.clone().expect("validated");
    let len = cfg.ring_len(n);
    let emb = Embedding::centered(n, len);
    let coef = Coefficients::new(rho)?;
    let gc = GrandCanonical::new(rho)?;
    let model = RateModel::asymmetric(n);
    let min_corr = cfg.tolerance_or(0.9);
    // H(· + A't) has its centre moved by -A't
    let moved = TestFunction::new(h.profile.shifted(-coef.a_prime * t), h.time.clone());
    let mut sink = Sink::open(out, "transport.csv", &header(&["replica", "field0", "field0_moved", "field_t"]))?;
    let runs = run_replicas(
        cfg.replicas,
        &mut sink,
        |r| {
            let mut rng = replica_rng(cfg.seed, stream_id(0, r));
            let init = gc.sample_ring(len, &mut rng);
            let mut obs = FieldObserver::new(
                vec!["h".into(), "moved".into()],
                vec![h.clone(), moved.clone()],
                rho,
                a_n,
                &emb,
                len,
            )?;
            let path = simulate(&init, &model, &emb, t, &mut [&mut obs as &mut dyn Observer], SimOptions::default(), &mut rng)?;
            let last = path.times.len() - 1;
            Ok([path.values[0][0], path.values[1][0], path.values[0][last]])
        },
        |r, v| vec![vec![r.to_string(), num(v[0]), num(v[1]), num(v[2])]],
    )?;
    let f0: Vec<f64> = runs.iter().map(|v| v[0]).collect();
    let f0m: Vec<f64> = runs.iter().map(|v| v[1]).collect();
    let ft: Vec<f64> = runs.iter().map(|v| v[2]).collect();
    let mut s = Summary::new(cfg);
    let corr = if runs.len() > 2 { correlation(&f0m, &ft) } else { f64::NAN };
    s.metric("ring_len", len as f64);
    s.metric("a_prime", coef.a_prime);
    s.metric("correlation_transported", corr);
    if runs.len() > 2 {
        s.metric("correlation_unmoved", correlation(&f0, &ft));
    }
    s.check(
        "field at t correlates with the transported initial field",
        corr >= min_corr,
        corr,
        min_corr,
        format!("corr(mu_t(H), mu_0(H(. + A't))) = {corr:.4} over {} replicas, shift {:.4}", runs.len(), coef.a_prime * t),
    );
    Ok(s)
}

fn entropy(cfg: &ExperimentConfig, out: Option<&FsPath>) -> Result<Summary> {
    let (n, a_n, rho) = (cfg.n, cfg.a_n(), cfg.rho);
    let phi = cfg.initial.expect("validated");
    let coef = Coefficients::new(rho)?;
    let tol = cfg.tolerance_or(0.02);
    let pm = PerturbedMeasure::new(rho, phi, a_n, n)?;
    let value = pm.relative_entropy() * n / (a_n * a_n);
    let target = phi.l2_norm_sq() / (2.0 * b_coef(rho));
    let rel = (value / target - 1.0).abs();
    // the initial rate functional over a basis containing φ reaches the same value
    let w = phi.support_radius() / crate::testfn::GAUSSIAN_CUTOFF;
    let basis = vec![phi, phi.shifted(w), phi.shifted(-w), Profile::gaussian(1.0, phi.center(), 2.0 * w)];
    let q = q_ini(&phi, &basis, &coef);
    let q_rel = (q.value / target - 1.0).abs();
    let mut sink = Sink::open(out, "entropy.csv", &header(&["n", "a_n", "scaled_entropy", "q_ini", "target"]))?;
    sink.row(&[num(n), num(a_n), num(value), num(q.value), num(target)])?;
    sink.flush()?;
    let mut s = Summary::new(cfg);
    s.metric("scaled_entropy", value);
    s.metric("target", target);
    s.metric("relative_error", rel);
    s.metric("q_ini", q.value);
    s.check(
        "scaled relative entropy approaches |phi|^2 / 2B",
        rel <= tol,
        rel,
        tol,
        format!("{value:.6} vs {target:.6}"),
    );
    s.check(
        "initial rate functional equals |phi|^2 / 2B",
        q_rel <= 1e-8,
        q_rel,
        1e-8,
        format!("{:.10} vs {target:.10}", q.value),
    );
    Ok(s)
}

/// Average of `τ_y h` over the interior `|y| ≤ ℓ - 1` of a window sample.
fn window_h_average(w: &[u8]) -> f64 {
    let sum: f64 = (1..w.len() - 1)
        .map(|i| {
            let (a, b, c) = (w[i - 1] as f64, w[i] as f64, w[i + 1] as f64);
            a * b + b * c - a * b * c
        })
        .sum();
    sum / (w.len() - 2) as f64
}

fn ensembles(cfg: &ExperimentConfig, out: Option<&FsPath>) -> Result<Summary> {
    let rho = cfg.rho;
    let samples = cfg.samples.expect("validated");
    let tol = cfg.tolerance_or(0.25);
    let gc = GrandCanonical::new(rho)?;
    let per_chunk = 250usize;
    let chunks = samples.div_ceil(per_chunk);
    let mut sink = Sink::open(
        out,
        "ensembles.csv",
        &header(&["half_width", "particles", "mean_abs_error", "std_error", "constant"]),
    )?;
    let mut s = Summary::new(cfg);
    let mut constants = Vec::new();
    for (part, &l) in cfg.half_widths.iter().enumerate() {
        let window = CanonicalWindow::at_density(l, rho);
        let target = h_tilde(window.density());
        let errs: Vec<Vec<f64>> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut rng = replica_rng(cfg.seed, stream_id(part, c));
                let count = per_chunk.min(samples - c * per_chunk);
                let ws = window.sample_many(&gc, count, &mut rng)?;
                Ok(ws.iter().map(|w| (window_h_average(w) - target).abs()).collect())
            })
            .collect::<Result<_>>()?;
        let errs: Vec<f64> = errs.into_iter().flatten().collect();
        let e = mean(&errs);
        let se = std_error(&errs);
        let lf = l as f64;
        let c = e * lf / lf.ln().powi(2);
        constants.push(c);
        sink.row(&[l.to_string(), window.particles.to_string(), num(e), num(se), num(c)])?;
        s.metric(format!("mean_abs_error_{l}"), e);
        s.metric(format!("constant_{l}"), c);
    }
    sink.flush()?;
    let med = median(&constants);
    let spread = constants.iter().map(|c| (c / med - 1.0).abs()).fold(0.0f64, f64::max);
    s.metric("constant_median", med);
    s.metric("constant_max", constants.iter().copied().fold(0.0f64, f64::max));
    s.metric("constant_spread", spread);
    s.check(
        "E|avg h - h~| (l / (log l)^2) is stable across window sizes",
        spread <= tol,
        spread,
        tol,
        format!("constants {constants:.4?} around median {med:.4}"),
    );
    Ok(s)
}

fn bg(cfg: &ExperimentConfig, out: Option<&FsPath>) -> Result<Summary> {
    let (rho, horizon) = (cfg.rho, cfg.horizon);
    let h = cfg.test_function.clone().expect("validated");
    let g = LocalFunction::h();
    let lin = Linearization::exact(&g, rho)?;
    let gc = GrandCanonical::new(rho)?;
    let mut sink = Sink::open(out, "bg.csv", &header(&["n", "replica", "integral", "sup"]))?;
    let mut s = Summary::new(cfg);
    let mut sups = Vec::new();
    for (part, &n) in cfg.sizes.iter().enumerate() {
        let a_n = n.powf(cfg.gamma);
        let len = cfg.ring_len(n);
        let emb = Embedding::centered(n, len);
        let model = RateModel::symmetric(n);
        let runs = run_replicas(
            cfg.replicas,
            &mut sink,
            |r| {
                let mut rng = replica_rng(cfg.seed, stream_id(part, r));
                let init = gc.sample_ring(len, &mut rng);
                let mut obs = BgResidualObserver::new("bg", g.clone(), lin, &h, a_n, &emb, len)?;
                simulate(&init, &model, &emb, horizon, &mut [&mut obs as &mut dyn Observer], SimOptions::default(), &mut rng)?;
                Ok((obs.integral(), obs.sup()))
            },
            |r, v| vec![vec![num(n), r.to_string(), num(v.0), num(v.1)]],
        )?;
        let sup: Vec<f64> = runs.iter().map(|v| v.1).collect();
        let m = mean(&sup);
        s.metric(format!("sup_mean_{n}"), m);
        if sup.len() > 1 {
            s.metric(format!("sup_std_error_{n}"), std_error(&sup));
        }
        sups.push(m);
    }
    let decreasing = sups.windows(2).all(|w| w[1] < w[0]);
    let worst = sups.windows(2).map(|w| w[1] / w[0]).fold(0.0f64, f64::max);
    s.check(
        "Boltzmann-Gibbs sup-residual decreases with N",
        decreasing,
        worst,
        1.0,
        format!("mean sup-residuals {:?} for n = {:?}", sups.iter().map(|v| format!("{v:.4e}")).collect::<Vec<_>>(), cfg.sizes),
    );
    Ok(s)
}

fn rate(cfg: &ExperimentConfig, out: Option<&FsPath>) -> Result<Summary> {
    let (rho, horizon) = (cfg.rho, cfg.horizon);
    let h = cfg.test_function.clone().expect("validated");
    let coef = Coefficients::new(rho)?;
    let tol = cfg.tolerance_or(0.02);
    let g0 = h.profile;
    let w = g0.support_radius() / crate::testfn::GAUSSIAN_CUTOFF;

    // forced heat path from rest: the optimal tilt is the forcing itself
    let grid = pde_grid(&[g0], &coef, horizon, 400);
    let forced = solve_heat_forced(&Profile::zero(), &h, &coef, &grid)?;
    let mut fs = vec![h.clone()];
    fs.push(TestFunction::stationary(g0.shifted(1.5 * w)));
    fs.push(TestFunction::new(g0.shifted(-w), TimeFactor::polynomial(vec![0.0, 1.0 / horizon])));
    let basis = RateBasis::new(fs, &coef, horizon);
    let q = q_dyn_sym(&forced, &basis, &coef);
    let p2 = gauss_legendre_composite(0.0, horizon, 1 + 2 * h.time.degree() / 7, |t| h.time.value(t).powi(2));
    let target = coef.a * p2 * g0.grad_norm_sq();
    let rel = (q.value / target - 1.0).abs();

    // asymmetric functional on transport and heat paths started from G
    let profiles = [g0, g0.shifted(w), g0.shifted(-w)];
    let tbasis = RateBasis::tensor(&profiles, 3, &coef, horizon);
    let tgrid = pde_grid(&[g0], &coef, horizon, 4000);
    let transported = solve_transport(&g0, &coef, &tgrid);
    let heat = solve_heat_forced(&g0, &Profile::zero().into(), &coef, &grid)?;
    let on_transport = q_dyn_asym_check(&transported, &tbasis, &coef, ASYM_TOLERANCE);
    let on_heat = q_dyn_asym_check(&heat, &tbasis, &coef, ASYM_TOLERANCE);

    let mut sink = Sink::open(out, "rate.csv", &header(&["quantity", "value", "target"]))?;
    sink.row(&["q_dyn_sym".into(), num(q.value), num(target)])?;
    sink.row(&["asym_transport_zero".into(), (on_transport.is_zero() as u8).to_string(), "1".into()])?;
    sink.row(&["asym_heat_zero".into(), (on_heat.is_zero() as u8).to_string(), "0".into()])?;
    sink.flush()?;

    let mut s = Summary::new(cfg);
    s.metric("q_dyn_sym", q.value);
    s.metric("target", target);
    s.metric("relative_error", rel);
    s.metric("basis_singular", q.singular as u8 as f64);
    s.check(
        "symmetric dynamical rate of a forced heat path equals [H, H]",
        rel <= tol,
        rel,
        tol,
        format!("{:.6e} vs A int |grad H|^2 = {target:.6e}", q.value),
    );
    s.check(
        "asymmetric dynamical rate vanishes on a transport path",
        on_transport.is_zero(),
        on_transport.is_zero() as u8 as f64,
        1.0,
        format!("{on_transport:?}"),
    );
    s.check(
        "asymmetric dynamical rate is infinite on a heat path",
        !on_heat.is_zero(),
        (!on_heat.is_zero()) as u8 as f64,
        1.0,
        format!("{on_heat:?}"),
    );
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_clt() -> ExperimentConfig {
        let mut c = ExperimentConfig::new(ExperimentKind::Clt);
        c.n = 200.0;
        c.gamma = 0.5;
        c.replicas = 150;
        c.seed = 7;
        c.test_function = Some(TestFunction::stationary(Profile::gaussian(1.0, 0.0, 0.05)));
        c
    }

    #[test]
    fn validation_reports_each_field() {
        let mut c = ExperimentConfig::new(ExperimentKind::Hydro);
        c.rho = 0.4;
        c.gamma = 1.2;
        c.replicas = 0;
        match c.validate() {
            Err(FepError::ConfigInvalid(msgs)) => {
                for field in ["rho:", "gamma:", "replicas:", "horizon:", "test_function:", "initial:", "observe:"] {
                    assert!(msgs.iter().any(|m| m.starts_with(field)), "{field} missing from {msgs:?}");
                }
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ring_must_hold_twice_the_support() {
        let mut c = small_clt();
        c.len = Some(100);
        let err = c.validate().unwrap_err();
        assert!(matches!(&err, FepError::ConfigInvalid(m) if m[0].starts_with("len:")), "{err}");
        c.len = None;
        c.validate().unwrap();
        assert!(c.ring_len(200.0) >= 2 * 171);
    }

    #[test]
    fn gamma_half_only_for_clt() {
        let mut c = small_clt();
        c.validate().unwrap();
        c.kind = ExperimentKind::Martingale;
        c.horizon = 0.01;
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_roundtrip_and_unknown_fields() {
        let text = r#"
            kind = "clt"
            n = 200.0
            gamma = 0.5
            replicas = 10
            [test_function]
            profile = { kind = "gaussian", amplitude = 1.0, center = 0.0, width = 0.05 }
        "#;
        let c = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(c.kind, ExperimentKind::Clt);
        assert_eq!(c.test_function.as_ref().unwrap().time, TimeFactor::constant(1.0));
        let back = ExperimentConfig::from_toml(&toml::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(ExperimentConfig::from_toml("kind = \"clt\"\nbogus = 1\n").is_err());
    }

    #[test]
    fn streams_are_distinct() {
        let a: u64 = replica_rng(1, stream_id(0, 0)).random();
        let b: u64 = replica_rng(1, stream_id(0, 1)).random();
        let c: u64 = replica_rng(1, stream_id(1, 0)).random();
        let d: u64 = replica_rng(1, stream_id(0, 0)).random();
        assert!(a != b && a != c && b != c);
        assert_eq!(a, d);
    }

    #[test]
    fn runs_are_reproducible_and_thread_independent() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let mut c = small_clt();
        c.out = Some(d1.path().to_path_buf());
        c.threads = Some(1);
        let s1 = run(&c).unwrap();
        c.out = Some(d2.path().to_path_buf());
        c.threads = Some(3);
        let s2 = run(&c).unwrap();
        assert_eq!(s1, s2);
        let a = fs::read(d1.path().join("clt.csv")).unwrap();
        let b = fs::read(d2.path().join("clt.csv")).unwrap();
        assert_eq!(a, b);
        assert_eq!(String::from_utf8(a).unwrap().lines().count(), 151);
        assert!(d1.path().join("summary.json").exists());
    }

    #[test]
    fn small_runs_of_every_cheap_kind() {
        let mut st = ExperimentConfig::new(ExperimentKind::Stationarity);
        st.len = Some(6);
        st.particles = Some(4);
        st.events = Some(2e4);
        st.samples = Some(500);
        let s = run(&st).unwrap();
        assert_eq!(s.checks.len(), 2);
        assert!(s.metrics["symmetric_events"] > 1e4);

        let mut en = ExperimentConfig::new(ExperimentKind::Entropy);
        en.n = 1e5;
        en.initial = Some(Profile::gaussian(1.0, 0.0, 0.1));
        let s = run(&en).unwrap();
        assert!(s.checks[1].passed, "{s:?}");

        let mut ens = ExperimentConfig::new(ExperimentKind::Ensembles);
        ens.half_widths = vec![8, 16];
        ens.samples = Some(300);
        let s = run(&ens).unwrap();
        assert_eq!(s.metrics.len(), 7);
    }

    #[test]
    fn transport_warns_below_the_asymmetric_regime() {
        let mut c = ExperimentConfig::new(ExperimentKind::Transport);
        c.n = 2000.0;
        assert_eq!(c.warnings().len(), 1);
        c.gamma = 0.99;
        c.n = 1e12;
        assert!(c.warnings().is_empty());
    }
}
