//! Event-driven simulation of the facilitated exclusion process on a ring.
//!
//! Bond rates live in a Fenwick tree, so each event costs `O(log L)`. The
//! clock runs at speed `N²` for the symmetric model and `N` for the
//! asymmetric one. A tilt by a test function `H` multiplies each bond rate by
//! an exponential factor; when `H` depends on time the event stream is drawn
//! by thinning against a piecewise-constant upper envelope.

use std::collections::HashMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FepError, Result};
use crate::fenwick::Fenwick;
use crate::lattice::{is_ergodic, rate_asym, rate_sym, Configuration};
use crate::testfn::{Embedding, TestFunction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Base {
    Symmetric,
    Asymmetric,
}

impl Base {
    /// Exponent of `N` in the clock speed.
    pub fn speed_exponent(self) -> i32 {
        match self {
            Base::Symmetric => 2,
            Base::Asymmetric => 1,
        }
    }

    #[inline]
    pub fn rate(self, config: &Configuration, x: usize) -> u8 {
        match self {
            Base::Symmetric => rate_sym(config, x),
            Base::Asymmetric => rate_asym(config, x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tilt {
    pub h: TestFunction,
    pub a_n: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateModel {
    pub base: Base,
    pub n: f64,
    #[serde(default)]
    pub tilt: Option<Tilt>,
}

impl RateModel {
    pub fn symmetric(n: f64) -> Self {
        Self { base: Base::Symmetric, n, tilt: None }
    }

    pub fn asymmetric(n: f64) -> Self {
        Self { base: Base::Asymmetric, n, tilt: None }
    }

    pub fn tilted(base: Base, n: f64, h: TestFunction, a_n: f64) -> Self {
        Self { base, n, tilt: Some(Tilt { h, a_n }) }
    }

    pub fn kind(&self) -> &'static str {
        match (self.tilt.is_some(), self.base) {
            (true, _) => "tilted",
            (false, Base::Symmetric) => "symmetric",
            (false, Base::Asymmetric) => "asymmetric",
        }
    }

    pub fn speed_exponent(&self) -> i32 {
        self.base.speed_exponent()
    }

    /// `N^{speed}`, the factor between macroscopic time and rate units.
    pub fn clock_scale(&self) -> f64 {
        self.n.powi(self.speed_exponent())
    }

    /// Exponent of the tilt factor on bond `(x, x+1)` at time `t`.
    pub fn tilt_exponent(&self, config: &Configuration, x: usize, t: f64, emb: &Embedding) -> f64 {
        let Some(tilt) = &self.tilt else { return 0.0 };
        let kappa = tilt.a_n / self.n;
        let u = emb.position(x);
        let (h0, h1) = (tilt.h.value(t, u), tilt.h.value(t, u + 1.0 / self.n));
        match self.base {
            Base::Symmetric => {
                let diff = config.occ(x as isize + 1) as f64 - config.occ(x as isize) as f64;
                kappa * diff * (h0 - h1)
            }
            Base::Asymmetric => kappa * (h1 - h0),
        }
    }
}

/// Bond rate of `model` at time `t`, tilt included.
pub fn tilted_rate(model: &RateModel, config: &Configuration, x: usize, t: f64, emb: &Embedding) -> f64 {
    let base = model.base.rate(config, x);
    if base == 0 {
        return 0.0;
    }
    base as f64 * model.tilt_exponent(config, x, t, emb).exp()
}

/// Hooks called by [`simulate`]. The configuration is constant on every
/// interval passed to `hold`.
pub trait Observer {
    /// Names of the values pushed by `record`.
    fn columns(&self) -> Vec<String>;
    fn start(&mut self, _config: &Configuration, _t: f64) {}
    fn hold(&mut self, _config: &Configuration, _from: f64, _to: f64) {}
    fn before_jump(&mut self, _config: &Configuration, _bond: usize, _t: f64) {}
    fn after_jump(&mut self, _config: &Configuration, _bond: usize, _t: f64) {}
    fn record(&mut self, config: &Configuration, t: f64, out: &mut Vec<f64>);
}

pub struct SimOptions<'a> {
    /// Times at which observers record, in addition to `0` and the horizon.
    pub sample_times: Vec<f64>,
    /// Optional binary event log: `f64` LE time increment then `u32` LE bond.
    pub trace: Option<&'a mut dyn Write>,
    pub recompute_every: u64,
    pub ergodic_check_every: u64,
    /// Number of envelope windows on `[0, T]` for time-dependent tilts.
    pub envelope_windows: usize,
    /// Use thinning even when the tilt is constant in time.
    pub force_thinning: bool,
}

impl Default for SimOptions<'_> {
    fn default() -> Self {
        Self {
            sample_times: Vec::new(),
            trace: None,
            recompute_every: 1_000_000,
            ergodic_check_every: 100_000,
            envelope_windows: 1024,
            force_thinning: false,
        }
    }
}

/// Record of one run.
#[derive(Debug, Clone)]
pub struct Path {
    pub times: Vec<f64>,
    pub columns: Vec<String>,
    /// `values[j][i]` is column `j` at `times[i]`.
    pub values: Vec<Vec<f64>>,
    pub events: u64,
    /// Candidate events drawn, including those rejected by thinning.
    pub proposals: u64,
    pub horizon: f64,
    pub final_config: Configuration,
    /// Largest relative gap found between the maintained and recomputed total rate.
    pub max_rate_drift: f64,
}

impl Path {
    pub fn series(&self, name: &str) -> Option<&[f64]> {
        self.columns
            .iter()
            .position(|c| c == name)
            .map(|j| self.values[j].as_slice())
    }

    /// Last recorded value of a column.
    pub fn last(&self, name: &str) -> Option<f64> {
        self.series(name).and_then(|s| s.last().copied())
    }
}

/// Per-bond tilt data: rates are `base · exp(κ p(t) q_x)`.
struct TiltCache {
    kappa: f64,
    /// `G(u_x) - G(u_{x+1})`.
    dg: Vec<f64>,
    base: Base,
    time: crate::testfn::TimeFactor,
}

impl TiltCache {
    fn new(model: &RateModel, len: usize, emb: &Embedding) -> Option<Self> {
        let tilt = model.tilt.as_ref()?;
        if tilt.h.is_zero() {
            return None;
        }
        let g = &tilt.h.profile;
        let dg = (0..len)
            .map(|x| {
                let u = emb.position(x);
                g.value(u) - g.value(u + 1.0 / model.n)
            })
            .collect();
        Some(Self {
            kappa: tilt.a_n / model.n,
            dg,
            base: model.base,
            time: tilt.h.time.clone(),
        })
    }

    #[inline]
    fn q(&self, config: &Configuration, x: usize) -> f64 {
        match self.base {
            Base::Symmetric => {
                (config.occ(x as isize + 1) as f64 - config.occ(x as isize) as f64) * self.dg[x]
            }
            Base::Asymmetric => -self.dg[x],
        }
    }
}

/// How the tree weights relate to the true rates.
enum Mode {
    Plain,
    /// Exact tilted rates with a constant time factor.
    Direct { p: f64 },
    /// Envelope over the current window with `p(t) ∈ [lo, hi]`.
    Thinning { lo: f64, hi: f64 },
}

struct Engine<'m> {
    model: &'m RateModel,
    tilt: Option<TiltCache>,
    mode: Mode,
    tree: Fenwick,
    scratch: Vec<f64>,
}

impl<'m> Engine<'m> {
    #[inline]
    fn weight(&self, config: &Configuration, x: usize) -> f64 {
        let base = self.model.base.rate(config, x);
        if base == 0 {
            return 0.0;
        }
        let b = base as f64;
        match (&self.mode, &self.tilt) {
            (Mode::Plain, _) | (_, None) => b,
            (Mode::Direct { p }, Some(c)) => b * (c.kappa * p * c.q(config, x)).exp(),
            (Mode::Thinning { lo, hi }, Some(c)) => {
                let q = c.q(config, x);
                b * (c.kappa * (lo * q).max(hi * q)).exp()
            }
        }
    }

    /// Acceptance probability of a candidate on bond `x` at time `t`.
    fn acceptance(&self, config: &Configuration, x: usize, t: f64) -> f64 {
        match (&self.mode, &self.tilt) {
            (Mode::Thinning { lo, hi }, Some(c)) => {
                let q = c.q(config, x);
                let env = (lo * q).max(hi * q);
                (c.kappa * (c.time.value(t) * q - env)).exp().min(1.0)
            }
            _ => 1.0,
        }
    }

    fn rebuild(&mut self, config: &Configuration) -> f64 {
        let len = config.len();
        let mut fresh = std::mem::take(&mut self.scratch);
        fresh.clear();
        fresh.extend((0..len).map(|x| self.weight(config, x)));
        let exact: f64 = fresh.iter().sum();
        let kept = self.tree.total();
        self.tree.rebuild(&fresh);
        self.scratch = fresh;
        if exact > 0.0 {
            (kept - exact).abs() / exact
        } else {
            kept.abs()
        }
    }

    fn refresh_around(&mut self, config: &Configuration, bond: usize) {
        let len = config.len();
        for k in 0..5 {
            let x = (bond + len + k - 2) % len;
            let w = self.weight(config, x);
            self.tree.set(x, w);
        }
    }
}

#[inline]
fn exponential<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    -(1.0 - rng.random::<f64>()).ln()
}

/// Runs the process from `initial` on `[0, horizon]`.
pub fn simulate<R: Rng + ?Sized>(
    initial: &Configuration,
    model: &RateModel,
    emb: &Embedding,
    horizon: f64,
    observers: &mut [&mut dyn Observer],
    mut opts: SimOptions<'_>,
    rng: &mut R,
) -> Result<Path> {
    if !(horizon > 0.0) {
        return Err(FepError::HorizonNonPositive(horizon));
    }
    if !is_ergodic(initial) {
        return Err(FepError::NonErgodicStart);
    }
    let mut config = initial.clone();
    let len = config.len();
    let scale = model.clock_scale();

    let tilt = TiltCache::new(model, len, emb);
    let thinning = tilt
        .as_ref()
        .is_some_and(|c| opts.force_thinning || !c.time.is_constant());
    let windows = opts.envelope_windows.max(1);
    let window_len = horizon / windows as f64;
    let mode = match &tilt {
        None => Mode::Plain,
        Some(c) if !thinning => Mode::Direct { p: c.time.value(0.0) },
        Some(c) => {
            let (lo, hi) = c.time.enclosure(0.0, window_len);
            Mode::Thinning { lo, hi }
        }
    };
    let mut engine = Engine { model, tilt, mode, tree: Fenwick::new(len), scratch: Vec::new() };
    engine.rebuild(&config);

    let mut sample_times: Vec<f64> = opts
        .sample_times
        .iter()
        .copied()
        .filter(|&s| s > 0.0 && s < horizon)
        .collect();
    sample_times.sort_by(f64::total_cmp);
    sample_times.dedup();
    sample_times.push(horizon);

    let columns: Vec<String> = observers.iter().flat_map(|o| o.columns()).collect();
    let mut values: Vec<Vec<f64>> = vec![Vec::with_capacity(sample_times.len() + 1); columns.len()];
    let mut times = Vec::with_capacity(sample_times.len() + 1);
    let mut row = Vec::with_capacity(columns.len());

    let mut record = |obs: &mut [&mut dyn Observer], config: &Configuration, t: f64, times: &mut Vec<f64>| {
        row.clear();
        for o in obs.iter_mut() {
            o.record(config, t, &mut row);
        }
        debug_assert_eq!(row.len(), columns.len());
        for (col, v) in values.iter_mut().zip(&row) {
            col.push(*v);
        }
        times.push(t);
    };

    for o in observers.iter_mut() {
        o.start(&config, 0.0);
    }
    record(observers, &config, 0.0, &mut times);

    let mut t = 0.0f64;
    let mut held = 0.0f64;
    let mut next_sample = 0usize;
    let mut window = 0usize;
    let mut window_end = if thinning { window_len } else { f64::INFINITY };
    let (mut events, mut proposals) = (0u64, 0u64);
    let mut max_drift = 0.0f64;
    let mut last_event_time = 0.0f64;

    loop {
        let total = engine.tree.total();
        let t_candidate = if total > 0.0 {
            t + exponential(rng) / (total * scale)
        } else {
            f64::INFINITY
        };

        // Sample times before the candidate see the current configuration.
        let limit = t_candidate.min(window_end);
        while next_sample < sample_times.len() && sample_times[next_sample] <= limit {
            let s = sample_times[next_sample];
            for o in observers.iter_mut() {
                o.hold(&config, held, s);
            }
            held = s;
            record(observers, &config, s, &mut times);
            next_sample += 1;
        }
        if next_sample == sample_times.len() {
            break;
        }

        if t_candidate > window_end {
            // Memoryless restart at the next envelope window.
            t = window_end;
            window += 1;
            window_end = if window + 1 >= windows { horizon } else { window_len * (window + 1) as f64 };
            if let Some(c) = &engine.tilt {
                let (lo, hi) = c.time.enclosure(t, window_end);
                engine.mode = Mode::Thinning { lo, hi };
            }
            engine.rebuild(&config);
            continue;
        }

        t = t_candidate;
        proposals += 1;
        let u = rng.random::<f64>() * total;
        let bond = engine.tree.find(u);
        if thinning {
            let acc = engine.acceptance(&config, bond, t);
            if acc < 1.0 && rng.random::<f64>() >= acc {
                continue;
            }
        }

        for o in observers.iter_mut() {
            o.hold(&config, held, t);
            o.before_jump(&config, bond, t);
        }
        held = t;
        config.swap_in_place(bond);
        engine.refresh_around(&config, bond);
        for o in observers.iter_mut() {
            o.after_jump(&config, bond, t);
        }
        events += 1;

        if let Some(w) = opts.trace.as_deref_mut() {
            w.write_all(&(t - last_event_time).to_le_bytes())?;
            w.write_all(&(bond as u32).to_le_bytes())?;
        }
        last_event_time = t;

        if opts.recompute_every > 0 && events % opts.recompute_every == 0 {
            max_drift = max_drift.max(engine.rebuild(&config));
        }
        if opts.ergodic_check_every > 0 && events % opts.ergodic_check_every == 0 && !is_ergodic(&config) {
            return Err(FepError::ErgodicityLost(events));
        }
    }
    if !is_ergodic(&config) {
        return Err(FepError::ErgodicityLost(events));
    }
    if let Some(w) = opts.trace.as_deref_mut() {
        w.flush()?;
    }

    Ok(Path {
        times,
        columns,
        values,
        events,
        proposals,
        horizon,
        final_config: config,
        max_rate_drift: max_drift,
    })
}

/// Reads an event log written through [`SimOptions::trace`].
pub fn read_trace(bytes: &[u8]) -> Result<Vec<(f64, u32)>> {
    if !bytes.len().is_multiple_of(12) {
        return Err(FepError::Parse(format!("trace length {} is not a multiple of 12", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(12)
        .map(|c| {
            let dt = f64::from_le_bytes(c[..8].try_into().unwrap());
            let bond = u32::from_le_bytes(c[8..].try_into().unwrap());
            (dt, bond)
        })
        .collect())
}

/// Counts the configurations seen at record times (small rings only).
#[derive(Debug, Default, Clone)]
pub struct StateCounter {
    pub counts: HashMap<u64, u64>,
    /// Skip the record at `t = 0`.
    pub skip_initial: bool,
}

impl StateCounter {
    pub fn new() -> Self {
        Self { counts: HashMap::new(), skip_initial: true }
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }
}

impl Observer for StateCounter {
    fn columns(&self) -> Vec<String> {
        Vec::new()
    }

    fn record(&mut self, config: &Configuration, t: f64, _out: &mut Vec<f64>) {
        if t == 0.0 && self.skip_initial {
            return;
        }
        *self.counts.entry(config.pattern()).or_insert(0) += 1;
    }
}

/// Records the number of events seen so far and the particle count.
#[derive(Debug, Default, Clone)]
pub struct EventCounter {
    pub events: u64,
}

impl Observer for EventCounter {
    fn columns(&self) -> Vec<String> {
        vec!["events".into(), "particles".into()]
    }

    fn after_jump(&mut self, _config: &Configuration, _bond: usize, _t: f64) {
        self.events += 1;
    }

    fn record(&mut self, config: &Configuration, _t: f64, out: &mut Vec<f64>) {
        out.push(self.events as f64);
        out.push(config.particles() as f64);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::GrandCanonical;
    use crate::testfn::{Profile, TimeFactor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frozen_configuration_never_moves() {
        let c = Configuration::full(8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counter = EventCounter::default();
        let path = simulate(
            &c,
            &RateModel::symmetric(10.0),
            &Embedding::centered(10.0, 8),
            1.0,
            &mut [&mut counter],
            SimOptions { sample_times: vec![0.5], ..Default::default() },
            &mut rng,
        )
        .unwrap();
        assert_eq!(path.events, 0);
        assert_eq!(path.times, vec![0.0, 0.5, 1.0]);
        assert_eq!(path.final_config, c);
    }

    #[test]
    fn rejects_bad_starts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = RateModel::symmetric(1.0);
        let e = Embedding::centered(1.0, 6);
        let bad: Configuration = "110011".parse().unwrap();
        assert_eq!(
            simulate(&bad, &m, &e, 1.0, &mut [], SimOptions::default(), &mut rng).unwrap_err(),
            FepError::NonErgodicStart
        );
        let good = Configuration::full(6);
        assert_eq!(
            simulate(&good, &m, &e, 0.0, &mut [], SimOptions::default(), &mut rng).unwrap_err(),
            FepError::HorizonNonPositive(0.0)
        );
    }

    #[test]
    fn tilted_rate_examples() {
        let c: Configuration = "0110".parse().unwrap();
        let emb = Embedding::new(10.0, 0);
        let zero = RateModel::tilted(Base::Symmetric, 10.0, Profile::zero().into(), 5.0);
        for x in 0..4 {
            assert_eq!(tilted_rate(&zero, &c, x, 0.3, &emb), rate_sym(&c, x) as f64);
        }
        // bond (1,2) with window (1,1,0): jump to the right
        let c: Configuration = "1100".parse().unwrap();
        let h = Profile::gaussian(1.0, 0.1, 0.2);
        let n = 10.0;
        let a_n = 4.0;
        let m = RateModel::tilted(Base::Symmetric, n, h.into(), a_n);
        let delta = h.value(0.1) - h.value(0.2);
        let got = tilted_rate(&m, &c, 1, 0.0, &emb);
        assert!((got - (-(a_n / n) * delta).exp()).abs() < 1e-15);
        // zero base rate stays zero
        assert_eq!(tilted_rate(&m, &c, 2, 0.0, &emb), 0.0);
        let asym = RateModel::tilted(Base::Asymmetric, n, h.into(), a_n);
        let got = tilted_rate(&asym, &c, 1, 0.0, &emb);
        assert!((got - ((a_n / n) * (h.value(0.2) - h.value(0.1))).exp()).abs() < 1e-15);
    }

    #[test]
    fn conservation_and_ergodicity_over_many_events() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let c = GrandCanonical::new(0.7).unwrap().sample_ring(200, &mut rng);
        let k = c.particles();
        let m = RateModel::symmetric(1.0);
        let path = simulate(
            &c,
            &m,
            &Embedding::centered(1.0, 200),
            20_000.0,
            &mut [],
            SimOptions { ergodic_check_every: 1000, recompute_every: 50_000, ..Default::default() },
            &mut rng,
        )
        .unwrap();
        assert!(path.events > 1_000_000);
        assert_eq!(path.final_config.particles(), k);
        assert!(path.max_rate_drift < 1e-9);
    }

    #[test]
    fn trace_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c: Configuration = "1101101111".parse().unwrap();
        let mut buf = Vec::new();
        let path = simulate(
            &c,
            &RateModel::asymmetric(1.0),
            &Embedding::centered(1.0, 10),
            5.0,
            &mut [],
            SimOptions { trace: Some(&mut buf), ..Default::default() },
            &mut rng,
        )
        .unwrap();
        let tr = read_trace(&buf).unwrap();
        assert_eq!(tr.len() as u64, path.events);
        // replaying the bonds reproduces the final state
        let mut replay = c.clone();
        let mut t = 0.0;
        for (dt, b) in tr {
            assert!(dt > 0.0);
            t += dt;
            replay.swap_in_place(b as usize);
        }
        assert!(t <= 5.0);
        assert_eq!(replay, path.final_config);
    }

    #[test]
    fn deterministic_given_seed() {
        let c = GrandCanonical::new(0.75).unwrap().sample_ring(64, &mut ChaCha8Rng::seed_from_u64(1));
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            simulate(
                &c,
                &RateModel::symmetric(8.0),
                &Embedding::centered(8.0, 64),
                1.0,
                &mut [],
                SimOptions::default(),
                &mut rng,
            )
            .unwrap()
            .final_config
        };
        assert_eq!(run(), run());
    }

    /// Exact transition probabilities over a short horizon on a tiny ring
    /// compared between direct and thinning modes.
    #[test]
    fn thinning_matches_direct_for_constant_tilt() {
        let len = 8;
        let start: Configuration = "11011011".parse().unwrap();
        let emb = Embedding::new(4.0, 0);
        let h = TestFunction::new(Profile::gaussian(3.0, 0.8, 0.5), TimeFactor::constant(1.0));
        let m = RateModel::tilted(Base::Symmetric, 4.0, h, 8.0);
        let reps = 40_000;
        let mut direct = HashMap::new();
        let mut thin = HashMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for force in [false, true] {
            for _ in 0..reps {
                let p = simulate(
                    &start,
                    &m,
                    &emb,
                    0.05,
                    &mut [],
                    SimOptions { force_thinning: force, envelope_windows: 16, ..Default::default() },
                    &mut rng,
                )
                .unwrap();
                let map = if force { &mut thin } else { &mut direct };
                *map.entry(p.final_config.pattern()).or_insert(0u64) += 1;
            }
        }
        let keys: std::collections::BTreeSet<u64> = direct.keys().chain(thin.keys()).copied().collect();
        for k in keys {
            let a = *direct.get(&k).unwrap_or(&0) as f64 / reps as f64;
            let b = *thin.get(&k).unwrap_or(&0) as f64 / reps as f64;
            let sd = ((a * (1.0 - a) + b * (1.0 - b)) / reps as f64).sqrt();
            assert!((a - b).abs() < 5.0 * sd + 1e-4, "state {k:b}: {a} vs {b}");
        }
        let _ = len;
    }

    #[test]
    fn speed_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gc = GrandCanonical::new(0.75).unwrap();
        for base in [Base::Symmetric, Base::Asymmetric] {
            let mut per_event = Vec::new();
            // the larger ring repeats the smaller one, so both share a density
            let small = gc.sample_ring(200, &mut rng);
            for n in [20.0, 40.0] {
                let len = (10.0 * n) as usize;
                let c = Configuration::from_bits((0..len).map(|i| small.get(i % 200) as u8));
                let m = RateModel { base, n, tilt: None };
                let horizon = 2000.0 / n.powi(base.speed_exponent());
                let p = simulate(&c, &m, &Embedding::centered(n, len), horizon, &mut [], SimOptions::default(), &mut rng)
                    .unwrap();
                // time per event per site, in macroscopic units
                per_event.push(horizon / p.events as f64 * len as f64);
            }
            let ratio = per_event[0] / per_event[1];
            let expect = 2f64.powi(base.speed_exponent());
            assert!((ratio / expect - 1.0).abs() < 0.05, "{base:?}: {ratio}");
        }
    }
}
