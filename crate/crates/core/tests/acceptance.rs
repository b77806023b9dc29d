//! Acceptance criteria. Each test prints one `[PASS]` or `[FAIL]` line with
//! the measured quantity and the wall-clock time against its budget.
//!
//! Run with `cargo test -p fep-core --test acceptance -- --nocapture` to see
//! the lines.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use fep_core::harness::{run, ExperimentConfig, Summary};
use fep_core::lattice::{window_h, window_rate_sym};
use fep_core::measures::{
    a_coef, b_coef, ergodic_words, exact_local_expectation, h_tilde, segment_pmf, word_of, zeta_moments,
    GrandCanonical, LocalFunction,
};

fn report(label: &str, passed: bool, elapsed: Duration, budget: Duration, detail: &str) -> bool {
    let in_time = elapsed <= budget;
    let ok = passed && in_time;
    println!(
        "[{}] {label}: {detail} ({:.3} s, budget {:.3} s)",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
    ok
}

fn config(name: &str) -> ExperimentConfig {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "configs", &format!("{name}.toml")].iter().collect();
    ExperimentConfig::from_file(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn run_config(name: &str, label: &str, budget_secs: u64) {
    let cfg = config(name);
    let start = Instant::now();
    let summary: Summary = run(&cfg).unwrap_or_else(|e| panic!("{name}: {e}"));
    let elapsed = start.elapsed();
    let detail: Vec<String> = summary
        .checks
        .iter()
        .map(|c| format!("{} [{}] {}", c.name, if c.passed { "ok" } else { "failed" }, c.detail))
        .collect();
    for w in &summary.warnings {
        println!("  warning ({name}): {w}");
    }
    let ok = report(label, summary.passed(), elapsed, Duration::from_secs(budget_secs), &detail.join("; "));
    assert!(ok, "{label} failed: {summary:#?}");
}

/// `P(w)` under the two-state chain, computed from scratch.
fn chain_probability(word: &[u8], rho: f64) -> f64 {
    let d = (2.0 * rho - 1.0) / rho;
    let mut p = if word[0] == 1 { rho } else { 1.0 - rho };
    for pair in word.windows(2) {
        p *= match (pair[0], pair[1]) {
            (1, 1) => d,
            (1, 0) => 1.0 - d,
            (0, 1) => 1.0,
            _ => 0.0,
        };
    }
    p
}

fn all_words(len: usize) -> impl Iterator<Item = Vec<u8>> {
    (0..1u64 << len).map(move |p| (0..len).map(|i| ((p >> i) & 1) as u8).collect())
}

#[test]
fn gradient_identity() {
    let start = Instant::now();
    let mut mismatches = 0;
    for p in 0..16u8 {
        let w = [p & 1, (p >> 1) & 1, (p >> 2) & 1, (p >> 3) & 1];
        // sites x-1, x, x+1, x+2
        let current = window_rate_sym(w) as i32 * (w[1] as i32 - w[2] as i32);
        let gradient = window_h([w[0], w[1], w[2]]) as i32 - window_h([w[1], w[2], w[3]]) as i32;
        if current != gradient {
            mismatches += 1;
        }
    }
    let ok = report(
        "gradient identity c(eta_x - eta_x+1) = h_x - h_x+1",
        mismatches == 0,
        start.elapsed(),
        Duration::from_millis(1),
        &format!("{mismatches} mismatches over 16 windows"),
    );
    assert!(ok);
}

#[test]
fn closed_form_coefficients() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for rho in [0.6, 0.75, 0.9] {
        let (mut eh, mut act, mut z1, mut z2) = (0.0, 0.0, 0.0, 0.0);
        // sites -2..=2 carry every quantity
        for w in all_words(5) {
            let p = chain_probability(&w, rho);
            if p == 0.0 {
                continue;
            }
            let (a, b, c) = (w[1] as f64, w[2] as f64, w[3] as f64);
            eh += p * (a * b + b * c - a * b * c);
            let rate = (w[1] * w[2] * (1 - w[3]) + w[4] * w[3] * (1 - w[2])) as f64;
            act += p * rate * (b - c).powi(2);
            let z = rho * (b - rho) + (1.0 - rho) * (a - rho);
            z1 += p * z;
            z2 += p * z * z;
        }
        let var_z = z2 - z1 * z1;
        let closed_h = (2.0 * rho - 1.0) / rho;
        let closed_a = (1.0 - rho) * (2.0 * rho - 1.0) / rho;
        let closed_b = (2.0 * rho - 1.0) * rho * (1.0 - rho);
        let lib_h = exact_local_expectation(&LocalFunction::h(), rho).unwrap();
        let lib_act = exact_local_expectation(&LocalFunction::bond_activity(), rho).unwrap();
        let lib_z = zeta_moments(rho).unwrap().1;
        for (x, y) in [
            (eh, closed_h),
            (act, 2.0 * closed_a),
            (var_z, closed_b),
            (lib_h, closed_h),
            (lib_act, 2.0 * closed_a),
            (lib_z, closed_b),
            (h_tilde(rho), closed_h),
            (a_coef(rho), closed_a),
            (b_coef(rho), closed_b),
        ] {
            worst = worst.max((x - y).abs());
        }
    }
    let ok = report(
        "closed-form h~, 2A, B against enumeration at rho = 0.6, 0.75, 0.9",
        worst <= 1e-12,
        start.elapsed(),
        Duration::from_secs(1),
        &format!("largest absolute deviation {worst:.2e}"),
    );
    assert!(ok);
}

#[test]
fn segment_pmf_matches_chain() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut words = 0usize;
    for rho in [0.6, 0.75, 0.9] {
        let gc = GrandCanonical::new(rho).unwrap();
        for len in 1..=10 {
            let mut total = 0.0;
            for p in ergodic_words(len) {
                let w = word_of(p, len);
                let f = segment_pmf(&w, &gc).unwrap();
                worst = worst.max((f - chain_probability(&w, rho)).abs());
                total += f;
                words += 1;
            }
            worst = worst.max((total - 1.0).abs());
        }
    }
    let ok = report(
        "segment pmf equals the chain product and sums to one, lengths 1..=10",
        worst <= 1e-12,
        start.elapsed(),
        Duration::from_secs(1),
        &format!("largest deviation {worst:.2e} over {words} words"),
    );
    assert!(ok);
}

#[test]
fn small_ring_stationarity() {
    run_config("stationarity", "small-ring stationarity (L = 10, k = 7), both models", 60);
}

#[test]
fn static_variance() {
    run_config("clt", "static variance of the field under pi_rho", 300);
}

#[test]
fn mean_one_martingale() {
    run_config("martingale", "mean-one exponential martingale", 600);
}

#[test]
fn hydrodynamic_limit() {
    run_config("hydro", "tilted hydrodynamics against the forced heat equation", 1800);
}

#[test]
fn transport_limit() {
    run_config("transport", "asymmetric transport of fluctuations", 900);
}

#[test]
fn entropy_limit() {
    run_config("entropy", "relative entropy of the perturbed measure", 1);
}

#[test]
fn equivalence_of_ensembles() {
    run_config("ensembles", "equivalence of ensembles for h", 600);
}

#[test]
fn rate_functional_identities() {
    run_config("rate", "rate-functional identities", 60);
}

#[test]
fn boltzmann_gibbs_trend() {
    run_config("bg", "Boltzmann-Gibbs sup-residual across N", 600);
}
