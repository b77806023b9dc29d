use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use fep_core::dynamics::EventCounter;
use fep_core::exact::build_generator;
use fep_core::harness::{pde_grid, replica_rng, run, stream_id, ExperimentConfig, ExperimentKind, Summary};
use fep_core::hydro::{solve_heat_forced, solve_transport, Coefficients};
use fep_core::{
    simulate, Base, CanonicalWindow, Embedding, GrandCanonical, Observer, Profile, RateModel, SimOptions, TestFunction,
};

#[derive(Parser)]
#[command(name = "fep", version, about = "Simulate and verify the facilitated exclusion process")]
struct Cli {
    /// Seed for all random streams (overrides the config file for `run`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for CSV series and the JSON summary.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Symmetric,
    Asymmetric,
}

impl From<Model> for Base {
    fn from(m: Model) -> Base {
        match m {
            Model::Symmetric => Base::Symmetric,
            Model::Asymmetric => Base::Asymmetric,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Draw ring configurations from the grand-canonical measure, or windows
    /// from the canonical one.
    Sample {
        #[arg(long, default_value_t = 0.75)]
        rho: f64,
        #[arg(long, default_value_t = 64)]
        len: usize,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Sample a canonical window of this half-width instead of a ring.
        #[arg(long)]
        canonical: Option<usize>,
    },
    /// Run the process from a stationary start and record event and particle counts.
    Simulate {
        #[arg(long, value_enum, default_value_t = Model::Symmetric)]
        model: Model,
        #[arg(long, default_value_t = 0.75)]
        rho: f64,
        #[arg(long, default_value_t = 100.0)]
        n: f64,
        #[arg(long, default_value_t = 200)]
        len: usize,
        #[arg(long, default_value_t = 0.01)]
        horizon: f64,
        #[arg(long, default_value_t = 10)]
        samples: usize,
        /// Binary event log (f64 time increment, u32 bond, little endian).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Exact stationary law on a small ring; with --events also compare
    /// simulated occupation frequencies against it.
    Verify {
        #[arg(long, default_value_t = 10)]
        len: usize,
        #[arg(long, default_value_t = 7)]
        particles: usize,
        #[arg(long)]
        events: Option<f64>,
        #[arg(long, default_value_t = 10000)]
        samples: usize,
    },
    /// Solve the limiting equation from an initial profile.
    Hydro {
        #[arg(long, default_value_t = 0.75)]
        rho: f64,
        /// Initial profile, e.g. `gaussian:1,0,0.1`.
        #[arg(long, value_parser = parse_profile)]
        initial: Profile,
        /// Forcing profile for the heat equation.
        #[arg(long, value_parser = parse_profile)]
        forcing: Option<Profile>,
        #[arg(long, default_value_t = 0.05)]
        horizon: f64,
        /// Solve the transport equation instead of the heat equation.
        #[arg(long)]
        transport: bool,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        /// Write every `stride`-th time step.
        #[arg(long, default_value_t = 100)]
        stride: usize,
    },
    /// Boltzmann-Gibbs residual across system sizes.
    Bg {
        #[arg(long, default_value_t = 0.75)]
        rho: f64,
        #[arg(long, default_value_t = 0.75)]
        gamma: f64,
        #[arg(long, value_delimiter = ',', default_value = "250,500,1000")]
        sizes: Vec<f64>,
        #[arg(long, default_value_t = 2e-4)]
        horizon: f64,
        #[arg(long, default_value_t = 16)]
        replicas: usize,
        #[arg(long, value_parser = parse_profile, default_value = "gaussian:1,0,0.05")]
        test: Profile,
    },
    /// Scaled relative entropy of the perturbed measure.
    Entropy {
        #[arg(long, default_value_t = 0.75)]
        rho: f64,
        #[arg(long, default_value_t = 1e6)]
        n: f64,
        #[arg(long, default_value_t = 0.75)]
        gamma: f64,
        #[arg(long, value_parser = parse_profile)]
        initial: Profile,
    },
    /// Rate-functional identities for a forcing profile.
    Rate {
        #[arg(long, default_value_t = 0.75)]
        rho: f64,
        #[arg(long, default_value_t = 0.05)]
        horizon: f64,
        #[arg(long, value_parser = parse_profile, default_value = "gaussian:1,0,0.2")]
        forcing: Profile,
    },
    /// Run an experiment described by a TOML file.
    Run { config: PathBuf },
}

/// `kind:a,b,c[,d]` with kind `gaussian`, `bump` or `sine_bump`.
fn parse_profile(s: &str) -> Result<Profile, String> {
    let (kind, rest) = s.split_once(':').ok_or("expected kind:amplitude,center,width")?;
    let v: Vec<f64> = rest
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x}: {e}")))
        .collect::<Result<_, _>>()?;
    match (kind, v.as_slice()) {
        ("gaussian", [a, c, w]) => Ok(Profile::gaussian(*a, *c, *w)),
        ("bump", [a, c, r]) => Ok(Profile::bump(*a, *c, *r)),
        ("sine_bump", [a, c, r, f]) => Ok(Profile::sine_bump(*a, *c, *r, *f)),
        _ => Err(format!("cannot read profile {s:?}")),
    }
}

fn output(out: Option<&Path>, name: &str) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(d) => {
            fs::create_dir_all(d)?;
            Box::new(BufWriter::new(File::create(d.join(name))?))
        }
        None => Box::new(io::stdout().lock()),
    })
}

fn print_summary(s: &Summary) {
    for (k, v) in &s.metrics {
        println!("{k} = {v}");
    }
    for w in &s.warnings {
        eprintln!("warning: {w}");
    }
    for c in &s.checks {
        println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
}

fn experiment(cli: &Cli, mut cfg: ExperimentConfig) -> Result<bool> {
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.out.is_some() {
        cfg.out = cli.out.clone();
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    let s = run(&cfg)?;
    print_summary(&s);
    Ok(s.passed())
}

fn execute(cli: &Cli) -> Result<bool> {
    let seed = cli.seed.unwrap_or(0);
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Sample { rho, len, count, canonical } => {
            let gc = GrandCanonical::new(*rho)?;
            let mut rng = replica_rng(seed, stream_id(0, 0));
            let mut w = output(out, "samples.txt")?;
            match canonical {
                Some(l) => {
                    let window = CanonicalWindow::at_density(*l, *rho);
                    for s in window.sample_many(&gc, *count, &mut rng)? {
                        let text: String = s.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect();
                        writeln!(w, "{text}")?;
                    }
                }
                None => {
                    for _ in 0..*count {
                        writeln!(w, "{}", gc.sample_ring(*len, &mut rng))?;
                    }
                }
            }
            w.flush()?;
            Ok(true)
        }
        Command::Simulate { model, rho, n, len, horizon, samples, trace } => {
            let gc = GrandCanonical::new(*rho)?;
            let mut rng = replica_rng(seed, stream_id(0, 0));
            let init = gc.sample_ring(*len, &mut rng);
            let model = match Base::from(*model) {
                Base::Symmetric => RateModel::symmetric(*n),
                Base::Asymmetric => RateModel::asymmetric(*n),
            };
            let emb = Embedding::centered(*n, *len);
            let mut counter = EventCounter::default();
            let mut trace_file = match trace {
                Some(p) => Some(BufWriter::new(File::create(p)?)),
                None => None,
            };
            let opts = SimOptions {
                sample_times: (1..*samples).map(|i| horizon * i as f64 / *samples as f64).collect(),
                trace: trace_file.as_mut().map(|f| f as &mut dyn Write),
                ..SimOptions::default()
            };
            let path = simulate(&init, &model, &emb, *horizon, &mut [&mut counter as &mut dyn Observer], opts, &mut rng)?;
            let mut w = output(out, "simulate.csv")?;
            writeln!(w, "t,events,particles")?;
            for (i, t) in path.times.iter().enumerate() {
                writeln!(w, "{t:.10e},{},{}", path.values[0][i], path.values[1][i])?;
            }
            w.flush()?;
            eprintln!("{} events, {} particles, final {}", path.events, init.particles(), path.final_config.particles());
            Ok(path.final_config.particles() == init.particles())
        }
        Command::Verify { len, particles, events, samples } => {
            let mut ok = true;
            for base in [Base::Symmetric, Base::Asymmetric] {
                let gen = build_generator(*len, Some(*particles), base)?;
                let pi = gen.stationary_distribution()?;
                let residual = gen.balance_residual(&pi);
                let pass = residual <= 1e-12;
                ok &= pass;
                println!(
                    "[{}] {base:?}: {} states, balance residual {residual:.2e}",
                    if pass { "PASS" } else { "FAIL" },
                    gen.dim()
                );
                if let Some(d) = out {
                    fs::create_dir_all(d)?;
                    let tag = format!("{base:?}").to_lowercase();
                    gen.write_csv(File::create(d.join(format!("generator_{tag}.csv")))?)?;
                    gen.write_distribution_csv(File::create(d.join(format!("stationary_{tag}.csv")))?, &pi)?;
                }
            }
            if let Some(e) = events {
                let mut cfg = ExperimentConfig::new(ExperimentKind::Stationarity);
                cfg.len = Some(*len);
                cfg.particles = Some(*particles);
                cfg.events = Some(*e);
                cfg.samples = Some(*samples);
                ok &= experiment(cli, cfg)?;
            }
            Ok(ok)
        }
        Command::Hydro { rho, initial, forcing, horizon, transport, steps, stride } => {
            let coef = Coefficients::new(*rho)?;
            let f = forcing.unwrap_or_else(Profile::zero);
            let grid = pde_grid(&[*initial, f], &coef, *horizon, *steps);
            let path = if *transport {
                if forcing.is_some() {
                    bail!("--forcing applies to the heat equation only");
                }
                solve_transport(initial, &coef, &grid)
            } else {
                solve_heat_forced(initial, &TestFunction::stationary(f), &coef, &grid)?
            };
            path.write_csv(output(out, "hydro_path.csv")?, *stride)?;
            Ok(true)
        }
        Command::Bg { rho, gamma, sizes, horizon, replicas, test } => {
            let mut cfg = ExperimentConfig::new(ExperimentKind::Bg);
            cfg.rho = *rho;
            cfg.gamma = *gamma;
            cfg.sizes = sizes.clone();
            cfg.horizon = *horizon;
            cfg.replicas = *replicas;
            cfg.test_function = Some(TestFunction::stationary(*test));
            experiment(cli, cfg)
        }
        Command::Entropy { rho, n, gamma, initial } => {
            let mut cfg = ExperimentConfig::new(ExperimentKind::Entropy);
            cfg.rho = *rho;
            cfg.n = *n;
            cfg.gamma = *gamma;
            cfg.initial = Some(*initial);
            experiment(cli, cfg)
        }
        Command::Rate { rho, horizon, forcing } => {
            let mut cfg = ExperimentConfig::new(ExperimentKind::Rate);
            cfg.rho = *rho;
            cfg.horizon = *horizon;
            cfg.test_function = Some(TestFunction::stationary(*forcing));
            experiment(cli, cfg)
        }
        Command::Run { config } => {
            let cfg = ExperimentConfig::from_file(config).with_context(|| format!("reading {}", config.display()))?;
            experiment(cli, cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
