//! Command-line benchmark harness: seeded Monte-Carlo NMSE experiments over
//! estimation schemes and transmit-power sweeps, training-phase
//! optimization, and a built-in invariant suite.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 on runtime
//! failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use riscade_cli::config::ExperimentConfig;
use riscade_cli::{records, runner, selftest};
use riscade_core::phase_opt::{
    build_gain_matrix, optimize_steering, SteeringVector, DEFAULT_MAX_ITERS, DEFAULT_TOL,
};

#[derive(Parser)]
#[command(name = "riscade", version, about = "Cascaded surface-channel estimation benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the Monte-Carlo experiment described by a config file and write
    /// the aggregated NMSE table as CSV.
    Run {
        /// Path to a `key = value` experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path (overrides the config's `out`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Base seed (overrides the config's `seed`).
        #[arg(long)]
        seed: Option<u64>,
        /// Worker thread count (default: one per core). Results are
        /// identical for any value.
        #[arg(long)]
        threads: Option<usize>,
        /// Also serialize one raw training record per swept power into this
        /// directory (binary + JSON sidecar).
        #[arg(long)]
        dump_records: Option<PathBuf>,
    },
    /// Optimize the training steering vector for a config and print the
    /// objective trajectory and the optimized entries as CSV.
    PhaseOpt {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the built-in invariant suite.
    Selftest,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run {
            config,
            out,
            seed,
            threads,
            dump_records,
        } => run(config, out, seed, threads, dump_records),
        Command::PhaseOpt { config } => phase_opt(config),
        Command::Selftest => {
            if selftest::run_selftest() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(3)
            }
        }
    }
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig, ExitCode> {
    ExperimentConfig::load(path).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(2)
    })
}

fn run(
    config: PathBuf,
    out: Option<PathBuf>,
    seed: Option<u64>,
    threads: Option<usize>,
    dump_records: Option<PathBuf>,
) -> ExitCode {
    let mut cfg = match load_config(&config) {
        Ok(c) => c,
        Err(code) => return code,
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(out) = out {
        cfg.out = out.display().to_string();
    }

    let pool = match threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(p) => Some(p),
            Err(e) => {
                eprintln!("error: cannot build thread pool: {e}");
                return ExitCode::from(3);
            }
        },
        None => None,
    };

    let execute = || -> Result<(), String> {
        let scenario = runner::build_scenario(&cfg).map_err(|e| e.to_string())?;
        if let Some(dir) = &dump_records {
            for &power in &cfg.power_dbm {
                let record = runner::sample_record(&scenario, power, cfg.seed)
                    .map_err(|e| e.to_string())?;
                let stem = format!("record_proposed_{power}dbm");
                records::dump_record(&record, dir, &stem).map_err(|e| e.to_string())?;
            }
        }
        let rows = runner::run_scenario(&scenario, &cfg).map_err(|e| e.to_string())?;
        let csv = runner::render_csv(&rows);
        std::fs::write(&cfg.out, csv).map_err(|e| format!("cannot write {}: {e}", cfg.out))?;
        println!("wrote {}", cfg.out);
        Ok(())
    };

    let result = match &pool {
        Some(p) => p.install(execute),
        None => execute(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}

fn phase_opt(config: PathBuf) -> ExitCode {
    let cfg = match load_config(&config) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let scenario = match runner::build_scenario(&cfg) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    };
    let gain = match build_gain_matrix(&scenario.covariances, &scenario.dims) {
        Ok(g) => g,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    };
    let result = match optimize_steering(
        &gain,
        &SteeringVector::ones(cfg.irs_elements),
        DEFAULT_TOL,
        DEFAULT_MAX_ITERS,
    ) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    };
    println!("iter,f_b");
    for (i, f) in result.trajectory.iter().enumerate() {
        println!("{i},{}", runner::fmt_float(*f));
    }
    println!();
    println!("element,steering_re,steering_im");
    for (i, z) in result.steering.entries().iter().enumerate() {
        println!(
            "{i},{},{}",
            runner::fmt_float(z.re),
            runner::fmt_float(z.im)
        );
    }
    ExitCode::SUCCESS
}
