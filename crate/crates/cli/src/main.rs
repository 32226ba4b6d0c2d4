//! Command-line front end: single-point queries, block-length optimization,
//! multicast crossover search, config-driven sweeps, and canned result
//! tables, all emitting deterministic plain text or CSV.

use std::fs;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use arqcast_core::dist::ErasureProb;
use arqcast_core::experiment::{
    reproduce_figure, run_experiment, ExperimentError, ExperimentSpec, FigureId, FigureOptions,
    DEFAULT_SEED, DEFAULT_TRIALS,
};
use arqcast_core::montecarlo::{simulate, SimulationPlan};
use arqcast_core::optimize::{default_ns_max, find_crossover_users, optimize_ns};
use arqcast_core::schemes::{expected_delay, CodeConfig, Scenario, Scheme, SchemeError};

#[derive(Parser)]
#[command(
    name = "arqcast",
    version,
    about = "Expected download time of layered erasure-coding schemes",
    long_about = "Computes, optimizes, and simulates the expected time to deliver a file of \
                  k_p packets x k_s symbols over a memoryless erasure channel under infinite \
                  incremental redundancy (iir), fixed redundancy (fr), or finite incremental \
                  redundancy (fir), point-to-point or multicast."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exact expected download time for one configuration.
    Analyze(PointArgs),
    /// Seeded Monte Carlo estimate for one configuration.
    Simulate {
        #[command(flatten)]
        point: PointArgs,
        /// Number of independent trials.
        #[arg(long, default_value_t = DEFAULT_TRIALS)]
        trials: u64,
        /// Base RNG seed; trial i uses stream i of this seed.
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Exhaustive block-length search minimizing the expected download time.
    Optimize {
        /// Scheme to optimize: fr or fir (iir has no block length).
        #[arg(long, value_parser = parse_scheme)]
        scheme: Scheme,
        /// Data symbols per packet.
        #[arg(long)]
        ks: u64,
        /// Packets per file.
        #[arg(long)]
        kp: u64,
        /// Symbol erasure probability in [0, 1).
        #[arg(long, value_parser = parse_eps)]
        eps: ErasureProb,
        /// Audience size.
        #[arg(long, default_value_t = 1)]
        users: u64,
        /// Largest block length to try; defaults to 3 k_s (fr) or 5 k_s (fir).
        #[arg(long = "ns-max")]
        ns_max: Option<u64>,
    },
    /// Smallest audience size from which optimized fixed redundancy beats
    /// infinite incremental redundancy for good.
    Crossover {
        /// Data symbols per packet.
        #[arg(long)]
        ks: u64,
        /// Packets per file.
        #[arg(long)]
        kp: u64,
        /// Symbol erasure probability in [0, 1).
        #[arg(long, value_parser = parse_eps)]
        eps: ErasureProb,
        /// Largest audience size on the 1-2-5 grid.
        #[arg(long = "users-max", default_value_t = 1000)]
        users_max: u64,
        /// Block-length search ceiling; defaults to 3 k_s.
        #[arg(long = "ns-max")]
        ns_max: Option<u64>,
    },
    /// Run a sweep described by a TOML config and emit CSV.
    Sweep {
        /// Path to the sweep description.
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-create one of the canned result tables (fig2 through fig6) as CSV.
    Figure {
        /// Table identifier: fig2, fig3, fig4, fig5, or fig6 (or just 2-6).
        #[arg(value_parser = parse_figure)]
        id: FigureId,
        /// Output CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Base RNG seed for the simulated series.
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        /// Overrides every per-table trial count when set.
        #[arg(long)]
        trials: Option<u64>,
    },
}

/// Parameters shared by the single-point commands.
#[derive(Args)]
struct PointArgs {
    /// Scheme: iir, fr, or fir.
    #[arg(long, value_parser = parse_scheme)]
    scheme: Scheme,
    /// Data symbols per packet.
    #[arg(long)]
    ks: u64,
    /// Packets per file.
    #[arg(long)]
    kp: u64,
    /// Block length for fr and fir; must be omitted for iir.
    #[arg(long)]
    ns: Option<u64>,
    /// Symbol erasure probability in [0, 1).
    #[arg(long, value_parser = parse_eps)]
    eps: ErasureProb,
    /// Audience size.
    #[arg(long, default_value_t = 1)]
    users: u64,
}

impl PointArgs {
    fn scenario(&self) -> Result<Scenario, SchemeError> {
        let code = CodeConfig::new(self.ks, self.kp, self.ns)?;
        Scenario::new(code, self.eps, self.users, self.scheme)
    }
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    s.parse().map_err(|e: SchemeError| e.to_string())
}

fn parse_figure(s: &str) -> Result<FigureId, String> {
    s.parse().map_err(|e: ExperimentError| e.to_string())
}

fn parse_eps(s: &str) -> Result<ErasureProb, String> {
    let v: f64 = s.parse().map_err(|e| format!("not a number: {e}"))?;
    ErasureProb::new(v).map_err(|e| e.to_string())
}

/// Writes to the path when given, otherwise to stdout.
fn emit(text: &str, out: Option<&PathBuf>) -> anyhow::Result<()> {
    match out {
        Some(path) => fs::write(path, text)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn opt_cell(v: Option<impl ToString>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Analyze(point) => {
            let scenario = point.scenario()?;
            let d = expected_delay(&scenario)?;
            println!("scheme: {}", scenario.scheme());
            println!("users: {}", scenario.users());
            println!("mean_slots: {}", d.mean_slots);
            println!(
                "normalized: {}",
                d.normalized.expect("exact estimates are normalized")
            );
            println!("method: {}", d.method);
        }
        Command::Simulate {
            point,
            trials,
            seed,
        } => {
            let scenario = point.scenario()?;
            let plan = SimulationPlan::new(scenario, trials, seed)?;
            let r = simulate(&plan)?;
            println!("scheme: {}", scenario.scheme());
            println!("users: {}", scenario.users());
            println!("mean_slots: {}", r.mean_slots);
            println!(
                "normalized: {}",
                r.mean_slots / scenario.code().data_symbols()
            );
            println!("std_err: {}", r.std_err);
            println!("min_slots: {}", r.min_slots);
            println!("max_slots: {}", r.max_slots);
            println!("trials: {trials}");
            println!("seed: {seed}");
        }
        Command::Optimize {
            scheme,
            ks,
            kp,
            eps,
            users,
            ns_max,
        } => {
            let ceiling = ns_max
                .or_else(|| default_ns_max(scheme, ks))
                .context("iir is rateless: there is no block length to optimize")?;
            let r = optimize_ns(scheme, ks, kp, eps, users, ceiling)?;
            let feasible = r.profile.iter().filter(|p| p.delay.is_ok()).count();
            println!("scheme: {scheme}");
            println!("best_ns: {}", r.best_ns);
            println!("mean_slots: {}", r.best_delay.mean_slots);
            println!(
                "normalized: {}",
                r.best_delay.normalized.expect("exact estimates are normalized")
            );
            println!("capped: {}", r.capped);
            println!("evaluated: {}", r.profile.len());
            println!("feasible: {feasible}");
        }
        Command::Crossover {
            ks,
            kp,
            eps,
            users_max,
            ns_max,
        } => {
            let ceiling = ns_max
                .or_else(|| default_ns_max(Scheme::Fr, ks))
                .expect("fr always has a default ceiling");
            let r = find_crossover_users(ks, kp, eps, users_max, ceiling)?;
            match r.crossover_users {
                Some(u) => println!("crossover_users: {u}"),
                None => println!("crossover_users: none"),
            }
            println!("users,iir_mean_slots,fr_best_ns,fr_mean_slots,fr_wins");
            for p in &r.points {
                let iir = p.iir.as_ref().ok().map(|d| d.mean_slots);
                let fr = p.fr.as_ref().ok();
                let wins = match (iir, fr) {
                    (Some(i), Some(f)) => (f.best_delay.mean_slots < i).to_string(),
                    _ => "false".to_string(),
                };
                println!(
                    "{},{},{},{},{}",
                    p.users,
                    opt_cell(iir),
                    opt_cell(fr.map(|f| f.best_ns)),
                    opt_cell(fr.map(|f| f.best_delay.mean_slots)),
                    wins
                );
            }
        }
        Command::Sweep { config, out } => {
            let text = fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let spec: ExperimentSpec = toml::from_str(&text)
                .with_context(|| format!("parsing {}", config.display()))?;
            let table = run_experiment(&spec)?;
            emit(&table.render_csv(), out.as_ref())?;
        }
        Command::Figure {
            id,
            out,
            seed,
            trials,
        } => {
            let table = reproduce_figure(id, FigureOptions { seed, trials })?;
            emit(&table.render_csv(), out.as_ref())?;
        }
    }
    Ok(())
}
