use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use rpetel::diagnostics::DiagnosticsReport;
use rpetel::experiment::config::{run_sampling, RunConfig};
use rpetel::experiment::{erm_oracle, generate_scenario, run_coverage_experiment, ErmOptions, ExperimentConfig, Scenario};
use rpetel::samplers::read_chain_csv;

#[derive(Parser, Debug)]
#[command(name = "rpetel", version, about = "Riemannian MCMC under the RPETEL pseudo-posterior")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a posterior chain described by a JSON config.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a coverage experiment and write coverage.csv and replicates.csv.
    Experiment {
        #[arg(long)]
        scenario: Scenario,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        replicates: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// K=3000 kept draws after 500 burn-in instead of the desk-scale 1500/300.
        #[arg(long)]
        paper_scale: bool,
    },
    /// ESS and PSRF per coordinate over one or more chain CSVs.
    Diagnose {
        #[arg(long, value_delimiter = ',', required = true)]
        chains: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Empirical risk minimizer on one simulated dataset.
    Erm {
        #[arg(long)]
        scenario: Scenario,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Sample { config, out, seed } => sample(&config, &out, seed),
        Command::Experiment { scenario, n, replicates, seed, out, paper_scale } => {
            let mut cfg = ExperimentConfig::desk(scenario, n, replicates, seed);
            if paper_scale {
                cfg = cfg.paper_scale();
            }
            let table = run_coverage_experiment(&cfg)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            table.write_to_dir(&out)?;
            for row in &table.rows {
                println!("{:<14} {:.2}  coverage {:.4} (se {:.4})", row.target, row.nominal, row.coverage, row.std_error);
            }
            if table.failures() > 0 {
                eprintln!("{} replicate(s) failed; see replicates.csv", table.failures());
            }
            Ok(())
        }
        Command::Diagnose { chains, out } => diagnose(&chains, &out),
        Command::Erm { scenario, n, seed } => {
            let data = generate_scenario(scenario.name(), n, seed)?;
            let fit = erm_oracle(&scenario.loss(), &data.observations, &ErmOptions { seed, ..ErmOptions::default() })?;
            let gap = (fit.point.coords() - data.truth.coords()).norm();
            println!("point    {}", join(fit.point.coords().iter()));
            println!("truth    {}", join(data.truth.coords().iter()));
            println!("risk     {:.10e}", fit.risk);
            println!("gradient {:.3e}", fit.grad_norm);
            println!("distance {gap:.6e}");
            Ok(())
        }
    }
}

fn sample(config: &Path, out: &Path, seed: u64) -> Result<()> {
    let cfg = RunConfig::from_path(config)?;
    let base = config.parent().unwrap_or_else(|| Path::new("."));
    let run = run_sampling(&cfg, base, seed)?;
    run.chain.write_csv(BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?))?;
    println!("{} draws, acceptance {:.3}", run.chain.len(), run.chain.stats.acceptance_rate());
    Ok(())
}

fn diagnose(paths: &[PathBuf], out: &Path) -> Result<()> {
    let mut series = Vec::with_capacity(paths.len());
    for p in paths {
        let states = read_chain_csv(File::open(p).with_context(|| format!("opening {}", p.display()))?)?;
        let Some(first) = states.first() else { bail!("{} holds no draws", p.display()) };
        let dim = first.len();
        series.push((0..dim).map(|j| states.iter().map(|s| s[j]).collect::<Vec<f64>>()).collect::<Vec<_>>());
    }
    let len = series[0][0].len();
    if series.iter().any(|c| c[0].len() != len) {
        bail!("chains differ in length");
    }
    let report = DiagnosticsReport::from_series(&series)?;
    report.write_csv(BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?))?;
    for c in &report.coordinates {
        let iters = c.iters_to_threshold.map_or("NA".to_string(), |v| v.to_string());
        println!("x{}  ess {:.1}  psrf {:.4} ({:.4})  iters {iters}", c.coordinate, c.ess, c.psrf_median, c.psrf_q975);
    }
    Ok(())
}

fn join<'a>(values: impl Iterator<Item = &'a f64>) -> String {
    values.map(|v| format!("{v:.8}")).collect::<Vec<_>>().join(" ")
}
