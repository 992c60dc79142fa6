//! Command-line frontend: oracle building, single runs, sweeps, reports,
//! and the built-in analytic selfcheck.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use robustnas::bilevel::RetrainConfig;
use robustnas::data::{make_spirals, DataConfig};
use robustnas::harness::{
    build_oracle, report, run, selfcheck, sweep, ExperimentConfig, Strategy,
};
use robustnas::space::SpaceSpec;
use robustnas::{Error, Result};

#[derive(Parser)]
#[command(
    name = "robustnas",
    version,
    about = "Desk-scale differentiable architecture search with curvature tracking"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Retrain every genotype of a finite space and persist the error table.
    Oracle {
        /// Space preset (T2/T3/T4/T5).
        #[arg(long, default_value = "T5")]
        space: String,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Retrain epochs per genotype and seed.
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        /// Retrain seeds.
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
        /// Dataset seed (sizes and noise use the dataset defaults).
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// One search run into a run directory.
    Search {
        /// Experiment config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory (else config.out_dir, else $ROBUSTNAS_OUT/<name>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config's search seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the strategy (darts|darts_es|darts_ada|r_darts|rs_ws).
        #[arg(long)]
        strategy: Option<Strategy>,
        /// Override the space preset.
        #[arg(long)]
        space: Option<String>,
        /// Oracle table for regret reporting.
        #[arg(long)]
        oracle: Option<PathBuf>,
    },
    /// Expand the config's sweep axis x seeds into a grid of runs.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Base directory for the run subdirectories and summary.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Join run directories into a summary with correlation stats.
    Report {
        /// Run directories to join.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Also write the joined rows as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in analytic oracles and cross-checks.
    Selfcheck,
}

fn main() -> ExitCode {
    match dispatch() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn dispatch() -> Result<ExitCode> {
    match Cli::parse().cmd {
        Cmd::Oracle { space, out, epochs, seeds, data_seed, jobs } => {
            let spec = SpaceSpec::preset(&space)?;
            let data = make_spirals(&DataConfig { seed: data_seed, ..DataConfig::default() });
            let protocol = RetrainConfig::evaluation(epochs, 0);
            let table = build_oracle(&spec, &data, &protocol, &seeds, jobs)?;
            table.save(&out)?;
            let best = table.optimum();
            println!("{} rows -> {}", table.rows.len(), out.display());
            println!("optimum: {} (mean test error {})", best.genotype, best.mean_test);
        }
        Cmd::Search { config, out, seed, strategy, space, oracle } => {
            let mut cfg = match &config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::default(),
            };
            if let Some(s) = seed {
                cfg.search.seed = s;
            }
            if let Some(s) = strategy {
                cfg.strategy = s;
            }
            if let Some(s) = space {
                cfg.space = s;
            }
            if let Some(p) = oracle {
                cfg.oracle = Some(p);
            }
            let dir = resolve_out(out.as_deref(), &cfg)?;
            let art = run(&cfg, &dir)?;
            println!("run dir: {}", art.dir.display());
            println!("genotype: {}", art.result.genotype);
            if let Some(r) = art.result.test_regret {
                println!("test regret: {r}");
            }
            if let Some(e) = art.result.stop_epoch {
                println!("early-stopped: returned epoch-{e} snapshot");
            }
        }
        Cmd::Sweep { config, out, jobs } => {
            let cfg = ExperimentConfig::load(&config)?;
            let base = resolve_out(out.as_deref(), &cfg)?;
            let sw = sweep(&cfg, &base, jobs)?;
            println!("{} runs -> {}", sw.rows.len(), sw.summary_path.display());
        }
        Cmd::Report { dirs, out } => {
            let rpt = report(&dirs, out.as_deref())?;
            for row in &rpt.rows {
                let regret =
                    row.test_regret.map_or("-".to_string(), |v| v.to_string());
                let lambda =
                    row.final_lambda_max.map_or("-".to_string(), |v| v.to_string());
                let stop = row.stop_epoch.map_or("-".to_string(), |e| e.to_string());
                println!(
                    "{}\tgenotype={}\tregret={regret}\tlambda_max={lambda}\tstop={stop}",
                    row.dir, row.genotype
                );
            }
            for path in &rpt.missing {
                eprintln!("missing: {path}");
            }
            match rpt.correlation {
                Some((r, n)) => {
                    println!("pearson(final lambda_max, test regret) = {r} over {n} runs")
                }
                None => println!(
                    "correlation unavailable (needs >= 3 runs with regret and a finite \
                     final lambda_max)"
                ),
            }
        }
        Cmd::Selfcheck => {
            let lines = selfcheck();
            let mut all_pass = true;
            for line in &lines {
                println!("{} {:<28} {}", if line.pass { "ok  " } else { "FAIL" }, line.name,
                    line.detail);
                all_pass &= line.pass;
            }
            return Ok(if all_pass { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Output directory precedence: `--out`, then the config's `out_dir`, then
/// `$ROBUSTNAS_OUT/<strategy>_<space>_seed<seed>`.
fn resolve_out(flag: Option<&Path>, cfg: &ExperimentConfig) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p.to_path_buf());
    }
    if let Some(p) = &cfg.out_dir {
        return Ok(p.clone());
    }
    if let Ok(root) = std::env::var("ROBUSTNAS_OUT") {
        let name = format!("{}_{}_seed{}", cfg.strategy, cfg.space, cfg.search.seed);
        return Ok(PathBuf::from(root).join(name));
    }
    Err(Error::config(
        "no output directory: pass --out, set out_dir in the config, or set ROBUSTNAS_OUT",
    ))
}
