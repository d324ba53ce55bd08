use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use errdiag_harness::{ablate, accept, experiment, report, HarnessError, RunConfig};

/// Run, ablate and summarize diagnostic-gated learners.
#[derive(Parser)]
#[command(name = "errdiag", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of a config and write one trace per run.
    Run(RunArgs),
    /// Run the full method and each single-component ablation.
    Ablate(RunArgs),
    /// Summarize a directory of traces into CSV files.
    Report {
        /// Directory holding the .jsonl traces.
        trace_dir: PathBuf,
        /// Where to write the CSV files [default: <TRACE_DIR>/report].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the acceptance suite and print a pass/fail table.
    Accept,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory [default: out_dir from the config, else runs/<kind>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds replacing those in the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

impl RunArgs {
    fn load(&self) -> Result<(RunConfig, PathBuf), HarnessError> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(seeds) = &self.seeds {
            cfg.seeds.clone_from(seeds);
            cfg.validate()?;
        }
        let out = self
            .out
            .clone()
            .or_else(|| cfg.out_dir.clone())
            .unwrap_or_else(|| Path::new("runs").join(cfg.kind.as_str()));
        Ok((cfg, out))
    }
}

fn execute(cli: Cli) -> Result<ExitCode, HarnessError> {
    match cli.command {
        Command::Run(args) => {
            let (cfg, out) = args.load()?;
            let m = experiment::run_experiment(&cfg, &out, args.jobs)?;
            println!("{} runs written to {} (config {})", m.runs.len(), out.display(), &m.config_hash[..12]);
        }
        Command::Ablate(args) => {
            let (cfg, out) = args.load()?;
            let (_, rep) = ablate::ablate(&cfg, &out, args.jobs)?;
            println!("variant,n,update_norm_variance_ratio,overshoot_ratio,oscillation_ratio");
            for s in &rep.summary {
                println!(
                    "{},{},{:.4},{:.4},{:.4}",
                    s.variant, s.n, s.update_norm_variance_ratio, s.overshoot_ratio, s.oscillation_ratio
                );
            }
            println!("tables written to {}", out.display());
        }
        Command::Report { trace_dir, out } => {
            let out = out.unwrap_or_else(|| trace_dir.join("report"));
            let rep = report::report(&trace_dir, &out)?;
            println!("{} traces summarized into {}", rep.runs.len(), out.display());
        }
        Command::Accept => {
            let outcomes = accept::run_suite(|o| println!("{}", accept::format_outcome(o)));
            let failed = outcomes.iter().filter(|o| !o.passed()).count();
            println!("{} of {} criteria passed", outcomes.len() - failed, outcomes.len());
            if failed > 0 {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
