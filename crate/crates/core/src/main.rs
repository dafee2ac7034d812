use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use graphsync::experiment::{parse_config, run, write_report, Mode, RunOptions, INVENTED_DEFAULTS};
use graphsync::Error;

/// Number of worker threads for sweep points.
const WORKERS_ENV: &str = "GRAPHSYNC_WORKERS";

fn after_help() -> String {
    format!(
        "Config keys (key=value, # comments): mode m n h classes step d(=auto) noise_sigma source_sigma \
         outliers symmetric_adjacency seeds tau sinkhorn_iters theta lambda gamma alpha lr fit_steps adapt_steps miter \
         drop_rate out_dir embedding_dir.\n\
         Defaults: tau=0.05 sinkhorn_iters=20 theta=1e-5 lr=1e-3 h=256 d=120 m=4.\n\
         Invented defaults (no published value): {}.\n\
         Environment: {WORKERS_ENV} sets the worker count.\n\
         Exit codes: 0 success, 1 config error, 2 runtime error.",
        INVENTED_DEFAULTS.join(", ")
    )
}

#[derive(Parser, Debug)]
#[command(name = "graphsync", version, about = "Multi-graph matching experiments", after_help = after_help())]
struct Cli {
    /// fit-universe, tta, oracle-compare or sweep
    mode: Mode,
    #[arg(long)]
    config: PathBuf,
    /// Mixed into every per-seed child seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overrides out_dir from the config
    #[arg(long)]
    out: Option<PathBuf>,
    /// Zero all timings so outputs are byte-identical across runs
    #[arg(long)]
    reproducible: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let workers = match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => Some(n),
            _ => {
                eprintln!("error: {WORKERS_ENV} must be a positive integer, got `{v}`");
                return ExitCode::from(1);
            }
        },
        Err(_) => None,
    };
    let text = match std::fs::read_to_string(&cli.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {}: {e}", cli.config.display());
            return ExitCode::from(1);
        }
    };
    let mut cfg = match parse_config(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}: {e}", cli.config.display());
            return ExitCode::from(1);
        }
    };
    if let Some(mode) = cfg.mode.filter(|&m| m != cli.mode) {
        eprintln!("error: config sets mode={mode} but {} was requested", cli.mode);
        return ExitCode::from(1);
    }
    cfg.mode = Some(cli.mode);
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    let opts = RunOptions { seed: cli.seed, reproducible: cli.reproducible, workers };
    let result = run(&cfg, cli.mode, &opts).and_then(|report| {
        write_report(&report, &cfg.to_text(), &cfg.out_dir)?;
        Ok(report)
    });
    match result {
        Ok(report) => {
            print!("{}", report.summary());
            ExitCode::SUCCESS
        }
        Err(e @ Error::Parse { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
