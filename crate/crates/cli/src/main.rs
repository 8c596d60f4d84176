//! `markowitz`: ingest → panel → stats → optimize/frontier from the shell.
//!
//! Exit codes: 0 success, 1 config/validation/data error, 2 ingest failure,
//! 3 infeasible target or empty frontier, 4 numeric failure.

mod commands;
mod config;
mod output;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Failure;
use crate::config::{load_config_file, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "markowitz", version, about = "Mean-variance portfolio toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fetch per-symbol OHLCV histories into the cache directory.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ingest: IngestFlags,
    },
    /// Align cached histories into a dates × symbols panel.
    Panel {
        #[command(flatten)]
        common: Common,
    },
    /// Mean vector, covariance and correlation of the panel.
    Stats {
        #[command(flatten)]
        common: Common,
    },
    /// Minimum-variance allocation for one target return.
    Optimize {
        #[command(flatten)]
        common: Common,
    },
    /// Efficient frontier over a sweep of target returns.
    Frontier {
        #[command(flatten)]
        common: Common,
        /// Comma-separated ascending targets; defaults to an even sweep.
        #[arg(long, allow_hyphen_values = true)]
        targets: Option<String>,
        /// Number of points in the default sweep.
        #[arg(long)]
        points: Option<String>,
    },
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Flat key = value file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<String>,
    /// Cached histories (default OUTPUT_DIR/cache).
    #[arg(long)]
    cache_dir: Option<String>,
    /// Use this panel CSV instead of OUTPUT_DIR/panel.csv.
    #[arg(long)]
    panel_file: Option<String>,
    /// Use this moments CSV instead of estimating from a panel.
    #[arg(long)]
    moments_file: Option<String>,
    /// Source mode: local | http.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    budget: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    target_return: Option<String>,
    /// long-only | long-short
    #[arg(long)]
    position: Option<String>,
    /// Require E(a_p) − κ·σ_p ≥ 0.
    #[arg(long)]
    limit_constraint: bool,
    #[arg(long, allow_hyphen_values = true)]
    kappa: Option<String>,
    /// equality | return-cost
    #[arg(long)]
    budget_semantics: Option<String>,
    /// Per-weight limit |w_i| ≤ L.
    #[arg(long = "box", allow_hyphen_values = true)]
    box_limit: Option<String>,
    /// Keep symbols with more than this many observations.
    #[arg(long)]
    min_obs: Option<String>,
    /// price | simple | log
    #[arg(long)]
    value_kind: Option<String>,
    /// close | adjclose
    #[arg(long)]
    field: Option<String>,
    #[arg(long)]
    tol: Option<String>,
    #[arg(long)]
    max_iter: Option<String>,
    /// Omit generated_at from JSON reports.
    #[arg(long)]
    no_timestamp: bool,
}

#[derive(Args, Debug, Default)]
struct IngestFlags {
    /// Symbol directory (pipe-delimited) or one symbol per line.
    #[arg(long)]
    symbols_file: Option<String>,
    /// Locator with {symbol}, {day}, {month}, {year}, {start_*} placeholders.
    #[arg(long)]
    source_template: Option<String>,
    #[arg(long)]
    timeout_ms: Option<String>,
    #[arg(long)]
    max_parallel: Option<String>,
    #[arg(long)]
    retries: Option<String>,
    /// First date for {start_*} placeholders (YYYY-MM-DD).
    #[arg(long)]
    start: Option<String>,
    /// Date for {day}/{month}/{year} placeholders (default today).
    #[arg(long)]
    as_of: Option<String>,
    /// Keep symbols flagged as test issues.
    #[arg(long)]
    include_test_issues: bool,
}

impl Common {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut put = |k: &'static str, v: &Option<String>| {
            if let Some(v) = v {
                out.push((k, v.clone()));
            }
        };
        put("output_dir", &self.output_dir);
        put("cache_dir", &self.cache_dir);
        put("panel_file", &self.panel_file);
        put("moments_file", &self.moments_file);
        put("mode", &self.mode);
        put("budget", &self.budget);
        put("target_return", &self.target_return);
        put("position", &self.position);
        put("kappa", &self.kappa);
        put("budget_semantics", &self.budget_semantics);
        put("box", &self.box_limit);
        put("min_obs", &self.min_obs);
        put("value_kind", &self.value_kind);
        put("field", &self.field);
        put("tol", &self.tol);
        put("max_iter", &self.max_iter);
        if self.limit_constraint {
            out.push(("limit_constraint", "true".into()));
        }
        if self.no_timestamp {
            out.push(("no_timestamp", "true".into()));
        }
        out
    }
}

impl IngestFlags {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        for (k, v) in [
            ("symbols_file", &self.symbols_file),
            ("source_template", &self.source_template),
            ("timeout_ms", &self.timeout_ms),
            ("max_parallel", &self.max_parallel),
            ("retries", &self.retries),
            ("start", &self.start),
            ("as_of", &self.as_of),
        ] {
            if let Some(v) = v {
                out.push((k, v.clone()));
            }
        }
        if self.include_test_issues {
            out.push(("include_test_issues", "true".into()));
        }
        out
    }
}

fn resolve(common: &Common, extra: Vec<(&'static str, String)>) -> Result<RunConfig, Failure> {
    let mut map = match &common.config {
        Some(path) => load_config_file(path).map_err(|e| Failure::Config(e.0))?,
        None => BTreeMap::new(),
    };
    for (k, v) in common.overrides().into_iter().chain(extra) {
        map.insert(k.to_string(), v);
    }
    let cfg = RunConfig::from_map(&map).map_err(|e| Failure::Config(e.0))?;
    cfg.check_paths().map_err(|e| Failure::Config(e.0))?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Ingest { common, ingest } => commands::ingest(&resolve(&common, ingest.overrides())?),
        Command::Panel { common } => commands::panel(&resolve(&common, Vec::new())?),
        Command::Stats { common } => commands::stats(&resolve(&common, Vec::new())?),
        Command::Optimize { common } => commands::optimize(&resolve(&common, Vec::new())?),
        Command::Frontier { common, targets, points } => {
            let mut extra = Vec::new();
            if let Some(t) = targets {
                extra.push(("targets", t));
            }
            if let Some(p) = points {
                extra.push(("points", p));
            }
            commands::frontier(&resolve(&common, extra)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
