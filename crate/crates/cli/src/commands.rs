//! The five subcommands. Each reads a [`RunConfig`], writes its artifacts
//! under the output directory and maps its terminal state to a [`Failure`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use markowitz::format::fmt_sig;
use markowitz::ingest::{
    fetch_all, filter_test_issues, parse_ohlcv_csv, parse_symbol_directory, write_ohlcv_csv, FetchEntry, FetchOptions, FetchOutcome,
    IngestError, OhlcvRow, SourceMode, SourceTemplate,
};
use markowitz::panel::{
    build_panel_with, complete_cases, filter_min_obs, read_panel_csv, to_returns, write_panel_csv, PriceField,
    PricePanel, ValueKind,
};
use markowitz::portfolio::{self, Allocation, AssemblyWarning, PortfolioError, ProblemSpec};
use markowitz::qp::{KktResiduals, Status};
use markowitz::stats::{
    estimate_moments, psd_check, psd_repair, read_moments_csv, to_correlation, write_correlation_csv,
    write_moments_csv, MomentEstimate, PsdReport,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::output::write_report;

/// Values are per panel period; the source data fixes what a period is.
const UNITS: &str = "per panel period";

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Data(String),
    Ingest(String),
    Infeasible(String),
    Numeric(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) | Failure::Data(_) => 1,
            Failure::Ingest(_) => 2,
            Failure::Infeasible(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) | Failure::Data(m) | Failure::Ingest(m) | Failure::Infeasible(m) | Failure::Numeric(m) => {
                f.write_str(m)
            }
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(io_err(path))
}

fn report(path: &Path, value: &impl Serialize, cfg: &RunConfig) -> Result<(), Failure> {
    write_report(path, value, cfg.no_timestamp).map_err(io_err(path))
}

fn ensure_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn remove_if_exists(path: &Path) -> Result<(), Failure> {
    match fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(io_err(path)(e)),
        _ => Ok(()),
    }
}

fn portfolio_failure(e: PortfolioError) -> Failure {
    match e {
        PortfolioError::InvalidSpec(_) => Failure::Config(e.to_string()),
        PortfolioError::Infeasible { .. } | PortfolioError::EmptyFrontier { .. } => Failure::Infeasible(e.to_string()),
        PortfolioError::SolverFailed { .. } => Failure::Numeric(e.to_string()),
        PortfolioError::Qp(_) => Failure::Data(e.to_string()),
    }
}

// ---------------------------------------------------------------- ingest

/// Symbols from a pipe-delimited directory (test issues dropped unless
/// asked) or a plain one-per-line list. Order is kept, duplicates dropped.
fn read_symbols(raw: &[u8], include_test_issues: bool) -> Result<Vec<String>, Failure> {
    let text = String::from_utf8_lossy(raw);
    let first = text.lines().find(|l| !l.trim().is_empty());
    let listed: Vec<String> = match first {
        None => Vec::new(),
        Some(line) if line.contains('|') => {
            let dir = match parse_symbol_directory(raw) {
                Ok(d) => d,
                Err(IngestError::EmptyFile) => return Ok(Vec::new()),
                Err(e) => return Err(Failure::Ingest(e.to_string())),
            };
            if !dir.malformed_lines.is_empty() {
                eprintln!("warning: skipped malformed symbol lines {:?}", dir.malformed_lines);
            }
            let records = if include_test_issues {
                dir.records
            } else {
                filter_test_issues(&dir.records)
            };
            records.into_iter().map(|r| r.symbol.trim().to_string()).collect()
        }
        Some(_) => text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string)
            .collect(),
    };
    let mut out: Vec<String> = Vec::new();
    for s in listed {
        if s.contains(['/', '\\']) || s == "." || s == ".." {
            eprintln!("warning: skipping symbol '{s}' (not usable as a file name)");
        } else if !out.contains(&s) {
            out.push(s);
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct FetchSummary<'a> {
    mode: &'static str,
    template: &'a str,
    as_of: String,
    symbols: usize,
    fetched: usize,
    entries: &'a [FetchEntry],
}

pub fn ingest(cfg: &RunConfig) -> Result<(), Failure> {
    let symbols_file = cfg
        .symbols_file
        .as_ref()
        .ok_or_else(|| Failure::Config("symbols_file is required for ingest".into()))?;
    let template = cfg
        .source_template
        .as_ref()
        .ok_or_else(|| Failure::Config("source_template is required for ingest".into()))?;
    let mut source = SourceTemplate::new(template.clone(), cfg.mode).map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(start) = cfg.start {
        source = source.with_start(start);
    }
    let raw = fs::read(symbols_file).map_err(io_err(symbols_file))?;
    let symbols = read_symbols(&raw, cfg.include_test_issues)?;
    if symbols.is_empty() {
        return Err(Failure::Ingest(format!("no symbols in {}", symbols_file.display())));
    }
    let opts = FetchOptions {
        as_of: cfg.as_of.unwrap_or_else(|| chrono::Utc::now().date_naive()),
        timeout: Duration::from_millis(cfg.timeout_ms),
        retries: cfg.retries,
        max_parallel: cfg.max_parallel,
    };
    ensure_dir(&cfg.output_dir)?;
    let summary = |entries: &[FetchEntry], fetched: usize| -> Result<(), Failure> {
        let s = FetchSummary {
            mode: match cfg.mode {
                SourceMode::LocalFixture => "local",
                SourceMode::Http => "http",
            },
            template,
            as_of: opts.as_of.to_string(),
            symbols: symbols.len(),
            fetched,
            entries,
        };
        report(&cfg.output_dir.join("fetch_report.json"), &s, cfg)
    };
    let result = match fetch_all::<f64>(&symbols, &source, &opts) {
        Ok(r) => r,
        Err(IngestError::AllSourcesFailed(rep)) => {
            summary(&rep.entries, 0)?;
            for e in &rep.entries {
                eprintln!("  {}: {:?}", e.symbol, e.outcome);
            }
            return Err(Failure::Ingest(format!("all {} sources failed", symbols.len())));
        }
        Err(e @ IngestError::TemplateError(_)) => return Err(Failure::Config(e.to_string())),
        Err(e) => return Err(Failure::Ingest(e.to_string())),
    };
    ensure_dir(&cfg.cache_dir)?;
    for (symbol, rows) in &result.series {
        write_file(&cfg.cache_dir.join(format!("{symbol}.csv")), &write_ohlcv_csv(rows))?;
    }
    for e in result.report.not_fetched() {
        remove_if_exists(&cfg.cache_dir.join(format!("{}.csv", e.symbol)))?;
        match &e.outcome {
            FetchOutcome::Skipped { reason } => eprintln!("warning: {} skipped: {reason}", e.symbol),
            FetchOutcome::Failed { reason } => eprintln!("warning: {} failed: {reason}", e.symbol),
            FetchOutcome::Fetched { .. } => {}
        }
    }
    summary(&result.report.entries, result.report.fetched())?;
    println!(
        "ingest: {} of {} symbols cached in {}",
        result.report.fetched(),
        symbols.len(),
        cfg.cache_dir.display()
    );
    Ok(())
}

// ----------------------------------------------------------------- panel

#[derive(Serialize, Deserialize)]
struct PanelSidecar {
    value_kind: ValueKind,
    #[serde(default)]
    field: PriceField,
    #[serde(default)]
    min_obs: usize,
    #[serde(default)]
    symbols: Vec<String>,
    #[serde(default)]
    dropped_symbols: Vec<String>,
    #[serde(default)]
    unreadable: BTreeMap<String, String>,
    #[serde(default)]
    duplicate_dates: usize,
    #[serde(default)]
    n_dates: usize,
}

fn panel_from_cache(cfg: &RunConfig) -> Result<(PricePanel<f64>, PanelSidecar), Failure> {
    let dir = &cfg.cache_dir;
    let entries = fs::read_dir(dir)
        .map_err(|e| Failure::Data(format!("cannot read cache {}: {e} (run ingest first)", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
        .collect();
    files.sort();
    let mut series: BTreeMap<String, Vec<OhlcvRow<f64>>> = BTreeMap::new();
    let mut unreadable = BTreeMap::new();
    for path in files {
        let symbol = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let raw = fs::read(&path).map_err(io_err(&path))?;
        match parse_ohlcv_csv::<f64>(&raw) {
            Ok(s) => {
                series.insert(symbol, s.rows);
            }
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", path.display());
                unreadable.insert(symbol, e.to_string());
            }
        }
    }
    if series.is_empty() {
        return Err(Failure::Data(format!("no readable histories in {}", dir.display())));
    }
    let built = build_panel_with(&series, cfg.field).map_err(|e| Failure::Data(e.to_string()))?;
    let filtered = filter_min_obs(&built.panel, cfg.min_obs)
        .map_err(|e| Failure::Data(format!("{e} (min_obs = {})", cfg.min_obs)))?;
    let dropped: Vec<String> = built
        .panel
        .symbols()
        .iter()
        .filter(|s| !filtered.symbols().contains(s))
        .cloned()
        .collect();
    let aligned = complete_cases(&filtered).map_err(|e| Failure::Data(e.to_string()))?;
    let panel = match cfg.value_kind {
        ValueKind::Price => aligned,
        kind => to_returns(&aligned, kind).map_err(|e| Failure::Data(e.to_string()))?,
    };
    let sidecar = PanelSidecar {
        value_kind: panel.kind(),
        field: cfg.field,
        min_obs: cfg.min_obs,
        symbols: panel.symbols().to_vec(),
        dropped_symbols: dropped,
        unreadable,
        duplicate_dates: built.duplicate_dates,
        n_dates: panel.n_dates(),
    };
    Ok((panel, sidecar))
}

fn sidecar_path(panel_csv: &Path) -> PathBuf {
    panel_csv.with_extension("json")
}

fn read_panel_file(cfg: &RunConfig, path: &Path) -> Result<PricePanel<f64>, Failure> {
    let stored = match fs::read_to_string(sidecar_path(path)) {
        Ok(text) => {
            serde_json::from_str::<PanelSidecar>(&text)
                .map_err(|e| Failure::Data(format!("{}: {e}", sidecar_path(path).display())))?
                .value_kind
        }
        Err(_) => ValueKind::Price,
    };
    let raw = fs::read(path).map_err(io_err(path))?;
    let mut panel = read_panel_csv::<f64>(&raw, stored).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    if panel.has_missing() {
        let before = panel.n_dates();
        panel = complete_cases(&panel).map_err(|e| Failure::Data(e.to_string()))?;
        eprintln!("warning: dropped {} incomplete dates from {}", before - panel.n_dates(), path.display());
    }
    if cfg.value_kind_given && cfg.value_kind != stored {
        if stored != ValueKind::Price {
            return Err(Failure::Config(format!(
                "{} holds {stored:?} values; cannot convert to {:?}",
                path.display(),
                cfg.value_kind
            )));
        }
        panel = to_returns(&panel, cfg.value_kind).map_err(|e| Failure::Data(e.to_string()))?;
    }
    Ok(panel)
}

/// Explicit panel file, then `OUTPUT_DIR/panel.csv`, then the cache.
fn load_panel(cfg: &RunConfig) -> Result<PricePanel<f64>, Failure> {
    if let Some(p) = &cfg.panel_file {
        return read_panel_file(cfg, p);
    }
    let default = cfg.output_dir.join("panel.csv");
    if default.is_file() {
        return read_panel_file(cfg, &default);
    }
    panel_from_cache(cfg).map(|(p, _)| p)
}

pub fn panel(cfg: &RunConfig) -> Result<(), Failure> {
    let (panel, sidecar) = panel_from_cache(cfg)?;
    ensure_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join("panel.csv");
    write_file(&path, &write_panel_csv(&panel))?;
    report(&sidecar_path(&path), &sidecar, cfg)?;
    println!(
        "panel: {} dates × {} symbols ({:?}) written to {}",
        panel.n_dates(),
        panel.n_symbols(),
        panel.kind(),
        path.display()
    );
    Ok(())
}

// ----------------------------------------------------------------- stats

/// Moments from an explicit moments file or estimated from the panel;
/// non-PSD covariance is repaired with a warning.
fn load_moments(cfg: &RunConfig) -> Result<(MomentEstimate<f64>, PsdReport<f64>), Failure> {
    let m = match &cfg.moments_file {
        Some(p) => {
            let raw = fs::read(p).map_err(io_err(p))?;
            read_moments_csv::<f64>(&raw).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?
        }
        None => estimate_moments(&load_panel(cfg)?).map_err(|e| Failure::Data(e.to_string()))?,
    };
    let psd = psd_check(&m, None).map_err(|e| Failure::Numeric(e.to_string()))?;
    if psd.is_psd {
        return Ok((m, psd));
    }
    eprintln!(
        "warning: covariance is not PSD (min eigenvalue {}); clipping eigenvalues at 0",
        fmt_sig(psd.min_eigenvalue)
    );
    let repaired = psd_repair(&m, 0.0).map_err(|e| Failure::Numeric(e.to_string()))?;
    Ok((repaired, psd))
}

#[derive(Serialize)]
struct StatsReport<'a> {
    units: &'static str,
    n_obs: usize,
    symbols: &'a [String],
    mean: &'a [f64],
    volatility: Vec<f64>,
    psd: PsdReport<f64>,
    repaired: bool,
}

pub fn stats(cfg: &RunConfig) -> Result<(), Failure> {
    let (m, psd) = load_moments(cfg)?;
    ensure_dir(&cfg.output_dir)?;
    write_file(&cfg.output_dir.join("moments.csv"), &write_moments_csv(&m))?;
    let corr_path = cfg.output_dir.join("correlation.csv");
    match to_correlation(&m) {
        Ok(c) => write_file(&corr_path, &write_correlation_csv(&c))?,
        Err(e) => {
            remove_if_exists(&corr_path)?;
            eprintln!("warning: no correlation matrix: {e}");
        }
    }
    let r = StatsReport {
        units: UNITS,
        n_obs: m.n_obs(),
        symbols: m.symbols(),
        mean: m.mean(),
        volatility: m.volatilities(),
        psd,
        repaired: !psd.is_psd,
    };
    report(&cfg.output_dir.join("stats.json"), &r, cfg)?;
    println!("stats: {} symbols over {} observations", m.dim(), m.n_obs());
    Ok(())
}

// -------------------------------------------------------------- optimize

fn weights_csv(a: &Allocation<f64>) -> String {
    let mut out = String::from("symbol,weight\n");
    for (s, w) in a.symbols.iter().zip(&a.weights) {
        let _ = writeln!(out, "{s},{}", fmt_sig(*w));
    }
    out
}

#[derive(Serialize)]
struct Weight<'a> {
    symbol: &'a str,
    weight: f64,
}

#[derive(Serialize)]
struct AllocationReport<'a> {
    status: Status,
    units: &'static str,
    expected_return: Option<f64>,
    volatility: Option<f64>,
    kkt: Option<KktResiduals<f64>>,
    solver_kkt: Option<KktResiduals<f64>>,
    iterations: Option<usize>,
    max_achievable_return: Option<f64>,
    weights: Vec<Weight<'a>>,
    warnings: Vec<AssemblyWarning>,
    spec: ProblemSpec<f64>,
}

impl<'a> AllocationReport<'a> {
    fn failed(status: Status, spec: ProblemSpec<f64>, warnings: Vec<AssemblyWarning>) -> Self {
        Self {
            status,
            units: UNITS,
            expected_return: None,
            volatility: None,
            kkt: None,
            solver_kkt: None,
            iterations: None,
            max_achievable_return: None,
            weights: Vec::new(),
            warnings,
            spec,
        }
    }

    fn solved(a: &'a Allocation<f64>, spec: ProblemSpec<f64>, warnings: Vec<AssemblyWarning>) -> Self {
        Self {
            status: a.solution_meta.status,
            expected_return: Some(a.expected_return),
            volatility: Some(a.volatility),
            kkt: Some(a.solution_meta.kkt),
            solver_kkt: Some(a.solver_kkt),
            iterations: Some(a.solution_meta.iterations),
            weights: a
                .symbols
                .iter()
                .zip(&a.weights)
                .map(|(s, &w)| Weight { symbol: s, weight: w })
                .collect(),
            ..Self::failed(a.solution_meta.status, spec, warnings)
        }
    }
}

fn assembly_warnings(m: &MomentEstimate<f64>, spec: &ProblemSpec<f64>) -> Result<Vec<AssemblyWarning>, Failure> {
    let w = portfolio::assemble(m, spec).map_err(portfolio_failure)?.warnings;
    for warning in &w {
        eprintln!("warning: {warning:?}: the feasible set may be unbounded");
    }
    Ok(w)
}

pub fn optimize(cfg: &RunConfig) -> Result<(), Failure> {
    if !cfg.target_given {
        return Err(Failure::Config("target_return is required for optimize".into()));
    }
    let (m, _) = load_moments(cfg)?;
    let spec = cfg.spec;
    let warnings = assembly_warnings(&m, &spec)?;
    ensure_dir(&cfg.output_dir)?;
    let csv_path = cfg.output_dir.join("allocation.csv");
    let json_path = cfg.output_dir.join("allocation.json");
    match portfolio::optimize(&m, &spec, &cfg.solver) {
        Ok(a) => {
            write_file(&csv_path, &weights_csv(&a))?;
            report(&json_path, &AllocationReport::solved(&a, spec, warnings), cfg)?;
            println!(
                "optimize: expected return {} volatility {} ({})",
                fmt_sig(a.expected_return),
                fmt_sig(a.volatility),
                UNITS
            );
            Ok(())
        }
        Err(e) => {
            remove_if_exists(&csv_path)?;
            let status = match &e {
                PortfolioError::Infeasible { .. } => Status::Infeasible,
                PortfolioError::SolverFailed { status, .. } => *status,
                _ => return Err(portfolio_failure(e)),
            };
            let mut r = AllocationReport::failed(status, spec, warnings);
            if let PortfolioError::Infeasible { max_achievable_return } = &e {
                r.max_achievable_return = *max_achievable_return;
            }
            report(&json_path, &r, cfg)?;
            Err(portfolio_failure(e))
        }
    }
}

// -------------------------------------------------------------- frontier

#[derive(Serialize)]
struct FrontierPointReport {
    target: f64,
    achieved_return: f64,
    volatility: f64,
    status: Status,
    iterations: usize,
    kkt: KktResiduals<f64>,
    weights_file: String,
}

#[derive(Serialize)]
struct SkippedReport {
    target: f64,
    status: Status,
    max_achievable_return: Option<f64>,
}

#[derive(Serialize)]
struct FrontierReport {
    status: &'static str,
    units: &'static str,
    targets: Vec<f64>,
    points: Vec<FrontierPointReport>,
    skipped: Vec<SkippedReport>,
    max_achievable_return: Option<f64>,
    warnings: Vec<AssemblyWarning>,
    spec: ProblemSpec<f64>,
}

fn clear_weight_files(dir: &Path) -> Result<(), Failure> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Ok(());
    };
    for e in entries.filter_map(Result::ok) {
        let name = e.file_name().to_string_lossy().into_owned();
        if name.starts_with("point_") && name.ends_with(".csv") {
            remove_if_exists(&e.path())?;
        }
    }
    Ok(())
}

pub fn frontier(cfg: &RunConfig) -> Result<(), Failure> {
    let (m, _) = load_moments(cfg)?;
    let spec = cfg.spec;
    let warnings = assembly_warnings(&m, &spec)?;
    let targets = match &cfg.targets {
        Some(t) => t.clone(),
        None => portfolio::default_targets(&m, &spec, cfg.points, &cfg.solver).map_err(portfolio_failure)?,
    };
    ensure_dir(&cfg.output_dir)?;
    let csv_path = cfg.output_dir.join("frontier.csv");
    let json_path = cfg.output_dir.join("frontier.json");
    let weights_dir = cfg.output_dir.join("frontier_weights");
    clear_weight_files(&weights_dir)?;
    let curve = match portfolio::frontier(&m, &spec, &targets, &cfg.solver) {
        Ok(c) => c,
        Err(e) => {
            remove_if_exists(&csv_path)?;
            if let PortfolioError::EmptyFrontier { max_achievable_return } = &e {
                let r = FrontierReport {
                    status: "empty_frontier",
                    units: UNITS,
                    targets,
                    points: Vec::new(),
                    skipped: Vec::new(),
                    max_achievable_return: *max_achievable_return,
                    warnings,
                    spec,
                };
                report(&json_path, &r, cfg)?;
            }
            return Err(portfolio_failure(e));
        }
    };
    ensure_dir(&weights_dir)?;
    let mut csv = String::from("target,achieved_return,volatility\n");
    let mut points = Vec::with_capacity(curve.points.len());
    for (i, p) in curve.points.iter().enumerate() {
        let _ = writeln!(
            csv,
            "{},{},{}",
            fmt_sig(p.target),
            fmt_sig(p.achieved_return),
            fmt_sig(p.volatility)
        );
        let name = format!("point_{i:03}.csv");
        write_file(&weights_dir.join(&name), &weights_csv(&p.allocation))?;
        points.push(FrontierPointReport {
            target: p.target,
            achieved_return: p.achieved_return,
            volatility: p.volatility,
            status: p.allocation.solution_meta.status,
            iterations: p.allocation.solution_meta.iterations,
            kkt: p.allocation.solution_meta.kkt,
            weights_file: format!("frontier_weights/{name}"),
        });
    }
    write_file(&csv_path, &csv)?;
    for s in &curve.skipped {
        eprintln!("warning: target {} skipped ({:?})", fmt_sig(s.target), s.status);
    }
    let r = FrontierReport {
        status: "ok",
        units: UNITS,
        targets,
        points,
        skipped: curve
            .skipped
            .iter()
            .map(|s| SkippedReport {
                target: s.target,
                status: s.status,
                max_achievable_return: s.max_achievable_return,
            })
            .collect(),
        max_achievable_return: None,
        warnings,
        spec,
    };
    report(&json_path, &r, cfg)?;
    println!(
        "frontier: {} of {} targets feasible, written to {}",
        curve.points.len(),
        r.targets.len(),
        csv_path.display()
    );
    Ok(())
}
