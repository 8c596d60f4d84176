//! Input formats: the pipe-delimited exchange symbol directory, per-ticker
//! OHLCV history CSVs, and the templated locator that says where each
//! ticker's history lives.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Duration;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::fmt_sig;
use crate::scalar::Scalar;

/// Header written by [`write_symbol_directory`].
pub const SYMBOL_DIRECTORY_HEADER: &str =
    "Symbol|Security Name|Market Category|Test Issue|Financial Status|Round Lot Size";

/// Header written by [`write_ohlcv_csv`].
pub const OHLCV_HEADER: &str = "Date,Open,High,Low,Close,Volume,Adj Close";

const DATE_FORMAT: &str = "%Y-%m-%d";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("input file is empty")]
    EmptyFile,
    #[error("input is not valid UTF-8")]
    Encoding,
    #[error("no parseable rows in series")]
    EmptySeries,
    #[error("header is missing required column(s): {0}")]
    SchemaError(String),
    #[error("template error: {0}")]
    TemplateError(String),
    #[error("all {} sources failed", .0.entries.len())]
    AllSourcesFailed(FetchReport),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One listing from the symbol directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolRecord {
    pub symbol: String,
    pub security_name: String,
    pub market_category: String,
    pub test_issue: String,
    pub financial_status: String,
    pub round_lot: String,
}

impl SymbolRecord {
    pub fn is_test_issue(&self) -> bool {
        self.test_issue.eq_ignore_ascii_case("Y")
    }
}

/// Parsed directory together with the lines that could not be used.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SymbolDirectory {
    pub records: Vec<SymbolRecord>,
    /// 1-based line numbers of data lines rejected as malformed.
    pub malformed_lines: Vec<usize>,
    pub footer_skipped: bool,
}

impl SymbolDirectory {
    pub fn record_count(&self) -> usize {
        self.records.len()
    }

    pub fn malformed_count(&self) -> usize {
        self.malformed_lines.len()
    }
}

/// Parses a `|`-delimited symbol directory. The first line is a header;
/// short lines leave their trailing fields empty and extra trailing fields
/// are ignored.
pub fn parse_symbol_directory(raw: &[u8]) -> Result<SymbolDirectory, IngestError> {
    let text = std::str::from_utf8(raw).map_err(|_| IngestError::Encoding)?;
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    if text.trim().is_empty() {
        return Err(IngestError::EmptyFile);
    }
    let mut records = Vec::new();
    let mut malformed_lines = Vec::new();
    let mut footer_skipped = false;
    for (idx, line) in text.lines().enumerate().skip(1) {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('|').collect();
        if fields.len() < 2 || line.starts_with("File Creation Time") {
            footer_skipped = true;
            continue;
        }
        let symbol = fields[0].trim();
        if symbol.is_empty() || symbol.contains(char::is_whitespace) {
            malformed_lines.push(idx + 1);
            continue;
        }
        let field = |i: usize| fields.get(i).map(|f| f.trim().to_string()).unwrap_or_default();
        records.push(SymbolRecord {
            symbol: symbol.to_string(),
            security_name: field(1),
            market_category: field(2),
            test_issue: field(3),
            financial_status: field(4),
            round_lot: field(5),
        });
    }
    Ok(SymbolDirectory {
        records,
        malformed_lines,
        footer_skipped,
    })
}

/// Drops test listings (`Test Issue = Y`).
pub fn filter_test_issues(records: &[SymbolRecord]) -> Vec<SymbolRecord> {
    records.iter().filter(|r| !r.is_test_issue()).cloned().collect()
}

pub fn write_symbol_directory(records: &[SymbolRecord]) -> String {
    let mut out = String::from(SYMBOL_DIRECTORY_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{}|{}|{}|{}|{}|{}",
            r.symbol, r.security_name, r.market_category, r.test_issue, r.financial_status, r.round_lot
        );
    }
    out
}

/// One daily bar. Only `date` and `close` are required; the other fields
/// are kept when they parse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar", deserialize = "T: Scalar"))]
pub struct OhlcvRow<T> {
    pub date: NaiveDate,
    pub open: Option<T>,
    pub high: Option<T>,
    pub low: Option<T>,
    pub close: T,
    pub volume: Option<u64>,
    pub adj_close: Option<T>,
}

impl<T: Scalar> OhlcvRow<T> {
    /// A row carrying only a date and close.
    pub fn from_close(date: NaiveDate, close: T) -> Self {
        Self {
            date,
            open: None,
            high: None,
            low: None,
            close,
            volume: None,
            adj_close: None,
        }
    }

    /// Describes a high/low range that does not bracket open and close.
    pub fn range_violation(&self) -> Option<String> {
        let (open, high, low) = (self.open?, self.high?, self.low?);
        let close = self.close;
        if low > open.min(close) || high < open.max(close) {
            Some(format!(
                "{}: range [{low}, {high}] does not contain open {open} / close {close}",
                self.date
            ))
        } else {
            None
        }
    }
}

/// Parsed OHLCV series with its drop accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct OhlcvSeries<T> {
    pub rows: Vec<OhlcvRow<T>>,
    /// Data lines seen after the header.
    pub data_lines: usize,
    pub dropped: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Default)]
struct ColumnMap {
    date: Option<usize>,
    open: Option<usize>,
    high: Option<usize>,
    low: Option<usize>,
    close: Option<usize>,
    volume: Option<usize>,
    adj_close: Option<usize>,
}

impl ColumnMap {
    fn from_header(header: &csv::StringRecord) -> Result<Self, IngestError> {
        let mut map = ColumnMap::default();
        for (i, name) in header.iter().enumerate() {
            let key: String = name
                .trim_start_matches('\u{feff}')
                .chars()
                .filter(|c| !c.is_whitespace() && *c != '_')
                .collect::<String>()
                .to_ascii_lowercase();
            let slot = match key.as_str() {
                "date" => &mut map.date,
                "open" => &mut map.open,
                "high" => &mut map.high,
                "low" => &mut map.low,
                "close" => &mut map.close,
                "volume" => &mut map.volume,
                "adjclose" => &mut map.adj_close,
                _ => continue,
            };
            slot.get_or_insert(i);
        }
        let mut missing = Vec::new();
        if map.date.is_none() {
            missing.push("Date");
        }
        if map.close.is_none() {
            missing.push("Close");
        }
        if !missing.is_empty() {
            return Err(IngestError::SchemaError(missing.join(", ")));
        }
        Ok(map)
    }
}

fn parse_num<T: Scalar>(s: Option<&str>) -> Option<T> {
    let v: f64 = s?.trim().parse().ok()?;
    if v.is_finite() {
        Some(T::lit(v))
    } else {
        None
    }
}

fn parse_volume(s: Option<&str>) -> Option<u64> {
    let s = s?.trim();
    if let Ok(v) = s.parse::<u64>() {
        return Some(v);
    }
    let v: f64 = s.parse().ok()?;
    (v.is_finite() && v >= 0.0).then(|| v.round() as u64)
}

/// Parses an OHLCV CSV. Columns are located by header name, so the
/// `Date,Open,High,Low,Close,Volume,Adj Close` order is conventional rather
/// than required. Rows keep file order.
pub fn parse_ohlcv_csv<T: Scalar>(raw: &[u8]) -> Result<OhlcvSeries<T>, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(raw);
    let header = reader.headers()?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(IngestError::EmptySeries);
    }
    let cols = ColumnMap::from_header(&header)?;
    let mut rows = Vec::new();
    let mut data_lines = 0;
    let mut dropped = 0;
    let mut warnings = Vec::new();
    for record in reader.records() {
        let record = record?;
        data_lines += 1;
        let get = |c: Option<usize>| c.and_then(|i| record.get(i));
        let date = get(cols.date).and_then(|d| NaiveDate::parse_from_str(d, DATE_FORMAT).ok());
        let close = parse_num::<T>(get(cols.close)).filter(|c| *c >= T::zero());
        let (Some(date), Some(close)) = (date, close) else {
            dropped += 1;
            continue;
        };
        let row = OhlcvRow {
            date,
            open: parse_num(get(cols.open)),
            high: parse_num(get(cols.high)),
            low: parse_num(get(cols.low)),
            close,
            volume: parse_volume(get(cols.volume)),
            adj_close: parse_num(get(cols.adj_close)),
        };
        if let Some(w) = row.range_violation() {
            warnings.push(w);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(IngestError::EmptySeries);
    }
    Ok(OhlcvSeries {
        rows,
        data_lines,
        dropped,
        warnings,
    })
}

pub fn write_ohlcv_csv<T: Scalar>(rows: &[OhlcvRow<T>]) -> String {
    let opt = |v: Option<T>| v.map(|x| fmt_sig(x.to_f64_lossy())).unwrap_or_default();
    let mut out = String::from(OHLCV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.date.format(DATE_FORMAT),
            opt(r.open),
            opt(r.high),
            opt(r.low),
            fmt_sig(r.close.to_f64_lossy()),
            r.volume.map(|v| v.to_string()).unwrap_or_default(),
            opt(r.adj_close),
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceMode {
    LocalFixture,
    Http,
}

impl std::str::FromStr for SourceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "local" | "local-fixture" | "fixture" => Ok(Self::LocalFixture),
            "http" => Ok(Self::Http),
            other => Err(format!("unknown source mode '{other}' (expected local|http)")),
        }
    }
}

/// Locator template. Recognized placeholders: `{symbol}`, `{day}`,
/// `{month}`, `{year}` for the as-of date and `{start_day}`,
/// `{start_month}`, `{start_year}` for the optional series start.
///
/// Months are zero-based (January = 0), the convention of the historical
/// quote URLs this template format was modelled on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceTemplate {
    pub template: String,
    pub mode: SourceMode,
    #[serde(default)]
    pub start: Option<NaiveDate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Placeholder {
    Symbol,
    Day,
    Month,
    Year,
    StartDay,
    StartMonth,
    StartYear,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece<'a> {
    Literal(&'a str),
    Hole(Placeholder),
}

fn tokenize(template: &str) -> Result<Vec<Piece<'_>>, IngestError> {
    let mut pieces = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        if open > 0 {
            pieces.push(Piece::Literal(&rest[..open]));
        }
        let after = &rest[open + 1..];
        let close = after
            .find('}')
            .ok_or_else(|| IngestError::TemplateError(format!("unclosed '{{' in '{template}'")))?;
        let name = &after[..close];
        let hole = match name {
            "symbol" => Placeholder::Symbol,
            "day" => Placeholder::Day,
            "month" => Placeholder::Month,
            "year" => Placeholder::Year,
            "start_day" => Placeholder::StartDay,
            "start_month" => Placeholder::StartMonth,
            "start_year" => Placeholder::StartYear,
            other => {
                return Err(IngestError::TemplateError(format!(
                    "unknown placeholder '{{{other}}}'"
                )))
            }
        };
        pieces.push(Piece::Hole(hole));
        rest = &after[close + 1..];
    }
    if !rest.is_empty() {
        pieces.push(Piece::Literal(rest));
    }
    if !pieces.contains(&Piece::Hole(Placeholder::Symbol)) {
        return Err(IngestError::TemplateError(format!(
            "template '{template}' has no {{symbol}} placeholder"
        )));
    }
    Ok(pieces)
}

impl SourceTemplate {
    pub fn new(template: impl Into<String>, mode: SourceMode) -> Result<Self, IngestError> {
        let t = Self {
            template: template.into(),
            mode,
            start: None,
        };
        tokenize(&t.template)?;
        Ok(t)
    }

    pub fn with_start(mut self, start: NaiveDate) -> Self {
        self.start = Some(start);
        self
    }
}

/// Substitutes every placeholder of `t` for `symbol` as of `as_of`.
pub fn resolve_source(t: &SourceTemplate, symbol: &str, as_of: NaiveDate) -> Result<String, IngestError> {
    if symbol.trim().is_empty() {
        return Err(IngestError::TemplateError("empty symbol".into()));
    }
    let start = || {
        t.start.ok_or_else(|| {
            IngestError::TemplateError("template uses a start placeholder but no start date is set".into())
        })
    };
    let mut out = String::with_capacity(t.template.len() + symbol.len());
    for piece in tokenize(&t.template)? {
        match piece {
            Piece::Literal(s) => out.push_str(s),
            Piece::Hole(Placeholder::Symbol) => out.push_str(symbol.trim()),
            Piece::Hole(Placeholder::Day) => write!(out, "{}", as_of.day()).unwrap(),
            Piece::Hole(Placeholder::Month) => write!(out, "{}", as_of.month0()).unwrap(),
            Piece::Hole(Placeholder::Year) => write!(out, "{}", as_of.year()).unwrap(),
            Piece::Hole(Placeholder::StartDay) => write!(out, "{}", start()?.day()).unwrap(),
            Piece::Hole(Placeholder::StartMonth) => write!(out, "{}", start()?.month0()).unwrap(),
            Piece::Hole(Placeholder::StartYear) => write!(out, "{}", start()?.year()).unwrap(),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FetchOptions {
    pub as_of: NaiveDate,
    pub timeout: Duration,
    pub retries: u32,
    pub max_parallel: usize,
}

impl FetchOptions {
    pub fn new(as_of: NaiveDate) -> Self {
        Self {
            as_of,
            timeout: Duration::from_millis(10_000),
            retries: 2,
            max_parallel: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum FetchOutcome {
    Fetched {
        rows: usize,
        dropped: usize,
        warnings: usize,
    },
    Skipped {
        reason: String,
    },
    Failed {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FetchEntry {
    pub symbol: String,
    pub locator: String,
    #[serde(flatten)]
    pub outcome: FetchOutcome,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FetchReport {
    pub entries: Vec<FetchEntry>,
}

impl FetchReport {
    pub fn fetched(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| matches!(e.outcome, FetchOutcome::Fetched { .. }))
            .count()
    }

    pub fn not_fetched(&self) -> impl Iterator<Item = &FetchEntry> {
        self.entries
            .iter()
            .filter(|e| !matches!(e.outcome, FetchOutcome::Fetched { .. }))
    }
}

#[derive(Debug, Clone)]
pub struct FetchResult<T> {
    pub series: BTreeMap<String, Vec<OhlcvRow<T>>>,
    pub report: FetchReport,
}

enum Retrieved {
    Bytes(Vec<u8>),
    Skip(String),
    Fail(String),
}

fn retrieve(locator: &str, mode: SourceMode, opts: &FetchOptions, agent: Option<&ureq::Agent>) -> Retrieved {
    match mode {
        SourceMode::LocalFixture => {
            let path = Path::new(locator);
            if !path.is_file() {
                return Retrieved::Skip(format!("missing file {locator}"));
            }
            match std::fs::read(path) {
                Ok(b) => Retrieved::Bytes(b),
                Err(e) => Retrieved::Fail(e.to_string()),
            }
        }
        SourceMode::Http => {
            let agent = agent.expect("http agent");
            let mut last = String::new();
            for _ in 0..=opts.retries {
                match agent.get(locator).call() {
                    Ok(mut resp) => match resp.body_mut().read_to_vec() {
                        Ok(b) => return Retrieved::Bytes(b),
                        Err(e) => last = e.to_string(),
                    },
                    Err(e) => last = e.to_string(),
                }
            }
            Retrieved::Fail(last)
        }
    }
}

/// Fetches and parses the history of every symbol. Workers split the symbol
/// list up front and results are merged in input order afterwards.
pub fn fetch_all<T: Scalar>(
    symbols: &[String],
    template: &SourceTemplate,
    opts: &FetchOptions,
) -> Result<FetchResult<T>, IngestError> {
    // Template problems are reported once, up front.
    tokenize(&template.template)?;
    if symbols.is_empty() {
        return Ok(FetchResult {
            series: BTreeMap::new(),
            report: FetchReport::default(),
        });
    }
    let agent: Option<ureq::Agent> = (template.mode == SourceMode::Http).then(|| {
        ureq::Agent::config_builder()
            .timeout_global(Some(opts.timeout))
            .http_status_as_error(true)
            .build()
            .into()
    });
    let workers = opts.max_parallel.clamp(1, symbols.len());
    let fetch_one = |symbol: &String| -> (FetchEntry, Option<Vec<OhlcvRow<T>>>) {
        let locator = match resolve_source(template, symbol, opts.as_of) {
            Ok(l) => l,
            Err(e) => {
                let outcome = FetchOutcome::Failed { reason: e.to_string() };
                return (entry(symbol, String::new(), outcome), None);
            }
        };
        match retrieve(&locator, template.mode, opts, agent.as_ref()) {
            Retrieved::Skip(reason) => (entry(symbol, locator, FetchOutcome::Skipped { reason }), None),
            Retrieved::Fail(reason) => (entry(symbol, locator, FetchOutcome::Failed { reason }), None),
            Retrieved::Bytes(bytes) => match parse_ohlcv_csv::<T>(&bytes) {
                Ok(series) => {
                    let outcome = FetchOutcome::Fetched {
                        rows: series.rows.len(),
                        dropped: series.dropped,
                        warnings: series.warnings.len(),
                    };
                    (entry(symbol, locator, outcome), Some(series.rows))
                }
                Err(e) => {
                    let reason = match e {
                        IngestError::EmptySeries => "EmptySeries".to_string(),
                        other => other.to_string(),
                    };
                    (entry(symbol, locator, FetchOutcome::Failed { reason }), None)
                }
            },
        }
    };

    let mut results: Vec<(usize, FetchEntry, Option<Vec<OhlcvRow<T>>>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let fetch_one = &fetch_one;
                scope.spawn(move || {
                    symbols
                        .iter()
                        .enumerate()
                        .skip(w)
                        .step_by(workers)
                        .map(|(i, s)| {
                            let (e, rows) = fetch_one(s);
                            (i, e, rows)
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("fetch worker panicked"))
            .collect()
    });
    results.sort_by_key(|(i, _, _)| *i);

    let mut series = BTreeMap::new();
    let mut report = FetchReport::default();
    for (_, e, rows) in results {
        if let Some(rows) = rows {
            series.insert(e.symbol.clone(), rows);
        }
        report.entries.push(e);
    }
    if series.is_empty() {
        return Err(IngestError::AllSourcesFailed(report));
    }
    Ok(FetchResult { series, report })
}

fn entry(symbol: &str, locator: String, outcome: FetchOutcome) -> FetchEntry {
    FetchEntry {
        symbol: symbol.to_string(),
        locator,
        outcome,
    }
}
