//! Date-aligned price panel: one column per symbol, one row per date.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::fmt_sig;
use crate::ingest::OhlcvRow;
use crate::scalar::Scalar;

/// Default observation threshold of [`filter_min_obs`].
pub const DEFAULT_MIN_OBS: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PanelError {
    #[error("panel is empty")]
    EmptyPanel,
    #[error("non-positive price for {symbol} on {date}; log returns undefined")]
    DomainError { symbol: String, date: NaiveDate },
    #[error("need at least 2 dates, panel has {0}")]
    InsufficientData(usize),
    #[error("panel has missing cells; run complete_cases first")]
    MissingCells,
    #[error("operation needs a price panel, got {0:?}")]
    NotPrices(ValueKind),
    #[error("invalid panel: {0}")]
    Invalid(String),
    #[error("panel csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Price,
    SimpleReturn,
    LogReturn,
}

impl FromStr for ValueKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "price" => Ok(Self::Price),
            "simple" | "simple_return" => Ok(Self::SimpleReturn),
            "log" | "log_return" => Ok(Self::LogReturn),
            other => Err(format!("unknown value kind '{other}' (expected price|simple|log)")),
        }
    }
}

/// Which OHLCV price becomes the panel value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriceField {
    #[default]
    Close,
    AdjClose,
}

impl FromStr for PriceField {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace(['_', '-', ' '], "").as_str() {
            "close" => Ok(Self::Close),
            "adjclose" => Ok(Self::AdjClose),
            other => Err(format!("unknown price field '{other}' (expected close|adjclose)")),
        }
    }
}

/// Immutable dates × symbols matrix with possibly missing cells.
#[derive(Debug, Clone, PartialEq)]
pub struct PricePanel<T> {
    dates: Vec<NaiveDate>,
    symbols: Vec<String>,
    values: Vec<Option<T>>,
    kind: ValueKind,
}

impl<T: Scalar> PricePanel<T> {
    /// `values` is row-major: all symbols of the first date, then the next date.
    pub fn new(
        dates: Vec<NaiveDate>,
        symbols: Vec<String>,
        values: Vec<Option<T>>,
        kind: ValueKind,
    ) -> Result<Self, PanelError> {
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PanelError::Invalid("dates must be strictly increasing".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = symbols.iter().find(|s| !seen.insert(s.as_str())) {
            return Err(PanelError::Invalid(format!("duplicate symbol {dup}")));
        }
        if values.len() != dates.len() * symbols.len() {
            return Err(PanelError::Invalid(format!(
                "{} values for a {}x{} panel",
                values.len(),
                dates.len(),
                symbols.len()
            )));
        }
        Ok(Self {
            dates,
            symbols,
            values,
            kind,
        })
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn kind(&self) -> ValueKind {
        self.kind
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn n_symbols(&self) -> usize {
        self.symbols.len()
    }

    pub fn get(&self, date_idx: usize, symbol_idx: usize) -> Option<T> {
        self.values[date_idx * self.symbols.len() + symbol_idx]
    }

    pub fn row(&self, date_idx: usize) -> &[Option<T>] {
        let n = self.symbols.len();
        &self.values[date_idx * n..(date_idx + 1) * n]
    }

    pub fn column(&self, symbol_idx: usize) -> impl Iterator<Item = Option<T>> + '_ {
        (0..self.dates.len()).map(move |d| self.get(d, symbol_idx))
    }

    pub fn obs_count(&self, symbol_idx: usize) -> usize {
        self.column(symbol_idx).filter(Option::is_some).count()
    }

    pub fn missing_cells(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    pub fn has_missing(&self) -> bool {
        self.values.iter().any(Option::is_none)
    }

    /// Complete panel as row vectors; `None` when any cell is missing.
    pub fn dense_rows(&self) -> Option<Vec<Vec<T>>> {
        (0..self.dates.len())
            .map(|d| self.row(d).iter().copied().collect::<Option<Vec<T>>>())
            .collect()
    }
}

/// Panel plus the number of within-series duplicate dates that were dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelBuild<T> {
    pub panel: PricePanel<T>,
    pub duplicate_dates: usize,
}

/// Merges per-symbol series by date using each row's close.
pub fn build_panel<T: Scalar>(series: &BTreeMap<String, Vec<OhlcvRow<T>>>) -> Result<PanelBuild<T>, PanelError> {
    build_panel_with(series, PriceField::Close)
}

/// Merges per-symbol series by date. Within one series a repeated date keeps
/// its last occurrence.
pub fn build_panel_with<T: Scalar>(
    series: &BTreeMap<String, Vec<OhlcvRow<T>>>,
    field: PriceField,
) -> Result<PanelBuild<T>, PanelError> {
    if series.is_empty() {
        return Err(PanelError::EmptyPanel);
    }
    let mut duplicate_dates = 0;
    let mut by_symbol: Vec<(String, BTreeMap<NaiveDate, Option<T>>)> = Vec::with_capacity(series.len());
    let mut all_dates = BTreeSet::new();
    for (symbol, rows) in series {
        let mut m = BTreeMap::new();
        for r in rows {
            let v = match field {
                PriceField::Close => Some(r.close),
                PriceField::AdjClose => r.adj_close,
            };
            if m.insert(r.date, v).is_some() {
                duplicate_dates += 1;
            }
            all_dates.insert(r.date);
        }
        by_symbol.push((symbol.clone(), m));
    }
    let dates: Vec<NaiveDate> = all_dates.into_iter().collect();
    let mut values = Vec::with_capacity(dates.len() * by_symbol.len());
    for d in &dates {
        for (_, m) in &by_symbol {
            values.push(m.get(d).copied().flatten());
        }
    }
    let symbols = by_symbol.into_iter().map(|(s, _)| s).collect();
    Ok(PanelBuild {
        panel: PricePanel::new(dates, symbols, values, ValueKind::Price)?,
        duplicate_dates,
    })
}

fn select_symbols<T: Scalar>(p: &PricePanel<T>, keep: &[usize]) -> PricePanel<T> {
    let mut values = Vec::with_capacity(p.n_dates() * keep.len());
    for d in 0..p.n_dates() {
        values.extend(keep.iter().map(|&s| p.get(d, s)));
    }
    PricePanel {
        dates: p.dates.clone(),
        symbols: keep.iter().map(|&s| p.symbols[s].clone()).collect(),
        values,
        kind: p.kind,
    }
}

/// Keeps symbols with strictly more than `min_obs` observations.
pub fn filter_min_obs<T: Scalar>(p: &PricePanel<T>, min_obs: usize) -> Result<PricePanel<T>, PanelError> {
    let keep: Vec<usize> = (0..p.n_symbols()).filter(|&s| p.obs_count(s) > min_obs).collect();
    if keep.is_empty() {
        return Err(PanelError::EmptyPanel);
    }
    Ok(select_symbols(p, &keep))
}

/// Listwise deletion: keeps only dates where every symbol has a value.
pub fn complete_cases<T: Scalar>(p: &PricePanel<T>) -> Result<PricePanel<T>, PanelError> {
    let keep: Vec<usize> = (0..p.n_dates()).filter(|&d| p.row(d).iter().all(Option::is_some)).collect();
    if keep.is_empty() || p.n_symbols() == 0 {
        return Err(PanelError::EmptyPanel);
    }
    let mut values = Vec::with_capacity(keep.len() * p.n_symbols());
    for &d in &keep {
        values.extend_from_slice(p.row(d));
    }
    Ok(PricePanel {
        dates: keep.iter().map(|&d| p.dates[d]).collect(),
        symbols: p.symbols.clone(),
        values,
        kind: p.kind,
    })
}

/// Period-over-period returns; the first date is consumed.
pub fn to_returns<T: Scalar>(p: &PricePanel<T>, kind: ValueKind) -> Result<PricePanel<T>, PanelError> {
    if p.kind != ValueKind::Price {
        return Err(PanelError::NotPrices(p.kind));
    }
    if kind == ValueKind::Price {
        return Ok(p.clone());
    }
    if p.has_missing() {
        return Err(PanelError::MissingCells);
    }
    if p.n_dates() < 2 {
        return Err(PanelError::InsufficientData(p.n_dates()));
    }
    let n = p.n_symbols();
    let mut values = Vec::with_capacity((p.n_dates() - 1) * n);
    for d in 1..p.n_dates() {
        for s in 0..n {
            let prev = p.get(d - 1, s).expect("complete panel");
            let cur = p.get(d, s).expect("complete panel");
            let r = match kind {
                ValueKind::SimpleReturn => cur / prev - T::one(),
                ValueKind::LogReturn => {
                    for (date, v) in [(p.dates[d - 1], prev), (p.dates[d], cur)] {
                        if v <= T::zero() {
                            return Err(PanelError::DomainError {
                                symbol: p.symbols[s].clone(),
                                date,
                            });
                        }
                    }
                    (cur / prev).ln()
                }
                ValueKind::Price => unreachable!(),
            };
            values.push(Some(r));
        }
    }
    Ok(PricePanel {
        dates: p.dates[1..].to_vec(),
        symbols: p.symbols.clone(),
        values,
        kind,
    })
}

/// `Date,<symbol>...` CSV; missing cells are empty.
pub fn write_panel_csv<T: Scalar>(p: &PricePanel<T>) -> String {
    let mut out = String::from("Date");
    for s in &p.symbols {
        out.push(',');
        out.push_str(s);
    }
    out.push('\n');
    for d in 0..p.n_dates() {
        let _ = write!(out, "{}", p.dates[d].format("%Y-%m-%d"));
        for v in p.row(d) {
            out.push(',');
            if let Some(v) = v {
                out.push_str(&fmt_sig(v.to_f64_lossy()));
            }
        }
        out.push('\n');
    }
    out
}

pub fn read_panel_csv<T: Scalar>(raw: &[u8], kind: ValueKind) -> Result<PricePanel<T>, PanelError> {
    let csv_err = |e: csv::Error| PanelError::Csv(e.to_string());
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(raw);
    let header = reader.headers().map_err(csv_err)?.clone();
    if header.is_empty() || !header[0].trim_start_matches('\u{feff}').eq_ignore_ascii_case("date") {
        return Err(PanelError::Csv("first column must be Date".into()));
    }
    let symbols: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut dates = Vec::new();
    let mut values = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let date = NaiveDate::parse_from_str(&record[0], "%Y-%m-%d")
            .map_err(|e| PanelError::Csv(format!("row {}: bad date '{}': {e}", line + 2, &record[0])))?;
        dates.push(date);
        for cell in record.iter().skip(1) {
            if cell.is_empty() {
                values.push(None);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| PanelError::Csv(format!("row {}: bad number '{cell}'", line + 2)))?;
                values.push(Some(T::lit(v)));
            }
        }
    }
    PricePanel::new(dates, symbols, values, kind)
}
