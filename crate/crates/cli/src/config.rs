//! Run configuration: a flat `key = value` file overlaid by command-line
//! flags. Keys match the long flag names with `-` or `_` accepted.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use markowitz::ingest::SourceMode;
use markowitz::panel::{PriceField, ValueKind, DEFAULT_MIN_OBS};
use markowitz::portfolio::{BudgetSemantics, PositionMode, ProblemSpec, DEFAULT_FRONTIER_POINTS};
use markowitz::SolveOptions64;

/// Every key a config file or flag may set.
pub const KEYS: &[&str] = &[
    "output_dir",
    "cache_dir",
    "panel_file",
    "moments_file",
    "symbols_file",
    "source_template",
    "mode",
    "timeout_ms",
    "max_parallel",
    "retries",
    "start",
    "as_of",
    "include_test_issues",
    "min_obs",
    "value_kind",
    "field",
    "budget",
    "target_return",
    "position",
    "limit_constraint",
    "kappa",
    "budget_semantics",
    "box",
    "tol",
    "max_iter",
    "targets",
    "points",
    "no_timestamp",
];

/// Keys holding filesystem paths; relative values in a config file are
/// taken relative to that file.
const PATH_KEYS: &[&str] = &["output_dir", "cache_dir", "panel_file", "moments_file", "symbols_file"];

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

pub fn normalize_key(k: &str) -> String {
    k.trim().to_ascii_lowercase().replace('-', "_")
}

/// Parses `key = value` lines. Blank lines and lines starting with `#` are
/// ignored; unknown or repeated keys are errors.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return err(format!("config line {}: expected key = value, got '{line}'", i + 1));
        };
        let key = normalize_key(k);
        if !KEYS.contains(&key.as_str()) {
            return err(format!("config line {}: unknown key '{}'", i + 1, k.trim()));
        }
        let value = v.trim().trim_matches('"').to_string();
        if out.insert(key.clone(), value).is_some() {
            return err(format!("config line {}: duplicate key '{key}'", i + 1));
        }
    }
    Ok(out)
}

/// Reads a config file, rebasing relative paths onto its directory.
pub fn load_config_file(path: &Path) -> Result<BTreeMap<String, String>, ConfigError> {
    let text = std::fs::read_to_string(path)
        .or_else(|e| err(format!("cannot read config {}: {e}", path.display())))?;
    let mut map = parse_config(&text)?;
    let base = path.parent().unwrap_or(Path::new(""));
    for key in PATH_KEYS {
        if let Some(v) = map.get_mut(*key) {
            if Path::new(v.as_str()).is_relative() {
                *v = base.join(v.as_str()).to_string_lossy().into_owned();
            }
        }
    }
    if map.get("mode").is_none_or(|m| m == "local") {
        if let Some(t) = map.get_mut("source_template") {
            if Path::new(t.as_str()).is_relative() {
                *t = base.join(t.as_str()).to_string_lossy().into_owned();
            }
        }
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub panel_file: Option<PathBuf>,
    pub moments_file: Option<PathBuf>,
    pub symbols_file: Option<PathBuf>,
    pub source_template: Option<String>,
    pub mode: SourceMode,
    pub timeout_ms: u64,
    pub max_parallel: usize,
    pub retries: u32,
    pub start: Option<NaiveDate>,
    pub as_of: Option<NaiveDate>,
    pub include_test_issues: bool,
    pub min_obs: usize,
    pub value_kind: ValueKind,
    pub value_kind_given: bool,
    pub field: PriceField,
    pub spec: ProblemSpec<f64>,
    /// Set when the target came from a file or flag rather than the default.
    pub target_given: bool,
    pub solver: SolveOptions64,
    pub targets: Option<Vec<f64>>,
    pub points: usize,
    pub no_timestamp: bool,
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.trim()
        .parse::<T>()
        .or_else(|e| err(format!("invalid value for {key}: '{v}' ({e})")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => err(format!("invalid value for {key}: '{v}' (expected true|false)")),
    }
}

fn parse_date(key: &str, v: &str) -> Result<NaiveDate, ConfigError> {
    NaiveDate::parse_from_str(v.trim(), "%Y-%m-%d").or_else(|e| err(format!("invalid date for {key}: '{v}' ({e})")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64, ConfigError> {
    let x: f64 = parse(key, v)?;
    if !x.is_finite() {
        return err(format!("{key} must be finite, got '{v}'"));
    }
    Ok(x)
}

impl RunConfig {
    /// Builds a config from already-merged key/value pairs.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self, ConfigError> {
        for k in map.keys() {
            if !KEYS.contains(&k.as_str()) {
                return err(format!("unknown key '{k}'"));
            }
        }
        let get = |k: &str| map.get(k).map(String::as_str);
        let output_dir = PathBuf::from(get("output_dir").unwrap_or("markowitz-out"));
        let cache_dir = get("cache_dir").map(PathBuf::from).unwrap_or_else(|| output_dir.join("cache"));
        let defaults = ProblemSpec::<f64>::default();
        let spec = ProblemSpec {
            budget: get("budget").map(|v| parse_f64("budget", v)).transpose()?.unwrap_or(defaults.budget),
            target_return: get("target_return")
                .map(|v| parse_f64("target_return", v))
                .transpose()?
                .unwrap_or(defaults.target_return),
            position_mode: get("position")
                .map(|v| parse::<PositionMode>("position", v))
                .transpose()?
                .unwrap_or_default(),
            limit_constraint: get("limit_constraint")
                .map(|v| parse_bool("limit_constraint", v))
                .transpose()?
                .unwrap_or(false),
            kappa: get("kappa").map(|v| parse_f64("kappa", v)).transpose()?.unwrap_or(defaults.kappa),
            budget_semantics: get("budget_semantics")
                .map(|v| parse::<BudgetSemantics>("budget_semantics", v))
                .transpose()?
                .unwrap_or_default(),
            box_limit: get("box").map(|v| parse_f64("box", v)).transpose()?,
        };
        spec.validate().or_else(|e| err(e.to_string()))?;
        let mut solver = SolveOptions64::default();
        if let Some(v) = get("tol") {
            solver.tol = parse_f64("tol", v)?;
        }
        if let Some(v) = get("max_iter") {
            solver.max_iter = parse("max_iter", v)?;
        }
        solver.validate().or_else(|e| err(e.to_string()))?;
        let targets = get("targets")
            .map(|v| {
                v.split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse_f64("targets", s))
                    .collect::<Result<Vec<_>, _>>()
            })
            .transpose()?;
        if let Some(t) = &targets {
            if t.is_empty() {
                return err("targets must list at least one value");
            }
            if t.windows(2).any(|w| w[0] > w[1]) {
                return err("targets must be sorted ascending");
            }
        }
        let points = get("points").map(|v| parse("points", v)).transpose()?.unwrap_or(DEFAULT_FRONTIER_POINTS);
        if points == 0 {
            return err("points must be at least 1");
        }
        let max_parallel = get("max_parallel").map(|v| parse("max_parallel", v)).transpose()?.unwrap_or(4);
        if max_parallel == 0 {
            return err("max_parallel must be at least 1");
        }
        Ok(Self {
            output_dir,
            cache_dir,
            panel_file: get("panel_file").map(PathBuf::from),
            moments_file: get("moments_file").map(PathBuf::from),
            symbols_file: get("symbols_file").map(PathBuf::from),
            source_template: get("source_template").map(str::to_string),
            mode: get("mode").map(|v| parse::<SourceMode>("mode", v)).transpose()?.unwrap_or(SourceMode::LocalFixture),
            timeout_ms: get("timeout_ms").map(|v| parse("timeout_ms", v)).transpose()?.unwrap_or(10_000),
            max_parallel,
            retries: get("retries").map(|v| parse("retries", v)).transpose()?.unwrap_or(2),
            start: get("start").map(|v| parse_date("start", v)).transpose()?,
            as_of: get("as_of").map(|v| parse_date("as_of", v)).transpose()?,
            include_test_issues: get("include_test_issues")
                .map(|v| parse_bool("include_test_issues", v))
                .transpose()?
                .unwrap_or(false),
            min_obs: get("min_obs").map(|v| parse("min_obs", v)).transpose()?.unwrap_or(DEFAULT_MIN_OBS),
            value_kind: get("value_kind").map(|v| parse::<ValueKind>("value_kind", v)).transpose()?.unwrap_or(ValueKind::Price),
            value_kind_given: map.contains_key("value_kind"),
            field: get("field").map(|v| parse::<PriceField>("field", v)).transpose()?.unwrap_or_default(),
            spec,
            target_given: map.contains_key("target_return"),
            solver,
            targets,
            points,
            no_timestamp: get("no_timestamp").map(|v| parse_bool("no_timestamp", v)).transpose()?.unwrap_or(false),
        })
    }

    /// Fails before any work if a referenced input path is missing.
    pub fn check_paths(&self) -> Result<(), ConfigError> {
        for (key, p) in [
            ("panel_file", &self.panel_file),
            ("moments_file", &self.moments_file),
            ("symbols_file", &self.symbols_file),
        ] {
            if let Some(p) = p {
                if !p.is_file() {
                    return err(format!("{key} {} does not exist", p.display()));
                }
            }
        }
        Ok(())
    }
}
