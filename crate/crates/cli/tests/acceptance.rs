//! Acceptance suite. Runs without the libtest harness so every check prints
//! its `PASS`/`FAIL` line (with the measured margin) on a plain
//! `cargo test`; exits nonzero if any check fails.
//!
//! Reference values come from the brute-force code in `core/tests/common`,
//! never from the library under test.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use markowitz::ingest::{parse_ohlcv_csv, parse_symbol_directory, write_ohlcv_csv, write_symbol_directory};
use markowitz::linalg::Matrix;
use markowitz::panel::{complete_cases, PricePanel, ValueKind};
use markowitz::portfolio::{default_targets, frontier, global_min_variance, optimize, PositionMode, ProblemSpec};
use markowitz::qp::{solve, Bound, LinearConstraint, QpProblem, SolveOptions, Status};
use markowitz::stats::{estimate_moments, to_correlation, volatility_from_correlation, MomentEstimate};
use rand::Rng;

type Check = Result<String, String>;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn moments(cov: &[Vec<f64>], mean: &[f64]) -> MomentEstimate<f64> {
    MomentEstimate::new(
        (0..mean.len()).map(|i| format!("S{i}")).collect(),
        mean.to_vec(),
        Matrix::from_rows(cov.to_vec()).unwrap(),
        250,
    )
    .unwrap()
}

fn rows(m: &Matrix<f64>) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| (0..m.cols()).map(|j| m[(i, j)]).collect()).collect()
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.2?}, limit {limit:?}"))
}

fn two_asset_analytic() -> Check {
    let m = moments(&[vec![1.0, 0.0], vec![0.0, 4.0]], &[0.1, 0.1]);
    let spec = ProblemSpec { budget: 1.0, target_return: 0.1, ..ProblemSpec::default() };
    let t = Instant::now();
    let a = optimize(&m, &spec, &SolveOptions::default()).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    // w₁ = σ₂² / (σ₁² + σ₂²)
    let err = (a.weights[0] - 0.8).abs().max((a.weights[1] - 0.2).abs());
    ensure(err <= 1e-6, || format!("weights {:?}, error {err:e}", a.weights))?;
    within(elapsed, Duration::from_secs(1))?;
    Ok(format!("weights ({:.12}, {:.12}), error {err:.1e}, {elapsed:.1?}", a.weights[0], a.weights[1]))
}

fn grid_oracle_equivalence() -> Check {
    let t = Instant::now();
    let (mut worst_grid, mut worst_exact, mut worst_kkt) = (0.0f64, 0.0f64, 0.0f64);
    let cases = 60;
    for case in 0..cases {
        let mut rng = common::rng(1000 + case);
        let n = 2 + (case as usize % 5);
        let k = rng.gen_range(1..=n + 2);
        let cov = common::random_psd(&mut rng, n, k);

        let mut p = QpProblem::new(Matrix::from_rows(cov.iter().map(|r| r.iter().map(|v| 2.0 * v).collect()).collect()).unwrap());
        p.eq.push(LinearConstraint::new(vec![1.0; n], 1.0));
        p.bounds = vec![Bound::nonnegative(); n];
        let sol = solve(&p, &SolveOptions::default()).map_err(|e| e.to_string())?;
        ensure(sol.status == Status::Optimal, || format!("case {case}: status {:?}", sol.status))?;
        let kkt = sol.kkt.max();
        ensure(kkt <= 1e-8, || format!("case {case}: KKT residual {kkt:e}"))?;
        worst_kkt = worst_kkt.max(kkt);

        let f = common::quad(&cov, &sol.x);
        let (grid, _) = common::simplex_grid_min(&cov, 1000);
        let gap = (f - grid).abs();
        ensure(gap <= 1e-2 * n as f64, || format!("case {case}: objective {f} vs grid {grid}"))?;
        worst_grid = worst_grid.max(gap);

        let exact = common::simplex_min_exact(&cov, 1.0);
        worst_exact = worst_exact.max((f - exact).abs());

        let via_portfolio = global_min_variance(&moments(&cov, &vec![0.1; n]), &ProblemSpec::default(), &SolveOptions::default())
            .map_err(|e| format!("case {case}: {e}"))?;
        let g = common::quad(&cov, &via_portfolio.weights);
        ensure((g - f).abs() <= 1e-9 * (1.0 + f), || format!("case {case}: portfolio layer {g} vs solver {f}"))?;
    }
    let elapsed = t.elapsed();
    within(elapsed, Duration::from_secs(120))?;
    Ok(format!(
        "{cases} instances: max |f − grid| {worst_grid:.1e}, max |f − exact| {worst_exact:.1e}, max KKT {worst_kkt:.1e}, {elapsed:.1?}"
    ))
}

fn volatility_identity() -> Check {
    let mut worst = 0.0f64;
    for case in 0..100 {
        let mut rng = common::rng(2000 + case);
        let n = rng.gen_range(1..=12);
        let cov = common::random_psd(&mut rng, n, n + 2);
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m = moments(&cov, &vec![0.0; n]);
        let c = to_correlation(&m).map_err(|e| e.to_string())?;
        let (var, vol) = volatility_from_correlation(&w, &m.volatilities(), &c.rho);
        let reference = common::quad(&cov, &w);
        let rel = (var - reference).abs() / reference.abs();
        ensure(rel <= 1e-10, || format!("case {case}: {var} vs {reference}"))?;
        ensure((vol * vol - var).abs() <= 1e-12 * var.abs().max(1e-300), || format!("case {case}: root"))?;
        worst = worst.max(rel);
    }
    Ok(format!("100 cases, max relative error {worst:.1e}"))
}

fn day(i: usize) -> NaiveDate {
    NaiveDate::from_ymd_opt(2015, 1, 1).unwrap() + chrono::Duration::days(i as i64)
}

fn panel(cols: &[Vec<Option<f64>>]) -> PricePanel<f64> {
    let t = cols[0].len();
    let values = (0..t).flat_map(|k| cols.iter().map(move |c| c[k])).collect();
    PricePanel::new((0..t).map(day).collect(), (0..cols.len()).map(|i| format!("S{i:02}")).collect(), values, ValueKind::Price)
        .unwrap()
}

fn covariance_oracle() -> Check {
    let mut worst = 0.0f64;
    for case in 0..30 {
        let mut rng = common::rng(3000 + case);
        let n = rng.gen_range(1..=50);
        let t = rng.gen_range(2..=200);
        let cols = common::random_price_columns(&mut rng, n, t);
        let p = panel(&cols.iter().map(|c| c.iter().map(|&v| Some(v)).collect()).collect::<Vec<_>>());
        let m = estimate_moments(&p).map_err(|e| e.to_string())?;
        let (mean, cov) = common::naive_moments(&cols);
        let rel = common::frobenius_diff(&rows(m.cov()), &cov) / common::frobenius(&cov);
        ensure(rel <= 1e-12, || format!("case {case} ({n}×{t}): relative Frobenius {rel:e}"))?;
        let mean_err = m.mean().iter().zip(&mean).map(|(a, b)| (a - b).abs() / b.abs()).fold(0.0, f64::max);
        ensure(mean_err <= 1e-12, || format!("case {case}: mean error {mean_err:e}"))?;
        worst = worst.max(rel);
    }

    let mut worst_ratio = f64::INFINITY;
    for case in 0..100 {
        let mut rng = common::rng(4000 + case);
        let n = rng.gen_range(2..=40);
        let t = rng.gen_range(n / 2 + 3..=200);
        let cols: Vec<Vec<Option<f64>>> = common::random_price_columns(&mut rng, n, t)
            .into_iter()
            .map(|c| c.into_iter().map(|v| (!rng.gen_bool(0.01)).then_some(v)).collect())
            .collect();
        let Ok(p) = complete_cases(&panel(&cols)) else { continue };
        if p.n_dates() < 2 {
            continue;
        }
        let m = estimate_moments(&p).map_err(|e| e.to_string())?;
        let c = rows(m.cov());
        let max_diag = (0..n).map(|i| c[i][i]).fold(0.0, f64::max);
        let min_eig = common::jacobi_eigenvalues(c)[0];
        ensure(min_eig >= -1e-10 * max_diag, || format!("case {case}: min eigenvalue {min_eig:e}, max diagonal {max_diag:e}"))?;
        worst_ratio = worst_ratio.min(min_eig / max_diag);
    }
    Ok(format!("30 panels, max relative Frobenius {worst:.1e}; 100 complete-case panels PSD, min λ/max diag {worst_ratio:.1e}"))
}

fn constraint_variants() -> Check {
    let sd = [0.05, 0.12, 0.08, 0.03];
    let rho = [[1.0, 0.3, 0.2, 0.1], [0.3, 1.0, 0.4, -0.2], [0.2, 0.4, 1.0, 0.0], [0.1, -0.2, 0.0, 1.0]];
    let cov: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| rho[i][j] * sd[i] * sd[j]).collect()).collect();
    let mean = [0.06, 0.10, 0.30, 0.04];
    let m = moments(&cov, &mean);
    let base = ProblemSpec { budget: 1.0, target_return: 0.05, position_mode: PositionMode::LongShort, ..ProblemSpec::default() };
    let variants = [
        ("base", base.clone()),
        ("limit", ProblemSpec { limit_constraint: true, ..base.clone() }),
        ("position", ProblemSpec { position_mode: PositionMode::LongOnly, ..base.clone() }),
        ("long/short", ProblemSpec { target_return: 0.2, ..base.clone() }),
        ("long-only", ProblemSpec { target_return: 0.2, position_mode: PositionMode::LongOnly, ..base.clone() }),
    ];
    let slack = 1e-8;
    let mut notes = Vec::new();
    for (name, spec) in variants {
        let a = optimize(&m, &spec, &SolveOptions::default()).map_err(|e| format!("{name}: {e}"))?;
        let w = &a.weights;
        let ret = common::dot(w, &mean);
        let vol = common::quad(&cov, w).sqrt();
        let sum: f64 = w.iter().sum();
        ensure((sum - spec.budget).abs() <= slack, || format!("{name}: weights sum to {sum}"))?;
        ensure(ret - spec.target_return >= -slack, || format!("{name}: return {ret} below {}", spec.target_return))?;
        if spec.position_mode == PositionMode::LongOnly {
            let min = w.iter().copied().fold(f64::INFINITY, f64::min);
            ensure(min >= -slack, || format!("{name}: weight {min}"))?;
        }
        if spec.limit_constraint {
            let margin = ret - 3.0 * vol;
            ensure(margin >= -slack, || format!("{name}: E − 3σ = {margin:e}"))?;
            notes.push(format!("E − 3σ = {margin:.1e}"));
        }
        if name == "long/short" {
            ensure(w.iter().any(|&x| x < -1e-3), || format!("{name}: no short position in {w:?}"))?;
        }
    }
    Ok(format!("5 solves within {slack:e}; limit binding with {}", notes.join(", ")))
}

fn nondecreasing(vols: &[f64]) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for (i, p) in vols.windows(2).enumerate() {
        let drop = p[0] - p[1];
        ensure(drop <= 1e-8, || format!("volatility drops by {drop:e} at point {}", i + 1))?;
        worst = worst.max(drop);
    }
    Ok(worst)
}

fn sweep(m: &MomentEstimate<f64>, spec: &ProblemSpec<f64>) -> Result<Vec<(f64, f64)>, String> {
    let opts = SolveOptions::default();
    let targets = default_targets(m, spec, 30, &opts).map_err(|e| e.to_string())?;
    let f = frontier(m, spec, &targets, &opts).map_err(|e| e.to_string())?;
    ensure(f.points.len() == 30, || format!("{} of 30 points feasible", f.points.len()))?;
    Ok(f.points.iter().map(|p| (p.target, p.volatility)).collect())
}

fn frontier_monotonicity() -> Check {
    let spec = ProblemSpec::default();
    // Two assets, Σ = diag(1, 4), means (1, 2): on the efficient branch
    // w = (2 − P, P − 1) and σ² = (2 − P)² + 4(P − 1)².
    let analytic = sweep(&moments(&[vec![1.0, 0.0], vec![0.0, 4.0]], &[1.0, 2.0]), &spec)?;
    let mut closed_form = 0.0f64;
    for &(p, vol) in &analytic {
        let expect = ((2.0 - p).powi(2) + 4.0 * (p - 1.0).powi(2)).sqrt();
        closed_form = closed_form.max((vol - expect).abs());
    }
    ensure(closed_form <= 1e-8, || format!("analytic frontier off by {closed_form:e}"))?;
    let mut worst = nondecreasing(&analytic.iter().map(|p| p.1).collect::<Vec<_>>())?;

    for case in 0..10 {
        let mut rng = common::rng(5000 + case);
        let n = rng.gen_range(3..=12);
        let cov = common::random_psd(&mut rng, n, n + 3);
        let mean: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..0.3)).collect();
        let pts = sweep(&moments(&cov, &mean), &spec).map_err(|e| format!("instance {case}: {e}"))?;
        worst = worst.max(nondecreasing(&pts.iter().map(|p| p.1).collect::<Vec<_>>()).map_err(|e| format!("instance {case}: {e}"))?);
    }

    let mut rng = common::rng(6000);
    let cov = common::random_psd(&mut rng, 50, 60);
    let mean: Vec<f64> = (0..50).map(|_| rng.gen_range(0.01..0.3)).collect();
    let m = moments(&cov, &mean);
    let t = Instant::now();
    let pts = sweep(&m, &spec)?;
    let elapsed = t.elapsed();
    within(elapsed, Duration::from_secs(10))?;
    worst = worst.max(nondecreasing(&pts.iter().map(|p| p.1).collect::<Vec<_>>())?);
    Ok(format!(
        "analytic curve error {closed_form:.1e}; largest volatility drop {worst:.1e}; 30 points at n = 50 in {elapsed:.1?}"
    ))
}

fn format_fidelity() -> Check {
    let dir_raw = std::fs::read(fixtures().join("formats/nasdaqlisted.txt")).map_err(|e| e.to_string())?;
    let dir = parse_symbol_directory(&dir_raw).map_err(|e| e.to_string())?;
    ensure(dir.record_count() == 6, || format!("{} directory records", dir.record_count()))?;
    ensure(dir.footer_skipped && dir.malformed_count() == 0, || "footer handling".into())?;
    let amzn = &dir.records[2];
    ensure(
        amzn.symbol == "AMZN" && amzn.security_name == "Amazon.com, Inc. - Common Stock" && amzn.market_category == "Q",
        || format!("third record {amzn:?}"),
    )?;
    ensure(dir.records.iter().filter(|r| r.is_test_issue()).count() == 1, || "test issue flag".into())?;
    let text = write_symbol_directory(&dir.records);
    let again = write_symbol_directory(&parse_symbol_directory(text.as_bytes()).map_err(|e| e.to_string())?.records);
    ensure(text == again, || "directory round trip is not byte-stable".into())?;
    let without_footer: String = String::from_utf8_lossy(&dir_raw).lines().filter(|l| !l.starts_with("File Creation")).map(|l| format!("{l}\n")).collect();
    ensure(text == without_footer, || "directory rewrite differs from the fixture body".into())?;

    let csv_raw = std::fs::read(fixtures().join("formats/AAPL.csv")).map_err(|e| e.to_string())?;
    let s = parse_ohlcv_csv::<f64>(&csv_raw).map_err(|e| e.to_string())?;
    ensure(s.rows.len() == 5 && s.dropped == 0, || format!("{} OHLCV rows, {} dropped", s.rows.len(), s.dropped))?;
    let last = &s.rows[4];
    ensure(
        last.date == NaiveDate::from_ymd_opt(2011, 4, 15).unwrap()
            && last.open == Some(332.0)
            && last.high == Some(334.0)
            && last.low == Some(330.0)
            && last.close == 333.5
            && last.volume == Some(1000)
            && last.adj_close == Some(333.5),
        || format!("last row {last:?}"),
    )?;
    let text = write_ohlcv_csv(&s.rows);
    let again = write_ohlcv_csv(&parse_ohlcv_csv::<f64>(text.as_bytes()).map_err(|e| e.to_string())?.rows);
    ensure(text == again, || "OHLCV round trip is not byte-stable".into())?;
    Ok(format!("6 directory records (footer skipped), 5 OHLCV rows; both round trips byte-stable"))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_markowitz")).args(args).output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), || format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
}

fn frontier_bytes(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files = vec![dir.join("frontier.csv"), dir.join("frontier.json")];
    let mut points: Vec<PathBuf> = std::fs::read_dir(dir.join("frontier_weights"))
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    points.sort();
    files.extend(points);
    files
        .into_iter()
        .map(|p| {
            let name = p.strip_prefix(dir).unwrap_or(&p).display().to_string();
            std::fs::read(&p).map(|b| (name, b)).map_err(|e| e.to_string())
        })
        .collect()
}

fn frontier_determinism() -> Check {
    let cfg = fixtures().join("trio/trio.cfg");
    let cfg = cfg.to_str().ok_or("path")?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for name in ["first", "second"] {
        let out = tmp.path().join(name);
        let out = out.to_str().ok_or("path")?;
        let common = ["--config", cfg, "--output-dir", out, "--no-timestamp"];
        run_cli(&[&["ingest"][..], &common].concat())?;
        run_cli(&[&["frontier"][..], &common].concat())?;
        let before = frontier_bytes(Path::new(out))?;
        run_cli(&[&["frontier"][..], &common].concat())?;
        ensure(before == frontier_bytes(Path::new(out))?, || format!("{name}: rerun changed the output"))?;
        runs.push(before);
    }
    ensure(runs[0] == runs[1], || "separate output directories differ".into())?;
    let rows = String::from_utf8_lossy(&runs[0][0].1).lines().count() - 1;
    Ok(format!("{} files byte-identical across reruns and directories ({rows} frontier rows)", runs[0].len()))
}

fn main() {
    let checks: [(&str, fn() -> Check); 8] = [
        ("two-asset analytic weights", two_asset_analytic),
        ("grid-search oracle equivalence", grid_oracle_equivalence),
        ("volatility double-sum identity", volatility_identity),
        ("covariance oracle and PSD", covariance_oracle),
        ("constraint variants", constraint_variants),
        ("frontier monotonicity", frontier_monotonicity),
        ("format fidelity", format_fidelity),
        ("frontier determinism", frontier_determinism),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
