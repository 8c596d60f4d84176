mod common;

use chrono::{Duration, NaiveDate};
use markowitz::ingest::{parse_ohlcv_csv, parse_symbol_directory, write_ohlcv_csv, write_symbol_directory, OhlcvRow, SymbolRecord};
use markowitz::linalg::Matrix;
use markowitz::panel::{build_panel, complete_cases, filter_min_obs, to_returns, PricePanel, ValueKind};
use markowitz::portfolio::{frontier, optimize, PositionMode, ProblemSpec};
use markowitz::qp::SolveOptions;
use markowitz::stats::{
    estimate_moments, portfolio_variance, psd_check, psd_repair, to_correlation, volatility_from_correlation,
    MomentEstimate,
};
use markowitz::format::fmt_sig;
use proptest::prelude::*;
use std::collections::BTreeMap;

fn day(i: usize) -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + Duration::days(i as i64)
}

fn panel_from_columns(cols: &[Vec<f64>]) -> PricePanel<f64> {
    let t = cols[0].len();
    let mut values = Vec::with_capacity(t * cols.len());
    for k in 0..t {
        for c in cols {
            values.push(Some(c[k]));
        }
    }
    PricePanel::new(
        (0..t).map(day).collect(),
        (0..cols.len()).map(|i| format!("S{i:02}")).collect(),
        values,
        ValueKind::Price,
    )
    .unwrap()
}

fn moments(cov: Vec<Vec<f64>>, mean: Vec<f64>) -> MomentEstimate<f64> {
    let n = mean.len();
    MomentEstimate::new(
        (0..n).map(|i| format!("S{i}")).collect(),
        mean,
        Matrix::from_rows(cov).unwrap(),
        250,
    )
    .unwrap()
}

fn columns(n: std::ops::RangeInclusive<usize>, t: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (n, t).prop_flat_map(|(n, t)| prop::collection::vec(prop::collection::vec(-50.0..150.0f64, t), n))
}

fn psd_instance(n: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>, u64)> {
    psd_instance_rank(n, 1)
}

/// Covariances from `k ≥ min_rank` factor rows; `min_rank = n` forces full rank.
fn psd_instance_rank(n: std::ops::RangeInclusive<usize>, min_rank: usize) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>, u64)> {
    n.prop_flat_map(move |n| {
        (
            any::<u64>(),
            min_rank.min(n)..=n + 2,
            prop::collection::vec(0.01..0.3f64, n),
        )
            .prop_map(move |(seed, k, mean)| {
                let mut rng = common::rng(seed);
                (common::random_psd(&mut rng, n, k), mean, seed)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn covariance_matches_definition(cols in columns(1..=8, 2..=40)) {
        let m = estimate_moments(&panel_from_columns(&cols)).unwrap();
        let (mean, cov) = common::naive_moments(&cols);
        let got = m.cov().to_rows();
        let rel = common::frobenius_diff(&got, &cov) / common::frobenius(&cov).max(1e-300);
        prop_assert!(rel <= 1e-12, "relative Frobenius {rel}");
        for (a, b) in m.mean().iter().zip(&mean) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn sample_covariance_is_psd(cols in columns(1..=10, 2..=30)) {
        let m = estimate_moments(&panel_from_columns(&cols)).unwrap();
        let min = common::jacobi_eigenvalues(m.cov().to_rows())[0];
        prop_assert!(min >= -1e-10 * m.cov().max_diag(), "min eigenvalue {min}");
        prop_assert!(psd_check(&m, None).unwrap().is_psd);
    }

    #[test]
    fn volatility_identity((cov, _, seed) in psd_instance(1..=8)) {
        let n = cov.len();
        let mut rng = common::rng(seed ^ 0x5eed);
        let w: Vec<f64> = (0..n).map(|_| rand::Rng::gen_range(&mut rng, -2.0..2.0)).collect();
        let m = moments(cov.clone(), vec![0.1; n]);
        let Ok(c) = to_correlation(&m) else { return Ok(()); };
        let sigma = m.volatilities();
        let (var, vol) = volatility_from_correlation(&w, &sigma, &c.rho);
        let reference = common::quad(&cov, &w);
        let scale = reference.abs().max(1e-12);
        prop_assert!((var - reference).abs() <= 1e-10 * scale);
        prop_assert!((portfolio_variance(m.cov(), &w) - reference).abs() <= 1e-10 * scale);
        prop_assert!((vol - var.max(0.0).sqrt()).abs() <= 1e-12);
    }

    #[test]
    fn correlation_rescales_to_covariance((cov, _, _) in psd_instance(1..=8)) {
        let m = moments(cov.clone(), vec![0.0; cov.len()]);
        if let Ok(c) = to_correlation(&m) {
            let back = c.to_covariance(&m.volatilities()).to_rows();
            prop_assert!(common::frobenius_diff(&back, &cov) <= 1e-12 * common::frobenius(&cov));
            for i in 0..cov.len() {
                prop_assert_eq!(c.rho[(i, i)], 1.0);
            }
        }
    }

    #[test]
    fn repaired_matrix_has_nonnegative_quadratic_form(
        vals in prop::collection::vec(-1.0..1.0f64, 10),
        w in prop::collection::vec(-1.0..1.0f64, 4),
    ) {
        // Symmetric but generally indefinite 4×4.
        let mut a = vec![vec![0.0; 4]; 4];
        let mut k = 0;
        for i in 0..4 {
            for j in i..4 {
                a[i][j] = vals[k];
                a[j][i] = vals[k];
                k += 1;
            }
        }
        let m = moments(a, vec![0.0; 4]);
        let r = psd_repair(&m, 0.0).unwrap();
        let maxd = r.cov().max_diag().max(1e-300);
        let ww: f64 = w.iter().map(|x| x * x).sum();
        prop_assert!(common::quad(&r.cov().to_rows(), &w) >= -1e-10 * ww * maxd);
        prop_assert!(common::jacobi_eigenvalues(r.cov().to_rows())[0] >= -1e-12);
    }

    #[test]
    fn long_only_simplex_matches_exact_oracle((cov, mean, _) in psd_instance(2..=5)) {
        let n = cov.len();
        let exact = common::simplex_min_exact(&cov, 1.0);
        let target = mean.iter().copied().fold(f64::INFINITY, f64::min);
        let spec = ProblemSpec { target_return: target, ..ProblemSpec::default() };
        let a = optimize(&moments(cov.clone(), mean.clone()), &spec, &SolveOptions::default()).unwrap();
        let got = common::quad(&cov, &a.weights);
        prop_assert!(got <= exact + 1e-7 * (1.0 + exact), "solver {got} exact {exact} (n={n})");
        prop_assert!((a.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-8);
        prop_assert!(a.weights.iter().all(|&w| w >= -1e-9));
        prop_assert_eq!(a.expected_return, a.weights.iter().zip(&mean).map(|(w, m)| w * m).sum::<f64>());
    }

    #[test]
    fn budget_and_covariance_scaling((cov, mean, _) in psd_instance(2..=5), b in 0.5..50.0f64, c in 0.1..10.0f64) {
        let target = mean.iter().sum::<f64>() / mean.len() as f64;
        let base = ProblemSpec { target_return: target, position_mode: PositionMode::LongShort, ..ProblemSpec::default() };
        let opts = SolveOptions::default();
        let m = moments(cov.clone(), mean.clone());
        let w1 = optimize(&m, &base, &opts).unwrap().weights;
        let scaled = ProblemSpec { budget: b, target_return: target * b, ..base };
        let wb = optimize(&m, &scaled, &opts).unwrap().weights;
        let cov_c: Vec<Vec<f64>> = cov.iter().map(|r| r.iter().map(|x| x * c).collect()).collect();
        let wc = optimize(&moments(cov_c, mean), &base, &opts).unwrap().weights;
        let v1 = common::quad(&cov, &w1);
        prop_assert!((common::quad(&cov, &wb) / (b * b) - v1).abs() <= 1e-6 * (1.0 + v1));
        prop_assert!((common::quad(&cov, &wc) - v1).abs() <= 1e-6 * (1.0 + v1));
    }

    #[test]
    fn frontier_volatility_nondecreasing((cov, mean, _) in psd_instance_rank(2..=6, 6)) {
        let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let targets: Vec<f64> = (0..8).map(|i| lo + (hi - lo) * i as f64 / 8.0).collect();
        let f = frontier(&moments(cov, mean), &ProblemSpec::default(), &targets, &SolveOptions::default()).unwrap();
        prop_assert_eq!(f.points.len(), targets.len());
        for w in f.points.windows(2) {
            prop_assert!(w[1].volatility >= w[0].volatility - 1e-8, "{} then {}", w[0].volatility, w[1].volatility);
        }
    }

    #[test]
    fn returns_have_one_fewer_date(cols in columns(1..=5, 2..=20)) {
        let cols: Vec<Vec<f64>> = cols.into_iter().map(|c| c.into_iter().map(|v| v.abs() + 1.0).collect()).collect();
        let p = panel_from_columns(&cols);
        for kind in [ValueKind::SimpleReturn, ValueKind::LogReturn] {
            let r = to_returns(&p, kind).unwrap();
            prop_assert_eq!(r.n_dates(), p.n_dates() - 1);
            prop_assert_eq!(r.dates(), &p.dates()[1..]);
        }
        let k = cols[0].len();
        let r = to_returns(&p, ValueKind::SimpleReturn).unwrap();
        let expect = cols[0][k - 1] / cols[0][k - 2] - 1.0;
        prop_assert!((r.get(k - 2, 0).unwrap() - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
    }

    #[test]
    fn panel_alignment_invariants(lens in prop::collection::vec(1usize..30, 1..5), min_obs in 0usize..25) {
        let mut series = BTreeMap::new();
        for (s, &len) in lens.iter().enumerate() {
            // Series start on staggered days so dates only partly overlap.
            let rows: Vec<OhlcvRow<f64>> = (0..len).map(|i| OhlcvRow::from_close(day(s * 3 + i), 10.0 + i as f64)).collect();
            series.insert(format!("S{s}"), rows);
        }
        let p = build_panel(&series).unwrap().panel;
        prop_assert!(p.dates().windows(2).all(|w| w[0] < w[1]));
        for (j, &len) in lens.iter().enumerate() {
            prop_assert_eq!(p.obs_count(j), len);
        }
        match filter_min_obs(&p, min_obs) {
            Ok(f) => {
                for j in 0..f.n_symbols() {
                    prop_assert!(f.obs_count(j) > min_obs);
                }
                prop_assert_eq!(f.n_symbols(), lens.iter().filter(|&&l| l > min_obs).count());
                if let Ok(c) = complete_cases(&f) {
                    prop_assert!(!c.has_missing());
                }
            }
            Err(_) => prop_assert!(lens.iter().all(|&l| l <= min_obs)),
        }
    }

    #[test]
    fn ohlcv_round_trip_is_byte_stable(
        closes in prop::collection::vec(0.01..10_000.0f64, 1..30),
        vols in prop::collection::vec(0u64..10_000_000, 30),
    ) {
        let rows: Vec<OhlcvRow<f64>> = closes
            .iter()
            .enumerate()
            .map(|(i, &c)| OhlcvRow {
                date: day(i),
                open: Some(c * 1.01),
                high: Some(c * 1.02),
                low: Some(c * 0.98),
                close: c,
                volume: Some(vols[i]),
                adj_close: Some(c * 0.9),
            })
            .collect();
        let once = write_ohlcv_csv(&rows);
        let parsed = parse_ohlcv_csv::<f64>(once.as_bytes()).unwrap();
        prop_assert_eq!(parsed.rows.len(), rows.len());
        prop_assert_eq!(write_ohlcv_csv(&parsed.rows), once);
    }

    #[test]
    fn symbol_directory_round_trip(names in prop::collection::vec("[A-Z]{1,5}", 1..20)) {
        let records: Vec<SymbolRecord> = names
            .iter()
            .map(|s| SymbolRecord {
                symbol: s.clone(),
                security_name: format!("{s} Holdings - Common Stock"),
                market_category: "Q".into(),
                test_issue: "N".into(),
                financial_status: "N".into(),
                round_lot: "100".into(),
            })
            .collect();
        let text = write_symbol_directory(&records);
        let dir = parse_symbol_directory(text.as_bytes()).unwrap();
        prop_assert_eq!(&dir.records, &records);
        prop_assert_eq!(write_symbol_directory(&dir.records), text);
    }

    #[test]
    fn fmt_sig_round_trips_to_twelve_digits(x in prop::num::f64::NORMAL) {
        let back: f64 = fmt_sig(x).parse().unwrap();
        prop_assert!((back - x).abs() <= 5e-12 * x.abs());
    }
}

#[test]
fn single_precision_pipeline() {
    let cols: Vec<Vec<f32>> = vec![vec![10.866_025, 9.133_975, 10.866_025, 9.133_975], vec![11.732_051, 11.732_051, 8.267_949, 8.267_949]];
    let t = cols[0].len();
    let values = (0..t).flat_map(|k| cols.iter().map(move |c| Some(c[k]))).collect();
    let p = PricePanel::<f32>::new((0..t).map(day).collect(), vec!["A".into(), "B".into()], values, ValueKind::Price).unwrap();
    let m = estimate_moments(&p).unwrap();
    assert!((m.cov()[(0, 0)] - 1.0).abs() < 1e-4);
    assert!((m.cov()[(1, 1)] - 4.0).abs() < 1e-4);
    let opts = SolveOptions::<f32> {
        tol: 1e-4,
        ..SolveOptions::default()
    };
    let spec = ProblemSpec::<f32> {
        target_return: 10.0,
        ..ProblemSpec::default()
    };
    let a = optimize(&m, &spec, &opts).unwrap();
    assert!((a.weights[0] - 0.8).abs() < 1e-3, "{:?}", a.weights);
    assert!((a.weights[1] - 0.2).abs() < 1e-3);
}
