//! Brute-force reference implementations shared by the integration suites.
//! Nothing here calls into the library's numeric code.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `wᵀAw` as a plain double loop.
pub fn quad(a: &[Vec<f64>], w: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..w.len() {
        for j in 0..w.len() {
            s += w[i] * a[i][j] * w[j];
        }
    }
    s
}

/// Column means and the n−1 sample covariance straight from the
/// definition, one entry at a time.
pub fn naive_moments(cols: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = cols.len();
    let t = cols[0].len();
    let mean: Vec<f64> = cols.iter().map(|c| c.iter().sum::<f64>() / t as f64).collect();
    let mut cov = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..t {
                s += (cols[i][k] - mean[i]) * (cols[j][k] - mean[j]);
            }
            cov[i][j] = s / (t as f64 - 1.0);
        }
    }
    (mean, cov)
}

pub fn frobenius_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(r, s)| r.iter().zip(s).map(|(x, y)| (x - y) * (x - y)))
        .sum::<f64>()
        .sqrt()
}

pub fn frobenius(a: &[Vec<f64>]) -> f64 {
    a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap());
    ev
}

/// `AᵀA / k` for a random `k × n` matrix; rank `min(k, n)`.
pub fn random_psd(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<Vec<f64>> {
    let a: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            s[i][j] = (0..k).map(|r| a[r][i] * a[r][j]).sum::<f64>() / k as f64;
        }
    }
    s
}

/// Gaussian elimination with partial pivoting; `None` if singular.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())?;
        if a[piv][col].abs() < 1e-13 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Exact `min wᵀΣw` over `{w ≥ 0, Σw = budget}` by enumerating supports:
/// on each support the equality-constrained minimizer solves
/// `[[2Σ_S, 1],[1ᵀ, 0]]·[w; −λ] = [0; budget]`.
pub fn simplex_min_exact(cov: &[Vec<f64>], budget: f64) -> f64 {
    let n = cov.len();
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << n) {
        let s: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        let m = s.len();
        let mut a = vec![vec![0.0; m + 1]; m + 1];
        for (r, &i) in s.iter().enumerate() {
            for (c, &j) in s.iter().enumerate() {
                a[r][c] = 2.0 * cov[i][j];
            }
            a[r][m] = 1.0;
            a[m][r] = 1.0;
        }
        let mut b = vec![0.0; m + 1];
        b[m] = budget;
        let Some(sol) = solve_dense(a, b) else { continue };
        if sol[..m].iter().any(|&v| v < -1e-12) {
            continue;
        }
        let mut w = vec![0.0; n];
        for (r, &i) in s.iter().enumerate() {
            w[i] = sol[r].max(0.0);
        }
        best = best.min(quad(cov, &w));
    }
    // Singular supports are skipped above; vertices always solve.
    best
}

/// Grid-search oracle for `min wᵀΣw` over the unit simplex at mesh `1/units`.
/// Small problems enumerate the whole mesh; larger ones enumerate a coarse
/// sub-mesh and then descend by moving mesh quanta between coordinates,
/// always staying on the fine mesh.
pub fn simplex_grid_min(cov: &[Vec<f64>], units: u32) -> (f64, Vec<f64>) {
    let n = cov.len();
    let h = 1.0 / units as f64;
    let eval = |c: &[u32]| {
        let mut s = 0.0;
        for i in 0..n {
            if c[i] == 0 {
                continue;
            }
            let mut row = 0.0;
            for j in 0..n {
                row += cov[i][j] * c[j] as f64;
            }
            s += c[i] as f64 * row;
        }
        s * h * h
    };
    let full = n <= 3;
    let coarse = if full { units } else { units / 40 };
    let mut best = (f64::INFINITY, vec![0u32; n]);
    let mut counts = vec![0u32; n];
    enumerate(&mut counts, 0, coarse, &mut |c| {
        let scaled: Vec<u32> = c.iter().map(|&k| k * (units / coarse)).collect();
        let v = eval(&scaled);
        if v < best.0 {
            best = (v, scaled);
        }
    });
    if !full {
        let (mut val, mut c) = best;
        for step in [20u32, 10, 5, 2, 1] {
            loop {
                let mut improved = false;
                for i in 0..n {
                    for j in 0..n {
                        if i == j || c[i] < step {
                            continue;
                        }
                        c[i] -= step;
                        c[j] += step;
                        let v = eval(&c);
                        if v < val - 1e-15 {
                            val = v;
                            improved = true;
                        } else {
                            c[i] += step;
                            c[j] -= step;
                        }
                    }
                }
                if !improved {
                    break;
                }
            }
        }
        best = (val, c);
    }
    let w = best.1.iter().map(|&k| k as f64 / units as f64).collect();
    (best.0, w)
}

fn enumerate(c: &mut Vec<u32>, i: usize, left: u32, f: &mut impl FnMut(&[u32])) {
    if i + 1 == c.len() {
        c[i] = left;
        f(c);
        return;
    }
    for k in 0..=left {
        c[i] = k;
        enumerate(c, i + 1, left - k, f);
    }
}

/// Random price panel columns: positive geometric random walks.
pub fn random_price_columns(rng: &mut ChaCha8Rng, n: usize, t: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let mut p = rng.gen_range(5.0..200.0);
            (0..t)
                .map(|_| {
                    p *= 1.0 + rng.gen_range(-0.03..0.03);
                    p
                })
                .collect()
        })
        .collect()
}
