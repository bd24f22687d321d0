//! Independent oracles shared by the integration tests. Nothing here calls
//! into the code under test for the quantity being checked.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(lo..hi))
}

pub fn simplex(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Max |row sum - a_i| and |column sum - b_j|, by explicit loops.
pub fn naive_violation(q: &Array2<f64>, a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = q.dim();
    let mut worst = 0.0f64;
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..m {
            s += q[[i, j]];
        }
        worst = worst.max((s - a[i]).abs());
    }
    for j in 0..m {
        let mut s = 0.0;
        for i in 0..n {
            s += q[[i, j]];
        }
        worst = worst.max((s - b[j]).abs());
    }
    worst
}

/// `<C, Q> + eps * sum Q (ln Q - 1)` with `0 ln 0 = 0`.
pub fn naive_objective(c: &Array2<f64>, q: &Array2<f64>, eps: f64) -> f64 {
    let mut total = 0.0;
    for (cv, qv) in c.iter().zip(q.iter()) {
        total += cv * qv;
        if *qv > 0.0 {
            total += eps * qv * (qv.ln() - 1.0);
        }
    }
    total
}

/// Minimizes a unimodal function on `[lo, hi]` by golden-section search.
pub fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > tol {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    (lo + hi) / 2.0
}

/// Optimal entropic objective of a balanced 2x2 problem, via the
/// one-parameter family `Q = [[t, a1-t], [b1-t, a2-b1+t]]`.
pub fn two_by_two_oracle(c: &Array2<f64>, a: [f64; 2], b: [f64; 2], eps: f64) -> f64 {
    let plan = |t: f64| Array2::from_shape_vec((2, 2), vec![t, a[0] - t, b[0] - t, a[1] - b[0] + t]).unwrap();
    let lo = (a[0] - b[1]).max(0.0);
    let hi = a[0].min(b[0]);
    let t = golden_section(|t| naive_objective(c, &plan(t), eps), lo, hi, 1e-14);
    naive_objective(c, &plan(t), eps)
}

/// Fraction of mass in the k largest entries, by repeated max extraction.
pub fn mass_explained_oracle(q: &Array2<f64>, k: usize) -> f64 {
    let mut values: Vec<f64> = q.iter().copied().collect();
    let total: f64 = values.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let mut taken = 0.0;
    for _ in 0..k.min(values.len()) {
        let (idx, _) = values
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        taken += values[idx];
        values[idx] = f64::NEG_INFINITY;
    }
    if k >= q.len() {
        1.0
    } else {
        taken / total
    }
}

/// `A B C` by triple loops.
pub fn naive_triple(a: &Array2<f64>, b: &Array2<f64>, c: &Array2<f64>) -> Array2<f64> {
    naive_mm(&naive_mm(a, b), c)
}

pub fn naive_mm(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (n, k) = a.dim();
    let m = b.ncols();
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[[i, t]] * b[[t, j]];
            }
            out[[i, j]] = s;
        }
    }
    out
}

/// Textbook Pearson correlation of two columns.
pub fn naive_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn bits_equal(a: &Array2<f64>, b: &Array2<f64>) -> bool {
    a.dim() == b.dim() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}
