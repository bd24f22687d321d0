//! Entropic optimal transport via Sinkhorn scaling.
//!
//! Three kernels share one contract: `solve` works on the Gibbs kernel
//! `K = exp(-C / eps)` directly, `solve_log_domain` works on log-scalings with
//! log-sum-exp reductions, and `solve_streaming` runs the log-domain
//! iteration over column panels produced on demand by a [`CostOracle`], so
//! the `n x m` kernel is never held in memory.
//!
//! Every solver starts from `v = 1`, alternates `u <- a / (K v)` and
//! `v <- b / (K^T u)`, and stops once the maximum marginal violation drops to
//! `tol` or the iteration cap is hit. Hitting the cap is not an error; the
//! returned plan carries `converged = false`.

use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, CowArray, Ix2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How many trailing violations a plan keeps for diagnostics.
const HISTORY: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMode {
    Dense,
    LogDomain,
    Streaming,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub mode: SolverMode,
    /// Column-panel width for streaming mode.
    pub block_size: usize,
    /// Floor applied to dense-mode kernel entries.
    pub stability_eps: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig::feature_default()
    }
}

impl SolverConfig {
    /// Feature-level problems: eps 0.1, 200 iterations, tolerance 1e-6.
    pub fn feature_default() -> Self {
        SolverConfig {
            epsilon: 0.1,
            max_iters: 200,
            tol: 1e-6,
            mode: SolverMode::Streaming,
            block_size: 256,
            stability_eps: 1e-12,
        }
    }

    /// Tighter regularisation used for math-reasoning style calibration data.
    pub fn feature_math_preset() -> Self {
        SolverConfig {
            epsilon: 0.03,
            ..SolverConfig::feature_default()
        }
    }

    /// Layer-level problems: eta 0.1, up to 1000 iterations, tolerance 1e-9.
    pub fn layer_default() -> Self {
        SolverConfig {
            epsilon: 0.1,
            max_iters: 1000,
            tol: 1e-9,
            mode: SolverMode::LogDomain,
            block_size: 256,
            stability_eps: 1e-12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Validation(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Validation(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::Validation("max_iters must be at least 1".into()));
        }
        if self.block_size == 0 {
            return Err(Error::Validation("block_size must be at least 1".into()));
        }
        if !(self.stability_eps >= 0.0) {
            return Err(Error::Validation("stability_eps must be nonnegative".into()));
        }
        Ok(())
    }
}

/// A solved (or iteration-capped) transport plan.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    pub row_marginal: Array1<f64>,
    pub col_marginal: Array1<f64>,
    pub converged: bool,
    pub final_violation: f64,
    pub iterations_used: usize,
    /// Marginal violations of the last few iterations, oldest first.
    pub recent_violations: Vec<f64>,
}

impl TransportPlan {
    pub fn dim(&self) -> (usize, usize) {
        self.plan.dim()
    }

    pub fn total_mass(&self) -> f64 {
        self.plan.sum()
    }

    /// `max(|Q 1 - a|_inf, |Q^T 1 - b|_inf)` recomputed from the plan.
    pub fn marginal_violation(&self) -> f64 {
        marginal_violation(self.plan.view(), self.row_marginal.view(), self.col_marginal.view())
    }

    /// Column index of the largest entry in each row (lowest index on ties).
    pub fn row_argmax(&self) -> Vec<usize> {
        row_argmax(self.plan.view())
    }
}

pub fn marginal_violation(q: ArrayView2<'_, f64>, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let rows = q.rows().into_iter().zip(a).map(|(r, &ai)| (r.sum() - ai).abs());
    let cols = q.columns().into_iter().zip(b).map(|(c, &bj)| (c.sum() - bj).abs());
    rows.chain(cols).fold(0.0, f64::max)
}

pub fn row_argmax(q: ArrayView2<'_, f64>) -> Vec<usize> {
    q.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn uniform(n: usize) -> Array1<f64> {
    Array1::from_elem(n, 1.0 / n as f64)
}

/// Source of cost tiles for the streaming solver.
///
/// Tiles are requested as full-height column panels. Implementations must be
/// deterministic; the solver evaluates panels serially.
pub trait CostOracle {
    fn dims(&self) -> (usize, usize);
    fn tile(&self, rows: Range<usize>, cols: Range<usize>) -> CowArray<'_, f64, Ix2>;
}

/// A cost matrix already in memory.
pub struct DenseCost<'a>(pub ArrayView2<'a, f64>);

impl CostOracle for DenseCost<'_> {
    fn dims(&self) -> (usize, usize) {
        self.0.dim()
    }

    fn tile(&self, rows: Range<usize>, cols: Range<usize>) -> CowArray<'_, f64, Ix2> {
        CowArray::from(self.0.slice(s![rows, cols]))
    }
}

/// Costs computed on demand by a closure `(rows, cols) -> tile`.
pub struct FnCost<F> {
    pub rows: usize,
    pub cols: usize,
    pub f: F,
}

impl<F> CostOracle for FnCost<F>
where
    F: Fn(Range<usize>, Range<usize>) -> Array2<f64>,
{
    fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn tile(&self, rows: Range<usize>, cols: Range<usize>) -> CowArray<'_, f64, Ix2> {
        let expected = (rows.len(), cols.len());
        let tile = (self.f)(rows, cols);
        assert_eq!(tile.dim(), expected, "cost oracle returned a tile of the wrong shape");
        CowArray::from(tile)
    }
}

fn check_marginal(name: &str, p: ArrayView1<'_, f64>, len: usize) -> Result<()> {
    if p.len() != len {
        return Err(Error::Validation(format!(
            "marginal {name} has length {}, expected {len}",
            p.len()
        )));
    }
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Validation(format!("marginal {name} has a negative or non-finite entry")));
    }
    let sum = p.sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::Validation(format!("marginal {name} sums to {sum}, not 1")));
    }
    Ok(())
}

/// Validates shapes, marginals and cost entries, and reports rows/columns
/// whose every cost is infinite while carrying positive mass.
fn check_problem(oracle: &dyn CostOracle, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, cfg: &SolverConfig) -> Result<()> {
    cfg.validate()?;
    let (n, m) = oracle.dims();
    if n == 0 || m == 0 {
        return Err(Error::Validation(format!("empty cost matrix {n}x{m}")));
    }
    check_marginal("a", a, n)?;
    check_marginal("b", b, m)?;
    let mut row_open = vec![false; n];
    let mut col_open = vec![false; m];
    for start in (0..m).step_by(cfg.block_size) {
        let end = (start + cfg.block_size).min(m);
        let tile = oracle.tile(0..n, start..end);
        for ((i, j), &c) in tile.indexed_iter() {
            if c.is_nan() || c == f64::NEG_INFINITY {
                return Err(Error::Validation(format!("cost entry ({i}, {}) is {c}", start + j)));
            }
            if c.is_finite() {
                row_open[i] = true;
                col_open[start + j] = true;
            }
        }
    }
    if let Some(i) = (0..n).find(|&i| !row_open[i] && a[i] > 0.0) {
        return Err(Error::Infeasible(format!("every cost in row {i} is infinite")));
    }
    if let Some(j) = (0..m).find(|&j| !col_open[j] && b[j] > 0.0) {
        return Err(Error::Infeasible(format!("every cost in column {j} is infinite")));
    }
    Ok(())
}

/// Tracks convergence bookkeeping shared by all kernels.
struct Progress {
    history: Vec<f64>,
}

impl Progress {
    fn new() -> Self {
        Progress { history: Vec::with_capacity(HISTORY) }
    }

    fn record(&mut self, violation: f64) {
        if self.history.len() == HISTORY {
            self.history.remove(0);
        }
        self.history.push(violation);
    }
}

fn max_abs_diff(pairs: impl Iterator<Item = (f64, f64)>) -> f64 {
    pairs.map(|(x, y)| (x - y).abs()).fold(0.0, |acc, d| if d.is_nan() { f64::NAN } else { acc.max(d) })
}

/// Dense Sinkhorn on the Gibbs kernel. Kernel entries below
/// `cfg.stability_eps` are floored (infinite costs stay at zero).
pub fn solve(cost: ArrayView2<'_, f64>, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, cfg: &SolverConfig) -> Result<TransportPlan> {
    check_problem(&DenseCost(cost), a, b, cfg)?;
    let floor = cfg.stability_eps;
    let kernel = cost.mapv(|c| if c.is_finite() { (-c / cfg.epsilon).exp().max(floor) } else { 0.0 });
    let (n, m) = kernel.dim();
    let mut u = Array1::<f64>::ones(n);
    let mut v = Array1::<f64>::ones(m);
    let mut progress = Progress::new();
    let mut col_violation = 0.0;
    let mut iter = 0;
    let mut converged = false;
    let mut violation: f64;
    loop {
        let kv = kernel.dot(&v);
        if iter > 0 {
            let row_violation = max_abs_diff(u.iter().zip(&kv).map(|(ui, k)| ui * k).zip(a.iter().copied()));
            violation = row_violation.max(col_violation);
            if !violation.is_finite() {
                return Err(Error::NumericalFailure {
                    iteration: iter,
                    detail: "non-finite marginal violation".into(),
                });
            }
            progress.record(violation);
            if violation <= cfg.tol {
                converged = true;
                break;
            }
            if iter >= cfg.max_iters {
                break;
            }
        }
        u = &a / &kv;
        let ktu = kernel.t().dot(&u);
        v = &b / &ktu;
        col_violation = max_abs_diff(v.iter().zip(&ktu).map(|(vj, k)| vj * k).zip(b.iter().copied()));
        iter += 1;
        if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NumericalFailure {
                iteration: iter,
                detail: "scaling vector overflowed or became NaN (kernel underflow?)".into(),
            });
        }
    }
    let plan = Array2::from_shape_fn((n, m), |(i, j)| u[i] * kernel[[i, j]] * v[j]);
    Ok(TransportPlan {
        plan,
        row_marginal: a.to_owned(),
        col_marginal: b.to_owned(),
        converged,
        final_violation: violation,
        iterations_used: iter,
        recent_violations: progress.history,
    })
}

/// Log-domain Sinkhorn. Immune to kernel underflow.
pub fn solve_log_domain(cost: ArrayView2<'_, f64>, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, cfg: &SolverConfig) -> Result<TransportPlan> {
    let panel = cost.ncols().max(1);
    let cfg = SolverConfig {
        block_size: panel,
        ..cfg.clone()
    };
    log_domain_panels(&DenseCost(cost), a, b, &cfg)
}

/// Log-domain Sinkhorn over `n x block_size` cost panels from `oracle`.
/// With `block_size >= m` the arithmetic is identical to [`solve_log_domain`].
pub fn solve_streaming(oracle: &dyn CostOracle, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, cfg: &SolverConfig) -> Result<TransportPlan> {
    log_domain_panels(oracle, a, b, cfg)
}

/// Dispatches on `cfg.mode`.
pub fn solve_with_mode(cost: ArrayView2<'_, f64>, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, cfg: &SolverConfig) -> Result<TransportPlan> {
    match cfg.mode {
        SolverMode::Dense => solve(cost, a, b, cfg),
        SolverMode::LogDomain => solve_log_domain(cost, a, b, cfg),
        SolverMode::Streaming => solve_streaming(&DenseCost(cost), a, b, cfg),
    }
}

/// Running log-sum-exp: `max + ln(sum)` with `sum` relative to `max`.
#[derive(Clone, Copy)]
struct Lse {
    max: f64,
    sum: f64,
}

impl Lse {
    const EMPTY: Lse = Lse {
        max: f64::NEG_INFINITY,
        sum: 0.0,
    };

    fn merge(self, other: Lse) -> Lse {
        if other.max == f64::NEG_INFINITY {
            return self;
        }
        if self.max == f64::NEG_INFINITY {
            return other;
        }
        let max = self.max.max(other.max);
        Lse {
            max,
            sum: self.sum * (self.max - max).exp() + other.sum * (other.max - max).exp(),
        }
    }

    fn value(self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }

    fn of(values: impl Iterator<Item = f64> + Clone) -> Lse {
        let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Lse::EMPTY;
        }
        Lse {
            max,
            sum: values.map(|x| (x - max).exp()).sum(),
        }
    }
}

fn panels(m: usize, width: usize) -> impl Iterator<Item = Range<usize>> {
    (0..m).step_by(width).map(move |start| start..(start + width).min(m))
}

fn log_domain_panels(oracle: &dyn CostOracle, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, cfg: &SolverConfig) -> Result<TransportPlan> {
    check_problem(oracle, a, b, cfg)?;
    let (n, m) = oracle.dims();
    let inv_eps = 1.0 / cfg.epsilon;
    let log_a = a.mapv(f64::ln);
    let log_b = b.mapv(f64::ln);
    // log u and log v
    let mut log_u = Array1::<f64>::zeros(n);
    let mut log_v = Array1::<f64>::zeros(m);
    let mut progress = Progress::new();
    let mut col_violation = 0.0;
    let mut iter = 0;
    let mut converged = false;
    let mut violation: f64;

    loop {
        // row_lse[i] = LSE_j(log_v[j] - C[i, j] / eps) = ln (K v)_i
        let mut row_lse = vec![Lse::EMPTY; n];
        for cols in panels(m, cfg.block_size) {
            let tile = oracle.tile(0..n, cols.clone());
            let lv = log_v.slice(s![cols]);
            for (acc, row) in row_lse.iter_mut().zip(tile.rows()) {
                let part = Lse::of(row.iter().zip(lv.iter()).map(|(&c, &g)| g - c * inv_eps));
                *acc = acc.merge(part);
            }
        }
        let row_lse: Vec<f64> = row_lse.into_iter().map(Lse::value).collect();
        if iter > 0 {
            let row_violation = max_abs_diff(
                log_u
                    .iter()
                    .zip(&row_lse)
                    .map(|(lu, lk)| (lu + lk).exp())
                    .zip(a.iter().copied()),
            );
            violation = row_violation.max(col_violation);
            if !violation.is_finite() {
                return Err(Error::NumericalFailure {
                    iteration: iter,
                    detail: "non-finite marginal violation".into(),
                });
            }
            progress.record(violation);
            if violation <= cfg.tol {
                converged = true;
                break;
            }
            if iter >= cfg.max_iters {
                break;
            }
        }
        for i in 0..n {
            log_u[i] = log_a[i] - row_lse[i];
        }
        // col_lse[j] = LSE_i(log_u[i] - C[i, j] / eps) = ln (K^T u)_j
        let mut col_lse = Array1::<f64>::zeros(m);
        for cols in panels(m, cfg.block_size) {
            let tile = oracle.tile(0..n, cols.clone());
            for (k, column) in tile.columns().into_iter().enumerate() {
                col_lse[cols.start + k] =
                    Lse::of(column.iter().zip(log_u.iter()).map(|(&c, &f)| f - c * inv_eps)).value();
            }
        }
        for j in 0..m {
            log_v[j] = log_b[j] - col_lse[j];
        }
        col_violation = max_abs_diff(
            log_v
                .iter()
                .zip(&col_lse)
                .map(|(lv, lk)| (lv + lk).exp())
                .zip(b.iter().copied()),
        );
        iter += 1;
        if log_u.iter().chain(log_v.iter()).any(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(Error::NumericalFailure {
                iteration: iter,
                detail: "log-scaling became NaN or infinite".into(),
            });
        }
    }

    let mut plan = Array2::<f64>::zeros((n, m));
    for cols in panels(m, cfg.block_size) {
        let tile = oracle.tile(0..n, cols.clone());
        let mut out = plan.slice_mut(s![.., cols.clone()]);
        for ((i, j), &c) in tile.indexed_iter() {
            out[[i, j]] = (log_u[i] + log_v[cols.start + j] - c * inv_eps).exp();
        }
    }
    Ok(TransportPlan {
        plan,
        row_marginal: a.to_owned(),
        col_marginal: b.to_owned(),
        converged,
        final_violation: violation,
        iterations_used: iter,
        recent_violations: progress.history,
    })
}

/// `<C, Q> - eps * H(Q)` with `H(Q) = -sum Q (log Q - 1)` and `0 log 0 = 0`.
pub fn transport_objective(cost: ArrayView2<'_, f64>, q: ArrayView2<'_, f64>, epsilon: f64) -> Result<f64> {
    if cost.dim() != q.dim() {
        return Err(Error::Validation(format!(
            "cost {:?} and plan {:?} differ in shape",
            cost.dim(),
            q.dim()
        )));
    }
    if q.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::Validation("plan has a negative or NaN entry".into()));
    }
    let mut linear = 0.0;
    let mut neg_entropy = 0.0;
    for (&c, &x) in cost.iter().zip(q.iter()) {
        if x > 0.0 {
            linear += c * x;
            neg_entropy += x * (x.ln() - 1.0);
        }
    }
    if epsilon == 0.0 {
        return Ok(linear);
    }
    Ok(linear + epsilon * neg_entropy)
}
