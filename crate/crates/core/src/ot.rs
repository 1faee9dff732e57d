//! Optimal transport between empirical measures under the squared
//! Euclidean cost.
//!
//! Two uniform measures with the same number of atoms always admit an
//! optimal plan that is a scaled permutation matrix, so the exact solver is
//! a dense linear assignment (shortest augmenting paths with dual
//! potentials). The entropic solver runs Sinkhorn scaling in the log domain
//! and rounds its plan onto the transport polytope before reporting the
//! unregularised cost.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TdmError};

/// Largest problem size accepted by [`brute_force_ot`].
pub const BRUTE_FORCE_MAX: usize = 8;

/// Lower bound applied by [`default_epsilon`].
pub const EPSILON_FLOOR: f64 = 1e-6;

/// Rows used by [`default_epsilon`] before it starts subsampling.
pub const EPSILON_MAX_ROWS: usize = 1000;

const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(Array2<f64>);

impl CostMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if let Some(v) = entries.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(TdmError::InvalidArgument(format!(
                "cost entries must be finite and nonnegative, found {v}"
            )));
        }
        Ok(Self(entries))
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn median(&self) -> f64 {
        median(self.0.iter().copied().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Solver {
    ExactAssignment,
    Sinkhorn,
    BruteForce,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub entries: Array2<f64>,
    pub row_marginal: Array1<f64>,
    pub col_marginal: Array1<f64>,
}

impl TransportPlan {
    fn from_assignment(assignment: &[usize]) -> Self {
        let n = assignment.len();
        let w = 1.0 / n as f64;
        let mut entries = Array2::zeros((n, n));
        for (i, &j) in assignment.iter().enumerate() {
            entries[[i, j]] = w;
        }
        Self {
            entries,
            row_marginal: Array1::from_elem(n, w),
            col_marginal: Array1::from_elem(n, w),
        }
    }

    /// Largest absolute deviation of the plan's row or column sums from the
    /// declared marginals.
    pub fn marginal_violation(&self) -> f64 {
        let rows = self.entries.sum_axis(Axis(1));
        let cols = self.entries.sum_axis(Axis(0));
        rows.iter()
            .zip(self.row_marginal.iter())
            .chain(cols.iter().zip(self.col_marginal.iter()))
            .map(|(s, m)| (s - m).abs())
            .fold(0.0, f64::max)
    }

    pub fn cost(&self, cost: &CostMatrix) -> f64 {
        (&self.entries * cost.entries()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OtResult {
    pub distance: f64,
    pub plan: TransportPlan,
    pub solver: Solver,
    /// Sinkhorn iterations performed; zero for the exact solvers.
    pub iterations: usize,
    /// Optimal matching `i -> assignment[i]` for the permutation solvers.
    pub assignment: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl SinkhornConfig {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            max_iters: 5000,
            tol: 1e-6,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(TdmError::InvalidArgument(format!(
                "sinkhorn epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.max_iters == 0 || !(self.tol > 0.0) {
            return Err(TdmError::InvalidArgument(
                "sinkhorn needs max_iters >= 1 and tol > 0".into(),
            ));
        }
        Ok(())
    }
}

/// `G[i, j] = |a_i - c_j|^2`, clamped at zero.
pub fn pairwise_sq_cost(a: ArrayView2<f64>, c: ArrayView2<f64>) -> Result<CostMatrix> {
    if a.ncols() != c.ncols() {
        return Err(TdmError::Shape {
            expected: (c.nrows(), a.ncols()),
            found: c.dim(),
        });
    }
    let mut g = Array2::zeros((a.nrows(), c.nrows()));
    for (ra, mut out) in a.rows().into_iter().zip(g.rows_mut()) {
        for (rc, o) in c.rows().into_iter().zip(out.iter_mut()) {
            *o = ra
                .iter()
                .zip(rc.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .max(0.0);
        }
    }
    CostMatrix::new(g)
}

fn require_square(cost: &CostMatrix) -> Result<usize> {
    let (n, m) = cost.dim();
    if n != m {
        return Err(TdmError::InvalidArgument(format!(
            "uniform exact OT needs a square cost matrix, got {n}x{m}"
        )));
    }
    if n == 0 {
        return Err(TdmError::Empty);
    }
    Ok(n)
}

fn permutation_result(cost: &CostMatrix, assignment: Vec<usize>, solver: Solver) -> OtResult {
    let n = assignment.len() as f64;
    let total: f64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost.entries()[[i, j]])
        .sum();
    OtResult {
        distance: total / n,
        plan: TransportPlan::from_assignment(&assignment),
        solver,
        iterations: 0,
        assignment: Some(assignment),
    }
}

/// Exact OT between two uniform measures of equal size, solved as a linear
/// assignment problem.
pub fn exact_ot_uniform(cost: &CostMatrix) -> Result<OtResult> {
    require_square(cost)?;
    let assignment = solve_assignment(cost.entries().view());
    Ok(permutation_result(cost, assignment, Solver::ExactAssignment))
}

/// Minimum-cost perfect matching on a square matrix via shortest augmenting
/// paths with row/column potentials. Returns `assignment[row] = col`.
///
/// Rows are inserted in index order and ties resolve to the lowest column
/// index, so the result is deterministic.
pub fn solve_assignment(cost: ArrayView2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    debug_assert_eq!(n, cost.ncols());
    // 1-based with a virtual column 0
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut min_slack = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];

    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0usize;
        min_slack.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            let cost_row = cost.row(i0 - 1);
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost_row[j - 1] - u[i0] - v[j];
                if reduced < min_slack[j] {
                    min_slack[j] = reduced;
                    way[j] = j0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[col_owner[j] - 1] = j - 1;
    }
    assignment
}

/// Exhaustive search over all permutations. Only for `n <= 8`.
pub fn brute_force_ot(cost: &CostMatrix) -> Result<OtResult> {
    let n = require_square(cost)?;
    if n > BRUTE_FORCE_MAX {
        return Err(TdmError::InvalidArgument(format!(
            "brute force OT limited to {BRUTE_FORCE_MAX} points, got {n}"
        )));
    }
    let costs = all_permutation_costs(cost)?;
    let (best, _) = costs
        .into_iter()
        .fold(None::<(Vec<usize>, f64)>, |acc, (p, c)| match acc {
            Some((bp, bc)) if bc <= c => Some((bp, bc)),
            _ => Some((p, c)),
        })
        .expect("at least one permutation");
    Ok(permutation_result(cost, best, Solver::BruteForce))
}

/// Every permutation of `0..n` with its summed cost `sum_i G[i, p(i)]`,
/// in lexicographic order.
pub fn all_permutation_costs(cost: &CostMatrix) -> Result<Vec<(Vec<usize>, f64)>> {
    let n = require_square(cost)?;
    if n > BRUTE_FORCE_MAX {
        return Err(TdmError::InvalidArgument(format!(
            "permutation enumeration limited to {BRUTE_FORCE_MAX} points, got {n}"
        )));
    }
    let mut out = Vec::new();
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        let c = perm
            .iter()
            .enumerate()
            .map(|(i, &j)| cost.entries()[[i, j]])
            .sum();
        out.push((perm.clone(), c));
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(out)
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

fn check_simplex(w: &Array1<f64>, name: &str) -> Result<()> {
    let sum = w.sum();
    if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(TdmError::InvalidArgument(format!(
            "marginal {name} is not a probability vector (sum {sum})"
        )));
    }
    Ok(())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Entropy-regularised OT by log-domain Sinkhorn scaling.
///
/// Iterates until the L1 row-marginal violation drops below `cfg.tol` or
/// `cfg.max_iters` is reached, then rounds the plan onto the set of
/// couplings with marginals `a` and `b`. The reported distance is the
/// transport cost of that plan, without the entropy term.
pub fn sinkhorn(
    cost: &CostMatrix,
    a: &Array1<f64>,
    b: &Array1<f64>,
    cfg: &SinkhornConfig,
) -> Result<OtResult> {
    cfg.validate()?;
    let (n, m) = cost.dim();
    if a.len() != n || b.len() != m {
        return Err(TdmError::Shape {
            expected: (n, m),
            found: (a.len(), b.len()),
        });
    }
    check_simplex(a, "a")?;
    check_simplex(b, "b")?;

    let g_mat = cost.entries();
    let eps = cfg.epsilon;
    let log_a = a.mapv(f64::ln);
    let log_b = b.mapv(f64::ln);
    let mut f = Array1::<f64>::zeros(n);
    let mut g = Array1::<f64>::zeros(m);
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        iterations += 1;
        for i in 0..n {
            let row = g_mat.row(i);
            let lse = log_sum_exp((0..m).map(|j| (g[j] - row[j]) / eps));
            f[i] = eps * (log_a[i] - lse);
        }
        for j in 0..m {
            let col = g_mat.column(j);
            let lse = log_sum_exp((0..n).map(|i| (f[i] - col[i]) / eps));
            g[j] = eps * (log_b[j] - lse);
        }
        let violation: f64 = (0..n)
            .map(|i| {
                let row = g_mat.row(i);
                let s: f64 = (0..m).map(|j| ((f[i] + g[j] - row[j]) / eps).exp()).sum();
                (s - a[i]).abs()
            })
            .sum();
        if !violation.is_finite() {
            return Err(TdmError::NonFinite(format!(
                "sinkhorn marginal violation at iteration {iterations}"
            )));
        }
        if violation < cfg.tol {
            break;
        }
    }

    let mut plan = Array2::zeros((n, m));
    for ((i, j), p) in plan.indexed_iter_mut() {
        *p = ((f[i] + g[j] - g_mat[[i, j]]) / eps).exp();
    }
    let plan = round_to_polytope(plan, a, b);
    let plan = TransportPlan {
        entries: plan,
        row_marginal: a.clone(),
        col_marginal: b.clone(),
    };
    Ok(OtResult {
        distance: plan.cost(cost),
        plan,
        solver: Solver::Sinkhorn,
        iterations,
        assignment: None,
    })
}

/// Projects a nonnegative matrix onto the couplings of `a` and `b`: scale
/// down overfull rows, then overfull columns, then spread the remaining
/// deficit as a rank-one correction.
fn round_to_polytope(mut p: Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let rows = p.sum_axis(Axis(1));
    for (i, mut row) in p.axis_iter_mut(Axis(0)).enumerate() {
        if rows[i] > a[i] {
            let s = a[i] / rows[i];
            row.mapv_inplace(|x| x * s);
        }
    }
    let cols = p.sum_axis(Axis(0));
    for (j, mut col) in p.axis_iter_mut(Axis(1)).enumerate() {
        if cols[j] > b[j] {
            let s = b[j] / cols[j];
            col.mapv_inplace(|x| x * s);
        }
    }
    let err_r = (a - &p.sum_axis(Axis(1))).mapv(|x| x.max(0.0));
    let err_c = (b - &p.sum_axis(Axis(0))).mapv(|x| x.max(0.0));
    let total = err_c.sum();
    if total > 0.0 {
        for ((i, j), x) in p.indexed_iter_mut() {
            *x += err_r[i] * err_c[j] / total;
        }
    }
    p
}

/// Uniform-weight Sinkhorn between two point clouds.
pub fn sinkhorn_uniform(cost: &CostMatrix, cfg: &SinkhornConfig) -> Result<OtResult> {
    let (n, m) = cost.dim();
    if n == 0 || m == 0 {
        return Err(TdmError::Empty);
    }
    let a = Array1::from_elem(n, 1.0 / n as f64);
    let b = Array1::from_elem(m, 1.0 / m as f64);
    sinkhorn(cost, &a, &b, cfg)
}

/// Exact squared 2-Wasserstein distance between the uniform empirical
/// measures of `a` (n rows) and `c` (m rows). Unequal sizes are handled by
/// replicating each atom until both clouds have `lcm(n, m)` atoms.
pub fn w22_uniform(a: ArrayView2<f64>, c: ArrayView2<f64>) -> Result<f64> {
    let (n, m) = (a.nrows(), c.nrows());
    if n == 0 || m == 0 {
        return Err(TdmError::Empty);
    }
    if n == m {
        return Ok(exact_ot_uniform(&pairwise_sq_cost(a, c)?)?.distance);
    }
    let l = lcm(n, m);
    if l > 4096 {
        return Err(TdmError::InvalidArgument(format!(
            "replicated problem size {l} too large for exact OT"
        )));
    }
    let cost = pairwise_sq_cost(a, c)?;
    let (ra, rc) = (l / n, l / m);
    let expanded = Array2::from_shape_fn((l, l), |(i, j)| cost.entries()[[i / ra, j / rc]]);
    let assignment = solve_assignment(expanded.view());
    let total: f64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| expanded[[i, j]])
        .sum();
    Ok(total / l as f64)
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

pub(crate) fn median(mut values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Five percent of the median pairwise squared distance between rows,
/// floored at [`EPSILON_FLOOR`]. Above [`EPSILON_MAX_ROWS`] rows an evenly
/// strided subsample is used.
pub fn default_epsilon(values: &Array2<f64>) -> Result<f64> {
    let n = values.nrows();
    if n < 2 {
        return Err(TdmError::InvalidArgument(
            "epsilon rule needs at least two rows".into(),
        ));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(TdmError::InvalidArgument(
            "epsilon rule needs initialised (NaN-free) data".into(),
        ));
    }
    let rows: Vec<usize> = if n <= EPSILON_MAX_ROWS {
        (0..n).collect()
    } else {
        (0..EPSILON_MAX_ROWS)
            .map(|k| k * n / EPSILON_MAX_ROWS)
            .collect()
    };
    let sub = values.select(Axis(0), &rows);
    let cost = pairwise_sq_cost(sub.view(), sub.view())?;
    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            dists.push(cost.entries()[[i, j]]);
        }
    }
    Ok((0.05 * median(dists)).max(EPSILON_FLOOR))
}

/// Gradient of `<P, G(za, zb)>` with respect to `za`, holding `P` fixed:
/// row `i` is `2 * sum_j P[i, j] (za[i] - zb[j])`.
pub fn ot_grad_supports(
    plan: &TransportPlan,
    za: ArrayView2<f64>,
    zb: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    grad_side(plan.entries.view(), za, zb)
}

/// Gradients with respect to both supports.
pub fn ot_grad_pair(
    plan: &TransportPlan,
    za: ArrayView2<f64>,
    zb: ArrayView2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    Ok((
        grad_side(plan.entries.view(), za, zb)?,
        grad_side(plan.entries.t(), zb, za)?,
    ))
}

fn grad_side(p: ArrayView2<f64>, za: ArrayView2<f64>, zb: ArrayView2<f64>) -> Result<Array2<f64>> {
    if p.dim() != (za.nrows(), zb.nrows()) || za.ncols() != zb.ncols() {
        return Err(TdmError::Shape {
            expected: p.dim(),
            found: (za.nrows(), zb.nrows()),
        });
    }
    let mass = p.sum_axis(Axis(1));
    let mut grad = p.dot(&zb);
    for ((i, j), g) in grad.indexed_iter_mut() {
        *g = 2.0 * (mass[i] * za[[i, j]] - *g);
    }
    Ok(grad)
}
