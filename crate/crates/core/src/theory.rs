//! Executable checks of the transport identities and inequalities the
//! method relies on.
//!
//! Deterministic statements are checked exactly on random instances.
//! Statements about expectations over random batches are estimated by
//! Monte Carlo and accepted within three standard errors. Batches in the
//! Monte Carlo checks are drawn i.i.d. uniformly with replacement.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TdmError};
use crate::inn::{TransformStack, DEFAULT_CLAMP};
use crate::ot::{all_permutation_costs, brute_force_ot, exact_ot_uniform, ot_grad_pair, pairwise_sq_cost, w22_uniform};
use crate::rng::{seeded_rng, streams};

pub const EXACT_TOL: f64 = 1e-9;
pub const SE_SLACK: f64 = 3.0;
pub const FD_STEP: f64 = 1e-6;
/// Gradient coordinates smaller than this are not compared.
pub const GRAD_FLOOR: f64 = 1e-8;

/// Smallest gradient magnitude a central difference of step [`FD_STEP`] can
/// resolve to relative accuracy `tol` for a loss of size `loss`.
pub fn fd_resolution(loss: f64, tol: f64) -> f64 {
    f64::EPSILON * loss.abs().max(1.0) / (FD_STEP * tol)
}
/// Relative gap between the best and second-best matching below which an
/// instance counts as a tie.
pub const TIE_GAP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    pub violations: usize,
    /// Largest observed excess over the bound (or error, for equalities);
    /// negative when every instance holds with room to spare.
    pub worst_gap: f64,
    /// Instances skipped as degenerate.
    #[serde(default)]
    pub skipped: usize,
    pub passed: bool,
}

impl CheckReport {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            instances: 0,
            violations: 0,
            worst_gap: f64::NEG_INFINITY,
            skipped: 0,
            passed: true,
        }
    }

    /// Records one instance whose `gap` must not exceed `tol`.
    fn record(&mut self, gap: f64, tol: f64) {
        self.instances += 1;
        // a NaN gap is a violation
        if !(gap <= tol) {
            self.violations += 1;
        }
        self.worst_gap = if gap.is_nan() { gap } else { self.worst_gap.max(gap) };
        self.passed = self.violations == 0;
    }

    fn merge(&mut self, other: CheckReport) {
        self.instances += other.instances;
        self.violations += other.violations;
        self.skipped += other.skipped;
        self.worst_gap = self.worst_gap.max(other.worst_gap);
        self.passed = self.violations == 0;
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serialises")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckName {
    Lemma1,
    Union,
    Prop4,
    Prop2Prop3,
    Gradients,
}

impl CheckName {
    pub const ALL: [CheckName; 5] = [Self::Lemma1, Self::Union, Self::Prop4, Self::Prop2Prop3, Self::Gradients];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lemma1 => "lemma1",
            Self::Union => "union",
            Self::Prop4 => "prop4",
            Self::Prop2Prop3 => "prop2_prop3",
            Self::Gradients => "gradients",
        }
    }

    pub fn default_trials(self) -> usize {
        match self {
            Self::Lemma1 | Self::Union => 100,
            Self::Prop4 | Self::Prop2Prop3 => 2000,
            Self::Gradients => 20,
        }
    }
}

impl fmt::Display for CheckName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CheckName {
    type Err = TdmError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| TdmError::InvalidArgument(format!("unknown check '{s}'")))
    }
}

/// Runs one check with its own stream of `seed`.
pub fn run_check(name: CheckName, trials: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = seeded_rng(seed, streams::CHECKS);
    match name {
        CheckName::Lemma1 => check_lemma1(trials, &mut rng),
        CheckName::Union => check_union_lemma(trials, &mut rng),
        CheckName::Prop4 => check_prop4(trials, &mut rng),
        CheckName::Prop2Prop3 => check_prop2_prop3(trials, &mut rng),
        CheckName::Gradients => check_gradients_random(trials, &mut rng),
    }
}

fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

fn pick<R: Rng + ?Sized, T: Copy>(items: &[T], rng: &mut R) -> T {
    items[rng.random_range(0..items.len())]
}

fn exact_w22(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    Ok(exact_ot_uniform(&pairwise_sq_cost(a, b)?)?.distance)
}

/// Assignment solver against permutation enumeration; `B` in `2..=6`,
/// `D` in `{1, 2, 5}`.
pub fn check_lemma1<R: Rng + ?Sized>(trials: usize, rng: &mut R) -> Result<CheckReport> {
    let mut report = CheckReport::new("lemma1");
    for _ in 0..trials {
        let b = rng.random_range(2..=6);
        let d = pick(&[1, 2, 5], rng);
        let cost = pairwise_sq_cost(gaussian(b, d, rng).view(), gaussian(b, d, rng).view())?;
        let exact = exact_ot_uniform(&cost)?.distance;
        let brute = brute_force_ot(&cost)?.distance;
        report.record((exact - brute).abs(), EXACT_TOL);
    }
    Ok(report)
}

fn stack_rows(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("equal widths")
}

/// `(B + B') W(X1 + X3, X2 + X4) <= B W(X1, X2) + B' W(X3, X4)` on random
/// multisets with `B, B' <= 5`.
pub fn check_union_lemma<R: Rng + ?Sized>(trials: usize, rng: &mut R) -> Result<CheckReport> {
    let mut report = CheckReport::new("union");
    for _ in 0..trials {
        let b = rng.random_range(1..=5);
        let b2 = rng.random_range(1..=5);
        let d = rng.random_range(1..=3);
        let (x1, x2) = (gaussian(b, d, rng), gaussian(b, d, rng));
        let (x3, x4) = (gaussian(b2, d, rng), gaussian(b2, d, rng));
        let lhs = (b + b2) as f64 * exact_w22(stack_rows(&x1, &x3).view(), stack_rows(&x2, &x4).view())?;
        let rhs = b as f64 * exact_w22(x1.view(), x2.view())? + b2 as f64 * exact_w22(x3.view(), x4.view())?;
        report.record(lhs - rhs, EXACT_TOL);
    }
    Ok(report)
}

fn sample_with_replacement<R: Rng + ?Sized>(data: &Array2<f64>, b: usize, rng: &mut R) -> Array2<f64> {
    let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..data.nrows())).collect();
    data.select(Axis(0), &idx)
}

/// Sample mean and standard error of the mean.
fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Mean minibatch loss over `draws` independent batch pairs of size `b`.
pub fn minibatch_losses<R: Rng + ?Sized>(data: &Array2<f64>, b: usize, draws: usize, rng: &mut R) -> Result<Vec<f64>> {
    (0..draws)
        .map(|_| {
            let x1 = sample_with_replacement(data, b, rng);
            let x2 = sample_with_replacement(data, b, rng);
            exact_w22(x1.view(), x2.view())
        })
        .collect()
}

/// (a) singleton measures: the loss equals the squared distance exactly;
/// (b) on a fixed 64-row dataset the expected loss at batch size `2B` does
/// not exceed the one at `B`, for `B` in `{2, 4, 8}`, using `draws` batch
/// pairs per size.
pub fn check_prop4<R: Rng + ?Sized>(draws: usize, rng: &mut R) -> Result<CheckReport> {
    let mut report = CheckReport::new("prop4");
    if draws == 0 {
        return Ok(report);
    }
    for _ in 0..draws.min(100) {
        let d = rng.random_range(1..=4);
        let (p, q) = (gaussian(1, d, rng), gaussian(1, d, rng));
        let direct: f64 = p.iter().zip(q.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        report.record((exact_w22(p.view(), q.view())? - direct).abs(), 0.0);
    }
    let data = gaussian(64, 2, rng);
    for b in [2, 4, 8] {
        let (small, se_small) = mean_se(&minibatch_losses(&data, b, draws, rng)?);
        let (large, se_large) = mean_se(&minibatch_losses(&data, 2 * b, draws, rng)?);
        let slack = SE_SLACK * se_small.hypot(se_large);
        report.record(large - small - slack, 0.0);
    }
    Ok(report)
}

/// On a fixed 40-row dataset and a fixed random two-block stack `f`, with
/// batches of 4:
/// `E W(f X1, f X2) >= E W(f X1, f X)` and `E W(f X1, f X2) <= 4 E W(f X1, f X)`,
/// each within three standard errors of the paired differences.
pub fn check_prop2_prop3<R: Rng + ?Sized>(draws: usize, rng: &mut R) -> Result<CheckReport> {
    let mut report = CheckReport::new("prop2_prop3");
    if draws == 0 {
        return Ok(report);
    }
    let data = gaussian(40, 2, rng);
    let stack = TransformStack::init(2, 2, 2, DEFAULT_CLAMP, 1.0, rng)?;
    let (fx, _) = stack.forward(data.view())?;
    let mut lower = Vec::with_capacity(draws);
    let mut upper = Vec::with_capacity(draws);
    for _ in 0..draws {
        let z1 = sample_with_replacement(&fx, 4, rng);
        let z2 = sample_with_replacement(&fx, 4, rng);
        let pair = exact_w22(z1.view(), z2.view())?;
        let c1 = w22_uniform(z1.view(), fx.view())?;
        let c2 = w22_uniform(z2.view(), fx.view())?;
        // E[c1] = E[c2], so both differences have the stated expectations
        lower.push(c1 - pair);
        upper.push(pair - 2.0 * (c1 + c2));
    }
    for diffs in [lower, upper] {
        let (mean, se) = mean_se(&diffs);
        report.record(mean - SE_SLACK * se, 0.0);
    }
    Ok(report)
}

/// Loss `W(f(x1), f(x2))` with the exact solver.
fn pipeline_loss(stack: &TransformStack, x1: ArrayView2<f64>, x2: ArrayView2<f64>) -> Result<f64> {
    let (z1, _) = stack.forward(x1)?;
    let (z2, _) = stack.forward(x2)?;
    exact_w22(z1.view(), z2.view())
}

/// Analytic gradients of the loss with the plan fixed, for the stack
/// parameters followed by `x1` and `x2` in row-major order.
pub fn pipeline_gradient(stack: &TransformStack, x1: ArrayView2<f64>, x2: ArrayView2<f64>) -> Result<Vec<f64>> {
    let (z1, c1) = stack.forward(x1)?;
    let (z2, c2) = stack.forward(x2)?;
    let ot = exact_ot_uniform(&pairwise_sq_cost(z1.view(), z2.view())?)?;
    let (dz1, dz2) = ot_grad_pair(&ot.plan, z1.view(), z2.view())?;
    let (dx1, g1) = stack.backward(&c1, dz1.view())?;
    let (dx2, g2) = stack.backward(&c2, dz2.view())?;
    let mut grad = g1.flatten();
    for (a, b) in grad.iter_mut().zip(g2.flatten()) {
        *a += b;
    }
    grad.extend(dx1.iter());
    grad.extend(dx2.iter());
    Ok(grad)
}

/// True when the two cheapest matchings of `f(x1)` to `f(x2)` are within
/// [`TIE_GAP`] (relative) of each other.
pub fn is_degenerate(stack: &TransformStack, x1: ArrayView2<f64>, x2: ArrayView2<f64>) -> Result<bool> {
    let (z1, _) = stack.forward(x1)?;
    let (z2, _) = stack.forward(x2)?;
    let mut costs: Vec<f64> = all_permutation_costs(&pairwise_sq_cost(z1.view(), z2.view())?)?
        .into_iter()
        .map(|(_, c)| c)
        .collect();
    if costs.len() < 2 {
        return Ok(false);
    }
    costs.sort_by(f64::total_cmp);
    Ok(costs[1] - costs[0] <= TIE_GAP * costs[0].abs().max(1.0))
}

/// Compares [`pipeline_gradient`] with central differences of step
/// [`FD_STEP`] that re-solve the transport problem at every evaluation.
/// Coordinates with analytic magnitude at most [`GRAD_FLOOR`] or below
/// [`fd_resolution`] are not compared. Tied instances are reported as
/// skipped.
pub fn check_gradients(stack: &TransformStack, x1: ArrayView2<f64>, x2: ArrayView2<f64>, tol: f64) -> Result<CheckReport> {
    let mut report = CheckReport::new("gradients");
    if x1.dim() != x2.dim() {
        return Err(TdmError::Shape {
            expected: x1.dim(),
            found: x2.dim(),
        });
    }
    if is_degenerate(stack, x1, x2)? {
        report.skipped = 1;
        return Ok(report);
    }
    let analytic = pipeline_gradient(stack, x1, x2)?;
    let floor = GRAD_FLOOR.max(fd_resolution(pipeline_loss(stack, x1, x2)?, tol));
    let n_theta = stack.n_params();
    let theta = stack.flatten();
    let mut probe = stack.clone();
    let mut inputs = [x1.to_owned(), x2.to_owned()];
    let mut worst = 0.0f64;
    for (k, &g) in analytic.iter().enumerate() {
        if g.abs() <= floor {
            continue;
        }
        let mut eval = |delta: f64| -> Result<f64> {
            if k < n_theta {
                let mut t = theta.clone();
                t[k] += delta;
                probe.assign_flat(&t)?;
                return pipeline_loss(&probe, x1, x2);
            }
            let (which, j) = ((k - n_theta) / x1.len(), (k - n_theta) % x1.len());
            let cell = &mut inputs[which].as_slice_mut().expect("standard layout")[j];
            let orig = *cell;
            *cell += delta;
            let loss = pipeline_loss(stack, inputs[0].view(), inputs[1].view());
            inputs[which].as_slice_mut().expect("standard layout")[j] = orig;
            loss
        };
        let fd = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
        worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()));
    }
    report.record(worst, tol);
    Ok(report)
}

/// [`check_gradients`] on `trials` non-degenerate instances with random
/// two-block stacks, `B = 4`, `D = 5`, relative tolerance `1e-4`.
pub fn check_gradients_random<R: Rng + ?Sized>(trials: usize, rng: &mut R) -> Result<CheckReport> {
    let mut report = CheckReport::new("gradients");
    let mut attempts = 0;
    while report.instances < trials {
        attempts += 1;
        if attempts > 10 * trials.max(1) {
            return Err(TdmError::Infeasible("too many degenerate gradient instances".into()));
        }
        let stack = TransformStack::init(5, 2, 2, DEFAULT_CLAMP, 1.0, rng)?;
        let (x1, x2) = (gaussian(4, 5, rng), gaussian(4, 5, rng));
        report.merge(check_gradients(&stack, x1.view(), x2.view(), 1e-4)?);
    }
    Ok(report)
}
