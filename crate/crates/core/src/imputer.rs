//! Joint optimisation of missing entries and the invertible transform.
//!
//! Each iteration draws two random batches, maps both through the
//! transform, solves OT between the mapped batches under the squared
//! Euclidean cost, and backpropagates the plan-fixed gradient to the
//! transform parameters and to the missing cells of every sampled row.
//! With [`Mode::BaselineIdentity`] the transform is skipped entirely and the
//! procedure is the plain minibatch-OT imputer.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derive_mask, destandardize, noisy_mean_init, standardize, Dataset, MissingMask, StandardizationParams};
use crate::error::{Result, TdmError};
use crate::inn::{StackCheckpoint, TransformStack, DEFAULT_CLAMP};
use crate::metrics;
use crate::optim::{RmsProp, DEFAULT_LR};
use crate::ot::{default_epsilon, exact_ot_uniform, ot_grad_pair, pairwise_sq_cost, sinkhorn_uniform, SinkhornConfig};
use crate::rng::{seeded_rng, streams, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Tdm,
    BaselineIdentity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SolverChoice {
    ExactAssignment,
    /// `epsilon: None` resolves to five percent of the median pairwise
    /// squared distance of the initialised data.
    Sinkhorn {
        epsilon: Option<f64>,
        max_iters: usize,
        tol: f64,
    },
}

impl SolverChoice {
    pub fn sinkhorn(epsilon: Option<f64>) -> Self {
        let d = SinkhornConfig::new(1.0);
        SolverChoice::Sinkhorn {
            epsilon,
            max_iters: d.max_iters,
            tol: d.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f64,
    /// Number of coupling blocks.
    pub blocks: usize,
    /// Subnet width multiplier (hidden width is `hidden_factor * D`).
    pub hidden_factor: usize,
    pub clamp: f64,
    pub solver: SolverChoice,
    pub mode: Mode,
    pub seed: u64,
    /// Observer/metric cadence in iterations; zero disables it.
    pub checkpoint_every: usize,
    /// When false the transform stays at its initial value.
    pub train_transform: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            iterations: 10_000,
            lr: DEFAULT_LR,
            blocks: 3,
            hidden_factor: 2,
            clamp: DEFAULT_CLAMP,
            solver: SolverChoice::ExactAssignment,
            mode: Mode::Tdm,
            seed: 0,
            checkpoint_every: 0,
            train_transform: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_cols: usize) -> Result<()> {
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(TdmError::InvalidArgument(
                "batch size and iteration count must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(TdmError::InvalidArgument(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.mode == Mode::Tdm && n_cols < 2 {
            return Err(TdmError::InvalidArgument(
                "the transformed mode needs at least two features".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricCheckpoint {
    pub iteration: usize,
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub loss_per_iter: Vec<f64>,
    pub metric_checkpoints: Vec<MetricCheckpoint>,
}

/// Largest power of two not exceeding `n / 2`, capped at `requested`.
pub fn effective_batch_size(n: usize, requested: usize) -> Result<usize> {
    if n < 2 {
        return Err(TdmError::InvalidArgument(format!("need at least two rows, got {n}")));
    }
    let half = n / 2;
    let pow = 1usize << (usize::BITS - 1 - half.leading_zeros());
    Ok(requested.min(pow).max(1))
}

/// Two independent batches of `b` distinct row indices each; the batches
/// may overlap.
pub fn sample_batch_pair<R: Rng + ?Sized>(n: usize, b: usize, rng: &mut R) -> Result<(Vec<usize>, Vec<usize>)> {
    if b == 0 || b > n {
        return Err(TdmError::InvalidArgument(format!("batch size {b} must lie in 1..={n}")));
    }
    let first = sample_indices(rng, n, b).into_vec();
    let second = sample_indices(rng, n, b).into_vec();
    Ok((first, second))
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct ImputerState {
    working: Array2<f64>,
    mask: MissingMask,
    /// Position of each missing cell in the imputation vector, row-major.
    missing_cells: Vec<(usize, usize)>,
    cell_slot: Array2<usize>,
    stack: Option<TransformStack>,
    opt_theta: Option<RmsProp>,
    opt_imputed: RmsProp,
    rng: SeededRng,
    iteration: usize,
    batch_size: usize,
    sinkhorn: Option<SinkhornConfig>,
}

const OBSERVED: usize = usize::MAX;

impl ImputerState {
    /// Derives the mask, fills missing cells with noisy column means and
    /// initialises the transform (identity at start) and both optimisers.
    pub fn new(problem: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate(problem.n_cols())?;
        let mask = derive_mask(problem)?;
        let mut init_rng = seeded_rng(cfg.seed, streams::INIT_VALUES);
        let working = noisy_mean_init(problem, &mask, &mut init_rng)?.into_values();

        let missing_cells = mask.missing_cells();
        let mut cell_slot = Array2::from_elem(working.dim(), OBSERVED);
        for (k, &(i, j)) in missing_cells.iter().enumerate() {
            cell_slot[[i, j]] = k;
        }

        let (stack, opt_theta) = match cfg.mode {
            Mode::Tdm => {
                let mut net_rng = seeded_rng(cfg.seed, streams::INIT_NETWORK);
                let stack = TransformStack::init(
                    problem.n_cols(),
                    cfg.blocks,
                    cfg.hidden_factor,
                    cfg.clamp,
                    0.0,
                    &mut net_rng,
                )?;
                let opt = RmsProp::new(stack.n_params(), cfg.lr);
                (Some(stack), Some(opt))
            }
            Mode::BaselineIdentity => (None, None),
        };

        let sinkhorn = match cfg.solver {
            SolverChoice::ExactAssignment => None,
            SolverChoice::Sinkhorn { epsilon, max_iters, tol } => {
                let epsilon = match epsilon {
                    Some(e) => e,
                    None => default_epsilon(&working)?,
                };
                Some(SinkhornConfig { epsilon, max_iters, tol })
            }
        };

        Ok(Self {
            opt_imputed: RmsProp::new(missing_cells.len(), cfg.lr),
            batch_size: effective_batch_size(problem.n_rows(), cfg.batch_size)?,
            working,
            mask,
            missing_cells,
            cell_slot,
            stack,
            opt_theta,
            rng: seeded_rng(cfg.seed, streams::BATCHES),
            iteration: 0,
            sinkhorn,
        })
    }

    pub fn working(&self) -> &Array2<f64> {
        &self.working
    }

    pub fn mask(&self) -> &MissingMask {
        &self.mask
    }

    pub fn stack(&self) -> Option<&TransformStack> {
        self.stack.as_ref()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Resolved entropic regularisation, when Sinkhorn is the solver.
    pub fn epsilon(&self) -> Option<f64> {
        self.sinkhorn.map(|s| s.epsilon)
    }

    /// Current values of the missing cells in row-major order.
    pub fn imputed_values(&self) -> Vec<f64> {
        self.missing_cells.iter().map(|&ij| self.working[ij]).collect()
    }

    pub fn checkpoint(&self) -> ImputerCheckpoint {
        ImputerCheckpoint {
            iteration: self.iteration,
            stack: self.stack.as_ref().map(TransformStack::to_checkpoint),
            imputed: self.working.rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }

    fn solve(&self, z1: ArrayView2<f64>, z2: ArrayView2<f64>) -> Result<crate::ot::OtResult> {
        let cost = pairwise_sq_cost(z1, z2)?;
        match &self.sinkhorn {
            None => exact_ot_uniform(&cost),
            Some(cfg) => sinkhorn_uniform(&cost, cfg),
        }
    }

    /// One iteration; returns the minibatch loss measured before the update.
    pub fn step(&mut self, train_transform: bool) -> Result<f64> {
        let n = self.working.nrows();
        let (idx1, idx2) = sample_batch_pair(n, self.batch_size, &mut self.rng)?;
        let b = self.batch_size;
        let rows: Vec<usize> = idx1.iter().chain(&idx2).copied().collect();
        let x = self.working.select(Axis(0), &rows);

        // both batches go through the transform as one stacked matrix
        let (dx, theta_grad, loss) = match &self.stack {
            Some(stack) => {
                let (z, cache) = stack.forward(x.view())?;
                let (z1, z2) = z.view().split_at(Axis(0), b);
                let ot = self.solve(z1, z2)?;
                let (dz1, dz2) = ot_grad_pair(&ot.plan, z1, z2)?;
                let dz = ndarray::concatenate(Axis(0), &[dz1.view(), dz2.view()]).expect("equal widths");
                let (dx, grad) = stack.backward(&cache, dz.view())?;
                (dx, Some(grad.flatten()), ot.distance)
            }
            None => {
                let (x1, x2) = x.view().split_at(Axis(0), b);
                let ot = self.solve(x1, x2)?;
                let (dx1, dx2) = ot_grad_pair(&ot.plan, x1, x2)?;
                let dx = ndarray::concatenate(Axis(0), &[dx1.view(), dx2.view()]).expect("equal widths");
                (dx, None, ot.distance)
            }
        };
        if !loss.is_finite() {
            return Err(TdmError::NonFinite(format!(
                "loss {loss} at iteration {} (batch size {})",
                self.iteration, self.batch_size
            )));
        }

        if let (Some(grad), true) = (theta_grad, train_transform) {
            let stack = self.stack.as_mut().expect("transform present");
            let opt = self.opt_theta.as_mut().expect("optimiser present");
            let mut params = stack.flatten();
            opt.step(&mut params, &grad, |i| stack.param_path(i))?;
            stack.assign_flat(&params)?;
        }

        if !self.missing_cells.is_empty() {
            let mut grad = vec![0.0; self.missing_cells.len()];
            for (&r, d) in rows.iter().zip(dx.rows()) {
                for (&slot, &g) in self.cell_slot.row(r).iter().zip(d) {
                    if slot != OBSERVED {
                        grad[slot] += g;
                    }
                }
            }
            let mut values = self.imputed_values();
            let cells = &self.missing_cells;
            self.opt_imputed
                .step(&mut values, &grad, |k| format!("imputed cell {:?}", cells[k]))?;
            for (&ij, v) in self.missing_cells.iter().zip(values) {
                self.working[ij] = v;
            }
        }

        self.iteration += 1;
        Ok(loss)
    }
}

/// Serialisable snapshot of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputerCheckpoint {
    pub iteration: usize,
    pub stack: Option<StackCheckpoint>,
    pub imputed: Vec<Vec<f64>>,
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub imputed: Dataset,
    pub stack: Option<TransformStack>,
    pub trace: TrainTrace,
    pub batch_size: usize,
    pub epsilon: Option<f64>,
}

/// One optimisation step of an existing state under `cfg`.
pub fn train_step(state: &mut ImputerState, cfg: &TrainConfig) -> Result<f64> {
    state.step(cfg.train_transform && cfg.mode == Mode::Tdm)
}

/// Runs the full fixed-budget optimisation and returns the last iterate.
pub fn fit(problem: &Dataset, cfg: &TrainConfig) -> Result<FitOutput> {
    fit_with(problem, cfg, None, |_| Ok(()))
}

/// Like [`fit`], additionally recording MAE/RMSE against `truth` and calling
/// `observer` every `cfg.checkpoint_every` iterations. Neither feeds back
/// into training.
pub fn fit_with<F>(problem: &Dataset, cfg: &TrainConfig, truth: Option<&Dataset>, mut observer: F) -> Result<FitOutput>
where
    F: FnMut(&ImputerState) -> Result<()>,
{
    let mut state = ImputerState::new(problem, cfg)?;
    if let Some(t) = truth {
        if t.values().dim() != problem.values().dim() {
            return Err(TdmError::Shape {
                expected: problem.values().dim(),
                found: t.values().dim(),
            });
        }
    }
    let mut trace = TrainTrace {
        loss_per_iter: Vec::with_capacity(cfg.iterations),
        metric_checkpoints: Vec::new(),
    };
    for _ in 0..cfg.iterations {
        let loss = train_step(&mut state, cfg)?;
        trace.loss_per_iter.push(loss);
        let it = state.iteration();
        let due = cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0;
        if due || it == cfg.iterations {
            if let Some(t) = truth.filter(|_| state.mask().missing_count() > 0) {
                let current = problem.replace_values(state.working().clone())?;
                trace.metric_checkpoints.push(MetricCheckpoint {
                    iteration: it,
                    mae: metrics::mae(&current, t, state.mask())?,
                    rmse: metrics::rmse(&current, t, state.mask())?,
                });
            }
        }
        if due {
            observer(&state)?;
        }
    }
    Ok(FitOutput {
        imputed: problem.replace_values(state.working.clone())?,
        batch_size: state.batch_size,
        epsilon: state.epsilon(),
        stack: state.stack,
        trace,
    })
}

/// Result of [`impute`]: the completed data in input units together with
/// the run in standardised units.
#[derive(Debug, Clone)]
pub struct ImputeOutput {
    pub imputed: Dataset,
    pub scaled: FitOutput,
    pub params: StandardizationParams,
}

/// Standardises `problem` with its observed-cell statistics, runs [`fit`]
/// and maps the result back to data units. Observed cells are copied from
/// the input so they are returned bit for bit.
pub fn impute(problem: &Dataset, cfg: &TrainConfig) -> Result<ImputeOutput> {
    impute_with(problem, cfg, |_, _| Ok(()))
}

/// Like [`impute`], calling `observer(iteration, current)` every
/// `cfg.checkpoint_every` iterations with the current completion in data
/// units.
pub fn impute_with<F>(problem: &Dataset, cfg: &TrainConfig, mut observer: F) -> Result<ImputeOutput>
where
    F: FnMut(usize, &Dataset) -> Result<()>,
{
    let (scaled, params) = standardize(problem)?;
    let to_data_units = |values: &Array2<f64>| -> Result<Dataset> {
        let mut out = destandardize(&scaled.replace_values(values.clone())?, &params)?.into_values();
        for (v, &orig) in out.iter_mut().zip(problem.values().iter()) {
            if !orig.is_nan() {
                *v = orig;
            }
        }
        problem.replace_values(out)
    };
    let fitted = fit_with(&scaled, cfg, None, |state| {
        observer(state.iteration(), &to_data_units(state.working())?)
    })?;
    Ok(ImputeOutput {
        imputed: to_data_units(fitted.imputed.values())?,
        scaled: fitted,
        params,
    })
}

/// Per-block transformed views `f_1(X), f_2(f_1(X)), ...` of the current
/// working matrix. Empty in baseline mode.
pub fn impute_transform_view(state: &ImputerState) -> Result<Vec<Array2<f64>>> {
    match state.stack() {
        Some(stack) => stack.forward_views(state.working().view()),
        None => Ok(Vec::new()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn batch_size_rule() {
        assert_eq!(effective_batch_size(10_000, 512).unwrap(), 512);
        assert_eq!(effective_batch_size(210, 512).unwrap(), 64);
        assert_eq!(effective_batch_size(3, 512).unwrap(), 1);
        assert_eq!(effective_batch_size(2, 512).unwrap(), 1);
        assert_eq!(effective_batch_size(500, 64).unwrap(), 64);
        assert!(effective_batch_size(1, 512).is_err());
    }

    #[test]
    fn batch_pairs() {
        let mut rng = seeded_rng(0, 0);
        let (a, b) = sample_batch_pair(6, 6, &mut rng).unwrap();
        let mut sa = a.clone();
        sa.sort_unstable();
        let mut sb = b.clone();
        sb.sort_unstable();
        assert_eq!(sa, (0..6).collect::<Vec<_>>());
        assert_eq!(sb, sa);
        for _ in 0..50 {
            let (a, _) = sample_batch_pair(20, 7, &mut rng).unwrap();
            let mut s = a.clone();
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), 7);
        }
        assert!(sample_batch_pair(3, 4, &mut rng).is_err());
    }

    fn toy() -> Dataset {
        Dataset::new(array![
            [0.0, 1.0],
            [1.0, f64::NAN],
            [2.0, 0.5],
            [f64::NAN, -1.0],
            [0.3, 0.2],
            [-1.0, 1.5],
            [1.2, f64::NAN],
            [0.7, -0.4]
        ])
        .unwrap()
    }

    #[test]
    fn observed_cells_never_change() {
        let data = toy();
        let cfg = TrainConfig {
            batch_size: 4,
            iterations: 50,
            ..TrainConfig::default()
        };
        let out = fit(&data, &cfg).unwrap();
        assert_eq!(out.trace.loss_per_iter.len(), 50);
        for ((i, j), &v) in data.values().indexed_iter() {
            if !v.is_nan() {
                assert_eq!(out.imputed.values()[[i, j]].to_bits(), v.to_bits());
            } else {
                assert!(out.imputed.values()[[i, j]].is_finite());
            }
        }
    }

    #[test]
    fn fully_observed_input_is_returned_unchanged() {
        let data = Dataset::new(array![[0.0, 1.0], [1.0, 2.0], [3.0, -1.0], [0.5, 0.5]]).unwrap();
        let cfg = TrainConfig {
            batch_size: 2,
            iterations: 20,
            ..TrainConfig::default()
        };
        let out = fit(&data, &cfg).unwrap();
        assert_eq!(out.imputed, data);
        // only the transform moved
        let init = TransformStack::init(2, 3, 2, DEFAULT_CLAMP, 0.0, &mut seeded_rng(0, streams::INIT_NETWORK)).unwrap();
        assert_ne!(out.stack.unwrap(), init);
    }

    #[test]
    fn impute_keeps_observed_cells_in_data_units() {
        let data = Dataset::new(toy().values().mapv(|v| 100.0 + 7.0 * v)).unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            iterations: 30,
            ..TrainConfig::default()
        };
        let out = impute(&data, &cfg).unwrap();
        assert!(!out.imputed.has_missing());
        for (a, b) in out.imputed.values().iter().zip(data.values()) {
            if !b.is_nan() {
                assert_eq!(a, b);
            } else {
                assert!((a - 100.0).abs() < 50.0);
            }
        }
    }

    #[test]
    fn baseline_has_no_transform() {
        let cfg = TrainConfig {
            batch_size: 4,
            iterations: 5,
            mode: Mode::BaselineIdentity,
            ..TrainConfig::default()
        };
        let mut state = ImputerState::new(&toy(), &cfg).unwrap();
        train_step(&mut state, &cfg).unwrap();
        assert!(state.stack().is_none());
        assert!(impute_transform_view(&state).unwrap().is_empty());
    }

    #[test]
    fn views_at_identity() {
        let cfg = TrainConfig {
            batch_size: 4,
            ..TrainConfig::default()
        };
        let state = ImputerState::new(&toy(), &cfg).unwrap();
        let views = impute_transform_view(&state).unwrap();
        assert_eq!(views.len(), 3);
        for v in views {
            assert_eq!(&v, state.working());
        }
    }

    #[test]
    fn sinkhorn_solver_runs() {
        let cfg = TrainConfig {
            batch_size: 4,
            iterations: 10,
            solver: SolverChoice::sinkhorn(None),
            ..TrainConfig::default()
        };
        let out = fit(&toy(), &cfg).unwrap();
        assert!(out.epsilon.unwrap() > 0.0);
        assert!(out.trace.loss_per_iter.iter().all(|l| l.is_finite() && *l >= 0.0));
    }

    #[test]
    fn metric_checkpoints_follow_cadence() {
        let data = toy();
        let truth = Dataset::new(data.values().mapv(|v| if v.is_nan() { 0.0 } else { v })).unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            iterations: 10,
            checkpoint_every: 4,
            ..TrainConfig::default()
        };
        let mut seen = Vec::new();
        let out = fit_with(&data, &cfg, Some(&truth), |s| {
            seen.push(s.iteration());
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![4, 8]);
        let its: Vec<_> = out.trace.metric_checkpoints.iter().map(|m| m.iteration).collect();
        assert_eq!(its, vec![4, 8, 10]);
    }

    #[test]
    fn rejects_bad_config() {
        let one_col = Dataset::new(array![[1.0], [f64::NAN], [2.0]]).unwrap();
        assert!(fit(&one_col, &TrainConfig::default()).is_err());
        let cfg = TrainConfig {
            mode: Mode::BaselineIdentity,
            batch_size: 1,
            iterations: 3,
            ..TrainConfig::default()
        };
        assert!(fit(&one_col, &cfg).is_ok());
        let cfg = TrainConfig {
            iterations: 0,
            ..TrainConfig::default()
        };
        assert!(fit(&toy(), &cfg).is_err());
    }
}
