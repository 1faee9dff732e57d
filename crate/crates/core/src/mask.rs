//! Missingness mechanisms: MCAR, MAR, and two MNAR variants (logistic
//! self-masking and quantile censoring).
//!
//! All generators are pure functions of their inputs and the supplied
//! generator. After drawing, any column left without an observed entry gets
//! one uniformly chosen cell flipped back to observed.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, MissingMask, MIN_STD};
use crate::error::{Result, TdmError};
use crate::rng::{seeded_rng, streams};

pub const DEFAULT_RATE: f64 = 0.3;
pub const DEFAULT_OBSERVED_FRACTION: f64 = 0.3;
pub const DEFAULT_QUANTILE_P: f64 = 25.0;

/// Tolerance on the achieved rate for the bias line search.
pub const LINE_SEARCH_TOL: f64 = 0.005;
const BIAS_RANGE: (f64, f64) = (-50.0, 50.0);
const LINE_SEARCH_ITERS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Mcar,
    Mar,
    Mnarl,
    Mnarq,
}

impl Mechanism {
    pub const ALL: [Mechanism; 4] = [Mechanism::Mcar, Mechanism::Mar, Mechanism::Mnarl, Mechanism::Mnarq];

    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::Mcar => "mcar",
            Mechanism::Mar => "mar",
            Mechanism::Mnarl => "mnarl",
            Mechanism::Mnarq => "mnarq",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mechanism {
    type Err = TdmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mcar" => Ok(Mechanism::Mcar),
            "mar" => Ok(Mechanism::Mar),
            "mnarl" => Ok(Mechanism::Mnarl),
            "mnarq" => Ok(Mechanism::Mnarq),
            other => Err(TdmError::InvalidArgument(format!("unknown mechanism {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub mechanism: Mechanism,
    pub rate: f64,
    pub seed: u64,
    /// Share of columns kept fully observed (MAR) or used as logistic
    /// inputs (MNARL).
    pub observed_col_fraction: f64,
    /// Tail percentile for MNARQ, in (0, 50).
    pub quantile_p: f64,
}

impl MaskSpec {
    pub fn new(mechanism: Mechanism, rate: f64, seed: u64) -> Self {
        Self {
            mechanism,
            rate,
            seed,
            observed_col_fraction: DEFAULT_OBSERVED_FRACTION,
            quantile_p: DEFAULT_QUANTILE_P,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_rate(self.rate)?;
        if !(self.observed_col_fraction > 0.0 && self.observed_col_fraction <= 1.0) {
            return Err(TdmError::InvalidArgument(format!(
                "observed column fraction must lie in (0, 1], got {}",
                self.observed_col_fraction
            )));
        }
        if !(self.quantile_p > 0.0 && self.quantile_p < 50.0) {
            return Err(TdmError::InvalidArgument(format!(
                "quantile p must lie in (0, 50), got {}",
                self.quantile_p
            )));
        }
        Ok(())
    }
}

/// A generated mask with the facts needed to reproduce or audit it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskOutcome {
    #[serde(skip)]
    pub mask: MissingMask,
    pub achieved_rate: f64,
    /// MAR: the columns kept fully observed. MNARL: the logistic inputs.
    pub selected_columns: Vec<usize>,
    /// Bias chosen by the line search (logistic mechanisms only).
    pub bias: Option<f64>,
}

impl MaskOutcome {
    fn plain(mask: MissingMask) -> Self {
        Self {
            achieved_rate: mask.rate(),
            mask,
            selected_columns: Vec::new(),
            bias: None,
        }
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if rate > 0.0 && rate < 1.0 {
        Ok(())
    } else {
        Err(TdmError::InvalidArgument(format!("missing rate must lie in (0, 1), got {rate}")))
    }
}

fn require_observed(data: &Dataset) -> Result<()> {
    if data.has_missing() {
        return Err(TdmError::InvalidArgument(
            "mask generation needs fully observed data".into(),
        ));
    }
    Ok(())
}

/// Dispatches on `spec.mechanism`, seeding from `spec.seed`.
pub fn generate(data: &Dataset, spec: &MaskSpec) -> Result<MaskOutcome> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed, streams::MASK);
    match spec.mechanism {
        Mechanism::Mcar => {
            require_observed(data)?;
            gen_mcar(data.n_rows(), data.n_cols(), spec.rate, &mut rng).map(MaskOutcome::plain)
        }
        Mechanism::Mar => gen_mar(data, spec.rate, spec.observed_col_fraction, &mut rng),
        Mechanism::Mnarl => gen_mnar_logistic(data, spec.rate, spec.observed_col_fraction, &mut rng),
        Mechanism::Mnarq => gen_mnar_quantile(data, spec.rate, spec.quantile_p, &mut rng).map(MaskOutcome::plain),
    }
}

/// Flips one uniformly chosen masked cell to observed in every column that
/// is entirely masked.
fn guard_columns<R: Rng + ?Sized>(flags: &mut Array2<bool>, rng: &mut R) {
    let n = flags.nrows();
    for mut col in flags.axis_iter_mut(Axis(1)) {
        if col.iter().all(|&f| f) {
            col[rng.random_range(0..n)] = false;
        }
    }
}

/// Every cell independently missing with probability `rate`.
pub fn gen_mcar<R: Rng + ?Sized>(n: usize, d: usize, rate: f64, rng: &mut R) -> Result<MissingMask> {
    check_rate(rate)?;
    if n == 0 || d == 0 {
        return Err(TdmError::Empty);
    }
    let mut flags = Array2::from_shape_fn((n, d), |_| rng.random::<f64>() < rate);
    guard_columns(&mut flags, rng);
    Ok(MissingMask::from_flags(flags))
}

fn choose_columns<R: Rng + ?Sized>(d: usize, fraction: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let k = ((fraction * d as f64).ceil() as usize).clamp(1, d - 1);
    let mut chosen = sample_indices(rng, d, k).into_vec();
    chosen.sort_unstable();
    let rest = (0..d).filter(|j| !chosen.contains(j)).collect();
    (chosen, rest)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logistic scores for `targets` driven by the standardised `inputs`
/// columns. Weights are i.i.d. standard normal; each score column is
/// rescaled to unit standard deviation so one shared bias suits all.
fn logistic_scores<R: Rng + ?Sized>(data: &Dataset, inputs: &[usize], targets: &[usize], rng: &mut R) -> Array2<f64> {
    let x = data.values().select(Axis(1), inputs);
    let mut x_std = x.clone();
    for mut col in x_std.axis_iter_mut(Axis(1)) {
        let mean = col.mean().unwrap_or(0.0);
        let sd = col.mapv(|v| (v - mean).powi(2)).mean().unwrap_or(0.0).sqrt();
        let sd = if sd < MIN_STD { 1.0 } else { sd };
        col.mapv_inplace(|v| (v - mean) / sd);
    }
    let weights = Array2::from_shape_fn((inputs.len(), targets.len()), |_| rng.sample::<f64, _>(StandardNormal));
    let mut scores = x_std.dot(&weights);
    for mut col in scores.axis_iter_mut(Axis(1)) {
        let mean = col.mean().unwrap_or(0.0);
        let sd = col.mapv(|v| (v - mean).powi(2)).mean().unwrap_or(0.0).sqrt();
        if sd > MIN_STD {
            col.mapv_inplace(|v| v / sd);
        }
    }
    scores
}

/// Bisects the shared bias `b` so that the number of cells with
/// `u < sigmoid(score + b)` plus `fixed_missing` hits `rate` of `total`
/// cells. The count is nondecreasing in `b`.
fn search_bias(
    scores: &Array2<f64>,
    uniforms: &Array2<f64>,
    fixed_missing: usize,
    total: usize,
    rate: f64,
) -> Result<f64> {
    let achieved = |b: f64| {
        let count = scores
            .iter()
            .zip(uniforms.iter())
            .filter(|(&s, &u)| u < sigmoid(s + b))
            .count();
        (count + fixed_missing) as f64 / total as f64
    };
    let (mut lo, mut hi) = BIAS_RANGE;
    let (r_lo, r_hi) = (achieved(lo), achieved(hi));
    if r_lo > rate + LINE_SEARCH_TOL || r_hi < rate - LINE_SEARCH_TOL {
        return Err(TdmError::LineSearch(format!(
            "bias range [{lo}, {hi}] yields rates [{r_lo:.4}, {r_hi:.4}], cannot reach {rate}"
        )));
    }
    let mut best = if (r_lo - rate).abs() <= (r_hi - rate).abs() { (lo, r_lo) } else { (hi, r_hi) };
    for _ in 0..LINE_SEARCH_ITERS {
        let mid = 0.5 * (lo + hi);
        let r = achieved(mid);
        if (r - rate).abs() < (best.1 - rate).abs() {
            best = (mid, r);
        }
        if r < rate {
            lo = mid;
        } else {
            hi = mid;
        }
        if (best.1 - rate).abs() * total as f64 <= 0.5 {
            break;
        }
    }
    if (best.1 - rate).abs() > LINE_SEARCH_TOL {
        return Err(TdmError::LineSearch(format!(
            "best achievable rate {:.4} misses target {rate}",
            best.1
        )));
    }
    Ok(best.0)
}

fn logistic_mask<R: Rng + ?Sized>(
    data: &Dataset,
    rate: f64,
    inputs: &[usize],
    targets: &[usize],
    mut flags: Array2<bool>,
    rng: &mut R,
) -> Result<MaskOutcome> {
    let n = data.n_rows();
    let scores = logistic_scores(data, inputs, targets, rng);
    let uniforms = Array2::from_shape_fn((n, targets.len()), |_| rng.random::<f64>());
    let fixed = flags.iter().filter(|&&f| f).count();
    let bias = search_bias(&scores, &uniforms, fixed, flags.len(), rate)?;
    for (k, &j) in targets.iter().enumerate() {
        for i in 0..n {
            flags[[i, j]] = uniforms[[i, k]] < sigmoid(scores[[i, k]] + bias);
        }
    }
    guard_columns(&mut flags, rng);
    let mask = MissingMask::from_flags(flags);
    Ok(MaskOutcome {
        achieved_rate: mask.rate(),
        mask,
        selected_columns: inputs.to_vec(),
        bias: Some(bias),
    })
}

/// MAR: a random subset of columns stays fully observed and drives a
/// logistic model for the missingness of the others.
pub fn gen_mar<R: Rng + ?Sized>(data: &Dataset, rate: f64, observed_col_fraction: f64, rng: &mut R) -> Result<MaskOutcome> {
    check_rate(rate)?;
    require_observed(data)?;
    let d = data.n_cols();
    if d < 2 {
        return Err(TdmError::InvalidArgument("MAR needs at least two columns".into()));
    }
    let (observed, targets) = choose_columns(d, observed_col_fraction, rng);
    let flags = Array2::from_elem(data.values().dim(), false);
    logistic_mask(data, rate, &observed, &targets, flags, rng)
}

/// MNAR (logistic): like MAR, but the logistic inputs are themselves masked
/// completely at random, so missingness elsewhere depends on values that may
/// be unobserved.
pub fn gen_mnar_logistic<R: Rng + ?Sized>(
    data: &Dataset,
    rate: f64,
    input_col_fraction: f64,
    rng: &mut R,
) -> Result<MaskOutcome> {
    check_rate(rate)?;
    require_observed(data)?;
    let d = data.n_cols();
    if d < 2 {
        return Err(TdmError::InvalidArgument("MNAR logistic needs at least two columns".into()));
    }
    let (inputs, targets) = choose_columns(d, input_col_fraction, rng);
    let mut flags = Array2::from_elem(data.values().dim(), false);
    for &j in &inputs {
        for i in 0..data.n_rows() {
            flags[[i, j]] = rng.random::<f64>() < rate;
        }
    }
    logistic_mask(data, rate, &inputs, &targets, flags, rng)
}

/// Linear-interpolation percentile of a sorted slice (`p` in [0, 100]).
pub(crate) fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * p / 100.0;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per column, cells at or below the `p`-th percentile or at or above the
/// `(100 - p)`-th are candidates; each candidate is masked with probability
/// `rate / (2p / 100)`.
pub fn gen_mnar_quantile<R: Rng + ?Sized>(data: &Dataset, rate: f64, p: f64, rng: &mut R) -> Result<MissingMask> {
    check_rate(rate)?;
    require_observed(data)?;
    if !(p > 0.0 && p < 50.0) {
        return Err(TdmError::InvalidArgument(format!("quantile p must lie in (0, 50), got {p}")));
    }
    let tail_mass = 2.0 * p / 100.0;
    if rate > tail_mass {
        return Err(TdmError::Infeasible(format!(
            "rate {rate} exceeds the tail mass {tail_mass} available at p = {p}"
        )));
    }
    let q = (rate / tail_mass).min(1.0);
    let (lower, upper) = tail_bounds(data, p);
    let mut flags = Array2::from_elem(data.values().dim(), false);
    for ((i, j), f) in flags.indexed_iter_mut() {
        let v = data.values()[[i, j]];
        let candidate = v <= lower[j] || v >= upper[j];
        let u = rng.random::<f64>();
        *f = candidate && u < q;
    }
    guard_columns(&mut flags, rng);
    Ok(MissingMask::from_flags(flags))
}

/// Per-column `p`-th and `(100 - p)`-th percentiles.
pub fn tail_bounds(data: &Dataset, p: f64) -> (Vec<f64>, Vec<f64>) {
    data.values()
        .axis_iter(Axis(1))
        .map(|col| {
            let mut sorted = col.to_vec();
            sorted.sort_by(f64::total_cmp);
            (percentile(&sorted, p), percentile(&sorted, 100.0 - p))
        })
        .unzip()
}

/// Sets masked cells to NaN.
pub fn apply_mask(data: &Dataset, mask: &MissingMask) -> Result<Dataset> {
    if mask.dim() != data.values().dim() {
        return Err(TdmError::Shape {
            expected: data.values().dim(),
            found: mask.dim(),
        });
    }
    let mut values = data.values().clone();
    values.zip_mut_with(mask.flags(), |v, &m| {
        if m {
            *v = f64::NAN;
        }
    });
    data.replace_values(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::derive_mask;
    use ndarray::array;

    fn gaussian(n: usize, d: usize, seed: u64) -> Dataset {
        let mut rng = seeded_rng(seed, 99);
        Dataset::new(Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal))).unwrap()
    }

    #[test]
    fn mcar_limits_and_rate() {
        let m = gen_mcar(10, 10, 1e-9, &mut seeded_rng(0, 0)).unwrap();
        assert_eq!(m.missing_count(), 0);
        let m = gen_mcar(1000, 10, 0.3, &mut seeded_rng(0, 0)).unwrap();
        assert!((0.28..=0.32).contains(&m.rate()), "{}", m.rate());
        assert_eq!(m, gen_mcar(1000, 10, 0.3, &mut seeded_rng(0, 0)).unwrap());
        assert!(gen_mcar(5, 5, 0.0, &mut seeded_rng(0, 0)).is_err());
        assert!(gen_mcar(5, 5, 1.0, &mut seeded_rng(0, 0)).is_err());
    }

    #[test]
    fn column_guard_keeps_one_observed() {
        let m = gen_mcar(2, 50, 0.999_999, &mut seeded_rng(3, 0)).unwrap();
        assert!(m.first_fully_missing_column().is_none());
        assert_eq!(m.missing_count(), 50);
    }

    #[test]
    fn mar_keeps_observed_columns_clean() {
        let data = gaussian(2000, 10, 1);
        let out = gen_mar(&data, 0.3, 0.3, &mut seeded_rng(4, 0)).unwrap();
        assert_eq!(out.selected_columns.len(), 3);
        for &j in &out.selected_columns {
            assert!(out.mask.flags().column(j).iter().all(|&f| !f));
        }
        assert!((out.achieved_rate - 0.3).abs() <= 0.005, "{}", out.achieved_rate);
        assert!(gen_mar(&gaussian(10, 1, 0), 0.3, 0.3, &mut seeded_rng(0, 0)).is_err());
    }

    #[test]
    fn mar_infeasible_rate_reports_line_search() {
        // one target column out of two cannot carry 0.9 of all cells
        let data = gaussian(200, 2, 2);
        let err = gen_mar(&data, 0.9, 0.5, &mut seeded_rng(0, 0)).unwrap_err();
        assert!(matches!(err, TdmError::LineSearch(_)));
    }

    #[test]
    fn bias_count_is_monotone() {
        let data = gaussian(300, 4, 3);
        let mut rng = seeded_rng(0, 0);
        let scores = logistic_scores(&data, &[0], &[1, 2, 3], &mut rng);
        let u = Array2::from_shape_fn(scores.dim(), |_| rng.random::<f64>());
        let count = |b: f64| scores.iter().zip(u.iter()).filter(|(&s, &u)| u < sigmoid(s + b)).count();
        let mut prev = 0;
        for k in -40..=40 {
            let c = count(k as f64 * 0.25);
            assert!(c >= prev);
            prev = c;
        }
    }

    #[test]
    fn mnar_logistic_masks_inputs_too() {
        let data = gaussian(2000, 10, 5);
        let out = gen_mnar_logistic(&data, 0.3, 0.3, &mut seeded_rng(6, 0)).unwrap();
        assert!((out.achieved_rate - 0.3).abs() <= 0.005);
        assert!(out
            .selected_columns
            .iter()
            .any(|&j| out.mask.flags().column(j).iter().any(|&f| f)));
        let again = gen_mnar_logistic(&data, 0.3, 0.3, &mut seeded_rng(6, 0)).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn mnar_quantile_masks_tails_only() {
        let data = gaussian(2000, 10, 7);
        let m = gen_mnar_quantile(&data, 0.3, 25.0, &mut seeded_rng(8, 0)).unwrap();
        let (lo, hi) = tail_bounds(&data, 25.0);
        for ((i, j), &f) in m.flags().indexed_iter() {
            let v = data.values()[[i, j]];
            if f {
                assert!(v <= lo[j] || v >= hi[j]);
            }
            if v > lo[j] && v < hi[j] {
                assert!(!f);
            }
        }
        assert!((m.rate() - 0.3).abs() <= 0.01, "{}", m.rate());
        let err = gen_mnar_quantile(&data, 0.6, 25.0, &mut seeded_rng(8, 0)).unwrap_err();
        assert!(matches!(err, TdmError::Infeasible(_)));
    }

    #[test]
    fn percentile_matches_linear_interpolation() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 25.0), 1.75);
        assert_eq!(percentile(&v, 100.0), 4.0);
        assert_eq!(percentile(&v, 0.0), 1.0);
    }

    #[test]
    fn apply_mask_cases() {
        let data = Dataset::new(array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(apply_mask(&data, &MissingMask::none(2, 2)).unwrap(), data);
        let m = MissingMask::from_flags(array![[true, true], [false, true]]);
        let masked = apply_mask(&data, &m).unwrap();
        assert!(masked.values().row(0).iter().all(|v| v.is_nan()));
        assert_eq!(MissingMask::from_flags(masked.values().mapv(f64::is_nan)), m);
        let m = MissingMask::from_flags(array![[true, false], [false, false]]);
        assert_eq!(derive_mask(&apply_mask(&data, &m).unwrap()).unwrap(), m);
        assert!(apply_mask(&data, &MissingMask::none(3, 2)).is_err());
    }

    #[test]
    fn spec_dispatch_is_deterministic() {
        let data = gaussian(200, 5, 9);
        for mech in Mechanism::ALL {
            let spec = MaskSpec::new(mech, 0.3, 42);
            let a = generate(&data, &spec).unwrap();
            let b = generate(&data, &spec).unwrap();
            assert_eq!(a.mask, b.mask);
            assert_eq!(mech.as_str().parse::<Mechanism>().unwrap(), mech);
        }
        assert!("mnar".parse::<Mechanism>().is_err());
    }
}
