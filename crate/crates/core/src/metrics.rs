//! Imputation quality: MAE and RMSE over the masked cells and the squared
//! 2-Wasserstein distance between the imputed and true datasets.
//!
//! All values are meant to be computed in standardised units; see
//! [`evaluate`] which standardises both inputs with statistics of the truth.

use serde::{Deserialize, Serialize};

use crate::data::{standardize, Dataset, MissingMask};
use crate::error::{Result, TdmError};
use crate::ot::{exact_ot_uniform, pairwise_sq_cost};

/// Largest row count for which [`w22_metric`] solves the full problem.
pub const DEFAULT_W22_MAX_N: usize = 3000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    pub w22: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w22_skipped: Option<String>,
    pub n_missing: usize,
    pub runtime_seconds: f64,
}

fn check_shapes(imputed: &Dataset, truth: &Dataset, mask: &MissingMask) -> Result<()> {
    let dim = truth.values().dim();
    for found in [imputed.values().dim(), mask.dim()] {
        if found != dim {
            return Err(TdmError::Shape { expected: dim, found });
        }
    }
    if mask.missing_count() == 0 {
        return Err(TdmError::InvalidArgument("no masked cells to evaluate".into()));
    }
    Ok(())
}

fn masked_errors<'a>(imputed: &'a Dataset, truth: &'a Dataset, mask: &'a MissingMask) -> impl Iterator<Item = f64> + 'a {
    mask.flags()
        .iter()
        .zip(imputed.values().iter().zip(truth.values().iter()))
        .filter(|(&m, _)| m)
        .map(|(_, (a, b))| a - b)
}

pub fn mae(imputed: &Dataset, truth: &Dataset, mask: &MissingMask) -> Result<f64> {
    check_shapes(imputed, truth, mask)?;
    let sum: f64 = masked_errors(imputed, truth, mask).map(f64::abs).sum();
    Ok(sum / mask.missing_count() as f64)
}

pub fn rmse(imputed: &Dataset, truth: &Dataset, mask: &MissingMask) -> Result<f64> {
    check_shapes(imputed, truth, mask)?;
    let sum: f64 = masked_errors(imputed, truth, mask).map(|e| e * e).sum();
    Ok((sum / mask.missing_count() as f64).sqrt())
}

/// Exact squared 2-Wasserstein distance between the row clouds of the two
/// datasets, or `None` when there are more than `max_n` rows.
pub fn w22_metric(imputed: &Dataset, truth: &Dataset, max_n: usize) -> Result<Option<f64>> {
    if imputed.values().dim() != truth.values().dim() {
        return Err(TdmError::Shape {
            expected: truth.values().dim(),
            found: imputed.values().dim(),
        });
    }
    if imputed.has_missing() || truth.has_missing() {
        return Err(TdmError::InvalidArgument("W2 metric needs NaN-free data".into()));
    }
    if truth.n_rows() > max_n {
        return Ok(None);
    }
    let cost = pairwise_sq_cost(imputed.values().view(), truth.values().view())?;
    Ok(Some(exact_ot_uniform(&cost)?.distance))
}

/// Standardises `imputed` and `truth` with the truth's column statistics
/// and computes every metric. `runtime_seconds` is left at zero for the
/// caller to fill in.
pub fn evaluate(imputed: &Dataset, truth: &Dataset, mask: &MissingMask, max_n: usize) -> Result<MetricsReport> {
    let (truth_std, params) = standardize(truth)?;
    let imputed_std = params.apply(imputed)?;
    evaluate_standardized(&imputed_std, &truth_std, mask, max_n)
}

/// Like [`evaluate`] for inputs that are already in standardised units.
pub fn evaluate_standardized(imputed: &Dataset, truth: &Dataset, mask: &MissingMask, max_n: usize) -> Result<MetricsReport> {
    let w22 = w22_metric(imputed, truth, max_n)?;
    let w22_skipped = w22
        .is_none()
        .then(|| format!("{} rows exceed the W2 cutoff of {max_n}", truth.n_rows()));
    Ok(MetricsReport {
        mae: mae(imputed, truth, mask)?,
        rmse: rmse(imputed, truth, mask)?,
        w22,
        w22_skipped,
        n_missing: mask.missing_count(),
        runtime_seconds: 0.0,
    })
}
