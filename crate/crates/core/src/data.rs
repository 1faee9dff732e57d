//! Dense datasets with NaN-coded missing entries.
//!
//! Missing cells are stored as `f64::NAN` both in memory and on disk. A
//! [`MissingMask`] is the boolean view of the same information (`true` =
//! missing) and is what the imputer and the metrics consume.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TdmError};

/// Standard deviation of the Gaussian jitter added to column means when
/// initialising missing cells.
pub const INIT_NOISE_STD: f64 = 0.1;

/// Standard deviations below this are treated as a constant column.
pub const MIN_STD: f64 = 1e-12;

const MISSING_TOKENS: [&str; 4] = ["", "NaN", "nan", "NA"];

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    values: Array2<f64>,
    col_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        Self::with_names(values, None)
    }

    pub fn with_names(values: Array2<f64>, col_names: Option<Vec<String>>) -> Result<Self> {
        let (n, d) = values.dim();
        if n == 0 {
            return Err(TdmError::Empty);
        }
        if d == 0 {
            return Err(TdmError::InvalidArgument("dataset has no columns".into()));
        }
        if let Some(names) = &col_names {
            if names.len() != d {
                return Err(TdmError::InvalidArgument(format!(
                    "{} column names for {} columns",
                    names.len(),
                    d
                )));
            }
        }
        if let Some(((i, j), v)) = values
            .indexed_iter()
            .find(|(_, v)| v.is_infinite())
        {
            return Err(TdmError::NonFinite(format!("entry ({i}, {j}) is {v}")));
        }
        Ok(Self { values, col_names })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn col_names(&self) -> Option<&[String]> {
        self.col_names.as_deref()
    }

    pub fn has_missing(&self) -> bool {
        self.values.iter().any(|v| v.is_nan())
    }

    /// Returns a copy holding `values` but keeping this dataset's column names.
    pub fn replace_values(&self, values: Array2<f64>) -> Result<Self> {
        if values.dim() != self.values.dim() {
            return Err(TdmError::Shape {
                expected: self.values.dim(),
                found: values.dim(),
            });
        }
        Self::with_names(values, self.col_names.clone())
    }
}

/// Boolean missingness indicator; `true` marks a missing cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MissingMask {
    flags: Array2<bool>,
    missing_count: usize,
}

impl MissingMask {
    pub fn from_flags(flags: Array2<bool>) -> Self {
        let missing_count = flags.iter().filter(|&&f| f).count();
        Self {
            flags,
            missing_count,
        }
    }

    pub fn none(n: usize, d: usize) -> Self {
        Self::from_flags(Array2::from_elem((n, d), false))
    }

    pub fn flags(&self) -> &Array2<bool> {
        &self.flags
    }

    pub fn dim(&self) -> (usize, usize) {
        self.flags.dim()
    }

    pub fn missing_count(&self) -> usize {
        self.missing_count
    }

    pub fn is_missing(&self, row: usize, col: usize) -> bool {
        self.flags[[row, col]]
    }

    /// Fraction of cells flagged missing.
    pub fn rate(&self) -> f64 {
        self.missing_count as f64 / self.flags.len() as f64
    }

    /// Missing cells in row-major order.
    pub fn missing_cells(&self) -> Vec<(usize, usize)> {
        self.flags
            .indexed_iter()
            .filter_map(|(ij, &f)| f.then_some(ij))
            .collect()
    }

    /// Index of the first column with no observed entry, if any.
    pub fn first_fully_missing_column(&self) -> Option<usize> {
        self.flags
            .axis_iter(Axis(1))
            .position(|col| col.iter().all(|&f| f))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| TdmError::io(path, e))?;
        let mut out = BufWriter::new(file);
        for row in self.flags.rows() {
            let line: Vec<&str> = row.iter().map(|&f| if f { "1" } else { "0" }).collect();
            writeln!(out, "{}", line.join(",")).map_err(|e| TdmError::io(path, e))?;
        }
        out.flush().map_err(|e| TdmError::io(path, e))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let data = load_csv(path, false)?;
        let mut flags = Array2::from_elem(data.values.dim(), false);
        for ((i, j), &v) in data.values.indexed_iter() {
            flags[[i, j]] = if v == 1.0 {
                true
            } else if v == 0.0 {
                false
            } else {
                return Err(TdmError::NonNumeric {
                    row: i,
                    col: j,
                    value: format!("{v} (mask cells must be 0 or 1)"),
                });
            };
        }
        Ok(Self::from_flags(flags))
    }
}

/// Per-column location and scale used by [`standardize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationParams {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl StandardizationParams {
    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        self.check_dim(data)?;
        let mut out = data.values.clone();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|v| (v - self.means[j]) / self.stds[j]);
        }
        data.replace_values(out)
    }

    fn check_dim(&self, data: &Dataset) -> Result<()> {
        if self.means.len() != data.n_cols() || self.stds.len() != data.n_cols() {
            return Err(TdmError::Shape {
                expected: (data.n_rows(), self.means.len()),
                found: (data.n_rows(), data.n_cols()),
            });
        }
        Ok(())
    }
}

/// Reads a comma-separated numeric file. Empty cells and the tokens `NaN`,
/// `nan` and `NA` become missing.
pub fn load_csv(path: impl AsRef<Path>, has_header: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| TdmError::io(path, e))?;
    read_csv(file, has_header)
}

/// Like [`load_csv`], treating the first line as a header when any of its
/// cells is neither numeric nor a missing-value token.
pub fn load_csv_detect(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| TdmError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes.as_slice());
    let has_header = match rdr.records().next() {
        Some(first) => first?.iter().enumerate().any(|(c, cell)| parse_cell(cell, 0, c).is_err()),
        None => false,
    };
    read_csv(bytes.as_slice(), has_header)
}

pub fn read_csv<R: std::io::Read>(reader: R, has_header: bool) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .from_reader(reader);

    let col_names = if has_header {
        Some(
            rdr.headers()?
                .iter()
                .map(|h| h.trim().to_string())
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };

    let mut width = col_names.as_ref().map(Vec::len);
    let mut cells = Vec::new();
    let mut n_rows = 0;
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(TdmError::RaggedRow {
                row,
                expected,
                found: record.len(),
            });
        }
        for (col, cell) in record.iter().enumerate() {
            cells.push(parse_cell(cell, row, col)?);
        }
        n_rows += 1;
    }
    if n_rows == 0 {
        return Err(TdmError::Empty);
    }
    let d = width.unwrap_or(0);
    let values = Array2::from_shape_vec((n_rows, d), cells)
        .map_err(|e| TdmError::InvalidArgument(e.to_string()))?;
    Dataset::with_names(values, col_names)
}

fn parse_cell(cell: &str, row: usize, col: usize) -> Result<f64> {
    let cell = cell.trim();
    if MISSING_TOKENS.contains(&cell) {
        return Ok(f64::NAN);
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(TdmError::NonNumeric {
            row,
            col,
            value: cell.to_string(),
        }),
    }
}

/// Formats a value with 17 significant digits, or `NaN` for missing cells.
pub fn format_value(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:.16e}")
    }
}

pub fn write_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| TdmError::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_csv_to(data, &mut out).map_err(|e| TdmError::io(path, e))?;
    out.flush().map_err(|e| TdmError::io(path, e))
}

pub fn write_csv_to<W: Write>(data: &Dataset, out: &mut W) -> std::io::Result<()> {
    if let Some(names) = data.col_names() {
        writeln!(out, "{}", names.join(","))?;
    }
    for row in data.values.rows() {
        let line: Vec<String> = row.iter().map(|&v| format_value(v)).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

/// Flags every NaN cell. Fails if some column has no observed value.
pub fn derive_mask(data: &Dataset) -> Result<MissingMask> {
    let mask = MissingMask::from_flags(data.values.mapv(f64::is_nan));
    match mask.first_fully_missing_column() {
        Some(j) => Err(TdmError::ColumnFullyMissing(j)),
        None => Ok(mask),
    }
}

/// Mean of the observed entries of every column.
pub fn nan_mean(values: &Array2<f64>) -> Array1<f64> {
    values.map_axis(Axis(0), |col| {
        let (sum, count) = col
            .iter()
            .filter(|v| !v.is_nan())
            .fold((0.0, 0usize), |(s, c), &v| (s + v, c + 1));
        if count == 0 {
            f64::NAN
        } else {
            sum / count as f64
        }
    })
}

/// Centres and scales every column using statistics of its observed entries
/// (population standard deviation). Missing cells stay NaN.
pub fn standardize(data: &Dataset) -> Result<(Dataset, StandardizationParams)> {
    if let Some(j) = MissingMask::from_flags(data.values.mapv(f64::is_nan)).first_fully_missing_column() {
        return Err(TdmError::ColumnFullyMissing(j));
    }
    let means = nan_mean(&data.values);
    let stds: Vec<f64> = data
        .values
        .axis_iter(Axis(1))
        .zip(means.iter())
        .map(|(col, &mu)| {
            let (ss, count) = col
                .iter()
                .filter(|v| !v.is_nan())
                .fold((0.0, 0usize), |(s, c), &v| (s + (v - mu) * (v - mu), c + 1));
            let sd = (ss / count as f64).sqrt();
            if sd < MIN_STD {
                1.0
            } else {
                sd
            }
        })
        .collect();
    let params = StandardizationParams {
        means: means.to_vec(),
        stds,
    };
    Ok((params.apply(data)?, params))
}

pub fn destandardize(data: &Dataset, params: &StandardizationParams) -> Result<Dataset> {
    params.check_dim(data)?;
    let mut out = data.values.clone();
    for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
        col.mapv_inplace(|v| v * params.stds[j] + params.means[j]);
    }
    data.replace_values(out)
}

/// Fills every missing cell with its column's observed mean plus
/// `Normal(0, INIT_NOISE_STD^2)` noise. Draws happen in row-major cell order.
pub fn noisy_mean_init<R: Rng + ?Sized>(
    data: &Dataset,
    mask: &MissingMask,
    rng: &mut R,
) -> Result<Dataset> {
    if mask.dim() != data.values.dim() {
        return Err(TdmError::Shape {
            expected: data.values.dim(),
            found: mask.dim(),
        });
    }
    let means = nan_mean(&data.values);
    let noise = Normal::new(0.0, INIT_NOISE_STD).expect("valid normal");
    let mut out = data.values.clone();
    for (i, j) in mask.missing_cells() {
        if means[j].is_nan() {
            return Err(TdmError::ColumnFullyMissing(j));
        }
        out[[i, j]] = means[j] + noise.sample(rng);
    }
    data.replace_values(out)
}
