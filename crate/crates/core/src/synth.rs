//! Synthetic datasets: 2-D shapes for visual experiments and a 7-feature
//! table shaped like a small kernel-measurement dataset.
//!
//! Noise is Gaussian truncated at three standard deviations, so every point
//! lies within `3 * noise` of its noiseless curve.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, MissingMask};
use crate::error::{Result, TdmError};
use crate::rng::{seeded_rng, streams};

pub const MIN_ROWS: usize = 10;
pub const OUTER_RADIUS: f64 = 1.0;
pub const INNER_RADIUS: f64 = 0.5;
const TRUNCATION: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    TwoCircles,
    SCurve,
    HalfMoons,
    SeedsLike,
}

impl SynthKind {
    pub const ALL: [SynthKind; 4] = [Self::TwoCircles, Self::SCurve, Self::HalfMoons, Self::SeedsLike];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::TwoCircles => "two_circles",
            Self::SCurve => "s_curve",
            Self::HalfMoons => "half_moons",
            Self::SeedsLike => "seeds_like",
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SynthKind {
    type Err = TdmError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| TdmError::InvalidArgument(format!("unknown synthetic dataset '{s}'")))
    }
}

/// Draws `kind` with `n` rows using the synthetic-data stream of `seed`.
pub fn generate(kind: SynthKind, n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < MIN_ROWS {
        return Err(TdmError::InvalidArgument(format!("need at least {MIN_ROWS} rows, got {n}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(TdmError::InvalidArgument(format!("noise must be finite and non-negative, got {noise}")));
    }
    let mut rng = seeded_rng(seed, streams::SYNTH);
    let values = match kind {
        SynthKind::TwoCircles => two_circles(n, noise, &mut rng),
        SynthKind::SCurve => s_curve(n, noise, &mut rng),
        SynthKind::HalfMoons => half_moons(n, noise, &mut rng),
        SynthKind::SeedsLike => seeds_like(n, &mut rng),
    };
    Dataset::new(values)
}

fn truncated_normal<R: Rng + ?Sized>(std: f64, rng: &mut R) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= TRUNCATION {
            return std * z;
        }
    }
}

/// First half on the outer circle, second half on the inner one; noise is
/// radial.
pub fn two_circles<R: Rng + ?Sized>(n: usize, noise: f64, rng: &mut R) -> Array2<f64> {
    let mut out = Array2::zeros((n, 2));
    for i in 0..n {
        let r = if i < n.div_ceil(2) { OUTER_RADIUS } else { INNER_RADIUS };
        let t = rng.random_range(0.0..2.0 * PI);
        let rr = r + truncated_normal(noise, rng);
        out[[i, 0]] = rr * t.cos();
        out[[i, 1]] = rr * t.sin();
    }
    out
}

/// `(sin t, sign(t) (cos t - 1))` for `t` uniform on `[-3pi/2, 3pi/2]`.
pub fn s_curve<R: Rng + ?Sized>(n: usize, noise: f64, rng: &mut R) -> Array2<f64> {
    let mut out = Array2::zeros((n, 2));
    for i in 0..n {
        let t = rng.random_range(-1.5 * PI..=1.5 * PI);
        out[[i, 0]] = t.sin() + truncated_normal(noise, rng);
        out[[i, 1]] = t.signum() * (t.cos() - 1.0) + truncated_normal(noise, rng);
    }
    out
}

/// Upper arc `(cos t, sin t)` and lower arc `(1 - cos t, 0.5 - sin t)`,
/// `t` uniform on `[0, pi]`.
pub fn half_moons<R: Rng + ?Sized>(n: usize, noise: f64, rng: &mut R) -> Array2<f64> {
    let mut out = Array2::zeros((n, 2));
    for i in 0..n {
        let t = rng.random_range(0.0..=PI);
        let (x, y) = if i < n.div_ceil(2) {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        out[[i, 0]] = x + truncated_normal(noise, rng);
        out[[i, 1]] = y + truncated_normal(noise, rng);
    }
    out
}

/// Three equal classes of kernels described by area, perimeter,
/// compactness, length, width, asymmetry and groove length.
pub fn seeds_like<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Array2<f64> {
    // (length, width, asymmetry, groove offset) per class
    const CLASSES: [(f64, f64, f64, f64); 3] = [(5.51, 3.24, 2.67, -0.43), (6.15, 3.68, 3.64, -0.04), (5.23, 2.85, 4.79, -0.11)];
    let mut out = Array2::zeros((n, 7));
    for i in 0..n {
        let (l0, w0, a0, g0) = CLASSES[i * 3 / n];
        let size = truncated_normal(1.0, rng);
        let length = l0 + 0.22 * size + truncated_normal(0.06, rng);
        let width = w0 + 0.16 * size + truncated_normal(0.05, rng);
        let area = 0.83 * length * width * (1.0 + truncated_normal(0.015, rng));
        let perimeter = 1.66 * (length + width) * (1.0 + truncated_normal(0.01, rng));
        let compactness = 4.0 * PI * area / (perimeter * perimeter);
        let asymmetry = (a0 + truncated_normal(1.1, rng)).abs().max(0.05);
        let groove = length + g0 + truncated_normal(0.12, rng);
        let row = [area, perimeter, compactness, length, width, asymmetry, groove];
        for (j, v) in row.into_iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    out
}

/// Hides exactly one uniformly chosen coordinate in `round(frac * n)`
/// uniformly chosen rows.
pub fn one_missing_per_row<R: Rng + ?Sized>(n: usize, d: usize, frac: f64, rng: &mut R) -> Result<MissingMask> {
    if !(0.0..=1.0).contains(&frac) || d < 2 {
        return Err(TdmError::InvalidArgument(format!(
            "row fraction must lie in [0, 1] and at least two columns are needed (got {frac}, {d})"
        )));
    }
    let k = (frac * n as f64).round() as usize;
    let mut flags = Array2::from_elem((n, d), false);
    for row in rand::seq::index::sample(rng, n, k) {
        flags[[row, rng.random_range(0..d)]] = true;
    }
    let mask = MissingMask::from_flags(flags);
    if let Some(j) = mask.first_fully_missing_column() {
        return Err(TdmError::ColumnFullyMissing(j));
    }
    Ok(mask)
}
