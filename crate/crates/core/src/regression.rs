//! Ordinary least squares on (rate, utilization) points.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fewest points any fit accepts.
pub const MIN_POINTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "LinearModelRepr", into = "LinearModelRepr")]
pub struct LinearModel {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Smallest x seen during training.
    pub x_min: f64,
    /// Largest x seen during training.
    pub x_max: f64,
}

#[derive(Serialize, Deserialize)]
struct LinearModelRepr {
    slope: f64,
    intercept: f64,
    r2: f64,
    range: [f64; 2],
}

impl From<LinearModelRepr> for LinearModel {
    fn from(r: LinearModelRepr) -> Self {
        LinearModel {
            slope: r.slope,
            intercept: r.intercept,
            r_squared: r.r2,
            x_min: r.range[0],
            x_max: r.range[1],
        }
    }
}

impl From<LinearModel> for LinearModelRepr {
    fn from(m: LinearModel) -> Self {
        LinearModelRepr {
            slope: m.slope,
            intercept: m.intercept,
            r2: m.r_squared,
            range: [m.x_min, m.x_max],
        }
    }
}

impl LinearModel {
    pub fn predict(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }

    /// The x at which the model reaches `y`, if the slope is positive.
    pub fn solve_for(&self, y: f64) -> Option<f64> {
        (self.slope > 0.0).then(|| (y - self.intercept) / self.slope)
    }

    pub fn is_extrapolation(&self, x: f64) -> bool {
        let pad = 1e-9 * self.x_max.abs().max(1.0);
        x < self.x_min - pad || x > self.x_max + pad
    }
}

/// Least-squares line through `points`, with the coefficient of determination.
pub fn fit_linear(points: &[(f64, f64)]) -> Result<LinearModel> {
    if points.len() < MIN_POINTS {
        return Err(Error::too_few(MIN_POINTS, points.len(), "linear fit"));
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        let dx = x - mean_x;
        let dy = y - mean_y;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if !(sxx > f64::EPSILON * mean_x.abs().max(1.0).powi(2) * n) {
        return Err(Error::Degenerate("x has zero variance".into()));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss_res: f64 = points
        .iter()
        .map(|&(x, y)| {
            let r = y - (slope * x + intercept);
            r * r
        })
        .sum();
    let r_squared = if syy > 0.0 {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    } else {
        1.0
    };
    let (x_min, x_max) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.0), hi.max(p.0))
        });
    Ok(LinearModel {
        slope,
        intercept,
        r_squared,
        x_min,
        x_max,
    })
}

/// Least-squares slope of a line forced through the origin.
pub fn fit_through_origin(points: &[(f64, f64)]) -> Result<f64> {
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    if !(sxx > 0.0) {
        return Err(Error::Degenerate("all x values are zero".into()));
    }
    Ok(points.iter().map(|p| p.0 * p.1).sum::<f64>() / sxx)
}
