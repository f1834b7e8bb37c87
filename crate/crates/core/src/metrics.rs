//! Regression metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::ScalerParams;

fn check_pair(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.is_empty() || y.len() != y_hat.len() {
        return Err(Error::Domain(format!(
            "metric needs equal non-empty lengths, got {} and {}",
            y.len(),
            y_hat.len()
        )));
    }
    Ok(())
}

/// Root mean squared error.
pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    let sse: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / y.len() as f64).sqrt())
}

/// Mean absolute error.
pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// Coefficient of determination `1 − SS_res / SS_tot`. Negative when the
/// predictions are worse than the mean of `y`.
pub fn r_squared(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    if y.len() < 2 {
        return Err(Error::Domain("r² needs at least two samples".into()));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Domain("r² is undefined for constant targets".into()));
    }
    let ss_res: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Scaled,
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    pub r2: f64,
    pub n: usize,
    pub space: Space,
}

impl Metrics {
    pub fn compute(y: &[f64], y_hat: &[f64], space: Space) -> Result<Self> {
        Ok(Metrics {
            rmse: rmse(y, y_hat)?,
            mae: mae(y, y_hat)?,
            r2: r_squared(y, y_hat)?,
            n: y.len(),
            space,
        })
    }

    /// Metrics after mapping both series back to physical units.
    pub fn raw(y_scaled: &[f64], y_hat_scaled: &[f64], scaler: &ScalerParams) -> Result<Self> {
        let y: Vec<f64> = y_scaled.iter().map(|&v| scaler.invert(v)).collect();
        let p: Vec<f64> = y_hat_scaled.iter().map(|&v| scaler.invert(v)).collect();
        Self::compute(&y, &p, Space::Raw)
    }
}
