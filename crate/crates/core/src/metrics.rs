//! Forecast error metrics in data units.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const DEFAULT_MAPE_THRESHOLD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent; `None` when every target was masked.
    pub mape: Option<f64>,
}

/// MAE, RMSE and MAPE (percent, over entries with `|truth| > threshold`).
pub fn compute_metrics(pred: &Matrix, truth: &Matrix, threshold: f64) -> Result<Metrics> {
    if pred.shape() != truth.shape() {
        return Err(Error::Shape {
            op: "metrics",
            expected: truth.shape(),
            found: pred.shape(),
        });
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("no entries to score".into()));
    }
    let (mut abs, mut sq, mut pct, mut kept) = (0.0, 0.0, 0.0, 0usize);
    for (&p, &y) in pred.as_slice().iter().zip(truth.as_slice()) {
        let e = p - y;
        abs += libm::fabs(e);
        sq += e * e;
        if libm::fabs(y) > threshold {
            pct += libm::fabs(e) / libm::fabs(y);
            kept += 1;
        }
    }
    let n = truth.len() as f64;
    Ok(Metrics {
        mae: abs / n,
        rmse: libm::sqrt(sq / n),
        mape: (kept > 0).then(|| 100.0 * pct / kept as f64),
    })
}

/// Weighted mean of per-client metrics. MAPE averages over the clients
/// where it is defined.
pub fn weighted_metrics(parts: &[(Metrics, f64)]) -> Result<Metrics> {
    let total: f64 = parts.iter().map(|(_, w)| w).sum();
    if !(total > 0.0) || parts.iter().any(|(_, w)| !(*w >= 0.0)) {
        return Err(Error::InvalidArgument("metric weights must be non-negative with a positive sum".into()));
    }
    let mae = parts.iter().map(|(m, w)| m.mae * w).sum::<f64>() / total;
    let rmse = parts.iter().map(|(m, w)| m.rmse * w).sum::<f64>() / total;
    let (mut mape, mut mw) = (0.0, 0.0);
    for (m, w) in parts {
        if let Some(v) = m.mape {
            mape += v * w;
            mw += w;
        }
    }
    Ok(Metrics {
        mae,
        rmse,
        mape: (mw > 0.0).then(|| mape / mw),
    })
}
