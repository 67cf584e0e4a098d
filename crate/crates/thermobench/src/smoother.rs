//! Locally weighted linear regression against time-of-week with a tricube
//! kernel, plus k-fold cross-validated bandwidth selection. Produces the
//! conditional-expectation series used to difference out internal gains.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Time-of-week indices per week at 15-minute steps.
pub const WEEK_PERIOD_15MIN: f64 = 672.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Kernel {
    Tricube,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmootherConfig {
    /// Bandwidth in time-of-week index units.
    pub bandwidth: f64,
    pub kernel: Kernel,
    pub cv_folds: usize,
    pub bandwidth_grid: Vec<f64>,
    /// Circular period of the position covariate (one week of indices).
    pub period: f64,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        SmootherConfig {
            bandwidth: 16.0,
            kernel: Kernel::Tricube,
            cv_folds: 5,
            bandwidth_grid: vec![4.0, 8.0, 16.0, 32.0, 64.0],
            period: WEEK_PERIOD_15MIN,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SmoothedSeries {
    pub values: Vec<f64>,
    pub bandwidth_used: f64,
}

/// Tricube kernel: (1 - |d|^3)^3 on |d| < 1, zero outside.
pub fn tricube_weight(scaled_distance: f64) -> f64 {
    let a = scaled_distance.abs();
    if a < 1.0 {
        let t = 1.0 - a * a * a;
        t * t * t
    } else {
        0.0
    }
}

/// Signed circular offset from `p` to `t`, in (-period/2, period/2].
fn circular_offset(t: f64, p: f64, period: f64) -> f64 {
    let mut d = (t - p) % period;
    if d > period / 2.0 {
        d -= period;
    } else if d <= -period / 2.0 {
        d += period;
    }
    d
}

/// Weighted local-linear fit over (offset, value) pairs, evaluated at offset 0.
/// Returns None when fewer than 2 distinct positions carry weight.
fn local_fit(offsets: &[f64], values: &[f64], weights: &[f64]) -> Option<f64> {
    let mut sw = 0.0;
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut first: Option<f64> = None;
    let mut distinct = false;
    for ((&x, &y), &w) in offsets.iter().zip(values).zip(weights) {
        if w <= 0.0 {
            continue;
        }
        match first {
            None => first = Some(x),
            Some(f) => {
                if (x - f).abs() > 1e-12 {
                    distinct = true;
                }
            }
        }
        sw += w;
        sx += w * x;
        sy += w * y;
        sxx += w * x * x;
        sxy += w * x * y;
    }
    if sw == 0.0 || first.is_none() {
        return None;
    }
    if !distinct {
        return None;
    }
    let det = sw * sxx - sx * sx;
    if det.abs() < 1e-12 * sw.max(1.0) {
        return None;
    }
    // intercept of the weighted affine fit evaluated at the query point
    Some((sy * sxx - sx * sxy) / det)
}

/// Predict the smoothed value at circular position `p` from (positions, series)
/// with the tricube kernel at the given bandwidth.
fn predict_at(
    p: f64,
    positions: &[f64],
    series: &[f64],
    bandwidth: f64,
    period: f64,
) -> Result<f64> {
    let mut offsets = Vec::new();
    let mut vals = Vec::new();
    let mut weights = Vec::new();
    for (&t, &y) in positions.iter().zip(series) {
        let d = circular_offset(t, p, period);
        let w = tricube_weight(d / bandwidth);
        if w > 0.0 {
            offsets.push(d);
            vals.push(y);
            weights.push(w);
        }
    }
    let distinct = {
        let mut ds: Vec<i64> = offsets.iter().map(|d| (d * 1e9).round() as i64).collect();
        ds.sort_unstable();
        ds.dedup();
        ds.len()
    };
    local_fit(&offsets, &vals, &weights)
        .ok_or(Error::DegenerateWindow { position: p, distinct })
}

/// Smooth a series against its circular time-of-week positions.
///
/// Positions typically repeat across weeks; the fit is computed once per
/// distinct position and reused.
pub fn lwlr_smooth(
    series: &[f64],
    positions: &[f64],
    cfg: &SmootherConfig,
) -> Result<SmoothedSeries> {
    lwlr_smooth_with_bandwidth(series, positions, cfg.bandwidth, cfg.period)
}

pub fn lwlr_smooth_with_bandwidth(
    series: &[f64],
    positions: &[f64],
    bandwidth: f64,
    period: f64,
) -> Result<SmoothedSeries> {
    if series.len() != positions.len() {
        return Err(Error::Shape(format!(
            "series length {} != positions length {}",
            series.len(),
            positions.len()
        )));
    }
    if bandwidth <= 0.0 {
        return Err(Error::Config("bandwidth must be positive".into()));
    }
    // cache fits per distinct position
    let mut cache: std::collections::HashMap<i64, f64> = std::collections::HashMap::new();
    let mut out = Vec::with_capacity(series.len());
    for &p in positions {
        let key = (p * 1e9).round() as i64;
        let v = match cache.get(&key) {
            Some(&v) => v,
            None => {
                let v = predict_at(p, positions, series, bandwidth, period)?;
                cache.insert(key, v);
                v
            }
        };
        out.push(v);
    }
    Ok(SmoothedSeries { values: out, bandwidth_used: bandwidth })
}

/// Pick the grid bandwidth minimizing mean held-out squared prediction error
/// over contiguous-block folds. Ties break toward the larger bandwidth.
pub fn select_bandwidth(series: &[f64], positions: &[f64], cfg: &SmootherConfig) -> Result<f64> {
    if cfg.bandwidth_grid.is_empty() {
        return Err(Error::BandwidthSelection("empty bandwidth grid".into()));
    }
    if cfg.cv_folds < 2 {
        return Err(Error::Config("cv_folds must be >= 2".into()));
    }
    let n = series.len();
    if n < cfg.cv_folds {
        return Err(Error::InsufficientData(format!(
            "series length {n} < cv_folds {}",
            cfg.cv_folds
        )));
    }
    let mut best: Option<(f64, f64)> = None; // (mse, bandwidth)
    for &h in &cfg.bandwidth_grid {
        let mut sse = 0.0;
        let mut count = 0usize;
        let mut degenerate = false;
        for f in 0..cfg.cv_folds {
            let lo = f * n / cfg.cv_folds;
            let hi = (f + 1) * n / cfg.cv_folds;
            let mut tr_pos = Vec::with_capacity(n - (hi - lo));
            let mut tr_val = Vec::with_capacity(n - (hi - lo));
            for i in (0..lo).chain(hi..n) {
                tr_pos.push(positions[i]);
                tr_val.push(series[i]);
            }
            // fits per distinct held-out position
            let mut cache: std::collections::HashMap<i64, f64> = std::collections::HashMap::new();
            for i in lo..hi {
                let key = (positions[i] * 1e9).round() as i64;
                let pred = match cache.get(&key) {
                    Some(&v) => Some(v),
                    None => match predict_at(positions[i], &tr_pos, &tr_val, h, cfg.period) {
                        Ok(v) => {
                            cache.insert(key, v);
                            Some(v)
                        }
                        Err(_) => None,
                    },
                };
                match pred {
                    Some(v) => {
                        sse += (v - series[i]) * (v - series[i]);
                        count += 1;
                    }
                    None => degenerate = true,
                }
            }
        }
        if degenerate || count == 0 {
            continue;
        }
        let mse = sse / count as f64;
        let better = match best {
            None => true,
            // ties (within fp slop) go to the larger bandwidth
            Some((bm, bh)) => mse < bm - 1e-12 || (mse <= bm + 1e-12 && h > bh),
        };
        if better {
            best = Some((mse, h));
        }
    }
    best.map(|(_, h)| h)
        .ok_or_else(|| Error::BandwidthSelection("all grid bandwidths degenerate".into()))
}
