//! Log-difference and standardisation transforms.

use super::indicators::Column;
use super::FeatureFrame;
use crate::error::{Error, Result};

/// `log(x_t / x_{t-1})`; the first cell is invalid. Inputs must be
/// strictly positive wherever consumed.
pub fn log_diff(x: &[f64], valid: &[bool]) -> Result<Column> {
    let n = x.len();
    let mut out = Column::invalid(n);
    for t in 1..n {
        if !(valid[t] && valid[t - 1]) {
            continue;
        }
        if x[t] <= 0.0 || x[t - 1] <= 0.0 {
            return Err(Error::Domain(format!(
                "log_diff: non-positive value at row {t} ({} / {})",
                x[t],
                x[t - 1]
            )));
        }
        out.set_cell(t, (x[t] / x[t - 1]).ln());
    }
    Ok(out)
}

impl Column {
    pub(crate) fn set_cell(&mut self, t: usize, v: f64) {
        self.values[t] = v;
        self.valid[t] = true;
    }
}

/// Per-column mean and population variance, estimated on the training rows
/// only so the transform never sees test data.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct StandardizationStats {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Number of leading rows the statistics were estimated on.
    pub fit_rows: usize,
}

impl StandardizationStats {
    /// Fits on the valid cells of rows `[0, fit_rows)` of each column.
    pub fn fit(frame: &FeatureFrame, fit_rows: usize) -> Result<StandardizationStats> {
        if fit_rows == 0 || fit_rows > frame.n_rows() {
            return Err(Error::Sizing(format!(
                "standardize: fit range {fit_rows} outside frame of {} rows",
                frame.n_rows()
            )));
        }
        let mut mean = Vec::with_capacity(frame.n_cols());
        let mut std = Vec::with_capacity(frame.n_cols());
        for c in 0..frame.n_cols() {
            let vals: Vec<f64> = (0..fit_rows)
                .filter(|&t| frame.valid[c][t])
                .map(|t| frame.columns[c][t])
                .collect();
            if vals.len() < 2 {
                return Err(Error::Sizing(format!(
                    "standardize: column {} has {} valid training cells",
                    frame.names[c],
                    vals.len()
                )));
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
            if var <= 0.0 {
                return Err(Error::Domain(format!(
                    "standardize: column {} has zero variance on the training rows",
                    frame.names[c]
                )));
            }
            mean.push(m);
            std.push(var.sqrt());
        }
        Ok(StandardizationStats { names: frame.names.clone(), mean, std, fit_rows })
    }

    /// `(x - mean) / std` applied to every valid cell.
    pub fn apply(&self, frame: &FeatureFrame) -> Result<FeatureFrame> {
        if frame.names != self.names {
            return Err(Error::Contract("standardize: column set changed since fit".into()));
        }
        let mut out = frame.clone();
        for c in 0..frame.n_cols() {
            for t in 0..frame.n_rows() {
                if out.valid[c][t] {
                    out.columns[c][t] = (out.columns[c][t] - self.mean[c]) / self.std[c];
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`apply`](Self::apply) for a single column.
    pub fn unapply_column(&self, name: &str, values: &[f64]) -> Result<Vec<f64>> {
        let c = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Contract(format!("unknown column {name}")))?;
        Ok(values.iter().map(|v| v * self.std[c] + self.mean[c]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn frame(cols: Vec<(&str, Vec<f64>)>) -> FeatureFrame {
        let n = cols[0].1.len();
        FeatureFrame {
            times: (0..n)
                .map(|i| {
                    NaiveDate::from_ymd_opt(2004, 1, 5).unwrap().and_hms_opt(9, 30, 0).unwrap()
                        + chrono::Duration::minutes(i as i64)
                })
                .collect(),
            names: cols.iter().map(|(n, _)| n.to_string()).collect(),
            valid: cols.iter().map(|(_, v)| vec![true; v.len()]).collect(),
            columns: cols.into_iter().map(|(_, v)| v).collect(),
        }
    }

    #[test]
    fn log_diff_basic() {
        let x = [1.0, std::f64::consts::E, std::f64::consts::E];
        let col = log_diff(&x, &[true; 3]).unwrap();
        assert!(!col.valid[0]);
        assert!((col.values[1] - 1.0).abs() < 1e-15);
        assert_eq!(col.values[2], 0.0);
    }

    #[test]
    fn log_diff_rejects_non_positive() {
        assert!(log_diff(&[1.0, -2.0, 3.0], &[true; 3]).is_err());
        assert!(log_diff(&[1.0, 0.0, 3.0], &[true; 3]).is_err());
    }

    #[test]
    fn standardize_round_trip_and_train_only_stats() {
        let f = frame(vec![("a", vec![1.0, 2.0, 3.0, 4.0, 100.0])]);
        // Fit on the first 4 rows only; the outlier must not leak in.
        let stats = StandardizationStats::fit(&f, 4).unwrap();
        assert!((stats.mean[0] - 2.5).abs() < 1e-15);
        let z = stats.apply(&f).unwrap();
        let back = stats.unapply_column("a", &z.columns[0]).unwrap();
        for (orig, b) in f.columns[0].iter().zip(&back) {
            assert!((orig - b).abs() < 1e-9 * orig.abs().max(1.0));
        }
        // Standardised training cells have mean ~0 population-var ~1.
        let m: f64 = z.columns[0][..4].iter().sum::<f64>() / 4.0;
        let v: f64 = z.columns[0][..4].iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn standardize_rejects_constant_column() {
        let f = frame(vec![("a", vec![3.0; 10])]);
        assert!(StandardizationStats::fit(&f, 10).is_err());
    }
}
