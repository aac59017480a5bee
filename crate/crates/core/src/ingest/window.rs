//! Chronological split and sliding-window extraction.

use chrono::{Datelike, NaiveDateTime, Timelike};

use crate::error::{Error, Result};

/// Calendar mark channels per timestamp: minute, hour, weekday (Monday=0),
/// day of month and month. Vocabulary sizes leave room for the 1-based
/// day/month values.
pub const MARK_DIMS: usize = 5;
pub const MARK_VOCAB: [usize; MARK_DIMS] = [60, 24, 7, 32, 13];

pub fn time_marks(t: &NaiveDateTime) -> [u32; MARK_DIMS] {
    [
        t.minute(),
        t.hour(),
        t.weekday().num_days_from_monday(),
        t.day(),
        t.month(),
    ]
}

/// Windowed samples over a contiguous row range. Layouts are flat
/// row-major: `inputs[s][t][f]`, `targets[s][h]`, marks `[s][t][c]`.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    pub n_samples: usize,
    pub l_x: usize,
    pub l_y: usize,
    pub d_x: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub input_marks: Vec<u32>,
    pub horizon_marks: Vec<u32>,
    /// Target history over the last `l_y` input steps (decoder warm start).
    pub dec_start: Vec<f64>,
    /// Absolute row index (within the source range) where each window starts.
    pub start_rows: Vec<usize>,
}

impl WindowedDataset {
    pub fn input(&self, s: usize) -> &[f64] {
        &self.inputs[s * self.l_x * self.d_x..(s + 1) * self.l_x * self.d_x]
    }
    pub fn target(&self, s: usize) -> &[f64] {
        &self.targets[s * self.l_y..(s + 1) * self.l_y]
    }
    pub fn input_mark(&self, s: usize) -> &[u32] {
        &self.input_marks[s * self.l_x * MARK_DIMS..(s + 1) * self.l_x * MARK_DIMS]
    }
    pub fn horizon_mark(&self, s: usize) -> &[u32] {
        &self.horizon_marks[s * self.l_y * MARK_DIMS..(s + 1) * self.l_y * MARK_DIMS]
    }
    pub fn dec_start_of(&self, s: usize) -> &[f64] {
        &self.dec_start[s * self.l_y..(s + 1) * self.l_y]
    }

    /// Copies samples `[lo, hi)` into a standalone dataset.
    pub fn subrange(&self, lo: usize, hi: usize) -> WindowedDataset {
        assert!(lo <= hi && hi <= self.n_samples, "subrange {lo}..{hi} of {}", self.n_samples);
        let (lx, ly, dx) = (self.l_x, self.l_y, self.d_x);
        WindowedDataset {
            n_samples: hi - lo,
            l_x: lx,
            l_y: ly,
            d_x: dx,
            inputs: self.inputs[lo * lx * dx..hi * lx * dx].to_vec(),
            targets: self.targets[lo * ly..hi * ly].to_vec(),
            input_marks: self.input_marks[lo * lx * MARK_DIMS..hi * lx * MARK_DIMS].to_vec(),
            horizon_marks: self.horizon_marks[lo * ly * MARK_DIMS..hi * ly * MARK_DIMS].to_vec(),
            dec_start: self.dec_start[lo * ly..hi * ly].to_vec(),
            start_rows: self.start_rows[lo..hi].to_vec(),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SplitInfo {
    pub n_rows: usize,
    /// First row of the test region; training windows live strictly below.
    pub split_row: usize,
    pub train_samples: usize,
    pub test_samples: usize,
}

/// Cuts `features` (`[n][d]`, row-major by feature vectors per row) into
/// train/test windows at `split_ratio` of the rows, stride 1. Input spans
/// `[i, i+l_x)`, target spans `[i+l_x, i+l_x+l_y)`; no window crosses the
/// split row in either direction, so the maximum training index is below
/// every test index.
#[allow(clippy::too_many_arguments)]
pub fn split_and_window(
    features: &[f64],
    d_x: usize,
    target: &[f64],
    target_col: usize,
    times: &[NaiveDateTime],
    l_x: usize,
    l_y: usize,
    split_ratio: f64,
) -> Result<(WindowedDataset, WindowedDataset, SplitInfo)> {
    let n = times.len();
    if d_x == 0 || features.len() != n * d_x || target.len() != n {
        return Err(Error::Sizing("split_and_window: inconsistent matrix shape".into()));
    }
    if target_col >= d_x {
        return Err(Error::Sizing(format!(
            "split_and_window: target column {target_col} out of {d_x}"
        )));
    }
    if !(0.0 < split_ratio && split_ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {split_ratio} outside (0, 1)")));
    }
    if l_x == 0 || l_y == 0 {
        return Err(Error::Config("window lengths must be >= 1".into()));
    }
    let split_row = (n as f64 * split_ratio).floor() as usize;
    let window = l_x + l_y;
    if split_row < window {
        return Err(Error::Sizing(format!(
            "split_and_window: {split_row} training rows cannot hold a {window}-row window"
        )));
    }

    let cut = |lo: usize, hi: usize| -> WindowedDataset {
        // Window i occupies rows [i, i + l_x + l_y); last start is hi+1-window.
        let count = (hi - lo + 2).saturating_sub(window);
        let mut ds = WindowedDataset {
            n_samples: count,
            l_x,
            l_y,
            d_x,
            inputs: Vec::with_capacity(count * l_x * d_x),
            targets: Vec::with_capacity(count * l_y),
            input_marks: Vec::with_capacity(count * l_x * MARK_DIMS),
            horizon_marks: Vec::with_capacity(count * l_y * MARK_DIMS),
            dec_start: Vec::with_capacity(count * l_y),
            start_rows: Vec::with_capacity(count),
        };
        for i in lo..lo + count {
            ds.start_rows.push(i);
            ds.inputs.extend_from_slice(&features[i * d_x..(i + l_x) * d_x]);
            ds.targets.extend_from_slice(&target[i + l_x..i + l_x + l_y]);
            ds.dec_start.extend_from_slice(&target[i + l_x - l_y..i + l_x]);
            for t in i..i + l_x {
                ds.input_marks.extend_from_slice(&time_marks(&times[t]));
            }
            for t in i + l_x..i + l_x + l_y {
                ds.horizon_marks.extend_from_slice(&time_marks(&times[t]));
            }
        }
        ds
    };

    // Train windows must end at split_row - 1; test windows start at the
    // split so their inputs never touch training targets.
    let train = cut(0, split_row - 1);
    let test = cut(split_row, n - 1);

    let info = SplitInfo {
        n_rows: n,
        split_row,
        train_samples: train.n_samples,
        test_samples: test.n_samples,
    };
    Ok((train, test, info))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn times(n: usize) -> Vec<NaiveDateTime> {
        (0..n)
            .map(|i| {
                NaiveDate::from_ymd_opt(1999, 10, 28).unwrap().and_hms_opt(9, 30, 0).unwrap()
                    + chrono::Duration::minutes(30 * i as i64)
            })
            .collect()
    }

    #[test]
    fn marks_have_expected_channels() {
        let t = NaiveDate::from_ymd_opt(1999, 10, 28).unwrap().and_hms_opt(9, 50, 0).unwrap();
        // 1999-10-28 is a Thursday.
        assert_eq!(time_marks(&t), [50, 9, 3, 28, 10]);
        for (m, v) in time_marks(&t).iter().zip(MARK_VOCAB) {
            assert!((*m as usize) < v);
        }
    }

    #[test]
    fn window_counts_match_formula() {
        let n = 1000;
        let d = 3;
        let feats: Vec<f64> = (0..n * d).map(|i| i as f64).collect();
        let target: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let (train, test, info) =
            split_and_window(&feats, d, &target, 0, &times(n), 256, 64, 0.9).unwrap();
        assert_eq!(info.split_row, 900);
        // 900 - 256 - 64 + 1 = 581 training samples.
        assert_eq!(train.n_samples, 581);
        // 100 test rows -> none fit a 320 window... spare the boundary:
        assert_eq!(test.n_samples, 0);
    }

    #[test]
    fn no_window_crosses_the_split() {
        let n = 400;
        let d = 2;
        let feats: Vec<f64> = (0..n * d).map(|i| i as f64).collect();
        let target: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let (train, test, info) =
            split_and_window(&feats, d, &target, 0, &times(n), 32, 8, 0.8).unwrap();
        assert_eq!(info.split_row, 320);
        let max_train_row = train.start_rows.iter().max().unwrap() + 32 + 8 - 1;
        assert!(max_train_row < 320);
        let min_test_row = *test.start_rows.iter().min().unwrap();
        assert!(min_test_row >= 320);
        assert!(train.n_samples > 0 && test.n_samples > 0);
    }

    #[test]
    fn window_contents_are_contiguous() {
        let n = 100;
        let d = 2;
        let feats: Vec<f64> = (0..n * d).map(|i| i as f64).collect();
        let target: Vec<f64> = (0..n).map(|i| 1000.0 + i as f64).collect();
        let (train, _, _) =
            split_and_window(&feats, d, &target, 1, &times(n), 10, 5, 0.9).unwrap();
        let s = 3; // starts at row 3
        let inp = train.input(s);
        assert_eq!(inp[0], (3 * d) as f64);
        assert_eq!(train.target(s)[0], 1000.0 + 13.0);
        assert_eq!(train.dec_start_of(s)[0], 1000.0 + 8.0);
        assert_eq!(train.input_mark(s).len(), 10 * MARK_DIMS);
        assert_eq!(train.horizon_mark(s).len(), 5 * MARK_DIMS);
    }

    #[test]
    fn rejects_bad_ratio_and_shapes() {
        let feats = vec![0.0; 10];
        let t = times(10);
        assert!(split_and_window(&feats, 1, &vec![0.0; 10], 0, &t, 4, 2, 1.5).is_err());
        assert!(split_and_window(&feats, 1, &vec![0.0; 9], 0, &t, 4, 2, 0.9).is_err());
        assert!(split_and_window(&feats, 1, &vec![0.0; 10], 2, &t, 4, 2, 0.9).is_err());
    }

    #[test]
    fn subrange_matches_per_sample_views() {
        let n = 100;
        let d = 2;
        let feats: Vec<f64> = (0..n * d).map(|i| i as f64).collect();
        let target: Vec<f64> = (0..n).map(|i| 1000.0 + i as f64).collect();
        let (train, _, _) =
            split_and_window(&feats, d, &target, 1, &times(n), 10, 5, 0.9).unwrap();
        let sub = train.subrange(4, 9);
        assert_eq!(sub.n_samples, 5);
        for s in 0..5 {
            assert_eq!(sub.input(s), train.input(s + 4));
            assert_eq!(sub.target(s), train.target(s + 4));
            assert_eq!(sub.input_mark(s), train.input_mark(s + 4));
            assert_eq!(sub.horizon_mark(s), train.horizon_mark(s + 4));
            assert_eq!(sub.dec_start_of(s), train.dec_start_of(s + 4));
            assert_eq!(sub.start_rows[s], train.start_rows[s + 4]);
        }
    }
}
