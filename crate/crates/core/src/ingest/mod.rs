//! OHLCV ingestion and the 29-column indicator bank.
//!
//! Bars arrive as CSV rows `time,open,high,low,close,volume,amount` with
//! minute-precision timestamps (`YYYYMMDDhhmm`). Indicators are computed on
//! raw prices first; the close column is then log-differenced and every
//! column standardised (see [`transform`]) before windowing.

pub mod indicators;
pub mod transform;
pub mod window;

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use chrono::NaiveDateTime;

use crate::error::{Error, Result};
use indicators::Column;

pub const TIME_FORMAT: &str = "%Y%m%d%H%M";

#[derive(Debug, Clone, PartialEq)]
pub struct Bar {
    pub time: NaiveDateTime,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    /// Traded volume in shares.
    pub volume: f64,
    /// Traded value in currency units.
    pub amount: f64,
}

impl Bar {
    fn validate(&self, line: usize) -> Result<()> {
        let vals = [self.open, self.high, self.low, self.close, self.volume, self.amount];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse { line, msg: "non-finite field".into() });
        }
        if self.open <= 0.0 || self.high <= 0.0 || self.low <= 0.0 || self.close <= 0.0 {
            return Err(Error::Parse { line, msg: "prices must be positive".into() });
        }
        if self.low > self.open.min(self.close) || self.high < self.open.max(self.close) {
            return Err(Error::Parse {
                line,
                msg: format!(
                    "inconsistent OHLC: low {} / high {} do not bracket open {} / close {}",
                    self.low, self.high, self.open, self.close
                ),
            });
        }
        if self.volume < 0.0 || self.amount < 0.0 {
            return Err(Error::Parse { line, msg: "volume/amount must be >= 0".into() });
        }
        Ok(())
    }
}

/// Reads bars from CSV, validating field domains and strict chronological
/// order. A header row is tolerated and skipped.
pub fn load_bars<R: Read>(reader: R) -> Result<Vec<Bar>> {
    let mut bars = Vec::new();
    let buf = BufReader::new(reader);
    for (idx, line) in buf.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if idx == 0 && NaiveDateTime::parse_from_str(fields[0], TIME_FORMAT).is_err() {
            continue; // header
        }
        if fields.len() != 7 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 7 fields, got {}", fields.len()),
            });
        }
        let time = NaiveDateTime::parse_from_str(fields[0], TIME_FORMAT).map_err(|e| {
            Error::Parse { line: line_no, msg: format!("bad timestamp {:?}: {e}", fields[0]) }
        })?;
        let mut nums = [0.0f64; 6];
        for (i, f) in fields[1..].iter().enumerate() {
            nums[i] = f.parse().map_err(|e| Error::Parse {
                line: line_no,
                msg: format!("bad number {f:?}: {e}"),
            })?;
        }
        let bar = Bar {
            time,
            open: nums[0],
            high: nums[1],
            low: nums[2],
            close: nums[3],
            volume: nums[4],
            amount: nums[5],
        };
        bar.validate(line_no)?;
        if let Some(prev) = bars.last() {
            let prev: &Bar = prev;
            if bar.time <= prev.time {
                return Err(Error::Ordering {
                    line: line_no,
                    msg: format!("timestamp {} not after {}", bar.time, prev.time),
                });
            }
        }
        bars.push(bar);
    }
    if bars.is_empty() {
        return Err(Error::Parse { line: 1, msg: "no data rows".into() });
    }
    Ok(bars)
}

pub fn load_bars_file(path: &Path) -> Result<Vec<Bar>> {
    load_bars(std::fs::File::open(path)?)
}

pub fn save_bars<W: Write>(mut w: W, bars: &[Bar]) -> Result<()> {
    writeln!(w, "time,open,high,low,close,volume,amount")?;
    for b in bars {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            b.time.format(TIME_FORMAT),
            b.open,
            b.high,
            b.low,
            b.close,
            b.volume,
            b.amount
        )?;
    }
    Ok(())
}

/// Column-major feature table with a validity mask. Leading cells of a
/// column are invalid until its warm-up window is filled; a cell can also
/// be invalid where its formula degenerates (zero denominator).
#[derive(Debug, Clone)]
pub struct FeatureFrame {
    pub times: Vec<NaiveDateTime>,
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
    pub valid: Vec<Vec<bool>>,
}

impl FeatureFrame {
    pub fn n_rows(&self) -> usize {
        self.times.len()
    }

    pub fn n_cols(&self) -> usize {
        self.names.len()
    }

    pub fn col_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.col_index(name).map(|i| self.columns[i].as_slice())
    }

    /// First row from which every column is valid through the end.
    pub fn first_fully_valid_row(&self) -> Option<usize> {
        let n = self.n_rows();
        let mut start = 0;
        for col in &self.valid {
            let first = (0..n).find(|&t| col[t..].iter().all(|&v| v))?;
            start = start.max(first);
        }
        Some(start)
    }

    /// Copies rows `[from, to)` into a new frame.
    pub fn slice_rows(&self, from: usize, to: usize) -> FeatureFrame {
        FeatureFrame {
            times: self.times[from..to].to_vec(),
            names: self.names.clone(),
            columns: self.columns.iter().map(|c| c[from..to].to_vec()).collect(),
            valid: self.valid.iter().map(|c| c[from..to].to_vec()).collect(),
        }
    }

    /// CSV export: one value column plus one `<name>__valid` sidecar per
    /// feature. Invalid cells are written empty.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "time")?;
        for name in &self.names {
            write!(w, ",{name},{name}__valid")?;
        }
        writeln!(w)?;
        for t in 0..self.n_rows() {
            write!(w, "{}", self.times[t].format(TIME_FORMAT))?;
            for c in 0..self.n_cols() {
                if self.valid[c][t] {
                    write!(w, ",{},1", self.columns[c][t])?;
                } else {
                    write!(w, ",,0")?;
                }
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// The four decomposed price columns, in canonical order.
pub const PRICE_COLUMNS: [&str; 4] = ["open", "high", "low", "close"];

/// Canonical column order of the 29-feature bank.
pub fn feature_names() -> Vec<String> {
    let mut names: Vec<String> = vec![
        "open".into(),
        "high".into(),
        "low".into(),
        "close".into(),
        "weighted_price".into(),
        "volume_stock".into(),
        "volume_rmb".into(),
        "high_minus_low".into(),
    ];
    for lag in 1..=6 {
        names.push(format!("return_{lag}"));
    }
    names.extend(
        [
            "corr_ma5_ma30",
            "sum3",
            "sum5",
            "sum5_minus_sum3",
            "abs_sum5_minus_sum3",
            "sqrt_sum5sq_minus_sum3sq",
            "rsi_6",
            "rsi_14",
            "roc_9",
            "roc_14",
            "williams_r_14",
            "atr_5",
            "atr_10",
            "cci_20",
            "dema_10",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    names
}

/// Builds the full 29-column bank from raw bars. Windows follow the usual
/// conventions where the source leaves them open: Williams %R 14,
/// CCI 20, DEMA 10, MA5/MA30 correlation over 30 bars.
pub fn build_feature_frame(bars: &[Bar]) -> Result<FeatureFrame> {
    if bars.len() < 60 {
        return Err(Error::Sizing(format!(
            "need at least 60 bars for the indicator bank, got {}",
            bars.len()
        )));
    }
    let closes: Vec<f64> = bars.iter().map(|b| b.close).collect();
    let names = feature_names();
    let mut cols: Vec<Column> = Vec::with_capacity(names.len());

    cols.push(Column::full(bars.iter().map(|b| b.open).collect()));
    cols.push(Column::full(bars.iter().map(|b| b.high).collect()));
    cols.push(Column::full(bars.iter().map(|b| b.low).collect()));
    cols.push(Column::full(closes.clone()));
    cols.push(indicators::weighted_price(bars));
    cols.push(Column::full(bars.iter().map(|b| b.volume).collect()));
    cols.push(Column::full(bars.iter().map(|b| b.amount).collect()));
    cols.push(Column::full(bars.iter().map(|b| b.high - b.low).collect()));
    for lag in 1..=6 {
        cols.push(indicators::price_return(&closes, lag));
    }
    cols.push(indicators::ma_correlation(&closes, 5, 30, 30));
    cols.push(indicators::rolling_sum(&closes, 3));
    cols.push(indicators::rolling_sum(&closes, 5));
    let (diff, abs_diff, sqrt_diff) = indicators::sum_spreads(&closes);
    cols.push(diff);
    cols.push(abs_diff);
    cols.push(sqrt_diff);
    cols.push(indicators::rsi(&closes, 6));
    cols.push(indicators::rsi(&closes, 14));
    cols.push(indicators::roc(&closes, 9));
    cols.push(indicators::roc(&closes, 14));
    cols.push(indicators::williams_r(bars, 14));
    cols.push(indicators::atr(bars, 5)?);
    cols.push(indicators::atr(bars, 10)?);
    cols.push(indicators::cci(bars, 20));
    cols.push(indicators::dema(&closes, 10));

    debug_assert_eq!(cols.len(), names.len());
    let mut columns = Vec::with_capacity(cols.len());
    let mut valid = Vec::with_capacity(cols.len());
    for c in cols {
        columns.push(c.values);
        valid.push(c.valid);
    }
    Ok(FeatureFrame { times: bars.iter().map(|b| b.time).collect(), names, columns, valid })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bar_line(t: &str, o: f64, h: f64, l: f64, c: f64) -> String {
        format!("{t},{o},{h},{l},{c},1000,{}", 1000.0 * (h + l) / 2.0)
    }

    #[test]
    fn loads_and_validates_bars() {
        let csv = format!(
            "time,open,high,low,close,volume,amount\n{}\n{}\n",
            bar_line("200401050930", 10.0, 10.5, 9.9, 10.2),
            bar_line("200401051000", 10.2, 10.4, 10.1, 10.3),
        );
        let bars = load_bars(csv.as_bytes()).unwrap();
        assert_eq!(bars.len(), 2);
        assert_eq!(bars[0].close, 10.2);
    }

    #[test]
    fn rejects_out_of_order_rows() {
        let csv = format!(
            "{}\n{}\n",
            bar_line("200401051000", 10.0, 10.5, 9.9, 10.2),
            bar_line("200401050930", 10.2, 10.4, 10.1, 10.3),
        );
        match load_bars(csv.as_bytes()) {
            Err(Error::Ordering { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected ordering error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_inconsistent_ohlc_with_line_number() {
        let csv = format!(
            "{}\n{}\n",
            bar_line("200401050930", 10.0, 10.5, 9.9, 10.2),
            bar_line("200401051000", 10.2, 10.1, 10.0, 10.3), // high < close
        );
        match load_bars(csv.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bank_has_29_columns() {
        assert_eq!(feature_names().len(), 29);
    }

    #[test]
    fn csv_round_trip() {
        let csv = format!(
            "{}\n{}\n",
            bar_line("200401050930", 10.0, 10.5, 9.9, 10.2),
            bar_line("200401051000", 10.2, 10.4, 10.1, 10.3),
        );
        let bars = load_bars(csv.as_bytes()).unwrap();
        let mut out = Vec::new();
        save_bars(&mut out, &bars).unwrap();
        let again = load_bars(out.as_slice()).unwrap();
        assert_eq!(bars, again);
    }
}
