//! Technical indicators over OHLCV bars.
//!
//! Every indicator returns a [`Column`]: values plus a validity mask.
//! Cells inside the warm-up window are invalid, as are cells whose formula
//! degenerates (division by zero). Moving averages are simple means and
//! windows are recomputed directly per position; at desk scale the clarity
//! is worth more than the saved arithmetic.

use super::Bar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl Column {
    pub fn full(values: Vec<f64>) -> Column {
        let valid = vec![true; values.len()];
        Column { values, valid }
    }

    pub fn invalid(n: usize) -> Column {
        Column { values: vec![f64::NAN; n], valid: vec![false; n] }
    }

    fn set(&mut self, t: usize, v: f64) {
        self.values[t] = v;
        self.valid[t] = true;
    }
}

fn window_mean(x: &[f64], t: usize, n: usize) -> f64 {
    x[t + 1 - n..=t].iter().sum::<f64>() / n as f64
}

/// `amount / volume`; invalid where no volume traded.
pub fn weighted_price(bars: &[Bar]) -> Column {
    let mut out = Column::invalid(bars.len());
    for (t, b) in bars.iter().enumerate() {
        if b.volume > 0.0 {
            out.set(t, b.amount / b.volume);
        }
    }
    out
}

/// Price return at `lag`: `close_t - close_{t-lag}`.
pub fn price_return(closes: &[f64], lag: usize) -> Column {
    let mut out = Column::invalid(closes.len());
    for t in lag..closes.len() {
        out.set(t, closes[t] - closes[t - lag]);
    }
    out
}

/// `100 * (close_t / close_{t-n} - 1)`.
pub fn roc(closes: &[f64], n: usize) -> Column {
    let mut out = Column::invalid(closes.len());
    for t in n..closes.len() {
        if closes[t - n] != 0.0 {
            out.set(t, 100.0 * (closes[t] / closes[t - n] - 1.0));
        }
    }
    out
}

/// Rolling sum of the last `n` closes.
pub fn rolling_sum(closes: &[f64], n: usize) -> Column {
    let mut out = Column::invalid(closes.len());
    for t in n - 1..closes.len() {
        out.set(t, closes[t + 1 - n..=t].iter().sum());
    }
    out
}

/// The Sum5/Sum3 spread family: `sum5-sum3`, `|sum5-sum3|` and
/// `sqrt(sum5^2 - sum3^2)` (invalid where the radicand is negative).
pub fn sum_spreads(closes: &[f64]) -> (Column, Column, Column) {
    let n = closes.len();
    let mut diff = Column::invalid(n);
    let mut abs_diff = Column::invalid(n);
    let mut sqrt_diff = Column::invalid(n);
    for t in 4..n {
        let s3: f64 = closes[t - 2..=t].iter().sum();
        let s5: f64 = closes[t - 4..=t].iter().sum();
        diff.set(t, s5 - s3);
        abs_diff.set(t, (s5 - s3).abs());
        let rad = s5 * s5 - s3 * s3;
        if rad >= 0.0 {
            sqrt_diff.set(t, rad.sqrt());
        }
    }
    (diff, abs_diff, sqrt_diff)
}

/// Rolling Pearson correlation of `MA(close, fast)` and `MA(close, slow)`
/// over `corr_window` bars. Invalid when either window has zero variance.
pub fn ma_correlation(closes: &[f64], fast: usize, slow: usize, corr_window: usize) -> Column {
    let n = closes.len();
    let mut out = Column::invalid(n);
    let warmup = slow - 1 + corr_window - 1;
    for t in warmup..n {
        let mut a = Vec::with_capacity(corr_window);
        let mut b = Vec::with_capacity(corr_window);
        for s in t + 1 - corr_window..=t {
            a.push(window_mean(closes, s, fast));
            b.push(window_mean(closes, s, slow));
        }
        let ma = a.iter().sum::<f64>() / corr_window as f64;
        let mb = b.iter().sum::<f64>() / corr_window as f64;
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for i in 0..corr_window {
            let da = a[i] - ma;
            let db = b[i] - mb;
            cov += da * db;
            va += da * da;
            vb += db * db;
        }
        if va > 0.0 && vb > 0.0 {
            out.set(t, cov / (va * vb).sqrt());
        }
    }
    out
}

/// Relative strength index over `n` bars: `100 - 100/(1 + MA(U)/MA(D))`
/// where `U`/`D` are the positive/negative close-to-close moves. All-down
/// windows give 0, all-up windows 100, fully flat windows 50.
pub fn rsi(closes: &[f64], n: usize) -> Column {
    let len = closes.len();
    let mut out = Column::invalid(len);
    let mut up = vec![0.0f64; len];
    let mut down = vec![0.0f64; len];
    for t in 1..len {
        let d = closes[t] - closes[t - 1];
        if d > 0.0 {
            up[t] = d;
        } else {
            down[t] = -d;
        }
    }
    for t in n..len {
        let mau = window_mean(&up, t, n);
        let mad = window_mean(&down, t, n);
        let v = if mad == 0.0 && mau == 0.0 {
            50.0
        } else if mad == 0.0 {
            100.0
        } else if mau == 0.0 {
            0.0
        } else {
            100.0 - 100.0 / (1.0 + mau / mad)
        };
        out.set(t, v);
    }
    out
}

/// True range at `t`: `max(high-low, high-prev_close, prev_close-low)`.
/// Undefined for the first bar.
pub fn true_range(bars: &[Bar], t: usize) -> Option<f64> {
    if t == 0 || t >= bars.len() {
        return None;
    }
    let b = &bars[t];
    let pc = bars[t - 1].close;
    Some((b.high - b.low).max(b.high - pc).max(pc - b.low))
}

/// Average true range: simple MA of TR over `n` bars; the first `n` cells
/// are the warm-up.
pub fn atr(bars: &[Bar], n: usize) -> Result<Column> {
    if n == 0 {
        return Err(Error::Config("atr: window must be >= 1".into()));
    }
    if n >= bars.len() {
        return Ok(Column::invalid(bars.len()));
    }
    let mut tr = vec![0.0f64; bars.len()];
    for t in 1..bars.len() {
        tr[t] = true_range(bars, t).unwrap();
    }
    let mut out = Column::invalid(bars.len());
    for t in n..bars.len() {
        out.set(t, window_mean(&tr, t, n));
    }
    Ok(out)
}

/// Per-bar stochastic `K = 100 (close-low)/(high-low)` (50 when the bar is
/// flat), smoothed by an `n`-bar moving average.
pub fn stochastic_oscillator(bars: &[Bar], n: usize) -> Column {
    let len = bars.len();
    let mut k = vec![0.0f64; len];
    for (t, b) in bars.iter().enumerate() {
        k[t] = if b.high == b.low { 50.0 } else { 100.0 * (b.close - b.low) / (b.high - b.low) };
    }
    let mut out = Column::invalid(len);
    for t in n - 1..len {
        out.set(t, window_mean(&k, t, n));
    }
    out
}

/// Williams %R over `n` bars: `-100 (highest_high - close)/(highest_high -
/// lowest_low)`; invalid when the range is flat.
pub fn williams_r(bars: &[Bar], n: usize) -> Column {
    let len = bars.len();
    let mut out = Column::invalid(len);
    for t in n - 1..len {
        let hh = bars[t + 1 - n..=t].iter().map(|b| b.high).fold(f64::NEG_INFINITY, f64::max);
        let ll = bars[t + 1 - n..=t].iter().map(|b| b.low).fold(f64::INFINITY, f64::min);
        if hh > ll {
            out.set(t, -100.0 * (hh - bars[t].close) / (hh - ll));
        }
    }
    out
}

/// Commodity channel index variant with `MC = MA(close, n)` and the signed
/// deviation `MD = MA(MC - close, n)`: `(TP - MC) / (0.015 MD)` where
/// `TP = (high+low+close)/3`. Invalid where `MD = 0`.
pub fn cci(bars: &[Bar], n: usize) -> Column {
    let len = bars.len();
    let mut out = Column::invalid(len);
    if n == 0 || len < 2 * n - 1 {
        return out;
    }
    let closes: Vec<f64> = bars.iter().map(|b| b.close).collect();
    let mut mc = vec![0.0f64; len];
    for t in n - 1..len {
        mc[t] = window_mean(&closes, t, n);
    }
    for t in 2 * (n - 1)..len {
        let md = (t + 1 - n..=t).map(|s| mc[s] - closes[s]).sum::<f64>() / n as f64;
        if md != 0.0 {
            let tp = (bars[t].high + bars[t].low + bars[t].close) / 3.0;
            out.set(t, (tp - mc[t]) / (0.015 * md));
        }
    }
    out
}

/// Exponential moving average with `alpha = 2/(n+1)`, seeded at the first
/// value. Defined from t = 0; consumers decide the warm-up.
pub fn ema(x: &[f64], n: usize) -> Vec<f64> {
    let alpha = 2.0 / (n as f64 + 1.0);
    let mut out = Vec::with_capacity(x.len());
    let mut prev = x[0];
    out.push(prev);
    for &v in &x[1..] {
        prev = alpha * v + (1.0 - alpha) * prev;
        out.push(prev);
    }
    out
}

/// Double EMA: `2 EMA(close, n) - EMA(EMA(close, n), n)`. Warm-up spans
/// two windows.
pub fn dema(closes: &[f64], n: usize) -> Column {
    let e1 = ema(closes, n);
    let e2 = ema(&e1, n);
    let mut out = Column::invalid(closes.len());
    for t in 2 * (n - 1)..closes.len() {
        out.set(t, 2.0 * e1[t] - e2[t]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn bars_from_closes(closes: &[f64]) -> Vec<Bar> {
        closes
            .iter()
            .enumerate()
            .map(|(i, &c)| Bar {
                time: NaiveDate::from_ymd_opt(2004, 1, 5)
                    .unwrap()
                    .and_hms_opt(9, 30, 0)
                    .unwrap()
                    + chrono::Duration::minutes(30 * i as i64),
                open: c,
                high: c + 0.5,
                low: c - 0.5,
                close: c,
                volume: 100.0,
                amount: 100.0 * c,
            })
            .collect()
    }

    #[test]
    fn atr_matches_hand_computation() {
        // TR sequence 1, 2, 3 with n = 3 -> final ATR 2.
        let bars = vec![
            Bar {
                time: NaiveDate::from_ymd_opt(2004, 1, 5).unwrap().and_hms_opt(9, 30, 0).unwrap(),
                open: 10.0,
                high: 10.5,
                low: 9.5,
                close: 10.0,
                volume: 1.0,
                amount: 10.0,
            },
            Bar {
                time: NaiveDate::from_ymd_opt(2004, 1, 5).unwrap().and_hms_opt(10, 0, 0).unwrap(),
                open: 10.0,
                high: 10.5,
                low: 9.5,
                close: 10.0,
                volume: 1.0,
                amount: 10.0,
            },
            Bar {
                time: NaiveDate::from_ymd_opt(2004, 1, 5).unwrap().and_hms_opt(10, 30, 0).unwrap(),
                open: 10.0,
                high: 11.0,
                low: 9.0,
                close: 10.0,
                volume: 1.0,
                amount: 10.0,
            },
            Bar {
                time: NaiveDate::from_ymd_opt(2004, 1, 5).unwrap().and_hms_opt(11, 0, 0).unwrap(),
                open: 10.0,
                high: 11.5,
                low: 8.5,
                close: 10.0,
                volume: 1.0,
                amount: 10.0,
            },
        ];
        assert_eq!(true_range(&bars, 1).unwrap(), 1.0);
        assert_eq!(true_range(&bars, 2).unwrap(), 2.0);
        assert_eq!(true_range(&bars, 3).unwrap(), 3.0);
        let col = atr(&bars, 3).unwrap();
        assert!(!col.valid[2]);
        assert!(col.valid[3]);
        assert!((col.values[3] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn atr_window_longer_than_series_is_all_invalid() {
        let bars = bars_from_closes(&[1.0, 2.0, 3.0]);
        let col = atr(&bars, 10).unwrap();
        assert!(col.valid.iter().all(|&v| !v));
    }

    #[test]
    fn rsi_extremes() {
        let up: Vec<f64> = (0..30).map(|i| 10.0 + i as f64).collect();
        let down: Vec<f64> = (0..30).map(|i| 100.0 - i as f64).collect();
        let flat = vec![10.0; 30];
        let rsi_up = rsi(&up, 6);
        let rsi_down = rsi(&down, 6);
        let rsi_flat = rsi(&flat, 6);
        assert_eq!(rsi_up.values[29], 100.0);
        assert_eq!(rsi_down.values[29], 0.0);
        assert_eq!(rsi_flat.values[29], 50.0);
        assert!(!rsi_up.valid[5] && rsi_up.valid[6]);
    }

    #[test]
    fn rsi_stays_in_range() {
        let closes: Vec<f64> =
            (0..200).map(|i| 10.0 + (i as f64 * 0.7).sin() * 2.0 + (i % 7) as f64 * 0.1).collect();
        let col = rsi(&closes, 14);
        for t in 0..closes.len() {
            if col.valid[t] {
                assert!((0.0..=100.0).contains(&col.values[t]));
            }
        }
    }

    #[test]
    fn stochastic_flat_bar_is_midpoint() {
        let mut bars = bars_from_closes(&[10.0, 10.0, 10.0]);
        for b in bars.iter_mut() {
            b.high = b.close;
            b.low = b.close;
        }
        let col = stochastic_oscillator(&bars, 2);
        assert_eq!(col.values[2], 50.0);
    }

    #[test]
    fn williams_r_bounds_and_flat_window() {
        let closes: Vec<f64> = (0..40).map(|i| 10.0 + ((i * 13) % 7) as f64 * 0.3).collect();
        let bars = bars_from_closes(&closes);
        let col = williams_r(&bars, 14);
        for t in 0..40 {
            if col.valid[t] {
                assert!((-100.0..=0.0).contains(&col.values[t]));
            }
        }
        let mut flat = bars_from_closes(&[5.0; 20]);
        for b in flat.iter_mut() {
            b.high = 5.0;
            b.low = 5.0;
            b.open = 5.0;
        }
        assert!(williams_r(&flat, 14).valid.iter().all(|&v| !v));
    }

    #[test]
    fn returns_and_roc() {
        let closes = [10.0, 11.0, 12.1, 13.31];
        let r1 = price_return(&closes, 1);
        assert!(!r1.valid[0]);
        assert!((r1.values[3] - 1.21).abs() < 1e-12);
        let roc1 = roc(&closes, 1);
        assert!((roc1.values[1] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn sums_and_spreads() {
        let closes = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let s3 = rolling_sum(&closes, 3);
        assert!((s3.values[5] - 15.0).abs() < 1e-15);
        let (d, a, s) = sum_spreads(&closes);
        // t = 5: sum5 = 2+..+6 = 20, sum3 = 15.
        assert!((d.values[5] - 5.0).abs() < 1e-15);
        assert!((a.values[5] - 5.0).abs() < 1e-15);
        assert!((s.values[5] - (400.0f64 - 225.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn dema_tracks_trend_with_warmup() {
        let closes: Vec<f64> = (0..60).map(|i| 5.0 + 0.5 * i as f64).collect();
        let col = dema(&closes, 10);
        assert!(!col.valid[17] && col.valid[18]);
        // DEMA largely removes EMA lag on a linear trend.
        assert!((col.values[59] - closes[59]).abs() < 0.6);
    }

    #[test]
    fn correlation_of_comoving_mas_is_high() {
        let closes: Vec<f64> = (0..120).map(|i| 10.0 + 0.2 * i as f64).collect();
        let col = ma_correlation(&closes, 5, 30, 30);
        assert!(!col.valid[57] && col.valid[58]);
        assert!(col.values[100] > 0.99);
    }

    #[test]
    fn cci_signed_deviation_convention() {
        let closes: Vec<f64> =
            (0..80).map(|i| 10.0 + (i as f64 * 0.35).sin() * 1.5 + 0.01 * i as f64).collect();
        let bars = bars_from_closes(&closes);
        let col = cci(&bars, 20);
        assert!(!col.valid[37]);
        // Hand-recompute a valid cell.
        let t = 60;
        assert!(col.valid[t]);
        let n = 20;
        let mc_at = |s: usize| closes[s + 1 - n..=s].iter().sum::<f64>() / n as f64;
        let md = (t + 1 - n..=t).map(|s| mc_at(s) - closes[s]).sum::<f64>() / n as f64;
        let tp = (bars[t].high + bars[t].low + bars[t].close) / 3.0;
        let expect = (tp - mc_at(t)) / (0.015 * md);
        assert!((col.values[t] - expect).abs() < 1e-10);
    }
}
