//! Synthetic OHLCV fixture: a weekday-only 30-minute session grid with a
//! log-price made of a slow drift tone plus two seasonal tones riding on
//! AR(1) noise. The drift dominates the level (so smoothing indicators
//! track the low-frequency mode, as with real prices) while the fast
//! tones make roughly 70% of the one-step log-return variance
//! predictable, giving a working model headroom over the persistence
//! baseline without the task being trivial.

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Weekday};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ingest::Bar;
use crate::tensor::rng::stream;

/// Bars per trading day: 09:30 to 15:00 inclusive in 30-minute steps.
const BARS_PER_DAY: usize = 12;
const BASE_PRICE: f64 = 120.0;

/// Periods (in bars), log-amplitudes and phases of the tones: one slow
/// drift that dominates the price level plus two fast seasonal tones
/// that dominate the returns.
const TONES: [(f64, f64, f64); 3] =
    [(5400.0, 0.25, 0.6), (64.0, 0.020, 0.0), (17.0, 0.012, 0.7)];
const AR_PHI: f64 = 0.8;
const AR_SIGMA: f64 = 0.002;

fn next_session_start(mut day: NaiveDate) -> NaiveDate {
    while matches!(day.weekday(), Weekday::Sat | Weekday::Sun) {
        day = day.succ_opt().expect("date range");
    }
    day
}

/// Trading timestamps starting Monday 2015-01-05, weekends skipped.
pub fn session_grid(n: usize) -> Vec<NaiveDateTime> {
    let mut out = Vec::with_capacity(n);
    let mut day = NaiveDate::from_ymd_opt(2015, 1, 5).unwrap();
    'outer: loop {
        day = next_session_start(day);
        let open = day.and_hms_opt(9, 30, 0).unwrap();
        for slot in 0..BARS_PER_DAY {
            out.push(open + Duration::minutes(30 * slot as i64));
            if out.len() == n {
                break 'outer;
            }
        }
        day = day.succ_opt().expect("date range");
    }
    out
}

/// Generates `n` bars seeded deterministically; the same `(n, seed)` pair
/// always yields byte-identical data.
pub fn generate_bars(n: usize, seed: u64) -> Result<Vec<Bar>> {
    if n < 2 {
        return Err(Error::Sizing(format!("fixture: need at least 2 bars, got {n}")));
    }
    let times = session_grid(n);
    let mut rng = stream(seed, "fixture");
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");

    // Log-price path: seasonal tones + AR(1) level noise.
    let mut log_px = Vec::with_capacity(n);
    let mut ar = 0.0f64;
    for t in 0..n {
        ar = AR_PHI * ar + AR_SIGMA * gauss.sample(&mut rng);
        let mut seasonal = 0.0;
        for &(period, amp, phase) in &TONES {
            seasonal += amp * (2.0 * std::f64::consts::PI * t as f64 / period + phase).sin();
        }
        log_px.push(BASE_PRICE.ln() + seasonal + ar);
    }

    let mut bars = Vec::with_capacity(n);
    let mut prev_close = log_px[0].exp();
    for t in 0..n {
        let close = log_px[t].exp();
        let open = if t == 0 { close } else { prev_close };
        let hi_pad = 1.0 + rng.random_range(0.0..1.5e-3);
        let lo_pad = 1.0 - rng.random_range(0.0..1.5e-3);
        let high = open.max(close) * hi_pad;
        let low = open.min(close) * lo_pad;
        let volume = (11.0 + 0.3 * gauss.sample(&mut rng)).exp().round();
        let typical = (high + low + 2.0 * close) / 4.0;
        let amount = (volume * typical).round();
        bars.push(Bar { time: times[t], open, high, low, close, volume, amount });
        prev_close = close;
    }
    Ok(bars)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{load_bars, save_bars};

    #[test]
    fn grid_skips_weekends_and_stays_inside_sessions() {
        let grid = session_grid(7 * BARS_PER_DAY);
        for t in &grid {
            assert!(!matches!(t.weekday(), Weekday::Sat | Weekday::Sun), "weekend bar {t}");
        }
        // First Friday close is followed by the next Monday open.
        let fri = grid.iter().position(|t| t.weekday() == Weekday::Fri).unwrap();
        let last_fri_slot = fri + BARS_PER_DAY - 1;
        assert_eq!(grid[last_fri_slot + 1].weekday(), Weekday::Mon);
        assert_eq!(grid[last_fri_slot + 1].date() - grid[last_fri_slot].date(), Duration::days(3));
    }

    #[test]
    fn bars_roundtrip_through_the_loader() {
        let bars = generate_bars(300, 7).unwrap();
        let mut buf = Vec::new();
        save_bars(&mut buf, &bars).unwrap();
        let back = load_bars(&buf[..]).unwrap();
        assert_eq!(back.len(), 300);
        assert_eq!(back[0].time, bars[0].time);
        assert!((back[150].close - bars[150].close).abs() < 1e-9);
    }

    #[test]
    fn same_seed_is_identical_and_seeds_differ() {
        let a = generate_bars(64, 1).unwrap();
        let b = generate_bars(64, 1).unwrap();
        let c = generate_bars(64, 2).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().zip(&c).any(|(x, y)| x.close != y.close));
    }

    #[test]
    fn log_returns_have_a_dominant_predictable_component() {
        // The two tones carry most of the one-step return variance; check
        // that the realised returns beat a pure-noise series on lag-64
        // autocovariance (the slow tone's period).
        let bars = generate_bars(2000, 3).unwrap();
        let rets: Vec<f64> = bars.windows(2).map(|w| (w[1].close / w[0].close).ln()).collect();
        let mean = rets.iter().sum::<f64>() / rets.len() as f64;
        let var: f64 =
            rets.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / rets.len() as f64;
        let lag = 64;
        let cov: f64 = rets[..rets.len() - lag]
            .iter()
            .zip(&rets[lag..])
            .map(|(a, b)| (a - mean) * (b - mean))
            .sum::<f64>()
            / (rets.len() - lag) as f64;
        // A full-period lag of the slow tone correlates positively.
        assert!(cov / var > 0.1, "lag autocorrelation too weak: {}", cov / var);
    }
}
