//! Release checklist: every gate this library must clear before a cut,
//! one test per gate, each printing a single `[c##] PASS/FAIL` line with
//! the measured quantities (visible with `--nocapture`; a failing gate
//! panics with the same message). Reference values are recomputed in this
//! file as plain loops over the defining formulas, so the library is
//! compared against an independent computation rather than against
//! itself.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Instant;

use modecast::ingest::indicators::stochastic_oscillator;
use modecast::ingest::window::split_and_window;
use modecast::ingest::{build_feature_frame, Bar};
use modecast::micfe::{fuzzy_entropy, FeParams, MicEstimator, Tolerance};
use modecast::model::{
    causal_attention, dense_attention, sparse_attention, Forecaster, ModelConfig,
    SampleView,
};
use modecast::pipeline::ablation::run_ablation;
use modecast::pipeline::{fixture, run_pipeline, PipelineConfig, RunOptions};
use modecast::tensor::gradcheck::run_builtin;
use modecast::tensor::rng::stream;
use modecast::tensor::{Graph, Shape};
use modecast::train::{centralize_gradient, robust_loss_scalar, TrainConfig};
use modecast::vmd::{vmd_decompose, VmdParams};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Relative error with a unit floor: tiny values compare absolutely.
fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

fn pass(gate: &str, detail: String) {
    println!("[{gate}] PASS  {detail}");
}

// ---------------------------------------------------------------------------
// c01: the 29 indicator columns against straight-from-formula oracles
// ---------------------------------------------------------------------------

fn random_bars(n: usize, seed: u64) -> Vec<Bar> {
    let times = fixture::session_grid(n);
    let mut rng = stream(seed, "oracle-bars");
    let mut close = 50.0f64;
    let mut bars = Vec::with_capacity(n);
    for t in 0..n {
        let open = close * (1.0 + rng.random_range(-0.01..0.01));
        close = (close * (1.0 + rng.random_range(-0.02..0.02))).max(1.0);
        let hi_pad: f64 = rng.random_range(0.0..0.8);
        let lo_pad: f64 = rng.random_range(0.0..0.8);
        let high = open.max(close) + hi_pad;
        let low = (open.min(close) - lo_pad).max(0.5);
        // a few zero-volume bars so the degenerate branch is exercised
        let volume: f64 = if t % 71 == 3 { 0.0 } else { rng.random_range(1.0e3..1.0e6f64).round() };
        let amount = volume * rng.random_range(low..=high);
        bars.push(Bar { time: times[t], open, high, low, close, volume, amount });
    }
    bars
}

/// Oracle column: values plus validity, built by the test.
struct OCol {
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl OCol {
    fn invalid(n: usize) -> OCol {
        OCol { values: vec![f64::NAN; n], valid: vec![false; n] }
    }
    fn set(&mut self, t: usize, v: f64) {
        self.values[t] = v;
        self.valid[t] = true;
    }
    fn full(values: Vec<f64>) -> OCol {
        let n = values.len();
        OCol { values, valid: vec![true; n] }
    }
}

fn omean(x: &[f64], t: usize, n: usize) -> f64 {
    x[t + 1 - n..=t].iter().sum::<f64>() / n as f64
}

fn oracle_columns(bars: &[Bar]) -> BTreeMap<String, OCol> {
    let n = bars.len();
    let closes: Vec<f64> = bars.iter().map(|b| b.close).collect();
    let mut out: BTreeMap<String, OCol> = BTreeMap::new();

    out.insert("open".into(), OCol::full(bars.iter().map(|b| b.open).collect()));
    out.insert("high".into(), OCol::full(bars.iter().map(|b| b.high).collect()));
    out.insert("low".into(), OCol::full(bars.iter().map(|b| b.low).collect()));
    out.insert("close".into(), OCol::full(closes.clone()));

    let mut wp = OCol::invalid(n);
    for (t, b) in bars.iter().enumerate() {
        if b.volume > 0.0 {
            wp.set(t, b.amount / b.volume);
        }
    }
    out.insert("weighted_price".into(), wp);
    out.insert("volume_stock".into(), OCol::full(bars.iter().map(|b| b.volume).collect()));
    out.insert("volume_rmb".into(), OCol::full(bars.iter().map(|b| b.amount).collect()));
    out.insert(
        "high_minus_low".into(),
        OCol::full(bars.iter().map(|b| b.high - b.low).collect()),
    );

    for lag in 1..=6usize {
        let mut c = OCol::invalid(n);
        for t in lag..n {
            c.set(t, closes[t] - closes[t - lag]);
        }
        out.insert(format!("return_{lag}"), c);
    }

    // correlation of the 5- and 30-bar moving averages over 30 bars
    let mut corr = OCol::invalid(n);
    for t in 58..n {
        let ma = |w: usize, s: usize| omean(&closes, s, w);
        let a: Vec<f64> = (t - 29..=t).map(|s| ma(5, s)).collect();
        let b: Vec<f64> = (t - 29..=t).map(|s| ma(30, s)).collect();
        let am = a.iter().sum::<f64>() / 30.0;
        let bm = b.iter().sum::<f64>() / 30.0;
        let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
        for i in 0..30 {
            cov += (a[i] - am) * (b[i] - bm);
            va += (a[i] - am) * (a[i] - am);
            vb += (b[i] - bm) * (b[i] - bm);
        }
        if va > 0.0 && vb > 0.0 {
            corr.set(t, cov / (va * vb).sqrt());
        }
    }
    out.insert("corr_ma5_ma30".into(), corr);

    let mut sum3 = OCol::invalid(n);
    for t in 2..n {
        sum3.set(t, closes[t - 2] + closes[t - 1] + closes[t]);
    }
    let mut sum5 = OCol::invalid(n);
    for t in 4..n {
        sum5.set(t, closes[t - 4..=t].iter().sum());
    }
    let mut d = OCol::invalid(n);
    let mut ad = OCol::invalid(n);
    let mut sq = OCol::invalid(n);
    for t in 4..n {
        let s3: f64 = closes[t - 2..=t].iter().sum();
        let s5: f64 = closes[t - 4..=t].iter().sum();
        d.set(t, s5 - s3);
        ad.set(t, (s5 - s3).abs());
        if s5 * s5 - s3 * s3 >= 0.0 {
            sq.set(t, (s5 * s5 - s3 * s3).sqrt());
        }
    }
    out.insert("sum3".into(), sum3);
    out.insert("sum5".into(), sum5);
    out.insert("sum5_minus_sum3".into(), d);
    out.insert("abs_sum5_minus_sum3".into(), ad);
    out.insert("sqrt_sum5sq_minus_sum3sq".into(), sq);

    for w in [6usize, 14] {
        let mut rsi = OCol::invalid(n);
        for t in w..n {
            let (mut u, mut dn) = (0.0, 0.0);
            for s in t + 1 - w..=t {
                let m = closes[s] - closes[s - 1];
                if m > 0.0 {
                    u += m;
                } else {
                    dn += -m;
                }
            }
            let v = if u == 0.0 && dn == 0.0 {
                50.0
            } else if dn == 0.0 {
                100.0
            } else if u == 0.0 {
                0.0
            } else {
                100.0 - 100.0 / (1.0 + (u / w as f64) / (dn / w as f64))
            };
            rsi.set(t, v);
        }
        out.insert(format!("rsi_{w}"), rsi);
    }

    for w in [9usize, 14] {
        let mut roc = OCol::invalid(n);
        for t in w..n {
            if closes[t - w] != 0.0 {
                roc.set(t, 100.0 * (closes[t] / closes[t - w] - 1.0));
            }
        }
        out.insert(format!("roc_{w}"), roc);
    }

    let mut wr = OCol::invalid(n);
    for t in 13..n {
        let hh = bars[t - 13..=t].iter().map(|b| b.high).fold(f64::NEG_INFINITY, f64::max);
        let ll = bars[t - 13..=t].iter().map(|b| b.low).fold(f64::INFINITY, f64::min);
        if hh > ll {
            wr.set(t, -100.0 * (hh - bars[t].close) / (hh - ll));
        }
    }
    out.insert("williams_r_14".into(), wr);

    for w in [5usize, 10] {
        let mut tr = vec![0.0f64; n];
        for t in 1..n {
            let pc = bars[t - 1].close;
            tr[t] = (bars[t].high - bars[t].low)
                .max(bars[t].high - pc)
                .max(pc - bars[t].low);
        }
        let mut atr = OCol::invalid(n);
        for t in w..n {
            atr.set(t, omean(&tr, t, w));
        }
        out.insert(format!("atr_{w}"), atr);
    }

    let mut cci = OCol::invalid(n);
    let mut mc = vec![0.0f64; n];
    for t in 19..n {
        mc[t] = omean(&closes, t, 20);
    }
    for t in 38..n {
        let md = (t - 19..=t).map(|s| mc[s] - closes[s]).sum::<f64>() / 20.0;
        if md != 0.0 {
            let tp = (bars[t].high + bars[t].low + bars[t].close) / 3.0;
            cci.set(t, (tp - mc[t]) / (0.015 * md));
        }
    }
    out.insert("cci_20".into(), cci);

    let ema = |x: &[f64], w: usize| -> Vec<f64> {
        let alpha = 2.0 / (w as f64 + 1.0);
        let mut e = Vec::with_capacity(x.len());
        let mut prev = x[0];
        e.push(prev);
        for &v in &x[1..] {
            prev = alpha * v + (1.0 - alpha) * prev;
            e.push(prev);
        }
        e
    };
    let e1 = ema(&closes, 10);
    let e2 = ema(&e1, 10);
    let mut dema = OCol::invalid(n);
    for t in 18..n {
        dema.set(t, 2.0 * e1[t] - e2[t]);
    }
    out.insert("dema_10".into(), dema);

    out
}

#[test]
fn c01_indicator_bank_matches_independent_oracles() {
    let start = Instant::now();
    let bars = random_bars(200, 20240801);
    let frame = build_feature_frame(&bars).unwrap();
    let oracle = oracle_columns(&bars);
    assert_eq!(frame.names.len(), 29, "indicator bank must have 29 columns");

    let mut max_rel = 0.0f64;
    for (c, name) in frame.names.iter().enumerate() {
        let o = oracle.get(name).unwrap_or_else(|| panic!("oracle missing column {name}"));
        assert_eq!(
            frame.valid[c], o.valid,
            "validity mask mismatch in column {name}"
        );
        for t in 0..bars.len() {
            if o.valid[t] {
                let e = rel(frame.columns[c][t], o.values[t]);
                assert!(
                    e <= 1e-10,
                    "column {name} row {t}: {} vs oracle {} (rel {e:.3e})",
                    frame.columns[c][t],
                    o.values[t]
                );
                max_rel = max_rel.max(e);
            }
        }
    }

    // bound checks on the oscillators
    for name in ["rsi_6", "rsi_14"] {
        let c = frame.col_index(name).unwrap();
        for t in 0..bars.len() {
            if frame.valid[c][t] {
                let v = frame.columns[c][t];
                assert!((0.0..=100.0).contains(&v), "{name} out of [0,100]: {v}");
            }
        }
    }
    let c = frame.col_index("williams_r_14").unwrap();
    for t in 0..bars.len() {
        if frame.valid[c][t] {
            let v = frame.columns[c][t];
            assert!((-100.0..=0.0).contains(&v), "williams_r out of [-100,0]: {v}");
        }
    }
    let stoch = stochastic_oscillator(&bars, 3);
    for t in 0..bars.len() {
        if stoch.valid[t] {
            assert!((0.0..=100.0).contains(&stoch.values[t]));
        }
    }

    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 5.0, "indicator oracle suite took {secs:.2}s (budget 5s)");
    pass(
        "c01",
        format!("29/29 columns match oracles on 200 random bars, max rel err {max_rel:.2e}, {secs:.2}s"),
    );
}

// ---------------------------------------------------------------------------
// c02: two-tone decomposition recovery
// ---------------------------------------------------------------------------

#[test]
fn c02_two_tone_decomposition_recovers_frequencies() {
    let start = Instant::now();
    let n = 1024;
    let truth = [0.05, 0.20];
    let signal: Vec<f64> = (0..n)
        .map(|t| {
            let t = t as f64;
            (2.0 * std::f64::consts::PI * truth[0] * t).sin()
                + 0.8 * (2.0 * std::f64::consts::PI * truth[1] * t + 0.4).sin()
        })
        .collect();
    // dual ascent on: the signal is noise-free, so exact reconstruction
    // should be enforced (the pipeline default tau=0 tolerates noise by
    // letting the modes drop it, which is the wrong yardstick here)
    let set = vmd_decompose(&signal, &VmdParams { k: 2, tau: 1.0, ..VmdParams::default() }).unwrap();

    let mut freq_errs = Vec::new();
    for (i, f) in set.center_freqs.iter().enumerate() {
        freq_errs.push((f - truth[i]).abs() / truth[i]);
    }
    for (i, e) in freq_errs.iter().enumerate() {
        assert!(
            *e < 0.02,
            "mode {i} centre frequency {:.5} deviates {:.2}% from {}",
            set.center_freqs[i],
            e * 100.0,
            truth[i]
        );
    }

    let mut num = 0.0;
    let mut den = 0.0;
    for t in 0..n {
        let recon: f64 = set.modes.iter().map(|m| m[t]).sum();
        num += (signal[t] - recon) * (signal[t] - recon);
        den += signal[t] * signal[t];
    }
    let recon_err = (num / den).sqrt();
    assert!(recon_err < 0.05, "relative reconstruction error {recon_err:.4} >= 5%");

    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 10.0, "decomposition took {secs:.2}s (budget 10s)");
    pass(
        "c02",
        format!(
            "centre freqs ({:.4}, {:.4}) within ({:.2}%, {:.2}%), recon err {:.2}%, {secs:.2}s",
            set.center_freqs[0],
            set.center_freqs[1],
            freq_errs[0] * 100.0,
            freq_errs[1] * 100.0,
            recon_err * 100.0
        ),
    );
}

// ---------------------------------------------------------------------------
// c03: correlation estimator identity and independence null
// ---------------------------------------------------------------------------

#[test]
fn c03_mic_identity_and_permutation_null() {
    let est = MicEstimator::default();

    // self-correlation is exactly one for non-constant series
    for seed in [1u64, 2, 3] {
        let mut rng = stream(seed, "mic-self");
        let x: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
        assert_eq!(est.mic(&x, &x).unwrap(), 1.0, "self-MIC must be exactly 1");
    }
    let ramp: Vec<f64> = (0..500).map(|t| t as f64).collect();
    assert_eq!(est.mic(&ramp, &ramp).unwrap(), 1.0);

    // independent uniforms score below the 95th-percentile permutation null
    let n = 1000;
    let perms = 99;
    let mut below = 0;
    for seed in 0..50u64 {
        let mut rng = stream(seed, "mic-null");
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let observed = est.mic(&x, &y).unwrap();

        let mut shuffled = y.clone();
        let mut null: Vec<f64> = Vec::with_capacity(perms);
        for _ in 0..perms {
            shuffled.shuffle(&mut rng);
            null.push(est.mic(&x, &shuffled).unwrap());
        }
        null.sort_by(f64::total_cmp);
        // 95th percentile of 99 draws: the 95th order statistic
        if observed < null[94] {
            below += 1;
        }
    }
    assert!(below >= 45, "independence rejected in only {below}/50 seeds (need >= 45)");
    pass("c03", format!("self-MIC exact 1; independent uniforms below null in {below}/50 seeds"));
}

// ---------------------------------------------------------------------------
// c04: complexity ordering of fuzzy entropy
// ---------------------------------------------------------------------------

#[test]
fn c04_fuzzy_entropy_complexity_ordering() {
    let p = FeParams { m: 3, r: Tolerance::StdFraction(0.3) };
    let n = 2000;

    assert_eq!(fuzzy_entropy(&vec![3.7; n], &p).unwrap(), 0.0, "constant must score 0");

    let gauss = Normal::new(0.0, 1.0).unwrap();
    let mut wins = 0;
    for seed in 0..20u64 {
        let mut rng = stream(seed, "fe-order");
        let noise: Vec<f64> = (0..n).map(|_| gauss.sample(&mut rng)).collect();
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let sine: Vec<f64> =
            (0..n).map(|t| (std::f64::consts::TAU * t as f64 / 50.0 + phase).sin()).collect();
        let fe_noise = fuzzy_entropy(&noise, &p).unwrap();
        let fe_sine = fuzzy_entropy(&sine, &p).unwrap();
        if fe_noise > fe_sine {
            wins += 1;
        }
    }
    assert_eq!(wins, 20, "noise ranked above sine in only {wins}/20 seeds");
    pass("c04", format!("FE(constant)=0 exact; FE(noise) > FE(sine) in {wins}/20 seeds"));
}

// ---------------------------------------------------------------------------
// c05: robust loss closed forms and the heavy-tail limit
// ---------------------------------------------------------------------------

#[test]
fn c05_robust_loss_closed_forms_and_tail_limit() {
    let grid: Vec<f64> = (0..1001).map(|i| -5.0 + i as f64 * 0.01).collect();

    // closed forms at beta = 2 (half square), 1 (Charbonnier), 0 (log)
    let mut max_err = 0.0f64;
    for &z in &grid {
        let t = z * z;
        max_err = max_err.max((robust_loss_scalar(z, 2.0, 1.0) - t / 2.0).abs());
        max_err = max_err.max((robust_loss_scalar(z, 1.0, 1.0) - ((t + 1.0).sqrt() - 1.0)).abs());
        max_err = max_err.max((robust_loss_scalar(z, 0.0, 1.0) - (t / 2.0 + 1.0).ln()).abs());
    }
    assert!(max_err <= 1e-6, "closed-form deviation {max_err:.3e} > 1e-6");

    // the limit form: 1 - exp(-z^2/2); the gate asks beta = -10 to sit
    // within 0.05 of it, approaching monotonically from above
    let limit = |z: f64| 1.0 - (-z * z / 2.0).exp();
    let betas = [-4.0, -6.0, -8.0, -10.0, -14.0, -20.0, -40.0];
    let mut sup_gaps = Vec::new();
    let mut prev: Option<Vec<f64>> = None;
    for &b in &betas {
        let gaps: Vec<f64> =
            grid.iter().map(|&z| robust_loss_scalar(z, b, 1.0) - limit(z)).collect();
        let sup = gaps.iter().cloned().fold(0.0f64, f64::max);
        assert!(
            gaps.iter().all(|&g| g >= -1e-12),
            "beta={b}: loss dipped below its own limit form"
        );
        if let Some(p) = &prev {
            for (i, g) in gaps.iter().enumerate() {
                assert!(
                    *g <= p[i] + 1e-12,
                    "beta={b}: gap grew at z={} ({} vs {})",
                    grid[i],
                    g,
                    p[i]
                );
            }
        }
        prev = Some(gaps);
        sup_gaps.push(sup);
    }
    let gap_at_minus_10 = sup_gaps[3];

    // Honest outcome: the bound below does not hold. For |z| large the
    // general form tends to |beta-2|/|beta| = 1.2 while the limit form
    // tends to 1, so the gap approaches 0.2 on this grid; it first drops
    // under 0.05 near beta = -40 (measured sup gap there: printed below).
    println!(
        "[c05] FAIL  closed forms match to {max_err:.2e}; approach to the limit form is \
         monotone (sup gaps {:?}); but sup|f(z,-10,1) - limit| = {gap_at_minus_10:.4} > 0.05 \
         (gap -> |beta-2|/|beta| - 1 = 0.2 for large |z|; 0.05 is first reached near beta=-40, \
         sup gap there {:.4})",
        sup_gaps.iter().map(|g| (g * 1e4).round() / 1e4).collect::<Vec<_>>(),
        sup_gaps[6],
    );
    assert!(
        gap_at_minus_10 <= 0.05,
        "beta=-10 is not within 0.05 of the limit form: sup gap {gap_at_minus_10:.4} \
         (monotone approach holds; the bound itself is unattainable at beta=-10)"
    );
}

// ---------------------------------------------------------------------------
// c06: gradient-centralization algebra
// ---------------------------------------------------------------------------

#[test]
fn c06_centralization_algebra() {
    let mut rng = stream(6, "gc-algebra");
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let r = rng.random_range(1..=64usize);
        let c = rng.random_range(1..=64usize);
        let dims = [r, c];
        let m: Vec<f64> = (0..r * c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let nmat: Vec<f64> = (0..r * c).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (a, b): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));

        let mut gm = m.clone();
        centralize_gradient(&dims, &mut gm);
        // zero column means
        for j in 0..c {
            let mean: f64 = (0..r).map(|i| gm[i * c + j]).sum::<f64>() / r as f64;
            worst = worst.max(mean.abs());
        }
        // idempotence
        let mut ggm = gm.clone();
        centralize_gradient(&dims, &mut ggm);
        for i in 0..r * c {
            worst = worst.max((ggm[i] - gm[i]).abs());
        }
        // linearity
        let mut gn = nmat.clone();
        centralize_gradient(&dims, &mut gn);
        let mut combo: Vec<f64> = (0..r * c).map(|i| a * m[i] + b * nmat[i]).collect();
        centralize_gradient(&dims, &mut combo);
        for i in 0..r * c {
            worst = worst.max((combo[i] - (a * gm[i] + b * gn[i])).abs());
        }
    }
    assert!(worst <= 1e-12, "centralization algebra deviation {worst:.3e} > 1e-12");
    pass("c06", format!("idempotence/linearity/zero column means within {worst:.2e} on 100 matrices"));
}

// ---------------------------------------------------------------------------
// c07: finite-difference gradients, per op and through the whole model
// ---------------------------------------------------------------------------

fn desk_gradcheck_sample(cfg: &ModelConfig, seed: u64) -> modecast::ingest::window::WindowedDataset {
    let rows = cfg.input_len + cfg.horizon + 24;
    let mut rng = stream(seed, "model-fd");
    let matrix: Vec<f64> =
        (0..rows * cfg.n_features).map(|_| rng.random_range(-1.0..1.0)).collect();
    let target: Vec<f64> =
        (0..rows * cfg.n_features).step_by(cfg.n_features).map(|i| matrix[i + cfg.n_features - 1]).collect();
    let times = fixture::session_grid(rows);
    let (train, _, _) = split_and_window(
        &matrix,
        cfg.n_features,
        &target,
        cfg.n_features - 1,
        &times,
        cfg.input_len,
        cfg.horizon,
        0.95,
    )
    .unwrap();
    train
}

#[test]
fn c07_gradcheck_ops_and_full_model() {
    let start = Instant::now();
    let (h, tol) = (1e-4, 1e-4);

    // every registered op, ten seeds
    let mut n_cases = 0;
    for seed in 0..10u64 {
        let reports = run_builtin(seed, h, tol);
        n_cases = reports.len();
        for r in &reports {
            assert!(
                r.ok,
                "seed {seed}: op {} max rel err {:.3e} over {} coords",
                r.name, r.max_rel_err, r.coords_checked
            );
        }
    }
    let names: Vec<String> = run_builtin(0, h, tol).into_iter().map(|r| r.name).collect();
    for required in [
        "add", "sub", "mul", "matmul", "transpose", "reshape", "slice_rows", "slice_cols",
        "concat_rows", "concat_cols", "softmax_rows", "exp", "ln", "sqrt", "powf", "mean_all",
        "mean_axis0", "sum_all", "sum_axis0", "sum_axis1", "max_rows", "layer_norm", "dropout",
        "conv1d_zero_same", "conv1d_causal", "elu", "embedding_lookup",
    ] {
        assert!(names.iter().any(|n| n == required), "op registry lost {required}");
    }

    // the full default model: analytic parameter gradients against central
    // differences at sampled coordinates (a full sweep would be millions
    // of forward passes; sampling across all tensors keeps the property)
    let cfg = ModelConfig::default();
    let mut model_max_rel = 0.0f64;
    for seed in 0..10u64 {
        let ds = desk_gradcheck_sample(&cfg, seed);
        let mut model = Forecaster::init(cfg.clone(), seed).unwrap();
        let mut rng = stream(seed, "model-fd-coords");
        let weights: Vec<f64> =
            (0..cfg.horizon).map(|_| rng.random_range(-1.0..1.0)).collect();

        let loss_value = |m: &Forecaster| -> f64 {
            let g = Graph::new();
            let out = m.forward(&g, &SampleView::from_dataset(&ds, 0), None);
            out.values().iter().zip(&weights).map(|(o, w)| o * w).sum()
        };

        let g = Graph::new();
        let out = model.forward(&g, &SampleView::from_dataset(&ds, 0), None);
        let wv = g.constant(Shape::of(&[cfg.horizon]), weights.clone());
        let loss = out.mul(&wv).sum_all();
        let grads = loss.backward();

        // only parameters the forward pass actually registered (training-
        // only parameters like the loss shape live outside the graph)
        let names: Vec<String> = model
            .params
            .names()
            .filter(|n| g.named_node(n).is_some())
            .map(str::to_string)
            .collect();
        for _ in 0..12 {
            let name = &names[rng.random_range(0..names.len())];
            let id = g.named_node(name).unwrap();
            let analytic = grads.by_id(id).expect("parameter missing gradient").to_vec();
            let ci = rng.random_range(0..analytic.len());

            let vals = model.params.values_mut(name);
            let orig = vals[ci];
            vals[ci] = orig + h;
            let up = loss_value(&model);
            model.params.values_mut(name)[ci] = orig - h;
            let down = loss_value(&model);
            model.params.values_mut(name)[ci] = orig;

            let fd = (up - down) / (2.0 * h);
            let e = rel(analytic[ci], fd);
            assert!(
                e <= tol,
                "seed {seed}: model param {name}[{ci}] rel err {e:.3e} (analytic {}, fd {fd})",
                analytic[ci]
            );
            model_max_rel = model_max_rel.max(e);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    pass(
        "c07",
        format!(
            "{n_cases} op cases x 10 seeds ok; full-model sampled coords max rel err \
             {model_max_rel:.2e}; {secs:.1}s"
        ),
    );
}

// ---------------------------------------------------------------------------
// c08: sparsity-gated attention against dense oracles
// ---------------------------------------------------------------------------

fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> Vec<f64> {
    (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Test-side dense attention: plain loops, max-shifted softmax.
fn dense_oracle(q: &[f64], k: &[f64], v: &[f64], l: usize, d: usize, scale: f64) -> Vec<f64> {
    let mut out = vec![0.0; l * d];
    for i in 0..l {
        let mut scores = vec![0.0f64; l];
        for (j, s) in scores.iter_mut().enumerate() {
            for x in 0..d {
                *s += q[i * d + x] * k[j * d + x];
            }
            *s *= scale;
        }
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        for x in 0..d {
            out[i * d + x] =
                (0..l).map(|j| exps[j] / z * v[j * d + x]).sum();
        }
    }
    out
}

#[test]
fn c08_sparse_attention_equivalence_and_causality() {
    let d = 8;

    // full budget reproduces dense attention
    let mut dense_dev = 0.0f64;
    for &l in &[8usize, 16, 32, 64] {
        let mut rng = stream(l as u64, "attn-eq");
        let g = Graph::new();
        let q = g.constant(Shape::of(&[l, d]), random_matrix(&mut rng, l, d));
        let k = g.constant(Shape::of(&[l, d]), random_matrix(&mut rng, l, d));
        let v = g.constant(Shape::of(&[l, d]), random_matrix(&mut rng, l, d));
        let scale = 1.0 / (d as f64).sqrt();
        let sparse = sparse_attention(&q, &k, &v, scale, l);
        let dense = dense_attention(&q, &k, &v, scale);
        for (a, b) in sparse.values().iter().zip(dense.values()) {
            dense_dev = dense_dev.max((a - b).abs());
            assert!((a - b).abs() <= 1e-12, "u=L diverged from dense at L={l}");
        }
    }

    // under a real budget the gated rows match the dense oracle and the
    // lazy rows match the value mean, with the active set chosen by the
    // same ranking an independent reimplementation produces
    let (l, u) = (16usize, 4usize);
    let mut rng = stream(7, "attn-active");
    let qv = random_matrix(&mut rng, l, d);
    let kv = random_matrix(&mut rng, l, d);
    let vv = random_matrix(&mut rng, l, d);
    let scale = 1.0 / (d as f64).sqrt();

    let g = Graph::new();
    let q = g.constant(Shape::of(&[l, d]), qv.clone());
    let k = g.constant(Shape::of(&[l, d]), kv.clone());
    let v = g.constant(Shape::of(&[l, d]), vv.clone());
    let out = sparse_attention(&q, &k, &v, scale, u);

    // oracle ranking: lse - mean - ln(l) per score row, top-u, ties low
    let mut measures: Vec<(usize, f64)> = (0..l)
        .map(|i| {
            let row: Vec<f64> = (0..l)
                .map(|j| {
                    (0..d).map(|x| qv[i * d + x] * kv[j * d + x]).sum::<f64>() * scale
                })
                .collect();
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|s| (s - mx).exp()).sum::<f64>().ln();
            let mean = row.iter().sum::<f64>() / l as f64;
            (i, lse - mean - (l as f64).ln())
        })
        .collect();
    measures.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut expected: Vec<usize> = measures[..u].iter().map(|(i, _)| *i).collect();
    expected.sort_unstable();

    let dense_ref = dense_oracle(&qv, &kv, &vv, l, d, scale);
    let mean_v: Vec<f64> =
        (0..d).map(|x| (0..l).map(|j| vv[j * d + x]).sum::<f64>() / l as f64).collect();
    let mut active_dev = 0.0f64;
    for i in 0..l {
        let row = &out.values()[i * d..(i + 1) * d];
        if expected.contains(&i) {
            for x in 0..d {
                let dev = (row[x] - dense_ref[i * d + x]).abs();
                active_dev = active_dev.max(dev);
                assert!(dev <= 1e-12, "active row {i} deviates from the dense oracle");
            }
        } else {
            for x in 0..d {
                assert!(
                    (row[x] - mean_v[x]).abs() <= 1e-12,
                    "lazy row {i} deviates from the value mean"
                );
            }
        }
    }

    // causal mask: perturbing step k must not alter any output before k
    let l = 16;
    let mut rng = stream(11, "attn-causal");
    let xv = random_matrix(&mut rng, l, d);
    let base = {
        let g = Graph::new();
        let x = g.constant(Shape::of(&[l, d]), xv.clone());
        causal_attention(&g, &x, &x, &x, scale).values().to_vec()
    };
    for step in [3usize, 9, 15] {
        let mut pert = xv.clone();
        for x in 0..d {
            pert[step * d + x] += 0.5;
        }
        let g = Graph::new();
        let xp = g.constant(Shape::of(&[l, d]), pert);
        let moved = causal_attention(&g, &xp, &xp, &xp, scale);
        assert_eq!(
            &base[..step * d],
            &moved.values()[..step * d],
            "perturbation at step {step} leaked backwards"
        );
        assert_ne!(
            &base[step * d..(step + 1) * d],
            &moved.values()[step * d..(step + 1) * d],
            "perturbation at step {step} had no effect at all"
        );
    }

    pass(
        "c08",
        format!(
            "u=L equals dense (max dev {dense_dev:.1e}) for L in 8..64; active set matches the \
             oracle ranking (row dev {active_dev:.1e}); no causal leak at steps 3/9/15"
        ),
    );
}

// ---------------------------------------------------------------------------
// c09 + c10: the end-to-end run, its skill and its determinism
// ---------------------------------------------------------------------------

struct DeskRun {
    // hold the directory so artifact files stay alive across tests
    _dir: tempfile::TempDir,
    wall_secs: f64,
    r2: f64,
    test_mse: f64,
    persistence_mse: f64,
    metrics: Vec<u8>,
    predictions: Vec<u8>,
    lock: serde_json::Value,
}

fn desk_config(out_dir: std::path::PathBuf) -> PipelineConfig {
    PipelineConfig { out_dir, ..PipelineConfig::default() }
}

fn desk_run() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = desk_config(dir.path().join("run"));
        let start = Instant::now();
        let outcome = run_pipeline(&cfg, &RunOptions { resume: false }).unwrap();
        let wall_secs = start.elapsed().as_secs_f64();
        let metrics = outcome.report.metrics.clone().expect("metrics written");
        DeskRun {
            wall_secs,
            r2: metrics.target_space.r2.expect("non-constant test targets"),
            test_mse: metrics.target_space.mse,
            persistence_mse: metrics.persistence.mse,
            metrics: std::fs::read(outcome.out_dir.join("metrics.json")).unwrap(),
            predictions: std::fs::read(outcome.out_dir.join("predictions.csv")).unwrap(),
            lock: serde_json::from_slice(
                &std::fs::read(outcome.out_dir.join("config.lock.json")).unwrap(),
            )
            .unwrap(),
            _dir: dir,
        }
    })
}

#[test]
fn c09_end_to_end_learning_signal() {
    let run = desk_run();
    assert!(run.r2 > 0.0, "test R^2 {} is not positive", run.r2);
    assert!(
        run.test_mse < run.persistence_mse,
        "model MSE {} not below persistence {}",
        run.test_mse,
        run.persistence_mse
    );
    assert!(
        run.wall_secs < 300.0,
        "pipeline took {:.0}s, budget 300s",
        run.wall_secs
    );
    pass(
        "c09",
        format!(
            "R^2 {:.4}; MSE {:.4} vs persistence {:.4}; wall {:.0}s (budget 300s)",
            run.r2, run.test_mse, run.persistence_mse, run.wall_secs
        ),
    );
}

#[test]
fn c10_reruns_are_bit_identical() {
    let first = desk_run();
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_config(dir.path().join("run"));
    let outcome = run_pipeline(&cfg, &RunOptions { resume: false }).unwrap();

    let metrics = std::fs::read(outcome.out_dir.join("metrics.json")).unwrap();
    let predictions = std::fs::read(outcome.out_dir.join("predictions.csv")).unwrap();
    let mut lock: serde_json::Value = serde_json::from_slice(
        &std::fs::read(outcome.out_dir.join("config.lock.json")).unwrap(),
    )
    .unwrap();
    let mut lock_first = first.lock.clone();
    // output location is the one legitimate difference between the runs
    lock["config"]["out_dir"] = serde_json::Value::Null;
    lock_first["config"]["out_dir"] = serde_json::Value::Null;

    assert_eq!(lock, lock_first, "lockfiles disagree beyond out_dir");
    assert_eq!(metrics, first.metrics, "metrics.json differs between identical runs");
    assert_eq!(predictions, first.predictions, "predictions.csv differs between identical runs");
    pass(
        "c10",
        format!(
            "two seed-42 runs bit-identical: metrics.json ({} bytes), predictions.csv ({} bytes)",
            metrics.len(),
            predictions.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// c11: ablation directionality (recorded outcome, soft gate)
// ---------------------------------------------------------------------------

#[test]
fn c11_ablation_directionality_soft_gate() {
    // a reduced profile, but large enough that every variant actually
    // learns (validation MSE well under the predict-zero level of ~1);
    // comparing untrained models would only measure initialisation noise
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig {
        out_dir: dir.path().join("ablate"),
        ..PipelineConfig::default()
    };
    cfg.data.synthetic_bars = 1200;
    cfg.decompose.levels = [("close".to_string(), 3)].into_iter().collect();
    cfg.decompose.max_iter = 150;
    cfg.features.fe_max_points = 400;
    cfg.model = ModelConfig {
        input_len: 32,
        horizon: 8,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        enc_layers: 1,
        dec_layers: 1,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    cfg.train = TrainConfig {
        epochs: 5,
        batch_size: 16,
        max_steps_per_epoch: Some(16),
        patience: 0,
        val_fraction: 0.1,
        ..TrainConfig::default()
    };

    let seeds: Vec<u64> = (1..=10).collect();
    let report = run_ablation(&cfg, &seeds).unwrap();
    assert_eq!(report.variants.len(), 5);
    for v in &report.variants {
        assert_eq!(v.runs.len(), 10, "variant {} missing runs", v.variant);
    }
    assert!(dir.path().join("ablate").join("ablation.json").exists());
    assert!(dir.path().join("ablate").join("ablation.svg").exists());

    let line = format!(
        "full (centralized Adam + adaptive loss) <= plain (Adam + MSE) on {}/10 seeds \
         (soft gate wants >= 7); mean val MSE: {}",
        report.full_beats_plain,
        report
            .variants
            .iter()
            .map(|v| format!("{} {:.4}", v.variant, v.mean_val_mse))
            .collect::<Vec<_>>()
            .join(", ")
    );
    if report.full_beats_plain >= 7 {
        pass("c11", line);
    } else {
        // recorded, not asserted: the gate is directional evidence, not a
        // hard invariant, and stays visible in the printed record
        println!("[c11] SOFT FAIL  {line}");
    }
}
