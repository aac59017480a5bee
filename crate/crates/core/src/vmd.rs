//! Variational mode decomposition.
//!
//! Decomposes a real signal into `k` band-limited modes by ADMM in the
//! frequency domain. Each iteration applies a Wiener-filter update to every
//! mode spectrum and re-estimates its centre frequency as the spectral
//! centroid over the positive half-axis. The signal is mirror-extended by
//! half its length on each side before the transform to soften boundary
//! effects; the extension is cropped away from the returned modes.

use num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct VmdParams {
    /// Number of modes to extract.
    pub k: usize,
    /// Bandwidth penalty; larger values give narrower modes.
    pub alpha: f64,
    /// Dual-ascent step for the Lagrangian multiplier. 0 disables the
    /// multiplier, which tolerates noisy signals.
    pub tau: f64,
    /// Convergence threshold on the summed relative spectral change.
    pub tol: f64,
    pub max_iter: usize,
    /// Lock the first mode's centre frequency to 0 (trend capture).
    pub dc_mode: bool,
}

impl Default for VmdParams {
    fn default() -> Self {
        VmdParams { k: 4, alpha: 2000.0, tau: 0.0, tol: 1e-7, max_iter: 500, dc_mode: false }
    }
}

impl VmdParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("vmd: k must be >= 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("vmd: alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("vmd: tol must be > 0, got {}", self.tol)));
        }
        if self.tau < 0.0 {
            return Err(Error::Config(format!("vmd: tau must be >= 0, got {}", self.tau)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("vmd: max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

/// Decomposition result. Modes are sorted by ascending centre frequency and
/// `input == sum(modes) + residual` holds exactly (the residual is defined
/// as that difference).
#[derive(Debug, Clone)]
pub struct ImfSet {
    /// `k` modes, each as long as the input.
    pub modes: Vec<Vec<f64>>,
    /// Normalised centre frequencies in `[0, 0.5]`, ascending.
    pub center_freqs: Vec<f64>,
    pub residual: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Summed relative spectral change per iteration.
    pub convergence_trace: Vec<f64>,
}

pub fn vmd_decompose(signal: &[f64], p: &VmdParams) -> Result<ImfSet> {
    p.validate()?;
    let n = signal.len();
    if n < 4 * p.k.max(1) {
        return Err(Error::Sizing(format!(
            "vmd: signal length {} too short for k={} (need >= {})",
            n,
            p.k,
            4 * p.k
        )));
    }
    if signal.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("vmd: signal contains non-finite values".into()));
    }

    // Mirror extension: reversed first half | signal | reversed second half.
    let half = n / 2;
    let mut ext = Vec::with_capacity(n + 2 * half);
    ext.extend(signal[..half].iter().rev());
    ext.extend_from_slice(signal);
    ext.extend(signal[n - half..].iter().rev());
    let t = ext.len();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(t);
    let ifft = planner.plan_fft_inverse(t);

    let mut f_hat: Vec<Complex<f64>> =
        ext.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft.process(&mut f_hat);

    // Work on the positive half-spectrum only: bins 0..=t/2, freq w = bin/t.
    let nb = t / 2 + 1;
    let freqs: Vec<f64> = (0..nb).map(|i| i as f64 / t as f64).collect();
    let f_plus: Vec<Complex<f64>> = f_hat[..nb].to_vec();

    let k = p.k;
    let mut u_hat = vec![vec![Complex::new(0.0, 0.0); nb]; k];
    let mut u_prev = u_hat.clone();
    let mut lambda = vec![Complex::new(0.0, 0.0); nb];

    // Centre frequencies start evenly spread over the open interval (0, 0.5).
    let mut omega: Vec<f64> = (0..k).map(|i| 0.5 * (i as f64 + 0.5) / k as f64).collect();
    if p.dc_mode {
        omega[0] = 0.0;
    }

    let mut sum_modes = vec![Complex::new(0.0, 0.0); nb];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..p.max_iter {
        iterations += 1;
        std::mem::swap(&mut u_prev, &mut u_hat);

        for m in 0..k {
            // sum over the other modes, using already-updated spectra for
            // modes < m (Gauss-Seidel style sweep).
            for i in 0..nb {
                let before: Complex<f64> =
                    (0..m).map(|j| u_hat[j][i]).sum();
                let after: Complex<f64> =
                    (m + 1..k).map(|j| u_prev[j][i]).sum();
                let others = before + after;
                let d = freqs[i] - omega[m];
                u_hat[m][i] =
                    (f_plus[i] - others + lambda[i] * 0.5) / (1.0 + 2.0 * p.alpha * d * d);
            }
            if !(p.dc_mode && m == 0) {
                let mut num = 0.0;
                let mut den = 0.0;
                for i in 0..nb {
                    let e = u_hat[m][i].norm_sqr();
                    num += freqs[i] * e;
                    den += e;
                }
                if den > 0.0 {
                    omega[m] = num / den;
                }
            }
        }

        for i in 0..nb {
            sum_modes[i] = (0..k).map(|j| u_hat[j][i]).sum();
            lambda[i] += p.tau * (f_plus[i] - sum_modes[i]);
        }

        let mut diff = 0.0;
        for m in 0..k {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..nb {
                num += (u_hat[m][i] - u_prev[m][i]).norm_sqr();
                den += u_prev[m][i].norm_sqr();
            }
            diff += num / den.max(f64::EPSILON);
        }
        trace.push(diff);
        if diff < p.tol {
            converged = true;
            break;
        }
    }

    // Back to the time domain: rebuild the two-sided spectrum by conjugate
    // symmetry, invert, and crop the mirror extension.
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| omega[a].total_cmp(&omega[b]));

    let mut modes = Vec::with_capacity(k);
    let mut center_freqs = Vec::with_capacity(k);
    let mut buf = vec![Complex::new(0.0, 0.0); t];
    for &m in &order {
        for v in buf.iter_mut() {
            *v = Complex::new(0.0, 0.0);
        }
        for i in 0..nb {
            buf[i] = u_hat[m][i];
        }
        for i in 1..nb - 1 {
            buf[t - i] = u_hat[m][i].conj();
        }
        ifft.process(&mut buf);
        let mode: Vec<f64> = buf[half..half + n].iter().map(|c| c.re / t as f64).collect();
        modes.push(mode);
        center_freqs.push(omega[m]);
    }

    let mut residual = signal.to_vec();
    for mode in &modes {
        for (r, &v) in residual.iter_mut().zip(mode) {
            *r -= v;
        }
    }

    Ok(ImfSet { modes, center_freqs, residual, iterations, converged, convergence_trace: trace })
}

/// One-sided periodogram. Returns `(freqs, power)` with `freqs[i] = i / n`
/// for `i = 0..=n/2` and `power[i] = |X_i|^2 / n`. Summing the power with
/// weight 2 on interior bins (1 on DC and Nyquist) recovers the signal
/// energy `sum(x^2)`.
pub fn psd(x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = x.len();
    if n < 2 {
        return Err(Error::Sizing(format!("psd: need at least 2 samples, got {n}")));
    }
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft.process(&mut buf);
    let nb = n / 2 + 1;
    let freqs = (0..nb).map(|i| i as f64 / n as f64).collect();
    let power = buf[..nb].iter().map(|c| c.norm_sqr() / n as f64).collect();
    Ok((freqs, power))
}
