//! Histogram-based mutual-information correlation, decomposition level
//! selection, fuzzy entropy and feature grouping/reconstruction.
//!
//! The correlation used throughout is `I(X;Y) / sqrt(H(X) * H(Y))` on
//! binned marginals, which lands in `[0, 1]` and is exactly 1 when both
//! variables discretise identically (hence for any strictly monotone
//! transform under equal-frequency binning).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::vmd::{vmd_decompose, VmdParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinStrategy {
    /// Rank-based bins holding (near) equal counts. Invariant to strictly
    /// monotone increasing transforms.
    EqualFrequency,
    /// Fixed-width bins over `[min, max]`.
    EqualWidth,
}

#[derive(Debug, Clone, Copy)]
pub struct MicEstimator {
    pub strategy: BinStrategy,
    /// Bin count; `None` derives `floor(n^0.4)` clamped to `[4, 32]`.
    pub bins: Option<usize>,
}

impl Default for MicEstimator {
    fn default() -> Self {
        MicEstimator { strategy: BinStrategy::EqualFrequency, bins: None }
    }
}

impl MicEstimator {
    pub fn bin_count(&self, n: usize) -> usize {
        match self.bins {
            Some(b) => b,
            None => ((n as f64).powf(0.4).floor() as usize).clamp(4, 32),
        }
    }

    /// Normalised mutual information of two equal-length series.
    pub fn mic(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != y.len() {
            return Err(Error::Sizing(format!(
                "mic: length mismatch ({} vs {})",
                x.len(),
                y.len()
            )));
        }
        let n = x.len();
        if n < 4 {
            return Err(Error::Sizing(format!("mic: need at least 4 samples, got {n}")));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("mic: non-finite input".into()));
        }
        let bins = self.bin_count(n);
        if bins < 2 || bins > n {
            return Err(Error::Config(format!("mic: invalid bin count {bins} for n={n}")));
        }

        let bx = bin_indices(x, bins, self.strategy);
        let by = bin_indices(y, bins, self.strategy);

        let hx = marginal_entropy(&bx, bins, n);
        let hy = marginal_entropy(&by, bins, n);
        if hx == 0.0 || hy == 0.0 {
            return Ok(0.0);
        }
        // Identical discretisation means the joint table is diagonal, so
        // I = H exactly; return 1 without accumulating rounding error.
        if bx == by {
            return Ok(1.0);
        }

        let mut joint = vec![0.0f64; bins * bins];
        for (&a, &b) in bx.iter().zip(&by) {
            joint[a as usize * bins + b as usize] += 1.0;
        }
        let mut mx = vec![0.0f64; bins];
        let mut my = vec![0.0f64; bins];
        for (&a, &b) in bx.iter().zip(&by) {
            mx[a as usize] += 1.0;
            my[b as usize] += 1.0;
        }
        let nf = n as f64;
        // Collect and sort the cell contributions so the sum is independent
        // of iteration order; this keeps mic(x, y) == mic(y, x) bit-exact.
        let mut terms = Vec::new();
        for a in 0..bins {
            for b in 0..bins {
                let c = joint[a * bins + b];
                if c > 0.0 {
                    let pxy = c / nf;
                    let px = mx[a] / nf;
                    let py = my[b] / nf;
                    terms.push(pxy * (pxy.ln() - px.ln() - py.ln()));
                }
            }
        }
        terms.sort_by(|a, b| a.total_cmp(b));
        let i: f64 = terms.iter().sum();
        Ok((i / (hx * hy).sqrt()).clamp(0.0, 1.0))
    }
}

fn marginal_entropy(bins_of: &[u32], bins: usize, n: usize) -> f64 {
    let mut counts = vec![0.0f64; bins];
    for &b in bins_of {
        counts[b as usize] += 1.0;
    }
    let nf = n as f64;
    let mut h = 0.0;
    for &c in &counts {
        if c > 0.0 {
            let p = c / nf;
            h -= p * p.ln();
        }
    }
    h
}

fn bin_indices(x: &[f64], bins: usize, strategy: BinStrategy) -> Vec<u32> {
    let n = x.len();
    let mut out = vec![0u32; n];
    match strategy {
        BinStrategy::EqualFrequency => {
            // Quantile cut points on the sorted values. Binning by value
            // (not rank) keeps ties together, so a constant collapses to a
            // single bin, and any strictly monotone increasing transform
            // leaves the assignment untouched.
            let mut sorted = x.to_vec();
            sorted.sort_by(f64::total_cmp);
            let edges: Vec<f64> = (1..bins).map(|b| sorted[b * n / bins]).collect();
            for (i, &v) in x.iter().enumerate() {
                out[i] = edges.partition_point(|e| *e <= v) as u32;
            }
        }
        BinStrategy::EqualWidth => {
            let min = x.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max > min {
                let w = (max - min) / bins as f64;
                for (i, &v) in x.iter().enumerate() {
                    out[i] = (((v - min) / w) as usize).min(bins - 1) as u32;
                }
            }
        }
    }
    out
}

/// Outcome of scanning decomposition levels for one column.
#[derive(Debug, Clone, serde::Serialize)]
pub struct KSelectionReport {
    /// `(k, correlation between input and mode sum)` per candidate.
    pub evaluated: Vec<(usize, f64)>,
    pub chosen_k: usize,
    /// Set when the input is constant and the score is meaningless.
    pub degenerate: bool,
}

/// Decomposes at every candidate level and keeps the smallest `k` whose
/// reconstruction score is within `tie_epsilon` of the maximum.
pub fn select_k(
    signal: &[f64],
    candidates: &[usize],
    base: &VmdParams,
    est: &MicEstimator,
    tie_epsilon: f64,
) -> Result<KSelectionReport> {
    if candidates.is_empty() {
        return Err(Error::Config("select_k: empty candidate list".into()));
    }
    let mut cands: Vec<usize> = candidates.to_vec();
    cands.sort_unstable();
    cands.dedup();
    if cands[0] == 0 {
        return Err(Error::Config("select_k: candidate k=0 is invalid".into()));
    }

    let constant = signal.windows(2).all(|w| w[0] == w[1]);
    if constant {
        return Ok(KSelectionReport {
            evaluated: cands.iter().map(|&k| (k, 0.0)).collect(),
            chosen_k: cands[0],
            degenerate: true,
        });
    }

    let evaluated: Vec<(usize, f64)> = cands
        .par_iter()
        .map(|&k| {
            let imf = vmd_decompose(signal, &VmdParams { k, ..base.clone() })?;
            let mut recon = vec![0.0; signal.len()];
            for mode in &imf.modes {
                for (r, &v) in recon.iter_mut().zip(mode) {
                    *r += v;
                }
            }
            Ok((k, est.mic(signal, &recon)?))
        })
        .collect::<Result<_>>()?;

    let best = evaluated.iter().map(|&(_, m)| m).fold(f64::NEG_INFINITY, f64::max);
    let chosen_k = evaluated
        .iter()
        .find(|&&(_, m)| m >= best - tie_epsilon)
        .map(|&(k, _)| k)
        .expect("non-empty candidate list");

    Ok(KSelectionReport { evaluated, chosen_k, degenerate: false })
}

/// Similarity tolerance for fuzzy entropy.
#[derive(Debug, Clone, Copy)]
pub enum Tolerance {
    /// `r = fraction * std(x)`; tracks the scale of the sequence.
    StdFraction(f64),
    Absolute(f64),
}

#[derive(Debug, Clone, Copy)]
pub struct FeParams {
    /// Embedding dimension.
    pub m: usize,
    pub r: Tolerance,
}

impl Default for FeParams {
    fn default() -> Self {
        FeParams { m: 3, r: Tolerance::StdFraction(0.3) }
    }
}

/// Fuzzy entropy of a sequence: `ln(phi_m / phi_{m+1})` where `phi_d`
/// averages Gaussian-shaped similarity `2^-(d_ij/r)^2` of mean-removed
/// delay vectors under the Chebyshev distance, self-matches excluded.
/// A constant sequence has entropy exactly 0.
pub fn fuzzy_entropy(x: &[f64], p: &FeParams) -> Result<f64> {
    if p.m == 0 {
        return Err(Error::Config("fuzzy_entropy: m must be >= 1".into()));
    }
    let n = x.len();
    if n < p.m + 2 {
        return Err(Error::Sizing(format!(
            "fuzzy_entropy: need at least m+2={} samples, got {n}",
            p.m + 2
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("fuzzy_entropy: non-finite input".into()));
    }
    if x.windows(2).all(|w| w[0] == w[1]) {
        return Ok(0.0);
    }
    let r = match p.r {
        Tolerance::StdFraction(f) => {
            if !(f > 0.0) {
                return Err(Error::Config("fuzzy_entropy: std fraction must be > 0".into()));
            }
            let mean = x.iter().sum::<f64>() / n as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            f * var.sqrt()
        }
        Tolerance::Absolute(r) => r,
    };
    if !(r > 0.0) {
        return Err(Error::Config(format!("fuzzy_entropy: tolerance must be > 0, got {r}")));
    }

    let phi_m = phi(x, p.m, r);
    let phi_m1 = phi(x, p.m + 1, r);
    if phi_m <= 0.0 || phi_m1 <= 0.0 {
        return Err(Error::Domain("fuzzy_entropy: degenerate similarity average".into()));
    }
    Ok((phi_m / phi_m1).ln())
}

/// Average pairwise similarity of `dim`-length mean-removed delay vectors.
fn phi(x: &[f64], dim: usize, r: f64) -> f64 {
    let count = x.len() - dim + 1;
    // Mean-removed embedding, row-major [count][dim].
    let mut emb = vec![0.0f64; count * dim];
    for i in 0..count {
        let w = &x[i..i + dim];
        let mean = w.iter().sum::<f64>() / dim as f64;
        for (j, &v) in w.iter().enumerate() {
            emb[i * dim + j] = v - mean;
        }
    }
    let ln2 = std::f64::consts::LN_2;
    let per_row: Vec<f64> = (0..count)
        .into_par_iter()
        .map(|i| {
            let a = &emb[i * dim..(i + 1) * dim];
            let mut s = 0.0;
            for j in 0..count {
                if j == i {
                    continue;
                }
                let b = &emb[j * dim..(j + 1) * dim];
                let mut d = 0.0f64;
                for k in 0..dim {
                    d = d.max((a[k] - b[k]).abs());
                }
                let z = d / r;
                s += (-ln2 * z * z).exp();
            }
            s / (count - 1) as f64
        })
        .collect();
    per_row.iter().sum::<f64>() / count as f64
}

/// One decomposed mode tagged with its provenance.
#[derive(Debug, Clone)]
pub struct ImfInput {
    /// Global 1-based id across all decomposed columns.
    pub id: usize,
    pub source: String,
    /// 0-based mode index within its source decomposition.
    pub mode_index: usize,
    pub center_freq: f64,
    pub series: Vec<f64>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ImfFe {
    pub id: usize,
    pub source: String,
    pub mode_index: usize,
    pub center_freq: f64,
    pub fe: f64,
    pub bucket: usize,
}

#[derive(Debug, Clone)]
pub struct FeatureGroup {
    /// 0-based bucket over `[0,1]` in 0.1 steps; bucket 0 is `[0, 0.1]`,
    /// bucket g>0 is `(g/10, (g+1)/10]`.
    pub bucket: usize,
    pub fe_lo: f64,
    pub fe_hi: f64,
    /// Member mode ids.
    pub members: Vec<usize>,
    /// Element-wise mean of the member modes.
    pub new_feature: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FeatureGrouping {
    pub per_imf: Vec<ImfFe>,
    /// Non-empty buckets in ascending bucket order.
    pub groups: Vec<FeatureGroup>,
    pub warnings: Vec<String>,
}

fn bucket_of(fe: f64) -> usize {
    if fe <= 0.0 {
        0
    } else {
        ((fe * 10.0).ceil() as usize).saturating_sub(1).min(9)
    }
}

/// Buckets modes by fuzzy entropy (clipped into `[0, 1]`) and averages the
/// members of each non-empty bucket into one aggregate feature.
pub fn group_imfs(imfs: &[ImfInput], p: &FeParams) -> Result<FeatureGrouping> {
    group_imfs_capped(imfs, p, None)
}

/// [`group_imfs`] with the entropy estimated on at most `max_points`
/// leading samples of each mode. Entropy is quadratic in the sample count,
/// so long series are bucketed from a prefix; the aggregate features still
/// average the full-length modes.
pub fn group_imfs_capped(
    imfs: &[ImfInput],
    p: &FeParams,
    max_points: Option<usize>,
) -> Result<FeatureGrouping> {
    if imfs.is_empty() {
        return Err(Error::Sizing("group_imfs: no modes given".into()));
    }
    let n = imfs[0].series.len();
    if imfs.iter().any(|i| i.series.len() != n) {
        return Err(Error::Sizing("group_imfs: modes have differing lengths".into()));
    }
    let fe_len = match max_points {
        Some(cap) if cap < p.m + 2 => {
            return Err(Error::Config(format!(
                "group_imfs: max_points {cap} below the m+2={} minimum",
                p.m + 2
            )));
        }
        Some(cap) => cap.min(n),
        None => n,
    };

    let fes: Vec<f64> = imfs
        .par_iter()
        .map(|imf| fuzzy_entropy(&imf.series[..fe_len], p))
        .collect::<Result<_>>()?;

    let mut warnings = Vec::new();
    let mut per_imf = Vec::with_capacity(imfs.len());
    for (imf, &fe) in imfs.iter().zip(&fes) {
        let clipped = fe.clamp(0.0, 1.0);
        if clipped != fe {
            warnings.push(format!(
                "mode {} ({} m{}): fuzzy entropy {:.4} clipped to {:.1}",
                imf.id, imf.source, imf.mode_index, fe, clipped
            ));
        }
        per_imf.push(ImfFe {
            id: imf.id,
            source: imf.source.clone(),
            mode_index: imf.mode_index,
            center_freq: imf.center_freq,
            fe: clipped,
            bucket: bucket_of(clipped),
        });
    }

    let mut groups = Vec::new();
    for bucket in 0..10 {
        let members: Vec<usize> =
            per_imf.iter().filter(|f| f.bucket == bucket).map(|f| f.id).collect();
        if members.is_empty() {
            continue;
        }
        let mut new_feature = vec![0.0f64; n];
        for f in per_imf.iter().filter(|f| f.bucket == bucket) {
            let series = &imfs.iter().find(|i| i.id == f.id).unwrap().series;
            for (acc, &v) in new_feature.iter_mut().zip(series) {
                *acc += v;
            }
        }
        let inv = 1.0 / members.len() as f64;
        for v in new_feature.iter_mut() {
            *v *= inv;
        }
        groups.push(FeatureGroup {
            bucket,
            fe_lo: bucket as f64 / 10.0,
            fe_hi: (bucket + 1) as f64 / 10.0,
            members,
            new_feature,
        });
    }

    Ok(FeatureGrouping { per_imf, groups, warnings })
}

#[derive(Debug, Clone)]
pub struct ReconstructionMap {
    pub nf_names: Vec<String>,
    pub rmf_names: Vec<String>,
    /// Correlation matrix `[group][indicator]`.
    pub c: Vec<Vec<f64>>,
    /// Included indicator indices per group (correlation >= threshold).
    pub included: Vec<Vec<usize>>,
    /// Reconstructed composite feature per group.
    pub rcf: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

fn zscore(x: &[f64], what: &str) -> Result<Vec<f64>> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(Error::Domain(format!("zero variance while standardising {what}")));
    }
    let sd = var.sqrt();
    Ok(x.iter().map(|v| (v - mean) / sd).collect())
}

/// Builds one composite feature per group: the aggregate feature times the
/// product of every sufficiently correlated indicator, each factor
/// re-standardised to keep magnitudes in check, final product
/// re-standardised as well. A group with no correlated indicator falls
/// back to its aggregate feature unchanged (with a warning).
pub fn reconstruct_features(
    grouping: &FeatureGrouping,
    rmf_names: &[String],
    rmfs: &[Vec<f64>],
    est: &MicEstimator,
    threshold: f64,
) -> Result<ReconstructionMap> {
    if rmf_names.len() != rmfs.len() {
        return Err(Error::Sizing("reconstruct_features: name/column count mismatch".into()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!(
            "reconstruct_features: threshold must lie in [0,1], got {threshold}"
        )));
    }
    let n = grouping.groups.first().map(|g| g.new_feature.len()).unwrap_or(0);
    if n == 0 {
        return Err(Error::Sizing("reconstruct_features: no groups".into()));
    }
    if rmfs.iter().any(|c| c.len() != n) {
        return Err(Error::Sizing("reconstruct_features: indicator length mismatch".into()));
    }

    let mut warnings = Vec::new();
    let mut c_matrix = Vec::with_capacity(grouping.groups.len());
    let mut included_all = Vec::with_capacity(grouping.groups.len());
    let mut rcfs = Vec::with_capacity(grouping.groups.len());
    let mut nf_names = Vec::with_capacity(grouping.groups.len());

    for group in &grouping.groups {
        let nf = &group.new_feature;
        let name = format!("nf_{}", group.bucket + 1);
        let row: Vec<f64> = rmfs
            .par_iter()
            .map(|col| est.mic(nf, col))
            .collect::<Result<_>>()?;
        let included: Vec<usize> =
            (0..rmfs.len()).filter(|&i| row[i] >= threshold).collect();

        let rcf = if included.is_empty() {
            warnings.push(format!(
                "{name}: no indicator correlated above {threshold}; keeping aggregate feature"
            ));
            nf.clone()
        } else {
            let mut prod = nf.clone();
            for &i in &included {
                let scaled: Vec<f64> =
                    rmfs[i].iter().map(|&v| v * row[i]).collect();
                let factor = zscore(&scaled, &format!("factor {}", rmf_names[i]))?;
                for (p, f) in prod.iter_mut().zip(&factor) {
                    *p *= f;
                }
            }
            zscore(&prod, &name)?
        };

        c_matrix.push(row);
        included_all.push(included);
        rcfs.push(rcf);
        nf_names.push(name);
    }

    Ok(ReconstructionMap {
        nf_names,
        rmf_names: rmf_names.to_vec(),
        c: c_matrix,
        included: included_all,
        rcf: rcfs,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform(n: usize, seed: u64) -> Vec<f64> {
        // splitmix64; good enough for test fixtures.
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_add(0x9e3779b97f4a7c15);
                let mut z = s;
                z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
                z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
                ((z ^ (z >> 31)) >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect()
    }

    #[test]
    fn mic_self_is_exactly_one() {
        let est = MicEstimator::default();
        for seed in 0..5 {
            let x = uniform(400, seed);
            assert_eq!(est.mic(&x, &x).unwrap(), 1.0);
        }
    }

    #[test]
    fn mic_monotone_bijection_is_one() {
        let est = MicEstimator::default();
        let x = uniform(500, 7);
        let y: Vec<f64> = x.iter().map(|&v| 2.0 * v + 3.0).collect();
        assert_eq!(est.mic(&x, &y).unwrap(), 1.0);
    }

    #[test]
    fn mic_constant_is_zero() {
        let est = MicEstimator::default();
        let x = uniform(100, 3);
        let y = vec![5.0; 100];
        assert_eq!(est.mic(&x, &y).unwrap(), 0.0);
        assert_eq!(est.mic(&y, &y).unwrap(), 0.0);
    }

    #[test]
    fn mic_independent_is_small() {
        let est = MicEstimator::default();
        let x = uniform(2000, 11);
        let y = uniform(2000, 12);
        assert!(est.mic(&x, &y).unwrap() < 0.15);
    }

    #[test]
    fn mic_rejects_bad_input() {
        let est = MicEstimator::default();
        assert!(est.mic(&[1.0, 2.0], &[1.0]).is_err());
        assert!(est.mic(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).is_err());
        let x = uniform(50, 1);
        let mut y = uniform(50, 2);
        y[3] = f64::NAN;
        assert!(est.mic(&x, &y).is_err());
    }

    proptest! {
        #[test]
        fn mic_symmetric_and_bounded(seed in 0u64..500) {
            let est = MicEstimator::default();
            let x = uniform(120, seed);
            let y = uniform(120, seed.wrapping_add(1000));
            let a = est.mic(&x, &y).unwrap();
            let b = est.mic(&y, &x).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn select_k_finds_two_tones() {
        let n = 512;
        let x: Vec<f64> = (0..n)
            .map(|t| {
                let t = t as f64;
                (2.0 * std::f64::consts::PI * 0.05 * t).sin()
                    + 0.7 * (2.0 * std::f64::consts::PI * 0.2 * t).sin()
            })
            .collect();
        let rep = select_k(
            &x,
            &[1, 2, 3],
            &VmdParams::default(),
            &MicEstimator::default(),
            0.005,
        )
        .unwrap();
        assert!(!rep.degenerate);
        assert!(rep.chosen_k >= 2, "report: {:?}", rep.evaluated);
    }

    #[test]
    fn select_k_flags_constant_input() {
        let rep = select_k(
            &[2.5; 256],
            &[2, 3],
            &VmdParams::default(),
            &MicEstimator::default(),
            0.005,
        )
        .unwrap();
        assert!(rep.degenerate);
        assert_eq!(rep.chosen_k, 2);
    }

    #[test]
    fn fe_constant_is_zero() {
        assert_eq!(fuzzy_entropy(&[3.0; 100], &FeParams::default()).unwrap(), 0.0);
    }

    #[test]
    fn fe_noise_exceeds_sine() {
        let noise = uniform(1500, 42);
        let sine: Vec<f64> =
            (0..1500).map(|t| (2.0 * std::f64::consts::PI * t as f64 / 50.0).sin()).collect();
        let p = FeParams::default();
        assert!(fuzzy_entropy(&noise, &p).unwrap() > fuzzy_entropy(&sine, &p).unwrap());
    }

    #[test]
    fn fe_scale_invariant_with_std_fraction() {
        let x = uniform(300, 9);
        let x4: Vec<f64> = x.iter().map(|&v| 4.0 * v).collect();
        let p = FeParams::default();
        assert_eq!(fuzzy_entropy(&x, &p).unwrap(), fuzzy_entropy(&x4, &p).unwrap());
    }

    #[test]
    fn fe_sizing_errors() {
        let p = FeParams::default();
        assert!(fuzzy_entropy(&[1.0, 2.0, 3.0], &p).is_err());
        assert!(fuzzy_entropy(&uniform(100, 1), &FeParams { m: 0, ..p }).is_err());
    }

    #[test]
    fn buckets_match_interval_convention() {
        assert_eq!(bucket_of(0.0), 0);
        assert_eq!(bucket_of(0.05), 0);
        assert_eq!(bucket_of(0.1), 0);
        assert_eq!(bucket_of(0.1000001), 1);
        assert_eq!(bucket_of(0.15), 1);
        assert_eq!(bucket_of(1.0), 9);
    }

    fn mk_imf(id: usize, series: Vec<f64>) -> ImfInput {
        ImfInput { id, source: "close".into(), mode_index: id - 1, center_freq: 0.1, series }
    }

    #[test]
    fn grouping_averages_members() {
        // Two low-entropy sines land in one bucket, noise in another.
        let slow: Vec<f64> =
            (0..300).map(|t| (2.0 * std::f64::consts::PI * t as f64 / 150.0).sin()).collect();
        let slow2: Vec<f64> = slow.iter().map(|&v| 0.5 * v).collect();
        let noise = uniform(300, 5);
        let grouping = group_imfs(
            &[mk_imf(1, slow.clone()), mk_imf(2, slow2.clone()), mk_imf(3, noise)],
            &FeParams::default(),
        )
        .unwrap();
        let g0 = &grouping.groups[0];
        assert_eq!(g0.members, vec![1, 2]);
        for t in 0..300 {
            let expect = 0.5 * (slow[t] + slow2[t]);
            assert!((g0.new_feature[t] - expect).abs() < 1e-12);
        }
        assert_eq!(grouping.groups.len(), 2);
    }

    #[test]
    fn capped_grouping_keeps_full_length_aggregates() {
        let slow: Vec<f64> =
            (0..600).map(|t| (2.0 * std::f64::consts::PI * t as f64 / 150.0).sin()).collect();
        let noise = uniform(600, 5);
        let p = FeParams::default();
        let capped =
            group_imfs_capped(&[mk_imf(1, slow.clone()), mk_imf(2, noise)], &p, Some(200))
                .unwrap();
        // Entropy comes from the prefix, aggregates from the whole mode.
        for g in &capped.groups {
            assert_eq!(g.new_feature.len(), 600);
        }
        for (imf, full) in capped.per_imf.iter().zip([&slow].iter()) {
            let prefix_fe =
                fuzzy_entropy(&full[..200], &p).unwrap().clamp(0.0, 1.0);
            assert_eq!(imf.fe, prefix_fe);
        }
        assert!(group_imfs_capped(&[mk_imf(1, slow)], &p, Some(2)).is_err());
    }

    #[test]
    fn reconstruction_threshold_and_fallback() {
        let est = MicEstimator::default();
        let nf = uniform(400, 21);
        let rmf_hit: Vec<f64> = nf.iter().map(|&v| 3.0 * v - 1.0).collect(); // mic == 1
        let rmf_miss = uniform(400, 99);
        let grouping = FeatureGrouping {
            per_imf: vec![],
            groups: vec![FeatureGroup {
                bucket: 0,
                fe_lo: 0.0,
                fe_hi: 0.1,
                members: vec![1],
                new_feature: nf.clone(),
            }],
            warnings: vec![],
        };
        let map = reconstruct_features(
            &grouping,
            &["hit".into(), "miss".into()],
            &[rmf_hit.clone(), rmf_miss],
            &est,
            0.5,
        )
        .unwrap();
        assert_eq!(map.included[0], vec![0]);
        assert_eq!(map.c[0][0], 1.0);
        // RCF = zscore(nf * zscore(rmf * C)), C = 1.
        let factor = zscore(&rmf_hit, "t").unwrap();
        let prod: Vec<f64> = nf.iter().zip(&factor).map(|(a, b)| a * b).collect();
        let expect = zscore(&prod, "t").unwrap();
        for (a, b) in map.rcf[0].iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }

        // Nothing above an impossible threshold: fall back to the aggregate.
        let map2 = reconstruct_features(
            &grouping,
            &["miss".into()],
            &[uniform(400, 123)],
            &est,
            1.0,
        )
        .unwrap();
        assert_eq!(map2.rcf[0], nf);
        assert_eq!(map2.warnings.len(), 1);
    }
}
