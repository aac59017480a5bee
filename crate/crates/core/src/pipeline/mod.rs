//! End-to-end run orchestration: configuration files, the staged
//! bars → indicators → decomposition → composite features → windows →
//! training → evaluation flow, and every artifact a run leaves behind.
//!
//! A run directory is self-describing: `config.lock.json` pins the exact
//! configuration and input hash, `report.json` summarises what happened,
//! and re-running with `resume` skips the training stage when nothing it
//! depends on has changed.

pub mod ablation;
pub mod fixture;
mod svg;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::transform::{log_diff, StandardizationStats};
use crate::ingest::window::{split_and_window, SplitInfo, WindowedDataset};
use crate::ingest::{
    build_feature_frame, feature_names, load_bars_file, save_bars, Bar, FeatureFrame,
    PRICE_COLUMNS, TIME_FORMAT,
};
use crate::micfe::{
    group_imfs_capped, reconstruct_features, select_k, FeParams, FeatureGrouping, ImfFe,
    ImfInput, KSelectionReport, MicEstimator, ReconstructionMap, Tolerance,
};
use crate::model::{Forecaster, ModelConfig};
use crate::tensor::checkpoint::ParamStore;
use crate::train::{evaluate, persistence_metrics, train, Metrics, TrainConfig, TrainReport};
use crate::vmd::{vmd_decompose, ImfSet, VmdParams};

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

/// Named parameter sets. `desk` fits in minutes on a laptop core; `paper`
/// mirrors the full-scale setup and expects real hardware and real data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Paper,
}

impl std::fmt::Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Bar CSV to load. When absent a synthetic fixture is generated into
    /// the run directory instead.
    pub path: Option<PathBuf>,
    /// Fixture length when `path` is absent.
    pub synthetic_bars: usize,
    /// Leading fraction of rows used for fitting; the rest is the test
    /// region. Also the boundary for standardisation statistics.
    pub split_ratio: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { path: None, synthetic_bars: 8000, split_ratio: 0.9 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecomposeConfig {
    /// Scan `k_candidates` per column and keep the smallest level within
    /// a whisker of the best reconstruction, instead of the fixed levels.
    pub select_level: bool,
    /// Columns to decompose with their fixed mode counts. Keys must be
    /// indicator names; everything not listed here stays an indicator on
    /// the correlation side.
    pub levels: BTreeMap<String, usize>,
    pub k_candidates: Vec<usize>,
    pub alpha: f64,
    pub tau: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub dc_mode: bool,
}

fn desk_levels() -> BTreeMap<String, usize> {
    PRICE_COLUMNS.iter().map(|c| (c.to_string(), 6)).collect()
}

/// Per-column levels reported for the full-scale setup.
fn paper_levels() -> BTreeMap<String, usize> {
    [("open", 15), ("high", 10), ("close", 12), ("low", 8)]
        .iter()
        .map(|&(c, k)| (c.to_string(), k))
        .collect()
}

impl Default for DecomposeConfig {
    fn default() -> Self {
        DecomposeConfig {
            select_level: false,
            levels: desk_levels(),
            k_candidates: (2..=10).collect(),
            alpha: 2000.0,
            tau: 0.0,
            tol: 1e-7,
            max_iter: 500,
            dc_mode: false,
        }
    }
}

impl DecomposeConfig {
    fn vmd_params(&self, k: usize) -> VmdParams {
        VmdParams {
            k,
            alpha: self.alpha,
            tau: self.tau,
            tol: self.tol,
            max_iter: self.max_iter,
            dc_mode: self.dc_mode,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Correlation floor for an indicator to enter a composite feature.
    pub mic_threshold: f64,
    /// Fuzzy-entropy embedding dimension.
    pub fe_embedding: usize,
    /// Fuzzy-entropy tolerance as a fraction of the mode's deviation.
    pub fe_r_fraction: f64,
    /// Entropy is quadratic in sample count; long modes are bucketed from
    /// this many leading points.
    pub fe_max_points: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { mic_threshold: 0.5, fe_embedding: 3, fe_r_fraction: 0.3, fe_max_points: 2000 }
    }
}

impl FeatureConfig {
    fn fe_params(&self) -> FeParams {
        FeParams { m: self.fe_embedding, r: Tolerance::StdFraction(self.fe_r_fraction) }
    }
}

/// Complete description of a run. The TOML form may omit any field; the
/// defaults are the desk profile. `seed` drives every random choice of
/// the run (fixture, weight init, shuffling, dropout) and overrides
/// `train.seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub profile: Profile,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub decompose: DecomposeConfig,
    pub features: FeatureConfig,
    /// `model.n_features` is resolved from the engineered feature count at
    /// run time; the configured value is ignored.
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            profile: Profile::Desk,
            seed: 42,
            out_dir: PathBuf::from("runs/desk"),
            data: DataConfig::default(),
            decompose: DecomposeConfig::default(),
            features: FeatureConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                epochs: 6,
                max_steps_per_epoch: Some(24),
                ..TrainConfig::default()
            },
        }
    }
}

impl PipelineConfig {
    pub fn desk() -> PipelineConfig {
        PipelineConfig::default()
    }

    /// Full-scale setup: longer windows, the wide model, level scanning
    /// and uncapped epochs. Expects a real dataset and real hardware.
    pub fn paper() -> PipelineConfig {
        PipelineConfig {
            profile: Profile::Paper,
            out_dir: PathBuf::from("runs/paper"),
            decompose: DecomposeConfig { levels: paper_levels(), ..DecomposeConfig::default() },
            features: FeatureConfig { fe_max_points: 4000, ..FeatureConfig::default() },
            model: ModelConfig {
                input_len: 96,
                horizon: 24,
                d_model: 512,
                n_heads: 8,
                d_ff: 2048,
                enc_layers: 3,
                dec_layers: 2,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: 100,
                patience: 8,
                max_steps_per_epoch: None,
                ..TrainConfig::default()
            },
            ..PipelineConfig::default()
        }
    }

    pub fn for_profile(profile: Profile) -> PipelineConfig {
        match profile {
            Profile::Desk => PipelineConfig::desk(),
            Profile::Paper => PipelineConfig::paper(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<PipelineConfig> {
        let cfg: PipelineConfig =
            toml::from_str(s).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<PipelineConfig> {
        PipelineConfig::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.data.split_ratio && self.data.split_ratio < 1.0) {
            return Err(Error::Config(format!(
                "data.split_ratio {} outside (0, 1)",
                self.data.split_ratio
            )));
        }
        if self.data.path.is_none() && self.data.synthetic_bars < 64 {
            return Err(Error::Config("data.synthetic_bars must be at least 64".into()));
        }
        if !(0.0..=1.0).contains(&self.features.mic_threshold) {
            return Err(Error::Config(format!(
                "features.mic_threshold {} outside [0, 1]",
                self.features.mic_threshold
            )));
        }
        if self.features.fe_embedding == 0 {
            return Err(Error::Config("features.fe_embedding must be >= 1".into()));
        }
        if !(self.features.fe_r_fraction > 0.0) {
            return Err(Error::Config("features.fe_r_fraction must be > 0".into()));
        }
        if self.features.fe_max_points < self.features.fe_embedding + 2 {
            return Err(Error::Config(format!(
                "features.fe_max_points {} below the m+2 minimum",
                self.features.fe_max_points
            )));
        }
        if self.decompose.levels.is_empty() {
            return Err(Error::Config("decompose: at least one column must be decomposed".into()));
        }
        let known = feature_names();
        for (col, &k) in &self.decompose.levels {
            if !known.iter().any(|n| n == col) {
                return Err(Error::Config(format!("decompose: unknown column {col}")));
            }
            if !self.decompose.select_level {
                self.decompose.vmd_params(k).validate()?;
            }
        }
        if self.decompose.select_level {
            if self.decompose.k_candidates.is_empty() {
                return Err(Error::Config(
                    "decompose: level scanning needs a non-empty candidate list".into(),
                ));
            }
            self.decompose.vmd_params(2).validate()?;
        }
        // The feature count is data-dependent; validate the rest now.
        let probe = ModelConfig { n_features: self.model.n_features.max(1), ..self.model.clone() };
        probe.validate()
    }
}

/// Written as `config.lock.json`: everything needed to reproduce the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LockFile {
    pub version: String,
    pub profile: Profile,
    pub seed: u64,
    pub data_sha256: String,
    pub config: PipelineConfig,
}

// ---------------------------------------------------------------------------
// stage ledger (resume support)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct StageRecord {
    key: String,
    outputs: Vec<String>,
}

struct StageLedger {
    dir: PathBuf,
    resume: bool,
}

impl StageLedger {
    fn new(out_dir: &Path, resume: bool) -> Result<StageLedger> {
        let dir = out_dir.join(".stages");
        fs::create_dir_all(&dir)?;
        Ok(StageLedger { dir, resume })
    }

    fn record_path(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.json"))
    }

    /// True when resuming and the stage ran before with the same key and
    /// all its outputs are still present.
    fn is_fresh(&self, name: &str, key: &str, out_dir: &Path) -> bool {
        if !self.resume {
            return false;
        }
        let Ok(text) = fs::read_to_string(self.record_path(name)) else { return false };
        let Ok(rec) = serde_json::from_str::<StageRecord>(&text) else { return false };
        rec.key == key && rec.outputs.iter().all(|o| out_dir.join(o).exists())
    }

    fn record(&self, name: &str, key: &str, outputs: &[&str]) -> Result<()> {
        let rec = StageRecord {
            key: key.to_string(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        };
        fs::write(self.record_path(name), serde_json::to_string_pretty(&rec)?)?;
        Ok(())
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let mut s = String::with_capacity(64);
    for b in h.finalize() {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Content key over labelled parts; order matters.
fn stage_key(parts: &[(&str, &str)]) -> String {
    let mut text = String::new();
    for (name, value) in parts {
        text.push_str(name);
        text.push('=');
        text.push_str(value);
        text.push('\n');
    }
    sha_hex(text.as_bytes())
}

// ---------------------------------------------------------------------------
// prepared data
// ---------------------------------------------------------------------------

/// Modes of one decomposed column.
pub struct ColumnModes {
    pub column: String,
    pub k: usize,
    pub imfs: ImfSet,
}

/// Everything derived from the bars up to (but not including) training.
pub struct Prepared {
    pub data_sha256: String,
    /// Indicator bank trimmed to the fully-valid region, raw scale.
    pub frame: FeatureFrame,
    pub stats: StandardizationStats,
    /// Standardised log-return of the close; the model target.
    pub target_std: Vec<f64>,
    pub target_mean: f64,
    pub target_sd: f64,
    pub trim_start: usize,
    pub decomposed: Vec<ColumnModes>,
    pub k_reports: Option<BTreeMap<String, KSelectionReport>>,
    pub grouping: FeatureGrouping,
    pub recon: ReconstructionMap,
    pub model_cfg: ModelConfig,
    pub train_ds: WindowedDataset,
    pub test_ds: WindowedDataset,
    pub split: SplitInfo,
    pub raw_close: Vec<f64>,
    pub times: Vec<NaiveDateTime>,
}

/// Runs the feature-engineering front half on loaded bars.
pub fn prepare(cfg: &PipelineConfig, bars: &[Bar], data_sha256: String) -> Result<Prepared> {
    let full = build_feature_frame(bars)?;
    let close_full = full.column("close").expect("close column").to_vec();
    let close_valid = vec![true; close_full.len()];
    let log_ret = log_diff(&close_full, &close_valid)?;

    // Trim to the region where every indicator and the log return are
    // valid (indicator warm-ups dominate; the return only kills row 0).
    let trim_start = full
        .first_fully_valid_row()
        .ok_or_else(|| Error::Sizing("a feature column never becomes valid".into()))?
        .max(1);
    let n_rows = full.n_rows().saturating_sub(trim_start);
    if n_rows < 128 {
        return Err(Error::Sizing(format!(
            "only {n_rows} usable rows after the {trim_start}-row warm-up; need at least 128"
        )));
    }
    let frame = full.slice_rows(trim_start, full.n_rows());
    let times = frame.times.clone();
    let target_raw: Vec<f64> = log_ret.values[trim_start..].to_vec();

    let split_row = (n_rows as f64 * cfg.data.split_ratio).floor() as usize;
    let stats = StandardizationStats::fit(&frame, split_row)?;
    let std_frame = stats.apply(&frame)?;

    let fit = &target_raw[..split_row];
    let target_mean = fit.iter().sum::<f64>() / fit.len() as f64;
    let var = fit.iter().map(|v| (v - target_mean) * (v - target_mean)).sum::<f64>()
        / fit.len() as f64;
    if var <= 0.0 {
        return Err(Error::Domain("close returns are constant on the training rows".into()));
    }
    let target_sd = var.sqrt();
    let target_std: Vec<f64> =
        target_raw.iter().map(|v| (v - target_mean) / target_sd).collect();

    // Decompose each configured price column (standardised) into modes;
    // all modes share one id space so entropy bucketing can mix columns.
    let est = MicEstimator::default();
    let mut k_reports: BTreeMap<String, KSelectionReport> = BTreeMap::new();
    let mut decomposed: Vec<ColumnModes> = Vec::new();
    let mut imf_inputs: Vec<ImfInput> = Vec::new();
    for (col, &fixed_k) in &cfg.decompose.levels {
        let signal = std_frame
            .column(col)
            .ok_or_else(|| Error::Config(format!("decompose: unknown column {col}")))?;
        let k = if cfg.decompose.select_level {
            let rep = select_k(
                signal,
                &cfg.decompose.k_candidates,
                &cfg.decompose.vmd_params(2),
                &est,
                0.005,
            )?;
            let chosen = rep.chosen_k;
            k_reports.insert(col.clone(), rep);
            chosen
        } else {
            fixed_k
        };
        let imfs = vmd_decompose(signal, &cfg.decompose.vmd_params(k))?;
        for (i, m) in imfs.modes.iter().enumerate() {
            imf_inputs.push(ImfInput {
                id: imf_inputs.len() + 1,
                source: col.clone(),
                mode_index: i,
                center_freq: imfs.center_freqs[i],
                series: m.clone(),
            });
        }
        decomposed.push(ColumnModes { column: col.clone(), k, imfs });
    }
    let grouping = group_imfs_capped(
        &imf_inputs,
        &cfg.features.fe_params(),
        Some(cfg.features.fe_max_points),
    )?;

    // Correlate the composites against the indicators that were NOT
    // decomposed (the price columns already live inside the modes).
    let mut rmf_names: Vec<String> = Vec::new();
    let mut rmfs: Vec<Vec<f64>> = Vec::new();
    for (i, name) in std_frame.names.iter().enumerate() {
        if !cfg.decompose.levels.contains_key(name) {
            rmf_names.push(name.clone());
            rmfs.push(std_frame.columns[i].clone());
        }
    }
    let recon =
        reconstruct_features(&grouping, &rmf_names, &rmfs, &est, cfg.features.mic_threshold)?;

    // Model inputs: one column per composite feature plus the target
    // itself so the encoder sees the series it must continue.
    let d_x = recon.rcf.len() + 1;
    let mut matrix = vec![0.0f64; n_rows * d_x];
    for (c, col) in recon.rcf.iter().enumerate() {
        for t in 0..n_rows {
            matrix[t * d_x + c] = col[t];
        }
    }
    for t in 0..n_rows {
        matrix[t * d_x + d_x - 1] = target_std[t];
    }

    let model_cfg = ModelConfig { n_features: d_x, ..cfg.model.clone() };
    model_cfg.validate()?;

    let (train_ds, test_ds, split) = split_and_window(
        &matrix,
        d_x,
        &target_std,
        d_x - 1,
        &times,
        model_cfg.input_len,
        model_cfg.horizon,
        cfg.data.split_ratio,
    )?;

    Ok(Prepared {
        data_sha256,
        raw_close: frame.column("close").expect("close column").to_vec(),
        frame,
        stats,
        target_std,
        target_mean,
        target_sd,
        trim_start,
        decomposed,
        k_reports: cfg.decompose.select_level.then_some(k_reports),
        grouping,
        recon,
        model_cfg,
        train_ds,
        test_ds,
        split,
        times,
    })
}

// ---------------------------------------------------------------------------
// artifacts
// ---------------------------------------------------------------------------

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn write_imfs_csv(path: &Path, times: &[NaiveDateTime], decomposed: &[ColumnModes]) -> Result<()> {
    let mut out = String::new();
    out.push_str("time");
    for cm in decomposed {
        for i in 0..cm.imfs.modes.len() {
            out.push_str(&format!(",{}_imf_{}", cm.column, i + 1));
        }
        out.push_str(&format!(",{}_residual", cm.column));
    }
    out.push('\n');
    for t in 0..times.len() {
        out.push_str(&times[t].format(TIME_FORMAT).to_string());
        for cm in decomposed {
            for mode in &cm.imfs.modes {
                out.push_str(&format!(",{}", mode[t]));
            }
            out.push_str(&format!(",{}", cm.imfs.residual[t]));
        }
        out.push('\n');
    }
    write_text(path, &out)
}

fn write_fe_csv(path: &Path, per_imf: &[ImfFe]) -> Result<()> {
    let mut out = String::from("id,source,mode_index,center_freq,fuzzy_entropy,bucket\n");
    for f in per_imf {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            f.id, f.source, f.mode_index, f.center_freq, f.fe, f.bucket
        ));
    }
    write_text(path, &out)
}

/// JSON export of the grouping and reconstruction wiring, so a run's
/// feature construction can be audited without re-running it.
#[derive(Serialize)]
struct ReconExport<'a> {
    modes: &'a [ImfFe],
    groups: Vec<GroupExport<'a>>,
    warnings: Vec<&'a str>,
}

#[derive(Serialize)]
struct GroupExport<'a> {
    name: &'a str,
    bucket: usize,
    member_modes: &'a [usize],
    correlations: BTreeMap<&'a str, f64>,
    included: Vec<&'a str>,
}

fn write_reconstruction_json(
    path: &Path,
    grouping: &FeatureGrouping,
    recon: &ReconstructionMap,
) -> Result<()> {
    let groups = grouping
        .groups
        .iter()
        .enumerate()
        .map(|(g, group)| GroupExport {
            name: &recon.nf_names[g],
            bucket: group.bucket,
            member_modes: &group.members,
            correlations: recon.rmf_names
                .iter()
                .zip(&recon.c[g])
                .map(|(n, &v)| (n.as_str(), v))
                .collect(),
            included: recon.included[g]
                .iter()
                .map(|&i| recon.rmf_names[i].as_str())
                .collect(),
        })
        .collect();
    let export = ReconExport {
        modes: &grouping.per_imf,
        groups,
        warnings: grouping
            .warnings
            .iter()
            .chain(&recon.warnings)
            .map(String::as_str)
            .collect(),
    };
    write_json(path, &export)
}

fn write_heatmap_csv(path: &Path, recon: &ReconstructionMap) -> Result<()> {
    let mut out = String::from("group");
    for name in &recon.rmf_names {
        out.push_str(&format!(",{name}"));
    }
    out.push('\n');
    for (g, row) in recon.c.iter().enumerate() {
        out.push_str(&recon.nf_names[g]);
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    write_text(path, &out)
}

fn write_epochs_csv(path: &Path, report: &TrainReport) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_loss,beta,steps\n");
    for e in &report.history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch,
            e.train_loss,
            e.val_loss.map(|v| v.to_string()).unwrap_or_default(),
            e.beta.map(|v| v.to_string()).unwrap_or_default(),
            e.steps
        ));
    }
    write_text(path, &out)
}

fn loss_curve_svg(report: &TrainReport) -> String {
    let train: Vec<f64> = report.history.iter().map(|e| e.train_loss).collect();
    let val: Vec<f64> =
        report.history.iter().map(|e| e.val_loss.unwrap_or(f64::NAN)).collect();
    let mut series = vec![("train".to_string(), train)];
    if val.iter().any(|v| v.is_finite()) {
        series.push(("validation".to_string(), val));
    }
    svg::line_chart("loss per epoch", "epoch", &series)
}

/// Price-scale error summary of the inverted forecasts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriceMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// Mean absolute percentage error, in percent.
    pub mape: f64,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalBlock {
    /// Errors on the standardised-return scale the model trains on.
    pub target_space: Metrics,
    /// Repeat-last-value baseline on the same windows.
    pub persistence: Metrics,
    pub price_space: PriceMetrics,
    pub horizon: usize,
    pub n_windows: usize,
}

/// One forecasted horizon step, ready for CSV.
struct PredictionRow {
    sample: usize,
    step: usize,
    time: NaiveDateTime,
    target_true: f64,
    target_pred: f64,
    close_true: f64,
    close_pred: f64,
}

fn invert_predictions(p: &Prepared, preds_std: &[f64]) -> (Vec<PredictionRow>, PriceMetrics) {
    let ds = &p.test_ds;
    let (lx, ly) = (ds.l_x, ds.l_y);
    let mut rows = Vec::with_capacity(ds.n_samples * ly);
    let (mut abs, mut sq, mut ape) = (0.0f64, 0.0f64, 0.0f64);
    for s in 0..ds.n_samples {
        let start = ds.start_rows[s];
        let anchor = p.raw_close[start + lx - 1];
        let mut cum = 0.0;
        for h in 0..ly {
            let y_std = preds_std[s * ly + h];
            cum += p.target_mean + p.target_sd * y_std;
            let close_pred = anchor * cum.exp();
            let row_idx = start + lx + h;
            let close_true = p.raw_close[row_idx];
            let err = close_pred - close_true;
            abs += err.abs();
            sq += err * err;
            ape += (err / close_true).abs();
            rows.push(PredictionRow {
                sample: s,
                step: h,
                time: p.times[row_idx],
                target_true: ds.target(s)[h],
                target_pred: y_std,
                close_true,
                close_pred,
            });
        }
    }
    let n = rows.len() as f64;
    let price = PriceMetrics { mae: abs / n, rmse: (sq / n).sqrt(), mape: 100.0 * ape / n };
    (rows, price)
}

fn write_predictions_csv(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut out =
        String::from("sample,step,time,target_true,target_pred,close_true,close_pred\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.sample,
            r.step,
            r.time.format(TIME_FORMAT),
            r.target_true,
            r.target_pred,
            r.close_true,
            r.close_pred
        ));
    }
    write_text(path, &out)
}

// ---------------------------------------------------------------------------
// the run itself
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Reuse the trained checkpoint when the configuration and data are
    /// unchanged (the cheap stages always recompute).
    pub resume: bool,
}

/// Per-group summary for the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupSummary {
    pub name: String,
    pub bucket: usize,
    pub member_modes: Vec<usize>,
    pub included_indicators: Vec<String>,
}

/// Per-column decomposition summary for the report.
#[derive(Debug, Clone, Serialize)]
pub struct DecompSummary {
    pub column: String,
    pub k: usize,
    pub center_freqs: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub version: String,
    pub profile: Profile,
    pub seed: u64,
    pub data_sha256: String,
    pub n_bars: usize,
    pub warmup_rows: usize,
    pub usable_rows: usize,
    pub split: SplitInfo,
    pub target_mean: f64,
    pub target_sd: f64,
    pub decomposition: Vec<DecompSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub level_scans: Option<BTreeMap<String, KSelectionReport>>,
    pub modes: Vec<ImfFe>,
    pub groups: Vec<GroupSummary>,
    pub warnings: Vec<String>,
    pub n_features: usize,
    pub train_report: TrainReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<EvalBlock>,
    pub cached_stages: Vec<String>,
    pub stage_seconds: BTreeMap<String, f64>,
}

pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub report: RunReport,
    pub model: Forecaster,
}

pub fn run_pipeline(cfg: &PipelineConfig, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out)?;
    let ledger = StageLedger::new(&out, opts.resume)?;
    let mut cached: Vec<String> = Vec::new();
    let mut timing: BTreeMap<String, f64> = BTreeMap::new();

    // --- data ---------------------------------------------------------
    let t0 = Instant::now();
    let (bars, data_sha) = match &cfg.data.path {
        Some(path) => {
            let bytes = fs::read(path)?;
            (load_bars_file(path)?, sha_hex(&bytes))
        }
        None => {
            let fixture = out.join("fixture.csv");
            let key = stage_key(&[
                ("seed", &cfg.seed.to_string()),
                ("bars", &cfg.data.synthetic_bars.to_string()),
            ]);
            if ledger.is_fresh("data", &key, &out) {
                cached.push("data".into());
            } else {
                let bars = fixture::generate_bars(cfg.data.synthetic_bars, cfg.seed)?;
                let mut buf = Vec::new();
                save_bars(&mut buf, &bars)?;
                fs::write(&fixture, &buf)?;
                ledger.record("data", &key, &["fixture.csv"])?;
            }
            let bytes = fs::read(&fixture)?;
            (load_bars_file(&fixture)?, sha_hex(&bytes))
        }
    };
    timing.insert("data".into(), t0.elapsed().as_secs_f64());

    // --- feature engineering -------------------------------------------
    let t1 = Instant::now();
    let prepared = prepare(cfg, &bars, data_sha.clone())?;
    timing.insert("prepare".into(), t1.elapsed().as_secs_f64());

    let resolved = PipelineConfig {
        model: prepared.model_cfg.clone(),
        train: TrainConfig { seed: cfg.seed, ..cfg.train.clone() },
        ..cfg.clone()
    };
    write_json(
        &out.join("config.lock.json"),
        &LockFile {
            version: env!("CARGO_PKG_VERSION").to_string(),
            profile: cfg.profile,
            seed: cfg.seed,
            data_sha256: data_sha.clone(),
            config: resolved.clone(),
        },
    )?;

    let mut features_csv = Vec::new();
    prepared.frame.write_csv(&mut features_csv)?;
    fs::write(out.join("features.csv"), &features_csv)?;
    write_imfs_csv(&out.join("imfs.csv"), &prepared.times, &prepared.decomposed)?;
    write_fe_csv(&out.join("fe_values.csv"), &prepared.grouping.per_imf)?;
    write_heatmap_csv(&out.join("heatmap.csv"), &prepared.recon)?;
    write_reconstruction_json(
        &out.join("reconstruction.json"),
        &prepared.grouping,
        &prepared.recon,
    )?;
    write_text(
        &out.join("heatmap.svg"),
        &svg::heatmap(
            "indicator correlation per composite feature",
            &prepared.recon.nf_names,
            &prepared.recon.rmf_names,
            &prepared.recon.c,
        ),
    )?;

    // --- training -------------------------------------------------------
    let t2 = Instant::now();
    let train_cfg = TrainConfig { seed: cfg.seed, ..cfg.train.clone() };
    let train_key = stage_key(&[
        ("data", &data_sha),
        ("model", &serde_json::to_string(&prepared.model_cfg)?),
        ("train", &serde_json::to_string(&train_cfg)?),
    ]);
    let ckpt_stem = out.join("model");
    let (model, train_report) = if ledger.is_fresh("train", &train_key, &out) {
        cached.push("train".into());
        let (params, _meta) = ParamStore::load(&ckpt_stem)?;
        let model = Forecaster::from_parts(prepared.model_cfg.clone(), params)?;
        let report: TrainReport =
            serde_json::from_str(&fs::read_to_string(out.join("train_report.json"))?)?;
        (model, report)
    } else {
        let mut model = Forecaster::init(prepared.model_cfg.clone(), cfg.seed)?;
        let report = train(&mut model, &prepared.train_ds, &train_cfg)?;
        model.params.save(
            &ckpt_stem,
            serde_json::json!({
                "seed": cfg.seed,
                "best_epoch": report.best_epoch,
                "model": &prepared.model_cfg,
            }),
        )?;
        write_json(&out.join("train_report.json"), &report)?;
        ledger.record("train", &train_key, &["model.bin", "model.json", "train_report.json"])?;
        (model, report)
    };
    timing.insert("train".into(), t2.elapsed().as_secs_f64());

    write_epochs_csv(&out.join("epochs.csv"), &train_report)?;
    write_text(&out.join("loss_curve.svg"), &loss_curve_svg(&train_report))?;

    let groups: Vec<GroupSummary> = prepared
        .grouping
        .groups
        .iter()
        .zip(&prepared.recon.nf_names)
        .zip(&prepared.recon.included)
        .map(|((g, name), inc)| GroupSummary {
            name: name.clone(),
            bucket: g.bucket,
            member_modes: g.members.clone(),
            included_indicators: inc
                .iter()
                .map(|&i| prepared.recon.rmf_names[i].clone())
                .collect(),
        })
        .collect();
    let mut warnings = prepared.grouping.warnings.clone();
    warnings.extend(prepared.recon.warnings.iter().cloned());

    let mut report = RunReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        profile: cfg.profile,
        seed: cfg.seed,
        data_sha256: data_sha,
        n_bars: bars.len(),
        warmup_rows: prepared.trim_start,
        usable_rows: prepared.frame.n_rows(),
        split: prepared.split.clone(),
        target_mean: prepared.target_mean,
        target_sd: prepared.target_sd,
        decomposition: prepared
            .decomposed
            .iter()
            .map(|cm| DecompSummary {
                column: cm.column.clone(),
                k: cm.k,
                center_freqs: cm.imfs.center_freqs.clone(),
                iterations: cm.imfs.iterations,
                converged: cm.imfs.converged,
            })
            .collect(),
        level_scans: prepared.k_reports.clone(),
        modes: prepared.grouping.per_imf.clone(),
        groups,
        warnings,
        n_features: prepared.model_cfg.n_features,
        train_report: train_report.clone(),
        metrics: None,
        cached_stages: cached,
        stage_seconds: timing,
    };

    if train_report.diverged {
        write_json(&out.join("report.json"), &report)?;
        return Err(Error::Diverged {
            epoch: train_report.history.len(),
            msg: "training loss became non-finite; see report.json".into(),
        });
    }

    // --- evaluation -----------------------------------------------------
    let t3 = Instant::now();
    let (preds_std, target_metrics) = evaluate(&model, &prepared.test_ds);
    let persistence = persistence_metrics(&prepared.test_ds);
    let (pred_rows, price) = invert_predictions(&prepared, &preds_std);
    let eval = EvalBlock {
        target_space: target_metrics,
        persistence,
        price_space: price,
        horizon: prepared.test_ds.l_y,
        n_windows: prepared.test_ds.n_samples,
    };
    write_predictions_csv(&out.join("predictions.csv"), &pred_rows)?;
    write_json(&out.join("metrics.json"), &eval)?;
    report
        .stage_seconds
        .insert("evaluate".into(), t3.elapsed().as_secs_f64());
    report.metrics = Some(eval);

    write_json(&out.join("report.json"), &report)?;
    Ok(RunOutcome { out_dir: out, report, model })
}
