//! Component ablations: retrain on identical prepared data with single
//! ingredients switched off, across several seeds, and score every variant
//! on the same held-out yardstick (validation MSE at the restored best
//! epoch). Native training losses differ between variants — the robust
//! loss and MSE are not on a common scale — so MSE on the validation tail
//! is the comparison currency.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::{load_bars_file, save_bars, Bar};
use crate::model::{Forecaster, ModelConfig};
use crate::train::{evaluate, train, LossKind, TrainConfig};

use super::{fixture, prepare, sha_hex, svg, PipelineConfig, Prepared};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Everything on: centralized-gradient Adam, adaptive robust loss,
    /// three-branch encoder.
    Full,
    /// Plain Adam (no gradient centralization).
    NoCentralization,
    /// Fixed MSE objective instead of the adaptive loss.
    MseLoss,
    /// One full-length encoder branch instead of three scales.
    SingleBranch,
    /// Plain Adam and MSE together; the conventional baseline.
    Plain,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoCentralization,
        Variant::MseLoss,
        Variant::SingleBranch,
        Variant::Plain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCentralization => "no_centralization",
            Variant::MseLoss => "mse_loss",
            Variant::SingleBranch => "single_branch",
            Variant::Plain => "plain",
        }
    }

    fn apply(self, model: &mut ModelConfig, tcfg: &mut TrainConfig) {
        match self {
            Variant::Full => {}
            Variant::NoCentralization => tcfg.optim.centralize = false,
            Variant::MseLoss => tcfg.loss = LossKind::Mse,
            Variant::SingleBranch => model.single_branch = true,
            Variant::Plain => {
                tcfg.optim.centralize = false;
                tcfg.loss = LossKind::Mse;
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub best_epoch: usize,
    /// Best monitored value in the variant's own training loss.
    pub best_monitored: f64,
    /// MSE on the validation tail at the restored best epoch.
    pub val_mse: f64,
    pub test_mse: f64,
    pub final_beta: Option<f64>,
    pub diverged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct VariantOutcome {
    pub variant: &'static str,
    pub runs: Vec<SeedOutcome>,
    pub mean_val_mse: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantOutcome>,
    /// Seeds where the full variant's validation MSE is at or below the
    /// plain baseline's.
    pub full_beats_plain: usize,
}

fn load_or_generate(cfg: &PipelineConfig) -> Result<(Vec<Bar>, String)> {
    match &cfg.data.path {
        Some(path) => {
            let bytes = fs::read(path)?;
            Ok((load_bars_file(path)?, sha_hex(&bytes)))
        }
        None => {
            let bars = fixture::generate_bars(cfg.data.synthetic_bars, cfg.seed)?;
            let mut buf = Vec::new();
            save_bars(&mut buf, &bars)?;
            Ok((bars, sha_hex(&buf)))
        }
    }
}

fn run_one(
    prepared: &Prepared,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    variant: Variant,
    seed: u64,
) -> Result<SeedOutcome> {
    let mut mcfg = base_model.clone();
    let mut tcfg = TrainConfig { seed, ..base_train.clone() };
    variant.apply(&mut mcfg, &mut tcfg);

    let n = prepared.train_ds.n_samples;
    let n_val = ((n as f64) * tcfg.val_fraction).floor() as usize;
    if n_val == 0 {
        return Err(Error::Config(
            "ablation: val_fraction leaves no validation samples to compare on".into(),
        ));
    }
    let val_ds = prepared.train_ds.subrange(n - n_val, n);

    let mut model = Forecaster::init(mcfg, seed)?;
    let report = train(&mut model, &prepared.train_ds, &tcfg)?;
    let (val_mse, test_mse) = if report.diverged {
        (f64::INFINITY, f64::INFINITY)
    } else {
        let (_, val_metrics) = evaluate(&model, &val_ds);
        let (_, test_metrics) = evaluate(&model, &prepared.test_ds);
        (val_metrics.mse, test_metrics.mse)
    };
    Ok(SeedOutcome {
        seed,
        best_epoch: report.best_epoch,
        best_monitored: report.best_monitored,
        val_mse,
        test_mse,
        final_beta: report.final_beta,
        diverged: report.diverged,
    })
}

/// Trains every variant once per seed on shared prepared data and writes
/// `ablation.json` and `ablation.svg` into the run directory.
pub fn run_ablation(cfg: &PipelineConfig, seeds: &[u64]) -> Result<AblationReport> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("ablation: need at least one seed".into()));
    }
    fs::create_dir_all(&cfg.out_dir)?;

    let (bars, sha) = load_or_generate(cfg)?;
    let prepared = prepare(cfg, &bars, sha)?;

    let mut variants = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            runs.push(run_one(&prepared, &prepared.model_cfg, &cfg.train, variant, seed)?);
        }
        let mean_val_mse =
            runs.iter().map(|r| r.val_mse).sum::<f64>() / runs.len() as f64;
        variants.push(VariantOutcome { variant: variant.name(), runs, mean_val_mse });
    }

    let full = &variants[0];
    let plain = variants.iter().find(|v| v.variant == "plain").expect("plain variant");
    let full_beats_plain = full
        .runs
        .iter()
        .zip(&plain.runs)
        .filter(|(f, p)| f.val_mse <= p.val_mse)
        .count();

    let report =
        AblationReport { seeds: seeds.to_vec(), variants, full_beats_plain };
    super::write_json(&cfg.out_dir.join("ablation.json"), &report)?;
    write_chart(&cfg.out_dir.join("ablation.svg"), &report)?;
    Ok(report)
}

fn write_chart(path: &Path, report: &AblationReport) -> Result<()> {
    let series: Vec<(String, Vec<f64>)> = report
        .variants
        .iter()
        .map(|v| (v.variant.to_string(), v.runs.iter().map(|r| r.val_mse).collect()))
        .collect();
    super::write_text(path, &svg::line_chart("validation MSE per seed", "seed index", &series))
}
