//! Command-line front end: run the whole forecasting pipeline or its
//! individual stages against a bar CSV or the built-in synthetic fixture.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use modecast::pipeline::ablation::run_ablation;
use modecast::pipeline::{
    fixture, prepare, run_pipeline, PipelineConfig, Profile, RunOptions,
};
use modecast::{ingest, Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "modecast",
    version,
    about = "Mode-decomposition feature engineering and sparse-attention forecasting"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Profile {
        match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Paper => Profile::Paper,
        }
    }
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML run configuration. Omitted fields fall back to the desk
    /// profile's values.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Named parameter set to start from when no --config is given.
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,

    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Override the input bar CSV.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match (&self.config, self.profile) {
            (Some(path), maybe_profile) => {
                let cfg = PipelineConfig::load(path)?;
                if let Some(p) = maybe_profile {
                    if Profile::from(p) != cfg.profile {
                        return Err(Error::Config(format!(
                            "--profile {} conflicts with profile \"{}\" in {}",
                            match p {
                                ProfileArg::Desk => "desk",
                                ProfileArg::Paper => "paper",
                            },
                            cfg.profile,
                            path.display()
                        )));
                    }
                }
                cfg
            }
            (None, profile) => {
                PipelineConfig::for_profile(profile.map(Profile::from).unwrap_or(Profile::Desk))
            }
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(data) = &self.data {
            cfg.data.path = Some(data.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Load bars (or generate the fixture), build the indicator bank and
    /// write features.csv.
    Ingest(ConfigArgs),

    /// Decompose the standardised close return into modes; writes
    /// imfs.csv and prints the centre frequencies.
    Decompose(ConfigArgs),

    /// Full feature engineering: decomposition, entropy grouping and
    /// composite reconstruction; writes fe_values.csv and the heat map.
    Features(ConfigArgs),

    /// Train the forecaster (runs the full pipeline; training dominates).
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Reuse cached stages whose inputs are unchanged.
        #[arg(long)]
        resume: bool,
    },

    /// Evaluate against the held-out region, reusing a cached checkpoint
    /// when the configuration and data are unchanged.
    Evaluate(ConfigArgs),

    /// Run every stage end to end.
    Pipeline {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Reuse cached stages whose inputs are unchanged.
        #[arg(long)]
        resume: bool,
    },

    /// Train component-ablated variants across seeds and compare them on
    /// validation MSE.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of consecutive seeds, starting at the run seed.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
}

fn load_or_generate(cfg: &PipelineConfig) -> Result<Vec<ingest::Bar>> {
    match &cfg.data.path {
        Some(path) => ingest::load_bars_file(path),
        None => {
            fs::create_dir_all(&cfg.out_dir)?;
            let bars = fixture::generate_bars(cfg.data.synthetic_bars, cfg.seed)?;
            let path = cfg.out_dir.join("fixture.csv");
            let mut buf = Vec::new();
            ingest::save_bars(&mut buf, &bars)?;
            fs::write(&path, &buf)?;
            println!("fixture: {} bars -> {}", bars.len(), path.display());
            Ok(bars)
        }
    }
}

fn front_half(cfg: &PipelineConfig) -> Result<modecast::pipeline::Prepared> {
    let bars = load_or_generate(cfg)?;
    prepare(cfg, &bars, String::new())
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Ingest(args) => {
            let cfg = args.resolve()?;
            let prepared = front_half(&cfg)?;
            fs::create_dir_all(&cfg.out_dir)?;
            let mut buf = Vec::new();
            prepared.frame.write_csv(&mut buf)?;
            let path = cfg.out_dir.join("features.csv");
            fs::write(&path, &buf)?;
            println!(
                "{} usable rows ({} warm-up), {} columns -> {}",
                prepared.frame.n_rows(),
                prepared.trim_start,
                prepared.frame.n_cols(),
                path.display()
            );
        }
        Cmd::Decompose(args) => {
            let cfg = args.resolve()?;
            let prepared = front_half(&cfg)?;
            fs::create_dir_all(&cfg.out_dir)?;
            let path = cfg.out_dir.join("imfs.csv");
            let mut out = String::new();
            {
                use std::fmt::Write as _;
                write!(out, "time").unwrap();
                for cm in &prepared.decomposed {
                    for i in 0..cm.imfs.modes.len() {
                        write!(out, ",{}_imf_{}", cm.column, i + 1).unwrap();
                    }
                    write!(out, ",{}_residual", cm.column).unwrap();
                }
                writeln!(out).unwrap();
                for t in 0..prepared.times.len() {
                    write!(out, "{}", prepared.times[t].format(ingest::TIME_FORMAT)).unwrap();
                    for cm in &prepared.decomposed {
                        for mode in &cm.imfs.modes {
                            write!(out, ",{}", mode[t]).unwrap();
                        }
                        write!(out, ",{}", cm.imfs.residual[t]).unwrap();
                    }
                    writeln!(out).unwrap();
                }
            }
            fs::write(&path, out)?;
            if let Some(scans) = &prepared.k_reports {
                for (col, rep) in scans {
                    println!("level scan for {col}:");
                    for (k, score) in &rep.evaluated {
                        println!("  k={k}: reconstruction correlation {score:.4}");
                    }
                }
            }
            for cm in &prepared.decomposed {
                println!(
                    "{}: k={}, centre frequencies {:?} (converged: {})",
                    cm.column,
                    cm.k,
                    cm.imfs
                        .center_freqs
                        .iter()
                        .map(|f| (f * 1e4).round() / 1e4)
                        .collect::<Vec<_>>(),
                    cm.imfs.converged
                );
            }
            println!("modes -> {}", path.display());
        }
        Cmd::Features(args) => {
            let cfg = args.resolve()?;
            let prepared = front_half(&cfg)?;
            fs::create_dir_all(&cfg.out_dir)?;
            let mut fe = String::from("id,source,mode_index,center_freq,fuzzy_entropy,bucket\n");
            for f in &prepared.grouping.per_imf {
                fe.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    f.id, f.source, f.mode_index, f.center_freq, f.fe, f.bucket
                ));
            }
            fs::write(cfg.out_dir.join("fe_values.csv"), fe)?;
            println!("{} modes -> {} composite features:", prepared.grouping.per_imf.len(), prepared.recon.rcf.len());
            for (g, name) in prepared.recon.nf_names.iter().enumerate() {
                let inc: Vec<&str> = prepared.recon.included[g]
                    .iter()
                    .map(|&i| prepared.recon.rmf_names[i].as_str())
                    .collect();
                let best = prepared.recon.c[g]
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, v)| format!("{} {:.3}", prepared.recon.rmf_names[i], v))
                    .unwrap_or_default();
                println!(
                    "  {name}: {} correlated indicators {:?} (best {best})",
                    inc.len(),
                    inc
                );
            }
            for w in prepared.grouping.warnings.iter().chain(&prepared.recon.warnings) {
                println!("  note: {w}");
            }
        }
        Cmd::Train { cfg, resume } | Cmd::Pipeline { cfg, resume } => {
            let cfg = cfg.resolve()?;
            let outcome = run_pipeline(&cfg, &RunOptions { resume })?;
            let rep = &outcome.report;
            let levels: Vec<String> = rep
                .decomposition
                .iter()
                .map(|d| format!("{}:{}", d.column, d.k))
                .collect();
            println!(
                "run complete: {} rows, levels [{}], {} features, {} train / {} test windows",
                rep.usable_rows,
                levels.join(", "),
                rep.n_features,
                rep.split.train_samples,
                rep.split.test_samples
            );
            println!(
                "best epoch {} (monitored {:.6}), stopped early: {}",
                rep.train_report.best_epoch,
                rep.train_report.best_monitored,
                rep.train_report.stopped_early
            );
            if let Some(beta) = rep.train_report.final_beta {
                println!("fitted loss shape beta = {beta:.3}");
            }
            if let Some(m) = &rep.metrics {
                println!(
                    "test MSE {:.6} (persistence {:.6}), R^2 {}, price MAPE {:.3}%",
                    m.target_space.mse,
                    m.persistence.mse,
                    m.target_space
                        .r2
                        .map(|v| format!("{v:.4}"))
                        .unwrap_or_else(|| "n/a".into()),
                    m.price_space.mape
                );
            }
            println!("artifacts in {}", outcome.out_dir.display());
        }
        Cmd::Evaluate(args) => {
            let cfg = args.resolve()?;
            let outcome = run_pipeline(&cfg, &RunOptions { resume: true })?;
            let m = outcome.report.metrics.as_ref().expect("metrics written on success");
            println!(
                "test windows: {}  horizon: {}",
                m.n_windows, m.horizon
            );
            println!(
                "target space: MAE {:.6}  MSE {:.6}  RMSE {:.6}  R^2 {}",
                m.target_space.mae,
                m.target_space.mse,
                m.target_space.rmse,
                m.target_space
                    .r2
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "n/a".into())
            );
            println!(
                "persistence:  MAE {:.6}  MSE {:.6}",
                m.persistence.mae, m.persistence.mse
            );
            println!(
                "price space:  MAE {:.4}  RMSE {:.4}  MAPE {:.3}%",
                m.price_space.mae, m.price_space.rmse, m.price_space.mape
            );
        }
        Cmd::Ablate { cfg, seeds } => {
            let cfg = cfg.resolve()?;
            if seeds == 0 {
                return Err(Error::Config("--seeds must be at least 1".into()));
            }
            let seed_list: Vec<u64> = (0..seeds as u64).map(|i| cfg.seed + i).collect();
            let report = run_ablation(&cfg, &seed_list)?;
            println!("{} seeds per variant; validation MSE at the best epoch:", seed_list.len());
            for v in &report.variants {
                println!("  {:<18} mean {:.6}", v.variant, v.mean_val_mse);
            }
            println!(
                "full <= plain on {}/{} seeds",
                report.full_beats_plain,
                seed_list.len()
            );
            println!("details in {}", cfg.out_dir.join("ablation.json").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("MODECAST_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("MODECAST_THREADS must be a positive integer, got {threads:?}");
                return ExitCode::FAILURE;
            }
        }
    }
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
