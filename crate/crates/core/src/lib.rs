//! Mode-decomposition feature engineering and sparse-attention forecasting
//! for minute/hour-scale financial time series.
//!
//! The crate is organised as a pipeline:
//!
//! * [`ingest`] — OHLCV bars, the 29-column indicator bank, log-diff and
//!   standardisation transforms, chronological split + sliding windows.
//! * [`vmd`] — variational mode decomposition (ADMM in the frequency
//!   domain) plus periodogram utilities.
//! * [`micfe`] — maximal-information-style correlation on binned
//!   histograms, decomposition level selection, fuzzy entropy, feature
//!   grouping and reconstruction.
//! * [`tensor`] — a minimal reverse-mode autodiff tape used by the model.
//! * [`model`] — embeddings, probabilistically sparse attention, the
//!   multi-branch distilling encoder and the generative decoder.
//! * [`train`] — centralized-gradient Adam, the adaptive robust loss,
//!   metrics and the training loop.
//! * [`pipeline`] — configuration, artifact management, the synthetic
//!   fixture and the stage runner behind the CLI.

pub mod error;
pub mod ingest;
pub mod micfe;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod train;
pub mod vmd;

pub use error::{Error, Result};
