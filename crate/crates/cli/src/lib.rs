//! Experiment harness: suite runs over a task corpus, funnel and
//! verification-rate statistics, and training-curve plots.

pub mod config;
pub mod curves;
pub mod gradcheck;
pub mod suite;
pub mod table;
pub mod train;

use thiserror::Error;

pub use config::HarnessConfig;
pub use curves::{render_training_curves, CurveError, CurvePlots};
pub use suite::{run_suite, FunnelStats, Stage, SuiteConfig, SuiteRun, TaskFunnel};
pub use table::{verification_rate_table, RateRow, TableError};

/// Exit code for a bad or unusable configuration.
pub const EXIT_CONFIG: i32 = 1;
/// Exit code for a failure while running a suite or command.
pub const EXIT_SUITE: i32 = 2;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Suite(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => EXIT_CONFIG,
            HarnessError::Suite(_) => EXIT_SUITE,
        }
    }

    pub fn config(e: impl std::fmt::Display) -> Self {
        HarnessError::Config(e.to_string())
    }

    pub fn suite(e: impl std::fmt::Display) -> Self {
        HarnessError::Suite(e.to_string())
    }
}

/// Renders a percentage with one decimal place.
pub fn format_pct(pct: f64) -> String {
    format!("{pct:.1}")
}
