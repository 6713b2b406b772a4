//! Classification and regression metrics, rank correlations, the per-source
//! annoyance split and sound-level regressors.

mod analysis;
mod metrics;
mod stats;

use thiserror::Error;

pub use analysis::{
    annoyance_probability_split, knn_predict, laeq_knn, laeq_linear_regression, table5_report, LinearFit,
    ProbabilitySplit, SourceAnnoyanceRow, Table5Input, Table5Report, Table5Row, STAR_LEVEL,
};
pub use metrics::{f_score_acc, mae_rmse, roc_auc, ssc_metrics, ArpMetrics, SscMetrics};
pub use stats::{average_ranks, kendall_tau, pearson, pearson_r, spearman_rho, Correlation, PERMUTATION_BELOW};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

/// Metrics of one evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub ssc: SscMetrics,
    pub arp: ArpMetrics,
}

impl EvalMetrics {
    /// `MAE + (1 − AUC)`, lower is better; an undefined AUC counts as 0.5.
    pub fn selection_score(&self) -> f64 {
        self.arp.mae + (1.0 - self.ssc.auc.unwrap_or(0.5))
    }
}
