//! Training and evaluation of derivative-enhanced DeepONets on reduced
//! inputs.

pub mod error;
pub mod loss;
pub mod metrics;
pub mod training;
pub mod weights;

pub use error::{Error, Result};
pub use loss::{build_loss_graph, compute_loss, loss_of_outputs, relative_group_error, Batch, LossGraph, LossTerms, DEFAULT_EPSILON};
pub use metrics::{
    direction_seed, evaluate_metrics, metrics_from_predictions, predict_test_set, EvalConfig, MetricsReport, Predictions,
    SampleMetrics,
};
pub use training::{train, HistoryRecord, TrainConfig, TrainState, TrainingData};
pub use weights::LossWeights;

/// Loss history as CSV.
pub fn history_csv(history: &[HistoryRecord]) -> String {
    let mut out = String::from("iteration,l1,l2,lambda1,lambda2\n");
    for h in history {
        out.push_str(&format!("{},{:e},{:e},{:e},{:e}\n", h.iteration, h.l1, h.l2, h.lambda1, h.lambda2));
    }
    out
}
