//! Training loops for every mode, zero-shot calibration, evaluation and the
//! relative-accuracy metric.

mod config;
mod eval;
mod loss;
mod metrics;
mod run;
mod selection;

pub use config::{
    AlphaConfig, DataConfig, Mode, ModelSpec, OptimizerConfig, RunConfig, SCHEMA_VERSION,
};
pub use eval::{calibrate_bn, evaluate, evaluate_bits};
pub use loss::{delta_b, loss_for_bit, BitLoss};
pub use metrics::{
    histogram_csv, metrics_csv, parse_metrics_csv, read_metrics_csv, teacher_histogram, BitResult,
    HistogramRow, MetricsRow, ResultKind, RunSummary,
};
pub use run::{train, Trainer, CHECKPOINT_FILE, HISTOGRAM_FILE, METRICS_FILE, SUMMARY_FILE};
pub use selection::{
    block_probability, entropy, sample_swap_mask, select_teacher, Candidate, SwapSchedule,
    TeacherChoice,
};
