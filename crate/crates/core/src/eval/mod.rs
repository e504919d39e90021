//! Embedding extraction, template fusion, and verification/identification metrics.

mod embed;
mod metrics;
mod protocol;
mod report;

pub use embed::{
    build_template, cosine_similarity, extract_embeddings, normalize, Fusion, Template, EXTRACT_BATCH,
};
pub use metrics::{
    det_curve, open_set_curve, open_set_from_outcomes, open_set_identify, probe_outcomes, rank_probe, tar_at_far,
    verification_scores, OpenSetResult, OperatingPoint, ProbeOutcome, ScoreSet,
};
pub use protocol::{evaluate_model, EvalConfig, EvalResult};
pub use report::{
    curve_csv, metrics_csv, parse_metrics_csv, percent, sort_rows, svg_plot, MetricRow, PlotSpec, Series,
    METRIC_HEADER, PROTOCOL_ORDER, REGIME_ORDER,
};
