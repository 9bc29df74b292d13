//! Frozen-embedding evaluation: probes, retrieval and reports.

mod metrics;
mod probe;
mod protocol;
mod report;
mod retrieval;

pub use metrics::{argmax_rows, r_squared, top1_accuracy, Standardizer};
pub use probe::{train_probe, train_probe_with, HeadDepth, Probe, ProbeConfig, ProbeTargets};
pub(crate) use protocol::{canonical_rows, ordered_pairs, pair_inputs, quat_targets};
pub use protocol::{
    classification_probe, colour_probe, embed_dataset, embed_views, evaluate, identity_retrieval,
    random_embedding_retrieval, retrieval_eval, rotation_probe, view_infos, EmbeddingKind,
    EvalProtocol, EvalResults, EvalSelection, ViewEmbeddings,
};
pub use report::{reports_to_csv, MetricReport, METRIC_NAMES};
pub use retrieval::{
    pre_metric, retrieval_metrics, retrieve, RetrievalOutcome, RetrievalReport, ViewInfo,
};
