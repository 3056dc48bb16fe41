//! Ingestion, synthetic generators, splits, metrics and result aggregation.

mod aggregate;
mod load;
mod metrics;
mod records;
mod split;
mod synth_tab;
mod synth_ts;

pub use aggregate::{
    aggregate, average_ranks, select_best_looped, select_best_r, AggregateOptions, DatasetSummary, DepthPoint,
    MethodAggregate, MethodSummary, Report, SelectedCot, SelectedLooped, REPORT_SCHEMA_VERSION,
};
pub use load::{load_csv, CsvSchema, EncodedTable, RawTable, TargetKind};
pub use metrics::{accuracy, auc, binary_scores, metric_direction, neg_rmse, MetricName};
pub use records::{read_records, write_records, MethodId, MetricRecord};
pub use split::{stratified_kfold, stratified_split, temporal_split, windows_in, TemporalSplit};
pub use synth_tab::{gen_synthetic_tabular, normal_cdf, GaussianClusters, TabFamily, TabGenParams};
pub use synth_ts::{gen_synthetic_ts, TsFamily, TsGenParams};
