//! Run configuration, weight files, and the train / sweep / report runners.

mod config;
mod models;
mod prepare;
mod run;
mod weights;

pub use config::{DataSource, DataSpec, ModelSection, RunConfig, SplitSpec, SweepGrid};
pub use models::{method_model, AnyModel, Examples};
pub use prepare::{prepare, Prepared};
pub use run::{method_of, run_report, run_sweep, run_train, sweep_cells, train_and_evaluate, Cell, CellResult, ReportFiles, TrainArtifacts};
pub use weights::{load_weights, read_weights, save_weights, WEIGHTS_MAGIC, WEIGHTS_VERSION};
