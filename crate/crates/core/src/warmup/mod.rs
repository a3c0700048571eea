//! End-to-end protocol: pretrain a backbone on old items, freeze it, train
//! the diffusion stack, replace item embeddings with generated ones and
//! evaluate on new items through the cold and three warm stages.

pub mod bench;
mod config;
mod pipeline;
mod report;

pub use config::{DataSource, ExperimentConfig};
pub use pipeline::{
    finetune_item_ids, pretrain, run_experiment, score_test, shuffled_batches, staged_eval,
    train_csdm, write_back, Method, RunOutput, RunRngs, StageReport,
};
pub use report::{plot_json, results_csv, write_text, CSV_HEADER};
