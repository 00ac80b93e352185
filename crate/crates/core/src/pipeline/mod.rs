//! Stage orchestration, experiment matrix and reporting.
//!
//! Stage outputs live in `output_dir/<stage>/`:
//!
//! | stage       | reads                         | writes                                              |
//! |-------------|-------------------------------|-----------------------------------------------------|
//! | `generate`  |                               | `train/`, `test/`                                   |
//! | `train-vae` | `generate/train`              | `vae.ufck`, `vae_history.csv`, `features.json`      |
//! | `cluster`   | `train-vae/features.json`     | `labels.json`, `elbow.csv`, `stats.json`            |
//! | `pretrain`  | `generate/train`, `labels.json` | `encoder.ufck`, `pretrain_history.csv`            |
//! | `finetune`  | `generate/train`, `encoder.ufck` | `unet_f<fraction>.ufck`, `finetune_history_f<fraction>.json` |
//! | `evaluate`  | `generate/test`, `unet_f<fraction>.ufck` | `dice_f<fraction>.json`                  |
//!
//! `matrix` writes `results.csv`, `ablation.csv`, `run_report.json` and
//! `config.json` directly under `output_dir`.

mod config;
mod matrix;
mod report;
mod stages;
mod work;

pub use config::{ClusterMethod, ClusterSpec, Config, KChoice, Method, VaeParams, SEED_ENV};
pub use matrix::{
    results_path, run_matrix, AblationRow, ClusterReport, FinetuneReport, PretrainReport, ResultRow, RunReport,
    SeedReport, ABLATION_FILE, REPORT_FILE, RESULTS_FILE,
};
pub use report::{mean_std, report};
pub use stages::{dice_file, load_dice_reports, run_stage, unet_file, Stage};
pub use work::{
    cluster, cluster_stats, finetune_and_evaluate, make_datasets, pretrain_encoder, test_spec, train_features,
    unet_config, ClusterStats, Clustering,
};
