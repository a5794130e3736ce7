//! Reproducible runs: dataset generation, training, evaluation and the
//! verification suites behind the command-line tool.

mod config;
mod eval;
mod generate;
pub mod oracles;
mod train;
mod verify;

pub use config::{
    fog_level, DataConfig, DistillConfig, EvalConfig, RunConfig, TrainConfig, VerifyConfig, EVAL_SPLITS, TRAIN_SPLIT,
};
pub use eval::{category_names, cmd_eval, evaluate_split, write_reports};
pub use generate::{cmd_generate, DatasetIndex, SplitSummary};
pub use train::{
    cmd_train, load_training_data, prepare_item, train_loop, BatchPlan, Learner, RunManifest, RunReport, RunStatus,
    TrainItem, TrainLog, CHECKPOINT_DIR, METRICS_FILE, REPORT_JSON, REPORT_TXT,
};
pub use verify::{cmd_verify, gradient_suite, run_suites, suite_count, SuiteResult, VerifyReport};
