//! Configs, training loops, evaluation and the scripted experiments.

mod checks;
mod config;
mod eval;
mod experiments;
mod train;

pub use checks::{gradcheck_report, run_gradcheck, Scope, DENOISER_TOLERANCE, LOSS_TOLERANCE, OPS_TOLERANCE};
pub use config::{DirLock, ExperimentConfig};
pub use eval::{compare_rows, eval_generator, eval_rae, parse_metrics, EvalSettings, Metric};
pub use train::{train_dit, validation_loss, DataSource, Evaluator, MixtureEval, ValidationEval, LOG_INTERVAL};
pub use experiments::{
    find, hash_text, memorising_loss_ratio, oracle_monotone, quality_sign_counts, run, steps_to_threshold, tts_default, DecodedFeatureEval, Entry,
    ExperimentOutcome, RunOptions, FINETUNE_SET, HALF_NORMAL_DRAWS, REGISTRY,
};
