//! Experiment configuration, orchestration and evaluation behind the `vfda`
//! command-line tool.

mod commands;
mod config;
mod metrics;

pub use commands::{
    cmd_ablate, cmd_eval, cmd_gen_data, cmd_train, generate_dataset, load_dataset, report_json, run_federation,
    run_variant, AblationRow, AblationTable, Dataset, ExpError, MetricsWriter, ModelFile, TrainOutcome, MODEL_FORMAT,
};
pub use config::{parse_config, parse_config_str, AblateConfig, ConfigError, DataConfig, ExperimentConfig};
pub use metrics::{dice_score, evaluate, EvalReport};
