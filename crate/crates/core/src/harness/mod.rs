//! Run configuration, experiment orchestration and result reporting.

mod commands;
mod config;
mod experiment;
mod report;

pub use commands::{
    ablation_variants, cmd_ablate, cmd_adapt, cmd_gen_data, cmd_report, cmd_sweep_beta, cmd_train, default_checkpoint,
    SweepRow, TrainOutput, ABLATION_ROWS,
};
pub use config::{
    DataConfig, DataSource, DomainGrid, DomainsConfig, ModelConfig, RunConfig, SeedOverrides, StreamConfig, SubSeeds,
    SweepConfig,
};
pub use experiment::{load_data, objective_name, seed_path, Experiment};
pub use report::{build_report, format_table, parse_result_name, result_path, summary_table, Report, ReportRow, RunSummary};
