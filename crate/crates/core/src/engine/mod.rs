//! Training, evaluation, checkpointing and experiment orchestration.

pub mod checkpoint;
pub mod config;
pub mod diversity;
pub mod experiment;
pub mod gradcheck;
pub mod logs;
pub mod metrics;
pub mod optim;
pub mod train;

pub use checkpoint::{load, load_encoder_weights, save, Manifest};
pub use config::{OpenSynthesis, StyleAugment, TrainConfig};
pub use gradcheck::{grad_check, grad_check_all, GradCheckConfig, GradCheckReport, GradComponent};
pub use metrics::{evaluate, evaluate_domains, h_score, EvalReport, MultiDomainReport};
pub use optim::Sgd;
pub use train::{train, train_step, training_accuracy, LossRecord, StepLosses, TrainOutcome, TripletBatch};
pub use diversity::{cosine_distance, style_diversity_report, DiversityReport};
pub use experiment::{
    assemble_tables, run, run_cell, sweep_cells, toy_train_config, CellResult, GridTable, Method, PreparedData,
    RunResult, SweepAxis, SweepCell, SyntheticTrack,
};
pub use logs::{read_loss_log, write_loss_log};
