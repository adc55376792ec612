//! Optimizer, training loop and evaluation protocols.

mod eval;
mod optim;
mod trainer;

pub use eval::{
    evaluate, evaluate_against, latent_perturb, mean_shape_baseline, noise_sweep, part_assign, segment_eval,
    shape_scores, sweep_to_csv, Metrics, NoiseMode, NoiseSweep, SegMetrics, SweepRow, SWEEP_CSV_HEADER,
};
pub use optim::{LrSchedule, OptimizerConfig, OptimizerState};
pub use trainer::{
    argmax, batches, holdout, log_to_csv, optimizer_for, train, train_step, train_with, EpochEvent, EpochLog,
    StepStats, TrainConfig, TrainOutcome,
};
