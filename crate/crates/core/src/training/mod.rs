//! The alternating three-phase update and the loop around it.

pub mod config;
pub mod optim;
pub mod run;
pub mod step;

pub use config::{lr_schedule, LearningRates, NegSource, OptimizerConfig, OptimizerKind, TrainConfig};
pub use optim::PartitionOptimizer;
pub use run::{
    checkpoint_path, epoch_permutation, latest_checkpoint, load_state, save_state, train_loop,
    RunOptions, RunOutcome, METRICS_FILE, NAN_DUMP_FILE,
};
pub use step::{
    compare_hardness, negative_spread, probe_adversarial_direction, step_rng, train_step,
    train_step_traced, DirectionProbe, HardnessComparison, Phase, StepReport, StepTrace, TrainState,
};
