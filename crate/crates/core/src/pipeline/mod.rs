//! Synthetic scenes, file formats, training and evaluation.

pub mod checkpoint;
pub mod config;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod scene;
pub mod train;

pub use checkpoint::{checkpoint_paths, load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{lr_schedule, DecayUnit, TrainConfig, KEYS as CONFIG_KEYS};
pub use metrics::{
    accumulate_trajectory, align, ate, ate_positions, bbox_diagonal, depth_metrics, evaluate_depth, median_scale,
    Alignment, AteResult, DepthMetrics,
};
pub use optim::Adam;
pub use scene::{generate_scene, generate_scene_sized, SceneKind, SceneSequence};
pub use train::{
    evaluate, forward_only_loss, plan_batches, run_training, train, train_step, window_means, Evaluation, RunSummary,
    StepRecord, LOSS_LOG_HEADER,
};
