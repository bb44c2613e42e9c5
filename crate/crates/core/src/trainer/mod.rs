//! On-policy actor-critic training over meta-episodes, evaluation and
//! learning-rate sweeps.

mod config;
mod ppo;
mod rollout;
mod run;
mod stats;

pub use config::{embed_for, model_label, EnvSection, ModelSection, TrainConfig, TrainSection, LR_GRID};
pub use ppo::{
    build_loss, clip_grad_norm, compute_advantages, param_grads, ppo_update, Adam, Advantages, LossConfig,
    LossNodes, LossStats, ReturnScaler, UpdateConfig,
};
pub use rollout::{collect_meta_episodes, Agent, RolloutBatch, RolloutGraph};
pub use run::{
    best_lr, default_grid, eval_tasks, evaluate, init_agent, lr_sweep, parallel_map, summarize, train,
    train_seeds, CurvePoint, RunResult, SeedSummary, SweepEntry, SweepResult,
};
pub use stats::{bootstrap_ci, mean, percentile, spearman, Interval, BOOTSTRAP_ITERS, CI_LEVEL};

#[cfg(test)]
mod tests;
