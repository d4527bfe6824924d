//! Losses, training stages, evaluation and the online sampling loop.

pub mod config;
pub mod eval;
pub mod losses;
pub mod recipe;
pub mod train;

pub use config::{E2EConfig, LoadFrom, LossWeights, ModelConfig, NetConfig, Stage, TrainConfig};
pub use eval::{
    evaluate_agnostic, evaluate_fixed, evaluate_sampler, evaluate_sampler_trace, mix_and_match_eval,
    run_end_to_end, run_end_to_end_all, Branch, E2EModels, FrameRecord, Metrics, Trace,
};
pub use losses::{prednet_loss, sampled_maps_loss, task_loss, total_loss};
pub use train::{
    collect_reconstructions, generate_pseudo_gt, stage1_pretrain_completion, stage2_train_sampler,
    stage3_joint_finetune, train_fixed_mask, train_prednet, AgnosticSampler, FrameIndex, GuardOutcome,
    PriorSource, SamplerStageOutput, StageReport, Validation,
};
