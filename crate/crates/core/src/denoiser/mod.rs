//! Toy text-conditioned denoiser: schedule, network, sampler and training.

pub mod checkpoint;
pub mod network;
pub mod prompt;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use network::{
    attention_probs, AttentionBlockRecord, BlockId, Denoiser, DenoiserConfig, DenoiserOutput,
};
pub use prompt::{token, token_name, PromptEmbedding, TokenId, NULL_TOKEN, START_TOKEN};
pub use sampler::{sampler_step, SamplerMode};
pub use schedule::{q_sample, LatentState, NoiseSchedule, ScheduleParams};
pub use train::{noise_mse, Trainer, TrainerConfig, TrainingItem};
