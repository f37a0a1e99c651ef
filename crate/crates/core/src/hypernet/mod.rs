//! The adapter-generating hypernetwork, its training, few-shot adaptation
//! and the baselines it is compared against.

pub mod adapt;
pub mod model;
pub mod train;

pub use model::{Episode, Generated, GeneratedVars, HypernetConfig, HypernetParams, HypernetVars};
pub use train::{
    caption_embedding, conditioning_episode, draw_stage2_episode, stage2_eval_loss, stage2_loss, train_hypernet, Frozen,
    HypernetTraining, Stage2Episode, Stage2Record, Stage2Summary,
};
pub use adapt::{
    adapt_few_shot, baseline_ft_projector, baseline_lora, baseline_projector_scratch, generate_adapters, pad_to_width,
    AdaptOutcome, EarlyStopping, FinetuneConfig, FitOutcome, GenerationMode,
};
