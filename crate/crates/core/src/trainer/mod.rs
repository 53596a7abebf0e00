//! Synthetic data, clip sampling, optimization and the training loop.

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod sampler;
pub mod synth;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use gradcheck::{full_model_gradcheck, GradCheckReport};
pub use optim::{optimizer_step, AdamState, StepConfig};
pub use sampler::{curriculum_gap, sample_clip, ClipPlan, SamplerConfig};
pub use synth::{gen_dataset, gen_synthetic_video, split_seeds, toy_splits, SynthConfig, SyntheticVideo};
pub use train::{clip_gradients, train_loop, validate_model, ClipLoss, TrainConfig, Trainer};
