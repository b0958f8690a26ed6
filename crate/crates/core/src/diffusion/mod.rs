//! Forward noising, the conditional denoiser, base training, classifier-free
//! guidance and the ancestral sampler.

mod denoiser;
mod sampler;
mod schedule;
mod train;

pub use denoiser::{cfg_combine, cfg_predict, time_embedding, Denoiser, DenoiserCheckpoint, DenoiserSpec};
pub use sampler::{sample, sample_chains, CallCounter, ChainBatch, FnPredictor, Predictor, CHAIN_BLOCK};
pub use schedule::{forward_noise, make_schedule, strided_timesteps, NoiseSchedule, ScheduleKind};
pub use train::{denoise_loss, init_train_state, train_base, train_base_from, LossRow, LrSchedule, TrainConfig, TrainExample, TrainOutcome, TrainState};
