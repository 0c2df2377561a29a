//! Retrieval-prior conditional diffusion regression over region embeddings.

mod baseline;
mod denoiser;
mod model;
mod repository;
mod sampler;
mod schedule;

pub use baseline::{train_point, PointRegressor};
pub use denoiser::{Conditioning, DenoiseInput, Denoiser, DenoiserConfig, COND_LAYERS};
pub use model::{
    finetune, task_count, train, training_priors, DiffusionConfig, DiffusionModel, PredictRequest, PredictionSet,
    PriorMode,
};
pub use repository::{softmax, InfoRepository, Prior, RegionRow, RepoEntry, RetrievalMode, TaskStats};
pub use sampler::{reverse_chain, PointEstimate};
pub use schedule::{DiffusionSchedule, PosteriorCoeffs};
