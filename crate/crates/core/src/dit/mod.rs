//! Flow-matching diffusion transformer over exposure brackets and a
//! radiance-scale token.

pub mod config;
pub mod loss;
pub mod lora;
pub mod model;
pub mod params;
pub mod sample;
pub mod tokens;
pub mod train;

pub use config::{LossWeights, ModelConfig, ModulationPlacement, RopeMode, TrainConfig};
pub use lora::lora_merge;
pub use model::{Model, SeqContext, StepInput, Velocity};
pub use params::{init_params, Group, ParamStore};
pub use sample::{euler_integrate, sample, Sample, SampleSeeds};
pub use tokens::SeqLayout;
pub use train::{Example, LossRecord, Phase, Trainer};
