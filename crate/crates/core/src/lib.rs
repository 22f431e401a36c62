//! Text-to-figure latent diffusion: corpus preparation, a KL autoencoder, a transformer text
//! encoder, a conditional denoising U-Net with DDIM sampling, evaluation metrics and training
//! loops.

pub mod autoencoder;
pub mod corpus;
pub mod diffusion;
mod error;
pub mod imaging;
pub mod metrics;
pub mod nn;
pub mod presets;
pub mod rng;
pub mod text_encoder;
pub mod trainer;

pub use autoencoder::{Autoencoder, AutoencoderConfig};
pub use candle_core::{DType, Device};
pub use corpus::{CorpusConfig, FigureRecord, PreparedSample, TokenizedCaption, Tokenizer};
pub use diffusion::{DiffusionConfig, LatentDiffusion, SamplerConfig, ScheduleConfig, UNetConfig};
pub use error::{Error, Result};
pub use imaging::Image;
pub use metrics::MetricReport;
pub use rng::SeedStream;
pub use text_encoder::TextEncoderConfig;
pub use trainer::{Stage, TrainConfig, TrainLogRecord};
