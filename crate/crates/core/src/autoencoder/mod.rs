//! KL-regularized convolutional autoencoder compressing images by a factor of 8 into a
//! 4-channel latent grid, plus the perceptual, KL and adversarial losses that train it.

mod discriminator;
mod extractor;
mod loss;
mod model;

pub use discriminator::{hinge_losses, PatchDiscriminator};
pub use extractor::{ConvFeatureExtractor, ExtractorKind, FeatureExtractor, IdentityExtractor};
pub use loss::{
    l1_loss, perceptual_loss, total_ae_loss, AeLossBreakdown, AeLossInputs, AeLossWeights,
};
pub use model::{Autoencoder, AutoencoderConfig, LatentDistribution, LOGVAR_MAX, LOGVAR_MIN};
