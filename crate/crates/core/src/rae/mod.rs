//! Representation autoencoder pieces: a frozen encoder, a trained decoder,
//! the composite reconstruction loss, noise-augmented decoding and a
//! Fréchet feature distance.

mod codec;
mod frechet;
mod loss;
mod train;

pub use codec::{
    decode_calls, patchify, random_orthonormal, unpatchify, Decoder, DecoderConfig, Encoder, EncoderConfig, ImageShape,
    LatentCodec, LinearAutoencoder, Rae,
};
pub use frechet::{frechet_distance, frechet_feature_distance, image_features, pooled_image_features, SHRINKAGE};
pub use loss::{
    gram_loss, noise_augment, recon_loss, Adversary, FeatureExtractor, LossWeights, NoiseAugConfig, ReconTerms,
    ZeroAdversary,
};
pub use train::{
    gather, mean_abs_diff, perturbed_l1, stack_images, train_decoder, train_linear_autoencoder, training_images,
    validation_images, DecoderTrainConfig, TrainedDecoder,
};
