//! Decoder training over a mixture of procedural image domains.

use serde::{Deserialize, Serialize};

use super::codec::{Decoder, DecoderConfig, Encoder, EncoderConfig, LinearAutoencoder};
use super::loss::{noise_augment, recon_loss, Adversary, LossWeights, NoiseAugConfig, ZeroAdversary};
use crate::datagen::{render_domain_image, Domain, DomainMix};
use crate::error::{Error, Result};
use crate::report::ExperimentReport;
use crate::rng::{derive_seed, Rng};
use crate::tensor::optim::{AdamWConfig, CosineSchedule, OptimizerState};
use crate::tensor::{Tape, Tensor};

const TRAIN_STREAM: u64 = 1;
const VAL_STREAM: u64 = 2;
const SHUFFLE_STREAM: u64 = 3;
const NOISE_STREAM: u64 = 4;
const INIT_STREAM: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderTrainConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub mix: DomainMix,
    pub train_images: usize,
    pub val_images_per_domain: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub weights: LossWeights,
    /// First epoch at which the adversarial term is switched on.
    pub adv_start_epoch: usize,
    pub noise: NoiseAugConfig,
}

impl DecoderTrainConfig {
    pub fn toy() -> Self {
        DecoderTrainConfig {
            encoder: EncoderConfig::toy(0),
            decoder: DecoderConfig::default(),
            mix: DomainMix::uniform(),
            train_images: 256,
            val_images_per_domain: 32,
            epochs: 20,
            batch: 32,
            lr: 3e-3,
            min_lr: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.0,
            warmup_ratio: 0.0,
            weights: LossWeights::default(),
            adv_start_epoch: 12,
            noise: NoiseAugConfig::off(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mix.validate()?;
        self.weights.validate()?;
        self.noise.validate()?;
        if self.batch == 0 {
            return Err(Error::config("train.batch", "must be positive"));
        }
        if self.train_images == 0 {
            return Err(Error::config("data.train_images", "must be positive"));
        }
        if !(self.lr > 0.0) || !(self.min_lr >= 0.0) {
            return Err(Error::config("optim.lr", "learning rates must be positive"));
        }
        Ok(())
    }
}

/// Images stacked into `[B, C, H, W]`.
pub fn stack_images(images: &[Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Argument("no images to stack".into()))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for im in images {
        data.extend_from_slice(im.data());
    }
    Tensor::new(&shape, data)
}

/// Selects rows `idx` of a batch-major tensor.
pub fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let per = t.numel() / t.shape()[0];
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    Tensor::new(&shape, data).expect("consistent shape")
}

/// Validation images for one domain: depend on `seed` and the domain only,
/// never on the training mix.
pub fn validation_images(domain: Domain, count: usize, seed: u64) -> Result<Tensor> {
    let base = derive_seed(derive_seed(seed, VAL_STREAM), domain as u64);
    let ims: Vec<Tensor> = (0..count)
        .map(|i| render_domain_image(domain, derive_seed(base, i as u64)))
        .collect();
    stack_images(&ims)
}

/// Training images drawn according to `mix`.
pub fn training_images(mix: &DomainMix, count: usize, seed: u64) -> Result<Tensor> {
    let base = derive_seed(seed, TRAIN_STREAM);
    let domains = mix.assign(count, base)?;
    let ims: Vec<Tensor> = domains
        .iter()
        .enumerate()
        .map(|(i, &d)| render_domain_image(d, derive_seed(base, i as u64)))
        .collect();
    stack_images(&ims)
}

pub fn mean_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.numel() as f64
}

/// Mean ℓ1 of `decoder(encoder(x) + σ·ε)` against `x`, with fixed noise.
pub fn perturbed_l1(encoder: &Encoder, decoder: &Decoder, images: &Tensor, sigma: f64, seed: u64) -> Result<f64> {
    let mut z = encoder.encode(images)?;
    if sigma > 0.0 {
        let mut rng = Rng::new(seed);
        z.data_mut().iter_mut().for_each(|v| *v += sigma * rng.normal());
    }
    Ok(mean_abs_diff(&decoder.decode_tensor(&z)?, images))
}

pub struct TrainedDecoder {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub report: ExperimentReport,
}

/// Trains a decoder on frozen-encoder latents of images drawn from
/// `cfg.mix`. Logs, per epoch: the mean training loss (`train_loss`, from
/// epoch 1), the validation loss on clean latents (`val_loss`) and the
/// validation ℓ1 per domain (`val_l1/<domain>`) plus their mean
/// (`val_l1`). Epoch 0 is the untrained decoder.
pub fn train_decoder(cfg: &DecoderTrainConfig, seed: u64, config_hash: &str) -> Result<TrainedDecoder> {
    cfg.validate()?;
    let encoder = Encoder::new(cfg.encoder)?;
    let mut decoder = Decoder::new(&cfg.decoder, encoder.latent_shape(), cfg.encoder.image, derive_seed(seed, INIT_STREAM))?;
    let mut report = ExperimentReport::new("train_decoder", config_hash, seed);

    let train_x = training_images(&cfg.mix, cfg.train_images, seed)?;
    let train_z = encoder.encode(&train_x)?;
    let val: Vec<(Domain, Tensor, Tensor)> = Domain::ALL
        .iter()
        .map(|&d| {
            let x = validation_images(d, cfg.val_images_per_domain.max(1), seed)?;
            let z = encoder.encode(&x)?;
            Ok((d, x, z))
        })
        .collect::<Result<_>>()?;

    let steps_per_epoch = cfg.train_images.div_ceil(cfg.batch);
    let sched = CosineSchedule {
        max_lr: cfg.lr,
        min_lr: cfg.min_lr,
        warmup_ratio: cfg.warmup_ratio,
        total_steps: (steps_per_epoch * cfg.epochs) as u64,
    };
    let mut opt = OptimizerState::new(
        AdamWConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        },
        &decoder.params,
    );
    let mut noise_rng = Rng::new(derive_seed(seed, NOISE_STREAM));
    let mut step = 0u64;

    let evaluate = |decoder: &Decoder, report: &mut ExperimentReport, step: u64, epoch: u64| -> Result<()> {
        let mut total_l1 = 0.0;
        let mut total_loss = 0.0;
        for (d, x, z) in &val {
            let tape = Tape::new();
            let p = decoder.params.bind(&tape);
            let xv = tape.constant(x.shape(), x.data().to_vec())?;
            let zv = tape.constant(z.shape(), z.data().to_vec())?;
            let y = decoder.decode(&p, &zv)?;
            let (_, terms) = recon_loss(&xv, &y, &cfg.weights, &encoder, None)?;
            report.log(step, epoch, format!("val_l1/{d}"), terms.l1);
            total_l1 += terms.l1;
            total_loss += terms.total;
        }
        report.log(step, epoch, "val_l1", total_l1 / val.len() as f64);
        report.log(step, epoch, "val_loss", total_loss / val.len() as f64);
        Ok(())
    };

    report.timed("train_decoder", |report| -> Result<()> {
        evaluate(&decoder, report, 0, 0)?;
        let adversary = ZeroAdversary;
        for epoch in 1..=cfg.epochs as u64 {
            let mut order: Vec<usize> = (0..cfg.train_images).collect();
            Rng::new(derive_seed(derive_seed(seed, SHUFFLE_STREAM), epoch)).shuffle(&mut order);
            let adv: Option<&dyn Adversary> = if epoch as usize > cfg.adv_start_epoch { Some(&adversary) } else { None };
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(cfg.batch) {
                let x = gather(&train_x, chunk);
                let (z, _) = noise_augment(&gather(&train_z, chunk), &cfg.noise, &mut noise_rng)?;
                let tape = Tape::new();
                let p = decoder.params.bind(&tape);
                let xv = tape.constant(&x.shape().to_vec(), x.into_data())?;
                let zv = tape.constant(&z.shape().to_vec(), z.into_data())?;
                let y = decoder.decode(&p, &zv)?;
                let (loss, terms) = recon_loss(&xv, &y, &cfg.weights, &encoder, adv)?;
                let grads = tape.backward(loss)?;
                decoder.params.absorb(&grads, &p);
                opt.step(&mut decoder.params, sched.lr(step));
                step += 1;
                epoch_loss += terms.total * chunk.len() as f64;
            }
            report.log(step, epoch, "train_loss", epoch_loss / cfg.train_images as f64);
            evaluate(&decoder, report, step, epoch)?;
        }
        Ok(())
    })?;
    Ok(TrainedDecoder {
        encoder,
        decoder,
        report,
    })
}

/// Trains the compressed-latent baseline on ℓ1 for `steps` minibatches.
pub fn train_linear_autoencoder(
    images: &Tensor,
    channels: usize,
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<(LinearAutoencoder, Vec<f64>)> {
    let image = super::codec::ImageShape::toy();
    let mut ae = LinearAutoencoder::new(image, channels, derive_seed(seed, INIT_STREAM))?;
    let mut opt = OptimizerState::new(
        AdamWConfig {
            lr,
            ..AdamWConfig::default()
        },
        &ae.params,
    );
    let sched = CosineSchedule {
        max_lr: lr,
        min_lr: lr / 10.0,
        warmup_ratio: 0.0,
        total_steps: steps as u64,
    };
    let n = images.shape()[0];
    let mut rng = Rng::new(derive_seed(seed, SHUFFLE_STREAM));
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let idx: Vec<usize> = (0..batch.min(n)).map(|_| rng.below(n)).collect();
        let x = gather(images, &idx);
        let tape = Tape::new();
        let p = ae.params.bind(&tape);
        let xv = tape.constant(&x.shape().to_vec(), x.into_data())?;
        let y = ae.decode_var(&p, &ae.encode_var(&p, &xv)?)?;
        let loss = y.sub(&xv)?.abs().mean();
        losses.push(loss.item());
        let grads = tape.backward(loss)?;
        ae.params.absorb(&grads, &p);
        opt.step(&mut ae.params, sched.lr(step as u64));
    }
    Ok((ae, losses))
}
