//! Frozen patch encoder, trainable token decoder, and the linear
//! autoencoder used as the compressed-latent baseline.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::LatentShape;
use crate::nn::{Init, Initializer, Linear};
use crate::rng::Rng;
use crate::tensor::params::Bound;
use crate::conditioning::sidecar;
use crate::tensor::checkpoint;
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use std::path::Path;

/// Layout of single images: `channels × height × width`, cut into square
/// non-overlapping patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl ImageShape {
    pub fn toy() -> Self {
        ImageShape {
            channels: 1,
            height: 32,
            width: 32,
            patch: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.channels == 0 {
            return Err(Error::config("image.patch", "must be positive"));
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::Dimension(format!(
                "{}×{} image is not divisible into {p}×{p} patches",
                self.height,
                self.width,
                p = self.patch
            )));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn check_batch(&self, shape: &[usize]) -> Result<usize> {
        if shape.len() != 4 || shape[1..] != [self.channels, self.height, self.width] {
            return Err(Error::Dimension(format!(
                "expected [B, {}, {}, {}] images, got {shape:?}",
                self.channels, self.height, self.width
            )));
        }
        Ok(shape[0])
    }
}

/// `[B, C, H, W] → [B, N, C·p·p]`, tokens in raster order.
pub fn patchify<'t>(images: &Var<'t>, shape: ImageShape) -> Result<Var<'t>> {
    shape.validate()?;
    let b = shape.check_batch(&images.shape())?;
    let (c, p) = (shape.channels, shape.patch);
    let (gh, gw) = (shape.height / p, shape.width / p);
    images
        .reshape(&[b, c, gh, p, gw, p])?
        .permute(&[0, 2, 4, 1, 3, 5])?
        .reshape(&[b, gh * gw, shape.patch_dim()])
}

/// Inverse of [`patchify`].
pub fn unpatchify<'t>(tokens: &Var<'t>, shape: ImageShape) -> Result<Var<'t>> {
    let s = tokens.shape();
    if s.len() != 3 || s[1] != shape.tokens() || s[2] != shape.patch_dim() {
        return Err(Error::Dimension(format!(
            "expected [B, {}, {}] patch tokens, got {s:?}",
            shape.tokens(),
            shape.patch_dim()
        )));
    }
    let (c, p) = (shape.channels, shape.patch);
    let (gh, gw) = (shape.height / p, shape.width / p);
    tokens
        .reshape(&[s[0], gh, gw, c, p, p])?
        .permute(&[0, 3, 1, 4, 2, 5])?
        .reshape(&[s[0], c, shape.height, shape.width])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image: ImageShape,
    pub channels: usize,
    pub seed: u64,
    /// Skip the tanh (used by the pseudo-inverse check).
    pub linear: bool,
}

impl EncoderConfig {
    pub fn toy(seed: u64) -> Self {
        EncoderConfig {
            image: ImageShape::toy(),
            channels: 64,
            seed,
            linear: false,
        }
    }
}

/// Frozen encoder: patches → fixed random orthogonal projection → tanh.
/// Nothing here is a parameter; it never sees a gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    /// `patch_dim × channels`, orthonormal columns (or rows when
    /// `channels > patch_dim`).
    projection: Vec<f64>,
}

/// `rows × cols` matrix with orthonormal columns (`rows ≥ cols`), from the
/// QR factorization of a seeded Gaussian matrix with sign-fixed `R`.
pub fn random_orthonormal(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    debug_assert!(rows >= cols);
    let g = DMatrix::from_row_slice(rows, cols, &Rng::new(seed).normals(rows * cols));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(q[(i, j)]);
        }
    }
    out
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.image.validate()?;
        if config.channels == 0 {
            return Err(Error::config("encoder.channels", "must be positive"));
        }
        let (p, d) = (config.image.patch_dim(), config.channels);
        let projection = if d <= p {
            random_orthonormal(p, d, config.seed)
        } else {
            let q = random_orthonormal(d, p, config.seed);
            crate::tensor::kernels::transpose(&q, d, p)
        };
        Ok(Encoder { config, projection })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn latent_shape(&self) -> LatentShape {
        LatentShape {
            tokens: self.config.image.tokens(),
            channels: self.config.channels,
        }
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    /// Token features of `images: [B, C, H, W]`, recorded on the images' tape
    /// so losses built on them are differentiable w.r.t. the images.
    pub fn features<'t>(&self, images: &Var<'t>) -> Result<Var<'t>> {
        let tape = images.tape();
        let w = tape.constant(&[self.config.image.patch_dim(), self.config.channels], self.projection.clone())?;
        let z = patchify(images, self.config.image)?.matmul(&w)?;
        Ok(if self.config.linear { z } else { z.tanh() })
    }

    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let x = tape.constant(images.shape(), images.data().to_vec())?;
        Ok(self.features(&x)?.to_tensor())
    }

    /// Hash of the frozen projection, for freeze checks.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in &self.projection {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Hidden widths of the per-token MLP; empty means a single linear map.
    pub hidden: Vec<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { hidden: vec![128, 128] }
    }
}

/// Per-token MLP from latent channels to patch pixels, then un-patchify.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub params: ParamStore,
    config: DecoderConfig,
    layers: Vec<Linear>,
    latent: LatentShape,
    image: ImageShape,
}

impl Decoder {
    pub fn new(config: &DecoderConfig, latent: LatentShape, image: ImageShape, seed: u64) -> Result<Self> {
        image.validate()?;
        if latent.tokens != image.tokens() {
            return Err(Error::Dimension(format!(
                "{} latent tokens for an image with {} patches",
                latent.tokens,
                image.tokens()
            )));
        }
        if config.hidden.contains(&0) {
            return Err(Error::config("decoder.hidden", "widths must be positive"));
        }
        let mut params = ParamStore::new();
        let mut init = Initializer::new(seed);
        let mut widths = vec![latent.channels];
        widths.extend(&config.hidden);
        widths.push(image.patch_dim());
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::register(&mut params, &mut init, &format!("decoder/fc{i}"), w[0], w[1], Init::FanIn))
            .collect();
        Ok(Decoder {
            params,
            config: config.clone(),
            layers,
            latent,
            image,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn latent_shape(&self) -> LatentShape {
        self.latent
    }

    pub fn image_shape(&self) -> ImageShape {
        self.image
    }

    pub fn decode<'t>(&self, p: &Bound<'t>, z: &Var<'t>) -> Result<Var<'t>> {
        count_decode();
        let s = z.shape();
        if s.len() != 3 || s[1..] != [self.latent.tokens, self.latent.channels] {
            return Err(Error::Dimension(format!(
                "decoder expects [B, {}, {}] latents, got {s:?}",
                self.latent.tokens, self.latent.channels
            )));
        }
        let mut h = *z;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(p, &h)?;
            if i + 1 < self.layers.len() {
                h = h.gelu();
            }
        }
        unpatchify(&h, self.image)
    }

    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let zv = tape.constant(z.shape(), z.data().to_vec())?;
        Ok(self.decode(&p, &zv)?.to_tensor())
    }
}

thread_local! {
    static DECODE_CALLS: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

fn count_decode() {
    DECODE_CALLS.with(|c| c.set(c.get() + 1));
}

/// Decoder forward passes run on the current thread so far.
pub fn decode_calls() -> u64 {
    DECODE_CALLS.with(std::cell::Cell::get)
}

/// Linear autoencoder to `channels` per token: the compressed-latent
/// baseline. Both maps are trainable.
#[derive(Clone, Debug)]
pub struct LinearAutoencoder {
    pub params: ParamStore,
    enc: Linear,
    dec: Linear,
    image: ImageShape,
    channels: usize,
}

impl LinearAutoencoder {
    pub fn new(image: ImageShape, channels: usize, seed: u64) -> Result<Self> {
        image.validate()?;
        if channels == 0 {
            return Err(Error::config("compressed.channels", "must be positive"));
        }
        let mut params = ParamStore::new();
        let mut init = Initializer::new(seed);
        let p = image.patch_dim();
        let enc = Linear::register(&mut params, &mut init, "linear_ae/enc", p, channels, Init::FanIn);
        let dec = Linear::register(&mut params, &mut init, "linear_ae/dec", channels, p, Init::FanIn);
        Ok(LinearAutoencoder {
            params,
            enc,
            dec,
            image,
            channels,
        })
    }

    pub fn latent_shape(&self) -> LatentShape {
        LatentShape {
            tokens: self.image.tokens(),
            channels: self.channels,
        }
    }

    pub fn image_shape(&self) -> ImageShape {
        self.image
    }

    pub fn encode_var<'t>(&self, p: &Bound<'t>, images: &Var<'t>) -> Result<Var<'t>> {
        self.enc.forward(p, &patchify(images, self.image)?)
    }

    pub fn decode_var<'t>(&self, p: &Bound<'t>, z: &Var<'t>) -> Result<Var<'t>> {
        count_decode();
        unpatchify(&self.dec.forward(p, z)?, self.image)
    }

    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let x = tape.constant(images.shape(), images.data().to_vec())?;
        Ok(self.encode_var(&p, &x)?.to_tensor())
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let zv = tape.constant(z.shape(), z.data().to_vec())?;
        Ok(self.decode_var(&p, &zv)?.to_tensor())
    }
}

/// Anything that maps images to `N × d` latents and back.
pub trait LatentCodec {
    fn latent_shape(&self) -> LatentShape;
    fn encode(&self, images: &Tensor) -> Result<Tensor>;
    fn decode(&self, latents: &Tensor) -> Result<Tensor>;
}

/// Frozen encoder paired with a trained decoder.
#[derive(Clone, Debug)]
pub struct Rae {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

#[derive(Serialize, Deserialize)]
struct RaeSidecar {
    encoder: EncoderConfig,
    decoder: DecoderConfig,
}

const RAE_PREFIX: &str = "rae";

impl Rae {
    /// Decoder weights as a checkpoint; both configs (the encoder is
    /// rebuilt from its seed) as JSON in `<path>.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.decoder.params.export(RAE_PREFIX))?;
        let side = RaeSidecar {
            encoder: *self.encoder.config(),
            decoder: self.decoder.config.clone(),
        };
        std::fs::write(sidecar(path), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side: RaeSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar(path))?)?;
        let encoder = Encoder::new(side.encoder)?;
        let mut decoder = Decoder::new(&side.decoder, encoder.latent_shape(), side.encoder.image, 0)?;
        decoder.params.import(RAE_PREFIX, &checkpoint::load(path)?)?;
        Ok(Rae { encoder, decoder })
    }
}

impl LatentCodec for Rae {
    fn latent_shape(&self) -> LatentShape {
        self.encoder.latent_shape()
    }

    fn encode(&self, images: &Tensor) -> Result<Tensor> {
        self.encoder.encode(images)
    }

    fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        self.decoder.decode_tensor(latents)
    }
}

impl LatentCodec for LinearAutoencoder {
    fn latent_shape(&self) -> LatentShape {
        LinearAutoencoder::latent_shape(self)
    }

    fn encode(&self, images: &Tensor) -> Result<Tensor> {
        LinearAutoencoder::encode(self, images)
    }

    fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        LinearAutoencoder::decode(self, latents)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_normal;

    fn images(b: usize, seed: u64) -> Tensor {
        let mut t = seeded_normal(&[b, 1, 32, 32], seed);
        t.data_mut().iter_mut().for_each(|v| *v = 0.5 + 0.2 * *v);
        t
    }

    #[test]
    fn patchify_round_trip_and_layout() {
        let shape = ImageShape::toy();
        let x = images(2, 1);
        let tape = Tape::new();
        let v = tape.leaf(&x);
        let tokens = patchify(&v, shape).unwrap();
        assert_eq!(tokens.shape(), vec![2, 16, 64]);
        // Token 5 is grid cell (1, 1); its element 9 is pixel (8 + 1, 8 + 1).
        assert_eq!(tokens.value()[5 * 64 + 9], x.data()[9 * 32 + 9]);
        let back = unpatchify(&tokens, shape).unwrap();
        assert_eq!(&*back.value(), x.data());
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let bad = ImageShape {
            channels: 1,
            height: 30,
            width: 32,
            patch: 8,
        };
        assert!(matches!(Encoder::new(EncoderConfig { image: bad, ..EncoderConfig::toy(0) }), Err(Error::Dimension(_))));
    }

    #[test]
    fn projection_is_orthonormal() {
        for d in [4, 64, 96] {
            let enc = Encoder::new(EncoderConfig {
                channels: d,
                ..EncoderConfig::toy(3)
            })
            .unwrap();
            let w = DMatrix::from_row_slice(64, d, enc.projection());
            let gram = if d <= 64 { w.transpose() * &w } else { &w * w.transpose() };
            let n = gram.nrows();
            assert!((gram - DMatrix::<f64>::identity(n, n)).abs().max() < 1e-12);
        }
    }

    #[test]
    fn encoder_basics() {
        let enc = Encoder::new(EncoderConfig::toy(9)).unwrap();
        let zero = enc.encode(&Tensor::zeros(&[1, 1, 32, 32])).unwrap();
        assert!(zero.data().iter().all(|v| *v == 0.0));
        let a = images(1, 4);
        let mut b = a.clone();
        b.data_mut()[3 * 32 + 20] += 0.1;
        let (za, zb) = (enc.encode(&a).unwrap(), enc.encode(&b).unwrap());
        assert_eq!(za, enc.encode(&a).unwrap());
        assert_eq!(za, Encoder::new(EncoderConfig::toy(9)).unwrap().encode(&a).unwrap());
        let diff: Vec<usize> = (0..16)
            .filter(|t| za.data()[t * 64..(t + 1) * 64] != zb.data()[t * 64..(t + 1) * 64])
            .collect();
        assert_eq!(diff, vec![2]);
    }

    #[test]
    fn linear_decoder_pseudo_inverse_is_exact() {
        // With tanh disabled the encoder is z = P·W; loading Wᵀ into a linear
        // decoder inverts it.
        let cfg = EncoderConfig {
            linear: true,
            ..EncoderConfig::toy(2)
        };
        let enc = Encoder::new(cfg).unwrap();
        let mut dec = Decoder::new(&DecoderConfig { hidden: vec![] }, enc.latent_shape(), cfg.image, 0).unwrap();
        let w = crate::tensor::kernels::transpose(enc.projection(), 64, 64);
        let id = dec.params.find("decoder/fc0/weight").unwrap();
        dec.params.get_mut(id).data_mut().copy_from_slice(&w);
        let x = images(3, 8);
        let y = dec.decode_tensor(&enc.encode(&x).unwrap()).unwrap();
        assert_eq!(y.shape(), &[3, 1, 32, 32]);
        let l1 = y.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.numel() as f64;
        assert!(l1 <= 1e-3, "{l1}");
        assert!(l1 <= 1e-12, "{l1}");
    }

    #[test]
    fn decoder_shape_errors() {
        let enc = Encoder::new(EncoderConfig::toy(0)).unwrap();
        let dec = Decoder::new(&DecoderConfig::default(), enc.latent_shape(), ImageShape::toy(), 0).unwrap();
        assert!(matches!(dec.decode_tensor(&Tensor::zeros(&[2, 16, 8])), Err(Error::Dimension(_))));
        assert_eq!(dec.decode_tensor(&Tensor::zeros(&[2, 16, 64])).unwrap().shape(), &[2, 1, 32, 32]);
    }

    #[test]
    fn linear_ae_shapes() {
        let ae = LinearAutoencoder::new(ImageShape::toy(), 4, 1).unwrap();
        let z = ae.encode(&images(2, 0)).unwrap();
        assert_eq!(z.shape(), &[2, 16, 4]);
        assert_eq!(ae.decode(&z).unwrap().shape(), &[2, 1, 32, 32]);
    }

    #[test]
    fn rae_checkpoint_round_trip_and_decode_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rae.raet");
        let encoder = Encoder::new(EncoderConfig::toy(3)).unwrap();
        let decoder = Decoder::new(&DecoderConfig { hidden: vec![8] }, encoder.latent_shape(), ImageShape::toy(), 4).unwrap();
        let rae = Rae { encoder, decoder };
        rae.save(&path).unwrap();
        let back = Rae::load(&path).unwrap();
        assert_eq!(back.encoder, rae.encoder);
        assert_eq!(back.decoder.params.fingerprint(), rae.decoder.params.fingerprint());
        let before = decode_calls();
        let z = rae.encode(&images(1, 0)).unwrap();
        assert_eq!(decode_calls(), before);
        assert_eq!(back.decode(&z).unwrap().data(), rae.decode(&z).unwrap().data());
        assert_eq!(decode_calls(), before + 2);
    }
}
