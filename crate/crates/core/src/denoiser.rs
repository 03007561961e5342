//! DiT-style velocity network with adaLN-zero modulation and an optional
//! wide, shallow denoising head.
//!
//! Latent tokens enter through a linear embedding plus learned positions.
//! The timestep goes through a sinusoidal embedding and a two-layer MLP; the
//! condition vector is projected to the same width and added to it. Every
//! block (backbone and head) is pre-norm attention + MLP whose shift, scale
//! and gate come from that embedding; modulation and output projections are
//! zero-initialized, so a fresh model predicts zero velocity.
//!
//! The head, when configured, runs `ddt_head_depth` blocks at
//! `ddt_head_width`. Its input is the backbone output widened by a linear
//! adapter plus a direct linear embedding of `x_t`, and the final projection
//! maps from the head width straight to the latent channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::LatentShape;
use crate::nn::{Init, Initializer, Linear};
use crate::tensor::params::Bound;
use crate::tensor::{ParamId, ParamStore, Tape, Var};

pub const LN_EPS: f64 = 1e-6;
const MLP_RATIO: usize = 4;
const POS_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub latent: LatentShape,
    pub ddt_head_width: Option<usize>,
    pub ddt_head_depth: usize,
    pub cond_dim: usize,
    /// Width of the sinusoidal timestep features.
    pub freq_dim: usize,
}

impl DenoiserConfig {
    /// Backbone narrower than the latent channels (48 < 64).
    pub fn narrow(latent: LatentShape) -> Self {
        DenoiserConfig {
            hidden: 48,
            depth: 2,
            heads: 4,
            latent,
            ddt_head_width: None,
            ddt_head_depth: 2,
            cond_dim: 32,
            freq_dim: 32,
        }
    }

    /// Backbone wider than the latent channels (128 > 64).
    pub fn wide(latent: LatentShape) -> Self {
        DenoiserConfig {
            hidden: 128,
            ..Self::narrow(latent)
        }
    }

    pub fn with_head(mut self, width: usize) -> Self {
        self.ddt_head_width = Some(width);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("denoiser.hidden", self.hidden),
            ("denoiser.depth", self.depth),
            ("denoiser.heads", self.heads),
            ("denoiser.cond_dim", self.cond_dim),
            ("denoiser.freq_dim", self.freq_dim),
            ("latent.tokens", self.latent.tokens),
            ("latent.channels", self.latent.channels),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::config(
                "denoiser.hidden",
                format!("{} is not divisible by {} heads", self.hidden, self.heads),
            ));
        }
        if self.freq_dim % 2 != 0 {
            return Err(Error::config("denoiser.freq_dim", "must be even"));
        }
        if let Some(w) = self.ddt_head_width {
            if w <= self.hidden {
                return Err(Error::config(
                    "denoiser.ddt_head_width",
                    format!("head width {w} must exceed backbone width {}", self.hidden),
                ));
            }
            if w % self.heads != 0 {
                return Err(Error::config(
                    "denoiser.ddt_head_width",
                    format!("{w} is not divisible by {} heads", self.heads),
                ));
            }
            if self.ddt_head_depth == 0 {
                return Err(Error::config("denoiser.ddt_head_depth", "must be positive"));
            }
        }
        Ok(())
    }

    fn out_width(&self) -> usize {
        self.ddt_head_width.unwrap_or(self.hidden)
    }
}

/// Exact number of learned scalars in a denoiser built from `config`.
pub fn param_count(config: &DenoiserConfig) -> usize {
    let (h, d, n) = (config.hidden, config.latent.channels, config.latent.tokens);
    let block = |w: usize| {
        Linear::param_count(h, 6 * w)
            + Linear::param_count(w, 3 * w)
            + Linear::param_count(w, w)
            + Linear::param_count(w, MLP_RATIO * w)
            + Linear::param_count(MLP_RATIO * w, w)
    };
    let mut total = Linear::param_count(d, h)
        + n * h
        + Linear::param_count(config.freq_dim, h)
        + Linear::param_count(h, h)
        + Linear::param_count(config.cond_dim, h)
        + config.depth * block(h);
    if let Some(w) = config.ddt_head_width {
        total += Linear::param_count(h, w) + Linear::param_count(d, w) + config.ddt_head_depth * block(w);
    }
    let w = config.out_width();
    total + Linear::param_count(h, 2 * w) + Linear::param_count(w, d)
}

#[derive(Clone, Debug)]
struct Block {
    width: usize,
    heads: usize,
    modulation: Linear,
    qkv: Linear,
    proj: Linear,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn register(store: &mut ParamStore, init: &mut Initializer, name: &str, cond: usize, width: usize, heads: usize) -> Self {
        Block {
            width,
            heads,
            modulation: Linear::register(store, init, &format!("{name}/modulation"), cond, 6 * width, Init::Zeros),
            qkv: Linear::register(store, init, &format!("{name}/qkv"), width, 3 * width, Init::FanIn),
            proj: Linear::register(store, init, &format!("{name}/proj"), width, width, Init::FanIn),
            fc1: Linear::register(store, init, &format!("{name}/fc1"), width, MLP_RATIO * width, Init::FanIn),
            fc2: Linear::register(store, init, &format!("{name}/fc2"), MLP_RATIO * width, width, Init::FanIn),
        }
    }

    fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>, c: &Var<'t>) -> Result<Var<'t>> {
        let w = self.width;
        let b = x.shape()[0];
        let m = self.modulation.forward(p, c)?;
        let chunk = |i: usize| -> Result<Var<'t>> { m.slice_last(i * w, w)?.reshape(&[b, 1, w]) };
        let (shift_a, scale_a, gate_a) = (chunk(0)?, chunk(1)?, chunk(2)?);
        let (shift_m, scale_m, gate_m) = (chunk(3)?, chunk(4)?, chunk(5)?);

        let y = modulate(x, &shift_a, &scale_a)?;
        let y = self.attention(p, &y)?;
        let x = x.add(&y.mul(&gate_a)?)?;

        let y = modulate(&x, &shift_m, &scale_m)?;
        let y = self.fc2.forward(p, &self.fc1.forward(p, &y)?.gelu())?;
        x.add(&y.mul(&gate_m)?)
    }

    fn attention<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let (b, n, w) = (s[0], s[1], s[2]);
        let (h, dh) = (self.heads, self.width / self.heads);
        let qkv = self.qkv.forward(p, x)?;
        let split = |i: usize| -> Result<Var<'t>> {
            qkv.slice_last(i * w, w)?
                .reshape(&[b, n, h, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[b * h, n, dh])
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let att = q.bmm(&k, false, true)?.scale(1.0 / (dh as f64).sqrt()).softmax(2)?;
        let o = att
            .bmm(&v, false, false)?
            .reshape(&[b, h, n, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, n, w])?;
        self.proj.forward(p, &o)
    }
}

/// `LN(x)·(1 + scale) + shift` with per-sample `[B, 1, w]` modulation.
fn modulate<'t>(x: &Var<'t>, shift: &Var<'t>, scale: &Var<'t>) -> Result<Var<'t>> {
    x.layer_norm(None, None, LN_EPS)?
        .mul(&scale.add_scalar(1.0))?
        .add(shift)
}

/// Sinusoidal features of `1000·t`: `[cos(ω_i·1000t), sin(ω_i·1000t)]` with
/// `ω_i = 10000^(−i/half)`.
pub fn timestep_features(t: &[f64], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let arg = 1000.0 * ti;
        let (mut cos, mut sin) = (Vec::with_capacity(half), Vec::with_capacity(half));
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let (s, c) = (arg * freq).sin_cos();
            cos.push(c);
            sin.push(s);
        }
        out.extend(cos);
        out.extend(sin);
    }
    out
}

/// Which part of the network a residual stream belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Backbone,
    Head,
}

/// Residual-stream width of one block, for structural checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamWidth {
    pub stage: Stage,
    pub block: usize,
    pub width: usize,
}

/// Parameter layout of a denoiser inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct DenoiserLayout {
    config: DenoiserConfig,
    embed: Linear,
    pos: ParamId,
    t_fc1: Linear,
    t_fc2: Linear,
    cond_proj: Linear,
    blocks: Vec<Block>,
    head_adapter: Option<Linear>,
    head_skip: Option<Linear>,
    head_blocks: Vec<Block>,
    final_modulation: Linear,
    final_proj: Linear,
}

impl DenoiserLayout {
    /// Registers all parameters under `prefix/…`, initialized from `seed`.
    pub fn register(store: &mut ParamStore, prefix: &str, config: &DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Initializer::new(seed);
        let (h, d, n) = (config.hidden, config.latent.channels, config.latent.tokens);
        let name = |s: &str| format!("{prefix}/{s}");
        let embed = Linear::register(store, &mut init, &name("embed"), d, h, Init::FanIn);
        let pos = store.add(name("pos/embedding"), init.tensor(&[n, h], Init::Normal(POS_STD)));
        let t_fc1 = Linear::register(store, &mut init, &name("time/fc1"), config.freq_dim, h, Init::FanIn);
        let t_fc2 = Linear::register(store, &mut init, &name("time/fc2"), h, h, Init::FanIn);
        let cond_proj = Linear::register(store, &mut init, &name("cond/proj"), config.cond_dim, h, Init::FanIn);
        let blocks = (0..config.depth)
            .map(|i| Block::register(store, &mut init, &name(&format!("block{i}")), h, h, config.heads))
            .collect();
        let (mut head_adapter, mut head_skip, mut head_blocks) = (None, None, Vec::new());
        if let Some(w) = config.ddt_head_width {
            head_adapter = Some(Linear::register(store, &mut init, &name("head/adapter"), h, w, Init::FanIn));
            head_skip = Some(Linear::register(store, &mut init, &name("head/x_embed"), d, w, Init::FanIn));
            head_blocks = (0..config.ddt_head_depth)
                .map(|i| Block::register(store, &mut init, &name(&format!("head/block{i}")), h, w, config.heads))
                .collect();
        }
        let w = config.out_width();
        let final_modulation = Linear::register(store, &mut init, &name("final/modulation"), h, 2 * w, Init::Zeros);
        let final_proj = Linear::register(store, &mut init, &name("final/proj"), w, d, Init::Zeros);
        Ok(DenoiserLayout {
            config: config.clone(),
            embed,
            pos,
            t_fc1,
            t_fc2,
            cond_proj,
            blocks,
            head_adapter,
            head_skip,
            head_blocks,
            final_modulation,
            final_proj,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn stream_widths(&self) -> Vec<StreamWidth> {
        let backbone = self.blocks.iter().enumerate().map(|(i, b)| StreamWidth {
            stage: Stage::Backbone,
            block: i,
            width: b.width,
        });
        let head = self.head_blocks.iter().enumerate().map(|(i, b)| StreamWidth {
            stage: Stage::Head,
            block: i,
            width: b.width,
        });
        backbone.chain(head).collect()
    }

    /// Velocity for `x_t: [B, N, d]`, timesteps `t` (one per sample) and
    /// condition vectors `cond: [B, cond_dim]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x_t: &Var<'t>, t: &[f64], cond: &Var<'t>) -> Result<Var<'t>> {
        let cfg = &self.config;
        let s = x_t.shape();
        let b = t.len();
        if s != [b, cfg.latent.tokens, cfg.latent.channels] {
            return Err(Error::Dimension(format!(
                "denoiser expects [{b}, {}, {}], got {s:?}",
                cfg.latent.tokens, cfg.latent.channels
            )));
        }
        if cond.shape() != [b, cfg.cond_dim] {
            return Err(Error::Dimension(format!(
                "condition must be [{b}, {}], got {:?}",
                cfg.cond_dim,
                cond.shape()
            )));
        }
        let tape: &'t Tape = x_t.tape();
        let tf = tape.constant(&[b, cfg.freq_dim], timestep_features(t, cfg.freq_dim))?;
        let temb = self.t_fc2.forward(p, &self.t_fc1.forward(p, &tf)?.silu())?;
        let c = temb.add(&self.cond_proj.forward(p, cond)?)?.silu();

        let mut x = self.embed.forward(p, x_t)?.add(p.get(self.pos))?;
        for block in &self.blocks {
            x = block.forward(p, &x, &c)?;
        }
        if let (Some(adapter), Some(skip)) = (&self.head_adapter, &self.head_skip) {
            x = adapter.forward(p, &x)?.add(&skip.forward(p, x_t)?)?;
            for block in &self.head_blocks {
                x = block.forward(p, &x, &c)?;
            }
        }
        let w = cfg.out_width();
        let m = self.final_modulation.forward(p, &c)?;
        let shift = m.slice_last(0, w)?.reshape(&[b, 1, w])?;
        let scale = m.slice_last(w, w)?.reshape(&[b, 1, w])?;
        let y = modulate(&x, &shift, &scale)?;
        self.final_proj.forward(p, &y)
    }
}

/// A denoiser that owns its parameters (names `denoiser/<layer>/<param>`).
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub params: ParamStore,
    pub layout: DenoiserLayout,
}

impl Denoiser {
    pub fn build(config: &DenoiserConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let layout = DenoiserLayout::register(&mut params, "denoiser", config, seed)?;
        Ok(Denoiser { params, layout })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x_t: &Var<'t>, t: &[f64], cond: &Var<'t>) -> Result<Var<'t>> {
        self.layout.forward(p, x_t, t, cond)
    }
}
