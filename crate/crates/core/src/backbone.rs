//! Toy ViT encoder/decoder with shifted-window attention.
//!
//! Tokens live on a `pH×pW×C` grid. Every block optionally rolls the grid by
//! half a window, attends inside non-overlapping `w×w` windows (each window
//! gets the block's learnable local position embedding), then rolls back.
//! Wrapped tokens attend freely; there is no shift mask.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamRole, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub window: usize,
    /// A fusion layer follows every `tau` blocks.
    pub tau: usize,
    pub mlp_ratio: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            dim: 64,
            encoder_depth: 8,
            decoder_depth: 4,
            heads: 4,
            window: 4,
            tau: 2,
            mlp_ratio: 4.0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!("image_size {} not divisible by patch_size {}", self.image_size, self.patch_size));
        }
        let grid = self.grid_side();
        if self.window == 0 || grid % self.window != 0 {
            return fail(format!("token grid side {} not divisible by window {}", grid, self.window));
        }
        if self.tau == 0 || self.encoder_depth % self.tau != 0 || self.decoder_depth % self.tau != 0 {
            return fail(format!(
                "tau {} must divide encoder_depth {} and decoder_depth {}",
                self.tau, self.encoder_depth, self.decoder_depth
            ));
        }
        if self.encoder_depth == 0 {
            return fail("encoder_depth must be positive".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return fail(format!("mlp_ratio {} gives an empty hidden layer", self.mlp_ratio));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn encoder_moa_layers(&self) -> usize {
        self.encoder_depth / self.tau
    }

    pub fn decoder_moa_layers(&self) -> usize {
        self.decoder_depth / self.tau
    }
}

pub(crate) fn xavier(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..bound))
}

pub(crate) fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape.to_vec(), |_| normal.sample(rng))
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub(crate) fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        role: ParamRole,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), role, xavier(rng, &[fan_in, fan_out], fan_in, fan_out));
        let bias = store.add(format!("{name}.bias"), role, Tensor::zeros(vec![fan_out]));
        Self { weight, bias }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.matmul(p[self.weight])?.add_broadcast(p[self.bias])?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl Norm {
    pub(crate) fn new(store: &mut ParamStore, name: &str, role: ParamRole, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), role, Tensor::ones(vec![dim]));
        let beta = store.add(format!("{name}.beta"), role, Tensor::zeros(vec![dim]));
        Self { gamma, beta }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.layer_norm(p[self.gamma], p[self.beta], LN_EPS)?)
    }
}

/// One pre-norm transformer block operating on `w×w` windows.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    /// `w×w×C`, shared by all windows of this block.
    pub pos_embed: ParamId,
    pub shift: bool,
}

impl Block {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &BackboneConfig, shift: bool) -> Self {
        let c = cfg.dim;
        let role = ParamRole::Backbone;
        Self {
            norm1: Norm::new(store, &format!("{name}.norm1"), role, c),
            qkv: Linear::new(store, rng, &format!("{name}.attn.qkv"), role, c, 3 * c),
            proj: Linear::new(store, rng, &format!("{name}.attn.proj"), role, c, c),
            norm2: Norm::new(store, &format!("{name}.norm2"), role, c),
            fc1: Linear::new(store, rng, &format!("{name}.mlp.fc1"), role, c, cfg.mlp_hidden()),
            fc2: Linear::new(store, rng, &format!("{name}.mlp.fc2"), role, cfg.mlp_hidden(), c),
            pos_embed: store.add(
                format!("{name}.pos_embed"),
                ParamRole::PositionEmbedding,
                gaussian(rng, &[cfg.window, cfg.window, c], 0.02),
            ),
            shift,
        }
    }
}

/// Row order that lists tokens window by window (row-major inside each
/// window), for a `side×side` grid split into `w×w` windows.
pub fn window_order(side: usize, w: usize) -> Vec<usize> {
    let per_side = side / w;
    let mut order = Vec::with_capacity(side * side);
    for wy in 0..per_side {
        for wx in 0..per_side {
            for y in 0..w {
                for x in 0..w {
                    order.push((wy * w + y) * side + wx * w + x);
                }
            }
        }
    }
    order
}

fn inverse_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (i, &o) in order.iter().enumerate() {
        inv[o] = i;
    }
    inv
}

/// Multi-head self-attention inside each window: `x` is `[windows, w·w, C]`.
pub fn window_attention<'t>(p: &Bound<'t>, block: &Block, cfg: &BackboneConfig, x: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    let (windows, len, c) = (shape[0], shape[1], shape[2]);
    let heads = cfg.heads;
    let hd = c / heads;
    let qkv = block.qkv.forward(p, x)?;
    let qkv = qkv
        .reshape(&[windows, len, 3, heads, hd])?
        .permute(&[2, 0, 3, 1, 4])?
        .reshape(&[3, windows * heads, len, hd])?;
    let parts = qkv.split(0, &[1, 1, 1])?;
    let flat = |v: Var<'t>| v.reshape(&[windows * heads, len, hd]);
    let (q, k, v) = (flat(parts[0])?, flat(parts[1])?, flat(parts[2])?);
    let scores = q.batch_matmul(k.permute(&[0, 2, 1])?)?.scale(1.0 / (hd as f64).sqrt())?;
    let attn = scores.softmax()?;
    let out = attn
        .batch_matmul(v)?
        .reshape(&[windows, heads, len, hd])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[windows, len, c])?;
    block.proj.forward(p, out)
}

/// One shifted-window block over a `pH×pW×C` grid.
pub fn block_forward<'t>(p: &Bound<'t>, block: &Block, cfg: &BackboneConfig, grid: Var<'t>) -> Result<Var<'t>> {
    let shape = grid.shape();
    if shape.len() != 3 || shape[0] != shape[1] || shape[0] % cfg.window != 0 || shape[2] != cfg.dim {
        return Err(Error::Config(format!("token grid {:?} incompatible with window {} and dim {}", shape, cfg.window, cfg.dim)));
    }
    let (side, c, w) = (shape[0], shape[2], cfg.window);
    let half = (w / 2) as isize;
    let mut x = grid;
    if block.shift {
        x = x.roll2d(half, half)?;
    }
    let order = window_order(side, w);
    let inverse = inverse_permutation(&order);
    let windows = (side / w) * (side / w);
    x = x.reshape(&[side * side, c])?.gather_rows(order)?.reshape(&[windows, w * w, c])?;
    let pos = p[block.pos_embed].reshape(&[w * w, c])?;
    x = x.add_broadcast(pos)?;

    let attn = window_attention(p, block, cfg, block.norm1.forward(p, x)?)?;
    x = x.add(attn)?;
    let hidden = block.fc1.forward(p, block.norm2.forward(p, x)?)?.gelu()?;
    x = x.add(block.fc2.forward(p, hidden)?)?;

    x = x.reshape(&[side * side, c])?.gather_rows(inverse)?.reshape(&[side, side, c])?;
    if block.shift {
        x = x.roll2d(-half, -half)?;
    }
    Ok(x)
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub patch_embed: Linear,
    pub encoder: Vec<Block>,
    pub decoder: Vec<Block>,
    pub final_norm: Norm,
    pub head: Linear,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let role = ParamRole::Backbone;
        let patch_embed = Linear::new(store, rng, "patch_embed", role, cfg.patch_dim(), cfg.dim);
        let encoder = (0..cfg.encoder_depth)
            .map(|i| Block::new(store, rng, &format!("encoder.{i}"), &cfg, i % 2 == 1))
            .collect();
        let decoder = (0..cfg.decoder_depth)
            .map(|i| Block::new(store, rng, &format!("decoder.{i}"), &cfg, i % 2 == 1))
            .collect();
        let final_norm = Norm::new(store, "final_norm", role, cfg.dim);
        let head = Linear::new(store, rng, "head", role, cfg.dim, cfg.patch_dim());
        Ok(Self { cfg, patch_embed, encoder, decoder, final_norm, head })
    }

    fn check_image(&self, image: &Var<'_>) -> Result<()> {
        let s = self.cfg.image_size;
        if image.shape() != [s, s, 3] {
            return Err(Error::Config(format!("image of shape {:?}, model expects [{s}, {s}, 3]", image.shape())));
        }
        Ok(())
    }

    /// Linear embedding of non-overlapping patches: `H×W×3 -> pH×pW×C`.
    pub fn patchify<'t>(&self, p: &Bound<'t>, image: Var<'t>) -> Result<Var<'t>> {
        self.check_image(&image)?;
        let (g, ps) = (self.cfg.grid_side(), self.cfg.patch_size);
        let patches = image
            .reshape(&[g, ps, g, ps, 3])?
            .permute(&[0, 2, 1, 3, 4])?
            .reshape(&[g, g, self.cfg.patch_dim()])?;
        self.patch_embed.forward(p, patches)
    }

    /// Inverse layout of [`Backbone::patchify`] for `pH×pW×(p·p·3)` pixels.
    pub fn unpatchify<'t>(&self, pixels: Var<'t>) -> Result<Var<'t>> {
        let (g, ps) = (self.cfg.grid_side(), self.cfg.patch_size);
        Ok(pixels
            .reshape(&[g, g, ps, ps, 3])?
            .permute(&[0, 2, 1, 3, 4])?
            .reshape(&[self.cfg.image_size, self.cfg.image_size, 3])?)
    }

    /// Final norm, linear head, unpatchify and sigmoid.
    pub fn to_image<'t>(&self, p: &Bound<'t>, tokens: Var<'t>) -> Result<Var<'t>> {
        let pixels = self.head.forward(p, self.final_norm.forward(p, tokens)?)?;
        Ok(self.unpatchify(pixels)?.sigmoid()?)
    }

    /// Single-image reconstruction with no fusion layers in the loop.
    pub fn autoencode<'t>(&self, p: &Bound<'t>, image: Var<'t>) -> Result<Var<'t>> {
        let mut g = self.patchify(p, image)?;
        for block in self.encoder.iter().chain(&self.decoder) {
            g = block_forward(p, block, &self.cfg, g)?;
        }
        self.to_image(p, g)
    }
}
