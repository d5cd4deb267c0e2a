//! The two-branch fusion network: shared backbone blocks with a fusion layer
//! after every `tau` blocks on both the encoder and decoder side.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::backbone::{block_forward, Backbone, BackboneConfig, Block};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tcmoa::{MoaConfig, MoaLayer, MoaTrace, PromptControl, Task};

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub moa: MoaConfig,
    /// Output the mean of both decoded branches instead of branch X.
    pub average_branches: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.moa.validate()
    }
}

#[derive(Clone, Debug)]
pub struct TcMoaModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub backbone: Backbone,
    pub encoder_moa: Vec<MoaLayer>,
    pub decoder_moa: Vec<MoaLayer>,
}

/// Options for one fusion forward pass.
#[derive(Default)]
pub struct FuseOptions<'a> {
    /// Routing noise source; `None` for deterministic evaluation.
    pub noise: Option<&'a mut ChaCha8Rng>,
    pub control: Option<PromptControl>,
}

pub struct FusionForward<'t> {
    pub fused: Var<'t>,
    pub decoded_x: Var<'t>,
    pub decoded_y: Var<'t>,
    /// Encoder layers first, then decoder layers.
    pub traces: Vec<MoaTrace<'t>>,
}

impl TcMoaModel {
    /// Backbone parameters are drawn first, so two models with the same seed
    /// and backbone config share backbone weights regardless of MoA settings.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(&mut params, &mut rng, cfg.backbone.clone())?;
        let mut moa_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0a0a);
        let dim = cfg.backbone.dim;
        let mut layers = |prefix: &str, count: usize, params: &mut ParamStore| -> Result<Vec<MoaLayer>> {
            (0..count)
                .map(|i| MoaLayer::new(params, &mut moa_rng, &format!("{prefix}.{i}"), dim, cfg.moa.clone()))
                .collect()
        };
        let encoder_moa = layers("moa.encoder", cfg.backbone.encoder_moa_layers(), &mut params)?;
        let decoder_moa = layers("moa.decoder", cfg.backbone.decoder_moa_layers(), &mut params)?;
        Ok(Self { cfg, params, backbone, encoder_moa, decoder_moa })
    }

    pub fn moa_layers(&self) -> impl Iterator<Item = &MoaLayer> {
        self.encoder_moa.iter().chain(&self.decoder_moa)
    }

    /// Index of the last encoder-side layer among [`FusionForward::traces`].
    pub fn last_encoder_layer(&self) -> usize {
        self.encoder_moa.len() - 1
    }

    fn run_stage<'t>(
        &self,
        p: &Bound<'t>,
        blocks: &[Block],
        layers: &[MoaLayer],
        mut fx: Var<'t>,
        mut fy: Var<'t>,
        task: Task,
        opts: &mut FuseOptions<'_>,
        traces: &mut Vec<MoaTrace<'t>>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let tau = self.cfg.backbone.tau;
        if layers.len() * tau != blocks.len() {
            return Err(Error::Config(format!("{} fusion layers for {} blocks at tau {}", layers.len(), blocks.len(), tau)));
        }
        for (i, block) in blocks.iter().enumerate() {
            fx = block_forward(p, block, &self.cfg.backbone, fx)?;
            fy = block_forward(p, block, &self.cfg.backbone, fy)?;
            if (i + 1) % tau == 0 {
                let out = layers[i / tau].fuse_step(p, fx, fy, task, opts.noise.as_deref_mut(), opts.control)?;
                fx = out.fx;
                fy = out.fy;
                traces.push(out.trace);
            }
        }
        Ok((fx, fy))
    }

    /// Patchify both sources and run the shared encoder with fusion layers.
    pub fn encode_pair<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        y: Var<'t>,
        task: Task,
        opts: &mut FuseOptions<'_>,
        traces: &mut Vec<MoaTrace<'t>>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let fx = self.backbone.patchify(p, x)?;
        let fy = self.backbone.patchify(p, y)?;
        self.run_stage(p, &self.backbone.encoder, &self.encoder_moa, fx, fy, task, opts, traces)
    }

    /// Decoder blocks with fusion layers, then both branches to images.
    pub fn decode_pair<'t>(
        &self,
        p: &Bound<'t>,
        fx: Var<'t>,
        fy: Var<'t>,
        task: Task,
        opts: &mut FuseOptions<'_>,
        traces: &mut Vec<MoaTrace<'t>>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let (gx, gy) = self.run_stage(p, &self.backbone.decoder, &self.decoder_moa, fx, fy, task, opts, traces)?;
        Ok((self.backbone.to_image(p, gx)?, self.backbone.to_image(p, gy)?))
    }

    pub fn fuse<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        y: Var<'t>,
        task: Task,
        mut opts: FuseOptions<'_>,
    ) -> Result<FusionForward<'t>> {
        let mut traces = Vec::new();
        let (fx, fy) = self.encode_pair(p, x, y, task, &mut opts, &mut traces)?;
        let (decoded_x, decoded_y) = self.decode_pair(p, fx, fy, task, &mut opts, &mut traces)?;
        let fused = if self.cfg.average_branches { decoded_x.add(decoded_y)?.scale(0.5)? } else { decoded_x };
        Ok(FusionForward { fused, decoded_x, decoded_y, traces })
    }
}

/// Fusion result detached from the tape.
#[derive(Clone, Debug)]
pub struct Inference {
    pub fused: Tensor,
    /// Per fusion layer, `h×w×2` prompts as used.
    pub prompts: Vec<Tensor>,
    /// Per fusion layer, `tokens×N` routing weights.
    pub gates: Vec<Tensor>,
}

impl TcMoaModel {
    /// Noise-free forward pass with `params` (for example EMA weights).
    pub fn infer(
        &self,
        params: &ParamStore,
        x: &Tensor,
        y: &Tensor,
        task: Task,
        control: Option<PromptControl>,
    ) -> Result<Inference> {
        let expect = [self.cfg.backbone.image_size, self.cfg.backbone.image_size, 3];
        for img in [x, y] {
            if img.shape() != expect {
                return Err(Error::Config(format!("image of shape {:?}, model expects {:?}", img.shape(), expect)));
            }
        }
        let tape = Tape::new();
        let p = params.bind(&tape, |_| false);
        let opts = FuseOptions { noise: None, control };
        let out = self.fuse(&p, tape.constant(x.clone()), tape.constant(y.clone()), task, opts)?;
        Ok(Inference {
            fused: out.fused.value(),
            prompts: out.traces.iter().map(|t| t.prompt.value()).collect(),
            gates: out.traces.iter().map(|t| t.gates.weights.value()).collect(),
        })
    }
}
