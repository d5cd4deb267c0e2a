//! Per-task routed mixture of shared adapters: prompt generation and prompt-driven fusion.
//!
//! Each [`MoaLayer`] reduces a pair of token grids to one representation Φ,
//! routes every token through a task-specific sparse gate over a shared
//! adapter bank, turns the mixed adapter output into a per-token prompt pair
//! and uses that prompt to blend the two source grids.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Padding, Tensor, Var};
use crate::backbone::{xavier, Linear, Norm};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamRole, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Vif,
    Mef,
    Mff,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Vif, Task::Mef, Task::Mff];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Vif => "vif",
            Task::Mef => "mef",
            Task::Mff => "mff",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vif" => Ok(Task::Vif),
            "mef" => Ok(Task::Mef),
            "mff" => Ok(Task::Mff),
            _ => Err(Error::UnknownTask(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoaConfig {
    /// Adapters in the shared bank (N).
    pub experts: usize,
    /// Adapters kept per token (K).
    pub top_k: usize,
    /// Channels averaged into one prompt value (g).
    pub group: usize,
    /// Adapter hidden width; `None` means `C/4`.
    pub bottleneck: Option<usize>,
}

impl Default for MoaConfig {
    fn default() -> Self {
        Self { experts: 4, top_k: 2, group: 4, bottleneck: None }
    }
}

impl MoaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(Error::Config(format!("need 1 <= K <= N, got K={} N={}", self.top_k, self.experts)));
        }
        if self.group == 0 {
            return Err(Error::Config("prompt group size must be positive".into()));
        }
        if self.bottleneck == Some(0) {
            return Err(Error::Config("adapter bottleneck must be positive".into()));
        }
        Ok(())
    }

    pub fn bottleneck_for(&self, dim: usize) -> usize {
        self.bottleneck.unwrap_or((dim / 4).max(1))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Router {
    /// `C×N`
    pub w_gate: ParamId,
    /// `C×N`
    pub w_noise: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct Adapter {
    pub down: Linear,
    pub up: Linear,
}

impl Adapter {
    pub fn forward<'t>(&self, p: &Bound<'t>, phi: Var<'t>) -> Result<Var<'t>> {
        let hidden = self.down.forward(p, phi)?.gelu()?;
        self.up.forward(p, hidden)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv3 {
    /// `3×3×C×C`
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl Conv3 {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize) -> Self {
        let fan = 9 * dim;
        let kernel = store.add(format!("{name}.kernel"), ParamRole::FusionConv, xavier(rng, &[3, 3, dim, dim], fan, fan));
        let bias = store.add(format!("{name}.bias"), ParamRole::FusionConv, Tensor::zeros(vec![dim]));
        Self { kernel, bias }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.conv2d(p[self.kernel], Padding::Zero)?.add_broadcast(p[self.bias])?)
    }
}

#[derive(Clone, Debug)]
pub struct MoaLayer {
    pub dim: usize,
    pub cfg: MoaConfig,
    pub reduce: Linear,
    pub reduce_norm: Norm,
    /// Indexed by [`Task::index`].
    pub routers: [Router; 3],
    pub adapters: Vec<Adapter>,
    /// `(S_x, S_y)` per task.
    pub source_embed: [(ParamId, ParamId); 3],
    pub conv1: Conv3,
    pub conv2: Conv3,
    /// Shape `[1]`.
    pub lambda_f: ParamId,
}

impl MoaLayer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, cfg: MoaConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.experts;
        let reduce = Linear::new(store, rng, &format!("{name}.reduce"), ParamRole::Reduce, 2 * dim, dim);
        let reduce_norm = Norm::new(store, &format!("{name}.reduce_norm"), ParamRole::Reduce, dim);
        let routers = Task::ALL.map(|t| Router {
            w_gate: store.add(format!("{name}.router.{t}.w_gate"), ParamRole::Router, xavier(rng, &[dim, n], dim, n)),
            w_noise: store.add(format!("{name}.router.{t}.w_noise"), ParamRole::Router, Tensor::zeros(vec![dim, n])),
        });
        let db = cfg.bottleneck_for(dim);
        let adapters = (0..n)
            .map(|i| Adapter {
                down: Linear::new(store, rng, &format!("{name}.adapter.{i}.down"), ParamRole::Adapter, dim, db),
                up: Linear::new(store, rng, &format!("{name}.adapter.{i}.up"), ParamRole::Adapter, db, 2 * cfg.group),
            })
            .collect();
        let source_embed = Task::ALL.map(|t| {
            let sx = store.add(format!("{name}.source.{t}.x"), ParamRole::SourceEmbedding, Tensor::zeros(vec![dim]));
            let sy = store.add(format!("{name}.source.{t}.y"), ParamRole::SourceEmbedding, Tensor::zeros(vec![dim]));
            (sx, sy)
        });
        let conv1 = Conv3::new(store, rng, &format!("{name}.fusion.conv1"), dim);
        let conv2 = Conv3::new(store, rng, &format!("{name}.fusion.conv2"), dim);
        let lambda_f = store.add(format!("{name}.lambda_f"), ParamRole::LambdaF, Tensor::full(vec![1], 0.5));
        Ok(Self { dim, cfg, reduce, reduce_norm, routers, adapters, source_embed, conv1, conv2, lambda_f })
    }

    fn check_grid(&self, g: &Var<'_>) -> Result<(usize, usize)> {
        let s = g.shape();
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::Config(format!("token grid {:?} does not have {} channels", s, self.dim)));
        }
        Ok((s[0], s[1]))
    }

    /// Φ: per-token concat, linear `2C -> C`, layer norm.
    pub fn reduce_pair<'t>(&self, p: &Bound<'t>, fx: Var<'t>, fy: Var<'t>) -> Result<Var<'t>> {
        self.check_grid(&fx)?;
        if fx.shape() != fy.shape() {
            return Err(Error::Config(format!("source grids differ: {:?} vs {:?}", fx.shape(), fy.shape())));
        }
        let cat = Var::concat(&[fx, fy], 2)?;
        self.reduce_norm.forward(p, self.reduce.forward(p, cat)?)
    }

    /// Noisy top-K routing. Noise is drawn from `noise` when given (training).
    pub fn gate<'t>(&self, p: &Bound<'t>, phi: Var<'t>, task: Task, noise: Option<&mut ChaCha8Rng>) -> Result<GateResult<'t>> {
        let (h, w) = self.check_grid(&phi)?;
        let n = self.cfg.experts;
        let router = self.routers[task.index()];
        let tokens = phi.reshape(&[h * w, self.dim])?;
        let mut logits = tokens.matmul(p[router.w_gate])?;
        if let Some(rng) = noise {
            let std = tokens.matmul(p[router.w_noise])?.softplus()?;
            let eps = Tensor::from_fn(vec![h * w, n], |_| StandardNormal.sample(rng));
            logits = logits.add(phi.tape().constant(eps).mul(std)?)?;
        }
        let selected = top_k_indices(logits.value().data(), n, self.cfg.top_k);
        let mut keep = vec![false; h * w * n];
        for (t, sel) in selected.iter().enumerate() {
            for &i in sel {
                keep[t * n + i] = true;
            }
        }
        let weights = logits.topk_mask(keep)?.softmax()?;
        Ok(GateResult { weights, selected, grid: (h, w) })
    }

    /// Prompt `pH×pW×2`: sigmoid of the gated adapter mixture, averaged per
    /// channel group.
    pub fn generate_prompt<'t>(&self, p: &Bound<'t>, phi: Var<'t>, gates: &GateResult<'t>) -> Result<Var<'t>> {
        let (h, w) = self.check_grid(&phi)?;
        let tokens = phi.reshape(&[h * w, self.dim])?;
        let mut mix: Option<Var<'t>> = None;
        for (i, adapter) in self.adapters.iter().enumerate() {
            let weight = gates.weights.slice(1, i, 1)?;
            let term = adapter.forward(p, tokens)?.scale_rows(weight)?;
            mix = Some(match mix {
                None => term,
                Some(m) => m.add(term)?,
            });
        }
        let mix = mix.ok_or(Error::Empty("adapter bank"))?;
        Ok(mix.sigmoid()?.group_average(self.cfg.group)?.reshape(&[h, w, 2])?)
    }

    /// One fusion stage: returns `(f'_x, f'_y)` and the trace of the prompt
    /// actually applied.
    pub fn fuse_step<'t>(
        &self,
        p: &Bound<'t>,
        fx: Var<'t>,
        fy: Var<'t>,
        task: Task,
        noise: Option<&mut ChaCha8Rng>,
        control: Option<PromptControl>,
    ) -> Result<FuseOutput<'t>> {
        let (h, w) = self.check_grid(&fx)?;
        let tokens = h * w;
        let phi = self.reduce_pair(p, fx, fy)?;
        let gates = self.gate(p, phi, task, noise)?;
        let learned = self.generate_prompt(p, phi, &gates)?;
        let prompt = match control {
            None => learned,
            Some(c) => c.apply(learned)?,
        };

        let flat = prompt.reshape(&[tokens, 2])?;
        let px = flat.slice(1, 0, 1)?;
        let py = flat.slice(1, 1, 1)?;
        let (sx, sy) = self.source_embed[task.index()];
        let hx = fx.scale_rows(px)?.add_broadcast(p[sx])?;
        let hy = fy.scale_rows(py)?.add_broadcast(p[sy])?;
        let f_moa = self.fusion_convs(p, hx.add(hy)?)?;

        let lambda = p[self.lambda_f];
        let rest = lambda.scale(-1.0)?.add_scalar(1.0)?;
        let moa_part = f_moa.mul_broadcast(rest)?;
        let out_x = fx.mul_broadcast(lambda)?.add(moa_part)?;
        let out_y = fy.mul_broadcast(lambda)?.add(moa_part)?;
        Ok(FuseOutput { fx: out_x, fy: out_y, trace: MoaTrace { prompt, learned_prompt: learned, gates } })
    }

    /// conv3×3, gelu, conv3×3 on the token grid.
    pub fn fusion_convs<'t>(&self, p: &Bound<'t>, h: Var<'t>) -> Result<Var<'t>> {
        let mid = self.conv1.forward(p, h)?.gelu()?;
        self.conv2.forward(p, mid)
    }

    /// Parameters of one task's router, for isolation checks.
    pub fn router_params(&self, task: Task) -> [ParamId; 2] {
        let r = self.routers[task.index()];
        [r.w_gate, r.w_noise]
    }
}

pub struct GateResult<'t> {
    /// `tokens×N`, tokens in row-major grid order.
    pub weights: Var<'t>,
    /// Ascending adapter indices kept per token.
    pub selected: Vec<Vec<usize>>,
    pub grid: (usize, usize),
}

impl<'t> GateResult<'t> {
    /// Per-adapter sum of routing weights over all tokens.
    pub fn importance(&self) -> Result<Var<'t>> {
        Ok(self.weights.sum_axis(0)?)
    }
}

pub struct MoaTrace<'t> {
    /// Prompt used in the fusion (after any control).
    pub prompt: Var<'t>,
    /// Prompt as generated by the adapters.
    pub learned_prompt: Var<'t>,
    pub gates: GateResult<'t>,
}

pub struct FuseOutput<'t> {
    pub fx: Var<'t>,
    pub fy: Var<'t>,
    pub trace: MoaTrace<'t>,
}

/// Replaces or steers the generated prompt at inference time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PromptControl {
    /// Scale by `alpha` around 0.5, shift x by `+beta` and y by `-beta`.
    Affine { alpha: f64, beta: f64 },
    /// Fixed `(prompt_x, prompt_y)` on every token.
    Constant(f64, f64),
}

impl PromptControl {
    pub fn is_identity(&self) -> bool {
        matches!(self, PromptControl::Affine { alpha, beta } if *alpha == 1.0 && *beta == 0.0)
    }

    pub fn apply<'t>(&self, prompt: Var<'t>) -> Result<Var<'t>> {
        let tape = prompt.tape();
        match *self {
            PromptControl::Affine { alpha, beta } => {
                // p + (α−1)(p−0.5) is 0.5 + α(p−0.5), and exact at α=1
                let stretched = prompt.add(prompt.add_scalar(-0.5)?.scale(alpha - 1.0)?)?;
                let shifted = stretched.add_broadcast(tape.constant(Tensor::new(vec![2], vec![beta, -beta])?))?;
                let shape = prompt.shape();
                let lo = tape.constant(Tensor::zeros(shape.clone()));
                let hi = tape.constant(Tensor::ones(shape));
                Ok(shifted.maximum(lo)?.minimum(hi)?)
            }
            PromptControl::Constant(px, py) => {
                let s = prompt.shape();
                let values = Tensor::from_fn(s, |i| if i % 2 == 0 { px } else { py });
                Ok(tape.constant(values))
            }
        }
    }
}

/// `α`/`β` steering on a prompt tensor, clamped to [0, 1].
pub fn manipulate_prompt(prompt: &Tensor, alpha: f64, beta: f64) -> Tensor {
    let shift = [beta, -beta];
    Tensor::from_fn(prompt.shape().to_vec(), |i| {
        let v = prompt.data()[i];
        (v + (v - 0.5) * (alpha - 1.0) + shift[i % 2]).clamp(0.0, 1.0)
    })
}

/// Mean over tokens of `|p_x + p_y - 1|`.
pub fn mir_penalty<'t>(prompt: Var<'t>) -> Result<Var<'t>> {
    let n: usize = prompt.shape().iter().product::<usize>() / 2;
    let pairs = prompt.reshape(&[n, 2])?;
    Ok(pairs.sum_axis(1)?.add_scalar(-1.0)?.abs()?.mean()?)
}

/// First `k` indices of each row by descending value; ties keep the lower
/// index first. Result rows are sorted ascending.
pub fn top_k_indices(values: &[f64], n: usize, k: usize) -> Vec<Vec<usize>> {
    values
        .chunks_exact(n)
        .map(|row| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            let mut sel = idx[..k].to_vec();
            sel.sort_unstable();
            sel
        })
        .collect()
}

/// Index of the heaviest adapter per token (ties to the lower index).
pub fn adapter_map(weights: &Tensor) -> Vec<usize> {
    let n = *weights.shape().last().expect("gate weights have rank >= 1");
    weights
        .data()
        .chunks_exact(n)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Dominant/auxiliary intensity biases; a statistic over an empty token set
/// is `None`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IntensityBias {
    pub dom_x: Option<f64>,
    pub aux_x: Option<f64>,
    pub dom_y: Option<f64>,
    pub aux_y: Option<f64>,
    pub avg_dom: Option<f64>,
    pub diff_dom: Option<f64>,
    pub tokens: usize,
    pub x_dominant: usize,
}

/// X dominates a token iff `p_x > p_y` strictly; ties count as Y-dominant.
pub fn intensity_bias_stats(prompts: &[Tensor]) -> Result<IntensityBias> {
    let (mut sx_dom, mut sx_aux, mut sy_dom, mut sy_aux) = (0.0, 0.0, 0.0, 0.0);
    let (mut nx, mut ny) = (0usize, 0usize);
    for prompt in prompts {
        if prompt.shape().last() != Some(&2) {
            return Err(Error::Config(format!("prompt of shape {:?} lacks a pair axis", prompt.shape())));
        }
        for pair in prompt.data().chunks_exact(2) {
            let (px, py) = (pair[0], pair[1]);
            if px > py {
                nx += 1;
                sx_dom += px;
                sy_aux += py;
            } else {
                ny += 1;
                sy_dom += py;
                sx_aux += px;
            }
        }
    }
    if nx + ny == 0 {
        return Err(Error::Empty("prompt collection"));
    }
    let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
    let dom_x = mean(sx_dom, nx);
    let dom_y = mean(sy_dom, ny);
    let both = dom_x.zip(dom_y);
    Ok(IntensityBias {
        dom_x,
        aux_x: mean(sx_aux, ny),
        dom_y,
        aux_y: mean(sy_aux, nx),
        avg_dom: both.map(|(a, b)| (a + b) / 2.0),
        diff_dom: both.map(|(a, b)| (a - b).abs()),
        tokens: nx + ny,
        x_dominant: nx,
    })
}

#[cfg(test)]
mod tests;
