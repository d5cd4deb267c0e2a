//! Unsupervised fusion losses and their building blocks.
//!
//! Source images are treated as constants. Selections that depend on them
//! (max targets, absmax gradient targets, the focus mask) are evaluated once
//! per call and enter the graph as fixed tensors.

use crate::autodiff::{Padding, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::tcmoa::{mir_penalty, MoaTrace, Task};

const DIFF: [f64; 3] = [-1.0, 0.0, 1.0];
const SMOOTH: [f64; 3] = [1.0, 2.0, 1.0];

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn per_channel_kernel(taps: &[f64], kh: usize, kw: usize, channels: usize) -> Tensor {
    Tensor::from_fn(vec![kh, kw, channels], |i| taps[i / channels])
}

fn channels_of(v: &Var<'_>) -> Result<usize> {
    let s = v.shape();
    if s.len() != 3 {
        return Err(Error::Config(format!("expected an H×W×C image, got {:?}", s)));
    }
    Ok(s[2])
}

/// Signed Sobel responses `(gx, gy)` with replicate padding.
///
/// Applied separably (difference first, then smoothing) so a flat region
/// gives exact zeros.
pub fn sobel<'t>(image: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let c = channels_of(&image)?;
    let tape = image.tape();
    let conv = |v: Var<'t>, taps: &[f64], kh: usize, kw: usize| {
        v.depthwise_conv2d(tape.constant(per_channel_kernel(taps, kh, kw, c)), Padding::Replicate)
    };
    let gx = conv(conv(image, &DIFF, 1, 3)?, &SMOOTH, 3, 1)?;
    let gy = conv(conv(image, &DIFF, 3, 1)?, &SMOOTH, 1, 3)?;
    Ok((gx, gy))
}

/// Sobel field of a constant image, as plain tensors.
pub fn sobel_tensor(image: &Tensor) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let (gx, gy) = sobel(tape.constant(image.clone()))?;
    Ok((gx.value(), gy.value()))
}

fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = g.iter().sum();
    let mut taps = Vec::with_capacity(size * size);
    for a in &g {
        for b in &g {
            taps.push(a * b / (z * z));
        }
    }
    taps
}

/// Mean SSIM over valid 11×11 Gaussian windows, channels averaged. Images
/// smaller than the window use one window of global statistics.
pub fn ssim<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let c = channels_of(&a)?;
    if a.shape() != b.shape() {
        return Err(Error::Config(format!("ssim operands differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let (h, w) = (a.shape()[0], a.shape()[1]);
    let tape = a.tape();
    let kernel = if h >= SSIM_WINDOW && w >= SSIM_WINDOW {
        per_channel_kernel(&gaussian_taps(SSIM_WINDOW, SSIM_SIGMA), SSIM_WINDOW, SSIM_WINDOW, c)
    } else {
        Tensor::full(vec![h, w, c], 1.0 / (h * w) as f64)
    };
    let k = tape.constant(kernel);
    let blur = |v: Var<'t>| v.depthwise_conv2d(k, Padding::Valid);
    let mu_a = blur(a)?;
    let mu_b = blur(b)?;
    let mu_aa = mu_a.square()?;
    let mu_bb = mu_b.square()?;
    let mu_ab = mu_a.mul(mu_b)?;
    let var_a = blur(a.square()?)?.sub(mu_aa)?;
    let var_b = blur(b.square()?)?.sub(mu_bb)?;
    let cov = blur(a.mul(b)?)?.sub(mu_ab)?;
    let num = mu_ab.scale(2.0)?.add_scalar(SSIM_C1)?.mul(cov.scale(2.0)?.add_scalar(SSIM_C2)?)?;
    let den = mu_aa.add(mu_bb)?.add_scalar(SSIM_C1)?.mul(var_a.add(var_b)?.add_scalar(SSIM_C2)?)?;
    Ok(num.div(den)?.mean()?)
}

/// Per-patch source selection for the multi-focus loss.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskMap {
    /// `true` where the patch takes source X; row-major over the patch grid.
    pub take_x: Vec<bool>,
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
}

impl MaskMap {
    /// Pixel-level selection for an `H×W×channels` image.
    pub fn pixel_mask(&self, channels: usize) -> Vec<bool> {
        let (h, w) = (self.rows * self.patch, self.cols * self.patch);
        let mut out = Vec::with_capacity(h * w * channels);
        for y in 0..h {
            for x in 0..w {
                let sel = self.take_x[(y / self.patch) * self.cols + x / self.patch];
                out.extend(std::iter::repeat(sel).take(channels));
            }
        }
        out
    }

    /// `(M_x, M_y)` as 0/1 tensors over the patch grid.
    pub fn as_tensors(&self) -> (Tensor, Tensor) {
        let shape = vec![self.rows, self.cols, 1];
        let mx = Tensor::from_fn(shape.clone(), |i| if self.take_x[i] { 1.0 } else { 0.0 });
        let my = Tensor::from_fn(shape, |i| if self.take_x[i] { 0.0 } else { 1.0 });
        (mx, my)
    }
}

fn patch_peaks(gx: &Tensor, gy: &Tensor, patch: usize) -> Vec<f64> {
    let s = gx.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let cols = w / patch;
    let mut peaks = vec![0.0f64; (h / patch) * cols];
    for y in 0..h {
        for x in 0..w {
            let cell = &mut peaks[(y / patch) * cols + x / patch];
            for ch in 0..c {
                let i = (y * w + x) * c + ch;
                *cell = cell.max(gx.data()[i].abs()).max(gy.data()[i].abs());
            }
        }
    }
    peaks
}

/// Picks, per `patch×patch` block, the source with the larger peak Sobel
/// magnitude; ties go to X.
pub fn compute_mask(x: &Tensor, y: &Tensor, patch: usize) -> Result<MaskMap> {
    let s = x.shape();
    if s.len() != 3 || s != y.shape() {
        return Err(Error::Config(format!("mask sources {:?} and {:?} differ", s, y.shape())));
    }
    if patch == 0 || s[0] % patch != 0 || s[1] % patch != 0 {
        return Err(Error::Config(format!("image {:?} not divisible into {}-pixel patches", s, patch)));
    }
    let (xgx, xgy) = sobel_tensor(x)?;
    let (ygx, ygy) = sobel_tensor(y)?;
    let px = patch_peaks(&xgx, &xgy, patch);
    let py = patch_peaks(&ygx, &ygy, patch);
    Ok(MaskMap {
        take_x: px.iter().zip(&py).map(|(a, b)| a >= b).collect(),
        rows: s[0] / patch,
        cols: s[1] / patch,
        patch,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelMode {
    Max,
    Avg,
    Mask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    Max,
    Mask,
}

fn mask_for<'m>(mask: Option<&'m MaskMap>, shape: &[usize]) -> Result<&'m MaskMap> {
    let m = mask.ok_or_else(|| Error::Config("mask mode needs a mask map".into()))?;
    if m.rows * m.patch != shape[0] || m.cols * m.patch != shape[1] {
        return Err(Error::Config(format!("mask grid {}x{} of {}px does not cover {:?}", m.rows, m.cols, m.patch, shape)));
    }
    Ok(m)
}

fn l1<'t>(a: Var<'t>, target: Tensor) -> Result<Var<'t>> {
    let t = a.tape().constant(target);
    Ok(a.sub(t)?.abs()?.mean()?)
}

/// Mean absolute difference between `fused` and the mode's pixel target.
pub fn pixel_loss<'t>(fused: Var<'t>, x: &Tensor, y: &Tensor, mode: PixelMode, mask: Option<&MaskMap>) -> Result<Var<'t>> {
    let target = match mode {
        PixelMode::Max => x.zip_map(y, f64::max)?,
        PixelMode::Avg => x.zip_map(y, |a, b| 0.5 * (a + b))?,
        PixelMode::Mask => {
            let sel = mask_for(mask, x.shape())?.pixel_mask(x.shape()[2]);
            Tensor::from_fn(x.shape().to_vec(), |i| if sel[i] { x.data()[i] } else { y.data()[i] })
        }
    };
    if fused.shape() != target.shape() {
        return Err(Error::Config(format!("fused {:?} vs sources {:?}", fused.shape(), target.shape())));
    }
    l1(fused, target)
}

/// Larger-magnitude value with its sign; ties keep `a`.
pub fn absmax(a: f64, b: f64) -> f64 {
    if b.abs() > a.abs() {
        b
    } else {
        a
    }
}

/// Mean absolute difference between the Sobel field of `fused` and the
/// target field, averaged over both components.
pub fn grad_loss<'t>(fused: Var<'t>, x: &Tensor, y: &Tensor, mode: GradMode, mask: Option<&MaskMap>) -> Result<Var<'t>> {
    let (xgx, xgy) = sobel_tensor(x)?;
    let (ygx, ygy) = sobel_tensor(y)?;
    let (tx, ty) = match mode {
        GradMode::Max => (xgx.zip_map(&ygx, absmax)?, xgy.zip_map(&ygy, absmax)?),
        GradMode::Mask => {
            let sel = mask_for(mask, x.shape())?.pixel_mask(x.shape()[2]);
            let pick = |a: &Tensor, b: &Tensor| Tensor::from_fn(a.shape().to_vec(), |i| if sel[i] { a.data()[i] } else { b.data()[i] });
            (pick(&xgx, &ygx), pick(&xgy, &ygy))
        }
    };
    let (fx, fy) = sobel(fused)?;
    Ok(l1(fx, tx)?.add(l1(fy, ty)?)?.scale(0.5)?)
}

/// `weight · CV²` of per-adapter importance, population variance.
pub fn aux_loss<'t>(importance: Var<'t>, weight: f64) -> Result<Var<'t>> {
    let mean = importance.mean()?;
    let var = importance.add_broadcast(mean.scale(-1.0)?)?.square()?.mean()?;
    Ok(var.div(mean.square()?)?.scale(weight)?)
}

/// `CV²` of a plain importance vector.
pub fn cv_squared(importance: &[f64]) -> f64 {
    let n = importance.len() as f64;
    let mean = importance.iter().sum::<f64>() / n;
    let var = importance.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    var / (mean * mean)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub aux: f64,
    pub mir: f64,
    /// Weights of SSIM against X and Y.
    pub ssim_x: f64,
    pub ssim_y: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { aux: 0.01, mir: 1.0, ssim_x: 0.5, ssim_y: 0.5 }
    }
}

pub const TERM_NAMES: [&str; 5] = ["ssim", "pixel", "grad", "aux", "mir"];

pub struct LossReport<'t> {
    pub total: Var<'t>,
    /// In [`TERM_NAMES`] order.
    pub terms: [Var<'t>; 5],
}

impl<'t> LossReport<'t> {
    pub fn values(&self) -> [f64; 5] {
        self.terms.map(|t| t.item())
    }

    pub fn term(&self, name: &str) -> Option<Var<'t>> {
        TERM_NAMES.iter().position(|n| *n == name).map(|i| self.terms[i])
    }
}

/// Task loss for one sample. `traces` are the fusion-layer records of the
/// forward pass; `mask` is required for MFF and computed if absent.
pub fn task_loss<'t>(
    task: Task,
    fused: Var<'t>,
    x: &Tensor,
    y: &Tensor,
    traces: &[MoaTrace<'t>],
    weights: &LossWeights,
    mask_patch: usize,
) -> Result<LossReport<'t>> {
    let tape = fused.tape();
    let cx = tape.constant(x.clone());
    let cy = tape.constant(y.clone());
    let ssim_term = ssim(fused, cx)?
        .scale(-weights.ssim_x)?
        .add_scalar(weights.ssim_x)?
        .add(ssim(fused, cy)?.scale(-weights.ssim_y)?.add_scalar(weights.ssim_y)?)?;
    let (pixel, grad) = match task {
        Task::Vif => (pixel_loss(fused, x, y, PixelMode::Max, None)?, grad_loss(fused, x, y, GradMode::Max, None)?),
        Task::Mef => (pixel_loss(fused, x, y, PixelMode::Avg, None)?, grad_loss(fused, x, y, GradMode::Max, None)?),
        Task::Mff => {
            let mask = compute_mask(x, y, mask_patch)?;
            (
                pixel_loss(fused, x, y, PixelMode::Mask, Some(&mask))?,
                grad_loss(fused, x, y, GradMode::Mask, Some(&mask))?,
            )
        }
    };
    let zero = || tape.constant(Tensor::scalar(0.0));
    let mut aux = zero();
    let mut mir = zero();
    for trace in traces {
        aux = aux.add(aux_loss(trace.gates.importance()?, weights.aux)?)?;
        mir = mir.add(mir_penalty(trace.learned_prompt)?)?;
    }
    if !traces.is_empty() {
        mir = mir.scale(weights.mir / traces.len() as f64)?;
    }
    let terms = [ssim_term, pixel, grad, aux, mir];
    let mut total = terms[0];
    for t in &terms[1..] {
        total = total.add(*t)?;
    }
    Ok(LossReport { total, terms })
}

#[cfg(test)]
mod tests;
