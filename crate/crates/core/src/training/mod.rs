//! Two-stage training: autoencoder pretraining of the backbone, then
//! fine-tuning of the fusion layers on all tasks with the backbone frozen.
//!
//! Samples of a step are independent: each one gets its own tape, and the
//! per-sample gradients are summed in a fixed order, so results do not
//! depend on the number of worker threads (`TCMOA_THREADS`).

pub mod checkpoint;
pub mod optim;
mod report;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Tensor};
use crate::config::Settings;
use crate::data::{crop, generate, random_crop_offset};
use crate::error::{Error, Result};
use crate::losses::{cv_squared, task_loss, LossWeights, TERM_NAMES};
use crate::model::{FuseOptions, TcMoaModel};
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::tcmoa::{mir_penalty, Task};

pub use optim::{adamw_step, adamw_update, AdamHyper, AdamState, EmaState};
pub use report::{param_report, ParamReport, REFERENCE_TOTAL, REFERENCE_TRAINABLE};

/// Everything a checkpoint holds.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub settings: Settings,
    pub model: TcMoaModel,
    /// Moments of the fine-tuned parameters.
    pub adam: AdamState,
    pub ema: EmaState,
    /// Completed fine-tuning steps.
    pub step: u64,
    /// Held-out reconstruction MSE measured after pretraining.
    pub pretrain_mse: Option<f64>,
}

impl TrainState {
    pub fn new(settings: Settings) -> Result<Self> {
        settings.validate()?;
        let model = TcMoaModel::new(settings.model.clone(), settings.train.seed)?;
        let trainable = model.params.ids_where(ParamRole::is_trainable);
        let shadowed = model.params.ids_where(ParamRole::has_ema);
        let adam = AdamState::new(&model.params, &trainable);
        let ema = EmaState::new(&model.params, &shadowed);
        Ok(Self { settings, model, adam, ema, step: 0, pretrain_mse: None })
    }

    /// Parameters for inference: EMA shadows for routers and adapters
    /// unless `infer.use_ema` is off.
    pub fn inference_params(&self) -> ParamStore {
        if self.settings.infer.use_ema {
            self.ema.apply_to(&self.model.params)
        } else {
            self.model.params.clone()
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { aux: self.settings.train.aux_weight, mir: self.settings.train.mir_weight, ..Default::default() }
    }

    fn hyper(&self) -> AdamHyper {
        let t = &self.settings.train;
        AdamHyper { lr: t.lr, beta1: t.beta1, beta2: t.beta2, eps: t.eps, weight_decay: t.weight_decay }
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x243f_6a88_85a3_08d3u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

fn pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var("TCMOA_THREADS") {
        Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("TCMOA_THREADS=`{v}` is not a count")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| Error::Config(e.to_string()))
}

fn sum_into(acc: &mut BTreeMap<ParamId, Tensor>, grads: Vec<(ParamId, Tensor)>) {
    for (id, g) in grads {
        match acc.get_mut(&id) {
            Some(a) => a.add_assign(&g),
            None => {
                acc.insert(id, g);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub initial_mse: f64,
    pub final_mse: f64,
    /// Training-batch MSE per step.
    pub history: Vec<f64>,
}

/// Seeds of the fixed held-out images used to measure reconstruction.
pub const HELD_OUT_SEED: u64 = 1 << 40;

fn pretrain_image(size: usize, seed: u64) -> Tensor {
    let task = Task::ALL[(seed % 3) as usize];
    let pair = generate(task, seed / 6, size);
    if (seed / 3) % 2 == 0 {
        pair.x
    } else {
        pair.y
    }
}

/// Mean squared reconstruction error of the backbone on `images`.
pub fn reconstruction_mse(model: &TcMoaModel, params: &ParamStore, images: &[Tensor]) -> Result<f64> {
    let per: Vec<f64> = images
        .par_iter()
        .map(|img| -> Result<f64> {
            let tape = Tape::new();
            let p = params.bind(&tape, |_| false);
            let out = model.backbone.autoencode(&p, tape.constant(img.clone()))?;
            Ok(out.sub(tape.constant(img.clone()))?.square()?.mean()?.item())
        })
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

pub fn held_out_images(size: usize, count: usize) -> Vec<Tensor> {
    (0..count as u64).map(|i| pretrain_image(size, HELD_OUT_SEED + i)).collect()
}

/// Trains encoder and decoder as a plain autoencoder (fusion layers
/// bypassed) on synthetic images. `progress` sees `(step, batch mse)`.
pub fn pretrain_backbone(state: &mut TrainState, progress: &mut dyn FnMut(usize, f64)) -> Result<PretrainReport> {
    let cfg = state.settings.pretrain.clone();
    let size = state.settings.model.backbone.image_size;
    let seed = state.settings.train.seed;
    let held_out = held_out_images(size, 8);
    let pool = pool()?;
    let model = &mut state.model;
    let initial_mse = pool.install(|| reconstruction_mse(model, &model.params, &held_out))?;
    let ids = model.params.ids_where(ParamRole::is_backbone);
    let mut adam = AdamState::new(&model.params, &ids);
    let hyper = AdamHyper { lr: cfg.lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: cfg.weight_decay };
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let images: Vec<Tensor> =
            (0..cfg.batch).map(|i| pretrain_image(size, mix_seed(&[seed, 0x0a0e, step as u64, i as u64]) >> 16)).collect();
        let scale = 1.0 / cfg.batch as f64;
        let results: Vec<(Vec<(ParamId, Tensor)>, f64)> = pool.install(|| {
            images
                .par_iter()
                .map(|img| -> Result<_> {
                    let tape = Tape::new();
                    let p = model.params.bind(&tape, ParamRole::is_backbone);
                    let out = model.backbone.autoencode(&p, tape.constant(img.clone()))?;
                    let mse = out.sub(tape.constant(img.clone()))?.square()?.mean()?;
                    let grads = tape.backward(mse.scale(scale)?)?;
                    Ok((p.gradients(&grads), mse.item()))
                })
                .collect::<Result<_>>()
        })?;
        let mut grads = BTreeMap::new();
        let mut mse = 0.0;
        for (g, m) in results {
            sum_into(&mut grads, g);
            mse += m * scale;
        }
        if !mse.is_finite() {
            return Err(Error::NonFinite(format!("pretraining loss at step {step}")));
        }
        adamw_step(&mut model.params, &grads, &mut adam, &hyper)?;
        history.push(mse);
        progress(step, mse);
    }
    let final_mse = pool.install(|| reconstruction_mse(model, &model.params, &held_out))?;
    state.pretrain_mse = Some(final_mse);
    // fusion-stage shadows start from the current weights
    let shadowed = state.model.params.ids_where(ParamRole::has_ema);
    state.ema = EmaState::new(&state.model.params, &shadowed);
    Ok(PretrainReport { initial_mse, final_mse, history })
}

/// A source pair as fed to the network.
#[derive(Clone, Debug)]
pub struct Sample {
    pub task: Task,
    pub x: Tensor,
    pub y: Tensor,
    /// Seed of the generated pair.
    pub seed: u64,
}

/// The batch used at `step`: `batch_per_task` pairs per task, cropped.
pub fn batch_for_step(settings: &Settings, step: u64) -> Vec<Sample> {
    let t = &settings.train;
    let (size, crop_side) = (settings.source_size(), settings.crop());
    let mut out = Vec::new();
    for &task in &t.tasks {
        for i in 0..t.batch_per_task as u64 {
            let draw = if t.fixed_batch { 0 } else { step + 1 };
            let seed = mix_seed(&[t.seed, 0xda7a, draw, task.index() as u64, i]) >> 16;
            let pair = generate(task, seed, size);
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xc20b]));
            let (top, left) = random_crop_offset(&mut rng, size, crop_side);
            out.push(Sample { task, x: crop(&pair.x, top, left, crop_side), y: crop(&pair.y, top, left, crop_side), seed });
        }
    }
    out
}

struct SampleResult {
    grads: Vec<(ParamId, Tensor)>,
    terms: [f64; 5],
    total: f64,
    mir: f64,
}

fn run_sample(state: &TrainState, sample: &Sample, noise_seed: u64, scale: f64) -> Result<SampleResult> {
    let model = &state.model;
    let tape = Tape::new();
    let p = model.params.bind(&tape, ParamRole::is_trainable);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let opts = FuseOptions { noise: Some(&mut rng), control: None };
    let out = model.fuse(&p, tape.constant(sample.x.clone()), tape.constant(sample.y.clone()), sample.task, opts)?;
    let report = task_loss(
        sample.task,
        out.fused,
        &sample.x,
        &sample.y,
        &out.traces,
        &state.loss_weights(),
        state.settings.model.backbone.patch_size,
    )?;
    let terms = report.values();
    for (name, v) in TERM_NAMES.iter().zip(terms) {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{} {} loss", sample.task, name)));
        }
    }
    let mut mir = 0.0;
    for t in &out.traces {
        mir += mir_penalty(t.learned_prompt)?.item();
    }
    let grads = tape.backward(report.total.scale(scale)?)?;
    Ok(SampleResult { grads: p.gradients(&grads), terms, total: report.total.item(), mir: mir / out.traces.len() as f64 })
}

/// Per-step record of the fine-tuning losses.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    /// Sum over tasks of the batch-mean task loss.
    pub total: f64,
    /// Batch-mean terms per task, in [`TERM_NAMES`] order.
    pub terms: Vec<(Task, [f64; 5])>,
    /// Batch-mean unweighted prompt penalty.
    pub mir: f64,
}

/// Runs `steps` fine-tuning steps: fusion layers only, AdamW, then EMA.
pub fn train_fusion(state: &mut TrainState, steps: usize, progress: &mut dyn FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
    let pool = pool()?;
    let hyper = state.hyper();
    let mut history = Vec::with_capacity(steps);
    for _ in 0..steps {
        let step = state.step;
        let batch = batch_for_step(&state.settings, step);
        let per_task = state.settings.train.batch_per_task;
        let scale = 1.0 / per_task as f64;
        let seed = state.settings.train.seed;
        let shared: &TrainState = state;
        let results: Vec<SampleResult> = pool.install(|| {
            batch
                .par_iter()
                .enumerate()
                .map(|(i, s)| run_sample(shared, s, mix_seed(&[seed, 0x9a7e, step, i as u64]), scale))
                .collect::<Result<_>>()
        })?;
        let mut grads = BTreeMap::new();
        let mut record = StepRecord { step, total: 0.0, terms: Vec::new(), mir: 0.0 };
        for (chunk, samples) in results.chunks(per_task).zip(batch.chunks(per_task)) {
            let mut terms = [0.0; 5];
            for r in chunk {
                for (a, b) in terms.iter_mut().zip(r.terms) {
                    *a += b * scale;
                }
                record.total += r.total * scale;
                record.mir += r.mir / results.len() as f64;
            }
            record.terms.push((samples[0].task, terms));
        }
        for r in results {
            sum_into(&mut grads, r.grads);
        }
        if !record.total.is_finite() {
            return Err(Error::NonFinite(format!("total loss at step {step}")));
        }
        adamw_step(&mut state.model.params, &grads, &mut state.adam, &hyper)?;
        state.ema.update(&state.model.params, state.settings.train.ema_decay);
        state.step += 1;
        progress(&record);
        history.push(record);
    }
    Ok(history)
}

/// Deterministic (noise-free) evaluation summary over a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Mean over samples of the task loss total.
    pub total: f64,
    /// Mean over samples and layers of `|p_x + p_y - 1|`.
    pub mir: f64,
    /// Mean over layers of CV² of the routing importance summed over all
    /// tokens of all samples.
    pub cv2: f64,
    /// Fused outputs in sample order.
    pub fused: Vec<Tensor>,
}

pub fn evaluate(state: &TrainState, params: &ParamStore, samples: &[Sample]) -> Result<EvalReport> {
    let model = &state.model;
    let weights = state.loss_weights();
    let layers = model.moa_layers().count();
    let per: Vec<(f64, f64, Vec<Vec<f64>>, Tensor)> = pool()?.install(|| {
        samples
            .par_iter()
            .map(|s| -> Result<_> {
                let tape = Tape::new();
                let p = params.bind(&tape, |_| false);
                let out = model.fuse(&p, tape.constant(s.x.clone()), tape.constant(s.y.clone()), s.task, FuseOptions::default())?;
                let report =
                    task_loss(s.task, out.fused, &s.x, &s.y, &out.traces, &weights, state.settings.model.backbone.patch_size)?;
                let mut mir = 0.0;
                let mut importance = Vec::new();
                for t in &out.traces {
                    mir += mir_penalty(t.learned_prompt)?.item() / layers as f64;
                    importance.push(t.gates.importance()?.value().data().to_vec());
                }
                Ok((report.total.item(), mir, importance, out.fused.value()))
            })
            .collect::<Result<_>>()
    })?;
    let n = samples.len() as f64;
    let mut summed = vec![vec![0.0; state.settings.model.moa.experts]; layers];
    for (_, _, imp, _) in &per {
        for (acc, layer) in summed.iter_mut().zip(imp) {
            for (a, b) in acc.iter_mut().zip(layer) {
                *a += b;
            }
        }
    }
    Ok(EvalReport {
        total: per.iter().map(|p| p.0).sum::<f64>() / n,
        mir: per.iter().map(|p| p.1).sum::<f64>() / n,
        cv2: summed.iter().map(|imp| cv_squared(imp)).sum::<f64>() / layers as f64,
        fused: per.into_iter().map(|p| p.3).collect(),
    })
}

/// Held-out samples of one task drawn from seeds disjoint from training.
pub fn held_out_samples(task: Task, size: usize, count: usize) -> Vec<Sample> {
    (0..count as u64)
        .map(|i| {
            let seed = HELD_OUT_SEED + 7919 * i;
            let p = generate(task, seed, size);
            Sample { task, x: p.x, y: p.y, seed }
        })
        .collect()
}

/// Uniform draw helper for callers that need a reproducible seed stream.
pub fn seed_stream(seed: u64) -> impl Iterator<Item = u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::iter::repeat_with(move || rng.gen())
}

#[cfg(test)]
mod tests;
