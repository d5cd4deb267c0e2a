//! Finite-difference verification of the full fusion loss on a toy model.

use crate::autodiff::{finite_difference_check_with, FaultInjection, GradCheckReport, Tape, Var};
use crate::backbone::BackboneConfig;
use crate::config::Settings;
use crate::data::{generate, SourcePair};
use crate::error::Result;
use crate::losses::{task_loss, LossWeights};
use crate::model::{FuseOptions, ModelConfig, TcMoaModel};
use crate::params::{Bound, ParamRole};
use crate::tcmoa::{MoaConfig, Task};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
const EPSILON: f64 = 1e-4;

/// One fusion layer over an 8×8 image.
pub fn toy_settings() -> Settings {
    let mut s = Settings::default();
    s.model = ModelConfig {
        backbone: BackboneConfig {
            image_size: 8,
            patch_size: 2,
            dim: 8,
            encoder_depth: 2,
            decoder_depth: 0,
            heads: 2,
            window: 2,
            tau: 2,
            mlp_ratio: 2.0,
        },
        moa: MoaConfig { experts: 4, top_k: 2, group: 2, bottleneck: Some(2) },
        average_branches: false,
    };
    s
}

#[derive(Clone, Debug)]
pub struct TaskCheck {
    pub task: Task,
    pub report: GradCheckReport,
    /// Parameter name at the worst coordinate.
    pub worst_param: Option<String>,
}

impl TaskCheck {
    pub fn passed(&self) -> bool {
        self.report.max_relative_error < TOLERANCE
    }
}

/// Checks the gradient of each task's total loss with respect to every
/// trainable parameter. Routing noise is off; the focus mask depends only on
/// the sources and so stays fixed under perturbation.
pub fn run(settings: &Settings, seed: u64, fault: Option<FaultInjection>) -> Result<Vec<TaskCheck>> {
    let model = TcMoaModel::new(settings.model.clone(), seed)?;
    // non-zero source embeddings and fusion weights so every path carries signal
    let mut params = model.params.clone();
    let mut salt = seed;
    for id in params.ids_where(|r| r == ParamRole::SourceEmbedding) {
        for v in params.get_mut(id).data_mut() {
            salt = crate::training::mix_seed(&[salt]);
            *v = (salt >> 11) as f64 / (1u64 << 53) as f64 * 0.2 - 0.1;
        }
    }
    let ids = params.ids_where(ParamRole::is_trainable);
    let values: Vec<_> = ids.iter().map(|&id| params.get(id).clone()).collect();
    let size = settings.model.backbone.image_size;
    let weights = LossWeights { aux: settings.train.aux_weight, mir: settings.train.mir_weight, ..Default::default() };
    let patch = settings.model.backbone.patch_size;
    let mut out = Vec::new();
    for task in Task::ALL {
        let pair = generate(task, seed, size);
        let report = finite_difference_check_with(
            |tape, vars| {
                let overrides: Vec<_> = ids.iter().copied().zip(vars.iter().copied()).collect();
                task_total(&model, tape, &params.bind_with(tape, &overrides), &pair, &weights, patch)
            },
            &values,
            EPSILON,
            fault,
        )?;
        let worst_param = report.worst.map(|(p, _)| params.entry(ids[p]).name.clone());
        out.push(TaskCheck { task, report, worst_param });
    }
    Ok(out)
}

fn task_total<'t>(
    model: &TcMoaModel,
    tape: &'t Tape,
    p: &Bound<'t>,
    pair: &SourcePair,
    weights: &LossWeights,
    patch: usize,
) -> Result<Var<'t>> {
    let (x, y) = (tape.constant(pair.x.clone()), tape.constant(pair.y.clone()));
    let f = model.fuse(p, x, y, pair.task, FuseOptions::default())?;
    Ok(task_loss(pair.task, f.fused, &pair.x, &pair.y, &f.traces, weights, patch)?.total)
}
