//! Parameter accounting.

use std::fmt;

use crate::params::{ParamId, ParamRole, ParamStore};

/// Trainable count of the full-scale reference model, for display only.
pub const REFERENCE_TRAINABLE: f64 = 9.58e6;
/// Total count of the full-scale reference model, for display only.
pub const REFERENCE_TOTAL: f64 = 348.7e6;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub total: usize,
    pub frozen: usize,
    pub trainable: usize,
    pub trainable_fraction: f64,
    /// Frozen position embeddings (part of `frozen`).
    pub position_embeddings: usize,
    /// Reduction, routers and adapters.
    pub prompt_generation: usize,
    /// Source embeddings, fusion convs and the mixing weight.
    pub prompt_fusion: usize,
    /// Ids of the trainable tensors, in store order.
    pub trainable_ids: Vec<ParamId>,
}

pub fn param_report(store: &ParamStore) -> ParamReport {
    let count = |pred: &dyn Fn(ParamRole) -> bool| -> usize {
        store.iter().filter(|(_, e)| pred(e.role)).map(|(_, e)| e.value.numel()).sum()
    };
    let total = count(&|_| true);
    let trainable = count(&ParamRole::is_trainable);
    ParamReport {
        total,
        frozen: count(&ParamRole::is_backbone),
        trainable,
        trainable_fraction: if total == 0 { 0.0 } else { trainable as f64 / total as f64 },
        position_embeddings: count(&|r| r == ParamRole::PositionEmbedding),
        prompt_generation: count(&ParamRole::is_prompt_generation),
        prompt_fusion: count(&ParamRole::is_prompt_fusion),
        trainable_ids: store.ids_where(ParamRole::is_trainable),
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "total={}", self.total)?;
        writeln!(f, "frozen={}", self.frozen)?;
        writeln!(f, "trainable={}", self.trainable)?;
        writeln!(f, "trainable_fraction={:.4}", self.trainable_fraction)?;
        writeln!(f, "position_embeddings={}", self.position_embeddings)?;
        writeln!(f, "prompt_generation={}", self.prompt_generation)?;
        writeln!(f, "prompt_fusion={}", self.prompt_fusion)?;
        write!(
            f,
            "reference_full_scale={:.2}M/{:.1}M ({:.2}% of total, {:.2}% of frozen)",
            REFERENCE_TRAINABLE / 1e6,
            REFERENCE_TOTAL / 1e6,
            100.0 * REFERENCE_TRAINABLE / REFERENCE_TOTAL,
            100.0 * REFERENCE_TRAINABLE / (REFERENCE_TOTAL - REFERENCE_TRAINABLE)
        )
    }
}
