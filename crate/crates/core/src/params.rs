//! Flat, ordered parameter storage shared by the backbone and the fusion
//! layers. Modules hold [`ParamId`]s; a forward pass binds the whole store
//! onto a tape once and looks vars up by id.

use std::ops::Index;

use crate::autodiff::{GradMap, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a parameter belongs to. Decides freezing, EMA coverage and the
/// accounting breakdown.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Backbone,
    PositionEmbedding,
    Reduce,
    Router,
    Adapter,
    SourceEmbedding,
    FusionConv,
    LambdaF,
}

impl ParamRole {
    pub fn is_backbone(self) -> bool {
        matches!(self, ParamRole::Backbone | ParamRole::PositionEmbedding)
    }

    /// Trainable during fusion fine-tuning.
    pub fn is_trainable(self) -> bool {
        !self.is_backbone()
    }

    /// Tracked by the exponential moving average.
    pub fn has_ema(self) -> bool {
        matches!(self, ParamRole::Router | ParamRole::Adapter)
    }

    pub fn is_prompt_generation(self) -> bool {
        matches!(self, ParamRole::Reduce | ParamRole::Router | ParamRole::Adapter)
    }

    pub fn is_prompt_fusion(self) -> bool {
        matches!(self, ParamRole::SourceEmbedding | ParamRole::FusionConv | ParamRole::LambdaF)
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, role: ParamRole, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, role, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn ids_where(&self, pred: impl Fn(ParamRole) -> bool) -> Vec<ParamId> {
        self.iter().filter(|(_, e)| pred(e.role)).map(|(id, _)| id).collect()
    }

    /// Puts every parameter on `tape`; those whose role satisfies
    /// `requires_grad` become differentiated leaves.
    pub fn bind<'t>(&self, tape: &'t Tape, requires_grad: impl Fn(ParamRole) -> bool) -> Bound<'t> {
        let vars = self.entries.iter().map(|e| tape.input(e.value.clone(), requires_grad(e.role))).collect();
        Bound { vars }
    }

    /// Binds every parameter as a constant except the `overrides`, which
    /// take the given variables in place of the stored values.
    pub fn bind_with<'t>(&self, tape: &'t Tape, overrides: &[(ParamId, Var<'t>)]) -> Bound<'t> {
        let mut vars: Vec<Var<'t>> = self.entries.iter().map(|e| tape.constant(e.value.clone())).collect();
        for &(id, v) in overrides {
            vars[id.0] = v;
        }
        Bound { vars }
    }
}

/// Store parameters bound onto one tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Gradients for the differentiated parameters, in id order.
    pub fn gradients(&self, grads: &GradMap) -> Vec<(ParamId, Tensor)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| grads.get(*v).map(|g| (ParamId(i), g.clone())))
            .collect()
    }
}

impl<'t> Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;

    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}
