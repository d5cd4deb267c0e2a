//! Flat `key=value` settings shared by the CLI config file and the
//! checkpoint config echo.
//!
//! Every key has a default; unknown keys and unparsable values are errors.
//! `#` starts a comment.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tcmoa::Task;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 500, lr: 1e-3, batch: 4, weight_decay: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_per_task: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub ema_decay: f64,
    pub mir_weight: f64,
    pub aux_weight: f64,
    /// Training crop side; `None` means the model's image size.
    pub crop: Option<usize>,
    /// Side of generated source images; `None` means the crop size.
    pub source_size: Option<usize>,
    pub seed: u64,
    pub tasks: Vec<Task>,
    /// Reuse the same pairs every step instead of drawing fresh ones.
    pub fixed_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            batch_per_task: 3,
            epochs: 20,
            steps_per_epoch: 10,
            ema_decay: 0.999,
            mir_weight: 1.0,
            aux_weight: 0.01,
            crop: None,
            source_size: None,
            seed: 0,
            tasks: Task::ALL.to_vec(),
            fixed_batch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // zero is accepted so a run can be replayed without updates
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema decay {} outside [0, 1)", self.ema_decay)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.batch_per_task == 0 || self.tasks.is_empty() {
            return Err(Error::Config("need at least one task and one sample per task".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferConfig {
    /// Use EMA shadows for routers and adapters.
    pub use_ema: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { use_ema: true }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub infer: InferConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn opt_to_string(v: Option<usize>) -> String {
    v.map_or("auto".into(), |n| n.to_string())
}

fn parse_opt(key: &str, value: &str) -> Result<Option<usize>> {
    if value.trim() == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn pair(key: &str, value: impl Display) -> (String, String) {
    (key.to_string(), value.to_string())
}

impl Settings {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let crop = self.crop();
        if crop != self.model.backbone.image_size {
            return Err(Error::Config(format!(
                "train.crop {} must equal model.image_size {}",
                crop, self.model.backbone.image_size
            )));
        }
        if self.source_size() < crop {
            return Err(Error::Config(format!("train.source_size {} smaller than crop {}", self.source_size(), crop)));
        }
        Ok(())
    }

    pub fn crop(&self) -> usize {
        self.train.crop.unwrap_or(self.model.backbone.image_size)
    }

    pub fn source_size(&self) -> usize {
        self.train.source_size.unwrap_or_else(|| self.crop())
    }

    /// All settings in a stable order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let b = &self.model.backbone;
        let m = &self.model.moa;
        let t = &self.train;
        let p = &self.pretrain;
        let tasks: Vec<&str> = t.tasks.iter().map(|t| t.name()).collect();
        vec![
            pair("model.image_size", b.image_size),
            pair("model.patch_size", b.patch_size),
            pair("model.dim", b.dim),
            pair("model.encoder_depth", b.encoder_depth),
            pair("model.decoder_depth", b.decoder_depth),
            pair("model.heads", b.heads),
            pair("model.window", b.window),
            pair("model.tau", b.tau),
            pair("model.mlp_ratio", b.mlp_ratio),
            pair("model.experts", m.experts),
            pair("model.top_k", m.top_k),
            pair("model.group", m.group),
            pair("model.bottleneck", opt_to_string(m.bottleneck)),
            pair("model.average_branches", self.model.average_branches),
            pair("train.lr", t.lr),
            pair("train.beta1", t.beta1),
            pair("train.beta2", t.beta2),
            pair("train.eps", t.eps),
            pair("train.weight_decay", t.weight_decay),
            pair("train.batch_per_task", t.batch_per_task),
            pair("train.epochs", t.epochs),
            pair("train.steps_per_epoch", t.steps_per_epoch),
            pair("train.ema_decay", t.ema_decay),
            pair("train.mir_weight", t.mir_weight),
            pair("train.aux_weight", t.aux_weight),
            pair("train.crop", opt_to_string(t.crop)),
            pair("train.source_size", opt_to_string(t.source_size)),
            pair("train.seed", t.seed),
            pair("train.tasks", tasks.join(",")),
            pair("train.fixed_batch", t.fixed_batch),
            pair("pretrain.steps", p.steps),
            pair("pretrain.lr", p.lr),
            pair("pretrain.batch", p.batch),
            pair("pretrain.weight_decay", p.weight_decay),
            pair("infer.use_ema", self.infer.use_ema),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let b = &mut self.model.backbone;
        let m = &mut self.model.moa;
        let t = &mut self.train;
        let p = &mut self.pretrain;
        match key {
            "model.image_size" => b.image_size = parse(key, value)?,
            "model.patch_size" => b.patch_size = parse(key, value)?,
            "model.dim" => b.dim = parse(key, value)?,
            "model.encoder_depth" => b.encoder_depth = parse(key, value)?,
            "model.decoder_depth" => b.decoder_depth = parse(key, value)?,
            "model.heads" => b.heads = parse(key, value)?,
            "model.window" => b.window = parse(key, value)?,
            "model.tau" => b.tau = parse(key, value)?,
            "model.mlp_ratio" => b.mlp_ratio = parse(key, value)?,
            "model.experts" => m.experts = parse(key, value)?,
            "model.top_k" => m.top_k = parse(key, value)?,
            "model.group" => m.group = parse(key, value)?,
            "model.bottleneck" => m.bottleneck = parse_opt(key, value)?,
            "model.average_branches" => self.model.average_branches = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.beta1" => t.beta1 = parse(key, value)?,
            "train.beta2" => t.beta2 = parse(key, value)?,
            "train.eps" => t.eps = parse(key, value)?,
            "train.weight_decay" => t.weight_decay = parse(key, value)?,
            "train.batch_per_task" => t.batch_per_task = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.steps_per_epoch" => t.steps_per_epoch = parse(key, value)?,
            "train.ema_decay" => t.ema_decay = parse(key, value)?,
            "train.mir_weight" => t.mir_weight = parse(key, value)?,
            "train.aux_weight" => t.aux_weight = parse(key, value)?,
            "train.crop" => t.crop = parse_opt(key, value)?,
            "train.source_size" => t.source_size = parse_opt(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.tasks" => {
                t.tasks = value.split(',').map(|s| s.trim().parse()).collect::<Result<Vec<Task>>>()?;
            }
            "train.fixed_batch" => t.fixed_batch = parse(key, value)?,
            "pretrain.steps" => p.steps = parse(key, value)?,
            "pretrain.lr" => p.lr = parse(key, value)?,
            "pretrain.batch" => p.batch = parse(key, value)?,
            "pretrain.weight_decay" => p.weight_decay = parse(key, value)?,
            "infer.use_ema" => self.infer.use_ema = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{}`", n + 1, raw.trim())))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut s = Self::default();
        s.apply_text(text)?;
        Ok(s)
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut s = Settings::default();
        s.train.lr = 3.3e-4;
        s.train.tasks = vec![Task::Mef];
        s.model.moa.bottleneck = Some(5);
        s.train.crop = Some(32);
        let back = Settings::from_text(&s.to_text()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_text(), s.to_text());
    }

    #[test]
    fn comments_and_errors() {
        let s = Settings::from_text("# header\nmodel.dim = 32 # narrower\n\ntrain.tasks=vif, mff\n").unwrap();
        assert_eq!(s.model.backbone.dim, 32);
        assert_eq!(s.train.tasks, vec![Task::Vif, Task::Mff]);
        assert!(Settings::from_text("model.colour=3").is_err());
        assert!(Settings::from_text("model.dim=big").is_err());
        assert!(Settings::from_text("model.dim").is_err());
        assert!(matches!(Settings::from_text("train.tasks=rgb"), Err(Error::UnknownTask(_))));
    }

    #[test]
    fn defaults_are_valid() {
        let s = Settings::default();
        s.validate().unwrap();
        assert_eq!(s.crop(), 32);
        assert_eq!(s.train.lr, 1.5e-4);
        assert_eq!(s.train.batch_per_task, 3);
        assert_eq!(s.train.epochs, 20);
        let mut bad = s.clone();
        bad.train.crop = Some(16);
        assert!(bad.validate().is_err());
        bad = s;
        bad.train.ema_decay = 1.0;
        assert!(bad.validate().is_err());
    }
}
