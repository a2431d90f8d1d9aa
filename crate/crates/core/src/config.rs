//! Run configuration: model extents, module toggles, task mode, loss
//! weights, optimiser, dataset and schedule.
//!
//! A configuration is one TOML (or JSON) document. Every section and field
//! is optional and falls back to the desk-scale defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::optim::AdamWConfig;
use crate::scenegen::vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Dims {
    /// Image feature width.
    pub d_i: usize,
    /// Point feature width.
    pub d_p: usize,
    /// Reasoning width shared by text, candidates and dense context.
    pub d_m: usize,
    /// View-attention projection width.
    pub d_k: usize,
    /// Seed points per scene.
    pub n_p: usize,
    /// Sparse candidates.
    pub k: usize,
    /// Views per scene.
    pub m: usize,
    /// Reasoning layers.
    pub l: usize,
    pub n_answers: usize,
    pub n_cls: usize,
    pub h: usize,
    pub w: usize,
    /// Raw surface points generated per scene.
    pub n_points: usize,
    /// Padded token length (situation plus question).
    pub max_tokens: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            d_i: 32,
            d_p: 32,
            d_m: 64,
            d_k: 32,
            n_p: 512,
            k: 64,
            m: 4,
            l: 2,
            n_answers: vocab::N_ANSWERS,
            n_cls: vocab::N_CLASSES,
            h: 128,
            w: 128,
            n_points: 2048,
            max_tokens: 16,
        }
    }
}

impl Dims {
    /// Attention heads in the reasoning layers.
    pub fn heads(&self) -> usize {
        (self.d_m / 32).max(1)
    }
}

/// Module switches. Turning a module off selects its baseline: masked mean
/// over views, plain concatenation, no candidate-to-context attention, no
/// image branch at all.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub tgmf: bool,
    pub advp: bool,
    pub mcgr: bool,
    pub use_images: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self { tgmf: true, advp: true, mcgr: true, use_images: true }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    #[default]
    Vqa,
    /// Situated questions: a situation is prepended and only the answer
    /// loss is used.
    Sqa,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub adamw: AdamWConfig,
    pub base_lr: f64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { adamw: AdamWConfig::default(), base_lr: 1e-4, peak_lr: 2e-3, warmup_steps: 40, batch_size: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub scenes: usize,
    pub questions_per_scene: usize,
    /// First scene seed; splits use disjoint ranges above it.
    pub base_seed: u64,
    pub depth_tol: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { scenes: 32, questions_per_scene: 4, base_seed: 0, depth_tol: crate::geometry::DEFAULT_DEPTH_TOL }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Parameter initialisation and sampling seed.
    pub seed: u64,
    /// Stop once train EM@1 reaches this value.
    pub stop_at_em1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 200, seed: 1, stop_at_em1: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dims: Dims,
    pub toggles: Toggles,
    pub task: TaskMode,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Small extents for smoke runs and gradient checks.
    pub fn tiny() -> Self {
        let mut c = Self::default();
        c.dims = Dims {
            d_i: 4,
            d_p: 4,
            d_m: 8,
            d_k: 3,
            n_p: 8,
            k: 4,
            m: 2,
            l: 2,
            h: 8,
            w: 8,
            n_points: 64,
            max_tokens: 8,
            ..Dims::default()
        };
        c.data.scenes = 2;
        c.train.epochs = 1;
        c
    }

    /// Extents of the full-size model: shape-checked, not trained here.
    pub fn full_scale() -> Self {
        let mut c = Self::default();
        c.dims = Dims {
            d_i: 768,
            d_p: 256,
            d_m: 768,
            d_k: 768,
            n_p: 1024,
            k: 256,
            m: 20,
            l: 4,
            h: 224,
            w: 224,
            n_points: 40_000,
            ..Dims::default()
        };
        c
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        let extents = [
            ("d_i", d.d_i),
            ("d_p", d.d_p),
            ("d_m", d.d_m),
            ("d_k", d.d_k),
            ("n_p", d.n_p),
            ("k", d.k),
            ("m", d.m),
            ("l", d.l),
            ("n_answers", d.n_answers),
            ("n_cls", d.n_cls),
            ("h", d.h),
            ("w", d.w),
            ("n_points", d.n_points),
            ("max_tokens", d.max_tokens),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            bail!(Config, "dims.{name} must be at least 1");
        }
        if d.k > d.n_p {
            bail!(Config, "dims.k = {} exceeds dims.n_p = {}", d.k, d.n_p);
        }
        if d.n_p > d.n_points {
            bail!(Config, "dims.n_p = {} exceeds dims.n_points = {}", d.n_p, d.n_points);
        }
        if d.d_m % d.heads() != 0 {
            bail!(Config, "dims.d_m = {} is not divisible by {} heads", d.d_m, d.heads());
        }
        if d.n_answers < vocab::N_ANSWERS {
            bail!(Config, "dims.n_answers must cover the {} answers", vocab::N_ANSWERS);
        }
        if d.n_cls < vocab::N_CLASSES {
            bail!(Config, "dims.n_cls must cover the {} classes", vocab::N_CLASSES);
        }
        let needed = vocab::MAX_QUESTION_LEN + if self.task == TaskMode::Sqa { vocab::SITUATION_LEN } else { 0 };
        if d.max_tokens < needed {
            bail!(Config, "dims.max_tokens must be at least {needed} for this task");
        }
        for (name, v) in [("lambda1", self.loss.lambda1), ("lambda2", self.loss.lambda2)] {
            if !(v.is_finite() && v >= 0.0) {
                bail!(Config, "loss.{name} must be finite and non-negative");
            }
        }
        let o = &self.optim;
        if !(o.base_lr >= 0.0 && o.peak_lr >= o.base_lr && o.peak_lr.is_finite()) {
            bail!(Config, "need 0 <= optim.base_lr <= optim.peak_lr");
        }
        if o.batch_size == 0 {
            bail!(Config, "optim.batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&o.adamw.beta1) || !(0.0..1.0).contains(&o.adamw.beta2) || !(o.adamw.eps > 0.0) {
            bail!(Config, "invalid Adam moment settings");
        }
        if self.data.questions_per_scene == 0 || self.data.questions_per_scene > vocab::MAX_QUESTIONS_PER_SCENE {
            bail!(Config, "data.questions_per_scene must be in 1..={}", vocab::MAX_QUESTIONS_PER_SCENE);
        }
        if !(self.data.depth_tol > 0.0) {
            bail!(Config, "data.depth_tol must be positive");
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads `.json` files as JSON and everything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serialises to TOML")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("configuration serialises to JSON")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_presets_validate() {
        RunConfig::default().validate().unwrap();
        RunConfig::tiny().validate().unwrap();
        RunConfig::full_scale().validate().unwrap();
        assert_eq!(RunConfig::full_scale().dims.heads(), 24);
        assert_eq!(RunConfig::tiny().dims.heads(), 1);
    }

    #[test]
    fn partial_toml_fills_in_defaults() {
        let c = RunConfig::from_toml_str("task = \"sqa\"\n[dims]\nl = 4\n[toggles]\nadvp = false\n").unwrap();
        assert_eq!(c.dims.l, 4);
        assert_eq!(c.dims.d_m, 64);
        assert!(!c.toggles.advp && c.toggles.tgmf);
        assert_eq!(c.task, TaskMode::Sqa);
    }

    #[test]
    fn round_trips_through_toml_and_json() {
        let mut c = RunConfig::tiny();
        c.train.stop_at_em1 = Some(0.95);
        c.optim.adamw.weight_decay = 0.0;
        assert_eq!(RunConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
        assert_eq!(RunConfig::from_json_str(&c.to_json().to_string()).unwrap(), c);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for text in [
            "[dims]\nk = 600",
            "[dims]\nd_m = 0",
            "[dims]\nd_m = 100",
            "[dims]\nn_answers = 4",
            "[loss]\nlambda1 = -1.0",
            "[dims]\nbogus = 1",
            "task = \"sqa\"\n[dims]\nmax_tokens = 8",
        ] {
            assert!(matches!(RunConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }
}
