use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::{AuxInput, DetectorConfig};
use crate::distill::PerceptualConfig;
use crate::error::{Error, Result};
use crate::fogsim::{read_json, FogParams, SceneSampler};
use crate::optim::SgdConfig;

pub const EVAL_SPLITS: [&str; 4] = ["clear", "low", "mid", "high"];
pub const TRAIN_SPLIT: &str = "train";

/// Everything a command needs. `seed` has no default: it must come from the
/// config file or the command line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: DetectorConfig,
    #[serde(default)]
    pub optimizer: SgdConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset root: `manifest.json` plus one directory per split.
    pub dir: PathBuf,
    /// 0 skips the training split.
    pub train_count: usize,
    pub eval_count: usize,
    pub eval_splits: Vec<String>,
    pub sampler: SceneSampler,
    pub write_depth: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::from("data"),
            train_count: 200,
            eval_count: 200,
            eval_splits: EVAL_SPLITS.iter().map(|s| s.to_string()).collect(),
            sampler: SceneSampler::default(),
            write_depth: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Train on the first `n` samples only.
    pub subset: Option<usize>,
    /// Probability that a training input is the clear image.
    pub clear_fraction: f64,
    /// Fog presets the foggy inputs are drawn from.
    pub fog_levels: Vec<String>,
    /// Evaluate on these splits of `data.dir` after training.
    pub eval_splits: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 8,
            subset: None,
            clear_fraction: 0.0,
            fog_levels: vec!["low".into(), "mid".into(), "high".into()],
            eval_splits: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub perceptual: PerceptualConfig,
    pub perc_weight: f64,
    /// Existing teacher checkpoint; trained from scratch when absent.
    pub teacher_checkpoint: Option<PathBuf>,
    pub teacher_steps: usize,
    /// Clear share of the teacher's mixed training data.
    pub teacher_clear_fraction: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            perceptual: PerceptualConfig::default(),
            perc_weight: 1.0,
            teacher_checkpoint: None,
            teacher_steps: 3000,
            teacher_clear_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub checkpoint: Option<PathBuf>,
    /// Defaults to `data.eval_splits`.
    pub splits: Vec<String>,
    /// Row label in the text table; defaults to the variant name.
    pub model_name: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyConfig {
    /// Offset added to one softmax entry per row while the suites run; only
    /// for checking that the suites catch a broken kernel.
    pub softmax_fault: Option<f64>,
    /// Cases for the randomized oracle suites.
    pub oracle_cases: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            softmax_fault: None,
            oracle_cases: 200,
        }
    }
}

pub fn fog_level(name: &str) -> Result<FogParams> {
    FogParams::preset(name).ok_or_else(|| Error::Config(format!("unknown fog level {name:?}")))
}

impl RunConfig {
    /// Reads a JSON config; `seed`, when given, replaces the file's seed.
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut value = match path {
            Some(p) => read_json::<serde_json::Value>(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => serde_json::json!({}),
        };
        let obj = value
            .as_object_mut()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        if let Some(s) = seed {
            obj.insert("seed".into(), s.into());
        }
        if !obj.contains_key("seed") {
            return Err(Error::Config("a seed is required (config field or --seed)".into()));
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_seed(seed: u64) -> Self {
        RunConfig {
            seed,
            data: DataConfig::default(),
            model: DetectorConfig::default(),
            optimizer: SgdConfig::default(),
            train: TrainConfig::default(),
            distill: DistillConfig::default(),
            eval: EvalConfig::default(),
            verify: VerifyConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.image_size != self.data.sampler.image_size {
            return Err(Error::Config(format!(
                "model image size {} differs from data image size {}",
                self.model.image_size, self.data.sampler.image_size
            )));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.train.clear_fraction) || !(0.0..=1.0).contains(&self.distill.teacher_clear_fraction)
        {
            return Err(Error::Config("clear fractions must lie in [0, 1]".into()));
        }
        if self.train.fog_levels.is_empty() {
            return Err(Error::Config("train.fog_levels is empty".into()));
        }
        for name in self
            .train
            .fog_levels
            .iter()
            .chain(&self.data.eval_splits)
        {
            fog_level(name)?;
        }
        if self.optimizer.lr < 0.0 || !self.optimizer.lr.is_finite() {
            return Err(Error::Config(format!("invalid learning rate {}", self.optimizer.lr)));
        }
        if !self.distill.perc_weight.is_finite() || self.distill.perc_weight < 0.0 {
            return Err(Error::Config("perc_weight must be finite and non-negative".into()));
        }
        self.distill.perceptual.validate()
    }

    /// The fog stream of WAA/WFE needs depth unless it reads the foggy image.
    pub fn needs_depth(&self) -> bool {
        self.model.variant.needs_fog_stream() && self.model.aux_input == AuxInput::DensityMap
    }

    pub fn eval_splits(&self) -> &[String] {
        if self.eval.splits.is_empty() {
            &self.data.eval_splits
        } else {
            &self.eval.splits
        }
    }
}
