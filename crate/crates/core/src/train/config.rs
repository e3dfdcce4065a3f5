use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::{DecodeConfig, ModelConfig};
use crate::tasks::MixSchedule;
use crate::Exec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    /// Single-frame captioning.
    ImageText,
    /// Video-text pre-training over the mixing schedule.
    Ipt,
    /// Downstream captioning or QA.
    Finetune,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::ImageText => "image_text",
            StageKind::Ipt => "ipt",
            StageKind::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownstreamTask {
    Caption,
    Qa,
}

impl DownstreamTask {
    pub fn name(self) -> &'static str {
        match self {
            DownstreamTask::Caption => "caption",
            DownstreamTask::Qa => "qa",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub stage: StageKind,
    /// Dataset name in `data.datasets`.
    pub train: String,
    #[serde(default)]
    pub val: Option<String>,
    /// Only read by `ipt` stages.
    #[serde(default)]
    pub schedule: Option<MixSchedule>,
    #[serde(default = "default_task")]
    pub task: DownstreamTask,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub scst: bool,
    /// Validate every this many steps; 0 validates only at the stage end.
    #[serde(default)]
    pub eval_every: u64,
}

fn default_weight_decay() -> f64 {
    0.01
}

fn default_task() -> DownstreamTask {
    DownstreamTask::Caption
}

impl StageSpec {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.scst && self.stage != StageKind::Finetune {
            return bad(format!("scst is only allowed in finetune, not {}", self.stage.name()));
        }
        if self.scst && self.task != DownstreamTask::Caption {
            return bad("scst needs the caption task".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.task == DownstreamTask::Qa && self.stage != StageKind::Finetune {
            return bad("task qa is only meaningful in finetune".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> MixSchedule {
        self.schedule.clone().unwrap_or_default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRef {
    pub manifest: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub datasets: BTreeMap<String, DatasetRef>,
    /// Frames linearly sampled from every clip with more than one frame.
    #[serde(default = "default_frames")]
    pub frames_per_clip: usize,
}

fn default_frames() -> usize {
    8
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            datasets: BTreeMap::new(),
            frames_per_clip: default_frames(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub beam: usize,
    pub max_len: usize,
    pub length_penalty: f64,
    /// Evaluate at most this many items (0 = all).
    pub max_items: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let d = DecodeConfig::default();
        Self {
            beam: d.beam,
            max_len: d.max_len,
            length_penalty: d.length_penalty,
            max_items: 0,
        }
    }
}

impl EvalConfig {
    pub fn decode(&self) -> DecodeConfig {
        DecodeConfig {
            beam: self.beam,
            max_len: self.max_len,
            length_penalty: self.length_penalty,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub stages: Vec<StageSpec>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub exec: Exec,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.stages.is_empty() {
            return Err(TrainError::Config("no stages listed".into()));
        }
        for s in &self.stages {
            s.validate()?;
            for name in std::iter::once(&s.train).chain(s.val.iter()) {
                if !self.data.datasets.is_empty() && !self.data.datasets.contains_key(name) {
                    return Err(TrainError::Config(format!(
                        "stage {} refers to unknown dataset `{name}`",
                        s.stage.name()
                    )));
                }
            }
        }
        if self.data.frames_per_clip < 1 {
            return Err(TrainError::Config("frames_per_clip must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let c: Self = serde_json::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}
