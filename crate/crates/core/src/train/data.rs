use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use super::config::DataConfig;
use super::TrainError;
use crate::media::{
    build_vocab, load_frames, load_manifest, resize_shorter_side, sample_frames_linear, DatasetManifest, QaPair,
    TextTokenizer, VideoClip,
};
use crate::tasks::Instance;
use crate::Exec;

/// A preprocessed clip with its annotations.
#[derive(Clone, Debug)]
pub struct Item {
    pub clip: Arc<VideoClip>,
    pub captions: Vec<String>,
    pub qa: Vec<QaPair>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub items: Vec<Item>,
    /// Manifest the items came from, for vocabulary construction.
    pub manifest: DatasetManifest,
}

/// Linear frame sampling to `frames` (single images stay single) and a
/// shorter-side resize plus center crop to `image_size`.
pub fn preprocess(clip: &VideoClip, frames: usize, image_size: usize) -> Result<VideoClip, TrainError> {
    let sampled = if clip.num_frames() == 1 || clip.num_frames() == frames {
        clip.clone()
    } else {
        sample_frames_linear(clip, frames)?
    };
    if sampled.height() == image_size && sampled.width() == image_size {
        Ok(sampled)
    } else {
        Ok(resize_shorter_side(&sampled, image_size)?)
    }
}

impl Dataset {
    /// Pairs in-memory clips with manifest records of the same index.
    pub fn from_clips(
        name: &str,
        clips: &[VideoClip],
        manifest: &DatasetManifest,
        frames: usize,
        image_size: usize,
        exec: Exec,
    ) -> Result<Self, TrainError> {
        if clips.len() != manifest.len() {
            return Err(TrainError::Config(format!(
                "dataset {name}: {} clips for {} manifest records",
                clips.len(),
                manifest.len()
            )));
        }
        let prepared = exec.map(clips, |c| preprocess(c, frames, image_size));
        let items = prepared
            .into_iter()
            .zip(&manifest.records)
            .map(|(clip, r)| {
                Ok(Item {
                    clip: Arc::new(clip?),
                    captions: r.captions.clone(),
                    qa: r.qa.clone(),
                })
            })
            .collect::<Result<_, TrainError>>()?;
        Ok(Self {
            name: name.to_string(),
            items,
            manifest: manifest.clone(),
        })
    }

    pub fn load(name: &str, manifest_path: &Path, frames: usize, image_size: usize, exec: Exec) -> Result<Self, TrainError> {
        let manifest = load_manifest(manifest_path)?;
        let loaded = exec.map(&manifest.records, |r| {
            let clip = load_frames(&manifest.frames_path(r), &r.clip_id)?;
            preprocess(&clip, frames, image_size)
        });
        let items = loaded
            .into_iter()
            .zip(&manifest.records)
            .map(|(clip, r)| {
                Ok(Item {
                    clip: Arc::new(clip?),
                    captions: r.captions.clone(),
                    qa: r.qa.clone(),
                })
            })
            .collect::<Result<_, TrainError>>()?;
        Ok(Self {
            name: name.to_string(),
            items,
            manifest,
        })
    }

    /// Items at `indices`, in that order.
    pub fn subset(&self, name: &str, indices: &[usize]) -> Self {
        let records = indices.iter().map(|&i| self.manifest.records[i].clone()).collect();
        Self {
            name: name.to_string(),
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
            manifest: DatasetManifest {
                records,
                base_dir: self.manifest.base_dir.clone(),
            },
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// One instance per (clip, caption) pair.
    pub fn instances(&self) -> Vec<Instance> {
        self.items
            .iter()
            .flat_map(|it| {
                it.captions.iter().map(|c| Instance {
                    clip: Arc::clone(&it.clip),
                    caption: c.clone(),
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct DataRegistry {
    datasets: BTreeMap<String, Arc<Dataset>>,
}

impl DataRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, dataset: Dataset) {
        self.datasets.insert(dataset.name.clone(), Arc::new(dataset));
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Dataset>, TrainError> {
        self.datasets
            .get(name)
            .ok_or_else(|| TrainError::Config(format!("unknown dataset `{name}`")))
    }

    pub fn load(config: &DataConfig, image_size: usize, exec: Exec) -> Result<Self, TrainError> {
        let mut reg = Self::new();
        for (name, r) in &config.datasets {
            reg.insert(Dataset::load(name, &r.manifest, config.frames_per_clip, image_size, exec)?);
        }
        Ok(reg)
    }

    /// Vocabulary over every registered manifest and the prompt templates.
    pub fn vocab(&self) -> TextTokenizer {
        build_vocab(self.datasets.values().map(|d| &d.manifest))
    }
}
