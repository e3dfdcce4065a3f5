//! JSON-lines dataset manifests, one record per clip.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tokenizer::TextTokenizer;
use super::MediaError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub clip_id: String,
    pub frames_path: String,
    pub captions: Vec<String>,
    pub qa: Vec<QaPair>,
}

impl ManifestRecord {
    fn validate(&self) -> Result<(), String> {
        let captions = self.captions.iter().filter(|c| !c.trim().is_empty()).count();
        if captions != self.captions.len() {
            return Err(format!("clip `{}` has an empty caption", self.clip_id));
        }
        if self.qa.iter().any(|q| q.question.trim().is_empty() || q.answer.trim().is_empty()) {
            return Err(format!("clip `{}` has an empty question or answer", self.clip_id));
        }
        if self.captions.is_empty() && self.qa.is_empty() {
            return Err(format!("clip `{}` has neither captions nor qa pairs", self.clip_id));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    /// Directory relative `frames_path` values are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>) -> Result<Self, MediaError> {
        let mut seen = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            r.validate().map_err(|detail| MediaError::Manifest { line: i + 1, detail })?;
            if !seen.insert(r.clip_id.as_str()) {
                return Err(MediaError::DuplicateClip {
                    line: i + 1,
                    clip_id: r.clip_id.clone(),
                });
            }
        }
        Ok(Self {
            records,
            base_dir: PathBuf::new(),
        })
    }

    pub fn parse(text: &str) -> Result<Self, MediaError> {
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let record: ManifestRecord = serde_json::from_str(line).map_err(|e| MediaError::Manifest {
                line: line_no,
                detail: e.to_string(),
            })?;
            record
                .validate()
                .map_err(|detail| MediaError::Manifest { line: line_no, detail })?;
            if !seen.insert(record.clip_id.clone()) {
                return Err(MediaError::DuplicateClip {
                    line: line_no,
                    clip_id: record.clip_id,
                });
            }
            records.push(record);
        }
        Ok(Self {
            records,
            base_dir: PathBuf::new(),
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn frames_path(&self, record: &ManifestRecord) -> PathBuf {
        let p = Path::new(&record.frames_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Every caption, question and answer string.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.records.iter().flat_map(|r| {
            r.captions
                .iter()
                .map(String::as_str)
                .chain(r.qa.iter().flat_map(|q| [q.question.as_str(), q.answer.as_str()]))
        })
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, MediaError> {
    let text = fs::read_to_string(path).map_err(|source| MediaError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut manifest = DatasetManifest::parse(&text)?;
    manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(manifest)
}

/// Vocabulary over every manifest text plus the task prompt templates.
pub fn build_vocab<'a>(manifests: impl IntoIterator<Item = &'a DatasetManifest>) -> TextTokenizer {
    let prompts = crate::tasks::prompts::all_template_text();
    let texts: Vec<&str> = manifests
        .into_iter()
        .flat_map(|m| m.texts())
        .chain(prompts.iter().map(String::as_str))
        .collect();
    TextTokenizer::build(texts)
}
