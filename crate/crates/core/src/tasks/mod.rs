//! Unified seq2seq samples for the pre-training and downstream tasks, and the
//! per-epoch mixing schedule.

pub mod prompts;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::media::{TextTokenizer, Tokenizer, VideoClip, NO, YES};

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("{0} must not be empty")]
    EmptyText(&'static str),
    #[error("matching needs at least two distinct captions in the corpus")]
    SingleCaptionCorpus,
    #[error("frame order tasks need at least 4 frames, clip `{clip_id}` has {frames}")]
    TooFewFrames { clip_id: String, frames: usize },
    #[error("frame order targets support at most {max} frames, got {frames}")]
    TooManyFrames { frames: usize, max: usize },
    #[error("cannot shuffle {k} of {n} frames")]
    ShuffleCount { k: usize, n: usize },
    #[error("unknown task `{0}`")]
    UnknownTask(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTag {
    Caption,
    Match,
    FomGen,
    FomCon,
    Qa,
}

impl TaskTag {
    pub fn name(self) -> &'static str {
        match self {
            TaskTag::Caption => "caption",
            TaskTag::Match => "match",
            TaskTag::FomGen => "fom_gen",
            TaskTag::FomCon => "fom_con",
            TaskTag::Qa => "qa",
        }
    }
}

impl fmt::Display for TaskTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskTag {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim() {
            "caption" => TaskTag::Caption,
            "match" => TaskTag::Match,
            "fom_gen" => TaskTag::FomGen,
            "fom_con" => TaskTag::FomCon,
            "qa" => TaskTag::Qa,
            other => return Err(TaskError::UnknownTask(other.to_string())),
        })
    }
}

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqSample {
    pub task: TaskTag,
    pub clip_id: String,
    /// Prompt ids fed to the encoder next to the frames (no BOS/EOS).
    pub source_tokens: Vec<u32>,
    pub frames: Arc<VideoClip>,
    /// `frame_order[i]` is the original index of the frame shown at position i.
    pub frame_order: Vec<usize>,
    /// `BOS .. EOS`
    pub target_tokens: Vec<u32>,
}

impl Seq2SeqSample {
    fn new(task: TaskTag, clip: &Arc<VideoClip>, source_tokens: Vec<u32>, target: &[u32]) -> Self {
        Self {
            task,
            clip_id: clip.clip_id.clone(),
            source_tokens,
            frames: Arc::clone(clip),
            frame_order: (0..clip.num_frames()).collect(),
            target_tokens: TextTokenizer::frame(target),
        }
    }

    /// Target without the BOS/EOS framing.
    pub fn target_body(&self) -> &[u32] {
        let t = &self.target_tokens;
        &t[1..t.len() - 1]
    }
}

fn require(text: &str, what: &'static str) -> Result<(), TaskError> {
    if text.trim().is_empty() {
        Err(TaskError::EmptyText(what))
    } else {
        Ok(())
    }
}

pub fn make_caption_sample(tok: &TextTokenizer, clip: &Arc<VideoClip>, caption: &str) -> Result<Seq2SeqSample, TaskError> {
    require(caption, "caption")?;
    let prompt = if clip.num_frames() == 1 {
        prompts::IMAGE_CAPTION
    } else {
        prompts::CAPTION
    };
    Ok(Seq2SeqSample::new(TaskTag::Caption, clip, tok.encode(prompt), &tok.encode(caption)))
}

/// Positive with probability 0.5; otherwise a caption drawn uniformly from
/// `corpus` that differs from `caption` as a string.
pub fn make_matching_sample<R: Rng + ?Sized>(
    tok: &TextTokenizer,
    clip: &Arc<VideoClip>,
    caption: &str,
    corpus: &[String],
    rng: &mut R,
) -> Result<Seq2SeqSample, TaskError> {
    require(caption, "caption")?;
    if !corpus.iter().any(|c| c != caption) {
        return Err(TaskError::SingleCaptionCorpus);
    }
    let (shown, answer) = if rng.random_bool(0.5) {
        (caption, YES)
    } else {
        let negative = loop {
            let c = &corpus[rng.random_range(0..corpus.len())];
            if c != caption {
                break c;
            }
        };
        (negative.as_str(), NO)
    };
    let source = tok.encode(&prompts::matching(shown));
    Ok(Seq2SeqSample::new(TaskTag::Match, clip, source, &[answer]))
}

/// Number of frames moved by frame-order shuffling.
pub fn fom_shuffle_count(n: usize) -> usize {
    ((0.25 * n as f64).round() as usize).max(2)
}

/// Picks `k` distinct positions and applies a uniformly drawn permutation
/// without fixed points to them. Returns `order` with `order[i]` the original
/// index now at position i.
pub fn shuffled_order<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Vec<usize>, TaskError> {
    if k == 1 || k > n {
        return Err(TaskError::ShuffleCount { k, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    if k == 0 {
        return Ok(order);
    }
    let mut positions = sample_indices(rng, n, k).into_vec();
    positions.sort_unstable();
    let mut perm: Vec<usize> = (0..k).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            break;
        }
    }
    for (i, &p) in perm.iter().enumerate() {
        order[positions[i]] = positions[p];
    }
    Ok(order)
}

fn check_fom_clip(clip: &VideoClip) -> Result<(), TaskError> {
    let n = clip.num_frames();
    if n < 4 {
        return Err(TaskError::TooFewFrames {
            clip_id: clip.clip_id.clone(),
            frames: n,
        });
    }
    if n > crate::media::tokenizer::DIGIT_WORDS {
        return Err(TaskError::TooManyFrames {
            frames: n,
            max: crate::media::tokenizer::DIGIT_WORDS,
        });
    }
    Ok(())
}

fn reorder(clip: &Arc<VideoClip>, order: &[usize]) -> Arc<VideoClip> {
    if order.iter().enumerate().all(|(i, &o)| i == o) {
        Arc::clone(clip)
    } else {
        Arc::new(clip.select_frames(order).expect("order indexes the clip"))
    }
}

/// Generative frame-order sample for an explicit `order`.
pub fn fom_generative_from_order(tok: &TextTokenizer, clip: &Arc<VideoClip>, order: &[usize]) -> Result<Seq2SeqSample, TaskError> {
    check_fom_clip(clip)?;
    let target: Vec<u32> = order.iter().map(|&o| tok.digit(o)).collect();
    let mut sample = Seq2SeqSample::new(TaskTag::FomGen, clip, tok.encode(prompts::FOM_GENERATIVE), &target);
    sample.frames = reorder(clip, order);
    sample.frame_order = order.to_vec();
    Ok(sample)
}

pub fn make_fom_generative_sample<R: Rng + ?Sized>(
    tok: &TextTokenizer,
    clip: &Arc<VideoClip>,
    rng: &mut R,
) -> Result<Seq2SeqSample, TaskError> {
    check_fom_clip(clip)?;
    let n = clip.num_frames();
    let order = shuffled_order(n, fom_shuffle_count(n), rng)?;
    fom_generative_from_order(tok, clip, &order)
}

pub fn make_fom_contrastive_sample<R: Rng + ?Sized>(
    tok: &TextTokenizer,
    clip: &Arc<VideoClip>,
    rng: &mut R,
) -> Result<Seq2SeqSample, TaskError> {
    check_fom_clip(clip)?;
    let n = clip.num_frames();
    let source = tok.encode(prompts::FOM_CONTRASTIVE);
    if rng.random_bool(0.5) {
        return Ok(Seq2SeqSample::new(TaskTag::FomCon, clip, source, &[YES]));
    }
    let order = shuffled_order(n, fom_shuffle_count(n), rng)?;
    let mut sample = Seq2SeqSample::new(TaskTag::FomCon, clip, source, &[NO]);
    sample.frames = reorder(clip, &order);
    sample.frame_order = order;
    Ok(sample)
}

pub fn make_qa_sample(tok: &TextTokenizer, clip: &Arc<VideoClip>, question: &str, answer: &str) -> Result<Seq2SeqSample, TaskError> {
    require(question, "question")?;
    require(answer, "answer")?;
    Ok(Seq2SeqSample::new(TaskTag::Qa, clip, tok.encode(question), &tok.encode(answer)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FomVariant {
    Contrastive,
    Generative,
    /// floor(N/8) samples of each kind.
    Both,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixSchedule {
    pub caption_per_instance: usize,
    pub match_per_instance: usize,
    /// One frame-order sample per this many instances; 0 disables it.
    pub fom_every: usize,
    pub fom_variant: FomVariant,
}

impl Default for MixSchedule {
    fn default() -> Self {
        Self {
            caption_per_instance: 1,
            match_per_instance: 1,
            fom_every: 8,
            fom_variant: FomVariant::Contrastive,
        }
    }
}

impl MixSchedule {
    /// Schedule enabling only the listed tasks, e.g. `caption,match,fom_con`.
    pub fn from_tasks(tasks: &[TaskTag]) -> Self {
        let has = |t| tasks.contains(&t);
        let (gen, con) = (has(TaskTag::FomGen), has(TaskTag::FomCon));
        Self {
            caption_per_instance: has(TaskTag::Caption) as usize,
            match_per_instance: has(TaskTag::Match) as usize,
            fom_every: if gen || con { 8 } else { 0 },
            fom_variant: match (gen, con) {
                (true, true) => FomVariant::Both,
                (true, false) => FomVariant::Generative,
                _ => FomVariant::Contrastive,
            },
        }
    }

    pub fn parse_tasks(list: &str) -> Result<Self, TaskError> {
        let tasks = list
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(TaskTag::from_str)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_tasks(&tasks))
    }

    pub fn fom_count(&self, n: usize) -> usize {
        n.checked_div(self.fom_every).unwrap_or(0)
    }

    /// Samples per epoch, by task, for `n` instances.
    pub fn counts(&self, n: usize) -> Vec<(TaskTag, usize)> {
        let fom = self.fom_count(n);
        let mut out = vec![
            (TaskTag::Caption, n * self.caption_per_instance),
            (TaskTag::Match, n * self.match_per_instance),
        ];
        match self.fom_variant {
            FomVariant::Contrastive => out.push((TaskTag::FomCon, fom)),
            FomVariant::Generative => out.push((TaskTag::FomGen, fom)),
            FomVariant::Both => {
                out.push((TaskTag::FomGen, fom));
                out.push((TaskTag::FomCon, fom));
            }
        }
        out
    }

    pub fn epoch_len(&self, n: usize) -> usize {
        self.counts(n).iter().map(|(_, c)| c).sum()
    }
}

/// A video paired with one of its captions.
#[derive(Clone, Debug)]
pub struct Instance {
    pub clip: Arc<VideoClip>,
    pub caption: String,
}

/// All samples of one epoch, globally shuffled.
pub fn schedule_epoch<R: Rng + ?Sized>(
    tok: &TextTokenizer,
    instances: &[Instance],
    schedule: &MixSchedule,
    rng: &mut R,
) -> Result<Vec<Seq2SeqSample>, TaskError> {
    let n = instances.len();
    let corpus: Vec<String> = instances.iter().map(|i| i.caption.clone()).collect();
    let mut out = Vec::with_capacity(schedule.epoch_len(n));
    for inst in instances {
        for _ in 0..schedule.caption_per_instance {
            out.push(make_caption_sample(tok, &inst.clip, &inst.caption)?);
        }
        for _ in 0..schedule.match_per_instance {
            out.push(make_matching_sample(tok, &inst.clip, &inst.caption, &corpus, rng)?);
        }
    }
    let fom = schedule.fom_count(n);
    let variants: &[TaskTag] = match schedule.fom_variant {
        FomVariant::Contrastive => &[TaskTag::FomCon],
        FomVariant::Generative => &[TaskTag::FomGen],
        FomVariant::Both => &[TaskTag::FomGen, TaskTag::FomCon],
    };
    for &variant in variants {
        if fom == 0 {
            break;
        }
        for i in sample_indices(rng, n, fom).into_vec() {
            let clip = &instances[i].clip;
            out.push(match variant {
                TaskTag::FomGen => make_fom_generative_sample(tok, clip, rng)?,
                _ => make_fom_contrastive_sample(tok, clip, rng)?,
            });
        }
    }
    out.shuffle(rng);
    Ok(out)
}

#[derive(Serialize)]
struct ShardLine<'a> {
    task_tag: TaskTag,
    source_tokens: &'a [u32],
    target_tokens: &'a [u32],
    clip_id: &'a str,
    frame_order: &'a [usize],
}

/// JSON-lines dump of samples for offline inspection.
pub fn shard_jsonl(samples: &[Seq2SeqSample]) -> String {
    let mut out = String::new();
    for s in samples {
        let line = ShardLine {
            task_tag: s.task,
            source_tokens: &s.source_tokens,
            target_tokens: &s.target_tokens,
            clip_id: &s.clip_id,
            frame_order: &s.frame_order,
        };
        out.push_str(&serde_json::to_string(&line).expect("shard line serializes"));
        out.push('\n');
    }
    out
}
