use super::config::DownstreamTask;
use super::data::{Dataset, Item};
use super::TrainError;
use crate::media::{normalize, TextTokenizer, Tokenizer};
use crate::metrics::{caption_scores, exact_match_accuracy, EvalReport};
use crate::model::{DecodeConfig, VideoToTextModel};
use crate::tasks::prompts;
use crate::Exec;

/// Produces the text answer for one evaluation query.
pub trait Predictor: Sync {
    fn predict(&self, item: &Item, prompt: &str) -> Result<String, TrainError>;
}

/// Beam-search decoding with a trained model.
pub struct ModelPredictor<'a> {
    pub model: &'a VideoToTextModel<f32>,
    pub tok: &'a TextTokenizer,
    pub decode: DecodeConfig,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, item: &Item, prompt: &str) -> Result<String, TrainError> {
        let input = self.model.encoder_input(&item.clip, &self.tok.encode(prompt))?;
        let hyps = self.model.beam_search(&input, &self.decode)?;
        Ok(hyps.first().map(|h| self.tok.decode(&h.tokens)).unwrap_or_default())
    }
}

pub fn caption_prompt(item: &Item) -> &'static str {
    if item.clip.num_frames() == 1 {
        prompts::IMAGE_CAPTION
    } else {
        prompts::CAPTION
    }
}

/// Where a report comes from.
#[derive(Clone, Debug)]
pub struct ReportMeta {
    pub split: String,
    pub step: u64,
    pub beam: usize,
    pub seed: u64,
}

#[derive(Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    pub predictions: Vec<String>,
}

/// Decodes every query of `dataset` and scores it: BLEU@4, ROUGE-L and
/// CIDEr-D against the captions (or answers), plus exact-match accuracy
/// for QA.
pub fn evaluate_split(
    predictor: &dyn Predictor,
    dataset: &Dataset,
    task: DownstreamTask,
    meta: &ReportMeta,
    max_items: usize,
    exec: Exec,
) -> Result<Evaluation, TrainError> {
    let limit = if max_items == 0 { dataset.len() } else { max_items.min(dataset.len()) };
    let items = &dataset.items[..limit];
    let queries: Vec<(usize, String, Vec<String>)> = match task {
        DownstreamTask::Caption => {
            if dataset.items.iter().all(|it| it.captions.is_empty()) {
                return Err(TrainError::MissingField {
                    dataset: dataset.name.clone(),
                    field: "captions",
                });
            }
            items
                .iter()
                .enumerate()
                .filter(|(_, it)| !it.captions.is_empty())
                .map(|(i, it)| (i, caption_prompt(it).to_string(), it.captions.clone()))
                .collect()
        }
        DownstreamTask::Qa => {
            if dataset.items.iter().all(|it| it.qa.is_empty()) {
                return Err(TrainError::MissingField {
                    dataset: dataset.name.clone(),
                    field: "qa",
                });
            }
            items
                .iter()
                .enumerate()
                .flat_map(|(i, it)| it.qa.iter().map(move |q| (i, normalize(&q.question), vec![q.answer.clone()])))
                .collect()
        }
    };
    let predictions = exec
        .map(&queries, |(i, prompt, _)| predictor.predict(&items[*i], prompt))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<Vec<String>> = queries.iter().map(|q| q.2.clone()).collect();
    let mut metrics = caption_scores(&predictions, &refs)?;
    if task == DownstreamTask::Qa {
        let answers: Vec<&str> = refs.iter().map(|r| r[0].as_str()).collect();
        metrics.accuracy = Some(exact_match_accuracy(&predictions, &answers)?);
    }
    let report = EvalReport::new(&dataset.name, &meta.split, meta.step, metrics, meta.beam, queries.len(), meta.seed);
    Ok(Evaluation { report, predictions })
}
