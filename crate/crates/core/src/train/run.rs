use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{DownstreamTask, EvalConfig, StageKind, StageSpec};
use super::data::{DataRegistry, Dataset};
use super::eval::{evaluate_split, ModelPredictor, ReportMeta};
use super::loss::{batch_gradients, scst_gradients, words, BatchGrad, ScstItem};
use super::TrainError;
use crate::media::TextTokenizer;
use crate::metrics::{tokenize, CiderD, EvalReport, Tokens};
use crate::model::{save_checkpoint, Checkpoint, VideoToTextModel};
use crate::rng::stream;
use crate::tasks::{make_caption_sample, make_qa_sample, schedule_epoch, Seq2SeqSample};
use crate::tensor::{AdamW, AdamWConfig, Tensor};
use crate::Exec;

/// Position in a multi-stage run: the next batch to train.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    pub stage: usize,
    pub epoch: usize,
    pub batch: usize,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: VideoToTextModel<f32>,
    pub optimizer: Option<AdamW<f32>>,
    pub cursor: Cursor,
    pub best_metric: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainMeta {
    seed: u64,
    cursor: Cursor,
    best_metric: Option<f64>,
    optimizer: Option<OptimizerMeta>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerMeta {
    config: AdamWConfig,
    step: u64,
}

const FIRST_MOMENT: &str = "adam.m.";
const SECOND_MOMENT: &str = "adam.v.";

impl TrainState {
    pub fn new(model: VideoToTextModel<f32>) -> Self {
        Self {
            model,
            optimizer: None,
            cursor: Cursor::default(),
            best_metric: None,
        }
    }

    pub fn to_checkpoint(&self, tok: &TextTokenizer, seed: u64) -> Checkpoint {
        let mut ckpt = Checkpoint::from_model(&self.model, tok);
        if let Some(opt) = &self.optimizer {
            let (m, v) = opt.moments();
            for (prefix, moments) in [(FIRST_MOMENT, m), (SECOND_MOMENT, v)] {
                for (name, t) in self.model.params().names().iter().zip(moments) {
                    ckpt.extra.push((format!("{prefix}{name}"), t.clone()));
                }
            }
        }
        let meta = TrainMeta {
            seed,
            cursor: self.cursor,
            best_metric: self.best_metric,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerMeta {
                config: o.config,
                step: o.step_count(),
            }),
        };
        ckpt.train = Some(serde_json::to_value(meta).expect("train state serializes"));
        ckpt
    }

    /// Restores model, optimizer and cursor; returns the run seed as well.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, u64), TrainError> {
        let model = ckpt.model()?;
        let Some(train) = &ckpt.train else {
            return Ok((Self::new(model), 0));
        };
        let meta: TrainMeta = serde_json::from_value(train.clone()).map_err(|e| TrainError::Mismatch(e.to_string()))?;
        let optimizer = match meta.optimizer {
            None => None,
            Some(o) => {
                let find = |prefix: &str| -> Result<Vec<Tensor<f32>>, TrainError> {
                    model
                        .params()
                        .names()
                        .iter()
                        .map(|n| {
                            let key = format!("{prefix}{n}");
                            ckpt.extra
                                .iter()
                                .find(|(k, _)| *k == key)
                                .map(|(_, t)| t.clone())
                                .ok_or_else(|| TrainError::Mismatch(format!("missing optimizer tensor {key}")))
                        })
                        .collect()
                };
                Some(AdamW::from_parts(o.config, o.step, find(FIRST_MOMENT)?, find(SECOND_MOMENT)?)?)
            }
        };
        Ok((
            Self {
                model,
                optimizer,
                cursor: meta.cursor,
                best_metric: meta.best_metric,
            },
            meta.seed,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub stage: String,
    pub loss: f64,
    pub metric: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct RunLog {
    pub curve: Vec<CurvePoint>,
    pub reports: Vec<EvalReport>,
    pub stage_checkpoints: Vec<PathBuf>,
    pub interrupted: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Progress {
    Completed,
    Interrupted,
}

pub struct RunContext<'a> {
    pub seed: u64,
    pub tok: &'a TextTokenizer,
    pub data: &'a DataRegistry,
    pub eval: EvalConfig,
    pub exec: Exec,
    /// Checkpoints, reports and `curve.jsonl` go here when set.
    pub out_dir: Option<&'a Path>,
    /// Stop (saving `ckpt_last.vofa`) once this many steps have run.
    pub stop_after_steps: Option<u64>,
    pub verbose: bool,
}

impl RunContext<'_> {
    fn write(&self, name: &str, bytes: &[u8]) -> Result<Option<PathBuf>, TrainError> {
        let Some(dir) = self.out_dir else {
            return Ok(None);
        };
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Some(path))
    }

    fn save(&self, name: &str, state: &TrainState) -> Result<Option<PathBuf>, TrainError> {
        let Some(dir) = self.out_dir else {
            return Ok(None);
        };
        let path = dir.join(name);
        save_checkpoint(&path, &state.to_checkpoint(self.tok, self.seed))?;
        Ok(Some(path))
    }

    fn curve_file(&self) -> Result<Option<File>, TrainError> {
        let Some(dir) = self.out_dir else {
            return Ok(None);
        };
        let path = dir.join("curve.jsonl");
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map(Some)
            .map_err(|source| TrainError::Io {
                path: path.display().to_string(),
                source,
            })
    }
}

/// Samples of one epoch with, for SCST, the index of each sample's item.
fn epoch_samples(
    spec: &StageSpec,
    stage_index: usize,
    epoch: usize,
    ds: &Dataset,
    base: &[(Seq2SeqSample, usize)],
    ctx: &RunContext<'_>,
) -> Result<Vec<(Seq2SeqSample, usize)>, TrainError> {
    let mut rng = stream(ctx.seed, &format!("epoch/{stage_index}"), epoch as u64);
    if spec.stage == StageKind::Ipt {
        let samples = schedule_epoch(ctx.tok, &ds.instances(), &spec.schedule(), &mut rng)?;
        return Ok(samples.into_iter().map(|s| (s, usize::MAX)).collect());
    }
    let mut out = base.to_vec();
    out.shuffle(&mut rng);
    Ok(out)
}

fn base_samples(spec: &StageSpec, ds: &Dataset, tok: &TextTokenizer) -> Result<Vec<(Seq2SeqSample, usize)>, TrainError> {
    let mut out = Vec::new();
    for (i, item) in ds.items.iter().enumerate() {
        match (spec.stage, spec.task) {
            (StageKind::Ipt, _) => {}
            (StageKind::ImageText, _) => {
                let clip = if item.clip.num_frames() == 1 {
                    Arc::clone(&item.clip)
                } else {
                    Arc::new(item.clip.select_frames(&[0])?)
                };
                for c in &item.captions {
                    out.push((make_caption_sample(tok, &clip, c)?, i));
                }
            }
            (StageKind::Finetune, DownstreamTask::Caption) => {
                for c in &item.captions {
                    out.push((make_caption_sample(tok, &item.clip, c)?, i));
                }
            }
            (StageKind::Finetune, DownstreamTask::Qa) => {
                for q in &item.qa {
                    out.push((make_qa_sample(tok, &item.clip, &q.question, &q.answer)?, i));
                }
            }
        }
    }
    if spec.stage == StageKind::Ipt {
        if let Some(it) = ds.items.iter().find(|it| it.clip.num_frames() < 4) {
            return Err(TrainError::Config(format!(
                "ipt needs clips with at least 4 frames, `{}` has {}",
                it.clip.clip_id,
                it.clip.num_frames()
            )));
        }
    } else if out.is_empty() {
        return Err(TrainError::MissingField {
            dataset: ds.name.clone(),
            field: if spec.task == DownstreamTask::Qa { "qa" } else { "captions" },
        });
    }
    Ok(out)
}

fn validate(
    state: &mut TrainState,
    spec: &StageSpec,
    ctx: &RunContext<'_>,
    log: &mut RunLog,
) -> Result<Option<f64>, TrainError> {
    let Some(val) = &spec.val else {
        return Ok(None);
    };
    let ds = ctx.data.get(val)?;
    let task = if spec.stage == StageKind::Finetune {
        spec.task
    } else {
        DownstreamTask::Caption
    };
    let predictor = ModelPredictor {
        model: &state.model,
        tok: ctx.tok,
        decode: ctx.eval.decode(),
    };
    let meta = ReportMeta {
        split: "val".into(),
        step: state.cursor.step,
        beam: ctx.eval.beam,
        seed: ctx.seed,
    };
    let eval = evaluate_split(&predictor, ds, task, &meta, ctx.eval.max_items, ctx.exec)?;
    let metric = eval.report.selection_metric();
    ctx.write(&format!("report_{}.json", state.cursor.step), eval.report.to_json().as_bytes())?;
    if ctx.verbose {
        let m = &eval.report.metrics;
        eprintln!(
            "[{}] step {} val bleu4 {:.4} rouge_l {:.4} cider_d {:.4}{}",
            spec.stage.name(),
            state.cursor.step,
            m.bleu4,
            m.rouge_l,
            m.cider_d,
            m.accuracy.map(|a| format!(" accuracy {a:.4}")).unwrap_or_default()
        );
    }
    log.reports.push(eval.report);
    if state.best_metric.is_none_or(|b| metric > b) {
        state.best_metric = Some(metric);
        ctx.save("ckpt_best.vofa", state)?;
    }
    Ok(Some(metric))
}

fn record(log: &mut RunLog, file: &mut Option<File>, point: CurvePoint) -> Result<(), TrainError> {
    if let Some(f) = file {
        let line = serde_json::to_string(&point).expect("curve point serializes");
        writeln!(f, "{line}").map_err(|source| TrainError::Io {
            path: "curve.jsonl".into(),
            source,
        })?;
    }
    log.curve.push(point);
    Ok(())
}

/// Trains one stage from the state's cursor to the stage end, or until
/// `ctx.stop_after_steps`.
pub fn run_stage(
    state: &mut TrainState,
    stage_index: usize,
    spec: &StageSpec,
    ctx: &RunContext<'_>,
    log: &mut RunLog,
) -> Result<Progress, TrainError> {
    spec.validate()?;
    if state.cursor.stage != stage_index {
        return Err(TrainError::Mismatch(format!(
            "cursor is at stage {}, asked to run stage {stage_index}",
            state.cursor.stage
        )));
    }
    let ds = ctx.data.get(&spec.train)?;
    let base = base_samples(spec, ds, ctx.tok)?;
    let scorer = if spec.scst {
        let refs: Vec<Vec<Tokens>> = ds
            .items
            .iter()
            .map(|it| it.captions.iter().map(|c| tokenize(c)).collect())
            .collect();
        Some(CiderD::new(&refs))
    } else {
        None
    };
    if state.optimizer.is_none() {
        let config = AdamWConfig {
            weight_decay: spec.weight_decay,
            ..AdamWConfig::with_lr(spec.lr)
        };
        state.optimizer = Some(AdamW::new(config, state.model.params().tensors()));
    }
    let mut curve = ctx.curve_file()?;
    let stage_name = spec.stage.name();
    while state.cursor.epoch < spec.epochs {
        let samples = epoch_samples(spec, stage_index, state.cursor.epoch, ds, &base, ctx)?;
        let n_batches = samples.len().div_ceil(spec.batch_size);
        while state.cursor.batch < n_batches {
            if ctx.stop_after_steps.is_some_and(|s| state.cursor.step >= s) {
                ctx.save("ckpt_last.vofa", state)?;
                log.interrupted = true;
                return Ok(Progress::Interrupted);
            }
            let lo = state.cursor.batch * spec.batch_size;
            let chunk = &samples[lo..(lo + spec.batch_size).min(samples.len())];
            let grad: BatchGrad<f32> = match &scorer {
                Some(scorer) => {
                    let items: Vec<ScstItem> = chunk
                        .iter()
                        .map(|(s, refs)| ScstItem {
                            sample: s.clone(),
                            refs: *refs,
                        })
                        .collect();
                    let reward = |refs: usize, ids: &[u32]| scorer.score_item(refs, &words(ctx.tok, ids));
                    let base_stream = state.cursor.step * spec.batch_size as u64;
                    scst_gradients(&state.model, &items, &reward, ctx.eval.max_len, ctx.seed, base_stream, ctx.exec)?
                        .grad
                }
                None => {
                    let batch: Vec<Seq2SeqSample> = chunk.iter().map(|(s, _)| s.clone()).collect();
                    batch_gradients(&state.model, &batch, ctx.exec)?
                }
            };
            if !grad.loss.is_finite() {
                return Err(TrainError::Divergence {
                    stage: stage_name.to_string(),
                    step: state.cursor.step,
                    loss: grad.loss,
                });
            }
            let opt = state.optimizer.as_mut().expect("optimizer initialized");
            opt.step(state.model.params_mut().tensors_mut(), &grad.grads)?;
            state.cursor.step += 1;
            state.cursor.batch += 1;
            if ctx.verbose && state.cursor.step.is_multiple_of(50) {
                eprintln!(
                    "[{stage_name}] step {} epoch {} loss {:.4}",
                    state.cursor.step, state.cursor.epoch, grad.loss
                );
            }
            let metric = if spec.eval_every > 0 && state.cursor.step.is_multiple_of(spec.eval_every) {
                validate(state, spec, ctx, log)?
            } else {
                None
            };
            record(
                log,
                &mut curve,
                CurvePoint {
                    step: state.cursor.step,
                    stage: stage_name.to_string(),
                    loss: grad.loss,
                    metric,
                },
            )?;
        }
        state.cursor.epoch += 1;
        state.cursor.batch = 0;
    }
    let evaluated_now = spec.eval_every > 0 && state.cursor.step.is_multiple_of(spec.eval_every) && state.cursor.step > 0;
    if !evaluated_now {
        validate(state, spec, ctx, log)?;
    }
    state.cursor = Cursor {
        stage: stage_index + 1,
        epoch: 0,
        batch: 0,
        step: state.cursor.step,
    };
    state.optimizer = None;
    if let Some(p) = ctx.save(&format!("ckpt_stage{stage_index}_{stage_name}.vofa"), state)? {
        log.stage_checkpoints.push(p);
    }
    Ok(Progress::Completed)
}

/// Runs `stages` in order from the state's cursor and writes
/// `ckpt_last.vofa` at the end.
pub fn run_stages(state: &mut TrainState, stages: &[StageSpec], ctx: &RunContext<'_>) -> Result<RunLog, TrainError> {
    if let Some(dir) = ctx.out_dir {
        fs::create_dir_all(dir).map_err(|source| TrainError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    let mut log = RunLog::default();
    for (i, spec) in stages.iter().enumerate().skip(state.cursor.stage) {
        if run_stage(state, i, spec, ctx, &mut log)? == Progress::Interrupted {
            return Ok(log);
        }
    }
    ctx.save("ckpt_last.vofa", state)?;
    Ok(log)
}
