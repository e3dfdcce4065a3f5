//! `vofa`: synthetic data, staged training, evaluation and one-off inference.

mod overrides;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use vofa::media::{self, load_frames, normalize, normalize_answer, MediaError, SyntheticSpec, Tokenizer};
use vofa::metrics::{caption_scores, exact_match_accuracy, EvalReport, MetricsError};
use vofa::model::{load_checkpoint, Checkpoint, CheckpointError, DecodeConfig, ModelError, VideoToTextModel};
use vofa::tasks::{prompts, MixSchedule};
use vofa::train::{
    evaluate_split, preprocess, run_stages, DataRegistry, Dataset, DownstreamTask, ModelPredictor, ReportMeta,
    RunConfig, RunContext, StageKind, TrainError, TrainState,
};

#[derive(Parser)]
#[command(name = "vofa", version, about = "Video-to-text training and evaluation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clip corpus (manifest plus VOFR frames).
    Synth(SynthArgs),
    /// Run the stages of a config file.
    Train(TrainArgs),
    /// Decode and score a manifest with a checkpoint.
    Eval(EvalArgs),
    /// Caption one clip.
    Caption(InferArgs),
    /// Answer a question about one clip.
    Qa(QaArgs),
    /// Score prediction lines against reference lines.
    Score(ScoreArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON synthetic spec; defaults apply to missing keys.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run of the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many optimizer steps, saving `ckpt_last.vofa`.
    #[arg(long)]
    stop_after_steps: Option<u64>,
    /// Task mix for every ipt stage, e.g. `caption,match,fom_con`.
    #[arg(long)]
    ipt_tasks: Option<String>,
    #[arg(long)]
    quiet: bool,
    /// Config overrides as `--dotted.key value`, after the other flags.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0.., value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long, default_value_t = 4)]
    beam: usize,
    #[arg(long, default_value_t = 24)]
    max_len: usize,
    #[arg(long, default_value_t = 1.0)]
    length_penalty: f64,
    /// Frames sampled from each clip.
    #[arg(long, default_value_t = 8)]
    frames: usize,
}

impl DecodeArgs {
    fn decode(&self) -> DecodeConfig {
        DecodeConfig {
            beam: self.beam,
            max_len: self.max_len,
            length_penalty: self.length_penalty,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "caption", value_parser = parse_task)]
    task: DownstreamTask,
    #[arg(long, default_value = "eval")]
    split: String,
    /// Score only the first N items (0 = all).
    #[arg(long, default_value_t = 0)]
    max_items: usize,
    /// Also write one `{clip_id, caption}` line per query.
    #[arg(long)]
    predictions_out: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// VOFR file or directory of numbered PNG frames.
    #[arg(long)]
    frames_path: PathBuf,
    /// Print every beam hypothesis with its scores.
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    decode: DecodeArgs,
}

#[derive(Args)]
struct QaArgs {
    #[command(flatten)]
    infer: InferArgs,
    #[arg(long)]
    question: String,
}

#[derive(Args)]
struct ScoreArgs {
    /// Lines of `{clip_id, caption}`.
    #[arg(long)]
    predictions: PathBuf,
    /// Manifest-style lines carrying `clip_id` plus `captions` (or `answer`).
    #[arg(long)]
    references: PathBuf,
    #[arg(long, default_value = "caption", value_parser = parse_task)]
    task: DownstreamTask,
}

fn parse_task(s: &str) -> std::result::Result<DownstreamTask, String> {
    serde_json::from_value(Value::String(s.into())).map_err(|_| format!("unknown task `{s}` (caption|qa)"))
}

/// A failure with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl fmt::Display) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }

    fn usage(message: impl fmt::Display) -> Self {
        Self::new(1, message)
    }

    fn mismatch(message: impl fmt::Display) -> Self {
        Self::new(4, message)
    }
}

const IO: u8 = 2;
const DIVERGED: u8 = 3;
const MISMATCH: u8 = 4;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::new(IO, format!("{}: {e}", path.display()))
}

impl From<MediaError> for Failure {
    fn from(e: MediaError) -> Self {
        let code = match e {
            MediaError::Io { .. } | MediaError::Format { .. } => IO,
            _ => 1,
        };
        Self::new(code, e)
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        let code = match e {
            CheckpointError::Io { .. } => IO,
            CheckpointError::Mismatch(_) => MISMATCH,
            _ => 1,
        };
        Self::new(code, e)
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        let code = match e {
            ModelError::FrameSize { .. } | ModelError::TooManyFrames { .. } | ModelError::TokenId { .. } => MISMATCH,
            _ => 1,
        };
        Self::new(code, e)
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        Self::usage(e)
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Media(m) => m.into(),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Model(m) => m.into(),
            TrainError::Io { .. } => Self::new(IO, e),
            TrainError::Divergence { .. } => Self::new(DIVERGED, format!("{e}; try a lower lr for that stage")),
            TrainError::Mismatch(_) => Self::new(MISMATCH, e),
            _ => Self::usage(e),
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value).map_err(Failure::usage)?);
    Ok(())
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("VOFA_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::usage(format!("VOFA_SEED must be an unsigned integer, got `{s}`"))),
        Err(_) => Ok(None),
    }
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(p) => serde_json::from_str::<SyntheticSpec>(&read_text(p)?)
            .map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?,
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = env_seed()? {
        spec.seed = seed;
    }
    let corpus = media::generate_synthetic_corpus(&spec)?;
    corpus.write_dir(&args.out)?;
    print_json(&corpus.summary())
}

fn load_run_config(args: &TrainArgs) -> Result<RunConfig> {
    let text = read_text(&args.config)?;
    let mut value: Value =
        serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", args.config.display())))?;
    for (key, v) in overrides::parse(&args.overrides).map_err(Failure::usage)? {
        overrides::apply(&mut value, &key, v).map_err(Failure::usage)?;
    }
    let mut config: RunConfig = serde_json::from_value(value).map_err(|e| Failure::usage(format!("config: {e}")))?;
    if let Some(tasks) = &args.ipt_tasks {
        let schedule = MixSchedule::parse_tasks(tasks).map_err(Failure::usage)?;
        for s in config.stages.iter_mut().filter(|s| s.stage == StageKind::Ipt) {
            s.schedule = Some(schedule.clone());
        }
    }
    if let Some(seed) = env_seed()? {
        config.seed = seed;
    }
    // manifests are relative to the config file
    let base = args.config.parent().unwrap_or(Path::new(""));
    for d in config.data.datasets.values_mut() {
        if d.manifest.is_relative() {
            d.manifest = base.join(&d.manifest);
        }
    }
    config.validate()?;
    Ok(config)
}

fn resume_state(path: &Path, config: &RunConfig, tok: &media::TextTokenizer) -> Result<TrainState> {
    let ckpt = load_checkpoint(path)?;
    let (state, seed) = TrainState::from_checkpoint(&ckpt)?;
    if ckpt.config != config.model {
        return Err(Failure::mismatch(format!("{}: model config differs from the run config", path.display())));
    }
    if &ckpt.vocab != tok {
        return Err(Failure::mismatch(format!("{}: vocabulary differs from the run's datasets", path.display())));
    }
    if seed != config.seed {
        return Err(Failure::mismatch(format!(
            "{}: written with seed {seed}, run uses {}",
            path.display(),
            config.seed
        )));
    }
    if state.cursor.stage > config.stages.len() {
        return Err(Failure::mismatch(format!("{}: cursor is past the last stage", path.display())));
    }
    Ok(state)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut config = load_run_config(args)?;
    let out_dir = args
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| Failure::usage("no output directory: pass --out or set output_dir"))?;
    let data = DataRegistry::load(&config.data, config.model.image_size, config.exec)?;
    let tok = data.vocab();
    if config.model.vocab == 0 {
        config.model.vocab = tok.vocab_size();
    } else if config.model.vocab != tok.vocab_size() {
        return Err(Failure::mismatch(format!(
            "model.vocab is {} but the datasets need {}",
            config.model.vocab,
            tok.vocab_size()
        )));
    }
    let mut state = match &args.resume {
        Some(p) => resume_state(p, &config, &tok)?,
        None => TrainState::new(VideoToTextModel::new(config.model.clone(), config.seed)?),
    };
    let ctx = RunContext {
        seed: config.seed,
        tok: &tok,
        data: &data,
        eval: config.eval.clone(),
        exec: config.exec,
        out_dir: Some(&out_dir),
        stop_after_steps: args.stop_after_steps,
        verbose: !args.quiet,
    };
    let log = run_stages(&mut state, &config.stages, &ctx)?;
    print_json(&json!({
        "output_dir": out_dir,
        "interrupted": log.interrupted,
        "step": state.cursor.step,
        "stage_checkpoints": log.stage_checkpoints,
        "best_metric": state.best_metric,
        "reports": log.reports,
    }))
}

/// Model, vocabulary and the seed recorded at training time.
fn open_checkpoint(path: &Path, frames: usize) -> Result<(Checkpoint, VideoToTextModel<f32>, u64)> {
    let ckpt = load_checkpoint(path)?;
    let model = ckpt.model()?;
    if frames == 0 || frames > model.config.max_frames {
        return Err(Failure::mismatch(format!(
            "--frames {frames} is outside the checkpoint's 1..={}",
            model.config.max_frames
        )));
    }
    let seed = ckpt.train.as_ref().and_then(|t| t.get("seed")).and_then(Value::as_u64).unwrap_or(0);
    Ok((ckpt, model, seed))
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    clip_id: String,
    caption: String,
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (ckpt, model, seed) = open_checkpoint(&args.ckpt, args.decode.frames)?;
    let name = args.manifest.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset").to_string();
    let dataset = Dataset::load(&name, &args.manifest, args.decode.frames, model.config.image_size, Default::default())?;
    let predictor = ModelPredictor {
        model: &model,
        tok: &ckpt.vocab,
        decode: args.decode.decode(),
    };
    let meta = ReportMeta {
        split: args.split.clone(),
        step: ckpt.train.as_ref().and_then(|t| t.pointer("/cursor/step")).and_then(Value::as_u64).unwrap_or(0),
        beam: args.decode.beam,
        seed,
    };
    let eval = evaluate_split(&predictor, &dataset, args.task, &meta, args.max_items, Default::default())?;
    if let Some(out) = &args.predictions_out {
        let ids = query_clip_ids(&dataset, args.task, args.max_items);
        let mut lines = String::new();
        for (clip_id, caption) in ids.into_iter().zip(&eval.predictions) {
            let line = PredictionLine {
                clip_id,
                caption: caption.clone(),
            };
            lines.push_str(&serde_json::to_string(&line).map_err(Failure::usage)?);
            lines.push('\n');
        }
        write_text(out, &lines)?;
    }
    println!("{}", eval.report.to_json());
    Ok(())
}

/// Clip id of every query `evaluate_split` issues, in its order.
fn query_clip_ids(dataset: &Dataset, task: DownstreamTask, max_items: usize) -> Vec<String> {
    let limit = if max_items == 0 { dataset.len() } else { max_items.min(dataset.len()) };
    dataset.items[..limit]
        .iter()
        .flat_map(|it| {
            let n = match task {
                DownstreamTask::Caption => usize::from(!it.captions.is_empty()),
                DownstreamTask::Qa => it.qa.len(),
            };
            std::iter::repeat_n(it.clip.clip_id.clone(), n)
        })
        .collect()
}

fn infer(args: &InferArgs, prompt: &str) -> Result<()> {
    let (ckpt, model, _) = open_checkpoint(&args.ckpt, args.decode.frames)?;
    let clip_id = args.frames_path.file_stem().and_then(|s| s.to_str()).unwrap_or("clip");
    let clip = load_frames(&args.frames_path, clip_id)?;
    let clip = preprocess(&clip, args.decode.frames, model.config.image_size)?;
    let prompt = if prompt.is_empty() {
        if clip.num_frames() == 1 {
            prompts::IMAGE_CAPTION.to_string()
        } else {
            prompts::CAPTION.to_string()
        }
    } else {
        normalize(prompt)
    };
    let input = model.encoder_input(&clip, &ckpt.vocab.encode(&prompt))?;
    let hyps = model.beam_search(&input, &args.decode.decode())?;
    let text = |ids: &[u32]| ckpt.vocab.decode(ids);
    let best = hyps.first().map(|h| text(&h.tokens)).unwrap_or_default();
    if args.json {
        let list: Vec<Value> = hyps
            .iter()
            .map(|h| {
                let t = text(&h.tokens);
                json!({
                    "text": t,
                    "normalized": normalize_answer(&t),
                    "score": h.score,
                    "log_prob": h.log_prob,
                    "finished": h.finished,
                })
            })
            .collect();
        print_json(&json!({"prompt": prompt, "text": best, "hypotheses": list}))
    } else {
        println!("{best}");
        Ok(())
    }
}

#[derive(Deserialize)]
struct ReferenceLine {
    clip_id: String,
    #[serde(default)]
    captions: Vec<String>,
    #[serde(default)]
    answer: Option<String>,
    #[serde(default)]
    qa: Vec<media::QaPair>,
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Failure::usage(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

fn cmd_score(args: &ScoreArgs) -> Result<()> {
    let predictions: Vec<PredictionLine> = read_lines(&args.predictions)?;
    let references: Vec<ReferenceLine> = read_lines(&args.references)?;
    // QA references may list several questions per clip; they are consumed in order.
    let mut pools: std::collections::HashMap<&str, (Vec<Vec<String>>, usize)> = Default::default();
    for r in &references {
        let refs = match args.task {
            DownstreamTask::Caption => vec![r.captions.clone()],
            DownstreamTask::Qa => match &r.answer {
                Some(a) => vec![vec![a.clone()]],
                None => r.qa.iter().map(|q| vec![q.answer.clone()]).collect(),
            },
        };
        pools.entry(r.clip_id.as_str()).or_default().0.extend(refs);
    }
    let mut refs = Vec::with_capacity(predictions.len());
    for p in &predictions {
        let (list, next) = pools
            .get_mut(p.clip_id.as_str())
            .ok_or_else(|| Failure::usage(format!("no reference for clip `{}`", p.clip_id)))?;
        let r = list
            .get(*next)
            .filter(|r| !r.is_empty())
            .ok_or_else(|| Failure::usage(format!("clip `{}` has no {} reference left", p.clip_id, args.task.name())))?;
        refs.push(r.clone());
        *next += 1;
    }
    let hyps: Vec<&str> = predictions.iter().map(|p| p.caption.as_str()).collect();
    let mut metrics = caption_scores(&hyps, &refs)?;
    if args.task == DownstreamTask::Qa {
        let answers: Vec<&str> = refs.iter().map(|r| r[0].as_str()).collect();
        metrics.accuracy = Some(exact_match_accuracy(&hyps, &answers)?);
    }
    let name = args.references.file_stem().and_then(|s| s.to_str()).unwrap_or("references");
    let report = EvalReport::new(name, "score", 0, metrics, 0, predictions.len(), 0);
    println!("{}", report.to_json());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Caption(a) => infer(a, ""),
        Command::Qa(a) => {
            if a.question.trim().is_empty() {
                return Err(Failure::usage("--question is empty"));
            }
            infer(&a.infer, &a.question)
        }
        Command::Score(a) => cmd_score(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
