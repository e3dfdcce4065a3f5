mod common;

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vofa::media::{SyntheticSpec, TextTokenizer};
use vofa::model::{load_checkpoint, ModelConfig, Variant, VideoToTextModel};
use vofa::tasks::MixSchedule;
use vofa::train::{
    batch_gradients, evaluate_split, run_stage, run_stages, scst_gradients, Dataset, DataRegistry, DownstreamTask,
    EvalConfig, Item, Predictor, ReportMeta, RunContext, RunLog, ScstItem, StageKind, StageSpec, TrainError, TrainState,
};
use vofa::Exec;

use common::{gradcheck_config, random_sample, stage, synthetic_registry, toy_model_config};

fn small_config(tok: &TextTokenizer) -> ModelConfig {
    ModelConfig {
        hidden: 16,
        heads: 2,
        ffn_mult: 2,
        enc_layers: 1,
        dec_layers: 1,
        patch_size: 8,
        image_size: 16,
        max_target_len: 16,
        ..toy_model_config(tok)
    }
}

fn context<'a>(tok: &'a TextTokenizer, reg: &'a DataRegistry, dir: &'a Path, stop: Option<u64>) -> RunContext<'a> {
    RunContext {
        seed: 3,
        tok,
        data: reg,
        eval: EvalConfig {
            max_len: 8,
            beam: 2,
            ..EvalConfig::default()
        },
        exec: Exec::Parallel,
        out_dir: Some(dir),
        stop_after_steps: stop,
        verbose: false,
    }
}

fn three_stages() -> Vec<StageSpec> {
    let mut ipt = stage(StageKind::Ipt, "clips", 1, 4, 1e-3);
    ipt.schedule = Some(MixSchedule::parse_tasks("caption,match,fom_con").unwrap());
    let mut finetune = stage(StageKind::Finetune, "clips", 2, 4, 1e-3);
    finetune.val = Some("clips".into());
    vec![stage(StageKind::ImageText, "images", 1, 4, 1e-3), ipt, finetune]
}

fn small_registry() -> (TextTokenizer, DataRegistry) {
    let spec = SyntheticSpec {
        n_clips: 12,
        n_images: 8,
        seed: 9,
        ..SyntheticSpec::default()
    };
    let (_, tok, reg) = synthetic_registry(&spec, 16);
    (tok, reg)
}

fn run(dir: &Path, stop: Option<u64>, state: &mut TrainState) -> RunLog {
    let (tok, reg) = small_registry();
    run_stages(state, &three_stages(), &context(&tok, &reg, dir, stop)).unwrap()
}

#[test]
fn resume_is_bit_identical_and_writes_stage_checkpoints() {
    let (tok, _) = small_registry();
    let fresh = || TrainState::new(VideoToTextModel::new(small_config(&tok), 3).unwrap());
    let tmp = tempfile::tempdir().unwrap();
    let (whole, part) = (tmp.path().join("whole"), tmp.path().join("part"));
    let log = run(&whole, None, &mut fresh());
    assert_eq!(log.stage_checkpoints.len(), 3);
    assert!(log.stage_checkpoints[0].ends_with("ckpt_stage0_image_text.vofa"));
    assert!(log.stage_checkpoints.iter().all(|p| p.exists()));
    assert!(!log.interrupted);
    assert!(whole.join("curve.jsonl").exists());

    // 7 steps lands inside the ipt stage (image_text has 2)
    let log = run(&part, Some(7), &mut fresh());
    assert!(log.interrupted);
    let ckpt = load_checkpoint(&part.join("ckpt_last.vofa")).unwrap();
    let (mut state, seed) = TrainState::from_checkpoint(&ckpt).unwrap();
    assert_eq!(seed, 3);
    assert_eq!(state.cursor.stage, 1);
    assert!(state.optimizer.is_some());
    run(&part, None, &mut state);
    assert_eq!(
        fs::read(whole.join("ckpt_last.vofa")).unwrap(),
        fs::read(part.join("ckpt_last.vofa")).unwrap()
    );
}

#[test]
fn checkpoint_restores_state() {
    let (tok, _) = small_registry();
    let tmp = tempfile::tempdir().unwrap();
    let mut state = TrainState::new(VideoToTextModel::new(small_config(&tok), 3).unwrap());
    run(tmp.path(), Some(4), &mut state);
    let ckpt = load_checkpoint(&tmp.path().join("ckpt_last.vofa")).unwrap();
    let (restored, _) = TrainState::from_checkpoint(&ckpt).unwrap();
    assert_eq!(restored.model, state.model);
    assert_eq!(restored.optimizer, state.optimizer);
    assert_eq!(restored.cursor, state.cursor);
    assert_eq!(restored.best_metric, state.best_metric);
}

#[test]
fn ipt_epoch_length_follows_the_mix() {
    let spec = SyntheticSpec {
        n_clips: 800,
        frames_per_clip: 4,
        canvas_height: 16,
        canvas_width: 16,
        shape_size: 4,
        seed: 2,
        ..SyntheticSpec::default()
    };
    let (_, tok, mut reg) = synthetic_registry(&spec, 8);
    // one caption per clip so there are exactly 800 instances
    let clips = reg.get("clips").unwrap().as_ref().clone();
    let mut single = clips.subset("single", &(0..800).collect::<Vec<_>>());
    for it in &mut single.items {
        it.captions.truncate(1);
    }
    reg.insert(single);
    let config = ModelConfig {
        hidden: 8,
        heads: 1,
        ffn_mult: 1,
        enc_layers: 1,
        dec_layers: 1,
        patch_size: 8,
        image_size: 8,
        max_target_len: 16,
        ..toy_model_config(&tok)
    };
    let mut ipt = stage(StageKind::Ipt, "single", 1, 100, 1e-3);
    ipt.schedule = Some(MixSchedule::parse_tasks("caption,match,fom_con").unwrap());
    let mut state = TrainState::new(VideoToTextModel::new(config, 0).unwrap());
    let mut ctx = context(&tok, &reg, Path::new("."), None);
    ctx.out_dir = None;
    let mut log = RunLog::default();
    run_stage(&mut state, 0, &ipt, &ctx, &mut log).unwrap();
    // 800 caption + 800 matching + 100 frame-order samples, batches of 100
    assert_eq!(state.cursor.step, 17);
}

#[test]
fn full_batch_descent_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut m = VideoToTextModel::<f64>::new(gradcheck_config(Variant::Full, false), 1).unwrap();
    let batch: Vec<_> = (0..4).map(|_| random_sample(&mut rng, &m.config, 2)).collect();
    let mut last = f64::INFINITY;
    let mut first = None;
    for step in 0..50 {
        let g = batch_gradients(&m, &batch, Exec::Sequential).unwrap();
        assert!(g.loss < last, "step {step}: {} after {last}", g.loss);
        last = g.loss;
        first.get_or_insert(g.loss);
        for (p, d) in m.params_mut().tensors_mut().iter_mut().zip(&g.grads) {
            for (pv, dv) in p.data_mut().iter_mut().zip(d.data()) {
                *pv -= 2e-3 * dv;
            }
        }
    }
    assert!(last < first.unwrap() - 0.02);
}

#[test]
fn duplicated_batch_has_the_same_loss_and_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = VideoToTextModel::<f64>::new(gradcheck_config(Variant::Fid, true), 2).unwrap();
    let batch: Vec<_> = (0..3).map(|_| random_sample(&mut rng, &m.config, 3)).collect();
    let doubled: Vec<_> = batch.iter().chain(&batch).cloned().collect();
    let a = batch_gradients(&m, &batch, Exec::Sequential).unwrap();
    let b = batch_gradients(&m, &doubled, Exec::Parallel).unwrap();
    assert!((a.loss - b.loss).abs() < 1e-12);
    for (x, y) in a.grads.iter().zip(&b.grads) {
        for (u, v) in x.data().iter().zip(y.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn scst_without_advantage_has_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = VideoToTextModel::<f64>::new(gradcheck_config(Variant::Full, false), 4).unwrap();
    let items: Vec<_> = (0..4)
        .map(|i| ScstItem {
            sample: random_sample(&mut rng, &m.config, 2),
            refs: i,
        })
        .collect();
    let out = scst_gradients(&m, &items, &|_, _| 0.5, 5, 0, 0, Exec::Sequential).unwrap();
    assert_eq!(out.grad.loss, 0.0);
    assert!(out.grad.grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
    assert!(out.records.iter().flatten().all(|r| r.advantage() == 0.0));
}

struct Echo;

impl Predictor for Echo {
    fn predict(&self, item: &Item, _: &str) -> Result<String, TrainError> {
        Ok(item.captions[0].clone())
    }
}

struct Silent;

impl Predictor for Silent {
    fn predict(&self, _: &Item, _: &str) -> Result<String, TrainError> {
        Ok(String::new())
    }
}

fn meta() -> ReportMeta {
    ReportMeta {
        split: "test".into(),
        step: 0,
        beam: 1,
        seed: 0,
    }
}

fn caption_only_set() -> Dataset {
    let spec = SyntheticSpec {
        n_clips: 10,
        qa_fraction: 0.0,
        seed: 4,
        ..SyntheticSpec::default()
    };
    let (_, _, reg) = synthetic_registry(&spec, 16);
    let mut d = reg.get("clips").unwrap().as_ref().clone();
    for it in &mut d.items {
        it.captions.truncate(1);
    }
    d
}

#[test]
fn evaluation_scores_and_errors() {
    let d = caption_only_set();
    let echo = evaluate_split(&Echo, &d, DownstreamTask::Caption, &meta(), 0, Exec::Parallel).unwrap();
    let m = &echo.report.metrics;
    assert_eq!((m.bleu4, m.rouge_l, m.cider_d), (1.0, 1.0, 10.0));
    assert_eq!(echo.report.n_items, 10);
    let silent = evaluate_split(&Silent, &d, DownstreamTask::Caption, &meta(), 0, Exec::Parallel).unwrap();
    let m = &silent.report.metrics;
    assert_eq!((m.bleu4, m.rouge_l, m.cider_d), (0.0, 0.0, 0.0));
    let err = evaluate_split(&Echo, &d, DownstreamTask::Qa, &meta(), 0, Exec::Parallel).unwrap_err();
    assert!(matches!(err, TrainError::MissingField { field: "qa", .. }));
}

#[test]
fn parallel_loading_keeps_order() {
    let spec = SyntheticSpec {
        n_clips: 20,
        seed: 6,
        ..SyntheticSpec::default()
    };
    let corpus = vofa::media::generate_synthetic_corpus(&spec).unwrap();
    let load = |exec| Dataset::from_clips("c", &corpus.clips, &corpus.manifest, 4, 16, exec).unwrap();
    let (a, b) = (load(Exec::Parallel), load(Exec::Sequential));
    assert_eq!(a.len(), 20);
    for (x, y) in a.items.iter().zip(&b.items) {
        assert_eq!(x.clip, y.clip);
        assert_eq!(x.captions, y.captions);
        assert_eq!(x.clip.num_frames(), 4);
    }
}
