#![allow(dead_code)]

use std::sync::Arc;

use rand::Rng;
use vofa::media::{build_vocab, generate_synthetic_corpus, SyntheticCorpus, SyntheticSpec, TextTokenizer, Tokenizer, VideoClip, BOS, EOS};
use vofa::model::{ModelConfig, Variant};
use vofa::tasks::{Seq2SeqSample, TaskTag};
use vofa::tensor::{CeReduction, Primitive, Tape, Tensor};
use vofa::train::{DataRegistry, Dataset, DownstreamTask, StageKind, StageSpec};
use vofa::Exec;

pub fn random_clip<R: Rng>(rng: &mut R, id: &str, frames: usize, size: usize) -> VideoClip {
    let pixels = (0..frames * size * size * 3).map(|_| rng.random()).collect();
    VideoClip::new(id, frames, size, size, 3, pixels).unwrap()
}

/// 2-layer model small enough for exhaustive finite differences.
pub fn gradcheck_config(variant: Variant, tied: bool) -> ModelConfig {
    ModelConfig {
        hidden: 6,
        enc_layers: 2,
        dec_layers: 2,
        heads: 2,
        ffn_mult: 2,
        vocab: 12,
        patch_size: 2,
        image_size: 4,
        max_frames: 8,
        max_text_len: 4,
        max_target_len: 6,
        variant,
        tie_output_head: tied,
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

/// Random caption-shaped sample over ids `4..vocab`.
pub fn random_sample<R: Rng>(rng: &mut R, config: &ModelConfig, frames: usize) -> Seq2SeqSample {
    let clip = Arc::new(random_clip(rng, "g", frames, config.image_size));
    let word = |rng: &mut R| rng.random_range(4..config.vocab as u32);
    let source: Vec<u32> = (0..rng.random_range(1..=config.max_text_len)).map(|_| word(rng)).collect();
    let mut target = vec![BOS];
    target.extend((0..rng.random_range(1..config.max_target_len - 1)).map(|_| word(rng)));
    target.push(EOS);
    Seq2SeqSample {
        task: TaskTag::Caption,
        clip_id: "g".into(),
        source_tokens: source,
        frame_order: (0..frames).collect(),
        frames: clip,
        target_tokens: target,
    }
}

/// `max |a - n| / max(|a|, |n|)` over one gradient tensor. The scale never
/// drops below `floor`, so tensors whose gradient is structurally zero (a key
/// bias under softmax) are judged against the check's overall gradient size
/// instead of against finite-difference rounding noise.
pub fn rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(floor, f64::max);
    diff / scale
}

pub fn max_abs<'a>(values: impl IntoIterator<Item = &'a f64>) -> f64 {
    values.into_iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Relative floor: this fraction of the largest gradient entry in a check.
pub const FLOOR_FRACTION: f64 = 1e-3;

pub const FD_STEP: f64 = 1e-5;

/// Scalar `sum(w * prim(inputs))` for a fixed random weight `w`.
fn weighted_output(prim: &Primitive, inputs: &[Tensor<f64>], w: &Tensor<f64>, requires: &[bool]) -> (f64, Vec<Option<Vec<f64>>>) {
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().zip(requires).map(|(t, &r)| tape.leaf(t.clone(), r)).collect();
    let out = tape.apply(prim.clone(), &vars).unwrap();
    let loss = if tape.shape(out).iter().product::<usize>() == 1 {
        let s = w.data()[0];
        tape.scale(out, s).unwrap()
    } else {
        let shape = tape.shape(out).to_vec();
        assert_eq!(shape.len(), 2, "weighted outputs are rank 2");
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out, wv).unwrap();
        let ones_n = tape.constant(Tensor::full(&[shape[1], 1], 1.0));
        let rows = tape.matmul(prod, ones_n).unwrap();
        let rows_t = tape.transpose(rows).unwrap();
        let ones_m = tape.constant(Tensor::full(&[shape[0], 1], 1.0));
        tape.matmul(rows_t, ones_m).unwrap()
    };
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss).unwrap();
    let g = vars
        .iter()
        .zip(requires)
        .map(|(&v, &r)| r.then(|| grads.get(v).unwrap().data().to_vec()))
        .collect();
    (value, g)
}

/// Worst relative error of analytic vs central-difference gradients over
/// every differentiable input of one primitive application.
pub fn check_primitive<R: Rng>(rng: &mut R, prim: &Primitive, inputs: &[Tensor<f64>], requires: &[bool]) -> f64 {
    let mut probe = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
    let out = probe.apply(prim.clone(), &vars).unwrap();
    let shape = probe.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let (_, analytic) = weighted_output(prim, inputs, &w, requires);
    let floor = FLOOR_FRACTION * max_abs(analytic.iter().flatten().flatten()).max(1e-8);
    let mut worst: f64 = 0.0;
    for (k, a) in analytic.iter().enumerate() {
        let Some(a) = a else { continue };
        let mut numeric = Vec::with_capacity(a.len());
        for j in 0..a.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= FD_STEP;
            let fp = weighted_output(prim, &plus, &w, requires).0;
            let fm = weighted_output(prim, &minus, &w, requires).0;
            numeric.push((fp - fm) / (2.0 * FD_STEP));
        }
        worst = worst.max(rel_err(a, &numeric, floor));
    }
    worst
}

pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// One randomly shaped application of each primitive, with the inputs that
/// carry gradients. Cross-entropy appears with both reductions.
/// Name, primitive, inputs, and which inputs get gradients.
pub type PrimitiveCase = (String, Primitive, Vec<Tensor<f64>>, Vec<bool>);

pub fn primitive_cases<R: Rng>(rng: &mut R) -> Vec<PrimitiveCase> {
    let m = rng.random_range(1..=4);
    let k = rng.random_range(1..=5);
    let n = rng.random_range(2..=5);
    let mut cases = Vec::new();
    let mut push = |name: &str, p: Primitive, ins: Vec<Tensor<f64>>, req: Vec<bool>| cases.push((name.to_string(), p, ins, req));
    push("matmul", Primitive::MatMul, vec![uniform(rng, &[m, k], 1.0), uniform(rng, &[k, n], 1.0)], vec![true, true]);
    push("add", Primitive::Add, vec![uniform(rng, &[m, n], 1.0), uniform(rng, &[m, n], 1.0)], vec![true, true]);
    push("add_bias", Primitive::Add, vec![uniform(rng, &[m, n], 1.0), uniform(rng, &[n], 1.0)], vec![true, true]);
    push("mul", Primitive::Mul, vec![uniform(rng, &[m, n], 1.0), uniform(rng, &[m, n], 1.0)], vec![true, true]);
    let axis = rng.random_range(0..2);
    let other = if axis == 0 { [k, n] } else { [m, k] };
    push(
        "concat",
        Primitive::Concat { axis },
        vec![uniform(rng, &[m, n], 1.0), uniform(rng, &other, 1.0)],
        vec![true, true],
    );
    let dims = [m + 2, n];
    let len = dims[axis];
    let start = rng.random_range(0..len);
    let end = rng.random_range(start + 1..=len);
    push("slice", Primitive::Slice { axis, start, end }, vec![uniform(rng, &dims, 1.0)], vec![true]);
    push("transpose", Primitive::Transpose, vec![uniform(rng, &[m, n], 1.0)], vec![true]);
    let vocab = rng.random_range(2..=6);
    let ids = (0..rng.random_range(1..=6)).map(|_| rng.random_range(0..vocab)).collect();
    push("embedding_gather", Primitive::EmbeddingGather { ids }, vec![uniform(rng, &[vocab, n], 1.0)], vec![true]);
    push("softmax", Primitive::Softmax { axis }, vec![uniform(rng, &[m + 1, n], 2.0)], vec![true]);
    push(
        "layer_norm",
        Primitive::LayerNorm { eps: 1e-5 },
        vec![uniform(rng, &[m, n], 2.0), uniform(rng, &[n], 1.5), uniform(rng, &[n], 1.0)],
        vec![true, true, true],
    );
    push("gelu", Primitive::Gelu, vec![uniform(rng, &[m, n], 3.0)], vec![true]);
    let factor = rng.random_range(-2.0..2.0);
    push("scale", Primitive::Scale { factor }, vec![uniform(rng, &[m, n], 1.0)], vec![true]);
    let mask: Arc<[bool]> = (0..m * n).map(|_| rng.random_bool(0.4)).collect::<Vec<_>>().into();
    push(
        "masked_fill",
        Primitive::MaskedFill { mask, value: -3.0 },
        vec![uniform(rng, &[m, n], 1.0)],
        vec![true],
    );
    let rows = m + 1;
    let v = n + 1;
    let mut targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..v)).collect();
    targets[0] = 0;
    targets[rows - 1] = v - 1;
    for (name, reduction) in [("cross_entropy_mean", CeReduction::Mean), ("cross_entropy_sum", CeReduction::Sum)] {
        push(
            name,
            Primitive::CrossEntropy {
                targets: targets.clone(),
                ignore_index: Some(0),
                reduction,
            },
            vec![uniform(rng, &[rows, v], 2.0)],
            vec![true],
        );
    }
    cases
}

/// Small on-disk-free registry over a synthetic corpus: `clips` holds every
/// video, `images` the still frames.
pub fn synthetic_registry(spec: &SyntheticSpec, image_size: usize) -> (SyntheticCorpus, TextTokenizer, DataRegistry) {
    let corpus = generate_synthetic_corpus(spec).unwrap();
    let tok = build_vocab([&corpus.manifest, &corpus.image_manifest]);
    let mut reg = DataRegistry::new();
    let frames = spec.frames_per_clip;
    reg.insert(Dataset::from_clips("clips", &corpus.clips, &corpus.manifest, frames, image_size, Exec::Parallel).unwrap());
    if !corpus.images.is_empty() {
        reg.insert(
            Dataset::from_clips("images", &corpus.images, &corpus.image_manifest, frames, image_size, Exec::Parallel).unwrap(),
        );
    }
    (corpus, tok, reg)
}

pub fn toy_model_config(tok: &TextTokenizer) -> ModelConfig {
    ModelConfig {
        vocab: tok.vocab_size(),
        ..ModelConfig::default()
    }
}

pub fn stage(kind: StageKind, train: &str, epochs: usize, batch_size: usize, lr: f64) -> StageSpec {
    StageSpec {
        stage: kind,
        train: train.into(),
        val: None,
        schedule: None,
        task: DownstreamTask::Caption,
        epochs,
        batch_size,
        lr,
        weight_decay: 0.01,
        scst: false,
        eval_every: 0,
    }
}

pub mod oracle {
    //! Deliberately naive metric implementations: linear scans over
    //! position lists, no hashing, no shared code with the crate.

    fn ngrams(s: &[String], n: usize) -> Vec<Vec<String>> {
        if s.len() < n {
            return Vec::new();
        }
        (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
    }

    fn count(list: &[Vec<String>], g: &[String]) -> usize {
        list.iter().filter(|x| x.as_slice() == g).count()
    }

    fn distinct(list: &[Vec<String>]) -> Vec<Vec<String>> {
        let mut out: Vec<Vec<String>> = Vec::new();
        for g in list {
            if !out.contains(g) {
                out.push(g.clone());
            }
        }
        out
    }

    pub fn bleu4(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
        let mut log_sum = 0.0;
        let mut hyp_len = 0usize;
        let mut ref_len = 0usize;
        for (h, rs) in hyps.iter().zip(refs) {
            hyp_len += h.len();
            let mut best = rs[0].len();
            for r in rs {
                let (d, bd) = (r.len().abs_diff(h.len()), best.abs_diff(h.len()));
                if d < bd || (d == bd && r.len() < best) {
                    best = r.len();
                }
            }
            ref_len += best;
        }
        if hyp_len == 0 {
            return 0.0;
        }
        for n in 1..=4 {
            let (mut num, mut den) = (0usize, 0usize);
            for (h, rs) in hyps.iter().zip(refs) {
                let hg = ngrams(h, n);
                den += hg.len();
                for g in distinct(&hg) {
                    let max_ref = rs.iter().map(|r| count(&ngrams(r, n), &g)).max().unwrap();
                    num += count(&hg, &g).min(max_ref);
                }
            }
            if num == 0 {
                return 0.0;
            }
            log_sum += (num as f64 / den as f64).ln();
        }
        let bp = if hyp_len > ref_len {
            1.0
        } else {
            (1.0 - ref_len as f64 / hyp_len as f64).exp()
        };
        bp * (log_sum / 4.0).exp()
    }

    pub fn cider_d(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
        let n_docs = refs.len() as f64;
        let df = |g: &[String]| -> f64 {
            let docs = refs
                .iter()
                .filter(|rs| rs.iter().any(|r| count(&ngrams(r, g.len()), g) > 0))
                .count();
            (docs as f64).max(1.0)
        };
        let vector = |s: &[String], n: usize| -> Vec<(Vec<String>, f64)> {
            let grams = ngrams(s, n);
            distinct(&grams)
                .into_iter()
                .map(|g| {
                    let tf = count(&grams, &g) as f64;
                    let w = tf * (n_docs.ln() - df(&g).ln());
                    (g, w)
                })
                .collect()
        };
        let norm = |v: &[(Vec<String>, f64)]| v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        let mut total = 0.0;
        for (h, rs) in hyps.iter().zip(refs) {
            let mut item = 0.0;
            for r in rs {
                let delta = h.len() as f64 - r.len() as f64;
                let penalty = (-delta * delta / 72.0).exp();
                let mut per_n = 0.0;
                for n in 1..=4 {
                    let vh = vector(h, n);
                    let vr = vector(r, n);
                    let mut dot = 0.0;
                    for (g, wh) in &vh {
                        for (g2, wr) in &vr {
                            if g == g2 {
                                dot += wh.min(*wr) * wr;
                            }
                        }
                    }
                    let (nh, nr) = (norm(&vh), norm(&vr));
                    if nh != 0.0 && nr != 0.0 {
                        dot /= nh * nr;
                    }
                    per_n += dot * penalty;
                }
                item += per_n / 4.0;
            }
            total += 10.0 * item / rs.len() as f64;
        }
        if hyps.is_empty() {
            0.0
        } else {
            total / hyps.len() as f64
        }
    }
}
