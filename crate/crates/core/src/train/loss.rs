//! Teacher-forced cross-entropy over batches and the self-critical surrogate.

use super::TrainError;
use crate::media::{TextTokenizer, BOS, EOS};
use crate::model::{Hypothesis, VideoToTextModel};
use crate::rng::stream;
use crate::tasks::Seq2SeqSample;
use crate::tensor::{CeReduction, Real, Tape, Tensor};
use crate::Exec;

/// Loss and parameter gradients of one batch.
#[derive(Clone, Debug)]
pub struct BatchGrad<F> {
    /// Mean token cross-entropy (or surrogate value for SCST).
    pub loss: f64,
    pub tokens: usize,
    /// Aligned with the model's parameter store.
    pub grads: Vec<Tensor<F>>,
}

/// Summed cross-entropy, scored-token count and gradients of one sample.
pub fn sample_gradients<F: Real>(
    model: &VideoToTextModel<F>,
    sample: &Seq2SeqSample,
    weight: f64,
) -> Result<(f64, usize, Vec<Tensor<F>>), TrainError> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, true);
    let (loss, n) = model.sample_loss(&mut tape, &b, sample, CeReduction::Sum)?;
    let loss = if weight == 1.0 { loss } else { tape.scale(loss, weight)? };
    let value = tape.value(loss).item().as_f64();
    let mut grads = tape.backward(loss)?;
    let out = b
        .params
        .iter()
        .map(|&p| grads.take(p).expect("every parameter is a gradient leaf"))
        .collect();
    Ok((value, n, out))
}

fn sum_into<F: Real>(acc: &mut Option<Vec<Tensor<F>>>, grads: Vec<Tensor<F>>) {
    match acc {
        None => *acc = Some(grads),
        Some(a) => {
            for (x, g) in a.iter_mut().zip(grads) {
                for (xv, gv) in x.data_mut().iter_mut().zip(g.data()) {
                    *xv += *gv;
                }
            }
        }
    }
}

fn scale_all<F: Real>(grads: &mut [Tensor<F>], factor: f64) {
    let f = F::lit(factor);
    for g in grads {
        for v in g.data_mut() {
            *v *= f;
        }
    }
}

/// Per-sample tapes (in parallel under [`Exec::Parallel`]) reduced in batch
/// order, then divided by the number of non-PAD target tokens.
pub fn batch_gradients<F: Real>(
    model: &VideoToTextModel<F>,
    batch: &[Seq2SeqSample],
    exec: Exec,
) -> Result<BatchGrad<F>, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let results = exec.map(batch, |s| sample_gradients(model, s, 1.0));
    let (mut loss, mut tokens, mut acc) = (0.0, 0usize, None);
    for r in results {
        let (l, n, g) = r?;
        loss += l;
        tokens += n;
        sum_into(&mut acc, g);
    }
    if tokens == 0 {
        return Err(TrainError::EmptyBatch);
    }
    let mut grads = acc.expect("non-empty batch");
    scale_all(&mut grads, 1.0 / tokens as f64);
    Ok(BatchGrad {
        loss: loss / tokens as f64,
        tokens,
        grads,
    })
}

/// Mean cross-entropy over non-PAD target tokens, forward only.
pub fn compute_loss<F: Real>(model: &VideoToTextModel<F>, batch: &[Seq2SeqSample], exec: Exec) -> Result<f64, TrainError> {
    let parts = exec.map(batch, |s| -> Result<(f64, usize), TrainError> {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, false);
        let (loss, n) = model.sample_loss(&mut tape, &b, s, CeReduction::Sum)?;
        Ok((tape.value(loss).item().as_f64(), n))
    });
    let (mut total, mut tokens) = (0.0, 0);
    for p in parts {
        let (l, n) = p?;
        total += l;
        tokens += n;
    }
    if tokens == 0 {
        return Err(TrainError::EmptyBatch);
    }
    Ok(total / tokens as f64)
}

/// `sample` with its target replaced by a decoded hypothesis.
pub fn with_hypothesis_target(sample: &Seq2SeqSample, hyp: &Hypothesis) -> Seq2SeqSample {
    let mut target = Vec::with_capacity(hyp.tokens.len() + 2);
    target.push(BOS);
    target.extend_from_slice(&hyp.tokens);
    if hyp.finished {
        target.push(EOS);
    }
    Seq2SeqSample {
        target_tokens: target,
        ..sample.clone()
    }
}

/// `log P(target | frames, source)` under teacher forcing.
pub fn sequence_log_prob<F: Real>(model: &VideoToTextModel<F>, sample: &Seq2SeqSample) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false);
    let (loss, _) = model.sample_loss(&mut tape, &b, sample, CeReduction::Sum)?;
    Ok(-tape.value(loss).item().as_f64())
}

/// One self-critical item: a caption sample and the index of its references.
#[derive(Clone, Debug)]
pub struct ScstItem {
    pub sample: Seq2SeqSample,
    pub refs: usize,
}

#[derive(Clone, Debug)]
pub struct ScstRecord {
    pub sampled: Hypothesis,
    pub greedy: Hypothesis,
    pub reward_sampled: f64,
    pub reward_greedy: f64,
}

impl ScstRecord {
    pub fn advantage(&self) -> f64 {
        self.reward_sampled - self.reward_greedy
    }
}

/// Result of [`scst_gradients`]: the mean surrogate
/// `-(r(y_s) - r(y_g)) log P(y_s)`, its gradients, and per-item decodes
/// (`None` where the sampled caption stayed empty and the item was skipped).
pub struct ScstOutcome<F> {
    pub grad: BatchGrad<F>,
    pub records: Vec<Option<ScstRecord>>,
}

/// Reward callback: `(reference index, decoded ids) -> score`.
pub type Reward<'a> = dyn Fn(usize, &[u32]) -> f64 + Sync + 'a;

/// Self-critical policy gradient with the greedy decode as baseline. Each
/// item samples from its own stream `(seed, "scst", stream_base + i)`.
pub fn scst_gradients<F: Real>(
    model: &VideoToTextModel<F>,
    items: &[ScstItem],
    reward: &Reward<'_>,
    max_len: usize,
    seed: u64,
    stream_base: u64,
    exec: Exec,
) -> Result<ScstOutcome<F>, TrainError> {
    if items.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let results = exec.map_indexed(items.len(), |i| -> Result<_, TrainError> {
        let item = &items[i];
        let input = model.sample_input(&item.sample)?;
        let mut rng = stream(seed, "scst", stream_base + i as u64);
        let greedy = model.greedy_decode(&input, max_len)?;
        let mut sampled = model.sample_decode(&input, max_len, &mut rng)?;
        if sampled.tokens.is_empty() {
            sampled = model.sample_decode(&input, max_len, &mut rng)?;
            if sampled.tokens.is_empty() {
                return Ok(None);
            }
        }
        let record = ScstRecord {
            reward_sampled: reward(item.refs, &sampled.tokens),
            reward_greedy: reward(item.refs, &greedy.tokens),
            sampled,
            greedy,
        };
        let adv = record.advantage();
        let target = with_hypothesis_target(&item.sample, &record.sampled);
        let (ce, n, grads) = if adv == 0.0 {
            let zeros = model.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            (0.0, 0, zeros)
        } else {
            sample_gradients(model, &target, adv)?
        };
        Ok(Some((record, ce, n, grads)))
    });
    let n_items = items.len() as f64;
    let (mut surrogate, mut tokens, mut acc, mut records) = (0.0, 0, None, Vec::with_capacity(items.len()));
    for r in results {
        match r? {
            None => records.push(None),
            Some((record, weighted_ce, n, grads)) => {
                surrogate += weighted_ce;
                tokens += n;
                sum_into(&mut acc, grads);
                records.push(Some(record));
            }
        }
    }
    let mut grads =
        acc.unwrap_or_else(|| model.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect());
    scale_all(&mut grads, 1.0 / n_items);
    Ok(ScstOutcome {
        grad: BatchGrad {
            loss: surrogate / n_items,
            tokens,
            grads,
        },
        records,
    })
}

/// Decoded ids as words.
pub fn words(tok: &TextTokenizer, ids: &[u32]) -> Vec<String> {
    ids.iter().filter_map(|&i| tok.word(i).map(str::to_string)).collect()
}
