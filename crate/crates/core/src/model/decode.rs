//! Greedy, beam-search and sampled decoding with cached decoder keys/values.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Bound, EncodeOptions, EncoderInput, Memory, ModelError, VideoToTextModel};
use crate::media::{BOS, EOS, PAD, UNK};
use crate::tensor::{Real, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Generated tokens, EOS included.
    pub max_len: usize,
    /// Scores are `log P / len^length_penalty`.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 4,
            max_len: 24,
            length_penalty: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated ids without BOS/EOS.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    /// Length-normalized log probability.
    pub score: f64,
    /// False when decoding hit `max_len` before EOS.
    pub finished: bool,
}

fn normalized(log_prob: f64, len: usize, penalty: f64) -> f64 {
    log_prob / (len.max(1) as f64).powf(penalty)
}

fn banned(id: u32) -> bool {
    matches!(id, PAD | BOS | UNK)
}

/// Best-first: higher score, then the lexicographically smaller sequence.
fn rank(a_score: f64, a: &[u32], b_score: f64, b: &[u32]) -> Ordering {
    b_score.partial_cmp(&a_score).unwrap_or(Ordering::Equal).then_with(|| a.cmp(b))
}

struct Session<'p, F> {
    tape: Tape<'p, F>,
    bound: Bound,
    memory: Memory,
}

#[derive(Clone)]
struct State {
    pos: usize,
    cache: Vec<(Var, Var)>,
}

impl<F: Real> VideoToTextModel<F> {
    fn session(&self, input: &EncoderInput<F>) -> Result<Session<'_, F>, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let states = self.encode(&mut tape, &bound, input, EncodeOptions::default())?;
        let memory = self.memory(&mut tape, &bound, states)?;
        Ok(Session { tape, bound, memory })
    }

    /// Feeds `token` at the state's position; returns log-probabilities of
    /// the next token with PAD/BOS/UNK excluded.
    fn step(&self, s: &mut Session<'_, F>, state: &State, token: u32) -> Result<(State, Vec<f64>), ModelError> {
        let mut cache = state.cache.clone();
        let logits = self.decoder(&mut s.tape, &s.bound, &s.memory, &[token], state.pos, &mut cache)?;
        let row: Vec<f64> = s.tape.value(logits).data().iter().map(|v| v.as_f64()).collect();
        let max = row
            .iter()
            .enumerate()
            .filter(|(i, _)| !banned(*i as u32))
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row
            .iter()
            .enumerate()
            .filter(|(i, _)| !banned(*i as u32))
            .map(|(_, &v)| (v - max).exp())
            .sum();
        let lse = max + sum.ln();
        let logp = row
            .iter()
            .enumerate()
            .map(|(i, &v)| if banned(i as u32) { f64::NEG_INFINITY } else { v - lse })
            .collect();
        Ok((State { pos: state.pos + 1, cache }, logp))
    }

    fn step_limit(&self, max_len: usize) -> usize {
        max_len.min(self.config.max_target_len - 1)
    }

    pub fn greedy_decode(&self, input: &EncoderInput<F>, max_len: usize) -> Result<Hypothesis, ModelError> {
        let mut s = self.session(input)?;
        let mut state = State { pos: 0, cache: Vec::new() };
        let (mut token, mut tokens, mut log_prob) = (BOS, Vec::new(), 0.0);
        for _ in 0..self.step_limit(max_len) {
            let (next, logp) = self.step(&mut s, &state, token)?;
            state = next;
            // first index wins ties
            let (best, &lp) = logp
                .iter()
                .enumerate()
                .fold((0, &f64::NEG_INFINITY), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
            log_prob += lp;
            if best as u32 == EOS {
                let len = tokens.len() + 1;
                return Ok(Hypothesis {
                    tokens,
                    log_prob,
                    score: normalized(log_prob, len, 1.0),
                    finished: true,
                });
            }
            tokens.push(best as u32);
            token = best as u32;
        }
        let len = tokens.len();
        Ok(Hypothesis {
            tokens,
            log_prob,
            score: normalized(log_prob, len, 1.0),
            finished: false,
        })
    }

    /// Length-normalized beam search. Returns hypotheses best first; if none
    /// reached EOS, the surviving beams are returned flagged unfinished.
    pub fn beam_search(&self, input: &EncoderInput<F>, cfg: &DecodeConfig) -> Result<Vec<Hypothesis>, ModelError> {
        let beam = cfg.beam.max(1);
        let lp = cfg.length_penalty;
        let mut s = self.session(input)?;
        struct Alive {
            tokens: Vec<u32>,
            log_prob: f64,
            state: State,
        }
        let mut alive = vec![Alive {
            tokens: Vec::new(),
            log_prob: 0.0,
            state: State { pos: 0, cache: Vec::new() },
        }];
        let mut finished: Vec<Hypothesis> = Vec::new();
        for _ in 0..self.step_limit(cfg.max_len) {
            let mut expanded = Vec::with_capacity(alive.len());
            let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
            for (ai, a) in alive.iter().enumerate() {
                let token = a.tokens.last().copied().unwrap_or(BOS);
                let (state, logp) = self.step(&mut s, &a.state, token)?;
                for (t, &l) in logp.iter().enumerate() {
                    if l.is_finite() {
                        candidates.push((a.log_prob + l, ai, t as u32));
                    }
                }
                expanded.push(state);
            }
            let seq = |c: &(f64, usize, u32)| {
                let mut v = alive[c.1].tokens.clone();
                v.push(c.2);
                v
            };
            candidates.sort_by(|x, y| {
                y.0.partial_cmp(&x.0)
                    .unwrap_or(Ordering::Equal)
                    .then_with(|| alive[x.1].tokens.cmp(&alive[y.1].tokens))
                    .then_with(|| x.2.cmp(&y.2))
            });
            let mut next = Vec::with_capacity(beam);
            for (r, c) in candidates.iter().take(2 * beam).enumerate() {
                if c.2 == EOS {
                    if r < beam {
                        let tokens = alive[c.1].tokens.clone();
                        let len = tokens.len() + 1;
                        finished.push(Hypothesis {
                            tokens,
                            log_prob: c.0,
                            score: normalized(c.0, len, lp),
                            finished: true,
                        });
                    }
                } else if next.len() < beam {
                    next.push(Alive {
                        tokens: seq(c),
                        log_prob: c.0,
                        state: expanded[c.1].clone(),
                    });
                }
            }
            alive = next;
            if finished.len() >= beam || alive.is_empty() {
                break;
            }
        }
        let mut out = if finished.is_empty() {
            alive
                .into_iter()
                .map(|a| Hypothesis {
                    score: normalized(a.log_prob, a.tokens.len(), lp),
                    tokens: a.tokens,
                    log_prob: a.log_prob,
                    finished: false,
                })
                .collect()
        } else {
            finished
        };
        out.sort_by(|a, b| rank(a.score, &a.tokens, b.score, &b.tokens));
        Ok(out)
    }

    /// Ancestral sampling from the model distribution (PAD/BOS/UNK excluded).
    pub fn sample_decode<R: Rng + ?Sized>(
        &self,
        input: &EncoderInput<F>,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Hypothesis, ModelError> {
        let mut s = self.session(input)?;
        let mut state = State { pos: 0, cache: Vec::new() };
        let (mut token, mut tokens, mut log_prob) = (BOS, Vec::new(), 0.0);
        for _ in 0..self.step_limit(max_len) {
            let (next, logp) = self.step(&mut s, &state, token)?;
            state = next;
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &l) in logp.iter().enumerate() {
                if l.is_finite() {
                    acc += l.exp();
                    pick = Some(i);
                    if u < acc {
                        break;
                    }
                }
            }
            let t = pick.expect("some token is allowed") as u32;
            log_prob += logp[t as usize];
            if t == EOS {
                let len = tokens.len() + 1;
                return Ok(Hypothesis {
                    tokens,
                    log_prob,
                    score: normalized(log_prob, len, 1.0),
                    finished: true,
                });
            }
            tokens.push(t);
            token = t;
        }
        let len = tokens.len();
        Ok(Hypothesis {
            tokens,
            log_prob,
            score: normalized(log_prob, len, 1.0),
            finished: false,
        })
    }
}
