//! Corpus-level caption metrics and exact-match accuracy.
//!
//! Inputs are token lists produced by the crate's own word normalizer; no
//! external tokenizer is involved, so absolute values are not comparable with
//! leaderboard numbers.

mod report;

use std::collections::{BTreeMap, HashMap};

pub use report::{EvalReport, MetricSet, EXCLUDED_METRICS};

use crate::media::tokenizer::{normalize_answer, normalize_words};
use crate::Exec;

pub type Tokens = Vec<String>;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("{what}: {left} predictions but {right} references")]
    LengthMismatch { what: &'static str, left: usize, right: usize },
    #[error("item {0} has no references")]
    NoReferences(usize),
}

pub const MAX_N: usize = 4;
pub const CIDER_SIGMA: f64 = 6.0;
pub const ROUGE_BETA: f64 = 1.2;

pub fn tokenize(text: &str) -> Tokens {
    normalize_words(text)
}

type Counts<'a> = HashMap<&'a [String], usize>;

/// Multiset of n-grams of one order.
fn ngram_counts(tokens: &[String], n: usize) -> Counts<'_> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn check_pairs<T>(hyps: &[Tokens], refs: &[Vec<T>]) -> Result<(), MetricsError> {
    if hyps.len() != refs.len() {
        return Err(MetricsError::LengthMismatch {
            what: "corpus",
            left: hyps.len(),
            right: refs.len(),
        });
    }
    match refs.iter().position(Vec::is_empty) {
        Some(i) => Err(MetricsError::NoReferences(i)),
        None => Ok(()),
    }
}

/// Corpus BLEU with n = 1..4, uniform weights, clipped counts and the
/// closest-reference-length brevity penalty. Any zero precision gives 0.
pub fn bleu4(hyps: &[Tokens], refs: &[Vec<Tokens>]) -> Result<f64, MetricsError> {
    check_pairs(hyps, refs)?;
    let mut matched = [0usize; MAX_N];
    let mut total = [0usize; MAX_N];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, rs) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += rs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(h.len()), l))
            .expect("non-empty refs");
        for n in 1..=MAX_N {
            let hc = ngram_counts(h, n);
            let mut max_ref: Counts = HashMap::new();
            for r in rs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            matched[n - 1] += hc.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum::<usize>();
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..MAX_N).map(|i| (matched[i] as f64 / total[i] as f64).ln()).sum::<f64>() / MAX_N as f64;
    let bp = (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp();
    Ok(bp * log_p.exp())
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// Sentence ROUGE-L: best LCS F-measure over the references.
pub fn rouge_l_sentence(hyp: &[String], refs: &[Tokens]) -> f64 {
    let b2 = ROUGE_BETA * ROUGE_BETA;
    refs.iter()
        .map(|r| {
            let lcs = lcs_len(hyp, r);
            if lcs == 0 {
                return 0.0;
            }
            let p = lcs as f64 / hyp.len() as f64;
            let rec = lcs as f64 / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

/// Mean sentence ROUGE-L over the corpus.
pub fn rouge_l(hyps: &[Tokens], refs: &[Vec<Tokens>]) -> Result<f64, MetricsError> {
    check_pairs(hyps, refs)?;
    if hyps.is_empty() {
        return Ok(0.0);
    }
    Ok(hyps.iter().zip(refs).map(|(h, r)| rouge_l_sentence(h, r)).sum::<f64>() / hyps.len() as f64)
}

/// TF-IDF weighted n-gram vectors of one sentence, per order.
struct CiderVec {
    weights: Vec<BTreeMap<Vec<String>, f64>>,
    /// Squared norms, summed in key order.
    sq_norms: [f64; MAX_N],
    len: usize,
}

/// CIDEr-D with document frequencies fixed by a reference corpus, so single
/// items can be scored against it (the SCST reward uses this).
pub struct CiderD {
    df: HashMap<Vec<String>, usize>,
    log_n: f64,
    refs: Vec<Vec<CiderVec>>,
}

impl CiderD {
    pub fn new(refs: &[Vec<Tokens>]) -> Self {
        let mut df: HashMap<Vec<String>, usize> = HashMap::new();
        for rs in refs {
            let mut seen: Vec<&[String]> = Vec::new();
            for r in rs {
                for n in 1..=MAX_N {
                    seen.extend(ngram_counts(r, n).into_keys());
                }
            }
            seen.sort_unstable();
            seen.dedup();
            for g in seen {
                *df.entry(g.to_vec()).or_insert(0) += 1;
            }
        }
        let mut scorer = Self {
            df,
            log_n: (refs.len().max(1) as f64).ln(),
            refs: Vec::new(),
        };
        scorer.refs = refs
            .iter()
            .map(|rs| rs.iter().map(|r| scorer.vectorize(r)).collect())
            .collect();
        scorer
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    fn vectorize(&self, tokens: &[String]) -> CiderVec {
        let mut weights = Vec::with_capacity(MAX_N);
        let mut sq_norms = [0.0; MAX_N];
        for n in 1..=MAX_N {
            let v: BTreeMap<Vec<String>, f64> = ngram_counts(tokens, n)
                .into_iter()
                .map(|(g, tf)| {
                    let df = self.df.get(g).copied().unwrap_or(0).max(1) as f64;
                    (g.to_vec(), tf as f64 * (self.log_n - df.ln()))
                })
                .collect();
            sq_norms[n - 1] = v.values().map(|w| w * w).sum();
            weights.push(v);
        }
        CiderVec {
            weights,
            sq_norms,
            len: tokens.len(),
        }
    }

    fn sim(h: &CiderVec, r: &CiderVec) -> f64 {
        let delta = h.len as f64 - r.len as f64;
        let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        let mut total = 0.0;
        for n in 0..MAX_N {
            let mut dot = 0.0;
            for (g, &wh) in &h.weights[n] {
                if let Some(&wr) = r.weights[n].get(g) {
                    dot += wh.min(wr) * wr;
                }
            }
            if h.sq_norms[n] != 0.0 && r.sq_norms[n] != 0.0 {
                dot /= (h.sq_norms[n] * r.sq_norms[n]).sqrt();
            }
            total += dot * penalty;
        }
        total / MAX_N as f64
    }

    /// Score of `hyp` against the references of item `index`, in [0, 10].
    pub fn score_item(&self, index: usize, hyp: &[String]) -> f64 {
        let h = self.vectorize(hyp);
        let rs = &self.refs[index];
        10.0 * rs.iter().map(|r| Self::sim(&h, r)).sum::<f64>() / rs.len() as f64
    }

    pub fn corpus_score(&self, hyps: &[Tokens], exec: Exec) -> Result<f64, MetricsError> {
        if hyps.len() != self.refs.len() {
            return Err(MetricsError::LengthMismatch {
                what: "cider-d",
                left: hyps.len(),
                right: self.refs.len(),
            });
        }
        if hyps.is_empty() {
            return Ok(0.0);
        }
        let scores = exec.map_indexed(hyps.len(), |i| self.score_item(i, &hyps[i]));
        Ok(scores.iter().sum::<f64>() / hyps.len() as f64)
    }
}

/// Corpus CIDEr-D, document frequencies taken from `refs`. A single-item
/// corpus has zero idf everywhere and scores 0.
pub fn cider_d(hyps: &[Tokens], refs: &[Vec<Tokens>]) -> Result<f64, MetricsError> {
    check_pairs(hyps, refs)?;
    CiderD::new(refs).corpus_score(hyps, Exec::default())
}

pub fn exact_match_accuracy<P: AsRef<str>, A: AsRef<str>>(predictions: &[P], answers: &[A]) -> Result<f64, MetricsError> {
    if predictions.len() != answers.len() {
        return Err(MetricsError::LengthMismatch {
            what: "exact match",
            left: predictions.len(),
            right: answers.len(),
        });
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions
        .iter()
        .zip(answers)
        .filter(|(p, a)| normalize_answer(p.as_ref()) == normalize_answer(a.as_ref()))
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// BLEU@4, ROUGE-L and CIDEr-D of raw strings.
pub fn caption_scores<S: AsRef<str>>(predictions: &[S], references: &[Vec<String>]) -> Result<MetricSet, MetricsError> {
    let hyps: Vec<Tokens> = predictions.iter().map(|p| tokenize(p.as_ref())).collect();
    let refs: Vec<Vec<Tokens>> = references
        .iter()
        .map(|rs| rs.iter().map(|r| tokenize(r)).collect())
        .collect();
    Ok(MetricSet {
        bleu4: bleu4(&hyps, &refs)?,
        rouge_l: rouge_l(&hyps, &refs)?,
        cider_d: cider_d(&hyps, &refs)?,
        accuracy: None,
    })
}
