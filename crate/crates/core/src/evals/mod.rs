//! Log-likelihood multiple-choice evaluation with few-shot prompting.

mod task;

pub use task::{synthetic_task, EvalTask, Scoring, TaskHeader, TaskItem, MARKER};

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Tokenizer};
use crate::model::{Model, ModelError};
use crate::numerics::Real;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("task line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("empty continuation")]
    EmptyContinuation,
    #[error("empty context")]
    EmptyContext,
    #[error("continuation of {len} tokens exceeds context length {context}")]
    TooLong { len: usize, context: usize },
    #[error("duplicate task {0}")]
    DuplicateTask(String),
    #[error("no records to aggregate")]
    NoRecords,
    #[error("invalid weights: {0}")]
    Weights(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenize(#[from] DataError),
}

/// Anything that yields next-token log-probabilities.
pub trait LanguageModel {
    fn vocab(&self) -> usize;
    fn context_length(&self) -> usize;
    /// Row-major `[tokens.len(), vocab]` log-probabilities of the token
    /// following each prefix `tokens[..=t]`.
    fn log_probs(&self, tokens: &[u32]) -> Result<Vec<f64>, EvalError>;
}

fn log_softmax_rows(logits: impl Iterator<Item = f64>, vocab: usize) -> Vec<f64> {
    let mut out: Vec<f64> = logits.collect();
    for row in out.chunks_mut(vocab) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row {
            *v -= lse;
        }
    }
    out
}

impl<T: Real> LanguageModel for Model<T> {
    fn vocab(&self) -> usize {
        self.config().vocab
    }

    fn context_length(&self) -> usize {
        self.config().context_length
    }

    fn log_probs(&self, tokens: &[u32]) -> Result<Vec<f64>, EvalError> {
        let logits = self.logits(tokens)?;
        Ok(log_softmax_rows(logits.iter().map(|v| v.as_f64()), self.vocab()))
    }
}

/// Every logit equal.
pub struct UniformModel {
    pub vocab: usize,
    pub context_length: usize,
}

impl LanguageModel for UniformModel {
    fn vocab(&self) -> usize {
        self.vocab
    }
    fn context_length(&self) -> usize {
        self.context_length
    }
    fn log_probs(&self, tokens: &[u32]) -> Result<Vec<f64>, EvalError> {
        Ok(vec![-(self.vocab as f64).ln(); tokens.len() * self.vocab])
    }
}

/// Puts a large logit on one token id regardless of input.
pub struct MarkerModel {
    pub vocab: usize,
    pub context_length: usize,
    pub marker: u32,
    pub boost: f64,
}

impl LanguageModel for MarkerModel {
    fn vocab(&self) -> usize {
        self.vocab
    }
    fn context_length(&self) -> usize {
        self.context_length
    }
    fn log_probs(&self, tokens: &[u32]) -> Result<Vec<f64>, EvalError> {
        let row = (0..self.vocab).map(|i| if i as u32 == self.marker { self.boost } else { 0.0 });
        let logits = (0..tokens.len()).flat_map(|_| row.clone());
        Ok(log_softmax_rows(logits, self.vocab))
    }
}

/// Sum of `log p(continuation[i] | context ⧺ continuation[..i])`. The
/// context is truncated from the left so the scored window fits.
pub fn score_continuation(model: &dyn LanguageModel, context: &[u32], continuation: &[u32]) -> Result<f64, EvalError> {
    if continuation.is_empty() {
        return Err(EvalError::EmptyContinuation);
    }
    let window = model.context_length();
    if continuation.len() > window {
        return Err(EvalError::TooLong {
            len: continuation.len(),
            context: window,
        });
    }
    // input = (ctx ⧺ cont)[..-1] must fit in the window
    let keep = (window + 1 - continuation.len()).min(context.len());
    if keep == 0 {
        return Err(EvalError::EmptyContext);
    }
    let ctx = &context[context.len() - keep..];
    let mut input = ctx.to_vec();
    input.extend_from_slice(&continuation[..continuation.len() - 1]);
    let lp = model.log_probs(&input)?;
    let v = model.vocab();
    Ok(continuation
        .iter()
        .enumerate()
        .map(|(i, &tok)| lp[(ctx.len() - 1 + i) * v + tok as usize])
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub run: String,
    pub task: String,
    pub n_shots: usize,
    pub scoring: Scoring,
    pub accuracy: f64,
    pub correct: usize,
    pub items: usize,
    pub skipped: usize,
    /// Per scored item, the log-likelihood of each choice.
    pub choice_ll: Vec<Vec<f64>>,
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn fill(template_part: &str, context: &str) -> String {
    template_part.replace("{context}", context)
}

/// Few-shot indices for scored item `i`, drawn without replacement from
/// the dedicated pool or else from the other items. Deterministic in
/// `(seed, i)`.
pub fn shot_indices(task: &EvalTask, i: usize, seed: u64) -> Vec<usize> {
    let k = task.header.n_shots;
    if k == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    if !task.shot_pool.is_empty() {
        return sample(&mut rng, task.shot_pool.len(), k).into_vec();
    }
    // sample from the n - 1 other items, then skip over `i`
    sample(&mut rng, task.items.len() - 1, k)
        .into_iter()
        .map(|j| if j >= i { j + 1 } else { j })
        .collect()
}

/// The prompt preceding item `i`'s answer, including its shots.
pub fn prompt(task: &EvalTask, i: usize, seed: u64) -> String {
    let h = &task.header;
    let (pre, post) = h.split_template().expect("validated at parse");
    let mut out = String::new();
    for j in shot_indices(task, i, seed) {
        let shot = if task.shot_pool.is_empty() { &task.items[j] } else { &task.shot_pool[j] };
        out.push_str(&fill(pre, &shot.context));
        out.push_str(&shot.choices[shot.gold]);
        out.push_str(&fill(post, &shot.context));
        out.push_str(&h.separator);
    }
    out.push_str(&fill(pre, &task.items[i].context));
    out
}

/// Scores every item of `task`. Items whose continuation cannot fit the
/// model window are counted in `skipped`.
pub fn evaluate(
    model: &dyn LanguageModel,
    tokenizer: &dyn Tokenizer,
    task: &EvalTask,
    seed: u64,
    run: &str,
) -> Result<EvalRecord, EvalError> {
    let (mut correct, mut skipped) = (0, 0);
    let mut choice_ll = Vec::with_capacity(task.items.len());
    'items: for (i, item) in task.items.iter().enumerate() {
        let ctx = tokenizer.encode(&prompt(task, i, seed))?;
        let mut lls = Vec::with_capacity(item.choices.len());
        for choice in &item.choices {
            let cont = tokenizer.encode(choice)?;
            match score_continuation(model, &ctx, &cont) {
                Ok(ll) => lls.push(ll),
                Err(EvalError::TooLong { .. }) | Err(EvalError::EmptyContext) => {
                    skipped += 1;
                    continue 'items;
                }
                Err(e) => return Err(e),
            }
        }
        let scores: Vec<f64> = match task.header.scoring {
            Scoring::RawLl => lls.clone(),
            Scoring::LengthNormalized => lls
                .iter()
                .zip(&item.choices)
                .map(|(ll, c)| ll / c.chars().count() as f64)
                .collect(),
        };
        if argmax_first(&scores) == item.gold {
            correct += 1;
        }
        choice_ll.push(lls);
    }
    let items = choice_ll.len();
    Ok(EvalRecord {
        run: run.into(),
        task: task.header.task.clone(),
        n_shots: task.header.n_shots,
        scoring: task.header.scoring,
        accuracy: if items == 0 { 0.0 } else { correct as f64 / items as f64 },
        correct,
        items,
        skipped,
        choice_ll,
    })
}

/// Weighted mean of per-task scores (uniform when `weights` is `None`).
pub fn aggregate_scores(scores: &[(&str, f64)], weights: Option<&[f64]>) -> Result<f64, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::NoRecords);
    }
    let mut seen = BTreeSet::new();
    for (name, _) in scores {
        if !seen.insert(*name) {
            return Err(EvalError::DuplicateTask(name.to_string()));
        }
    }
    let w: Vec<f64> = match weights {
        None => vec![1.0; scores.len()],
        Some(w) if w.len() == scores.len() && w.iter().all(|&x| x >= 0.0) && w.iter().sum::<f64>() > 0.0 => w.to_vec(),
        Some(w) => return Err(EvalError::Weights(format!("{} weights for {} tasks", w.len(), scores.len()))),
    };
    let total: f64 = w.iter().sum();
    Ok(scores.iter().zip(&w).map(|((_, s), w)| s * w).sum::<f64>() / total)
}

/// Unweighted mean accuracy over records with distinct task names.
pub fn aggregate(records: &[EvalRecord]) -> Result<f64, EvalError> {
    let scores: Vec<(&str, f64)> = records.iter().map(|r| (r.task.as_str(), r.accuracy)).collect();
    aggregate_scores(&scores, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ByteTokenizer;

    #[test]
    fn uniform_closed_form() {
        let m = UniformModel {
            vocab: 256,
            context_length: 64,
        };
        let ll = score_continuation(&m, &[1, 2], &[3, 4, 5]).unwrap();
        assert!((ll + 3.0 * 256f64.ln()).abs() < 1e-12);
        assert!(matches!(score_continuation(&m, &[1], &[]), Err(EvalError::EmptyContinuation)));
    }

    #[test]
    fn dominant_logit_gives_near_zero_ll() {
        let m = MarkerModel {
            vocab: 50,
            context_length: 8,
            marker: 7,
            boost: 20.0,
        };
        let ll = score_continuation(&m, &[1], &[7]).unwrap();
        assert!(ll < 0.0 && ll > -1e-6, "{ll}");
    }

    #[test]
    fn context_is_truncated_from_the_left() {
        let m = UniformModel {
            vocab: 10,
            context_length: 4,
        };
        assert!(score_continuation(&m, &[1; 100], &[2, 3, 4]).is_ok());
        assert!(matches!(score_continuation(&m, &[1], &[2; 5]), Err(EvalError::TooLong { .. })));
        assert!(score_continuation(&m, &[1], &[2; 4]).is_ok());
        assert!(matches!(score_continuation(&m, &[], &[2]), Err(EvalError::EmptyContext)));
    }

    #[test]
    fn shots_never_include_the_item() {
        let task = synthetic_task("t", 6, 3, 5, 1);
        for i in 0..6 {
            let s = shot_indices(&task, i, 9);
            assert_eq!(s.len(), 5);
            assert!(!s.contains(&i));
            assert_eq!(s, shot_indices(&task, i, 9));
        }
    }

    #[test]
    fn jsonl_round_trip_and_schema_errors() {
        let task = synthetic_task("t", 5, 4, 1, 2);
        assert_eq!(EvalTask::parse(&task.to_jsonl()).unwrap(), task);
        let bad = "{\"task\":\"x\",\"scoring\":\"raw_ll\"}\n{\"context\":\"a\",\"choices\":[\"b\",\"c\"],\"gold\":0}\n{\"context\":\"a\",\"choices\":[\"b\"],\"gold\":0}\n";
        match EvalTask::parse(bad) {
            Err(EvalError::Schema { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(EvalTask::parse("{\"task\":\"x\",\"scoring\":\"bogus\"}\n").is_err());
    }

    #[test]
    fn aggregate_rejects_duplicates() {
        assert_eq!(aggregate_scores(&[("a", 0.4)], None).unwrap(), 0.4);
        assert!(matches!(aggregate_scores(&[("a", 0.4), ("a", 0.5)], None), Err(EvalError::DuplicateTask(_))));
        assert!(matches!(aggregate_scores(&[], None), Err(EvalError::NoRecords)));
        assert!((aggregate_scores(&[("a", 1.0), ("b", 0.0)], Some(&[3.0, 1.0])).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn oracle_is_perfect_uniform_is_chance() {
        let task = synthetic_task("mc4", 1000, 4, 0, 5);
        let tok = ByteTokenizer;
        let oracle = MarkerModel {
            vocab: 256,
            context_length: 256,
            marker: MARKER as u32,
            boost: 10.0,
        };
        assert_eq!(evaluate(&oracle, &tok, &task, 0, "oracle").unwrap().accuracy, 1.0);
        let uniform = UniformModel {
            vocab: 256,
            context_length: 256,
        };
        let r = evaluate(&uniform, &tok, &task, 0, "uniform").unwrap();
        assert!((0.21..=0.29).contains(&r.accuracy), "{}", r.accuracy);
        assert_eq!(r.items + r.skipped, 1000);
    }
}
