//! Task files: JSON Lines, a header object followed by one object per item.
//!
//! ```text
//! {"task": "copa", "n_shots": 0, "scoring": "raw_ll", "template": "{context}{answer}", "separator": "\n\n"}
//! {"context": "...", "choices": ["...", "..."], "gold": 1}
//! {"context": "...", "choices": ["...", "..."], "gold": 0, "shot_pool": true}
//! ```
//!
//! Items flagged `shot_pool` are only used as few-shot examples. Without any,
//! shots are drawn from the other scored items.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    RawLl,
    /// Log-likelihood divided by the continuation's character count.
    LengthNormalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskHeader {
    pub task: String,
    #[serde(default)]
    pub n_shots: usize,
    pub scoring: Scoring,
    /// Must contain `{context}` before `{answer}`.
    #[serde(default = "default_template")]
    pub template: String,
    #[serde(default = "default_separator")]
    pub separator: String,
}

fn default_template() -> String {
    "{context}{answer}".into()
}

fn default_separator() -> String {
    "\n\n".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskItem {
    pub context: String,
    pub choices: Vec<String>,
    pub gold: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub shot_pool: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalTask {
    pub header: TaskHeader,
    /// Scored items.
    pub items: Vec<TaskItem>,
    /// Dedicated few-shot examples.
    pub shot_pool: Vec<TaskItem>,
}

fn check_item(item: &TaskItem, line: usize) -> Result<(), EvalError> {
    let fail = |m: String| Err(EvalError::Schema { line, message: m });
    if item.choices.len() < 2 {
        return fail(format!("{} choices, need at least 2", item.choices.len()));
    }
    if item.gold >= item.choices.len() {
        return fail(format!("gold {} out of range for {} choices", item.gold, item.choices.len()));
    }
    if let Some(i) = item.choices.iter().position(String::is_empty) {
        return fail(format!("choice {i} is empty"));
    }
    Ok(())
}

impl TaskHeader {
    /// Template text before and after `{answer}`.
    pub fn split_template(&self) -> Result<(&str, &str), String> {
        let (pre, post) = self
            .template
            .split_once("{answer}")
            .ok_or_else(|| "template lacks {answer}".to_string())?;
        if !pre.contains("{context}") {
            return Err("template lacks {context} before {answer}".into());
        }
        Ok((pre, post))
    }
}

impl EvalTask {
    /// Parses JSONL text; line numbers in errors are 1-based.
    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hl, first) = lines.next().ok_or(EvalError::Schema {
            line: 1,
            message: "empty task file".into(),
        })?;
        let header: TaskHeader = serde_json::from_str(first).map_err(|e| EvalError::Schema {
            line: hl + 1,
            message: format!("header: {e}"),
        })?;
        header.split_template().map_err(|message| EvalError::Schema { line: hl + 1, message })?;
        let (mut items, mut shot_pool) = (Vec::new(), Vec::new());
        for (i, l) in lines {
            let item: TaskItem = serde_json::from_str(l).map_err(|e| EvalError::Schema {
                line: i + 1,
                message: e.to_string(),
            })?;
            check_item(&item, i + 1)?;
            if item.shot_pool {
                shot_pool.push(item);
            } else {
                items.push(item);
            }
        }
        if items.is_empty() {
            return Err(EvalError::Schema {
                line: hl + 1,
                message: "task has no scored items".into(),
            });
        }
        let available = if shot_pool.is_empty() { items.len() - 1 } else { shot_pool.len() };
        if header.n_shots > available {
            return Err(EvalError::Schema {
                line: hl + 1,
                message: format!("{} shots requested, pool has {available}", header.n_shots),
            });
        }
        Ok(Self {
            header,
            items,
            shot_pool,
        })
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::parse(&text)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for item in self.items.iter().chain(&self.shot_pool) {
            out.push_str(&serde_json::to_string(item).expect("item serializes"));
            out.push('\n');
        }
        out
    }
}

/// The byte that marks gold answers in [`synthetic_task`].
pub const MARKER: char = '@';

/// A task of `n_items` random items with `n_choices` equal-length choices.
/// The gold choice (uniformly placed) starts with [`MARKER`]; distractors
/// are plain lowercase.
pub fn synthetic_task(name: &str, n_items: usize, n_choices: usize, n_shots: usize, seed: u64) -> EvalTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let word = |rng: &mut ChaCha8Rng, len: usize| -> String {
        (0..len).map(|_| (b'a' + rng.random_range(0..26u8)) as char).collect()
    };
    let items = (0..n_items)
        .map(|_| {
            let ctx_words = rng.random_range(2..6);
            let context = (0..ctx_words)
                .map(|_| {
                    let l = rng.random_range(2..7);
                    word(&mut rng, l)
                })
                .collect::<Vec<_>>()
                .join(" ");
            let len = rng.random_range(3..7);
            let gold = rng.random_range(0..n_choices);
            let choices = (0..n_choices)
                .map(|c| {
                    let w = word(&mut rng, len);
                    if c == gold {
                        format!("{MARKER}{}", &w[1..])
                    } else {
                        w
                    }
                })
                .collect();
            TaskItem {
                context,
                choices,
                gold,
                shot_pool: false,
            }
        })
        .collect();
    EvalTask {
        header: TaskHeader {
            task: name.into(),
            n_shots,
            scoring: Scoring::RawLl,
            template: "Q: {context}\nA: {answer}".into(),
            separator: default_separator(),
        },
        items,
        shot_pool: Vec::new(),
    }
}
