//! TOML run manifests.
//!
//! A relative corpus path resolves against the manifest's directory. A
//! relative `output_dir` resolves against `REFSCALE_OUTPUT_ROOT`, or the
//! working directory when that is unset.

use std::path::{Path, PathBuf};

use refscale::data::{split_holdout, synthetic_shard, CorpusManifest, TokenShard};
use refscale::model::ModelConfig;
use refscale::schedule::{plan_from_budget, ScheduleKind, ScheduleSpec};
use refscale::trainer::{AblationFlags, OptimConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const OUTPUT_ROOT_ENV: &str = "REFSCALE_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub run_id: String,
    /// Sole source of randomness: init, dropout, packing order and split.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelRef,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
    pub corpus: CorpusSource,
    #[serde(default)]
    pub optim: OptimConfig,
    /// Checkpoint interval; absent means 10% of the schedule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationFlags>,
}

/// A preset name with optional dropout override, or a full config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Named {
        named: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dropout_p: Option<f64>,
    },
    Inline(ModelConfig),
}

impl ModelRef {
    pub fn resolve(&self) -> Result<ModelConfig, CliError> {
        let config = match self {
            ModelRef::Named { named, dropout_p } => {
                let mut c = ModelConfig::named(named).ok_or_else(|| CliError::Usage(format!("unknown model preset {named:?}")))?;
                if let Some(p) = dropout_p {
                    c.dropout_p = *p;
                }
                c
            }
            ModelRef::Inline(c) => c.clone(),
        };
        config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(config)
    }
}

/// Either an explicit length or a token budget to derive it from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub peak_lr: f64,
    pub warmup_iters: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_iters: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<u64>,
}

impl ScheduleConfig {
    pub fn resolve(&self, global_batch_tokens: u64) -> Result<ScheduleSpec, CliError> {
        let spec = match (self.total_iters, self.tokens) {
            (Some(total), None) => match self.kind {
                ScheduleKind::Wsd => ScheduleSpec::wsd(self.peak_lr, self.warmup_iters, total),
                ScheduleKind::Cosine => ScheduleSpec::cosine(self.peak_lr, self.warmup_iters, total),
            },
            (None, Some(tokens)) => plan_from_budget(tokens, global_batch_tokens, self.peak_lr, self.warmup_iters, self.kind)
                .map_err(|e| CliError::Usage(e.to_string()))?,
            _ => return Err(CliError::Usage("schedule needs exactly one of total_iters and tokens".into())),
        };
        spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub context: usize,
    pub global_batch_tokens: usize,
    /// Share of documents held out for evaluation.
    #[serde(default = "default_heldout")]
    pub heldout_fraction: f64,
    /// Number of held-out batches scored after training.
    #[serde(default = "default_heldout_batches")]
    pub heldout_batches: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub micro_batch_rows: Option<usize>,
}

fn default_heldout() -> f64 {
    0.05
}
fn default_heldout_batches() -> u64 {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    /// Path to a JSON corpus manifest.
    Manifest(PathBuf),
    /// Generated Markov corpus; `seed` is part of the corpus identity.
    Synthetic { tokens: usize, fanout: usize, seed: u64 },
}

/// Training and held-out shards plus the dataset label.
pub struct LoadedCorpus {
    pub dataset: String,
    pub train: Vec<TokenShard>,
    pub heldout: Vec<TokenShard>,
}

impl RunManifest {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let m: Self = toml::from_str(text).map_err(|e| CliError::Usage(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let mut m = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let CorpusSource::Manifest(p) = &mut m.corpus {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    fn validate(&self) -> Result<(), CliError> {
        let ok = !self.run_id.is_empty()
            && self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
            && !self.run_id.starts_with('.');
        if !ok {
            return Err(CliError::Usage(format!("run_id {:?} must be a plain file name", self.run_id)));
        }
        if !(0.0..1.0).contains(&self.data.heldout_fraction) {
            return Err(CliError::Usage(format!("heldout_fraction {} not in [0, 1)", self.data.heldout_fraction)));
        }
        self.optim.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(())
    }

    /// `<root>/<output_dir>/<run_id>`.
    pub fn run_dir(&self) -> PathBuf {
        let base = match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(&self.output_dir),
            None => self.output_dir.clone(),
        };
        base.join(&self.run_id)
    }

    pub fn load_corpus(&self) -> Result<LoadedCorpus, CliError> {
        let (dataset, shards) = match &self.corpus {
            CorpusSource::Manifest(path) => {
                let cm = CorpusManifest::load(path).map_err(|e| CliError::Usage(e.to_string()))?;
                let shards = cm.load_shards(path).map_err(|e| CliError::Usage(e.to_string()))?;
                (cm.dataset, shards)
            }
            CorpusSource::Synthetic { tokens, fanout, seed } => {
                let shard = synthetic_shard(*tokens, *fanout, *seed).map_err(|e| CliError::Usage(e.to_string()))?;
                (format!("markov-f{fanout}-s{seed}"), vec![shard])
            }
        };
        if self.data.heldout_fraction == 0.0 {
            return Ok(LoadedCorpus {
                dataset,
                train: shards,
                heldout: Vec::new(),
            });
        }
        let (mut train, mut heldout) = (Vec::new(), Vec::new());
        for s in &shards {
            let (t, h) = split_holdout(s, self.data.heldout_fraction, self.seed).map_err(|e| CliError::Usage(e.to_string()))?;
            train.push(t);
            heldout.push(h);
        }
        Ok(LoadedCorpus { dataset, train, heldout })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = include_str!("../../../configs/toy.toml");

    #[test]
    fn shipped_toy_manifest_round_trips() {
        let m = RunManifest::parse(TOY).unwrap();
        assert_eq!(RunManifest::parse(&m.to_toml()).unwrap(), m);
        let config = m.model.resolve().unwrap();
        assert_eq!(config, ModelConfig {
            dropout_p: 0.0,
            ..ModelConfig::named("toy-2m").unwrap()
        });
        let spec = m.schedule.resolve(m.data.global_batch_tokens as u64).unwrap();
        assert_eq!((spec.kind, spec.total_iters), (ScheduleKind::Wsd, 500));
    }

    #[test]
    fn rejects_bad_fields() {
        assert!(RunManifest::parse(&TOY.replace("run_id = \"toy\"", "run_id = \"../x\"")).is_err());
        assert!(RunManifest::parse(&format!("{TOY}\nunknown = 1\n")).is_err());
        let m = RunManifest::parse(TOY).unwrap();
        let both = ScheduleConfig {
            tokens: Some(1000),
            ..m.schedule.clone()
        };
        assert!(both.resolve(512).is_err());
    }

    #[test]
    fn inline_model_and_budget_schedule() {
        let text = TOY.replace("[model]\nnamed = \"toy-2m\"\ndropout_p = 0.0", &format!("[model]\n{}", toml::to_string(&ModelConfig::named("toy").unwrap()).unwrap()));
        let m = RunManifest::parse(&text).unwrap();
        assert_eq!(m.model.resolve().unwrap(), ModelConfig::named("toy").unwrap());
        let budget = ScheduleConfig {
            total_iters: None,
            tokens: Some(512 * 100),
            ..m.schedule
        };
        assert_eq!(budget.resolve(512).unwrap().total_iters, 100);
    }
}
