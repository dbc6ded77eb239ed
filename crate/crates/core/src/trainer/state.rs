use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{OptimConfig, TrainError};
use crate::model::checkpoint::{AnyTensor, CheckpointError, Container};
use crate::model::{Model, ModelConfig, Rng};
use crate::numerics::Tensor;
use crate::schedule::ScheduleSpec;

type Float = f32;

/// Everything needed to continue a run bit-exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub iteration: u64,
    pub tokens_seen: u64,
    pub global_batch_tokens: u64,
    pub model: Model<Float>,
    pub adam_m: Vec<Tensor<Float>>,
    pub adam_v: Vec<Tensor<Float>>,
    pub rng: Rng,
    pub schedule: ScheduleSpec,
    pub optim: OptimConfig,
    pub data_seed: u64,
    /// Training loss of every completed step.
    pub loss_history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    kind: String,
    iteration: u64,
    tokens_seen: u64,
    global_batch_tokens: u64,
    model: ModelConfig,
    schedule: ScheduleSpec,
    optim: OptimConfig,
    data_seed: u64,
    rng: RngMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngMeta {
    seed: String,
    stream: u64,
    /// u128 as a decimal string; JSON numbers cannot hold it.
    word_pos: String,
}

const KIND: &str = "train_state";

impl TrainState {
    pub fn init(
        model: Model<Float>,
        schedule: ScheduleSpec,
        optim: OptimConfig,
        global_batch_tokens: u64,
        seed: u64,
        data_seed: u64,
    ) -> Self {
        let zeros: Vec<Tensor<Float>> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            iteration: 0,
            tokens_seen: 0,
            global_batch_tokens,
            adam_m: zeros.clone(),
            adam_v: zeros,
            model,
            // dropout stream is separate from the init stream
            rng: {
                let mut r = Rng::seed_from_u64(seed);
                r.set_stream(1);
                r
            },
            schedule,
            optim,
            data_seed,
            loss_history: Vec::new(),
        }
    }

    pub fn to_container(&self) -> Container {
        let meta = Meta {
            kind: KIND.into(),
            iteration: self.iteration,
            tokens_seen: self.tokens_seen,
            global_batch_tokens: self.global_batch_tokens,
            model: self.model.config().clone(),
            schedule: self.schedule.clone(),
            optim: self.optim.clone(),
            data_seed: self.data_seed,
            rng: RngMeta {
                seed: hex::encode(self.rng.get_seed()),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos().to_string(),
            },
        };
        let mut tensors = Vec::with_capacity(3 * self.adam_m.len() + 1);
        for (prefix, list) in [("param", self.model.params()), ("adam_m", &self.adam_m), ("adam_v", &self.adam_v)] {
            for (name, t) in self.model.names().iter().zip(list) {
                tensors.push((format!("{prefix}/{name}"), AnyTensor::F32(t.clone())));
            }
        }
        let history = Tensor::new(vec![self.loss_history.len()], self.loss_history.clone()).expect("1-d");
        tensors.push(("loss_history".into(), AnyTensor::F64(history)));
        Container {
            meta: serde_json::to_string(&meta).expect("meta serializes"),
            tensors,
        }
    }

    pub fn from_container(c: Container) -> Result<Self, TrainError> {
        let malformed = |m: String| TrainError::Checkpoint(CheckpointError::Malformed(m));
        let meta: Meta = serde_json::from_str(&c.meta).map_err(|e| malformed(format!("meta: {e}")))?;
        if meta.kind != KIND {
            return Err(malformed(format!("expected {KIND}, found {}", meta.kind)));
        }
        let mut groups: [Vec<(String, Tensor<Float>)>; 3] = Default::default();
        let mut history = None;
        for (name, t) in c.tensors {
            if name == "loss_history" {
                history = Some(
                    t.into_real::<f64>()
                        .ok_or_else(|| malformed("loss_history must be f64".into()))?
                        .into_data(),
                );
                continue;
            }
            let (prefix, rest) = name
                .split_once('/')
                .ok_or_else(|| malformed(format!("unexpected tensor {name}")))?;
            let slot = match prefix {
                "param" => 0,
                "adam_m" => 1,
                "adam_v" => 2,
                _ => return Err(malformed(format!("unexpected tensor {name}"))),
            };
            let t = t
                .into_real::<Float>()
                .ok_or_else(|| malformed(format!("{name} must be f32")))?;
            groups[slot].push((rest.to_string(), t));
        }
        let [params, m, v] = groups;
        let model = Model::from_named(&meta.model, params)
            .map_err(|e| TrainError::Checkpoint(CheckpointError::Mismatch(e.to_string())))?;
        let moments = |list: Vec<(String, Tensor<Float>)>, which: &str| -> Result<Vec<Tensor<Float>>, TrainError> {
            if list.len() != model.names().len() {
                return Err(malformed(format!("{which}: {} tensors, model has {}", list.len(), model.names().len())));
            }
            list.into_iter()
                .zip(model.names().iter().zip(model.params()))
                .map(|((n, t), (want, p))| {
                    if &n != want || t.shape() != p.shape() {
                        Err(TrainError::Checkpoint(CheckpointError::Mismatch(format!("{which}/{n} vs {want}"))))
                    } else {
                        Ok(t)
                    }
                })
                .collect()
        };
        let adam_m = moments(m, "adam_m")?;
        let adam_v = moments(v, "adam_v")?;
        let seed: [u8; 32] = hex::decode(&meta.rng.seed)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| malformed("rng seed".into()))?;
        let mut rng = Rng::from_seed(seed);
        rng.set_stream(meta.rng.stream);
        rng.set_word_pos(meta.rng.word_pos.parse().map_err(|_| malformed("rng word_pos".into()))?);
        Ok(Self {
            iteration: meta.iteration,
            tokens_seen: meta.tokens_seen,
            global_batch_tokens: meta.global_batch_tokens,
            model,
            adam_m,
            adam_v,
            rng,
            schedule: meta.schedule,
            optim: meta.optim,
            data_seed: meta.data_seed,
            loss_history: history.ok_or_else(|| malformed("missing loss_history".into()))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_container(Container::load(path)?)
    }

    /// Loads a checkpoint and checks it against the expected architecture.
    pub fn load_for(path: &Path, config: &ModelConfig) -> Result<Self, TrainError> {
        let c = Container::load(path)?;
        let meta: Meta = serde_json::from_str(&c.meta)
            .map_err(|e| TrainError::Checkpoint(CheckpointError::Malformed(format!("meta: {e}"))))?;
        if &meta.model != config {
            // report the first tensor that differs, not just the config
            let expected = config.param_shapes();
            let found = meta.model.param_shapes();
            let first = expected
                .iter()
                .zip(found.iter().map(Some).chain(std::iter::repeat(None)))
                .find(|(e, f)| Some(*e) != *f)
                .map(|(e, f)| match f {
                    Some(f) => format!("tensor {} expected {:?}, found {} {:?}", e.0, e.1, f.0, f.1),
                    None => format!("tensor {} missing", e.0),
                })
                .unwrap_or_else(|| "model config differs (hyperparameters only)".into());
            return Err(TrainError::Checkpoint(CheckpointError::Mismatch(first)));
        }
        Self::from_container(c)
    }

    /// Bitwise equality of every tensor and counter.
    pub fn bit_eq(&self, other: &TrainState) -> bool {
        self.to_container().encode() == other.to_container().encode()
    }
}
