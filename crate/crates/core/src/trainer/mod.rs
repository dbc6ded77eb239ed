//! Deterministic single-process pretraining: AdamW with decoupled weight
//! decay, global-norm clipping, gradient accumulation, checkpoint series
//! bit-exact resumption, and architecture ablations.

mod ablate;
mod optim;
mod state;

pub use ablate::{
    ablate, ablation_arms, ablation_markdown, loss_curves_csv, top1_accuracy, AblationArm, AblationFlags, AblationSetup,
    ArmResult, ABLATION_DROPOUT,
};
pub use optim::{adamw_step, clip_global_norm, decays, global_norm, OptimConfig};
pub use state::TrainState;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Batch, BatchStream};
use crate::model::checkpoint::CheckpointError;
use crate::model::{Mode, Model, ModelError};
use crate::numerics::{NumericsError, Real, Tape, Tensor};
use crate::schedule::ScheduleError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {what} at iteration {iteration} (lr {lr:e}, grad norm {grad_norm})")]
    NonFinite {
        what: String,
        iteration: u64,
        lr: f64,
        grad_norm: f64,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("training log: {0}")]
    Log(std::io::Error),
    #[error("invalid training setup: {0}")]
    Config(String),
}

/// Which iterations write a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointPolicy {
    pub dir: Option<PathBuf>,
    /// Interval in iterations; `None` means 10% of the schedule length.
    #[serde(default)]
    pub every: Option<u64>,
}

impl CheckpointPolicy {
    pub fn none() -> Self {
        Self { dir: None, every: None }
    }

    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
            every: None,
        }
    }

    pub fn interval(&self, total_iters: u64) -> u64 {
        self.every.unwrap_or(total_iters / 10).max(1)
    }

    pub fn path_for(dir: &Path, iteration: u64) -> PathBuf {
        dir.join(format!("ckpt_{iteration:08}.rsck"))
    }
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub tokens_seen: u64,
    pub wall_ms: f64,
}

fn non_finite(what: &str, iteration: u64, lr: f64, grad_norm: f64) -> TrainError {
    TrainError::NonFinite {
        what: what.into(),
        iteration,
        lr,
        grad_norm,
    }
}

/// Mean loss and its gradients over `batch`, accumulated over micro-batches
/// of `micro_rows` rows. Each micro-batch is weighted by its share of rows,
/// so the result equals the monolithic batch up to summation order.
pub fn loss_and_grads<T: Real>(
    model: &Model<T>,
    batch: &Batch,
    micro_rows: usize,
    mut rng: Option<&mut crate::model::Rng>,
) -> Result<(f64, Vec<Tensor<T>>), ModelError> {
    let micro_rows = micro_rows.clamp(1, batch.rows);
    let mut grads: Vec<Tensor<T>> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut loss = 0.0;
    let mut start = 0;
    while start < batch.rows {
        let rows = micro_rows.min(batch.rows - start);
        let micro = batch.rows_slice(start, rows);
        let weight = rows as f64 / batch.rows as f64;
        let mut tape = Tape::new();
        let vars = model.record(&mut tape);
        let mode = match rng.as_deref_mut() {
            Some(rng) => Mode::Train { rng },
            None => Mode::Eval,
        };
        let logits = model.forward(&mut tape, &vars, &micro.inputs, rows, micro.context, mode)?;
        let l = model.loss(&mut tape, logits, &micro.targets)?;
        let out = if rows == batch.rows { l } else { tape.scale(l, T::of(weight))? };
        loss += tape.value(out).item().as_f64();
        let mut g = tape.backward(out)?;
        for (acc, v) in grads.iter_mut().zip(&vars) {
            if let Some(t) = g.take(*v) {
                acc.add_assign(&t);
            }
        }
        start += rows;
    }
    Ok((loss, grads))
}

/// Mean loss over `batches` with dropout off.
pub fn eval_loss<T: Real>(model: &Model<T>, batches: &[Batch]) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for b in batches {
        let mut tape = Tape::new();
        let vars = model.record_frozen(&mut tape);
        let logits = model.forward(&mut tape, &vars, &b.inputs, b.rows, b.context, Mode::Eval)?;
        let l = model.loss(&mut tape, logits, &b.targets)?;
        total += tape.value(l).item().as_f64();
    }
    Ok(total / batches.len().max(1) as f64)
}

/// Options for [`run`] that do not affect the numerical result except
/// `micro_batch_rows`, which changes summation order only.
pub struct RunOptions<'a> {
    pub policy: CheckpointPolicy,
    pub log: Option<&'a mut dyn Write>,
    /// Rows per micro-batch; `None` processes the whole batch at once.
    pub micro_batch_rows: Option<usize>,
    pub prefetch_depth: usize,
}

impl Default for RunOptions<'_> {
    fn default() -> Self {
        Self {
            policy: CheckpointPolicy::none(),
            log: None,
            micro_batch_rows: None,
            prefetch_depth: 2,
        }
    }
}

/// Performs one optimizer step on `batch` with `lr_at(state.iteration)`.
pub fn step(state: &mut TrainState, batch: &Batch, micro_rows: Option<usize>) -> Result<StepRecord, TrainError> {
    let started = Instant::now();
    let it = state.iteration;
    let lr = state.schedule.lr_at(it)?;
    let rows = micro_rows.unwrap_or(batch.rows);
    let (loss, mut grads) = match loss_and_grads(&state.model, batch, rows, Some(&mut state.rng)) {
        Ok(v) => v,
        Err(ModelError::Numerics(NumericsError::NonFinite { op })) => {
            return Err(non_finite(&format!("value in {op}"), it, lr, f64::NAN))
        }
        Err(e) => return Err(e.into()),
    };
    let grad_norm = clip_global_norm(&mut grads, state.optim.grad_clip);
    if !loss.is_finite() {
        return Err(non_finite("loss", it, lr, grad_norm));
    }
    if !grad_norm.is_finite() {
        return Err(non_finite("gradient", it, lr, grad_norm));
    }
    adamw_step(
        &state.optim,
        lr,
        it + 1,
        state.model.params_mut(),
        &grads,
        &mut state.adam_m,
        &mut state.adam_v,
    );
    if let Some(p) = state.model.params().iter().position(|p| !p.all_finite()) {
        let name = state.model.names()[p].clone();
        return Err(non_finite(&format!("parameter {name}"), it, lr, grad_norm));
    }
    state.iteration += 1;
    state.tokens_seen += batch.tokens() as u64;
    state.loss_history.push(loss);
    Ok(StepRecord {
        iteration: state.iteration,
        lr,
        loss,
        grad_norm,
        tokens_seen: state.tokens_seen,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Trains from `state.iteration` up to `stop` (at most the schedule length).
/// Batch `i` of `stream` feeds iteration `i`. Checkpoints are written every
/// policy interval and at `stop`; their paths are returned in order.
pub fn run(
    state: &mut TrainState,
    stream: BatchStream,
    stop: u64,
    mut opts: RunOptions<'_>,
) -> Result<Vec<PathBuf>, TrainError> {
    let total = state.schedule.total_iters;
    if stop > total {
        return Err(TrainError::Config(format!("stop {stop} beyond schedule length {total}")));
    }
    if stream.global_batch_tokens() as u64 != state.global_batch_tokens {
        return Err(TrainError::Config(format!(
            "stream batch of {} tokens, state expects {}",
            stream.global_batch_tokens(),
            state.global_batch_tokens
        )));
    }
    if stream.context() > state.model.config().context_length {
        return Err(TrainError::Config(format!(
            "stream context {} exceeds model context {}",
            stream.context(),
            state.model.config().context_length
        )));
    }
    let interval = opts.policy.interval(total);
    let mut written = Vec::new();
    let mut save = |state: &TrainState| -> Result<(), TrainError> {
        if let Some(dir) = &opts.policy.dir {
            let path = CheckpointPolicy::path_for(dir, state.iteration);
            state.save(&path)?;
            if written.last() != Some(&path) {
                written.push(path);
            }
        }
        Ok(())
    };
    let start = state.iteration;
    for batch in stream.prefetch(start, stop, opts.prefetch_depth) {
        debug_assert_eq!(batch.index, state.iteration);
        let record = step(state, &batch, opts.micro_batch_rows)?;
        if let Some(log) = opts.log.as_deref_mut() {
            serde_json::to_writer(&mut *log, &record).map_err(|e| TrainError::Log(e.into()))?;
            log.write_all(b"\n").map_err(TrainError::Log)?;
        }
        if state.iteration % interval == 0 && state.iteration != stop {
            save(state)?;
        }
    }
    save(state)?;
    if let Some(log) = opts.log.as_deref_mut() {
        log.flush().map_err(TrainError::Log)?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{pack, synthetic_shard};
    use crate::model::ModelConfig;
    use crate::schedule::ScheduleSpec;

    fn setup(total: u64) -> (TrainState, BatchStream) {
        let config = ModelConfig::named("toy").unwrap();
        let model = Model::build(&config, 3).unwrap();
        let stream = pack(&[synthetic_shard(20_000, 4, 1).unwrap()], 32, 64, 2).unwrap();
        let state = TrainState::init(model, ScheduleSpec::wsd(3e-3, 5, total), OptimConfig::default(), 64, 3, 2);
        (state, stream)
    }

    #[test]
    fn zero_iterations_checkpoint_equals_init() {
        let dir = tempfile::tempdir().unwrap();
        let (mut state, stream) = setup(20);
        let init = state.clone();
        let written = run(&mut state, stream, 0, RunOptions {
            policy: CheckpointPolicy::in_dir(dir.path()),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(written.len(), 1);
        assert!(TrainState::load(&written[0]).unwrap().bit_eq(&init));
    }

    #[test]
    fn cadence_is_ten_percent_plus_final() {
        let dir = tempfile::tempdir().unwrap();
        let (mut state, stream) = setup(20);
        let written = run(&mut state, stream, 20, RunOptions {
            policy: CheckpointPolicy::in_dir(dir.path()),
            ..Default::default()
        })
        .unwrap();
        let iters: Vec<u64> = written.iter().map(|p| TrainState::load(p).unwrap().iteration).collect();
        assert_eq!(iters, (1..=10).map(|i| 2 * i).collect::<Vec<_>>());
        assert_eq!(state.tokens_seen, 20 * 64);
    }

    #[test]
    fn log_has_one_record_per_step() {
        let (mut state, stream) = setup(6);
        let mut buf = Vec::new();
        run(&mut state, stream, 6, RunOptions {
            log: Some(&mut buf),
            ..Default::default()
        })
        .unwrap();
        let lines: Vec<StepRecord> = String::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[5].tokens_seen, 6 * 64);
        assert_eq!(lines[0].lr, 0.0);
    }

    #[test]
    fn non_finite_aborts_with_diagnostics() {
        let (mut state, stream) = setup(10);
        state.model.params_mut()[0].data_mut()[0] = f32::NAN;
        let err = run(&mut state, stream, 10, RunOptions::default()).unwrap_err();
        match err {
            TrainError::NonFinite { iteration, lr, .. } => assert_eq!((iteration, lr), (0, 0.0)),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn mismatched_config_names_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let (state, _) = setup(10);
        let path = dir.path().join("s.rsck");
        state.save(&path).unwrap();
        let other = ModelConfig {
            ffn_hidden: 64,
            ..ModelConfig::named("toy").unwrap()
        };
        let err = TrainState::load_for(&path, &other).unwrap_err().to_string();
        assert!(err.contains("layers.0.ffn.gate.weight"), "{err}");
    }
}
