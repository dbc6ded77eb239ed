use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use refscale::compare::points_jsonl;
use refscale::data::{pack, Batch, BatchStream};
use refscale::model::{count_params, Model, ModelConfig};
use refscale::schedule::ScheduleSpec;
use refscale::trainer::{
    ablate, ablation_markdown, eval_loss, loss_curves_csv, run, AblationFlags, AblationSetup, CheckpointPolicy, OptimConfig,
    RunOptions, TrainError, TrainState,
};
use serde::Serialize;

use crate::manifest::RunManifest;
use crate::{runtime, usage, write_file, AblateArgs, CliError, TrainArgs};

/// Post-resolution inputs of a run; building one touches no output paths.
pub struct Prepared {
    pub config: ModelConfig,
    pub schedule: ScheduleSpec,
    pub optim: OptimConfig,
    pub stream: BatchStream,
    pub heldout: Vec<Batch>,
    pub dataset: String,
    pub seed: u64,
    pub micro_batch_rows: Option<usize>,
    pub checkpoint_every: Option<u64>,
}

impl Prepared {
    pub fn init_state(&self) -> Result<TrainState, CliError> {
        let model = Model::build(&self.config, self.seed).map_err(usage)?;
        Ok(TrainState::init(
            model,
            self.schedule.clone(),
            self.optim.clone(),
            self.stream.global_batch_tokens() as u64,
            self.seed,
            self.seed,
        ))
    }

    pub fn heldout_loss(&self, state: &TrainState) -> Result<f64, CliError> {
        eval_loss(&state.model, &self.heldout).map_err(runtime)
    }
}

/// Resolves configs and loads the corpus. Every failure is a usage error.
pub fn prepare(m: &RunManifest) -> Result<Prepared, CliError> {
    let config = m.model.resolve()?;
    if m.data.context > config.context_length {
        return Err(usage(format!("data context {} exceeds model context {}", m.data.context, config.context_length)));
    }
    let schedule = m.schedule.resolve(m.data.global_batch_tokens as u64)?;
    let corpus = m.load_corpus()?;
    for s in corpus.train.iter().chain(&corpus.heldout) {
        if s.header.vocab_size as usize > config.vocab {
            return Err(usage(format!("corpus vocab {} exceeds model vocab {}", s.header.vocab_size, config.vocab)));
        }
    }
    let stream = pack(&corpus.train, m.data.context, m.data.global_batch_tokens, m.seed).map_err(usage)?;
    let heldout = if corpus.heldout.is_empty() || m.data.heldout_batches == 0 {
        Vec::new()
    } else {
        let mut hs = pack(&corpus.heldout, m.data.context, m.data.global_batch_tokens, m.seed).map_err(usage)?;
        (0..m.data.heldout_batches).map(|k| hs.batch(k)).collect()
    };
    Ok(Prepared {
        config,
        schedule,
        optim: m.optim.clone(),
        stream,
        heldout,
        dataset: corpus.dataset,
        seed: m.seed,
        micro_batch_rows: m.data.micro_batch_rows,
        checkpoint_every: m.checkpoint_every,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainOutcome {
    pub run_id: String,
    pub params: u64,
    pub iterations: u64,
    pub tokens_seen: u64,
    pub initial_heldout_loss: Option<f64>,
    pub final_heldout_loss: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub checkpoints: Vec<PathBuf>,
}

const LOG_NAME: &str = "train_log.jsonl";
const OUTPUTS: [&str; 3] = ["manifest.toml", LOG_NAME, "summary.json"];

fn apply_overrides(m: &mut RunManifest, args: &TrainArgs) {
    if let Some(seed) = args.seed {
        m.seed = seed;
    }
    if let Some(id) = &args.run_id {
        m.run_id = id.clone();
    }
    if let Some(dir) = &args.output_dir {
        m.output_dir = dir.clone();
    }
    if let Some(iters) = args.iters {
        m.schedule.total_iters = Some(iters);
        m.schedule.tokens = None;
    }
}

fn clear_run_dir(dir: &Path) -> Result<(), CliError> {
    let entries = fs::read_dir(dir).map_err(runtime)?;
    for e in entries {
        let path = e.map_err(runtime)?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if OUTPUTS.contains(&name) || (name.starts_with("ckpt_") && name.ends_with(".rsck")) {
            fs::remove_file(&path).map_err(runtime)?;
        }
    }
    Ok(())
}

/// Trains per manifest into `m.run_dir()`. Writes `manifest.toml`, the JSONL
/// log, checkpoints and `summary.json`; a failure appends an `error` record
/// to the log before returning.
pub fn train(m: &RunManifest, resume: Option<&Path>, stop: Option<u64>, overwrite: bool) -> Result<TrainOutcome, CliError> {
    let prep = prepare(m)?;
    let mut state = match resume {
        Some(p) => {
            let s = TrainState::load_for(p, &prep.config).map_err(usage)?;
            if s.schedule != prep.schedule || s.global_batch_tokens != prep.stream.global_batch_tokens() as u64 {
                return Err(usage(format!("{} was written by a run with a different schedule or batch size", p.display())));
            }
            s
        }
        None => prep.init_state()?,
    };
    let stop = stop.unwrap_or(prep.schedule.total_iters);
    if stop > prep.schedule.total_iters || stop < state.iteration {
        return Err(usage(format!("stop {stop} outside {}..={}", state.iteration, prep.schedule.total_iters)));
    }
    let dir = m.run_dir();
    if dir.join("manifest.toml").exists() && resume.is_none() {
        if !overwrite {
            return Err(usage(format!("run {} already exists in {} (use --overwrite)", m.run_id, dir.display())));
        }
        clear_run_dir(&dir)?;
    }
    fs::create_dir_all(&dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    write_file(&dir.join("manifest.toml"), &m.to_toml())?;

    let initial_heldout_loss = match (state.iteration, prep.heldout.is_empty()) {
        (0, false) => Some(prep.heldout_loss(&state)?),
        _ => None,
    };
    // the log is assembled beside the final path and renamed when complete
    let log_path = dir.join(LOG_NAME);
    let tmp_log = dir.join(format!("{LOG_NAME}.tmp"));
    if resume.is_some() && log_path.exists() {
        fs::copy(&log_path, &tmp_log).map_err(runtime)?;
    }
    let file = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&tmp_log)
        .map_err(|e| runtime(format!("{}: {e}", tmp_log.display())))?;
    let mut log = BufWriter::new(file);
    let result = run(&mut state, prep.stream.clone(), stop, RunOptions {
        policy: CheckpointPolicy {
            dir: Some(dir.clone()),
            every: prep.checkpoint_every,
        },
        log: Some(&mut log),
        micro_batch_rows: prep.micro_batch_rows,
        prefetch_depth: 2,
    });
    let checkpoints = match result {
        Ok(c) => c,
        Err(e) => {
            let record = serde_json::json!({ "error": e.to_string(), "iteration": state.iteration });
            let _ = writeln!(log, "{record}").and_then(|_| log.flush());
            drop(log);
            let _ = fs::rename(&tmp_log, &log_path);
            return Err(match e {
                TrainError::Config(msg) => CliError::Usage(msg),
                other => runtime(other),
            });
        }
    };
    log.flush().map_err(runtime)?;
    drop(log);
    fs::rename(&tmp_log, &log_path).map_err(runtime)?;

    let outcome = TrainOutcome {
        run_id: m.run_id.clone(),
        params: count_params(&prep.config).total(),
        iterations: state.iteration,
        tokens_seen: state.tokens_seen,
        initial_heldout_loss,
        final_heldout_loss: if prep.heldout.is_empty() { None } else { Some(prep.heldout_loss(&state)?) },
        final_train_loss: state.loss_history.last().copied(),
        checkpoints,
    };
    write_file(&dir.join("summary.json"), &serde_json::to_string_pretty(&outcome).expect("serializes"))?;
    Ok(outcome)
}

pub fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut m = RunManifest::load(&args.manifest)?;
    apply_overrides(&mut m, &args);
    let outcome = train(&m, args.resume.as_deref(), args.stop, args.overwrite)?;
    println!("{}", serde_json::to_string_pretty(&outcome).expect("serializes"));
    Ok(())
}

pub fn cmd_ablate(args: AblateArgs) -> Result<(), CliError> {
    let mut m = RunManifest::load(&args.manifest)?;
    if let Some(seed) = args.seed {
        m.seed = seed;
    }
    if let Some(iters) = args.iters {
        m.schedule.total_iters = Some(iters);
        m.schedule.tokens = None;
    }
    let base = m.ablation.unwrap_or_default();
    let flags = AblationFlags {
        biases: base.biases || args.biases,
        qk_norm: base.qk_norm || args.qk_norm,
        dropout: base.dropout || args.dropout,
    };
    if flags == AblationFlags::default() {
        return Err(usage("no ablation flag set (--biases, --qk-norm, --dropout)"));
    }
    let prep = prepare(&m)?;
    if prep.heldout.is_empty() {
        return Err(usage("ablation needs held-out batches (heldout_fraction > 0)"));
    }
    let out = args.out.unwrap_or_else(|| m.run_dir().join("ablation"));
    let setup = AblationSetup {
        base: prep.config.clone(),
        schedule: prep.schedule.clone(),
        optim: prep.optim.clone(),
        stream: &prep.stream,
        heldout: &prep.heldout,
        seed: prep.seed,
        dataset: prep.dataset.clone(),
    };
    let results = ablate(&setup, flags).map_err(|e| match e {
        TrainError::Config(msg) => CliError::Usage(msg),
        other => runtime(other),
    })?;
    let points: Vec<_> = results.iter().map(|r| r.point.clone()).collect();
    write_file(&out.join("loss_curves.csv"), &loss_curves_csv(&results))?;
    write_file(&out.join("points.jsonl"), &points_jsonl(&points))?;
    let summary = ablation_markdown(&results);
    write_file(&out.join("ablation.md"), &summary)?;
    print!("{summary}");
    Ok(())
}
