use std::path::{Path, PathBuf};

use refscale::data::{ByteTokenizer, Tokenizer};
use refscale::evals::{aggregate, evaluate, EvalRecord, EvalTask};
use refscale::trainer::TrainState;
use serde::Serialize;

use crate::{emit, runtime, usage, write_file, CliError, EvalArgs};

/// Closing line for one checkpoint: the unweighted mean over its tasks.
#[derive(Debug, Serialize)]
struct AggregateRecord<'a> {
    run: &'a str,
    task: &'static str,
    iteration: u64,
    tokens_seen: u64,
    tasks: usize,
    average: f64,
}

fn checkpoints_in(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| usage(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("ckpt_") && n.ends_with(".rsck"))
        })
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(usage(format!("no ckpt_*.rsck files in {}", dir.display())));
    }
    Ok(out)
}

pub fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let tasks: Vec<EvalTask> = args
        .tasks
        .iter()
        .map(|p| EvalTask::load(p).map_err(|e| usage(format!("{}: {e}", p.display()))))
        .collect::<Result<_, _>>()?;
    let is_dir = args.checkpoint.is_dir();
    let paths = if is_dir {
        checkpoints_in(&args.checkpoint)?
    } else if args.checkpoint.is_file() {
        vec![args.checkpoint.clone()]
    } else {
        return Err(usage(format!("{}: no such checkpoint", args.checkpoint.display())));
    };
    let tokenizer = ByteTokenizer;
    let vocab = tokenizer.vocab().padded_size as usize;

    let mut jsonl = String::new();
    let mut dynamics = String::from("checkpoint,iteration,tokens_seen,average\n");
    for path in &paths {
        let state = TrainState::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        if state.model.config().vocab != vocab {
            return Err(usage(format!(
                "{}: model vocab {} does not match the byte tokenizer ({vocab})",
                path.display(),
                state.model.config().vocab
            )));
        }
        let run = path.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
        let records: Vec<EvalRecord> = tasks
            .iter()
            .map(|t| evaluate(&state.model, &tokenizer, t, args.seed, run).map_err(runtime))
            .collect::<Result<_, _>>()?;
        let average = aggregate(&records).map_err(usage)?;
        for r in &records {
            jsonl.push_str(&serde_json::to_string(r).expect("serializes"));
            jsonl.push('\n');
        }
        let agg = AggregateRecord {
            run,
            task: "aggregate",
            iteration: state.iteration,
            tokens_seen: state.tokens_seen,
            tasks: records.len(),
            average,
        };
        jsonl.push_str(&serde_json::to_string(&agg).expect("serializes"));
        jsonl.push('\n');
        dynamics.push_str(&format!("{run},{},{},{average}\n", state.iteration, state.tokens_seen));
    }
    emit(args.out.as_deref(), &jsonl)?;
    let dynamics_path = args
        .dynamics
        .clone()
        .or_else(|| is_dir.then(|| args.checkpoint.join("dynamics.csv")));
    if let Some(p) = dynamics_path {
        write_file(&p, &dynamics)?;
    }
    Ok(())
}
