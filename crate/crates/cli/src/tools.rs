use std::path::PathBuf;

use refscale::data::{synthetic_shard, ByteTokenizer, CorpusManifest, TokenShard, Tokenizer};
use refscale::evals::synthetic_task;
use refscale::ledger::{records_csv, records_markdown, round_sig, ComputeRecord};
use refscale::schedule::{curve_csv, plan_from_budget, ScheduleKind, ScheduleSpec};
use serde::{Deserialize, Serialize};

use crate::{emit, usage, write_file, CliError, Format, LedgerArgs, ScheduleArgs, ShardCmd, TaskCmd};

#[derive(Serialize)]
struct ShardReport {
    path: PathBuf,
    vocab_size: u32,
    eod_id: u32,
    fingerprint: String,
    tokens: usize,
    documents: usize,
    max_token: Option<u32>,
}

pub fn shard(cmd: ShardCmd) -> Result<(), CliError> {
    match cmd {
        ShardCmd::Inspect { path } => {
            let s = TokenShard::load(&path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            let report = ShardReport {
                vocab_size: s.header.vocab_size,
                eod_id: s.header.eod_id,
                fingerprint: s.header.fingerprint.to_hex(),
                tokens: s.len(),
                documents: s.documents().len(),
                max_token: s.tokens().iter().copied().max(),
                path,
            };
            println!("{}", serde_json::to_string_pretty(&report).expect("serializes"));
        }
        ShardCmd::Synth { tokens, fanout, seed, out } => {
            if fanout == 0 {
                return Err(usage("fanout must be positive"));
            }
            let shard = synthetic_shard(tokens as usize, fanout, seed).map_err(usage)?;
            std::fs::create_dir_all(&out).map_err(|e| usage(format!("{}: {e}", out.display())))?;
            let name = PathBuf::from("shard_0000.rstk");
            shard.save(&out.join(&name)).map_err(crate::runtime)?;
            let manifest = CorpusManifest {
                dataset: format!("markov-f{fanout}-s{seed}"),
                tokenizer: "byte".into(),
                fingerprint: ByteTokenizer.vocab().fingerprint,
                shards: vec![name],
            };
            manifest.save(&out.join("corpus.json")).map_err(crate::runtime)?;
            println!("{}", out.join("corpus.json").display());
        }
    }
    Ok(())
}

pub fn task(cmd: TaskCmd) -> Result<(), CliError> {
    let TaskCmd::Synth {
        name,
        items,
        choices,
        shots,
        seed,
        out,
    } = cmd;
    if items == 0 || choices < 2 || shots >= items {
        return Err(usage("need items > shots and at least two choices"));
    }
    emit(out.as_deref(), &synthetic_task(&name, items, choices, shots, seed).to_jsonl())
}

/// One input row of `ledger --table`; unknown fields are ignored so RunPoint
/// files can be fed directly.
#[derive(Deserialize)]
struct LedgerRow {
    params: f64,
    tokens: f64,
    #[serde(default)]
    gpus: Option<u64>,
    #[serde(default)]
    tokens_per_gpu_s: Option<f64>,
}

fn number(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e6 {
        format!("{x}")
    } else {
        format!("{:e}", round_sig(x, 12))
    }
}

pub fn ledger(args: LedgerArgs) -> Result<(), CliError> {
    let records: Vec<ComputeRecord> = match &args.table {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            let mut out = Vec::new();
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let row: LedgerRow =
                    serde_json::from_str(line).map_err(|e| usage(format!("{} line {}: {e}", path.display(), i + 1)))?;
                let mut r = ComputeRecord::new(row.params, row.tokens).map_err(|e| usage(format!("line {}: {e}", i + 1)))?;
                if let (Some(g), Some(t)) = (row.gpus, row.tokens_per_gpu_s) {
                    r = r.with_throughput(g, t).map_err(|e| usage(format!("line {}: {e}", i + 1)))?;
                }
                out.push(r);
            }
            if out.is_empty() {
                return Err(usage(format!("{}: no rows", path.display())));
            }
            out
        }
        None => {
            let (n, d) = (args.params.expect("clap"), args.tokens.expect("clap"));
            let mut r = ComputeRecord::new(n, d).map_err(usage)?;
            if let (Some(g), Some(t)) = (args.gpus, args.tokens_per_gpu_s) {
                r = r.with_throughput(g, t).map_err(usage)?;
            }
            vec![r]
        }
    };
    let text = match args.format {
        Format::Csv => records_csv(&records),
        Format::Md => records_markdown(&records),
        Format::Json => records
            .iter()
            .map(|r| serde_json::to_string(r).expect("serializes") + "\n")
            .collect(),
        Format::Text => records
            .iter()
            .map(|r| {
                let mut s = format!(
                    "params {}\ntokens {}\nflops_per_token {}\ntotal_compute {}\n",
                    number(r.params),
                    number(r.tokens),
                    number(r.flops_per_token),
                    number(r.total_flops)
                );
                if let Some(h) = r.run_hours {
                    s.push_str(&format!("run_hours {h:.2}\n"));
                }
                s
            })
            .collect::<Vec<_>>()
            .join("\n"),
    };
    emit(args.out.as_deref(), &text)
}

pub fn schedule(args: ScheduleArgs) -> Result<(), CliError> {
    let kind = if args.wsd { ScheduleKind::Wsd } else { ScheduleKind::Cosine };
    let spec = match (args.tokens, args.iters) {
        (Some(tokens), _) => {
            plan_from_budget(tokens, args.gbs.expect("clap"), args.lr, args.warmup, kind).map_err(usage)?
        }
        (None, Some(iters)) => match kind {
            ScheduleKind::Wsd => ScheduleSpec::wsd(args.lr, args.warmup, iters),
            ScheduleKind::Cosine => ScheduleSpec::cosine(args.lr, args.warmup, iters),
        },
        (None, None) => unreachable!("clap requires one"),
    };
    spec.validate().map_err(usage)?;
    println!("kind {}", if args.wsd { "wsd" } else { "cosine" });
    println!("total_iters {}", spec.total_iters);
    println!("warmup_iters {}", spec.warmup_iters);
    if kind == ScheduleKind::Wsd {
        println!("cooldown_iters {}", spec.cooldown_iters);
    }
    println!("peak_lr {:e}", spec.peak_lr);
    if let Some(path) = &args.csv {
        write_file(path, &curve_csv(&spec))?;
    }
    Ok(())
}
