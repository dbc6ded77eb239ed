use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const BIN: &str = env!("CARGO_BIN_EXE_refscale");

fn refscale(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("REFSCALE_OUTPUT_ROOT").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name).display().to_string()
}

fn sha(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

/// Small manifest: 2-layer toy model, 20 iterations of 64 tokens.
fn tiny_manifest(dir: &Path, run_id: &str, extra: &str) -> PathBuf {
    let text = format!(
        r#"run_id = "{run_id}"
seed = 4
output_dir = "{out}"
checkpoint_every = 5
{extra}
[model]
named = "toy"

[schedule]
kind = "wsd"
peak_lr = 0.003
warmup_iters = 2
total_iters = 20

[data]
context = 32
global_batch_tokens = 64
heldout_fraction = 0.1
heldout_batches = 2

[corpus.synthetic]
tokens = 20000
fanout = 4
seed = 2
"#,
        out = dir.join("runs").display()
    );
    let path = dir.join(format!("{run_id}.toml"));
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn ledger_queries() {
    let o = refscale(&["ledger", "1.7e9", "300e9"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("total_compute 3.06e21"), "{}", stdout(&o));
    let o = refscale(&["ledger", "1", "1"]);
    assert!(stdout(&o).contains("total_compute 6\n"), "{}", stdout(&o));
    for bad in [["ledger", "abc", "1"], ["ledger", "-1", "5"], ["ledger", "1", "inf"]] {
        assert_eq!(refscale(&bad).status.code(), Some(2));
    }
    let o = refscale(&["ledger", "--table", &fixture("table2_sanity.jsonl"), "--format", "csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).lines().count() > 2);
}

#[test]
fn schedule_from_budget() {
    let o = refscale(&["schedule", "--wsd", "--tokens", "1e12", "--gbs", "4128768", "--lr", "4e-3", "--warmup", "25000"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("total_iters 242204") && out.contains("cooldown_iters 48440"), "{out}");
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("lr.csv");
    let o = refscale(&["schedule", "--cosine", "--iters", "100", "--lr", "1e-3", "--warmup", "10", "--csv", csv.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 102);
    let o = refscale(&["schedule", "--wsd", "--iters", "10", "--lr", "1e-3", "--warmup", "10"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(refscale(&["schedule", "--wsd", "--cosine", "--iters", "10", "--lr", "1"]).status.code(), Some(2));
}

#[test]
fn shard_synth_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let o = refscale(&["shard", "synth", "--tokens", "5000", "--seed", "3", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let shard = dir.path().join("shard_0000.rstk");
    let o = refscale(&["shard", "inspect", shard.to_str().unwrap()]);
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["tokens"], 5000);
    let bytes = std::fs::read(&shard).unwrap();
    std::fs::write(&shard, &bytes[..bytes.len() - 3]).unwrap();
    let o = refscale(&["shard", "inspect", shard.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn train_is_reproducible_and_validates_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let a = tiny_manifest(dir.path(), "a", "");
    let b = tiny_manifest(dir.path(), "b", "");
    for m in [&a, &b] {
        let o = refscale(&["train", m.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let runs = dir.path().join("runs");
    let final_a = runs.join("a/ckpt_00000020.rsck");
    assert_eq!(sha(&final_a), sha(&runs.join("b/ckpt_00000020.rsck")));
    let log = std::fs::read_to_string(runs.join("a/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 20);
    assert!(!runs.join("a/train_log.jsonl.tmp").exists());

    // same run id again needs --overwrite
    assert_eq!(refscale(&["train", a.to_str().unwrap()]).status.code(), Some(2));
    let o = refscale(&["train", a.to_str().unwrap(), "--overwrite"]);
    assert!(o.status.success());
    assert_eq!(sha(&final_a), sha(&runs.join("b/ckpt_00000020.rsck")));

    // interrupted then resumed run ends on the same bytes
    let c = tiny_manifest(dir.path(), "c", "");
    assert!(refscale(&["train", c.to_str().unwrap(), "--stop", "10"]).status.success());
    let mid = runs.join("c/ckpt_00000010.rsck");
    let o = refscale(&["train", c.to_str().unwrap(), "--resume", mid.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(sha(&final_a), sha(&runs.join("c/ckpt_00000020.rsck")));

    // missing corpus: exit 2, nothing written
    let text = std::fs::read_to_string(&a).unwrap().replace(
        "[corpus.synthetic]\ntokens = 20000\nfanout = 4\nseed = 2\n",
        "[corpus]\nmanifest = \"does/not/exist.json\"\n",
    );
    let missing = dir.path().join("missing.toml");
    std::fs::write(&missing, text.replace("run_id = \"a\"", "run_id = \"missing\"")).unwrap();
    let o = refscale(&["train", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!runs.join("missing").exists());
}

#[test]
fn output_root_override() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_manifest(dir.path(), "rooted", "");
    let text = std::fs::read_to_string(&m).unwrap();
    let out_line = text.lines().find(|l| l.starts_with("output_dir")).unwrap().to_string();
    std::fs::write(&m, text.replace(&out_line, "output_dir = \"rel\"").replace("total_iters = 20", "total_iters = 3")).unwrap();
    let root = dir.path().join("root");
    let o = Command::new(BIN).args(["train", m.to_str().unwrap()]).env("REFSCALE_OUTPUT_ROOT", &root).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(root.join("rel/rooted/ckpt_00000003.rsck").exists());
}

#[test]
fn numeric_abort_exits_1_with_final_log_record() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_manifest(dir.path(), "boom", "");
    let text = std::fs::read_to_string(&m).unwrap().replace("peak_lr = 0.003", "peak_lr = 1e30");
    std::fs::write(&m, text).unwrap();
    let o = refscale(&["train", m.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
    let log = std::fs::read_to_string(dir.path().join("runs/boom/train_log.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert!(last["error"].as_str().unwrap().contains("non-finite"));
}

#[test]
fn eval_checkpoints_and_dynamics() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_manifest(dir.path(), "ev", "");
    assert!(refscale(&["train", m.to_str().unwrap()]).status.success());
    let task = dir.path().join("task.jsonl");
    let o = refscale(&["task", "synth", "--items", "40", "--shots", "2", "--seed", "1", "--out", task.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run_dir = dir.path().join("runs/ev");

    let o = refscale(&["eval", run_dir.join("ckpt_00000020.rsck").to_str().unwrap(), "--task", task.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    let acc = lines[0]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(lines[1]["task"], "aggregate");

    let o = refscale(&["eval", run_dir.to_str().unwrap(), "--task", task.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(run_dir.join("dynamics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("ckpt_00000005,5,320,"));

    let missing = dir.path().join("nope.jsonl");
    let o = refscale(&["eval", run_dir.to_str().unwrap(), "--task", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let broken = dir.path().join("broken.jsonl");
    let text = std::fs::read_to_string(&task).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[3] = "{\"context\": 1}";
    std::fs::write(&broken, lines.join("\n")).unwrap();
    let o = refscale(&["eval", run_dir.to_str().unwrap(), "--task", broken.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 4"), "{}", stderr(&o));
}

#[test]
fn compare_reports() {
    let dir = tempfile::tempdir().unwrap();
    let table3 = fixture("table3_overview.jsonl");
    let out = |name: &str| dir.path().join(name);
    let o = refscale(&["compare", "rank", &table3, "--out", out("r1").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let md = std::fs::read_to_string(out("r1/rank.md")).unwrap();
    let averages: Vec<f64> = md
        .lines()
        .skip(4)
        .take_while(|l| l.starts_with('|'))
        .map(|l| l.split('|').nth(6).unwrap().trim().parse().unwrap())
        .collect();
    assert_eq!(averages.len(), 10);
    assert!(averages.windows(2).all(|w| w[0] >= w[1]));
    assert!(md.contains("| 1 | Nemotron | 0.660 |\n| 2 | DCLM | 0.570 |\n| 3 | FineWeb-Edu | 0.560 |"), "{md}");

    let o = refscale(&["compare", "flag", &table3, "--out", out("f").to_str().unwrap()]);
    assert!(o.status.success());
    let flag = std::fs::read_to_string(out("f/flag.csv")).unwrap();
    let euro = flag.lines().find(|l| l.starts_with("EuroLLM-1.7B")).unwrap();
    assert!(euro.contains(",true,") && euro.contains("open-sci-ref-1.7B FineWeb-Edu 300B") && euro.contains("DCLM-1B"));

    for (mode, files) in [("rank", vec!["rank.md", "rank.csv", "rank.svg"]), ("trend", vec!["trend.csv", "trend_fit.svg", "trend_connect.svg"])] {
        for run in ["a", "b"] {
            let d = out(&format!("{mode}_{run}"));
            assert!(refscale(&["compare", mode, &table3, "--out", d.to_str().unwrap()]).status.success());
        }
        for f in files {
            assert_eq!(sha(&out(&format!("{mode}_a")).join(f)), sha(&out(&format!("{mode}_b")).join(f)), "{f}");
        }
    }

    let empty = out("empty.jsonl");
    std::fs::write(&empty, "\n").unwrap();
    assert_eq!(refscale(&["compare", "rank", empty.to_str().unwrap(), "--out", out("e").to_str().unwrap()]).status.code(), Some(2));
    let bad = out("bad.jsonl");
    let mut text = std::fs::read_to_string(&table3).unwrap();
    text.push_str("{\"model\": \"x\"}\n");
    std::fs::write(&bad, text).unwrap();
    let o = refscale(&["compare", "flag", bad.to_str().unwrap(), "--out", out("b").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line"), "{}", stderr(&o));
}

#[test]
fn ablate_emits_points_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_manifest(dir.path(), "abl", "");
    let out = dir.path().join("abl");
    let o = refscale(&["ablate", m.to_str().unwrap(), "--qk-norm", "--iters", "6", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let points: Vec<serde_json::Value> = std::fs::read_to_string(out.join("points.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(points.len(), 2);
    let delta = points[0]["params"].as_f64().unwrap() - points[1]["params"].as_f64().unwrap();
    // toy: 2 layers, head_dim 8, query and key scales
    assert_eq!(delta, 32.0);
    assert_eq!(std::fs::read_to_string(out.join("loss_curves.csv")).unwrap().lines().count(), 7);
    let o = refscale(&["compare", "trend", out.join("points.jsonl").to_str().unwrap(), "--out", dir.path().join("t").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(refscale(&["ablate", m.to_str().unwrap()]).status.code(), Some(2));
}
