//! Compute accounting: 6N FLOPs per token, 6ND totals, and run-time
//! arithmetic from measured throughput.
//!
//! N is the total parameter count (embedding included). Measured hardware
//! TFLOPS are carried as observations and never derived from N.

pub mod fixtures;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LedgerError {
    #[error("{what} must be positive and finite, got {value}")]
    NotPositive { what: &'static str, value: f64 },
}

/// Training FLOPs per token: `6 * N`.
pub fn flops_per_token(params: f64) -> f64 {
    6.0 * params
}

/// Total training FLOPs: `6 * N * D`.
pub fn total_compute(params: f64, tokens: f64) -> f64 {
    flops_per_token(params) * tokens
}

/// Wall-clock hours to process `tokens` at the given aggregate throughput.
pub fn run_time_hours(tokens: f64, gpu_count: u64, tokens_per_gpu_s: f64) -> f64 {
    tokens / (gpu_count as f64 * tokens_per_gpu_s) / 3600.0
}

pub fn gpu_hours(run_hours: f64, gpu_count: u64) -> f64 {
    run_hours * gpu_count as f64
}

/// `x` rounded to `digits` significant figures.
pub fn round_sig(x: f64, digits: usize) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{:.*e}", digits.saturating_sub(1), x).parse().expect("formatted float parses")
}

/// Whether two values display identically at `digits` significant figures.
pub fn agrees_to_sig(a: f64, b: f64, digits: usize) -> bool {
    round_sig(a, digits) == round_sig(b, digits)
}

fn positive(what: &'static str, value: f64) -> Result<f64, LedgerError> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(LedgerError::NotPositive { what, value })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeRecord {
    pub params: f64,
    pub tokens: f64,
    pub flops_per_token: f64,
    pub total_flops: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens_per_gpu_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpu_count: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_hours: Option<f64>,
}

impl ComputeRecord {
    pub fn new(params: f64, tokens: f64) -> Result<Self, LedgerError> {
        let params = positive("params", params)?;
        let tokens = positive("tokens", tokens)?;
        Ok(Self {
            params,
            tokens,
            flops_per_token: flops_per_token(params),
            total_flops: total_compute(params, tokens),
            tokens_per_gpu_s: None,
            gpu_count: None,
            run_hours: None,
        })
    }

    pub fn with_throughput(mut self, gpu_count: u64, tokens_per_gpu_s: f64) -> Result<Self, LedgerError> {
        positive("gpu count", gpu_count as f64)?;
        positive("tokens per GPU per second", tokens_per_gpu_s)?;
        self.gpu_count = Some(gpu_count);
        self.tokens_per_gpu_s = Some(tokens_per_gpu_s);
        self.run_hours = Some(run_time_hours(self.tokens, gpu_count, tokens_per_gpu_s));
        Ok(self)
    }
}

/// CSV with a header row.
pub fn records_csv(records: &[ComputeRecord]) -> String {
    let mut out = String::from("params,tokens,flops_per_token,total_flops,gpu_count,tokens_per_gpu_s,run_hours\n");
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in records {
        out.push_str(&format!(
            "{:e},{:e},{:e},{:e},{},{},{}\n",
            r.params,
            r.tokens,
            r.flops_per_token,
            r.total_flops,
            opt(r.gpu_count.map(|g| g.to_string())),
            opt(r.tokens_per_gpu_s.map(|t| t.to_string())),
            opt(r.run_hours.map(|h| format!("{h:.2}"))),
        ));
    }
    out
}

/// Markdown table with two-significant-figure FLOP columns.
pub fn records_markdown(records: &[ComputeRecord]) -> String {
    let mut out = String::from("| Params | Tokens | FLOPs/token (6N) | Compute (6ND) | GPUs | Tokens/GPU/s | Hours |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
    for r in records {
        out.push_str(&format!(
            "| {:.3e} | {:.3e} | {:.1e} | {:.2e} | {} | {} | {} |\n",
            r.params,
            r.tokens,
            r.flops_per_token,
            r.total_flops,
            opt(r.gpu_count.map(|g| g.to_string())),
            opt(r.tokens_per_gpu_s.map(|t| t.to_string())),
            opt(r.run_hours.map(|h| format!("{h:.2}"))),
        ));
    }
    out
}
