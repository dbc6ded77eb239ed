//! Published reference tables shipped with the crate.

use serde::Deserialize;

pub const TABLE1_ARCHITECTURES: &str = include_str!("../../fixtures/table1_architectures.json");
pub const TABLE2_SANITY: &str = include_str!("../../fixtures/table2_sanity.jsonl");
pub const TABLE3_OVERVIEW: &str = include_str!("../../fixtures/table3_overview.jsonl");
pub const TABLE4_LEONARDO: &str = include_str!("../../fixtures/table4_leonardo.json");
pub const SUPPLEMENTARY_RUNS: &str = include_str!("../../fixtures/supplementary_runs.json");
pub const TABLE5_WSD: &str = include_str!("../../fixtures/table5_wsd.json");
pub const TABLE6_COSINE: &str = include_str!("../../fixtures/table6_cosine.json");

/// Token budgets of the three run-time columns.
pub const RUN_TIME_BUDGETS: [f64; 3] = [50e9, 300e9, 1e12];

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureRow {
    pub scale: String,
    pub non_embedding_b: f64,
    pub embedding_b: f64,
    pub total_b: f64,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub gpu_memory_gb: f64,
    pub flops_per_token: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThroughputRow {
    #[serde(default)]
    pub machine: Option<String>,
    #[serde(default)]
    pub gpu: Option<String>,
    pub model_b: f64,
    pub gpus: u64,
    pub micro_bs: u64,
    pub context: u64,
    pub global_bs_samples: u64,
    pub global_bs_label: String,
    /// Measured, not derivable from 6N.
    pub tflops_per_gpu: f64,
    pub tokens_per_gpu_s: f64,
    pub run_hours: [f64; 3],
    #[serde(default)]
    pub gpu_hours: Option<[f64; 3]>,
}

impl ThroughputRow {
    pub fn global_bs_tokens(&self) -> u64 {
        self.global_bs_samples * self.context
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleRow {
    pub tokens: u64,
    pub global_bs_label: String,
    /// Exact batch size that reproduces the printed iteration count.
    pub global_bs_tokens: u64,
    pub iters: u64,
    pub lr: f64,
    pub warmup: u64,
    #[serde(default)]
    pub cooldown: Option<u64>,
}

fn parse<T: for<'de> Deserialize<'de>>(text: &str) -> Vec<T> {
    serde_json::from_str(text).expect("shipped fixture parses")
}

pub fn architectures() -> Vec<ArchitectureRow> {
    parse(TABLE1_ARCHITECTURES)
}

pub fn leonardo_runs() -> Vec<ThroughputRow> {
    parse(TABLE4_LEONARDO)
}

pub fn supplementary_runs() -> Vec<ThroughputRow> {
    parse(SUPPLEMENTARY_RUNS)
}

pub fn wsd_schedules() -> Vec<ScheduleRow> {
    parse(TABLE5_WSD)
}

pub fn cosine_schedules() -> Vec<ScheduleRow> {
    parse(TABLE6_COSINE)
}
