//! Learning-rate schedules: warmup-stable-decay (trapezoid) and cosine,
//! planning from token budgets, and cooldown branching from a stable run.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fraction of total iterations spent in the linear cooldown.
pub const COOLDOWN_FRACTION: f64 = 0.2;

/// Default floor of the cosine schedule, as a fraction of the peak.
pub const DEFAULT_MIN_LR_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Wsd,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub peak_lr: f64,
    pub warmup_iters: u64,
    pub total_iters: u64,
    /// Length of the final linear decay (WSD only).
    #[serde(default)]
    pub cooldown_iters: u64,
    /// Cosine floor as a fraction of `peak_lr` (cosine only).
    #[serde(default = "default_min_lr_fraction")]
    pub min_lr_fraction: f64,
}

fn default_min_lr_fraction() -> f64 {
    DEFAULT_MIN_LR_FRACTION
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("iteration {iteration} outside [0, {total}]")]
    OutOfRange { iteration: u64, total: u64 },
    #[error("invalid schedule: {0}")]
    Config(String),
    #[error("branch iteration {iteration} is not in the stable phase [{start}, {end}]")]
    BranchOutsideStable { iteration: u64, start: u64, end: u64 },
}

/// `floor(0.2 * iters)` computed in integers.
pub fn cooldown_for(total_iters: u64) -> u64 {
    total_iters / 5
}

impl ScheduleSpec {
    pub fn wsd(peak_lr: f64, warmup_iters: u64, total_iters: u64) -> Self {
        Self {
            kind: ScheduleKind::Wsd,
            peak_lr,
            warmup_iters,
            total_iters,
            cooldown_iters: cooldown_for(total_iters),
            min_lr_fraction: DEFAULT_MIN_LR_FRACTION,
        }
    }

    pub fn cosine(peak_lr: f64, warmup_iters: u64, total_iters: u64) -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            peak_lr,
            warmup_iters,
            total_iters,
            cooldown_iters: 0,
            min_lr_fraction: DEFAULT_MIN_LR_FRACTION,
        }
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        let fail = |m: String| Err(ScheduleError::Config(m));
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return fail(format!("peak_lr {} must be positive", self.peak_lr));
        }
        if self.total_iters == 0 {
            return fail("total_iters must be positive".into());
        }
        match self.kind {
            ScheduleKind::Wsd => {
                if self.warmup_iters + self.cooldown_iters > self.total_iters {
                    return fail(format!(
                        "warmup {} + cooldown {} exceeds total {}",
                        self.warmup_iters, self.cooldown_iters, self.total_iters
                    ));
                }
            }
            ScheduleKind::Cosine => {
                if self.warmup_iters > self.total_iters {
                    return fail(format!("warmup {} exceeds total {}", self.warmup_iters, self.total_iters));
                }
                if !(0.0..=1.0).contains(&self.min_lr_fraction) {
                    return fail(format!("min_lr_fraction {} not in [0, 1]", self.min_lr_fraction));
                }
            }
        }
        Ok(())
    }

    /// First iteration of the WSD cooldown.
    pub fn decay_start(&self) -> u64 {
        self.total_iters - self.cooldown_iters
    }

    /// Learning rate applied at `iteration`.
    ///
    /// WSD: `peak * i / warmup` during warmup, `peak` while stable, then a
    /// linear decay reaching exactly zero at `total_iters`. Cosine: the same
    /// warmup, then a half cosine from `peak` down to `min_lr_fraction * peak`.
    pub fn lr_at(&self, iteration: u64) -> Result<f64, ScheduleError> {
        if iteration > self.total_iters {
            return Err(ScheduleError::OutOfRange {
                iteration,
                total: self.total_iters,
            });
        }
        let peak = self.peak_lr;
        if iteration < self.warmup_iters {
            return Ok(peak * iteration as f64 / self.warmup_iters as f64);
        }
        Ok(match self.kind {
            ScheduleKind::Wsd => {
                let start = self.decay_start();
                if iteration <= start || self.cooldown_iters == 0 {
                    peak
                } else {
                    peak * (self.total_iters - iteration) as f64 / self.cooldown_iters as f64
                }
            }
            ScheduleKind::Cosine => {
                let span = self.total_iters - self.warmup_iters;
                let progress = if span == 0 {
                    1.0
                } else {
                    (iteration - self.warmup_iters) as f64 / span as f64
                };
                let floor = self.min_lr_fraction * peak;
                floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        })
    }

    /// Learning rates for every iteration `0..=total_iters`.
    pub fn curve(&self) -> Vec<f64> {
        (0..=self.total_iters)
            .map(|i| self.lr_at(i).expect("in range"))
            .collect()
    }

    /// Re-anneals a stable WSD run: the new schedule ends its stable phase
    /// at `branch_iteration` and appends a cooldown of `floor(0.2 * total)`,
    /// where the new total is the smallest iteration count satisfying
    /// `total - floor(0.2 * total) == branch_iteration`.
    pub fn cooldown_branch(&self, branch_iteration: u64) -> Result<ScheduleSpec, ScheduleError> {
        if self.kind != ScheduleKind::Wsd {
            return Err(ScheduleError::Config("cooldown branching needs a WSD schedule".into()));
        }
        let (start, end) = (self.warmup_iters, self.decay_start());
        if branch_iteration < start || branch_iteration > end || branch_iteration == 0 {
            return Err(ScheduleError::BranchOutsideStable {
                iteration: branch_iteration,
                start,
                end,
            });
        }
        // total - floor(total / 5) == b  =>  total = ceil(5b / 4) (then check neighbours)
        let mut total = (5 * branch_iteration).div_ceil(4);
        while total - cooldown_for(total) > branch_iteration {
            total -= 1;
        }
        while total - cooldown_for(total) < branch_iteration {
            total += 1;
        }
        let spec = ScheduleSpec {
            total_iters: total,
            cooldown_iters: cooldown_for(total),
            ..self.clone()
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// `ceil(tokens / batch)` in integers.
pub fn iterations_for_budget(token_budget: u64, global_batch_tokens: u64) -> u64 {
    token_budget.div_ceil(global_batch_tokens)
}

/// Derives a schedule from a token budget and an exact token-level batch
/// size: `total = ceil(budget / batch)`, WSD cooldown `floor(0.2 * total)`.
pub fn plan_from_budget(
    token_budget: u64,
    global_batch_tokens: u64,
    peak_lr: f64,
    warmup_iters: u64,
    kind: ScheduleKind,
) -> Result<ScheduleSpec, ScheduleError> {
    if token_budget == 0 || global_batch_tokens == 0 {
        return Err(ScheduleError::Config("token budget and batch size must be positive".into()));
    }
    let total = iterations_for_budget(token_budget, global_batch_tokens);
    if warmup_iters >= total {
        return Err(ScheduleError::Config(format!("warmup {warmup_iters} >= total iterations {total}")));
    }
    let spec = match kind {
        ScheduleKind::Wsd => ScheduleSpec::wsd(peak_lr, warmup_iters, total),
        ScheduleKind::Cosine => ScheduleSpec::cosine(peak_lr, warmup_iters, total),
    };
    spec.validate()?;
    Ok(spec)
}

/// Writes `iteration,lr` rows with a header.
pub fn curve_csv(spec: &ScheduleSpec) -> String {
    let mut out = String::from("iteration,lr\n");
    for (i, lr) in spec.curve().iter().enumerate() {
        out.push_str(&format!("{i},{lr:e}\n"));
    }
    out
}
