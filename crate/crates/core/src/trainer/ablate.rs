//! Architecture ablations: one arm per toggled flag, every arm trained on the
//! same batches from the same seed so only the flag differs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{eval_loss, run, OptimConfig, RunOptions, TrainError, TrainState};
use crate::compare::{Provenance, RunPoint};
use crate::data::{Batch, BatchStream};
use crate::model::{count_params, Mode, Model, ModelConfig};
use crate::numerics::Tape;
use crate::schedule::ScheduleSpec;

/// Dropout probability used when an arm switches dropout on.
pub const ABLATION_DROPOUT: f64 = 0.1;

/// Which architecture switches get their own arm.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    #[serde(default)]
    pub biases: bool,
    #[serde(default)]
    pub qk_norm: bool,
    #[serde(default)]
    pub dropout: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationArm {
    pub name: String,
    pub config: ModelConfig,
}

/// The unmodified `base` arm first, then one arm per set flag with that
/// switch inverted.
pub fn ablation_arms(base: &ModelConfig, flags: AblationFlags) -> Vec<AblationArm> {
    let mut arms = vec![AblationArm {
        name: "base".into(),
        config: base.clone(),
    }];
    let on_off = |on: bool| if on { "on" } else { "off" };
    if flags.biases {
        arms.push(AblationArm {
            name: format!("biases-{}", on_off(!base.biases_enabled)),
            config: ModelConfig {
                biases_enabled: !base.biases_enabled,
                ..base.clone()
            },
        });
    }
    if flags.qk_norm {
        arms.push(AblationArm {
            name: format!("qk_norm-{}", on_off(!base.qk_norm_enabled)),
            config: ModelConfig {
                qk_norm_enabled: !base.qk_norm_enabled,
                ..base.clone()
            },
        });
    }
    if flags.dropout {
        let dropout_p = if base.dropout_p > 0.0 { 0.0 } else { ABLATION_DROPOUT };
        arms.push(AblationArm {
            name: format!("dropout-{}", on_off(dropout_p > 0.0)),
            config: ModelConfig {
                dropout_p,
                ..base.clone()
            },
        });
    }
    arms
}

/// Shared inputs of every arm.
#[derive(Debug, Clone)]
pub struct AblationSetup<'a> {
    pub base: ModelConfig,
    pub schedule: ScheduleSpec,
    pub optim: OptimConfig,
    pub stream: &'a BatchStream,
    pub heldout: &'a [Batch],
    pub seed: u64,
    /// Dataset label of the emitted points.
    pub dataset: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub arm: AblationArm,
    pub params: u64,
    pub losses: Vec<f64>,
    pub heldout_loss: f64,
    pub heldout_top1: f64,
    pub point: RunPoint,
}

/// Fraction of held-out positions whose argmax logit is the target.
pub fn top1_accuracy(model: &Model<f32>, batches: &[Batch]) -> Result<f64, TrainError> {
    let vocab = model.config().vocab;
    let (mut hits, mut total) = (0usize, 0usize);
    for b in batches {
        let mut tape = Tape::new();
        let vars = model.record_frozen(&mut tape);
        let logits = model.forward(&mut tape, &vars, &b.inputs, b.rows, b.context, Mode::Eval)?;
        let data = tape.value(logits).data();
        for (row, &target) in data.chunks_exact(vocab).zip(&b.targets) {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            hits += (best == target as usize) as usize;
            total += 1;
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

/// Trains every arm for the full schedule and evaluates it on `heldout`.
pub fn ablate(setup: &AblationSetup<'_>, flags: AblationFlags) -> Result<Vec<ArmResult>, TrainError> {
    let gbt = setup.stream.global_batch_tokens() as u64;
    let total = setup.schedule.total_iters;
    ablation_arms(&setup.base, flags)
        .into_iter()
        .map(|arm| {
            let model = Model::build(&arm.config, setup.seed)?;
            let mut state = TrainState::init(model, setup.schedule.clone(), setup.optim.clone(), gbt, setup.seed, setup.seed);
            run(&mut state, setup.stream.clone(), total, RunOptions::default())?;
            let heldout_loss = eval_loss(&state.model, setup.heldout)?;
            let heldout_top1 = top1_accuracy(&state.model, setup.heldout)?;
            let params = count_params(&arm.config).total();
            let point = RunPoint {
                model: format!("ablate-{}", arm.name),
                procedure: format!("ablate-{}", arm.name),
                dataset: setup.dataset.clone(),
                params: Some(params as f64),
                tokens: Some(state.tokens_seen as f64),
                compute: None,
                reported_compute: None,
                average: heldout_top1,
                scores: BTreeMap::from([("next_token_top1".to_string(), heldout_top1)]),
                scores_subset: false,
                provenance: Provenance::Internal,
            };
            Ok(ArmResult {
                params,
                losses: state.loss_history,
                heldout_loss,
                heldout_top1,
                arm,
                point,
            })
        })
        .collect()
}

/// `iteration,<arm>,...` with one row per step.
pub fn loss_curves_csv(results: &[ArmResult]) -> String {
    let mut out = String::from("iteration");
    for r in results {
        out.push(',');
        out.push_str(&r.arm.name);
    }
    out.push('\n');
    let steps = results.iter().map(|r| r.losses.len()).max().unwrap_or(0);
    for i in 0..steps {
        out.push_str(&(i + 1).to_string());
        for r in results {
            out.push(',');
            if let Some(l) = r.losses.get(i) {
                out.push_str(&format!("{l:.6}"));
            }
        }
        out.push('\n');
    }
    out
}

/// Markdown summary with one row per arm.
pub fn ablation_markdown(results: &[ArmResult]) -> String {
    let mut out = String::from("| Arm | Params | Final train loss | Held-out loss | Held-out top-1 |\n|---|---|---|---|---|\n");
    for r in results {
        out.push_str(&format!(
            "| {} | {} | {:.4} | {:.4} | {:.4} |\n",
            r.arm.name,
            r.params,
            r.losses.last().copied().unwrap_or(f64::NAN),
            r.heldout_loss,
            r.heldout_top1
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{pack, synthetic_shard};

    #[test]
    fn arms_flip_one_flag_each() {
        let base = ModelConfig::named("toy").unwrap();
        let arms = ablation_arms(&base, AblationFlags {
            biases: true,
            qk_norm: true,
            dropout: true,
        });
        let names: Vec<&str> = arms.iter().map(|a| a.name.as_str()).collect();
        assert_eq!(names, ["base", "biases-off", "qk_norm-off", "dropout-on"]);
        assert_eq!(arms[3].config.dropout_p, ABLATION_DROPOUT);
        assert_eq!(ablation_arms(&base, AblationFlags::default()).len(), 1);
    }

    #[test]
    fn qk_norm_arm_drops_exactly_the_scales() {
        let base = ModelConfig::named("toy-2m").unwrap();
        let arms = ablation_arms(&base, AblationFlags {
            qk_norm: true,
            ..Default::default()
        });
        let delta = count_params(&arms[0].config).total() - count_params(&arms[1].config).total();
        // one shared query scale and one key scale of head_dim per layer
        assert_eq!(delta, (base.layers * 2 * base.head_dim()) as u64);
    }

    #[test]
    fn dropout_arms_complete_and_repeat() {
        let stream = pack(&[synthetic_shard(20_000, 4, 5).unwrap()], 32, 64, 5).unwrap();
        let heldout = [pack(&[synthetic_shard(4_000, 4, 5).unwrap()], 32, 64, 9).unwrap().batch(0)];
        let setup = AblationSetup {
            base: ModelConfig::named("toy").unwrap(),
            schedule: ScheduleSpec::wsd(3e-3, 2, 8),
            optim: OptimConfig::default(),
            stream: &stream,
            heldout: &heldout,
            seed: 11,
            dataset: "markov".into(),
        };
        let flags = AblationFlags {
            dropout: true,
            ..Default::default()
        };
        let a = ablate(&setup, flags).unwrap();
        let b = ablate(&setup, flags).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|r| r.losses.len() == 8 && r.point.validate().is_ok()));
        assert_ne!(a[0].losses, a[1].losses);
        assert_eq!(loss_curves_csv(&a).lines().count(), 9);
        assert_eq!(ablation_markdown(&a).lines().count(), 4);
    }
}
