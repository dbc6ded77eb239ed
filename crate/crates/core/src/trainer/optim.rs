use serde::{Deserialize, Serialize};

use crate::numerics::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm threshold; `<= 0` disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
            grad_clip: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(format!("{name} {b} not in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 || !self.grad_clip.is_finite() {
            return Err("eps must be positive, weight_decay nonnegative, grad_clip finite".into());
        }
        Ok(())
    }
}

/// Global L2 norm over all gradients, accumulated in f64.
pub fn global_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }
    norm
}

/// Whether weight decay applies to a tensor: matrices and embeddings only,
/// never biases or norm scales.
pub fn decays(param: &Tensor<impl Real>) -> bool {
    param.ndim() >= 2
}

/// One AdamW update at 1-based step `t` with decoupled weight decay:
/// `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
pub fn adamw_step<T: Real>(
    cfg: &OptimConfig,
    lr: f64,
    t: u64,
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    m: &mut [Tensor<T>],
    v: &mut [Tensor<T>],
) {
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let one = T::one();
    let bc1 = T::of(1.0 - cfg.beta1.powf(t as f64));
    let bc2 = T::of(1.0 - cfg.beta2.powf(t as f64));
    let (lr_t, eps) = (T::of(lr), T::of(cfg.eps));
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        let wd = if decays(p) { T::of(cfg.weight_decay) } else { T::zero() };
        let (pd, gd, md, vd) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = gd[i];
            md[i] = b1 * md[i] + (one - b1) * gi;
            vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
            let update = (md[i] / bc1) / ((vd[i] / bc2).sqrt() + eps) + wd * pd[i];
            pd[i] = pd[i] - lr_t * update;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = vec![Tensor::<f64>::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap()];
        let g = vec![Tensor::new(vec![3], vec![0.5, -2.0, 0.0]).unwrap()];
        let (mut m, mut v) = (vec![Tensor::zeros(&[3])], vec![Tensor::zeros(&[3])]);
        adamw_step(&cfg, 0.1, 1, &mut p, &g, &mut m, &mut v);
        let d = p[0].data();
        assert!((d[0] - 0.9).abs() < 1e-7 && (d[1] - 1.1).abs() < 1e-7 && d[2] == 1.0, "{d:?}");
    }

    #[test]
    fn decay_skips_vectors() {
        let cfg = OptimConfig::default();
        let mut p = vec![Tensor::<f64>::full(&[2, 2], 1.0), Tensor::full(&[2], 1.0)];
        let g = vec![Tensor::zeros(&[2, 2]), Tensor::zeros(&[2])];
        let (mut m, mut v) = (g.clone(), g.clone());
        adamw_step(&cfg, 0.5, 1, &mut p, &g, &mut m, &mut v);
        assert_eq!(p[0].data()[0], 1.0 - 0.5 * 0.05);
        assert_eq!(p[1].data()[0], 1.0);
    }

    proptest! {
        #[test]
        fn zero_lr_is_identity(vals in prop::collection::vec(-3.0f64..3.0, 4), wd in 0.0f64..1.0) {
            let cfg = OptimConfig { weight_decay: wd, ..Default::default() };
            let orig = vec![Tensor::new(vec![2, 2], vals.clone()).unwrap()];
            let mut p = orig.clone();
            let g = vec![Tensor::full(&[2, 2], 0.3)];
            let (mut m, mut v) = (vec![Tensor::zeros(&[2, 2])], vec![Tensor::zeros(&[2, 2])]);
            adamw_step(&cfg, 0.0, 1, &mut p, &g, &mut m, &mut v);
            prop_assert_eq!(p, orig);
        }

        #[test]
        fn clipped_norm_is_bounded(vals in prop::collection::vec(-100.0f32..100.0, 1..64), clip in 0.01f64..5.0) {
            let mut g = vec![Tensor::new(vec![vals.len()], vals).unwrap()];
            let before = clip_global_norm(&mut g, clip);
            let after = global_norm(&g);
            prop_assert!(after <= clip + 1e-6, "{} -> {}", before, after);
            if before <= clip {
                prop_assert_eq!(after, before);
            }
        }
    }
}
