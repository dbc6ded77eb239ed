use super::{NumericsError, Tape, Tensor, Var};

/// Compares reverse-mode gradients of a scalar function against central
/// differences (five-point stencil, error O(eps^4)) and returns the worst coordinate's
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
///
/// `f` receives a fresh tape and the recorded parameter handles, and must
/// return a single-element output.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NumericsError>,
{
    grad_check_report(f, params, eps).map(|r| r.max_relative_error)
}

/// Where the worst disagreement of a [`grad_check`] run occurred.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub param: usize,
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// [`grad_check`] with the location of the worst coordinate.
pub fn grad_check_report<F>(f: F, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NumericsError>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(NumericsError::InvalidArgument(format!("grad_check eps {eps} not in (0, 1e-2]")));
    }
    let eval = |values: &[Tensor<f64>]| -> Result<f64, NumericsError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(NumericsError::NonFinite { op: "grad_check" })
        }
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut worst = GradCheckReport {
        max_relative_error: 0.0,
        param: 0,
        coordinate: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; params[pi].numel()]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = work[pi].data()[i];
            let mut at = |offset: f64| -> Result<f64, NumericsError> {
                work[pi].data_mut()[i] = orig + offset;
                eval(&work)
            };
            // fourth-order central stencil
            let (p1, m1, p2, m2) = (at(eps)?, at(-eps)?, at(2.0 * eps)?, at(-2.0 * eps)?);
            work[pi].data_mut()[i] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            if rel > worst.max_relative_error {
                worst = GradCheckReport {
                    max_relative_error: rel,
                    param: pi,
                    coordinate: i,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Reduces any tensor to a scalar through a fixed random weighting so
    /// that every output coordinate contributes a distinct gradient.
    fn weighted_sum(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var, NumericsError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random(&mut rng, tape.shape(v));
        let w = tape.constant(w);
        let p = tape.mul(v, w)?;
        tape.sum(p)
    }

    fn check(params: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NumericsError>) -> f64 {
        grad_check(f, params, 1e-5).unwrap()
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::new(vec![1], vec![3.0]).unwrap();
        let err = grad_check(|t, p| t.mul(p[0], p[0]), &[x], 1e-5).unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn rejects_bad_eps() {
        let x = Tensor::new(vec![1], vec![3.0]).unwrap();
        assert!(grad_check(|t, p| t.mul(p[0], p[0]), &[x.clone()], 0.5).is_err());
        assert!(grad_check(|t, p| t.mul(p[0], p[0]), &[x], 0.0).is_err());
    }

    #[test]
    fn every_primitive_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tol = 1e-5;
        let cases: Vec<(&str, f64)> = vec![
            ("matmul", check(&[random(&mut rng, &[2, 3, 4]), random(&mut rng, &[4, 5])], |t, p| {
                let y = t.matmul(p[0], p[1])?;
                weighted_sum(t, y, 1)
            })),
            ("matmul_batched", check(&[random(&mut rng, &[2, 3, 4]), random(&mut rng, &[2, 4, 3])], |t, p| {
                let y = t.matmul(p[0], p[1])?;
                weighted_sum(t, y, 2)
            })),
            ("matmul_t", check(&[random(&mut rng, &[2, 3, 4]), random(&mut rng, &[5, 4])], |t, p| {
                let y = t.matmul_t(p[0], p[1])?;
                weighted_sum(t, y, 3)
            })),
            ("matmul_t_batched", check(&[random(&mut rng, &[2, 3, 4]), random(&mut rng, &[2, 3, 4])], |t, p| {
                let y = t.matmul_t(p[0], p[1])?;
                weighted_sum(t, y, 4)
            })),
            ("transpose", check(&[random(&mut rng, &[2, 3, 4])], |t, p| {
                let y = t.transpose(p[0])?;
                weighted_sum(t, y, 5)
            })),
            ("add_broadcast", check(&[random(&mut rng, &[2, 3, 4]), random(&mut rng, &[4])], |t, p| {
                let y = t.add(p[0], p[1])?;
                let y = t.mul(y, y)?;
                weighted_sum(t, y, 6)
            })),
            ("mul_broadcast", check(&[random(&mut rng, &[2, 3, 4]), random(&mut rng, &[3, 4])], |t, p| {
                let y = t.mul(p[0], p[1])?;
                weighted_sum(t, y, 7)
            })),
            ("scale", check(&[random(&mut rng, &[3, 2])], |t, p| {
                let y = t.scale(p[0], -1.7)?;
                weighted_sum(t, y, 8)
            })),
            ("reshape_permute", check(&[random(&mut rng, &[2, 3, 4])], |t, p| {
                let y = t.reshape(p[0], &[2, 3, 2, 2])?;
                let y = t.permute(y, &[0, 2, 1, 3])?;
                weighted_sum(t, y, 9)
            })),
            ("slice_concat", check(&[random(&mut rng, &[2, 6]), random(&mut rng, &[2, 2])], |t, p| {
                let a = t.slice(p[0], 1, 1, 3)?;
                let b = t.slice(p[0], 1, 4, 2)?;
                let c = t.concat(&[b, p[1], a], 1)?;
                weighted_sum(t, c, 10)
            })),
            ("softmax_axis0", check(&[random(&mut rng, &[4, 3])], |t, p| {
                let y = t.softmax(p[0], 0)?;
                weighted_sum(t, y, 11)
            })),
            ("softmax_last", check(&[random(&mut rng, &[2, 5])], |t, p| {
                let y = t.softmax(p[0], 1)?;
                weighted_sum(t, y, 12)
            })),
            ("causal_softmax", check(&[random(&mut rng, &[2, 4, 4])], |t, p| {
                let y = t.causal_softmax(p[0])?;
                weighted_sum(t, y, 13)
            })),
            ("silu", check(&[random(&mut rng, &[3, 4])], |t, p| {
                let y = t.silu(p[0])?;
                weighted_sum(t, y, 14)
            })),
            ("rms_normalize", check(&[random(&mut rng, &[3, 6])], |t, p| {
                let y = t.rms_normalize(p[0], 1e-5)?;
                weighted_sum(t, y, 15)
            })),
            ("embedding", check(&[random(&mut rng, &[5, 3])], |t, p| {
                let y = t.embedding(p[0], &[4, 1, 1, 0], &[2, 2])?;
                weighted_sum(t, y, 16)
            })),
            ("cross_entropy", check(&[random(&mut rng, &[2, 3, 7])], |t, p| {
                t.cross_entropy(p[0], &[0, 6, 3, 3, 1, 2])
            })),
            ("rope", check(&[random(&mut rng, &[2, 5, 6])], |t, p| {
                let y = t.rope(p[0], 10_000.0)?;
                weighted_sum(t, y, 17)
            })),
        ];
        for (name, err) in cases {
            assert!(err < tol, "{name}: relative error {err}");
        }
    }

    #[test]
    fn swiglu_block_two_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (d, f) = (6, 10);
        let mut params = vec![random(&mut rng, &[3, d])];
        for _ in 0..2 {
            params.push(random(&mut rng, &[d, f]));
            params.push(random(&mut rng, &[f]));
            params.push(random(&mut rng, &[d, f]));
            params.push(random(&mut rng, &[f]));
            params.push(random(&mut rng, &[f, d]));
            params.push(random(&mut rng, &[d]));
        }
        let err = grad_check(
            |t, p| {
                let mut x = p[0];
                for l in 0..2 {
                    let w = &p[1 + 6 * l..7 + 6 * l];
                    let g = t.matmul(x, w[0])?;
                    let g = t.add(g, w[1])?;
                    let g = t.silu(g)?;
                    let u = t.matmul(x, w[2])?;
                    let u = t.add(u, w[3])?;
                    let h = t.mul(g, u)?;
                    let o = t.matmul(h, w[4])?;
                    let o = t.add(o, w[5])?;
                    x = t.add(x, o)?;
                }
                weighted_sum(t, x, 99)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}

#[cfg(test)]
mod props {
    use super::super::Tape;
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(values in prop::collection::vec(-30.0f64..30.0, 12)) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![3, 4], values).unwrap());
            let y = tape.softmax(x, 1).unwrap();
            for row in tape.value(y).data().chunks(4) {
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn rms_normalize_yields_unit_rms(values in prop::collection::vec(-5.0f64..5.0, 16)) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![2, 8], values).unwrap());
            let y = tape.rms_normalize(x, 1e-5).unwrap();
            for (orig, row) in tape.value(x).data().chunks(8).zip(tape.value(y).data().chunks(8)) {
                let ms_in = orig.iter().map(|v| v * v).sum::<f64>() / 8.0;
                prop_assume!(ms_in >= 1.0);
                let rms = (row.iter().map(|v| v * v).sum::<f64>() / 8.0).sqrt();
                prop_assert!((rms - 1.0).abs() < 1e-5, "rms {}", rms);
            }
        }

        #[test]
        fn cross_entropy_nonnegative(values in prop::collection::vec(-10.0f64..10.0, 10), target in 0u32..5) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(vec![2, 5], values).unwrap());
            let l = tape.cross_entropy(x, &[target, 4 - target]).unwrap();
            prop_assert!(tape.value(l).item() >= 0.0);
        }
    }

    #[test]
    fn cross_entropy_zero_only_when_certain() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 3], vec![0.0, 800.0, 0.0]).unwrap());
        let l = tape.cross_entropy(x, &[1]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let y = tape.constant(Tensor::new(vec![1, 3], vec![0.0, 5.0, 0.0]).unwrap());
        let l = tape.cross_entropy(y, &[1]).unwrap();
        assert!(tape.value(l).item() > 0.0);
    }
}
