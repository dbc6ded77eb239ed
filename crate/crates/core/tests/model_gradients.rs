use refscale::model::{Model, ModelConfig, Mode};
use refscale::numerics::{grad_check_report, GradCheckReport, NumericsError, Tensor};

fn toy_f64() -> Model<f64> {
    let config = ModelConfig {
        dropout_p: 0.0,
        ..ModelConfig::named("toy").unwrap()
    };
    Model::<f64>::build(&config, 7).unwrap()
}

pub fn tiny_transformer_max_rel_error() -> Result<GradCheckReport, NumericsError> {
    let model = toy_f64();
    let tokens: Vec<u32> = vec![5, 17, 200, 3, 99, 42];
    let targets: Vec<u32> = vec![17, 200, 3, 99, 42, 7];
    let params: Vec<Tensor<f64>> = model.params().to_vec();
    grad_check_report(
        |tape, vars| {
            // forward reads parameter values only through `vars`
            let logits = model
                .forward(tape, vars, &tokens, 2, 3, Mode::Eval)
                .map_err(|e| NumericsError::InvalidArgument(e.to_string()))?;
            tape.cross_entropy(logits, &targets)
        },
        &params,
        3e-4,
    )
}

#[test]
fn full_tiny_transformer_matches_central_differences() {
    let report = tiny_transformer_max_rel_error().unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}
