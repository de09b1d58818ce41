use rand::Rng;

use super::net::Model;
use super::params::{ModelConfig, Params};
use crate::rng::stream_rng;
use crate::Result;

/// Central-difference step used by the checks.
pub const FD_EPS: f64 = 1e-5;

/// Largest `|a - n| / max(|a|, |n|, 1e-8)` over every parameter, where `a`
/// is the analytic gradient and `n` the central finite difference.
pub fn max_relative_error(model: &Model<f64>, x: &[f64], label: usize) -> Result<f64> {
    let fwd = model.forward(x)?;
    let analytic = model.backward(&fwd, label)?;

    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (tensor, grads) in analytic.tensors().iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let base = probe.params().tensors()[tensor][k];
            probe.params_mut().tensors_mut()[tensor][k] = base + FD_EPS;
            let up = probe.forward(x)?.loss(label);
            probe.params_mut().tensors_mut()[tensor][k] = base - FD_EPS;
            let down = probe.forward(x)?.loss(label);
            probe.params_mut().tensors_mut()[tensor][k] = base;

            let n = (up - down) / (2.0 * FD_EPS);
            let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Random model, input and label for `config`, drawn from `seed`.
/// Parameters are uniform in ±0.5 (biases included) and one leading input
/// row is zeroed so padding paths are exercised.
pub fn random_instance(config: ModelConfig, seed: u64) -> Result<(Model<f64>, Vec<f64>, usize)> {
    config.validate()?;
    let mut rng = stream_rng(seed, 7);
    let mut params = Params::<f64>::zeros(&config);
    for t in params.tensors_mut() {
        for v in t {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let mut x: Vec<f64> = (0..config.input_len())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    if config.seq_len_in > 1 {
        x[..config.feature_dim].fill(0.0);
    }
    let label = rng.random_range(0..config.n_outputs);
    Ok((Model::new(config, params)?, x, label))
}

/// Gradient check of a random tiny instance; see [`max_relative_error`].
pub fn gradient_check(config: ModelConfig, seed: u64) -> Result<f64> {
    let (model, x, label) = random_instance(config, seed)?;
    max_relative_error(&model, &x, label)
}
