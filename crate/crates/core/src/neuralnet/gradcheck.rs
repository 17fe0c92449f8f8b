//! Central finite-difference verification of [`model_backward`], in `f64`.

use super::layers::{bce_grad, bce_with_logits};
use super::model::{model_backward, model_forward, Architecture, ForwardCache, Gradients, Parameters};
use super::tensor::{Scalar, Tensor};
use super::NetError;
use crate::rng::SplitMix64;

pub const STEP: f64 = 1e-5;


/// Signature of an analytic gradient routine, so tests can substitute a broken one.
pub type BackwardFn = dyn Fn(
    &Architecture,
    &Parameters<f64>,
    &ForwardCache<f64>,
    &Tensor<f64>,
) -> Result<Gradients<f64>, NetError>;

/// Max relative error between analytic and numeric gradients of the BCE loss
/// on a seeded random image.
pub fn grad_check(arch: &Architecture, input_size: usize, seed: u64) -> Result<f64, NetError> {
    grad_check_with(arch, input_size, seed, &model_backward)
}

pub fn grad_check_with(
    arch: &Architecture,
    input_size: usize,
    seed: u64,
    backward: &BackwardFn,
) -> Result<f64, NetError> {
    let params = Parameters::<f64>::init(arch, input_size, seed)?;
    let mut rng = SplitMix64::derive(seed, &[0x6772_6164]);
    // one pixel-quantised sample: no cross-sample cancellation, no near-zero inputs
    let len = 3 * input_size * input_size;
    let batch = Tensor::new(
        vec![1, 3, input_size, input_size],
        (0..len).map(|_| rng.below(256) as f64 / 255.0 - 0.5).collect(),
    )?;
    let labels = [seed.is_multiple_of(2)];

    let (logits, cache) = model_forward(arch, &params, &batch)?;
    let grad_logits = Tensor::new(
        logits.shape().to_vec(),
        logits
            .data()
            .iter()
            .zip(&labels)
            .map(|(&z, &y)| bce_grad(z, y))
            .collect(),
    )?;
    let analytic = backward(arch, &params, &cache, &grad_logits)?;

    let loss = |p: &Parameters<f64>| -> Result<f64, NetError> {
        let (z, _) = model_forward(arch, p, &batch)?;
        Ok(z.data()
            .iter()
            .zip(&labels)
            .map(|(&z, &y)| bce_with_logits(z, y))
            .sum::<f64>())
    };

    let mut worst = 0.0f64;
    let mut probe = params.clone();
    let n_tensors = params.tensors().count();
    for t in 0..n_tensors {
        let len = params.tensors().nth(t).unwrap().len();
        for i in 0..len {
            let orig = params.tensors().nth(t).unwrap().data()[i];
            probe.tensors_mut().nth(t).unwrap().data_mut()[i] = orig + STEP;
            let plus = loss(&probe)?;
            probe.tensors_mut().nth(t).unwrap().data_mut()[i] = orig - STEP;
            let minus = loss(&probe)?;
            probe.tensors_mut().nth(t).unwrap().data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * STEP);
            let exact = analytic
                .tensors()
                .nth(t)
                .ok_or_else(|| NetError::Shape("analytic gradients missing a tensor".into()))?
                .data()
                .get(i)
                .copied()
                .ok_or_else(|| NetError::Shape("analytic gradient tensor too short".into()))?;
            worst = worst.max(relative_error(exact, numeric));
        }
    }
    Ok(worst)
}

pub fn relative_error<T: Scalar>(analytic: T, numeric: T) -> f64 {
    let (a, n) = (analytic.as_f64(), numeric.as_f64());
    (a - n).abs() / a.abs().max(n.abs()).max(1e-12)
}
