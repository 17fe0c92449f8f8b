use super::model::Parameters;
use super::tensor::Scalar;
use super::NetError;

/// Momentum SGD: `v ← momentum·v + g`, then `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T = f32> {
    lr: T,
    momentum: T,
    velocity: Parameters<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(params: &Parameters<T>, lr: f64, momentum: f64) -> Result<Self, NetError> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(NetError::Hyperparameter(format!(
                "learning rate must be finite and non-negative, got {lr}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(NetError::Hyperparameter(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            lr: T::from_f64(lr),
            momentum: T::from_f64(momentum),
            velocity: params.zeros_like(),
        })
    }

    pub fn velocity(&self) -> &Parameters<T> {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut Parameters<T>, grads: &Parameters<T>) -> Result<(), NetError> {
        sgd_step(params, grads, self.lr, self.momentum, &mut self.velocity)
    }
}

/// One update. Nothing is modified if shapes disagree or a gradient is not finite.
pub fn sgd_step<T: Scalar>(
    params: &mut Parameters<T>,
    grads: &Parameters<T>,
    lr: T,
    momentum: T,
    velocity: &mut Parameters<T>,
) -> Result<(), NetError> {
    let layout = |p: &Parameters<T>| -> Vec<Vec<usize>> {
        p.tensors().map(|t| t.shape().to_vec()).collect()
    };
    let shapes = layout(params);
    if shapes != layout(grads) || shapes != layout(velocity) {
        return Err(NetError::Shape(
            "parameters, gradients and velocity have different layouts".into(),
        ));
    }
    for (i, layer) in grads.layers().iter().enumerate() {
        if let Some(g) = layer {
            if !(g.weights.is_finite() && g.bias.is_finite()) {
                return Err(NetError::NonFiniteGradient { layer: i });
            }
        }
    }
    for ((p, g), v) in params
        .tensors_mut()
        .zip(grads.tensors())
        .zip(velocity.tensors_mut())
    {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = momentum * *vv + gv;
            *pv = *pv - lr * *vv;
        }
    }
    Ok(())
}
