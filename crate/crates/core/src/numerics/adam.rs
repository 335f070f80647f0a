use super::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Number of completed steps.
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update with learning rate `lr`.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    config: &AdamConfig,
) {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter");
    assert_eq!(params.len(), state.m.len(), "optimizer state size");
    state.t += 1;
    let t = state.t as i32;
    let b1 = T::from_f64(config.beta1);
    let b2 = T::from_f64(config.beta2);
    let one = T::one();
    let c1 = T::from_f64(1.0 - config.beta1.powi(t));
    let c2 = T::from_f64(1.0 - config.beta2.powi(t));
    let lr = T::from_f64(lr);
    let eps = T::from_f64(config.eps);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        assert_eq!(p.shape(), g.shape(), "gradient shape for parameter {i}");
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = b1 * *mi + (one - b1) * gi;
            *vi = b2 * *vi + (one - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w = *w - lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_and_decays_moments() {
        let mut params = vec![Tensor::<f64>::from_f64(vec![2], &[1.0, -2.0])];
        let mut state = AdamState::new(&params);
        state.m[0] = Tensor::from_f64(vec![2], &[0.5, 0.5]);
        state.v[0] = Tensor::from_f64(vec![2], &[0.0, 0.0]);
        let grads = vec![Tensor::zeros(vec![2])];
        let cfg = AdamConfig::default();
        let before = params[0].clone();
        // With v = 0 the step is m̂/eps, so only check the moment decay on a
        // fresh state and the parameters on a zero-moment one.
        adam_step(&mut params, &grads, &mut state, 0.1, &cfg);
        assert!((state.m[0].data()[0] - 0.45).abs() < 1e-12);

        let mut params = vec![before.clone()];
        let mut fresh = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut fresh, 0.1, &cfg);
        assert_eq!(params[0], before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = vec![Tensor::<f64>::from_f64(vec![1], &[0.0])];
        let mut state = AdamState::new(&params);
        let grads = vec![Tensor::from_f64(vec![1], &[1.0])];
        adam_step(&mut params, &grads, &mut state, 0.1, &AdamConfig::default());
        assert!((params[0].data()[0] + 0.1).abs() < 1e-8);
    }
}
