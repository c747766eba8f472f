use ndarray::Zip;

use super::net::{DenseNet, ParamGrads};
use crate::error::{contract, Error, Result};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Bias-corrected Adam moments for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    first_moment: ParamGrads,
    second_moment: ParamGrads,
    step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(net: &DenseNet, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(AdamState {
            first_moment: ParamGrads::zeros_like(net),
            second_moment: ParamGrads::zeros_like(net),
            step_count: 0,
            learning_rate,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update of `net` along `grads`; descends unless `ascend` is set.
    /// Nothing is modified when a gradient entry is non-finite.
    pub fn step(&mut self, net: &mut DenseNet, grads: &ParamGrads, ascend: bool) -> Result<()> {
        if grads.weights.len() != net.layer_count()
            || grads
                .weights
                .iter()
                .zip(&grads.biases)
                .enumerate()
                .any(|(l, (w, b))| w.dim() != net.weights(l).dim() || b.len() != net.biases(l).len())
        {
            return Err(contract("gradient shapes do not match the network"));
        }
        if let Some(layer) = grads.first_non_finite_layer() {
            return Err(Error::Numerical(format!(
                "non-finite gradient in layer {layer}"
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let correction1 = 1.0 - b1.powi(t);
        let correction2 = 1.0 - b2.powi(t);
        let lr = if ascend { -self.learning_rate } else { self.learning_rate };
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: &f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for l in 0..net.layer_count() {
            Zip::from(net.weights_mut(l))
                .and(&mut self.first_moment.weights[l])
                .and(&mut self.second_moment.weights[l])
                .and(&grads.weights[l])
                .for_each(update);
            Zip::from(net.biases_mut(l))
                .and(&mut self.first_moment.biases[l])
                .and(&mut self.second_moment.biases[l])
                .and(&grads.biases[l])
                .for_each(update);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndmath::Activation;

    fn scalar_net(value: f64) -> DenseNet {
        let mut net = DenseNet::zeros(&[1, 1], &[Activation::Identity]).unwrap();
        net.set_params_flat(&[value, 0.0]).unwrap();
        net
    }

    fn scalar_grad(net: &DenseNet, g: f64) -> ParamGrads {
        let mut grads = ParamGrads::zeros_like(net);
        grads.weights[0][[0, 0]] = g;
        grads
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut net = scalar_net(0.4);
        let mut adam = AdamState::new(&net, 0.001).unwrap();
        let before = net.clone();
        adam.step(&mut net, &ParamGrads::zeros_like(&before), false).unwrap();
        assert_eq!(net, before);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut net = scalar_net(0.0);
        let mut adam = AdamState::new(&net, 0.001).unwrap();
        let g = scalar_grad(&net, 0.3);
        adam.step(&mut net, &g, false).unwrap();
        // m̂ = 0.3, v̂ = 0.09 → step = lr·0.3/(0.3 + 1e-8)
        let expected = -0.001 * 0.3 / (0.3 + 1e-8);
        assert!((net.params_flat()[0] - expected).abs() < 1e-15);

        let mut net = scalar_net(0.0);
        let mut adam = AdamState::new(&net, 0.001).unwrap();
        adam.step(&mut net, &g, true).unwrap();
        assert!((net.params_flat()[0] + expected).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_reports_layer() {
        let mut net = DenseNet::new(&[2, 3, 1], &[Activation::Relu, Activation::Identity], 0).unwrap();
        let mut adam = AdamState::new(&net, 0.01).unwrap();
        let mut g = ParamGrads::zeros_like(&net);
        g.biases[1][0] = f64::NAN;
        let before = net.clone();
        let err = adam.step(&mut net, &g, false).unwrap_err();
        assert!(err.to_string().contains("layer 1"), "{err}");
        assert_eq!(net, before);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn rejects_non_positive_learning_rate() {
        let net = scalar_net(0.0);
        assert!(AdamState::new(&net, 0.0).is_err());
    }
}
