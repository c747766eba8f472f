use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};

/// Per-layer nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
    Softmax,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
            Activation::Softmax => "softmax",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            "softmax" => Some(Activation::Softmax),
            _ => None,
        }
    }

    fn apply_rows(self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|x| x.max(0.0)),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Identity => {}
            Activation::Softmax => {
                for mut row in z.rows_mut() {
                    let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                    row.mapv_inplace(|x| (x - max).exp());
                    let sum = row.sum();
                    row.mapv_inplace(|x| x / sum);
                }
            }
        }
    }

    /// Maps the cotangent of the layer output to the cotangent of its
    /// pre-activation, given the layer output `y`.
    fn backward_rows(self, y: &Array2<f64>, mut g: Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => {
                ndarray::Zip::from(&mut g).and(y).for_each(|g, &y| {
                    if y <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            Activation::Tanh => {
                ndarray::Zip::from(&mut g)
                    .and(y)
                    .for_each(|g, &y| *g *= 1.0 - y * y);
            }
            Activation::Identity => {}
            Activation::Softmax => {
                for (mut g_row, y_row) in g.rows_mut().into_iter().zip(y.rows()) {
                    let dot = g_row.dot(&y_row);
                    ndarray::Zip::from(&mut g_row)
                        .and(&y_row)
                        .for_each(|g, &y| *g = y * (*g - dot));
                }
            }
        }
        g
    }
}

/// Fully connected feed-forward network. Weight matrices are stored
/// `(fan_out, fan_in)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    layer_sizes: Vec<usize>,
    activations: Vec<Activation>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// Gradients with respect to every weight and bias of a [`DenseNet`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Parameter and input gradients of a single-sample backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub params: ParamGrads,
    pub input: Vec<f64>,
}

/// Layer outputs retained by [`DenseNet::forward_trace`] for a later
/// backward pass. `outputs[0]` is the input batch.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    outputs: Vec<Array2<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Array2<f64> {
        self.outputs.last().expect("trace holds at least the input")
    }

    pub fn into_output(mut self) -> Array2<f64> {
        self.outputs.pop().expect("trace holds at least the input")
    }
}

/// Result of a batched backward pass: parameter gradients summed over the
/// batch and per-row input gradients.
#[derive(Clone, Debug)]
pub struct BatchGradients {
    pub params: ParamGrads,
    pub inputs: Array2<f64>,
}

impl ParamGrads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        ParamGrads {
            weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            *w *= factor;
        }
        for b in &mut self.biases {
            *b *= factor;
        }
    }

    /// Flattened in the same order as [`DenseNet::params_flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    /// Index of the first layer holding a non-finite entry.
    pub fn first_non_finite_layer(&self) -> Option<usize> {
        self.weights
            .iter()
            .zip(&self.biases)
            .position(|(w, b)| w.iter().chain(b.iter()).any(|x| !x.is_finite()))
    }
}

/// Uniform bound used by [`DenseNet::new`] for a layer with `fan_in` inputs.
pub fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

fn check_architecture(layer_sizes: &[usize], activations: &[Activation]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::Config(format!(
            "a network needs at least 2 layer sizes, got {}",
            layer_sizes.len()
        )));
    }
    if activations.len() != layer_sizes.len() - 1 {
        return Err(Error::Config(format!(
            "{} layer sizes need {} activations, got {}",
            layer_sizes.len(),
            layer_sizes.len() - 1,
            activations.len()
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::Config("layer sizes must be positive".into()));
    }
    Ok(())
}

impl DenseNet {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero. Identical seeds
    /// give bit-identical networks.
    pub fn new(layer_sizes: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        check_architecture(layer_sizes, activations)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = layer_sizes
            .windows(2)
            .map(|pair| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let bound = init_bound(fan_in);
                Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-bound..=bound))
            })
            .collect();
        let biases = layer_sizes[1..].iter().map(|&n| Array1::zeros(n)).collect();
        Ok(DenseNet {
            layer_sizes: layer_sizes.to_vec(),
            activations: activations.to_vec(),
            weights,
            biases,
        })
    }

    pub fn zeros(layer_sizes: &[usize], activations: &[Activation]) -> Result<Self> {
        check_architecture(layer_sizes, activations)?;
        Ok(DenseNet {
            layer_sizes: layer_sizes.to_vec(),
            activations: activations.to_vec(),
            weights: layer_sizes
                .windows(2)
                .map(|p| Array2::zeros((p[1], p[0])))
                .collect(),
            biases: layer_sizes[1..].iter().map(|&n| Array1::zeros(n)).collect(),
        })
    }

    pub fn from_parts(
        layer_sizes: Vec<usize>,
        activations: Vec<Activation>,
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
    ) -> Result<Self> {
        check_architecture(&layer_sizes, &activations)?;
        let layers = layer_sizes.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(contract("parameter count does not match layer count"));
        }
        for (l, pair) in layer_sizes.windows(2).enumerate() {
            if weights[l].dim() != (pair[1], pair[0]) || biases[l].len() != pair[1] {
                return Err(contract(format!("layer {l} parameter shapes do not chain")));
            }
        }
        Ok(DenseNet {
            layer_sizes,
            activations,
            weights,
            biases,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn weights(&self, layer: usize) -> &Array2<f64> {
        &self.weights[layer]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut Array2<f64> {
        &mut self.weights[layer]
    }

    pub fn biases(&self, layer: usize) -> &Array1<f64> {
        &self.biases[layer]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut Array1<f64> {
        &mut self.biases[layer]
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// All parameters, layer by layer: weights row-major, then biases.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(contract(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut it = params.iter().copied();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.iter_mut().for_each(|x| *x = it.next().unwrap());
            b.iter_mut().for_each(|x| *x = it.next().unwrap());
        }
        Ok(())
    }

    pub fn same_architecture(&self, other: &DenseNet) -> bool {
        self.layer_sizes == other.layer_sizes && self.activations == other.activations
    }

    /// Single-sample evaluation.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let batch = ArrayView2::from_shape((1, input.len()), input).unwrap();
        Ok(self.forward_batch(&batch).into_raw_vec_and_offset().0)
    }

    /// Row-wise evaluation of an `(n, input_dim)` batch. Shapes are the
    /// caller's responsibility.
    pub fn forward_batch(&self, inputs: &ArrayView2<f64>) -> Array2<f64> {
        let mut a = inputs.to_owned();
        for ((w, b), act) in self.weights.iter().zip(&self.biases).zip(&self.activations) {
            let mut z = a.dot(&w.t());
            z += b;
            act.apply_rows(&mut z);
            a = z;
        }
        a
    }

    pub fn forward_trace(&self, inputs: ArrayView2<f64>) -> ForwardTrace {
        let mut outputs = Vec::with_capacity(self.layer_count() + 1);
        outputs.push(inputs.to_owned());
        for ((w, b), act) in self.weights.iter().zip(&self.biases).zip(&self.activations) {
            let mut z = outputs.last().unwrap().dot(&w.t());
            z += b;
            act.apply_rows(&mut z);
            outputs.push(z);
        }
        ForwardTrace { outputs }
    }

    /// Reverse-mode pass for the scalar `Σ_rows ⟨output_grads_row, net(input_row)⟩`.
    pub fn backward_trace(&self, trace: &ForwardTrace, output_grads: Array2<f64>) -> BatchGradients {
        let layers = self.layer_count();
        let mut weight_grads = Vec::with_capacity(layers);
        let mut bias_grads = Vec::with_capacity(layers);
        let mut g = output_grads;
        for l in (0..layers).rev() {
            let dz = self.activations[l].backward_rows(&trace.outputs[l + 1], g);
            weight_grads.push(dz.t().dot(&trace.outputs[l]));
            bias_grads.push(dz.sum_axis(Axis(0)));
            g = dz.dot(&self.weights[l]);
        }
        weight_grads.reverse();
        bias_grads.reverse();
        BatchGradients {
            params: ParamGrads {
                weights: weight_grads,
                biases: bias_grads,
            },
            inputs: g,
        }
    }

    /// Input rows' gradients only; skips the parameter gradients.
    pub fn backward_inputs(&self, trace: &ForwardTrace, output_grads: Array2<f64>) -> Array2<f64> {
        let mut g = output_grads;
        for l in (0..self.layer_count()).rev() {
            let dz = self.activations[l].backward_rows(&trace.outputs[l + 1], g);
            g = dz.dot(&self.weights[l]);
        }
        g
    }

    /// Exact gradients of `⟨output_grad, forward(input)⟩`.
    pub fn backward(&self, input: &[f64], output_grad: &[f64]) -> Result<GradientBundle> {
        self.check_input(input)?;
        if output_grad.len() != self.output_dim() {
            return Err(contract(format!(
                "output gradient has length {}, network output is {}",
                output_grad.len(),
                self.output_dim()
            )));
        }
        let x = ArrayView2::from_shape((1, input.len()), input).unwrap();
        let trace = self.forward_trace(x);
        let g = Array2::from_shape_vec((1, output_grad.len()), output_grad.to_vec()).unwrap();
        let grads = self.backward_trace(&trace, g);
        Ok(GradientBundle {
            params: grads.params,
            input: grads.inputs.into_raw_vec_and_offset().0,
        })
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(contract(format!(
                "input has length {}, network expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        if input.iter().any(|x| !x.is_finite()) {
            return Err(contract("network input contains a non-finite value"));
        }
        Ok(())
    }
}

/// Polyak averaging: `target ← τ·online + (1−τ)·target`.
pub fn soft_update(target: &mut DenseNet, online: &DenseNet, tau: f64) -> Result<()> {
    if !target.same_architecture(online) {
        return Err(contract("soft update between different architectures"));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(contract(format!("tau must be in (0, 1], got {tau}")));
    }
    let keep = 1.0 - tau;
    for (t, o) in target.weights.iter_mut().zip(&online.weights) {
        ndarray::Zip::from(t).and(o).for_each(|t, &o| *t = tau * o + keep * *t);
    }
    for (t, o) in target.biases.iter_mut().zip(&online.biases) {
        ndarray::Zip::from(t).and(o).for_each(|t, &o| *t = tau * o + keep * *t);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_diff_check(net: &DenseNet, input: &[f64], out_grad: &[f64]) {
        let analytic = net.backward(input, out_grad).unwrap();
        let objective = |n: &DenseNet, x: &[f64]| -> f64 {
            n.forward(x).unwrap().iter().zip(out_grad).map(|(y, g)| y * g).sum()
        };
        let h = 1e-5;
        let base = net.params_flat();
        let grads = analytic.params.flat();
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            let mut plus = net.clone();
            plus.set_params_flat(&p).unwrap();
            p[i] -= 2.0 * h;
            let mut minus = net.clone();
            minus.set_params_flat(&p).unwrap();
            let fd = (objective(&plus, input) - objective(&minus, input)) / (2.0 * h);
            let err = (fd - grads[i]).abs();
            assert!(err <= 1e-7 || err <= 1e-4 * fd.abs().max(grads[i].abs()), "param {i}: fd {fd} vs {}", grads[i]);
        }
        for i in 0..input.len() {
            let mut x = input.to_vec();
            x[i] += h;
            let fp = objective(net, &x);
            x[i] -= 2.0 * h;
            let fm = objective(net, &x);
            let fd = (fp - fm) / (2.0 * h);
            let err = (fd - analytic.input[i]).abs();
            assert!(err <= 1e-7 || err <= 1e-4 * fd.abs(), "input {i}");
        }
    }

    #[test]
    fn init_is_deterministic() {
        let acts = [Activation::Relu, Activation::Identity];
        let a = DenseNet::new(&[2, 3, 1], &acts, 7).unwrap();
        let b = DenseNet::new(&[2, 3, 1], &acts, 7).unwrap();
        let bits = |n: &DenseNet| n.params_flat().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert!(a.biases.iter().all(|b| b.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn init_bound_for_fan_in_400() {
        assert!((init_bound(400) - 0.05).abs() < 1e-15);
        let net = DenseNet::new(&[400, 3], &[Activation::Identity], 1).unwrap();
        assert!(net.weights(0).iter().all(|w| w.abs() <= 0.05));
    }

    #[test]
    fn mismatched_architecture_is_config_error() {
        let err = DenseNet::new(&[2, 3, 1], &[Activation::Relu], 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(matches!(DenseNet::new(&[2], &[], 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_params_tanh_outputs_zero() {
        let net = DenseNet::zeros(&[3, 4, 2], &[Activation::Relu, Activation::Tanh]).unwrap();
        assert_eq!(net.forward(&[0.3, -9.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_network_passes_input_through() {
        let net = DenseNet::from_parts(
            vec![2, 2],
            vec![Activation::Identity],
            vec![Array2::eye(2)],
            vec![Array1::zeros(2)],
        )
        .unwrap();
        assert_eq!(net.forward(&[1.5, -2.0]).unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn relu_dead_region() {
        let mut net = DenseNet::new(&[2, 3, 1], &[Activation::Relu, Activation::Identity], 3).unwrap();
        net.weights_mut(0).fill(1.0);
        net.biases_mut(0).fill(-10.0);
        let trace = net.forward_trace(ArrayView2::from_shape((1, 2), &[0.5, 0.5]).unwrap());
        assert!(trace.outputs[1].iter().all(|&h| h == 0.0));
    }

    #[test]
    fn forward_matches_hand_matmul() {
        let net = DenseNet::new(&[2, 4, 1], &[Activation::Tanh, Activation::Identity], 11).unwrap();
        let x = [0.3, -0.7];
        let mut hidden = [0.0; 4];
        for (j, h) in hidden.iter_mut().enumerate() {
            let mut z = net.biases(0)[j];
            for (k, xk) in x.iter().enumerate() {
                z += net.weights(0)[[j, k]] * xk;
            }
            *h = z.tanh();
        }
        let mut y = net.biases(1)[0];
        for (j, h) in hidden.iter().enumerate() {
            y += net.weights(1)[[0, j]] * h;
        }
        assert!((net.forward(&x).unwrap()[0] - y).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let net = DenseNet::new(&[2, 1], &[Activation::Identity], 0).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::Contract(_))));
        assert!(matches!(net.forward(&[1.0, f64::NAN]), Err(Error::Contract(_))));
        assert!(matches!(net.backward(&[1.0, 2.0], &[1.0, 1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_output_is_distribution() {
        let net = DenseNet::new(&[3, 5, 4], &[Activation::Relu, Activation::Softmax], 5).unwrap();
        let y = net.forward(&[10.0, -3.0, 0.2]).unwrap();
        assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(y.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let net = DenseNet::new(&[3, 5, 2], &[Activation::Tanh, Activation::Identity], 2).unwrap();
        let g = net.backward(&[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(g.params.flat().iter().all(|&x| x == 0.0));
        assert!(g.input.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn linear_layer_weight_grad_is_outer_product() {
        let net = DenseNet::new(&[3, 2], &[Activation::Identity], 9).unwrap();
        let x = [0.5, -1.0, 2.0];
        let g = [0.3, -0.2];
        let grads = net.backward(&x, &g).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(grads.params.weights[0][[i, j]], g[i] * x[j]);
            }
            assert_eq!(grads.params.biases[0][i], g[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, acts) in [
            (1, [Activation::Tanh, Activation::Identity]),
            (2, [Activation::Relu, Activation::Tanh]),
            (3, [Activation::Tanh, Activation::Softmax]),
        ] {
            let net = DenseNet::new(&[3, 5, 2], &acts, seed).unwrap();
            finite_diff_check(&net, &[0.4, -0.3, 0.9], &[0.7, -1.1]);
        }
    }

    #[test]
    fn soft_update_cases() {
        let acts = [Activation::Tanh, Activation::Identity];
        let online = DenseNet::new(&[2, 3, 1], &acts, 1).unwrap();
        let mut target = DenseNet::new(&[2, 3, 1], &acts, 2).unwrap();
        soft_update(&mut target, &online, 1.0).unwrap();
        assert_eq!(target, online);

        let mut zero = DenseNet::zeros(&[1, 1], &[Activation::Identity]).unwrap();
        let mut one = zero.clone();
        one.set_params_flat(&[1.0, 1.0]).unwrap();
        soft_update(&mut zero, &one, 0.005).unwrap();
        assert!(zero.params_flat().iter().all(|&p| (p - 0.005).abs() < 1e-15));

        let other = DenseNet::new(&[2, 4, 1], &acts, 1).unwrap();
        assert!(matches!(soft_update(&mut target, &other, 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_soft_updates_decay_geometrically() {
        let mut target = DenseNet::zeros(&[1, 1], &[Activation::Identity]).unwrap();
        let mut online = target.clone();
        online.set_params_flat(&[1.0, 1.0]).unwrap();
        for _ in 0..200 {
            soft_update(&mut target, &online, 0.005).unwrap();
        }
        let gap = 1.0 - target.params_flat()[0];
        assert!((gap - 0.995f64.powi(200)).abs() < 1e-12);
        assert!((gap - 0.367).abs() < 1e-3);
    }
}
