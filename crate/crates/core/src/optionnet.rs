//! The option network `p(o|s,a)` and its training by importance-weighted
//! mutual-information maximization with a white-noise consistency penalty.
//!
//! With posteriors `p_i = p(·|s_i,a_i)` and mean-one weights `w_i`:
//!
//! * marginal `p̂(o) = (1/N) Σ_i w_i p_i(o)`
//! * entropy `Ĥ(o) = −Σ_o p̂(o) log p̂(o)`
//! * conditional entropy `Ĥ(o|s,a) = −(1/N) Σ_i w_i Σ_o p_i(o) log p_i(o)`
//! * loss `L = mean_i KL(p̃_i ‖ p_i) − λ (Ĥ(o) − Ĥ(o|s,a))`, where `p̃_i` is
//!   the posterior at Gaussian-perturbed inputs.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::buffers::{OnPolicyBuffer, Transition};
use crate::critic::{CriticHead, TwinCritic};
use crate::envsim::EnvSpec;
use crate::error::{contract, Error, Result};
use crate::hpolicy::OptionPolicySet;
use crate::ndmath::{concat_cols, stack_rows, Activation, AdamState, DenseNet, ParamGrads};

/// Floor applied inside logarithms and divisions of probabilities.
const PROB_FLOOR: f64 = 1e-300;

fn safe_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// How samples are weighted when estimating the MI terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weighting {
    /// `exp(A(s,a)) / β(a|s)`, normalized.
    Advantage,
    /// All ones.
    Uniform,
}

/// Importance weights `w_i ∝ exp(A_i) / β_i`, normalized so that `Σ w_i = N`.
pub fn importance_weights(advantages: &[f64], behavior_log_densities: &[f64]) -> Result<Vec<f64>> {
    if advantages.is_empty() || advantages.len() != behavior_log_densities.len() {
        return Err(contract("advantages and densities must be nonempty and of equal length"));
    }
    if advantages.iter().chain(behavior_log_densities).any(|x| !x.is_finite()) {
        return Err(contract("importance weight inputs must be finite"));
    }
    let log_w: Vec<f64> = advantages
        .iter()
        .zip(behavior_log_densities)
        .map(|(a, lb)| a - lb)
        .collect();
    Ok(normalize_log_weights(&log_w))
}

/// Exponentiates after subtracting the max, then rescales to mean one.
fn normalize_log_weights(log_w: &[f64]) -> Vec<f64> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let scale = raw.len() as f64 / raw.iter().sum::<f64>();
    raw.iter().map(|w| w * scale).collect()
}

fn renormalize(weights: &[f64]) -> Vec<f64> {
    let scale = weights.len() as f64 / weights.iter().sum::<f64>();
    weights.iter().map(|w| w * scale).collect()
}

/// `p̂(o) = (1/N) Σ_i w_i p_i(o)`.
pub fn weighted_marginal(posteriors: ArrayView2<f64>, weights: &[f64]) -> Vec<f64> {
    let n = posteriors.nrows() as f64;
    let mut out = vec![0.0; posteriors.ncols()];
    for (row, &w) in posteriors.rows().into_iter().zip(weights) {
        for (acc, &p) in out.iter_mut().zip(row.iter()) {
            *acc += w * p;
        }
    }
    out.iter_mut().for_each(|x| *x /= n);
    out
}

/// `−Σ_o p̂(o) log p̂(o)` with `0 log 0 = 0`.
pub fn weighted_entropy(marginal: &[f64]) -> f64 {
    -marginal
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// `−(1/N) Σ_i w_i Σ_o p_i(o) log p_i(o)`.
pub fn weighted_conditional_entropy(posteriors: ArrayView2<f64>, weights: &[f64]) -> f64 {
    let n = posteriors.nrows() as f64;
    let total: f64 = posteriors
        .rows()
        .into_iter()
        .zip(weights)
        .map(|(row, &w)| w * weighted_entropy(&row.to_vec()))
        .sum();
    total / n
}

/// `KL(p ‖ q) = Σ p log(p/q)`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - safe_ln(qi)))
        .sum()
}

/// Transitions prepared for option-network training.
#[derive(Clone, Debug)]
pub struct WeightedBatch {
    /// `(N, state_dim + action_dim)` option-network inputs.
    pub inputs: Array2<f64>,
    pub advantages: Vec<f64>,
    pub behavior_log_densities: Vec<f64>,
    /// Nonnegative, summing to `N`.
    pub weights: Vec<f64>,
}

impl WeightedBatch {
    pub fn new(inputs: Array2<f64>, advantages: Vec<f64>, behavior_log_densities: Vec<f64>, weighting: Weighting) -> Result<Self> {
        let n = inputs.nrows();
        if n == 0 || advantages.len() != n || behavior_log_densities.len() != n {
            return Err(contract("weighted batch fields must be nonempty and aligned"));
        }
        let weights = match weighting {
            Weighting::Advantage => importance_weights(&advantages, &behavior_log_densities)?,
            Weighting::Uniform => vec![1.0; n],
        };
        Ok(WeightedBatch {
            inputs,
            advantages,
            behavior_log_densities,
            weights,
        })
    }

    /// Uniformly weighted batch over `inputs`.
    pub fn uniform(inputs: Array2<f64>) -> Self {
        let n = inputs.nrows();
        WeightedBatch {
            inputs,
            advantages: vec![0.0; n],
            behavior_log_densities: vec![0.0; n],
            weights: vec![1.0; n],
        }
    }

    pub fn with_weights(inputs: Array2<f64>, weights: Vec<f64>) -> Result<Self> {
        let n = inputs.nrows();
        if n == 0 || weights.len() != n || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(contract("weights must be finite, nonnegative and one per row"));
        }
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(contract("weights must not all be zero"));
        }
        Ok(WeightedBatch {
            inputs,
            advantages: vec![0.0; n],
            behavior_log_densities: vec![0.0; n],
            weights: renormalize(&weights),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    /// Rows `indices` with their weights rescaled to mean one.
    pub fn subset(&self, indices: &[usize]) -> WeightedBatch {
        let pick = |v: &[f64]| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        WeightedBatch {
            inputs: self.inputs.select(Axis(0), indices),
            advantages: pick(&self.advantages),
            behavior_log_densities: pick(&self.behavior_log_densities),
            weights: renormalize(&pick(&self.weights)),
        }
    }
}

/// Loss decomposition returned by the option-loss evaluations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptionLossTerms {
    pub loss: f64,
    pub vat: f64,
    pub entropy: f64,
    pub conditional_entropy: f64,
}

impl OptionLossTerms {
    pub fn mutual_information(&self) -> f64 {
        self.entropy - self.conditional_entropy
    }
}

#[derive(Clone, Debug)]
pub struct OptionNet {
    pub net: DenseNet,
    adam: AdamState,
    option_count: usize,
    pub lambda_mi: f64,
    pub vat_noise_variance: f64,
    state_dim: usize,
    action_dim: usize,
    input_shift: Vec<f64>,
    input_scale: Vec<f64>,
}

/// Spreads below this are treated as constant columns and left unscaled.
const MIN_INPUT_SPREAD: f64 = 1e-8;

pub(crate) fn option_net_layers(input_dim: usize, option_count: usize, hidden: &[usize]) -> (Vec<usize>, Vec<Activation>) {
    let mut sizes = vec![input_dim];
    sizes.extend_from_slice(hidden);
    sizes.push(option_count);
    let mut acts = vec![Activation::Relu; hidden.len()];
    acts.push(Activation::Softmax);
    (sizes, acts)
}

impl OptionNet {
    pub fn new(
        spec: &EnvSpec,
        option_count: usize,
        hidden: &[usize],
        learning_rate: f64,
        lambda_mi: f64,
        vat_noise_variance: f64,
        seed: u64,
    ) -> Result<Self> {
        let (sizes, acts) = option_net_layers(spec.state_dim + spec.action_dim, option_count, hidden);
        let net = DenseNet::new(&sizes, &acts, seed)?;
        Self::from_net(spec, net, learning_rate, lambda_mi, vat_noise_variance)
    }

    pub fn from_net(spec: &EnvSpec, net: DenseNet, learning_rate: f64, lambda_mi: f64, vat_noise_variance: f64) -> Result<Self> {
        if net.input_dim() != spec.state_dim + spec.action_dim {
            return Err(contract("option network input must be state and action"));
        }
        if *net.activations().last().unwrap() != Activation::Softmax {
            return Err(contract("option network needs a softmax output"));
        }
        if !(vat_noise_variance > 0.0) {
            return Err(Error::Config("vat_noise_variance must be positive".into()));
        }
        let (action_mid, action_half) = spec.action_scale();
        let mut input_shift = vec![0.0; spec.state_dim];
        input_shift.extend(action_mid);
        let mut input_scale = vec![1.0; spec.state_dim];
        input_scale.extend(action_half);
        Ok(OptionNet {
            adam: AdamState::new(&net, learning_rate)?,
            option_count: net.output_dim(),
            lambda_mi,
            vat_noise_variance,
            state_dim: spec.state_dim,
            action_dim: spec.action_dim,
            input_shift,
            input_scale,
            net,
        })
    }

    pub fn option_count(&self) -> usize {
        self.option_count
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    /// Per-column `(shift, scale)` applied to `state ⧺ action`. Starts as the
    /// action bounds mapped to `[−1, 1]` with states passed through.
    pub fn input_scaling(&self) -> (&[f64], &[f64]) {
        (&self.input_shift, &self.input_scale)
    }

    pub fn set_input_scaling(&mut self, shift: Vec<f64>, scale: Vec<f64>) -> Result<()> {
        let d = self.state_dim + self.action_dim;
        if shift.len() != d || scale.len() != d {
            return Err(contract(format!("input scaling needs {d} columns")));
        }
        if shift.iter().chain(&scale).any(|x| !x.is_finite()) || scale.iter().any(|&x| x <= 0.0) {
            return Err(contract("input scaling must be finite with positive scales"));
        }
        self.input_shift = shift;
        self.input_scale = scale;
        Ok(())
    }

    /// Standardizes each input column to zero mean and unit variance over
    /// `transitions`. Constant columns are centred but not rescaled.
    pub fn fit_input_scaling(&mut self, transitions: &[Transition]) -> Result<()> {
        if transitions.is_empty() {
            return Err(Error::InsufficientData { needed: 1, available: 0 });
        }
        let s = stack_rows(transitions.iter().map(|t| t.state.as_slice()), self.state_dim);
        let a = stack_rows(transitions.iter().map(|t| t.action.as_slice()), self.action_dim);
        let raw = concat_cols(s.view(), a.view());
        let mean = raw.mean_axis(Axis(0)).expect("nonempty");
        let std = raw.std_axis(Axis(0), 0.0);
        let scale = std.iter().map(|&sd| if sd > MIN_INPUT_SPREAD { sd } else { 1.0 }).collect();
        self.set_input_scaling(mean.to_vec(), scale)
    }

    /// Network inputs: `state ⧺ action`, shifted and scaled column-wise.
    pub fn inputs(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Array2<f64> {
        let mut x = concat_cols(states, actions);
        for mut row in x.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.input_shift[j]) / self.input_scale[j];
            }
        }
        x
    }

    pub fn transition_inputs(&self, transitions: &[Transition]) -> Array2<f64> {
        let s = stack_rows(transitions.iter().map(|t| t.state.as_slice()), self.state_dim);
        let a = stack_rows(transitions.iter().map(|t| t.action.as_slice()), self.action_dim);
        self.inputs(s.view(), a.view())
    }

    pub fn posterior(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.state_dim || action.len() != self.action_dim {
            return Err(contract("state or action dimension mismatch"));
        }
        let x = self.inputs(
            stack_rows([state], state.len()).view(),
            stack_rows([action], action.len()).view(),
        );
        self.net.forward(&x.row(0).to_vec())
    }

    pub fn posteriors(&self, inputs: ArrayView2<f64>) -> Array2<f64> {
        self.net.forward_batch(&inputs)
    }

    pub fn posteriors_for(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Array2<f64> {
        self.posteriors(self.inputs(states, actions).view())
    }

    pub fn weighted_marginal(&self, batch: &WeightedBatch) -> Vec<f64> {
        weighted_marginal(self.posteriors(batch.inputs.view()).view(), &batch.weights)
    }

    pub fn weighted_conditional_entropy(&self, batch: &WeightedBatch) -> f64 {
        weighted_conditional_entropy(self.posteriors(batch.inputs.view()).view(), &batch.weights)
    }

    /// Input perturbations `ε ~ N(0, variance·I)`.
    pub fn sample_vat_noise<R: Rng + ?Sized>(&self, rows: usize, variance: f64, rng: &mut R) -> Array2<f64> {
        let normal = Normal::new(0.0, variance.sqrt()).expect("variance is positive");
        Array2::from_shape_simple_fn((rows, self.net.input_dim()), || normal.sample(rng))
    }

    pub fn vat_penalty<R: Rng + ?Sized>(&self, inputs: ArrayView2<f64>, noise_variance: f64, rng: &mut R) -> Result<f64> {
        if !(noise_variance > 0.0) {
            return Err(contract("noise variance must be positive"));
        }
        let noise = self.sample_vat_noise(inputs.nrows(), noise_variance, rng);
        Ok(self.vat_penalty_with_noise(inputs, noise.view()))
    }

    /// Mean `KL(p(·|x + ε) ‖ p(·|x))` over rows.
    pub fn vat_penalty_with_noise(&self, inputs: ArrayView2<f64>, noise: ArrayView2<f64>) -> f64 {
        let clean = self.posteriors(inputs);
        let perturbed = self.posteriors((&inputs + &noise).view());
        mean_kl(perturbed.view(), clean.view())
    }

    pub fn option_loss<R: Rng + ?Sized>(&self, batch: &WeightedBatch, rng: &mut R) -> f64 {
        let noise = self.sample_vat_noise(batch.len(), self.vat_noise_variance, rng);
        self.option_loss_terms(batch, noise.view()).loss
    }

    pub fn option_loss_terms(&self, batch: &WeightedBatch, noise: ArrayView2<f64>) -> OptionLossTerms {
        let clean = self.posteriors(batch.inputs.view());
        let perturbed = self.posteriors((&batch.inputs + &noise).view());
        loss_terms(clean.view(), perturbed.view(), &batch.weights, self.lambda_mi)
    }

    /// Loss terms and their exact gradient for fixed perturbations `noise`.
    pub fn option_loss_grad(&self, batch: &WeightedBatch, noise: ArrayView2<f64>) -> (OptionLossTerms, ParamGrads) {
        let n = batch.len() as f64;
        let clean_trace = self.net.forward_trace(batch.inputs.view());
        let perturbed_inputs = &batch.inputs + &noise;
        let pert_trace = self.net.forward_trace(perturbed_inputs.view());
        let p = clean_trace.output();
        let pt = pert_trace.output();
        let terms = loss_terms(p.view(), pt.view(), &batch.weights, self.lambda_mi);

        let marginal = weighted_marginal(p.view(), &batch.weights);
        let log_marginal: Vec<f64> = marginal.iter().map(|&m| safe_ln(m)).collect();
        let mut g_clean = Array2::zeros(p.raw_dim());
        let mut g_pert = Array2::zeros(pt.raw_dim());
        for i in 0..p.nrows() {
            let w = batch.weights[i];
            for o in 0..p.ncols() {
                let (pi, qi) = (p[[i, o]], pt[[i, o]]);
                let log_p = safe_ln(pi);
                g_clean[[i, o]] = (-qi / pi.max(PROB_FLOOR) + self.lambda_mi * w * (log_marginal[o] - log_p)) / n;
                g_pert[[i, o]] = if qi > 0.0 { (qi.ln() + 1.0 - log_p) / n } else { 0.0 };
            }
        }
        let mut grads = self.net.backward_trace(&clean_trace, g_clean).params;
        grads.add_assign(&self.net.backward_trace(&pert_trace, g_pert).params);
        (terms, grads)
    }

    /// One Adam descent step on the option loss for `batch`.
    pub fn train_step<R: Rng + ?Sized>(&mut self, batch: &WeightedBatch, rng: &mut R) -> Result<OptionLossTerms> {
        let noise = self.sample_vat_noise(batch.len(), self.vat_noise_variance, rng);
        let (terms, grads) = self.option_loss_grad(batch, noise.view());
        if !terms.loss.is_finite() {
            return Err(Error::Numerical(format!("option loss is {}", terms.loss)));
        }
        self.adam.step(&mut self.net, &grads, false)?;
        Ok(terms)
    }
}

fn mean_kl(perturbed: ArrayView2<f64>, clean: ArrayView2<f64>) -> f64 {
    let n = clean.nrows() as f64;
    perturbed
        .rows()
        .into_iter()
        .zip(clean.rows())
        .map(|(pt, p)| kl_divergence(&pt.to_vec(), &p.to_vec()))
        .sum::<f64>()
        / n
}

fn loss_terms(clean: ArrayView2<f64>, perturbed: ArrayView2<f64>, weights: &[f64], lambda: f64) -> OptionLossTerms {
    let vat = mean_kl(perturbed, clean);
    let entropy = weighted_entropy(&weighted_marginal(clean, weights));
    let conditional_entropy = weighted_conditional_entropy(clean, weights);
    OptionLossTerms {
        loss: vat - lambda * (entropy - conditional_entropy),
        vat,
        entropy,
        conditional_entropy,
    }
}

/// `A(s,a) = Q_min(s,a) − V(s)` for each transition.
pub fn compute_advantages(critic: &TwinCritic, policies: &OptionPolicySet, transitions: &[Transition]) -> Result<Vec<f64>> {
    if transitions.is_empty() {
        return Ok(Vec::new());
    }
    let states = stack_rows(transitions.iter().map(|t| t.state.as_slice()), critic.state_dim());
    let actions = stack_rows(transitions.iter().map(|t| t.action.as_slice()), critic.action_dim());
    let q = critic.q_batch(CriticHead::Min, states.view(), actions.view());
    let v = policies.state_values(critic, states.view());
    let adv: Vec<f64> = (&q - &v).to_vec();
    if adv.iter().any(|a| !a.is_finite()) {
        return Err(Error::Numerical("non-finite advantage".into()));
    }
    Ok(adv)
}

/// Weighted batch over `transitions` with advantages taken from the current
/// critic and policies.
pub fn build_weighted_batch(
    option_net: &OptionNet,
    transitions: &[Transition],
    critic: &TwinCritic,
    policies: &OptionPolicySet,
    weighting: Weighting,
) -> Result<WeightedBatch> {
    let inputs = option_net.transition_inputs(transitions);
    let log_b: Vec<f64> = transitions.iter().map(|t| t.behavior_log_density).collect();
    let advantages = match weighting {
        Weighting::Advantage => compute_advantages(critic, policies, transitions)?,
        Weighting::Uniform => vec![0.0; transitions.len()],
    };
    WeightedBatch::new(inputs, advantages, log_b, weighting)
}

/// Outcome of one option-network training round.
#[derive(Clone, Debug, PartialEq)]
pub struct OptionTrainReport {
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Terms on the whole round's data after training, fixed perturbations
    /// drawn once.
    pub final_terms: OptionLossTerms,
}

/// Minibatch Adam over `epochs` passes of a fixed weighted batch.
/// Minibatch weights are rescaled to mean one.
pub fn train_on_batch<R: Rng + ?Sized>(
    option_net: &mut OptionNet,
    batch: &WeightedBatch,
    epochs: usize,
    minibatch_size: usize,
    rng: &mut R,
) -> Result<OptionTrainReport> {
    if batch.is_empty() {
        return Err(Error::InsufficientData { needed: 1, available: 0 });
    }
    if minibatch_size == 0 {
        return Err(contract("minibatch size must be positive"));
    }
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(minibatch_size) {
            let mb = batch.subset(chunk);
            total += option_net.train_step(&mb, rng)?.loss;
            count += 1;
        }
        epoch_losses.push(total / count as f64);
    }
    let noise = option_net.sample_vat_noise(batch.len(), option_net.vat_noise_variance, rng);
    let final_terms = option_net.option_loss_terms(batch, noise.view());
    Ok(OptionTrainReport {
        epoch_losses,
        final_terms,
    })
}

/// Trains on the on-policy buffer. Input scaling is refitted to the buffer,
/// then advantages and weights are computed once from the critic and
/// policies as they stand at the call.
pub fn train_option_network<R: Rng + ?Sized>(
    option_net: &mut OptionNet,
    on_policy: &OnPolicyBuffer,
    critic: &TwinCritic,
    policies: &OptionPolicySet,
    weighting: Weighting,
    epochs: usize,
    minibatch_size: usize,
    rng: &mut R,
) -> Result<OptionTrainReport> {
    if on_policy.is_empty() {
        return Err(Error::InsufficientData { needed: 1, available: 0 });
    }
    option_net.fit_input_scaling(on_policy.transitions())?;
    let batch = build_weighted_batch(option_net, on_policy.transitions(), critic, policies, weighting)?;
    train_on_batch(option_net, &batch, epochs, minibatch_size, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{BimodalBandit, Environment};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weights_for_equal_inputs_are_one() {
        let w = importance_weights(&[0.3; 5], &[-1.0; 5]).unwrap();
        assert!(w.iter().all(|&x| (x - 1.0).abs() < 1e-15));
    }

    #[test]
    fn weights_by_hand() {
        let w = importance_weights(&[0.0, 2f64.ln()], &[0.0, 0.0]).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12 && (w[1] - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn weights_are_shift_invariant_and_survive_large_advantages() {
        let a = [0.1, -2.0, 3.5];
        let b = [-0.3, 0.2, 1.0];
        let w = importance_weights(&a, &b).unwrap();
        let shifted: Vec<f64> = a.iter().map(|x| x + 900.0).collect();
        let ws = importance_weights(&shifted, &b).unwrap();
        for (x, y) in w.iter().zip(&ws) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn weight_inputs_must_be_finite() {
        assert!(importance_weights(&[f64::NAN], &[0.0]).is_err());
        assert!(importance_weights(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn marginal_examples() {
        let p = array![[0.25, 0.25, 0.25, 0.25], [0.25, 0.25, 0.25, 0.25]];
        assert_eq!(weighted_marginal(p.view(), &[1.0, 1.0]), vec![0.25; 4]);
        let p = array![[1.0, 0.0], [0.0, 1.0]];
        let m = weighted_marginal(p.view(), &[0.5, 1.5]);
        assert!((m[0] - 0.25).abs() < 1e-15 && (m[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn entropy_examples() {
        assert!((weighted_entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-15);
        assert_eq!(weighted_entropy(&[0.0, 1.0, 0.0]), 0.0);
        let h = weighted_entropy(&[0.25, 0.75]);
        assert!((h - 0.5623351446188083).abs() < 1e-12);
    }

    #[test]
    fn conditional_entropy_examples() {
        let one_hot = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        assert_eq!(weighted_conditional_entropy(one_hot.view(), &[0.5, 2.0, 0.5]), 0.0);
        let uniform = array![[1.0 / 3.0; 3], [1.0 / 3.0; 3]];
        let h = weighted_conditional_entropy(uniform.view(), &[0.4, 1.6]);
        assert!((h - 3f64.ln()).abs() < 1e-12);
        let mixed = array![[0.5, 0.5], [1.0, 0.0]];
        let h = weighted_conditional_entropy(mixed.view(), &[1.0, 1.0]);
        assert!((h - 0.5 * 2f64.ln()).abs() < 1e-15);
        assert!((h - 0.3466).abs() < 1e-4);
    }

    #[test]
    fn kl_example() {
        let kl = kl_divergence(&[0.9, 0.1], &[0.5, 0.5]);
        let expected = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert!((kl - expected).abs() < 1e-15);
        assert!((kl - 0.3681).abs() < 1e-4);
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
    }

    fn bandit_net(seed: u64, lambda: f64) -> OptionNet {
        let spec = BimodalBandit::default().spec().clone();
        OptionNet::new(&spec, 3, &[6], 1e-3, lambda, 0.04, seed).unwrap()
    }

    #[test]
    fn zero_noise_gives_zero_vat() {
        let net = bandit_net(1, 0.1);
        let x = array![[0.0, 0.3], [0.0, -0.8]];
        assert_eq!(net.vat_penalty_with_noise(x.view(), Array2::zeros((2, 2)).view()), 0.0);
    }

    #[test]
    fn constant_net_has_zero_vat_and_zero_loss() {
        let spec = BimodalBandit::default().spec().clone();
        let (sizes, acts) = option_net_layers(2, 4, &[5]);
        let net = OptionNet::from_net(&spec, DenseNet::zeros(&sizes, &acts).unwrap(), 1e-3, 0.1, 0.04).unwrap();
        let batch = WeightedBatch::with_weights(array![[0.0, 0.2], [0.0, -0.9], [0.0, 0.5]], vec![0.2, 1.0, 3.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(net.vat_penalty(batch.inputs.view(), 0.04, &mut rng).unwrap(), 0.0);
        assert!(net.option_loss(&batch, &mut rng).abs() < 1e-15);
    }

    #[test]
    fn zero_lambda_loss_is_vat() {
        let net = bandit_net(3, 0.0);
        let batch = WeightedBatch::uniform(array![[0.0, 0.2], [0.0, -0.9], [0.0, 0.5]]);
        let noise = array![[0.1, -0.2], [0.05, 0.3], [-0.1, 0.0]];
        let terms = net.option_loss_terms(&batch, noise.view());
        assert_eq!(terms.loss, net.vat_penalty_with_noise(batch.inputs.view(), noise.view()));
    }

    #[test]
    fn option_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = bandit_net(4, 0.7);
        let inputs = Array2::from_shape_simple_fn((5, 2), || rng.random_range(-1.0..1.0));
        let batch = WeightedBatch::with_weights(inputs, vec![0.2, 1.5, 0.7, 2.0, 0.6]).unwrap();
        let noise = net.sample_vat_noise(5, 0.04, &mut rng);
        let (_, grads) = net.option_loss_grad(&batch, noise.view());
        let analytic = grads.flat();
        let base = net.net.params_flat();
        let h = 1e-5;
        for i in 0..base.len() {
            let mut probe = net.clone();
            let mut p = base.clone();
            p[i] += h;
            probe.net.set_params_flat(&p).unwrap();
            let up = probe.option_loss_terms(&batch, noise.view()).loss;
            p[i] -= 2.0 * h;
            probe.net.set_params_flat(&p).unwrap();
            let down = probe.option_loss_terms(&batch, noise.view()).loss;
            let fd = (up - down) / (2.0 * h);
            let err = (fd - analytic[i]).abs();
            assert!(err <= 1e-7 || err <= 1e-4 * fd.abs(), "param {i}: fd {fd}, analytic {}", analytic[i]);
        }
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let mut net = bandit_net(5, 0.1);
        let before = net.net.clone();
        let batch = WeightedBatch::uniform(array![[0.0, 0.1], [0.0, 0.2]]);
        let report = train_on_batch(&mut net, &batch, 0, 50, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(report.epoch_losses.is_empty());
        assert_eq!(net.net, before);
    }

    #[test]
    fn subset_renormalizes_weights() {
        let batch = WeightedBatch::with_weights(array![[0.0], [1.0], [2.0], [3.0]], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let sub = batch.subset(&[1, 3]);
        assert!((sub.weights.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        assert!((sub.weights[1] / sub.weights[0] - 2.0).abs() < 1e-12);
    }
}
