//! Twin Q-functions with target copies, trained by clipped double-Q
//! regression with target-policy smoothing.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::buffers::Transition;
use crate::error::{contract, Error, Result};
use crate::hpolicy::OptionPolicySet;
use crate::ndmath::{concat_cols, soft_update, stack_rows, Activation, AdamState, DenseNet};

/// Which Q estimate to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CriticHead {
    Q1,
    Q2,
    /// `min(q1, q2)` of the online networks.
    Min,
    /// `min(q1, q2)` of the target networks.
    MinTarget,
}

/// Settings for the temporal-difference target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TdSettings {
    pub gamma: f64,
    /// Smoothing noise standard deviation, in action half-range units.
    pub smoothing_sigma: f64,
    pub noise_clip: f64,
}

#[derive(Clone, Debug)]
pub struct TwinCritic {
    pub q1: DenseNet,
    pub q2: DenseNet,
    pub q1_target: DenseNet,
    pub q2_target: DenseNet,
    adam1: AdamState,
    adam2: AdamState,
    state_dim: usize,
    action_dim: usize,
}

pub(crate) fn critic_layers(state_dim: usize, action_dim: usize, hidden: &[usize]) -> (Vec<usize>, Vec<Activation>) {
    let mut sizes = vec![state_dim + action_dim];
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    let mut acts = vec![Activation::Relu; hidden.len()];
    acts.push(Activation::Identity);
    (sizes, acts)
}

impl TwinCritic {
    /// Targets start as exact copies of the online networks.
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], learning_rate: f64, seeds: [u64; 2]) -> Result<Self> {
        let (sizes, acts) = critic_layers(state_dim, action_dim, hidden);
        let q1 = DenseNet::new(&sizes, &acts, seeds[0])?;
        let q2 = DenseNet::new(&sizes, &acts, seeds[1])?;
        Self::from_nets([q1.clone(), q2.clone(), q1, q2], state_dim, action_dim, learning_rate)
    }

    /// Builds from `[q1, q2, q1_target, q2_target]` with fresh optimizer state.
    pub fn from_nets(nets: [DenseNet; 4], state_dim: usize, action_dim: usize, learning_rate: f64) -> Result<Self> {
        let [q1, q2, q1_target, q2_target] = nets;
        if !(q1.same_architecture(&q2) && q1.same_architecture(&q1_target) && q1.same_architecture(&q2_target)) {
            return Err(contract("twin critic networks must share one architecture"));
        }
        if q1.output_dim() != 1 || q1.input_dim() != state_dim + action_dim {
            return Err(contract("critic networks must map state and action to a scalar"));
        }
        Ok(TwinCritic {
            adam1: AdamState::new(&q1, learning_rate)?,
            adam2: AdamState::new(&q2, learning_rate)?,
            state_dim,
            action_dim,
            q1,
            q2,
            q1_target,
            q2_target,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn adam_states(&self) -> (&AdamState, &AdamState) {
        (&self.adam1, &self.adam2)
    }

    pub fn q_value(&self, state: &[f64], action: &[f64], head: CriticHead) -> Result<f64> {
        if state.len() != self.state_dim || action.len() != self.action_dim {
            return Err(contract(format!(
                "critic expects state/action of length {}/{}, got {}/{}",
                self.state_dim,
                self.action_dim,
                state.len(),
                action.len()
            )));
        }
        let s = stack_rows([state], self.state_dim);
        let a = stack_rows([action], self.action_dim);
        let q = self.q_batch(head, s.view(), a.view());
        if !q[0].is_finite() {
            return Err(Error::Numerical("critic produced a non-finite value".into()));
        }
        Ok(q[0])
    }

    /// Row-wise Q estimates for `(n, state_dim)` states and `(n, action_dim)` actions.
    pub fn q_batch(&self, head: CriticHead, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Array1<f64> {
        let x = concat_cols(states, actions);
        let eval = |net: &DenseNet| net.forward_batch(&x.view()).column(0).to_owned();
        match head {
            CriticHead::Q1 => eval(&self.q1),
            CriticHead::Q2 => eval(&self.q2),
            CriticHead::Min => {
                let (a, b) = (eval(&self.q1), eval(&self.q2));
                ndarray::Zip::from(&a).and(&b).map_collect(|&x, &y| x.min(y))
            }
            CriticHead::MinTarget => {
                let (a, b) = (eval(&self.q1_target), eval(&self.q2_target));
                ndarray::Zip::from(&a).and(&b).map_collect(|&x, &y| x.min(y))
            }
        }
    }

    /// Draws smoothing noise and evaluates the clipped double-Q targets.
    pub fn compute_td_target<R: Rng + ?Sized>(
        &self,
        batch: &[&Transition],
        policies: &OptionPolicySet,
        settings: TdSettings,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let noise = sample_smoothing_noise(batch.len(), self.action_dim, settings.smoothing_sigma, rng);
        self.td_targets_with_noise(batch, policies, settings, noise.view())
    }

    /// `y = r + γ(1 − terminal)·min_target(s', a')` where `a'` is the greedy
    /// target option's target action plus clipped `noise`.
    pub fn td_targets_with_noise(
        &self,
        batch: &[&Transition],
        policies: &OptionPolicySet,
        settings: TdSettings,
        noise: ArrayView2<f64>,
    ) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Err(contract("empty batch"));
        }
        if !(0.0..1.0).contains(&settings.gamma) {
            return Err(contract(format!("gamma must be in [0,1), got {}", settings.gamma)));
        }
        if noise.dim() != (batch.len(), self.action_dim) {
            return Err(contract("smoothing noise shape does not match the batch"));
        }
        let next_states = stack_rows(batch.iter().map(|t| t.next_state.as_slice()), self.state_dim);
        let (_, mut next_actions) = policies.greedy_target_actions(self, next_states.view());
        let (mid, half) = policies.action_scale();
        let c = settings.noise_clip;
        for (mut row, eps) in next_actions.rows_mut().into_iter().zip(noise.rows()) {
            for j in 0..row.len() {
                let applied = eps[j].clamp(-c, c) * half[j];
                row[j] = (row[j] + applied).clamp(mid[j] - half[j], mid[j] + half[j]);
            }
        }
        let q_next = self.q_batch(CriticHead::MinTarget, next_states.view(), next_actions.view());
        let targets: Vec<f64> = batch
            .iter()
            .zip(q_next.iter())
            .map(|(t, &q)| {
                if t.terminal {
                    t.reward
                } else {
                    t.reward + settings.gamma * q
                }
            })
            .collect();
        if targets.iter().any(|y| !y.is_finite()) {
            return Err(Error::Numerical("non-finite TD target".into()));
        }
        Ok(targets)
    }

    /// One Adam step per twin on the mean squared error to `targets`.
    /// Returns both losses evaluated before the step.
    pub fn critic_update(&mut self, batch: &[&Transition], targets: &[f64]) -> Result<(f64, f64)> {
        if batch.len() != targets.len() || batch.is_empty() {
            return Err(contract("targets must match a nonempty batch"));
        }
        let states = stack_rows(batch.iter().map(|t| t.state.as_slice()), self.state_dim);
        let actions = stack_rows(batch.iter().map(|t| t.action.as_slice()), self.action_dim);
        let x = concat_cols(states.view(), actions.view());
        let y = Array1::from(targets.to_vec());
        let n = batch.len() as f64;

        let mut losses = [0.0; 2];
        for (k, (net, adam)) in [(&mut self.q1, &mut self.adam1), (&mut self.q2, &mut self.adam2)]
            .into_iter()
            .enumerate()
        {
            let trace = net.forward_trace(x.view());
            let residual = &trace.output().column(0) - &y;
            let loss = residual.dot(&residual) / n;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "critic q{} loss is {loss} on a batch of {} (max |target| {:.3e})",
                    k + 1,
                    batch.len(),
                    y.iter().fold(0.0f64, |m, v| m.max(v.abs()))
                )));
            }
            losses[k] = loss;
            let g = (residual * (2.0 / n)).insert_axis(Axis(1));
            let grads = net.backward_trace(&trace, g);
            adam.step(net, &grads.params, false)?;
        }
        Ok((losses[0], losses[1]))
    }

    pub fn soft_update_targets(&mut self, tau: f64) -> Result<()> {
        soft_update(&mut self.q1_target, &self.q1, tau)?;
        soft_update(&mut self.q2_target, &self.q2, tau)
    }
}

/// `(n, action_dim)` draws from `N(0, sigma²)`; all zeros when `sigma` is 0.
pub fn sample_smoothing_noise<R: Rng + ?Sized>(n: usize, action_dim: usize, sigma: f64, rng: &mut R) -> Array2<f64> {
    if sigma == 0.0 {
        return Array2::zeros((n, action_dim));
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    Array2::from_shape_simple_fn((n, action_dim), || normal.sample(rng))
}
