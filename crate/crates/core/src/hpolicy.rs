//! Deterministic option policies, the softmax gating policy derived from
//! the critic, and the per-option deterministic policy gradient.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::critic::{CriticHead, TwinCritic};
use crate::envsim::EnvSpec;
use crate::error::{contract, Error, Result};
use crate::ndmath::{concat_cols, soft_update, stack_rows, Activation, AdamState, DenseNet, ParamGrads};
use crate::optionnet::OptionNet;

/// Gating probabilities for one state and the option values they come from.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingDistribution {
    pub probs: Vec<f64>,
    pub option_values: Vec<f64>,
}

impl GatingDistribution {
    /// `probs = softmax(option_values)`, computed after subtracting the max.
    pub fn from_values(option_values: Vec<f64>) -> Self {
        let max = option_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = option_values.iter().map(|q| (q - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        GatingDistribution {
            probs: exps.iter().map(|e| e / sum).collect(),
            option_values,
        }
    }

    pub fn greedy(&self) -> usize {
        argmax(&self.option_values)
    }

    /// `Σ_o π(o|s)·Q(s, μ^o(s))`.
    pub fn expected_value(&self) -> f64 {
        self.probs.iter().zip(&self.option_values).map(|(p, q)| p * q).sum()
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn sample_option<R: Rng + ?Sized>(gating: &GatingDistribution, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (o, &p) in gating.probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return o;
        }
    }
    // Rounding left `acc` slightly below 1; fall back to the last option with mass.
    gating.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Hard assignment `argmax_o p(o|s,a)` per row.
pub fn assign_options(option_net: &OptionNet, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Vec<usize> {
    let post = option_net.posteriors_for(states, actions);
    post.rows().into_iter().map(|r| argmax(&r.to_vec())).collect()
}

/// The `O` option-policy networks `μ^o(s)` and their target copies.
#[derive(Clone, Debug)]
pub struct OptionPolicySet {
    policies: Vec<DenseNet>,
    targets: Vec<DenseNet>,
    adams: Vec<AdamState>,
    action_mid: Vec<f64>,
    action_half: Vec<f64>,
}

pub(crate) fn policy_layers(state_dim: usize, action_dim: usize, hidden: &[usize]) -> (Vec<usize>, Vec<Activation>) {
    let mut sizes = vec![state_dim];
    sizes.extend_from_slice(hidden);
    sizes.push(action_dim);
    let mut acts = vec![Activation::Relu; hidden.len()];
    acts.push(Activation::Tanh);
    (sizes, acts)
}

impl OptionPolicySet {
    /// Option `o` starts with output biases placing its initial action at
    /// `spread·(2(o + ½)/O − 1)` of the half-range around the action midpoint.
    pub fn new(spec: &EnvSpec, option_count: usize, hidden: &[usize], learning_rate: f64, init_spread: f64, seeds: &[u64]) -> Result<Self> {
        if option_count == 0 || seeds.len() != option_count {
            return Err(Error::Config("need one seed per option and at least one option".into()));
        }
        let (sizes, acts) = policy_layers(spec.state_dim, spec.action_dim, hidden);
        let last = sizes.len() - 2;
        let mut policies = Vec::with_capacity(option_count);
        for (o, &seed) in seeds.iter().enumerate() {
            let mut net = DenseNet::new(&sizes, &acts, seed)?;
            let offset = init_spread * (2.0 * (o as f64 + 0.5) / option_count as f64 - 1.0);
            net.biases_mut(last).fill(offset.atanh());
            policies.push(net);
        }
        Self::from_nets(spec, policies.clone(), policies, learning_rate)
    }

    pub fn from_nets(spec: &EnvSpec, policies: Vec<DenseNet>, targets: Vec<DenseNet>, learning_rate: f64) -> Result<Self> {
        if policies.is_empty() || policies.len() != targets.len() {
            return Err(contract("need matching, nonempty online and target policy lists"));
        }
        let arch = &policies[0];
        if arch.input_dim() != spec.state_dim || arch.output_dim() != spec.action_dim {
            return Err(contract("policy networks do not match the environment"));
        }
        if *arch.activations().last().unwrap() != Activation::Tanh {
            return Err(contract("policy networks need a tanh output layer"));
        }
        if policies.iter().chain(&targets).any(|p| !p.same_architecture(arch)) {
            return Err(contract("all option policies must share one architecture"));
        }
        let (action_mid, action_half) = spec.action_scale();
        let adams = policies
            .iter()
            .map(|p| AdamState::new(p, learning_rate))
            .collect::<Result<_>>()?;
        Ok(OptionPolicySet {
            policies,
            targets,
            adams,
            action_mid,
            action_half,
        })
    }

    pub fn option_count(&self) -> usize {
        self.policies.len()
    }

    pub fn policy(&self, o: usize) -> &DenseNet {
        &self.policies[o]
    }

    pub fn policy_mut(&mut self, o: usize) -> &mut DenseNet {
        &mut self.policies[o]
    }

    pub fn target(&self, o: usize) -> &DenseNet {
        &self.targets[o]
    }

    pub fn adam(&self, o: usize) -> &AdamState {
        &self.adams[o]
    }

    pub fn action_scale(&self) -> (&[f64], &[f64]) {
        (&self.action_mid, &self.action_half)
    }

    fn state_dim(&self) -> usize {
        self.policies[0].input_dim()
    }

    fn scale_actions(&self, mut raw: Array2<f64>) -> Array2<f64> {
        for mut row in raw.rows_mut() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = self.action_mid[j] + self.action_half[j] * *x;
            }
        }
        raw
    }

    /// `μ^o(s)`: the tanh output scaled to the action bounds.
    pub fn option_action(&self, o: usize, state: &[f64]) -> Result<Vec<f64>> {
        if o >= self.option_count() {
            return Err(contract(format!("option {o} out of range for {} options", self.option_count())));
        }
        let raw = self.policies[o].forward(state)?;
        Ok(raw
            .iter()
            .enumerate()
            .map(|(j, y)| self.action_mid[j] + self.action_half[j] * y)
            .collect())
    }

    pub fn actions_batch(&self, o: usize, states: ArrayView2<f64>, use_target: bool) -> Array2<f64> {
        let net = if use_target { &self.targets[o] } else { &self.policies[o] };
        self.scale_actions(net.forward_batch(&states))
    }

    /// `(n, O)` matrix of `Q(s, μ^o(s))` for online or target networks.
    fn option_value_matrix(&self, critic: &TwinCritic, states: ArrayView2<f64>, head: CriticHead, use_target: bool) -> Array2<f64> {
        let n = states.nrows();
        let mut values = Array2::zeros((n, self.option_count()));
        for o in 0..self.option_count() {
            let actions = self.actions_batch(o, states, use_target);
            values.column_mut(o).assign(&critic.q_batch(head, states, actions.view()));
        }
        values
    }

    /// Greedy target option per row and its target action, as used by the
    /// TD target.
    pub fn greedy_target_actions(&self, critic: &TwinCritic, states: ArrayView2<f64>) -> (Vec<usize>, Array2<f64>) {
        if self.option_count() == 1 {
            return (vec![0; states.nrows()], self.actions_batch(0, states, true));
        }
        let per_option: Vec<Array2<f64>> = (0..self.option_count())
            .map(|o| self.actions_batch(o, states, true))
            .collect();
        let mut values = Array2::zeros((states.nrows(), self.option_count()));
        for (o, actions) in per_option.iter().enumerate() {
            values
                .column_mut(o)
                .assign(&critic.q_batch(CriticHead::MinTarget, states, actions.view()));
        }
        let chosen: Vec<usize> = values.rows().into_iter().map(|r| argmax(&r.to_vec())).collect();
        let mut out = Array2::zeros((states.nrows(), self.action_mid.len()));
        for (i, &o) in chosen.iter().enumerate() {
            out.row_mut(i).assign(&per_option[o].row(i));
        }
        (chosen, out)
    }

    fn check_state(&self, state: &[f64]) -> Result<()> {
        if state.len() != self.state_dim() {
            return Err(contract(format!("state has length {}, expected {}", state.len(), self.state_dim())));
        }
        Ok(())
    }

    /// Softmax gating over `Q_min(s, μ^o(s))`.
    pub fn gating(&self, critic: &TwinCritic, state: &[f64]) -> Result<GatingDistribution> {
        self.check_state(state)?;
        let s = stack_rows([state], state.len());
        let values = self.option_value_matrix(critic, s.view(), CriticHead::Min, false);
        let values = values.row(0).to_vec();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite option value".into()));
        }
        Ok(GatingDistribution::from_values(values))
    }

    pub fn greedy_option(&self, critic: &TwinCritic, state: &[f64]) -> Result<usize> {
        Ok(self.gating(critic, state)?.greedy())
    }

    pub fn state_value(&self, critic: &TwinCritic, state: &[f64]) -> Result<f64> {
        Ok(self.gating(critic, state)?.expected_value())
    }

    /// `V(s)` for each row of `states`.
    pub fn state_values(&self, critic: &TwinCritic, states: ArrayView2<f64>) -> Array1<f64> {
        let values = self.option_value_matrix(critic, states, CriticHead::Min, false);
        values
            .rows()
            .into_iter()
            .map(|r| GatingDistribution::from_values(r.to_vec()).expected_value())
            .collect()
    }

    /// Mean `Q1(s, μ^o(s))` over `states` and its gradient with respect to
    /// the parameters of option `o`.
    pub fn policy_gradient(&self, o: usize, critic: &TwinCritic, states: ArrayView2<f64>) -> (f64, ParamGrads) {
        let n = states.nrows();
        let policy = &self.policies[o];
        let trace = policy.forward_trace(states);
        let actions = self.scale_actions(trace.output().clone());
        let x = concat_cols(states, actions.view());
        let q_trace = critic.q1.forward_trace(x.view());
        let objective = q_trace.output().column(0).sum() / n as f64;
        let dq = critic
            .q1
            .backward_inputs(&q_trace, Array2::from_elem((n, 1), 1.0 / n as f64));
        let mut da = dq.slice(ndarray::s![.., states.ncols()..]).to_owned();
        for mut row in da.rows_mut() {
            for (j, g) in row.iter_mut().enumerate() {
                *g *= self.action_half[j];
            }
        }
        let grads = policy.backward_trace(&trace, da);
        (objective, grads.params)
    }

    /// One Adam ascent step per option on the states assigned to it; options
    /// without samples are skipped. Returns which options were updated.
    pub fn dpg_update(&mut self, critic: &TwinCritic, states: ArrayView2<f64>, assignments: &[usize]) -> Result<Vec<bool>> {
        if assignments.len() != states.nrows() {
            return Err(contract("one assignment per state is required"));
        }
        if let Some(&bad) = assignments.iter().find(|&&o| o >= self.option_count()) {
            return Err(contract(format!("assignment to unknown option {bad}")));
        }
        let mut updated = vec![false; self.option_count()];
        for o in 0..self.option_count() {
            let rows: Vec<usize> = (0..assignments.len()).filter(|&i| assignments[i] == o).collect();
            if rows.is_empty() {
                continue;
            }
            let subset = if rows.len() == states.nrows() {
                states.to_owned()
            } else {
                states.select(Axis(0), &rows)
            };
            let (_, grads) = self.policy_gradient(o, critic, subset.view());
            self.adams[o]
                .step(&mut self.policies[o], &grads, true)
                .map_err(|e| match e {
                    Error::Numerical(msg) => Error::Numerical(format!("option {o}: {msg}")),
                    other => other,
                })?;
            updated[o] = true;
        }
        Ok(updated)
    }

    pub fn soft_update_targets(&mut self, tau: f64) -> Result<()> {
        for (t, p) in self.targets.iter_mut().zip(&self.policies) {
            soft_update(t, p, tau)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{BimodalBandit, Environment};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bandit_spec() -> EnvSpec {
        BimodalBandit::default().spec().clone()
    }

    #[test]
    fn two_way_softmax_values() {
        let g = GatingDistribution::from_values(vec![1.0, 2.0]);
        assert!((g.probs[0] - 0.2689414213699951).abs() < 1e-12);
        assert!((g.probs[1] - 0.7310585786300049).abs() < 1e-12);
        let shifted = GatingDistribution::from_values(vec![101.0, 102.0]);
        for (a, b) in g.probs.iter().zip(&shifted.probs) {
            assert!((a - b).abs() < 1e-12);
        }
        let eq = GatingDistribution::from_values(vec![0.3; 4]);
        assert!(eq.probs.iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn mixture_value_of_two_options() {
        let g = GatingDistribution::from_values(vec![1.0, 3.0]);
        let p_low = 1.0 / (1.0 + 2f64.exp());
        let expected = p_low * 1.0 + (1.0 - p_low) * 3.0;
        assert!((g.expected_value() - expected).abs() < 1e-12);
        assert!((g.expected_value() - 2.7616).abs() < 1e-4);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[2.0, 5.0, 3.0]), 1);
        assert_eq!(argmax(&[4.0, 4.0]), 0);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.9, 0.1]), 0);
    }

    #[test]
    fn degenerate_gating_always_picks_that_option() {
        let g = GatingDistribution {
            probs: vec![1.0, 0.0],
            option_values: vec![0.0, -1e9],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..1000).all(|_| sample_option(&g, &mut rng) == 0));
    }

    #[test]
    fn option_draws_follow_probabilities() {
        let g = GatingDistribution::from_values(vec![0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let ones = (0..n).filter(|_| sample_option(&g, &mut rng) == 1).count();
        assert!((ones as f64 / n as f64 - 0.5).abs() < 0.01);

        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let g = GatingDistribution::from_values(vec![0.1, 0.7, -0.2]);
        let xs: Vec<usize> = (0..50).map(|_| sample_option(&g, &mut a)).collect();
        let ys: Vec<usize> = (0..50).map(|_| sample_option(&g, &mut b)).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn zero_policy_outputs_action_midpoint() {
        let spec = bandit_spec();
        let (sizes, acts) = policy_layers(1, 1, &[4]);
        let zero = DenseNet::zeros(&sizes, &acts).unwrap();
        let set = OptionPolicySet::from_nets(&spec, vec![zero.clone()], vec![zero], 1e-3).unwrap();
        assert_eq!(set.option_action(0, &[0.3]).unwrap(), vec![0.0]);
        assert!(matches!(set.option_action(1, &[0.3]), Err(Error::Contract(_))));
    }

    #[test]
    fn initial_actions_are_spread() {
        let spec = bandit_spec();
        let set = OptionPolicySet::new(&spec, 2, &[8, 8], 1e-3, 0.5, &[1, 2]).unwrap();
        let a0 = set.option_action(0, &[0.0]).unwrap()[0];
        let a1 = set.option_action(1, &[0.0]).unwrap()[0];
        assert!((a0 + 0.25).abs() < 1e-12 && (a1 - 0.25).abs() < 1e-12);
        let single = OptionPolicySet::new(&spec, 1, &[8], 1e-3, 0.5, &[1]).unwrap();
        assert_eq!(single.option_action(0, &[0.0]).unwrap()[0], 0.0);
    }

    #[test]
    fn actions_stay_in_bounds_and_are_deterministic() {
        let spec = crate::envsim::TwoGoalPointMass::default().spec().clone();
        let set = OptionPolicySet::new(&spec, 2, &[16], 1e-3, 0.5, &[5, 6]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            let s = [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)];
            for o in 0..2 {
                let a = set.option_action(o, &s).unwrap();
                assert!(a.iter().all(|x| (-0.1..=0.1).contains(x)));
            }
        }
        assert_eq!(set.option_action(1, &[0.2, 0.3]).unwrap(), set.option_action(1, &[0.2, 0.3]).unwrap());
    }
}
