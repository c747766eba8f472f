//! The training loop: exploration with held options, buffer management,
//! option-network rounds, critic updates every step and delayed actor and
//! target updates.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

use crate::buffers::{OnPolicyBuffer, ReplayBuffer, Transition, TransitionShape};
use crate::config::{ExperimentConfig, Mode};
use crate::critic::{sample_smoothing_noise, TdSettings, TwinCritic};
use crate::envsim::{make_env, EnvSpec, Environment};
use crate::error::{Error, Result};
use crate::hpolicy::{assign_options, sample_option, OptionPolicySet};
use crate::ndmath::stack_rows;
use crate::optionnet::{train_option_network, OptionNet, OptionTrainReport, Weighting};

/// Independent random streams of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RngStreams {
    pub env: ChaCha8Rng,
    pub explore: ChaCha8Rng,
    pub batch: ChaCha8Rng,
    pub option_noise: ChaCha8Rng,
    pub eval: ChaCha8Rng,
}

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const INIT_STREAM: u64 = 16;
const PROBE_STREAM: u64 = 17;
const PROBE_STATES: usize = 16;

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        RngStreams {
            env: stream(seed, 0),
            explore: stream(seed, 1),
            batch: stream(seed, 2),
            option_noise: stream(seed, 3),
            eval: stream(seed, 4),
        }
    }

    pub fn named(&self) -> [(&'static str, &ChaCha8Rng); 5] {
        [
            ("env", &self.env),
            ("explore", &self.explore),
            ("batch", &self.batch),
            ("option_noise", &self.option_noise),
            ("eval", &self.eval),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut ChaCha8Rng); 5] {
        [
            ("env", &mut self.env),
            ("explore", &mut self.explore),
            ("batch", &mut self.batch),
            ("option_noise", &mut self.option_noise),
            ("eval", &mut self.eval),
        ]
    }
}

/// Exploration noise clipped to `[−c, c]`.
pub fn clip_noise(noise: f64, clip: f64) -> f64 {
    noise.clamp(-clip, clip)
}

/// Log-density of one coordinate of clipped Gaussian noise, measured in
/// action units. Clipped draws carry the tail mass `Φ(−c/σ)`.
pub fn clipped_gaussian_log_density(raw_noise: f64, sigma: f64, clip: f64, half_range: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    if raw_noise.abs() < clip {
        let z = raw_noise / sigma;
        -0.5 * z * z - (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln() - half_range.ln()
    } else {
        let tail = StatNormal::new(0.0, 1.0).expect("standard normal").cdf(-clip / sigma);
        tail.max(f64::MIN_POSITIVE).ln()
    }
}

/// An exploratory action, the option that produced it, and `log β(a|s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExploreAction {
    pub action: Vec<f64>,
    pub option: usize,
    pub log_density: f64,
}

/// Return statistics of deterministic evaluation episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalStats {
    pub returns: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Fraction of episodes that ended in a terminal state.
    pub terminal_rate: f64,
    /// Fraction of evaluation steps spent in each option.
    pub option_usage: Vec<f64>,
}

/// Metrics for one evaluation interval.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub step: u64,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    pub terminal_rate: f64,
    pub critic_loss_1: f64,
    pub critic_loss_2: f64,
    pub option_loss: f64,
    pub mi_estimate: f64,
    pub option_usage: Vec<f64>,
    pub option_action_separation: f64,
}

impl EvalRecord {
    pub fn values(&self) -> Vec<f64> {
        let mut v = vec![
            self.step as f64,
            self.eval_return_mean,
            self.eval_return_std,
            self.critic_loss_1,
            self.critic_loss_2,
            self.option_loss,
            self.mi_estimate,
        ];
        v.extend(&self.option_usage);
        v.push(self.option_action_separation);
        v.push(self.terminal_rate);
        v
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|x| x.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub mode: Mode,
    pub seed: u64,
    pub records: Vec<EvalRecord>,
    pub option_trainings: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct IntervalStats {
    critic_loss_sum: [f64; 2],
    critic_updates: usize,
    option_loss: f64,
    mi_estimate: f64,
}

/// Outcome of a single [`Agent::train_step`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepInfo {
    pub reward: f64,
    pub option: usize,
    pub episode_done: bool,
    pub critic_updated: bool,
    pub actors_updated: bool,
    pub option_report: Option<OptionTrainReport>,
}

#[derive(Clone, Debug)]
pub struct Agent {
    config: ExperimentConfig,
    seed: u64,
    spec: EnvSpec,
    pub critic: TwinCritic,
    pub policies: OptionPolicySet,
    pub option_net: Option<OptionNet>,
    pub replay: ReplayBuffer,
    pub on_policy: Option<OnPolicyBuffer>,
    step_count: u64,
    critic_updates: u64,
    option_trainings: usize,
    current_option: usize,
    steps_since_option_draw: usize,
    state: Option<Vec<f64>>,
    pub rngs: RngStreams,
    probe_states: Array2<f64>,
    stats: IntervalStats,
}

impl Agent {
    pub fn new(config: ExperimentConfig, seed: u64) -> Result<Self> {
        let config = config.resolve()?;
        let env = make_env(&config.env_name, &config.task_params())?;
        let spec = env.spec().clone();
        let options = config.effective_option_count();
        let mut init = stream(seed, INIT_STREAM);
        let critic = TwinCritic::new(
            spec.state_dim,
            spec.action_dim,
            &config.hidden_sizes,
            config.critic_lr,
            [init.random(), init.random()],
        )?;
        let policy_seeds: Vec<u64> = (0..options).map(|_| init.random()).collect();
        let policies = OptionPolicySet::new(
            &spec,
            options,
            &config.hidden_sizes,
            config.actor_lr,
            config.option_init_spread,
            &policy_seeds,
        )?;
        let option_net = match config.mode {
            Mode::Td3 => None,
            _ => Some(OptionNet::new(
                &spec,
                options,
                &config.hidden_sizes,
                config.option_lr,
                config.lambda_mi,
                config.vat_noise_variance,
                init.random(),
            )?),
        };
        Self::assemble(config, seed, spec, critic, policies, option_net)
    }

    pub(crate) fn assemble(
        config: ExperimentConfig,
        seed: u64,
        spec: EnvSpec,
        critic: TwinCritic,
        policies: OptionPolicySet,
        option_net: Option<OptionNet>,
    ) -> Result<Self> {
        let options = config.effective_option_count();
        let shape = TransitionShape {
            state_dim: spec.state_dim,
            action_dim: spec.action_dim,
            option_count: options,
        };
        let on_policy = match config.mode {
            Mode::Td3 => None,
            _ => Some(OnPolicyBuffer::new(shape, config.on_policy_capacity)?),
        };
        let mut probe_env = make_env(&config.env_name, &config.task_params())?;
        let mut probe_rng = stream(seed, PROBE_STREAM);
        let probes: Vec<Vec<f64>> = (0..PROBE_STATES).map(|_| probe_env.reset(&mut probe_rng)).collect();
        let probe_states = stack_rows(probes.iter().map(|p| p.as_slice()), spec.state_dim);
        Ok(Agent {
            replay: ReplayBuffer::new(shape, config.replay_capacity)?,
            on_policy,
            step_count: 0,
            critic_updates: 0,
            option_trainings: 0,
            current_option: 0,
            steps_since_option_draw: 0,
            state: None,
            rngs: RngStreams::new(seed),
            probe_states,
            stats: IntervalStats::default(),
            config,
            seed,
            spec,
            critic,
            policies,
            option_net,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub(crate) fn set_step_count(&mut self, steps: u64) {
        self.step_count = steps;
    }

    pub fn critic_updates(&self) -> u64 {
        self.critic_updates
    }

    pub fn option_trainings(&self) -> usize {
        self.option_trainings
    }

    pub fn current_option(&self) -> usize {
        self.current_option
    }

    pub fn make_env(&self) -> Result<Box<dyn Environment>> {
        make_env(&self.config.env_name, &self.config.task_params())
    }

    fn warming_up(&self) -> bool {
        self.replay.len() < self.config.warmup_threshold()
    }

    /// Forces an option redraw on the next action.
    pub fn begin_episode(&mut self) {
        self.steps_since_option_draw = 0;
    }

    /// Picks an option (redrawn from the gating policy every `option_hold`
    /// steps) and perturbs its action with clipped Gaussian noise. During
    /// warm-up the action is uniform over the bounds instead.
    pub fn act_explore(&mut self, state: &[f64]) -> Result<ExploreAction> {
        if self.steps_since_option_draw == 0 {
            let gating = self.policies.gating(&self.critic, state)?;
            self.current_option = sample_option(&gating, &mut self.rngs.explore);
        }
        self.steps_since_option_draw = (self.steps_since_option_draw + 1) % self.config.option_hold;
        let o = self.current_option;
        let (low, high) = (&self.spec.action_low, &self.spec.action_high);

        if self.warming_up() {
            let action: Vec<f64> = low
                .iter()
                .zip(high)
                .map(|(&lo, &hi)| self.rngs.explore.random_range(lo..hi))
                .collect();
            let log_density = -low.iter().zip(high).map(|(lo, hi)| (hi - lo).ln()).sum::<f64>();
            return Ok(ExploreAction {
                action,
                option: o,
                log_density,
            });
        }

        let mean = self.policies.option_action(o, state)?;
        let sigma = self.config.exploration_sigma;
        let clip = self.config.noise_clip;
        let (_, half) = self.spec.action_scale();
        let mut action = Vec::with_capacity(mean.len());
        let mut log_density = 0.0;
        for (j, m) in mean.iter().enumerate() {
            let raw = if sigma > 0.0 {
                Normal::new(0.0, sigma).expect("sigma is positive").sample(&mut self.rngs.explore)
            } else {
                0.0
            };
            log_density += clipped_gaussian_log_density(raw, sigma, clip, half[j]);
            action.push((m + clip_noise(raw, clip) * half[j]).clamp(low[j], high[j]));
        }
        Ok(ExploreAction {
            action,
            option: o,
            log_density,
        })
    }

    /// One environment step followed by whatever learning is due.
    pub fn train_step(&mut self, env: &mut dyn Environment) -> Result<StepInfo> {
        let state = match self.state.take() {
            Some(s) => s,
            None => {
                self.begin_episode();
                env.reset(&mut self.rngs.env)
            }
        };
        let explore = self.act_explore(&state)?;
        let result = env.step(&explore.action)?;
        let transition = Transition {
            state,
            action: explore.action,
            reward: result.reward,
            next_state: result.next_state.clone(),
            terminal: result.terminal,
            behavior_log_density: explore.log_density,
            option_id: explore.option,
        };
        if let Some(on) = &mut self.on_policy {
            on.push(transition.clone())?;
        }
        self.replay.push(transition)?;
        self.step_count += 1;
        let done = result.done();
        self.state = if done { None } else { Some(result.next_state) };

        let mut info = StepInfo {
            reward: result.reward,
            option: explore.option,
            episode_done: done,
            ..StepInfo::default()
        };
        if self.on_policy.as_ref().is_some_and(|b| b.is_full()) {
            info.option_report = Some(self.train_options()?);
        }
        if !self.warming_up() {
            let (critic_batch, noise) = self.sample_critic_batch();
            let actor_batch = if (self.critic_updates + 1).is_multiple_of(self.config.policy_delay as u64) {
                Some(self.sample_actor_batch())
            } else {
                None
            };
            self.update_on_batch(&critic_batch, &noise, actor_batch.as_deref())?;
            info.critic_updated = true;
            info.actors_updated = actor_batch.is_some();
        }
        Ok(info)
    }

    fn sample_critic_batch(&mut self) -> (Vec<Transition>, Array2<f64>) {
        let batch: Vec<Transition> = self
            .replay
            .sample(self.config.critic_batch, &mut self.rngs.batch)
            .expect("warm-up guarantees enough samples")
            .into_iter()
            .cloned()
            .collect();
        let noise = sample_smoothing_noise(
            batch.len(),
            self.spec.action_dim,
            self.config.target_noise_sigma,
            &mut self.rngs.batch,
        );
        (batch, noise)
    }

    fn sample_actor_batch(&mut self) -> Vec<Transition> {
        self.replay
            .sample(self.config.actor_batch_total(), &mut self.rngs.batch)
            .expect("warm-up guarantees enough samples")
            .into_iter()
            .cloned()
            .collect()
    }

    /// One critic update on `critic_batch` with fixed smoothing `noise`;
    /// when `actor_batch` is given, also assigns its samples to options,
    /// takes a policy-gradient step per option and soft-updates every
    /// target network.
    pub fn update_on_batch(
        &mut self,
        critic_batch: &[Transition],
        noise: &Array2<f64>,
        actor_batch: Option<&[Transition]>,
    ) -> Result<(f64, f64)> {
        let refs: Vec<&Transition> = critic_batch.iter().collect();
        let settings = TdSettings {
            gamma: self.config.gamma,
            smoothing_sigma: self.config.target_noise_sigma,
            noise_clip: self.config.noise_clip,
        };
        let targets = self
            .critic
            .td_targets_with_noise(&refs, &self.policies, settings, noise.view())?;
        let losses = self.critic.critic_update(&refs, &targets)?;
        self.critic_updates += 1;
        self.stats.critic_loss_sum[0] += losses.0;
        self.stats.critic_loss_sum[1] += losses.1;
        self.stats.critic_updates += 1;

        if let Some(batch) = actor_batch {
            let states = stack_rows(batch.iter().map(|t| t.state.as_slice()), self.spec.state_dim);
            let assignments = match &self.option_net {
                Some(net) => {
                    let actions = stack_rows(batch.iter().map(|t| t.action.as_slice()), self.spec.action_dim);
                    assign_options(net, states.view(), actions.view())
                }
                None => vec![0; batch.len()],
            };
            self.policies.dpg_update(&self.critic, states.view(), &assignments)?;
            self.critic.soft_update_targets(self.config.tau)?;
            self.policies.soft_update_targets(self.config.tau)?;
        }
        Ok(losses)
    }

    /// Trains the option network on the full on-policy buffer, then clears it.
    pub fn train_options(&mut self) -> Result<OptionTrainReport> {
        let weighting = match self.config.mode {
            Mode::AdInfoHrl => Weighting::Advantage,
            _ => Weighting::Uniform,
        };
        let (Some(net), Some(buffer)) = (self.option_net.as_mut(), self.on_policy.as_mut()) else {
            return Err(Error::Contract("option network is disabled in this mode".into()));
        };
        let report = train_option_network(
            net,
            buffer,
            &self.critic,
            &self.policies,
            weighting,
            self.config.option_epochs,
            self.config.option_batch,
            &mut self.rngs.option_noise,
        )?;
        buffer.clear();
        self.option_trainings += 1;
        self.stats.option_loss = report.epoch_losses.last().copied().unwrap_or(report.final_terms.loss);
        self.stats.mi_estimate = report.final_terms.mutual_information();
        Ok(report)
    }

    /// Runs `episodes` episodes without action noise, choosing options by
    /// the greedy rule every `option_hold` steps.
    pub fn evaluate<R: Rng + ?Sized>(&self, env: &mut dyn Environment, episodes: usize, rng: &mut R) -> Result<EvalStats> {
        if episodes == 0 {
            return Err(Error::Contract("evaluation needs at least one episode".into()));
        }
        let mut env_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let mut returns = Vec::with_capacity(episodes);
        let mut usage = vec![0usize; self.policies.option_count()];
        let mut terminals = 0usize;
        for _ in 0..episodes {
            let mut state = env.reset(&mut env_rng);
            let mut total = 0.0;
            let mut option = 0;
            for t in 0.. {
                if t % self.config.option_hold == 0 {
                    option = self.policies.greedy_option(&self.critic, &state)?;
                }
                usage[option] += 1;
                let action = self.policies.option_action(option, &state)?;
                let r = env.step(&action)?;
                total += r.reward;
                if r.done() {
                    terminals += usize::from(r.terminal);
                    break;
                }
                state = r.next_state;
            }
            returns.push(total);
        }
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        let steps: usize = usage.iter().sum();
        Ok(EvalStats {
            mean,
            std: var.sqrt(),
            terminal_rate: terminals as f64 / n,
            option_usage: usage.iter().map(|&c| c as f64 / steps as f64).collect(),
            returns,
        })
    }

    /// Mean pairwise distance between option actions, averaged over the
    /// fixed probe states. Zero with a single option.
    pub fn option_action_separation(&self) -> f64 {
        let o_count = self.policies.option_count();
        if o_count < 2 {
            return 0.0;
        }
        let actions: Vec<Array2<f64>> = (0..o_count)
            .map(|o| self.policies.actions_batch(o, self.probe_states.view(), false))
            .collect();
        let mut total = 0.0;
        let mut pairs = 0usize;
        for i in 0..o_count {
            for j in (i + 1)..o_count {
                let diff = &actions[i] - &actions[j];
                total += diff
                    .rows()
                    .into_iter()
                    .map(|r| r.dot(&r).sqrt())
                    .sum::<f64>()
                    / diff.nrows() as f64;
                pairs += 1;
            }
        }
        total / pairs as f64
    }

    fn record(&mut self, eval: &EvalStats) -> EvalRecord {
        let updates = self.stats.critic_updates.max(1) as f64;
        let rec = EvalRecord {
            step: self.step_count,
            eval_return_mean: eval.mean,
            eval_return_std: eval.std,
            terminal_rate: eval.terminal_rate,
            critic_loss_1: self.stats.critic_loss_sum[0] / updates,
            critic_loss_2: self.stats.critic_loss_sum[1] / updates,
            option_loss: self.stats.option_loss,
            mi_estimate: self.stats.mi_estimate,
            option_usage: eval.option_usage.clone(),
            option_action_separation: self.option_action_separation(),
        };
        self.stats.critic_loss_sum = [0.0; 2];
        self.stats.critic_updates = 0;
        rec
    }

    /// Trains for `total_steps`, evaluating every `eval_interval` steps and
    /// handing each record to `observer`.
    pub fn run(&mut self, observer: &mut dyn FnMut(&Agent, &EvalRecord) -> Result<()>) -> Result<TrainReport> {
        let mut env = self.make_env()?;
        let mut eval_env = self.make_env()?;
        let mut records = Vec::new();
        while self.step_count < self.config.total_steps as u64 {
            self.train_step(env.as_mut())?;
            if self.step_count.is_multiple_of(self.config.eval_interval as u64) {
                let mut eval_rng = self.rngs.eval.clone();
                let stats = self.evaluate(eval_env.as_mut(), self.config.eval_episodes, &mut eval_rng)?;
                self.rngs.eval = eval_rng;
                let rec = self.record(&stats);
                if !rec.all_finite() {
                    return Err(Error::Numerical(format!("non-finite metrics at step {}", rec.step)));
                }
                observer(self, &rec)?;
                records.push(rec);
            }
        }
        Ok(TrainReport {
            mode: self.config.mode,
            seed: self.seed,
            records,
            option_trainings: self.option_trainings,
        })
    }
}

/// Builds an agent for `seed` and trains it to completion.
pub fn run_training(config: &ExperimentConfig, seed: u64) -> Result<TrainReport> {
    Agent::new(config.clone(), seed)?.run(&mut |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_noise() {
        assert_eq!(clip_noise(0.8, 0.5), 0.5);
        assert_eq!(clip_noise(-0.8, 0.5), -0.5);
        assert_eq!(clip_noise(0.2, 0.5), 0.2);
    }

    #[test]
    fn clipped_density_inside_and_at_the_clip() {
        let inside = clipped_gaussian_log_density(0.05, 0.1, 0.5, 1.0);
        let normal = StatNormal::new(0.0, 0.1).unwrap();
        use statrs::distribution::Continuous;
        assert!((inside - normal.ln_pdf(0.05)).abs() < 1e-12);
        let tail = clipped_gaussian_log_density(0.8, 0.1, 0.5, 1.0);
        assert!((tail - StatNormal::new(0.0, 1.0).unwrap().cdf(-5.0).ln()).abs() < 1e-12);
        assert_eq!(clipped_gaussian_log_density(0.0, 0.0, 0.5, 1.0), 0.0);
    }
}
