//! Continuous-control tasks whose optimal advantage function has several
//! modes.

use rand::{Rng, RngCore};

use crate::error::{contract, Error, Result};

/// State/action dimensions, action bounds and episode horizon of a task.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub max_episode_steps: usize,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.action_dim == 0 || self.max_episode_steps == 0 {
            return Err(Error::Config("environment dimensions and horizon must be positive".into()));
        }
        if self.action_low.len() != self.action_dim || self.action_high.len() != self.action_dim {
            return Err(Error::Config("action bounds do not match action_dim".into()));
        }
        if self.action_low.iter().zip(&self.action_high).any(|(l, h)| !(l < h)) {
            return Err(Error::Config("action_low must be below action_high".into()));
        }
        Ok(())
    }

    pub fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(&a, (&lo, &hi))| a.clamp(lo, hi))
            .collect()
    }

    /// Midpoint and half-width of each action dimension.
    pub fn action_scale(&self) -> (Vec<f64>, Vec<f64>) {
        self.action_low
            .iter()
            .zip(&self.action_high)
            .map(|(&lo, &hi)| (0.5 * (lo + hi), 0.5 * (hi - lo)))
            .unzip()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    pub reward: f64,
    /// The task reached an absorbing state.
    pub terminal: bool,
    /// The horizon cut the episode short; the state is not absorbing.
    pub truncated: bool,
}

impl StepResult {
    pub fn done(&self) -> bool {
        self.terminal || self.truncated
    }
}

pub trait Environment: Send {
    fn spec(&self) -> &EnvSpec;

    /// Starts a new episode, drawing the initial state from `rng`.
    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64>;

    /// Advances one step. Actions are clipped to the bounds internally.
    fn step(&mut self, action: &[f64]) -> Result<StepResult>;
}

fn check_action(spec: &EnvSpec, action: &[f64]) -> Result<()> {
    if action.len() != spec.action_dim {
        return Err(contract(format!(
            "action has length {}, expected {}",
            action.len(),
            spec.action_dim
        )));
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(contract("action contains a non-finite value"));
    }
    Ok(())
}

/// Single-state, single-step task with reward
/// `Σ_m exp(−(a − c_m)² / width)` over mode centers `c_m`.
#[derive(Clone, Debug)]
pub struct BimodalBandit {
    spec: EnvSpec,
    mode_centers: Vec<f64>,
    width: f64,
    steps: usize,
}

impl BimodalBandit {
    pub fn new(mode_centers: Vec<f64>, width: f64) -> Result<Self> {
        if mode_centers.is_empty() || !(width > 0.0) {
            return Err(Error::Config("bandit needs at least one mode and a positive width".into()));
        }
        Ok(BimodalBandit {
            spec: EnvSpec {
                state_dim: 1,
                action_dim: 1,
                action_low: vec![-1.0],
                action_high: vec![1.0],
                max_episode_steps: 1,
            },
            mode_centers,
            width,
            steps: 0,
        })
    }

    pub fn reward(&self, action: f64) -> f64 {
        self.mode_centers
            .iter()
            .map(|c| (-(action - c).powi(2) / self.width).exp())
            .sum()
    }

    pub fn mode_centers(&self) -> &[f64] {
        &self.mode_centers
    }
}

impl Default for BimodalBandit {
    fn default() -> Self {
        BimodalBandit::new(vec![0.5, -0.5], 0.02).unwrap()
    }
}

impl Environment for BimodalBandit {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, _rng: &mut dyn RngCore) -> Vec<f64> {
        self.steps = 0;
        vec![0.0]
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        check_action(&self.spec, action)?;
        if self.steps >= self.spec.max_episode_steps {
            return Err(contract("step called on a finished episode"));
        }
        self.steps += 1;
        let a = self.spec.clip_action(action)[0];
        Ok(StepResult {
            next_state: vec![0.0],
            reward: self.reward(a),
            terminal: true,
            truncated: false,
        })
    }
}

/// Point mass on `[−1, 1]²` driven by bounded velocity commands toward one
/// of several goals.
#[derive(Clone, Debug)]
pub struct TwoGoalPointMass {
    spec: EnvSpec,
    goals: Vec<[f64; 2]>,
    goal_radius: f64,
    init_range: f64,
    goal_reward: f64,
    step_reward: f64,
    position: [f64; 2],
    steps: usize,
}

impl TwoGoalPointMass {
    pub const MAX_SPEED: f64 = 0.1;

    pub fn new(goals: Vec<[f64; 2]>, goal_radius: f64, init_range: f64, max_episode_steps: usize) -> Result<Self> {
        if goals.is_empty() || !(goal_radius > 0.0) || !(0.0..=1.0).contains(&init_range) {
            return Err(Error::Config("point mass needs goals, a positive radius and init_range in [0,1]".into()));
        }
        let spec = EnvSpec {
            state_dim: 2,
            action_dim: 2,
            action_low: vec![-Self::MAX_SPEED; 2],
            action_high: vec![Self::MAX_SPEED; 2],
            max_episode_steps,
        };
        spec.validate()?;
        Ok(TwoGoalPointMass {
            spec,
            goals,
            goal_radius,
            init_range,
            goal_reward: 1.0,
            step_reward: -0.01,
            position: [0.0; 2],
            steps: 0,
        })
    }

    pub fn position(&self) -> [f64; 2] {
        self.position
    }

    /// Places the mass at `position` with a fresh step counter.
    pub fn set_position(&mut self, position: [f64; 2]) {
        self.position = position.map(|x| x.clamp(-1.0, 1.0));
        self.steps = 0;
    }

    pub fn goals(&self) -> &[[f64; 2]] {
        &self.goals
    }

    fn at_goal(&self) -> bool {
        self.goals.iter().any(|g| {
            let dx = self.position[0] - g[0];
            let dy = self.position[1] - g[1];
            (dx * dx + dy * dy).sqrt() <= self.goal_radius
        })
    }
}

impl Default for TwoGoalPointMass {
    fn default() -> Self {
        TwoGoalPointMass::new(vec![[0.8, 0.8], [-0.8, 0.8]], 0.1, 0.1, 100).unwrap()
    }
}

impl Environment for TwoGoalPointMass {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        let r = self.init_range;
        let mut draw = || if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        self.position = [draw(), draw()];
        self.steps = 0;
        self.position.to_vec()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        check_action(&self.spec, action)?;
        if self.steps >= self.spec.max_episode_steps {
            return Err(contract("step called on a finished episode"));
        }
        self.steps += 1;
        let a = self.spec.clip_action(action);
        for (p, v) in self.position.iter_mut().zip(&a) {
            *p = (*p + v).clamp(-1.0, 1.0);
        }
        let terminal = self.at_goal();
        Ok(StepResult {
            next_state: self.position.to_vec(),
            reward: if terminal { self.goal_reward } else { self.step_reward },
            terminal,
            truncated: !terminal && self.steps >= self.spec.max_episode_steps,
        })
    }
}

pub const BIMODAL_BANDIT: &str = "bimodal-bandit";
pub const TWO_GOAL_POINTMASS: &str = "two-goal-pointmass";

/// Task parameters that a run configuration may override.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskParams {
    pub bandit_modes: Vec<f64>,
    pub bandit_width: f64,
    pub goals: Vec<[f64; 2]>,
    pub goal_radius: f64,
    pub init_range: f64,
    pub pointmass_horizon: usize,
}

impl Default for TaskParams {
    fn default() -> Self {
        TaskParams {
            bandit_modes: vec![0.5, -0.5],
            bandit_width: 0.02,
            goals: vec![[0.8, 0.8], [-0.8, 0.8]],
            goal_radius: 0.1,
            init_range: 0.1,
            pointmass_horizon: 100,
        }
    }
}

pub fn make_env(name: &str, params: &TaskParams) -> Result<Box<dyn Environment>> {
    match name {
        BIMODAL_BANDIT => Ok(Box::new(BimodalBandit::new(params.bandit_modes.clone(), params.bandit_width)?)),
        TWO_GOAL_POINTMASS => Ok(Box::new(TwoGoalPointMass::new(
            params.goals.clone(),
            params.goal_radius,
            params.init_range,
            params.pointmass_horizon,
        )?)),
        other => Err(Error::Config(format!(
            "unknown environment `{other}` (expected `{BIMODAL_BANDIT}` or `{TWO_GOAL_POINTMASS}`)"
        ))),
    }
}
