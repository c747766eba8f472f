//! Run configuration: a flat TOML document whose missing keys take the
//! published defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envsim::{TaskParams, BIMODAL_BANDIT, TWO_GOAL_POINTMASS};
use crate::error::{Error, Result};

/// Which variant of the learner to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Options learned with advantage-weighted importance.
    #[serde(rename = "adinfohrl")]
    AdInfoHrl,
    /// Options learned with uniform sample weights.
    #[serde(rename = "infohrl")]
    InfoHrl,
    /// A single option and no option network.
    #[serde(rename = "td3")]
    Td3,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::AdInfoHrl => "adinfohrl",
            Mode::InfoHrl => "infohrl",
            Mode::Td3 => "td3",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "adinfohrl" => Some(Mode::AdInfoHrl),
            "infohrl" => Some(Mode::InfoHrl),
            "td3" => Some(Mode::Td3),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env_name: String,
    pub mode: Mode,
    pub option_count: usize,
    /// Steps an option is held before the gating policy redraws.
    pub option_hold: usize,
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub option_lr: f64,
    pub critic_batch: usize,
    /// The actor batch holds this many samples per option.
    pub actor_batch_per_option: usize,
    pub option_batch: usize,
    pub on_policy_capacity: usize,
    pub option_epochs: usize,
    pub lambda_mi: f64,
    pub vat_noise_variance: f64,
    /// Standard deviation of exploration noise, in units of the action half-range.
    pub exploration_sigma: f64,
    /// Standard deviation of target-policy smoothing noise, same units.
    pub target_noise_sigma: f64,
    pub noise_clip: f64,
    pub policy_delay: usize,
    pub hidden_sizes: Vec<usize>,
    /// Initial option actions are spread over this fraction of the action range.
    pub option_init_spread: f64,
    pub replay_capacity: usize,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub seeds: Vec<u64>,
    pub output_dir: String,
    pub bandit_modes: Vec<f64>,
    pub bandit_width: f64,
    pub goals: Vec<[f64; 2]>,
    pub goal_radius: f64,
    pub init_range: f64,
    pub pointmass_horizon: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let task = TaskParams::default();
        ExperimentConfig {
            env_name: BIMODAL_BANDIT.to_string(),
            mode: Mode::AdInfoHrl,
            option_count: 2,
            option_hold: 3,
            gamma: 0.99,
            tau: 0.005,
            actor_lr: 0.001,
            critic_lr: 0.001,
            option_lr: 0.001,
            critic_batch: 100,
            actor_batch_per_option: 100,
            option_batch: 50,
            on_policy_capacity: 5000,
            option_epochs: 40,
            lambda_mi: 0.1,
            vat_noise_variance: 0.04,
            exploration_sigma: 0.1,
            target_noise_sigma: 0.2,
            noise_clip: 0.5,
            policy_delay: 2,
            hidden_sizes: vec![64, 64],
            option_init_spread: 0.5,
            replay_capacity: 1_000_000,
            warmup_steps: 1000,
            total_steps: 20_000,
            eval_interval: 5000,
            eval_episodes: 10,
            seeds: vec![1],
            output_dir: "runs".to_string(),
            bandit_modes: task.bandit_modes,
            bandit_width: task.bandit_width,
            goals: task.goals,
            goal_radius: task.goal_radius,
            init_range: task.init_range,
            pointmass_horizon: task.pointmass_horizon,
        }
    }
}

fn require(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg.to_string()))
    }
}

impl ExperimentConfig {
    /// Options actually instantiated: always 1 in `td3` mode.
    pub fn effective_option_count(&self) -> usize {
        match self.mode {
            Mode::Td3 => 1,
            _ => self.option_count,
        }
    }

    pub fn actor_batch_total(&self) -> usize {
        self.actor_batch_per_option * self.effective_option_count()
    }

    /// Replay size at which learning starts.
    pub fn warmup_threshold(&self) -> usize {
        self.warmup_steps.max(self.critic_batch).max(self.actor_batch_total())
    }

    pub fn task_params(&self) -> TaskParams {
        TaskParams {
            bandit_modes: self.bandit_modes.clone(),
            bandit_width: self.bandit_width,
            goals: self.goals.clone(),
            goal_radius: self.goal_radius,
            init_range: self.init_range,
            pointmass_horizon: self.pointmass_horizon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        require(
            self.env_name == BIMODAL_BANDIT || self.env_name == TWO_GOAL_POINTMASS,
            "env_name must be `bimodal-bandit` or `two-goal-pointmass`",
        )?;
        require(self.option_count >= 1, "option_count must be at least 1")?;
        require(self.option_hold >= 1, "option_hold must be at least 1")?;
        require((0.0..1.0).contains(&self.gamma), "gamma must be in [0,1)")?;
        require(self.tau > 0.0 && self.tau <= 1.0, "tau must be in (0,1]")?;
        for (name, lr) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr), ("option_lr", self.option_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, n) in [
            ("critic_batch", self.critic_batch),
            ("actor_batch_per_option", self.actor_batch_per_option),
            ("option_batch", self.option_batch),
            ("on_policy_capacity", self.on_policy_capacity),
            ("policy_delay", self.policy_delay),
            ("replay_capacity", self.replay_capacity),
            ("eval_interval", self.eval_interval),
            ("eval_episodes", self.eval_episodes),
            ("pointmass_horizon", self.pointmass_horizon),
        ] {
            if n == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        require(self.lambda_mi > 0.0 && self.lambda_mi.is_finite(), "lambda_mi must be positive")?;
        require(
            self.vat_noise_variance > 0.0 && self.vat_noise_variance.is_finite(),
            "vat_noise_variance must be positive",
        )?;
        require(
            self.exploration_sigma >= 0.0 && self.exploration_sigma.is_finite(),
            "exploration_sigma must be nonnegative",
        )?;
        require(
            self.target_noise_sigma >= 0.0 && self.target_noise_sigma.is_finite(),
            "target_noise_sigma must be nonnegative",
        )?;
        require(self.noise_clip >= 0.0 && self.noise_clip.is_finite(), "noise_clip must be nonnegative")?;
        require(
            !self.hidden_sizes.is_empty() && self.hidden_sizes.iter().all(|&h| h > 0),
            "hidden_sizes must be a nonempty list of positive sizes",
        )?;
        require(
            (0.0..1.0).contains(&self.option_init_spread),
            "option_init_spread must be in [0,1)",
        )?;
        require(!self.seeds.is_empty(), "seeds must not be empty")?;
        require(
            self.replay_capacity >= self.warmup_threshold(),
            "replay_capacity must hold at least the warm-up threshold",
        )?;
        crate::envsim::make_env(&self.env_name, &self.task_params())?;
        Ok(())
    }

    /// Normalizes mode-dependent fields and validates.
    pub fn resolve(mut self) -> Result<Self> {
        if self.mode == Mode::Td3 {
            self.option_count = 1;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_table(parse_table(text)?)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let config: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string().trim().to_string()))?;
        config.resolve()
    }
}

fn parse_table(text: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>()
        .map_err(|e| Error::Config(format!("malformed config: {}", e.to_string().trim())))
}

fn known_keys() -> Vec<String> {
    match toml::Value::try_from(ExperimentConfig::default()) {
        Ok(toml::Value::Table(t)) => t.keys().cloned().collect(),
        _ => unreachable!("config serializes to a table"),
    }
}

/// Parses `KEY=VALUE`. Values are read as TOML and fall back to a bare string.
pub fn parse_override(spec: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not KEY=VALUE")))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((key, value))
}

/// Reads an optional config file and applies `overrides` on top.
pub fn load_config(path: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<ExperimentConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            parse_table(&text)?
        }
        None => toml::Table::new(),
    };
    let known = known_keys();
    for (key, value) in overrides {
        if !known.contains(key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        table.insert(key.clone(), value.clone());
    }
    ExperimentConfig::from_table(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(spec: &str) -> Vec<(String, toml::Value)> {
        vec![parse_override(spec).unwrap()]
    }

    #[test]
    fn empty_document_gives_defaults() {
        let c = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.gamma, 0.99);
        assert_eq!(c.tau, 0.005);
        assert_eq!(c.lambda_mi, 0.1);
    }

    #[test]
    fn gamma_out_of_range_is_rejected() {
        let err = load_config(None, &set("gamma=1.5")).unwrap_err();
        assert!(err.to_string().contains("gamma must be in [0,1)"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = load_config(None, &set("gama=0.5")).unwrap_err();
        assert!(err.to_string().contains("gama"), "{err}");
        let err = ExperimentConfig::from_toml_str("learning_rate = 0.1").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn type_mismatch_names_the_key() {
        let err = ExperimentConfig::from_toml_str("critic_batch = \"big\"").unwrap_err();
        assert!(err.to_string().contains("critic_batch"), "{err}");
    }

    #[test]
    fn overrides_accept_strings_lists_and_numbers() {
        let overrides = vec![
            parse_override("mode=td3").unwrap(),
            parse_override("env_name=two-goal-pointmass").unwrap(),
            parse_override("seeds=[1,2,3]").unwrap(),
            parse_override("tau = 0.01").unwrap(),
        ];
        let c = load_config(None, &overrides).unwrap();
        assert_eq!(c.mode, Mode::Td3);
        assert_eq!(c.option_count, 1);
        assert_eq!(c.seeds, vec![1, 2, 3]);
        assert_eq!(c.tau, 0.01);
        assert_eq!(c.env_name, "two-goal-pointmass");
    }

    #[test]
    fn echo_round_trips() {
        let mut c = ExperimentConfig::default();
        c.gamma = 0.123456789012345678;
        c.goals = vec![[0.1, 0.2]];
        c.hidden_sizes = vec![400, 300];
        let echoed = c.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&echoed).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml_string(), echoed);
    }

    #[test]
    fn actor_batch_scales_with_options() {
        let mut c = ExperimentConfig::default();
        assert_eq!(c.actor_batch_total(), 200);
        c.option_count = 4;
        assert_eq!(c.actor_batch_total(), 400);
        c.mode = Mode::Td3;
        assert_eq!(c.actor_batch_total(), 100);
    }
}
