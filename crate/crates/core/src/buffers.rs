//! Replay buffer and the on-policy buffer used for option-network training.

use std::collections::VecDeque;

use rand::Rng;

use crate::error::{contract, Error, Result};

/// One environment step as stored in both buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
    /// `log β(a|s)` of the behavior policy at collection time.
    pub behavior_log_density: f64,
    pub option_id: usize,
}

/// Dimensions every stored transition must match.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransitionShape {
    pub state_dim: usize,
    pub action_dim: usize,
    pub option_count: usize,
}

impl TransitionShape {
    pub fn check(&self, t: &Transition) -> Result<()> {
        if t.state.len() != self.state_dim || t.next_state.len() != self.state_dim {
            return Err(contract("transition state has the wrong dimension"));
        }
        if t.action.len() != self.action_dim {
            return Err(contract("transition action has the wrong dimension"));
        }
        if t.option_id >= self.option_count {
            return Err(contract(format!(
                "option id {} out of range for {} options",
                t.option_id, self.option_count
            )));
        }
        let finite = t
            .state
            .iter()
            .chain(&t.action)
            .chain(&t.next_state)
            .all(|x| x.is_finite());
        if !finite || !t.reward.is_finite() || !t.behavior_log_density.is_finite() {
            return Err(contract("transition contains a non-finite value"));
        }
        Ok(())
    }
}

/// Fixed-capacity FIFO store sampled uniformly with replacement.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    shape: TransitionShape,
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(shape: TransitionShape, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        Ok(ReplayBuffer {
            shape,
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        })
    }

    /// Appends `t`, evicting the oldest entry once at capacity.
    pub fn push(&mut self, t: Transition) -> Result<()> {
        self.shape.check(&t)?;
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if n == 0 {
            return Err(contract("batch size must be positive"));
        }
        if self.items.len() < n {
            return Err(Error::InsufficientData {
                needed: n,
                available: self.items.len(),
            });
        }
        let len = self.items.len();
        Ok((0..n).map(|_| &self.items[rng.random_range(0..len)]).collect())
    }
}

/// Samples from the most recent behavior policies. Filling it triggers one
/// option-network training round, after which the caller clears it.
#[derive(Clone, Debug)]
pub struct OnPolicyBuffer {
    shape: TransitionShape,
    capacity: usize,
    items: Vec<Transition>,
}

impl OnPolicyBuffer {
    pub fn new(shape: TransitionShape, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("on-policy capacity must be positive".into()));
        }
        Ok(OnPolicyBuffer {
            shape,
            capacity,
            items: Vec::with_capacity(capacity),
        })
    }

    /// Appends `t`; a full buffer rejects the push.
    pub fn push(&mut self, t: Transition) -> Result<()> {
        self.shape.check(&t)?;
        if self.is_full() {
            return Err(contract("on-policy buffer is full; train and clear it first"));
        }
        self.items.push(t);
        Ok(())
    }

    pub fn is_full(&self) -> bool {
        self.items.len() >= self.capacity
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.items
    }
}
