//! Episodic chain MDP with optional goal flip and reward noise.
//!
//! States `0..n_states` sit on a line; the agent starts in the middle and
//! moves left or right (clamped at the ends). Reaching the goal end pays
//! `goal_reward` and ends the episode, every other step pays `step_reward`.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalSide {
    LeftEnd,
    RightEnd,
}

impl GoalSide {
    pub fn flipped(self) -> Self {
        match self {
            GoalSide::LeftEnd => GoalSide::RightEnd,
            GoalSide::RightEnd => GoalSide::LeftEnd,
        }
    }
}

pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;
pub const NUM_ACTIONS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainConfig {
    pub n_states: usize,
    pub goal_side: GoalSide,
    pub step_reward: f64,
    pub goal_reward: f64,
    pub max_steps: usize,
    /// Episode index at whose reset the goal moves to the other end.
    pub flip_episode: Option<u64>,
    pub reward_noise_std: f64,
    /// Reward noise is only added from this episode index on.
    pub noise_from_episode: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            n_states: 7,
            goal_side: GoalSide::RightEnd,
            step_reward: -0.01,
            goal_reward: 1.0,
            max_steps: 50,
            flip_episode: None,
            reward_noise_std: 0.0,
            noise_from_episode: 0,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_states < 3 {
            return Err(Error::config("chain needs at least 3 states"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("max_steps must be positive"));
        }
        if !(self.reward_noise_std >= 0.0 && self.reward_noise_std.is_finite()) {
            return Err(Error::config("reward_noise_std must be nonnegative"));
        }
        if !(self.step_reward.is_finite() && self.goal_reward.is_finite()) {
            return Err(Error::config("rewards must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct ChainEnv {
    config: ChainConfig,
    goal_side: GoalSide,
    /// Index of the current episode; `None` before the first reset.
    episode: Option<u64>,
    steps: usize,
    rng: Rng,
}

impl ChainEnv {
    pub fn new(config: ChainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            goal_side: config.goal_side,
            config,
            episode: None,
            steps: 0,
            rng: rng_from(&[seed, 0xc4a1]),
        })
    }

    pub fn config(&self) -> &ChainConfig {
        &self.config
    }

    pub fn goal_side(&self) -> GoalSide {
        self.goal_side
    }

    pub fn episode(&self) -> Option<u64> {
        self.episode
    }

    pub fn start_state(&self) -> usize {
        self.config.n_states / 2
    }

    pub fn goal_state(&self) -> usize {
        match self.goal_side {
            GoalSide::LeftEnd => 0,
            GoalSide::RightEnd => self.config.n_states - 1,
        }
    }

    /// Starts the next episode and returns the start state.
    pub fn reset(&mut self) -> usize {
        let episode = self.episode.map_or(0, |e| e + 1);
        self.episode = Some(episode);
        if self.config.flip_episode == Some(episode) {
            self.goal_side = self.goal_side.flipped();
        }
        self.steps = 0;
        self.start_state()
    }

    fn noise_std(&self) -> f64 {
        match self.episode {
            Some(e) if e >= self.config.noise_from_episode => self.config.reward_noise_std,
            _ => 0.0,
        }
    }

    pub fn step(&mut self, state: usize, action: usize) -> Result<Transition> {
        let n = self.config.n_states;
        if state >= n {
            return Err(Error::InvalidState(state));
        }
        let s_next = match action {
            LEFT => state.saturating_sub(1),
            RIGHT => (state + 1).min(n - 1),
            other => return Err(Error::InvalidAction(other)),
        };
        self.steps += 1;
        let at_goal = s_next == self.goal_state();
        let mut r = if at_goal {
            self.config.goal_reward
        } else {
            self.config.step_reward
        };
        let std = self.noise_std();
        if std > 0.0 {
            r += Normal::new(0.0, std).expect("validated std").sample(&mut self.rng);
        }
        Ok(Transition {
            s: state,
            a: action,
            r,
            s_next,
            done: at_goal || self.steps >= self.config.max_steps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts_in_the_middle() {
        let mut env = ChainEnv::new(ChainConfig::default(), 1).unwrap();
        assert_eq!(env.reset(), 3);
        assert_eq!(env.episode(), Some(0));
    }

    #[test]
    fn goal_and_clamping() {
        let mut env = ChainEnv::new(ChainConfig::default(), 1).unwrap();
        env.reset();
        let t = env.step(5, RIGHT).unwrap();
        assert_eq!((t.s_next, t.r, t.done), (6, 1.0, true));
        let t = env.step(0, LEFT).unwrap();
        assert_eq!((t.s_next, t.r, t.done), (0, -0.01, false));
        let t = env.step(2, RIGHT).unwrap();
        assert_eq!(t.r, -0.01);
        assert_eq!(env.step(2, 2), Err(Error::InvalidAction(2)));
        assert_eq!(env.step(7, LEFT), Err(Error::InvalidState(7)));
    }

    #[test]
    fn step_budget_ends_episode() {
        let cfg = ChainConfig { max_steps: 3, ..Default::default() };
        let mut env = ChainEnv::new(cfg, 1).unwrap();
        let s = env.reset();
        assert!(!env.step(s, LEFT).unwrap().done);
        assert!(!env.step(s - 1, LEFT).unwrap().done);
        assert!(env.step(s - 2, LEFT).unwrap().done);
    }

    #[test]
    fn goal_flips_at_configured_episode() {
        let cfg = ChainConfig { flip_episode: Some(200), ..Default::default() };
        let mut env = ChainEnv::new(cfg, 1).unwrap();
        for _ in 0..200 {
            env.reset();
            assert_eq!(env.goal_side(), GoalSide::RightEnd);
        }
        env.reset();
        assert_eq!(env.episode(), Some(200));
        assert_eq!(env.goal_side(), GoalSide::LeftEnd);
        let t = env.step(1, LEFT).unwrap();
        assert_eq!((t.r, t.done), (1.0, true));
    }

    #[test]
    fn optimal_return_from_center() {
        let mut env = ChainEnv::new(ChainConfig::default(), 1).unwrap();
        let mut s = env.reset();
        let mut ret = 0.0;
        loop {
            let t = env.step(s, RIGHT).unwrap();
            ret += t.r;
            s = t.s_next;
            if t.done {
                break;
            }
        }
        assert!((ret - 0.98).abs() < 1e-12);
    }

    #[test]
    fn noise_switches_on_and_is_reproducible() {
        let cfg = ChainConfig {
            reward_noise_std: 0.5,
            noise_from_episode: 2,
            ..Default::default()
        };
        let rollout = |seed| {
            let mut env = ChainEnv::new(cfg, seed).unwrap();
            let mut rewards = Vec::new();
            for _ in 0..4 {
                let s = env.reset();
                rewards.push(env.step(s, LEFT).unwrap().r);
            }
            rewards
        };
        let a = rollout(9);
        assert_eq!(&a[..2], &[-0.01, -0.01]);
        assert!(a[2] != -0.01 && a[3] != -0.01);
        let b = rollout(9);
        assert_eq!(a.iter().map(|r| r.to_bits()).collect::<Vec<_>>(), b.iter().map(|r| r.to_bits()).collect::<Vec<_>>());
    }
}
