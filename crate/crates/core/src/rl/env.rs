//! A small staged gridworld whose observation theme changes abruptly when the
//! agent advances a stage.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_ACTIONS: usize = 4;

/// up, down, left, right as `(drow, dcol)`.
const MOVES: [(isize, isize); NUM_ACTIONS] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

const BASE_CHANNELS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub size: usize,
    pub stages: usize,
    pub max_steps: usize,
    /// Seeds the per-stage themes; fixed for the life of a run.
    pub theme_seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig { size: 5, stages: 3, max_steps: 128, theme_seed: 0 }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 2 || self.stages == 0 || self.max_steps == 0 {
            return Err(Error::Config("env needs size ≥ 2, stages ≥ 1, max_steps ≥ 1".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        BASE_CHANNELS
    }

    pub fn obs_dim(&self) -> usize {
        BASE_CHANNELS * self.size * self.size
    }
}

/// Observation styling for one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Theme {
    /// Output channel `c` shows base channel `perm[c]`.
    pub perm: [usize; BASE_CHANNELS],
    pub offset: f64,
    pub stripe_period: usize,
}

fn make_themes(stages: usize, seed: u64) -> Vec<Theme> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut themes: Vec<Theme> = Vec::with_capacity(stages);
    for s in 0..stages {
        let perm = loop {
            let mut p = [0, 1, 2, 3, 4];
            p.shuffle(&mut rng);
            if themes.iter().all(|t| t.perm != p) {
                break p;
            }
        };
        themes.push(Theme { perm, offset: 0.25 * (s + 1) as f64, stripe_period: s + 2 });
    }
    themes
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub stage: usize,
}

#[derive(Clone, Debug)]
pub struct StagedGridEnv {
    pub config: EnvConfig,
    pub themes: Vec<Theme>,
    agent: (usize, usize),
    goal: (usize, usize),
    stage: usize,
    t: usize,
    rng: ChaCha8Rng,
}

impl StagedGridEnv {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let themes = make_themes(config.stages, config.theme_seed);
        Ok(StagedGridEnv {
            config,
            themes,
            agent: (0, 0),
            goal: (0, 1),
            stage: 0,
            t: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn agent(&self) -> (usize, usize) {
        self.agent
    }

    pub fn goal(&self) -> (usize, usize) {
        self.goal
    }

    /// Places agent and goal; used by tests to set up exact situations.
    pub fn set_positions(&mut self, agent: (usize, usize), goal: (usize, usize)) {
        self.agent = agent;
        self.goal = goal;
    }

    pub fn set_stage(&mut self, stage: usize) {
        self.stage = stage.min(self.config.stages - 1);
    }

    fn place(&mut self) {
        let n = self.config.size;
        self.agent = (self.rng.random_range(0..n), self.rng.random_range(0..n));
        loop {
            self.goal = (self.rng.random_range(0..n), self.rng.random_range(0..n));
            if self.goal != self.agent {
                break;
            }
        }
    }

    pub fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.stage = 0;
        self.t = 0;
        self.place();
        self.observe()
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        let (dr, dc) = *MOVES.get(action).ok_or(Error::InvalidAction(action))?;
        let n = self.config.size as isize;
        let r = (self.agent.0 as isize + dr).clamp(0, n - 1);
        let c = (self.agent.1 as isize + dc).clamp(0, n - 1);
        self.agent = (r as usize, c as usize);
        self.t += 1;
        let mut reward = 0.0;
        if self.agent == self.goal {
            reward = 1.0;
            self.stage = (self.stage + 1).min(self.config.stages - 1);
            self.place();
        }
        Ok(StepResult {
            obs: self.observe(),
            reward,
            done: self.t >= self.config.max_steps,
            stage: self.stage,
        })
    }

    /// Channel-major `[C, H, W]` observation, flattened.
    pub fn observe(&self) -> Vec<f64> {
        let n = self.config.size;
        let cells = n * n;
        let theme = &self.themes[self.stage];
        let mut base = vec![0.0; BASE_CHANNELS * cells];
        base[self.agent.0 * n + self.agent.1] = 1.0;
        base[cells + self.goal.0 * n + self.goal.1] = 1.0;
        for r in 0..n {
            for c in 0..n {
                let i = r * n + c;
                base[2 * cells + i] = if (r + c) % 2 == 0 { 0.5 } else { -0.5 };
                base[3 * cells + i] = theme.offset;
                base[4 * cells + i] = if r % theme.stripe_period == 0 { 0.5 } else { 0.0 };
            }
        }
        let mut obs = vec![0.0; BASE_CHANNELS * cells];
        for (ch, &src) in theme.perm.iter().enumerate() {
            obs[ch * cells..(ch + 1) * cells].copy_from_slice(&base[src * cells..(src + 1) * cells]);
        }
        obs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env() -> StagedGridEnv {
        StagedGridEnv::new(EnvConfig::default()).unwrap()
    }

    #[test]
    fn reset_is_deterministic() {
        let mut a = env();
        let mut b = env();
        let oa = a.reset(5);
        assert_eq!(oa.len(), 5 * 5 * 5);
        assert_eq!(oa, b.reset(5));
        assert_eq!(a.stage(), 0);
    }

    #[test]
    fn wall_blocks_movement() {
        let mut e = env();
        e.reset(1);
        e.set_positions((0, 0), (4, 4));
        let r = e.step(0).unwrap();
        assert_eq!(e.agent(), (0, 0));
        assert_eq!(r.reward, 0.0);
        e.step(2).unwrap();
        assert_eq!(e.agent(), (0, 0));
    }

    #[test]
    fn goal_rewards_and_advances() {
        let mut e = env();
        e.reset(1);
        e.set_positions((3, 3), (3, 4));
        let r = e.step(3).unwrap();
        assert_eq!((r.reward, r.stage), (1.0, 1));
        assert_ne!(e.agent(), e.goal());
        e.set_stage(2);
        e.set_positions((3, 3), (2, 3));
        assert_eq!(e.step(0).unwrap().stage, 2);
    }

    #[test]
    fn stages_permute_channels_of_the_same_grid() {
        let mut e = env();
        e.reset(1);
        e.set_positions((1, 2), (4, 3));
        let o0 = e.observe();
        e.set_stage(1);
        let o1 = e.observe();
        assert_ne!(o0, o1);
        let cells = 25;
        let (t0, t1) = (&e.themes[0], &e.themes[1]);
        for base in 0..2 {
            let c0 = t0.perm.iter().position(|&p| p == base).unwrap();
            let c1 = t1.perm.iter().position(|&p| p == base).unwrap();
            assert_eq!(&o0[c0 * cells..(c0 + 1) * cells], &o1[c1 * cells..(c1 + 1) * cells]);
        }
        assert_ne!(t0.perm, t1.perm);
        assert_ne!(e.themes[1].perm, e.themes[2].perm);
    }

    #[test]
    fn done_at_budget_and_invalid_action() {
        let mut e = StagedGridEnv::new(EnvConfig { max_steps: 3, ..Default::default() }).unwrap();
        e.reset(0);
        e.set_positions((0, 0), (4, 4));
        assert!(!e.step(0).unwrap().done);
        assert!(!e.step(0).unwrap().done);
        assert!(e.step(0).unwrap().done);
        assert!(matches!(e.step(4), Err(Error::InvalidAction(4))));
    }
}
