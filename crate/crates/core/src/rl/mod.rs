//! PPO on the staged gridworld with MoE actor-critic, expert growth at fixed
//! steps, checkpoints and router telemetry.

pub mod agent;
pub mod env;
pub mod ppo;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint::{load_checkpoint, save_checkpoint, ArchDescriptor};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub use agent::{ActorCritic, AgentConfig, Variant, SITES};
pub use env::{EnvConfig, StagedGridEnv, NUM_ACTIONS};
pub use ppo::{gae, ppo_update, PpoConfig, Rollout};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub ppo: PpoConfig,
    pub variant: Variant,
    /// Final expert count per site.
    pub k: usize,
    pub total_steps: u64,
    /// Growth steps for `grow_1_to_k`; defaults to `total·i/K`, `i = 1..K`.
    pub growth_steps: Option<Vec<u64>>,
    pub seed: u64,
    pub init_checkpoint: Option<PathBuf>,
    pub checkpoint_steps: Vec<u64>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            env: EnvConfig::default(),
            agent: AgentConfig::default(),
            ppo: PpoConfig::default(),
            variant: Variant::Grow1ToK,
            k: 2,
            total_steps: 200_000,
            growth_steps: None,
            seed: 0,
            init_checkpoint: None,
            checkpoint_steps: Vec::new(),
            checkpoint_dir: None,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.ppo.validate()?;
        if self.k == 0 || (self.variant == Variant::Grow1ToK && self.k < 2) {
            return Err(Error::Config("grow_1_to_k needs k ≥ 2".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if !self.checkpoint_steps.is_empty() && self.checkpoint_dir.is_none() {
            return Err(Error::Config("checkpoint_steps given without checkpoint_dir".into()));
        }
        if let Some(gs) = &self.growth_steps {
            if gs.len() != self.k - 1 {
                return Err(Error::Config(format!("{} growth steps given, need k − 1 = {}", gs.len(), self.k - 1)));
            }
        }
        Ok(())
    }

    pub fn growth_schedule(&self) -> Vec<u64> {
        if self.variant != Variant::Grow1ToK {
            return Vec::new();
        }
        match &self.growth_steps {
            Some(g) => g.clone(),
            None => (1..self.k as u64).map(|i| self.total_steps * i / self.k as u64).collect(),
        }
    }

    fn plain_hidden(&self) -> usize {
        self.k * self.agent.expert_hidden
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlRow {
    pub global_step: u64,
    pub episode: u64,
    #[serde(rename = "return")]
    pub ret: f64,
    pub stage_reached: usize,
    pub active_params: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RlLog {
    pub rows: Vec<RlRow>,
}

impl RlLog {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        if self.rows.is_empty() {
            out.write_record(["global_step", "episode", "return", "stage_reached", "active_params"])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))
    }

    /// Mean return of episodes that ended after `from_step`.
    pub fn mean_return_after(&self, from_step: u64) -> Option<f64> {
        let tail: Vec<f64> = self.rows.iter().filter(|r| r.global_step > from_step).map(|r| r.ret).collect();
        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

pub struct RlRun {
    pub log: RlLog,
    pub agent: ActorCritic,
    pub store: ParamStore,
    /// `(step, expert counts)` after every growth event.
    pub growth_events: Vec<(u64, Vec<usize>)>,
}

/// Architecture descriptor saved with every RL checkpoint.
pub fn descriptor(cfg: &RlConfig, agent: &ActorCritic, step: u64) -> ArchDescriptor {
    let counts = agent.expert_counts().unwrap_or_else(|| vec![0; SITES.len()]);
    ArchDescriptor {
        kind: "rl".into(),
        variant: cfg.variant.label().into(),
        sites: SITES.iter().map(|s| s.to_string()).zip(counts).collect(),
        config: serde_json::json!({
            "obs_dim": agent.obs_dim,
            "agent": cfg.agent,
            "plain_hidden": cfg.plain_hidden(),
        }),
        global_step: step,
    }
}

fn build_agent(cfg: &RlConfig, store: &mut ParamStore, experts: Option<usize>) -> Result<ActorCritic> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    ActorCritic::new(store, cfg.env.obs_dim(), &cfg.agent, experts, cfg.plain_hidden(), &mut rng)
}

/// Rebuilds the agent described by a checkpoint and loads its parameters.
pub fn restore_agent(cfg: &RlConfig, dir: &Path) -> Result<(ActorCritic, ParamStore, u64)> {
    let (arch, loaded) = load_checkpoint(dir)?;
    if arch.kind != "rl" {
        return Err(Error::CheckpointMismatch(format!("checkpoint kind `{}` is not rl", arch.kind)));
    }
    let expected = descriptor(cfg, &build_agent(cfg, &mut ParamStore::new(), Some(1))?, 0).config;
    if arch.config != expected {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint architecture {} does not match config {}",
            arch.config, expected
        )));
    }
    let names: Vec<&str> = arch.sites.iter().map(|(s, _)| s.as_str()).collect();
    if names != SITES {
        return Err(Error::CheckpointMismatch(format!("checkpoint sites {names:?}")));
    }
    let counts: Vec<usize> = arch.sites.iter().map(|(_, c)| *c).collect();
    let c = counts[0];
    if counts.iter().any(|&x| x != c) {
        return Err(Error::CheckpointMismatch(format!("unequal expert counts {counts:?}")));
    }
    let ok = match cfg.variant {
        Variant::NoMoe => c == 0,
        Variant::OneExpert => c == 1,
        Variant::KExperts => c == cfg.k,
        Variant::Grow1ToK => (1..=cfg.k).contains(&c),
    };
    if !ok {
        return Err(Error::CheckpointMismatch(format!(
            "{} experts per site cannot resume variant {} with k = {}",
            c,
            cfg.variant.label(),
            cfg.k
        )));
    }
    let mut store = ParamStore::new();
    let agent = build_agent(cfg, &mut store, (c > 0).then_some(c))?;
    store.load_from(&loaded)?;
    Ok((agent, store, arch.global_step))
}

/// Samples an action from logits `[1, A]`; returns `(action, log prob)`.
fn sample_action<R: Rng>(logits: &[f64], rng: &mut R) -> (usize, f64) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut choice = logits.len() - 1;
    for (i, l) in logits.iter().enumerate() {
        acc += (l - max).exp() / z;
        if u < acc {
            choice = i;
            break;
        }
    }
    (choice, logits[choice] - max - z.ln())
}

/// Gradient-free `(logits, value)` for one observation.
pub fn act(agent: &ActorCritic, store: &ParamStore, obs: &[f64]) -> Result<(Vec<f64>, f64)> {
    let mut g = Graph::new();
    let o = g.constant(Tensor::new(vec![1, obs.len()], obs.to_vec())?);
    let out = agent.forward(&mut g, store, o)?;
    Ok((g.value(out.logits).data().to_vec(), g.value(out.values).data()[0]))
}

fn episode_seed(seed: u64, episode: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(episode)
}

pub fn run_rl(cfg: &RlConfig) -> Result<RlRun> {
    cfg.validate()?;
    let (mut agent, mut store, start) = match &cfg.init_checkpoint {
        Some(dir) => restore_agent(cfg, dir)?,
        None => {
            let mut store = ParamStore::new();
            let agent = build_agent(cfg, &mut store, cfg.variant.initial_experts(cfg.k))?;
            (agent, store, 0)
        }
    };
    let growth = cfg.growth_schedule();
    let mut boundaries: Vec<u64> = growth.iter().chain(&cfg.checkpoint_steps).copied().filter(|&s| s > start).collect();
    boundaries.push(cfg.total_steps);
    boundaries.sort_unstable();

    let mut env = StagedGridEnv::new(cfg.env.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ start.wrapping_mul(0x2545_f491_4f6c_dd1d));
    let mut episode = 0u64;
    let mut obs = env.reset(episode_seed(cfg.seed ^ start, episode));
    let (mut ep_return, mut ep_stage) = (0.0, 0usize);
    let mut log = RlLog::default();
    let mut growth_events = Vec::new();
    let mut t = start;

    while t < cfg.total_steps {
        if cfg.checkpoint_steps.contains(&t) && t > start {
            let dir = cfg.checkpoint_dir.as_ref().expect("validated").join(format!("step_{t}"));
            save_checkpoint(&store, &descriptor(cfg, &agent, t), &dir)?;
        }
        for _ in growth.iter().filter(|&&s| s == t) {
            if agent.expert_counts().is_some_and(|c| c[0] < cfg.k) {
                agent.grow_experts(&mut store, 1, cfg.seed.wrapping_add(t))?;
                growth_events.push((t, agent.expert_counts().unwrap_or_default()));
            }
        }
        let next = boundaries.iter().copied().find(|&b| b > t).unwrap_or(cfg.total_steps);
        let len = (cfg.ppo.rollout as u64).min(next - t) as usize;

        let mut ro = Rollout::default();
        for _ in 0..len {
            let (logits, value) = act(&agent, &store, &obs)?;
            let (a, logp) = sample_action(&logits, &mut rng);
            let step = env.step(a)?;
            ro.obs.push(std::mem::replace(&mut obs, step.obs));
            ro.actions.push(a);
            ro.rewards.push(step.reward);
            ro.dones.push(step.done);
            ro.log_probs.push(logp);
            ro.values.push(value);
            ep_return += step.reward;
            ep_stage = ep_stage.max(step.stage);
            t += 1;
            if step.done {
                log.rows.push(RlRow {
                    global_step: t,
                    episode,
                    ret: ep_return,
                    stage_reached: ep_stage,
                    active_params: agent.active_params(&store),
                });
                episode += 1;
                obs = env.reset(episode_seed(cfg.seed ^ start, episode));
                ep_return = 0.0;
                ep_stage = 0;
            }
        }
        let bootstrap = if ro.dones.last() == Some(&true) { 0.0 } else { act(&agent, &store, &obs)?.1 };
        ro.values.push(bootstrap);
        ppo_update(&agent, &mut store, &ro, &cfg.ppo, &mut rng)?;
    }
    if cfg.checkpoint_steps.contains(&t) {
        let dir = cfg.checkpoint_dir.as_ref().expect("validated").join(format!("step_{t}"));
        save_checkpoint(&store, &descriptor(cfg, &agent, t), &dir)?;
    }
    Ok(RlRun { log, agent, store, growth_events })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    pub site: String,
    pub expert: usize,
    pub weight: f64,
    pub stage: usize,
}

/// Gate weights of every expert at every MoE site for each `(obs, stage)`.
pub fn router_trace(agent: &ActorCritic, store: &ParamStore, steps: &[(Vec<f64>, usize)]) -> Result<Vec<TraceRow>> {
    if agent.expert_counts().is_none() {
        return Err(Error::Config("router trace needs MoE sites".into()));
    }
    if steps.is_empty() {
        return Ok(Vec::new());
    }
    let obs: Vec<f64> = steps.iter().flat_map(|(o, _)| o.iter().copied()).collect();
    let mut g = Graph::new();
    let o = g.constant(Tensor::new(vec![steps.len(), agent.obs_dim], obs)?);
    let out = agent.forward(&mut g, store, o)?;
    let mut rows = Vec::new();
    for (t, (_, stage)) in steps.iter().enumerate() {
        for (site, gates) in SITES.iter().zip(&out.gates) {
            let gv = g.value(gates.expect("moe site"));
            let e = gv.shape()[1];
            for expert in 0..e {
                rows.push(TraceRow { t, site: site.to_string(), expert, weight: gv.at2(t, expert), stage: *stage });
            }
        }
    }
    Ok(rows)
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    if rows.is_empty() {
        out.write_record(["t", "site", "expert", "weight", "stage"])?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))
}

/// Plays `episodes` episodes with the sampled policy and records every
/// observation with the stage it was shown in.
pub fn collect_episodes(
    agent: &ActorCritic,
    store: &ParamStore,
    env_cfg: &EnvConfig,
    episodes: usize,
    seed: u64,
) -> Result<Vec<Vec<(Vec<f64>, usize)>>> {
    let mut env = StagedGridEnv::new(env_cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all = Vec::with_capacity(episodes);
    for ep in 0..episodes as u64 {
        let mut obs = env.reset(episode_seed(seed, ep));
        let mut steps = vec![(obs.clone(), env.stage())];
        loop {
            let (logits, _) = act(agent, store, &obs)?;
            let (a, _) = sample_action(&logits, &mut rng);
            let s = env.step(a)?;
            obs = s.obs;
            if s.done {
                break;
            }
            steps.push((obs.clone(), s.stage));
        }
        all.push(steps);
    }
    Ok(all)
}

/// Mean gate weight of the newest expert at `site`, split by stage.
/// Returns one `(stage, mean, count)` per stage that occurs.
pub fn newest_expert_gate_by_stage(rows: &[TraceRow], site: &str) -> Vec<(usize, f64, usize)> {
    let newest = rows.iter().filter(|r| r.site == site).map(|r| r.expert).max().unwrap_or(0);
    let mut acc: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
    for r in rows.iter().filter(|r| r.site == site && r.expert == newest) {
        let e = acc.entry(r.stage).or_default();
        e.0 += r.weight;
        e.1 += 1;
    }
    acc.into_iter().map(|(s, (sum, n))| (s, sum / n as f64, n)).collect()
}
