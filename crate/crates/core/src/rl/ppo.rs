//! Generalized advantage estimation and the PPO clipped objective.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{AdamConfig, ParamStore};
use crate::rl::agent::ActorCritic;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub rollout: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub clip_eps: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub lr: f64,
    pub ent_coef: f64,
    pub vf_coef: f64,
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            rollout: 256,
            gamma: 0.99,
            lambda: 0.95,
            clip_eps: 0.2,
            epochs: 4,
            minibatches: 4,
            lr: 3e-4,
            ent_coef: 0.01,
            vf_coef: 0.5,
            max_grad_norm: 0.5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rollout == 0 || self.epochs == 0 || self.minibatches == 0 || self.minibatches > self.rollout {
            return Err(Error::Config("ppo needs rollout ≥ minibatches ≥ 1 and epochs ≥ 1".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..Default::default() }
    }
}

/// Returns `(advantages, returns)`. `values` carries the bootstrap value at
/// index `T`.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let t = rewards.len();
    if values.len() != t + 1 || dones.len() != t {
        return Err(Error::Length(format!(
            "gae: {t} rewards need {} values and {t} dones, got {} and {}",
            t + 1,
            values.len(),
            dones.len()
        )));
    }
    let mut adv = vec![0.0; t];
    let mut next = 0.0;
    for i in (0..t).rev() {
        let live = if dones[i] { 0.0 } else { 1.0 };
        let delta = rewards[i] + gamma * live * values[i + 1] - values[i];
        next = delta + gamma * lambda * live * next;
        adv[i] = next;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Per-sample clipped surrogate `min(ρA, clip(ρ, 1−ε, 1+ε)A)`.
pub fn clipped_surrogate(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// Normalizes to zero mean and unit (population) standard deviation.
pub fn normalize(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt() + 1e-8;
    xs.iter().map(|x| (x - mean) / sd).collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Rollout {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub log_probs: Vec<f64>,
    /// Length `T + 1`; the last entry is the bootstrap value.
    pub values: Vec<f64>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossStats {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub total: f64,
}

/// Builds the PPO loss on the graph from policy logits `[B, A]` and values
/// `[B, 1]`. Advantages are used as given.
pub fn ppo_loss(
    g: &mut Graph,
    logits: Var,
    values: Var,
    actions: &[usize],
    old_log_probs: &[f64],
    advantages: &[f64],
    returns: &[f64],
    cfg: &PpoConfig,
) -> Result<(Var, LossStats)> {
    let b = actions.len();
    let logp_all = g.log_softmax(logits)?;
    let logp = g.gather(logp_all, actions)?;
    let old = g.constant(Tensor::new(vec![b], old_log_probs.to_vec())?);
    let diff = g.sub(logp, old)?;
    let ratio = g.exp(diff);
    let adv = g.constant(Tensor::new(vec![b], advantages.to_vec())?);
    let s1 = g.mul(ratio, adv)?;
    let clipped = g.clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
    let s2 = g.mul(clipped, adv)?;
    let surr = g.minimum(s1, s2)?;
    let surr_mean = g.mean(surr);
    let policy = g.scale(surr_mean, -1.0);

    let probs = g.exp(logp_all);
    let plogp = g.mul(probs, logp_all)?;
    let plogp_sum = g.sum(plogp);
    let entropy = g.scale(plogp_sum, -1.0 / b as f64);

    let v = g.reshape(values, &[b])?;
    let ret = g.constant(Tensor::new(vec![b], returns.to_vec())?);
    let verr = g.sub(v, ret)?;
    let vsq = g.mul(verr, verr)?;
    let vmean = g.mean(vsq);
    let value = g.scale(vmean, 0.5);

    let ent_term = g.scale(entropy, -cfg.ent_coef);
    let vf_term = g.scale(value, cfg.vf_coef);
    let total = g.add(policy, ent_term)?;
    let total = g.add(total, vf_term)?;
    let stats = LossStats {
        policy: g.value(policy).item(),
        value: g.value(value).item(),
        entropy: g.value(entropy).item(),
        total: g.value(total).item(),
    };
    Ok((total, stats))
}

/// Runs `epochs × minibatches` Adam steps on the rollout. Returns the stats
/// of the last minibatch.
pub fn ppo_update<R: Rng + ?Sized>(
    agent: &ActorCritic,
    store: &mut ParamStore,
    rollout: &Rollout,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<LossStats> {
    let (adv, returns) = gae(&rollout.rewards, &rollout.values, &rollout.dones, cfg.gamma, cfg.lambda)?;
    let t = rollout.len();
    let adam = cfg.adam();
    let mut order: Vec<usize> = (0..t).collect();
    let mut last = LossStats::default();
    let mb = t.div_ceil(cfg.minibatches.min(t));
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for idx in order.chunks(mb) {
            let obs: Vec<f64> = idx.iter().flat_map(|&i| rollout.obs[i].iter().copied()).collect();
            let actions: Vec<usize> = idx.iter().map(|&i| rollout.actions[i]).collect();
            let old: Vec<f64> = idx.iter().map(|&i| rollout.log_probs[i]).collect();
            let a: Vec<f64> = idx.iter().map(|&i| adv[i]).collect();
            let a = if a.len() > 1 { normalize(&a) } else { a };
            let r: Vec<f64> = idx.iter().map(|&i| returns[i]).collect();
            let mut g = Graph::new();
            let o = g.constant(Tensor::new(vec![idx.len(), agent.obs_dim], obs)?);
            let out = agent.forward(&mut g, store, o)?;
            let (loss, stats) = ppo_loss(&mut g, out.logits, out.values, &actions, &old, &a, &r, cfg)?;
            let grads = g.backward(loss)?;
            store.accumulate(&grads);
            store.clip_grad_norm(cfg.max_grad_norm);
            adam.step(store)?;
            last = stats;
        }
    }
    Ok(last)
}
