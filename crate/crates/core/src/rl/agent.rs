//! SimBa-style actor-critic: linear embed, residual blocks whose inner path
//! is an MoE layer (or a plain bottleneck MLP), post-layernorm, head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::moe::MoeLayer;
use crate::nn::{count_params, Inner, LayerNorm, Linear, Mlp, Module, ResidualBlock};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::rl::env::NUM_ACTIONS;

pub const SITES: [&str; 3] = ["actor.block0", "critic.block0", "critic.block1"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    NoMoe,
    OneExpert,
    KExperts,
    #[serde(rename = "grow_1_to_k")]
    Grow1ToK,
}

impl Variant {
    pub fn label(&self) -> &'static str {
        match self {
            Variant::NoMoe => "no_moe",
            Variant::OneExpert => "one_expert",
            Variant::KExperts => "k_experts",
            Variant::Grow1ToK => "grow_1_to_k",
        }
    }

    /// Expert count per site at the start of training; `None` for no_moe.
    pub fn initial_experts(&self, k: usize) -> Option<usize> {
        match self {
            Variant::NoMoe => None,
            Variant::OneExpert | Variant::Grow1ToK => Some(1),
            Variant::KExperts => Some(k),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub d: usize,
    /// Hidden width of one bottleneck expert.
    pub expert_hidden: usize,
    /// Scale applied to the initial policy-head weights.
    pub policy_init_scale: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig { d: 64, expert_hidden: 32, policy_init_scale: 0.01 }
    }
}

#[derive(Clone, Debug)]
pub struct Tower {
    pub embed: Linear,
    pub blocks: Vec<ResidualBlock>,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl Tower {
    fn forward(&self, g: &mut Graph, store: &ParamStore, obs: Var, gates: &mut Vec<Option<Var>>) -> Result<Var> {
        let mut h = self.embed.forward(g, store, obs)?;
        for b in &self.blocks {
            let (y, gt) = b.forward(g, store, h)?;
            gates.push(gt);
            h = y;
        }
        let h = self.norm.forward(g, store, h)?;
        self.head.forward(g, store, h)
    }
}

impl Module for Tower {
    fn collect_params(&self, out: &mut Vec<(ParamId, ParamKind)>) {
        self.embed.collect_params(out);
        for b in &self.blocks {
            b.collect_params(out);
        }
        self.norm.collect_params(out);
        self.head.collect_params(out);
    }
}

/// Actor with one residual block, critic with two; the three blocks are the
/// MoE sites in [`SITES`] order.
#[derive(Clone, Debug)]
pub struct ActorCritic {
    pub obs_dim: usize,
    pub config: AgentConfig,
    pub actor: Tower,
    pub critic: Tower,
}

pub struct AgentOutput {
    /// `[B, actions]`
    pub logits: Var,
    /// `[B, 1]`
    pub values: Var,
    /// Gate weights per site, `[B, E]`, in [`SITES`] order.
    pub gates: Vec<Option<Var>>,
}

fn block<R: Rng + ?Sized>(
    store: &mut ParamStore,
    site: &str,
    cfg: &AgentConfig,
    experts: Option<usize>,
    plain_hidden: usize,
    rng: &mut R,
) -> Result<ResidualBlock> {
    let norm = LayerNorm::new(store, &format!("{site}.norm"), cfg.d)?;
    let inner = match experts {
        Some(e) => Inner::Moe(MoeLayer::new(store, &format!("{site}.moe"), cfg.d, cfg.expert_hidden, e, true, rng)?),
        None => Inner::Mlp(Mlp::bottleneck(store, &format!("{site}.mlp"), cfg.d, plain_hidden, true, rng)?),
    };
    Ok(ResidualBlock { norm, inner })
}

impl ActorCritic {
    /// `experts` is the per-site expert count, or `None` for plain blocks of
    /// hidden width `plain_hidden`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        obs_dim: usize,
        config: &AgentConfig,
        experts: Option<usize>,
        plain_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let d = config.d;
        let actor_embed = Linear::new(store, "actor.embed", obs_dim, d, true, rng)?;
        let actor_blocks = vec![block(store, SITES[0], config, experts, plain_hidden, rng)?];
        let actor_norm = LayerNorm::new(store, "actor.norm", d)?;
        let policy = Linear::new(store, "actor.policy", d, NUM_ACTIONS, true, rng)?;
        for v in store.value_mut(policy.weight).data_mut() {
            *v *= config.policy_init_scale;
        }
        if let Some(b) = policy.bias {
            for v in store.value_mut(b).data_mut() {
                *v = 0.0;
            }
        }
        let critic_embed = Linear::new(store, "critic.embed", obs_dim, d, true, rng)?;
        let critic_blocks = vec![
            block(store, SITES[1], config, experts, plain_hidden, rng)?,
            block(store, SITES[2], config, experts, plain_hidden, rng)?,
        ];
        let critic_norm = LayerNorm::new(store, "critic.norm", d)?;
        let value = Linear::new(store, "critic.value", d, 1, true, rng)?;
        Ok(ActorCritic {
            obs_dim,
            config: config.clone(),
            actor: Tower { embed: actor_embed, blocks: actor_blocks, norm: actor_norm, head: policy },
            critic: Tower { embed: critic_embed, blocks: critic_blocks, norm: critic_norm, head: value },
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, obs: Var) -> Result<AgentOutput> {
        let mut gates = Vec::with_capacity(3);
        let logits = self.actor.forward(g, store, obs, &mut gates)?;
        let values = self.critic.forward(g, store, obs, &mut gates)?;
        Ok(AgentOutput { logits, values, gates })
    }

    fn blocks(&self) -> impl Iterator<Item = &ResidualBlock> {
        self.actor.blocks.iter().chain(&self.critic.blocks)
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut ResidualBlock> {
        self.actor.blocks.iter_mut().chain(self.critic.blocks.iter_mut())
    }

    /// Expert count per site, or `None` when the blocks are plain MLPs.
    pub fn expert_counts(&self) -> Option<Vec<usize>> {
        self.blocks()
            .map(|b| match &b.inner {
                Inner::Moe(m) => Some(m.num_experts()),
                Inner::Mlp(_) => None,
            })
            .collect()
    }

    /// Appends `n_new` experts at every site.
    pub fn grow_experts(&mut self, store: &mut ParamStore, n_new: usize, seed: u64) -> Result<()> {
        for (i, b) in self.blocks_mut().enumerate() {
            match &mut b.inner {
                Inner::Moe(m) => m.grow(store, n_new, seed.wrapping_add(i as u64))?,
                Inner::Mlp(_) => return Err(Error::Expansion("cannot grow experts on a plain block".into())),
            }
        }
        Ok(())
    }

    /// Weights of the three residual inner paths (biases, router, norms
    /// excluded).
    pub fn active_params(&self, store: &ParamStore) -> usize {
        self.blocks()
            .map(|b| match &b.inner {
                Inner::Moe(m) => count_params(m, store, false, false),
                Inner::Mlp(m) => count_params(m, store, false, false),
            })
            .sum()
    }
}

impl Module for ActorCritic {
    fn collect_params(&self, out: &mut Vec<(ParamId, ParamKind)>) {
        self.actor.collect_params(out);
        self.critic.collect_params(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn agent(experts: Option<usize>) -> (ParamStore, ActorCritic) {
        let mut s = ParamStore::new();
        let a = ActorCritic::new(&mut s, 245, &AgentConfig::default(), experts, 64, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (s, a)
    }

    #[test]
    fn three_sites_and_matched_budget() {
        let (s1, a1) = agent(Some(2));
        assert_eq!(a1.expert_counts(), Some(vec![2, 2, 2]));
        let (s0, a0) = agent(None);
        assert_eq!(a0.expert_counts(), None);
        assert_eq!(a0.active_params(&s0), a1.active_params(&s1));
        assert_eq!(a1.active_params(&s1), 3 * 2 * 2 * 64 * 32);
    }

    #[test]
    fn initial_policy_is_near_uniform() {
        let (s, a) = agent(Some(1));
        let obs = Tensor::uniform(&[32, 245], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let mut g = Graph::new();
        let o = g.constant(obs);
        let out = a.forward(&mut g, &s, o).unwrap();
        let p = g.softmax(out.logits).unwrap();
        let probs = g.value(p);
        for row in probs.data().chunks(4) {
            let h: f64 = -row.iter().map(|q| q * q.ln()).sum::<f64>();
            assert!((h - 4f64.ln()).abs() / 4f64.ln() < 0.01, "entropy {h}");
        }
        assert_eq!(out.gates.len(), 3);
        assert_eq!(g.shape(out.values), &[32, 1]);
    }

    #[test]
    fn growth_keeps_old_bits() {
        let (mut s, mut a) = agent(Some(1));
        let before: Vec<(String, Tensor)> = s.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        a.grow_experts(&mut s, 1, 9).unwrap();
        assert_eq!(a.expert_counts(), Some(vec![2, 2, 2]));
        for (name, t) in &before {
            assert!(s.value(s.id(name).unwrap()).bit_eq(t), "{name}");
        }
        let (mut s0, mut a0) = agent(None);
        assert!(a0.grow_experts(&mut s0, 1, 0).is_err());
    }
}
