//! Self-checks of the function- and parameter-preservation guarantees of each
//! expansion method.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::Result;
use crate::expansion::{net2wider, InjectedMlp, ProgressiveStack};
use crate::moe::MoeLayer;
use crate::nn::{Mlp, Module};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn probes(n: usize, d: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[n, d], 2.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn snapshot(store: &ParamStore) -> Vec<(String, Tensor)> {
    store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect()
}

fn unchanged(store: &ParamStore, before: &[(String, Tensor)]) -> usize {
    before
        .iter()
        .filter(|(n, t)| store.id(n).map(|id| store.value(id).bit_eq(t)).unwrap_or(false))
        .count()
}

/// Growing experts leaves every old parameter, and every old expert's
/// output on `n_probes` inputs, bit-identical.
pub fn check_grow_experts(n_probes: usize, seed: u64) -> Result<CheckResult> {
    let mut store = ParamStore::new();
    let d = 16;
    let mut moe = MoeLayer::new(&mut store, "moe", d, 8, 2, true, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let x = probes(n_probes, d, seed + 1);
    let expert_out = |moe: &MoeLayer, store: &ParamStore| -> Result<Vec<Tensor>> {
        moe.experts[..2]
            .iter()
            .map(|e| {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let y = e.forward(&mut g, store, xv)?;
                Ok(g.value(y).clone())
            })
            .collect()
    };
    let before = snapshot(&store);
    let outs = expert_out(&moe, &store)?;
    moe.grow(&mut store, 2, seed + 2)?;
    let kept = unchanged(&store, &before);
    let outs_after = expert_out(&moe, &store)?;
    let same_out = outs.iter().zip(&outs_after).all(|(a, b)| a.bit_eq(b));
    let fresh = store.iter().skip(before.len()).all(|(_, p)| p.state.step == 0);
    Ok(CheckResult {
        name: "grow_experts preserves old parameters",
        passed: kept == before.len() && same_out && fresh && moe.num_experts() == 4,
        detail: format!("{kept}/{} old tensors bit-identical, old expert outputs identical on {n_probes} probes: {same_out}", before.len()),
    })
}

/// Output deviation of an injected network at the moment of injection.
pub fn check_injection(n_probes: usize, seed: u64) -> Result<CheckResult> {
    let mut store = ParamStore::new();
    let d = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = Mlp::bottleneck(&mut store, "core.base", d, 12, true, &mut rng)?;
    let mut inj = InjectedMlp::new("core", base, vec![d, 12, d], true)?;
    let x = probes(n_probes, d, seed + 1);
    let run = |inj: &InjectedMlp, store: &ParamStore| -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = inj.forward(&mut g, store, xv)?;
        Ok(g.value(y).clone())
    };
    let mut worst: f64 = 0.0;
    for k in 0..3 {
        let before = run(&inj, &store)?;
        inj.inject(&mut store, seed + 10 + k)?;
        worst = worst.max(before.max_abs_diff(&run(&inj, &store)?));
        // perturb the live branch so the next injection starts from trained weights
        let live: Vec<_> = inj.branches.last().expect("just injected").theta.param_ids();
        for id in live {
            for v in store.value_mut(id).data_mut() {
                *v *= 1.1;
            }
        }
    }
    Ok(CheckResult {
        name: "plasticity injection preserves outputs",
        passed: worst <= 1e-9,
        detail: format!("max deviation {worst:e} over 3 injections on {n_probes} probes"),
    })
}

/// The old weight block survives widening bit-for-bit.
pub fn check_net2wider(seed: u64) -> Result<CheckResult> {
    let mut store = ParamStore::new();
    let mut mlp = Mlp::new(&mut store, "mlp", &[12, 20, 20, 12], true, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let old: Vec<(Vec<usize>, Tensor)> = mlp
        .param_ids()
        .iter()
        .map(|id| (store.value(*id).shape().to_vec(), store.value(*id).clone()))
        .collect();
    net2wider(&mut mlp, &mut store, &[33, 41], seed + 1)?;
    let mut ok = 0;
    for ((shape, t), id) in old.iter().zip(mlp.param_ids()) {
        let new = store.value(id);
        let cols = if new.ndim() == 2 { new.shape()[1] } else { 1 };
        let (rows, oc) = if shape.len() == 2 { (shape[0], shape[1]) } else { (shape[0], 1) };
        let same = (0..rows).all(|i| (0..oc).all(|j| new.data()[i * cols + j].to_bits() == t.data()[i * oc + j].to_bits()));
        ok += same as usize;
    }
    Ok(CheckResult {
        name: "net2wider keeps the old weight block",
        passed: ok == old.len(),
        detail: format!("{ok}/{} tensors with bit-equal leading block", old.len()),
    })
}

/// Frozen progressive columns receive no gradient.
pub fn check_progressive(seed: u64) -> Result<CheckResult> {
    let mut store = ParamStore::new();
    let mut stack = ProgressiveStack::new(&mut store, "core", &[10, 8, 8, 10], true, &mut ChaCha8Rng::seed_from_u64(seed))?;
    stack.add_column(&mut store, seed + 1)?;
    stack.add_column(&mut store, seed + 2)?;
    let mut g = Graph::new();
    let x = g.constant(probes(32, 10, seed + 3));
    let y = stack.forward(&mut g, &store, x)?;
    let sq = g.mul(y, y)?;
    let loss = g.mean(sq);
    let grads = g.backward(loss)?;
    store.accumulate(&grads);
    let mut old_ids = Vec::new();
    for c in &stack.columns[..2] {
        old_ids.extend(c.param_ids());
    }
    for l in stack.laterals[1].iter().flatten() {
        old_ids.extend(l.param_ids());
    }
    let leaked = old_ids
        .iter()
        .filter(|id| store.get(**id).grad.as_ref().is_some_and(|t| t.data().iter().any(|v| *v != 0.0)))
        .count();
    let newest_live = stack.columns[2]
        .param_ids()
        .iter()
        .any(|id| store.get(*id).grad.as_ref().is_some_and(|t| t.data().iter().any(|v| *v != 0.0)));
    Ok(CheckResult {
        name: "progressive freezes earlier columns",
        passed: leaked == 0 && newest_live,
        detail: format!("{leaked} of {} frozen tensors received gradient; newest column trains: {newest_live}", old_ids.len()),
    })
}

pub fn preservation_checks(seed: u64) -> Result<Vec<CheckResult>> {
    Ok(vec![
        check_grow_experts(1000, seed)?,
        check_injection(1000, seed)?,
        check_net2wider(seed)?,
        check_progressive(seed)?,
    ])
}
