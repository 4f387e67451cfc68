//! Network-expansion baselines and the expandable core block.
//!
//! All methods act on the middle layer of the classifier MLP (the "core",
//! width `d` in and out). Conv layers are never expanded.
//!
//! - [`net2wider`]: enlarge hidden widths; old weights stay in the leading
//!   block, new rows and columns are random.
//! - [`ProgressiveStack`]: add a new column fed laterally by the hidden
//!   activations of every frozen earlier column; only the newest column's
//!   output is used.
//! - [`InjectedMlp`]: freeze everything and add `g_θ(x) − g_θ₀(x)` where
//!   `θ₀` is a frozen copy of the fresh branch, so the output is unchanged at
//!   the moment of injection.
//! - dynamic MoE: [`MoeLayer::grow`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::budget::{GrowthSchedule, SolvedDims, StageAction};
use crate::error::{Error, Result};
use crate::moe::MoeLayer;
use crate::nn::{count_params, freeze_all, init_uniform, Linear, Mlp, Module};
use crate::params::{ParamId, ParamKind, ParamStore, Param, AdamState};
use crate::tensor::Tensor;

/// Which expansion method a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExpansionMethod {
    None,
    Net2wider,
    Progressive,
    Injection,
    DynamicMoe { granularity: usize },
}

impl ExpansionMethod {
    /// Stable identifier used in file names and CSV output.
    pub fn label(&self) -> String {
        match self {
            ExpansionMethod::None => "none".into(),
            ExpansionMethod::Net2wider => "net2wider".into(),
            ExpansionMethod::Progressive => "progressive".into(),
            ExpansionMethod::Injection => "injection".into(),
            ExpansionMethod::DynamicMoe { granularity } => format!("dynamic_moe_g{granularity}"),
        }
    }

    pub fn parse_label(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => ExpansionMethod::None,
            "net2wider" => ExpansionMethod::Net2wider,
            "progressive" => ExpansionMethod::Progressive,
            "injection" => ExpansionMethod::Injection,
            _ => match s.strip_prefix("dynamic_moe_g").and_then(|g| g.parse().ok()) {
                Some(granularity) => ExpansionMethod::DynamicMoe { granularity },
                None => return Err(Error::Config(format!("unknown expansion method `{s}`"))),
            },
        })
    }
}

/// Widens the hidden layers of `mlp` to `new_widths`. The old weights keep
/// their positions in the leading block of each matrix; optimizer state is
/// carried for those entries.
pub fn net2wider(mlp: &mut Mlp, store: &mut ParamStore, new_widths: &[usize], seed: u64) -> Result<()> {
    let old = mlp.hidden_widths();
    if new_widths.len() != old.len() {
        return Err(Error::Expansion(format!(
            "net2wider: {} hidden layers but {} widths given",
            old.len(),
            new_widths.len()
        )));
    }
    if let Some((o, n)) = old.iter().zip(new_widths).find(|(o, n)| n < o) {
        return Err(Error::Expansion(format!("net2wider cannot shrink a hidden layer from {o} to {n}")));
    }
    if old == new_widths {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_layers = mlp.layers.len();
    for l in 0..n_layers {
        let layer = &mlp.layers[l];
        let new_in = if l == 0 { layer.in_dim } else { new_widths[l - 1] };
        let new_out = if l + 1 < n_layers { new_widths[l] } else { layer.out_dim };
        let w = widen_matrix(store.value(layer.weight), new_out, new_in, new_in, &mut rng);
        store.grow_leading(layer.weight, w)?;
        if let Some(b) = layer.bias {
            let bias = widen_vector(store.value(b), new_out, new_in, &mut rng);
            store.grow_leading(b, bias)?;
        }
        let layer = &mut mlp.layers[l];
        layer.in_dim = new_in;
        layer.out_dim = new_out;
    }
    Ok(())
}

fn widen_matrix<R: Rng>(old: &Tensor, rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Tensor {
    let (r0, c0) = (old.shape()[0], old.shape()[1]);
    let mut t = init_uniform(rng, &[rows, cols], fan_in);
    for i in 0..r0 {
        t.data_mut()[i * cols..i * cols + c0].copy_from_slice(&old.data()[i * c0..(i + 1) * c0]);
    }
    t
}

fn widen_vector<R: Rng>(old: &Tensor, len: usize, fan_in: usize, rng: &mut R) -> Tensor {
    let mut t = init_uniform(rng, &[len], fan_in);
    t.data_mut()[..old.numel()].copy_from_slice(old.data());
    t
}

/// Columns of identical shape with dense lateral maps from every earlier
/// column's layer-`i` input into every later column's layer `i` (`i ≥ 1`).
#[derive(Clone, Debug)]
pub struct ProgressiveStack {
    pub name: String,
    pub dims: Vec<usize>,
    pub bias: bool,
    pub columns: Vec<Mlp>,
    /// `laterals[k][j][i - 1]` maps column `j`'s layer-`i` input into
    /// column `k`'s layer `i`.
    pub laterals: Vec<Vec<Vec<Linear>>>,
}

impl ProgressiveStack {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dims: &[usize], bias: bool, rng: &mut R) -> Result<Self> {
        let column = Mlp::new(store, &format!("{name}.col0"), dims, bias, rng)?;
        Ok(ProgressiveStack {
            name: name.to_string(),
            dims: dims.to_vec(),
            bias,
            columns: vec![column],
            laterals: vec![Vec::new()],
        })
    }

    /// Freezes every existing column and lateral, then appends a new
    /// trainable column with seeded weights and laterals.
    pub fn add_column(&mut self, store: &mut ParamStore, seed: u64) -> Result<()> {
        freeze_all(self, store);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.columns.len();
        let col_name = format!("{}.col{k}", self.name);
        let column = Mlp::new(store, &col_name, &self.dims, self.bias, &mut rng)?;
        let mut lats = Vec::with_capacity(k);
        for j in 0..k {
            let mut per_layer = Vec::new();
            for i in 1..self.dims.len() - 1 {
                per_layer.push(Linear::new(
                    store,
                    &format!("{col_name}.lat{j}.l{i}"),
                    self.dims[i],
                    self.dims[i + 1],
                    false,
                    &mut rng,
                )?);
            }
            lats.push(per_layer);
        }
        self.columns.push(column);
        self.laterals.push(lats);
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n_layers = self.dims.len() - 1;
        let newest = self.columns.len() - 1;
        // inputs[j][i]: input to layer i of column j
        let mut inputs: Vec<Vec<Var>> = Vec::with_capacity(self.columns.len());
        let mut output = None;
        for (k, column) in self.columns.iter().enumerate() {
            let mut acts = vec![x];
            let last = if k == newest { n_layers } else { n_layers - 1 };
            for i in 0..last {
                let mut z = column.layers[i].forward(g, store, acts[i])?;
                if i >= 1 {
                    for (j, prev) in inputs.iter().enumerate() {
                        let lat = self.laterals[k][j][i - 1].forward(g, store, prev[i])?;
                        z = g.add(z, lat)?;
                    }
                }
                if i + 1 < n_layers {
                    acts.push(g.relu(z));
                } else {
                    output = Some(z);
                }
            }
            inputs.push(acts);
        }
        Ok(output.expect("newest column computes its output layer"))
    }
}

impl Module for ProgressiveStack {
    fn collect_params(&self, out: &mut Vec<(ParamId, ParamKind)>) {
        for c in &self.columns {
            c.collect_params(out);
        }
        for l in self.laterals.iter().flatten().flatten() {
            l.collect_params(out);
        }
    }
}

#[derive(Clone, Debug)]
pub struct InjectedBranch {
    pub theta: Mlp,
    pub theta0: Mlp,
}

/// A frozen MLP plus any number of injected branches `g_θ − g_θ₀`.
#[derive(Clone, Debug)]
pub struct InjectedMlp {
    pub name: String,
    pub base: Mlp,
    pub branch_dims: Vec<usize>,
    pub bias: bool,
    pub branches: Vec<InjectedBranch>,
}

impl InjectedMlp {
    pub fn new(name: &str, base: Mlp, branch_dims: Vec<usize>, bias: bool) -> Result<Self> {
        let dims = base.dims();
        if branch_dims.first() != dims.first() || branch_dims.last() != dims.last() {
            return Err(Error::Expansion(format!(
                "branch dims {branch_dims:?} do not match mlp io {dims:?}"
            )));
        }
        Ok(InjectedMlp {
            name: name.to_string(),
            base,
            branch_dims,
            bias,
            branches: Vec::new(),
        })
    }

    /// Freezes all current parameters and adds a fresh branch and its frozen
    /// copy; the block output is unchanged by construction.
    pub fn inject(&mut self, store: &mut ParamStore, seed: u64) -> Result<()> {
        freeze_all(self, store);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.branches.len();
        let theta = Mlp::new(store, &format!("{}.inject{k}.theta", self.name), &self.branch_dims, self.bias, &mut rng)?;
        let mut theta0 = theta.clone();
        for (src, dst) in theta.layers.iter().zip(theta0.layers.iter_mut()) {
            dst.weight = copy_frozen(store, src.weight, ".theta.", ".theta0.")?;
            if let (Some(sb), Some(db)) = (src.bias, dst.bias.as_mut()) {
                *db = copy_frozen(store, sb, ".theta.", ".theta0.")?;
            }
        }
        self.branches.push(InjectedBranch { theta, theta0 });
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut y = self.base.forward(g, store, x)?;
        for b in &self.branches {
            let live = b.theta.forward(g, store, x)?;
            let anchor = b.theta0.forward(g, store, x)?;
            let delta = g.sub(live, anchor)?;
            y = g.add(y, delta)?;
        }
        Ok(y)
    }
}

fn copy_frozen(store: &mut ParamStore, src: ParamId, from: &str, to: &str) -> Result<ParamId> {
    let p = store.get(src);
    let name = p.name.replacen(from, to, 1);
    let value = p.value.clone();
    let n = value.numel();
    store.push_raw(Param {
        name,
        value,
        grad: None,
        frozen: true,
        state: AdamState::zeros(n),
    })
}

impl Module for InjectedMlp {
    fn collect_params(&self, out: &mut Vec<(ParamId, ParamKind)>) {
        self.base.collect_params(out);
        for b in &self.branches {
            b.theta.collect_params(out);
            b.theta0.collect_params(out);
        }
    }
}

/// The expandable middle of the classifier MLP.
#[derive(Clone, Debug)]
pub enum CoreBlock {
    Plain(Mlp),
    Moe(MoeLayer),
    Progressive(ProgressiveStack),
    Injected(InjectedMlp),
}

impl CoreBlock {
    pub fn width(&self) -> usize {
        match self {
            CoreBlock::Plain(m) => m.layers[0].in_dim,
            CoreBlock::Moe(m) => m.d,
            CoreBlock::Progressive(p) => p.dims[0],
            CoreBlock::Injected(i) => i.base.layers[0].in_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            CoreBlock::Plain(m) => m.forward(g, store, x),
            CoreBlock::Moe(m) => m.forward(g, store, x),
            CoreBlock::Progressive(p) => p.forward(g, store, x),
            CoreBlock::Injected(i) => i.forward(g, store, x),
        }
    }

    pub fn num_experts(&self) -> Option<usize> {
        match self {
            CoreBlock::Moe(m) => Some(m.num_experts()),
            _ => None,
        }
    }

    /// Gradient-free output for a batch.
    pub fn output_tensor(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, store, xv)?;
        Ok(g.value(y).clone())
    }
}

impl Module for CoreBlock {
    fn collect_params(&self, out: &mut Vec<(ParamId, ParamKind)>) {
        match self {
            CoreBlock::Plain(m) => m.collect_params(out),
            CoreBlock::Moe(m) => m.collect_params(out),
            CoreBlock::Progressive(p) => p.collect_params(out),
            CoreBlock::Injected(i) => i.collect_params(out),
        }
    }
}

/// Builds the stage-0 core block described by `schedule`.
pub fn build_core<R: Rng + ?Sized>(
    schedule: &GrowthSchedule,
    store: &mut ParamStore,
    name: &str,
    bias: bool,
    rng: &mut R,
) -> Result<CoreBlock> {
    let d = schedule.d;
    Ok(match (&schedule.method, &schedule.dims) {
        (ExpansionMethod::None, SolvedDims::Plain { hidden }) => {
            CoreBlock::Plain(Mlp::bottleneck(store, name, d, *hidden, bias, rng)?)
        }
        (ExpansionMethod::Net2wider, SolvedDims::Net2Wider { widths }) => {
            CoreBlock::Plain(Mlp::bottleneck(store, name, d, widths[0], bias, rng)?)
        }
        (ExpansionMethod::DynamicMoe { granularity }, SolvedDims::Moe { h, .. }) => {
            CoreBlock::Moe(MoeLayer::new(store, name, d, *h, *granularity, bias, rng)?)
        }
        (ExpansionMethod::Progressive, SolvedDims::Progressive { column_width }) => {
            CoreBlock::Progressive(ProgressiveStack::new(store, name, &[d, *column_width, d], bias, rng)?)
        }
        (ExpansionMethod::Injection, SolvedDims::Injection { width }) => {
            let base = Mlp::bottleneck(store, &format!("{name}.base"), d, *width, bias, rng)?;
            CoreBlock::Injected(InjectedMlp::new(name, base, vec![d, *width, d], bias)?)
        }
        (m, dims) => {
            return Err(Error::Expansion(format!("schedule dims {dims:?} do not fit method {}", m.label())));
        }
    })
}

/// Applies stage `stage` of `schedule` to `core`. Returns the core's weight
/// count (biases and router excluded) after the stage.
pub fn apply_expansion(
    schedule: &GrowthSchedule,
    core: &mut CoreBlock,
    store: &mut ParamStore,
    stage: usize,
    seed: u64,
) -> Result<usize> {
    if stage == 0 || stage >= schedule.actions.len() {
        return Err(Error::Expansion(format!(
            "stage {stage} outside 1..{}",
            schedule.actions.len()
        )));
    }
    match (&schedule.actions[stage], &mut *core) {
        (StageAction::Keep, _) => {}
        (StageAction::AddExperts(n), CoreBlock::Moe(m)) => m.grow(store, *n, seed)?,
        (StageAction::Widen(w), CoreBlock::Plain(m)) => net2wider(m, store, w, seed)?,
        (StageAction::AddColumn, CoreBlock::Progressive(p)) => p.add_column(store, seed)?,
        (StageAction::Inject, CoreBlock::Injected(i)) => i.inject(store, seed)?,
        (action, _) => {
            return Err(Error::Expansion(format!(
                "action {action:?} does not apply to this core block"
            )));
        }
    }
    Ok(count_params(core, store, false, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::budget::solve_method_dims;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn probes(n: usize, d: usize, seed: u64) -> Tensor {
        Tensor::uniform(&[n, d], 2.0, &mut rng(seed))
    }

    #[test]
    fn net2wider_keeps_leading_block() {
        let mut s = ParamStore::new();
        let mut mlp = Mlp::new(&mut s, "m", &[10, 32, 32, 5], true, &mut rng(1)).unwrap();
        let w0 = s.value(mlp.layers[0].weight).clone();
        let w1 = s.value(mlp.layers[1].weight).clone();
        net2wider(&mut mlp, &mut s, &[48, 48], 2).unwrap();
        let n0 = s.value(mlp.layers[0].weight);
        assert_eq!(n0.shape(), &[48, 10]);
        assert!(n0.slice_rows(0, 32).bit_eq(&w0));
        let n1 = s.value(mlp.layers[1].weight);
        assert_eq!(n1.shape(), &[48, 48]);
        for i in 0..32 {
            for j in 0..32 {
                assert_eq!(n1.at2(i, j).to_bits(), w1.at2(i, j).to_bits());
            }
        }
        assert_eq!(s.value(mlp.layers[2].weight).shape(), &[5, 48]);
        assert_eq!(mlp.dims(), vec![10, 48, 48, 5]);
    }

    #[test]
    fn net2wider_same_widths_is_identity() {
        let mut s = ParamStore::new();
        let mut mlp = Mlp::new(&mut s, "m", &[6, 8, 6], true, &mut rng(1)).unwrap();
        let before: Vec<Tensor> = mlp.param_ids().iter().map(|i| s.value(*i).clone()).collect();
        net2wider(&mut mlp, &mut s, &[8], 5).unwrap();
        for (id, t) in mlp.param_ids().iter().zip(&before) {
            assert!(s.value(*id).bit_eq(t));
        }
    }

    #[test]
    fn net2wider_rejects_shrinking() {
        let mut s = ParamStore::new();
        let mut mlp = Mlp::new(&mut s, "m", &[6, 8, 6], true, &mut rng(1)).unwrap();
        assert!(matches!(net2wider(&mut mlp, &mut s, &[4], 5), Err(Error::Expansion(_))));
    }

    #[test]
    fn single_column_stack_matches_plain_mlp() {
        let mut s = ParamStore::new();
        let stack = ProgressiveStack::new(&mut s, "p", &[6, 5, 6], true, &mut rng(3)).unwrap();
        let x = probes(7, 6, 4);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let a = stack.forward(&mut g, &s, xv).unwrap();
        let b = stack.columns[0].forward(&mut g, &s, xv).unwrap();
        assert!(g.value(a).bit_eq(g.value(b)));
    }

    #[test]
    fn earlier_columns_get_no_gradient() {
        let mut s = ParamStore::new();
        let mut stack = ProgressiveStack::new(&mut s, "p", &[6, 5, 4, 6], true, &mut rng(3)).unwrap();
        stack.add_column(&mut s, 9).unwrap();
        stack.add_column(&mut s, 10).unwrap();
        let x = probes(7, 6, 4);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = stack.forward(&mut g, &s, xv).unwrap();
        let sq = g.mul(y, y).unwrap();
        let loss = g.mean(sq);
        let grads = g.backward(loss).unwrap();
        s.accumulate(&grads);
        let mut frozen_total = 0.0;
        let mut frozen_seen = 0;
        for col in &stack.columns[..2] {
            for id in col.param_ids() {
                frozen_seen += 1;
                frozen_total += s.get(id).grad.as_ref().map_or(0.0, |g| g.data().iter().map(|v| v.abs()).sum());
            }
        }
        assert!(frozen_seen > 0);
        assert_eq!(frozen_total, 0.0);
        let newest_grad: f64 = stack.columns[2]
            .param_ids()
            .iter()
            .map(|id| s.get(*id).grad.as_ref().unwrap().data().iter().map(|v| v.abs()).sum::<f64>())
            .sum();
        assert!(newest_grad > 0.0);
    }

    #[test]
    fn zero_laterals_reduce_to_newest_column() {
        let mut s = ParamStore::new();
        let mut stack = ProgressiveStack::new(&mut s, "p", &[6, 5, 6], true, &mut rng(3)).unwrap();
        stack.add_column(&mut s, 4).unwrap();
        for l in stack.laterals.iter().flatten().flatten() {
            let shape = s.value(l.weight).shape().to_vec();
            *s.value_mut(l.weight) = Tensor::zeros(&shape);
        }
        let x = probes(5, 6, 6);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let a = stack.forward(&mut g, &s, xv).unwrap();
        let b = stack.columns[1].forward(&mut g, &s, xv).unwrap();
        assert!(g.value(a).bit_eq(g.value(b)));
    }

    fn injected(seed: u64) -> (ParamStore, InjectedMlp) {
        let mut s = ParamStore::new();
        let base = Mlp::bottleneck(&mut s, "c.base", 8, 6, true, &mut rng(seed)).unwrap();
        let inj = InjectedMlp::new("c", base, vec![8, 4, 8], true).unwrap();
        (s, inj)
    }

    fn out(s: &ParamStore, inj: &InjectedMlp, x: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = inj.forward(&mut g, s, xv).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn injection_preserves_function() {
        let (mut s, mut inj) = injected(1);
        let x = probes(100, 8, 2);
        let before = out(&s, &inj, &x);
        inj.inject(&mut s, 3).unwrap();
        let after = out(&s, &inj, &x);
        assert!(before.max_abs_diff(&after) <= 1e-9);
    }

    #[test]
    fn injection_trains_only_the_branch() {
        let (mut s, mut inj) = injected(1);
        inj.inject(&mut s, 3).unwrap();
        assert_eq!(count_params(&inj, &s, true, true), count_params(&inj.branches[0].theta, &s, true, false));
        assert_eq!(count_params(&inj, &s, true, true), 8 * 4 + 4 + 4 * 8 + 8);

        let x = probes(16, 8, 2);
        let before = out(&s, &inj, &x);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = inj.forward(&mut g, &s, xv).unwrap();
        let target = g.constant(Tensor::full(&[16, 8], 1.0));
        let diff = g.sub(y, target).unwrap();
        let sq = g.mul(diff, diff).unwrap();
        let loss = g.mean(sq);
        let grads = g.backward(loss).unwrap();
        s.accumulate(&grads);
        crate::params::AdamConfig { lr: 1e-2, ..Default::default() }.step(&mut s).unwrap();
        let after = out(&s, &inj, &x);
        assert!(before.max_abs_diff(&after) > 1e-6);
        for id in inj.base.param_ids() {
            assert!(s.is_frozen(id));
        }
    }

    #[test]
    fn apply_none_is_identity_and_moe_reaches_sixteen() {
        let sched = solve_method_dims(ExpansionMethod::None, 16, 16 * 2 * 8, 4).unwrap();
        let mut s = ParamStore::new();
        let mut core = build_core(&sched, &mut s, "core", true, &mut rng(1)).unwrap();
        let x = probes(4, 16, 1);
        let before = core.output_tensor(&s, &x).unwrap();
        let n0 = count_params(&core, &s, false, false);
        for st in 1..4 {
            assert_eq!(apply_expansion(&sched, &mut core, &mut s, st, st as u64).unwrap(), n0);
        }
        assert!(core.output_tensor(&s, &x).unwrap().bit_eq(&before));

        let sched = solve_method_dims(ExpansionMethod::DynamicMoe { granularity: 4 }, 16, 2 * 16 * 4 * 10 * 2, 10).unwrap();
        let mut s = ParamStore::new();
        let mut core = build_core(&sched, &mut s, "core", true, &mut rng(1)).unwrap();
        for st in 1..=3 {
            apply_expansion(&sched, &mut core, &mut s, st, st as u64).unwrap();
        }
        assert_eq!(core.num_experts(), Some(16));
    }

    #[test]
    fn repeated_injection_preserves_function_each_stage() {
        let sched = solve_method_dims(ExpansionMethod::Injection, 16, 16 * 2 * 19 * 4, 10).unwrap();
        let mut s = ParamStore::new();
        let mut core = build_core(&sched, &mut s, "core", true, &mut rng(1)).unwrap();
        let x = probes(200, 16, 9);
        for st in 1..10 {
            // move the live branch so later injections start from a non-initial state
            let mut r = rng(100 + st as u64);
            for (id, p) in s.iter().filter(|(_, p)| !p.frozen).map(|(id, p)| (id, p.value.shape().to_vec())).collect::<Vec<_>>() {
                let noise = Tensor::uniform(&p, 0.05, &mut r);
                for (v, n) in s.value_mut(id).data_mut().iter_mut().zip(noise.data()) {
                    *v += n;
                }
            }
            let before = core.output_tensor(&s, &x).unwrap();
            apply_expansion(&sched, &mut core, &mut s, st, st as u64).unwrap();
            let after = core.output_tensor(&s, &x).unwrap();
            assert!(before.max_abs_diff(&after) <= 1e-9, "stage {st}");
        }
    }

    #[test]
    fn action_method_mismatch_is_rejected() {
        let sched = solve_method_dims(ExpansionMethod::Net2wider, 16, 16 * 2 * 40, 4).unwrap();
        let mut s = ParamStore::new();
        let mut core = CoreBlock::Moe(MoeLayer::new(&mut s, "core", 16, 4, 1, true, &mut rng(1)).unwrap());
        assert!(apply_expansion(&sched, &mut core, &mut s, 1, 0).is_err());
    }

    #[test]
    fn method_labels_round_trip() {
        for m in [
            ExpansionMethod::None,
            ExpansionMethod::Net2wider,
            ExpansionMethod::Progressive,
            ExpansionMethod::Injection,
            ExpansionMethod::DynamicMoe { granularity: 4 },
        ] {
            assert_eq!(ExpansionMethod::parse_label(&m.label()).unwrap(), m);
        }
        assert!(ExpansionMethod::parse_label("bogus").is_err());
        assert!(serde_json::from_str::<ExpansionMethod>(r#"{"tag":"bogus"}"#).is_err());
    }
}
