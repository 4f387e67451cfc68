//! Mixture of bottleneck experts with a dense softmax router and runtime
//! expert growth.
//!
//! Every expert maps `d → h → d`, so the layer's input and output width stay
//! at `d` however many experts exist. The router produces one logit per
//! expert from the layer input; the output is the gate-weighted sum of all
//! expert outputs (no top-k dispatch), so every expert parameter is active.
//!
//! [`MoeLayer::grow`] appends freshly initialized experts together with zero
//! router rows. Existing parameters and their optimizer state are left
//! untouched; the layer function is *not* preserved, since the new experts
//! immediately receive a share of the gate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp, Module};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// A `d → h → d` expert.
pub type BottleneckExpert = Mlp;

/// One `[1, d]` row per expert; the router matrix is their stack `[E, d]`.
/// Rows are separate parameters so a new expert's row starts with fresh
/// optimizer state.
#[derive(Clone, Debug)]
pub struct Router {
    pub rows: Vec<ParamId>,
    pub d: usize,
}

impl Router {
    fn add_row(&mut self, store: &mut ParamStore, name: &str) -> Result<()> {
        let e = self.rows.len();
        self.rows.push(store.add(format!("{name}.router.row{e}"), Tensor::zeros(&[1, self.d]))?);
        Ok(())
    }

    /// Router matrix `[E, d]`.
    pub fn weight(&self, store: &ParamStore) -> Tensor {
        let data = self.rows.iter().flat_map(|r| store.value(*r).data().to_vec()).collect();
        Tensor::new(vec![self.rows.len(), self.d], data).expect("rows are [1, d]")
    }

    /// Softmax gate weights `[B, E]`.
    pub fn gates(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let xs = g.shape(x);
        if xs.len() != 2 || xs[1] != self.d {
            return Err(Error::shape("router", format!("expected [_, {}], got {xs:?}", self.d)));
        }
        let rows: Vec<Var> = self.rows.iter().map(|r| g.param(store, *r)).collect();
        let w = g.concat(&rows, 0)?;
        let wt = g.transpose(w)?;
        let logits = g.matmul(x, wt)?;
        g.softmax(logits)
    }
}

impl Module for Router {
    fn collect_params(&self, out: &mut Vec<(ParamId, ParamKind)>) {
        out.extend(self.rows.iter().map(|r| (*r, ParamKind::Router)));
    }
}

#[derive(Clone, Debug)]
pub struct MoeLayer {
    pub name: String,
    pub d: usize,
    pub h: usize,
    pub bias: bool,
    pub experts: Vec<BottleneckExpert>,
    pub router: Router,
    /// Weight of the load-balancing penalty returned by
    /// [`MoeLayer::balance_loss`]; zero disables it.
    pub balance_coef: f64,
}

impl MoeLayer {
    pub fn new<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        h: usize,
        n_experts: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if n_experts == 0 || d == 0 || h == 0 {
            return Err(Error::Config(format!("moe `{name}`: d, h and expert count must be positive")));
        }
        let mut layer = MoeLayer {
            name: name.to_string(),
            d,
            h,
            bias,
            experts: Vec::new(),
            router: Router { rows: Vec::new(), d },
            balance_coef: 0.0,
        };
        for _ in 0..n_experts {
            layer.push_expert(store, rng)?;
        }
        Ok(layer)
    }

    fn push_expert<R: rand::Rng + ?Sized>(&mut self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let e = self.experts.len();
        let name = format!("{}.expert{e}", self.name);
        self.experts.push(Mlp::bottleneck(store, &name, self.d, self.h, self.bias, rng)?);
        self.router.add_row(store, &self.name)
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Appends `n_new` seeded experts and zero router rows. Old parameters
    /// are not touched.
    pub fn grow(&mut self, store: &mut ParamStore, n_new: usize, seed: u64) -> Result<()> {
        if n_new == 0 {
            return Err(Error::Expansion("grow_experts needs n_new ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..n_new {
            self.push_expert(store, &mut rng)?;
        }
        Ok(())
    }

    pub fn gate_weights(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.router.gates(g, store, x)
    }

    /// Returns `(y, gates)` with `y = Σ_e gates[:, e] · expert_e(x)`.
    pub fn forward_with_gates(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let gates = self.gate_weights(g, store, x)?;
        let mut acc: Option<Var> = None;
        for (e, expert) in self.experts.iter().enumerate() {
            let out = expert.forward(g, store, x)?;
            let ge = g.narrow(gates, 1, e, 1)?;
            let weighted = g.mul(out, ge)?;
            acc = Some(match acc {
                Some(a) => g.add(a, weighted)?,
                None => weighted,
            });
        }
        Ok((acc.expect("at least one expert"), gates))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        Ok(self.forward_with_gates(g, store, x)?.0)
    }

    /// `balance_coef · E · Σ_e mean_b(gates[b, e])²`; minimal when the mean
    /// gate is uniform. Returns `None` when the coefficient is zero.
    pub fn balance_loss(&self, g: &mut Graph, gates: Var) -> Result<Option<Var>> {
        if self.balance_coef == 0.0 {
            return Ok(None);
        }
        let b = g.shape(gates)[0];
        let ones = g.constant(Tensor::full(&[1, b], 1.0 / b as f64));
        let mean = g.matmul(ones, gates)?;
        let sq = g.mul(mean, mean)?;
        let s = g.sum(sq);
        Ok(Some(g.scale(s, self.balance_coef * self.num_experts() as f64)))
    }

    /// Expert parameters under dense gating: `E·2·d·h`, plus expert biases
    /// and router weights when requested.
    pub fn active_param_count(&self, include_bias: bool, include_router: bool) -> usize {
        let e = self.num_experts();
        let mut n = e * 2 * self.d * self.h;
        if include_bias && self.bias {
            n += e * (self.h + self.d);
        }
        if include_router {
            n += e * self.d;
        }
        n
    }

    /// Gradient-free gate weights for a batch.
    pub fn gate_tensor(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let gates = self.gate_weights(&mut g, store, xv)?;
        Ok(g.value(gates).clone())
    }

    /// Gradient-free layer output for a batch.
    pub fn output_tensor(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, store, xv)?;
        Ok(g.value(y).clone())
    }
}

impl Module for MoeLayer {
    fn collect_params(&self, out: &mut Vec<(ParamId, ParamKind)>) {
        for e in &self.experts {
            e.collect_params(out);
        }
        self.router.collect_params(out);
    }
}

/// Mixture of linear experts: `E` maps `d → d/E`, each scaled by its gate,
/// concatenated back to width `d`. Kept as a diagnostic counterpart to the
/// bottleneck layer with the same weight count.
#[derive(Clone, Debug)]
pub struct LinearExpertLayer {
    pub experts: Vec<Linear>,
    pub router: Router,
}

impl LinearExpertLayer {
    pub fn new<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        n_experts: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_experts == 0 || d % n_experts != 0 {
            return Err(Error::Config(format!("{n_experts} experts must divide width {d}")));
        }
        let experts = (0..n_experts)
            .map(|e| Linear::new(store, &format!("{name}.expert{e}"), d, d / n_experts, true, rng))
            .collect::<Result<Vec<_>>>()?;
        let mut router = Router { rows: Vec::new(), d };
        for _ in 0..n_experts {
            router.add_row(store, name)?;
        }
        Ok(LinearExpertLayer { experts, router })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gates = self.router.gates(g, store, x)?;
        let mut parts = Vec::with_capacity(self.experts.len());
        for (e, expert) in self.experts.iter().enumerate() {
            let out = expert.forward(g, store, x)?;
            let ge = g.narrow(gates, 1, e, 1)?;
            parts.push(g.mul(out, ge)?);
        }
        g.concat(&parts, 1)
    }
}

impl Module for LinearExpertLayer {
    fn collect_params(&self, out: &mut Vec<(ParamId, ParamKind)>) {
        for e in &self.experts {
            e.collect_params(out);
        }
        self.router.collect_params(out);
    }
}
