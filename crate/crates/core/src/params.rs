//! Named trainable tensors, their gradients and Adam state.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a parameter is, for budget accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Router,
    Norm,
}

/// First/second moments and step count for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn zeros(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub frozen: bool,
    pub state: AdamState,
}

/// Ordered, uniquely named parameters. Insertion order is the checkpoint order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        let n = value.numel();
        self.params.push(Param {
            name,
            value,
            grad: None,
            frozen: false,
            state: AdamState::zeros(n),
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    pub fn freeze(&mut self, id: ParamId) {
        let p = &mut self.params[id.0];
        p.frozen = true;
        p.grad = None;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Replaces a parameter's value with a larger tensor whose leading block
    /// is the old value. Adam moments are carried for the surviving entries
    /// and zeroed elsewhere; the step count is kept.
    pub fn grow_leading(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        let old_shape = p.value.shape().to_vec();
        let new_shape = value.shape().to_vec();
        let m = embed_leading(&p.state.m, &old_shape, &new_shape)?;
        let v = embed_leading(&p.state.v, &old_shape, &new_shape)?;
        p.value = value;
        p.state.m = m;
        p.state.v = v;
        p.grad = None;
        Ok(())
    }

    /// Adds gradients from a backward pass into the per-parameter buffers.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            if p.frozen {
                continue;
            }
            match &mut p.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => p.grad = Some(g.clone()),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Scales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let total: f64 = self
            .params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if total > max_norm && total > 0.0 {
            let scale = max_norm / total;
            for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
                for x in g.data_mut() {
                    *x *= scale;
                }
            }
        }
        total
    }

    /// Copies values and optimizer state from `other`, which must hold the
    /// same names and shapes in the same order.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::CheckpointMismatch(format!(
                "expected {} parameters, checkpoint has {}",
                self.len(),
                other.len()
            )));
        }
        for (mine, theirs) in self.params.iter().zip(&other.params) {
            if mine.name != theirs.name {
                return Err(Error::CheckpointMismatch(format!(
                    "expected parameter `{}`, checkpoint has `{}`",
                    mine.name, theirs.name
                )));
            }
            if mine.value.shape() != theirs.value.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "`{}`: expected shape {:?}, checkpoint has {:?}",
                    mine.name,
                    mine.value.shape(),
                    theirs.value.shape()
                )));
            }
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            mine.value = theirs.value.clone();
            mine.state = theirs.state.clone();
            mine.frozen = theirs.frozen;
            mine.grad = None;
        }
        Ok(())
    }

    pub(crate) fn push_raw(&mut self, p: Param) -> Result<ParamId> {
        if self.index.contains_key(&p.name) {
            return Err(Error::DuplicateParam(p.name));
        }
        let id = ParamId(self.params.len());
        self.index.insert(p.name.clone(), id);
        self.params.push(p);
        Ok(id)
    }
}

/// Copies `old` (row-major, `old_shape`) into the leading block of a zero
/// buffer of `new_shape`. Both shapes must have the same rank and every new
/// dimension must be at least the old one.
pub fn embed_leading(old: &[f64], old_shape: &[usize], new_shape: &[usize]) -> Result<Vec<f64>> {
    if old_shape.len() != new_shape.len() || old_shape.iter().zip(new_shape).any(|(o, n)| n < o) {
        return Err(Error::shape(
            "grow",
            format!("cannot embed {old_shape:?} into {new_shape:?}"),
        ));
    }
    let mut out = vec![0.0; new_shape.iter().product()];
    match old_shape.len() {
        0 => out[0] = old[0],
        1 => out[..old.len()].copy_from_slice(old),
        2 => {
            let (r, c) = (old_shape[0], old_shape[1]);
            let nc = new_shape[1];
            for i in 0..r {
                out[i * nc..i * nc + c].copy_from_slice(&old[i * c..(i + 1) * c]);
            }
        }
        _ => {
            return Err(Error::shape("grow", "only rank ≤ 2 parameters can be widened"));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    /// One bias-corrected Adam update on every trainable parameter, then
    /// clears the gradients.
    pub fn step(&self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store.params.iter().find(|p| !p.frozen && p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        for p in store.params.iter_mut() {
            if p.frozen {
                continue;
            }
            let grad = p.grad.take().expect("checked above");
            let st = &mut p.state;
            st.step += 1;
            let t = st.step as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            for (((w, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
