//! Layers and models built on the autodiff graph.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::expansion::CoreBlock;
use crate::moe::MoeLayer;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Anything that owns parameters in a [`ParamStore`].
pub trait Module {
    fn collect_params(&self, out: &mut Vec<(ParamId, ParamKind)>);

    fn param_ids(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        self.collect_params(&mut v);
        v.into_iter().map(|(id, _)| id).collect()
    }
}

/// Number of scalars owned by `module`. With `include_bias = false` only
/// weights count: biases, router and norm parameters are excluded.
pub fn count_params(module: &dyn Module, store: &ParamStore, include_bias: bool, trainable_only: bool) -> usize {
    let mut ps = Vec::new();
    module.collect_params(&mut ps);
    ps.iter()
        .filter(|(_, kind)| include_bias || *kind == ParamKind::Weight)
        .filter(|(id, _)| !trainable_only || !store.is_frozen(*id))
        .map(|(id, _)| store.value(*id).numel())
        .sum()
}

/// Uniform in ±1/√fan_in.
pub fn init_uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

pub fn freeze_all(module: &dyn Module, store: &mut ParamStore) {
    for id in module.param_ids() {
        store.freeze(id);
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init_uniform(rng, &[out_dim, in_dim], in_dim))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), init_uniform(rng, &[out_dim], in_dim))?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// `x · Wᵀ + b` for `x: [B, in]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let xs = g.shape(x);
        if xs.len() != 2 || xs[1] != self.in_dim {
            return Err(Error::shape("linear", format!("expected [_, {}], got {xs:?}", self.in_dim)));
        }
        let w = g.param(store, self.weight);
        let wt = g.transpose(w)?;
        let y = g.matmul(x, wt)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

impl Module for Linear {
    fn collect_params(&self, out: &mut Vec<(ParamId, ParamKind)>) {
        out.push((self.weight, ParamKind::Weight));
        if let Some(b) = self.bias {
            out.push((b, ParamKind::Bias));
        }
    }
}

/// Fully connected stack with ReLU between layers and no activation after
/// the last. A bottleneck block is `Mlp` with dims `[d, h, d]`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!("mlp `{name}` needs at least two dims")));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.fc{i}"), w[0], w[1], bias, rng))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn bottleneck<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        h: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(store, name, &[d, h, d], bias, rng)
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].in_dim];
        d.extend(self.layers.iter().map(|l| l.out_dim));
        d
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.out_dim).collect()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

impl Module for Mlp {
    fn collect_params(&self, out: &mut Vec<(ParamId, ParamKind)>) {
        for l in &self.layers {
            l.collect_params(out);
        }
    }
}

/// Conv (3×3-style, same padding) → bias → ReLU → 2×2 max-pool.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl ConvBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            init_uniform(rng, &[out_ch, in_ch, kernel, kernel], fan_in),
        )?;
        let bias = store.add(format!("{name}.bias"), init_uniform(rng, &[out_ch, 1, 1], fan_in))?;
        Ok(ConvBlock {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.conv2d(x, w, 1, self.kernel / 2)?;
        let b = g.param(store, self.bias);
        let y = g.add(y, b)?;
        let y = g.relu(y);
        g.maxpool2(y)
    }
}

impl Module for ConvBlock {
    fn collect_params(&self, out: &mut Vec<(ParamId, ParamKind)>) {
        out.push((self.weight, ParamKind::Weight));
        out.push((self.bias, ParamKind::Bias));
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?,
            dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layernorm(x, gain, bias, LAYERNORM_EPS)
    }
}

impl Module for LayerNorm {
    fn collect_params(&self, out: &mut Vec<(ParamId, ParamKind)>) {
        out.push((self.gain, ParamKind::Norm));
        out.push((self.bias, ParamKind::Norm));
    }
}

/// Mean negative log-likelihood of `labels` under softmax(`logits`).
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("logits {s:?} with {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
        return Err(Error::LabelOutOfRange { label: bad, classes: s[1] });
    }
    let logp = g.log_softmax(logits)?;
    let picked = g.gather(logp, labels)?;
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

/// Inner path of a residual block.
#[derive(Clone, Debug)]
pub enum Inner {
    Mlp(Mlp),
    Moe(MoeLayer),
}

/// `x + inner(layernorm(x))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub norm: LayerNorm,
    pub inner: Inner,
}

impl ResidualBlock {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Option<Var>)> {
        let h = self.norm.forward(g, store, x)?;
        let (y, gates) = match &self.inner {
            Inner::Mlp(m) => (m.forward(g, store, h)?, None),
            Inner::Moe(m) => {
                let (y, gates) = m.forward_with_gates(g, store, h)?;
                (y, Some(gates))
            }
        };
        Ok((g.add(x, y)?, gates))
    }

    pub fn width(&self) -> usize {
        self.norm.dim
    }
}

impl Module for ResidualBlock {
    fn collect_params(&self, out: &mut Vec<(ParamId, ParamKind)>) {
        self.norm.collect_params(out);
        match &self.inner {
            Inner::Mlp(m) => m.collect_params(out),
            Inner::Moe(m) => m.collect_params(out),
        }
    }
}

/// Shape of the continual-learning classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseModelConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub conv_widths: Vec<usize>,
    pub kernel: usize,
    /// Width of the MLP around the expandable core.
    pub width: usize,
    pub num_classes: usize,
}

impl Default for BaseModelConfig {
    fn default() -> Self {
        BaseModelConfig {
            in_channels: 3,
            image_size: 16,
            conv_widths: vec![16, 16, 32],
            kernel: 3,
            width: 64,
            num_classes: 20,
        }
    }
}

impl BaseModelConfig {
    /// Flattened width after the conv stack.
    pub fn flat_dim(&self) -> usize {
        let side = self.conv_widths.iter().fold(self.image_size, |s, _| s / 2);
        side * side * self.conv_widths.last().copied().unwrap_or(self.in_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_widths.is_empty() || self.flat_dim() == 0 {
            return Err(Error::Config(format!(
                "image size {} is too small for {} pooling stages",
                self.image_size,
                self.conv_widths.len()
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("conv kernel must be odd".into()));
        }
        Ok(())
    }
}

/// Conv stack followed by a three-layer MLP whose middle layer is the
/// expandable [`CoreBlock`]: `proj (F→d) → core (d→d) → head (d→classes)`.
#[derive(Clone, Debug)]
pub struct BaseModel {
    pub config: BaseModelConfig,
    pub convs: Vec<ConvBlock>,
    pub proj: Linear,
    pub core: CoreBlock,
    pub head: Linear,
}

impl BaseModel {
    /// Builds the conv stack, projection and head; `core` is supplied by the
    /// caller so each expansion method can install its own block.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: BaseModelConfig,
        core: impl FnOnce(&mut ParamStore, &mut R) -> Result<CoreBlock>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::new();
        let mut ch = config.in_channels;
        for (i, &w) in config.conv_widths.iter().enumerate() {
            convs.push(ConvBlock::new(store, &format!("conv{i}"), ch, w, config.kernel, rng)?);
            ch = w;
        }
        let proj = Linear::new(store, "mlp.proj", config.flat_dim(), config.width, true, rng)?;
        let core = core(store, rng)?;
        if core.width() != config.width {
            return Err(Error::Config(format!(
                "core width {} does not match mlp width {}",
                core.width(),
                config.width
            )));
        }
        let head = Linear::new(store, "mlp.head", config.width, config.num_classes, true, rng)?;
        Ok(BaseModel {
            config,
            convs,
            proj,
            core,
            head,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, images: Var) -> Result<Var> {
        let s = g.shape(images).to_vec();
        let c = &self.config;
        if s.len() != 4 || s[1] != c.in_channels || s[2] != c.image_size || s[3] != c.image_size {
            return Err(Error::shape(
                "base_model",
                format!(
                    "expected [_, {}, {}, {}], got {s:?}",
                    c.in_channels, c.image_size, c.image_size
                ),
            ));
        }
        let mut h = images;
        for conv in &self.convs {
            h = conv.forward(g, store, h)?;
        }
        let h = g.reshape(h, &[s[0], c.flat_dim()])?;
        let h = self.proj.forward(g, store, h)?;
        let h = g.relu(h);
        let h = self.core.forward(g, store, h)?;
        let h = g.relu(h);
        self.head.forward(g, store, h)
    }

    /// Gradient-free logits, evaluated in batches of `batch`.
    pub fn logits(&self, store: &ParamStore, images: &Tensor, batch: usize) -> Result<Tensor> {
        let n = images.shape()[0];
        let mut out = Vec::with_capacity(n * self.config.num_classes);
        let mut start = 0;
        while start < n {
            let len = batch.min(n - start);
            let mut g = Graph::new();
            let x = g.constant(images.slice_rows(start, len));
            let y = self.forward(&mut g, store, x)?;
            out.extend_from_slice(g.value(y).data());
            start += len;
        }
        Tensor::new(vec![n, self.config.num_classes], out)
    }
}

impl Module for BaseModel {
    fn collect_params(&self, out: &mut Vec<(ParamId, ParamKind)>) {
        for c in &self.convs {
            c.collect_params(out);
        }
        self.proj.collect_params(out);
        self.core.collect_params(out);
        self.head.collect_params(out);
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::moe::{LinearExpertLayer, MoeLayer};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn linear_and_bottleneck_counts() {
        let mut s = ParamStore::new();
        let mut r = rng();
        let lin = Linear::new(&mut s, "lin", 8, 8, true, &mut r).unwrap();
        assert_eq!(count_params(&lin, &s, false, false), 64);
        let mlp = Mlp::bottleneck(&mut s, "bn", 8, 4, true, &mut r).unwrap();
        assert_eq!(count_params(&mlp, &s, false, false), 64);
        assert_eq!(count_params(&mlp, &s, true, false), 76);
    }

    #[test]
    fn four_layer_variants_match_when_ignoring_router_and_bias() {
        let mut s = ParamStore::new();
        let mut r = rng();
        let d = 8;
        let a = Linear::new(&mut s, "a", d, d, true, &mut r).unwrap();
        let b = LinearExpertLayer::new(&mut s, "b", d, 2, &mut r).unwrap();
        let c = Mlp::bottleneck(&mut s, "c", d, d / 2, true, &mut r).unwrap();
        let dd = MoeLayer::new(&mut s, "d", d, d / 4, 2, true, &mut r).unwrap();
        let counts = [
            count_params(&a, &s, false, false),
            count_params(&b, &s, false, false),
            count_params(&c, &s, false, false),
            count_params(&dd, &s, false, false),
        ];
        assert_eq!(counts, [64; 4]);
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[3, 4]));
        let ce = cross_entropy(&mut g, l, &[0, 1, 3]).unwrap();
        assert!((g.value(ce).item() - 4f64.ln()).abs() < 1e-12);

        let mut g = Graph::new();
        let l = g.constant(Tensor::new(vec![1, 4], vec![0.0, 1000.0, 0.0, 0.0]).unwrap());
        let ce = cross_entropy(&mut g, l, &[1]).unwrap();
        assert!(g.value(ce).item().abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_direct_logsumexp() {
        let mut r = rng();
        let logits = Tensor::uniform(&[6, 5], 3.0, &mut r);
        let labels = [0, 4, 2, 2, 1, 3];
        let mut expected = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row: Vec<f64> = (0..5).map(|j| logits.at2(i, j)).collect();
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            expected += lse - row[y];
        }
        expected /= labels.len() as f64;
        let mut g = Graph::new();
        let l = g.constant(logits);
        let ce = cross_entropy(&mut g, l, &labels).unwrap();
        assert!((g.value(ce).item() - expected).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(
            cross_entropy(&mut g, l, &[4]),
            Err(Error::LabelOutOfRange { label: 4, classes: 4 })
        ));
    }

    fn plain_model(store: &mut ParamStore, seed: u64) -> BaseModel {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        BaseModel::new(
            store,
            BaseModelConfig::default(),
            |s, r| Ok(CoreBlock::Plain(Mlp::bottleneck(s, "core", 64, 32, true, r)?)),
            &mut r,
        )
        .unwrap()
    }

    #[test]
    fn base_model_shapes_and_determinism() {
        let mut s1 = ParamStore::new();
        let m1 = plain_model(&mut s1, 3);
        let mut s2 = ParamStore::new();
        let m2 = plain_model(&mut s2, 3);
        let mut r = rng();
        let x = Tensor::uniform(&[2, 3, 16, 16], 1.0, &mut r);
        let a = m1.logits(&s1, &x, 64).unwrap();
        let b = m2.logits(&s2, &x, 64).unwrap();
        assert_eq!(a.shape(), &[2, 20]);
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn zero_head_gives_uniform_softmax() {
        let mut s = ParamStore::new();
        let m = plain_model(&mut s, 1);
        *s.value_mut(m.head.weight) = Tensor::zeros(&[20, 64]);
        *s.value_mut(m.head.bias.unwrap()) = Tensor::zeros(&[20]);
        let logits = m.logits(&s, &Tensor::zeros(&[2, 3, 16, 16]), 8).unwrap();
        let mut g = Graph::new();
        let l = g.constant(logits);
        let p = g.softmax(l).unwrap();
        assert!(g.value(p).data().iter().all(|&v| (v - 0.05).abs() < 1e-15));
    }

    #[test]
    fn base_model_rejects_wrong_image_shape() {
        let mut s = ParamStore::new();
        let m = plain_model(&mut s, 1);
        assert!(m.logits(&s, &Tensor::zeros(&[2, 3, 8, 8]), 8).is_err());
    }

    #[test]
    fn residual_with_zero_inner_is_identity() {
        let mut s = ParamStore::new();
        let mut r = rng();
        let mlp = Mlp::bottleneck(&mut s, "inner", 6, 3, true, &mut r).unwrap();
        for id in mlp.param_ids() {
            let shape = s.value(id).shape().to_vec();
            *s.value_mut(id) = Tensor::zeros(&shape);
        }
        let block = ResidualBlock { norm: LayerNorm::new(&mut s, "ln", 6).unwrap(), inner: Inner::Mlp(mlp) };
        let x = Tensor::uniform(&[4, 6], 2.0, &mut r);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (y, _) = block.forward(&mut g, &s, xv).unwrap();
        assert!(g.value(y).bit_eq(&x));
    }
}
