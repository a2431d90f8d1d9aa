//! Parameters and the neural building blocks composed by the pipeline.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Epsilon used by every layer norm in the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Named trainable tensors. Iteration is lexicographic by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            bail!(Argument, "duplicate parameter name {name}");
        }
        self.params.insert(name, tensor.with_requires_grad(true));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Records every parameter as a gradient-tracking leaf.
    pub fn bind(&self, g: &mut Graph) -> Result<ParamVars> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.params {
            vars.insert(name.clone(), g.param(t.clone())?);
        }
        Ok(ParamVars { vars })
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> Result<ParamVars> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.params {
            vars.insert(name.clone(), g.constant(t.clone())?);
        }
        Ok(ParamVars { vars })
    }

    /// Gradients of the bound parameters after `g.backward`, by name.
    /// Parameters that did not participate get zeros.
    pub fn grads_from(&self, g: &Graph, vars: &ParamVars) -> BTreeMap<String, Vec<f64>> {
        self.params
            .iter()
            .map(|(name, t)| {
                let grad = vars
                    .vars
                    .get(name)
                    .and_then(|&v| g.grad(v))
                    .map(Tensor::into_data)
                    .unwrap_or_else(|| vec![0.0; t.numel()]);
                (name.clone(), grad)
            })
            .collect()
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self { vars: pairs.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        match self.vars.get(name) {
            Some(&v) => Ok(v),
            None => bail!(Argument, "missing parameter {name}"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

/// Declared parameter shapes, materialised into a [`ParamSet`] in name
/// order so the draw sequence does not depend on declaration order.
#[derive(Clone, Debug, Default)]
pub struct ParamSpecs {
    specs: BTreeMap<String, (Vec<usize>, Init)>,
}

impl ParamSpecs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) {
        let name = name.into();
        let prev = self.specs.insert(name.clone(), (shape.to_vec(), init));
        assert!(prev.is_none(), "parameter {name} declared twice");
    }

    /// `{prefix}.weight` of shape `[inputs, outputs]` and, optionally,
    /// `{prefix}.bias` of shape `[1, outputs]`.
    pub fn linear(&mut self, prefix: &str, inputs: usize, outputs: usize, bias: bool) {
        self.add(format!("{prefix}.weight"), &[inputs, outputs], Init::Uniform { fan_in: inputs });
        if bias {
            self.add(format!("{prefix}.bias"), &[1, outputs], Init::Uniform { fan_in: inputs });
        }
    }

    pub fn layer_norm(&mut self, prefix: &str, dim: usize) {
        self.add(format!("{prefix}.gain"), &[1, dim], Init::Ones);
        self.add(format!("{prefix}.bias"), &[1, dim], Init::Zeros);
    }

    pub fn mlp2(&mut self, prefix: &str, inputs: usize, hidden: usize, outputs: usize) {
        self.linear(&format!("{prefix}.fc1"), inputs, hidden, true);
        self.linear(&format!("{prefix}.fc2"), hidden, outputs, true);
    }

    /// Query, key, value and output projections. The key projection has
    /// no bias: it would shift every score of a query equally.
    pub fn attention(&mut self, prefix: &str, dim: usize) {
        for part in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.{part}"), dim, dim, part != "k");
        }
    }

    pub fn build(&self, seed: u64) -> Result<ParamSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        for (name, (shape, init)) in &self.specs {
            let numel: usize = shape.iter().product();
            let data = match *init {
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    (0..numel).map(|_| rng.gen_range(-bound..=bound)).collect()
                }
                Init::Zeros => vec![0.0; numel],
                Init::Ones => vec![1.0; numel],
            };
            set.insert(name.clone(), Tensor::new(shape, data)?)?;
        }
        Ok(set)
    }
}

/// Affine map `x·W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn bind(pv: &ParamVars, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: pv.get(&format!("{prefix}.weight"))?,
            bias: pv.get(&format!("{prefix}.bias")).ok(),
        })
    }

    pub fn bind_no_bias(pv: &ParamVars, prefix: &str) -> Result<Self> {
        Ok(Self { weight: pv.get(&format!("{prefix}.weight"))?, bias: None })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.weight)?;
        match self.bias {
            Some(b) => g.add_row(y, b),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Softplus,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Gelu => g.gelu(x),
            Activation::Softplus => g.softplus(x),
        }
    }
}

/// Affine, nonlinearity, affine.
#[derive(Clone, Copy, Debug)]
pub struct Mlp2 {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl Mlp2 {
    pub fn bind(pv: &ParamVars, prefix: &str, act: Activation) -> Result<Self> {
        Ok(Self {
            fc1: Linear::bind(pv, &format!("{prefix}.fc1"))?,
            fc2: Linear::bind(pv, &format!("{prefix}.fc2"))?,
            act,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = self.act.apply(g, h)?;
        self.fc2.forward(g, h)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: Var,
    pub bias: Var,
}

impl LayerNorm {
    pub fn bind(pv: &ParamVars, prefix: &str) -> Result<Self> {
        Ok(Self {
            gain: pv.get(&format!("{prefix}.gain"))?,
            bias: pv.get(&format!("{prefix}.bias"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.layer_norm(x, self.gain, self.bias, LAYER_NORM_EPS)
    }
}

/// Projections of a multi-head attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl AttentionParams {
    pub fn bind(pv: &ParamVars, prefix: &str) -> Result<Self> {
        Ok(Self {
            q: Linear::bind(pv, &format!("{prefix}.q"))?,
            k: Linear::bind(pv, &format!("{prefix}.k"))?,
            v: Linear::bind(pv, &format!("{prefix}.v"))?,
            o: Linear::bind(pv, &format!("{prefix}.o"))?,
        })
    }
}

/// Scaled dot-product attention over `heads` heads followed by the output
/// projection. Keys whose mask entry is false get exactly zero weight.
///
/// Fails with a numeric error when no key is available to attend to.
pub fn multi_head_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    params: &AttentionParams,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let (lq, d) = (g.shape(q)[0], g.shape(q)[1]);
    let lk = g.shape(k)[0];
    if heads == 0 || d % heads != 0 {
        bail!(Argument, "model width {d} is not divisible by {heads} heads");
    }
    if g.shape(v)[0] != lk {
        bail!(Dimension, "{lk} keys but {} values", g.shape(v)[0]);
    }
    if let Some(mask) = key_mask {
        if mask.len() != lk {
            bail!(Dimension, "key mask of {} entries for {lk} keys", mask.len());
        }
    }
    let available = key_mask.map_or(lk, |m| m.iter().filter(|&&b| b).count());
    if available == 0 {
        bail!(Numeric, "every key is masked; attention weights undefined");
    }
    let qp = params.q.forward(g, q)?;
    let kp = params.k.forward(g, k)?;
    let vp = params.v.forward(g, v)?;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let keep: Option<Vec<bool>> =
        key_mask.map(|m| (0..lq).flat_map(|_| m.iter().copied()).collect());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (qp, kp, vp)
        } else {
            (
                g.slice_cols(qp, h * dh, (h + 1) * dh)?,
                g.slice_cols(kp, h * dh, (h + 1) * dh)?,
                g.slice_cols(vp, h * dh, (h + 1) * dh)?,
            )
        };
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let mut scores = g.scale(scores, scale)?;
        if let Some(keep) = &keep {
            scores = g.mask_fill(scores, keep.clone())?;
        }
        let weights = g.softmax(scores, 1)?;
        outs.push(g.matmul(weights, vh)?);
    }
    let merged = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    params.o.forward(g, merged)
}

/// Learned attention pooling: one score per row from `score_weight`
/// (`D×1`), masked softmax over rows, weighted row sum (`1×D`).
pub fn attention_pool(g: &mut Graph, x: Var, score_weight: Var, mask: Option<&[bool]>) -> Result<Var> {
    let rows = g.shape(x)[0];
    if let Some(m) = mask {
        if m.len() != rows {
            bail!(Dimension, "pool mask of {} entries for {rows} rows", m.len());
        }
        if !m.iter().any(|&b| b) {
            bail!(Numeric, "attention pool over fully masked rows");
        }
    }
    let scores = g.matmul(x, score_weight)?;
    let mut scores = g.transpose(scores)?;
    if let Some(m) = mask {
        scores = g.mask_fill(scores, m.to_vec())?;
    }
    let w = g.softmax(scores, 1)?;
    g.matmul(w, x)
}

/// Uniform tensor in `[-scale, scale]` for tests and tooling.
pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..=scale)).collect()).expect("shape")
}
