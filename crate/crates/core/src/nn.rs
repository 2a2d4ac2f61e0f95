//! Parameter storage and the few layers the models are built from.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Mask, Var};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors of one model component.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    /// Overwrites values from `other`, which must have identical names and
    /// shapes.
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::invalid("parameter stores have different layouts"));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(Error::invalid("parameter shape mismatch"));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|t| t.cast()).collect(),
        }
    }
}

/// Lazily binds store parameters as leaves of one graph.
pub struct Binder<'s, T> {
    store: &'s ParamStore<T>,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'s, T: Real> Binder<'s, T> {
    pub fn new(store: &'s ParamStore<T>, trainable: bool) -> Self {
        Binder {
            store,
            vars: vec![None; store.len()],
            trainable,
        }
    }

    /// Binder whose parameters are already leaves of the graph, one per
    /// store entry in order. Used by finite-difference checks.
    pub fn from_vars(store: &'s ParamStore<T>, vars: &[Var]) -> Self {
        assert_eq!(vars.len(), store.len());
        Binder {
            store,
            vars: vars.iter().map(|&v| Some(v)).collect(),
            trainable: true,
        }
    }

    pub fn var(&mut self, g: &mut Graph<T>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = g.leaf(self.store.get(id).clone(), self.trainable);
        self.vars[id.0] = Some(v);
        v
    }

    /// Binds every parameter now, so later graph truncation back to the
    /// current length keeps them valid.
    pub fn bind_all(&mut self, g: &mut Graph<T>) {
        for i in 0..self.vars.len() {
            self.var(g, ParamId(i));
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }

    /// Per-parameter gradients aligned with the store; unbound or unreached
    /// parameters get zeros.
    pub fn gradients(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.store
            .values
            .iter()
            .zip(&self.vars)
            .map(|(t, v)| {
                v.and_then(|v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }
}

pub(crate) fn randn<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let e: f64 = rng.sample(StandardNormal);
            T::from_f64(e * std)
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), randn(rng, &[fan_in, fan_out], std));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Linear {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &mut Binder<T>, x: Var) -> Result<Var> {
        let w = p.var(g, self.w);
        let b = p.var(g, self.b);
        let h = g.matmul(x, w)?;
        g.add_bias(h, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[width], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &mut Binder<T>, x: Var) -> Result<Var> {
        let gamma = p.var(g, self.gamma);
        let beta = p.var(g, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Pre-norm transformer layer: attention then a 4x GELU MLP, each wrapped
/// in a residual connection.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    width: usize,
    heads: usize,
}

impl TransformerLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        depth: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (width as f64).sqrt();
        let resid_std = std / (2.0 * depth.max(1) as f64).sqrt();
        TransformerLayer {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            qkv: Linear::new(store, &format!("{name}.qkv"), width, 3 * width, std, rng),
            proj: Linear::new(store, &format!("{name}.proj"), width, width, resid_std, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            fc1: Linear::new(store, &format!("{name}.fc1"), width, 4 * width, std, rng),
            fc2: Linear::new(
                store,
                &format!("{name}.fc2"),
                4 * width,
                width,
                resid_std / 2.0,
                rng,
            ),
            width,
            heads,
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &mut Binder<T>,
        x: Var,
        seq: usize,
        mask: Mask,
    ) -> Result<Var> {
        let h = self.ln1.forward(g, p, x)?;
        let qkv = self.qkv.forward(g, p, h)?;
        let q = g.col_slice(qkv, 0, self.width)?;
        let k = g.col_slice(qkv, self.width, self.width)?;
        let v = g.col_slice(qkv, 2 * self.width, self.width)?;
        let a = g.attention(q, k, v, self.heads, seq, mask)?;
        let a = self.proj.forward(g, p, a)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, p, x)?;
        let h = self.fc1.forward(g, p, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, p, h)?;
        g.add(x, h)
    }
}
