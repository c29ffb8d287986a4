//! Named parameter storage and the glue that binds parameters onto a graph.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autograd::{Graph, Gradients, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub frozen: bool,
}

/// Parameters keyed by canonical layer path (e.g. `backbone.stages.0.blocks.1.dwconv.weight`).
///
/// Iteration order is lexicographic by path, which keeps optimizer updates
/// and checkpoints deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(
            name.into(),
            Param {
                value,
                frozen: false,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Set the frozen flag on every parameter under `prefix`; returns how many matched.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for (k, p) in self.params.iter_mut() {
            if k.starts_with(prefix) {
                p.frozen = frozen;
                n += 1;
            }
        }
        n
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.frozen)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Copy of every parameter under `prefix`, with the prefix stripped.
    pub fn extract(&self, prefix: &str) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (k, p) in &self.params {
            if let Some(rest) = k.strip_prefix(prefix) {
                out.params.insert(rest.to_string(), p.clone());
            }
        }
        out
    }

    /// Insert every parameter of `other` under `prefix`.
    pub fn absorb(&mut self, prefix: &str, other: ParamStore<T>) {
        for (k, p) in other.params {
            self.params.insert(format!("{prefix}{k}"), p);
        }
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            frozen: p.frozen,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Lazily places parameters onto a graph and remembers which node holds each.
///
/// Frozen parameters become constants, so no gradient is computed for them.
pub struct Binder<'a, T> {
    store: &'a ParamStore<T>,
    bound: BTreeMap<String, Var>,
}

impl<'a, T: Float> Binder<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            store,
            bound: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = self
            .store
            .get(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))?;
        let v = g.leaf(p.value.clone(), !p.frozen);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound trainable parameter, keyed by name.
    pub fn collect(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .filter_map(|(k, &v)| grads.get(v).map(|g| (k.clone(), g.clone())))
            .collect()
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

// ---- initializers ------------------------------------------------------

/// Normal(0, std) truncated to ±2 std by resampling.
pub fn trunc_normal<T: Float, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = normal.sample(rng);
        if z.abs() <= 2.0 {
            break T::lit(z * std);
        }
    })
}

/// Uniform(-bound, bound).
pub fn uniform<T: Float, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    if bound == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

pub fn ones<T: Float>(shape: &[usize]) -> Tensor<T> {
    Tensor::full(shape, T::one())
}

// ---- layer helpers -----------------------------------------------------

pub fn init_linear<T: Float, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    inp: usize,
    out: usize,
    bias: bool,
) {
    store.insert(format!("{prefix}.weight"), trunc_normal(rng, &[inp, out], 0.02));
    if bias {
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[out]));
    }
}

pub fn init_layer_norm<T: Float>(store: &mut ParamStore<T>, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.weight"), ones(&[dim]));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[dim]));
}

pub fn linear<T: Float>(
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let w = b.param(g, &format!("{prefix}.weight"))?;
    let bias_name = format!("{prefix}.bias");
    let bias = if b.store().contains(&bias_name) {
        Some(b.param(g, &bias_name)?)
    } else {
        None
    };
    g.linear(x, w, bias).map_err(|e| layer_error(prefix, e))
}

pub const LN_EPS: f64 = 1e-6;

pub fn layer_norm<T: Float>(
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let w = b.param(g, &format!("{prefix}.weight"))?;
    let bias = b.param(g, &format!("{prefix}.bias"))?;
    g.layer_norm(x, w, bias, LN_EPS)
        .map_err(|e| layer_error(prefix, e))
}

/// Non-overlapping `p x p` patch embedding on NHWC input.
///
/// Realized as a space-to-depth rearrangement followed by a linear map whose
/// weight is `[p * p * in_channels, out]` in (row, column, channel) order.
pub fn patchify<T: Float>(
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    prefix: &str,
    x: Var,
    p: usize,
) -> Result<Var> {
    let (bs, h, w, c) = match *g.shape(x) {
        [bs, h, w, c] => (bs, h, w, c),
        ref s => {
            return Err(Error::Shape(format!(
                "{prefix}: expected NHWC input, got {s:?}"
            )))
        }
    };
    if h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!(
            "{prefix}: input {h}x{w} not divisible by patch {p}"
        )));
    }
    let y = space_to_depth(g, x, p)?;
    debug_assert_eq!(g.shape(y), [bs, h / p, w / p, p * p * c]);
    linear(g, b, prefix, y)
}

pub fn space_to_depth<T: Float>(g: &mut Graph<T>, x: Var, p: usize) -> Result<Var> {
    let [bs, h, w, c] = <[usize; 4]>::try_from(g.shape(x))
        .map_err(|_| Error::Shape("space_to_depth: input not rank 4".into()))?;
    let y = g.reshape(x, &[bs, h / p, p, w / p, p * c])?;
    let y = g.permute(y, &[0, 1, 3, 2, 4])?;
    g.reshape(y, &[bs, h / p, w / p, p * p * c])
}

pub(crate) fn layer_error(prefix: &str, e: Error) -> Error {
    match e {
        Error::Shape(msg) => Error::Shape(format!("layer `{prefix}`: {msg}")),
        other => other,
    }
}
