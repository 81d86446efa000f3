//! Parameter registry and the small set of layers the model is built from.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{BiasAxis, Graph, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Index of a parameter or buffer in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Buffers (running statistics) are stored alongside parameters but never optimized.
    pub trainable: bool,
}

/// Flat, ordered registry of every tensor a model owns.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param { name: name.into(), value, trainable: true });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param { name: name.into(), value, trainable: false });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), trainable: p.trainable })
                .collect(),
        }
    }
}

/// Scoped builder that prefixes parameter names, e.g. `encoder.layer1.0.conv1.weight`.
pub struct Builder<'a, T, R> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
    prefix: String,
}

impl<'a, T: Scalar, R: Rng> Builder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_, T, R> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Builder { store: self.store, rng: self.rng, prefix }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() { leaf.to_string() } else { format!("{}.{leaf}", self.prefix) }
    }

    pub fn normal(&mut self, leaf: &str, shape: &[usize], std: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::from_f64(rng.sample::<f64, _>(StandardNormal) * std));
        let name = self.name(leaf);
        self.store.add(name, t)
    }

    pub fn uniform(&mut self, leaf: &str, shape: &[usize], bound: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)));
        let name = self.name(leaf);
        self.store.add(name, t)
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f64) -> ParamId {
        let name = self.name(leaf);
        self.store.add(name, Tensor::full(shape, T::from_f64(value)))
    }

    pub fn tensor(&mut self, leaf: &str, value: Tensor<T>) -> ParamId {
        let name = self.name(leaf);
        self.store.add(name, value)
    }

    pub fn buffer(&mut self, leaf: &str, shape: &[usize], value: f64) -> ParamId {
        let name = self.name(leaf);
        self.store.add_buffer(name, Tensor::full(shape, T::from_f64(value)))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Kaiming-normal weights (fan-in, ReLU gain).
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = (in_c * kernel * kernel) as f64;
        let weight = b.normal("weight", &[out_c, in_c, kernel, kernel], (2.0 / fan_in).sqrt());
        let bias = bias.then(|| b.constant("bias", &[out_c], 0.0));
        Self { weight, bias, stride, pad }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.conv2d(x, w, self.stride, self.pad)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_bias(y, b, BiasAxis::Channel)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, channels: usize) -> Self {
        Self {
            gamma: b.constant("gamma", &[channels], 1.0),
            beta: b.constant("beta", &[channels], 0.0),
            running_mean: b.buffer("running_mean", &[channels], 0.0),
            running_var: b.buffer("running_var", &[channels], 1.0),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        training: bool,
    ) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.batch_norm(
            x,
            gamma,
            beta,
            (self.running_mean, self.running_var),
            store,
            training,
            Self::MOMENTUM,
            Self::EPS,
        )
    }
}

/// Token-wise affine map `x · W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, input: usize, output: usize, bias: bool) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = b.uniform("weight", &[input, output], bound);
        let bias = bias.then(|| b.constant("bias", &[output], 0.0));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.linear(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_bias(y, b, BiasAxis::Last)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, dim: usize) -> Self {
        Self { gamma: b.constant("gamma", &[dim], 1.0), beta: b.constant("beta", &[dim], 0.0) }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, Self::EPS)
    }
}
