//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in evaluation order; [`Graph::backward`]
//! walks the tape in reverse. Shapes are checked when an op is recorded so that
//! backward never has to.

pub mod kernels;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};
use kernels::Conv2dGeom;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BiasAxis {
    /// Axis 1 of an NCHW tensor.
    Channel,
    /// Trailing axis.
    Last,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias { x: Var, b: Var, axis: BiasAxis },
    Linear { x: Var, w: Var },
    Bmm { a: Var, b: Var, trans_b: bool },
    Conv2d { x: Var, w: Var, geom: Conv2dGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, training: bool },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    AdaptiveAvgPool { x: Var },
    Bilinear { x: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, start: usize },
    Reshape(Var),
    ToTokens(Var),
    FromTokens(Var),
    Softmax(Var),
    BroadcastBatch(Var),
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    Sum(Var),
    Mean(Var),
    Bce { pred: Var, target: Tensor<T>, eps: T },
    MaskedL1 { pred: Var, target: Tensor<T>, reduction: Reduction },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Buffer refresh produced by a training-mode forward pass (batch-norm running stats).
#[derive(Clone, Debug)]
pub struct BufferUpdate<T> {
    pub id: ParamId,
    pub value: Tensor<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    buffer_updates: Vec<BufferUpdate<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), buffer_updates: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf not tied to a parameter store.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter. Repeated calls with the same id return the same node,
    /// so every use of a parameter within a pass shares one leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.params.insert(id, v);
        v
    }

    /// Parameters bound so far, in binding order.
    pub fn bound_params(&self) -> Vec<(ParamId, Var)> {
        let mut out: Vec<_> = self.params.iter().map(|(&k, &v)| (k, v)).collect();
        out.sort_by_key(|&(_, v)| v);
        out
    }

    pub fn bound_param(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    pub fn take_buffer_updates(&mut self) -> Vec<BufferUpdate<T>> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub(crate) fn push_buffer_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.buffer_updates.push(BufferUpdate { id, value });
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// Sum of several same-shaped nodes.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| shape_err("add_n of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn add_bias(&mut self, x: Var, b: Var, axis: BiasAxis) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        let c = match axis {
            BiasAxis::Channel if xs.len() == 4 => xs[1],
            BiasAxis::Last if !xs.is_empty() => xs[xs.len() - 1],
            _ => return Err(shape_err(format!("bias axis {axis:?} on {xs:?}"))),
        };
        if bs != [c] {
            return Err(shape_err(format!("bias {bs:?} for {c} channels")));
        }
        let mut v = self.value(x).clone();
        let bv = self.value(b).data().to_vec();
        match axis {
            BiasAxis::Channel => {
                let plane = xs[2] * xs[3];
                for (i, chunk) in v.data_mut().chunks_exact_mut(plane).enumerate() {
                    let bb = bv[i % c];
                    chunk.iter_mut().for_each(|e| *e += bb);
                }
            }
            BiasAxis::Last => {
                for row in v.data_mut().chunks_exact_mut(c) {
                    row.iter_mut().zip(&bv).for_each(|(e, &bb)| *e += bb);
                }
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(v, Op::AddBias { x, b, axis }, rg))
    }

    /// `x[.., k] · w[k, n]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(shape_err(format!("linear {xs:?} · {ws:?}")));
        }
        let (k, n) = (ws[0], ws[1]);
        let rows = self.value(x).numel() / k;
        let mut out = vec![T::zero(); rows * n];
        T::gemm(
            rows, k, n, T::one(), self.value(x).data(), k as isize, 1, self.value(w).data(), n as isize,
            1, T::zero(), &mut out, n as isize, 1,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Linear { x, w }, rg))
    }

    /// Batched matmul `a[b, m, k] · b[b, k, n]` (or `· b[b, n, k]ᵀ` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(shape_err(format!("bmm {as_:?} · {bs:?}")));
        }
        let (batch, m, k) = (as_[0], as_[1], as_[2]);
        let (kb, n) = if trans_b { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        if kb != k {
            return Err(shape_err(format!("bmm inner dims {as_:?} · {bs:?} (trans_b={trans_b})")));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                k as isize,
                1,
                &self.value(b).data()[i * k * n..(i + 1) * k * n],
                rsb,
                csb,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                n as isize,
                1,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[batch, m, n], out)?, Op::Bmm { a, b, trans_b }, rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(shape_err(format!("conv2d input {xs:?} weight {ws:?}")));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[2] {
            return Err(shape_err(format!("conv2d kernel {} larger than padded input {xs:?}", ws[2])));
        }
        let geom = Conv2dGeom {
            batch: xs[0],
            in_c: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            out_c: ws[0],
            kernel: ws[2],
            stride,
            pad,
        };
        let y = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let shape = [xs[0], ws[0], geom.out_h(), geom.out_w()];
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(&shape, y)?, Op::Conv2d { x, w, geom }, rg))
    }

    /// Batch normalization over axes (0, 2, 3) of an NCHW tensor.
    ///
    /// In training mode batch statistics are used and the refreshed running
    /// statistics are queued as buffer updates; in eval mode the stored running
    /// statistics are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (ParamId, ParamId),
        store: &ParamStore<T>,
        training: bool,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(shape_err(format!("batch_norm on {xs:?}")));
        }
        let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        let count = n * plane;
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        if training {
            for ch in 0..c {
                let mut acc = T::zero();
                for b in 0..n {
                    acc += xv[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().copied().sum::<T>();
                }
                mean[ch] = acc / T::from_f64(count as f64);
                let mut acc = T::zero();
                for b in 0..n {
                    for &v in &xv[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                        acc += (v - mean[ch]) * (v - mean[ch]);
                    }
                }
                var[ch] = acc / T::from_f64(count as f64);
            }
        } else {
            mean.copy_from_slice(store.get(running.0).value.data());
            var.copy_from_slice(store.get(running.1).value.data());
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::from_f64(eps)).sqrt()).collect();
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut y = vec![T::zero(); xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                for ((h, o), &v) in xhat[r.clone()].iter_mut().zip(&mut y[r.clone()]).zip(&xv[r]) {
                    *h = (v - mean[ch]) * inv_std[ch];
                    *o = *h * g[ch] + bt[ch];
                }
            }
        }
        if training {
            let m = T::from_f64(momentum);
            let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
            let rm = store.get(running.0).value.data();
            let rv = store.get(running.1).value.data();
            let new_mean: Vec<T> =
                rm.iter().zip(&mean).map(|(&r, &b)| (T::one() - m) * r + m * b).collect();
            let new_var: Vec<T> = rv
                .iter()
                .zip(&var)
                .map(|(&r, &b)| (T::one() - m) * r + m * b * T::from_f64(unbias))
                .collect();
            self.push_buffer_update(running.0, Tensor::new(&[c], new_mean)?);
            self.push_buffer_update(running.1, Tensor::new(&[c], new_var)?);
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(&xs, y)?,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, training },
            rg,
        ))
    }

    /// Layer normalization over the trailing axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| shape_err("layer_norm on scalar".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(format!("layer_norm affine for {d} features")));
        }
        let (xhat, inv_std) = kernels::normalize_rows(self.value(x).data(), d, eps);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut y = xhat.clone();
        for row in y.chunks_exact_mut(d) {
            for ((o, &gg), &bb) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gg + bb;
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(Tensor::new(&xs, y)?, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.max(T::zero()));
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(kernels::gelu);
        let rg = self.rg(x);
        self.push(v, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(kernels::sigmoid);
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        self.max_pool2d_rect(x, (kernel, kernel), (stride, stride), pad)
    }

    /// Max pooling with a rectangular window; padded cells never win.
    pub fn max_pool2d_rect(
        &mut self,
        x: Var,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4
            || kernel.0 == 0
            || kernel.1 == 0
            || stride.0 == 0
            || stride.1 == 0
            || xs[2] + 2 * pad < kernel.0
            || xs[3] + 2 * pad < kernel.1
            || pad >= kernel.0.min(kernel.1)
        {
            return Err(shape_err(format!("max_pool2d k={kernel:?} p={pad} on {xs:?}")));
        }
        let (y, argmax, oh, ow) =
            kernels::maxpool2d_forward(self.value(x).data(), xs[0] * xs[1], xs[2], xs[3], kernel, stride, pad);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[xs[0], xs[1], oh, ow], y)?, Op::MaxPool { x, argmax }, rg))
    }

    pub fn adaptive_avg_pool2d(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || oh == 0 || ow == 0 || oh > xs[2] || ow > xs[3] {
            return Err(shape_err(format!("adaptive_avg_pool2d to {oh}x{ow} on {xs:?}")));
        }
        let y = kernels::adaptive_avg_pool_forward(self.value(x).data(), xs[0] * xs[1], xs[2], xs[3], oh, ow);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[xs[0], xs[1], oh, ow], y)?, Op::AdaptiveAvgPool { x }, rg))
    }

    pub fn upsample_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || oh == 0 || ow == 0 {
            return Err(shape_err(format!("bilinear to {oh}x{ow} on {xs:?}")));
        }
        if xs[2] == oh && xs[3] == ow {
            return Ok(x);
        }
        let y = kernels::bilinear_forward(self.value(x).data(), xs[0] * xs[1], xs[2], xs[3], oh, ow);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[xs[0], xs[1], oh, ow], y)?, Op::Bilinear { x }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| shape_err("empty concat".into()))?).to_vec();
        if axis >= first.len() {
            return Err(shape_err(format!("concat axis {axis} on {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(shape_err(format!("concat {first:?} with {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// Rows `start..start + len` along axis 0.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || start + len > xs[0] {
            return Err(shape_err(format!("narrow {start}..{} on {xs:?}", start + len)));
        }
        let inner: usize = xs[1..].iter().product();
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = xs;
        shape[0] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Narrow { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// `[b, c, h, w]` → `[b, h·w, c]`, tokens in row-major spatial order.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err(format!("to_tokens on {xs:?}")));
        }
        let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let v = transpose_last2(self.value(x).data(), b, c, hw);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[b, hw, c], v)?, Op::ToTokens(x), rg))
    }

    /// `[b, h·w, c]` → `[b, c, h, w]`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] != h * w {
            return Err(shape_err(format!("from_tokens {h}x{w} on {xs:?}")));
        }
        let (b, n, c) = (xs[0], xs[1], xs[2]);
        let v = transpose_last2(self.value(x).data(), b, n, c);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[b, c, h, w], v)?, Op::FromTokens(x), rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| shape_err("softmax on scalar".into()))?;
        let y = kernels::softmax_rows(self.value(x).data(), d);
        let v = Tensor::new(self.shape(x), y)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Softmax(x), rg))
    }

    /// `[n, c]` → `[b, n, c]` by repetition.
    pub fn broadcast_batch(&mut self, x: Var, batch: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(shape_err(format!("broadcast_batch on {xs:?}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(batch * src.len());
        for _ in 0..batch {
            data.extend_from_slice(src);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[batch, xs[0], xs[1]], data)?, Op::BroadcastBatch(x), rg))
    }

    /// `[b, n, h·d]` → `[b·h, n, d]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        if heads == 1 {
            return Ok(x);
        }
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[2] % heads != 0 {
            return Err(shape_err(format!("split {heads} heads on {xs:?}")));
        }
        let v = split_heads_data(self.value(x).data(), xs[0], xs[1], heads, xs[2] / heads);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[xs[0] * heads, xs[1], xs[2] / heads], v)?,
            Op::SplitHeads { x, heads },
            rg,
        ))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        if heads == 1 {
            return Ok(x);
        }
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[0] % heads != 0 {
            return Err(shape_err(format!("merge {heads} heads on {xs:?}")));
        }
        let b = xs[0] / heads;
        let v = merge_heads_data(self.value(x).data(), b, xs[1], heads, xs[2]);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[b, xs[1], xs[2] * heads], v)?, Op::MergeHeads { x, heads }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum::<T>() / T::from_f64(v.numel() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean binary cross-entropy of probabilities `pred` against `target`,
    /// with `pred` clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, pred: Var, target: &Tensor<T>, eps: f64) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(shape_err(format!("bce {:?} vs {:?}", self.shape(pred), target.shape())));
        }
        let eps = T::from_f64(eps);
        let value = bce_value(self.value(pred).data(), target.data(), eps);
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(value), Op::Bce { pred, target: target.clone(), eps }, rg))
    }

    /// `|(1 - y)·(g - y)|` reduced over all elements.
    pub fn masked_l1(&mut self, pred: Var, target: &Tensor<T>, reduction: Reduction) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(shape_err(format!("masked_l1 {:?} vs {:?}", self.shape(pred), target.shape())));
        }
        let s = masked_l1_value(self.value(pred).data(), target.data(), reduction);
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(s), Op::MaskedL1 { pred, target: target.clone(), reduction }, rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err(format!("backward from non-scalar {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_data(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        let t = Tensor::new(self.shape(v), data).expect("gradient shape");
        self.accumulate(grads, v, t);
    }

    fn backprop_node(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let g = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = g.iter().zip(self.value(*b).data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate_data(grads, *a, d);
                }
                if self.rg(*b) {
                    let d = g.iter().zip(self.value(*a).data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate_data(grads, *b, d);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, gy.map(|v| v * *c)),
            Op::AddBias { x, b, axis } => {
                self.accumulate(grads, *x, gy.clone());
                if self.rg(*b) {
                    let c = self.shape(*b)[0];
                    let mut db = vec![T::zero(); c];
                    match axis {
                        BiasAxis::Channel => {
                            let xs = self.shape(*x);
                            let plane = xs[2] * xs[3];
                            for (i, chunk) in g.chunks_exact(plane).enumerate() {
                                db[i % c] += chunk.iter().copied().sum::<T>();
                            }
                        }
                        BiasAxis::Last => {
                            for row in g.chunks_exact(c) {
                                db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                            }
                        }
                    }
                    self.accumulate_data(grads, *b, db);
                }
            }
            Op::Linear { x, w } => {
                let ws = self.shape(*w);
                let (k, n) = (ws[0], ws[1]);
                let rows = self.value(*x).numel() / k;
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); rows * k];
                    T::gemm(
                        rows, n, k, T::one(), g, n as isize, 1, self.value(*w).data(), 1, n as isize,
                        T::zero(), &mut dx, k as isize, 1,
                    );
                    self.accumulate_data(grads, *x, dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); k * n];
                    T::gemm(
                        k, rows, n, T::one(), self.value(*x).data(), 1, k as isize, g, n as isize, 1,
                        T::zero(), &mut dw, n as isize, 1,
                    );
                    self.accumulate_data(grads, *w, dw);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let as_ = self.shape(*a);
                let (batch, m, k) = (as_[0], as_[1], as_[2]);
                let n = node.value.shape()[2];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.rg(*a) {
                    // da = g · bᵀ   (or g · b when b was transposed)
                    let mut da = vec![T::zero(); batch * m * k];
                    let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    for i in 0..batch {
                        T::gemm(
                            m, n, k, T::one(), &g[i * m * n..(i + 1) * m * n], n as isize, 1,
                            &bv[i * k * n..(i + 1) * k * n], rsb, csb, T::zero(),
                            &mut da[i * m * k..(i + 1) * m * k], k as isize, 1,
                        );
                    }
                    self.accumulate_data(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let out = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // db[n, k] = gᵀ · a
                            T::gemm(n, m, k, T::one(), gi, 1, n as isize, ai, k as isize, 1, T::zero(), out, k as isize, 1);
                        } else {
                            // db[k, n] = aᵀ · g
                            T::gemm(k, m, n, T::one(), ai, 1, k as isize, gi, n as isize, 1, T::zero(), out, n as isize, 1);
                        }
                    }
                    self.accumulate_data(grads, *b, db);
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    geom,
                    self.rg(*x),
                );
                if let Some(dx) = dx {
                    self.accumulate_data(grads, *x, dx);
                }
                self.accumulate_data(grads, *w, dw);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, training } => {
                let xs = self.shape(*x);
                let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                        for (&gv, &h) in g[r.clone()].iter().zip(&xhat[r]) {
                            dgamma[ch] += gv * h;
                            dbeta[ch] += gv;
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    let count = T::from_f64((n * plane) as f64);
                    for b in 0..n {
                        for ch in 0..c {
                            let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                            for ((o, &gv), &h) in dx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                                *o = if *training {
                                    gam[ch] * inv_std[ch] / count
                                        * (count * gv - dbeta[ch] - h * dgamma[ch])
                                } else {
                                    gv * gam[ch] * inv_std[ch]
                                };
                            }
                        }
                    }
                    self.accumulate_data(grads, *x, dx);
                }
                self.accumulate_data(grads, *gamma, dgamma);
                self.accumulate_data(grads, *beta, dbeta);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = self.shape(*gamma)[0];
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); g.len()];
                for ((gr, hr), dr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).zip(dxhat.chunks_exact_mut(d)) {
                    for j in 0..d {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        dr[j] = gr[j] * gam[j];
                    }
                }
                if self.rg(*x) {
                    let dx = kernels::normalize_rows_backward(xhat, inv_std, &dxhat, d);
                    self.accumulate_data(grads, *x, dx);
                }
                self.accumulate_data(grads, *gamma, dgamma);
                self.accumulate_data(grads, *beta, dbeta);
            }
            Op::Relu(x) => {
                let d = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate_data(grads, *x, d);
            }
            Op::Gelu(x) => {
                let d = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &v)| gv * kernels::gelu_grad(v))
                    .collect();
                self.accumulate_data(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &s)| gv * s * (T::one() - s))
                    .collect();
                self.accumulate_data(grads, *x, d);
            }
            Op::MaxPool { x, argmax } => {
                let xs = self.shape(*x);
                let ys = node.value.shape();
                let dx = kernels::maxpool2d_backward(g, argmax, xs[0] * xs[1], xs[2] * xs[3], ys[2] * ys[3]);
                self.accumulate_data(grads, *x, dx);
            }
            Op::AdaptiveAvgPool { x } => {
                let xs = self.shape(*x);
                let ys = node.value.shape();
                let dx = kernels::adaptive_avg_pool_backward(g, xs[0] * xs[1], xs[2], xs[3], ys[2], ys[3]);
                self.accumulate_data(grads, *x, dx);
            }
            Op::Bilinear { x } => {
                let xs = self.shape(*x);
                let ys = node.value.shape();
                let dx = kernels::bilinear_backward(g, xs[0] * xs[1], xs[2], xs[3], ys[2], ys[3]);
                self.accumulate_data(grads, *x, dx);
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    if self.rg(v) {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                        }
                        self.accumulate_data(grads, v, d);
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, start } => {
                let mut d = vec![T::zero(); self.value(*x).numel()];
                let offset = start * g.len() / node.value.dim(0).max(1);
                d[offset..offset + g.len()].copy_from_slice(g);
                self.accumulate_data(grads, *x, d);
            }
            Op::Reshape(x) => self.accumulate_data(grads, *x, g.to_vec()),
            Op::ToTokens(x) => {
                let s = node.value.shape();
                self.accumulate_data(grads, *x, transpose_last2(g, s[0], s[1], s[2]));
            }
            Op::FromTokens(x) => {
                let s = node.value.shape();
                self.accumulate_data(grads, *x, transpose_last2(g, s[0], s[1], s[2] * s[3]));
            }
            Op::Softmax(x) => {
                let d = *node.value.shape().last().unwrap();
                let dx = kernels::softmax_rows_backward(node.value.data(), g, d);
                self.accumulate_data(grads, *x, dx);
            }
            Op::BroadcastBatch(x) => {
                let per = self.value(*x).numel();
                let mut d = vec![T::zero(); per];
                for chunk in g.chunks_exact(per) {
                    d.iter_mut().zip(chunk).for_each(|(a, &b)| *a += b);
                }
                self.accumulate_data(grads, *x, d);
            }
            Op::SplitHeads { x, heads } => {
                let s = self.shape(*x);
                let d = merge_heads_data(g, s[0], s[1], *heads, s[2] / heads);
                self.accumulate_data(grads, *x, d);
            }
            Op::MergeHeads { x, heads } => {
                let s = node.value.shape();
                let d = split_heads_data(g, s[0], s[1], *heads, s[2] / heads);
                self.accumulate_data(grads, *x, d);
            }
            Op::Sum(x) => {
                let t = Tensor::full(self.shape(*x), g[0]);
                self.accumulate(grads, *x, t);
            }
            Op::Mean(x) => {
                let n = T::from_f64(self.value(*x).numel() as f64);
                let t = Tensor::full(self.shape(*x), g[0] / n);
                self.accumulate(grads, *x, t);
            }
            Op::Bce { pred, target, eps } => {
                let n = T::from_f64(target.numel() as f64);
                let d = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &y)| {
                        if p < *eps || p > T::one() - *eps {
                            T::zero()
                        } else {
                            g[0] * (p - y) / (p * (T::one() - p)) / n
                        }
                    })
                    .collect();
                self.accumulate_data(grads, *pred, d);
            }
            Op::MaskedL1 { pred, target, reduction } => {
                let scale = match reduction {
                    Reduction::Mean => g[0] / T::from_f64(target.numel() as f64),
                    Reduction::Sum => g[0],
                };
                let d = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &y)| {
                        let m = T::one() - y;
                        let r = m * (p - y);
                        if r == T::zero() { T::zero() } else { scale * m * r.signum() }
                    })
                    .collect();
                self.accumulate_data(grads, *pred, d);
            }
        }
    }
}

/// Mean clamped binary cross-entropy; shared by the graph op and the standalone losses.
pub fn bce_value<T: Scalar>(pred: &[T], target: &[T], eps: T) -> T {
    let mut s = T::zero();
    for (&p, &y) in pred.iter().zip(target) {
        let p = p.max(eps).min(T::one() - eps);
        s -= y * p.ln() + (T::one() - y) * (T::one() - p).ln();
    }
    s / T::from_f64(pred.len() as f64)
}

/// `Σ |(1 - y)·(p - y)|`, divided by the element count for [`Reduction::Mean`].
pub fn masked_l1_value<T: Scalar>(pred: &[T], target: &[T], reduction: Reduction) -> T {
    let mut s = T::zero();
    for (&p, &y) in pred.iter().zip(target) {
        s += ((T::one() - y) * (p - y)).abs();
    }
    match reduction {
        Reduction::Mean => s / T::from_f64(pred.len() as f64),
        Reduction::Sum => s,
    }
}

/// `[b, r, c]` → `[b, c, r]`.
fn transpose_last2<T: Scalar>(x: &[T], b: usize, r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..b {
        let src = &x[i * r * c..(i + 1) * r * c];
        let dst = &mut out[i * r * c..(i + 1) * r * c];
        for ri in 0..r {
            for ci in 0..c {
                dst[ci * r + ri] = src[ri * c + ci];
            }
        }
    }
    out
}

fn split_heads_data<T: Scalar>(x: &[T], b: usize, n: usize, heads: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ni in 0..n {
            for h in 0..heads {
                let src = ((bi * n + ni) * heads + h) * d;
                let dst = (((bi * heads + h) * n) + ni) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}

fn merge_heads_data<T: Scalar>(x: &[T], b: usize, n: usize, heads: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ni in 0..n {
            for h in 0..heads {
                let dst = ((bi * n + ni) * heads + h) * d;
                let src = (((bi * heads + h) * n) + ni) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}
