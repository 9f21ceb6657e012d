//! Execution backends for network code.
//!
//! Layers are written once against [`Ops`]. [`Eval`] runs them eagerly and
//! drops intermediates; [`Tape`] records every result so that
//! [`Tape::backward`] can compute reverse-mode gradients.

use std::collections::BTreeMap;
use std::sync::Arc;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvSpec};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub trait Ops<T: Scalar> {
    type Value: Clone;

    /// A constant input that never receives gradients.
    fn input(&mut self, t: Tensor<T>) -> Self::Value;

    fn param(&mut self, params: &ParamStore<T>, name: &str) -> Result<Self::Value>;

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<T>;

    fn conv2d(
        &mut self,
        x: &Self::Value,
        weight: &Self::Value,
        bias: Option<&Self::Value>,
        spec: ConvSpec,
    ) -> Result<Self::Value>;

    fn relu(&mut self, x: &Self::Value) -> Self::Value;

    fn sigmoid(&mut self, x: &Self::Value) -> Self::Value;

    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;

    fn concat_channels(&mut self, parts: &[&Self::Value]) -> Result<Self::Value>;

    fn max_pool2(&mut self, x: &Self::Value) -> Result<Self::Value>;

    fn adaptive_max_pool(&mut self, x: &Self::Value, oh: usize, ow: usize) -> Result<Self::Value>;

    fn adaptive_avg_pool(&mut self, x: &Self::Value, oh: usize, ow: usize) -> Result<Self::Value>;

    /// Hook for exporting per-stage attention; no-op unless a backend captures it.
    fn record_attention(&mut self, _stage: usize, _attention: &Self::Value) {}
}

/// Eager evaluation without gradient bookkeeping.
#[derive(Default)]
pub struct Eval<T: Scalar> {
    attention: Option<BTreeMap<usize, Tensor<T>>>,
}

impl<T: Scalar> Eval<T> {
    pub fn new() -> Self {
        Eval { attention: None }
    }

    /// An evaluator that keeps every attention map passed to
    /// [`Ops::record_attention`].
    pub fn capturing_attention() -> Self {
        Eval {
            attention: Some(BTreeMap::new()),
        }
    }

    pub fn take_attention(&mut self) -> BTreeMap<usize, Tensor<T>> {
        self.attention.take().unwrap_or_default()
    }
}

impl<T: Scalar> Ops<T> for Eval<T> {
    type Value = Arc<Tensor<T>>;

    fn input(&mut self, t: Tensor<T>) -> Self::Value {
        Arc::new(t)
    }

    fn param(&mut self, params: &ParamStore<T>, name: &str) -> Result<Self::Value> {
        params.shared(name)
    }

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<T> {
        v
    }

    fn conv2d(
        &mut self,
        x: &Self::Value,
        weight: &Self::Value,
        bias: Option<&Self::Value>,
        spec: ConvSpec,
    ) -> Result<Self::Value> {
        Ok(Arc::new(kernels::conv2d(x, weight, bias.map(|b| &**b), spec)?))
    }

    fn relu(&mut self, x: &Self::Value) -> Self::Value {
        Arc::new(x.map(|v| v.max(T::zero())))
    }

    fn sigmoid(&mut self, x: &Self::Value) -> Self::Value {
        Arc::new(x.map(kernels::sigmoid))
    }

    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        Ok(Arc::new(a.zip_map(b, |x, y| x * y)?))
    }

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        Ok(Arc::new(a.zip_map(b, |x, y| x + y)?))
    }

    fn concat_channels(&mut self, parts: &[&Self::Value]) -> Result<Self::Value> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| &***p).collect();
        Ok(Arc::new(kernels::concat_channels(&refs)?))
    }

    fn max_pool2(&mut self, x: &Self::Value) -> Result<Self::Value> {
        Ok(Arc::new(kernels::max_pool2(x)?.output))
    }

    fn adaptive_max_pool(&mut self, x: &Self::Value, oh: usize, ow: usize) -> Result<Self::Value> {
        Ok(Arc::new(kernels::adaptive_max_pool(x, oh, ow)?.output))
    }

    fn adaptive_avg_pool(&mut self, x: &Self::Value, oh: usize, ow: usize) -> Result<Self::Value> {
        Ok(Arc::new(kernels::adaptive_avg_pool(x, oh, ow)?))
    }

    fn record_attention(&mut self, stage: usize, attention: &Self::Value) {
        if let Some(maps) = self.attention.as_mut() {
            maps.insert(stage, (**attention).clone());
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    Relu(Var),
    Sigmoid(Var),
    Mul(Var, Var),
    Add(Var, Var),
    Concat {
        parts: Vec<Var>,
        widths: Vec<usize>,
    },
    ArgPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool(Var),
    L1 {
        pred: Var,
        target: Vec<T>,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, Var>,
    frozen_prefixes: Vec<String>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: IndexMap::new(),
            frozen_prefixes: Vec::new(),
        }
    }

    /// Parameters whose name starts with `prefix` are treated as constants.
    pub fn freeze_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.frozen_prefixes.push(prefix.into());
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that does receive gradients (used for input-sensitivity checks).
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(Arc::new(t), Op::Leaf, true)
    }

    fn push(&mut self, value: Arc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Mean absolute error between a `(n, 1, 1, 1)` prediction and `n` targets.
    pub fn l1_loss(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let p = &self.nodes[pred.0].value;
        if p.len() != target.len() {
            return Err(Error::Shape(format!(
                "{} predictions vs {} targets",
                p.len(),
                target.len()
            )));
        }
        let n = T::from_f64(target.len() as f64);
        let loss = p.data().iter().zip(target).map(|(&a, &b)| (a - b).abs()).sum::<T>() / n;
        let rg = self.rg(pred);
        Ok(self.push(
            Arc::new(Tensor::full(&[1], loss)),
            Op::L1 {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {:?}",
                out.dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out.dims(), T::one()));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let mut send = |v: Var, g: Tensor<T>| -> Result<()> {
                if !self.nodes[v.0].requires_grad {
                    return Ok(());
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => {
                        *slot = Some(g);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Leaf => unreachable!("leaves keep their gradient"),
                Op::Conv { x, weight, bias, spec } => {
                    let mut need_x = self.rg(*x);
                    let need_w = self.rg(*weight);
                    // A concat of trainable and constant parts (backbone taps):
                    // route gradients straight to the trainable parts only.
                    if let Op::Concat { parts, widths } = &self.nodes[x.0].op {
                        if need_x && spec.groups == 1 && parts.iter().any(|v| !self.rg(*v)) {
                            let mut start = 0;
                            for (v, &width) in parts.iter().zip(widths) {
                                if self.rg(*v) {
                                    let g = kernels::conv2d_input_grad_channels(
                                        &self.nodes[x.0].value,
                                        &self.nodes[weight.0].value,
                                        *spec,
                                        &dy,
                                        start..start + width,
                                    )?;
                                    send(*v, g)?;
                                }
                                start += width;
                            }
                            need_x = false;
                        }
                    }
                    let cg = kernels::conv2d_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[weight.0].value,
                        bias.is_some(),
                        *spec,
                        &dy,
                        need_x,
                        need_w,
                    )?;
                    if let Some(g) = cg.input {
                        send(*x, g)?;
                    }
                    if let Some(g) = cg.weight {
                        send(*weight, g)?;
                    }
                    if let (Some(b), Some(g)) = (bias, cg.bias) {
                        send(*b, g)?;
                    }
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[x.0].value;
                    send(*x, dy.zip_map(xv, |g, v| if v > T::zero() { g } else { T::zero() })?)?;
                }
                Op::Sigmoid(x) => {
                    let g = dy.zip_map(&node.value, |g, s| g * s * (T::one() - s))?;
                    send(*x, g)?;
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    if self.rg(*a) {
                        send(*a, dy.zip_map(bv, |g, v| g * v)?)?;
                    }
                    if self.rg(*b) {
                        send(*b, dy.zip_map(av, |g, v| g * v)?)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        send(*a, dy.clone())?;
                    }
                    send(*b, dy)?;
                }
                Op::Concat { parts, widths } => {
                    let pieces = kernels::split_channels(&dy, widths)?;
                    for (v, g) in parts.iter().zip(pieces) {
                        send(*v, g)?;
                    }
                }
                Op::ArgPool { x, argmax } => {
                    let dims = self.nodes[x.0].value.dims().to_vec();
                    send(*x, kernels::scatter_argmax(&dims, argmax, &dy))?;
                }
                Op::AvgPool(x) => {
                    let dims = self.nodes[x.0].value.dims().to_vec();
                    send(*x, kernels::adaptive_avg_pool_backward(&dims, &dy)?)?;
                }
                Op::L1 { pred, target } => {
                    let pv = &self.nodes[pred.0].value;
                    let scale = dy.data()[0] / T::from_f64(target.len() as f64);
                    let g = Tensor::new(
                        pv.dims().to_vec(),
                        pv.data()
                            .iter()
                            .zip(target)
                            .map(|(&p, &t)| {
                                let d = p - t;
                                if d > T::zero() {
                                    scale
                                } else if d < T::zero() {
                                    -scale
                                } else {
                                    T::zero()
                                }
                            })
                            .collect(),
                    )?;
                    send(*pred, g)?;
                }
            }
        }

        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }
}

impl<T: Scalar> Ops<T> for Tape<T> {
    type Value = Var;

    fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Arc::new(t), Op::Leaf, false)
    }

    fn param(&mut self, params: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let trainable = !self.frozen_prefixes.iter().any(|p| name.starts_with(p.as_str()));
        let v = self.push(params.shared(name)?, Op::Leaf, trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    fn conv2d(&mut self, x: &Var, weight: &Var, bias: Option<&Var>, spec: ConvSpec) -> Result<Var> {
        let out = kernels::conv2d(
            &self.nodes[x.0].value,
            &self.nodes[weight.0].value,
            bias.map(|b| &*self.nodes[b.0].value),
            spec,
        )?;
        let rg = self.rg(*x) || self.rg(*weight) || bias.is_some_and(|b| self.rg(*b));
        Ok(self.push(
            Arc::new(out),
            Op::Conv {
                x: *x,
                weight: *weight,
                bias: bias.copied(),
                spec,
            },
            rg,
        ))
    }

    fn relu(&mut self, x: &Var) -> Var {
        let out = self.nodes[x.0].value.map(|v| v.max(T::zero()));
        let rg = self.rg(*x);
        self.push(Arc::new(out), Op::Relu(*x), rg)
    }

    fn sigmoid(&mut self, x: &Var) -> Var {
        let out = self.nodes[x.0].value.map(kernels::sigmoid);
        let rg = self.rg(*x);
        self.push(Arc::new(out), Op::Sigmoid(*x), rg)
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x * y)?;
        let rg = self.rg(*a) || self.rg(*b);
        Ok(self.push(Arc::new(out), Op::Mul(*a, *b), rg))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x + y)?;
        let rg = self.rg(*a) || self.rg(*b);
        Ok(self.push(Arc::new(out), Op::Add(*a, *b), rg))
    }

    fn concat_channels(&mut self, parts: &[&Var]) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|v| &*self.nodes[v.0].value).collect();
        let out = kernels::concat_channels(&refs)?;
        let widths = refs.iter().map(|t| t.dims()[1]).collect();
        let rg = parts.iter().any(|v| self.rg(**v));
        Ok(self.push(
            Arc::new(out),
            Op::Concat {
                parts: parts.iter().map(|v| **v).collect(),
                widths,
            },
            rg,
        ))
    }

    fn max_pool2(&mut self, x: &Var) -> Result<Var> {
        let pooled = kernels::max_pool2(&self.nodes[x.0].value)?;
        let rg = self.rg(*x);
        Ok(self.push(
            Arc::new(pooled.output),
            Op::ArgPool {
                x: *x,
                argmax: pooled.argmax,
            },
            rg,
        ))
    }

    fn adaptive_max_pool(&mut self, x: &Var, oh: usize, ow: usize) -> Result<Var> {
        let pooled = kernels::adaptive_max_pool(&self.nodes[x.0].value, oh, ow)?;
        let rg = self.rg(*x);
        Ok(self.push(
            Arc::new(pooled.output),
            Op::ArgPool {
                x: *x,
                argmax: pooled.argmax,
            },
            rg,
        ))
    }

    fn adaptive_avg_pool(&mut self, x: &Var, oh: usize, ow: usize) -> Result<Var> {
        let out = kernels::adaptive_avg_pool(&self.nodes[x.0].value, oh, ow)?;
        let rg = self.rg(*x);
        Ok(self.push(Arc::new(out), Op::AvgPool(*x), rg))
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: IndexMap<String, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a recorded value, if it was reached.
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a named parameter; `None` if frozen or unused.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|v| self.of(*v))
    }

    /// Names of parameters that received a gradient.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params
            .iter()
            .filter(|(_, v)| self.grads[v.0].is_some())
            .map(|(k, _)| k.as_str())
    }
}
