//! Parameter containers and the layers shared by the SDF decoders, the patch
//! encoder and the language model.
//!
//! Every parameter struct is generic over its leaf type `P`: `Matrix<T>` for
//! stored weights, `Var` once bound onto a [`Tape`]. `map` converts between
//! the two, `Params::visit` walks leaves in a fixed order with dotted names.

use rand::Rng;

use crate::autograd::{Grads, Tape, Var};
use crate::matrix::Matrix;
use crate::real::Real;

pub trait Params<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P));
}

/// Stored weights that can be bound onto a tape for differentiation.
pub trait Module<T: Real>: Params<Matrix<T>> {
    type Bound: Params<Var>;

    fn bind(&self, tape: &mut Tape<T>) -> Self::Bound;
}

/// Implements [`Module`] for parameter structs with an inherent `map`.
macro_rules! impl_module {
    ($($ty:ident),* $(,)?) => {$(
        impl<T: $crate::real::Real> $crate::nn::Module<T> for $ty<$crate::matrix::Matrix<T>> {
            type Bound = $ty<$crate::autograd::Var>;

            fn bind(&self, tape: &mut $crate::autograd::Tape<T>) -> Self::Bound {
                self.map("", &mut |_, m| tape.leaf(m.clone()))
            }
        }
    )*};
}
pub(crate) use impl_module;

impl_module!(Linear, LayerNorm, AttentionLayer, TransformerBlock);

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Leaves in visit order.
pub fn leaves<P>(params: &impl Params<P>) -> Vec<&P> {
    let mut out = Vec::new();
    params.visit("", &mut |_, p| out.push(p));
    out
}

pub fn leaf_names<P>(params: &impl Params<P>, prefix: &str) -> Vec<String> {
    let mut out = Vec::new();
    params.visit(prefix, &mut |n, _| out.push(n.to_string()));
    out
}

pub fn param_count<T: Real>(params: &impl Params<Matrix<T>>) -> usize {
    leaves(params).iter().map(|m| m.len()).sum()
}

/// Pulls the gradient of every bound leaf, in visit order.
pub fn collect_grads<T: Real>(
    bound: &impl Params<Var>,
    grads: &mut Grads<T>,
    tape: &Tape<T>,
) -> Vec<Matrix<T>> {
    leaves(bound)
        .into_iter()
        .map(|&v| grads.take(v, tape))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<P> {
    pub w: P,
    pub b: P,
}

impl<T: Real> Linear<Matrix<T>> {
    pub fn new<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            w: Matrix::glorot(fan_in, fan_out, rng),
            b: Matrix::zeros(1, fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Matrix::zeros(fan_in, fan_out),
            b: Matrix::zeros(1, fan_out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.rows
    }

    pub fn out_dim(&self) -> usize {
        self.w.cols
    }
}

impl<P> Linear<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Linear<Q> {
        Linear {
            w: f(&join(prefix, "w"), &self.w),
            b: f(&join(prefix, "b"), &self.b),
        }
    }
}

impl Linear<Var> {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Var {
        tape.linear(x, self.w, self.b)
    }
}

impl<P> Params<P> for Linear<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P)) {
        f(&join(prefix, "w"), &self.w);
        f(&join(prefix, "b"), &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<P> {
    pub gamma: P,
    pub beta: P,
}

impl<T: Real> LayerNorm<Matrix<T>> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Matrix::filled(1, dim, T::one()),
            beta: Matrix::zeros(1, dim),
        }
    }
}

impl<P> LayerNorm<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> LayerNorm<Q> {
        LayerNorm {
            gamma: f(&join(prefix, "gamma"), &self.gamma),
            beta: f(&join(prefix, "beta"), &self.beta),
        }
    }
}

impl LayerNorm<Var> {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Var {
        tape.layer_norm(x, self.gamma, self.beta)
    }
}

impl<P> Params<P> for LayerNorm<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Pre-norm multi-head self-attention with a residual connection:
/// `x + out(attn(q(ln x), k(ln x), v(ln x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer<P> {
    pub norm: LayerNorm<P>,
    pub query: Linear<P>,
    pub key: Linear<P>,
    pub value: Linear<P>,
    pub out: Linear<P>,
}

impl<T: Real> AttentionLayer<Matrix<T>> {
    pub fn new<R: Rng>(dim: usize, rng: &mut R) -> Self {
        Self {
            norm: LayerNorm::new(dim),
            query: Linear::new(dim, dim, rng),
            key: Linear::new(dim, dim, rng),
            value: Linear::new(dim, dim, rng),
            out: Linear::new(dim, dim, rng),
        }
    }
}

impl<P> AttentionLayer<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> AttentionLayer<Q> {
        AttentionLayer {
            norm: self.norm.map(&join(prefix, "norm"), f),
            query: self.query.map(&join(prefix, "query"), f),
            key: self.key.map(&join(prefix, "key"), f),
            value: self.value.map(&join(prefix, "value"), f),
            out: self.out.map(&join(prefix, "out"), f),
        }
    }
}

impl AttentionLayer<Var> {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var, heads: usize, causal: bool) -> Var {
        let n = self.norm.forward(tape, x);
        let q = self.query.forward(tape, n);
        let k = self.key.forward(tape, n);
        let v = self.value.forward(tape, n);
        let a = tape.attention(q, k, v, heads, causal);
        let o = self.out.forward(tape, a);
        tape.add(x, o)
    }
}

impl<P> Params<P> for AttentionLayer<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// Pre-norm transformer block: attention layer followed by a GELU
/// feed-forward of width `4 * dim`, both residual.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock<P> {
    pub attn: AttentionLayer<P>,
    pub ff_norm: LayerNorm<P>,
    pub ff_in: Linear<P>,
    pub ff_out: Linear<P>,
}

impl<T: Real> TransformerBlock<Matrix<T>> {
    pub fn new<R: Rng>(dim: usize, rng: &mut R) -> Self {
        Self {
            attn: AttentionLayer::new(dim, rng),
            ff_norm: LayerNorm::new(dim),
            ff_in: Linear::new(dim, 4 * dim, rng),
            ff_out: Linear::new(4 * dim, dim, rng),
        }
    }
}

impl<P> TransformerBlock<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> TransformerBlock<Q> {
        TransformerBlock {
            attn: self.attn.map(&join(prefix, "attn"), f),
            ff_norm: self.ff_norm.map(&join(prefix, "ff_norm"), f),
            ff_in: self.ff_in.map(&join(prefix, "ff_in"), f),
            ff_out: self.ff_out.map(&join(prefix, "ff_out"), f),
        }
    }
}

impl TransformerBlock<Var> {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var, heads: usize, causal: bool) -> Var {
        let h = self.attn.forward(tape, x, heads, causal);
        let n = self.ff_norm.forward(tape, h);
        let f = self.ff_in.forward(tape, n);
        let f = tape.gelu(f);
        let f = self.ff_out.forward(tape, f);
        tape.add(h, f)
    }
}

impl<P> Params<P> for TransformerBlock<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P)) {
        self.attn.visit(&join(prefix, "attn"), f);
        self.ff_norm.visit(&join(prefix, "ff_norm"), f);
        self.ff_in.visit(&join(prefix, "ff_in"), f);
        self.ff_out.visit(&join(prefix, "ff_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ff_norm.visit_mut(&join(prefix, "ff_norm"), f);
        self.ff_in.visit_mut(&join(prefix, "ff_in"), f);
        self.ff_out.visit_mut(&join(prefix, "ff_out"), f);
    }
}

/// Binds stored weights onto a tape as leaves.
pub fn bind_leaf<T: Real>(tape: &mut Tape<T>) -> impl FnMut(&str, &Matrix<T>) -> Var + '_ {
    move |_, m| tape.leaf(m.clone())
}

pub fn cast_leaf<T: Real, U: Real>(_: &str, m: &Matrix<T>) -> Matrix<U> {
    m.cast()
}
