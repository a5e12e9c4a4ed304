//! Named parameter storage and the transformer building blocks shared by the
//! tokenizer and the downstream encoder.

use indexmap::IndexMap;
use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{contract, Result};
use crate::tensor::{Scalar, Tensor};

/// Epsilon for layer/group norm.
pub const NORM_EPS: f64 = 1e-5;
/// Floor for linear-attention denominators.
pub const ATTN_DEN_EPS: f64 = 1e-8;

/// Ordered map of named trainable tensors. Insertion order defines the
/// gradient slot layout used by [`crate::autograd::Gradients`] and the
/// optimizer.
#[derive(Clone)]
pub struct ParameterStore<S: Scalar> {
    params: IndexMap<String, Tensor<S>>,
}

impl<S: Scalar> Default for ParameterStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(contract(format!("duplicate parameter name: {name}")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.params
            .get(name)
            .ok_or_else(|| contract(format!("unknown parameter: {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| contract(format!("unknown parameter: {name}")))
    }

    pub fn set(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| contract(format!("unknown parameter: {name}")))?;
        if slot.shape() != value.shape() {
            return Err(contract(format!(
                "parameter {name} shape {:?} cannot be set to {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.params
            .get_index_of(name)
            .ok_or_else(|| contract(format!("unknown parameter: {name}")))
    }

    pub fn by_index(&self, i: usize) -> (&str, &Tensor<S>) {
        let (k, v) = self.params.get_index(i).expect("parameter index in range");
        (k.as_str(), v)
    }

    pub fn by_index_mut(&mut self, i: usize) -> (&str, &mut Tensor<S>) {
        let (k, v) = self
            .params
            .get_index_mut(i)
            .expect("parameter index in range");
        (k.as_str(), v)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    /// Number of scalar elements across all parameters.
    pub fn total_elems(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Mirror a stored parameter onto a tape as a differentiable leaf.
    pub fn var(&self, tape: &Tape<S>, name: &str) -> Result<Var> {
        let idx = self.index_of(name)?;
        Ok(tape.param(idx, self.get(name)?.clone()))
    }
}

// ----- initializers -----

pub fn uniform_init<S: Scalar>(
    shape: impl Into<Vec<usize>>,
    bound: f64,
    rng: &mut impl Rng,
) -> Tensor<S> {
    let shape = shape.into();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("uniform_init shape")
}

/// Register a linear layer `{prefix}.w` [out,in], `{prefix}.b` [out] with
/// uniform(±1/√in) weights and zero bias.
pub fn register_linear<S: Scalar>(
    store: &mut ParameterStore<S>,
    prefix: &str,
    out_dim: usize,
    in_dim: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let bound = 1.0 / (in_dim as f64).sqrt();
    store.insert(format!("{prefix}.w"), uniform_init([out_dim, in_dim], bound, rng))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros([out_dim]))
}

pub fn linear_forward<S: Scalar>(
    tape: &Tape<S>,
    store: &ParameterStore<S>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let w = store.var(tape, &format!("{prefix}.w"))?;
    let b = store.var(tape, &format!("{prefix}.b"))?;
    tape.linear(x, w, b)
}

/// Register a 1-D conv `{prefix}.w` [co,ci,k], `{prefix}.b` [co].
pub fn register_conv1d<S: Scalar>(
    store: &mut ParameterStore<S>,
    prefix: &str,
    co: usize,
    ci: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let bound = 1.0 / ((ci * k) as f64).sqrt();
    store.insert(format!("{prefix}.w"), uniform_init([co, ci, k], bound, rng))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros([co]))
}

pub fn conv1d_forward<S: Scalar>(
    tape: &Tape<S>,
    store: &ParameterStore<S>,
    prefix: &str,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let w = store.var(tape, &format!("{prefix}.w"))?;
    let b = store.var(tape, &format!("{prefix}.b"))?;
    tape.conv1d(x, w, b, stride)
}

/// Register norm affine params `{prefix}.g` (ones), `{prefix}.b` (zeros).
pub fn register_norm<S: Scalar>(
    store: &mut ParameterStore<S>,
    prefix: &str,
    ch: usize,
) -> Result<()> {
    store.insert(format!("{prefix}.g"), Tensor::full([ch], S::one()))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros([ch]))
}

pub fn layer_norm_forward<S: Scalar>(
    tape: &Tape<S>,
    store: &ParameterStore<S>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let g = store.var(tape, &format!("{prefix}.g"))?;
    let b = store.var(tape, &format!("{prefix}.b"))?;
    tape.layer_norm(x, g, b, S::from_f64(NORM_EPS))
}

pub fn group_norm_forward<S: Scalar>(
    tape: &Tape<S>,
    store: &ParameterStore<S>,
    prefix: &str,
    x: Var,
    groups: usize,
) -> Result<Var> {
    let g = store.var(tape, &format!("{prefix}.g"))?;
    let b = store.var(tape, &format!("{prefix}.b"))?;
    tape.group_norm(x, groups, g, b, S::from_f64(NORM_EPS))
}

// ----- transformer blocks -----

/// Attention flavor of a transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnKind {
    /// Scaled dot-product softmax attention.
    Softmax,
    /// Kernelized linear attention with φ(u) = elu(u) + 1.
    Linear,
}

/// Register one pre-norm transformer block under `prefix`: attention
/// projections, output projection, and a 4×D GELU feed-forward.
pub fn register_transformer_layer<S: Scalar>(
    store: &mut ParameterStore<S>,
    prefix: &str,
    d: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    register_norm(store, &format!("{prefix}.ln1"), d)?;
    register_linear(store, &format!("{prefix}.q"), d, d, rng)?;
    register_linear(store, &format!("{prefix}.k"), d, d, rng)?;
    register_linear(store, &format!("{prefix}.v"), d, d, rng)?;
    register_linear(store, &format!("{prefix}.o"), d, d, rng)?;
    register_norm(store, &format!("{prefix}.ln2"), d)?;
    register_linear(store, &format!("{prefix}.ffn1"), 4 * d, d, rng)?;
    register_linear(store, &format!("{prefix}.ffn2"), d, 4 * d, rng)
}

/// Pre-norm residual transformer block over x[seq, D]:
/// x + Attn(LN(x)), then + FFN(LN(·)).
pub fn transformer_layer_forward<S: Scalar>(
    tape: &Tape<S>,
    store: &ParameterStore<S>,
    prefix: &str,
    x: Var,
    heads: usize,
    kind: AttnKind,
) -> Result<Var> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[0] == 0 {
        return Err(contract("transformer layer expects non-empty x[seq,D]"));
    }
    let (seq, d) = (shape[0], shape[1]);
    if heads == 0 || d % heads != 0 {
        return Err(contract(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;

    let h = layer_norm_forward(tape, store, &format!("{prefix}.ln1"), x)?;
    let q = linear_forward(tape, store, &format!("{prefix}.q"), h)?;
    let k = linear_forward(tape, store, &format!("{prefix}.k"), h)?;
    let v = linear_forward(tape, store, &format!("{prefix}.v"), h)?;

    let mut head_outs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let (lo, hi) = (hd * dh, (hd + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let out = match kind {
            AttnKind::Softmax => {
                let scores = tape.matmul(qh, tape.transpose(kh)?)?;
                let scaled = tape.scale(scores, S::from_f64(1.0 / (dh as f64).sqrt()));
                let attn = tape.softmax_rows(scaled)?;
                tape.matmul(attn, vh)?
            }
            AttnKind::Linear => {
                let pq = tape.elu_plus_one(qh);
                let pk = tape.elu_plus_one(kh);
                // num_i = φ(q_i)ᵀ Σ_j φ(k_j) v_jᵀ ; den_i = φ(q_i)ᵀ Σ_j φ(k_j)
                let kv = tape.matmul(tape.transpose(pk)?, vh)?;
                let ones = tape.constant(Tensor::full([seq, 1], S::one()));
                let ksum = tape.matmul(tape.transpose(pk)?, ones)?;
                let num = tape.matmul(pq, kv)?;
                let den_raw = tape.matmul(pq, ksum)?;
                let floor = S::from_f64(ATTN_DEN_EPS);
                if tape
                    .value(den_raw)
                    .data()
                    .iter()
                    .any(|&x| x < floor)
                {
                    log::warn!("linear attention denominator clamped to {ATTN_DEN_EPS}");
                }
                let den = tape.clamp_min(den_raw, floor);
                tape.div_cols(num, den)?
            }
        };
        head_outs.push(out);
    }
    let mut merged = head_outs[0];
    for &h_out in &head_outs[1..] {
        merged = tape.concat_cols(merged, h_out)?;
    }
    let attn_out = linear_forward(tape, store, &format!("{prefix}.o"), merged)?;
    let x = tape.add(x, attn_out)?;

    let h2 = layer_norm_forward(tape, store, &format!("{prefix}.ln2"), x)?;
    let f1 = linear_forward(tape, store, &format!("{prefix}.ffn1"), h2)?;
    let f1 = tape.gelu(f1);
    let f2 = linear_forward(tape, store, &format!("{prefix}.ffn2"), f1)?;
    tape.add(x, f2)
}

/// Register a stack of `layers` transformer blocks `{prefix}.0 .. {prefix}.{layers-1}`.
pub fn register_transformer_stack<S: Scalar>(
    store: &mut ParameterStore<S>,
    prefix: &str,
    layers: usize,
    d: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    for l in 0..layers {
        register_transformer_layer(store, &format!("{prefix}.{l}"), d, rng)?;
    }
    Ok(())
}

pub fn transformer_stack_forward<S: Scalar>(
    tape: &Tape<S>,
    store: &ParameterStore<S>,
    prefix: &str,
    mut x: Var,
    layers: usize,
    heads: usize,
    kind: AttnKind,
) -> Result<Var> {
    for l in 0..layers {
        x = transformer_layer_forward(tape, store, &format!("{prefix}.{l}"), x, heads, kind)?;
    }
    Ok(x)
}
