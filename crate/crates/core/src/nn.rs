//! Parameter storage and the neural building blocks shared by every stage:
//! affine layers, layer normalization, multi-head attention (self and cross),
//! feed-forward blocks and pre-norm transformer encoder blocks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{CerdError, Result};
use crate::tensor::{shape_str, Tensor};

/// Deviation of the normal initializer used for learned queries and embeddings.
pub const EMBED_INIT_STD: f64 = 0.02;
const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    /// Set when a backward pass delivered a gradient since the last reset.
    pub touched: bool,
}

/// Named, ordered collection of every trainable tensor in a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let n = value.numel();
        self.params.push(Param {
            name,
            value,
            grad: vec![0.0; n],
            touched: false,
        });
        ParamId(self.params.len() - 1)
    }

    /// Registers the parameter on `tape` (once per tape) and returns its leaf.
    pub fn var(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(id.0, || self.params[id.0].value.clone())
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn fill(&mut self, id: ParamId, v: f64) {
        self.params[id.0].value.data_mut().fill(v);
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Scalar count of parameters whose names start with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Adds the gradients accumulated on `tape` into the stored gradient buffers.
    pub fn collect_grads(&mut self, tape: &Tape) {
        for (key, var) in tape.params() {
            if let Some(g) = tape.grad(var) {
                let p = &mut self.params[key];
                p.grad.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                p.touched = true;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
            p.touched = false;
        }
    }
}

pub fn uniform_fan_in(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

pub fn normal_init(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite deviation");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Affine map `y = W x + b` applied along the trailing axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            uniform_fan_in(rng, &[out_dim, in_dim], in_dim),
        );
        let bias = store.add(format!("{name}.bias"), uniform_fan_in(rng, &[out_dim], in_dim));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn num_params(&self) -> usize {
        self.out_dim * (self.in_dim + 1)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.fill(self.weight, 0.0);
        store.fill(self.bias, 0.0);
    }

    /// `x` is `[n × in]` or `[in]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) || shape.len() > 2 {
            return Err(CerdError::Dimension(format!(
                "linear layer expects trailing dimension {}, got {}",
                self.in_dim,
                shape_str(&shape)
            )));
        }
        let x2 = if shape.len() == 1 {
            tape.reshape(x, &[1, self.in_dim])?
        } else {
            x
        };
        let w = store.var(tape, self.weight);
        let b = store.var(tape, self.bias);
        let wt = tape.transpose(w)?;
        let y = tape.matmul(x2, wt)?;
        let y = tape.add_row(y, b)?;
        if shape.len() == 1 {
            tape.reshape(y, &[self.out_dim])
        } else {
            Ok(y)
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = tape.normalize(x, LAYER_NORM_EPS);
        let g = store.var(tape, self.gain);
        let b = store.var(tape, self.bias);
        let y = tape.mul_row(n, g)?;
        tape.add_row(y, b)
    }
}

/// Two-layer position-wise network with the smooth-ramp nonlinearity.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        hidden: usize,
        out: usize,
    ) -> Self {
        FeedForward {
            up: Linear::new(store, rng, &format!("{name}.up"), dim, hidden),
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, out),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, store, h)
    }
}

pub struct AttentionOutput {
    pub output: Var,
    /// One `[queries × keys]` weight matrix per head.
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention with `heads` parallel heads of width `dim / heads`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub dim: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(CerdError::Configuration(format!(
                "hidden dimension {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            heads,
            dim,
            query: Linear::new(store, rng, &format!("{name}.query"), dim, dim),
            key: Linear::new(store, rng, &format!("{name}.key"), dim, dim),
            value: Linear::new(store, rng, &format!("{name}.value"), dim, dim),
            output: Linear::new(store, rng, &format!("{name}.output"), dim, dim),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Cross-attention of `queries [P×D]` over `context [L×D]`; self-attention when both
    /// are the same tensor.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: Var,
        context: Var,
    ) -> Result<AttentionOutput> {
        let (_, qd) = tape.value(queries).dims2()?;
        let (_, cd) = tape.value(context).dims2()?;
        if qd != self.dim || cd != self.dim {
            return Err(CerdError::Dimension(format!(
                "attention over width {} got queries {} and context {}",
                self.dim,
                shape_str(tape.shape(queries)),
                shape_str(tape.shape(context))
            )));
        }
        let q = self.query.forward(tape, store, queries)?;
        let k = self.key.forward(tape, store, context)?;
        let v = self.value.forward(tape, store, context)?;
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice(q, 1, h * dh, dh)?,
                    tape.slice(k, 1, h * dh, dh)?,
                    tape.slice(v, 1, h * dh, dh)?,
                )
            };
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores, 1.0)?;
            outs.push(tape.matmul(attn, vh)?);
            weights.push(attn);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(&outs, 1)?
        };
        let output = self.output.forward(tape, store, merged)?;
        Ok(AttentionOutput { output, weights })
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub dropout: f64,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_mult: usize,
        dropout: f64,
    ) -> Result<Self> {
        Ok(EncoderBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attention: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dim, ffn_mult * dim, dim),
            dropout,
        })
    }

    /// Zeroes both residual branches so the block is the identity map.
    pub fn zero_residual_branches(&self, store: &mut ParamStore) {
        self.attention.output.zero(store);
        self.ffn.down.zero(store);
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, store, x)?;
        let a = self.attention.forward(tape, store, h, h)?.output;
        let a = tape.dropout(a, self.dropout)?;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, store, x)?;
        let f = self.ffn.forward(tape, store, h)?;
        let f = tape.dropout(f, self.dropout)?;
        tape.add(x, f)
    }
}

/// Runs a stack of encoder blocks over `[T×D]` tokens.
pub fn encoder_forward(
    blocks: &[EncoderBlock],
    tape: &mut Tape,
    store: &ParamStore,
    tokens: Var,
) -> Result<Var> {
    blocks
        .iter()
        .try_fold(tokens, |x, b| b.forward(tape, store, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        normal_init(rng, shape, 1.0)
    }

    #[test]
    fn linear_identity_and_constant() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let lin = Linear::new(&mut store, &mut r, "l", 3, 3);
        assert_eq!(lin.num_params(), 12);
        *store.value_mut(lin.weight) = Tensor::eye(3);
        store.fill(lin.bias, 0.0);
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let y = lin.forward(&mut t, &store, x).unwrap();
        assert_eq!(t.value(y), t.value(x));

        store.fill(lin.weight, 0.0);
        *store.value_mut(lin.bias) = Tensor::vector(vec![7., 8., 9.]).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1., 2., 3.]).unwrap());
        let y = lin.forward(&mut t, &store, x).unwrap();
        assert_eq!(t.value(y).data(), &[7., 8., 9.]);
    }

    #[test]
    fn linear_matches_loop_oracle() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let lin = Linear::new(&mut store, &mut r, "l", 4, 3);
        let x = random_tensor(&mut r, &[5, 4]);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let y = lin.forward(&mut t, &store, xv).unwrap();
        let w = store.value(lin.weight).data();
        let b = store.value(lin.bias).data();
        for i in 0..5 {
            for o in 0..3 {
                let mut acc = b[o];
                for j in 0..4 {
                    acc += w[o * 4 + j] * x.data()[i * 4 + j];
                }
                assert!((t.value(y).data()[i * 3 + o] - acc).abs() < 1e-12);
            }
        }
        let mut t = Tape::new();
        let bad = t.constant(Tensor::zeros(&[2, 5]));
        assert!(matches!(lin.forward(&mut t, &store, bad), Err(CerdError::Dimension(_))));
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut store = ParamStore::new();
        assert!(MultiHeadAttention::new(&mut store, &mut rng(), "a", 6, 4).is_err());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let mha = MultiHeadAttention::new(&mut store, &mut r, "a", 8, 4).unwrap();
        let mut t = Tape::new();
        let q = t.constant(random_tensor(&mut r, &[3, 8]));
        let c = t.constant(random_tensor(&mut r, &[5, 8]));
        let out = mha.forward(&mut t, &store, q, c).unwrap();
        assert_eq!(t.shape(out.output), &[3, 8]);
        assert_eq!(out.weights.len(), 4);
        for w in out.weights {
            for row in t.value(w).rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_residual_encoder_is_identity_and_deterministic() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let blocks: Vec<EncoderBlock> = (0..2)
            .map(|i| EncoderBlock::new(&mut store, &mut r, &format!("e{i}"), 8, 2, 4, 0.5).unwrap())
            .collect();
        let x = random_tensor(&mut r, &[6, 8]);
        let run = |store: &ParamStore| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let y = encoder_forward(&blocks, &mut t, store, xv).unwrap();
            t.value(y).clone()
        };
        let a = run(&store);
        let b = run(&store);
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[6, 8]);
        for b in &blocks {
            b.zero_residual_branches(&mut store);
        }
        assert_eq!(run(&store), x);
    }
}
