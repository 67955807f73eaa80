//! Sparse mixture-of-experts fusion.
//!
//! Completed tokens are encoded jointly, an availability-aware routing vector
//! (mean of the pooled blocks of observed modalities only) drives a tempered
//! softmax gate, and the Top-k experts produce one fused feature per modality.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{CerdError, Result};
use crate::nn::{encoder_forward, EncoderBlock, FeedForward, Linear, ParamStore};
use crate::tensor::Tensor;
use crate::tokenize::TokenSet;

/// Gate distribution, selected experts and their mixing weights for one subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub gate: Vec<f64>,
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Router {
    pub gate: Linear,
    pub temperature: f64,
    pub top_k: usize,
    /// Sum selected expert outputs without gate weighting.
    pub literal_sum: bool,
}

impl Router {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        dim: usize,
        experts: usize,
        temperature: f64,
        top_k: usize,
        literal_sum: bool,
    ) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(CerdError::Parameter(format!(
                "routing temperature must be positive, got {temperature}"
            )));
        }
        if top_k == 0 || top_k > experts {
            return Err(CerdError::Parameter(format!(
                "top-k must lie in 1..={experts}, got {top_k}"
            )));
        }
        Ok(Router {
            gate: Linear::new(store, rng, "router.gate", dim, experts),
            temperature,
            top_k,
            literal_sum,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.gate.out_dim
    }

    /// Returns (gate logits `W_g v + b_g`, gate distribution π).
    pub fn gate(&self, tape: &mut Tape, store: &ParamStore, v: Var) -> Result<(Var, Var)> {
        let logits = self.gate.forward(tape, store, v)?;
        let pi = tape.softmax(logits, self.temperature)?;
        Ok((logits, pi))
    }

    /// Mixing weights over the selected experts: the renormalized gate values
    /// (equivalently a tempered softmax over the selected logits), or all ones
    /// under literal summation.
    pub fn mixing_weights(
        &self,
        tape: &mut Tape,
        logits: Var,
        decision: &RoutingDecision,
    ) -> Result<Var> {
        if self.literal_sum {
            return Ok(tape.constant(Tensor::full(&[decision.selected.len()], 1.0)));
        }
        let chosen = tape.gather(logits, &decision.selected)?;
        tape.softmax(chosen, self.temperature)
    }
}

/// Expert network: two-layer feed-forward `D → 4D → D` applied to a mean-pooled block.
#[derive(Clone, Debug)]
pub struct Expert {
    pub ffn: FeedForward,
}

impl Expert {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, mult: usize) -> Self {
        Expert {
            ffn: FeedForward::new(store, rng, name, dim, mult * dim, dim),
        }
    }

    /// `pooled` is `[M×D]`, one row per modality block.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, pooled: Var) -> Result<Var> {
        self.ffn.forward(tape, store, pooled)
    }
}

/// Encodes the concatenated completed tokens `[M·P × D]`.
pub fn encode_tokens(
    tape: &mut Tape,
    store: &ParamStore,
    encoder: &[EncoderBlock],
    tokens: &TokenSet,
) -> Result<Var> {
    let blocks = tokens.complete_blocks()?;
    let z = tape.concat(&blocks, 0)?;
    encoder_forward(encoder, tape, store, z)
}

/// The contiguous `[P×D]` row slices of the encoded sequence, in catalog order.
pub fn split_blocks(tape: &mut Tape, encoded: Var, modalities: usize, tokens: usize) -> Result<Vec<Var>> {
    if tape.shape(encoded)[0] != modalities * tokens {
        return Err(CerdError::Dimension(format!(
            "encoded sequence has {} rows, expected {modalities}×{tokens}",
            tape.shape(encoded)[0]
        )));
    }
    (0..modalities)
        .map(|m| tape.slice(encoded, 0, m * tokens, tokens))
        .collect()
}

/// Mean-pools each block over its tokens, giving `[M×D]`.
pub fn pool_blocks(tape: &mut Tape, blocks: &[Var]) -> Result<Var> {
    let pooled = blocks
        .iter()
        .map(|&b| tape.mean(b, 0))
        .collect::<Result<Vec<_>>>()?;
    let d = tape.shape(pooled[0])[0];
    let rows = pooled
        .into_iter()
        .map(|p| tape.reshape(p, &[1, d]))
        .collect::<Result<Vec<_>>>()?;
    tape.concat(&rows, 0)
}

/// Availability-aware routing vector: average pooled feature over observed modalities.
pub fn routing_vector(tape: &mut Tape, pooled: Var, mask: &[bool]) -> Result<Var> {
    let (m, _) = tape.value(pooled).dims2()?;
    if mask.len() != m {
        return Err(CerdError::Dimension(format!(
            "mask of length {} for {m} pooled modalities",
            mask.len()
        )));
    }
    let rows = (0..m)
        .filter(|&i| mask[i])
        .map(|i| tape.slice(pooled, 0, i, 1))
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(CerdError::Contract(
            "routing requires at least one observed modality".into(),
        ));
    }
    let observed = tape.concat(&rows, 0)?;
    tape.mean(observed, 0)
}

/// Indices of the `k` largest gate values (ties to the lower index) with the
/// selected values renormalized to sum to one.
pub fn select_topk(pi: &[f64], k: usize) -> Result<RoutingDecision> {
    if k == 0 || k > pi.len() {
        return Err(CerdError::Parameter(format!(
            "top-k must lie in 1..={}, got {k}",
            pi.len()
        )));
    }
    let mut order: Vec<usize> = (0..pi.len()).collect();
    order.sort_by(|&a, &b| pi[b].total_cmp(&pi[a]).then(a.cmp(&b)));
    let selected: Vec<usize> = order[..k].to_vec();
    let total: f64 = selected.iter().map(|&e| pi[e]).sum();
    let weights = selected.iter().map(|&e| pi[e] / total).collect();
    Ok(RoutingDecision {
        gate: pi.to_vec(),
        selected,
        weights,
    })
}

/// Fused per-modality features `p^m = Σ_e w_e Expert_e(pool(z'^m))` as `[M×D]`.
///
/// Only the selected experts run; their indices are appended to `executed`.
pub fn expert_mix(
    tape: &mut Tape,
    store: &ParamStore,
    experts: &[Expert],
    decision: &RoutingDecision,
    weights: Var,
    pooled: Var,
    executed: &mut Vec<usize>,
) -> Result<Var> {
    let (m, d) = tape.value(pooled).dims2()?;
    let mut outs = Vec::with_capacity(decision.selected.len());
    for &e in &decision.selected {
        let expert = experts
            .get(e)
            .ok_or_else(|| CerdError::Parameter(format!("expert index {e} out of range")))?;
        let y = expert.forward(tape, store, pooled)?;
        executed.push(e);
        outs.push(tape.reshape(y, &[1, m * d])?);
    }
    let stacked = tape.concat(&outs, 0)?;
    let k = decision.selected.len();
    let w = tape.reshape(weights, &[1, k])?;
    let mixed = tape.matmul(w, stacked)?;
    tape.reshape(mixed, &[m, d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal_init;
    use rand::SeedableRng;

    #[test]
    fn topk_examples() {
        let d = select_topk(&[0.4, 0.3, 0.2, 0.1], 2).unwrap();
        assert_eq!(d.selected, vec![0, 1]);
        assert!((d.weights[0] - 4.0 / 7.0).abs() < 1e-15);
        assert!((d.weights[1] - 3.0 / 7.0).abs() < 1e-15);

        let pi = [0.1, 0.2, 0.3, 0.4];
        let all = select_topk(&pi, 4).unwrap();
        let mut sel = all.selected.clone();
        sel.sort();
        assert_eq!(sel, vec![0, 1, 2, 3]);
        for (&e, w) in all.selected.iter().zip(&all.weights) {
            assert!((pi[e] - w).abs() < 1e-15);
        }
        let one = select_topk(&pi, 1).unwrap();
        assert_eq!((one.selected.clone(), one.weights.clone()), (vec![3], vec![1.0]));

        let tied = select_topk(&[0.25; 4], 2).unwrap();
        assert_eq!(tied.selected, vec![0, 1]);
        assert!(matches!(select_topk(&pi, 5), Err(CerdError::Parameter(_))));
        assert!(matches!(select_topk(&pi, 0), Err(CerdError::Parameter(_))));
    }

    #[test]
    fn zero_gate_is_uniform_and_softmax_oracle() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let router = Router::new(&mut store, &mut rng, 8, 16, 1.0, 4, false).unwrap();
        router.gate.zero(&mut store);
        let mut t = Tape::new();
        let v = t.constant(normal_init(&mut rng, &[8], 1.0));
        let (_, pi) = router.gate(&mut t, &store, v).unwrap();
        assert!(t.value(pi).data().iter().all(|&p| (p - 0.0625).abs() < 1e-15));

        let mut t = Tape::new();
        let logits = t.constant(Tensor::vector(vec![2., 1., 0., -1.]).unwrap());
        let pi = t.softmax(logits, 1.0).unwrap();
        let expected = [0.6439, 0.2369, 0.0871, 0.0321];
        for (p, e) in t.value(pi).data().iter().zip(expected) {
            assert!((p - e).abs() < 5e-5);
        }
    }

    #[test]
    fn routing_vector_masks() {
        let mut t = Tape::new();
        let pooled = t.constant(
            Tensor::matrix(4, 2, vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap(),
        );
        let all = routing_vector(&mut t, pooled, &[true; 4]).unwrap();
        assert_eq!(t.value(all).data(), &[4., 5.]);
        let one = routing_vector(&mut t, pooled, &[false, false, true, false]).unwrap();
        assert_eq!(t.value(one).data(), &[5., 6.]);
        let two = routing_vector(&mut t, pooled, &[true, false, true, false]).unwrap();
        assert_eq!(t.value(two).data(), &[3., 4.]);
        assert!(matches!(
            routing_vector(&mut t, pooled, &[false; 4]),
            Err(CerdError::Contract(_))
        ));
    }

    fn experts(n: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Vec<Expert> {
        (0..n)
            .map(|e| Expert::new(store, rng, &format!("expert{e}"), 4, 4))
            .collect()
    }

    #[test]
    fn expert_mix_weighted_sum_oracle() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ex = experts(4, &mut store, &mut rng);
        let mut t = Tape::new();
        let pooled = t.constant(normal_init(&mut rng, &[3, 4], 1.0));
        let decision = select_topk(&[0.1, 0.5, 0.15, 0.25], 2).unwrap();
        let w = t.constant(Tensor::vector(decision.weights.clone()).unwrap());
        let mut executed = Vec::new();
        let p = expert_mix(&mut t, &store, &ex, &decision, w, pooled, &mut executed).unwrap();
        assert_eq!(executed, vec![1, 3]);
        let y1 = ex[1].forward(&mut t, &store, pooled).unwrap();
        let y3 = ex[3].forward(&mut t, &store, pooled).unwrap();
        let (w1, w3) = (decision.weights[0], decision.weights[1]);
        for ((a, b), c) in t
            .value(y1)
            .data()
            .iter()
            .zip(t.value(y3).data())
            .zip(t.value(p).data())
        {
            assert!((w1 * a + w3 * b - c).abs() < 1e-12);
        }

        // k = 1: the argmax expert's output exactly
        let d1 = select_topk(&[0.1, 0.5, 0.15, 0.25], 1).unwrap();
        let w = t.constant(Tensor::vector(d1.weights.clone()).unwrap());
        let p1 = expert_mix(&mut t, &store, &ex, &d1, w, pooled, &mut executed).unwrap();
        assert_eq!(t.value(p1), t.value(y1));
    }

    #[test]
    fn identical_experts_make_selection_irrelevant() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ex = experts(4, &mut store, &mut rng);
        let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
        for name in names.iter().filter(|n| !n.starts_with("expert0")) {
            let src = name.replacen(&name[..7], "expert0", 1);
            let v = store.value(store.find(&src).unwrap()).clone();
            let id = store.find(name).unwrap();
            *store.value_mut(id) = v;
        }
        let mut t = Tape::new();
        let pooled = t.constant(normal_init(&mut rng, &[2, 4], 1.0));
        let mut outs = Vec::new();
        for pi in [[0.7, 0.1, 0.1, 0.1], [0.1, 0.1, 0.3, 0.5]] {
            let d = select_topk(&pi, 2).unwrap();
            let w = t.constant(Tensor::vector(d.weights.clone()).unwrap());
            let p = expert_mix(&mut t, &store, &ex, &d, w, pooled, &mut Vec::new()).unwrap();
            outs.push(t.value(p).clone());
        }
        assert!(outs[0].max_abs_diff(&outs[1]) < 1e-12);
    }

    #[test]
    fn renormalized_weights_equal_selected_softmax() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let router = Router::new(&mut store, &mut rng, 4, 6, 0.7, 3, false).unwrap();
        let mut t = Tape::new();
        let v = t.constant(normal_init(&mut rng, &[4], 1.0));
        let (logits, pi) = router.gate(&mut t, &store, v).unwrap();
        let d = select_topk(t.value(pi).data(), 3).unwrap();
        let w = router.mixing_weights(&mut t, logits, &d).unwrap();
        for (a, b) in t.value(w).data().iter().zip(&d.weights) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
