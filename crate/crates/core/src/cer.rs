//! Conditional evidence reconstruction: per-modality generators that rebuild a
//! missing modality's tokens by cross-attending learned queries over the
//! tokens of the other modalities, followed by a sigmoid gate.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{CerdError, Result};
use crate::nn::{normal_init, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore, EMBED_INIT_STD};
use crate::tokenize::{ModalityCatalog, Provenance, TokenSet};

/// Token-level reconstruction loss, averaged over all `P·D` entries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructionNorm {
    #[default]
    Mse,
    L1,
}

/// Which modalities are masked per fully observed subject and step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingPolicy {
    /// One target drawn uniformly per subject.
    #[default]
    Uniform,
    /// Every modality is a target every step.
    Exhaustive,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskingPlan {
    pub policy: MaskingPolicy,
    /// (position in the batch, masked modality)
    pub targets: Vec<(usize, usize)>,
}

impl MaskingPlan {
    /// `full` lists batch positions of subjects with every modality observed.
    pub fn sample(
        full: &[usize],
        num_modalities: usize,
        policy: MaskingPolicy,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let all: Vec<usize> = (0..num_modalities).collect();
        let candidates: Vec<(usize, &[usize])> = full.iter().map(|&s| (s, all.as_slice())).collect();
        Self::sample_among(&candidates, policy, rng)
    }

    /// Each candidate is a batch position with the modalities that may be masked there.
    pub fn sample_among(candidates: &[(usize, &[usize])], policy: MaskingPolicy, rng: &mut ChaCha8Rng) -> Self {
        let targets = match policy {
            MaskingPolicy::Uniform => candidates
                .iter()
                .map(|&(s, ms)| (s, ms[rng.random_range(0..ms.len())]))
                .collect(),
            MaskingPolicy::Exhaustive => candidates
                .iter()
                .flat_map(|&(s, ms)| ms.iter().map(move |&m| (s, m)))
                .collect(),
        };
        MaskingPlan { policy, targets }
    }
}

/// Structure of one block of a generator's cross-attention stack.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorBlock {
    /// `H ← CA(H, ctx)`: each block replaces the query stream by its attention output.
    Attention,
    /// Pre-norm decoder block: `H ← H + CA(LN(H), ctx)`, then `H ← H + FFN(LN(H))`.
    #[default]
    Decoder,
}

/// Residual path of a decoder block.
#[derive(Clone, Debug)]
pub struct DecoderParts {
    pub attn_norm: LayerNorm,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

/// Generator `G_m`: learned queries `[P×D]`, a stack of cross-attention blocks and
/// the gate projection.
#[derive(Clone, Debug)]
pub struct ConditionalGenerator {
    pub target: usize,
    pub queries: ParamId,
    pub layers: Vec<MultiHeadAttention>,
    /// One entry per layer for decoder blocks, empty for bare attention blocks.
    pub decoder: Vec<DecoderParts>,
    pub gate: Linear,
}

pub struct Generated {
    /// Gated reconstruction `σ(W H) ⊙ H`.
    pub tokens: Var,
    /// Cross-attention output `H`.
    pub hidden: Var,
}

impl ConditionalGenerator {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        catalog: &ModalityCatalog,
        target: usize,
        depth: usize,
        heads: usize,
        block: GeneratorBlock,
    ) -> Result<Self> {
        let name = format!("generator.{}", catalog.names[target]);
        let d = catalog.hidden;
        let queries = store.add(
            format!("{name}.queries"),
            normal_init(rng, &[catalog.tokens, d], EMBED_INIT_STD),
        );
        let layers = (0..depth)
            .map(|l| MultiHeadAttention::new(store, rng, &format!("{name}.layer{l}"), d, heads))
            .collect::<Result<Vec<_>>>()?;
        let decoder = match block {
            GeneratorBlock::Attention => Vec::new(),
            GeneratorBlock::Decoder => (0..depth)
                .map(|l| DecoderParts {
                    attn_norm: LayerNorm::new(store, &format!("{name}.layer{l}.attn_norm"), d),
                    ffn_norm: LayerNorm::new(store, &format!("{name}.layer{l}.ffn_norm"), d),
                    ffn: FeedForward::new(store, rng, &format!("{name}.layer{l}.ffn"), d, 4 * d, d),
                })
                .collect(),
        };
        let gate = Linear::new(store, rng, &format!("{name}.gate"), d, d);
        Ok(ConditionalGenerator {
            target,
            queries,
            layers,
            decoder,
            gate,
        })
    }

    pub fn generate(&self, tape: &mut Tape, store: &ParamStore, context: Var) -> Result<Generated> {
        let q = store.var(tape, self.queries);
        let mut hidden = q;
        for (l, layer) in self.layers.iter().enumerate() {
            match self.decoder.get(l) {
                None => hidden = layer.forward(tape, store, hidden, context)?.output,
                Some(parts) => {
                    let h = parts.attn_norm.forward(tape, store, hidden)?;
                    let a = layer.forward(tape, store, h, context)?.output;
                    hidden = tape.add(hidden, a)?;
                    let h = parts.ffn_norm.forward(tape, store, hidden)?;
                    let f = parts.ffn.forward(tape, store, h)?;
                    hidden = tape.add(hidden, f)?;
                }
            }
        }
        let g = self.gate.forward(tape, store, hidden)?;
        let g = tape.sigmoid(g);
        let tokens = tape.mul(g, hidden)?;
        Ok(Generated { tokens, hidden })
    }
}

/// Row-concatenation of every non-target block in catalog order.
pub fn build_context(tape: &mut Tape, tokens: &TokenSet, target: usize) -> Result<Var> {
    let mut parts = Vec::with_capacity(tokens.blocks.len());
    for (m, b) in tokens.blocks.iter().enumerate() {
        if m == target {
            continue;
        }
        match b {
            Some(v) => parts.push(*v),
            None => {
                return Err(CerdError::Contract(format!(
                    "context for modality {target} requires modality {m}, which is unresolved"
                )))
            }
        }
    }
    if parts.is_empty() {
        return Err(CerdError::Contract(format!(
            "context for modality {target} is empty"
        )));
    }
    tape.concat(&parts, 0)
}

/// Concatenation of the blocks whose provenance is in `allowed`, excluding `target`.
pub fn context_from(
    tape: &mut Tape,
    tokens: &TokenSet,
    target: usize,
    allowed: &[Provenance],
) -> Result<(Var, Vec<usize>)> {
    let used: Vec<usize> = (0..tokens.blocks.len())
        .filter(|&m| m != target && allowed.contains(&tokens.provenance[m]))
        .collect();
    if used.is_empty() {
        return Err(CerdError::Contract(format!(
            "no conditioning modality available for modality {target}"
        )));
    }
    let parts: Vec<Var> = used.iter().map(|&m| tokens.blocks[m].unwrap()).collect();
    Ok((tape.concat(&parts, 0)?, used))
}

pub fn reconstruction_loss(
    tape: &mut Tape,
    predicted: Var,
    target: Var,
    norm: ReconstructionNorm,
) -> Result<Var> {
    let diff = tape.sub(predicted, target)?;
    let e = match norm {
        ReconstructionNorm::Mse => tape.mul(diff, diff)?,
        ReconstructionNorm::L1 => tape.abs(diff),
    };
    Ok(tape.mean_all(e))
}

/// Record of one generator invocation: target and the modalities it conditioned on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratorCall {
    pub target: usize,
    pub context: Vec<usize>,
}

/// Fills every gap with its generator's reconstruction.
///
/// By default each generator conditions only on genuinely observed modalities;
/// with `sequential` set, gaps are filled in catalog order and later generators
/// also see earlier reconstructions.
pub fn complete_subject(
    tape: &mut Tape,
    store: &ParamStore,
    mut tokens: TokenSet,
    generators: &[ConditionalGenerator],
    sequential: bool,
    calls: &mut Vec<GeneratorCall>,
) -> Result<TokenSet> {
    if !tokens.provenance.contains(&Provenance::Observed) {
        return Err(CerdError::Contract(
            "cannot complete a subject with no observed modality".into(),
        ));
    }
    let allowed: &[Provenance] = if sequential {
        &[Provenance::Observed, Provenance::Reconstructed]
    } else {
        &[Provenance::Observed]
    };
    for m in tokens.gaps() {
        let (context, used) = context_from(tape, &tokens, m, allowed)?;
        let z = generators[m].generate(tape, store, context)?.tokens;
        calls.push(GeneratorCall {
            target: m,
            context: used,
        });
        tokens.fill(m, z, Provenance::Reconstructed);
    }
    Ok(tokens)
}

/// Mean reconstruction loss over the plan's (subject, modality) pairs.
///
/// The context is every other observed modality of the subject. Targets are
/// detached: the loss trains generators and, through the context, the
/// tokenizers of the conditioning modalities, never the target's tokenizer.
pub fn masked_reconstruction(
    tape: &mut Tape,
    store: &ParamStore,
    generators: &[ConditionalGenerator],
    token_sets: &[TokenSet],
    plan: &MaskingPlan,
    norm: ReconstructionNorm,
) -> Result<Option<Var>> {
    if plan.targets.is_empty() {
        return Ok(None);
    }
    let mut losses = Vec::with_capacity(plan.targets.len());
    for &(s, m) in &plan.targets {
        let set = &token_sets[s];
        if set.provenance[m] != Provenance::Observed {
            return Err(CerdError::Contract(format!(
                "masked reconstruction target {m} is not observed at batch position {s}"
            )));
        }
        let (context, _) = context_from(tape, set, m, &[Provenance::Observed])?;
        let pred = generators[m].generate(tape, store, context)?.tokens;
        let target = tape.detach(set.blocks[m].unwrap());
        let l = reconstruction_loss(tape, pred, target, norm)?;
        losses.push(tape.reshape(l, &[1])?);
    }
    let all = tape.concat(&losses, 0)?;
    Ok(Some(tape.mean(all, 0)?))
}
