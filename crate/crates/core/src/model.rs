//! The assembled classifier: tokenizers, gap completion, encoder, fusion and head.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::cer::{complete_subject, masked_reconstruction, ConditionalGenerator, GeneratorCall, MaskingPlan};
use crate::config::{Backbone, Completion, HeadKind, TrainConfig};
use crate::error::{CerdError, Result};
use crate::evidence::{Attribution, EvidenceHead, EvidenceReport, PlainHead};
use crate::moe::{encode_tokens, expert_mix, pool_blocks, routing_vector, select_topk, split_blocks, Expert, Router, RoutingDecision};
use crate::nn::{normal_init, EncoderBlock, FeedForward, Linear, ParamId, ParamStore, EMBED_INIT_STD};
use crate::tensor::Tensor;
use crate::tokenize::{tokenize_subject, ModalityCatalog, Provenance, Standardizer, SubjectView, TokenSet, Tokenizer};

pub const FFN_MULT: usize = 4;

#[derive(Clone, Debug)]
pub enum Fusion {
    Moe { router: Router, experts: Vec<Expert> },
    Shared(FeedForward),
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Head {
    Evidence(EvidenceHead),
    Plain(PlainHead),
}

#[derive(Clone, Debug)]
pub struct CerdModel {
    pub config: TrainConfig,
    pub catalog: ModalityCatalog,
    pub classes: usize,
    pub store: ParamStore,
    pub standardizer: Standardizer,
    pub tokenizers: Vec<Tokenizer>,
    pub generators: Vec<ConditionalGenerator>,
    pub static_fill: Vec<ParamId>,
    pub encoder: Vec<EncoderBlock>,
    pub fusion: Fusion,
    pub head: Head,
}

/// Test probes applied during a forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Adds seeded noise to the encoded blocks of modalities that were not observed.
    pub corrupt_reconstructed: Option<u64>,
}

pub struct SubjectOutput {
    pub logits: Var,
    /// Fused per-modality features `[M×D]`.
    pub features: Var,
    pub attribution: Option<Attribution>,
    pub gate: Option<Var>,
    pub decision: Option<RoutingDecision>,
    pub executed: Vec<usize>,
    pub calls: Vec<GeneratorCall>,
    pub completed: TokenSet,
}

const COMPLETION_STREAM: u64 = 0xc0_4d_e7_10;

impl CerdModel {
    pub fn new(config: TrainConfig, names: Vec<String>, dims: Vec<usize>, classes: usize) -> Result<Self> {
        config.validate()?;
        if classes < 2 {
            return Err(CerdError::Configuration(format!("need at least 2 classes, got {classes}")));
        }
        let catalog = ModalityCatalog::new(names, dims, config.tokens, config.hidden)?;
        if config.completion == Completion::Cer && catalog.len() < 2 {
            return Err(CerdError::Configuration(
                "reconstruction needs at least two modalities".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        // Completion modules draw from their own stream, so every ablation variant
        // with the same seed starts from the same tokenizers, backbone and head.
        let mut completion_rng = ChaCha8Rng::seed_from_u64(config.seed ^ COMPLETION_STREAM);
        let mut store = ParamStore::new();
        let (d, p, m) = (config.hidden, config.tokens, catalog.len());

        let tokenizers = (0..m)
            .map(|i| Tokenizer::new(&mut store, &mut rng, &catalog, i))
            .collect();
        let generators = match config.completion {
            Completion::Cer => (0..m)
                .map(|i| {
                    ConditionalGenerator::new(&mut store, &mut completion_rng, &catalog, i, config.generator_depth, config.heads, config.generator_block)
                })
                .collect::<Result<Vec<_>>>()?,
            _ => Vec::new(),
        };
        let static_fill = match config.completion {
            Completion::StaticFill => catalog
                .names
                .iter()
                .map(|n| store.add(format!("static_fill.{n}"), normal_init(&mut completion_rng, &[p, d], EMBED_INIT_STD)))
                .collect(),
            _ => Vec::new(),
        };
        let encoder = (0..config.encoder_depth)
            .map(|l| {
                EncoderBlock::new(&mut store, &mut rng, &format!("encoder.block{l}"), d, config.heads, FFN_MULT, config.dropout)
            })
            .collect::<Result<Vec<_>>>()?;
        let fusion = match config.backbone {
            Backbone::Moe => Fusion::Moe {
                router: Router::new(
                    &mut store,
                    &mut rng,
                    d,
                    config.experts,
                    config.routing_temperature,
                    config.top_k,
                    config.literal_sum,
                )?,
                experts: (0..config.experts)
                    .map(|e| Expert::new(&mut store, &mut rng, &format!("expert{e}"), d, FFN_MULT))
                    .collect(),
            },
            Backbone::SharedFfn => Fusion::Shared(FeedForward::new(&mut store, &mut rng, "shared_ffn", d, FFN_MULT * d, d)),
        };
        let head = match config.head {
            HeadKind::EvidenceDecomposition => Head::Evidence(EvidenceHead::new(
                &mut store,
                &mut rng,
                &catalog.names,
                d,
                config.heads,
                classes,
                config.attribution_temperature,
            )?),
            HeadKind::PlainLinear => Head::Plain(PlainHead {
                linear: Linear::new(&mut store, &mut rng, "head.linear", d, classes),
            }),
        };
        Ok(CerdModel {
            standardizer: Standardizer::identity(&catalog.dims),
            config,
            catalog,
            classes,
            store,
            tokenizers,
            generators,
            static_fill,
            encoder,
            fusion,
            head,
        })
    }

    pub fn num_modalities(&self) -> usize {
        self.catalog.len()
    }

    /// Scalar parameter counts grouped by top-level component name.
    pub fn parameter_inventory(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for p in self.store.iter() {
            let group = p.name.split('.').next().unwrap_or("").to_string();
            let group = if group.starts_with("expert") { "experts".to_string() } else { group };
            *out.entry(group).or_insert(0) += p.value.numel();
        }
        out
    }

    /// Errors unless `names`/`dims` match the catalog the model was built for.
    pub fn check_compatible(&self, names: &[String], dims: &[usize]) -> Result<()> {
        if names != self.catalog.names.as_slice() || dims != self.catalog.dims.as_slice() {
            return Err(CerdError::Compatibility(format!(
                "model expects modalities {:?} with dims {:?}, data provides {:?} with dims {:?}",
                self.catalog.names, self.catalog.dims, names, dims
            )));
        }
        Ok(())
    }

    pub fn tokenize(&self, tape: &mut Tape, subject: &SubjectView<'_>) -> Result<TokenSet> {
        tokenize_subject(tape, &self.store, &self.tokenizers, &self.standardizer, subject)
    }

    /// Fills every gap according to the configured completion strategy.
    pub fn complete(&self, tape: &mut Tape, tokens: TokenSet, calls: &mut Vec<GeneratorCall>) -> Result<TokenSet> {
        match self.config.completion {
            Completion::Cer => {
                let mut done = complete_subject(
                    tape,
                    &self.store,
                    tokens,
                    &self.generators,
                    self.config.sequential_completion,
                    calls,
                )?;
                if self.config.detach_completion {
                    for m in 0..done.blocks.len() {
                        if let (Some(b), Provenance::Reconstructed) = (done.blocks[m], done.provenance[m]) {
                            done.blocks[m] = Some(tape.detach(b));
                        }
                    }
                }
                Ok(done)
            }
            Completion::StaticFill => {
                let mut tokens = tokens;
                for m in tokens.gaps() {
                    let v = self.store.var(tape, self.static_fill[m]);
                    tokens.fill(m, v, Provenance::StaticFilled);
                }
                Ok(tokens)
            }
            Completion::ZeroFill => {
                let mut tokens = tokens;
                for m in tokens.gaps() {
                    let v = tape.constant(Tensor::zeros(&[self.config.tokens, self.config.hidden]));
                    tokens.fill(m, v, Provenance::ZeroFilled);
                }
                Ok(tokens)
            }
        }
    }

    pub fn forward_tokens(&self, tape: &mut Tape, tokens: TokenSet, options: ForwardOptions) -> Result<SubjectOutput> {
        let mask = tokens.observed_mask();
        let mut calls = Vec::new();
        let completed = self.complete(tape, tokens, &mut calls)?;
        let encoded = encode_tokens(tape, &self.store, &self.encoder, &completed)?;
        let mut blocks = split_blocks(tape, encoded, self.num_modalities(), self.config.tokens)?;
        if let Some(seed) = options.corrupt_reconstructed {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (m, b) in blocks.iter_mut().enumerate() {
                if !mask[m] {
                    let noise = tape.constant(normal_init(&mut rng, &[self.config.tokens, self.config.hidden], 3.0));
                    *b = tape.add(*b, noise)?;
                }
            }
        }
        let pooled = pool_blocks(tape, &blocks)?;
        let mut executed = Vec::new();
        let (features, gate, decision) = match &self.fusion {
            Fusion::Moe { router, experts } => {
                let v = routing_vector(tape, pooled, &mask)?;
                let (logits, pi) = router.gate(tape, &self.store, v)?;
                let decision = select_topk(tape.value(pi).data(), router.top_k)?;
                let w = router.mixing_weights(tape, logits, &decision)?;
                let p = expert_mix(tape, &self.store, experts, &decision, w, pooled, &mut executed)?;
                (p, Some(pi), Some(decision))
            }
            Fusion::Shared(ffn) => (ffn.forward(tape, &self.store, pooled)?, None, None),
        };
        let (logits, attribution) = match &self.head {
            Head::Evidence(h) => {
                let a = h.forward(tape, &self.store, features)?;
                (a.logits, Some(a))
            }
            Head::Plain(h) => (h.forward(tape, &self.store, features)?, None),
        };
        Ok(SubjectOutput {
            logits,
            features,
            attribution,
            gate,
            decision,
            executed,
            calls,
            completed,
        })
    }

    pub fn forward_subject(&self, tape: &mut Tape, subject: &SubjectView<'_>, options: ForwardOptions) -> Result<SubjectOutput> {
        let tokens = self.tokenize(tape, subject)?;
        self.forward_tokens(tape, tokens, options)
    }

    /// Masked reconstruction loss over the fully observed members of a batch of
    /// tokenized subjects; `None` when the batch has none or generators are absent.
    /// Whether a subject with `observed` modalities takes part in masked reconstruction.
    pub fn reconstructs_from(&self, observed: usize) -> bool {
        if self.config.partial_reconstruction {
            observed >= 2
        } else {
            observed == self.num_modalities()
        }
    }

    pub fn reconstruction_term(&self, tape: &mut Tape, token_sets: &[TokenSet], rng: &mut ChaCha8Rng) -> Result<Option<Var>> {
        if self.generators.is_empty() {
            return Ok(None);
        }
        let observed: Vec<(usize, Vec<usize>)> = token_sets
            .iter()
            .enumerate()
            .map(|(i, t)| (i, (0..t.blocks.len()).filter(|&m| t.provenance[m] == Provenance::Observed).collect::<Vec<_>>()))
            .filter(|(_, ms)| self.reconstructs_from(ms.len()))
            .collect();
        let candidates: Vec<(usize, &[usize])> = observed.iter().map(|(i, ms)| (*i, ms.as_slice())).collect();
        let plan = MaskingPlan::sample_among(&candidates, self.config.masking, rng);
        masked_reconstruction(tape, &self.store, &self.generators, token_sets, &plan, self.config.rec_norm)
    }

    /// Class probabilities for one subject (evaluation mode).
    pub fn predict(&self, subject: &SubjectView<'_>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.forward_subject(&mut tape, subject, ForwardOptions::default())?;
        crate::autograd::softmax(tape.value(out.logits).data(), 1.0)
    }

    /// Additive evidence report for one subject; `None` for the plain head.
    pub fn evidence_report(&self, subject: &SubjectView<'_>) -> Result<Option<EvidenceReport>> {
        let mut tape = Tape::new();
        let out = self.forward_subject(&mut tape, subject, ForwardOptions::default())?;
        Ok(out
            .attribution
            .as_ref()
            .map(|a| EvidenceReport::from_tape(&tape, a, subject.id, &self.catalog.names)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    fn model(completion: Completion, head: HeadKind, backbone: Backbone) -> CerdModel {
        let config = TrainConfig {
            completion,
            head,
            backbone,
            dropout: 0.0,
            ..TrainConfig::tiny()
        };
        CerdModel::new(config, vec!["a".into(), "b".into(), "c".into()], vec![3, 4, 2], 3).unwrap()
    }

    fn rows() -> Vec<Vec<f64>> {
        vec![vec![0.1, -0.4, 1.2], vec![0.3, 0.0, -1.0, 2.0], vec![f64::NAN, f64::NAN]]
    }

    #[test]
    fn completion_variants_share_the_remaining_initialization() {
        let base = model(Completion::ZeroFill, HeadKind::EvidenceDecomposition, Backbone::Moe);
        for completion in [Completion::Cer, Completion::StaticFill] {
            let other = model(completion, HeadKind::EvidenceDecomposition, Backbone::Moe);
            for p in base.store.iter() {
                let id = other.store.find(&p.name).unwrap();
                assert_eq!(other.store.value(id), &p.value, "{}", p.name);
            }
        }
    }

    #[test]
    fn every_variant_runs_and_inventory_reflects_variant() {
        let r = rows();
        let mask = [true, true, false];
        for completion in [Completion::Cer, Completion::StaticFill, Completion::ZeroFill] {
            for head in [HeadKind::EvidenceDecomposition, HeadKind::PlainLinear] {
                for backbone in [Backbone::Moe, Backbone::SharedFfn] {
                    let m = model(completion, head, backbone);
                    let s = SubjectView {
                        id: "s",
                        features: r.iter().map(Vec::as_slice).collect(),
                        mask: &mask,
                        label: 0,
                    };
                    let p = m.predict(&s).unwrap();
                    assert_eq!(p.len(), 3);
                    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    let inv = m.parameter_inventory();
                    assert_eq!(inv.contains_key("generator"), completion == Completion::Cer);
                    assert_eq!(inv.contains_key("static_fill"), completion == Completion::StaticFill);
                    assert_eq!(inv.contains_key("experts"), backbone == Backbone::Moe);
                    assert_eq!(m.evidence_report(&s).unwrap().is_some(), head == HeadKind::EvidenceDecomposition);
                }
            }
        }
    }

    #[test]
    fn exactly_k_experts_and_one_generator_call() {
        let m = model(Completion::Cer, HeadKind::EvidenceDecomposition, Backbone::Moe);
        let r = rows();
        let mask = [true, true, false];
        let s = SubjectView {
            id: "s",
            features: r.iter().map(Vec::as_slice).collect(),
            mask: &mask,
            label: 0,
        };
        let mut t = Tape::new();
        let out = m.forward_subject(&mut t, &s, ForwardOptions::default()).unwrap();
        assert_eq!(out.executed.len(), 2);
        assert_eq!(out.calls.len(), 1);
        assert_eq!(out.calls[0].target, 2);
        assert_eq!(out.completed.provenance[2], Provenance::Reconstructed);
    }

    #[test]
    fn compatibility_guard() {
        let m = model(Completion::Cer, HeadKind::EvidenceDecomposition, Backbone::Moe);
        assert!(m.check_compatible(&m.catalog.names.clone(), &[3, 4, 2]).is_ok());
        assert!(matches!(
            m.check_compatible(&["a".into(), "b".into()], &[3, 4]),
            Err(CerdError::Compatibility(_))
        ));
    }
}
