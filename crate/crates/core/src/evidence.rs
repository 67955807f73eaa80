//! Evidence decomposition head.
//!
//! Fused modality features are refined jointly, split into a shared summary
//! and per-modality residual cues, and mapped to logits additively:
//! `logits = f_S(s) + Σ_m w_m f_m(u_m)`. Every report carries the exact terms
//! of that sum.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{CerdError, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamStore};
use crate::tensor::Tensor;

/// Largest tolerated `|logits - shared - Σ contributions|` entry.
pub const ADDITIVE_TOLERANCE: f64 = 1e-9;

/// Self-attention block with a residual connection over the modality sequence.
#[derive(Clone, Debug)]
pub struct Extractor {
    pub norm: LayerNorm,
    pub attention: MultiHeadAttention,
}

impl Extractor {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, p: Var) -> Result<Var> {
        let h = self.norm.forward(tape, store, p)?;
        let a = self.attention.forward(tape, store, h, h)?.output;
        tape.add(p, a)
    }

    /// Zeroes the attention output so the extractor is the identity.
    pub fn make_identity(&self, store: &mut ParamStore) {
        self.attention.output.zero(store);
    }
}

#[derive(Clone, Debug)]
pub struct EvidenceHead {
    pub extractor: Extractor,
    pub residual_proj: Vec<Linear>,
    pub shared_head: Linear,
    pub modality_heads: Vec<Linear>,
    pub weight_gate: FeedForward,
    pub temperature: f64,
}

/// Tape handles of one subject's decomposition.
pub struct Decomposition {
    pub refined: Var,
    pub shared: Var,
    pub private: Vec<Var>,
}

pub struct Attribution {
    pub logits: Var,
    pub shared_contribution: Var,
    /// `[M×C]`, row m = `w_m f_m(u_m)`.
    pub contributions: Var,
    pub weights: Var,
}

impl EvidenceHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        modality_names: &[String],
        dim: usize,
        heads: usize,
        classes: usize,
        temperature: f64,
    ) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(CerdError::Parameter(format!(
                "attribution temperature must be positive, got {temperature}"
            )));
        }
        let m = modality_names.len();
        Ok(EvidenceHead {
            extractor: Extractor {
                norm: LayerNorm::new(store, "head.extractor.norm", dim),
                attention: MultiHeadAttention::new(store, rng, "head.extractor.attn", dim, heads)?,
            },
            residual_proj: modality_names
                .iter()
                .map(|n| Linear::new(store, rng, &format!("head.residual.{n}"), dim, dim))
                .collect(),
            shared_head: Linear::new(store, rng, "head.shared", dim, classes),
            modality_heads: modality_names
                .iter()
                .map(|n| Linear::new(store, rng, &format!("head.modality.{n}"), dim, classes))
                .collect(),
            weight_gate: FeedForward::new(store, rng, "head.weight_gate", m * dim, dim, m),
            temperature,
        })
    }

    pub fn num_modalities(&self) -> usize {
        self.residual_proj.len()
    }

    /// Refines the `[M×D]` feature sequence, pools the shared summary and
    /// projects each modality's residual.
    pub fn decompose(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Result<Decomposition> {
        let (m, _) = tape.value(features).dims2()?;
        if m != self.num_modalities() {
            return Err(CerdError::Contract(format!(
                "expected {} modality feature rows, got {m}",
                self.num_modalities()
            )));
        }
        let refined = self.extractor.forward(tape, store, features)?;
        let shared = tape.mean(refined, 0)?;
        let neg = tape.scale(shared, -1.0);
        let residual = tape.add_row(refined, neg)?;
        let private = (0..m)
            .map(|i| {
                let r = tape.row(residual, i)?;
                self.residual_proj[i].forward(tape, store, r)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Decomposition {
            refined,
            shared,
            private,
        })
    }

    /// Attribution weights `softmax(MLP(concat u) / τ)`.
    pub fn modality_weights(&self, tape: &mut Tape, store: &ParamStore, private: &[Var]) -> Result<Var> {
        let cat = tape.concat(private, 0)?;
        let scores = self.weight_gate.forward(tape, store, cat)?;
        tape.softmax(scores, self.temperature)
    }

    pub fn attribute(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        shared: Var,
        private: &[Var],
        weights: Var,
    ) -> Result<Attribution> {
        let shared_contribution = self.shared_head.forward(tape, store, shared)?;
        let c = tape.shape(shared_contribution)[0];
        let rows = private
            .iter()
            .zip(&self.modality_heads)
            .map(|(&u, head)| {
                let y = head.forward(tape, store, u)?;
                tape.reshape(y, &[1, c])
            })
            .collect::<Result<Vec<_>>>()?;
        let per_modality = tape.concat(&rows, 0)?;
        let contributions = tape.scale_rows(per_modality, weights)?;
        let summed = tape.sum(contributions, 0)?;
        let logits = tape.add(shared_contribution, summed)?;
        Ok(Attribution {
            logits,
            shared_contribution,
            contributions,
            weights,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Result<Attribution> {
        let dec = self.decompose(tape, store, features)?;
        let w = self.modality_weights(tape, store, &dec.private)?;
        self.attribute(tape, store, dec.shared, &dec.private, w)
    }
}

/// Per-subject additive explanation of the logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceReport {
    pub subject_id: String,
    pub logits: Vec<f64>,
    pub shared: Vec<f64>,
    pub contributions: BTreeMap<String, Vec<f64>>,
    pub weights: BTreeMap<String, f64>,
    pub predicted_class: usize,
    /// Catalog order of the modality keys.
    #[serde(skip)]
    pub modality_order: Vec<String>,
}

/// Index of the largest entry, ties to the lower index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

impl EvidenceReport {
    pub fn from_tape(
        tape: &Tape,
        attribution: &Attribution,
        subject_id: &str,
        modality_names: &[String],
    ) -> Self {
        let logits = tape.value(attribution.logits).data().to_vec();
        let contrib = tape.value(attribution.contributions);
        let weights = tape.value(attribution.weights).data();
        EvidenceReport {
            subject_id: subject_id.to_string(),
            predicted_class: argmax(&logits),
            logits,
            shared: tape.value(attribution.shared_contribution).data().to_vec(),
            contributions: modality_names
                .iter()
                .enumerate()
                .map(|(m, n)| (n.clone(), contrib.row(m).to_vec()))
                .collect(),
            weights: modality_names
                .iter()
                .zip(weights)
                .map(|(n, &w)| (n.clone(), w))
                .collect(),
            modality_order: modality_names.to_vec(),
        }
    }

    /// Largest entry of `|logits - shared - Σ_m c_m|`.
    pub fn additive_residual(&self) -> f64 {
        (0..self.logits.len())
            .map(|c| {
                let total: f64 = self.shared[c] + self.contributions.values().map(|v| v[c]).sum::<f64>();
                (self.logits[c] - total).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn verify(&self) -> Result<()> {
        let r = self.additive_residual();
        let wsum: f64 = self.weights.values().sum();
        if !(r < ADDITIVE_TOLERANCE) || !((wsum - 1.0).abs() < ADDITIVE_TOLERANCE) {
            return Err(CerdError::Consistency(format!(
                "subject {}: additive residual {r:e}, weight sum {wsum}",
                self.subject_id
            )));
        }
        Ok(())
    }

    fn ordered_names(&self) -> Vec<String> {
        if self.modality_order.is_empty() {
            self.weights.keys().cloned().collect()
        } else {
            self.modality_order.clone()
        }
    }
}

/// One row of the modality-importance table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub modality: String,
    pub mean_weight: f64,
    pub mean_abs_contribution: f64,
    pub class_means: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceSummary {
    pub classes: Vec<String>,
    pub subjects: usize,
    pub rows: Vec<ImportanceRow>,
}

impl ImportanceSummary {
    /// Modality with the largest mean |contribution| (ties to catalog order).
    pub fn top_modality(&self) -> &str {
        let scores: Vec<f64> = self.rows.iter().map(|r| r.mean_abs_contribution).collect();
        &self.rows[argmax(&scores)].modality
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![
            "modality".to_string(),
            "mean_weight".to_string(),
            "mean_abs_contribution".to_string(),
        ];
        header.extend(self.classes.iter().map(|c| format!("mean_contribution_{c}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.modality.clone(),
                r.mean_weight.to_string(),
                r.mean_abs_contribution.to_string(),
            ];
            rec.extend(r.class_means.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| CerdError::Consistency(format!("csv buffer: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Averages weights, L1 contribution norms and signed per-class contributions.
pub fn importance_summary(reports: &[EvidenceReport], classes: &[String]) -> Result<ImportanceSummary> {
    let first = reports
        .first()
        .ok_or_else(|| CerdError::Contract("importance summary of an empty split".into()))?;
    let names = first.ordered_names();
    let n = reports.len() as f64;
    let rows = names
        .iter()
        .map(|name| {
            let mut mean_weight = 0.0;
            let mut mean_abs = 0.0;
            let mut class_means = vec![0.0; classes.len()];
            for r in reports {
                mean_weight += r.weights[name];
                let c = &r.contributions[name];
                mean_abs += c.iter().map(|v| v.abs()).sum::<f64>();
                class_means.iter_mut().zip(c).for_each(|(a, b)| *a += b);
            }
            class_means.iter_mut().for_each(|v| *v /= n);
            ImportanceRow {
                modality: name.clone(),
                mean_weight: mean_weight / n,
                mean_abs_contribution: mean_abs / n,
                class_means,
            }
        })
        .collect();
    Ok(ImportanceSummary {
        classes: classes.to_vec(),
        subjects: reports.len(),
        rows,
    })
}

/// The ablated head: one linear layer on the mean of the fused modality features.
#[derive(Clone, Debug)]
pub struct PlainHead {
    pub linear: Linear,
}

impl PlainHead {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Result<Var> {
        let pooled = tape.mean(features, 0)?;
        self.linear.forward(tape, store, pooled)
    }
}

/// Convenience for tests: builds a constant `[M×D]` feature matrix.
pub fn feature_matrix(tape: &mut Tape, rows: &[Vec<f64>]) -> Result<Var> {
    Ok(tape.constant(Tensor::from_rows(rows)?))
}
