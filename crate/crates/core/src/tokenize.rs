//! Modality tokenization into the shared `P×D` token space, and the
//! availability bookkeeping that travels with the tokens.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{CerdError, Result};
use crate::nn::{normal_init, Linear, ParamId, ParamStore, EMBED_INIT_STD};
use crate::tensor::Tensor;

/// Ordered modality set together with the token geometry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityCatalog {
    pub names: Vec<String>,
    pub dims: Vec<usize>,
    pub tokens: usize,
    pub hidden: usize,
}

impl ModalityCatalog {
    pub fn new(names: Vec<String>, dims: Vec<usize>, tokens: usize, hidden: usize) -> Result<Self> {
        let catalog = ModalityCatalog {
            names,
            dims,
            tokens,
            hidden,
        };
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn validate(&self) -> Result<()> {
        if self.names.is_empty() || self.names.len() != self.dims.len() {
            return Err(CerdError::Configuration(format!(
                "catalog needs one dimension per modality ({} names, {} dims)",
                self.names.len(),
                self.dims.len()
            )));
        }
        for (i, n) in self.names.iter().enumerate() {
            if self.names[..i].contains(n) {
                return Err(CerdError::Configuration(format!("duplicate modality name `{n}`")));
            }
        }
        if self.tokens == 0 || self.hidden == 0 || self.dims.contains(&0) {
            return Err(CerdError::Configuration(
                "token count, hidden size and modality dimensions must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Per-feature standardization statistics, estimated on observed training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
}

impl Standardizer {
    pub fn identity(dims: &[usize]) -> Self {
        Standardizer {
            mean: dims.iter().map(|&d| vec![0.0; d]).collect(),
            std: dims.iter().map(|&d| vec![1.0; d]).collect(),
        }
    }

    /// Fits statistics from the given rows of each modality (rows must be observed).
    pub fn fit<'a>(dims: &[usize], rows: impl Fn(usize) -> Vec<&'a [f64]>) -> Self {
        let mut mean = Vec::with_capacity(dims.len());
        let mut std = Vec::with_capacity(dims.len());
        for (m, &d) in dims.iter().enumerate() {
            let rs = rows(m);
            let n = rs.len() as f64;
            let mut mu = vec![0.0; d];
            let mut sd = vec![1.0; d];
            if !rs.is_empty() {
                for r in &rs {
                    mu.iter_mut().zip(*r).for_each(|(a, b)| *a += b / n);
                }
                for (j, s) in sd.iter_mut().enumerate() {
                    let var = rs.iter().map(|r| (r[j] - mu[j]).powi(2)).sum::<f64>() / n;
                    *s = if var > 1e-24 { var.sqrt() } else { 1.0 };
                }
            }
            mean.push(mu);
            std.push(sd);
        }
        Standardizer { mean, std }
    }

    pub fn apply(&self, modality: usize, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean[modality])
            .zip(&self.std[modality])
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

/// How a modality's tokens came to exist for one subject.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Observed,
    Reconstructed,
    StaticFilled,
    ZeroFilled,
    Pending,
}

/// One subject's token blocks (each `P×D`), with explicit gaps for missing modalities.
#[derive(Clone, Debug)]
pub struct TokenSet {
    pub blocks: Vec<Option<Var>>,
    pub provenance: Vec<Provenance>,
}

impl TokenSet {
    pub fn observed_mask(&self) -> Vec<bool> {
        self.provenance
            .iter()
            .map(|p| *p == Provenance::Observed)
            .collect()
    }

    pub fn gaps(&self) -> Vec<usize> {
        (0..self.blocks.len())
            .filter(|&m| self.blocks[m].is_none())
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.blocks.iter().all(Option::is_some)
    }

    pub fn fill(&mut self, m: usize, tokens: Var, provenance: Provenance) {
        self.blocks[m] = Some(tokens);
        self.provenance[m] = provenance;
    }

    /// Every block, in catalog order; errors if any gap remains.
    pub fn complete_blocks(&self) -> Result<Vec<Var>> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(m, b)| {
                b.ok_or_else(|| {
                    CerdError::Contract(format!("modality {m} still has no tokens"))
                })
            })
            .collect()
    }
}

/// Borrowed view of one subject: raw features (sentinel rows for missing modalities),
/// availability mask and label.
#[derive(Clone, Debug)]
pub struct SubjectView<'a> {
    pub id: &'a str,
    pub features: Vec<&'a [f64]>,
    pub mask: &'a [bool],
    pub label: usize,
}

impl SubjectView<'_> {
    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&o| o).count()
    }

    pub fn is_full(&self) -> bool {
        self.mask.iter().all(|&o| o)
    }
}

/// A group of subjects processed together.
#[derive(Clone, Debug, Default)]
pub struct SubjectBatch<'a> {
    pub subjects: Vec<SubjectView<'a>>,
}

impl<'a> SubjectBatch<'a> {
    pub fn new(subjects: Vec<SubjectView<'a>>) -> Self {
        SubjectBatch { subjects }
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.subjects.iter().map(|s| s.label).collect()
    }

    pub fn mask_sum(&self) -> usize {
        self.subjects.iter().map(SubjectView::observed_count).sum()
    }
}

/// Modality-specific tokenizer: affine `d_m → P·D`, reshape, plus a type embedding.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub modality: usize,
    pub proj: Linear,
    pub type_embedding: ParamId,
    pub tokens: usize,
    pub hidden: usize,
}

impl Tokenizer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        catalog: &ModalityCatalog,
        modality: usize,
    ) -> Self {
        let name = format!("tokenizer.{}", catalog.names[modality]);
        let (p, d) = (catalog.tokens, catalog.hidden);
        let proj = Linear::new(store, rng, &format!("{name}.proj"), catalog.dims[modality], p * d);
        let type_embedding = store.add(
            format!("{name}.type_embedding"),
            normal_init(rng, &[d], EMBED_INIT_STD),
        );
        Tokenizer {
            modality,
            proj,
            type_embedding,
            tokens: p,
            hidden: d,
        }
    }

    /// Tokens `[P×D]` for one observed (already standardized) feature row.
    pub fn tokenize(&self, tape: &mut Tape, store: &ParamStore, x: &[f64]) -> Result<Var> {
        if x.iter().any(|v| v.is_nan()) {
            return Err(CerdError::DataIntegrity(format!(
                "observed row of modality {} contains sentinel entries",
                self.modality
            )));
        }
        let xv = tape.constant(Tensor::vector(x.to_vec())?);
        let flat = self.proj.forward(tape, store, xv)?;
        let tokens = tape.reshape(flat, &[self.tokens, self.hidden])?;
        let emb = store.var(tape, self.type_embedding);
        tape.add_row(tokens, emb)
    }
}

/// Tokenizes every observed modality of every subject, leaving gaps marked `Pending`.
pub fn build_token_sets(
    tape: &mut Tape,
    store: &ParamStore,
    tokenizers: &[Tokenizer],
    standardizer: &Standardizer,
    batch: &SubjectBatch<'_>,
) -> Result<Vec<TokenSet>> {
    batch
        .subjects
        .iter()
        .map(|s| tokenize_subject(tape, store, tokenizers, standardizer, s))
        .collect()
}

pub fn tokenize_subject(
    tape: &mut Tape,
    store: &ParamStore,
    tokenizers: &[Tokenizer],
    standardizer: &Standardizer,
    subject: &SubjectView<'_>,
) -> Result<TokenSet> {
    if subject.mask.len() != tokenizers.len() || subject.features.len() != tokenizers.len() {
        return Err(CerdError::Dimension(format!(
            "subject {} has {} modalities, model expects {}",
            subject.id,
            subject.mask.len(),
            tokenizers.len()
        )));
    }
    if subject.observed_count() == 0 {
        return Err(CerdError::Contract(format!(
            "subject {} has no observed modality",
            subject.id
        )));
    }
    let mut set = TokenSet {
        blocks: vec![None; tokenizers.len()],
        provenance: vec![Provenance::Pending; tokenizers.len()],
    };
    for (m, tok) in tokenizers.iter().enumerate() {
        if !subject.mask[m] {
            continue;
        }
        let raw = subject.features[m];
        if raw.iter().any(|v| v.is_nan()) {
            return Err(CerdError::DataIntegrity(format!(
                "subject {} modality {m} is marked observed but contains sentinel entries",
                subject.id
            )));
        }
        let x = standardizer.apply(m, raw);
        let z = tok.tokenize(tape, store, &x)?;
        set.fill(m, z, Provenance::Observed);
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn catalog() -> ModalityCatalog {
        ModalityCatalog::new(
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            vec![3, 5, 2, 4],
            4,
            8,
        )
        .unwrap()
    }

    fn tokenizers(store: &mut ParamStore, cat: &ModalityCatalog) -> Vec<Tokenizer> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        (0..cat.len())
            .map(|m| Tokenizer::new(store, &mut rng, cat, m))
            .collect()
    }

    #[test]
    fn catalog_rejects_duplicates() {
        let err = ModalityCatalog::new(vec!["a".into(), "a".into()], vec![1, 2], 1, 1);
        assert!(matches!(err, Err(CerdError::Configuration(_))));
    }

    #[test]
    fn zero_parameters_give_zero_tokens() {
        let cat = catalog();
        let mut store = ParamStore::new();
        let toks = tokenizers(&mut store, &cat);
        toks[1].proj.zero(&mut store);
        store.fill(toks[1].type_embedding, 0.0);
        let mut t = Tape::new();
        let z = toks[1].tokenize(&mut t, &store, &[1., 2., 3., 4., 5.]).unwrap();
        assert_eq!(t.shape(z), &[4, 8]);
        assert!(t.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tokenize_matches_affine_reshape_oracle() {
        let cat = catalog();
        let mut store = ParamStore::new();
        let toks = tokenizers(&mut store, &cat);
        let x = [0.3, -1.1, 2.5, 0.7];
        let mut t = Tape::new();
        let z = toks[3].tokenize(&mut t, &store, &x).unwrap();
        let w = store.value(toks[3].proj.weight).data();
        let b = store.value(toks[3].proj.bias).data();
        let e = store.value(toks[3].type_embedding).data();
        for p in 0..4 {
            for d in 0..8 {
                let o = p * 8 + d;
                let mut v = b[o] + e[d];
                for (j, xj) in x.iter().enumerate() {
                    v += w[o * 4 + j] * xj;
                }
                assert!((t.value(z).data()[o] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gaps_follow_mask_and_sentinels_are_rejected() {
        let cat = catalog();
        let mut store = ParamStore::new();
        let toks = tokenizers(&mut store, &cat);
        let st = Standardizer::identity(&cat.dims);
        let rows: Vec<Vec<f64>> = cat.dims.iter().map(|&d| vec![0.5; d]).collect();
        let nan_rows: Vec<Vec<f64>> = cat.dims.iter().map(|&d| vec![f64::NAN; d]).collect();
        let mask = [true, false, true, false];
        let features: Vec<&[f64]> = (0..4)
            .map(|m| if mask[m] { rows[m].as_slice() } else { nan_rows[m].as_slice() })
            .collect();
        let s = SubjectView {
            id: "s1",
            features: features.clone(),
            mask: &mask,
            label: 0,
        };
        let mut t = Tape::new();
        let set = tokenize_subject(&mut t, &store, &toks, &st, &s).unwrap();
        assert_eq!(set.gaps(), vec![1, 3]);
        assert_eq!(set.observed_mask(), mask.to_vec());

        let none = [false; 4];
        let s0 = SubjectView {
            id: "lonely",
            features: features.clone(),
            mask: &none,
            label: 0,
        };
        let err = tokenize_subject(&mut t, &store, &toks, &st, &s0).unwrap_err();
        assert!(err.to_string().contains("lonely"));

        let lie = [true, true, true, false];
        let s_bad = SubjectView {
            id: "s2",
            features,
            mask: &lie,
            label: 0,
        };
        assert!(matches!(
            tokenize_subject(&mut t, &store, &toks, &st, &s_bad),
            Err(CerdError::DataIntegrity(_))
        ));
    }

    #[test]
    fn standardizer_fit_centers_rows() {
        let rows = [vec![1.0, 10.0], vec![3.0, 10.0]];
        let st = Standardizer::fit(&[2], |_| rows.iter().map(|r| r.as_slice()).collect());
        assert_eq!(st.mean[0], vec![2.0, 10.0]);
        assert_eq!(st.std[0], vec![1.0, 1.0]);
        assert_eq!(st.apply(0, &[3.0, 12.0]), vec![1.0, 2.0]);
    }
}
