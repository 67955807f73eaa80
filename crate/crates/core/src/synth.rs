//! Synthetic multimodal benchmark with planted shared and modality-specific signal.
//!
//! Each subject draws a shared latent `h` and one private latent `q_m` per
//! modality. Modality features are an affine map of `(h, q_m)` plus noise, so any
//! modality is partly predictable from the others through `h`. Labels are drawn
//! from a softmax over class scores whose variance is split between `h` and the
//! private latents according to the signal allocation.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{stratified_split, Dataset, DEFAULT_RATIOS};
use crate::error::{CerdError, Result};

/// Rejected all-missing draws tolerated per dataset before the spec is declared infeasible.
pub const MIN_REJECTION_BUDGET: usize = 1000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingnessPattern {
    /// Each (subject, modality) is missing independently with probability `ρ_m`.
    #[default]
    Independent,
    /// One uniform draw per subject; modality `m` is missing when it falls below `ρ_m`,
    /// giving nested, phase-like availability patterns.
    Block,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub subjects: usize,
    pub classes: usize,
    pub modalities: Vec<String>,
    pub dims: Vec<usize>,
    pub shared_latent: usize,
    pub private_latents: Vec<usize>,
    pub missing_rates: Vec<f64>,
    pub pattern: MissingnessPattern,
    /// Fraction of class-score variance carried by the shared latent.
    pub shared_signal: f64,
    /// Fraction carried by each modality's private latent.
    pub private_signal: Vec<f64>,
    /// Standard deviation of the class scores.
    pub signal_strength: f64,
    /// Scale of the private latent relative to the shared one in the features.
    pub private_scale: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            subjects: 1200,
            classes: 3,
            modalities: ["image", "genetic", "clinical", "biospecimen"].map(String::from).to_vec(),
            dims: vec![24, 40, 18, 32],
            shared_latent: 8,
            private_latents: vec![4; 4],
            missing_rates: vec![0.5; 4],
            pattern: MissingnessPattern::Independent,
            shared_signal: 0.4,
            private_signal: vec![0.15; 4],
            signal_strength: 3.0,
            private_scale: 0.3,
            noise: 0.3,
            seed: 0,
        }
    }
}

/// Ground-truth share of label signal per source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedImportance {
    pub shared: f64,
    pub modalities: BTreeMap<String, f64>,
    /// Modality with the largest private share (ties to catalog order).
    pub top_modality: String,
}

impl SyntheticSpec {
    /// Signal allocation `shared / A / rest`, with the remainder split evenly over the other modalities.
    pub fn with_allocation(mut self, shared: f64, top: usize, top_share: f64) -> Self {
        let m = self.modalities.len();
        let rest = (1.0 - shared - top_share) / (m - 1) as f64;
        self.shared_signal = shared;
        self.private_signal = (0..m).map(|i| if i == top { top_share } else { rest }).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.modalities.len();
        if m == 0 {
            return Err(CerdError::Configuration("at least one modality is required".into()));
        }
        if self.subjects < 20 {
            return Err(CerdError::Configuration(format!("need at least 20 subjects, got {}", self.subjects)));
        }
        if self.classes < 2 {
            return Err(CerdError::Configuration("need at least 2 classes".into()));
        }
        for (what, len) in [
            ("dims", self.dims.len()),
            ("private_latents", self.private_latents.len()),
            ("missing_rates", self.missing_rates.len()),
            ("private_signal", self.private_signal.len()),
        ] {
            if len != m {
                return Err(CerdError::Configuration(format!("{what} has {len} entries for {m} modalities")));
            }
        }
        if self.dims.contains(&0) || self.shared_latent == 0 || self.private_latents.contains(&0) {
            return Err(CerdError::Configuration("dimensions must be positive".into()));
        }
        if self.missing_rates.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(CerdError::Configuration("missing rates must lie in [0, 1)".into()));
        }
        let fractions = std::iter::once(self.shared_signal).chain(self.private_signal.iter().copied());
        let mut total = 0.0;
        for f in fractions {
            if !(f >= 0.0) {
                return Err(CerdError::Configuration("signal fractions must be non-negative".into()));
            }
            total += f;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(CerdError::Configuration(format!("signal fractions sum to {total}, not 1")));
        }
        if !(self.signal_strength >= 0.0) || !(self.noise >= 0.0) || !(self.private_scale >= 0.0) {
            return Err(CerdError::Configuration("scales must be non-negative".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if !self.modalities.iter().all(|n| seen.insert(n)) {
            return Err(CerdError::Configuration("modality names must be unique".into()));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.classes).map(|c| format!("class_{c}")).collect()
    }
}

pub fn planted_importance(spec: &SyntheticSpec) -> Result<PlantedImportance> {
    spec.validate()?;
    let mut top = 0;
    for (i, &f) in spec.private_signal.iter().enumerate() {
        if f > spec.private_signal[top] {
            top = i;
        }
    }
    Ok(PlantedImportance {
        shared: spec.shared_signal,
        modalities: spec
            .modalities
            .iter()
            .cloned()
            .zip(spec.private_signal.iter().copied())
            .collect(),
        top_modality: spec.modalities[top].clone(),
    })
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// `y = W x` for a row-major `W`.
fn matvec(w: &[f64], x: &[f64]) -> Vec<f64> {
    w.chunks(x.len())
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Fixed generative parameters drawn once per spec.
struct Generator {
    label_shared: Vec<f64>,
    label_private: Vec<Vec<f64>>,
    load_shared: Vec<Vec<f64>>,
    load_private: Vec<Vec<f64>>,
    offsets: Vec<Vec<f64>>,
}

impl Generator {
    fn draw(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Self {
        let (c, k) = (spec.classes, spec.shared_latent);
        // Unit-variance score contributions per class from each source.
        let label_shared = gaussian(rng, c * k, (1.0 / k as f64).sqrt());
        let label_private = spec
            .private_latents
            .iter()
            .map(|&q| gaussian(rng, c * q, (1.0 / q as f64).sqrt()))
            .collect();
        let load_shared = spec
            .dims
            .iter()
            .map(|&d| gaussian(rng, d * k, (1.0 / k as f64).sqrt()))
            .collect();
        let load_private = spec
            .dims
            .iter()
            .zip(&spec.private_latents)
            .map(|(&d, &q)| gaussian(rng, d * q, spec.private_scale / (q as f64).sqrt()))
            .collect();
        let offsets = spec.dims.iter().map(|&d| gaussian(rng, d, 1.0)).collect();
        Generator {
            label_shared,
            label_private,
            load_shared,
            load_private,
            offsets,
        }
    }
}

fn sample_categorical(rng: &mut ChaCha8Rng, scores: &[f64]) -> usize {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i;
        }
        u -= wi;
    }
    w.len() - 1
}

/// Draws a dataset, including its stratified split, deterministically from the spec's seed.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let g = Generator::draw(spec, &mut rng);
    let (n, m) = (spec.subjects, spec.modalities.len());
    let mut features: Vec<Vec<f64>> = spec.dims.iter().map(|&d| Vec::with_capacity(n * d)).collect();
    let mut labels = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    let budget = MIN_REJECTION_BUDGET.max(n);
    let mut rejections = 0;
    for _ in 0..n {
        let h = gaussian(&mut rng, spec.shared_latent, 1.0);
        let q: Vec<Vec<f64>> = spec.private_latents.iter().map(|&d| gaussian(&mut rng, d, 1.0)).collect();
        let mut scores: Vec<f64> = matvec(&g.label_shared, &h)
            .into_iter()
            .map(|v| v * spec.shared_signal.sqrt())
            .collect();
        for k in 0..m {
            let s = matvec(&g.label_private[k], &q[k]);
            let f = spec.private_signal[k].sqrt();
            scores.iter_mut().zip(s).for_each(|(a, b)| *a += f * b);
        }
        scores.iter_mut().for_each(|v| *v *= spec.signal_strength);
        labels.push(sample_categorical(&mut rng, &scores));

        for k in 0..m {
            let a = matvec(&g.load_shared[k], &h);
            let b = matvec(&g.load_private[k], &q[k]);
            let e = gaussian(&mut rng, spec.dims[k], spec.noise);
            for j in 0..spec.dims[k] {
                features[k].push(g.offsets[k][j] + a[j] + b[j] + e[j]);
            }
        }

        let observed = loop {
            let o: Vec<bool> = match spec.pattern {
                MissingnessPattern::Independent => spec
                    .missing_rates
                    .iter()
                    .map(|&r| rng.random::<f64>() >= r)
                    .collect(),
                MissingnessPattern::Block => {
                    let u = rng.random::<f64>();
                    spec.missing_rates.iter().map(|&r| u >= r).collect()
                }
            };
            if o.iter().any(|&x| x) {
                break o;
            }
            rejections += 1;
            if rejections > budget {
                return Err(CerdError::Configuration(format!(
                    "missing rates {:?} leave too many subjects with no modality ({rejections} rejected draws)",
                    spec.missing_rates
                )));
            }
        };
        mask.push(observed);
    }
    for (i, o) in mask.iter().enumerate() {
        for k in 0..m {
            if !o[k] {
                let d = spec.dims[k];
                features[k][i * d..(i + 1) * d].iter_mut().for_each(|v| *v = f64::NAN);
            }
        }
    }
    let splits = stratified_split(&labels, spec.classes, DEFAULT_RATIOS, spec.seed)?;
    let ds = Dataset {
        modalities: spec.modalities.clone(),
        dims: spec.dims.clone(),
        classes: spec.class_names(),
        ids: (0..n).map(|i| format!("S{i:05}")).collect(),
        features,
        mask,
        labels,
        splits,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_valid() {
        let spec = SyntheticSpec {
            subjects: 200,
            ..SyntheticSpec::default()
        };
        let a = generate(&spec).unwrap();
        assert_eq!(a, generate(&spec).unwrap());
        assert_ne!(a, generate(&SyntheticSpec { seed: 1, ..spec.clone() }).unwrap());
        assert!(a.mask.iter().all(|o| o.iter().any(|&x| x)));
    }

    #[test]
    fn no_missingness_means_all_full() {
        let spec = SyntheticSpec {
            subjects: 100,
            missing_rates: vec![0.0; 4],
            ..SyntheticSpec::default()
        };
        let ds = generate(&spec).unwrap();
        assert_eq!(ds.full_coverage(&(0..100).collect::<Vec<_>>()).len(), 100);
    }

    #[test]
    fn infeasible_and_invalid_specs() {
        let spec = SyntheticSpec {
            missing_rates: vec![0.99; 4],
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate(&spec), Err(CerdError::Configuration(_))));
        let spec = SyntheticSpec {
            shared_signal: 0.5,
            ..SyntheticSpec::default()
        };
        assert!(matches!(spec.validate(), Err(CerdError::Configuration(_))));
        let spec = SyntheticSpec {
            subjects: 10,
            ..SyntheticSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn planted_importance_is_the_allocation() {
        let spec = SyntheticSpec::default().with_allocation(0.4, 0, 0.6);
        let p = planted_importance(&spec).unwrap();
        assert_eq!(p.shared, 0.4);
        assert_eq!(p.modalities["image"], 0.6);
        assert_eq!(p.modalities["genetic"], 0.0);
        assert_eq!(p.top_modality, "image");
        let total: f64 = p.shared + p.modalities.values().sum::<f64>();
        assert!((total - 1.0).abs() < 1e-12);
        let uniform = planted_importance(&SyntheticSpec::default()).unwrap();
        let v: Vec<f64> = uniform.modalities.values().copied().collect();
        assert!(v.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn block_pattern_is_nested() {
        let spec = SyntheticSpec {
            subjects: 300,
            missing_rates: vec![0.0, 0.2, 0.4, 0.6],
            pattern: MissingnessPattern::Block,
            ..SyntheticSpec::default()
        };
        let ds = generate(&spec).unwrap();
        for o in &ds.mask {
            for k in 1..4 {
                assert!(!o[k] || o[k - 1]);
            }
        }
    }
}
