//! Finite-difference check of the complete training objective with respect to
//! every model parameter.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::cer::{context_from, reconstruction_loss};
use crate::config::{Completion, TrainConfig};
use crate::data::Dataset;
use crate::error::{CerdError, Result};
use crate::gradcheck::{check_step, relative_error};
use crate::model::{CerdModel, ForwardOptions};
use crate::tensor::Tensor;
use crate::tokenize::Provenance;
use crate::synth::{generate, SyntheticSpec};
use crate::train::{init_model, total_loss};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleCheck {
    pub scalars: usize,
    pub max_rel_error: f64,
    /// Parameter holding the worst entry.
    pub worst: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineCheck {
    pub modules: BTreeMap<String, ModuleCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Component a parameter belongs to, for reporting.
pub fn module_of(name: &str) -> String {
    let head = name.split('.').next().unwrap_or(name);
    if head.starts_with("expert") {
        "experts".into()
    } else if head == "router" {
        "router".into()
    } else {
        head.into()
    }
}

/// Tiny three-modality dataset: one fully observed subject and one missing its last modality.
pub fn tiny_batch_data(seed: u64) -> Result<(Dataset, Vec<usize>)> {
    let spec = SyntheticSpec {
        subjects: 40,
        modalities: vec!["a".into(), "b".into(), "c".into()],
        dims: vec![5, 4, 3],
        private_latents: vec![2; 3],
        missing_rates: vec![0.0, 0.0, 0.5],
        private_signal: vec![0.2; 3],
        shared_signal: 0.4,
        seed,
        ..SyntheticSpec::default()
    };
    let data = generate(&spec)?;
    let full = data.splits.train.iter().copied().find(|&i| data.is_full(i));
    let partial = data.splits.train.iter().copied().find(|&i| !data.is_full(i));
    match (full, partial) {
        (Some(a), Some(b)) => Ok((data, vec![a, b])),
        _ => Err(CerdError::Configuration("tiny dataset lacks a full and a partial subject".into())),
    }
}

/// Values that training treats as constants, computed once at the unperturbed parameters.
#[derive(Clone, Debug)]
pub struct Frozen {
    /// Reconstruction targets of every batch member eligible for masking, per observed modality.
    pub targets: Vec<Vec<(usize, Tensor)>>,
    /// Reconstructed blocks of every batch member, empty unless completion is detached.
    pub completions: Vec<Vec<(usize, Tensor)>>,
}

pub fn freeze(model: &CerdModel, data: &Dataset, batch: &[usize]) -> Result<Frozen> {
    let mut tape = Tape::new();
    let mut frozen = Frozen {
        targets: Vec::new(),
        completions: Vec::new(),
    };
    let detached = model.config.detach_completion && model.config.completion == Completion::Cer;
    for &i in batch {
        let set = model.tokenize(&mut tape, &data.subject(i))?;
        let observed: Vec<usize> = (0..set.blocks.len())
            .filter(|&m| set.provenance[m] == Provenance::Observed)
            .collect();
        frozen.targets.push(if model.reconstructs_from(observed.len()) {
            observed
                .iter()
                .map(|&m| (m, tape.value(set.blocks[m].expect("observed block")).clone()))
                .collect()
        } else {
            Vec::new()
        });
        let mut filled = Vec::new();
        if detached {
            let gaps = set.gaps();
            let done = model.complete(&mut tape, set, &mut Vec::new())?;
            for m in gaps {
                let b = done.blocks[m].expect("completed block");
                filled.push((m, tape.value(b).clone()));
            }
        }
        frozen.completions.push(filled);
    }
    Ok(frozen)
}

/// Joint loss (classification plus weighted masked reconstruction of every
/// observed modality of every member eligible for masking) of one batch in
/// evaluation mode.
///
/// Training stops gradients at the reconstruction targets (and, when completion
/// is detached, at reconstructed blocks), so those enter here as constants
/// computed once at the unperturbed parameters.
pub fn batch_objective(model: &CerdModel, data: &Dataset, batch: &[usize], frozen: &Frozen) -> Result<(Tape, Var)> {
    let mut tape = Tape::new();
    let sets = batch
        .iter()
        .map(|&i| model.tokenize(&mut tape, &data.subject(i)))
        .collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::new();
    if !model.generators.is_empty() {
        for (set, targets) in sets.iter().zip(&frozen.targets) {
            for &(m, ref target) in targets {
                let (ctx, _) = context_from(&mut tape, set, m, &[Provenance::Observed])?;
                let pred = model.generators[m].generate(&mut tape, &model.store, ctx)?.tokens;
                let t = tape.constant(target.clone());
                let l = reconstruction_loss(&mut tape, pred, t, model.config.rec_norm)?;
                pairs.push(tape.reshape(l, &[1])?);
            }
        }
    }
    let rec = if pairs.is_empty() {
        None
    } else {
        let all = tape.concat(&pairs, 0)?;
        Some(tape.mean(all, 0)?)
    };
    let mut rows = Vec::new();
    for (set, filled) in sets.iter().zip(&frozen.completions) {
        let mut set = set.clone();
        for (m, value) in filled {
            let v = tape.constant(value.clone());
            set.fill(*m, v, Provenance::Reconstructed);
        }
        let out = model.forward_tokens(&mut tape, set, ForwardOptions::default())?;
        let c = tape.shape(out.logits)[0];
        rows.push(tape.reshape(out.logits, &[1, c])?);
    }
    let logits = tape.concat(&rows, 0)?;
    let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
    let (loss, _) = total_loss(&mut tape, logits, &labels, rec, model.config.rec_weight)?;
    Ok((tape, loss))
}

/// Compares the tape gradient of the joint loss with central differences for
/// every scalar parameter of a model built from `config`.
pub fn pipeline_gradcheck(config: &TrainConfig, step: f64, tol: f64) -> Result<PipelineCheck> {
    check_step(step)?;
    let mut config = config.clone();
    config.dropout = 0.0;
    let (data, batch) = tiny_batch_data(config.seed)?;
    let mut model = init_model(&config, &data)?;
    let frozen = freeze(&model, &data, &batch)?;

    let (mut tape, loss) = batch_objective(&model, &data, &batch, &frozen)?;
    tape.backward(loss)?;
    model.store.collect_grads(&tape);
    let analytic: Vec<Vec<f64>> = model.store.iter().map(|p| p.grad.clone()).collect();
    model.store.zero_grads();

    let mut modules: BTreeMap<String, ModuleCheck> = BTreeMap::new();
    let ids: Vec<_> = model.store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let name = model.store.get(id).name.clone();
        let n = model.store.value(id).numel();
        let entry = modules.entry(module_of(&name)).or_insert(ModuleCheck {
            scalars: 0,
            max_rel_error: 0.0,
            worst: String::new(),
        });
        for j in 0..n {
            let orig = model.store.value(id).data()[j];
            model.store.value_mut(id).data_mut()[j] = orig + step;
            let plus = {
                let (t, l) = batch_objective(&model, &data, &batch, &frozen)?;
                t.value(l).item()
            };
            model.store.value_mut(id).data_mut()[j] = orig - step;
            let minus = {
                let (t, l) = batch_objective(&model, &data, &batch, &frozen)?;
                t.value(l).item()
            };
            model.store.value_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let e = relative_error(analytic[k][j], numeric);
            if !e.is_finite() {
                return Err(CerdError::Evaluation(format!("non-finite check value for {name}[{j}]")));
            }
            if e > entry.max_rel_error {
                entry.max_rel_error = e;
                entry.worst = format!("{name}[{j}]");
            }
        }
        entry.scalars += n;
    }
    let max_rel_error = modules.values().map(|m| m.max_rel_error).fold(0.0, f64::max);
    Ok(PipelineCheck {
        modules,
        max_rel_error,
        tolerance: tol,
        passed: max_rel_error < tol,
    })
}
