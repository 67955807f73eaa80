//! Training loop, evaluation, reconstruction probes and the ablation runner.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::cer::{build_context, reconstruction_loss, ReconstructionNorm};
use crate::config::{Backbone, Completion, HeadKind, TrainConfig, WarmupMode};
use crate::data::Dataset;
use crate::error::{CerdError, Result};
use crate::metrics::{evaluate_scores, Metrics};
use crate::model::{CerdModel, ForwardOptions};
use crate::nn::ParamStore;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

/// Cross-entropy of the batch logits plus `λ·L_rec`. Returns (total, classification term).
pub fn total_loss(tape: &mut Tape, logits: Var, labels: &[usize], rec: Option<Var>, rec_weight: f64) -> Result<(Var, Var)> {
    let cls = tape.cross_entropy(logits, labels)?;
    let total = match rec {
        Some(r) if rec_weight != 0.0 => {
            let r = tape.scale(r, rec_weight);
            tape.add(cls, r)?
        }
        _ => cls,
    };
    Ok((total, cls))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Train,
}

/// One line of the per-epoch metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub rec_loss: f64,
    pub cls_loss: f64,
    pub val: Metrics,
    /// Number of expert executions per expert over the epoch.
    pub expert_load: Vec<usize>,
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation AUC.
    pub model: CerdModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

#[derive(Default)]
struct StepLosses {
    total: f64,
    rec: f64,
    cls: f64,
}

struct Trainer<'a> {
    model: CerdModel,
    data: &'a Dataset,
    adam: Adam,
    rng: ChaCha8Rng,
}

fn stack_rows(tape: &mut Tape, rows: &[Var]) -> Result<Var> {
    let reshaped = rows
        .iter()
        .map(|&r| {
            let n = tape.shape(r)[0];
            tape.reshape(r, &[1, n])
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat(&reshaped, 0)
}

impl Trainer<'_> {
    fn step(&mut self, batch: &[usize], phase: Phase, lr: f64, load: &mut [usize]) -> Result<StepLosses> {
        let model = &self.model;
        let mut tape = Tape::training(self.rng.next_u64());
        let subjects: Vec<_> = batch.iter().map(|&i| self.data.subject(i)).collect();
        let sets = subjects
            .iter()
            .map(|s| model.tokenize(&mut tape, s))
            .collect::<Result<Vec<_>>>()?;
        let cfg = &model.config;
        let rec = if cfg.rec_weight > 0.0 || phase == Phase::Warmup {
            model.reconstruction_term(&mut tape, &sets, &mut self.rng)?
        } else {
            None
        };
        let mut out = StepLosses::default();
        if let Some(r) = rec {
            out.rec = tape.value(r).item();
        }
        let loss = if phase == Phase::Warmup && cfg.warmup_mode == WarmupMode::Reconstruction {
            match rec {
                Some(r) => r,
                None => return Ok(out),
            }
        } else {
            let mut logits = Vec::with_capacity(batch.len());
            let mut gates = Vec::new();
            for set in &sets {
                let o = model.forward_tokens(&mut tape, set.clone(), ForwardOptions::default())?;
                for &e in &o.executed {
                    load[e] += 1;
                }
                logits.push(o.logits);
                gates.extend(o.gate);
            }
            let logits = stack_rows(&mut tape, &logits)?;
            let labels: Vec<usize> = subjects.iter().map(|s| s.label).collect();
            let (mut total, cls) = total_loss(&mut tape, logits, &labels, rec, cfg.rec_weight)?;
            if cfg.load_balance_weight > 0.0 && !gates.is_empty() {
                let pis = stack_rows(&mut tape, &gates)?;
                let mean = tape.mean(pis, 0)?;
                let e = tape.shape(mean)[0];
                let uniform = tape.constant(Tensor::full(&[e], 1.0 / e as f64));
                let dev = tape.sub(mean, uniform)?;
                let sq = tape.mul(dev, dev)?;
                let lb = tape.mean_all(sq);
                let lb = tape.scale(lb, cfg.load_balance_weight);
                total = tape.add(total, lb)?;
            }
            out.cls = tape.value(cls).item();
            total
        };
        out.total = tape.value(loss).item();
        tape.backward(loss)?;
        self.model.store.collect_grads(&tape);
        self.adam.step(&mut self.model.store, lr)?;
        Ok(out)
    }
}

/// Builds the model for `config` with standardization fitted on the training split.
pub fn init_model(config: &TrainConfig, data: &Dataset) -> Result<CerdModel> {
    let mut model = CerdModel::new(config.clone(), data.modalities.clone(), data.dims.clone(), data.classes.len())?;
    model.standardizer = data.fit_standardizer();
    Ok(model)
}

/// Trains on the training split, selecting parameters by validation AUC.
///
/// With reconstruction warm-up, the first `warmup_epochs` epochs optimize only the
/// masked-reconstruction loss on the training subjects eligible for masking; under other
/// completion strategies those epochs do nothing. Later epochs optimize the joint
/// loss on every training subject.
pub fn run_training(config: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    data.validate()?;
    let model = init_model(config, data)?;
    let train = data.splits.train.clone();
    let rec_pool: Vec<usize> = train
        .iter()
        .copied()
        .filter(|&i| model.reconstructs_from(data.mask[i].iter().filter(|&&o| o).count()))
        .collect();
    if config.completion == Completion::Cer && rec_pool.is_empty() {
        return Err(CerdError::Configuration(
            "reconstruction training needs training subjects eligible for masking, found none".into(),
        ));
    }
    if train.is_empty() || data.splits.val.is_empty() {
        return Err(CerdError::Configuration("training and validation splits must be nonempty".into()));
    }
    let adam = Adam::new(&model.store, AdamConfig::default());
    let mut trainer = Trainer {
        model,
        data,
        adam,
        rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed)),
    };
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 0..config.epochs {
        let warm = epoch < config.warmup_epochs;
        let phase = if warm { Phase::Warmup } else { Phase::Train };
        let rec_only = warm && config.warmup_mode == WarmupMode::Reconstruction;
        let lr = if warm && config.warmup_mode == WarmupMode::LearningRate {
            config.learning_rate * (epoch + 1) as f64 / config.warmup_epochs as f64
        } else {
            config.learning_rate
        };
        let mut order = match (rec_only, config.completion) {
            (true, Completion::Cer) => rec_pool.clone(),
            (true, _) => Vec::new(),
            (false, _) => train.clone(),
        };
        order.shuffle(&mut trainer.rng);
        let mut load = vec![0; config.experts];
        let (mut total, mut rec, mut cls, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let l = trainer.step(batch, phase, lr, &mut load)?;
            total += l.total;
            rec += l.rec;
            cls += l.cls;
            batches += 1;
        }
        let denom = batches.max(1) as f64;
        let val = evaluate(&trainer.model, data, &data.splits.val)?;
        log::info!(
            "epoch {epoch}: loss {:.4} rec {:.4} cls {:.4} val auc {:.4}",
            total / denom,
            rec / denom,
            cls / denom,
            val.macro_auc
        );
        if !rec_only && best.as_ref().is_none_or(|(auc, _, _)| val.macro_auc > *auc) {
            best = Some((val.macro_auc, epoch, trainer.model.store.clone()));
        }
        history.push(EpochRecord {
            epoch,
            phase,
            learning_rate: lr,
            train_loss: total / denom,
            rec_loss: rec / denom,
            cls_loss: cls / denom,
            val,
            expert_load: if config.backbone == Backbone::Moe { load } else { Vec::new() },
        });
    }
    let mut model = trainer.model;
    let best_epoch = best.map(|(_, epoch, store)| {
        model.store = store;
        epoch
    });
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

/// Class probabilities for the given subjects, in order.
pub fn predict_split(model: &CerdModel, data: &Dataset, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
    indices.iter().map(|&i| model.predict(&data.subject(i))).collect()
}

pub fn evaluate(model: &CerdModel, data: &Dataset, indices: &[usize]) -> Result<Metrics> {
    if indices.is_empty() {
        return Err(CerdError::Evaluation("cannot evaluate an empty split".into()));
    }
    model.check_compatible(&data.modalities, &data.dims)?;
    let probs = predict_split(model, data, indices)?;
    let labels: Vec<usize> = indices.iter().map(|&i| data.labels[i]).collect();
    evaluate_scores(&labels, &probs, data.classes.len())
}

/// Mean masked-reconstruction error per modality over the fully observed subjects
/// among `indices`, every modality masked in turn.
pub fn reconstruction_errors(model: &CerdModel, data: &Dataset, indices: &[usize], norm: ReconstructionNorm) -> Result<Vec<f64>> {
    if model.generators.is_empty() {
        return Err(CerdError::Configuration("model has no reconstruction generators".into()));
    }
    let full = data.full_coverage(indices);
    if full.is_empty() {
        return Err(CerdError::Evaluation("no fully observed subject to score reconstruction on".into()));
    }
    let m = model.num_modalities();
    let mut sums = vec![0.0; m];
    for &i in &full {
        let mut tape = Tape::new();
        let set = model.tokenize(&mut tape, &data.subject(i))?;
        for (k, sum) in sums.iter_mut().enumerate() {
            let ctx = build_context(&mut tape, &set, k)?;
            let pred = model.generators[k].generate(&mut tape, &model.store, ctx)?.tokens;
            let l = reconstruction_loss(&mut tape, pred, set.blocks[k].unwrap(), norm)?;
            *sum += tape.value(l).item();
        }
    }
    Ok(sums.into_iter().map(|s| s / full.len() as f64).collect())
}

pub const ABLATION_VARIANTS: [&str; 5] = ["full", "no_ed", "static_fill", "no_cer", "no_moe"];

/// The configuration of a named ablation variant derived from `base`.
pub fn variant_config(base: &TrainConfig, name: &str) -> Result<TrainConfig> {
    let mut c = base.clone();
    match name {
        "full" => {}
        "no_ed" => c.head = HeadKind::PlainLinear,
        "static_fill" => c.completion = Completion::StaticFill,
        "no_cer" => c.completion = Completion::ZeroFill,
        "no_moe" => c.backbone = Backbone::SharedFfn,
        other => return Err(CerdError::Parameter(format!("unknown ablation variant `{other}`"))),
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub parameters: usize,
    pub seeds: Vec<u64>,
    pub runs: Vec<Metrics>,
    pub median: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = v.len() / 2;
    if v.len() % 2 == 1 {
        v[h]
    } else {
        0.5 * (v[h - 1] + v[h])
    }
}

fn median_metrics(runs: &[Metrics]) -> Metrics {
    let pick = |f: fn(&Metrics) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
    Metrics {
        accuracy: pick(|m| m.accuracy),
        macro_f1: pick(|m| m.macro_f1),
        macro_auc: pick(|m| m.macro_auc),
    }
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Long format: one line per (variant, seed) plus a `median` line per variant.
    pub fn runs_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["variant", "seed", "accuracy", "macro_f1", "macro_auc"])?;
        for r in &self.rows {
            for (s, m) in r.seeds.iter().zip(&r.runs) {
                w.write_record([
                    r.variant.clone(),
                    s.to_string(),
                    m.accuracy.to_string(),
                    m.macro_f1.to_string(),
                    m.macro_auc.to_string(),
                ])?;
            }
            w.write_record([
                r.variant.clone(),
                "median".to_string(),
                r.median.accuracy.to_string(),
                r.median.macro_f1.to_string(),
                r.median.macro_auc.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| CerdError::Consistency(format!("csv buffer: {e}")))?;
        Ok(String::from_utf8(bytes).expect("utf-8"))
    }

    /// One row per variant: component flags, median metrics and parameter counts.
    pub fn summary_csv(&self) -> Result<String> {
        let full = self.row("full").map(|r| r.parameters as i64);
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "variant", "cer", "ed", "sf", "moe", "accuracy", "macro_f1", "macro_auc", "parameters", "parameter_delta",
        ])?;
        for r in &self.rows {
            let flags = match r.variant.as_str() {
                "full" => ["1", "1", "0", "1"],
                "no_ed" => ["1", "0", "0", "1"],
                "static_fill" => ["0", "1", "1", "1"],
                "no_cer" => ["0", "1", "0", "1"],
                _ => ["1", "1", "0", "0"],
            };
            let mut rec: Vec<String> = vec![r.variant.clone()];
            rec.extend(flags.iter().map(|s| s.to_string()));
            rec.extend([
                r.median.accuracy.to_string(),
                r.median.macro_f1.to_string(),
                r.median.macro_auc.to_string(),
                r.parameters.to_string(),
                full.map(|f| (r.parameters as i64 - f).to_string()).unwrap_or_default(),
            ]);
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| CerdError::Consistency(format!("csv buffer: {e}")))?;
        Ok(String::from_utf8(bytes).expect("utf-8"))
    }
}

/// Trains `variant` under every seed and scores the best checkpoint on the test split.
pub fn run_variant(base: &TrainConfig, data: &Dataset, variant: &str, seeds: &[u64]) -> Result<AblationRow> {
    let mut runs = Vec::with_capacity(seeds.len());
    let mut parameters = 0;
    for &seed in seeds {
        let mut c = variant_config(base, variant)?;
        c.seed = seed;
        let out = run_training(&c, data)?;
        parameters = out.model.store.num_scalars();
        runs.push(evaluate(&out.model, data, &data.splits.test)?);
    }
    Ok(AblationRow {
        variant: variant.to_string(),
        parameters,
        seeds: seeds.to_vec(),
        median: median_metrics(&runs),
        runs,
    })
}

/// All five variants with identical seeds.
pub fn run_ablation(base: &TrainConfig, data: &Dataset, seeds: &[u64]) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(CerdError::Parameter("ablation needs at least one seed".into()));
    }
    let rows = ABLATION_VARIANTS
        .iter()
        .map(|v| run_variant(base, data, v, seeds))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { rows })
}
