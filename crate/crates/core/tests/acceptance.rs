//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Tolerances are fixed below.

#![allow(clippy::needless_range_loop)]

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cerd::autograd::Tape;
use cerd::cer::{build_context, complete_subject, ReconstructionNorm};
use cerd::commands::{self, CliConfig};
use cerd::config::TrainConfig;
use cerd::data::{Dataset, SplitName};
use cerd::fullcheck::pipeline_gradcheck;
use cerd::metrics::{accuracy, evaluate_scores, macro_auc, macro_f1};
use cerd::model::{CerdModel, ForwardOptions};
use cerd::synth::{generate, SyntheticSpec};
use cerd::tensor::Tensor;
use cerd::tokenize::SubjectView;
use cerd::train::{init_model, reconstruction_errors, run_ablation, run_training};

const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const ADDITIVE_TOLERANCE: f64 = 1e-9;
const ADDITIVE_SUBJECTS: usize = 500;
const ROUTING_SUBJECTS: usize = 1000;
const GATE_SUM_TOLERANCE: f64 = 1e-12;
const ROUTING_TEMPERATURES: [f64; 3] = [0.1, 1.0, 10.0];
const PERMUTATION_TOLERANCE: f64 = 1e-12;
const RECONSTRUCTION_EPOCHS: usize = 50;
const RECONSTRUCTION_RATIO: f64 = 0.5;
const RECONSTRUCTION_BUDGET: Duration = Duration::from_secs(600);
const ABLATION_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const ABLATION_MIN_GAP: f64 = 0.02;
const ABLATION_BUDGET: Duration = Duration::from_secs(3600);
const FIDELITY_MIN_HITS: usize = 4;
const METRIC_TOLERANCE: f64 = 1e-12;
const METRIC_MAX_SUBJECTS: usize = 8;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

struct Cohort {
    data: Dataset,
}

impl Cohort {
    fn default_spec() -> Self {
        Cohort {
            data: generate(&SyntheticSpec::default()).expect("default spec"),
        }
    }
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let r = pipeline_gradcheck(&TrainConfig::tiny(), GRAD_STEP, GRAD_TOLERANCE).map_err(err)?;
    let took = start.elapsed();
    let worst = r
        .modules
        .iter()
        .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
        .map(|(k, m)| format!("{k}: {}", m.worst))
        .unwrap_or_default();
    let scalars: usize = r.modules.values().map(|m| m.scalars).sum();
    check(
        r.passed && took < GRAD_BUDGET,
        format!(
            "max rel error {:.2e} over {scalars} parameters in {} modules (worst {worst}), {:.1}s",
            r.max_rel_error,
            r.modules.len(),
            took.as_secs_f64()
        ),
    )
}

fn additive_attribution(cohort: &Cohort) -> Outcome {
    let data = &cohort.data;
    let per_model = 50;
    let mut worst: f64 = 0.0;
    let mut n = 0;
    let mut seed = 0;
    while n < ADDITIVE_SUBJECTS {
        let config = TrainConfig {
            seed,
            ..TrainConfig::desk()
        };
        let model = init_model(&config, data).map_err(err)?;
        for k in 0..per_model {
            let i = (seed as usize * 97 + k * 13) % data.len();
            let report = model.evidence_report(&data.subject(i)).map_err(err)?.ok_or("no evidence head")?;
            worst = worst.max(report.additive_residual());
            n += 1;
        }
        seed += 1;
    }
    check(
        worst < ADDITIVE_TOLERANCE,
        format!("max |logits - shared - sum contributions| = {worst:.2e} over {n} subjects, {seed} parameter draws"),
    )
}

fn routing_contracts(cohort: &Cohort) -> Outcome {
    let data = &cohort.data;
    let base = TrainConfig::desk();
    let models: Vec<CerdModel> = ROUTING_TEMPERATURES
        .iter()
        .map(|&t| {
            init_model(
                &TrainConfig {
                    routing_temperature: t,
                    ..base.clone()
                },
                data,
            )
        })
        .collect::<cerd::Result<_>>()
        .map_err(err)?;
    let k = base.top_k;
    let mut sum_dev: f64 = 0.0;
    let (mut wrong_count, mut argmax_changed, mut corrupt_changed, mut corrupted) = (0, 0, 0, 0);
    for s in 0..ROUTING_SUBJECTS {
        let i = s % data.len();
        let subject = data.subject(i);
        let mut argmaxes = Vec::new();
        for (mi, model) in models.iter().enumerate() {
            let mut tape = Tape::new();
            let out = model.forward_subject(&mut tape, &subject, ForwardOptions::default()).map_err(err)?;
            let pi = tape.value(out.gate.ok_or("no gate")?).data().to_vec();
            sum_dev = sum_dev.max((pi.iter().sum::<f64>() - 1.0).abs());
            let mut executed = out.executed.clone();
            executed.sort_unstable();
            executed.dedup();
            if out.executed.len() != k || executed.len() != k {
                wrong_count += 1;
            }
            argmaxes.push(cerd::evidence::argmax(&pi));
            if mi == 1 && !data.is_full(i) {
                let mut t2 = Tape::new();
                let opts = ForwardOptions {
                    corrupt_reconstructed: Some(s as u64),
                };
                let o2 = model.forward_subject(&mut t2, &subject, opts).map_err(err)?;
                let pi2 = t2.value(o2.gate.ok_or("no gate")?).data();
                if pi2 != pi.as_slice() {
                    corrupt_changed += 1;
                }
                corrupted += 1;
            }
        }
        if argmaxes.iter().any(|&a| a != argmaxes[0]) {
            argmax_changed += 1;
        }
    }
    check(
        wrong_count == 0 && sum_dev <= GATE_SUM_TOLERANCE && argmax_changed == 0 && corrupt_changed == 0 && corrupted > 0,
        format!(
            "{ROUTING_SUBJECTS} subjects x {} temperatures: executed!=k {wrong_count}, max |sum pi - 1| {sum_dev:.1e}, \
             argmax changes {argmax_changed}, gate changes under corruption {corrupt_changed}/{corrupted}",
            ROUTING_TEMPERATURES.len()
        ),
    )
}

fn mask_semantics(cohort: &Cohort) -> Outcome {
    let data = &cohort.data;
    let model = init_model(&TrainConfig::desk(), data).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let mut sentinel_diffs = 0;
    let partial: Vec<usize> = (0..data.len()).filter(|&i| !data.is_full(i)).take(200).collect();
    for &i in &partial {
        let view = data.subject(i);
        let rows: Vec<Vec<f64>> = (0..data.num_modalities())
            .map(|m| {
                let r = data.row(i, m);
                if data.mask[i][m] {
                    r.to_vec()
                } else {
                    r.iter().map(|_| rng.random_range(-1e3..1e3)).collect()
                }
            })
            .collect();
        let corrupted = SubjectView {
            id: view.id,
            features: rows.iter().map(|r| r.as_slice()).collect(),
            mask: view.mask,
            label: view.label,
        };
        let a = model.evidence_report(&view).map_err(err)?.ok_or("no head")?;
        let b = model.evidence_report(&corrupted).map_err(err)?.ok_or("no head")?;
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if bits(&a.logits) != bits(&b.logits) || a != b {
            sentinel_diffs += 1;
        }
    }

    let mut identity_failures = 0;
    let full: Vec<usize> = (0..data.len()).filter(|&i| data.is_full(i)).take(100).collect();
    for &i in &full {
        let mut tape = Tape::new();
        let tokens = model.tokenize(&mut tape, &data.subject(i)).map_err(err)?;
        let before: Vec<Tensor> = tokens.complete_blocks().map_err(err)?.iter().map(|&b| tape.value(b).clone()).collect();
        let mut calls = Vec::new();
        let after = complete_subject(&mut tape, &model.store, tokens.clone(), &model.generators, false, &mut calls)
            .map_err(err)?;
        let after_vals: Vec<Tensor> = after.complete_blocks().map_err(err)?.iter().map(|&b| tape.value(b).clone()).collect();
        if !calls.is_empty() || before != after_vals || after.blocks != tokens.blocks {
            identity_failures += 1;
        }
    }

    let mut perm_dev: f64 = 0.0;
    for &i in full.iter().take(50) {
        let mut tape = Tape::new();
        let tokens = model.tokenize(&mut tape, &data.subject(i)).map_err(err)?;
        for (target, g) in model.generators.iter().enumerate() {
            let ctx = build_context(&mut tape, &tokens, target).map_err(err)?;
            let rows = tape.value(ctx).rows();
            let mut order: Vec<usize> = (0..rows.len()).collect();
            for j in (1..order.len()).rev() {
                order.swap(j, rng.random_range(0..=j));
            }
            let permuted: Vec<Vec<f64>> = order.iter().map(|&r| rows[r].clone()).collect();
            let p = tape.constant(Tensor::from_rows(&permuted).map_err(err)?);
            let a = g.generate(&mut tape, &model.store, ctx).map_err(err)?.tokens;
            let b = g.generate(&mut tape, &model.store, p).map_err(err)?.tokens;
            perm_dev = perm_dev.max(tape.value(a).max_abs_diff(tape.value(b)));
        }
    }
    check(
        sentinel_diffs == 0 && identity_failures == 0 && perm_dev < PERMUTATION_TOLERANCE,
        format!(
            "sentinel corruption changed {sentinel_diffs}/{} outputs; completion not identity on {identity_failures}/{} full subjects; \
             max generator change under context permutation {perm_dev:.1e}",
            partial.len(),
            full.len()
        ),
    )
}

fn reconstruction_learnability(cohort: &Cohort) -> Outcome {
    let start = Instant::now();
    let data = &cohort.data;
    let config = TrainConfig {
        epochs: RECONSTRUCTION_EPOCHS,
        warmup_epochs: RECONSTRUCTION_EPOCHS,
        ..TrainConfig::desk()
    };
    let held_out = &data.splits.test;
    let before = reconstruction_errors(&init_model(&config, data).map_err(err)?, data, held_out, ReconstructionNorm::Mse)
        .map_err(err)?;
    let trained = run_training(&config, data).map_err(err)?;
    let after = reconstruction_errors(&trained.model, data, held_out, ReconstructionNorm::Mse).map_err(err)?;
    let ratios: Vec<f64> = before.iter().zip(&after).map(|(b, a)| a / b).collect();
    let took = start.elapsed();
    let detail = data
        .modalities
        .iter()
        .zip(before.iter().zip(&after).zip(&ratios))
        .map(|(n, ((b, a), r))| format!("{n} {b:.3}->{a:.3} ({r:.2})"))
        .collect::<Vec<_>>()
        .join(", ");
    check(
        ratios.iter().all(|&r| r <= RECONSTRUCTION_RATIO) && took < RECONSTRUCTION_BUDGET,
        format!(
            "held-out MSE after {RECONSTRUCTION_EPOCHS} epochs: {detail} on {} subjects, {:.0}s",
            data.full_coverage(held_out).len(),
            took.as_secs_f64()
        ),
    )
}

fn ablation_ordering(cohort: &Cohort) -> Outcome {
    let start = Instant::now();
    let table = run_ablation(&TrainConfig::desk(), &cohort.data, &ABLATION_SEEDS).map_err(err)?;
    let took = start.elapsed();
    let auc = |v: &str| table.row(v).map(|r| r.median.macro_auc).ok_or(format!("missing row {v}"));
    let (full, sf, zf) = (auc("full")?, auc("static_fill")?, auc("no_cer")?);
    let all = table
        .rows
        .iter()
        .map(|r| format!("{} {:.4}", r.variant, r.median.macro_auc))
        .collect::<Vec<_>>()
        .join(", ");
    check(
        full > sf && sf > zf && full - zf >= ABLATION_MIN_GAP && took < ABLATION_BUDGET,
        format!(
            "median test AUC over {} seeds: {all}; full - zero_fill = {:.4}; {:.0}s",
            ABLATION_SEEDS.len(),
            full - zf,
            took.as_secs_f64()
        ),
    )
}

fn attribution_fidelity() -> Outcome {
    let spec = SyntheticSpec::default().with_allocation(0.2, 0, 0.5);
    let data = generate(&spec).map_err(err)?;
    let planted = cerd::synth::planted_importance(&spec).map_err(err)?.top_modality;
    let mut tops = Vec::new();
    for &seed in &ABLATION_SEEDS {
        let config = TrainConfig {
            seed,
            ..TrainConfig::desk()
        };
        let out = run_training(&config, &data).map_err(err)?;
        let reports = data
            .splits
            .test
            .iter()
            .map(|&i| out.model.evidence_report(&data.subject(i)).map(|r| r.expect("evidence head")))
            .collect::<cerd::Result<Vec<_>>>()
            .map_err(err)?;
        let summary = cerd::evidence::importance_summary(&reports, &data.classes).map_err(err)?;
        tops.push(summary.top_modality().to_string());
    }
    let hits = tops.iter().filter(|t| **t == planted).count();
    check(
        hits >= FIDELITY_MIN_HITS,
        format!("top modality by mean |contribution| per seed {tops:?}; planted {planted}; {hits}/{}", tops.len()),
    )
}

/// Brute-force metric oracles: direct counting and pairwise AUC with half credit for ties.
mod oracle {
    pub fn accuracy(labels: &[usize], pred: &[usize]) -> f64 {
        labels.iter().zip(pred).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
    }

    pub fn macro_f1(labels: &[usize], pred: &[usize], classes: usize) -> f64 {
        let mut total = 0.0;
        for c in 0..classes {
            let tp = labels.iter().zip(pred).filter(|&(&l, &p)| l == c && p == c).count() as f64;
            let fp = labels.iter().zip(pred).filter(|&(&l, &p)| l != c && p == c).count() as f64;
            let fn_ = labels.iter().zip(pred).filter(|&(&l, &p)| l == c && p != c).count() as f64;
            total += if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
        }
        total / classes as f64
    }

    pub fn auc(labels: &[usize], probs: &[Vec<f64>], classes: usize) -> Option<f64> {
        let mut sum = 0.0;
        let mut defined = 0;
        for c in 0..classes {
            let (mut num, mut den) = (0.0, 0.0);
            for (i, &li) in labels.iter().enumerate() {
                for (j, &lj) in labels.iter().enumerate() {
                    if li == c && lj != c {
                        den += 1.0;
                        let (a, b) = (probs[i][c], probs[j][c]);
                        num += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
                    }
                }
            }
            if den > 0.0 {
                sum += num / den;
                defined += 1;
            }
        }
        (defined > 0).then(|| sum / defined as f64)
    }

    pub fn argmax(v: &[f64]) -> usize {
        let mut b = 0;
        for i in 1..v.len() {
            if v[i] > v[b] {
                b = i;
            }
        }
        b
    }
}

fn metric_correctness() -> Outcome {
    let classes: usize = 3;
    // Score vectors chosen so that rows tie on some classes and not on others.
    let grid = [
        vec![0.6, 0.3, 0.1],
        vec![0.2, 0.5, 0.3],
        vec![0.2, 0.3, 0.5],
        vec![0.6, 0.1, 0.3],
        vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cases = 0usize;
    let mut worst: f64 = 0.0;
    let mut mismatches = 0usize;
    for n in 1..=METRIC_MAX_SUBJECTS {
        let label_sets = classes.pow(n as u32);
        for code in 0..label_sets {
            let mut labels = Vec::with_capacity(n);
            let mut x = code;
            for _ in 0..n {
                labels.push(x % classes);
                x /= classes;
            }
            let score_sets: Vec<Vec<Vec<f64>>> = if n <= 4 {
                (0..grid.len().pow(n as u32))
                    .map(|mut s| {
                        (0..n)
                            .map(|_| {
                                let r = grid[s % grid.len()].clone();
                                s /= grid.len();
                                r
                            })
                            .collect()
                    })
                    .collect()
            } else {
                (0..4)
                    .map(|_| {
                        (0..n)
                            .map(|_| {
                                if rng.random::<f64>() < 0.3 {
                                    grid[rng.random_range(0..grid.len())].clone()
                                } else {
                                    let raw: Vec<f64> = (0..classes).map(|_| rng.random::<f64>()).collect();
                                    let s: f64 = raw.iter().sum();
                                    raw.iter().map(|v| v / s).collect()
                                }
                            })
                            .collect()
                    })
                    .collect()
            };
            for probs in &score_sets {
                let pred: Vec<usize> = probs.iter().map(|p| oracle::argmax(p)).collect();
                let diffs = [
                    (accuracy(&labels, &pred) - oracle::accuracy(&labels, &pred)).abs(),
                    (macro_f1(&labels, &pred, classes) - oracle::macro_f1(&labels, &pred, classes)).abs(),
                ];
                let ours = macro_auc(&labels, probs, classes);
                let theirs = oracle::auc(&labels, probs, classes);
                let auc_diff = match (ours, theirs) {
                    (Some(a), Some(b)) => (a - b).abs(),
                    (None, None) => 0.0,
                    _ => f64::INFINITY,
                };
                let reported = evaluate_scores(&labels, probs, classes).map_err(err)?;
                let reported_diff = (reported.macro_auc - theirs.unwrap_or(0.5)).abs();
                let d = diffs.iter().copied().fold(auc_diff.max(reported_diff), f64::max);
                if d > METRIC_TOLERANCE {
                    mismatches += 1;
                }
                worst = worst.max(d);
                cases += 1;
            }
        }
    }
    check(
        mismatches == 0,
        format!("{cases} label/score configurations (n <= {METRIC_MAX_SUBJECTS}, 3 classes): {mismatches} mismatches, max deviation {worst:.1e}"),
    )
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().map_err(err)?;
    let run = |tag: &str| -> cerd::Result<Vec<(String, Vec<u8>)>> {
        let dir = root.path().join(tag);
        let cfg = CliConfig::resolve(
            None,
            None,
            &[
                "synth.subjects=120".into(),
                "epochs=3".into(),
                "warmup_epochs=1".into(),
                "hidden=8".into(),
                "tokens=2".into(),
            ],
        )?;
        let s = commands::cmd_synth(&cfg, &dir.join("data"))?;
        let cfg = CliConfig {
            data: Some(s.manifest.clone()),
            ..cfg
        };
        commands::cmd_train(&cfg, &dir.join("train"))?;
        let ckpt = dir.join("train").join(commands::CHECKPOINT_FILE);
        commands::cmd_eval(&ckpt, &s.manifest, SplitName::Test, Some(&dir.join("eval")))?;
        commands::cmd_attribute(&ckpt, &s.manifest, SplitName::Test, &dir.join("attribute"))?;
        let short = CliConfig {
            train: TrainConfig {
                epochs: 1,
                ..cfg.train.clone()
            },
            ..cfg
        };
        commands::cmd_ablate(&short, 2, &dir.join("ablate"))?;
        let mut files = Vec::new();
        for sub in ["data", "train", "eval", "attribute", "ablate"] {
            let mut names: Vec<_> = std::fs::read_dir(dir.join(sub))
                .map_err(|e| cerd::CerdError::io(dir.join(sub), e))?
                .map(|e| e.expect("dir entry").file_name().into_string().expect("utf-8"))
                .collect();
            names.sort();
            for n in names {
                if n == commands::CONFIG_FILE {
                    continue;
                }
                let p = dir.join(sub).join(&n);
                files.push((format!("{sub}/{n}"), std::fs::read(&p).map_err(|e| cerd::CerdError::io(&p, e))?));
            }
        }
        Ok(files)
    };
    let a = run("a").map_err(err)?;
    let b = run("b").map_err(err)?;
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    check(
        a.len() == b.len() && differing.is_empty(),
        format!("{} artifact files compared across two runs; differing: {differing:?}", a.len()),
    )
}

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn main() {
    let cohort = Cohort::default_spec();
    let criteria: Vec<Criterion<'_>> = vec![
        ("gradient integrity", Box::new(gradient_integrity)),
        ("additive attribution exactness", Box::new(|| additive_attribution(&cohort))),
        ("routing contracts", Box::new(|| routing_contracts(&cohort))),
        ("mask semantics", Box::new(|| mask_semantics(&cohort))),
        ("reconstruction learnability", Box::new(|| reconstruction_learnability(&cohort))),
        ("ablation ordering", Box::new(|| ablation_ordering(&cohort))),
        ("attribution fidelity", Box::new(attribution_fidelity)),
        ("metric correctness", Box::new(metric_correctness)),
        ("determinism", Box::new(determinism)),
    ];
    let only: Option<Vec<usize>> = std::env::var("CERD_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (n, (name, f)) in criteria.iter().enumerate() {
        let id = n + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(o) => o,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into())),
        };
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS [{id}] {name}: {d} ({secs:.1}s)"),
            Err(d) => {
                failed += 1;
                println!("FAIL [{id}] {name}: {d} ({secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
