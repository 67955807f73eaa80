//! Command implementations behind the `cerd` binary. Every command writes plain
//! CSV/JSON artifacts plus the effective configuration into its output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{load, write_bundle, Dataset, LoadOptions, SplitName};
use crate::error::{CerdError, Result};
use crate::evidence::{importance_summary, ImportanceSummary};
use crate::fullcheck::{pipeline_gradcheck, PipelineCheck};
use crate::metrics::Metrics;
use crate::model::CerdModel;
use crate::synth::{generate, planted_importance, SyntheticSpec};
use crate::train::{evaluate, run_ablation, run_training, AblationTable};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "CERD_OUT";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_LOG: &str = "metrics.jsonl";
pub const FINAL_METRICS: &str = "final_metrics.csv";
pub const EVAL_METRICS: &str = "eval_metrics.csv";
pub const REPORTS_FILE: &str = "reports.jsonl";
pub const IMPORTANCE_CSV: &str = "importance.csv";
pub const IMPORTANCE_JSON: &str = "importance.json";
pub const ABLATION_RUNS: &str = "ablation_runs.csv";
pub const ABLATION_SUMMARY: &str = "ablation_summary.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.json";
/// Maximum relative error accepted by the gradient check.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Configuration file shared by all commands. Every section is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub train: TrainConfig,
    pub synth: SyntheticSpec,
    /// Manifest of the dataset to train or evaluate on.
    pub data: Option<PathBuf>,
    pub load: LoadOptions,
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Top-level keys of the configuration file.
const SECTIONS: [&str; 4] = ["train", "synth", "data", "load"];

/// Applies `key=value` overrides to a JSON document. Values are parsed as JSON,
/// falling back to a string. Section names and dotted keys (`synth.seed`) address
/// the document from its root; any other bare key addresses the `train` section.
pub fn apply_overrides(doc: &mut Value, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| CerdError::Parameter(format!("override `{item}` is not key=value")))?;
        let path: Vec<&str> = if key.contains('.') || SECTIONS.contains(&key) {
            key.split('.').collect()
        } else {
            vec!["train", key]
        };
        if path.iter().any(|p| p.is_empty()) {
            return Err(CerdError::Parameter(format!("bad override key `{key}`")));
        }
        let mut node = &mut *doc;
        for part in &path[..path.len() - 1] {
            if !node.is_object() {
                return Err(CerdError::Parameter(format!("override `{key}` descends into a non-object")));
            }
            node = node
                .as_object_mut()
                .expect("checked")
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Default::default()));
        }
        let map = node
            .as_object_mut()
            .ok_or_else(|| CerdError::Parameter(format!("override `{key}` descends into a non-object")))?;
        map.insert(path[path.len() - 1].to_string(), parse_value(raw));
    }
    Ok(())
}

impl CliConfig {
    /// Reads an optional config file, replaces its `synth` section by `spec` when
    /// given, then applies overrides. Unknown keys are errors.
    pub fn resolve(file: Option<&Path>, spec: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match file {
            Some(p) => read_document(p)?,
            None => Value::Object(Default::default()),
        };
        if let Some(p) = spec {
            let section = read_document(p)?;
            doc.as_object_mut()
                .ok_or_else(|| CerdError::Configuration("configuration file must hold a JSON object".into()))?
                .insert("synth".into(), section);
        }
        apply_overrides(&mut doc, overrides)?;
        let cfg: CliConfig = serde_json::from_value(doc).map_err(|e| CerdError::Configuration(e.to_string()))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    fn manifest(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| CerdError::Configuration("no dataset given (set `data` or pass --data)".into()))
    }
}

fn read_document(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| CerdError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CerdError::Configuration(format!("{}: {e}", path.display())))
}

/// `dir` if given, else `$CERD_OUT/<command>`, else `cerd-out/<command>`.
pub fn output_dir(dir: Option<&Path>, command: &str) -> PathBuf {
    match dir {
        Some(d) => d.to_path_buf(),
        None => std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("cerd-out"))
            .join(command),
    }
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| CerdError::io(path, e))
}

fn prepare(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CerdError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text.as_bytes())
}

fn metrics_csv(rows: &[(String, Metrics)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["split", "accuracy", "macro_f1", "macro_auc"])?;
    for (name, m) in rows {
        w.write_record([
            name.clone(),
            m.accuracy.to_string(),
            m.macro_f1.to_string(),
            m.macro_auc.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| CerdError::Consistency(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("utf-8"))
}

pub struct SynthOutput {
    pub manifest: PathBuf,
    pub data: Dataset,
}

/// Generates the synthetic cohort and writes the bundle, manifest and planted importance.
pub fn cmd_synth(cfg: &CliConfig, out: &Path) -> Result<SynthOutput> {
    let data = generate(&cfg.synth)?;
    let importance = planted_importance(&cfg.synth)?;
    let manifest = write_bundle(&data, out, false)?;
    write_json(&out.join(IMPORTANCE_JSON), &importance)?;
    write_json(&out.join(CONFIG_FILE), cfg)?;
    Ok(SynthOutput { manifest, data })
}

pub struct TrainSummary {
    pub best_epoch: Option<usize>,
    pub metrics: Vec<(String, Metrics)>,
    pub model: CerdModel,
}

/// Trains on the configured dataset; writes checkpoint, epoch log, final metrics and config.
pub fn cmd_train(cfg: &CliConfig, out: &Path) -> Result<TrainSummary> {
    let data = load(cfg.manifest()?, &cfg.load)?;
    let outcome = run_training(&cfg.train, &data)?;
    prepare(out)?;
    write_json(&out.join(CONFIG_FILE), cfg)?;

    let mut log = String::new();
    for rec in &outcome.history {
        log.push_str(&serde_json::to_string(rec)?);
        log.push('\n');
    }
    write(&out.join(METRICS_LOG), log.as_bytes())?;

    let mut metrics = Vec::new();
    for split in [SplitName::Train, SplitName::Val, SplitName::Test] {
        let idx = data.splits.get(split);
        if !idx.is_empty() {
            metrics.push((split.to_string(), evaluate(&outcome.model, &data, idx)?));
        }
    }
    write(&out.join(FINAL_METRICS), metrics_csv(&metrics)?.as_bytes())?;

    let ckpt = Checkpoint::from_model(&outcome.model, &data.classes, &cfg.load, outcome.best_epoch);
    ckpt.save(&out.join(CHECKPOINT_FILE))?;
    Ok(TrainSummary {
        best_epoch: outcome.best_epoch,
        metrics,
        model: outcome.model,
    })
}

/// Loads a checkpoint and a dataset under the checkpoint's load options
/// (optionally with another split seed) and checks the catalogs agree.
pub fn load_for_checkpoint(checkpoint: &Path, manifest: &Path, split_seed: Option<u64>) -> Result<(Checkpoint, CerdModel, Dataset)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.to_model()?;
    let mut opts = ckpt.load_options.clone();
    if let Some(s) = split_seed {
        opts.split_seed = s;
    }
    let data = load(manifest, &opts)?;
    model.check_compatible(&data.modalities, &data.dims)?;
    if data.classes != ckpt.classes {
        return Err(CerdError::Compatibility(format!(
            "checkpoint classes {:?}, data classes {:?}",
            ckpt.classes, data.classes
        )));
    }
    Ok((ckpt, model, data))
}

fn split_indices(data: &Dataset, split: SplitName) -> Result<&[usize]> {
    let idx = data.splits.get(split);
    if idx.is_empty() {
        return Err(CerdError::Evaluation(format!("split `{split}` is empty")));
    }
    Ok(idx)
}

/// Scores one split; writes the metrics and the checkpoint's config when `out` is given.
pub fn cmd_eval(checkpoint: &Path, manifest: &Path, split: SplitName, out: Option<&Path>) -> Result<Metrics> {
    let (ckpt, model, data) = load_for_checkpoint(checkpoint, manifest, None)?;
    let m = evaluate(&model, &data, split_indices(&data, split)?)?;
    if let Some(dir) = out {
        prepare(dir)?;
        write_json(&dir.join(CONFIG_FILE), &ckpt.config)?;
        write(&dir.join(EVAL_METRICS), metrics_csv(&[(split.to_string(), m)])?.as_bytes())?;
    }
    Ok(m)
}

/// Emits one verified evidence report per subject of `split` plus the importance summary.
pub fn cmd_attribute(checkpoint: &Path, manifest: &Path, split: SplitName, out: &Path) -> Result<ImportanceSummary> {
    let (ckpt, model, data) = load_for_checkpoint(checkpoint, manifest, None)?;
    let idx = split_indices(&data, split)?;
    let mut reports = Vec::with_capacity(idx.len());
    let mut lines = String::new();
    for &i in idx {
        let report = model.evidence_report(&data.subject(i))?.ok_or_else(|| {
            CerdError::Configuration("checkpoint uses the plain head, which has no evidence decomposition".into())
        })?;
        report.verify()?;
        lines.push_str(&serde_json::to_string(&report)?);
        lines.push('\n');
        reports.push(report);
    }
    let summary = importance_summary(&reports, &data.classes)?;
    prepare(out)?;
    write_json(&out.join(CONFIG_FILE), &ckpt.config)?;
    write(&out.join(REPORTS_FILE), lines.as_bytes())?;
    write(&out.join(IMPORTANCE_CSV), summary.to_csv()?.as_bytes())?;
    Ok(summary)
}

/// Seeds `train.seed, train.seed + 1, ...`.
pub fn ablation_seeds(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base.wrapping_add(i)).collect()
}

/// Trains every ablation variant under `seeds` and writes the run and summary tables.
pub fn cmd_ablate(cfg: &CliConfig, seeds: usize, out: &Path) -> Result<AblationTable> {
    if seeds == 0 {
        return Err(CerdError::Parameter("--seeds must be at least 1".into()));
    }
    let data = load(cfg.manifest()?, &cfg.load)?;
    let table = run_ablation(&cfg.train, &data, &ablation_seeds(cfg.train.seed, seeds))?;
    prepare(out)?;
    write_json(&out.join(CONFIG_FILE), cfg)?;
    write(&out.join(ABLATION_RUNS), table.runs_csv()?.as_bytes())?;
    write(&out.join(ABLATION_SUMMARY), table.summary_csv()?.as_bytes())?;
    Ok(table)
}

/// Named scales accepted by the gradient check.
pub fn gradcheck_config(scale: &str) -> Result<TrainConfig> {
    match scale {
        "tiny" => Ok(TrainConfig::tiny()),
        other => Err(CerdError::Parameter(format!("unknown gradcheck scale `{other}` (expected `tiny`)"))),
    }
}

/// Finite-difference check of the whole pipeline; a failure is an internal-consistency error
/// raised after the report has been written.
pub fn cmd_gradcheck(config: &TrainConfig, out: Option<&Path>) -> Result<PipelineCheck> {
    let check = pipeline_gradcheck(config, GRADCHECK_STEP, GRADCHECK_TOLERANCE)?;
    if let Some(dir) = out {
        prepare(dir)?;
        write_json(&dir.join(CONFIG_FILE), config)?;
        write_json(&dir.join(GRADCHECK_FILE), &check)?;
    }
    Ok(check)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_address_sections() {
        let mut doc = json!({"train": {"epochs": 3}});
        apply_overrides(
            &mut doc,
            &["epochs=7".into(), "completion=static_fill".into(), "synth.seed=4".into()],
        )
        .unwrap();
        assert_eq!(doc["train"]["epochs"], 7);
        assert_eq!(doc["train"]["completion"], "static_fill");
        assert_eq!(doc["synth"]["seed"], 4);
        assert!(apply_overrides(&mut doc, &["noequals".into()]).is_err());
    }

    #[test]
    fn section_overrides_replace_whole_values() {
        let mut doc = json!({});
        apply_overrides(&mut doc, &[r#"synth={"subjects": 50}"#.into(), "data=m/manifest.json".into()]).unwrap();
        assert_eq!(doc["synth"]["subjects"], 50);
        assert_eq!(doc["data"], "m/manifest.json");
        let cfg: CliConfig = serde_json::from_value(doc).unwrap();
        assert_eq!(cfg.synth.subjects, 50);
        assert_eq!(cfg.synth.classes, 3);
    }

    #[test]
    fn resolve_rejects_unknown_keys() {
        let err = CliConfig::resolve(None, None, &["epoch=3".into()]).unwrap_err();
        assert!(matches!(err, CerdError::Configuration(_)));
        let ok = CliConfig::resolve(None, None, &["epochs=3".into(), "load.split_seed=9".into()]).unwrap();
        assert_eq!(ok.train.epochs, 3);
        assert_eq!(ok.load.split_seed, 9);
        assert!(CliConfig::resolve(None, None, &["top_k=99".into()]).is_err());
    }

    #[test]
    fn output_dir_prefers_explicit_path() {
        assert_eq!(output_dir(Some(Path::new("a/b")), "train"), PathBuf::from("a/b"));
    }

    #[test]
    fn seeds_are_consecutive() {
        assert_eq!(ablation_seeds(5, 3), vec![5, 6, 7]);
        assert!(gradcheck_config("huge").is_err());
    }
}
