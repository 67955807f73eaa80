//! Subject-aligned multimodal datasets: in-memory layout, CSV bundles and splits.
//!
//! Missing modalities are rows of `NaN` in their modality matrix. The loader
//! never imputes them; the availability mask is derived from those rows or read
//! from an explicit mask file, which must agree with them.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CerdError, Result};
use crate::tokenize::{Standardizer, SubjectView};

pub const DEFAULT_RATIOS: [f64; 3] = [0.7, 0.15, 0.15];
pub const SENTINEL: &str = "NaN";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = CerdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            _ => Err(CerdError::Parameter(format!("unknown split `{s}` (train, val, test)"))),
        }
    }
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, name: SplitName) -> &[usize] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dataset {
    pub modalities: Vec<String>,
    pub dims: Vec<usize>,
    pub classes: Vec<String>,
    pub ids: Vec<String>,
    /// Per modality, a row-major `N × d_m` matrix.
    pub features: Vec<Vec<f64>>,
    /// Per subject, one availability flag per modality.
    pub mask: Vec<Vec<bool>>,
    pub labels: Vec<usize>,
    pub splits: Splits,
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Bitwise equality, so sentinel entries compare equal.
impl PartialEq for Dataset {
    fn eq(&self, o: &Self) -> bool {
        self.modalities == o.modalities
            && self.dims == o.dims
            && self.classes == o.classes
            && self.ids == o.ids
            && self.mask == o.mask
            && self.labels == o.labels
            && self.splits == o.splits
            && self.features.len() == o.features.len()
            && self.features.iter().zip(&o.features).all(|(a, b)| same_bits(a, b))
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn row(&self, subject: usize, modality: usize) -> &[f64] {
        let d = self.dims[modality];
        &self.features[modality][subject * d..(subject + 1) * d]
    }

    pub fn subject(&self, i: usize) -> SubjectView<'_> {
        SubjectView {
            id: &self.ids[i],
            features: (0..self.num_modalities()).map(|m| self.row(i, m)).collect(),
            mask: &self.mask[i],
            label: self.labels[i],
        }
    }

    pub fn is_full(&self, i: usize) -> bool {
        self.mask[i].iter().all(|&o| o)
    }

    /// Subjects with every modality observed.
    pub fn full_coverage(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().copied().filter(|&i| self.is_full(i)).collect()
    }

    /// Standardization statistics from the observed rows of the training split.
    pub fn fit_standardizer(&self) -> Standardizer {
        Standardizer::fit(&self.dims, |m| {
            self.splits
                .train
                .iter()
                .filter(|&&i| self.mask[i][m])
                .map(|&i| self.row(i, m))
                .collect()
        })
    }

    pub fn observed_fraction(&self, modality: usize) -> f64 {
        self.mask.iter().filter(|m| m[modality]).count() as f64 / self.len() as f64
    }

    /// Checks the structural invariants every loaded or generated dataset satisfies.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let m = self.num_modalities();
        if self.dims.len() != m || self.features.len() != m {
            return Err(CerdError::Dimension("modality metadata lengths differ".into()));
        }
        for (k, (f, d)) in self.features.iter().zip(&self.dims).enumerate() {
            if f.len() != n * d {
                return Err(CerdError::Dimension(format!(
                    "modality {} holds {} values, expected {n}×{d}",
                    self.modalities[k],
                    f.len()
                )));
            }
        }
        if self.labels.len() != n || self.mask.len() != n {
            return Err(CerdError::Alignment("labels or mask length differs from subject count".into()));
        }
        for i in 0..n {
            if self.labels[i] >= self.classes.len() {
                return Err(CerdError::Label(format!("subject {} has label index {}", self.ids[i], self.labels[i])));
            }
            if !self.mask[i].iter().any(|&o| o) {
                return Err(CerdError::DataIntegrity(format!("subject {} has no observed modality", self.ids[i])));
            }
            for k in 0..m {
                let row = self.row(i, k);
                if self.mask[i][k] && row.iter().any(|v| v.is_nan()) {
                    return Err(CerdError::DataIntegrity(format!(
                        "subject {} modality {}: observed row contains sentinel entries",
                        self.ids[i], self.modalities[k]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Split sizes by largest remainder, ties to the earlier split.
fn split_sizes(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes = [0usize; 3];
    for s in 0..3 {
        sizes[s] = exact[s].floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = n - sizes.iter().sum::<usize>();
    for s in order {
        if left == 0 {
            break;
        }
        sizes[s] += 1;
        left -= 1;
    }
    sizes
}

/// Augmenting-path search on a small dense residual graph.
fn augment(cap: &mut [Vec<i64>], u: usize, sink: usize, seen: &mut [bool]) -> bool {
    if u == sink {
        return true;
    }
    seen[u] = true;
    for v in 0..cap.len() {
        if !seen[v] && cap[u][v] > 0 && augment(cap, v, sink, seen) {
            cap[u][v] -= 1;
            cap[v][u] += 1;
            return true;
        }
    }
    false
}

/// Per-(class, split) counts whose margins are the class sizes and split sizes,
/// each cell the floor or ceiling of its proportional share.
fn controlled_rounding(class_counts: &[usize], sizes: [usize; 3], ratios: &[f64; 3], rng: &mut ChaCha8Rng) -> Result<Vec<[usize; 3]>> {
    let c = class_counts.len();
    let mut cells = vec![[0usize; 3]; c];
    let mut fractional = vec![[false; 3]; c];
    for k in 0..c {
        for s in 0..3 {
            let t = class_counts[k] as f64 * ratios[s];
            cells[k][s] = t.floor() as usize;
            fractional[k][s] = t - t.floor() > 1e-9;
        }
    }
    // Nodes: source, classes (shuffled), splits, sink.
    let mut class_order: Vec<usize> = (0..c).collect();
    class_order.shuffle(rng);
    let (src, sink) = (0, c + 4);
    let split_node = |s: usize| c + 1 + s;
    let mut cap = vec![vec![0i64; c + 5]; c + 5];
    let mut need = 0i64;
    for (pos, &k) in class_order.iter().enumerate() {
        let extra = class_counts[k] as i64 - cells[k].iter().sum::<usize>() as i64;
        cap[src][1 + pos] = extra;
        need += extra;
        for s in 0..3 {
            if fractional[k][s] {
                cap[1 + pos][split_node(s)] = 1;
            }
        }
    }
    for s in 0..3 {
        let floor_sum: usize = cells.iter().map(|r| r[s]).sum();
        cap[split_node(s)][sink] = sizes[s] as i64 - floor_sum as i64;
    }
    let mut flow = 0;
    loop {
        let mut seen = vec![false; c + 5];
        if !augment(&mut cap, src, sink, &mut seen) {
            break;
        }
        flow += 1;
    }
    if flow != need {
        return Err(CerdError::Stratification(format!(
            "no stratified rounding of class counts {class_counts:?} into split sizes {sizes:?}"
        )));
    }
    for (pos, &k) in class_order.iter().enumerate() {
        for s in 0..3 {
            if fractional[k][s] && cap[1 + pos][split_node(s)] == 0 {
                cells[k][s] += 1;
            }
        }
    }
    Ok(cells)
}

/// Class-stratified train/val/test split.
///
/// Split sizes follow the ratios by largest remainder; within every class each
/// split receives the floor or ceiling of its proportional share.
pub fn stratified_split(labels: &[usize], num_classes: usize, ratios: [f64; 3], seed: u64) -> Result<Splits> {
    if ratios.iter().any(|&r| !(r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CerdError::Parameter(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class
            .get_mut(y)
            .ok_or_else(|| CerdError::Label(format!("label index {y} with {num_classes} classes")))?
            .push(i);
    }
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let sizes = split_sizes(labels.len(), &ratios);
    let cells = controlled_rounding(&counts, sizes, &ratios, &mut rng)?;
    let mut splits = Splits::default();
    for (k, members) in by_class.iter_mut().enumerate() {
        if !members.is_empty() && cells[k][0] == 0 {
            return Err(CerdError::Stratification(format!(
                "class {k} ({} subjects) has no training subject",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let (a, b) = (cells[k][0], cells[k][0] + cells[k][1]);
        splits.train.extend_from_slice(&members[..a]);
        splits.val.extend_from_slice(&members[a..b]);
        splits.test.extend_from_slice(&members[b..]);
    }
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();
    Ok(splits)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestModality {
    pub name: String,
    pub file: String,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub modalities: Vec<ManifestModality>,
    pub labels_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_file: Option<String>,
    pub classes: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadOptions {
    pub split_seed: u64,
    /// Replace sentinel entries inside observed rows with the training median of the column.
    pub median_fill: bool,
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<csv::StringRecord>)> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => CerdError::io(path, io),
            other => CerdError::DataIntegrity(format!("{}: {other:?}", path.display())),
        })?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r.records().collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((header, rows))
}

fn parse_value(s: &str, path: &Path, line: usize) -> Result<f64> {
    let t = s.trim();
    if t == SENTINEL {
        return Ok(f64::NAN);
    }
    match t.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(CerdError::DataIntegrity(format!(
            "{} row {line}: `{t}` is neither a finite number nor {SENTINEL}",
            path.display()
        ))),
    }
}

fn check_alignment(reference: &[String], ids: &[String], file: &Path) -> Result<()> {
    if reference == ids {
        return Ok(());
    }
    let offenders: Vec<String> = reference
        .iter()
        .zip(ids)
        .filter(|(a, b)| a != b)
        .map(|(a, b)| format!("{a}≠{b}"))
        .take(10)
        .collect();
    Err(CerdError::Alignment(format!(
        "{}: subject ids differ from the first modality ({} vs {} rows; offenders: {})",
        file.display(),
        ids.len(),
        reference.len(),
        offenders.join(", ")
    )))
}

/// Loads a bundle described by a manifest.
pub fn load(manifest_path: &Path, options: &LoadOptions) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| CerdError::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.modalities.is_empty() {
        return Err(CerdError::DataIntegrity("manifest lists no modalities".into()));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut ids: Option<Vec<String>> = None;
    let mut features = Vec::new();
    for m in &manifest.modalities {
        let path = base.join(&m.file);
        let (header, rows) = read_csv(&path)?;
        if header.len() != m.dim + 1 {
            return Err(CerdError::Dimension(format!(
                "{}: {} feature columns, manifest declares {}",
                path.display(),
                header.len().saturating_sub(1),
                m.dim
            )));
        }
        let mut these = Vec::with_capacity(rows.len());
        let mut values = Vec::with_capacity(rows.len() * m.dim);
        for (line, rec) in rows.iter().enumerate() {
            if rec.len() != m.dim + 1 {
                return Err(CerdError::Dimension(format!("{} row {}: {} fields", path.display(), line + 1, rec.len())));
            }
            these.push(rec[0].to_string());
            for f in rec.iter().skip(1) {
                values.push(parse_value(f, &path, line + 1)?);
            }
        }
        match &ids {
            None => ids = Some(these),
            Some(r) => check_alignment(r, &these, &path)?,
        }
        features.push(values);
    }
    let ids = ids.unwrap();
    let n = ids.len();
    let dims: Vec<usize> = manifest.modalities.iter().map(|m| m.dim).collect();
    let row = |k: usize, i: usize| &features[k][i * dims[k]..(i + 1) * dims[k]];

    let labels_path = base.join(&manifest.labels_file);
    let (_, rows) = read_csv(&labels_path)?;
    let class_index: HashMap<&str, usize> = manifest.classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let label_ids: Vec<String> = rows.iter().map(|r| r.get(0).unwrap_or("").to_string()).collect();
    check_alignment(&ids, &label_ids, &labels_path)?;
    let labels = rows
        .iter()
        .map(|r| {
            let c = r.get(1).unwrap_or("").trim();
            class_index
                .get(c)
                .copied()
                .ok_or_else(|| CerdError::Label(format!("subject {}: unknown class `{c}`", &r[0])))
        })
        .collect::<Result<Vec<_>>>()?;

    let derived: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..dims.len()).map(|k| !row(k, i).iter().all(|v| v.is_nan())).collect())
        .collect();
    let mask = match &manifest.mask_file {
        None => derived,
        Some(file) => {
            let path = base.join(file);
            let (header, rows) = read_csv(&path)?;
            if header.len() != dims.len() + 1 {
                return Err(CerdError::Dimension(format!("{}: expected {} mask columns", path.display(), dims.len())));
            }
            let mask_ids: Vec<String> = rows.iter().map(|r| r[0].to_string()).collect();
            check_alignment(&ids, &mask_ids, &path)?;
            let mut mask = Vec::with_capacity(n);
            for (i, rec) in rows.iter().enumerate() {
                let mut flags = Vec::with_capacity(dims.len());
                for k in 0..dims.len() {
                    let f = match rec[k + 1].trim() {
                        "1" => true,
                        "0" => false,
                        other => {
                            return Err(CerdError::DataIntegrity(format!(
                                "{} row {}: mask value `{other}`",
                                path.display(),
                                i + 1
                            )))
                        }
                    };
                    if f != derived[i][k] {
                        return Err(CerdError::DataIntegrity(format!(
                            "subject {} modality {}: explicit mask says {} but the row is {}",
                            ids[i],
                            manifest.modalities[k].name,
                            if f { "observed" } else { "missing" },
                            if derived[i][k] { "present" } else { "all sentinel" }
                        )));
                    }
                    flags.push(f);
                }
                mask.push(flags);
            }
            mask
        }
    };
    let splits = stratified_split(&labels, manifest.classes.len(), DEFAULT_RATIOS, options.split_seed)?;
    let mut ds = Dataset {
        modalities: manifest.modalities.iter().map(|m| m.name.clone()).collect(),
        dims,
        classes: manifest.classes.clone(),
        ids,
        features,
        mask,
        labels,
        splits,
    };
    if options.median_fill {
        median_fill(&mut ds);
    }
    ds.validate()?;
    Ok(ds)
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let h = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[h] } else { 0.5 * (v[h - 1] + v[h]) })
}

/// Fills sparse sentinel entries of observed rows with training-split column medians.
/// Fully missing rows stay untouched.
pub fn median_fill(ds: &mut Dataset) {
    for k in 0..ds.num_modalities() {
        let d = ds.dims[k];
        let medians: Vec<Option<f64>> = (0..d)
            .map(|j| {
                median(
                    ds.splits
                        .train
                        .iter()
                        .filter(|&&i| ds.mask[i][k])
                        .map(|&i| ds.features[k][i * d + j])
                        .filter(|v| !v.is_nan())
                        .collect(),
                )
            })
            .collect();
        for i in 0..ds.len() {
            if !ds.mask[i][k] {
                continue;
            }
            for j in 0..d {
                let v = &mut ds.features[k][i * d + j];
                if v.is_nan() {
                    if let Some(m) = medians[j] {
                        *v = m;
                    }
                }
            }
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CerdError::io(path, e))
}

fn csv_bytes(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner()
        .map_err(|e| CerdError::Consistency(format!("csv buffer: {e}")))
}

fn format_value(v: f64) -> String {
    if v.is_nan() {
        SENTINEL.to_string()
    } else {
        format!("{v:?}")
    }
}

/// Writes one CSV per modality plus the labels file and manifest. Returns the manifest path.
pub fn write_bundle(ds: &Dataset, dir: &Path, with_mask_file: bool) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| CerdError::io(dir, e))?;
    let mut modalities = Vec::new();
    for k in 0..ds.num_modalities() {
        let file = format!("{}.csv", ds.modalities[k]);
        let mut header = vec!["subject_id".to_string()];
        header.extend((0..ds.dims[k]).map(|j| format!("f{j}")));
        let bytes = csv_bytes(
            &header,
            (0..ds.len()).map(|i| {
                let mut r = vec![ds.ids[i].clone()];
                r.extend(ds.row(i, k).iter().map(|&v| format_value(v)));
                r
            }),
        )?;
        write_file(&dir.join(&file), &bytes)?;
        modalities.push(ManifestModality {
            name: ds.modalities[k].clone(),
            file,
            dim: ds.dims[k],
        });
    }
    let labels = csv_bytes(
        &["subject_id".to_string(), "class".to_string()],
        (0..ds.len()).map(|i| vec![ds.ids[i].clone(), ds.classes[ds.labels[i]].clone()]),
    )?;
    write_file(&dir.join("labels.csv"), &labels)?;
    let mask_file = if with_mask_file {
        let mut header = vec!["subject_id".to_string()];
        header.extend(ds.modalities.iter().cloned());
        let bytes = csv_bytes(
            &header,
            (0..ds.len()).map(|i| {
                let mut r = vec![ds.ids[i].clone()];
                r.extend(ds.mask[i].iter().map(|&o| if o { "1" } else { "0" }.to_string()));
                r
            }),
        )?;
        write_file(&dir.join("mask.csv"), &bytes)?;
        Some("mask.csv".to_string())
    } else {
        None
    };
    let manifest = Manifest {
        modalities,
        labels_file: "labels.csv".into(),
        mask_file,
        classes: ds.classes.clone(),
    };
    let path = dir.join("manifest.json");
    write_file(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(path)
}

/// Label counts per class within a set of subjects.
pub fn class_counts(labels: &[usize], indices: &[usize], num_classes: usize) -> Vec<usize> {
    let mut c = vec![0; num_classes];
    for &i in indices {
        c[labels[i]] += 1;
    }
    c
}

/// Observed count per modality pattern, keyed by a `1`/`0` string in catalog order.
pub fn mask_patterns(ds: &Dataset) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for m in &ds.mask {
        let key: String = m.iter().map(|&o| if o { '1' } else { '0' }).collect();
        *out.entry(key).or_insert(0) += 1;
    }
    out
}
