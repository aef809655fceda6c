//! Feature decomposition through importance matrices.
//!
//! The importance of feature `f` for class `c` is the average spatial sum of
//! its weighted feature map. Two estimators are provided:
//!
//! - per class: average over every selected sample, using the gradients of
//!   class `c` for all of them;
//! - unified: a single pass where each labeled sample contributes only to
//!   the column of its own true class.
//!
//! Matrices are thresholded into per-class [`FeatureMask`]s and feed the
//! drift, outlier and redundancy analyses.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archive::{ArchiveReader, DatasetSplit, Selector};
use crate::error::{IfaError, Result};
use crate::fsutil;
use crate::schemes::{weighted_stack, Scheme, WeightedFeatureStack};

/// Spatial sum of each weighted feature map.
pub fn contribution(stack: &WeightedFeatureStack) -> Vec<f64> {
    let s = stack.spatial_size();
    stack.maps.chunks(s.max(1)).map(|m| m.iter().sum()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImMethod {
    PerClass,
    Unified,
}

/// `F x C` matrix of mean feature contributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMatrix {
    pub num_features: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    /// Row-major `F x C`: entry `(f, c)` at `f * C + c`.
    pub values: Vec<f64>,
    /// Population standard deviation of each entry's per-sample contributions.
    pub stds: Vec<f64>,
    pub counts: Vec<u64>,
    pub scheme: Option<Scheme>,
    pub method: ImMethod,
    pub archive_id: String,
    pub split: DatasetSplit,
}

impl ImportanceMatrix {
    pub fn get(&self, f: usize, c: usize) -> f64 {
        self.values[f * self.num_classes + c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.num_features).map(|f| self.get(f, c)).collect()
    }

    /// Columns with no contributing samples carry no information.
    pub fn is_available(&self, c: usize) -> bool {
        self.counts[c] > 0
    }

    fn same_shape(&self, other: &ImportanceMatrix) -> Result<()> {
        if self.num_features != other.num_features || self.num_classes != other.num_classes {
            return Err(IfaError::Incompatible(format!(
                "importance matrices are {}x{} and {}x{}",
                self.num_features, self.num_classes, other.num_features, other.num_classes
            )));
        }
        if self.scheme != other.scheme {
            return Err(IfaError::Incompatible(
                "importance matrices use different schemes".into(),
            ));
        }
        Ok(())
    }
}

/// Sum/count accumulator; merging partial accumulators over disjoint sample
/// sets reproduces the single-pass result.
#[derive(Debug, Clone, PartialEq)]
pub struct ImAccumulator {
    num_features: usize,
    num_classes: usize,
    sums: Vec<f64>,
    squares: Vec<f64>,
    counts: Vec<u64>,
}

impl ImAccumulator {
    pub fn new(num_features: usize, num_classes: usize) -> Self {
        ImAccumulator {
            num_features,
            num_classes,
            sums: vec![0.0; num_features * num_classes],
            squares: vec![0.0; num_features * num_classes],
            counts: vec![0; num_classes],
        }
    }

    pub fn add(&mut self, class_id: usize, contribution: &[f64]) {
        debug_assert_eq!(contribution.len(), self.num_features);
        for (f, &v) in contribution.iter().enumerate() {
            let i = f * self.num_classes + class_id;
            self.sums[i] += v;
            self.squares[i] += v * v;
        }
        self.counts[class_id] += 1;
    }

    pub fn merge(&mut self, other: &ImAccumulator) -> Result<()> {
        if self.num_features != other.num_features || self.num_classes != other.num_classes {
            return Err(IfaError::Incompatible("accumulator shapes differ".into()));
        }
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += b;
        }
        for (a, b) in self.squares.iter_mut().zip(&other.squares) {
            *a += b;
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn finish(&self) -> (Vec<f64>, Vec<f64>, Vec<u64>) {
        let mut values = vec![f64::NAN; self.sums.len()];
        let mut stds = vec![f64::NAN; self.sums.len()];
        for f in 0..self.num_features {
            for c in 0..self.num_classes {
                let n = self.counts[c];
                if n == 0 {
                    continue;
                }
                let i = f * self.num_classes + c;
                let mean = self.sums[i] / n as f64;
                values[i] = mean;
                stds[i] = (self.squares[i] / n as f64 - mean * mean).max(0.0).sqrt();
            }
        }
        (values, stds, self.counts.clone())
    }
}

/// One column of the per-class estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct ImColumn {
    pub class_id: i32,
    pub values: Vec<f64>,
    pub stds: Vec<f64>,
    pub count: u64,
}

/// Per-class column: mean contribution over every selected sample, all using
/// the gradients of `class_id`.
pub fn build_im_per_class(
    reader: &ArchiveReader,
    selector: &Selector,
    scheme: Scheme,
    class_id: i32,
) -> Result<ImColumn> {
    let m = reader.manifest();
    check_class(class_id, m.num_classes)?;
    let rows = reader.par_map(selector, |rec| match rec.grads_for(class_id) {
        Some(_) => Ok(Ok(contribution(&weighted_stack(rec, scheme, class_id)?))),
        None => Ok(Err(rec.sample_id)),
    })?;
    let missing: Vec<u64> = rows.iter().filter_map(|r| r.as_ref().err().copied()).collect();
    if !missing.is_empty() {
        return Err(IfaError::MissingGradients {
            class_id,
            sample_ids: missing,
        });
    }
    let mut acc = ImAccumulator::new(m.num_features, 1);
    for row in rows.iter().flatten() {
        acc.add(0, row);
    }
    let (values, stds, counts) = acc.finish();
    Ok(ImColumn {
        class_id,
        values,
        stds,
        count: counts[0],
    })
}

/// Full matrix from per-class columns for `classes`; other columns are unavailable.
pub fn build_im_per_class_matrix(
    reader: &ArchiveReader,
    selector: &Selector,
    scheme: Scheme,
    classes: &[i32],
) -> Result<ImportanceMatrix> {
    let m = reader.manifest();
    let (nf, nc) = (m.num_features, m.num_classes);
    let mut im = empty_matrix(reader, scheme, ImMethod::PerClass);
    for &c in classes {
        let col = build_im_per_class(reader, selector, scheme, c)?;
        for f in 0..nf {
            im.values[f * nc + c as usize] = col.values[f];
            im.stds[f * nc + c as usize] = col.stds[f];
        }
        im.counts[c as usize] = col.count;
    }
    Ok(im)
}

/// Unified matrix in one pass: each labeled sample adds its contribution,
/// computed with its own true-class gradients, to that class's column.
pub fn build_im_unified(reader: &ArchiveReader, selector: &Selector, scheme: Scheme) -> Result<ImportanceMatrix> {
    let m = reader.manifest();
    let rows = reader.par_map(selector, |rec| {
        if !rec.is_labeled() {
            return Ok(None);
        }
        match rec.grads_for(rec.true_class) {
            Some(_) => Ok(Some(Ok((
                rec.true_class as usize,
                contribution(&weighted_stack(rec, scheme, rec.true_class)?),
            )))),
            None => Ok(Some(Err((rec.true_class, rec.sample_id)))),
        }
    })?;
    let missing: Vec<(i32, u64)> = rows
        .iter()
        .flatten()
        .filter_map(|r| r.as_ref().err().copied())
        .collect();
    if let Some(&(class_id, _)) = missing.first() {
        return Err(IfaError::MissingGradients {
            class_id,
            sample_ids: missing.iter().map(|&(_, id)| id).collect(),
        });
    }
    let mut acc = ImAccumulator::new(m.num_features, m.num_classes);
    for (c, row) in rows.iter().flatten().flatten() {
        acc.add(*c, row);
    }
    Ok(finish_matrix(reader, scheme, ImMethod::Unified, &acc))
}

fn empty_matrix(reader: &ArchiveReader, scheme: Scheme, method: ImMethod) -> ImportanceMatrix {
    let m = reader.manifest();
    finish_matrix(
        reader,
        scheme,
        method,
        &ImAccumulator::new(m.num_features, m.num_classes),
    )
}

fn finish_matrix(reader: &ArchiveReader, scheme: Scheme, method: ImMethod, acc: &ImAccumulator) -> ImportanceMatrix {
    let m = reader.manifest();
    let (values, stds, counts) = acc.finish();
    ImportanceMatrix {
        num_features: m.num_features,
        num_classes: m.num_classes,
        class_names: m.class_names.clone(),
        values,
        stds,
        counts,
        scheme: Some(scheme),
        method,
        archive_id: m.archive_id.clone(),
        split: m.dataset_split,
    }
}

fn check_class(class_id: i32, num_classes: usize) -> Result<()> {
    if class_id < 0 || class_id as usize >= num_classes {
        return Err(IfaError::InvalidArgument(format!(
            "class {class_id} outside [0, {num_classes})"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Masks

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum MaskRule {
    TopPct { k: f64 },
    BottomPct { k: f64 },
    Explicit { features: Vec<usize> },
    AllOnes,
}

/// Number of features kept by `top_pct(k)`: `ceil(k / 100 * F)`.
pub fn top_count(k: f64, num_features: usize) -> usize {
    // guard against k * F / 100 landing a hair above an integer
    let raw = k * num_features as f64 / 100.0;
    let n = (raw - 1e-9 * raw.max(1.0)).ceil().max(0.0) as usize;
    n.clamp(1, num_features)
}

/// Per-class binary feature selection.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMask {
    pub num_features: usize,
    /// `classes[c][f]` is true when feature `f` is kept for class `c`.
    pub classes: Vec<Vec<bool>>,
    pub rule: MaskRule,
    pub source: String,
}

impl FeatureMask {
    pub fn all_ones(num_features: usize, num_classes: usize) -> Self {
        FeatureMask {
            num_features,
            classes: vec![vec![true; num_features]; num_classes],
            rule: MaskRule::AllOnes,
            source: String::new(),
        }
    }

    pub fn for_class(&self, class_id: i32) -> Option<&[bool]> {
        self.classes.get(usize::try_from(class_id).ok()?).map(Vec::as_slice)
    }

    pub fn selected(&self, class_id: usize) -> Vec<usize> {
        self.classes[class_id]
            .iter()
            .enumerate()
            .filter_map(|(f, &on)| on.then_some(f))
            .collect()
    }

    /// Every class row inverted. The rule is kept; `source` notes the inversion.
    pub fn complement(&self) -> FeatureMask {
        FeatureMask {
            num_features: self.num_features,
            classes: self
                .classes
                .iter()
                .map(|row| row.iter().map(|&b| !b).collect())
                .collect(),
            rule: self.rule.clone(),
            source: format!("complement of {}", self.source),
        }
    }

    pub fn describe(&self) -> String {
        match &self.rule {
            MaskRule::TopPct { k } => format!("top_pct({k})"),
            MaskRule::BottomPct { k } => format!("bottom_pct({k})"),
            MaskRule::Explicit { features } => format!("explicit({features:?})"),
            MaskRule::AllOnes => "all_ones".into(),
        }
    }
}

fn top_indices(column: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..column.len()).collect();
    // descending by value, ties to the lower index
    order.sort_by(|&a, &b| column[b].total_cmp(&column[a]).then(a.cmp(&b)));
    order.truncate(n);
    order
}

pub fn threshold_im(im: &ImportanceMatrix, rule: &MaskRule) -> Result<FeatureMask> {
    let nf = im.num_features;
    let pct_ok = |k: f64| k > 0.0 && k <= 100.0;
    let classes = match rule {
        MaskRule::TopPct { k } | MaskRule::BottomPct { k } if !pct_ok(*k) => {
            return Err(IfaError::InvalidArgument(format!("percentage {k} outside (0, 100]")));
        }
        MaskRule::TopPct { k } => (0..im.num_classes)
            .map(|c| {
                let mut row = vec![false; nf];
                if im.is_available(c) {
                    for f in top_indices(&im.column(c), top_count(*k, nf)) {
                        row[f] = true;
                    }
                }
                row
            })
            .collect(),
        MaskRule::BottomPct { k } => (0..im.num_classes)
            .map(|c| {
                if !im.is_available(c) {
                    return vec![false; nf];
                }
                if *k >= 100.0 {
                    return vec![true; nf];
                }
                let mut row = vec![true; nf];
                for f in top_indices(&im.column(c), top_count(100.0 - k, nf)) {
                    row[f] = false;
                }
                row
            })
            .collect(),
        MaskRule::Explicit { features } => {
            if let Some(&bad) = features.iter().find(|&&f| f >= nf) {
                return Err(IfaError::InvalidArgument(format!(
                    "feature index {bad} outside [0, {nf})"
                )));
            }
            let mut row = vec![false; nf];
            for &f in features {
                row[f] = true;
            }
            vec![row; im.num_classes]
        }
        MaskRule::AllOnes => vec![vec![true; nf]; im.num_classes],
    };
    Ok(FeatureMask {
        num_features: nf,
        classes,
        rule: rule.clone(),
        source: format!(
            "{}:{:?}:{}",
            im.archive_id,
            im.method,
            im.scheme.map_or("unknown", Scheme::name)
        ),
    })
}

// ---------------------------------------------------------------------------
// Analyses

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDrift {
    pub class_id: usize,
    /// `test - train`, per feature.
    pub difference: Vec<f64>,
    /// `||test - train|| / ||train||`; `None` when the train column is zero.
    pub normalized_norm: Option<f64>,
    /// Up to ten features with the largest absolute difference.
    pub top_features: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub classes: Vec<ClassDrift>,
}

/// Compares train and test importance; large drift hints at overfitting.
pub fn im_drift(train: &ImportanceMatrix, test: &ImportanceMatrix) -> Result<DriftReport> {
    train.same_shape(test)?;
    let classes = (0..train.num_classes)
        .filter(|&c| train.is_available(c) && test.is_available(c))
        .map(|c| {
            let a = train.column(c);
            let b = test.column(c);
            let difference: Vec<f64> = b.iter().zip(&a).map(|(y, x)| y - x).collect();
            let base = l2(&a);
            let abs: Vec<f64> = difference.iter().map(|d| d.abs()).collect();
            ClassDrift {
                class_id: c,
                normalized_norm: (base > 0.0).then(|| l2(&difference) / base),
                top_features: top_indices(&abs, 10.min(abs.len())),
                difference,
            }
        })
        .collect();
    Ok(DriftReport { classes })
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `1 - cos(sample, column)`, in `[0, 2]`. A zero sample vector scores 1.
pub fn outlier_score(sample_contribution: &[f64], im_column: &[f64]) -> Result<f64> {
    if sample_contribution.len() != im_column.len() {
        return Err(IfaError::Incompatible("vector lengths differ".into()));
    }
    let nc = l2(im_column);
    if nc == 0.0 {
        return Err(IfaError::InvalidArgument("importance column is all zero".into()));
    }
    let ns = l2(sample_contribution);
    if ns == 0.0 {
        return Ok(1.0);
    }
    let dot: f64 = sample_contribution.iter().zip(im_column).map(|(a, b)| a * b).sum();
    Ok((1.0 - dot / (ns * nc)).clamp(0.0, 2.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyReport {
    pub eps: f64,
    /// Absolute cutoff: `eps * max |IM|`.
    pub threshold: f64,
    pub ratio: f64,
    pub features: Vec<usize>,
}

/// Features whose largest absolute importance over available classes stays
/// below `eps` times the global maximum.
pub fn redundancy_report(im: &ImportanceMatrix, eps: f64) -> Result<RedundancyReport> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(IfaError::InvalidArgument(format!("eps {eps} outside (0, 1)")));
    }
    let classes: Vec<usize> = (0..im.num_classes).filter(|&c| im.is_available(c)).collect();
    let row_max: Vec<f64> = (0..im.num_features)
        .map(|f| classes.iter().map(|&c| im.get(f, c).abs()).fold(0.0, f64::max))
        .collect();
    let global = row_max.iter().copied().fold(0.0, f64::max);
    let threshold = eps * global;
    let features: Vec<usize> = (0..im.num_features).filter(|&f| row_max[f] < threshold).collect();
    Ok(RedundancyReport {
        eps,
        threshold,
        ratio: features.len() as f64 / im.num_features as f64,
        features,
    })
}

// ---------------------------------------------------------------------------
// Persistence

/// `%.9g`-style formatting: 9 significant digits, trailing zeros trimmed.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if !(-5..9).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        trim_zeros(&format!("{x:.*}", (8 - exp) as usize)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

const UNAVAILABLE: &str = "NA";

fn meta_path(csv: &Path) -> PathBuf {
    let mut name = csv.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    csv.with_file_name(name)
}

#[derive(Serialize, Deserialize)]
struct ImMeta {
    scheme: Option<Scheme>,
    method: ImMethod,
    archive_id: String,
    split: DatasetSplit,
    counts: Vec<u64>,
    stds: Vec<f64>,
}

/// Renders the `feature,<class names...>` table; unavailable columns hold `NA`.
pub fn im_to_csv(im: &ImportanceMatrix) -> String {
    let mut out = String::from("feature");
    for name in &im.class_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for f in 0..im.num_features {
        write!(out, "{f}").unwrap();
        for c in 0..im.num_classes {
            out.push(',');
            if im.is_available(c) {
                out.push_str(&format_sig9(im.get(f, c)));
            } else {
                out.push_str(UNAVAILABLE);
            }
        }
        out.push('\n');
    }
    out
}

/// Writes `im.csv` plus an `im.csv.meta.json` sidecar with counts and provenance.
pub fn write_im_csv(path: &Path, im: &ImportanceMatrix) -> Result<()> {
    fsutil::write_atomic(path, im_to_csv(im).as_bytes())?;
    let stds = im.stds.iter().map(|s| if s.is_finite() { *s } else { 0.0 }).collect();
    fsutil::write_json_atomic(
        &meta_path(path),
        &ImMeta {
            scheme: im.scheme,
            method: im.method,
            archive_id: im.archive_id.clone(),
            split: im.split,
            counts: im.counts.clone(),
            stds,
        },
    )
}

pub fn read_im_csv(path: &Path) -> Result<ImportanceMatrix> {
    let text = String::from_utf8(fsutil::read_bytes(path)?)
        .map_err(|_| IfaError::InvalidArgument(format!("{} is not UTF-8", path.display())))?;
    let bad = |msg: String| IfaError::InvalidArgument(format!("{}: {msg}", path.display()));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let mut cols = header.split(',');
    if cols.next() != Some("feature") {
        return Err(bad("header must start with `feature`".into()));
    }
    let class_names: Vec<String> = cols.map(str::to_string).collect();
    let nc = class_names.len();
    let mut values = Vec::new();
    let mut available = vec![true; nc];
    for (f, line) in lines.filter(|l| !l.is_empty()).enumerate() {
        let mut cells = line.split(',');
        if cells.next() != Some(f.to_string().as_str()) {
            return Err(bad(format!("row {f} out of order")));
        }
        let row: Vec<&str> = cells.collect();
        if row.len() != nc {
            return Err(bad(format!("row {f} has {} cells", row.len())));
        }
        for (c, cell) in row.iter().enumerate() {
            if *cell == UNAVAILABLE {
                available[c] = false;
                values.push(f64::NAN);
            } else {
                values.push(cell.parse().map_err(|_| bad(format!("bad number {cell:?}")))?);
            }
        }
    }
    let nf = values.len() / nc.max(1);
    let meta: Option<ImMeta> = meta_path(path)
        .exists()
        .then(|| fsutil::read_json(&meta_path(path)))
        .transpose()?;
    let (scheme, method, archive_id, split, counts, stds) = match meta {
        Some(m) => (m.scheme, m.method, m.archive_id, m.split, m.counts, m.stds),
        None => (
            None,
            ImMethod::PerClass,
            path.display().to_string(),
            DatasetSplit::Other,
            available.iter().map(|&a| a as u64).collect(),
            vec![0.0; values.len()],
        ),
    };
    if counts.len() != nc || stds.len() != values.len() {
        return Err(bad("sidecar metadata does not match the table".into()));
    }
    Ok(ImportanceMatrix {
        num_features: nf,
        num_classes: nc,
        class_names,
        values,
        stds,
        counts,
        scheme,
        method,
        archive_id,
        split,
    })
}

#[derive(Serialize, Deserialize)]
struct MaskFileClass {
    class_id: usize,
    selected: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct MaskFile {
    num_features: usize,
    provenance: MaskProvenanceFile,
    classes: Vec<MaskFileClass>,
}

#[derive(Serialize, Deserialize)]
struct MaskProvenanceFile {
    #[serde(flatten)]
    rule: MaskRule,
    source: String,
}

pub fn write_mask_json(path: &Path, mask: &FeatureMask) -> Result<()> {
    let file = MaskFile {
        num_features: mask.num_features,
        provenance: MaskProvenanceFile {
            rule: mask.rule.clone(),
            source: mask.source.clone(),
        },
        classes: (0..mask.classes.len())
            .map(|c| MaskFileClass {
                class_id: c,
                selected: mask.selected(c),
            })
            .collect(),
    };
    fsutil::write_json_atomic(path, &file)
}

pub fn read_mask_json(path: &Path) -> Result<FeatureMask> {
    let file: MaskFile = fsutil::read_json(path)?;
    let mut classes = vec![vec![false; file.num_features]; file.classes.len()];
    for entry in &file.classes {
        let row = classes
            .get_mut(entry.class_id)
            .ok_or_else(|| IfaError::InvalidArgument(format!("mask class {} out of range", entry.class_id)))?;
        for &f in &entry.selected {
            *row.get_mut(f)
                .ok_or_else(|| IfaError::InvalidArgument(format!("mask feature {f} out of range")))? = true;
        }
    }
    Ok(FeatureMask {
        num_features: file.num_features,
        classes,
        rule: file.provenance.rule,
        source: file.provenance.source,
    })
}
