//! Evaluation metrics.
//!
//! - consistency: correlation of per-sample CAM sums with the selected logit;
//! - masked accuracy: replays the classifier head with feature paths blocked;
//! - increase/drop: confidence change on CAM-masked inputs, run by an external
//!   model owner through a file-based job protocol (`jobs/manifest.json`,
//!   `jobs/<id>.maskf32`, `results.json`).

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::{ArchiveReader, HeadKind, HeadSpec, SampleRecord, Selector};
use crate::campipe::{encode_cam_file, resize_spatial, CamFile, CamResult, ScaleMode};
use crate::error::{IfaError, Result};
use crate::fsutil;
use crate::importance::FeatureMask;
use crate::schemes::Scheme;

/// Level above which both Jarque-Bera p-values must lie for Pearson to be selected.
pub const NORMALITY_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JarqueBera {
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coefficient {
    Pearson,
    Spearman,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub n: usize,
    pub pearson: f64,
    pub spearman: f64,
    pub normality_cam_sum: JarqueBera,
    pub normality_logit: JarqueBera,
    pub selected_coefficient: Coefficient,
    pub selection_rule: String,
}

impl Correlation {
    pub fn selected(&self) -> f64 {
        match self.selected_coefficient {
            Coefficient::Pearson => self.pearson,
            Coefficient::Spearman => self.spearman,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyPair {
    pub sample_id: u64,
    pub cam_sum: f64,
    pub logit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// `None` when CAMs were built for each sample's true class.
    pub class_id: Option<i32>,
    pub scheme: Scheme,
    pub scale_mode: ScaleMode,
    pub cam_name: String,
    #[serde(flatten)]
    pub correlation: Correlation,
    pub pairs: Vec<ConsistencyPair>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Pearson correlation; `None` when either series is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks, ties get the average of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Jarque-Bera from population skewness and kurtosis; p-value from chi-square(2).
pub fn jarque_bera(x: &[f64]) -> Option<JarqueBera> {
    let n = x.len() as f64;
    let m = mean(x);
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for v in x {
        let d = v - m;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
    if m2 == 0.0 {
        return None;
    }
    let s = m3 / m2.powf(1.5);
    let k = m4 / (m2 * m2);
    let statistic = n * (s * s / 6.0 + (k - 3.0) * (k - 3.0) / 24.0);
    Some(JarqueBera {
        statistic,
        p_value: (-statistic / 2.0).exp(),
    })
}

pub fn consistency(cam_sums: &[f64], logits: &[f64]) -> Result<Correlation> {
    let n = cam_sums.len();
    if n != logits.len() {
        return Err(IfaError::InvalidArgument(format!(
            "series lengths differ: {n} cam sums, {} logits",
            logits.len()
        )));
    }
    if n < 3 {
        return Err(IfaError::Undefined(format!(
            "correlation needs at least 3 pairs, got {n}"
        )));
    }
    if cam_sums.iter().chain(logits).any(|v| !v.is_finite()) {
        return Err(IfaError::Undefined("series contain non-finite values".into()));
    }
    let undefined = |what: &str| IfaError::Undefined(format!("{what} series is constant"));
    let normality_cam_sum = jarque_bera(cam_sums).ok_or_else(|| undefined("cam sum"))?;
    let normality_logit = jarque_bera(logits).ok_or_else(|| undefined("logit"))?;
    let pearson = pearson(cam_sums, logits).ok_or_else(|| undefined("input"))?;
    let spearman = spearman(cam_sums, logits).ok_or_else(|| undefined("rank"))?;
    let normal = normality_cam_sum.p_value > NORMALITY_ALPHA && normality_logit.p_value > NORMALITY_ALPHA;
    Ok(Correlation {
        n,
        pearson,
        spearman,
        normality_cam_sum,
        normality_logit,
        selected_coefficient: if normal {
            Coefficient::Pearson
        } else {
            Coefficient::Spearman
        },
        selection_rule: format!("pearson iff both Jarque-Bera p-values > {NORMALITY_ALPHA}, else spearman"),
    })
}

/// Pairs each CAM's sum with the archived logit of its class.
pub fn consistency_report(reader: &ArchiveReader, cams: &[CamResult]) -> Result<ConsistencyReport> {
    let first = cams
        .first()
        .ok_or_else(|| IfaError::Empty("no CAMs to correlate".into()))?;
    let mut pairs = Vec::with_capacity(cams.len());
    for cam in cams {
        let rec = reader.read_sample(cam.sample_id)?;
        let logit = *rec
            .logits
            .get(cam.class_id as usize)
            .ok_or_else(|| IfaError::Incompatible(format!("sample {} has no logit {}", cam.sample_id, cam.class_id)))?;
        pairs.push(ConsistencyPair {
            sample_id: cam.sample_id,
            cam_sum: cam.sum,
            logit: logit as f64,
        });
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.cam_sum).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.logit).collect();
    let single_class = cams.iter().all(|c| c.class_id == first.class_id);
    Ok(ConsistencyReport {
        class_id: single_class.then_some(first.class_id),
        scheme: first.scheme,
        scale_mode: first.scale_mode,
        cam_name: first.name(),
        correlation: consistency(&xs, &ys)?,
        pairs,
    })
}

pub fn consistency_csv(report: &ConsistencyReport) -> String {
    let mut out = String::from("sample_id,cam_sum,logit\n");
    for p in &report.pairs {
        out.push_str(&format!("{},{},{}\n", p.sample_id, p.cam_sum, p.logit));
    }
    out
}

// ---------------------------------------------------------------------------
// Head replay

/// Logits recomputed from archived features with blocked feature paths.
///
/// `features` is `F x S` row-major; `mask[f] == false` zeroes feature `f`.
pub fn replay_logits(
    head: &HeadSpec,
    features: &[f32],
    num_features: usize,
    spatial: usize,
    mask: Option<&[bool]>,
) -> Result<Vec<f64>> {
    if features.len() != num_features * spatial {
        return Err(IfaError::InvalidArgument(format!(
            "features have {} values, expected {num_features} x {spatial}",
            features.len()
        )));
    }
    if let Some(m) = mask {
        if m.len() != num_features {
            return Err(IfaError::InvalidArgument(format!(
                "mask has {} entries, expected {num_features}",
                m.len()
            )));
        }
    }
    let on = |f: usize| mask.is_none_or(|m| m[f]);
    let width = match head.kind {
        HeadKind::External => {
            return Err(IfaError::Unsupported(
                "external heads cannot be replayed; use the masked-input job protocol (eval incdrop)".into(),
            ))
        }
        HeadKind::GapLinear => num_features,
        HeadKind::FlattenLinear => num_features * spatial,
    };
    if head.bias.len() != head.weights.len() || head.weights.iter().any(|r| r.len() != width) {
        return Err(IfaError::Incompatible(format!(
            "head weights do not match {num_features} features of size {spatial}"
        )));
    }
    let pooled: Vec<f64> = match head.kind {
        HeadKind::GapLinear => (0..num_features)
            .map(|f| {
                if on(f) {
                    features[f * spatial..(f + 1) * spatial]
                        .iter()
                        .map(|&v| v as f64)
                        .sum::<f64>()
                        / spatial as f64
                } else {
                    0.0
                }
            })
            .collect(),
        _ => features
            .iter()
            .enumerate()
            .map(|(i, &v)| if on(i / spatial) { v as f64 } else { 0.0 })
            .collect(),
    };
    Ok(head
        .weights
        .iter()
        .zip(&head.bias)
        .map(|(row, &b)| row.iter().zip(&pooled).map(|(&w, &x)| w as f64 * x).sum::<f64>() + b as f64)
        .collect())
}

/// Index of the largest value, ties to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Which mask row blocks a sample's features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRowPolicy {
    /// Row of the class predicted with every feature available.
    Predicted,
    /// Row of the sample's true class.
    TrueClass,
    /// Union of all class rows.
    Union,
}

impl std::str::FromStr for MaskRowPolicy {
    type Err = IfaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predicted" => Ok(MaskRowPolicy::Predicted),
            "true" | "true-class" => Ok(MaskRowPolicy::TrueClass),
            "union" => Ok(MaskRowPolicy::Union),
            _ => Err(IfaError::InvalidArgument(format!("unknown mask row policy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedAccuracyReport {
    pub n: usize,
    pub accuracy_all: f64,
    pub accuracy_principal: f64,
    pub accuracy_nonprincipal: f64,
    pub mask: String,
    pub mask_source: String,
    pub row_policy: MaskRowPolicy,
    pub sample_ids: Vec<u64>,
    pub predicted_all: Vec<usize>,
    pub predicted_principal: Vec<usize>,
    pub predicted_nonprincipal: Vec<usize>,
}

fn mask_row(mask: &FeatureMask, policy: MaskRowPolicy, predicted: usize, true_class: i32) -> Result<Vec<bool>> {
    let row = |c: usize| {
        mask.classes
            .get(c)
            .cloned()
            .ok_or_else(|| IfaError::Incompatible(format!("mask has no row for class {c}")))
    };
    match policy {
        MaskRowPolicy::Predicted => row(predicted),
        MaskRowPolicy::TrueClass => row(true_class as usize),
        MaskRowPolicy::Union => Ok((0..mask.num_features)
            .map(|f| mask.classes.iter().any(|r| r[f]))
            .collect()),
    }
}

struct Predictions {
    id: u64,
    truth: usize,
    all: usize,
    principal: usize,
    nonprincipal: usize,
}

fn predict_sample(
    head: &HeadSpec,
    rec: &SampleRecord,
    mask: &FeatureMask,
    policy: MaskRowPolicy,
) -> Result<Predictions> {
    let (nf, s) = (rec.num_features, rec.spatial_size());
    let all = argmax(&replay_logits(head, &rec.features, nf, s, None)?);
    let row = mask_row(mask, policy, all, rec.true_class)?;
    let inverse: Vec<bool> = row.iter().map(|b| !b).collect();
    Ok(Predictions {
        id: rec.sample_id,
        truth: rec.true_class as usize,
        all,
        principal: argmax(&replay_logits(head, &rec.features, nf, s, Some(&row))?),
        nonprincipal: argmax(&replay_logits(head, &rec.features, nf, s, Some(&inverse))?),
    })
}

/// Accuracy with every feature, with the mask, and with its complement,
/// over the labeled selected samples.
pub fn masked_accuracy(
    reader: &ArchiveReader,
    selector: &Selector,
    mask: &FeatureMask,
    policy: MaskRowPolicy,
) -> Result<MaskedAccuracyReport> {
    let manifest = reader.manifest();
    let head = manifest
        .head
        .as_ref()
        .ok_or_else(|| IfaError::Unsupported("archive has no head to replay; use eval incdrop".into()))?;
    if head.kind == HeadKind::External {
        return Err(IfaError::Unsupported(
            "external heads cannot be replayed; use the masked-input job protocol (eval incdrop)".into(),
        ));
    }
    if mask.num_features != manifest.num_features {
        return Err(IfaError::Incompatible(format!(
            "mask covers {} features, archive has {}",
            mask.num_features, manifest.num_features
        )));
    }
    let preds: Vec<Predictions> = reader
        .par_map(selector, |rec| {
            if rec.is_labeled() {
                predict_sample(head, rec, mask, policy).map(Some)
            } else {
                Ok(None)
            }
        })?
        .into_iter()
        .flatten()
        .collect();
    if preds.is_empty() {
        return Err(IfaError::Empty("no labeled samples".into()));
    }
    let n = preds.len();
    let acc = |pick: fn(&Predictions) -> usize| preds.iter().filter(|p| pick(p) == p.truth).count() as f64 / n as f64;
    Ok(MaskedAccuracyReport {
        n,
        accuracy_all: acc(|p| p.all),
        accuracy_principal: acc(|p| p.principal),
        accuracy_nonprincipal: acc(|p| p.nonprincipal),
        mask: mask.describe(),
        mask_source: mask.source.clone(),
        row_policy: policy,
        sample_ids: preds.iter().map(|p| p.id).collect(),
        predicted_all: preds.iter().map(|p| p.all).collect(),
        predicted_principal: preds.iter().map(|p| p.principal).collect(),
        predicted_nonprincipal: preds.iter().map(|p| p.nonprincipal).collect(),
    })
}

// ---------------------------------------------------------------------------
// Increase / drop

/// ReLU, then min-max to `[0, 1]`. A constant positive map becomes all ones.
/// Values below `threshold` are zeroed afterwards.
pub fn normalize_mask(map: &mut [f64], threshold: Option<f64>) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in map.iter_mut() {
        *v = v.max(0.0);
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    for v in map.iter_mut() {
        *v = if hi > lo {
            (*v - lo) / (hi - lo)
        } else if hi > 0.0 {
            1.0
        } else {
            0.0
        };
        if threshold.is_some_and(|t| *v < t) {
            *v = 0.0;
        }
    }
}

pub fn mask_file_name(sample_id: u64) -> String {
    format!("{sample_id:08}.maskf32")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskJob {
    pub sample_id: u64,
    pub class: i32,
    /// Relative to the manifest's directory.
    pub mask_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobManifest {
    pub archive_id: String,
    pub cam_name: String,
    pub threshold: Option<f64>,
    pub jobs: Vec<MaskJob>,
}

/// Writes one input-sized mask per CAM and `manifest.json` into `jobs_dir`.
pub fn emit_mask_jobs(
    reader: &ArchiveReader,
    cams: &[CamResult],
    jobs_dir: &Path,
    threshold: Option<f64>,
) -> Result<JobManifest> {
    let mut jobs = Vec::with_capacity(cams.len());
    for cam in cams {
        let rec = reader.read_sample(cam.sample_id)?;
        let input = rec.input.as_ref().ok_or_else(|| {
            IfaError::Unsupported(format!(
                "sample {} has no stored input; masks need inputs",
                cam.sample_id
            ))
        })?;
        let map: Vec<f64> = cam.map.iter().map(|&v| v as f64).collect();
        let mut mask = resize_spatial(&map, &[cam.dims.0, cam.dims.1], (input.height, input.width))?;
        normalize_mask(&mut mask, threshold);
        let file = mask_file_name(cam.sample_id);
        let body = CamFile {
            sample_id: cam.sample_id,
            class_id: cam.class_id,
            scale_mode: cam.scale_mode,
            dims: (input.height, input.width),
            data: mask.into_iter().map(|v| v as f32).collect(),
        };
        fsutil::write_atomic(&jobs_dir.join(&file), &encode_cam_file(&body))?;
        jobs.push(MaskJob {
            sample_id: cam.sample_id,
            class: cam.class_id,
            mask_file: file,
        });
    }
    let manifest = JobManifest {
        archive_id: reader.manifest().archive_id.clone(),
        cam_name: cams.first().map(CamResult::name).unwrap_or_default(),
        threshold,
        jobs,
    };
    fsutil::write_json_atomic(&jobs_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// One line of `results.json`: original and masked-input confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub sample_id: u64,
    #[serde(rename = "Y")]
    pub y: f64,
    #[serde(rename = "O")]
    pub o: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncDropReport {
    pub n: usize,
    pub average_increase: f64,
    pub average_drop: f64,
}

pub fn collect_inc_drop(results: &[JobResult]) -> Result<IncDropReport> {
    if results.is_empty() {
        return Err(IfaError::Empty("no job results".into()));
    }
    let mut drop = 0.0;
    let mut increase = 0usize;
    for r in results {
        if !(r.y > 0.0 && r.y <= 1.0) {
            return Err(IfaError::Invariant(format!(
                "sample {}: original confidence Y = {} outside (0, 1]",
                r.sample_id, r.y
            )));
        }
        if !(0.0..=1.0).contains(&r.o) {
            return Err(IfaError::Invariant(format!(
                "sample {}: masked confidence O = {} outside [0, 1]",
                r.sample_id, r.o
            )));
        }
        drop += (r.y - r.o).max(0.0) / r.y;
        increase += usize::from(r.o > r.y);
    }
    let n = results.len();
    Ok(IncDropReport {
        n,
        average_increase: 100.0 * increase as f64 / n as f64,
        average_drop: 100.0 * drop / n as f64,
    })
}

/// Reads `results.json`, checking every id belongs to the job manifest.
pub fn read_results(path: &Path, manifest: Option<&JobManifest>) -> Result<Vec<JobResult>> {
    let results: Vec<JobResult> = fsutil::read_json(path)?;
    if let Some(m) = manifest {
        let ids: BTreeSet<u64> = m.jobs.iter().map(|j| j.sample_id).collect();
        if let Some(r) = results.iter().find(|r| !ids.contains(&r.sample_id)) {
            return Err(IfaError::Incompatible(format!(
                "result for sample {} has no job in the manifest",
                r.sample_id
            )));
        }
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn linear_and_monotone() {
        let c = consistency(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap();
        assert!((c.pearson - 1.0).abs() < 1e-15);
        assert!((c.spearman - 1.0).abs() < 1e-15);
        let c = consistency(&[1.0, 2.0, 3.0], &[1.0, 8.0, 27.0]).unwrap();
        assert_eq!(c.spearman, 1.0);
        assert!(c.pearson < 1.0);
    }

    #[test]
    fn constant_or_short_is_undefined() {
        assert!(matches!(
            consistency(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(IfaError::Undefined(_))
        ));
        assert!(matches!(
            consistency(&[1.0, 2.0], &[1.0, 2.0]),
            Err(IfaError::Undefined(_))
        ));
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn jarque_bera_symmetric_sample() {
        // skewness 0, kurtosis of {-1, 0, 1} is 1.5
        let jb = jarque_bera(&[-1.0, 0.0, 1.0]).unwrap();
        assert!((jb.statistic - 3.0 * (1.5f64 - 3.0).powi(2) / 24.0).abs() < 1e-12);
        assert!((jb.p_value - (-jb.statistic / 2.0).exp()).abs() < 1e-15);
    }

    fn eye_head() -> HeadSpec {
        HeadSpec {
            kind: HeadKind::GapLinear,
            weights: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            bias: vec![0.0, 0.0],
        }
    }

    #[test]
    fn replay_identity_head() {
        // GAP(A) = (2, 3)
        let feats = [1.0, 3.0, 2.0, 4.0];
        assert_eq!(replay_logits(&eye_head(), &feats, 2, 2, None).unwrap(), vec![2.0, 3.0]);
        assert_eq!(
            replay_logits(&eye_head(), &feats, 2, 2, Some(&[true, false])).unwrap(),
            vec![2.0, 0.0]
        );
        let ext = HeadSpec {
            kind: HeadKind::External,
            weights: vec![],
            bias: vec![],
        };
        assert!(matches!(
            replay_logits(&ext, &feats, 2, 2, None),
            Err(IfaError::Unsupported(_))
        ));
    }

    #[test]
    fn replay_flatten_blocks_feature_blocks() {
        let head = HeadSpec {
            kind: HeadKind::FlattenLinear,
            weights: vec![vec![1.0, 2.0, 3.0, 4.0]],
            bias: vec![0.5],
        };
        let feats = [1.0, 1.0, 1.0, 1.0];
        assert_eq!(replay_logits(&head, &feats, 2, 2, None).unwrap(), vec![10.5]);
        assert_eq!(
            replay_logits(&head, &feats, 2, 2, Some(&[false, true])).unwrap(),
            vec![7.5]
        );
    }

    #[test]
    fn argmax_ties_low() {
        assert_eq!(argmax(&[0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn inc_drop_examples() {
        let r = |y, o| JobResult { sample_id: 0, y, o };
        let one = collect_inc_drop(&[r(0.8, 0.6)]).unwrap();
        assert!((one.average_drop - 25.0).abs() < 1e-12);
        assert_eq!(one.average_increase, 0.0);
        let up = collect_inc_drop(&[r(0.8, 0.9)]).unwrap();
        assert_eq!((up.average_drop, up.average_increase), (0.0, 100.0));
        let same = collect_inc_drop(&[r(0.3, 0.3), r(1.0, 1.0)]).unwrap();
        assert_eq!((same.average_drop, same.average_increase), (0.0, 0.0));
        assert!(collect_inc_drop(&[r(0.0, 0.5)]).is_err());
    }

    #[test]
    fn mask_normalization() {
        let mut ones = vec![1.0; 4];
        normalize_mask(&mut ones, None);
        assert_eq!(ones, vec![1.0; 4]);
        let mut neg = vec![-1.0, -3.0];
        normalize_mask(&mut neg, None);
        assert_eq!(neg, vec![0.0, 0.0]);
        let mut m = vec![-2.0, 0.0, 1.0, 4.0];
        normalize_mask(&mut m, Some(0.5));
        assert_eq!(m, vec![0.0, 0.0, 0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn spearman_invariant_under_increasing_map(
            xs in prop::collection::vec(-5.0f64..5.0, 3..60),
            ys in prop::collection::vec(-5.0f64..5.0, 60),
        ) {
            let ys = &ys[..xs.len()];
            let squashed: Vec<f64> = xs.iter().map(|&v| (0.7 * v + 0.2).tanh()).collect();
            // tanh may merge distinct values at f64 resolution; compare ranks only where it does not
            prop_assume!(average_ranks(&squashed) == average_ranks(&xs));
            prop_assert_eq!(spearman(&xs, ys), spearman(&squashed, ys));
        }

        #[test]
        fn correlations_bounded(xs in prop::collection::vec(-5.0f64..5.0, 3..40), ys in prop::collection::vec(-5.0f64..5.0, 40)) {
            let ys = &ys[..xs.len()];
            if let Ok(c) = consistency(&xs, ys) {
                prop_assert!((-1.0..=1.0).contains(&c.pearson));
                prop_assert!((-1.0..=1.0).contains(&c.spearman));
            }
        }

        #[test]
        fn drop_zero_when_masked_not_lower(pairs in prop::collection::vec((0.01f64..=1.0, 0.0f64..=1.0), 1..50)) {
            let rs: Vec<JobResult> = pairs.iter().enumerate()
                .map(|(i, &(y, t))| JobResult { sample_id: i as u64, y, o: y + t * (1.0 - y) })
                .collect();
            let r = collect_inc_drop(&rs).unwrap();
            prop_assert_eq!(r.average_drop, 0.0);
            prop_assert!((0.0..=100.0).contains(&r.average_increase));
        }
    }
}
