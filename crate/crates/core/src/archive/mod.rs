//! Feature archives: the on-disk interchange between a model and the analysis.
//!
//! An archive is a directory:
//!
//! ```text
//! <archive>/manifest.json
//! <archive>/samples/00000000.rec
//! <archive>/samples/00000001.rec
//! ...
//! ```
//!
//! Each record stores one sample's target-layer features, the gradients of
//! selected logits with respect to those features, the logits, the true
//! class and optionally the input image. Payloads are little-endian `f32`,
//! feature-major then row-major over the spatial dims.

mod record;
mod validate;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{IfaError, Result};
use crate::fsutil;

pub use record::{decode as decode_record, encode as encode_record, RECORD_MAGIC, RECORD_VERSION};
pub use validate::{validate_archive, Finding, FindingKind, ValidationReport};

pub const MANIFEST_FORMAT: &str = "ifa-archive";
pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const SAMPLES_DIR: &str = "samples";
const PAR_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSplit {
    Train,
    Validation,
    Test,
    #[default]
    Other,
}

impl std::str::FromStr for DatasetSplit {
    type Err = IfaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "validation" => Ok(Self::Validation),
            "test" => Ok(Self::Test),
            "other" => Ok(Self::Other),
            _ => Err(IfaError::InvalidArgument(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Global average pool followed by an affine map; weights are `C x F`.
    GapLinear,
    /// Flatten followed by an affine map; weights are `C x (F * prod(dims))`.
    FlattenLinear,
    /// Head lives outside the archive and can only be replayed by the model owner.
    External,
}

/// Classifier head description, so logits can be replayed with masked features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    #[serde(default)]
    pub weights: Vec<Vec<f32>>,
    #[serde(default)]
    pub bias: Vec<f32>,
}

/// Per-channel constants the extractor used to normalize inputs stored in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNormalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default = "default_format")]
    pub format: String,
    #[serde(default = "default_version")]
    pub version: u32,
    pub archive_id: String,
    pub model_id: String,
    pub layer_id: String,
    pub num_features: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub spatial_rank: usize,
    pub dataset_split: DatasetSplit,
    /// Fixed feature dims, when every sample shares them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_dims: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<HeadSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_normalization: Option<InputNormalization>,
    pub sample_count: u64,
}

fn default_format() -> String {
    MANIFEST_FORMAT.to_string()
}

fn default_version() -> u32 {
    MANIFEST_VERSION
}

impl Manifest {
    /// A manifest with generic ids and class names `class_0..class_{C-1}`.
    pub fn new(num_features: usize, num_classes: usize, spatial_rank: usize) -> Self {
        Manifest {
            format: default_format(),
            version: MANIFEST_VERSION,
            archive_id: "archive".into(),
            model_id: "model".into(),
            layer_id: "layer".into(),
            num_features,
            num_classes,
            class_names: (0..num_classes).map(|c| format!("class_{c}")).collect(),
            spatial_rank,
            dataset_split: DatasetSplit::Other,
            feature_dims: None,
            head: None,
            input_normalization: None,
            sample_count: 0,
        }
    }

    pub fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(IfaError::Invariant(msg));
        if self.num_features == 0 {
            return bad("num_features must be at least 1".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.class_names.len() != self.num_classes {
            return bad(format!(
                "class_names has {} entries for {} classes",
                self.class_names.len(),
                self.num_classes
            ));
        }
        if !(2..=3).contains(&self.spatial_rank) {
            return bad(format!("spatial_rank must be 2 or 3, got {}", self.spatial_rank));
        }
        if let Some(dims) = &self.feature_dims {
            if dims.len() != self.spatial_rank || dims.contains(&0) {
                return bad(format!("feature_dims {dims:?} do not match spatial_rank"));
            }
        }
        if let Some(head) = &self.head {
            self.check_head(head)?;
        }
        Ok(())
    }

    fn check_head(&self, head: &HeadSpec) -> Result<()> {
        let bad = |msg: String| Err(IfaError::Invariant(format!("head: {msg}")));
        if head.kind == HeadKind::External {
            if !head.weights.is_empty() || !head.bias.is_empty() {
                return bad("external head must not carry weights".into());
            }
            return Ok(());
        }
        if head.weights.len() != self.num_classes || head.bias.len() != self.num_classes {
            return bad(format!(
                "expected {} weight rows and bias entries, got {} and {}",
                self.num_classes,
                head.weights.len(),
                head.bias.len()
            ));
        }
        let width = head.weights[0].len();
        if head.weights.iter().any(|row| row.len() != width) {
            return bad("ragged weight matrix".into());
        }
        let ok = match head.kind {
            HeadKind::GapLinear => width == self.num_features,
            HeadKind::FlattenLinear => match &self.feature_dims {
                Some(d) => width == self.num_features * d.iter().product::<usize>(),
                None => width > 0 && width.is_multiple_of(self.num_features),
            },
            HeadKind::External => unreachable!(),
        };
        if !ok {
            return bad(format!("weight width {width} does not match the feature shape"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

/// One sample: features `[F x prod(dims)]`, per-class gradients of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sample_id: u64,
    /// `-1` when unlabeled.
    pub true_class: i32,
    pub logits: Vec<f32>,
    pub dims: Vec<usize>,
    pub num_features: usize,
    pub features: Vec<f32>,
    pub grads: BTreeMap<i32, Vec<f32>>,
    pub input: Option<InputImage>,
}

impl SampleRecord {
    pub fn spatial_size(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn feature(&self, f: usize) -> &[f32] {
        let s = self.spatial_size();
        &self.features[f * s..(f + 1) * s]
    }

    pub fn grads_for(&self, class_id: i32) -> Option<&[f32]> {
        self.grads.get(&class_id).map(Vec::as_slice)
    }

    pub fn is_labeled(&self) -> bool {
        self.true_class >= 0
    }

    /// Shape problems relative to `manifest` (empty when consistent).
    pub fn shape_problems(&self, manifest: &Manifest) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let c = manifest.num_classes;
        if self.logits.len() != c {
            out.push(("logits".into(), format!("length {} != C = {c}", self.logits.len())));
        }
        if self.true_class < -1 || self.true_class >= c as i32 {
            out.push(("true_class".into(), format!("{} outside [-1, {c})", self.true_class)));
        }
        if self.dims.len() != manifest.spatial_rank || self.dims.contains(&0) {
            out.push((
                "dims".into(),
                format!(
                    "{:?} inconsistent with spatial_rank {}",
                    self.dims, manifest.spatial_rank
                ),
            ));
        }
        if let Some(fixed) = &manifest.feature_dims {
            if fixed != &self.dims {
                out.push(("dims".into(), format!("{:?} != manifest {:?}", self.dims, fixed)));
            }
        }
        if self.num_features != manifest.num_features {
            out.push((
                "features".into(),
                format!("F = {} != manifest {}", self.num_features, manifest.num_features),
            ));
        }
        let plane = self.num_features * self.spatial_size();
        if self.features.len() != plane {
            out.push(("features".into(), format!("length {} != {plane}", self.features.len())));
        }
        for (&class_id, g) in &self.grads {
            if class_id < 0 || class_id >= c as i32 {
                out.push((format!("grads[{class_id}]"), "class id out of range".into()));
            }
            if g.len() != plane {
                out.push((format!("grads[{class_id}]"), format!("length {} != {plane}", g.len())));
            }
        }
        if let Some(input) = &self.input {
            if input.data.len() != input.channels * input.height * input.width {
                out.push(("input".into(), "payload does not match channels x H x W".into()));
            }
        }
        out
    }

    /// Names of tensors holding NaN or infinite values.
    pub fn non_finite_tensors(&self) -> Vec<String> {
        let bad = |v: &[f32]| v.iter().any(|x| !x.is_finite());
        let mut out = Vec::new();
        if bad(&self.logits) {
            out.push("logits".to_string());
        }
        if bad(&self.features) {
            out.push("features".to_string());
        }
        for (c, g) in &self.grads {
            if bad(g) {
                out.push(format!("grads[{c}]"));
            }
        }
        if self.input.as_ref().is_some_and(|i| bad(&i.data)) {
            out.push("input".to_string());
        }
        out
    }
}

/// Filters applied while iterating an archive.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Selector {
    /// Keep only samples with this true class.
    pub true_class: Option<i32>,
    /// Keep only sample ids in this half-open range.
    pub id_range: Option<Range<u64>>,
}

impl Selector {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn class(c: i32) -> Self {
        Selector {
            true_class: Some(c),
            id_range: None,
        }
    }

    fn admits_id(&self, id: u64) -> bool {
        self.id_range.as_ref().is_none_or(|r| r.contains(&id))
    }

    fn admits(&self, rec: &SampleRecord) -> bool {
        self.admits_id(rec.sample_id) && self.true_class.is_none_or(|c| rec.true_class == c)
    }
}

fn manifest_path(root: &Path) -> PathBuf {
    root.join(MANIFEST_FILE)
}

fn record_path(root: &Path, id: u64) -> PathBuf {
    root.join(SAMPLES_DIR).join(format!("{id:08}.rec"))
}

pub fn read_manifest(root: impl AsRef<Path>) -> Result<Manifest> {
    let path = manifest_path(root.as_ref());
    let bytes = fsutil::read_bytes(&path)?;
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| IfaError::MalformedManifest {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if value.get("format").and_then(|v| v.as_str()) != Some(MANIFEST_FORMAT) {
        return Err(IfaError::BadMagic {
            path,
            expected: MANIFEST_FORMAT,
        });
    }
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == MANIFEST_VERSION as u64 => {}
        other => {
            return Err(IfaError::BadVersion {
                path,
                found: other.unwrap_or(0) as u32,
            })
        }
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(|e| IfaError::MalformedManifest {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    manifest.check()?;
    Ok(manifest)
}

/// Read-only handle to an archive directory. Safe to share across threads.
#[derive(Debug, Clone)]
pub struct ArchiveReader {
    root: PathBuf,
    manifest: Manifest,
    ids: Vec<u64>,
}

impl ArchiveReader {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest = read_manifest(&root)?;
        let ids = list_record_ids(&root)?;
        Ok(ArchiveReader { root, manifest, ids })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    /// Sample ids present on disk, ascending.
    pub fn sample_ids(&self) -> &[u64] {
        &self.ids
    }

    /// Reads one record, checking its shape against the manifest and finiteness.
    pub fn read_sample(&self, id: u64) -> Result<SampleRecord> {
        let rec = self.read_sample_unchecked(id)?;
        if let Some((tensor, detail)) = rec.shape_problems(&self.manifest).into_iter().next() {
            return Err(IfaError::ShapeMismatch {
                sample_id: id,
                detail: format!("{tensor}: {detail}"),
            });
        }
        if let Some(tensor) = rec.non_finite_tensors().into_iter().next() {
            return Err(IfaError::NonFinite { sample_id: id, tensor });
        }
        Ok(rec)
    }

    pub(crate) fn read_sample_unchecked(&self, id: u64) -> Result<SampleRecord> {
        let path = record_path(&self.root, id);
        let bytes = fsutil::read_bytes(&path)?;
        record::decode(&bytes, id)
    }

    /// Records in ascending id order. The stream stops after the first error.
    pub fn iter(&self, selector: Selector) -> SampleIter<'_> {
        SampleIter {
            reader: self,
            selector,
            pos: 0,
            failed: false,
        }
    }

    /// Applies `f` to every selected record in parallel and returns the
    /// results in ascending id order, independent of the thread count.
    pub fn par_map<T, F>(&self, selector: &Selector, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(&SampleRecord) -> Result<T> + Sync,
    {
        let ids: Vec<u64> = self.ids.iter().copied().filter(|&id| selector.admits_id(id)).collect();
        let mut out = Vec::with_capacity(ids.len());
        for chunk in ids.chunks(PAR_CHUNK) {
            let part: Vec<Option<T>> = chunk
                .par_iter()
                .map(|&id| {
                    let rec = self.read_sample(id)?;
                    if selector.admits(&rec) {
                        f(&rec).map(Some)
                    } else {
                        Ok(None)
                    }
                })
                .collect::<Result<_>>()?;
            out.extend(part.into_iter().flatten());
        }
        Ok(out)
    }
}

pub struct SampleIter<'a> {
    reader: &'a ArchiveReader,
    selector: Selector,
    pos: usize,
    failed: bool,
}

impl Iterator for SampleIter<'_> {
    type Item = Result<SampleRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.failed && self.pos < self.reader.ids.len() {
            let id = self.reader.ids[self.pos];
            self.pos += 1;
            if !self.selector.admits_id(id) {
                continue;
            }
            match self.reader.read_sample(id) {
                Ok(rec) if self.selector.admits(&rec) => return Some(Ok(rec)),
                Ok(_) => continue,
                Err(e) => {
                    self.failed = true;
                    return Some(Err(e));
                }
            }
        }
        None
    }
}

pub fn iter_samples(root: impl AsRef<Path>, selector: Selector) -> Result<Vec<SampleRecord>> {
    let reader = ArchiveReader::open(root)?;
    reader.iter(selector).collect()
}

fn list_record_ids(root: &Path) -> Result<Vec<u64>> {
    let dir = root.join(SAMPLES_DIR);
    let entries = match fs::read_dir(&dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(IfaError::io(&dir, e)),
    };
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| IfaError::io(&dir, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix(".rec") {
            if let Ok(id) = stem.parse::<u64>() {
                ids.push(id);
            }
        }
    }
    ids.sort_unstable();
    Ok(ids)
}

/// Single owner of an archive while it is being written.
pub struct ArchiveWriter {
    root: PathBuf,
    manifest: Manifest,
    seen: HashSet<u64>,
}

impl ArchiveWriter {
    /// Creates (or replaces) the archive at `root`. Existing `.rec` files are removed.
    pub fn create(root: impl AsRef<Path>, manifest: Manifest) -> Result<Self> {
        manifest.check()?;
        let root = root.as_ref().to_path_buf();
        let samples = root.join(SAMPLES_DIR);
        fs::create_dir_all(&samples).map_err(|e| IfaError::io(&samples, e))?;
        for id in list_record_ids(&root)? {
            let p = record_path(&root, id);
            fs::remove_file(&p).map_err(|e| IfaError::io(&p, e))?;
        }
        let stale = manifest_path(&root);
        if stale.exists() {
            fs::remove_file(&stale).map_err(|e| IfaError::io(&stale, e))?;
        }
        Ok(ArchiveWriter {
            root,
            manifest,
            seen: HashSet::new(),
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn write(&mut self, rec: &SampleRecord) -> Result<()> {
        if let Some((tensor, detail)) = rec.shape_problems(&self.manifest).into_iter().next() {
            return Err(IfaError::ShapeMismatch {
                sample_id: rec.sample_id,
                detail: format!("{tensor}: {detail}"),
            });
        }
        if !self.seen.insert(rec.sample_id) {
            return Err(IfaError::DuplicateSample(rec.sample_id));
        }
        let path = record_path(&self.root, rec.sample_id);
        fs::write(&path, record::encode(rec)).map_err(|e| IfaError::io(&path, e))
    }

    /// Writes the manifest with the final sample count and reopens for reading.
    pub fn finish(mut self) -> Result<ArchiveReader> {
        self.manifest.sample_count = self.seen.len() as u64;
        fsutil::write_json_atomic(&manifest_path(&self.root), &self.manifest)?;
        ArchiveReader::open(&self.root)
    }
}

pub fn write_archive<I>(manifest: Manifest, records: I, root: impl AsRef<Path>) -> Result<ArchiveReader>
where
    I: IntoIterator<Item = SampleRecord>,
{
    let mut writer = ArchiveWriter::create(root, manifest)?;
    for rec in records {
        writer.write(&rec)?;
    }
    writer.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_record(id: u64, gt: i32) -> SampleRecord {
        let mut grads = BTreeMap::new();
        grads.insert(0, vec![1.0; 4]);
        SampleRecord {
            sample_id: id,
            true_class: gt,
            logits: vec![0.5, -0.5],
            dims: vec![2, 2],
            num_features: 1,
            features: vec![1.0; 4],
            grads,
            input: None,
        }
    }

    #[test]
    fn single_record_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = Manifest::new(1, 2, 2);
        let rec = tiny_record(0, 0);
        let reader = write_archive(manifest.clone(), vec![rec.clone()], dir.path()).unwrap();
        assert_eq!(reader.manifest().sample_count, 1);
        let back: Vec<_> = reader.iter(Selector::all()).collect::<Result<_>>().unwrap();
        assert_eq!(back, vec![rec]);
        let mut expected = manifest;
        expected.sample_count = 1;
        assert_eq!(read_manifest(dir.path()).unwrap(), expected);
    }

    #[test]
    fn wrong_gradient_dims_names_sample() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = tiny_record(5, 0);
        rec.grads.insert(1, vec![0.0; 9]);
        let err = write_archive(Manifest::new(1, 2, 2), vec![rec], dir.path()).unwrap_err();
        assert!(matches!(err, IfaError::ShapeMismatch { sample_id: 5, .. }), "{err}");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = write_archive(
            Manifest::new(1, 2, 2),
            vec![tiny_record(3, 0), tiny_record(3, 1)],
            dir.path(),
        )
        .unwrap_err();
        assert!(matches!(err, IfaError::DuplicateSample(3)));
    }

    #[test]
    fn manifest_error_kinds_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        write_archive(Manifest::new(1, 2, 2), vec![tiny_record(0, 0)], dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap();

        fs::write(&path, text.replace("ifa-archive", "ifa-arch1ve")).unwrap();
        assert!(matches!(read_manifest(dir.path()), Err(IfaError::BadMagic { .. })));

        fs::write(&path, text.replace("\"version\": 1", "\"version\": 9")).unwrap();
        assert!(matches!(
            read_manifest(dir.path()),
            Err(IfaError::BadVersion { found: 9, .. })
        ));

        fs::write(&path, text.replace("\"num_classes\": 2", "\"num_classes\": 1")).unwrap();
        assert!(matches!(read_manifest(dir.path()), Err(IfaError::Invariant(_))));

        fs::write(&path, "{ not json").unwrap();
        assert!(matches!(
            read_manifest(dir.path()),
            Err(IfaError::MalformedManifest { .. })
        ));
    }

    #[test]
    fn selector_filters_by_label_and_range() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![tiny_record(0, 0), tiny_record(1, 0), tiny_record(2, 1)];
        let reader = write_archive(Manifest::new(1, 2, 2), recs, dir.path()).unwrap();
        let ones: Vec<_> = reader.iter(Selector::class(1)).collect::<Result<_>>().unwrap();
        assert_eq!(ones.len(), 1);
        assert_eq!(ones[0].sample_id, 2);
        let sel = Selector {
            true_class: None,
            id_range: Some(1..3),
        };
        let ids: Vec<u64> = reader.iter(sel).map(|r| r.unwrap().sample_id).collect();
        assert_eq!(ids, vec![1, 2]);
    }

    #[test]
    fn truncated_record_aborts_stream() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![tiny_record(0, 0), tiny_record(1, 0)];
        let reader = write_archive(Manifest::new(1, 2, 2), recs, dir.path()).unwrap();
        let p = record_path(dir.path(), 1);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        let items: Vec<_> = reader.iter(Selector::all()).collect();
        assert_eq!(items.len(), 2);
        assert!(items[0].is_ok());
        assert!(matches!(items[1], Err(IfaError::CorruptRecord { sample_id: 1, .. })));
    }

    #[test]
    fn head_shape_checked() {
        let mut m = Manifest::new(2, 2, 2);
        m.head = Some(HeadSpec {
            kind: HeadKind::GapLinear,
            weights: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
            bias: vec![0.0, 0.0],
        });
        assert!(m.check().is_err());
        m.head = Some(HeadSpec {
            kind: HeadKind::External,
            weights: vec![],
            bias: vec![],
        });
        assert!(m.check().is_ok());
    }
}
