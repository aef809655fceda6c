use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{list_record_ids, read_manifest, ArchiveReader};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    Manifest,
    Corrupt,
    Shape,
    NonFinite,
    Count,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub sample_id: Option<u64>,
    pub tensor: String,
    pub kind: FindingKind,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub samples: usize,
    pub samples_with_grads: usize,
    /// Fraction of samples carrying at least one gradient entry.
    pub grads_coverage: f64,
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Checks every record; problems are collected into the report, never thrown.
/// The archive is only read.
pub fn validate_archive(root: impl AsRef<Path>) -> ValidationReport {
    let root = root.as_ref();
    let mut report = ValidationReport {
        samples: 0,
        samples_with_grads: 0,
        grads_coverage: 0.0,
        findings: Vec::new(),
    };
    let manifest = match read_manifest(root) {
        Ok(m) => m,
        Err(e) => {
            report.findings.push(Finding {
                sample_id: None,
                tensor: "manifest".into(),
                kind: FindingKind::Manifest,
                detail: e.to_string(),
            });
            return report;
        }
    };
    let ids = match list_record_ids(root) {
        Ok(ids) => ids,
        Err(e) => {
            report.findings.push(Finding {
                sample_id: None,
                tensor: "samples".into(),
                kind: FindingKind::Corrupt,
                detail: e.to_string(),
            });
            return report;
        }
    };
    let reader = ArchiveReader {
        root: root.to_path_buf(),
        manifest,
        ids,
    };
    report.samples = reader.ids.len();
    if reader.manifest.sample_count != reader.ids.len() as u64 {
        report.findings.push(Finding {
            sample_id: None,
            tensor: "manifest".into(),
            kind: FindingKind::Count,
            detail: format!(
                "sample_count {} but {} record files",
                reader.manifest.sample_count,
                reader.ids.len()
            ),
        });
    }
    for &id in &reader.ids {
        let rec = match reader.read_sample_unchecked(id) {
            Ok(r) => r,
            Err(e) => {
                report.findings.push(Finding {
                    sample_id: Some(id),
                    tensor: "record".into(),
                    kind: FindingKind::Corrupt,
                    detail: e.to_string(),
                });
                continue;
            }
        };
        if !rec.grads.is_empty() {
            report.samples_with_grads += 1;
        }
        for (tensor, detail) in rec.shape_problems(&reader.manifest) {
            report.findings.push(Finding {
                sample_id: Some(id),
                tensor,
                kind: FindingKind::Shape,
                detail,
            });
        }
        for tensor in rec.non_finite_tensors() {
            report.findings.push(Finding {
                sample_id: Some(id),
                tensor,
                kind: FindingKind::NonFinite,
                detail: "contains NaN or infinite values".into(),
            });
        }
    }
    if report.samples > 0 {
        report.grads_coverage = report.samples_with_grads as f64 / report.samples as f64;
    }
    report
}
