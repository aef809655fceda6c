//! CAM composition and intensity scaling.
//!
//! Pipeline order per sample is fixed: mask features, sum over features,
//! resize spatially, then scale. Three scale modes exist:
//!
//! - `raw`: the summed map, unbounded and signed;
//! - `individual`: ReLU followed by per-image min-max, the classic behaviour;
//! - `common`: `tanh(alpha * x + beta)` anchored at dataset percentiles so
//!   that `P10 -> 0.1` and `P90 -> 0.9`. Negative evidence is kept and maps of
//!   different samples share one scale.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::{ArchiveReader, Selector};
use crate::distribution::DistributionStats;
use crate::error::{IfaError, Result};
use crate::fsutil;
use crate::importance::FeatureMask;
use crate::schemes::{weighted_stack, ClassSelection, Scheme, WeightedFeatureStack};

/// Output level of `sigma` at P10.
pub const LOWER_LEVEL: f64 = 0.1;
/// Output level of `sigma` at P90.
pub const UPPER_LEVEL: f64 = 0.9;

pub const CAM_MAGIC: &[u8; 4] = b"ICM1";
pub const RESAMPLING: &str = "bilinear-half-pixel";

/// Parameters of the common intensity scale `sigma(x) = tanh(alpha * x + beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaParams {
    pub p10: f64,
    pub p90: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Solves `tanh(alpha * P10 + beta) = 0.1` and `tanh(alpha * P90 + beta) = 0.9`.
pub fn sigma_from_percentiles(p10: f64, p90: f64) -> Result<SigmaParams> {
    if !(p90 > p10) || !p10.is_finite() || !p90.is_finite() {
        return Err(IfaError::DegeneratePercentiles { p10, p90 });
    }
    let lo = LOWER_LEVEL.atanh();
    let hi = UPPER_LEVEL.atanh();
    let alpha = (hi - lo) / (p90 - p10);
    let beta = (p10 * hi - p90 * lo) / (p10 - p90);
    if !(alpha > 0.0) || !alpha.is_finite() || !beta.is_finite() {
        return Err(IfaError::DegeneratePercentiles { p10, p90 });
    }
    Ok(SigmaParams { p10, p90, alpha, beta })
}

impl SigmaParams {
    /// Evaluated as `tanh(alpha * (x - P10) + atanh 0.1)`, which equals
    /// `alpha * x + beta` but stays accurate when `|P10|` dwarfs `P90 - P10`.
    pub fn apply(&self, x: f64) -> f64 {
        (self.alpha * (x - self.p10) + LOWER_LEVEL.atanh()).tanh()
    }
}

pub fn apply_sigma(map: &mut [f64], params: &SigmaParams) {
    for v in map {
        *v = params.apply(*v);
    }
}

/// `sum_f m_f * W^f`; features with `m_f = 0` are skipped.
pub fn compose_raw(stack: &WeightedFeatureStack, mask: Option<&[bool]>) -> Result<Vec<f64>> {
    if let Some(m) = mask {
        if m.len() != stack.num_features {
            return Err(IfaError::Incompatible(format!(
                "mask has {} entries for {} features",
                m.len(),
                stack.num_features
            )));
        }
    }
    let s = stack.spatial_size();
    let mut out = vec![0.0f64; s];
    for f in 0..stack.num_features {
        if mask.is_some_and(|m| !m[f]) {
            continue;
        }
        for (o, &w) in out.iter_mut().zip(stack.map(f)) {
            *o += w;
        }
    }
    Ok(out)
}

/// Bilinear resize with half-pixel centers. Source coordinates are
/// `(i + 0.5) * in / out - 0.5`, clamped to the valid range, so every output
/// is a convex combination of its four neighbours.
pub fn resize_spatial(map: &[f64], dims: &[usize], target: (usize, usize)) -> Result<Vec<f64>> {
    let &[h, w] = dims else {
        return Err(IfaError::Unsupported(format!(
            "spatial resize of rank-{} maps",
            dims.len()
        )));
    };
    let (th, tw) = target;
    if h == 0 || w == 0 || th == 0 || tw == 0 || map.len() != h * w {
        return Err(IfaError::Incompatible(format!(
            "cannot resize {}-value map with dims {h}x{w} to {th}x{tw}",
            map.len()
        )));
    }
    if (th, tw) == (h, w) {
        return Ok(map.to_vec());
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let rows = taps(h, th);
    let cols = taps(w, tw);
    let mut out = Vec::with_capacity(th * tw);
    for &(y0, y1, ty) in &rows {
        for &(x0, x1, tx) in &cols {
            let a = map[y0 * w + x0];
            let b = map[y0 * w + x1];
            let c = map[y1 * w + x0];
            let d = map[y1 * w + x1];
            let top = (1.0 - tx) * a + tx * b;
            let bottom = (1.0 - tx) * c + tx * d;
            let v = (1.0 - ty) * top + ty * bottom;
            let lo = a.min(b).min(c).min(d);
            let hi = a.max(b).max(c).max(d);
            out.push(v.clamp(lo, hi));
        }
    }
    Ok(out)
}

/// ReLU then per-image min-max to `[0, 1]`; a constant map becomes all zeros.
pub fn scale_individual(map: &mut [f64]) {
    for v in map.iter_mut() {
        *v = v.max(0.0);
    }
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in map.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    Raw,
    Individual,
    Common,
}

impl ScaleMode {
    pub fn code(self) -> u8 {
        match self {
            ScaleMode::Raw => 0,
            ScaleMode::Individual => 1,
            ScaleMode::Common => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ScaleMode::Raw),
            1 => Some(ScaleMode::Individual),
            2 => Some(ScaleMode::Common),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScaleMode::Raw => "raw",
            ScaleMode::Individual => "individual",
            ScaleMode::Common => "common",
        }
    }
}

impl std::str::FromStr for ScaleMode {
    type Err = IfaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(ScaleMode::Raw),
            "individual" => Ok(ScaleMode::Individual),
            "common" => Ok(ScaleMode::Common),
            _ => Err(IfaError::InvalidArgument(format!("unknown scale mode {s:?}"))),
        }
    }
}

/// Display name such as `S-grad-cam` or `FS-S-grad-cam`.
pub fn cam_name(scheme: Scheme, mode: ScaleMode, masked: bool) -> String {
    let mut name = String::new();
    if masked {
        name.push_str("FS-");
    }
    if mode == ScaleMode::Common {
        name.push_str("S-");
    }
    name.push_str(scheme.name());
    name
}

#[derive(Debug, Clone, PartialEq)]
pub struct CamResult {
    pub sample_id: u64,
    pub class_id: i32,
    pub scheme: Scheme,
    pub scale_mode: ScaleMode,
    /// Description of the feature mask, for FS- maps.
    pub mask: Option<String>,
    pub dims: (usize, usize),
    pub map: Vec<f32>,
    /// Sum of `map` accumulated in `f64`.
    pub sum: f64,
}

impl CamResult {
    pub fn name(&self) -> String {
        cam_name(self.scheme, self.scale_mode, self.mask.is_some())
    }
}

pub struct CamOptions<'a> {
    pub scheme: Scheme,
    pub class: ClassSelection,
    pub scale_mode: ScaleMode,
    pub sigma: Option<SigmaParams>,
    pub mask: Option<&'a FeatureMask>,
    pub target: Option<(usize, usize)>,
}

impl<'a> CamOptions<'a> {
    pub fn new(scheme: Scheme, class: ClassSelection, scale_mode: ScaleMode) -> Self {
        CamOptions {
            scheme,
            class,
            scale_mode,
            sigma: None,
            mask: None,
            target: None,
        }
    }

    /// Takes sigma from dataset statistics, checking they match this run.
    pub fn with_stats(mut self, stats: &DistributionStats) -> Result<Self> {
        if stats.scheme != self.scheme {
            return Err(IfaError::Incompatible(format!(
                "statistics were collected for {}, not {}",
                stats.scheme, self.scheme
            )));
        }
        if stats.class_selection != self.class && stats.class_selection != ClassSelection::TrueClass {
            return Err(IfaError::Incompatible(format!(
                "statistics were collected for class {}, not {}",
                stats.class_selection, self.class
            )));
        }
        self.sigma = Some(stats.sigma()?);
        Ok(self)
    }
}

/// CAM for one record, or `None` when the class selection skips it.
pub fn cam_for_sample(rec: &crate::archive::SampleRecord, opts: &CamOptions<'_>) -> Result<Option<CamResult>> {
    let Some(class_id) = opts.class.resolve(rec.true_class) else {
        return Ok(None);
    };
    let stack = weighted_stack(rec, opts.scheme, class_id)?;
    let mask = match opts.mask {
        Some(m) => Some(
            m.for_class(class_id)
                .ok_or_else(|| IfaError::Incompatible(format!("mask has no row for class {class_id}")))?,
        ),
        None => None,
    };
    let raw = compose_raw(&stack, mask)?;
    let (dims, mut map) = match opts.target {
        Some(t) => (t, resize_spatial(&raw, &stack.dims, t)?),
        None => match stack.dims[..] {
            [h, w] => ((h, w), raw),
            _ => {
                return Err(IfaError::Unsupported(format!(
                    "CAM export of rank-{} features",
                    stack.dims.len()
                )))
            }
        },
    };
    match opts.scale_mode {
        ScaleMode::Raw => {}
        ScaleMode::Individual => scale_individual(&mut map),
        ScaleMode::Common => {
            let sigma = opts
                .sigma
                .ok_or_else(|| IfaError::InvalidArgument("common scale requires statistics".into()))?;
            apply_sigma(&mut map, &sigma);
        }
    }
    let map: Vec<f32> = map.into_iter().map(|v| v as f32).collect();
    let sum = map.iter().map(|&v| v as f64).sum();
    Ok(Some(CamResult {
        sample_id: rec.sample_id,
        class_id,
        scheme: opts.scheme,
        scale_mode: opts.scale_mode,
        mask: opts.mask.map(FeatureMask::describe),
        dims,
        map,
        sum,
    }))
}

/// CAMs for every selected sample, in ascending id order.
pub fn generate(reader: &ArchiveReader, selector: &Selector, opts: &CamOptions<'_>) -> Result<Vec<CamResult>> {
    if opts.scale_mode == ScaleMode::Common && opts.sigma.is_none() {
        return Err(IfaError::InvalidArgument("common scale requires statistics".into()));
    }
    Ok(reader
        .par_map(selector, |rec| cam_for_sample(rec, opts))?
        .into_iter()
        .flatten()
        .collect())
}

// ---------------------------------------------------------------------------
// Files

/// Contents of a `.camf32` / `.maskf32` file.
#[derive(Debug, Clone, PartialEq)]
pub struct CamFile {
    pub sample_id: u64,
    pub class_id: i32,
    pub scale_mode: ScaleMode,
    pub dims: (usize, usize),
    pub data: Vec<f32>,
}

impl From<&CamResult> for CamFile {
    fn from(c: &CamResult) -> Self {
        CamFile {
            sample_id: c.sample_id,
            class_id: c.class_id,
            scale_mode: c.scale_mode,
            dims: c.dims,
            data: c.map.clone(),
        }
    }
}

pub fn encode_cam_file(cam: &CamFile) -> Vec<u8> {
    let mut out = Vec::with_capacity(25 + 4 * cam.data.len());
    out.extend_from_slice(CAM_MAGIC);
    out.extend_from_slice(&cam.sample_id.to_le_bytes());
    out.extend_from_slice(&cam.class_id.to_le_bytes());
    out.push(cam.scale_mode.code());
    out.extend_from_slice(&(cam.dims.0 as u32).to_le_bytes());
    out.extend_from_slice(&(cam.dims.1 as u32).to_le_bytes());
    for v in &cam.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_cam_file(bytes: &[u8], path: &Path) -> Result<CamFile> {
    let bad = |detail: &str| IfaError::Invariant(format!("{}: {detail}", path.display()));
    if bytes.len() < 25 || &bytes[..4] != CAM_MAGIC {
        return Err(IfaError::BadMagic {
            path: path.to_path_buf(),
            expected: "ICM1",
        });
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let sample_id = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
    let class_id = i32::from_le_bytes(bytes[12..16].try_into().unwrap());
    let scale_mode = ScaleMode::from_code(bytes[16]).ok_or_else(|| bad("unknown scale mode"))?;
    let dims = (u32_at(17), u32_at(21));
    let payload = &bytes[25..];
    if payload.len() != 4 * dims.0 * dims.1 {
        return Err(bad("payload size does not match dims"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(CamFile {
        sample_id,
        class_id,
        scale_mode,
        dims,
        data,
    })
}

pub fn read_cam_file(path: &Path) -> Result<CamFile> {
    decode_cam_file(&fsutil::read_bytes(path)?, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamIndexEntry {
    pub sample_id: u64,
    pub class_id: i32,
    pub sum: f64,
    pub file: String,
}

/// `index.json` written next to the CAM files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamIndex {
    pub name: String,
    pub scheme: Scheme,
    pub scale_mode: ScaleMode,
    pub class_selection: ClassSelection,
    pub mask: Option<String>,
    pub resampling: String,
    pub target_dims: Option<(usize, usize)>,
    pub sigma: Option<SigmaParams>,
    pub entries: Vec<CamIndexEntry>,
}

pub fn cam_file_name(sample_id: u64) -> String {
    format!("{sample_id:08}.camf32")
}

/// Writes one `.camf32` per CAM plus `index.json` into `dir`.
pub fn write_cam_dir(dir: &Path, cams: &[CamResult], opts: &CamOptions<'_>) -> Result<CamIndex> {
    let entries = cams
        .iter()
        .map(|cam| {
            let file = cam_file_name(cam.sample_id);
            fsutil::write_atomic(&dir.join(&file), &encode_cam_file(&CamFile::from(cam)))?;
            Ok(CamIndexEntry {
                sample_id: cam.sample_id,
                class_id: cam.class_id,
                sum: cam.sum,
                file,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let index = CamIndex {
        name: cam_name(opts.scheme, opts.scale_mode, opts.mask.is_some()),
        scheme: opts.scheme,
        scale_mode: opts.scale_mode,
        class_selection: opts.class,
        mask: opts.mask.map(FeatureMask::describe),
        resampling: RESAMPLING.into(),
        target_dims: opts.target,
        sigma: opts.sigma,
        entries,
    };
    fsutil::write_json_atomic(&dir.join("index.json"), &index)?;
    Ok(index)
}

pub fn read_cam_index(dir: &Path) -> Result<CamIndex> {
    fsutil::read_json(&dir.join("index.json"))
}

/// Loads every CAM listed in `dir/index.json`.
pub fn read_cam_dir(dir: &Path) -> Result<(CamIndex, Vec<CamResult>)> {
    let index = read_cam_index(dir)?;
    let cams = index
        .entries
        .iter()
        .map(|e| {
            let f = read_cam_file(&dir.join(&e.file))?;
            Ok(CamResult {
                sample_id: f.sample_id,
                class_id: f.class_id,
                scheme: index.scheme,
                scale_mode: f.scale_mode,
                mask: index.mask.clone(),
                dims: f.dims,
                sum: f.data.iter().map(|&v| v as f64).sum(),
                map: f.data,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((index, cams))
}
