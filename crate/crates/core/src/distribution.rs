//! Dataset-level statistics of raw CAM values.
//!
//! Values are the entries of the summed weighted-feature map of each sample,
//! before resizing and before any intensity scaling. The P10/P90 pair of
//! these statistics anchors the common intensity scale.
//!
//! Two modes:
//!
//! - `exact`: keeps every value, sorts once and interpolates percentiles
//!   (type 7: rank `p / 100 * (n - 1)`);
//! - `sketch`: a mergeable t-digest, for archives too large to hold in memory.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tdigest::TDigest;

use crate::archive::{ArchiveReader, DatasetSplit, Selector};
use crate::campipe::{compose_raw, sigma_from_percentiles, SigmaParams};
use crate::error::{IfaError, Result};
use crate::fsutil;
use crate::schemes::{weighted_stack, ClassSelection, Scheme};

pub const DEFAULT_PERCENTILES: [f64; 9] = [1.0, 5.0, 10.0, 25.0, 50.0, 75.0, 90.0, 95.0, 99.0];
pub const HISTOGRAM_BINS: usize = 256;
/// Centroid budget of the t-digest used in sketch mode.
pub const SKETCH_SIZE: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsMode {
    Exact,
    Sketch,
}

impl std::str::FromStr for StatsMode {
    type Err = IfaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(StatsMode::Exact),
            "sketch" => Ok(StatsMode::Sketch),
            _ => Err(IfaError::InvalidArgument(format!("unknown stats mode {s:?}"))),
        }
    }
}

/// Type-7 percentile of an ascending slice. `p` in `[0, 100]`.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "percentile of an empty sample");
    let rank = p / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` uniform edges from min to max.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(min: f64, max: f64, bins: usize) -> Self {
        let bins = bins.max(1);
        let width = (max - min) / bins as f64;
        let mut edges: Vec<f64> = (0..=bins).map(|i| min + i as f64 * width).collect();
        edges[bins] = max;
        Histogram {
            edges,
            counts: vec![0; bins],
        }
    }

    pub fn add(&mut self, x: f64) {
        let bins = self.counts.len();
        let (lo, hi) = (self.edges[0], self.edges[bins]);
        let i = if hi > lo {
            (((x - lo) / (hi - lo)) * bins as f64)
                .floor()
                .clamp(0.0, (bins - 1) as f64) as usize
        } else {
            0
        };
        self.counts[i] += 1;
    }

    fn merge_counts(&mut self, other: &Histogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Partial statistics over a shard of values. Moments merge with the
/// pairwise update; exact values concatenate; sketches merge as digests.
#[derive(Debug, Clone)]
pub struct StatsAccumulator {
    mode: StatsMode,
    count: u64,
    mean: f64,
    m2: f64,
    min: f64,
    max: f64,
    values: Vec<f64>,
    sketch: Option<TDigest>,
}

impl StatsAccumulator {
    pub fn new(mode: StatsMode) -> Self {
        StatsAccumulator {
            mode,
            count: 0,
            mean: 0.0,
            m2: 0.0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            values: Vec::new(),
            sketch: (mode == StatsMode::Sketch).then(|| TDigest::new_with_size(SKETCH_SIZE)),
        }
    }

    pub fn mode(&self) -> StatsMode {
        self.mode
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0).sqrt()
        }
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
        self.min = self.min.min(x);
        self.max = self.max.max(x);
        match &mut self.sketch {
            Some(d) => d.push(x),
            None => self.values.push(x),
        }
    }

    pub fn extend(&mut self, xs: impl IntoIterator<Item = f64>) {
        for x in xs {
            self.push(x);
        }
        if let Some(d) = &mut self.sketch {
            d.flush();
        }
    }

    /// Combines two partial accumulators; the empty accumulator is the identity.
    pub fn merge(mut self, other: StatsAccumulator) -> Result<StatsAccumulator> {
        if self.mode != other.mode {
            return Err(IfaError::Incompatible(
                "cannot merge exact and sketch accumulators".into(),
            ));
        }
        if other.count == 0 {
            return Ok(self);
        }
        if self.count == 0 {
            return Ok(other);
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta = other.mean - self.mean;
        self.mean += delta * nb / n;
        self.m2 += other.m2 + delta * delta * na * nb / n;
        self.count += other.count;
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        self.values.extend(other.values);
        self.sketch = match (self.sketch.take(), other.sketch) {
            (Some(mut a), Some(mut b)) => {
                a.flush();
                b.flush();
                Some(TDigest::merge_digests(vec![a, b]))
            }
            _ => None,
        };
        Ok(self)
    }

    /// Percentiles for each requested `p` (exact: type 7; sketch: t-digest estimate).
    pub fn percentiles(&mut self, ps: &[f64]) -> Result<Vec<f64>> {
        if self.count == 0 {
            return Err(IfaError::Empty("no values to summarize".into()));
        }
        match &mut self.sketch {
            None => {
                self.values.sort_unstable_by(f64::total_cmp);
                Ok(ps.iter().map(|&p| percentile_sorted(&self.values, p)).collect())
            }
            Some(d) => {
                d.flush();
                let (lo, hi) = (self.min, self.max);
                Ok(ps
                    .iter()
                    .map(|&p| d.estimate_quantile(p / 100.0).unwrap_or(lo).clamp(lo, hi))
                    .collect())
            }
        }
    }

    fn exact_histogram(&self, bins: usize) -> Histogram {
        let mut h = Histogram::new(self.min, self.max, bins);
        for &v in &self.values {
            h.add(v);
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PercentileValue {
    pub p: f64,
    pub value: f64,
}

/// Persisted as `stats.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub class_selection: ClassSelection,
    pub scheme: Scheme,
    pub mode: StatsMode,
    pub count: u64,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub percentiles: Vec<PercentileValue>,
    pub histogram: Histogram,
    pub source_split: DatasetSplit,
    pub samples: u64,
    /// Samples skipped because they carried no gradients for the selected class.
    pub skipped_samples: Vec<u64>,
}

impl DistributionStats {
    pub fn percentile(&self, p: f64) -> Option<f64> {
        self.percentiles.iter().find(|v| v.p == p).map(|v| v.value)
    }

    pub fn sigma(&self) -> Result<SigmaParams> {
        let p10 = self
            .percentile(10.0)
            .ok_or_else(|| IfaError::Incompatible("statistics lack P10".into()))?;
        let p90 = self
            .percentile(90.0)
            .ok_or_else(|| IfaError::Incompatible("statistics lack P90".into()))?;
        sigma_from_percentiles(p10, p90)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_json_atomic(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        fsutil::read_json(path)
    }
}

#[derive(Debug, Clone)]
pub struct StatsOptions {
    pub mode: StatsMode,
    pub percentiles: Vec<f64>,
    pub bins: usize,
    pub selector: Selector,
}

impl StatsOptions {
    pub fn new(mode: StatsMode) -> Self {
        StatsOptions {
            mode,
            percentiles: DEFAULT_PERCENTILES.to_vec(),
            bins: HISTOGRAM_BINS,
            selector: Selector::all(),
        }
    }
}

fn with_required_percentiles(ps: &[f64]) -> Result<Vec<f64>> {
    let mut out: Vec<f64> = ps.to_vec();
    for required in [10.0, 90.0] {
        if !out.contains(&required) {
            out.push(required);
        }
    }
    if let Some(bad) = out.iter().find(|&&p| !(p > 0.0 && p < 100.0)) {
        return Err(IfaError::InvalidArgument(format!("percentile {bad} outside (0, 100)")));
    }
    out.sort_by(f64::total_cmp);
    out.dedup();
    Ok(out)
}

/// Builds statistics from an accumulator; sketch mode needs the histogram
/// from a second pass, exact mode builds it from the retained values.
pub fn finish_stats(
    mut acc: StatsAccumulator,
    histogram: Option<Histogram>,
    percentiles: &[f64],
    bins: usize,
    scheme: Scheme,
    class_selection: ClassSelection,
    source_split: DatasetSplit,
) -> Result<DistributionStats> {
    let ps = with_required_percentiles(percentiles)?;
    let values = acc.percentiles(&ps)?;
    let histogram = match histogram {
        Some(h) => h,
        None if acc.mode == StatsMode::Exact => acc.exact_histogram(bins),
        None => {
            return Err(IfaError::InvalidArgument(
                "sketch statistics need a histogram pass".into(),
            ))
        }
    };
    Ok(DistributionStats {
        class_selection,
        scheme,
        mode: acc.mode,
        count: acc.count,
        mean: acc.mean,
        std: acc.std(),
        min: acc.min,
        max: acc.max,
        percentiles: ps
            .iter()
            .zip(values)
            .map(|(&p, value)| PercentileValue { p, value })
            .collect(),
        histogram,
        source_split,
        samples: 0,
        skipped_samples: Vec::new(),
    })
}

fn raw_map(
    rec: &crate::archive::SampleRecord,
    scheme: Scheme,
    class: ClassSelection,
) -> Result<Option<Result<Vec<f64>, u64>>> {
    let Some(c) = class.resolve(rec.true_class) else {
        return Ok(None);
    };
    if rec.grads_for(c).is_none() {
        return Ok(Some(Err(rec.sample_id)));
    }
    let stack = weighted_stack(rec, scheme, c)?;
    Ok(Some(Ok(compose_raw(&stack, None)?)))
}

/// Statistics over every value of every selected sample's raw summed map.
///
/// Per-sample partials are computed in parallel and merged in ascending
/// sample id order, so results do not depend on the worker count.
pub fn collect_stats(
    reader: &ArchiveReader,
    scheme: Scheme,
    class: ClassSelection,
    opts: &StatsOptions,
) -> Result<DistributionStats> {
    let num_classes = reader.manifest().num_classes as i32;
    if let ClassSelection::Class(c) = class {
        if c >= num_classes {
            return Err(IfaError::InvalidArgument(format!(
                "class {c} outside [0, {num_classes})"
            )));
        }
    }
    let partials = reader.par_map(&opts.selector, |rec| {
        Ok(raw_map(rec, scheme, class)?.map(|r| {
            r.map(|map| {
                let mut acc = StatsAccumulator::new(opts.mode);
                acc.extend(map);
                acc
            })
        }))
    })?;
    let mut acc = StatsAccumulator::new(opts.mode);
    let mut skipped = Vec::new();
    let mut used = 0u64;
    for p in partials.into_iter().flatten() {
        match p {
            Ok(a) => {
                used += 1;
                acc = acc.merge(a)?;
            }
            Err(id) => skipped.push(id),
        }
    }
    if acc.count() == 0 {
        return Err(IfaError::Empty(format!(
            "no samples carry gradients for class selection {class}"
        )));
    }
    let histogram = match opts.mode {
        StatsMode::Exact => None,
        StatsMode::Sketch => {
            let (lo, hi, bins) = (acc.min(), acc.max(), opts.bins);
            let parts = reader.par_map(&opts.selector, |rec| {
                let mut h = Histogram::new(lo, hi, bins);
                if let Some(Ok(map)) = raw_map(rec, scheme, class)? {
                    for v in map {
                        h.add(v);
                    }
                }
                Ok(h)
            })?;
            let mut h = Histogram::new(lo, hi, bins);
            for p in &parts {
                h.merge_counts(p);
            }
            Some(h)
        }
    };
    let mut stats = finish_stats(
        acc,
        histogram,
        &opts.percentiles,
        opts.bins,
        scheme,
        class,
        reader.manifest().dataset_split,
    )?;
    stats.samples = used;
    stats.skipped_samples = skipped;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn exact(values: &[f64]) -> DistributionStats {
        let mut acc = StatsAccumulator::new(StatsMode::Exact);
        acc.extend(values.iter().copied());
        finish_stats(
            acc,
            None,
            &DEFAULT_PERCENTILES,
            HISTOGRAM_BINS,
            Scheme::GradCam,
            ClassSelection::Class(0),
            DatasetSplit::Validation,
        )
        .unwrap()
    }

    #[test]
    fn type7_on_one_to_hundred() {
        let s = exact(&(1..=100).map(f64::from).collect::<Vec<_>>());
        assert!((s.percentile(10.0).unwrap() - 10.9).abs() < 1e-12);
        assert!((s.percentile(90.0).unwrap() - 90.1).abs() < 1e-12);
        assert_eq!(s.histogram.counts.iter().sum::<u64>(), 100);
    }

    #[test]
    fn constant_stream() {
        let s = exact(&[5.0; 17]);
        assert_eq!((s.min, s.max, s.mean, s.std), (5.0, 5.0, 5.0, 0.0));
        assert_eq!(s.percentile(10.0), Some(5.0));
        assert_eq!(s.percentile(90.0), Some(5.0));
        assert_eq!(s.histogram.counts.iter().sum::<u64>(), 17);
    }

    #[test]
    fn merge_moments() {
        let mut a = StatsAccumulator::new(StatsMode::Exact);
        a.extend([1.0, 2.0]);
        let mut b = StatsAccumulator::new(StatsMode::Exact);
        b.extend([3.0, 4.0]);
        let m = a.merge(b).unwrap();
        assert_eq!((m.count(), m.mean(), m.min(), m.max()), (4, 2.5, 1.0, 4.0));
        assert!((m.std() - 1.25f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn empty_is_identity() {
        let mut x = StatsAccumulator::new(StatsMode::Exact);
        x.extend([3.0, -1.0, 8.0]);
        let m = StatsAccumulator::new(StatsMode::Exact).merge(x.clone()).unwrap();
        assert_eq!(
            (m.count(), m.mean(), m.std(), m.min(), m.max()),
            (x.count(), x.mean(), x.std(), x.min(), x.max())
        );
        assert!(StatsAccumulator::new(StatsMode::Sketch).merge(x).is_err());
    }

    // deterministic xorshift so the shard test does not depend on proptest's seed
    fn stream(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                (s >> 11) as f64 / (1u64 << 53) as f64 * 20.0 - 7.0
            })
            .collect()
    }

    #[test]
    fn eight_shards_match_single_pass() {
        let values = stream(5000, 99);
        let single = exact(&values);
        let mut merged = StatsAccumulator::new(StatsMode::Exact);
        // uneven, interleaved shards
        for shard in 0..8 {
            let mut part = StatsAccumulator::new(StatsMode::Exact);
            part.extend(
                values
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| (i * 7 + i / 3) % 8 == shard)
                    .map(|(_, v)| *v),
            );
            merged = merged.merge(part).unwrap();
        }
        let merged = finish_stats(
            merged,
            None,
            &DEFAULT_PERCENTILES,
            HISTOGRAM_BINS,
            Scheme::GradCam,
            ClassSelection::Class(0),
            DatasetSplit::Validation,
        )
        .unwrap();
        assert_eq!(merged.percentiles, single.percentiles);
        assert_eq!(merged.histogram, single.histogram);
        assert_eq!(
            (merged.count, merged.min, merged.max),
            (single.count, single.min, single.max)
        );
        assert!((merged.mean - single.mean).abs() < 1e-12);
    }

    #[test]
    fn sketch_tracks_exact_on_uniform() {
        let values = stream(1_000_000, 7);
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let range = sorted[sorted.len() - 1] - sorted[0];
        let mut sk = StatsAccumulator::new(StatsMode::Sketch);
        sk.extend(values.iter().copied());
        let est = sk.percentiles(&DEFAULT_PERCENTILES).unwrap();
        for (p, e) in DEFAULT_PERCENTILES.iter().zip(est) {
            let truth = percentile_sorted(&sorted, *p);
            assert!((e - truth).abs() <= 0.01 * range, "p{p}: {e} vs {truth}");
        }
    }

    proptest! {
        #[test]
        fn exact_percentiles_permutation_invariant(mut xs in prop::collection::vec(-100.0f64..100.0, 1..200), seed in any::<u64>()) {
            let a = exact(&xs);
            // Fisher-Yates with a simple LCG
            let mut s = seed | 1;
            for i in (1..xs.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                xs.swap(i, (s >> 33) as usize % (i + 1));
            }
            let b = exact(&xs);
            prop_assert_eq!(&a.percentiles, &b.percentiles);
            prop_assert!(a.min <= a.percentile(10.0).unwrap());
            prop_assert!(a.percentile(10.0).unwrap() <= a.percentile(50.0).unwrap());
            prop_assert!(a.percentile(50.0).unwrap() <= a.percentile(90.0).unwrap());
            prop_assert!(a.percentile(90.0).unwrap() <= a.max);
            prop_assert_eq!(a.histogram.counts.iter().sum::<u64>(), a.count);
        }

        #[test]
        fn merge_is_associative_on_moments(
            a in prop::collection::vec(-50.0f64..50.0, 0..40),
            b in prop::collection::vec(-50.0f64..50.0, 0..40),
            c in prop::collection::vec(-50.0f64..50.0, 0..40),
        ) {
            let acc = |v: &[f64]| { let mut x = StatsAccumulator::new(StatsMode::Exact); x.extend(v.iter().copied()); x };
            let left = acc(&a).merge(acc(&b)).unwrap().merge(acc(&c)).unwrap();
            let right = acc(&a).merge(acc(&b).merge(acc(&c)).unwrap()).unwrap();
            prop_assert_eq!(left.count(), right.count());
            prop_assert_eq!(left.min(), right.min());
            prop_assert_eq!(left.max(), right.max());
            prop_assert!((left.mean() - right.mean()).abs() <= 1e-9);
            prop_assert!((left.std() - right.std()).abs() <= 1e-9);
        }

        #[test]
        fn sigma_from_stats_hits_boundaries(xs in prop::collection::vec(-10.0f64..10.0, 20..100)) {
            let s = exact(&xs);
            if let Ok(p) = s.sigma() {
                prop_assert!((p.apply(s.percentile(10.0).unwrap()) - 0.1).abs() <= 1e-9);
                prop_assert!((p.apply(s.percentile(90.0).unwrap()) - 0.9).abs() <= 1e-9);
            }
        }
    }
}
