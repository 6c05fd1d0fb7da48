//! Traffic archives and the weekly / daily / recent segment bundles.
//!
//! A segment labelled `t` spans the half-open step range `[t, t + T_h)`.
//! For a predicted segment starting at anchor `t_p` the three inputs start
//! at `t_p - T_w`, `t_p - T_d` and `t_p - T_h`; each branch advances in
//! three equal steps of `(t_p - t_b) / 3` so that its third checkpoint lands
//! exactly on the predicted segment.

use std::fs;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const ARCHIVE_MAGIC: &[u8; 4] = b"ASTG";
const ARCHIVE_VERSION: u32 = 1;

/// Steps per hour, day and week.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Periods {
    pub hour: usize,
    pub day: usize,
    pub week: usize,
}

impl Periods {
    /// Periods for a fixed sampling cadence in minutes.
    pub fn from_cadence(minutes: u32) -> Result<Self> {
        if minutes == 0 || 60 % minutes != 0 {
            return Err(Error::invalid(format!(
                "cadence of {minutes} minutes does not divide an hour"
            )));
        }
        Self::new((60 / minutes) as usize, (24 * 60 / minutes) as usize)
    }

    /// Explicit hour and day lengths; the week is seven days.
    pub fn new(hour: usize, day: usize) -> Result<Self> {
        if hour == 0 || !hour.is_multiple_of(3) {
            return Err(Error::invalid(format!(
                "steps per hour must be a positive multiple of 3, got {hour}"
            )));
        }
        if day == 0 || !day.is_multiple_of(hour) {
            return Err(Error::invalid(format!(
                "steps per day ({day}) must be a positive multiple of steps per hour ({hour})"
            )));
        }
        Ok(Self {
            hour,
            day,
            week: 7 * day,
        })
    }
}

/// Raw series `T x N x F` with its observation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficArchive {
    series: Tensor,
    observed: Vec<bool>,
    periods: Periods,
    cadence_minutes: Option<u32>,
}

impl TrafficArchive {
    /// NaN entries of `series` are marked missing.
    pub fn new(series: Tensor, periods: Periods, cadence_minutes: Option<u32>) -> Result<Self> {
        if series.ndim() != 3 {
            return Err(Error::invalid(format!(
                "archive series must be T x N x F, got {:?}",
                series.shape()
            )));
        }
        if series.data().iter().any(|v| v.is_infinite()) {
            return Err(Error::invalid("archive contains infinite values"));
        }
        let observed = series.data().iter().map(|v| !v.is_nan()).collect();
        Ok(Self {
            series,
            observed,
            periods,
            cadence_minutes,
        })
    }

    pub fn from_cadence(series: Tensor, cadence_minutes: u32) -> Result<Self> {
        Self::new(series, Periods::from_cadence(cadence_minutes)?, Some(cadence_minutes))
    }

    pub fn series(&self) -> &Tensor {
        &self.series
    }

    /// `true` where the series was observed.
    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    pub fn periods(&self) -> Periods {
        self.periods
    }

    pub fn cadence_minutes(&self) -> Option<u32> {
        self.cadence_minutes
    }

    pub fn steps(&self) -> usize {
        self.series.shape()[0]
    }

    pub fn vertices(&self) -> usize {
        self.series.shape()[1]
    }

    pub fn features(&self) -> usize {
        self.series.shape()[2]
    }

    pub fn missing_fraction(&self) -> f64 {
        let missing = self.observed.iter().filter(|o| !**o).count();
        missing as f64 / self.observed.len() as f64
    }

    fn step_len(&self) -> usize {
        self.vertices() * self.features()
    }

    /// Raw values and mask of the segment `[start, start + T_h)`.
    fn segment(&self, start: usize) -> (Tensor, Vec<bool>) {
        let (h, n, f) = (self.periods.hour, self.vertices(), self.features());
        let lo = start * self.step_len();
        let hi = (start + h) * self.step_len();
        let values = Tensor::new(vec![h, n, f], self.series.data()[lo..hi].to_vec()).expect("segment shape");
        (values, self.observed[lo..hi].to_vec())
    }
}

/// Reads the canonical binary archive.
pub fn load_archive(path: impl AsRef<Path>) -> Result<TrafficArchive> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.len() < 24 || &bytes[..4] != ARCHIVE_MAGIC {
        return Err(Error::format(path, "not an archive (bad magic)"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let version = word(0);
    if version != ARCHIVE_VERSION {
        return Err(Error::format(path, format!("unsupported archive version {version}")));
    }
    let (t, n, f, cadence) = (word(1) as usize, word(2) as usize, word(3) as usize, word(4));
    if t == 0 || n == 0 || f == 0 {
        return Err(Error::format(path, format!("empty dimensions T={t} N={n} F={f}")));
    }
    let payload = &bytes[24..];
    let expected = t * n * f * 8;
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!("header declares {expected} payload bytes, found {}", payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let periods = Periods::from_cadence(cadence).map_err(|e| Error::format(path, e.to_string()))?;
    TrafficArchive::new(Tensor::new(vec![t, n, f], data)?, periods, Some(cadence))
}

/// Writes the canonical binary archive. Requires a known cadence.
pub fn write_archive(path: impl AsRef<Path>, archive: &TrafficArchive) -> Result<()> {
    let cadence = archive
        .cadence_minutes
        .ok_or_else(|| Error::invalid("archive has no cadence; cannot write binary format"))?;
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(ARCHIVE_MAGIC)?;
    for word in [
        ARCHIVE_VERSION,
        archive.steps() as u32,
        archive.vertices() as u32,
        archive.features() as u32,
        cadence,
    ] {
        out.write_all(&word.to_le_bytes())?;
    }
    for v in archive.series.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Shape of a CSV matrix fixture: one header row, then `T` rows of `N * F`
/// values ordered vertex-major (all features of vertex 0 first).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CsvLayout {
    pub vertices: usize,
    pub features: usize,
    pub cadence_minutes: u32,
}

/// Reads a CSV matrix archive. Empty cells and `NaN` mark missing values.
pub fn read_csv_archive(path: impl AsRef<Path>, layout: CsvLayout) -> Result<TrafficArchive> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let width = layout.vertices * layout.features;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty file"))?;
    if header.split(',').count() != width {
        return Err(Error::format(
            path,
            format!("line 1: header has {} columns, layout needs {width}", header.split(',').count()),
        ));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (lineno, line) in lines {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != width {
            return Err(Error::format(
                path,
                format!("line {}: expected {width} values, found {}", lineno + 1, cells.len()),
            ));
        }
        for (col, cell) in cells.iter().enumerate() {
            let v = if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                f64::NAN
            } else {
                cell.parse::<f64>().map_err(|_| {
                    Error::format(path, format!("line {}, column {}: cannot parse {cell:?}", lineno + 1, col + 1))
                })?
            };
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::format(path, "no data rows"));
    }
    let series = Tensor::new(vec![rows, layout.vertices, layout.features], data)?;
    TrafficArchive::from_cadence(series, layout.cadence_minutes)
}

/// Contiguous train / validation / test step ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.7, 0.1, 0.2];

/// Chronological split of `[0, steps)` at `floor(r0 T)` and `floor((r0 + r1) T)`.
pub fn split_ranges(steps: usize, ratios: [f64; 3]) -> Result<SplitRanges> {
    if ratios.iter().any(|r| !(*r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios must be positive and sum to 1, got {ratios:?}")));
    }
    // The small slack keeps e.g. (0.7 + 0.1) * 100 from flooring to 79.
    let cut = |r: f64| ((r * steps as f64) + 1e-9).floor() as usize;
    let b1 = cut(ratios[0]);
    let b2 = cut(ratios[0] + ratios[1]).min(steps);
    let ranges = SplitRanges {
        train: 0..b1,
        val: b1..b2,
        test: b2..steps,
    };
    if ranges.train.is_empty() || ranges.val.is_empty() || ranges.test.is_empty() {
        return Err(Error::invalid(format!("{steps} steps are too few for split {ratios:?}")));
    }
    Ok(ranges)
}

/// Splits an archive and checks each part contains at least one valid anchor.
pub fn chronological_split(archive: &TrafficArchive, ratios: [f64; 3]) -> Result<SplitRanges> {
    let ranges = split_ranges(archive.steps(), ratios)?;
    for (name, r) in [("train", &ranges.train), ("val", &ranges.val), ("test", &ranges.test)] {
        if enumerate_valid_anchors(archive, r.clone()).is_empty() {
            return Err(Error::invalid(format!(
                "{name} split {r:?} contains no valid anchor (need {} steps of history)",
                archive.periods.week
            )));
        }
    }
    Ok(ranges)
}

/// Per-feature mean and standard deviation of the training data.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const STD_FLOOR: f64 = 1e-8;

/// Statistics over observed entries of `range`, population convention.
pub fn fit_normalizer(archive: &TrafficArchive, range: Range<usize>) -> Result<NormalizationStats> {
    if range.is_empty() || range.end > archive.steps() {
        return Err(Error::invalid(format!("bad training range {range:?}")));
    }
    let f = archive.features();
    let mut count = vec![0usize; f];
    let mut sum = vec![0.0; f];
    let lo = range.start * archive.step_len();
    let hi = range.end * archive.step_len();
    let values = &archive.series.data()[lo..hi];
    let observed = &archive.observed[lo..hi];
    for (i, (v, ok)) in values.iter().zip(observed).enumerate() {
        if *ok {
            count[i % f] += 1;
            sum[i % f] += v;
        }
    }
    if let Some(feat) = count.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!("feature {feat} has no observed entries in the training range")));
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, c)| s / *c as f64).collect();
    let mut sq = vec![0.0; f];
    for (i, (v, ok)) in values.iter().zip(observed).enumerate() {
        if *ok {
            sq[i % f] += (v - mean[i % f]).powi(2);
        }
    }
    let std = sq
        .iter()
        .zip(&count)
        .map(|(s, c)| (s / *c as f64).sqrt().max(STD_FLOOR))
        .collect();
    Ok(NormalizationStats { mean, std })
}

impl NormalizationStats {
    pub fn features(&self) -> usize {
        self.mean.len()
    }

    /// `(x - mean) / std` along the trailing feature axis; NaN stays NaN.
    pub fn normalize(&self, x: &Tensor) -> Tensor {
        self.per_feature(x, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, x: &Tensor) -> Tensor {
        self.per_feature(x, |v, m, s| v * s + m)
    }

    fn per_feature(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let nf = self.features();
        assert_eq!(x.shape().last(), Some(&nf), "trailing axis must be the feature axis");
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = f(*v, self.mean[i % nf], self.std[i % nf]);
        }
        out
    }
}

/// Anchors `t_p` in `range` with a full weekly history and a full predicted
/// segment inside the archive, in increasing order.
pub fn enumerate_valid_anchors(archive: &TrafficArchive, range: Range<usize>) -> Vec<usize> {
    let p = archive.periods;
    let lo = range.start.max(p.week);
    let hi = range.end.min((archive.steps() + 1).saturating_sub(p.hour));
    (lo..hi.max(lo)).collect()
}

/// One of the three independent ODE branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Weekly,
    Daily,
    Recent,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Weekly, Branch::Daily, Branch::Recent];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Weekly => "weekly",
            Branch::Daily => "daily",
            Branch::Recent => "recent",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Distance from the input segment's start to the anchor.
    pub fn lag(self, periods: Periods) -> usize {
        match self {
            Branch::Weekly => periods.week,
            Branch::Daily => periods.day,
            Branch::Recent => periods.hour,
        }
    }

    /// Input segment start `t_b`.
    pub fn start(self, anchor: usize, periods: Periods) -> usize {
        anchor - self.lag(periods)
    }

    /// Steps covered by one forward pass, `(t_p - t_b) / 3`.
    pub fn advance(self, periods: Periods) -> usize {
        self.lag(periods) / 3
    }
}

/// Normalized segment values with an observation mask (1 observed, 0 missing).
/// Missing values are stored as 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start: usize,
    pub values: Tensor,
    pub mask: Tensor,
}

impl Segment {
    pub fn observed(&self) -> usize {
        self.mask.data().iter().filter(|m| **m != 0.0).count()
    }
}

/// Inputs and supervision targets for one anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBundle {
    pub anchor: usize,
    pub periods: Periods,
    /// Normalized, zero-imputed inputs indexed by [`Branch::index`].
    pub inputs: [Tensor; 3],
    pub input_starts: [usize; 3],
    /// Targets at `t_b + k * advance` for `k = 1, 2`, indexed `[branch][k - 1]`.
    pub intermediate: [[Segment; 2]; 3],
    /// The predicted segment `[t_p, t_p + T_h)`.
    pub predicted: Segment,
}

fn target(archive: &TrafficArchive, start: usize, stats: &NormalizationStats) -> Segment {
    let (raw, observed) = archive.segment(start);
    let mut values = stats.normalize(&raw);
    for (v, ok) in values.data_mut().iter_mut().zip(&observed) {
        if !ok {
            *v = 0.0;
        }
    }
    let mask = Tensor::new(
        raw.shape().to_vec(),
        observed.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect(),
    )
    .expect("mask shape");
    Segment { start, values, mask }
}

pub fn extract_bundle(archive: &TrafficArchive, anchor: usize, stats: &NormalizationStats) -> Result<SampleBundle> {
    let p = archive.periods;
    if anchor < p.week || anchor + p.hour > archive.steps() {
        return Err(Error::InvalidAnchor(anchor));
    }
    if stats.features() != archive.features() {
        return Err(Error::invalid("normalization statistics do not match archive features"));
    }
    let input_starts = Branch::ALL.map(|b| b.start(anchor, p));
    let inputs = input_starts.map(|s| target(archive, s, stats).values);
    let intermediate = Branch::ALL.map(|b| {
        let t_b = b.start(anchor, p);
        let dt = b.advance(p);
        [1, 2].map(|k| target(archive, t_b + k * dt, stats))
    });
    Ok(SampleBundle {
        anchor,
        periods: p,
        inputs,
        input_starts,
        intermediate,
        predicted: target(archive, anchor, stats),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(steps: usize, cadence: u32) -> TrafficArchive {
        let series = Tensor::from_fn(&[steps, 2, 1], |i| (i as f64 * 0.37).sin());
        TrafficArchive::from_cadence(series, cadence).unwrap()
    }

    #[test]
    fn five_minute_periods() {
        let p = Periods::from_cadence(5).unwrap();
        assert_eq!(p, Periods { hour: 12, day: 288, week: 2016 });
        assert!(Periods::from_cadence(0).is_err());
        assert!(Periods::from_cadence(7).is_err());
        // 15 minutes gives 4 steps per hour, which cannot be cut in thirds.
        assert!(Periods::from_cadence(15).is_err());
    }

    #[test]
    fn split_arithmetic() {
        let r = split_ranges(100, DEFAULT_SPLIT).unwrap();
        assert_eq!((r.train, r.val, r.test), (0..70, 70..80, 80..100));
        let r = split_ranges(10, DEFAULT_SPLIT).unwrap();
        assert_eq!(r.val, 7..8);
        assert!(split_ranges(2, DEFAULT_SPLIT).is_err());
        assert!(split_ranges(100, [0.5, 0.5, 0.5]).is_err());
    }

    #[test]
    fn split_requires_anchor_per_part() {
        let a = toy(600, 20);
        assert!(chronological_split(&a, DEFAULT_SPLIT).is_err());
        let a = toy(3000, 20);
        let r = chronological_split(&a, DEFAULT_SPLIT).unwrap();
        assert!(r.train.end <= r.val.start && r.val.end <= r.test.start);
    }

    #[test]
    fn normalizer_population_std() {
        let series = Tensor::new(vec![3, 1, 1], vec![1.0, 3.0, 100.0]).unwrap();
        let a = TrafficArchive::from_cadence(series, 20).unwrap();
        let s = fit_normalizer(&a, 0..2).unwrap();
        assert_eq!(s.mean, vec![2.0]);
        assert_eq!(s.std, vec![1.0]);
    }

    #[test]
    fn constant_feature_normalizes_to_zero() {
        let series = Tensor::full(&[4, 2, 1], 5.0);
        let a = TrafficArchive::from_cadence(series.clone(), 20).unwrap();
        let s = fit_normalizer(&a, 0..4).unwrap();
        assert_eq!(s.std, vec![1e-8]);
        assert!(s.normalize(&series).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn missing_only_feature_is_an_error() {
        let mut series = Tensor::from_fn(&[4, 1, 2], |i| i as f64);
        for t in 0..2 {
            series.set(&[t, 0, 1], f64::NAN);
        }
        let a = TrafficArchive::from_cadence(series, 20).unwrap();
        assert!(fit_normalizer(&a, 0..2).is_err());
        let s = fit_normalizer(&a, 0..4).unwrap();
        assert_eq!(s.mean, vec![3.0, 6.0]);
        let n = s.normalize(a.series());
        assert!(n.at(&[0, 0, 1]).is_nan());
    }

    #[test]
    fn anchor_boundaries() {
        let p = Periods::from_cadence(20).unwrap();
        let a = toy(p.week + p.hour, 20);
        assert_eq!(enumerate_valid_anchors(&a, 0..a.steps()), vec![p.week]);
        let a = toy(p.week + p.hour - 1, 20);
        assert!(enumerate_valid_anchors(&a, 0..a.steps()).is_empty());
    }

    #[test]
    fn recent_branch_offsets_at_five_minutes() {
        let p = Periods::from_cadence(5).unwrap();
        assert_eq!(Branch::Recent.advance(p), 4);
        assert_eq!(Branch::Daily.advance(p), 96);
        assert_eq!(Branch::Weekly.advance(p), 672);
        let a = toy(p.week + 2 * p.hour, 5);
        let stats = fit_normalizer(&a, 0..a.steps()).unwrap();
        let t_p = p.week + 3;
        let b = extract_bundle(&a, t_p, &stats).unwrap();
        let recent = &b.intermediate[Branch::Recent.index()];
        assert_eq!(recent[0].start, t_p - 8);
        assert_eq!(recent[1].start, t_p - 4);
        assert_eq!(b.input_starts, [t_p - 2016, t_p - 288, t_p - 12]);
        assert!(extract_bundle(&a, p.week - 1, &stats).is_err());
    }

    #[test]
    fn missing_inputs_are_imputed_and_targets_masked() {
        let p = Periods::from_cadence(20).unwrap();
        let mut series = Tensor::from_fn(&[p.week + p.hour, 2, 1], |i| i as f64);
        series.set(&[p.week + 1, 1, 0], f64::NAN);
        series.set(&[p.week - 1, 0, 0], f64::NAN);
        let a = TrafficArchive::from_cadence(series, 20).unwrap();
        let stats = fit_normalizer(&a, 0..a.steps()).unwrap();
        let b = extract_bundle(&a, p.week, &stats).unwrap();
        assert_eq!(b.predicted.mask.at(&[1, 1, 0]), 0.0);
        assert_eq!(b.predicted.values.at(&[1, 1, 0]), 0.0);
        assert_eq!(b.predicted.observed(), 2 * p.hour - 1);
        // recent input covers [t_p - 3, t_p); its last step at vertex 0 is missing.
        assert_eq!(b.inputs[Branch::Recent.index()].at(&[2, 0, 0]), 0.0);
        assert!(b.inputs.iter().all(Tensor::is_finite));
    }
}
