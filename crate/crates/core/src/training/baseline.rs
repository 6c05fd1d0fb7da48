use crate::data::{NormalizationStats, TrafficArchive};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Historical average forecast for `[anchor, anchor + T_h)` in raw units.
///
/// Each entry is the mean of the observed values at the same time of day on
/// every earlier day in the archive. Entries with no such history fall back
/// to the training mean of their feature.
pub fn historical_average(archive: &TrafficArchive, anchor: usize, stats: &NormalizationStats) -> Result<Tensor> {
    let p = archive.periods();
    if anchor + p.hour > archive.steps() {
        return Err(Error::InvalidAnchor(anchor));
    }
    let (n, f) = (archive.vertices(), archive.features());
    let step_len = n * f;
    let series = archive.series().data();
    let observed = archive.observed();
    let mut out = Tensor::zeros(&[p.hour, n, f]);
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let (step, within) = (i / step_len, i % step_len);
        let t = anchor + step;
        let (mut sum, mut count) = (0.0, 0usize);
        let mut back = p.day;
        while back <= t {
            let idx = (t - back) * step_len + within;
            if observed[idx] {
                sum += series[idx];
                count += 1;
            }
            back += p.day;
        }
        *v = if count > 0 { sum / count as f64 } else { stats.mean[within % f] };
    }
    Ok(out)
}
