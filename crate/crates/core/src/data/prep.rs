use std::ops::Range;

use log::warn;

use super::{ChannelStats, Dataset};
use crate::error::{Error, Result};
use crate::model::SnapshotBatch;
use crate::numerics::Tensor;

/// The reported pollutant; it must survive normalization.
const TARGET: &str = "pm25";

/// Chronological 60/20/20 split of sample times. A sample time `t` uses
/// snapshot `t` as the current reading and `t - T .. t` as history, so the
/// first `T` snapshots only serve as history.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Splits {
    pub fn chronological(snapshots: usize, history: usize) -> Result<Splits> {
        let samples = snapshots.saturating_sub(history);
        let train = samples * 3 / 5;
        let val = samples / 5;
        if train == 0 || val == 0 || samples - train - val == 0 {
            return Err(Error::Usage(format!(
                "{snapshots} snapshots leave {samples} samples after a history of {history}; \
                 not enough for train/val/test splits"
            )));
        }
        let a = history + train;
        let b = a + val;
        Ok(Splits {
            train: history..a,
            val: a..b,
            test: b..snapshots,
        })
    }
}

/// A dataset with z-scored continuous channels and its splits.
#[derive(Debug, Clone)]
pub struct PreparedData {
    dataset: Dataset,
    history: usize,
    stats: Vec<ChannelStats>,
    columns: Vec<usize>,
    /// `[S, N, Ck]` for the kept channels.
    normalized: Vec<f64>,
    splits: Splits,
}

impl PreparedData {
    /// Fits normalization on the snapshots the training split can read.
    /// Channels with zero spread are dropped.
    pub fn fit(dataset: Dataset, history: usize) -> Result<PreparedData> {
        let splits = Splits::chronological(dataset.snapshots(), history)?;
        let rows = 0..splits.train.end;
        let mut stats = Vec::new();
        for (k, name) in dataset.channels.iter().enumerate() {
            let (mean, std) = moments(&dataset, k, rows.clone());
            if !(std > 1e-12) {
                if name == TARGET {
                    return Err(Error::Validation(format!("channel {TARGET} is constant on the training split")));
                }
                warn!("channel {name} is constant on the training split; dropped");
                continue;
            }
            stats.push(ChannelStats {
                name: name.clone(),
                mean,
                std,
            });
        }
        Self::with_stats(dataset, history, &stats)
    }

    /// Applies existing statistics (for example from a checkpoint); channels
    /// are matched by name.
    pub fn with_stats(dataset: Dataset, history: usize, stats: &[ChannelStats]) -> Result<PreparedData> {
        let splits = Splits::chronological(dataset.snapshots(), history)?;
        if stats.first().map(|s| s.name.as_str()) != Some(TARGET) {
            return Err(Error::Validation(format!("the first channel must be {TARGET}")));
        }
        let columns = stats
            .iter()
            .map(|s| {
                dataset
                    .channel_index(&s.name)
                    .ok_or_else(|| Error::Validation(format!("dataset has no channel {}", s.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        let (sn, c) = (dataset.snapshots() * dataset.nodes(), dataset.channels.len());
        let mut normalized = Vec::with_capacity(sn * stats.len());
        for row in 0..sn {
            for (s, &col) in stats.iter().zip(&columns) {
                normalized.push(s.normalize(dataset.values[row * c + col]));
            }
        }
        Ok(PreparedData {
            dataset,
            history,
            stats: stats.to_vec(),
            columns,
            normalized,
            splits,
        })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn history(&self) -> usize {
        self.history
    }

    pub fn stats(&self) -> &[ChannelStats] {
        &self.stats
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    /// Number of kept continuous channels.
    pub fn continuous(&self) -> usize {
        self.stats.len()
    }

    pub fn nodes(&self) -> usize {
        self.dataset.nodes()
    }

    pub fn normalized(&self, t: usize, node: usize, k: usize) -> f64 {
        self.normalized[(t * self.nodes() + node) * self.continuous() + k]
    }

    /// Raw target reading.
    pub fn target(&self, t: usize, node: usize) -> f64 {
        self.dataset.value(t, node, self.columns[0])
    }

    /// The raw target channel at snapshot `t`.
    pub fn target_at(&self, t: usize) -> Vec<f64> {
        self.dataset.channel_at(t, self.columns[0])
    }

    /// Batch for sample times `times` with one mask per sample.
    pub fn batch(&self, times: &[usize], masks: &[Vec<bool>]) -> Result<SnapshotBatch> {
        let (n, c, h) = (self.nodes(), self.continuous(), self.history);
        if times.len() != masks.len() || masks.iter().any(|m| m.len() != n) {
            return Err(Error::Dimension(format!(
                "{} sample times, {} masks, {n} nodes",
                times.len(),
                masks.len()
            )));
        }
        if let Some(&t) = times.iter().find(|&&t| t < h || t >= self.dataset.snapshots()) {
            return Err(Error::Usage(format!("sample time {t} has no full history")));
        }
        let b = times.len();
        let snap = |t: usize| &self.normalized[t * n * c..(t + 1) * n * c];
        let mut current = Vec::with_capacity(b * n * c);
        let mut past = Vec::with_capacity(b * n * h * c);
        let (mut weather, mut wind) = (Vec::with_capacity(b * n), Vec::with_capacity(b * n));
        let (mut past_weather, mut past_wind) = (Vec::with_capacity(b * n * h), Vec::with_capacity(b * n * h));
        for &t in times {
            current.extend_from_slice(snap(t));
            weather.extend_from_slice(&self.dataset.weather[t * n..(t + 1) * n]);
            wind.extend_from_slice(&self.dataset.wind[t * n..(t + 1) * n]);
            for i in 0..n {
                for s in t - h..t {
                    past.extend_from_slice(&snap(s)[i * c..(i + 1) * c]);
                    past_weather.push(self.dataset.weather[s * n + i]);
                    past_wind.push(self.dataset.wind[s * n + i]);
                }
            }
        }
        Ok(SnapshotBatch {
            current: Tensor::new(&[b, n, c], current)?,
            weather,
            wind,
            past: Tensor::new(&[b, n, h, c], past)?,
            past_weather,
            past_wind,
            mask: masks.concat(),
        })
    }
}

/// Mean and population standard deviation of one channel over snapshots
/// `rows`.
fn moments(ds: &Dataset, channel: usize, rows: Range<usize>) -> (f64, f64) {
    let n = ds.nodes();
    let count = (rows.len() * n) as f64;
    let mut sum = 0.0;
    for t in rows.clone() {
        for i in 0..n {
            sum += ds.value(t, i, channel);
        }
    }
    let mean = sum / count;
    let mut sq = 0.0;
    for t in rows {
        for i in 0..n {
            sq += (ds.value(t, i, channel) - mean).powi(2);
        }
    }
    (mean, (sq / count).sqrt())
}
