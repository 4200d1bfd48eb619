//! Datasets: synthetic generation, CSV ingestion, normalization and splits.

mod csv_io;
mod prep;
mod synth;

use serde::{Deserialize, Serialize};

pub use csv_io::{load_csv, write_csv, READINGS_FILE, STATIONS_FILE};
pub use prep::{PreparedData, Splits};
pub use synth::{generate_synthetic, SynthConfig};

use crate::geo::StationSet;

/// Continuous channels in file order.
pub const CONTINUOUS_CHANNELS: [&str; 3] = ["pm25", "temp", "humidity"];

/// Z-score parameters of one continuous channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

impl ChannelStats {
    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Raw time-indexed snapshots for a fixed station set.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub stations: StationSet,
    /// One per snapshot, strictly increasing. Integer steps or Unix seconds.
    pub timestamps: Vec<i64>,
    /// Whether timestamps came from (and are written as) ISO date-times.
    pub iso_time: bool,
    /// Continuous channel names, `C` of them.
    pub channels: Vec<String>,
    /// `[S, N, C]`
    pub values: Vec<f64>,
    /// `[S, N]`
    pub weather: Vec<u8>,
    /// `[S, N]`
    pub wind: Vec<u8>,
    /// Readings filled in during ingestion.
    pub imputed: usize,
}

impl Dataset {
    pub fn snapshots(&self) -> usize {
        self.timestamps.len()
    }

    pub fn nodes(&self) -> usize {
        self.stations.len()
    }

    pub fn value(&self, t: usize, node: usize, channel: usize) -> f64 {
        self.values[(t * self.nodes() + node) * self.channels.len() + channel]
    }

    /// The `[N]` slice of one channel at snapshot `t`.
    pub fn channel_at(&self, t: usize, channel: usize) -> Vec<f64> {
        (0..self.nodes()).map(|i| self.value(t, i, channel)).collect()
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c == name)
    }
}
