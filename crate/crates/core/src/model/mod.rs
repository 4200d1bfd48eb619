//! The inference network: embedding with a mask token, stacked spatial blocks
//! (dartboard attention plus spectral mixing), a mixture of causal experts
//! and an MLP decoder.

mod batch;
mod checkpoint;
mod config;
pub mod layers;
mod params;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use batch::SnapshotBatch;
pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, WEATHER_DIM, WEATHER_VOCAB, WIND_DIM, WIND_VOCAB};
pub use params::{ParamStore, ParamVars};

use crate::data::ChannelStats;
use crate::error::{Error, Result};
use crate::geo::{build_projection, Orientation, ProjectionSet, Station, StationSet};
use crate::numerics::{Graph, Tensor, Var};

/// Handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Reconstruction `[B, N, D]` for every node.
    pub output: Var,
    /// Gate weights `[B, N, K]` of each causal layer.
    pub gates: Vec<Var>,
}

/// A model bound to a station set.
#[derive(Debug, Clone)]
pub struct AirRadar {
    config: ModelConfig,
    stations: StationSet,
    channels: Vec<ChannelStats>,
    projection: ProjectionSet,
    params: ParamStore,
}

impl AirRadar {
    /// Freshly initialized model. `channels` describes the continuous input
    /// channels in order; the first one is the reported pollutant.
    pub fn new(config: ModelConfig, stations: StationSet, channels: Vec<ChannelStats>, seed: u64) -> Result<Self> {
        config.validate()?;
        if channels.is_empty() {
            return Err(Error::Config("at least one continuous channel is required".into()));
        }
        let projection = build_projection(&stations, &config.dartboard())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = params::init_params(&config, stations.len(), channels.len(), &mut rng);
        Ok(AirRadar {
            config,
            stations,
            channels,
            projection,
            params,
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        stations: StationSet,
        channels: Vec<ChannelStats>,
        params: ParamStore,
    ) -> Result<Self> {
        config.validate()?;
        let projection = build_projection(&stations, &config.dartboard())?;
        Ok(AirRadar {
            config,
            stations,
            channels,
            projection,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn stations(&self) -> &StationSet {
        &self.stations
    }

    pub fn channels(&self) -> &[ChannelStats] {
        &self.channels
    }

    /// Number of continuous channels `Dc`.
    pub fn continuous(&self) -> usize {
        self.channels.len()
    }

    /// Output width `D`.
    pub fn features(&self) -> usize {
        ModelConfig::features(self.continuous())
    }

    pub fn projection(&self) -> &ProjectionSet {
        &self.projection
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Fails unless `other` has the same ids at the same places, in order.
    pub fn check_stations(&self, other: &StationSet) -> Result<()> {
        if other.len() != self.stations.len() {
            return Err(Error::Validation(format!(
                "model was trained on {} stations, data has {}",
                self.stations.len(),
                other.len()
            )));
        }
        for (a, b) in self.stations.iter().zip(other.iter()) {
            let moved = (a.location.lat - b.location.lat).abs() > 1e-9
                || (a.location.lon - b.location.lon).abs() > 1e-9;
            if a.id != b.id || moved {
                return Err(Error::Validation(format!(
                    "station mismatch: model has {:?}, data has {:?}",
                    a.id, b.id
                )));
            }
        }
        Ok(())
    }

    /// Records the forward pass on `g` using parameter handles from
    /// [`ParamStore::bind`].
    pub fn forward(&self, g: &mut Graph, p: &ParamVars, batch: &SnapshotBatch) -> Result<ForwardTrace> {
        batch.validate(self.stations.len(), self.continuous(), self.config.history)?;
        let orient: Option<Arc<[u8]>> = match self.config.orientation {
            Orientation::WindAligned => Some(batch.orientation_codes().into()),
            Orientation::StaticNorth => None,
        };
        let mut z = layers::embed(g, p, &self.config, batch)?;
        for l in 0..self.config.blocks {
            z = layers::spatial_block(g, p, &self.config, &self.projection, orient.clone(), l, z)?;
        }
        let (y, gates) = layers::causal_forward(g, p, &self.config, z)?;
        let output = layers::decode(g, p, y)?;
        Ok(ForwardTrace { output, gates })
    }

    /// Reconstruction `[B, N, D]` in normalized units.
    pub fn predict(&self, batch: &SnapshotBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let trace = self.forward(&mut g, &p, batch)?;
        Ok(g.value(trace.output).clone())
    }

    /// A copy over the current stations plus `extra` pseudo-stations.
    ///
    /// Per-node position biases of the new nodes are set to the mean of the
    /// trained rows.
    pub fn with_extra_stations(&self, extra: Vec<Station>) -> Result<AirRadar> {
        let stations = self.stations.extended(extra)?;
        let (n_old, n_new) = (self.stations.len(), stations.len());
        let mut params = self.params.clone();
        if !self.config.shared_bias && self.config.use_local {
            for l in 0..self.config.blocks {
                for h in 0..self.config.heads() {
                    let name = params::position_bias_name(l, h);
                    let old = params
                        .get(&name)
                        .ok_or_else(|| Error::Format(format!("missing parameter {name:?}")))?;
                    params.insert(name, extend_rows(old, n_old, n_new)?);
                }
            }
        }
        AirRadar::from_parts(self.config.clone(), stations, self.channels.clone(), params)
    }
}

fn extend_rows(t: &Tensor, n_old: usize, n_new: usize) -> Result<Tensor> {
    let g = t.last_dim();
    let mut mean = vec![0.0; g];
    for row in t.data().chunks(g) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n_old as f64;
        }
    }
    let mut data = t.data().to_vec();
    for _ in n_old..n_new {
        data.extend_from_slice(&mean);
    }
    Tensor::new(&[n_new, g], data)
}
