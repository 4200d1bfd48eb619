use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{DartboardSpec, Orientation};

/// Categorical vocabularies and their embedding widths.
pub const WEATHER_VOCAB: usize = 5;
pub const WIND_VOCAB: usize = 8;
pub const WEATHER_DIM: usize = 4;
pub const WIND_DIM: usize = 4;

/// Architecture hyperparameters. Field names in config files follow the
/// usual symbols (`E`, `L`, `K`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden size `E`; node states are `2E` wide.
    #[serde(rename = "E")]
    pub hidden: usize,
    /// Stacked spatial blocks `L`.
    #[serde(rename = "L")]
    pub blocks: usize,
    /// Outer dartboard radius per attention head.
    pub radii_km: Vec<f64>,
    pub ring_fractions: Vec<f64>,
    pub sectors: usize,
    pub orientation: Orientation,
    /// Diagonal blocks of the spectral weight.
    #[serde(rename = "K_hat")]
    pub weight_blocks: usize,
    /// Spectral soft-threshold.
    pub lambda: f64,
    /// Contexts (experts) per causal layer.
    #[serde(rename = "K")]
    pub contexts: usize,
    #[serde(rename = "U")]
    pub causal_layers: usize,
    /// History length in steps.
    #[serde(rename = "T")]
    pub history: usize,
    /// One `[G]` position bias per head instead of `[N, G]`.
    pub shared_bias: bool,
    /// Ablation switches.
    pub use_local: bool,
    pub use_global: bool,
    pub use_causal: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let db = DartboardSpec::default();
        ModelConfig {
            hidden: 32,
            blocks: 2,
            radii_km: db.radii_km,
            ring_fractions: db.ring_fractions,
            sectors: db.sectors,
            orientation: db.orientation,
            weight_blocks: 2,
            lambda: 1e-2,
            contexts: 4,
            causal_layers: 2,
            history: 24,
            shared_bias: false,
            use_local: true,
            use_global: true,
            use_causal: true,
        }
    }
}

impl ModelConfig {
    /// Node state width `2E`.
    pub fn width(&self) -> usize {
        2 * self.hidden
    }

    pub fn heads(&self) -> usize {
        self.radii_km.len()
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads().max(1)
    }

    /// Attention scale `1 / sqrt(head_dim)`.
    pub fn alpha(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }

    pub fn dartboard(&self) -> DartboardSpec {
        DartboardSpec {
            radii_km: self.radii_km.clone(),
            ring_fractions: self.ring_fractions.clone(),
            sectors: self.sectors,
            orientation: self.orientation,
        }
    }

    pub fn regions(&self) -> usize {
        self.ring_fractions.len() * self.sectors
    }

    /// Input feature width `D` for a given number of continuous channels.
    pub fn features(continuous: usize) -> usize {
        continuous + WEATHER_DIM + WIND_DIM
    }

    pub fn validate(&self) -> Result<()> {
        self.dartboard().validate()?;
        let counts = [
            ("E", self.hidden),
            ("L", self.blocks),
            ("K_hat", self.weight_blocks),
            ("K", self.contexts),
            ("U", self.causal_layers),
            ("T", self.history),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.width() % self.weight_blocks != 0 {
            return Err(Error::Config(format!(
                "2E = {} is not divisible by K_hat = {}",
                self.width(),
                self.weight_blocks
            )));
        }
        if self.width() % self.heads() != 0 {
            return Err(Error::Config(format!(
                "2E = {} is not divisible by {} heads",
                self.width(),
                self.heads()
            )));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}
