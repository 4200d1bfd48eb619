//! Flat `key = value` run configuration covering both the architecture and
//! the optimizer settings.

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn keys_of<T: Serialize>(value: &T) -> Vec<String> {
    Table::try_from(value).map(|t| t.keys().cloned().collect()).unwrap_or_default()
}

fn model_keys() -> Vec<String> {
    keys_of(&ModelConfig::default())
}

fn train_keys() -> Vec<String> {
    // Optional fields only serialize when set.
    keys_of(&TrainConfig {
        batches_per_epoch: Some(1),
        val_samples: Some(1),
        ..TrainConfig::default()
    })
}

fn parse_part<T: DeserializeOwned>(table: Table) -> Result<T> {
    for (k, v) in &table {
        let mut single = Table::new();
        single.insert(k.clone(), v.clone());
        single
            .try_into::<T>()
            .map_err(|e| Error::Config(format!("key {k}: {}", e.message())))?;
    }
    table.try_into::<T>().map_err(|e| Error::Config(e.message().to_string()))
}

impl RunConfig {
    /// Parses a flat TOML document. Missing keys keep their defaults; unknown
    /// keys and invalid values are rejected.
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        Self::from_table(table)
    }

    fn from_table(table: Table) -> Result<RunConfig> {
        let (mkeys, tkeys) = (model_keys(), train_keys());
        let (mut model, mut train) = (Table::new(), Table::new());
        for (k, v) in table {
            if mkeys.contains(&k) {
                model.insert(k, v);
            } else if tkeys.contains(&k) {
                train.insert(k, v);
            } else {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
        }
        let cfg = RunConfig {
            model: parse_part(model)?,
            train: parse_part(train)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    fn table(&self) -> Result<Table> {
        let enc = |e: toml::ser::Error| Error::Format(e.to_string());
        let mut t = Table::try_from(&self.model).map_err(enc)?;
        t.extend(Table::try_from(&self.train).map_err(enc)?);
        Ok(t)
    }

    /// The effective configuration as a flat TOML document.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&self.table()?).map_err(|e| Error::Format(e.to_string()))
    }

    /// Hex SHA-256 of [`RunConfig::to_toml`].
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// Overrides one key with a TOML literal (`"0.01"`, `"[50.0, 100.0]"`).
    pub fn set(&mut self, key: &str, literal: &str) -> Result<()> {
        let parsed: Table = format!("v = {literal}")
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("value for {key}: {}", e.message())))?;
        let value: Value = parsed["v"].clone();
        let mut t = self.table()?;
        if !t.contains_key(key) && !train_keys().contains(&key.to_string()) {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        t.insert(key.to_string(), value);
        *self = Self::from_table(t)?;
        Ok(())
    }
}
