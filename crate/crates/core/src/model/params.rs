use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{ModelConfig, WEATHER_DIM, WEATHER_VOCAB, WIND_DIM, WIND_VOCAB};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Named learnable tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = t,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.tensors.push(t);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count (complex entries count twice).
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data().len()).sum()
    }

    /// Registers every tensor as a parameter leaf on `g`.
    pub fn bind(&self, g: &mut Graph) -> ParamVars {
        let vars: Vec<Var> = self.tensors.iter().map(|t| g.param(t.clone())).collect();
        ParamVars {
            vars,
            index: self.index.clone(),
        }
    }

    /// Attaches this store's names to leaves created elsewhere, in store order.
    pub fn name_vars(&self, vars: &[Var]) -> Result<ParamVars> {
        if vars.len() != self.len() {
            return Err(Error::Usage(format!(
                "expected {} parameter handles, got {}",
                self.len(),
                vars.len()
            )));
        }
        Ok(ParamVars {
            vars: vars.to_vec(),
            index: self.index.clone(),
        })
    }
}

/// Graph handles for a [`ParamStore`], in store order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Usage(format!("missing parameter {name:?}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn uniform_fc(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| rng.random_range(-bound..bound))
}

fn add_fc(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{prefix}.w"), uniform_fc(rng, fan_in, fan_out));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

fn add_norm(store: &mut ParamStore, prefix: &str, width: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::full(&[width], 1.0));
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[width]));
}

pub(crate) fn position_bias_name(block: usize, head: usize) -> String {
    format!("block{block}.local.bias{head}")
}

/// Fresh parameters for a model over `nodes` stations.
pub(crate) fn init_params(
    cfg: &ModelConfig,
    nodes: usize,
    continuous: usize,
    rng: &mut ChaCha8Rng,
) -> ParamStore {
    let d = ModelConfig::features(continuous);
    let (e, c) = (cfg.hidden, cfg.width());
    let mut s = ParamStore::new();

    s.insert("embed.mask_token", Tensor::zeros(&[d]));
    let normal = |rng: &mut ChaCha8Rng, shape: &[usize]| {
        Tensor::from_fn(shape, |_| StandardNormal.sample(&mut *rng))
    };
    s.insert("embed.weather_table", normal(rng, &[WEATHER_VOCAB, WEATHER_DIM]));
    s.insert("embed.wind_table", normal(rng, &[WIND_VOCAB, WIND_DIM]));
    add_fc(&mut s, rng, "embed.current", d, e);
    add_fc(&mut s, rng, "embed.history", cfg.history * d, e);

    let g = cfg.regions();
    let cb = c / cfg.weight_blocks;
    for l in 0..cfg.blocks {
        add_norm(&mut s, &format!("block{l}.ln1"), c);
        if cfg.use_local {
            for m in ["q", "k", "v", "o"] {
                add_fc(&mut s, rng, &format!("block{l}.local.{m}"), c, c);
            }
            for h in 0..cfg.heads() {
                let shape: &[usize] = if cfg.shared_bias { &[g] } else { &[nodes, g] };
                s.insert(position_bias_name(l, h), Tensor::zeros(shape));
            }
        }
        if cfg.use_global {
            // Near-identity blocks so the mixer starts close to pass-through.
            let mut w = Tensor::zeros_complex(&[cfg.weight_blocks, cb, cb]);
            for (idx, v) in w.data_mut().iter_mut().enumerate() {
                let entry = idx / 2;
                let (row, col) = ((entry / cb) % cb, entry % cb);
                let noise = 0.01 * rng.sample::<f64, _>(StandardNormal);
                *v = if idx % 2 == 0 && row == col { 1.0 + noise } else { noise };
            }
            s.insert(format!("block{l}.global.w"), w);
            s.insert(format!("block{l}.global.b"), Tensor::zeros_complex(&[cfg.weight_blocks, cb]));
        }
        add_norm(&mut s, &format!("block{l}.ln2"), c);
        add_fc(&mut s, rng, &format!("block{l}.mlp.fc1"), c, c);
        add_fc(&mut s, rng, &format!("block{l}.mlp.fc2"), c, c);
    }
    if cfg.use_causal {
        for u in 0..cfg.causal_layers {
            add_fc(&mut s, rng, &format!("causal{u}.gate"), c, cfg.contexts);
            for k in 0..cfg.contexts {
                add_fc(&mut s, rng, &format!("causal{u}.expert{k}.fc1"), c, c);
                add_fc(&mut s, rng, &format!("causal{u}.expert{k}.fc2"), c, c);
            }
        }
    }
    add_fc(&mut s, rng, "decode.fc1", c, c);
    add_fc(&mut s, rng, "decode.fc2", c, d);
    s
}
