//! Graph builders for the individual stages of the network. Every function
//! works on `[B, N, C]` node states.

use std::sync::Arc;

use super::batch::SnapshotBatch;
use super::config::ModelConfig;
use super::params::{position_bias_name, ParamVars};
use crate::error::Result;
use crate::geo::ProjectionSet;
use crate::numerics::{Direction, Graph, Tensor, Var};

fn fc(g: &mut Graph, p: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.w"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    g.linear(x, w, b)
}

/// `fc2(gelu(fc1(x)))`
pub fn mlp(g: &mut Graph, p: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    let h = fc(g, p, &format!("{prefix}.fc1"), x)?;
    let h = g.gelu(h)?;
    fc(g, p, &format!("{prefix}.fc2"), h)
}

fn norm(g: &mut Graph, p: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    let gamma = p.get(&format!("{prefix}.gamma"))?;
    let beta = p.get(&format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta)
}

/// Input features `[lead.., Dc + 8]`: continuous readings followed by the
/// weather and wind embeddings.
fn features(g: &mut Graph, p: &ParamVars, cont: &Tensor, weather: &[u8], wind: &[u8]) -> Result<Var> {
    let lead = &cont.shape()[..cont.rank() - 1];
    let x = g.constant(cont.clone());
    let codes = |c: &[u8]| -> Arc<[usize]> { c.iter().map(|&v| v as usize).collect() };
    let we = g.lookup(p.get("embed.weather_table")?, codes(weather), lead)?;
    let wi = g.lookup(p.get("embed.wind_table")?, codes(wind), lead)?;
    g.concat_last(&[x, we, wi])
}

/// Embeds a batch into `[B, N, 2E]`. Masked nodes see only the mask token,
/// both for the current reading and for every history step.
pub fn embed(g: &mut Graph, p: &ParamVars, cfg: &ModelConfig, batch: &SnapshotBatch) -> Result<Var> {
    let (b, n) = (batch.batch(), batch.nodes());
    let d = ModelConfig::features(batch.continuous());
    let token = p.get("embed.mask_token")?;
    let mask: Arc<[bool]> = batch.mask.clone().into();

    let x = features(g, p, &batch.current, &batch.weather, &batch.wind)?;
    let x = g.mask_replace(x, token, mask.clone())?;
    let hx = fc(g, p, "embed.current", x)?;

    let past = features(g, p, &batch.past, &batch.past_weather, &batch.past_wind)?;
    let past = g.reshape(past, &[b, n, cfg.history * d])?;
    let past = g.mask_replace(past, token, mask)?;
    let hp = fc(g, p, "embed.history", past)?;
    g.concat_last(&[hx, hp])
}

/// Output of the local branch before the residual: multi-head dartboard
/// attention followed by the output map.
pub fn local_delta(
    g: &mut Graph,
    p: &ParamVars,
    cfg: &ModelConfig,
    proj: &ProjectionSet,
    orient: Option<Arc<[u8]>>,
    block: usize,
    z: Var,
) -> Result<Var> {
    let pre = format!("block{block}.local");
    let q = fc(g, p, &format!("{pre}.q"), z)?;
    let k = fc(g, p, &format!("{pre}.k"), z)?;
    let v = fc(g, p, &format!("{pre}.v"), z)?;
    let dh = cfg.head_dim();
    let mut heads = Vec::with_capacity(cfg.heads());
    for (h, head) in proj.heads().iter().enumerate() {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice_last(q, lo, hi)?;
        let kh = g.slice_last(k, lo, hi)?;
        let vh = g.slice_last(v, lo, hi)?;
        let bias = p.get(&position_bias_name(block, h))?;
        let orient = head.is_wind_aligned().then(|| orient.clone()).flatten();
        heads.push(g.region_attention(qh, kh, vh, bias, head.clone(), orient, cfg.alpha())?);
    }
    let cat = g.concat_last(&heads)?;
    fc(g, p, &format!("{pre}.o"), cat)
}

/// `z + local_delta(z)`
pub fn local_attention(
    g: &mut Graph,
    p: &ParamVars,
    cfg: &ModelConfig,
    proj: &ProjectionSet,
    orient: Option<Arc<[u8]>>,
    block: usize,
    z: Var,
) -> Result<Var> {
    let d = local_delta(g, p, cfg, proj, orient, block, z)?;
    g.add(z, d)
}

/// Output of the global branch before the residual: FFT over the node axis,
/// block-diagonal complex weights, soft shrinkage, inverse FFT, real part.
pub fn spectral_delta(g: &mut Graph, p: &ParamVars, cfg: &ModelConfig, block: usize, z: Var) -> Result<Var> {
    let w = p.get(&format!("block{block}.global.w"))?;
    let b = p.get(&format!("block{block}.global.b"))?;
    let zc = g.to_complex(z)?;
    let spec = g.fft(zc, 1, Direction::Forward)?;
    let mixed = g.block_linear(spec, w, b)?;
    let sparse = g.soft_threshold(mixed, cfg.lambda)?;
    let back = g.fft(sparse, 1, Direction::Inverse)?;
    g.real_part(back)
}

/// `z + spectral_delta(z)`
pub fn spectral_mix(g: &mut Graph, p: &ParamVars, cfg: &ModelConfig, block: usize, z: Var) -> Result<Var> {
    let d = spectral_delta(g, p, cfg, block, z)?;
    g.add(z, d)
}

/// One spatial block. Both branches read the same normalized input and
/// their outputs are added onto `z`, followed by a pre-norm MLP.
pub fn spatial_block(
    g: &mut Graph,
    p: &ParamVars,
    cfg: &ModelConfig,
    proj: &ProjectionSet,
    orient: Option<Arc<[u8]>>,
    block: usize,
    z: Var,
) -> Result<Var> {
    let zn = norm(g, p, &format!("block{block}.ln1"), z)?;
    let mut combined = z;
    if cfg.use_local {
        let d = local_delta(g, p, cfg, proj, orient, block, zn)?;
        combined = g.add(combined, d)?;
    }
    if cfg.use_global {
        let d = spectral_delta(g, p, cfg, block, zn)?;
        combined = g.add(combined, d)?;
    }
    let cn = norm(g, p, &format!("block{block}.ln2"), combined)?;
    let m = mlp(g, p, &format!("block{block}.mlp"), cn)?;
    g.add(combined, m)
}

/// One causal layer; returns the new state and the gate weights `[B, N, K]`.
pub fn causal_layer(g: &mut Graph, p: &ParamVars, cfg: &ModelConfig, layer: usize, y: Var) -> Result<(Var, Var)> {
    let logits = fc(g, p, &format!("causal{layer}.gate"), y)?;
    let gates = g.softmax(logits)?;
    let mut out = y;
    for k in 0..cfg.contexts {
        let phi = mlp(g, p, &format!("causal{layer}.expert{k}"), y)?;
        let weighted = g.mul_gate(phi, gates, k)?;
        out = g.add(out, weighted)?;
    }
    Ok((out, gates))
}

/// All causal layers; returns the final state and every layer's gates.
pub fn causal_forward(g: &mut Graph, p: &ParamVars, cfg: &ModelConfig, y: Var) -> Result<(Var, Vec<Var>)> {
    let mut y = y;
    let mut gates = Vec::new();
    if cfg.use_causal {
        for u in 0..cfg.causal_layers {
            let (next, w) = causal_layer(g, p, cfg, u, y)?;
            y = next;
            gates.push(w);
        }
    }
    Ok((y, gates))
}

pub fn decode(g: &mut Graph, p: &ParamVars, y: Var) -> Result<Var> {
    mlp(g, p, "decode", y)
}
