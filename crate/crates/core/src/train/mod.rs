//! Masked-reconstruction training: mask sampling, the masked L1 objective,
//! Adam, evaluation metrics and the epoch loop.

mod adam;
mod eval;
mod looping;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use eval::{evaluate, evaluation_masks, metrics, BaselineSpec, Evaluation, Metrics, METRICS_HEADER};
pub use looping::{train_loop, EpochRecord, TrainReport};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Optimization and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    /// Drives parameter initialization, batch order and masks.
    pub seed: u64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    /// Training mask ratio is drawn from these per batch.
    pub mask_ratios: Vec<f64>,
    /// Mask ratio used for validation MAE.
    pub val_ratio: f64,
    /// Caps optimizer steps per epoch (a fresh random subset each epoch).
    pub batches_per_epoch: Option<usize>,
    /// Caps validation samples (evenly spaced through the split).
    pub val_samples: Option<usize>,
    /// Samples per forward graph; bounds memory, does not change results
    /// beyond floating-point summation order.
    pub micro_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-3,
            batch: 32,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 100,
            seed: 0,
            patience: 10,
            mask_ratios: vec![0.25, 0.5, 0.75],
            val_ratio: 0.5,
            batches_per_epoch: None,
            val_samples: None,
            micro_batch: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.batch == 0 || self.epochs == 0 || self.micro_batch == 0 {
            return bad("batch, epochs and micro_batch must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("beta1, beta2 must lie in [0, 1) and adam_eps must be > 0".into());
        }
        if self.mask_ratios.is_empty() {
            return bad("mask_ratios must not be empty".into());
        }
        for &r in self.mask_ratios.iter().chain([&self.val_ratio]) {
            if !(r > 0.0 && r < 1.0) {
                return bad(format!("mask ratio {r} outside (0, 1)"));
            }
        }
        if self.batches_per_epoch == Some(0) || self.val_samples == Some(0) {
            return bad("batches_per_epoch and val_samples must be >= 1 when set".into());
        }
        Ok(())
    }
}

/// Which nodes are hidden targets (`true`) in one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPattern {
    pub mask: Vec<bool>,
    pub ratio: f64,
}

impl MaskPattern {
    pub fn masked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Masks `round(n * ratio)` nodes chosen uniformly, keeping at least one
/// node on each side.
pub fn sample_mask<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<MaskPattern> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio {ratio} outside (0, 1)")));
    }
    if n < 2 {
        return Err(Error::Usage(format!("masking needs at least 2 nodes, got {n}")));
    }
    let k = ((n as f64 * ratio).round() as usize).clamp(1, n - 1);
    let mut mask = vec![false; n];
    for i in index::sample(rng, n, k) {
        mask[i] = true;
    }
    Ok(MaskPattern { mask, ratio })
}

/// Replaces masked rows of the feature matrix `x` (`[N, D]`) and of every
/// history step in `past` (`[N, T, D]`) with `token`.
pub fn mask_inputs(x: &Tensor, past: &Tensor, pattern: &MaskPattern, token: &[f64]) -> Result<(Tensor, Tensor)> {
    let n = pattern.mask.len();
    if pattern.masked() == 0 {
        return Err(Error::Usage("mask must hide at least one node".into()));
    }
    let d = token.len();
    if x.shape() != [n, d] || past.rank() != 3 || past.shape()[0] != n || past.shape()[2] != d {
        return Err(Error::Dimension(format!(
            "mask_inputs: features {:?}, history {:?}, token {d}, mask {n}",
            x.shape(),
            past.shape()
        )));
    }
    let replace = |t: &Tensor| {
        let mut out = t.clone();
        let per_node = t.numel() / n;
        for (row, _) in out.data_mut().chunks_mut(per_node).zip(&pattern.mask).filter(|(_, &m)| m) {
            for chunk in row.chunks_mut(d) {
                chunk.copy_from_slice(token);
            }
        }
        out
    };
    Ok((replace(x), replace(past)))
}

/// `(1 / N_u) Σ_{masked i} Σ_{d < continuous} |truth - pred|` for `[N, D]`
/// inputs.
pub fn masked_l1(truth: &Tensor, pred: &Tensor, pattern: &MaskPattern, continuous: usize) -> Result<f64> {
    let n = pattern.mask.len();
    if truth.shape() != pred.shape() || truth.rank() != 2 || truth.shape()[0] != n || continuous > truth.last_dim() {
        return Err(Error::shapes("masked_l1", truth.shape(), pred.shape()));
    }
    let nu = pattern.masked();
    if nu == 0 {
        return Err(Error::Usage("masked_l1 needs at least one masked node".into()));
    }
    let d = truth.last_dim();
    let mut sum = 0.0;
    for i in (0..n).filter(|&i| pattern.mask[i]) {
        for c in 0..continuous {
            sum += (truth.data()[i * d + c] - pred.data()[i * d + c]).abs();
        }
    }
    Ok(sum / nu as f64)
}

/// Graph version of [`masked_l1`] over a `[B, N, D]` output, averaged over
/// the `B` samples. `truth` is `[B, N, C]` with `C <= D` continuous columns;
/// `masks` is `[B, N]`.
pub fn masked_l1_graph(g: &mut Graph, output: Var, truth: &Tensor, masks: &[bool]) -> Result<Var> {
    let shape = g.value(output).shape().to_vec();
    let (b, n, c) = match truth.shape() {
        [b, n, c] => (*b, *n, *c),
        s => return Err(Error::Dimension(format!("loss targets must be [B, N, C], got {s:?}"))),
    };
    if shape.len() != 3 || shape[..2] != [b, n] || shape[2] < c || masks.len() != b * n {
        return Err(Error::shapes("masked loss", &shape, truth.shape()));
    }
    let d = shape[2];
    let mut target = vec![0.0; b * n * d];
    let mut weight = vec![0.0; b * n * d];
    for s in 0..b {
        let nu = masks[s * n..(s + 1) * n].iter().filter(|&&m| m).count();
        if nu == 0 {
            return Err(Error::Usage(format!("sample {s} has no masked nodes")));
        }
        let w = 1.0 / (nu * b) as f64;
        for i in (0..n).filter(|&i| masks[s * n + i]) {
            let row = (s * n + i) * d;
            target[row..row + c].copy_from_slice(&truth.data()[(s * n + i) * c..][..c]);
            weight[row..row + c].fill(w);
        }
    }
    let t = g.constant(Tensor::new(&shape, target)?);
    let w = g.constant(Tensor::new(&shape, weight)?);
    let diff = g.sub(output, t)?;
    let abs = g.abs(diff)?;
    let weighted = g.mul(abs, w)?;
    g.sum(weighted)
}
