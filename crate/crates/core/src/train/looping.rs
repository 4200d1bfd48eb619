use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{evaluate, masked_l1_graph, sample_mask, Adam, TrainConfig};
use crate::data::PreparedData;
use crate::error::{Error, Result};
use crate::model::AirRadar;
use crate::numerics::{Graph, Tensor};

/// Offset mixed into the run seed for the fixed validation masks.
const VAL_SEED_SALT: u64 = 0x5eed_0a11;

/// One training-log line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_mae: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
}

/// Validation sample times, evenly thinned to at most `cap`.
pub(crate) fn thin(range: std::ops::Range<usize>, cap: Option<usize>) -> Vec<usize> {
    let all: Vec<usize> = range.collect();
    match cap {
        Some(c) if c < all.len() => (0..c).map(|i| all[i * all.len() / c]).collect(),
        _ => all,
    }
}

/// Trains `model` in place on the training split and leaves it holding the
/// parameters with the best validation MAE.
///
/// Every epoch appends one JSON line to `log`. When `checkpoint` is given the
/// best model is written there whenever validation improves. A non-finite
/// loss or gradient aborts the run; the model is restored to its best state
/// first and the checkpoint on disk is left as it was.
pub fn train_loop(
    model: &mut AirRadar,
    data: &PreparedData,
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let seed = cfg.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = data.nodes();
    let val_times = thin(data.splits().val.clone(), cfg.val_samples);
    let val_seed = seed ^ VAL_SEED_SALT;
    let mut train_times: Vec<usize> = data.splits().train.clone().collect();
    let mut opt = Adam::new(model.params().tensors(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let names = model.params().names().to_vec();

    let mut best_params = model.params().clone();
    let mut best = (0, f64::INFINITY);
    let mut records = Vec::new();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        train_times.shuffle(&mut rng);
        let mut batches: Vec<&[usize]> = train_times.chunks(cfg.batch).collect();
        if let Some(cap) = cfg.batches_per_epoch {
            batches.truncate(cap);
        }
        let mut loss_sum = 0.0;
        for times in &batches {
            let ratio = cfg.mask_ratios[rng.random_range(0..cfg.mask_ratios.len())];
            let masks = times
                .iter()
                .map(|_| sample_mask(n, ratio, &mut rng).map(|m| m.mask))
                .collect::<Result<Vec<_>>>()?;
            let step = batch_gradients(model, data, times, &masks, cfg.micro_batch);
            let (loss, grads) = match step {
                Ok(v) if v.0.is_finite() => v,
                Ok((loss, _)) => return abort(model, best_params, format!("training loss became {loss} in epoch {epoch}")),
                Err(e) => return abort(model, best_params, e.to_string()),
            };
            if let Err(e) = opt.step(model.params_mut().tensors_mut(), &grads, &names) {
                return abort(model, best_params, e.to_string());
            }
            loss_sum += loss;
        }
        let loss = loss_sum / batches.len() as f64;
        let val_mae = evaluate(Some(model), data, &val_times, cfg.val_ratio, val_seed, None)?.rows[0].1.mae;
        let record = EpochRecord {
            epoch,
            loss,
            val_mae,
            seconds: start.elapsed().as_secs_f64(),
        };
        info!("epoch {epoch}: loss {loss:.5}, val MAE {val_mae:.4}, {:.1}s", record.seconds);
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&record).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io("writing training log", e))?;
        }
        records.push(record);
        if val_mae < best.1 {
            best = (epoch, val_mae);
            best_params = model.params().clone();
            if let Some(path) = checkpoint {
                model.save(path)?;
            }
        } else if cfg.patience > 0 && epoch - best.0 >= cfg.patience {
            info!("no validation improvement for {} epochs; stopping", cfg.patience);
            break;
        }
    }
    *model.params_mut() = best_params;
    Ok(TrainReport {
        epochs: records,
        best_epoch: best.0,
        best_val_mae: best.1,
    })
}

fn abort(model: &mut AirRadar, best: crate::model::ParamStore, message: String) -> Result<TrainReport> {
    *model.params_mut() = best;
    Err(Error::Numeric(format!("training diverged: {message}")))
}

/// Loss and parameter gradients of one batch, accumulated over micro-batches
/// so each graph holds at most `micro` samples.
fn batch_gradients(
    model: &AirRadar,
    data: &PreparedData,
    times: &[usize],
    masks: &[Vec<bool>],
    micro: usize,
) -> Result<(f64, Vec<Tensor>)> {
    let mut grads: Vec<Tensor> = model.params().tensors().iter().map(Tensor::zeros_like).collect();
    let mut loss = 0.0;
    for (t, m) in times.chunks(micro).zip(masks.chunks(micro)) {
        let batch = data.batch(t, m)?;
        let mut g = Graph::new();
        let p = model.params().bind(&mut g);
        let trace = model.forward(&mut g, &p, &batch)?;
        let part = masked_l1_graph(&mut g, trace.output, &batch.current, &batch.mask)?;
        let part = g.scale(part, t.len() as f64 / times.len() as f64);
        loss += g.value(part).item();
        let mut back = g.backward(part)?;
        for (acc, &v) in grads.iter_mut().zip(p.vars()) {
            if let Some(d) = back.take(v) {
                acc.add_assign(&d);
            }
        }
    }
    Ok((loss, grads))
}
