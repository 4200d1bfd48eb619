use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sample_mask, MaskPattern};
use crate::baselines::{idw_infer, knn_infer};
use crate::data::PreparedData;
use crate::error::{Error, Result};
use crate::geo::GeoPoint;
use crate::model::AirRadar;

/// Samples per forward graph during evaluation.
const EVAL_CHUNK: usize = 8;

/// Pollutant error summary in raw units. `mape` is a fraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    /// Number of (sample, node) pairs scored.
    pub count: usize,
}

/// MAE, RMSE and MAPE of `pred` against `truth`. MAPE skips truths below
/// 1.0 and is 0 when none remain.
pub fn metrics(pred: &[f64], truth: &[f64]) -> Result<Metrics> {
    let mut acc = Accumulator::default();
    acc.extend(pred, truth)?;
    acc.finish()
}

#[derive(Debug, Default)]
struct Accumulator {
    abs: f64,
    sq: f64,
    pct: f64,
    count: usize,
    pct_count: usize,
}

impl Accumulator {
    fn extend(&mut self, pred: &[f64], truth: &[f64]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Dimension(format!(
                "{} predictions for {} targets",
                pred.len(),
                truth.len()
            )));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if !p.is_finite() {
                return Err(Error::Numeric("non-finite prediction".into()));
            }
            let e = (p - t).abs();
            self.abs += e;
            self.sq += e * e;
            self.count += 1;
            if t >= 1.0 {
                self.pct += e / t;
                self.pct_count += 1;
            }
        }
        Ok(())
    }

    fn finish(&self) -> Result<Metrics> {
        if self.count == 0 {
            return Err(Error::Usage("nothing to evaluate".into()));
        }
        let n = self.count as f64;
        Ok(Metrics {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            mape: if self.pct_count == 0 {
                0.0
            } else {
                self.pct / self.pct_count as f64
            },
            count: self.count,
        })
    }
}

/// Reference interpolators to score on the same masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineSpec {
    pub knn_k: usize,
    pub idw_power: f64,
}

impl Default for BaselineSpec {
    fn default() -> Self {
        BaselineSpec {
            knn_k: 5,
            idw_power: 2.0,
        }
    }
}

/// Scores for one mask ratio, model first when present.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub ratio: f64,
    pub rows: Vec<(String, Metrics)>,
}

impl Evaluation {
    pub fn get(&self, name: &str) -> Option<&Metrics> {
        self.rows.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// `model,ratio,mae,rmse,mape` rows without a header.
    pub fn csv_rows(&self) -> String {
        self.rows
            .iter()
            .map(|(name, m)| format!("{name},{},{},{},{}\n", self.ratio, m.mae, m.rmse, m.mape))
            .collect()
    }
}

pub const METRICS_HEADER: &str = "model,ratio,mae,rmse,mape";

/// One seeded mask per sample; identical arguments give identical masks.
pub fn evaluation_masks(nodes: usize, samples: usize, ratio: f64, seed: u64) -> Result<Vec<MaskPattern>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples).map(|_| sample_mask(nodes, ratio, &mut rng)).collect()
}

/// Scores the model (when given) and the baselines (when given) at sample
/// times `times` with masks from [`evaluation_masks`]. Only masked nodes are
/// scored, on the pollutant channel in raw units.
pub fn evaluate(
    model: Option<&AirRadar>,
    data: &PreparedData,
    times: &[usize],
    ratio: f64,
    seed: u64,
    baselines: Option<BaselineSpec>,
) -> Result<Evaluation> {
    if times.is_empty() {
        return Err(Error::Usage("evaluation set is empty".into()));
    }
    let n = data.nodes();
    let masks = evaluation_masks(n, times.len(), ratio, seed)?;
    let mut rows = Vec::new();
    if let Some(model) = model {
        check_compatible(model, data)?;
        let stats = &data.stats()[0];
        let mut acc = Accumulator::default();
        for (chunk_t, chunk_m) in times.chunks(EVAL_CHUNK).zip(masks.chunks(EVAL_CHUNK)) {
            let mvec: Vec<Vec<bool>> = chunk_m.iter().map(|m| m.mask.clone()).collect();
            let out = model.predict(&data.batch(chunk_t, &mvec)?)?;
            let d = out.last_dim();
            for (s, (&t, m)) in chunk_t.iter().zip(chunk_m).enumerate() {
                let (pred, truth): (Vec<f64>, Vec<f64>) = (0..n)
                    .filter(|&i| m.mask[i])
                    .map(|i| (stats.denormalize(out.data()[(s * n + i) * d]), data.target(t, i)))
                    .unzip();
                acc.extend(&pred, &truth)?;
            }
        }
        rows.push(("airradar".to_string(), acc.finish()?));
    }
    if let Some(spec) = baselines {
        let points: Vec<GeoPoint> = data.dataset().stations.locations();
        let (mut knn, mut idw) = (Accumulator::default(), Accumulator::default());
        for (&t, m) in times.iter().zip(&masks) {
            let values = data.target_at(t);
            let (mut obs, mut vals, mut tgt, mut truth) = (vec![], vec![], vec![], vec![]);
            for i in 0..n {
                if m.mask[i] {
                    tgt.push(points[i]);
                    truth.push(values[i]);
                } else {
                    obs.push(points[i]);
                    vals.push(values[i]);
                }
            }
            knn.extend(&knn_infer(&obs, &vals, &tgt, spec.knn_k)?, &truth)?;
            idw.extend(&idw_infer(&obs, &vals, &tgt, spec.idw_power)?, &truth)?;
        }
        rows.push((format!("knn{}", spec.knn_k), knn.finish()?));
        rows.push((format!("idw{}", spec.idw_power), idw.finish()?));
    }
    Ok(Evaluation { ratio, rows })
}

fn check_compatible(model: &AirRadar, data: &PreparedData) -> Result<()> {
    model.check_stations(&data.dataset().stations)?;
    let names = |s: &[crate::data::ChannelStats]| s.iter().map(|c| c.name.clone()).collect::<Vec<_>>();
    if names(model.channels()) != names(data.stats()) {
        return Err(Error::Validation(format!(
            "model channels {:?} differ from data channels {:?}",
            names(model.channels()),
            names(data.stats())
        )));
    }
    if data.history() != model.config().history {
        return Err(Error::Validation(format!(
            "model history {} differs from data history {}",
            model.config().history,
            data.history()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_metrics() {
        let m = metrics(&[1.0, 2.0], &[2.0, 4.0]).unwrap();
        assert!((m.mae - 1.5).abs() < 1e-15);
        assert!((m.rmse - 2.5f64.sqrt()).abs() < 1e-15);
        assert!((m.mape - 0.5).abs() < 1e-15);
        let m = metrics(&[3.0, 0.5], &[3.0, 0.5]).unwrap();
        assert_eq!((m.mae, m.rmse, m.mape), (0.0, 0.0, 0.0));
    }

    #[test]
    fn mape_skips_small_truths() {
        let m = metrics(&[1.0, 2.0], &[0.5, 4.0]).unwrap();
        assert!((m.mape - 0.5).abs() < 1e-15);
        assert!(metrics(&[], &[]).is_err());
    }

    #[test]
    fn masks_depend_only_on_the_seed() {
        let a = evaluation_masks(30, 5, 0.5, 3).unwrap();
        assert_eq!(a, evaluation_masks(30, 5, 0.5, 3).unwrap());
        assert_ne!(a, evaluation_masks(30, 5, 0.5, 4).unwrap());
    }
}
