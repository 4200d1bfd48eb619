//! Scaling benchmarks for the spatial kernels on constant-density layouts.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::ChannelStats;
use crate::error::{Error, Result};
use crate::geo::{GeoPoint, Station, StationSet};
use crate::model::{layers, AirRadar, ModelConfig, ParamVars};
use crate::numerics::{Graph, Tensor, Var};

/// Area per station; the layout box grows with `N` so neighbour counts stay
/// flat.
pub const KM2_PER_STATION: f64 = 3400.0;
const KM_PER_DEG: f64 = 111.195;
const CENTER: (f64, f64) = (32.0, 115.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    /// Dartboard region attention.
    Local,
    /// Full all-pairs attention over every station.
    Dense,
    /// FFT mixing with block-diagonal spectral weights.
    Spectral,
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(Kernel::Local),
            "dense" => Ok(Kernel::Dense),
            "spectral" => Ok(Kernel::Spectral),
            _ => Err(Error::Usage(format!("unknown kernel {s:?} (local, dense, spectral)"))),
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kernel::Local => "local",
            Kernel::Dense => "dense",
            Kernel::Spectral => "spectral",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    /// Timed runs per size after one warm-up; the fastest is kept.
    pub repeats: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: vec![256, 512, 1024, 2048],
            repeats: 10,
            hidden: 32,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub kernel: Kernel,
    /// `(N, seconds)` per size.
    pub timings: Vec<(usize, f64)>,
    /// Least-squares slope of log time against log N.
    pub exponent: f64,
}

impl BenchResult {
    pub fn csv(&self) -> String {
        let mut s = String::from("kernel,n,seconds\n");
        for (n, t) in &self.timings {
            s.push_str(&format!("{},{n},{t}\n", self.kernel));
        }
        s
    }
}

/// `n` stations uniform in a square of side `sqrt(n * KM2_PER_STATION)` km.
pub fn constant_density_layout(n: usize, seed: u64) -> Result<StationSet> {
    let side = (n as f64 * KM2_PER_STATION).sqrt();
    let dlat = side / KM_PER_DEG;
    let dlon = side / (KM_PER_DEG * CENTER.0.to_radians().cos());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stations = (0..n)
        .map(|i| {
            let lat = CENTER.0 + dlat * (rng.random::<f64>() - 0.5);
            let lon = CENTER.1 + dlon * (rng.random::<f64>() - 0.5);
            Ok(Station {
                id: format!("B{i:05}"),
                location: GeoPoint::new(lat, lon)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    StationSet::new(stations)
}

/// Slope of the least-squares line through `(ln n, ln t)`.
pub fn fit_exponent(points: &[(usize, f64)]) -> Result<f64> {
    if points.len() < 2 || points.iter().any(|&(n, t)| n == 0 || !(t > 0.0)) {
        return Err(Error::Usage("exponent fit needs two or more positive timings".into()));
    }
    let xs: Vec<f64> = points.iter().map(|&(n, _)| (n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, t)| t.ln()).collect();
    let k = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Usage("exponent fit needs at least two distinct sizes".into()));
    }
    Ok(sxy / sxx)
}

/// Times `kernel` at every size in `cfg` and fits the scaling exponent.
pub fn run_bench(kernel: Kernel, cfg: &BenchConfig) -> Result<BenchResult> {
    if cfg.repeats == 0 {
        return Err(Error::Config("repeats must be >= 1".into()));
    }
    let mut timings = Vec::with_capacity(cfg.sizes.len());
    for &n in &cfg.sizes {
        timings.push((n, time_kernel(kernel, n, cfg)?));
    }
    let exponent = fit_exponent(&timings)?;
    Ok(BenchResult {
        kernel,
        timings,
        exponent,
    })
}

/// Fastest of `cfg.repeats` forward passes of one kernel at size `n`.
pub fn time_kernel(kernel: Kernel, n: usize, cfg: &BenchConfig) -> Result<f64> {
    if n < 2 {
        return Err(Error::Usage(format!("bench size must be >= 2, got {n}")));
    }
    let config = ModelConfig {
        hidden: cfg.hidden,
        blocks: 1,
        ..ModelConfig::default()
    };
    let stations = constant_density_layout(n, cfg.seed)?;
    let channels = vec![ChannelStats {
        name: "pm25".into(),
        mean: 0.0,
        std: 1.0,
    }];
    let model = AirRadar::new(config.clone(), stations, channels, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ n as u64);
    let width = config.width();
    let z = Tensor::from_fn(&[1, n, width], |_| rng.sample(StandardNormal));

    let run = || -> Result<()> {
        let mut g = Graph::new();
        let p = model.params().bind(&mut g);
        let x = g.constant(z.clone());
        match kernel {
            Kernel::Local => {
                layers::local_delta(&mut g, &p, &config, model.projection(), None, 0, x)?;
            }
            Kernel::Spectral => {
                layers::spectral_delta(&mut g, &p, &config, 0, x)?;
            }
            Kernel::Dense => {
                dense_attention(&mut g, &p, &config, x)?;
            }
        }
        Ok(())
    };
    run()?;
    let mut best = f64::INFINITY;
    for _ in 0..cfg.repeats {
        let start = Instant::now();
        run()?;
        best = best.min(start.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// All-pairs multi-head attention with the local branch's projections.
fn dense_attention(
    g: &mut Graph,
    p: &ParamVars,
    cfg: &ModelConfig,
    x: Var,
) -> Result<Var> {
    let proj = |g: &mut Graph, name: &str| -> Result<Var> {
        let w = p.get(&format!("block0.local.{name}.w"))?;
        let b = p.get(&format!("block0.local.{name}.b"))?;
        g.linear(x, w, b)
    };
    let (q, k, v) = (proj(g, "q")?, proj(g, "k")?, proj(g, "v")?);
    let (heads, dh) = (cfg.heads(), cfg.head_dim());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut head = |t: Var| -> Result<Tensor> {
            let s = g.slice_last(t, h * dh, (h + 1) * dh)?;
            Ok(g.value(s).clone())
        };
        let (qh, kh, vh) = (head(q)?, head(k)?, head(v)?);
        let scores = qh.matmul(&kh.transpose_last2()?)?.map(|s| s / (dh as f64).sqrt());
        outs.push(g.constant(scores.softmax_lastdim()?.matmul(&vh)?));
    }
    g.concat_last(&outs)
}
