use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, CONTINUOUS_CHANNELS};
use crate::error::{Error, Result};
use crate::geo::{distance_km, initial_bearing_deg, GeoPoint, Station, StationSet, WIND_CODES};

/// Parameters of the synthetic pollution field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub stations: usize,
    /// Hourly snapshots.
    pub steps: usize,
    pub lat_range: [f64; 2],
    pub lon_range: [f64; 2],
    pub plumes: usize,
    /// Peak plume concentration range.
    pub plume_amplitude: [f64; 2],
    /// Plume spread along and across the wind, km.
    pub plume_sigma_km: [f64; 2],
    /// How far downwind of its source a plume centre sits, km.
    pub plume_drift_km: f64,
    /// Hours for the prevailing wind to turn through a full circle.
    pub wind_period: f64,
    /// Largest local deviation from the prevailing wind, degrees.
    pub wind_swirl_deg: f64,
    /// Context regions (Voronoi cells with their own baseline).
    pub regions: usize,
    /// Baseline per region; cycled if shorter than `regions`.
    pub region_baselines: Vec<f64>,
    pub noise_sd: f64,
    /// AR(1) coefficient of the station noise.
    pub noise_ar: f64,
    /// Required; there is no implicit seed.
    pub seed: Option<u64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            stations: 256,
            steps: 2000,
            lat_range: [28.0, 36.0],
            lon_range: [110.0, 120.0],
            plumes: 8,
            plume_amplitude: [40.0, 120.0],
            plume_sigma_km: [90.0, 35.0],
            plume_drift_km: 60.0,
            wind_period: 240.0,
            wind_swirl_deg: 30.0,
            regions: 4,
            region_baselines: vec![20.0, 60.0, 35.0, 90.0],
            noise_sd: 3.0,
            noise_ar: 0.8,
            seed: None,
        }
    }
}

impl SynthConfig {
    pub fn with_seed(seed: u64) -> Self {
        SynthConfig {
            seed: Some(seed),
            ..Default::default()
        }
    }

    /// Parses a TOML document; missing keys keep their defaults.
    pub fn from_toml_str(text: &str) -> Result<SynthConfig> {
        toml::from_str(text).map_err(|e| Error::Config(format!("synthetic config: {}", e.message())))
    }

    pub fn validate(&self) -> Result<u64> {
        let seed = self
            .seed
            .ok_or_else(|| Error::Config("synthetic data needs an explicit seed".into()))?;
        let bad = |what: &str| Err(Error::Config(format!("synthetic config: {what}")));
        if self.stations < 2 || self.steps == 0 || self.regions == 0 {
            return bad("stations >= 2, steps >= 1 and regions >= 1 are required");
        }
        if self.region_baselines.is_empty() {
            return bad("region_baselines must not be empty");
        }
        let boxed = |r: [f64; 2], lim: f64| r[0] < r[1] && r[0] >= -lim && r[1] <= lim;
        if !boxed(self.lat_range, 90.0) || !boxed(self.lon_range, 180.0) {
            return bad("lat/lon ranges must be increasing and within bounds");
        }
        let positive = [
            self.plume_sigma_km[0],
            self.plume_sigma_km[1],
            self.wind_period,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return bad("plume spreads and wind period must be positive");
        }
        if !(self.plume_amplitude[0] >= 0.0 && self.plume_amplitude[0] <= self.plume_amplitude[1]) {
            return bad("plume amplitude range must be nonnegative and ordered");
        }
        if !(self.noise_sd >= 0.0) || !(0.0..1.0).contains(&self.noise_ar) {
            return bad("noise_sd must be >= 0 and noise_ar in [0, 1)");
        }
        Ok(seed)
    }
}

/// Index along a Hilbert curve on a `2^16` grid.
fn hilbert_index(x: u32, y: u32) -> u64 {
    let (mut x, mut y) = (x as u64, y as u64);
    let n: u64 = 1 << 16;
    let mut d = 0;
    let mut s = n / 2;
    while s > 0 {
        let rx = u64::from(x & s > 0);
        let ry = u64::from(y & s > 0);
        d += s * s * ((3 * rx) ^ ry);
        if ry == 0 {
            if rx == 1 {
                x = n - 1 - x;
                y = n - 1 - y;
            }
            std::mem::swap(&mut x, &mut y);
        }
        s /= 2;
    }
    d
}

struct Plume {
    source: GeoPoint,
    amplitude: f64,
    phase: f64,
}

/// Point `km` away from `p` along `bearing_deg` (flat approximation, fine at
/// plume scales).
fn offset(p: GeoPoint, bearing_deg: f64, km: f64) -> GeoPoint {
    let b = bearing_deg.to_radians();
    let dlat = km * b.cos() / 111.195;
    let dlon = km * b.sin() / (111.195 * p.lat.to_radians().cos());
    GeoPoint {
        lat: p.lat + dlat,
        lon: p.lon + dlon,
    }
}

fn weather_code(humidity: f64) -> u8 {
    match humidity {
        h if h < 40.0 => 0,
        h if h < 55.0 => 1,
        h if h < 70.0 => 2,
        h if h < 85.0 => 3,
        _ => 4,
    }
}

/// Builds a seeded synthetic dataset: drifting anisotropic plumes, region
/// baselines and AR(1) station noise for PM2.5, smooth temperature and
/// humidity fields, and categorical weather and wind codes.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    let seed = cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [lat0, lat1] = cfg.lat_range;
    let [lon0, lon1] = cfg.lon_range;

    let mut points: Vec<(u64, GeoPoint)> = (0..cfg.stations)
        .map(|_| {
            let lat = rng.random_range(lat0..lat1);
            let lon = rng.random_range(lon0..lon1);
            let gx = ((lon - lon0) / (lon1 - lon0) * 65535.0) as u32;
            let gy = ((lat - lat0) / (lat1 - lat0) * 65535.0) as u32;
            (hilbert_index(gx, gy), GeoPoint { lat, lon })
        })
        .collect();
    points.sort_by_key(|p| p.0);
    let stations = StationSet::new(
        points
            .iter()
            .enumerate()
            .map(|(i, p)| Station {
                id: format!("S{i:04}"),
                location: p.1,
            })
            .collect(),
    )?;
    let locs = stations.locations();
    let n = locs.len();

    let seeds: Vec<GeoPoint> = (0..cfg.regions)
        .map(|_| GeoPoint {
            lat: rng.random_range(lat0..lat1),
            lon: rng.random_range(lon0..lon1),
        })
        .collect();
    let region: Vec<usize> = locs
        .iter()
        .map(|&p| {
            (0..seeds.len())
                .min_by(|&a, &b| distance_km(p, seeds[a]).total_cmp(&distance_km(p, seeds[b])))
                .unwrap()
        })
        .collect();
    let baseline: Vec<f64> = region
        .iter()
        .map(|&r| cfg.region_baselines[r % cfg.region_baselines.len()])
        .collect();

    let plumes: Vec<Plume> = (0..cfg.plumes)
        .map(|_| Plume {
            source: GeoPoint {
                lat: rng.random_range(lat0..lat1),
                lon: rng.random_range(lon0..lon1),
            },
            amplitude: rng.random_range(cfg.plume_amplitude[0]..=cfg.plume_amplitude[1]),
            phase: rng.random_range(0.0..2.0 * PI),
        })
        .collect();

    // Fixed spatial texture for the wind swirl and the weather fields.
    let waves: Vec<[f64; 3]> = (0..3)
        .map(|_| {
            [
                rng.random_range(0.2..0.6),
                rng.random_range(0.2..0.6),
                rng.random_range(0.0..2.0 * PI),
            ]
        })
        .collect();
    let wave = |k: usize, p: GeoPoint| {
        let [a, b, ph] = waves[k];
        (a * p.lat + b * p.lon + ph).sin()
    };
    let wind_phase = rng.random_range(0.0..360.0);
    let noise = Normal::new(0.0, cfg.noise_sd.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let innovation = (1.0 - cfg.noise_ar * cfg.noise_ar).sqrt();
    let mut ar = vec![0.0; n];
    if cfg.noise_sd > 0.0 {
        for v in ar.iter_mut() {
            *v = noise.sample(&mut rng);
        }
    }

    let c = CONTINUOUS_CHANNELS.len();
    let mut values = Vec::with_capacity(cfg.steps * n * c);
    let mut weather = Vec::with_capacity(cfg.steps * n);
    let mut wind = Vec::with_capacity(cfg.steps * n);
    let [sigma_along, sigma_across] = cfg.plume_sigma_km;
    for t in 0..cfg.steps {
        let hour = t as f64;
        let diurnal = (2.0 * PI * hour / 24.0).sin();
        // Direction the air moves toward.
        let prevailing = wind_phase + 360.0 * hour / cfg.wind_period;
        let centres: Vec<(GeoPoint, f64)> = plumes
            .iter()
            .map(|p| {
                let strength = p.amplitude * (1.0 + 0.5 * (2.0 * PI * hour / 24.0 + p.phase).sin());
                (offset(p.source, prevailing, cfg.plume_drift_km), strength)
            })
            .collect();
        for (i, &loc) in locs.iter().enumerate() {
            let mut pm = baseline[i];
            for &(centre, strength) in &centres {
                let d = distance_km(centre, loc);
                if d > 6.0 * sigma_along {
                    continue;
                }
                let theta = (initial_bearing_deg(centre, loc) - prevailing).to_radians();
                let (along, across) = (d * theta.cos(), d * theta.sin());
                pm += strength
                    * (-0.5 * (along / sigma_along).powi(2) - 0.5 * (across / sigma_across).powi(2)).exp();
            }
            if cfg.noise_sd > 0.0 {
                ar[i] = cfg.noise_ar * ar[i] + innovation * noise.sample(&mut rng);
            }
            pm += ar[i];

            let temp = 16.0 - 0.9 * (loc.lat - 32.0) + 6.0 * diurnal + 3.0 * wave(0, loc);
            let humidity = (62.0 + 18.0 * wave(1, loc) - 8.0 * diurnal + 6.0 * (hour / 97.0).sin()).clamp(5.0, 100.0);
            values.extend([pm.max(0.0), temp, humidity]);
            weather.push(weather_code(humidity));

            let toward = prevailing + cfg.wind_swirl_deg * wave(2, loc);
            let from = (toward + 180.0).rem_euclid(360.0);
            wind.push(((from / 45.0).round() as usize % WIND_CODES) as u8);
        }
    }

    Ok(Dataset {
        stations,
        timestamps: (0..cfg.steps as i64).collect(),
        iso_time: false,
        channels: CONTINUOUS_CHANNELS.iter().map(|s| s.to_string()).collect(),
        values,
        weather,
        wind,
        imputed: 0,
    })
}
