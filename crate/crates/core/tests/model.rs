use std::f64::consts::PI;
use std::sync::Arc;

use airradar::data::ChannelStats;
use airradar::geo::{GeoPoint, Orientation, Station, StationSet};
use airradar::model::{layers, AirRadar, ModelConfig, ParamVars, SnapshotBatch};
use airradar::numerics::{grad_check, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Rows = Vec<Vec<f64>>;

fn channels(n: usize) -> Vec<ChannelStats> {
    (0..n)
        .map(|i| ChannelStats {
            name: format!("c{i}"),
            mean: 0.0,
            std: 1.0,
        })
        .collect()
}

fn stations_near(n: usize, spread_deg: f64, seed: u64) -> StationSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    StationSet::new(
        (0..n)
            .map(|i| Station {
                id: format!("s{i}"),
                location: GeoPoint::new(
                    30.0 + rng.random_range(-spread_deg..spread_deg),
                    115.0 + rng.random_range(-spread_deg..spread_deg),
                )
                .unwrap(),
            })
            .collect(),
    )
    .unwrap()
}

fn small_config() -> ModelConfig {
    ModelConfig {
        hidden: 4,
        blocks: 1,
        history: 3,
        contexts: 3,
        causal_layers: 1,
        ..Default::default()
    }
}

fn randomize(model: &mut AirRadar, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

fn set(model: &mut AirRadar, name: &str, f: impl Fn(usize) -> f64) {
    let t = model.params_mut().get_mut(name).unwrap_or_else(|| panic!("{name}"));
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

fn random_batch(n: usize, dc: usize, t: usize, mask: Vec<bool>, seed: u64) -> SnapshotBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SnapshotBatch {
        current: Tensor::from_fn(&[1, n, dc], |_| rng.random_range(-1.0..1.0)),
        weather: (0..n).map(|_| rng.random_range(0..5)).collect(),
        wind: (0..n).map(|_| rng.random_range(0..8)).collect(),
        past: Tensor::from_fn(&[1, n, t, dc], |_| rng.random_range(-1.0..1.0)),
        past_weather: (0..n * t).map(|_| rng.random_range(0..5)).collect(),
        past_wind: (0..n * t).map(|_| rng.random_range(0..8)).collect(),
        mask,
    }
}

fn rows_of(t: &Tensor) -> Rows {
    t.data().chunks(t.last_dim()).map(<[f64]>::to_vec).collect()
}

fn to_tensor(rows: &Rows) -> Tensor {
    let c = rows[0].len();
    Tensor::new(&[1, rows.len(), c], rows.concat()).unwrap()
}

fn max_diff(a: &Rows, b: &Rows) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Runs one stage on `[1, N, C]` input with the model's parameters.
fn stage(model: &AirRadar, z: &Rows, f: impl Fn(&mut Graph, &ParamVars, Var) -> Var) -> Rows {
    let mut g = Graph::new();
    let p = model.params().bind(&mut g);
    let zv = g.constant(to_tensor(z));
    let out = f(&mut g, &p, zv);
    rows_of(g.value(out))
}

fn random_rows(n: usize, c: usize, seed: u64) -> Rows {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

// ---- loop oracles ----

fn p<'a>(model: &'a AirRadar, name: &str) -> &'a [f64] {
    model.params().get(name).unwrap_or_else(|| panic!("{name}")).data()
}

fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    (0..out)
        .map(|j| b[j] + (0..x.len()).map(|i| x[i] * w[i * out + j]).sum::<f64>())
        .collect()
}

fn gelu(a: f64) -> f64 {
    0.5 * a * (1.0 + ((2.0 / PI).sqrt() * (a + 0.044715 * a.powi(3))).tanh())
}

fn mlp(model: &AirRadar, pre: &str, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = affine(x, p(model, &format!("{pre}.fc1.w")), p(model, &format!("{pre}.fc1.b")))
        .into_iter()
        .map(gelu)
        .collect();
    affine(&h, p(model, &format!("{pre}.fc2.w")), p(model, &format!("{pre}.fc2.b")))
}

fn layer_norm(model: &AirRadar, pre: &str, x: &[f64]) -> Vec<f64> {
    let c = x.len() as f64;
    let mu = x.iter().sum::<f64>() / c;
    let var = x.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / c;
    let (gm, bt) = (p(model, &format!("{pre}.gamma")), p(model, &format!("{pre}.beta")));
    x.iter()
        .enumerate()
        .map(|(j, a)| (a - mu) / (var + 1e-5).sqrt() * gm[j] + bt[j])
        .collect()
}

fn softmax(s: &[f64]) -> Vec<f64> {
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Dartboard membership from first principles: ring by great-circle distance,
/// sector by initial bearing relative to north.
fn oracle_regions(stations: &StationSet, i: usize, radius: f64, fractions: &[f64], sectors: usize) -> Vec<Vec<usize>> {
    let r_earth = 6371.0088;
    let a = stations.get(i).location;
    let mut out = vec![Vec::new(); fractions.len() * sectors];
    for j in 0..stations.len() {
        if j == i {
            continue;
        }
        let b = stations.get(j).location;
        let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
        let dl = (b.lon - a.lon).to_radians();
        let h = ((p2 - p1) / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
        let d = 2.0 * r_earth * h.sqrt().asin();
        let Some(ring) = fractions.iter().position(|f| d < f * radius) else {
            continue;
        };
        let y = dl.sin() * p2.cos();
        let x = p1.cos() * p2.sin() - p1.sin() * p2.cos() * dl.cos();
        let bearing = y.atan2(x).to_degrees().rem_euclid(360.0);
        let width = 360.0 / sectors as f64;
        let sector = ((bearing + width / 2.0).rem_euclid(360.0) / width).floor() as usize % sectors;
        out[ring * sectors + sector].push(j);
    }
    out
}

fn local_oracle(model: &AirRadar, block: usize, zn: &Rows) -> Rows {
    let cfg = model.config();
    let pre = format!("block{block}.local");
    let map = |m: &str, x: &[f64]| affine(x, p(model, &format!("{pre}.{m}.w")), p(model, &format!("{pre}.{m}.b")));
    let q: Rows = zn.iter().map(|x| map("q", x)).collect();
    let k: Rows = zn.iter().map(|x| map("k", x)).collect();
    let v: Rows = zn.iter().map(|x| map("v", x)).collect();
    let dh = cfg.head_dim();
    let g = cfg.regions();
    (0..zn.len())
        .map(|i| {
            let mut cat = Vec::new();
            for (h, &radius) in cfg.radii_km.iter().enumerate() {
                let regions = oracle_regions(model.stations(), i, radius, &cfg.ring_fractions, cfg.sectors);
                let bias = p(model, &format!("{pre}.bias{h}"));
                let cols = h * dh..(h + 1) * dh;
                let mut scores = Vec::new();
                let mut vals = Vec::new();
                for (r, members) in regions.iter().enumerate() {
                    let mut kr = vec![0.0; dh];
                    let mut vr = vec![0.0; dh];
                    for &j in members {
                        for (c, col) in cols.clone().enumerate() {
                            kr[c] += k[j][col] / members.len() as f64;
                            vr[c] += v[j][col] / members.len() as f64;
                        }
                    }
                    let dot: f64 = cols.clone().enumerate().map(|(c, col)| q[i][col] * kr[c]).sum();
                    let empty = if members.is_empty() { -1e9 } else { 0.0 };
                    scores.push(cfg.alpha() * dot + bias[i * g + r] + empty);
                    vals.push(vr);
                }
                let a = softmax(&scores);
                cat.extend((0..dh).map(|c| (0..g).map(|r| a[r] * vals[r][c]).sum::<f64>()));
            }
            map("o", &cat)
        })
        .collect()
}

fn spectral_oracle(model: &AirRadar, block: usize, zn: &Rows) -> Rows {
    let cfg = model.config();
    let (n, c) = (zn.len(), zn[0].len());
    let kb = cfg.weight_blocks;
    let cb = c / kb;
    let w = p(model, &format!("block{block}.global.w"));
    let b = p(model, &format!("block{block}.global.b"));
    let cis = |t: f64| (t.cos(), t.sin());
    let mut spec = vec![vec![(0.0, 0.0); c]; n];
    for (f, row) in spec.iter_mut().enumerate() {
        for (m, z) in zn.iter().enumerate() {
            let (re, im) = cis(-2.0 * PI * (f * m) as f64 / n as f64);
            for ch in 0..c {
                row[ch].0 += z[ch] * re;
                row[ch].1 += z[ch] * im;
            }
        }
    }
    for row in spec.iter_mut() {
        let x = row.clone();
        for blk in 0..kb {
            for j in 0..cb {
                let e = blk * cb + j;
                let (mut re, mut im) = (b[2 * e], b[2 * e + 1]);
                for i in 0..cb {
                    let wi = (blk * cb + j) * cb + i;
                    let (wr, wim) = (w[2 * wi], w[2 * wi + 1]);
                    let (xr, xi) = x[blk * cb + i];
                    re += wr * xr - wim * xi;
                    im += wr * xi + wim * xr;
                }
                let mag = (re * re + im * im).sqrt();
                let keep = if mag > cfg.lambda { (mag - cfg.lambda) / mag } else { 0.0 };
                row[e] = (re * keep, im * keep);
            }
        }
    }
    (0..n)
        .map(|m| {
            (0..c)
                .map(|ch| {
                    (0..n)
                        .map(|f| {
                            let (re, im) = cis(2.0 * PI * (f * m) as f64 / n as f64);
                            spec[f][ch].0 * re - spec[f][ch].1 * im
                        })
                        .sum::<f64>()
                        / n as f64
                })
                .collect()
        })
        .collect()
}

fn add_rows(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

// ---- embedding ----

#[test]
fn all_masked_nodes_embed_identically() {
    let cfg = small_config();
    let mut model = AirRadar::new(cfg.clone(), stations_near(5, 0.5, 1), channels(3), 7).unwrap();
    randomize(&mut model, 2, 0.5);
    let batch = random_batch(5, 3, 3, vec![true; 5], 3);
    let mut g = Graph::new();
    let p = model.params().bind(&mut g);
    let h = layers::embed(&mut g, &p, &cfg, &batch).unwrap();
    let rows = rows_of(g.value(h));
    assert!(rows.iter().all(|r| r == &rows[0]));
}

#[test]
fn single_unmasked_node_embeds_by_direct_fc() {
    let cfg = small_config();
    let mut model = AirRadar::new(cfg.clone(), stations_near(1, 0.5, 1), channels(2), 7).unwrap();
    randomize(&mut model, 4, 0.5);
    let batch = random_batch(1, 2, 3, vec![false], 5);
    let mut g = Graph::new();
    let pv = model.params().bind(&mut g);
    let h = layers::embed(&mut g, &pv, &cfg, &batch).unwrap();
    let got = g.value(h).data().to_vec();

    let wt = p(&model, "embed.weather_table");
    let wn = p(&model, "embed.wind_table");
    let feat = |cont: &[f64], we: u8, wi: u8| -> Vec<f64> {
        let mut f = cont.to_vec();
        f.extend(&wt[we as usize * 4..we as usize * 4 + 4]);
        f.extend(&wn[wi as usize * 4..wi as usize * 4 + 4]);
        f
    };
    let x = feat(batch.current.data(), batch.weather[0], batch.wind[0]);
    let mut hist = Vec::new();
    for t in 0..3 {
        hist.extend(feat(&batch.past.data()[t * 2..t * 2 + 2], batch.past_weather[t], batch.past_wind[t]));
    }
    let mut want = affine(&x, p(&model, "embed.current.w"), p(&model, "embed.current.b"));
    want.extend(affine(&hist, p(&model, "embed.history.w"), p(&model, "embed.history.b")));
    let err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-12, "{err}");
}

// ---- local attention ----

#[test]
fn isolated_nodes_pass_through_local_attention() {
    let cfg = small_config();
    let far = StationSet::new(
        (0..4)
            .map(|i| Station {
                id: format!("s{i}"),
                location: GeoPoint::new(10.0 * i as f64, 5.0 * i as f64).unwrap(),
            })
            .collect(),
    )
    .unwrap();
    let mut model = AirRadar::new(cfg.clone(), far, channels(3), 1).unwrap();
    randomize(&mut model, 5, 0.5);
    set(&mut model, "block0.local.o.b", |_| 0.0);
    let z = random_rows(4, cfg.width(), 6);
    let out = stage(&model, &z, |g, p, zv| {
        layers::local_attention(g, p, &cfg, model.projection(), None, 0, zv).unwrap()
    });
    assert_eq!(out, z);
}

#[test]
fn equal_region_values_are_returned_per_head() {
    let cfg = small_config();
    let c = cfg.width();
    let mut model = AirRadar::new(cfg.clone(), stations_near(8, 0.6, 2), channels(3), 1).unwrap();
    randomize(&mut model, 7, 0.5);
    set(&mut model, "block0.local.v.w", |_| 0.0);
    set(&mut model, "block0.local.v.b", |j| 0.3 + j as f64);
    set(&mut model, "block0.local.o.w", |i| if i / c == i % c { 1.0 } else { 0.0 });
    set(&mut model, "block0.local.o.b", |_| 0.0);
    for h in 0..2 {
        set(&mut model, &format!("block0.local.bias{h}"), |_| 0.0);
    }
    let z = random_rows(8, c, 8);
    let out = stage(&model, &z, |g, p, zv| {
        layers::local_delta(g, p, &cfg, model.projection(), None, 0, zv).unwrap()
    });
    for (i, row) in out.iter().enumerate() {
        for h in 0..2 {
            let regions = oracle_regions(model.stations(), i, cfg.radii_km[h], &cfg.ring_fractions, cfg.sectors);
            let any = regions.iter().any(|r| !r.is_empty());
            for j in h * cfg.head_dim()..(h + 1) * cfg.head_dim() {
                let want = if any { 0.3 + j as f64 } else { 0.0 };
                assert!((row[j] - want).abs() < 1e-12, "node {i} col {j}: {} vs {want}", row[j]);
            }
        }
    }
}

#[test]
fn local_attention_matches_loop_oracle() {
    for orientation in [Orientation::StaticNorth, Orientation::WindAligned] {
        let cfg = ModelConfig {
            orientation,
            ..small_config()
        };
        let mut model = AirRadar::new(cfg.clone(), stations_near(8, 0.8, 3), channels(3), 1).unwrap();
        randomize(&mut model, 9, 0.7);
        let z = random_rows(8, cfg.width(), 10);
        // A single shared code keeps the oracle's north-up frame valid for
        // wind-aligned projections (code 0 points north).
        let orient: Option<Arc<[u8]>> = (orientation == Orientation::WindAligned).then(|| vec![0u8; 8].into());
        let out = stage(&model, &z, |g, p, zv| {
            layers::local_attention(g, p, &cfg, model.projection(), orient.clone(), 0, zv).unwrap()
        });
        let want = add_rows(&z, &local_oracle(&model, 0, &z));
        let err = max_diff(&out, &want);
        assert!(err < 1e-10, "{orientation:?}: {err}");
    }
}

// ---- spectral mixing ----

fn spectral_model(n: usize, hidden: usize, lambda: f64) -> AirRadar {
    let cfg = ModelConfig {
        hidden,
        lambda,
        ..small_config()
    };
    AirRadar::new(cfg, stations_near(n, 0.5, 4), channels(3), 3).unwrap()
}

#[test]
fn identity_spectral_weights_double_the_input() {
    let mut model = spectral_model(6, 4, 0.0);
    let cb = model.config().width() / model.config().weight_blocks;
    set(&mut model, "block0.global.w", |i| {
        let e = i / 2;
        if i % 2 == 0 && (e / cb) % cb == e % cb {
            1.0
        } else {
            0.0
        }
    });
    set(&mut model, "block0.global.b", |_| 0.0);
    let cfg = model.config().clone();
    let z = random_rows(6, cfg.width(), 11);
    let out = stage(&model, &z, |g, p, zv| layers::spectral_mix(g, p, &cfg, 0, zv).unwrap());
    let err = max_diff(&out, &add_rows(&z, &z));
    assert!(err < 1e-10, "{err}");
}

#[test]
fn huge_threshold_leaves_only_the_residual() {
    let mut model = spectral_model(6, 4, 1e9);
    randomize(&mut model, 12, 1.0);
    let cfg = model.config().clone();
    let z = random_rows(6, cfg.width(), 13);
    let out = stage(&model, &z, |g, p, zv| layers::spectral_mix(g, p, &cfg, 0, zv).unwrap());
    assert_eq!(out, z);
}

#[test]
fn spectral_mix_matches_direct_dft() {
    let mut model = spectral_model(7, 2, 0.05);
    randomize(&mut model, 14, 1.0);
    let cfg = model.config().clone();
    assert_eq!(cfg.width(), 4);
    let z = random_rows(7, 4, 15);
    let out = stage(&model, &z, |g, p, zv| layers::spectral_mix(g, p, &cfg, 0, zv).unwrap());
    let want = add_rows(&z, &spectral_oracle(&model, 0, &z));
    let err = max_diff(&out, &want);
    assert!(err < 1e-9, "{err}");
}

// ---- spatial block ----

#[test]
fn zero_sublayers_make_the_block_an_identity() {
    let cfg = small_config();
    let mut model = AirRadar::new(cfg.clone(), stations_near(8, 0.6, 5), channels(3), 1).unwrap();
    randomize(&mut model, 16, 0.5);
    for name in [
        "block0.local.o.w",
        "block0.local.o.b",
        "block0.global.w",
        "block0.global.b",
        "block0.mlp.fc2.w",
        "block0.mlp.fc2.b",
    ] {
        set(&mut model, name, |_| 0.0);
    }
    let z = random_rows(8, cfg.width(), 17);
    let out = stage(&model, &z, |g, p, zv| {
        layers::spatial_block(g, p, &cfg, model.projection(), None, 0, zv).unwrap()
    });
    assert_eq!(out, z);
}

#[test]
fn spatial_block_matches_composed_oracles() {
    let cfg = small_config();
    let mut model = AirRadar::new(cfg.clone(), stations_near(8, 0.8, 6), channels(3), 1).unwrap();
    randomize(&mut model, 18, 0.6);
    let z = random_rows(8, cfg.width(), 19);
    let out = stage(&model, &z, |g, p, zv| {
        layers::spatial_block(g, p, &cfg, model.projection(), None, 0, zv).unwrap()
    });
    let zn: Rows = z.iter().map(|r| layer_norm(&model, "block0.ln1", r)).collect();
    let combined = add_rows(&add_rows(&z, &local_oracle(&model, 0, &zn)), &spectral_oracle(&model, 0, &zn));
    let want: Rows = combined
        .iter()
        .map(|r| {
            let m = mlp(&model, "block0.mlp", &layer_norm(&model, "block0.ln2", r));
            r.iter().zip(m).map(|(a, b)| a + b).collect()
        })
        .collect();
    let err = max_diff(&out, &want);
    assert!(err < 1e-9, "{err}");
}

// ---- causal mixture ----

fn causal_model(contexts: usize, seed: u64) -> AirRadar {
    let cfg = ModelConfig {
        contexts,
        ..small_config()
    };
    let mut model = AirRadar::new(cfg, stations_near(8, 0.5, 7), channels(3), 1).unwrap();
    randomize(&mut model, seed, 0.6);
    model
}

fn run_causal(model: &AirRadar, z: &Rows) -> (Rows, Rows) {
    let cfg = model.config().clone();
    let mut g = Graph::new();
    let p = model.params().bind(&mut g);
    let zv = g.constant(to_tensor(z));
    let (y, gates) = layers::causal_layer(&mut g, &p, &cfg, 0, zv).unwrap();
    (rows_of(g.value(y)), rows_of(g.value(gates)))
}

#[test]
fn single_context_is_a_residual_mlp() {
    let model = causal_model(1, 20);
    let z = random_rows(8, model.config().width(), 21);
    let (y, gates) = run_causal(&model, &z);
    assert!(gates.iter().all(|g| g == &vec![1.0]));
    let single = stage(&model, &z, |g, p, zv| {
        let phi = layers::mlp(g, p, "causal0.expert0", zv).unwrap();
        g.add(zv, phi).unwrap()
    });
    assert_eq!(y, single);
    let want: Rows = z
        .iter()
        .map(|r| r.iter().zip(mlp(&model, "causal0.expert0", r)).map(|(a, b)| a + b).collect())
        .collect();
    assert!(max_diff(&y, &want) < 1e-12);
}

#[test]
fn identical_experts_ignore_the_gate() {
    let mut model = causal_model(3, 22);
    for part in ["fc1.w", "fc1.b", "fc2.w", "fc2.b"] {
        let t = model.params().get(&format!("causal0.expert0.{part}")).unwrap().clone();
        for k in 1..3 {
            *model.params_mut().get_mut(&format!("causal0.expert{k}.{part}")).unwrap() = t.clone();
        }
    }
    let z = random_rows(8, model.config().width(), 23);
    let (a, _) = run_causal(&model, &z);
    set(&mut model, "causal0.gate.w", |i| (i as f64 * 0.37).sin() * 3.0);
    let (b, _) = run_causal(&model, &z);
    assert!(max_diff(&a, &b) < 1e-12);
}

#[test]
fn causal_layer_matches_loop_oracle() {
    let model = causal_model(4, 24);
    let z = random_rows(8, model.config().width(), 25);
    let (y, gates) = run_causal(&model, &z);
    for (i, r) in z.iter().enumerate() {
        let w = softmax(&affine(r, p(&model, "causal0.gate.w"), p(&model, "causal0.gate.b")));
        let mut want = r.clone();
        for (k, wk) in w.iter().enumerate() {
            for (o, e) in want.iter_mut().zip(mlp(&model, &format!("causal0.expert{k}"), r)) {
                *o += wk * e;
            }
        }
        let err = want.iter().zip(&y[i]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "node {i}: {err}");
        assert!((gates[i].iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(gates[i].iter().all(|&g| g >= 0.0));
    }
}

// ---- decoder ----

#[test]
fn decoder_cases() {
    let cfg = small_config();
    let mut model = AirRadar::new(cfg.clone(), stations_near(8, 0.5, 8), channels(3), 1).unwrap();
    randomize(&mut model, 26, 0.6);
    let z = random_rows(8, cfg.width(), 27);
    let out = stage(&model, &z, |g, p, zv| layers::decode(g, p, zv).unwrap());
    let want: Rows = z.iter().map(|r| mlp(&model, "decode", r)).collect();
    assert!(max_diff(&out, &want) < 1e-12);
    assert_eq!(out[0].len(), 11);

    let same: Rows = vec![z[0].clone(); 8];
    let out = stage(&model, &same, |g, p, zv| layers::decode(g, p, zv).unwrap());
    assert!(out.iter().all(|r| r == &out[0]));

    for name in ["decode.fc1.w", "decode.fc1.b", "decode.fc2.w", "decode.fc2.b"] {
        set(&mut model, name, |_| 0.0);
    }
    let out = stage(&model, &z, |g, p, zv| layers::decode(g, p, zv).unwrap());
    assert!(out.iter().flatten().all(|&v| v == 0.0));
}

// ---- full model ----

#[test]
fn masked_inputs_do_not_reach_the_output() {
    for orientation in [Orientation::StaticNorth, Orientation::WindAligned] {
        let cfg = ModelConfig {
            orientation,
            blocks: 2,
            ..small_config()
        };
        let mut model = AirRadar::new(cfg, stations_near(10, 0.8, 9), channels(3), 2).unwrap();
        randomize(&mut model, 28, 0.5);
        let mask: Vec<bool> = (0..10).map(|i| i % 3 == 0).collect();
        let a = random_batch(10, 3, 3, mask.clone(), 29);
        let mut b = a.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for i in (0..10).filter(|&i| mask[i]) {
            for c in 0..3 {
                b.current.data_mut()[i * 3 + c] = rng.random_range(-50.0..50.0);
            }
            for v in &mut b.past.data_mut()[i * 9..(i + 1) * 9] {
                *v = rng.random_range(-50.0..50.0);
            }
            b.weather[i] = rng.random_range(0..5);
            b.wind[i] = rng.random_range(0..8);
            for t in 0..3 {
                b.past_wind[i * 3 + t] = rng.random_range(0..8);
                b.past_weather[i * 3 + t] = rng.random_range(0..5);
            }
        }
        let (pa, pb) = (model.predict(&a).unwrap(), model.predict(&b).unwrap());
        assert_eq!(pa.data(), pb.data(), "{orientation:?}");
    }
}

#[test]
fn colocated_identical_stations_get_identical_outputs() {
    let stations = StationSet::new(
        (0..4)
            .map(|i| Station {
                id: format!("s{i}"),
                location: GeoPoint::new(31.0, 121.0).unwrap(),
            })
            .collect(),
    )
    .unwrap();
    let cfg = small_config();
    let mut model = AirRadar::new(cfg, stations, channels(3), 4).unwrap();
    randomize(&mut model, 31, 0.5);
    // A bias shared by every frequency bin lands on node 0 after the inverse
    // transform, so symmetry across nodes needs it at zero (its initial value).
    set(&mut model, "block0.global.b", |_| 0.0);
    for h in 0..2 {
        set(&mut model, &format!("block0.local.bias{h}"), |i| (i % 16) as f64 * 0.1);
    }
    let one = random_batch(1, 3, 3, vec![false], 32);
    let batch = SnapshotBatch {
        current: Tensor::new(&[1, 4, 3], one.current.data().repeat(4)).unwrap(),
        weather: vec![one.weather[0]; 4],
        wind: vec![one.wind[0]; 4],
        past: Tensor::new(&[1, 4, 3, 3], one.past.data().repeat(4)).unwrap(),
        past_weather: one.past_weather.repeat(4),
        past_wind: one.past_wind.repeat(4),
        mask: vec![false; 4],
    };
    let out = rows_of(&model.predict(&batch).unwrap());
    for r in &out[1..] {
        let err = r.iter().zip(&out[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }
}

fn masked_l1(g: &mut Graph, out: Var, target: &Tensor, mask: &[bool], dc: usize) -> Var {
    let d = target.last_dim();
    let weights = Tensor::from_fn(target.shape(), |idx| {
        let (row, col) = (idx / d, idx % d);
        if mask[row] && col < dc {
            1.0
        } else {
            0.0
        }
    });
    let t = g.constant(target.clone());
    let diff = g.sub(out, t).unwrap();
    let a = g.abs(diff).unwrap();
    let w = g.constant(weights);
    let m = g.mul(a, w).unwrap();
    let s = g.sum(m).unwrap();
    g.scale(s, 1.0 / mask.iter().filter(|&&m| m).count() as f64)
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        hidden: 8,
        blocks: 2,
        history: 2,
        contexts: 2,
        causal_layers: 1,
        orientation: Orientation::WindAligned,
        ..Default::default()
    };
    let n = 16;
    let mut model = AirRadar::new(cfg, stations_near(n, 1.0, 10), channels(3), 5).unwrap();
    randomize(&mut model, 33, 0.4);
    let mask: Vec<bool> = (0..n).map(|i| i % 2 == 1).collect();
    let batch = random_batch(n, 3, 2, mask.clone(), 34);
    // Targets a fixed offset away from the current output keep every L1 term
    // far from its kink while keeping the loss, and its round-off, small.
    let out = model.predict(&batch).unwrap();
    let target = Tensor::from_fn(&[1, n, 11], |i| out.data()[i] + if i % 2 == 0 { 0.1 } else { -0.1 });
    let store = model.params().clone();
    let report = grad_check(store.tensors(), 1e-3, |g, vars| {
        let p = store.name_vars(vars)?;
        let trace = model.forward(g, &p, &batch)?;
        Ok(masked_l1(g, trace.output, &target, &mask, 3))
    })
    .unwrap();
    let name = report.worst.map(|(p, _)| store.names()[p].clone());
    assert!(report.max_rel_error < 1e-4, "{report:?} {name:?}");
}

#[test]
fn zeroed_output_maps_reproduce_branch_ablations() {
    let base = ModelConfig {
        blocks: 2,
        ..small_config()
    };
    let stations = stations_near(9, 0.7, 11);
    let mut full = AirRadar::new(base.clone(), stations.clone(), channels(3), 6).unwrap();
    randomize(&mut full, 35, 0.5);
    let batch = random_batch(9, 3, 3, (0..9).map(|i| i % 4 == 0).collect(), 36);

    let ablate = |cfg: ModelConfig, zero: &[&str]| {
        let mut killed = full.clone();
        for l in 0..2 {
            for name in zero {
                set(&mut killed, &format!("block{l}.{name}"), |_| 0.0);
            }
        }
        let mut reduced = AirRadar::new(cfg, stations.clone(), channels(3), 0).unwrap();
        let names = reduced.params().names().to_vec();
        for name in names {
            *reduced.params_mut().get_mut(&name).unwrap() = full.params().get(&name).unwrap().clone();
        }
        let (a, b) = (killed.predict(&batch).unwrap(), reduced.predict(&batch).unwrap());
        a.max_abs_diff(&b)
    };
    let no_local = ModelConfig {
        use_local: false,
        ..base.clone()
    };
    assert!(ablate(no_local, &["local.o.w", "local.o.b"]) < 1e-12);
    let no_global = ModelConfig {
        use_global: false,
        ..base.clone()
    };
    assert!(ablate(no_global, &["global.w", "global.b"]) < 1e-12);
}

// ---- checkpoints ----

#[test]
fn checkpoint_round_trips_exactly() {
    let cfg = ModelConfig {
        shared_bias: true,
        orientation: Orientation::WindAligned,
        ..small_config()
    };
    let mut model = AirRadar::new(cfg, stations_near(6, 0.5, 12), channels(2), 7).unwrap();
    randomize(&mut model, 37, 0.5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ardr");
    model.save(&path).unwrap();
    let back = AirRadar::load(&path).unwrap();
    assert_eq!(back.config(), model.config());
    assert_eq!(back.params(), model.params());
    assert_eq!(back.stations(), model.stations());
    assert_eq!(back.channels(), model.channels());
    let batch = random_batch(6, 2, 3, vec![true, false, false, true, false, false], 38);
    assert_eq!(back.predict(&batch).unwrap(), model.predict(&batch).unwrap());

    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"ARDR");
    assert!(AirRadar::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn station_mismatch_is_refused() {
    let model = AirRadar::new(small_config(), stations_near(5, 0.5, 13), channels(2), 7).unwrap();
    model.check_stations(model.stations()).unwrap();
    assert!(model.check_stations(&stations_near(5, 0.5, 14)).is_err());
    assert!(model.check_stations(&stations_near(4, 0.5, 13)).is_err());
}

#[test]
fn extra_stations_get_mean_position_bias() {
    let mut model = AirRadar::new(small_config(), stations_near(5, 0.5, 15), channels(2), 7).unwrap();
    randomize(&mut model, 39, 0.5);
    let extra = vec![Station {
        id: "grid0".into(),
        location: GeoPoint::new(30.1, 115.1).unwrap(),
    }];
    let bigger = model.with_extra_stations(extra).unwrap();
    assert_eq!(bigger.stations().len(), 6);
    let old = model.params().get("block0.local.bias0").unwrap();
    let new = bigger.params().get("block0.local.bias0").unwrap();
    assert_eq!(new.shape(), &[6, 16]);
    for r in 0..16 {
        let mean = (0..5).map(|i| old.data()[i * 16 + r]).sum::<f64>() / 5.0;
        assert!((new.data()[5 * 16 + r] - mean).abs() < 1e-15);
    }
}
