use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use log::info;
use serde_json::json;
use sha2::{Digest, Sha256};

use airradar::bench::{run_bench, BenchConfig, Kernel};
use airradar::config::RunConfig;
use airradar::data::{
    generate_synthetic, load_csv, write_csv, Dataset, PreparedData, SynthConfig, READINGS_FILE, STATIONS_FILE,
};
use airradar::geo::{GeoPoint, Station};
use airradar::model::{AirRadar, SnapshotBatch};
use airradar::numerics::Tensor;
use airradar::train::{evaluate, train_loop, BaselineSpec, METRICS_HEADER};
use airradar::Error;

use crate::{Command, RunArgs};

/// Largest grid accepted by `infer`.
const MAX_GRID_CELLS: usize = 20_000;

pub fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Usage(_) | Error::Config(_)) => 2,
        _ => 1,
    }
}

/// The error and its causes, skipping causes already spelled out by an
/// outer message.
pub fn describe(e: &anyhow::Error) -> String {
    let mut text = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !text.contains(&c) {
            text = format!("{text}: {c}");
        }
    }
    text
}

pub fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::GenData { config, out, seed } => gen_data(config.as_deref(), &out, seed),
        Command::Train { run, out, log } => train(&run, &out, log),
        Command::Eval {
            data,
            ckpt,
            ratio,
            baselines,
            seed,
            out,
        } => eval(&data, &ckpt, &ratio, baselines, seed, out.as_deref()),
        Command::Infer {
            ckpt,
            data,
            grid,
            time,
            out,
        } => infer(&ckpt, &data, &grid, time, out.as_deref()),
        Command::Bench {
            n,
            kernel,
            repeats,
            out,
        } => bench(n, &kernel, repeats, out.as_deref()),
        Command::Sweep {
            run,
            param,
            values,
            ratio,
            out,
        } => sweep(&run, &param, &values, ratio, out.as_deref()),
    }
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Git-style blob hash (`"blob <len>\0" + bytes`) under SHA-256.
fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Content hash of a data directory's two CSV files.
fn data_hash(dir: &Path) -> anyhow::Result<String> {
    let mut tree = String::new();
    for name in [STATIONS_FILE, READINGS_FILE] {
        let path = dir.join(name);
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        tree.push_str(&format!("{} {name}\n", blob_hash(&bytes)));
    }
    Ok(hex::encode(Sha256::digest(tree.as_bytes())))
}

fn load_dir(dir: &Path) -> anyhow::Result<Dataset> {
    let ds = load_csv(&dir.join(STATIONS_FILE), &dir.join(READINGS_FILE))?;
    if ds.imputed > 0 {
        info!("{} readings imputed during ingestion", ds.imputed);
    }
    Ok(ds)
}

fn write_manifest(path: &Path, value: serde_json::Value) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(&value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn run_config(args: &RunArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_toml_str(&read(p)?).with_context(|| format!("in {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn gen_data(config: Option<&Path>, out: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let mut cfg: SynthConfig = match config {
        Some(p) => SynthConfig::from_toml_str(&read(p)?).with_context(|| format!("in {}", p.display()))?,
        None => SynthConfig::default(),
    };
    if seed.is_some() {
        cfg.seed = seed;
    }
    let ds = generate_synthetic(&cfg)?;
    write_csv(&ds, out)?;
    let meta = serde_json::to_string_pretty(&cfg)?;
    fs::write(out.join("meta.json"), meta + "\n").context("writing meta.json")?;
    write_manifest(
        &out.join("manifest.json"),
        json!({
            "command": "gen-data",
            "config": cfg,
            "config_hash": hex::encode(Sha256::digest(serde_json::to_string(&cfg)?.as_bytes())),
            "seed": cfg.seed,
            "data_hash": data_hash(out)?,
        }),
    )?;
    info!("wrote {} stations x {} snapshots to {}", ds.nodes(), ds.snapshots(), out.display());
    Ok(())
}

fn train_model(cfg: &RunConfig, data: &PreparedData, ckpt: Option<&Path>, log: Option<&mut dyn Write>) -> anyhow::Result<AirRadar> {
    let mut model = AirRadar::new(
        cfg.model.clone(),
        data.dataset().stations.clone(),
        data.stats().to_vec(),
        cfg.train.seed,
    )?;
    info!(
        "{} parameters; {} training samples",
        model.params().scalar_count(),
        data.splits().train.len()
    );
    let report = train_loop(&mut model, data, &cfg.train, ckpt, log)?;
    info!(
        "best validation MAE {:.4} at epoch {}",
        report.best_val_mae, report.best_epoch
    );
    Ok(model)
}

fn train(args: &RunArgs, out: &Path, log: Option<PathBuf>) -> anyhow::Result<()> {
    let cfg = run_config(args)?;
    let echoed = cfg.to_toml()?;
    info!("effective config:\n{echoed}");
    let data = PreparedData::fit(load_dir(&args.data)?, cfg.model.history)?;
    write_manifest(
        &sibling(out, ".manifest.json"),
        json!({
            "command": "train",
            "config": echoed,
            "config_hash": cfg.hash()?,
            "seed": cfg.train.seed,
            "data": args.data,
            "data_hash": data_hash(&args.data)?,
        }),
    )?;
    let log_path = log.unwrap_or_else(|| sibling(out, ".log.jsonl"));
    let mut log_file = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let model = train_model(&cfg, &data, Some(out), Some(&mut log_file))?;
    model.save(out)?;
    info!("checkpoint written to {}", out.display());
    Ok(())
}

fn load_for(ckpt: &Path, dir: &Path) -> anyhow::Result<(AirRadar, PreparedData)> {
    let model = AirRadar::load(ckpt)?;
    let ds = load_dir(dir)?;
    model.check_stations(&ds.stations)?;
    let data = PreparedData::with_stats(ds, model.config().history, model.channels())?;
    Ok((model, data))
}

fn eval(data_dir: &Path, ckpt: &Path, ratios: &[f64], baselines: bool, seed: u64, out: Option<&Path>) -> anyhow::Result<()> {
    let (model, data) = load_for(ckpt, data_dir)?;
    let times: Vec<usize> = data.splits().test.clone().collect();
    let spec = baselines.then(BaselineSpec::default);
    let mut csv = format!("{METRICS_HEADER}\n");
    for &r in ratios {
        let ev = evaluate(Some(&model), &data, &times, r, seed, spec)?;
        csv.push_str(&ev.csv_rows());
    }
    emit(out, &csv)
}

fn parse_grid(spec: &str) -> anyhow::Result<Vec<GeoPoint>> {
    let parts: Vec<f64> = spec
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| Error::Usage(format!("--grid {spec:?}: {e}")))?;
    let [lat0, lon0, lat1, lon1, step] = parts[..] else {
        bail!(Error::Usage(format!("--grid needs lat0,lon0,lat1,lon1,step; got {spec:?}")));
    };
    if !(step > 0.0) || lat1 < lat0 || lon1 < lon0 {
        bail!(Error::Usage("--grid needs lat0 <= lat1, lon0 <= lon1 and step > 0".into()));
    }
    let count = |a: f64, b: f64| ((b - a) / step + 1e-9).floor() as usize + 1;
    let (nlat, nlon) = (count(lat0, lat1), count(lon0, lon1));
    if nlat.saturating_mul(nlon) > MAX_GRID_CELLS {
        bail!(Error::Usage(format!(
            "grid has {} cells; the limit is {MAX_GRID_CELLS}",
            nlat.saturating_mul(nlon)
        )));
    }
    let mut cells = Vec::with_capacity(nlat * nlon);
    for i in 0..nlat {
        for j in 0..nlon {
            cells.push(GeoPoint::new(lat0 + i as f64 * step, lon0 + j as f64 * step)?);
        }
    }
    Ok(cells)
}

/// Appends `m` masked pseudo-nodes to a batch of one sample.
fn with_pseudo_nodes(b: SnapshotBatch, m: usize) -> anyhow::Result<SnapshotBatch> {
    let (n, c, t) = (b.nodes(), b.continuous(), b.history());
    let grow = |data: &[f64], per: usize| {
        let mut v = data.to_vec();
        v.resize((n + m) * per, 0.0);
        v
    };
    let grow_codes = |codes: &[u8], per: usize| {
        let mut v = codes.to_vec();
        v.resize((n + m) * per, 0);
        v
    };
    let mut mask = b.mask.clone();
    mask.resize(n + m, true);
    Ok(SnapshotBatch {
        current: Tensor::new(&[1, n + m, c], grow(b.current.data(), c))?,
        weather: grow_codes(&b.weather, 1),
        wind: grow_codes(&b.wind, 1),
        past: Tensor::new(&[1, n + m, t, c], grow(b.past.data(), t * c))?,
        past_weather: grow_codes(&b.past_weather, t),
        past_wind: grow_codes(&b.past_wind, t),
        mask,
    })
}

fn infer(ckpt: &Path, data_dir: &Path, grid: &str, time: Option<usize>, out: Option<&Path>) -> anyhow::Result<()> {
    let cells = parse_grid(grid)?;
    let (model, data) = load_for(ckpt, data_dir)?;
    let s = data.dataset().snapshots();
    let t = time.unwrap_or(s - 1);
    if t < data.history() || t >= s {
        bail!(Error::Usage(format!(
            "--time must lie in {}..{s} so a full history is available",
            data.history()
        )));
    }
    let n = data.nodes();
    let extra: Vec<Station> = cells
        .iter()
        .enumerate()
        .map(|(k, &location)| Station {
            id: format!("grid{k}"),
            location,
        })
        .collect();
    let wide = model.with_extra_stations(extra)?;
    let batch = with_pseudo_nodes(data.batch(&[t], &[vec![false; n]])?, cells.len())?;
    let pred = wide.predict(&batch)?;
    let d = pred.last_dim();
    let stats = &model.channels()[0];
    let mut csv = String::from("lat,lon,pm25\n");
    for (k, p) in cells.iter().enumerate() {
        let v = stats.denormalize(pred.data()[(n + k) * d]);
        csv.push_str(&format!("{},{},{v}\n", p.lat, p.lon));
    }
    info!("predicted {} grid cells at snapshot {t}", cells.len());
    emit(out, &csv)
}

fn bench(sizes: Vec<usize>, kernels: &[String], repeats: usize, out: Option<&Path>) -> anyhow::Result<()> {
    let cfg = BenchConfig {
        sizes,
        repeats,
        ..BenchConfig::default()
    };
    let mut csv = String::from("kernel,n,seconds\n");
    for name in kernels {
        let kernel: Kernel = name.parse()?;
        let r = run_bench(kernel, &cfg)?;
        for (n, t) in &r.timings {
            csv.push_str(&format!("{kernel},{n},{t}\n"));
        }
        eprintln!("{kernel}: fitted exponent {:.3}", r.exponent);
    }
    emit(out, &csv)
}

fn sweep(args: &RunArgs, param: &str, values: &[String], ratio: f64, out: Option<&Path>) -> anyhow::Result<()> {
    let base = run_config(args)?;
    let ds = load_dir(&args.data)?;
    let mut csv = String::from("param,value,mae,rmse,mape\n");
    for v in values {
        let mut cfg = base.clone();
        cfg.set(param, v)?;
        info!("{param} = {v}");
        let data = PreparedData::fit(ds.clone(), cfg.model.history)?;
        let model = train_model(&cfg, &data, None, None)?;
        let times: Vec<usize> = data.splits().test.clone().collect();
        let m = evaluate(Some(&model), &data, &times, ratio, cfg.train.seed, None)?.rows[0].1;
        csv.push_str(&format!("{param},{v},{},{},{}\n", m.mae, m.rmse, m.mape));
    }
    emit(out, &csv)
}
