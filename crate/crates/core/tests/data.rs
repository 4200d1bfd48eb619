use std::fs;
use std::path::Path;

use airradar::data::{generate_synthetic, load_csv, write_csv, PreparedData, SynthConfig};
use airradar::Error;

fn small(seed: u64) -> SynthConfig {
    SynthConfig {
        stations: 40,
        steps: 60,
        ..SynthConfig::with_seed(seed)
    }
}

fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

const HEADER: &str = "timestamp,station_id,pm25,temp,humidity,weather_code,wind_code\n";

fn haversine(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (p1, p2) = (a.0.to_radians(), b.0.to_radians());
    let (dp, dl) = (p2 - p1, (b.1 - a.1).to_radians());
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * 6371.0088 * h.sqrt().asin()
}

#[test]
fn noiseless_plumeless_field_is_the_region_baseline() {
    let cfg = SynthConfig {
        noise_sd: 0.0,
        plumes: 0,
        ..small(3)
    };
    let ds = generate_synthetic(&cfg).unwrap();
    let pm = ds.channel_index("pm25").unwrap();
    for i in 0..ds.nodes() {
        let v = ds.value(0, i, pm);
        assert!(cfg.region_baselines.contains(&v), "{v}");
        for t in 0..ds.snapshots() {
            assert_eq!(ds.value(t, i, pm), v);
        }
    }
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["a", "b"] {
        write_csv(&generate_synthetic(&small(9)).unwrap(), &dir.path().join(sub)).unwrap();
    }
    for f in ["stations.csv", "readings.csv"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
    let other = generate_synthetic(&small(10)).unwrap();
    assert_ne!(other.values, generate_synthetic(&small(9)).unwrap().values);
}

#[test]
fn default_field_is_spatially_autocorrelated() {
    let ds = generate_synthetic(&SynthConfig::with_seed(42)).unwrap();
    let pm = ds.channel_index("pm25").unwrap();
    let locs: Vec<(f64, f64)> = ds.stations.iter().map(|s| (s.location.lat, s.location.lon)).collect();
    let n = locs.len();
    for t in [100, 1000, 1900] {
        let x = ds.channel_at(t, pm);
        let mean = x.iter().sum::<f64>() / n as f64;
        let (mut num, mut w_sum) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if i != j && haversine(locs[i], locs[j]) < 150.0 {
                    num += (x[i] - mean) * (x[j] - mean);
                    w_sum += 1.0;
                }
            }
        }
        let den: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
        let moran = n as f64 / w_sum * num / den;
        assert!(moran > 0.3, "Moran's I at t={t}: {moran}");
    }
}

#[test]
fn csv_round_trip() {
    let ds = generate_synthetic(&small(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_csv(&ds, dir.path()).unwrap();
    let back = load_csv(&dir.path().join("stations.csv"), &dir.path().join("readings.csv")).unwrap();
    assert_eq!(back.stations, ds.stations);
    assert_eq!(back.timestamps, ds.timestamps);
    assert_eq!(back.weather, ds.weather);
    assert_eq!(back.wind, ds.wind);
    assert_eq!(back.imputed, 0);
    let err = back
        .values
        .iter()
        .zip(&ds.values)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err <= 1e-9, "{err}");
}

#[test]
fn tiny_well_formed_files_load() {
    let dir = tempfile::tempdir().unwrap();
    let st = write(dir.path(), "s.csv", "id,lat,lon\na,30,110\nb,31,111\n");
    let mut body = HEADER.to_string();
    for t in [2, 1, 3] {
        for id in ["a", "b"] {
            body += &format!("{t},{id},{},20,50,1,2\n", 10 * t);
        }
    }
    let rd = write(dir.path(), "r.csv", &body);
    let ds = load_csv(&st, &rd).unwrap();
    assert_eq!((ds.nodes(), ds.snapshots()), (2, 3));
    assert_eq!(ds.timestamps, vec![1, 2, 3]);
    assert_eq!(ds.value(0, 1, 0), 10.0);
}

#[test]
fn empty_readings_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let st = write(dir.path(), "s.csv", "id,lat,lon\na,30,110\n");
    let rd = write(dir.path(), "r.csv", HEADER);
    let err = load_csv(&st, &rd).unwrap_err().to_string();
    assert!(err.contains("no samples"), "{err}");
}

#[test]
fn malformed_rows_report_their_line() {
    let dir = tempfile::tempdir().unwrap();
    let st = write(dir.path(), "s.csv", "id,lat,lon\na,30,110\n");
    let rd = write(dir.path(), "r.csv", &format!("{HEADER}1,a,5,20,50,1,2\n2,a,abc,20,50,1,2\n"));
    match load_csv(&st, &rd).unwrap_err() {
        Error::Parse { line, message, .. } => {
            assert_eq!(line, 3);
            assert!(message.contains("pm25"), "{message}");
        }
        e => panic!("{e}"),
    }
    let rd = write(dir.path(), "r2.csv", &format!("{HEADER}1,zz,5,20,50,1,2\n"));
    let err = load_csv(&st, &rd).unwrap_err().to_string();
    assert!(err.contains("unknown station") && err.contains(":2:"), "{err}");
    let rd = write(dir.path(), "r3.csv", &format!("{HEADER}1,a,5,20,50,9,2\n"));
    assert!(load_csv(&st, &rd).unwrap_err().to_string().contains("weather_code"));
}

#[test]
fn missing_values_and_gaps_are_imputed() {
    let dir = tempfile::tempdir().unwrap();
    let st = write(dir.path(), "s.csv", "id,lat,lon\na,30,110\nb,31,111\n");
    let body = format!(
        "{HEADER}0,a,1,20,50,1,2\n0,b,,20,50,1,2\n1,a,3,20,50,1,2\n1,b,4,20,50,1,2\n\
         6,a,5,20,50,1,2\n6,b,6,20,50,1,2\n7,a,7,20,50,1,2\n"
    );
    let rd = write(dir.path(), "r.csv", &body);
    let ds = load_csv(&st, &rd).unwrap();
    assert_eq!(ds.timestamps, (0..8).collect::<Vec<_>>());
    // b's median of {4, 6} fills its blank at t=0 and its absence at t=7.
    assert_eq!(ds.value(0, 1, 0), 5.0);
    assert_eq!(ds.value(7, 1, 0), 5.0);
    // Steps 2..4 repeat t=1; step 5 falls back to medians (a: {1,3,5,7} -> 4).
    for t in 2..5 {
        assert_eq!((ds.value(t, 0, 0), ds.value(t, 1, 0)), (3.0, 4.0));
    }
    assert_eq!(ds.value(5, 0, 0), 4.0);
    // Counted per numeric field: one blank, four whole snapshots, one absent row.
    assert_eq!(ds.imputed, 1 + 4 * 2 * 3 + 3);
}

#[test]
fn iso_timestamps_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let st = write(dir.path(), "s.csv", "id,lat,lon\na,30,110\n");
    let rd = write(
        dir.path(),
        "r.csv",
        &format!("{HEADER}2018-01-01T00:00:00,a,1,2,3,0,0\n2018-01-01T01:00:00,a,2,2,3,0,0\n"),
    );
    let ds = load_csv(&st, &rd).unwrap();
    assert!(ds.iso_time);
    assert_eq!(ds.timestamps[1] - ds.timestamps[0], 3600);
    let out = dir.path().join("out");
    write_csv(&ds, &out).unwrap();
    let text = fs::read_to_string(out.join("readings.csv")).unwrap();
    assert!(text.contains("2018-01-01T01:00:00,a,2,"), "{text}");
}

#[test]
fn normalization_uses_training_rows_only() {
    let mut ds = generate_synthetic(&small(6)).unwrap();
    let prep = PreparedData::fit(ds.clone(), 6).unwrap();
    let train_end = prep.splits().train.end;
    let n = ds.nodes();
    for k in 0..prep.continuous() {
        let mean: f64 = (0..train_end)
            .flat_map(|t| (0..n).map(move |i| (t, i)))
            .map(|(t, i)| prep.normalized(t, i, k))
            .sum::<f64>()
            / (train_end * n) as f64;
        assert!(mean.abs() < 1e-10, "{mean}");
    }
    for t in 0..ds.snapshots() {
        for i in 0..n {
            let z = prep.normalized(t, i, 0);
            assert!((prep.stats()[0].denormalize(z) - ds.value(t, i, 0)).abs() < 1e-12);
        }
    }
    // Scrambling validation and test rows leaves the statistics alone.
    let c = ds.channels.len();
    for v in &mut ds.values[train_end * n * c..] {
        *v = *v * 3.0 + 100.0;
    }
    let again = PreparedData::fit(ds, 6).unwrap();
    assert_eq!(again.stats(), prep.stats());
    let s = again.splits();
    assert!(s.train.end <= s.val.start && s.val.end <= s.test.start);
}

#[test]
fn constant_channels_are_dropped() {
    let mut ds = generate_synthetic(&small(7)).unwrap();
    let temp = ds.channel_index("temp").unwrap();
    let c = ds.channels.len();
    for row in ds.values.chunks_mut(c) {
        row[temp] = 12.5;
    }
    let prep = PreparedData::fit(ds.clone(), 6).unwrap();
    let names: Vec<&str> = prep.stats().iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, ["pm25", "humidity"]);
    for row in ds.values.chunks_mut(c) {
        row[0] = 1.0;
    }
    assert!(PreparedData::fit(ds, 6).is_err());
}

#[test]
fn batches_carry_history_in_order() {
    let ds = generate_synthetic(&small(8)).unwrap();
    let prep = PreparedData::fit(ds, 4).unwrap();
    let n = prep.nodes();
    let mask: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let b = prep.batch(&[10, 20], &[mask.clone(), mask]).unwrap();
    assert_eq!(b.past.shape(), &[2, n, 4, 3]);
    // Sample 1, node 3, step 2 of history is snapshot 18.
    let got = b.past.data()[((n + 3) * 4 + 2) * 3];
    assert_eq!(got, prep.normalized(18, 3, 0));
    assert_eq!(b.current.data()[(n + 3) * 3], prep.normalized(20, 3, 0));
    assert!(prep.batch(&[2], &[vec![false; n]]).is_err());
}
