use std::collections::BTreeMap;
use std::fs::{self, File};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use log::warn;

use super::{Dataset, CONTINUOUS_CHANNELS};
use crate::error::{Error, Result};
use crate::geo::{GeoPoint, Station, StationSet, WIND_CODES};
use crate::model::WEATHER_VOCAB;

pub const STATIONS_FILE: &str = "stations.csv";
pub const READINGS_FILE: &str = "readings.csv";

const READINGS_HEADER: [&str; 7] = [
    "timestamp",
    "station_id",
    "pm25",
    "temp",
    "humidity",
    "weather_code",
    "wind_code",
];

/// Longest gap (in steps) bridged by repeating the previous snapshot.
const FORWARD_FILL_STEPS: usize = 3;

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn open(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn check_header(rdr: &mut csv::Reader<File>, path: &Path, want: &[&str]) -> Result<()> {
    let got = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if got.len() != want.len() || got.iter().zip(want).any(|(a, b)| a != *b) {
        return Err(parse_err(path, 1, format!("expected header {}", want.join(","))));
    }
    Ok(())
}

fn line_of(rec: &csv::StringRecord) -> usize {
    rec.position().map_or(0, |p| p.line() as usize)
}

fn read_stations(path: &Path) -> Result<StationSet> {
    let mut rdr = open(path)?;
    check_header(&mut rdr, path, &["id", "lat", "lon"])?;
    let mut stations = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = line_of(&rec);
        let num = |i: usize, what: &str| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|_| parse_err(path, line, format!("bad {what} {:?}", &rec[i])))
        };
        if rec[0].is_empty() {
            return Err(parse_err(path, line, "empty station id"));
        }
        let location = GeoPoint::new(num(1, "latitude")?, num(2, "longitude")?)
            .map_err(|e| parse_err(path, line, e.to_string()))?;
        stations.push(Station {
            id: rec[0].to_string(),
            location,
        });
    }
    if stations.is_empty() {
        return Err(parse_err(path, 1, "no stations"));
    }
    StationSet::new(stations).map_err(|e| parse_err(path, 0, e.to_string()))
}

/// Parses an integer step or an ISO-8601 date-time (Unix seconds).
fn parse_time(s: &str) -> Option<(i64, bool)> {
    if let Ok(v) = s.parse::<i64>() {
        return Some((v, false));
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some((dt.timestamp(), true));
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .map(|dt| (dt.and_utc().timestamp(), true))
}

fn format_time(t: i64, iso: bool) -> String {
    if iso {
        DateTime::from_timestamp(t, 0)
            .map(|d| d.naive_utc().format("%Y-%m-%dT%H:%M:%S").to_string())
            .unwrap_or_else(|| t.to_string())
    } else {
        t.to_string()
    }
}

/// One parsed row; `None` marks a missing field.
struct Row {
    values: [Option<f64>; 3],
    weather: Option<u8>,
    wind: Option<u8>,
}

fn missing(s: &str) -> bool {
    matches!(s, "" | "NA" | "NaN" | "nan" | "null")
}

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

fn mode(v: &[u8]) -> Option<u8> {
    let mut counts = [0usize; 256];
    for &c in v {
        counts[c as usize] += 1;
    }
    (0..256).filter(|&c| counts[c] > 0).max_by_key(|&c| (counts[c], usize::MAX - c)).map(|c| c as u8)
}

/// Loads stations (`id,lat,lon`) and readings
/// (`timestamp,station_id,pm25,temp,humidity,weather_code,wind_code`).
///
/// Missing fields and stations absent at a timestamp are filled with the
/// station's median (mode for codes). Gaps in the time axis are forward
/// filled for up to three steps and median-filled beyond that.
pub fn load_csv(stations_path: &Path, readings_path: &Path) -> Result<Dataset> {
    let stations = read_stations(stations_path)?;
    let n = stations.len();
    let path = readings_path;
    let mut rdr = open(path)?;
    check_header(&mut rdr, path, &READINGS_HEADER)?;

    let mut by_time: BTreeMap<i64, Vec<Option<Row>>> = BTreeMap::new();
    let mut iso = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = line_of(&rec);
        let (t, is_iso) =
            parse_time(&rec[0]).ok_or_else(|| parse_err(path, line, format!("bad timestamp {:?}", &rec[0])))?;
        if *iso.get_or_insert(is_iso) != is_iso {
            return Err(parse_err(path, line, "mixed integer and date-time timestamps"));
        }
        let station = stations
            .index_of(&rec[1])
            .ok_or_else(|| parse_err(path, line, format!("unknown station {:?}", &rec[1])))?;
        let mut values = [None; 3];
        for (k, v) in values.iter_mut().enumerate() {
            let s = &rec[2 + k];
            if !missing(s) {
                let x = s
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| parse_err(path, line, format!("bad {} {s:?}", READINGS_HEADER[2 + k])))?;
                *v = Some(x);
            }
        }
        let code = |i: usize, vocab: usize| -> Result<Option<u8>> {
            let s = &rec[i];
            if missing(s) {
                return Ok(None);
            }
            match s.parse::<usize>() {
                Ok(c) if c < vocab => Ok(Some(c as u8)),
                _ => Err(parse_err(
                    path,
                    line,
                    format!("bad {} {s:?} (expected 0..{})", READINGS_HEADER[i], vocab - 1),
                )),
            }
        };
        let row = Row {
            values,
            weather: code(5, WEATHER_VOCAB)?,
            wind: code(6, WIND_CODES)?,
        };
        let slot = &mut by_time.entry(t).or_insert_with(|| (0..n).map(|_| None).collect())[station];
        if slot.is_some() {
            return Err(parse_err(
                path,
                line,
                format!("duplicate reading for station {:?} at {}", &rec[1], &rec[0]),
            ));
        }
        *slot = Some(row);
    }
    if by_time.is_empty() {
        return Err(parse_err(path, 1, "no samples"));
    }

    // Station medians / modes over everything observed.
    let c = CONTINUOUS_CHANNELS.len();
    let mut seen: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); c]; n];
    let mut seen_weather: Vec<Vec<u8>> = vec![Vec::new(); n];
    let mut seen_wind: Vec<Vec<u8>> = vec![Vec::new(); n];
    for rows in by_time.values() {
        for (i, row) in rows.iter().enumerate() {
            let Some(row) = row else { continue };
            for k in 0..c {
                if let Some(v) = row.values[k] {
                    seen[i][k].push(v);
                }
            }
            seen_weather[i].extend(row.weather);
            seen_wind[i].extend(row.wind);
        }
    }
    let mut fill = vec![0.0; n * c];
    for i in 0..n {
        for k in 0..c {
            fill[i * c + k] = median(&mut seen[i][k]).ok_or_else(|| {
                Error::Validation(format!(
                    "station {:?} has no {} readings to impute from",
                    stations.get(i).id,
                    CONTINUOUS_CHANNELS[k]
                ))
            })?;
        }
    }
    let fill_weather: Vec<u8> = seen_weather.iter().map(|v| mode(v).unwrap_or(0)).collect();
    let fill_wind: Vec<u8> = seen_wind.iter().map(|v| mode(v).unwrap_or(0)).collect();

    let times: Vec<i64> = by_time.keys().copied().collect();
    let step = times.windows(2).map(|w| w[1] - w[0]).min().unwrap_or(1);
    let mut ds = Dataset {
        stations,
        timestamps: Vec::with_capacity(times.len()),
        iso_time: iso.unwrap_or(false),
        channels: CONTINUOUS_CHANNELS.iter().map(|s| s.to_string()).collect(),
        values: Vec::with_capacity(times.len() * n * c),
        weather: Vec::with_capacity(times.len() * n),
        wind: Vec::with_capacity(times.len() * n),
        imputed: 0,
    };
    let mut prev: Option<i64> = None;
    for (&t, rows) in &by_time {
        if let Some(p) = prev {
            let gap = ((t - p) / step - 1).max(0) as usize;
            if (t - p) % step != 0 {
                warn!("timestamp {t} is off the {step}-unit grid");
            }
            if gap > 0 {
                warn!(
                    "{gap} missing snapshot(s) after {}; forward-filling up to {FORWARD_FILL_STEPS}",
                    format_time(p, ds.iso_time)
                );
                for g in 0..gap {
                    let s = ds.snapshots();
                    ds.timestamps.push(p + (g as i64 + 1) * step);
                    if g < FORWARD_FILL_STEPS {
                        ds.values.extend_from_within((s - 1) * n * c..s * n * c);
                        ds.weather.extend_from_within((s - 1) * n..s * n);
                        ds.wind.extend_from_within((s - 1) * n..s * n);
                    } else {
                        ds.values.extend_from_slice(&fill);
                        ds.weather.extend_from_slice(&fill_weather);
                        ds.wind.extend_from_slice(&fill_wind);
                    }
                    ds.imputed += n * c;
                }
            }
        }
        ds.timestamps.push(t);
        for (i, row) in rows.iter().enumerate() {
            for k in 0..c {
                let v = row.as_ref().and_then(|r| r.values[k]);
                ds.imputed += usize::from(v.is_none());
                ds.values.push(v.unwrap_or(fill[i * c + k]));
            }
            ds.weather.push(row.as_ref().and_then(|r| r.weather).unwrap_or(fill_weather[i]));
            ds.wind.push(row.as_ref().and_then(|r| r.wind).unwrap_or(fill_wind[i]));
        }
        prev = Some(t);
    }
    if ds.imputed > 0 {
        warn!("imputed {} missing reading(s)", ds.imputed);
    }
    Ok(ds)
}

/// Writes `stations.csv` and `readings.csv` into `dir`.
pub fn write_csv(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let csv_err = |path: &Path| {
        let p = path.display().to_string();
        move |e: csv::Error| Error::io(format!("writing {p}"), std::io::Error::other(e))
    };

    let path = dir.join(STATIONS_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["id", "lat", "lon"]).map_err(csv_err(&path))?;
    for s in ds.stations.iter() {
        w.write_record([s.id.clone(), s.location.lat.to_string(), s.location.lon.to_string()])
            .map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))?;

    let pm = channel_or_err(ds, "pm25")?;
    let temp = channel_or_err(ds, "temp")?;
    let hum = channel_or_err(ds, "humidity")?;
    let path = dir.join(READINGS_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(READINGS_HEADER).map_err(csv_err(&path))?;
    let n = ds.nodes();
    for (t, &ts) in ds.timestamps.iter().enumerate() {
        let stamp = format_time(ts, ds.iso_time);
        for (i, s) in ds.stations.iter().enumerate() {
            w.write_record([
                stamp.clone(),
                s.id.clone(),
                ds.value(t, i, pm).to_string(),
                ds.value(t, i, temp).to_string(),
                ds.value(t, i, hum).to_string(),
                ds.weather[t * n + i].to_string(),
                ds.wind[t * n + i].to_string(),
            ])
            .map_err(csv_err(&path))?;
        }
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn channel_or_err(ds: &Dataset, name: &str) -> Result<usize> {
    ds.channel_index(name)
        .ok_or_else(|| Error::Usage(format!("dataset has no {name} channel")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestamps_parse_both_ways() {
        assert_eq!(parse_time("42"), Some((42, false)));
        assert_eq!(parse_time("1970-01-01T01:00:00"), Some((3600, true)));
        assert_eq!(parse_time("1970-01-01 00:01"), Some((60, true)));
        assert_eq!(parse_time("yesterday"), None);
        assert_eq!(format_time(3600, true), "1970-01-01T01:00:00");
    }

    #[test]
    fn median_and_mode() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
        assert_eq!(mode(&[2, 1, 2, 1]), Some(1));
        assert_eq!(mode(&[]), None);
    }
}
