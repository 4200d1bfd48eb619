//! Binary checkpoints.
//!
//! Layout: magic `ARDR`, version (u32 LE), station count (u64 LE), then
//! records until end of file. A record is name length (u32), UTF-8 name,
//! rank (u32), dims (u64 each) and a little-endian f64 payload. Complex
//! tensors carry a trailing dimension of 2.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::params::{init_params, ParamStore};
use super::AirRadar;
use crate::data::ChannelStats;
use crate::error::{Error, Result};
use crate::geo::{GeoPoint, Orientation, Station, StationSet};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ARDR";
pub const CHECKPOINT_VERSION: u32 = 1;

const META_CONFIG: &str = "meta.config";
const META_STATIONS: &str = "meta.stations";
const META_IDS: &str = "meta.station_ids";
const META_CHANNELS: &str = "meta.channels";
const META_NORM: &str = "meta.norm";

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn config_vector(cfg: &ModelConfig) -> Vec<f64> {
    let mut v = vec![
        cfg.hidden as f64,
        cfg.blocks as f64,
        cfg.weight_blocks as f64,
        cfg.lambda,
        cfg.contexts as f64,
        cfg.causal_layers as f64,
        cfg.history as f64,
        cfg.sectors as f64,
        flag(cfg.orientation == Orientation::WindAligned),
        flag(cfg.shared_bias),
        flag(cfg.use_local),
        flag(cfg.use_global),
        flag(cfg.use_causal),
        cfg.radii_km.len() as f64,
    ];
    v.extend(&cfg.radii_km);
    v.push(cfg.ring_fractions.len() as f64);
    v.extend(&cfg.ring_fractions);
    v
}

fn config_from_vector(v: &[f64]) -> Result<ModelConfig> {
    let bad = || Error::Format("malformed model configuration record".into());
    let mut it = v.iter().copied();
    let mut next = || it.next().ok_or_else(bad);
    let count = |x: f64| -> Result<usize> {
        if x >= 0.0 && x.fract() == 0.0 && x < 1e9 {
            Ok(x as usize)
        } else {
            Err(bad())
        }
    };
    let hidden = count(next()?)?;
    let blocks = count(next()?)?;
    let weight_blocks = count(next()?)?;
    let lambda = next()?;
    let contexts = count(next()?)?;
    let causal_layers = count(next()?)?;
    let history = count(next()?)?;
    let sectors = count(next()?)?;
    let orientation = if next()? != 0.0 {
        Orientation::WindAligned
    } else {
        Orientation::StaticNorth
    };
    let shared_bias = next()? != 0.0;
    let use_local = next()? != 0.0;
    let use_global = next()? != 0.0;
    let use_causal = next()? != 0.0;
    let heads = count(next()?)?;
    let radii_km = (0..heads).map(|_| next()).collect::<Result<Vec<_>>>()?;
    let rings = count(next()?)?;
    let ring_fractions = (0..rings).map(|_| next()).collect::<Result<Vec<_>>>()?;
    if next().is_ok() {
        return Err(bad());
    }
    let cfg = ModelConfig {
        hidden,
        blocks,
        radii_km,
        ring_fractions,
        sectors,
        orientation,
        weight_blocks,
        lambda,
        contexts,
        causal_layers,
        history,
        shared_bias,
        use_local,
        use_global,
        use_causal,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn encode_text(items: &[&str]) -> Result<Tensor> {
    if let Some(s) = items.iter().find(|s| s.contains('\n')) {
        return Err(Error::Validation(format!("name {s:?} contains a newline")));
    }
    let bytes: Vec<f64> = items.join("\n").bytes().map(f64::from).collect();
    Tensor::new(&[bytes.len()], bytes)
}

fn decode_text(t: &Tensor) -> Result<Vec<String>> {
    let bytes = t
        .data()
        .iter()
        .map(|&b| {
            if (0.0..256.0).contains(&b) && b.fract() == 0.0 {
                Ok(b as u8)
            } else {
                Err(Error::Format("text record holds a non-byte value".into()))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    let s = String::from_utf8(bytes).map_err(|_| Error::Format("text record is not UTF-8".into()))?;
    Ok(s.split('\n').map(str::to_string).collect())
}

fn write_record(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    let mut dims = t.shape().to_vec();
    if t.is_complex() {
        dims.push(2);
    }
    out.extend((dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend((d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Raw record: dims as stored and the payload.
type Record = (Vec<usize>, Vec<f64>);

fn read_records(bytes: &[u8]) -> Result<(u64, Vec<(String, Record)>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let stations = r.u64()?;
    let mut records = Vec::new();
    while !r.done() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format(format!("record {name:?} is too large")))?;
        let data = r
            .take(numel)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push((name, (dims, data)));
    }
    Ok((stations, records))
}

impl AirRadar {
    /// Serializes parameters, configuration, stations and channel scaling.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend(CHECKPOINT_MAGIC);
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        out.extend((self.stations.len() as u64).to_le_bytes());

        let cfg = config_vector(&self.config);
        write_record(&mut out, META_CONFIG, &Tensor::new(&[cfg.len()], cfg)?);
        let locs: Vec<f64> = self
            .stations
            .iter()
            .flat_map(|s| [s.location.lat, s.location.lon])
            .collect();
        write_record(&mut out, META_STATIONS, &Tensor::new(&[self.stations.len(), 2], locs)?);
        let ids: Vec<&str> = self.stations.iter().map(|s| s.id.as_str()).collect();
        write_record(&mut out, META_IDS, &encode_text(&ids)?);
        let names: Vec<&str> = self.channels.iter().map(|c| c.name.as_str()).collect();
        write_record(&mut out, META_CHANNELS, &encode_text(&names)?);
        let norm: Vec<f64> = self.channels.iter().flat_map(|c| [c.mean, c.std]).collect();
        write_record(&mut out, META_NORM, &Tensor::new(&[self.channels.len(), 2], norm)?);

        for (name, t) in self.params.iter() {
            if !t.is_finite() {
                return Err(Error::Numeric(format!("parameter {name} is not finite")));
            }
            write_record(&mut out, name, t);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<AirRadar> {
        let (station_count, records) = read_records(bytes)?;
        let mut map: HashMap<String, Record> = HashMap::with_capacity(records.len());
        for (name, rec) in records {
            if map.insert(name.clone(), rec).is_some() {
                return Err(Error::Format(format!("duplicate record {name:?}")));
            }
        }
        let mut meta = |name: &str| {
            map.remove(name)
                .ok_or_else(|| Error::Format(format!("missing record {name:?}")))
        };
        let config = config_from_vector(&meta(META_CONFIG)?.1)?;
        let (loc_dims, locs) = meta(META_STATIONS)?;
        let (_, id_bytes) = meta(META_IDS)?;
        let ids = decode_text(&Tensor::new(&[id_bytes.len()], id_bytes)?)?;
        let n = station_count as usize;
        if loc_dims != [n, 2] || ids.len() != n {
            return Err(Error::Format(format!(
                "header declares {n} stations but metadata disagrees"
            )));
        }
        let stations = ids
            .into_iter()
            .zip(locs.chunks(2))
            .map(|(id, ll)| {
                Ok(Station {
                    id,
                    location: GeoPoint::new(ll[0], ll[1])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let stations = StationSet::new(stations)?;

        let (_, name_bytes) = meta(META_CHANNELS)?;
        let names = decode_text(&Tensor::new(&[name_bytes.len()], name_bytes)?)?;
        let (norm_dims, norm) = meta(META_NORM)?;
        if norm_dims != [names.len(), 2] {
            return Err(Error::Format("channel scaling does not match channel names".into()));
        }
        let channels: Vec<ChannelStats> = names
            .into_iter()
            .zip(norm.chunks(2))
            .map(|(name, ms)| ChannelStats {
                name,
                mean: ms[0],
                std: ms[1],
            })
            .collect();

        // The skeleton fixes names, shapes and which tensors are complex.
        let skeleton = init_params(&config, n, channels.len(), &mut ChaCha8Rng::seed_from_u64(0));
        let mut params = ParamStore::new();
        for (name, like) in skeleton.iter() {
            let (dims, data) = map
                .remove(name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name:?}")))?;
            let t = if like.is_complex() {
                match dims.split_last() {
                    Some((2, shape)) if shape == like.shape() => Tensor::new_complex(shape, data)?,
                    _ => return Err(shape_error(name, &dims, like)),
                }
            } else if dims == like.shape() {
                Tensor::new(&dims, data)?
            } else {
                return Err(shape_error(name, &dims, like));
            };
            if !t.is_finite() {
                return Err(Error::Format(format!("parameter {name:?} is not finite")));
            }
            params.insert(name, t);
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::Format(format!("unexpected record {extra:?}")));
        }
        AirRadar::from_parts(config, stations, channels, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<AirRadar> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        AirRadar::from_bytes(&bytes)
    }
}

fn shape_error(name: &str, dims: &[usize], like: &Tensor) -> Error {
    let mut want = like.shape().to_vec();
    if like.is_complex() {
        want.push(2);
    }
    Error::Format(format!("parameter {name:?} stored as {dims:?}, expected {want:?}"))
}
