//! Station geometry: great-circle distances and dartboard region projections.
//!
//! Each node's neighbourhood is cut into `rings x sectors` regions by
//! concentric circles and rays. A neighbour `j` of node `i` falls in ring `r`
//! when `fraction[r-1] * R <= d(i, j) < fraction[r] * R`, and in sector `s`
//! when its bearing, measured clockwise from the orientation azimuth and
//! offset by half a sector, lies in `[s * w, (s + 1) * w)`. Sector 0's
//! bisector therefore points at the orientation azimuth. Region index is
//! `ring * sectors + sector`.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Number of discrete wind codes; code `c` means wind from azimuth `45 * c`.
pub const WIND_CODES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        let p = GeoPoint { lat, lon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.lat) || !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::Validation(format!(
                "coordinate ({}, {}) outside lat [-90, 90] / lon [-180, 180]",
                self.lat, self.lon
            )));
        }
        Ok(())
    }
}

/// Great-circle distance in kilometres.
pub fn haversine_km(a: GeoPoint, b: GeoPoint) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(distance_km(a, b))
}

pub(crate) fn distance_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = p2 - p1;
    let dlam = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dlam / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Initial bearing from `a` to `b`, degrees clockwise from north in `[0, 360)`.
pub fn initial_bearing_deg(a: GeoPoint, b: GeoPoint) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlam = (b.lon - a.lon).to_radians();
    let y = dlam.sin() * p2.cos();
    let x = p1.cos() * p2.sin() - p1.sin() * p2.cos() * dlam.cos();
    let deg = y.atan2(x).to_degrees().rem_euclid(360.0);
    if deg >= 360.0 {
        0.0
    } else {
        deg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: String,
    pub location: GeoPoint,
}

/// Stations in index order; ids are unique and coordinates valid.
#[derive(Debug, Clone, PartialEq)]
pub struct StationSet {
    stations: Vec<Station>,
    by_id: HashMap<String, usize>,
}

impl StationSet {
    pub fn new(stations: Vec<Station>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(stations.len());
        for (i, s) in stations.iter().enumerate() {
            s.location.validate()?;
            if by_id.insert(s.id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate station id {:?}", s.id)));
            }
        }
        Ok(StationSet { stations, by_id })
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }

    pub fn get(&self, i: usize) -> &Station {
        &self.stations[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Station> {
        self.stations.iter()
    }

    pub fn locations(&self) -> Vec<GeoPoint> {
        self.stations.iter().map(|s| s.location).collect()
    }

    /// This set followed by `extra` stations (used for grid pseudo-nodes).
    pub fn extended(&self, extra: Vec<Station>) -> Result<StationSet> {
        let mut all = self.stations.clone();
        all.extend(extra);
        StationSet::new(all)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    #[default]
    StaticNorth,
    WindAligned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DartboardSpec {
    /// Outer radius per attention head.
    pub radii_km: Vec<f64>,
    pub ring_fractions: Vec<f64>,
    pub sectors: usize,
    pub orientation: Orientation,
}

impl Default for DartboardSpec {
    fn default() -> Self {
        DartboardSpec {
            radii_km: vec![50.0, 200.0],
            ring_fractions: vec![0.5, 1.0],
            sectors: 8,
            orientation: Orientation::StaticNorth,
        }
    }
}

impl DartboardSpec {
    pub fn validate(&self) -> Result<()> {
        if self.radii_km.is_empty() || self.radii_km.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::Config("dartboard radii must be positive".into()));
        }
        if self.sectors == 0 {
            return Err(Error::Config("dartboard needs at least one sector".into()));
        }
        let f = &self.ring_fractions;
        if f.is_empty()
            || f[0] <= 0.0
            || f.windows(2).any(|w| w[1] <= w[0])
            || *f.last().unwrap() != 1.0
        {
            return Err(Error::Config(format!(
                "ring fractions must be positive, strictly increasing and end at 1.0: {f:?}"
            )));
        }
        Ok(())
    }

    pub fn heads(&self) -> usize {
        self.radii_km.len()
    }

    /// Regions per node, `G = rings * sectors`.
    pub fn regions(&self) -> usize {
        self.ring_fractions.len() * self.sectors
    }
}

/// Region membership for every node under one orientation, in CSR layout.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionIndex {
    regions: usize,
    offsets: Vec<usize>,
    members: Vec<u32>,
}

impl RegionIndex {
    /// Station indices (ascending) in region `r` of node `i`.
    pub fn members(&self, i: usize, r: usize) -> &[u32] {
        let k = i * self.regions + r;
        &self.members[self.offsets[k]..self.offsets[k + 1]]
    }

    pub fn count(&self, i: usize, r: usize) -> usize {
        self.members(i, r).len()
    }

    /// Region holding `j` in node `i`'s dartboard, if any.
    pub fn region_of(&self, i: usize, j: usize) -> Option<usize> {
        (0..self.regions).find(|&r| self.members(i, r).binary_search(&(j as u32)).is_ok())
    }

    /// The dense 0/1 matrix `M_i` (`G x N`).
    pub fn dense_matrix(&self, i: usize, n: usize) -> Tensor {
        let mut m = Tensor::zeros(&[self.regions, n]);
        for r in 0..self.regions {
            for &j in self.members(i, r) {
                m.data_mut()[r * n + j as usize] = 1.0;
            }
        }
        m
    }

    pub fn nnz(&self) -> usize {
        self.members.len()
    }
}

/// Projections of one attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadProjection {
    radius_km: f64,
    nodes: usize,
    regions: usize,
    orientations: Vec<RegionIndex>,
}

impl HeadProjection {
    pub fn radius_km(&self) -> f64 {
        self.radius_km
    }

    pub fn node_count(&self) -> usize {
        self.nodes
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn is_wind_aligned(&self) -> bool {
        self.orientations.len() > 1
    }

    /// Region index for a wind code; static projections ignore the code.
    pub fn orientation(&self, code: u8) -> &RegionIndex {
        &self.orientations[code as usize % self.orientations.len()]
    }
}

/// Per-head dartboard projections for a station set.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    spec: DartboardSpec,
    heads: Vec<Arc<HeadProjection>>,
}

impl ProjectionSet {
    pub fn spec(&self) -> &DartboardSpec {
        &self.spec
    }

    pub fn heads(&self) -> &[Arc<HeadProjection>] {
        &self.heads
    }

    pub fn node_count(&self) -> usize {
        self.heads.first().map_or(0, |h| h.nodes)
    }

    /// `R_i = M_i F` with count normalization: region rows are member means,
    /// empty regions are zero rows.
    pub fn project_regions(
        &self,
        head: usize,
        features: &Tensor,
        node: usize,
        wind_code: u8,
    ) -> Result<Tensor> {
        let h = self
            .heads
            .get(head)
            .ok_or_else(|| Error::Usage(format!("no head {head}")))?;
        if features.rank() != 2 || features.shape()[0] != h.nodes || features.is_complex() {
            return Err(Error::Dimension(format!(
                "features must be real [{}, C], got {:?}",
                h.nodes,
                features.shape()
            )));
        }
        if node >= h.nodes {
            return Err(Error::Usage(format!("node {node} out of range")));
        }
        let c = features.shape()[1];
        let idx = h.orientation(wind_code);
        let mut out = Tensor::zeros(&[h.regions, c]);
        for r in 0..h.regions {
            let members = idx.members(node, r);
            if members.is_empty() {
                continue;
            }
            let row = &mut out.data_mut()[r * c..(r + 1) * c];
            for &j in members {
                for (o, v) in row.iter_mut().zip(&features.data()[j as usize * c..][..c]) {
                    *o += v;
                }
            }
            let inv = 1.0 / members.len() as f64;
            row.iter_mut().for_each(|o| *o *= inv);
        }
        Ok(out)
    }
}

struct Neighbour {
    index: u32,
    distance_km: f64,
    bearing_deg: f64,
}

/// Sector for a bearing under an orientation azimuth.
fn sector_of(bearing: f64, azimuth: f64, sectors: usize) -> usize {
    let width = 360.0 / sectors as f64;
    let shift = azimuth / width;
    if shift.fract() == 0.0 {
        // Whole-sector rotations permute the unrotated sectors exactly.
        let base = sector_of_rel((bearing + width / 2.0).rem_euclid(360.0), width, sectors);
        let m = (shift as i64).rem_euclid(sectors as i64) as usize;
        (base + sectors - m) % sectors
    } else {
        sector_of_rel((bearing - azimuth + width / 2.0).rem_euclid(360.0), width, sectors)
    }
}

fn sector_of_rel(rel: f64, width: f64, sectors: usize) -> usize {
    ((rel / width).floor() as usize).min(sectors - 1)
}

fn ring_of(d: f64, radius: f64, fractions: &[f64]) -> Option<usize> {
    fractions.iter().position(|f| d < f * radius)
}

/// Bins every station's in-range neighbours into dartboard regions.
pub fn build_projection(stations: &StationSet, spec: &DartboardSpec) -> Result<ProjectionSet> {
    spec.validate()?;
    let n = stations.len();
    if n == 0 {
        return Err(Error::Usage("projection needs at least one station".into()));
    }
    let locs = stations.locations();
    let max_r = spec.radii_km.iter().copied().fold(0.0, f64::max);
    let neighbours: Vec<Vec<Neighbour>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .filter_map(|j| {
                    let d = distance_km(locs[i], locs[j]);
                    (d < max_r).then(|| Neighbour {
                        index: j as u32,
                        distance_km: d,
                        bearing_deg: initial_bearing_deg(locs[i], locs[j]),
                    })
                })
                .collect()
        })
        .collect();

    let azimuths: Vec<f64> = match spec.orientation {
        Orientation::StaticNorth => vec![0.0],
        Orientation::WindAligned => (0..WIND_CODES).map(|c| c as f64 * 45.0).collect(),
    };
    let g = spec.regions();
    let heads = spec
        .radii_km
        .iter()
        .map(|&radius| {
            let orientations = azimuths
                .iter()
                .map(|&az| {
                    let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); n * g];
                    for (i, list) in neighbours.iter().enumerate() {
                        for nb in list {
                            let Some(ring) = ring_of(nb.distance_km, radius, &spec.ring_fractions)
                            else {
                                continue;
                            };
                            let sector = sector_of(nb.bearing_deg, az, spec.sectors);
                            buckets[i * g + ring * spec.sectors + sector].push(nb.index);
                        }
                    }
                    let mut offsets = Vec::with_capacity(n * g + 1);
                    let mut members = Vec::new();
                    offsets.push(0);
                    for b in buckets {
                        members.extend(b);
                        offsets.push(members.len());
                    }
                    RegionIndex {
                        regions: g,
                        offsets,
                        members,
                    }
                })
                .collect();
            Arc::new(HeadProjection {
                radius_km: radius,
                nodes: n,
                regions: g,
                orientations,
            })
        })
        .collect();
    Ok(ProjectionSet {
        spec: spec.clone(),
        heads,
    })
}
