//! Reference spatial interpolators: k-nearest neighbours and inverse
//! distance weighting.

use log::warn;

use crate::error::{Error, Result};
use crate::geo::{distance_km, GeoPoint};

/// Distances below this count as the same place for IDW.
pub const EXACT_HIT_KM: f64 = 1e-9;

fn check(observed: &[GeoPoint], values: &[f64], targets: &[GeoPoint]) -> Result<()> {
    if observed.len() != values.len() {
        return Err(Error::Dimension(format!(
            "{} observed locations but {} values",
            observed.len(),
            values.len()
        )));
    }
    if observed.is_empty() {
        return Err(Error::Usage("interpolation needs at least one observed station".into()));
    }
    for p in observed.iter().chain(targets) {
        p.validate()?;
    }
    Ok(())
}

/// Mean of the `k` nearest observed values by great-circle distance; equal
/// distances are broken by observed index. `k` above the observed count is
/// clamped.
pub fn knn_infer(observed: &[GeoPoint], values: &[f64], targets: &[GeoPoint], k: usize) -> Result<Vec<f64>> {
    check(observed, values, targets)?;
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let k = if k > observed.len() {
        warn!("k = {k} exceeds {} observed stations; using all of them", observed.len());
        observed.len()
    } else {
        k
    };
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(observed.len());
    Ok(targets
        .iter()
        .map(|&t| {
            order.clear();
            order.extend(observed.iter().enumerate().map(|(j, &o)| (distance_km(t, o), j)));
            if k < order.len() {
                order.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            }
            order[..k].iter().map(|&(_, j)| values[j]).sum::<f64>() / k as f64
        })
        .collect())
}

/// `Σ w_j v_j / Σ w_j` with `w_j = d_j^-power`; a target on top of an
/// observed station takes that station's value.
///
/// The sum is taken relative to the first value so constant fields come back
/// exactly.
pub fn idw_infer(observed: &[GeoPoint], values: &[f64], targets: &[GeoPoint], power: f64) -> Result<Vec<f64>> {
    check(observed, values, targets)?;
    if !(power > 0.0) || !power.is_finite() {
        return Err(Error::Config(format!("IDW power must be positive, got {power}")));
    }
    let base = values[0];
    Ok(targets
        .iter()
        .map(|&t| {
            let (mut num, mut den) = (0.0, 0.0);
            for (&o, &v) in observed.iter().zip(values) {
                let d = distance_km(t, o);
                if d < EXACT_HIT_KM {
                    return v;
                }
                let w = d.powf(-power);
                num += w * (v - base);
                den += w;
            }
            base + num / den
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    #[test]
    fn colocated_target_takes_the_station_value() {
        let obs = [pt(30.0, 110.0), pt(31.0, 111.0)];
        let vals = [4.0, 9.0];
        assert_eq!(knn_infer(&obs, &vals, &[pt(31.0, 111.0)], 1).unwrap(), vec![9.0]);
        assert_eq!(idw_infer(&obs, &vals, &[pt(31.0, 111.0)], 2.0).unwrap(), vec![9.0]);
    }

    #[test]
    fn constant_fields_stay_constant() {
        let obs = [pt(30.0, 110.0), pt(31.0, 111.0), pt(29.0, 112.0)];
        let t = [pt(30.5, 110.5), pt(20.0, 100.0)];
        assert_eq!(knn_infer(&obs, &[7.0; 3], &t, 2).unwrap(), vec![7.0, 7.0]);
        let idw = idw_infer(&obs[..1], &[7.0], &t, 2.0).unwrap();
        assert_eq!(idw, vec![7.0, 7.0]);
    }

    #[test]
    fn equidistant_idw_is_the_midpoint() {
        let obs = [pt(0.0, -1.0), pt(0.0, 1.0)];
        let v = idw_infer(&obs, &[0.0, 10.0], &[pt(0.0, 0.0)], 2.0).unwrap();
        assert!((v[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn ties_go_to_the_lower_index_and_k_is_clamped() {
        let obs = [pt(0.0, -1.0), pt(0.0, 1.0), pt(1.0, 0.0)];
        let v = knn_infer(&obs, &[1.0, 2.0, 3.0], &[pt(0.0, 0.0)], 1).unwrap();
        assert_eq!(v, vec![1.0]);
        let v = knn_infer(&obs, &[1.0, 2.0, 3.0], &[pt(0.0, 0.0)], 10).unwrap();
        assert_eq!(v, vec![2.0]);
    }

    #[test]
    fn bad_inputs() {
        assert!(knn_infer(&[], &[], &[pt(0.0, 0.0)], 1).is_err());
        assert!(idw_infer(&[pt(0.0, 0.0)], &[1.0, 2.0], &[], 2.0).is_err());
        assert!(knn_infer(&[pt(0.0, 0.0)], &[1.0], &[], 0).is_err());
    }
}
