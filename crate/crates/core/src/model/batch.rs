use super::config::{WEATHER_VOCAB, WIND_VOCAB};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// A batch of snapshots ready for the network.
///
/// Continuous channels are already normalized. `mask[b * N + i]` marks node
/// `i` of sample `b` as a target whose inputs the model must not see.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotBatch {
    /// `[B, N, Dc]`
    pub current: Tensor,
    /// `[B, N]`
    pub weather: Vec<u8>,
    pub wind: Vec<u8>,
    /// `[B, N, T, Dc]`
    pub past: Tensor,
    /// `[B, N, T]`
    pub past_weather: Vec<u8>,
    pub past_wind: Vec<u8>,
    /// `[B, N]`
    pub mask: Vec<bool>,
}

impl SnapshotBatch {
    pub fn batch(&self) -> usize {
        self.current.shape().first().copied().unwrap_or(0)
    }

    pub fn nodes(&self) -> usize {
        self.current.shape().get(1).copied().unwrap_or(0)
    }

    pub fn continuous(&self) -> usize {
        self.current.shape().get(2).copied().unwrap_or(0)
    }

    pub fn history(&self) -> usize {
        self.past.shape().get(2).copied().unwrap_or(0)
    }

    /// Checks shapes, codes and values against the expected sizes.
    pub fn validate(&self, nodes: usize, continuous: usize, history: usize) -> Result<()> {
        let b = self.batch();
        let cur = self.current.shape();
        if self.current.is_complex() || cur.len() != 3 || cur[1] != nodes || cur[2] != continuous {
            return Err(Error::Dimension(format!(
                "current readings must be [B, {nodes}, {continuous}], got {cur:?}"
            )));
        }
        if b == 0 {
            return Err(Error::Usage("empty batch".into()));
        }
        let past = self.past.shape();
        if self.past.is_complex() || past != [b, nodes, history, continuous] {
            return Err(Error::Dimension(format!(
                "history must be [{b}, {nodes}, {history}, {continuous}], got {past:?}"
            )));
        }
        let lens = [
            ("weather codes", self.weather.len(), b * nodes),
            ("wind codes", self.wind.len(), b * nodes),
            ("past weather codes", self.past_weather.len(), b * nodes * history),
            ("past wind codes", self.past_wind.len(), b * nodes * history),
            ("mask", self.mask.len(), b * nodes),
        ];
        for (what, got, want) in lens {
            if got != want {
                return Err(Error::Dimension(format!("{what}: expected {want}, got {got}")));
            }
        }
        let bad_weather = self.weather.iter().chain(&self.past_weather).find(|&&c| c as usize >= WEATHER_VOCAB);
        if let Some(c) = bad_weather {
            return Err(Error::Validation(format!("weather code {c} outside 0..{WEATHER_VOCAB}")));
        }
        if let Some(c) = self.wind.iter().chain(&self.past_wind).find(|&&c| c as usize >= WIND_VOCAB) {
            return Err(Error::Validation(format!("wind code {c} outside 0..{WIND_VOCAB}")));
        }
        if !self.current.is_finite() || !self.past.is_finite() {
            return Err(Error::Validation("non-finite input reading".into()));
        }
        Ok(())
    }

    /// Orientation code per node for wind-aligned dartboards.
    ///
    /// Observed nodes use their own wind code. Targets take the most common
    /// code among the observed nodes of the same sample (ties to the smaller
    /// code), so a target's hidden reading never steers its own dartboard.
    pub fn orientation_codes(&self) -> Vec<u8> {
        let n = self.nodes();
        let mut out = Vec::with_capacity(self.wind.len());
        for (wind, mask) in self.wind.chunks(n.max(1)).zip(self.mask.chunks(n.max(1))) {
            let mut counts = [0usize; WIND_VOCAB];
            for (&c, &m) in wind.iter().zip(mask) {
                if !m {
                    counts[c as usize] += 1;
                }
            }
            let mode = (0..WIND_VOCAB).fold(0, |best, c| if counts[c] > counts[best] { c } else { best }) as u8;
            out.extend(wind.iter().zip(mask).map(|(&c, &m)| if m { mode } else { c }));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(mask: Vec<bool>, wind: Vec<u8>) -> SnapshotBatch {
        let n = mask.len();
        SnapshotBatch {
            current: Tensor::zeros(&[1, n, 1]),
            weather: vec![0; n],
            wind,
            past: Tensor::zeros(&[1, n, 2, 1]),
            past_weather: vec![0; 2 * n],
            past_wind: vec![0; 2 * n],
            mask,
        }
    }

    #[test]
    fn targets_take_the_observed_mode() {
        let b = toy(vec![false, false, false, true], vec![3, 3, 5, 7]);
        assert_eq!(b.orientation_codes(), vec![3, 3, 5, 3]);
        b.validate(4, 1, 2).unwrap();
    }

    #[test]
    fn validation_names_the_problem() {
        let b = toy(vec![false, true], vec![0, 9]);
        let err = b.validate(2, 1, 2).unwrap_err().to_string();
        assert!(err.contains("wind code 9"), "{err}");
        assert!(b.validate(3, 1, 2).is_err());
    }
}
