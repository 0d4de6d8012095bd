//! Time-series containers, file formats and the synthetic generator.

mod binary;
mod synthetic;
mod ucr;

pub use binary::{load_binary, read_binary, save_binary, write_binary, DATA_MAGIC};
pub use synthetic::{gen_synthetic, SyntheticSpec};
pub use ucr::{load_ucr_tsv, parse_ucr};

use crate::error::{Error, Result};

/// `n` windows of `t` timesteps and `d` channels, with optional labels.
///
/// Values are stored instance-major, then time, then channel. Labels, when
/// present, are dense in `0..n_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesBatch {
    values: Vec<f32>,
    n: usize,
    t: usize,
    d: usize,
    labels: Option<Vec<usize>>,
    n_classes: usize,
}

impl TimeSeriesBatch {
    pub fn new(
        values: Vec<f32>,
        n: usize,
        t: usize,
        d: usize,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if n == 0 || t == 0 || d == 0 {
            return Err(Error::shape("batch", format!("empty extents n={n} t={t} d={d}")));
        }
        if values.len() != n * t * d {
            return Err(Error::shape(
                "batch",
                format!("{} values for n={n} t={t} d={d}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite value in series".into()));
        }
        let n_classes = match &labels {
            Some(l) => {
                if l.len() != n {
                    return Err(Error::shape("batch", format!("{} labels for {n} windows", l.len())));
                }
                l.iter().max().map_or(0, |m| m + 1)
            }
            None => 0,
        };
        Ok(Self {
            values,
            n,
            t,
            d,
            labels,
            n_classes,
        })
    }

    /// Number of windows.
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn window_len(&self) -> usize {
        self.t
    }

    pub fn channels(&self) -> usize {
        self.d
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// The `T×D` slice of window `i`.
    pub fn window(&self, i: usize) -> &[f32] {
        let w = self.t * self.d;
        &self.values[i * w..(i + 1) * w]
    }

    /// Value of window `i` at timestep `t`, channel `d`.
    pub fn at(&self, i: usize, t: usize, d: usize) -> f32 {
        self.values[(i * self.t + t) * self.d + d]
    }

    /// Copies the given windows (repeats allowed) into a new batch.
    pub fn gather(&self, indices: &[usize]) -> Result<Self> {
        let w = self.t * self.d;
        let mut values = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            if i >= self.n {
                return Err(Error::Config(format!("window index {i} out of range ({})", self.n)));
            }
            values.extend_from_slice(self.window(i));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        let mut out = Self::new(values, indices.len(), self.t, self.d, labels)?;
        out.n_classes = self.n_classes;
        Ok(out)
    }

    /// Keeps only the listed channels, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Config("channel selection is empty".into()));
        }
        if let Some(&bad) = channels.iter().find(|&&c| c >= self.d) {
            return Err(Error::Config(format!(
                "channel {bad} out of range for {} channels",
                self.d
            )));
        }
        let mut values = Vec::with_capacity(self.n * self.t * channels.len());
        for row in self.values.chunks(self.d) {
            values.extend(channels.iter().map(|&c| row[c]));
        }
        let mut out = Self::new(values, self.n, self.t, channels.len(), self.labels.clone())?;
        out.n_classes = self.n_classes;
        Ok(out)
    }

    pub(crate) fn with_n_classes(mut self, n_classes: usize) -> Self {
        debug_assert!(self.n_classes <= n_classes);
        self.n_classes = n_classes;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> TimeSeriesBatch {
        let values = (0..2 * 3 * 4).map(|v| v as f32).collect();
        TimeSeriesBatch::new(values, 2, 3, 4, Some(vec![1, 0])).unwrap()
    }

    #[test]
    fn rejects_nan_and_bad_lengths() {
        assert!(matches!(
            TimeSeriesBatch::new(vec![f32::NAN], 1, 1, 1, None),
            Err(Error::Format(_))
        ));
        assert!(TimeSeriesBatch::new(vec![0.0; 3], 1, 2, 2, None).is_err());
        assert!(TimeSeriesBatch::new(vec![0.0; 4], 2, 2, 1, Some(vec![0])).is_err());
    }

    #[test]
    fn select_channels_keeps_order_and_values() {
        let b = toy();
        let s = b.select_channels(&[3, 1]).unwrap();
        assert_eq!(s.channels(), 2);
        for i in 0..2 {
            for t in 0..3 {
                assert_eq!(s.at(i, t, 0), b.at(i, t, 3));
                assert_eq!(s.at(i, t, 1), b.at(i, t, 1));
            }
        }
        assert_eq!(b.select_channels(&[0, 1, 2, 3]).unwrap(), b);
        assert!(matches!(b.select_channels(&[]), Err(Error::Config(_))));
        assert!(matches!(b.select_channels(&[4]), Err(Error::Config(_))));
    }

    #[test]
    fn pamap_style_subspace() {
        let (n, t, d) = (2, 5, 52);
        let values = (0..n * t * d).map(|v| v as f32).collect();
        let b = TimeSeriesBatch::new(values, n, t, d, None).unwrap();
        let s = b.select_channels(&[3, 4, 5]).unwrap();
        assert_eq!(s.channels(), 3);
        for i in 0..n {
            for tt in 0..t {
                for (j, c) in [3, 4, 5].into_iter().enumerate() {
                    assert_eq!(s.at(i, tt, j), b.at(i, tt, c));
                }
            }
        }
    }

    #[test]
    fn gather_repeats_windows() {
        let b = toy();
        let g = b.gather(&[1, 1, 0]).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g.window(0), b.window(1));
        assert_eq!(g.window(2), b.window(0));
        assert_eq!(g.labels().unwrap(), &[0, 0, 1]);
        assert_eq!(g.n_classes(), 2);
        assert!(b.gather(&[2]).is_err());
    }
}
