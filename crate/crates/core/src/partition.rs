//! Sub-block planning and extraction.
//!
//! A window of `T` timesteps is cut into `k` overlapping sub-blocks of even
//! length `L` taken every `s` timesteps:
//!
//! ```text
//! L = T / (1 + (k - 1)(1 - rho))      then rounded to the nearest even integer
//! s = round(L (1 - rho))
//! k = floor((T - L) / s) + 1          effective count after rounding
//! ```
//!
//! Rounding is half-away-from-zero. Timesteps past `L + (k - 1) s` are not
//! covered by any block.

use rand::Rng;

use crate::data::TimeSeriesBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the requested number of sub-blocks is chosen each iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMode {
    Fixed(usize),
    /// Uniform over the inclusive range `min..=max`.
    Uniform { min: usize, max: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartitionParams {
    pub rho: f64,
    pub split: SplitMode,
}

impl Default for PartitionParams {
    fn default() -> Self {
        Self {
            rho: 0.5,
            split: SplitMode::Uniform { min: 2, max: 10 },
        }
    }
}

impl PartitionParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!("overlap ratio {} outside [0, 1)", self.rho)));
        }
        match self.split {
            SplitMode::Fixed(k) if k < 2 => Err(Error::Config(format!("fixed k={k} must be >= 2"))),
            SplitMode::Uniform { min, max } if min < 2 || min > max => Err(Error::Config(format!(
                "uniform split range {min}..={max} needs 2 <= min <= max"
            ))),
            _ => Ok(()),
        }
    }

    /// Requested sub-block count for one iteration.
    pub fn sample_k<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match self.split {
            SplitMode::Fixed(k) => k,
            SplitMode::Uniform { min, max } => rng.gen_range(min..=max),
        }
    }
}

/// Resolved geometry of the sub-blocks for a window length.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartitionPlan {
    /// Window length.
    pub t: usize,
    /// Effective number of sub-blocks.
    pub k: usize,
    /// Sub-block length (even).
    pub len: usize,
    pub stride: usize,
}

impl PartitionPlan {
    /// Half-open timestep range `[start, end)` of sub-block `j`.
    pub fn block_range(&self, j: usize) -> (usize, usize) {
        (j * self.stride, j * self.stride + self.len)
    }

    /// Number of leading timesteps covered by at least one block.
    pub fn covered(&self) -> usize {
        self.len + (self.k - 1) * self.stride
    }
}

fn round_half_away(x: f64) -> f64 {
    x.round()
}

pub fn plan_partition(t: usize, k_requested: usize, rho: f64) -> Result<PartitionPlan> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Config(format!("overlap ratio {rho} outside [0, 1)")));
    }
    if k_requested < 2 {
        return Err(Error::InvalidPartition(format!("need k >= 2, got {k_requested}")));
    }
    if t < 4 {
        return Err(Error::InvalidPartition(format!("window length {t} is below 4")));
    }
    let raw = t as f64 / (1.0 + (k_requested - 1) as f64 * (1.0 - rho));
    let len = 2.0 * round_half_away(raw / 2.0);
    if len < 2.0 {
        return Err(Error::InvalidPartition(format!(
            "window too short for requested k: T={t} k={k_requested} gives L={len}"
        )));
    }
    let len = len as usize;
    if len > t {
        return Err(Error::InvalidPartition(format!("sub-block length {len} exceeds T={t}")));
    }
    let stride = round_half_away(len as f64 * (1.0 - rho));
    if stride < 1.0 {
        return Err(Error::InvalidPartition(format!(
            "overlap too large: L={len} rho={rho} gives stride 0"
        )));
    }
    let stride = stride as usize;
    let k = (t - len) / stride + 1;
    if k < 2 {
        return Err(Error::InvalidPartition(format!(
            "only {k} sub-block fits (T={t} L={len} s={stride})"
        )));
    }
    Ok(PartitionPlan { t, k, len, stride })
}

/// Sub-blocks of every window in a batch, `B×k×L×D`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubBlockSet {
    pub values: Tensor,
    pub plan: PartitionPlan,
}

impl SubBlockSet {
    pub fn instances(&self) -> usize {
        self.values.shape()[0]
    }

    /// Flattens to `(B·k)×L×D`, the layout the encoder consumes.
    pub fn into_encoder_input(self) -> Tensor {
        let s = self.values.shape().to_vec();
        self.values
            .reshape(&[s[0] * s[1], s[2], s[3]])
            .expect("element count is preserved")
    }
}

pub fn extract_subblocks(batch: &TimeSeriesBatch, plan: &PartitionPlan) -> Result<SubBlockSet> {
    if batch.window_len() != plan.t {
        return Err(Error::shape(
            "extract_subblocks",
            format!("plan is for T={}, batch has T={}", plan.t, batch.window_len()),
        ));
    }
    let (b, d) = (batch.len(), batch.channels());
    let block = plan.len * d;
    let mut values = Vec::with_capacity(b * plan.k * block);
    for i in 0..b {
        let w = batch.window(i);
        for j in 0..plan.k {
            let start = j * plan.stride * d;
            values.extend(w[start..start + block].iter().map(|&v| f64::from(v)));
        }
    }
    Ok(SubBlockSet {
        values: Tensor::new(&[b, plan.k, plan.len, d], values)?,
        plan: *plan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plan(t: usize, k: usize, rho: f64) -> (usize, usize, usize) {
        let p = plan_partition(t, k, rho).unwrap();
        (p.len, p.stride, p.k)
    }

    #[test]
    fn worked_examples() {
        assert_eq!(plan(100, 10, 0.5), (18, 9, 10));
        assert_eq!(plan(100, 10, 0.0), (10, 10, 10));
        assert_eq!(plan(31, 2, 0.5), (20, 10, 2));
        let p = plan_partition(50, 4, 0.5).unwrap();
        assert_eq!((p.len, p.stride, p.k), (20, 10, 4));
        assert_eq!(p.covered(), 50);
        assert_eq!(plan_partition(31, 2, 0.5).unwrap().covered(), 30);
    }

    #[test]
    fn errors() {
        assert!(matches!(plan_partition(3, 2, 0.5), Err(Error::InvalidPartition(_))));
        assert!(matches!(plan_partition(10, 1, 0.5), Err(Error::InvalidPartition(_))));
        assert!(matches!(plan_partition(10, 2, 1.0), Err(Error::Config(_))));
        assert!(matches!(plan_partition(10, 2, -0.1), Err(Error::Config(_))));
        // L rounds to 0
        assert!(matches!(plan_partition(8, 10, 0.0), Err(Error::InvalidPartition(m)) if m.contains("too short")));
        // L=2 with rho=0.9 has stride round(0.2) = 0
        assert!(matches!(plan_partition(4, 10, 0.9), Err(Error::InvalidPartition(m)) if m.contains("overlap")));
    }

    #[test]
    fn sample_k_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fixed = PartitionParams {
            rho: 0.5,
            split: SplitMode::Fixed(10),
        };
        assert_eq!(fixed.sample_k(&mut rng), 10);
        let degenerate = PartitionParams {
            rho: 0.5,
            split: SplitMode::Uniform { min: 2, max: 2 },
        };
        assert!((0..100).all(|_| degenerate.sample_k(&mut rng) == 2));
    }

    #[test]
    fn sample_k_is_uniform() {
        let params = PartitionParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 11];
        let draws = 100_000;
        for _ in 0..draws {
            counts[params.sample_k(&mut rng)] += 1;
        }
        assert_eq!(counts[0] + counts[1], 0);
        for &c in &counts[2..] {
            let freq = c as f64 / draws as f64;
            assert!((freq - 1.0 / 9.0).abs() < 0.01, "{freq}");
        }
        // chi-square with 8 dof; 26.1 is the 0.999 quantile
        let expected = draws as f64 / 9.0;
        let chi2: f64 = counts[2..].iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 26.1, "{chi2}");
    }

    #[test]
    fn params_validation() {
        assert!(PartitionParams::default().validate().is_ok());
        let bad = |rho, split| PartitionParams { rho, split }.validate().is_err();
        assert!(bad(1.0, SplitMode::Fixed(2)));
        assert!(bad(0.5, SplitMode::Fixed(1)));
        assert!(bad(0.5, SplitMode::Uniform { min: 1, max: 4 }));
        assert!(bad(0.5, SplitMode::Uniform { min: 5, max: 4 }));
    }

    #[test]
    fn extract_tiny() {
        let batch = TimeSeriesBatch::new(vec![0.0, 1.0, 2.0, 3.0], 1, 4, 1, None).unwrap();
        let plan = PartitionPlan {
            t: 4,
            k: 3,
            len: 2,
            stride: 1,
        };
        let set = extract_subblocks(&batch, &plan).unwrap();
        assert_eq!(set.values.shape(), &[1, 3, 2, 1]);
        assert_eq!(set.values.data(), &[0.0, 1.0, 1.0, 2.0, 2.0, 3.0]);
    }

    #[test]
    fn extract_rejects_mismatched_t() {
        let batch = TimeSeriesBatch::new(vec![0.0; 10], 1, 10, 1, None).unwrap();
        let plan = plan_partition(12, 2, 0.5).unwrap();
        assert!(matches!(extract_subblocks(&batch, &plan), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_overlap_is_disjoint_cover() {
        let batch = TimeSeriesBatch::new((0..40).map(|v| v as f32).collect(), 1, 40, 1, None).unwrap();
        let plan = plan_partition(40, 4, 0.0).unwrap();
        assert_eq!(plan.stride, plan.len);
        let set = extract_subblocks(&batch, &plan).unwrap();
        let flat: Vec<f64> = set.values.data().to_vec();
        let expected: Vec<f64> = (0..plan.k * plan.len).map(|v| v as f64).collect();
        assert_eq!(flat, expected);
    }

    proptest! {
        #[test]
        fn plan_invariants(t in 4usize..4000, k in 2usize..16, rho in 0.0f64..0.95) {
            if let Ok(p) = plan_partition(t, k, rho) {
                prop_assert_eq!(p.len % 2, 0);
                prop_assert!(p.len >= 2 && p.len <= t);
                prop_assert!(p.stride >= 1);
                prop_assert!(p.k >= 2);
                prop_assert!(p.covered() <= t);
                prop_assert_eq!(Some(p), plan_partition(t, k, rho).ok());
            }
        }

        #[test]
        fn half_overlap_shares_half(t in 8usize..2000, k in 2usize..11) {
            if let Ok(p) = plan_partition(t, k, 0.5) {
                prop_assert_eq!(p.len - p.stride, p.len / 2);
            }
        }

        #[test]
        fn blocks_match_naive_slices_and_reassemble(
            n in 1usize..4, t in 8usize..80, d in 1usize..4, k in 2usize..8,
            rho in prop::sample::select(vec![0.0, 0.25, 0.5, 0.75]),
            seed in any::<u64>(),
        ) {
            let Ok(plan) = plan_partition(t, k, rho) else { return Ok(()); };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values: Vec<f32> = (0..n * t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let batch = TimeSeriesBatch::new(values, n, t, d, None).unwrap();
            let set = extract_subblocks(&batch, &plan).unwrap();
            let data = set.values.data();
            for i in 0..n {
                for j in 0..plan.k {
                    for s in 0..plan.len {
                        for c in 0..d {
                            let got = data[((i * plan.k + j) * plan.len + s) * d + c];
                            prop_assert_eq!(got, f64::from(batch.at(i, j * plan.stride + s, c)));
                        }
                    }
                }
                // stitch blocks back together, taking each timestep from the first block containing it
                let mut rebuilt = Vec::new();
                for j in 0..plan.k {
                    for s in 0..plan.len {
                        if j * plan.stride + s == rebuilt.len() / d {
                            for c in 0..d {
                                rebuilt.push(data[((i * plan.k + j) * plan.len + s) * d + c]);
                            }
                        }
                    }
                }
                let source: Vec<f64> = batch.window(i)[..plan.covered() * d].iter().map(|&v| f64::from(v)).collect();
                prop_assert_eq!(rebuilt, source);
            }
        }
    }
}
