//! Sub-block contrastive objective.
//!
//! For every instance the `k` sub-block embeddings are compared with raw
//! dot products scaled by `1/tau`. Each row of the resulting `k×k` matrix is
//! a categorical distribution over sub-block positions, and the loss is the
//! cross-entropy against a target position (by default the preceding
//! sub-block, with the first block targeting itself), averaged over all
//! `B·k` anchors.
//!
//! Two routes are provided: closed-form functions on plain buffers (used
//! for verification and benchmarking) and [`loss_node`], which records the
//! same computation on an autodiff [`Graph`] for training.

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which sub-block is the positive for each anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PositiveMode {
    Preceding,
    Next,
    /// Mean of the preceding and next losses.
    Bidirectional,
    /// Preceding rule applied along a random permutation of the blocks.
    Shuffled,
}

impl std::str::FromStr for PositiveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "preceding" => Ok(Self::Preceding),
            "next" => Ok(Self::Next),
            "bidirectional" => Ok(Self::Bidirectional),
            "shuffled" => Ok(Self::Shuffled),
            other => Err(Error::Config(format!("unknown positive mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub positive_mode: PositiveMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            positive_mode: PositiveMode::Preceding,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive, got {tau}")))
    }
}

/// Per-instance `k×k` logits for a batch, stored `B×k×k`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityTensor<T = f64> {
    pub instances: usize,
    pub k: usize,
    pub logits: Vec<T>,
}

impl<T: Copy> SimilarityTensor<T> {
    pub fn get(&self, i: usize, j: usize, p: usize) -> T {
        self.logits[(i * self.k + j) * self.k + p]
    }

    fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.logits.chunks(self.k)
    }
}

/// Target position for every anchor `0..k`, shared across the batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetVector(pub Vec<usize>);

impl TargetVector {
    pub fn k(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// Repeats the vector once per instance, one entry per anchor row.
    pub fn tiled(&self, instances: usize) -> Vec<usize> {
        self.0.repeat(instances)
    }
}

/// Target vectors for `mode`. Bidirectional yields two vectors whose losses
/// are averaged; every other mode yields one.
pub fn targets<R: Rng + ?Sized>(
    k: usize,
    mode: PositiveMode,
    rng: Option<&mut R>,
) -> Result<Vec<TargetVector>> {
    if k < 2 {
        return Err(Error::Config(format!("targets need k >= 2, got {k}")));
    }
    let preceding = || TargetVector((0..k).map(|j| j.saturating_sub(1)).collect());
    let next = || TargetVector((0..k).map(|j| (j + 1).min(k - 1)).collect());
    Ok(match mode {
        PositiveMode::Preceding => vec![preceding()],
        PositiveMode::Next => vec![next()],
        PositiveMode::Bidirectional => vec![preceding(), next()],
        PositiveMode::Shuffled => {
            let rng = rng.ok_or_else(|| Error::Config("shuffled targets need an rng".into()))?;
            let mut order: Vec<usize> = (0..k).collect();
            order.shuffle(rng);
            let mut t = vec![0; k];
            t[order[0]] = order[0];
            for w in order.windows(2) {
                t[w[1]] = w[0];
            }
            vec![TargetVector(t)]
        }
    })
}

/// `S[i,j,p] = z[i,j] · z[i,p] / tau` on a flat `B×k×F` buffer.
pub fn similarity_raw<T: Float>(z: &[T], instances: usize, k: usize, f: usize, tau: T) -> Vec<T> {
    debug_assert_eq!(z.len(), instances * k * f);
    let inv = tau.recip();
    let mut out = vec![T::zero(); instances * k * k];
    for i in 0..instances {
        let zi = &z[i * k * f..(i + 1) * k * f];
        let si = &mut out[i * k * k..(i + 1) * k * k];
        for j in 0..k {
            let a = &zi[j * f..(j + 1) * f];
            for p in j..k {
                let b = &zi[p * f..(p + 1) * f];
                let dot = a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y) * inv;
                si[j * k + p] = dot;
                si[p * k + j] = dot;
            }
        }
    }
    out
}

/// Similarity of a `B×k×F` embedding tensor.
pub fn similarity(z: &Tensor, tau: f64) -> Result<SimilarityTensor> {
    check_tau(tau)?;
    let &[b, k, f] = z.shape() else {
        return Err(Error::shape("similarity", format!("expected B×k×F, got {:?}", z.shape())));
    };
    if !z.is_finite() {
        return Err(Error::Numerics("embeddings contain non-finite values".into()));
    }
    Ok(SimilarityTensor {
        instances: b,
        k,
        logits: similarity_raw(z.data(), b, k, f, tau),
    })
}

/// Mean over rows of `-log softmax(row)[target]`, with the row max
/// subtracted before exponentiating.
pub fn softmax_ce_rows<T: Float>(logits: &[T], k: usize, targets: &[usize]) -> T {
    let rows = logits.len() / k;
    let mut total = T::zero();
    for (r, row) in logits.chunks(k).enumerate() {
        let t = targets[r % targets.len()];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
        total = total + z.ln() + max - row[t];
    }
    total / T::from(rows).unwrap()
}

fn check_inputs(s: &SimilarityTensor, targets: &[TargetVector]) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::Config("no target vectors".into()));
    }
    for t in targets {
        if t.k() != s.k || t.0.iter().any(|&p| p >= s.k) {
            return Err(Error::shape(
                "dicot_loss",
                format!("target vector {:?} invalid for k={}", t.0, s.k),
            ));
        }
    }
    if s.logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerics("similarity logits are not finite".into()));
    }
    Ok(())
}

/// Loss for precomputed logits; with several target vectors the losses are
/// averaged.
pub fn dicot_loss(s: &SimilarityTensor, targets: &[TargetVector]) -> Result<f64> {
    check_inputs(s, targets)?;
    let sum: f64 = targets
        .iter()
        .map(|t| softmax_ce_rows(&s.logits, s.k, t.as_slice()))
        .sum();
    Ok(sum / targets.len() as f64)
}

/// Gradient of [`dicot_loss`] with respect to every logit: row softmax minus
/// the one-hot target, divided by `B·k` (and by the number of target
/// vectors).
pub fn dicot_loss_grad(s: &SimilarityTensor, targets: &[TargetVector]) -> Result<Vec<f64>> {
    check_inputs(s, targets)?;
    let k = s.k;
    let scale = 1.0 / ((s.instances * k) as f64 * targets.len() as f64);
    let mut grad = vec![0.0; s.logits.len()];
    for (r, (row, g)) in s.rows().zip(grad.chunks_mut(k)).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for tv in targets {
            for (p, (gp, &v)) in g.iter_mut().zip(row).enumerate() {
                let prob = (v - max).exp() / z;
                let onehot = if p == tv.0[r % k] { 1.0 } else { 0.0 };
                *gp += (prob - onehot) * scale;
            }
        }
    }
    Ok(grad)
}

/// Records the objective on `graph`.
///
/// `z` is the `(B·k)×F` embedding node, rows ordered instance-major.
pub fn loss_node(
    graph: &mut Graph,
    z: NodeId,
    instances: usize,
    k: usize,
    tau: f64,
    targets: &[TargetVector],
) -> Result<NodeId> {
    check_tau(tau)?;
    if targets.is_empty() {
        return Err(Error::Config("no target vectors".into()));
    }
    let f = *graph.value(z).shape().last().unwrap();
    let z3 = graph.reshape(z, &[instances, k, f])?;
    let s = graph.contract(z3, z3, 1.0 / tau)?;
    let mut total: Option<NodeId> = None;
    for t in targets {
        if t.k() != k {
            return Err(Error::shape("loss_node", format!("target vector for k={} used with k={k}", t.k())));
        }
        let ce = graph.softmax_ce(s, &t.tiled(instances))?;
        total = Some(match total {
            None => ce,
            Some(acc) => graph.add(acc, ce)?,
        });
    }
    let total = total.unwrap();
    Ok(if targets.len() > 1 {
        graph.scale(total, 1.0 / targets.len() as f64)
    } else {
        total
    })
}
