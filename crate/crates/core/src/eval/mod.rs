//! Frozen-backbone evaluation protocols.

mod cluster;
mod knn;
mod metrics;
mod probe;
mod subsample;

pub use cluster::{kmeans, KMeansResult};
pub use knn::{knn1, KnnResult};
pub use metrics::{ari, nmi};
pub use probe::{linear_probe, ProbeConfig};
pub use subsample::{subsample_fraction, subsample_per_class};

use std::fmt::Write as _;

use crate::data::TimeSeriesBatch;
use crate::encoder::{encode, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `N×F` embeddings with optional aligned labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: usize,
    pub dim: usize,
    pub values: Vec<f64>,
    pub labels: Option<Vec<usize>>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, values: Vec<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        if rows == 0 || dim == 0 || values.len() != rows * dim {
            return Err(Error::shape(
                "embeddings",
                format!("{} values for {rows}×{dim}", values.len()),
            ));
        }
        if labels.as_ref().is_some_and(|l| l.len() != rows) {
            return Err(Error::shape("embeddings", "label count differs from row count"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerics("embedding contains non-finite values".into()));
        }
        Ok(Self {
            rows,
            dim,
            values,
            labels,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Config("embeddings carry no labels".into()))
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            dim: self.dim,
            values,
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Header `f0,…,f{F-1},label`; unlabeled rows write `-1`. Values use the
    /// shortest representation that parses back to the same `f64`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for j in 0..self.dim {
            let _ = write!(out, "f{j},");
        }
        out.push_str("label\n");
        for i in 0..self.rows {
            for v in self.row(i) {
                let _ = write!(out, "{v:?},");
            }
            match &self.labels {
                Some(l) => {
                    let _ = writeln!(out, "{}", l[i]);
                }
                None => out.push_str("-1\n"),
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("empty embedding file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let dim = cols.len().saturating_sub(1);
        let header_ok = dim > 0
            && cols[dim] == "label"
            && cols[..dim].iter().enumerate().all(|(j, c)| *c == format!("f{j}"));
        if !header_ok {
            return Err(Error::Format("embedding header must be f0,…,f{F-1},label".into()));
        }
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for (n, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != dim + 1 {
                return Err(Error::Format(format!("row {}: {} fields, expected {}", n + 1, fields.len(), dim + 1)));
            }
            for f in &fields[..dim] {
                values.push(
                    f.parse::<f64>()
                        .map_err(|_| Error::Format(format!("row {}: bad value {f:?}", n + 1)))?,
                );
            }
            labels.push(
                fields[dim]
                    .parse::<i64>()
                    .map_err(|_| Error::Format(format!("row {}: bad label {:?}", n + 1, fields[dim])))?,
            );
        }
        let rows = labels.len();
        let labels = if labels.iter().all(|&l| l < 0) {
            None
        } else if labels.iter().any(|&l| l < 0) {
            return Err(Error::Format("mixed labeled and unlabeled rows".into()));
        } else {
            Some(labels.into_iter().map(|l| l as usize).collect())
        };
        Self::new(rows, dim, values, labels).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Encodes every whole window (no sub-blocks, no projection head).
pub fn embed_windows(dataset: &TimeSeriesBatch, params: &ModelParams) -> Result<EmbeddingMatrix> {
    let (n, t, d) = (dataset.len(), dataset.window_len(), dataset.channels());
    let input = Tensor::new(&[n, t, d], dataset.values().iter().map(|&v| f64::from(v)).collect())?;
    let z = encode(&input, params)?;
    EmbeddingMatrix::new(n, params.embed_dim(), z.into_data(), dataset.labels().map(<[usize]>::to_vec))
}

/// Per-feature mean and standard deviation of a training set.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const MIN_STD: f64 = 1e-12;

impl Standardizer {
    pub fn fit(train: &EmbeddingMatrix) -> Self {
        let (n, f) = (train.rows as f64, train.dim);
        let mut mean = vec![0.0; f];
        for i in 0..train.rows {
            for (m, v) in mean.iter_mut().zip(train.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; f];
        for i in 0..train.rows {
            for ((s, v), m) in var.iter_mut().zip(train.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
        Self { mean, std }
    }

    /// Features whose training std is below `1e-12` map to zero.
    pub fn apply(&self, emb: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        if emb.dim != self.mean.len() {
            return Err(Error::shape(
                "standardize",
                format!("{} features vs {} fitted", emb.dim, self.mean.len()),
            ));
        }
        let mut out = emb.clone();
        for row in out.values.chunks_mut(emb.dim) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = if *s < MIN_STD { 0.0 } else { (*v - m) / s };
            }
        }
        Ok(out)
    }
}

/// Standardizes `train` and `other` with statistics of `train` alone.
pub fn standardize(
    train: &EmbeddingMatrix,
    other: &EmbeddingMatrix,
) -> Result<(EmbeddingMatrix, EmbeddingMatrix, Standardizer)> {
    let stats = Standardizer::fit(train);
    Ok((stats.apply(train)?, stats.apply(other)?, stats))
}

/// Which run an evaluation row belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedTag {
    Seed(u64),
    /// Mean over the seeded rows of the same task and metric.
    Mean,
    /// A protocol with no randomness.
    Fixed,
}

impl std::fmt::Display for SeedTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SeedTag::Seed(s) => write!(f, "{s}"),
            SeedTag::Mean => f.write_str("mean"),
            SeedTag::Fixed => f.write_str("-"),
        }
    }
}

/// One evaluation result row.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub seed: SeedTag,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    pub fn push(&mut self, task: &str, metric: &str, value: f64, seed: SeedTag) {
        self.records.push(EvalRecord {
            task: task.into(),
            metric: metric.into(),
            value,
            seed,
        });
    }

    /// Appends a `mean` row for every (task, metric) that has seeded rows.
    pub fn push_means(&mut self) {
        let seeded = |r: &EvalRecord| matches!(r.seed, SeedTag::Seed(_));
        let mut keys: Vec<(String, String)> = Vec::new();
        for r in self.records.iter().filter(|r| seeded(r)) {
            let key = (r.task.clone(), r.metric.clone());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        for (task, metric) in keys {
            let vals: Vec<f64> = self
                .records
                .iter()
                .filter(|r| seeded(r) && r.task == task && r.metric == metric)
                .map(|r| r.value)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            self.push(&task, &metric, mean, SeedTag::Mean);
        }
    }

    pub fn mean_of(&self, task: &str, metric: &str) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.seed == SeedTag::Mean && r.task == task && r.metric == metric)
            .map(|r| r.value)
    }

    /// `task,metric,value,seed`; the seed column holds the seed, `mean`, or
    /// `-` for deterministic protocols.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,metric,value,seed\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{:.6},{}", r.task, r.metric, r.value, r.seed);
        }
        out
    }
}
