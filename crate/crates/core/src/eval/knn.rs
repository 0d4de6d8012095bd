use super::EmbeddingMatrix;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct KnnResult {
    pub predictions: Vec<usize>,
    /// Present when the test set carries labels.
    pub accuracy: Option<f64>,
}

/// Nearest-neighbour classification under Euclidean distance.
///
/// Ties go to the reference point with the lowest index.
pub fn knn1(train: &EmbeddingMatrix, test: &EmbeddingMatrix) -> Result<KnnResult> {
    if train.rows == 0 {
        return Err(Error::Config("empty reference set".into()));
    }
    if train.dim != test.dim {
        return Err(Error::shape("knn1", format!("dims {} vs {}", train.dim, test.dim)));
    }
    let labels = train.labels()?;
    let predictions: Vec<usize> = (0..test.rows)
        .map(|i| {
            let q = test.row(i);
            let mut best = (f64::INFINITY, 0);
            for r in 0..train.rows {
                let d: f64 = train.row(r).iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, r);
                }
            }
            labels[best.1]
        })
        .collect();
    let accuracy = test.labels.as_ref().map(|truth| {
        let hits = predictions.iter().zip(truth).filter(|(p, t)| p == t).count();
        hits as f64 / truth.len() as f64
    });
    Ok(KnnResult { predictions, accuracy })
}
