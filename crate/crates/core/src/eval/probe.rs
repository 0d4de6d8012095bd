use super::{standardize, EmbeddingMatrix};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::{adamw_step, OptimizerConfig, OptimizerState};

/// Multinomial logistic regression settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    /// L2 penalty `λ/2·‖W‖²` on the weights (not the bias).
    pub lambda: f64,
    pub lr: f64,
    pub iters: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            lr: 1e-2,
            iters: 500,
        }
    }
}

/// Trains a softmax classifier on standardized `train` embeddings with
/// full-batch Adam and returns accuracy on `test`.
pub fn linear_probe(train: &EmbeddingMatrix, test: &EmbeddingMatrix, cfg: &ProbeConfig) -> Result<f64> {
    let y = train.labels()?;
    let truth = test.labels()?;
    let n_classes = y.iter().max().map_or(0, |m| m + 1);
    let distinct = {
        let mut seen = vec![false; n_classes];
        y.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::Config("linear probe needs at least two classes".into()));
    }
    let (xs, xt, _) = standardize(train, test)?;
    let f = train.dim;
    let x_train = Tensor::new(&[xs.rows, f], xs.values)?;

    let opt = OptimizerConfig {
        base_lr: cfg.lr,
        weight_decay: 0.0,
        ..OptimizerConfig::default()
    };
    let mut weight = Tensor::zeros(&[n_classes, f]);
    let mut bias = Tensor::zeros(&[n_classes]);
    let mut state = OptimizerState::new([&weight, &bias]);
    for _ in 0..cfg.iters {
        let mut g = Graph::new();
        let x = g.constant(x_train.clone());
        let w = g.param(weight.clone());
        let b = g.param(bias.clone());
        let logits = g.dense(x, w)?;
        let logits = g.bias_add(logits, b)?;
        let loss = g.softmax_ce(logits, y)?;
        let mut grads = g.backward(loss)?;
        let mut gw = grads.take(w).unwrap();
        for (gv, wv) in gw.data_mut().iter_mut().zip(weight.data()) {
            *gv += cfg.lambda * wv;
        }
        let gb = grads.take(b).unwrap();
        adamw_step(&mut [&mut weight, &mut bias], &[gw, gb], &mut state, cfg.lr, &opt)?;
    }

    let mut hits = 0;
    for i in 0..xt.rows {
        let row = xt.row(i);
        let mut best = (f64::NEG_INFINITY, 0);
        for c in 0..n_classes {
            let w = &weight.data()[c * f..(c + 1) * f];
            let score = bias.data()[c] + w.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
            if score > best.0 {
                best = (score, c);
            }
        }
        if best.1 == truth[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / xt.rows as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blobs(n: usize, seed: u64, classes: usize) -> EmbeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % classes;
            let angle = c as f64 * std::f64::consts::TAU / classes as f64;
            values.push(4.0 * angle.cos() + rng.gen_range(-1.0..1.0));
            values.push(4.0 * angle.sin() + rng.gen_range(-1.0..1.0));
            labels.push(c);
        }
        EmbeddingMatrix::new(n, 2, values, Some(labels)).unwrap()
    }

    #[test]
    fn separable_blobs_are_solved() {
        let train = blobs(60, 1, 2);
        let test = blobs(40, 2, 2);
        assert_eq!(linear_probe(&train, &test, &ProbeConfig::default()).unwrap(), 1.0);
    }

    #[test]
    fn permuted_labels_give_chance_accuracy() {
        let classes = 3;
        let mut accs = Vec::new();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut train = blobs(150, seed, classes);
            let mut test = blobs(300, seed + 50, classes);
            for m in [&mut train, &mut test] {
                for l in m.labels.as_mut().unwrap() {
                    *l = rng.gen_range(0..classes);
                }
            }
            accs.push(linear_probe(&train, &test, &ProbeConfig::default()).unwrap());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 1.0 / classes as f64).abs() < 0.1, "{mean}");
    }

    #[test]
    fn invariant_to_affine_feature_rescaling() {
        let train = blobs(90, 3, 3);
        let test = blobs(90, 4, 3);
        let base = linear_probe(&train, &test, &ProbeConfig::default()).unwrap();
        let warp = |m: &EmbeddingMatrix| {
            let mut out = m.clone();
            for row in out.values.chunks_mut(2) {
                row[0] = 250.0 * row[0] - 3.0;
                row[1] = -0.01 * row[1] + 40.0;
            }
            out
        };
        let warped = linear_probe(&warp(&train), &warp(&test), &ProbeConfig::default()).unwrap();
        assert!((base - warped).abs() <= 0.02, "{base} vs {warped}");
    }

    #[test]
    fn single_class_is_rejected() {
        let mut train = blobs(10, 1, 2);
        train.labels = Some(vec![1; 10]);
        let test = blobs(10, 2, 2);
        assert!(matches!(linear_probe(&train, &test, &ProbeConfig::default()), Err(Error::Config(_))));
    }
}
