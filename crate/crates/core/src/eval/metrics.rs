//! Partition-agreement scores.

use std::collections::HashMap;

use crate::error::{Error, Result};

struct Contingency {
    n: f64,
    rows: Vec<f64>,
    cols: Vec<f64>,
    /// `(row, col, count)` for every non-empty cell, in row-major order.
    cells: Vec<(usize, usize, f64)>,
}

fn contingency(a: &[usize], b: &[usize]) -> Result<Contingency> {
    if a.len() != b.len() {
        return Err(Error::shape("contingency", format!("{} vs {} labels", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::shape("contingency", "empty labelings"));
    }
    let mut row_ids = HashMap::new();
    let mut col_ids = HashMap::new();
    let mut cells: HashMap<(usize, usize), f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        let next = row_ids.len();
        let r = *row_ids.entry(x).or_insert(next);
        let next = col_ids.len();
        let c = *col_ids.entry(y).or_insert(next);
        *cells.entry((r, c)).or_insert(0.0) += 1.0;
    }
    let mut rows = vec![0.0; row_ids.len()];
    let mut cols = vec![0.0; col_ids.len()];
    for (&(r, c), &v) in &cells {
        rows[r] += v;
        cols[c] += v;
    }
    // fixed summation order keeps the scores deterministic
    let mut keys: Vec<_> = cells.into_iter().collect();
    keys.sort_by_key(|&(k, _)| k);
    Ok(Contingency {
        n: a.len() as f64,
        rows,
        cols,
        cells: keys.into_iter().map(|((r, c), v)| (r, c, v)).collect(),
    })
}

fn entropy(counts: &[f64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| -(c / n) * (c / n).ln())
        .sum()
}

/// Normalized mutual information with arithmetic-mean normalization:
/// `I(a;b) / ((H(a) + H(b)) / 2)`, natural logs. Zero when either
/// labeling has a single cluster.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    let t = contingency(a, b)?;
    let (ha, hb) = (entropy(&t.rows, t.n), entropy(&t.cols, t.n));
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    let mi: f64 = t
        .cells
        .iter()
        .map(|&(r, c, nij)| (nij / t.n) * (nij * t.n / (t.rows[r] * t.cols[c])).ln())
        .sum();
    Ok((mi / ((ha + hb) / 2.0)).clamp(0.0, 1.0))
}

fn comb2(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index from the contingency table.
///
/// Where the index is undefined (maximum equals expectation) two
/// all-singleton labelings score 1 and two constant labelings score 0.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    let t = contingency(a, b)?;
    let index: f64 = t.cells.iter().map(|&(_, _, v)| comb2(v)).sum();
    let sum_a: f64 = t.rows.iter().map(|&v| comb2(v)).sum();
    let sum_b: f64 = t.cols.iter().map(|&v| comb2(v)).sum();
    let pairs = comb2(t.n);
    if pairs == 0.0 {
        return Ok(0.0);
    }
    let expected = sum_a * sum_b / pairs;
    let max = (sum_a + sum_b) / 2.0;
    let denom = max - expected;
    if denom == 0.0 {
        // both labelings all singletons (identical) or both constant
        return Ok(if sum_a == 0.0 { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_partitions() {
        let a = [0, 0, 1, 1, 2];
        assert!((nmi(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ari(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_labeling_scores_zero() {
        let c = [4, 4, 4, 4];
        let b = [0, 1, 0, 2];
        assert_eq!(nmi(&c, &b).unwrap(), 0.0);
        assert_eq!(ari(&c, &b).unwrap(), 0.0);
        assert_eq!(nmi(&b, &c).unwrap(), 0.0);
        assert_eq!(ari(&b, &c).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_denominators() {
        let singles = [0, 1, 2, 3];
        assert_eq!(ari(&singles, &[7, 5, 6, 4]).unwrap(), 1.0);
        assert_eq!(ari(&[1, 1, 1], &[2, 2, 2]).unwrap(), 0.0);
        assert_eq!(ari(&[3], &[3]).unwrap(), 0.0);
    }

    #[test]
    fn independent_two_by_two() {
        let a = [0, 0, 1, 1];
        let b = [0, 1, 0, 1];
        assert!(nmi(&a, &b).unwrap().abs() < 1e-15);
        // index 0, expected 2·2/6, max 2
        assert!((ari(&a, &b).unwrap() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn permutation_invariant() {
        let a = [0, 1, 1, 2, 2, 2, 0];
        let b = [1, 1, 0, 2, 2, 0, 0];
        let relabeled: Vec<usize> = a.iter().map(|&x| [7, 3, 9][x]).collect();
        assert!((nmi(&a, &b).unwrap() - nmi(&relabeled, &b).unwrap()).abs() < 1e-12);
        assert!((ari(&a, &b).unwrap() - ari(&relabeled, &b).unwrap()).abs() < 1e-12);
        assert!((nmi(&a, &b).unwrap() - nmi(&b, &a).unwrap()).abs() < 1e-12);
        assert!((ari(&a, &b).unwrap() - ari(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(nmi(&[0, 1], &[0]), Err(Error::Shape { .. })));
        assert!(matches!(ari(&[0], &[0, 1]), Err(Error::Shape { .. })));
    }
}
