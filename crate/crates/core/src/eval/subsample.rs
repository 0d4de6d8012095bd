//! Label-budget subsets of a labeled training set.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

fn by_class(labels: &[usize]) -> Vec<Vec<usize>> {
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut groups = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        groups[l].push(i);
    }
    groups
}

fn draw(groups: &[Vec<usize>], counts: &[usize], seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (members, &count) in groups.iter().zip(counts) {
        let count = count.min(members.len());
        out.extend(sample(&mut rng, members.len(), count).into_iter().map(|j| members[j]));
    }
    out.sort_unstable();
    out
}

/// Up to `m` indices per class, sampled without replacement. Classes
/// smaller than `m` contribute every member. The result is sorted.
pub fn subsample_per_class(labels: &[usize], m: usize, seed: u64) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::Config("per-class budget must be >= 1".into()));
    }
    let groups = by_class(labels);
    Ok(draw(&groups, &vec![m; groups.len()], seed))
}

/// A class-stratified sample of `round(frac·N)` indices.
///
/// Each present class gets at least one index; the remaining budget is
/// split proportionally to class size by largest remainder (ties to the
/// lower class id).
pub fn subsample_fraction(labels: &[usize], frac: f64, seed: u64) -> Result<Vec<usize>> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::Config(format!("fraction {frac} outside (0, 1]")));
    }
    let n = labels.len();
    let groups = by_class(labels);
    let total = (frac * n as f64).round() as usize;
    let mut counts: Vec<usize> = Vec::with_capacity(groups.len());
    let mut remainders = Vec::with_capacity(groups.len());
    for (c, g) in groups.iter().enumerate() {
        if g.is_empty() {
            counts.push(0);
            continue;
        }
        let quota = total as f64 * g.len() as f64 / n as f64;
        counts.push((quota.floor() as usize).clamp(1, g.len()));
        remainders.push((quota - quota.floor(), c));
    }
    let mut assigned: usize = counts.iter().sum();
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, c) in remainders.iter().cycle().take(remainders.len() * 2) {
        if assigned >= total {
            break;
        }
        if counts[c] < groups[c].len() {
            counts[c] += 1;
            assigned += 1;
        }
    }
    Ok(draw(&groups, &counts, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_larger_than_classes_takes_everything() {
        let labels = [0, 1, 1, 0, 2];
        assert_eq!(subsample_per_class(&labels, 10, 3).unwrap(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn one_per_class() {
        let labels = [0, 0, 0, 1, 1, 1, 1];
        let idx = subsample_per_class(&labels, 1, 9).unwrap();
        assert_eq!(idx.len(), 2);
        assert_eq!(labels[idx[0]], 0);
        assert_eq!(labels[idx[1]], 1);
        assert_eq!(idx, subsample_per_class(&labels, 1, 9).unwrap());
        assert!(subsample_per_class(&labels, 0, 9).is_err());
    }

    #[test]
    fn per_class_draws_are_uniform_over_seeds() {
        let labels = [0usize; 10];
        let mut hits = [0usize; 10];
        let seeds = 10_000;
        for seed in 0..seeds {
            for i in subsample_per_class(&labels, 3, seed).unwrap() {
                hits[i] += 1;
            }
        }
        for h in hits {
            let freq = h as f64 / seeds as f64;
            assert!((freq - 0.3).abs() < 0.02, "{freq}");
        }
    }

    #[test]
    fn fraction_examples() {
        let labels: Vec<usize> = (0..200).map(|i| i % 2).collect();
        let idx = subsample_fraction(&labels, 0.01, 1).unwrap();
        assert_eq!(idx.len(), 2);
        assert_ne!(labels[idx[0]], labels[idx[1]]);
        assert_eq!(subsample_fraction(&labels, 1.0, 1).unwrap(), (0..200).collect::<Vec<_>>());
        assert_eq!(idx, subsample_fraction(&labels, 0.01, 1).unwrap());
        assert!(subsample_fraction(&labels, 0.0, 1).is_err());
        assert!(subsample_fraction(&labels, 1.5, 1).is_err());
    }

    #[test]
    fn fraction_is_proportional() {
        // 300 of class 0, 100 of class 1: 10% gives 30 + 10
        let labels: Vec<usize> = (0..400).map(|i| usize::from(i >= 300)).collect();
        let idx = subsample_fraction(&labels, 0.1, 4).unwrap();
        assert_eq!(idx.len(), 40);
        assert_eq!(idx.iter().filter(|&&i| labels[i] == 1).count(), 10);
        // every class keeps at least one member
        let rare: Vec<usize> = (0..101).map(|i| usize::from(i == 100)).collect();
        let idx = subsample_fraction(&rare, 0.05, 2).unwrap();
        assert!(idx.contains(&100));
        assert_eq!(idx.len(), 5);
    }
}
