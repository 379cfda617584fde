//! Recovery metrics: optimal label alignment between estimated and true
//! latent indices, and the adjusted Rand index for partitions.
//!
//! Latent classes and types are only identified up to relabeling, so every
//! comparison against ground truth first solves a minimum-cost assignment
//! over label permutations.

use crate::error::{Error, Result};

/// Minimum-cost assignment: returns `perm` with `perm[i] = j` matching
/// estimated label i to true label j, minimizing the total cost.
///
/// Solved exactly by bitmask dynamic programming over column subsets
/// (O(n^2 2^n)), which is ample for label spaces up to ~20.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if n > 20 {
        return Err(Error::config(format!("assignment over {n} labels is too large")));
    }
    if cost.iter().any(|row| row.len() != n) {
        return Err(Error::config("assignment cost matrix must be square"));
    }

    let full = 1usize << n;
    // best[mask] = minimal cost of assigning rows 0..popcount(mask) to the
    // column subset `mask`.
    let mut best = vec![f64::INFINITY; full];
    let mut from = vec![usize::MAX; full];
    best[0] = 0.0;
    for mask in 0..full {
        if !best[mask].is_finite() {
            continue;
        }
        let row = (mask as u32).count_ones() as usize;
        if row == n {
            continue;
        }
        for col in 0..n {
            if mask & (1 << col) != 0 {
                continue;
            }
            let next = mask | (1 << col);
            let cand = best[mask] + cost[row][col];
            if cand < best[next] {
                best[next] = cand;
                from[next] = col;
            }
        }
    }

    let mut perm = vec![0usize; n];
    let mut mask = full - 1;
    while mask != 0 {
        let col = from[mask];
        let row = (mask as u32).count_ones() as usize - 1;
        perm[row] = col;
        mask &= !(1 << col);
    }
    Ok(perm)
}

/// Alignment of estimated type labels to true labels by mean proximity:
/// cost(i, j) = sum over cells of |mu_est[..][i] - mu_true[..][j]|.
///
/// `mu_est` and `mu_true` are [cell][label] grids (any shared cell layout).
pub fn align_by_means(mu_est: &[Vec<f64>], mu_true: &[Vec<f64>]) -> Result<Vec<usize>> {
    if mu_est.len() != mu_true.len() {
        return Err(Error::config("mean grids must share the cell layout"));
    }
    let n = mu_est.first().map_or(0, |r| r.len());
    let mut cost = vec![vec![0.0; n]; n];
    for (er, tr) in mu_est.iter().zip(mu_true) {
        if er.len() != n || tr.len() != n {
            return Err(Error::config("ragged mean grid"));
        }
        for i in 0..n {
            for j in 0..n {
                cost[i][j] += (er[i] - tr[j]).abs();
            }
        }
    }
    min_cost_assignment(&cost)
}

/// Adjusted Rand index between two partitions given as label vectors.
/// 1 means identical partitions, 0 is the chance level.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::config("partitions must label the same items"));
    }
    let n = a.len();
    if n == 0 {
        return Err(Error::data("adjusted Rand index of empty partitions"));
    }
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let choose2 = |x: u64| -> f64 { (x * x.saturating_sub(1)) as f64 / 2.0 };
    let row_sums: Vec<u64> = table.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<u64> = (0..kb).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let index: f64 = table.iter().flatten().map(|&x| choose2(x)).sum();
    let row_idx: f64 = row_sums.iter().map(|&x| choose2(x)).sum();
    let col_idx: f64 = col_sums.iter().map(|&x| choose2(x)).sum();
    let total = choose2(n as u64);
    let expected = row_idx * col_idx / total;
    let max_idx = 0.5 * (row_idx + col_idx);
    if (max_idx - expected).abs() < 1e-300 {
        // Degenerate: both partitions put everything in one block.
        return Ok(1.0);
    }
    Ok((index - expected) / (max_idx - expected))
}

/// Share of items whose aligned estimated label equals the true label.
pub fn aligned_accuracy(est: &[usize], truth: &[usize], perm: &[usize]) -> f64 {
    assert_eq!(est.len(), truth.len());
    if est.is_empty() {
        return 0.0;
    }
    let hits = est
        .iter()
        .zip(truth)
        .filter(|&(&e, &t)| perm[e] == t)
        .count();
    hits as f64 / est.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Oracle: exhaustive permutation search on random cost matrices.
    #[test]
    fn assignment_matches_permutation_enumeration() {
        use rand::Rng;
        let mut rng = crate::util::substream(77, 0);
        for _ in 0..50 {
            let n = rng.gen_range(1..=5usize);
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.gen_range(0.0..10.0)).collect())
                .collect();
            let got = min_cost_assignment(&cost).unwrap();
            let got_cost: f64 = got.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();

            // Enumerate all permutations via Heap's algorithm.
            let mut perm: Vec<usize> = (0..n).collect();
            let mut best = f64::INFINITY;
            let mut c = vec![0usize; n];
            let eval = |p: &[usize]| -> f64 { p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum() };
            best = best.min(eval(&perm));
            let mut i = 0;
            while i < n {
                if c[i] < i {
                    if i % 2 == 0 {
                        perm.swap(0, i);
                    } else {
                        perm.swap(c[i], i);
                    }
                    best = best.min(eval(&perm));
                    c[i] += 1;
                    i = 0;
                } else {
                    c[i] = 0;
                    i += 1;
                }
            }
            assert!((got_cost - best).abs() < 1e-12, "{got_cost} vs {best}");
        }
    }

    #[test]
    fn identical_partitions_have_ari_one() {
        let a = vec![0, 0, 1, 1, 2, 2];
        assert!((adjusted_rand_index(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn relabeled_partition_keeps_ari_one() {
        let a = vec![0, 0, 1, 1, 2, 2];
        let b = vec![2, 2, 0, 0, 1, 1];
        assert!((adjusted_rand_index(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn independent_partitions_have_low_ari() {
        // Checkerboard labels against block labels.
        let a: Vec<usize> = (0..40).map(|i| i / 20).collect();
        let b: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let ari = adjusted_rand_index(&a, &b).unwrap();
        assert!(ari.abs() < 0.15, "ari = {ari}");
    }

    #[test]
    fn accuracy_counts_aligned_hits() {
        let truth = vec![0, 1, 2, 0];
        let est = vec![2, 0, 1, 2]; // consistent relabel 2->0, 0->1, 1->2
        let perm = vec![1, 2, 0];
        assert_eq!(aligned_accuracy(&est, &truth, &perm), 1.0);
    }
}
