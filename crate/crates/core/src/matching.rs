//! Minimum-cost bipartite assignment between predictions and ground truth.

/// Result of matching `n` predictions against `m` ground-truth instances:
/// `min(n, m)` injective pairs plus the leftover predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchAssignment {
    /// `(prediction index, ground-truth index)` pairs.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_preds: Vec<usize>,
}

impl MatchAssignment {
    pub fn gt_for_pred(&self, pred: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(p, _)| p == pred).map(|&(_, g)| g)
    }
}

/// Hungarian algorithm (shortest augmenting path with potentials, O(n^3)).
/// `cost` is row-major `n x m`; every row of the smaller side is matched.
pub fn hungarian_assign(cost: &[f64], n: usize, m: usize) -> MatchAssignment {
    assert_eq!(cost.len(), n * m, "cost matrix size");
    if n == 0 || m == 0 {
        return MatchAssignment { pairs: Vec::new(), unmatched_preds: (0..n).collect() };
    }
    // the solver matches all rows and needs rows <= cols; transpose if not
    let transposed = n > m;
    let (rows, cols) = if transposed { (m, n) } else { (n, m) };
    let at = |i: usize, j: usize| -> f64 {
        if transposed {
            cost[j * m + i]
        } else {
            cost[i * m + j]
        }
    };

    let inf = f64::INFINITY;
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut matched_row = vec![0usize; cols + 1]; // col j -> row (1-based, 0 = free)
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=cols {
                if !used[j] {
                    let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs = Vec::with_capacity(rows);
    for j in 1..=cols {
        if matched_row[j] != 0 {
            let (r, c) = (matched_row[j] - 1, j - 1);
            if transposed {
                pairs.push((c, r));
            } else {
                pairs.push((r, c));
            }
        }
    }
    pairs.sort_unstable();
    let mut is_matched = vec![false; n];
    for &(p, _) in &pairs {
        is_matched[p] = true;
    }
    let unmatched_preds = (0..n).filter(|&p| !is_matched[p]).collect();
    MatchAssignment { pairs, unmatched_preds }
}

/// Total cost of an assignment, summed in ascending pair order.
pub fn assignment_cost(cost: &[f64], m: usize, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| cost[i * m + j]).sum()
}

/// Exhaustive minimum over all injective assignments; oracle for small sizes.
pub fn brute_force_min_cost(cost: &[f64], n: usize, m: usize) -> f64 {
    fn recurse(cost: &[f64], n: usize, m: usize, row: usize, used: &mut [bool], left: usize) -> f64 {
        if left == 0 || row == n {
            return 0.0;
        }
        // the remaining rows exceed what must still be matched; allow skipping
        let mut best = f64::INFINITY;
        if n - row > left {
            best = recurse(cost, n, m, row + 1, used, left);
        }
        for j in 0..m {
            if !used[j] {
                used[j] = true;
                let c = cost[row * m + j] + recurse(cost, n, m, row + 1, used, left - 1);
                used[j] = false;
                if c < best {
                    best = c;
                }
            }
        }
        best
    }
    let mut used = vec![false; m];
    recurse(cost, n, m, 0, &mut used, n.min(m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_optimum() {
        let a = hungarian_assign(&[1.0, 2.0, 2.0, 1.0], 2, 2);
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(assignment_cost(&[1.0, 2.0, 2.0, 1.0], 2, &a.pairs), 2.0);
    }

    #[test]
    fn permutation_recovery() {
        // cost row i has a zero at column perm[i]
        let perm = [2usize, 0, 3, 1];
        let n = 4;
        let mut cost = vec![1.0; n * n];
        for (i, &j) in perm.iter().enumerate() {
            cost[i * n + j] = 0.0;
        }
        let a = hungarian_assign(&cost, n, n);
        for (i, &j) in perm.iter().enumerate() {
            assert_eq!(a.gt_for_pred(i), Some(j));
        }
    }

    #[test]
    fn rectangular_matches_min_side() {
        let cost = vec![
            5.0, 1.0, 9.0, //
            1.0, 5.0, 9.0,
        ];
        let a = hungarian_assign(&cost, 2, 3);
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
        assert!(a.unmatched_preds.is_empty());

        let cost_t = vec![
            5.0, 1.0, //
            1.0, 5.0,
            9.0, 9.0,
        ];
        let a = hungarian_assign(&cost_t, 3, 2);
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(a.unmatched_preds, vec![2]);
    }

    #[test]
    fn matches_brute_force_on_small_random() {
        let mut s = 0x2545f4914f6cdd1du64;
        let mut next = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        for trial in 0..200 {
            let n = 1 + (trial % 6);
            let m = 1 + ((trial / 6) % 6);
            let cost: Vec<f64> = (0..n * m).map(|_| next() * 10.0 - 5.0).collect();
            let a = hungarian_assign(&cost, n, m);
            assert_eq!(a.pairs.len(), n.min(m));
            let total = assignment_cost(&cost, m, &a.pairs);
            let best = brute_force_min_cost(&cost, n, m);
            assert!(
                (total - best).abs() < 1e-9,
                "n={n} m={m}: {total} vs brute {best}"
            );
        }
    }
}
