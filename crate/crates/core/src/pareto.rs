//! Non-dominated subsets for two maximized objectives.

use alloc::vec::Vec;

/// Indices of the points not dominated by any other point, in input order.
/// `q` dominates `p` when it is at least as good in both objectives and
/// strictly better in one. Exact duplicates keep only their earliest copy.
pub fn pareto_front(points: &[(f64, f64)]) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| {
            let p = points[i];
            !points.iter().enumerate().any(|(j, &q)| {
                let dominates = q.0 >= p.0 && q.1 >= p.1 && (q.0 > p.0 || q.1 > p.1);
                let earlier_twin = j < i && q == p;
                dominates || earlier_twin
            })
        })
        .collect()
}
