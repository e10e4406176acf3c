//! Fill-reducing ordering: reverse Cuthill-McKee on the sparse part of the
//! graph, with near-dense rows (fixed effects, seasonal coordinates in the
//! latent models) pushed to the end of the elimination order.

use super::SparseMatrix;

/// Returns a permutation `perm` (new index -> old index) for a symmetric
/// pattern. Rows whose off-diagonal degree exceeds `dense_threshold` are
/// ordered last; the remainder is ordered by reverse Cuthill-McKee per
/// connected component.
pub fn rcm_with_dense_last(a: &SparseMatrix, dense_threshold: usize) -> Vec<usize> {
    let n = a.n_rows();
    assert_eq!(n, a.n_cols(), "ordering requires a square pattern");

    let mut degree = vec![0usize; n];
    for i in 0..n {
        let (cols, _) = a.row(i);
        degree[i] = cols.iter().filter(|&&j| j != i).count();
    }

    let mut is_dense = vec![false; n];
    for i in 0..n {
        if degree[i] > dense_threshold {
            is_dense[i] = true;
        }
    }

    // Degrees restricted to the sparse subgraph.
    let sub_degree = |i: usize, a: &SparseMatrix, is_dense: &[bool]| -> usize {
        let (cols, _) = a.row(i);
        cols.iter().filter(|&&j| j != i && !is_dense[j]).count()
    };

    let mut visited = is_dense.clone();
    let mut order: Vec<usize> = Vec::with_capacity(n);

    loop {
        // Seed: unvisited sparse node of minimum subgraph degree.
        let mut seed = None;
        let mut best = usize::MAX;
        for i in 0..n {
            if !visited[i] {
                let d = sub_degree(i, a, &is_dense);
                if d < best {
                    best = d;
                    seed = Some(i);
                }
            }
        }
        let Some(mut start) = seed else { break };

        // One BFS sweep to push the start toward the component periphery.
        if let Some(far) = bfs_last_level_min_degree(a, start, &visited, &is_dense) {
            start = far;
        }

        // Cuthill-McKee BFS with degree-sorted neighbor expansion.
        let mut queue = std::collections::VecDeque::new();
        visited[start] = true;
        queue.push_back(start);
        let mut nbrs: Vec<usize> = Vec::new();
        while let Some(i) = queue.pop_front() {
            order.push(i);
            nbrs.clear();
            let (cols, _) = a.row(i);
            for &j in cols {
                if !visited[j] {
                    visited[j] = true;
                    nbrs.push(j);
                }
            }
            nbrs.sort_unstable_by_key(|&j| (sub_degree(j, a, &is_dense), j));
            for &j in &nbrs {
                queue.push_back(j);
            }
        }
    }

    order.reverse();
    for i in 0..n {
        if is_dense[i] {
            order.push(i);
        }
    }
    debug_assert_eq!(order.len(), n);
    order
}

fn bfs_last_level_min_degree(
    a: &SparseMatrix,
    start: usize,
    visited: &[bool],
    is_dense: &[bool],
) -> Option<usize> {
    let n = a.n_rows();
    let mut seen = vec![false; n];
    seen[start] = true;
    let mut level = vec![start];
    let mut last = vec![start];
    while !level.is_empty() {
        last = level.clone();
        let mut next = Vec::new();
        for &i in &level {
            let (cols, _) = a.row(i);
            for &j in cols {
                if !seen[j] && !visited[j] && !is_dense[j] {
                    seen[j] = true;
                    next.push(j);
                }
            }
        }
        level = next;
    }
    last.into_iter().min_by_key(|&i| {
        let (cols, _) = a.row(i);
        cols.iter().filter(|&&j| j != i && !is_dense[j]).count()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::Triplets;

    fn path_graph(n: usize) -> SparseMatrix {
        let mut t = Triplets::new(n, n);
        for i in 0..n {
            t.push(i, i, 2.0);
            if i + 1 < n {
                t.push_sym(i, i + 1, -1.0);
            }
        }
        t.to_csr()
    }

    #[test]
    fn produces_a_permutation() {
        let a = path_graph(17);
        let perm = rcm_with_dense_last(&a, usize::MAX);
        let mut seen = vec![false; 17];
        for &p in &perm {
            assert!(!seen[p]);
            seen[p] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn path_graph_stays_banded() {
        let a = path_graph(50);
        let perm = rcm_with_dense_last(&a, usize::MAX);
        let mut iperm = vec![0usize; 50];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }
        let mut bw = 0usize;
        for (i, j, _) in a.iter() {
            bw = bw.max(iperm[i].abs_diff(iperm[j]));
        }
        assert!(bw <= 2, "path graph bandwidth after rcm was {bw}");
    }

    #[test]
    fn dense_rows_go_last() {
        // Path graph plus one row coupled to everything.
        let n = 20;
        let mut t = Triplets::new(n, n);
        for i in 0..n - 1 {
            t.push(i, i, 2.0);
            if i + 2 < n {
                t.push_sym(i, i + 1, -1.0);
            }
        }
        let dense = n - 1;
        t.push(dense, dense, 2.0);
        for i in 0..dense {
            t.push_sym(dense, i, -0.1);
        }
        let a = t.to_csr();
        let perm = rcm_with_dense_last(&a, n / 2);
        assert_eq!(*perm.last().unwrap(), dense);
    }
}
