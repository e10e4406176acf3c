//! Sparse LDL^T factorization of symmetric positive-definite matrices,
//! up-looking with an elimination-tree symbolic phase. The symbolic
//! analysis is reused across refactorizations with the same pattern,
//! which is the hot path of the Newton inner loop.

use super::SparseMatrix;
use crate::error::{Error, Result};

const NONE: usize = usize::MAX;

/// Symbolic analysis of `P A P^T = L D L^T` for a fixed sparsity pattern
/// and permutation `perm` (new -> old).
#[derive(Debug, Clone)]
pub struct LdlSymbolic {
    n: usize,
    perm: Vec<usize>,
    iperm: Vec<usize>,
    parent: Vec<usize>,
    /// Column pointers of L (strictly lower part, by column).
    l_colptr: Vec<usize>,
    /// Permuted upper-triangular pattern in CSC: column pointers, row
    /// indices, and for each slot the position in the source CSR arrays.
    up_colptr: Vec<usize>,
    up_rows: Vec<usize>,
    up_src: Vec<usize>,
    src_nnz: usize,
}

impl LdlSymbolic {
    /// Analyze the pattern of symmetric `a` (full storage, both triangles)
    /// under `perm`. Subsequent [`LdlSymbolic::factor`] calls must pass a
    /// matrix with the identical pattern.
    pub fn new(a: &SparseMatrix, perm: Vec<usize>) -> Result<Self> {
        let n = a.n_rows();
        if a.n_cols() != n {
            return Err(Error::config("ldl: matrix must be square"));
        }
        if perm.len() != n {
            return Err(Error::config("ldl: permutation length mismatch"));
        }
        let mut iperm = vec![NONE; n];
        for (new, &old) in perm.iter().enumerate() {
            if old >= n || iperm[old] != NONE {
                return Err(Error::config("ldl: invalid permutation"));
            }
            iperm[old] = new;
        }

        // Permuted upper triangle (row <= col in new indexing) in CSC,
        // built from the canonical original-upper entries.
        let mut counts = vec![0usize; n + 1];
        let mut entries: Vec<(usize, usize, usize)> = Vec::new(); // (col, row, src_pos)
        let mut pos = 0usize;
        for i in 0..n {
            let (cols, _) = a.row(i);
            for &j in cols {
                if i <= j {
                    let (ni, nj) = (iperm[i], iperm[j]);
                    let (r, c) = if ni <= nj { (ni, nj) } else { (nj, ni) };
                    entries.push((c, r, pos));
                    counts[c + 1] += 1;
                }
                pos += 1;
            }
        }
        entries.sort_unstable();
        for c in 0..n {
            counts[c + 1] += counts[c];
        }
        let up_colptr = counts;
        let up_rows: Vec<usize> = entries.iter().map(|e| e.1).collect();
        let up_src: Vec<usize> = entries.iter().map(|e| e.2).collect();

        // Elimination tree and column counts of L.
        let mut parent = vec![NONE; n];
        let mut flag = vec![NONE; n];
        let mut l_nz = vec![0usize; n];
        for k in 0..n {
            flag[k] = k;
            for p in up_colptr[k]..up_colptr[k + 1] {
                let mut i = up_rows[p];
                while i < k && flag[i] != k {
                    if parent[i] == NONE {
                        parent[i] = k;
                    }
                    l_nz[i] += 1;
                    flag[i] = k;
                    i = parent[i];
                }
            }
        }
        let mut l_colptr = vec![0usize; n + 1];
        for k in 0..n {
            l_colptr[k + 1] = l_colptr[k] + l_nz[k];
        }

        Ok(LdlSymbolic {
            n,
            perm,
            iperm,
            parent,
            l_colptr,
            up_colptr,
            up_rows,
            up_src,
            src_nnz: a.nnz(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of nonzeros in the strictly lower factor L.
    pub fn l_nnz(&self) -> usize {
        *self.l_colptr.last().unwrap()
    }

    /// Numeric factorization. Fails if a pivot is not strictly positive,
    /// i.e. the matrix is not positive definite.
    pub fn factor(&self, a: &SparseMatrix) -> Result<LdlFactor> {
        if a.nnz() != self.src_nnz || a.n_rows() != self.n {
            return Err(Error::config("ldl: pattern differs from symbolic analysis"));
        }
        let n = self.n;
        let src = a.values();

        let lnz = self.l_nnz();
        let mut l_rows = vec![0usize; lnz];
        let mut l_vals = vec![0.0f64; lnz];
        let mut l_next: Vec<usize> = self.l_colptr[..n].to_vec();
        let mut d = vec![0.0f64; n];

        let mut y = vec![0.0f64; n];
        let mut pattern = vec![0usize; n];
        let mut flag = vec![NONE; n];

        for k in 0..n {
            let mut top = n;
            flag[k] = k;
            y[k] = 0.0;
            for p in self.up_colptr[k]..self.up_colptr[k + 1] {
                let i = self.up_rows[p];
                let v = src[self.up_src[p]];
                y[i] += v;
                // Walk toward the root, collecting the row pattern in
                // reverse topological order.
                let mut len = 0usize;
                let mut ii = i;
                while ii < k && flag[ii] != k {
                    pattern[len] = ii;
                    len += 1;
                    flag[ii] = k;
                    ii = self.parent[ii];
                }
                while len > 0 {
                    len -= 1;
                    top -= 1;
                    pattern[top] = pattern[len];
                }
            }
            d[k] = y[k];
            y[k] = 0.0;
            for t in top..n {
                let i = pattern[t];
                let yi = y[i];
                y[i] = 0.0;
                // Apply previously computed entries of column i of L.
                for p in self.l_colptr[i]..l_next[i] {
                    y[l_rows[p]] -= l_vals[p] * yi;
                }
                let l_ki = yi / d[i];
                d[k] -= l_ki * yi;
                l_rows[l_next[i]] = k;
                l_vals[l_next[i]] = l_ki;
                l_next[i] += 1;
            }
            if !(d[k] > 0.0) || !d[k].is_finite() {
                return Err(Error::numerical(format!(
                    "ldl: non-positive pivot {} at column {k} of {n}; matrix is not positive definite",
                    d[k]
                )));
            }
        }

        Ok(LdlFactor {
            n,
            perm: self.perm.clone(),
            iperm: self.iperm.clone(),
            l_colptr: self.l_colptr.clone(),
            l_rows,
            l_vals,
            d,
        })
    }
}

/// Numeric factor `P A P^T = L D L^T`, self-contained for solves.
#[derive(Debug, Clone)]
pub struct LdlFactor {
    n: usize,
    perm: Vec<usize>,
    iperm: Vec<usize>,
    l_colptr: Vec<usize>,
    l_rows: Vec<usize>,
    l_vals: Vec<f64>,
    d: Vec<f64>,
}

impl LdlFactor {
    /// Convenience: symbolic + numeric in one call.
    pub fn factorize(a: &SparseMatrix, perm: Vec<usize>) -> Result<LdlFactor> {
        LdlSymbolic::new(a, perm)?.factor(a)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// log det A = sum log d_i.
    pub fn log_det(&self) -> f64 {
        self.d.iter().map(|&v| v.ln()).sum()
    }

    pub fn min_pivot(&self) -> f64 {
        self.d.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Solve A x = b.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let mut x: Vec<f64> = (0..self.n).map(|k| b[self.perm[k]]).collect();
        // L z = Pb
        for i in 0..self.n {
            let xi = x[i];
            for p in self.l_colptr[i]..self.l_colptr[i + 1] {
                x[self.l_rows[p]] -= self.l_vals[p] * xi;
            }
        }
        // D w = z
        for i in 0..self.n {
            x[i] /= self.d[i];
        }
        // L' y = w
        for i in (0..self.n).rev() {
            let mut xi = x[i];
            for p in self.l_colptr[i]..self.l_colptr[i + 1] {
                xi -= self.l_vals[p] * x[self.l_rows[p]];
            }
            x[i] = xi;
        }
        // x = P' y
        let mut out = vec![0.0; self.n];
        for k in 0..self.n {
            out[self.perm[k]] = x[k];
        }
        out
    }

    /// Given iid standard normal `z`, returns `x` with covariance `A^{-1}`:
    /// x = P' L^{-T} D^{-1/2} z. This is the GMRF sampling back-substitution.
    pub fn sample_from_precision(&self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.n);
        let mut x: Vec<f64> = (0..self.n).map(|i| z[i] / self.d[i].sqrt()).collect();
        for i in (0..self.n).rev() {
            let mut xi = x[i];
            for p in self.l_colptr[i]..self.l_colptr[i + 1] {
                xi -= self.l_vals[p] * x[self.l_rows[p]];
            }
            x[i] = xi;
        }
        let mut out = vec![0.0; self.n];
        for k in 0..self.n {
            out[self.perm[k]] = x[k];
        }
        out
    }

    /// Diagonal entry i of A^{-1}, via one solve with a unit vector.
    pub fn inverse_diagonal_entry(&self, i: usize) -> f64 {
        let k = self.iperm[i];
        // Solve L w = e_k, then sum w_j^2 / d_j over the nonzero tail.
        // Only indices >= k participate because L is lower triangular.
        let mut w = vec![0.0f64; self.n];
        w[k] = 1.0;
        let mut acc = 0.0;
        for j in k..self.n {
            let wj = w[j];
            if wj != 0.0 {
                for p in self.l_colptr[j]..self.l_colptr[j + 1] {
                    w[self.l_rows[p]] -= self.l_vals[p] * wj;
                }
                acc += wj * wj / self.d[j];
            }
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::{rcm_with_dense_last, Triplets};
    use approx::assert_relative_eq;

    /// 1D Laplacian + shift: tridiagonal SPD.
    fn tridiag(n: usize, shift: f64) -> SparseMatrix {
        let mut t = Triplets::new(n, n);
        for i in 0..n {
            t.push(i, i, 2.0 + shift);
            if i + 1 < n {
                t.push_sym(i, i + 1, -1.0);
            }
        }
        t.to_csr()
    }

    fn random_spd(n: usize, seed: u64) -> SparseMatrix {
        // Diagonally dominant random symmetric matrix.
        let mut state = seed.max(1);
        let mut next = move || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 33) as f64 / (1u64 << 31) as f64 - 1.0
        };
        let mut t = Triplets::new(n, n);
        let mut row_abs = vec![0.0f64; n];
        for i in 0..n {
            for j in (i + 1)..n {
                if next() > 0.4 {
                    let v = next();
                    t.push_sym(i, j, v);
                    row_abs[i] += v.abs();
                    row_abs[j] += v.abs();
                }
            }
        }
        for i in 0..n {
            t.push(i, i, row_abs[i] + 1.0 + next().abs());
        }
        t.to_csr()
    }

    #[test]
    fn solve_matches_dense() {
        for seed in [1u64, 2, 3] {
            let a = random_spd(25, seed);
            let perm = rcm_with_dense_last(&a, usize::MAX);
            let f = LdlFactor::factorize(&a, perm).unwrap();
            let b: Vec<f64> = (0..25).map(|i| (i as f64 * 0.37).sin()).collect();
            let x = f.solve(&b);
            let dense = a.to_dense();
            let xd = dense
                .clone()
                .cholesky()
                .unwrap()
                .solve(&nalgebra::DVector::from_vec(b.clone()));
            for i in 0..25 {
                assert_relative_eq!(x[i], xd[i], epsilon = 1e-9, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn log_det_matches_dense() {
        let a = random_spd(30, 7);
        let perm = rcm_with_dense_last(&a, usize::MAX);
        let f = LdlFactor::factorize(&a, perm).unwrap();
        let chol = a.to_dense().cholesky().unwrap();
        let ld_dense: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        assert_relative_eq!(f.log_det(), ld_dense, epsilon = 1e-9, max_relative = 1e-10);
    }

    #[test]
    fn identity_permutation_works() {
        let a = tridiag(10, 0.5);
        let f = LdlFactor::factorize(&a, (0..10).collect()).unwrap();
        let x = f.solve(&vec![1.0; 10]);
        let r = a.matvec(&x);
        for v in r {
            assert_relative_eq!(v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let mut t = Triplets::new(2, 2);
        t.push(0, 0, 1.0);
        t.push(1, 1, -1.0);
        let a = t.to_csr();
        assert!(LdlFactor::factorize(&a, vec![0, 1]).is_err());
    }

    #[test]
    fn inverse_diagonal_matches_dense_inverse() {
        let a = random_spd(20, 11);
        let perm = rcm_with_dense_last(&a, usize::MAX);
        let f = LdlFactor::factorize(&a, perm).unwrap();
        let inv = a.to_dense().try_inverse().unwrap();
        for i in 0..20 {
            assert_relative_eq!(f.inverse_diagonal_entry(i), inv[(i, i)], epsilon = 1e-10, max_relative = 1e-9);
        }
    }

    #[test]
    fn sampling_transform_has_right_covariance_shape() {
        // Deterministic check: the map z -> x is linear with
        // cov(x) = A^{-1}; verify M M^T = A^{-1} column by column.
        let a = tridiag(6, 0.3);
        let f = LdlFactor::factorize(&a, rcm_with_dense_last(&a, usize::MAX)).unwrap();
        let n = 6;
        let mut m = nalgebra::DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = f.sample_from_precision(&e);
            for i in 0..n {
                m[(i, j)] = col[i];
            }
        }
        let cov = &m * m.transpose();
        let inv = a.to_dense().try_inverse().unwrap();
        for i in 0..n {
            for j in 0..n {
                assert_relative_eq!(cov[(i, j)], inv[(i, j)], epsilon = 1e-10);
            }
        }
    }
}
