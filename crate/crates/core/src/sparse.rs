//! Symmetric sparse matrices in CSR layout and an envelope Cholesky solver.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Symmetric matrix stored with both triangles in compressed sparse rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseSymMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseSymMatrix {
    /// Builds a matrix from raw CSR arrays. Columns must be strictly increasing per row.
    pub fn from_csr(
        n: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_ptr.len() != n + 1 || col_idx.len() != values.len() || row_ptr[n] != values.len() {
            return Err(Error::Validation("inconsistent CSR array lengths".into()));
        }
        for i in 0..n {
            let cols = &col_idx[row_ptr[i]..row_ptr[i + 1]];
            if cols.windows(2).any(|w| w[0] >= w[1]) || cols.iter().any(|&c| c >= n) {
                return Err(Error::Validation(format!(
                    "row {i} has unsorted or out-of-range columns"
                )));
            }
        }
        let m = SparseSymMatrix {
            n,
            row_ptr,
            col_idx,
            values,
        };
        if !m.is_symmetric(1e-14) {
            return Err(Error::Validation("matrix is not symmetric".into()));
        }
        Ok(m)
    }

    /// Sums duplicate `(i, j, v)` entries. The summation order is the input order,
    /// so equal triplet lists give bit-identical matrices.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        if triplets.iter().any(|&(i, j, _)| i >= n || j >= n) {
            return Err(Error::Validation("triplet index out of range".into()));
        }
        triplets.sort_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last = None;
        for (i, j, v) in triplets {
            if last == Some((i, j)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(j);
                values.push(v);
                row_ptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        SparseSymMatrix::from_csr(n, row_ptr, col_idx, values)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(p) => vals[p],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// `y = A x`, parallel over rows with a fixed per-row summation order.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        assert_eq!(y.len(), self.n);
        y.par_iter_mut()
            .with_min_len(256)
            .enumerate()
            .for_each(|(i, yi)| {
                let (cols, vals) = self.row(i);
                *yi = cols.iter().zip(vals).map(|(&j, &v)| v * x[j]).sum();
            });
    }

    /// `xᵀ A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let ay = self.matvec(y);
        dot(x, &ay)
    }

    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        self.bilinear(x, x)
    }

    /// Maximum relative asymmetry test `|a_ij − a_ji| ≤ tol·max|a|`.
    pub fn is_symmetric(&self, tol: f64) -> bool {
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        (0..self.n).all(|i| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals).all(|(&j, &v)| {
                let (cj, _) = self.row(j);
                cj.binary_search(&i).is_ok() && (v - self.get(j, i)).abs() <= tol * scale
            })
        })
    }

    /// Principal submatrix on `keep` (indices in increasing order).
    pub fn principal_submatrix(&self, keep: &[usize]) -> SparseSymMatrix {
        let mut new_index = vec![usize::MAX; self.n];
        for (k, &i) in keep.iter().enumerate() {
            new_index[i] = k;
        }
        let mut row_ptr = Vec::with_capacity(keep.len() + 1);
        row_ptr.push(0);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for &i in keep {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                if new_index[j] != usize::MAX {
                    col_idx.push(new_index[j]);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        SparseSymMatrix {
            n: keep.len(),
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                d[(i, j)] = v;
            }
        }
        d
    }

    /// `self + s·other`; both must share the sparsity pattern.
    pub fn add_scaled(&self, s: f64, other: &SparseSymMatrix) -> Result<SparseSymMatrix> {
        if self.row_ptr != other.row_ptr || self.col_idx != other.col_idx {
            return Err(Error::Argument("sparsity patterns differ".into()));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + s * b)
            .collect();
        Ok(SparseSymMatrix {
            n: self.n,
            row_ptr: self.row_ptr.clone(),
            col_idx: self.col_idx.clone(),
            values,
        })
    }

    /// Coordinate text: `i j value` per stored entry, sorted by `(i, j)`.
    pub fn to_coo_text(&self) -> String {
        let mut s = String::with_capacity(self.nnz() * 32);
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                writeln!(s, "{i} {j} {v}").unwrap();
            }
        }
        s
    }

    /// Adjacency lists (off-diagonal pattern).
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        (0..self.n)
            .map(|i| self.row(i).0.iter().copied().filter(|&j| j != i).collect())
            .collect()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Reverse Cuthill–McKee ordering. `perm[new] = old`.
pub fn reverse_cuthill_mckee(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&i| (degree[i], i));
    for &seed in &by_degree {
        if visited[seed] {
            continue;
        }
        let start = pseudo_peripheral(adj, &degree, seed);
        let begin = order.len();
        visited[start] = true;
        order.push(start);
        let mut head = begin;
        while head < order.len() {
            let v = order[head];
            head += 1;
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&u| !visited[u]).collect();
            next.sort_by_key(|&u| (degree[u], u));
            for u in next {
                visited[u] = true;
                order.push(u);
            }
        }
    }
    order.reverse();
    order
}

fn bfs_levels(adj: &[Vec<usize>], start: usize) -> (Vec<usize>, usize) {
    let mut level = vec![usize::MAX; adj.len()];
    level[start] = 0;
    let mut queue = std::collections::VecDeque::from([start]);
    let mut reached = vec![start];
    while let Some(v) = queue.pop_front() {
        for &u in &adj[v] {
            if level[u] == usize::MAX {
                level[u] = level[v] + 1;
                queue.push_back(u);
                reached.push(u);
            }
        }
    }
    let depth = reached.iter().map(|&v| level[v]).max().unwrap_or(0);
    (
        reached.into_iter().filter(|&v| level[v] == depth).collect(),
        depth,
    )
}

fn pseudo_peripheral(adj: &[Vec<usize>], degree: &[usize], seed: usize) -> usize {
    let mut v = seed;
    let (mut last, mut depth) = bfs_levels(adj, v);
    for _ in 0..8 {
        let cand = *last.iter().min_by_key(|&&u| (degree[u], u)).unwrap();
        let (l2, d2) = bfs_levels(adj, cand);
        if d2 <= depth {
            break;
        }
        v = cand;
        last = l2;
        depth = d2;
    }
    v
}

/// Cholesky factor with envelope (variable band) storage under an RCM ordering.
#[derive(Clone, Debug)]
pub struct EnvelopeCholesky {
    n: usize,
    perm: Vec<usize>,
    /// first stored column of each permuted row
    first: Vec<usize>,
    /// offset of row `i` in `data`; row `i` stores columns `first[i]..=i`
    start: Vec<usize>,
    data: Vec<f64>,
}

impl EnvelopeCholesky {
    pub fn factor(a: &SparseSymMatrix) -> Result<Self> {
        let n = a.dim();
        if n == 0 {
            return Err(Error::EmptySystem("cannot factor an empty matrix".into()));
        }
        let perm = reverse_cuthill_mckee(&a.adjacency());
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for new_i in 0..n {
            let (cols, _) = a.row(perm[new_i]);
            for &c in cols {
                first[new_i] = first[new_i].min(inv[c]);
            }
        }
        let mut start = Vec::with_capacity(n + 1);
        start.push(0);
        for i in 0..n {
            start.push(start[i] + (i - first[i] + 1));
        }
        let mut data = vec![0.0; start[n]];
        for new_i in 0..n {
            let (cols, vals) = a.row(perm[new_i]);
            for (&c, &v) in cols.iter().zip(vals) {
                let j = inv[c];
                if j <= new_i {
                    data[start[new_i] + j - first[new_i]] = v;
                }
            }
        }
        for i in 0..n {
            let fi = first[i];
            let row_i = start[i];
            for j in fi..i {
                let fj = first[j];
                let k0 = fi.max(fj);
                let (head, tail) = data.split_at_mut(row_i);
                let lj = &head[start[j] + k0 - fj..start[j] + j - fj];
                let li = &tail[k0 - fi..j - fi];
                let s = dot(li, lj);
                let ljj = head[start[j] + j - fj];
                tail[j - fi] = (tail[j - fi] - s) / ljj;
            }
            let row = &data[row_i..row_i + i - fi];
            let d = data[row_i + i - fi] - dot(row, row);
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Numerical(format!(
                    "matrix is not positive definite (pivot {i}: {d:e})"
                )));
            }
            data[row_i + i - fi] = d.sqrt();
        }
        Ok(EnvelopeCholesky {
            n,
            perm,
            first,
            start,
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored factor entries.
    pub fn envelope_size(&self) -> usize {
        self.data.len()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let mut y: Vec<f64> = self.perm.iter().map(|&o| b[o]).collect();
        // L y = b
        for i in 0..self.n {
            let fi = self.first[i];
            let row = &self.data[self.start[i]..self.start[i] + i - fi];
            let s = dot(row, &y[fi..i]);
            y[i] = (y[i] - s) / self.data[self.start[i] + i - fi];
        }
        // Lᵀ x = y
        for i in (0..self.n).rev() {
            let fi = self.first[i];
            let xi = y[i] / self.data[self.start[i] + i - fi];
            y[i] = xi;
            let row = &self.data[self.start[i]..self.start[i] + i - fi];
            for (yk, &l) in y[fi..i].iter_mut().zip(row) {
                *yk -= l * xi;
            }
        }
        let mut x = vec![0.0; self.n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }

    /// Solves for each column independently (deterministic for any thread count).
    pub fn solve_many(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(b.nrows(), self.n);
        let cols: Vec<Vec<f64>> = (0..b.ncols())
            .into_par_iter()
            .map(|j| self.solve(b.column(j).as_slice()))
            .collect();
        DMatrix::from_fn(self.n, b.ncols(), |i, j| cols[j][i])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn laplace_1d(n: usize) -> SparseSymMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
        }
        SparseSymMatrix::from_triplets(n, t).unwrap()
    }

    #[test]
    fn triplets_sum_duplicates() {
        let m = SparseSymMatrix::from_triplets(
            2,
            vec![(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (0, 0, 3.0)],
        )
        .unwrap();
        assert_eq!(m.get(0, 0), 4.0);
        assert_eq!(m.get(1, 1), 0.0);
        assert_eq!(m.nnz(), 3);
        assert!(SparseSymMatrix::from_triplets(2, vec![(0, 1, 1.0)]).is_err());
    }

    #[test]
    fn cholesky_solves_tridiagonal() {
        let a = laplace_1d(50);
        let chol = EnvelopeCholesky::factor(&a).unwrap();
        let x_true: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let b = a.matvec(&x_true);
        let x = chol.solve(&b);
        for (u, v) in x.iter().zip(&x_true) {
            assert!((u - v).abs() < 1e-11);
        }
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let a = SparseSymMatrix::from_triplets(2, vec![(0, 0, 1.0), (1, 1, -1.0)]).unwrap();
        assert!(matches!(
            EnvelopeCholesky::factor(&a),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn rcm_is_a_permutation() {
        let a = laplace_1d(30);
        let mut p = reverse_cuthill_mckee(&a.adjacency());
        p.sort_unstable();
        assert_eq!(p, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn submatrix_and_coo_export() {
        let a = laplace_1d(4);
        let s = a.principal_submatrix(&[1, 2]);
        assert_eq!(
            s.to_dense(),
            DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0])
        );
        let text = s.to_coo_text();
        assert_eq!(text, "0 0 2\n0 1 -1\n1 0 -1\n1 1 2\n");
    }

    fn random_spd(n: usize, seed: &[f64]) -> SparseSymMatrix {
        // sparse random graph Laplacian plus identity
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 1.0));
        }
        for (k, &w) in seed.iter().enumerate() {
            let i = k % n;
            let j = (k * 7 + 3) % n;
            if i != j {
                let w = w.abs() + 0.1;
                t.extend([(i, i, w), (j, j, w), (i, j, -w), (j, i, -w)]);
            }
        }
        SparseSymMatrix::from_triplets(n, t).unwrap()
    }

    proptest! {
        #[test]
        fn cholesky_matches_dense(ws in prop::collection::vec(-2.0f64..2.0, 10..60), n in 5usize..25) {
            let a = random_spd(n, &ws);
            let chol = EnvelopeCholesky::factor(&a).unwrap();
            let b: Vec<f64> = (0..n).map(|i| (i as f64).cos()).collect();
            let x = chol.solve(&b);
            let dense = a.to_dense().cholesky().unwrap();
            let xd = dense.solve(&nalgebra::DVector::from_vec(b));
            for i in 0..n {
                prop_assert!((x[i] - xd[i]).abs() < 1e-9 * (1.0 + xd[i].abs()));
            }
        }

        #[test]
        fn matvec_matches_dense(ws in prop::collection::vec(-2.0f64..2.0, 10..40), n in 3usize..20) {
            let a = random_spd(n, &ws);
            let x: Vec<f64> = (0..n).map(|i| (i as f64 * 1.7).sin()).collect();
            let y = a.matvec(&x);
            let yd = a.to_dense() * nalgebra::DVector::from_vec(x);
            for i in 0..n {
                prop_assert!((y[i] - yd[i]).abs() < 1e-12);
            }
            prop_assert!(a.is_symmetric(0.0));
        }
    }
}
