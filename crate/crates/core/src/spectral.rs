//! Dirichlet–Laplacian eigenpairs `K w = λ M w` of the P1 discretization.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fem::{DirichletMap, FemFunction, FemSpace};
use crate::meshing::Mesh;
use crate::sparse::{EnvelopeCholesky, SparseSymMatrix};

/// Eigensolver settings.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EigenOptions {
    /// Dimensions up to this size use the dense solver.
    pub dense_threshold: usize,
    /// Relative residual `‖Kw − λMw‖ / (λ‖Mw‖)` accepted by the iterative solver.
    pub tol: f64,
    pub max_iter: usize,
    /// Relative eigenvalue gap below which modes are treated as one cluster.
    pub cluster_tol: f64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        EigenOptions {
            dense_threshold: 1000,
            tol: 1e-10,
            max_iter: 500,
            cluster_tol: 1e-8,
        }
    }
}

/// One eigenvalue with its L²-normalized eigenfunction.
#[derive(Clone, Debug)]
pub struct EigenPair {
    pub lambda: f64,
    pub w: FemFunction,
}

/// Ascending eigenpairs on one mesh, stored as columns of nodal values.
#[derive(Clone, Debug)]
pub struct ModalBasis {
    space: Arc<FemSpace>,
    lambdas: Vec<f64>,
    /// `n_vertices × n_modes`, zero rows at boundary vertices
    vectors: DMatrix<f64>,
    mass_vectors: OnceLock<DMatrix<f64>>,
}

impl ModalBasis {
    /// Smallest `n_modes` eigenpairs of the boundary-eliminated problem on `space`.
    pub fn compute(space: &Arc<FemSpace>, n_modes: usize, opts: &EigenOptions) -> Result<Self> {
        let (k, m) = space.reduced_matrices();
        let (lambdas, reduced) = dirichlet_eigenpairs(&k, &m, n_modes, opts)?;
        let map = space.dirichlet_map();
        let mut vectors = DMatrix::zeros(map.n_full(), n_modes);
        for (r, &i) in map.interior().iter().enumerate() {
            for c in 0..n_modes {
                vectors[(i, c)] = reduced[(r, c)];
            }
        }
        Ok(ModalBasis {
            space: space.clone(),
            lambdas,
            vectors,
            mass_vectors: OnceLock::new(),
        })
    }

    /// Wraps precomputed nodal eigenvectors (columns, zero at boundary vertices).
    pub fn from_parts(
        space: Arc<FemSpace>,
        lambdas: Vec<f64>,
        vectors: DMatrix<f64>,
    ) -> Result<Self> {
        let mesh = space.mesh();
        if vectors.nrows() != mesh.n_vertices()
            || vectors.ncols() != lambdas.len()
            || lambdas.is_empty()
        {
            return Err(Error::Validation(
                "eigenvector matrix does not match the mesh or eigenvalues".into(),
            ));
        }
        if lambdas.windows(2).any(|w| w[1] < w[0]) || lambdas.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::Validation(
                "eigenvalues must be positive and ascending".into(),
            ));
        }
        for (i, &b) in mesh.boundary_flags().iter().enumerate() {
            if b && vectors.row(i).iter().any(|&v| v != 0.0) {
                return Err(Error::Validation(
                    "eigenvectors must vanish on the boundary".into(),
                ));
            }
        }
        Ok(ModalBasis {
            space,
            lambdas,
            vectors,
            mass_vectors: OnceLock::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    pub fn space(&self) -> &Arc<FemSpace> {
        &self.space
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        self.space.mesh()
    }

    pub fn dirichlet_map(&self) -> &DirichletMap {
        self.space.dirichlet_map()
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn lambda(&self, k: usize) -> f64 {
        self.lambdas[k]
    }

    /// Nodal eigenvectors as columns.
    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn vector(&self, k: usize) -> &[f64] {
        let n = self.vectors.nrows();
        &self.vectors.as_slice()[k * n..(k + 1) * n]
    }

    pub fn pair(&self, k: usize) -> EigenPair {
        let w = FemFunction::new_dirichlet(self.mesh().clone(), self.vector(k).to_vec())
            .expect("eigenvectors vanish on the boundary");
        EigenPair {
            lambda: self.lambdas[k],
            w,
        }
    }

    pub fn pairs(&self) -> Vec<EigenPair> {
        (0..self.len()).map(|k| self.pair(k)).collect()
    }

    /// First `n` modes.
    pub fn truncated(&self, n: usize) -> Result<ModalBasis> {
        if n == 0 || n > self.len() {
            return Err(Error::Argument(format!(
                "cannot keep {n} of {} modes",
                self.len()
            )));
        }
        Ok(ModalBasis {
            space: self.space.clone(),
            lambdas: self.lambdas[..n].to_vec(),
            vectors: self.vectors.columns(0, n).into_owned(),
            mass_vectors: OnceLock::new(),
        })
    }

    /// `M W`, the mass matrix applied to every eigenvector.
    pub fn mass_vectors(&self) -> &DMatrix<f64> {
        self.mass_vectors.get_or_init(|| {
            let n = self.vectors.nrows();
            let mut out = DMatrix::zeros(n, self.len());
            for k in 0..self.len() {
                let mw = self.space.mass().matvec(self.vector(k));
                out.column_mut(k).copy_from_slice(&mw);
            }
            out
        })
    }

    /// `(g, w_k)` for all `k`, given a load vector `g_i = (g, φ_i)`.
    pub fn coefficients_of_load(&self, load: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|k| crate::sparse::dot(self.vector(k), load))
            .collect()
    }

    /// `(u, w_k)_{L²}` for all `k`, for nodal values `u`.
    pub fn project(&self, u: &[f64]) -> Vec<f64> {
        assert_eq!(u.len(), self.vectors.nrows());
        (self.mass_vectors().transpose() * DVector::from_column_slice(u))
            .data
            .into()
    }

    /// Nodal field `Σ_k c_k w_k`.
    pub fn synthesize(&self, coeffs: &[f64]) -> Vec<f64> {
        assert_eq!(coeffs.len(), self.len());
        (&self.vectors * DVector::from_column_slice(coeffs))
            .data
            .into()
    }

    /// Writes `index.txt` (`k lambda` lines) and `mode_<k>.txt` nodal values.
    pub fn export(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut index = String::new();
        for k in 0..self.len() {
            writeln!(index, "{} {}", k + 1, self.lambdas[k]).unwrap();
            let mut s = String::with_capacity(24 * self.vectors.nrows());
            for v in self.vector(k) {
                writeln!(s, "{v}").unwrap();
            }
            std::fs::write(dir.join(format!("mode_{:04}.txt", k + 1)), s)?;
        }
        std::fs::write(dir.join("index.txt"), index)?;
        Ok(())
    }
}

/// Optimal discrete Poincaré constant `1/√λ₁`.
pub fn poincare_constant(basis: &ModalBasis) -> f64 {
    1.0 / basis.lambdas[0].sqrt()
}

/// The `n_modes` smallest eigenpairs of `K x = λ M x` on boundary-eliminated
/// matrices. Vectors are M-orthonormal columns with a fixed sign convention.
pub fn dirichlet_eigenpairs(
    k: &SparseSymMatrix,
    m: &SparseSymMatrix,
    n_modes: usize,
    opts: &EigenOptions,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = k.dim();
    if m.dim() != n {
        return Err(Error::Argument("K and M differ in dimension".into()));
    }
    if n == 0 {
        return Err(Error::EmptySystem("no degrees of freedom".into()));
    }
    if n_modes == 0 || n_modes > n {
        return Err(Error::Argument(format!(
            "n_modes = {n_modes} must lie in 1..={n}"
        )));
    }
    let block = (2 * n_modes).max(n_modes + 8);
    let (mut lambdas, mut vecs) = if n <= opts.dense_threshold || block >= n {
        dense_eigen(&k.to_dense(), &m.to_dense(), n_modes)?
    } else {
        subspace_iteration(k, m, n_modes, block, opts)?
    };
    canonicalize(&mut lambdas, &mut vecs, m, opts.cluster_tol)?;
    Ok((lambdas, vecs))
}

fn dense_eigen(
    k: &DMatrix<f64>,
    m: &DMatrix<f64>,
    n_modes: usize,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = k.nrows();
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("mass matrix is not positive definite".into()))?;
    let l = chol.l();
    let linv_k = l
        .solve_lower_triangular(k)
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    let c = l
        .solve_lower_triangular(&linv_k.transpose())
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    let c = (&c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(c, 1e-15, 10_000)
        .ok_or_else(|| Error::Spectral("dense symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let lambdas: Vec<f64> = order[..n_modes]
        .iter()
        .map(|&i| eig.eigenvalues[i])
        .collect();
    let y = DMatrix::from_fn(n, n_modes, |r, c| eig.eigenvectors[(r, order[c])]);
    let x = l
        .transpose()
        .solve_upper_triangular(&y)
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    if lambdas[0] <= 0.0 {
        return Err(Error::Spectral(format!(
            "non-positive eigenvalue {}",
            lambdas[0]
        )));
    }
    Ok((lambdas, x))
}

fn sparse_times(a: &SparseSymMatrix, x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.dim();
    let mut out = DMatrix::zeros(n, x.ncols());
    for c in 0..x.ncols() {
        let y = a.matvec(x.column(c).as_slice());
        out.column_mut(c).copy_from_slice(&y);
    }
    out
}

/// `X ← X G^{-1/2}` with `G = XᵀMX`, dropping numerically dependent directions.
fn m_orthonormalize(x: &DMatrix<f64>, mx: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let g = x.transpose() * mx;
    let g = (&g + g.transpose()) * 0.5;
    let eig = SymmetricEigen::new(g);
    let top = eig.eigenvalues.max();
    let keep: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&i| eig.eigenvalues[i] > 1e-13 * top)
        .collect();
    if keep.is_empty() {
        return Err(Error::Spectral("search space collapsed".into()));
    }
    let t = DMatrix::from_fn(x.ncols(), keep.len(), |r, c| {
        eig.eigenvectors[(r, keep[c])] / eig.eigenvalues[keep[c]].sqrt()
    });
    Ok(x * t)
}

fn subspace_iteration(
    k: &SparseSymMatrix,
    m: &SparseSymMatrix,
    n_modes: usize,
    block: usize,
    opts: &EigenOptions,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = k.dim();
    let chol = EnvelopeCholesky::factor(k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut q = DMatrix::from_fn(n, block, |_, _| rng.gen_range(-1.0..1.0));
    let mut last_residual = f64::INFINITY;
    for _iter in 0..opts.max_iter {
        let mq = sparse_times(m, &q);
        let y = chol.solve_many(&mq);
        let my = sparse_times(m, &y);
        let y = m_orthonormalize(&y, &my)?;
        let ky = sparse_times(k, &y);
        let kr = y.transpose() * &ky;
        let kr = (&kr + kr.transpose()) * 0.5;
        let eig = SymmetricEigen::new(kr);
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let v = DMatrix::from_fn(y.ncols(), y.ncols(), |r, c| eig.eigenvectors[(r, order[c])]);
        q = &y * &v;
        if q.ncols() < n_modes {
            return Err(Error::Spectral("search space lost rank".into()));
        }
        let lambdas: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        // residuals of the wanted pairs
        let kq = &ky * &v;
        let mq = sparse_times(m, &q.columns(0, n_modes).into_owned());
        let mut worst: f64 = 0.0;
        for c in 0..n_modes {
            let r = kq.column(c) - mq.column(c) * lambdas[c];
            worst = worst.max(r.norm() / (lambdas[c].abs() * mq.column(c).norm()));
        }
        last_residual = worst;
        if worst < opts.tol {
            if lambdas[0] <= 0.0 {
                return Err(Error::Spectral(format!(
                    "non-positive eigenvalue {}",
                    lambdas[0]
                )));
            }
            return Ok((
                lambdas[..n_modes].to_vec(),
                q.columns(0, n_modes).into_owned(),
            ));
        }
        if q.ncols() < block {
            // refill dropped directions so the block keeps its size
            let extra = DMatrix::from_fn(n, block - q.ncols(), |_, _| rng.gen_range(-1.0..1.0));
            let mut grown = DMatrix::zeros(n, block);
            grown.columns_mut(0, q.ncols()).copy_from(&q);
            grown
                .columns_mut(q.ncols(), extra.ncols())
                .copy_from(&extra);
            q = grown;
        }
    }
    Err(Error::Spectral(format!(
        "subspace iteration did not converge in {} iterations (residual {last_residual:e})",
        opts.max_iter
    )))
}

/// Fixes the basis inside eigenvalue clusters, re-orthonormalizes in the
/// M-inner product and applies the sign convention.
fn canonicalize(
    lambdas: &mut [f64],
    x: &mut DMatrix<f64>,
    m: &SparseSymMatrix,
    cluster_tol: f64,
) -> Result<()> {
    let n_modes = lambdas.len();
    let mut start = 0;
    while start < n_modes {
        let mut end = start + 1;
        while end < n_modes && (lambdas[end] - lambdas[end - 1]) <= cluster_tol * lambdas[end].abs()
        {
            end += 1;
        }
        if end - start > 1 {
            let block = x.columns(start, end - start).into_owned();
            let fixed = pivot_basis(&block);
            x.columns_mut(start, end - start).copy_from(&fixed);
        }
        start = end;
    }
    // modified Gram–Schmidt in the M-inner product, in index order
    for c in 0..n_modes {
        for _pass in 0..2 {
            let mc = m.matvec(x.column(c).as_slice());
            for p in 0..c {
                let proj = crate::sparse::dot(x.column(p).as_slice(), &mc);
                let col_p = x.column(p).into_owned();
                x.column_mut(c).axpy(-proj, &col_p, 1.0);
            }
        }
        let norm = m.quadratic_form(x.column(c).as_slice()).sqrt();
        if !(norm > 0.0) {
            return Err(Error::Spectral("eigenvector with zero norm".into()));
        }
        x.column_mut(c).scale_mut(1.0 / norm);
        let col = x.column(c);
        let big = col.amax();
        let first = col
            .iter()
            .find(|v| v.abs() > 1e-6 * big)
            .copied()
            .unwrap_or(1.0);
        if first < 0.0 {
            x.column_mut(c).neg_mut();
        }
    }
    Ok(())
}

/// Basis of span(block) determined by the subspace alone: the j-th vector is the
/// unit combination peaking at the j-th pivot row, pivots chosen greedily.
fn pivot_basis(block: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, s) = block.shape();
    let mut coeffs: Vec<DVector<f64>> = Vec::with_capacity(s);
    let mut rows = block.clone();
    for _ in 0..s {
        let norms: Vec<f64> = (0..n).map(|i| rows.row(i).norm()).collect();
        let max = norms.iter().cloned().fold(0.0, f64::max);
        let pivot = norms.iter().position(|&v| v >= 0.5 * max).unwrap();
        let c = rows.row(pivot).transpose() / norms[pivot];
        // remove the chosen direction from the coefficient space
        let proj = &rows * &c;
        rows -= proj * c.transpose();
        coeffs.push(c);
    }
    let mut out = DMatrix::zeros(n, s);
    for (j, c) in coeffs.iter().enumerate() {
        out.column_mut(j).copy_from(&(block * c));
    }
    out
}
