//! P1 finite elements: assembly, norms, L² projection and zero extension.

use std::sync::{Arc, OnceLock};

use rayon::prelude::*;

use crate::domains::{contains_polygon, Point, Polygon};
use crate::error::{Error, Result};
use crate::meshing::Mesh;
use crate::sparse::{dot, EnvelopeCholesky, SparseSymMatrix};

/// Barycentric coordinates of the three points of the order-2 rule.
pub const QUAD_BARY: [[f64; 3]; 3] = [
    [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
    [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
    [1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0],
];

/// A P1 function: one coefficient per mesh vertex.
#[derive(Clone, Debug)]
pub struct FemFunction {
    mesh: Arc<Mesh>,
    values: Vec<f64>,
    dirichlet_zero: bool,
}

impl PartialEq for FemFunction {
    fn eq(&self, other: &Self) -> bool {
        same_mesh(&self.mesh, &other.mesh)
            && self.values == other.values
            && self.dirichlet_zero == other.dirichlet_zero
    }
}

/// Pointer equality, falling back to structural equality.
pub fn same_mesh(a: &Arc<Mesh>, b: &Arc<Mesh>) -> bool {
    Arc::ptr_eq(a, b) || **a == **b
}

impl FemFunction {
    pub fn new(mesh: Arc<Mesh>, values: Vec<f64>) -> Result<Self> {
        if values.len() != mesh.n_vertices() {
            return Err(Error::Validation(format!(
                "expected {} nodal values, got {}",
                mesh.n_vertices(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("nodal values must be finite".into()));
        }
        Ok(FemFunction {
            mesh,
            values,
            dirichlet_zero: false,
        })
    }

    /// A function in the discrete H¹₀: boundary coefficients must be exactly 0.
    pub fn new_dirichlet(mesh: Arc<Mesh>, values: Vec<f64>) -> Result<Self> {
        let mut f = FemFunction::new(mesh, values)?;
        if let Some(i) = f
            .mesh
            .boundary_flags()
            .iter()
            .zip(&f.values)
            .position(|(&b, &v)| b && v != 0.0)
        {
            return Err(Error::Validation(format!(
                "boundary vertex {i} carries a nonzero value"
            )));
        }
        f.dirichlet_zero = true;
        Ok(f)
    }

    pub fn zeros(mesh: Arc<Mesh>) -> Self {
        let n = mesh.n_vertices();
        FemFunction {
            mesh,
            values: vec![0.0; n],
            dirichlet_zero: true,
        }
    }

    /// Nodal interpolant of `f`.
    pub fn interpolate(mesh: Arc<Mesh>, mut f: impl FnMut(Point) -> f64) -> Self {
        let values = mesh.vertices().iter().map(|&p| f(p)).collect();
        FemFunction {
            mesh,
            values,
            dirichlet_zero: false,
        }
    }

    /// Nodal interpolant of `f` with boundary values set to 0.
    pub fn interpolate_dirichlet(mesh: Arc<Mesh>, mut f: impl FnMut(Point) -> f64) -> Self {
        let values = mesh
            .vertices()
            .iter()
            .zip(mesh.boundary_flags())
            .map(|(&p, &b)| if b { 0.0 } else { f(p) })
            .collect();
        FemFunction {
            mesh,
            values,
            dirichlet_zero: true,
        }
    }

    /// Full nodal vector from interior coefficients.
    pub fn from_interior(mesh: Arc<Mesh>, map: &DirichletMap, interior: &[f64]) -> Self {
        let values = map.embed(interior);
        FemFunction {
            mesh,
            values,
            dirichlet_zero: true,
        }
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_dirichlet_zero(&self) -> bool {
        self.dirichlet_zero
    }

    /// Linear combination `a·self + b·other` on the same mesh.
    pub fn combine(&self, a: f64, other: &FemFunction, b: f64) -> Result<FemFunction> {
        if !same_mesh(&self.mesh, &other.mesh) {
            return Err(Error::Argument("functions live on different meshes".into()));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(FemFunction {
            mesh: self.mesh.clone(),
            values,
            dirichlet_zero: self.dirichlet_zero && other.dirichlet_zero,
        })
    }

    /// Value at an arbitrary point, `None` outside the mesh.
    pub fn eval(&self, x: Point) -> Option<f64> {
        let (t, l) = self.mesh.locate_point(x)?;
        let tri = self.mesh.triangles()[t];
        Some(l[0] * self.values[tri[0]] + l[1] * self.values[tri[1]] + l[2] * self.values[tri[2]])
    }
}

fn element_matrices(mesh: &Mesh, kind: fn(&[Point; 3]) -> [[f64; 3]; 3]) -> Vec<[[f64; 3]; 3]> {
    (0..mesh.n_triangles())
        .into_par_iter()
        .map(|t| kind(&mesh.triangle_points(t)))
        .collect()
}

fn assemble(mesh: &Mesh, elems: Vec<[[f64; 3]; 3]>) -> SparseSymMatrix {
    let mut triplets = Vec::with_capacity(9 * elems.len());
    for (tri, e) in mesh.triangles().iter().zip(&elems) {
        for a in 0..3 {
            for b in 0..3 {
                triplets.push((tri[a], tri[b], e[a][b]));
            }
        }
    }
    SparseSymMatrix::from_triplets(mesh.n_vertices(), triplets)
        .expect("element assembly is symmetric")
}

pub fn element_mass(p: &[Point; 3]) -> [[f64; 3]; 3] {
    let area = 0.5 * (p[1] - p[0]).cross(p[2] - p[0]);
    let d = area / 6.0;
    let o = area / 12.0;
    [[d, o, o], [o, d, o], [o, o, d]]
}

pub fn element_stiffness(p: &[Point; 3]) -> [[f64; 3]; 3] {
    let area = 0.5 * (p[1] - p[0]).cross(p[2] - p[0]);
    let e = [p[2] - p[1], p[0] - p[2], p[1] - p[0]];
    let mut k = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            k[a][b] = e[a].dot(e[b]) / (4.0 * area);
        }
    }
    k
}

/// Consistent P1 mass matrix. Bit-identical for any thread count.
pub fn assemble_mass(m: &Mesh) -> SparseSymMatrix {
    assemble(m, element_matrices(m, element_mass))
}

/// P1 stiffness matrix `(∇φ_i, ∇φ_j)`.
pub fn assemble_stiffness(m: &Mesh) -> SparseSymMatrix {
    assemble(m, element_matrices(m, element_stiffness))
}

/// Index map between all vertices and the interior (non-Dirichlet) ones.
#[derive(Clone, Debug, PartialEq)]
pub struct DirichletMap {
    n_full: usize,
    interior: Vec<usize>,
}

impl DirichletMap {
    pub fn new(m: &Mesh) -> Result<Self> {
        let interior = m.interior_indices();
        if interior.is_empty() {
            return Err(Error::EmptySystem("mesh has no interior vertices".into()));
        }
        Ok(DirichletMap {
            n_full: m.n_vertices(),
            interior,
        })
    }

    pub fn n_interior(&self) -> usize {
        self.interior.len()
    }

    pub fn n_full(&self) -> usize {
        self.n_full
    }

    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.interior.iter().map(|&i| full[i]).collect()
    }

    pub fn embed(&self, reduced: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.n_full];
        for (&i, &v) in self.interior.iter().zip(reduced) {
            full[i] = v;
        }
        full
    }
}

/// Eliminates boundary rows and columns.
pub fn apply_dirichlet(mat: &SparseSymMatrix, m: &Mesh) -> Result<(SparseSymMatrix, DirichletMap)> {
    if mat.dim() != m.n_vertices() {
        return Err(Error::Argument("matrix and mesh sizes differ".into()));
    }
    let map = DirichletMap::new(m)?;
    Ok((mat.principal_submatrix(&map.interior), map))
}

/// `L²`, `H¹` seminorm and nodal max-norm of a P1 function.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct Norms {
    pub l2: f64,
    pub h1_semi: f64,
    pub linf: f64,
}

/// Norms of `u`, assembling the matrices on the fly. See [`FemSpace::norms`].
pub fn norms(u: &FemFunction) -> Norms {
    let m = assemble_mass(u.mesh());
    let k = assemble_stiffness(u.mesh());
    norms_with(u.values(), &m, &k)
}

fn norms_with(v: &[f64], m: &SparseSymMatrix, k: &SparseSymMatrix) -> Norms {
    Norms {
        l2: m.quadratic_form(v).max(0.0).sqrt(),
        h1_semi: k.quadratic_form(v).max(0.0).sqrt(),
        linf: v.iter().fold(0.0f64, |a, x| a.max(x.abs())),
    }
}

/// A mesh together with its assembled matrices and Dirichlet map.
#[derive(Debug)]
pub struct FemSpace {
    mesh: Arc<Mesh>,
    mass: SparseSymMatrix,
    stiffness: SparseSymMatrix,
    map: DirichletMap,
    mass_chol: OnceLock<std::result::Result<EnvelopeCholesky, String>>,
}

impl FemSpace {
    pub fn new(mesh: Arc<Mesh>) -> Result<Self> {
        let map = DirichletMap::new(&mesh)?;
        let mass = assemble_mass(&mesh);
        let stiffness = assemble_stiffness(&mesh);
        Ok(FemSpace {
            mesh,
            mass,
            stiffness,
            map,
            mass_chol: OnceLock::new(),
        })
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn mass(&self) -> &SparseSymMatrix {
        &self.mass
    }

    pub fn stiffness(&self) -> &SparseSymMatrix {
        &self.stiffness
    }

    pub fn dirichlet_map(&self) -> &DirichletMap {
        &self.map
    }

    /// Boundary-eliminated stiffness and mass.
    pub fn reduced_matrices(&self) -> (SparseSymMatrix, SparseSymMatrix) {
        (
            self.stiffness.principal_submatrix(self.map.interior()),
            self.mass.principal_submatrix(self.map.interior()),
        )
    }

    pub fn norms(&self, u: &FemFunction) -> Result<Norms> {
        self.check(u)?;
        Ok(norms_with(u.values(), &self.mass, &self.stiffness))
    }

    /// `(u, v)_{L²}`.
    pub fn l2_inner(&self, u: &[f64], v: &[f64]) -> f64 {
        self.mass.bilinear(u, v)
    }

    pub fn check(&self, u: &FemFunction) -> Result<()> {
        if same_mesh(&self.mesh, u.mesh()) {
            Ok(())
        } else {
            Err(Error::Argument(
                "function is defined on a different mesh".into(),
            ))
        }
    }

    fn mass_factor(&self) -> Result<&EnvelopeCholesky> {
        self.mass_chol
            .get_or_init(|| EnvelopeCholesky::factor(&self.mass).map_err(|e| e.to_string()))
            .as_ref()
            .map_err(|e| Error::Numerical(e.clone()))
    }

    /// Solves `M p = b` on all vertices.
    pub fn solve_mass(&self, b: &[f64]) -> Result<Vec<f64>> {
        let chol = self.mass_factor()?;
        let mut p = chol.solve(b);
        // one step of refinement keeps the residual at roundoff level
        let r: Vec<f64> = self
            .mass
            .matvec(&p)
            .iter()
            .zip(b)
            .map(|(mp, bi)| bi - mp)
            .collect();
        let dp = chol.solve(&r);
        p.iter_mut().zip(&dp).for_each(|(x, d)| *x += d);
        let r2: Vec<f64> = self
            .mass
            .matvec(&p)
            .iter()
            .zip(b)
            .map(|(mp, bi)| bi - mp)
            .collect();
        let bn = dot(b, b).sqrt();
        let rn = dot(&r2, &r2).sqrt();
        if !(rn <= 1e-12 * bn.max(f64::MIN_POSITIVE)) && rn > 0.0 {
            return Err(Error::Numerical(format!(
                "mass solve residual {rn:e} exceeds 1e-12 relative"
            )));
        }
        Ok(p)
    }

    /// Quadrature points, three per triangle in triangle order.
    pub fn quadrature_points(&self) -> Vec<Point> {
        quadrature_points(&self.mesh)
    }

    /// `b_i = Σ_T Σ_q w_q g(x_q) φ_i(x_q)` for samples `g` at [`quadrature_points`].
    pub fn quadrature_load(&self, values_at_quadrature: &[f64]) -> Result<Vec<f64>> {
        quadrature_load(&self.mesh, values_at_quadrature)
    }

    /// L² projection of quadrature samples onto the full P1 space.
    pub fn l2_project(&self, values_at_quadrature: &[f64]) -> Result<FemFunction> {
        let b = self.quadrature_load(values_at_quadrature)?;
        let p = self.solve_mass(&b)?;
        FemFunction::new(self.mesh.clone(), p)
    }
}

pub fn quadrature_points(mesh: &Mesh) -> Vec<Point> {
    let mut q = Vec::with_capacity(3 * mesh.n_triangles());
    for t in 0..mesh.n_triangles() {
        let [a, b, c] = mesh.triangle_points(t);
        for l in QUAD_BARY {
            q.push(a * l[0] + b * l[1] + c * l[2]);
        }
    }
    q
}

pub fn quadrature_load(mesh: &Mesh, g: &[f64]) -> Result<Vec<f64>> {
    if g.len() != 3 * mesh.n_triangles() {
        return Err(Error::Argument(format!(
            "expected {} quadrature samples, got {}",
            3 * mesh.n_triangles(),
            g.len()
        )));
    }
    let mut b = vec![0.0; mesh.n_vertices()];
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let w = mesh.triangle_area(t) / 3.0;
        for (q, l) in QUAD_BARY.iter().enumerate() {
            let gq = w * g[3 * t + q];
            for k in 0..3 {
                b[tri[k]] += gq * l[k];
            }
        }
    }
    Ok(b)
}

/// L² projection of quadrature samples onto P1 on `m` (assembles a mass matrix).
pub fn l2_project(values_at_quadrature: &[f64], m: &Arc<Mesh>) -> Result<FemFunction> {
    let b = quadrature_load(m, values_at_quadrature)?;
    let mass = assemble_mass(m);
    let chol = EnvelopeCholesky::factor(&mass)?;
    let p = chol.solve(&b);
    let r: Vec<f64> = mass.matvec(&p).iter().zip(&b).map(|(x, y)| y - x).collect();
    let (rn, bn) = (dot(&r, &r).sqrt(), dot(&b, &b).sqrt());
    if rn > 1e-12 * bn {
        return Err(Error::Numerical(format!(
            "mass solve residual {rn:e} exceeds 1e-12 relative"
        )));
    }
    FemFunction::new(m.clone(), p)
}

/// Interpolation operator from a domain mesh to ambient vertices, 0 outside.
#[derive(Clone, Debug)]
pub struct ZeroExtension {
    source_vertices: usize,
    target: Arc<Mesh>,
    rows: Vec<Option<([usize; 3], [f64; 3])>>,
}

impl ZeroExtension {
    /// Checks `domain ⊆ ambient_domain` and locates every ambient vertex in `source`.
    pub fn new(
        source: &Mesh,
        domain: &Polygon,
        ambient_domain: &Polygon,
        ambient: Arc<Mesh>,
    ) -> Result<Self> {
        if !contains_polygon(ambient_domain, domain) {
            return Err(Error::Domain(
                "domain is not contained in the ambient domain".into(),
            ));
        }
        let rows = ambient
            .vertices()
            .par_iter()
            .map(|&x| {
                source
                    .locate_point(x)
                    .map(|(t, l)| (source.triangles()[t], l))
            })
            .collect();
        Ok(ZeroExtension {
            source_vertices: source.n_vertices(),
            target: ambient,
            rows,
        })
    }

    pub fn target(&self) -> &Arc<Mesh> {
        &self.target
    }

    /// Ambient vertices that fall inside the source mesh.
    pub fn inside(&self) -> Vec<bool> {
        self.rows.iter().map(Option::is_some).collect()
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        assert_eq!(values.len(), self.source_vertices);
        self.rows
            .iter()
            .map(|r| match r {
                Some((tri, l)) => {
                    l[0] * values[tri[0]] + l[1] * values[tri[1]] + l[2] * values[tri[2]]
                }
                None => 0.0,
            })
            .collect()
    }
}

/// Extension by zero of `u` (on a mesh of `domain`) to the ambient mesh.
pub fn extend_by_zero(
    u: &FemFunction,
    domain: &Polygon,
    ambient_domain: &Polygon,
    ambient: &Arc<Mesh>,
) -> Result<FemFunction> {
    let ext = ZeroExtension::new(u.mesh(), domain, ambient_domain, ambient.clone())?;
    let values = ext.apply(u.values());
    FemFunction::new(ambient.clone(), values)
}
