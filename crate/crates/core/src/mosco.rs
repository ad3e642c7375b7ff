//! Domain approximation experiment: solve on a sequence `Ω_m → Ω`, extend each
//! solution by zero to an ambient box `Ω*`, and track the weak-form functionals.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domains::{contains_polygon, symmetric_difference_area, DomainSequence, Point, Polygon};
use crate::error::{Error, Result};
use crate::fem::{same_mesh, FemFunction, FemSpace, ZeroExtension};
use crate::linwave::{
    trapezoid, x_norm, Forcing, ModalTrajectory, PhysicalParams, ProblemData, SeparableTerm,
    TimeGrid,
};
use crate::meshing::{triangulate, triangulate_pslg, Mesh};
use crate::spectral::{EigenOptions, ModalBasis};
use crate::westervelt::{
    data_norm, estimate_constants, iterate_westervelt, FixedPointOptions, GateReport,
    QuadratureSampler, SmallnessBudget, TestFunction,
};

/// Centered quadratic B-spline, supported on `|s| < 3/2`.
fn bspline2(s: f64) -> f64 {
    let a = s.abs();
    if a < 0.5 {
        0.75 - a * a
    } else if a < 1.5 {
        0.5 * (1.5 - a) * (1.5 - a)
    } else {
        0.0
    }
}

/// Tensor product of quadratic B-splines; zero outside the square of half-width `1.5·width`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: Point,
    pub width: f64,
}

impl Bump {
    pub fn eval(&self, p: Point) -> f64 {
        bspline2((p.x - self.center.x) / self.width) * bspline2((p.y - self.center.y) / self.width)
            / 0.5625
    }

    pub fn support(&self) -> Result<Polygon> {
        let r = 1.5 * self.width;
        Polygon::rectangle(
            self.center.x - r,
            self.center.y - r,
            self.center.x + r,
            self.center.y + r,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalProfile {
    Constant,
    /// `sin(2πt/T)` over the horizon `T`.
    SinePeriod,
    /// `sin(πt/T)`.
    HalfSine,
}

impl TemporalProfile {
    pub fn eval(&self, t: f64, horizon: f64) -> f64 {
        match self {
            TemporalProfile::Constant => 1.0,
            TemporalProfile::SinePeriod => (std::f64::consts::TAU * t / horizon).sin(),
            TemporalProfile::HalfSine => (std::f64::consts::PI * t / horizon).sin(),
        }
    }

    pub fn sample(&self, grid: &TimeGrid) -> Vec<f64> {
        grid.times()
            .iter()
            .map(|&t| self.eval(t, grid.horizon()))
            .collect()
    }
}

/// Separable test functions `τ(t)·β(x)` with every spatial factor supported in `support`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TestFunctionSet {
    pub support: Polygon,
    pub bumps: Vec<Bump>,
    pub profiles: Vec<TemporalProfile>,
}

fn check_support(support: &Polygon, bumps: &[Bump]) -> Result<()> {
    for b in bumps {
        if !(b.width > 0.0 && b.width.is_finite()) {
            return Err(Error::Validation(format!(
                "bump width must be positive, got {}",
                b.width
            )));
        }
        if !contains_polygon(support, &b.support()?) {
            return Err(Error::Validation(format!(
                "bump at {:?} leaves the support polygon",
                b.center
            )));
        }
    }
    Ok(())
}

/// `K` sits inside `domain` with clearance greater than `h`.
fn check_clearance(support: &Polygon, domain: &Polygon, h: f64) -> Result<()> {
    let inside = contains_polygon(domain, support);
    let clear = support
        .vertices()
        .iter()
        .all(|&p| domain.boundary_distance(p) > h)
        && domain
            .vertices()
            .iter()
            .all(|&p| support.contains_point(p) || support.boundary_distance(p) > h);
    if inside && clear {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "support polygon is not inside the smallest domain with clearance {h}"
        )))
    }
}

impl TestFunctionSet {
    /// Three bumps × {constant, one sine period} in the square of half-width `half` around `center`.
    pub fn standard(center: Point, half: f64) -> Result<Self> {
        let support = Polygon::rectangle(
            center.x - half,
            center.y - half,
            center.x + half,
            center.y + half,
        )?;
        let w = 0.4 * half;
        let off = 0.3 * half;
        let bumps = vec![
            Bump { center, width: w },
            Bump {
                center: center + Point::new(off, -off),
                width: w,
            },
            Bump {
                center: center + Point::new(-off, off),
                width: w,
            },
        ];
        let set = TestFunctionSet {
            support,
            bumps,
            profiles: vec![TemporalProfile::Constant, TemporalProfile::SinePeriod],
        };
        check_support(&set.support, &set.bumps)?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.bumps.len() * self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, smallest: &Polygon, h: f64) -> Result<()> {
        check_support(&self.support, &self.bumps)?;
        check_clearance(&self.support, smallest, h)
    }

    /// Nodal interpolants on `mesh`, bump-major. Values at nodes outside the
    /// support polygon are checked to be exactly zero.
    pub fn materialize(&self, mesh: &Arc<Mesh>, grid: &TimeGrid) -> Result<Vec<TestFunction>> {
        let mut out = Vec::with_capacity(self.len());
        for b in &self.bumps {
            let spatial = FemFunction::interpolate_dirichlet(mesh.clone(), |p| b.eval(p));
            assert_support(&spatial, &self.support)?;
            for prof in &self.profiles {
                out.push(TestFunction::new(spatial.clone(), prof.sample(grid))?);
            }
        }
        Ok(out)
    }
}

fn assert_support(f: &FemFunction, support: &Polygon) -> Result<()> {
    let leak = f
        .mesh()
        .vertices()
        .iter()
        .zip(f.values())
        .any(|(&p, &v)| v != 0.0 && !support.contains_point(p));
    if leak {
        Err(Error::Validation(
            "field is nonzero outside its support polygon".into(),
        ))
    } else {
        Ok(())
    }
}

/// Initial data and forcing built from bumps inside a support polygon, scaled
/// so that the data sit at `gate_fraction` of the smallness gate on every level.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataRecipe {
    pub support: Polygon,
    pub u0: Bump,
    pub u1: Bump,
    pub u1_weight: f64,
    pub forcing: Bump,
    pub forcing_weight: f64,
    pub forcing_profile: TemporalProfile,
    pub gate_fraction: f64,
}

impl DataRecipe {
    pub fn standard(center: Point, half: f64) -> Result<Self> {
        let support = Polygon::rectangle(
            center.x - half,
            center.y - half,
            center.x + half,
            center.y + half,
        )?;
        let w = 0.4 * half;
        let off = 0.25 * half;
        let r = DataRecipe {
            support,
            u0: Bump { center, width: w },
            u1: Bump {
                center: center + Point::new(-off, -off),
                width: w,
            },
            u1_weight: 0.5,
            forcing: Bump {
                center: center + Point::new(off, off),
                width: w,
            },
            forcing_weight: 1.0,
            forcing_profile: TemporalProfile::HalfSine,
            gate_fraction: 0.5,
        };
        r.validate_shape()?;
        Ok(r)
    }

    fn validate_shape(&self) -> Result<()> {
        check_support(&self.support, &[self.u0, self.u1, self.forcing])?;
        if !(self.gate_fraction > 0.0 && self.gate_fraction.is_finite()) {
            return Err(Error::Validation("gate fraction must be positive".into()));
        }
        Ok(())
    }

    /// Data on `mesh` with overall scale `amplitude`.
    pub fn build(&self, mesh: &Arc<Mesh>, grid: TimeGrid, amplitude: f64) -> Result<ProblemData> {
        let field = |b: Bump, w: f64| -> Result<FemFunction> {
            let f = FemFunction::interpolate_dirichlet(mesh.clone(), |p| amplitude * w * b.eval(p));
            assert_support(&f, &self.support)?;
            Ok(f)
        };
        let spatial = field(self.forcing, self.forcing_weight)?;
        let forcing = Forcing::Separable(vec![SeparableTerm {
            spatial,
            temporal: self.forcing_profile.sample(&grid),
        }]);
        ProblemData::new(
            field(self.u0, 1.0)?,
            field(self.u1, self.u1_weight)?,
            forcing,
            grid,
        )
    }
}

/// A space-time P1 field `Σ_k c_k(t) y_k(x)` over nodal fields `y_k` on one mesh.
#[derive(Clone, Debug)]
pub struct SpaceTimeField {
    space: Arc<FemSpace>,
    /// `n_vertices × n_fields`
    fields: DMatrix<f64>,
    grid: TimeGrid,
    /// `[c, c', c'']`, each `n_fields × n_points`
    coeffs: [DMatrix<f64>; 3],
}

impl SpaceTimeField {
    pub fn new(
        space: Arc<FemSpace>,
        fields: DMatrix<f64>,
        grid: TimeGrid,
        coeffs: [DMatrix<f64>; 3],
    ) -> Result<Self> {
        if fields.nrows() != space.mesh().n_vertices() {
            return Err(Error::Validation(
                "field rows differ from the vertex count".into(),
            ));
        }
        if coeffs
            .iter()
            .any(|c| c.shape() != (fields.ncols(), grid.n_points()))
        {
            return Err(Error::Validation(
                "coefficient arrays do not match the fields and grid".into(),
            ));
        }
        Ok(SpaceTimeField {
            space,
            fields,
            grid,
            coeffs,
        })
    }

    /// The trajectory on its own mesh.
    pub fn from_trajectory(u: &ModalTrajectory) -> Self {
        SpaceTimeField {
            space: u.basis().space().clone(),
            fields: u.basis().vectors().clone(),
            grid: *u.grid(),
            coeffs: [u.d().clone(), u.dp().clone(), u.dpp().clone()],
        }
    }

    /// Extension by zero of a trajectory onto another mesh.
    pub fn extended(
        u: &ModalTrajectory,
        ext: &ZeroExtension,
        target: Arc<FemSpace>,
    ) -> Result<Self> {
        if !same_mesh(ext.target(), target.mesh()) {
            return Err(Error::Argument(
                "extension target and space use different meshes".into(),
            ));
        }
        let w = u.basis().vectors();
        let mut fields = DMatrix::zeros(target.mesh().n_vertices(), w.ncols());
        for k in 0..w.ncols() {
            let col: Vec<f64> = w.column(k).iter().copied().collect();
            fields.column_mut(k).copy_from_slice(&ext.apply(&col));
        }
        SpaceTimeField::new(
            target,
            fields,
            *u.grid(),
            [u.d().clone(), u.dp().clone(), u.dpp().clone()],
        )
    }

    pub fn space(&self) -> &Arc<FemSpace> {
        &self.space
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Nodal values of `u`, `u_t`, `u_tt` at grid time `i`.
    pub fn nodal(&self, i: usize) -> [Vec<f64>; 3] {
        self.coeffs
            .each_ref()
            .map(|c| (&self.fields * c.column(i)).iter().copied().collect())
    }

    /// `(∫₀ᵀ ‖self − other‖²_{L²})^{1/2}` on a shared mesh.
    pub fn l2l2_distance(&self, other: &SpaceTimeField) -> Result<f64> {
        if !same_mesh(self.space.mesh(), other.space.mesh()) || self.grid != other.grid {
            return Err(Error::Argument(
                "fields live on different meshes or grids".into(),
            ));
        }
        let np = self.grid.n_points();
        let mass = self.space.mass();
        let per_time: Vec<f64> = (0..np)
            .into_par_iter()
            .map(|i| {
                let a = &self.fields * self.coeffs[0].column(i);
                let b = &other.fields * other.coeffs[0].column(i);
                mass.quadratic_form((a - b).as_slice())
            })
            .collect();
        Ok(trapezoid(&per_time, self.grid.dt).sqrt())
    }
}

/// `F[u, φ] = ∫∫ u_tt φ + c²∇u·∇φ + εν∇u_t·∇φ − αε(u u_tt)φ − αε(u_t)²φ − fφ`
/// for each test function, integrated over the mesh of `u`.
pub fn evaluate_functional(
    u: &SpaceTimeField,
    tests: &[TestFunction],
    forcing: &Forcing,
    params: &PhysicalParams,
) -> Result<Vec<f64>> {
    params.validate()?;
    let space = &u.space;
    for t in tests {
        if !same_mesh(t.spatial.mesh(), space.mesh()) {
            return Err(Error::Validation(
                "test function and solution use different meshes".into(),
            ));
        }
        if t.temporal.len() != u.grid.n_points() {
            return Err(Error::Validation(
                "test profile length differs from the grid".into(),
            ));
        }
    }
    if tests.is_empty() {
        return Ok(vec![]);
    }
    let np = u.grid.n_points();
    let nonlinear = if params.alpha == 0.0 {
        DMatrix::zeros(tests.len(), np)
    } else {
        let sampler = QuadratureSampler::from_nodal(space.mesh(), &u.fields);
        let psi = DMatrix::from_fn(space.mesh().n_vertices(), tests.len(), |r, c| {
            tests[c].spatial.values()[r]
        });
        let psi_q = crate::westervelt::at_quadrature(space.mesh(), &psi);
        sampler.nonlinear_tested_parts(
            [&u.coeffs[0], &u.coeffs[1], &u.coeffs[2]],
            params.alpha * params.eps,
            &psi_q,
        )
    };
    let (c2, ev) = (params.c * params.c, params.damping());
    tests
        .iter()
        .enumerate()
        .map(|(j, t)| {
            let m_psi = space.mass().matvec(t.spatial.values());
            let k_psi = space.stiffness().matvec(t.spatial.values());
            let pm = u.fields.tr_mul(&DVector::from_column_slice(&m_psi));
            let pk = u.fields.tr_mul(&DVector::from_column_slice(&k_psi));
            let integrand: Vec<f64> = (0..np)
                .map(|i| {
                    let a = pm.dot(&u.coeffs[2].column(i));
                    let b = c2 * pk.dot(&u.coeffs[0].column(i));
                    let c = ev * pk.dot(&u.coeffs[1].column(i));
                    t.temporal[i] * (a + b + c - nonlinear[(j, i)] - forcing.tested(i, &m_psi))
                })
                .collect();
            Ok(trapezoid(&integrand, u.grid.dt))
        })
        .collect()
}

/// Settings of [`run_domain_sequence`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MoscoOptions {
    pub h_target: f64,
    pub n_modes: usize,
    pub grid: TimeGrid,
    pub eigen: EigenOptions,
    pub n_probes: usize,
    pub seed: u64,
    /// Gate radius as a fraction of the uniform `r*`.
    pub radius_fraction: f64,
    pub fixed_point: FixedPointOptions,
}

impl Default for MoscoOptions {
    fn default() -> Self {
        MoscoOptions {
            h_target: 0.03,
            n_modes: 64,
            grid: TimeGrid {
                dt: 1e-3,
                n_steps: 1000,
            },
            eigen: EigenOptions::default(),
            n_probes: 64,
            seed: 2024,
            radius_fraction: 0.5,
            fixed_point: FixedPointOptions {
                tol: 1e-10,
                max_iter: 100,
                radius: None,
                override_gate: false,
            },
        }
    }
}

#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelStatus {
    Ok,
    Failed(String),
}

/// One row of the report.
#[derive(Clone, Debug, Serialize)]
pub struct LevelRecord {
    pub m: u32,
    pub is_reference: bool,
    pub n_vertices: usize,
    pub n_triangles: usize,
    pub lambda_1: Option<f64>,
    pub sym_diff_area: f64,
    pub e_m: Option<f64>,
    pub xnorm: Option<f64>,
    #[serde(rename = "F_values")]
    pub f_values: Vec<f64>,
    /// `|F[Eu_m, φ_i] − F[u_ref, φ_i]|`
    #[serde(rename = "F_gaps")]
    pub f_gaps: Vec<f64>,
    pub iterations: Option<usize>,
    pub max_ratio: Option<f64>,
    pub gate: Option<GateReport>,
    pub status: LevelStatus,
}

/// Observed behaviour of the study; these are empirical surrogates, not theorems.
#[derive(Clone, Debug, Serialize)]
pub struct MoscoChecks {
    pub sym_diff_strictly_decreasing: bool,
    /// `e_m` nonincreasing over the last two member levels.
    pub e_final_nonincreasing: bool,
    /// Per test function: `F` gaps to the reference strictly decreasing in `m`.
    pub f_gaps_decreasing: Vec<bool>,
    pub uniform_bound_holds: bool,
    pub max_xnorm: f64,
    pub bound: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MoscoReport {
    pub params: PhysicalParams,
    pub options: MoscoOptions,
    pub recipe: DataRecipe,
    pub test_set: TestFunctionSet,
    pub ambient_vertices: usize,
    pub budget: SmallnessBudget,
    pub radius: f64,
    pub amplitude: f64,
    pub levels: Vec<LevelRecord>,
    pub reference: LevelRecord,
    pub checks: MoscoChecks,
}

impl MoscoReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per level and test function.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("m,is_reference,sym_diff_area,e_m,xnorm,test,F,F_gap,status\n");
        for r in self.levels.iter().chain(std::iter::once(&self.reference)) {
            let status = match &r.status {
                LevelStatus::Ok => "ok".to_string(),
                LevelStatus::Failed(e) => format!("\"failed: {}\"", e.replace('"', "'")),
            };
            if r.f_values.is_empty() {
                writeln!(
                    s,
                    "{},{},{},{},{},,,,{}",
                    r.m,
                    r.is_reference,
                    r.sym_diff_area,
                    opt(r.e_m),
                    opt(r.xnorm),
                    status
                )
                .unwrap();
            }
            for (i, f) in r.f_values.iter().enumerate() {
                let gap = r.f_gaps.get(i).map(|g| g.to_string()).unwrap_or_default();
                writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{}",
                    r.m,
                    r.is_reference,
                    r.sym_diff_area,
                    opt(r.e_m),
                    opt(r.xnorm),
                    i + 1,
                    f,
                    gap,
                    status
                )
                .unwrap();
            }
        }
        s
    }
}

struct Level {
    polygon: Polygon,
    space: Arc<FemSpace>,
    basis: Arc<ModalBasis>,
    budget: SmallnessBudget,
    unit_norm: f64,
}

struct Solved {
    trajectory: ModalTrajectory,
    iterations: usize,
    max_ratio: Option<f64>,
    gate: GateReport,
}

fn prepare_level(
    polygon: &Polygon,
    ambient_mesh: Option<&Mesh>,
    params: &PhysicalParams,
    recipe: &DataRecipe,
    opts: &MoscoOptions,
) -> Result<Level> {
    let mesh = match ambient_mesh {
        Some(a) => a.restrict(polygon)?.0,
        None => triangulate(polygon, opts.h_target)?,
    };
    let space = Arc::new(FemSpace::new(Arc::new(mesh))?);
    let basis = Arc::new(ModalBasis::compute(&space, opts.n_modes, &opts.eigen)?);
    let budget = estimate_constants(
        &basis,
        params,
        opts.grid.horizon(),
        opts.n_probes,
        opts.seed,
    )?;
    let unit = recipe.build(space.mesh(), opts.grid, 1.0)?;
    let unit_norm = data_norm(&unit, &basis)?;
    Ok(Level {
        polygon: polygon.clone(),
        space,
        basis,
        budget,
        unit_norm,
    })
}

fn solve_level(
    level: &Level,
    params: &PhysicalParams,
    recipe: &DataRecipe,
    budget: &SmallnessBudget,
    radius: f64,
    amplitude: f64,
    opts: &MoscoOptions,
) -> Result<(ProblemData, Solved)> {
    let data = recipe.build(level.space.mesh(), opts.grid, amplitude)?;
    let fp = FixedPointOptions {
        radius: Some(radius),
        ..opts.fixed_point
    };
    let out = iterate_westervelt(params, &data, &level.basis, budget, &fp)?;
    let iterations = out.log.iterations();
    let max_ratio = out.log.max_ratio();
    let gate = out.log.gate;
    let (trajectory, _) = out.into_result()?;
    Ok((
        data,
        Solved {
            trajectory,
            iterations,
            max_ratio,
            gate,
        },
    ))
}

fn blank_record(
    m: u32,
    is_reference: bool,
    sym_diff_area: f64,
    status: LevelStatus,
) -> LevelRecord {
    LevelRecord {
        m,
        is_reference,
        n_vertices: 0,
        n_triangles: 0,
        lambda_1: None,
        sym_diff_area,
        e_m: None,
        xnorm: None,
        f_values: vec![],
        f_gaps: vec![],
        iterations: None,
        max_ratio: None,
        gate: None,
        status,
    }
}

/// Runs the study on every member of `seq` and on its limit proxy (the reference).
/// A failing member level is recorded and skipped; a failing reference is an error.
pub fn run_domain_sequence(
    seq: &DomainSequence,
    params: &PhysicalParams,
    recipe: &DataRecipe,
    test_set: &TestFunctionSet,
    opts: &MoscoOptions,
) -> Result<MoscoReport> {
    params.validate()?;
    recipe.validate_shape()?;
    if !(opts.radius_fraction > 0.0 && opts.radius_fraction < 1.0) {
        return Err(Error::Argument("radius fraction must lie in (0, 1)".into()));
    }
    let smallest = &seq.members[0];
    test_set.validate(smallest, opts.h_target)?;
    check_clearance(&recipe.support, smallest, opts.h_target)?;

    let ambient_mesh = match &seq.conforming_segments {
        Some(segs) => triangulate_pslg(&seq.ambient, segs, opts.h_target)?,
        None => triangulate(&seq.ambient, opts.h_target)?,
    };
    let conforming = seq.conforming_segments.as_ref().map(|_| &ambient_mesh);
    let ambient_space = Arc::new(FemSpace::new(Arc::new(ambient_mesh.clone()))?);

    let polygons: Vec<&Polygon> = seq
        .members
        .iter()
        .chain(std::iter::once(&seq.limit_proxy))
        .collect();
    let labels: Vec<u32> = seq
        .labels
        .iter()
        .copied()
        .chain(std::iter::once(seq.limit_label))
        .collect();
    let n_members = seq.members.len();
    let sym_diff: Vec<f64> = polygons
        .iter()
        .map(|p| {
            if std::ptr::eq(*p, &seq.limit_proxy) {
                Ok(0.0)
            } else {
                symmetric_difference_area(&seq.limit_proxy, p)
            }
        })
        .collect::<Result<_>>()?;

    let prepared: Vec<Result<Level>> = polygons
        .par_iter()
        .map(|p| prepare_level(p, conforming, params, recipe, opts))
        .collect();
    let reference_prep = match &prepared[n_members] {
        Ok(l) => l,
        Err(e) => return Err(Error::Numerical(format!("reference level failed: {e}"))),
    };

    let ok_levels: Vec<&Level> = prepared.iter().filter_map(|p| p.as_ref().ok()).collect();
    let mut worst = [0.0f64; 4];
    for l in &ok_levels {
        worst = [
            worst[0].max(l.budget.b1),
            worst[1].max(l.budget.b2),
            worst[2].max(l.budget.c0),
            worst[3].max(l.budget.c1),
        ];
    }
    let budget = SmallnessBudget::new(worst[0], worst[1], worst[2], worst[3], params)?;
    let radius = if budget.r_star.is_finite() {
        opts.radius_fraction * budget.r_star
    } else {
        ok_levels
            .iter()
            .map(|l| budget.radius_for(l.unit_norm))
            .fold(0.0, f64::max)
            / recipe.gate_fraction
    };
    let max_unit = ok_levels.iter().map(|l| l.unit_norm).fold(0.0, f64::max);
    if !(max_unit > 0.0) {
        return Err(Error::Argument("data recipe produces zero data".into()));
    }
    let amplitude = recipe.gate_fraction * budget.gate_threshold(radius) / max_unit;

    let solved: Vec<Result<(ProblemData, Solved)>> = prepared
        .par_iter()
        .map(|p| match p {
            Ok(l) => solve_level(l, params, recipe, &budget, radius, amplitude, opts),
            Err(e) => Err(Error::Numerical(e.to_string())),
        })
        .collect();
    let (ref_data, ref_solved) = match &solved[n_members] {
        Ok(s) => s,
        Err(e) => return Err(Error::Numerical(format!("reference level failed: {e}"))),
    };

    let ref_ext = ZeroExtension::new(
        reference_prep.space.mesh(),
        &reference_prep.polygon,
        &seq.ambient,
        ambient_space.mesh().clone(),
    )?;
    let ref_ambient =
        SpaceTimeField::extended(&ref_solved.trajectory, &ref_ext, ambient_space.clone())?;
    let ref_tests = test_set.materialize(reference_prep.space.mesh(), &opts.grid)?;
    let ref_field = SpaceTimeField::from_trajectory(&ref_solved.trajectory);
    let ref_f = evaluate_functional(&ref_field, &ref_tests, &ref_data.forcing, params)?;

    let records: Vec<LevelRecord> = (0..=n_members)
        .into_par_iter()
        .map(|i| {
            let is_reference = i == n_members;
            let fail = |e: &Error| {
                blank_record(
                    labels[i],
                    is_reference,
                    sym_diff[i],
                    LevelStatus::Failed(e.to_string()),
                )
            };
            let level = match &prepared[i] {
                Ok(l) => l,
                Err(e) => return fail(e),
            };
            let (_, s) = match &solved[i] {
                Ok(s) => s,
                Err(e) => return fail(e),
            };
            let evaluate = || -> Result<(Option<f64>, Vec<f64>)> {
                if is_reference {
                    return Ok((None, ref_f.clone()));
                }
                let ext = ZeroExtension::new(
                    level.space.mesh(),
                    &level.polygon,
                    &seq.ambient,
                    ambient_space.mesh().clone(),
                )?;
                let e_m = SpaceTimeField::extended(&s.trajectory, &ext, ambient_space.clone())?
                    .l2l2_distance(&ref_ambient)?;
                let to_ref = ZeroExtension::new(
                    level.space.mesh(),
                    &level.polygon,
                    &reference_prep.polygon,
                    reference_prep.space.mesh().clone(),
                )?;
                let on_ref =
                    SpaceTimeField::extended(&s.trajectory, &to_ref, reference_prep.space.clone())?;
                Ok((
                    Some(e_m),
                    evaluate_functional(&on_ref, &ref_tests, &ref_data.forcing, params)?,
                ))
            };
            match evaluate() {
                Ok((e_m, f_values)) => LevelRecord {
                    m: labels[i],
                    is_reference,
                    n_vertices: level.space.mesh().n_vertices(),
                    n_triangles: level.space.mesh().n_triangles(),
                    lambda_1: Some(level.basis.lambda(0)),
                    sym_diff_area: sym_diff[i],
                    e_m,
                    xnorm: Some(x_norm(&s.trajectory)),
                    f_gaps: f_values
                        .iter()
                        .zip(&ref_f)
                        .map(|(a, b)| (a - b).abs())
                        .collect(),
                    f_values,
                    iterations: Some(s.iterations),
                    max_ratio: s.max_ratio,
                    gate: Some(s.gate),
                    status: LevelStatus::Ok,
                },
                Err(e) => fail(&e),
            }
        })
        .collect();
    let mut records = records;
    let reference = records.pop().expect("reference record");
    let checks = summarize(&records, &reference, 2.0 * radius, test_set.len());
    Ok(MoscoReport {
        params: *params,
        options: opts.clone(),
        recipe: recipe.clone(),
        test_set: test_set.clone(),
        ambient_vertices: ambient_space.mesh().n_vertices(),
        budget,
        radius,
        amplitude,
        levels: records,
        reference,
        checks,
    })
}

fn summarize(
    levels: &[LevelRecord],
    reference: &LevelRecord,
    bound: f64,
    n_tests: usize,
) -> MoscoChecks {
    let sym_diff_strictly_decreasing = levels
        .windows(2)
        .all(|w| w[1].sym_diff_area < w[0].sym_diff_area);
    let e: Vec<Option<f64>> = levels.iter().map(|r| r.e_m).collect();
    let e_final_nonincreasing = match e.as_slice() {
        [.., Some(a), Some(b)] => b <= a,
        _ => false,
    };
    let f_gaps_decreasing = (0..n_tests)
        .map(|i| {
            let gaps: Option<Vec<f64>> = levels.iter().map(|r| r.f_gaps.get(i).copied()).collect();
            gaps.is_some_and(|g| g.windows(2).all(|w| w[1] < w[0]))
        })
        .collect();
    let all_ok = levels
        .iter()
        .chain(std::iter::once(reference))
        .all(|r| matches!(r.status, LevelStatus::Ok));
    let max_xnorm = levels
        .iter()
        .chain(std::iter::once(reference))
        .filter_map(|r| r.xnorm)
        .fold(0.0, f64::max);
    MoscoChecks {
        sym_diff_strictly_decreasing,
        e_final_nonincreasing,
        f_gaps_decreasing,
        uniform_bound_holds: all_ok && max_xnorm <= bound,
        max_xnorm,
        bound,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::{koch_prefractal, PrefractalSpec};
    use crate::linwave::{solve_linear, SeparableTerm};
    use crate::westervelt::{solve_westervelt, weak_residual};

    #[test]
    fn bump_profile() {
        let b = Bump {
            center: Point::new(0.0, 0.0),
            width: 0.1,
        };
        assert!((b.eval(Point::new(0.0, 0.0)) - 1.0).abs() < 1e-15);
        assert_eq!(b.eval(Point::new(0.151, 0.0)), 0.0);
        assert_eq!(b.eval(Point::new(0.0, -0.2)), 0.0);
        assert!(b.eval(Point::new(0.149, 0.0)) > 0.0);
        assert!(contains_polygon(
            &b.support().unwrap(),
            &Polygon::rectangle(-0.1, -0.1, 0.1, 0.1).unwrap()
        ));
    }

    #[test]
    fn standard_sets_live_in_the_first_snowflake() {
        let omega1 = koch_prefractal(&PrefractalSpec::unit(1)).unwrap();
        let set = TestFunctionSet::standard(Point::new(0.0, 0.0), 0.15).unwrap();
        assert_eq!(set.len(), 6);
        set.validate(&omega1, 0.03).unwrap();
        let far = TestFunctionSet::standard(Point::new(0.4, 0.0), 0.15).unwrap();
        assert!(matches!(far.validate(&omega1, 0.03), Err(Error::Domain(_))));
        let recipe = DataRecipe::standard(Point::new(0.0, 0.0), 0.15).unwrap();
        check_clearance(&recipe.support, &omega1, 0.03).unwrap();
    }

    fn koch_setup() -> (Arc<ModalBasis>, TimeGrid, PhysicalParams) {
        let poly = koch_prefractal(&PrefractalSpec::unit(1)).unwrap();
        let space = Arc::new(FemSpace::new(Arc::new(triangulate(&poly, 0.06).unwrap())).unwrap());
        let basis = Arc::new(ModalBasis::compute(&space, 16, &EigenOptions::default()).unwrap());
        (
            basis,
            TimeGrid::new(0.01, 50).unwrap(),
            PhysicalParams::new(1.0, 1.0, 0.1, 1.0).unwrap(),
        )
    }

    #[test]
    fn functional_matches_weak_residual() {
        let (basis, grid, params) = koch_setup();
        let recipe = DataRecipe::standard(Point::new(0.0, 0.0), 0.15).unwrap();
        let tests = TestFunctionSet::standard(Point::new(0.0, 0.0), 0.15)
            .unwrap()
            .materialize(basis.mesh(), &grid)
            .unwrap();
        let data = recipe.build(basis.mesh(), grid, 1e-3).unwrap();
        for alpha in [0.0, 1.0] {
            let p = PhysicalParams { alpha, ..params };
            let u = if alpha == 0.0 {
                solve_linear(&p, &data, &basis).unwrap()
            } else {
                let budget = estimate_constants(&basis, &p, grid.horizon(), 16, 3).unwrap();
                let opts = FixedPointOptions {
                    override_gate: true,
                    ..Default::default()
                };
                solve_westervelt(&p, &data, &basis, &budget, &opts)
                    .unwrap()
                    .0
            };
            let f = evaluate_functional(
                &SpaceTimeField::from_trajectory(&u),
                &tests,
                &data.forcing,
                &p,
            )
            .unwrap();
            let w = weak_residual(&u, &data, &p, &tests).unwrap();
            for (a, b) in f.iter().zip(&w.values) {
                assert!((a - b).abs() < 1e-10, "alpha {alpha}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn functional_of_zero_test_is_zero() {
        let (basis, grid, params) = koch_setup();
        let data = DataRecipe::standard(Point::new(0.0, 0.0), 0.15)
            .unwrap()
            .build(basis.mesh(), grid, 1e-3)
            .unwrap();
        let u = solve_linear(&params, &data, &basis).unwrap();
        let zero = TestFunction::new(
            FemFunction::zeros(basis.mesh().clone()),
            vec![1.0; grid.n_points()],
        )
        .unwrap();
        assert_eq!(
            evaluate_functional(
                &SpaceTimeField::from_trajectory(&u),
                &[zero],
                &data.forcing,
                &params
            )
            .unwrap(),
            vec![0.0]
        );
    }

    #[test]
    fn functional_rejects_foreign_test_functions() {
        let (basis, grid, params) = koch_setup();
        let other = Arc::new(triangulate(&Polygon::unit_square(), 0.2).unwrap());
        let t = TestFunction::new(FemFunction::zeros(other), vec![0.0; grid.n_points()]).unwrap();
        let u = ModalTrajectory::zeros(basis, grid);
        let f = SpaceTimeField::from_trajectory(&u);
        assert!(matches!(
            evaluate_functional(&f, &[t], &Forcing::Zero, &params),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn distance_to_itself_is_zero() {
        let (basis, grid, params) = koch_setup();
        let spatial = FemFunction::new(basis.mesh().clone(), basis.vector(0).to_vec()).unwrap();
        let forcing = Forcing::Separable(vec![SeparableTerm {
            spatial,
            temporal: vec![1.0; grid.n_points()],
        }]);
        let data = ProblemData::new(
            FemFunction::zeros(basis.mesh().clone()),
            FemFunction::zeros(basis.mesh().clone()),
            forcing,
            grid,
        )
        .unwrap();
        let u = SpaceTimeField::from_trajectory(&solve_linear(&params, &data, &basis).unwrap());
        assert_eq!(u.l2l2_distance(&u).unwrap(), 0.0);
        let z = SpaceTimeField::from_trajectory(&ModalTrajectory::zeros(basis.clone(), grid));
        assert!(u.l2l2_distance(&z).unwrap() > 0.0);
    }

    #[test]
    fn small_study_reports_every_level() {
        let seq = DomainSequence::koch(PrefractalSpec::unit(0), 1..=2, 3, 0.1, None).unwrap();
        let params = PhysicalParams::new(1.0, 1.0, 0.1, 1.0).unwrap();
        let opts = MoscoOptions {
            h_target: 0.08,
            n_modes: 12,
            grid: TimeGrid::new(0.02, 25).unwrap(),
            n_probes: 16,
            ..Default::default()
        };
        let recipe = DataRecipe::standard(Point::new(0.0, 0.0), 0.15).unwrap();
        let set = TestFunctionSet::standard(Point::new(0.0, 0.0), 0.15).unwrap();
        let report = run_domain_sequence(&seq, &params, &recipe, &set, &opts).unwrap();
        assert_eq!(report.levels.len(), 2);
        assert_eq!(report.reference.m, 3);
        assert!(report.checks.sym_diff_strictly_decreasing);
        assert!(report.checks.uniform_bound_holds);
        for r in &report.levels {
            assert!(matches!(r.status, LevelStatus::Ok));
            assert_eq!(r.f_values.len(), 6);
            assert!(r.e_m.unwrap().is_finite());
            assert!(r.gate.unwrap().passed);
        }
        let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(json["levels"].as_array().unwrap().len(), 2);
        assert!(json["levels"][0]["F_values"].is_array());
        assert_eq!(report.to_csv().lines().count(), 1 + 3 * 6);
    }
}
