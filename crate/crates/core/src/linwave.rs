//! Strongly damped wave equation `u_tt − c²Δu − ενΔu_t = f` by modal Galerkin
//! decomposition with an exact exponential propagator per mode.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{same_mesh, FemFunction, FemSpace};
use crate::spectral::ModalBasis;

/// Coefficients of the Westervelt family. The linear problem ignores `alpha`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicalParams {
    pub c: f64,
    pub nu: f64,
    pub eps: f64,
    pub alpha: f64,
}

impl Default for PhysicalParams {
    fn default() -> Self {
        PhysicalParams {
            c: 1.0,
            nu: 1.0,
            eps: 1e-2,
            alpha: 1.0,
        }
    }
}

impl PhysicalParams {
    pub fn new(c: f64, nu: f64, eps: f64, alpha: f64) -> Result<Self> {
        let p = PhysicalParams { c, nu, eps, alpha };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("c", self.c), ("nu", self.nu), ("eps", self.eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Validation(format!(
                "alpha must be non-negative and finite, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Damping coefficient `εν`.
    pub fn damping(&self) -> f64 {
        self.eps * self.nu
    }
}

/// Uniform grid `t_i = i·dt`, `i = 0..=n_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub dt: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Argument(format!(
                "dt must be positive and finite, got {dt}"
            )));
        }
        if n_steps == 0 {
            return Err(Error::Argument(
                "the time grid needs at least one step".into(),
            ));
        }
        Ok(TimeGrid { dt, n_steps })
    }

    /// Grid covering `[0, horizon]` with step close to `dt`.
    pub fn covering(horizon: f64, dt: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Argument(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        let n = (horizon / dt).round().max(1.0) as usize;
        TimeGrid::new(horizon / n as f64, n)
    }

    pub fn n_points(&self) -> usize {
        self.n_steps + 1
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.time(self.n_steps)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_points()).map(|i| self.time(i)).collect()
    }
}

/// Composite trapezoid rule on a uniform grid.
pub fn trapezoid(values: &[f64], dt: f64) -> f64 {
    match values.len() {
        0 | 1 => 0.0,
        n => dt * (0.5 * (values[0] + values[n - 1]) + values[1..n - 1].iter().sum::<f64>()),
    }
}

/// A spatial profile times a sampled temporal profile.
#[derive(Clone, Debug)]
pub struct SeparableTerm {
    pub spatial: FemFunction,
    pub temporal: Vec<f64>,
}

/// Source term sampled on the time grid, linear between samples.
#[derive(Clone, Debug)]
pub enum Forcing {
    Zero,
    /// One nodal field per grid time.
    Nodal(Vec<FemFunction>),
    /// `Σ_j temporal_j(t)·spatial_j(x)`.
    Separable(Vec<SeparableTerm>),
}

impl Forcing {
    fn validate(&self, grid: &TimeGrid, space: &FemSpace) -> Result<()> {
        let check_mesh = |f: &FemFunction| space.check(f);
        match self {
            Forcing::Zero => Ok(()),
            Forcing::Nodal(samples) => {
                if samples.len() != grid.n_points() {
                    return Err(Error::Argument(format!(
                        "forcing has {} samples, the grid has {} times",
                        samples.len(),
                        grid.n_points()
                    )));
                }
                samples.iter().try_for_each(check_mesh)
            }
            Forcing::Separable(terms) => {
                for t in terms {
                    check_mesh(&t.spatial)?;
                    if t.temporal.len() != grid.n_points() {
                        return Err(Error::Argument(
                            "temporal profile length differs from the grid".into(),
                        ));
                    }
                    if t.temporal.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Argument("temporal profile is not finite".into()));
                    }
                }
                Ok(())
            }
        }
    }

    /// Modal coefficients `f^k(t_i) = (f(t_i), w_k)`, one column per time.
    pub fn modal(&self, basis: &ModalBasis, n_points: usize) -> DMatrix<f64> {
        let k = basis.len();
        match self {
            Forcing::Zero => DMatrix::zeros(k, n_points),
            Forcing::Nodal(samples) => {
                let cols: Vec<Vec<f64>> = samples
                    .par_iter()
                    .map(|f| basis.project(f.values()))
                    .collect();
                DMatrix::from_fn(k, n_points, |r, c| cols[c][r])
            }
            Forcing::Separable(terms) => {
                let mut out = DMatrix::zeros(k, n_points);
                for t in terms {
                    let p = DVector::from_vec(basis.project(t.spatial.values()));
                    let tau = DVector::from_column_slice(&t.temporal);
                    out += p * tau.transpose();
                }
                out
            }
        }
    }

    /// `‖f(t_i)‖²_{L²}` for every grid time.
    pub fn l2_sq(&self, space: &FemSpace, n_points: usize) -> Vec<f64> {
        match self {
            Forcing::Zero => vec![0.0; n_points],
            Forcing::Nodal(samples) => samples
                .par_iter()
                .map(|f| space.mass().quadratic_form(f.values()))
                .collect(),
            Forcing::Separable(terms) => {
                let mf: Vec<Vec<f64>> = terms
                    .iter()
                    .map(|t| space.mass().matvec(t.spatial.values()))
                    .collect();
                let gram = DMatrix::from_fn(terms.len(), terms.len(), |a, b| {
                    crate::sparse::dot(terms[a].spatial.values(), &mf[b])
                });
                (0..n_points)
                    .map(|i| {
                        let tau = DVector::from_iterator(
                            terms.len(),
                            terms.iter().map(|t| t.temporal[i]),
                        );
                        tau.dot(&(&gram * &tau))
                    })
                    .collect()
            }
        }
    }

    /// Nodal values at grid time `i`.
    pub fn nodal(&self, i: usize, n_vertices: usize) -> Vec<f64> {
        match self {
            Forcing::Zero => vec![0.0; n_vertices],
            Forcing::Nodal(samples) => samples[i].values().to_vec(),
            Forcing::Separable(terms) => {
                let mut out = vec![0.0; n_vertices];
                for t in terms {
                    let s = t.temporal[i];
                    out.iter_mut()
                        .zip(t.spatial.values())
                        .for_each(|(o, v)| *o += s * v);
                }
                out
            }
        }
    }

    /// `(f(t_i), ψ)` given `Mψ`.
    pub fn tested(&self, i: usize, mass_psi: &[f64]) -> f64 {
        match self {
            Forcing::Zero => 0.0,
            Forcing::Nodal(samples) => crate::sparse::dot(samples[i].values(), mass_psi),
            Forcing::Separable(terms) => terms
                .iter()
                .map(|t| t.temporal[i] * crate::sparse::dot(t.spatial.values(), mass_psi))
                .sum(),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Forcing::Zero => true,
            Forcing::Nodal(s) => s.iter().all(|f| f.values().iter().all(|&v| v == 0.0)),
            Forcing::Separable(t) => t.iter().all(|t| {
                t.temporal.iter().all(|&v| v == 0.0) || t.spatial.values().iter().all(|&v| v == 0.0)
            }),
        }
    }
}

/// Initial data, forcing and time grid of one problem.
#[derive(Clone, Debug)]
pub struct ProblemData {
    pub u0: FemFunction,
    pub u1: FemFunction,
    pub forcing: Forcing,
    pub grid: TimeGrid,
}

impl ProblemData {
    pub fn new(u0: FemFunction, u1: FemFunction, forcing: Forcing, grid: TimeGrid) -> Result<Self> {
        if !u0.is_dirichlet_zero() || !u1.is_dirichlet_zero() {
            return Err(Error::Validation(
                "initial data must vanish on the boundary".into(),
            ));
        }
        if !same_mesh(u0.mesh(), u1.mesh()) {
            return Err(Error::Argument("u0 and u1 live on different meshes".into()));
        }
        TimeGrid::new(grid.dt, grid.n_steps)?;
        Ok(ProblemData {
            u0,
            u1,
            forcing,
            grid,
        })
    }

    fn validate_against(&self, basis: &ModalBasis) -> Result<()> {
        let space = basis.space();
        space.check(&self.u0)?;
        space.check(&self.u1)?;
        self.forcing.validate(&self.grid, space)
    }
}

/// Galerkin coefficients `d_k(t_i)`, `d'_k(t_i)`, `d''_k(t_i)` as `K × (N+1)` matrices.
#[derive(Clone, Debug)]
pub struct ModalTrajectory {
    basis: Arc<ModalBasis>,
    grid: TimeGrid,
    d: DMatrix<f64>,
    dp: DMatrix<f64>,
    dpp: DMatrix<f64>,
}

impl ModalTrajectory {
    /// A user-prescribed trajectory; the three arrays are taken as given.
    pub fn prescribed(
        basis: Arc<ModalBasis>,
        grid: TimeGrid,
        d: DMatrix<f64>,
        dp: DMatrix<f64>,
        dpp: DMatrix<f64>,
    ) -> Result<Self> {
        let shape = (basis.len(), grid.n_points());
        if d.shape() != shape || dp.shape() != shape || dpp.shape() != shape {
            return Err(Error::Argument(format!(
                "trajectory arrays must be {} × {}",
                shape.0, shape.1
            )));
        }
        if d.iter()
            .chain(dp.iter())
            .chain(dpp.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Argument(
                "trajectory contains non-finite values".into(),
            ));
        }
        Ok(ModalTrajectory {
            basis,
            grid,
            d,
            dp,
            dpp,
        })
    }

    /// Builds `d''` from the modal equation so the ODE identity holds exactly.
    fn from_ode(
        basis: Arc<ModalBasis>,
        grid: TimeGrid,
        params: &PhysicalParams,
        d: DMatrix<f64>,
        dp: DMatrix<f64>,
        f: &DMatrix<f64>,
    ) -> Self {
        let mut dpp = DMatrix::zeros(d.nrows(), d.ncols());
        for k in 0..d.nrows() {
            let lam = basis.lambda(k);
            let (a, b) = (params.damping() * lam, params.c * params.c * lam);
            for i in 0..d.ncols() {
                dpp[(k, i)] = f[(k, i)] - a * dp[(k, i)] - b * d[(k, i)];
            }
        }
        ModalTrajectory {
            basis,
            grid,
            d,
            dp,
            dpp,
        }
    }

    pub fn zeros(basis: Arc<ModalBasis>, grid: TimeGrid) -> Self {
        let z = DMatrix::zeros(basis.len(), grid.n_points());
        ModalTrajectory {
            basis,
            grid,
            d: z.clone(),
            dp: z.clone(),
            dpp: z,
        }
    }

    pub fn basis(&self) -> &Arc<ModalBasis> {
        &self.basis
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_modes(&self) -> usize {
        self.d.nrows()
    }

    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn dp(&self) -> &DMatrix<f64> {
        &self.dp
    }

    pub fn dpp(&self) -> &DMatrix<f64> {
        &self.dpp
    }

    fn compatible(&self, other: &ModalTrajectory) -> Result<()> {
        if self.grid != other.grid || self.d.shape() != other.d.shape() {
            return Err(Error::Argument(
                "trajectories use different grids or mode counts".into(),
            ));
        }
        if !Arc::ptr_eq(&self.basis, &other.basis) && self.basis.lambdas() != other.basis.lambdas()
        {
            return Err(Error::Argument("trajectories use different bases".into()));
        }
        Ok(())
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &ModalTrajectory, b: f64) -> Result<ModalTrajectory> {
        self.compatible(other)?;
        Ok(ModalTrajectory {
            basis: self.basis.clone(),
            grid: self.grid,
            d: &self.d * a + &other.d * b,
            dp: &self.dp * a + &other.dp * b,
            dpp: &self.dpp * a + &other.dpp * b,
        })
    }

    /// Nodal `u`, `u_t`, `u_tt` for grid times `start..start+len`, one column per time.
    pub fn nodal_block(&self, start: usize, len: usize) -> [DMatrix<f64>; 3] {
        let w = self.basis.vectors();
        [&self.d, &self.dp, &self.dpp].map(|m| w * m.columns(start, len))
    }

    /// CSV with header `t,k,d,dp,dpp`; `k` counts modes from 1.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,k,d,dp,dpp\n");
        for i in 0..self.grid.n_points() {
            let t = self.grid.time(i);
            for k in 0..self.n_modes() {
                // `+ 0.0` folds −0 into 0 so that equal values print identically.
                let (d, dp, dpp) = (
                    self.d[(k, i)] + 0.0,
                    self.dp[(k, i)] + 0.0,
                    self.dpp[(k, i)] + 0.0,
                );
                writeln!(s, "{t},{},{d},{dp},{dpp}", k + 1).unwrap();
            }
        }
        s
    }
}

/// `d_k(0) = (u₀, w_k)`, `d'_k(0) = (u₁, w_k)`.
pub fn project_initial(data: &ProblemData, basis: &ModalBasis) -> Result<(Vec<f64>, Vec<f64>)> {
    basis.space().check(&data.u0)?;
    basis.space().check(&data.u1)?;
    Ok((
        basis.project(data.u0.values()),
        basis.project(data.u1.values()),
    ))
}

/// Exact one-step map of `y'' + a y' + b y = g` with `g` linear on the step.
#[derive(Clone, Copy, Debug)]
pub struct ModePropagator {
    a: f64,
    b: f64,
    h: f64,
    sigma: f64,
    q: f64,
    ec: f64,
    es: f64,
}

impl ModePropagator {
    /// Requires `a ≥ 0`, `b > 0`, `h > 0`.
    pub fn new(a: f64, b: f64, h: f64) -> Self {
        let sigma = -0.5 * a;
        let q = 0.25 * a * a - b;
        let (ec, es) = if (q * h * h).abs() < 0.1 {
            // near critical damping: even/odd parts of the Taylor series of cosh(√q h)
            let z = q * h * h;
            let (mut c, mut s) = (1.0, 1.0);
            let (mut tc, mut ts) = (1.0, 1.0);
            for n in 1..30 {
                tc *= z / ((2 * n - 1) as f64 * (2 * n) as f64);
                ts *= z / ((2 * n) as f64 * (2 * n + 1) as f64);
                c += tc;
                s += ts;
                if tc.abs() < 1e-18 && ts.abs() < 1e-18 {
                    break;
                }
            }
            let e = (sigma * h).exp();
            (e * c, e * s * h)
        } else if q < 0.0 {
            let w = (-q).sqrt();
            let e = (sigma * h).exp();
            (e * (w * h).cos(), e * (w * h).sin() / w)
        } else {
            let kappa = q.sqrt();
            let mu_minus = -(0.5 * a + kappa);
            let mu_plus = b / mu_minus;
            let (ep, em) = ((mu_plus * h).exp(), (mu_minus * h).exp());
            (0.5 * (ep + em), (ep - em) / (2.0 * kappa))
        };
        ModePropagator {
            a,
            b,
            h,
            sigma,
            q,
            ec,
            es,
        }
    }

    /// Advances `(y, y')` across one step with forcing `g0 → g1`.
    pub fn step(&self, y: f64, yp: f64, g0: f64, g1: f64) -> (f64, f64) {
        let p1 = (g1 - g0) / (self.h * self.b);
        let p0 = (g0 - self.a * p1) / self.b;
        let z0 = y - p0;
        let v0 = yp - p1;
        let w = v0 - self.sigma * z0;
        let z1 = z0 * self.ec + w * self.es;
        let zp1 = self.sigma * z1 + z0 * self.q * self.es + w * self.ec;
        (z1 + p0 + p1 * self.h, zp1 + p1)
    }
}

/// Integrates every mode from `(d0, d1)` under modal forcing `f` (`K × (N+1)`).
pub fn solve_modal(
    params: &PhysicalParams,
    grid: TimeGrid,
    basis: &Arc<ModalBasis>,
    d0: &[f64],
    d1: &[f64],
    f: &DMatrix<f64>,
) -> Result<ModalTrajectory> {
    params.validate()?;
    let k = basis.len();
    let np = grid.n_points();
    if d0.len() != k || d1.len() != k || f.shape() != (k, np) {
        return Err(Error::Argument(
            "modal data does not match the basis and grid".into(),
        ));
    }
    if d0.iter().chain(d1).chain(f.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Argument("non-finite modal data".into()));
    }
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..k)
        .into_par_iter()
        .map(|m| {
            let lam = basis.lambda(m);
            let prop =
                ModePropagator::new(params.damping() * lam, params.c * params.c * lam, grid.dt);
            let mut d = Vec::with_capacity(np);
            let mut dp = Vec::with_capacity(np);
            let (mut y, mut yp) = (d0[m], d1[m]);
            d.push(y);
            dp.push(yp);
            for i in 0..grid.n_steps {
                (y, yp) = prop.step(y, yp, f[(m, i)], f[(m, i + 1)]);
                d.push(y);
                dp.push(yp);
            }
            (d, dp)
        })
        .collect();
    let d = DMatrix::from_fn(k, np, |r, c| rows[r].0[c]);
    let dp = DMatrix::from_fn(k, np, |r, c| rows[r].1[c]);
    Ok(ModalTrajectory::from_ode(
        basis.clone(),
        grid,
        params,
        d,
        dp,
        f,
    ))
}

/// Galerkin solution of the linear problem.
pub fn solve_linear(
    params: &PhysicalParams,
    data: &ProblemData,
    basis: &Arc<ModalBasis>,
) -> Result<ModalTrajectory> {
    data.validate_against(basis)?;
    let (d0, d1) = project_initial(data, basis)?;
    let f = data.forcing.modal(basis, data.grid.n_points());
    solve_modal(params, data.grid, basis, &d0, &d1, &f)
}

/// Energy `E(t)` and accumulated dissipation `D(t)`.
#[derive(Clone, Debug, Serialize)]
pub struct EnergyReport {
    pub times: Vec<f64>,
    pub energy: Vec<f64>,
    pub dissipation: Vec<f64>,
    /// `max_t |E(t) + D(t) − E(0)|`, meaningful for unforced runs.
    pub max_balance_error: f64,
}

impl EnergyReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,E,D\n");
        for i in 0..self.times.len() {
            writeln!(
                s,
                "{},{},{}",
                self.times[i], self.energy[i], self.dissipation[i]
            )
            .unwrap();
        }
        s
    }
}

/// `E = ½Σd'² + (c²/2)Σλd²` and `D(t) = εν∫₀ᵗ Σλd'²`. The dissipation integral is
/// the trapezoid rule with its endpoint correction `−(dt²/12)[g']`, where
/// `g' = 2Σλd'd''` is available exactly from the stored accelerations.
pub fn energy_report(traj: &ModalTrajectory, params: &PhysicalParams) -> EnergyReport {
    let grid = traj.grid;
    let lam = traj.basis.lambdas();
    let np = grid.n_points();
    let c2 = params.c * params.c;
    let mut energy = Vec::with_capacity(np);
    let mut g = Vec::with_capacity(np);
    let mut gp = Vec::with_capacity(np);
    for i in 0..np {
        let (mut kin, mut pot, mut gi, mut gpi) = (0.0, 0.0, 0.0, 0.0);
        for (k, &l) in lam.iter().enumerate() {
            let (d, dp, dpp) = (traj.d[(k, i)], traj.dp[(k, i)], traj.dpp[(k, i)]);
            kin += dp * dp;
            pot += l * d * d;
            gi += l * dp * dp;
            gpi += 2.0 * l * dp * dpp;
        }
        energy.push(0.5 * kin + 0.5 * c2 * pot);
        g.push(gi);
        gp.push(gpi);
    }
    let h = grid.dt;
    let mut dissipation = Vec::with_capacity(np);
    let mut trap = 0.0;
    dissipation.push(0.0);
    for i in 1..np {
        trap += 0.5 * h * (g[i - 1] + g[i]);
        let corrected = trap - h * h / 12.0 * (gp[i] - gp[0]);
        dissipation.push(params.damping() * corrected);
    }
    let e0 = energy[0];
    let max_balance_error = energy
        .iter()
        .zip(&dissipation)
        .map(|(e, d)| (e + d - e0).abs())
        .fold(0.0, f64::max);
    EnergyReport {
        times: grid.times(),
        energy,
        dissipation,
        max_balance_error,
    }
}

/// Both sides of the a priori estimate and their ratio.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct AprioriReport {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

/// Empirical constant of the energy estimate
/// `sup(‖u‖²_{H¹₀} + ‖u_t‖²) + ‖∇u_t‖²_{L²L²} + ‖∇u‖²_{L²L²} + ‖u_tt‖²_{L²H⁻¹}
///  ≤ C(‖f‖²_{L²L²} + ‖u₀‖²_{H¹₀} + ‖u₁‖²)`,
/// with `‖v‖²_{H¹₀} = ‖v‖² + ‖∇v‖²` and `H⁻¹` weights `1/(1+λ_k)`.
pub fn apriori_check(traj: &ModalTrajectory, data: &ProblemData) -> Result<AprioriReport> {
    let basis = &traj.basis;
    let space = basis.space();
    space.check(&data.u0)?;
    let lam = basis.lambdas();
    let np = traj.grid.n_points();
    let dt = traj.grid.dt;
    let mut sup: f64 = 0.0;
    let (mut grad_ut, mut grad_u, mut utt) = (vec![0.0; np], vec![0.0; np], vec![0.0; np]);
    for i in 0..np {
        let mut level = 0.0;
        for (k, &l) in lam.iter().enumerate() {
            let (d, dp, dpp) = (traj.d[(k, i)], traj.dp[(k, i)], traj.dpp[(k, i)]);
            level += (1.0 + l) * d * d + dp * dp;
            grad_ut[i] += l * dp * dp;
            grad_u[i] += l * d * d;
            utt[i] += dpp * dpp / (1.0 + l);
        }
        sup = sup.max(level);
    }
    let lhs = sup + trapezoid(&grad_ut, dt) + trapezoid(&grad_u, dt) + trapezoid(&utt, dt);
    let f_sq = data.forcing.l2_sq(space, np);
    let u0 = data.u0.values();
    let h1 = space.mass().quadratic_form(u0) + space.stiffness().quadratic_form(u0);
    let rhs = trapezoid(&f_sq, dt) + h1 + space.mass().quadratic_form(data.u1.values());
    let ratio = if rhs == 0.0 {
        if lhs == 0.0 {
            0.0
        } else {
            return Err(Error::Numerical(
                "a priori check: zero data produced a nonzero solution".into(),
            ));
        }
    } else {
        lhs / rhs
    };
    Ok(AprioriReport { lhs, rhs, ratio })
}

/// Squared contributions `(‖Δu‖², ‖Δu_t‖², ‖u_tt‖²)` integrated in time.
pub fn x_norm_parts(traj: &ModalTrajectory) -> [f64; 3] {
    let lam = traj.basis.lambdas();
    let np = traj.grid.n_points();
    let mut parts = [vec![0.0; np], vec![0.0; np], vec![0.0; np]];
    for i in 0..np {
        for (k, &l) in lam.iter().enumerate() {
            let l2 = l * l;
            parts[0][i] += l2 * traj.d[(k, i)].powi(2);
            parts[1][i] += l2 * traj.dp[(k, i)].powi(2);
            parts[2][i] += traj.dpp[(k, i)].powi(2);
        }
    }
    parts.map(|p| trapezoid(&p, traj.grid.dt))
}

/// `‖u‖_X = (∫‖Δu‖² + ‖Δu_t‖² + ‖u_tt‖²)^{1/2}`, with `Δu = −Σλ_k d_k w_k`.
pub fn x_norm(traj: &ModalTrajectory) -> f64 {
    x_norm_parts(traj).iter().sum::<f64>().sqrt()
}

/// `(∫Σ_k f_k(t)² dt)^{1/2}` for modal samples.
pub fn modal_y_norm(f: &DMatrix<f64>, dt: f64) -> f64 {
    let col: Vec<f64> = (0..f.ncols()).map(|i| f.column(i).norm_squared()).collect();
    trapezoid(&col, dt).sqrt()
}
