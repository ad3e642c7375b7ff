//! Numerical checks of the sharp inequalities behind the solver: the 3D bound
//! `‖u‖_∞ ≤ (2π)^{-1/2}‖∇u‖^{1/2}‖Δu‖^{1/2}`, the discrete Poincaré constant, and the
//! uniformity of the `L∞` stability constant across prefractal levels.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::domains::{DomainSequence, Point, Polygon};
use crate::error::{Error, Result};
use crate::fem::{FemFunction, FemSpace};
use crate::meshing::triangulate;
use crate::sparse::EnvelopeCholesky;
use crate::spectral::{poincare_constant, ModalBasis};

/// `u = Σ a_{jkl} sin(jπx) sin(kπy) sin(lπz)` on the unit cube, `1 ≤ j,k,l ≤ N`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SineSeries3D {
    n: usize,
    /// Index `(j−1)N² + (k−1)N + (l−1)`.
    coeffs: Vec<f64>,
}

impl SineSeries3D {
    pub fn new(n: usize, coeffs: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Argument(
                "the series needs at least one mode per direction".into(),
            ));
        }
        if coeffs.len() != n * n * n {
            return Err(Error::Argument(format!(
                "expected {} coefficients, got {}",
                n * n * n,
                coeffs.len()
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Argument("coefficients must be finite".into()));
        }
        Ok(SineSeries3D { n, coeffs })
    }

    pub fn single(j: usize, k: usize, l: usize, n: usize) -> Result<Self> {
        if j == 0 || k == 0 || l == 0 || j > n || k > n || l > n {
            return Err(Error::Argument(format!(
                "mode ({j},{k},{l}) outside 1..={n}"
            )));
        }
        let mut c = vec![0.0; n * n * n];
        c[(j - 1) * n * n + (k - 1) * n + (l - 1)] = 1.0;
        SineSeries3D::new(n, c)
    }

    /// Coefficients uniform in `[−1, 1]`.
    pub fn random(n: usize, rng: &mut impl Rng) -> Result<Self> {
        SineSeries3D::new(
            n,
            (0..n * n * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn coeff(&self, j: usize, k: usize, l: usize) -> f64 {
        self.coeffs[(j - 1) * self.n * self.n + (k - 1) * self.n + (l - 1)]
    }

    /// `(‖∇u‖², ‖Δu‖²)` from Parseval.
    pub fn norms_sq(&self) -> (f64, f64) {
        let (mut g, mut d) = (0.0, 0.0);
        for j in 1..=self.n {
            for k in 1..=self.n {
                for l in 1..=self.n {
                    let a2 = self.coeff(j, k, l).powi(2);
                    let s = (j * j + k * k + l * l) as f64;
                    g += a2 * PI * PI * s / 8.0;
                    d += a2 * PI.powi(4) * s * s / 8.0;
                }
            }
        }
        (g, d)
    }

    /// `max |u|` over the lattice `{i/g}³`, `i = 0..=g`.
    pub fn sampled_linf(&self, g: usize) -> f64 {
        let n = self.n;
        let m = g + 1;
        // s[j][i] = sin(jπ i/g)
        let s: Vec<Vec<f64>> = (1..=n)
            .map(|j| {
                (0..m)
                    .map(|i| (j as f64 * PI * i as f64 / g as f64).sin())
                    .collect()
            })
            .collect();
        // contract z, then y, then x
        let mut t1 = vec![0.0; n * n * m];
        for j in 0..n {
            for k in 0..n {
                for l in 0..n {
                    let a = self.coeffs[j * n * n + k * n + l];
                    if a != 0.0 {
                        for z in 0..m {
                            t1[(j * n + k) * m + z] += a * s[l][z];
                        }
                    }
                }
            }
        }
        let mut t2 = vec![0.0; n * m * m];
        for j in 0..n {
            for k in 0..n {
                for y in 0..m {
                    let sy = s[k][y];
                    for z in 0..m {
                        t2[(j * m + y) * m + z] += sy * t1[(j * n + k) * m + z];
                    }
                }
            }
        }
        let mut best: f64 = 0.0;
        for x in 0..m {
            for y in 0..m {
                for z in 0..m {
                    let v: f64 = (0..n).map(|j| s[j][x] * t2[(j * m + y) * m + z]).sum();
                    best = best.max(v.abs());
                }
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct XieReport {
    pub linf: f64,
    pub grad_l2: f64,
    pub lap_l2: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Checks `‖u‖_∞ ≤ (2π)^{-1/2}‖∇u‖^{1/2}‖Δu‖^{1/2}` with the sup sampled on a
/// `(grid_n+1)³` lattice, which can only understate the left side.
pub fn xie_check(series: &SineSeries3D, grid_n: usize) -> Result<XieReport> {
    if grid_n < 4 * series.n {
        return Err(Error::Argument(format!(
            "grid_n = {grid_n} must be at least 4N = {}",
            4 * series.n
        )));
    }
    let (g2, d2) = series.norms_sq();
    let (grad_l2, lap_l2) = (g2.sqrt(), d2.sqrt());
    let linf = series.sampled_linf(grid_n);
    let rhs = (grad_l2 * lap_l2).sqrt() / (2.0 * PI).sqrt();
    Ok(XieReport {
        linf,
        grad_l2,
        lap_l2,
        lhs: linf,
        rhs,
        holds: linf <= rhs,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct XieStudy {
    pub n_series: usize,
    pub n: usize,
    pub grid_n: usize,
    pub seed: u64,
    pub violations: usize,
    /// Largest `lhs/rhs` observed.
    pub max_ratio: f64,
    pub single_mode: XieReport,
}

/// Runs [`xie_check`] on `n_series` random series; series `i` uses stream `i` of `seed`.
pub fn xie_study(n_series: usize, n: usize, grid_n: usize, seed: u64) -> Result<XieStudy> {
    let reports: Vec<XieReport> = (0..n_series)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            xie_check(&SineSeries3D::random(n, &mut rng)?, grid_n)
        })
        .collect::<Result<_>>()?;
    Ok(XieStudy {
        n_series,
        n,
        grid_n,
        seed,
        violations: reports.iter().filter(|r| !r.holds).count(),
        max_ratio: reports.iter().map(|r| r.lhs / r.rhs).fold(0.0, f64::max),
        single_mode: xie_check(&SineSeries3D::single(1, 1, 1, n)?, grid_n)?,
    })
}

/// Solver for the discrete Poisson problem `K u = M f` with zero boundary values.
#[derive(Clone, Debug)]
pub struct PoissonSolver {
    space: Arc<FemSpace>,
    chol: EnvelopeCholesky,
}

impl PoissonSolver {
    pub fn new(space: Arc<FemSpace>) -> Result<Self> {
        let (k, _) = space.reduced_matrices();
        let chol = EnvelopeCholesky::factor(&k)?;
        Ok(PoissonSolver { space, chol })
    }

    pub fn solve(&self, f: &FemFunction) -> Result<FemFunction> {
        self.space.check(f)?;
        let map = self.space.dirichlet_map();
        let rhs = map.restrict(&self.space.mass().matvec(f.values()));
        FemFunction::new_dirichlet(self.space.mesh().clone(), map.embed(&self.chol.solve(&rhs)))
    }

    /// `‖u‖_∞ / ‖f‖_{L²}` for the solution `u`; zero for `f = 0`.
    pub fn ratio(&self, f: &FemFunction) -> Result<f64> {
        let l2 = self.space.mass().quadratic_form(f.values()).sqrt();
        if l2 == 0.0 {
            return Ok(0.0);
        }
        let u = self.solve(f)?;
        Ok(u.values().iter().fold(0.0f64, |m, v| m.max(v.abs())) / l2)
    }
}

/// Seeded probe forcing: the constant 1 for probe 0, otherwise a Gaussian with a
/// random center in the domain and a random width.
fn probe_forcing(
    mesh: &Arc<crate::meshing::Mesh>,
    domain: &Polygon,
    seed: u64,
    i: usize,
) -> FemFunction {
    if i == 0 {
        return FemFunction::interpolate_dirichlet(mesh.clone(), |_| 1.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    let bb = domain.bbox();
    let center = loop {
        let p = Point::new(
            rng.gen_range(bb.min.x..bb.max.x),
            rng.gen_range(bb.min.y..bb.max.y),
        );
        if domain.contains_point(p) {
            break p;
        }
    };
    let s = rng.gen_range(0.02..0.3) * bb.diagonal();
    FemFunction::interpolate_dirichlet(mesh.clone(), |p| {
        (-(p - center).norm().powi(2) / (2.0 * s * s)).exp()
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct LinfLevel {
    pub label: u32,
    pub n_vertices: usize,
    pub constant: f64,
    pub best_probe: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct LinfScan {
    pub h_target: f64,
    pub n_probes: usize,
    pub seed: u64,
    pub levels: Vec<LinfLevel>,
    pub max: f64,
    pub min: f64,
    /// `max / min` across levels.
    pub spread: f64,
}

/// Per member of `seq`: `C_m = max_f ‖u‖_∞/‖f‖_{L²}` over seeded probes, `K u = M f` on `Ω_m`.
pub fn linf_stability_scan(
    seq: &DomainSequence,
    h_target: f64,
    n_probes: usize,
    seed: u64,
) -> Result<LinfScan> {
    if n_probes == 0 {
        return Err(Error::Argument("at least one probe is required".into()));
    }
    let levels: Vec<LinfLevel> = seq
        .members
        .par_iter()
        .zip(&seq.labels)
        .map(|(poly, &label)| {
            let space = Arc::new(FemSpace::new(Arc::new(triangulate(poly, h_target)?))?);
            let solver = PoissonSolver::new(space.clone())?;
            let ratios: Vec<f64> = (0..n_probes)
                .into_par_iter()
                .map(|i| solver.ratio(&probe_forcing(space.mesh(), poly, seed, i)))
                .collect::<Result<_>>()?;
            let (best_probe, constant) = ratios
                .iter()
                .copied()
                .enumerate()
                .fold((0, 0.0), |b, (i, r)| if r > b.1 { (i, r) } else { b });
            Ok(LinfLevel {
                label,
                n_vertices: space.mesh().n_vertices(),
                constant,
                best_probe,
            })
        })
        .collect::<Result<_>>()?;
    let max = levels.iter().map(|l| l.constant).fold(0.0, f64::max);
    let min = levels
        .iter()
        .map(|l| l.constant)
        .fold(f64::INFINITY, f64::min);
    Ok(LinfScan {
        h_target,
        n_probes,
        seed,
        levels,
        max,
        min,
        spread: max / min,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct PoincareReport {
    pub lambda_1: f64,
    /// `1/√λ₁`
    pub constant: f64,
    pub n_random: usize,
    pub seed: u64,
    /// `min (C·|u|_{H¹} − ‖u‖_{L²}) / ‖u‖_{L²}` over the random functions.
    pub worst_slack: f64,
    /// `‖w₁‖_{L²} / |w₁|_{H¹}`, which should equal the constant.
    pub first_mode_ratio: f64,
}

/// Tests `‖u‖ ≤ λ₁^{-1/2}|u|_{H¹}` on `n_random` functions with random interior values.
pub fn poincare_verify(basis: &ModalBasis, n_random: usize, seed: u64) -> Result<PoincareReport> {
    if basis.is_empty() {
        return Err(Error::Argument("the basis is empty".into()));
    }
    let space = basis.space();
    let c = poincare_constant(basis);
    let map = space.dirichlet_map();
    let slacks: Vec<f64> = (0..n_random)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let interior: Vec<f64> = (0..map.n_interior())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let u = map.embed(&interior);
            let l2 = space.mass().quadratic_form(&u).sqrt();
            let h1 = space.stiffness().quadratic_form(&u).sqrt();
            (c * h1 - l2) / l2
        })
        .collect();
    let w1 = basis.vector(0);
    let first_mode_ratio =
        space.mass().quadratic_form(w1).sqrt() / space.stiffness().quadratic_form(w1).sqrt();
    Ok(PoincareReport {
        lambda_1: basis.lambda(0),
        constant: c,
        n_random,
        seed,
        worst_slack: slacks.iter().copied().fold(f64::INFINITY, f64::min),
        first_mode_ratio,
    })
}
