use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use fractal_westervelt::domains::{
    koch_prefractal, polygon_area, read_polygon, write_polygon, DomainSequence, Point, Polygon,
    PrefractalSpec,
};
use fractal_westervelt::fem::{FemFunction, FemSpace};
use fractal_westervelt::linwave::{
    apriori_check, energy_report, solve_linear, x_norm, AprioriReport, Forcing, ProblemData,
    SeparableTerm, TimeGrid,
};
use fractal_westervelt::meshing::{triangulate, write_mesh, Mesh};
use fractal_westervelt::mosco::{
    run_domain_sequence, Bump, DataRecipe, MoscoOptions, TestFunctionSet,
};
use fractal_westervelt::spectral::{poincare_constant, ModalBasis};
use fractal_westervelt::verify::{linf_stability_scan, poincare_verify, xie_study};
use fractal_westervelt::westervelt::{
    data_norm, estimate_constants, iterate_westervelt, FixedPointOptions, IterationLog,
    SmallnessBudget,
};
use fractal_westervelt::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{DataConfig, DomainConfig, DomainKind, Experiment, ForcingKind, RunConfig};

/// Exit status for an error: 2 validation, 3 numerical, 4 smallness gate, 1 anything else.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Smallness { .. } => 4,
        Error::Io(_) => 1,
        e if e.is_validation() => 2,
        _ => 3,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct Artifact {
    /// Relative to the output directory, with `/` separators.
    pub path: String,
    pub bytes: usize,
    pub sha256: String,
}

/// Everything needed to repeat a run; written as `manifest.json` next to the artifacts.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub core_version: &'static str,
    pub experiment: Experiment,
    pub threads: Option<usize>,
    pub config: RunConfig,
    pub artifacts: Vec<Artifact>,
    pub status: &'static str,
    pub error: Option<String>,
    pub exit_code: i32,
    pub wall_time_seconds: f64,
}

struct Writer {
    dir: PathBuf,
    artifacts: Vec<Artifact>,
}

impl Writer {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Writer {
            dir: dir.to_path_buf(),
            artifacts: vec![],
        })
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, contents)?;
        self.artifacts.push(Artifact {
            path: name.to_string(),
            bytes: contents.len(),
            sha256: hex::encode(Sha256::digest(contents)),
        });
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s =
            serde_json::to_string_pretty(value).map_err(|e| Error::Numerical(e.to_string()))?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }
}

/// Runs `experiment` inside a pool of `threads` workers (all cores when `None`),
/// writes its artifacts and `manifest.json` under `out`, and returns the manifest.
/// The manifest is written even when the run fails.
pub fn execute(
    experiment: Experiment,
    cfg: &RunConfig,
    out: &Path,
    threads: Option<usize>,
) -> Result<Manifest> {
    let start = Instant::now();
    let mut w = Writer::new(out)?;
    let result = cfg.validate(experiment).and_then(|_| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.unwrap_or(0))
            .build()
            .map_err(|e| Error::Resource(e.to_string()))?;
        pool.install(|| dispatch(experiment, cfg, &mut w))
    });
    let mut config = cfg.clone();
    config.experiment = Some(experiment);
    let manifest = Manifest {
        tool: "fwave",
        version: env!("CARGO_PKG_VERSION"),
        core_version: fractal_westervelt::VERSION,
        experiment,
        threads,
        config,
        artifacts: w.artifacts.clone(),
        status: if result.is_ok() { "ok" } else { "error" },
        error: result.as_ref().err().map(|e| e.to_string()),
        exit_code: result.as_ref().err().map_or(0, exit_code),
        wall_time_seconds: start.elapsed().as_secs_f64(),
    };
    let mut text =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Numerical(e.to_string()))?;
    text.push('\n');
    std::fs::write(out.join("manifest.json"), text)?;
    result.map(|_| manifest)
}

fn dispatch(experiment: Experiment, cfg: &RunConfig, w: &mut Writer) -> Result<()> {
    match experiment {
        Experiment::Mesh => run_mesh(cfg, w),
        Experiment::Eigs => run_eigs(cfg, w),
        Experiment::SolveLinear => run_linear(cfg, w),
        Experiment::SolveWestervelt => run_westervelt(cfg, w),
        Experiment::Mosco => run_mosco(cfg, w),
        Experiment::Verify => run_verify(cfg, w),
    }
}

pub fn domain_polygon(d: &DomainConfig) -> Result<Polygon> {
    let [cx, cy] = d.center;
    match d.kind {
        DomainKind::Koch => koch_prefractal(&PrefractalSpec::new(
            d.base_side,
            d.level,
            Point::new(cx, cy),
        )),
        DomainKind::Square => {
            let h = 0.5 * d.base_side;
            Polygon::rectangle(cx - h, cy - h, cx + h, cy + h)
        }
        DomainKind::Rectangle => {
            let [x0, y0, x1, y1] = d.rectangle;
            Polygon::rectangle(x0, y0, x1, y1)
        }
        DomainKind::Polygon => {
            let path = d
                .path
                .as_ref()
                .ok_or_else(|| Error::Validation("domain.path is required".into()))?;
            read_polygon(&std::fs::read_to_string(path)?)
        }
    }
}

fn build_mesh(cfg: &RunConfig) -> Result<(Polygon, Mesh)> {
    let poly = domain_polygon(&cfg.domain)?;
    let mesh = triangulate(&poly, cfg.mesh.h_target)?;
    Ok((poly, mesh))
}

fn build_basis(cfg: &RunConfig, mesh: Mesh) -> Result<Arc<ModalBasis>> {
    let space = Arc::new(FemSpace::new(Arc::new(mesh))?);
    Ok(Arc::new(ModalBasis::compute(
        &space,
        cfg.modes.n_modes,
        &cfg.modes.eigen(),
    )?))
}

#[derive(Serialize)]
struct MeshSummary {
    n_vertices: usize,
    n_triangles: usize,
    n_boundary_vertices: usize,
    h: f64,
    min_angle_deg: f64,
    mesh_area: f64,
    polygon_area: f64,
}

fn run_mesh(cfg: &RunConfig, w: &mut Writer) -> Result<()> {
    let (poly, mesh) = build_mesh(cfg)?;
    w.write("polygon.txt", write_polygon(&poly).as_bytes())?;
    w.write("mesh.txt", write_mesh(&mesh).as_bytes())?;
    w.json(
        "mesh.json",
        &MeshSummary {
            n_vertices: mesh.n_vertices(),
            n_triangles: mesh.n_triangles(),
            n_boundary_vertices: mesh.boundary_flags().iter().filter(|&&b| b).count(),
            h: mesh.h(),
            min_angle_deg: mesh.min_angle_deg(),
            mesh_area: mesh.total_area(),
            polygon_area: polygon_area(&poly),
        },
    )
}

#[derive(Serialize)]
struct EigsSummary {
    n_vertices: usize,
    n_interior: usize,
    lambdas: Vec<f64>,
    poincare_constant: f64,
    /// `max |WᵀMW − I|`
    gram_max_error: f64,
}

fn run_eigs(cfg: &RunConfig, w: &mut Writer) -> Result<()> {
    let (_, mesh) = build_mesh(cfg)?;
    let basis = build_basis(cfg, mesh)?;
    let gram = basis.mass_vectors().transpose() * basis.vectors();
    let n = basis.len();
    let gram_max_error = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| (gram[(i, j)] - if i == j { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max);
    let mut csv = String::from("k,lambda\n");
    for (k, l) in basis.lambdas().iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", k + 1));
    }
    w.write("eigenvalues.csv", csv.as_bytes())?;
    let mut index = String::new();
    for k in 0..n {
        index.push_str(&format!("{} {}\n", k + 1, basis.lambda(k)));
        let mut s = String::new();
        for v in basis.vector(k) {
            s.push_str(&format!("{v}\n"));
        }
        w.write(&format!("modes/mode_{:04}.txt", k + 1), s.as_bytes())?;
    }
    w.write("modes/index.txt", index.as_bytes())?;
    w.json(
        "eigs.json",
        &EigsSummary {
            n_vertices: basis.mesh().n_vertices(),
            n_interior: basis.dirichlet_map().n_interior(),
            lambdas: basis.lambdas().to_vec(),
            poincare_constant: poincare_constant(&basis),
            gram_max_error,
        },
    )
}

/// Problem data from the `[data]` section, every term multiplied by `scale`.
pub fn build_data(
    data: &DataConfig,
    basis: &ModalBasis,
    grid: TimeGrid,
    scale: f64,
) -> Result<ProblemData> {
    let mesh = basis.mesh().clone();
    let modal = |pairs: &[(usize, f64)]| -> Result<FemFunction> {
        let mut c = vec![0.0; basis.len()];
        for &(k, v) in pairs {
            if k == 0 || k > basis.len() {
                return Err(Error::Validation(format!(
                    "mode index {k} outside 1..={}",
                    basis.len()
                )));
            }
            c[k - 1] += scale * v;
        }
        FemFunction::new_dirichlet(mesh.clone(), basis.synthesize(&c))
    };
    let temporal = data.forcing_profile.sample(&grid);
    let amp = scale * data.forcing_amplitude;
    let forcing = match data.forcing {
        ForcingKind::None => Forcing::Zero,
        ForcingKind::Mode => {
            let k = data.forcing_mode;
            if k == 0 || k > basis.len() {
                return Err(Error::Validation(format!(
                    "forcing mode {k} outside 1..={}",
                    basis.len()
                )));
            }
            let values: Vec<f64> = basis.vector(k - 1).iter().map(|v| amp * v).collect();
            let spatial = FemFunction::new_dirichlet(mesh.clone(), values)?;
            Forcing::Separable(vec![SeparableTerm { spatial, temporal }])
        }
        ForcingKind::Bump => {
            let b = Bump {
                center: Point::new(data.bump_center[0], data.bump_center[1]),
                width: data.bump_width,
            };
            let spatial = FemFunction::interpolate_dirichlet(mesh.clone(), |p| amp * b.eval(p));
            Forcing::Separable(vec![SeparableTerm { spatial, temporal }])
        }
    };
    ProblemData::new(
        modal(&data.u0_modes)?,
        modal(&data.u1_modes)?,
        forcing,
        grid,
    )
}

#[derive(Serialize)]
struct LinearSummary {
    n_modes: usize,
    x_norm: f64,
    /// `max_t |E(t) + D(t) − E(0)| / E(0)`; only a conservation check when unforced.
    energy_balance_relative: Option<f64>,
    apriori: AprioriReport,
}

fn run_linear(cfg: &RunConfig, w: &mut Writer) -> Result<()> {
    let (_, mesh) = build_mesh(cfg)?;
    let basis = build_basis(cfg, mesh)?;
    let grid = TimeGrid::covering(cfg.time.horizon, cfg.time.dt)?;
    let data = build_data(&cfg.data, &basis, grid, 1.0)?;
    let traj = solve_linear(&cfg.physics, &data, &basis)?;
    let energy = energy_report(&traj, &cfg.physics);
    w.write("trajectory.csv", traj.to_csv().as_bytes())?;
    w.write("energy.csv", energy.to_csv().as_bytes())?;
    let e0 = energy.energy[0];
    w.json(
        "linear.json",
        &LinearSummary {
            n_modes: basis.len(),
            x_norm: x_norm(&traj),
            energy_balance_relative: (data.forcing.is_zero() && e0 > 0.0)
                .then(|| energy.max_balance_error / e0),
            apriori: apriori_check(&traj, &data)?,
        },
    )
}

#[derive(Serialize)]
struct WesterveltSummary {
    budget: SmallnessBudget,
    /// Factor applied to the configured data.
    data_scale: f64,
    log: IterationLog,
}

fn run_westervelt(cfg: &RunConfig, w: &mut Writer) -> Result<()> {
    let seeds = cfg.seeds()?;
    let (_, mesh) = build_mesh(cfg)?;
    let basis = build_basis(cfg, mesh)?;
    let grid = TimeGrid::covering(cfg.time.horizon, cfg.time.dt)?;
    let s = &cfg.solver;
    let budget = estimate_constants(
        &basis,
        &cfg.physics,
        grid.horizon(),
        s.n_probes,
        seeds.probes,
    )?;
    w.json("budget.json", &budget)?;
    let (scale, radius) = match cfg.data.gate_fraction {
        None => (1.0, s.radius),
        Some(g) => {
            let r = match s.radius {
                Some(r) => r,
                None if budget.r_star.is_finite() => s.radius_fraction * budget.r_star,
                None => {
                    return Err(Error::Validation(
                        "solver.radius is required with gate_fraction when alpha = 0".into(),
                    ))
                }
            };
            let unit = data_norm(&build_data(&cfg.data, &basis, grid, 1.0)?, &basis)?;
            if unit == 0.0 {
                return Err(Error::Validation(
                    "data are zero and cannot be scaled to the gate".into(),
                ));
            }
            (g * budget.gate_threshold(r) / unit, Some(r))
        }
    };
    let data = build_data(&cfg.data, &basis, grid, scale)?;
    let opts = FixedPointOptions {
        tol: s.tol,
        max_iter: s.max_iter,
        radius,
        override_gate: s.override_gate,
    };
    let outcome = iterate_westervelt(&cfg.physics, &data, &basis, &budget, &opts)?;
    w.write("trajectory.csv", outcome.trajectory.to_csv().as_bytes())?;
    w.write("iteration_log.csv", outcome.log.to_csv().as_bytes())?;
    w.json(
        "westervelt.json",
        &WesterveltSummary {
            budget,
            data_scale: scale,
            log: outcome.log.clone(),
        },
    )?;
    outcome.into_result().map(|_| ())
}

fn run_mosco(cfg: &RunConfig, w: &mut Writer) -> Result<()> {
    let seeds = cfg.seeds()?;
    let m = &cfg.mosco;
    let d = &cfg.domain;
    let base = PrefractalSpec::new(d.base_side, 0, Point::new(d.center[0], d.center[1]));
    let seq = DomainSequence::koch(
        base,
        m.first_level..=m.last_level,
        m.reference_level,
        m.margin,
        None,
    )?;
    let center = Point::new(m.support_center[0], m.support_center[1]);
    let recipe = DataRecipe {
        gate_fraction: m.gate_fraction,
        ..DataRecipe::standard(center, m.support_half)?
    };
    let tests = TestFunctionSet::standard(center, m.support_half)?;
    let s = &cfg.solver;
    let opts = MoscoOptions {
        h_target: cfg.mesh.h_target,
        n_modes: cfg.modes.n_modes,
        grid: TimeGrid::covering(cfg.time.horizon, cfg.time.dt)?,
        eigen: cfg.modes.eigen(),
        n_probes: s.n_probes,
        seed: seeds.probes,
        radius_fraction: s.radius_fraction,
        fixed_point: FixedPointOptions {
            tol: s.tol,
            max_iter: s.max_iter,
            radius: None,
            override_gate: s.override_gate,
        },
    };
    let report = run_domain_sequence(&seq, &cfg.physics, &recipe, &tests, &opts)?;
    let mut json = report.to_json();
    json.push('\n');
    w.write("mosco.json", json.as_bytes())?;
    w.write("mosco.csv", report.to_csv().as_bytes())
}

fn run_verify(cfg: &RunConfig, w: &mut Writer) -> Result<()> {
    let seeds = cfg.seeds()?;
    let v = &cfg.verify;
    let xie = xie_study(v.xie_series, v.xie_n, v.xie_grid, seeds.verify)?;
    w.json("xie.json", &xie)?;
    let d = &cfg.domain;
    let base = PrefractalSpec::new(d.base_side, 0, Point::new(d.center[0], d.center[1]));
    let seq = DomainSequence::koch(
        base,
        v.linf_first_level..=v.linf_last_level,
        v.linf_last_level,
        0.1,
        None,
    )?;
    let linf = linf_stability_scan(&seq, v.linf_h_target, v.linf_probes, seeds.verify)?;
    w.json("linf_scan.json", &linf)?;
    let (_, mesh) = build_mesh(cfg)?;
    let basis = build_basis(cfg, mesh)?;
    let poincare = poincare_verify(&basis, v.poincare_random, seeds.verify)?;
    w.json("poincare.json", &poincare)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_error_class() {
        assert_eq!(exit_code(&Error::Validation("x".into())), 2);
        assert_eq!(exit_code(&Error::Parse("x".into())), 2);
        assert_eq!(exit_code(&Error::Numerical("x".into())), 3);
        assert_eq!(
            exit_code(&Error::Divergence {
                iterations: 3,
                last_ratio: 2.0
            }),
            3
        );
        assert_eq!(
            exit_code(&Error::Smallness {
                data_norm: 2.0,
                threshold: 1.0
            }),
            4
        );
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), 1);
    }

    #[test]
    fn square_domain_is_centered() {
        let d = DomainConfig {
            kind: DomainKind::Square,
            base_side: 2.0,
            center: [1.0, 1.0],
            ..Default::default()
        };
        let p = domain_polygon(&d).unwrap();
        assert_eq!(polygon_area(&p), 4.0);
        let bb = p.bbox();
        assert_eq!((bb.min.x, bb.max.y), (0.0, 2.0));
    }

    #[test]
    fn invalid_config_writes_manifest_with_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.mesh.h_target = -1.0;
        let err = execute(Experiment::Mesh, &cfg, dir.path(), Some(1)).unwrap_err();
        assert_eq!(exit_code(&err), 2);
        let m: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("manifest.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(m["status"], "error");
        assert_eq!(m["exit_code"], 2);
        assert!(m["error"].as_str().unwrap().contains("mesh.h_target"));
    }
}
