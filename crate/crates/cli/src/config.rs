use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fractal_westervelt::linwave::PhysicalParams;
use fractal_westervelt::mosco::TemporalProfile;
use fractal_westervelt::spectral::EigenOptions;
use fractal_westervelt::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Mesh,
    Eigs,
    SolveLinear,
    SolveWestervelt,
    Mosco,
    Verify,
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Mesh => "mesh",
            Experiment::Eigs => "eigs",
            Experiment::SolveLinear => "solve-linear",
            Experiment::SolveWestervelt => "solve-westervelt",
            Experiment::Mosco => "mosco",
            Experiment::Verify => "verify",
        }
    }

    /// Experiments that draw random numbers and therefore need `[seeds]`.
    pub fn is_stochastic(&self) -> bool {
        matches!(
            self,
            Experiment::SolveWestervelt | Experiment::Mosco | Experiment::Verify
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    Koch,
    Square,
    Rectangle,
    Polygon,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainConfig {
    pub kind: DomainKind,
    /// Koch level.
    pub level: u32,
    /// Side of the Koch base triangle, or of the square.
    pub base_side: f64,
    pub center: [f64; 2],
    /// `[x0, y0, x1, y1]`
    pub rectangle: [f64; 4],
    /// Polygon file with one `x y` line per vertex.
    pub path: Option<PathBuf>,
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig {
            kind: DomainKind::Koch,
            level: 2,
            base_side: 1.0,
            center: [0.0, 0.0],
            rectangle: [0.0, 0.0, 1.0, 1.0],
            path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshConfig {
    pub h_target: f64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        MeshConfig { h_target: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModesConfig {
    pub n_modes: usize,
    pub dense_threshold: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub cluster_tol: f64,
}

impl Default for ModesConfig {
    fn default() -> Self {
        let e = EigenOptions::default();
        ModesConfig {
            n_modes: 32,
            dense_threshold: e.dense_threshold,
            tol: e.tol,
            max_iter: e.max_iter,
            cluster_tol: e.cluster_tol,
        }
    }
}

impl ModesConfig {
    pub fn eigen(&self) -> EigenOptions {
        EigenOptions {
            dense_threshold: self.dense_threshold,
            tol: self.tol,
            max_iter: self.max_iter,
            cluster_tol: self.cluster_tol,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeConfig {
    pub dt: f64,
    pub horizon: f64,
}

impl Default for TimeConfig {
    fn default() -> Self {
        TimeConfig {
            dt: 1e-3,
            horizon: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForcingKind {
    None,
    /// `amplitude · τ(t) · w_k(x)`
    Mode,
    /// `amplitude · τ(t) · bump(x)`
    Bump,
}

/// Initial data as `(mode index from 1, coefficient)` pairs plus one forcing term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub u0_modes: Vec<(usize, f64)>,
    pub u1_modes: Vec<(usize, f64)>,
    pub forcing: ForcingKind,
    pub forcing_mode: usize,
    pub forcing_amplitude: f64,
    pub forcing_profile: TemporalProfile,
    pub bump_center: [f64; 2],
    pub bump_width: f64,
    /// Rescale all data to this fraction of the smallness gate (Westervelt only).
    pub gate_fraction: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            u0_modes: vec![(1, 0.01)],
            u1_modes: vec![],
            forcing: ForcingKind::None,
            forcing_mode: 1,
            forcing_amplitude: 0.0,
            forcing_profile: TemporalProfile::HalfSine,
            bump_center: [0.0, 0.0],
            bump_width: 0.05,
            gate_fraction: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub radius: Option<f64>,
    /// With `data.gate_fraction`: radius as a fraction of `r*` when `radius` is absent.
    pub radius_fraction: f64,
    pub override_gate: bool,
    pub n_probes: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-10,
            max_iter: 100,
            radius: None,
            radius_fraction: 0.5,
            override_gate: false,
            n_probes: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoscoConfig {
    pub first_level: u32,
    pub last_level: u32,
    pub reference_level: u32,
    pub margin: f64,
    pub support_center: [f64; 2],
    pub support_half: f64,
    pub gate_fraction: f64,
}

impl Default for MoscoConfig {
    fn default() -> Self {
        MoscoConfig {
            first_level: 1,
            last_level: 4,
            reference_level: 5,
            margin: 0.1,
            support_center: [0.0, 0.0],
            support_half: 0.15,
            gate_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub xie_series: usize,
    pub xie_n: usize,
    pub xie_grid: usize,
    pub linf_first_level: u32,
    pub linf_last_level: u32,
    pub linf_h_target: f64,
    pub linf_probes: usize,
    pub poincare_random: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            xie_series: 1000,
            xie_n: 6,
            xie_grid: 24,
            linf_first_level: 1,
            linf_last_level: 4,
            linf_h_target: 0.05,
            linf_probes: 16,
            poincare_random: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Probes of the smallness-constant estimation.
    pub probes: u64,
    /// Random series and probes of `verify`.
    pub verify: u64,
}

/// One run, read from a TOML file with one table per section.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Option<Experiment>,
    pub output: Option<PathBuf>,
    pub physics: PhysicalParams,
    pub domain: DomainConfig,
    pub mesh: MeshConfig,
    pub modes: ModesConfig,
    pub time: TimeConfig,
    pub data: DataConfig,
    pub solver: SolverConfig,
    pub mosco: MoscoConfig,
    pub verify: VerifyConfig,
    pub seeds: Option<Seeds>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Reads a TOML config, or the `config` member of a `manifest.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            let v: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
            let cfg = v
                .get("config")
                .ok_or_else(|| Error::Parse("manifest has no `config` member".into()))?;
            return serde_json::from_value(cfg.clone()).map_err(|e| Error::Parse(e.to_string()));
        }
        RunConfig::from_toml(&text)
    }

    pub fn seeds(&self) -> Result<&Seeds> {
        self.seeds
            .as_ref()
            .ok_or_else(|| Error::Validation("[seeds] is required for this experiment".into()))
    }

    /// Checks every field used by `experiment` and reports all problems at once.
    pub fn validate(&self, experiment: Experiment) -> Result<()> {
        let mut diag = Diagnostics::default();
        if let Some(e) = self.experiment {
            if e != experiment {
                diag.push(
                    "experiment",
                    format!(
                        "config is for `{}` but `{}` was requested",
                        e.name(),
                        experiment.name()
                    ),
                );
            }
        }
        let p = &self.physics;
        diag.positive("physics.c", p.c);
        diag.positive("physics.nu", p.nu);
        diag.positive("physics.eps", p.eps);
        if !(p.alpha >= 0.0 && p.alpha.is_finite()) {
            diag.push(
                "physics.alpha",
                format!("must be non-negative and finite (got {})", p.alpha),
            );
        }
        let d = &self.domain;
        diag.positive("domain.base_side", d.base_side);
        diag.finite("domain.center", &d.center);
        diag.finite("domain.rectangle", &d.rectangle);
        if d.kind == DomainKind::Rectangle
            && !(d.rectangle[2] > d.rectangle[0] && d.rectangle[3] > d.rectangle[1])
        {
            diag.push("domain.rectangle", "needs x0 < x1 and y0 < y1".into());
        }
        if d.kind == DomainKind::Polygon && d.path.is_none() {
            diag.push("domain.path", "required when kind = \"polygon\"".into());
        }
        diag.positive("mesh.h_target", self.mesh.h_target);
        if experiment != Experiment::Mesh {
            let m = &self.modes;
            diag.at_least("modes.n_modes", m.n_modes, 1);
            diag.at_least("modes.max_iter", m.max_iter, 1);
            diag.positive("modes.tol", m.tol);
            diag.positive("modes.cluster_tol", m.cluster_tol);
        }
        if matches!(
            experiment,
            Experiment::SolveLinear | Experiment::SolveWestervelt | Experiment::Mosco
        ) {
            diag.positive("time.dt", self.time.dt);
            diag.positive("time.horizon", self.time.horizon);
            if self.time.dt > self.time.horizon {
                diag.push("time.dt", "must not exceed time.horizon".into());
            }
        }
        if matches!(
            experiment,
            Experiment::SolveLinear | Experiment::SolveWestervelt
        ) {
            let data = &self.data;
            for (name, list) in [
                ("data.u0_modes", &data.u0_modes),
                ("data.u1_modes", &data.u1_modes),
            ] {
                for &(k, c) in list {
                    if k == 0 || k > self.modes.n_modes {
                        diag.push(
                            name,
                            format!("mode index {k} outside 1..={}", self.modes.n_modes),
                        );
                    }
                    diag.finite(name, &[c]);
                }
            }
            diag.finite("data.forcing_amplitude", &[data.forcing_amplitude]);
            match data.forcing {
                ForcingKind::Mode
                    if data.forcing_mode == 0 || data.forcing_mode > self.modes.n_modes =>
                {
                    diag.push(
                        "data.forcing_mode",
                        format!("outside 1..={}", self.modes.n_modes),
                    )
                }
                ForcingKind::Bump => {
                    diag.positive("data.bump_width", data.bump_width);
                    diag.finite("data.bump_center", &data.bump_center);
                }
                _ => {}
            }
            if let Some(g) = data.gate_fraction {
                diag.unit_open("data.gate_fraction", g, true);
            }
        }
        if matches!(experiment, Experiment::SolveWestervelt | Experiment::Mosco) {
            let s = &self.solver;
            diag.positive("solver.tol", s.tol);
            diag.at_least("solver.max_iter", s.max_iter, 1);
            diag.at_least("solver.n_probes", s.n_probes, 16);
            diag.unit_open("solver.radius_fraction", s.radius_fraction, false);
            if let Some(r) = s.radius {
                diag.positive("solver.radius", r);
            }
        }
        if experiment == Experiment::Mosco {
            let m = &self.mosco;
            if d.kind != DomainKind::Koch {
                diag.push("domain.kind", "mosco runs on the Koch family".into());
            }
            if !(m.first_level <= m.last_level && m.last_level <= m.reference_level) {
                diag.push(
                    "mosco",
                    "needs first_level <= last_level <= reference_level".into(),
                );
            }
            diag.positive("mosco.margin", m.margin);
            diag.positive("mosco.support_half", m.support_half);
            diag.finite("mosco.support_center", &m.support_center);
            diag.unit_open("mosco.gate_fraction", m.gate_fraction, true);
        }
        if experiment == Experiment::Verify {
            let v = &self.verify;
            diag.at_least("verify.xie_series", v.xie_series, 1);
            diag.at_least("verify.xie_n", v.xie_n, 1);
            diag.at_least("verify.xie_grid", v.xie_grid, 4 * v.xie_n);
            diag.at_least("verify.linf_probes", v.linf_probes, 1);
            diag.at_least("verify.poincare_random", v.poincare_random, 1);
            diag.positive("verify.linf_h_target", v.linf_h_target);
            if v.linf_first_level > v.linf_last_level {
                diag.push(
                    "verify.linf_first_level",
                    "must not exceed linf_last_level".into(),
                );
            }
        }
        if experiment.is_stochastic() && self.seeds.is_none() {
            diag.push(
                "seeds",
                format!(
                    "`{}` draws random numbers; [seeds] with `probes` and `verify` is required",
                    experiment.name()
                ),
            );
        }
        diag.finish()
    }
}

#[derive(Default)]
struct Diagnostics(Vec<(String, String)>);

impl Diagnostics {
    fn push(&mut self, field: &str, msg: String) {
        self.0.push((field.to_string(), msg));
    }

    fn positive(&mut self, field: &str, v: f64) {
        if !(v > 0.0 && v.is_finite()) {
            self.push(field, format!("must be positive and finite (got {v})"));
        }
    }

    fn finite(&mut self, field: &str, vs: &[f64]) {
        if vs.iter().any(|v| !v.is_finite()) {
            self.push(field, "must be finite".into());
        }
    }

    fn at_least(&mut self, field: &str, v: usize, min: usize) {
        if v < min {
            self.push(field, format!("must be at least {min} (got {v})"));
        }
    }

    fn unit_open(&mut self, field: &str, v: f64, closed_right: bool) {
        let ok = v > 0.0 && if closed_right { v <= 1.0 } else { v < 1.0 };
        if !ok {
            let range = if closed_right { "(0, 1]" } else { "(0, 1)" };
            self.push(field, format!("must lie in {range} (got {v})"));
        }
    }

    fn finish(self) -> Result<()> {
        if self.0.is_empty() {
            return Ok(());
        }
        let mut s = String::from("invalid configuration");
        for (field, msg) in &self.0 {
            write!(s, "\n  {field}: {msg}").unwrap();
        }
        Err(Error::Validation(s))
    }
}
