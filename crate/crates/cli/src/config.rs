//! Experiment configuration: JSON file, then command-line overrides, then
//! validation against the library preconditions.

use std::fmt;
use std::path::{Path, PathBuf};

use fracks_core::solver::{Reconstruction, SolverConfig};
use fracks_core::ModelParams;
use serde::{Deserialize, Serialize};

/// Configuration or command-line mistake; maps to exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub solver: SolverSection,
    pub extremal: ExtremalSection,
    pub dichotomy: DichotomySection,
    pub eps_study: EpsStudySection,
    pub simulate: SimulateSection,
    pub verify: VerifySection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    /// Fractional order; `constants` insists on an explicit value.
    pub s: Option<f64>,
    pub epsilon: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub n: usize,
    pub r_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub cfl: f64,
    pub t_end: f64,
    pub blowup_factor: f64,
    pub output_every: usize,
    pub dt_min: f64,
    pub max_steps: usize,
    pub reconstruction: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CStarSource {
    /// Closed-form upper value.
    Upper,
    /// `J(U)` of the computed Euler-Lagrange profile.
    Measured,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtremalSection {
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
    pub pin_radius: Option<f64>,
    /// Random starts for the ascent; 0 skips it.
    pub n_starts: usize,
    pub seed: u64,
    pub ascent_max_iter: usize,
    /// Which C* (and matching M*) enters the global-existence bound.
    pub c_star: CStarSource,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DichotomySection {
    pub mass_ratios: Vec<f64>,
    /// Subcritical horizon in units of the diffusive time of `U`.
    pub t_end_tau: f64,
    /// Supercritical horizon in units of the chord bound.
    pub t_end_chord: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpsStudySection {
    pub eps_list: Vec<f64>,
    pub mass_ratio: f64,
    pub t_fix_tau: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    /// Initial data `ratio · U` with `U` the Euler-Lagrange profile.
    pub mass_ratio: f64,
    /// Horizon in units of the diffusive time of `U`; overridden by an
    /// explicit `solver.t_end` when this is `None`.
    pub t_end_tau: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub hls_grid_n: usize,
    pub hls_r_max: f64,
    pub random_fields: usize,
    pub seed: u64,
    pub tolerances: Tolerances,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub symmetry: f64,
    pub hls: f64,
    pub vhls: f64,
    pub virial: f64,
    pub dissipation: f64,
    pub scaling: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: PathBuf,
    pub kernel_cache: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            grid: GridConfig::default(),
            solver: SolverSection::default(),
            extremal: ExtremalSection::default(),
            dichotomy: DichotomySection::default(),
            eps_study: EpsStudySection::default(),
            simulate: SimulateSection::default(),
            verify: VerifySection::default(),
            output: OutputSection::default(),
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d: 3, s: None, epsilon: 0.0 }
    }
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { n: 512, r_max: 2.0 }
    }
}

impl Default for SolverSection {
    fn default() -> Self {
        let base = SolverConfig::default();
        Self {
            cfl: base.cfl,
            t_end: base.t_end,
            blowup_factor: base.blowup_factor,
            output_every: base.output_every,
            dt_min: base.dt_min,
            max_steps: base.max_steps,
            reconstruction: "primitive".into(),
        }
    }
}

impl Default for ExtremalSection {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 500,
            damping: 0.5,
            pin_radius: None,
            n_starts: 0,
            seed: 20240607,
            ascent_max_iter: 4000,
            c_star: CStarSource::Upper,
        }
    }
}

impl Default for DichotomySection {
    fn default() -> Self {
        Self {
            mass_ratios: vec![0.5, 0.9, 1.5, 2.0],
            t_end_tau: 5.0,
            t_end_chord: 3.0,
        }
    }
}

impl Default for EpsStudySection {
    fn default() -> Self {
        Self {
            eps_list: vec![0.2, 0.1, 0.05, 0.025],
            mass_ratio: 0.5,
            t_fix_tau: 1.0,
        }
    }
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self { mass_ratio: 0.5, t_end_tau: Some(5.0) }
    }
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            hls_grid_n: 1024,
            hls_r_max: 50.0,
            random_fields: 100,
            seed: 7,
            tolerances: Tolerances::default(),
        }
    }
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            symmetry: 1e-12,
            hls: 0.02,
            vhls: 0.02,
            virial: 0.05,
            dissipation: 0.05,
            scaling: 0.01,
        }
    }
}

impl Tolerances {
    pub fn set_all(&mut self, tol: f64) {
        *self = Self {
            symmetry: tol,
            hls: tol,
            vhls: tol,
            virial: tol,
            dissipation: tol,
            scaling: tol,
        };
    }
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("out"),
            kernel_cache: None,
        }
    }
}

/// Fractional order used when neither the file nor the flags give one.
pub const DEFAULT_S: f64 = 1.25;

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
    }

    pub fn s(&self) -> f64 {
        self.model.s.unwrap_or(DEFAULT_S)
    }

    pub fn params(&self) -> anyhow::Result<ModelParams> {
        ModelParams::new(self.model.d, self.s(), self.model.epsilon)
            .map_err(|e| usage(format!("model: {e}")))
    }

    pub fn reconstruction(&self) -> anyhow::Result<Reconstruction> {
        self.solver
            .reconstruction
            .parse()
            .map_err(|e| usage(format!("solver.reconstruction: {e}")))
    }

    pub fn solver_config(&self) -> anyhow::Result<SolverConfig> {
        let cfg = SolverConfig {
            cfl: self.solver.cfl,
            dt_min: self.solver.dt_min,
            t_end: self.solver.t_end,
            blowup_factor: self.solver.blowup_factor,
            output_every: self.solver.output_every,
            max_steps: self.solver.max_steps,
            reconstruction: self.reconstruction()?,
            snapshot_every: 0,
        };
        cfg.validate().map_err(|e| usage(format!("solver: {e}")))?;
        Ok(cfg)
    }

    /// Checks every field against the library preconditions.
    pub fn validate(&self) -> anyhow::Result<()> {
        let d = self.model.d as f64;
        if let Some(s) = self.model.s {
            if !(2.0 < 2.0 * s && 2.0 * s < d) {
                return Err(usage(format!("model.s: need 2 < 2s < d = {d}, got {s}")));
            }
        }
        if !(self.model.epsilon >= 0.0 && self.model.epsilon.is_finite()) {
            return Err(usage(format!("model.epsilon: must be non-negative, got {}", self.model.epsilon)));
        }
        let sv = &self.solver;
        if !(sv.cfl > 0.0 && sv.cfl <= 1.0) {
            return Err(usage(format!("solver.cfl: must lie in (0, 1], got {}", sv.cfl)));
        }
        if !(sv.blowup_factor > 1.0) {
            return Err(usage(format!("solver.blowup_factor: must exceed 1, got {}", sv.blowup_factor)));
        }
        self.params()?;
        self.solver_config()?;
        if self.grid.n < 8 {
            return Err(usage(format!("grid.n: need at least 8 cells, got {}", self.grid.n)));
        }
        if !(self.grid.r_max > 0.0 && self.grid.r_max.is_finite()) {
            return Err(usage(format!("grid.r_max: must be positive, got {}", self.grid.r_max)));
        }
        let e = &self.extremal;
        if !(e.tol > 0.0) || e.max_iter == 0 {
            return Err(usage("extremal.tol and extremal.max_iter must be positive"));
        }
        if !(e.damping > 0.0 && e.damping <= 1.0) {
            return Err(usage(format!("extremal.damping: must lie in (0, 1], got {}", e.damping)));
        }
        if let Some(p) = e.pin_radius {
            if !(p > 0.0 && p < self.grid.r_max) {
                return Err(usage(format!(
                    "extremal.pin_radius: must lie in (0, grid.r_max), got {p}"
                )));
            }
        }
        for (i, &r) in self.dichotomy.mass_ratios.iter().enumerate() {
            if !(r > 0.0 && r.is_finite()) {
                return Err(usage(format!("dichotomy.mass_ratios[{i}]: must be positive, got {r}")));
            }
        }
        if !(self.dichotomy.t_end_tau > 0.0 && self.dichotomy.t_end_chord > 0.0) {
            return Err(usage("dichotomy.t_end_tau and dichotomy.t_end_chord must be positive"));
        }
        for (i, w) in self.eps_study.eps_list.windows(2).enumerate() {
            if !(w[1] < w[0]) {
                return Err(usage(format!(
                    "eps_study.eps_list[{}]: list must be strictly decreasing",
                    i + 1
                )));
            }
        }
        if let Some(i) = self.eps_study.eps_list.iter().position(|&x| !(x > 0.0)) {
            return Err(usage(format!("eps_study.eps_list[{i}]: must be positive")));
        }
        if !(self.eps_study.mass_ratio > 0.0 && self.eps_study.t_fix_tau > 0.0) {
            return Err(usage("eps_study.mass_ratio and eps_study.t_fix_tau must be positive"));
        }
        if !(self.simulate.mass_ratio > 0.0) {
            return Err(usage("simulate.mass_ratio must be positive"));
        }
        if let Some(t) = self.simulate.t_end_tau {
            if !(t > 0.0) {
                return Err(usage(format!("simulate.t_end_tau: must be positive, got {t}")));
            }
        }
        let v = &self.verify;
        if v.hls_grid_n < 8 || !(v.hls_r_max > 0.0) || v.random_fields == 0 {
            return Err(usage("verify: hls_grid_n >= 8, hls_r_max > 0, random_fields > 0"));
        }
        let t = &v.tolerances;
        for (name, x) in [
            ("symmetry", t.symmetry),
            ("hls", t.hls),
            ("vhls", t.vhls),
            ("virial", t.virial),
            ("dissipation", t.dissipation),
            ("scaling", t.scaling),
        ] {
            if !(x >= 0.0) {
                return Err(usage(format!("verify.tolerances.{name}: must be non-negative")));
            }
        }
        Ok(())
    }
}
