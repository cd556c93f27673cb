//! Explicit finite-volume time stepping of `u_t = ∇·(u∇μ) + εΔu`,
//! `μ = (m/(m−1)) u^{m−1} − φ`, on a radial grid with zero flux at the
//! origin and at `R_max`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::energy::{self, pow_m1};
use crate::error::{domain, Error, Result};
use crate::field::{DensityField, RadialGrid};
use crate::model::ModelParams;
use crate::riesz::{build_kernel, RieszKernel};

/// Face density used by the upwind flux.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Reconstruction {
    /// Donor-cell average.
    FirstOrder,
    /// Donor-cell value extrapolated to the face with a minmod-limited slope.
    Muscl,
    /// Face value of a quartic interpolant of the cumulative mass, clamped
    /// to `[0, 2·u_donor]`.
    Primitive,
}

impl std::str::FromStr for Reconstruction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first_order" | "first-order" | "upwind" => Ok(Self::FirstOrder),
            "muscl" => Ok(Self::Muscl),
            "primitive" => Ok(Self::Primitive),
            other => Err(domain(format!("unknown reconstruction {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolverConfig {
    pub cfl: f64,
    pub dt_min: f64,
    pub t_end: f64,
    /// L^∞ growth factor over the initial maximum that declares blow-up.
    pub blowup_factor: f64,
    pub output_every: usize,
    pub max_steps: usize,
    pub reconstruction: Reconstruction,
    /// Keep the full profile every this many steps (0 disables).
    pub snapshot_every: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            cfl: 0.5,
            dt_min: 1e-14,
            t_end: 1.0,
            blowup_factor: 1e3,
            output_every: 50,
            max_steps: 50_000_000,
            reconstruction: Reconstruction::Primitive,
            snapshot_every: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(domain(format!("cfl must lie in (0, 1], got {}", self.cfl)));
        }
        if !(self.dt_min > 0.0 && self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(domain("dt_min and t_end must be positive"));
        }
        if !(self.blowup_factor > 1.0) {
            return Err(domain(format!(
                "blowup_factor must exceed 1, got {}",
                self.blowup_factor
            )));
        }
        if self.output_every == 0 || self.max_steps == 0 {
            return Err(domain("output_every and max_steps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SolverState {
    pub t: f64,
    pub u: DensityField,
    pub step_count: usize,
    pub dt_last: f64,
}

impl SolverState {
    pub fn new(u: DensityField) -> Self {
        Self {
            t: 0.0,
            u,
            step_count: 0,
            dt_last: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BlowUpReason {
    Linf,
    DtCollapse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    BlowUp { t_detect: f64, reason: BlowUpReason },
    /// The stable step fell below `dt_min` without any concentration.
    Stalled { t: f64, dt: f64 },
    StepLimit { t: f64 },
}

impl RunStatus {
    pub fn is_completed(&self) -> bool {
        matches!(self, Self::Completed)
    }

    pub fn is_blowup(&self) -> bool {
        matches!(self, Self::BlowUp { .. })
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Completed => "completed",
            Self::BlowUp { .. } => "blow_up",
            Self::Stalled { .. } => "stalled",
            Self::StepLimit { .. } => "step_limit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiagnosticsRow {
    pub t: f64,
    pub mass: f64,
    pub lm_norm: f64,
    pub linf_norm: f64,
    pub m2: f64,
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "W")]
    pub w: f64,
    #[serde(rename = "D")]
    pub d: f64,
    pub virial_rhs: f64,
    pub dt: f64,
}

pub const DIAGNOSTICS_HEADER: &str = "t,mass,lm_norm,linf_norm,m2,F,S,W,D,virial_rhs,dt";

impl DiagnosticsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.t,
            self.mass,
            self.lm_norm,
            self.linf_norm,
            self.m2,
            self.f,
            self.s,
            self.w,
            self.d,
            self.virial_rhs,
            self.dt
        )
    }

    pub fn is_finite(&self) -> bool {
        [
            self.t,
            self.mass,
            self.lm_norm,
            self.linf_norm,
            self.m2,
            self.f,
            self.s,
            self.w,
            self.d,
            self.virial_rhs,
            self.dt,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub t: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub diagnostics: Vec<DiagnosticsRow>,
    /// Mass that left through `R_max`; zero for the zero-flux boundary.
    pub boundary_mass_flux_total: f64,
    /// Largest mass seen in the outermost 5% of cells.
    pub boundary_layer_mass: f64,
    pub clipped_mass: f64,
    pub final_state: SolverState,
    pub snapshots: Vec<Snapshot>,
}

pub fn diagnostics_row(
    u: &DensityField,
    t: f64,
    dt: f64,
    kernel: &RieszKernel,
    params: &ModelParams,
    reconstruction: Reconstruction,
) -> Result<DiagnosticsRow> {
    let rep = energy::energy_report(u, kernel, params, reconstruction)?;
    let m = params.m();
    Ok(DiagnosticsRow {
        t,
        mass: u.mass(),
        lm_norm: u.lp_norm(m)?,
        linf_norm: u.linf_norm(),
        m2: u.second_moment(),
        f: rep.f,
        s: rep.s,
        w: rep.w,
        d: rep.d,
        virial_rhs: 2.0 * params.alpha() * rep.f,
        dt,
    })
}

pub fn face_densities(
    u: &[f64],
    grid: &RadialGrid,
    vel: &[f64],
    reconstruction: Reconstruction,
) -> Vec<f64> {
    let mut out = vec![0.0; u.len()];
    face_densities_into(u, grid, vel, reconstruction, &mut out);
    out
}

fn minmod(a: f64, b: f64) -> f64 {
    if a * b <= 0.0 {
        0.0
    } else if a > 0.0 {
        a.min(b)
    } else {
        a.max(b)
    }
}

fn face_densities_into(
    u: &[f64],
    grid: &RadialGrid,
    vel: &[f64],
    reconstruction: Reconstruction,
    out: &mut [f64],
) {
    let n = u.len();
    let c = grid.centers();
    let e = grid.edges();
    let v = grid.volumes();
    let slope = |i: usize| -> f64 {
        if i == 0 || i + 1 == n {
            return 0.0;
        }
        let l = (u[i] - u[i - 1]) / (c[i] - c[i - 1]);
        let r = (u[i + 1] - u[i]) / (c[i + 1] - c[i]);
        minmod(l, r)
    };
    // mean of u over the ball of radius e[j]; smooth and even in r, so it
    // interpolates without the r^(d-1) degeneracy at the origin
    let mut ball_mean = Vec::new();
    if reconstruction == Reconstruction::Primitive {
        ball_mean = vec![0.0; n + 1];
        let (mut w, mut b) = (0.0, 0.0);
        for j in 0..n {
            w += u[j] * v[j];
            b += v[j];
            ball_mean[j + 1] = w / b;
        }
    }
    if n > 0 {
        out[0] = 0.0;
    }
    for k in 1..n {
        let donor = if vel[k] > 0.0 { k - 1 } else { k };
        out[k] = match reconstruction {
            Reconstruction::FirstOrder => u[donor],
            Reconstruction::Muscl => u[donor] + slope(donor) * (e[k] - c[donor]),
            Reconstruction::Primitive if n < 5 => u[donor],
            Reconstruction::Primitive => {
                primitive_face_value(&ball_mean, e, k, grid.d()).clamp(0.0, 2.0 * u[donor])
            }
        };
    }
}

/// `u(e_k) = G(e_k) + (e_k/d) G'(e_k)` from a quartic through five edge
/// values of the ball mean `G`, mirrored across the origin near `r = 0`.
fn primitive_face_value(ball_mean: &[f64], e: &[f64], k: usize, d: usize) -> f64 {
    let n = e.len() - 1;
    let idx: [isize; 5] = match k {
        1 => [-2, -1, 1, 2, 3],
        2 => [-1, 1, 2, 3, 4],
        _ => {
            let lo = (k - 2).min(n - 4) as isize;
            [lo, lo + 1, lo + 2, lo + 3, lo + 4]
        }
    };
    let x = idx.map(|i| if i < 0 { -e[i.unsigned_abs()] } else { e[i as usize] });
    let y = idx.map(|i| ball_mean[i.unsigned_abs()]);
    let m = idx.iter().position(|&i| i == k as isize).expect("face is a stencil node");
    let mut deriv = 0.0;
    for j in 0..5 {
        let w = if j == m {
            (0..5).filter(|&l| l != m).map(|l| 1.0 / (x[m] - x[l])).sum()
        } else {
            (0..5)
                .filter(|&l| l != j && l != m)
                .fold(1.0 / (x[j] - x[m]), |acc, l| acc * (x[m] - x[l]) / (x[j] - x[l]))
        };
        deriv += w * y[j];
    }
    y[m] + e[k] / d as f64 * deriv
}

/// Reusable buffers and grid geometry for repeated steps.
struct Stepper<'a> {
    kernel: &'a RieszKernel,
    params: &'a ModelParams,
    reconstruction: Reconstruction,
    grid: Arc<RadialGrid>,
    dc: Vec<f64>,
    area: Vec<f64>,
    face_bound: Vec<f64>,
    h_min: f64,
    masses: Vec<f64>,
    phi: Vec<f64>,
    mu: Vec<f64>,
    vel: Vec<f64>,
    face: Vec<f64>,
    flux: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(
        kernel: &'a RieszKernel,
        params: &'a ModelParams,
        reconstruction: Reconstruction,
    ) -> Self {
        let grid = kernel.grid().clone();
        let n = grid.len();
        let c = grid.centers();
        let e = grid.edges();
        let mut dc = vec![0.0; n];
        for k in 1..n {
            dc[k] = c[k] - c[k - 1];
        }
        let area: Vec<f64> = (0..=n).map(|k| grid.face_area(k)).collect();
        // largest ratio face value / cell value the limited reconstruction
        // can produce in each cell
        let face_bound = (0..n)
            .map(|i| match reconstruction {
                Reconstruction::FirstOrder => 1.0,
                Reconstruction::Primitive => 2.0,
                _ if i == 0 || i + 1 == n => 1.0,
                Reconstruction::Muscl => {
                    let up = (e[i + 1] - c[i]) / (c[i] - c[i - 1]);
                    let down = (c[i] - e[i]) / (c[i + 1] - c[i]);
                    1.0 + up.max(down)
                }
            })
            .collect();
        let h_min = e.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        Self {
            kernel,
            params,
            reconstruction,
            grid,
            dc,
            area,
            face_bound,
            h_min,
            masses: vec![0.0; n],
            phi: vec![0.0; n],
            mu: vec![0.0; n],
            vel: vec![0.0; n],
            face: vec![0.0; n],
            flux: vec![0.0; n + 1],
        }
    }

    /// Fills the face fluxes for `u` and returns the largest stable step
    /// before the CFL factor.
    fn prepare(&mut self, u: &[f64]) -> f64 {
        let n = u.len();
        let vols = self.grid.volumes();
        let m = self.params.m();
        let eps = self.params.epsilon();
        for i in 0..n {
            self.masses[i] = u[i] * vols[i];
        }
        self.kernel
            .apply_masses(&self.masses, self.params.coupling(), &mut self.phi);
        let pre = m / (m - 1.0);
        let mut max_diff = 0.0f64;
        for i in 0..n {
            let p = pow_m1(u[i], m);
            self.mu[i] = pre * p - self.phi[i];
            max_diff = max_diff.max(m * p);
        }
        self.vel[0] = 0.0;
        for k in 1..n {
            self.vel[k] = -(self.mu[k] - self.mu[k - 1]) / self.dc[k];
        }
        face_densities_into(u, &self.grid, &self.vel, self.reconstruction, &mut self.face);
        self.flux[0] = 0.0;
        self.flux[n] = 0.0;
        for k in 1..n {
            let diff = eps * (u[k] - u[k - 1]) / self.dc[k];
            self.flux[k] = self.area[k] * (self.face[k] * self.vel[k] - diff);
        }
        // exact positivity bound on the outflow rate of every cell
        let mut max_rate = 0.0f64;
        for i in 0..n {
            let mut out = 0.0;
            if i + 1 < n {
                let k = i + 1;
                out += self.area[k] * (self.face_bound[i] * self.vel[k].max(0.0) + eps / self.dc[k]);
            }
            if i >= 1 {
                out += self.area[i] * (self.face_bound[i] * (-self.vel[i]).max(0.0) + eps / self.dc[i]);
            }
            max_rate = max_rate.max(out / vols[i]);
        }
        let transport = if max_rate > 0.0 { 1.0 / max_rate } else { f64::INFINITY };
        let denom = 2.0 * max_diff + 2.0 * eps;
        let parabolic = if denom > 0.0 {
            self.h_min * self.h_min / denom
        } else {
            f64::INFINITY
        };
        transport.min(parabolic)
    }

    /// Applies the prepared fluxes over `dt`; returns the clipped mass.
    fn apply(&self, u: &mut [f64], dt: f64) -> f64 {
        let vols = self.grid.volumes();
        let mut clipped = 0.0;
        for i in 0..u.len() {
            let next = u[i] - dt * (self.flux[i + 1] - self.flux[i]) / vols[i];
            if next < 0.0 {
                clipped -= next * vols[i];
                u[i] = 0.0;
            } else {
                u[i] = next;
            }
        }
        clipped
    }
}

/// Result of a single [`step`].
#[derive(Debug, Clone)]
pub enum StepOutcome {
    Advanced { state: SolverState, clipped_mass: f64 },
    /// The stable step is below `dt_min`; the state is unchanged.
    Stalled { dt: f64 },
}

fn check_setup(u: &DensityField, kernel: &RieszKernel, params: &ModelParams) -> Result<()> {
    energy::check_kernel(kernel, u, params)
}

/// One explicit step, clamped so as not to pass `config.t_end`.
pub fn step(
    state: &SolverState,
    kernel: &RieszKernel,
    params: &ModelParams,
    config: &SolverConfig,
) -> Result<StepOutcome> {
    config.validate()?;
    check_setup(&state.u, kernel, params)?;
    let mut stepper = Stepper::new(kernel, params, config.reconstruction);
    let mut u = state.u.values().to_vec();
    let dt_stable = config.cfl * stepper.prepare(&u);
    if dt_stable < config.dt_min {
        return Ok(StepOutcome::Stalled { dt: dt_stable });
    }
    let remaining = config.t_end - state.t;
    let (dt, t) = if remaining > 0.0 && dt_stable >= remaining {
        (remaining, config.t_end)
    } else {
        (dt_stable, state.t + dt_stable)
    };
    let clipped = stepper.apply(&mut u, dt);
    Ok(StepOutcome::Advanced {
        state: SolverState {
            t,
            u: DensityField::from_raw(state.u.grid().clone(), u),
            step_count: state.step_count + 1,
            dt_last: dt,
        },
        clipped_mass: clipped,
    })
}

/// Numerical blow-up test: L^∞ growth beyond `blowup_factor` or a step
/// below `dt_min`.
pub fn detect_blowup(state: &SolverState, u0_linf: f64, config: &SolverConfig) -> Option<BlowUpReason> {
    if state.u.linf_norm() > config.blowup_factor * u0_linf {
        Some(BlowUpReason::Linf)
    } else if state.step_count > 0 && state.dt_last < config.dt_min {
        Some(BlowUpReason::DtCollapse)
    } else {
        None
    }
}

/// Integrates from `u0` until `t_end`, numerical blow-up, a stall or the
/// step limit.
///
/// A collapsing step size counts as blow-up when the maximum has grown
/// past its initial value, and as a stall otherwise.
pub fn run(
    u0: &DensityField,
    kernel: &RieszKernel,
    params: &ModelParams,
    config: &SolverConfig,
) -> Result<RunOutcome> {
    config.validate()?;
    check_setup(u0, kernel, params)?;
    let grid = u0.grid().clone();
    let recon = config.reconstruction;
    let u0_linf = u0.linf_norm();
    let mut stepper = Stepper::new(kernel, params, recon);
    let mut u = u0.values().to_vec();
    let mut t = 0.0;
    let mut steps = 0usize;
    let mut dt_last = 0.0;
    let mut clipped_total = 0.0;
    let mut boundary_layer = u0.outer_mass(0.05);
    let mut rows = vec![diagnostics_row(u0, 0.0, 0.0, kernel, params, recon)?];
    let mut snapshots = Vec::new();
    if config.snapshot_every > 0 {
        snapshots.push(Snapshot { t: 0.0, values: u.clone() });
    }
    let field = |u: &[f64]| DensityField::from_raw(grid.clone(), u.to_vec());
    let status = loop {
        if t >= config.t_end {
            break RunStatus::Completed;
        }
        if steps >= config.max_steps {
            break RunStatus::StepLimit { t };
        }
        let dt_stable = config.cfl * stepper.prepare(&u);
        if dt_stable < config.dt_min {
            let linf = u.iter().copied().fold(0.0, f64::max);
            break if linf > u0_linf {
                RunStatus::BlowUp {
                    t_detect: t,
                    reason: BlowUpReason::DtCollapse,
                }
            } else {
                RunStatus::Stalled { t, dt: dt_stable }
            };
        }
        let remaining = config.t_end - t;
        let dt = if dt_stable >= remaining { remaining } else { dt_stable };
        clipped_total += stepper.apply(&mut u, dt);
        t = if dt == remaining { config.t_end } else { t + dt };
        steps += 1;
        dt_last = dt;
        let current = field(&u);
        boundary_layer = boundary_layer.max(current.outer_mass(0.05));
        if config.snapshot_every > 0 && steps % config.snapshot_every == 0 {
            snapshots.push(Snapshot { t, values: u.clone() });
        }
        if current.linf_norm() > config.blowup_factor * u0_linf {
            break RunStatus::BlowUp {
                t_detect: t,
                reason: BlowUpReason::Linf,
            };
        }
        if steps % config.output_every == 0 {
            rows.push(diagnostics_row(&current, t, dt, kernel, params, recon)?);
        }
    };
    let final_field = field(&u);
    if rows.last().map(|r| r.t) != Some(t) {
        rows.push(diagnostics_row(&final_field, t, dt_last, kernel, params, recon)?);
    }
    if config.snapshot_every > 0 && snapshots.last().map(|s| s.t) != Some(t) {
        snapshots.push(Snapshot { t, values: u.clone() });
    }
    Ok(RunOutcome {
        status,
        diagnostics: rows,
        boundary_mass_flux_total: 0.0,
        boundary_layer_mass: boundary_layer,
        clipped_mass: clipped_total,
        final_state: SolverState {
            t,
            u: final_field,
            step_count: steps,
            dt_last,
        },
        snapshots,
    })
}

/// `m2(u0) / (2(d − 2s)|F(u0)|)` when `F(u0) < 0`: the time at which the
/// chord `m2(0) + 2(d − 2s) F(u0) t` reaches zero.
pub fn blowup_time_upper_bound(
    u0: &DensityField,
    kernel: &RieszKernel,
    params: &ModelParams,
) -> Result<Option<f64>> {
    let f = energy::free_energy(u0, kernel, params)?;
    if f < 0.0 {
        Ok(Some(u0.second_moment() / (2.0 * params.alpha() * f.abs())))
    } else {
        Ok(None)
    }
}

/// Time scale of nonlinear diffusion across the core of `u`:
/// `(m2/M) / (m ‖u‖_∞^{m−1})`.
pub fn diffusive_time(u: &DensityField, params: &ModelParams) -> Result<f64> {
    if u.is_zero() {
        return Err(Error::ZeroField);
    }
    let m = params.m();
    Ok(u.second_moment() / u.mass() / (m * u.linf_norm().powf(m - 1.0)))
}

/// Radial test function for the weak formulation.
pub trait RadialTestFunction: Sync {
    fn value(&self, r: f64) -> f64;
    /// `ψ'(r)`.
    fn derivative(&self, r: f64) -> f64;
    /// `Δψ = ψ'' + (d−1)ψ'/r`.
    fn laplacian(&self, r: f64, d: usize) -> f64;
    /// Radius beyond which `∇ψ` vanishes, if any.
    fn gradient_support(&self) -> Option<f64>;
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantTest(pub f64);

impl RadialTestFunction for ConstantTest {
    fn value(&self, _r: f64) -> f64 {
        self.0
    }
    fn derivative(&self, _r: f64) -> f64 {
        0.0
    }
    fn laplacian(&self, _r: f64, _d: usize) -> f64 {
        0.0
    }
    fn gradient_support(&self) -> Option<f64> {
        Some(0.0)
    }
}

/// `ψ(r) = r²` up to `r0`, constant beyond `r1`, with
/// `ψ'(r) = 2r χ(r)` and `χ` a quintic smoothstep from 1 to 0 on `[r0, r1]`.
#[derive(Debug, Clone, Copy)]
pub struct TruncatedQuadratic {
    pub r0: f64,
    pub r1: f64,
}

impl TruncatedQuadratic {
    pub fn new(r0: f64, r1: f64) -> Result<Self> {
        if !(r0 > 0.0 && r1 > r0) {
            return Err(domain("need 0 < r0 < r1"));
        }
        Ok(Self { r0, r1 })
    }

    fn chi(&self, r: f64) -> (f64, f64) {
        if r <= self.r0 {
            return (1.0, 0.0);
        }
        if r >= self.r1 {
            return (0.0, 0.0);
        }
        let w = self.r1 - self.r0;
        let x = (r - self.r0) / w;
        let step = x * x * x * (10.0 - 15.0 * x + 6.0 * x * x);
        let dstep = 30.0 * x * x * (1.0 - x) * (1.0 - x) / w;
        (1.0 - step, -dstep)
    }
}

impl RadialTestFunction for TruncatedQuadratic {
    fn value(&self, r: f64) -> f64 {
        if r <= self.r0 {
            return r * r;
        }
        let top = r.min(self.r1);
        // 2ρχ(ρ) is a polynomial of degree 6 on [r0, r1]
        let rule = crate::special::GaussLegendre::new(4);
        self.r0 * self.r0 + rule.integrate(self.r0, top, |p| 2.0 * p * self.chi(p).0)
    }
    fn derivative(&self, r: f64) -> f64 {
        2.0 * r * self.chi(r).0
    }
    fn laplacian(&self, r: f64, d: usize) -> f64 {
        let (c, dc) = self.chi(r);
        2.0 * d as f64 * c + 2.0 * r * dc
    }
    fn gradient_support(&self) -> Option<f64> {
        Some(self.r1)
    }
}

/// Symmetrised interaction weights for `ψ` in `d = 3`:
/// `H_ij = ∬_{shell i × shell j} (∇ψ(x) − ∇ψ(y))·(x − y)
/// (|x − y|² + ε²)^{−α/2−1} dx dy`.
fn weak_interaction_matrix(grid: &RadialGrid, alpha: f64, eps: f64, psi: &dyn RadialTestFunction) -> Vec<f64> {
    let n = grid.len();
    let e = grid.edges();
    let rule = crate::special::GaussLegendre::new(4);
    let nodes = |a: f64, b: f64, split: usize| -> Vec<(f64, f64, f64)> {
        let h = (b - a) / split as f64;
        (0..split)
            .flat_map(|k| {
                let lo = a + k as f64 * h;
                rule.mapped(lo, lo + h)
                    .map(|(x, w)| (x, w * x * x, psi.derivative(x) / x))
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    let coarse: Vec<_> = (0..n).map(|i| nodes(e[i], e[i + 1], 1)).collect();
    let fine: Vec<_> = (0..n).map(|i| nodes(e[i], e[i + 1], 8)).collect();
    let e2 = eps * eps;
    let half = 0.5 * alpha;
    let angular = |r: f64, ar: f64, p: f64, bp: f64| -> f64 {
        let t0 = (r - p) * (r - p) + e2;
        let t1 = (r + p) * (r + p) + e2;
        let a_term = 0.5 * (ar - bp) * (r * r - p * p);
        let b_term = 0.5 * (ar + bp);
        let first = if t0 == 0.0 {
            0.0
        } else {
            (a_term - b_term * e2) * (t0.powf(-half) - t1.powf(-half)) / half
        };
        let second = b_term * (t1.powf(1.0 - half) - t0.powf(1.0 - half)) / (1.0 - half);
        std::f64::consts::PI / (r * p) * (first + second)
    };
    let pair = |xs: &[(f64, f64, f64)], ys: &[(f64, f64, f64)]| -> f64 {
        let mut acc = 0.0;
        for &(r, wr, ar) in xs {
            let mut row = 0.0;
            for &(p, wp, bp) in ys {
                row += wp * angular(r, ar, p, bp);
            }
            acc += wr * row;
        }
        4.0 * std::f64::consts::PI * acc
    };
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i..n)
                .map(|j| {
                    if j - i <= 1 {
                        pair(&fine[i], &fine[j])
                    } else {
                        pair(&coarse[i], &coarse[j])
                    }
                })
                .collect()
        })
        .collect();
    let mut h = vec![0.0; n * n];
    for (i, row) in upper.into_iter().enumerate() {
        for (off, v) in row.into_iter().enumerate() {
            h[i * n + i + off] = v;
            h[(i + off) * n + i] = v;
        }
    }
    h
}

/// Gap between the two sides of the weak formulation over a recorded
/// trajectory:
///
/// `∫ψu(t) − ∫ψu(0)` versus the trapezoidal time integral of
/// `∫Δψ u^m + ε∫Δψ u − (α c/2) ∬ (∇ψ(x) − ∇ψ(y))·(x − y) K'(x − y) u u`.
///
/// Only `d = 3` is supported.
pub fn weak_form_residual(
    trajectory: &[Snapshot],
    grid: &Arc<RadialGrid>,
    psi: &dyn RadialTestFunction,
    params: &ModelParams,
) -> Result<f64> {
    if params.d() != 3 || grid.d() != 3 {
        return Err(domain("weak-form residual is implemented for d = 3"));
    }
    if let Some(r) = psi.gradient_support() {
        if r > grid.r_max() * (1.0 + 1e-12) {
            return Err(domain(format!(
                "test function gradient support {r} exceeds the grid radius {}",
                grid.r_max()
            )));
        }
    }
    if trajectory.len() < 2 {
        return Err(domain("trajectory needs at least two snapshots"));
    }
    let n = grid.len();
    if trajectory.iter().any(|s| s.values.len() != n) {
        return Err(Error::GridMismatch("trajectory and grid"));
    }
    let vols = grid.volumes();
    let psi_avg = grid.cell_averages(|r| psi.value(r));
    let lap_avg = grid.cell_averages(|r| psi.laplacian(r, 3));
    let needs_h = psi.gradient_support().map_or(true, |r| r > 0.0);
    let h = if needs_h {
        weak_interaction_matrix(grid, params.alpha(), params.epsilon(), psi)
    } else {
        vec![0.0; n * n]
    };
    let m = params.m();
    let eps = params.epsilon();
    let pref = 0.5 * params.alpha() * params.coupling();
    let rhs = |u: &[f64]| -> f64 {
        let mut diff = 0.0;
        for i in 0..n {
            diff += lap_avg[i] * (u[i].powf(m) + eps * u[i]) * vols[i];
        }
        let mut inter = 0.0;
        if needs_h {
            for i in 0..n {
                if u[i] == 0.0 {
                    continue;
                }
                inter += u[i] * crate::riesz::dot(&h[i * n..(i + 1) * n], u);
            }
        }
        diff - pref * inter
    };
    let first = &trajectory[0];
    let last = &trajectory[trajectory.len() - 1];
    let moment = |u: &[f64]| -> f64 { (0..n).map(|i| psi_avg[i] * u[i] * vols[i]).sum() };
    let lhs = moment(&last.values) - moment(&first.values);
    let rates: Vec<f64> = trajectory.par_iter().map(|s| rhs(&s.values)).collect();
    let mut integral = 0.0;
    for k in 1..trajectory.len() {
        integral += 0.5 * (rates[k] + rates[k - 1]) * (trajectory[k].t - trajectory[k - 1].t);
    }
    Ok((lhs - integral).abs())
}

/// Runs `u0` to `t_fix` for each ε (kernel rebuilt per ε) and returns the
/// L¹ distances between consecutive final states.
pub fn epsilon_convergence_study(
    u0: &DensityField,
    params: &ModelParams,
    eps_list: &[f64],
    t_fix: f64,
    config: &SolverConfig,
) -> Result<Vec<f64>> {
    if eps_list.len() < 2 {
        return Ok(Vec::new());
    }
    let mut cfg = config.clone();
    cfg.t_end = t_fix;
    cfg.validate()?;
    let finals: Vec<Result<DensityField>> = eps_list
        .par_iter()
        .map(|&eps| {
            let p = params.with_epsilon(eps)?;
            let kernel = build_kernel(u0.grid().clone(), params.s(), eps)?;
            let out = run(u0, &kernel, &p, &cfg)?;
            if !out.status.is_completed() {
                return Err(Error::RunEndedEarly {
                    epsilon: eps,
                    t: out.final_state.t,
                    t_fix,
                });
            }
            Ok(out.final_state.u)
        })
        .collect();
    let finals = finals.into_iter().collect::<Result<Vec<_>>>()?;
    finals
        .windows(2)
        .map(|w| w[0].l1_distance(&w[1]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::riesz::build_kernel;

    fn setup(n: usize, r_max: f64) -> (Arc<RadialGrid>, RieszKernel, ModelParams) {
        let g = Arc::new(RadialGrid::uniform(3, n, r_max).unwrap());
        let k = build_kernel(g.clone(), 1.25, 0.0).unwrap();
        (g, k, ModelParams::new(3, 1.25, 0.0).unwrap())
    }

    fn bump(g: &Arc<RadialGrid>, amp: f64) -> DensityField {
        DensityField::from_profile(g.clone(), |r| amp * (1.0 - r * r).max(0.0)).unwrap()
    }

    #[test]
    fn uniform_state_is_stationary_without_attraction() {
        let (g, k, p) = setup(64, 1.0);
        let p = p.without_attraction();
        let u = DensityField::new(g, vec![0.7; 64]).unwrap();
        let cfg = SolverConfig { t_end: 1e-3, ..SolverConfig::default() };
        match step(&SolverState::new(u.clone()), &k, &p, &cfg).unwrap() {
            StepOutcome::Advanced { state, .. } => {
                for (a, b) in state.u.values().iter().zip(u.values()) {
                    assert!((a - b).abs() < 1e-14);
                }
            }
            StepOutcome::Stalled { .. } => panic!("stalled"),
        }
    }

    #[test]
    fn step_conserves_mass() {
        let (g, k, p) = setup(128, 2.0);
        let u = bump(&g, 50.0);
        let cfg = SolverConfig { t_end: 1.0, ..SolverConfig::default() };
        let mut state = SolverState::new(u.clone());
        for _ in 0..20 {
            state = match step(&state, &k, &p, &cfg).unwrap() {
                StepOutcome::Advanced { state, clipped_mass } => {
                    assert_eq!(clipped_mass, 0.0);
                    state
                }
                StepOutcome::Stalled { .. } => panic!("stalled"),
            };
            assert!(((state.u.mass() - u.mass()) / u.mass()).abs() < 1e-13);
        }
    }

    #[test]
    fn porous_medium_decay() {
        let (g, k, p) = setup(96, 2.0);
        let p = p.without_attraction();
        let u = bump(&g, 5.0);
        let cfg = SolverConfig {
            t_end: 0.05,
            output_every: 5,
            ..SolverConfig::default()
        };
        let out = run(&u, &k, &p, &cfg).unwrap();
        assert!(out.status.is_completed());
        for w in out.diagnostics.windows(2) {
            assert!(w[1].lm_norm <= w[0].lm_norm * (1.0 + 1e-12));
            assert!(w[1].linf_norm <= w[0].linf_norm * (1.0 + 1e-12));
            assert!(w[1].f <= w[0].f + 1e-12 * w[0].f.abs());
        }
        assert!(out.diagnostics.last().unwrap().d > 0.0);
    }

    #[test]
    fn primitive_face_values_are_fourth_order() {
        let profile = |r: f64| (-r * r).exp();
        let mut errs = Vec::new();
        for n in [32, 64] {
            let g = Arc::new(RadialGrid::uniform(3, n, 2.0).unwrap());
            let u = DensityField::from_profile(g.clone(), profile).unwrap();
            let vel = vec![-1.0; n];
            let face = face_densities(u.values(), &g, &vel, Reconstruction::Primitive);
            let err = (1..n)
                .map(|k| (face[k] - profile(g.edges()[k])).abs())
                .fold(0.0, f64::max);
            errs.push(err);
        }
        assert!(errs[1] < 1e-5, "{errs:?}");
        assert!(errs[0] / errs[1] > 12.0, "{errs:?}");
    }

    #[test]
    fn primitive_face_values_respect_donor_bounds() {
        let g = Arc::new(RadialGrid::uniform(3, 40, 1.0).unwrap());
        let vals: Vec<f64> = (0..40).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 + i as f64 }).collect();
        let vel: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let face = face_densities(&vals, &g, &vel, Reconstruction::Primitive);
        for k in 1..40 {
            let donor = if vel[k] > 0.0 { k - 1 } else { k };
            assert!(face[k] >= 0.0 && face[k] <= 2.0 * vals[donor]);
        }
    }

    #[test]
    fn zero_data_completes() {
        let (g, k, p) = setup(32, 1.0);
        let out = run(&DensityField::zeros(g), &k, &p, &SolverConfig::default()).unwrap();
        assert!(out.status.is_completed());
        for r in &out.diagnostics {
            assert_eq!((r.mass, r.f, r.m2, r.d), (0.0, 0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn detect_blowup_triggers() {
        let (g, _, _) = setup(16, 1.0);
        let cfg = SolverConfig { blowup_factor: 1e6, ..SolverConfig::default() };
        let fresh = SolverState::new(DensityField::new(g.clone(), vec![1.0; 16]).unwrap());
        assert_eq!(detect_blowup(&fresh, 1.0, &cfg), None);
        let hot = SolverState::new(DensityField::new(g, vec![1e7; 16]).unwrap());
        assert_eq!(detect_blowup(&hot, 1.0, &cfg), Some(BlowUpReason::Linf));
    }

    #[test]
    fn chord_bound_linearity() {
        let (g, k, p) = setup(64, 2.0);
        let small = bump(&g, 1.0);
        assert_eq!(blowup_time_upper_bound(&small, &k, &p).unwrap(), None);
        // a concentrated heavy bump has negative energy
        let heavy = DensityField::from_profile(g.clone(), |r| 1e6 * (0.04 - r * r).max(0.0)).unwrap();
        let t1 = blowup_time_upper_bound(&heavy, &k, &p).unwrap().unwrap();
        assert!(t1 > 0.0);
        let f = energy::free_energy(&heavy, &k, &p).unwrap();
        let expect = heavy.second_moment() / (2.0 * p.alpha() * f.abs());
        assert!((t1 - expect).abs() < 1e-15 * expect);
    }

    #[test]
    fn weak_form_constant_test_function() {
        let (g, k, p) = setup(64, 2.0);
        let u = bump(&g, 40.0);
        let cfg = SolverConfig {
            t_end: 2e-3,
            snapshot_every: 1,
            ..SolverConfig::default()
        };
        let out = run(&u, &k, &p, &cfg).unwrap();
        let res = weak_form_residual(&out.snapshots, &g, &ConstantTest(1.0), &p).unwrap();
        assert!(res < 1e-12 * u.mass());
        assert!(weak_form_residual(&out.snapshots, &g, &TruncatedQuadratic::new(1.0, 3.0).unwrap(), &p).is_err());
    }

    #[test]
    fn truncated_quadratic_is_consistent() {
        let psi = TruncatedQuadratic::new(0.5, 1.0).unwrap();
        for &r in &[0.1, 0.55, 0.7, 0.95, 1.2] {
            let h = 1e-5;
            let fd = (psi.value(r + h) - psi.value(r - h)) / (2.0 * h);
            assert!((fd - psi.derivative(r)).abs() < 1e-8, "{r}");
            let d2 = (psi.derivative(r + h) - psi.derivative(r - h)) / (2.0 * h);
            let lap = d2 + 2.0 * psi.derivative(r) / r;
            assert!((lap - psi.laplacian(r, 3)).abs() < 1e-6, "{r}");
        }
    }

    #[test]
    fn epsilon_study_trivial_cases() {
        let (g, _, p) = setup(24, 1.0);
        let u = bump(&g, 1.0);
        let cfg = SolverConfig::default();
        assert!(epsilon_convergence_study(&u, &p, &[0.1], 1e-3, &cfg).unwrap().is_empty());
        let d = epsilon_convergence_study(&u, &p, &[0.1, 0.1], 1e-3, &cfg).unwrap();
        assert_eq!(d, vec![0.0]);
    }
}
