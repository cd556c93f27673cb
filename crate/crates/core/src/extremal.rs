//! Steady profile of the critical equation via an Euler-Lagrange fixed
//! point, a direct ascent on the VHLS ratio, and the blow-up initial data
//! built from the steady profile.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::energy::{self, vhls_ratio_from};
use crate::error::{domain, Error, Result};
use crate::field::{DensityField, RadialGrid};
use crate::model::{critical_mass, ModelParams};
use crate::riesz::{dot, RieszKernel};

/// Cells with `U > SUPPORT_THRESHOLD · max U` form the numerical support.
pub const SUPPORT_THRESHOLD: f64 = 1e-8;

/// How the fixed point fixes its mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", content = "mass", rename_all = "snake_case")]
pub enum MassTarget {
    /// Iterate the shape at unit mass with the support pinned at
    /// [`ElOptions::pin_radius`], then fix the amplitude so that the profile
    /// solves the Euler-Lagrange equation exactly. The mass is an output:
    /// it is the critical mass of the discrete problem.
    Critical,
    /// Keep the mass at the given value, solving for the multiplier in every
    /// sweep. The support is free to occupy the whole grid.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ElOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Weight of the new candidate in the damped update.
    pub damping: f64,
    /// Support radius for [`MassTarget::Critical`]; defaults to `R_max/2`.
    pub pin_radius: Option<f64>,
}

impl Default for ElOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 500,
            damping: 0.5,
            pin_radius: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExtremalResult {
    #[serde(skip)]
    pub profile: DensityField,
    /// Multiplier of the Euler-Lagrange equation `(m/(m−1))U^{m−1} − φ_U = λ̄`.
    pub lambda_bar: f64,
    /// `(1/M)(2s/(2s−d))‖U‖_m^m`, which equals `λ̄` when `F(U) = 0`.
    pub lambda_bar_identity: f64,
    pub j_value: f64,
    pub el_residual: f64,
    pub support_radius: f64,
    pub iterations: usize,
    pub last_change: f64,
    pub mass: f64,
    pub free_energy: f64,
    /// Critical mass from the closed-form constant.
    pub m_star_upper: f64,
    /// Critical mass `[2/((m−1) J(U) c)]^{d/(2s)}` from the measured ratio.
    pub m_star_measured: f64,
}

/// Truncated parabola `(1 − r²/R²)₊` scaled to `mass`.
pub fn barenblatt_init(grid: Arc<RadialGrid>, mass: f64, radius: f64) -> Result<DensityField> {
    if !(mass > 0.0 && radius > 0.0) {
        return Err(domain("Barenblatt start needs positive mass and radius"));
    }
    let shape = DensityField::from_profile(grid, |r| (1.0 - (r / radius).powi(2)).max(0.0))?;
    let m0 = shape.mass();
    if m0 == 0.0 {
        return Err(Error::EmptySupport);
    }
    shape.scaled_by(mass / m0)
}

fn support_cells(u: &[f64]) -> Vec<usize> {
    let top = u.iter().copied().fold(0.0, f64::max);
    if top <= 0.0 {
        return Vec::new();
    }
    (0..u.len()).filter(|&i| u[i] > SUPPORT_THRESHOLD * top).collect()
}

/// Multiplier of the Euler-Lagrange equation estimated as the mass-weighted
/// mean of `μ` over the support.
pub fn el_multiplier(u: &DensityField, kernel: &RieszKernel, params: &ModelParams) -> Result<f64> {
    let mu = energy::chemical_potential(u, kernel, params)?;
    let cells = support_cells(u.values());
    if cells.is_empty() {
        return Err(Error::EmptySupport);
    }
    let vols = u.grid().volumes();
    let (mut num, mut den) = (0.0, 0.0);
    for &i in &cells {
        let w = u.values()[i] * vols[i];
        num += mu[i] * w;
        den += w;
    }
    Ok(num / den)
}

/// `sup_{supp U} |(m/(m−1))U^{m−1} − φ_U − λ̄| / |λ̄|`, with `λ̄` from
/// [`el_multiplier`].
pub fn el_residual(u: &DensityField, kernel: &RieszKernel, params: &ModelParams) -> Result<f64> {
    let lambda = el_multiplier(u, kernel, params)?;
    let mu = energy::chemical_potential(u, kernel, params)?;
    let worst = support_cells(u.values())
        .into_iter()
        .map(|i| (mu[i] - lambda).abs())
        .fold(0.0, f64::max);
    Ok(worst / lambda.abs())
}

fn support_radius(u: &DensityField) -> f64 {
    support_cells(u.values())
        .last()
        .map(|&i| u.grid().edges()[i + 1])
        .unwrap_or(0.0)
}

/// Assembles the report for a profile `U` with multiplier `λ̄`.
pub fn describe_profile(
    u: DensityField,
    lambda_bar: f64,
    iterations: usize,
    last_change: f64,
    kernel: &RieszKernel,
    params: &ModelParams,
) -> Result<ExtremalResult> {
    if u.is_zero() {
        return Err(Error::EmptySupport);
    }
    let j = energy::vhls_ratio(&u, kernel, params)?;
    let mass = u.mass();
    let d = params.d() as f64;
    let s = params.s();
    let lm = u.lp_norm_pow(params.m());
    let c = params.constants();
    Ok(ExtremalResult {
        lambda_bar,
        lambda_bar_identity: (2.0 * s / (2.0 * s - d)) * lm / mass,
        j_value: j,
        el_residual: el_residual(&u, kernel, params)?,
        support_radius: support_radius(&u),
        iterations,
        last_change,
        mass,
        free_energy: energy::free_energy(&u, kernel, params)?,
        m_star_upper: c.m_star,
        m_star_measured: critical_mass(params.d(), s, j)?,
        profile: u,
    })
}

fn el_candidate(phi: &[f64], shift: f64, m: f64, limit: usize, out: &mut [f64]) {
    let expo = 1.0 / (m - 1.0);
    let pre = (m - 1.0) / m;
    for (i, o) in out.iter_mut().enumerate() {
        let x = phi[i] + shift;
        *o = if i < limit && x > 0.0 { (pre * x).powf(expo) } else { 0.0 };
    }
}

fn mass_of(w: &[f64], vols: &[f64]) -> f64 {
    w.iter().zip(vols).map(|(a, b)| a * b).sum()
}

/// Damped Picard iteration for the Euler-Lagrange equation
/// `U = [((m−1)/m)(φ_U + λ̄)₊]^{1/(m−1)}`.
pub fn el_fixed_point(
    kernel: &RieszKernel,
    params: &ModelParams,
    target: MassTarget,
    init: &DensityField,
    opts: &ElOptions,
) -> Result<ExtremalResult> {
    energy::check_kernel(kernel, init, params)?;
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(domain("damping must lie in (0, 1]"));
    }
    if params.coupling() <= 0.0 {
        return Err(domain("the Euler-Lagrange profile needs the attraction switched on"));
    }
    let grid = init.grid().clone();
    let n = grid.len();
    let vols = grid.volumes().to_vec();
    let m = params.m();
    let c = params.coupling();
    let theta = opts.damping;

    let (limit, target_mass) = match target {
        MassTarget::Critical => {
            let pin = opts.pin_radius.unwrap_or(0.5 * grid.r_max());
            let edges = grid.edges();
            let k = (1..n)
                .min_by(|&a, &b| {
                    (edges[a] - pin)
                        .abs()
                        .partial_cmp(&(edges[b] - pin).abs())
                        .unwrap()
                })
                .ok_or_else(|| domain("grid too small to pin a support"))?;
            (k, 1.0)
        }
        MassTarget::Fixed(mass) => {
            if !(mass > 0.0 && mass.is_finite()) {
                return Err(domain(format!("target mass must be positive, got {mass}")));
            }
            (n, mass)
        }
    };

    let mut v: Vec<f64> = init.values().to_vec();
    for x in v.iter_mut().skip(limit) {
        *x = 0.0;
    }
    let m0 = mass_of(&v, &vols);
    if m0 <= 0.0 {
        return Err(Error::EmptySupport);
    }
    for x in v.iter_mut() {
        *x *= target_mass / m0;
    }

    let mut phi = vec![0.0; n];
    let mut cand = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut change = f64::INFINITY;
    let mut shift = 0.0;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        for i in 0..n {
            w[i] = v[i] * vols[i];
        }
        kernel.apply_masses(&w, c, &mut phi);
        let scale = match target {
            MassTarget::Critical => {
                shift = -0.5 * (phi[limit - 1] + phi[limit]);
                el_candidate(&phi, shift, m, limit, &mut cand);
                let kappa = mass_of(&cand, &vols);
                if kappa <= 0.0 {
                    return Err(Error::EmptySupport);
                }
                1.0 / kappa
            }
            MassTarget::Fixed(mass) => {
                shift = solve_multiplier(&phi, m, &vols, mass, &mut cand)?;
                1.0
            }
        };
        change = 0.0;
        for i in 0..n {
            let next = (1.0 - theta) * v[i] + theta * scale * cand[i];
            change += (next - v[i]).abs() * vols[i];
            v[i] = next;
        }
        change /= target_mass;
        if change < opts.tol {
            break;
        }
    }
    if change >= opts.tol {
        return Err(Error::NoConvergence {
            iterations,
            last_change: change,
        });
    }
    let (profile, lambda_bar) = match target {
        MassTarget::Critical => {
            // one more candidate at the converged shape fixes the amplitude
            for i in 0..n {
                w[i] = v[i] * vols[i];
            }
            kernel.apply_masses(&w, c, &mut phi);
            let edge = 0.5 * (phi[limit - 1] + phi[limit]);
            el_candidate(&phi, -edge, m, limit, &mut cand);
            let kappa = mass_of(&cand, &vols);
            let a = kappa.powf(-(m - 1.0) / (2.0 - m));
            let u: Vec<f64> = v.iter().map(|x| a * x).collect();
            (DensityField::new(grid, u)?, -a * edge)
        }
        MassTarget::Fixed(_) => (DensityField::new(grid, v)?, shift),
    };
    describe_profile(profile, lambda_bar, iterations, change, kernel, params)
}

/// Finds `λ` with `mass([((m−1)/m)(φ + λ)₊]^{1/(m−1)}) = target` by
/// bisection; the candidate is left in `out`.
fn solve_multiplier(phi: &[f64], m: f64, vols: &[f64], target: f64, out: &mut [f64]) -> Result<f64> {
    let n = phi.len();
    let top = phi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut lo = -top;
    let mut step = top.abs().max(1.0);
    let mut hi = lo + step;
    loop {
        el_candidate(phi, hi, m, n, out);
        if mass_of(out, vols) >= target {
            break;
        }
        lo = hi;
        step *= 2.0;
        hi += step;
        if !hi.is_finite() {
            return Err(domain("multiplier search diverged"));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        el_candidate(phi, mid, m, n, out);
        if mass_of(out, vols) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    el_candidate(phi, hi, m, n, out);
    // remove the last bisection rounding so the sweep keeps the mass exactly
    let got = mass_of(out, vols);
    for x in out.iter_mut() {
        *x *= target / got;
    }
    Ok(hi)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct AscentOptions {
    pub n_starts: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop once the relative gain over `patience` accepted steps drops below this.
    pub stagnation: f64,
    pub patience: usize,
}

impl Default for AscentOptions {
    fn default() -> Self {
        Self {
            n_starts: 10,
            seed: 20240607,
            max_iter: 4000,
            stagnation: 1e-9,
            patience: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AscentTrace {
    pub start: usize,
    pub initial_j: f64,
    pub final_j: f64,
    pub accepted: usize,
    /// `J` after every accepted step.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VhlsSearch {
    pub best: ExtremalResult,
    /// The measured constant `Ĉ*`, i.e. the best ratio found.
    pub c_star_measured: f64,
    pub traces: Vec<AscentTrace>,
}

fn log_j_and_gradient(u: &[f64], kernel: &RieszKernel, params: &ModelParams) -> (f64, Vec<f64>) {
    let n = u.len();
    let vols = kernel.grid().volumes();
    let w: Vec<f64> = (0..n).map(|i| u[i] * vols[i]).collect();
    let mut kw = vec![0.0; n];
    kernel.apply_masses(&w, 1.0, &mut kw);
    let omega = dot(&w, &kw);
    let mass: f64 = w.iter().sum();
    let m = params.m();
    let lm: f64 = (0..n).map(|i| u[i].powf(m) * vols[i]).sum();
    let p = 2.0 * params.s() / params.d() as f64;
    let log_j = omega.ln() - p * mass.ln() - lm.ln();
    // gradient of log J with respect to u_i, per unit volume
    let g = (0..n)
        .map(|i| 2.0 * kw[i] / omega - p / mass - m * energy::pow_m1(u[i], m) / lm)
        .collect();
    (log_j, g)
}

fn normalise(u: &mut [f64], vols: &[f64]) {
    let mass = mass_of(u, vols);
    if mass > 0.0 {
        for x in u.iter_mut() {
            *x /= mass;
        }
    }
}

fn ascend(start: usize, kernel: &RieszKernel, params: &ModelParams, opts: &AscentOptions) -> (Vec<f64>, AscentTrace) {
    let grid = kernel.grid().clone();
    let n = grid.len();
    let vols = grid.volumes();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(start as u64));
    // random non-negative field supported on a random ball
    let reach = rng.gen_range(0.2..0.9) * n as f64;
    let raw: Vec<f64> = (0..n)
        .map(|i| if (i as f64) < reach { rng.gen::<f64>().powi(2) } else { 0.0 })
        .collect();
    let field = DensityField::from_raw(grid.clone(), raw);
    let initial_j = {
        let om = kernel.interaction_energy(&field).expect("same grid");
        vhls_ratio_from(om, &field, params)
    };
    let mut u = field.rearrange_on_grid().into_values();
    normalise(&mut u, vols);
    let (mut log_j, mut g) = log_j_and_gradient(&u, kernel, params);
    let mut history = vec![log_j.exp()];
    let mut eta = 0.1;
    let mut accepted = 0;
    for _ in 0..opts.max_iter {
        let umax = u.iter().copied().fold(0.0, f64::max);
        let gmax = g.iter().map(|x| x.abs()).fold(0.0, f64::max);
        if gmax == 0.0 || eta < 1e-12 {
            break;
        }
        let scale = eta * umax / gmax;
        let trial: Vec<f64> = (0..n).map(|i| (u[i] + scale * g[i]).max(0.0)).collect();
        let mut trial = DensityField::from_raw(grid.clone(), trial)
            .rearrange_on_grid()
            .into_values();
        normalise(&mut trial, vols);
        if trial.iter().all(|&x| x == 0.0) {
            eta *= 0.5;
            continue;
        }
        let (tj, tg) = log_j_and_gradient(&trial, kernel, params);
        if tj > log_j {
            u = trial;
            log_j = tj;
            g = tg;
            accepted += 1;
            history.push(log_j.exp());
            eta = (eta * 1.5).min(1.0);
            let p = opts.patience;
            if history.len() > p {
                let old = history[history.len() - 1 - p];
                if (log_j.exp() - old) / old < opts.stagnation {
                    break;
                }
            }
        } else {
            eta *= 0.5;
        }
    }
    let final_j = log_j.exp();
    (
        u,
        AscentTrace {
            start,
            initial_j,
            final_j,
            accepted,
            history,
        },
    )
}

/// Multi-start projected gradient ascent on `log J`, each trial step being
/// followed by the on-grid rearrangement and renormalisation. Only
/// improving steps are accepted, so `J` is non-decreasing along each trace.
///
/// The best profile is returned at the mass `[2/((m−1) Ĉ* c)]^{d/(2s)}`.
pub fn maximize_vhls(kernel: &RieszKernel, params: &ModelParams, opts: &AscentOptions) -> Result<VhlsSearch> {
    if opts.n_starts == 0 {
        return Err(domain("n_starts must be at least 1"));
    }
    if kernel.grid().d() != params.d() || kernel.s() != params.s() {
        return Err(domain("kernel was built for a different (d, s)"));
    }
    let runs: Vec<(Vec<f64>, AscentTrace)> = (0..opts.n_starts)
        .into_par_iter()
        .map(|k| ascend(k, kernel, params, opts))
        .collect();
    let best_idx = (0..runs.len())
        .max_by(|&a, &b| runs[a].1.final_j.partial_cmp(&runs[b].1.final_j).unwrap())
        .expect("at least one start");
    let c_star = runs[best_idx].1.final_j;
    let mass = critical_mass(params.d(), params.s(), c_star)?;
    let shape = DensityField::new(kernel.grid().clone(), runs[best_idx].0.clone())?;
    let profile = shape.scaled_by(mass / shape.mass())?;
    let lambda = el_multiplier(&profile, kernel, params)?;
    let iterations = runs[best_idx].1.accepted;
    let best = describe_profile(profile, lambda, iterations, 0.0, kernel, params)?;
    Ok(VhlsSearch {
        best,
        c_star_measured: c_star,
        traces: runs.into_iter().map(|r| r.1).collect(),
    })
}

/// `(M/M*) U`.
pub fn blowup_initial_data(u: &DensityField, mass: f64, m_star: f64) -> Result<DensityField> {
    if !(mass > 0.0 && m_star > 0.0) {
        return Err(domain("masses must be positive"));
    }
    u.scaled_by(mass / m_star)
}

/// Free energy per unit entropy of `U`; zero for an exact critical profile.
pub fn energy_defect(result: &ExtremalResult, kernel: &RieszKernel, params: &ModelParams) -> Result<f64> {
    let s = energy::entropy(&result.profile, params);
    Ok(energy::free_energy(&result.profile, kernel, params)? / s)
}
