use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::sync::Arc;

use anyhow::Context;
use fracks_core::energy::{free_energy, vhls_ratio};
use fracks_core::extremal::{
    barenblatt_init, blowup_initial_data, el_fixed_point, maximize_vhls, AscentOptions, ElOptions, ExtremalResult, MassTarget,
};
use fracks_core::field::hls_extremizer_profile;
use fracks_core::model::critical_mass;
use fracks_core::riesz::{build_kernel, build_kernel_cached};
use fracks_core::solver::{
    blowup_time_upper_bound, diffusive_time, epsilon_convergence_study, run, DiagnosticsRow,
    RunOutcome, RunStatus,
};
use fracks_core::{DensityField, ModelParams, RadialGrid, RieszKernel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{usage, CStarSource, ExperimentConfig};
use crate::output::{input_hash, OutputDir};

fn kernel_for(cfg: &ExperimentConfig, grid: Arc<RadialGrid>, epsilon: f64) -> anyhow::Result<RieszKernel> {
    let kernel = match &cfg.output.kernel_cache {
        Some(dir) => build_kernel_cached(grid, cfg.s(), epsilon, dir)?,
        None => build_kernel(grid, cfg.s(), epsilon)?,
    };
    Ok(kernel)
}

fn working_grid(cfg: &ExperimentConfig) -> anyhow::Result<Arc<RadialGrid>> {
    let g = RadialGrid::uniform(cfg.model.d, cfg.grid.n, cfg.grid.r_max)
        .map_err(|e| usage(format!("grid: {e}")))?;
    Ok(Arc::new(g))
}

fn load_profile(path: &Path, d: usize) -> anyhow::Result<DensityField> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    DensityField::read_csv(BufReader::new(file), d)
        .map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn steady_profile(
    cfg: &ExperimentConfig,
    kernel: &RieszKernel,
    params: &ModelParams,
) -> anyhow::Result<ExtremalResult> {
    let e = &cfg.extremal;
    let opts = ElOptions {
        tol: e.tol,
        max_iter: e.max_iter,
        damping: e.damping,
        pin_radius: e.pin_radius,
    };
    let init = barenblatt_init(kernel.grid().clone(), 1.0, 0.5 * cfg.grid.r_max)?;
    el_fixed_point(kernel, params, MassTarget::Critical, &init, &opts)
        .context("Euler-Lagrange iteration")
}

/// Sidecar written next to a saved profile.
#[derive(Serialize)]
struct ProfileSidecar {
    j_value: f64,
    lambda_bar: f64,
    el_residual: f64,
    m_target: f64,
}

impl From<&ExtremalResult> for ProfileSidecar {
    fn from(r: &ExtremalResult) -> Self {
        Self {
            j_value: r.j_value,
            lambda_bar: r.lambda_bar,
            el_residual: r.el_residual,
            m_target: r.mass,
        }
    }
}

#[derive(Serialize)]
struct ConstantsReport {
    d: usize,
    s: f64,
    c_ds: f64,
    c_hls: f64,
    c_star_upper: f64,
    m_star: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    measured: Option<MeasuredConstants>,
}

#[derive(Serialize)]
struct MeasuredConstants {
    c_star_measured: f64,
    m_star_measured: f64,
    /// `Ĉ* ≤ C*_upper (1 + 2%)`
    within_upper_bound: bool,
}

pub fn constants(cfg: &ExperimentConfig, profile: Option<&Path>) -> anyhow::Result<u8> {
    let params = cfg.params()?;
    let c = params.constants();
    let measured = match profile {
        Some(path) => {
            let u = load_profile(path, cfg.model.d)?;
            let kernel = kernel_for(cfg, u.grid().clone(), 0.0)?;
            let j = vhls_ratio(&u, &kernel, &params)?;
            Some(MeasuredConstants {
                c_star_measured: j,
                m_star_measured: critical_mass(cfg.model.d, cfg.s(), j)?,
                within_upper_bound: j <= 1.02 * c.c_star_upper,
            })
        }
        None => None,
    };
    let report = ConstantsReport {
        d: cfg.model.d,
        s: cfg.s(),
        c_ds: c.c_ds,
        c_hls: c.c_hls,
        c_star_upper: c.c_star_upper,
        m_star: c.m_star,
        measured,
    };
    let inputs: Vec<&Path> = profile.into_iter().collect();
    let out = OutputDir::create(&cfg.output.directory)?;
    out.report("constants", cfg, &input_hash(cfg, &inputs)?, &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(0)
}

#[derive(Serialize)]
struct RunSummary {
    status: RunStatus,
    steps: usize,
    t_final: f64,
    rows: usize,
    mass_drift: f64,
    clipped_mass: f64,
    f_initial: f64,
    f_final: f64,
    sup_lm_norm_pow_m: f64,
}

fn summarize(out: &RunOutcome, m: f64) -> RunSummary {
    let rows = &out.diagnostics;
    let first = rows.first();
    let last = rows.last();
    let m0 = first.map_or(0.0, |r| r.mass);
    RunSummary {
        status: out.status,
        steps: out.final_state.step_count,
        t_final: out.final_state.t,
        rows: rows.len(),
        mass_drift: if m0 > 0.0 {
            last.map_or(0.0, |r| (r.mass - m0).abs() / m0)
        } else {
            0.0
        },
        clipped_mass: out.clipped_mass,
        f_initial: first.map_or(0.0, |r| r.f),
        f_final: last.map_or(0.0, |r| r.f),
        sup_lm_norm_pow_m: rows.iter().map(|r| r.lm_norm.powf(m)).fold(0.0, f64::max),
    }
}

#[derive(Serialize)]
struct SimulateReport {
    mass_ratio: f64,
    mass: f64,
    diffusive_time: f64,
    t_end: f64,
    run: RunSummary,
}

pub fn simulate(cfg: &ExperimentConfig) -> anyhow::Result<u8> {
    let params = cfg.params()?;
    let grid = working_grid(cfg)?;
    let kernel = kernel_for(cfg, grid, cfg.model.epsilon)?;
    let el = steady_profile(cfg, &kernel, &params)?;
    let tau = diffusive_time(&el.profile, &params)?;
    let ratio = cfg.simulate.mass_ratio;
    let u0 = blowup_initial_data(&el.profile, ratio * el.mass, el.mass)?;
    let mut solver = cfg.solver_config()?;
    if let Some(k) = cfg.simulate.t_end_tau {
        solver.t_end = k * tau;
    }
    let outcome = run(&u0, &kernel, &params, &solver)?;
    let out = OutputDir::create(&cfg.output.directory)?;
    out.diagnostics("simulate", &outcome.diagnostics)?;
    out.profile("simulate", &outcome.final_state.u)?;
    let report = SimulateReport {
        mass_ratio: ratio,
        mass: u0.mass(),
        diffusive_time: tau,
        t_end: solver.t_end,
        run: summarize(&outcome, params.m()),
    };
    out.report("simulate", cfg, &input_hash(cfg, &[])?, &report)?;
    println!(
        "simulate: ratio {ratio}, {} after {} steps at t = {:.6e}",
        outcome.status.label(),
        outcome.final_state.step_count,
        outcome.final_state.t
    );
    Ok(0)
}

#[derive(Serialize)]
struct DichotomyRow {
    mass_ratio: f64,
    mass: f64,
    free_energy: f64,
    status: RunStatus,
    /// Blow-up detection time, or the final time otherwise.
    t: f64,
    t_end: f64,
    sup_lm_norm_pow_m: f64,
    /// Global-existence bound on `‖u‖_m^m`, for masses below M*.
    ge1_bound: Option<f64>,
    ge1_within_10_percent: Option<bool>,
    /// `m2(0) / (2(d − 2s)|F(u0)|)` when `F(u0) < 0`.
    chord_time: Option<f64>,
    blowup_within_margin: Option<bool>,
    t_over_chord_time: Option<f64>,
    /// Largest `m2(t) − (m2(0) + 2(d − 2s)F(u0)t)` over recorded rows.
    max_chord_excess: Option<f64>,
}

#[derive(Serialize)]
struct DichotomyReport {
    profile_mass: f64,
    j_value: f64,
    c_star: f64,
    m_star: f64,
    diffusive_time: f64,
    rows: Vec<DichotomyRow>,
}

fn ratio_tag(ratio: f64) -> String {
    format!("rho{ratio}")
}

fn chord_excess(rows: &[DiagnosticsRow], alpha: f64, f0: f64) -> f64 {
    let m20 = rows.first().map_or(0.0, |r| r.m2);
    rows.iter()
        .map(|r| r.m2 - (m20 + 2.0 * alpha * f0 * r.t))
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn dichotomy(cfg: &ExperimentConfig, profile: Option<&Path>) -> anyhow::Result<u8> {
    let params = cfg.params()?;
    let (kernel, u, j) = match profile {
        Some(path) => {
            let u = load_profile(path, cfg.model.d)?;
            let kernel = kernel_for(cfg, u.grid().clone(), cfg.model.epsilon)?;
            let j = vhls_ratio(&u, &kernel, &params)?;
            (kernel, u, j)
        }
        None => {
            let kernel = kernel_for(cfg, working_grid(cfg)?, cfg.model.epsilon)?;
            let el = steady_profile(cfg, &kernel, &params)?;
            (kernel, el.profile, el.j_value)
        }
    };
    let (c_star, m_star) = match cfg.extremal.c_star {
        CStarSource::Upper => {
            let c = params.constants();
            (c.c_star_upper, c.m_star)
        }
        CStarSource::Measured => (j, critical_mass(cfg.model.d, cfg.s(), j)?),
    };
    let base_mass = u.mass();
    let tau = diffusive_time(&u, &params)?;
    let solver = cfg.solver_config()?;
    let v0 = u.grid().volumes()[0];
    // a collapse cannot concentrate more than the whole mass in the innermost cell
    for &ratio in &cfg.dichotomy.mass_ratios {
        let threshold = solver.blowup_factor * ratio * u.linf_norm();
        let capacity = ratio * base_mass / v0;
        if ratio >= 1.0 && threshold >= capacity {
            return Err(usage(format!(
                "solver.blowup_factor: threshold {threshold:.3e} for ratio {ratio} exceeds the \
                 largest density the grid can hold ({capacity:.3e}); lower the factor or refine"
            )));
        }
    }
    let alpha = params.alpha();
    let two_s_d = 2.0 * cfg.s() / cfg.model.d as f64;
    let results: Vec<(DichotomyRow, RunOutcome)> = cfg
        .dichotomy
        .mass_ratios
        .par_iter()
        .map(|&ratio| -> anyhow::Result<(DichotomyRow, RunOutcome)> {
            let u0 = blowup_initial_data(&u, ratio * base_mass, base_mass)?;
            let f0 = free_energy(&u0, &kernel, &params)?;
            let chord_time = blowup_time_upper_bound(&u0, &kernel, &params)?;
            let mut run_cfg = solver.clone();
            run_cfg.t_end = match chord_time {
                Some(t) => cfg.dichotomy.t_end_chord * t,
                None => cfg.dichotomy.t_end_tau * tau,
            };
            let outcome = run(&u0, &kernel, &params, &run_cfg)?;
            let mass = u0.mass();
            let sup = outcome
                .diagnostics
                .iter()
                .map(|r| r.lm_norm.powf(params.m()))
                .fold(0.0, f64::max);
            let ge1_bound = (mass < m_star).then(|| {
                2.0 * f0 / (c_star * params.riesz_constant() * (m_star.powf(two_s_d) - mass.powf(two_s_d)))
            });
            let t = match outcome.status {
                RunStatus::BlowUp { t_detect, .. } => t_detect,
                _ => outcome.final_state.t,
            };
            let row = DichotomyRow {
                mass_ratio: ratio,
                mass,
                free_energy: f0,
                status: outcome.status,
                t,
                t_end: run_cfg.t_end,
                sup_lm_norm_pow_m: sup,
                ge1_bound,
                ge1_within_10_percent: ge1_bound.map(|b| sup <= 1.10 * b),
                chord_time,
                blowup_within_margin: chord_time
                    .map(|ct| outcome.status.is_blowup() && t <= 1.5 * ct),
                t_over_chord_time: chord_time.map(|ct| t / ct),
                max_chord_excess: chord_time
                    .map(|_| chord_excess(&outcome.diagnostics, alpha, f0)),
            };
            Ok((row, outcome))
        })
        .collect::<anyhow::Result<_>>()?;
    let out = OutputDir::create(&cfg.output.directory)?;
    out.profile("steady", &u)?;
    let mut rows = Vec::with_capacity(results.len());
    for (row, outcome) in results {
        out.diagnostics(&ratio_tag(row.mass_ratio), &outcome.diagnostics)?;
        println!(
            "ratio {:>6}: {:<9} t = {:.6e}  F(u0) = {:.6e}",
            row.mass_ratio,
            row.status.label(),
            row.t,
            row.free_energy
        );
        rows.push(row);
    }
    let report = DichotomyReport {
        profile_mass: base_mass,
        j_value: j,
        c_star,
        m_star,
        diffusive_time: tau,
        rows,
    };
    let inputs: Vec<&Path> = profile.into_iter().collect();
    out.report("dichotomy", cfg, &input_hash(cfg, &inputs)?, &report)?;
    Ok(0)
}

#[derive(Serialize)]
struct AscentSummary {
    c_star_measured: f64,
    ratio_to_c_hls: f64,
    ratio_to_el: f64,
    starts: Vec<AscentStart>,
}

#[derive(Serialize)]
struct AscentStart {
    start: usize,
    initial_j: f64,
    final_j: f64,
    accepted: usize,
}

#[derive(Serialize)]
struct ExtremalReport<'a> {
    euler_lagrange: &'a ExtremalResult,
    ascent: Option<AscentSummary>,
}

pub fn extremal(cfg: &ExperimentConfig) -> anyhow::Result<u8> {
    let params = cfg.params()?;
    let kernel = kernel_for(cfg, working_grid(cfg)?, cfg.model.epsilon)?;
    let el = steady_profile(cfg, &kernel, &params)?;
    let out = OutputDir::create(&cfg.output.directory)?;
    out.profile("extremal", &el.profile)?;
    out.json("profile_extremal.json", &ProfileSidecar::from(&el))?;
    let ascent = if cfg.extremal.n_starts > 0 {
        let opts = AscentOptions {
            n_starts: cfg.extremal.n_starts,
            seed: cfg.extremal.seed,
            max_iter: cfg.extremal.ascent_max_iter,
            ..AscentOptions::default()
        };
        let search = maximize_vhls(&kernel, &params, &opts)?;
        out.profile("ascent", &search.best.profile)?;
        out.json("profile_ascent.json", &ProfileSidecar::from(&search.best))?;
        Some(AscentSummary {
            c_star_measured: search.c_star_measured,
            ratio_to_c_hls: search.c_star_measured / params.constants().c_hls,
            ratio_to_el: search.c_star_measured / el.j_value,
            starts: search
                .traces
                .iter()
                .map(|t| AscentStart {
                    start: t.start,
                    initial_j: t.initial_j,
                    final_j: t.final_j,
                    accepted: t.accepted,
                })
                .collect(),
        })
    } else {
        None
    };
    println!(
        "extremal: {} iterations, residual {:.3e}, J(U) = {:.8}, mass {:.6}",
        el.iterations, el.el_residual, el.j_value, el.mass
    );
    let report = ExtremalReport { euler_lagrange: &el, ascent };
    out.report("extremal", cfg, &input_hash(cfg, &[])?, &report)?;
    Ok(0)
}

#[derive(Serialize)]
struct Check {
    name: &'static str,
    value: f64,
    tolerance: f64,
    pass: bool,
}

impl Check {
    /// Passes when `value ≤ tolerance`.
    fn at_most(name: &'static str, value: f64, tolerance: f64) -> Self {
        Self { name, value, tolerance, pass: value <= tolerance }
    }
}

#[derive(Serialize)]
struct VerifyReport {
    corrupted_kernel: bool,
    failed: usize,
    checks: Vec<Check>,
}

fn random_field(grid: &Arc<RadialGrid>, rng: &mut ChaCha8Rng) -> anyhow::Result<DensityField> {
    let n = grid.len();
    loop {
        let support = rng.gen_range(n / 8..=n);
        let bumps: Vec<(f64, f64, f64)> = (0..rng.gen_range(1..=4))
            .map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(0.02..0.5), rng.gen_range(0.1..10.0)))
            .collect();
        let values = (0..n)
            .map(|i| {
                if i >= support {
                    return 0.0;
                }
                let r = grid.centers()[i] / grid.r_max();
                let smooth: f64 = bumps
                    .iter()
                    .map(|&(c, w, a)| a * (-((r - c) / w).powi(2)).exp())
                    .sum();
                smooth * rng.gen_range(0.0..1.0)
            })
            .collect();
        let u = DensityField::new(grid.clone(), values)?;
        if !u.is_zero() {
            return Ok(u);
        }
    }
}

/// Largest relative gap between row-to-row difference quotients and the
/// trapezoid average of the predicted rate.
fn fd_error(
    rows: &[DiagnosticsRow],
    value: impl Fn(&DiagnosticsRow) -> f64,
    rate: impl Fn(&DiagnosticsRow) -> f64,
) -> f64 {
    rows.windows(2)
        .map(|w| {
            let q = (value(&w[1]) - value(&w[0])) / (w[1].t - w[0].t);
            let avg = 0.5 * (rate(&w[0]) + rate(&w[1]));
            ((q - avg) / avg).abs()
        })
        .fold(0.0, f64::max)
}

fn corrupt(kernel: RieszKernel) -> anyhow::Result<RieszKernel> {
    let mut m = kernel.matrix().to_vec();
    m[1] *= 1.5;
    Ok(RieszKernel::from_parts(kernel.grid().clone(), kernel.s(), kernel.epsilon(), m)?)
}

pub fn verify(cfg: &ExperimentConfig, corrupt_kernel: bool) -> anyhow::Result<u8> {
    let params = cfg.params()?;
    let tol = &cfg.verify.tolerances;
    let grid = working_grid(cfg)?;
    let mut kernel = kernel_for(cfg, grid.clone(), cfg.model.epsilon)?;
    if corrupt_kernel {
        kernel = corrupt(kernel)?;
    }
    let c_hls = params.constants().c_hls;
    let mut checks = Vec::new();

    checks.push(Check::at_most("kernel_symmetry", kernel.symmetry_defect(), tol.symmetry));

    let hls_grid = Arc::new(RadialGrid::uniform(cfg.model.d, cfg.verify.hls_grid_n, cfg.verify.hls_r_max)?);
    let hls_kernel = kernel_for(cfg, hls_grid.clone(), 0.0)?;
    let f = hls_extremizer_profile(hls_grid, 1.0, 1.0, cfg.s())?;
    let p = 2.0 * cfg.model.d as f64 / (cfg.model.d as f64 + 2.0 * cfg.s());
    let hls_ratio = hls_kernel.interaction_energy(&f)? / f.lp_norm(p)?.powi(2);
    checks.push(Check::at_most("hls_ratio", (hls_ratio / c_hls - 1.0).abs(), tol.hls));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.verify.seed);
    let mut worst_j: f64 = 0.0;
    for _ in 0..cfg.verify.random_fields {
        worst_j = worst_j.max(vhls_ratio(&random_field(&grid, &mut rng)?, &kernel, &params)?);
    }
    checks.push(Check::at_most("vhls_random_fields", worst_j / c_hls - 1.0, tol.vhls));

    let small = Arc::new(RadialGrid::uniform(cfg.model.d, 96, 1.0)?);
    let small_kernel = build_kernel(small.clone(), cfg.s(), 0.0)?;
    let mut violations = 0usize;
    for _ in 0..cfg.verify.random_fields {
        let u = random_field(&small, &mut rng)?;
        let star = u.rearrange();
        let k_star = build_kernel(star.grid().clone(), cfg.s(), 0.0)?;
        if k_star.interaction_energy(&star)? < small_kernel.interaction_energy(&u)? * (1.0 - 1e-12) {
            violations += 1;
        }
    }
    checks.push(Check::at_most("rearrangement_violations", violations as f64, 0.0));

    let el = steady_profile(cfg, &kernel, &params)?;
    let tau = diffusive_time(&el.profile, &params)?;
    let u0 = blowup_initial_data(&el.profile, 0.5 * el.mass, el.mass)?;
    let mut solver = cfg.solver_config()?;
    solver.t_end = tau;
    let outcome = run(&u0, &kernel, &params, &solver)?;
    let rows = &outcome.diagnostics;
    checks.push(Check::at_most("virial_identity", fd_error(rows, |r| r.m2, |r| r.virial_rhs), tol.virial));
    checks.push(Check::at_most("dissipation_identity", fd_error(rows, |r| r.f, |r| -r.d), tol.dissipation));

    let mut worst_scale: f64 = 0.0;
    for mu in [0.5, 2.0] {
        let k = build_kernel(Arc::new(el.profile.grid().scaled(1.0 / mu)?), cfg.s(), cfg.model.epsilon)?;
        for lambda in [0.5, 2.0] {
            let v = el.profile.scale(lambda, mu)?;
            worst_scale = worst_scale.max((vhls_ratio(&v, &k, &params)? / el.j_value - 1.0).abs());
        }
    }
    checks.push(Check::at_most("scaling_invariance", worst_scale, tol.scaling));

    let eps_grid = Arc::new(RadialGrid::uniform(cfg.model.d, 64, cfg.grid.r_max)?);
    let mut eps: Vec<f64> = vec![0.0];
    eps.extend(cfg.eps_study.eps_list.iter().rev());
    let kernels = eps
        .iter()
        .map(|&e| build_kernel(eps_grid.clone(), cfg.s(), e))
        .collect::<fracks_core::Result<Vec<_>>>()?;
    let increases = kernels
        .windows(2)
        .map(|w| {
            w[0].matrix()
                .iter()
                .zip(w[1].matrix())
                .filter(|(a, b)| b > a)
                .count()
        })
        .sum::<usize>();
    checks.push(Check::at_most("kernel_epsilon_monotonicity", increases as f64, 0.0));

    let failed = checks.iter().filter(|c| !c.pass).count();
    for c in &checks {
        println!(
            "[{}] {:<28} value {:.3e} tolerance {:.3e}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.tolerance
        );
    }
    let report = VerifyReport { corrupted_kernel: corrupt_kernel, failed, checks };
    let out = OutputDir::create(&cfg.output.directory)?;
    out.diagnostics("verify", rows)?;
    out.report("verify", cfg, &input_hash(cfg, &[])?, &report)?;
    Ok(if failed == 0 { 0 } else { 2 })
}

#[derive(Serialize)]
struct EpsStudyReport {
    mass_ratio: f64,
    t_fix: f64,
    eps_list: Vec<f64>,
    l1_distances: Vec<f64>,
    strictly_decreasing: bool,
}

pub fn eps_study(cfg: &ExperimentConfig) -> anyhow::Result<u8> {
    let params = cfg.params()?;
    let kernel = kernel_for(cfg, working_grid(cfg)?, cfg.model.epsilon)?;
    let el = steady_profile(cfg, &kernel, &params)?;
    let tau = diffusive_time(&el.profile, &params)?;
    let u0 = blowup_initial_data(&el.profile, cfg.eps_study.mass_ratio * el.mass, el.mass)?;
    let t_fix = cfg.eps_study.t_fix_tau * tau;
    let solver = cfg.solver_config()?;
    let distances = epsilon_convergence_study(&u0, &params, &cfg.eps_study.eps_list, t_fix, &solver)?;
    let report = EpsStudyReport {
        mass_ratio: cfg.eps_study.mass_ratio,
        t_fix,
        eps_list: cfg.eps_study.eps_list.clone(),
        strictly_decreasing: distances.windows(2).all(|w| w[1] < w[0]),
        l1_distances: distances,
    };
    for (w, d) in cfg.eps_study.eps_list.windows(2).zip(&report.l1_distances) {
        println!("eps {} -> {}: L1 distance {:.6e}", w[0], w[1], d);
    }
    let out = OutputDir::create(&cfg.output.directory)?;
    out.report("eps-study", cfg, &input_hash(cfg, &[])?, &report)?;
    Ok(0)
}
