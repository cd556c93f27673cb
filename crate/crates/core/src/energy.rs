//! Free energy, chemical potential, dissipation, VHLS ratio, virial
//! right-hand side and the second-moment lower bound on `‖u‖_r`.

use serde::Serialize;

use crate::error::{domain, Error, Result};
use crate::field::DensityField;
use crate::model::ModelParams;
use crate::riesz::{dot, RieszKernel};
use crate::solver::{face_densities, Reconstruction};
use crate::special::unit_ball_volume;

/// The parts of the free energy evaluated together. `f = s − w` exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyReport {
    pub f: f64,
    /// `(1/(m−1)) ∫ u^m`
    pub s: f64,
    /// `(c/2) ω(u)`
    pub w: f64,
    pub d: f64,
    /// `None` for the zero field.
    pub j: Option<f64>,
}

pub(crate) fn check_kernel(kernel: &RieszKernel, u: &DensityField, params: &ModelParams) -> Result<()> {
    if !kernel.grid().same_as(u.grid()) {
        return Err(Error::GridMismatch("kernel and field"));
    }
    if kernel.grid().d() != params.d() || kernel.s() != params.s() {
        return Err(domain("kernel was built for a different (d, s)"));
    }
    if kernel.epsilon() != params.epsilon() {
        return Err(domain(format!(
            "kernel epsilon {} differs from model epsilon {}",
            kernel.epsilon(),
            params.epsilon()
        )));
    }
    Ok(())
}

/// `(1/(m−1)) Σ u_i^m v_i`.
pub fn entropy(u: &DensityField, params: &ModelParams) -> f64 {
    u.lp_norm_pow(params.m()) / (params.m() - 1.0)
}

/// `F = (1/(m−1)) ∫u^m − (c/2) ω(u)`.
pub fn free_energy(u: &DensityField, kernel: &RieszKernel, params: &ModelParams) -> Result<f64> {
    check_kernel(kernel, u, params)?;
    let s = entropy(u, params);
    let w = 0.5 * params.coupling() * kernel.interaction_energy(u)?;
    Ok(s - w)
}

/// Cell potential `φ`, including the coupling constant.
pub fn potential(u: &DensityField, kernel: &RieszKernel, params: &ModelParams) -> Result<Vec<f64>> {
    check_kernel(kernel, u, params)?;
    kernel.potential(u, params.coupling())
}

/// `μ_i = (m/(m−1)) u_i^{m−1} − φ_i`.
pub fn chemical_potential(
    u: &DensityField,
    kernel: &RieszKernel,
    params: &ModelParams,
) -> Result<Vec<f64>> {
    let phi = potential(u, kernel, params)?;
    Ok(chemical_potential_from(u, &phi, params))
}

pub(crate) fn chemical_potential_from(u: &DensityField, phi: &[f64], params: &ModelParams) -> Vec<f64> {
    let m = params.m();
    let pre = m / (m - 1.0);
    u.values()
        .iter()
        .zip(phi)
        .map(|(&x, p)| pre * pow_m1(x, m) - p)
        .collect()
}

#[inline]
pub(crate) fn pow_m1(x: f64, m: f64) -> f64 {
    if x > 0.0 {
        x.powf(m - 1.0)
    } else {
        0.0
    }
}

/// `D = Σ_faces A_k Δc_k u_face (Δμ/Δc)²` with the same upwind face density
/// the solver uses for the given reconstruction, so that the semi-discrete
/// scheme satisfies `dF/dt = −D` exactly when `ε = 0`.
pub fn dissipation(u: &DensityField, mu: &[f64], reconstruction: Reconstruction) -> Result<f64> {
    if mu.len() != u.len() {
        return Err(Error::GridMismatch("chemical potential and field"));
    }
    let grid = u.grid();
    let c = grid.centers();
    let n = u.len();
    let mut vel = vec![0.0; n];
    for k in 1..n {
        vel[k] = -(mu[k] - mu[k - 1]) / (c[k] - c[k - 1]);
    }
    let faces = face_densities(u.values(), grid, &vel, reconstruction);
    let mut total = 0.0;
    for k in 1..n {
        let dc = c[k] - c[k - 1];
        total += grid.face_area(k) * dc * faces[k] * vel[k] * vel[k];
    }
    Ok(total)
}

/// `J(u) = ω(u) / (M^{2s/d} ‖u‖_m^m)`.
pub fn vhls_ratio(u: &DensityField, kernel: &RieszKernel, params: &ModelParams) -> Result<f64> {
    check_kernel(kernel, u, params)?;
    if u.is_zero() {
        return Err(Error::ZeroField);
    }
    let om = kernel.interaction_energy(u)?;
    Ok(vhls_ratio_from(om, u, params))
}

pub(crate) fn vhls_ratio_from(omega: f64, u: &DensityField, params: &ModelParams) -> f64 {
    let mass = u.mass();
    omega / (mass.powf(2.0 * params.s() / params.d() as f64) * u.lp_norm_pow(params.m()))
}

/// `dm2/dt = 2(d − 2s) F(u)`.
pub fn virial_rhs(u: &DensityField, kernel: &RieszKernel, params: &ModelParams) -> Result<f64> {
    Ok(2.0 * params.alpha() * free_energy(u, kernel, params)?)
}

/// Everything at once, sharing a single potential evaluation.
pub fn energy_report(
    u: &DensityField,
    kernel: &RieszKernel,
    params: &ModelParams,
    reconstruction: Reconstruction,
) -> Result<EnergyReport> {
    let phi = potential(u, kernel, params)?;
    Ok(report_from(u, &phi, kernel, params, reconstruction))
}

pub(crate) fn report_from(
    u: &DensityField,
    phi: &[f64],
    kernel: &RieszKernel,
    params: &ModelParams,
    reconstruction: Reconstruction,
) -> EnergyReport {
    let s = entropy(u, params);
    let masses: Vec<f64> = u
        .values()
        .iter()
        .zip(u.grid().volumes())
        .map(|(a, v)| a * v)
        .collect();
    let c_phi = dot(phi, &masses);
    let w = 0.5 * c_phi;
    let mu = chemical_potential_from(u, phi, params);
    let d = dissipation(u, &mu, reconstruction).expect("sizes agree");
    let j = if u.is_zero() {
        None
    } else {
        // ω from the potential avoids a second matvec; fall back to the
        // kernel when attraction is switched off
        let omega = if params.coupling() > 0.0 {
            c_phi / params.coupling()
        } else {
            kernel.interaction_energy(u).expect("grid checked")
        };
        Some(vhls_ratio_from(omega, u, params))
    };
    EnergyReport {
        f: s - w,
        s,
        w,
        d,
        j,
    }
}

/// Lower bound on `‖u‖_r` for any density of mass `M` and second moment
/// `m2` in `R^d`, `1 < r ≤ ∞`.
///
/// Splitting at radius `R`, Hölder gives `M ≤ C₃ R^a ‖u‖_r + m2 R^{−2}` with
/// `a = d(r−1)/r` and `C₃ = |B₁|^{(r−1)/r}`. Minimising the right side over
/// `R` yields
///
/// `‖u‖_r ≥ (2/(a C₃)) (a M/(a+2))^{(a+2)/2} m2^{−a/2}`.
pub fn lr_lower_bound(mass: f64, m2: f64, r: f64, d: usize) -> Result<f64> {
    if !(mass > 0.0 && mass.is_finite() && m2 > 0.0 && m2.is_finite()) {
        return Err(domain(format!("need M > 0 and m2 > 0, got ({mass}, {m2})")));
    }
    if !(r > 1.0) || d == 0 {
        return Err(domain(format!("need r > 1, got {r}")));
    }
    let df = d as f64;
    let frac = if r.is_infinite() { 1.0 } else { (r - 1.0) / r };
    let a = df * frac;
    let c3 = unit_ball_volume(d).powf(frac);
    Ok(2.0 / (a * c3) * (a * mass / (a + 2.0)).powf(0.5 * (a + 2.0)) * m2.powf(-0.5 * a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::RadialGrid;
    use crate::riesz::build_kernel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn setup(n: usize, r_max: f64) -> (Arc<RadialGrid>, RieszKernel, ModelParams) {
        let g = Arc::new(RadialGrid::uniform(3, n, r_max).unwrap());
        let k = build_kernel(g.clone(), 1.25, 0.0).unwrap();
        (g, k, ModelParams::new(3, 1.25, 0.0).unwrap())
    }

    fn bump(g: &Arc<RadialGrid>) -> DensityField {
        DensityField::from_profile(g.clone(), |r| (1.0 - r * r).max(0.0).powi(2) + 0.1 * (-r).exp()).unwrap()
    }

    #[test]
    fn zero_field() {
        let (g, k, p) = setup(32, 2.0);
        let z = DensityField::zeros(g);
        assert_eq!(free_energy(&z, &k, &p).unwrap(), 0.0);
        assert!(chemical_potential(&z, &k, &p).unwrap().iter().all(|&m| m == 0.0));
        let mu = chemical_potential(&z, &k, &p).unwrap();
        assert_eq!(dissipation(&z, &mu, Reconstruction::Muscl).unwrap(), 0.0);
        assert!(matches!(vhls_ratio(&z, &k, &p), Err(Error::ZeroField)));
        assert_eq!(virial_rhs(&z, &k, &p).unwrap(), 0.0);
    }

    #[test]
    fn report_parts_are_consistent() {
        let (g, k, p) = setup(64, 2.0);
        let u = bump(&g).scaled_by(30.0).unwrap();
        let r = energy_report(&u, &k, &p, Reconstruction::Muscl).unwrap();
        assert_eq!(r.f, r.s - r.w);
        assert!(r.d >= 0.0);
        assert!(((r.f - free_energy(&u, &k, &p).unwrap()) / r.f).abs() < 1e-12);
        let j = vhls_ratio(&u, &k, &p).unwrap();
        assert!(((r.j.unwrap() - j) / j).abs() < 1e-12);
    }

    #[test]
    fn tiny_mass_has_positive_energy() {
        let (g, k, p) = setup(64, 2.0);
        let u = bump(&g);
        for a in [1e-3, 1e-6, 1e-9] {
            assert!(free_energy(&u.scaled_by(a).unwrap(), &k, &p).unwrap() > 0.0);
        }
    }

    #[test]
    fn chemical_potential_without_attraction_is_monotone() {
        let (g, k, p) = setup(48, 2.0);
        let p = p.without_attraction();
        let u = bump(&g);
        let mu = chemical_potential(&u, &k, &p).unwrap();
        let m = p.m();
        for (x, y) in u.values().iter().zip(&mu) {
            assert!((y - m / (m - 1.0) * x.powf(m - 1.0)).abs() < 1e-14);
        }
    }

    #[test]
    fn virial_expanded_form() {
        let (g, k, p) = setup(64, 2.0);
        let u = bump(&g).scaled_by(40.0).unwrap();
        let v = virial_rhs(&u, &k, &p).unwrap();
        let expanded = 2.0 * 3.0 * u.lp_norm_pow(p.m())
            - p.alpha() * p.coupling() * k.interaction_energy(&u).unwrap();
        assert!(((v - expanded) / expanded.abs()).abs() < 1e-12);
        // large amplitude: attraction wins, F < 0, so the virial is negative
        let big = bump(&g).scaled_by(1e4).unwrap();
        assert!(free_energy(&big, &k, &p).unwrap() < 0.0);
        assert!(virial_rhs(&big, &k, &p).unwrap() < 0.0);
    }

    #[test]
    fn scaling_of_parts() {
        let p = ModelParams::new(3, 1.25, 0.0).unwrap();
        let fine = Arc::new(RadialGrid::uniform(3, 160, 3.0).unwrap());
        let k = build_kernel(fine.clone(), 1.25, 0.0).unwrap();
        let u = DensityField::from_profile(fine.clone(), |r| (1.0 - r * r).max(0.0)).unwrap();
        let (lam, mu) = (1.7, 1.3);
        let v = u.scale(lam, mu).unwrap();
        let kv = build_kernel(v.grid().clone(), 1.25, 0.0).unwrap();
        let s0 = entropy(&u, &p);
        let s1 = entropy(&v, &p);
        assert!(((s1 / s0) - lam.powf(p.m()) * mu.powi(-3)).abs() < 1e-10);
        let w0 = k.interaction_energy(&u).unwrap();
        let w1 = kv.interaction_energy(&v).unwrap();
        let expect = lam * lam * mu.powf(-3.0 - 2.5);
        assert!(((w1 / w0) / expect - 1.0).abs() < 1e-10);
    }

    #[test]
    fn j_bounded_by_hls_for_random_fields() {
        let (g, k, p) = setup(128, 2.0);
        let c = p.constants().c_hls;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let vals: Vec<f64> = (0..128).map(|_| rng.gen::<f64>().powi(3)).collect();
            let u = DensityField::new(g.clone(), vals).unwrap();
            assert!(vhls_ratio(&u, &k, &p).unwrap() <= c * 1.02);
        }
    }

    #[test]
    fn lr_bound_behaviour() {
        assert!(lr_lower_bound(0.0, 1.0, 2.0, 3).is_err());
        assert!(lr_lower_bound(1.0, 0.0, 2.0, 3).is_err());
        assert!(lr_lower_bound(1.0, 1.0, 1.0, 3).is_err());
        let first = lr_lower_bound(1.0, 1.0, 7.0 / 6.0, 3).unwrap();
        let mut prev = first;
        for m2 in [1e-2, 1e-4, 1e-8, 1e-16] {
            let b = lr_lower_bound(1.0, m2, 7.0 / 6.0, 3).unwrap();
            assert!(b > prev);
            prev = b;
        }
        assert!(prev > 30.0 * first);
        let r = 2.5;
        let a = 3.0 * (r - 1.0) / r;
        let ratio = lr_lower_bound(3.0, 0.7, r, 3).unwrap() / lr_lower_bound(1.0, 0.7, r, 3).unwrap();
        assert!((ratio - 3f64.powf((a + 2.0) / 2.0)).abs() < 1e-12);
        assert!(lr_lower_bound(1.0, 1.0, f64::INFINITY, 3).unwrap().is_finite());
    }

    #[test]
    fn lr_bound_below_actual_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for sample in 0..1000 {
            let n = 40;
            let r_max = rng.gen_range(0.5..5.0);
            let g = Arc::new(RadialGrid::uniform(3, n, r_max).unwrap());
            let vals: Vec<f64> = (0..n)
                .map(|_| if rng.gen_bool(0.6) { rng.gen::<f64>() * 10.0 } else { 0.0 })
                .collect();
            let u = DensityField::new(g, vals).unwrap();
            if u.is_zero() {
                continue;
            }
            let r = [7.0 / 6.0, 2.0, 4.0, f64::INFINITY][sample % 4];
            let bound = lr_lower_bound(u.mass(), u.second_moment(), r, 3).unwrap();
            let actual = u.lp_norm(r).unwrap();
            assert!(bound <= actual * (1.0 + 1e-12), "{sample}: {bound} > {actual}");
        }
    }
}
