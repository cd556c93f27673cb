//! Problem parameters and the closed-form constants of the critical model.

use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{domain, Result};
use crate::special::gamma;

/// Parameters of the critical equation `u_t = Δu^m − ∇·(u∇φ)`,
/// `φ = c_{d,s} |x|^{-(d-2s)} * u`, with `m = 2 − 2s/d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelParams {
    d: usize,
    s: f64,
    m: f64,
    epsilon: f64,
    alpha: f64,
    attraction: bool,
}

impl ModelParams {
    pub fn new(d: usize, s: f64, epsilon: f64) -> Result<Self> {
        let m = critical_exponent(d, s)?;
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(domain(format!("epsilon must be finite and >= 0, got {epsilon}")));
        }
        Ok(Self {
            d,
            s,
            m,
            epsilon,
            alpha: d as f64 - 2.0 * s,
            attraction: true,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    /// Diffusion exponent, always `2 − 2s/d`.
    pub fn m(&self) -> f64 {
        self.m
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Kernel exponent `d − 2s`.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn attraction(&self) -> bool {
        self.attraction
    }

    pub fn with_epsilon(self, epsilon: f64) -> Result<Self> {
        Self::new(self.d, self.s, epsilon).map(|p| Self {
            attraction: self.attraction,
            ..p
        })
    }

    /// Same parameters with the nonlocal attraction switched off
    /// (pure porous-medium flow).
    pub fn without_attraction(self) -> Self {
        Self {
            attraction: false,
            ..self
        }
    }

    pub fn riesz_constant(&self) -> f64 {
        riesz_constant(self.d, self.s).expect("validated on construction")
    }

    /// Prefactor applied to the kernel convolution: `c_{d,s}`, or zero when
    /// attraction is disabled.
    pub fn coupling(&self) -> f64 {
        if self.attraction {
            self.riesz_constant()
        } else {
            0.0
        }
    }

    pub fn constants(&self) -> DerivedConstants {
        DerivedConstants::new(self.d, self.s).expect("validated on construction")
    }
}

/// The closed-form constants attached to a working point `(d, s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DerivedConstants {
    pub c_ds: f64,
    pub c_hls: f64,
    pub c_star_upper: f64,
    pub m_star: f64,
}

impl DerivedConstants {
    pub fn new(d: usize, s: f64) -> Result<Self> {
        let c_ds = riesz_constant(d, s)?;
        let c_hls = hls_sharp_constant(d, s)?;
        let c_star_upper = vhls_upper_constant(d, s)?;
        let m_star = critical_mass(d, s, c_star_upper)?;
        Ok(Self {
            c_ds,
            c_hls,
            c_star_upper,
            m_star,
        })
    }
}

fn check_critical_domain(d: usize, s: f64) -> Result<()> {
    if d < 3 {
        return Err(domain(format!("dimension must be at least 3, got {d}")));
    }
    if !(s.is_finite() && 2.0 < 2.0 * s && 2.0 * s < d as f64) {
        return Err(domain(format!("need 2 < 2s < d, got d = {d}, s = {s}")));
    }
    Ok(())
}

/// `m = 2 − 2s/d`.
pub fn critical_exponent(d: usize, s: f64) -> Result<f64> {
    check_critical_domain(d, s)?;
    Ok(2.0 - 2.0 * s / d as f64)
}

/// Normalisation of the Riesz potential, `Γ(d/2 − s) / (π^{d/2} 4^s Γ(s))`.
pub fn riesz_constant(d: usize, s: f64) -> Result<f64> {
    check_critical_domain(d, s)?;
    let h = d as f64 / 2.0;
    Ok(gamma(h - s) / (PI.powf(h) * 4f64.powf(s) * gamma(s)))
}

/// Sharp diagonal HLS constant for the kernel `|x − y|^{-β}`, `β = d − 2s`:
/// `π^{β/2} Γ(d/2 − β/2)/Γ(d − β/2) · (Γ(d/2)/Γ(d))^{−1+β/d}`.
pub fn hls_sharp_constant(d: usize, s: f64) -> Result<f64> {
    let df = d as f64;
    let beta = df - 2.0 * s;
    if d == 0 || !(beta > 0.0 && beta < df) {
        return Err(domain(format!("need 0 < d - 2s < d, got d = {d}, s = {s}")));
    }
    let ratio = gamma(df / 2.0) / gamma(df);
    Ok(PI.powf(beta / 2.0) * gamma(df / 2.0 - beta / 2.0) / gamma(df - beta / 2.0)
        * ratio.powf(-1.0 + beta / df))
}

/// Closed-form bound on the optimal VHLS constant,
/// `π^{(d−2s)/2} Γ(s)/Γ((d+2s)/2) · (Γ(d/2)/Γ(d))^{−2s/d}`.
///
/// Algebraically the same number as [`hls_sharp_constant`]; it bounds the
/// optimal constant from above but is not attained.
pub fn vhls_upper_constant(d: usize, s: f64) -> Result<f64> {
    check_critical_domain(d, s)?;
    let df = d as f64;
    let ratio = gamma(df / 2.0) / gamma(df);
    Ok(PI.powf((df - 2.0 * s) / 2.0) * gamma(s) / gamma((df + 2.0 * s) / 2.0)
        * ratio.powf(-2.0 * s / df))
}

/// Critical mass `[2 / ((m − 1) C* c_{d,s})]^{d/(2s)}`.
pub fn critical_mass(d: usize, s: f64, c_star: f64) -> Result<f64> {
    let m = critical_exponent(d, s)?;
    if !(c_star > 0.0 && c_star.is_finite()) {
        return Err(domain(format!("C* must be positive and finite, got {c_star}")));
    }
    let c_ds = riesz_constant(d, s)?;
    Ok((2.0 / ((m - 1.0) * c_star * c_ds)).powf(d as f64 / (2.0 * s)))
}
