//! Shell-averaged Riesz kernel, potential and interaction energy.
//!
//! `K[i][j]` is the mean of `(|x − y|² + ε²)^{−α/2}`, `α = d − 2s`, over
//! `x` in shell `i` and `y` in shell `j`. With `w_j = u_j v_j`:
//!
//! * `φ_i = c Σ_j K[i][j] w_j`
//! * `ω = Σ_ij w_i K[i][j] w_j`
//!
//! so `c ω = Σ_i φ_i u_i v_i` holds exactly in floating point up to the
//! summation order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{domain, Error, Result};
use crate::field::{DensityField, RadialGrid};
use crate::special::{gamma, tanh_sinh, unit_sphere_area, GaussLegendre};

const PAIR_NODES: usize = 4;
const NEAR_DIAGONAL_SPLIT: usize = 8;
const CACHE_MAGIC: &[u8; 4] = b"RZK1";

/// Spherical integral `∫_{S^{d−1}} (|r e − ρ ω|² + ε²)^{−α/2} dω`.
///
/// Closed form for `d = 3`; for other dimensions a hypergeometric series
/// (small argument) or tanh-sinh quadrature in the polar angle.
pub fn angular_kernel(d: usize, alpha: f64, r: f64, rho: f64, eps: f64) -> Result<f64> {
    check_exponent(d, alpha)?;
    if r < 0.0 || rho < 0.0 || eps < 0.0 {
        return Err(domain("radii and epsilon must be non-negative"));
    }
    Ok(angular_unchecked(d, alpha, r, rho, eps))
}

fn check_exponent(d: usize, alpha: f64) -> Result<()> {
    let ok = if d == 3 {
        alpha > 0.0 && alpha < 2.0
    } else {
        d >= 2 && alpha > 0.0 && alpha < d as f64 - 1.0
    };
    if ok {
        Ok(())
    } else {
        Err(Error::UnsupportedExponent { d, alpha })
    }
}

fn angular_unchecked(d: usize, alpha: f64, r: f64, rho: f64, eps: f64) -> f64 {
    let e2 = eps * eps;
    let a = r * r + rho * rho + e2;
    if a == 0.0 {
        return f64::INFINITY;
    }
    let x = 2.0 * r * rho / a;
    let one_minus_x = ((r - rho) * (r - rho) + e2) / a;
    let q = if d == 3 {
        sphere_mean_3d(alpha, x, one_minus_x)
    } else {
        sphere_mean_general(d, alpha, x, one_minus_x)
    };
    unit_sphere_area(d) * a.powf(-0.5 * alpha) * q
}

/// Mean of `(1 − x t)^{−α/2}` over `S²`, i.e. `[(1+x)^κ − (1−x)^κ]/(2κx)`.
fn sphere_mean_3d(alpha: f64, x: f64, one_minus_x: f64) -> f64 {
    let kappa = 1.0 - 0.5 * alpha;
    if x == 0.0 {
        return 1.0;
    }
    if x < 0.5 {
        // (1−x)^κ (e^{2κ atanh x} − 1), free of cancellation
        one_minus_x.powf(kappa) * (2.0 * kappa * x.atanh()).exp_m1() / (2.0 * kappa * x)
    } else {
        ((1.0 + x).powf(kappa) - one_minus_x.powf(kappa)) / (2.0 * kappa * x)
    }
}

fn sphere_mean_general(d: usize, alpha: f64, x: f64, one_minus_x: f64) -> f64 {
    let b = 0.25 * alpha;
    if x <= 0.8 {
        // 2F1(α/4, α/4 + 1/2; d/2; x²)
        let z = x * x;
        let c = 0.5 * d as f64;
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 0..400 {
            let k = k as f64;
            term *= (b + k) * (b + 0.5 + k) / ((c + k) * (k + 1.0)) * z;
            sum += term;
            if term.abs() < 1e-17 * sum {
                break;
            }
        }
        return sum;
    }
    let p = (d - 2) as i32;
    let norm = PI_SQRT * gamma(0.5 * (d as f64 - 1.0)) / gamma(0.5 * d as f64);
    let integral = tanh_sinh(0.0, std::f64::consts::PI, 1e-13, |theta| {
        let half = (0.5 * theta).sin();
        let base = one_minus_x + 2.0 * x * half * half;
        base.powf(-0.5 * alpha) * theta.sin().powi(p)
    });
    integral / norm
}

const PI_SQRT: f64 = 1.772_453_850_905_516;

/// Dense symmetric shell-pair kernel on a radial grid.
#[derive(Debug, Clone)]
pub struct RieszKernel {
    grid: Arc<RadialGrid>,
    s: f64,
    epsilon: f64,
    n: usize,
    k: Vec<f64>,
}

/// Builds the shell-pair kernel for `α = d − 2s`.
///
/// Cell pairs use a 4×4 Gauss-Legendre tensor rule in `(r, ρ)`; pairs
/// touching the diagonal are split into 8×8 sub-cells because the angular
/// kernel has a `|r − ρ|^{2−α}` kink there.
pub fn build_kernel(grid: Arc<RadialGrid>, s: f64, epsilon: f64) -> Result<RieszKernel> {
    let d = grid.d();
    let alpha = d as f64 - 2.0 * s;
    check_exponent(d, alpha)?;
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(domain(format!("epsilon must be finite and >= 0, got {epsilon}")));
    }
    let n = grid.len();
    let rule = GaussLegendre::new(PAIR_NODES);
    let edges = grid.edges();
    let p = d as i32 - 1;
    let cell_nodes = |a: f64, b: f64, split: usize| -> Vec<(f64, f64)> {
        let h = (b - a) / split as f64;
        (0..split)
            .flat_map(|k| {
                let lo = a + k as f64 * h;
                rule.mapped(lo, lo + h)
                    .map(|(x, w)| (x, w * x.powi(p)))
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    let coarse: Vec<Vec<(f64, f64)>> = (0..n)
        .map(|i| cell_nodes(edges[i], edges[i + 1], 1))
        .collect();
    let fine: Vec<Vec<(f64, f64)>> = (0..n)
        .map(|i| cell_nodes(edges[i], edges[i + 1], NEAR_DIAGONAL_SPLIT))
        .collect();
    let pair = |xs: &[(f64, f64)], ys: &[(f64, f64)]| -> f64 {
        let mut acc = 0.0;
        for &(r, wr) in xs {
            let mut row = 0.0;
            for &(rho, wp) in ys {
                row += wp * angular_unchecked(d, alpha, r, rho, epsilon);
            }
            acc += wr * row;
        }
        acc
    };
    let area = unit_sphere_area(d);
    let vols = grid.volumes();
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i..n)
                .map(|j| {
                    let raw = if j - i <= 1 {
                        pair(&fine[i], &fine[j])
                    } else {
                        pair(&coarse[i], &coarse[j])
                    };
                    area * raw / (vols[i] * vols[j])
                })
                .collect()
        })
        .collect();
    let mut k = vec![0.0; n * n];
    for (i, row) in upper.into_iter().enumerate() {
        for (off, v) in row.into_iter().enumerate() {
            let j = i + off;
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    Ok(RieszKernel {
        grid,
        s,
        epsilon,
        n,
        k,
    })
}

impl RieszKernel {
    /// Wraps an externally supplied row-major matrix. Only the shape and
    /// finiteness are checked; [`Self::symmetry_defect`] reports asymmetry.
    pub fn from_parts(grid: Arc<RadialGrid>, s: f64, epsilon: f64, matrix: Vec<f64>) -> Result<Self> {
        let n = grid.len();
        if matrix.len() != n * n {
            return Err(domain(format!(
                "kernel matrix has {} entries, expected {}",
                matrix.len(),
                n * n
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(domain("kernel matrix contains non-finite entries"));
        }
        Ok(Self {
            grid,
            s,
            epsilon,
            n,
            k: matrix,
        })
    }

    pub fn grid(&self) -> &Arc<RadialGrid> {
        &self.grid
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn alpha(&self) -> f64 {
        self.grid.d() as f64 - 2.0 * self.s
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.k[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.k[i * self.n..(i + 1) * self.n]
    }

    pub fn matrix(&self) -> &[f64] {
        &self.k
    }

    /// Largest `|K_ij − K_ji|` relative to the largest entry.
    pub fn symmetry_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        for i in 0..self.n {
            for j in 0..self.n {
                worst = worst.max((self.entry(i, j) - self.entry(j, i)).abs());
                scale = scale.max(self.entry(i, j).abs());
            }
        }
        if scale > 0.0 {
            worst / scale
        } else {
            0.0
        }
    }

    fn check(&self, u: &DensityField, what: &'static str) -> Result<()> {
        if self.grid.same_as(u.grid()) {
            Ok(())
        } else {
            Err(Error::GridMismatch(what))
        }
    }

    /// `out_i = c Σ_j K_ij w_j` for cell masses `w`.
    pub fn apply_masses(&self, w: &[f64], c: f64, out: &mut [f64]) {
        debug_assert_eq!(w.len(), self.n);
        debug_assert_eq!(out.len(), self.n);
        let n = self.n;
        let body = |(i, o): (usize, &mut f64)| {
            let row = &self.k[i * n..(i + 1) * n];
            *o = c * dot(row, w);
        };
        if n >= 512 {
            out.par_iter_mut().enumerate().for_each(body);
        } else {
            out.iter_mut().enumerate().for_each(body);
        }
    }

    /// Cell-average potential `φ = c K (u v)`.
    pub fn potential(&self, u: &DensityField, c: f64) -> Result<Vec<f64>> {
        self.check(u, "potential")?;
        let w = cell_masses(u);
        let mut out = vec![0.0; self.n];
        self.apply_masses(&w, c, &mut out);
        Ok(out)
    }

    /// `ω(u) = Σ_ij u_i u_j v_i v_j K_ij` (no `c_{d,s}` factor).
    pub fn interaction_energy(&self, u: &DensityField) -> Result<f64> {
        self.check(u, "interaction energy")?;
        let w = cell_masses(u);
        let mut kw = vec![0.0; self.n];
        self.apply_masses(&w, 1.0, &mut kw);
        Ok(dot(&w, &kw))
    }

    /// `∂φ/∂r` at the faces `r_k`, `k = 0..N`: centred difference between
    /// adjacent cell centres, zero at the origin.
    pub fn potential_gradient(&self, u: &DensityField, c: f64) -> Result<Vec<f64>> {
        let phi = self.potential(u, c)?;
        Ok(face_gradient(&self.grid, &phi))
    }

    /// Writes the kernel to `path` (see [`Self::load`] for the layout).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(CACHE_MAGIC)?;
        out.write_all(&cache_key(&self.grid, self.s, self.epsilon))?;
        out.write_all(&(self.n as u64).to_le_bytes())?;
        for v in &self.k {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    /// Binary layout: `b"RZK1"`, the 32-byte SHA-256 key of
    /// `(d, s, ε, N, R_max)`, `N` as little-endian u64, then `N²` little-endian
    /// f64 entries in row-major order. The key must match the requested grid.
    pub fn load(path: &Path, grid: Arc<RadialGrid>, s: f64, epsilon: f64) -> Result<Self> {
        let fmt = |detail: &str| Error::Format {
            what: "kernel cache",
            detail: detail.to_string(),
        };
        let mut input = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(fmt("bad magic"));
        }
        let mut key = [0u8; 32];
        input.read_exact(&mut key)?;
        if key != cache_key(&grid, s, epsilon) {
            return Err(fmt("key does not match (d, s, epsilon, N, R_max)"));
        }
        let mut nb = [0u8; 8];
        input.read_exact(&mut nb)?;
        let n = u64::from_le_bytes(nb) as usize;
        if n != grid.len() {
            return Err(fmt("size does not match grid"));
        }
        let mut k = Vec::with_capacity(n * n);
        let mut buf = [0u8; 8];
        for _ in 0..n * n {
            input.read_exact(&mut buf)?;
            k.push(f64::from_le_bytes(buf));
        }
        Self::from_parts(grid, s, epsilon, k)
    }
}

/// Loads the kernel from `dir` if a matching cache file exists, otherwise
/// builds it and writes the cache.
pub fn build_kernel_cached(
    grid: Arc<RadialGrid>,
    s: f64,
    epsilon: f64,
    dir: &Path,
) -> Result<RieszKernel> {
    let path = cache_path(dir, &grid, s, epsilon);
    if path.exists() {
        if let Ok(k) = RieszKernel::load(&path, grid.clone(), s, epsilon) {
            return Ok(k);
        }
    }
    let kernel = build_kernel(grid, s, epsilon)?;
    std::fs::create_dir_all(dir)?;
    kernel.save(&path)?;
    Ok(kernel)
}

pub fn cache_path(dir: &Path, grid: &RadialGrid, s: f64, epsilon: f64) -> PathBuf {
    let key = cache_key(grid, s, epsilon);
    let hex: String = key[..8].iter().map(|b| format!("{b:02x}")).collect();
    dir.join(format!("rzk_{hex}.bin"))
}

fn cache_key(grid: &RadialGrid, s: f64, epsilon: f64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((grid.d() as u64).to_le_bytes());
    h.update(s.to_le_bytes());
    h.update(epsilon.to_le_bytes());
    h.update((grid.len() as u64).to_le_bytes());
    h.update(grid.r_max().to_le_bytes());
    for e in grid.edges() {
        h.update(e.to_le_bytes());
    }
    h.finalize().into()
}

pub(crate) fn cell_masses(u: &DensityField) -> Vec<f64> {
    u.values()
        .iter()
        .zip(u.grid().volumes())
        .map(|(a, b)| a * b)
        .collect()
}

pub(crate) fn face_gradient(grid: &RadialGrid, cell: &[f64]) -> Vec<f64> {
    let c = grid.centers();
    let mut g = vec![0.0; cell.len()];
    for k in 1..cell.len() {
        g[k] = (cell[k] - cell[k - 1]) / (c[k] - c[k - 1]);
    }
    g
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators keep the loop vectorisable
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
