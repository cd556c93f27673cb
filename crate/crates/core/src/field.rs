//! Radially symmetric densities discretised as cell averages on spherical
//! shells `r_i <= |x| < r_{i+1}`.

use std::cmp::Ordering;
use std::io::{BufRead, Write};
use std::sync::Arc;

use crate::error::{domain, Error, Result};
use crate::special::{unit_sphere_area, GaussLegendre};

/// Shell decomposition of the ball of radius `r_max` in R^d.
#[derive(Debug, Clone)]
pub struct RadialGrid {
    d: usize,
    edges: Vec<f64>,
    volumes: Vec<f64>,
    centers: Vec<f64>,
    r2_mean: Vec<f64>,
}

impl RadialGrid {
    /// `n` shells of equal width on `[0, r_max]`.
    pub fn uniform(d: usize, n: usize, r_max: f64) -> Result<Self> {
        if n == 0 {
            return Err(domain("grid needs at least one cell"));
        }
        if !(r_max > 0.0 && r_max.is_finite()) {
            return Err(domain(format!("r_max must be positive, got {r_max}")));
        }
        let h = r_max / n as f64;
        let mut edges: Vec<f64> = (0..=n).map(|i| i as f64 * h).collect();
        edges[n] = r_max;
        Self::from_edges(d, edges)
    }

    /// Arbitrary strictly increasing edges starting at the origin.
    pub fn from_edges(d: usize, edges: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(domain("dimension must be positive"));
        }
        if edges.len() < 2 || edges[0] != 0.0 {
            return Err(domain("edges must start at 0 and contain at least one cell"));
        }
        if edges.windows(2).any(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
            return Err(domain("edges must be finite and strictly increasing"));
        }
        let area = unit_sphere_area(d);
        let df = d as f64;
        let n = edges.len() - 1;
        let mut volumes = Vec::with_capacity(n);
        let mut centers = Vec::with_capacity(n);
        let mut r2_mean = Vec::with_capacity(n);
        for w in edges.windows(2) {
            let (a, b) = (w[0], w[1]);
            let vd = b.powf(df) - a.powf(df);
            volumes.push(area * vd / df);
            // volume centroid of |x| and exact shell mean of |x|^2
            centers.push(df / (df + 1.0) * (b.powf(df + 1.0) - a.powf(df + 1.0)) / vd);
            r2_mean.push(df / (df + 2.0) * (b.powf(df + 2.0) - a.powf(df + 2.0)) / vd);
        }
        Ok(Self {
            d,
            edges,
            volumes,
            centers,
            r2_mean,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn volumes(&self) -> &[f64] {
        &self.volumes
    }

    /// Cell centres, taken as the volume centroid of `|x|` over each shell.
    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// Exact shell average of `|x|^2`.
    pub fn r2_mean(&self) -> &[f64] {
        &self.r2_mean
    }

    pub fn r_max(&self) -> f64 {
        *self.edges.last().expect("non-empty")
    }

    /// Area of the sphere through edge `k`.
    pub fn face_area(&self, k: usize) -> f64 {
        unit_sphere_area(self.d) * self.edges[k].powi(self.d as i32 - 1)
    }

    /// Same shells with every radius multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(domain(format!("grid scale factor must be positive, got {factor}")));
        }
        Self::from_edges(self.d, self.edges.iter().map(|r| r * factor).collect())
    }

    pub fn same_as(&self, other: &RadialGrid) -> bool {
        std::ptr::eq(self, other) || (self.d == other.d && self.edges == other.edges)
    }

    /// Shell averages (weight `r^{d-1}`) of a radial function, 8-point Gauss per cell.
    pub fn cell_averages<F: Fn(f64) -> f64>(&self, f: F) -> Vec<f64> {
        let rule = GaussLegendre::new(8);
        let p = self.d as i32 - 1;
        self.edges
            .windows(2)
            .map(|w| {
                let mut num = 0.0;
                let mut den = 0.0;
                for (r, wt) in rule.mapped(w[0], w[1]) {
                    let jac = wt * r.powi(p);
                    num += jac * f(r);
                    den += jac;
                }
                num / den
            })
            .collect()
    }
}

/// Non-negative cell-average density on a shared radial grid.
#[derive(Debug, Clone)]
pub struct DensityField {
    grid: Arc<RadialGrid>,
    values: Vec<f64>,
}

impl DensityField {
    pub fn new(grid: Arc<RadialGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(domain(format!(
                "field has {} values for a grid of {} cells",
                values.len(),
                grid.len()
            )));
        }
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(domain(format!("cell {i} has invalid density {v}")));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Arc<RadialGrid>) -> Self {
        let values = vec![0.0; grid.len()];
        Self { grid, values }
    }

    /// Cell averages of a non-negative radial profile.
    pub fn from_profile<F: Fn(f64) -> f64>(grid: Arc<RadialGrid>, f: F) -> Result<Self> {
        let values = grid.cell_averages(f);
        Self::new(grid, values)
    }

    pub(crate) fn from_raw(grid: Arc<RadialGrid>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn grid(&self) -> &Arc<RadialGrid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn mass(&self) -> f64 {
        self.values
            .iter()
            .zip(self.grid.volumes())
            .map(|(u, v)| u * v)
            .sum()
    }

    /// `(Σ u_i^p v_i)^{1/p}`; `p = ∞` gives the maximum cell value.
    pub fn lp_norm(&self, p: f64) -> Result<f64> {
        if p.is_nan() || p < 1.0 {
            return Err(domain(format!("L^p norm needs p >= 1, got {p}")));
        }
        if p.is_infinite() {
            return Ok(self.linf_norm());
        }
        Ok(self.lp_norm_pow(p).powf(1.0 / p))
    }

    /// `Σ u_i^p v_i`, i.e. the p-th power of the L^p norm.
    pub fn lp_norm_pow(&self, p: f64) -> f64 {
        self.values
            .iter()
            .zip(self.grid.volumes())
            .map(|(u, v)| u.powf(p) * v)
            .sum()
    }

    pub fn linf_norm(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// `∫|x|^2 u dx` with the exact shell average of `|x|^2`.
    pub fn second_moment(&self) -> f64 {
        self.values
            .iter()
            .zip(self.grid.volumes())
            .zip(self.grid.r2_mean())
            .map(|((u, v), r2)| u * v * r2)
            .sum()
    }

    /// Mass carried by the outermost `fraction` of the cells.
    pub fn outer_mass(&self, fraction: f64) -> f64 {
        let n = self.len();
        let k = ((n as f64) * fraction).ceil() as usize;
        let start = n.saturating_sub(k.max(1));
        (start..n)
            .map(|i| self.values[i] * self.grid.volumes()[i])
            .sum()
    }

    pub fn scaled_by(&self, a: f64) -> Result<Self> {
        if !(a >= 0.0 && a.is_finite()) {
            return Err(domain(format!("amplitude factor must be >= 0, got {a}")));
        }
        Ok(Self::from_raw(
            self.grid.clone(),
            self.values.iter().map(|u| a * u).collect(),
        ))
    }

    /// Dilation `λ u(μ r)`; the returned field lives on the grid scaled by `1/μ`.
    pub fn scale(&self, lambda: f64, mu: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite() && mu > 0.0 && mu.is_finite()) {
            return Err(domain(format!(
                "scaling needs lambda, mu > 0, got ({lambda}, {mu})"
            )));
        }
        let grid = Arc::new(self.grid.scaled(1.0 / mu)?);
        Ok(Self::from_raw(
            grid,
            self.values.iter().map(|u| lambda * u).collect(),
        ))
    }

    pub fn l1_distance(&self, other: &DensityField) -> Result<f64> {
        if !self.grid.same_as(&other.grid) {
            return Err(Error::GridMismatch("L1 distance between fields"));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .zip(self.grid.volumes())
            .map(|((a, b), v)| (a - b).abs() * v)
            .sum())
    }

    fn sorted_blocks(&self) -> Vec<(f64, f64)> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| {
            self.values[b]
                .partial_cmp(&self.values[a])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        idx.into_iter()
            .map(|i| (self.values[i], self.grid.volumes()[i]))
            .collect()
    }

    /// Symmetric decreasing rearrangement.
    ///
    /// The output is exactly equimeasurable with the input: the cells are
    /// sorted by value and stacked from the origin outwards on an adapted
    /// grid whose shells carry the sorted cell volumes. Every L^p norm is
    /// preserved up to roundoff. Use [`Self::rearrange_on_grid`] when the
    /// result must stay on the original grid.
    pub fn rearrange(&self) -> Self {
        let blocks = self.sorted_blocks();
        let d = self.grid.d();
        let df = d as f64;
        let area = unit_sphere_area(d);
        let mut edges = Vec::with_capacity(blocks.len() + 1);
        edges.push(0.0);
        let mut acc = 0.0;
        for (_, vol) in &blocks {
            acc += vol;
            edges.push((df * acc / area).powf(1.0 / df));
        }
        let n = blocks.len();
        edges[n] = self.grid.r_max();
        for k in (1..n).rev() {
            // roundoff can only ever collapse a shell of positive volume
            if edges[k] >= edges[k + 1] {
                edges[k] = edges[k + 1] * (1.0 - f64::EPSILON);
            }
        }
        let grid = RadialGrid::from_edges(d, edges).expect("cumulative volumes increase");
        Self::from_raw(Arc::new(grid), blocks.into_iter().map(|(u, _)| u).collect())
    }

    /// Rearrangement projected back onto this grid: cells are sorted by value
    /// and poured into the shells from the origin outwards, a value block that
    /// straddles a shell boundary being split in proportion to volume.
    /// Mass and the maximum are preserved; other L^p norms can only decrease.
    pub fn rearrange_on_grid(&self) -> Self {
        let blocks = self.sorted_blocks();
        let volumes = self.grid.volumes();
        let n = volumes.len();
        let mut out = vec![0.0; n];
        let mut k = 0;
        let mut block_left = blocks.first().map(|b| b.1).unwrap_or(0.0);
        for (i, &cap) in volumes.iter().enumerate() {
            let mut need = cap;
            let mut acc = 0.0;
            let mut pieces = 0;
            let mut single = 0.0;
            while k < blocks.len() && (need > 0.0 || i + 1 == n) {
                let take = if i + 1 == n { block_left } else { need.min(block_left) };
                acc += blocks[k].0 * take;
                single = blocks[k].0;
                pieces += 1;
                need -= take;
                block_left -= take;
                if block_left <= 1e-14 * blocks[k].1 {
                    k += 1;
                    block_left = blocks.get(k).map(|b| b.1).unwrap_or(0.0);
                }
                if need <= 1e-14 * cap && i + 1 != n {
                    break;
                }
            }
            out[i] = if pieces == 1 && (need.abs() <= 1e-14 * cap) {
                single
            } else {
                acc / cap
            };
        }
        Self::from_raw(self.grid.clone(), out)
    }

    pub fn is_non_increasing(&self) -> bool {
        self.values.windows(2).all(|w| w[1] <= w[0])
    }

    /// CSV with header `r_center,volume,value`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "r_center,volume,value")?;
        for ((r, v), u) in self
            .grid
            .centers()
            .iter()
            .zip(self.grid.volumes())
            .zip(&self.values)
        {
            writeln!(out, "{r},{v},{u}")?;
        }
        Ok(())
    }

    /// Reads the CSV written by [`Self::write_csv`]. The grid edges are
    /// rebuilt from the cumulative shell volumes.
    pub fn read_csv<R: BufRead>(input: R, d: usize) -> Result<Self> {
        let fmt = |detail: String| Error::Format {
            what: "field CSV",
            detail,
        };
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| fmt("empty file".into()))??;
        if header.trim() != "r_center,volume,value" {
            return Err(fmt(format!("unexpected header {header:?}")));
        }
        let mut centers = Vec::new();
        let mut volumes = Vec::new();
        let mut values = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(fmt(format!("line {}: expected 3 columns", lineno + 2)));
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| fmt(format!("line {}: {e}", lineno + 2)))
            };
            centers.push(parse(cols[0])?);
            volumes.push(parse(cols[1])?);
            values.push(parse(cols[2])?);
        }
        if values.is_empty() {
            return Err(fmt("no data rows".into()));
        }
        let df = d as f64;
        let area = unit_sphere_area(d);
        let mut edges = vec![0.0];
        let mut acc = 0.0;
        for v in &volumes {
            acc += v;
            edges.push((df * acc / area).powf(1.0 / df));
        }
        let grid = RadialGrid::from_edges(d, edges)?;
        for (i, (a, b)) in grid.centers().iter().zip(&centers).enumerate() {
            if (a - b).abs() > 1e-8 * b.abs().max(grid.r_max() * 1e-6) {
                return Err(fmt(format!(
                    "cell {i}: centre {b} inconsistent with volumes in dimension {d}"
                )));
            }
        }
        Self::new(Arc::new(grid), values)
    }
}

/// Cell averages of `A (γ² + r²)^{-(2d−β)/2}`, `β = d − 2s`: the profile that
/// attains equality in the diagonal HLS inequality.
pub fn hls_extremizer_profile(
    grid: Arc<RadialGrid>,
    amplitude: f64,
    gamma: f64,
    s: f64,
) -> Result<DensityField> {
    let df = grid.d() as f64;
    let beta = df - 2.0 * s;
    if !(beta > 0.0 && beta < df) {
        return Err(domain(format!("need 0 < d - 2s < d, got s = {s}")));
    }
    if !(amplitude > 0.0 && amplitude.is_finite()) {
        return Err(domain("amplitude must be positive"));
    }
    if gamma == 0.0 || !gamma.is_finite() {
        return Err(domain("gamma must be non-zero"));
    }
    let expo = -(2.0 * df - beta) / 2.0;
    let g2 = gamma * gamma;
    DensityField::from_profile(grid, |r| amplitude * (g2 + r * r).powf(expo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn unit_ball(n: usize, value: f64) -> DensityField {
        let g = Arc::new(RadialGrid::uniform(3, n, 1.0).unwrap());
        DensityField::new(g, vec![value; n]).unwrap()
    }

    #[test]
    fn grid_volumes_sum_to_ball() {
        let g = RadialGrid::uniform(3, 97, 2.5).unwrap();
        let total: f64 = g.volumes().iter().sum();
        let ball = 4.0 * PI / 3.0 * 2.5f64.powi(3);
        assert!(((total - ball) / ball).abs() < 1e-13);
        assert!(g.volumes().iter().all(|&v| v > 0.0));
        let g = RadialGrid::uniform(5, 40, 1.0).unwrap();
        let total: f64 = g.volumes().iter().sum();
        assert!((total - crate::special::unit_ball_volume(5)).abs() < 1e-13);
    }

    #[test]
    fn grid_rejects_bad_edges() {
        assert!(RadialGrid::from_edges(3, vec![0.0, 1.0, 1.0]).is_err());
        assert!(RadialGrid::from_edges(3, vec![0.1, 1.0]).is_err());
        assert!(RadialGrid::uniform(3, 0, 1.0).is_err());
        assert!(RadialGrid::uniform(3, 4, -1.0).is_err());
    }

    #[test]
    fn mass_examples() {
        let u = unit_ball(64, 1.0);
        assert!((u.mass() - 4.0 * PI / 3.0).abs() < 1e-12);
        assert_eq!(unit_ball(64, 0.0).mass(), 0.0);
        let a = 2.7;
        assert!((u.scaled_by(a).unwrap().mass() - a * u.mass()).abs() < 1e-12);
    }

    #[test]
    fn lp_norm_examples() {
        let u = unit_ball(50, 2.0);
        let v = u.lp_norm(2.0).unwrap();
        assert!((v - 2.0 * (4.0 * PI / 3.0f64).sqrt()).abs() < 1e-12);
        assert!((u.lp_norm(1.0).unwrap() - u.mass()).abs() < 1e-12);
        assert!(u.lp_norm(0.5).is_err());
        assert_eq!(u.lp_norm(f64::INFINITY).unwrap(), 2.0);
    }

    #[test]
    fn second_moment_examples() {
        let u = unit_ball(33, 1.0);
        assert!((u.second_moment() - 4.0 * PI / 5.0).abs() < 1e-12);
        assert_eq!(unit_ball(33, 0.0).second_moment(), 0.0);
        let w = unit_ball(33, 1.0);
        let g2 = Arc::new(w.grid().scaled(1.7).unwrap());
        let stretched = DensityField::new(g2, w.values().to_vec()).unwrap();
        // fixed values on a grid stretched by μ: m2 scales by μ^{d+2}
        let ratio = stretched.second_moment() / w.second_moment();
        assert!((ratio - 1.7f64.powi(5)).abs() < 1e-10);
    }

    #[test]
    fn hls_profile_peak_and_monotonicity() {
        let g = Arc::new(RadialGrid::uniform(3, 200, 10.0).unwrap());
        let f = hls_extremizer_profile(g, 1.0, 1.0, 1.25).unwrap();
        assert!(f.is_non_increasing());
        assert!(f.values().windows(2).all(|w| w[1] < w[0]));
        assert!((f.linf_norm() - 1.0).abs() < 1e-2);
        let g = Arc::new(RadialGrid::uniform(3, 200, 10.0).unwrap());
        assert!(hls_extremizer_profile(g.clone(), 1.0, 0.0, 1.25).is_err());
        assert!(hls_extremizer_profile(g, 1.0, 1.0, 1.5).is_err());
    }

    #[test]
    fn rearrange_fixed_points() {
        let g = Arc::new(RadialGrid::uniform(3, 40, 1.0).unwrap());
        let dec: Vec<f64> = (0..40).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let u = DensityField::new(g.clone(), dec.clone()).unwrap();
        assert_eq!(u.rearrange_on_grid().values(), &dec[..]);
        assert_eq!(u.rearrange().values(), &dec[..]);
        let c = DensityField::new(g, vec![0.3; 40]).unwrap();
        assert_eq!(c.rearrange_on_grid().values(), c.values());
    }

    #[test]
    fn rearrange_outer_shell_becomes_centered_ball() {
        // brute-force distribution-function oracle: compare the volume of
        // every super-level set before and after
        let n = 30;
        let g = Arc::new(RadialGrid::uniform(3, n, 1.0).unwrap());
        let mut vals = vec![0.0; n];
        vals[n - 1] = 1.0;
        let u = DensityField::new(g.clone(), vals).unwrap();
        let r = u.rearrange();
        let v_out = g.volumes()[n - 1];
        let ball_radius = (3.0 * v_out / (4.0 * PI)).cbrt();
        assert_eq!(r.values()[0], 1.0);
        assert!(r.values()[1..].iter().all(|&x| x == 0.0));
        assert!((r.grid().edges()[1] - ball_radius).abs() < 1e-14);
        for level in [0.0, 0.25, 0.5, 0.999] {
            let before: f64 = (0..n)
                .filter(|&i| u.values()[i] > level)
                .map(|i| u.grid().volumes()[i])
                .sum();
            let after: f64 = (0..n)
                .filter(|&i| r.values()[i] > level)
                .map(|i| r.grid().volumes()[i])
                .sum();
            assert!((before - after).abs() < 1e-14 * before.max(1e-300), "{level}");
        }
        // on the original grid the ball is smeared into the first shells
        let p = u.rearrange_on_grid();
        assert!(p.is_non_increasing());
        assert!((p.mass() - u.mass()).abs() < 1e-15);
        assert_eq!(p.values()[0], 1.0);
    }

    #[test]
    fn scale_identity_and_mass() {
        let g = Arc::new(RadialGrid::uniform(3, 50, 2.0).unwrap());
        let u = DensityField::from_profile(g, |r| (-r * r).exp()).unwrap();
        let id = u.scale(1.0, 1.0).unwrap();
        assert_eq!(id.values(), u.values());
        assert!(id.grid().same_as(u.grid()));
        let (lam, mu) = (1.7, 0.6);
        let w = u.scale(lam, mu).unwrap();
        let expect = lam * mu.powi(-3) * u.mass();
        assert!(((w.mass() - expect) / expect).abs() < 1e-12);
        // mass-invariant scaling λ = μ^d keeps the L^1 norm (p = d(2-m)/(2s) = 1)
        let w = u.scale(mu.powi(3), mu).unwrap();
        assert!(((w.lp_norm(1.0).unwrap() - u.mass()) / u.mass()).abs() < 1e-12);
        assert!(u.scale(0.0, 1.0).is_err());
        assert!(u.scale(1.0, -1.0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let g = Arc::new(RadialGrid::uniform(3, 17, 3.0).unwrap());
        let u = DensityField::from_profile(g, |r| 1.0 / (1.0 + r)).unwrap();
        let mut buf = Vec::new();
        u.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("r_center,volume,value\n"));
        let back = DensityField::read_csv(&buf[..], 3).unwrap();
        assert_eq!(back.values(), u.values());
        for (a, b) in back.grid().edges().iter().zip(u.grid().edges()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(DensityField::read_csv(&buf[..], 4).is_err());
        assert!(DensityField::read_csv("r,v\n1,2\n".as_bytes(), 3).is_err());
    }
}
