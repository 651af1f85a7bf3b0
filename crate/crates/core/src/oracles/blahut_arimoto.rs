use serde::{Deserialize, Serialize};

use super::RdPoint;
use crate::autodiff::{matmul_nt_raw, matmul_raw};
use crate::error::{NtcError, Result};
use crate::sources::SourceSpec;

/// A source discretized on a regular grid (shared by source and
/// reproduction alphabets). Two-dimensional grids are stored row-major with
/// the first coordinate varying fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaGrid {
    /// Grid coordinates along each axis (one axis for scalar sources).
    pub axes: Vec<Vec<f64>>,
    pub pmf: Vec<f64>,
    /// Density mass outside the grid before renormalization.
    pub truncated_mass: f64,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Grid points with less probability than this are dropped: their
/// reproduction terms only loosen the convergence bound.
const PMF_FLOOR: f64 = 1e-12;

/// Normalized grid pmf and the mass lost to truncation and to `PMF_FLOOR`.
fn normalize_grid(raw: &[f64], cell: f64) -> (Vec<f64>, f64) {
    let total: f64 = raw.iter().sum();
    let mut dropped = 0.0;
    let mut pmf: Vec<f64> = raw
        .iter()
        .map(|v| {
            let p = v / total;
            if p < PMF_FLOOR {
                dropped += p;
                0.0
            } else {
                p
            }
        })
        .collect();
    let kept = 1.0 - dropped;
    for p in pmf.iter_mut() {
        *p /= kept;
    }
    (pmf, (1.0 - total * cell).abs() + dropped)
}

impl BaGrid {
    /// Default grids: 2048 points on `[-12, 12]` for the Laplace source and
    /// 128 x 128 on `[-4.5, 4.5] x [-2, 8]` for the banana.
    pub fn for_source(source: &SourceSpec) -> Result<Self> {
        match source {
            SourceSpec::Laplace => Self::from_density_1d(|x| 0.5 * (-x.abs()).exp(), -12.0, 12.0, 2048),
            SourceSpec::Banana { .. } => {
                let s = *source;
                Self::from_density_2d(move |x, y| s.density(&[x, y]).unwrap_or(0.0), [-4.5, 4.5, -2.0, 8.0], 128)
            }
        }
    }

    /// Grid pmf proportional to `density` at the grid points.
    pub fn from_density_1d(density: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n < 2 || !(hi > lo) {
            return Err(NtcError::InvalidArgument("degenerate grid".into()));
        }
        let axis = linspace(lo, hi, n);
        let h = (hi - lo) / (n - 1) as f64;
        let raw: Vec<f64> = axis.iter().map(|&x| density(x)).collect();
        let (pmf, truncated_mass) = normalize_grid(&raw, h);
        Ok(BaGrid {
            axes: vec![axis],
            pmf,
            truncated_mass,
        })
    }

    pub fn from_density_2d(density: impl Fn(f64, f64) -> f64, bounds: [f64; 4], n: usize) -> Result<Self> {
        if n < 2 || !(bounds[1] > bounds[0] && bounds[3] > bounds[2]) {
            return Err(NtcError::InvalidArgument("degenerate grid".into()));
        }
        let ax = linspace(bounds[0], bounds[1], n);
        let ay = linspace(bounds[2], bounds[3], n);
        let cell = (ax[1] - ax[0]) * (ay[1] - ay[0]);
        let mut raw = Vec::with_capacity(n * n);
        for &y in &ay {
            for &x in &ax {
                raw.push(density(x, y));
            }
        }
        let (pmf, truncated_mass) = normalize_grid(&raw, cell);
        Ok(BaGrid {
            axes: vec![ax, ay],
            pmf,
            truncated_mass,
        })
    }

    pub fn variance(&self) -> f64 {
        let mut total = 0.0;
        match self.axes.len() {
            1 => {
                let a = &self.axes[0];
                let m: f64 = a.iter().zip(&self.pmf).map(|(x, p)| x * p).sum();
                total += a.iter().zip(&self.pmf).map(|(x, p)| p * (x - m) * (x - m)).sum::<f64>();
            }
            _ => {
                let (ax, ay) = (&self.axes[0], &self.axes[1]);
                let n = ax.len();
                let (mut mx, mut my) = (0.0, 0.0);
                for (idx, p) in self.pmf.iter().enumerate() {
                    mx += p * ax[idx % n];
                    my += p * ay[idx / n];
                }
                for (idx, p) in self.pmf.iter().enumerate() {
                    total += p * ((ax[idx % n] - mx).powi(2) + (ay[idx / n] - my).powi(2));
                }
            }
        }
        total
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaConfig {
    pub max_iterations: usize,
    /// Stop when the bound gap (nats) falls below this. The gap bounds how far
    /// the reported Lagrangian is above the optimum of the discretized source.
    pub tolerance: f64,
}

impl Default for BaConfig {
    fn default() -> Self {
        BaConfig {
            max_iterations: 100_000,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaResult {
    pub point: RdPoint,
    pub iterations: usize,
    pub gap: f64,
    pub truncated_mass: f64,
}

/// Separable Gaussian kernel `exp(-s (x - y)^2)` per axis. Entries below
/// `KERNEL_FLOOR` are skipped, which makes each axis banded.
struct Kernel {
    mats: Vec<Vec<f64>>,
    sizes: Vec<usize>,
    bands: Vec<usize>,
}

const KERNEL_FLOOR: f64 = 1e-40;

/// Source points whose partition value `Z(x)` underflows below this are
/// unreachable by the reproduction pmf and are dropped from the iteration.
const Z_FLOOR: f64 = 1e-250;

impl Kernel {
    fn new(axes: &[Vec<f64>], s: f64) -> Self {
        Self::with_entries(axes, |d| (-s * d * d).exp(), s)
    }

    fn with_entries(axes: &[Vec<f64>], f: impl Fn(f64) -> f64, s: f64) -> Self {
        let mats = axes
            .iter()
            .map(|a| {
                let n = a.len();
                let mut k = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        k[i * n + j] = f(a[i] - a[j]);
                    }
                }
                k
            })
            .collect();
        // Regular grids: the kernel depends on |i - j| only.
        let bands = axes
            .iter()
            .map(|a| {
                let n = a.len();
                let h = if n > 1 { a[1] - a[0] } else { 1.0 };
                (0..n).find(|&w| (-s * (w as f64 * h).powi(2)).exp() < KERNEL_FLOOR).unwrap_or(n)
            })
            .collect();
        Kernel {
            mats,
            sizes: axes.iter().map(|a| a.len()).collect(),
            bands,
        }
    }

    /// `out[r][i] = sum_j K[i][j] v[r][j]` over the band, for `rows` rows of
    /// length `n` laid out with `stride` between row elements.
    fn apply_axis(&self, axis: usize, v: &[f64], out: &mut [f64], rows: usize, row_step: usize, stride: usize) {
        let n = self.sizes[axis];
        let w = self.bands[axis];
        let k = &self.mats[axis];
        for r in 0..rows {
            let base = r * row_step;
            for i in 0..n {
                let lo = i.saturating_sub(w);
                let hi = (i + w + 1).min(n);
                let row = &k[i * n..(i + 1) * n];
                let mut acc = 0.0;
                for j in lo..hi {
                    acc += row[j] * v[base + j * stride];
                }
                out[base + i * stride] = acc;
            }
        }
    }

    /// `out_i = sum_j K_ij v_j` (the kernel is symmetric).
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        match self.sizes.len() {
            1 => self.apply_axis(0, v, &mut out, 1, 0, 1),
            _ => {
                let (nx, ny) = (self.sizes[0], self.sizes[1]);
                // v is [ny x nx]: rows along x, then columns along y.
                let mut t = vec![0.0; v.len()];
                self.apply_axis(0, v, &mut t, ny, nx, 1);
                self.apply_axis(1, &t, &mut out, nx, 1, nx);
            }
        }
        out
    }
}

/// One Blahut-Arimoto update of the reproduction pmf `r`. Returns the
/// updated pmf and the bound gap `max_y ln c(y) - sum_y r(y) ln c(y)` (nats)
/// at `r`.
/// Reachable reproduction points keep at least this fraction of the largest
/// mass. Without it, points whose mass has collapsed to ~1e-80 take
/// thousands of iterations to recover once they become useful, which
/// stalls the bound gap on fine two-dimensional grids.
const R_FLOOR: f64 = 1e-9;

fn ba_step(kernel: &Kernel, p: &[f64], r: &[f64]) -> (Vec<f64>, f64) {
    let z = kernel.apply(r);
    let ratio: Vec<f64> = p
        .iter()
        .zip(&z)
        .map(|(pi, zi)| if *pi > 0.0 && *zi > Z_FLOOR { pi / zi } else { 0.0 })
        .collect();
    let c = kernel.apply(&ratio);
    let mut max_log = f64::NEG_INFINITY;
    let mut avg_log = 0.0;
    for (rj, cj) in r.iter().zip(&c) {
        let l = cj.ln();
        max_log = max_log.max(l);
        if *rj > 0.0 {
            avg_log += rj * l;
        }
    }
    let mut next: Vec<f64> = r.iter().zip(&c).map(|(rj, cj)| rj * cj).collect();
    let top = next.iter().cloned().fold(0.0, f64::max);
    for (v, cj) in next.iter_mut().zip(&c) {
        if *cj > 0.0 {
            *v = v.max(R_FLOOR * top);
        }
    }
    let total: f64 = next.iter().sum();
    for v in next.iter_mut() {
        *v /= total;
    }
    (next, max_log - avg_log)
}

/// Rate-distortion point of the discretized source at slope `lambda`
/// (bits convention: minimizes `I + lambda * D` with `I` in bits). Stops once
/// the bound gap falls below `config.tolerance`.
pub fn blahut_arimoto(grid: &BaGrid, lambda: f64, config: &BaConfig) -> Result<BaResult> {
    if !(lambda > 0.0) {
        return Err(NtcError::InvalidArgument(format!("lambda {lambda}")));
    }
    let s = lambda * std::f64::consts::LN_2;
    let kernel = Kernel::new(&grid.axes, s);
    let p = &grid.pmf;
    let mut r = p.clone();
    let mut gap = f64::INFINITY;
    let mut iterations = 0;
    while iterations < config.max_iterations {
        let (next, g) = ba_step(&kernel, p, &r);
        iterations += 1;
        gap = g;
        if gap < config.tolerance {
            break;
        }
        r = next;
    }
    if !(gap < config.tolerance) {
        return Err(NtcError::NoConvergence { iterations, gap });
    }
    let (rate, distortion, dropped) = rate_and_distortion(grid, &kernel, &r, s);
    let mut point = RdPoint::exact(rate, distortion, lambda, "blahut_arimoto");
    point.lagrangian_se = 0.0;
    Ok(BaResult {
        point,
        iterations,
        gap,
        truncated_mass: grid.truncated_mass + dropped,
    })
}

/// Mutual information (bits) and distortion of the channel
/// `q(y|x) = r(y) exp(-s d(x,y)) / Z(x)`, plus the source mass dropped for
/// an underflowing `Z(x)`.
fn rate_and_distortion(grid: &BaGrid, kernel: &Kernel, r: &[f64], s: f64) -> (f64, f64, f64) {
    let z = kernel.apply(r);
    // E[d] = sum_x p(x) sum_y r(y) K(x,y) d(x,y) / Z(x); the kernel-times-d
    // sum is taken axis by axis.
    let kd = Kernel::with_entries(&grid.axes, |d| d * d * (-s * d * d).exp(), s);
    let numer = match grid.axes.len() {
        1 => kd.apply(r),
        _ => {
            let (nx, ny) = (kernel.sizes[0], kernel.sizes[1]);
            // d = dx^2 + dy^2: (Ky * R * KDx^T) + (KDy * R * Kx^T)
            let a = matmul_nt_raw(r, &kd.mats[0], ny, nx, nx);
            let a = matmul_raw(&kernel.mats[1], &a, ny, ny, nx);
            let b = matmul_nt_raw(r, &kernel.mats[0], ny, nx, nx);
            let b = matmul_raw(&kd.mats[1], &b, ny, ny, nx);
            a.iter().zip(&b).map(|(u, v)| u + v).collect()
        }
    };
    let mut dist = 0.0;
    let mut neg_log_z = 0.0;
    let mut dropped = 0.0;
    for ((pi, zi), ni) in grid.pmf.iter().zip(&z).zip(&numer) {
        if *pi > 0.0 && *zi > Z_FLOOR {
            dist += pi * ni / zi;
            neg_log_z -= pi * zi.ln();
        } else {
            dropped += pi;
        }
    }
    // I = -s D - E log Z (nats)
    let rate_nats = (neg_log_z - s * dist).max(0.0);
    (rate_nats / std::f64::consts::LN_2, dist, dropped)
}

/// Runs [`blahut_arimoto`] for each slope.
pub fn blahut_arimoto_sweep(grid: &BaGrid, lambdas: &[f64], config: &BaConfig) -> Result<Vec<BaResult>> {
    lambdas.iter().map(|&l| blahut_arimoto(grid, l, config)).collect()
}

/// Rate of the piecewise-linear interpolant through `points` (sorted
/// internally by distortion) at distortion `d`. Chords of a convex curve lie
/// above it, so this overestimates the true function between points.
/// Returns `None` outside the covered distortion range.
pub fn interpolate_rate_at(points: &[RdPoint], d: f64) -> Option<f64> {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.distortion, p.rate)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts.is_empty() || d < pts[0].0 || d > pts[pts.len() - 1].0 {
        return None;
    }
    for w in pts.windows(2) {
        let ((d0, r0), (d1, r1)) = (w[0], w[1]);
        if d >= d0 && d <= d1 {
            if d1 == d0 {
                return Some(r0.min(r1));
            }
            let t = (d - d0) / (d1 - d0);
            return Some(r0 + t * (r1 - r0));
        }
    }
    Some(pts[0].1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_matches_closed_form() {
        let g = BaGrid::from_density_1d(|x| (-0.5 * x * x).exp(), -8.0, 8.0, 1024).unwrap();
        // slope for D = 1/4 is 2 nats per unit distortion
        let lambda = 2.0 / std::f64::consts::LN_2;
        let r = blahut_arimoto(&g, lambda, &BaConfig::default()).unwrap();
        let expected = 0.5 * (g.variance() / r.point.distortion).log2();
        assert!((r.point.rate - expected).abs() < 0.02, "{:?} vs {expected}", r.point);
        assert!((r.point.distortion - 0.25).abs() < 0.01);
    }

    #[test]
    fn tiny_slope_gives_zero_rate() {
        let g = BaGrid::from_density_1d(|x| (-x.abs()).exp(), -12.0, 12.0, 256).unwrap();
        let r = blahut_arimoto(&g, 0.05, &BaConfig::default()).unwrap();
        assert!(r.point.rate < 1e-3);
        assert!((r.point.distortion - g.variance()).abs() < 1e-2);
    }

    #[test]
    fn non_convergence_is_reported() {
        let g = BaGrid::from_density_1d(|x| (-x.abs()).exp(), -12.0, 12.0, 256).unwrap();
        let cfg = BaConfig {
            max_iterations: 2,
            tolerance: 1e-12,
        };
        assert!(matches!(
            blahut_arimoto(&g, 100.0, &cfg),
            Err(NtcError::NoConvergence { iterations: 2, .. })
        ));
    }

    #[test]
    fn banded_kernel_matches_dense_products() {
        let axes = vec![linspace(-3.0, 3.0, 9), linspace(-2.0, 2.0, 7)];
        let k = Kernel::new(&axes, 40.0);
        assert!(k.bands[0] < 9 && k.bands[1] < 7);
        let v: Vec<f64> = (0..63).map(|i| ((i * 37) % 11) as f64 + 0.5).collect();
        let t = matmul_nt_raw(&v, &k.mats[0], 7, 9, 9);
        let dense = matmul_raw(&k.mats[1], &t, 7, 7, 9);
        for (a, b) in k.apply(&v).iter().zip(&dense) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300), "{a} vs {b}");
        }
        let k1 = Kernel::new(&axes[..1], 40.0);
        let dense1 = matmul_raw(&k1.mats[0], &v[..9], 9, 9, 1);
        for (a, b) in k1.apply(&v[..9]).iter().zip(&dense1) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300));
        }
    }

    #[test]
    fn chord_interpolation() {
        let pts = vec![
            RdPoint::exact(2.0, 0.1, 1.0, ""),
            RdPoint::exact(0.0, 1.0, 1.0, ""),
        ];
        assert!((interpolate_rate_at(&pts, 0.55).unwrap() - 1.0).abs() < 1e-12);
        assert!(interpolate_rate_at(&pts, 2.0).is_none());
    }
}
