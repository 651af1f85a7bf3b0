//! Geometry of trained quantizers: bin boundaries of scalar models, label
//! grids of two-dimensional ones, local orthogonality of the transforms and
//! normalized second moments of cells.

use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{NtcError, Result};
use crate::oracles::QuantizerDescription;
use crate::training::{quantize_indices, NtcModel};
use crate::transforms::MlpTransform;
use crate::vecvq::VqModel;

/// Upper limit on boundary crossings before a model is considered broken.
pub const MAX_CROSSINGS: usize = 10_000;
const BISECTION_TOL: f64 = 1e-9;
/// Points with an analysis Jacobian worse conditioned than this are skipped.
const MAX_CONDITION: f64 = 1e8;

fn bisect(f: impl Fn(f64) -> Result<f64>, mut a: f64, mut b: f64) -> Result<f64> {
    let fa = f(a)?;
    while b - a > BISECTION_TOL {
        let mid = 0.5 * (a + b);
        if (f(mid)? > 0.0) == (fa > 0.0) {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(0.5 * (a + b))
}

/// Scalar quantizer realized by a one-dimensional model on `[lo, hi]`.
///
/// `g_a` is scanned at `resolution` steps; every crossing of a level
/// `k + 1/2 + o` is refined by bisection. Non-monotone transforms produce
/// several boundaries for the same level, and each is kept.
pub fn extract_quantizer_1d(model: &NtcModel, range: [f64; 2], resolution: usize) -> Result<QuantizerDescription> {
    if model.source_dim() != 1 || model.latent_dim() != 1 {
        return Err(NtcError::dim("extract_quantizer_1d", "needs a scalar model"));
    }
    let [lo, hi] = range;
    if !(hi > lo) || resolution < 2 {
        return Err(NtcError::InvalidArgument("empty scan range".into()));
    }
    let o = model.offset[0];
    let lambda = model.lambda;
    let xs: Vec<f64> = (0..=resolution)
        .map(|j| lo + (hi - lo) * j as f64 / resolution as f64)
        .collect();
    let ys = model.analyze(&Tensor::new(vec![xs.len(), 1], xs.clone())?, lambda)?;
    let ks = quantize_indices(&ys, &[o]);
    let g = |x: f64| -> Result<f64> { Ok(model.g_a.apply_one(&[x], model.cond(lambda))?[0]) };

    let mut boundaries = Vec::new();
    for j in 0..resolution {
        let (ka, kb) = (ks[j], ks[j + 1]);
        if ka == kb {
            continue;
        }
        let mut found = Vec::new();
        for level in ka.min(kb)..ka.max(kb) {
            let t = level as f64 + 0.5 + o;
            found.push(bisect(|x| Ok(g(x)? - t), xs[j], xs[j + 1])?);
        }
        found.sort_by(f64::total_cmp);
        boundaries.extend(found);
        if boundaries.len() > MAX_CROSSINGS {
            return Err(NtcError::InvalidArgument(format!(
                "more than {MAX_CROSSINGS} boundary crossings"
            )));
        }
    }

    // Interval symbols from midpoints; neighbours with equal symbols merge.
    let mut edges: Vec<f64> = Vec::with_capacity(boundaries.len());
    let mut symbols_per_interval = vec![ks[0]];
    for (i, &b) in boundaries.iter().enumerate() {
        let right = boundaries.get(i + 1).copied().unwrap_or(hi.max(b + 1.0));
        let mid = if i + 1 < boundaries.len() { 0.5 * (b + right) } else { b.max(hi) };
        let k = if i + 1 < boundaries.len() {
            (g(mid)? - o).round_ties_even() as i64
        } else {
            ks[resolution]
        };
        let last = *symbols_per_interval.last().expect("non-empty");
        if k == last || edges.last().is_some_and(|&e| b <= e) {
            continue;
        }
        edges.push(b);
        symbols_per_interval.push(k);
    }

    let mut symbols: Vec<i64> = symbols_per_interval.clone();
    symbols.sort_unstable();
    symbols.dedup();
    let cell_of: HashMap<i64, usize> = symbols.iter().enumerate().map(|(i, &k)| (k, i)).collect();
    let table = model.pmf_tables(&model.offset)?.remove(0);
    let recon = model.decode_indices(&symbols, &model.offset, lambda)?;
    let desc = QuantizerDescription::OneD {
        boundaries: edges,
        interval_cells: symbols_per_interval.iter().map(|k| cell_of[k]).collect(),
        codevectors: recon.into_data(),
        pmf: symbols.iter().map(|&k| table.prob(k)).collect(),
        symbols: Some(symbols),
    };
    desc.validate()?;
    Ok(desc)
}

/// Scalar quantizer of a one-dimensional codebook on `[lo, hi]`: encoder
/// decision changes found on a grid of `resolution` steps and refined by
/// bisection. Only codevectors chosen somewhere in the range become cells.
pub fn vq_quantizer_1d(model: &VqModel, range: [f64; 2], resolution: usize) -> Result<QuantizerDescription> {
    if model.dim() != 1 {
        return Err(NtcError::dim("vq_quantizer_1d", "needs a scalar codebook"));
    }
    let [lo, hi] = range;
    if !(hi > lo) || resolution < 2 {
        return Err(NtcError::InvalidArgument("empty scan range".into()));
    }
    let xs: Vec<f64> = (0..=resolution)
        .map(|j| lo + (hi - lo) * j as f64 / resolution as f64)
        .collect();
    let idx = model.encode_batch(&Tensor::new(vec![xs.len(), 1], xs.clone())?);
    let mut boundaries = Vec::new();
    let mut interval_idx = vec![idx[0]];
    for j in 0..resolution {
        if idx[j] == idx[j + 1] {
            continue;
        }
        let (mut a, mut b) = (xs[j], xs[j + 1]);
        while b - a > BISECTION_TOL {
            let mid = 0.5 * (a + b);
            if model.encode(&[mid]) == idx[j] {
                a = mid;
            } else {
                b = mid;
            }
        }
        boundaries.push(0.5 * (a + b));
        interval_idx.push(idx[j + 1]);
    }
    let mut used = interval_idx.clone();
    used.sort_unstable();
    used.dedup();
    let cell_of: HashMap<usize, usize> = used.iter().enumerate().map(|(i, &k)| (k, i)).collect();
    let prior = crate::vecvq::prior_pmf(&model.logits);
    let desc = QuantizerDescription::OneD {
        boundaries,
        interval_cells: interval_idx.iter().map(|k| cell_of[k]).collect(),
        codevectors: used.iter().map(|&k| model.codebook.row(k)[0]).collect(),
        pmf: used.iter().map(|&k| prior.data()[k]).collect(),
        symbols: None,
    };
    desc.validate()?;
    Ok(desc)
}

/// Label grid of a two-dimensional codebook over `bounds`.
pub fn vq_partition_2d(model: &VqModel, bounds: [f64; 4], resolution: usize) -> Result<QuantizerDescription> {
    if model.dim() != 2 {
        return Err(NtcError::dim("vq_partition_2d", "needs a two-dimensional codebook"));
    }
    let idx = model.encode_batch(&pixel_centers(bounds, resolution)?);
    let mut used = idx.clone();
    used.sort_unstable();
    used.dedup();
    let cell_of: HashMap<usize, usize> = used.iter().enumerate().map(|(i, &k)| (k, i)).collect();
    let labels: Vec<usize> = idx.iter().map(|k| cell_of[k]).collect();
    let prior = crate::vecvq::prior_pmf(&model.logits);
    let desc = QuantizerDescription::TwoD {
        bounds,
        nx: resolution,
        ny: resolution,
        small_cells: count_small_cells(&labels, used.len()),
        labels,
        codevectors: used.iter().flat_map(|&k| model.codebook.row(k).to_vec()).collect(),
        pmf: used.iter().map(|&k| prior.data()[k]).collect(),
    };
    desc.validate()?;
    Ok(desc)
}

fn pixel_centers(bounds: [f64; 4], n: usize) -> Result<Tensor> {
    if !(bounds[1] > bounds[0] && bounds[3] > bounds[2]) || n == 0 {
        return Err(NtcError::InvalidArgument("empty rasterization bounds".into()));
    }
    let wx = (bounds[1] - bounds[0]) / n as f64;
    let wy = (bounds[3] - bounds[2]) / n as f64;
    let mut pts = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            pts.push(bounds[0] + (i as f64 + 0.5) * wx);
            pts.push(bounds[2] + (j as f64 + 0.5) * wy);
        }
    }
    Tensor::new(vec![n * n, 2], pts)
}

fn count_small_cells(labels: &[usize], cells: usize) -> usize {
    let mut counts = vec![0usize; cells];
    for &l in labels {
        counts[l] += 1;
    }
    let small = counts.iter().filter(|&&c| c < 4).count();
    if small > 0 {
        log::warn!("{small} cells cover fewer than 4 pixels; the grid is too coarse");
    }
    small
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OscillationReport {
    /// Boundary crossings per level; level `k` separates symbols `k` and
    /// `k + 1`.
    pub crossings: BTreeMap<i64, usize>,
    /// Levels crossed more than once.
    pub flagged: Vec<i64>,
}

/// Counts how often each level between adjacent symbols is crossed.
pub fn detect_bin_oscillation(desc: &QuantizerDescription) -> Result<OscillationReport> {
    let QuantizerDescription::OneD {
        interval_cells,
        symbols: Some(symbols),
        ..
    } = desc
    else {
        return Err(NtcError::InvalidArgument("needs a scalar lattice description".into()));
    };
    let mut report = OscillationReport::default();
    for w in interval_cells.windows(2) {
        let (a, b) = (symbols[w[0]], symbols[w[1]]);
        for level in a.min(b)..a.max(b) {
            *report.crossings.entry(level).or_default() += 1;
        }
    }
    report.flagged = report
        .crossings
        .iter()
        .filter(|(_, &c)| c > 1)
        .map(|(&l, _)| l)
        .collect();
    Ok(report)
}

/// Label grid of a two-dimensional model over `bounds = [x0, x1, y0, y1]`
/// at `resolution x resolution` pixel centers. Cells are ordered by their
/// index vectors.
pub fn extract_partition_2d(model: &NtcModel, bounds: [f64; 4], resolution: usize) -> Result<QuantizerDescription> {
    if model.source_dim() != 2 || model.latent_dim() != 2 {
        return Err(NtcError::dim("extract_partition_2d", "needs a two-dimensional model"));
    }
    let n = resolution;
    let pts = pixel_centers(bounds, n)?;
    let y = model.analyze(&pts, model.lambda)?;
    let k = quantize_indices(&y, &model.offset);
    let mut unique: Vec<[i64; 2]> = k.chunks(2).map(|c| [c[0], c[1]]).collect();
    unique.sort_unstable();
    unique.dedup();
    let id: HashMap<[i64; 2], usize> = unique.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let labels: Vec<usize> = k.chunks(2).map(|c| id[&[c[0], c[1]]]).collect();
    let small_cells = count_small_cells(&labels, unique.len());
    let flat: Vec<i64> = unique.iter().flatten().copied().collect();
    let recon = model.decode_indices(&flat, &model.offset, model.lambda)?;
    let tables = model.pmf_tables(&model.offset)?;
    let pmf = unique.iter().map(|c| tables[0].prob(c[0]) * tables[1].prob(c[1])).collect();
    let desc = QuantizerDescription::TwoD {
        bounds,
        nx: n,
        ny: n,
        labels,
        codevectors: recon.into_data(),
        pmf,
        small_cells,
    };
    desc.validate()?;
    Ok(desc)
}

/// Pixels with a differently labeled 4-neighbour.
pub fn boundary_pixels(desc: &QuantizerDescription) -> Option<Vec<bool>> {
    let QuantizerDescription::TwoD { nx, ny, labels, .. } = desc else {
        return None;
    };
    let (nx, ny) = (*nx, *ny);
    let at = |i: usize, j: usize| labels[j * nx + i];
    let mut out = vec![false; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let c = at(i, j);
            out[j * nx + i] = (i > 0 && at(i - 1, j) != c)
                || (i + 1 < nx && at(i + 1, j) != c)
                || (j > 0 && at(i, j - 1) != c)
                || (j + 1 < ny && at(i, j + 1) != c);
        }
    }
    Some(out)
}

/// Mean squared cosine between distinct columns of `j` (`dim x dim`,
/// row-major): 0 for orthogonal columns, 1 for parallel ones.
pub fn orthogonality_score(j: &[f64], dim: usize) -> f64 {
    if dim < 2 {
        return 0.0;
    }
    let col = |c: usize| (0..dim).map(move |r| j[r * dim + c]);
    let norms: Vec<f64> = (0..dim).map(|c| col(c).map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut energy = 0.0;
    for a in 0..dim {
        for b in 0..dim {
            if a != b {
                let dot: f64 = col(a).zip(col(b)).map(|(x, y)| x * y).sum();
                let cos = dot / (norms[a] * norms[b]);
                energy += cos * cos;
            }
        }
    }
    energy / (dim * (dim - 1)) as f64
}

/// Jacobians `d t(x) / d x` at each row of `points`, row-major
/// `[out x in]` per point.
pub fn jacobians(t: &MlpTransform, points: &Tensor, lambda: Option<f64>) -> Result<Vec<Vec<f64>>> {
    let (b, n, m) = (points.rows(), t.in_dim(), t.out_dim());
    if points.cols() != n {
        return Err(NtcError::dim("jacobians", "point dimension"));
    }
    let mut out = vec![vec![0.0; m * n]; b];
    for r in 0..m {
        let mut tape = Tape::new();
        let vars = t.bind(&mut tape, false);
        let x = tape.param(points.clone());
        let y = t.forward(&mut tape, &vars, x, lambda)?;
        let mut mask = vec![0.0; m];
        mask[r] = 1.0;
        let mv = tape.constant(Tensor::vector(mask));
        let sel = tape.mul(y, mv)?;
        let s = tape.sum(sel)?;
        let grads = tape.backward(s)?;
        let g = grads.get_or_zeros(x, points);
        for (i, jac) in out.iter_mut().enumerate() {
            jac[r * n..(r + 1) * n].copy_from_slice(g.row(i));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityScores {
    /// Scores of the synthesis Jacobian at `g_a(x)`.
    pub synthesis: Vec<f64>,
    /// Scores of the inverse analysis Jacobian at `x`.
    pub analysis: Vec<f64>,
    /// Points whose analysis Jacobian was too badly conditioned to invert.
    pub skipped: usize,
}

/// Orthogonality scores of both transforms at source points `points`.
pub fn jacobian_orthogonality(model: &NtcModel, points: &Tensor) -> Result<OrthogonalityScores> {
    let n = model.source_dim();
    if model.latent_dim() != n {
        return Err(NtcError::dim("jacobian_orthogonality", "needs equal source and latent dimensions"));
    }
    let cond = model.cond(model.lambda);
    let y = model.analyze(points, model.lambda)?;
    let js = jacobians(&model.g_s, &y, cond)?;
    let ja = jacobians(&model.g_a, points, cond)?;
    let mut scores = OrthogonalityScores {
        synthesis: js.iter().map(|j| orthogonality_score(j, n)).collect(),
        ..Default::default()
    };
    for j in ja {
        let mat = DMatrix::from_row_slice(n, n, &j);
        let sv = mat.clone().svd(false, false).singular_values;
        let (smax, smin) = (sv.max(), sv.min());
        let inverse = if smin > 0.0 && smax / smin <= MAX_CONDITION { mat.try_inverse() } else { None };
        match inverse {
            Some(inv) => {
                let flat: Vec<f64> = (0..n).flat_map(|r| (0..n).map(move |c| (r, c))).map(|(r, c)| inv[(r, c)]).collect();
                scores.analysis.push(orthogonality_score(&flat, n));
            }
            None => scores.skipped += 1,
        }
    }
    Ok(scores)
}

/// Scores of `count` matrices with independent standard normal entries.
pub fn random_matrix_scores(count: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let j: Vec<f64> = (0..dim * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            orthogonality_score(&j, dim)
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Normalized second moment `(1/M) V^(-2/M) E||x - c||^2` of a cell from
/// points uniformly covering it, its reconstruction `centroid` and its
/// volume.
pub fn cell_moment(points: &Tensor, centroid: &[f64], volume: f64) -> Result<f64> {
    let m = centroid.len();
    if m == 0 || points.cols() != m {
        return Err(NtcError::dim("cell_moment", "point/centroid dimension"));
    }
    if points.rows() < 1000 {
        return Err(NtcError::InvalidArgument("at least 1000 cell points are needed".into()));
    }
    if !(volume > 0.0) {
        return Err(NtcError::domain("cell_moment", "degenerate cell volume"));
    }
    let mean: f64 = points
        .data()
        .chunks(m)
        .map(|p| p.iter().zip(centroid).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum::<f64>()
        / points.rows() as f64;
    Ok(mean * volume.powf(-2.0 / m as f64) / m as f64)
}

/// Normalized second moments of the cells of a label grid, measured about
/// their codevectors with pixel centers as points and volume from pixel
/// counts. Cells with fewer than 1000 pixels get `None`.
pub fn partition_cell_moments(desc: &QuantizerDescription) -> Result<Vec<Option<f64>>> {
    let QuantizerDescription::TwoD {
        bounds,
        nx,
        ny,
        labels,
        codevectors,
        pmf,
        ..
    } = desc
    else {
        return Err(NtcError::InvalidArgument("needs a two-dimensional description".into()));
    };
    let wx = (bounds[1] - bounds[0]) / *nx as f64;
    let wy = (bounds[3] - bounds[2]) / *ny as f64;
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); pmf.len()];
    for (p, &l) in labels.iter().enumerate() {
        let (i, j) = (p % nx, p / nx);
        members[l].push(bounds[0] + (i as f64 + 0.5) * wx);
        members[l].push(bounds[2] + (j as f64 + 0.5) * wy);
    }
    members
        .into_iter()
        .enumerate()
        .map(|(c, pts)| {
            let count = pts.len() / 2;
            if count < 1000 {
                return Ok(None);
            }
            let t = Tensor::new(vec![count, 2], pts)?;
            cell_moment(&t, &codevectors[2 * c..2 * c + 2], count as f64 * wx * wy).map(Some)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sources::SourceSpec;
    use crate::training::{Architecture, Proxy};
    use rand::Rng;

    fn identity_model(dim: usize) -> NtcModel {
        let arch = Architecture {
            linear: true,
            ..Default::default()
        };
        let source = if dim == 1 { SourceSpec::Laplace } else { SourceSpec::banana() };
        NtcModel::init(&source, &arch, Proxy::Noise, 1.0, 0).unwrap()
    }

    fn uniform_box(n: usize, half: [f64; 2], seed: u64) -> Tensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let d: Vec<f64> = (0..2 * n)
            .map(|i| half[i % 2] * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        Tensor::new(vec![n, 2], d).unwrap()
    }

    #[test]
    fn identity_scalar_quantizer() {
        let m = identity_model(1);
        let desc = extract_quantizer_1d(&m, [-4.2, 4.2], 1000).unwrap();
        let QuantizerDescription::OneD {
            boundaries,
            codevectors,
            symbols,
            ..
        } = &desc
        else {
            unreachable!()
        };
        let want: Vec<f64> = (-4..4).map(|k| k as f64 + 0.5).collect();
        assert_eq!(boundaries.len(), want.len());
        for (b, w) in boundaries.iter().zip(&want) {
            assert!((b - w).abs() < 1e-8, "{b} vs {w}");
        }
        assert_eq!(symbols.as_ref().unwrap(), &(-4..=4).collect::<Vec<_>>());
        for (c, k) in codevectors.iter().zip(-4..=4) {
            assert!((c - k as f64).abs() < 1e-12);
        }
        assert!(detect_bin_oscillation(&desc).unwrap().flagged.is_empty());
    }

    #[test]
    fn identity_partition_is_unit_squares() {
        let m = identity_model(2);
        let desc = extract_partition_2d(&m, [-2.0, 2.0, -2.0, 2.0], 80).unwrap();
        let QuantizerDescription::TwoD { labels, codevectors, .. } = &desc else {
            unreachable!()
        };
        // Pixel (i, j) has center (-2 + (i + 1/2) / 20, ...), index round(.).
        for j in 0..80 {
            for i in 0..80 {
                let c = labels[j * 80 + i];
                let x = -2.0 + (i as f64 + 0.5) / 20.0;
                let y = -2.0 + (j as f64 + 0.5) / 20.0;
                assert_eq!(codevectors[2 * c], x.round());
                assert_eq!(codevectors[2 * c + 1], y.round());
            }
        }
        let moments = partition_cell_moments(&extract_partition_2d(&m, [-1.5, 1.5, -1.5, 1.5], 300).unwrap()).unwrap();
        // The central cell is a full unit square sampled on a 100 x 100 grid.
        let central: Vec<f64> = moments.iter().flatten().copied().collect();
        assert!(central.iter().any(|v| (v - 1.0 / 12.0).abs() < 1e-4), "{central:?}");
    }

    /// `g(x) = x - k (ramp(x - c1) - ramp(x - c2))` with softplus ramps of
    /// slope `w`: identity outside `[c1, c2]`, slope `1 - k` inside.
    fn wiggle(c1: f64, c2: f64, k: f64, w: f64) -> MlpTransform {
        let t = |shape: Vec<usize>, d: Vec<f64>| Tensor::new(shape, d).unwrap();
        MlpTransform {
            layers: vec![
                crate::transforms::Layer {
                    weight: t(vec![3, 1], vec![w, w, 1.0]),
                    bias: t(vec![3], vec![-w * c1, -w * c2, 40.0]),
                    activation: crate::transforms::Activation::Softplus,
                },
                crate::transforms::Layer {
                    weight: t(vec![1, 3], vec![-k / w, k / w, 1.0]),
                    bias: t(vec![1], vec![-40.0]),
                    activation: crate::transforms::Activation::None,
                },
            ],
            conditioning: None,
        }
    }

    #[test]
    fn constructed_wiggle_crossings() {
        let mut m = identity_model(1);
        // Rises through 1/2 at x = 0.5, falls back through it inside
        // [0.6, 0.8] (g(0.8) = 0), and rises through it again at x = 1.3.
        m.g_a = wiggle(0.6, 0.8, 4.0, 400.0);
        let d = extract_quantizer_1d(&m, [-3.0, 3.0], 600).unwrap();
        let r = detect_bin_oscillation(&d).unwrap();
        assert_eq!(r.crossings.get(&0), Some(&3));
        assert_eq!(r.crossings.get(&-1), Some(&1));
        assert_eq!(r.crossings.get(&1), Some(&1));
        assert_eq!(r.flagged, vec![0]);
        let QuantizerDescription::OneD { boundaries, interval_cells, symbols, .. } = &d else {
            unreachable!()
        };
        let syms = symbols.as_ref().unwrap();
        let seq: Vec<i64> = interval_cells.iter().map(|&c| syms[c]).collect();
        assert_eq!(seq, vec![-3, -2, -1, 0, 1, 0, 1, 2]);
        assert!((boundaries[3] - 0.5).abs() < 1e-6);
        assert!((boundaries[5] - 1.3).abs() < 1e-6);

        let mut shifted = identity_model(1);
        shifted.offset = vec![0.25];
        let d = extract_quantizer_1d(&shifted, [-3.0, 3.0], 500).unwrap();
        let QuantizerDescription::OneD { boundaries, .. } = d else { unreachable!() };
        assert!((boundaries[0] - (-2.25)).abs() < 1e-8);
        assert!(boundaries.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn codebook_quantizers() {
        let cb = Tensor::new(vec![3, 1], vec![-1.0, 0.0, 1.0]).unwrap();
        let vq = VqModel::new(cb, Tensor::zeros(&[3]), 4.0).unwrap();
        let d = vq_quantizer_1d(&vq, [-3.0, 3.0], 300).unwrap();
        let QuantizerDescription::OneD { boundaries, codevectors, .. } = &d else { unreachable!() };
        assert!((boundaries[0] + 0.5).abs() < 1e-8 && (boundaries[1] - 0.5).abs() < 1e-8);
        assert_eq!(codevectors, &vec![-1.0, 0.0, 1.0]);
        let cb2 = Tensor::new(vec![2, 2], vec![-1.0, 0.0, 1.0, 0.0]).unwrap();
        let vq2 = VqModel::new(cb2, Tensor::zeros(&[2]), 4.0).unwrap();
        let p = vq_partition_2d(&vq2, [-2.0, 2.0, -1.0, 1.0], 40).unwrap();
        let QuantizerDescription::TwoD { labels, .. } = &p else { unreachable!() };
        assert!(labels.iter().enumerate().all(|(i, &l)| l == usize::from(i % 40 >= 20)));
    }

    #[test]
    fn orthogonality_extremes() {
        assert!(orthogonality_score(&[2.0, 0.0, 0.0, 0.5], 2).abs() < 1e-15);
        let rot = [0.6, -0.8, 0.8, 0.6];
        assert!(orthogonality_score(&rot, 2).abs() < 1e-15);
        assert!((orthogonality_score(&[1.0, 1.0, 2.0, 2.0], 2) - 1.0).abs() < 1e-12);
        // Permuting columns leaves the score unchanged.
        let j = [1.0, 0.3, -0.2, 2.0];
        let swapped = [0.3, 1.0, 2.0, -0.2];
        assert!((orthogonality_score(&j, 2) - orthogonality_score(&swapped, 2)).abs() < 1e-15);
    }

    #[test]
    fn identity_jacobians() {
        let m = identity_model(2);
        let pts = uniform_box(50, [2.0, 2.0], 3);
        let s = jacobian_orthogonality(&m, &pts).unwrap();
        assert_eq!(s.skipped, 0);
        assert!(s.synthesis.iter().chain(&s.analysis).all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn square_and_rectangle_moments() {
        let sq = uniform_box(200_000, [0.5, 0.5], 11);
        let m1 = cell_moment(&sq, &[0.0, 0.0], 1.0).unwrap();
        assert!((m1 - 1.0 / 12.0).abs() < 1e-3, "{m1}");
        let big = Tensor::new(vec![200_000, 2], sq.data().iter().map(|v| 3.0 * v).collect()).unwrap();
        let m3 = cell_moment(&big, &[0.0, 0.0], 9.0).unwrap();
        assert!((m3 - m1).abs() < 1e-12);
        // 2 x 1 rectangle: E||x||^2 = (4 + 1) / 12, V = 2, so m = 5 / 48.
        let rect = uniform_box(200_000, [1.0, 0.5], 12);
        let m2 = cell_moment(&rect, &[0.0, 0.0], 2.0).unwrap();
        assert!((m2 - 5.0 / 48.0).abs() < 1e-3, "{m2}");
        assert!(cell_moment(&rect, &[0.0, 0.0], 0.0).is_err());
        assert!(cell_moment(&uniform_box(10, [1.0, 1.0], 0), &[0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn random_baseline_is_reproducible() {
        let a = random_matrix_scores(100, 2, 5);
        assert_eq!(a, random_matrix_scores(100, 2, 5));
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
