use nalgebra::{DMatrix, SymmetricEigen};

use crate::autodiff::Tensor;
use crate::error::{NtcError, Result};

/// Eigenvalues below this fraction of the largest count as zero.
const RANK_TOLERANCE: f64 = 1e-12;

/// Sample covariance eigenbasis of `[n x N]` samples.
///
/// Returns `Q` (`[N x N]`, orthonormal eigenvectors as columns, eigenvalues
/// descending, each column's largest-magnitude entry positive) and the
/// eigenvalues.
pub fn klt_from_samples(samples: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    if samples.shape().len() != 2 {
        return Err(NtcError::dim("klt_from_samples", format!("{:?}", samples.shape())));
    }
    let (n, dim) = (samples.shape()[0], samples.shape()[1]);
    if n < dim + 1 {
        return Err(NtcError::InvalidArgument(format!(
            "{n} samples are too few for a {dim}-d covariance"
        )));
    }
    let cov = sample_covariance(samples);
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(dim, dim, &cov));
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let top = values[0].max(0.0);
    let rank = values.iter().filter(|&&v| v > RANK_TOLERANCE * top && v > 0.0).count();
    if rank < dim {
        return Err(NtcError::DegenerateCovariance { rank, dim });
    }
    let mut q = vec![0.0; dim * dim];
    for (col, &i) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        let mut pivot = 0;
        for r in 0..dim {
            if v[r].abs() > v[pivot].abs() {
                pivot = r;
            }
        }
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..dim {
            q[r * dim + col] = sign * v[r];
        }
    }
    Ok((Tensor::new(vec![dim, dim], q)?, values))
}

/// Unbiased sample covariance, row-major `[N x N]`.
pub fn sample_covariance(samples: &Tensor) -> Vec<f64> {
    let (n, dim) = (samples.shape()[0], samples.shape()[1]);
    let mut mean = vec![0.0; dim];
    for row in samples.data().chunks(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; dim * dim];
    for row in samples.data().chunks(dim) {
        for i in 0..dim {
            for j in 0..dim {
                cov[i * dim + j] += (row[i] - mean[i]) * (row[j] - mean[j]);
            }
        }
    }
    for c in cov.iter_mut() {
        *c /= (n - 1) as f64;
    }
    cov
}
