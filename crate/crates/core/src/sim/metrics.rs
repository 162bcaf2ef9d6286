//! Agreement and estimation-error metrics for simulation studies.

use nalgebra::DMatrix;

use crate::error::{Result, ScedError};
use crate::model::Partition;

/// Fraction of index pairs on which two partitions agree (both together or
/// both apart).
pub fn rand_index(a: &Partition, b: &Partition) -> Result<f64> {
    if a.n() != b.n() {
        return Err(ScedError::LengthMismatch { left: a.n(), right: b.n() });
    }
    let n = a.n();
    if n < 2 {
        return Ok(1.0);
    }
    let mut table = vec![0u64; a.k() * b.k()];
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        table[x * b.k() + y] += 1;
    }
    let pairs = |m: u64| m * m.saturating_sub(1) / 2;
    let both: u64 = table.iter().map(|&m| pairs(m)).sum();
    let rows: u64 = a.sizes().iter().map(|&m| pairs(m as u64)).sum();
    let cols: u64 = b.sizes().iter().map(|&m| pairs(m as u64)).sum();
    let total = pairs(n as u64);
    // agreements = pairs together in both + pairs apart in both
    let agree = total + 2 * both - rows - cols;
    Ok(agree as f64 / total as f64)
}

/// √(‖estimate − truth‖² / len).
pub fn rse(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(ScedError::LengthMismatch { left: estimate.len(), right: truth.len() });
    }
    if truth.is_empty() {
        return Err(ScedError::InvalidInput("rse of an empty vector".into()));
    }
    let ss: f64 = estimate.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((ss / truth.len() as f64).sqrt())
}

/// Minimum-cost perfect matching of a square cost matrix. Returns `assign`
/// with row i matched to column `assign[i]`.
pub fn hungarian(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "cost matrix must be square");
    // potentials u (rows), v (cols); way/col_row indexed from 1 with 0 as the virtual column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        col_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if col_row[j] > 0 {
            assign[col_row[j] - 1] = j - 1;
        }
    }
    assign
}

/// For each true cluster, the estimated cluster matched to it by minimum
/// total squared distance between means.
pub fn align_means(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<Vec<usize>> {
    if estimate.shape() != truth.shape() {
        return Err(ScedError::LengthMismatch { left: estimate.len(), right: truth.len() });
    }
    let k = truth.nrows();
    let cost = DMatrix::from_fn(k, k, |t, e| (truth.row(t) - estimate.row(e)).norm_squared());
    Ok(hungarian(&cost))
}

/// RSE of all cluster means after alignment to the truth.
pub fn aligned_mean_rse(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    let perm = align_means(estimate, truth)?;
    let mut est = Vec::with_capacity(truth.len());
    let mut tru = Vec::with_capacity(truth.len());
    for (t, &e) in perm.iter().enumerate() {
        est.extend(estimate.row(e).iter());
        tru.extend(truth.row(t).iter());
    }
    rse(&est, &tru)
}

/// RSE over the upper triangle (diagonal included) of a symmetric matrix.
pub fn variance_rse(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    if estimate.shape() != truth.shape() || !truth.is_square() {
        return Err(ScedError::LengthMismatch { left: estimate.len(), right: truth.len() });
    }
    let p = truth.nrows();
    let mut est = Vec::with_capacity(p * (p + 1) / 2);
    let mut tru = Vec::with_capacity(p * (p + 1) / 2);
    for i in 0..p {
        for j in i..p {
            est.push(estimate[(i, j)]);
            tru.push(truth[(i, j)]);
        }
    }
    rse(&est, &tru)
}
