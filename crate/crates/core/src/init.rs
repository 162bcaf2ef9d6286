//! Initialization: k-means seeding followed by alternating Mahalanobis
//! reassignment and mean/pooled-variance updates, for every candidate
//! cluster count ℓ ∈ {2, …, k̄}.

use nalgebra::DMatrix;
use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Result, ScedError};
use crate::linalg::{self, CholeskyMetric};
use crate::model::{Dataset, Partition};
use crate::rng;

/// One refined initial clustering for a given ℓ.
#[derive(Debug, Clone, PartialEq)]
pub struct InitEntry {
    pub ell: usize,
    pub partition: Partition,
    pub means: DMatrix<f64>,
    pub pooled_var: DMatrix<f64>,
    pub within_ss: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl InitEntry {
    /// The subject-level means βᵢ = μ_{label(i)} as an n×p matrix.
    pub fn beta(&self) -> DMatrix<f64> {
        let n = self.partition.n();
        let p = self.means.ncols();
        let mut b = DMatrix::zeros(n, p);
        for (i, &l) in self.partition.labels().iter().enumerate() {
            b.set_row(i, &self.means.row(l));
        }
        b
    }
}

/// Refined initial clusterings for a contiguous range of ℓ.
#[derive(Debug, Clone, Default)]
pub struct InitResult {
    pub entries: Vec<InitEntry>,
}

impl InitResult {
    pub fn get(&self, ell: usize) -> Option<&InitEntry> {
        self.entries.iter().find(|e| e.ell == ell)
    }
}

/// k̄ = ⌊√(n / ln n)⌋.
pub fn kbar(n: usize) -> Result<usize> {
    if n < 3 {
        return Err(ScedError::TooFewPoints(n));
    }
    let nf = n as f64;
    let k = (nf / nf.ln()).sqrt().floor() as usize;
    if k < 2 {
        return Err(ScedError::TooFewPoints(n));
    }
    Ok(k)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// ½ Σᵢ ‖Xᵢ − μ_{label(i)}‖².
pub fn within_ss(data: &Dataset, partition: &Partition, means: &DMatrix<f64>) -> f64 {
    let p = data.p();
    let mut mu = vec![0.0; p];
    let mut total = 0.0;
    for (i, x) in data.rows().enumerate() {
        let c = partition.label(i);
        for (j, m) in mu.iter_mut().enumerate() {
            *m = means[(c, j)];
        }
        total += sq_dist(x, &mu);
    }
    0.5 * total
}

/// Row c is the arithmetic mean of the points labelled c.
pub fn cluster_means(data: &Dataset, partition: &Partition) -> Result<DMatrix<f64>> {
    if partition.n() != data.n() {
        return Err(ScedError::LengthMismatch { left: partition.n(), right: data.n() });
    }
    let (k, p) = (partition.k(), data.p());
    let mut sums = DMatrix::zeros(k, p);
    let mut counts = vec![0usize; k];
    for (i, x) in data.rows().enumerate() {
        let c = partition.label(i);
        counts[c] += 1;
        for (j, v) in x.iter().enumerate() {
            sums[(c, j)] += v;
        }
    }
    for (c, &cnt) in counts.iter().enumerate() {
        if cnt == 0 {
            return Err(ScedError::EmptyCluster(c));
        }
        for j in 0..p {
            sums[(c, j)] /= cnt as f64;
        }
    }
    Ok(sums)
}

/// (1/n) Σᵢ (Xᵢ − μ_{c(i)})(Xᵢ − μ_{c(i)})ᵀ without the singularity check.
pub fn residual_outer_mean(data: &Dataset, partition: &Partition, means: &DMatrix<f64>) -> DMatrix<f64> {
    let p = data.p();
    let mut out = DMatrix::zeros(p, p);
    let mut r = vec![0.0; p];
    for (i, x) in data.rows().enumerate() {
        let c = partition.label(i);
        for j in 0..p {
            r[j] = x[j] - means[(c, j)];
        }
        linalg::add_outer(&mut out, &r, 1.0);
    }
    out / data.n() as f64
}

fn is_singular(m: &DMatrix<f64>) -> bool {
    let eig = nalgebra::SymmetricEigen::new(linalg::symmetrize(m));
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    !(max > 0.0) || min <= 1e-12 * max.max(1.0)
}

pub fn pooled_within_variance(
    data: &Dataset,
    partition: &Partition,
    means: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let v = residual_outer_mean(data, partition, means);
    if is_singular(&v) {
        return Err(ScedError::SingularPooledVariance { last: None });
    }
    Ok(v)
}

/// label(i) = argmin_c (Xᵢ − μ_c)ᵀ V⁻¹ (Xᵢ − μ_c); ties go to the lowest index.
pub fn mahalanobis_reassign(data: &Dataset, means: &DMatrix<f64>, pooled_var: &DMatrix<f64>) -> Result<Partition> {
    let metric = CholeskyMetric::new(pooled_var).map_err(|_| ScedError::SingularPooledVariance { last: None })?;
    let k = means.nrows();
    let rows: Vec<Vec<f64>> = (0..k).map(|c| means.row(c).iter().copied().collect()).collect();
    let mut work = vec![0.0; data.p()];
    let labels = data
        .rows()
        .map(|x| {
            let mut best = (0, f64::INFINITY);
            for (c, mu) in rows.iter().enumerate() {
                let d = metric.distance_sq(x, mu, &mut work);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best.0
        })
        .collect();
    Partition::new(labels, k)
}

fn kmeans_pp_seed(data: &Dataset, ell: usize, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    let n = data.n();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(ell);
    centers.push(data.row(rng.random_range(0..n)).to_vec());
    let mut d2: Vec<f64> = data.rows().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < ell {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = data.row(idx).to_vec();
        for (i, x) in data.rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, &c));
        }
        centers.push(c);
    }
    centers
}

fn assign_nearest(data: &Dataset, centers: &[Vec<f64>]) -> Vec<usize> {
    data.rows()
        .map(|x| {
            let mut best = (0, f64::INFINITY);
            for (c, mu) in centers.iter().enumerate() {
                let d = sq_dist(x, mu);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best.0
        })
        .collect()
}

/// Lloyd iterations from one seeding; returns (labels, objective).
fn lloyd(data: &Dataset, mut centers: Vec<Vec<f64>>, max_iter: usize) -> (Vec<usize>, f64) {
    let ell = centers.len();
    let p = data.p();
    let mut labels = assign_nearest(data, &centers);
    for _ in 0..max_iter {
        // update centers, repairing empties with the farthest point
        let mut sums = vec![vec![0.0; p]; ell];
        let mut counts = vec![0usize; ell];
        for (i, x) in data.rows().enumerate() {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i]].iter_mut().zip(x) {
                *s += v;
            }
        }
        for c in 0..ell {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        while let Some(empty) = counts.iter().position(|&c| c == 0) {
            let (far, _) = data
                .rows()
                .enumerate()
                .filter(|(i, _)| counts[labels[*i]] > 1)
                .map(|(i, x)| (i, sq_dist(x, &centers[labels[i]])))
                .fold((usize::MAX, -1.0), |a, b| if b.1 > a.1 { b } else { a });
            if far == usize::MAX {
                break;
            }
            counts[labels[far]] -= 1;
            labels[far] = empty;
            counts[empty] = 1;
            centers[empty] = data.row(far).to_vec();
        }
        let next = assign_nearest(data, &centers);
        if next == labels {
            break;
        }
        labels = next;
    }
    let obj = 0.5
        * data
            .rows()
            .enumerate()
            .map(|(i, x)| sq_dist(x, &centers[labels[i]]))
            .sum::<f64>();
    (labels, obj)
}

/// k-means with distance-weighted seeding; best of `restarts` runs by the
/// within-cluster sum of squares.
pub fn kmeans(data: &Dataset, ell: usize, seed: u64, restarts: usize) -> Result<Partition> {
    if ell == 0 || ell > data.n() {
        return Err(ScedError::InvalidInput(format!("k-means needs 1 <= l <= n, got l = {ell}")));
    }
    let best = (0..restarts.max(1))
        .map(|r| {
            let mut g = rng::stream(seed, &[0x6b6d, ell as u64, r as u64]);
            let centers = kmeans_pp_seed(data, ell, &mut g);
            lloyd(data, centers, 300)
        })
        .fold(None::<(Vec<usize>, f64)>, |acc, cur| match acc {
            Some(a) if a.1 <= cur.1 => Some(a),
            _ => Some(cur),
        })
        .expect("at least one restart");
    Partition::new(best.0, ell)
}

/// Move the point with the largest own-cluster Mahalanobis distance into
/// each empty cluster.
fn repair_empty(data: &Dataset, partition: &mut Partition, means: &DMatrix<f64>, metric: &CholeskyMetric) {
    let p = data.p();
    let mut work = vec![0.0; p];
    let mut mu = vec![0.0; p];
    while let Some(empty) = partition.first_empty() {
        let sizes = partition.sizes();
        let mut best = (usize::MAX, -1.0);
        for (i, x) in data.rows().enumerate() {
            let c = partition.label(i);
            if sizes[c] <= 1 {
                continue;
            }
            for (j, m) in mu.iter_mut().enumerate() {
                *m = means[(c, j)];
            }
            let d = metric.distance_sq(x, &mu, &mut work);
            if d > best.1 {
                best = (i, d);
            }
        }
        if best.0 == usize::MAX {
            return;
        }
        partition.set_label(best.0, empty);
    }
}

/// Alternate Mahalanobis reassignment with mean and pooled-variance updates
/// from a starting partition until the partition is a fixpoint, the
/// within-SS stalls, or `max_iter` sweeps have run.
pub fn refine_from(data: &Dataset, start: Partition, max_iter: usize) -> Result<InitEntry> {
    let ell = start.k();
    let mut partition = start;
    let mut means = cluster_means(data, &partition)?;
    let mut pooled = pooled_within_variance(data, &partition, &means)?;
    let mut wss = within_ss(data, &partition, &means);
    let mut entry = InitEntry {
        ell,
        partition: partition.clone(),
        means: means.clone(),
        pooled_var: pooled.clone(),
        within_ss: wss,
        iterations: 0,
        converged: false,
    };
    for it in 1..=max_iter.max(1) {
        let metric = CholeskyMetric::new(&pooled).map_err(|_| ScedError::SingularPooledVariance {
            last: Some(Box::new(entry.clone())),
        })?;
        let mut next = mahalanobis_reassign(data, &means, &pooled)?;
        repair_empty(data, &mut next, &means, &metric);
        let unchanged = next == partition;
        partition = next;
        means = cluster_means(data, &partition)?;
        pooled = match pooled_within_variance(data, &partition, &means) {
            Ok(v) => v,
            Err(_) => {
                return Err(ScedError::SingularPooledVariance { last: Some(Box::new(entry)) });
            }
        };
        let new_wss = within_ss(data, &partition, &means);
        let stalled = (wss - new_wss).abs() <= 1e-10 * wss.abs().max(f64::MIN_POSITIVE);
        wss = new_wss;
        entry = InitEntry {
            ell,
            partition: partition.clone(),
            means: means.clone(),
            pooled_var: pooled.clone(),
            within_ss: wss,
            iterations: it,
            converged: unchanged || stalled,
        };
        if unchanged || stalled {
            break;
        }
    }
    Ok(entry)
}

/// k-means seeding followed by [`refine_from`].
pub fn init_refine(data: &Dataset, ell: usize, seed: u64, restarts: usize, max_iter: usize) -> Result<InitEntry> {
    let start = kmeans(data, ell, seed, restarts)?;
    refine_from(data, start, max_iter)
}

/// Refined initial clusterings for every ℓ in `ells`, computed in parallel.
/// Values of ℓ whose refinement fails are skipped.
pub fn initialize(
    data: &Dataset,
    ells: std::ops::RangeInclusive<usize>,
    seed: u64,
    restarts: usize,
    max_iter: usize,
) -> InitResult {
    let ells: Vec<usize> = ells.collect();
    let entries = ells
        .par_iter()
        .filter_map(|&ell| match init_refine(data, ell, seed, restarts, max_iter) {
            Ok(e) => Some(e),
            Err(ScedError::SingularPooledVariance { last: Some(e) }) => Some(*e),
            Err(err) => {
                log::warn!("initialization for l = {ell} failed: {err}");
                None
            }
        })
        .collect();
    InitResult { entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn data_1d(v: &[f64]) -> Dataset {
        Dataset::new(v.to_vec(), v.len(), 1).unwrap()
    }

    #[test]
    fn kbar_values() {
        // ⌊√(250 / ln 250)⌋ with ln 250 = 5.5215
        assert_eq!(kbar(250).unwrap(), ((250f64 / 250f64.ln()).sqrt()) as usize);
        assert_eq!(kbar(250).unwrap(), 6);
        assert_eq!(kbar(125).unwrap(), 5);
        assert!(matches!(kbar(8), Err(ScedError::TooFewPoints(8))));
    }

    /// Enumerate every 2-partition of a small 1-d set and keep the within-SS minimizer.
    fn best_two_partition(x: &[f64]) -> Vec<usize> {
        let n = x.len();
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1..(1u32 << n) - 1 {
            let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let mut ss = 0.0;
            for c in 0..2 {
                let pts: Vec<f64> = (0..n).filter(|&i| labels[i] == c).map(|i| x[i]).collect();
                let m = pts.iter().sum::<f64>() / pts.len() as f64;
                ss += pts.iter().map(|v| (v - m).powi(2)).sum::<f64>();
            }
            if ss < best.0 {
                best = (ss, labels);
            }
        }
        best.1
    }

    #[test]
    fn kmeans_matches_enumeration() {
        let x = [0.0, 0.1, 10.0, 10.1];
        let oracle = Partition::new(best_two_partition(&x), 2).unwrap();
        let got = kmeans(&data_1d(&x), 2, 3, 10).unwrap();
        assert_eq!(got.canonical(), oracle.canonical());
        assert_eq!(got.canonical(), vec![0, 0, 1, 1]);
    }

    #[test]
    fn kmeans_separated_blobs_and_saturation() {
        let mut g = rng::stream(1, &[]);
        let mut vals = Vec::new();
        let mut truth = Vec::new();
        for i in 0..40 {
            let off = if i < 20 { 0.0 } else { 100.0 };
            let a: f64 = StandardNormal.sample(&mut g);
            let b: f64 = StandardNormal.sample(&mut g);
            vals.extend([off + a, b]);
            truth.push(usize::from(i >= 20));
        }
        let d = Dataset::new(vals, 40, 2).unwrap();
        let part = kmeans(&d, 2, 9, 10).unwrap();
        assert_eq!(part.canonical(), Partition::new(truth, 2).unwrap().canonical());

        let x = [0.0, 1.0, 2.5, 7.0, 9.0];
        let d = data_1d(&x);
        let part = kmeans(&d, 5, 1, 3).unwrap();
        assert!(part.is_proper());
        let m = cluster_means(&d, &part).unwrap();
        assert_eq!(within_ss(&d, &part, &m), 0.0);
    }

    #[test]
    fn cluster_means_examples() {
        let d = Dataset::new(vec![1.0, 2.0, 3.0, 6.0], 2, 2).unwrap();
        let m = cluster_means(&d, &Partition::single(2)).unwrap();
        assert_eq!(m.row(0).iter().copied().collect::<Vec<_>>(), vec![2.0, 4.0]);

        let d = Dataset::new(vec![0.0, 0.0, 2.0, 4.0], 2, 2).unwrap();
        let m = cluster_means(&d, &Partition::new(vec![0, 1], 2).unwrap()).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 2.0, 4.0]));

        let d = data_1d(&[1.0, 3.0, 7.0]);
        let m = cluster_means(&d, &Partition::new(vec![0, 0, 1], 2).unwrap()).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 1, &[2.0, 7.0]));

        let bad = Partition::new(vec![0, 0, 0], 2).unwrap();
        assert!(matches!(cluster_means(&d, &bad), Err(ScedError::EmptyCluster(1))));
    }

    #[test]
    fn pooled_variance_examples() {
        let d = data_1d(&[-1.0, 1.0]);
        let part = Partition::single(2);
        let m = cluster_means(&d, &part).unwrap();
        let v = pooled_within_variance(&d, &part, &m).unwrap();
        assert!((v[(0, 0)] - 1.0).abs() < 1e-15);

        let part = Partition::new(vec![0, 1], 2).unwrap();
        let m = cluster_means(&d, &part).unwrap();
        assert!(matches!(
            pooled_within_variance(&d, &part, &m),
            Err(ScedError::SingularPooledVariance { .. })
        ));

        let d = data_1d(&[3.0, 3.0, 5.0, 5.0]);
        let part = Partition::new(vec![0, 0, 1, 1], 2).unwrap();
        let m = cluster_means(&d, &part).unwrap();
        assert!(pooled_within_variance(&d, &part, &m).is_err());
    }

    #[test]
    fn reassign_identity_metric_is_euclidean() {
        let d = data_1d(&[4.9, 5.1, -3.0, 12.0]);
        let means = DMatrix::from_row_slice(2, 1, &[0.0, 10.0]);
        let part = mahalanobis_reassign(&d, &means, &DMatrix::identity(1, 1)).unwrap();
        assert_eq!(part.labels(), &[0, 1, 0, 1]);
    }

    fn quad2(inv: [[f64; 2]; 2], v: [f64; 2]) -> f64 {
        v[0] * (inv[0][0] * v[0] + inv[0][1] * v[1]) + v[1] * (inv[1][0] * v[0] + inv[1][1] * v[1])
    }

    #[test]
    fn reassign_anisotropic() {
        // diag(100, 1): the three comparisons computed by hand
        let inv = [[0.01, 0.0], [0.0, 1.0]];
        let (m1, m2) = ([0.0, 0.0], [3.0, 0.0]);
        let cases = [([2.0, 0.9], 1usize), ([1.6, 0.9], 1), ([1.4, 0.0], 0)];
        let d = Dataset::new(cases.iter().flat_map(|c| c.0).collect(), 3, 2).unwrap();
        let means = DMatrix::from_row_slice(2, 2, &[m1[0], m1[1], m2[0], m2[1]]);
        let pooled = DMatrix::from_row_slice(2, 2, &[100.0, 0.0, 0.0, 1.0]);
        let part = mahalanobis_reassign(&d, &means, &pooled).unwrap();
        for (i, (x, want)) in cases.iter().enumerate() {
            let s1 = quad2(inv, [x[0] - m1[0], x[1] - m1[1]]);
            let s2 = quad2(inv, [x[0] - m2[0], x[1] - m2[1]]);
            assert_eq!(usize::from(s2 < s1), *want);
            assert_eq!(part.label(i), *want);
        }

        // correlated metric: Mahalanobis and Euclidean disagree at (1.2, 1.2)
        let pooled = DMatrix::from_row_slice(2, 2, &[1.0, 0.9, 0.9, 1.0]);
        let det = 1.0 - 0.81;
        let inv = [[1.0 / det, -0.9 / det], [-0.9 / det, 1.0 / det]];
        let means = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 2.0, 0.0]);
        let s1 = quad2(inv, [1.2, 1.2]);
        let s2 = quad2(inv, [-0.8, 1.2]);
        assert!(s1 < s2);
        assert!(1.2f64.powi(2) * 2.0 > 0.8f64.powi(2) + 1.2f64.powi(2));
        let d = Dataset::new(vec![1.2, 1.2, 0.0, 0.0], 2, 2).unwrap();
        let part = mahalanobis_reassign(&d, &means, &pooled).unwrap();
        assert_eq!(part.label(0), 0);
    }

    #[test]
    fn reassign_ties_to_lowest_index() {
        let d = data_1d(&[5.0, 1.0]);
        let means = DMatrix::from_row_slice(2, 1, &[0.0, 10.0]);
        let part = mahalanobis_reassign(&d, &means, &DMatrix::identity(1, 1)).unwrap();
        assert_eq!(part.label(0), 0);
    }

    fn blobs(seed: u64, n: usize, sep: f64) -> (Dataset, Vec<usize>) {
        let mut g = rng::stream(seed, &[]);
        let mut vals = Vec::new();
        let mut truth = Vec::new();
        for i in 0..n {
            let c = usize::from(i % 2 == 1);
            let a: f64 = StandardNormal.sample(&mut g);
            let b: f64 = StandardNormal.sample(&mut g);
            vals.extend([a + sep * c as f64, b]);
            truth.push(c);
        }
        (Dataset::new(vals, n, 2).unwrap(), truth)
    }

    #[test]
    fn refine_fixpoint_single_pass() {
        let (d, truth) = blobs(4, 60, 12.0);
        let start = Partition::new(truth, 2).unwrap();
        let e = refine_from(&d, start.clone(), 20).unwrap();
        assert_eq!(e.iterations, 1);
        assert!(e.converged);
        assert_eq!(e.partition, start);
        let m = cluster_means(&d, &e.partition).unwrap();
        assert!((e.within_ss - within_ss(&d, &e.partition, &m)).abs() < 1e-8);
    }

    #[test]
    fn refine_recovers_separated_blobs() {
        let (d, truth) = blobs(11, 200, 10.0);
        let e = init_refine(&d, 2, 5, 10, 20).unwrap();
        assert_eq!(e.partition.canonical(), Partition::new(truth, 2).unwrap().canonical());
    }

    #[test]
    fn sweep_monotone_under_fixed_metric() {
        let (d, _) = blobs(21, 120, 1.5);
        let start = kmeans(&d, 3, 2, 1).unwrap();
        let means = cluster_means(&d, &start).unwrap();
        let pooled = pooled_within_variance(&d, &start, &means).unwrap();
        let metric = CholeskyMetric::new(&pooled).unwrap();
        let obj = |part: &Partition, m: &DMatrix<f64>| {
            let mut w = vec![0.0; 2];
            d.rows()
                .enumerate()
                .map(|(i, x)| {
                    let mu: Vec<f64> = m.row(part.label(i)).iter().copied().collect();
                    metric.distance_sq(x, &mu, &mut w)
                })
                .sum::<f64>()
        };
        let before = obj(&start, &means);
        let next = mahalanobis_reassign(&d, &means, &pooled).unwrap();
        let mid = obj(&next, &means);
        assert!(mid <= before + 1e-12);
        if next.is_proper() {
            let m2 = cluster_means(&d, &next).unwrap();
            assert!(obj(&next, &m2) <= mid + 1e-12);
        }
    }

    #[test]
    fn relabeling_leaves_statistics_unchanged() {
        let (d, _) = blobs(3, 50, 3.0);
        let part = kmeans(&d, 3, 1, 2).unwrap();
        let swapped = Partition::new(part.labels().iter().map(|&l| (l + 1) % 3).collect(), 3).unwrap();
        let (m1, m2) = (cluster_means(&d, &part).unwrap(), cluster_means(&d, &swapped).unwrap());
        assert!((within_ss(&d, &part, &m1) - within_ss(&d, &swapped, &m2)).abs() < 1e-10);
        let v1 = pooled_within_variance(&d, &part, &m1).unwrap();
        let v2 = pooled_within_variance(&d, &swapped, &m2).unwrap();
        for (a, b) in v1.iter().zip(v2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
