//! Posterior cluster probabilities, the optimal clustering rule, and the
//! alternation between reassignment and re-estimation.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::density::{cv_bandwidth_over, BandwidthSelection, GeneratorEstimate};
use crate::error::{Result, ScedError};
use crate::likelihood::{self, maximize, transformed_all};
use crate::linalg::CholeskyMetric;
use crate::model::{Dataset, EllipticalParams, FitConfig, Objective, Partition, TransformSpec};

/// n×k matrix of π̃(c | Xᵢ).
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    pub probs: DMatrix<f64>,
    /// Rows whose mixture density vanished and were set to 1/k.
    pub n_uniform: usize,
}

impl PosteriorMatrix {
    pub fn n(&self) -> usize {
        self.probs.nrows()
    }

    pub fn k(&self) -> usize {
        self.probs.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.probs.row(i).iter().copied().collect()
    }
}

/// π꜀ f̂(Xᵢ | c) / Σ_{c'} π_{c'} f̂(Xᵢ | c'), with ĝ built from the Ŷ of
/// `partition_for_g` and bandwidth `h`.
pub fn posteriors(
    data: &Dataset,
    params: &EllipticalParams,
    h: f64,
    transform: TransformSpec,
    partition_for_g: &Partition,
) -> Result<PosteriorMatrix> {
    let metric = CholeskyMetric::new(&params.scatter)?;
    let k = params.k();
    let n = data.n();
    if partition_for_g.n() != n {
        return Err(ScedError::LengthMismatch { left: partition_for_g.n(), right: n });
    }
    let y = transformed_all(data, &params.means, &metric, &transform);
    let est = GeneratorEstimate::new((0..n).map(|i| y[i * k + partition_for_g.label(i)]).collect(), h, transform)?;
    posteriors_with(&y, params, &metric, &est)
}

/// Posteriors for rows whose transformed radii `y` (n×k, row-major) were
/// computed against `params`, using an existing generator estimate.
pub fn posteriors_with(
    y: &[f64],
    params: &EllipticalParams,
    metric: &CholeskyMetric,
    est: &GeneratorEstimate,
) -> Result<PosteriorMatrix> {
    let k = params.k();
    let n = y.len() / k;
    let log_det = metric.log_det();
    let mut probs = DMatrix::zeros(n, k);
    let mut n_uniform = 0;
    for i in 0..n {
        let mut total = 0.0;
        for c in 0..k {
            let yc = y[i * k + c];
            let f = params.probs[c] * est.transform.log_weight(yc, log_det).exp() * est.ghat(yc);
            probs[(i, c)] = f;
            total += f;
        }
        if total > 0.0 && total.is_finite() {
            for c in 0..k {
                probs[(i, c)] /= total;
            }
        } else {
            n_uniform += 1;
            for c in 0..k {
                probs[(i, c)] = 1.0 / k as f64;
            }
        }
    }
    Ok(PosteriorMatrix { probs, n_uniform })
}

/// Row-wise argmax; ties go to the lowest index.
pub fn refine_partition(post: &PosteriorMatrix) -> Partition {
    let labels = (0..post.n())
        .map(|i| {
            let mut best = 0;
            for c in 1..post.k() {
                if post.probs[(i, c)] > post.probs[(i, best)] {
                    best = c;
                }
            }
            best
        })
        .collect();
    Partition::new(labels, post.k()).expect("argmax labels are in range")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineStep {
    /// Refined objective at the re-estimated parameters.
    pub objective: f64,
    /// Uninflated and inflated bandwidths chosen for this sweep.
    pub h_tilde: f64,
    pub h_hat: f64,
    /// Points whose label changed in the reassignment that opened this sweep.
    pub n_reassigned: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineResult {
    pub partition: Partition,
    pub params: EllipticalParams,
    pub bandwidth: BandwidthSelection,
    pub objective: f64,
    pub history: Vec<RefineStep>,
    /// The reassignment reproduced the current partition.
    pub converged: bool,
    pub cycle_detected: bool,
    /// The loop stopped early because reassignment emptied a cluster.
    pub emptied_cluster: bool,
}

struct Iterate {
    partition: Partition,
    params: EllipticalParams,
    bandwidth: BandwidthSelection,
    objective: f64,
}

fn sweep(
    data: &Dataset,
    partition: &Partition,
    cv_params: &EllipticalParams,
    start: &EllipticalParams,
    objective: Objective,
    transform: TransformSpec,
    config: &FitConfig,
) -> Result<Iterate> {
    let y_tilde = likelihood::generator_for(data, cv_params, partition, 1.0, transform)?;
    let bandwidth = cv_bandwidth_over(y_tilde.sample(), config.cv_grid_size, config.cv_span)?;
    let fit = maximize(objective, start, data, partition, bandwidth.h_hat, transform, config.optimizer_evals_per_dim)?;
    Ok(Iterate { partition: partition.clone(), params: fit.params, bandwidth, objective: fit.value.value })
}

/// Alternate optimal-clustering reassignment (posteriors at the uninflated
/// bandwidth) with bandwidth reselection and re-maximization, starting
/// from `(partition, params)` estimated with uninflated bandwidth `h_start`.
pub fn refine_loop(
    data: &Dataset,
    partition: &Partition,
    params: &EllipticalParams,
    h_start: f64,
    objective: Objective,
    config: &FitConfig,
) -> Result<RefineResult> {
    let transform = TransformSpec::new(config.d0, data.p())?;
    let mut seen: HashMap<Vec<usize>, usize> = HashMap::new();
    seen.insert(partition.labels().to_vec(), 0);
    let mut iterates: Vec<Iterate> = Vec::new();
    let mut history = Vec::new();
    let (mut cur_part, mut cur_params, mut cur_h) = (partition.clone(), params.clone(), h_start);
    let mut converged = false;
    let mut cycle_detected = false;
    let mut emptied_cluster = false;
    for sweep_no in 0..config.refine_max_iter {
        let post = posteriors(data, &cur_params, cur_h, transform, &cur_part)?;
        let next = refine_partition(&post);
        if next.first_empty().is_some() {
            emptied_cluster = true;
            log::warn!("optimal clustering emptied a cluster; keeping the previous partition");
            if !iterates.is_empty() {
                break;
            }
        }
        let repeated = seen.get(next.labels()).copied();
        if !iterates.is_empty() {
            if next == cur_part {
                converged = true;
                break;
            }
            if repeated.is_some() {
                cycle_detected = true;
                log::debug!("refinement revisited a partition after {sweep_no} sweeps");
                break;
            }
        }
        let basis = if emptied_cluster { cur_part.clone() } else { next };
        let n_reassigned = basis.labels().iter().zip(cur_part.labels()).filter(|(a, b)| a != b).count();
        seen.insert(basis.labels().to_vec(), sweep_no + 1);
        let it = sweep(data, &basis, params, &cur_params, objective, transform, config)?;
        history.push(RefineStep {
            objective: it.objective,
            h_tilde: it.bandwidth.h_tilde,
            h_hat: it.bandwidth.h_hat,
            n_reassigned,
        });
        cur_part = it.partition.clone();
        cur_params = it.params.clone();
        cur_h = it.bandwidth.h_tilde;
        iterates.push(it);
        if emptied_cluster {
            break;
        }
    }
    let pick = if cycle_detected {
        (0..iterates.len()).max_by(|&a, &b| iterates[a].objective.total_cmp(&iterates[b].objective)).expect("at least one sweep")
    } else {
        iterates.len() - 1
    };
    let best = iterates.swap_remove(pick);
    Ok(RefineResult {
        partition: best.partition,
        params: best.params,
        bandwidth: best.bandwidth,
        objective: best.objective,
        history,
        converged,
        cycle_detected,
        emptied_cluster,
    })
}
