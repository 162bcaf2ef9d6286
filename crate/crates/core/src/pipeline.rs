//! End-to-end fit for a fixed number of clusters: initial clustering,
//! separation penalty, pseudo-likelihood maximization and optimal
//! clustering refinement.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::clustering::{posteriors, refine_loop, RefineStep};
use crate::density::{cv_bandwidth_over, BandwidthSelection};
use crate::error::{Result, ScedError, Stage};
use crate::init::{cluster_means, initialize, kbar, residual_outer_mean, InitEntry, InitResult};
use crate::likelihood::{self, loo_marginal_loglik, maximize, pi_hat};
use crate::linalg::CholeskyMetric;
use crate::model::{scatter_from_variance, Dataset, EllipticalParams, FitConfig, Objective, Partition, TransformSpec};
use crate::penalty::{fit_sp, PathEntry, SpFit};

/// Parameters in plain nested vectors, as written to report.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsReport {
    pub means: Vec<Vec<f64>>,
    /// Scatter Σ normalized to Σ₁₁ = 1.
    pub scatter: Vec<Vec<f64>>,
    /// Variance matrix Σₓ.
    pub variance: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn matrix_of(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let c = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(rows.len(), c, |r, j| rows[r][j])
}

impl ParamsReport {
    pub fn new(params: &EllipticalParams, variance: &DMatrix<f64>) -> Self {
        ParamsReport {
            means: rows_of(&params.means),
            scatter: rows_of(&params.scatter),
            variance: rows_of(variance),
            probs: params.probs.clone(),
        }
    }

    pub fn means_matrix(&self) -> DMatrix<f64> {
        matrix_of(&self.means)
    }

    pub fn variance_matrix(&self) -> DMatrix<f64> {
        matrix_of(&self.variance)
    }

    pub fn to_params(&self) -> EllipticalParams {
        EllipticalParams { means: self.means_matrix(), scatter: matrix_of(&self.scatter), probs: self.probs.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    /// One-based cluster labels.
    pub labels: Vec<usize>,
    pub params: ParamsReport,
    pub objective: Option<f64>,
}

impl StageReport {
    pub fn partition(&self, k: usize) -> Partition {
        Partition::from_one_based(&self.labels, k).expect("stored labels are valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Bandwidths {
    /// CV bandwidth on Ŷ and its inflation, used by the pseudo-likelihood stage.
    pub h_tilde: Option<f64>,
    pub h_hat: Option<f64>,
    /// CV bandwidth on Ỹ and its inflation after refinement.
    pub h_tilde_star: Option<f64>,
    pub h_hat_star: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Diagnostics {
    pub warnings: Vec<String>,
    pub n_clamped: usize,
    pub uniform_posterior_rows: usize,
    /// Refinement failed and the pseudo-likelihood stage result is final.
    pub degraded: bool,
    pub cycle_detected: bool,
    pub refine_converged: bool,
    pub lambda_below_theory_floor: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub k: usize,
    pub n: usize,
    pub p: usize,
    pub objective: Objective,
    pub initial: Option<StageReport>,
    pub separation_penalty: Option<StageReport>,
    pub pseudo_likelihood: StageReport,
    pub refined: Option<StageReport>,
    pub bandwidths: Bandwidths,
    pub lambda: Option<f64>,
    pub lambda_grid: Vec<f64>,
    pub lambda_path: Vec<PathEntry>,
    pub refine_history: Vec<RefineStep>,
    /// Leave-one-out marginal log-likelihood at the final estimate.
    pub loo_loglik: f64,
    /// Posterior cluster probabilities at the final estimate.
    pub posteriors: Vec<Vec<f64>>,
    pub diagnostics: Diagnostics,
    /// Wall-clock milliseconds per stage.
    pub timing: BTreeMap<String, f64>,
}

impl FitReport {
    /// The refined stage when present, otherwise the pseudo-likelihood stage.
    pub fn final_stage(&self) -> &StageReport {
        self.refined.as_ref().unwrap_or(&self.pseudo_likelihood)
    }

    pub fn final_partition(&self) -> Partition {
        self.final_stage().partition(self.k)
    }
}

/// Σ̂ₓ = (mean of qᵢ / p)·Σ, qᵢ the squared Mahalanobis distance of each
/// point to its assigned mean under the scatter Σ.
pub fn variance_from_scatter(data: &Dataset, params: &EllipticalParams, partition: &Partition) -> Result<DMatrix<f64>> {
    let metric = CholeskyMetric::new(&params.scatter)?;
    let mut work = vec![0.0; data.p()];
    let means: Vec<Vec<f64>> = (0..params.k()).map(|c| params.mean(c)).collect();
    let mean_q = data
        .rows()
        .enumerate()
        .map(|(i, x)| metric.distance_sq(x, &means[partition.label(i)], &mut work))
        .sum::<f64>()
        / data.n() as f64;
    Ok(&params.scatter * (mean_q / data.p() as f64))
}

/// Output of the clustering stages that precede pseudo-likelihood fitting.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub k: usize,
    pub init: Option<InitEntry>,
    pub sp: Option<SpFit>,
    /// Partition, means and variance handed to the pseudo-likelihood stage.
    pub partition: Partition,
    pub means: DMatrix<f64>,
    pub variance: DMatrix<f64>,
    pub warnings: Vec<String>,
    pub timing: BTreeMap<String, f64>,
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Initial clustering and separation-penalty stages. For k = 1 both are
/// skipped and the single cluster carries the sample mean and covariance.
pub fn prepare(data: &Dataset, k: usize, config: &FitConfig) -> Result<Prepared> {
    config.validate()?;
    if k == 0 || k > data.n() {
        return Err(ScedError::InvalidInput(format!("k = {k} is out of range for n = {}", data.n())));
    }
    let mut timing = BTreeMap::new();
    let mut warnings = Vec::new();
    if k == 1 {
        let partition = Partition::single(data.n());
        let means = cluster_means(data, &partition)?;
        let variance = residual_outer_mean(data, &partition, &means);
        return Ok(Prepared { k, init: None, sp: None, partition, means, variance, warnings, timing });
    }
    let t0 = Instant::now();
    let upper = kbar(data.n()).unwrap_or(k).max(k);
    let init: InitResult = initialize(data, k..=upper, config.seed, config.kmeans_restarts, config.init_max_iter);
    let base = init
        .get(k)
        .cloned()
        .ok_or_else(|| ScedError::InvalidInput(format!("initial clustering failed for k = {k}")).at(Stage::Init))?;
    timing.insert("initial".into(), ms(t0));
    let t1 = Instant::now();
    let sp = match fit_sp(data, &init, k, config) {
        Ok(sp) => Some(sp),
        Err(e) => {
            let msg = format!("separation penalty failed ({e}); continuing from the initial clustering");
            log::warn!("{msg}");
            warnings.push(msg);
            None
        }
    };
    timing.insert("separation_penalty".into(), ms(t1));
    let (partition, means, variance) = match &sp {
        Some(sp) if sp.partition.is_proper() => (sp.partition.clone(), sp.means.clone(), sp.sigma_cluster.clone()),
        Some(sp) => {
            let msg = format!(
                "separation penalty found {} of {k} clusters; continuing from the initial clustering",
                sp.partition.nonempty_clusters()
            );
            log::warn!("{msg}");
            warnings.push(msg);
            (base.partition.clone(), base.means.clone(), base.pooled_var.clone())
        }
        None => (base.partition.clone(), base.means.clone(), base.pooled_var.clone()),
    };
    if sp.as_ref().is_some_and(|s| s.below_theory_floor) {
        warnings.push("selected lambda is below the theoretical floor".into());
    }
    Ok(Prepared { k, init: Some(base), sp, partition, means, variance, warnings, timing })
}

/// Pseudo-likelihood maximization and refinement from prepared stages.
pub fn finish(data: &Dataset, prepared: &Prepared, objective: Objective, config: &FitConfig) -> Result<FitReport> {
    let k = prepared.k;
    let transform = TransformSpec::new(config.d0, data.p())?;
    let mut timing = prepared.timing.clone();
    let mut diagnostics = Diagnostics {
        warnings: prepared.warnings.clone(),
        lambda_below_theory_floor: prepared.sp.as_ref().is_some_and(|s| s.below_theory_floor),
        ..Default::default()
    };
    let tag = |e: ScedError| e.at(Stage::PseudoLikelihood);

    let t0 = Instant::now();
    let (scatter, _) = scatter_from_variance(&prepared.variance).map_err(tag)?;
    let probs = pi_hat(&prepared.partition).map_err(tag)?;
    let start = EllipticalParams { means: prepared.means.clone(), scatter, probs }.validate().map_err(tag)?;
    let y_hat = likelihood::generator_for(data, &start, &prepared.partition, 1.0, transform).map_err(tag)?;
    let bw: BandwidthSelection = cv_bandwidth_over(y_hat.sample(), config.cv_grid_size, config.cv_span).map_err(tag)?;
    let pml = maximize(objective, &start, data, &prepared.partition, bw.h_hat, transform, config.optimizer_evals_per_dim)
        .map_err(tag)?;
    if !pml.improved {
        diagnostics.warnings.push("pseudo-likelihood maximization did not improve on its start".into());
    }
    diagnostics.n_clamped = pml.value.n_clamped;
    let pml_var = variance_from_scatter(data, &pml.params, &prepared.partition).map_err(tag)?;
    let pseudo_likelihood = StageReport {
        labels: prepared.partition.one_based(),
        params: ParamsReport::new(&pml.params, &pml_var),
        objective: Some(pml.value.value),
    };
    timing.insert("pseudo_likelihood".into(), ms(t0));

    let t1 = Instant::now();
    let mut bandwidths = Bandwidths { h_tilde: Some(bw.h_tilde), h_hat: Some(bw.h_hat), ..Default::default() };
    let (final_part, final_params, final_h, refined, history) =
        match refine_loop(data, &prepared.partition, &pml.params, bw.h_tilde, objective, config) {
            Ok(r) => {
                bandwidths.h_tilde_star = Some(r.bandwidth.h_tilde);
                bandwidths.h_hat_star = Some(r.bandwidth.h_hat);
                diagnostics.cycle_detected = r.cycle_detected;
                diagnostics.refine_converged = r.converged;
                if r.emptied_cluster {
                    diagnostics.warnings.push("optimal clustering emptied a cluster; refinement stopped early".into());
                }
                let var = variance_from_scatter(data, &r.params, &r.partition).map_err(|e| e.at(Stage::Refinement))?;
                let stage = StageReport {
                    labels: r.partition.one_based(),
                    params: ParamsReport::new(&r.params, &var),
                    objective: Some(r.objective),
                };
                (r.partition, r.params, r.bandwidth.h_tilde, Some(stage), r.history)
            }
            Err(e) => {
                let msg = format!("refinement failed ({e}); reporting the pseudo-likelihood estimate");
                log::warn!("{msg}");
                diagnostics.warnings.push(msg);
                diagnostics.degraded = true;
                (prepared.partition.clone(), pml.params.clone(), bw.h_tilde, None, Vec::new())
            }
        };
    timing.insert("refinement".into(), ms(t1));

    let loo = loo_marginal_loglik(&final_params, data, &final_part, final_h, transform).map_err(|e| e.at(Stage::Selection))?;
    diagnostics.n_clamped = diagnostics.n_clamped.max(loo.n_clamped);
    let post = posteriors(data, &final_params, final_h, transform, &final_part).map_err(|e| e.at(Stage::Refinement))?;
    diagnostics.uniform_posterior_rows = post.n_uniform;

    let initial = prepared.init.as_ref().map(|e| {
        let params = EllipticalParams {
            means: e.means.clone(),
            scatter: scatter_from_variance(&e.pooled_var).map(|s| s.0).unwrap_or_else(|_| e.pooled_var.clone()),
            probs: pi_hat(&e.partition).unwrap_or_else(|_| vec![1.0 / k as f64; k]),
        };
        StageReport { labels: e.partition.one_based(), params: ParamsReport::new(&params, &e.pooled_var), objective: None }
    });
    let separation_penalty = prepared.sp.as_ref().map(|sp| {
        let k_sp = sp.means.nrows();
        let params = EllipticalParams {
            means: sp.means.clone(),
            scatter: scatter_from_variance(&sp.sigma_cluster).map(|s| s.0).unwrap_or_else(|_| sp.sigma_cluster.clone()),
            probs: {
                let sizes = sp.partition.sizes();
                sizes.iter().map(|&s| s as f64 / data.n() as f64).collect::<Vec<_>>()
            },
        };
        debug_assert_eq!(k_sp, k);
        StageReport {
            labels: sp.partition.one_based(),
            params: ParamsReport::new(&params, &sp.sigma_cluster),
            objective: Some(sp.path.entries[sp.selected].fit_ss),
        }
    });

    Ok(FitReport {
        k,
        n: data.n(),
        p: data.p(),
        objective,
        initial,
        separation_penalty,
        pseudo_likelihood,
        refined,
        bandwidths,
        lambda: prepared.sp.as_ref().map(|s| s.lambda),
        lambda_grid: prepared.sp.as_ref().map(|s| s.path.grid.clone()).unwrap_or_default(),
        lambda_path: prepared.sp.as_ref().map(|s| s.path.entries.clone()).unwrap_or_default(),
        refine_history: history,
        loo_loglik: loo.value,
        posteriors: (0..post.n()).map(|i| post.row(i)).collect(),
        diagnostics,
        timing,
    })
}

/// All stages for one k with the configured objective.
pub fn fit_once(data: &Dataset, k: usize, config: &FitConfig) -> Result<FitReport> {
    let prepared = prepare(data, k, config)?;
    finish(data, &prepared, config.objective, config)
}
