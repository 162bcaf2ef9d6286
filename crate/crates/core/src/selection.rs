//! Semiparametric information criterion over a range of cluster counts and
//! the parametric-adequacy statistic.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScedError};
use crate::init::{cluster_means, residual_outer_mean};
use crate::linalg::CholeskyMetric;
use crate::model::{Dataset, FitConfig, Partition};
use crate::pipeline::{fit_once, FitReport};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// SPIC(k) = −pℓ(k)/n + k ln n / (2n^{4/5}) + k(p+1) ln n / (2n).
pub fn spic(k: usize, loo_loglik: f64, n: usize, p: usize) -> f64 {
    spic_at(k, loo_loglik, n as f64, p)
}

fn spic_at(k: usize, loo_loglik: f64, nf: f64, p: usize) -> f64 {
    let kf = k as f64;
    -loo_loglik / nf + kf * nf.ln() / (2.0 * nf.powf(0.8)) + kf * (p as f64 + 1.0) * nf.ln() / (2.0 * nf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpicEntry {
    pub k: usize,
    pub loo_loglik: Option<f64>,
    pub spic: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpicCurve {
    pub entries: Vec<SpicEntry>,
    pub selected: usize,
}

impl SpicCurve {
    /// Argmin over the entries that have a value; ties go to the smaller k.
    pub fn from_entries(entries: Vec<SpicEntry>) -> Result<Self> {
        let selected = entries
            .iter()
            .filter_map(|e| e.spic.map(|v| (e.k, v)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .map(|(k, _)| k)
            .ok_or_else(|| ScedError::InvalidInput("every k in the range failed".into()))?;
        Ok(SpicCurve { entries, selected })
    }
}

/// Fit every k in the configured range and pick the SPIC minimizer. Failed
/// k are recorded and excluded from the argmin.
pub fn select_k(data: &Dataset, config: &FitConfig) -> Result<(SpicCurve, Vec<FitReport>)> {
    config.validate()?;
    let (lo, hi) = config.k_range;
    let results: Vec<(usize, Result<FitReport>)> =
        (lo..=hi).into_par_iter().map(|k| (k, fit_once(data, k, config))).collect();
    let mut entries = Vec::new();
    let mut reports = Vec::new();
    for (k, r) in results {
        match r {
            Ok(rep) => {
                entries.push(SpicEntry {
                    k,
                    loo_loglik: Some(rep.loo_loglik),
                    spic: Some(spic(k, rep.loo_loglik, data.n(), data.p())),
                    error: None,
                });
                reports.push(rep);
            }
            Err(e) => {
                log::warn!("fit for k = {k} failed and is excluded from selection: {e}");
                entries.push(SpicEntry { k, loo_loglik: None, spic: None, error: Some(e.to_string()) });
            }
        }
    }
    Ok((SpicCurve::from_entries(entries)?, reports))
}

/// D = (pℓ − ℓ₀)/n − ln n / n^{4/5}.
pub fn adequacy_d(pl_semiparametric: f64, l0_parametric: f64, n: usize) -> f64 {
    let nf = n as f64;
    (pl_semiparametric - l0_parametric) / nf - nf.ln() / nf.powf(0.8)
}

/// Normal mixture log-likelihood Σᵢ log Σ꜀ π꜀ φ(Xᵢ; μ꜀, Σ) at the
/// closed-form estimates for a given partition: cluster proportions,
/// cluster means and the pooled within-cluster covariance.
pub fn normal_l0(data: &Dataset, partition: &Partition) -> Result<f64> {
    let means = cluster_means(data, partition)?;
    let cov = residual_outer_mean(data, partition, &means);
    let metric = CholeskyMetric::new(&cov)?;
    let n = data.n() as f64;
    let p = data.p() as f64;
    let log_pi: Vec<f64> = partition.sizes().iter().map(|&s| (s as f64 / n).ln()).collect();
    let norm = -0.5 * (p * LN_2PI + metric.log_det());
    let mu: Vec<Vec<f64>> = (0..partition.k()).map(|c| means.row(c).iter().copied().collect()).collect();
    let mut work = vec![0.0; data.p()];
    let mut total = 0.0;
    let mut terms = vec![0.0; partition.k()];
    for x in data.rows() {
        for (c, t) in terms.iter_mut().enumerate() {
            *t = log_pi[c] + norm - 0.5 * metric.distance_sq(x, &mu[c], &mut work);
        }
        let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        total += m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
    }
    Ok(total)
}
