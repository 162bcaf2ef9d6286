//! Log-pseudo-likelihood (hard assignment), log-pseudo-marginal-likelihood,
//! their maximization over θ, and the leave-one-out marginal log-likelihood.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::density::GeneratorEstimate;
use crate::error::{Result, ScedError};
use crate::linalg::CholeskyMetric;
use crate::model::{Dataset, EllipticalParams, Objective, Partition, TransformSpec};
use crate::optim::NelderMead;

/// Densities below this are clamped before taking logs.
pub const DENSITY_FLOOR: f64 = 1e-300;

/// Unconstrained encoding of (μ, Σ): the means row by row, then the lower
/// Cholesky factor of Σ with L₁₁ = 1, log diagonal entries first and the
/// strictly lower entries after.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaParameterization {
    pub mu_flat: Vec<f64>,
    pub chol_log: Vec<f64>,
}

pub fn chol_dim(p: usize) -> usize {
    p * (p + 1) / 2 - 1
}

impl ThetaParameterization {
    pub fn encode(means: &DMatrix<f64>, scatter: &DMatrix<f64>) -> Result<Self> {
        let p = scatter.nrows();
        let l = scatter.clone().cholesky().ok_or(ScedError::NotSpd)?.l();
        let l11 = l[(0, 0)];
        let mut chol_log = Vec::with_capacity(chol_dim(p));
        for r in 1..p {
            chol_log.push((l[(r, r)] / l11).ln());
        }
        for r in 1..p {
            for c in 0..r {
                chol_log.push(l[(r, c)] / l11);
            }
        }
        let mu_flat = (0..means.nrows()).flat_map(|c| means.row(c).iter().copied().collect::<Vec<_>>()).collect();
        Ok(ThetaParameterization { mu_flat, chol_log })
    }

    pub fn from_slice(theta: &[f64], k: usize, p: usize) -> Result<Self> {
        if theta.len() < k * p + chol_dim(p) {
            return Err(ScedError::LengthMismatch { left: theta.len(), right: k * p + chol_dim(p) });
        }
        Ok(ThetaParameterization {
            mu_flat: theta[..k * p].to_vec(),
            chol_log: theta[k * p..k * p + chol_dim(p)].to_vec(),
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.mu_flat.iter().chain(&self.chol_log).copied().collect()
    }

    pub fn lower(&self, p: usize) -> DMatrix<f64> {
        lower_from(&self.chol_log, p)
    }

    pub fn means(&self, p: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.mu_flat.len() / p, p, &self.mu_flat)
    }

    pub fn decode(&self, p: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let l = self.lower(p);
        let scatter = &l * l.transpose();
        (self.means(p), scatter)
    }
}

fn lower_from(chol_log: &[f64], p: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(p, p);
    l[(0, 0)] = 1.0;
    for r in 1..p {
        l[(r, r)] = chol_log[r - 1].exp();
    }
    let mut idx = p - 1;
    for r in 1..p {
        for c in 0..r {
            l[(r, c)] = chol_log[idx];
            idx += 1;
        }
    }
    l
}

/// Softmax with the first logit pinned at zero.
fn probs_from_logits(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(0.0f64, f64::max);
    let mut e: Vec<f64> = std::iter::once((-max).exp()).chain(logits.iter().map(|l| (l - max).exp())).collect();
    let s: f64 = e.iter().sum();
    e.iter_mut().for_each(|v| *v /= s);
    e
}

fn logits_from_probs(probs: &[f64]) -> Vec<f64> {
    let base = probs[0].max(1e-300).ln();
    probs[1..].iter().map(|v| v.max(1e-300).ln() - base).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLikelihoodValue {
    pub value: f64,
    #[serde(skip)]
    pub per_point: Vec<f64>,
    pub n_clamped: usize,
}

/// πc = |𝒢c| / n.
pub fn pi_hat(partition: &Partition) -> Result<Vec<f64>> {
    if let Some(c) = partition.first_empty() {
        return Err(ScedError::EmptyCluster(c));
    }
    let n = partition.n() as f64;
    Ok(partition.sizes().iter().map(|&s| s as f64 / n).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Assigned,
    Marginal,
    LeaveOneOut,
}

/// Transformed radii Yᵢ꜀ for every point and cluster, row-major n×k.
/// Points and centers are whitened once so each distance costs O(p).
pub(crate) fn transformed_all(data: &Dataset, means: &DMatrix<f64>, metric: &CholeskyMetric, transform: &TransformSpec) -> Vec<f64> {
    let k = means.nrows();
    let p = data.p();
    let mut work = vec![0.0; p];
    let mut centers = vec![0.0; k * p];
    let mut row = vec![0.0; p];
    for c in 0..k {
        row.iter_mut().zip(means.row(c).iter()).for_each(|(r, m)| *r = *m);
        metric.quad(&row, &mut work);
        centers[c * p..(c + 1) * p].copy_from_slice(&work);
    }
    let mut out = Vec::with_capacity(data.n() * k);
    for x in data.rows() {
        metric.quad(x, &mut work);
        for c in 0..k {
            let q: f64 = work.iter().zip(&centers[c * p..(c + 1) * p]).map(|(a, b)| (a - b) * (a - b)).sum();
            out.push(transform.forward(q));
        }
    }
    out
}

/// Generator estimate built from Ŷᵢ = Ψ(Xᵢ; μ_{label(i)}, Σ).
pub fn generator_for(
    data: &Dataset,
    params: &EllipticalParams,
    partition: &Partition,
    h: f64,
    transform: TransformSpec,
) -> Result<GeneratorEstimate> {
    let metric = CholeskyMetric::new(&params.scatter)?;
    let y = transformed_all(data, &params.means, &metric, &transform);
    let k = params.k();
    GeneratorEstimate::new((0..data.n()).map(|i| y[i * k + partition.label(i)]).collect(), h, transform)
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    kind: Kind,
    data: &Dataset,
    means: &DMatrix<f64>,
    metric: &CholeskyMetric,
    probs: &[f64],
    partition: &Partition,
    h: f64,
    transform: TransformSpec,
) -> Result<PseudoLikelihoodValue> {
    let n = data.n();
    let k = means.nrows();
    if partition.n() != n {
        return Err(ScedError::LengthMismatch { left: partition.n(), right: n });
    }
    if probs.len() != k || partition.k() > k {
        return Err(ScedError::LengthMismatch { left: probs.len(), right: k });
    }
    let y = transformed_all(data, means, metric, &transform);
    let own: Vec<f64> = (0..n).map(|i| y[i * k + partition.label(i)]).collect();
    let est = GeneratorEstimate::new(own.clone(), h, transform)?;
    let log_det = metric.log_det();
    let mut n_clamped = 0;
    let mut per_point = Vec::with_capacity(n);
    for i in 0..n {
        let f = match kind {
            Kind::Assigned => {
                let c = partition.label(i);
                probs[c] * transform.log_weight(own[i], log_det).exp() * est.ghat(own[i])
            }
            Kind::Marginal | Kind::LeaveOneOut => (0..k)
                .map(|c| {
                    let yc = y[i * k + c];
                    if probs[c] == 0.0 {
                        return 0.0;
                    }
                    let g = if kind == Kind::Marginal { est.ghat(yc) } else { est.ghat_loo(yc, own[i]) };
                    probs[c] * transform.log_weight(yc, log_det).exp() * g
                })
                .sum(),
        };
        let f = if f.is_nan() || f < DENSITY_FLOOR {
            n_clamped += 1;
            DENSITY_FLOOR
        } else {
            f
        };
        per_point.push(f.ln());
    }
    Ok(PseudoLikelihoodValue { value: per_point.iter().sum(), per_point, n_clamped })
}

/// Σᵢ log(π_{cᵢ} f̂_h(Xᵢ | cᵢ; θ)) over the hard partition.
pub fn pl1(
    params: &EllipticalParams,
    data: &Dataset,
    partition: &Partition,
    h: f64,
    transform: TransformSpec,
) -> Result<PseudoLikelihoodValue> {
    let metric = CholeskyMetric::new(&params.scatter)?;
    evaluate(Kind::Assigned, data, &params.means, &metric, &params.probs, partition, h, transform)
}

/// Σᵢ log Σ꜀ π꜀ f̂_h(Xᵢ | c; θ); ĝ is still built from the hard-partition Ŷᵢ.
pub fn pl2(
    params: &EllipticalParams,
    data: &Dataset,
    partition: &Partition,
    h: f64,
    transform: TransformSpec,
) -> Result<PseudoLikelihoodValue> {
    let metric = CholeskyMetric::new(&params.scatter)?;
    evaluate(Kind::Marginal, data, &params.means, &metric, &params.probs, partition, h, transform)
}

pub fn objective_value(
    objective: Objective,
    params: &EllipticalParams,
    data: &Dataset,
    partition: &Partition,
    h: f64,
    transform: TransformSpec,
) -> Result<PseudoLikelihoodValue> {
    match objective {
        Objective::Pl1 => pl1(params, data, partition, h, transform),
        Objective::Pl2 => pl2(params, data, partition, h, transform),
    }
}

/// Σᵢ log f̃^{−i}(Xᵢ): the marginal density at Xᵢ with Ỹᵢ removed from the
/// generator sample.
pub fn loo_marginal_loglik(
    params: &EllipticalParams,
    data: &Dataset,
    partition: &Partition,
    h: f64,
    transform: TransformSpec,
) -> Result<PseudoLikelihoodValue> {
    if data.n() < 3 {
        return Err(ScedError::InvalidInput("leave-one-out likelihood needs n >= 3".into()));
    }
    let metric = CholeskyMetric::new(&params.scatter)?;
    evaluate(Kind::LeaveOneOut, data, &params.means, &metric, &params.probs, partition, h, transform)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaximizeResult {
    pub params: EllipticalParams,
    pub value: PseudoLikelihoodValue,
    pub initial_value: f64,
    pub evaluations: usize,
    /// False when no evaluated point beat the start (the start is returned).
    pub improved: bool,
}

/// Maximize pℓ₁ (π fixed at the partition proportions) or pℓ₂ (π free)
/// over θ at a fixed bandwidth.
pub fn maximize(
    objective: Objective,
    init: &EllipticalParams,
    data: &Dataset,
    partition: &Partition,
    h: f64,
    transform: TransformSpec,
    evals_per_dim: usize,
) -> Result<MaximizeResult> {
    let k = init.k();
    let p = init.p();
    if p != data.p() {
        return Err(ScedError::LengthMismatch { left: p, right: data.p() });
    }
    let probs0 = match objective {
        Objective::Pl1 => pi_hat(partition)?,
        Objective::Pl2 => init.probs.clone(),
    };
    let theta0 = ThetaParameterization::encode(&init.means, &init.scatter)?;
    let mut x0 = theta0.to_vec();
    let free_pi = objective == Objective::Pl2 && k > 1;
    if free_pi {
        x0.extend(logits_from_probs(&probs0));
    }
    let n_theta = k * p + chol_dim(p);
    let col_sd: Vec<f64> = (0..p)
        .map(|j| {
            let m = data.rows().map(|r| r[j]).sum::<f64>() / data.n() as f64;
            (data.rows().map(|r| (r[j] - m).powi(2)).sum::<f64>() / data.n() as f64).sqrt()
        })
        .collect();
    let steps: Vec<f64> = (0..x0.len())
        .map(|t| {
            if t < k * p {
                0.1 * if col_sd[t % p] > 0.0 { col_sd[t % p] } else { 1.0 }
            } else if t < n_theta {
                0.1
            } else {
                0.2
            }
        })
        .collect();
    let kind = match objective {
        Objective::Pl1 => Kind::Assigned,
        Objective::Pl2 => Kind::Marginal,
    };
    let decode = |x: &[f64]| -> (DMatrix<f64>, DMatrix<f64>, Vec<f64>) {
        let means = DMatrix::from_row_slice(k, p, &x[..k * p]);
        let lower = lower_from(&x[k * p..n_theta], p);
        let probs = if free_pi { probs_from_logits(&x[n_theta..]) } else { probs0.clone() };
        (means, lower, probs)
    };
    let f = |x: &[f64]| -> f64 {
        if x.iter().any(|v| !v.is_finite()) {
            return f64::NAN;
        }
        let (means, lower, probs) = decode(x);
        if lower.diagonal().iter().any(|d| !(d.is_finite() && *d > 1e-8 && *d < 1e8)) {
            return f64::NAN;
        }
        let metric = CholeskyMetric::from_lower(&lower);
        match evaluate(kind, data, &means, &metric, &probs, partition, h, transform) {
            Ok(v) => v.value,
            Err(_) => f64::NAN,
        }
    };
    let nm = NelderMead { max_evals: evals_per_dim.max(1) * x0.len(), ftol: 1e-10, xtol: 1e-8 };
    let res = nm.maximize(f, &x0, &steps);
    let (means, lower, probs) = decode(&res.x);
    let scatter = &lower * lower.transpose();
    let params = if res.improved() {
        EllipticalParams { means, scatter, probs }.validate()?
    } else {
        EllipticalParams { probs: probs0, ..init.clone() }
    };
    let value = match objective {
        Objective::Pl1 => pl1(&params, data, partition, h, transform)?,
        Objective::Pl2 => pl2(&params, data, partition, h, transform)?,
    };
    if !res.improved() {
        log::debug!("pseudo-likelihood maximization did not improve on its start");
    }
    Ok(MaximizeResult {
        params,
        value,
        initial_value: res.initial_value,
        evaluations: res.evaluations,
        improved: res.improved(),
    })
}
