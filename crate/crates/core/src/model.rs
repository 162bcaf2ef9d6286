//! Domain types shared by every stage: the data matrix, hard partitions,
//! the elliptical parameter vector and the radial transformation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Result, ScedError};
use crate::linalg;

/// An n×p matrix of continuous observations, stored row-major, plus the
/// column statistics needed to undo standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    values: Vec<f64>,
    n: usize,
    p: usize,
    standardized: bool,
    col_means: Vec<f64>,
    col_sds: Vec<f64>,
}

impl Dataset {
    pub fn new(values: Vec<f64>, n: usize, p: usize) -> Result<Self> {
        if p == 0 {
            return Err(ScedError::InvalidInput("dataset needs at least one column".into()));
        }
        if n < 2 {
            return Err(ScedError::InvalidInput(format!("dataset needs n >= 2 rows, got {n}")));
        }
        if values.len() != n * p {
            return Err(ScedError::LengthMismatch { left: values.len(), right: n * p });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(ScedError::InvalidInput(format!(
                "non-finite value at row {}, column {}",
                pos / p,
                pos % p
            )));
        }
        Ok(Dataset {
            values,
            n,
            p,
            standardized: false,
            col_means: vec![0.0; p],
            col_sds: vec![1.0; p],
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let p = rows.first().map_or(0, |r| r.len());
        if let Some(bad) = rows.iter().find(|r| r.len() != p) {
            return Err(ScedError::LengthMismatch { left: bad.len(), right: p });
        }
        Self::new(rows.iter().flatten().copied().collect(), n, p)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.p..(i + 1) * self.p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.p)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_standardized(&self) -> bool {
        self.standardized
    }

    pub fn col_means(&self) -> &[f64] {
        &self.col_means
    }

    pub fn col_sds(&self) -> &[f64] {
        &self.col_sds
    }

    /// Column-wise mean zero, unit sample variance (n − 1 denominator).
    pub fn standardize(&self) -> Result<Dataset> {
        if self.standardized {
            return Ok(self.clone());
        }
        let (n, p) = (self.n, self.p);
        let mut means = vec![0.0; p];
        for row in self.rows() {
            for (m, v) in means.iter_mut().zip(row) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= n as f64);
        let mut vars = vec![0.0; p];
        for row in self.rows() {
            for j in 0..p {
                let d = row[j] - means[j];
                vars[j] += d * d;
            }
        }
        let mut sds = Vec::with_capacity(p);
        for (j, v) in vars.iter().enumerate() {
            let var = v / (n as f64 - 1.0);
            let scale = means[j].abs().max(1.0);
            if !(var > 1e-24 * scale * scale) {
                return Err(ScedError::ConstantColumn(j));
            }
            sds.push(var.sqrt());
        }
        let mut values = self.values.clone();
        for row in values.chunks_exact_mut(p) {
            for j in 0..p {
                row[j] = (row[j] - means[j]) / sds[j];
            }
        }
        Ok(Dataset { values, n, p, standardized: true, col_means: means, col_sds: sds })
    }

    /// Map a point from standardized coordinates back to the original scale.
    pub fn to_original_scale(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.col_sds.iter().zip(&self.col_means))
            .map(|(v, (s, m))| v * s + m)
            .collect()
    }

    /// Inverse of [`Dataset::standardize`].
    pub fn unstandardize(&self) -> Dataset {
        if !self.standardized {
            return self.clone();
        }
        let values = self.rows().flat_map(|r| self.to_original_scale(r)).collect();
        Dataset {
            values,
            n: self.n,
            p: self.p,
            standardized: false,
            col_means: vec![0.0; self.p],
            col_sds: vec![1.0; self.p],
        }
    }

    /// Keep only the listed rows (used by leave-out tests and bootstrap-like tools).
    pub fn select_rows(&self, idx: &[usize]) -> Result<Dataset> {
        let values = idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        let mut d = Dataset::new(values, idx.len(), self.p)?;
        d.standardized = self.standardized;
        d.col_means = self.col_means.clone();
        d.col_sds = self.col_sds.clone();
        Ok(d)
    }
}

/// Hard assignment of n indices to k clusters. Labels are 0-based in memory;
/// every file format writes them 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Partition {
    labels: Vec<usize>,
    k: usize,
}

impl Partition {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(ScedError::InvalidInput("partition needs k >= 1".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(ScedError::InvalidInput(format!("label {bad} out of range for k = {k}")));
        }
        Ok(Partition { labels, k })
    }

    pub fn single(n: usize) -> Self {
        Partition { labels: vec![0; n], k: 1 }
    }

    /// Build from 1-based labels as they appear in files.
    pub fn from_one_based(labels: &[usize], k: usize) -> Result<Self> {
        if labels.contains(&0) {
            return Err(ScedError::InvalidInput("1-based labels cannot contain 0".into()));
        }
        Self::new(labels.iter().map(|l| l - 1).collect(), k)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn one_based(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l + 1).collect()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }

    pub fn nonempty_clusters(&self) -> usize {
        self.sizes().iter().filter(|&&s| s > 0).count()
    }

    pub fn is_proper(&self) -> bool {
        self.sizes().iter().all(|&s| s > 0)
    }

    pub fn first_empty(&self) -> Option<usize> {
        self.sizes().iter().position(|&s| s == 0)
    }

    pub fn members(&self, c: usize) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(move |(_, &l)| l == c).map(|(i, _)| i)
    }

    /// Labels renumbered in order of first appearance; equal for partitions
    /// that agree up to relabeling.
    pub fn canonical(&self) -> Vec<usize> {
        let mut map = vec![usize::MAX; self.k];
        let mut next = 0;
        self.labels
            .iter()
            .map(|&l| {
                if map[l] == usize::MAX {
                    map[l] = next;
                    next += 1;
                }
                map[l]
            })
            .collect()
    }

    pub fn set_label(&mut self, i: usize, c: usize) {
        assert!(c < self.k);
        self.labels[i] = c;
    }
}

/// η = (μ₁…μₖ, Σ, π) with the scatter normalized so that Σ₁₁ = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipticalParams {
    pub means: DMatrix<f64>,
    pub scatter: DMatrix<f64>,
    pub probs: Vec<f64>,
}

impl EllipticalParams {
    pub fn k(&self) -> usize {
        self.means.nrows()
    }

    pub fn p(&self) -> usize {
        self.means.ncols()
    }

    pub fn mean(&self, c: usize) -> Vec<f64> {
        self.means.row(c).iter().copied().collect()
    }

    /// Symmetrize, renormalize Σ₁₁ to one, clip and renormalize π.
    pub fn validate(self) -> Result<Self> {
        validate_params(self)
    }

    /// Jointly permute clusters: new cluster c is old cluster `perm[c]`.
    pub fn permuted(&self, perm: &[usize]) -> EllipticalParams {
        let k = self.k();
        let p = self.p();
        let mut means = DMatrix::zeros(k, p);
        for (c, &old) in perm.iter().enumerate() {
            means.set_row(c, &self.means.row(old));
        }
        EllipticalParams {
            means,
            scatter: self.scatter.clone(),
            probs: perm.iter().map(|&o| self.probs[o]).collect(),
        }
    }
}

pub fn validate_params(params: EllipticalParams) -> Result<EllipticalParams> {
    let EllipticalParams { means, scatter, probs } = params;
    let p = scatter.nrows();
    if !scatter.is_square() || means.ncols() != p {
        return Err(ScedError::InvalidInput("scatter/means dimension mismatch".into()));
    }
    if probs.len() != means.nrows() {
        return Err(ScedError::LengthMismatch { left: probs.len(), right: means.nrows() });
    }
    if scatter.iter().chain(means.iter()).chain(probs.iter()).any(|v| !v.is_finite()) {
        return Err(ScedError::InvalidInput("non-finite parameter".into()));
    }
    let mut scatter = linalg::symmetrize(&scatter);
    let s11 = scatter[(0, 0)];
    if !(s11 > 0.0) {
        return Err(ScedError::DegenerateScatter(s11));
    }
    scatter /= s11;
    scatter[(0, 0)] = 1.0;
    let min_eig = linalg::min_eigenvalue(&scatter);
    if min_eig < 1e-10 {
        return Err(ScedError::DegenerateScatter(min_eig));
    }
    if let Some(c) = probs.iter().position(|&v| v <= 0.0) {
        return Err(ScedError::EmptyCluster(c));
    }
    let clipped: Vec<f64> = probs.iter().map(|v| v.clamp(1e-12, 1.0)).collect();
    let total: f64 = clipped.iter().sum();
    let probs = clipped.iter().map(|v| v / total).collect();
    Ok(EllipticalParams { means, scatter, probs })
}

/// Split a variance matrix Σₓ into the normalized scatter Σₓ/σ²ₓ and σ²ₓ,
/// where σ²ₓ is the first diagonal entry.
pub fn scatter_from_variance(sigma_x: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    if !sigma_x.is_square() || sigma_x.nrows() == 0 {
        return Err(ScedError::InvalidInput("variance matrix must be square".into()));
    }
    if !linalg::is_spd(sigma_x) {
        return Err(ScedError::NotSpd);
    }
    let s2 = sigma_x[(0, 0)];
    let mut scatter = linalg::symmetrize(sigma_x) / s2;
    scatter[(0, 0)] = 1.0;
    Ok((scatter, s2))
}

/// The monotone radial map Ψ(t) = −d₀ + (d₀^{p/2} + t^{p/2})^{2/p} and its
/// inverse ψ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub d0: f64,
    pub p: usize,
}

/// ln(1 + eᵃ) without overflow.
fn softplus(a: f64) -> f64 {
    if a > 35.0 {
        a + (-a).exp()
    } else if a < -35.0 {
        a.exp()
    } else {
        a.exp().ln_1p()
    }
}

/// ln(eᵇ − 1) for b > 0.
fn ln_expm1(b: f64) -> f64 {
    if b > 35.0 {
        b + (-(-b).exp()).ln_1p()
    } else {
        b.exp_m1().ln()
    }
}

impl TransformSpec {
    pub fn new(d0: f64, p: usize) -> Result<Self> {
        if !(d0 > 0.0) || !d0.is_finite() {
            return Err(ScedError::InvalidInput(format!("d0 must be positive, got {d0}")));
        }
        if p == 0 {
            return Err(ScedError::InvalidInput("dimension must be >= 1".into()));
        }
        Ok(TransformSpec { d0, p })
    }

    fn half_p(&self) -> f64 {
        self.p as f64 / 2.0
    }

    /// Ψ(t): quadratic form to transformed radius.
    pub fn forward(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        if self.p == 2 {
            return t;
        }
        let a = self.half_p() * (t / self.d0).ln();
        self.d0 * (softplus(a) / self.half_p()).exp_m1()
    }

    /// ψ = Ψ⁻¹.
    pub fn inverse(&self, y: f64) -> f64 {
        if y <= 0.0 {
            return 0.0;
        }
        if self.p == 2 {
            return y;
        }
        let b = self.half_p() * (y / self.d0).ln_1p();
        self.d0 * (ln_expm1(b) / self.half_p()).exp()
    }

    /// ψ⁽¹⁾(y), the derivative of the inverse map. Infinite at 0 when p > 2.
    pub fn inverse_deriv(&self, y: f64) -> f64 {
        if self.p == 2 {
            return 1.0;
        }
        let hp = self.half_p();
        if y <= 0.0 {
            return if self.p > 2 { f64::INFINITY } else { 0.0 };
        }
        // ψ' = A^{2/p − 1} (y + d₀)^{p/2 − 1}, A = (y + d₀)^{p/2} − d₀^{p/2}
        let b = hp * (y / self.d0).ln_1p();
        let ln_a = hp * self.d0.ln() + ln_expm1(b);
        ((1.0 / hp - 1.0) * ln_a + (hp - 1.0) * (y + self.d0).ln()).exp()
    }

    /// ln w(y) for w(y) = Γ(p/2) ψ(y)^{1−p/2} / (|πΣ|^{1/2} ψ⁽¹⁾(y)).
    ///
    /// Substituting ψ and ψ⁽¹⁾ collapses the ratio to
    /// Γ(p/2) (y + d₀)^{1 − p/2} / (π^{p/2} |Σ|^{1/2}), finite at y = 0.
    pub fn log_weight(&self, y: f64, log_det_scatter: f64) -> f64 {
        let hp = self.half_p();
        ln_gamma(hp) - hp * std::f64::consts::PI.ln() - 0.5 * log_det_scatter
            + (1.0 - hp) * (y.max(0.0) + self.d0).ln()
    }

    /// The weight evaluated from its defining expression; used to cross-check
    /// [`TransformSpec::log_weight`].
    pub fn weight_direct(&self, y: f64, det_scatter: f64) -> f64 {
        let hp = self.half_p();
        let pi = std::f64::consts::PI;
        ln_gamma(hp).exp() * self.inverse(y).powf(1.0 - hp)
            / ((pi.powi(self.p as i32) * det_scatter).sqrt() * self.inverse_deriv(y))
    }
}

/// Which pseudo-likelihood drives estimation and refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Hard-assignment log-pseudo-likelihood.
    Pl1,
    /// Log-pseudo-marginal-likelihood.
    #[default]
    Pl2,
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Objective::Pl1 => "pl1",
            Objective::Pl2 => "pl2",
        })
    }
}

impl std::str::FromStr for Objective {
    type Err = ScedError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pl1" => Ok(Objective::Pl1),
            "pl2" => Ok(Objective::Pl2),
            other => Err(ScedError::InvalidInput(format!("unknown objective '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Inclusive range of cluster counts.
    pub k_range: (usize, usize),
    pub d0: f64,
    pub lambda_grid_size: usize,
    pub admm_penalty: f64,
    pub admm_tol: f64,
    pub admm_max_iter: usize,
    /// Evaluate the λ path warm-started from the previous solution.
    pub warm_start: bool,
    pub cv_grid_size: usize,
    /// CV bandwidth grid limits as multiples of sd·n^{−1/5}.
    pub cv_span: (f64, f64),
    pub refine_max_iter: usize,
    pub kmeans_restarts: usize,
    pub init_max_iter: usize,
    pub objective: Objective,
    /// Nelder–Mead evaluation budget per maximization, as a multiple of the
    /// parameter dimension.
    pub optimizer_evals_per_dim: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            k_range: (1, 6),
            d0: 1.0,
            lambda_grid_size: 20,
            admm_penalty: 1.0,
            admm_tol: 1e-6,
            admm_max_iter: 500,
            warm_start: true,
            cv_grid_size: 40,
            cv_span: crate::density::DEFAULT_CV_SPAN,
            refine_max_iter: 20,
            kmeans_restarts: 10,
            init_max_iter: 20,
            objective: Objective::Pl2,
            optimizer_evals_per_dim: 200,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.k_range;
        if lo == 0 || lo > hi {
            return Err(ScedError::InvalidInput(format!("empty k range {lo}:{hi}")));
        }
        if !(self.d0 > 0.0) {
            return Err(ScedError::InvalidInput("d0 must be positive".into()));
        }
        if !(self.admm_tol > 0.0) || !(self.admm_penalty > 0.0) {
            return Err(ScedError::InvalidInput("tolerances must be positive".into()));
        }
        if !(self.cv_span.0 > 0.0 && self.cv_span.0 < self.cv_span.1 && self.cv_span.1.is_finite()) {
            return Err(ScedError::InvalidInput("cv span must be an increasing positive pair".into()));
        }
        if self.lambda_grid_size < 2 || self.cv_grid_size < 2 {
            return Err(ScedError::InvalidInput("grids need at least two points".into()));
        }
        if self.admm_max_iter == 0 || self.refine_max_iter == 0 || self.kmeans_restarts == 0 {
            return Err(ScedError::InvalidInput("iteration caps must be positive".into()));
        }
        Ok(())
    }

    pub fn with_k(&self, k: usize) -> FitConfig {
        FitConfig { k_range: (k, k), ..self.clone() }
    }
}
