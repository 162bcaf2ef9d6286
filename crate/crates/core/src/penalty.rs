//! Separation-penalty estimation: minimize
//! ½ Σᵢ (Xᵢ − βᵢ)ᵀ W (Xᵢ − βᵢ) + λ Σᵢ min_c ‖W^{1/2}(βᵢ − μ_c)‖₁
//! by a DC-linearized ADMM, along a grid of λ values.
//!
//! The solver runs in whitened coordinates zᵢ = W^{1/2}Xᵢ, bᵢ = W^{1/2}βᵢ,
//! m_c = W^{1/2}μ_c where every update is Euclidean. The penalty
//! min_c aᵢ_c is split as Σ_c aᵢ_c − max_c Σ_{c'≠c} aᵢ_c'; the convex sum is
//! handled by the ADMM splitting and the concave part is linearized at the
//! current iterate, which contributes λ Σ_{c≠c*(i)} sign(bᵢ − m_c).

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScedError};
use crate::init::InitResult;
use crate::linalg;
use crate::model::{Dataset, FitConfig, Partition};

/// W together with the symmetric roots and inverse needed by the updates.
#[derive(Debug, Clone)]
pub struct WeightMetric {
    w: DMatrix<f64>,
    half: DMatrix<f64>,
    inv_half: DMatrix<f64>,
    inv: DMatrix<f64>,
}

impl WeightMetric {
    pub fn new(w: &DMatrix<f64>) -> Result<Self> {
        if !w.is_square() || !linalg::is_spd(w) {
            return Err(ScedError::SingularW);
        }
        let half = linalg::sym_power(w, 0.5).map_err(|_| ScedError::SingularW)?;
        let inv_half = linalg::sym_power(w, -0.5).map_err(|_| ScedError::SingularW)?;
        let inv = linalg::spd_inverse(w).map_err(|_| ScedError::SingularW)?;
        Ok(WeightMetric { w: linalg::symmetrize(w), half, inv_half, inv })
    }

    /// W = Σₓ⁻¹.
    pub fn from_variance(sigma_x: &DMatrix<f64>) -> Result<Self> {
        let w = linalg::spd_inverse(sigma_x).map_err(|_| ScedError::SingularW)?;
        Self::new(&w)
    }

    pub fn identity(p: usize) -> Self {
        let i = DMatrix::identity(p, p);
        WeightMetric { w: i.clone(), half: i.clone(), inv_half: i.clone(), inv: i }
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn half(&self) -> &DMatrix<f64> {
        &self.half
    }

    pub fn inv_half(&self) -> &DMatrix<f64> {
        &self.inv_half
    }

    pub fn inv(&self) -> &DMatrix<f64> {
        &self.inv
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }
}

/// Componentwise sign(vⱼ)·max(|vⱼ| − λ, 0).
pub fn soft_threshold(v: &[f64], lambda: f64) -> Vec<f64> {
    v.iter().map(|&x| soft(x, lambda)).collect()
}

#[inline]
fn soft(x: f64, lambda: f64) -> f64 {
    if x > lambda {
        x - lambda
    } else if x < -lambda {
        x + lambda
    } else {
        0.0
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn to_rows(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        out.extend(m.row(i).iter());
    }
    out
}

fn from_rows(v: &[f64], r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(r, c, v)
}

/// Apply `m` to every row of a row-major block.
fn transform_rows(m: &DMatrix<f64>, rows: &[f64], p: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows.len()];
    for (src, dst) in rows.chunks_exact(p).zip(out.chunks_exact_mut(p)) {
        linalg::mat_vec(m, src, dst);
    }
    out
}

fn nearest_l1(point: &[f64], centers: &[f64], p: usize) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, m) in centers.chunks_exact(p).enumerate() {
        let d = l1(point, m);
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

/// λ₁ = min over pairs with β⁰ᵢ ≠ μ⁰_c of ‖W^{1/2}(β⁰ᵢ − μ⁰_c)‖₁ and
/// λ_J = the max over all pairs, with `j` log-spaced points in between.
///
/// When every nonzero distance is the same (e.g. β⁰ built from the same k
/// centers with k = 2) the lower end is moved to λ_J / 10 so the grid still
/// spans an interval.
pub fn lambda_grid(beta0: &DMatrix<f64>, mu0: &DMatrix<f64>, w_half: &DMatrix<f64>, j: usize) -> Result<Vec<f64>> {
    if j < 2 {
        return Err(ScedError::InvalidInput("lambda grid needs at least two points".into()));
    }
    let p = beta0.ncols();
    let b = transform_rows(w_half, &to_rows(beta0), p);
    let m = transform_rows(w_half, &to_rows(mu0), p);
    let mut dists = Vec::with_capacity(b.len() / p * mu0.nrows());
    for bi in b.chunks_exact(p) {
        for mc in m.chunks_exact(p) {
            dists.push(l1(bi, mc));
        }
    }
    let hi = dists.iter().cloned().fold(0.0, f64::max);
    let tol = 1e-10 * (1.0 + hi);
    let lo = dists.iter().cloned().filter(|&d| d > tol).fold(f64::INFINITY, f64::min);
    if !lo.is_finite() {
        return Err(ScedError::DegenerateGrid);
    }
    let lo = if lo >= hi * (1.0 - 1e-12) { hi / 10.0 } else { lo };
    let (a, z) = (lo.ln(), hi.ln());
    Ok((0..j)
        .map(|t| {
            if t == 0 {
                lo
            } else if t == j - 1 {
                hi
            } else {
                (a + (z - a) * t as f64 / (j - 1) as f64).exp()
            }
        })
        .collect())
}

/// Row i of ∂_β S for the concave part: W^{1/2}ᵀ Σ_{c ≠ c*} sign(W^{1/2}(βᵢ − μ_c)),
/// with c* the L1-nearest center.
pub fn dc_subgradient(beta_i: &[f64], mu: &DMatrix<f64>, w_half: &DMatrix<f64>) -> Vec<f64> {
    let p = beta_i.len();
    let mut b = vec![0.0; p];
    linalg::mat_vec(w_half, beta_i, &mut b);
    let m = transform_rows(w_half, &to_rows(mu), p);
    let star = nearest_l1(&b, &m, p);
    let mut s = vec![0.0; p];
    for (c, mc) in m.chunks_exact(p).enumerate() {
        if c == star {
            continue;
        }
        for j in 0..p {
            s[j] += sign(b[j] - mc[j]);
        }
    }
    let mut out = vec![0.0; p];
    linalg::mat_vec(&w_half.transpose(), &s, &mut out);
    out
}

/// βᵢ = [Xᵢ + Σ_c (μ_c + W^{-1/2}δᵢ_c − W^{-1/2}νᵢ_c) + W⁻¹ λ ∂Sᵢ] / (k + 1).
/// `delta_i` and `nu_i` hold the k vectors δᵢ_c, νᵢ_c back to back.
pub fn beta_update(
    x_i: &[f64],
    mu: &DMatrix<f64>,
    delta_i: &[f64],
    nu_i: &[f64],
    w: &WeightMetric,
    subgrad_i: &[f64],
    lambda: f64,
) -> Vec<f64> {
    let (k, p) = mu.shape();
    let mut diff = vec![0.0; p];
    for c in 0..k {
        for j in 0..p {
            diff[j] += delta_i[c * p + j] - nu_i[c * p + j];
        }
    }
    let mut acc = vec![0.0; p];
    linalg::mat_vec(w.inv_half(), &diff, &mut acc);
    let mut sg = vec![0.0; p];
    linalg::mat_vec(w.inv(), subgrad_i, &mut sg);
    (0..p)
        .map(|j| {
            let mu_sum: f64 = (0..k).map(|c| mu[(c, j)]).sum();
            (x_i[j] + mu_sum + acc[j] + lambda * sg[j]) / (k + 1) as f64
        })
        .collect()
}

fn median_in_place(v: &mut [f64]) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (_, hi, _) = v.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let upper = *hi;
    if n % 2 == 1 {
        upper
    } else {
        let lower = v[..mid].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Whitened median update. Returns the new centers and the clusters whose
/// assignment set was empty (those keep their previous value).
fn mu_update_z(b: &[f64], m_prev: &[f64], p: usize) -> (Vec<f64>, Vec<usize>) {
    let k = m_prev.len() / p;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, bi) in b.chunks_exact(p).enumerate() {
        members[nearest_l1(bi, m_prev, p)].push(i);
    }
    let mut m = m_prev.to_vec();
    let mut carried = Vec::new();
    let mut buf = Vec::new();
    for (c, idx) in members.iter().enumerate() {
        if idx.is_empty() {
            carried.push(c);
            continue;
        }
        for j in 0..p {
            buf.clear();
            buf.extend(idx.iter().map(|&i| b[i * p + j]));
            m[c * p + j] = median_in_place(&mut buf);
        }
    }
    (m, carried)
}

/// μ_c = W^{-1/2} · median{W^{1/2}β̂ᵢ : c is the L1-nearest center of W^{1/2}β̂ᵢ
/// among W^{1/2}μ_prev}, coordinatewise; an empty set keeps μ_c.
pub fn mu_update(beta: &DMatrix<f64>, mu_prev: &DMatrix<f64>, w: &WeightMetric) -> (DMatrix<f64>, Vec<usize>) {
    let p = beta.ncols();
    let b = transform_rows(w.half(), &to_rows(beta), p);
    let m_prev = transform_rows(w.half(), &to_rows(mu_prev), p);
    let (m, carried) = mu_update_z(&b, &m_prev, p);
    let mut mu = from_rows(&transform_rows(w.inv_half(), &m, p), mu_prev.nrows(), p);
    for &c in &carried {
        mu.set_row(c, &mu_prev.row(c));
    }
    (mu, carried)
}

/// label(i) = argmin_c ‖W^{1/2}(βᵢ − μ_c)‖₁; ties go to the lowest index.
pub fn assign_clusters_l1(beta: &DMatrix<f64>, mu: &DMatrix<f64>, w_half: &DMatrix<f64>) -> Partition {
    let p = beta.ncols();
    let b = transform_rows(w_half, &to_rows(beta), p);
    let m = transform_rows(w_half, &to_rows(mu), p);
    let labels = b.chunks_exact(p).map(|bi| nearest_l1(bi, &m, p)).collect();
    Partition::new(labels, mu.nrows()).expect("labels are below k")
}

/// Solver state. `delta` and `nu` are n×k×p arrays stored with index
/// `(i·k + c)·p + j`, in whitened coordinates.
#[derive(Debug, Clone)]
pub struct AdmmState {
    pub beta: DMatrix<f64>,
    pub mu: DMatrix<f64>,
    pub delta: Vec<f64>,
    pub nu: Vec<f64>,
    pub w_half: DMatrix<f64>,
    pub lambda: f64,
    pub iter: usize,
    pub primal_residual: f64,
    /// (1/n) Σᵢ Σ_c ‖Δ W^{1/2}(βᵢ − μ_c)‖ over the last sweep. The primal
    /// residual vanishes as soon as the duals saturate, so convergence also
    /// requires this to fall below the tolerance.
    pub dual_residual: f64,
    pub converged: bool,
    /// Number of center updates that found an empty assignment set.
    pub carried_forward: usize,
}

impl AdmmState {
    /// (1/n) Σᵢ Σ_c ‖W^{1/2}(βᵢ − μ_c) − δᵢ_c‖ from the stored fields.
    pub fn recompute_residual(&self) -> f64 {
        let p = self.beta.ncols();
        let k = self.mu.nrows();
        let n = self.beta.nrows();
        let b = transform_rows(&self.w_half, &to_rows(&self.beta), p);
        let m = transform_rows(&self.w_half, &to_rows(&self.mu), p);
        residual(&b, &m, &self.delta, n, k, p)
    }

    /// ½ Σᵢ (Xᵢ − βᵢ)ᵀ W (Xᵢ − βᵢ) + λ Σᵢ min_c ‖W^{1/2}(βᵢ − μ_c)‖₁.
    pub fn objective(&self, data: &Dataset) -> f64 {
        let p = data.p();
        let z = transform_rows(&self.w_half, data.values(), p);
        let b = transform_rows(&self.w_half, &to_rows(&self.beta), p);
        let m = transform_rows(&self.w_half, &to_rows(&self.mu), p);
        sp_objective(&z, &b, &m, self.lambda, p)
    }
}

fn sp_objective(z: &[f64], b: &[f64], m: &[f64], lambda: f64, p: usize) -> f64 {
    z.chunks_exact(p)
        .zip(b.chunks_exact(p))
        .map(|(zi, bi)| {
            let fit: f64 = zi.iter().zip(bi).map(|(a, c)| (a - c) * (a - c)).sum();
            let pen = m.chunks_exact(p).map(|mc| l1(bi, mc)).fold(f64::INFINITY, f64::min);
            0.5 * fit + lambda * pen
        })
        .sum()
}

fn residual(b: &[f64], m: &[f64], delta: &[f64], n: usize, k: usize, p: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        for c in 0..k {
            let base = (i * k + c) * p;
            let s: f64 = (0..p)
                .map(|j| {
                    let r = b[i * p + j] - m[c * p + j] - delta[base + j];
                    r * r
                })
                .sum();
            total += s.sqrt();
        }
    }
    total / n as f64
}

/// Whitened working copy of the iterates.
struct ZSolver {
    z: Vec<f64>,
    b: Vec<f64>,
    m: Vec<f64>,
    delta: Vec<f64>,
    nu: Vec<f64>,
    n: usize,
    k: usize,
    p: usize,
    lambda: f64,
    carried: usize,
}

impl ZSolver {
    fn new(z: Vec<f64>, b: Vec<f64>, m: Vec<f64>, lambda: f64, p: usize) -> Self {
        let n = z.len() / p;
        let k = m.len() / p;
        let mut delta = vec![0.0; n * k * p];
        for i in 0..n {
            for c in 0..k {
                for j in 0..p {
                    delta[(i * k + c) * p + j] = b[i * p + j] - m[c * p + j];
                }
            }
        }
        let nu = vec![0.0; n * k * p];
        ZSolver { z, b, m, delta, nu, n, k, p, lambda, carried: 0 }
    }

    /// One β → μ → δ → ν sweep; returns the primal residual and the change
    /// (1/n) Σᵢ Σ_c ‖Δ(bᵢ − m_c)‖ of the constrained differences.
    fn step(&mut self) -> (f64, f64) {
        let (n, k, p, lambda) = (self.n, self.k, self.p, self.lambda);
        let (b_old, m_old) = (self.b.clone(), self.m.clone());
        let scale = 1.0 / (k + 1) as f64;
        let mut m_sum = vec![0.0; p];
        for mc in self.m.chunks_exact(p) {
            for j in 0..p {
                m_sum[j] += mc[j];
            }
        }
        for i in 0..n {
            let bi = &self.b[i * p..(i + 1) * p];
            let star = nearest_l1(bi, &self.m, p);
            let mut next = vec![0.0; p];
            for j in 0..p {
                let mut acc = self.z[i * p + j] + m_sum[j];
                for c in 0..k {
                    let idx = (i * k + c) * p + j;
                    acc += self.delta[idx] - self.nu[idx];
                    if c != star {
                        acc += lambda * sign(bi[j] - self.m[c * p + j]);
                    }
                }
                next[j] = acc * scale;
            }
            self.b[i * p..(i + 1) * p].copy_from_slice(&next);
        }
        let (m, carried) = mu_update_z(&self.b, &self.m, p);
        self.m = m;
        self.carried += carried.len();
        let mut total = 0.0;
        for i in 0..n {
            for c in 0..k {
                let base = (i * k + c) * p;
                let mut sq = 0.0;
                for j in 0..p {
                    let d = self.b[i * p + j] - self.m[c * p + j];
                    let nd = soft(d + self.nu[base + j], lambda);
                    self.delta[base + j] = nd;
                    let r = d - nd;
                    self.nu[base + j] += r;
                    sq += r * r;
                }
                total += sq.sqrt();
            }
        }
        let mut moved = 0.0;
        for i in 0..n {
            for c in 0..k {
                let sq: f64 = (0..p)
                    .map(|j| {
                        let d = (self.b[i * p + j] - b_old[i * p + j]) - (self.m[c * p + j] - m_old[c * p + j]);
                        d * d
                    })
                    .sum();
                moved += sq.sqrt();
            }
        }
        (total / n as f64, moved / n as f64)
    }
}

/// Run the DC-linearized ADMM for one λ from (β⁰, μ⁰), with δ⁰ᵢ_c =
/// W^{1/2}(β⁰ᵢ − μ⁰_c) and ν⁰ = 0. Hitting `max_iter` is not an error; the
/// returned state has `converged = false`.
pub fn admm_fit(
    data: &Dataset,
    w: &WeightMetric,
    lambda: f64,
    beta0: &DMatrix<f64>,
    mu0: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<AdmmState> {
    let p = data.p();
    if beta0.shape() != (data.n(), p) || mu0.ncols() != p || w.dim() != p {
        return Err(ScedError::InvalidInput("admm inputs have inconsistent shapes".into()));
    }
    let z = transform_rows(w.half(), data.values(), p);
    let b = transform_rows(w.half(), &to_rows(beta0), p);
    let m = transform_rows(w.half(), &to_rows(mu0), p);
    let solver = ZSolver::new(z, b, m, lambda, p);
    Ok(run(solver, w, tol, max_iter))
}

/// Continue from a previous state at a new λ, keeping δ and ν.
pub fn admm_warm(data: &Dataset, w: &WeightMetric, lambda: f64, prev: &AdmmState, tol: f64, max_iter: usize) -> AdmmState {
    let p = data.p();
    let z = transform_rows(w.half(), data.values(), p);
    let b = transform_rows(w.half(), &to_rows(&prev.beta), p);
    let m = transform_rows(w.half(), &to_rows(&prev.mu), p);
    let mut solver = ZSolver::new(z, b, m, lambda, p);
    solver.delta = prev.delta.clone();
    solver.nu = prev.nu.clone();
    run(solver, w, tol, max_iter)
}

fn run(mut s: ZSolver, w: &WeightMetric, tol: f64, max_iter: usize) -> AdmmState {
    let (mut res, mut dual) = (f64::INFINITY, f64::INFINITY);
    let mut iter = 0;
    while iter < max_iter {
        (res, dual) = s.step();
        iter += 1;
        if res < tol && dual < tol {
            break;
        }
    }
    let converged = res < tol && dual < tol;
    if !converged {
        log::debug!("admm hit {max_iter} iterations at lambda {:.4e}, residual {res:.3e}", s.lambda);
    }
    let p = s.p;
    AdmmState {
        beta: from_rows(&transform_rows(w.inv_half(), &s.b, p), s.n, p),
        mu: from_rows(&transform_rows(w.inv_half(), &s.m, p), s.k, p),
        delta: s.delta,
        nu: s.nu,
        w_half: w.half().clone(),
        lambda: s.lambda,
        iter,
        primal_residual: res,
        dual_residual: dual,
        converged,
        carried_forward: s.carried,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEntry {
    pub lambda: f64,
    #[serde(skip)]
    pub beta: DMatrix<f64>,
    #[serde(skip)]
    pub mu: DMatrix<f64>,
    #[serde(skip)]
    pub partition: Option<Partition>,
    /// Σᵢ (Xᵢ − β̂ᵢ)ᵀ(Xᵢ − β̂ᵢ).
    pub fit_ss: f64,
    pub n_clusters: usize,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Default)]
pub struct LambdaPath {
    pub grid: Vec<f64>,
    pub entries: Vec<PathEntry>,
}

fn fit_ss(data: &Dataset, beta: &DMatrix<f64>) -> f64 {
    data.rows()
        .enumerate()
        .map(|(i, x)| x.iter().enumerate().map(|(j, v)| (v - beta[(i, j)]).powi(2)).sum::<f64>())
        .sum()
}

fn path_entry(data: &Dataset, st: &AdmmState) -> PathEntry {
    let partition = assign_clusters_l1(&st.beta, &st.mu, &st.w_half);
    PathEntry {
        lambda: st.lambda,
        fit_ss: fit_ss(data, &st.beta),
        n_clusters: partition.nonempty_clusters(),
        partition: Some(partition),
        beta: st.beta.clone(),
        mu: st.mu.clone(),
        iterations: st.iter,
        converged: st.converged,
    }
}

/// Evaluate the whole grid, warm-started sequentially or cold-started in parallel.
pub fn run_path(
    data: &Dataset,
    w: &WeightMetric,
    grid: &[f64],
    beta0: &DMatrix<f64>,
    mu0: &DMatrix<f64>,
    config: &FitConfig,
) -> Result<LambdaPath> {
    let (tol, max_iter) = (config.admm_tol, config.admm_max_iter);
    let entries = if config.warm_start {
        let mut out = Vec::with_capacity(grid.len());
        let mut prev: Option<AdmmState> = None;
        for &lambda in grid {
            let st = match &prev {
                Some(s) => admm_warm(data, w, lambda, s, tol, max_iter),
                None => admm_fit(data, w, lambda, beta0, mu0, tol, max_iter)?,
            };
            log::debug!("lambda {lambda:.4e}: {} iterations, residual {:.3e}", st.iter, st.primal_residual);
            out.push(path_entry(data, &st));
            prev = Some(st);
        }
        out
    } else {
        grid.par_iter()
            .map(|&lambda| admm_fit(data, w, lambda, beta0, mu0, tol, max_iter).map(|st| path_entry(data, &st)))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(LambdaPath { grid: grid.to_vec(), entries })
}

/// Index of the entry with exactly `k_target` nonempty clusters and the least
/// fit_ss; failing that, the most nonempty clusters and then the least fit_ss.
pub fn select_lambda(path: &LambdaPath, k_target: usize) -> usize {
    let proper = path
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.n_clusters == k_target)
        .min_by(|a, b| a.1.fit_ss.total_cmp(&b.1.fit_ss));
    if let Some((idx, _)) = proper {
        return idx;
    }
    path.entries
        .iter()
        .enumerate()
        .max_by(|a, b| {
            a.1.n_clusters
                .cmp(&b.1.n_clusters)
                .then(b.1.fit_ss.total_cmp(&a.1.fit_ss))
                .then(b.0.cmp(&a.0))
        })
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Residual-based and cluster-based variance estimates,
/// (1/n) Σ (Xᵢ − β̂ᵢ)(Xᵢ − β̂ᵢ)ᵀ and (1/n) Σ (Xᵢ − μ̂_{c(i)})(Xᵢ − μ̂_{c(i)})ᵀ.
pub fn variance_estimates(
    data: &Dataset,
    beta: &DMatrix<f64>,
    mu: &DMatrix<f64>,
    partition: &Partition,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let p = data.p();
    let n = data.n() as f64;
    let mut res = DMatrix::zeros(p, p);
    let mut clu = DMatrix::zeros(p, p);
    let mut r = vec![0.0; p];
    for (i, x) in data.rows().enumerate() {
        for j in 0..p {
            r[j] = x[j] - beta[(i, j)];
        }
        linalg::add_outer(&mut res, &r, 1.0);
        let c = partition.label(i);
        for j in 0..p {
            r[j] = x[j] - mu[(c, j)];
        }
        linalg::add_outer(&mut clu, &r, 1.0);
    }
    (res / n, clu / n)
}

/// 2p‖W^{1/2}‖₂ √(ln n / d₀) with d₀ = 1: the smallest λ covered by the
/// consistency theory.
pub fn lambda_theory_floor(w_half: &DMatrix<f64>, n: usize) -> f64 {
    let p = w_half.nrows() as f64;
    let eig = nalgebra::SymmetricEigen::new(linalg::symmetrize(w_half));
    let norm = eig.eigenvalues.iter().map(|v| v.abs()).fold(0.0, f64::max);
    2.0 * p * norm * (n as f64).ln().sqrt()
}

/// Result of the separation-penalty stage for one k.
#[derive(Debug, Clone)]
pub struct SpFit {
    pub k: usize,
    pub weight: WeightMetric,
    /// ℓ of the initial clustering used for β⁰.
    pub start_ell: usize,
    pub path: LambdaPath,
    pub selected: usize,
    pub lambda: f64,
    pub beta: DMatrix<f64>,
    pub means: DMatrix<f64>,
    pub partition: Partition,
    pub sigma_residual: DMatrix<f64>,
    pub sigma_cluster: DMatrix<f64>,
    pub below_theory_floor: bool,
}

/// Separation-penalty fit for k ≥ 2 clusters from the refined initial
/// clusterings. W is the inverse pooled variance at ℓ = k, μ⁰ = μ̌ᵏ, and β⁰
/// is the candidate β̌^ℓ (ℓ = k, …, k̄) whose ADMM solution at the largest
/// λ of the ℓ = k grid has the lowest objective.
pub fn fit_sp(data: &Dataset, init: &InitResult, k: usize, config: &FitConfig) -> Result<SpFit> {
    let base = init
        .get(k)
        .ok_or_else(|| ScedError::InvalidInput(format!("no initial clustering for k = {k}")))?;
    let weight = WeightMetric::from_variance(&base.pooled_var)?;
    let mu0 = base.means.clone();
    let (tol, max_iter) = (config.admm_tol, config.admm_max_iter);

    let candidates: Vec<_> = init.entries.iter().filter(|e| e.ell >= k).collect();
    let (start_ell, beta0) = if candidates.len() > 1 {
        let base_grid = lambda_grid(&base.beta(), &mu0, weight.half(), 2)?;
        let lambda_ref = base_grid[1];
        let scored = candidates
            .par_iter()
            .map(|e| {
                let b0 = e.beta();
                admm_fit(data, &weight, lambda_ref, &b0, &mu0, tol, max_iter).map(|st| (e.ell, b0, st.objective(data)))
            })
            .collect::<Result<Vec<_>>>()?;
        let best = scored
            .into_iter()
            .min_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)))
            .expect("nonempty candidates");
        (best.0, best.1)
    } else {
        (k, base.beta())
    };

    let grid = lambda_grid(&beta0, &mu0, weight.half(), config.lambda_grid_size)?;
    let path = run_path(data, &weight, &grid, &beta0, &mu0, config)?;
    let selected = select_lambda(&path, k);
    let entry = &path.entries[selected];
    let partition = entry.partition.clone().expect("path entries carry partitions");
    let (sigma_residual, sigma_cluster) = variance_estimates(data, &entry.beta, &entry.mu, &partition);
    let floor = lambda_theory_floor(weight.half(), data.n());
    let below = entry.lambda < floor;
    if below {
        log::warn!(
            "selected lambda {:.4e} is below the theoretical floor {:.4e} for k = {k}",
            entry.lambda,
            floor
        );
    }
    Ok(SpFit {
        k,
        start_ell,
        lambda: entry.lambda,
        beta: entry.beta.clone(),
        means: entry.mu.clone(),
        partition,
        sigma_residual,
        sigma_cluster,
        selected,
        path,
        weight,
        below_theory_floor: below,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::initialize;
    use crate::rng;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn grid_endpoints() {
        let g = lambda_grid(&col(&[0.0, 4.0]), &col(&[0.0, 3.0]), &DMatrix::identity(1, 1), 5).unwrap();
        assert_eq!(g[0], 1.0);
        assert_eq!(g[4], 4.0);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        let g2 = lambda_grid(&col(&[0.0, 4.0]), &col(&[0.0, 3.0]), &(DMatrix::identity(1, 1) * 2.0), 5).unwrap();
        assert_eq!(g2[0], 2.0);
        assert_eq!(g2[4], 8.0);
    }

    #[test]
    fn grid_degenerate() {
        let r = lambda_grid(&col(&[1.0, 1.0]), &col(&[1.0]), &DMatrix::identity(1, 1), 4);
        assert!(matches!(r, Err(ScedError::DegenerateGrid)));
        // only one nonzero distance: the lower end drops to a tenth
        let g = lambda_grid(&col(&[0.0, 2.0]), &col(&[0.0, 2.0]), &DMatrix::identity(1, 1), 3).unwrap();
        assert_eq!(g, vec![0.2, (0.2f64.ln() * 0.5 + 2f64.ln() * 0.5).exp(), 2.0]);
    }

    fn grid_prox(v: f64, lambda: f64) -> f64 {
        // brute-force minimizer of ½(x − v)² + λ|x| on a fine grid
        let f = |x: f64| 0.5 * (x - v).powi(2) + lambda * x.abs();
        let lo = v.min(0.0) - 1.0;
        let hi = v.max(0.0) + 1.0;
        let steps = 200_000;
        let mut best = (lo, f(lo));
        for s in 0..=steps {
            let x = lo + (hi - lo) * s as f64 / steps as f64;
            let fx = f(x);
            if fx < best.1 {
                best = (x, fx);
            }
        }
        let (mut a, mut b) = (best.0 - (hi - lo) / steps as f64, best.0 + (hi - lo) / steps as f64);
        for _ in 0..100 {
            let m1 = a + (b - a) / 3.0;
            let m2 = b - (b - a) / 3.0;
            if f(m1) <= f(m2) {
                b = m2;
            } else {
                a = m1;
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(soft_threshold(&[1.5, -2.0], 0.0), vec![1.5, -2.0]);
        assert_eq!(soft_threshold(&[0.5, -0.2], 1.0), vec![0.0, 0.0]);
        let v = [3.0, -2.0, 0.5];
        let got = soft_threshold(&v, 1.0);
        for (g, &vj) in got.iter().zip(&v) {
            assert!((g - grid_prox(vj, 1.0)).abs() < 1e-6);
        }
        assert_eq!(got, vec![2.0, -1.0, 0.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn soft_threshold_is_the_prox(v in -5.0f64..5.0, lambda in 0.0f64..3.0) {
            let got = soft_threshold(&[v], lambda)[0];
            prop_assert!((got - grid_prox(v, lambda)).abs() < 1e-6);
        }

        #[test]
        fn median_minimizes_l1(pts in prop::collection::vec(-10.0f64..10.0, 1..15), eps in 1e-3f64..0.5) {
            let mut buf = pts.clone();
            let med = median_in_place(&mut buf);
            let cost = |z: f64| pts.iter().map(|x| (x - z).abs()).sum::<f64>();
            prop_assert!(cost(med) <= cost(med + eps) + 1e-12);
            prop_assert!(cost(med) <= cost(med - eps) + 1e-12);
        }

        #[test]
        fn assignment_is_affine_equivariant(
            pts in prop::collection::vec(-5.0f64..5.0, 8),
            ctr in prop::collection::vec(-5.0f64..5.0, 4),
            a in prop::collection::vec(0.2f64..5.0, 2),
            shift in prop::collection::vec(-3.0f64..3.0, 2),
        ) {
            let beta = DMatrix::from_row_slice(4, 2, &pts);
            let mu = DMatrix::from_row_slice(2, 2, &ctr);
            let wh = DMatrix::from_row_slice(2, 2, &[1.3, 0.2, 0.2, 0.7]);
            let base = assign_clusters_l1(&beta, &mu, &wh);
            let amat = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(a.clone()));
            let ainv = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(a.iter().map(|v| 1.0 / v).collect()));
            let moved = |m: &DMatrix<f64>| {
                let mut out = m * &amat;
                for mut r in out.row_iter_mut() {
                    r[0] += shift[0];
                    r[1] += shift[1];
                }
                out
            };
            let wh2 = &wh * &ainv;
            let other = assign_clusters_l1(&moved(&beta), &moved(&mu), &wh2);
            prop_assert_eq!(base.labels(), other.labels());
        }
    }

    #[test]
    fn beta_update_examples() {
        let w = WeightMetric::identity(1);
        let b = beta_update(&[4.0], &col(&[2.0]), &[0.0], &[0.0], &w, &[0.0], 1.0);
        assert_eq!(b, vec![3.0]);
        let b = beta_update(&[0.0, 0.0], &DMatrix::zeros(1, 2), &[0.0; 2], &[0.0; 2], &WeightMetric::identity(2), &[0.0; 2], 0.7);
        assert_eq!(b, vec![0.0, 0.0]);
        let b = beta_update(&[4.0], &col(&[1.0, 3.0]), &[0.5, -0.5], &[0.0, 0.0], &w, &[0.0], 1.0);
        assert!((b[0] - 8.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn whitened_step_matches_original_coordinates() {
        // one sweep of the whitened solver against the explicit β update
        let w = WeightMetric::new(&DMatrix::from_row_slice(2, 2, &[2.0, 0.4, 0.4, 1.0])).unwrap();
        let data = Dataset::new(vec![0.3, 1.2, -0.5, 0.8, 2.0, -1.0], 3, 2).unwrap();
        let beta0 = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, -0.2, 0.5, 1.8, -0.6]);
        let mu0 = DMatrix::from_row_slice(2, 2, &[0.0, 0.8, 1.9, -0.8]);
        let lambda = 0.3;
        let p = 2;
        let z = transform_rows(w.half(), data.values(), p);
        let b = transform_rows(w.half(), &to_rows(&beta0), p);
        let m = transform_rows(w.half(), &to_rows(&mu0), p);
        let mut s = ZSolver::new(z, b, m, lambda, p);
        // perturb the duals so every term of the update is exercised
        for (t, v) in s.nu.iter_mut().enumerate() {
            *v = 0.05 * (t as f64 - 5.0);
        }
        let (delta, nu) = (s.delta.clone(), s.nu.clone());
        s.step();
        let got = from_rows(&transform_rows(w.inv_half(), &s.b, p), 3, p);
        for i in 0..3 {
            let x: Vec<f64> = data.row(i).to_vec();
            let bi: Vec<f64> = beta0.row(i).iter().copied().collect();
            let sg = dc_subgradient(&bi, &mu0, w.half());
            let want = beta_update(&x, &mu0, &delta[i * 4..i * 4 + 4], &nu[i * 4..i * 4 + 4], &w, &sg, lambda);
            for j in 0..p {
                assert!((got[(i, j)] - want[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dual_update_is_exact() {
        let data = Dataset::new(vec![0.0, 0.2, 0.9, 5.0, 5.3, 4.8], 6, 1).unwrap();
        let w = WeightMetric::identity(1);
        let z = data.values().to_vec();
        let mut s = ZSolver::new(z, vec![0.0, 0.0, 0.0, 5.0, 5.0, 5.0], vec![0.0, 5.0], 0.4, 1);
        for _ in 0..5 {
            let nu_old = s.nu.clone();
            s.step();
            for i in 0..6 {
                for c in 0..2 {
                    let idx = i * 2 + c;
                    let want = s.b[i] - s.m[c] - s.delta[idx];
                    assert!((s.nu[idx] - nu_old[idx] - want).abs() < 1e-14);
                }
            }
        }
        let _ = w;
    }

    #[test]
    fn mu_update_examples() {
        let w = WeightMetric::identity(2);
        let beta = DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 3.0, 1.0, 2.0, 9.0]);
        let (mu, carried) = mu_update(&beta, &DMatrix::from_row_slice(1, 2, &[0.0, 0.0]), &w);
        assert_eq!(mu, DMatrix::from_row_slice(1, 2, &[2.0, 5.0]));
        assert!(carried.is_empty());

        let beta = DMatrix::from_row_slice(2, 1, &[0.1, 0.2]);
        let prev = col(&[0.0, 100.0]);
        let (mu, carried) = mu_update(&beta, &prev, &WeightMetric::identity(1));
        assert_eq!(carried, vec![1]);
        assert_eq!(mu[(1, 0)], 100.0);
        assert!((mu[(0, 0)] - 0.15).abs() < 1e-15);

        let beta = col(&[7.0]);
        let (mu, _) = mu_update(&beta, &col(&[0.0]), &WeightMetric::identity(1));
        assert_eq!(mu[(0, 0)], 7.0);
    }

    #[test]
    fn assignment_examples() {
        let mu = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 2.0, 2.0]);
        let i2 = DMatrix::identity(2, 2);
        let part = assign_clusters_l1(&DMatrix::from_row_slice(1, 2, &[2.0, 2.0]), &mu, &i2);
        assert_eq!(part.label(0), 1);
        let part = assign_clusters_l1(&DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), &mu, &i2);
        assert_eq!(part.label(0), 0);
        // W = diag(4, 1): d₁ = |2| + |1| = 3, d₂ = |−2| + |−1| = 3
        let wh = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let part = assign_clusters_l1(&DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), &mu, &wh);
        assert_eq!(part.label(0), 0);
    }

    fn entry(n_clusters: usize, fit_ss: f64) -> PathEntry {
        PathEntry {
            lambda: 1.0,
            beta: DMatrix::zeros(0, 0),
            mu: DMatrix::zeros(0, 0),
            partition: None,
            fit_ss,
            n_clusters,
            iterations: 0,
            converged: true,
        }
    }

    #[test]
    fn select_lambda_rules() {
        let path = LambdaPath { grid: vec![1.0], entries: vec![entry(2, 7.0)] };
        assert_eq!(select_lambda(&path, 2), 0);
        let path = LambdaPath { grid: vec![1.0, 2.0], entries: vec![entry(2, 5.0), entry(2, 3.0)] };
        assert_eq!(select_lambda(&path, 2), 1);
        let path = LambdaPath { grid: vec![1.0, 2.0], entries: vec![entry(1, 0.1), entry(2, 4.0)] };
        assert_eq!(select_lambda(&path, 2), 1);
        let path = LambdaPath { grid: vec![1.0, 2.0, 3.0], entries: vec![entry(1, 0.1), entry(2, 4.0), entry(2, 3.5)] };
        assert_eq!(select_lambda(&path, 3), 2);
    }

    #[test]
    fn variance_estimate_examples() {
        let d = Dataset::new(vec![0.0, 2.0], 2, 1).unwrap();
        let beta = col(&[1.0, 1.0]);
        let (r, c) = variance_estimates(&d, &beta, &col(&[1.0]), &Partition::single(2));
        assert_eq!(r[(0, 0)], 1.0);
        assert_eq!(c[(0, 0)], 1.0);
        let beta = col(&[0.0, 2.0]);
        let (r, c) = variance_estimates(&d, &beta, &col(&[0.0, 2.0]), &Partition::new(vec![0, 1], 2).unwrap());
        assert_eq!(r[(0, 0)], 0.0);
        assert_eq!(c[(0, 0)], 0.0);
    }

    /// Objective for p = 1 with scalar weight w.
    fn objective_1d(x: &[f64], beta: &[f64], mu: &[f64], w: f64, lambda: f64) -> f64 {
        let sw = w.sqrt();
        x.iter()
            .zip(beta)
            .map(|(xi, bi)| {
                let pen = mu.iter().map(|m| (sw * (bi - m)).abs()).fold(f64::INFINITY, f64::min);
                0.5 * w * (xi - bi).powi(2) + lambda * pen
            })
            .sum()
    }

    /// Minimize a scalar function near `start` by a dense scan plus ternary refinement.
    fn scan_min(f: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
        let steps = 20_000;
        let h = (hi - lo) / steps as f64;
        let mut best = (lo, f(lo));
        for s in 0..=steps {
            let x = lo + h * s as f64;
            let fx = f(x);
            if fx < best.1 {
                best = (x, fx);
            }
        }
        let (mut a, mut b) = (best.0 - h, best.0 + h);
        for _ in 0..80 {
            let m1 = a + (b - a) / 3.0;
            let m2 = b - (b - a) / 3.0;
            if f(m1) <= f(m2) {
                b = m2;
            } else {
                a = m1;
            }
        }
        0.5 * (a + b)
    }

    /// Coordinate descent on (β, μ) with each coordinate minimized numerically.
    fn coordinate_descent(x: &[f64], beta0: &[f64], mu0: &[f64], w: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
        let mut beta = beta0.to_vec();
        let mut mu = mu0.to_vec();
        let lo = x.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0;
        let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1.0;
        for _ in 0..30 {
            for i in 0..beta.len() {
                let f = |b: f64| {
                    let mut bb = beta.clone();
                    bb[i] = b;
                    objective_1d(x, &bb, &mu, w, lambda)
                };
                beta[i] = scan_min(f, lo, hi);
            }
            for c in 0..mu.len() {
                let f = |m: f64| {
                    let mut mm = mu.clone();
                    mm[c] = m;
                    objective_1d(x, &beta, &mm, w, lambda)
                };
                let centre = mu[c];
                mu[c] = scan_min(f, centre - 1.0, centre + 1.0);
            }
        }
        (beta, mu)
    }

    fn toy_12() -> (Dataset, Vec<f64>, Vec<f64>) {
        let x = vec![-0.6, -0.3, -0.1, 0.0, 0.2, 0.5, 9.5, 9.8, 10.0, 10.1, 10.3, 10.6];
        let beta0: Vec<f64> = x.iter().map(|&v| if v < 5.0 { -0.05 } else { 10.05 }).collect();
        let mu0 = vec![-0.05, 10.05];
        (Dataset::new(x, 12, 1).unwrap(), beta0, mu0)
    }

    #[test]
    fn small_lambda_matches_coordinate_descent() {
        let (d, beta0, mu0) = toy_12();
        let w = 1.0 / 0.12;
        let metric = WeightMetric::new(&col(&[w])).unwrap();
        let grid = lambda_grid(&col(&beta0), &col(&mu0), metric.half(), 20).unwrap();
        let lambda = 0.5 * grid[0].min(1.0);
        let st = admm_fit(&d, &metric, lambda, &col(&beta0), &col(&mu0), 1e-9, 20_000).unwrap();
        assert!(st.converged);
        let (ob, om) = coordinate_descent(d.values(), &beta0, &mu0, w, lambda);
        let ours = st.objective(&d);
        let theirs = objective_1d(d.values(), &ob, &om, w, lambda);
        assert!((ours - theirs).abs() < 1e-6 * theirs.max(1.0), "{ours} vs {theirs}");
        for (i, b) in ob.iter().enumerate() {
            assert!((st.beta[(i, 0)] - b).abs() < 1e-3, "beta {i}: {} vs {b}", st.beta[(i, 0)]);
        }
        let part = assign_clusters_l1(&st.beta, &st.mu, metric.half());
        assert_eq!(part.labels(), &[0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1]);
    }

    #[test]
    fn largest_lambda_collapses_onto_centers() {
        let (d, beta0, mu0) = toy_12();
        let metric = WeightMetric::new(&col(&[1.0 / 0.12])).unwrap();
        let grid = lambda_grid(&col(&beta0), &col(&mu0), metric.half(), 20).unwrap();
        let st = admm_fit(&d, &metric, grid[19], &col(&beta0), &col(&mu0), 1e-8, 20_000).unwrap();
        for i in 0..12 {
            let dmin = (0..2)
                .map(|c| (metric.half()[(0, 0)] * (st.beta[(i, 0)] - st.mu[(c, 0)])).abs())
                .fold(f64::INFINITY, f64::min);
            assert!(dmin < 1e-4, "row {i} at distance {dmin}");
        }
    }

    #[test]
    fn residual_recomputes_from_fields() {
        let (d, beta0, mu0) = toy_12();
        let metric = WeightMetric::new(&col(&[3.0])).unwrap();
        let st = admm_fit(&d, &metric, 0.3, &col(&beta0), &col(&mu0), 1e-6, 7).unwrap();
        assert!((st.recompute_residual() - st.primal_residual).abs() < 1e-10);
        let back = st.w_half.transpose() * &st.w_half;
        assert!((back[(0, 0)] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn separated_clusters_recovered() {
        let cfg = FitConfig::default();
        let mut hits = 0;
        for seed in 0..100u64 {
            let mut g = rng::stream(seed, &[77]);
            let mut vals = Vec::with_capacity(100);
            let mut truth = Vec::with_capacity(100);
            for i in 0..100 {
                let c = usize::from(i >= 50);
                let e: f64 = StandardNormal.sample(&mut g);
                vals.push(20.0 * c as f64 + e);
                truth.push(c);
            }
            let d = Dataset::new(vals, 100, 1).unwrap();
            let init = initialize(&d, 2..=crate::init::kbar(100).unwrap(), seed, cfg.kmeans_restarts, cfg.init_max_iter);
            let fit = fit_sp(&d, &init, 2, &cfg).unwrap();
            if fit.partition.canonical() == Partition::new(truth, 2).unwrap().canonical() {
                hits += 1;
            }
        }
        assert!(hits >= 98, "recovered {hits}/100");
    }
}
