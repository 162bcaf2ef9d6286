//! Clusterwise elliptical data with the two radial laws used in the
//! simulation designs.

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScedError};
use crate::linalg::sym_sqrt;
use crate::model::{Dataset, EllipticalParams, Partition};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    /// f(y) ∝ y⁵(45/4 − y)^{1/4} on [0, 45/4].
    M1,
    /// Normal generator.
    M2,
}

impl std::str::FromStr for Generator {
    type Err = ScedError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m1" => Ok(Generator::M1),
            "m2" => Ok(Generator::M2),
            other => Err(ScedError::InvalidDesign(format!("unknown generator '{other}'"))),
        }
    }
}

impl std::fmt::Display for Generator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Generator::M1 => "m1",
            Generator::M2 => "m2",
        })
    }
}

/// Upper end of the M1 radius, √(45/4).
pub const M1_RADIUS: f64 = 3.354_101_966_249_684_5;
const TABLE_SIZE: usize = 4096;

/// Draws of R = ‖U‖ for a spherical U with the given generator.
#[derive(Debug, Clone)]
pub struct RadialSampler {
    generator: Generator,
    p: usize,
    chi: Option<ChiSquared<f64>>,
    /// Radius grid and normalized CDF for the tabulated law.
    grid: Vec<f64>,
    cdf: Vec<f64>,
    second_moment: f64,
}

impl RadialSampler {
    pub fn new(generator: Generator, p: usize) -> Result<Self> {
        if p == 0 {
            return Err(ScedError::InvalidDesign("dimension must be >= 1".into()));
        }
        match generator {
            Generator::M2 => Ok(RadialSampler {
                generator,
                p,
                chi: Some(ChiSquared::new(p as f64).expect("positive degrees of freedom")),
                grid: Vec::new(),
                cdf: Vec::new(),
                second_moment: p as f64,
            }),
            Generator::M1 => {
                let step = M1_RADIUS / (TABLE_SIZE - 1) as f64;
                let grid: Vec<f64> = (0..TABLE_SIZE).map(|j| j as f64 * step).collect();
                let dens: Vec<f64> = grid
                    .iter()
                    .map(|&r| r.powi(p as i32 + 9) * (45.0 / 4.0 - r * r).max(0.0).powf(0.25))
                    .collect();
                let mut cdf = vec![0.0; TABLE_SIZE];
                let mut m2 = 0.0;
                for j in 1..TABLE_SIZE {
                    cdf[j] = cdf[j - 1] + 0.5 * step * (dens[j - 1] + dens[j]);
                    m2 += 0.5 * step * (grid[j - 1].powi(2) * dens[j - 1] + grid[j].powi(2) * dens[j]);
                }
                let total = cdf[TABLE_SIZE - 1];
                cdf.iter_mut().for_each(|c| *c /= total);
                Ok(RadialSampler { generator, p, chi: None, grid, cdf, second_moment: m2 / total })
            }
        }
    }

    pub fn generator(&self) -> Generator {
        self.generator
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    /// E[R²]: exact for M2, from the table for M1.
    pub fn second_moment(&self) -> f64 {
        self.second_moment
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match self.chi {
            Some(chi) => chi.sample(rng).sqrt(),
            None => {
                let u: f64 = rng.random();
                let j = self.cdf.partition_point(|&c| c < u).clamp(1, TABLE_SIZE - 1);
                let (c0, c1) = (self.cdf[j - 1], self.cdf[j]);
                let t = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
                self.grid[j - 1] + t * (self.grid[j] - self.grid[j - 1])
            }
        }
    }
}

/// One simulation design: generator, dimension, cluster count, sample size
/// and the overlap scale σ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub generator: Generator,
    pub p: usize,
    pub k: usize,
    pub n: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl SimDesign {
    pub fn new(generator: Generator, p: usize, k: usize, n: usize, sigma: f64, seed: u64) -> Result<Self> {
        let d = SimDesign { generator, p, k, n, sigma, seed };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.k) {
            return Err(ScedError::InvalidDesign(format!("k must be 2 or 3, got {}", self.k)));
        }
        if self.p == 0 || (self.k == 3 && self.p < 2) {
            return Err(ScedError::InvalidDesign(format!("p = {} has no distinct mean set for k = {}", self.p, self.k)));
        }
        if self.n < 2 {
            return Err(ScedError::InvalidDesign(format!("n must be >= 2, got {}", self.n)));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(ScedError::InvalidDesign(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    pub fn probs(&self) -> Vec<f64> {
        if self.k == 2 {
            vec![0.6, 0.4]
        } else {
            vec![0.4, 0.3, 0.3]
        }
    }

    /// 0, then (1.5, 0, 1.5, 0, …), with 1.5·1 inserted second when k = 3.
    pub fn means(&self) -> DMatrix<f64> {
        let alt: Vec<f64> = (0..self.p).map(|j| if j % 2 == 0 { 1.5 } else { 0.0 }).collect();
        let mut m = DMatrix::zeros(self.k, self.p);
        if self.k == 2 {
            m.row_mut(1).iter_mut().zip(&alt).for_each(|(v, a)| *v = *a);
        } else {
            m.row_mut(1).fill(1.5);
            m.row_mut(2).iter_mut().zip(&alt).for_each(|(v, a)| *v = *a);
        }
        m
    }

    /// σ²(0.175 I + 0.075 11ᵀ).
    pub fn sigma_x(&self) -> DMatrix<f64> {
        base_shape(self.p) * (self.sigma * self.sigma)
    }

    pub fn truth_params(&self) -> EllipticalParams {
        let base = base_shape(self.p);
        EllipticalParams { means: self.means(), scatter: &base / base[(0, 0)], probs: self.probs() }
    }
}

fn base_shape(p: usize) -> DMatrix<f64> {
    DMatrix::identity(p, p) * 0.175 + DMatrix::from_element(p, p, 0.075)
}

/// A dataset drawn from a design with its true labels and parameters.
#[derive(Debug, Clone)]
pub struct SimSample {
    pub data: Dataset,
    pub truth: Partition,
    pub params: EllipticalParams,
    pub sigma_x: DMatrix<f64>,
}

/// X = μ_C + σ A U √(p / E[R²]) with A = (0.175 I + 0.075 11ᵀ)^{1/2} and
/// U = R·(uniform direction), so that Var(X | C) = Σₓ.
pub fn generate_dataset(design: &SimDesign, sampler: &RadialSampler, rng: &mut Rng) -> Result<SimSample> {
    if sampler.generator() != design.generator || sampler.dim() != design.p {
        return Err(ScedError::InvalidDesign("sampler does not match the design".into()));
    }
    generate_with_scale(design, sampler, design.sigma, rng)
}

/// As [`generate_dataset`] with σ overridden; σ = 0 puts every point on
/// its cluster mean.
pub fn generate_with_scale(design: &SimDesign, sampler: &RadialSampler, sigma: f64, rng: &mut Rng) -> Result<SimSample> {
    let p = design.p;
    let a = sym_sqrt(&base_shape(p))? * (sigma * (p as f64 / sampler.second_moment()).sqrt());
    let means = design.means();
    let probs = design.probs();
    let mut values = Vec::with_capacity(design.n * p);
    let mut labels = Vec::with_capacity(design.n);
    let mut dir = vec![0.0; p];
    for _ in 0..design.n {
        let u: f64 = rng.random();
        let mut c = 0;
        let mut acc = probs[0];
        while u >= acc && c + 1 < probs.len() {
            c += 1;
            acc += probs[c];
        }
        labels.push(c);
        let norm = loop {
            dir.iter_mut().for_each(|d| *d = StandardNormal.sample(rng));
            let s = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
            if s > 0.0 {
                break s;
            }
        };
        let r = sampler.sample(rng);
        for j in 0..p {
            let mut v = means[(c, j)];
            for (l, d) in dir.iter().enumerate() {
                v += a[(j, l)] * d / norm * r;
            }
            values.push(v);
        }
    }
    let sigma_x = base_shape(p) * (sigma * sigma);
    Ok(SimSample {
        data: Dataset::new(values, design.n, p)?,
        truth: Partition::new(labels, design.k)?,
        params: design.truth_params(),
        sigma_x,
    })
}
