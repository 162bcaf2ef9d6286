//! Seeded, resumable Monte Carlo grid over simulation designs and methods.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, ScedError};
use crate::init::{cluster_means, kmeans, residual_outer_mean};
use crate::model::{Dataset, FitConfig, Objective, Partition};
use crate::pipeline::{finish, prepare, FitReport, Prepared, StageReport};
use crate::rng::{derive_seed, stream};
use crate::selection::select_k;

use super::generate::{generate_dataset, Generator, RadialSampler, SimDesign, SimSample};
use super::metrics::{aligned_mean_rse, rand_index, variance_rse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Kmeans,
    /// Initial clustering.
    Is,
    /// Separation penalty.
    Sp,
    /// Pseudo-likelihood estimate at the SP partition.
    Pml,
    /// Pseudo-marginal-likelihood estimate at the SP partition.
    Pmml,
    /// Optimal clustering under the hard-assignment objective.
    OcPl1,
    /// Optimal clustering under the marginal objective.
    OcPl2,
    /// Optimal clustering at the SPIC-selected cluster count.
    Spic,
}

impl Method {
    pub const ALL: [Method; 8] =
        [Method::Kmeans, Method::Is, Method::Sp, Method::Pml, Method::Pmml, Method::OcPl1, Method::OcPl2, Method::Spic];

    pub fn name(self) -> &'static str {
        match self {
            Method::Kmeans => "kmeans",
            Method::Is => "is",
            Method::Sp => "sp",
            Method::Pml => "pml",
            Method::Pmml => "pmml",
            Method::OcPl1 => "oc_pl1",
            Method::OcPl2 => "oc_pl2",
            Method::Spic => "spic",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = ScedError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| ScedError::InvalidInput(format!("unknown method '{s}'")))
    }
}

/// One `[[design]]` block of a grid file; every (σ, n) pair is a design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignBlock {
    pub generator: Generator,
    pub p: usize,
    pub k: usize,
    pub n: Vec<usize>,
    pub sigma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchGrid {
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    pub methods: Vec<Method>,
    #[serde(rename = "design")]
    pub designs: Vec<DesignBlock>,
    #[serde(default)]
    pub fit: FitConfig,
}

impl BenchGrid {
    pub fn from_toml(text: &str) -> Result<Self> {
        let grid: BenchGrid = toml::from_str(text).map_err(|e| ScedError::InvalidInput(format!("grid file: {e}")))?;
        grid.expand()?;
        Ok(grid)
    }

    /// Designs ordered by block, then σ, then n.
    pub fn expand(&self) -> Result<Vec<SimDesign>> {
        if self.replications == 0 || self.methods.is_empty() || self.designs.is_empty() {
            return Err(ScedError::InvalidInput("grid needs replications, methods and designs".into()));
        }
        self.fit.validate()?;
        let mut out = Vec::new();
        for b in &self.designs {
            for &sigma in &b.sigma {
                for &n in &b.n {
                    out.push(SimDesign::new(b.generator, b.p, b.k, n, sigma, self.seed)?);
                }
            }
        }
        Ok(out)
    }
}

/// Outcome of one method on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub design: String,
    pub method: Method,
    pub rep: usize,
    pub ri: Option<f64>,
    pub mean_rse: Option<f64>,
    pub var_rse: Option<f64>,
    pub k_hat: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    /// Monte Carlo standard error of the mean.
    pub se: f64,
    pub count: usize,
}

impl MeanSe {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let m = values.len() as f64;
        let mean = values.iter().sum::<f64>() / m;
        let se = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0) / m).sqrt()
        } else {
            0.0
        };
        Some(MeanSe { mean, se, count: values.len() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub design: SimDesign,
    pub label: String,
    pub method: Method,
    pub n_ok: usize,
    pub n_failed: usize,
    pub ri: Option<MeanSe>,
    pub mean_rse: Option<MeanSe>,
    pub var_rse: Option<MeanSe>,
    pub k_hat: Option<MeanSe>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub replications: usize,
    pub cells: Vec<CellSummary>,
}

impl BenchSummary {
    pub fn cell(&self, design: &SimDesign, method: Method) -> Option<&CellSummary> {
        self.cells.iter().find(|c| &c.design == design && c.method == method)
    }

    /// Cells in which every replication failed.
    pub fn failed_cells(&self) -> Vec<&CellSummary> {
        self.cells.iter().filter(|c| c.n_ok == 0).collect()
    }

    /// Rows σ × n, one column per method, mean RI ×10² with its MC standard
    /// error.
    pub fn table(&self) -> String {
        let mut methods: Vec<Method> = Vec::new();
        let mut designs: Vec<&SimDesign> = Vec::new();
        for c in &self.cells {
            if !methods.contains(&c.method) {
                methods.push(c.method);
            }
            if !designs.contains(&&c.design) {
                designs.push(&c.design);
            }
        }
        let mut out = String::new();
        let _ = write!(out, "{:<6}{:<5}{:<6}{:>6}", "model", "p,k", "sigma", "n");
        for m in &methods {
            let _ = write!(out, "{:>18}", m.name());
        }
        out.push('\n');
        for d in designs {
            let _ = write!(out, "{:<6}{:<5}{:<6}{:>6}", d.generator.to_string(), format!("{},{}", d.p, d.k), d.sigma, d.n);
            for &m in &methods {
                let cell = self.cell(d, m);
                let text = match cell {
                    Some(c) if m == Method::Spic => c.k_hat.map(|v| format!("{:.2} ({:.2})", v.mean, v.se)),
                    Some(c) => c.ri.map(|v| format!("{:.2} ({:.2})", 100.0 * v.mean, 100.0 * v.se)),
                    None => None,
                };
                let _ = write!(out, "{:>18}", text.unwrap_or_else(|| "failed".into()));
            }
            out.push('\n');
        }
        out
    }
}

pub fn design_label(d: &SimDesign) -> String {
    format!("{}_p{}_k{}_n{}_s{}", d.generator, d.p, d.k, d.n, d.sigma)
}

/// Hex digest identifying a design together with the fit configuration.
pub fn design_hash(design: &SimDesign, fit: &FitConfig) -> String {
    let text = serde_json::to_string(&(design, fit)).expect("design serializes");
    Sha256::digest(text.as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn checkpoint_path(dir: &Path, hash: &str, method: Method, rep: usize) -> PathBuf {
    dir.join(hash).join(method.name()).join(format!("{rep}.json"))
}

fn read_checkpoint(path: &Path) -> Option<RepRecord> {
    let text = fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

fn write_checkpoint(path: &Path, record: &RepRecord) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec(record)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Scored {
    ri: f64,
    mean_rse: Option<f64>,
    var_rse: Option<f64>,
}

fn score(sample: &SimSample, design: &SimDesign, partition: &Partition, means: &DMatrix<f64>, var: &DMatrix<f64>) -> Result<Scored> {
    let ri = rand_index(partition, &sample.truth)?;
    let truth_means = design.means();
    let mean_rse = (means.shape() == truth_means.shape()).then(|| aligned_mean_rse(means, &truth_means)).transpose()?;
    Ok(Scored { ri, mean_rse, var_rse: Some(variance_rse(var, &sample.sigma_x)?) })
}

fn score_stage(sample: &SimSample, design: &SimDesign, stage: &StageReport, k: usize) -> Result<Scored> {
    score(sample, design, &stage.partition(k), &stage.params.means_matrix(), &stage.params.variance_matrix())
}

/// Lazily computed fits shared by the methods of one replication.
struct RepContext<'a> {
    sample: &'a SimSample,
    design: &'a SimDesign,
    config: FitConfig,
    // errors are kept as messages so later methods can report the same failure
    prepared: Option<std::result::Result<Prepared, String>>,
    fits: BTreeMap<Objective, std::result::Result<FitReport, String>>,
}

impl RepContext<'_> {
    fn data(&self) -> &Dataset {
        &self.sample.data
    }

    fn prepared(&mut self) -> Result<&Prepared> {
        if self.prepared.is_none() {
            self.prepared = Some(prepare(self.data(), self.design.k, &self.config).map_err(|e| e.to_string()));
        }
        self.prepared.as_ref().expect("just set").as_ref().map_err(|e| ScedError::InvalidInput(e.clone()))
    }

    fn fit(&mut self, objective: Objective) -> Result<&FitReport> {
        if !self.fits.contains_key(&objective) {
            let r = match self.prepared() {
                Ok(p) => {
                    let p = p.clone();
                    finish(self.data(), &p, objective, &self.config).map_err(|e| e.to_string())
                }
                Err(e) => Err(e.to_string()),
            };
            self.fits.insert(objective, r);
        }
        self.fits[&objective].as_ref().map_err(|e| ScedError::InvalidInput(e.clone()))
    }

    fn run(&mut self, method: Method) -> Result<(Scored, Option<usize>)> {
        let k = self.design.k;
        let scored = match method {
            Method::Kmeans => {
                let part = kmeans(self.data(), k, self.config.seed, self.config.kmeans_restarts)?;
                let means = cluster_means(self.data(), &part)?;
                let var = residual_outer_mean(self.data(), &part, &means);
                score(self.sample, self.design, &part, &means, &var)?
            }
            Method::Is => {
                let init = self.prepared()?.init.clone().ok_or_else(|| ScedError::InvalidInput("no initial stage".into()))?;
                score(self.sample, self.design, &init.partition, &init.means, &init.pooled_var)?
            }
            Method::Sp => {
                let sp = self.prepared()?.sp.clone().ok_or_else(|| ScedError::InvalidInput("separation penalty failed".into()))?;
                score(self.sample, self.design, &sp.partition, &sp.means, &sp.sigma_cluster)?
            }
            Method::Pml | Method::Pmml => {
                let obj = if method == Method::Pml { Objective::Pl1 } else { Objective::Pl2 };
                let rep = self.fit(obj)?.clone();
                score_stage(self.sample, self.design, &rep.pseudo_likelihood, k)?
            }
            Method::OcPl1 | Method::OcPl2 => {
                let obj = if method == Method::OcPl1 { Objective::Pl1 } else { Objective::Pl2 };
                let rep = self.fit(obj)?.clone();
                score_stage(self.sample, self.design, rep.final_stage(), k)?
            }
            Method::Spic => {
                let (curve, reports) = select_k(self.data(), &self.config)?;
                let rep = reports
                    .iter()
                    .find(|r| r.k == curve.selected)
                    .ok_or_else(|| ScedError::InvalidInput("selected fit missing".into()))?;
                let s = score_stage(self.sample, self.design, rep.final_stage(), curve.selected)?;
                return Ok((s, Some(curve.selected)));
            }
        };
        Ok((scored, None))
    }
}

/// Run every method on `replications` seeded datasets from one design.
/// With a checkpoint directory, finished (method, replication) pairs are
/// read back instead of recomputed.
pub fn run_design(
    design: &SimDesign,
    methods: &[Method],
    replications: usize,
    fit: &FitConfig,
    checkpoints: Option<&Path>,
) -> Result<Vec<RepRecord>> {
    design.validate()?;
    let sampler = RadialSampler::new(design.generator, design.p)?;
    let label = design_label(design);
    let hash = design_hash(design, fit);
    let per_rep: Vec<Result<Vec<RepRecord>>> = (0..replications)
        .into_par_iter()
        .map(|rep| {
            let mut records = Vec::with_capacity(methods.len());
            let mut todo = Vec::new();
            for &m in methods {
                match checkpoints.and_then(|d| read_checkpoint(&checkpoint_path(d, &hash, m, rep))) {
                    Some(r) => records.push(r),
                    None => todo.push(m),
                }
            }
            if todo.is_empty() {
                return Ok(records);
            }
            let sample = generate_dataset(design, &sampler, &mut stream(design.seed, &[1, rep as u64]))?;
            let config = FitConfig { seed: derive_seed(design.seed, &[2, rep as u64]), ..fit.clone() };
            let mut ctx = RepContext { sample: &sample, design, config, prepared: None, fits: BTreeMap::new() };
            for m in todo {
                let record = match ctx.run(m) {
                    Ok((s, k_hat)) => RepRecord {
                        design: label.clone(),
                        method: m,
                        rep,
                        ri: Some(s.ri),
                        mean_rse: s.mean_rse,
                        var_rse: s.var_rse,
                        k_hat,
                        error: None,
                    },
                    Err(e) => {
                        log::warn!("{label} {} rep {rep}: {e}", m.name());
                        RepRecord {
                            design: label.clone(),
                            method: m,
                            rep,
                            ri: None,
                            mean_rse: None,
                            var_rse: None,
                            k_hat: None,
                            error: Some(e.to_string()),
                        }
                    }
                };
                if let Some(d) = checkpoints {
                    write_checkpoint(&checkpoint_path(d, &hash, m, rep), &record)?;
                }
                records.push(record);
            }
            Ok(records)
        })
        .collect();
    let mut all = Vec::with_capacity(replications * methods.len());
    for r in per_rep {
        all.extend(r?);
    }
    all.sort_by_key(|r| (methods.iter().position(|&m| m == r.method), r.rep));
    Ok(all)
}

pub fn summarize(design: &SimDesign, method: Method, records: &[RepRecord]) -> CellSummary {
    let mine: Vec<&RepRecord> = records.iter().filter(|r| r.method == method).collect();
    let collect = |f: fn(&RepRecord) -> Option<f64>| MeanSe::of(&mine.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
    CellSummary {
        design: design.clone(),
        label: design_label(design),
        method,
        n_ok: mine.iter().filter(|r| r.error.is_none()).count(),
        n_failed: mine.iter().filter(|r| r.error.is_some()).count(),
        ri: collect(|r| r.ri),
        mean_rse: collect(|r| r.mean_rse),
        var_rse: collect(|r| r.var_rse),
        k_hat: collect(|r| r.k_hat.map(|k| k as f64)),
    }
}

/// Run a whole grid, writing `results.csv`, `summary.json` and per-replication
/// checkpoints under `out_dir/ckpt`.
pub fn run_grid(grid: &BenchGrid, out_dir: &Path) -> Result<BenchSummary> {
    let designs = grid.expand()?;
    let ckpt = out_dir.join("ckpt");
    fs::create_dir_all(&ckpt)?;
    let mut cells = Vec::new();
    let mut rows = Vec::new();
    for d in &designs {
        let records = run_design(d, &grid.methods, grid.replications, &grid.fit, Some(&ckpt))?;
        for &m in &grid.methods {
            let cell = summarize(d, m, &records);
            log::info!("{} {}: {} ok, {} failed", cell.label, m.name(), cell.n_ok, cell.n_failed);
            cells.push(cell);
        }
        rows.extend(records);
    }
    let mut w = csv::Writer::from_path(out_dir.join("results.csv"))?;
    w.write_record(["design", "method", "rep", "ri", "mean_rse", "var_rse", "k_hat", "error"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &rows {
        w.write_record([
            r.design.clone(),
            r.method.name().to_string(),
            r.rep.to_string(),
            opt(r.ri),
            opt(r.mean_rse),
            opt(r.var_rse),
            r.k_hat.map(|k| k.to_string()).unwrap_or_default(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    let summary = BenchSummary { replications: grid.replications, cells };
    fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}
