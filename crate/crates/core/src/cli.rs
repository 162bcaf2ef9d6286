//! Command implementations behind the `sced` binary.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Result, ScedError};
use crate::io::{self, InputInfo, ManifestEntry, ReportFile, TruthFile};
use crate::model::{FitConfig, Objective};
use crate::pipeline::{fit_once, FitReport};
use crate::rng::stream;
use crate::selection::{adequacy_d, normal_l0, select_k, SpicCurve};
use crate::sim::{generate_dataset, rand_index, run_grid, BenchGrid, Generator, RadialSampler, SimDesign};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "sced", version, about = "Clustering with semiparametric elliptical mixtures")]
pub struct Cli {
    /// Worker threads; SCED_THREADS takes precedence.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a CSV file for one k or select k over a range.
    Fit(FitArgs),
    /// Draw a dataset from a simulation design.
    Simulate(SimulateArgs),
    /// Run a Monte Carlo grid described by a TOML file.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    pub input: PathBuf,
    /// TOML file with fit settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, conflicts_with = "k_range")]
    pub k: Option<usize>,
    /// Inclusive range such as 1:6.
    #[arg(long, value_parser = parse_k_range)]
    pub k_range: Option<(usize, usize)>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub d0: Option<f64>,
    /// Number of λ values on the separation-penalty path.
    #[arg(long)]
    pub lambda_grid: Option<usize>,
    #[arg(long)]
    pub objective: Option<Objective>,
    /// Nelder–Mead budget per parameter.
    #[arg(long)]
    pub evals_per_dim: Option<usize>,
    #[arg(long)]
    pub label_column: Option<String>,
    #[arg(long)]
    pub no_standardize: bool,
    #[arg(long, default_value = "sced-out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: Generator,
    #[arg(long)]
    pub p: usize,
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub sigma: f64,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "sced-sim")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    pub grid: PathBuf,
    #[arg(long, default_value = "sced-bench")]
    pub out: PathBuf,
}

fn parse_k_range(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected A:B, got '{s}'"))?;
    let a: usize = a.trim().parse().map_err(|_| format!("bad lower bound '{a}'"))?;
    let b: usize = b.trim().parse().map_err(|_| format!("bad upper bound '{b}'"))?;
    if a == 0 || a > b {
        return Err(format!("empty range {a}:{b}"));
    }
    Ok((a, b))
}

pub fn exit_code(e: &ScedError) -> i32 {
    match e.root() {
        ScedError::Parse { .. }
        | ScedError::InvalidInput(_)
        | ScedError::InvalidDesign(_)
        | ScedError::Io(_)
        | ScedError::Json(_)
        | ScedError::Csv(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

pub fn thread_count(flag: Option<usize>) -> Option<usize> {
    std::env::var("SCED_THREADS").ok().and_then(|v| v.trim().parse().ok()).or(flag).filter(|&t| t > 0)
}

fn write_hashed(out: &Path, name: &str, bytes: &[u8], outputs: &mut Vec<(String, String)>) -> Result<()> {
    fs::write(out.join(name), bytes)?;
    outputs.push((name.to_string(), io::sha256_hex(bytes)));
    Ok(())
}

fn hash_file(out: &Path, name: &str, outputs: &mut Vec<(String, String)>) -> Result<()> {
    let bytes = fs::read(out.join(name))?;
    outputs.push((name.to_string(), io::sha256_hex(&bytes)));
    Ok(())
}

pub fn fit_config(args: &FitArgs) -> Result<FitConfig> {
    let mut config = match &args.config {
        Some(path) => toml::from_str(&fs::read_to_string(path)?)
            .map_err(|e| ScedError::InvalidInput(format!("{}: {e}", path.display())))?,
        None => FitConfig::default(),
    };
    if let Some(k) = args.k {
        config.k_range = (k, k);
    }
    if let Some(r) = args.k_range {
        config.k_range = r;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(d0) = args.d0 {
        config.d0 = d0;
    }
    if let Some(j) = args.lambda_grid {
        config.lambda_grid_size = j;
    }
    if let Some(o) = args.objective {
        config.objective = o;
    }
    if let Some(e) = args.evals_per_dim {
        config.optimizer_evals_per_dim = e;
    }
    config.validate()?;
    Ok(config)
}

/// Everything `fit` produces, before anything is written.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub report: ReportFile,
    pub data: crate::model::Dataset,
    pub timing: std::collections::BTreeMap<String, f64>,
}

pub fn run_fit(args: &FitArgs) -> Result<FitOutcome> {
    let config = fit_config(args)?;
    let table = io::read_csv(&args.input, args.label_column.as_deref())?;
    let data = if args.no_standardize { table.data.clone() } else { table.data.standardize()? };
    let (mut fit, spic): (FitReport, Option<SpicCurve>) = if config.k_range.0 == config.k_range.1 {
        (fit_once(&data, config.k_range.0, &config)?, None)
    } else {
        let (curve, reports) = select_k(&data, &config)?;
        let chosen = reports
            .into_iter()
            .find(|r| r.k == curve.selected)
            .ok_or_else(|| ScedError::InvalidInput("selected fit missing".into()))?;
        (chosen, Some(curve))
    };
    let timing = std::mem::take(&mut fit.timing);
    let partition = fit.final_partition();
    let adequacy = normal_l0(&data, &partition).ok().map(|l0| adequacy_d(fit.loo_loglik, l0, data.n()));
    let ri = match &table.labels {
        Some(labels) => Some(rand_index(&partition, &io::labels_to_partition(labels)?)?),
        None => None,
    };
    let input = InputInfo {
        path: args.input.display().to_string(),
        sha256: table.sha256.clone(),
        n: data.n(),
        p: data.p(),
        columns: table.columns.clone(),
        standardized: data.is_standardized(),
        col_means: data.col_means().to_vec(),
        col_sds: data.col_sds().to_vec(),
        label_column: args.label_column.clone(),
    };
    let report = ReportFile {
        schema: io::REPORT_SCHEMA.into(),
        version: VERSION.into(),
        input,
        config,
        fit,
        spic,
        adequacy_d: adequacy,
        rand_index: ri,
    };
    Ok(FitOutcome { report, data, timing })
}

pub fn cmd_fit(args: &FitArgs, argv: &[String]) -> Result<ReportFile> {
    let started = io::unix_ms();
    let outcome = run_fit(args)?;
    let out = &args.out;
    fs::create_dir_all(out)?;
    let mut outputs = Vec::new();
    write_hashed(out, "report.json", outcome.report.to_json()?.as_bytes(), &mut outputs)?;
    io::write_assignments(&out.join("assignments.csv"), &outcome.report.fit)?;
    hash_file(out, "assignments.csv", &mut outputs)?;
    let plot = out.join("plotdata");
    io::write_plotdata(&plot, &outcome.data, &outcome.report.fit, outcome.report.spic.as_ref(), outcome.report.config.d0)?;
    for name in ["ghat.csv", "spic.csv", "lambda_path.csv"] {
        hash_file(out, &format!("plotdata/{name}"), &mut outputs)?;
    }
    io::append_manifest(
        &out.join("manifest.jsonl"),
        &ManifestEntry {
            schema: io::MANIFEST_SCHEMA.into(),
            command: "fit".into(),
            args: argv.to_vec(),
            seed: outcome.report.config.seed,
            inputs: vec![(outcome.report.input.path.clone(), outcome.report.input.sha256.clone())],
            outputs,
            started_unix_ms: started,
            finished_unix_ms: io::unix_ms(),
            version: VERSION.into(),
            timing: outcome.timing,
        },
    )?;
    Ok(outcome.report)
}

pub fn cmd_simulate(args: &SimulateArgs, argv: &[String]) -> Result<TruthFile> {
    let started = io::unix_ms();
    let design = SimDesign::new(args.model, args.p, args.k, args.n, args.sigma, args.seed)?;
    let sampler = RadialSampler::new(design.generator, design.p)?;
    let sample = generate_dataset(&design, &sampler, &mut stream(design.seed, &[0x5157]))?;
    let truth = TruthFile::new(&design, &sample);
    let out = &args.out;
    fs::create_dir_all(out)?;
    let mut outputs = Vec::new();
    io::write_data_csv(&out.join("data.csv"), &sample.data)?;
    hash_file(out, "data.csv", &mut outputs)?;
    let mut json = serde_json::to_string_pretty(&truth)?;
    json.push('\n');
    write_hashed(out, "truth.json", json.as_bytes(), &mut outputs)?;
    io::append_manifest(
        &out.join("manifest.jsonl"),
        &ManifestEntry {
            schema: io::MANIFEST_SCHEMA.into(),
            command: "simulate".into(),
            args: argv.to_vec(),
            seed: args.seed,
            inputs: Vec::new(),
            outputs,
            started_unix_ms: started,
            finished_unix_ms: io::unix_ms(),
            version: VERSION.into(),
            timing: Default::default(),
        },
    )?;
    Ok(truth)
}

/// Returns the printed table and whether any cell failed in every replication.
pub fn cmd_bench(args: &BenchArgs, argv: &[String]) -> Result<(String, bool)> {
    let started = io::unix_ms();
    let text = fs::read_to_string(&args.grid)?;
    let grid = BenchGrid::from_toml(&text)?;
    fs::create_dir_all(&args.out)?;
    let summary = run_grid(&grid, &args.out)?;
    let failed = summary.failed_cells();
    for c in &failed {
        log::error!("{} {}: every replication failed", c.label, c.method.name());
    }
    let mut outputs = Vec::new();
    for name in ["results.csv", "summary.json"] {
        hash_file(&args.out, name, &mut outputs)?;
    }
    io::append_manifest(
        &args.out.join("manifest.jsonl"),
        &ManifestEntry {
            schema: io::MANIFEST_SCHEMA.into(),
            command: "bench".into(),
            args: argv.to_vec(),
            seed: grid.seed,
            inputs: vec![(args.grid.display().to_string(), io::sha256_hex(text.as_bytes()))],
            outputs,
            started_unix_ms: started,
            finished_unix_ms: io::unix_ms(),
            version: VERSION.into(),
            timing: Default::default(),
        },
    )?;
    Ok((summary.table(), !failed.is_empty()))
}

/// Parse `argv`, run the command and return the process exit code.
pub fn run(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Some(t) = thread_count(cli.threads) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            log::warn!("thread pool already configured: {e}");
        }
    }
    let result = match &cli.command {
        Command::Fit(a) => cmd_fit(a, &argv).map(|r| {
            let k = r.spic.as_ref().map_or(r.fit.k, |c| c.selected);
            println!("k = {k}; wrote {}", a.out.display());
            EXIT_OK
        }),
        Command::Simulate(a) => cmd_simulate(a, &argv).map(|_| {
            println!("wrote {}", a.out.display());
            EXIT_OK
        }),
        Command::Bench(a) => cmd_bench(a, &argv).map(|(table, failed)| {
            print!("{table}");
            if failed {
                EXIT_PARTIAL
            } else {
                EXIT_OK
            }
        }),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        exit_code(&e)
    })
}
