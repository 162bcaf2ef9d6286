//! CSV ingestion and the files written by the command-line tool.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, ScedError};
use crate::likelihood::generator_for;
use crate::model::{Dataset, FitConfig, Partition, TransformSpec};
use crate::pipeline::FitReport;
use crate::selection::SpicCurve;
use crate::sim::{SimDesign, SimSample};

pub const REPORT_SCHEMA: &str = "sced.report/v1";
pub const TRUTH_SCHEMA: &str = "sced.truth/v1";
pub const MANIFEST_SCHEMA: &str = "sced.manifest/v1";
/// Points on the ĝ curve written to `plotdata/ghat.csv`.
pub const GHAT_POINTS: usize = 256;

/// A parsed input table.
#[derive(Debug, Clone)]
pub struct Table {
    pub columns: Vec<String>,
    pub data: Dataset,
    /// Values of the label column, when one was named.
    pub labels: Option<Vec<String>>,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Parse a headed numeric CSV. The optional label column is kept aside and
/// not used as a feature. Line numbers are 1-based and count the header.
pub fn parse_csv(bytes: &[u8], label_column: Option<&str>) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| ScedError::Parse { line: 1, col: 1, msg: e.to_string() })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let label_idx = match label_column {
        Some(name) => Some(header.iter().position(|h| h == name).ok_or_else(|| ScedError::Parse {
            line: 1,
            col: 1,
            msg: format!("label column '{name}' not in header"),
        })?),
        None => None,
    };
    let columns: Vec<String> =
        header.iter().enumerate().filter(|(j, _)| Some(*j) != label_idx).map(|(_, h)| h.clone()).collect();
    if columns.is_empty() {
        return Err(ScedError::Parse { line: 1, col: 1, msg: "no feature columns".into() });
    }
    let mut values = Vec::new();
    let mut labels = label_idx.map(|_| Vec::new());
    let mut n = 0;
    for (r, record) in reader.records().enumerate() {
        let line = r + 2;
        let record = record.map_err(|e| ScedError::Parse { line, col: 1, msg: e.to_string() })?;
        if record.len() != header.len() {
            return Err(ScedError::Parse {
                line,
                col: record.len().min(header.len()) + 1,
                msg: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        for (j, field) in record.iter().enumerate() {
            if Some(j) == label_idx {
                labels.as_mut().expect("label column").push(field.trim().to_string());
                continue;
            }
            let v: f64 = field.trim().parse().map_err(|_| ScedError::Parse {
                line,
                col: j + 1,
                msg: format!("'{field}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(ScedError::Parse { line, col: j + 1, msg: format!("'{field}' is not finite") });
            }
            values.push(v);
        }
        n += 1;
    }
    let p = columns.len();
    let data = Dataset::new(values, n, p)?;
    Ok(Table { columns, data, labels, sha256: sha256_hex(bytes) })
}

pub fn read_csv(path: &Path, label_column: Option<&str>) -> Result<Table> {
    parse_csv(&fs::read(path)?, label_column)
}

/// Map arbitrary label strings to a partition, numbering labels in order of
/// first appearance.
pub fn labels_to_partition(labels: &[String]) -> Result<Partition> {
    let mut seen: Vec<&str> = Vec::new();
    let ids: Vec<usize> = labels
        .iter()
        .map(|l| match seen.iter().position(|s| *s == l.as_str()) {
            Some(i) => i,
            None => {
                seen.push(l);
                seen.len() - 1
            }
        })
        .collect();
    Partition::new(ids, seen.len().max(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputInfo {
    pub path: String,
    pub sha256: String,
    pub n: usize,
    pub p: usize,
    pub columns: Vec<String>,
    pub standardized: bool,
    /// Column means and standard deviations removed by standardization.
    pub col_means: Vec<f64>,
    pub col_sds: Vec<f64>,
    pub label_column: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub schema: String,
    pub version: String,
    pub input: InputInfo,
    pub config: FitConfig,
    /// The reported fit: the only one for a fixed k, the SPIC choice otherwise.
    pub fit: FitReport,
    pub spic: Option<SpicCurve>,
    /// Adequacy statistic D against the normal mixture at the final partition.
    pub adequacy_d: Option<f64>,
    /// Rand index of the final partition against the label column.
    pub rand_index: Option<f64>,
}

impl ReportFile {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: ReportFile = serde_json::from_str(text)?;
        if r.schema != REPORT_SCHEMA {
            return Err(ScedError::InvalidInput(format!("unsupported report schema '{}'", r.schema)));
        }
        Ok(r)
    }
}

/// `row,label,p1..pk` with 1-based rows and labels.
pub fn write_assignments(path: &Path, fit: &FitReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["row".to_string(), "label".to_string()];
    header.extend((1..=fit.k).map(|c| format!("p{c}")));
    w.write_record(&header)?;
    let labels = &fit.final_stage().labels;
    for (i, (label, post)) in labels.iter().zip(&fit.posteriors).enumerate() {
        let mut rec = vec![(i + 1).to_string(), label.to_string()];
        rec.extend(post.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// ĝ at the final estimate on an even grid over [0, max Ỹ + h].
pub fn ghat_curve(data: &Dataset, fit: &FitReport, d0: f64) -> Result<Vec<(f64, f64)>> {
    let stage = fit.final_stage();
    let params = stage.params.to_params();
    let h = fit.bandwidths.h_tilde_star.or(fit.bandwidths.h_tilde).unwrap_or(1.0);
    let transform = TransformSpec::new(d0, data.p())?;
    let est = generator_for(data, &params, &stage.partition(fit.k), h, transform)?;
    let top = est.sample().last().copied().unwrap_or(0.0) + h;
    Ok((0..GHAT_POINTS)
        .map(|j| {
            let y = top * j as f64 / (GHAT_POINTS - 1) as f64;
            (y, est.ghat(y))
        })
        .collect())
}

/// `plotdata/{ghat,spic,lambda_path}.csv`.
pub fn write_plotdata(dir: &Path, data: &Dataset, fit: &FitReport, spic: Option<&SpicCurve>, d0: f64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("ghat.csv"))?;
    w.write_record(["y", "ghat"])?;
    for (y, g) in ghat_curve(data, fit, d0)? {
        w.write_record([y.to_string(), g.to_string()])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("spic.csv"))?;
    w.write_record(["k", "loo_loglik", "spic"])?;
    match spic {
        Some(curve) => {
            for e in &curve.entries {
                let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                w.write_record([e.k.to_string(), f(e.loo_loglik), f(e.spic)])?;
            }
        }
        None => {
            let s = crate::selection::spic(fit.k, fit.loo_loglik, fit.n, fit.p);
            w.write_record([fit.k.to_string(), fit.loo_loglik.to_string(), s.to_string()])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("lambda_path.csv"))?;
    w.write_record(["lambda", "fit_ss", "n_clusters", "iterations", "converged", "selected"])?;
    for e in &fit.lambda_path {
        w.write_record([
            e.lambda.to_string(),
            e.fit_ss.to_string(),
            e.n_clusters.to_string(),
            e.iterations.to_string(),
            e.converged.to_string(),
            (Some(e.lambda) == fit.lambda).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One line of `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub schema: String,
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    /// SHA-256 of every input file, keyed by path.
    pub inputs: Vec<(String, String)>,
    /// SHA-256 of every output file, keyed by path relative to the output directory.
    pub outputs: Vec<(String, String)>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub version: String,
    /// Wall-clock milliseconds per stage, kept out of the deterministic outputs.
    pub timing: std::collections::BTreeMap<String, f64>,
}

/// Append one JSON line; existing entries are never rewritten.
pub fn append_manifest(path: &Path, entry: &ManifestEntry) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_string(entry)?;
    line.push('\n');
    f.write_all(line.as_bytes())?;
    Ok(())
}

pub fn unix_ms() -> u128 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub schema: String,
    pub design: SimDesign,
    /// 1-based true labels.
    pub labels: Vec<usize>,
    pub means: Vec<Vec<f64>>,
    pub sigma_x: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
    pub seed: u64,
}

impl TruthFile {
    pub fn new(design: &SimDesign, sample: &SimSample) -> Self {
        let rows = |m: &nalgebra::DMatrix<f64>| (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        TruthFile {
            schema: TRUTH_SCHEMA.into(),
            design: design.clone(),
            labels: sample.truth.one_based(),
            means: rows(&sample.params.means),
            sigma_x: rows(&sample.sigma_x),
            probs: sample.params.probs.clone(),
            seed: design.seed,
        }
    }
}

/// Data CSV with columns x1..xp.
pub fn write_data_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((1..=data.p()).map(|j| format!("x{j}")))?;
    for row in data.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_numeric_csv_with_label_column() {
        let text = "a,b,group\n1,2,x\n3,4.5,y\n-1,0,x\n";
        let t = parse_csv(text.as_bytes(), Some("group")).unwrap();
        assert_eq!(t.columns, vec!["a", "b"]);
        assert_eq!(t.data.n(), 3);
        assert_eq!(t.data.row(1), &[3.0, 4.5]);
        let part = labels_to_partition(t.labels.as_ref().unwrap()).unwrap();
        assert_eq!(part.labels(), &[0, 1, 0]);
        assert_eq!(t.sha256.len(), 64);
    }

    #[test]
    fn parse_errors_carry_position() {
        let err = parse_csv("a,b\n1,2\n3,oops\n".as_bytes(), None).unwrap_err();
        assert!(matches!(err, ScedError::Parse { line: 3, col: 2, .. }), "{err}");
        let err = parse_csv("a,b\n1,2\n3\n".as_bytes(), None).unwrap_err();
        assert!(matches!(err, ScedError::Parse { line: 3, .. }), "{err}");
        assert!(matches!(parse_csv("a\n1\n2\n".as_bytes(), Some("z")), Err(ScedError::Parse { line: 1, .. })));
    }

    #[test]
    fn constant_column_is_reported_on_standardization() {
        let t = parse_csv("a,b\n1,5\n2,5\n3,5\n".as_bytes(), None).unwrap();
        assert!(matches!(t.data.standardize(), Err(ScedError::ConstantColumn(1))));
    }

    #[test]
    fn manifest_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let entry = ManifestEntry {
            schema: MANIFEST_SCHEMA.into(),
            command: "fit".into(),
            args: vec![],
            seed: 1,
            inputs: vec![("x.csv".into(), sha256_hex(b"abc"))],
            outputs: vec![],
            started_unix_ms: 0,
            finished_unix_ms: 1,
            version: "0".into(),
            timing: Default::default(),
        };
        append_manifest(&path, &entry).unwrap();
        append_manifest(&path, &entry).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        let back: ManifestEntry = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(back, entry);
        // SHA-256 of "abc"
        assert_eq!(entry.inputs[0].1, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
