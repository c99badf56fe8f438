//! CSV and JSON persistence of inputs, candidate sequences and chains.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use csv::{ReaderBuilder, StringRecord, Trim, WriterBuilder};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::elicitation::{ElicitationTrace, PeriodCounts};
use crate::error::{Error, Result};
use crate::graph::{AdjacencyStructure, CandidateSequence};
use crate::model::{Dataset, ModelKind};
use crate::sampler::{ChainSamples, PosteriorSamples};
use crate::simgen::{MeanTemplate, Point};

pub const SEQUENCE_CSV: &str = "sequence.csv";
pub const SEQUENCE_JSON: &str = "sequence.json";
pub const TRACE_CSV: &str = "trace.csv";

/// Hex SHA-256 of a file's bytes.
pub fn hash_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let read = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if read == 0 {
            break;
        }
        hasher.update(&buf[..read]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Rows of a headed CSV with the line number of each row.
struct Table {
    path: PathBuf,
    header: Vec<String>,
    rows: Vec<(u64, StringRecord)>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = ReaderBuilder::new()
            .trim(Trim::All)
            .comment(Some(b'#'))
            .from_reader(file);
        let header = reader
            .headers()
            .map_err(|e| parse_err(path, 1, e.to_string()))?
            .iter()
            .map(|h| h.to_ascii_lowercase())
            .collect();
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                parse_err(path, line, e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            rows.push((line, rec));
        }
        Ok(Self {
            path: path.to_path_buf(),
            header,
            rows,
        })
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(&self.path, 1, format!("missing column {name:?}")))
    }

    fn get<T: std::str::FromStr>(&self, line: u64, rec: &StringRecord, col: usize, what: &str) -> Result<T> {
        let raw = rec.get(col).unwrap_or("");
        raw.parse()
            .map_err(|_| parse_err(&self.path, line, format!("invalid {what} {raw:?}")))
    }

    /// Maps each row to its 0-based unit index, requiring units `1..=n`
    /// each exactly once.
    fn unit_order(&self) -> Result<Vec<usize>> {
        let col = self.column("unit")?;
        let n = self.rows.len();
        let mut slot = vec![usize::MAX; n];
        let mut order = Vec::with_capacity(n);
        for (i, (line, rec)) in self.rows.iter().enumerate() {
            let unit: usize = self.get(*line, rec, col, "unit")?;
            if unit == 0 || unit > n {
                return Err(Error::InconsistentUnits(format!(
                    "{}: unit {unit} outside 1..={n} (line {line})",
                    self.path.display()
                )));
            }
            if slot[unit - 1] != usize::MAX {
                return Err(parse_err(&self.path, *line, format!("duplicate unit {unit}")));
            }
            slot[unit - 1] = i;
            order.push(unit - 1);
        }
        Ok(order)
    }
}

/// Observed and expected counts plus raw covariate columns, in unit order.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub observed: Vec<u64>,
    pub expected: Vec<f64>,
    pub covariates: Vec<(String, Vec<f64>)>,
}

impl RawDataset {
    pub fn n(&self) -> usize {
        self.observed.len()
    }

    pub fn into_dataset(self, standardise: bool) -> Result<Dataset> {
        Dataset::from_covariates(self.observed, self.expected, &self.covariates, standardise)
    }
}

/// Reads `unit,observed,expected,cov1,...,covp`.
pub fn read_raw_dataset(path: &Path) -> Result<RawDataset> {
    let t = Table::read(path)?;
    let order = t.unit_order()?;
    let (c_obs, c_exp) = (t.column("observed")?, t.column("expected")?);
    let unit_col = t.column("unit")?;
    let cov_cols: Vec<usize> = (0..t.header.len())
        .filter(|&c| c != unit_col && c != c_obs && c != c_exp)
        .collect();
    let n = t.rows.len();
    let mut observed = vec![0u64; n];
    let mut expected = vec![0f64; n];
    let mut covs = vec![vec![0f64; n]; cov_cols.len()];
    for ((line, rec), &k) in t.rows.iter().zip(&order) {
        observed[k] = t.get(*line, rec, c_obs, "observed count")?;
        let e: f64 = t.get(*line, rec, c_exp, "expected count")?;
        if !(e > 0.0) || !e.is_finite() {
            return Err(Error::NonPositiveExpected { unit: k + 1, value: e });
        }
        expected[k] = e;
        for (i, &c) in cov_cols.iter().enumerate() {
            covs[i][k] = t.get(*line, rec, c, "covariate")?;
        }
    }
    Ok(RawDataset {
        observed,
        expected,
        covariates: cov_cols.iter().map(|&c| t.header[c].clone()).zip(covs).collect(),
    })
}

pub fn read_dataset(path: &Path, standardise: bool) -> Result<Dataset> {
    read_raw_dataset(path)?.into_dataset(standardise)
}

pub fn write_raw_dataset(path: &Path, data: &RawDataset) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["unit".to_string(), "observed".into(), "expected".into()];
    header.extend(data.covariates.iter().map(|(n, _)| n.clone()));
    w.write_record(&header).map_err(|e| csv_io(path, e))?;
    for k in 0..data.n() {
        let mut row = vec![(k + 1).to_string(), data.observed[k].to_string(), data.expected[k].to_string()];
        row.extend(data.covariates.iter().map(|(_, c)| c[k].to_string()));
        w.write_record(&row).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Covariate columns of a file with a `unit` column; `observed` and
/// `expected` columns, if present, are ignored.
pub fn read_covariates(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let t = Table::read(path)?;
    let order = t.unit_order()?;
    let unit_col = t.column("unit")?;
    let cols: Vec<usize> = (0..t.header.len())
        .filter(|&c| c != unit_col && t.header[c] != "observed" && t.header[c] != "expected")
        .collect();
    let n = t.rows.len();
    let mut out: Vec<(String, Vec<f64>)> = cols.iter().map(|&c| (t.header[c].clone(), vec![0.0; n])).collect();
    for ((line, rec), &k) in t.rows.iter().zip(&order) {
        for (i, &c) in cols.iter().enumerate() {
            out[i].1[k] = t.get(*line, rec, c, "covariate")?;
        }
    }
    Ok(out)
}

/// Design matrix `[1, covariates]` for elicitation.
pub fn design_matrix(n: usize, covariates: &[(String, Vec<f64>)]) -> Result<DMatrix<f64>> {
    for (name, c) in covariates {
        if c.len() != n {
            return Err(Error::InconsistentUnits(format!("covariate {name} has {} units, expected {n}", c.len())));
        }
    }
    Ok(DMatrix::from_fn(n, covariates.len() + 1, |k, c| if c == 0 { 1.0 } else { covariates[c - 1].1[k] }))
}

/// Reads `unit,observed,expected` for one prior period.
pub fn read_period(path: &Path) -> Result<PeriodCounts> {
    let raw = read_raw_dataset(path)?;
    Ok(PeriodCounts {
        observed: raw.observed,
        expected: raw.expected,
    })
}

pub fn write_period(path: &Path, period: &PeriodCounts) -> Result<()> {
    write_raw_dataset(
        path,
        &RawDataset {
            observed: period.observed.clone(),
            expected: period.expected.clone(),
            covariates: Vec::new(),
        },
    )
}

/// Reads `from,to` edges with 1-based units. With `n` given, any unit above
/// `n` is an inconsistency; otherwise `n` is the largest unit seen.
pub fn read_adjacency(path: &Path, n: Option<usize>) -> Result<AdjacencyStructure> {
    let t = Table::read(path)?;
    let (cf, ct) = (t.column("from")?, t.column("to")?);
    let mut pairs = Vec::with_capacity(t.rows.len());
    for (line, rec) in &t.rows {
        let a: usize = t.get(*line, rec, cf, "unit")?;
        let b: usize = t.get(*line, rec, ct, "unit")?;
        if a == 0 || b == 0 {
            return Err(parse_err(path, *line, "units are 1-based"));
        }
        if let Some(n) = n {
            if a > n || b > n {
                return Err(Error::InconsistentUnits(format!(
                    "{}: edge ({a},{b}) on line {line} references a unit beyond {n}",
                    path.display()
                )));
            }
        }
        if a == b {
            return Err(Error::SelfLoop { unit: a });
        }
        pairs.push((a - 1, b - 1));
    }
    let n = n.unwrap_or_else(|| pairs.iter().map(|&(a, b)| a.max(b) + 1).max().unwrap_or(0));
    AdjacencyStructure::new(n, pairs)
}

pub fn write_adjacency(path: &Path, adj: &AdjacencyStructure) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["from", "to"]).map_err(|e| csv_io(path, e))?;
    for &(a, b) in adj.edges() {
        w.write_record([(a + 1).to_string(), (b + 1).to_string()])
            .map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_centroids(path: &Path) -> Result<Vec<Point>> {
    let t = Table::read(path)?;
    let order = t.unit_order()?;
    let (cx, cy) = (t.column("x")?, t.column("y")?);
    let mut out = vec![(0.0, 0.0); t.rows.len()];
    for ((line, rec), &k) in t.rows.iter().zip(&order) {
        out[k] = (t.get(*line, rec, cx, "x")?, t.get(*line, rec, cy, "y")?);
    }
    Ok(out)
}

pub fn read_template(path: &Path) -> Result<MeanTemplate> {
    let t = Table::read(path)?;
    let order = t.unit_order()?;
    let c = t.column("label")?;
    let mut labels = vec![0i8; t.rows.len()];
    for ((line, rec), &k) in t.rows.iter().zip(&order) {
        labels[k] = t.get(*line, rec, c, "label")?;
    }
    MeanTemplate::new(labels)
}

/// Sidecar describing a stored candidate sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub n: usize,
    pub n_edges: usize,
    pub epsilon: f64,
    pub adjacency_hash: String,
    #[serde(default)]
    pub options: BTreeMap<String, String>,
}

/// Writes `sequence.csv`, `trace.csv` and `sequence.json` into `dir`.
pub fn write_sequence(
    dir: &Path,
    seq: &CandidateSequence,
    trace: &ElicitationTrace,
    epsilon: f64,
    options: BTreeMap<String, String>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let adj = seq.base();
    let path = dir.join(SEQUENCE_CSV);
    let mut w = csv_writer(&path)?;
    w.write_record(["step", "edge_from", "edge_to", "loglik"]).map_err(|e| csv_io(&path, e))?;
    for (i, &e) in seq.removal_order().iter().enumerate() {
        let (a, b) = adj.edge(e);
        let ll = trace.steps.get(i).map_or(f64::NAN, |s| s.loglik);
        w.write_record([(i + 1).to_string(), (a + 1).to_string(), (b + 1).to_string(), ll.to_string()])
            .map_err(|e| csv_io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(TRACE_CSV);
    let mut w = csv_writer(&path)?;
    let p = trace.steps.first().map_or(0, |s| s.beta_hat.len());
    let mut header: Vec<String> = ["step", "edge_from", "edge_to", "loglik"].map(String::from).to_vec();
    header.extend((0..p).map(|c| format!("beta_hat{c}")));
    header.extend(["tau2_hat".to_string(), "degenerate".to_string()]);
    w.write_record(&header).map_err(|e| csv_io(&path, e))?;
    for s in &trace.steps {
        let (a, b) = adj.edge(s.edge);
        let mut row = vec![s.step.to_string(), (a + 1).to_string(), (b + 1).to_string(), s.loglik.to_string()];
        row.extend(s.beta_hat.iter().map(|v| v.to_string()));
        row.extend([s.tau2_hat.to_string(), s.degenerate.to_string()]);
        w.write_record(&row).map_err(|e| csv_io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let meta = SequenceMeta {
        n: adj.n(),
        n_edges: adj.n_edges(),
        epsilon,
        adjacency_hash: adj.hash(),
        options,
    };
    write_json(&dir.join(SEQUENCE_JSON), &meta)
}

/// Reads a stored sequence and checks it against `adj`.
pub fn read_sequence(dir: &Path, adj: Arc<AdjacencyStructure>) -> Result<(CandidateSequence, SequenceMeta)> {
    let meta: SequenceMeta = read_json(&dir.join(SEQUENCE_JSON))?;
    if meta.adjacency_hash != adj.hash() || meta.n != adj.n() {
        return Err(Error::InconsistentUnits(format!(
            "sequence in {} was elicited on a different adjacency",
            dir.display()
        )));
    }
    let path = dir.join(SEQUENCE_CSV);
    let t = Table::read(&path)?;
    let (cf, ct) = (t.column("edge_from")?, t.column("edge_to")?);
    let mut order = Vec::with_capacity(t.rows.len());
    for (line, rec) in &t.rows {
        let a: usize = t.get(*line, rec, cf, "unit")?;
        let b: usize = t.get(*line, rec, ct, "unit")?;
        let e = (a >= 1 && b >= 1)
            .then(|| adj.edge_index(a - 1, b - 1))
            .flatten()
            .ok_or_else(|| parse_err(&path, *line, format!("({a},{b}) is not an edge of the adjacency")))?;
        order.push(e);
    }
    Ok((CandidateSequence::new(adj, order)?, meta))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(WriterBuilder::new().from_writer(file))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

pub fn chain_file(dir: &Path, c: usize) -> PathBuf {
    dir.join(format!("chain{}.csv", c + 1))
}

pub fn phi_file(dir: &Path, c: usize) -> PathBuf {
    dir.join(format!("phi_chain{}.csv", c + 1))
}

pub fn theta_file(dir: &Path, c: usize) -> PathBuf {
    dir.join(format!("theta_chain{}.csv", c + 1))
}

fn write_matrix(path: &Path, prefix: &str, rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let n = rows.first().map_or(0, Vec::len);
    let mut header = vec!["iter".to_string()];
    header.extend((1..=n).map(|k| format!("{prefix}{k}")));
    w.write_record(&header).map_err(|e| csv_io(path, e))?;
    for (i, row) in rows.iter().enumerate() {
        let mut rec = vec![(i + 1).to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let t = Table::read(path)?;
    t.rows
        .iter()
        .map(|(line, rec)| (1..rec.len()).map(|c| t.get(*line, rec, c, "value")).collect())
        .collect()
}

/// One `chainC.csv` per chain (`iter,beta0..betap,tau2,phi_star,j,deviance`
/// plus `sigma2` for BYM) and the random effects in `phi_chainC.csv`
/// (`theta_chainC.csv` for BYM).
pub fn write_samples(dir: &Path, samples: &PosteriorSamples) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bym = samples.model == ModelKind::Bym;
    for (c, ch) in samples.chains.iter().enumerate() {
        let path = chain_file(dir, c);
        let mut w = csv_writer(&path)?;
        let p = ch.beta.first().map_or(0, Vec::len);
        let mut header = vec!["iter".to_string()];
        header.extend((0..p).map(|i| format!("beta{i}")));
        header.extend(["tau2", "phi_star", "j", "deviance"].map(String::from));
        if bym {
            header.push("sigma2".into());
        }
        w.write_record(&header).map_err(|e| csv_io(&path, e))?;
        for i in 0..ch.len() {
            let mut rec = vec![(i + 1).to_string()];
            rec.extend(ch.beta[i].iter().map(|v| v.to_string()));
            rec.extend([
                ch.tau2[i].to_string(),
                ch.phi_star[i].to_string(),
                ch.candidate_j[i].to_string(),
                ch.deviance[i].to_string(),
            ]);
            if bym {
                rec.push(ch.sigma2[i].to_string());
            }
            w.write_record(&rec).map_err(|e| csv_io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        write_matrix(&phi_file(dir, c), "phi", &ch.phi)?;
        if bym {
            write_matrix(&theta_file(dir, c), "theta", &ch.theta)?;
        }
    }
    Ok(())
}

/// Reads back the draws written by [`write_samples`]. Acceptance counters
/// are not persisted and come back empty.
pub fn read_samples(dir: &Path, model: ModelKind, n_chains: usize, n_edges: usize) -> Result<PosteriorSamples> {
    let mut chains = Vec::with_capacity(n_chains);
    for c in 0..n_chains {
        let path = chain_file(dir, c);
        let t = Table::read(&path)?;
        let p = t.header.iter().filter(|h| h.starts_with("beta")).count();
        let col = |name: &str| t.column(name);
        let (ct, cs, cj, cd) = (col("tau2")?, col("phi_star")?, col("j")?, col("deviance")?);
        let mut ch = ChainSamples::default();
        for (line, rec) in &t.rows {
            ch.beta.push((0..p).map(|i| t.get(*line, rec, 1 + i, "beta")).collect::<Result<_>>()?);
            ch.tau2.push(t.get(*line, rec, ct, "tau2")?);
            ch.phi_star.push(t.get(*line, rec, cs, "phi_star")?);
            ch.candidate_j.push(t.get(*line, rec, cj, "j")?);
            ch.deviance.push(t.get(*line, rec, cd, "deviance")?);
            if model == ModelKind::Bym {
                ch.sigma2.push(t.get(*line, rec, col("sigma2")?, "sigma2")?);
            }
        }
        ch.phi = read_matrix(&phi_file(dir, c))?;
        if model == ModelKind::Bym {
            ch.theta = read_matrix(&theta_file(dir, c))?;
        }
        if ch.phi.len() != ch.tau2.len() {
            return Err(Error::DimensionMismatch { expected: ch.tau2.len(), got: ch.phi.len() });
        }
        chains.push(ch);
    }
    Ok(PosteriorSamples { model, n_edges, chains })
}

/// Writes a headed CSV from string rows.
pub fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| csv_io(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
