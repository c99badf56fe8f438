//! End-to-end commands (elicit, fit, simulate, diagnose) with a manifest
//! recording everything needed to re-execute a run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::diagnostics::{edges_removed_density, summarise, DEFAULT_PERMUTATIONS};
use crate::elicitation::{elicit_sequence, ElicitationOptions, MeanNormaliser, PriorData};
use crate::error::{Error, Result};
use crate::io;
use crate::model::{ModelKind, Standardisation};
use crate::precision::precompute_logdets;
use crate::rng::substream;
use crate::sampler::{run_chains, AcceptanceSummary, ConvergenceSummary, PosteriorSamples, SamplerConfig};
use crate::simgen::{
    generate_replicate, run_scenario, MeanTemplate, SimGeometry, SimScenario, StudyConfig,
};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElicitRequest {
    pub adjacency: PathBuf,
    pub prior: Vec<PathBuf>,
    /// File with a `unit` column and covariate columns; intercept only when
    /// absent.
    pub covariates: Option<PathBuf>,
    pub epsilon: f64,
    pub options: ElicitationOptions,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRequest {
    pub model: ModelKind,
    pub data: PathBuf,
    pub adjacency: PathBuf,
    pub sequence: Option<PathBuf>,
    pub standardise: bool,
    pub sampler: SamplerConfig,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateRequest {
    pub scenarios: Vec<SimScenario>,
    /// Side of the square lattice used when no geometry files are given.
    pub lattice: usize,
    pub centroids: Option<PathBuf>,
    pub adjacency: Option<PathBuf>,
    pub template: Option<PathBuf>,
    pub study: StudyConfig,
    /// Fit the models and score them; otherwise only write the data.
    pub fit: bool,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseRequest {
    pub run: PathBuf,
    pub data: PathBuf,
    pub adjacency: PathBuf,
    pub permutations: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl DiagnoseRequest {
    pub fn new(run: PathBuf, data: PathBuf, adjacency: PathBuf) -> Self {
        let out = run.join("diagnostics");
        Self {
            run,
            data,
            adjacency,
            permutations: DEFAULT_PERMUTATIONS,
            seed: 1,
            out,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Request {
    Elicit(ElicitRequest),
    Fit(FitRequest),
    Simulate(SimulateRequest),
    Diagnose(DiagnoseRequest),
}

impl Request {
    pub fn name(&self) -> &'static str {
        match self {
            Request::Elicit(_) => "elicit",
            Request::Fit(_) => "fit",
            Request::Simulate(_) => "simulate",
            Request::Diagnose(_) => "diagnose",
        }
    }

    pub fn out(&self) -> &Path {
        match self {
            Request::Elicit(r) => &r.out,
            Request::Fit(r) => &r.out,
            Request::Simulate(r) => &r.out,
            Request::Diagnose(r) => &r.out,
        }
    }

    fn set_out(&mut self, out: PathBuf) {
        match self {
            Request::Elicit(r) => r.out = out,
            Request::Fit(r) => r.out = out,
            Request::Simulate(r) => r.out = out,
            Request::Diagnose(r) => r.out = out,
        }
    }

    /// Input files with their roles.
    pub fn inputs(&self) -> Vec<(String, PathBuf)> {
        let mut out = Vec::new();
        match self {
            Request::Elicit(r) => {
                out.push(("adjacency".into(), r.adjacency.clone()));
                for (i, p) in r.prior.iter().enumerate() {
                    out.push((format!("prior{}", i + 1), p.clone()));
                }
                if let Some(c) = &r.covariates {
                    out.push(("covariates".into(), c.clone()));
                }
            }
            Request::Fit(r) => {
                out.push(("data".into(), r.data.clone()));
                out.push(("adjacency".into(), r.adjacency.clone()));
                if let Some(s) = &r.sequence {
                    out.push(("sequence".into(), s.join(io::SEQUENCE_CSV)));
                    out.push(("sequence_meta".into(), s.join(io::SEQUENCE_JSON)));
                }
            }
            Request::Simulate(r) => {
                for (role, p) in [("centroids", &r.centroids), ("adjacency", &r.adjacency), ("template", &r.template)] {
                    if let Some(p) = p {
                        out.push((role.into(), p.clone()));
                    }
                }
            }
            Request::Diagnose(r) => {
                out.push(("data".into(), r.data.clone()));
                out.push(("adjacency".into(), r.adjacency.clone()));
                out.push(("run_manifest".into(), r.run.join(MANIFEST)));
            }
        }
        out
    }

    fn seeds(&self) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        match self {
            Request::Fit(r) => {
                out.insert("sampler".into(), r.sampler.seed);
            }
            Request::Simulate(r) => {
                for s in &r.scenarios {
                    out.insert(s.label(), s.seed);
                }
            }
            Request::Diagnose(r) => {
                out.insert("permutation".into(), r.seed);
            }
            Request::Elicit(_) => {}
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub status: String,
    pub error: Option<String>,
    pub request: Request,
    pub inputs: Vec<InputRecord>,
    pub seeds: BTreeMap<String, u64>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub standardisation: Vec<Standardisation>,
    pub flags: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn hash_inputs(req: &Request) -> Result<Vec<InputRecord>> {
    req.inputs()
        .into_iter()
        .map(|(role, path)| {
            let sha256 = io::hash_file(&path)?;
            Ok(InputRecord { role, path, sha256 })
        })
        .collect()
}

/// Modelling choices in effect, recorded with every run.
fn flags(req: &Request) -> BTreeMap<String, String> {
    let mut f = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        f.insert(k.to_string(), v);
    };
    let elicitation = |o: &ElicitationOptions| {
        let n = match o.normaliser {
            MeanNormaliser::Units => "units",
            MeanNormaliser::Periods => "periods",
        };
        (n.to_string(), if o.refresh_per_trial { "per_trial" } else { "per_step" }.to_string())
    };
    match req {
        Request::Elicit(r) => {
            let (n, refresh) = elicitation(&r.options);
            put("beta_hat_normaliser", n);
            put("estimate_refresh", refresh);
            put("zero_count_correction", "0.5".into());
            put("tie_break", "smallest_edge_index".into());
        }
        Request::Fit(r) => {
            put("iar_constraint", "recentre_phi_each_sweep".into());
            put("bym_sigma2_prior", format!("uniform(0,{})", r.sampler.priors.sigma2_max));
            put("tau2_update", "exact_truncated_inverse_gamma".into());
            put("candidate_boundary_correction", "true".into());
            put("covariates_standardised", r.standardise.to_string());
        }
        Request::Simulate(r) => {
            let (n, refresh) = elicitation(&r.study.elicitation);
            put("beta_hat_normaliser", n);
            put("estimate_refresh", refresh);
            put("residual_field_variance", "1".into());
            put("expected_count_distribution", "uniform".into());
            put("prior_period_poisson_noise", "fresh".into());
            put("fitted_value_summary", "posterior_mean".into());
            put("beta_summary", "posterior_median".into());
        }
        Request::Diagnose(_) => {
            put("moran_residuals", "pearson_at_posterior_mean".into());
            put("edges_removed_density", "histogram".into());
        }
    }
    f
}

fn create_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn rel(out: &Path, path: &Path) -> String {
    path.strip_prefix(out).unwrap_or(path).display().to_string()
}

/// Runs a request and writes its manifest into the output directory.
pub fn execute(req: &Request) -> Result<RunManifest> {
    let started_unix = now();
    let inputs = hash_inputs(req)?;
    create_out(req.out())?;
    let (standardisation, outputs) = match req {
        Request::Elicit(r) => (Vec::new(), run_elicit(r)?),
        Request::Fit(r) => run_fit(r)?,
        Request::Simulate(r) => (Vec::new(), run_simulate(r)?),
        Request::Diagnose(r) => (Vec::new(), run_diagnose(r)?),
    };
    let manifest = RunManifest {
        command: req.name().into(),
        version: env!("CARGO_PKG_VERSION").into(),
        status: "ok".into(),
        error: None,
        request: req.clone(),
        inputs,
        seeds: req.seeds(),
        started_unix,
        finished_unix: now(),
        standardisation,
        flags: flags(req),
        outputs: outputs.iter().map(|p| rel(req.out(), p)).collect(),
    };
    io::write_json(&req.out().join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Records a failed run. Input hashes are best effort.
pub fn write_failure_manifest(req: &Request, err: &Error) -> Result<()> {
    create_out(req.out())?;
    let inputs = req
        .inputs()
        .into_iter()
        .filter_map(|(role, path)| io::hash_file(&path).ok().map(|sha256| InputRecord { role, path, sha256 }))
        .collect();
    let manifest = RunManifest {
        command: req.name().into(),
        version: env!("CARGO_PKG_VERSION").into(),
        status: "failed".into(),
        error: Some(err.to_string()),
        request: req.clone(),
        inputs,
        seeds: req.seeds(),
        started_unix: now(),
        finished_unix: now(),
        standardisation: Vec::new(),
        flags: flags(req),
        outputs: Vec::new(),
    };
    io::write_json(&req.out().join(MANIFEST), &manifest)
}

/// Re-executes the request stored in a manifest after checking that every
/// input still hashes to the recorded value. `out` overrides the output
/// directory.
pub fn replay(manifest_path: &Path, out: Option<PathBuf>) -> Result<RunManifest> {
    let manifest: RunManifest = io::read_json(manifest_path)?;
    for input in &manifest.inputs {
        let now = io::hash_file(&input.path)?;
        if now != input.sha256 {
            return Err(Error::Invalid(format!(
                "input {} ({}) changed since the recorded run",
                input.role,
                input.path.display()
            )));
        }
    }
    let mut req = manifest.request;
    if let Some(out) = out {
        req.set_out(out);
    }
    execute(&req)
}

fn run_elicit(r: &ElicitRequest) -> Result<Vec<PathBuf>> {
    if r.prior.is_empty() {
        return Err(Error::EmptyPriorData);
    }
    let periods = r.prior.iter().map(|p| io::read_period(p)).collect::<Result<Vec<_>>>()?;
    let n = periods[0].observed.len();
    if let Some((i, _)) = periods.iter().enumerate().find(|(_, p)| p.observed.len() != n) {
        return Err(Error::InconsistentUnits(format!(
            "prior period {} has {} units, period 1 has {n}",
            i + 1,
            periods[i].observed.len()
        )));
    }
    let adj = Arc::new(io::read_adjacency(&r.adjacency, Some(n))?);
    let covariates = match &r.covariates {
        Some(p) => io::read_covariates(p)?,
        None => Vec::new(),
    };
    let x = io::design_matrix(n, &covariates)?;
    let data = PriorData::from_counts(&periods, x)?;
    let (seq, trace) = elicit_sequence(adj, &data, r.epsilon, r.options)?;
    let mut opts = BTreeMap::new();
    opts.insert("refresh_per_trial".into(), r.options.refresh_per_trial.to_string());
    opts.insert("normaliser".into(), format!("{:?}", r.options.normaliser).to_lowercase());
    opts.insert("periods".into(), periods.len().to_string());
    io::write_sequence(&r.out, &seq, &trace, r.epsilon, opts)?;
    Ok(vec![
        r.out.join(io::SEQUENCE_CSV),
        r.out.join(io::TRACE_CSV),
        r.out.join(io::SEQUENCE_JSON),
    ])
}

/// Acceptance rates, convergence and numerical flags of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub model: ModelKind,
    pub n_chains: usize,
    pub draws_per_chain: usize,
    pub acceptance: Vec<AcceptanceSummary>,
    pub convergence: ConvergenceSummary,
    pub rate_floor_hits: Vec<u64>,
    pub beta_resets: Vec<u64>,
}

fn run_fit(r: &FitRequest) -> Result<(Vec<Standardisation>, Vec<PathBuf>)> {
    let raw = io::read_raw_dataset(&r.data)?;
    let n = raw.n();
    let data = raw.into_dataset(r.standardise)?;
    let adj = Arc::new(io::read_adjacency(&r.adjacency, Some(n))?);
    let seq = match (r.model, &r.sequence) {
        (ModelKind::Lcar, None) => return Err(Error::MissingSequence),
        (ModelKind::Lcar, Some(dir)) => {
            let (mut seq, _) = io::read_sequence(dir, adj.clone())?;
            precompute_logdets(&mut seq, r.sampler.epsilon)?;
            Some(seq)
        }
        _ => None,
    };
    let samples = run_chains(&data, &adj, seq.as_ref(), r.model, &r.sampler)?;
    io::write_samples(&r.out, &samples)?;
    let mut outputs: Vec<PathBuf> = (0..samples.chains.len())
        .flat_map(|c| {
            let mut v = vec![io::chain_file(&r.out, c), io::phi_file(&r.out, c)];
            if r.model == ModelKind::Bym {
                v.push(io::theta_file(&r.out, c));
            }
            v
        })
        .collect();
    let report = FitReport {
        model: r.model,
        n_chains: samples.chains.len(),
        draws_per_chain: r.sampler.n_draws(),
        acceptance: samples.chains.iter().map(|c| c.acceptance).collect(),
        convergence: samples.convergence(),
        rate_floor_hits: samples.chains.iter().map(|c| c.rate_floor_hits).collect(),
        beta_resets: samples.chains.iter().map(|c| c.beta_resets).collect(),
    };
    let path = r.out.join("fit_report.json");
    io::write_json(&path, &report)?;
    outputs.push(path);
    if r.model == ModelKind::Lcar {
        outputs.push(write_edges_removed(&r.out, &samples)?);
    }
    Ok((data.standardisation().to_vec(), outputs))
}

fn write_edges_removed(dir: &Path, samples: &PosteriorSamples) -> Result<PathBuf> {
    let d = edges_removed_density(samples)?;
    let path = dir.join("edges_removed.csv");
    let mut header = vec!["edges_removed".to_string(), "pooled".to_string()];
    header.extend((1..=d.per_chain.len()).map(|c| format!("chain{c}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = (0..d.pooled.len()).map(|b| {
        let mut row = vec![b.to_string(), d.pooled[b].to_string()];
        row.extend(d.per_chain.iter().map(|h| h[b].to_string()));
        row
    });
    io::write_rows(&path, &header_refs, rows)?;
    Ok(path)
}

fn sanitise(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

fn simulation_geometry(r: &SimulateRequest) -> Result<SimGeometry> {
    match (&r.centroids, &r.adjacency) {
        (None, None) => {
            let mut geo = SimGeometry::lattice(r.lattice)?;
            if let Some(t) = &r.template {
                geo = SimGeometry::new(geo.centroids, geo.adjacency, io::read_template(t)?)?;
            }
            Ok(geo)
        }
        (Some(c), Some(a)) => {
            let centroids = io::read_centroids(c)?;
            let adj = Arc::new(io::read_adjacency(a, Some(centroids.len()))?);
            let template = match &r.template {
                Some(t) => io::read_template(t)?,
                None => MeanTemplate::flat(centroids.len()),
            };
            SimGeometry::new(centroids, adj, template)
        }
        _ => Err(Error::Invalid("centroids and adjacency must be given together".into())),
    }
}

fn run_simulate(r: &SimulateRequest) -> Result<Vec<PathBuf>> {
    if r.scenarios.is_empty() {
        return Err(Error::Invalid("no scenarios requested".into()));
    }
    let geo = simulation_geometry(r)?;
    let mut outputs = Vec::new();
    let adj_path = r.out.join("adjacency.csv");
    io::write_adjacency(&adj_path, &geo.adjacency)?;
    outputs.push(adj_path);
    let cent_path = r.out.join("centroids.csv");
    io::write_rows(
        &cent_path,
        &["unit", "x", "y"],
        geo.centroids
            .iter()
            .enumerate()
            .map(|(k, p)| vec![(k + 1).to_string(), p.0.to_string(), p.1.to_string()]),
    )?;
    outputs.push(cent_path);

    let mut rmse_rows = Vec::new();
    let mut estimate_rows = Vec::new();
    for scenario in &r.scenarios {
        let dir = r.out.join(sanitise(&scenario.label()));
        create_out(&dir)?;
        let field = geo.field(scenario)?;
        for i in 0..scenario.n_replicates {
            let rep = generate_replicate(scenario, &geo, &field, &mut substream(scenario.seed, "replicate", i as u64))?;
            let rep_dir = dir.join(format!("rep{}", i + 1));
            create_out(&rep_dir)?;
            let raw = io::RawDataset {
                observed: rep.data.y().to_vec(),
                expected: rep.data.e().to_vec(),
                covariates: vec![("x".into(), rep.truth.covariate.clone())],
            };
            let data_path = rep_dir.join("data.csv");
            io::write_raw_dataset(&data_path, &raw)?;
            outputs.push(data_path);
            for (p, period) in rep.prior.iter().enumerate() {
                let path = rep_dir.join(format!("prior{}.csv", p + 1));
                io::write_period(&path, period)?;
                outputs.push(path);
            }
            let truth_path = rep_dir.join("truth.csv");
            let t = &rep.truth;
            io::write_rows(
                &truth_path,
                &["unit", "covariate", "residual", "log_risk", "fitted"],
                (0..geo.n()).map(|k| {
                    vec![
                        (k + 1).to_string(),
                        t.covariate[k].to_string(),
                        t.residual[k].to_string(),
                        t.log_risk[k].to_string(),
                        t.fitted[k].to_string(),
                    ]
                }),
            )?;
            outputs.push(truth_path);
        }
        if r.fit {
            let res = run_scenario(scenario, &geo, &r.study)?;
            for m in &res.rmse {
                rmse_rows.push(vec![
                    scenario.label(),
                    m.model.to_string(),
                    m.beta.rmse.to_string(),
                    m.beta.lower.to_string(),
                    m.beta.upper.to_string(),
                    m.fitted.rmse.to_string(),
                    m.fitted.lower.to_string(),
                    m.fitted.upper.to_string(),
                ]);
            }
            for rep in &res.replicates {
                for e in &rep.estimates {
                    estimate_rows.push(vec![
                        scenario.label(),
                        (rep.index + 1).to_string(),
                        e.model.to_string(),
                        e.beta_median.to_string(),
                        e.beta_lower.to_string(),
                        e.beta_upper.to_string(),
                        e.mean_edges_removed.map_or(String::new(), |v| v.to_string()),
                    ]);
                }
            }
        }
    }
    if r.fit {
        let path = r.out.join("rmse.csv");
        io::write_rows(
            &path,
            &["scenario", "model", "beta_rmse", "beta_lower", "beta_upper", "fitted_rmse", "fitted_lower", "fitted_upper"],
            rmse_rows,
        )?;
        outputs.push(path);
        let path = r.out.join("estimates.csv");
        io::write_rows(
            &path,
            &["scenario", "replicate", "model", "beta_median", "beta_lower", "beta_upper", "mean_edges_removed"],
            estimate_rows,
        )?;
        outputs.push(path);
    }
    Ok(outputs)
}

fn run_diagnose(r: &DiagnoseRequest) -> Result<Vec<PathBuf>> {
    let fit_manifest: RunManifest = io::read_json(&r.run.join(MANIFEST))?;
    let Request::Fit(fit) = &fit_manifest.request else {
        return Err(Error::Invalid(format!("{} is not a fit run", r.run.display())));
    };
    let raw = io::read_raw_dataset(&r.data)?;
    let n = raw.n();
    let data = raw.into_dataset(fit.standardise)?;
    let adj = io::read_adjacency(&r.adjacency, Some(n))?;
    let samples = io::read_samples(&r.run, fit.model, fit.sampler.n_chains, adj.n_edges())?;
    let summary = summarise(&samples, &data, &adj, r.permutations, r.seed)?;
    let mut outputs = Vec::new();
    let path = r.out.join("summary.json");
    io::write_json(&path, &summary)?;
    outputs.push(path);
    if fit.model == ModelKind::Lcar {
        outputs.push(write_edges_removed(&r.out, &samples)?);
    }
    let path = r.out.join("traces.csv");
    let rows = samples.chains.iter().enumerate().flat_map(|(c, ch)| {
        (0..ch.len()).map(move |i| {
            let mut row = vec![(c + 1).to_string(), (i + 1).to_string(), ch.deviance[i].to_string(), ch.tau2[i].to_string()];
            row.push(ch.candidate_j[i].to_string());
            row.extend(ch.beta[i].iter().map(|v| v.to_string()));
            row
        })
    });
    let p = data.n_coef();
    let mut header = vec!["chain".to_string(), "iter".into(), "deviance".into(), "tau2".into(), "j".into()];
    header.extend((0..p).map(|i| format!("beta{i}")));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    io::write_rows(&path, &header_refs, rows)?;
    outputs.push(path);
    Ok(outputs)
}
