//! Simulated areal data: Matérn Gaussian fields, a piecewise-constant mean
//! template, Poisson counts, perturbed prior periods, and batch scenario
//! runs scoring the three models by RMSE.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::diagnostics::{posterior_fitted, rmse_report, rmse_report_grouped, RmseReport, DEFAULT_BOOTSTRAP};
use crate::elicitation::{elicit_sequence, ElicitationOptions, PeriodCounts, PriorData};
use crate::error::{Error, Result};
use crate::graph::{AdjacencyStructure, CandidateSequence};
use crate::model::{Dataset, ModelKind};
use crate::precision::precompute_logdets;
use crate::rng::substream;
use crate::sampler::{run_chains, SamplerConfig};
use crate::stats::{median, quantile};

pub type Point = (f64, f64);

/// Modified Bessel function of the second kind, `K_ν(x)`, from
/// `∫₀^∞ exp(−x cosh t) cosh(νt) dt` by the trapezoid rule.
fn bessel_k(nu: f64, x: f64) -> f64 {
    let h = 0.02f64;
    let mut sum = 0.5 * (-x).exp();
    let mut t = h;
    loop {
        let term = (-x * t.cosh() + nu * t).exp() * 0.5 * (1.0 + (-2.0 * nu * t).exp());
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
        t += h;
    }
    sum * h
}

/// Matérn correlation `2^{1−ν}/Γ(ν) (d/ρ)^ν K_ν(d/ρ)`. Half-integer
/// smoothness uses the closed form.
pub fn matern_correlation(d: f64, smoothness: f64, range: f64) -> f64 {
    if d <= 0.0 {
        return 1.0;
    }
    let x = d / range;
    let p = smoothness - 0.5;
    if p >= 0.0 && p.fract() == 0.0 && p <= 20.0 {
        let p = p as u32;
        let ln_fact = |k: u32| ln_gamma(k as f64 + 1.0);
        let poly: f64 = (0..=p)
            .map(|i| {
                let c = ln_fact(p) - ln_fact(2 * p) + ln_fact(p + i) - ln_fact(i) - ln_fact(p - i);
                c.exp() * (2.0 * x).powi((p - i) as i32)
            })
            .sum();
        return (-x).exp() * poly;
    }
    if x > 700.0 {
        return 0.0;
    }
    let log_c = (1.0 - smoothness) * 2f64.ln() - ln_gamma(smoothness) + smoothness * x.ln();
    log_c.exp() * bessel_k(smoothness, x)
}

fn distance(a: Point, b: Point) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Centroids of a `rows × cols` lattice of square cells tiling the unit
/// square, in row-major order.
pub fn lattice_centroids(rows: usize, cols: usize) -> Vec<Point> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(((c as f64 + 0.5) / cols as f64, (r as f64 + 0.5) / rows as f64));
        }
    }
    out
}

pub fn matern_covariance(centroids: &[Point], smoothness: f64, range: f64) -> DMatrix<f64> {
    let n = centroids.len();
    DMatrix::from_fn(n, n, |a, b| matern_correlation(distance(centroids[a], centroids[b]), smoothness, range))
}

/// Cholesky factor of a unit-variance Matérn covariance, reused for every
/// draw on the same geometry.
#[derive(Debug, Clone)]
pub struct MaternField {
    lower: DMatrix<f64>,
    pub smoothness: f64,
    pub range: f64,
    pub jitter: f64,
}

impl MaternField {
    pub fn new(centroids: &[Point], smoothness: f64, range: f64) -> Result<Self> {
        if !(range > 0.0) || !(smoothness > 0.0) {
            return Err(Error::Invalid("Matérn range and smoothness must be positive".into()));
        }
        let cov = matern_covariance(centroids, smoothness, range);
        let n = centroids.len();
        let mut last = 0.0;
        for jitter in [0.0, 1e-14, 1e-13, 1e-12, 1e-11, 1e-10] {
            last = jitter;
            let m = &cov + DMatrix::<f64>::identity(n, n) * jitter;
            if let Some(ch) = m.cholesky() {
                return Ok(Self {
                    lower: ch.l(),
                    smoothness,
                    range,
                    jitter,
                });
            }
        }
        Err(Error::SingularCovariance { jitter: last })
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.dim();
        let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        (&self.lower * z).iter().copied().collect()
    }
}

/// Zero-mean, unit-variance Matérn Gaussian draw.
pub fn matern_field<R: Rng + ?Sized>(centroids: &[Point], smoothness: f64, range: f64, rng: &mut R) -> Result<Vec<f64>> {
    Ok(MaternField::new(centroids, smoothness, range)?.sample(rng))
}

fn median_pair_correlation(dists: &[f64], smoothness: f64, range: f64) -> f64 {
    let corr: Vec<f64> = dists.iter().map(|&d| matern_correlation(d, smoothness, range)).collect();
    median(&corr)
}

/// Range `ρ` at which the median Matérn correlation over all centroid pairs
/// equals `target`, by bisection on `ln ρ`.
pub fn calibrate_range(centroids: &[Point], smoothness: f64, target: f64) -> Result<f64> {
    if centroids.len() < 2 || !(target > 0.0 && target < 1.0) {
        return Err(Error::NoBracket { target });
    }
    let mut dists = Vec::new();
    for a in 0..centroids.len() {
        for b in a + 1..centroids.len() {
            dists.push(distance(centroids[a], centroids[b]));
        }
    }
    if dists.iter().any(|&d| d <= 0.0) {
        return Err(Error::NoBracket { target });
    }
    let f = |log_r: f64| median_pair_correlation(&dists, smoothness, log_r.exp()) - target;
    let dmax = dists.iter().fold(0.0f64, |a, &d| a.max(d));
    let dmin = dists.iter().fold(f64::INFINITY, |a, &d| a.min(d));
    let (mut lo, mut hi) = ((dmin * 1e-3).ln(), (dmax * 1e3).ln());
    if f(lo) > 0.0 || f(hi) < 0.0 {
        return Err(Error::NoBracket { target });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let v = f(mid);
        if v.abs() < 1e-9 {
            return Ok(mid.exp());
        }
        if v < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let r = (0.5 * (lo + hi)).exp();
    if f(r.ln()).abs() < 1e-6 {
        Ok(r)
    } else {
        Err(Error::NonConvergence { iterations: 200 })
    }
}

/// Piecewise-constant mean labels in `{−1, 0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeanTemplate {
    labels: Vec<i8>,
}

impl MeanTemplate {
    pub fn new(labels: Vec<i8>) -> Result<Self> {
        if let Some(k) = labels.iter().position(|l| !(-1..=1).contains(l)) {
            return Err(Error::Invalid(format!("template label {} at unit {}", labels[k], k + 1)));
        }
        Ok(Self { labels })
    }

    /// Three vertical bands of columns labelled −1, 0, 1 from left to right.
    pub fn three_band(rows: usize, cols: usize) -> Self {
        let b1 = (cols as f64 / 3.0).round() as usize;
        let b2 = (2.0 * cols as f64 / 3.0).round() as usize;
        let labels = (0..rows * cols)
            .map(|k| {
                let c = k % cols;
                if c < b1 {
                    -1
                } else if c < b2 {
                    0
                } else {
                    1
                }
            })
            .collect();
        Self { labels }
    }

    /// All-zero template.
    pub fn flat(n: usize) -> Self {
        Self { labels: vec![0; n] }
    }

    pub fn labels(&self) -> &[i8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimScenario {
    pub m: f64,
    pub e_range: (f64, f64),
    pub beta_true: f64,
    pub matern_smoothness: f64,
    pub target_median_corr: f64,
    pub r_prior: usize,
    pub prior_noise: f64,
    pub n_replicates: usize,
    pub seed: u64,
}

impl Default for SimScenario {
    fn default() -> Self {
        Self {
            m: 1.0,
            e_range: (50.0, 100.0),
            beta_true: 0.1,
            matern_smoothness: 2.5,
            target_median_corr: 0.5,
            r_prior: 3,
            prior_noise: 0.1,
            n_replicates: 500,
            seed: 1,
        }
    }
}

impl SimScenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.m >= 0.0) {
            return Err(Error::Invalid("M must be non-negative".into()));
        }
        let (lo, hi) = self.e_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Invalid("expected-count range must be positive".into()));
        }
        if !(self.target_median_corr > 0.0 && self.target_median_corr < 1.0) {
            return Err(Error::Invalid("target median correlation must lie in (0, 1)".into()));
        }
        if self.r_prior == 0 {
            return Err(Error::EmptyPriorData);
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!("M={},E={}-{}", self.m, self.e_range.0, self.e_range.1)
    }

    /// The nine combinations of `M ∈ {0.5, 1, 1.5}` and the three expected
    /// count ranges.
    pub fn grid(n_replicates: usize, seed: u64) -> Vec<SimScenario> {
        let mut out = Vec::new();
        for (i, e_range) in [(10.0, 25.0), (50.0, 100.0), (150.0, 250.0)].into_iter().enumerate() {
            for (k, m) in [0.5, 1.0, 1.5].into_iter().enumerate() {
                out.push(SimScenario {
                    m,
                    e_range,
                    n_replicates,
                    seed: seed.wrapping_add((3 * i + k) as u64),
                    ..Default::default()
                });
            }
        }
        out
    }
}

impl fmt::Display for SimScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for SimScenario {
    type Err = Error;

    /// Parses `M=1,E=50-100`; other fields take their defaults.
    fn from_str(s: &str) -> Result<Self> {
        let mut out = SimScenario::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("expected key=value in {part:?}")))?;
            let num = |v: &str| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Invalid(format!("bad number {v:?} in scenario")))
            };
            match key.trim() {
                "M" | "m" => out.m = num(value)?,
                "E" | "e" => {
                    let (lo, hi) = value
                        .split_once('-')
                        .ok_or_else(|| Error::Invalid(format!("expected E=lo-hi, got {value:?}")))?;
                    out.e_range = (num(lo)?, num(hi)?);
                }
                "beta" => out.beta_true = num(value)?,
                other => return Err(Error::Invalid(format!("unknown scenario key {other:?}"))),
            }
        }
        out.validate()?;
        Ok(out)
    }
}

/// Geometry shared by every replicate of a study.
#[derive(Debug, Clone)]
pub struct SimGeometry {
    pub centroids: Vec<Point>,
    pub adjacency: Arc<AdjacencyStructure>,
    pub template: MeanTemplate,
}

impl SimGeometry {
    /// Square lattice with rook adjacency and the three-band template.
    pub fn lattice(side: usize) -> Result<Self> {
        Ok(Self {
            centroids: lattice_centroids(side, side),
            adjacency: Arc::new(AdjacencyStructure::lattice(side, side)?),
            template: MeanTemplate::three_band(side, side),
        })
    }

    pub fn new(centroids: Vec<Point>, adjacency: Arc<AdjacencyStructure>, template: MeanTemplate) -> Result<Self> {
        let n = adjacency.n();
        for got in [centroids.len(), template.len()] {
            if got != n {
                return Err(Error::InconsistentUnits(format!("geometry has {n} units, got {got}")));
            }
        }
        Ok(Self {
            centroids,
            adjacency,
            template,
        })
    }

    pub fn n(&self) -> usize {
        self.centroids.len()
    }

    /// Matérn field with the range calibrated for `scenario`.
    pub fn field(&self, scenario: &SimScenario) -> Result<MaternField> {
        let range = calibrate_range(&self.centroids, scenario.matern_smoothness, scenario.target_median_corr)?;
        MaternField::new(&self.centroids, scenario.matern_smoothness, range)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub beta: f64,
    pub covariate: Vec<f64>,
    pub residual: Vec<f64>,
    pub log_risk: Vec<f64>,
    pub fitted: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SimReplicate {
    pub data: Dataset,
    pub prior: Vec<PeriodCounts>,
    pub truth: Truth,
}

fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as u64).unwrap_or(0)
}

/// One replicate: fresh covariate and residual fields, study counts and
/// `r_prior` perturbed prior periods.
pub fn generate_replicate<R: Rng + ?Sized>(
    scenario: &SimScenario,
    geometry: &SimGeometry,
    field: &MaternField,
    rng: &mut R,
) -> Result<SimReplicate> {
    scenario.validate()?;
    let n = geometry.n();
    if field.dim() != n {
        return Err(Error::DimensionMismatch { expected: n, got: field.dim() });
    }
    let covariate = field.sample(rng);
    let noise = field.sample(rng);
    let residual: Vec<f64> = (0..n)
        .map(|k| scenario.m * geometry.template.labels()[k] as f64 + noise[k])
        .collect();
    let log_risk: Vec<f64> = (0..n).map(|k| scenario.beta_true * covariate[k] + residual[k]).collect();
    let (lo, hi) = scenario.e_range;
    let e: Vec<f64> = (0..n).map(|_| if hi > lo { rng.random_range(lo..hi) } else { lo }).collect();
    let fitted: Vec<f64> = (0..n).map(|k| e[k] * log_risk[k].exp()).collect();
    let y: Vec<u64> = fitted.iter().map(|&mu| poisson(mu, rng)).collect();
    let prior = (0..scenario.r_prior)
        .map(|_| {
            let observed = (0..n)
                .map(|k| {
                    let perturbed = residual[k] + rng.random_range(-scenario.prior_noise..=scenario.prior_noise);
                    poisson(e[k] * (scenario.beta_true * covariate[k] + perturbed).exp(), rng)
                })
                .collect();
            PeriodCounts {
                observed,
                expected: e.clone(),
            }
        })
        .collect();
    let data = Dataset::from_covariates(y, e, &[("x".to_string(), covariate.clone())], false)?;
    Ok(SimReplicate {
        data,
        prior,
        truth: Truth {
            beta: scenario.beta_true,
            covariate,
            residual,
            log_risk,
            fitted,
        },
    })
}

/// Elicits the candidate sequence for a replicate and caches its
/// log-determinants at `epsilon`.
pub fn replicate_sequence(
    rep: &SimReplicate,
    geometry: &SimGeometry,
    epsilon: f64,
    options: ElicitationOptions,
) -> Result<CandidateSequence> {
    let prior = PriorData::from_counts(&rep.prior, rep.data.x().clone())?;
    let (mut seq, _) = elicit_sequence(geometry.adjacency.clone(), &prior, epsilon, options)?;
    precompute_logdets(&mut seq, epsilon)?;
    Ok(seq)
}

/// Posterior summaries of one model on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEstimate {
    pub model: ModelKind,
    pub beta_median: f64,
    pub beta_lower: f64,
    pub beta_upper: f64,
    pub fitted: Vec<f64>,
    pub mean_edges_removed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub index: usize,
    pub truth_fitted: Vec<f64>,
    pub estimates: Vec<ModelEstimate>,
}

/// Settings for a batch of simulation scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub sampler: SamplerConfig,
    pub elicitation: ElicitationOptions,
    pub models: Vec<ModelKind>,
    pub n_boot: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig {
                n_chains: 1,
                burn_in: 5000,
                keep: 5000,
                ..Default::default()
            },
            elicitation: ElicitationOptions::default(),
            models: ModelKind::ALL.to_vec(),
            n_boot: DEFAULT_BOOTSTRAP,
        }
    }
}

/// Fits every configured model to replicate `index` of `scenario`.
pub fn run_replicate(
    scenario: &SimScenario,
    geometry: &SimGeometry,
    field: &MaternField,
    config: &StudyConfig,
    index: usize,
) -> Result<ReplicateResult> {
    let mut rng = substream(scenario.seed, "replicate", index as u64);
    let rep = generate_replicate(scenario, geometry, field, &mut rng)?;
    let sampler = SamplerConfig {
        seed: rng.random(),
        ..config.sampler.clone()
    };
    let seq = if config.models.contains(&ModelKind::Lcar) {
        Some(replicate_sequence(&rep, geometry, sampler.epsilon, config.elicitation)?)
    } else {
        None
    };
    let estimates = config
        .models
        .iter()
        .map(|&model| {
            let samples = run_chains(&rep.data, &geometry.adjacency, seq.as_ref(), model, &sampler)?;
            let beta = samples.beta_draws(1);
            let mean_edges_removed = (model == ModelKind::Lcar).then(|| {
                let removed: Vec<f64> = (0..samples.chains.len())
                    .flat_map(|c| samples.edges_removed(c))
                    .map(|r| r as f64)
                    .collect();
                crate::stats::mean(&removed)
            });
            Ok(ModelEstimate {
                model,
                beta_median: median(&beta),
                beta_lower: quantile(&beta, 0.025),
                beta_upper: quantile(&beta, 0.975),
                fitted: posterior_fitted(&samples, &rep.data)?,
                mean_edges_removed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReplicateResult {
        index,
        truth_fitted: rep.truth.fitted,
        estimates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRmse {
    pub model: ModelKind,
    pub beta: RmseReport,
    pub fitted: RmseReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: SimScenario,
    pub matern_range: f64,
    pub replicates: Vec<ReplicateResult>,
    pub rmse: Vec<ModelRmse>,
}

impl ScenarioResult {
    pub fn rmse_for(&self, model: ModelKind) -> Option<&ModelRmse> {
        self.rmse.iter().find(|r| r.model == model)
    }
}

/// RMSE of the β posterior medians and of the posterior-mean fitted values
/// across replicates, with bootstrap intervals.
pub fn score_replicates(
    scenario: &SimScenario,
    replicates: &[ReplicateResult],
    models: &[ModelKind],
    n_boot: usize,
) -> Result<Vec<ModelRmse>> {
    models
        .iter()
        .enumerate()
        .map(|(i, &model)| {
            let mut beta = Vec::new();
            let mut fitted = Vec::new();
            for rep in replicates {
                let est = rep
                    .estimates
                    .iter()
                    .find(|e| e.model == model)
                    .ok_or_else(|| Error::Invalid(format!("replicate {} lacks model {model}", rep.index)))?;
                beta.push(est.beta_median);
                fitted.push(est.fitted.clone());
            }
            let truth_beta = vec![scenario.beta_true; beta.len()];
            let truth_fitted: Vec<Vec<f64>> = replicates.iter().map(|r| r.truth_fitted.clone()).collect();
            let seed = scenario.seed.wrapping_mul(31).wrapping_add(i as u64);
            Ok(ModelRmse {
                model,
                beta: rmse_report(&truth_beta, &beta, n_boot, seed)?,
                fitted: rmse_report_grouped(&truth_fitted, &fitted, n_boot, seed ^ 0x5eed)?,
            })
        })
        .collect()
}

/// Runs all replicates of one scenario in parallel and scores them.
pub fn run_scenario(scenario: &SimScenario, geometry: &SimGeometry, config: &StudyConfig) -> Result<ScenarioResult> {
    scenario.validate()?;
    let field = geometry.field(scenario)?;
    let replicates = (0..scenario.n_replicates)
        .into_par_iter()
        .map(|i| run_replicate(scenario, geometry, &field, config, i))
        .collect::<Result<Vec<_>>>()?;
    let rmse = score_replicates(scenario, &replicates, &config.models, config.n_boot)?;
    Ok(ScenarioResult {
        scenario: scenario.clone(),
        matern_range: field.range,
        replicates,
        rmse,
    })
}

pub fn run_scenarios(scenarios: &[SimScenario], geometry: &SimGeometry, config: &StudyConfig) -> Result<Vec<ScenarioResult>> {
    scenarios.iter().map(|s| run_scenario(s, geometry, config)).collect()
}
