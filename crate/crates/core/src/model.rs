//! Poisson log-linear likelihood and the LCAR, IAR and BYM random-effect
//! priors.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::graph::{AdjacencyStructure, CandidateSequence};

/// Mean and standard deviation used to standardise one covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardisation {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

/// Observed counts, expected counts and a design matrix with a leading
/// intercept column.
#[derive(Debug, Clone)]
pub struct Dataset {
    y: Vec<u64>,
    e: Vec<f64>,
    x: DMatrix<f64>,
    ln_y_fact: Vec<f64>,
    standardisation: Vec<Standardisation>,
}

impl Dataset {
    /// `x` must already contain the intercept column.
    pub fn new(y: Vec<u64>, e: Vec<f64>, x: DMatrix<f64>) -> Result<Self> {
        let n = y.len();
        for got in [e.len(), x.nrows()] {
            if got != n {
                return Err(Error::DimensionMismatch { expected: n, got });
            }
        }
        for (k, &ek) in e.iter().enumerate() {
            if !(ek > 0.0) || !ek.is_finite() {
                return Err(Error::NonPositiveExpected { unit: k + 1, value: ek });
            }
        }
        if x.ncols() == 0 || x.column(0).iter().any(|&v| v != 1.0) {
            return Err(Error::Invalid("first design column must be the intercept".into()));
        }
        let svd = x.clone().svd(false, false);
        let tol = svd.singular_values.max() * f64::EPSILON * n.max(x.ncols()) as f64;
        if x.ncols() > n || svd.singular_values.iter().any(|&s| s <= tol) {
            return Err(Error::SingularDesign);
        }
        let ln_y_fact = y.iter().map(|&v| ln_gamma(v as f64 + 1.0)).collect();
        Ok(Self {
            y,
            e,
            x,
            ln_y_fact,
            standardisation: Vec::new(),
        })
    }

    /// Builds the design from raw covariate columns, optionally standardising
    /// each to mean zero and unit sample standard deviation.
    pub fn from_covariates(
        y: Vec<u64>,
        e: Vec<f64>,
        covariates: &[(String, Vec<f64>)],
        standardise: bool,
    ) -> Result<Self> {
        let n = y.len();
        let mut standardisation = Vec::new();
        let mut columns = vec![vec![1.0; n]];
        for (name, col) in covariates {
            if col.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: col.len() });
            }
            if standardise {
                let mean = crate::stats::mean(col);
                let sd = crate::stats::variance(col).sqrt();
                if !(sd > 0.0) {
                    return Err(Error::Invalid(format!("covariate {name} is constant")));
                }
                columns.push(col.iter().map(|v| (v - mean) / sd).collect());
                standardisation.push(Standardisation { name: name.clone(), mean, sd });
            } else {
                columns.push(col.clone());
                standardisation.push(Standardisation { name: name.clone(), mean: 0.0, sd: 1.0 });
            }
        }
        let x = DMatrix::from_fn(n, columns.len(), |k, c| columns[c][k]);
        let mut data = Self::new(y, e, x)?;
        data.standardisation = standardisation;
        Ok(data)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Number of regression coefficients including the intercept.
    pub fn n_coef(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &[u64] {
        &self.y
    }

    pub fn e(&self) -> &[f64] {
        &self.e
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn ln_y_fact(&self, k: usize) -> f64 {
        self.ln_y_fact[k]
    }

    pub fn standardisation(&self) -> &[Standardisation] {
        &self.standardisation
    }

    /// `Xβ`.
    pub fn linear_predictor(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.n())
            .map(|k| (0..self.n_coef()).map(|c| self.x[(k, c)] * beta[c]).sum())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Lcar,
    Iar,
    Bym,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Iar, ModelKind::Bym, ModelKind::Lcar];
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Lcar => "lcar",
            ModelKind::Iar => "iar",
            ModelKind::Bym => "bym",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lcar" => Ok(ModelKind::Lcar),
            "iar" => Ok(ModelKind::Iar),
            "bym" => Ok(ModelKind::Bym),
            other => Err(Error::Invalid(format!("unknown model {other:?}"))),
        }
    }
}

/// One MCMC state. `phi_star` and `candidate_j` are used by LCAR only;
/// `theta` and `sigma2` by BYM only (`theta` is empty otherwise).
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub beta: Vec<f64>,
    pub tau2: f64,
    pub phi: Vec<f64>,
    pub phi_star: f64,
    pub candidate_j: usize,
    pub theta: Vec<f64>,
    pub sigma2: f64,
}

impl ChainState {
    pub fn eta(&self, data: &Dataset) -> Vec<f64> {
        let mut eta = data.linear_predictor(&self.beta);
        for (k, v) in eta.iter_mut().enumerate() {
            *v += self.phi[k] + self.theta.get(k).copied().unwrap_or(0.0);
        }
        eta
    }

    /// `R_k = exp(x_kᵀβ + φ_k (+ θ_k))`.
    pub fn relative_risk(&self, data: &Dataset) -> Vec<f64> {
        self.eta(data).into_iter().map(f64::exp).collect()
    }

    /// Fitted counts `E_k R_k`.
    pub fn fitted(&self, data: &Dataset) -> Vec<f64> {
        self.relative_risk(data)
            .into_iter()
            .zip(data.e())
            .map(|(r, e)| r * e)
            .collect()
    }
}

#[inline]
pub fn poisson_log_pmf(y: u64, mu: f64, ln_y_fact: f64) -> f64 {
    if y == 0 {
        -mu
    } else {
        y as f64 * mu.ln() - mu - ln_y_fact
    }
}

/// `Σₖ [Yₖ(ln Eₖ + ηₖ) − Eₖ e^{ηₖ} − ln Yₖ!]`.
pub fn log_poisson_lik(data: &Dataset, state: &ChainState) -> Result<f64> {
    let n = data.n();
    for got in [state.phi.len()] {
        if got != n {
            return Err(Error::DimensionMismatch { expected: n, got });
        }
    }
    if !state.theta.is_empty() && state.theta.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: state.theta.len() });
    }
    if state.beta.len() != data.n_coef() {
        return Err(Error::DimensionMismatch { expected: data.n_coef(), got: state.beta.len() });
    }
    let eta = state.eta(data);
    Ok((0..n)
        .map(|k| {
            let y = data.y[k] as f64;
            y * (data.e[k].ln() + eta[k]) - data.e[k] * eta[k].exp() - data.ln_y_fact[k]
        })
        .sum())
}

/// `−2 × log-likelihood`.
pub fn deviance(data: &Dataset, state: &ChainState) -> Result<f64> {
    Ok(-2.0 * log_poisson_lik(data, state)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Node {
    Unit(usize),
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conditional {
    pub mean: f64,
    pub variance: f64,
}

/// Full conditional of one extended random effect under candidate
/// `state.candidate_j`.
pub fn lcar_phi_full_conditional(
    node: Node,
    state: &ChainState,
    seq: &CandidateSequence,
    epsilon: f64,
) -> Result<Conditional> {
    let j = state.candidate_j;
    if j > seq.n_edges() {
        return Err(Error::IndexOutOfRange { index: j, n: seq.n_edges() });
    }
    let adj = seq.base();
    let (sum, weight) = match node {
        Node::Unit(k) => {
            if k >= adj.n() {
                return Err(Error::IndexOutOfRange { index: k + 1, n: adj.n() });
            }
            let mut sum = 0.0;
            let mut weight = 0.0;
            for &(v, e) in adj.incident(k) {
                if seq.is_active(e, j) {
                    sum += state.phi[v];
                    weight += 1.0;
                }
            }
            if seq.global_link(k, j) {
                sum += state.phi_star;
                weight += 1.0;
            }
            (sum, weight)
        }
        Node::Global => {
            let mut sum = 0.0;
            let mut weight = 0.0;
            for k in 0..adj.n() {
                if seq.global_link(k, j) {
                    sum += state.phi[k];
                    weight += 1.0;
                }
            }
            (sum, weight)
        }
    };
    let denom = weight + epsilon;
    Ok(Conditional {
        mean: sum / denom,
        variance: state.tau2 / denom,
    })
}

/// `ũᵀ Q(W̃⁽ʲ⁾, ε) ṽ` evaluated through the Laplacian edge sum.
pub fn lcar_bilinear(
    u: (&[f64], f64),
    v: (&[f64], f64),
    seq: &CandidateSequence,
    j: usize,
    epsilon: f64,
) -> f64 {
    let adj = seq.base();
    let mut total = 0.0;
    for (e, &(a, b)) in adj.edges().iter().enumerate() {
        if seq.is_active(e, j) {
            total += (u.0[a] - u.0[b]) * (v.0[a] - v.0[b]);
        }
    }
    for k in 0..adj.n() {
        if seq.global_link(k, j) {
            total += (u.0[k] - u.1) * (v.0[k] - v.1);
        }
        total += epsilon * u.0[k] * v.0[k];
    }
    total + epsilon * u.1 * v.1
}

/// `φ̃ᵀ Q(W̃⁽ʲ⁾, ε) φ̃`.
pub fn lcar_quad_form(phi: &[f64], phi_star: f64, seq: &CandidateSequence, j: usize, epsilon: f64) -> f64 {
    lcar_bilinear((phi, phi_star), (phi, phi_star), seq, j, epsilon)
}

/// `ln N(φ̃; 0, τ²Q(W̃⁽ʲ⁾, ε)⁻¹)` using the cached log-determinant.
pub fn lcar_joint_logprior(state: &ChainState, seq: &CandidateSequence, epsilon: f64) -> Result<f64> {
    let j = state.candidate_j;
    let logdet = seq.cached_logdet(j, epsilon)?;
    let dim = (seq.base().n() + 1) as f64;
    let quad = lcar_quad_form(&state.phi, state.phi_star, seq, j, epsilon);
    Ok(0.5 * logdet - 0.5 * dim * (2.0 * PI * state.tau2).ln() - quad / (2.0 * state.tau2))
}

/// IAR full conditional. Units without neighbours are given an independent
/// `N(0, τ²)` effect.
pub fn iar_conditional(k: usize, phi: &[f64], adj: &AdjacencyStructure, tau2: f64) -> Conditional {
    let deg = adj.degree(k);
    if deg == 0 {
        return Conditional { mean: 0.0, variance: tau2 };
    }
    let sum: f64 = adj.incident(k).iter().map(|&(v, _)| phi[v]).sum();
    Conditional {
        mean: sum / deg as f64,
        variance: tau2 / deg as f64,
    }
}

/// `uᵀ (diag(W1) − W) v`, with a unit diagonal for isolated units.
pub fn iar_bilinear(u: &[f64], v: &[f64], adj: &AdjacencyStructure) -> f64 {
    let mut total: f64 = adj
        .edges()
        .iter()
        .map(|&(a, b)| (u[a] - u[b]) * (v[a] - v[b]))
        .sum();
    for k in 0..adj.n() {
        if adj.degree(k) == 0 {
            total += u[k] * v[k];
        }
    }
    total
}

pub fn iar_quad_form(phi: &[f64], adj: &AdjacencyStructure) -> f64 {
    iar_bilinear(phi, phi, adj)
}

/// Rank of the IAR precision: one kernel direction per connected component
/// with at least two units.
pub fn iar_rank(adj: &AdjacencyStructure) -> usize {
    let (labels, count) = adj.components();
    let mut sizes = vec![0usize; count];
    for l in labels {
        sizes[l] += 1;
    }
    adj.n() - sizes.iter().filter(|&&s| s >= 2).count()
}

/// Improper IAR log-density; invariant to shifting `φ` by a constant on any
/// connected component.
pub fn iar_logprior(state: &ChainState, adj: &AdjacencyStructure) -> f64 {
    let rank = iar_rank(adj) as f64;
    -0.5 * rank * (2.0 * PI * state.tau2).ln() - iar_quad_form(&state.phi, adj) / (2.0 * state.tau2)
}

/// IAR prior on `φ` plus independent `N(0, σ²)` effects `θ`.
pub fn bym_logprior(state: &ChainState, adj: &AdjacencyStructure) -> f64 {
    let s2 = state.sigma2;
    let indep: f64 = state
        .theta
        .iter()
        .map(|t| -0.5 * (2.0 * PI * s2).ln() - t * t / (2.0 * s2))
        .sum();
    iar_logprior(state, adj) + indep
}

/// Partial correlation of `(φ_k, φ_j)` under the IAR prior.
pub fn iar_partial_correlation(adj: &AdjacencyStructure, k: usize, j: usize) -> f64 {
    let w = if adj.edge_index(k, j).is_some() { 1.0 } else { 0.0 };
    w / ((adj.degree(k) * adj.degree(j)) as f64).sqrt()
}

/// Covariate-only Poisson GLM fit.
#[derive(Debug, Clone)]
pub struct GlmFit {
    pub beta: Vec<f64>,
    pub fitted: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub iterations: usize,
}

/// Poisson log-linear GLM with offset `ln E` by iteratively reweighted least
/// squares.
pub fn fit_poisson_glm(data: &Dataset) -> Result<GlmFit> {
    const MAX_ITER: usize = 100;
    let n = data.n();
    let p = data.n_coef();
    let x = data.x();
    let total_y: f64 = data.y.iter().map(|&v| v as f64).sum();
    let total_e: f64 = data.e.iter().sum();
    let mut beta = DVector::zeros(p);
    beta[0] = ((total_y + 0.5) / total_e).ln();
    let mut prev_dev = f64::INFINITY;
    for iter in 1..=MAX_ITER {
        let eta = x * &beta;
        let mu: Vec<f64> = (0..n).map(|k| data.e[k] * eta[k].exp()).collect();
        let mut xtwx = DMatrix::<f64>::zeros(p, p);
        let mut xtwz = DVector::<f64>::zeros(p);
        for k in 0..n {
            let w = mu[k];
            let z = eta[k] + (data.y[k] as f64 - mu[k]) / mu[k];
            for a in 0..p {
                xtwz[a] += x[(k, a)] * w * z;
                for b in 0..p {
                    xtwx[(a, b)] += x[(k, a)] * w * x[(k, b)];
                }
            }
        }
        let chol = xtwx.clone().cholesky().ok_or(Error::SingularDesign)?;
        beta = chol.solve(&xtwz);
        let eta = x * &beta;
        let dev: f64 = (0..n)
            .map(|k| {
                let y = data.y[k] as f64;
                let m = data.e[k] * eta[k].exp();
                if y > 0.0 {
                    2.0 * (y * (y / m).ln() - (y - m))
                } else {
                    2.0 * m
                }
            })
            .sum();
        if !dev.is_finite() {
            break;
        }
        if (prev_dev - dev).abs() <= 1e-10 * (dev.abs() + 0.1) {
            let fitted = (0..n).map(|k| data.e[k] * eta[k].exp()).collect::<Vec<_>>();
            let mut info = DMatrix::<f64>::zeros(p, p);
            for k in 0..n {
                for a in 0..p {
                    for b in 0..p {
                        info[(a, b)] += x[(k, a)] * fitted[k] * x[(k, b)];
                    }
                }
            }
            let covariance = info.try_inverse().ok_or(Error::SingularDesign)?;
            return Ok(GlmFit {
                beta: beta.iter().copied().collect(),
                fitted,
                covariance,
                iterations: iter,
            });
        }
        prev_dev = dev;
    }
    Err(Error::NonConvergence { iterations: MAX_ITER })
}
