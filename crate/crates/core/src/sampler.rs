//! Multi-chain MCMC for the LCAR, IAR and BYM models.
//!
//! One sweep updates, in order: the β block, the η-preserving shift moves,
//! the random effects φ (and φ* or θ), the variances, and finally the
//! candidate index `j` of the LCAR neighbourhood matrix.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use crate::error::{Error, Result};
use crate::graph::{AdjacencyStructure, CandidateSequence};
use crate::model::{
    fit_poisson_glm, iar_bilinear, iar_conditional, iar_quad_form, iar_rank, lcar_bilinear,
    lcar_joint_logprior, lcar_phi_full_conditional, lcar_quad_form, log_poisson_lik, ChainState,
    Dataset, ModelKind, Node,
};
use crate::rng::{substream, StreamRng};

/// Smallest rate used in the variance full conditionals.
pub const RATE_FLOOR: f64 = 1e-12;

const ADAPT_EXPONENT: f64 = 0.6;
const BETA_REFRESH_INTERVAL: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSettings {
    /// Variance of the independent Gaussian priors on β.
    pub beta_variance: f64,
    /// Upper end of the uniform prior on τ².
    pub tau2_max: f64,
    /// Upper end of the uniform prior on σ² (BYM).
    pub sigma2_max: f64,
}

impl Default for PriorSettings {
    fn default() -> Self {
        Self {
            beta_variance: 1000.0,
            tau2_max: 1000.0,
            sigma2_max: 1000.0,
        }
    }
}

/// Robbins-Monro scaling of the random-walk step sizes during burn-in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationSettings {
    pub enabled: bool,
    pub target_single: f64,
    pub target_block: f64,
}

impl Default for AdaptationSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            target_single: 0.44,
            target_block: 0.35,
        }
    }
}

/// Blocks held at their initial values. Used by validation runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrozenBlocks {
    pub beta: bool,
    pub phi: bool,
    pub tau2: bool,
    pub candidate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n_chains: usize,
    pub burn_in: usize,
    /// Post-burn-in iterations; every `thin`-th is stored.
    pub keep: usize,
    pub thin: usize,
    /// Half-width of the candidate proposal window.
    pub q: usize,
    pub epsilon: f64,
    pub adaptation: AdaptationSettings,
    pub priors: PriorSettings,
    /// Master seed; chain `c` uses the substream `("chain", c)`.
    pub seed: u64,
    /// When false the likelihood is dropped and the sampler targets the prior.
    pub use_likelihood: bool,
    pub frozen: FrozenBlocks,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_chains: 3,
            burn_in: 100_000,
            keep: 50_000,
            thin: 1,
            q: 5,
            epsilon: 0.001,
            adaptation: AdaptationSettings::default(),
            priors: PriorSettings::default(),
            seed: 1,
            use_likelihood: true,
            frozen: FrozenBlocks::default(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Invalid(msg.to_string()));
        if self.n_chains == 0 {
            return bad("at least one chain is required");
        }
        if self.thin == 0 {
            return bad("thin must be at least 1");
        }
        if self.q == 0 {
            return bad("q must be at least 1");
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::NonPositiveEpsilon(self.epsilon));
        }
        let p = &self.priors;
        if !(p.beta_variance > 0.0 && p.tau2_max > 0.0 && p.sigma2_max > 0.0) {
            return bad("prior scales must be positive");
        }
        Ok(())
    }

    /// Number of stored draws per chain.
    pub fn n_draws(&self) -> usize {
        self.keep / self.thin
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockCounter {
    pub proposed: u64,
    pub accepted: u64,
}

impl BlockCounter {
    fn record(&mut self, accepted: bool) {
        self.proposed += 1;
        self.accepted += accepted as u64;
    }

    pub fn rate(&self) -> Option<f64> {
        (self.proposed > 0).then(|| self.accepted as f64 / self.proposed as f64)
    }
}

/// Post-burn-in acceptance counts per Metropolis block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceSummary {
    pub beta: BlockCounter,
    pub phi: BlockCounter,
    pub theta: BlockCounter,
    pub candidate: BlockCounter,
}

/// Stored draws of one chain. `phi` and `theta` hold one row per draw.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChainSamples {
    pub beta: Vec<Vec<f64>>,
    pub tau2: Vec<f64>,
    pub phi: Vec<Vec<f64>>,
    pub phi_star: Vec<f64>,
    pub candidate_j: Vec<usize>,
    pub theta: Vec<Vec<f64>>,
    pub sigma2: Vec<f64>,
    pub deviance: Vec<f64>,
    pub acceptance: AcceptanceSummary,
    /// Times a variance full conditional hit the rate floor.
    pub rate_floor_hits: u64,
    /// Times the β proposal covariance was reset after losing definiteness.
    pub beta_resets: u64,
}

impl ChainSamples {
    pub fn len(&self) -> usize {
        self.tau2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau2.is_empty()
    }

    pub fn beta_column(&self, c: usize) -> Vec<f64> {
        self.beta.iter().map(|b| b[c]).collect()
    }

    /// Draws of `i`-th state for use in summaries.
    pub fn state(&self, i: usize) -> ChainState {
        ChainState {
            beta: self.beta[i].clone(),
            tau2: self.tau2[i],
            phi: self.phi[i].clone(),
            phi_star: self.phi_star[i],
            candidate_j: self.candidate_j[i],
            theta: self.theta.get(i).cloned().unwrap_or_default(),
            sigma2: self.sigma2.get(i).copied().unwrap_or(f64::NAN),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub model: ModelKind,
    /// Number of edges in the full adjacency.
    pub n_edges: usize,
    pub chains: Vec<ChainSamples>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSummary {
    pub beta: Vec<f64>,
    pub tau2: f64,
    pub deviance: f64,
    pub threshold: f64,
    pub converged: bool,
}

impl PosteriorSamples {
    pub fn n_draws(&self) -> usize {
        self.chains.iter().map(ChainSamples::len).sum()
    }

    /// All draws of a scalar pooled across chains.
    pub fn pooled<F: Fn(&ChainSamples) -> Vec<f64>>(&self, f: F) -> Vec<f64> {
        self.chains.iter().flat_map(f).collect()
    }

    pub fn beta_draws(&self, c: usize) -> Vec<f64> {
        self.pooled(|ch| ch.beta_column(c))
    }

    pub fn deviance_draws(&self) -> Vec<f64> {
        self.pooled(|ch| ch.deviance.clone())
    }

    /// Edges removed, `N_W − j`, for each draw of chain `c`.
    pub fn edges_removed(&self, c: usize) -> Vec<usize> {
        self.chains[c].candidate_j.iter().map(|j| self.n_edges - j).collect()
    }

    /// Posterior mean of every stored state component.
    pub fn posterior_mean(&self) -> Result<ChainState> {
        let total = self.n_draws();
        if total == 0 {
            return Err(Error::EmptyTrace);
        }
        let first = &self.chains[0];
        let n = first.phi[0].len();
        let p = first.beta[0].len();
        let mut beta = vec![0.0; p];
        let mut phi = vec![0.0; n];
        let mut theta = vec![0.0; if first.theta.is_empty() { 0 } else { n }];
        let (mut tau2, mut phi_star, mut sigma2, mut j) = (0.0, 0.0, 0.0, 0.0);
        for ch in &self.chains {
            for i in 0..ch.len() {
                ch.beta[i].iter().zip(beta.iter_mut()).for_each(|(v, s)| *s += v);
                ch.phi[i].iter().zip(phi.iter_mut()).for_each(|(v, s)| *s += v);
                if let Some(t) = ch.theta.get(i) {
                    t.iter().zip(theta.iter_mut()).for_each(|(v, s)| *s += v);
                }
                tau2 += ch.tau2[i];
                phi_star += ch.phi_star[i];
                sigma2 += ch.sigma2.get(i).copied().unwrap_or(0.0);
                j += ch.candidate_j[i] as f64;
            }
        }
        let t = total as f64;
        let scale = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x /= t);
        scale(&mut beta);
        scale(&mut phi);
        scale(&mut theta);
        Ok(ChainState {
            beta,
            tau2: tau2 / t,
            phi,
            phi_star: phi_star / t,
            candidate_j: (j / t).round() as usize,
            theta,
            sigma2: sigma2 / t,
        })
    }

    /// Potential scale reduction across chains for β, τ² and the deviance.
    pub fn convergence(&self) -> ConvergenceSummary {
        const THRESHOLD: f64 = 1.05;
        let p = self.chains.first().and_then(|c| c.beta.first()).map_or(0, Vec::len);
        let beta: Vec<f64> = (0..p)
            .map(|c| {
                let series: Vec<Vec<f64>> = self.chains.iter().map(|ch| ch.beta_column(c)).collect();
                potential_scale_reduction(&series)
            })
            .collect();
        let tau2 = potential_scale_reduction(
            &self.chains.iter().map(|c| c.tau2.clone()).collect::<Vec<_>>(),
        );
        let deviance = potential_scale_reduction(
            &self.chains.iter().map(|c| c.deviance.clone()).collect::<Vec<_>>(),
        );
        let converged = beta.iter().chain([&tau2, &deviance]).all(|r| r.is_nan() || *r < THRESHOLD);
        ConvergenceSummary {
            beta,
            tau2,
            deviance,
            threshold: THRESHOLD,
            converged,
        }
    }
}

/// Gelman-Rubin potential scale reduction factor. NaN with fewer than two
/// chains or zero within-chain variance.
pub fn potential_scale_reduction(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if m < 2 || n < 2 {
        return f64::NAN;
    }
    let means: Vec<f64> = chains.iter().map(|c| crate::stats::mean(&c[..n])).collect();
    let w = chains.iter().map(|c| crate::stats::variance(&c[..n])).sum::<f64>() / m as f64;
    let b = n as f64 * crate::stats::variance(&means);
    if w <= 0.0 {
        return f64::NAN;
    }
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b / n as f64;
    (var_plus / w).sqrt()
}

/// Number of candidates in the proposal window around `j`, excluding `j`.
pub fn window_size(j: usize, n_edges: usize, q: usize) -> usize {
    (j + q).min(n_edges) - j.saturating_sub(q)
}

/// Draws `j′` uniformly from `{j−q, …, j+q} ∩ [0, N_W]` without `j`.
pub fn propose_candidate<R: Rng + ?Sized>(j: usize, n_edges: usize, q: usize, rng: &mut R) -> Option<usize> {
    let size = window_size(j, n_edges, q);
    if size == 0 {
        return None;
    }
    let mut proposal = j.saturating_sub(q) + rng.random_range(0..size);
    if proposal >= j {
        proposal += 1;
    }
    Some(proposal)
}

/// Metropolis-Hastings step over the candidate index with window-size
/// correction at the boundaries. Returns the new index and whether the
/// proposal was accepted.
pub fn windowed_move<R, F>(
    j: usize,
    n_edges: usize,
    q: usize,
    current_log_target: f64,
    mut log_target: F,
    rng: &mut R,
) -> (usize, bool)
where
    R: Rng + ?Sized,
    F: FnMut(usize) -> f64,
{
    let Some(proposal) = propose_candidate(j, n_edges, q, rng) else {
        return (j, false);
    };
    let correction = (window_size(j, n_edges, q) as f64).ln() - (window_size(proposal, n_edges, q) as f64).ln();
    let log_ratio = log_target(proposal) - current_log_target + correction;
    if accept(log_ratio, rng) {
        (proposal, true)
    } else {
        (j, false)
    }
}

/// One windowed move on `state.candidate_j` targeting the LCAR joint prior
/// of `φ̃` given `τ²`.
pub fn update_candidate<R: Rng + ?Sized>(
    state: &ChainState,
    seq: &CandidateSequence,
    q: usize,
    epsilon: f64,
    rng: &mut R,
) -> Result<(ChainState, bool)> {
    let current = lcar_joint_logprior(state, seq, epsilon)?;
    // Validate the cache for every reachable index up front so the closure
    // below cannot fail.
    seq.cached_logdet(seq.n_edges(), epsilon)?;
    let mut trial = state.clone();
    let (j, accepted) = windowed_move(state.candidate_j, seq.n_edges(), q, current, |jp| {
        trial.candidate_j = jp;
        lcar_joint_logprior(&trial, seq, epsilon).unwrap_or(f64::NEG_INFINITY)
    }, rng);
    let mut next = state.clone();
    next.candidate_j = j;
    Ok((next, accepted))
}

#[inline]
fn accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    if log_ratio >= 0.0 {
        return true;
    }
    let u: f64 = rng.random();
    u.ln() < log_ratio
}

/// Draws `G ~ Gamma(shape, 1)` conditioned on `G ≥ lower`.
pub fn sample_truncated_gamma<R: Rng + ?Sized>(shape: f64, lower: f64, rng: &mut R) -> f64 {
    if lower <= 0.0 {
        return Gamma::new(shape, 1.0).expect("positive shape").sample(rng);
    }
    let upper_tail = gamma_ur(shape, lower);
    if upper_tail < 1e-250 {
        return tail_gamma(shape, lower, rng);
    }
    let u: f64 = 1.0 - rng.random::<f64>();
    if upper_tail > 0.5 {
        // Solve P(a, g) = P(a, lower) + Q(a, lower)·u in the lower tail.
        let target = gamma_lr(shape, lower) + upper_tail * u;
        invert_gamma_cdf(shape, lower, |g| gamma_lr(shape, g) - target, 1.0)
    } else {
        let target = upper_tail * u;
        invert_gamma_cdf(shape, lower, |g| gamma_ur(shape, g) - target, -1.0)
    }
}

/// Rejection sampler from the tangent-line envelope of the log-density
/// beyond `lower`; exact for any shape when `lower` is past the mode.
fn tail_gamma<R: Rng + ?Sized>(shape: f64, lower: f64, rng: &mut R) -> f64 {
    let slope = if shape > 1.0 { 1.0 - (shape - 1.0) / lower } else { 1.0 };
    let slope = slope.max(1e-3);
    loop {
        let u: f64 = 1.0 - rng.random::<f64>();
        let g = lower - u.ln() / slope;
        let log_accept = (shape - 1.0) * (g / lower).ln() - (g - lower) + slope * (g - lower);
        let v: f64 = rng.random();
        if v.ln() < log_accept.min(0.0) {
            return g;
        }
    }
}

/// Safeguarded Newton iteration for the root of an increasing (`sign = 1`) or
/// decreasing (`sign = −1`) function of `g` on `[lower, ∞)`.
fn invert_gamma_cdf(shape: f64, lower: f64, f: impl Fn(f64) -> f64, sign: f64) -> f64 {
    let log_norm = ln_gamma(shape);
    let pdf = |g: f64| ((shape - 1.0) * g.ln() - g - log_norm).exp();
    let mut lo = lower;
    let mut hi = lower.max(shape) + 1.0;
    while sign * f(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    let mut g = 0.5 * (lo + hi);
    for _ in 0..200 {
        let fg = f(g);
        if fg == 0.0 {
            return g;
        }
        if sign * fg < 0.0 {
            lo = g;
        } else {
            hi = g;
        }
        let d = sign * pdf(g);
        let mut next = g - fg / d;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - g).abs() <= 1e-14 * g.max(1e-300) || hi - lo <= 1e-15 * hi {
            return next;
        }
        g = next;
    }
    g
}

/// Draws a variance from `IG(shape, rate)` truncated to `(0, upper]`.
pub fn sample_truncated_inverse_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, upper: f64, rng: &mut R) -> f64 {
    let g = sample_truncated_gamma(shape, rate / upper, rng);
    (rate / g).min(upper)
}

/// A single Markov chain owning its state, tuning and random stream.
pub struct Chain<'a> {
    data: Dataset,
    adj: &'a AdjacencyStructure,
    seq: Option<&'a CandidateSequence>,
    model: ModelKind,
    cfg: SamplerConfig,
    state: ChainState,
    rng: StreamRng,
    xb: Vec<f64>,
    phi_step: Vec<f64>,
    theta_step: Vec<f64>,
    beta_log_scale: f64,
    beta_chol: DMatrix<f64>,
    beta_chol_initial: DMatrix<f64>,
    iar_rank: usize,
    iteration: usize,
    adapting: bool,
    counters: AcceptanceSummary,
    rate_floor_hits: u64,
    beta_resets: u64,
}

impl<'a> Chain<'a> {
    /// Chain `index` with dispersed initial values drawn from its own stream.
    pub fn new(
        data: &Dataset,
        adj: &'a AdjacencyStructure,
        seq: Option<&'a CandidateSequence>,
        model: ModelKind,
        cfg: &SamplerConfig,
        index: u64,
    ) -> Result<Self> {
        let mut rng = substream(cfg.seed, "chain", index);
        let state = initial_state(data, adj, seq, model, cfg, &mut rng)?;
        Self::with_state(data, adj, seq, model, cfg, state, rng)
    }

    pub fn with_state(
        data: &Dataset,
        adj: &'a AdjacencyStructure,
        seq: Option<&'a CandidateSequence>,
        model: ModelKind,
        cfg: &SamplerConfig,
        state: ChainState,
        rng: StreamRng,
    ) -> Result<Self> {
        cfg.validate()?;
        check_inputs(data, adj, seq, model, cfg)?;
        let n = data.n();
        if state.phi.len() != n || state.beta.len() != data.n_coef() {
            return Err(Error::DimensionMismatch { expected: n, got: state.phi.len() });
        }
        if model == ModelKind::Bym && state.theta.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: state.theta.len() });
        }
        let p = data.n_coef();
        let initial_cov = if cfg.use_likelihood {
            fit_poisson_glm(data)
                .map(|f| f.covariance)
                .unwrap_or_else(|_| DMatrix::identity(p, p) * 0.01)
        } else {
            DMatrix::identity(p, p) * cfg.priors.beta_variance
        };
        let scaled = initial_cov * (2.38f64.powi(2) / p as f64);
        let beta_chol = scaled
            .cholesky()
            .map(|c| c.l())
            .unwrap_or_else(|| DMatrix::identity(p, p) * 0.1);
        let xb = data.linear_predictor(&state.beta);
        Ok(Self {
            data: data.clone(),
            adj,
            seq,
            model,
            cfg: cfg.clone(),
            state,
            rng,
            xb,
            phi_step: vec![0.3; n],
            theta_step: vec![0.3; n],
            beta_log_scale: 0.0,
            beta_chol_initial: beta_chol.clone(),
            beta_chol,
            iar_rank: iar_rank(adj),
            iteration: 0,
            adapting: cfg.adaptation.enabled,
            counters: AcceptanceSummary::default(),
            rate_floor_hits: 0,
            beta_resets: 0,
        })
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn set_state(&mut self, state: ChainState) {
        self.xb = self.data.linear_predictor(&state.beta);
        self.state = state;
    }

    /// Replaces the observed counts, keeping everything else.
    pub fn set_observed(&mut self, y: Vec<u64>) -> Result<()> {
        let x = self.data.x().clone();
        let e = self.data.e().to_vec();
        self.data = Dataset::new(y, e, x)?;
        Ok(())
    }

    pub fn rng(&mut self) -> &mut StreamRng {
        &mut self.rng
    }

    pub fn set_adapting(&mut self, on: bool) {
        self.adapting = on && self.cfg.adaptation.enabled;
    }

    pub fn counters(&self) -> &AcceptanceSummary {
        &self.counters
    }

    pub fn reset_counters(&mut self) {
        self.counters = AcceptanceSummary::default();
    }

    fn gain(&self) -> f64 {
        (self.iteration as f64 + 1.0).powf(-ADAPT_EXPONENT)
    }

    /// Log-likelihood terms of unit `k` depending on its linear predictor.
    #[inline]
    fn unit_loglik(&self, k: usize, eta: f64) -> f64 {
        if !self.cfg.use_likelihood {
            return 0.0;
        }
        self.data.y()[k] as f64 * eta - self.data.e()[k] * eta.exp()
    }

    fn theta_k(&self, k: usize) -> f64 {
        self.state.theta.get(k).copied().unwrap_or(0.0)
    }

    pub fn update_beta(&mut self) {
        if self.cfg.frozen.beta {
            return;
        }
        let p = self.data.n_coef();
        let z = DVector::from_iterator(p, (0..p).map(|_| self.rng.sample::<f64, _>(StandardNormal)));
        let step = &self.beta_chol * z * self.beta_log_scale.exp();
        let proposal: Vec<f64> = self.state.beta.iter().zip(step.iter()).map(|(b, s)| b + s).collect();
        let v = self.cfg.priors.beta_variance;
        let prior = |b: &[f64]| -b.iter().map(|x| x * x).sum::<f64>() / (2.0 * v);
        let xb_new = self.data.linear_predictor(&proposal);
        let mut log_ratio = prior(&proposal) - prior(&self.state.beta);
        for k in 0..self.data.n() {
            let offset = self.state.phi[k] + self.theta_k(k);
            log_ratio += self.unit_loglik(k, xb_new[k] + offset) - self.unit_loglik(k, self.xb[k] + offset);
        }
        let accepted = accept(log_ratio, &mut self.rng);
        if accepted {
            self.state.beta = proposal;
            self.xb = xb_new;
        }
        if self.adapting {
            let alpha = log_ratio.min(0.0).exp();
            self.beta_log_scale += self.gain() * (alpha - self.cfg.adaptation.target_block);
            if self.cfg.use_likelihood && self.iteration > 0 && self.iteration % BETA_REFRESH_INTERVAL == 0 {
                self.refresh_beta_covariance();
            }
        } else {
            self.counters.beta.record(accepted);
        }
    }

    /// Re-derives the β proposal covariance from the Fisher information at
    /// the current state, resetting to the initial scale on failure.
    fn refresh_beta_covariance(&mut self) {
        let p = self.data.n_coef();
        let x = self.data.x();
        let mut info = DMatrix::<f64>::zeros(p, p);
        for k in 0..self.data.n() {
            let mu = self.data.e()[k] * (self.xb[k] + self.state.phi[k] + self.theta_k(k)).exp();
            for a in 0..p {
                for b in 0..p {
                    info[(a, b)] += x[(k, a)] * mu * x[(k, b)];
                }
            }
        }
        let chol = info
            .try_inverse()
            .map(|c| c * (2.38f64.powi(2) / p as f64))
            .and_then(|c| c.cholesky())
            .map(|c| c.l());
        match chol {
            Some(l) if l.iter().all(|v| v.is_finite()) => self.beta_chol = l,
            _ => {
                self.beta_chol = self.beta_chol_initial.clone();
                self.beta_log_scale = 0.0;
                self.beta_resets += 1;
            }
        }
    }

    /// Gibbs moves along directions that leave the linear predictor fixed:
    /// `β_m += t`, `φ −= t·x_m` (and `φ* −= t` for the intercept under LCAR).
    pub fn update_shifts(&mut self) {
        if self.cfg.frozen.beta || self.cfg.frozen.phi {
            return;
        }
        let n = self.data.n();
        let v = self.cfg.priors.beta_variance;
        let tau2 = self.state.tau2;
        for m in 0..self.data.n_coef() {
            let lcar = self.model == ModelKind::Lcar;
            if !lcar && m == 0 {
                continue;
            }
            let dir: Vec<f64> = (0..n).map(|k| -self.data.x()[(k, m)]).collect();
            let dir_star = if lcar && m == 0 { -1.0 } else { 0.0 };
            let (a, b) = match (self.model, self.seq) {
                (ModelKind::Lcar, Some(seq)) => {
                    let j = self.state.candidate_j;
                    let eps = self.cfg.epsilon;
                    (
                        lcar_bilinear((&dir, dir_star), (&dir, dir_star), seq, j, eps),
                        lcar_bilinear((&dir, dir_star), (&self.state.phi, self.state.phi_star), seq, j, eps),
                    )
                }
                _ => (iar_bilinear(&dir, &dir, self.adj), iar_bilinear(&dir, &self.state.phi, self.adj)),
            };
            let precision = a / tau2 + 1.0 / v;
            let linear = b / tau2 + self.state.beta[m] / v;
            let z: f64 = self.rng.sample(StandardNormal);
            let t = -linear / precision + z / precision.sqrt();
            self.state.beta[m] += t;
            for k in 0..n {
                self.state.phi[k] += t * dir[k];
                self.xb[k] -= t * dir[k];
            }
            self.state.phi_star += t * dir_star;
        }
    }

    pub fn update_phi(&mut self) -> Result<()> {
        if self.cfg.frozen.phi {
            return Ok(());
        }
        let target = self.cfg.adaptation.target_single;
        for k in 0..self.data.n() {
            let cond = match (self.model, self.seq) {
                (ModelKind::Lcar, Some(seq)) => {
                    lcar_phi_full_conditional(Node::Unit(k), &self.state, seq, self.cfg.epsilon)?
                }
                _ => iar_conditional(k, &self.state.phi, self.adj, self.state.tau2),
            };
            let current = self.state.phi[k];
            let z: f64 = self.rng.sample(StandardNormal);
            let proposal = current + self.phi_step[k] * z;
            let base = self.xb[k] + self.theta_k(k);
            let log_target = |x: f64| -(x - cond.mean).powi(2) / (2.0 * cond.variance);
            let log_ratio = log_target(proposal) - log_target(current) + self.unit_loglik(k, base + proposal)
                - self.unit_loglik(k, base + current);
            let accepted = accept(log_ratio, &mut self.rng);
            if accepted {
                self.state.phi[k] = proposal;
            }
            if self.adapting {
                let alpha = log_ratio.min(0.0).exp();
                self.phi_step[k] *= (self.gain() * (alpha - target)).exp();
            } else {
                self.counters.phi.record(accepted);
            }
        }
        if let (ModelKind::Lcar, Some(seq)) = (self.model, self.seq) {
            let cond = lcar_phi_full_conditional(Node::Global, &self.state, seq, self.cfg.epsilon)?;
            let z: f64 = self.rng.sample(StandardNormal);
            self.state.phi_star = cond.mean + cond.variance.sqrt() * z;
        }
        Ok(())
    }

    pub fn update_theta(&mut self) {
        if self.model != ModelKind::Bym {
            return;
        }
        let target = self.cfg.adaptation.target_single;
        let s2 = self.state.sigma2;
        for k in 0..self.data.n() {
            let current = self.state.theta[k];
            let z: f64 = self.rng.sample(StandardNormal);
            let proposal = current + self.theta_step[k] * z;
            let base = self.xb[k] + self.state.phi[k];
            let log_ratio = -(proposal * proposal - current * current) / (2.0 * s2)
                + self.unit_loglik(k, base + proposal)
                - self.unit_loglik(k, base + current);
            let accepted = accept(log_ratio, &mut self.rng);
            if accepted {
                self.state.theta[k] = proposal;
            }
            if self.adapting {
                let alpha = log_ratio.min(0.0).exp();
                self.theta_step[k] *= (self.gain() * (alpha - target)).exp();
            } else {
                self.counters.theta.record(accepted);
            }
        }
    }

    /// Moves the mean of `φ` into the intercept (IAR and BYM).
    fn recentre(&mut self) {
        if self.model == ModelKind::Lcar || self.cfg.frozen.phi || self.cfg.frozen.beta {
            return;
        }
        let m = crate::stats::mean(&self.state.phi);
        self.state.phi.iter_mut().for_each(|v| *v -= m);
        self.state.beta[0] += m;
        self.xb.iter_mut().for_each(|v| *v += m);
    }

    pub fn update_tau2(&mut self) {
        if self.cfg.frozen.tau2 {
            return;
        }
        let (shape, quad) = match (self.model, self.seq) {
            (ModelKind::Lcar, Some(seq)) => (
                (self.data.n() as f64 + 1.0) / 2.0 - 1.0,
                lcar_quad_form(&self.state.phi, self.state.phi_star, seq, self.state.candidate_j, self.cfg.epsilon),
            ),
            _ => (self.iar_rank as f64 / 2.0 - 1.0, iar_quad_form(&self.state.phi, self.adj)),
        };
        let mut rate = quad / 2.0;
        if !(rate >= RATE_FLOOR) {
            rate = RATE_FLOOR;
            self.rate_floor_hits += 1;
        }
        self.state.tau2 = sample_truncated_inverse_gamma(shape, rate, self.cfg.priors.tau2_max, &mut self.rng);
    }

    pub fn update_sigma2(&mut self) {
        if self.model != ModelKind::Bym {
            return;
        }
        let shape = self.data.n() as f64 / 2.0 - 1.0;
        let mut rate = self.state.theta.iter().map(|t| t * t).sum::<f64>() / 2.0;
        if !(rate >= RATE_FLOOR) {
            rate = RATE_FLOOR;
            self.rate_floor_hits += 1;
        }
        self.state.sigma2 = sample_truncated_inverse_gamma(shape, rate, self.cfg.priors.sigma2_max, &mut self.rng);
    }

    pub fn update_candidate(&mut self) -> Result<()> {
        let (ModelKind::Lcar, Some(seq)) = (self.model, self.seq) else {
            return Ok(());
        };
        if self.cfg.frozen.candidate {
            return Ok(());
        }
        let (next, accepted) = update_candidate(&self.state, seq, self.cfg.q, self.cfg.epsilon, &mut self.rng)?;
        self.state.candidate_j = next.candidate_j;
        if !self.adapting {
            self.counters.candidate.record(accepted);
        }
        Ok(())
    }

    /// One full sweep over all blocks.
    pub fn sweep(&mut self) -> Result<()> {
        self.update_beta();
        self.update_shifts();
        self.update_phi()?;
        self.update_theta();
        self.recentre();
        self.update_tau2();
        self.update_sigma2();
        self.update_candidate()?;
        self.iteration += 1;
        Ok(())
    }

    /// Runs burn-in with adaptation, then stores every `thin`-th of the kept
    /// iterations.
    pub fn run(mut self) -> Result<ChainSamples> {
        self.set_adapting(true);
        for _ in 0..self.cfg.burn_in {
            self.sweep()?;
        }
        self.set_adapting(false);
        self.reset_counters();
        let draws = self.cfg.n_draws();
        let mut out = ChainSamples {
            beta: Vec::with_capacity(draws),
            tau2: Vec::with_capacity(draws),
            phi: Vec::with_capacity(draws),
            phi_star: Vec::with_capacity(draws),
            candidate_j: Vec::with_capacity(draws),
            ..Default::default()
        };
        for i in 1..=draws * self.cfg.thin {
            self.sweep()?;
            if i % self.cfg.thin == 0 {
                let dev = -2.0 * log_poisson_lik(&self.data, &self.state)?;
                if !dev.is_finite() {
                    return Err(Error::Invalid("non-finite deviance".into()));
                }
                let s = &self.state;
                out.beta.push(s.beta.clone());
                out.tau2.push(s.tau2);
                out.phi.push(s.phi.clone());
                out.phi_star.push(s.phi_star);
                out.candidate_j.push(s.candidate_j);
                if self.model == ModelKind::Bym {
                    out.theta.push(s.theta.clone());
                    out.sigma2.push(s.sigma2);
                }
                out.deviance.push(dev);
            }
        }
        out.acceptance = self.counters;
        out.rate_floor_hits = self.rate_floor_hits;
        out.beta_resets = self.beta_resets;
        Ok(out)
    }
}

fn check_inputs(
    data: &Dataset,
    adj: &AdjacencyStructure,
    seq: Option<&CandidateSequence>,
    model: ModelKind,
    cfg: &SamplerConfig,
) -> Result<()> {
    if adj.n() != data.n() {
        return Err(Error::InconsistentUnits(format!(
            "adjacency has {} units, data has {}",
            adj.n(),
            data.n()
        )));
    }
    if model == ModelKind::Lcar {
        let seq = seq.ok_or(Error::MissingSequence)?;
        if seq.base().hash() != adj.hash() {
            return Err(Error::InconsistentUnits(
                "candidate sequence was elicited on a different adjacency".into(),
            ));
        }
        seq.cached_logdet(0, cfg.epsilon)?;
        if data.n() < 2 {
            return Err(Error::Invalid("LCAR needs at least two units".into()));
        }
    } else if iar_rank(adj) < 3 {
        return Err(Error::Invalid("IAR precision rank must be at least 3".into()));
    }
    if model == ModelKind::Bym && data.n() < 3 {
        return Err(Error::Invalid("BYM needs at least three units".into()));
    }
    Ok(())
}

/// Dispersed starting values: β from the covariate-only GLM with jitter,
/// small random effects, and a uniformly drawn candidate index.
pub fn initial_state<R: Rng + ?Sized>(
    data: &Dataset,
    adj: &AdjacencyStructure,
    seq: Option<&CandidateSequence>,
    model: ModelKind,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<ChainState> {
    let n = data.n();
    let p = data.n_coef();
    let mut beta = vec![0.0; p];
    if cfg.use_likelihood {
        if let Ok(fit) = fit_poisson_glm(data) {
            for c in 0..p {
                let sd = fit.covariance[(c, c)].max(0.0).sqrt();
                let z: f64 = rng.sample(StandardNormal);
                beta[c] = fit.beta[c] + 2.0 * sd * z;
            }
        }
    }
    let mut phi: Vec<f64> = (0..n).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
    if model != ModelKind::Lcar {
        let m = crate::stats::mean(&phi);
        phi.iter_mut().for_each(|v| *v -= m);
    }
    let tau2 = rng.random_range(0.05..0.5f64).min(cfg.priors.tau2_max / 2.0);
    let candidate_j = match (model, seq) {
        (ModelKind::Lcar, Some(seq)) => rng.random_range(0..=seq.n_edges()),
        _ => adj.n_edges(),
    };
    let (theta, sigma2) = if model == ModelKind::Bym {
        (
            (0..n).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect(),
            rng.random_range(0.05..0.5f64).min(cfg.priors.sigma2_max / 2.0),
        )
    } else {
        (Vec::new(), f64::NAN)
    };
    Ok(ChainState {
        beta,
        tau2,
        phi,
        phi_star: 0.0,
        candidate_j,
        theta,
        sigma2,
    })
}

/// Runs `cfg.n_chains` independent chains in parallel. The sequence is
/// required for LCAR and ignored otherwise.
pub fn run_chains(
    data: &Dataset,
    adj: &AdjacencyStructure,
    seq: Option<&CandidateSequence>,
    model: ModelKind,
    cfg: &SamplerConfig,
) -> Result<PosteriorSamples> {
    cfg.validate()?;
    let seq = if model == ModelKind::Lcar { seq } else { None };
    check_inputs(data, adj, seq, model, cfg)?;
    let chains = (0..cfg.n_chains as u64)
        .into_par_iter()
        .map(|c| Chain::new(data, adj, seq, model, cfg, c)?.run())
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorSamples {
        model,
        n_edges: adj.n_edges(),
        chains,
    })
}
