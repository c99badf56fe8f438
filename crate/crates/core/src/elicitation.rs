//! Data-driven elicitation of the candidate sequence.
//!
//! Historical log-SIRs are treated as Gaussian with precision
//! `Q(W̃, ε)_{1:n} / τ²`. Starting from the full graph, edges are removed one
//! at a time, each time picking the removal that maximises the approximate
//! joint log-likelihood of all prior periods.
//!
//! The regression and variance estimates are refreshed once per step from the
//! current state and shared by every trial removal at that step. Under that
//! convention a trial removal perturbs `Q_{1:n}` only on the two endpoints of
//! the edge, so its log-determinant follows from a rank-two update and its
//! quadratic form from the endpoint residuals.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AdjacencyStructure, CandidateSequence, EdgeState};
use crate::precision::{build_sub_precision, low_rank_logdet_delta, EnvelopeOrdering, SparseSym};

/// Continuity correction applied to every unit of a period containing a zero
/// count.
pub const ZERO_COUNT_CORRECTION: f64 = 0.5;

/// Relative tolerance under which two trial log-likelihoods count as tied;
/// ties go to the smallest canonical edge index.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Floor for `τ̂²` when every residual vanishes.
pub const TAU2_FLOOR: f64 = 1e-12;

/// One historical period of observed and expected counts.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodCounts {
    pub observed: Vec<u64>,
    pub expected: Vec<f64>,
}

/// Log-SIRs for `r` prior periods plus the shared design matrix.
#[derive(Debug, Clone)]
pub struct PriorData {
    phi: Vec<Vec<f64>>,
    x: DMatrix<f64>,
    corrected: Vec<bool>,
}

fn check_full_rank(x: &DMatrix<f64>) -> Result<()> {
    if x.nrows() < x.ncols() {
        return Err(Error::SingularDesign);
    }
    let svd = x.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let tol = smax * f64::EPSILON * x.nrows().max(x.ncols()) as f64;
    if svd.singular_values.iter().any(|&s| s <= tol) {
        return Err(Error::SingularDesign);
    }
    Ok(())
}

impl PriorData {
    pub fn new(phi: Vec<Vec<f64>>, x: DMatrix<f64>) -> Result<Self> {
        let corrected = vec![false; phi.len()];
        Self::with_flags(phi, x, corrected)
    }

    fn with_flags(phi: Vec<Vec<f64>>, x: DMatrix<f64>, corrected: Vec<bool>) -> Result<Self> {
        if phi.is_empty() {
            return Err(Error::EmptyPriorData);
        }
        let n = x.nrows();
        for period in &phi {
            if period.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: period.len(),
                });
            }
            if period.iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid("non-finite prior log-SIR".into()));
            }
        }
        check_full_rank(&x)?;
        Ok(Self { phi, x, corrected })
    }

    /// `ln(Y/E)` per period, with `ln((Y+0.5)/(E+0.5))` for the whole period
    /// whenever it contains a zero count.
    pub fn from_counts(periods: &[PeriodCounts], x: DMatrix<f64>) -> Result<Self> {
        let mut phi = Vec::with_capacity(periods.len());
        let mut corrected = Vec::with_capacity(periods.len());
        for p in periods {
            if p.observed.len() != p.expected.len() {
                return Err(Error::DimensionMismatch {
                    expected: p.observed.len(),
                    got: p.expected.len(),
                });
            }
            for (k, &e) in p.expected.iter().enumerate() {
                if !(e > 0.0) {
                    return Err(Error::NonPositiveExpected { unit: k + 1, value: e });
                }
            }
            let fix = p.observed.contains(&0);
            let c = if fix { ZERO_COUNT_CORRECTION } else { 0.0 };
            phi.push(
                p.observed
                    .iter()
                    .zip(&p.expected)
                    .map(|(&y, &e)| ((y as f64 + c) / (e + c)).ln())
                    .collect(),
            );
            corrected.push(fix);
        }
        Self::with_flags(phi, x, corrected)
    }

    pub fn r(&self) -> usize {
        self.phi.len()
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn phi(&self) -> &[Vec<f64>] {
        &self.phi
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    /// Which periods received the zero-count correction.
    pub fn corrected(&self) -> &[bool] {
        &self.corrected
    }
}

/// Normaliser of the across-period sum inside the `β̂` formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MeanNormaliser {
    /// `(1/n) Σⱼ φⱼᵖ`, the published form.
    #[default]
    Units,
    /// `(1/r) Σⱼ φⱼᵖ`, the period average.
    Periods,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ElicitationOptions {
    /// Re-estimate `β̂, τ̂²` for every trial removal instead of once per step.
    pub refresh_per_trial: bool,
    pub normaliser: MeanNormaliser,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlEstimates {
    pub beta: Vec<f64>,
    pub tau2: f64,
    /// Set when `τ̂²` hit [`TAU2_FLOOR`].
    pub degenerate: bool,
    residuals: Vec<Vec<f64>>,
}

impl MlEstimates {
    /// `φⱼᵖ − Xβ̂` for each period.
    pub fn residuals(&self) -> &[Vec<f64>] {
        &self.residuals
    }
}

fn estimates_for(q: &SparseSym, data: &PriorData, normaliser: MeanNormaliser) -> Result<MlEstimates> {
    let n = data.n();
    if q.dim() != n {
        return Err(Error::DimensionMismatch { expected: n, got: q.dim() });
    }
    let x = data.x();
    let p = x.ncols();
    let qx: Vec<Vec<f64>> = (0..p)
        .map(|c| q.matvec(x.column(c).as_slice()))
        .collect::<Result<_>>()?;
    let xtqx = DMatrix::from_fn(p, p, |a, b| x.column(a).iter().zip(&qx[b]).map(|(u, v)| u * v).sum());

    let divisor = match normaliser {
        MeanNormaliser::Units => n as f64,
        MeanNormaliser::Periods => data.r() as f64,
    };
    let mut pooled = vec![0.0; n];
    for period in data.phi() {
        for (acc, v) in pooled.iter_mut().zip(period) {
            *acc += v;
        }
    }
    pooled.iter_mut().for_each(|v| *v /= divisor);
    let xtqphi = DVector::from_fn(p, |a, _| qx[a].iter().zip(&pooled).map(|(u, v)| u * v).sum());

    let chol = xtqx.cholesky().ok_or(Error::SingularDesign)?;
    let beta = chol.solve(&xtqphi);
    let fitted = x * &beta;

    let residuals: Vec<Vec<f64>> = data
        .phi()
        .iter()
        .map(|period| period.iter().zip(fitted.iter()).map(|(a, b)| a - b).collect())
        .collect();
    let mut quad = 0.0;
    for res in &residuals {
        quad += q.quad_form(res)?;
    }
    let raw = quad / (n * data.r()) as f64;
    let degenerate = !(raw > TAU2_FLOOR);
    Ok(MlEstimates {
        beta: beta.iter().copied().collect(),
        tau2: if degenerate { TAU2_FLOOR } else { raw },
        degenerate,
        residuals,
    })
}

/// Maximum-likelihood `(β̂, τ̂²)` under the given edge state.
pub fn ml_estimates(
    state: &EdgeState<'_>,
    data: &PriorData,
    epsilon: f64,
    normaliser: MeanNormaliser,
) -> Result<MlEstimates> {
    let q = build_sub_precision(state, epsilon)?;
    estimates_for(&q, data, normaliser)
}

/// `(r/2) ln|Q*| − (nr/2) ln τ̂² − quad / (2τ̂²)`.
fn loglik_value(n: usize, r: usize, logdet: f64, tau2: f64, quad: f64) -> f64 {
    let (n, r) = (n as f64, r as f64);
    0.5 * r * logdet - 0.5 * n * r * tau2.ln() - quad / (2.0 * tau2)
}

/// Approximate joint log-likelihood of the prior periods under a trial edge
/// state, using estimates computed elsewhere (normally from the current
/// state rather than the trial).
pub fn candidate_loglik(
    trial: &EdgeState<'_>,
    estimates: &MlEstimates,
    data: &PriorData,
    epsilon: f64,
) -> Result<f64> {
    let q = build_sub_precision(trial, epsilon)?;
    if q.dim() != data.n() {
        return Err(Error::DimensionMismatch { expected: data.n(), got: q.dim() });
    }
    let logdet = EnvelopeOrdering::for_units(trial.adjacency()).factor(&q)?.log_det();
    let mut quad = 0.0;
    for res in estimates.residuals() {
        quad += q.quad_form(res)?;
    }
    Ok(loglik_value(data.n(), data.r(), logdet, estimates.tau2, quad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    /// One-based step; step `s` moves from candidate `N − s + 1` to `N − s`.
    pub step: usize,
    pub edge: usize,
    pub loglik: f64,
    pub beta_hat: Vec<f64>,
    pub tau2_hat: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ElicitationTrace {
    pub steps: Vec<TraceStep>,
}

/// Index into `scores` of the best trial, ties broken toward the smallest edge.
pub fn select_best(edges: &[usize], scores: &[f64]) -> usize {
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = TIE_TOLERANCE * best.abs().max(1.0);
    let mut pick = None;
    for (i, (&e, &s)) in edges.iter().zip(scores).enumerate() {
        if s >= best - tol && pick.is_none_or(|p: usize| e < edges[p]) {
            pick = Some(i);
        }
    }
    pick.expect("at least one trial")
}

fn fast_scores(
    state: &EdgeState<'_>,
    q: &SparseSym,
    ord: &EnvelopeOrdering,
    est: &MlEstimates,
    data: &PriorData,
    active: &[usize],
) -> Result<Vec<f64>> {
    let adj = state.adjacency();
    let factor = ord.factor(q)?;
    let logdet = factor.log_det();
    let base_quad = est.tau2 * (data.n() * data.r()) as f64;
    let base_quad = if est.degenerate {
        est.residuals().iter().map(|r| q.quad_form(r)).sum::<Result<f64>>()?
    } else {
        base_quad
    };

    let mut needed = vec![false; adj.n()];
    for &e in active {
        let (a, b) = adj.edge(e);
        needed[a] = true;
        needed[b] = true;
    }
    let columns: Vec<Option<Vec<f64>>> = (0..adj.n())
        .into_par_iter()
        .map(|u| needed[u].then(|| factor.inverse_column(u)))
        .collect();

    active
        .par_iter()
        .map(|&e| {
            let (a, b) = adj.edge(e);
            let da = if state.global_link(a) { -1.0 } else { 0.0 };
            let db = if state.global_link(b) { -1.0 } else { 0.0 };
            let delta = DMatrix::from_row_slice(2, 2, &[da, 1.0, 1.0, db]);
            let ca = columns[a].as_ref().expect("column");
            let cb = columns[b].as_ref().expect("column");
            let inv = DMatrix::from_row_slice(2, 2, &[ca[a], ca[b], cb[a], cb[b]]);
            let dlogdet = low_rank_logdet_delta(&delta, &inv)?;
            let dquad: f64 = est
                .residuals()
                .iter()
                .map(|r| da * r[a] * r[a] + db * r[b] * r[b] + 2.0 * r[a] * r[b])
                .sum();
            Ok(loglik_value(
                data.n(),
                data.r(),
                logdet + dlogdet,
                est.tau2,
                base_quad + dquad,
            ))
        })
        .collect()
}

fn refreshed_scores(
    state: &EdgeState<'_>,
    data: &PriorData,
    epsilon: f64,
    normaliser: MeanNormaliser,
    active: &[usize],
) -> Result<Vec<f64>> {
    active
        .par_iter()
        .map(|&e| {
            let mut trial = state.clone();
            trial.set_active(e, false);
            let est = ml_estimates(&trial, data, epsilon, normaliser)?;
            candidate_loglik(&trial, &est, data, epsilon)
        })
        .collect()
}

/// Greedy backward elimination from the full graph to the empty graph.
pub fn elicit_sequence(
    adj: Arc<AdjacencyStructure>,
    data: &PriorData,
    epsilon: f64,
    options: ElicitationOptions,
) -> Result<(CandidateSequence, ElicitationTrace)> {
    if adj.n() != data.n() {
        return Err(Error::InconsistentUnits(format!(
            "adjacency has {} units, prior data {}",
            adj.n(),
            data.n()
        )));
    }
    if adj.n_edges() == 0 {
        return Err(Error::Invalid("elicitation needs at least one edge".into()));
    }
    let ord = EnvelopeOrdering::for_units(&adj);
    let mut state = EdgeState::full(&adj);
    let mut removal = Vec::with_capacity(adj.n_edges());
    let mut trace = ElicitationTrace::default();

    for step in 1..=adj.n_edges() {
        let q = build_sub_precision(&state, epsilon)?;
        let est = estimates_for(&q, data, options.normaliser)?;
        let active: Vec<usize> = (0..adj.n_edges()).filter(|&e| state.is_active(e)).collect();
        let scores = if options.refresh_per_trial {
            refreshed_scores(&state, data, epsilon, options.normaliser, &active)?
        } else {
            fast_scores(&state, &q, &ord, &est, data, &active)?
        };
        let pick = select_best(&active, &scores);
        let edge = active[pick];
        trace.steps.push(TraceStep {
            step,
            edge,
            loglik: scores[pick],
            beta_hat: est.beta.clone(),
            tau2_hat: est.tau2,
            degenerate: est.degenerate,
        });
        state.set_active(edge, false);
        removal.push(edge);
    }
    let seq = CandidateSequence::new(adj, removal)?;
    Ok((seq, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_adjacency;
    use approx::assert_abs_diff_eq;
    use nalgebra::SymmetricEigen;

    fn intercept(n: usize) -> DMatrix<f64> {
        DMatrix::from_element(n, 1, 1.0)
    }

    fn design(n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, 2, |k, c| if c == 0 { 1.0 } else { (k as f64 * 0.7).sin() })
    }

    #[test]
    fn empty_prior_rejected() {
        assert!(matches!(PriorData::new(vec![], intercept(3)), Err(Error::EmptyPriorData)));
    }

    #[test]
    fn rank_deficient_design_rejected() {
        let x = DMatrix::from_fn(4, 2, |_, _| 1.0);
        assert!(matches!(
            PriorData::new(vec![vec![0.0; 4]], x),
            Err(Error::SingularDesign)
        ));
    }

    #[test]
    fn zero_counts_get_continuity_correction() {
        let periods = [
            PeriodCounts { observed: vec![0, 4], expected: vec![2.0, 2.0] },
            PeriodCounts { observed: vec![1, 4], expected: vec![2.0, 2.0] },
        ];
        let data = PriorData::from_counts(&periods, intercept(2)).unwrap();
        assert_eq!(data.corrected(), &[true, false]);
        assert_abs_diff_eq!(data.phi()[0][0], (0.5f64 / 2.5).ln());
        assert_abs_diff_eq!(data.phi()[0][1], (4.5f64 / 2.5).ln());
        assert_abs_diff_eq!(data.phi()[1][1], 2f64.ln());
    }

    #[test]
    fn identity_weight_reduces_to_ols() {
        // Every unit has lost its only edge, so Q = (1+ε)I and GLS is OLS.
        let phi = vec![vec![0.3, -0.1, 0.8, 0.2]];
        let data = PriorData::new(phi.clone(), intercept(4)).unwrap();
        let adj_iso = AdjacencyStructure::new(4, [(0, 1), (2, 3)]).unwrap();
        let mut iso = EdgeState::full(&adj_iso);
        iso.set_active(0, false);
        iso.set_active(1, false);
        let est = ml_estimates(&iso, &data, 0.001, MeanNormaliser::Periods).unwrap();
        let mean = phi[0].iter().sum::<f64>() / 4.0;
        assert_abs_diff_eq!(est.beta[0], mean, epsilon = 1e-12);
        let mse = phi[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert_abs_diff_eq!(est.tau2, 1.001 * mse, epsilon = 1e-12);
    }

    #[test]
    fn perfect_fit_is_flagged() {
        let adj = AdjacencyStructure::lattice(2, 2).unwrap();
        let x = design(4);
        let b = [0.2, -0.5];
        let period: Vec<f64> = (0..4).map(|k| b[0] + b[1] * x[(k, 1)]).collect();
        let data = PriorData::new(vec![period.clone(), period], x).unwrap();
        let est = ml_estimates(&EdgeState::full(&adj), &data, 0.001, MeanNormaliser::Periods).unwrap();
        assert_abs_diff_eq!(est.beta[0], b[0], epsilon = 1e-10);
        assert_abs_diff_eq!(est.beta[1], b[1], epsilon = 1e-10);
        assert!(est.degenerate);
        assert_eq!(est.tau2, TAU2_FLOOR);
    }

    #[test]
    fn printed_normaliser_divides_by_units() {
        let adj = AdjacencyStructure::lattice(2, 3).unwrap();
        let phi = vec![vec![1.0; 6], vec![1.0; 6]];
        let data = PriorData::new(phi, intercept(6)).unwrap();
        let state = EdgeState::full(&adj);
        let printed = ml_estimates(&state, &data, 0.001, MeanNormaliser::Units).unwrap();
        let period = ml_estimates(&state, &data, 0.001, MeanNormaliser::Periods).unwrap();
        assert_abs_diff_eq!(printed.beta[0], 2.0 / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(period.beta[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn path_loglik_matches_dense_formula() {
        let adj = build_adjacency(&[(1, 2), (2, 3)], 3).unwrap();
        let state = EdgeState::full(&adj);
        let eps = 0.001;
        let phi = vec![vec![0.4, -0.2, 0.1]];
        let data = PriorData::new(phi.clone(), intercept(3)).unwrap();
        let est = ml_estimates(&state, &data, eps, MeanNormaliser::Units).unwrap();
        let ll = candidate_loglik(&state, &est, &data, eps).unwrap();

        let q = DMatrix::from_row_slice(3, 3, &[1.0 + eps, -1.0, 0.0, -1.0, 2.0 + eps, -1.0, 0.0, -1.0, 1.0 + eps]);
        let one = DVector::from_element(3, 1.0);
        let y = DVector::from_vec(phi[0].clone());
        let ybar = &y / 3.0;
        let beta = (one.transpose() * &q * &ybar)[0] / (one.transpose() * &q * &one)[0];
        let res = &y - &one * beta;
        let quad = (res.transpose() * &q * &res)[0];
        let tau2 = quad / 3.0;
        let logdet: f64 = SymmetricEigen::new(q).eigenvalues.iter().map(|v| v.ln()).sum();
        let oracle = 0.5 * logdet - 1.5 * tau2.ln() - quad / (2.0 * tau2);
        assert_abs_diff_eq!(ll, oracle, epsilon = 1e-10);
        assert_abs_diff_eq!(est.beta[0], beta, epsilon = 1e-12);
    }

    #[test]
    fn tie_breaking_prefers_smallest_edge() {
        assert_eq!(select_best(&[4, 2, 7], &[1.0, 1.0, 0.5]), 1);
        assert_eq!(select_best(&[4, 2, 7], &[1.0, 1.0 - 1e-12, 0.5]), 1);
        assert_eq!(select_best(&[4, 2, 7], &[1.0, 0.9, 0.5]), 0);
    }

    #[test]
    fn constant_data_completes() {
        let adj = Arc::new(AdjacencyStructure::lattice(2, 3).unwrap());
        let data = PriorData::new(vec![vec![0.7; 6]; 3], intercept(6)).unwrap();
        for normaliser in [MeanNormaliser::Units, MeanNormaliser::Periods] {
            let opts = ElicitationOptions { normaliser, ..Default::default() };
            let (seq, trace) = elicit_sequence(adj.clone(), &data, 0.001, opts).unwrap();
            assert_eq!(seq.n_edges(), 7);
            assert_eq!(trace.steps.len(), 7);
        }
    }

    #[test]
    fn refresh_mode_runs_and_differs_only_in_estimates() {
        let adj = Arc::new(AdjacencyStructure::lattice(2, 3).unwrap());
        let phi = vec![
            vec![0.1, 0.3, -0.2, 0.5, 0.0, -0.4],
            vec![0.2, 0.1, -0.1, 0.6, 0.1, -0.3],
        ];
        let data = PriorData::new(phi, design(6)).unwrap();
        let opts = ElicitationOptions { refresh_per_trial: true, ..Default::default() };
        let (seq, _) = elicit_sequence(adj, &data, 0.001, opts).unwrap();
        let mut sorted = seq.removal_order().to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..7).collect::<Vec<_>>());
    }
}
