//! Fit and estimation diagnostics computed from posterior draws.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::AdjacencyStructure;
use crate::model::{deviance, fit_poisson_glm, Dataset};
use crate::rng::substream;
use crate::sampler::PosteriorSamples;
use crate::stats::{mean, quantile, quantile_inverted_cdf};

/// Default number of Moran's I permutations.
pub const DEFAULT_PERMUTATIONS: usize = 10_000;
/// Default number of bootstrap resamples for RMSE intervals.
pub const DEFAULT_BOOTSTRAP: usize = 1000;

const PERMUTATION_CHUNK: usize = 250;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dic {
    pub dic: f64,
    pub p_d: f64,
    pub mean_deviance: f64,
    pub deviance_at_mean: f64,
}

/// `p_D = D̄ − D(θ̄)`, `DIC = D̄ + p_D`, with `θ̄` the posterior mean of β,
/// φ and θ.
pub fn dic(samples: &PosteriorSamples, data: &Dataset) -> Result<Dic> {
    let devs = samples.deviance_draws();
    if devs.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let mean_deviance = mean(&devs);
    let deviance_at_mean = deviance(data, &samples.posterior_mean()?)?;
    let p_d = mean_deviance - deviance_at_mean;
    Ok(Dic {
        dic: mean_deviance + p_d,
        p_d,
        mean_deviance,
        deviance_at_mean,
    })
}

/// Moran's I with binary weights on centred values.
pub fn morans_i(values: &[f64], adj: &AdjacencyStructure) -> Result<f64> {
    if values.len() != adj.n() {
        return Err(Error::DimensionMismatch { expected: adj.n(), got: values.len() });
    }
    let m = mean(values);
    let z: Vec<f64> = values.iter().map(|v| v - m).collect();
    let denom: f64 = z.iter().map(|v| v * v).sum();
    let scale = values.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    if denom <= (1e-12 * scale).powi(2) * values.len() as f64 || adj.n_edges() == 0 {
        return Err(Error::ConstantResiduals);
    }
    Ok(moran_with_centred(&z, denom, adj))
}

fn moran_with_centred(z: &[f64], denom: f64, adj: &AdjacencyStructure) -> f64 {
    let cross: f64 = adj.edges().iter().map(|&(a, b)| z[a] * z[b]).sum();
    // Each edge appears twice in W, so Σw = 2|E| and zᵀWz = 2·cross.
    (z.len() as f64 / (2.0 * adj.n_edges() as f64)) * (2.0 * cross) / denom
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoranTest {
    pub statistic: f64,
    pub p_value: f64,
    pub permutations: usize,
}

/// Two-sided permutation test; the observed statistic is counted in the
/// reference set. Permutations run in parallel chunks, each on its own
/// substream of `seed`.
pub fn morans_i_test(residuals: &[f64], adj: &AdjacencyStructure, n_perm: usize, seed: u64) -> Result<MoranTest> {
    if n_perm == 0 {
        return Err(Error::Invalid("at least one permutation is required".into()));
    }
    let statistic = morans_i(residuals, adj)?;
    let m = mean(residuals);
    let z: Vec<f64> = residuals.iter().map(|v| v - m).collect();
    let denom: f64 = z.iter().map(|v| v * v).sum();
    let threshold = statistic.abs() * (1.0 - 1e-12);
    let n_chunks = n_perm.div_ceil(PERMUTATION_CHUNK);
    let exceed: usize = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = substream(seed, "permutation", c as u64);
            let mut perm = z.clone();
            let count = PERMUTATION_CHUNK.min(n_perm - c * PERMUTATION_CHUNK);
            (0..count)
                .filter(|_| {
                    perm.shuffle(&mut rng);
                    moran_with_centred(&perm, denom, adj).abs() >= threshold
                })
                .count()
        })
        .sum();
    Ok(MoranTest {
        statistic,
        p_value: (exceed + 1) as f64 / (n_perm + 1) as f64,
        permutations: n_perm,
    })
}

/// `(Y − μ)/√μ`.
pub fn pearson_residuals(data: &Dataset, fitted: &[f64]) -> Result<Vec<f64>> {
    if fitted.len() != data.n() {
        return Err(Error::DimensionMismatch { expected: data.n(), got: fitted.len() });
    }
    Ok(data
        .y()
        .iter()
        .zip(fitted)
        .map(|(&y, &mu)| (y as f64 - mu) / mu.sqrt())
        .collect())
}

/// Posterior mean of the fitted counts `E_k R_k`.
pub fn posterior_fitted(samples: &PosteriorSamples, data: &Dataset) -> Result<Vec<f64>> {
    let total = samples.n_draws();
    if total == 0 {
        return Err(Error::EmptyTrace);
    }
    let mut acc = vec![0.0; data.n()];
    for ch in &samples.chains {
        for i in 0..ch.len() {
            let fitted = ch.state(i).fitted(data);
            acc.iter_mut().zip(fitted).for_each(|(a, f)| *a += f);
        }
    }
    acc.iter_mut().for_each(|a| *a /= total as f64);
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeRisk {
    pub covariate: String,
    /// Covariate increment, in original units, that the ratio refers to.
    pub increment: f64,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

/// `exp(β_c)` summarised by its median and central 95% interval for every
/// non-intercept coefficient. Covariates are standardised, so one unit of
/// `β_c` is one standard deviation (`increment`) of the raw covariate.
pub fn relative_risks(samples: &PosteriorSamples, data: &Dataset) -> Result<Vec<RelativeRisk>> {
    if samples.n_draws() == 0 {
        return Err(Error::EmptyTrace);
    }
    let names = data.standardisation();
    (1..data.n_coef())
        .map(|c| {
            let draws = samples.beta_draws(c);
            let (covariate, increment) = names
                .get(c - 1)
                .map(|s| (s.name.clone(), s.sd))
                .unwrap_or_else(|| (format!("x{c}"), 1.0));
            Ok(RelativeRisk {
                covariate,
                increment,
                median: quantile(&draws, 0.5).exp(),
                lower: quantile(&draws, 0.025).exp(),
                upper: quantile(&draws, 0.975).exp(),
            })
        })
        .collect()
}

pub fn rmse(truth: &[f64], estimates: &[f64]) -> Result<f64> {
    if truth.len() != estimates.len() {
        return Err(Error::DimensionMismatch { expected: truth.len(), got: estimates.len() });
    }
    if truth.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let mse = truth.iter().zip(estimates).map(|(t, e)| (t - e).powi(2)).sum::<f64>() / truth.len() as f64;
    Ok(mse.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    pub rmse: f64,
    pub lower: f64,
    pub upper: f64,
}

/// RMSE of scalar estimates with a percentile bootstrap interval over
/// resampled replicates.
pub fn rmse_report(truth: &[f64], estimates: &[f64], n_boot: usize, seed: u64) -> Result<RmseReport> {
    if truth.len() != estimates.len() {
        return Err(Error::DimensionMismatch { expected: truth.len(), got: estimates.len() });
    }
    let t: Vec<Vec<f64>> = truth.iter().map(|&v| vec![v]).collect();
    let e: Vec<Vec<f64>> = estimates.iter().map(|&v| vec![v]).collect();
    rmse_report_grouped(&t, &e, n_boot, seed)
}

/// RMSE pooled over all elements of all replicates; the bootstrap resamples
/// whole replicates.
pub fn rmse_report_grouped(truth: &[Vec<f64>], estimates: &[Vec<f64>], n_boot: usize, seed: u64) -> Result<RmseReport> {
    if truth.len() != estimates.len() {
        return Err(Error::DimensionMismatch { expected: truth.len(), got: estimates.len() });
    }
    if truth.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let mut sse = Vec::with_capacity(truth.len());
    let mut counts = Vec::with_capacity(truth.len());
    for (t, e) in truth.iter().zip(estimates) {
        if t.len() != e.len() {
            return Err(Error::DimensionMismatch { expected: t.len(), got: e.len() });
        }
        sse.push(t.iter().zip(e).map(|(a, b)| (a - b).powi(2)).sum::<f64>());
        counts.push(t.len() as f64);
    }
    let pooled = |idx: &mut dyn Iterator<Item = usize>| {
        let (s, c) = idx.fold((0.0, 0.0), |(s, c), i| (s + sse[i], c + counts[i]));
        (s / c).sqrt()
    };
    let value = pooled(&mut (0..sse.len()));
    if n_boot == 0 {
        return Ok(RmseReport { rmse: value, lower: value, upper: value });
    }
    let m = sse.len();
    let boot: Vec<f64> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(seed, "bootstrap", b as u64);
            pooled(&mut (0..m).map(|_| rng.random_range(0..m)))
        })
        .collect();
    Ok(RmseReport {
        rmse: value,
        lower: quantile_inverted_cdf(&boot, 0.025),
        upper: quantile_inverted_cdf(&boot, 0.975),
    })
}

/// Pearson χ² over residual degrees of freedom for the covariate-only
/// Poisson GLM.
pub fn overdispersion(data: &Dataset) -> Result<f64> {
    let fit = fit_poisson_glm(data)?;
    let resid = pearson_residuals(data, &fit.fitted)?;
    let dof = data.n() as f64 - data.n_coef() as f64;
    if dof <= 0.0 {
        return Err(Error::Invalid("no residual degrees of freedom".into()));
    }
    Ok(resid.iter().map(|r| r * r).sum::<f64>() / dof)
}

/// Histogram densities over the number of edges removed, `0..=N_W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgesRemovedDensity {
    pub per_chain: Vec<Vec<f64>>,
    pub pooled: Vec<f64>,
    /// Central 95% interval of the pooled draws.
    pub lower: usize,
    pub upper: usize,
}

pub fn edges_removed_density(samples: &PosteriorSamples) -> Result<EdgesRemovedDensity> {
    let bins = samples.n_edges + 1;
    let mut per_chain = Vec::with_capacity(samples.chains.len());
    let mut all = Vec::new();
    for c in 0..samples.chains.len() {
        let removed = samples.edges_removed(c);
        if removed.is_empty() {
            return Err(Error::EmptyTrace);
        }
        let mut hist = vec![0.0; bins];
        for &r in &removed {
            hist[r] += 1.0;
        }
        hist.iter_mut().for_each(|h| *h /= removed.len() as f64);
        per_chain.push(hist);
        all.extend(removed.into_iter().map(|r| r as f64));
    }
    if per_chain.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let pooled = (0..bins)
        .map(|b| per_chain.iter().map(|h| h[b]).sum::<f64>() / per_chain.len() as f64)
        .collect();
    Ok(EdgesRemovedDensity {
        per_chain,
        pooled,
        lower: quantile_inverted_cdf(&all, 0.025) as usize,
        upper: quantile_inverted_cdf(&all, 0.975) as usize,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub model: String,
    pub dic: Dic,
    /// Moran's I of Pearson residuals at the posterior mean fitted values.
    pub morans_i: MoranTest,
    pub relative_risks: Vec<RelativeRisk>,
    pub overdispersion: Option<f64>,
    pub edges_removed: Option<EdgesRemovedDensity>,
    pub residual_type: String,
}

pub fn summarise(
    samples: &PosteriorSamples,
    data: &Dataset,
    adj: &AdjacencyStructure,
    n_perm: usize,
    seed: u64,
) -> Result<FitSummary> {
    let fitted = posterior_fitted(samples, data)?;
    let resid = pearson_residuals(data, &fitted)?;
    Ok(FitSummary {
        model: samples.model.to_string(),
        dic: dic(samples, data)?,
        morans_i: morans_i_test(&resid, adj, n_perm, seed)?,
        relative_risks: relative_risks(samples, data)?,
        overdispersion: overdispersion(data).ok(),
        edges_removed: if samples.model == crate::model::ModelKind::Lcar {
            Some(edges_removed_density(samples)?)
        } else {
            None
        },
        residual_type: "pearson_at_posterior_mean".into(),
    })
}
