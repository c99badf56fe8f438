//! Dense oracles and shared checks for the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use lcar_core::graph::{AdjacencyStructure, CandidateSequence};
use lcar_core::model::{ChainState, Dataset, ModelKind};
use lcar_core::precision::precompute_logdets;
use lcar_core::rng::{substream, StreamRng};
use lcar_core::sampler::{windowed_move, AdaptationSettings, Chain, FrozenBlocks, PriorSettings, SamplerConfig};
use lcar_core::stats::{batch_means_se, chi_square_uniform, mean, variance};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

/// `Ok(detail)` on success, `Err(detail)` on failure.
pub type Check = Result<String, String>;

pub fn sequence(adj: AdjacencyStructure, order: Vec<usize>, eps: f64) -> CandidateSequence {
    let mut seq = CandidateSequence::new(Arc::new(adj), order).unwrap();
    precompute_logdets(&mut seq, eps).unwrap();
    seq
}

/// Random graph on `n` units with each pair joined with probability `p`,
/// retried until it has at least one edge.
pub fn random_graph(rng: &mut StreamRng, n: usize, p: f64) -> AdjacencyStructure {
    loop {
        let mut pairs = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                if rng.random::<f64>() < p {
                    pairs.push((a, b));
                }
            }
        }
        if !pairs.is_empty() {
            return AdjacencyStructure::new(n, pairs).unwrap();
        }
    }
}

pub fn random_order(rng: &mut StreamRng, n_edges: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_edges).collect();
    order.shuffle(rng);
    order
}

/// `diag(W̃𝟏) − W̃ + εI` over units and the global node, built from scratch
/// from the list of active edges.
pub fn dense_precision(adj: &AdjacencyStructure, active: &[bool], eps: f64) -> DMatrix<f64> {
    let n = adj.n();
    let mut q = DMatrix::zeros(n + 1, n + 1);
    let mut lost = vec![false; n];
    for (e, &(a, b)) in adj.edges().iter().enumerate() {
        if active[e] {
            q[(a, b)] -= 1.0;
            q[(b, a)] -= 1.0;
            q[(a, a)] += 1.0;
            q[(b, b)] += 1.0;
        } else {
            lost[a] = true;
            lost[b] = true;
        }
    }
    for k in 0..n {
        if lost[k] {
            q[(k, n)] -= 1.0;
            q[(n, k)] -= 1.0;
            q[(k, k)] += 1.0;
            q[(n, n)] += 1.0;
        }
    }
    for i in 0..=n {
        q[(i, i)] += eps;
    }
    q
}

/// Unit block of [`dense_precision`].
pub fn dense_sub_precision(adj: &AdjacencyStructure, active: &[bool], eps: f64) -> DMatrix<f64> {
    let n = adj.n();
    dense_precision(adj, active, eps).view((0, 0), (n, n)).into_owned()
}

pub fn active_for(order: &[usize], n_edges: usize, j: usize) -> Vec<bool> {
    let mut active = vec![true; n_edges];
    for &e in &order[..n_edges - j] {
        active[e] = false;
    }
    active
}

pub fn eigen_logdet(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.iter().map(|v| v.ln()).sum()
}

/// Greedy elimination that refactorises the dense unit precision for every
/// trial edge. Estimates come from the current state, `β̂` uses the pooled
/// log-SIR divided by `n`, and ties go to the smallest edge index.
pub fn naive_elicit(adj: &AdjacencyStructure, phi: &[Vec<f64>], x: &DMatrix<f64>, eps: f64) -> Vec<usize> {
    let n = adj.n();
    let r = phi.len();
    let mut active = vec![true; adj.n_edges()];
    let mut order = Vec::new();
    let pooled = DVector::from_fn(n, |k, _| phi.iter().map(|p| p[k]).sum::<f64>() / n as f64);
    while order.len() < adj.n_edges() {
        let q = dense_sub_precision(adj, &active, eps);
        let xtq = x.transpose() * &q;
        let beta = (&xtq * x).cholesky().unwrap().solve(&(&xtq * &pooled));
        let fit = x * beta;
        let res: Vec<DVector<f64>> = phi.iter().map(|p| DVector::from_column_slice(p) - &fit).collect();
        let quad: f64 = res.iter().map(|v| (v.transpose() * &q * v)[(0, 0)]).sum();
        let tau2 = (quad / (n * r) as f64).max(1e-12);

        let mut scores: Vec<(usize, f64)> = Vec::new();
        for e in 0..adj.n_edges() {
            if !active[e] {
                continue;
            }
            let mut trial = active.clone();
            trial[e] = false;
            let qt = dense_sub_precision(adj, &trial, eps);
            let logdet = 2.0 * qt.clone().cholesky().unwrap().l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let quad: f64 = res.iter().map(|v| (v.transpose() * &qt * v)[(0, 0)]).sum();
            let ll = 0.5 * r as f64 * logdet - 0.5 * (n * r) as f64 * tau2.ln() - quad / (2.0 * tau2);
            scores.push((e, ll));
        }
        let best = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        let tol = 1e-9 * best.abs().max(1.0);
        let pick = scores.iter().filter(|s| s.1 >= best - tol).map(|s| s.0).min().unwrap();
        active[pick] = false;
        order.push(pick);
    }
    order
}

/// Prior-only sampling on a 2×2 lattice: means and second moments of
/// `(φ, φ*)` against the dense `τ²Q⁻¹`, within 3 batch-means standard errors.
pub fn prior_moment_check() -> Check {
    let eps = 0.1;
    let tau2 = 0.5;
    let j = 2;
    let adj = AdjacencyStructure::lattice(2, 2).unwrap();
    let seq = sequence(adj.clone(), vec![3, 0, 2, 1], eps);
    let data = Dataset::new(vec![1; 4], vec![1.0; 4], DMatrix::from_element(4, 1, 1.0)).unwrap();
    let cfg = SamplerConfig {
        epsilon: eps,
        use_likelihood: false,
        frozen: FrozenBlocks { beta: true, tau2: true, candidate: true, phi: false },
        ..Default::default()
    };
    let state = ChainState {
        beta: vec![0.0],
        tau2,
        phi: vec![0.0; 4],
        phi_star: 0.0,
        candidate_j: j,
        theta: vec![],
        sigma2: f64::NAN,
    };
    let mut chain = Chain::with_state(&data, &adj, Some(&seq), ModelKind::Lcar, &cfg, state, substream(5, "chain", 0)).unwrap();
    chain.set_adapting(true);
    for _ in 0..5000 {
        chain.sweep().unwrap();
    }
    chain.set_adapting(false);
    let n_iter = 200_000;
    let mut draws: Vec<[f64; 5]> = Vec::with_capacity(n_iter);
    for _ in 0..n_iter {
        chain.sweep().unwrap();
        let s = chain.state();
        draws.push([s.phi[0], s.phi[1], s.phi[2], s.phi[3], s.phi_star]);
    }
    let cov = dense_precision(&adj, &active_for(&[3, 0, 2, 1], 4, j), eps).try_inverse().unwrap() * tau2;
    let mut worst: f64 = 0.0;
    for a in 0..5 {
        let xs: Vec<f64> = draws.iter().map(|d| d[a]).collect();
        let z = mean(&xs).abs() / batch_means_se(&xs, 50);
        if z >= 3.0 {
            return Err(format!("mean of component {a} is {z:.2} SE from 0"));
        }
        worst = worst.max(z);
        for b in a..5 {
            let prod: Vec<f64> = draws.iter().map(|d| d[a] * d[b]).collect();
            let z = (mean(&prod) - cov[(a, b)]).abs() / batch_means_se(&prod, 50);
            if z >= 3.0 {
                return Err(format!("second moment ({a},{b}) is {z:.2} SE from {:.4}", cov[(a, b)]));
            }
            worst = worst.max(z);
        }
    }
    Ok(format!("20 moments, largest deviation {worst:.2} SE"))
}

/// Windowed candidate move under a constant target: thinned occupancy of
/// `0..=N_W` against the uniform law by a χ² test at the 1% level.
pub fn flat_target_uniformity_check() -> Check {
    let n_edges = 12;
    let q = 3;
    let thin = 20;
    let kept = 20_000;
    let mut rng = substream(17, "flat", 0);
    let mut j = 0;
    let mut counts = vec![0u64; n_edges + 1];
    for i in 0..kept * thin {
        j = windowed_move(j, n_edges, q, 0.0, |_| 0.0, &mut rng).0;
        if i % thin == thin - 1 {
            counts[j] += 1;
        }
    }
    let (stat, p) = chi_square_uniform(&counts);
    let detail = format!("χ² = {stat:.2} on {} df, p = {p:.3}", n_edges);
    if p > 0.01 { Ok(detail) } else { Err(detail) }
}

fn geweke_features(s: &ChainState) -> [f64; 6] {
    let j = s.candidate_j as f64;
    [s.beta[0], s.beta[1], s.tau2, j, s.beta[1] * s.beta[1], j * j]
}

/// Marginal-conditional simulator (prior draws, then data) against the
/// successive-conditional simulator (data given parameters, then one sweep)
/// on the first two moments of `β`, `τ²` and `j` on a 2×3 lattice.
pub fn geweke_check() -> Check {
    let eps = 0.5;
    let adj = AdjacencyStructure::lattice(2, 3).unwrap();
    let n_w = adj.n_edges();
    let order = vec![6, 1, 4, 0, 3, 5, 2];
    let seq = sequence(adj.clone(), order.clone(), eps);
    let n = 6;
    let x = DMatrix::from_fn(n, 2, |k, c| if c == 0 { 1.0 } else { [-1.0, -0.4, 0.2, 0.5, 0.9, -0.2][k] });
    let e = vec![4.0; n];
    let priors = PriorSettings { beta_variance: 0.25, tau2_max: 1.0, sigma2_max: 1.0 };
    let names = ["beta0", "beta1", "tau2", "j", "beta1^2", "j^2"];
    let chols: Vec<DMatrix<f64>> = (0..=n_w)
        .map(|j| {
            let cov = dense_precision(&adj, &active_for(&order, n_w, j), eps).try_inverse().unwrap();
            cov.cholesky().unwrap().l()
        })
        .collect();

    let draw_prior = |rng: &mut StreamRng| -> ChainState {
        let beta: Vec<f64> = (0..2).map(|_| priors.beta_variance.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
        let tau2 = priors.tau2_max * (1.0 - rng.random::<f64>());
        let j = rng.random_range(0..=n_w);
        let z = DVector::from_iterator(n + 1, (0..n + 1).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let phi = &chols[j] * z * tau2.sqrt();
        ChainState {
            beta,
            tau2,
            phi: phi.rows(0, n).iter().copied().collect(),
            phi_star: phi[n],
            candidate_j: j,
            theta: vec![],
            sigma2: f64::NAN,
        }
    };
    let draw_y = |s: &ChainState, rng: &mut StreamRng| -> Vec<u64> {
        (0..n)
            .map(|k| {
                let eta = s.beta[0] + s.beta[1] * x[(k, 1)] + s.phi[k];
                Poisson::new(e[k] * eta.exp()).unwrap().sample(rng) as u64
            })
            .collect()
    };

    let mut rng = substream(99, "geweke", 0);
    let n_mc = 100_000;
    let mc: Vec<[f64; 6]> = (0..n_mc).map(|_| geweke_features(&draw_prior(&mut rng))).collect();

    let start = draw_prior(&mut rng);
    let y0 = draw_y(&start, &mut rng);
    let data = Dataset::new(y0, e.clone(), x.clone()).unwrap();
    let cfg = SamplerConfig {
        epsilon: eps,
        q: 2,
        priors: priors.clone(),
        adaptation: AdaptationSettings { enabled: false, ..Default::default() },
        ..Default::default()
    };
    let mut chain = Chain::with_state(&data, &adj, Some(&seq), ModelKind::Lcar, &cfg, start, substream(99, "chain", 0)).unwrap();
    chain.set_adapting(false);
    let n_sc = 400_000;
    let mut sc: Vec<[f64; 6]> = Vec::with_capacity(n_sc);
    for _ in 0..n_sc {
        let s = chain.state().clone();
        let y = draw_y(&s, chain.rng());
        chain.set_observed(y).unwrap();
        chain.sweep().unwrap();
        sc.push(geweke_features(chain.state()));
    }

    let mut worst: f64 = 0.0;
    for f in 0..6 {
        let a: Vec<f64> = mc.iter().map(|v| v[f]).collect();
        let b: Vec<f64> = sc.iter().map(|v| v[f]).collect();
        let se = (variance(&a) / n_mc as f64 + batch_means_se(&b, 40).powi(2)).sqrt();
        let z = (mean(&a) - mean(&b)).abs() / se;
        if z >= 3.0 {
            return Err(format!("{}: {:.4} vs {:.4} ({z:.2} SE)", names[f], mean(&a), mean(&b)));
        }
        worst = worst.max(z);
    }
    Ok(format!("6 moments, largest deviation {worst:.2} SE"))
}
