use lcar_core::rng::substream;
use lcar_core::model::ModelKind;
use lcar_core::simgen::{
    calibrate_range, generate_replicate, lattice_centroids, matern_correlation, score_replicates, MaternField,
    MeanTemplate, ModelEstimate, ReplicateResult, SimGeometry, SimScenario,
};
use lcar_core::stats::{mean, median};
use lcar_core::Error;

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn matern_special_cases() {
    for &(d, r) in &[(0.1, 0.3), (0.7, 0.2), (2.0, 1.5)] {
        let x: f64 = d / r;
        assert!((matern_correlation(d, 0.5, r) - (-x).exp()).abs() < 1e-15);
        assert!((matern_correlation(d, 1.5, r) - (1.0 + x) * (-x).exp()).abs() < 1e-15);
        assert!((matern_correlation(d, 2.5, r) - (1.0 + x + x * x / 3.0) * (-x).exp()).abs() < 1e-14);
    }
    // ν = 1: x K₁(x), with K₁(1) and K₁(2) from standard tables
    assert!((matern_correlation(0.4, 1.0, 0.4) - 0.601_907_230_197_234_6).abs() < 1e-10);
    assert!((matern_correlation(0.8, 1.0, 0.4) - 2.0 * 0.139_865_881_816_522_4).abs() < 1e-10);
    assert_eq!(matern_correlation(0.0, 1.3, 0.5), 1.0);
}

#[test]
fn calibrated_range_has_median_correlation_one_half() {
    let pts = lattice_centroids(8, 8);
    let range = calibrate_range(&pts, 2.5, 0.5).unwrap();

    let mut d = Vec::new();
    for a in 0..pts.len() {
        for b in a + 1..pts.len() {
            d.push(((pts[a].0 - pts[b].0).powi(2) + (pts[a].1 - pts[b].1).powi(2)).sqrt());
        }
    }
    let corr = |r: f64| -> f64 {
        let c: Vec<f64> = d
            .iter()
            .map(|&v| {
                let x = v / r;
                (1.0 + x + x * x / 3.0) * (-x).exp()
            })
            .collect();
        median(&c)
    };
    let (mut lo, mut hi) = (0.01, 2.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if corr(mid) < 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    assert!((range - lo).abs() < 1e-6, "{range} vs {lo}");
    assert!((corr(range) - 0.5).abs() < 1e-6);
    assert!(matches!(calibrate_range(&pts, 2.5, 1.0), Err(Error::NoBracket { .. })));
}

#[test]
fn field_draws_reproduce_the_covariance() {
    let pts = vec![(0.0, 0.0), (0.1, 0.0), (0.3, 0.2), (0.9, 0.9), (0.5, 0.5)];
    let field = MaternField::new(&pts, 2.5, 0.25).unwrap();
    let mut rng = substream(6, "field", 0);
    let m = 40_000;
    let draws: Vec<Vec<f64>> = (0..m).map(|_| field.sample(&mut rng)).collect();
    for a in 0..5 {
        for b in a..5 {
            let emp = draws.iter().map(|v| v[a] * v[b]).sum::<f64>() / m as f64;
            let d = ((pts[a].0 - pts[b].0).powi(2) + (pts[a].1 - pts[b].1).powi(2)).sqrt();
            let want = matern_correlation(d, 2.5, 0.25);
            let se = ((1.0 + want * want) / m as f64).sqrt();
            assert!((emp - want).abs() < 4.0 * se, "({a},{b}) {emp} vs {want}");
        }
    }
}

#[test]
fn three_band_template_counts() {
    let t = MeanTemplate::three_band(8, 8);
    let count = |l: i8| t.labels().iter().filter(|&&v| v == l).count();
    assert_eq!((count(-1), count(0), count(1)), (24, 16, 24));
    assert!(MeanTemplate::new(vec![0, 2]).is_err());
}

#[test]
fn replicate_follows_the_generating_model() {
    let geo = SimGeometry::lattice(8).unwrap();
    let scenario = SimScenario { m: 1.5, ..Default::default() };
    let field = geo.field(&scenario).unwrap();
    let rep = generate_replicate(&scenario, &geo, &field, &mut substream(2, "rep", 0)).unwrap();
    let t = &rep.truth;
    for k in 0..64 {
        let want = 0.1 * t.covariate[k] + t.residual[k];
        assert!((t.log_risk[k] - want).abs() < 1e-12);
        let e = rep.data.e()[k];
        assert!((50.0..100.0).contains(&e));
        assert!((t.fitted[k] - e * t.log_risk[k].exp()).abs() < 1e-9 * t.fitted[k]);
        assert_eq!(rep.data.x()[(k, 1)], t.covariate[k]);
    }
    assert_eq!(rep.prior.len(), 3);
    assert!(rep.prior.iter().all(|p| p.expected == rep.data.e()));
}

#[test]
fn prior_log_sirs_track_the_true_log_risk() {
    let geo = SimGeometry::lattice(8).unwrap();
    let scenario = SimScenario { m: 1.0, e_range: (150.0, 250.0), ..Default::default() };
    let field = geo.field(&scenario).unwrap();
    for i in 0..5 {
        let rep = generate_replicate(&scenario, &geo, &field, &mut substream(10, "rep", i)).unwrap();
        for period in &rep.prior {
            let log_sir: Vec<f64> = period
                .observed
                .iter()
                .zip(&period.expected)
                .map(|(&o, &e)| ((o as f64).max(0.5) / e).ln())
                .collect();
            let r = pearson(&log_sir, &rep.truth.log_risk);
            assert!(r > 0.9, "replicate {i}: correlation {r}");
        }
    }
}

#[test]
fn short_range_fields_are_nearly_independent() {
    let pts = lattice_centroids(3, 3);
    let field = MaternField::new(&pts, 2.5, 1e-3).unwrap();
    let mut rng = substream(7, "field", 0);
    let m = 20_000;
    let draws: Vec<Vec<f64>> = (0..m).map(|_| field.sample(&mut rng)).collect();
    for a in 0..9 {
        for b in a + 1..9 {
            let c = draws.iter().map(|v| v[a] * v[b]).sum::<f64>() / m as f64;
            assert!(c.abs() < 4.0 / (m as f64).sqrt(), "({a},{b}) {c}");
        }
    }
}

#[test]
fn counts_are_unbiased_for_the_risk_surface() {
    let geo = SimGeometry::lattice(4).unwrap();
    let scenario = SimScenario { m: 1.0, ..Default::default() };
    let field = geo.field(&scenario).unwrap();
    let reps = 4000;
    let (mut ratio, mut risk) = (vec![0.0; 16], vec![0.0; 16]);
    let mut cross = Vec::new();
    for i in 0..reps {
        let rep = generate_replicate(&scenario, &geo, &field, &mut substream(8, "rep", i)).unwrap();
        for k in 0..16 {
            // Y/E − R has mean zero whatever R is
            ratio[k] += rep.data.y()[k] as f64 / rep.data.e()[k] - rep.truth.log_risk[k].exp();
            risk[k] += rep.truth.log_risk[k].exp();
        }
        let noise: Vec<f64> = (0..16)
            .map(|k| rep.truth.residual[k] - scenario.m * geo.template.labels()[k] as f64)
            .collect();
        cross.push(pearson(&rep.truth.covariate, &noise));
    }
    for k in 0..16 {
        let bias = ratio[k] / reps as f64;
        assert!(bias.abs() < 0.02 * risk[k] / reps as f64 + 0.01, "unit {k}: {bias}");
    }
    // covariate and residual fields are drawn independently
    assert!(mean(&cross).abs() < 0.02, "{}", mean(&cross));
}

#[test]
fn perfect_estimates_score_zero() {
    let scenario = SimScenario { n_replicates: 1, ..Default::default() };
    let truth = vec![12.5, 80.0, 47.25];
    let estimate = |model| ModelEstimate {
        model,
        beta_median: scenario.beta_true,
        beta_lower: 0.0,
        beta_upper: 0.2,
        fitted: truth.clone(),
        mean_edges_removed: None,
    };
    let reps = vec![ReplicateResult {
        index: 0,
        truth_fitted: truth.clone(),
        estimates: ModelKind::ALL.iter().map(|&m| estimate(m)).collect(),
    }];
    let scores = score_replicates(&scenario, &reps, &ModelKind::ALL, 100).unwrap();
    for s in scores {
        assert_eq!((s.beta.rmse, s.beta.lower, s.beta.upper), (0.0, 0.0, 0.0));
        assert_eq!((s.fitted.rmse, s.fitted.lower, s.fitted.upper), (0.0, 0.0, 0.0));
    }
}
