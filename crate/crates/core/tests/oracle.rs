use cbb_core::oracle::{
    backdoor, empirical_conditional, frontdoor, interventional_truth, observational,
    sample_dataset, Dist, Regime, Scm,
};

/// `P(Y | X = x)` straight from Bayes' rule on the structural tables,
/// without building a joint: `P(x, y) / P(x)` with
/// `P(x, y) = sum_z P(z) P(x|z) sum_m P(m|x) P(y|m,z)`.
fn bayes_conditional(scm: &Scm, x: usize) -> Vec<f64> {
    let mut pxy = vec![0.0; scm.card_y()];
    let mut px = 0.0;
    for z in 0..scm.card_z() {
        let pzx = scm.p_z()[z] * scm.p_x_given_z(z)[x];
        px += pzx;
        for m in 0..scm.card_m() {
            for (y, v) in pxy.iter_mut().enumerate() {
                *v += pzx * scm.p_m_given_x(x)[m] * scm.p_y_given_m_z(m, z)[y];
            }
        }
    }
    pxy.into_iter().map(|v| v / px).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max)
}

#[test]
fn observational_matches_bayes_oracle() {
    for seed in 0..200 {
        let scm = Scm::random_any(seed);
        for x in 0..scm.card_x() {
            let obs = observational(&scm, x).unwrap();
            let d = max_diff(obs.probs(), &bayes_conditional(&scm, x));
            assert!(d < 1e-12, "seed {seed} x {x}: {d:e}");
        }
    }
}

#[test]
fn adjustments_agree_with_mutilated_graph() {
    let mut worst = 0.0f64;
    let mut max_gap = 0.0f64;
    for seed in 0..500 {
        let scm = Scm::random_any(seed);
        for x in 0..scm.card_x() {
            let truth = interventional_truth(&scm, x).unwrap();
            let bd = backdoor(&scm, x).unwrap();
            let fd = frontdoor(&scm, x).unwrap();
            worst = worst
                .max(bd.max_abs_diff(&truth))
                .max(fd.max_abs_diff(&truth));
            max_gap = max_gap.max(observational(&scm, x).unwrap().tv(&truth));
        }
    }
    assert!(worst < 1e-12, "max deviation {worst:e}");
    assert!(max_gap > 0.05, "largest confounding gap only {max_gap}");
}

#[test]
fn all_outputs_are_distributions() {
    for seed in 0..100 {
        let scm = Scm::random_any(seed);
        for x in 0..scm.card_x() {
            for d in [
                observational(&scm, x).unwrap(),
                backdoor(&scm, x).unwrap(),
                frontdoor(&scm, x).unwrap(),
                interventional_truth(&scm, x).unwrap(),
            ] {
                assert!(d.probs().iter().all(|&p| p >= 0.0));
                assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert_eq!(d.len(), scm.card_y());
            }
        }
    }
}

#[test]
fn near_identity_mediator_recovers_do_distribution() {
    // M copies X up to 1% noise and Y depends strongly on Z given M.
    let scm = Scm::confounded_binary(0.1, 0.01, 0.4).unwrap();
    for x in 0..2 {
        let truth = interventional_truth(&scm, x).unwrap();
        let fd = frontdoor(&scm, x).unwrap();
        assert!(fd.max_abs_diff(&truth) < 1e-12);
        assert!(observational(&scm, x).unwrap().tv(&truth) > 0.05);
    }
}

#[test]
fn grid_search_finds_strong_confounding() {
    let mut best: Option<(f64, [f64; 3])> = None;
    for leak in [0.05, 0.1, 0.2, 0.3, 0.4] {
        for noise in [0.02, 0.05, 0.1] {
            for z_effect in [0.1, 0.2, 0.3, 0.4] {
                let scm = Scm::confounded_binary(leak, noise, z_effect).unwrap();
                let tv = (0..2)
                    .map(|x| {
                        observational(&scm, x)
                            .unwrap()
                            .tv(&frontdoor(&scm, x).unwrap())
                    })
                    .fold(0.0, f64::max);
                if best.is_none_or(|(b, _)| tv > b) {
                    best = Some((tv, [leak, noise, z_effect]));
                }
            }
        }
    }
    let (tv, params) = best.unwrap();
    assert!(tv > 0.05, "best TV {tv} at {params:?}");
    // The fixture the CLI reports on sits well inside the region.
    let fixture = Scm::confounded_binary(0.1, 0.05, 0.4).unwrap();
    let gap = observational(&fixture, 1)
        .unwrap()
        .tv(&frontdoor(&fixture, 1).unwrap());
    assert!(gap > 0.05, "fixture gap {gap}");
}

#[test]
fn scm_json_fixture_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scm.json");
    let scm = Scm::random([3, 2, 4, 3], 5).unwrap();
    std::fs::write(&path, serde_json::to_vec_pretty(&scm).unwrap()).unwrap();
    let back: Scm = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    for x in 0..2 {
        assert_eq!(frontdoor(&scm, x).unwrap(), frontdoor(&back, x).unwrap());
    }
}

/// Every `P(Y = y | X = x)` cell within 3 binomial standard errors of
/// `expected(x)`.
fn within_three_se(scm: &Scm, regime: Regime, seed: u64, expected: impl Fn(usize) -> Dist) {
    let n = 100_000;
    let samples = sample_dataset(scm, n, regime, seed).unwrap();
    for x in 0..scm.card_x() {
        let (freq, nx) = empirical_conditional(&samples, x, scm.card_y());
        assert!(nx > 100, "too few samples for x = {x}");
        let want = expected(x);
        for (y, (&f, &p)) in freq.iter().zip(want.probs()).enumerate() {
            let se = (p * (1.0 - p) / nx as f64).sqrt();
            assert!(
                (f - p).abs() <= 3.0 * se,
                "{regime:?} x {x} y {y}: empirical {f} vs {p} (se {se:e})"
            );
        }
    }
}

#[test]
fn sampler_matches_observational_oracle() {
    let scm = Scm::random([3, 3, 3, 3], 11).unwrap();
    within_three_se(&scm, Regime::Observational, 2024, |x| {
        observational(&scm, x).unwrap()
    });
}

#[test]
fn sampler_matches_interventional_oracle() {
    let scm = Scm::confounded_binary(0.1, 0.05, 0.4).unwrap();
    within_three_se(&scm, Regime::Interventional, 7, |x| {
        interventional_truth(&scm, x).unwrap()
    });
}

#[test]
fn sampler_marginals_match() {
    let scm = Scm::random([4, 3, 2, 2], 3).unwrap();
    let n = 100_000;
    let samples = sample_dataset(&scm, n, Regime::Observational, 99).unwrap();
    for z in 0..4 {
        let p = scm.p_z()[z];
        let f = samples.iter().filter(|s| s.z == z).count() as f64 / n as f64;
        assert!((f - p).abs() <= 3.0 * (p * (1.0 - p) / n as f64).sqrt());
    }
}
