use chafee_exit::exit::{ExitCause, ExitRecord};
use chafee_exit::stats::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

fn record(seed_id: u64, epsilon: f64, tau: f64, rate: f64, cause: ExitCause) -> ExitRecord {
    ExitRecord { seed_id, epsilon, tau, normalized_tau: rate * tau, n_large_jumps: 1, cause }
}

#[test]
fn laplace_examples() {
    assert_eq!(laplace_estimate(&[0.1, 4.0, 9.0], 0.0).unwrap().value, 1.0);
    let e = laplace_estimate(&[1.0, 1.0], 1.0).unwrap();
    assert!((e.value - (-1.0f64).exp()).abs() < 1e-15);
    assert!((e.value - 0.36788).abs() < 1e-5);
    assert_eq!(laplace_estimate(&[], 0.5), Err(StatsError::Empty));
    assert_eq!(laplace_estimate(&[1.0], -1.5), Err(StatsError::Theta(-1.5)));
}

#[test]
fn ks_examples() {
    assert!((ks_exponential(&[2f64.ln()]).unwrap() - 0.5).abs() < 1e-15);
    let n = 1000;
    let quantiles: Vec<f64> = (1..=n).map(|i| -(1.0 - (i as f64 - 0.5) / n as f64).ln()).collect();
    assert!(ks_exponential(&quantiles).unwrap() <= 1.0 / (2.0 * n as f64) + 1e-12);
    assert_eq!(ks_exponential(&[0.0; 7]).unwrap(), 1.0);
    assert_eq!(ks_exponential(&[]), Err(StatsError::Empty));
}

#[test]
fn power_law_examples() {
    let grid = [0.25f64, 0.125, 0.0625, 0.03125];
    let exact: Vec<(f64, f64)> = grid.iter().map(|&e| (e, e.powf(-1.5))).collect();
    let fit = fit_power_law(&exact).unwrap();
    assert!((fit.slope + 1.5).abs() < 1e-12);
    assert!((fit.r_squared - 1.0).abs() < 1e-12);
    for c in [1e-3, 0.5, 42.0] {
        let pts: Vec<(f64, f64)> = grid.iter().map(|&e| (e, c * e.powf(-0.8))).collect();
        assert!((fit_power_law(&pts).unwrap().slope + 0.8).abs() < 1e-12);
    }
    assert!(matches!(fit_power_law(&exact[..2]), Err(StatsError::TooFewPoints { .. })));
    assert!(matches!(fit_power_law(&[(0.1, 1.0), (-0.2, 1.0), (0.3, 1.0)]), Err(StatsError::NonPositive(_))));
}

#[test]
fn ks_statistic_is_consistent_for_exponential_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = 25;
    let below = (0..1000)
        .filter(|_| {
            let xs: Vec<f64> = (0..n).map(|_| Exp1.sample(&mut rng)).collect();
            ks_exponential(&xs).unwrap() * (n as f64).sqrt() < 1.63
        })
        .count();
    assert!(below >= 990, "{below} of 1000");
}

#[test]
fn summary_excludes_censored_records() {
    let rate = 0.5;
    let records = vec![
        record(0, 0.1, 2.0, rate, ExitCause::LargeJump),
        record(1, 0.1, 4.0, rate, ExitCause::DriftOrSmallNoise),
        record(2, 0.1, 100.0, rate, ExitCause::Censored),
        record(3, 0.05, 8.0, rate, ExitCause::LargeJump),
    ];
    let s = EnsembleSummary::from_records(&records, &[0.1, 0.05, 0.025], &[1.0]).unwrap();
    assert_eq!(s.per_epsilon.len(), 3);
    let g = &s.per_epsilon[0];
    assert_eq!(g.epsilon, 0.1);
    assert_eq!((g.n, g.n_censored), (3, 1));
    assert!((g.censor_fraction - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(g.mean_tau.unwrap().value, 3.0);
    assert_eq!(g.rate, Some(rate));
    assert_eq!(g.large_jump_fraction, Some(0.5));
    let expected = 0.5 * ((-1.0f64).exp() + (-2.0f64).exp());
    assert!((g.laplace[0].1.value - expected).abs() < 1e-15);
    let empty = &s.per_epsilon[2];
    assert_eq!((empty.n, empty.mean_tau, empty.ks), (0, None, None));
    assert!(empty.laplace.is_empty());
    let table = s.to_table();
    assert!(table.starts_with("epsilon,n,censor_fraction,mean_tau,mean_tau_se,rate,ks,laplace_1\n"));
    assert_eq!(table.lines().count(), 4);
    assert!(s.to_text().contains("group.1.n = 1"));
}

#[test]
fn empty_summary() {
    let s = EnsembleSummary::from_records(&[], &[], &[0.5]).unwrap();
    assert!(s.per_epsilon.is_empty());
    assert!(s.power_law().is_err());
    assert_eq!(s.to_text(), "groups = 0\n");
}

fn samples() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..20.0, 1..60)
}

proptest! {
    #[test]
    fn laplace_is_non_increasing_in_theta(xs in samples(), a in -0.99f64..5.0, b in -0.99f64..5.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(laplace_estimate(&xs, hi).unwrap().value <= laplace_estimate(&xs, lo).unwrap().value);
    }

    #[test]
    fn ks_lies_in_unit_interval(xs in samples()) {
        let d = ks_exponential(&xs).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn normalized_statistics_are_scale_equivariant(taus in samples(), k in -8i32..8, rate in 0.01f64..10.0) {
        let c = 2f64.powi(k);
        let base: Vec<ExitRecord> = taus.iter().enumerate()
            .map(|(i, &t)| record(i as u64, 0.1, t, rate, ExitCause::LargeJump)).collect();
        let scaled: Vec<ExitRecord> = taus.iter().enumerate()
            .map(|(i, &t)| record(i as u64, 0.1, c * t, rate / c, ExitCause::LargeJump)).collect();
        let a = EnsembleSummary::from_records(&base, &[0.1], &[0.5, 1.0, 2.0]).unwrap();
        let b = EnsembleSummary::from_records(&scaled, &[0.1], &[0.5, 1.0, 2.0]).unwrap();
        let (a, b) = (&a.per_epsilon[0], &b.per_epsilon[0]);
        prop_assert_eq!(a.ks.map(f64::to_bits), b.ks.map(f64::to_bits));
        for (x, y) in a.laplace.iter().zip(&b.laplace) {
            prop_assert_eq!(x.1.value.to_bits(), y.1.value.to_bits());
            prop_assert_eq!(x.1.std_err.to_bits(), y.1.std_err.to_bits());
        }
        if let (Some(x), Some(y)) = (a.mean_tau, b.mean_tau) {
            prop_assert_eq!((c * x.value).to_bits(), y.value.to_bits());
        }
    }

    #[test]
    fn jackknife_error_equals_classical_error(xs in prop::collection::vec(-50.0f64..50.0, 2..80)) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let s2 = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        let est = jackknife_mean(&xs).unwrap();
        prop_assert!((est.std_err - (s2 / n).sqrt()).abs() <= 1e-9 * (1.0 + (s2 / n).sqrt()));
    }
}
