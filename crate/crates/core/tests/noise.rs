use chafee_exit::noise::*;
use chafee_exit::{Field, Model, Params};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Trapezoid rule in `ln r` for `int_a^b g(r) dr`.
fn log_quadrature(g: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let (la, lb) = (a.ln(), b.ln());
    let h = (lb - la) / n as f64;
    (0..=n)
        .map(|k| {
            let r = (la + k as f64 * h).exp();
            let w = if k == 0 || k == n { 0.5 } else { 1.0 };
            w * g(r) * r
        })
        .sum::<f64>()
        * h
}

#[test]
fn pareto_tail_ratio_matches_radial_density() {
    let alpha = 1.5;
    let spec = NoiseSpec::default_for(32, alpha).unwrap();
    let sc = ScalingParams::new(2f64.powi(-6), 0.75, 0.9).unwrap();
    let c = sc.jump_threshold();
    let density = |r: f64| alpha * r.powf(-alpha - 1.0);
    let expected = log_quadrature(density, 2.0 * c, c * 1e12, 200_000) / log_quadrature(density, c, c * 1e12, 200_000);
    assert!((expected - 2f64.powf(-alpha)).abs() < 1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100_000;
    let mut above = 0usize;
    for _ in 0..n {
        let w = sample_large_jump(&spec, &sc, &mut rng);
        let r = w.h_norm();
        assert!(r > c);
        above += (r > 2.0 * c) as usize;
    }
    let p = above as f64 / n as f64;
    let se = (expected * (1.0 - expected) / n as f64).sqrt();
    assert!((p - expected).abs() < 3.0 * se, "{p} vs {expected}");
}

#[test]
fn interjump_mean_matches_rate() {
    let spec = NoiseSpec::default_for(32, 1.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (beta, n) in
        [(2.0, 100_000usize), (large_jump_rate(&spec, &ScalingParams::new(2f64.powi(-6), 0.75, 0.9).unwrap()), 100_000)]
    {
        let xs: Vec<f64> = (0..n).map(|_| sample_interjump_time(beta, &mut rng).unwrap()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - 1.0 / beta).abs() < 3.0 * se, "beta {beta}: {mean}");
    }
}

#[test]
fn direction_signs_are_balanced() {
    let spec = NoiseSpec::default_for(32, 1.5).unwrap();
    let sc = ScalingParams::new(0.05, 0.75, 0.9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let n = 100_000;
    let plus = (0..n).filter(|_| sample_large_jump_parts(&spec, &sc, &mut rng).direction == 0).count();
    // two-sided binomial test at the 99% level
    let z = (plus as f64 - n as f64 / 2.0) / (n as f64 / 4.0).sqrt();
    assert!(z.abs() < 2.576, "z = {z}");
}

#[test]
fn large_jump_mean_vanishes() {
    let spec = NoiseSpec::default_for(32, 1.5).unwrap();
    let sc = ScalingParams::new(0.05, 0.75, 0.9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 100_000;
    let mut sum = Field::zeros(32);
    for _ in 0..n {
        sum += &sample_large_jump(&spec, &sc, &mut rng);
    }
    let mean_radius = 3.0 * sc.jump_threshold();
    for c in sum.coeffs() {
        assert!((c / n as f64).abs() < 0.05 * mean_radius);
    }
}

#[test]
fn small_increment_variance_matches_quadrature() {
    let alpha = 1.2;
    let spec = NoiseSpec::default_for(8, alpha).unwrap().with_r_min(0.05).unwrap();
    let sc = ScalingParams::new(0.1, 0.75, 0.5).unwrap();
    let dt = 0.01;
    let second_moment = log_quadrature(|r| r * r * alpha * r.powf(-alpha - 1.0), 0.05, sc.jump_threshold(), 20_000);
    // both mirror directions, weight 1/2 each, project onto v with coefficient +-r
    let expected = spec.total_weight() * second_moment * dt;
    let v = &spec.directions()[0].profile;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 100_000;
    let xs: Vec<f64> = (0..n).map(|_| sample_small_increment(&spec, &sc, dt, &mut rng).h_dot(v)).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
    let var = sq.iter().sum::<f64>() / n as f64;
    let var_se = (sq.iter().map(|s| (s - var).powi(2)).sum::<f64>() / (n - 1) as f64 / n as f64).sqrt();
    assert!((var - expected).abs() < 3.0 * var_se, "{var} vs {expected} (se {var_se})");
    assert!(mean.abs() < 4.0 * (var / n as f64).sqrt());
    assert_eq!(sample_small_increment(&spec, &sc, 0.0, &mut rng), Field::zeros(8));
}

#[test]
fn jump_counts_reconstruct_total_intensity() {
    let spec = NoiseSpec::default_for(8, 1.5).unwrap().with_r_min(0.2).unwrap();
    let sc = ScalingParams::new(0.1, 0.75, 0.5).unwrap();
    let horizon = 2000.0;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut small = Vec::new();
    sample_small_jumps(&spec, &sc, horizon, &mut rng, &mut small);
    let beta = large_jump_rate(&spec, &sc);
    let mut large = 0usize;
    let mut t = sample_interjump_time(beta, &mut rng).unwrap();
    while t <= horizon {
        large += 1;
        t += sample_interjump_time(beta, &mut rng).unwrap();
    }
    let total = (small.len() + large) as f64;
    let mean = spec.tail_mass(spec.r_min()) * horizon;
    assert!((mean - spec.total_weight() * 0.2f64.powf(-1.5) * horizon).abs() < 1e-9 * mean);
    assert!((total - mean).abs() < 3.0 * mean.sqrt(), "{total} vs {mean}");
    let c = 1.0;
    let above = small.iter().filter(|j| j.jump.radius > c).count() as f64;
    let expect = (spec.tail_mass(c) - beta) * horizon;
    assert!((above - expect).abs() < 3.0 * expect.sqrt(), "{above} vs {expect}");
}

#[test]
fn replay_is_bit_identical() {
    let spec = NoiseSpec::default_for(8, 1.5).unwrap();
    let sc = ScalingParams::new(0.1, 0.75, 0.5).unwrap();
    let draw = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut out = Vec::new();
        sample_small_jumps(&spec, &sc, 0.5, &mut rng, &mut out);
        let w = sample_large_jump(&spec, &sc, &mut rng);
        let t = sample_interjump_time(1.0, &mut rng).unwrap();
        (out, w, t)
    };
    assert_eq!(draw(), draw());
}

#[test]
fn convolution_of_single_jump_is_the_semigroup() {
    let model = Model::new(Params::default()).unwrap();
    let mut jump = Field::mode(32, 1);
    jump.coeffs_mut()[2] = 0.5;
    let mut acc = stochastic_convolution_step(&model, &Field::zeros(32), &jump, 0.0).unwrap();
    for _ in 0..10 {
        acc = stochastic_convolution_step(&model, &acc, &Field::zeros(32), 0.01).unwrap();
    }
    let direct = model.apply_semigroup(&jump, 0.1).unwrap();
    assert!((&acc - &direct).h_norm() < 1e-13);
}

#[test]
fn convolution_exceedance_frequency_decreases_with_epsilon() {
    let model = Model::new(Params::default()).unwrap();
    let spec = NoiseSpec::default_for(32, 1.5).unwrap().with_r_min(0.1).unwrap();
    let p = 0.5;
    let freq = |eps: f64, seed: u64| {
        let sc = ScalingParams::new(eps, 0.75, 0.9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 2000;
        let mut hits = 0usize;
        for _ in 0..n {
            let mut acc = Field::zeros(32);
            let mut hit = false;
            for _ in 0..100 {
                let inc = sample_small_increment(&spec, &sc, 0.01, &mut rng);
                acc = stochastic_convolution_step(&model, &acc, &inc, 0.01).unwrap();
                hit |= eps * acc.h_norm() >= eps.powf(p);
            }
            hits += hit as usize;
        }
        let f = hits as f64 / n as f64;
        (f, (f * (1.0 - f) / n as f64).sqrt())
    };
    let (hi, se_hi) = freq(2f64.powi(-4), 1);
    let (lo, se_lo) = freq(2f64.powi(-6), 2);
    assert!(hi - lo > 2.0 * (se_hi * se_hi + se_lo * se_lo).sqrt(), "{hi} vs {lo}");
}

#[test]
fn advisory_constraint_examples() {
    let mut sc = ScalingParams::new(0.1, 0.75, 0.001).unwrap();
    let theta = |s: &ScalingParams| s.constraint_checks(1.5).into_iter().find(|c| c.name == "Theta").unwrap();
    assert!(theta(&sc).passes());
    assert!((theta(&sc).upper - 0.5 / 3.0).abs() < 1e-15);
    sc.theta_exp = 0.2;
    assert!(!theta(&sc).passes());
}

proptest! {
    #[test]
    fn tail_mass_is_a_power_law(c in 0.01f64..100.0, alpha in 0.1f64..1.9) {
        let spec = NoiseSpec::default_for(4, alpha).unwrap();
        prop_assert!((spec.tail_mass(c) - c.powf(-alpha)).abs() <= 1e-12 * c.powf(-alpha));
    }

    #[test]
    fn radial_mass_splits_additively(a in 0.01f64..1.0, b in 1.0f64..10.0, m in 0.0f64..1.0) {
        let spec = NoiseSpec::default_for(4, 1.5).unwrap();
        let mid = a + m * (b - a);
        let whole = spec.radial_mass(a, b);
        prop_assert!((spec.radial_mass(a, mid) + spec.radial_mass(mid, b) - whole).abs() <= 1e-12 * whole.max(1.0));
    }

    #[test]
    fn large_jumps_sit_above_threshold(seed in any::<u64>(), eps in 0.01f64..0.5) {
        let spec = NoiseSpec::default_for(4, 1.5).unwrap();
        let sc = ScalingParams::new(eps, 0.75, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert!(sample_large_jump(&spec, &sc, &mut rng).h_norm() > sc.jump_threshold());
    }
}
