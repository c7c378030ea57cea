//! End-to-end acceptance run. Each criterion prints one `PASS`/`FAIL` line; the
//! test fails if any criterion does.

use std::fmt::Write as _;
use std::fs;
use std::time::Instant;

use chafee_exit::cli::{self, Flags};
use chafee_exit::config::ExperimentConfig;
use chafee_exit::domains::*;
use chafee_exit::exit::*;
use chafee_exit::noise::*;
use chafee_exit::stats::{fit_power_law, jackknife_mean, ks_exponential, laplace_estimate};
use chafee_exit::{Field, Model, Params};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::Oracle;

const LAMBDA_EPS: [f64; 3] = [0.0625, 0.03125, 0.015625];
const N_PATHS: usize = 2000;
const SEED: u64 = 20240101;

struct Verdict {
    failed: usize,
}

impl Verdict {
    fn report(&mut self, k: usize, ok: bool, detail: String) {
        println!("criterion {k}: {} | {detail}", if ok { "PASS" } else { "FAIL" });
        self.failed += !ok as usize;
    }
}

struct World {
    geom: DomainGeometry,
    lin: Linearization,
}

fn spec(alpha: f64) -> NoiseSpec {
    NoiseSpec::default_for(32, alpha).unwrap().with_r_min(0.1).unwrap()
}

fn table_for(w: &World, spec: &NoiseSpec, scalings: &[ScalingParams]) -> ThresholdTable {
    let mut deltas = vec![0.0];
    for sc in scalings {
        deltas.extend(Margins::new(sc).all());
        deltas.push(sc.delta());
    }
    ThresholdTable::build(&w.geom, spec, &deltas).unwrap()
}

/// Records of `n` paths from `phi+` at each `epsilon`, seed ids `k n + path`.
fn ensemble(
    w: &World,
    spec: &NoiseSpec,
    table: &ThresholdTable,
    base: ScalingParams,
    eps: &[f64],
    n: usize,
    opts: &PathOptions,
) -> Vec<EnsembleRun> {
    eps.iter()
        .enumerate()
        .map(|(k, &e)| {
            let p =
                ExitProblem::new(&w.geom, spec, table, &w.lin, base.at_epsilon(e), Basin::Plus, opts.clone()).unwrap();
            let ids: Vec<u64> = (0..n as u64).map(|i| (k * n) as u64 + i).collect();
            run_ensemble(&p, w.geom.phi_plus(), SEED, &ids, 1, |_| Ok(())).unwrap()
        })
        .collect()
}

fn exited(run: &EnsembleRun) -> Vec<&ExitRecord> {
    run.records.iter().filter(|r| r.cause != ExitCause::Censored).collect()
}

fn slope_of(runs: &[EnsembleRun], eps: &[f64]) -> (f64, Vec<f64>) {
    let means: Vec<f64> = runs
        .iter()
        .map(|r| jackknife_mean(&exited(r).iter().map(|x| x.tau).collect::<Vec<_>>()).unwrap().value)
        .collect();
    let pts: Vec<(f64, f64)> = eps.iter().copied().zip(means.iter().copied()).collect();
    (fit_power_law(&pts).unwrap().slope, means)
}

fn criterion_1_2(w: &World, v: &mut Verdict) -> Vec<EnsembleRun> {
    let t0 = Instant::now();
    let s15 = spec(1.5);
    let base = ScalingParams::new(LAMBDA_EPS[0], 0.75, 0.9).unwrap();
    let scalings: Vec<ScalingParams> = LAMBDA_EPS.iter().map(|&e| base.at_epsilon(e)).collect();
    let table = table_for(w, &s15, &scalings);
    let runs = ensemble(w, &s15, &table, base, &LAMBDA_EPS, N_PATHS, &PathOptions::default());

    let last = &runs[2];
    let normalized: Vec<f64> = exited(last).iter().map(|r| r.normalized_tau).collect();
    let ks = ks_exponential(&normalized).unwrap();
    let mut ok = ks <= 0.10;
    let mut detail = format!(
        "eps 2^-6, rho 0.75, gamma 0.9, n {}, censored {:.4}, KS {ks:.4} (<= 0.10)",
        last.records.len(),
        last.censor_fraction()
    );
    for theta in [0.5, 1.0, 2.0] {
        let est = laplace_estimate(&normalized, theta).unwrap();
        let target = 1.0 / (1.0 + theta);
        ok &= (est.value - target).abs() <= 0.10;
        let _ = write!(detail, ", L({theta}) {:.4}+-{:.4} vs {target:.4}", est.value, est.std_err);
    }
    v.report(1, ok, format!("{detail} [{:.0?}]", t0.elapsed()));

    let t1 = Instant::now();
    let (slope15, means15) = slope_of(&runs, &LAMBDA_EPS);
    let s08 = spec(0.8);
    let table08 = table_for(w, &s08, &scalings);
    let runs08 = ensemble(w, &s08, &table08, base, &LAMBDA_EPS, N_PATHS, &PathOptions::default());
    let (slope08, means08) = slope_of(&runs08, &LAMBDA_EPS);
    let ok = (slope15 + 1.5).abs() <= 0.25 && (slope08 + 0.8).abs() <= 0.25;
    v.report(
        2,
        ok,
        format!(
            "alpha 1.5 slope {slope15:.4} (means {means15:.1?}), alpha 0.8 slope {slope08:.4} (means {means08:.2?}), tolerance 0.25 [{:.0?}]",
            t1.elapsed()
        ),
    );
    runs
}

fn criterion_3(w: &World, v: &mut Verdict) {
    let mut worst = 0.0f64;
    for alpha in [0.8, 1.5] {
        let s = spec(alpha);
        let table = ThresholdTable::build(&w.geom, &s, &[0.0]).unwrap();
        for rho in [0.51, 0.75] {
            for &eps in &[0.5, 0.1, LAMBDA_EPS[0], LAMBDA_EPS[1], LAMBDA_EPS[2], 1e-4] {
                let sc = ScalingParams::new(eps, rho, 0.9).unwrap();
                for sign in [1i8, -1] {
                    let lam = characteristic_rate(&s, &table, &sc, sign).unwrap();
                    let beta = large_jump_rate(&s, &sc);
                    let ratio_mu: f64 = s
                        .directions()
                        .iter()
                        .enumerate()
                        .map(|(i, d)| d.weight * table.require(sign, i, 0.0).unwrap().powf(-alpha))
                        .sum::<f64>()
                        / s.total_weight();
                    let expected = ratio_mu * eps.powf(alpha * (1.0 - rho));
                    worst = worst.max(((lam / beta) - expected).abs() / expected);
                }
            }
        }
    }
    v.report(
        3,
        worst <= 1e-12,
        format!("max relative deviation of lambda/beta from closed form {worst:.2e} (<= 1e-12)"),
    );
}

fn criterion_4(w: &World, v: &mut Verdict) {
    let m = w.geom.model();
    let eq = w.geom.equilibria();
    let residual = eq.residuals.iter().fold(0.0f64, |a, &b| a.max(b));
    let sup_phi = m.sup_norm(w.geom.phi_plus()).max(m.sup_norm(w.geom.phi_minus()));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_rise = f64::NEG_INFINITY;
    let dt = m.params().dt;
    for _ in 0..100 {
        let mut c = vec![0.0; 32];
        for (k, a) in c.iter_mut().take(12).enumerate() {
            *a = 2.0 * rng.random_range(-1.0..1.0) / (k + 1) as f64;
        }
        let mut x = Field::from_coeffs(c);
        let mut e = m.energy(&x);
        for _ in 0..200 {
            x = m.flow(&x, dt).unwrap();
            let e1 = m.energy(&x);
            worst_rise = worst_rise.max(e1 - e);
            e = e1;
        }
    }
    let mut x0 = Field::zeros(32);
    x0.coeffs_mut()[..4].copy_from_slice(&[0.3, 0.1, -0.05, 0.02]);
    let ours = m.flow(&x0, 1.0).unwrap();
    let reference = Field::from_coeffs(Oracle::new(20.0, 32, 128).rk4(x0.coeffs(), 1.0, 10_000));
    let flow_err = m.sup_distance(&ours, &reference);
    let ok = residual < 1e-8 && worst_rise <= 1e-9 && flow_err < 1e-6 && sup_phi < 1.0 && eq.states.len() == 3;
    v.report(
        4,
        ok,
        format!(
            "residual {residual:.1e}, max energy rise per step {worst_rise:.1e}, flow vs oracle {flow_err:.1e}, |phi|_inf {sup_phi:.6}"
        ),
    );
}

fn criterion_5(v: &mut Verdict) {
    let alpha = 1.5;
    let s = spec(alpha);
    let sc = ScalingParams::new(LAMBDA_EPS[2], 0.75, 0.9).unwrap();
    let c = sc.jump_threshold();
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut above = 0usize;
    let mut plus = 0usize;
    for _ in 0..n {
        let j = sample_large_jump_parts(&s, &sc, &mut rng);
        above += (j.radius > 2.0 * c) as usize;
        plus += (j.direction == 0) as usize;
    }
    let p_tail = 2f64.powf(-alpha);
    let tail = above as f64 / n as f64;
    let tail_z = (tail - p_tail) / (p_tail * (1.0 - p_tail) / n as f64).sqrt();
    let beta = large_jump_rate(&s, &sc);
    let xs: Vec<f64> = (0..n).map(|_| sample_interjump_time(beta, &mut rng).unwrap()).collect();
    let est = jackknife_mean(&xs).unwrap();
    let gap_z = (est.value - 1.0 / beta) / est.std_err;
    let sign_z = (plus as f64 - n as f64 / 2.0) / (n as f64 / 4.0).sqrt();
    let ok = tail_z.abs() < 3.0 && gap_z.abs() < 3.0 && sign_z.abs() < 2.576;
    v.report(
        5,
        ok,
        format!("tail ratio {tail:.5} vs {p_tail:.5} (z {tail_z:.2}), inter-jump mean z {gap_z:.2}, sign balance z {sign_z:.2}"),
    );
}

fn criterion_6(w: &World, v: &mut Verdict) {
    let t0 = Instant::now();
    let s = spec(1.5);
    let table = ThresholdTable::build(&w.geom, &s, &[0.0]).unwrap();
    let n = 6000;
    let mut est = Vec::new();
    for (k, eps) in [LAMBDA_EPS[0], LAMBDA_EPS[2]].into_iter().enumerate() {
        let sc = ScalingParams::new(eps, 0.51, 0.24).unwrap();
        let p = ExitProblem::new(&w.geom, &s, &table, &w.lin, sc, Basin::Plus, PathOptions::default()).unwrap();
        est.push(deviation_probability(&p, n, &mut path_rng(SEED, 1_000_000 + k as u64)).unwrap());
    }
    let combined = (est[0].std_err.powi(2) + est[1].std_err.powi(2)).sqrt();
    let gap = est[0].value - est[1].value;
    v.report(
        6,
        gap >= 2.0 * combined && combined > 0.0,
        format!(
            "rho 0.51, gamma 0.24, n {n}: p(2^-4) {:.4}+-{:.4}, p(2^-6) {:.4}+-{:.4}, gap {:.2} s.e. (>= 2) [{:.0?}]",
            est[0].value,
            est[0].std_err,
            est[1].value,
            est[1].std_err,
            gap / combined,
            t0.elapsed()
        ),
    );
}

fn criterion_7(w: &World, v: &mut Verdict, runs: &[EnsembleRun]) {
    let t0 = Instant::now();
    let s = spec(1.5);
    let base = ScalingParams::new(LAMBDA_EPS[1], 0.51, 0.24).unwrap();
    let scalings: Vec<ScalingParams> = LAMBDA_EPS.iter().map(|&e| base.at_epsilon(e)).collect();
    let table = table_for(w, &s, &scalings);
    let fit = relaxation_fit(&w.geom, &s, &table, &base, &LAMBDA_EPS).unwrap();
    let opts = PathOptions { diagnostics: true, ..PathOptions::default() };
    let run = &ensemble(w, &s, &table, base, &[LAMBDA_EPS[1]], 1000, &opts)[0];
    let counts = tag_epoch_events(&run.epochs, &s, &table, &base, Basin::Plus, fit.horizon(LAMBDA_EPS[1])).unwrap();
    let mut ok = true;
    let mut detail =
        format!("eps 2^-5, rho 0.51, gamma 0.24, horizon {:.3}, {} epochs", fit.horizon(LAMBDA_EPS[1]), counts.epochs);
    for k in 0..3 {
        let [premise, viol] = counts.inclusions[k];
        let rate = counts.conditional_violation_rate(k);
        ok &= rate < 1e-2;
        let _ = write!(detail, ", inclusion {}: {viol}/{premise}", k + 1);
    }
    let last = exited(&runs[2]);
    let lj = last.iter().filter(|r| r.cause == ExitCause::LargeJump).count() as f64 / last.len() as f64;
    ok &= lj >= 0.9;
    let _ = write!(detail, "; large-jump exits at 2^-6 {lj:.4} (>= 0.90) [{:.0?}]", t0.elapsed());
    v.report(7, ok, detail);
}

fn criterion_8(v: &mut Verdict) {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let text = "[noise]\nr_min = 0.1\n[mc]\nn_paths = 60\n";
    let mut outputs = Vec::new();
    for (k, workers) in [1usize, 2, 1].into_iter().enumerate() {
        let mut cfg = ExperimentConfig::parse(text).unwrap();
        cfg.io.out_dir = dir.path().join(format!("run{k}"));
        let flags = Flags { workers, ..Flags::default() };
        cli::cmd_tables(&cfg, &flags).unwrap();
        cli::cmd_run(&cfg, &flags).unwrap();
        cli::cmd_summarize(&cfg, &flags).unwrap();
        let read = |f: &str| fs::read(cfg.io.out_dir.join(f)).unwrap();
        outputs.push((read(cli::RECORDS_FILE), read(cli::SUMMARY_FILE), read(cli::SUMMARY_TABLE_FILE)));
    }
    let ok = outputs.windows(2).all(|p| p[0] == p[1]);
    v.report(
        8,
        ok,
        format!(
            "pipeline at 1, 2, 1 workers: {} record bytes, identical {ok} [{:.0?}]",
            outputs[0].0.len(),
            t0.elapsed()
        ),
    );
}

/// Invariants of the exit ensemble checked on the criterion-1 data.
fn ensemble_invariants(runs: &[EnsembleRun], w: &World) -> Vec<String> {
    let mut problems = Vec::new();
    let s = spec(1.5);
    let base = ScalingParams::new(LAMBDA_EPS[0], 0.75, 0.9).unwrap();
    let table = ThresholdTable::build(&w.geom, &s, &[0.0]).unwrap();
    for (run, &eps) in runs.iter().zip(&LAMBDA_EPS) {
        if run
            .records
            .iter()
            .any(|r| r.cause != ExitCause::Censored && r.tau.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater))
        {
            problems.push(format!("non-positive exit time at {eps}"));
        }
        if !run.failures.is_empty() {
            problems.push(format!("{} failed paths at {eps}", run.failures.len()));
        }
    }
    let (_, means) = slope_of(runs, &LAMBDA_EPS);
    for pair in means.windows(2) {
        let factor = pair[1] / pair[0];
        if (factor / 2f64.powf(1.5) - 1.0).abs() > 0.25 {
            problems.push(format!("mean exit time grows by {factor:.3} per halving"));
        }
    }
    let drift: Vec<(f64, f64)> = runs
        .iter()
        .map(|r| {
            let ex = exited(r);
            let p = ex.iter().filter(|x| x.cause == ExitCause::DriftOrSmallNoise).count() as f64 / ex.len() as f64;
            (p, (p * (1.0 - p) / ex.len() as f64).sqrt())
        })
        .collect();
    for p in drift.windows(2) {
        if p[1].0 > p[0].0 + 2.0 * (p[0].1.powi(2) + p[1].1.powi(2)).sqrt() {
            problems.push(format!("between-jump exit fraction rises: {drift:?}"));
        }
    }
    let sc = base.at_epsilon(LAMBDA_EPS[2]);
    let lam = characteristic_rate(&s, &table, &sc, 1).unwrap();
    let beta = large_jump_rate(&s, &sc);
    let jumps = exited(&runs[2]).iter().map(|r| r.n_large_jumps as f64).sum::<f64>() / exited(&runs[2]).len() as f64;
    if (jumps / (beta / lam) - 1.0).abs() > 0.25 {
        problems.push(format!("mean jump count {jumps:.2} vs beta/lambda {:.2}", beta / lam));
    }
    println!("ensemble invariants: mean large jumps at 2^-6 {jumps:.2} (beta/lambda {:.2}), between-jump exit fractions {drift:.4?}", beta / lam);
    problems
}

#[test]
fn acceptance() {
    let mut v = Verdict { failed: 0 };
    let geom = DomainGeometry::new(Model::new(Params::default()).unwrap(), GeometryOptions::default()).unwrap();
    let lin = Linearization::new(geom.model(), geom.phi_plus());
    let w = World { geom, lin };
    let runs = criterion_1_2(&w, &mut v);
    criterion_3(&w, &mut v);
    criterion_4(&w, &mut v);
    criterion_5(&mut v);
    criterion_6(&w, &mut v);
    criterion_7(&w, &mut v, &runs);
    criterion_8(&mut v);
    let problems = ensemble_invariants(&runs, &w);
    assert!(problems.is_empty(), "{problems:?}");
    assert_eq!(v.failed, 0, "{} criteria failed", v.failed);
}
