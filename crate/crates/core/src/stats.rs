//! Estimators for exit-time ensembles: Laplace transforms, a Kolmogorov-Smirnov
//! distance to the unit exponential, and log-log scaling fits.

use crate::exit::{ExitCause, ExitRecord};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("empty sample")]
    Empty,
    #[error("theta = {0} must exceed -1")]
    Theta(f64),
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("non-positive value {0} in a log-log fit")]
    NonPositive(f64),
    #[error("inputs have different lengths")]
    LengthMismatch,
    #[error("all abscissae coincide")]
    Degenerate,
}

/// A point estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_err: f64,
}

/// Jackknife standard error of the sample mean of `values`.
pub fn jackknife_mean(values: &[f64]) -> Result<Estimate, StatsError> {
    let n = values.len();
    if n == 0 {
        return Err(StatsError::Empty);
    }
    let total: f64 = values.iter().sum();
    let mean = total / n as f64;
    if n == 1 {
        return Ok(Estimate { value: mean, std_err: 0.0 });
    }
    let nm1 = (n - 1) as f64;
    let ss: f64 = values
        .iter()
        .map(|v| {
            let loo = (total - v) / nm1;
            (loo - mean) * (loo - mean)
        })
        .sum();
    Ok(Estimate { value: mean, std_err: (nm1 / n as f64 * ss).sqrt() })
}

/// Sample mean of `exp(-theta t)` over normalised exit times.
pub fn laplace_estimate(normalized: &[f64], theta: f64) -> Result<Estimate, StatsError> {
    if !(theta > -1.0) {
        return Err(StatsError::Theta(theta));
    }
    if normalized.is_empty() {
        return Err(StatsError::Empty);
    }
    let g: Vec<f64> = normalized.iter().map(|&t| (-theta * t).exp()).collect();
    jackknife_mean(&g)
}

/// Two-sided Kolmogorov-Smirnov distance between the empirical law and `Exp(1)`.
pub fn ks_exponential(samples: &[f64]) -> Result<f64, StatsError> {
    if samples.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in s.iter().enumerate() {
        let f = if x <= 0.0 { 0.0 } else { -(-x).exp_m1() };
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    Ok(d.clamp(0.0, 1.0))
}

/// Ordinary least squares `y = slope x + intercept`; returns `(slope, intercept, r^2)`.
pub fn least_squares(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64), StatsError> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch);
    }
    if xs.len() < 2 {
        return Err(StatsError::TooFewPoints { need: 2, got: xs.len() });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(StatsError::Degenerate);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).min(1.0) };
    Ok((slope, intercept, r2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerLawFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least squares on `(ln epsilon, ln mean tau)`; the slope estimates `-alpha`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit, StatsError> {
    if points.len() < 3 {
        return Err(StatsError::TooFewPoints { need: 3, got: points.len() });
    }
    for &(x, y) in points {
        if !(x > 0.0) {
            return Err(StatsError::NonPositive(x));
        }
        if !(y > 0.0) {
            return Err(StatsError::NonPositive(y));
        }
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let (slope, intercept, r_squared) = least_squares(&xs, &ys)?;
    Ok(PowerLawFit { slope, intercept, r_squared })
}

/// Statistics of the records sharing one `epsilon`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonSummary {
    pub epsilon: f64,
    pub n: usize,
    pub n_censored: usize,
    pub censor_fraction: f64,
    pub mean_tau: Option<Estimate>,
    /// `lambda(epsilon)`, recovered as `normalized_tau / tau`.
    pub rate: Option<f64>,
    pub ks: Option<f64>,
    pub laplace: Vec<(f64, Estimate)>,
    pub mean_large_jumps: Option<f64>,
    /// Fraction of uncensored exits caused by a large jump.
    pub large_jump_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSummary {
    pub theta_grid: Vec<f64>,
    pub per_epsilon: Vec<EpsilonSummary>,
}

impl EnsembleSummary {
    /// Groups by `epsilon` (listed in decreasing order; `eps_grid` entries without
    /// records still appear with `n = 0`).
    pub fn from_records(records: &[ExitRecord], eps_grid: &[f64], theta_grid: &[f64]) -> Result<Self, StatsError> {
        let mut eps: Vec<f64> = eps_grid.to_vec();
        for r in records {
            if !eps.iter().any(|e| e.to_bits() == r.epsilon.to_bits()) {
                eps.push(r.epsilon);
            }
        }
        eps.sort_by(|a, b| b.total_cmp(a));
        let mut per_epsilon = Vec::with_capacity(eps.len());
        for e in eps {
            let group: Vec<&ExitRecord> = records.iter().filter(|r| r.epsilon.to_bits() == e.to_bits()).collect();
            let exited: Vec<&ExitRecord> = group.iter().copied().filter(|r| r.cause != ExitCause::Censored).collect();
            let n = group.len();
            let n_censored = n - exited.len();
            let taus: Vec<f64> = exited.iter().map(|r| r.tau).collect();
            let normalized: Vec<f64> = exited.iter().map(|r| r.normalized_tau).collect();
            let mean_tau = jackknife_mean(&taus).ok();
            let rate = group.iter().find(|r| r.tau > 0.0).map(|r| r.normalized_tau / r.tau);
            let ks = ks_exponential(&normalized).ok();
            let mut laplace = Vec::with_capacity(theta_grid.len());
            if !normalized.is_empty() {
                for &th in theta_grid {
                    laplace.push((th, laplace_estimate(&normalized, th)?));
                }
            }
            let mean_large_jumps = (!exited.is_empty())
                .then(|| exited.iter().map(|r| r.n_large_jumps as f64).sum::<f64>() / exited.len() as f64);
            let large_jump_fraction = (!exited.is_empty()).then(|| {
                exited.iter().filter(|r| r.cause == ExitCause::LargeJump).count() as f64 / exited.len() as f64
            });
            per_epsilon.push(EpsilonSummary {
                epsilon: e,
                n,
                n_censored,
                censor_fraction: if n == 0 { 0.0 } else { n_censored as f64 / n as f64 },
                mean_tau,
                rate,
                ks,
                laplace,
                mean_large_jumps,
                large_jump_fraction,
            });
        }
        Ok(Self { theta_grid: theta_grid.to_vec(), per_epsilon })
    }

    /// Log-log fit of mean exit time over the groups that have one.
    pub fn power_law(&self) -> Result<PowerLawFit, StatsError> {
        let pts: Vec<(f64, f64)> =
            self.per_epsilon.iter().filter_map(|s| s.mean_tau.map(|m| (s.epsilon, m.value))).collect();
        fit_power_law(&pts)
    }

    /// `key = value` lines, one statistic per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let opt = |v: Option<f64>| v.map_or("nan".to_string(), |x| x.to_string());
        out.push_str(&format!("groups = {}\n", self.per_epsilon.len()));
        for (g, s) in self.per_epsilon.iter().enumerate() {
            let p = format!("group.{g}");
            out.push_str(&format!("{p}.epsilon = {}\n", s.epsilon));
            out.push_str(&format!("{p}.n = {}\n", s.n));
            out.push_str(&format!("{p}.censored = {}\n", s.n_censored));
            out.push_str(&format!("{p}.censor_fraction = {}\n", s.censor_fraction));
            out.push_str(&format!("{p}.mean_tau = {}\n", opt(s.mean_tau.map(|m| m.value))));
            out.push_str(&format!("{p}.mean_tau_se = {}\n", opt(s.mean_tau.map(|m| m.std_err))));
            out.push_str(&format!("{p}.rate = {}\n", opt(s.rate)));
            out.push_str(&format!("{p}.ks = {}\n", opt(s.ks)));
            for (th, est) in &s.laplace {
                out.push_str(&format!("{p}.laplace[{th}] = {}\n", est.value));
                out.push_str(&format!("{p}.laplace_se[{th}] = {}\n", est.std_err));
            }
            out.push_str(&format!("{p}.mean_large_jumps = {}\n", opt(s.mean_large_jumps)));
            out.push_str(&format!("{p}.large_jump_fraction = {}\n", opt(s.large_jump_fraction)));
        }
        if let Ok(fit) = self.power_law() {
            out.push_str(&format!("fit.slope = {}\n", fit.slope));
            out.push_str(&format!("fit.intercept = {}\n", fit.intercept));
            out.push_str(&format!("fit.r_squared = {}\n", fit.r_squared));
        }
        out
    }

    /// Plot-ready columns: epsilon, n, mean tau, its error, rate, KS, then one
    /// Laplace column per theta.
    pub fn to_table(&self) -> String {
        let mut out = String::from("epsilon,n,censor_fraction,mean_tau,mean_tau_se,rate,ks");
        for th in &self.theta_grid {
            out.push_str(&format!(",laplace_{th}"));
        }
        out.push('\n');
        let opt = |v: Option<f64>| v.map_or("nan".to_string(), |x| x.to_string());
        for s in &self.per_epsilon {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}",
                s.epsilon,
                s.n,
                s.censor_fraction,
                opt(s.mean_tau.map(|m| m.value)),
                opt(s.mean_tau.map(|m| m.std_err)),
                opt(s.rate),
                opt(s.ks)
            ));
            for th in &self.theta_grid {
                let v = s.laplace.iter().find(|(t, _)| t == th).map(|(_, e)| e.value);
                out.push_str(&format!(",{}", opt(v)));
            }
            out.push('\n');
        }
        out
    }
}
