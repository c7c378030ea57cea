//! Experiment configuration: a line-oriented `key = value` format with
//! `[section]` headers and `#` comments.
//!
//! ```text
//! [model]
//! lambda = 20
//! [scaling]
//! epsilon_grid = 2^-4, 2^-5, 2^-6
//! ```
//!
//! Every key is optional and falls back to [`ExperimentConfig::default`].
//! Numbers accept the form `a^b`.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::domains::{Basin, GeometryOptions};
use crate::noise::{ConstraintCheck, ScalingParams};
use crate::pde::validate_lambda;
use crate::{Model, Params};

/// Environment variable overriding `mc.master_seed`.
pub const SEED_ENV: &str = "CHAFEE_EXIT_SEED";

pub const SECTIONS: [&str; 5] = ["model", "noise", "scaling", "mc", "io"];

/// A named noise profile: the sine mode `e_k` or the normalised equilibrium.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionName {
    Mode(usize),
    Phi,
}

impl fmt::Display for DirectionName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Mode(k) => write!(f, "e{k}"),
            Self::Phi => f.write_str("phi"),
        }
    }
}

impl FromStr for DirectionName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "phi" {
            return Ok(Self::Phi);
        }
        match s.strip_prefix('e').and_then(|k| k.parse::<usize>().ok()) {
            Some(k) if k >= 1 => Ok(Self::Mode(k)),
            _ => Err(format!("unknown direction `{s}` (expected e<k> with k >= 1, or phi)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub lambda: f64,
    pub n_modes: usize,
    pub dt: f64,
    pub t_max: f64,
    pub grid_points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig {
    pub alpha: f64,
    /// One representative per `+-` pair.
    pub directions: Vec<DirectionName>,
    pub weights: Vec<f64>,
    pub r_min: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingConfig {
    pub rho: f64,
    pub gamma: f64,
    pub theta_exp: f64,
    pub gamma_cap: f64,
    pub epsilon_grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    pub n_paths: usize,
    pub master_seed: u64,
    pub t_max_path_factor: f64,
    pub theta_grid: Vec<f64>,
    pub dt_probe_factor: f64,
    pub probe_count: usize,
    pub start: Basin,
    /// Collect epoch diagnostics and tag events after each run.
    pub diagnostics: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IoConfig {
    pub out_dir: PathBuf,
    /// Defaults to `thresholds.csv` inside the output directory.
    pub table_cache: Option<PathBuf>,
    pub dump_trajectories: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub noise: NoiseConfig,
    pub scaling: ScalingConfig,
    pub mc: McConfig,
    pub io: IoConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig { lambda: 20.0, n_modes: 32, dt: 1e-3, t_max: 10.0, grid_points: 128 },
            noise: NoiseConfig { alpha: 1.5, directions: vec![DirectionName::Mode(1)], weights: vec![0.5], r_min: 0.1 },
            scaling: ScalingConfig {
                rho: 0.75,
                gamma: 0.9,
                theta_exp: 0.1,
                gamma_cap: 1.0,
                epsilon_grid: vec![0.0625, 0.03125, 0.015625],
            },
            mc: McConfig {
                n_paths: 2000,
                master_seed: 20240101,
                t_max_path_factor: 50.0,
                theta_grid: vec![0.5, 1.0, 2.0],
                dt_probe_factor: 10.0,
                probe_count: 8,
                start: Basin::Plus,
                diagnostics: false,
            },
            io: IoConfig { out_dir: PathBuf::from("out"), table_cache: None, dump_trajectories: false },
        }
    }
}

/// One problem found in a configuration, with its line when it has one.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigIssue {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Every issue of a configuration, in line order.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub struct ConfigErrors(pub Vec<ConfigIssue>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} configuration error(s)", self.0.len())?;
        for issue in &self.0 {
            write!(f, "\n  {issue}")?;
        }
        Ok(())
    }
}

enum Assign {
    Unknown,
    Bad(String),
}

fn number(v: &str) -> Result<f64, String> {
    let v = v.trim();
    let parsed = match v.split_once('^') {
        Some((base, exp)) => {
            let b = base.trim().parse::<f64>();
            let e = exp.trim().parse::<f64>();
            match (b, e) {
                (Ok(b), Ok(e)) => Ok(b.powf(e)),
                _ => Err(()),
            }
        }
        None => v.parse::<f64>().map_err(|_| ()),
    };
    match parsed {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(format!("`{v}` is not a finite number")),
    }
}

fn integer<T: FromStr>(v: &str) -> Result<T, String> {
    v.trim().parse::<T>().map_err(|_| format!("`{}` is not a non-negative integer", v.trim()))
}

fn list<T>(v: &str, item: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| item(s.trim())).collect()
}

fn boolean(v: &str) -> Result<bool, String> {
    match v.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(format!("`{other}` is not a boolean (true or false)")),
    }
}

fn basin(v: &str) -> Result<Basin, String> {
    match v.trim() {
        "plus" => Ok(Basin::Plus),
        "minus" => Ok(Basin::Minus),
        other => Err(format!("`{other}` is not a start basin (plus or minus)")),
    }
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

impl ExperimentConfig {
    fn assign(&mut self, section: &str, key: &str, v: &str) -> Result<(), Assign> {
        let bad = Assign::Bad;
        match (section, key) {
            ("model", "lambda") => self.model.lambda = number(v).map_err(bad)?,
            ("model", "n_modes") => self.model.n_modes = integer(v).map_err(bad)?,
            ("model", "dt") => self.model.dt = number(v).map_err(bad)?,
            ("model", "t_max") => self.model.t_max = number(v).map_err(bad)?,
            ("model", "grid_points") => self.model.grid_points = integer(v).map_err(bad)?,
            ("noise", "alpha") => self.noise.alpha = number(v).map_err(bad)?,
            ("noise", "directions") => self.noise.directions = list(v, |s| s.parse()).map_err(bad)?,
            ("noise", "weights") => self.noise.weights = list(v, number).map_err(bad)?,
            ("noise", "r_min") => self.noise.r_min = number(v).map_err(bad)?,
            ("scaling", "rho") => self.scaling.rho = number(v).map_err(bad)?,
            ("scaling", "gamma") => self.scaling.gamma = number(v).map_err(bad)?,
            ("scaling", "theta") => self.scaling.theta_exp = number(v).map_err(bad)?,
            ("scaling", "gamma_cap") => self.scaling.gamma_cap = number(v).map_err(bad)?,
            ("scaling", "epsilon_grid") => self.scaling.epsilon_grid = list(v, number).map_err(bad)?,
            ("mc", "n_paths") => self.mc.n_paths = integer(v).map_err(bad)?,
            ("mc", "master_seed") => self.mc.master_seed = integer(v).map_err(bad)?,
            ("mc", "t_max_path_factor") => self.mc.t_max_path_factor = number(v).map_err(bad)?,
            ("mc", "theta_grid") => self.mc.theta_grid = list(v, number).map_err(bad)?,
            ("mc", "dt_probe_factor") => self.mc.dt_probe_factor = number(v).map_err(bad)?,
            ("mc", "probe_count") => self.mc.probe_count = integer(v).map_err(bad)?,
            ("mc", "start") => self.mc.start = basin(v).map_err(bad)?,
            ("mc", "diagnostics") => self.mc.diagnostics = boolean(v).map_err(bad)?,
            ("io", "out_dir") => self.io.out_dir = PathBuf::from(v.trim()),
            ("io", "table_cache") => {
                self.io.table_cache = (!v.trim().is_empty()).then(|| PathBuf::from(v.trim()));
            }
            ("io", "dump_trajectories") => self.io.dump_trajectories = boolean(v).map_err(bad)?,
            _ => return Err(Assign::Unknown),
        }
        Ok(())
    }

    /// Parses and validates `text`. All syntax and semantic problems are
    /// collected; none stops the scan.
    pub fn parse(text: &str) -> Result<Self, ConfigErrors> {
        let mut cfg = Self::default();
        let mut issues = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        let mut section: Option<String> = None;
        for (no, raw) in text.lines().enumerate() {
            let line = no + 1;
            let mut issue = |message: String| issues.push(ConfigIssue { line: Some(line), message });
            let content = raw.split_once('#').map_or(raw, |(c, _)| c).trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                match rest.strip_suffix(']').map(str::trim) {
                    Some(name) if SECTIONS.contains(&name) => section = Some(name.to_string()),
                    Some(name) => {
                        issue(format!("unknown section [{name}]"));
                        section = None;
                    }
                    None => issue(format!("malformed section header `{content}`")),
                }
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                issue(format!("expected `key = value`, found `{content}`"));
                continue;
            };
            let key = key.trim();
            let Some(sec) = section.as_deref() else {
                issue(format!("key `{key}` outside of a known section"));
                continue;
            };
            let full = format!("{sec}.{key}");
            if let Some(first) = seen.get(&full) {
                issue(format!("duplicate key `{full}` (first set on line {first})"));
                continue;
            }
            match cfg.assign(sec, key, value) {
                Ok(()) => {
                    seen.insert(full, line);
                }
                Err(Assign::Unknown) => issue(format!("unknown key `{key}` in section [{sec}]")),
                Err(Assign::Bad(m)) => issue(format!("{full}: {m}")),
            }
        }
        for (key, message) in cfg.semantic_issues() {
            issues.push(ConfigIssue { line: seen.get(key).copied(), message: format!("{key}: {message}") });
        }
        issues.sort_by_key(|i| i.line.unwrap_or(usize::MAX));
        if issues.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigErrors(issues))
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigErrors> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            ConfigErrors(vec![ConfigIssue { line: None, message: format!("cannot read {}: {e}", path.display()) }])
        })?;
        Self::parse(&text)
    }

    /// Replaces the master seed by `value` (the content of [`SEED_ENV`]) when set.
    pub fn with_seed_override(mut self, value: Option<&str>) -> Result<Self, ConfigErrors> {
        if let Some(v) = value {
            self.mc.master_seed = integer(v)
                .map_err(|m| ConfigErrors(vec![ConfigIssue { line: None, message: format!("{SEED_ENV}: {m}") }]))?;
        }
        Ok(self)
    }

    /// Hard violations as `(key, message)`; the advisory constraints are not among them.
    pub fn semantic_issues(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let m = &self.model;
        if let Err(e) = validate_lambda(m.lambda) {
            out.push(("model.lambda", e.to_string()));
        }
        if m.n_modes == 0 {
            out.push(("model.n_modes", "must be positive".into()));
        }
        if m.grid_points < 4 * m.n_modes {
            out.push(("model.grid_points", format!("must be at least 4 * n_modes = {}", 4 * m.n_modes)));
        }
        if !(m.dt > 0.0) {
            out.push(("model.dt", "must be positive".into()));
        }
        if !(m.t_max > 0.0) {
            out.push(("model.t_max", "must be positive".into()));
        }
        let n = &self.noise;
        if !(n.alpha > 0.0 && n.alpha < 2.0) {
            out.push(("noise.alpha", format!("{} is outside (0, 2)", n.alpha)));
        }
        if n.directions.is_empty() {
            out.push(("noise.directions", "at least one direction is required".into()));
        }
        for d in &n.directions {
            if let DirectionName::Mode(k) = d {
                if *k > m.n_modes {
                    out.push(("noise.directions", format!("e{k} exceeds n_modes = {}", m.n_modes)));
                }
            }
        }
        if n.weights.len() != n.directions.len() {
            out.push(("noise.weights", format!("{} weights for {} directions", n.weights.len(), n.directions.len())));
        }
        if n.weights.iter().any(|w| !(*w > 0.0)) {
            out.push(("noise.weights", "weights must be positive".into()));
        }
        if !(n.r_min > 0.0 && n.r_min < 1.0) {
            out.push(("noise.r_min", format!("{} is outside (0, 1)", n.r_min)));
        }
        let s = &self.scaling;
        if !(s.rho > 0.0 && s.rho < 1.0) {
            out.push(("scaling.rho", format!("{} is outside (0, 1)", s.rho)));
        }
        if !(s.gamma > 0.0) {
            out.push(("scaling.gamma", "must be positive".into()));
        }
        if !(s.gamma_cap > 0.0) {
            out.push(("scaling.gamma_cap", "must be positive".into()));
        }
        if s.epsilon_grid.is_empty() {
            out.push(("scaling.epsilon_grid", "at least one value is required".into()));
        }
        if s.epsilon_grid.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
            out.push(("scaling.epsilon_grid", "values must lie in (0, 1)".into()));
        }
        if s.epsilon_grid.windows(2).any(|w| !(w[1] < w[0])) {
            out.push(("scaling.epsilon_grid", "values must be strictly decreasing".into()));
        }
        let mc = &self.mc;
        if !(mc.t_max_path_factor > 0.0) {
            out.push(("mc.t_max_path_factor", "must be positive".into()));
        }
        if mc.theta_grid.iter().any(|t| !(*t > -1.0)) {
            out.push(("mc.theta_grid", "values must exceed -1".into()));
        }
        if !(mc.dt_probe_factor > 0.0) {
            out.push(("mc.dt_probe_factor", "must be positive".into()));
        }
        if mc.probe_count == 0 || !mc.probe_count.is_multiple_of(2) {
            out.push(("mc.probe_count", "must be a positive even number".into()));
        }
        if mc.probe_count / 2 > m.n_modes {
            out.push(("mc.probe_count", format!("needs at most 2 * n_modes = {}", 2 * m.n_modes)));
        }
        out
    }

    /// Scaling parameters at `epsilon`.
    pub fn scaling_at(&self, epsilon: f64) -> ScalingParams {
        ScalingParams {
            epsilon,
            rho: self.scaling.rho,
            gamma: self.scaling.gamma,
            theta_exp: self.scaling.theta_exp,
            gamma_cap: self.scaling.gamma_cap,
        }
    }

    /// The advisory inequalities on `Theta`, `rho`, `gamma`.
    pub fn constraint_checks(&self) -> Vec<ConstraintCheck> {
        let eps = self.scaling.epsilon_grid.first().copied().unwrap_or(0.5);
        self.scaling_at(eps).constraint_checks(self.noise.alpha)
    }

    /// One `pass` or `warn` line per advisory constraint.
    pub fn constraint_report(&self) -> String {
        self.constraint_checks()
            .iter()
            .map(|c| {
                let verdict = if c.passes() { "pass" } else { "warn" };
                format!("{verdict}: {} = {} against ({}, {})\n", c.name, c.value, c.lower, c.upper)
            })
            .collect()
    }

    pub fn model_params(&self) -> Params {
        Params {
            lambda: self.model.lambda,
            n_modes: self.model.n_modes,
            dt: self.model.dt,
            t_max: self.model.t_max,
            grid_points: self.model.grid_points,
        }
    }

    pub fn geometry_options(&self, model: &Model) -> GeometryOptions {
        GeometryOptions {
            probe_count: self.mc.probe_count,
            ..GeometryOptions::for_model(model, self.mc.dt_probe_factor)
        }
    }

    pub fn table_path(&self) -> PathBuf {
        self.io.table_cache.clone().unwrap_or_else(|| self.io.out_dir.join("thresholds.csv"))
    }

    fn geometry_lines(&self) -> Vec<String> {
        let m = &self.model;
        vec![
            format!("model.lambda = {}", m.lambda),
            format!("model.n_modes = {}", m.n_modes),
            format!("model.dt = {}", m.dt),
            format!("model.t_max = {}", m.t_max),
            format!("model.grid_points = {}", m.grid_points),
            format!("noise.directions = {}", join(&self.noise.directions)),
            format!("mc.dt_probe_factor = {}", self.mc.dt_probe_factor),
            format!("mc.probe_count = {}", self.mc.probe_count),
        ]
    }

    /// Every key that influences results, one per line in a fixed order.
    pub fn canonical(&self) -> String {
        let mut lines = self.geometry_lines();
        let (n, s, mc) = (&self.noise, &self.scaling, &self.mc);
        lines.extend([
            format!("noise.alpha = {}", n.alpha),
            format!("noise.weights = {}", join(&n.weights)),
            format!("noise.r_min = {}", n.r_min),
            format!("scaling.rho = {}", s.rho),
            format!("scaling.gamma = {}", s.gamma),
            format!("scaling.theta = {}", s.theta_exp),
            format!("scaling.gamma_cap = {}", s.gamma_cap),
            format!("scaling.epsilon_grid = {}", join(&s.epsilon_grid)),
            format!("mc.n_paths = {}", mc.n_paths),
            format!("mc.master_seed = {}", mc.master_seed),
            format!("mc.t_max_path_factor = {}", mc.t_max_path_factor),
            format!("mc.theta_grid = {}", join(&mc.theta_grid)),
            format!("mc.start = {}", if mc.start == Basin::Minus { "minus" } else { "plus" }),
            format!("mc.diagnostics = {}", mc.diagnostics),
        ]);
        lines.sort();
        lines.join("\n") + "\n"
    }

    /// SHA-256 of [`Self::canonical`], hex encoded. Output locations do not enter.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    /// SHA-256 of the keys that determine threshold tables.
    pub fn geometry_hash(&self) -> String {
        hex::encode(Sha256::digest(self.geometry_lines().join("\n").as_bytes()))
    }

    /// The configuration in its own file format; parses back to `self`.
    pub fn to_text(&self) -> String {
        let (m, n, s, mc, io) = (&self.model, &self.noise, &self.scaling, &self.mc, &self.io);
        let mut t = String::new();
        t += &format!(
            "[model]\nlambda = {}\nn_modes = {}\ndt = {}\nt_max = {}\ngrid_points = {}\n\n",
            m.lambda, m.n_modes, m.dt, m.t_max, m.grid_points
        );
        t += &format!(
            "[noise]\nalpha = {}\ndirections = {}\nweights = {}\nr_min = {}\n\n",
            n.alpha,
            join(&n.directions),
            join(&n.weights),
            n.r_min
        );
        t += &format!(
            "[scaling]\nrho = {}\ngamma = {}\ntheta = {}\ngamma_cap = {}\nepsilon_grid = {}\n\n",
            s.rho,
            s.gamma,
            s.theta_exp,
            s.gamma_cap,
            join(&s.epsilon_grid)
        );
        t += &format!(
            "[mc]\nn_paths = {}\nmaster_seed = {}\nt_max_path_factor = {}\ntheta_grid = {}\ndt_probe_factor = {}\nprobe_count = {}\nstart = {}\ndiagnostics = {}\n\n",
            mc.n_paths,
            mc.master_seed,
            mc.t_max_path_factor,
            join(&mc.theta_grid),
            mc.dt_probe_factor,
            mc.probe_count,
            if mc.start == Basin::Minus { "minus" } else { "plus" },
            mc.diagnostics
        );
        t += &format!("[io]\nout_dir = {}\n", io.out_dir.display());
        if let Some(p) = &io.table_cache {
            t += &format!("table_cache = {}\n", p.display());
        }
        t += &format!("dump_trajectories = {}\n", io.dump_trajectories);
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(ExperimentConfig::parse("").unwrap(), cfg);
    }

    #[test]
    fn power_notation() {
        assert_eq!(number("2^-4").unwrap(), 0.0625);
        assert!(number("2^x").is_err());
        assert!(number("inf").is_err());
    }

    #[test]
    fn direction_names() {
        assert_eq!("e3".parse::<DirectionName>().unwrap(), DirectionName::Mode(3));
        assert_eq!("phi".parse::<DirectionName>().unwrap(), DirectionName::Phi);
        assert!("e0".parse::<DirectionName>().is_err());
        assert!("x".parse::<DirectionName>().is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = ExperimentConfig::parse("# heading\n\n[model]  # trailing\nlambda = 25 # note\n").unwrap();
        assert_eq!(cfg.model.lambda, 25.0);
    }
}
