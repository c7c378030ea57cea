//! Subcommands behind the `chafee-exit` binary and their artifact formats.
//!
//! Every artifact starts with `# config_hash = <hex>`. Tables carry a second
//! line `# geometry_hash = <hex>` so they can be reused across configurations
//! that differ only in Monte Carlo settings.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::{DirectionName, ExperimentConfig};
use crate::domains::{relaxation_fit, DomainError, DomainGeometry, Margins, RelaxationFit, ThresholdTable};
use crate::exit::{
    run_ensemble, tag_epoch_events, EventCounts, ExitCause, ExitError, ExitProblem, ExitRecord, Linearization,
    PathOptions,
};
use crate::noise::{NoiseError, NoiseSpec};
use crate::pde::PdeError;
use crate::stats::{EnsembleSummary, StatsError};
use crate::{Field, Model};

pub const RECORD_COLUMNS: [&str; 6] = ["seed_id", "epsilon", "tau", "normalized_tau", "n_large_jumps", "cause"];
pub const TRAJECTORY_COLUMNS: [&str; 4] = ["seed_id", "epsilon", "t", "distance"];

pub const RECORDS_FILE: &str = "records.csv";
pub const TRAJECTORIES_FILE: &str = "trajectories.csv";
pub const FAILURES_FILE: &str = "failures.csv";
pub const EQUILIBRIA_FILE: &str = "equilibria.txt";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.txt";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const SUMMARY_TABLE_FILE: &str = "summary.csv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigErrors),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}, line {line}: {message}")]
    Format { path: PathBuf, line: usize, message: String },
    #[error("{path} was written for config hash {found}, the current config hashes to {expected}")]
    HashMismatch { path: PathBuf, expected: String, found: String },
    #[error("threshold table {0} is missing, stale or incomplete; run `tables` or pass --build-tables")]
    MissingTables(PathBuf),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Exit(#[from] ExitError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// Command-line switches shared by all subcommands.
#[derive(Debug, Clone, PartialEq)]
pub struct Flags {
    pub workers: usize,
    pub build_tables: bool,
    pub dump_trajectories: bool,
    pub resume: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Self { workers: 1, build_tables: false, dump_trajectories: false, resume: false }
    }
}

pub fn hash_line(hash: &str) -> String {
    format!("# config_hash = {hash}")
}

fn parse_hash_line(line: &str) -> Option<&str> {
    line.strip_prefix("# config_hash = ").map(str::trim)
}

/// The model, geometry and noise measure of a configuration.
pub struct Setup {
    pub geometry: DomainGeometry,
    pub spec: NoiseSpec,
}

pub fn setup(cfg: &ExperimentConfig) -> Result<Setup, CliError> {
    let model = Model::new(cfg.model_params())?;
    let opts = cfg.geometry_options(&model);
    let geometry = DomainGeometry::new(model, opts)?;
    let n = cfg.model.n_modes;
    let pairs = cfg
        .noise
        .directions
        .iter()
        .zip(&cfg.noise.weights)
        .map(|(d, &w)| {
            let profile = match d {
                DirectionName::Mode(k) => Field::mode(n, *k),
                DirectionName::Phi => geometry.phi_plus().clone(),
            };
            (profile, w)
        })
        .collect();
    let spec = NoiseSpec::symmetric(cfg.noise.alpha, pairs, cfg.noise.r_min)?;
    Ok(Setup { geometry, spec })
}

/// `0` and the three nested margins at every `epsilon` of the grid.
pub fn required_deltas(cfg: &ExperimentConfig) -> Vec<f64> {
    let mut out = vec![0.0];
    for &eps in &cfg.scaling.epsilon_grid {
        for d in Margins::new(&cfg.scaling_at(eps)).all() {
            if !out.iter().any(|x: &f64| x.to_bits() == d.to_bits()) {
                out.push(d);
            }
        }
    }
    out
}

/// Reads the cached table if it exists and was built for the same geometry.
pub fn load_table(cfg: &ExperimentConfig) -> Result<Option<ThresholdTable>, CliError> {
    let path = cfg.table_path();
    let file = match File::open(&path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(io_err(&path)(e)),
    };
    let (table, preamble) = ThresholdTable::read_from(BufReader::new(file))?;
    let want = format!("geometry_hash = {}", cfg.geometry_hash());
    Ok(preamble.contains(&want).then_some(table))
}

fn write_table(cfg: &ExperimentConfig, table: &ThresholdTable) -> Result<PathBuf, CliError> {
    let path = cfg.table_path();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let preamble = [format!("config_hash = {}", cfg.hash()), format!("geometry_hash = {}", cfg.geometry_hash())];
    let tmp = path.with_extension("tmp");
    let mut w = BufWriter::new(File::create(&tmp).map_err(io_err(&tmp))?);
    table.write_to(&mut w, &preamble).map_err(io_err(&tmp))?;
    w.flush().map_err(io_err(&tmp))?;
    drop(w);
    fs::rename(&tmp, &path).map_err(io_err(&path))?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TablesOutcome {
    pub path: PathBuf,
    pub rows: usize,
    pub reused: bool,
}

/// Builds or refreshes the threshold table for every margin the configuration needs.
/// `--build-tables` discards any cached rows.
pub fn cmd_tables(cfg: &ExperimentConfig, flags: &Flags) -> Result<TablesOutcome, CliError> {
    let s = setup(cfg)?;
    let (table, reused) = refresh_table(cfg, flags, &s, true)?;
    Ok(TablesOutcome { path: cfg.table_path(), rows: table.entries().len(), reused })
}

fn refresh_table(
    cfg: &ExperimentConfig,
    flags: &Flags,
    s: &Setup,
    allow_build: bool,
) -> Result<(ThresholdTable, bool), CliError> {
    let deltas = required_deltas(cfg);
    let cached = if flags.build_tables { None } else { load_table(cfg)? };
    if let Some(t) = &cached {
        if deltas.iter().all(|&d| t.covers(&s.spec, d)) {
            return Ok((cached.unwrap(), true));
        }
    }
    if !allow_build {
        return Err(CliError::MissingTables(cfg.table_path()));
    }
    let mut table = cached.unwrap_or_else(|| ThresholdTable::new(cfg.model.lambda));
    table.extend_parallel(&s.geometry, &s.spec, &deltas, flags.workers)?;
    write_table(cfg, &table)?;
    Ok((table, false))
}

fn relaxation(cfg: &ExperimentConfig, s: &Setup, table: &ThresholdTable) -> Result<Option<RelaxationFit>, CliError> {
    if cfg.scaling.epsilon_grid.len() < 2 {
        return Ok(None);
    }
    let sc = cfg.scaling_at(cfg.scaling.epsilon_grid[0]);
    Ok(Some(relaxation_fit(&s.geometry, &s.spec, table, &sc, &cfg.scaling.epsilon_grid)?))
}

/// Equilibria, their residuals and energies, and the relaxation fit
/// `T(epsilon) = T_rec + kappa gamma |ln epsilon|`.
pub fn cmd_equilibria(cfg: &ExperimentConfig, flags: &Flags) -> Result<PathBuf, CliError> {
    let s = setup(cfg)?;
    let g = &s.geometry;
    let model = g.model();
    let mut text = format!("{}\n", hash_line(&cfg.hash()));
    text += &format!("lambda = {}\n", cfg.model.lambda);
    let eq = g.equilibria();
    text += &format!("equilibria = {}\n", eq.states.len());
    for (k, (u, residual)) in eq.states.iter().zip(&eq.residuals).enumerate() {
        text += &format!("equilibrium.{k}.mean = {}\n", u.mean());
        text += &format!("equilibrium.{k}.sup = {}\n", model.sup_norm(u));
        text += &format!("equilibrium.{k}.energy = {}\n", model.energy(u));
        text += &format!("equilibrium.{k}.residual = {residual}\n");
    }
    let coeffs: Vec<String> = g.phi_plus().coeffs().iter().map(|c| c.to_string()).collect();
    text += &format!("phi_plus = {}\n", coeffs.join(", "));
    text += &format!("trap_radius = {}\n", g.trap_radius());
    if let Some(e) = g.separatrix_energy() {
        text += &format!("separatrix_energy = {e}\n");
    }
    let (table, _) = match load_table(cfg)? {
        Some(t) if required_deltas(cfg).iter().all(|&d| t.covers(&s.spec, d)) => (t, true),
        _ => {
            let mut t = ThresholdTable::new(cfg.model.lambda);
            let mut deltas = vec![0.0];
            deltas.extend(cfg.scaling.epsilon_grid.iter().map(|&e| cfg.scaling_at(e).delta()));
            t.extend_parallel(g, &s.spec, &deltas, flags.workers)?;
            (t, false)
        }
    };
    match relaxation(cfg, &s, &table)? {
        Some(fit) => {
            for (eps, t) in &fit.points {
                text += &format!("relaxation[{eps}] = {t}\n");
            }
            text += &format!("t_rec = {}\nkappa = {}\nr_squared = {}\n", fit.t_rec, fit.kappa, fit.r_squared);
        }
        None => text += "t_rec = nan\nkappa = nan\n",
    }
    fs::create_dir_all(&cfg.io.out_dir).map_err(io_err(&cfg.io.out_dir))?;
    let path = cfg.io.out_dir.join(EQUILIBRIA_FILE);
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

/// Formats one record row.
pub fn record_row(r: &ExitRecord) -> [String; 6] {
    [
        r.seed_id.to_string(),
        r.epsilon.to_string(),
        r.tau.to_string(),
        r.normalized_tau.to_string(),
        r.n_large_jumps.to_string(),
        r.cause.as_str().to_string(),
    ]
}

/// Reads a record file. Its hash line must match `expected` when given. With
/// `drop_partial_tail` an unterminated last line (an interrupted write) is ignored.
pub fn read_records(
    path: &Path,
    expected: Option<&str>,
    drop_partial_tail: bool,
) -> Result<(Vec<ExitRecord>, String), CliError> {
    let mut text = fs::read_to_string(path).map_err(io_err(path))?;
    if drop_partial_tail && !text.ends_with('\n') {
        let keep = text.rfind('\n').map_or(0, |i| i + 1);
        text.truncate(keep);
    }
    let fmt = |line: usize, message: String| CliError::Format { path: path.to_path_buf(), line, message };
    let first = text.lines().next().unwrap_or("");
    let hash = parse_hash_line(first).ok_or_else(|| fmt(1, "missing `# config_hash = ...` header".into()))?;
    if let Some(want) = expected {
        if hash != want {
            return Err(CliError::HashMismatch {
                path: path.to_path_buf(),
                expected: want.to_string(),
                found: hash.to_string(),
            });
        }
    }
    let hash = hash.to_string();
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| fmt(2, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != RECORD_COLUMNS {
        return Err(fmt(2, format!("expected columns `{}`", RECORD_COLUMNS.join(","))));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| fmt(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.len() != RECORD_COLUMNS.len() {
            return Err(fmt(line, format!("expected {} columns, found {}", RECORD_COLUMNS.len(), row.len())));
        }
        let f = |k: usize| row[k].parse::<f64>().map_err(|e| fmt(line, format!("{}: {e}", RECORD_COLUMNS[k])));
        out.push(ExitRecord {
            seed_id: row[0].parse().map_err(|e| fmt(line, format!("seed_id: {e}")))?,
            epsilon: f(1)?,
            tau: f(2)?,
            normalized_tau: f(3)?,
            n_large_jumps: row[4].parse().map_err(|e| fmt(line, format!("n_large_jumps: {e}")))?,
            cause: row[5].parse::<ExitCause>().map_err(|e| fmt(line, e))?,
        });
    }
    Ok((out, hash))
}

fn write_csv_file<I, R>(path: &Path, hash: &str, columns: &[&str], rows: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let tmp = path.with_extension("tmp");
    let mut file = BufWriter::new(File::create(&tmp).map_err(io_err(&tmp))?);
    writeln!(file, "{}", hash_line(hash)).map_err(io_err(&tmp))?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| CliError::Io { path: tmp.clone(), source: e.into() };
    w.write_record(columns).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(&tmp))?;
    drop(w);
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Opens `path` for appending streamed rows, writing the header lines if it is new.
fn open_stream(path: &Path, hash: &str, columns: &[&str]) -> Result<csv::Writer<File>, CliError> {
    let fresh = !path.exists();
    let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    if fresh {
        writeln!(file, "{}", hash_line(hash)).map_err(io_err(path))?;
        writeln!(file, "{}", columns.join(",")).map_err(io_err(path))?;
    }
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(file))
}

/// Trajectory rows `(seed_id, line)` of an existing dump; the header lines are skipped.
fn read_trajectory_lines(path: &Path, hash: &str) -> Result<Vec<(u64, String)>, CliError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if k == 0 {
            if parse_hash_line(&line) != Some(hash) {
                return Err(CliError::HashMismatch {
                    path: path.to_path_buf(),
                    expected: hash.to_string(),
                    found: parse_hash_line(&line).unwrap_or("").to_string(),
                });
            }
            continue;
        }
        if k == 1 || line.trim().is_empty() {
            continue;
        }
        if let Some(id) = line.split(',').next().and_then(|s| s.parse::<u64>().ok()) {
            out.push((id, line));
        }
    }
    Ok(out)
}

/// What one `run` invocation did.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub records_path: PathBuf,
    /// Records in the file after the run.
    pub total_records: usize,
    /// Paths simulated by this invocation.
    pub simulated: usize,
    /// Smallest `seed_id` not yet completed when the run started.
    pub resumed_from: u64,
    pub failures: usize,
    /// `(epsilon, censor fraction)` of this invocation's paths.
    pub censor_fractions: Vec<(f64, f64)>,
    /// `(epsilon, counts)` when diagnostics were collected.
    pub events: Vec<(f64, EventCounts)>,
}

/// `seed_id = epsilon_index * n_paths + path`.
pub fn seed_id(cfg: &ExperimentConfig, eps_index: usize, path: usize) -> u64 {
    (eps_index * cfg.mc.n_paths + path) as u64
}

/// Runs the ensemble at every `epsilon` of the grid and streams records to
/// `records.csv`. On completion the file is rewritten sorted by `seed_id`.
/// With `--resume` the completed `seed_id`s of an existing file are kept and
/// only the rest is simulated.
pub fn cmd_run(cfg: &ExperimentConfig, flags: &Flags) -> Result<RunOutcome, CliError> {
    let hash = cfg.hash();
    let s = setup(cfg)?;
    let (table, _) = refresh_table(cfg, flags, &s, flags.build_tables)?;
    let out_dir = &cfg.io.out_dir;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let records_path = out_dir.join(RECORDS_FILE);
    let traj_path = out_dir.join(TRAJECTORIES_FILE);
    let failures_path = out_dir.join(FAILURES_FILE);
    let dump = flags.dump_trajectories || cfg.io.dump_trajectories;

    let mut records = Vec::new();
    let mut trajectories = Vec::new();
    if flags.resume && records_path.exists() {
        records = read_records(&records_path, Some(&hash), true)?.0;
        if dump && traj_path.exists() {
            trajectories = read_trajectory_lines(&traj_path, &hash)?;
        }
    }
    let done: BTreeSet<u64> = records.iter().map(|r| r.seed_id).collect();
    let resumed_from = (0u64..).find(|id| !done.contains(id)).unwrap_or(0);
    trajectories.retain(|(id, _)| done.contains(id));
    write_csv_file(&records_path, &hash, &RECORD_COLUMNS, records.iter().map(record_row))?;
    if dump {
        write_trajectory_file(&traj_path, &hash, &trajectories)?;
    } else if traj_path.exists() {
        fs::remove_file(&traj_path).map_err(io_err(&traj_path))?;
    }
    let _ = fs::remove_file(&failures_path);

    let basin = cfg.mc.start;
    let phi = s.geometry.phi(basin).clone();
    let lin = Linearization::new(s.geometry.model(), &phi);
    let horizon_fit = if cfg.mc.diagnostics { relaxation(cfg, &s, &table)? } else { None };
    let mut rec_w = open_stream(&records_path, &hash, &RECORD_COLUMNS)?;
    let mut traj_w = if dump { Some(open_stream(&traj_path, &hash, &TRAJECTORY_COLUMNS)?) } else { None };
    let mut outcome = RunOutcome {
        records_path: records_path.clone(),
        total_records: 0,
        simulated: 0,
        resumed_from,
        failures: 0,
        censor_fractions: Vec::new(),
        events: Vec::new(),
    };
    for (k, &eps) in cfg.scaling.epsilon_grid.iter().enumerate() {
        let ids: Vec<u64> = (0..cfg.mc.n_paths).map(|p| seed_id(cfg, k, p)).filter(|id| !done.contains(id)).collect();
        if ids.is_empty() {
            continue;
        }
        let scaling = cfg.scaling_at(eps);
        let opts = PathOptions {
            t_max_factor: cfg.mc.t_max_path_factor,
            diagnostics: cfg.mc.diagnostics,
            trajectory: dump,
            ..PathOptions::default()
        };
        let problem = ExitProblem::new(&s.geometry, &s.spec, &table, &lin, scaling, basin, opts)?;
        let run = run_ensemble(&problem, &phi, cfg.mc.master_seed, &ids, flags.workers, |o| {
            rec_w.write_record(record_row(&o.record)).map_err(std::io::Error::from)?;
            rec_w.flush()?;
            if let Some(w) = traj_w.as_mut() {
                for (t, d) in &o.trajectory {
                    w.write_record([o.record.seed_id.to_string(), eps.to_string(), t.to_string(), d.to_string()])
                        .map_err(std::io::Error::from)?;
                }
                w.flush()?;
            }
            Ok(())
        })?;
        if !run.failures.is_empty() {
            let mut w = open_stream(&failures_path, &hash, &["seed_id", "epsilon", "message"])?;
            for (id, msg) in &run.failures {
                w.write_record([id.to_string(), eps.to_string(), msg.clone()])
                    .map_err(|e| CliError::Io { path: failures_path.clone(), source: e.into() })?;
            }
            w.flush().map_err(io_err(&failures_path))?;
        }
        outcome.simulated += run.records.len();
        outcome.failures += run.failures.len();
        outcome.censor_fractions.push((eps, run.censor_fraction()));
        if cfg.mc.diagnostics {
            let horizon = match &horizon_fit {
                Some(fit) => fit.horizon(eps),
                None => 0.0,
            };
            let counts = tag_epoch_events(&run.epochs, &s.spec, &table, &scaling, basin, horizon)?;
            outcome.events.push((eps, counts));
        }
    }
    drop(rec_w);
    drop(traj_w);

    let (mut all, _) = read_records(&records_path, Some(&hash), false)?;
    all.sort_by_key(|r| r.seed_id);
    write_csv_file(&records_path, &hash, &RECORD_COLUMNS, all.iter().map(record_row))?;
    outcome.total_records = all.len();
    if dump {
        let mut lines = read_trajectory_lines(&traj_path, &hash)?;
        lines.sort_by_key(|(id, _)| *id);
        write_trajectory_file(&traj_path, &hash, &lines)?;
    }
    if cfg.mc.diagnostics {
        write_diagnostics(cfg, &outcome.events, horizon_fit.as_ref())?;
    }
    Ok(outcome)
}

fn write_trajectory_file(path: &Path, hash: &str, lines: &[(u64, String)]) -> Result<(), CliError> {
    let mut text = format!("{}\n{}\n", hash_line(hash), TRAJECTORY_COLUMNS.join(","));
    for (_, l) in lines {
        text += l;
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

fn write_diagnostics(
    cfg: &ExperimentConfig,
    events: &[(f64, EventCounts)],
    fit: Option<&RelaxationFit>,
) -> Result<(), CliError> {
    let mut text = format!("{}\n", hash_line(&cfg.hash()));
    if let Some(f) = fit {
        text += &format!("t_rec = {}\nkappa = {}\n", f.t_rec, f.kappa);
    }
    for (g, (eps, c)) in events.iter().enumerate() {
        let p = format!("group.{g}");
        text += &format!("{p}.epsilon = {eps}\n{p}.epochs = {}\n{p}.a = {}\n{p}.b = {}\n", c.epochs, c.a, c.b);
        text += &format!("{p}.c = {}\n{p}.a_minus = {}\n{p}.e_complement = {}\n", c.c, c.a_minus, c.e_complement);
        text += &format!("{p}.long_epochs = {}\n", c.long_epochs);
        for (k, [premise, viol]) in c.inclusions.iter().enumerate() {
            text += &format!("{p}.inclusion[{}].premise = {premise}\n", k + 1);
            text += &format!("{p}.inclusion[{}].violations = {viol}\n", k + 1);
        }
    }
    let path = cfg.io.out_dir.join(DIAGNOSTICS_FILE);
    fs::write(&path, text).map_err(io_err(&path))
}

/// Aggregates `records.csv` into `summary.txt` (one statistic per line) and the
/// plot-ready `summary.csv`. Refuses records written under a different config hash.
pub fn cmd_summarize(cfg: &ExperimentConfig, _flags: &Flags) -> Result<EnsembleSummary, CliError> {
    let hash = cfg.hash();
    let path = cfg.io.out_dir.join(RECORDS_FILE);
    let (records, _) = read_records(&path, Some(&hash), false)?;
    let summary = EnsembleSummary::from_records(&records, &cfg.scaling.epsilon_grid, &cfg.mc.theta_grid)?;
    let text_path = cfg.io.out_dir.join(SUMMARY_FILE);
    fs::write(&text_path, format!("{}\n{}", hash_line(&hash), summary.to_text())).map_err(io_err(&text_path))?;
    let table_path = cfg.io.out_dir.join(SUMMARY_TABLE_FILE);
    fs::write(&table_path, format!("{}\n{}", hash_line(&hash), summary.to_table())).map_err(io_err(&table_path))?;
    Ok(summary)
}
