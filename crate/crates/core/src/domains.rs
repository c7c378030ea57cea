//! Domains of attraction of `phi+-`, their reduced versions `D(delta)`, and the
//! characteristic exit rate.
//!
//! A state is classified by following the deterministic flow until it settles
//! near one of the stable equilibria. Membership in a reduced domain is tested
//! with a finite set of sup-norm probes along the trajectory. Two shortcuts keep
//! this affordable:
//!
//! * a trap ball: the sup-ball of radius `trap_radius` around `phi+-` is taken to
//!   lie in the basin, its radius being a safety fraction of the smallest
//!   measured threshold over a set of smooth directions;
//! * an energy certificate (three-equilibrium regime only): the energy is a strict
//!   Lyapunov function, every point on the separatrix flows to the saddle `0`, so
//!   if the straight segment from `phi+` to `x` stays below `E(0)` then `x` lies in
//!   the basin of `phi+`. Along the segment the energy is a quartic polynomial.

use std::io::{BufRead, Write};

use crate::noise::{NoiseSpec, ScalingParams};
use crate::pde::{Equilibria, Etdrk4, PdeError, Workspace, BLOWUP_LIMIT};
use crate::{Field, Model};

/// Upper end of the bracket search for threshold radii; beyond it the radius is infinite.
pub const THRESHOLD_CAP: f64 = 128.0;
/// Relative width at which threshold bisection stops.
pub const THRESHOLD_REL_WIDTH: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Basin {
    Plus,
    Minus,
    Unresolved,
}

impl Basin {
    pub fn flip(self) -> Self {
        match self {
            Basin::Plus => Basin::Minus,
            Basin::Minus => Basin::Plus,
            Basin::Unresolved => Basin::Unresolved,
        }
    }

    pub fn sign(self) -> i8 {
        match self {
            Basin::Plus => 1,
            Basin::Minus => -1,
            Basin::Unresolved => 0,
        }
    }

    pub fn from_sign(sign: i8) -> Option<Self> {
        match sign {
            1 => Some(Basin::Plus),
            -1 => Some(Basin::Minus),
            _ => None,
        }
    }

    fn index(self) -> usize {
        match self {
            Basin::Minus => 1,
            _ => 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DomainError {
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error("base state is not attracted to a stable equilibrium")]
    UnresolvedBase,
    #[error("invalid geometry option: {0}")]
    InvalidOption(String),
    #[error("no threshold entry for sign {sign}, direction {direction}, delta {delta}")]
    MissingEntry { sign: i8, direction: usize, delta: f64 },
    #[error("threshold table line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometryOptions {
    /// Sup-distance at which a trajectory counts as converged.
    pub classify_tol: f64,
    pub t_classify_max: f64,
    /// Spacing of membership samples and step of the classification flow.
    pub dt_probe: f64,
    /// Number of probes `+-e_1 .. +-e_{K/2}`, sup-normalised.
    pub probe_count: usize,
    /// Fraction of the smallest measured sup-threshold used as trap radius.
    pub trap_safety: f64,
    pub use_trap: bool,
    pub use_energy_certificate: bool,
}

impl Default for GeometryOptions {
    fn default() -> Self {
        Self {
            classify_tol: 1e-3,
            t_classify_max: 50.0,
            dt_probe: 1e-2,
            probe_count: 8,
            trap_safety: 0.5,
            use_trap: true,
            use_energy_certificate: true,
        }
    }
}

impl GeometryOptions {
    /// Defaults with `dt_probe = factor * dt` of the model.
    pub fn for_model(model: &Model, dt_probe_factor: f64) -> Self {
        Self { dt_probe: dt_probe_factor * model.params().dt, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        let bad = |m: &str| Err(DomainError::InvalidOption(m.to_string()));
        if !(self.classify_tol > 0.0) {
            return bad("classify_tol must be positive");
        }
        if !(self.t_classify_max > 0.0) {
            return bad("t_classify_max must be positive");
        }
        if !(self.dt_probe > 0.0) {
            return bad("dt_probe must be positive");
        }
        if self.probe_count == 0 || !self.probe_count.is_multiple_of(2) {
            return bad("probe_count must be a positive even number");
        }
        if !(self.trap_safety > 0.0 && self.trap_safety < 1.0) {
            return bad("trap_safety must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Reusable buffers for repeated flow calls.
pub struct FlowScratch {
    ws: Workspace<f64>,
    grid: Vec<f64>,
}

impl FlowScratch {
    pub fn new(model: &Model) -> Self {
        Self { ws: Workspace::new(model), grid: vec![0.0; model.grid().n_nodes()] }
    }
}

#[derive(Clone, Debug)]
pub struct DomainGeometry {
    model: Model,
    equilibria: Equilibria<f64>,
    phi: [Field; 2],
    phi_grid: [Vec<f64>; 2],
    phi_energy: f64,
    opts: GeometryOptions,
    probes: Vec<Field>,
    /// ETDRK4 steppers with `h = dt_probe / 2^j`.
    steppers: Vec<Etdrk4<f64>>,
    trap_radius: f64,
    /// Lowest energy on the separatrix, when it is known.
    separatrix_energy: Option<f64>,
}

const MAX_HALVINGS: usize = 30;

impl DomainGeometry {
    pub fn new(model: Model, opts: GeometryOptions) -> Result<Self, DomainError> {
        opts.validate()?;
        let equilibria = model.find_equilibria()?;
        let n = model.n_modes();
        let grid_of = |f: &Field| {
            let mut g = vec![0.0; model.grid().n_nodes()];
            model.grid().to_grid(f.coeffs(), &mut g);
            g
        };
        let phi = [equilibria.plus.clone(), equilibria.minus.clone()];
        let phi_grid = [grid_of(&phi[0]), grid_of(&phi[1])];
        let phi_energy = model.energy(&phi[0]);
        let mut probes = Vec::with_capacity(opts.probe_count);
        for k in 1..=(opts.probe_count / 2).min(n) {
            let e = Field::mode(n, k);
            let p = e.scaled(1.0 / model.sup_norm(&e));
            probes.push(p.clone());
            probes.push(-&p);
        }
        let steppers = (0..=MAX_HALVINGS).map(|j| model.stepper(opts.dt_probe / (1u64 << j) as f64)).collect();
        // with three equilibria the separatrix is the stable set of the saddle 0
        let four_pi2 = 4.0 * std::f64::consts::PI.powi(2);
        let separatrix_energy = (model.lambda() < four_pi2 && equilibria.states.len() == 3).then_some(0.0);
        let mut geom = Self {
            model,
            equilibria,
            phi,
            phi_grid,
            phi_energy,
            opts,
            probes,
            steppers,
            trap_radius: 0.0,
            separatrix_energy,
        };
        if geom.opts.use_trap {
            geom.trap_radius = geom.opts.trap_safety * geom.min_sup_threshold()?;
        }
        Ok(geom)
    }

    /// Smallest sup-size of a basin-leaving perturbation of `phi+` over the probe
    /// directions, `-phi+` itself and a flat downward shift.
    fn min_sup_threshold(&self) -> Result<f64, DomainError> {
        let n = self.model.n_modes();
        let mut dirs = self.probes.clone();
        let phi = &self.phi[0];
        dirs.push(phi.scaled(-1.0 / self.model.sup_norm(phi)));
        // sine series of the constant function, odd modes only
        let flat = Field::from_coeffs(
            (0..n)
                .map(|i| if i % 2 == 0 { -2.0 * std::f64::consts::SQRT_2 / Field::wavenumber(i) } else { 0.0 })
                .collect(),
        );
        dirs.push(flat.scaled(1.0 / self.model.sup_norm(&flat)));
        let mut best = f64::INFINITY;
        for d in &dirs {
            best = best.min(self.threshold_radius(phi, d, 0.0)?);
        }
        Ok(best)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn equilibria(&self) -> &Equilibria<f64> {
        &self.equilibria
    }

    pub fn phi_plus(&self) -> &Field {
        &self.phi[0]
    }

    pub fn phi_minus(&self) -> &Field {
        &self.phi[1]
    }

    /// `phi+` for `Plus`, `phi-` for `Minus`.
    pub fn phi(&self, basin: Basin) -> &Field {
        &self.phi[basin.index()]
    }

    pub fn options(&self) -> &GeometryOptions {
        &self.opts
    }

    pub fn probes(&self) -> &[Field] {
        &self.probes
    }

    /// Zero when the trap shortcut is disabled.
    pub fn trap_radius(&self) -> f64 {
        self.trap_radius
    }

    pub fn separatrix_energy(&self) -> Option<f64> {
        self.separatrix_energy
    }

    /// Sup-distance from `x` to `phi(basin)`.
    pub fn distance_to(&self, x: &Field, basin: Basin) -> f64 {
        self.model.sup_distance(x, self.phi(basin))
    }

    fn grid_distance(&self, grid: &[f64], basin: Basin) -> f64 {
        grid.iter().zip(&self.phi_grid[basin.index()]).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    fn substep_level(&self, amax: f64) -> usize {
        // keeps h * lambda * 3 |u|^2 below the explicit stability range
        let stiff = 3.0 * self.model.lambda() * amax * amax;
        let mut j = 0;
        while j < MAX_HALVINGS && self.opts.dt_probe / (1u64 << j) as f64 * stiff > 2.0 {
            j += 1;
        }
        j
    }

    /// Advances `u` by exactly `dt` with steps of at most `dt_probe`, halved while
    /// the state is large.
    pub fn advance(&self, u: &mut Field, dt: f64) -> Result<(), PdeError> {
        let mut sc = FlowScratch::new(&self.model);
        self.advance_scratch(u, dt, &mut sc)
    }

    pub fn advance_scratch(&self, u: &mut Field, dt: f64, sc: &mut FlowScratch) -> Result<(), PdeError> {
        if dt < 0.0 {
            return Err(PdeError::NegativeTime(dt));
        }
        let mut left = dt;
        while left > 0.0 {
            self.model.grid().to_grid(u.coeffs(), &mut sc.grid);
            let amax = sc.grid.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            if !(amax <= BLOWUP_LIMIT) {
                return Err(PdeError::IntegrationFailure { time: dt - left });
            }
            let j = self.substep_level(amax);
            let st = &self.steppers[j];
            if st.h() <= left * (1.0 + 1e-12) {
                st.step(&self.model, u.coeffs_mut(), &mut sc.ws);
                left -= st.h();
                if left < 1e-12 * dt {
                    left = 0.0;
                }
            } else {
                let tail = self.model.stepper(left);
                tail.step(&self.model, u.coeffs_mut(), &mut sc.ws);
                left = 0.0;
            }
        }
        Ok(())
    }

    /// Energy certificate: `Some(basin)` if the segment from `phi(basin)` to `x`
    /// stays strictly below the separatrix energy.
    fn energy_certificate(&self, x: &Field, grid: &[f64]) -> Option<Basin> {
        if !self.opts.use_energy_certificate {
            return None;
        }
        let e_sep = self.separatrix_energy?;
        let lw = self.model.lambda() * self.model.grid().weight();
        let margin = 1e-9 * (1.0 + self.phi_energy.abs());
        for basin in [Basin::Plus, Basin::Minus] {
            let phi = self.phi(basin);
            let pg = &self.phi_grid[basin.index()];
            let (mut c1, mut c2, mut c3, mut c4) = (0.0, 0.0, 0.0, 0.0);
            for (&g, &a) in grid.iter().zip(pg) {
                let b = g - a;
                let b2 = b * b;
                c1 += (a * a * a - a) * b;
                c2 += (1.5 * a * a - 0.5) * b2;
                c3 += a * b2 * b;
                c4 += 0.25 * b2 * b2;
            }
            let d = x - phi;
            let p = [self.phi_energy, phi.h_dot(&d) + lw * c1, 0.5 * d.h_dot(&d) + lw * c2, lw * c3, lw * c4];
            let eval = |s: f64| (((p[4] * s + p[3]) * s + p[2]) * s + p[1]) * s + p[0];
            if eval(1.0) >= e_sep - margin {
                return None;
            }
            const SAMPLES: usize = 32;
            let lip = p[1].abs() + 2.0 * p[2].abs() + 3.0 * p[3].abs() + 4.0 * p[4].abs();
            let top = (0..=SAMPLES).map(|k| eval(k as f64 / SAMPLES as f64)).fold(f64::NEG_INFINITY, f64::max);
            if top + lip / (2.0 * SAMPLES as f64) < e_sep - margin {
                return Some(basin);
            }
        }
        None
    }

    /// Basin of `x`, decided by flowing until the trajectory is within
    /// `classify_tol` of `phi+-` (or inside a certified region).
    pub fn classify(&self, x: &Field) -> Result<Basin, PdeError> {
        self.classify_timed(x).map(|(b, _)| b)
    }

    /// Basin together with the flow time needed to decide it.
    pub fn classify_timed(&self, x: &Field) -> Result<(Basin, f64), PdeError> {
        self.model.check_modes(x)?;
        let mut sc = FlowScratch::new(&self.model);
        self.classify_with(x.clone(), &mut sc)
    }

    fn classify_with(&self, mut u: Field, sc: &mut FlowScratch) -> Result<(Basin, f64), PdeError> {
        let tol = self.opts.classify_tol.max(self.trap_radius);
        let mut t = 0.0;
        loop {
            self.model.grid().to_grid(u.coeffs(), &mut sc.grid);
            let amax = sc.grid.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            if !(amax <= BLOWUP_LIMIT) {
                return Err(PdeError::IntegrationFailure { time: t });
            }
            if self.grid_distance(&sc.grid, Basin::Plus) < tol {
                return Ok((Basin::Plus, t));
            }
            if self.grid_distance(&sc.grid, Basin::Minus) < tol {
                return Ok((Basin::Minus, t));
            }
            if let Some(b) = self.energy_certificate(&u, &sc.grid) {
                return Ok((b, t));
            }
            if t >= self.opts.t_classify_max {
                return Ok((Basin::Unresolved, t));
            }
            let st = &self.steppers[self.substep_level(amax)];
            st.step(&self.model, u.coeffs_mut(), &mut sc.ws);
            t += st.h();
        }
    }

    /// Probe approximation of `x in D(delta)` for the domain of attraction of
    /// `basin`: `x` must be attracted to `phi(basin)` and along its trajectory,
    /// sampled every `dt_probe`, each probe `u(t_j) + delta p_k` must be as well.
    pub fn in_reduced_domain(&self, x: &Field, basin: Basin, delta: f64) -> Result<bool, PdeError> {
        if !(delta >= 0.0) {
            return Err(PdeError::InvalidParams(format!("margin delta = {delta} must be non-negative")));
        }
        self.model.check_modes(x)?;
        let mut sc = FlowScratch::new(&self.model);
        let mut probe_sc = FlowScratch::new(&self.model);
        if basin == Basin::Unresolved || self.classify_with(x.clone(), &mut sc)?.0 != basin {
            return Ok(false);
        }
        let mut u = x.clone();
        let mut t = 0.0;
        loop {
            self.model.grid().to_grid(u.coeffs(), &mut sc.grid);
            let dist = self.grid_distance(&sc.grid, basin);
            if self.trap_radius > 0.0 && dist + delta <= self.trap_radius {
                return Ok(true);
            }
            if delta > 0.0 {
                for p in &self.probes {
                    let mut y = u.clone();
                    y.axpy(delta, p);
                    if self.classify_with(y, &mut probe_sc)?.0 != basin {
                        return Ok(false);
                    }
                }
            }
            if dist < self.opts.classify_tol {
                return Ok(true);
            }
            if t >= self.opts.t_classify_max {
                return Ok(false);
            }
            self.advance_scratch(&mut u, self.opts.dt_probe, &mut sc)?;
            t += self.opts.dt_probe;
        }
    }

    /// Radius `r*` along the unit direction `v` at which `base + r v` leaves
    /// `D(delta)` of the basin of `base`; infinite if no exit below [`THRESHOLD_CAP`].
    pub fn threshold_radius(&self, base: &Field, v: &Field, delta: f64) -> Result<f64, DomainError> {
        let basin = self.classify(base)?;
        if basin == Basin::Unresolved {
            return Err(DomainError::UnresolvedBase);
        }
        let inside = |r: f64| -> Result<bool, PdeError> {
            let mut x = base.clone();
            x.axpy(r, v);
            if delta == 0.0 {
                Ok(self.classify(&x)? == basin)
            } else {
                self.in_reduced_domain(&x, basin, delta)
            }
        };
        if !inside(0.0)? {
            return Ok(0.0);
        }
        let mut lo = 0.0;
        let mut hi = delta.max(1e-2);
        while inside(hi)? {
            lo = hi;
            hi *= 2.0;
            if hi > THRESHOLD_CAP {
                return Ok(f64::INFINITY);
            }
        }
        while hi - lo > THRESHOLD_REL_WIDTH * hi {
            let mid = 0.5 * (lo + hi);
            if inside(mid)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Margins equal up to a few ulps name the same table row.
fn same_delta(a: f64, b: f64) -> bool {
    (a - b).abs() <= DELTA_MATCH_REL * a.abs().max(b.abs())
}

/// Relative tolerance under which two margins share a table row.
pub const DELTA_MATCH_REL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdEntry {
    pub sign: i8,
    pub direction: usize,
    pub delta: f64,
    pub radius: f64,
}

/// Threshold radii `r_i^+-(delta)` of the noise directions, per margin `delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdTable {
    lambda: f64,
    entries: Vec<ThresholdEntry>,
}

pub const TABLE_COLUMNS: &str = "lambda,sign,direction_index,delta,radius";

impl ThresholdTable {
    pub fn new(lambda: f64) -> Self {
        Self { lambda, entries: Vec::new() }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn entries(&self) -> &[ThresholdEntry] {
        &self.entries
    }

    pub fn insert(&mut self, entry: ThresholdEntry) {
        match self
            .entries
            .iter_mut()
            .find(|e| e.sign == entry.sign && e.direction == entry.direction && same_delta(e.delta, entry.delta))
        {
            Some(e) => *e = entry,
            None => self.entries.push(entry),
        }
    }

    pub fn radius(&self, sign: i8, direction: usize, delta: f64) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.sign == sign && e.direction == direction && same_delta(e.delta, delta))
            .map(|e| e.radius)
    }

    pub fn require(&self, sign: i8, direction: usize, delta: f64) -> Result<f64, DomainError> {
        self.radius(sign, direction, delta).ok_or(DomainError::MissingEntry { sign, direction, delta })
    }

    /// Whether every direction of `spec` has an entry for both signs at `delta`.
    pub fn covers(&self, spec: &NoiseSpec, delta: f64) -> bool {
        (0..spec.directions().len()).all(|i| self.radius(1, i, delta).is_some() && self.radius(-1, i, delta).is_some())
    }

    /// Computes the missing rows for `deltas`. Rows for `phi-` follow from those of
    /// `phi+` by odd symmetry: the discrete flow satisfies `u(t; -x) = -u(t; x)`
    /// exactly, so `r_i^-(delta) = r_{mirror(i)}^+(delta)`.
    pub fn extend(&mut self, geom: &DomainGeometry, spec: &NoiseSpec, deltas: &[f64]) -> Result<(), DomainError> {
        self.extend_parallel(geom, spec, deltas, 1)
    }

    /// As [`Self::extend`], spreading the `(direction, delta)` pairs over `workers` threads.
    pub fn extend_parallel(
        &mut self,
        geom: &DomainGeometry,
        spec: &NoiseSpec,
        deltas: &[f64],
        workers: usize,
    ) -> Result<(), DomainError> {
        let mut jobs: Vec<(usize, f64)> = Vec::new();
        for &delta in deltas {
            for (i, d) in spec.directions().iter().enumerate() {
                let done = self.radius(1, i, delta).is_some() && self.radius(-1, d.mirror, delta).is_some();
                if !done && !jobs.iter().any(|&(j, e)| j == i && same_delta(e, delta)) {
                    jobs.push((i, delta));
                }
            }
        }
        let workers = workers.clamp(1, jobs.len().max(1));
        let radii: Vec<Result<f64, DomainError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let jobs = &jobs;
                    scope.spawn(move || {
                        jobs.iter()
                            .enumerate()
                            .filter(|(k, _)| k % workers == w)
                            .map(|(k, &(i, delta))| {
                                (k, geom.threshold_radius(geom.phi_plus(), &spec.directions()[i].profile, delta))
                            })
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            let mut all: Vec<_> =
                handles.into_iter().flat_map(|h| h.join().expect("threshold worker panicked")).collect();
            all.sort_by_key(|(k, _)| *k);
            all.into_iter().map(|(_, r)| r).collect()
        });
        for (&(i, delta), r) in jobs.iter().zip(radii) {
            let r = r?;
            let mirror = spec.directions()[i].mirror;
            self.insert(ThresholdEntry { sign: 1, direction: i, delta, radius: r });
            self.insert(ThresholdEntry { sign: -1, direction: mirror, delta, radius: r });
        }
        self.entries
            .sort_by(|a, b| a.delta.total_cmp(&b.delta).then(b.sign.cmp(&a.sign)).then(a.direction.cmp(&b.direction)));
        Ok(())
    }

    pub fn build(geom: &DomainGeometry, spec: &NoiseSpec, deltas: &[f64]) -> Result<Self, DomainError> {
        let mut t = Self::new(geom.model().lambda());
        t.extend(geom, spec, deltas)?;
        Ok(t)
    }

    /// Writes `preamble` lines (each prefixed with `# `), the column header and
    /// one row per entry. Values use the shortest round-trip decimal form.
    pub fn write_to<W: Write>(&self, mut w: W, preamble: &[String]) -> std::io::Result<()> {
        for line in preamble {
            writeln!(w, "# {line}")?;
        }
        writeln!(w, "{TABLE_COLUMNS}")?;
        for e in &self.entries {
            writeln!(w, "{},{},{},{},{}", self.lambda, e.sign, e.direction, e.delta, e.radius)?;
        }
        Ok(())
    }

    /// Parses the format of [`Self::write_to`]; returns the preamble lines too.
    pub fn read_from<R: BufRead>(r: R) -> Result<(Self, Vec<String>), DomainError> {
        let mut preamble = Vec::new();
        let mut table: Option<Self> = None;
        let mut seen_header = false;
        for (no, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = no + 1;
            let parse_err = |message: String| DomainError::Parse { line: lineno, message };
            if let Some(rest) = line.strip_prefix('#') {
                if seen_header {
                    return Err(parse_err("comment after the column header".into()));
                }
                preamble.push(rest.strip_prefix(' ').unwrap_or(rest).to_string());
                continue;
            }
            if !seen_header {
                if line.trim() != TABLE_COLUMNS {
                    return Err(parse_err(format!("expected column header `{TABLE_COLUMNS}`")));
                }
                seen_header = true;
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 5 {
                return Err(parse_err(format!("expected 5 columns, found {}", cols.len())));
            }
            let num = |s: &str, what: &str| s.parse::<f64>().map_err(|e| parse_err(format!("{what}: {e}")));
            let lambda = num(cols[0], "lambda")?;
            let sign: i8 = cols[1].parse().map_err(|e| parse_err(format!("sign: {e}")))?;
            if sign != 1 && sign != -1 {
                return Err(parse_err(format!("sign must be 1 or -1, got {sign}")));
            }
            let direction: usize = cols[2].parse().map_err(|e| parse_err(format!("direction_index: {e}")))?;
            let delta = num(cols[3], "delta")?;
            let radius = num(cols[4], "radius")?;
            let t = table.get_or_insert_with(|| Self::new(lambda));
            if t.lambda.to_bits() != lambda.to_bits() {
                return Err(parse_err("rows disagree on lambda".into()));
            }
            t.entries.push(ThresholdEntry { sign, direction, delta, radius });
        }
        if !seen_header {
            return Err(DomainError::Parse { line: preamble.len() + 1, message: "missing column header".into() });
        }
        Ok((table.unwrap_or_else(|| Self::new(f64::NAN)), preamble))
    }
}

/// Nested margins: `D(d1, d2)` is approximated by `D(d1 + d2)` and
/// `D(d1, d2, d3)` by `D(d1 + d2 + d3)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Margins {
    /// `epsilon^gamma`.
    pub single: f64,
    /// `epsilon^gamma + epsilon^(2 gamma)`.
    pub double: f64,
    /// `epsilon^gamma + 2 epsilon^(2 gamma)`.
    pub triple: f64,
}

impl Margins {
    pub fn new(scaling: &ScalingParams) -> Self {
        let d1 = scaling.delta();
        let d2 = d1 * d1;
        Self { single: d1, double: d1 + d2, triple: d1 + 2.0 * d2 }
    }

    pub fn all(&self) -> [f64; 3] {
        [self.single, self.double, self.triple]
    }
}

/// `mu((D_0)^c) = sum_i w_i r_i(0)^(-alpha)`.
pub fn exit_mass(spec: &NoiseSpec, table: &ThresholdTable, sign: i8, delta: f64) -> Result<f64, DomainError> {
    let mut total = 0.0;
    for (i, d) in spec.directions().iter().enumerate() {
        let r = table.require(sign, i, delta)?;
        total += d.weight * r.powf(-spec.alpha());
    }
    Ok(total)
}

/// `lambda(epsilon) = epsilon^alpha sum_i w_i r_i(0)^(-alpha)`.
pub fn characteristic_rate(
    spec: &NoiseSpec,
    table: &ThresholdTable,
    scaling: &ScalingParams,
    sign: i8,
) -> Result<f64, DomainError> {
    Ok(scaling.epsilon.powf(spec.alpha()) * exit_mass(spec, table, sign, 0.0)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisReport {
    /// Some threshold at zero margin is finite.
    pub nontrivial_transitions: bool,
    /// `(epsilon, shell mass)` per grid point.
    pub shell_masses: Vec<(f64, f64)>,
    /// Shell masses are non-increasing as `epsilon` decreases.
    pub shell_decreasing: bool,
}

/// Non-trivial transitions, and the mass of the shell between the full and the
/// twice-reduced domain, `sum_i w_i (r_i(d1 + d2)^-alpha - r_i(0)^-alpha)`, over
/// an `epsilon` grid.
pub fn check_hypotheses(
    spec: &NoiseSpec,
    table: &ThresholdTable,
    scaling: &ScalingParams,
    eps_grid: &[f64],
) -> Result<HypothesisReport, DomainError> {
    let mut finite = false;
    for sign in [1i8, -1] {
        for i in 0..spec.directions().len() {
            finite |= table.require(sign, i, 0.0)?.is_finite();
        }
    }
    let full = exit_mass(spec, table, 1, 0.0)?;
    let mut shell_masses = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let m = Margins::new(&scaling.at_epsilon(eps));
        shell_masses.push((eps, exit_mass(spec, table, 1, m.double)? - full));
    }
    let mut order: Vec<(f64, f64)> = shell_masses.clone();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));
    let shell_decreasing = order.windows(2).all(|w| w[1].1 <= w[0].1);
    Ok(HypothesisReport { nontrivial_transitions: finite, shell_masses, shell_decreasing })
}

/// Time for `u(t; x)` to reach the sup-ball of radius `target` around `phi(basin)`.
pub fn relaxation_time(
    geom: &DomainGeometry,
    x: &Field,
    basin: Basin,
    target: f64,
    t_max: f64,
) -> Result<f64, PdeError> {
    let mut u = x.clone();
    let mut t = 0.0;
    let h = geom.options().dt_probe;
    while geom.distance_to(&u, basin) > target {
        if t >= t_max {
            return Ok(f64::INFINITY);
        }
        geom.advance(&mut u, h)?;
        t += h;
    }
    Ok(t)
}

/// Affine fit `T(epsilon) = T_rec + kappa gamma |ln epsilon|` of relaxation times.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxationFit {
    pub t_rec: f64,
    pub kappa: f64,
    pub gamma: f64,
    /// `(epsilon, time)` samples.
    pub points: Vec<(f64, f64)>,
    pub r_squared: f64,
}

impl RelaxationFit {
    /// `T_rec + kappa gamma |ln epsilon|`.
    pub fn horizon(&self, epsilon: f64) -> f64 {
        self.t_rec + self.kappa * self.gamma * epsilon.ln().abs()
    }
}

/// Worst relaxation time over starting points just inside `D(epsilon^gamma)` along the
/// noise directions, fitted against `|ln epsilon|`. The table must hold the
/// `epsilon^gamma` rows for every grid point.
pub fn relaxation_fit(
    geom: &DomainGeometry,
    spec: &NoiseSpec,
    table: &ThresholdTable,
    scaling: &ScalingParams,
    eps_grid: &[f64],
) -> Result<RelaxationFit, DomainError> {
    let mut points = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let sc = scaling.at_epsilon(eps);
        let delta = sc.delta();
        let target = sc.deviation_level();
        let mut worst = 0.0f64;
        for (i, d) in spec.directions().iter().enumerate() {
            let r = table.require(1, i, delta)?;
            if !r.is_finite() {
                continue;
            }
            let mut x = geom.phi_plus().clone();
            x.axpy(r * (1.0 - THRESHOLD_REL_WIDTH), &d.profile);
            worst = worst.max(relaxation_time(geom, &x, Basin::Plus, target, geom.options().t_classify_max)?);
        }
        points.push((eps, worst));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln().abs()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let (slope, intercept, r_squared) = crate::stats::least_squares(&xs, &ys)
        .map_err(|e| DomainError::InvalidOption(format!("relaxation fit: {e}")))?;
    Ok(RelaxationFit { t_rec: intercept, kappa: slope / scaling.gamma, gamma: scaling.gamma, points, r_squared })
}
