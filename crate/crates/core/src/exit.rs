//! First exit of the noisy path from the reduced domain `D(epsilon^gamma)`.
//!
//! Between large jumps the path is driven by the truncated small-jump process.
//! Close to the equilibrium (sup-deviation at most `v_quiet`) the deviation is
//! integrated in the eigenbasis of the linearisation at `phi+-`: the linear part
//! exactly, the cubic remainder by an exponential Euler step whose length
//! shrinks with the deviation. Small jumps enter at their arrival times. Further
//! out the full nonlinear stepper runs with step `dt_probe` and small jumps are
//! propagated by the heat semigroup from their arrival time to the end of the step.
//!
//! Membership in `D(epsilon^gamma)` is re-tested with the probe test once the state
//! is outside the trap ball and the sup-size of the noise injected since the
//! last positive test exceeds a budget. Positive invariance of `D(delta)` under
//! the deterministic flow makes tests in between redundant.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domains::{characteristic_rate, Basin, DomainError, DomainGeometry, FlowScratch, Margins, ThresholdTable};
use crate::noise::{
    large_jump_rate, pareto_above, small_jump_rate, standard_exponential, NoiseSpec, ScalingParams, TruncatedPareto,
};
use crate::pde::PdeError;
use crate::stats::Estimate;
use crate::{Field, Model};

/// Number of arrival-time bins per step for small-jump propagation.
const BINS: usize = 256;
/// Halvings of `h_quiet` available to the linearised regime.
const QUIET_LEVELS: usize = 8;
/// Paths may fail (and be skipped) up to this fraction of an ensemble.
pub const MAX_FAILURE_FRACTION: f64 = 0.01;

#[derive(Debug, thiserror::Error)]
pub enum ExitError {
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("initial state is not inside the reduced domain")]
    StartOutside,
    #[error("invalid setup: {0}")]
    Setup(String),
    #[error("{failed} of {total} paths failed, more than the tolerated fraction")]
    TooManyFailures { failed: usize, total: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExitCause {
    LargeJump,
    DriftOrSmallNoise,
    Censored,
}

impl ExitCause {
    pub fn as_str(self) -> &'static str {
        match self {
            ExitCause::LargeJump => "large_jump",
            ExitCause::DriftOrSmallNoise => "drift_or_small_noise",
            ExitCause::Censored => "censored",
        }
    }
}

impl std::str::FromStr for ExitCause {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "large_jump" => Ok(ExitCause::LargeJump),
            "drift_or_small_noise" => Ok(ExitCause::DriftOrSmallNoise),
            "censored" => Ok(ExitCause::Censored),
            other => Err(format!("unknown exit cause `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExitRecord {
    pub seed_id: u64,
    pub epsilon: f64,
    pub tau: f64,
    pub normalized_tau: f64,
    pub n_large_jumps: u64,
    pub cause: ExitCause,
}

/// What happened in one inter-jump epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochDiagnostics {
    pub length: f64,
    /// Direction index and unscaled radius of the closing large jump; `None` if
    /// the epoch ended by a between-jump exit or by censoring.
    pub jump: Option<(usize, f64)>,
    /// `||epsilon W||`.
    pub scaled_jump: f64,
    /// The path stayed in `D(epsilon^gamma)` up to the jump.
    pub stayed_inside: bool,
    /// Post-jump state in `D(epsilon^gamma)`.
    pub lands_inside: Option<bool>,
    /// Post-jump state in the twice-reduced domain.
    pub lands_in_tilde: Option<bool>,
    /// Largest observed `|Y - u|_inf` over the epoch (stops growing once the level is crossed).
    pub max_deviation: f64,
    pub deviation_exceeded: bool,
}

impl EpochDiagnostics {
    /// Stay, then land inside.
    pub fn a(&self) -> bool {
        self.stayed_inside && self.lands_inside == Some(true)
    }

    /// Stay, then the jump exits.
    pub fn b(&self) -> bool {
        self.stayed_inside && self.lands_inside == Some(false)
    }

    /// Stay, then land inside but outside the twice-reduced domain.
    pub fn c(&self) -> bool {
        self.a() && self.lands_in_tilde == Some(false)
    }

    /// Stay, then land in the twice-reduced domain.
    pub fn a_minus(&self) -> bool {
        self.stayed_inside && self.lands_in_tilde == Some(true)
    }

    pub fn e_complement(&self) -> bool {
        self.deviation_exceeded
    }
}

/// Eigen-decomposition of the linearisation `Delta + f'(phi)` at a stable equilibrium.
#[derive(Debug, Clone)]
pub struct Linearization {
    eigenvalues: Vec<f64>,
    /// Row-major `N x N`, column `j` is the `j`-th eigenvector in sine coordinates.
    q: Vec<f64>,
    /// `sqrt(2) ||Q e_j||_1`, so that `|Q y|_inf <= sum_j |y_j| weight_j`.
    sup_weights: Vec<f64>,
    /// Node-major `(M-1) x N` map `S Q` from eigen-coordinates to grid values.
    grid_map: Vec<f64>,
    /// Mode-major copy of `grid_map`.
    grid_map_t: Vec<f64>,
    phi_grid: Vec<f64>,
    lambda: f64,
    inv_m: f64,
    phi_sup: f64,
    parity: Option<ParityMaps>,
}

/// Half-grid maps used when every eigenvector is symmetric or antisymmetric
/// about `z = 1/2`. Symmetric eigenvectors come first in the eigen ordering.
#[derive(Debug, Clone)]
struct ParityMaps {
    half: usize,
    n_sym: usize,
    /// Symmetric eigenvectors, mode-major over nodes `1..=M/2`.
    sym_t: Vec<f64>,
    /// Antisymmetric eigenvectors, mode-major over nodes `M/2-1, ..., 1`.
    anti_t: Vec<f64>,
    sym_rows: Vec<f64>,
    anti_rows: Vec<f64>,
}

impl Linearization {
    pub fn new(model: &Model, phi: &Field) -> Self {
        let n = model.n_modes();
        let jac = DMatrix::from_row_slice(n, n, &model.jacobian(phi));
        let eig = SymmetricEigen::new(jac);
        // odd sine modes (even coefficient index) are symmetric about z = 1/2
        let cross = |j: usize, sym: bool| -> f64 {
            (0..n).filter(|k| (k % 2 == 0) != sym).map(|k| eig.eigenvectors[(k, j)].powi(2)).sum()
        };
        let sym_class: Vec<bool> = (0..n).map(|j| cross(j, true) <= cross(j, false)).collect();
        let pure = (0..n).all(|j| cross(j, sym_class[j]) < 1e-20);
        let mut order: Vec<usize> = (0..n).collect();
        if pure {
            order.sort_by_key(|&j| !sym_class[j]);
        }
        let mut q = vec![0.0; n * n];
        for k in 0..n {
            for (jj, &j) in order.iter().enumerate() {
                let sym = k % 2 == 0;
                q[k * n + jj] = if pure && sym != sym_class[j] { 0.0 } else { eig.eigenvectors[(k, j)] };
            }
        }
        let eigenvalues: Vec<f64> = order.iter().map(|&j| eig.eigenvalues[j]).collect();
        let sup_weights =
            (0..n).map(|j| std::f64::consts::SQRT_2 * (0..n).map(|k| q[k * n + j].abs()).sum::<f64>()).collect();
        let grid = model.grid();
        let mut grid_map = Vec::with_capacity(grid.n_nodes() * n);
        for m in 0..grid.n_nodes() {
            for j in 0..n {
                grid_map.push((0..n).map(|k| grid.basis(m, k) * q[k * n + j]).sum());
            }
        }
        let rows = grid.n_nodes();
        let mut grid_map_t = vec![0.0; rows * n];
        for m in 0..rows {
            for j in 0..n {
                grid_map_t[j * rows + m] = grid_map[m * n + j];
            }
        }
        let mut phi_grid = vec![0.0; grid.n_nodes()];
        grid.to_grid(phi.coeffs(), &mut phi_grid);
        let phi_sup = phi_grid.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let intervals = grid.intervals();
        let parity = (pure && intervals.is_multiple_of(2) && intervals >= 4).then(|| {
            let half = intervals / 2;
            let n_sym = sym_class.iter().filter(|&&c| c).count();
            let g = |i: usize, j: usize| grid_map[i * n + j];
            let mut sym_t = Vec::with_capacity(n_sym * half);
            for j in 0..n_sym {
                sym_t.extend((0..half).map(|i| g(i, j)));
            }
            let mut anti_t = Vec::with_capacity((n - n_sym) * (half - 1));
            for j in n_sym..n {
                anti_t.extend((0..half - 1).rev().map(|i| g(i, j)));
            }
            let sym_rows = (0..half).flat_map(|i| (0..n_sym).map(move |j| (i, j))).map(|(i, j)| g(i, j)).collect();
            let anti_rows = (0..half - 1).flat_map(|i| (n_sym..n).map(move |j| (i, j))).map(|(i, j)| g(i, j)).collect();
            ParityMaps { half, n_sym, sym_t, anti_t, sym_rows, anti_rows }
        });
        Self {
            eigenvalues,
            q,
            sup_weights,
            grid_map,
            grid_map_t,
            phi_grid,
            lambda: model.lambda(),
            inv_m: grid.weight(),
            phi_sup,
            parity,
        }
    }

    pub fn n_modes(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn to_eigen(&self, v: &[f64], y: &mut [f64]) {
        let n = v.len();
        y.iter_mut().for_each(|c| *c = 0.0);
        for (row, &vk) in self.q.chunks_exact(n).zip(v) {
            for (c, &q) in y.iter_mut().zip(row) {
                *c += q * vk;
            }
        }
    }

    pub fn from_eigen(&self, y: &[f64], v: &mut [f64]) {
        let n = y.len();
        for (vk, row) in v.iter_mut().zip(self.q.chunks_exact(n)) {
            *vk = row.iter().zip(y).map(|(q, c)| q * c).sum();
        }
    }

    /// Upper bound of the sup-norm of the field with eigen-coordinates `y`.
    pub fn sup_bound(&self, y: &[f64]) -> f64 {
        y.iter().zip(&self.sup_weights).map(|(c, w)| c.abs() * w).sum()
    }

    /// Bound on the slope of the remainder `f(phi + v) - f(phi) - f'(phi) v`
    /// for `|v|_inf <= b`.
    pub fn remainder_slope(&self, b: f64) -> f64 {
        self.lambda * (6.0 * self.phi_sup * b + 3.0 * b * b)
    }

    /// Eigen-coordinates of the projected remainder at the deviation `y`; returns
    /// the grid sup-norm of the deviation.
    pub fn remainder(&self, y: &[f64], grid: &mut [f64], out: &mut [f64]) -> f64 {
        if let Some(pm) = &self.parity {
            return self.remainder_mirrored(pm, y, grid, out);
        }
        let n = y.len();
        grid.iter_mut().for_each(|g| *g = 0.0);
        for (col, &c) in self.grid_map_t.chunks_exact(grid.len()).zip(y) {
            for (g, &a) in grid.iter_mut().zip(col) {
                *g += a * c;
            }
        }
        let sup = self.pointwise_remainder(grid);
        out.iter_mut().for_each(|c| *c = 0.0);
        for (row, &r) in self.grid_map.chunks_exact(n).zip(grid.iter()) {
            for (c, &a) in out.iter_mut().zip(row) {
                *c += a * r;
            }
        }
        out.iter_mut().for_each(|c| *c *= self.inv_m);
        sup
    }

    fn pointwise_remainder(&self, grid: &mut [f64]) -> f64 {
        let mut sup = 0.0f64;
        for (g, &p) in grid.iter_mut().zip(&self.phi_grid) {
            let v = *g;
            sup = sup.max(v.abs());
            *g = -self.lambda * v * v * (3.0 * p + v);
        }
        sup
    }

    fn remainder_mirrored(&self, pm: &ParityMaps, y: &[f64], grid: &mut [f64], out: &mut [f64]) -> f64 {
        let h = pm.half;
        let last = grid.len() - 1;
        grid.iter_mut().for_each(|g| *g = 0.0);
        {
            let (sym, anti) = grid.split_at_mut(h);
            for (col, &c) in pm.sym_t.chunks_exact(h).zip(&y[..pm.n_sym]) {
                for (g, &a) in sym.iter_mut().zip(col) {
                    *g += a * c;
                }
            }
            if h > 1 {
                for (col, &c) in pm.anti_t.chunks_exact(h - 1).zip(&y[pm.n_sym..]) {
                    for (g, &a) in anti.iter_mut().zip(col) {
                        *g += a * c;
                    }
                }
            }
        }
        for i in 0..h - 1 {
            let (s, a) = (grid[i], grid[last - i]);
            grid[i] = s + a;
            grid[last - i] = s - a;
        }
        let sup = self.pointwise_remainder(grid);
        out.iter_mut().for_each(|c| *c = 0.0);
        let (out_sym, out_anti) = out.split_at_mut(pm.n_sym);
        if pm.n_sym > 0 {
            for (i, row) in pm.sym_rows.chunks_exact(pm.n_sym).enumerate() {
                let r = if i + 1 == h { grid[i] } else { grid[i] + grid[last - i] };
                for (c, &a) in out_sym.iter_mut().zip(row) {
                    *c += a * r;
                }
            }
        }
        if !out_anti.is_empty() {
            for (i, row) in pm.anti_rows.chunks_exact(out_anti.len()).enumerate() {
                let r = grid[i] - grid[last - i];
                for (c, &a) in out_anti.iter_mut().zip(row) {
                    *c += a * r;
                }
            }
        }
        out.iter_mut().for_each(|c| *c *= self.inv_m);
        sup
    }
}

/// Exponential Euler coefficients `exp(Lambda h)` and `(exp(Lambda h) - 1) / Lambda`.
#[derive(Debug, Clone)]
struct QuietLevel {
    h: f64,
    decay: Vec<f64>,
    weight: Vec<f64>,
}

impl QuietLevel {
    fn new(lin: &Linearization, h: f64) -> Self {
        let decay = lin.eigenvalues.iter().map(|l| (l * h).exp()).collect();
        let weight = lin.eigenvalues.iter().map(|l| if *l == 0.0 { h } else { (l * h).exp_m1() / l }).collect();
        Self { h, decay, weight }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSwitches {
    pub small: bool,
    pub large: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathOptions {
    /// Longest step of the linearised regime.
    pub h_quiet: f64,
    /// Sup-deviation bound below which the linearised regime is used.
    pub v_quiet: f64,
    /// Largest `h * slope` of the remainder accepted in the linearised regime.
    pub quiet_accuracy: f64,
    /// Noise budget granted after a positive membership test, as a fraction of `delta`.
    pub retest_fraction: f64,
    /// Accept post-jump states well inside the tabulated threshold along the jump ray.
    pub ray_screen: bool,
    /// Censoring horizon in units of `1 / lambda(epsilon)`.
    pub t_max_factor: f64,
    /// Absolute censoring horizon; overrides the factor.
    pub t_max_path: Option<f64>,
    pub diagnostics: bool,
    pub trajectory: bool,
    pub noise: NoiseSwitches,
}

impl Default for PathOptions {
    fn default() -> Self {
        Self {
            h_quiet: 0.2,
            v_quiet: 0.15,
            quiet_accuracy: 0.2,
            retest_fraction: 0.25,
            ray_screen: true,
            t_max_factor: 50.0,
            t_max_path: None,
            diagnostics: false,
            trajectory: false,
            noise: NoiseSwitches { small: true, large: true },
        }
    }
}

/// Everything a path needs at one noise intensity, precomputed once.
pub struct ExitProblem<'a> {
    geom: &'a DomainGeometry,
    spec: &'a NoiseSpec,
    table: &'a ThresholdTable,
    lin: &'a Linearization,
    scaling: ScalingParams,
    basin: Basin,
    opts: PathOptions,
    margins: Margins,
    rate: f64,
    beta: f64,
    small_rate: f64,
    t_censor: f64,
    v_quiet: f64,
    /// `epsilon |v_i|_inf`.
    jump_sup: Vec<f64>,
    /// `epsilon Q^T v_i`.
    jump_eigen: Vec<Vec<f64>>,
    /// Step tables for `h_quiet / 2^j`.
    levels: Vec<QuietLevel>,
    /// Per direction and bin: `exp(Lambda s_b) epsilon Q^T v_i`.
    quiet_bins: Vec<Vec<f64>>,
    /// Per direction and bin: `exp(-K s_b) epsilon v_i`.
    heat_bins: Vec<Vec<f64>>,
    deviation_level: f64,
}

impl<'a> ExitProblem<'a> {
    pub fn new(
        geom: &'a DomainGeometry,
        spec: &'a NoiseSpec,
        table: &'a ThresholdTable,
        lin: &'a Linearization,
        scaling: ScalingParams,
        basin: Basin,
        opts: PathOptions,
    ) -> Result<Self, ExitError> {
        if basin == Basin::Unresolved {
            return Err(ExitError::Setup("exit problem needs a stable basin".into()));
        }
        scaling.validate().map_err(|e| ExitError::Setup(e.to_string()))?;
        let model = geom.model();
        let n = model.n_modes();
        if spec.n_modes() != n {
            return Err(ExitError::Setup("noise profiles and model disagree on the mode count".into()));
        }
        if !(opts.h_quiet > 0.0
            && opts.v_quiet > 0.0
            && opts.quiet_accuracy > 0.0
            && opts.retest_fraction >= 0.0
            && opts.t_max_factor > 0.0)
        {
            return Err(ExitError::Setup("path options must be positive".into()));
        }
        let eps = scaling.epsilon;
        let margins = Margins::new(&scaling);
        let rate = characteristic_rate(spec, table, &scaling, basin.sign())?;
        let t_censor = match opts.t_max_path {
            Some(t) => t,
            None if rate > 0.0 => opts.t_max_factor / rate,
            None => return Err(ExitError::Setup("characteristic rate is zero; set an explicit horizon".into())),
        };
        let beta = if opts.noise.large { large_jump_rate(spec, &scaling) } else { 0.0 };
        let small_rate = if opts.noise.small { small_jump_rate(spec, &scaling) } else { 0.0 };
        let trap = geom.trap_radius();
        let v_quiet =
            if trap > margins.single { opts.v_quiet.min(0.5 * (trap - margins.single)) } else { opts.v_quiet };
        let lam = lin.eigenvalues();
        let dt_probe = geom.options().dt_probe;
        let mid = |b: usize, h: f64| (b as f64 + 0.5) * h / BINS as f64;
        let mut jump_sup = Vec::new();
        let mut jump_eigen = Vec::new();
        let mut quiet_bins = Vec::new();
        let mut heat_bins = Vec::new();
        for d in spec.directions() {
            jump_sup.push(eps * model.sup_norm(&d.profile));
            let scaled = d.profile.scaled(eps);
            let mut c = vec![0.0; n];
            lin.to_eigen(scaled.coeffs(), &mut c);
            let mut qb = Vec::with_capacity(BINS * n);
            let mut hb = Vec::with_capacity(BINS * n);
            for b in 0..BINS {
                let sq = mid(b, opts.h_quiet);
                qb.extend(c.iter().zip(lam).map(|(ci, l)| ci * (l * sq).exp()));
                let sh = mid(b, dt_probe);
                hb.extend(scaled.coeffs().iter().zip(model.decay()).map(|(vi, k)| vi * (-k * sh).exp()));
            }
            jump_eigen.push(c);
            quiet_bins.push(qb);
            heat_bins.push(hb);
        }
        let levels = (0..=QUIET_LEVELS).map(|j| QuietLevel::new(lin, opts.h_quiet / (1u64 << j) as f64)).collect();
        Ok(Self {
            geom,
            spec,
            table,
            lin,
            scaling,
            basin,
            deviation_level: scaling.deviation_level(),
            opts,
            margins,
            rate,
            beta,
            small_rate,
            t_censor,
            v_quiet,
            jump_sup,
            jump_eigen,
            levels,
            quiet_bins,
            heat_bins,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.scaling.epsilon
    }

    pub fn scaling(&self) -> &ScalingParams {
        &self.scaling
    }

    /// `lambda(epsilon)`.
    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// `beta_epsilon`, zero when large jumps are switched off.
    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn margins(&self) -> Margins {
        self.margins
    }

    pub fn horizon(&self) -> f64 {
        self.t_censor
    }

    pub fn basin(&self) -> Basin {
        self.basin
    }

    pub fn geometry(&self) -> &DomainGeometry {
        self.geom
    }

    pub fn spec(&self) -> &NoiseSpec {
        self.spec
    }

    pub fn table(&self) -> &ThresholdTable {
        self.table
    }

    pub fn deviation_level(&self) -> f64 {
        self.deviation_level
    }

    fn phi(&self) -> &Field {
        self.geom.phi(self.basin)
    }

    /// Coarsest quiet step level that resolves the remainder at deviation bound `b`.
    fn quiet_level(&self, b: f64) -> Option<usize> {
        let slope = self.lin.remainder_slope(b);
        (0..=QUIET_LEVELS).find(|&j| self.levels[j].h * slope <= self.opts.quiet_accuracy)
    }

    /// Quiet step of length `dt <= h` of level `level`, given the remainder `corr` at `y`.
    fn quiet_drift(&self, y: &mut [f64], dt: f64, level: usize, corr: &[f64]) {
        let lv = &self.levels[level];
        if dt == lv.h {
            for ((v, c), (d, w)) in y.iter_mut().zip(corr.iter()).zip(lv.decay.iter().zip(&lv.weight)) {
                *v = d * *v + w * c;
            }
        } else {
            for ((v, c), l) in y.iter_mut().zip(corr.iter()).zip(&self.lin.eigenvalues) {
                let w = if *l == 0.0 { dt } else { (l * dt).exp_m1() / l };
                *v = (l * dt).exp() * *v + w * c;
            }
        }
    }

    /// Noise-free evolution of a quiet deviation over `dt`; `false` if it left the
    /// quiet regime (then `y` holds the state reached so far and `dt` is not used up).
    fn quiet_flow(&self, y: &mut [f64], dt: &mut f64, grid: &mut [f64], corr: &mut [f64]) -> bool {
        while *dt > 0.0 {
            if self.lin.sup_bound(y) > self.v_quiet {
                return false;
            }
            let sup = self.lin.remainder(y, grid, corr);
            let Some(level) = self.quiet_level(sup) else { return false };
            let h = self.levels[level].h.min(*dt);
            self.quiet_drift(y, h, level, corr);
            *dt -= h;
            if *dt < 1e-13 {
                *dt = 0.0;
            }
        }
        true
    }

    /// Membership of a post-jump state in `D(delta)` using, in order, the trap
    /// ball, the threshold along the jump ray, and the probe test. Returns the
    /// noise budget granted on success.
    fn member_after_jump(
        &self,
        x: &Field,
        dist: f64,
        pre_dist: f64,
        jump: Option<(usize, f64)>,
        delta: f64,
    ) -> Result<Option<f64>, ExitError> {
        let trap = self.geom.trap_radius();
        if trap > 0.0 && dist + delta <= trap {
            return Ok(Some(trap - delta - dist));
        }
        if self.opts.ray_screen && trap > 0.0 {
            if let Some((i, r)) = jump {
                if let Some(r_star) = self.table.radius(self.basin.sign(), i, delta) {
                    let s = self.scaling.epsilon * r;
                    let sup_unit = self.jump_sup[i] / self.scaling.epsilon;
                    let margin = self.geom.options().trap_safety * (r_star - s) * sup_unit - pre_dist;
                    if r_star.is_finite() && margin > 0.0 {
                        return Ok(Some(margin));
                    }
                }
            }
        }
        if self.geom.in_reduced_domain(x, self.basin, delta)? {
            Ok(Some(self.opts.retest_fraction * delta))
        } else {
            Ok(None)
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct SmallJump {
    time: f64,
    direction: usize,
    radius: f64,
}

/// Lazily sampled merged small-jump stream with push-back.
struct JumpStream {
    rate: f64,
    radius: TruncatedPareto,
    clock: f64,
    pending: VecDeque<SmallJump>,
}

impl JumpStream {
    fn new(rate: f64, radius: TruncatedPareto) -> Self {
        Self { rate, radius, clock: 0.0, pending: VecDeque::new() }
    }

    fn next_before(&mut self, limit: f64, problem: &ExitProblem<'_>, rng: &mut ChaCha8Rng) -> Option<SmallJump> {
        if !(self.rate > 0.0) {
            return None;
        }
        if self.pending.is_empty() {
            self.clock += standard_exponential(rng) / self.rate;
            let spec = problem.spec;
            let direction = spec.pick_direction(rng.random());
            let radius = self.radius.sample(rng);
            self.pending.push_back(SmallJump { time: self.clock, direction, radius });
        }
        match self.pending.front() {
            Some(j) if j.time <= limit => self.pending.pop_front(),
            _ => None,
        }
    }

    fn push_front(&mut self, j: SmallJump) {
        self.pending.push_front(j);
    }
}

#[derive(Clone)]
enum State {
    /// Eigen-coordinates of `x - phi`.
    Quiet(Vec<f64>),
    Active(Field),
}

/// Deterministic companion `u(t; x_k)` for deviation tracking.
struct Companion {
    state: State,
    settled: bool,
}

struct Engine<'p, 'a> {
    p: &'p ExitProblem<'a>,
    sc: FlowScratch,
    grid: Vec<f64>,
    corr: Vec<f64>,
    batch: Vec<SmallJump>,
    t: f64,
    state: State,
    budget: f64,
    stream: JumpStream,
    /// Deviation tracking against a companion (or against `phi` when `None`).
    track: Option<Option<Companion>>,
    max_dev: f64,
    exceeded: bool,
    trajectory: Vec<(f64, f64)>,
}

enum StepEnd {
    Continue,
    Exit,
}

impl<'p, 'a> Engine<'p, 'a> {
    fn new(p: &'p ExitProblem<'a>, x0: &Field) -> Self {
        let model = p.geom.model();
        let n = model.n_modes();
        let mut e = Self {
            p,
            sc: FlowScratch::new(model),
            grid: vec![0.0; model.grid().n_nodes()],
            corr: vec![0.0; n],
            batch: Vec::new(),
            t: 0.0,
            state: State::Active(x0.clone()),
            budget: 0.0,
            stream: JumpStream::new(
                p.small_rate,
                TruncatedPareto::new(p.spec.alpha(), p.spec.r_min(), p.scaling.jump_threshold()),
            ),
            track: None,
            max_dev: 0.0,
            exceeded: false,
            trajectory: Vec::new(),
        };
        e.try_quiet();
        e
    }

    fn dist_of(&mut self, x: &Field) -> f64 {
        let model = self.p.geom.model();
        let d = x - self.p.phi();
        model.grid().to_grid(d.coeffs(), &mut self.grid);
        self.grid.iter().fold(0.0f64, |m, g| m.max(g.abs()))
    }

    fn to_field(&self, y: &[f64]) -> Field {
        let mut v = vec![0.0; y.len()];
        self.p.lin.from_eigen(y, &mut v);
        let mut x = self.p.phi().clone();
        for (a, b) in x.coeffs_mut().iter_mut().zip(&v) {
            *a += b;
        }
        x
    }

    fn current_field(&self) -> Field {
        match &self.state {
            State::Quiet(y) => self.to_field(y),
            State::Active(x) => x.clone(),
        }
    }

    /// Switches to the linearised regime if the state is well inside it.
    fn try_quiet(&mut self) {
        if let State::Active(x) = &self.state {
            let d = x - self.p.phi();
            let mut y = vec![0.0; d.n_modes()];
            self.p.lin.to_eigen(d.coeffs(), &mut y);
            if self.p.lin.sup_bound(&y) <= 0.5 * self.p.v_quiet {
                self.state = State::Quiet(y);
            }
        }
    }

    fn make_active(&mut self) {
        if let State::Quiet(y) = &self.state {
            self.state = State::Active(self.to_field(y));
        }
    }

    fn start_tracking(&mut self, companion: bool) {
        self.max_dev = 0.0;
        self.exceeded = false;
        self.track = Some(companion.then(|| Companion { state: self.state.clone(), settled: false }));
    }

    fn deviation_bound(&self) -> f64 {
        match (&self.track, &self.state) {
            (Some(None), State::Quiet(y)) => self.p.lin.sup_bound(y),
            (Some(Some(c)), State::Quiet(y)) => match &c.state {
                State::Quiet(yu) => {
                    y.iter().zip(yu).zip(&self.p.lin.sup_weights).map(|((a, b), w)| (a - b).abs() * w).sum()
                }
                State::Active(_) => f64::INFINITY,
            },
            _ => f64::INFINITY,
        }
    }

    fn advance_companion(&mut self, to: f64, from: f64) -> Result<(), PdeError> {
        let p = self.p;
        let Some(Some(c)) = &mut self.track else { return Ok(()) };
        if c.settled || to <= from {
            return Ok(());
        }
        let mut dt = to - from;
        if let State::Quiet(yu) = &mut c.state {
            if p.quiet_flow(yu, &mut dt, &mut self.grid, &mut self.corr) {
                if p.lin.sup_bound(yu) < 1e-15 {
                    yu.iter_mut().for_each(|v| *v = 0.0);
                    c.settled = true;
                }
                return Ok(());
            }
            let mut v = vec![0.0; yu.len()];
            p.lin.from_eigen(yu, &mut v);
            let mut xu = p.phi().clone();
            xu.axpy(1.0, &Field::from_coeffs(v));
            c.state = State::Active(xu);
        }
        if let State::Active(xu) = &mut c.state {
            p.geom.advance_scratch(xu, dt, &mut self.sc)?;
            let d = &*xu - p.phi();
            let mut y = vec![0.0; d.n_modes()];
            p.lin.to_eigen(d.coeffs(), &mut y);
            if p.lin.sup_bound(&y) <= 0.5 * p.v_quiet {
                c.state = State::Quiet(y);
            }
        }
        Ok(())
    }

    /// Exact sup-deviation from the companion (or from `phi`).
    fn update_deviation(&mut self) {
        if self.exceeded || self.track.is_none() {
            return;
        }
        if self.deviation_bound() < self.p.deviation_level {
            return;
        }
        let y_field = self.current_field();
        let reference = match &self.track {
            Some(Some(c)) => match &c.state {
                State::Quiet(yu) => self.to_field(yu),
                State::Active(xu) => xu.clone(),
            },
            _ => self.p.phi().clone(),
        };
        let d = &y_field - &reference;
        let dev = self.p.geom.model().sup_norm(&d);
        self.max_dev = self.max_dev.max(dev);
        if dev >= self.p.deviation_level {
            self.exceeded = true;
        }
    }

    fn record_trajectory(&mut self) {
        if self.p.opts.trajectory {
            let x = self.current_field();
            let d = self.dist_of(&x);
            self.trajectory.push((self.t, d));
        }
    }

    fn quiet_step(&mut self, t_target: f64, rng: &mut ChaCha8Rng) -> Result<StepEnd, ExitError> {
        let p = self.p;
        let State::Quiet(y) = &self.state else { unreachable!("quiet step in active state") };
        let mut bound = p.lin.sup_bound(y);
        let sup = p.lin.remainder(y, &mut self.grid, &mut self.corr);
        let Some(level) = p.quiet_level(sup) else {
            self.make_active();
            return Ok(StepEnd::Continue);
        };
        let end0 = (self.t + p.levels[level].h).min(t_target);
        self.batch.clear();
        while let Some(j) = self.stream.next_before(end0, p, rng) {
            self.batch.push(j);
        }
        let tracking = self.track.is_some() && !self.exceeded;
        let mut dev_bound = if tracking { self.deviation_bound() } else { 0.0 };
        let mut split = None;
        for (k, j) in self.batch.iter().enumerate() {
            let js = p.jump_sup[j.direction] * j.radius;
            bound += js;
            dev_bound += js;
            if bound > p.v_quiet || (tracking && dev_bound >= p.deviation_level) {
                split = Some(k);
                break;
            }
        }
        let end = split.map_or(end0, |k| self.batch[k].time);
        if let Some(k) = split {
            for j in self.batch.drain(k..).rev() {
                self.stream.push_front(j);
            }
        }
        let dt = end - self.t;
        let n = p.lin.eigenvalues.len();
        let State::Quiet(y) = &mut self.state else { unreachable!() };
        if dt > 0.0 {
            p.quiet_drift(y, dt, level, &self.corr);
        }
        for j in &self.batch {
            let b = (((end - j.time) / p.opts.h_quiet * BINS as f64) as usize).min(BINS - 1);
            let row = &p.quiet_bins[j.direction][b * n..(b + 1) * n];
            for (v, c) in y.iter_mut().zip(row) {
                *v += j.radius * c;
            }
        }
        let from = self.t;
        self.t = end;
        if split.is_some() {
            let j = self.stream.pending.pop_front().expect("split jump was pushed back");
            for (v, c) in y.iter_mut().zip(&p.jump_eigen[j.direction]) {
                *v += j.radius * c;
            }
            if p.lin.sup_bound(y) > p.v_quiet {
                self.make_active();
            }
        }
        self.advance_companion(end, from)?;
        self.update_deviation();
        self.record_trajectory();
        Ok(StepEnd::Continue)
    }

    fn active_step(&mut self, t_target: f64, rng: &mut ChaCha8Rng) -> Result<StepEnd, ExitError> {
        let p = self.p;
        let dt_probe = p.geom.options().dt_probe;
        let end = (self.t + dt_probe).min(t_target);
        self.batch.clear();
        while let Some(j) = self.stream.next_before(end, p, rng) {
            self.batch.push(j);
        }
        let n = p.lin.eigenvalues.len();
        let State::Active(x) = &mut self.state else { unreachable!("active step in quiet state") };
        p.geom.advance_scratch(x, end - self.t, &mut self.sc)?;
        let mut injected = 0.0;
        for j in &self.batch {
            let b = (((end - j.time) / dt_probe * BINS as f64) as usize).min(BINS - 1);
            let row = &p.heat_bins[j.direction][b * n..(b + 1) * n];
            for (v, c) in x.coeffs_mut().iter_mut().zip(row) {
                *v += j.radius * c;
            }
            injected += p.jump_sup[j.direction] * j.radius;
        }
        let from = self.t;
        self.t = end;
        self.budget -= injected;
        let x = x.clone();
        let dist = self.dist_of(&x);
        self.advance_companion(end, from)?;
        self.update_deviation();
        self.record_trajectory();
        let trap = p.geom.trap_radius();
        let delta = p.margins.single;
        if trap > 0.0 && dist + delta <= trap {
            self.budget = trap - delta - dist;
        } else if self.budget < 0.0 {
            if !p.geom.in_reduced_domain(&x, p.basin, delta)? {
                return Ok(StepEnd::Exit);
            }
            self.budget = p.opts.retest_fraction * delta;
        }
        if dist <= p.v_quiet {
            self.try_quiet();
        }
        Ok(StepEnd::Continue)
    }

    /// Runs until `t_target` or an exit; returns whether the path exited.
    fn evolve(&mut self, t_target: f64, rng: &mut ChaCha8Rng) -> Result<bool, ExitError> {
        while self.t < t_target {
            let r = match self.state {
                State::Quiet(_) => self.quiet_step(t_target, rng)?,
                State::Active(_) => self.active_step(t_target, rng)?,
            };
            if let StepEnd::Exit = r {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

/// Result of one path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathOutcome {
    pub record: ExitRecord,
    pub epochs: Vec<EpochDiagnostics>,
    /// `(t, |X - phi|_inf)` samples when requested.
    pub trajectory: Vec<(f64, f64)>,
}

/// The stream of path `seed_id`: the ChaCha8 key is derived from the master seed and
/// `seed_id` selects the stream, so every path draws from its own counter range.
pub fn path_rng(master_seed: u64, seed_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(seed_id);
    rng
}

/// Simulates one path from `x0` until it leaves `D(epsilon^gamma)` or is censored.
pub fn simulate_path(
    problem: &ExitProblem<'_>,
    x0: &Field,
    seed_id: u64,
    rng: &mut ChaCha8Rng,
) -> Result<PathOutcome, ExitError> {
    simulate_path_with(problem, x0, seed_id, rng, None)
}

/// As [`simulate_path`], with the first large jump `W_1` prescribed (unscaled; the
/// path receives `epsilon W_1`). Its time is still drawn from `Exp(beta)`.
pub fn simulate_path_with(
    problem: &ExitProblem<'_>,
    x0: &Field,
    seed_id: u64,
    rng: &mut ChaCha8Rng,
    first_jump: Option<&Field>,
) -> Result<PathOutcome, ExitError> {
    let p = problem;
    let delta = p.margins.single;
    if !p.geom.in_reduced_domain(x0, p.basin, delta)? {
        return Err(ExitError::StartOutside);
    }
    let mut eng = Engine::new(p, x0);
    let start_dist = eng.dist_of(x0);
    let trap = p.geom.trap_radius();
    eng.budget = if trap > 0.0 && start_dist + delta <= trap {
        trap - delta - start_dist
    } else {
        p.opts.retest_fraction * delta
    };
    let diag = p.opts.diagnostics;
    if diag {
        eng.start_tracking(true);
    }
    let mut epochs = Vec::new();
    let mut n_jumps = 0u64;
    let mut epoch_start = 0.0;
    let mut forced = first_jump;
    let record = |tau: f64, n: u64, cause: ExitCause| ExitRecord {
        seed_id,
        epsilon: p.scaling.epsilon,
        tau,
        normalized_tau: p.rate * tau,
        n_large_jumps: n,
        cause,
    };
    loop {
        let next_large = if p.beta > 0.0 { eng.t + standard_exponential(rng) / p.beta } else { f64::INFINITY };
        let target = next_large.min(p.t_censor);
        let exited = eng.evolve(target, rng)?;
        let diag_without_jump = |eng: &Engine<'_, '_>, stayed: bool| EpochDiagnostics {
            length: eng.t - epoch_start,
            jump: None,
            scaled_jump: 0.0,
            stayed_inside: stayed,
            lands_inside: None,
            lands_in_tilde: None,
            max_deviation: eng.max_dev,
            deviation_exceeded: eng.exceeded,
        };
        if exited {
            if diag {
                epochs.push(diag_without_jump(&eng, false));
            }
            let trajectory = std::mem::take(&mut eng.trajectory);
            return Ok(PathOutcome {
                record: record(eng.t, n_jumps, ExitCause::DriftOrSmallNoise),
                epochs,
                trajectory,
            });
        }
        if next_large > p.t_censor {
            if diag {
                epochs.push(diag_without_jump(&eng, true));
            }
            let trajectory = std::mem::take(&mut eng.trajectory);
            return Ok(PathOutcome { record: record(p.t_censor, n_jumps, ExitCause::Censored), epochs, trajectory });
        }
        // large jump at exactly next_large
        n_jumps += 1;
        eng.make_active();
        let State::Active(x) = &eng.state else { unreachable!() };
        let mut x = x.clone();
        let pre_dist = eng.dist_of(&x);
        let (jump, scaled) = match forced.take() {
            Some(w) => {
                x.axpy(p.scaling.epsilon, w);
                (None, p.scaling.epsilon * w.h_norm())
            }
            None => {
                let spec = p.spec;
                let i = spec.pick_direction(rng.random());
                let r = pareto_above(spec.alpha(), p.scaling.jump_threshold(), rng);
                x.axpy(p.scaling.epsilon * r, &spec.directions()[i].profile);
                (Some((i, r)), p.scaling.epsilon * r)
            }
        };
        let dist = eng.dist_of(&x);
        let inside = p.member_after_jump(&x, dist, pre_dist, jump, delta)?;
        if diag {
            let tilde = match inside {
                Some(_) => Some(p.member_after_jump(&x, dist, pre_dist, jump, p.margins.double)?.is_some()),
                None => None,
            };
            epochs.push(EpochDiagnostics {
                length: eng.t - epoch_start,
                jump,
                scaled_jump: scaled,
                stayed_inside: true,
                lands_inside: Some(inside.is_some()),
                lands_in_tilde: tilde,
                max_deviation: eng.max_dev,
                deviation_exceeded: eng.exceeded,
            });
        }
        eng.state = State::Active(x);
        eng.record_trajectory();
        match inside {
            None => {
                let trajectory = std::mem::take(&mut eng.trajectory);
                return Ok(PathOutcome { record: record(eng.t, n_jumps, ExitCause::LargeJump), epochs, trajectory });
            }
            Some(budget) => eng.budget = budget,
        }
        epoch_start = eng.t;
        eng.try_quiet();
        if diag {
            eng.start_tracking(true);
        }
    }
}

/// Monte Carlo estimate of the probability that the small-noise path started at
/// `phi` deviates from it by at least `epsilon^(2 gamma) / 2` in sup norm before the
/// first large jump time `T_1 ~ Exp(beta)`.
pub fn deviation_probability(
    problem: &ExitProblem<'_>,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Estimate, ExitError> {
    if n_samples == 0 {
        return Err(ExitError::Setup("deviation_probability needs at least one sample".into()));
    }
    let beta = large_jump_rate(problem.spec, &problem.scaling);
    let mut hits = 0usize;
    for _ in 0..n_samples {
        let t1 = standard_exponential(rng) / beta;
        let mut eng = Engine::new(problem, problem.phi());
        eng.budget = f64::INFINITY;
        eng.start_tracking(false);
        while eng.t < t1 && !eng.exceeded {
            let target = (eng.t + 1.0).min(t1);
            match eng.state {
                State::Quiet(_) => {
                    eng.quiet_step(target, rng)?;
                }
                State::Active(_) => {
                    // deviation only; membership is irrelevant here
                    let before = eng.budget;
                    eng.active_step(target, rng)?;
                    eng.budget = before;
                }
            }
        }
        if eng.exceeded {
            hits += 1;
        }
    }
    let p = hits as f64 / n_samples as f64;
    Ok(Estimate { value: p, std_err: (p * (1.0 - p) / n_samples as f64).sqrt() })
}

/// Counts of the epoch events and of violations of the path-versus-noise inclusions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventCounts {
    pub epochs: usize,
    pub a: usize,
    pub b: usize,
    pub c: usize,
    pub a_minus: usize,
    pub e_complement: usize,
    pub long_epochs: usize,
    /// `[premise count, violation count]` for inclusions i) to vii).
    pub inclusions: [[usize; 2]; 7],
}

impl EventCounts {
    /// Violations of inclusion `k` (0-based) per tagged epoch.
    pub fn violation_rate(&self, k: usize) -> f64 {
        if self.epochs == 0 {
            0.0
        } else {
            self.inclusions[k][1] as f64 / self.epochs as f64
        }
    }

    /// Violations of inclusion `k` among epochs where its premise holds.
    pub fn conditional_violation_rate(&self, k: usize) -> f64 {
        let [premise, viol] = self.inclusions[k];
        if premise == 0 {
            0.0
        } else {
            viol as f64 / premise as f64
        }
    }
}

/// Tags epochs with the events `A, B, C, A-, E^c` and checks the inclusions
/// that connect them with the position of the jump `epsilon W` relative to the
/// shifted domains, evaluated along the jump ray with the threshold table.
///
/// `horizon` is the relaxation horizon `T_rec + kappa gamma |ln epsilon|`.
pub fn tag_epoch_events(
    epochs: &[EpochDiagnostics],
    spec: &NoiseSpec,
    table: &ThresholdTable,
    scaling: &ScalingParams,
    basin: Basin,
    horizon: f64,
) -> Result<EventCounts, DomainError> {
    let sign = basin.sign();
    let m = Margins::new(scaling);
    let half_level = scaling.deviation_level();
    let shell_pad = scaling.delta() * scaling.delta();
    let mut out = EventCounts::default();
    for e in epochs {
        out.epochs += 1;
        out.a += e.a() as usize;
        out.b += e.b() as usize;
        out.c += e.c() as usize;
        out.a_minus += e.a_minus() as usize;
        out.e_complement += e.e_complement() as usize;
        let long = e.length >= horizon;
        out.long_epochs += long as usize;
        let Some((i, r)) = e.jump else { continue };
        let s = scaling.epsilon * r;
        let r0 = table.require(sign, i, 0.0)?;
        let r2 = table.require(sign, i, m.double)?;
        let r3 = table.require(sign, i, m.triple)?;
        let pad = shell_pad / (spec_sup(spec, i) + f64::MIN_POSITIVE);
        let in_d0 = s < r0;
        let outside_d0_double = s >= r2;
        let in_shell = s >= r2 - pad && s < r0 + pad;
        let in_d0_triple = s < r3;
        let base = !e.deviation_exceeded && long;
        let small = s <= half_level;
        let mut check = |k: usize, premise: bool, conclusion: bool| {
            if premise {
                out.inclusions[k][0] += 1;
                if !conclusion {
                    out.inclusions[k][1] += 1;
                }
            }
        };
        check(0, e.a() && base, in_d0);
        check(1, e.b() && base, outside_d0_double);
        check(2, e.c() && base, in_shell);
        check(3, e.b() && base && small, false);
        check(4, e.c() && base && small, false);
        check(5, base && !in_d0, e.b());
        check(6, base && in_d0_triple, e.a_minus());
    }
    Ok(out)
}

fn spec_sup(spec: &NoiseSpec, i: usize) -> f64 {
    // profiles are unit H-norm, so their sup norm is at most 1/2
    let p = &spec.directions()[i].profile;
    let n = p.n_modes();
    let mut m = 0.0f64;
    for k in 1..(4 * n) {
        m = m.max(p.eval(k as f64 / (4 * n) as f64).abs());
    }
    m
}

/// Outcome of an ensemble run over one intensity.
#[derive(Debug, Clone, Default)]
pub struct EnsembleRun {
    /// Sorted by `seed_id`.
    pub records: Vec<ExitRecord>,
    pub epochs: Vec<EpochDiagnostics>,
    pub failures: Vec<(u64, String)>,
}

impl EnsembleRun {
    pub fn censor_fraction(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| r.cause == ExitCause::Censored).count() as f64 / self.records.len() as f64
    }
}

/// Runs the paths `seed_ids` on `workers` threads. Each finished path is handed
/// to `sink` on the calling thread in completion order; the returned records are
/// sorted by `seed_id`. Individual failures are recorded and skipped; the run
/// aborts once more than [`MAX_FAILURE_FRACTION`] of the paths have failed.
pub fn run_ensemble<F>(
    problem: &ExitProblem<'_>,
    x0: &Field,
    master_seed: u64,
    seed_ids: &[u64],
    workers: usize,
    mut sink: F,
) -> Result<EnsembleRun, ExitError>
where
    F: FnMut(&PathOutcome) -> std::io::Result<()>,
{
    let total = seed_ids.len();
    let allowed = (MAX_FAILURE_FRACTION * total as f64).floor() as usize;
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let workers = workers.max(1).min(total.max(1));
    let mut run = EnsembleRun::default();
    let mut sink_error = None;
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<(u64, Result<PathOutcome, String>)>();
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            let stop = &stop;
            scope.spawn(move || loop {
                if stop.load(Ordering::Relaxed) {
                    break;
                }
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(&seed_id) = seed_ids.get(k) else { break };
                let mut rng = path_rng(master_seed, seed_id);
                let res = simulate_path(problem, x0, seed_id, &mut rng).map_err(|e| e.to_string());
                if tx.send((seed_id, res)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (seed_id, res) in rx {
            match res {
                Ok(outcome) => {
                    if sink_error.is_none() {
                        if let Err(e) = sink(&outcome) {
                            sink_error = Some(e);
                            stop.store(true, Ordering::Relaxed);
                        }
                    }
                    run.records.push(outcome.record);
                    run.epochs.extend(outcome.epochs);
                }
                Err(msg) => {
                    run.failures.push((seed_id, msg));
                    if run.failures.len() > allowed {
                        stop.store(true, Ordering::Relaxed);
                    }
                }
            }
        }
    });
    if let Some(e) = sink_error {
        return Err(ExitError::Setup(format!("record sink failed: {e}")));
    }
    if run.failures.len() > allowed {
        return Err(ExitError::TooManyFailures { failed: run.failures.len(), total });
    }
    run.records.sort_by_key(|r| r.seed_id);
    run.failures.sort_by_key(|f| f.0);
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cause_round_trip() {
        for c in [ExitCause::LargeJump, ExitCause::DriftOrSmallNoise, ExitCause::Censored] {
            assert_eq!(c.as_str().parse::<ExitCause>().unwrap(), c);
        }
        assert!("jump".parse::<ExitCause>().is_err());
    }

    #[test]
    fn epoch_flags() {
        let mut e = EpochDiagnostics {
            length: 1.0,
            jump: Some((0, 5.0)),
            scaled_jump: 0.1,
            stayed_inside: true,
            lands_inside: Some(true),
            lands_in_tilde: Some(false),
            max_deviation: 0.0,
            deviation_exceeded: false,
        };
        assert!(e.a() && e.c() && !e.b() && !e.a_minus());
        e.lands_inside = Some(false);
        e.lands_in_tilde = None;
        assert!(e.b() && !e.a() && !e.c());
        e.jump = None;
        e.lands_inside = None;
        assert!(!e.a() && !e.b());
    }

    fn setup() -> (DomainGeometry, NoiseSpec, ThresholdTable, Linearization) {
        let model = Model::new(crate::Params::default()).unwrap();
        let geom = DomainGeometry::new(model, crate::domains::GeometryOptions::default()).unwrap();
        let spec = NoiseSpec::default_for(32, 1.5).unwrap().with_r_min(0.05).unwrap();
        let table = ThresholdTable::build(&geom, &spec, &[0.0]).unwrap();
        let lin = Linearization::new(geom.model(), geom.phi_plus());
        (geom, spec, table, lin)
    }

    #[test]
    fn mirrored_remainder_matches_general() {
        let (geom, _, _, lin) = setup();
        assert!(lin.parity.is_some());
        let mut general = lin.clone();
        general.parity = None;
        let y: Vec<f64> = (0..32).map(|j| (((j * 5) % 7) as f64 - 3.0) * 1e-2 / (j + 1) as f64).collect();
        let nodes = geom.model().grid().n_nodes();
        let (mut g1, mut g2) = (vec![0.0; nodes], vec![0.0; nodes]);
        let (mut o1, mut o2) = (vec![0.0; 32], vec![0.0; 32]);
        let s1 = lin.remainder(&y, &mut g1, &mut o1);
        let s2 = general.remainder(&y, &mut g2, &mut o2);
        assert!((s1 - s2).abs() < 1e-15);
        for (a, b) in o1.iter().zip(&o2) {
            assert!((a - b).abs() < 1e-14, "{a} {b}");
        }
    }

    #[test]
    fn quiet_flow_tracks_full_flow() {
        let (geom, spec, table, lin) = setup();
        let scaling = ScalingParams::new(2f64.powi(-6), 0.75, 0.9).unwrap();
        let n = 32;
        for (h, acc) in [(0.1, 0.2), (0.2, 0.2), (0.2, 0.4)] {
            let opts = PathOptions { h_quiet: h, quiet_accuracy: acc, ..PathOptions::default() };
            let p = ExitProblem::new(&geom, &spec, &table, &lin, scaling, Basin::Plus, opts).unwrap();
            let mut worst = 0.0f64;
            for k in 0..6 {
                let w = Field::from_coeffs(
                    (0..n).map(|i| (((i * 7 + k * 3) % 5) as f64 - 2.0) / ((i + 1) * (i + 1)) as f64).collect(),
                );
                let w = w.scaled(0.5 * p.v_quiet / geom.model().sup_norm(&w));
                let mut x = geom.phi_plus().clone();
                x.axpy(1.0, &w);
                let mut y = vec![0.0; n];
                lin.to_eigen(w.coeffs(), &mut y);
                let mut grid = vec![0.0; geom.model().grid().n_nodes()];
                let mut corr = vec![0.0; n];
                for _ in 0..10 {
                    let mut dt = 0.05;
                    assert!(p.quiet_flow(&mut y, &mut dt, &mut grid, &mut corr));
                    geom.advance(&mut x, 0.05).unwrap();
                    let mut v = vec![0.0; n];
                    lin.from_eigen(&y, &mut v);
                    let d = &(&x - geom.phi_plus()) - &Field::from_coeffs(v);
                    worst = worst.max(geom.model().sup_norm(&d));
                }
            }
            assert!(worst < 0.05 * p.v_quiet, "h_quiet {h}, accuracy {acc}: {worst:e}");
        }
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| 0).scan(path_rng(9, 3), |r, _| Some(r.random())).collect();
        let b: Vec<u64> = (0..4).map(|_| 0).scan(path_rng(9, 3), |r, _| Some(r.random())).collect();
        let c: Vec<u64> = (0..4).map(|_| 0).scan(path_rng(9, 4), |r, _| Some(r.random())).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
