//! Heavy-tailed symmetric Lévy noise with a finite angular measure.
//!
//! The Lévy measure puts mass `w_i alpha r^(-alpha-1) dr` on each ray `r v_i`,
//! `r > 0`, with unit H-norm profiles `v_i` that come in `+-` pairs. The tail
//! is an exact power law, so the limit measure coincides with the measure
//! itself and every rate below is closed form.
//!
//! At intensity `epsilon` the driver splits at radius `epsilon^(-rho)`: larger
//! jumps form a compound Poisson process with rate `beta_eps`, smaller ones
//! (above the truncation `r_min`) the small-jump part.

use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::pde::ChafeeInfante;
use crate::Field;

/// Default small-jump truncation radius.
pub const DEFAULT_R_MIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NoiseError {
    #[error("stability index alpha = {0} outside (0, 2)")]
    Alpha(f64),
    #[error("direction {index}: weight {weight} must be positive and finite")]
    Weight { index: usize, weight: f64 },
    #[error("direction {index}: profile must be non-zero")]
    ZeroProfile { index: usize },
    #[error("direction {index} has no mirrored partner with equal weight")]
    Asymmetric { index: usize },
    #[error("truncation radius r_min = {0} must be positive")]
    RMin(f64),
    #[error("rate must be positive, got {0}")]
    Rate(f64),
    #[error("scaling parameter {name} = {value} is out of range")]
    Scaling { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    /// Unit H-norm profile.
    pub profile: Field,
    pub weight: f64,
    /// Index of the direction carrying `-profile`.
    pub mirror: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    alpha: f64,
    directions: Vec<Direction>,
    r_min: f64,
}

impl NoiseSpec {
    /// Builds the symmetric measure from one representative per `+-` pair;
    /// each representative is normalised and its mirror image appended right after it
    /// (directions `2j` and `2j+1` are mirrors).
    pub fn symmetric(alpha: f64, pairs: Vec<(Field, f64)>, r_min: f64) -> Result<Self, NoiseError> {
        if !(alpha > 0.0 && alpha < 2.0) {
            return Err(NoiseError::Alpha(alpha));
        }
        if !(r_min > 0.0 && r_min.is_finite()) {
            return Err(NoiseError::RMin(r_min));
        }
        let mut directions = Vec::with_capacity(2 * pairs.len());
        for (j, (profile, weight)) in pairs.into_iter().enumerate() {
            if !(weight > 0.0 && weight.is_finite()) {
                return Err(NoiseError::Weight { index: j, weight });
            }
            if !(profile.h_norm() > 0.0) {
                return Err(NoiseError::ZeroProfile { index: j });
            }
            let v = profile.h_normalized();
            let minus = -&v;
            directions.push(Direction { profile: v, weight, mirror: 2 * j + 1 });
            directions.push(Direction { profile: minus, weight, mirror: 2 * j });
        }
        Ok(Self { alpha, directions, r_min })
    }

    /// `+-e_1` with weight 1/2 each.
    pub fn default_for(n_modes: usize, alpha: f64) -> Result<Self, NoiseError> {
        Self::symmetric(alpha, vec![(Field::mode(n_modes, 1), 0.5)], DEFAULT_R_MIN)
    }

    /// Checks an explicit direction list for the mirror-pair invariant.
    pub fn from_directions(alpha: f64, directions: Vec<Direction>, r_min: f64) -> Result<Self, NoiseError> {
        if !(alpha > 0.0 && alpha < 2.0) {
            return Err(NoiseError::Alpha(alpha));
        }
        if !(r_min > 0.0) {
            return Err(NoiseError::RMin(r_min));
        }
        for (i, d) in directions.iter().enumerate() {
            if !(d.weight > 0.0 && d.weight.is_finite()) {
                return Err(NoiseError::Weight { index: i, weight: d.weight });
            }
            let ok = directions
                .get(d.mirror)
                .is_some_and(|m| m.mirror == i && m.weight == d.weight && (&m.profile + &d.profile).h_norm() < 1e-12);
            if !ok {
                return Err(NoiseError::Asymmetric { index: i });
            }
        }
        Ok(Self { alpha, directions, r_min })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn r_min(&self) -> f64 {
        self.r_min
    }

    pub fn with_r_min(mut self, r_min: f64) -> Result<Self, NoiseError> {
        if !(r_min > 0.0) {
            return Err(NoiseError::RMin(r_min));
        }
        self.r_min = r_min;
        Ok(self)
    }

    pub fn directions(&self) -> &[Direction] {
        &self.directions
    }

    pub fn n_modes(&self) -> usize {
        self.directions.first().map_or(0, |d| d.profile.n_modes())
    }

    /// `mu(B_1^c(0)) = sum_i w_i`.
    pub fn total_weight(&self) -> f64 {
        self.directions.iter().map(|d| d.weight).sum()
    }

    /// `nu({ ||y|| > c }) = c^(-alpha) sum_i w_i`.
    pub fn tail_mass(&self, c: f64) -> f64 {
        c.powf(-self.alpha) * self.total_weight()
    }

    /// Mass of the ray segment `(a, b]`: `a^(-alpha) - b^(-alpha)` per unit weight.
    pub fn radial_mass(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            0.0
        } else {
            a.powf(-self.alpha) - b.powf(-self.alpha)
        }
    }

    /// Picks a direction with probability `w_i / sum w` from a uniform in `[0, 1)`.
    pub fn pick_direction(&self, u: f64) -> usize {
        let target = u * self.total_weight();
        let mut acc = 0.0;
        for (i, d) in self.directions.iter().enumerate() {
            acc += d.weight;
            if target < acc {
                return i;
            }
        }
        self.directions.len() - 1
    }
}

/// One result of the advisory constraint checks.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintCheck {
    pub name: &'static str,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
}

impl ConstraintCheck {
    pub fn passes(&self) -> bool {
        self.value > self.lower && self.value < self.upper
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingParams {
    pub epsilon: f64,
    pub rho: f64,
    pub gamma: f64,
    /// `Theta`.
    pub theta_exp: f64,
    /// `Gamma`, the constant of the remainder estimate.
    pub gamma_cap: f64,
}

impl ScalingParams {
    pub fn new(epsilon: f64, rho: f64, gamma: f64) -> Result<Self, NoiseError> {
        let s = Self { epsilon, rho, gamma, theta_exp: 0.1, gamma_cap: 1.0 };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), NoiseError> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(NoiseError::Scaling { name: "epsilon", value: self.epsilon });
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(NoiseError::Scaling { name: "rho", value: self.rho });
        }
        if !(self.gamma > 0.0) {
            return Err(NoiseError::Scaling { name: "gamma", value: self.gamma });
        }
        if !(self.gamma_cap > 0.0) {
            return Err(NoiseError::Scaling { name: "gamma_cap", value: self.gamma_cap });
        }
        Ok(())
    }

    pub fn at_epsilon(&self, epsilon: f64) -> Self {
        Self { epsilon, ..*self }
    }

    /// Large-jump radius `epsilon^(-rho)`.
    pub fn jump_threshold(&self) -> f64 {
        self.epsilon.powf(-self.rho)
    }

    /// Reduced-domain margin `epsilon^gamma`.
    pub fn delta(&self) -> f64 {
        self.epsilon.powf(self.gamma)
    }

    /// Small-deviation level `epsilon^(2 gamma) / 2`.
    pub fn deviation_level(&self) -> f64 {
        0.5 * self.epsilon.powf(2.0 * self.gamma)
    }

    /// Upper end of the admissible `gamma` interval for the given `alpha`.
    pub fn gamma_bound(&self, alpha: f64) -> f64 {
        ((2.0 - alpha) * (1.0 - self.rho) - self.theta_exp * alpha * self.rho) / (2.0 * (self.gamma_cap + 2.0))
    }

    /// The sufficient conditions on `Theta`, `rho`, `gamma` under which the
    /// exponential exit law is proven. Failing them is a warning, not an error.
    ///
    /// Two different upper bounds for `Theta` circulate, `(2-alpha)/alpha` and the
    /// tighter `(2-alpha)/(2 alpha)`; the tighter one is checked.
    pub fn constraint_checks(&self, alpha: f64) -> Vec<ConstraintCheck> {
        vec![
            ConstraintCheck { name: "Theta", value: self.theta_exp, lower: 0.0, upper: (2.0 - alpha) / (2.0 * alpha) },
            ConstraintCheck {
                name: "rho",
                value: self.rho,
                lower: 0.5,
                upper: (2.0 - alpha) / (2.0 - (1.0 - self.theta_exp) * alpha),
            },
            ConstraintCheck { name: "gamma", value: self.gamma, lower: 0.0, upper: self.gamma_bound(alpha) },
        ]
    }
}

/// `beta_eps = epsilon^(alpha rho) mu(B_1^c)`.
pub fn large_jump_rate(spec: &NoiseSpec, scaling: &ScalingParams) -> f64 {
    scaling.epsilon.powf(spec.alpha * scaling.rho) * spec.total_weight()
}

/// Total rate of small jumps with radius in `(r_min, epsilon^(-rho)]`.
pub fn small_jump_rate(spec: &NoiseSpec, scaling: &ScalingParams) -> f64 {
    spec.total_weight() * spec.radial_mass(spec.r_min, scaling.jump_threshold())
}

/// `Exp(beta)` by inversion, `-ln(U) / beta`.
pub fn sample_interjump_time<R: Rng + ?Sized>(beta: f64, rng: &mut R) -> Result<f64, NoiseError> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(NoiseError::Rate(beta));
    }
    Ok(standard_exponential(rng) / beta)
}

#[inline]
pub(crate) fn standard_exponential<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // 1 - U lies in (0, 1]
    let u: f64 = rng.random();
    -(1.0 - u).ln()
}

/// A jump `radius * v_direction`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jump {
    pub direction: usize,
    pub radius: f64,
}

impl Jump {
    pub fn field(&self, spec: &NoiseSpec) -> Field {
        spec.directions[self.direction].profile.scaled(self.radius)
    }
}

/// Pareto radius conditioned on `r > r0`: `r0 U^(-1/alpha)`.
pub fn pareto_above<R: Rng + ?Sized>(alpha: f64, r0: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    r0 * (1.0 - u).powf(-1.0 / alpha)
}

/// Power-law radius restricted to `(a, b]`, by inversion of the truncated tail.
pub fn pareto_between<R: Rng + ?Sized>(alpha: f64, a: f64, b: f64, rng: &mut R) -> f64 {
    TruncatedPareto::new(alpha, a, b).sample(rng)
}

/// Density `∝ r^(-alpha-1)` on `(a, b]` with the tail levels precomputed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedPareto {
    a: f64,
    b: f64,
    tb: f64,
    span: f64,
    exponent: f64,
}

impl TruncatedPareto {
    pub fn new(alpha: f64, a: f64, b: f64) -> Self {
        let ta = a.powf(-alpha);
        let tb = b.powf(-alpha);
        Self { a, b, tb, span: ta - tb, exponent: -1.0 / alpha }
    }

    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        // tail level in [tb, ta); 1 - u keeps the upper end b attainable
        let level = self.tb + (1.0 - u) * self.span;
        level.powf(self.exponent).clamp(self.a, self.b)
    }
}

pub fn sample_large_jump_parts<R: Rng + ?Sized>(spec: &NoiseSpec, scaling: &ScalingParams, rng: &mut R) -> Jump {
    let direction = spec.pick_direction(rng.random());
    let radius = pareto_above(spec.alpha, scaling.jump_threshold(), rng);
    Jump { direction, radius }
}

/// A draw from `nu( . cap epsilon^(-rho) B_1^c) / beta_eps`.
pub fn sample_large_jump<R: Rng + ?Sized>(spec: &NoiseSpec, scaling: &ScalingParams, rng: &mut R) -> Field {
    sample_large_jump_parts(spec, scaling, rng).field(spec)
}

/// One small jump of the merged small-jump stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmallJump {
    pub time: f64,
    pub jump: Jump,
}

/// Draws the small jumps falling in `(0, dt]` as a merged compound Poisson stream,
/// in time order.
pub fn sample_small_jumps<R: Rng + ?Sized>(
    spec: &NoiseSpec,
    scaling: &ScalingParams,
    dt: f64,
    rng: &mut R,
    out: &mut Vec<SmallJump>,
) {
    out.clear();
    let rate = small_jump_rate(spec, scaling);
    if !(rate > 0.0) || dt <= 0.0 {
        return;
    }
    let upper = scaling.jump_threshold();
    let mut t = standard_exponential(rng) / rate;
    while t <= dt {
        let direction = spec.pick_direction(rng.random());
        let radius = pareto_between(spec.alpha, spec.r_min, upper, rng);
        out.push(SmallJump { time: t, jump: Jump { direction, radius } });
        t += standard_exponential(rng) / rate;
    }
}

/// Increment over `dt` of the truncated small-jump compound Poisson process.
///
/// Per direction the count is Poisson with mean `w_i (r_min^-alpha - eps^(rho alpha)) dt`.
pub fn sample_small_increment<R: Rng + ?Sized>(
    spec: &NoiseSpec,
    scaling: &ScalingParams,
    dt: f64,
    rng: &mut R,
) -> Field {
    let mut inc = Field::zeros(spec.n_modes());
    if dt <= 0.0 {
        return inc;
    }
    let upper = scaling.jump_threshold();
    let mass = spec.radial_mass(spec.r_min, upper);
    for d in &spec.directions {
        let mean = d.weight * mass * dt;
        if !(mean > 0.0) {
            continue;
        }
        let count = Poisson::new(mean).map(|p| p.sample(rng) as u64).unwrap_or(0);
        let total: f64 = (0..count).map(|_| pareto_between(spec.alpha, spec.r_min, upper, rng)).sum();
        inc.axpy(total, &d.profile);
    }
    inc
}

/// One step of the stochastic convolution `xi*(t) = int S(t-s) d xi(s)` with the
/// increment injected at the end of the step.
pub fn stochastic_convolution_step(
    model: &ChafeeInfante<f64>,
    accum: &Field,
    increment: &Field,
    dt: f64,
) -> Result<Field, crate::pde::PdeError> {
    let mut next = model.apply_semigroup(accum, dt)?;
    next += increment;
    Ok(next)
}
