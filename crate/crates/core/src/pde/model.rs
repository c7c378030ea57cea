use crate::pde::{SineGrid, SpectralField};
use crate::scalar::Scalar;

/// Coefficient magnitude treated as numerical blow-up.
pub const BLOWUP_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PdeError {
    #[error("lambda = {lambda} must satisfy pi^2 < lambda")]
    LambdaBelowThreshold { lambda: f64 },
    #[error("lambda = {lambda} coincides with the eigenvalue (k pi)^2 for k = {k}")]
    ResonantLambda { lambda: f64, k: usize },
    #[error("invalid model parameter: {0}")]
    InvalidParams(String),
    #[error("negative duration {0}")]
    NegativeTime(f64),
    #[error("integration failure at t = {time}: coefficients left the admissible range")]
    IntegrationFailure { time: f64 },
    #[error("mode count mismatch: field has {got}, model has {expected}")]
    ModeMismatch { expected: usize, got: usize },
    #[error("no stable equilibrium with positive mean was found")]
    NoStableEquilibrium,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub lambda: T,
    pub n_modes: usize,
    pub dt: T,
    pub t_max: T,
    /// Number of grid intervals `M`; the collocation grid has `M - 1` interior nodes.
    pub grid_points: usize,
}

impl<T: Scalar> Default for ModelParams<T> {
    fn default() -> Self {
        Self { lambda: T::lit(20.0), n_modes: 32, dt: T::lit(1e-3), t_max: T::lit(10.0), grid_points: 128 }
    }
}

impl<T: Scalar> ModelParams<T> {
    pub fn with_lambda(lambda: T) -> Self {
        Self { lambda, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), PdeError> {
        validate_lambda(self.lambda.as_f64())?;
        if self.n_modes == 0 {
            return Err(PdeError::InvalidParams("n_modes must be positive".into()));
        }
        if self.grid_points < 4 * self.n_modes {
            return Err(PdeError::InvalidParams(format!(
                "grid_points = {} must be at least 4 * n_modes = {}",
                self.grid_points,
                4 * self.n_modes
            )));
        }
        if !(self.dt > T::zero()) || !(self.t_max > T::zero()) {
            return Err(PdeError::InvalidParams("dt and t_max must be positive".into()));
        }
        Ok(())
    }
}

/// `pi^2 < lambda` and `lambda != (k pi)^2` up to relative tolerance `1e-9`.
pub fn validate_lambda(lambda: f64) -> Result<(), PdeError> {
    let pi2 = std::f64::consts::PI * std::f64::consts::PI;
    if !lambda.is_finite() || lambda <= pi2 * (1.0 + 1e-9) {
        if (lambda / pi2 - 1.0).abs() <= 1e-9 {
            return Err(PdeError::ResonantLambda { lambda, k: 1 });
        }
        return Err(PdeError::LambdaBelowThreshold { lambda });
    }
    let kmax = (lambda.sqrt() / std::f64::consts::PI).ceil() as usize + 1;
    for k in 1..=kmax {
        let ek = (k as f64 * std::f64::consts::PI).powi(2);
        if (lambda / ek - 1.0).abs() <= 1e-9 {
            return Err(PdeError::ResonantLambda { lambda, k });
        }
    }
    Ok(())
}

/// Galerkin discretisation of `u_t = u_zz - lambda (u^3 - u)` with Dirichlet data.
#[derive(Clone, Debug)]
pub struct ChafeeInfante<T> {
    params: ModelParams<T>,
    grid: SineGrid<T>,
    /// `(k pi)^2`, the negated Dirichlet Laplacian spectrum.
    decay: Vec<T>,
}

impl<T: Scalar> ChafeeInfante<T> {
    pub fn new(params: ModelParams<T>) -> Result<Self, PdeError> {
        params.validate()?;
        let grid = SineGrid::new(params.n_modes, params.grid_points);
        let decay = (0..params.n_modes)
            .map(|i| {
                let k = SpectralField::<T>::wavenumber(i);
                k * k
            })
            .collect();
        Ok(Self { params, grid, decay })
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    pub fn grid(&self) -> &SineGrid<T> {
        &self.grid
    }

    pub fn n_modes(&self) -> usize {
        self.params.n_modes
    }

    pub fn lambda(&self) -> T {
        self.params.lambda
    }

    pub fn decay(&self) -> &[T] {
        &self.decay
    }

    pub fn zero_field(&self) -> SpectralField<T> {
        SpectralField::zeros(self.n_modes())
    }

    pub(crate) fn check_modes(&self, x: &SpectralField<T>) -> Result<(), PdeError> {
        if x.n_modes() != self.n_modes() {
            return Err(PdeError::ModeMismatch { expected: self.n_modes(), got: x.n_modes() });
        }
        Ok(())
    }

    /// Heat semigroup: mode k is damped by `exp(-(k pi)^2 t)`.
    pub fn apply_semigroup(&self, x: &SpectralField<T>, t: T) -> Result<SpectralField<T>, PdeError> {
        if t < T::zero() {
            return Err(PdeError::NegativeTime(t.as_f64()));
        }
        self.check_modes(x)?;
        let coeffs = x.coeffs().iter().zip(&self.decay).map(|(&a, &d)| a * (-d * t).exp()).collect();
        Ok(SpectralField::from_coeffs(coeffs))
    }

    /// Pointwise reaction term `f(z) = -lambda (z^3 - z)`.
    #[inline]
    pub fn reaction(&self, z: T) -> T {
        -self.params.lambda * (z * z * z - z)
    }

    /// `f'(z) = lambda (1 - 3 z^2)`.
    #[inline]
    pub fn reaction_slope(&self, z: T) -> T {
        self.params.lambda * (T::one() - T::lit(3.0) * z * z)
    }

    /// Collocated nonlinearity projected back onto the retained modes.
    pub fn nonlinearity(&self, x: &SpectralField<T>) -> SpectralField<T> {
        let mut ws = Workspace::new(self);
        let mut out = vec![T::zero(); self.n_modes()];
        self.nonlinearity_into(x.coeffs(), &mut ws.grid, &mut out);
        SpectralField::from_coeffs(out)
    }

    pub(crate) fn nonlinearity_into(&self, a: &[T], grid_buf: &mut [T], out: &mut [T]) {
        self.grid.to_grid(a, grid_buf);
        for g in grid_buf.iter_mut() {
            *g = self.reaction(*g);
        }
        self.grid.from_grid(grid_buf, out);
    }

    /// Right-hand side of the Galerkin system, `-K a + P f(S a)`; zero at equilibria.
    pub fn residual(&self, x: &SpectralField<T>) -> SpectralField<T> {
        let mut r = self.nonlinearity(x);
        for ((r, &a), &d) in r.coeffs_mut().iter_mut().zip(x.coeffs()).zip(&self.decay) {
            *r -= d * a;
        }
        r
    }

    /// Row-major Jacobian of [`Self::residual`].
    pub fn jacobian(&self, x: &SpectralField<T>) -> Vec<T> {
        let n = self.n_modes();
        let mut g = vec![T::zero(); self.grid.n_nodes()];
        self.grid.to_grid(x.coeffs(), &mut g);
        let slope: Vec<T> = g.iter().map(|&z| self.reaction_slope(z)).collect();
        let mut jac = vec![T::zero(); n * n];
        for (m, &s) in slope.iter().enumerate() {
            let ws = s * self.grid.weight();
            for j in 0..n {
                let bj = self.grid.basis(m, j) * ws;
                for k in j..n {
                    jac[j * n + k] += bj * self.grid.basis(m, k);
                }
            }
        }
        for j in 0..n {
            for k in 0..j {
                jac[j * n + k] = jac[k * n + j];
            }
            jac[j * n + j] -= self.decay[j];
        }
        jac
    }

    /// Ginzburg-Landau energy `int 1/2 u'^2 + lambda (u^4/4 - u^2/2)`; the Galerkin
    /// system is its exact gradient flow for the grid quadrature used here.
    pub fn energy(&self, x: &SpectralField<T>) -> T {
        let gradient = T::lit(0.5) * x.h_dot(x);
        let mut g = vec![T::zero(); self.grid.n_nodes()];
        self.grid.to_grid(x.coeffs(), &mut g);
        let quarter = T::lit(0.25);
        let half = T::lit(0.5);
        let potential = g.iter().fold(T::zero(), |acc, &z| {
            let z2 = z * z;
            acc + quarter * z2 * z2 - half * z2
        });
        gradient + self.params.lambda * potential * self.grid.weight()
    }

    pub fn sup_norm(&self, x: &SpectralField<T>) -> T {
        self.grid.sup_norm(x.coeffs())
    }

    pub fn sup_distance(&self, x: &SpectralField<T>, y: &SpectralField<T>) -> T {
        self.grid.sup_distance(x.coeffs(), y.coeffs())
    }

    /// Fourth-order exponential time-differencing stepper for step `h`.
    pub fn stepper(&self, h: T) -> Etdrk4<T> {
        Etdrk4::new(self, h)
    }

    /// Deterministic solution `u(t; x)` on the retained modes.
    pub fn flow(&self, x: &SpectralField<T>, t: T) -> Result<SpectralField<T>, PdeError> {
        if t < T::zero() {
            return Err(PdeError::NegativeTime(t.as_f64()));
        }
        self.check_modes(x)?;
        let mut u = x.clone();
        if t == T::zero() {
            return Ok(u);
        }
        let steps = (t / self.params.dt).ceil().to_usize().unwrap_or(1).max(1);
        let h = t / T::lit(steps as f64);
        let stepper = self.stepper(h);
        let mut ws = Workspace::new(self);
        for s in 0..steps {
            stepper.step(self, u.coeffs_mut(), &mut ws);
            if !within_limits(u.coeffs()) {
                return Err(PdeError::IntegrationFailure { time: h.as_f64() * (s + 1) as f64 });
            }
        }
        Ok(u)
    }

    /// States at `t = 0, every, 2 every, ...` up to `t`, integrated with the default step.
    pub fn flow_sampled(&self, x: &SpectralField<T>, t: T, every: T) -> Result<Vec<(T, SpectralField<T>)>, PdeError> {
        if t < T::zero() || every <= T::zero() {
            return Err(PdeError::NegativeTime(t.min(every).as_f64()));
        }
        self.check_modes(x)?;
        let sub = (every / self.params.dt).ceil().to_usize().unwrap_or(1).max(1);
        let h = every / T::lit(sub as f64);
        let n_samples = (t / every).round().to_usize().unwrap_or(0);
        let stepper = self.stepper(h);
        let mut ws = Workspace::new(self);
        let mut u = x.clone();
        let mut out = Vec::with_capacity(n_samples + 1);
        out.push((T::zero(), u.clone()));
        for j in 1..=n_samples {
            for _ in 0..sub {
                stepper.step(self, u.coeffs_mut(), &mut ws);
            }
            if !within_limits(u.coeffs()) {
                return Err(PdeError::IntegrationFailure { time: (every * T::lit(j as f64)).as_f64() });
            }
            out.push((every * T::lit(j as f64), u.clone()));
        }
        Ok(out)
    }
}

#[inline]
pub(crate) fn within_limits<T: Scalar>(a: &[T]) -> bool {
    let lim = T::lit(BLOWUP_LIMIT);
    a.iter().all(|v| v.is_finite() && v.abs() <= lim)
}

/// Scratch buffers reused across steps.
#[derive(Clone, Debug)]
pub struct Workspace<T> {
    pub(crate) grid: Vec<T>,
    nu: Vec<T>,
    na: Vec<T>,
    nb: Vec<T>,
    nc: Vec<T>,
    a: Vec<T>,
    b: Vec<T>,
    c: Vec<T>,
}

impl<T: Scalar> Workspace<T> {
    pub fn new(model: &ChafeeInfante<T>) -> Self {
        let n = model.n_modes();
        let z = vec![T::zero(); n];
        Self {
            grid: vec![T::zero(); model.grid().n_nodes()],
            nu: z.clone(),
            na: z.clone(),
            nb: z.clone(),
            nc: z.clone(),
            a: z.clone(),
            b: z.clone(),
            c: z,
        }
    }
}

/// `phi_1, phi_2, phi_3` of the exponential integrators, stable near zero.
pub fn phi_functions(z: f64) -> (f64, f64, f64) {
    if z.abs() < 0.5 {
        // phi_k(z) = sum_j z^j / (j + k)!
        let mut p = [0.0f64; 3];
        for (k, pk) in p.iter_mut().enumerate() {
            let mut term = 1.0;
            for i in 1..=(k + 1) {
                term /= i as f64;
            }
            let mut sum = term;
            for j in 1..30 {
                term *= z / (j + k + 1) as f64;
                sum += term;
            }
            *pk = sum;
        }
        (p[0], p[1], p[2])
    } else {
        let ez = z.exp();
        let p1 = (ez - 1.0) / z;
        let p2 = (ez - 1.0 - z) / (z * z);
        let p3 = (ez - 1.0 - z - 0.5 * z * z) / (z * z * z);
        (p1, p2, p3)
    }
}

/// Cox-Matthews ETDRK4 for the diagonal Laplacian with the collocated reaction
/// advanced explicitly. Equilibria of the Galerkin system are fixed points of the map.
#[derive(Clone, Debug)]
pub struct Etdrk4<T> {
    h: T,
    e: Vec<T>,
    e2: Vec<T>,
    q: Vec<T>,
    f1: Vec<T>,
    f2: Vec<T>,
    f3: Vec<T>,
}

impl<T: Scalar> Etdrk4<T> {
    pub fn new(model: &ChafeeInfante<T>, h: T) -> Self {
        let hf = h.as_f64();
        let n = model.n_modes();
        let mut s = Self {
            h,
            e: Vec::with_capacity(n),
            e2: Vec::with_capacity(n),
            q: Vec::with_capacity(n),
            f1: Vec::with_capacity(n),
            f2: Vec::with_capacity(n),
            f3: Vec::with_capacity(n),
        };
        for &d in model.decay() {
            let z = -d.as_f64() * hf;
            let (p1, p2, p3) = phi_functions(z);
            let (q1, _, _) = phi_functions(0.5 * z);
            s.e.push(T::lit(z.exp()));
            s.e2.push(T::lit((0.5 * z).exp()));
            s.q.push(T::lit(0.5 * hf * q1));
            s.f1.push(T::lit(hf * (p1 - 3.0 * p2 + 4.0 * p3)));
            s.f2.push(T::lit(hf * (p2 - 2.0 * p3)));
            s.f3.push(T::lit(hf * (4.0 * p3 - p2)));
        }
        s
    }

    pub fn h(&self) -> T {
        self.h
    }

    #[allow(clippy::needless_range_loop)]
    pub fn step(&self, model: &ChafeeInfante<T>, u: &mut [T], ws: &mut Workspace<T>) {
        let two = T::lit(2.0);
        model.nonlinearity_into(u, &mut ws.grid, &mut ws.nu);
        for i in 0..u.len() {
            ws.a[i] = self.e2[i] * u[i] + self.q[i] * ws.nu[i];
        }
        model.nonlinearity_into(&ws.a, &mut ws.grid, &mut ws.na);
        for i in 0..u.len() {
            ws.b[i] = self.e2[i] * u[i] + self.q[i] * ws.na[i];
        }
        model.nonlinearity_into(&ws.b, &mut ws.grid, &mut ws.nb);
        for i in 0..u.len() {
            ws.c[i] = self.e2[i] * ws.a[i] + self.q[i] * (two * ws.nb[i] - ws.nu[i]);
        }
        model.nonlinearity_into(&ws.c, &mut ws.grid, &mut ws.nc);
        // stiff modes otherwise drift into subnormal range, which is very slow
        let floor = T::min_positive_value().sqrt();
        for i in 0..u.len() {
            let v = self.e[i] * u[i]
                + self.f1[i] * ws.nu[i]
                + two * self.f2[i] * (ws.na[i] + ws.nb[i])
                + self.f3[i] * ws.nc[i];
            u[i] = if v.abs() < floor { T::zero() } else { v };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ChafeeInfante<f64> {
        ChafeeInfante::new(ModelParams::default()).unwrap()
    }

    #[test]
    fn lambda_validation() {
        assert!(matches!(validate_lambda(9.0), Err(PdeError::LambdaBelowThreshold { .. })));
        let four_pi2 = 4.0 * std::f64::consts::PI.powi(2);
        assert!(matches!(validate_lambda(four_pi2), Err(PdeError::ResonantLambda { k: 2, .. })));
        assert!(matches!(validate_lambda(four_pi2 * (1.0 + 1e-11)), Err(PdeError::ResonantLambda { k: 2, .. })));
        assert!(validate_lambda(20.0).is_ok());
        assert!(validate_lambda(four_pi2 * (1.0 + 1e-6)).is_ok());
    }

    #[test]
    fn grid_too_coarse_is_rejected() {
        let p = ModelParams::<f64> { grid_points: 100, ..ModelParams::default() };
        assert!(matches!(p.validate(), Err(PdeError::InvalidParams(_))));
    }

    #[test]
    fn semigroup_identity_and_closed_form() {
        let m = model();
        let x = SpectralField::from_coeffs((0..32).map(|i| 1.0 / (1 + i) as f64).collect());
        assert_eq!(m.apply_semigroup(&x, 0.0).unwrap(), x);
        let e1 = SpectralField::mode(32, 1);
        let y = m.apply_semigroup(&e1, 0.1).unwrap();
        assert!((y[0] - 0.372_708_f64).abs() < 1e-6);
        assert!((y[0] - (-std::f64::consts::PI.powi(2) * 0.1).exp()).abs() < 1e-15);
        assert!(matches!(m.apply_semigroup(&x, -1.0), Err(PdeError::NegativeTime(_))));
    }

    #[test]
    fn nonlinearity_special_values() {
        let m = model();
        assert!(m.nonlinearity(&m.zero_field()).max_abs_coeff() == 0.0);
        assert_eq!(m.reaction(1.0), 0.0);
        let m10 = ChafeeInfante::<f64>::new(ModelParams { lambda: 10.0, ..ModelParams::default() }).unwrap();
        assert!((m10.reaction(0.5) - 3.75).abs() < 1e-15);
    }

    #[test]
    fn zero_stays_zero() {
        let m = model();
        let u = m.flow(&m.zero_field(), 5.0).unwrap();
        assert!(u.coeffs().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn phi_functions_are_continuous_across_branch() {
        let (a1, a2, a3) = phi_functions(-0.4999999);
        let (b1, b2, b3) = phi_functions(-0.5000001);
        assert!((a1 - b1).abs() < 1e-7 && (a2 - b2).abs() < 1e-7 && (a3 - b3).abs() < 1e-7);
        let (p1, p2, p3) = phi_functions(0.0);
        assert!((p1 - 1.0).abs() < 1e-15 && (p2 - 0.5).abs() < 1e-15 && (p3 - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn blowup_is_reported() {
        // a large state overshoots under the explicit cubic term with a coarse step
        let p = ModelParams { dt: 0.5, ..ModelParams::default() };
        let m = ChafeeInfante::new(p).unwrap();
        let x = SpectralField::mode(32, 1).scaled(50.0);
        assert!(matches!(m.flow(&x, 5.0), Err(PdeError::IntegrationFailure { .. })));
    }
}
