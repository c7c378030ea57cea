use crate::pde::{ChafeeInfante, PdeError, SpectralField};
use crate::scalar::Scalar;

/// Newton iteration cap per seed.
pub const MAX_NEWTON_ITERS: usize = 100;
/// Equilibria closer than this (H-norm) are merged.
pub const DEDUP_TOL: f64 = 1e-6;
/// Amplitudes `c` of the `+-c e_1` seeds.
pub const SEED_AMPLITUDES: [f64; 3] = [0.1, 0.5, 1.0];

#[derive(Debug, Clone)]
pub struct SeedOutcome<T> {
    /// Seed amplitude along `e_1`; `0` for the zero seed.
    pub amplitude: f64,
    /// Index into [`Equilibria::states`], or the reason Newton failed.
    pub result: Result<usize, NewtonFailure<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonFailure<T> {
    pub iterations: usize,
    pub residual: T,
}

#[derive(Debug, Clone)]
pub struct Equilibria<T> {
    /// Every distinct equilibrium found, zero first.
    pub states: Vec<SpectralField<T>>,
    pub residuals: Vec<T>,
    pub plus: SpectralField<T>,
    pub minus: SpectralField<T>,
    pub seeds: Vec<SeedOutcome<T>>,
}

/// Solve `A x = b` in place by LU with partial pivoting; `None` if singular.
pub fn lu_solve<T: Scalar>(mut a: Vec<T>, mut b: Vec<T>) -> Option<Vec<T>> {
    let n = b.len();
    debug_assert_eq!(a.len(), n * n);
    for col in 0..n {
        let (piv, pmax) =
            (col..n)
                .map(|r| (r, a[r * n + col].abs()))
                .fold((col, T::zero()), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pmax == T::zero() || !pmax.is_finite() {
            return None;
        }
        if piv != col {
            for k in 0..n {
                a.swap(piv * n + k, col * n + k);
            }
            b.swap(piv, col);
        }
        let d = a[col * n + col];
        for r in (col + 1)..n {
            let f = a[r * n + col] / d;
            if f == T::zero() {
                continue;
            }
            for k in col..n {
                let v = a[col * n + k];
                a[r * n + k] -= f * v;
            }
            let v = b[col];
            b[r] -= f * v;
        }
    }
    for r in (0..n).rev() {
        let s = ((r + 1)..n).fold(b[r], |acc, k| acc - a[r * n + k] * b[k]);
        b[r] = s / a[r * n + r];
    }
    Some(b)
}

impl<T: Scalar> ChafeeInfante<T> {
    /// Damped Newton on `u'' + f(u) = 0` from `seed`.
    pub fn newton(&self, seed: &SpectralField<T>) -> Result<SpectralField<T>, NewtonFailure<T>> {
        let tol = T::residual_tol();
        let mut u = seed.clone();
        let mut res = self.residual(&u);
        let mut rnorm = res.l2_norm();
        for it in 0..MAX_NEWTON_ITERS {
            if rnorm < tol {
                return Ok(u);
            }
            let rhs: Vec<T> = res.coeffs().iter().map(|&r| -r).collect();
            let Some(step) = lu_solve(self.jacobian(&u), rhs) else {
                return Err(NewtonFailure { iterations: it, residual: rnorm });
            };
            let step = SpectralField::from_coeffs(step);
            let mut damping = T::one();
            loop {
                let mut trial = u.clone();
                trial.axpy(damping, &step);
                let tres = self.residual(&trial);
                let tnorm = tres.l2_norm();
                if tnorm < rnorm || damping < T::lit(1e-4) {
                    u = trial;
                    res = tres;
                    rnorm = tnorm;
                    break;
                }
                damping *= T::lit(0.5);
            }
        }
        if rnorm < tol {
            Ok(u)
        } else {
            Err(NewtonFailure { iterations: MAX_NEWTON_ITERS, residual: rnorm })
        }
    }

    /// Equilibria reached by Newton from `0` and `+-c e_1`; `phi+` is the lowest-energy
    /// equilibrium with positive mean and `phi- = -phi+`.
    pub fn find_equilibria(&self) -> Result<Equilibria<T>, PdeError> {
        let n = self.n_modes();
        let e1 = SpectralField::<T>::mode(n, 1);
        let mut seeds = vec![(0.0, self.zero_field())];
        for &c in &SEED_AMPLITUDES {
            seeds.push((c, e1.scaled(T::lit(c))));
            seeds.push((-c, e1.scaled(T::lit(-c))));
        }
        let mut states: Vec<SpectralField<T>> = Vec::new();
        let mut outcomes = Vec::with_capacity(seeds.len());
        for (amplitude, seed) in seeds {
            let result = self.newton(&seed).map(|u| {
                let dup = states.iter().position(|s| (s - &u).h_norm() < T::lit(DEDUP_TOL));
                dup.unwrap_or_else(|| {
                    states.push(u);
                    states.len() - 1
                })
            });
            outcomes.push(SeedOutcome { amplitude, result });
        }
        let plus = states
            .iter()
            .filter(|s| s.mean() > T::zero())
            .min_by(|a, b| self.energy(a).partial_cmp(&self.energy(b)).unwrap_or(std::cmp::Ordering::Equal))
            .cloned()
            .ok_or(PdeError::NoStableEquilibrium)?;
        let minus = -&plus;
        // enforce exact odd symmetry in the returned list
        for s in states.iter_mut() {
            if (&*s + &plus).h_norm() < T::lit(DEDUP_TOL) {
                *s = minus.clone();
            }
        }
        let residuals = states.iter().map(|s| self.residual(s).l2_norm()).collect();
        Ok(Equilibria { states, residuals, plus, minus, seeds: outcomes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde::ModelParams;

    #[test]
    fn lu_solves_small_system() {
        let a = vec![0.0, 2.0, 1.0, 1.0, 1.0, 0.0, 2.0, 0.0, 3.0];
        let x: Vec<f64> = lu_solve(a, vec![5.0, 2.0, 11.0]).unwrap();
        for (got, want) in x.iter().zip([1.0, 1.0, 3.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!(lu_solve(vec![1.0, 2.0, 2.0, 4.0], vec![1.0, 1.0]).is_none());
    }

    #[test]
    fn zero_is_always_an_equilibrium() {
        for lambda in [12.0, 20.0, 30.0] {
            let m = ChafeeInfante::new(ModelParams::<f64>::with_lambda(lambda)).unwrap();
            let eq = m.find_equilibria().unwrap();
            assert_eq!(eq.states[0].max_abs_coeff(), 0.0);
            assert_eq!(eq.residuals[0], 0.0);
        }
    }

    #[test]
    fn three_equilibria_at_lambda_20() {
        let m = ChafeeInfante::new(ModelParams::<f64>::default()).unwrap();
        let eq = m.find_equilibria().unwrap();
        assert_eq!(eq.states.len(), 3);
        assert!(eq.residuals.iter().all(|&r| r < 1e-8));
        assert!(m.sup_norm(&eq.plus) < 1.0);
        assert_eq!(eq.minus, -&eq.plus);
        assert!((m.energy(&eq.plus) - m.energy(&eq.minus)).abs() < 1e-14);
    }

    #[test]
    fn single_precision_core() {
        let m = ChafeeInfante::new(ModelParams::<f32>::default()).unwrap();
        let eq = m.find_equilibria().unwrap();
        let m64 = ChafeeInfante::new(ModelParams::<f64>::default()).unwrap();
        let eq64 = m64.find_equilibria().unwrap();
        let diff = (&eq.plus.cast::<f64>() - &eq64.plus).h_norm();
        assert!(diff < 1e-3, "f32 and f64 equilibria differ by {diff}");
    }
}
