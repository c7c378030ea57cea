use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use crate::scalar::Scalar;

/// A state of the Dirichlet problem on (0,1), stored as coefficients `a_k`
/// against the orthonormal sine basis `e_k(z) = sqrt(2) sin(k pi z)`, k = 1..N.
///
/// Boundary values are zero by construction.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SpectralField<T> {
    coeffs: Vec<T>,
}

impl<T: Scalar> SpectralField<T> {
    pub fn zeros(n_modes: usize) -> Self {
        Self { coeffs: vec![T::zero(); n_modes] }
    }

    pub fn from_coeffs(coeffs: Vec<T>) -> Self {
        Self { coeffs }
    }

    /// The basis function `e_k` (1-based mode index) with unit coefficient.
    pub fn mode(n_modes: usize, k: usize) -> Self {
        assert!(k >= 1 && k <= n_modes, "mode {k} outside 1..={n_modes}");
        let mut f = Self::zeros(n_modes);
        f.coeffs[k - 1] = T::one();
        f
    }

    pub fn n_modes(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeffs(&self) -> &[T] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [T] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<T> {
        self.coeffs
    }

    /// Wavenumber of mode index `i` (0-based): `(i+1) pi`.
    #[inline]
    pub fn wavenumber(i: usize) -> T {
        T::lit((i + 1) as f64 * std::f64::consts::PI)
    }

    /// `||u|| = |u'|_{L2} = sqrt(sum (k pi)^2 a_k^2)`.
    pub fn h_norm(&self) -> T {
        self.h_dot(self).sqrt()
    }

    pub fn h_dot(&self, other: &Self) -> T {
        self.coeffs.iter().zip(&other.coeffs).enumerate().fold(T::zero(), |acc, (i, (&a, &b))| {
            let k = Self::wavenumber(i);
            acc + k * k * a * b
        })
    }

    pub fn l2_norm(&self) -> T {
        self.coeffs.iter().fold(T::zero(), |acc, &a| acc + a * a).sqrt()
    }

    /// Spatial mean `int_0^1 u`.
    pub fn mean(&self) -> T {
        let sqrt2 = T::lit(std::f64::consts::SQRT_2);
        self.coeffs
            .iter()
            .enumerate()
            .filter(|(i, _)| i % 2 == 0)
            .fold(T::zero(), |acc, (i, &a)| acc + a * sqrt2 * T::lit(2.0) / Self::wavenumber(i))
    }

    /// Pointwise value at `z` by direct summation.
    pub fn eval(&self, z: T) -> T {
        let sqrt2 = T::lit(std::f64::consts::SQRT_2);
        self.coeffs.iter().enumerate().fold(T::zero(), |acc, (i, &a)| acc + a * sqrt2 * (Self::wavenumber(i) * z).sin())
    }

    pub fn scaled(&self, s: T) -> Self {
        Self { coeffs: self.coeffs.iter().map(|&a| a * s).collect() }
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: T, other: &Self) {
        debug_assert_eq!(self.n_modes(), other.n_modes());
        for (a, &b) in self.coeffs.iter_mut().zip(&other.coeffs) {
            *a += s * b;
        }
    }

    /// Same field normalised to unit H-norm. Panics on the zero field.
    pub fn h_normalized(&self) -> Self {
        let n = self.h_norm();
        assert!(n > T::zero(), "cannot normalise the zero field");
        self.scaled(T::one() / n)
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|a| a.is_finite())
    }

    pub fn max_abs_coeff(&self) -> T {
        self.coeffs.iter().fold(T::zero(), |m, &a| m.max(a.abs()))
    }

    pub fn cast<U: Scalar>(&self) -> SpectralField<U> {
        SpectralField { coeffs: self.coeffs.iter().map(|&a| U::lit(a.as_f64())).collect() }
    }
}

impl<T> Index<usize> for SpectralField<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.coeffs[i]
    }
}

impl<T> IndexMut<usize> for SpectralField<T> {
    fn index_mut(&mut self, i: usize) -> &mut T {
        &mut self.coeffs[i]
    }
}

impl<T: Scalar> Add<&SpectralField<T>> for &SpectralField<T> {
    type Output = SpectralField<T>;
    fn add(self, rhs: &SpectralField<T>) -> SpectralField<T> {
        let mut out = self.clone();
        out += rhs;
        out
    }
}

impl<T: Scalar> Sub<&SpectralField<T>> for &SpectralField<T> {
    type Output = SpectralField<T>;
    fn sub(self, rhs: &SpectralField<T>) -> SpectralField<T> {
        let mut out = self.clone();
        out -= rhs;
        out
    }
}

impl<T: Scalar> AddAssign<&SpectralField<T>> for SpectralField<T> {
    fn add_assign(&mut self, rhs: &SpectralField<T>) {
        self.axpy(T::one(), rhs);
    }
}

impl<T: Scalar> SubAssign<&SpectralField<T>> for SpectralField<T> {
    fn sub_assign(&mut self, rhs: &SpectralField<T>) {
        self.axpy(-T::one(), rhs);
    }
}

impl<T: Scalar> Mul<T> for &SpectralField<T> {
    type Output = SpectralField<T>;
    fn mul(self, s: T) -> SpectralField<T> {
        self.scaled(s)
    }
}

impl<T: Scalar> Neg for &SpectralField<T> {
    type Output = SpectralField<T>;
    fn neg(self) -> SpectralField<T> {
        self.scaled(-T::one())
    }
}
