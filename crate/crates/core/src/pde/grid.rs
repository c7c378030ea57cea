use crate::scalar::Scalar;

/// Collocation grid `z_m = m / M`, `m = 1..M-1`, paired with an `N`-mode sine basis.
///
/// For `N < M` the discrete sine transform is exactly invertible on the
/// retained modes:
/// `sum_m e_j(z_m) e_k(z_m) = M delta_jk`, so projection is `a = S^T g / M`.
///
/// With `M` even both transforms use the mirror symmetry `z -> 1 - z`: odd modes
/// are symmetric and even modes antisymmetric about `z = 1/2`, so only half of
/// the nodes enter the sums.
#[derive(Clone, Debug)]
pub struct SineGrid<T> {
    n_modes: usize,
    intervals: usize,
    /// Row-major `(M-1) x N` synthesis matrix `S[m][k] = e_{k+1}(z_{m+1})`.
    synth: Vec<T>,
    /// Mode-major copy of `S` for the general path.
    synth_t: Vec<T>,
    mirror: Option<MirrorTables<T>>,
    inv_m: T,
}

#[derive(Clone, Debug)]
struct MirrorTables<T> {
    half: usize,
    /// Odd modes, mode-major over nodes `m = 1..=M/2`.
    odd_t: Vec<T>,
    /// Even modes, mode-major over nodes `m = M/2-1, ..., 1` (reversed).
    even_t: Vec<T>,
    /// Odd modes, node-major over `m = 1..=M/2`.
    odd_rows: Vec<T>,
    /// Even modes, node-major over `m = 1..M/2`.
    even_rows: Vec<T>,
}

const STACK_MODES: usize = 64;

impl<T: Scalar> SineGrid<T> {
    pub fn new(n_modes: usize, intervals: usize) -> Self {
        assert!(n_modes >= 1 && intervals > n_modes, "grid must resolve every mode");
        let rows = intervals - 1;
        let value = |m: usize, k: usize| -> T {
            // integer reduction keeps the argument exact for large k*m
            let p = (k * m) % (2 * intervals);
            if p.is_multiple_of(intervals) {
                return T::zero();
            }
            T::lit(std::f64::consts::SQRT_2 * (std::f64::consts::PI * p as f64 / intervals as f64).sin())
        };
        let mut synth = Vec::with_capacity(rows * n_modes);
        for m in 1..intervals {
            for k in 1..=n_modes {
                synth.push(value(m, k));
            }
        }
        let mut synth_t = vec![T::zero(); rows * n_modes];
        for m in 0..rows {
            for k in 0..n_modes {
                synth_t[k * rows + m] = synth[m * n_modes + k];
            }
        }
        let mirror = (intervals.is_multiple_of(2) && intervals >= 4).then(|| {
            let half = intervals / 2;
            let odd: Vec<usize> = (1..=n_modes).step_by(2).collect();
            let even: Vec<usize> = (2..=n_modes).step_by(2).collect();
            let mut odd_t = Vec::with_capacity(odd.len() * half);
            for &k in &odd {
                odd_t.extend((1..=half).map(|m| value(m, k)));
            }
            let mut even_t = Vec::with_capacity(even.len() * (half - 1));
            for &k in &even {
                even_t.extend((1..half).rev().map(|m| value(m, k)));
            }
            let mut odd_rows = Vec::with_capacity(odd.len() * half);
            for m in 1..=half {
                odd_rows.extend(odd.iter().map(|&k| value(m, k)));
            }
            let mut even_rows = Vec::with_capacity(even.len() * (half - 1));
            for m in 1..half {
                even_rows.extend(even.iter().map(|&k| value(m, k)));
            }
            MirrorTables { half, odd_t, even_t, odd_rows, even_rows }
        });
        Self { n_modes, intervals, synth, synth_t, mirror, inv_m: T::lit(1.0 / intervals as f64) }
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    /// Number of interior nodes, `M - 1`.
    pub fn n_nodes(&self) -> usize {
        self.intervals - 1
    }

    pub fn intervals(&self) -> usize {
        self.intervals
    }

    /// Quadrature weight `1/M` of every interior node.
    pub fn weight(&self) -> T {
        self.inv_m
    }

    pub fn node(&self, m: usize) -> T {
        T::lit((m + 1) as f64 / self.intervals as f64)
    }

    /// Basis value `e_{k+1}(z_{m+1})`.
    #[inline]
    pub fn basis(&self, m: usize, k: usize) -> T {
        self.synth[m * self.n_modes + k]
    }

    /// Writes the symmetric part `S_m` at index `m-1` and the antisymmetric part
    /// `A_m` at the mirror index `M-m-1`.
    fn split_synthesis(&self, mt: &MirrorTables<T>, coeffs: &[T], out: &mut [T]) {
        out.iter_mut().for_each(|g| *g = T::zero());
        let (sym, anti) = out.split_at_mut(mt.half);
        for (col, &a) in mt.odd_t.chunks_exact(mt.half).zip(coeffs.iter().step_by(2)) {
            for (g, &s) in sym.iter_mut().zip(col) {
                *g += s * a;
            }
        }
        if mt.half > 1 {
            for (col, &a) in mt.even_t.chunks_exact(mt.half - 1).zip(coeffs.iter().skip(1).step_by(2)) {
                for (g, &s) in anti.iter_mut().zip(col) {
                    *g += s * a;
                }
            }
        }
    }

    /// Grid values `g = S a`.
    pub fn to_grid(&self, coeffs: &[T], out: &mut [T]) {
        debug_assert_eq!(coeffs.len(), self.n_modes);
        debug_assert_eq!(out.len(), self.n_nodes());
        match &self.mirror {
            Some(mt) => {
                self.split_synthesis(mt, coeffs, out);
                let last = out.len() - 1;
                for i in 0..mt.half - 1 {
                    let s = out[i];
                    let a = out[last - i];
                    out[i] = s + a;
                    out[last - i] = s - a;
                }
            }
            None => {
                out.iter_mut().for_each(|g| *g = T::zero());
                for (col, &a) in self.synth_t.chunks_exact(self.n_nodes()).zip(coeffs) {
                    for (g, &s) in out.iter_mut().zip(col) {
                        *g += s * a;
                    }
                }
            }
        }
    }

    /// Projection `a = S^T g / M` onto the retained modes.
    pub fn from_grid(&self, values: &[T], out: &mut [T]) {
        debug_assert_eq!(values.len(), self.n_nodes());
        debug_assert_eq!(out.len(), self.n_modes);
        match &self.mirror {
            Some(mt) if self.n_modes <= 2 * STACK_MODES => {
                let n_odd = self.n_modes.div_ceil(2);
                let n_even = self.n_modes / 2;
                let mut acc_odd = [T::zero(); STACK_MODES];
                let mut acc_even = [T::zero(); STACK_MODES];
                let last = values.len() - 1;
                for (i, row) in mt.odd_rows.chunks_exact(n_odd).enumerate() {
                    let s = if i + 1 == mt.half { values[i] } else { values[i] + values[last - i] };
                    for (a, &b) in acc_odd[..n_odd].iter_mut().zip(row) {
                        *a += b * s;
                    }
                }
                if n_even > 0 {
                    for (i, row) in mt.even_rows.chunks_exact(n_even).enumerate() {
                        let d = values[i] - values[last - i];
                        for (a, &b) in acc_even[..n_even].iter_mut().zip(row) {
                            *a += b * d;
                        }
                    }
                }
                for (k, a) in out.iter_mut().enumerate() {
                    let v = if k % 2 == 0 { acc_odd[k / 2] } else { acc_even[k / 2] };
                    *a = v * self.inv_m;
                }
            }
            _ => {
                out.iter_mut().for_each(|a| *a = T::zero());
                for (row, &g) in self.synth.chunks_exact(self.n_modes).zip(values) {
                    for (a, &s) in out.iter_mut().zip(row) {
                        *a += s * g;
                    }
                }
                out.iter_mut().for_each(|a| *a *= self.inv_m);
            }
        }
    }

    /// Grid maximum of `|u|`, the sup-norm estimate.
    pub fn sup_norm(&self, coeffs: &[T]) -> T {
        let mut buf = vec![T::zero(); self.n_nodes()];
        match &self.mirror {
            // max(|S + A|, |S - A|) = |S| + |A|
            Some(mt) => {
                self.split_synthesis(mt, coeffs, &mut buf);
                let last = buf.len() - 1;
                let mut m = buf[mt.half - 1].abs();
                for i in 0..mt.half - 1 {
                    m = m.max(buf[i].abs() + buf[last - i].abs());
                }
                m
            }
            None => {
                self.to_grid(coeffs, &mut buf);
                buf.iter().fold(T::zero(), |m, &g| m.max(g.abs()))
            }
        }
    }

    /// `sup |a - b|` on the grid.
    pub fn sup_distance(&self, a: &[T], b: &[T]) -> T {
        let diff: Vec<T> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
        self.sup_norm(&diff)
    }
}
