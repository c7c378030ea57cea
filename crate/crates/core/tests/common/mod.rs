#![allow(dead_code)]

use std::f64::consts::PI;

/// Galerkin right-hand side with its own collocation on `M` intervals.
pub struct Oracle {
    lambda: f64,
    n: usize,
    basis: Vec<Vec<f64>>,
}

impl Oracle {
    pub fn new(lambda: f64, n: usize, intervals: usize) -> Self {
        let basis = (1..intervals)
            .map(|m| {
                let z = m as f64 / intervals as f64;
                (1..=n).map(|k| 2f64.sqrt() * (k as f64 * PI * z).sin()).collect()
            })
            .collect();
        Self { lambda, n, basis }
    }

    pub fn rhs(&self, a: &[f64]) -> Vec<f64> {
        let m = (self.basis.len() + 1) as f64;
        let mut out: Vec<f64> = (0..self.n).map(|k| -((k + 1) as f64 * PI).powi(2) * a[k]).collect();
        for row in &self.basis {
            let g: f64 = row.iter().zip(a).map(|(s, c)| s * c).sum();
            let f = -self.lambda * (g * g * g - g);
            for (o, s) in out.iter_mut().zip(row) {
                *o += s * f / m;
            }
        }
        out
    }

    pub fn rk4(&self, a0: &[f64], t: f64, steps: usize) -> Vec<f64> {
        let h = t / steps as f64;
        let mut a = a0.to_vec();
        let add = |x: &[f64], y: &[f64], s: f64| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p + s * q).collect() };
        for _ in 0..steps {
            let k1 = self.rhs(&a);
            let k2 = self.rhs(&add(&a, &k1, h / 2.0));
            let k3 = self.rhs(&add(&a, &k2, h / 2.0));
            let k4 = self.rhs(&add(&a, &k3, h));
            for i in 0..a.len() {
                a[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        a
    }
}
