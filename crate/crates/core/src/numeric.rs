//! Small numeric helpers shared by every module: compensated sums, torus
//! reduction, integer boxes and the Gaussian tail certificate.

use crate::{Error, Result};
use nalgebra::DMatrix;

/// Neumaier-compensated accumulator.
#[derive(Clone, Copy, Debug, Default)]
pub struct Compensated {
    sum: f64,
    c: f64,
}

impl Compensated {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.c += (self.sum - t) + x;
        } else {
            self.c += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.c
    }
}

impl std::iter::FromIterator<f64> for Compensated {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = Compensated::new();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

pub fn comp_sum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    iter.into_iter().collect::<Compensated>().value()
}

/// Reduce a real number to `[-1/2, 1/2)`.
pub fn torus_reduce(x: f64) -> f64 {
    let r = x - (x + 0.5).floor();
    if r >= 0.5 {
        r - 1.0
    } else if r < -0.5 {
        r + 1.0
    } else {
        r
    }
}

pub fn torus_reduce_vec(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&x| torus_reduce(x)).collect()
}

/// Euclidean distance from `z` to the nearest integer vector.
pub fn torus_norm(z: &[f64]) -> f64 {
    z.iter().map(|&x| torus_reduce(x).powi(2)).sum::<f64>().sqrt()
}

pub fn torus_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| torus_reduce(x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub fn dot_i(a: &[f64], x: &[i64]) -> f64 {
    a.iter().zip(x).map(|(a, &x)| a * x as f64).sum()
}

pub fn norm2_i(x: &[i64]) -> f64 {
    (x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>()).sqrt()
}

pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Finite axis-aligned box of integer points, bounds inclusive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntBox {
    pub lo: Vec<i64>,
    pub hi: Vec<i64>,
}

impl IntBox {
    pub fn new(lo: Vec<i64>, hi: Vec<i64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::domain("box bounds must share a positive dimension"));
        }
        if lo.iter().zip(&hi).any(|(l, h)| l > h) {
            return Err(Error::domain("empty box"));
        }
        Ok(IntBox { lo, hi })
    }

    pub fn cube(n: usize, r: i64) -> Self {
        IntBox {
            lo: vec![-r; n],
            hi: vec![r; n],
        }
    }

    pub fn centered(center: &[f64], r: i64) -> Self {
        IntBox {
            lo: center.iter().map(|c| c.round() as i64 - r).collect(),
            hi: center.iter().map(|c| c.round() as i64 + r).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn side(&self, i: usize) -> usize {
        (self.hi[i] - self.lo[i] + 1) as usize
    }

    pub fn len(&self) -> usize {
        (0..self.dim()).map(|i| self.side(i)).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, x: &[i64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (l, h))| l <= v && v <= h)
    }

    /// Smallest Euclidean distance from `c` to an integer point outside the box.
    pub fn exterior_distance(&self, c: &[f64]) -> f64 {
        let mut d = f64::INFINITY;
        for i in 0..self.dim() {
            d = d.min(c[i] - (self.lo[i] - 1) as f64);
            d = d.min((self.hi[i] + 1) as f64 - c[i]);
        }
        d.max(0.0)
    }

    pub fn points(&self) -> BoxPoints<'_> {
        BoxPoints {
            b: self,
            cur: Some(self.lo.clone()),
        }
    }
}

pub struct BoxPoints<'a> {
    b: &'a IntBox,
    cur: Option<Vec<i64>>,
}

impl Iterator for BoxPoints<'_> {
    type Item = Vec<i64>;

    fn next(&mut self) -> Option<Vec<i64>> {
        let out = self.cur.clone()?;
        let mut next = out.clone();
        let mut i = next.len();
        loop {
            if i == 0 {
                self.cur = None;
                break;
            }
            i -= 1;
            if next[i] < self.b.hi[i] {
                next[i] += 1;
                self.cur = Some(next);
                break;
            }
            next[i] = self.b.lo[i];
        }
        Some(out)
    }
}

/// Upper bound on `sum_{x in Z^n, |x-c| > u} exp(-pi |x-c|^2 / s^2)`, any center `c`.
///
/// Splits the weight as `exp(-pi u^2/(2 s^2)) * rho_{sqrt2 s, c}` and bounds the
/// remaining shifted sum by `(1 + sqrt2 s)^n`.
pub fn gaussian_tail_bound(s: f64, n: usize, u: f64) -> f64 {
    let whole = (1.0 + s).powi(n as i32);
    if u <= 0.0 {
        return whole;
    }
    let split = (1.0 + std::f64::consts::SQRT_2 * s).powi(n as i32)
        * (-std::f64::consts::PI * u * u / (2.0 * s * s)).exp();
    whole.min(split)
}

/// Radius `u` at which [`gaussian_tail_bound`] drops below `target`.
pub fn radius_for_tail(s: f64, n: usize, target: f64) -> f64 {
    let lead = n as f64 * (1.0 + std::f64::consts::SQRT_2 * s).ln();
    s * ((2.0 / std::f64::consts::PI) * (lead - target.ln())).max(0.0).sqrt()
}

/// Symmetric eigenvalues in ascending order; errors unless all are positive.
pub fn spd_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(Error::domain("matrix must be square and nonempty"));
    }
    let asym = (m - m.transpose()).abs().max();
    let scale = m.abs().max().max(1.0);
    if asym > 1e-12 * scale {
        return Err(Error::domain("matrix is not symmetric"));
    }
    let mut ev: Vec<f64> = m.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    if ev[0] <= 0.0 || !ev[0].is_finite() {
        return Err(Error::domain("matrix is not positive definite"));
    }
    Ok(ev)
}

/// Quadratic form `(x - c)^T m (x - c)` for integer `x`.
pub fn quad_form(m: &DMatrix<f64>, x: &[i64], c: &[f64]) -> f64 {
    let n = x.len();
    let d: Vec<f64> = (0..n).map(|i| x[i] as f64 - c[i]).collect();
    let mut acc = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += m[(i, j)] * d[j];
        }
        acc += d[i] * row;
    }
    acc
}

pub fn gcd(a: i64, b: i64) -> i64 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Extended gcd: returns `(g, x, y)` with `a x + b y = g >= 0`.
pub fn ext_gcd(a: i64, b: i64) -> (i64, i64, i64) {
    if b == 0 {
        if a < 0 {
            (-a, -1, 0)
        } else {
            (a, 1, 0)
        }
    } else {
        let (g, x, y) = ext_gcd(b, a.rem_euclid(b));
        (g, y, x - a.div_euclid(b) * y)
    }
}

/// Integer vector `w` with `<w, v> = gcd(v)`.
pub fn bezout_vector(v: &[i64]) -> (i64, Vec<i64>) {
    let mut w = vec![0i64; v.len()];
    let mut g = 0i64;
    for (i, &vi) in v.iter().enumerate() {
        if vi == 0 {
            continue;
        }
        if g == 0 {
            g = vi.abs();
            w[i] = vi.signum();
            continue;
        }
        let (ng, x, y) = ext_gcd(g, vi);
        for wj in w.iter_mut() {
            *wj *= x;
        }
        w[i] = y;
        g = ng;
    }
    (g, w)
}

pub fn next_pow2(x: usize) -> usize {
    x.max(1).next_power_of_two()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn torus_reduce_range() {
        assert_eq!(torus_reduce(0.5), -0.5);
        assert_eq!(torus_reduce(-0.5), -0.5);
        assert_eq!(torus_reduce(1.25), 0.25);
        assert_eq!(torus_norm(&[1.0, -3.0]), 0.0);
    }

    #[test]
    fn box_enumeration_order() {
        let b = IntBox::new(vec![0, -1], vec![1, 0]).unwrap();
        let pts: Vec<_> = b.points().collect();
        assert_eq!(pts, vec![vec![0, -1], vec![0, 0], vec![1, -1], vec![1, 0]]);
        assert!(IntBox::new(vec![1], vec![0]).is_err());
    }

    #[test]
    fn compensated_beats_naive() {
        let xs = [1.0, 1e100, 1.0, -1e100];
        assert_eq!(comp_sum(xs), 2.0);
    }

    #[test]
    fn bezout() {
        let (g, w) = bezout_vector(&[4, 6, 9]);
        assert_eq!(g, 1);
        assert_eq!(4 * w[0] + 6 * w[1] + 9 * w[2], 1);
        let (g, w) = bezout_vector(&[0, -2]);
        assert_eq!(g, 2);
        assert_eq!(-2 * w[1], 2);
    }

    proptest! {
        #[test]
        fn reduce_idempotent(x in -50.0f64..50.0) {
            let r = torus_reduce(x);
            prop_assert!((-0.5..0.5).contains(&r));
            prop_assert_eq!(torus_reduce(r), r);
        }

        #[test]
        fn bezout_identity(v in proptest::collection::vec(-30i64..30, 1..4)) {
            let (g, w) = bezout_vector(&v);
            let s: i64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
            prop_assert_eq!(s, g);
            prop_assert_eq!(g, v.iter().fold(0, |a, &b| gcd(a, b)));
        }
    }
}
