//! Discrete Gaussians on `Z^n`: mass functions, certified sums, a truncated
//! sampler, and finite checks of the lattice-Gaussian inequalities.

use crate::measure::SparseMeasure;
use crate::numeric::{
    comp_sum, gaussian_tail_bound, quad_form, radius_for_tail, spd_eigenvalues, Compensated,
    IntBox,
};
use crate::{Error, Result};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::{PI, SQRT_2};

/// Default tail target for normalization boxes and truncation.
pub const DEFAULT_TAIL: f64 = 1e-12;

/// `rho_{Sigma,c}(x) = exp(-pi (x-c)^T Sigma^{-1} (x-c))`.
#[derive(Clone, Debug)]
pub struct GaussianShape {
    sigma: DMatrix<f64>,
    precision: DMatrix<f64>,
    center: Vec<f64>,
    /// Ascending eigenvalues of `sigma`.
    eigen: Vec<f64>,
}

impl GaussianShape {
    pub fn new(sigma: DMatrix<f64>, center: Vec<f64>) -> Result<Self> {
        let eigen = spd_eigenvalues(&sigma)?;
        if center.len() != sigma.nrows() {
            return Err(Error::domain("center dimension does not match shape"));
        }
        let precision = sigma
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::domain("singular shape matrix"))?;
        Ok(GaussianShape {
            sigma,
            precision,
            center,
            eigen,
        })
    }

    /// Shape whose quadratic form is `m`, i.e. `Sigma = m^{-1}`.
    pub fn from_precision(m: DMatrix<f64>, center: Vec<f64>) -> Result<Self> {
        let ev = spd_eigenvalues(&m)?;
        let sigma = m
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::domain("singular quadratic form"))?;
        let eigen = ev.iter().rev().map(|l| 1.0 / l).collect();
        Ok(GaussianShape {
            sigma,
            precision: m,
            center,
            eigen,
        })
    }

    pub fn spherical(n: usize, r: f64) -> Result<Self> {
        if n == 0 || !(r > 0.0) {
            return Err(Error::domain("spherical shape needs n >= 1 and R > 0"));
        }
        let sigma = DMatrix::identity(n, n) * (r * r);
        let precision = DMatrix::identity(n, n) * (1.0 / (r * r));
        Ok(GaussianShape {
            sigma,
            precision,
            center: vec![0.0; n],
            eigen: vec![r * r; n],
        })
    }

    pub fn with_center(mut self, center: Vec<f64>) -> Result<Self> {
        if center.len() != self.dim() {
            return Err(Error::domain("center dimension does not match shape"));
        }
        self.center = center;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    /// Largest axis scale `sqrt(lambda_max(Sigma))`.
    pub fn max_scale(&self) -> f64 {
        self.eigen[self.eigen.len() - 1].sqrt()
    }

    pub fn min_scale(&self) -> f64 {
        self.eigen[0].sqrt()
    }

    pub fn rho(&self, x: &[i64]) -> f64 {
        (-PI * quad_form(&self.precision, x, &self.center)).exp()
    }

    /// Omitted mass outside `b`, bounded through the spherical envelope of scale `max_scale`.
    pub fn tail_outside(&self, b: &IntBox) -> f64 {
        gaussian_tail_bound(self.max_scale(), self.dim(), b.exterior_distance(&self.center))
    }

    /// Box around the center whose omitted tail is at most `target`.
    pub fn certified_box(&self, target: f64) -> IntBox {
        let u = radius_for_tail(self.max_scale(), self.dim(), target);
        IntBox::centered(&self.center, u.ceil() as i64 + 1)
    }
}

/// A truncated sum together with a bound on what the truncation left out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussSum {
    pub value: f64,
    pub tail_bound: f64,
}

pub fn rho_sum(shape: &GaussianShape, b: &IntBox) -> Result<GaussSum> {
    if b.dim() != shape.dim() {
        return Err(Error::domain("box dimension does not match shape"));
    }
    if b.is_empty() {
        return Err(Error::domain("empty box"));
    }
    let value = comp_sum(b.points().map(|x| shape.rho(&x)));
    Ok(GaussSum {
        value,
        tail_bound: shape.tail_outside(b),
    })
}

/// `rho_{Sigma,c}(Z^n)` over an auto-sized box with relative tail below `rel`.
pub fn rho_total(shape: &GaussianShape, rel: f64) -> Result<GaussSum> {
    rho_sum(shape, &shape.certified_box(rel * 1e-3))
}

/// Truncation of `gamma_R` to a Euclidean ball.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruncationPolicy {
    pub tail_mass_target: f64,
    radius_override: Option<f64>,
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        TruncationPolicy {
            tail_mass_target: DEFAULT_TAIL,
            radius_override: None,
        }
    }
}

impl TruncationPolicy {
    pub fn new(tail_mass_target: f64) -> Result<Self> {
        if !(tail_mass_target > 0.0 && tail_mass_target < 1.0) {
            return Err(Error::config("tail mass target must lie in (0,1)"));
        }
        Ok(TruncationPolicy {
            tail_mass_target,
            radius_override: None,
        })
    }

    /// Explicit cutoff; the tail certificate is then whatever the radius gives.
    pub fn with_radius(u: f64) -> Self {
        TruncationPolicy {
            tail_mass_target: f64::NAN,
            radius_override: Some(u),
        }
    }

    /// Cutoff `u` with `(sqrt2)^n exp(-pi u^2 / (2R^2)) <= tail_mass_target`.
    pub fn radius(&self, n: usize, r: f64) -> f64 {
        match self.radius_override {
            Some(u) => u,
            None => {
                r * ((2.0 / PI) * (0.5 * n as f64 * 2f64.ln() - self.tail_mass_target.ln()))
                    .max(0.0)
                    .sqrt()
            }
        }
    }

    pub fn certified_tail(&self, n: usize, r: f64) -> f64 {
        gamma_tail_bound(n, r, self.radius(n, r))
    }
}

/// `gamma_R(|x| > u) <= (sqrt2)^n exp(-pi u^2/(2R^2))`.
pub fn gamma_tail_bound(n: usize, r: f64, u: f64) -> f64 {
    SQRT_2.powi(n as i32) * (-PI * u * u / (2.0 * r * r)).exp()
}

/// The centered isotropic discrete Gaussian `gamma_R` on `Z^n`.
#[derive(Clone, Debug)]
pub struct DiscreteGaussian {
    n: usize,
    r: f64,
    norm_1d: f64,
}

impl DiscreteGaussian {
    pub fn new(n: usize, r: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::domain("dimension must be positive"));
        }
        if !(r >= 1.0) || !r.is_finite() {
            return Err(Error::domain(format!("radius {r} must be >= 1")));
        }
        let k = (4.0 * r).ceil() as i64 + 2;
        let norm_1d = comp_sum((-k..=k).map(|j| (-PI * (j * j) as f64 / (r * r)).exp()));
        Ok(DiscreteGaussian { n, r, norm_1d })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn radius(&self) -> f64 {
        self.r
    }

    /// `rho_R(Z^n)`.
    pub fn normalizer(&self) -> f64 {
        self.norm_1d.powi(self.n as i32)
    }

    pub fn weight_1d(&self, k: i64) -> f64 {
        (-PI * (k * k) as f64 / (self.r * self.r)).exp()
    }

    pub fn pmf(&self, x: &[i64]) -> f64 {
        let q: f64 = x.iter().map(|&v| (v * v) as f64).sum();
        (-PI * q / (self.r * self.r)).exp() / self.normalizer()
    }

    /// `gamma_R` restricted (not renormalized) to the ball of radius `u`.
    pub fn ball_measure(&self, u: f64) -> SparseMeasure {
        let k = u.floor() as i64;
        let b = IntBox::cube(self.n, k);
        let mut pts = Vec::new();
        for x in b.points() {
            let q: i64 = x.iter().map(|v| v * v).sum();
            if (q as f64) <= u * u {
                let p = self.pmf(&x);
                pts.push((x, p));
            }
        }
        SparseMeasure::from_atoms(self.n, pts).expect("ball measure is well formed")
    }

    /// `gamma_R^tr`: conditioned on `|x| <= u` and renormalized to a probability measure.
    pub fn truncated(&self, policy: &TruncationPolicy) -> Result<SparseMeasure> {
        let u = policy.radius(self.n, self.r);
        if u < self.r {
            return Err(Error::config(format!(
                "truncation radius {u:.3} is below R = {}",
                self.r
            )));
        }
        Ok(self.ball_measure(u).normalized())
    }

    /// Exact `gamma_R(|x| <= u)` for small dimension, by enumeration.
    pub fn ball_mass(&self, u: f64) -> f64 {
        self.ball_measure(u).total_mass()
    }

    /// `hat gamma_R(zeta)`, evaluated coordinatewise since the Gaussian factorizes.
    pub fn transform(&self, zeta: &[f64]) -> Complex64 {
        let k = (4.0 * self.r).ceil() as i64 + 2;
        let mut out = Complex64::new(1.0, 0.0);
        for &z in zeta {
            let mut acc = Compensated::new();
            for j in -k..=k {
                acc.add(self.weight_1d(j) * (2.0 * PI * z * j as f64).cos());
            }
            out *= acc.value() / self.norm_1d;
        }
        out
    }
}

/// `exp(-R^2 |zeta|_T^2 / 5)`, the decay envelope valid for `R >= 2`.
pub fn fourier_decay_bound(r: f64, torus_norm: f64) -> f64 {
    (-r * r * torus_norm * torus_norm / 5.0).exp()
}

pub fn gamma_pmf(r: f64, x: &[i64]) -> Result<f64> {
    Ok(DiscreteGaussian::new(x.len(), r)?.pmf(x))
}

/// Exact sampler for `gamma_R^tr`: inverse CDF per coordinate, then rejection on the ball.
#[derive(Clone, Debug)]
pub struct GaussianSampler {
    n: usize,
    radius: f64,
    k: i64,
    coord: WeightedIndex<f64>,
    acceptance: f64,
}

impl GaussianSampler {
    pub fn new(n: usize, r: f64, policy: &TruncationPolicy) -> Result<Self> {
        let g = DiscreteGaussian::new(n, r)?;
        let u = policy.radius(n, r);
        if u < r {
            return Err(Error::config(format!(
                "truncation radius {u:.3} is below R = {r}"
            )));
        }
        let k = u.floor() as i64;
        let weights: Vec<f64> = (-k..=k).map(|j| g.weight_1d(j)).collect();
        let box_mass_1d: f64 = comp_sum(weights.iter().copied());
        let box_points = (2 * k + 1) as f64;
        let acceptance = if box_points.powi(n as i32) <= 4e6 {
            g.ball_mass(u) * g.normalizer() / box_mass_1d.powi(n as i32)
        } else {
            1.0 - gamma_tail_bound(n, r, u) * g.normalizer() / box_mass_1d.powi(n as i32)
        };
        if !(acceptance >= 1e-6) {
            return Err(Error::config(format!(
                "rejection acceptance {acceptance:e} below 1e-6"
            )));
        }
        let coord = WeightedIndex::new(&weights).map_err(|e| Error::config(e.to_string()))?;
        Ok(GaussianSampler {
            n,
            radius: u,
            k,
            coord,
            acceptance,
        })
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn acceptance(&self) -> f64 {
        self.acceptance
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<i64> {
        let u2 = self.radius * self.radius;
        loop {
            let x: Vec<i64> = (0..self.n)
                .map(|_| self.coord.sample(rng) as i64 - self.k)
                .collect();
            let q: i64 = x.iter().map(|v| v * v).sum();
            if (q as f64) <= u2 {
                return x;
            }
        }
    }
}

pub fn sample_truncated(n: usize, r: f64, policy: &TruncationPolicy, seed: u64) -> Result<Vec<i64>> {
    let s = GaussianSampler::new(n, r, policy)?;
    Ok(s.sample(&mut ChaCha8Rng::seed_from_u64(seed)))
}

#[derive(Clone, Copy, Debug)]
pub struct PoissonCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub rel_err: f64,
    pub lhs_tail: f64,
    pub rhs_tail: f64,
}

/// Both sides of the Gaussian Poisson identity over auto-sized certified boxes.
pub fn poisson_identity_check(m: &DMatrix<f64>) -> Result<PoissonCheck> {
    let n = m.nrows();
    let primal = GaussianShape::from_precision(m.clone(), vec![0.0; n])?;
    let minv = m
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::domain("singular matrix"))?;
    let minv = (&minv + minv.transpose()) * 0.5;
    let dual = GaussianShape::from_precision(minv, vec![0.0; n])?;
    let lhs = rho_sum(&primal, &primal.certified_box(1e-13))?;
    let db = dual.certified_box(1e-13);
    let dual_sum = rho_sum(&dual, &db)?;
    let det = m.determinant();
    if !(det > 0.0) {
        return Err(Error::domain("matrix is not positive definite"));
    }
    let scale = det.powf(-0.5);
    let rhs = scale * dual_sum.value;
    if lhs.tail_bound > 1e-10 || dual_sum.tail_bound > 1e-10 {
        return Err(Error::precondition("tail certificates above 1e-10"));
    }
    Ok(PoissonCheck {
        lhs: lhs.value,
        rhs,
        rel_err: (lhs.value - rhs).abs() / rhs,
        lhs_tail: lhs.tail_bound,
        rhs_tail: scale * dual_sum.tail_bound,
    })
}

/// Numeric `eta_eps(Z^n)`: the `s` with `rho_{1/s}(Z^n \ 0) = eps`, by bisection.
pub fn smoothing_parameter_zn(n: usize, eps: f64) -> f64 {
    let excess = |s: f64| {
        let t = comp_sum((-40i64..=40).map(|k| (-PI * s * s * (k * k) as f64).exp()));
        t.powi(n as i32) - 1.0
    };
    let (mut lo, mut hi) = (1e-3, 10.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if excess(mid) > eps {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

#[derive(Clone, Debug)]
pub struct SmoothingWindow {
    /// `det(M)^{1/2} * sum exp(-pi x^T M x)`.
    pub ratio: f64,
    pub eps: f64,
    pub condition_holds: bool,
    pub within: bool,
}

/// When `lambda_min(M^{-1}) >= eta_eps(Z^n)^2`, the Gaussian sum is `det(M)^{-1/2}(1 +- eps)`.
pub fn poisson_smoothing_window(m: &DMatrix<f64>, eps: f64) -> Result<SmoothingWindow> {
    let n = m.nrows();
    let check = poisson_identity_check(m)?;
    let ev = spd_eigenvalues(m)?;
    let eta = smoothing_parameter_zn(n, eps);
    let ratio = check.lhs * m.determinant().sqrt();
    Ok(SmoothingWindow {
        ratio,
        eps,
        condition_holds: 1.0 / ev[n - 1] >= eta * eta,
        within: (ratio - 1.0).abs() <= eps,
    })
}

#[derive(Clone, Debug)]
pub struct EtaBound {
    /// Successive minima `lambda_1..lambda_n`.
    pub minima: Vec<f64>,
    pub bound: f64,
}

/// `sqrt(ln(2n(1+1/eps))/pi) * lambda_n(L)` for the lattice spanned by the columns of `basis`.
pub fn smoothing_eta_bound(basis: &DMatrix<f64>, eps: f64) -> Result<EtaBound> {
    let n = basis.nrows();
    if n > 4 {
        return Err(Error::UnsupportedDimension { n, max: 4 });
    }
    if !basis.is_square() || n == 0 {
        return Err(Error::domain("basis must be square"));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::domain("eps must lie in (0,1)"));
    }
    let minima = successive_minima(basis)?;
    let bound = ((2.0 * n as f64 * (1.0 + 1.0 / eps)).ln() / PI).sqrt() * minima[n - 1];
    Ok(EtaBound { minima, bound })
}

/// Successive minima by exhaustive enumeration inside a certified coefficient box.
pub fn successive_minima(basis: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = basis.nrows();
    let svd = basis.clone().svd(false, false);
    let smin = svd.singular_values.iter().copied().fold(f64::INFINITY, f64::min);
    if !(smin > 1e-12) {
        return Err(Error::domain("basis columns are linearly dependent"));
    }
    let r0 = (0..n)
        .map(|j| basis.column(j).norm())
        .fold(0.0f64, f64::max);
    let k = (r0 / smin).floor() as i64 + 1;
    if (2 * k + 1).pow(n as u32) > 50_000_000 {
        return Err(Error::budget("short-vector enumeration box too large"));
    }
    let mut vecs: Vec<(f64, Vec<f64>)> = Vec::new();
    for z in IntBox::cube(n, k).points() {
        if z.iter().all(|&v| v == 0) {
            continue;
        }
        let zv = nalgebra::DVector::from_iterator(n, z.iter().map(|&v| v as f64));
        let y = basis * zv;
        let len = y.norm();
        if len <= r0 * (1.0 + 1e-12) {
            vecs.push((len, y.iter().copied().collect()));
        }
    }
    vecs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut chosen: Vec<Vec<f64>> = Vec::new();
    let mut minima = Vec::new();
    for (len, y) in vecs {
        let mut r = y.clone();
        for q in &chosen {
            let d: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
            for (ri, qi) in r.iter_mut().zip(q) {
                *ri -= d * qi;
            }
        }
        let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rn > 1e-9 * len.max(1.0) {
            chosen.push(r.iter().map(|v| v / rn).collect());
            minima.push(len);
            if minima.len() == n {
                break;
            }
        }
    }
    if minima.len() < n {
        return Err(Error::domain("could not find n independent lattice vectors"));
    }
    Ok(minima)
}

#[derive(Clone, Copy, Debug)]
pub struct MaximizerCheck {
    pub shifted: f64,
    pub centered: f64,
    pub pass: bool,
}

/// `rho_{R,c}(Z^n) <= rho_R(Z^n)`.
pub fn shifted_sum_maximizer_check(r: f64, c: &[f64]) -> Result<MaximizerCheck> {
    let n = c.len();
    let centered_shape = GaussianShape::spherical(n, r)?;
    let shifted_shape = centered_shape.clone().with_center(c.to_vec())?;
    let shifted = rho_total(&shifted_shape, 1e-14)?.value;
    let centered = rho_total(&centered_shape, 1e-14)?.value;
    Ok(MaximizerCheck {
        shifted,
        centered,
        pass: shifted <= centered * (1.0 + 1e-12),
    })
}

#[derive(Clone, Copy, Debug)]
pub struct UpperCheck {
    pub sum: f64,
    pub bound: f64,
    pub pass: bool,
}

/// `sum exp(-pi (z-c)^T M (z-c)) <= (1 + lambda_min(M)^{-1/2})^n`.
pub fn multidim_upper_check(m: &DMatrix<f64>, c: &[f64]) -> Result<UpperCheck> {
    let shape = GaussianShape::from_precision(m.clone(), c.to_vec())?;
    let ev = spd_eigenvalues(m)?;
    let s = rho_total(&shape, 1e-14)?;
    let bound = (1.0 + ev[0].powf(-0.5)).powi(m.nrows() as i32);
    Ok(UpperCheck {
        sum: s.value,
        bound,
        pass: s.value <= bound,
    })
}

#[derive(Clone, Debug)]
pub struct DominationCheck {
    pub worst_ratio: f64,
    pub argmax: Vec<i64>,
    pub ratio_at_origin: f64,
    pub pass: bool,
}

/// `max_x (gamma_R * gamma_R)(x) / gamma_{sqrt2 R}(x)` over `|x|_inf <= 2R`.
///
/// Each convolution value is a direct sum over a box centered at `x/2`, wide
/// enough that the omitted part is below `1e-15` relative.
pub fn gamma_conv_domination_check(r: f64, n: usize) -> Result<DominationCheck> {
    if r < ((2.0 / PI) * (8.0 * n as f64).ln()).sqrt() {
        return Err(Error::domain(format!(
            "R = {r} is below sqrt((2/pi) ln(8n))"
        )));
    }
    let g = DiscreteGaussian::new(n, r)?;
    let wide = DiscreteGaussian::new(n, SQRT_2 * r)?;
    let half = radius_for_tail(r / SQRT_2, n, 1e-18).ceil() as i64 + 1;
    let outer = (2.0 * r).ceil() as i64;
    let mut worst = (0.0f64, vec![0i64; n]);
    let mut at_origin = 0.0;
    for x in IntBox::cube(n, outer).points() {
        let mid: Vec<f64> = x.iter().map(|&v| v as f64 / 2.0).collect();
        let inner = IntBox::centered(&mid, half);
        let conv = comp_sum(inner.points().map(|y| {
            let z: Vec<i64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
            g.pmf(&y) * g.pmf(&z)
        }));
        let ratio = conv / wide.pmf(&x);
        if x.iter().all(|&v| v == 0) {
            at_origin = ratio;
        }
        if ratio > worst.0 {
            worst = (ratio, x);
        }
    }
    Ok(DominationCheck {
        worst_ratio: worst.0,
        argmax: worst.1,
        ratio_at_origin: at_origin,
        pass: worst.0 <= 4.0,
    })
}
