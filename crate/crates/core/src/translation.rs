//! Total variation under translation, line energies and the bounds that turn a
//! structured large spectrum into translation invariance.

use crate::dgauss::{DiscreteGaussian, TruncationPolicy};
use crate::fft::unflatten;
use crate::measure::{
    convolve_many_fft, density_certificate, grid_point, transform_grid, SparseMeasure,
};
use crate::numeric::{comp_sum, norm2, norm2_i, torus_dist, torus_reduce_vec, Compensated, IntBox};
use crate::spectrum::{
    convolution_structure, ConvolutionStructure, Rat, Structure, StructureRoute,
};
use crate::{Error, Result};
use num_traits::Zero;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use std::f64::consts::PI;

/// `(1/2) sum_x |nu(x) - nu(x - v)|` over the union of supports.
pub fn tv_distance(nu: &SparseMeasure, v: &[i64]) -> f64 {
    if v.iter().all(|&x| x == 0) {
        return 0.0;
    }
    let mut acc = Compensated::new();
    let mut y = vec![0i64; v.len()];
    for (x, m) in nu.iter() {
        // Atom at x against the shifted copy: nu(x) - nu(x - v).
        for i in 0..v.len() {
            y[i] = x[i] - v[i];
        }
        acc.add((m - nu.get(&y)).abs());
        // Points x + v where the shifted copy has mass but nu does not.
        for i in 0..v.len() {
            y[i] = x[i] + v[i];
        }
        if nu.get(&y) == 0.0 {
            acc.add(m);
        }
    }
    0.5 * acc.value()
}

/// `E_v(nu) = sum_y |nu(y) - nu(y - v)|^2` over the union of supports.
pub fn translation_energy(nu: &SparseMeasure, v: &[i64]) -> f64 {
    let mut acc = Compensated::new();
    let mut y = vec![0i64; v.len()];
    for (x, m) in nu.iter() {
        for i in 0..v.len() {
            y[i] = x[i] - v[i];
        }
        acc.add((m - nu.get(&y)).powi(2));
        for i in 0..v.len() {
            y[i] = x[i] + v[i];
        }
        if nu.get(&y) == 0.0 {
            acc.add(m * m);
        }
    }
    acc.value()
}

/// Decomposition of `nu` along lines `x + Z v` with centered representatives.
#[derive(Clone, Debug)]
pub struct LineDecomposition {
    pub direction: Vec<i64>,
    pub center: Vec<f64>,
    pub representatives: Vec<Vec<i64>>,
    /// Index of the first stored position on each line.
    pub offsets: Vec<i64>,
    /// `nu(x + l v)` for `l = offset, offset + 1, ...`.
    pub lines: Vec<Vec<f64>>,
    pub line_masses: Vec<f64>,
    pub line_energies: Vec<f64>,
    pub quadrature_energies: Vec<f64>,
    /// `sum_y |nu(y) - nu(y - v)|^2`, computed without the decomposition.
    pub direct_total_energy: f64,
}

impl LineDecomposition {
    pub fn total_mass(&self) -> f64 {
        comp_sum(self.line_masses.iter().copied())
    }

    pub fn total_energy(&self) -> f64 {
        comp_sum(self.line_energies.iter().copied())
    }

    /// Largest relative gap between direct and quadrature line energies.
    pub fn max_quadrature_error(&self) -> f64 {
        self.line_energies
            .iter()
            .zip(&self.quadrature_energies)
            .map(|(d, q)| {
                if *d == 0.0 {
                    q.abs()
                } else {
                    (d - q).abs() / d
                }
            })
            .fold(0.0, f64::max)
    }

    /// `beta_{x,v}` at cut `u`: energy carried by `||t|| > u`.
    pub fn betas(&self, u: f64) -> Vec<f64> {
        self.lines
            .iter()
            .zip(&self.line_energies)
            .map(|(line, &e)| (e - low_band_energy(line, u)).max(0.0))
            .collect()
    }
}

/// Unique `k` with `-|v|^2/2 < <y - k v - c, v> <= |v|^2/2`.
fn line_index(y: &[i64], v: &[i64], c: &[f64]) -> i64 {
    let vv = v.iter().map(|x| x * x).sum::<i64>() as f64;
    let s: f64 = y
        .iter()
        .zip(v)
        .zip(c)
        .map(|((&yi, &vi), &ci)| (yi as f64 - ci) * vi as f64)
        .sum();
    let mut k = ((s - vv / 2.0) / vv).ceil() as i64;
    // Guard the half-open window against rounding.
    let inner = |k: i64| s - k as f64 * vv;
    while inner(k) > vv / 2.0 {
        k += 1;
    }
    while inner(k) <= -vv / 2.0 {
        k -= 1;
    }
    k
}

/// Split `nu` along direction `v`; representatives minimize distance to `center`.
pub fn line_decomposition(nu: &SparseMeasure, v: &[i64], center: Option<&[f64]>) -> Result<LineDecomposition> {
    if v.iter().all(|&x| x == 0) {
        return Err(Error::domain("line direction must be nonzero"));
    }
    if v.len() != nu.dim() {
        return Err(Error::domain("direction dimension mismatch"));
    }
    let n = nu.dim();
    let c: Vec<f64> = center.map_or(vec![0.0; n], |c| c.to_vec());
    let mut keyed: Vec<(Vec<i64>, i64, f64)> = nu
        .iter()
        .map(|(y, m)| {
            let k = line_index(y, v, &c);
            let x: Vec<i64> = y.iter().zip(v).map(|(a, b)| a - k * b).collect();
            (x, k, m)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out = LineDecomposition {
        direction: v.to_vec(),
        center: c,
        representatives: Vec::new(),
        offsets: Vec::new(),
        lines: Vec::new(),
        line_masses: Vec::new(),
        line_energies: Vec::new(),
        quadrature_energies: Vec::new(),
        direct_total_energy: translation_energy(nu, v),
    };
    let mut i = 0;
    while i < keyed.len() {
        let mut j = i;
        while j < keyed.len() && keyed[j].0 == keyed[i].0 {
            j += 1;
        }
        let lo = keyed[i].1;
        let hi = keyed[j - 1].1;
        let mut line = vec![0.0; (hi - lo + 1) as usize];
        for (_, k, m) in &keyed[i..j] {
            line[(k - lo) as usize] = *m;
        }
        out.representatives.push(keyed[i].0.clone());
        out.offsets.push(lo);
        out.line_masses.push(comp_sum(line.iter().copied()));
        out.line_energies.push(direct_line_energy(&line));
        out.quadrature_energies.push(quadrature_line_energy(&line));
        out.lines.push(line);
        i = j;
    }
    Ok(out)
}

fn differences(line: &[f64]) -> Vec<f64> {
    let mut d = Vec::with_capacity(line.len() + 1);
    let mut prev = 0.0;
    for &x in line {
        d.push(x - prev);
        prev = x;
    }
    d.push(-prev);
    d
}

fn direct_line_energy(line: &[f64]) -> f64 {
    comp_sum(differences(line).iter().map(|d| d * d))
}

/// Trapezoid rule for `int |1 - e(-t)|^2 |nu_hat(t)|^2 dt` on `R/Z`.
///
/// At `2^12` nodes or more than twice the trigonometric degree, whichever is
/// larger, the rule is exact.
fn quadrature_line_energy(line: &[f64]) -> f64 {
    let degree = line.len() + 1;
    let nodes = (1usize << 12).max((2 * degree + 1).next_power_of_two());
    let mut buf: Vec<Complex64> = vec![Complex64::zero(); nodes];
    for (i, &x) in line.iter().enumerate() {
        buf[i] = Complex64::new(x, 0.0);
    }
    FftPlanner::new().plan_fft_forward(nodes).process(&mut buf);
    let mut acc = Compensated::new();
    for (j, f) in buf.iter().enumerate() {
        let t = j as f64 / nodes as f64;
        let w = 4.0 * (PI * t).sin().powi(2);
        acc.add(w * f.norm_sqr());
    }
    acc.value() / nodes as f64
}

/// `int_{|t| <= u} |1 - e(-t)|^2 |nu_hat(t)|^2 dt`, exactly via autocorrelation.
fn low_band_energy(line: &[f64], u: f64) -> f64 {
    let d = differences(line);
    let u = u.min(0.5);
    let mut acc = Compensated::new();
    for m in 0..d.len() {
        let r: f64 = d[..d.len() - m].iter().zip(&d[m..]).map(|(a, b)| a * b).sum();
        if m == 0 {
            acc.add(2.0 * u * r);
        } else {
            acc.add(2.0 * r * (2.0 * PI * m as f64 * u).sin() / (PI * m as f64));
        }
    }
    acc.value()
}

/// The structured frequency set `W` a translation must annihilate.
#[derive(Clone, Debug)]
pub enum FrequencySet {
    Finite(Vec<Vec<f64>>),
    /// Real span of the given vectors, viewed as a subtorus.
    Subspace(Vec<Vec<f64>>),
}

impl FrequencySet {
    /// Upper bound on `dist_T(zeta, W)`.
    pub fn distance(&self, zeta: &[f64]) -> f64 {
        match self {
            FrequencySet::Finite(pts) => pts
                .iter()
                .map(|p| torus_dist(zeta, p))
                .fold(f64::INFINITY, f64::min),
            FrequencySet::Subspace(basis) => {
                let a = torus_reduce_vec(zeta);
                let mut r = a.clone();
                let ortho = orthonormalize(basis);
                for u in &ortho {
                    let p: f64 = r.iter().zip(u).map(|(x, y)| x * y).sum();
                    for (ri, ui) in r.iter_mut().zip(u) {
                        *ri -= p * ui;
                    }
                }
                norm2(&r)
            }
        }
    }

    /// `<v, xi>` integral on `W` (finite) or zero on the basis (subspace).
    pub fn annihilated_by(&self, v: &[i64]) -> bool {
        match self {
            FrequencySet::Finite(pts) => pts.iter().all(|p| {
                let s: f64 = p.iter().zip(v).map(|(a, &b)| a * b as f64).sum();
                (s - s.round()).abs() <= 1e-9
            }),
            FrequencySet::Subspace(basis) => basis.iter().all(|p| {
                let s: f64 = p.iter().zip(v).map(|(a, &b)| a * b as f64).sum();
                s.abs() <= 1e-9
            }),
        }
    }
}

fn orthonormalize(vs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    for v in vs {
        let mut r = v.clone();
        for u in &out {
            let p: f64 = r.iter().zip(u).map(|(a, b)| a * b).sum();
            for (ri, ui) in r.iter_mut().zip(u) {
                *ri -= p * ui;
            }
        }
        let nr = norm2(&r);
        if nr > 1e-12 {
            out.push(r.iter().map(|x| x / nr).collect());
        }
    }
    out
}

/// Grid view of `|nu_hat|` against the distance to `W`.
#[derive(Clone, Debug)]
pub struct SpectralProfile {
    pub grid_exponent: u32,
    /// Half the grid diagonal, added to every localization radius.
    pub pad: f64,
    mags: Vec<f64>,
    /// Running maximum of distances, in decreasing magnitude order.
    running: Vec<f64>,
    /// `(distance, magnitude)` per grid point.
    points: Vec<(f64, f64)>,
}

impl SpectralProfile {
    pub fn new(nu: &SparseMeasure, w: &FrequencySet, grid_exponent: u32) -> Result<Self> {
        let n = nu.dim();
        let side = 1usize << grid_exponent;
        if (side as f64).powi(n as i32) > (1u64 << 24) as f64 {
            return Err(Error::budget("profile grid exceeds 2^24 points"));
        }
        let grid = transform_grid(nu, side);
        let shape = vec![side; n];
        let mut points: Vec<(f64, f64)> = grid
            .iter()
            .enumerate()
            .map(|(flat, v)| {
                let z = grid_point(&unflatten(flat, &shape), side);
                (w.distance(&z), v.norm())
            })
            .collect();
        points.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.total_cmp(&b.0)));
        let mut running = Vec::with_capacity(points.len());
        let mut best = 0.0f64;
        for p in &points {
            best = best.max(p.0);
            running.push(best);
        }
        Ok(SpectralProfile {
            grid_exponent,
            pad: (n as f64).sqrt() / (2.0 * side as f64),
            mags: points.iter().map(|p| p.1).collect(),
            running,
            points,
        })
    }

    /// Smallest grid-certified `Delta` with `|nu_hat| < eta` beyond distance `Delta`.
    pub fn delta(&self, eta: f64) -> f64 {
        // mags are descending: count of entries >= eta.
        let cnt = self.mags.partition_point(|&m| m >= eta);
        if cnt == 0 {
            0.0
        } else {
            self.running[cnt - 1] + self.pad
        }
    }

    /// Largest grid magnitude at distance greater than `delta`.
    pub fn sup_beyond(&self, delta: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.0 > delta)
            .map(|p| p.1)
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct SpectralEnergyReport {
    pub u: f64,
    pub lines: usize,
    /// Largest `E_{x,v} - (8 pi^2/3) u^3 p^2 - beta` over lines (should be <= 0).
    pub worst_line_excess: f64,
    pub beta_sum: f64,
    pub beta_bound: f64,
    pub slack: f64,
    pub observed_eta: f64,
    pub pass: bool,
}

fn spectral_preconditions(
    nu: &SparseMeasure,
    w: &FrequencySet,
    delta: f64,
    eta: f64,
    v: &[i64],
    profile: Option<&SpectralProfile>,
) -> Result<f64> {
    let mut issues = Vec::new();
    if v.iter().all(|&x| x == 0) {
        issues.push("v must be nonzero".to_string());
    }
    if !w.annihilated_by(v) {
        issues.push(format!("v = {v:?} does not annihilate W"));
    }
    let vn = norm2_i(v);
    if vn * delta > 0.5 + 1e-12 {
        issues.push(format!("|v| = {vn:.3} exceeds 1/(2 Delta) = {:.3}", 0.5 / delta));
    }
    let owned;
    let prof = match profile {
        Some(p) => p,
        None => {
            owned = SpectralProfile::new(nu, w, default_profile_exponent(nu.dim()))?;
            &owned
        }
    };
    let observed = prof.sup_beyond(delta);
    if observed > eta {
        issues.push(format!(
            "scan finds |nu_hat| = {observed:.3e} > eta = {eta:.3e} beyond Delta = {delta:.4}"
        ));
    }
    if issues.is_empty() {
        Ok(observed)
    } else {
        Err(Error::precondition(issues.join("; ")))
    }
}

fn default_profile_exponent(n: usize) -> u32 {
    match n {
        1 => 14,
        2 => 9,
        3 => 6,
        _ => 4,
    }
}

/// Per-line main/tail split of the translation energy and the aggregate tail bound.
pub fn spectral_energy_bound_check(
    nu: &SparseMeasure,
    w: &FrequencySet,
    delta: f64,
    eta: f64,
    v: &[i64],
) -> Result<SpectralEnergyReport> {
    let observed = spectral_preconditions(nu, w, delta, eta, v, None)?;
    let dec = line_decomposition(nu, v, None)?;
    let u = norm2_i(v) * delta;
    let betas = dec.betas(u);
    let mut worst = f64::NEG_INFINITY;
    for ((e, p), b) in dec.line_energies.iter().zip(&dec.line_masses).zip(&betas) {
        let main = 8.0 * PI * PI / 3.0 * u.powi(3) * p * p;
        worst = worst.max(e - main - b);
    }
    let beta_sum = comp_sum(betas.iter().copied());
    let slack = 1e-12 * dec.total_energy() + 1e-18;
    let bound = 4.0 * eta * eta;
    Ok(SpectralEnergyReport {
        u,
        lines: dec.lines.len(),
        worst_line_excess: worst.max(0.0),
        beta_sum,
        beta_bound: bound,
        slack,
        observed_eta: observed,
        pass: worst <= slack && beta_sum <= bound + slack,
    })
}

#[derive(Clone, Debug)]
pub struct BallReduction {
    pub main: f64,
    pub spectral_tail: f64,
    pub mass_tail: f64,
    pub bound: f64,
    pub actual: f64,
    pub delta: f64,
    pub eta: f64,
    pub h: f64,
    pub pass: bool,
}

/// Bound on `d_TV(nu, tau_v nu)` from a centered ball of radius `H`, checked against the exact TV.
pub fn ball_reduction_tv_bound(
    nu: &SparseMeasure,
    v: &[i64],
    w: &FrequencySet,
    delta: f64,
    eta: f64,
    center: &[f64],
    h: f64,
) -> Result<BallReduction> {
    ball_reduction_with_profile(nu, v, w, delta, eta, center, h, None)
}

#[allow(clippy::too_many_arguments)]
fn ball_reduction_with_profile(
    nu: &SparseMeasure,
    v: &[i64],
    w: &FrequencySet,
    delta: f64,
    eta: f64,
    center: &[f64],
    h: f64,
    profile: Option<&SpectralProfile>,
) -> Result<BallReduction> {
    let vn = norm2_i(v);
    if h < vn {
        return Err(Error::precondition(format!("H = {h} below |v| = {vn:.3}")));
    }
    spectral_preconditions(nu, w, delta, eta, v, profile)?;
    let n = nu.dim() as i32;
    let main = PI * (2.0 * h).sqrt() * vn * delta.powf(1.5);
    let spectral_tail = (4.0 * h).powf((n + 1) as f64 / 2.0) * eta;
    let cut = h - vn;
    let mass_tail = comp_sum(nu.iter().filter_map(|(y, m)| {
        let d: f64 = y
            .iter()
            .zip(center)
            .map(|(&a, b)| (a as f64 - b).powi(2))
            .sum::<f64>()
            .sqrt();
        (d > cut).then_some(m)
    })) + nu.deficit();
    let bound = main + spectral_tail + mass_tail;
    let actual = tv_distance(nu, v);
    Ok(BallReduction {
        main,
        spectral_tail,
        mass_tail,
        bound,
        actual,
        delta,
        eta,
        h,
        pass: actual <= bound + 1e-9,
    })
}

/// Search `eta` and `H` over fixed ladders for the smallest admissible bound.
pub fn best_ball_reduction(
    nu: &SparseMeasure,
    v: &[i64],
    w: &FrequencySet,
    center: &[f64],
) -> Result<BallReduction> {
    let profile = SpectralProfile::new(nu, w, default_profile_exponent(nu.dim()))?;
    let vn = norm2_i(v);
    let mut radii: Vec<(f64, f64)> = nu
        .iter()
        .map(|(y, m)| {
            let d = y
                .iter()
                .zip(center)
                .map(|(&a, b)| (a as f64 - b).powi(2))
                .sum::<f64>()
                .sqrt();
            (d, m)
        })
        .collect();
    radii.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut hs = Vec::new();
    let mut outside = 0.0;
    let mut targets = [1e-2, 1e-4, 1e-6, 1e-8, 1e-10, 1e-12].into_iter().peekable();
    for (d, m) in &radii {
        outside += m;
        while let Some(&t) = targets.peek() {
            if outside > t {
                hs.push(d + vn + 1.0);
                targets.next();
            } else {
                break;
            }
        }
    }
    hs.push(radii.first().map_or(vn, |r| r.0) + vn + 1.0);
    let mut best: Option<BallReduction> = None;
    for k in 1..=14 {
        let eta = 10f64.powi(-k);
        let delta = profile.delta(eta);
        if delta <= 0.0 || vn * delta > 0.5 {
            continue;
        }
        for &h in &hs {
            let h = h.max(vn);
            match ball_reduction_with_profile(nu, v, w, delta, eta, center, h, Some(&profile)) {
                Ok(r) => {
                    if best.as_ref().map_or(true, |b| r.bound < b.bound) {
                        best = Some(r);
                    }
                }
                Err(Error::Precondition(_)) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    best.ok_or_else(|| Error::precondition("no admissible (eta, H) pair for ball reduction"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TailCenter {
    pub center: Vec<f64>,
    pub level: f64,
    pub radius: f64,
    pub mass_bound: f64,
    /// Per-measure truncation radii `T_i` (in units of `R`).
    pub truncation: Vec<f64>,
    pub s: f64,
    /// Mass of the convolution outside the ball, exact or sampled.
    pub outside_mass: f64,
    pub exact: bool,
}

/// Center and radius capturing all but `2M exp(-L^2/2)` of `mu_1 * ... * mu_M`.
pub fn convolution_tail_center(mus: &[SparseMeasure], r: f64, level: f64) -> Result<TailCenter> {
    if mus.is_empty() {
        return Err(Error::domain("need at least one measure"));
    }
    if !(level >= 1.0) {
        return Err(Error::precondition("tail level L must be at least 1"));
    }
    let n = mus[0].dim();
    let m = mus.len() as f64;
    let alphas: Vec<f64> = mus
        .iter()
        .map(|mu| density_certificate(mu, r).map(|c| c.alpha.min(1.0)))
        .collect::<Result<_>>()?;
    let alpha = (alphas.iter().map(|a| a.ln()).sum::<f64>() / m).exp();
    let s = (2.0 / alpha).log2();
    let mut center = vec![0.0; n];
    let mut truncation = Vec::with_capacity(mus.len());
    for (mu, a) in mus.iter().zip(&alphas) {
        let t = (level * level
            + (2.0 / PI) * ((2f64.sqrt()).powi(n as i32) / a).ln())
        .sqrt();
        truncation.push(t);
        let cut = r * t;
        for i in 0..n {
            center[i] += comp_sum(mu.iter().filter_map(|(x, w)| {
                (norm2_i(x) <= cut).then(|| w * x[i] as f64)
            }));
        }
    }
    let radius = 2.0 * r * m.sqrt() * level * (n as f64 + level * level + s).sqrt();
    let mass_bound = 2.0 * m * (-level * level / 2.0).exp();
    let refs: Vec<&SparseMeasure> = mus.iter().collect();
    let (outside_mass, exact) = match convolve_many_fft(&refs, None, 1.0) {
        Ok(nu) => {
            let out = comp_sum(nu.iter().filter_map(|(y, w)| {
                let d = y
                    .iter()
                    .zip(&center)
                    .map(|(&a, b)| (a as f64 - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                (d > radius).then_some(w)
            }));
            (out + nu.deficit(), true)
        }
        Err(Error::Budget(_)) => (sampled_outside(mus, &center, radius, 100_000, 7), false),
        Err(e) => return Err(e),
    };
    Ok(TailCenter {
        center,
        level,
        radius,
        mass_bound,
        truncation,
        s,
        outside_mass,
        exact,
    })
}

fn sampled_outside(mus: &[SparseMeasure], c: &[f64], radius: f64, trials: usize, seed: u64) -> f64 {
    use rand::distributions::{Distribution, WeightedIndex};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let samplers: Vec<WeightedIndex<f64>> = mus
        .iter()
        .map(|mu| WeightedIndex::new(mu.masses()).expect("positive masses"))
        .collect();
    let mut hits = 0usize;
    for _ in 0..trials {
        let mut y = vec![0.0; c.len()];
        for (mu, s) in mus.iter().zip(&samplers) {
            let (x, _) = mu.atom(s.sample(&mut rng));
            for i in 0..y.len() {
                y[i] += x[i] as f64;
            }
        }
        let d = y.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if d > radius {
            hits += 1;
        }
    }
    hits as f64 / trials as f64
}

#[derive(Clone, Debug)]
pub struct TranslationConfig {
    pub route: StructureRoute,
    /// Kernel enumeration radius `D`.
    pub d: f64,
    /// Number of non-kernel control vectors reported.
    pub controls: usize,
}

#[derive(Clone, Debug)]
pub struct TranslationReport {
    pub structure: ConvolutionStructure,
    /// Dimension of the structure (`m` or `l`).
    pub dimension: usize,
    pub kernel: Vec<(Vec<i64>, f64)>,
    pub control: Vec<(Vec<i64>, f64)>,
    pub max_kernel_tv: Option<f64>,
    /// Deficit of the measure whose translates were compared.
    pub deficit: f64,
}

/// Nonzero integer vectors with `|v| <= d`, by norm then lexicographically.
pub fn integer_ball(n: usize, d: f64) -> Vec<Vec<i64>> {
    let r = d.floor() as i64;
    let mut out: Vec<Vec<i64>> = IntBox::cube(n, r)
        .points()
        .filter(|v| v.iter().any(|&x| x != 0) && norm2_i(v) <= d + 1e-12)
        .collect();
    out.sort_by(|a, b| {
        let na: i64 = a.iter().map(|x| x * x).sum();
        let nb: i64 = b.iter().map(|x| x * x).sum();
        na.cmp(&nb).then_with(|| a.cmp(b))
    });
    out
}

/// Does `v` lie in the kernel of the extracted structure?
pub fn in_structure_kernel(structure: &Structure, v: &[i64]) -> bool {
    match structure {
        Structure::Lattice(ex) => ex.lattice.generators.iter().all(|t| {
            let s: Rat = t
                .iter()
                .zip(v)
                .map(|(a, &b)| a * Rat::from_integer(b))
                .fold(Rat::zero(), |acc, x| acc + x);
            s.is_integer()
        }),
        Structure::Subspace(ex) => ex
            .basis
            .numerators
            .iter()
            .all(|row| row.iter().zip(v).map(|(a, b)| a * b).sum::<i64>() == 0),
    }
}

pub fn structure_dimension(structure: &Structure) -> usize {
    match structure {
        Structure::Lattice(ex) => ex.lattice.len(),
        Structure::Subspace(ex) => ex.basis.ell(),
    }
}

/// Convolution of the pieces, with one extra `gamma_R` factor when `mollify` is set.
pub fn conditioned_convolution(mus: &[SparseMeasure], r: f64, mollify: bool) -> Result<SparseMeasure> {
    let mut factors: Vec<SparseMeasure> = mus.to_vec();
    if mollify {
        let n = mus.first().ok_or_else(|| Error::domain("need at least one measure"))?.dim();
        factors.push(DiscreteGaussian::new(n, r)?.truncated(&TruncationPolicy::default())?);
    }
    let refs: Vec<&SparseMeasure> = factors.iter().collect();
    convolve_many_fft(&refs, None, 1.0)
}

/// Extract the route's structure and measure the translation TV of its kernel.
pub fn translation_invariance_certify(mus: &[SparseMeasure], cfg: &TranslationConfig) -> Result<TranslationReport> {
    if !(cfg.d > 0.0 && cfg.d <= 12.0) {
        return Err(Error::config("kernel radius D must lie in (0, 12]"));
    }
    let structure = convolution_structure(mus, &cfg.route)?;
    let (r, mollify) = match &cfg.route {
        StructureRoute::Exact(c) => (c.radius, false),
        StructureRoute::NearOrigin(c) => (c.radius, true),
    };
    let nu = conditioned_convolution(mus, r, mollify)?;
    Ok(certify_with(structure, &nu, cfg.d, cfg.controls))
}

/// Kernel and control TVs of `nu` for an already extracted structure.
pub fn certify_with(structure: ConvolutionStructure, nu: &SparseMeasure, d: f64, controls: usize) -> TranslationReport {
    let mut kernel = Vec::new();
    let mut control = Vec::new();
    for v in integer_ball(nu.dim(), d) {
        if in_structure_kernel(&structure.structure, &v) {
            let tv = tv_distance(nu, &v);
            kernel.push((v, tv));
        } else if control.len() < controls {
            let tv = tv_distance(nu, &v);
            control.push((v, tv));
        }
    }
    let max_kernel_tv = kernel.iter().map(|k| k.1).reduce(f64::max);
    TranslationReport {
        dimension: structure_dimension(&structure.structure),
        structure,
        kernel,
        control,
        max_kernel_tv,
        deficit: nu.deficit(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgauss::{DiscreteGaussian, TruncationPolicy};
    use crate::measure::convolve_power_fft;
    use crate::spectrum::ExactConfig;
    use proptest::prelude::*;

    fn gamma(n: usize, r: f64) -> SparseMeasure {
        DiscreteGaussian::new(n, r)
            .unwrap()
            .truncated(&TruncationPolicy::default())
            .unwrap()
    }

    fn brute_tv(nu: &SparseMeasure, v: &[i64]) -> f64 {
        let b = nu.bounding_box().unwrap();
        let lo: Vec<i64> = b.lo.iter().zip(v).map(|(l, &x)| l.min(&(l + x)).to_owned()).collect();
        let hi: Vec<i64> = b.hi.iter().zip(v).map(|(h, &x)| *h.max(&(h + x))).collect();
        let big = IntBox::new(lo, hi).unwrap();
        0.5 * big
            .points()
            .map(|y| {
                let s: Vec<i64> = y.iter().zip(v).map(|(a, b)| a - b).collect();
                (nu.get(&y) - nu.get(&s)).abs()
            })
            .sum::<f64>()
    }

    #[test]
    fn tv_examples() {
        let g = gamma(1, 8.0);
        assert_eq!(tv_distance(&g, &[0]), 0.0);
        let p = SparseMeasure::point_mass(vec![3, -1]);
        assert_eq!(tv_distance(&p, &[1, 0]), 1.0);
        assert!((tv_distance(&g, &[1]) - brute_tv(&g, &[1])).abs() < 1e-13);
    }

    #[test]
    fn line_decomposition_identities() {
        let g = gamma(2, 8.0);
        let dec = line_decomposition(&g, &[1, 2], None).unwrap();
        assert!((dec.total_mass() - g.total_mass()).abs() < 1e-10);
        assert!((dec.total_energy() - dec.direct_total_energy).abs() < 1e-10);
        assert!(dec.max_quadrature_error() < 1e-6);
        // Representatives are closest to the center within their coset.
        for x in &dec.representatives {
            let s: i64 = x[0] + 2 * x[1];
            assert!(-5 < 2 * s && 2 * s <= 5);
        }
    }

    #[test]
    fn single_line_measure() {
        let mu = SparseMeasure::from_atoms(2, (0..5).map(|l| (vec![l, l], 0.2))).unwrap();
        let dec = line_decomposition(&mu, &[1, 1], None).unwrap();
        assert_eq!(dec.lines.len(), 1);
    }

    #[test]
    fn low_band_matches_quadrature() {
        let line = [0.1, 0.4, 0.3, 0.2];
        let full = direct_line_energy(&line);
        assert!((low_band_energy(&line, 0.5) - full).abs() < 1e-14);
        // Brute midpoint quadrature of the band integral.
        let u = 0.13;
        let nodes = 200_000;
        let mut acc = 0.0;
        for j in 0..nodes {
            let t = -u + 2.0 * u * (j as f64 + 0.5) / nodes as f64;
            let mut f = Complex64::zero();
            for (l, &x) in line.iter().enumerate() {
                f += x * Complex64::from_polar(1.0, -2.0 * PI * l as f64 * t);
            }
            acc += 4.0 * (PI * t).sin().powi(2) * f.norm_sqr();
        }
        acc *= 2.0 * u / nodes as f64;
        assert!((low_band_energy(&line, u) - acc).abs() < 1e-9);
    }

    fn parity_nu() -> SparseMeasure {
        let (even, _) = gamma(2, 8.0).restrict(|x| (x[0] + x[1]).rem_euclid(2) == 0).unwrap();
        convolve_power_fft(&even, 8, None, 1.0).unwrap()
    }

    #[test]
    fn spectral_energy_point_mass_and_parity() {
        let delta0 = SparseMeasure::point_mass(vec![0, 0]);
        let dec = line_decomposition(&delta0, &[1, 1], None).unwrap();
        assert!(dec.line_energies.iter().all(|&e| (e - 2.0).abs() < 1e-15));
        let nu = parity_nu();
        let w = FrequencySet::Finite(vec![vec![0.0, 0.0], vec![0.5, 0.5]]);
        let prof = SpectralProfile::new(&nu, &w, 9).unwrap();
        let eta = 1e-8;
        let delta = prof.delta(eta);
        let rep = spectral_energy_bound_check(&nu, &w, delta, eta, &[1, 1]).unwrap();
        assert!(rep.pass, "{rep:?}");
        let err = spectral_energy_bound_check(&nu, &w, delta, eta, &[1, 0]).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn ball_reduction_parity_and_gaussian() {
        let nu = parity_nu();
        let w = FrequencySet::Finite(vec![vec![0.0, 0.0], vec![0.5, 0.5]]);
        let r = best_ball_reduction(&nu, &[1, 1], &w, &[0.0, 0.0]).unwrap();
        assert!(r.pass);
        assert!((r.actual - brute_tv(&nu, &[1, 1])).abs() < 1e-12);
        let g = convolve_power_fft(&gamma(2, 8.0), 8, None, 1.0).unwrap();
        let w0 = FrequencySet::Finite(vec![vec![0.0, 0.0]]);
        let r = best_ball_reduction(&g, &[1, 0], &w0, &[0.0, 0.0]).unwrap();
        assert!(r.pass);
        let p = SparseMeasure::point_mass(vec![0, 0]);
        assert!(ball_reduction_tv_bound(&p, &[1, 0], &w0, 0.1, 1e-3, &[0.0, 0.0], 10.0).is_err());
    }

    #[test]
    fn tail_center_examples() {
        let g = gamma(1, 8.0);
        let tc = convolution_tail_center(&vec![g.clone(); 4], 8.0, 2.0).unwrap();
        assert!(tc.center[0].abs() < 1e-12);
        assert!(tc.exact);
        assert!(tc.outside_mass <= tc.mass_bound);
        assert!((tc.mass_bound - 8.0 * (-2.0f64).exp()).abs() < 1e-12);
        let shifted = g.translate(&[3]);
        let tc = convolution_tail_center(&vec![shifted; 4], 8.0, 2.0).unwrap();
        assert!((tc.center[0] - 12.0).abs() < 0.1);
    }

    #[test]
    fn parity_cosets_are_rigid() {
        let nu = parity_nu();
        assert!((tv_distance(&nu, &[1, 0]) - 1.0).abs() < 1e-12);
        assert!((tv_distance(&nu, &[2, 1]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn certify_parity_kernel() {
        let (even, _) = gamma(2, 8.0).restrict(|x| (x[0] + x[1]).rem_euclid(2) == 0).unwrap();
        let cfg = TranslationConfig {
            route: StructureRoute::Exact(ExactConfig::new(324.0, 2048, 3, 0.1, 8.0)),
            d: 3.0,
            controls: 4,
        };
        let rep = translation_invariance_certify(&vec![even; 4], &cfg).unwrap();
        assert_eq!(rep.dimension, 1);
        assert!(rep.kernel.iter().all(|(v, _)| (v[0] + v[1]).rem_euclid(2) == 0));
        assert!(rep.control.iter().all(|(_, tv)| (tv - 1.0).abs() < 1e-12));
        assert!(rep.max_kernel_tv.unwrap() < 1.0);
    }

    proptest! {
        #[test]
        fn tv_reflection_symmetry(v in proptest::collection::vec(-4i64..5, 2), r in 2.0f64..6.0) {
            let g = gamma(2, r).translate(&[1, 0]);
            let a = tv_distance(&g, &v);
            let neg: Vec<i64> = v.iter().map(|x| -x).collect();
            let b = tv_distance(&g.reflect(), &neg);
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn tv_cauchy_schwarz(v in proptest::collection::vec(-3i64..4, 2)) {
            let g = gamma(2, 3.0);
            let tv = tv_distance(&g, &v);
            let e = translation_energy(&g, &v);
            let support = 2.0 * g.len() as f64;
            prop_assert!(tv <= 0.5 * support.sqrt() * e.sqrt() + 1e-12);
        }

        #[test]
        fn line_parseval_random(v in proptest::collection::vec(-3i64..4, 2), r in 2.0f64..5.0) {
            prop_assume!(v.iter().any(|&x| x != 0));
            let g = gamma(2, r).translate(&[2, -1]);
            let dec = line_decomposition(&g, &v, Some(&[0.5, 0.25])).unwrap();
            prop_assert!(dec.max_quadrature_error() < 1e-6);
            prop_assert!((dec.total_energy() - dec.direct_total_energy).abs() < 1e-10);
        }
    }
}
