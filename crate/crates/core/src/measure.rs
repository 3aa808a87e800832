//! Finitely supported measures on `Z^n` and their Fourier transforms on the torus.
//!
//! Transforms use the convention `mu_hat(zeta) = sum_x mu(x) e(-<zeta, x>)` with
//! `e(t) = exp(2 pi i t)`.

use crate::dgauss::DiscreteGaussian;
use crate::fft::{fft_nd, unflatten};
use crate::numeric::{
    bezout_vector, comp_sum, next_pow2, norm2_i, torus_dist, torus_reduce, torus_reduce_vec,
    Compensated, IntBox,
};
use crate::{Error, Result};
use num_complex::Complex64;
use std::cmp::Ordering;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

/// Probability (or explicitly sub-probability) measure with finite support.
///
/// Atoms are stored sorted lexicographically with no duplicates and no zero masses.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMeasure {
    n: usize,
    coords: Vec<i64>,
    mass: Vec<f64>,
    deficit: f64,
}

fn lex(a: &[i64], b: &[i64]) -> Ordering {
    a.cmp(b)
}

impl SparseMeasure {
    pub fn from_atoms<I>(n: usize, atoms: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Vec<i64>, f64)>,
    {
        if n == 0 {
            return Err(Error::domain("dimension must be positive"));
        }
        let mut acc: HashMap<Vec<i64>, Compensated> = HashMap::new();
        for (x, m) in atoms {
            if x.len() != n {
                return Err(Error::domain("atom dimension mismatch"));
            }
            if !(m >= 0.0) || !m.is_finite() {
                return Err(Error::domain(format!("invalid mass {m}")));
            }
            acc.entry(x).or_default().add(m);
        }
        let mut atoms: Vec<(Vec<i64>, f64)> = acc
            .into_iter()
            .map(|(x, c)| (x, c.value()))
            .filter(|(_, m)| *m > 0.0)
            .collect();
        atoms.sort_by(|a, b| lex(&a.0, &b.0));
        let mut coords = Vec::with_capacity(atoms.len() * n);
        let mut mass = Vec::with_capacity(atoms.len());
        for (x, m) in atoms {
            coords.extend_from_slice(&x);
            mass.push(m);
        }
        Ok(SparseMeasure {
            n,
            coords,
            mass,
            deficit: 0.0,
        })
    }

    /// Build from a dense row-major grid whose index 0 sits at `lo`.
    fn from_grid(lo: &[i64], shape: &[usize], values: &[f64]) -> Self {
        let n = lo.len();
        let mut coords = Vec::new();
        let mut mass = Vec::new();
        for (flat, &v) in values.iter().enumerate() {
            if v > 0.0 {
                let idx = unflatten(flat, shape);
                for i in 0..n {
                    coords.push(lo[i] + idx[i] as i64);
                }
                mass.push(v);
            }
        }
        SparseMeasure {
            n,
            coords,
            mass,
            deficit: 0.0,
        }
    }

    pub fn point_mass(x: Vec<i64>) -> Self {
        let n = x.len();
        SparseMeasure {
            n,
            coords: x,
            mass: vec![1.0],
            deficit: 0.0,
        }
    }

    pub fn uniform(n: usize, points: Vec<Vec<i64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::domain("uniform measure needs at least one point"));
        }
        let w = 1.0 / points.len() as f64;
        Self::from_atoms(n, points.into_iter().map(|p| (p, w)))
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    /// Mass known to be missing (for example after truncation to a box).
    pub fn deficit(&self) -> f64 {
        self.deficit
    }

    pub fn with_deficit(mut self, deficit: f64) -> Self {
        self.deficit = deficit;
        self
    }

    pub fn atom(&self, i: usize) -> (&[i64], f64) {
        (&self.coords[i * self.n..(i + 1) * self.n], self.mass[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[i64], f64)> + '_ {
        self.coords.chunks_exact(self.n).zip(self.mass.iter().copied())
    }

    pub fn points(&self) -> impl Iterator<Item = &[i64]> + '_ {
        self.coords.chunks_exact(self.n)
    }

    pub fn masses(&self) -> &[f64] {
        &self.mass
    }

    pub fn get(&self, x: &[i64]) -> f64 {
        let (mut lo, mut hi) = (0usize, self.len());
        while lo < hi {
            let mid = (lo + hi) / 2;
            match lex(self.atom(mid).0, x) {
                Ordering::Less => lo = mid + 1,
                Ordering::Greater => hi = mid,
                Ordering::Equal => return self.mass[mid],
            }
        }
        0.0
    }

    pub fn total_mass(&self) -> f64 {
        comp_sum(self.mass.iter().copied())
    }

    /// Scaled to total mass one; the deficit is cleared.
    pub fn normalized(&self) -> Self {
        let t = self.total_mass();
        let mut out = self.clone();
        for m in out.mass.iter_mut() {
            *m /= t;
        }
        out.deficit = 0.0;
        out
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        for m in out.mass.iter_mut() {
            *m *= c;
        }
        out
    }

    /// Conditioning on `pred`: the renormalized restriction and the kept mass.
    pub fn restrict<F: Fn(&[i64]) -> bool>(&self, pred: F) -> Option<(Self, f64)> {
        let kept: Vec<(Vec<i64>, f64)> = self
            .iter()
            .filter(|(x, _)| pred(x))
            .map(|(x, m)| (x.to_vec(), m))
            .collect();
        if kept.is_empty() {
            return None;
        }
        let sub = SparseMeasure::from_atoms(self.n, kept).ok()?;
        let beta = sub.total_mass();
        Some((sub.normalized(), beta))
    }

    /// `x -> mu(-x)`.
    pub fn reflect(&self) -> Self {
        SparseMeasure::from_atoms(
            self.n,
            self.iter()
                .map(|(x, m)| (x.iter().map(|v| -v).collect(), m)),
        )
        .expect("reflection preserves validity")
        .with_deficit(self.deficit)
    }

    /// Law of `X + v`.
    pub fn translate(&self, v: &[i64]) -> Self {
        let mut out = self.clone();
        for chunk in out.coords.chunks_exact_mut(self.n) {
            for (c, d) in chunk.iter_mut().zip(v) {
                *c += d;
            }
        }
        out
    }

    pub fn bounding_box(&self) -> Option<IntBox> {
        if self.is_empty() {
            return None;
        }
        let mut lo = vec![i64::MAX; self.n];
        let mut hi = vec![i64::MIN; self.n];
        for x in self.points() {
            for i in 0..self.n {
                lo[i] = lo[i].min(x[i]);
                hi[i] = hi[i].max(x[i]);
            }
        }
        Some(IntBox { lo, hi })
    }

    pub fn mean(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| comp_sum(self.iter().map(|(x, m)| m * x[i] as f64)))
            .collect()
    }

    /// `E |x|_2`.
    pub fn mean_norm(&self) -> f64 {
        comp_sum(self.iter().map(|(x, m)| m * norm2_i(x)))
    }

    pub fn max_norm(&self) -> f64 {
        self.points().map(norm2_i).fold(0.0, f64::max)
    }

    pub fn fourier_at(&self, zeta: &[f64]) -> Complex64 {
        let mut re = Compensated::new();
        let mut im = Compensated::new();
        for (x, m) in self.iter() {
            let ph = phase(zeta, x);
            let (s, c) = (2.0 * PI * ph).sin_cos();
            re.add(m * c);
            im.add(-m * s);
        }
        Complex64::new(re.value(), im.value())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("n={} deficit={:.17e}\n", self.n, self.deficit);
        for (x, m) in self.iter() {
            for v in x {
                let _ = write!(s, "{v} ");
            }
            let _ = writeln!(s, "{m:.17e}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
        let (hl, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "missing header".into(),
        })?;
        let perr = |line: usize, msg: &str| Error::Parse {
            line: line + 1,
            msg: msg.to_string(),
        };
        let mut n = None;
        let mut deficit = 0.0;
        for tok in header.split_whitespace() {
            if let Some(v) = tok.strip_prefix("n=") {
                n = Some(v.parse::<usize>().map_err(|_| perr(hl, "bad dimension"))?);
            } else if let Some(v) = tok.strip_prefix("deficit=") {
                deficit = v.parse::<f64>().map_err(|_| perr(hl, "bad deficit"))?;
            } else {
                return Err(perr(hl, "unknown header field"));
            }
        }
        let n = n.ok_or_else(|| perr(hl, "header lacks n="))?;
        let mut atoms = Vec::new();
        for (ln, line) in lines {
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != n + 1 {
                return Err(perr(ln, "wrong number of columns"));
            }
            let x = toks[..n]
                .iter()
                .map(|t| t.parse::<i64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| perr(ln, "bad coordinate"))?;
            let m = toks[n].parse::<f64>().map_err(|_| perr(ln, "bad mass"))?;
            atoms.push((x, m));
        }
        Ok(SparseMeasure::from_atoms(n, atoms)?.with_deficit(deficit))
    }

    /// Dense row-major copy on the box `[lo, lo + shape)`; atoms outside are ignored.
    fn to_grid(&self, lo: &[i64], shape: &[usize]) -> Vec<Complex64> {
        let total: usize = shape.iter().product();
        let mut grid = vec![Complex64::new(0.0, 0.0); total];
        'atoms: for (x, m) in self.iter() {
            let mut flat = 0usize;
            for i in 0..self.n {
                let d = x[i] - lo[i];
                if d < 0 || d as usize >= shape[i] {
                    continue 'atoms;
                }
                flat = flat * shape[i] + d as usize;
            }
            grid[flat].re += m;
        }
        grid
    }
}

fn phase(zeta: &[f64], x: &[i64]) -> f64 {
    // Reduce each product separately so large coordinates keep their precision.
    zeta.iter()
        .zip(x)
        .map(|(z, &v)| torus_reduce(z * v as f64))
        .sum()
}

pub fn fourier_at(mu: &SparseMeasure, zeta: &[f64]) -> Complex64 {
    mu.fourier_at(zeta)
}

/// Frequency of grid index `j` on the `N^n` grid, reduced to `[-1/2, 1/2)^n`.
pub fn grid_point(idx: &[usize], side: usize) -> Vec<f64> {
    idx.iter()
        .map(|&j| torus_reduce(j as f64 / side as f64))
        .collect()
}

/// `mu_hat(j / N)` for every grid index `j`, exactly, by one FFT of the
/// measure wrapped modulo `N`.
pub fn transform_grid(mu: &SparseMeasure, side: usize) -> Vec<Complex64> {
    let n = mu.dim();
    let shape = vec![side; n];
    let mut grid = vec![Complex64::new(0.0, 0.0); side.pow(n as u32)];
    for (x, m) in mu.iter() {
        let mut flat = 0usize;
        for &v in x {
            flat = flat * side + v.rem_euclid(side as i64) as usize;
        }
        grid[flat].re += m;
    }
    fft_nd(&mut grid, &shape, false);
    grid
}

#[derive(Clone, Copy, Debug)]
pub struct ParsevalCheck {
    pub direct: f64,
    pub quadrature: f64,
    pub rel_err: f64,
}

/// `sum f g` against the grid average of `f_hat conj(g_hat)`.
pub fn parseval_check(f: &SparseMeasure, g: &SparseMeasure, grid_exponent: u32) -> Result<ParsevalCheck> {
    let n = f.dim();
    if g.dim() != n {
        return Err(Error::domain("dimension mismatch"));
    }
    let side = 1usize << grid_exponent;
    let (bf, bg) = match (f.bounding_box(), g.bounding_box()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::domain("empty measure")),
    };
    for i in 0..n {
        let span = bf.hi[i].max(bg.hi[i]) - bf.lo[i].min(bg.lo[i]);
        if span as usize >= side {
            return Err(Error::domain(format!(
                "grid side {side} does not exceed support span {span}"
            )));
        }
    }
    let direct = comp_sum(f.iter().map(|(x, m)| m * g.get(x)));
    let fh = transform_grid(f, side);
    let gh = transform_grid(g, side);
    let total = fh.len() as f64;
    let quadrature = comp_sum(fh.iter().zip(&gh).map(|(a, b)| (a * b.conj()).re)) / total;
    Ok(ParsevalCheck {
        direct,
        quadrature,
        rel_err: (direct - quadrature).abs() / direct.abs().max(1e-300),
    })
}

/// Exact pairwise convolution; with `truncation`, atoms outside are dropped
/// and their mass is added to the deficit.
pub fn convolve(mu1: &SparseMeasure, mu2: &SparseMeasure, truncation: Option<&IntBox>) -> SparseMeasure {
    let n = mu1.dim();
    assert_eq!(n, mu2.dim(), "dimension mismatch");
    let inherited = 1.0 - (1.0 - mu1.deficit) * (1.0 - mu2.deficit);
    let (b1, b2) = match (mu1.bounding_box(), mu2.bounding_box()) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return SparseMeasure {
                n,
                coords: vec![],
                mass: vec![],
                deficit: inherited,
            }
        }
    };
    let lo: Vec<i64> = (0..n).map(|i| b1.lo[i] + b2.lo[i]).collect();
    let shape: Vec<usize> = (0..n).map(|i| b1.side(i) + b2.side(i) - 1).collect();
    let dense: usize = shape.iter().product();
    let out = if dense <= 1 << 25 {
        let mut grid = vec![0.0f64; dense];
        for (x, m) in mu1.iter() {
            for (y, w) in mu2.iter() {
                let mut flat = 0usize;
                for i in 0..n {
                    flat = flat * shape[i] + (x[i] + y[i] - lo[i]) as usize;
                }
                grid[flat] += m * w;
            }
        }
        SparseMeasure::from_grid(&lo, &shape, &grid)
    } else {
        let mut acc: HashMap<Vec<i64>, f64> = HashMap::new();
        for (x, m) in mu1.iter() {
            for (y, w) in mu2.iter() {
                let z: Vec<i64> = x.iter().zip(y).map(|(a, b)| a + b).collect();
                *acc.entry(z).or_default() += m * w;
            }
        }
        SparseMeasure::from_atoms(n, acc).expect("convolution of valid measures")
    };
    match truncation {
        None => out.with_deficit(inherited),
        Some(b) => truncate_to_box(&out, b, inherited),
    }
}

fn truncate_to_box(mu: &SparseMeasure, b: &IntBox, inherited: f64) -> SparseMeasure {
    let dropped = comp_sum(mu.iter().filter(|(x, _)| !b.contains(x)).map(|(_, m)| m));
    let kept = SparseMeasure::from_atoms(
        mu.dim(),
        mu.iter()
            .filter(|(x, _)| b.contains(x))
            .map(|(x, m)| (x.to_vec(), m)),
    )
    .expect("restriction of a valid measure");
    kept.with_deficit(inherited + dropped)
}

/// Relative level below which inverse-FFT output is treated as numerical dust.
const FFT_DUST: f64 = 1e-13;

/// Convolution of several measures through one padded FFT grid.
///
/// The grid covers the full support of the result, so nothing wraps around.
/// Values below `FFT_DUST` times the peak are zeroed, the result is rescaled
/// to the exact product of input masses, and atoms outside `truncation` are
/// dropped into the deficit. Errors if that deficit exceeds `budget`.
pub fn convolve_many_fft(mus: &[&SparseMeasure], truncation: Option<&IntBox>, budget: f64) -> Result<SparseMeasure> {
    let first = mus.first().ok_or_else(|| Error::domain("nothing to convolve"))?;
    let n = first.dim();
    let mut lo = vec![0i64; n];
    let mut span = vec![0usize; n];
    let mut expected = 1.0;
    let mut kept_fraction = 1.0;
    for mu in mus {
        if mu.dim() != n {
            return Err(Error::domain("dimension mismatch"));
        }
        let b = mu
            .bounding_box()
            .ok_or_else(|| Error::domain("empty measure in convolution"))?;
        for i in 0..n {
            lo[i] += b.lo[i];
            span[i] += b.side(i) - 1;
        }
        expected *= mu.total_mass();
        kept_fraction *= 1.0 - mu.deficit;
    }
    let shape: Vec<usize> = span.iter().map(|s| next_pow2(s + 1)).collect();
    let total: usize = shape.iter().product();
    if total > 1 << 26 {
        return Err(Error::budget(format!("FFT grid of {total} cells")));
    }
    let mut acc: Option<Vec<Complex64>> = None;
    for mu in mus {
        let b = mu.bounding_box().expect("checked above");
        let mut g = mu.to_grid(&b.lo, &shape);
        fft_nd(&mut g, &shape, false);
        acc = Some(match acc {
            None => g,
            Some(mut a) => {
                for (x, y) in a.iter_mut().zip(&g) {
                    *x *= y;
                }
                a
            }
        });
    }
    finish_fft(acc.expect("nonempty"), &lo, &shape, expected, kept_fraction, truncation, budget)
}

/// `mu^{*M}` via a single forward transform raised to the `M`-th power.
pub fn convolve_power_fft(mu: &SparseMeasure, m: usize, truncation: Option<&IntBox>, budget: f64) -> Result<SparseMeasure> {
    if m == 0 {
        return Ok(SparseMeasure::point_mass(vec![0; mu.dim()]));
    }
    let n = mu.dim();
    let b = mu
        .bounding_box()
        .ok_or_else(|| Error::domain("empty measure in convolution"))?;
    let lo: Vec<i64> = b.lo.iter().map(|v| v * m as i64).collect();
    let shape: Vec<usize> = (0..n).map(|i| next_pow2((b.side(i) - 1) * m + 1)).collect();
    let total: usize = shape.iter().product();
    if total > 1 << 26 {
        return Err(Error::budget(format!("FFT grid of {total} cells")));
    }
    let mut g = mu.to_grid(&b.lo, &shape);
    fft_nd(&mut g, &shape, false);
    for v in g.iter_mut() {
        *v = v.powu(m as u32);
    }
    let expected = mu.total_mass().powi(m as i32);
    let kept = (1.0 - mu.deficit).powi(m as i32);
    finish_fft(g, &lo, &shape, expected, kept, truncation, budget)
}

fn finish_fft(
    mut g: Vec<Complex64>,
    lo: &[i64],
    shape: &[usize],
    expected: f64,
    kept_fraction: f64,
    truncation: Option<&IntBox>,
    budget: f64,
) -> Result<SparseMeasure> {
    fft_nd(&mut g, shape, true);
    let scale = 1.0 / g.len() as f64;
    let mut vals: Vec<f64> = g.iter().map(|c| c.re * scale).collect();
    let peak = vals.iter().copied().fold(0.0, f64::max);
    for v in vals.iter_mut() {
        if *v < FFT_DUST * peak {
            *v = 0.0;
        }
    }
    let raw = comp_sum(vals.iter().copied());
    let fix = expected / raw;
    for v in vals.iter_mut() {
        *v *= fix;
    }
    let out = SparseMeasure::from_grid(lo, shape, &vals);
    let inherited = 1.0 - kept_fraction;
    let out = match truncation {
        None => out.with_deficit(inherited),
        Some(b) => truncate_to_box(&out, b, inherited),
    };
    if out.deficit > budget {
        return Err(Error::bound("convolution deficit", out.deficit, budget));
    }
    Ok(out)
}

/// `mu <= alpha^{-1} gamma_R` pointwise, with `S = log2(2/alpha)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DensePieceCertificate {
    pub alpha: f64,
    pub s: f64,
    pub reference_radius: f64,
}

impl DensePieceCertificate {
    pub fn from_alpha(alpha: f64, r: f64) -> Self {
        DensePieceCertificate {
            alpha,
            s: (2.0 / alpha).log2(),
            reference_radius: r,
        }
    }

    /// Recheck the defining inequality atom by atom.
    pub fn holds_for(&self, mu: &SparseMeasure) -> bool {
        let g = match DiscreteGaussian::new(mu.dim(), self.reference_radius) {
            Ok(g) => g,
            Err(_) => return false,
        };
        mu.iter()
            .all(|(x, m)| m * self.alpha <= g.pmf(x) * (1.0 + 1e-12))
    }
}

pub fn density_certificate(mu: &SparseMeasure, r: f64) -> Result<DensePieceCertificate> {
    let g = DiscreteGaussian::new(mu.dim(), r)?;
    if mu.is_empty() {
        return Err(Error::domain("empty measure has no density"));
    }
    let worst = mu
        .iter()
        .map(|(x, m)| m / g.pmf(x))
        .fold(0.0f64, f64::max);
    Ok(DensePieceCertificate::from_alpha(1.0 / worst, r))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanHit {
    pub grid_index: Vec<usize>,
    pub grid_magnitude: f64,
    /// Refined location when refinement ran, otherwise the grid frequency.
    pub point: Vec<f64>,
    pub magnitude: f64,
}

#[derive(Clone, Debug)]
pub struct SpectrumScan {
    pub threshold: f64,
    pub grid_exponent: u32,
    pub lipschitz: f64,
    /// `lipschitz * step * sqrt(n) / 2`: heavy frequencies above `threshold + margin`
    /// cannot hide between grid points.
    pub margin: f64,
    /// Set when the margin leaves no certified magnitude range.
    pub vacuous: bool,
    pub refined: bool,
    pub hits: Vec<ScanHit>,
}

impl SpectrumScan {
    /// Hit locations with near-duplicates (within `tol`) collapsed, first occurrence kept.
    pub fn distinct_points(&self, tol: f64) -> Vec<(Vec<f64>, f64)> {
        let mut out: Vec<(Vec<f64>, f64)> = Vec::new();
        for h in &self.hits {
            if out.iter().all(|(p, _)| torus_dist(p, &h.point) > tol) {
                out.push((h.point.clone(), h.magnitude));
            }
        }
        out
    }
}

/// Largest slack below the threshold used to seed refinement.
const SEED_SLACK: f64 = 0.05;

/// Threshold scan of a grid of magnitudes with optional coordinate-ascent refinement.
///
/// `grid` holds `|f(j/N)|` in row-major order over `N = 2^grid_exponent` per axis;
/// `eval` evaluates `|f|` anywhere on the torus.
pub fn scan_magnitudes(
    n: usize,
    grid_exponent: u32,
    threshold: f64,
    grid: &[f64],
    lipschitz: f64,
    eval: Option<&dyn Fn(&[f64]) -> f64>,
) -> SpectrumScan {
    let side = 1usize << grid_exponent;
    let step = 1.0 / side as f64;
    let margin = lipschitz * step * (n as f64).sqrt() / 2.0;
    let seed_level = match eval {
        Some(_) => threshold - margin.min(SEED_SLACK),
        None => threshold,
    };
    let mut hits = Vec::new();
    for (flat, &g) in grid.iter().enumerate() {
        if g < seed_level {
            continue;
        }
        let idx = unflatten(flat, &vec![side; n]);
        let start = grid_point(&idx, side);
        let (point, magnitude) = match eval {
            Some(f) => coordinate_ascent(f, start, step),
            None => (start, g),
        };
        if g >= threshold || magnitude >= threshold {
            hits.push(ScanHit {
                grid_index: idx,
                grid_magnitude: g,
                point,
                magnitude,
            });
        }
    }
    SpectrumScan {
        threshold,
        grid_exponent,
        lipschitz,
        margin,
        vacuous: margin >= threshold,
        refined: eval.is_some(),
        hits,
    }
}

fn coordinate_ascent(f: &dyn Fn(&[f64]) -> f64, start: Vec<f64>, step: f64) -> (Vec<f64>, f64) {
    let mut p = start;
    let mut v = f(&p);
    let mut h = step / 2.0;
    let mut iters = 0;
    while h > 1e-11 && iters < 2000 {
        iters += 1;
        let mut improved = false;
        for i in 0..p.len() {
            for s in [1.0, -1.0] {
                let mut q = p.clone();
                q[i] += s * h;
                let fq = f(&q);
                if fq > v {
                    p = q;
                    v = fq;
                    improved = true;
                }
            }
        }
        if !improved {
            h /= 2.0;
        }
    }
    (torus_reduce_vec(&p), v)
}

/// Grid points (and, with `refine`, their polished locations) where `|mu_hat| >= 1 - 1/K`.
pub fn large_spectrum_scan(mu: &SparseMeasure, k: f64, grid_exponent: u32, refine: bool) -> Result<SpectrumScan> {
    if !(k >= 2.0) {
        return Err(Error::domain("large spectrum threshold needs K >= 2"));
    }
    let n = mu.dim();
    let side = 1usize << grid_exponent;
    if (side as f64).powi(n as i32) > (1u64 << 24) as f64 {
        return Err(Error::budget("scan grid exceeds 2^24 points"));
    }
    let grid: Vec<f64> = transform_grid(mu, side).iter().map(|c| c.norm()).collect();
    let lipschitz = 2.0 * PI * mu.mean_norm();
    let eval = |z: &[f64]| mu.fourier_at(z).norm();
    Ok(scan_magnitudes(
        n,
        grid_exponent,
        1.0 - 1.0 / k,
        &grid,
        lipschitz,
        if refine { Some(&eval) } else { None },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseCertificate {
    pub frequency: Vec<f64>,
    pub theta: f64,
    pub magnitude: f64,
    pub cos_expectation: f64,
    /// `E ||<zeta,x> - theta||^2_{R/Z}`.
    pub second_moment: f64,
    pub k: f64,
}

impl PhaseCertificate {
    pub fn is_heavy(&self) -> bool {
        self.magnitude >= 1.0 - 1.0 / self.k
    }

    /// Second-moment clause, required only for heavy frequencies.
    pub fn second_moment_ok(&self) -> bool {
        !self.is_heavy() || self.second_moment <= 1.0 / (8.0 * self.k) + 1e-12
    }
}

/// Phase `theta` with `E cos(2 pi (<zeta,x> - theta)) = |mu_hat(zeta)|`.
pub fn phase_of(mu: &SparseMeasure, zeta: &[f64], k: f64) -> PhaseCertificate {
    let f = mu.fourier_at(zeta);
    let theta = if f.norm() == 0.0 {
        0.0
    } else {
        torus_reduce(-f.arg() / (2.0 * PI))
    };
    let cos_expectation = comp_sum(
        mu.iter()
            .map(|(x, m)| m * (2.0 * PI * (phase(zeta, x) - theta)).cos()),
    );
    let second_moment = comp_sum(
        mu.iter()
            .map(|(x, m)| m * torus_reduce(phase(zeta, x) - theta).powi(2)),
    );
    PhaseCertificate {
        frequency: torus_reduce_vec(zeta),
        theta,
        magnitude: f.norm(),
        cos_expectation,
        second_moment,
        k,
    }
}

/// `(1/M) sum_i mu_i * reflect(mu_i)`.
pub fn symmetrize(mus: &[SparseMeasure]) -> Result<SparseMeasure> {
    if mus.is_empty() {
        return Err(Error::domain("symmetrize needs at least one measure"));
    }
    let n = mus[0].dim();
    let w = 1.0 / mus.len() as f64;
    let mut atoms: Vec<(Vec<i64>, f64)> = Vec::new();
    for mu in mus {
        let b = mu.bounding_box().ok_or_else(|| Error::domain("empty measure"))?;
        let conv = if b.len() > 2000 {
            convolve_many_fft(&[mu, &mu.reflect()], None, 1.0)?
        } else {
            convolve(mu, &mu.reflect(), None)
        };
        atoms.extend(conv.iter().map(|(x, m)| (x.to_vec(), m * w)));
    }
    SparseMeasure::from_atoms(n, atoms)
}

/// Canonical representative of the coset `x + Z v`.
pub fn line_representative(x: &[i64], v: &[i64]) -> (Vec<i64>, i64) {
    let i0 = v.iter().position(|&c| c != 0).expect("nonzero direction");
    let l = x[i0].div_euclid(v[i0]);
    let rep: Vec<i64> = x.iter().zip(v).map(|(a, b)| a - l * b).collect();
    (rep, l)
}

/// `sum_l nu(x + l v) e(-l t)`.
pub fn line_restriction_fourier(nu: &SparseMeasure, x: &[i64], v: &[i64], t: f64) -> Result<Complex64> {
    if v.iter().all(|&c| c == 0) {
        return Err(Error::domain("direction must be nonzero"));
    }
    let (rep, l0) = line_representative(x, v);
    let mut re = Compensated::new();
    let mut im = Compensated::new();
    for (y, m) in nu.iter() {
        let (r, l) = line_representative(y, v);
        if r == rep {
            let ph = 2.0 * PI * torus_reduce((l - l0) as f64 * t);
            re.add(m * ph.cos());
            im.add(-m * ph.sin());
        }
    }
    Ok(Complex64::new(re.value(), im.value()))
}

/// Line restrictions of `nu` along `v`, grouped by coset, evaluated at `t`.
pub fn line_transforms(nu: &SparseMeasure, v: &[i64], t: f64) -> Vec<(Vec<i64>, f64, Complex64)> {
    let mut groups: std::collections::BTreeMap<Vec<i64>, Vec<(i64, f64)>> = Default::default();
    for (y, m) in nu.iter() {
        let (r, l) = line_representative(y, v);
        groups.entry(r).or_default().push((l, m));
    }
    groups
        .into_iter()
        .map(|(rep, pts)| {
            let p = comp_sum(pts.iter().map(|(_, m)| *m));
            let mut re = Compensated::new();
            let mut im = Compensated::new();
            for (l, m) in pts {
                let ph = 2.0 * PI * torus_reduce(l as f64 * t);
                re.add(m * ph.cos());
                im.add(-m * ph.sin());
            }
            (rep, p, Complex64::new(re.value(), im.value()))
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct LineParseval {
    pub line_sum: f64,
    pub quadrature: f64,
    pub rel_err: f64,
    pub nodes: usize,
}

/// `sum_x |nu_hat_{x,v}(t)|^2` against the Haar average of `|nu_hat(omega + zeta_t)|^2`
/// over `W_v = {omega : <omega, v> = 0}`, the latter computed on the finite
/// subgroup `{k/N : <k, v> = 0 mod N}` with `N` large enough to avoid aliasing.
pub fn line_parseval_check(nu: &SparseMeasure, v: &[i64], t: f64) -> Result<LineParseval> {
    let n = nu.dim();
    if v.len() != n || v.iter().all(|&c| c == 0) {
        return Err(Error::domain("direction must be a nonzero vector of matching dimension"));
    }
    let line_sum = comp_sum(line_transforms(nu, v, t).iter().map(|(_, _, f)| f.norm_sqr()));
    let b = nu.bounding_box().ok_or_else(|| Error::domain("empty measure"))?;
    let diam = (0..n)
        .map(|i| ((b.hi[i] - b.lo[i]) as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    let side = next_pow2((norm2_i(v) * diam).floor() as usize + 1);
    if (side as f64).powi(n as i32) > 4e6 {
        return Err(Error::budget("subtorus quadrature grid too large"));
    }
    let (g, w) = bezout_vector(v);
    let zeta_t: Vec<f64> = w.iter().map(|&c| c as f64 * t / g as f64).collect();
    let mut acc = Compensated::new();
    let mut nodes = 0usize;
    let grid = IntBox {
        lo: vec![0; n],
        hi: vec![side as i64 - 1; n],
    };
    for k in grid.points() {
        let dot: i64 = k.iter().zip(v).map(|(a, b)| a * b).sum();
        if dot.rem_euclid(side as i64) != 0 {
            continue;
        }
        let omega: Vec<f64> = k
            .iter()
            .zip(&zeta_t)
            .map(|(&a, z)| a as f64 / side as f64 + z)
            .collect();
        acc.add(nu.fourier_at(&omega).norm_sqr());
        nodes += 1;
    }
    let quadrature = acc.value() / nodes as f64;
    Ok(LineParseval {
        line_sum,
        quadrature,
        rel_err: (line_sum - quadrature).abs() / quadrature.abs().max(1e-300),
        nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgauss::TruncationPolicy;
    use proptest::prelude::*;

    fn gauss_tr(n: usize, r: f64) -> SparseMeasure {
        DiscreteGaussian::new(n, r)
            .unwrap()
            .truncated(&TruncationPolicy::default())
            .unwrap()
    }

    fn even_gauss(n: usize, r: f64) -> SparseMeasure {
        gauss_tr(n, r)
            .restrict(|x| x.iter().sum::<i64>().rem_euclid(2) == 0)
            .unwrap()
            .0
    }

    #[test]
    fn fourier_examples() {
        let d = SparseMeasure::point_mass(vec![0, 0]);
        assert_eq!(d.fourier_at(&[0.3, -0.1]), Complex64::new(1.0, 0.0));
        let u = SparseMeasure::uniform(1, vec![vec![0], vec![1]]).unwrap();
        assert!(u.fourier_at(&[0.5]).norm() < 1e-15);
        let g = gauss_tr(1, 4.0);
        let bound = crate::dgauss::fourier_decay_bound(4.0, 0.125);
        assert!(g.fourier_at(&[0.125]).norm() <= bound + 2e-12);
    }

    #[test]
    fn parseval_examples() {
        let d = SparseMeasure::point_mass(vec![0]);
        let c = parseval_check(&d, &d, 2).unwrap();
        assert!((c.direct - 1.0).abs() < 1e-15 && (c.quadrature - 1.0).abs() < 1e-15);
        let u = SparseMeasure::uniform(2, vec![vec![0, 0], vec![1, 1]]).unwrap();
        let c = parseval_check(&u, &u, 2).unwrap();
        assert!((c.direct - 0.5).abs() < 1e-15 && (c.quadrature - 0.5).abs() < 1e-14);
        let g = gauss_tr(1, 4.0);
        assert!(parseval_check(&g, &g, 6).unwrap().rel_err <= 1e-10);
        assert!(parseval_check(&g, &g, 3).is_err());
    }

    #[test]
    fn convolution_examples() {
        let u = SparseMeasure::uniform(1, vec![vec![0], vec![1]]).unwrap();
        let c = convolve(&u, &u, None);
        assert_eq!(c.masses(), &[0.25, 0.5, 0.25]);
        let g = gauss_tr(2, 3.0);
        let id = convolve(&g, &SparseMeasure::point_mass(vec![0, 0]), None);
        assert_eq!(id, g);
        let p = SparseMeasure::point_mass(vec![1]);
        let five = convolve_power_fft(&p, 5, None, 1e-9).unwrap();
        assert_eq!(five.len(), 1);
        assert_eq!(five.atom(0).0, &[5]);
        assert!((five.atom(0).1 - 1.0).abs() < 1e-12);
        let once = convolve_power_fft(&g, 1, None, 1e-9).unwrap();
        for (x, m) in g.iter() {
            assert!((once.get(x) - m).abs() < 1e-12);
        }
        let twice = convolve_power_fft(&g, 2, None, 1e-9).unwrap();
        let exact = convolve(&g, &g, None);
        for (x, m) in exact.iter() {
            assert!((twice.get(x) - m).abs() < 1e-10);
        }
    }

    #[test]
    fn truncated_convolution_records_deficit() {
        let u = SparseMeasure::uniform(1, vec![vec![0], vec![1]]).unwrap();
        let b = IntBox::new(vec![0], vec![1]).unwrap();
        let c = convolve(&u, &u, Some(&b));
        assert!((c.deficit() - 0.25).abs() < 1e-15);
        let err = convolve_power_fft(&u, 2, Some(&b), 0.1);
        assert!(matches!(err, Err(Error::BoundViolation { .. })));
    }

    #[test]
    fn fourier_multiplicative() {
        let a = gauss_tr(2, 2.0);
        let b = even_gauss(2, 3.0);
        let c = convolve(&a, &b, None);
        for i in 0..100 {
            let z = [(i as f64 * 0.137).fract() - 0.5, (i as f64 * 0.291).fract() - 0.5];
            let lhs = c.fourier_at(&z);
            let rhs = a.fourier_at(&z) * b.fourier_at(&z);
            assert!((lhs - rhs).norm() <= 1e-10);
        }
    }

    #[test]
    fn density_examples() {
        let g = gauss_tr(2, 6.0);
        assert!(density_certificate(&g, 6.0).unwrap().alpha >= 1.0 - 1e-6);
        let e = even_gauss(2, 6.0);
        let parity_mass = gauss_tr(2, 6.0)
            .iter()
            .filter(|(x, _)| (x[0] + x[1]).rem_euclid(2) == 0)
            .map(|(_, m)| m)
            .sum::<f64>();
        let cert = density_certificate(&e, 6.0).unwrap();
        assert!((cert.alpha - parity_mass).abs() < 1e-3);
        assert!(cert.holds_for(&e));
        let d = SparseMeasure::point_mass(vec![0, 0]);
        let c = density_certificate(&d, 6.0).unwrap();
        let g0 = DiscreteGaussian::new(2, 6.0).unwrap().pmf(&[0, 0]);
        assert!((c.alpha - g0).abs() < 1e-15);
    }

    #[test]
    fn scan_examples() {
        let d = SparseMeasure::point_mass(vec![0]);
        let s = large_spectrum_scan(&d, 8.0, 4, false).unwrap();
        assert_eq!(s.hits.len(), 16);
        let even: Vec<Vec<i64>> = (-10..=10).map(|k| vec![2 * k]).collect();
        let u = SparseMeasure::uniform(1, even).unwrap();
        assert!((u.fourier_at(&[0.5]).norm() - 1.0).abs() < 1e-12);
        let s = large_spectrum_scan(&u, 8.0, 8, false).unwrap();
        assert!(s
            .hits
            .iter()
            .all(|h| h.point[0].abs() < 0.05 || (h.point[0].abs() - 0.5).abs() < 0.05));
        assert!(s.hits.iter().any(|h| h.point[0] == -0.5));
        let g = gauss_tr(1, 8.0);
        let s = large_spectrum_scan(&g, 8.0, 10, true).unwrap();
        assert!(s.hits.iter().all(|h| h.point[0].abs() <= 2.0 / 8.0));
        assert!(large_spectrum_scan(&g, 1.5, 4, false).is_err());
        let coarse = large_spectrum_scan(&g, 8.0, 1, false).unwrap();
        assert!(coarse.vacuous);
    }

    #[test]
    fn phase_examples() {
        let g = gauss_tr(1, 3.0);
        let c = phase_of(&g, &[0.05], 4.0);
        assert!(c.theta.abs() < 1e-12);
        let p = SparseMeasure::point_mass(vec![3, -1]);
        let z = [0.1, 0.2];
        let c = phase_of(&p, &z, 4.0);
        assert!((c.cos_expectation - 1.0).abs() < 1e-12);
        assert!(torus_reduce(c.theta - (0.3 - 0.2)).abs() < 1e-12);
        let e = even_gauss(2, 4.0);
        let c = phase_of(&e, &[0.5, 0.5], 8.0);
        assert!(c.is_heavy() && c.second_moment_ok());
    }

    #[test]
    fn symmetrize_examples() {
        let g = gauss_tr(1, 3.0);
        let s = symmetrize(std::slice::from_ref(&g)).unwrap();
        let gg = convolve(&g, &g, None);
        for (x, m) in gg.iter() {
            assert!((s.get(x) - m).abs() < 1e-15);
        }
        let shifted = gauss_tr(2, 2.0).translate(&[1, 0]);
        let mus = vec![shifted, even_gauss(2, 3.0)];
        let s = symmetrize(&mus).unwrap();
        for i in 0..1000 {
            let z = [(i as f64 * 0.618).fract() - 0.5, (i as f64 * 0.414).fract() - 0.5];
            let f = s.fourier_at(&z);
            assert!(f.re >= -1e-10 && f.im.abs() <= 1e-10);
        }
    }

    #[test]
    fn am_gm_transfer() {
        let mus = vec![even_gauss(2, 4.0), even_gauss(2, 5.0), gauss_tr(2, 4.0)];
        let s = symmetrize(&mus).unwrap();
        let k = 16.0;
        let m = mus.len() as f64;
        for z in [[0.0, 0.0], [0.01, -0.02], [0.5, 0.5], [0.03, 0.0]] {
            let prod: f64 = mus.iter().map(|mu| mu.fourier_at(&z).norm()).product();
            if prod >= (-m / k).exp() {
                assert!(s.fourier_at(&z).re >= 1.0 - 4.0 / k);
            }
        }
    }

    #[test]
    fn line_examples() {
        let g = gauss_tr(2, 3.0);
        let v = [1, 1];
        let p: f64 = g
            .iter()
            .filter(|(y, _)| y[0] - y[1] == 2)
            .map(|(_, m)| m)
            .sum();
        let f0 = line_restriction_fourier(&g, &[2, 0], &v, 0.0).unwrap();
        assert!((f0.re - p).abs() < 1e-15 && f0.im.abs() < 1e-15);
        for i in 0..100 {
            let t = i as f64 / 100.0;
            let f = line_restriction_fourier(&g, &[2, 0], &v, t).unwrap();
            assert!(f.norm() <= p + 1e-15);
        }
        let small = DiscreteGaussian::new(2, 2.0).unwrap().ball_measure(4.0).normalized();
        let c = line_parseval_check(&small, &[1, 2], 0.3).unwrap();
        assert!(c.rel_err <= 1e-6, "{c:?}");
    }

    #[test]
    fn text_roundtrip() {
        let g = even_gauss(2, 2.0).with_deficit(1e-13);
        let back = SparseMeasure::from_text(&g.to_text()).unwrap();
        assert_eq!(back, g);
        assert!(matches!(
            SparseMeasure::from_text("n=2\n1 2\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn transform_at_zero_is_mass(pts in proptest::collection::vec((proptest::collection::vec(-20i64..20, 2), 0.01f64..1.0), 1..30)) {
            let mu = SparseMeasure::from_atoms(2, pts).unwrap();
            prop_assert!((mu.fourier_at(&[0.0, 0.0]).re - mu.total_mass()).abs() <= 1e-12);
        }

        #[test]
        fn symmetric_measure_real_transform(pts in proptest::collection::vec((proptest::collection::vec(-9i64..9, 2), 0.01f64..1.0), 1..20), z0 in -0.5f64..0.5, z1 in -0.5f64..0.5) {
            let mu = SparseMeasure::from_atoms(2, pts).unwrap();
            let sym = SparseMeasure::from_atoms(2, mu.iter().map(|(x, m)| (x.to_vec(), m)).chain(mu.reflect().iter().map(|(x, m)| (x.to_vec(), m)))).unwrap().normalized();
            prop_assert!(sym.fourier_at(&[z0, z1]).im.abs() <= 1e-10);
        }

        #[test]
        fn convolution_commutative_associative(
            a in proptest::collection::vec((proptest::collection::vec(-5i64..5, 2), 0.01f64..1.0), 1..8),
            b in proptest::collection::vec((proptest::collection::vec(-5i64..5, 2), 0.01f64..1.0), 1..8),
            c in proptest::collection::vec((proptest::collection::vec(-5i64..5, 2), 0.01f64..1.0), 1..8),
        ) {
            let a = SparseMeasure::from_atoms(2, a).unwrap().normalized();
            let b = SparseMeasure::from_atoms(2, b).unwrap().normalized();
            let c = SparseMeasure::from_atoms(2, c).unwrap().normalized();
            let ab = convolve(&a, &b, None);
            let ba = convolve(&b, &a, None);
            for (x, m) in ab.iter() {
                prop_assert!((ba.get(x) - m).abs() <= 1e-12);
            }
            let l = convolve(&ab, &c, None);
            let r = convolve(&a, &convolve(&b, &c, None), None);
            for (x, m) in l.iter() {
                prop_assert!((r.get(x) - m).abs() <= 1e-12);
            }
        }

        #[test]
        fn density_alpha_at_most_one(r in 2.0f64..8.0, keep in 1usize..4) {
            let g = gauss_tr(2, r);
            let sub = g.restrict(|x| (x[0] + 2 * x[1]).rem_euclid(keep as i64 + 1) == 0).unwrap().0;
            prop_assert!(density_certificate(&sub, r).unwrap().alpha <= 1.0 + 1e-9);
            prop_assert!(density_certificate(&g, r).unwrap().alpha <= 1.0 + 1e-9);
        }

        #[test]
        fn refine_is_superset(r in 2.0f64..6.0, k in 2.0f64..20.0) {
            let mu = even_gauss(1, r);
            let plain = large_spectrum_scan(&mu, k, 6, false).unwrap();
            let fine = large_spectrum_scan(&mu, k, 6, true).unwrap();
            for h in &plain.hits {
                prop_assert!(fine.hits.iter().any(|f| f.grid_index == h.grid_index));
            }
        }

        #[test]
        fn phase_characterization(r in 2.0f64..6.0, z in -0.5f64..0.5, k in 2.0f64..40.0) {
            let mu = even_gauss(1, r).translate(&[3]);
            let c = phase_of(&mu, &[z], k);
            prop_assert!((c.cos_expectation - c.magnitude).abs() <= 1e-10);
            prop_assert!(c.second_moment_ok());
        }

        #[test]
        fn line_parseval_random(r in 1.5f64..3.0, v0 in -2i64..3, v1 in 1i64..3, t in 0.0f64..1.0) {
            let nu = DiscreteGaussian::new(2, r.max(1.0)).unwrap().ball_measure(5.0).normalized();
            let c = line_parseval_check(&nu, &[v0, v1], t).unwrap();
            prop_assert!(c.rel_err <= 1e-6);
        }
    }
}
