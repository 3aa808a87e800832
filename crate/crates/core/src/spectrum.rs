//! Structure of large spectra: dissociated sets, the chain and lattice extractor,
//! the near-origin subspace extractor and the small-ball inequality.

use crate::dgauss::{DiscreteGaussian, GaussianSampler, TruncationPolicy};
use crate::measure::{
    density_certificate, large_spectrum_scan, scan_magnitudes, symmetrize, transform_grid,
    SparseMeasure, SpectrumScan,
};
use crate::numeric::{comp_sum, norm2, torus_dist, torus_norm, torus_reduce, torus_reduce_vec};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::fmt::Write as _;

pub type Rat = Ratio<i64>;

/// Largest set handled by the `3^m` sign enumeration.
pub const DISSOCIATION_CAP: usize = 20;

/// Default limit on `prod k_j` for span enumeration.
pub const FIBER_BUDGET: u64 = 1_000_000;

fn check_cap(m: usize) -> Result<()> {
    if m > DISSOCIATION_CAP {
        return Err(Error::budget(format!(
            "signed enumeration over {m} elements exceeds cap {DISSOCIATION_CAP}"
        )));
    }
    Ok(())
}

/// Visit every `eps in {-1,0,1}^m` with the partial sum `sum_i eps_i set_i`.
/// Digits run `0, +1, -1`, first element outermost.
fn for_each_signed(set: &[Vec<f64>], n: usize, f: &mut dyn FnMut(&[f64], &[i8])) {
    fn rec(
        set: &[Vec<f64>],
        i: usize,
        sum: &mut Vec<f64>,
        eps: &mut Vec<i8>,
        f: &mut dyn FnMut(&[f64], &[i8]),
    ) {
        if i == set.len() {
            f(sum, eps);
            return;
        }
        for e in [0i8, 1, -1] {
            eps[i] = e;
            if e != 0 {
                for (s, x) in sum.iter_mut().zip(&set[i]) {
                    *s += e as f64 * x;
                }
            }
            rec(set, i + 1, sum, eps, f);
            if e != 0 {
                for (s, x) in sum.iter_mut().zip(&set[i]) {
                    *s -= e as f64 * x;
                }
            }
        }
        eps[i] = 0;
    }
    let mut sum = vec![0.0; n];
    let mut eps = vec![0i8; set.len()];
    rec(set, 0, &mut sum, &mut eps, f);
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dissociation {
    pub dissociated: bool,
    /// First violating sign vector in enumeration order.
    pub witness: Option<Vec<i8>>,
    /// Smallest `||sum eps_i xi_i||` over nonzero `eps`.
    pub min_norm: f64,
}

pub fn is_kappa_dissociated(set: &[Vec<f64>], kappa: f64) -> Result<Dissociation> {
    check_cap(set.len())?;
    let n = set.first().map_or(1, |v| v.len());
    let mut witness: Option<Vec<i8>> = None;
    let mut min_norm = f64::INFINITY;
    for_each_signed(set, n, &mut |sum, eps| {
        if eps.iter().all(|&e| e == 0) {
            return;
        }
        let v = torus_norm(sum);
        min_norm = min_norm.min(v);
        if v < kappa && witness.is_none() {
            witness = Some(eps.to_vec());
        }
    });
    Ok(Dissociation {
        dissociated: witness.is_none(),
        witness,
        min_norm,
    })
}

/// Torus distance from `x` to the nearest signed combination of `set` (zero included).
pub fn signed_distance(x: &[f64], set: &[Vec<f64>]) -> Result<(f64, Vec<i8>)> {
    check_cap(set.len())?;
    let mut best = (f64::INFINITY, vec![0i8; set.len()]);
    for_each_signed(set, x.len(), &mut |sum, eps| {
        let d = torus_dist(x, sum);
        if d < best.0 {
            best = (d, eps.to_vec());
        }
    });
    Ok(best)
}

/// Indices of `freqs` kept by a single greedy pass that preserves dissociation.
///
/// If the kept set would outgrow the enumeration cap the error message lists the
/// partial result.
pub fn greedy_dissociated_subset(freqs: &[Vec<f64>], kappa: f64) -> Result<Vec<usize>> {
    let mut kept: Vec<usize> = Vec::new();
    let mut set: Vec<Vec<f64>> = Vec::new();
    for (i, f) in freqs.iter().enumerate() {
        if set.len() == DISSOCIATION_CAP {
            // Only an addition would overflow; test it before giving up.
            let (d, _) = signed_distance(f, &set)?;
            if d >= kappa {
                return Err(Error::budget(format!(
                    "dissociated subset reached cap {DISSOCIATION_CAP} at frequency {i}; partial result {kept:?}"
                )));
            }
            continue;
        }
        let (d, _) = signed_distance(f, &set)?;
        if d >= kappa {
            kept.push(i);
            set.push(torus_reduce_vec(f));
        }
    }
    Ok(kept)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RudinCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

/// `E_nu exp(sigma F)` against `exp(sigma^2 sum|c|^2 / 2) + eta exp(sigma sum|c|)`
/// for `F(x) = Re sum_xi c(xi) e(<xi,x>)`.
pub fn coarse_rudin_check(
    nu: &SparseMeasure,
    t: &[Vec<f64>],
    c: &[Complex64],
    sigma: f64,
    kappa: f64,
    eta: f64,
) -> Result<RudinCheck> {
    if t.len() != c.len() {
        return Err(Error::domain("one coefficient per frequency required"));
    }
    if !is_kappa_dissociated(t, kappa)?.dissociated {
        return Err(Error::precondition("frequency set is not kappa-dissociated"));
    }
    let lhs = comp_sum(nu.iter().map(|(x, m)| {
        let f: f64 = t
            .iter()
            .zip(c)
            .map(|(xi, ci)| {
                let ph = 2.0 * PI * torus_reduce(phase(xi, x));
                (ci * Complex64::new(ph.cos(), ph.sin())).re
            })
            .sum();
        m * (sigma * f).exp()
    }));
    let l2: f64 = c.iter().map(|z| z.norm_sqr()).sum();
    let l1: f64 = c.iter().map(|z| z.norm()).sum();
    let rhs = (sigma * sigma * l2 / 2.0).exp() + eta * (sigma * l1).exp();
    Ok(RudinCheck {
        lhs,
        rhs,
        pass: lhs <= rhs + 1e-9,
    })
}

fn phase(zeta: &[f64], x: &[i64]) -> f64 {
    zeta.iter()
        .zip(x)
        .map(|(z, &v)| torus_reduce(z * v as f64))
        .sum()
}

/// Certified upper bound on `sup |nu_hat|` over `||zeta|| >= kappa`: grid maximum
/// plus the Lipschitz margin.
pub fn off_origin_sup(nu: &SparseMeasure, kappa: f64, grid_exponent: u32) -> Result<f64> {
    let n = nu.dim();
    let side = 1usize << grid_exponent;
    if (side as f64).powi(n as i32) > (1u64 << 24) as f64 {
        return Err(Error::budget("scan grid exceeds 2^24 points"));
    }
    let step = 1.0 / side as f64;
    let margin = 2.0 * PI * nu.mean_norm() * step * (n as f64).sqrt() / 2.0;
    let reach = kappa - step * (n as f64).sqrt() / 2.0;
    let grid = transform_grid(nu, side);
    let mut best = 0.0f64;
    for (flat, v) in grid.iter().enumerate() {
        let idx = crate::fft::unflatten(flat, &vec![side; n]);
        let z = crate::measure::grid_point(&idx, side);
        if torus_norm(&z) >= reach {
            best = best.max(v.norm());
        }
    }
    Ok((best + margin).min(1.0))
}

/// Frequency found by a spectrum scan.
#[derive(Clone, Debug, PartialEq)]
pub struct HeavyFrequency {
    pub point: Vec<f64>,
    pub magnitude: f64,
    pub grid_index: Vec<usize>,
}

/// Scan hits ordered by magnitude (1e-9 buckets, descending) then grid index,
/// with refined duplicates collapsed onto the first.
pub fn ordered_heavy(scan: &SpectrumScan) -> Vec<HeavyFrequency> {
    let mut hits: Vec<HeavyFrequency> = scan
        .hits
        .iter()
        .map(|h| HeavyFrequency {
            point: torus_reduce_vec(&h.point),
            magnitude: h.magnitude,
            grid_index: h.grid_index.clone(),
        })
        .collect();
    hits.sort_by(|a, b| {
        let qa = (a.magnitude * 1e9).round() as i64;
        let qb = (b.magnitude * 1e9).round() as i64;
        qb.cmp(&qa).then_with(|| a.grid_index.cmp(&b.grid_index))
    });
    let mut out: Vec<HeavyFrequency> = Vec::new();
    for h in hits {
        if out.iter().all(|o| torus_dist(&o.point, &h.point) > 1e-7) {
            out.push(h);
        }
    }
    out
}

fn rat_reduce(x: Rat) -> Rat {
    x - (x + Rat::new(1, 2)).floor()
}

fn rat_to_f64(x: &Rat) -> f64 {
    x.numer().to_f64().unwrap_or(f64::NAN) / x.denom().to_f64().unwrap_or(f64::NAN)
}

/// Finite set of torus generators with exact congruence relations.
///
/// `k_j t_j = sum_{i<j} c_i t_i (mod Z^n)` with `0 <= c_i < k_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct SketchLattice {
    pub n: usize,
    pub generators: Vec<Vec<Rat>>,
    pub denominators: Vec<i64>,
    pub relations: Vec<Vec<i64>>,
    pub span_error: f64,
}

impl SketchLattice {
    pub fn empty(n: usize) -> Self {
        SketchLattice {
            n,
            generators: Vec::new(),
            denominators: Vec::new(),
            relations: Vec::new(),
            span_error: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.generators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.generators.is_empty()
    }

    pub fn generator(&self, j: usize) -> Vec<f64> {
        self.generators[j].iter().map(rat_to_f64).collect()
    }

    /// `prod k_j`, the number of admissible combinations.
    pub fn fiber_count(&self) -> u128 {
        self.denominators.iter().map(|&k| k as u128).product()
    }

    /// Exact residue `k_j t_j - sum c_i t_i mod Z^n`, as a float norm.
    pub fn relation_residual(&self, j: usize) -> f64 {
        let k = Rat::from_integer(self.denominators[j]);
        let res: Vec<f64> = (0..self.n)
            .map(|d| {
                let mut v = self.generators[j][d] * k;
                for (i, &c) in self.relations[j].iter().enumerate() {
                    v -= self.generators[i][d] * Rat::from_integer(c);
                }
                rat_to_f64(&rat_reduce(v))
            })
            .collect();
        norm2(&res)
    }

    pub fn max_relation_residual(&self) -> f64 {
        (0..self.len())
            .map(|j| self.relation_residual(j))
            .fold(0.0, f64::max)
    }

    pub fn combination_exact(&self, c: &[i64]) -> Vec<Rat> {
        (0..self.n)
            .map(|d| {
                let mut v = Rat::zero();
                for (j, &cj) in c.iter().enumerate() {
                    v += self.generators[j][d] * Rat::from_integer(cj);
                }
                rat_reduce(v)
            })
            .collect()
    }

    /// All admissible combinations, odometer order (last coefficient fastest),
    /// flattened as `count x n` floats.
    pub fn combinations(&self, budget: u64) -> Result<(Vec<Vec<i64>>, Vec<f64>)> {
        let count = self.fiber_count();
        if count > budget as u128 {
            return Err(Error::budget(format!(
                "{count} admissible combinations exceed budget {budget}"
            )));
        }
        let m = self.len();
        let gens: Vec<Vec<f64>> = (0..m).map(|j| self.generator(j)).collect();
        let mut coeffs = Vec::with_capacity(count as usize);
        let mut pts = Vec::with_capacity(count as usize * self.n);
        let mut c = vec![0i64; m];
        loop {
            for d in 0..self.n {
                let mut v = 0.0;
                for j in 0..m {
                    v += c[j] as f64 * gens[j][d];
                }
                pts.push(torus_reduce(v));
            }
            coeffs.push(c.clone());
            let mut i = m;
            loop {
                if i == 0 {
                    return Ok((coeffs, pts));
                }
                i -= 1;
                c[i] += 1;
                if c[i] < self.denominators[i] {
                    break;
                }
                c[i] = 0;
            }
        }
    }

    /// Text form: header, one `t` line per generator with exact rationals, the
    /// denominators, then one `c` row per relation.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "sketch-lattice n={} m={}", self.n, self.len());
        for g in &self.generators {
            let coords: Vec<String> = g.iter().map(|r| format!("{}/{}", r.numer(), r.denom())).collect();
            let _ = writeln!(s, "t {}", coords.join(" "));
        }
        let ks: Vec<String> = self.denominators.iter().map(|k| k.to_string()).collect();
        let _ = writeln!(s, "k {}", ks.join(" ")
            .trim_end());
        for r in &self.relations {
            let cs: Vec<String> = r.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(s, "c {}", cs.join(" "));
        }
        let _ = writeln!(s, "span_error {:e}", self.span_error);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let parse_err = |line: usize, msg: &str| Error::Parse {
            line: line + 1,
            msg: msg.to_string(),
        };
        let (l0, header) = lines.next().ok_or_else(|| parse_err(0, "empty input"))?;
        let mut n = None;
        let mut m = None;
        let mut words = header.split_whitespace();
        if words.next() != Some("sketch-lattice") {
            return Err(parse_err(l0, "expected sketch-lattice header"));
        }
        for w in words {
            if let Some(v) = w.strip_prefix("n=") {
                n = v.parse::<usize>().ok();
            } else if let Some(v) = w.strip_prefix("m=") {
                m = v.parse::<usize>().ok();
            }
        }
        let (n, m) = match (n, m) {
            (Some(n), Some(m)) if n > 0 => (n, m),
            _ => return Err(parse_err(l0, "header needs n= and m=")),
        };
        let mut out = SketchLattice::empty(n);
        for _ in 0..m {
            let (li, l) = lines.next().ok_or_else(|| parse_err(l0, "missing generator"))?;
            let mut w = l.split_whitespace();
            if w.next() != Some("t") {
                return Err(parse_err(li, "expected t line"));
            }
            let g: Vec<Rat> = w
                .map(parse_rat)
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| parse_err(li, "bad rational"))?;
            if g.len() != n {
                return Err(parse_err(li, "generator dimension mismatch"));
            }
            out.generators.push(g);
        }
        let (li, l) = lines.next().ok_or_else(|| parse_err(l0, "missing k line"))?;
        let mut w = l.split_whitespace();
        if w.next() != Some("k") {
            return Err(parse_err(li, "expected k line"));
        }
        out.denominators = w
            .map(|s| s.parse::<i64>().ok().filter(|&k| k >= 1))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| parse_err(li, "bad denominator"))?;
        if out.denominators.len() != m {
            return Err(parse_err(li, "denominator count mismatch"));
        }
        for j in 0..m {
            let (li, l) = lines.next().ok_or_else(|| parse_err(l0, "missing relation"))?;
            let mut w = l.split_whitespace();
            if w.next() != Some("c") {
                return Err(parse_err(li, "expected c line"));
            }
            let c: Vec<i64> = w
                .map(|s| s.parse::<i64>().ok())
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| parse_err(li, "bad coefficient"))?;
            if c.len() != j || c.iter().zip(&out.denominators).any(|(&c, &k)| c < 0 || c >= k) {
                return Err(parse_err(li, "relation row out of range"));
            }
            out.relations.push(c);
        }
        if let Some((li, l)) = lines.next() {
            let v = l
                .strip_prefix("span_error")
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| parse_err(li, "expected span_error"))?;
            out.span_error = v;
        }
        Ok(out)
    }
}

fn parse_rat(s: &str) -> Option<Rat> {
    match s.split_once('/') {
        Some((p, q)) => {
            let q: i64 = q.parse().ok()?;
            if q == 0 {
                return None;
            }
            Some(Rat::new(p.parse().ok()?, q))
        }
        None => Some(Rat::from_integer(s.parse().ok()?)),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpanCheck {
    pub worst: f64,
    pub bound: f64,
    pub distances: Vec<f64>,
    pub combinations: usize,
}

/// Distances from each heavy point to the admissible combination set.
pub fn span_distances(lattice: &SketchLattice, heavy: &[Vec<f64>], budget: u64) -> Result<Vec<f64>> {
    let (_, pts) = lattice.combinations(budget)?;
    let n = lattice.n;
    Ok(heavy
        .iter()
        .map(|h| {
            pts.chunks_exact(n)
                .map(|p| torus_dist(h, p))
                .fold(f64::INFINITY, f64::min)
        })
        .collect())
}

/// Worst distance from `heavy` to the lattice's combination set; errors above `bound`.
pub fn verify_span(lattice: &SketchLattice, heavy: &[Vec<f64>], bound: f64) -> Result<SpanCheck> {
    let distances = span_distances(lattice, heavy, FIBER_BUDGET)?;
    let worst = distances.iter().copied().fold(0.0, f64::max);
    if worst > bound {
        return Err(Error::bound("span", worst, bound));
    }
    Ok(SpanCheck {
        worst,
        bound,
        distances,
        combinations: lattice.fiber_count() as usize,
    })
}

/// `5 lambda_q^{14S} sqrt(S) / R`.
pub fn theorem_span_bound(q: i64, s: f64, r: f64) -> f64 {
    let lambda = (q - 1) as f64 / (q - 2) as f64;
    5.0 * lambda.powf(14.0 * s) * s.sqrt() / r
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExactConfig {
    /// Large-spectrum parameter `K` (threshold `1 - 1/K`).
    pub k: f64,
    /// Rounding denominator `Q` for chains that reach full length.
    pub big_q: i64,
    /// Chain base `q`.
    pub q: i64,
    pub kappa: f64,
    /// Ambient radius `R` of the reference Gaussian.
    pub radius: f64,
    pub grid_exponent: u32,
    /// Multiplier on the `14 S` chain budget.
    pub slack: f64,
    pub fiber_budget: u64,
    /// Downgrade a failed `Q >= R K sqrt(n)` check to a warning.
    pub allow_override: bool,
    /// Replaces the theorem span bound when set.
    pub span_bound: Option<f64>,
}

impl ExactConfig {
    pub fn new(k: f64, big_q: i64, q: i64, kappa: f64, radius: f64) -> Self {
        ExactConfig {
            k,
            big_q,
            q,
            kappa,
            radius,
            grid_exponent: 7,
            slack: 1.0,
            fiber_budget: FIBER_BUDGET,
            allow_override: false,
            span_bound: None,
        }
    }

    /// `max(1, floor(log_q(K) / 2))`.
    pub fn r_star(&self) -> usize {
        let mut r = 0usize;
        let mut p: f64 = 1.0;
        // Largest r with q^{2r} <= K, exact for integer inputs.
        while p * (self.q * self.q) as f64 <= self.k * (1.0 + 1e-12) {
            p *= (self.q * self.q) as f64;
            r += 1;
        }
        r.max(1)
    }

    pub fn lambda_q(&self) -> f64 {
        (self.q - 1) as f64 / (self.q - 2) as f64
    }

    fn validate(&self, n: usize, warnings: &mut Vec<String>) -> Result<()> {
        if self.q < 3 || (self.q as f64) > self.k {
            return Err(Error::precondition(format!(
                "chain base q = {} must satisfy 3 <= q <= K = {}",
                self.q, self.k
            )));
        }
        if !(self.kappa > 0.0) {
            return Err(Error::precondition("kappa must be positive"));
        }
        let need = self.radius * self.k * (n as f64).sqrt();
        if (self.big_q as f64) < need {
            let msg = format!("Q = {} below R K sqrt(n) = {need:.1}", self.big_q);
            if self.allow_override {
                warnings.push(msg);
            } else {
                return Err(Error::precondition(msg));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ExactExtraction {
    pub lattice: SketchLattice,
    /// Unrounded chain anchors `a_j`.
    pub anchors: Vec<Vec<f64>>,
    pub chain_lengths: Vec<usize>,
    /// True where the chain reached `r*` and was rounded to the `Q` grid.
    pub full_chain: Vec<bool>,
    /// `|mu_hat(q^l a_j)|` for every admitted chain element.
    pub chain_magnitudes: Vec<Vec<f64>>,
    pub heavy: Vec<HeavyFrequency>,
    pub s: f64,
    pub k: f64,
    pub q: i64,
    pub big_q: i64,
    pub r_star: usize,
    pub kappa: f64,
    /// Bound the span check was held to.
    pub span_bound: f64,
    pub theorem_span_bound: f64,
    /// `kappa lambda_q^m`, the bound the construction itself delivers.
    pub chain_span_bound: f64,
    /// `56 S (1 + log_K Q)`, the exponent of the product bound in base `q`.
    pub product_exponent: f64,
    pub scan_margin: f64,
    pub scan_vacuous: bool,
    pub warnings: Vec<String>,
}

impl ExactExtraction {
    pub fn product_within_bound(&self, slack: f64) -> bool {
        let log_prod: f64 = self
            .lattice
            .denominators
            .iter()
            .map(|&k| (k as f64).ln() / (self.q as f64).ln())
            .sum();
        log_prod <= self.product_exponent * slack + 1e-9
    }

    /// Every chain element has `|mu_hat(q^l a)| >= 1 - q^{2l}/K - tol`.
    pub fn chain_heaviness_ok(&self, tol: f64) -> bool {
        self.chain_magnitudes.iter().all(|mags| {
            mags.iter().enumerate().all(|(l, &m)| {
                m >= 1.0 - (self.q as f64).powi(2 * l as i32) / self.k - tol
            })
        })
    }
}

/// Greedy chain construction and recursive rounding on the heavy set of `mu`.
pub fn extract_exact_structure(mu: &SparseMeasure, cfg: &ExactConfig) -> Result<ExactExtraction> {
    let cert = density_certificate(mu, cfg.radius)?;
    let scan = large_spectrum_scan(mu, cfg.k, cfg.grid_exponent, true)?;
    let heavy = ordered_heavy(&scan);
    let eval = |z: &[f64]| mu.fourier_at(z).norm();
    extract_exact_from_heavy(mu.dim(), heavy, &eval, cert.s, cfg, &scan)
}

struct Chain {
    anchor: Vec<f64>,
    len: usize,
    full: bool,
    k: i64,
    /// Coefficients of the witness combination on earlier chains.
    d: Vec<i64>,
}

/// Chain extraction once the heavy set is known.
pub fn extract_exact_from_heavy(
    n: usize,
    heavy: Vec<HeavyFrequency>,
    eval: &dyn Fn(&[f64]) -> f64,
    s: f64,
    cfg: &ExactConfig,
    scan: &SpectrumScan,
) -> Result<ExactExtraction> {
    let mut warnings = Vec::new();
    cfg.validate(n, &mut warnings)?;
    if scan.vacuous {
        warnings.push(format!(
            "scan margin {:.3e} exceeds threshold; heavy set certified only at scanned points",
            scan.margin
        ));
    }
    let r_star = cfg.r_star();
    let q = cfg.q;
    let budget = 14.0 * s * cfg.slack;
    // Dissociated set with the (chain, power) of each element.
    let mut set: Vec<Vec<f64>> = Vec::new();
    let mut owner: Vec<(usize, usize)> = Vec::new();
    let mut chains: Vec<Chain> = Vec::new();
    let mut chain_magnitudes = Vec::new();
    loop {
        let mut pick = None;
        for h in &heavy {
            if signed_distance(&h.point, &set)?.0 >= cfg.kappa {
                pick = Some(h.point.clone());
                break;
            }
        }
        let Some(a) = pick else { break };
        let j = chains.len();
        let mut elems = vec![a.clone()];
        let mut power = a.clone();
        let mut next = scale_torus(&power, q);
        while elems.len() < r_star {
            let mut all = set.clone();
            all.extend(elems.iter().cloned());
            if signed_distance(&next, &all)?.0 >= cfg.kappa {
                power = next;
                elems.push(power.clone());
                next = scale_torus(&power, q);
            } else {
                break;
            }
        }
        let r = elems.len();
        let mut chain = Chain {
            anchor: a.clone(),
            len: r,
            full: r == r_star,
            k: cfg.big_q,
            d: vec![0; j],
        };
        if r < r_star {
            let mut all = set.clone();
            all.extend(elems.iter().cloned());
            check_cap(all.len())?;
            // Witness: smallest k, then smallest distance, then enumeration order.
            let mut best: Option<(i64, f64, Vec<i8>)> = None;
            for_each_signed(&all, n, &mut |sum, eps| {
                let dist = torus_dist(&next, sum);
                if dist >= cfg.kappa {
                    return;
                }
                let mut k = q.pow(r as u32);
                for (l, &e) in eps[set.len()..].iter().enumerate() {
                    k -= e as i64 * q.pow(l as u32);
                }
                let better = match &best {
                    None => true,
                    Some((bk, bd, _)) => k < *bk || (k == *bk && dist < *bd),
                };
                if better {
                    best = Some((k, dist, eps.to_vec()));
                }
            });
            let (k, _, eps) = best.ok_or_else(|| {
                Error::precondition("internal consistency: chain stopped without a dissociation witness")
            })?;
            if k < 1 || k > cfg.big_q {
                return Err(Error::precondition(format!(
                    "internal consistency: witness gives k = {k} outside [1, Q]"
                )));
            }
            chain.k = k;
            for (idx, &e) in eps[..set.len()].iter().enumerate() {
                let (ci, l) = owner[idx];
                chain.d[ci] += e as i64 * q.pow(l as u32);
            }
        }
        chain_magnitudes.push(elems.iter().map(|e| eval(e)).collect::<Vec<f64>>());
        for (l, e) in elems.into_iter().enumerate() {
            set.push(e);
            owner.push((j, l));
        }
        chains.push(chain);
        if set.len() as f64 > budget {
            return Err(Error::bound("chain budget", set.len() as f64, budget));
        }
        check_cap(set.len())?;
    }

    let lattice = round_chains(n, &chains, cfg.big_q)?;
    let m = lattice.len();
    let theorem = theorem_span_bound(q, s, cfg.radius);
    let bound = cfg.span_bound.unwrap_or(theorem);
    let points: Vec<Vec<f64>> = heavy.iter().map(|h| h.point.clone()).collect();
    let dists = span_distances(&lattice, &points, cfg.fiber_budget)?;
    let worst = dists.iter().copied().fold(0.0, f64::max);
    if worst > bound {
        return Err(Error::bound("span", worst, bound));
    }
    let mut lattice = lattice;
    lattice.span_error = worst;
    Ok(ExactExtraction {
        lattice,
        anchors: chains.iter().map(|c| c.anchor.clone()).collect(),
        chain_lengths: chains.iter().map(|c| c.len).collect(),
        full_chain: chains.iter().map(|c| c.full).collect(),
        chain_magnitudes,
        heavy,
        s,
        k: cfg.k,
        q,
        big_q: cfg.big_q,
        r_star,
        kappa: cfg.kappa,
        span_bound: bound,
        theorem_span_bound: theorem,
        chain_span_bound: cfg.kappa * cfg.lambda_q().powi(m as i32),
        product_exponent: 56.0 * s * (1.0 + (cfg.big_q as f64).ln() / cfg.k.ln()),
        scan_margin: scan.margin,
        scan_vacuous: scan.vacuous,
        warnings,
    })
}

fn scale_torus(x: &[f64], q: i64) -> Vec<f64> {
    x.iter().map(|v| torus_reduce(v * q as f64)).collect()
}

fn round_half_toward_zero(v: f64) -> i64 {
    let f = v.abs().fract();
    if (f - 0.5).abs() < 1e-12 {
        v.trunc() as i64
    } else {
        v.round() as i64
    }
}

/// Exact generators from the unrounded chains.
fn round_chains(n: usize, chains: &[Chain], big_q: i64) -> Result<SketchLattice> {
    let mut lat = SketchLattice::empty(n);
    for (j, ch) in chains.iter().enumerate() {
        let (t, c) = if ch.full {
            let t: Vec<Rat> = ch
                .anchor
                .iter()
                .map(|&a| rat_reduce(Rat::new(round_half_toward_zero(a * big_q as f64), big_q)))
                .collect();
            (t, vec![0i64; j])
        } else {
            // Reduce the witness coefficients using earlier relations, top index first.
            let mut d = ch.d.clone();
            for i in (0..j).rev() {
                let k = lat.denominators[i];
                let s = d[i].div_euclid(k);
                d[i] -= s * k;
                if s != 0 {
                    for (h, &ch) in lat.relations[i].iter().enumerate() {
                        d[h] += s * ch;
                    }
                }
            }
            let w = lat.combination_exact(&d);
            let k = ch.k;
            let t: Vec<Rat> = (0..n)
                .map(|i| {
                    let wf = rat_to_f64(&w[i]);
                    let z = (k as f64 * ch.anchor[i] - wf).round() as i64;
                    rat_reduce((w[i] + Rat::from_integer(z)) / Rat::from_integer(k))
                })
                .collect();
            (t, d)
        };
        lat.generators.push(t);
        lat.denominators.push(ch.k);
        lat.relations.push(c);
    }
    for j in 0..lat.len() {
        let res = lat.relation_residual(j);
        if res > 1e-9 {
            return Err(Error::precondition(format!(
                "internal consistency: relation {j} has residual {res:e}"
            )));
        }
    }
    Ok(lat)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NearOriginConfig {
    pub k: f64,
    pub kappa: f64,
    pub b: f64,
    pub big_q: i64,
    pub radius: f64,
    pub grid_exponent: u32,
    /// Downgrade window and `Q` violations to warnings.
    pub allow_override: bool,
}

impl NearOriginConfig {
    pub fn new(k: f64, kappa: f64, b: f64, big_q: i64, radius: f64) -> Self {
        NearOriginConfig {
            k,
            kappa,
            b,
            big_q,
            radius,
            grid_exponent: 7,
            allow_override: false,
        }
    }

    /// `100 B S^{3/2} kappa / sqrt(K)`.
    pub fn rho(&self, s: f64) -> f64 {
        100.0 * self.b * s.powf(1.5) * self.kappa / self.k.sqrt()
    }

    /// `(3 sqrt(S)/R, sqrt(2 pi / (K ln 8n)))`.
    pub fn window(&self, n: usize, s: f64) -> (f64, f64) {
        (
            3.0 * s.sqrt() / self.radius,
            (2.0 * PI / (self.k * (8.0 * n as f64).ln())).sqrt(),
        )
    }

    pub fn ell_bound(&self, s: f64) -> f64 {
        2.0 * s / (2.0 * self.b).log2()
    }
}

/// Rational frequencies `eta_j = v_j / Q` spanning the near-origin heavy spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct NearOriginBasis {
    pub n: usize,
    pub denominator: i64,
    /// `Q eta_j`, entries in `[-Q/2, Q/2)`.
    pub numerators: Vec<Vec<i64>>,
    pub radius_bound: f64,
}

impl NearOriginBasis {
    pub fn ell(&self) -> usize {
        self.numerators.len()
    }

    pub fn frequencies(&self) -> Vec<Vec<f64>> {
        self.numerators
            .iter()
            .map(|v| v.iter().map(|&x| x as f64 / self.denominator as f64).collect())
            .collect()
    }

    /// Euclidean distance from the representative of `zeta` to `span_R {eta_j}`;
    /// an upper bound on the subtorus distance.
    pub fn distance_to_span(&self, zeta: &[f64]) -> f64 {
        let a = torus_reduce_vec(zeta);
        residual_after_projection(&a, &orthonormal(&self.frequencies()))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "near-origin-basis n={} l={} Q={} radius={:e}",
            self.n,
            self.ell(),
            self.denominator,
            self.radius_bound
        );
        for v in &self.numerators {
            let coords: Vec<String> = v.iter().map(|x| format!("{}/{}", x, self.denominator)).collect();
            let _ = writeln!(s, "eta {}", coords.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let perr = |line: usize, msg: &str| Error::Parse {
            line: line + 1,
            msg: msg.to_string(),
        };
        let (l0, header) = lines.next().ok_or_else(|| perr(0, "empty input"))?;
        let mut w = header.split_whitespace();
        if w.next() != Some("near-origin-basis") {
            return Err(perr(l0, "expected near-origin-basis header"));
        }
        let (mut n, mut l, mut q, mut radius) = (None, None, None, None);
        for t in w {
            if let Some(v) = t.strip_prefix("n=") {
                n = v.parse::<usize>().ok();
            } else if let Some(v) = t.strip_prefix("l=") {
                l = v.parse::<usize>().ok();
            } else if let Some(v) = t.strip_prefix("Q=") {
                q = v.parse::<i64>().ok();
            } else if let Some(v) = t.strip_prefix("radius=") {
                radius = v.parse::<f64>().ok();
            }
        }
        let (Some(n), Some(l), Some(q), Some(radius)) = (n, l, q, radius) else {
            return Err(perr(l0, "header needs n=, l=, Q= and radius="));
        };
        if q < 1 {
            return Err(perr(l0, "Q must be positive"));
        }
        let mut numerators = Vec::new();
        for _ in 0..l {
            let (li, line) = lines.next().ok_or_else(|| perr(l0, "missing eta line"))?;
            let mut w = line.split_whitespace();
            if w.next() != Some("eta") {
                return Err(perr(li, "expected eta line"));
            }
            let v: Vec<i64> = w
                .map(|s| {
                    let r = parse_rat(s)?;
                    let scaled = r * Rat::from_integer(q);
                    scaled.is_integer().then(|| scaled.to_integer())
                })
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| perr(li, "coordinate not on the Q grid"))?;
            if v.len() != n {
                return Err(perr(li, "dimension mismatch"));
            }
            numerators.push(v);
        }
        Ok(NearOriginBasis {
            n,
            denominator: q,
            numerators,
            radius_bound: radius,
        })
    }
}

fn orthonormal(vs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    for v in vs {
        let mut r = v.clone();
        for _ in 0..2 {
            for u in &out {
                let p: f64 = r.iter().zip(u).map(|(a, b)| a * b).sum();
                for (ri, ui) in r.iter_mut().zip(u) {
                    *ri -= p * ui;
                }
            }
        }
        let nr = norm2(&r);
        if nr > 1e-12 * norm2(v).max(1e-300) {
            out.push(r.iter().map(|x| x / nr).collect());
        }
    }
    out
}

fn residual_after_projection(a: &[f64], basis: &[Vec<f64>]) -> f64 {
    let mut r = a.to_vec();
    for _ in 0..2 {
        for u in basis {
            let p: f64 = r.iter().zip(u).map(|(x, y)| x * y).sum();
            for (ri, ui) in r.iter_mut().zip(u) {
                *ri -= p * ui;
            }
        }
    }
    norm2(&r)
}

#[derive(Clone, Debug)]
pub struct NearOriginExtraction {
    pub basis: NearOriginBasis,
    /// Representatives picked by the greedy pass.
    pub selected: Vec<Vec<f64>>,
    pub rho: f64,
    pub s: f64,
    pub ell_bound: f64,
    /// Near-origin heavy frequencies checked.
    pub checked: usize,
    pub worst_distance: f64,
    pub window: (f64, f64),
    pub q_required: f64,
    pub warnings: Vec<String>,
}

pub fn extract_near_origin_structure(
    mu: &SparseMeasure,
    cfg: &NearOriginConfig,
) -> Result<NearOriginExtraction> {
    let cert = density_certificate(mu, cfg.radius)?;
    let scan = large_spectrum_scan(mu, cfg.k, cfg.grid_exponent, true)?;
    let heavy = ordered_heavy(&scan);
    extract_near_origin_from_heavy(mu.dim(), &heavy, cert.s, cfg)
}

pub fn extract_near_origin_from_heavy(
    n: usize,
    heavy: &[HeavyFrequency],
    s: f64,
    cfg: &NearOriginConfig,
) -> Result<NearOriginExtraction> {
    if !(cfg.b >= 1.0) || cfg.big_q < 1 {
        return Err(Error::precondition("near-origin extraction needs B >= 1 and Q >= 1"));
    }
    let mut warnings = Vec::new();
    let mut flag = |msg: String| -> Result<()> {
        if cfg.allow_override {
            warnings.push(msg);
            Ok(())
        } else {
            Err(Error::precondition(msg))
        }
    };
    let rho = cfg.rho(s);
    let window = cfg.window(n, s);
    if !(window.0 <= cfg.kappa && cfg.kappa <= window.1) {
        flag(format!(
            "kappa = {} outside window [{:.4e}, {:.4e}]",
            cfg.kappa, window.0, window.1
        ))?;
    }
    let q_required = if rho > 0.0 {
        2.0 * (2.0 * n as f64 * s).sqrt() * cfg.kappa / rho
    } else {
        0.0
    };
    if (cfg.big_q as f64) < q_required {
        flag(format!("Q = {} below required {q_required:.2}", cfg.big_q))?;
    }
    let near: Vec<Vec<f64>> = heavy
        .iter()
        .map(|h| torus_reduce_vec(&h.point))
        .filter(|p| norm2(p) <= cfg.kappa)
        .collect();
    let ell_bound = cfg.ell_bound(s);
    let mut selected: Vec<Vec<f64>> = Vec::new();
    if 2.0 * rho < cfg.kappa {
        let mut ortho: Vec<Vec<f64>> = Vec::new();
        for p in &near {
            if residual_after_projection(p, &ortho) >= rho {
                selected.push(p.clone());
                ortho = orthonormal(&selected);
                if selected.len() as f64 > ell_bound {
                    return Err(Error::bound("near-origin dimension", selected.len() as f64, ell_bound));
                }
            }
        }
    }
    let q = cfg.big_q;
    let numerators: Vec<Vec<i64>> = orthonormal(&selected)
        .iter()
        .map(|u| {
            u.iter()
                .map(|&x| {
                    let v = (x * q as f64).round() as i64;
                    // Representative in [-Q/2, Q/2).
                    let r = v.rem_euclid(q);
                    if 2 * r >= q {
                        r - q
                    } else {
                        r
                    }
                })
                .collect()
        })
        .collect();
    let basis = NearOriginBasis {
        n,
        denominator: q,
        numerators,
        radius_bound: 2.0 * rho,
    };
    let worst = near
        .iter()
        .map(|p| basis.distance_to_span(p))
        .fold(0.0, f64::max);
    if worst > basis.radius_bound + 1e-12 {
        return Err(Error::bound("near-origin span", worst, basis.radius_bound));
    }
    Ok(NearOriginExtraction {
        basis,
        selected,
        rho,
        s,
        ell_bound,
        checked: near.len(),
        worst_distance: worst,
        window,
        q_required,
        warnings,
    })
}

/// `(max row norm, min Gram-Schmidt increment)` of the rows of `a`.
pub fn small_ball_params(a: &DMatrix<f64>) -> (f64, f64) {
    let rows: Vec<Vec<f64>> = (0..a.nrows())
        .map(|i| a.row(i).iter().copied().collect())
        .collect();
    let kappa0 = rows.iter().map(|r| norm2(r)).fold(0.0, f64::max);
    let mut rho = f64::INFINITY;
    for (i, r) in rows.iter().enumerate() {
        rho = rho.min(residual_after_projection(r, &orthonormal(&rows[..i])));
    }
    (kappa0, rho)
}

/// `2 (5u/(rho R))^l exp(-(l/2u^2) b^T (I + (l R^2/2 pi u^2) A A^T)^{-1} b)`.
pub fn small_ball_bound(a: &DMatrix<f64>, r: f64, u: f64, b: &[f64], rho: f64) -> Result<f64> {
    let l = a.nrows();
    let lf = l as f64;
    let g = a * a.transpose();
    let m = DMatrix::<f64>::identity(l, l) + g * (lf * r * r / (2.0 * PI * u * u));
    let bv = DVector::from_column_slice(b);
    let sol = m
        .lu()
        .solve(&bv)
        .ok_or_else(|| Error::domain("singular small-ball matrix"))?;
    let quad = bv.dot(&sol);
    Ok(2.0 * (5.0 * u / (rho * r)).powi(l as i32) * (-(lf / (2.0 * u * u)) * quad).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmallBallReport {
    pub trials: u64,
    pub hits: u64,
    pub empirical: f64,
    pub std_error: f64,
    /// Certified mass outside the truncation ball, added to the allowance.
    pub tail_slack: f64,
    pub bound: f64,
    pub kappa0: f64,
    pub rho: f64,
    pub condition_lhs: f64,
    pub condition_rhs: f64,
    pub pass: bool,
}

fn small_ball_setup(a: &DMatrix<f64>, r: f64, u: f64, b: &[f64]) -> Result<(f64, f64, f64, f64, f64)> {
    let l = a.nrows();
    let n = a.ncols();
    if l == 0 || n == 0 || b.len() != l {
        return Err(Error::domain("small-ball matrix and offset shapes disagree"));
    }
    if !(u > 0.0) || r < 2.0 {
        return Err(Error::precondition("small-ball check needs u > 0 and R >= 2"));
    }
    let (kappa0, rho) = small_ball_params(a);
    if !(rho > 0.0) {
        return Err(Error::precondition("rows of A are linearly dependent"));
    }
    let lhs = 1.0 / (r * r) + (l * l) as f64 * kappa0 * kappa0 / (2.0 * PI * u * u);
    let rhs = PI / (8.0 * n as f64).ln();
    if lhs > rhs {
        return Err(Error::precondition(format!(
            "small-ball window violated: {lhs:.4} > {rhs:.4}"
        )));
    }
    let bound = small_ball_bound(a, r, u, b, rho)?;
    Ok((kappa0, rho, lhs, rhs, bound))
}

fn in_ball(a: &DMatrix<f64>, x: &[i64], b: &[f64], u: f64) -> bool {
    let mut d2 = 0.0;
    for i in 0..a.nrows() {
        let mut v = -b[i];
        for j in 0..a.ncols() {
            v += a[(i, j)] * x[j] as f64;
        }
        d2 += v * v;
    }
    d2 <= u * u
}

/// Monte Carlo estimate of `P(|AY - b| <= u)` for `Y ~ gamma_R` against the closed form.
pub fn small_ball_check(
    a: &DMatrix<f64>,
    r: f64,
    u: f64,
    b: &[f64],
    trials: u64,
    seed: u64,
) -> Result<SmallBallReport> {
    let (kappa0, rho, lhs, rhs, bound) = small_ball_setup(a, r, u, b)?;
    if trials == 0 {
        return Err(Error::domain("need at least one trial"));
    }
    let policy = TruncationPolicy::default();
    let sampler = GaussianSampler::new(a.ncols(), r, &policy)?;
    let tail = policy.certified_tail(a.ncols(), r);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0u64;
    for _ in 0..trials {
        let y = sampler.sample(&mut rng);
        if in_ball(a, &y, b, u) {
            hits += 1;
        }
    }
    let p = hits as f64 / trials as f64;
    let se = (p * (1.0 - p) / trials as f64).sqrt();
    Ok(SmallBallReport {
        trials,
        hits,
        empirical: p,
        std_error: se,
        tail_slack: tail,
        bound,
        kappa0,
        rho,
        condition_lhs: lhs,
        condition_rhs: rhs,
        pass: p <= bound + 3.0 * se + tail,
    })
}

/// Exact probability by enumeration of the truncated support, as `[lower, upper]`.
pub fn small_ball_exact(a: &DMatrix<f64>, r: f64, u: f64, b: &[f64]) -> Result<(f64, f64, f64)> {
    let (_, _, _, _, bound) = small_ball_setup(a, r, u, b)?;
    let n = a.ncols();
    let g = DiscreteGaussian::new(n, r)?;
    let policy = TruncationPolicy::default();
    let ball = g.ball_measure(policy.radius(n, r));
    if ball.len() > 5_000_000 {
        return Err(Error::budget("small-ball enumeration too large"));
    }
    let p = comp_sum(
        ball.iter()
            .filter(|(x, _)| in_ball(a, x, b, u))
            .map(|(x, _)| g.pmf(x)),
    );
    Ok((p, p + policy.certified_tail(n, r), bound))
}

/// Which structure theorem a convolution is routed through.
#[derive(Clone, Debug)]
pub enum StructureRoute {
    Exact(ExactConfig),
    NearOrigin(NearOriginConfig),
}

#[derive(Clone, Debug)]
pub enum Structure {
    Lattice(ExactExtraction),
    Subspace(NearOriginExtraction),
}

#[derive(Clone, Debug)]
pub struct ConvolutionStructure {
    pub structure: Structure,
    pub alphas: Vec<f64>,
    /// Geometric mean of the densities.
    pub alpha: f64,
    /// Indices with `alpha_i >= alpha^2`.
    pub good: Vec<usize>,
    /// Density parameter of the symmetrized measure against `gamma_{sqrt2 R}`.
    pub s_sym: f64,
    pub product_heavy: Vec<HeavyFrequency>,
    pub product_threshold: f64,
    pub product_scan_margin: f64,
    /// Worst distance from the product heavy set (near-origin part for the
    /// subspace route) to the structure.
    pub certified_worst: f64,
    pub certified_bound: f64,
}

/// Heavy set of `prod_i |mu_i_hat|` at threshold `exp(-M/K)`.
pub fn product_heavy_scan(mus: &[SparseMeasure], k: f64, grid_exponent: u32) -> Result<SpectrumScan> {
    if mus.is_empty() {
        return Err(Error::domain("need at least one measure"));
    }
    let n = mus[0].dim();
    let side = 1usize << grid_exponent;
    if (side as f64).powi(n as i32) > (1u64 << 24) as f64 {
        return Err(Error::budget("scan grid exceeds 2^24 points"));
    }
    // Identical factors share one transform.
    let mut groups: Vec<(&SparseMeasure, i32)> = Vec::new();
    for mu in mus {
        match groups.iter_mut().find(|(g, _)| *g == mu) {
            Some(g) => g.1 += 1,
            None => groups.push((mu, 1)),
        }
    }
    let mut grid = vec![1.0f64; side.pow(n as u32)];
    let mut lipschitz = 0.0;
    for (mu, c) in &groups {
        let t = transform_grid(mu, side);
        for (g, v) in grid.iter_mut().zip(&t) {
            *g *= v.norm().powi(*c);
        }
        lipschitz += *c as f64 * 2.0 * PI * mu.mean_norm();
    }
    let eval = |z: &[f64]| -> f64 {
        groups
            .iter()
            .map(|(mu, c)| mu.fourier_at(z).norm().powi(*c))
            .product()
    };
    let threshold = (-(mus.len() as f64) / k).exp();
    Ok(scan_magnitudes(n, grid_exponent, threshold, &grid, lipschitz, Some(&eval)))
}

/// Structure of the heavy spectrum of `mu_1 * ... * mu_M` via the symmetrized measure.
pub fn convolution_structure(mus: &[SparseMeasure], route: &StructureRoute) -> Result<ConvolutionStructure> {
    if mus.is_empty() {
        return Err(Error::domain("need at least one measure"));
    }
    let (radius, k, grid_exponent) = match route {
        StructureRoute::Exact(c) => (c.radius, c.k, c.grid_exponent),
        StructureRoute::NearOrigin(c) => (c.radius, c.k, c.grid_exponent),
    };
    let n = mus[0].dim();
    let alphas: Vec<f64> = mus
        .iter()
        .map(|mu| density_certificate(mu, radius).map(|c| c.alpha))
        .collect::<Result<_>>()?;
    let alpha = (alphas.iter().map(|a| a.ln()).sum::<f64>() / mus.len() as f64).exp();
    let good: Vec<usize> = (0..mus.len())
        .filter(|&i| alphas[i] >= alpha * alpha * (1.0 - 1e-12))
        .collect();
    let picked: Vec<SparseMeasure> = good.iter().map(|&i| mus[i].clone()).collect();
    let sym = symmetrize(&picked)?;
    let r_sym = std::f64::consts::SQRT_2 * radius;
    let s_sym = density_certificate(&sym, r_sym)?.s;
    let sym_scan = large_spectrum_scan(&sym, k / 4.0, grid_exponent, true)?;
    let sym_heavy = ordered_heavy(&sym_scan);

    let prod_scan = product_heavy_scan(mus, k, grid_exponent)?;
    let product_heavy = ordered_heavy(&prod_scan);
    let product_points: Vec<Vec<f64>> = product_heavy.iter().map(|h| h.point.clone()).collect();

    let (structure, worst, bound) = match route {
        StructureRoute::Exact(cfg) => {
            let mut derived = cfg.clone();
            derived.k = k / 4.0;
            derived.radius = r_sym;
            let eval = |z: &[f64]| sym.fourier_at(z).norm();
            let ex = extract_exact_from_heavy(n, sym_heavy, &eval, s_sym, &derived, &sym_scan)?;
            let d = span_distances(&ex.lattice, &product_points, derived.fiber_budget)?;
            let worst = d.iter().copied().fold(0.0, f64::max);
            let bound = ex.span_bound;
            (Structure::Lattice(ex), worst, bound)
        }
        StructureRoute::NearOrigin(cfg) => {
            let mut derived = cfg.clone();
            derived.k = k / 4.0;
            derived.radius = r_sym;
            let ex = extract_near_origin_from_heavy(n, &sym_heavy, s_sym, &derived)?;
            let worst = product_points
                .iter()
                .filter(|p| torus_norm(p) <= cfg.kappa)
                .map(|p| ex.basis.distance_to_span(p))
                .fold(0.0, f64::max);
            let bound = ex.basis.radius_bound;
            (Structure::Subspace(ex), worst, bound)
        }
    };
    if worst > bound + 1e-12 {
        return Err(Error::bound("convolution heavy set", worst, bound));
    }
    Ok(ConvolutionStructure {
        structure,
        alphas,
        alpha,
        good,
        s_sym,
        product_heavy,
        product_threshold: prod_scan.threshold,
        product_scan_margin: prod_scan.margin,
        certified_worst: worst,
        certified_bound: bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgauss::{DiscreteGaussian, TruncationPolicy};
    use proptest::prelude::*;

    fn gamma(n: usize, r: f64) -> SparseMeasure {
        DiscreteGaussian::new(n, r)
            .unwrap()
            .truncated(&TruncationPolicy::default())
            .unwrap()
    }

    fn brute_dissociated(set: &[Vec<f64>], kappa: f64) -> bool {
        let m = set.len();
        let n = set[0].len();
        let total = 3usize.pow(m as u32);
        for code in 0..total {
            let mut c = code;
            let mut s = vec![0.0; n];
            let mut nonzero = false;
            for x in set {
                let e = (c % 3) as f64 - 1.0;
                c /= 3;
                nonzero |= e != 0.0;
                for d in 0..n {
                    s[d] += e * x[d];
                }
            }
            if nonzero && torus_norm(&s) < kappa {
                return false;
            }
        }
        true
    }

    #[test]
    fn dissociation_basics() {
        let d = is_kappa_dissociated(&[vec![0.3, 0.1]], 0.2).unwrap();
        assert!(d.dissociated);
        let a = vec![0.21, -0.4];
        let d = is_kappa_dissociated(&[a.clone(), vec![0.1, 0.1], a], 0.05).unwrap();
        assert!(!d.dissociated);
        let w = d.witness.unwrap();
        assert_eq!(w.iter().filter(|&&e| e != 0).count(), 2);
        assert!(is_kappa_dissociated(&vec![vec![0.1]; 21], 0.01).is_err());
    }

    #[test]
    fn greedy_examples() {
        assert_eq!(greedy_dissociated_subset(&vec![vec![0.25, 0.0]; 5], 0.1).unwrap(), vec![0]);
        let far = vec![vec![0.25, 0.0], vec![0.0, 0.25]];
        assert_eq!(greedy_dissociated_subset(&far, 0.1).unwrap(), vec![0, 1]);
    }

    #[test]
    fn rudin_trivial_and_gaussian() {
        let nu = gamma(1, 8.0);
        let r = coarse_rudin_check(&nu, &[], &[], 1.0, 0.1, 0.01).unwrap();
        assert!((r.lhs - 1.0).abs() < 1e-12 && r.pass);
        let eta = crate::dgauss::fourier_decay_bound(8.0, 0.25);
        let t = vec![vec![0.25]];
        let c = vec![Complex64::new(1.0, 0.0)];
        let r = coarse_rudin_check(&nu, &t, &c, 0.5, 0.2, eta).unwrap();
        // Direct expectation oracle.
        let direct: f64 = nu
            .iter()
            .map(|(x, m)| m * (0.5 * (2.0 * PI * 0.25 * x[0] as f64).cos()).exp())
            .sum();
        assert!((r.lhs - direct).abs() < 1e-12);
        assert!(r.pass);
        let r0 = coarse_rudin_check(&nu, &t, &c, 0.0, 0.2, eta).unwrap();
        assert!((r0.lhs - 1.0).abs() < 1e-12 && r0.pass);
    }

    fn exact_cfg() -> ExactConfig {
        ExactConfig::new(324.0, 4096, 3, 0.1, 8.0)
    }

    #[test]
    fn gaussian_has_empty_lattice() {
        let ex = extract_exact_structure(&gamma(2, 8.0), &exact_cfg()).unwrap();
        assert!(ex.lattice.is_empty());
        assert!(ex.heavy.iter().all(|h| torus_norm(&h.point) < 0.1));
    }

    #[test]
    fn parity_generator() {
        let (mu, _) = gamma(2, 8.0).restrict(|x| (x[0] + x[1]).rem_euclid(2) == 0).unwrap();
        // Direct transform oracle.
        assert!((mu.fourier_at(&[0.5, 0.5]).norm() - 1.0).abs() < 1e-12);
        let ex = extract_exact_structure(&mu, &exact_cfg()).unwrap();
        let lat = &ex.lattice;
        assert_eq!(lat.len(), 1);
        assert_eq!(lat.denominators, vec![2]);
        assert_eq!(lat.generators[0], vec![Rat::new(-1, 2), Rat::new(-1, 2)]);
        assert!(lat.max_relation_residual() < 1e-12);
        assert!(ex.product_within_bound(1.0));
        assert!(ex.chain_heaviness_ok(1e-9));
        let check = verify_span(lat, &[vec![0.5, 0.5]], 1e-9).unwrap();
        assert!(check.worst < 1e-12);
    }

    #[test]
    fn mod_three_generator() {
        let (mu, _) = gamma(2, 8.0).restrict(|x| x[0].rem_euclid(3) == 0).unwrap();
        let ex = extract_exact_structure(&mu, &exact_cfg()).unwrap();
        let lat = &ex.lattice;
        assert_eq!(lat.denominators, vec![3]);
        assert_eq!(lat.generators[0], vec![Rat::new(1, 3), Rat::zero()]);
        let check = verify_span(lat, &[vec![2.0 / 3.0, 0.0]], 1e-9).unwrap();
        assert!(check.worst < 1e-12);
    }

    #[test]
    fn lattice_text_roundtrip() {
        let lat = SketchLattice {
            n: 2,
            generators: vec![vec![Rat::new(1, 2), Rat::new(-1, 2)], vec![Rat::new(1, 6), Rat::zero()]],
            denominators: vec![2, 2],
            relations: vec![vec![], vec![0]],
            span_error: 0.0,
        };
        let back = SketchLattice::from_text(&lat.to_text()).unwrap();
        assert_eq!(back.generators, lat.generators);
        assert_eq!(back.denominators, lat.denominators);
        assert_eq!(back.relations, lat.relations);
        assert!(SketchLattice::from_text("sketch-lattice n=2 m=1\nt 1/2\nk 2\nc\n").is_err());
    }

    #[test]
    fn verify_span_empty_lattice() {
        let lat = SketchLattice::empty(2);
        let c = verify_span(&lat, &[vec![0.05, 0.0], vec![0.0, -0.08]], 0.1).unwrap();
        assert!(c.worst <= 0.1);
        assert!(verify_span(&lat, &[vec![0.3, 0.0]], 0.1).is_err());
    }

    #[test]
    fn near_origin_gaussian_trivial() {
        let mut cfg = NearOriginConfig::new(8.0, 0.2, 1.0, 8, 8.0);
        cfg.allow_override = true;
        let ex = extract_near_origin_structure(&gamma(2, 8.0), &cfg).unwrap();
        assert_eq!(ex.basis.ell(), 0);
        assert!(2.0 * ex.rho >= cfg.kappa);
    }

    #[test]
    fn near_origin_slab() {
        // Mass on the antidiagonal x1 + x2 = 0 under gamma_8.
        let g = DiscreteGaussian::new(2, 8.0).unwrap();
        let atoms: Vec<(Vec<i64>, f64)> = (-40..=40).map(|t| (vec![t, -t], g.pmf(&[t, -t]))).collect();
        let mu = SparseMeasure::from_atoms(2, atoms).unwrap().normalized();
        assert!((mu.fourier_at(&[0.05, 0.05]).norm() - 1.0).abs() < 1e-12);
        let mut cfg = NearOriginConfig::new(1e8, 0.1, 1.0, 128, 8.0);
        cfg.allow_override = true;
        let ex = extract_near_origin_structure(&mu, &cfg).unwrap();
        assert_eq!(ex.basis.ell(), 1);
        let v = &ex.basis.numerators[0];
        assert_eq!(v[0], v[1]);
        let u = (128.0 * std::f64::consts::FRAC_1_SQRT_2).round() as i64;
        assert_eq!(v[0].rem_euclid(128), u.rem_euclid(128));
        assert!(!ex.warnings.is_empty());
        let back = NearOriginBasis::from_text(&ex.basis.to_text()).unwrap();
        assert_eq!(back, ex.basis);
    }

    #[test]
    fn near_origin_window_enforced() {
        let cfg = NearOriginConfig::new(8.0, 0.0, 1.0, 8, 8.0);
        assert!(extract_near_origin_structure(&gamma(2, 8.0), &cfg).is_err());
        let mut cfg = cfg;
        cfg.allow_override = true;
        let ex = extract_near_origin_structure(&gamma(2, 8.0), &cfg).unwrap();
        assert!(!ex.warnings.is_empty());
        assert_eq!(ex.basis.ell(), 0);
    }

    #[test]
    fn small_ball_far_offset() {
        let a = DMatrix::from_row_slice(1, 1, &[0.001]);
        let r = small_ball_check(&a, 8.0, 0.01, &[100.0], 10_000, 1).unwrap();
        assert_eq!(r.hits, 0);
        assert!(r.pass);
    }

    #[test]
    fn small_ball_exact_one_dim() {
        let a = DMatrix::from_row_slice(1, 1, &[0.05]);
        let (lo, hi, bound) = small_ball_exact(&a, 16.0, 0.1, &[0.0]).unwrap();
        // |0.05 y| <= 0.1 iff |y| <= 2: direct pmf sum.
        let g = DiscreteGaussian::new(1, 16.0).unwrap();
        let direct: f64 = (-2..=2).map(|y| g.pmf(&[y])).sum();
        assert!((lo - direct).abs() < 1e-12);
        assert!(hi <= bound);
    }

    #[test]
    fn small_ball_window_enforced() {
        let a = DMatrix::from_row_slice(1, 1, &[1.0]);
        assert!(small_ball_check(&a, 8.0, 0.01, &[0.0], 10, 1).is_err());
    }

    fn conv_route() -> StructureRoute {
        StructureRoute::Exact(ExactConfig::new(324.0, 2048, 3, 0.1, 8.0))
    }

    fn lattice_of(c: &ConvolutionStructure) -> &SketchLattice {
        match &c.structure {
            Structure::Lattice(ex) => &ex.lattice,
            Structure::Subspace(_) => panic!("expected lattice"),
        }
    }

    #[test]
    fn convolution_of_gaussians_is_unstructured() {
        let mus = vec![gamma(2, 8.0); 4];
        let c = convolution_structure(&mus, &conv_route()).unwrap();
        assert!(lattice_of(&c).is_empty());
        assert!(c.product_heavy.iter().all(|h| torus_norm(&h.point) < 0.1));
    }

    #[test]
    fn convolution_of_even_pieces_keeps_parity() {
        let (even, _) = gamma(2, 8.0).restrict(|x| (x[0] + x[1]).rem_euclid(2) == 0).unwrap();
        let c = convolution_structure(&vec![even; 4], &conv_route()).unwrap();
        let lat = lattice_of(&c);
        assert_eq!(lat.denominators, vec![2]);
        assert!(c.certified_worst < 1e-9);
    }

    #[test]
    fn mixed_convolution_loses_parity() {
        let g = gamma(2, 8.0);
        let (even, _) = g.restrict(|x| (x[0] + x[1]).rem_euclid(2) == 0).unwrap();
        let mus = vec![g.clone(), g, even.clone(), even];
        // Oracle: the symmetrized transform at (1/2,1/2) averages 0 and 1.
        let sym = symmetrize(&mus).unwrap();
        assert!((sym.fourier_at(&[0.5, 0.5]).re - 0.5).abs() < 1e-9);
        let c = convolution_structure(&mus, &conv_route()).unwrap();
        assert!(lattice_of(&c).is_empty());
    }

    proptest! {
        #[test]
        fn dissociation_matches_brute(
            set in proptest::collection::vec(proptest::collection::vec(-0.5f64..0.5, 2), 1..7),
            kappa in 0.01f64..0.2,
        ) {
            let d = is_kappa_dissociated(&set, kappa).unwrap();
            prop_assert_eq!(d.dissociated, brute_dissociated(&set, kappa));
        }

        #[test]
        fn greedy_output_is_dissociated(
            set in proptest::collection::vec(proptest::collection::vec(-0.5f64..0.5, 2), 1..8),
        ) {
            let kept = greedy_dissociated_subset(&set, 0.1).unwrap();
            let sub: Vec<Vec<f64>> = kept.iter().map(|&i| set[i].clone()).collect();
            prop_assert!(is_kappa_dissociated(&sub, 0.1).unwrap().dissociated);
        }

        #[test]
        fn small_ball_params_sane(
            rows in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 3), 1..3),
        ) {
            let l = rows.len();
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let a = DMatrix::from_row_slice(l, 3, &flat);
            let (k0, rho) = small_ball_params(&a);
            prop_assert!(rho <= k0 + 1e-12);
        }
    }
}
