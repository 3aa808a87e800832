//! From a finite-state algorithm to a linear sketch: select a state sequence,
//! condition the prefix blocks, extract the structure of their convolution and
//! decode each fiber from sampled landings.

use crate::dgauss::{GaussianSampler, TruncationPolicy};
use crate::measure::SparseMeasure;
use crate::spectrum::{ConvolutionStructure, Rat, SketchLattice, Structure, StructureRoute, convolution_structure};
use crate::streaming::{
    landing_outputs, select_state_sequence, PosteriorLaws, ProblemKind, ProblemSpec, SelectionConfig,
    StateSequence, TurnstileAlgorithm,
};
use crate::translation::{certify_with, conditioned_convolution, tv_distance, TranslationReport};
use crate::{Error, Result};
use num_traits::Zero;
use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    Exact,
    Mollified,
}

impl Route {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Route::Exact),
            "mollified" => Ok(Route::Mollified),
            other => Err(Error::Usage(format!("route must be exact or mollified, got {other:?}"))),
        }
    }

    /// Metric tolerance multiplier in the transfer guarantee.
    pub fn tolerance_scale(&self) -> f64 {
        match self {
            Route::Exact => 3.0,
            Route::Mollified => 6.0,
        }
    }
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Route::Exact => "exact",
            Route::Mollified => "mollified",
        })
    }
}

/// Image of a point under the sketch.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SketchValue {
    /// `(<t_j, y> mod 1)_j`, each in `[0, 1)`.
    Residues(Vec<Rat>),
    Integers(Vec<i64>),
}

impl SketchValue {
    pub fn is_zero(&self) -> bool {
        match self {
            SketchValue::Residues(r) => r.iter().all(Zero::is_zero),
            SketchValue::Integers(v) => v.iter().all(|&x| x == 0),
        }
    }
}

impl fmt::Display for SketchValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = match self {
            SketchValue::Residues(r) => r.iter().map(|x| format!("{}/{}", x.numer(), x.denom())).collect(),
            SketchValue::Integers(v) => v.iter().map(i64::to_string).collect(),
        };
        write!(f, "({})", parts.join(","))
    }
}

fn frac(x: Rat) -> Rat {
    x - Rat::from_integer(x.floor().to_integer())
}

/// Group operation on sketch values.
pub fn sketch_add(a: &SketchValue, b: &SketchValue) -> Result<SketchValue> {
    match (a, b) {
        (SketchValue::Residues(x), SketchValue::Residues(y)) if x.len() == y.len() => {
            Ok(SketchValue::Residues(x.iter().zip(y).map(|(p, q)| frac(p + q)).collect()))
        }
        (SketchValue::Integers(x), SketchValue::Integers(y)) if x.len() == y.len() => {
            Ok(SketchValue::Integers(x.iter().zip(y).map(|(p, q)| p + q).collect()))
        }
        _ => Err(Error::domain("sketch values of different shape")),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractedSketch {
    pub route: Route,
    pub n: usize,
    pub lattice: Option<SketchLattice>,
    /// `l x n` integer matrix; rows are `Q eta_j`.
    pub matrix: Option<Vec<Vec<i64>>>,
    pub big_q: i64,
    pub sigma: StateSequence,
    pub provenance: String,
}

impl ExtractedSketch {
    pub fn dimension(&self) -> usize {
        match self.route {
            Route::Exact => self.lattice.as_ref().map_or(0, SketchLattice::len),
            Route::Mollified => self.matrix.as_ref().map_or(0, Vec::len),
        }
    }

    /// `prod k_j` for the exact route.
    pub fn fiber_bound(&self) -> Option<u128> {
        self.lattice.as_ref().map(SketchLattice::fiber_count)
    }

    pub fn max_entry(&self) -> i64 {
        self.matrix
            .as_ref()
            .map_or(0, |m| m.iter().flatten().map(|x| x.abs()).max().unwrap_or(0))
    }
}

pub fn sketch_apply(sketch: &ExtractedSketch, y: &[i64]) -> Result<SketchValue> {
    if y.len() != sketch.n {
        return Err(Error::domain("point dimension differs from the sketch"));
    }
    match sketch.route {
        Route::Exact => {
            let lat = sketch.lattice.as_ref().ok_or_else(|| Error::domain("exact sketch without lattice"))?;
            Ok(SketchValue::Residues(
                lat.generators
                    .iter()
                    .map(|t| {
                        frac(t.iter().zip(y).fold(Rat::zero(), |acc, (a, &b)| acc + a * Rat::from_integer(b)))
                    })
                    .collect(),
            ))
        }
        Route::Mollified => {
            let m = sketch.matrix.as_ref().ok_or_else(|| Error::domain("mollified sketch without matrix"))?;
            Ok(SketchValue::Integers(
                m.iter().map(|row| row.iter().zip(y).map(|(a, b)| a * b).sum()).collect(),
            ))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FiberConflict {
    pub value: SketchValue,
    pub members: Vec<Vec<i64>>,
    pub labels: Vec<i64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FiberDecoder {
    pub table: BTreeMap<SketchValue, i64>,
    pub representative: BTreeMap<SketchValue, Vec<i64>>,
    pub default_output: i64,
    pub conflicts: Vec<FiberConflict>,
}

impl FiberDecoder {
    pub fn lookup(&self, v: &SketchValue) -> Option<i64> {
        self.table.get(v).copied()
    }

    /// Fibers outside the table decode to the default output.
    pub fn decode(&self, v: &SketchValue) -> i64 {
        self.lookup(v).unwrap_or(self.default_output)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FiberCensus {
    pub fibers: BTreeMap<SketchValue, Vec<Vec<i64>>>,
    pub bound: Option<u128>,
}

impl FiberCensus {
    pub fn count(&self) -> usize {
        self.fibers.len()
    }

    pub fn within_bound(&self) -> bool {
        self.bound.map_or(true, |b| self.count() as u128 <= b)
    }
}

/// Group `domain` by sketch value.
pub fn fiber_census(sketch: &ExtractedSketch, domain: &[Vec<i64>]) -> Result<FiberCensus> {
    let mut fibers: BTreeMap<SketchValue, Vec<Vec<i64>>> = BTreeMap::new();
    for y in domain {
        fibers.entry(sketch_apply(sketch, y)?).or_default().push(y.clone());
    }
    for members in fibers.values_mut() {
        members.sort();
        members.dedup();
    }
    Ok(FiberCensus { fibers, bound: sketch.fiber_bound() })
}

#[derive(Clone, Debug)]
pub struct TransferConfig {
    pub r: f64,
    pub m: usize,
    pub route: StructureRoute,
    pub selection: SelectionConfig,
    pub policy: TruncationPolicy,
    pub decoder_landings: usize,
    /// Kernel enumeration radius for the TV certificates.
    pub d: f64,
    pub controls: usize,
    pub smoothness_trials: usize,
}

impl TransferConfig {
    pub fn route(&self) -> Route {
        match self.route {
            StructureRoute::Exact(_) => Route::Exact,
            StructureRoute::NearOrigin(_) => Route::Mollified,
        }
    }
}

/// TV between the landing laws of `y` and the fiber representative.
#[derive(Clone, Debug, PartialEq)]
pub struct FiberTv {
    pub representative: Vec<i64>,
    pub member: Vec<i64>,
    pub tv: f64,
}

#[derive(Clone, Debug)]
pub struct ExtractionReport {
    pub algorithm: String,
    pub route: Route,
    pub dimension: usize,
    pub fiber_bound: Option<u128>,
    pub max_entry: i64,
    /// `log2(2 / alpha)` for the geometric-mean density of the posteriors.
    pub s_sigma: f64,
    pub selection_distinct: usize,
    pub selection_threshold: f64,
    pub smoothness: Option<f64>,
    pub fibers_met: usize,
    pub fiber_tv: Vec<FiberTv>,
    pub certificate: TranslationReport,
    pub warnings: Vec<String>,
}

impl ExtractionReport {
    pub fn worst_fiber_tv(&self) -> f64 {
        self.fiber_tv.iter().map(|f| f.tv).fold(0.0, f64::max)
    }

    pub fn dimension_limit(&self) -> f64 {
        14.0 * self.s_sigma
    }
}

fn structure_warnings(cs: &ConvolutionStructure) -> Vec<String> {
    match &cs.structure {
        Structure::Lattice(ex) => ex.warnings.clone(),
        Structure::Subspace(ex) => ex.warnings.clone(),
    }
}

/// Mode of the valid outputs, else of all outputs; ties go to the smaller value.
fn modal_output(outs: &[i64], valid: impl Fn(i64) -> bool) -> Option<i64> {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for &o in outs {
        *counts.entry(o).or_default() += 1;
    }
    let pick = |only_valid: bool| {
        counts
            .iter()
            .filter(|(o, _)| !only_valid || valid(**o))
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(o, _)| *o)
    };
    pick(true).or_else(|| pick(false))
}

/// Build the sketch for `alg` on input distribution `i`, its fiber decoder and the certificates.
pub fn extract_sketch(
    alg: &TurnstileAlgorithm,
    i: &SparseMeasure,
    problem: &ProblemSpec,
    cfg: &TransferConfig,
    seed: u64,
) -> Result<(ExtractedSketch, FiberDecoder, ExtractionReport)> {
    if cfg.m == 0 {
        return Err(Error::config("transfer needs at least one prefix block"));
    }
    if i.dim() != alg.n {
        return Err(Error::domain("input distribution and algorithm dimensions differ"));
    }
    let diameter = i.bounding_box().map_or(0.0, |b| {
        b.lo.iter().zip(&b.hi).map(|(l, h)| ((h - l) as f64).powi(2)).sum::<f64>().sqrt()
    });
    if diameter > cfg.d + 1e-12 {
        return Err(Error::precondition(format!(
            "input support diameter {diameter:.3} exceeds D = {}",
            cfg.d
        )));
    }
    let route = cfg.route();
    let mut warnings = Vec::new();
    let smoothness = if route == Route::Mollified {
        if problem.kind() != ProblemKind::Metric {
            return Err(Error::precondition("the mollified route needs a metric problem with a smoothness declaration"));
        }
        let p = problem.smoothness(i, cfg.r, &cfg.policy, cfg.smoothness_trials, seed ^ 0x5eed)?;
        if p < 1.0 - problem.delta {
            return Err(Error::precondition(format!(
                "problem is not smooth: Pr[|f(Y+Z) - f(Y)| <= eps] = {p:.4} < 1 - delta = {:.4}",
                1.0 - problem.delta
            )));
        }
        Some(p)
    } else {
        None
    };
    let mut sel_cfg = cfg.selection.clone();
    sel_cfg.mollify = route == Route::Mollified;
    let selection = select_state_sequence(alg, i, problem, cfg.r, cfg.m, &cfg.policy, &sel_cfg, seed)?;
    let laws: &PosteriorLaws = &selection.laws;
    let cs = convolution_structure(&laws.measures, &cfg.route)?;
    warnings.extend(structure_warnings(&cs));
    let (lattice, matrix, big_q) = match (&cs.structure, &cfg.route) {
        (Structure::Lattice(ex), _) => (Some(ex.lattice.clone()), None, ex.big_q),
        (Structure::Subspace(ex), _) => (None, Some(ex.basis.numerators.clone()), ex.basis.denominator),
    };
    let sketch = ExtractedSketch {
        route,
        n: alg.n,
        lattice,
        matrix,
        big_q,
        sigma: selection.chosen.clone(),
        provenance: format!(
            "algorithm={} R={} M={} seed={} samples={} landings={}",
            alg.name, cfg.r, cfg.m, seed, sel_cfg.samples, cfg.decoder_landings
        ),
    };

    let support: Vec<Vec<i64>> = i.points().map(<[i64]>::to_vec).collect();
    let census = fiber_census(&sketch, &support)?;
    let noise = if route == Route::Mollified {
        Some(GaussianSampler::new(alg.n, cfg.r, &cfg.policy)?)
    } else {
        None
    };
    let last = *sketch.sigma.states.last().unwrap();
    let mut table = BTreeMap::new();
    let mut representative = BTreeMap::new();
    let mut conflicts = Vec::new();
    for (f, (value, members)) in census.fibers.iter().enumerate() {
        let y_f = members[0].clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x1000 + f as u64));
        let outs = landing_outputs(alg, laws, last, &y_f, noise.as_ref(), cfg.decoder_landings, &mut rng)?;
        let o = modal_output(&outs, |o| problem.valid(&y_f, o, 1.0)).unwrap_or(problem.default_output());
        table.insert(value.clone(), o);
        representative.insert(value.clone(), y_f);
        let mut labels: Vec<i64> = members.iter().filter_map(|y| problem.label(y)).collect();
        labels.sort();
        labels.dedup();
        if labels.len() > 1 {
            conflicts.push(FiberConflict { value: value.clone(), members: members.clone(), labels });
        }
    }
    let decoder = FiberDecoder {
        table,
        representative,
        default_output: problem.default_output(),
        conflicts,
    };

    let nu = conditioned_convolution(&laws.measures, cfg.r, route == Route::Mollified)?;
    let mut fiber_tv = Vec::new();
    for members in census.fibers.values() {
        for y in &members[1..] {
            let v: Vec<i64> = y.iter().zip(&members[0]).map(|(a, b)| a - b).collect();
            fiber_tv.push(FiberTv { representative: members[0].clone(), member: y.clone(), tv: tv_distance(&nu, &v) });
        }
    }
    let s_sigma = (2.0 / cs.alpha).log2();
    let certificate = certify_with(cs, &nu, cfg.d, cfg.controls);
    let report = ExtractionReport {
        algorithm: alg.name.clone(),
        route,
        dimension: sketch.dimension(),
        fiber_bound: sketch.fiber_bound(),
        max_entry: sketch.max_entry(),
        s_sigma,
        selection_distinct: selection.distinct,
        selection_threshold: selection.threshold,
        smoothness,
        fibers_met: census.count(),
        fiber_tv,
        certificate,
        warnings,
    };
    Ok((sketch, decoder, report))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub success: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub exact: bool,
    pub trials: usize,
}

const EXACT_SUPPORT_LIMIT: usize = 10_000;

/// `Pr_{Y ~ I}[g(A(Y))` valid for `Y]`, exact on small supports.
pub fn evaluate_sketch(
    sketch: &ExtractedSketch,
    decoder: &FiberDecoder,
    i: &SparseMeasure,
    problem: &ProblemSpec,
    trials: usize,
    seed: u64,
) -> Result<Evaluation> {
    let scale = sketch.route.tolerance_scale();
    let answer = |y: &[i64]| -> Result<bool> {
        let v = sketch_apply(sketch, y)?;
        let o = decoder
            .lookup(&v)
            .ok_or_else(|| Error::precondition(format!("decoder does not cover fiber {v}")))?;
        Ok(problem.valid(y, o, scale))
    };
    if i.len() <= EXACT_SUPPORT_LIMIT {
        let mut good = 0.0;
        for (y, w) in i.iter() {
            if answer(y)? {
                good += w;
            }
        }
        let s = good / i.total_mass();
        return Ok(Evaluation { success: s, ci_low: s, ci_high: s, exact: true, trials: i.len() });
    }
    if trials == 0 {
        return Err(Error::config("Monte Carlo evaluation needs trials >= 1"));
    }
    let pick = WeightedIndex::new(i.masses()).map_err(|e| Error::domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut good = 0usize;
    for _ in 0..trials {
        if answer(i.atom(pick.sample(&mut rng)).0)? {
            good += 1;
        }
    }
    let p = good as f64 / trials as f64;
    let half = 1.96 * (p * (1.0 - p) / trials as f64).sqrt();
    Ok(Evaluation {
        success: p,
        ci_low: (p - half).max(0.0),
        ci_high: (p + half).min(1.0),
        exact: false,
        trials,
    })
}

/// Best success any decoder of this sketch can reach on `i`, over `candidates` outputs.
pub fn information_ceiling(
    sketch: &ExtractedSketch,
    i: &SparseMeasure,
    problem: &ProblemSpec,
    candidates: &[i64],
) -> Result<f64> {
    let support: Vec<Vec<i64>> = i.points().map(<[i64]>::to_vec).collect();
    let census = fiber_census(sketch, &support)?;
    let scale = sketch.route.tolerance_scale();
    let mut total = 0.0;
    for members in census.fibers.values() {
        let best = candidates
            .iter()
            .map(|&o| members.iter().filter(|y| problem.valid(y, o, scale)).map(|y| i.get(y)).sum::<f64>())
            .fold(0.0, f64::max);
        total += best;
    }
    Ok(total / i.total_mass())
}

/// Versioned text record of a sketch and its decoder.
pub fn sketch_report_text(sketch: &ExtractedSketch, decoder: &FiberDecoder) -> String {
    let mut s = String::from("sketch-report v1\n");
    let _ = writeln!(s, "route {}", sketch.route);
    let _ = writeln!(s, "provenance {}", sketch.provenance);
    let _ = writeln!(s, "sigma {}", sketch.sigma.label());
    let _ = writeln!(s, "sigma-probability {:.6e}", sketch.sigma.probability);
    if let Some(l) = &sketch.lattice {
        s.push_str(&l.to_text());
    }
    if let Some(m) = &sketch.matrix {
        let _ = writeln!(s, "integer-matrix rows={} cols={} Q={}", m.len(), sketch.n, sketch.big_q);
        for row in m {
            let _ = writeln!(s, "a {}", row.iter().map(i64::to_string).collect::<Vec<_>>().join(" "));
        }
    }
    let _ = writeln!(s, "decoder fibers={} default={}", decoder.table.len(), decoder.default_output);
    for (v, o) in &decoder.table {
        let rep = &decoder.representative[v];
        let _ = writeln!(s, "g {v} -> {o} rep {rep:?}");
    }
    for c in &decoder.conflicts {
        let _ = writeln!(s, "conflict {} labels {:?}", c.value, c.labels);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::{ExactConfig, NearOriginConfig};
    use crate::streaming::{Target, Zoo};
    use proptest::prelude::*;

    fn exact_cfg(m: usize) -> TransferConfig {
        TransferConfig {
            r: 8.0,
            m,
            route: StructureRoute::Exact(ExactConfig::new(324.0, 2048, 3, 0.1, 8.0)),
            selection: SelectionConfig { samples: 2048, landings: 16, max_candidates: 4, ..Default::default() },
            policy: TruncationPolicy::default(),
            decoder_landings: 64,
            d: 4.0,
            controls: 4,
            smoothness_trials: 2000,
        }
    }

    fn parity_input() -> SparseMeasure {
        SparseMeasure::uniform(2, vec![vec![0, 0], vec![1, 0], vec![1, 1], vec![2, 1]]).unwrap()
    }

    #[test]
    fn parity_end_to_end() {
        let alg = Zoo::Parity.build(2).unwrap();
        let i = parity_input();
        let prob = ProblemSpec::promise(Target::SumParity);
        let (sk, dec, rep) = extract_sketch(&alg, &i, &prob, &exact_cfg(4), 3).unwrap();
        assert_eq!(sk.dimension(), 1);
        let lat = sk.lattice.as_ref().unwrap();
        assert_eq!(lat.denominators, vec![2]);
        let g = lat.generator(0);
        assert!(g.iter().all(|x| (x.abs() - 0.5).abs() < 1e-12));
        assert!(dec.conflicts.is_empty());
        let ev = evaluate_sketch(&sk, &dec, &i, &prob, 0, 1).unwrap();
        assert!(ev.exact);
        assert_eq!(ev.success, 1.0);
        assert_eq!(rep.fibers_met, 2);
        assert!(rep.fiber_tv.iter().all(|f| f.tv < 1.0));
        let odd = sketch_apply(&sk, &[1, 0]).unwrap();
        assert_eq!(odd, SketchValue::Residues(vec![Rat::new(1, 2)]));
        let census = fiber_census(&sk, &crate::numeric::IntBox::cube(2, 1).points().collect::<Vec<_>>()).unwrap();
        assert_eq!(census.count(), 2);
        assert!(census.within_bound());
        // Adversarial problem: parity state says nothing about x_1 mod 3.
        let adv = ProblemSpec::promise(Target::CoordMod { coord: 0, q: 3 });
        let ceiling = information_ceiling(&sk, &i, &adv, &[0, 1]).unwrap();
        assert!(ceiling < 1.0);
        let text = sketch_report_text(&sk, &dec);
        assert!(text.starts_with("sketch-report v1"));
    }

    #[test]
    fn constant_scenario_is_empty() {
        let alg = Zoo::Constant.build(2).unwrap();
        let i = parity_input();
        let prob = ProblemSpec::promise(Target::Constant(0));
        let (sk, dec, _) = extract_sketch(&alg, &i, &prob, &exact_cfg(2), 1).unwrap();
        assert_eq!(sk.dimension(), 0);
        assert_eq!(dec.table.len(), 1);
        assert_eq!(evaluate_sketch(&sk, &dec, &i, &prob, 0, 1).unwrap().success, 1.0);
        assert!(sketch_apply(&sk, &[0, 0]).unwrap().is_zero());
    }

    #[test]
    fn mod3_scenario() {
        let alg = Zoo::ModCounter { q: 3 }.build(2).unwrap();
        let i = SparseMeasure::uniform(2, vec![vec![0, 0], vec![1, 0], vec![2, 0], vec![3, 0]]).unwrap();
        let prob = ProblemSpec::promise(Target::CoordMod { coord: 0, q: 3 });
        let (sk, dec, _) = extract_sketch(&alg, &i, &prob, &exact_cfg(4), 5).unwrap();
        let lat = sk.lattice.as_ref().unwrap();
        assert_eq!(lat.denominators, vec![3]);
        let g = lat.generator(0);
        assert!((g[0].abs() - 1.0 / 3.0).abs() < 1e-12 && g[1] == 0.0);
        assert_eq!(evaluate_sketch(&sk, &dec, &i, &prob, 0, 1).unwrap().success, 1.0);
    }

    #[test]
    fn mollified_parity_with_smooth_metric() {
        let alg = Zoo::Parity.build(2).unwrap();
        let i = parity_input();
        let prob = ProblemSpec::new(Target::ThresholdedNorm { cap: 2.0 }, 2.0, 0.05).unwrap();
        let mut no = NearOriginConfig::new(324.0, 0.1, 1.0, 8, 8.0);
        no.allow_override = true;
        let cfg = TransferConfig { route: StructureRoute::NearOrigin(no), ..exact_cfg(4) };
        let (sk, dec, rep) = extract_sketch(&alg, &i, &prob, &cfg, 2).unwrap();
        assert!(sk.max_entry() <= 8);
        assert!(rep.smoothness.unwrap() >= 0.95);
        assert!(evaluate_sketch(&sk, &dec, &i, &prob, 0, 1).unwrap().success >= 0.9);
        // A promise problem is rejected on this route.
        let bad = ProblemSpec::promise(Target::SumParity);
        assert!(extract_sketch(&alg, &i, &bad, &cfg, 2).is_err());
    }

    fn toy_sketch() -> ExtractedSketch {
        let lat = SketchLattice::from_text(
            "sketch-lattice n=2 m=2\nt 1/2 1/2\nt 1/3 0\nk 2 3\nc\nc 0\nspan_error 0\n",
        )
        .unwrap();
        ExtractedSketch {
            route: Route::Exact,
            n: 2,
            lattice: Some(lat),
            matrix: None,
            big_q: 6,
            sigma: StateSequence {
                states: vec![0],
                probability: 1.0,
                per_block_densities: vec![],
                success_estimate: 1.0,
                empirical_probability: 1.0,
            },
            provenance: String::new(),
        }
    }

    proptest! {
        #[test]
        fn sketch_is_additive(a in proptest::collection::vec(-50i64..50, 2), b in proptest::collection::vec(-50i64..50, 2)) {
            let mut sk = toy_sketch();
            let sum: Vec<i64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let lhs = sketch_apply(&sk, &sum).unwrap();
            let rhs = sketch_add(&sketch_apply(&sk, &a).unwrap(), &sketch_apply(&sk, &b).unwrap()).unwrap();
            prop_assert_eq!(lhs, rhs);
            sk.route = Route::Mollified;
            sk.matrix = Some(vec![vec![3, -2], vec![0, 5]]);
            let lhs = sketch_apply(&sk, &sum).unwrap();
            let rhs = sketch_add(&sketch_apply(&sk, &a).unwrap(), &sketch_apply(&sk, &b).unwrap()).unwrap();
            prop_assert_eq!(lhs, rhs);
        }
    }
}
