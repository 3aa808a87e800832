//! Turnstile streams, deterministic finite-state algorithms (uniform and
//! block-indexed), the exact and mollified stream distributions, and the
//! posterior laws of the Gaussian prefix blocks given a state sequence.

use crate::dgauss::{DiscreteGaussian, GaussianSampler, TruncationPolicy};
use crate::measure::{density_certificate, DensePieceCertificate, SparseMeasure};
use crate::numeric::{comp_sum, norm2_i};
use crate::{Error, Result};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Update {
    /// Zero-based coordinate.
    pub coordinate: usize,
    /// `+1` or `-1`.
    pub sign: i8,
}

impl Update {
    pub fn new(coordinate: usize, sign: i8) -> Result<Self> {
        if sign != 1 && sign != -1 {
            return Err(Error::domain("update sign must be +1 or -1"));
        }
        Ok(Update { coordinate, sign })
    }

    fn code(&self) -> usize {
        2 * self.coordinate + usize::from(self.sign < 0)
    }
}

/// `|v_i|` updates of sign `sgn(v_i)` on coordinate `i`, coordinates ascending.
pub fn canonical_realization(v: &[i64]) -> Vec<Update> {
    let mut out = Vec::with_capacity(v.iter().map(|x| x.unsigned_abs() as usize).sum());
    for (i, &x) in v.iter().enumerate() {
        let sign = if x < 0 { -1 } else { 1 };
        for _ in 0..x.unsigned_abs() {
            out.push(Update { coordinate: i, sign });
        }
    }
    out
}

/// A stream split into blocks; the block index is the time index seen by
/// non-uniform algorithms.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stream {
    pub n: usize,
    pub blocks: Vec<Vec<Update>>,
}

impl Stream {
    pub fn new(n: usize) -> Self {
        Stream { n, blocks: Vec::new() }
    }

    pub fn single(n: usize, updates: Vec<Update>) -> Self {
        Stream { n, blocks: vec![updates] }
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Net frequency vector after all updates.
    pub fn frequency(&self) -> Vec<i64> {
        let mut f = vec![0i64; self.n];
        for u in self.blocks.iter().flatten() {
            f[u.coordinate] += u.sign as i64;
        }
        f
    }

    /// One `coordinate sign` pair per line (coordinates one-based), `#` lines between blocks.
    pub fn to_text(&self) -> String {
        let mut s = format!("# stream n={} blocks={}\n", self.n, self.blocks.len());
        for (b, block) in self.blocks.iter().enumerate() {
            let _ = writeln!(s, "# block {b}");
            for u in block {
                let _ = writeln!(s, "{} {}", u.coordinate + 1, if u.sign > 0 { '+' } else { '-' });
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut n = None;
        let mut blocks: Vec<Vec<Update>> = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(h) = rest.strip_prefix("stream") {
                    for tok in h.split_whitespace() {
                        if let Some(v) = tok.strip_prefix("n=") {
                            n = Some(v.parse::<usize>().map_err(|e| Error::Parse {
                                line: ln + 1,
                                msg: e.to_string(),
                            })?);
                        }
                    }
                } else if rest.starts_with("block") {
                    blocks.push(Vec::new());
                }
                continue;
            }
            let n = n.ok_or(Error::Parse { line: ln + 1, msg: "missing stream header".into() })?;
            let mut it = line.split_whitespace();
            let (c, s) = (it.next(), it.next());
            let c: usize = c
                .and_then(|c| c.parse().ok())
                .filter(|&c| c >= 1 && c <= n)
                .ok_or(Error::Parse { line: ln + 1, msg: format!("bad coordinate in {line:?}") })?;
            let sign = match s {
                Some("+") => 1,
                Some("-") => -1,
                _ => return Err(Error::Parse { line: ln + 1, msg: format!("bad sign in {line:?}") }),
            };
            if blocks.is_empty() {
                blocks.push(Vec::new());
            }
            blocks.last_mut().unwrap().push(Update { coordinate: c - 1, sign });
        }
        let n = n.ok_or(Error::Parse { line: 1, msg: "missing stream header".into() })?;
        Ok(Stream { n, blocks })
    }
}

/// Which transition table applies at each block index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Schedule {
    Uniform,
    /// Rule `pattern[b % len]` at block `b`.
    Periodic(Vec<usize>),
    /// Rule `rules[b]`; blocks past the end are outside the horizon.
    Fixed(Vec<usize>),
}

/// Deterministic finite-state turnstile algorithm given by transition tables.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TurnstileAlgorithm {
    pub name: String,
    pub n: usize,
    pub states: u32,
    pub initial_state: u32,
    /// `rules[r][state * 2n + code]`, with code `2 i` for `+e_i` and `2 i + 1` for `-e_i`.
    pub rules: Vec<Vec<u32>>,
    pub schedule: Schedule,
    pub outputs: Vec<i64>,
}

impl TurnstileAlgorithm {
    pub fn new(
        name: impl Into<String>,
        n: usize,
        states: u32,
        initial_state: u32,
        rules: Vec<Vec<u32>>,
        schedule: Schedule,
        outputs: Vec<i64>,
    ) -> Result<Self> {
        if n == 0 || states == 0 {
            return Err(Error::domain("algorithm needs n >= 1 and at least one state"));
        }
        if initial_state >= states || outputs.len() != states as usize {
            return Err(Error::domain("initial state or output table out of range"));
        }
        if rules.is_empty() {
            return Err(Error::domain("algorithm needs at least one rule"));
        }
        let width = states as usize * 2 * n;
        for (r, t) in rules.iter().enumerate() {
            if t.len() != width {
                return Err(Error::domain(format!("rule {r} has {} entries, expected {width}", t.len())));
            }
            if let Some(bad) = t.iter().find(|&&s| s >= states) {
                return Err(Error::domain(format!("rule {r} maps to state {bad} >= {states}")));
            }
        }
        let used = match &schedule {
            Schedule::Uniform => vec![0],
            Schedule::Periodic(p) | Schedule::Fixed(p) => p.clone(),
        };
        if used.iter().any(|&r| r >= rules.len()) || matches!(&schedule, Schedule::Periodic(p) if p.is_empty()) {
            return Err(Error::domain("schedule references a missing rule"));
        }
        Ok(TurnstileAlgorithm { name: name.into(), n, states, initial_state, rules, schedule, outputs })
    }

    /// `S` with `states <= 2^S`.
    pub fn state_bits(&self) -> u32 {
        (self.states as u64).next_power_of_two().trailing_zeros()
    }

    pub fn is_uniform(&self) -> bool {
        match &self.schedule {
            Schedule::Uniform => true,
            Schedule::Periodic(p) => p.iter().all(|&r| r == p[0]),
            Schedule::Fixed(p) => p.iter().all(|&r| r == p[0]),
        }
    }

    pub fn rule_at(&self, block: usize) -> Result<usize> {
        match &self.schedule {
            Schedule::Uniform => Ok(0),
            Schedule::Periodic(p) => Ok(p[block % p.len()]),
            Schedule::Fixed(p) => p.get(block).copied().ok_or_else(|| {
                Error::domain(format!("block {block} beyond the horizon of {} blocks", p.len()))
            }),
        }
    }

    pub fn step(&self, rule: usize, state: u32, u: Update) -> u32 {
        self.rules[rule][state as usize * 2 * self.n + u.code()]
    }

    pub fn fold_block(&self, state: u32, block: usize, updates: &[Update]) -> Result<u32> {
        let rule = self.rule_at(block)?;
        let mut s = state;
        for &u in updates {
            if u.coordinate >= self.n {
                return Err(Error::domain(format!("update coordinate {} out of range", u.coordinate)));
            }
            s = self.step(rule, s, u);
        }
        Ok(s)
    }

    /// State reached from `state` by `can(v)` during block `block`.
    pub fn fold_vector(&self, state: u32, block: usize, v: &[i64]) -> Result<u32> {
        let rule = self.rule_at(block)?;
        let mut s = state;
        for (i, &x) in v.iter().enumerate() {
            let u = Update { coordinate: i, sign: if x < 0 { -1 } else { 1 } };
            for _ in 0..x.unsigned_abs() {
                s = self.step(rule, s, u);
            }
        }
        Ok(s)
    }

    pub fn output(&self, state: u32) -> i64 {
        self.outputs[state as usize]
    }
}

/// Final state and output.
pub fn run(alg: &TurnstileAlgorithm, stream: &Stream) -> Result<(u32, i64)> {
    let trace = run_trace(alg, stream)?;
    let s = *trace.last().unwrap();
    Ok((s, alg.output(s)))
}

/// Run a flat update list as block 0.
pub fn run_updates(alg: &TurnstileAlgorithm, updates: &[Update]) -> Result<(u32, i64)> {
    let s = alg.fold_block(alg.initial_state, 0, updates)?;
    Ok((s, alg.output(s)))
}

/// States `sigma_0, ..., sigma_B` at the block boundaries.
pub fn run_trace(alg: &TurnstileAlgorithm, stream: &Stream) -> Result<Vec<u32>> {
    if stream.n != alg.n {
        return Err(Error::domain("stream and algorithm dimensions differ"));
    }
    let mut states = vec![alg.initial_state];
    let mut s = alg.initial_state;
    for (b, block) in stream.blocks.iter().enumerate() {
        s = alg.fold_block(s, b, block)?;
        states.push(s);
    }
    Ok(states)
}

/// Reference algorithms with predictable extraction outcomes.
#[derive(Clone, Debug, PartialEq)]
pub enum Zoo {
    Constant,
    /// Coordinate sum mod 2.
    Parity,
    /// First coordinate mod `q`; outputs 0 when the residue is 0 and 1 otherwise.
    ModCounter { q: u32 },
    /// Records the frequency vector exactly inside `[-b, b]^n`, with an absorbing overflow state.
    IdentityBox { b: i64 },
    /// Parity on even blocks, first coordinate mod 3 on odd blocks; outputs the parity bit.
    Alternating,
}

impl Zoo {
    pub const NAMES: [&'static str; 5] = ["constant", "parity", "mod-counter", "identity-box", "alternating"];

    pub fn parse(name: &str, param: Option<i64>) -> Result<Self> {
        match name {
            "constant" => Ok(Zoo::Constant),
            "parity" => Ok(Zoo::Parity),
            "mod-counter" => {
                let q = param.unwrap_or(3);
                if !(2..=64).contains(&q) {
                    return Err(Error::config("mod-counter modulus must lie in [2, 64]"));
                }
                Ok(Zoo::ModCounter { q: q as u32 })
            }
            "identity-box" => {
                let b = param.unwrap_or(2);
                if !(0..=16).contains(&b) {
                    return Err(Error::config("identity-box radius must lie in [0, 16]"));
                }
                Ok(Zoo::IdentityBox { b })
            }
            "alternating" => Ok(Zoo::Alternating),
            other => Err(Error::Usage(format!(
                "unknown algorithm {other:?}; known: {}",
                Zoo::NAMES.join(", ")
            ))),
        }
    }

    pub fn build(&self, n: usize) -> Result<TurnstileAlgorithm> {
        let table = |states: u32, f: &dyn Fn(u32, Update) -> u32| -> Vec<u32> {
            let mut t = Vec::with_capacity(states as usize * 2 * n);
            for s in 0..states {
                for i in 0..n {
                    t.push(f(s, Update { coordinate: i, sign: 1 }));
                    t.push(f(s, Update { coordinate: i, sign: -1 }));
                }
            }
            t
        };
        match *self {
            Zoo::Constant => TurnstileAlgorithm::new("constant", n, 1, 0, vec![vec![0; 2 * n]], Schedule::Uniform, vec![0]),
            Zoo::Parity => {
                let t = table(2, &|s, _| s ^ 1);
                TurnstileAlgorithm::new("parity", n, 2, 0, vec![t], Schedule::Uniform, vec![0, 1])
            }
            Zoo::ModCounter { q } => {
                let t = table(q, &|s, u| {
                    if u.coordinate != 0 {
                        s
                    } else if u.sign > 0 {
                        (s + 1) % q
                    } else {
                        (s + q - 1) % q
                    }
                });
                let outputs = (0..q).map(|s| i64::from(s != 0)).collect();
                TurnstileAlgorithm::new(format!("mod-counter-{q}"), n, q, 0, vec![t], Schedule::Uniform, outputs)
            }
            Zoo::IdentityBox { b } => {
                let side = (2 * b + 1) as u64;
                let cells = side.pow(n as u32);
                if cells >= 1 << 20 {
                    return Err(Error::budget("identity box has too many states"));
                }
                let sink = cells as u32;
                let decode = |s: u32| -> Vec<i64> {
                    let mut s = s as u64;
                    let mut x = vec![0i64; n];
                    for xi in x.iter_mut().rev() {
                        *xi = (s % side) as i64 - b;
                        s /= side;
                    }
                    x
                };
                let encode = |x: &[i64]| -> u32 {
                    x.iter().fold(0u64, |acc, &xi| acc * side + (xi + b) as u64) as u32
                };
                let t = table(sink + 1, &|s, u| {
                    if s == sink {
                        return sink;
                    }
                    let mut x = decode(s);
                    x[u.coordinate] += u.sign as i64;
                    if x[u.coordinate].abs() > b {
                        sink
                    } else {
                        encode(&x)
                    }
                });
                let outputs = (0..=sink)
                    .map(|s| if s == sink { -1 } else { decode(s).iter().sum::<i64>().rem_euclid(2) })
                    .collect();
                let origin = encode(&vec![0; n]);
                TurnstileAlgorithm::new(format!("identity-box-{b}"), n, sink + 1, origin, vec![t], Schedule::Uniform, outputs)
            }
            Zoo::Alternating => {
                // State a + 2 b with a the parity bit and b the residue mod 3.
                let even = table(6, &|s, _| s ^ 1);
                let odd = table(6, &|s, u| {
                    let (a, b) = (s % 2, s / 2);
                    let b = if u.coordinate != 0 {
                        b
                    } else if u.sign > 0 {
                        (b + 1) % 3
                    } else {
                        (b + 2) % 3
                    };
                    a + 2 * b
                });
                TurnstileAlgorithm::new(
                    "alternating",
                    n,
                    6,
                    0,
                    vec![even, odd],
                    Schedule::Periodic(vec![0, 1]),
                    vec![0, 1, 0, 1, 0, 1],
                )
            }
        }
    }
}

/// One draw from the exact or mollified stream distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamSample {
    pub stream: Stream,
    pub prefix: Vec<Vec<i64>>,
    pub target: Vec<i64>,
    pub noise: Option<Vec<i64>>,
    /// `M max ||X_i||_1 + ||last block||_1`.
    pub length_bound: usize,
}

/// Blocks `can(X_1), ..., can(X_M), can(Y + Z - sum X_i)`.
pub fn assemble_stream(prefix: &[Vec<i64>], target: &[i64], noise: Option<&[i64]>) -> StreamSample {
    let n = target.len();
    let mut last: Vec<i64> = target.to_vec();
    if let Some(z) = noise {
        for i in 0..n {
            last[i] += z[i];
        }
    }
    for x in prefix {
        for i in 0..n {
            last[i] -= x[i];
        }
    }
    let mut blocks: Vec<Vec<Update>> = prefix.iter().map(|x| canonical_realization(x)).collect();
    blocks.push(canonical_realization(&last));
    let l1 = |v: &[i64]| v.iter().map(|x| x.unsigned_abs() as usize).sum::<usize>();
    let max_prefix = prefix.iter().map(|x| l1(x)).max().unwrap_or(0);
    StreamSample {
        stream: Stream { n, blocks },
        prefix: prefix.to_vec(),
        target: target.to_vec(),
        noise: noise.map(<[i64]>::to_vec),
        length_bound: prefix.len() * max_prefix + l1(&last),
    }
}

/// Reusable sampler for the stream distributions.
#[derive(Clone, Debug)]
pub struct StreamSampler {
    pub m: usize,
    pub mollify: bool,
    gauss: GaussianSampler,
    targets: SparseMeasure,
    pick: WeightedIndex<f64>,
}

impl StreamSampler {
    pub fn new(i: &SparseMeasure, r: f64, m: usize, policy: &TruncationPolicy, mollify: bool) -> Result<Self> {
        if i.is_empty() {
            return Err(Error::domain("input distribution is empty"));
        }
        let gauss = GaussianSampler::new(i.dim(), r, policy)?;
        let pick = WeightedIndex::new(i.masses()).map_err(|e| Error::domain(e.to_string()))?;
        Ok(StreamSampler { m, mollify, gauss, targets: i.clone(), pick })
    }

    pub fn sample<G: Rng + ?Sized>(&self, rng: &mut G) -> StreamSample {
        let prefix: Vec<Vec<i64>> = (0..self.m).map(|_| self.gauss.sample(rng)).collect();
        let y = self.targets.atom(self.pick.sample(rng)).0.to_vec();
        let z = self.mollify.then(|| self.gauss.sample(rng));
        assemble_stream(&prefix, &y, z.as_deref())
    }
}

pub fn exact_stream_sample(i: &SparseMeasure, r: f64, m: usize, policy: &TruncationPolicy, seed: u64) -> Result<StreamSample> {
    let s = StreamSampler::new(i, r, m, policy, false)?;
    Ok(s.sample(&mut ChaCha8Rng::seed_from_u64(seed)))
}

pub fn mollified_stream_sample(i: &SparseMeasure, r: f64, m: usize, policy: &TruncationPolicy, seed: u64) -> Result<StreamSample> {
    let s = StreamSampler::new(i, r, m, policy, true)?;
    Ok(s.sample(&mut ChaCha8Rng::seed_from_u64(seed)))
}

/// A state sequence `sigma_0, ..., sigma_M` with its conditioning data.
#[derive(Clone, Debug, PartialEq)]
pub struct StateSequence {
    pub states: Vec<u32>,
    /// `prod beta_i`.
    pub probability: f64,
    pub per_block_densities: Vec<f64>,
    pub success_estimate: f64,
    pub empirical_probability: f64,
}

impl StateSequence {
    pub fn label(&self) -> String {
        self.states.iter().map(u32::to_string).collect::<Vec<_>>().join("-")
    }
}

#[derive(Clone, Debug)]
pub struct PosteriorLaws {
    pub measures: Vec<SparseMeasure>,
    pub betas: Vec<f64>,
    pub certificates: Vec<DensePieceCertificate>,
    pub probability: f64,
}

/// Caches the end state of `can(x)` for every `x` in the truncated Gaussian support.
#[derive(Clone, Debug)]
pub struct PosteriorEngine<'a> {
    pub alg: &'a TurnstileAlgorithm,
    pub r: f64,
    pub gamma: SparseMeasure,
    ends: HashMap<(usize, u32), Vec<u32>>,
}

impl<'a> PosteriorEngine<'a> {
    pub fn new(alg: &'a TurnstileAlgorithm, r: f64, policy: &TruncationPolicy) -> Result<Self> {
        let gamma = DiscreteGaussian::new(alg.n, r)?.truncated(policy)?;
        Ok(PosteriorEngine { alg, r, gamma, ends: HashMap::new() })
    }

    fn ends(&mut self, block: usize, start: u32) -> Result<&Vec<u32>> {
        let rule = self.alg.rule_at(block)?;
        if !self.ends.contains_key(&(rule, start)) {
            let e: Vec<u32> = self
                .gamma
                .points()
                .map(|x| self.alg.fold_vector(start, block, x))
                .collect::<Result<_>>()?;
            self.ends.insert((rule, start), e);
        }
        Ok(&self.ends[&(rule, start)])
    }

    /// Law of `X_i` given `sigma_{i-1} -> sigma_i`, with its mass `beta_i`.
    pub fn block_posterior(&mut self, block: usize, from: u32, to: u32) -> Result<(SparseMeasure, f64)> {
        let ends = self.ends(block, from)?.clone();
        let total = self.gamma.total_mass();
        let atoms: Vec<(Vec<i64>, f64)> = self
            .gamma
            .iter()
            .zip(&ends)
            .filter(|(_, &e)| e == to)
            .map(|((x, m), _)| (x.to_vec(), m))
            .collect();
        let beta = comp_sum(atoms.iter().map(|a| a.1)) / total;
        if atoms.is_empty() || beta <= 0.0 {
            return Err(Error::precondition(format!(
                "impossible transition {from} -> {to} at block {block}"
            )));
        }
        let mu = SparseMeasure::from_atoms(self.alg.n, atoms)?.normalized();
        Ok((mu, beta))
    }

    pub fn posterior_laws(&mut self, sigma: &[u32]) -> Result<PosteriorLaws> {
        if sigma.is_empty() || sigma[0] != self.alg.initial_state {
            return Err(Error::precondition("state sequence must start at the initial state"));
        }
        let mut measures = Vec::new();
        let mut betas = Vec::new();
        let mut certificates = Vec::new();
        for i in 1..sigma.len() {
            let (mu, beta) = self.block_posterior(i - 1, sigma[i - 1], sigma[i])?;
            let cert = density_certificate(&mu, self.r)?;
            if cert.alpha < beta * (1.0 - 1e-6) {
                return Err(Error::bound("posterior density", beta, cert.alpha));
            }
            measures.push(mu);
            betas.push(beta);
            certificates.push(cert);
        }
        let probability = betas.iter().product();
        Ok(PosteriorLaws { measures, betas, certificates, probability })
    }
}

/// Posterior laws of the prefix blocks given `sigma` (length `M + 1`).
pub fn posterior_laws(
    alg: &TurnstileAlgorithm,
    sigma: &[u32],
    r: f64,
    m: usize,
    policy: &TruncationPolicy,
) -> Result<PosteriorLaws> {
    if sigma.len() != m + 1 {
        return Err(Error::domain(format!("state sequence has {} states, expected {}", sigma.len(), m + 1)));
    }
    PosteriorEngine::new(alg, r, policy)?.posterior_laws(sigma)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProblemKind {
    Metric,
    Promise,
    Relation,
}

/// Built-in target functions on `Z^n`.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// Promise problem with one label everywhere.
    Constant(i64),
    /// Promise: coordinate sum mod 2.
    SumParity,
    /// Promise: 0 when `y_coord = 0 mod q`, 1 otherwise.
    CoordMod { coord: usize, q: i64 },
    /// Metric: `min(||y||_2, cap)`, outputs read as reals.
    ThresholdedNorm { cap: f64 },
    /// Relation: output `o` is valid when `(o - y_coord) mod q < width`.
    ResidueWindow { coord: usize, q: i64, width: i64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProblemSpec {
    pub target: Target,
    pub epsilon: f64,
    pub delta: f64,
}

impl ProblemSpec {
    pub fn new(target: Target, epsilon: f64, delta: f64) -> Result<Self> {
        match &target {
            Target::Constant(c) if !(0..=1).contains(c) => {
                return Err(Error::config("promise labels must be 0 or 1"))
            }
            Target::CoordMod { q, .. } if *q < 2 => return Err(Error::config("modulus must be at least 2")),
            Target::ResidueWindow { q, width, .. } if *q < 1 || *width < 1 => {
                return Err(Error::config("relation window must be nonempty"))
            }
            Target::ThresholdedNorm { cap } if !(*cap > 0.0) => {
                return Err(Error::config("norm cap must be positive"))
            }
            _ => {}
        }
        if !(epsilon >= 0.0) || !(0.0..1.0).contains(&delta) {
            return Err(Error::config("need epsilon >= 0 and delta in [0, 1)"));
        }
        Ok(ProblemSpec { target, epsilon, delta })
    }

    pub fn promise(target: Target) -> Self {
        ProblemSpec { target, epsilon: 0.0, delta: 0.0 }
    }

    pub fn kind(&self) -> ProblemKind {
        match self.target {
            Target::Constant(_) | Target::SumParity | Target::CoordMod { .. } => ProblemKind::Promise,
            Target::ThresholdedNorm { .. } => ProblemKind::Metric,
            Target::ResidueWindow { .. } => ProblemKind::Relation,
        }
    }

    /// Promised label, if any.
    pub fn label(&self, y: &[i64]) -> Option<i64> {
        match self.target {
            Target::Constant(c) => Some(c),
            Target::SumParity => Some(y.iter().sum::<i64>().rem_euclid(2)),
            Target::CoordMod { coord, q } => Some(i64::from(y[coord].rem_euclid(q) != 0)),
            _ => None,
        }
    }

    /// Metric value `f(y)`.
    pub fn value(&self, y: &[i64]) -> Option<f64> {
        match self.target {
            Target::ThresholdedNorm { cap } => Some(norm2_i(y).min(cap)),
            _ => None,
        }
    }

    /// Is `o` a valid answer at `y`; metric tolerance is `scale * epsilon`.
    pub fn valid(&self, y: &[i64], o: i64, scale: f64) -> bool {
        match self.target {
            Target::ThresholdedNorm { .. } => {
                (o as f64 - self.value(y).unwrap()).abs() <= scale * self.epsilon + 1e-12
            }
            Target::ResidueWindow { coord, q, width } => (o - y[coord]).rem_euclid(q) < width,
            _ => self.label(y).map_or(true, |l| l == o),
        }
    }

    /// First element of the output set, used for fibers outside the input support.
    pub fn default_output(&self) -> i64 {
        match self.target {
            Target::Constant(c) => c,
            _ => 0,
        }
    }

    /// Empirical `Pr[|f(Y + Z) - f(Y)| <= epsilon]` for metric problems.
    pub fn smoothness(&self, i: &SparseMeasure, r: f64, policy: &TruncationPolicy, trials: usize, seed: u64) -> Result<f64> {
        if self.kind() != ProblemKind::Metric {
            return Err(Error::precondition("smoothness is declared only for metric problems"));
        }
        let gauss = GaussianSampler::new(i.dim(), r, policy)?;
        let pick = WeightedIndex::new(i.masses()).map_err(|e| Error::domain(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut good = 0usize;
        for _ in 0..trials {
            let y = i.atom(pick.sample(&mut rng)).0;
            let z = gauss.sample(&mut rng);
            let yz: Vec<i64> = y.iter().zip(&z).map(|(a, b)| a + b).collect();
            if (self.value(&yz).unwrap() - self.value(y).unwrap()).abs() <= self.epsilon + 1e-12 {
                good += 1;
            }
        }
        Ok(good as f64 / trials as f64)
    }
}

#[derive(Clone, Debug)]
pub struct SelectionConfig {
    pub samples: usize,
    /// Threshold is this factor times the uniform share `1 / (distinct sequences seen)`.
    pub threshold_factor: f64,
    /// Sequences seen fewer times are never selected.
    pub min_count: usize,
    /// Re-sampled landings per target when estimating `q_sigma`.
    pub landings: usize,
    pub mollify: bool,
    /// Cap on the number of candidates whose success is estimated, most frequent first.
    pub max_candidates: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            samples: 4096,
            threshold_factor: 0.5,
            min_count: 2,
            landings: 64,
            mollify: false,
            max_candidates: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Selection {
    pub chosen: StateSequence,
    pub laws: PosteriorLaws,
    pub distinct: usize,
    pub threshold: f64,
    /// `(states, count, q_sigma)` for every evaluated candidate.
    pub candidates: Vec<(Vec<u32>, usize, f64)>,
}

/// Sample landing outputs: `X_i ~ mu_i`, last block `y + Z - sum X_i` run from `sigma_M`.
pub fn landing_outputs<G: Rng + ?Sized>(
    alg: &TurnstileAlgorithm,
    laws: &PosteriorLaws,
    last_state: u32,
    y: &[i64],
    noise: Option<&GaussianSampler>,
    count: usize,
    rng: &mut G,
) -> Result<Vec<i64>> {
    let pickers: Vec<WeightedIndex<f64>> = laws
        .measures
        .iter()
        .map(|mu| WeightedIndex::new(mu.masses()).map_err(|e| Error::domain(e.to_string())))
        .collect::<Result<_>>()?;
    let m = laws.measures.len();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut last = y.to_vec();
        for (mu, p) in laws.measures.iter().zip(&pickers) {
            let x = mu.atom(p.sample(rng)).0;
            for (l, xi) in last.iter_mut().zip(x) {
                *l -= xi;
            }
        }
        if let Some(g) = noise {
            for (l, zi) in last.iter_mut().zip(g.sample(rng)) {
                *l += zi;
            }
        }
        let s = alg.fold_vector(last_state, m, &last)?;
        out.push(alg.output(s));
    }
    Ok(out)
}

/// Pick the state sequence with the best estimated success among the frequent ones.
#[allow(clippy::too_many_arguments)]
pub fn select_state_sequence(
    alg: &TurnstileAlgorithm,
    i: &SparseMeasure,
    problem: &ProblemSpec,
    r: f64,
    m: usize,
    policy: &TruncationPolicy,
    cfg: &SelectionConfig,
    seed: u64,
) -> Result<Selection> {
    if cfg.samples == 0 {
        return Err(Error::config("selection needs at least one sample"));
    }
    let sampler = StreamSampler::new(i, r, m, policy, cfg.mollify)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts: BTreeMap<Vec<u32>, usize> = BTreeMap::new();
    for _ in 0..cfg.samples {
        let s = sampler.sample(&mut rng);
        let mut trace = run_trace(alg, &s.stream)?;
        trace.pop();
        *counts.entry(trace).or_default() += 1;
    }
    let distinct = counts.len();
    let threshold = cfg.threshold_factor / distinct as f64;
    let mut eligible: Vec<(Vec<u32>, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= cfg.min_count && *c as f64 / cfg.samples as f64 >= threshold)
        .collect();
    if eligible.is_empty() {
        return Err(Error::precondition(format!(
            "state-sequence selection failed: {distinct} distinct sequences in {} samples, none reaches {} hits and share {threshold:.3e}",
            cfg.samples, cfg.min_count
        )));
    }
    eligible.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    eligible.truncate(cfg.max_candidates.max(1));
    let noise = if cfg.mollify { Some(GaussianSampler::new(i.dim(), r, policy)?) } else { None };
    let mut engine = PosteriorEngine::new(alg, r, policy)?;
    let mut best: Option<(f64, Vec<u32>, usize, PosteriorLaws)> = None;
    let mut candidates = Vec::new();
    for (k, (sigma, count)) in eligible.into_iter().enumerate() {
        let laws = engine.posterior_laws(&sigma)?;
        let mut crng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(k as u64 + 1)));
        let last = *sigma.last().unwrap();
        let mut q = 0.0;
        for (y, w) in i.iter() {
            let outs = landing_outputs(alg, &laws, last, y, noise.as_ref(), cfg.landings, &mut crng)?;
            let ok = outs.iter().filter(|&&o| problem.valid(y, o, 1.0)).count();
            q += w * ok as f64 / cfg.landings as f64;
        }
        q /= i.total_mass();
        candidates.push((sigma.clone(), count, q));
        let better = match &best {
            None => true,
            Some((bq, bs, _, _)) => q > *bq || (q == *bq && sigma < *bs),
        };
        if better {
            best = Some((q, sigma, count, laws));
        }
    }
    let (q, states, count, laws) = best.unwrap();
    candidates.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(Selection {
        chosen: StateSequence {
            states,
            probability: laws.probability,
            per_block_densities: laws.betas.clone(),
            success_estimate: q,
            empirical_probability: count as f64 / cfg.samples as f64,
        },
        laws,
        distinct,
        threshold,
        candidates,
    })
}

/// Per-coordinate maximum running deficit, the least padding that makes the stream strict.
pub fn min_strict_padding(stream: &Stream) -> Vec<i64> {
    let mut f = vec![0i64; stream.n];
    let mut need = vec![0i64; stream.n];
    for u in stream.blocks.iter().flatten() {
        f[u.coordinate] += u.sign as i64;
        need[u.coordinate] = need[u.coordinate].max(-f[u.coordinate]);
    }
    need
}

/// Prepend `pad_i` positive updates on each coordinate to the first block.
pub fn strict_padding(stream: &Stream, pad: &[i64]) -> Result<Stream> {
    if pad.len() != stream.n || pad.iter().any(|&p| p < 0) {
        return Err(Error::domain("padding must be a nonnegative vector of the stream dimension"));
    }
    let mut out = stream.clone();
    let prefix = canonical_realization(pad);
    if out.blocks.is_empty() {
        out.blocks.push(Vec::new());
    }
    out.blocks[0].splice(0..0, prefix);
    let mut f = vec![0i64; stream.n];
    for (t, u) in out.blocks.iter().flatten().enumerate() {
        f[u.coordinate] += u.sign as i64;
        if f[u.coordinate] < 0 {
            return Err(Error::precondition(format!(
                "padding too small: prefix of length {} has coordinate {} at {}",
                t + 1,
                u.coordinate + 1,
                f[u.coordinate]
            )));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parity() -> TurnstileAlgorithm {
        Zoo::Parity.build(2).unwrap()
    }

    #[test]
    fn canonical_examples() {
        assert!(canonical_realization(&[0, 0]).is_empty());
        let c = canonical_realization(&[2, -1]);
        assert_eq!(
            c,
            vec![
                Update { coordinate: 0, sign: 1 },
                Update { coordinate: 0, sign: 1 },
                Update { coordinate: 1, sign: -1 }
            ]
        );
    }

    #[test]
    fn run_examples() {
        let p = parity();
        assert_eq!(run(&p, &Stream::new(2)).unwrap(), (0, 0));
        assert_eq!(run_updates(&p, &canonical_realization(&[1, 1])).unwrap().1, 0);
        let m3 = Zoo::ModCounter { q: 3 }.build(2).unwrap();
        assert_eq!(run_updates(&m3, &canonical_realization(&[4, 0])).unwrap().0, 1);
        let fixed = TurnstileAlgorithm::new("h", 1, 1, 0, vec![vec![0, 0]], Schedule::Fixed(vec![0]), vec![0]).unwrap();
        let two = Stream { n: 1, blocks: vec![vec![], vec![]] };
        assert!(run(&fixed, &two).is_err());
    }

    #[test]
    fn zoo_state_bits() {
        assert_eq!(Zoo::Constant.build(2).unwrap().state_bits(), 0);
        assert_eq!(parity().state_bits(), 1);
        assert_eq!(Zoo::IdentityBox { b: 1 }.build(2).unwrap().states, 10);
        assert!(!Zoo::Alternating.build(2).unwrap().is_uniform());
        assert!(Zoo::parse("nope", None).is_err());
    }

    #[test]
    fn identity_box_records_vector() {
        let a = Zoo::IdentityBox { b: 2 }.build(2).unwrap();
        let s = a.fold_vector(a.initial_state, 0, &[2, -1]).unwrap();
        let t = a.fold_vector(a.initial_state, 0, &[1, 1]).unwrap();
        assert_ne!(s, t);
        assert_eq!(a.fold_vector(a.initial_state, 0, &[3, 0]).unwrap(), a.states - 1);
    }

    #[test]
    fn stream_samples_land_on_target() {
        let i = SparseMeasure::uniform(2, vec![vec![0, 0], vec![1, 0], vec![1, 1], vec![2, 1]]).unwrap();
        let pol = TruncationPolicy::default();
        for seed in 0..20 {
            let s = exact_stream_sample(&i, 4.0, 3, &pol, seed).unwrap();
            assert_eq!(s.stream.frequency(), s.target);
            assert!(s.stream.len() <= s.length_bound);
            let t = mollified_stream_sample(&i, 4.0, 3, &pol, seed).unwrap();
            let z = t.noise.clone().unwrap();
            let want: Vec<i64> = t.target.iter().zip(&z).map(|(a, b)| a + b).collect();
            assert_eq!(t.stream.frequency(), want);
        }
        let s = exact_stream_sample(&i, 4.0, 0, &pol, 1).unwrap();
        assert_eq!(s.stream.blocks.len(), 1);
        let a = assemble_stream(&[], &[1, 2], Some(&[0, 0]));
        assert_eq!(a.stream, assemble_stream(&[], &[1, 2], None).stream);
    }

    #[test]
    fn stream_text_roundtrip() {
        let i = SparseMeasure::point_mass(vec![2, -3]);
        let s = exact_stream_sample(&i, 3.0, 2, &TruncationPolicy::default(), 5).unwrap();
        let back = Stream::from_text(&s.stream.to_text()).unwrap();
        assert_eq!(back, s.stream);
        assert!(Stream::from_text("# stream n=2\n3 +\n").is_err());
    }

    #[test]
    fn posterior_constant_and_parity() {
        let pol = TruncationPolicy::default();
        let c = Zoo::Constant.build(2).unwrap();
        let laws = posterior_laws(&c, &[0, 0, 0], 4.0, 2, &pol).unwrap();
        assert!(laws.betas.iter().all(|b| (b - 1.0).abs() < 1e-12));
        let p = parity();
        let laws = posterior_laws(&p, &[0, 1, 1], 4.0, 2, &pol).unwrap();
        // Oracle: parity masses of gamma_4 from the 1-D weights.
        let g = DiscreteGaussian::new(1, 4.0).unwrap();
        let (mut e, mut o) = (0.0, 0.0);
        for k in -60i64..=60 {
            if k.rem_euclid(2) == 0 {
                e += g.pmf(&[k]);
            } else {
                o += g.pmf(&[k]);
            }
        }
        let odd2 = 2.0 * e * o;
        assert!((laws.betas[0] - odd2).abs() < 1e-9);
        assert!((laws.betas[1] - (1.0 - odd2)).abs() < 1e-9);
        assert!((laws.probability - laws.betas[0] * laws.betas[1]).abs() < 1e-15);
        for (mu, b) in laws.measures.iter().zip(&laws.betas) {
            let cert = density_certificate(mu, 4.0).unwrap();
            assert!(cert.alpha >= b * (1.0 - 1e-6));
        }
    }

    #[test]
    fn posterior_identity_is_point_mass() {
        let pol = TruncationPolicy::default();
        let a = Zoo::IdentityBox { b: 2 }.build(2).unwrap();
        let to = a.fold_vector(a.initial_state, 0, &[1, -1]).unwrap();
        let laws = posterior_laws(&a, &[a.initial_state, to], 3.0, 1, &pol).unwrap();
        assert_eq!(laws.measures[0].len(), 1);
        let g = DiscreteGaussian::new(2, 3.0).unwrap().truncated(&pol).unwrap();
        assert!((laws.betas[0] - g.get(&[1, -1]) / g.total_mass()).abs() < 1e-15);
        assert!(posterior_laws(&parity(), &[1, 0], 3.0, 1, &pol).is_err());
    }

    #[test]
    fn robp_posteriors_depend_on_block() {
        let pol = TruncationPolicy::default();
        let a = Zoo::Alternating.build(2).unwrap();
        let mut eng = PosteriorEngine::new(&a, 4.0, &pol).unwrap();
        // Stay in state 0: even sum on block 0, first coordinate = 0 mod 3 on block 1.
        let (m0, _) = eng.block_posterior(0, 0, 0).unwrap();
        let (m1, _) = eng.block_posterior(1, 0, 0).unwrap();
        assert_ne!(m0, m1);
        assert!(m0.points().all(|x| (x[0] + x[1]).rem_euclid(2) == 0));
        assert!(m1.points().all(|x| x[0].rem_euclid(3) == 0));
    }

    #[test]
    fn factorization_matches_simulation() {
        let pol = TruncationPolicy::default();
        let p = parity();
        let i = SparseMeasure::point_mass(vec![0, 0]);
        let sampler = StreamSampler::new(&i, 3.0, 2, &pol, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trials = 40_000;
        let mut hits = 0;
        for _ in 0..trials {
            let t = run_trace(&p, &sampler.sample(&mut rng).stream).unwrap();
            if t[..3] == [0, 1, 0] {
                hits += 1;
            }
        }
        let prob = posterior_laws(&p, &[0, 1, 0], 3.0, 2, &pol).unwrap().probability;
        let emp = hits as f64 / trials as f64;
        let se = (prob * (1.0 - prob) / trials as f64).sqrt();
        assert!((emp - prob).abs() <= 3.0 * se, "{emp} vs {prob}");
    }

    #[test]
    fn selection_examples() {
        let pol = TruncationPolicy::default();
        let i = SparseMeasure::uniform(2, vec![vec![0, 0], vec![1, 0], vec![1, 1], vec![2, 1]]).unwrap();
        let prob = ProblemSpec::promise(Target::SumParity);
        let cfg = SelectionConfig { samples: 400, landings: 16, ..Default::default() };
        let c = Zoo::Constant.build(2).unwrap();
        let sel = select_state_sequence(&c, &i, &ProblemSpec::promise(Target::Constant(0)), 4.0, 2, &pol, &cfg, 1).unwrap();
        assert_eq!(sel.distinct, 1);
        assert_eq!(sel.chosen.probability, 1.0);
        let p = parity();
        let sel = select_state_sequence(&p, &i, &prob, 4.0, 2, &pol, &cfg, 1).unwrap();
        assert_eq!(sel.distinct, 4);
        let again = select_state_sequence(&p, &i, &prob, 4.0, 2, &pol, &cfg, 1).unwrap();
        assert_eq!(sel.chosen, again.chosen);
        assert_eq!(sel.chosen.success_estimate, 1.0);
        assert_eq!(sel.chosen.states, vec![0, 0, 0]);
        let id = Zoo::IdentityBox { b: 8 }.build(2).unwrap();
        let small = SelectionConfig { samples: 20, ..cfg };
        assert!(select_state_sequence(&id, &i, &prob, 4.0, 4, &pol, &small, 1).is_err());
    }

    #[test]
    fn padding_examples() {
        let s = Stream::single(2, canonical_realization(&[1, 2]));
        assert_eq!(strict_padding(&s, &[0, 0]).unwrap(), s);
        let neg = Stream::single(2, vec![Update { coordinate: 0, sign: -1 }]);
        assert!(strict_padding(&neg, &[0, 0]).is_err());
        assert!(strict_padding(&neg, &[1, 0]).is_ok());
    }

    #[test]
    fn smoothness_of_capped_norm() {
        let i = SparseMeasure::uniform(2, vec![vec![0, 0], vec![1, 0]]).unwrap();
        let p = ProblemSpec::new(Target::ThresholdedNorm { cap: 2.0 }, 2.0, 0.05).unwrap();
        assert_eq!(p.smoothness(&i, 8.0, &TruncationPolicy::default(), 1000, 3).unwrap(), 1.0);
        let tight = ProblemSpec::new(Target::ThresholdedNorm { cap: 20.0 }, 0.5, 0.05).unwrap();
        assert!(tight.smoothness(&i, 8.0, &TruncationPolicy::default(), 1000, 3).unwrap() < 0.5);
    }

    #[test]
    fn noise_marginal_matches_gamma() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let pol = TruncationPolicy::default();
        let i = SparseMeasure::point_mass(vec![0]);
        let r = 3.0;
        let g = DiscreteGaussian::new(1, r).unwrap().truncated(&pol).unwrap();
        let trials = 100_000u64;
        let mut counts: BTreeMap<i64, u64> = BTreeMap::new();
        for seed in 0..trials {
            let z = mollified_stream_sample(&i, r, 0, &pol, seed).unwrap().noise.unwrap()[0];
            *counts.entry(z).or_default() += 1;
        }
        // Pool the tails so every bin expects at least 5 draws.
        let total = g.total_mass();
        let mut stat = 0.0;
        let mut bins = 0;
        let (mut tail_obs, mut tail_exp) = (0.0, 0.0);
        for (x, m) in g.iter() {
            let e = m / total * trials as f64;
            let o = *counts.get(&x[0]).unwrap_or(&0) as f64;
            if e >= 5.0 {
                stat += (o - e).powi(2) / e;
                bins += 1;
            } else {
                tail_obs += o;
                tail_exp += e;
            }
        }
        if tail_exp > 0.0 {
            stat += (tail_obs - tail_exp).powi(2) / tail_exp;
            bins += 1;
        }
        let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(stat);
        assert!(p >= 0.01, "chi-square p = {p}");
    }

    fn update_strategy() -> impl Strategy<Value = Vec<(usize, bool)>> {
        proptest::collection::vec((0usize..3, any::<bool>()), 0..60)
    }

    proptest! {
        #[test]
        fn canonical_net_frequency(v in proptest::collection::vec(-6i64..7, 1..4)) {
            let s = Stream::single(v.len(), canonical_realization(&v));
            prop_assert_eq!(s.frequency(), v.clone());
            prop_assert_eq!(s.len() as i64, v.iter().map(|x| x.abs()).sum::<i64>());
        }

        #[test]
        fn replay_is_deterministic(ups in update_strategy()) {
            let a = Zoo::ModCounter { q: 5 }.build(3).unwrap();
            let s = Stream::single(3, ups.iter().map(|&(c, p)| Update { coordinate: c, sign: if p { 1 } else { -1 } }).collect());
            prop_assert_eq!(run(&a, &s).unwrap(), run(&a, &s).unwrap());
        }

        #[test]
        fn minimal_padding_is_tight(ups in update_strategy()) {
            let s = Stream::single(3, ups.iter().map(|&(c, p)| Update { coordinate: c, sign: if p { 1 } else { -1 } }).collect());
            let pad = min_strict_padding(&s);
            prop_assert!(strict_padding(&s, &pad).is_ok());
            for i in 0..3 {
                if pad[i] > 0 {
                    let mut less = pad.clone();
                    less[i] -= 1;
                    prop_assert!(strict_padding(&s, &less).is_err());
                }
            }
        }
    }
}
