//! Config-driven experiment runs: the lemma suite, end-to-end extraction,
//! TV sweeps and small-ball instances, emitted as CSV tables with JSON mirrors.

use crate::dgauss::{gamma_conv_domination_check, poisson_identity_check, DiscreteGaussian, TruncationPolicy};
use crate::measure::{convolve_power_fft, density_certificate, large_spectrum_scan, SparseMeasure};
use crate::numeric::torus_norm;
use crate::spectrum::{
    coarse_rudin_check, greedy_dissociated_subset, is_kappa_dissociated, off_origin_sup, small_ball_check,
    small_ball_exact, ExactConfig, NearOriginConfig, StructureRoute,
};
use crate::streaming::{posterior_laws, ProblemSpec, SelectionConfig, Target, Zoo};
use crate::transfer::{evaluate_sketch, extract_sketch, sketch_report_text, Route, TransferConfig};
use crate::translation::{
    best_ball_reduction, convolution_tail_center, line_decomposition, spectral_energy_bound_check,
    translation_invariance_certify, FrequencySet, SpectralProfile, TranslationConfig,
};
use crate::{Error, Result};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub scenario: String,
    pub route: String,
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { scenario: "parity".into(), route: "exact".into(), seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    pub n: usize,
    /// Gaussian radius `R`.
    pub r: f64,
    pub r_sweep: Vec<f64>,
    /// Number of prefix blocks `M`.
    pub m: usize,
    /// Large-spectrum parameter `K`.
    pub k: f64,
    /// Rounding denominator `Q` on the exact route.
    pub big_q: i64,
    /// Rounding denominator on the mollified route; defaults to `R`.
    pub mollified_q: Option<i64>,
    /// Chain base `q`.
    pub q: i64,
    pub kappa: f64,
    pub b: f64,
    /// Input diameter and kernel enumeration radius `D`.
    pub d: f64,
    pub epsilon: f64,
    pub delta: f64,
    /// Cap of the thresholded-norm metric problem used on the mollified route.
    pub norm_cap: f64,
    pub tail_mass_target: f64,
    pub grid_exponent: u32,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            n: 2,
            r: 8.0,
            r_sweep: vec![4.0, 8.0, 16.0],
            m: 8,
            k: 324.0,
            big_q: 2048,
            mollified_q: None,
            q: 3,
            kappa: 0.1,
            b: 1.0,
            d: 4.0,
            epsilon: 2.0,
            delta: 0.05,
            norm_cap: 2.0,
            tail_mass_target: 1e-12,
            grid_exponent: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Factor on the uniform share for state-sequence selection.
    pub selection: f64,
    pub min_count: usize,
    /// Fibers whose certified TV is below `1/2 - tv_margin` must carry one label.
    pub tv_margin: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { selection: 0.5, min_count: 2, tv_margin: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budget {
    pub samples: usize,
    pub landings: usize,
    pub decoder_landings: usize,
    pub max_candidates: usize,
    pub smoothness_trials: usize,
    pub sweep_radius: f64,
    pub smallball_trials: u64,
    pub lemma_trials: u64,
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            samples: 4096,
            landings: 32,
            decoder_landings: 256,
            max_candidates: 8,
            smoothness_trials: 4000,
            sweep_radius: 2.0,
            smallball_trials: 1_000_000,
            lemma_trials: 100_000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub params: Params,
    pub thresholds: Thresholds,
    pub budget: Budget,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verb {
    VerifyLemmas,
    Extract,
    TvSweep,
    SmallBall,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn route(&self) -> Result<Route> {
        Route::parse(&self.run.route)
    }

    pub fn mollified_q(&self, r: f64) -> i64 {
        self.params.mollified_q.unwrap_or(r.round() as i64)
    }

    /// Smallest `Q` meeting the rounding requirement of the convolution route at radius `r`.
    pub fn required_q(&self, r: f64) -> f64 {
        std::f64::consts::SQRT_2 * r * (self.params.k / 4.0) * (self.params.n as f64).sqrt()
    }

    /// Every parameter window the verb touches, reported together.
    pub fn validate(&self, verb: Verb) -> Result<()> {
        let p = &self.params;
        let mut bad: Vec<String> = Vec::new();
        if !(1..=3).contains(&p.n) {
            bad.push(format!("n = {} outside 1..=3", p.n));
        }
        if !(p.r >= 2.0) {
            bad.push(format!("R = {} below 2", p.r));
        }
        if !(p.tail_mass_target > 0.0 && p.tail_mass_target <= 1e-3) {
            bad.push(format!("tail_mass_target = {:e} outside (0, 1e-3]", p.tail_mass_target));
        }
        if !(4..=10).contains(&p.grid_exponent) {
            bad.push(format!("grid_exponent = {} outside 4..=10", p.grid_exponent));
        }
        let structural = matches!(verb, Verb::Extract | Verb::TvSweep);
        if structural {
            if p.n != 2 {
                bad.push(format!("scenarios are two-dimensional, got n = {}", p.n));
            }
            if !(1..=64).contains(&p.m) {
                bad.push(format!("M = {} outside 1..=64", p.m));
            }
            if p.q < 3 || (p.q as f64) > p.k {
                bad.push(format!("chain base q = {} must satisfy 3 <= q <= K = {}", p.q, p.k));
            }
            let resolution = (p.n as f64).sqrt() / f64::from(1u32 << p.grid_exponent);
            if !(p.kappa >= resolution) {
                bad.push(format!(
                    "kappa = {} below the scan resolution sqrt(n) 2^-{} = {resolution:.4}",
                    p.kappa, p.grid_exponent
                ));
            }
            if !(p.kappa < 0.5) {
                bad.push(format!("kappa = {} must be below 1/2", p.kappa));
            }
            if !(p.b >= 1.0) {
                bad.push(format!("B = {} below 1", p.b));
            }
            if !(p.d > 0.0 && p.d <= 12.0) {
                bad.push(format!("D = {} outside (0, 12]", p.d));
            }
            if !(p.epsilon >= 0.0) || !(0.0..1.0).contains(&p.delta) {
                bad.push("need epsilon >= 0 and delta in [0, 1)".into());
            }
            let t = &self.thresholds;
            if !(t.selection > 0.0 && t.selection <= 1.0) {
                bad.push(format!("selection threshold {} outside (0, 1]", t.selection));
            }
            if !(0.0..0.5).contains(&t.tv_margin) {
                bad.push(format!("tv_margin {} outside [0, 1/2)", t.tv_margin));
            }
            let b = &self.budget;
            if b.samples == 0 || b.landings == 0 || b.decoder_landings == 0 || b.max_candidates == 0 {
                bad.push("sample, landing and candidate budgets must be positive".into());
            }
            match self.route() {
                Ok(Route::Exact) if verb == Verb::Extract => {
                    let need = self.required_q(p.r);
                    if (p.big_q as f64) < need {
                        bad.push(format!("Q = {} below sqrt2 R (K/4) sqrt(n) = {need:.1}", p.big_q));
                    }
                }
                Ok(Route::Mollified) => {
                    let q = self.mollified_q(p.r);
                    if q < 1 {
                        bad.push(format!("mollified Q = {q} below 1"));
                    }
                }
                Ok(_) => {}
                Err(e) => bad.push(e.to_string()),
            }
            if scenario(&self.run.scenario).is_none() {
                bad.push(format!(
                    "unknown scenario {:?}; registry: {}",
                    self.run.scenario,
                    SCENARIOS.iter().map(|s| s.name).collect::<Vec<_>>().join(", ")
                ));
            }
        }
        if verb == Verb::TvSweep {
            if p.r_sweep.is_empty() {
                return Err(Error::Usage("tv-sweep needs a nonempty r_sweep list".into()));
            }
            if p.r_sweep.iter().any(|&r| !(r >= 2.0)) {
                bad.push("every R in r_sweep must be at least 2".into());
            }
        }
        if verb == Verb::SmallBall && self.budget.smallball_trials == 0 {
            bad.push("smallball_trials must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("{} problem(s): {}", bad.len(), bad.join("; "))))
        }
    }
}

/// A named end-to-end setting: algorithm, input distribution and problem.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: &'static str,
    pub description: &'static str,
    pub algorithm: Zoo,
    pub input: &'static [[i64; 2]],
    /// Promise or relation target on the exact route.
    pub target: Target,
}

const PARITY_INPUT: &[[i64; 2]] = &[[0, 0], [1, 0], [1, 1], [2, 1]];
const MOD3_INPUT: &[[i64; 2]] = &[[0, 0], [1, 0], [2, 0], [3, 0]];

pub const SCENARIOS: &[Scenario] = &[
    Scenario {
        name: "constant",
        description: "single-state algorithm, constant promise",
        algorithm: Zoo::Constant,
        input: PARITY_INPUT,
        target: Target::Constant(0),
    },
    Scenario {
        name: "parity",
        description: "coordinate-sum parity, promise f = parity",
        algorithm: Zoo::Parity,
        input: PARITY_INPUT,
        target: Target::SumParity,
    },
    Scenario {
        name: "mod3",
        description: "first coordinate mod 3, promise 0 versus {1, 2}",
        algorithm: Zoo::ModCounter { q: 3 },
        input: MOD3_INPUT,
        target: Target::CoordMod { coord: 0, q: 3 },
    },
    Scenario {
        name: "adversarial",
        description: "parity algorithm asked for the first coordinate mod 3",
        algorithm: Zoo::Parity,
        input: MOD3_INPUT,
        target: Target::CoordMod { coord: 0, q: 3 },
    },
    Scenario {
        name: "alternating",
        description: "block-indexed rules: parity on even blocks, mod 3 on odd blocks",
        algorithm: Zoo::Alternating,
        input: PARITY_INPUT,
        target: Target::SumParity,
    },
    Scenario {
        name: "identity",
        description: "exact recorder inside a box; state sequences spread thin",
        algorithm: Zoo::IdentityBox { b: 4 },
        input: PARITY_INPUT,
        target: Target::SumParity,
    },
];

pub fn scenario(name: &str) -> Option<&'static Scenario> {
    SCENARIOS.iter().find(|s| s.name == name)
}

impl Scenario {
    pub fn input_measure(&self) -> SparseMeasure {
        SparseMeasure::uniform(2, self.input.iter().map(|p| p.to_vec()).collect()).expect("scenario input")
    }

    /// The declared problem: the scenario target on the exact route, the
    /// thresholded-norm metric problem on the mollified route.
    pub fn problem(&self, cfg: &ExperimentConfig, route: Route) -> Result<ProblemSpec> {
        match route {
            Route::Exact => ProblemSpec::new(self.target.clone(), cfg.params.epsilon, cfg.params.delta),
            Route::Mollified => ProblemSpec::new(
                Target::ThresholdedNorm { cap: cfg.params.norm_cap },
                cfg.params.epsilon,
                cfg.params.delta,
            ),
        }
    }
}

/// A CSV table with a JSON mirror.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Shortest round-trip form, scientific outside `[1e-4, 1e9)`.
pub fn fmt_f(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || !x.is_finite() || (1e-4..1e9).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

impl Table {
    pub fn new(name: &str) -> Self {
        let columns = schema_columns(name).iter().map(|c| c.0.to_string()).collect();
        Table { name: name.into(), columns, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.columns.len(), "row width for table {}", self.name);
        self.rows.push(row);
    }

    /// Rows sorted for deterministic output.
    pub fn sort(&mut self) {
        self.rows.sort();
    }

    /// First column of every row whose `pass` column is not `true`.
    pub fn failures(&self) -> Vec<&[String]> {
        match self.columns.iter().position(|c| c == "pass") {
            Some(i) => self.rows.iter().filter(|r| r[i] != "true").map(Vec::as_slice).collect(),
            None => Vec::new(),
        }
    }

    pub fn failed(&self) -> usize {
        match self.columns.iter().position(|c| c == "pass") {
            Some(i) => self.rows.iter().filter(|r| r[i] != "true").count(),
            None => 0,
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).map_err(|e| Error::Io(e.into()))?;
        for r in &self.rows {
            w.write_record(r).map_err(|e| Error::Io(e.into()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn to_json(&self) -> serde_json::Value {
        let rows: Vec<serde_json::Value> = self
            .rows
            .iter()
            .map(|r| {
                let obj: serde_json::Map<String, serde_json::Value> = self
                    .columns
                    .iter()
                    .zip(r)
                    .map(|(c, v)| (c.clone(), json_cell(v)))
                    .collect();
                serde_json::Value::Object(obj)
            })
            .collect();
        serde_json::json!({ "table": self.name, "rows": rows })
    }

    pub fn from_csv(name: &str, text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let columns: Vec<String> = r
            .headers()
            .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse { line: i + 2, msg: e.to_string() })?;
            rows.push(rec.iter().map(str::to_string).collect());
        }
        Ok(Table { name: name.into(), columns, rows })
    }
}

fn json_cell(v: &str) -> serde_json::Value {
    match v {
        "true" => serde_json::Value::Bool(true),
        "false" => serde_json::Value::Bool(false),
        "" => serde_json::Value::Null,
        _ => match v.parse::<f64>() {
            Ok(x) if x.is_finite() => serde_json::json!(x),
            _ => serde_json::Value::String(v.into()),
        },
    }
}

type Columns = &'static [(&'static str, &'static str)];

pub const SCHEMA: &[(&str, &str, Columns)] = &[
    (
        "lemmas",
        "one row per inequality check of verify-lemmas",
        &[
            ("check", "check family"),
            ("instance", "instance index within the family"),
            ("params", "instance parameters as key=value pairs"),
            ("lhs", "observed side of the inequality"),
            ("rhs", "bound side of the inequality"),
            ("margin", "rhs - lhs"),
            ("pass", "true when lhs <= rhs"),
        ],
    ),
    (
        "extract",
        "one row per extract run",
        &[
            ("scenario", "scenario name"),
            ("route", "exact or mollified"),
            ("r", "Gaussian radius R"),
            ("m", "number of prefix blocks M"),
            ("sigma", "selected state sequence, dash separated"),
            ("dimension", "number of sketch rows (m generators or l integer rows)"),
            ("fibers", "fibers met by the input support"),
            ("fiber_bound", "product of the chain denominators (exact route), empty otherwise"),
            ("max_entry", "largest absolute integer-matrix entry (mollified route)"),
            ("s_sigma", "log2(2/alpha) for the posterior densities"),
            ("success", "decoder success probability on the input distribution"),
            ("exact_eval", "true when success is an exact expectation"),
            ("worst_kernel_tv", "largest TV over kernel vectors within D, empty if none"),
            ("worst_fiber_tv", "largest TV between landing laws of points sharing a fiber"),
            ("conflicts", "fibers carrying two promised labels"),
            ("pass", "no conflicts and fiber count within the bound"),
        ],
    ),
    (
        "tv_sweep",
        "one row per (R, v) of tv-sweep",
        &[
            ("scenario", "scenario name"),
            ("route", "exact or mollified"),
            ("r", "Gaussian radius R"),
            ("v", "translation vector, space separated"),
            ("kernel", "true when v annihilates the extracted structure"),
            ("tv", "exact total variation between the conditioned law and its translate"),
            ("trend", "down, flat or up against the previous R; empty on the first R"),
        ],
    ),
    (
        "smallball",
        "one row per small-ball instance",
        &[
            ("instance", "instance label"),
            ("l", "rows of A"),
            ("r", "Gaussian radius R"),
            ("u", "ball radius"),
            ("trials", "Monte Carlo trials, 0 for exact enumeration"),
            ("empirical", "estimated or exact probability"),
            ("std_error", "Monte Carlo standard error"),
            ("bound", "closed-form small-ball bound"),
            ("pass", "empirical <= bound + 3 std_error + certified tail"),
        ],
    ),
];

pub fn schema_columns(table: &str) -> Columns {
    SCHEMA.iter().find(|s| s.0 == table).map(|s| s.2).unwrap_or(&[])
}

/// Human-readable column documentation.
pub fn schema_text() -> String {
    let mut s = String::new();
    for (table, about, cols) in SCHEMA {
        s.push_str(&format!("{table}.csv: {about}\n"));
        for (c, d) in *cols {
            s.push_str(&format!("  {c:<16} {d}\n"));
        }
    }
    s
}

/// Tables and files produced by a verb.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub tables: Vec<Table>,
    pub artifacts: Vec<(String, String)>,
    pub notes: Vec<String>,
}

impl Outcome {
    pub fn pass(&self) -> bool {
        self.tables.iter().all(|t| t.failed() == 0)
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        std::fs::create_dir_all(out)?;
        for t in &self.tables {
            std::fs::write(out.join(format!("{}.csv", t.name)), t.to_csv()?)?;
            let json = serde_json::to_string_pretty(&t.to_json()).expect("json");
            std::fs::write(out.join(format!("{}.json", t.name)), json + "\n")?;
        }
        for (name, body) in &self.artifacts {
            std::fs::write(out.join(name), body)?;
        }
        Ok(())
    }
}

fn lemma_row(t: &mut Table, check: &str, instance: usize, params: String, lhs: f64, rhs: f64) {
    t.push(vec![
        check.into(),
        instance.to_string(),
        params,
        fmt_f(lhs),
        fmt_f(rhs),
        fmt_f(rhs - lhs),
        (lhs <= rhs).to_string(),
    ]);
}

fn gamma(n: usize, r: f64) -> Result<SparseMeasure> {
    DiscreteGaussian::new(n, r)?.truncated(&TruncationPolicy::default())
}

/// The full inequality suite.
pub fn verify_lemmas(cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.validate(Verb::VerifyLemmas)?;
    let seed = cfg.run.seed;
    let mut t = Table::new("lemmas");

    for (i, &r) in [2.0, 4.0, 8.0, 16.0, 32.0].iter().enumerate() {
        let g = DiscreteGaussian::new(1, r)?;
        let worst = (0..4096)
            .map(|j| {
                let z = j as f64 / 4096.0;
                let tn = torus_norm(&[z]);
                g.transform(&[z]).norm() - (-r * r * tn * tn / 5.0).exp()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        lemma_row(&mut t, "fourier-decay", i, format!("n=1 R={r} grid=4096"), worst, 1e-9);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..50 {
        let (m, desc) = if i % 5 == 0 {
            let a: f64 = rng.gen_range(0.05..3.0);
            (DMatrix::from_element(1, 1, a), format!("n=1 a={a:.4}"))
        } else {
            let a: f64 = rng.gen_range(0.05..3.0);
            let b: f64 = rng.gen_range(0.05..3.0);
            let th: f64 = rng.gen_range(0.0..PI);
            let rot = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]);
            let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![a, b]));
            let m = &rot * d * rot.transpose();
            ((&m + m.transpose()) * 0.5, format!("n=2 eig=({a:.4},{b:.4}) angle={th:.4}"))
        };
        let c = poisson_identity_check(&m)?;
        lemma_row(&mut t, "poisson", i, desc, c.rel_err, 1e-8);
    }

    let mut k = 0;
    for n in [1usize, 2] {
        for r in [2.0, 4.0, 8.0] {
            let c = gamma_conv_domination_check(r, n)?;
            lemma_row(&mut t, "gamma-domination", k, format!("n={n} R={r}"), c.worst_ratio, 4.0);
            k += 1;
        }
    }

    let kappa_r = 0.1;
    for i in 0..20 {
        let n = 1 + i % 2;
        let r = [4.0, 8.0][(i / 2) % 2];
        let sigma = [0.25, 0.5, 1.0][i % 3];
        let nu = gamma(n, r)?;
        let size = 1 + i % 4;
        let mut tset: Vec<Vec<f64>>;
        loop {
            tset = (0..size).map(|_| (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()).collect();
            if is_kappa_dissociated(&tset, kappa_r)?.dissociated {
                break;
            }
        }
        let c: Vec<Complex64> = (0..size)
            .map(|_| Complex64::from_polar(rng.gen_range(0.0..1.0), rng.gen_range(0.0..2.0 * PI)))
            .collect();
        let eta = off_origin_sup(&nu, kappa_r, if n == 1 { 12 } else { 8 })?.min(1.0);
        let rc = coarse_rudin_check(&nu, &tset, &c, sigma, kappa_r, eta)?;
        lemma_row(
            &mut t,
            "coarse-rudin",
            i,
            format!("n={n} R={r} |T|={size} sigma={sigma} kappa={kappa_r} eta={eta:.3e}"),
            rc.lhs,
            rc.rhs + 1e-9,
        );
    }

    let g8 = gamma(2, 8.0)?;
    for i in 0..10 {
        let alpha_target = [0.5, 0.25, 0.125][i % 3];
        let keep: std::collections::HashSet<Vec<i64>> =
            g8.points().filter(|_| rng.gen_bool(alpha_target)).map(<[i64]>::to_vec).collect();
        let (piece, _) = g8
            .restrict(|x| keep.contains(x))
            .ok_or_else(|| Error::domain("empty restriction"))?;
        let piece = piece.normalized();
        let cert = density_certificate(&piece, 8.0)?;
        let s = (2.0 / cert.alpha).log2();
        let kappa = 5.0 * s.sqrt() / 8.0;
        let scan = large_spectrum_scan(&piece, 2.0, 7, false)?;
        let pts: Vec<Vec<f64>> = scan.hits.iter().filter(|h| h.magnitude >= 0.5).map(|h| h.point.clone()).collect();
        let kept = greedy_dissociated_subset(&pts, kappa)?;
        lemma_row(
            &mut t,
            "dissociated-size",
            i,
            format!("n=2 R=8 alpha={:.4} kappa={kappa:.4} heavy={}", cert.alpha, pts.len()),
            kept.len() as f64,
            14.0 * s,
        );
    }

    let a1 = DMatrix::from_row_slice(1, 1, &[0.05]);
    let (lo, hi, bound) = small_ball_exact(&a1, 16.0, 0.1, &[0.0])?;
    lemma_row(&mut t, "small-ball", 0, format!("exact n=1 R=16 u=0.1 lo={lo:.6e}"), hi, bound);
    for (i, inst) in small_ball_instances().iter().enumerate() {
        let rep = small_ball_check(&inst.a, inst.r, inst.u, &inst.b, cfg.budget.lemma_trials, seed + i as u64)?;
        lemma_row(
            &mut t,
            "small-ball",
            i + 1,
            format!("{} trials={}", inst.label, rep.trials),
            rep.empirical,
            rep.bound + 3.0 * rep.std_error + rep.tail_slack,
        );
    }

    for i in 0..20 {
        let r: f64 = rng.gen_range(2.0..6.0);
        let shift: Vec<i64> = (0..2).map(|_| rng.gen_range(-3..4)).collect();
        let (nu, _) = gamma(2, r)?
            .translate(&shift)
            .restrict(|x| (x[0] * 7 + x[1] * 3).rem_euclid(5) != 0)
            .ok_or_else(|| Error::domain("empty restriction"))?;
        let mut v = vec![0i64; 2];
        while v.iter().all(|&x| x == 0) {
            v = (0..2).map(|_| rng.gen_range(-3..4)).collect();
        }
        let dec = line_decomposition(&nu, &v, None)?;
        let j = rng.gen_range(0..dec.lines.len());
        let d = dec.line_energies[j];
        let q = dec.quadrature_energies[j];
        let rel = if d == 0.0 { q.abs() } else { (d - q).abs() / d };
        lemma_row(
            &mut t,
            "line-parseval",
            i,
            format!("n=2 R={r:.3} v=({},{}) x=({},{})", v[0], v[1], dec.representatives[j][0], dec.representatives[j][1]),
            rel,
            1e-6,
        );
    }

    let (even, _) = g8.restrict(|x| (x[0] + x[1]).rem_euclid(2) == 0).unwrap();
    let parity_nu = convolve_power_fft(&even.normalized(), 8, None, 1.0)?;
    let gauss_nu = convolve_power_fft(&g8, 8, None, 1.0)?;
    let w_par = FrequencySet::Finite(vec![vec![0.0, 0.0], vec![0.5, 0.5]]);
    let w0 = FrequencySet::Finite(vec![vec![0.0, 0.0]]);
    let cases = [("parity", &parity_nu, &w_par, vec![1i64, 1]), ("gaussian", &gauss_nu, &w0, vec![1, 0])];
    for (i, (name, nu, w, v)) in cases.iter().enumerate() {
        let eta = 1e-8;
        let delta = SpectralProfile::new(nu, w, 9)?.delta(eta);
        let rep = spectral_energy_bound_check(nu, w, delta, eta, v)?;
        lemma_row(
            &mut t,
            "spectral-energy",
            2 * i,
            format!("{name} R=8 M=8 per-line excess, Delta={delta:.4}"),
            rep.worst_line_excess,
            rep.slack,
        );
        lemma_row(
            &mut t,
            "spectral-energy",
            2 * i + 1,
            format!("{name} R=8 M=8 beta sum, eta={eta:e}"),
            rep.beta_sum,
            rep.beta_bound + rep.slack,
        );
        let br = best_ball_reduction(nu, v, w, &[0.0, 0.0])?;
        lemma_row(
            &mut t,
            "ball-reduction",
            i,
            format!(
                "{name} R=8 M=8 v=({},{}) H={:.1} eta={:e} Delta={:.4} main={:.3e} spectral={:.3e} mass={:.3e}",
                v[0], v[1], br.h, br.eta, br.delta, br.main, br.spectral_tail, br.mass_tail
            ),
            br.actual,
            br.bound + 1e-9,
        );
    }

    let g1 = gamma(1, 8.0)?;
    let tc = convolution_tail_center(&vec![g1; 4], 8.0, 3.0)?;
    lemma_row(&mut t, "convolution-tail", 0, format!("n=1 R=8 M=4 L=3 radius={:.3}", tc.radius), tc.outside_mass, tc.mass_bound);
    let tc = convolution_tail_center(&vec![g8.translate(&[1, -2]); 8], 8.0, 4.0)?;
    lemma_row(&mut t, "convolution-tail", 1, format!("n=2 R=8 M=8 L=4 shifted radius={:.3}", tc.radius), tc.outside_mass, tc.mass_bound);

    Ok(Outcome { tables: vec![t], ..Default::default() })
}

pub struct SmallBallInstance {
    pub label: String,
    pub a: DMatrix<f64>,
    pub r: f64,
    pub u: f64,
    pub b: Vec<f64>,
}

/// Admissible Monte Carlo instances with `l <= 2`, `n = 2`.
pub fn small_ball_instances() -> Vec<SmallBallInstance> {
    let mk = |label: &str, l: usize, a: &[f64], r: f64, u: f64, b: &[f64]| SmallBallInstance {
        label: label.into(),
        a: DMatrix::from_row_slice(l, 2, a),
        r,
        u,
        b: b.to_vec(),
    };
    vec![
        mk("l=1 centered", 1, &[0.05, 0.02], 8.0, 0.1, &[0.0]),
        mk("l=1 offset", 1, &[0.03, -0.04], 8.0, 0.1, &[0.3]),
        mk("l=2 centered", 2, &[0.05, 0.0, 0.0, 0.05], 8.0, 0.15, &[0.0, 0.0]),
        mk("l=2 skew", 2, &[0.04, 0.01, -0.01, 0.03], 16.0, 0.12, &[0.05, -0.05]),
        mk("l=2 offset", 2, &[0.02, 0.02, 0.03, -0.02], 8.0, 0.1, &[0.2, 0.1]),
    ]
}

pub fn smallball(cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.validate(Verb::SmallBall)?;
    let mut t = Table::new("smallball");
    let a1 = DMatrix::from_row_slice(1, 1, &[0.05]);
    let (lo, hi, bound) = small_ball_exact(&a1, 16.0, 0.1, &[0.0])?;
    t.push(vec![
        "exact n=1".into(),
        "1".into(),
        "16".into(),
        "0.1".into(),
        "0".into(),
        fmt_f(lo),
        fmt_f(hi - lo),
        fmt_f(bound),
        (hi <= bound).to_string(),
    ]);
    for (i, inst) in small_ball_instances().iter().enumerate() {
        let rep = small_ball_check(&inst.a, inst.r, inst.u, &inst.b, cfg.budget.smallball_trials, cfg.run.seed + i as u64)?;
        t.push(vec![
            inst.label.clone(),
            inst.a.nrows().to_string(),
            fmt_f(inst.r),
            fmt_f(inst.u),
            rep.trials.to_string(),
            fmt_f(rep.empirical),
            fmt_f(rep.std_error),
            fmt_f(rep.bound),
            rep.pass.to_string(),
        ]);
    }
    Ok(Outcome { tables: vec![t], ..Default::default() })
}

/// Transfer settings for a given radius and route.
pub fn transfer_config(cfg: &ExperimentConfig, route: Route, r: f64) -> Result<TransferConfig> {
    let p = &cfg.params;
    let policy = TruncationPolicy::new(p.tail_mass_target)?;
    let structure = structure_route(cfg, route, r, false);
    Ok(TransferConfig {
        r,
        m: p.m,
        route: structure,
        selection: SelectionConfig {
            samples: cfg.budget.samples,
            threshold_factor: cfg.thresholds.selection,
            min_count: cfg.thresholds.min_count,
            landings: cfg.budget.landings,
            mollify: route == Route::Mollified,
            max_candidates: cfg.budget.max_candidates,
        },
        policy,
        decoder_landings: cfg.budget.decoder_landings,
        d: p.d,
        controls: 8,
        smoothness_trials: cfg.budget.smoothness_trials,
    })
}

/// Structure-extraction settings; `auto_q` raises `Q` to the requirement at `r`.
pub fn structure_route(cfg: &ExperimentConfig, route: Route, r: f64, auto_q: bool) -> StructureRoute {
    let p = &cfg.params;
    match route {
        Route::Exact => {
            let mut q = p.big_q;
            if auto_q {
                q = q.max((cfg.required_q(r).ceil() as u64).next_power_of_two() as i64);
            }
            let mut c = ExactConfig::new(p.k, q, p.q, p.kappa, r);
            c.grid_exponent = p.grid_exponent;
            StructureRoute::Exact(c)
        }
        Route::Mollified => {
            let mut c = NearOriginConfig::new(p.k, p.kappa, p.b, cfg.mollified_q(r), r);
            c.grid_exponent = p.grid_exponent;
            c.allow_override = true;
            StructureRoute::NearOrigin(c)
        }
    }
}

pub fn extract(cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.validate(Verb::Extract)?;
    let sc = scenario(&cfg.run.scenario).expect("validated");
    let route = cfg.route()?;
    let alg = sc.algorithm.build(2)?;
    let input = sc.input_measure();
    let problem = sc.problem(cfg, route)?;
    let tcfg = transfer_config(cfg, route, cfg.params.r)?;
    let (sketch, decoder, report) = extract_sketch(&alg, &input, &problem, &tcfg, cfg.run.seed)
        .map_err(|e| Error::precondition(format!("scenario {}: {e}", sc.name)))?;
    let ev = evaluate_sketch(&sketch, &decoder, &input, &problem, 10_000, cfg.run.seed)?;
    let mut t = Table::new("extract");
    let within = report.fiber_bound.map_or(true, |b| report.fibers_met as u128 <= b);
    t.push(vec![
        sc.name.into(),
        route.to_string(),
        fmt_f(cfg.params.r),
        cfg.params.m.to_string(),
        sketch.sigma.label(),
        report.dimension.to_string(),
        report.fibers_met.to_string(),
        report.fiber_bound.map(|b| b.to_string()).unwrap_or_default(),
        report.max_entry.to_string(),
        fmt_f(report.s_sigma),
        fmt_f(ev.success),
        ev.exact.to_string(),
        report.certificate.max_kernel_tv.map(fmt_f).unwrap_or_default(),
        fmt_f(report.worst_fiber_tv()),
        decoder.conflicts.len().to_string(),
        (decoder.conflicts.is_empty() && within).to_string(),
    ]);
    let mut body = sketch_report_text(&sketch, &decoder);
    for w in &report.warnings {
        body.push_str(&format!("warning {w}\n"));
    }
    for f in &report.fiber_tv {
        body.push_str(&format!("fiber-tv {:?} {:?} {}\n", f.representative, f.member, fmt_f(f.tv)));
    }
    for (v, tv) in &report.certificate.kernel {
        body.push_str(&format!("kernel-tv {v:?} {}\n", fmt_f(*tv)));
    }
    for (v, tv) in &report.certificate.control {
        body.push_str(&format!("control-tv {v:?} {}\n", fmt_f(*tv)));
    }
    Ok(Outcome {
        tables: vec![t],
        artifacts: vec![(format!("sketch-{}-{}.txt", sc.name, route), body)],
        notes: report.warnings.clone(),
    })
}

/// Relative change below which consecutive TVs count as equal (FFT rounding).
pub const TREND_TOL: f64 = 1e-9;

pub fn tv_sweep(cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.validate(Verb::TvSweep)?;
    let sc = scenario(&cfg.run.scenario).expect("validated");
    let route = cfg.route()?;
    let alg = sc.algorithm.build(2)?;
    let policy = TruncationPolicy::new(cfg.params.tail_mass_target)?;
    let mut radii = cfg.params.r_sweep.clone();
    radii.sort_by(f64::total_cmp);
    radii.dedup();
    let vs: Vec<Vec<i64>> = crate::translation::integer_ball(2, cfg.budget.sweep_radius);
    let mut t = Table::new("tv_sweep");
    let mut prev: Vec<Option<f64>> = vec![None; vs.len()];
    for &r in &radii {
        // Pieces conditioned on never leaving the initial state.
        let sigma = vec![alg.initial_state; cfg.params.m + 1];
        let laws = posterior_laws(&alg, &sigma, r, cfg.params.m, &policy)?;
        let tc = TranslationConfig { route: structure_route(cfg, route, r, true), d: cfg.budget.sweep_radius, controls: usize::MAX };
        let rep = translation_invariance_certify(&laws.measures, &tc)?;
        let all: Vec<(Vec<i64>, f64, bool)> = rep
            .kernel
            .iter()
            .map(|(v, tv)| (v.clone(), *tv, true))
            .chain(rep.control.iter().map(|(v, tv)| (v.clone(), *tv, false)))
            .collect();
        for (j, v) in vs.iter().enumerate() {
            let (_, tv, kernel) = all.iter().find(|a| &a.0 == v).expect("every v is kernel or control");
            let trend = match prev[j] {
                None => String::new(),
                Some(p) if (*tv - p).abs() <= TREND_TOL * p.max(1e-300) => "flat".into(),
                Some(p) if *tv < p => "down".into(),
                Some(_) => "up".into(),
            };
            prev[j] = Some(*tv);
            t.push(vec![
                sc.name.into(),
                route.to_string(),
                fmt_f(r),
                format!("{} {}", v[0], v[1]),
                kernel.to_string(),
                fmt_f(*tv),
                trend,
            ]);
        }
    }
    Ok(Outcome { tables: vec![t], ..Default::default() })
}

/// Row and failure counts of every table found in `out`.
pub fn summarize(out: &Path) -> Result<Outcome> {
    let mut t = Vec::new();
    let mut notes = Vec::new();
    for (name, _, _) in SCHEMA {
        let path = out.join(format!("{name}.csv"));
        if let Ok(text) = std::fs::read_to_string(&path) {
            let table = Table::from_csv(name, &text)?;
            notes.push(format!("{name}: {} rows, {} failed", table.rows.len(), table.failed()));
            t.push(table);
        }
    }
    if t.is_empty() {
        return Err(Error::Usage(format!("no result tables in {}", out.display())));
    }
    Ok(Outcome { tables: t, artifacts: Vec::new(), notes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrip_and_defaults() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        let partial = ExperimentConfig::from_toml_str("[run]\nscenario = \"mod3\"\n[params]\nr = 4.0\n").unwrap();
        assert_eq!(partial.run.scenario, "mod3");
        assert_eq!(partial.params.m, 8);
        assert!(ExperimentConfig::from_toml_str("[params]\nbogus = 1\n").is_err());
        for v in [Verb::VerifyLemmas, Verb::Extract, Verb::TvSweep, Verb::SmallBall] {
            c.validate(v).unwrap();
        }
    }

    #[test]
    fn validation_is_consolidated() {
        let mut c = ExperimentConfig::default();
        c.params.kappa = 1e-4;
        c.params.big_q = 16;
        let err = c.validate(Verb::Extract).unwrap_err().to_string();
        assert!(err.contains("2 problem(s)"), "{err}");
        let mut c = ExperimentConfig::default();
        c.params.r_sweep.clear();
        assert!(matches!(c.validate(Verb::TvSweep), Err(Error::Usage(_))));
        let mut c = ExperimentConfig::default();
        c.run.scenario = "nope".into();
        assert!(c.validate(Verb::Extract).unwrap_err().to_string().contains("registry"));
    }

    #[test]
    fn tables_roundtrip_csv() {
        let mut t = Table::new("smallball");
        t.push((0..9).map(|i| if i == 8 { "true".to_string() } else { i.to_string() }).collect());
        let back = Table::from_csv("smallball", &t.to_csv().unwrap()).unwrap();
        assert_eq!(back, t);
        assert_eq!(t.to_json()["rows"][0]["pass"], serde_json::Value::Bool(true));
        assert!(schema_text().contains("worst_kernel_tv"));
    }

    #[test]
    fn extract_constant_scenario() {
        let mut c = ExperimentConfig::default();
        c.run.scenario = "constant".into();
        c.params.m = 2;
        let out = extract(&c).unwrap();
        let row = &out.tables[0].rows[0];
        assert_eq!(row[5], "0");
        assert!(out.pass());
    }
}
