//! Named experiments: configuration, theorem reports and artifact output.
//!
//! Each preset solves one problem, checks the hypotheses of the matching
//! approximate-concavity statement numerically, measures its conclusion
//! (defect and envelope witness distance of the transformed solution) and
//! condenses both into a [`TheoremReport`]. A run never reaches a passing
//! verdict while any hypothesis check fails.

use crate::convexity::{
    concavity_defect, defect, delta_estimate_concavity, delta_estimate_harmonic, harmonic_defect,
    hc_dominance_check, hc_subadd_check, inverse_convexity_check, normal_sign_check, boundary_growth_check,
    ratio_convexity_check, ConvexityError, DefectReport, DominanceReport, EndpointSet, InverseReport, ProfileRow,
    RatioBounds, RatioReport, SampleRegion, SearchOptions, SubaddReport,
};
use crate::domain::{ConvexDomain, DomainError, DomainMask};
use crate::envelope::{concave_envelope_2d, concave_envelope_points, EnvelopeError, EnvelopeSummary};
use crate::fields::{apply_transform, FieldError, FieldTable, GridField, ScalarField, Transform};
use crate::geometry::Point;
use crate::par::Execution;
use crate::serde_ext::ext_f64;
use crate::solver::{
    solve_eigen_first, solve_perturbed, solve_poisson_with, solve_semilinear, NewtonOptions, Nonlinearity, Sign,
    SolveReport, SolverError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

/// Square of the first zero of the Bessel function `J0`.
pub const DISK_FIRST_EIGENVALUE: f64 = 5.783185962946784;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Convexity(#[from] ConvexityError),
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Configuration

/// Function of one positive scalar argument.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarSpec {
    Zero,
    Constant { value: f64 },
    /// `coef · t^exponent`.
    Power { coef: f64, exponent: f64 },
    /// `coef · t^exponent · (2 + sin t) / 3`.
    PowerSine { coef: f64, exponent: f64 },
    /// `a + c ln t + eps · t`.
    LogAffine { a: f64, c: f64, eps: f64 },
}

impl ScalarSpec {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            ScalarSpec::Zero => 0.0,
            ScalarSpec::Constant { value } => value,
            ScalarSpec::Power { coef, exponent } => coef * t.powf(exponent),
            ScalarSpec::PowerSine { coef, exponent } => coef * t.powf(exponent) * (2.0 + t.sin()) / 3.0,
            ScalarSpec::LogAffine { a, c, eps } => a + c * t.ln() + eps * t,
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        match *self {
            ScalarSpec::Zero | ScalarSpec::Constant { .. } => 0.0,
            ScalarSpec::Power { coef, exponent } => coef * exponent * t.powf(exponent - 1.0),
            ScalarSpec::PowerSine { coef, exponent } => {
                coef * (exponent * t.powf(exponent - 1.0) * (2.0 + t.sin()) + t.powf(exponent) * t.cos()) / 3.0
            }
            ScalarSpec::LogAffine { c, eps, .. } => c / t + eps,
        }
    }

    /// The same function with its perturbation amplitude multiplied by `k`.
    pub fn scaled(&self, k: f64) -> ScalarSpec {
        match *self {
            ScalarSpec::Zero => ScalarSpec::Zero,
            ScalarSpec::Constant { value } => ScalarSpec::Constant { value: k * value },
            ScalarSpec::Power { coef, exponent } => ScalarSpec::Power { coef: k * coef, exponent },
            ScalarSpec::PowerSine { coef, exponent } => ScalarSpec::PowerSine { coef: k * coef, exponent },
            ScalarSpec::LogAffine { a, c, eps } => ScalarSpec::LogAffine { a, c, eps: k * eps },
        }
    }
}

/// Function of the position, centred on the domain centre.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpatialSpec {
    Zero,
    Constant { value: f64 },
    /// `value + amp · (1 − |x − centre|²)`.
    Bump { value: f64, amp: f64 },
    /// `value + amp · cos(freq x) cos(freq y)` in centred coordinates.
    Ripple { value: f64, amp: f64, freq: f64 },
}

impl SpatialSpec {
    pub fn eval(&self, center: Point, x: Point) -> f64 {
        let d = x - center;
        match *self {
            SpatialSpec::Zero => 0.0,
            SpatialSpec::Constant { value } => value,
            SpatialSpec::Bump { value, amp } => value + amp * (1.0 - d.norm2()),
            SpatialSpec::Ripple { value, amp, freq } => value + amp * (freq * d.x).cos() * (freq * d.y).cos(),
        }
    }

    /// The same function with its perturbation amplitude multiplied by `k`.
    pub fn scaled(&self, k: f64) -> SpatialSpec {
        match *self {
            SpatialSpec::Bump { value, amp } => SpatialSpec::Bump { value, amp: k * amp },
            SpatialSpec::Ripple { value, amp, freq } => SpatialSpec::Ripple { value, amp: k * amp, freq },
            ref other => other.clone(),
        }
    }

    fn is_zero(&self) -> bool {
        matches!(self, SpatialSpec::Zero)
    }
}

fn unit_scale() -> Vec<f64> {
    vec![1.0]
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum Preset {
    /// `Δu + 1 = 0`; concavity of `√u`.
    Torsion,
    /// First Dirichlet eigenfunction; concavity of `log u`.
    EigenLog,
    /// `Δu + u^γ = 0`; concavity of `u^((1−γ)/2)`.
    KenningtonPower { gamma: f64 },
    /// `Δu + u^γ − u^((1+γ)/2) g(u) = 0`; `u^((1−γ)/2)` within `Cδ` of a concave function.
    PowerPerturbed {
        gamma: f64,
        g: ScalarSpec,
        /// Multipliers of the perturbation amplitude forming the δ-sweep.
        #[serde(default = "unit_scale")]
        scales: Vec<f64>,
        /// Claimed bound on the harmonic concavity value of the composed perturbation.
        #[serde(default)]
        expected_delta: Option<f64>,
    },
    /// `Δu + λu − u g(u) = 0`; `log u` within `Cδ` of a concave function.
    LogConcave {
        lambda: f64,
        g: ScalarSpec,
        c: f64,
        #[serde(default = "unit_scale")]
        scales: Vec<f64>,
    },
    /// `Δu + f(x) − u^((1+γ)/(1+2γ)) g(x) = 0`; `u^(γ/(1+2γ))` within `Cδ` of a concave function.
    SourcePerturbed {
        gamma: f64,
        f: SpatialSpec,
        g: SpatialSpec,
        #[serde(default = "unit_scale")]
        scales: Vec<f64>,
    },
    /// `Δv = b(x) + √δ v` with `b = source + δ φ(x)`; rate of the convex-envelope gap in δ.
    PerturbationRate {
        deltas: Vec<f64>,
        #[serde(default = "one")]
        source: f64,
        perturbation: SpatialSpec,
    },
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::Torsion => "torsion",
            Preset::EigenLog => "eigen_log",
            Preset::KenningtonPower { .. } => "kennington_power",
            Preset::PowerPerturbed { .. } => "power_perturbed",
            Preset::LogConcave { .. } => "log_concave",
            Preset::SourcePerturbed { .. } => "source_perturbed",
            Preset::PerturbationRate { .. } => "perturbation_rate",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    #[serde(flatten)]
    pub shape: ConvexDomain,
    /// Whether the domain satisfies an interior ball condition; defaults to
    /// true for disks and ellipses and false for polygons.
    #[serde(default)]
    pub interior_ball: Option<bool>,
}

impl Default for DomainSpec {
    fn default() -> Self {
        DomainSpec { shape: ConvexDomain::unit_disk(), interior_ball: None }
    }
}

impl DomainSpec {
    pub fn interior_ball(&self) -> bool {
        self.interior_ball.unwrap_or(self.shape.strictly_convex())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Grid spacing is `1 / n`.
    pub n: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { n: 64 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub lambda_steps: usize,
    pub refine: bool,
    pub max_points: usize,
    pub sequential: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        let d = SearchOptions::default();
        SearchConfig { lambda_steps: d.lambda_steps, refine: d.refine, max_points: d.max_points, sequential: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Linear solves (relative residual) and eigen iterations.
    pub linear: f64,
    /// Sup norm of the Newton residual.
    pub newton: f64,
    /// Defect and envelope gap accepted for an unperturbed power transform.
    pub defect: f64,
    pub gap: f64,
    /// Defect accepted for a log transform.
    pub log_defect: f64,
    /// Relative error accepted for the disk eigenvalue.
    pub eigenvalue: f64,
    /// Log transforms use only nodes with `u ≥ floor · max u`.
    pub floor: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { linear: 1e-10, newton: 1e-9, defect: 2e-3, gap: 2e-3, log_defect: 5e-3, eigenvalue: 0.01, floor: 1e-6 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub samples: usize,
    pub seed: u64,
    /// Required margin `g ≤ (1 − μ) s^((γ−1)/2)`.
    pub margin: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { samples: 10_000, seed: 20_240_601, margin: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub preset: Preset,
    #[serde(default)]
    pub domain: DomainSpec,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub probes: ProbeConfig,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn new(preset: Preset) -> Self {
        ExperimentSpec {
            preset,
            domain: DomainSpec::default(),
            grid: GridConfig::default(),
            search: SearchConfig::default(),
            tolerances: Tolerances::default(),
            probes: ProbeConfig::default(),
            output: None,
        }
    }

    /// Parses a TOML configuration. When `preset` is given it fills in or must
    /// match the `name` of the `[preset]` table.
    pub fn from_toml(text: &str, preset: Option<&str>) -> Result<Self, ExperimentError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ExperimentError::Config(e.to_string()))?;
        if let Some(name) = preset {
            let entry = table.entry("preset").or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let t = entry.as_table_mut().ok_or_else(|| ExperimentError::Config("`preset` must be a table".into()))?;
            match t.get("name").map(|v| v.as_str()) {
                None => {
                    t.insert("name".into(), toml::Value::String(name.into()));
                }
                Some(Some(given)) if given == name => {}
                Some(given) => {
                    return Err(ExperimentError::Config(format!(
                        "config describes preset {:?} but {name:?} was requested",
                        given.unwrap_or("<non-string>")
                    )))
                }
            }
        }
        let spec: ExperimentSpec = table.try_into().map_err(|e: toml::de::Error| ExperimentError::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.domain.shape.validate()?;
        if self.grid.n < 2 {
            return Err(ExperimentError::Config("grid.n must be at least 2".into()));
        }
        if self.search.lambda_steps == 0 || self.search.max_points < 2 {
            return Err(ExperimentError::Config("search needs lambda_steps ≥ 1 and max_points ≥ 2".into()));
        }
        if self.probes.samples == 0 {
            return Err(ExperimentError::Config("probes.samples must be positive".into()));
        }
        let scales = match &self.preset {
            Preset::PowerPerturbed { scales, .. } | Preset::LogConcave { scales, .. } | Preset::SourcePerturbed { scales, .. } => {
                Some(scales)
            }
            Preset::PerturbationRate { deltas, .. } => {
                if deltas.is_empty() || deltas.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
                    return Err(ExperimentError::Config("deltas must be a nonempty list of positive numbers".into()));
                }
                None
            }
            _ => None,
        };
        if let Some(s) = scales {
            if s.is_empty() || s.iter().any(|&k| !(k >= 0.0 && k.is_finite())) {
                return Err(ExperimentError::Config("scales must be a nonempty list of nonnegative numbers".into()));
            }
        }
        Ok(())
    }

    pub fn h(&self) -> f64 {
        1.0 / self.grid.n as f64
    }

    fn exec(&self) -> Execution {
        if self.search.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }

    pub fn search_options(&self) -> SearchOptions {
        SearchOptions {
            lambda_steps: self.search.lambda_steps,
            refine: self.search.refine,
            max_points: self.search.max_points,
            exec: self.exec(),
        }
    }

    fn newton(&self) -> NewtonOptions {
        NewtonOptions { tol: self.tolerances.newton, linear_tol: self.tolerances.linear, exec: self.exec(), ..NewtonOptions::default() }
    }
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    HypothesisRejected,
    Fail,
    SolverError,
}

impl Verdict {
    pub fn exit_code(self) -> i32 {
        match self {
            Verdict::Pass => 0,
            Verdict::HypothesisRejected => 1,
            Verdict::Fail => 2,
            Verdict::SolverError => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisCheck {
    pub name: String,
    pub pass: bool,
    #[serde(with = "ext_f64")]
    pub value: f64,
    /// Coordinates of the failing (or worst) probe: `[x, y]`, `[s]` or `[x, y, s]`.
    pub witness: Option<Vec<f64>>,
    pub detail: Option<String>,
}

impl HypothesisCheck {
    fn new(name: &str, pass: bool, value: f64) -> Self {
        HypothesisCheck { name: name.into(), pass, value, witness: None, detail: None }
    }

    fn at(mut self, witness: Vec<f64>) -> Self {
        self.witness = Some(witness);
        self
    }

    fn note(mut self, detail: impl Into<String>) -> Self {
        self.detail = Some(detail.into());
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    pub iterations: usize,
    pub residual: f64,
    pub linear_iterations: usize,
    pub sup_norm: f64,
    pub positive: bool,
    pub eigenvalue: Option<f64>,
}

impl SolveSummary {
    fn from(rep: &SolveReport, u: &GridField) -> Self {
        SolveSummary {
            iterations: rep.iterations,
            residual: rep.residual,
            linear_iterations: rep.linear_iterations,
            sup_norm: sup_interior(u),
            positive: rep.positive,
            eigenvalue: None,
        }
    }
}

/// One run of a δ-sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    /// Perturbation multiplier, or δ itself for the rate study.
    pub parameter: f64,
    pub delta: f64,
    pub witness_distance: f64,
    pub gap: f64,
    #[serde(with = "ext_f64")]
    pub defect: f64,
    /// `witness_distance / δ`; infinite for `δ = 0` with a positive gap.
    #[serde(with = "ext_f64")]
    pub ratio: f64,
    /// Sup distance to the unperturbed solution, when measured.
    pub sup_diff: Option<f64>,
    /// Envelope gap of the same problem without the δ-part.
    pub floor_gap: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    /// Least-squares slope of `ln gap` against `ln δ` over points above the floor.
    pub exponent: Option<f64>,
    /// Largest envelope gap without the δ-part.
    pub floor: f64,
    pub floor_dominated: bool,
    pub fitted_points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub preset: Preset,
    pub domain: ConvexDomain,
    pub h: f64,
    pub hypotheses: Vec<HypothesisCheck>,
    pub solve: Option<SolveSummary>,
    pub transform: Option<String>,
    /// Measured perturbation size.
    pub delta: Option<f64>,
    /// Measured monotonicity floor (β, or `c` for the log preset).
    pub beta: Option<f64>,
    pub defect: Option<DefectReport>,
    pub envelope: Option<EnvelopeSummary>,
    pub witness_distance: Option<f64>,
    /// `C δ` for the largest δ of the sweep.
    pub bound_rhs: Option<f64>,
    pub fitted_constant: Option<f64>,
    /// Discretization allowance added to the bound.
    pub allowance: Option<f64>,
    pub sweep: Vec<SweepEntry>,
    pub rate: Option<RateFit>,
    /// Set when a hypothesis could only be checked after solving.
    pub conditional: bool,
    pub verdict: Verdict,
    pub notes: Vec<String>,
}

impl TheoremReport {
    fn new(spec: &ExperimentSpec) -> Self {
        TheoremReport {
            preset: spec.preset.clone(),
            domain: spec.domain.shape.clone(),
            h: spec.h(),
            hypotheses: Vec::new(),
            solve: None,
            transform: None,
            delta: None,
            beta: None,
            defect: None,
            envelope: None,
            witness_distance: None,
            bound_rhs: None,
            fitted_constant: None,
            allowance: None,
            sweep: Vec::new(),
            rate: None,
            conditional: false,
            verdict: Verdict::Fail,
            notes: Vec::new(),
        }
    }

    pub fn hypotheses_hold(&self) -> bool {
        self.hypotheses.iter().all(|c| c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&HypothesisCheck> {
        self.hypotheses.iter().find(|c| c.name == name)
    }

    fn conclude(&mut self, conclusion: bool) {
        self.verdict = if !self.hypotheses_hold() {
            Verdict::HypothesisRejected
        } else if conclusion {
            Verdict::Pass
        } else {
            Verdict::Fail
        };
    }

    fn rejected(mut self) -> Self {
        self.verdict = Verdict::HypothesisRejected;
        self
    }

    fn solver_failed(mut self, what: &str, e: &SolverError) -> Self {
        self.verdict = Verdict::SolverError;
        self.notes.push(format!("{what}: {e}"));
        self
    }
}

/// A report together with the artifacts worth dumping.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub report: TheoremReport,
    pub fields: Vec<(String, GridField)>,
    pub defect_table: Vec<ProfileRow>,
}

impl ExperimentOutcome {
    fn bare(report: TheoremReport) -> Self {
        ExperimentOutcome { report, fields: Vec::new(), defect_table: Vec::new() }
    }

    pub fn field(&self, name: &str) -> Option<&GridField> {
        self.fields.iter().find(|(n, _)| n == name).map(|(_, f)| f)
    }
}

// ---------------------------------------------------------------------------
// Shared steps

fn sup_interior(u: &GridField) -> f64 {
    u.interior_values().iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

fn build_mask(spec: &ExperimentSpec) -> Result<Arc<DomainMask>, ExperimentError> {
    Ok(Arc::new(DomainMask::with_spacing(&spec.domain.shape, spec.h())?))
}

fn hopf_check(u: &GridField) -> Result<HypothesisCheck, ExperimentError> {
    let rep = normal_sign_check(u, None)?;
    Ok(HypothesisCheck::new("hopf_normal_sign", rep.pass, rep.worst_value)
        .at(vec![rep.worst_point.x, rep.worst_point.y])
        .note(format!("largest normal derivative against threshold -{:e}", rep.threshold)))
}

/// Growth check from the four extreme boundary samples towards the centre.
fn growth_check(u: &GridField, alpha: f64) -> Result<HypothesisCheck, ExperimentError> {
    let mask = u.mask();
    let center = mask.domain.center();
    let mut worst: Option<(f64, Point)> = None;
    let mut pass = true;
    let key: [fn(Point) -> f64; 4] = [|p| p.x, |p| -p.x, |p| p.y, |p| -p.y];
    for k in key {
        let y = mask
            .samples
            .iter()
            .map(|s| s.point)
            .max_by(|a, b| k(*a).total_cmp(&k(*b)))
            .ok_or_else(|| ExperimentError::Config("mask has no boundary samples".into()))?;
        let rep = boundary_growth_check(u, alpha, y, center, None)?;
        let margin = rep.surrogate - rep.u_z;
        pass &= rep.pass;
        if worst.is_none_or(|(m, _)| margin < m) {
            worst = Some((margin, y));
        }
    }
    let (margin, y) = worst.expect("four directions");
    Ok(HypothesisCheck::new("boundary_growth", pass, margin)
        .at(vec![y.x, y.y])
        .note(format!("growth surrogate minus centre value at exponent {alpha}")))
}

fn interior_ball_check(spec: &ExperimentSpec) -> HypothesisCheck {
    HypothesisCheck::new("interior_ball", spec.domain.interior_ball(), if spec.domain.interior_ball() { 1.0 } else { 0.0 })
}

fn gamma_check(name: &str, gamma: f64, ok: bool, range: &str) -> HypothesisCheck {
    HypothesisCheck::new(name, ok, gamma).note(format!("exponent must lie in {range}"))
}

/// Defect, envelope and fields of `u^alpha`.
struct PowerMeasure {
    defect: DefectReport,
    transformed: GridField,
    envelope: crate::envelope::EnvelopeResult,
}

fn measure_power(u: &GridField, alpha: f64, opts: &SearchOptions) -> Result<PowerMeasure, ExperimentError> {
    let t = Transform::Power(alpha);
    let defect = concavity_defect(u, &t, None, opts)?;
    let transformed = apply_transform(u, &t)?;
    let envelope = concave_envelope_2d(&transformed)?;
    Ok(PowerMeasure { defect, transformed, envelope })
}

/// Defect and envelope of `log u` on the locations where `u ≥ floor`.
fn measure_log(u: &GridField, floor: f64, opts: &SearchOptions) -> Result<(DefectReport, EnvelopeSummary), ExperimentError> {
    let defect = concavity_defect(u, &Transform::Log, Some(floor), opts)?;
    let set = EndpointSet::of(u).retain(|_, v| v >= floor);
    let logs: Vec<f64> = set.values.iter().map(|v| v.ln()).collect();
    let env = concave_envelope_points(&set.points, &logs)?;
    let summary = EnvelopeSummary { gap: env.gap, witness_distance: env.witness_distance, argmax: set.points[env.argmax] };
    Ok((defect, summary))
}

fn take_profile(rep: &mut DefectReport) -> Vec<ProfileRow> {
    std::mem::take(&mut rep.profile)
}

/// Fits `C` on the smallest positive δ and tests every entry against `C δ + allowance`.
fn judge_sweep(entries: &[SweepEntry], allowance: f64) -> (Option<f64>, bool) {
    let Some(base) = entries.iter().filter(|e| e.delta > 0.0 && e.error.is_none()).min_by(|a, b| a.delta.total_cmp(&b.delta)) else {
        return (None, false);
    };
    let c = base.witness_distance / base.delta;
    let ok = entries.iter().all(|e| e.error.is_none() && e.witness_distance <= c * e.delta + allowance + ROUNDOFF);
    (Some(c), ok)
}

/// Slack for comparisons of quantities computed in floating point.
const ROUNDOFF: f64 = 1e-12;

fn probe_values(lo: f64, hi: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![lo, hi];
    out.extend((0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()));
    out
}

/// Random points of the closed domain by rejection from the bounding box.
fn probe_points(domain: &ConvexDomain, n: usize, seed: u64) -> Vec<Point> {
    let b = domain.bbox();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = Point::new(b.xmin + (b.xmax - b.xmin) * rng.random::<f64>(), b.ymin + (b.ymax - b.ymin) * rng.random::<f64>());
        if domain.contains(p) {
            out.push(p);
        }
    }
    out
}

/// Supremum of the harmonic concavity value of a scalar function over
/// `(0, hi]`: a log-spaced and a uniform lattice times the λ-grid, plus seeded pairs.
fn sup_harmonic_scalar(h: impl Fn(f64) -> f64, hi: f64, lambda_steps: usize, samples: usize, seed: u64) -> (f64, [f64; 3]) {
    let mut ss: Vec<f64> = (0..48).map(|k| hi * 10f64.powf(-6.0 * k as f64 / 47.0)).collect();
    ss.extend((1..=48).map(|k| hi * k as f64 / 48.0));
    let mut best = (f64::NEG_INFINITY, [0.0; 3]);
    let mut visit = |s1: f64, s3: f64, lam: f64| {
        let s2 = lam * s1 + (1.0 - lam) * s3;
        if let Some(v) = harmonic_defect(h(s1), h(s2), h(s3), lam) {
            if v > best.0 {
                best = (v, [s1, s3, lam]);
            }
        }
    };
    for &s1 in &ss {
        for &s3 in &ss {
            for k in 0..=lambda_steps {
                visit(s1, s3, k as f64 / lambda_steps as f64);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..samples {
        let (a, b, lam): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
        visit(hi * a.max(1e-12), hi * b.max(1e-12), lam);
    }
    best
}

// ---------------------------------------------------------------------------
// Presets

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome, ExperimentError> {
    spec.validate()?;
    match &spec.preset {
        Preset::Torsion => run_torsion(spec),
        Preset::EigenLog => run_eigen_log(spec),
        Preset::KenningtonPower { gamma } => run_kennington_power(spec, *gamma),
        Preset::PowerPerturbed { gamma, g, scales, expected_delta } => run_power_perturbed(spec, *gamma, g, scales, *expected_delta),
        Preset::LogConcave { lambda, g, c, scales } => run_log_concave(spec, *lambda, g, *c, scales),
        Preset::SourcePerturbed { gamma, f, g, scales } => run_source_perturbed(spec, *gamma, f, g, scales),
        Preset::PerturbationRate { deltas, source, perturbation } => run_perturbation_rate(spec, deltas, *source, perturbation),
    }
}

/// Fills the conclusion of an unperturbed power-concavity statement.
fn conclude_power(spec: &ExperimentSpec, mut report: TheoremReport, u: GridField, alpha: f64) -> Result<ExperimentOutcome, ExperimentError> {
    let opts = spec.search_options();
    report.hypotheses.push(hopf_check(&u)?);
    let mut m = measure_power(&u, alpha, &opts)?;
    let table = take_profile(&mut m.defect);
    let tol = &spec.tolerances;
    let ok = m.defect.sup_value <= tol.defect && m.envelope.gap <= tol.gap;
    report.transform = Some(Transform::Power(alpha).to_string());
    report.delta = Some(0.0);
    report.witness_distance = Some(m.envelope.witness_distance);
    report.bound_rhs = Some(0.0);
    report.allowance = Some(0.5 * tol.gap);
    report.envelope = Some(m.envelope.summary());
    report.defect = Some(m.defect);
    report.conclude(ok);
    Ok(ExperimentOutcome {
        report,
        fields: vec![
            ("u".into(), u),
            ("transformed".into(), m.transformed),
            ("envelope".into(), m.envelope.envelope),
            ("witness".into(), m.envelope.witness),
        ],
        defect_table: table,
    })
}

fn run_torsion(spec: &ExperimentSpec) -> Result<ExperimentOutcome, ExperimentError> {
    let mut report = TheoremReport::new(spec);
    let mask = build_mask(spec)?;
    let (u, rep) = match solve_poisson_with(&mask, &GridField::constant(&mask, 1.0), spec.tolerances.linear, spec.exec()) {
        Ok(x) => x,
        Err(e) => return Ok(ExperimentOutcome::bare(report.solver_failed("torsion solve", &e))),
    };
    report.solve = Some(SolveSummary::from(&rep, &u));
    conclude_power(spec, report, u, 0.5)
}

fn run_eigen_log(spec: &ExperimentSpec) -> Result<ExperimentOutcome, ExperimentError> {
    let mut report = TheoremReport::new(spec);
    let mask = build_mask(spec)?;
    let (lambda, u, rep) = match solve_eigen_first(&mask, spec.tolerances.linear) {
        Ok(x) => x,
        Err(e) => return Ok(ExperimentOutcome::bare(report.solver_failed("eigen solve", &e))),
    };
    report.solve = Some(SolveSummary {
        iterations: rep.iterations,
        residual: rep.residual,
        linear_iterations: rep.linear_iterations,
        sup_norm: sup_interior(&u),
        positive: u.interior_values().iter().all(|&v| v > 0.0),
        eigenvalue: Some(lambda),
    });
    let min = u.interior_values().iter().fold(f64::INFINITY, |a, &v| a.min(v));
    report.hypotheses.push(HypothesisCheck::new("positive_eigenfunction", min > 0.0, min));
    if let ConvexDomain::Disk { radius, .. } = spec.domain.shape {
        let exact = DISK_FIRST_EIGENVALUE / (radius * radius);
        let rel = (lambda - exact).abs() / exact;
        report.hypotheses.push(
            HypothesisCheck::new("disk_eigenvalue", rel <= spec.tolerances.eigenvalue, rel).note(format!("lambda = {lambda}, exact {exact}")),
        );
    }
    report.hypotheses.push(hopf_check(&u)?);
    let floor = spec.tolerances.floor * sup_interior(&u);
    let (mut d, env) = measure_log(&u, floor, &spec.search_options())?;
    let table = take_profile(&mut d);
    let tol = spec.tolerances.log_defect;
    let ok = d.sup_value <= tol && env.gap <= tol;
    report.transform = Some(Transform::Log.to_string());
    report.delta = Some(0.0);
    report.witness_distance = Some(env.witness_distance);
    report.bound_rhs = Some(0.0);
    report.allowance = Some(0.5 * tol);
    report.envelope = Some(env);
    report.defect = Some(d);
    report.notes.push(format!("log transform restricted to locations with u >= {floor:e}"));
    report.conclude(ok);
    Ok(ExperimentOutcome { report, fields: vec![("u".into(), u)], defect_table: table })
}

fn solve_power(spec: &ExperimentSpec, mask: &Arc<DomainMask>, gamma: f64) -> Result<(GridField, SolveReport), SolverError> {
    if gamma == 0.0 {
        solve_poisson_with(mask, &GridField::constant(mask, 1.0), spec.tolerances.linear, spec.exec())
    } else {
        solve_semilinear(mask, &Nonlinearity::power(gamma), Sign::Plus, None, &spec.newton())
    }
}

fn run_kennington_power(spec: &ExperimentSpec, gamma: f64) -> Result<ExperimentOutcome, ExperimentError> {
    let mut report = TheoremReport::new(spec);
    let gamma_ok = (0.0..1.0).contains(&gamma);
    report.hypotheses.push(gamma_check("gamma_range", gamma, gamma_ok, "[0, 1)"));
    report.hypotheses.push(interior_ball_check(spec));
    if !report.hypotheses_hold() {
        return Ok(ExperimentOutcome::bare(report.rejected()));
    }
    let mask = build_mask(spec)?;
    let (u, rep) = match solve_power(spec, &mask, gamma) {
        Ok(x) => x,
        Err(e) => return Ok(ExperimentOutcome::bare(report.solver_failed("power solve", &e))),
    };
    report.solve = Some(SolveSummary::from(&rep, &u));
    let alpha = (1.0 - gamma) / 2.0;
    report.hypotheses.push(growth_check(&u, alpha)?);
    conclude_power(spec, report, u, alpha)
}

/// `s^γ − s^((1+γ)/2) g(s)`, or the plain power when `g` vanishes identically.
fn perturbed_power(gamma: f64, g: &ScalarSpec) -> Nonlinearity {
    if *g == ScalarSpec::Zero {
        return Nonlinearity::power(gamma);
    }
    let p = (1.0 + gamma) / 2.0;
    let (g1, g2) = (g.clone(), g.clone());
    Nonlinearity::new(
        format!("s^{gamma} - s^{p} g(s)"),
        move |_, s| s.powf(gamma) - s.powf(p) * g1.eval(s),
        move |_, s| gamma * s.powf(gamma - 1.0) - p * s.powf(p - 1.0) * g2.eval(s) - s.powf(p) * g2.derivative(s),
    )
    .with_range(0.0, f64::INFINITY)
}

/// Checks of the perturbation `g` on `(0, m]`; returns the checks and the measured δ.
fn power_perturbation_checks(spec: &ExperimentSpec, gamma: f64, g: &ScalarSpec, m: f64) -> (Vec<HypothesisCheck>, f64) {
    let pc = &spec.probes;
    let ss = probe_values(m * 1e-6, m, pc.samples, pc.seed);
    let cap = |s: f64| (1.0 - pc.margin) * s.powf((gamma - 1.0) / 2.0);
    let worst = |f: &dyn Fn(f64) -> f64| ss.iter().map(|&s| (f(s), s)).fold((f64::INFINITY, 0.0), |a, b| if b.0 < a.0 { b } else { a });
    let (pos, s_pos) = worst(&|s| g.eval(s));
    let (mono, s_mono) = worst(&|s| g.derivative(s));
    let (room, s_room) = worst(&|s| cap(s) - g.eval(s));
    let mut checks = vec![
        HypothesisCheck::new("perturbation_nonnegative", pos >= 0.0, pos).at(vec![s_pos]),
        HypothesisCheck::new("perturbation_monotone", mono >= 0.0, mono).at(vec![s_mono]),
        HypothesisCheck::new("perturbation_margin", room >= 0.0, room)
            .at(vec![s_room])
            .note(format!("min of (1 - {}) s^((γ-1)/2) - g(s)", pc.margin)),
    ];
    // The composed function is sampled on the range of u^((1−γ)/2).
    let e = 2.0 / (1.0 - gamma);
    let (delta, at) = sup_harmonic_scalar(|s| g.eval(s.powf(e)), m.powf(1.0 / e), spec.search.lambda_steps, pc.samples, pc.seed ^ 1);
    let delta = delta.max(0.0);
    checks.push(HypothesisCheck::new("harmonic_perturbation_measured", true, delta).at(at.to_vec()));
    (checks, delta)
}

fn run_power_perturbed(
    spec: &ExperimentSpec,
    gamma: f64,
    g: &ScalarSpec,
    scales: &[f64],
    expected_delta: Option<f64>,
) -> Result<ExperimentOutcome, ExperimentError> {
    let mut report = TheoremReport::new(spec);
    report.hypotheses.push(gamma_check("gamma_range", gamma, (0.0..1.0).contains(&gamma), "[0, 1)"));
    report.hypotheses.push(interior_ball_check(spec));
    if !report.hypotheses_hold() {
        return Ok(ExperimentOutcome::bare(report.rejected()));
    }
    let mask = build_mask(spec)?;
    let opts = spec.search_options();
    let alpha = (1.0 - gamma) / 2.0;
    // The unperturbed solution dominates every perturbed one, so its maximum bounds the probe range.
    let (u0, _) = match solve_power(spec, &mask, gamma) {
        Ok(x) => x,
        Err(e) => return Ok(ExperimentOutcome::bare(report.solver_failed("unperturbed solve", &e))),
    };
    let m0 = sup_interior(&u0);
    let base_defect = concavity_defect(&u0, &Transform::Power(alpha), None, &opts)?.sup_value.max(0.0);
    let allowance = 3.0 * base_defect;
    let mut deltas = Vec::with_capacity(scales.len());
    for &k in scales {
        let (checks, delta) = power_perturbation_checks(spec, gamma, &g.scaled(k), m0);
        for mut c in checks {
            c.name = format!("{}[scale={k}]", c.name);
            report.hypotheses.push(c);
        }
        if let Some(claim) = expected_delta {
            report.hypotheses.push(
                HypothesisCheck::new(&format!("expected_delta[scale={k}]"), delta <= claim * k + ROUNDOFF, delta)
                    .note(format!("claimed bound {}", claim * k)),
            );
        }
        deltas.push(delta);
    }
    if !report.hypotheses_hold() {
        return Ok(ExperimentOutcome::bare(report.rejected()));
    }
    let mut last: Option<(GridField, PowerMeasure, SolveReport)> = None;
    for (&k, &delta) in scales.iter().zip(&deltas) {
        let gk = g.scaled(k);
        let solved = if gk == ScalarSpec::Zero || k == 0.0 {
            Ok((u0.clone(), SolveReport { iterations: 0, residual: 0.0, damping: Vec::new(), converged: true, linear_iterations: 0, positive: true }))
        } else {
            solve_semilinear(&mask, &perturbed_power(gamma, &gk), Sign::Plus, Some(&u0), &spec.newton())
        };
        let (u, rep) = match solved {
            Ok(x) => x,
            Err(e) => return Ok(ExperimentOutcome::bare(report.solver_failed(&format!("perturbed solve at scale {k}"), &e))),
        };
        let m = sup_interior(&u);
        report.hypotheses.push(
            HypothesisCheck::new(&format!("max_within_probe_range[scale={k}]"), m <= m0 * (1.0 + 1e-9), m)
                .note(format!("probes covered (0, {m0}]")),
        );
        let meas = measure_power(&u, alpha, &opts)?;
        report.sweep.push(SweepEntry {
            parameter: k,
            delta,
            witness_distance: meas.envelope.witness_distance,
            gap: meas.envelope.gap,
            defect: meas.defect.sup_value,
            ratio: crate::envelope::ratio_from(meas.envelope.witness_distance, delta).ratio,
            sup_diff: Some(u.max_abs_diff(&u0)),
            floor_gap: None,
            error: None,
        });
        last = Some((u, meas, rep));
    }
    let (u, mut meas, rep) = last.expect("nonempty sweep");
    report.hypotheses.push(hopf_check(&u)?);
    report.hypotheses.push(growth_check(&u, alpha)?);
    report.solve = Some(SolveSummary::from(&rep, &u));
    let table = take_profile(&mut meas.defect);
    finish_sweep(spec, &mut report, allowance, &meas.defect, meas.envelope.summary());
    report.transform = Some(Transform::Power(alpha).to_string());
    report.defect = Some(meas.defect);
    Ok(ExperimentOutcome {
        report,
        fields: vec![
            ("u".into(), u),
            ("transformed".into(), meas.transformed),
            ("envelope".into(), meas.envelope.envelope),
            ("witness".into(), meas.envelope.witness),
        ],
        defect_table: table,
    })
}

/// Conclusion of a δ-sweep: a fitted linear bound, or the unperturbed tolerance when every δ is zero.
fn finish_sweep(spec: &ExperimentSpec, report: &mut TheoremReport, allowance: f64, last_defect: &DefectReport, env: EnvelopeSummary) {
    let last = report.sweep.last().cloned().expect("nonempty sweep");
    report.delta = Some(last.delta);
    report.witness_distance = Some(last.witness_distance);
    report.envelope = Some(env);
    let ok = if report.sweep.iter().all(|e| e.delta == 0.0) {
        let tol = &spec.tolerances;
        report.bound_rhs = Some(0.0);
        report.allowance = Some(0.5 * tol.gap);
        report.notes.push("every measured delta is zero: the unperturbed tolerances apply".into());
        report.sweep.iter().all(|e| e.defect <= tol.defect && e.gap <= tol.gap) && last_defect.sup_value <= tol.defect
    } else {
        let (c, ok) = judge_sweep(&report.sweep, allowance);
        report.fitted_constant = c;
        report.bound_rhs = c.map(|c| c * last.delta);
        report.allowance = Some(allowance);
        ok
    };
    let delta_max = report.sweep.iter().map(|e| e.delta).fold(0.0, f64::max);
    if delta_max > 0.0 {
        let spread = sweep_ratio_spread(&report.sweep);
        report.notes.push(format!("witness_distance / delta varies by a factor {spread} across the sweep"));
    }
    report.conclude(ok);
}

/// `max / min` of `witness_distance / δ` over entries with positive δ.
pub fn sweep_ratio_spread(entries: &[SweepEntry]) -> f64 {
    let ratios: Vec<f64> = entries.iter().filter(|e| e.delta > 0.0).map(|e| e.witness_distance / e.delta).collect();
    let (lo, hi) = ratios.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &r| (a.min(r), b.max(r)));
    if hi == 0.0 {
        f64::NAN
    } else {
        hi / lo
    }
}

/// `λ s − s g(s)`.
fn log_nonlinearity(lambda: f64, g: &ScalarSpec) -> Nonlinearity {
    let (g1, g2) = (g.clone(), g.clone());
    Nonlinearity::new(
        format!("{lambda} s - s g(s)"),
        move |_, s| s * (lambda - g1.eval(s)),
        move |_, s| lambda - g2.eval(s) - s * g2.derivative(s),
    )
    .with_range(0.0, f64::INFINITY)
}

fn run_log_concave(spec: &ExperimentSpec, lambda: f64, g: &ScalarSpec, c: f64, scales: &[f64]) -> Result<ExperimentOutcome, ExperimentError> {
    let mut report = TheoremReport::new(spec);
    let strict = spec.domain.shape.strictly_convex() && spec.domain.shape.strict_convexity_check(64);
    report.hypotheses.push(HypothesisCheck::new("strictly_convex_domain", strict, if strict { 1.0 } else { 0.0 }));
    report.hypotheses.push(HypothesisCheck::new("positive_parameters", lambda > 0.0 && c > 0.0, lambda.min(c)));
    if !report.hypotheses_hold() {
        return Ok(ExperimentOutcome::bare(report.rejected()));
    }
    let mask = build_mask(spec)?;
    let opts = spec.search_options();
    let pc = &spec.probes;
    let mut last = None;
    let mut base_defect = None;
    for &k in scales {
        let gk = g.scaled(k);
        let (u, rep) = match solve_semilinear(&mask, &log_nonlinearity(lambda, &gk), Sign::Plus, None, &spec.newton()) {
            Ok(x) => x,
            Err(e) => return Ok(ExperimentOutcome::bare(report.solver_failed(&format!("solve at scale {k}"), &e))),
        };
        report.conditional = true;
        // Probes cover the range of u attained at interior nodes.
        let vals = u.interior_values();
        let (lo, m) = vals.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        let ts = probe_values(lo, m, pc.samples, pc.seed);
        let min_by = |f: &dyn Fn(f64) -> f64| ts.iter().map(|&t| (f(t), t)).fold((f64::INFINITY, 0.0), |a, b| if b.0 < a.0 { b } else { a });
        let (pos, t_pos) = min_by(&|t| gk.eval(t));
        let (cap, t_cap) = min_by(&|t| lambda - gk.eval(t));
        let (slope, t_slope) = min_by(&|t| gk.derivative(t) * t);
        let tag = |n: &str| format!("{n}[scale={k}]");
        report.hypotheses.push(HypothesisCheck::new(&tag("perturbation_positive"), pos > 0.0, pos).at(vec![t_pos]));
        report.hypotheses.push(HypothesisCheck::new(&tag("perturbation_below_lambda"), cap >= 0.0, cap).at(vec![t_cap]));
        report.hypotheses.push(
            HypothesisCheck::new(&tag("perturbation_log_slope"), slope >= c, slope)
                .at(vec![t_slope])
                .note(format!("min of t g'(t) against c = {c} on [{lo:e}, {m:e}]")),
        );
        report.beta = Some(report.beta.map_or(slope, |b: f64| b.min(slope)));
        // b(x, s) = λ − g(e^(−s)) along w = −log u; its joint convexity value is that of h(s) = g(e^(−s)).
        let gb = gk.clone();
        let b = Nonlinearity::without_derivative("lambda - g(exp(-s))", move |_, s| lambda - gb.eval((-s).exp()));
        let w = apply_transform(&u, &Transform::NegLog)?;
        let drep = delta_estimate_concavity(&b, &w, None, &opts)?;
        let floor = spec.tolerances.floor * m;
        let (d, env) = measure_log(&u, floor, &opts)?;
        if k == 0.0 || gk == *g && scales.len() == 1 {
            base_defect.get_or_insert(d.sup_value.max(0.0));
        }
        report.sweep.push(SweepEntry {
            parameter: k,
            delta: drep.delta,
            witness_distance: env.witness_distance,
            gap: env.gap,
            defect: d.sup_value,
            ratio: crate::envelope::ratio_from(env.witness_distance, drep.delta).ratio,
            sup_diff: None,
            floor_gap: None,
            error: None,
        });
        report.hypotheses.push(hopf_check(&u)?.named(&tag("hopf_normal_sign")));
        last = Some((u, rep, d, env));
    }
    let (u, rep, mut d, env) = last.expect("nonempty sweep");
    report.solve = Some(SolveSummary::from(&rep, &u));
    let table = take_profile(&mut d);
    let allowance = 3.0 * base_defect.unwrap_or(0.0);
    let mut tol = spec.clone();
    tol.tolerances.defect = spec.tolerances.log_defect;
    tol.tolerances.gap = spec.tolerances.log_defect;
    finish_sweep(&tol, &mut report, allowance, &d, env);
    report.transform = Some(Transform::Log.to_string());
    report.defect = Some(d);
    report.notes.push("hypotheses on g are probed on the range of u at interior nodes, after solving".into());
    Ok(ExperimentOutcome { report, fields: vec![("u".into(), u)], defect_table: table })
}

impl HypothesisCheck {
    fn named(mut self, name: &str) -> Self {
        self.name = name.into();
        self
    }
}

/// `f(x) − s^p g(x)` with `p = (1+γ)/(1+2γ)`.
fn source_nonlinearity(gamma: f64, center: Point, f: &SpatialSpec, g: &SpatialSpec) -> Nonlinearity {
    let p = (1.0 + gamma) / (1.0 + 2.0 * gamma);
    let (f1, g1, g2) = (f.clone(), g.clone(), g.clone());
    if g.is_zero() {
        return Nonlinearity::new("f(x)", move |x, _| f1.eval(center, x), |_, _| 0.0);
    }
    Nonlinearity::new(
        format!("f(x) - s^{p} g(x)"),
        move |x, s| f1.eval(center, x) - s.powf(p) * g1.eval(center, x),
        move |x, s| -p * s.powf(p - 1.0) * g2.eval(center, x),
    )
    .with_range(0.0, f64::INFINITY)
}

fn run_source_perturbed(
    spec: &ExperimentSpec,
    gamma: f64,
    f: &SpatialSpec,
    g: &SpatialSpec,
    scales: &[f64],
) -> Result<ExperimentOutcome, ExperimentError> {
    let mut report = TheoremReport::new(spec);
    report.hypotheses.push(gamma_check("gamma_range", gamma, gamma >= 1.0, "[1, inf)"));
    report.hypotheses.push(interior_ball_check(spec));
    let domain = &spec.domain.shape;
    let center = domain.center();
    let pc = &spec.probes;
    let pts = probe_points(domain, pc.samples, pc.seed);
    let (fmin, at) = pts.iter().map(|&p| (f.eval(center, p), p)).fold((f64::INFINITY, Point::ORIGIN), |a, b| if b.0 < a.0 { b } else { a });
    report.hypotheses.push(HypothesisCheck::new("source_lower_bound", fmin > 0.0, fmin).at(vec![at.x, at.y]));
    report.beta = Some(fmin);
    // Concavity of f^γ on seeded triples of the domain.
    let region = SampleRegion::new(Point::new(domain.bbox().xmin, domain.bbox().ymin), Point::new(domain.bbox().xmax, domain.bbox().ymax), [0.0, 1.0]);
    let fg = |x: Point| f.eval(center, x).max(0.0).powf(gamma);
    let mut worst = (f64::NEG_INFINITY, Point::ORIGIN);
    for q in region.queries(pc.samples, pc.seed ^ 2) {
        if !(domain.contains(q.y1) && domain.contains(q.y3)) {
            continue;
        }
        let v = -defect(-fg(q.y1), -fg(q.y2()), -fg(q.y3), q.lambda);
        let v = -v;
        if v > worst.0 {
            worst = (v, q.y2());
        }
    }
    let scale = fmin.abs().max(1.0).powf(gamma);
    report.hypotheses.push(
        HypothesisCheck::new("source_power_concave", worst.0 <= ROUNDOFF * scale, worst.0)
            .at(vec![worst.1.x, worst.1.y])
            .note("max convexity value of -f^gamma on seeded triples"),
    );
    if !report.hypotheses_hold() {
        return Ok(ExperimentOutcome::bare(report.rejected()));
    }
    let mask = build_mask(spec)?;
    let opts = spec.search_options();
    let alpha = gamma / (1.0 + 2.0 * gamma);
    let p = (1.0 + gamma) / (1.0 + 2.0 * gamma);
    let mut last = None;
    let mut base_defect = None;
    for &k in scales {
        let gk = g.scaled(k);
        let tag = |n: &str| format!("{n}[scale={k}]");
        let gmin = pts.iter().map(|&x| gk.eval(center, x)).fold(f64::INFINITY, f64::min);
        report.hypotheses.push(HypothesisCheck::new(&tag("absorption_nonnegative"), gmin >= 0.0, gmin));
        let b = source_nonlinearity(gamma, center, f, &gk);
        let (u, rep) = match solve_semilinear(&mask, &b, Sign::Plus, None, &spec.newton()) {
            Ok(x) => x,
            Err(e) => return Ok(ExperimentOutcome::bare(report.solver_failed(&format!("solve at scale {k}"), &e))),
        };
        let m = sup_interior(&u);
        // The m-dependent hypothesis is only available after solving.
        report.conditional = true;
        let (slack, at) = pts
            .iter()
            .map(|&x| (f.eval(center, x) - m.powf(p) * gk.eval(center, x), x))
            .fold((f64::INFINITY, Point::ORIGIN), |a, b| if b.0 < a.0 { b } else { a });
        report.hypotheses.push(HypothesisCheck::new(&tag("source_dominates_absorption"), slack >= 0.0, slack).at(vec![at.x, at.y]));
        // δ: sup of HC_g over seeded interior triples and over the grid sweep.
        let hg = {
            let gx = gk.clone();
            Nonlinearity::without_derivative("g(x)", move |x, _| gx.eval(center, x))
        };
        let mut delta = delta_estimate_harmonic(&hg, &u, &opts)?.raw;
        for q in region.queries(pc.samples, pc.seed ^ 3) {
            if domain.contains(q.y1) && domain.contains(q.y3) {
                if let Some(v) = harmonic_defect(gk.eval(center, q.y1), gk.eval(center, q.y2()), gk.eval(center, q.y3), q.lambda) {
                    delta = delta.max(v);
                }
            }
        }
        let delta = delta.max(0.0);
        let meas = measure_power(&u, alpha, &opts)?;
        if k == 0.0 || gk.is_zero() || scales.len() == 1 {
            base_defect.get_or_insert(meas.defect.sup_value.max(0.0));
        }
        report.sweep.push(SweepEntry {
            parameter: k,
            delta,
            witness_distance: meas.envelope.witness_distance,
            gap: meas.envelope.gap,
            defect: meas.defect.sup_value,
            ratio: crate::envelope::ratio_from(meas.envelope.witness_distance, delta).ratio,
            sup_diff: None,
            floor_gap: None,
            error: None,
        });
        report.hypotheses.push(hopf_check(&u)?.named(&tag("hopf_normal_sign")));
        last = Some((u, rep, meas));
    }
    let (u, rep, mut meas) = last.expect("nonempty sweep");
    report.solve = Some(SolveSummary::from(&rep, &u));
    let table = take_profile(&mut meas.defect);
    finish_sweep(spec, &mut report, 3.0 * base_defect.unwrap_or(0.0), &meas.defect, meas.envelope.summary());
    report.transform = Some(Transform::Power(alpha).to_string());
    report.defect = Some(meas.defect);
    report.notes.push("the bound f >= m^p g uses the computed maximum: the verdict is conditional on the solve".into());
    Ok(ExperimentOutcome {
        report,
        fields: vec![
            ("u".into(), u),
            ("transformed".into(), meas.transformed),
            ("envelope".into(), meas.envelope.envelope),
            ("witness".into(), meas.envelope.witness),
        ],
        defect_table: table,
    })
}

/// Least-squares slope of `ys` against `xs`.
fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Concave-envelope gap of `−v`, i.e. the convex-envelope gap of `v`.
fn convex_gap(v: &GridField) -> Result<f64, ExperimentError> {
    Ok(concave_envelope_2d(&v.map(|x| -x))?.gap)
}

fn run_perturbation_rate(spec: &ExperimentSpec, deltas: &[f64], source: f64, perturbation: &SpatialSpec) -> Result<ExperimentOutcome, ExperimentError> {
    let mut report = TheoremReport::new(spec);
    let mask = build_mask(spec)?;
    let opts = spec.search_options();
    let center = spec.domain.shape.center();
    let tol = spec.tolerances.newton;
    let source_of = |d: f64| {
        let phi = perturbation.clone();
        Nonlinearity::new(format!("{source} + {d} phi(x)"), move |x, _| source + d * phi.eval(center, x), |_, _| 0.0)
    };
    let flat = source_of(0.0);
    let mut worst_beta = f64::INFINITY;
    let mut order: Vec<f64> = deltas.to_vec();
    order.sort_by(|a, b| b.total_cmp(a));
    let mut last_v = None;
    for &d in &order {
        let b = source_of(d);
        let eps = d.sqrt();
        let entry = (|| -> Result<(SweepEntry, GridField), String> {
            let (v, _) = solve_perturbed(&mask, &b, eps, tol).map_err(|e| e.to_string())?;
            let (u, _) = solve_perturbed(&mask, &b, 0.0, tol).map_err(|e| e.to_string())?;
            let (v0, _) = solve_perturbed(&mask, &flat, eps, tol).map_err(|e| e.to_string())?;
            let measured = delta_estimate_concavity(&b, &u, None, &opts).map_err(|e| e.to_string())?;
            let gap = convex_gap(&v).map_err(|e| e.to_string())?;
            let floor_gap = convex_gap(&v0).map_err(|e| e.to_string())?;
            Ok((
                SweepEntry {
                    parameter: d,
                    delta: measured.delta,
                    witness_distance: 0.5 * gap,
                    gap,
                    defect: measured.raw,
                    ratio: gap / d.sqrt(),
                    sup_diff: Some(u.max_abs_diff(&v)),
                    floor_gap: Some(floor_gap),
                    error: None,
                },
                v,
            ))
        })();
        match entry {
            Ok((e, v)) => {
                report.sweep.push(e);
                last_v = Some(v);
            }
            Err(msg) => report.sweep.push(SweepEntry {
                parameter: d,
                delta: f64::NAN.max(0.0),
                witness_distance: 0.0,
                gap: 0.0,
                defect: f64::NEG_INFINITY,
                ratio: f64::INFINITY,
                sup_diff: None,
                floor_gap: None,
                error: Some(msg),
            }),
        }
        let range = [-1.0, 1.0];
        let beta = crate::convexity::beta_estimate(&b, range, &probe_points(&spec.domain.shape, 64, spec.probes.seed), 9)?;
        worst_beta = worst_beta.min(beta.beta);
    }
    report.beta = Some(worst_beta);
    report.hypotheses.push(
        HypothesisCheck::new("monotone_nonlinearity", worst_beta >= 0.0, worst_beta).note("infimum of the s-derivative of b; zero floor allowed"),
    );
    let ok_entries: Vec<SweepEntry> = report.sweep.iter().filter(|e| e.error.is_none()).cloned().collect();
    let floor = ok_entries.iter().filter_map(|e| e.floor_gap).fold(0.0, f64::max);
    let above: Vec<&SweepEntry> = ok_entries.iter().filter(|e| e.gap > 10.0 * floor && e.gap > 0.0).collect();
    let exponent = (above.len() >= 2).then(|| {
        let xs: Vec<f64> = above.iter().map(|e| e.parameter.ln()).collect();
        let ys: Vec<f64> = above.iter().map(|e| e.gap.ln()).collect();
        slope(&xs, &ys)
    });
    let floor_dominated = above.len() < 2;
    report.rate = Some(RateFit { exponent, floor, floor_dominated, fitted_points: above.len() });
    let diffs: Vec<f64> = ok_entries.iter().filter_map(|e| e.sup_diff).collect();
    let monotone = diffs.windows(2).all(|w| w[1] <= w[0]);
    report.notes.push(format!("sup |u - v| decreases with delta: {monotone}"));
    if floor_dominated {
        report.notes.push(format!("gaps do not clear ten times the discretization floor {floor:e}; exponent fit skipped"));
    }
    let rate_ok = match exponent {
        Some(e) => (0.4..=0.6).contains(&e),
        None => true,
    };
    let all_solved = ok_entries.len() == report.sweep.len();
    if !all_solved {
        report.notes.push("some deltas failed to solve; see the sweep entries".into());
    }
    let largest = ok_entries.first().map(|e| (e.delta, e.witness_distance));
    report.delta = largest.map(|l| l.0);
    report.witness_distance = largest.map(|l| l.1);
    report.conclude(rate_ok && monotone && all_solved && !ok_entries.is_empty());
    if ok_entries.is_empty() {
        report.verdict = Verdict::SolverError;
    }
    Ok(ExperimentOutcome { report, fields: last_v.map(|v| vec![("v".to_string(), v)]).unwrap_or_default(), defect_table: Vec::new() })
}

// ---------------------------------------------------------------------------
// Harmonic concavity property suite

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalculusReport {
    pub samples: usize,
    pub seed: u64,
    pub subadd: SubaddReport,
    pub ratio: RatioReport,
    pub inverse: InverseReport,
    /// `C² δ` of the inverse check.
    pub inverse_bound: f64,
    pub dominance: DominanceReport,
    pub subadd_pass: bool,
    pub ratio_pass: bool,
    pub inverse_pass: bool,
    pub dominance_pass: bool,
}

impl CalculusReport {
    pub fn pass(&self) -> bool {
        self.subadd_pass && self.ratio_pass && self.inverse_pass && self.dominance_pass
    }
}

/// Seeded property checks of the harmonic concavity calculus on fixed test functions.
pub fn verify_calculus_properties(samples: usize, seed: u64) -> Result<CalculusReport, ExperimentError> {
    if samples == 0 {
        return Err(ExperimentError::Config("samples must be positive".into()));
    }
    let (lo, hi) = (Point::new(-1.0, -1.0), Point::new(1.0, 1.0));
    let positive = SampleRegion::new(lo, hi, [0.05, 3.0]);
    let f = Nonlinearity::without_derivative("1 + s^2 + x^2", |x, s| 1.0 + s * s + x.x * x.x);
    let g = Nonlinearity::without_derivative("sqrt(s) (1.5 + sin(x + y) / 2)", |x, s| s.sqrt() * (1.5 + 0.5 * (x.x + x.y).sin()));
    let subadd = hc_subadd_check(&f, &g, &positive, samples, seed);
    let subadd_pass = subadd.sum_violation <= 1e-10 && subadd.diff_violation <= 1e-10;

    let delta = 0.01;
    let concave = Nonlinearity::without_derivative("3 - (s^2 + |x|^2) / 5 + delta sin(7 s) / 2", move |x, s| {
        3.0 - 0.2 * (s * s + x.norm2()) + 0.5 * delta * (7.0 * s).sin()
    });
    let bounds = RatioBounds { c: 2.4, big_c: 3.01, m: 1.0, delta };
    let ratio = ratio_convexity_check(&concave, &bounds, lo, hi, samples, seed ^ 0x5a)?;
    let ratio_pass = ratio.max_excess <= 0.0;

    let big_c = 2.1;
    let inv = Nonlinearity::without_derivative("1 / (0.5 + (s^2 + |x|^2) / 10 + delta sin(7 s) / 2)", move |x, s| {
        1.0 / (0.5 + 0.1 * (s * s + x.norm2()) + 0.5 * delta * (7.0 * s).sin())
    });
    let inverse = inverse_convexity_check(&inv, big_c, delta, &SampleRegion::new(lo, hi, [-1.0, 1.0]), samples, seed ^ 0xa5);
    let inverse_bound = big_c * big_c * delta;
    let inverse_pass = inverse.preconditions_hold && inverse.worst_margin >= -1e-10;

    let dominance = hc_dominance_check(&g, &positive, samples, seed ^ 0x3c);
    let dominance_pass = dominance.admissible > 0 && dominance.min_gap >= -ROUNDOFF;
    Ok(CalculusReport { samples, seed, subadd, ratio, inverse, inverse_bound, dominance, subadd_pass, ratio_pass, inverse_pass, dominance_pass })
}

// ---------------------------------------------------------------------------
// Envelope of a stored field and artifact output

/// Envelope summary of the finite known values of a field CSV.
pub fn envelope_of_csv(text: &str) -> Result<EnvelopeSummary, ExperimentError> {
    let table = FieldTable::parse(text)?;
    let (points, values) = table.finite_points();
    let env = concave_envelope_points(&points, &values)?;
    Ok(EnvelopeSummary { gap: env.gap, witness_distance: env.witness_distance, argmax: points[env.argmax] })
}

fn write(path: &Path, contents: &[u8]) -> Result<(), ExperimentError> {
    std::fs::write(path, contents).map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })
}

fn fmt_float(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else if v.is_nan() {
        "NaN".into()
    } else if v > 0.0 {
        "POS_INF".into()
    } else {
        "NEG_INF".into()
    }
}

/// Defect table: one row per recorded endpoint profile.
pub fn defect_table_csv(rows: &[ProfileRow]) -> String {
    let mut out = String::from("y1_x,y1_y,y3_x,y3_y,lambda,value\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{},{}\n", r.y1.x, r.y1.y, r.y3.x, r.y3.y, r.lambda, fmt_float(r.value)));
    }
    out
}

/// Writes `report.json`, one CSV per field and `defect_table.csv` into `dir`.
pub fn emit_report(outcome: &ExperimentOutcome, dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    std::fs::create_dir_all(dir).map_err(|source| ExperimentError::Io { path: dir.to_path_buf(), source })?;
    let mut written = Vec::new();
    let json = dir.join("report.json");
    write(&json, serde_json::to_string_pretty(&outcome.report)?.as_bytes())?;
    written.push(json);
    for (name, field) in &outcome.fields {
        let path = dir.join(format!("{name}.csv"));
        write(&path, field.to_csv().as_bytes())?;
        written.push(path);
    }
    if !outcome.defect_table.is_empty() {
        let path = dir.join("defect_table.csv");
        write(&path, defect_table_csv(&outcome.defect_table).as_bytes())?;
        written.push(path);
    }
    Ok(written)
}
