//! Declarative experiments: a TOML file names a pipeline, one or more cases
//! (geometry, grid, boundary operator, initial data) and the checks to run.
//! Running it yields pass/fail rows and CSV tables.
//!
//! ```
//! use freestream::scenario::{bundled, ScenarioConfig};
//! let (name, text) = bundled()[0];
//! let cfg = ScenarioConfig::parse(text).unwrap();
//! assert_eq!(cfg.name, name);
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boundary::{half_flux, BoundaryOperator, MaxwellNormalization, OperatorKind};
use crate::criterion::{
    criterion_epsilon0, default_sweep, maxwell_criterion_p1, maxwell_criterion_pq, nonlocal_criterion_l1,
};
use crate::error::{Error, Result};
use crate::geometry::{Geometry, PhaseSpace, Vec3};
use crate::grid::{build_grids, weighted_norm, DensityField, GridSpec, Grids, QuadratureRule, TraceField};
use crate::population::{cell_propagate, cell_wellposedness, renewal_rate, CellModel, Profile2D, Table2D};
use crate::resolvent::{l1_balance, Resolvent};
use crate::semigroup::{admissible_q, growth_rate, renormalized_propagate, Engine, GrowthRate, Record, SemigroupRun};
use crate::spectral::{blowup_experiment, chord_rate, voigt_demo, BlowupSettings};

/// Tolerances of the built-in checks.
pub mod tolerance {
    pub const SOJOURN: f64 = 1e-10;
    pub const MONOTONE_SLACK: f64 = 1e-4;
    pub const CONSERVATION: f64 = 1e-10;
    pub const OPERATOR_NORM: f64 = 1e-12;
    pub const GROWTH_SLACK: f64 = 0.05;
    pub const CONJUGACY: f64 = 1e-4;
    pub const LAPLACE: f64 = 1e-3;
    pub const BALANCE: f64 = 1e-5;
    /// Slack on the `G` and `C` bounds, whose right sides use a quadrature
    /// estimate of `||phi||`.
    pub const QUADRATURE_SLACK: f64 = 0.05;
    pub const CENTER_RATE: f64 = 1e-12;
    pub const BEAM_RATE: f64 = 0.05;
    pub const VOIGT_TRACE: f64 = 0.02;
    pub const HALF_FLUX_VALUE: f64 = 0.398942;
    pub const HALF_FLUX: f64 = 1e-6;
    pub const RENEWAL: f64 = 0.05;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    Sojourn,
    Criterion,
    Propagate,
    Resolvent,
    Probe,
    Population,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckKind {
    TopSpeedTau,
    TauLowerBound,
    Nonincreasing,
    Conserved,
    OperatorNorm,
    Positive,
    Epsilon0,
    GrowthBound,
    Conjugacy,
    KernelAgreement,
    HalfFlux,
    Laplace,
    Balance,
    NormBounds,
    CenterRate,
    BeamRates,
    BeamMonotone,
    VoigtTrace,
    VoigtDiverges,
    VoigtGenerator,
    Wellposedness,
    RenewalRate,
}

impl CheckKind {
    fn pipelines(self) -> &'static [Pipeline] {
        use CheckKind::*;
        use Pipeline as P;
        match self {
            TopSpeedTau | TauLowerBound => &[P::Sojourn],
            Nonincreasing | Conserved | Conjugacy => &[P::Propagate],
            OperatorNorm | GrowthBound => &[P::Propagate, P::Criterion],
            Positive => &[P::Propagate, P::Population],
            Epsilon0 | KernelAgreement | HalfFlux => &[P::Criterion],
            Laplace | Balance | NormBounds => &[P::Resolvent],
            CenterRate | BeamRates | BeamMonotone | VoigtTrace | VoigtDiverges | VoigtGenerator => &[P::Probe],
            Wellposedness | RenewalRate => &[P::Population],
        }
    }

    fn name(self) -> String {
        serde_json_like(self)
    }
}

fn serde_json_like(kind: CheckKind) -> String {
    // kebab-case name as written in configs
    let debug = format!("{kind:?}");
    let mut out = String::new();
    for (i, c) in debug.chars().enumerate() {
        if c.is_ascii_uppercase() {
            if i > 0 {
                out.push('-');
            }
            out.push(c.to_ascii_lowercase());
        } else {
            out.push(c);
        }
    }
    out
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GeometryConfig {
    Slab {
        half_width: f64,
        speed: [f64; 2],
    },
    Disc {
        radius: f64,
        speed: [f64; 2],
    },
    Ball {
        radius: f64,
        speed: [f64; 2],
    },
    Population {
        l1: f64,
        l2: f64,
    },
    /// `Omega = (0, 1)` with velocities in `[0, v_max]`.
    HalfLine {
        v_max: f64,
    },
}

fn default_cutoff() -> f64 {
    crate::grid::DEFAULT_TANGENTIAL_CUTOFF
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default)]
    pub resolution: Vec<usize>,
    #[serde(default = "default_cutoff")]
    pub cutoff: f64,
    #[serde(default)]
    pub rule: QuadratureRule,
    /// Time step of the marching engine; defaults to a eighth of the
    /// smallest sojourn time.
    pub dt: Option<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { resolution: Vec::new(), cutoff: default_cutoff(), rule: QuadratureRule::Midpoint, dt: None }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationConfig {
    #[default]
    Verbatim,
    FluxNormalized,
}

/// A function of `(first, second)` coordinates.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ProfileConfig {
    Constant(f64),
    /// Long-format CSV `x,y,value`, relative to the config file.
    Table {
        table: PathBuf,
    },
    /// `slope * second`, e.g. `k(l, l') = slope * l'`.
    SourceLinear {
        source_slope: f64,
    },
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig::Constant(0.0)
    }
}

impl ProfileConfig {
    fn build(&self, base: &Path) -> Result<Profile2D> {
        Ok(match self {
            ProfileConfig::Constant(c) => Profile2D::Constant(*c),
            ProfileConfig::Table { table } => Table2D::from_path(&base.join(table))?.into(),
            ProfileConfig::SourceLinear { source_slope } => {
                let s = *source_slope;
                Profile2D::function(move |_, lp| s * lp)
            }
        })
    }

    fn constant(&self) -> Option<f64> {
        match self {
            ProfileConfig::Constant(c) => Some(*c),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OperatorConfig {
    #[default]
    Zero,
    Specular {
        #[serde(default = "one")]
        alpha: f64,
    },
    BounceBack {
        #[serde(default = "one")]
        alpha: f64,
    },
    /// `alpha` specular plus `(1 - alpha)` Maxwellian re-emission, times `scale`.
    Maxwell {
        alpha: f64,
        #[serde(default = "one")]
        theta: f64,
        #[serde(default)]
        normalization: NormalizationConfig,
        #[serde(default = "one")]
        scale: f64,
    },
    /// Flux-normalised Maxwellian re-emission times `scale`; its exact `L^1`
    /// norm is `scale`.
    Diffuse {
        #[serde(default = "one")]
        theta: f64,
        #[serde(default = "one")]
        scale: f64,
    },
    /// Cell-population birth law with optional mortality.
    BirthLaw {
        kernel: ProfileConfig,
        #[serde(default)]
        c: f64,
        #[serde(default)]
        mortality: ProfileConfig,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialData {
    /// Smooth, compactly supported in the interior.
    #[default]
    Bump,
    Constant,
    /// `1 + |v|^2`, invariant under flights and speed-preserving reflections.
    SpeedProfile,
    Linear,
}

impl InitialData {
    fn function(self, space: &PhaseSpace) -> impl Fn(&Vec3, &Vec3) -> f64 + Sync + '_ {
        move |x: &Vec3, v: &Vec3| match self {
            InitialData::Constant => 1.0,
            InitialData::SpeedProfile => 1.0 + v.norm_squared(),
            InitialData::Linear => 1.0 + 0.25 * x.x + 0.125 * v.x,
            InitialData::Bump => {
                let bump = |r: f64| if r.abs() >= 1.0 { 0.0 } else { (1.0 - r * r).powi(4) };
                match *space.geometry() {
                    Geometry::Slab { half_width } => {
                        bump(x.x / (0.8 * half_width)) * (1.0 + 0.5 * v.x / space.max_speed())
                    }
                    Geometry::Ball { radius, .. } => {
                        bump(x.norm() / (0.8 * radius)) * (1.0 + 0.5 * v.x / space.max_speed())
                    }
                    Geometry::PopulationTriangle { .. } => {
                        let f = if x.y > 0.0 { x.x / x.y } else { 0.0 };
                        (f * (1.0 - f)).powi(2) * x.y
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EngineConfig {
    #[default]
    Auto,
    Marching,
    Billiard,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseConfig {
    pub label: String,
    pub geometry: GeometryConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub operator: OperatorConfig,
    #[serde(default)]
    pub initial: InitialData,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub p: Vec<f64>,
    pub t_final: f64,
    pub outputs: usize,
    pub engine: EngineConfig,
    pub lambdas: Vec<f64>,
    pub deltas: Vec<f64>,
    pub ns: Vec<f64>,
    /// Truncation level of the renormalisation; defaults to `0.95 eps0`.
    pub epsilon: Option<f64>,
    pub q_safety: f64,
    pub samples: usize,
    pub seed: u64,
    pub expected_norm: Option<f64>,
    pub checks: Vec<CheckKind>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            p: vec![1.0],
            t_final: 10.0,
            outputs: 100,
            engine: EngineConfig::Auto,
            lambdas: Vec::new(),
            deltas: Vec::new(),
            ns: Vec::new(),
            epsilon: None,
            q_safety: 0.9,
            samples: 100,
            seed: 0,
            expected_norm: None,
            checks: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// The result the scenario reproduces, in one line.
    pub reproduces: String,
    pub pipeline: Pipeline,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(rename = "case")]
    pub cases: Vec<CaseConfig>,
    /// Directory that relative table paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

const BUNDLED: &[(&str, &str)] = &[
    ("slab-regularity", include_str!("../scenarios/slab-regularity.toml")),
    ("diffuse-contraction", include_str!("../scenarios/diffuse-contraction.toml")),
    ("ball-specular-conservation", include_str!("../scenarios/ball-specular-conservation.toml")),
    ("slab-mitosis", include_str!("../scenarios/slab-mitosis.toml")),
    ("resolvent-laplace", include_str!("../scenarios/resolvent-laplace.toml")),
    ("resolvent-balance", include_str!("../scenarios/resolvent-balance.toml")),
    ("ball-bounceback", include_str!("../scenarios/ball-bounceback.toml")),
    ("voigt-nonclosed", include_str!("../scenarios/voigt-nonclosed.toml")),
    ("slab-renormalization", include_str!("../scenarios/slab-renormalization.toml")),
    ("kernel-criteria", include_str!("../scenarios/kernel-criteria.toml")),
    ("maxwell-lp-criterion", include_str!("../scenarios/maxwell-lp-criterion.toml")),
    ("maxwell-half-flux", include_str!("../scenarios/maxwell-half-flux.toml")),
    ("cell-population", include_str!("../scenarios/cell-population.toml")),
];

/// Bundled scenarios as `(name, toml)`.
pub fn bundled() -> &'static [(&'static str, &'static str)] {
    BUNDLED
}

pub fn bundled_config(name: &str) -> Option<ScenarioConfig> {
    BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| ScenarioConfig::parse(text).expect("bundled scenarios parse"))
}

impl ScenarioConfig {
    /// Parses and validates; errors carry line and column.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.name.trim().is_empty() || self.reproduces.trim().is_empty() {
            return bad("name and reproduces must be nonempty".into());
        }
        if self.cases.is_empty() {
            return bad("at least one [[case]] is required".into());
        }
        let run = &self.run;
        if run.p.is_empty() || run.p.iter().any(|p| !(*p >= 1.0) || !p.is_finite()) {
            return bad("run.p must list exponents in [1, inf)".into());
        }
        if !(run.t_final > 0.0) || !run.t_final.is_finite() || run.outputs == 0 {
            return bad("run.t_final must be positive and run.outputs nonzero".into());
        }
        if run.lambdas.iter().any(|l| !(*l > 0.0))
            || run.deltas.iter().any(|d| !(*d > 0.0))
            || run.ns.iter().any(|n| !(*n > 0.0))
        {
            return bad("run.lambdas, run.deltas and run.ns must be positive".into());
        }
        if !(run.q_safety > 0.0 && run.q_safety < 1.0) {
            return bad("run.q_safety must lie in (0, 1)".into());
        }
        for check in &run.checks {
            if !check.pipelines().contains(&self.pipeline) {
                return bad(format!("check {} is not available in the {:?} pipeline", check.name(), self.pipeline));
            }
        }
        let needs = |kind: CheckKind, ok: bool, what: &str| -> Result<()> {
            if run.checks.contains(&kind) && !ok {
                return Err(Error::Config(format!("check {} needs {what}", kind.name())));
            }
            Ok(())
        };
        needs(CheckKind::OperatorNorm, run.expected_norm.is_some(), "run.expected_norm")?;
        needs(CheckKind::BeamRates, !run.deltas.is_empty(), "run.deltas")?;
        needs(CheckKind::VoigtTrace, !run.ns.is_empty(), "run.ns")?;
        if self.pipeline == Pipeline::Resolvent && run.lambdas.is_empty() {
            return bad("the resolvent pipeline needs run.lambdas".into());
        }
        let mut labels = std::collections::BTreeSet::new();
        for case in &self.cases {
            if !labels.insert(case.label.as_str()) || case.label.is_empty() {
                return bad(format!("case labels must be unique and nonempty ({:?})", case.label));
            }
            let half_line = matches!(case.geometry, GeometryConfig::HalfLine { .. });
            let round = matches!(case.geometry, GeometryConfig::Disc { .. } | GeometryConfig::Ball { .. });
            if self.pipeline == Pipeline::Probe && !(half_line || round) {
                return bad(format!("probe case {} needs a disc, ball or half-line", case.label));
            }
            if half_line && self.pipeline != Pipeline::Probe {
                return bad("the half-line geometry is only used by the probe pipeline".into());
            }
            let population = matches!(case.geometry, GeometryConfig::Population { .. });
            let birth = matches!(case.operator, OperatorConfig::BirthLaw { .. });
            if birth && !population {
                return bad(format!("case {}: the birth-law operator needs the population geometry", case.label));
            }
            if self.pipeline == Pipeline::Population && !(population && birth) {
                return bad(format!(
                    "case {}: the population pipeline needs a population geometry and a birth law",
                    case.label
                ));
            }
            if let Some(dt) = case.grid.dt {
                if !(dt > 0.0) {
                    return bad("grid.dt must be positive".into());
                }
            }
        }
        if run.checks.contains(&CheckKind::TopSpeedTau)
            && self.cases.iter().any(|c| !matches!(c.geometry, GeometryConfig::Slab { .. }))
        {
            return bad("check top-speed-tau needs slab cases".into());
        }
        Ok(())
    }
}

/// One pass/fail row of the summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub case: String,
    pub check: String,
    pub value: f64,
    pub target: f64,
    pub tolerance: f64,
    /// Distance to failure; negative when failed.
    pub margin: f64,
    pub passed: bool,
}

impl Check {
    /// `|value - target| <= tolerance`.
    fn near(case: &str, check: String, value: f64, target: f64, tolerance: f64) -> Self {
        let margin = tolerance - (value - target).abs();
        Self { case: case.into(), check, value, target, tolerance, margin, passed: margin >= 0.0 }
    }

    /// `value <= target + tolerance`.
    fn at_most(case: &str, check: String, value: f64, target: f64, tolerance: f64) -> Self {
        let margin = target + tolerance - value;
        Self { case: case.into(), check, value, target, tolerance, margin, passed: margin >= 0.0 }
    }

    /// `value >= target - tolerance`.
    fn at_least(case: &str, check: String, value: f64, target: f64, tolerance: f64) -> Self {
        let margin = value - target + tolerance;
        Self { case: case.into(), check, value, target, tolerance, margin, passed: margin >= 0.0 }
    }

    fn flag(case: &str, check: String, ok: bool) -> Self {
        Self {
            case: case.into(),
            check,
            value: f64::from(u8::from(ok)),
            target: 1.0,
            tolerance: 0.0,
            margin: if ok { 0.0 } else { -1.0 },
            passed: ok,
        }
    }
}

/// Checks and CSV tables of one scenario run.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub name: String,
    pub checks: Vec<Check>,
    /// File name to CSV contents.
    pub tables: BTreeMap<String, String>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn summary_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["scenario", "case", "check", "value", "target", "tolerance", "margin", "passed"])?;
        for c in &self.checks {
            w.write_record([
                self.name.clone(),
                c.case.clone(),
                c.check.clone(),
                c.value.to_string(),
                c.target.to_string(),
                c.tolerance.to_string(),
                c.margin.to_string(),
                c.passed.to_string(),
            ])?;
        }
        finish(w)
    }

    /// Writes `summary.csv` and every table into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("summary.csv"), self.summary_csv()?)?;
        for (name, text) in &self.tables {
            std::fs::write(dir.join(name), text)?;
        }
        Ok(())
    }
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn table(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    finish(w)
}

fn record_csv(record: &Record) -> Result<String> {
    let mut buf = Vec::new();
    record.write_csv(&mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

/// A case with its space, grids and operator built.
struct Built<'a> {
    case: &'a CaseConfig,
    grids: Grids,
    operator: BoundaryOperator,
    model: Option<CellModel>,
}

impl Built<'_> {
    fn label(&self) -> &str {
        &self.case.label
    }

    fn space(&self) -> &PhaseSpace {
        &self.grids.space
    }

    fn run(&self, cfg: &RunConfig, p: f64) -> SemigroupRun {
        let mut run = SemigroupRun::new(self.grids.clone(), self.operator.clone(), p, cfg.t_final)
            .with_outputs(cfg.outputs)
            .with_engine(match cfg.engine {
                EngineConfig::Auto => Engine::Auto,
                EngineConfig::Marching => Engine::TimeMarching,
                EngineConfig::Billiard => Engine::Billiard,
            });
        if let Some(dt) = self.case.grid.dt {
            run = run.with_dt(dt);
        }
        if let Some(model) = &self.model {
            run = run.with_attenuation(model.attenuation());
        }
        run
    }
}

fn space_of(geometry: &GeometryConfig) -> Result<PhaseSpace> {
    match *geometry {
        GeometryConfig::Slab { half_width, speed } => PhaseSpace::slab(half_width, speed[0], speed[1]),
        GeometryConfig::Disc { radius, speed } => PhaseSpace::ball(2, radius, speed[0], speed[1]),
        GeometryConfig::Ball { radius, speed } => PhaseSpace::ball(3, radius, speed[0], speed[1]),
        GeometryConfig::Population { l1, l2 } => PhaseSpace::population(l1, l2),
        GeometryConfig::HalfLine { .. } => Err(Error::Unsupported("the half-line has no phase grid".into())),
    }
}

fn build<'a>(case: &'a CaseConfig, base: &Path) -> Result<Built<'a>> {
    if let OperatorConfig::BirthLaw { kernel, c, mortality } = &case.operator {
        let GeometryConfig::Population { l1, l2 } = case.geometry else { unreachable!("validated") };
        let &[na, nl] = case.grid.resolution.as_slice() else {
            return Err(Error::Config(format!("case {}: population grids take [ages, lengths]", case.label)));
        };
        let model = CellModel::new(l1, l2).kernel(kernel.build(base)?).mortality(mortality.build(base)?).reentry(*c);
        let grids = model.grids([na, nl])?;
        let operator = model.operator(&grids)?;
        return Ok(Built { case, grids, operator, model: Some(model) });
    }
    let space = Arc::new(space_of(&case.geometry)?);
    let spec = GridSpec::new(case.grid.resolution.clone()).cutoff(case.grid.cutoff).rule(case.grid.rule);
    let grids = build_grids(space, &spec)?;
    let operator = match &case.operator {
        OperatorConfig::Zero => BoundaryOperator::zero(&grids),
        OperatorConfig::Specular { alpha } => BoundaryOperator::specular(&grids, *alpha)?,
        OperatorConfig::BounceBack { alpha } => BoundaryOperator::bounce_back(&grids, *alpha)?,
        OperatorConfig::Maxwell { alpha, theta, normalization, scale } => {
            let n = match normalization {
                NormalizationConfig::Verbatim => MaxwellNormalization::Verbatim,
                NormalizationConfig::FluxNormalized => MaxwellNormalization::FluxNormalized,
            };
            BoundaryOperator::maxwell(&grids, *alpha, *theta, n)?.scaled(*scale)
        }
        OperatorConfig::Diffuse { theta, scale } => {
            BoundaryOperator::maxwell(&grids, 0.0, *theta, MaxwellNormalization::FluxNormalized)?.scaled(*scale)
        }
        OperatorConfig::BirthLaw { .. } => unreachable!("handled above"),
    };
    Ok(Built { case, grids, operator, model: None })
}

/// Runs every case of `cfg` through its pipeline. `seed` overrides the
/// configured seed.
pub fn run_scenario(cfg: &ScenarioConfig, seed: Option<u64>) -> Result<Outcome> {
    cfg.validate()?;
    let mut run = cfg.run.clone();
    if let Some(seed) = seed {
        run.seed = seed;
    }
    let mut out = Outcome { name: cfg.name.clone(), checks: Vec::new(), tables: BTreeMap::new() };
    for case in &cfg.cases {
        if let GeometryConfig::HalfLine { v_max } = case.geometry {
            voigt(case, v_max, &run, &mut out)?;
            continue;
        }
        let built = build(case, &cfg.base_dir)?;
        match cfg.pipeline {
            Pipeline::Sojourn => sojourn(&built, &run, &mut out)?,
            Pipeline::Propagate => propagate(&built, &run, &mut out)?,
            Pipeline::Criterion => criterion(&built, &run, &mut out)?,
            Pipeline::Resolvent => resolvent(&built, &run, &mut out)?,
            Pipeline::Probe => probe(&built, &run, &mut out)?,
            Pipeline::Population => population(&built, &run, &mut out)?,
        }
    }
    Ok(out)
}

fn wants(run: &RunConfig, kind: CheckKind) -> bool {
    run.checks.contains(&kind)
}

fn sojourn(b: &Built, run: &RunConfig, out: &mut Outcome) -> Result<()> {
    let g = &b.grids.outgoing;
    let taus = g.taus();
    let analytic = b.space().analytic_tau0();
    let min = taus.iter().copied().fold(f64::INFINITY, f64::min);
    let rows = (0..g.len()).map(|i| {
        let (x, v) = (g.x(i), g.v(i));
        [x.x, x.y, x.z, v.x, v.y, v.z, taus[i]].iter().map(f64::to_string).collect()
    });
    out.tables.insert(format!("sojourn_{}.csv", b.label()), table(&["x0", "x1", "x2", "v0", "v1", "v2", "tau"], rows)?);
    if wants(run, CheckKind::TopSpeedTau) {
        let top = b.space().max_speed();
        let deviation = (0..g.len())
            .filter(|&i| (g.v(i).norm() - top).abs() <= 1e-12 * top)
            .map(|i| (taus[i] - analytic).abs())
            .fold(f64::NAN, f64::max);
        out.checks.push(Check::near(b.label(), CheckKind::TopSpeedTau.name(), deviation, 0.0, tolerance::SOJOURN));
    }
    if wants(run, CheckKind::TauLowerBound) {
        out.checks.push(Check::at_least(b.label(), CheckKind::TauLowerBound.name(), min, analytic, tolerance::SOJOURN));
    }
    Ok(())
}

fn max_rise(record: &Record) -> f64 {
    record.samples.windows(2).map(|w| (w[1].norm - w[0].norm) / w[0].norm).filter(|r| r.is_finite()).fold(0.0, f64::max)
}

fn measured_rate(record: &Record) -> Result<f64> {
    Ok(match growth_rate(record)? {
        GrowthRate::Rate(r) => r,
        GrowthRate::Extinct { .. } => f64::NEG_INFINITY,
    })
}

fn growth_check(b: &Built, run: &RunConfig, p: f64, out: &mut Outcome) -> Result<()> {
    let report = criterion_epsilon0(&b.operator, p)?;
    let phi = b.case.initial.function(b.space());
    let record = b.run(run, p).propagate(&phi)?;
    let rate = measured_rate(&record)?;
    let name = format!("{}[p={p}]", CheckKind::GrowthBound.name());
    match report.growth_bound {
        Some(bound) => {
            let slack = tolerance::GROWTH_SLACK * bound.abs();
            out.checks.push(Check::at_most(b.label(), name, rate, bound, slack));
        }
        None => out.checks.push(Check::flag(b.label(), name, false)),
    }
    out.tables.insert(format!("growth_{}_p{p}.csv", b.label()), record_csv(&record)?);
    Ok(())
}

fn propagate(b: &Built, run: &RunConfig, out: &mut Outcome) -> Result<()> {
    let label = b.label();
    if let Some(expected) = run.expected_norm.filter(|_| wants(run, CheckKind::OperatorNorm)) {
        let n = b.operator.operator_norm(1.0)?.value;
        out.checks.push(Check::near(label, CheckKind::OperatorNorm.name(), n, expected, tolerance::OPERATOR_NORM));
    }
    let phi = b.case.initial.function(b.space());
    for &p in &run.p {
        let mut sg = b.run(run, p);
        if wants(run, CheckKind::Positive) {
            sg = sg.keeping_fields();
        }
        let record = sg.propagate(&phi)?;
        out.tables.insert(format!("norms_{label}_p{p}.csv"), record_csv(&record)?);
        if wants(run, CheckKind::Nonincreasing) {
            out.checks.push(Check::at_most(
                label,
                format!("nonincreasing[p={p}]"),
                max_rise(&record),
                0.0,
                tolerance::MONOTONE_SLACK,
            ));
        }
        if wants(run, CheckKind::Conserved) {
            let n0 = record.samples[0].norm;
            let drift = record.samples.iter().map(|s| (s.norm / n0 - 1.0).abs()).fold(0.0, f64::max);
            out.checks.push(Check::at_most(label, format!("conserved[p={p}]"), drift, 0.0, tolerance::CONSERVATION));
        }
        if wants(run, CheckKind::Positive) {
            let min = record.fields.iter().flat_map(|(_, f)| f.values.iter().copied()).fold(f64::INFINITY, f64::min);
            out.checks.push(Check::at_least(label, format!("positive[p={p}]"), min, 0.0, 0.0));
        }
        if wants(run, CheckKind::GrowthBound) {
            let rate = measured_rate(&record)?;
            let report = criterion_epsilon0(&b.operator, p)?;
            let name = format!("growth-bound[p={p}]");
            match report.growth_bound {
                Some(bound) => {
                    out.checks.push(Check::at_most(label, name, rate, bound, tolerance::GROWTH_SLACK * bound.abs()))
                }
                None => out.checks.push(Check::flag(label, name, false)),
            }
        }
        if wants(run, CheckKind::Conjugacy) {
            conjugacy(b, run, p, &record, out)?;
        }
    }
    Ok(())
}

fn conjugacy(b: &Built, run: &RunConfig, p: f64, direct: &Record, out: &mut Outcome) -> Result<()> {
    let label = b.label();
    let eps = match run.epsilon {
        Some(e) => e,
        None => {
            let e0 = criterion_epsilon0(&b.operator, p)?.epsilon0;
            if !e0.is_finite() {
                b.space().diameter() / b.space().max_speed()
            } else {
                0.95 * e0
            }
        }
    };
    let q = admissible_q(&b.operator, eps, p, run.q_safety)?;
    let sg = b.run(run, p).with_engine(Engine::TimeMarching).keeping_fields();
    let (renorm, weight) = renormalized_propagate(&sg, &b.case.initial.function(b.space()), q, None)?;
    let hq = b.operator.scale_columns(&weight.outgoing)?.operator_norm(p)?.value;
    out.checks.push(Check::at_most(label, format!("renormalized-norm[p={p}]"), hq, 1.0, 0.0));
    let direct = if direct.fields.len() == renorm.fields.len() {
        direct.clone()
    } else {
        sg.propagate(&b.case.initial.function(b.space()))?
    };
    let phase = &b.grids.phase;
    let init = DensityField::from_fn(phase.clone(), &b.case.initial.function(b.space())).norm_p(p);
    let mut worst = 0.0f64;
    let mut rows = Vec::new();
    for ((t, d), (_, r)) in direct.fields.iter().zip(&renorm.fields) {
        let diff: Vec<f64> = d.values.iter().zip(&r.values).map(|(a, b)| a - b).collect();
        let rel = weighted_norm(phase.weights(), &diff, p) / init;
        worst = worst.max(rel);
        rows.push(vec![t.to_string(), rel.to_string()]);
    }
    out.tables.insert(format!("conjugacy_{label}_p{p}.csv"), table(&["t", "relative_difference"], rows)?);
    out.checks.push(Check::at_most(label, format!("conjugacy[p={p},q={q}]"), worst, 0.0, tolerance::CONJUGACY));
    Ok(())
}

fn criterion(b: &Built, run: &RunConfig, out: &mut Outcome) -> Result<()> {
    let label = b.label();
    if let Some(expected) = run.expected_norm.filter(|_| wants(run, CheckKind::OperatorNorm)) {
        let n = b.operator.operator_norm(1.0)?.value;
        out.checks.push(Check::near(label, CheckKind::OperatorNorm.name(), n, expected, tolerance::OPERATOR_NORM));
    }
    for &p in &run.p {
        let report = criterion_epsilon0(&b.operator, p)?;
        let rows = report.profile.iter().map(|(e, n)| vec![e.to_string(), n.to_string()]);
        out.tables.insert(format!("profile_{label}_p{p}.csv"), table(&["epsilon", "truncated_norm"], rows)?);
        if wants(run, CheckKind::Epsilon0) {
            // one step of the threshold sweep around tau0
            let tau0 = b.space().analytic_tau0();
            let sweep = default_sweep(&b.grids.outgoing);
            let step = sweep
                .windows(2)
                .find(|w| w[1] >= tau0)
                .map(|w| w[1] - w[0])
                .filter(|s| *s > 0.0)
                .unwrap_or(tolerance::SOJOURN);
            out.checks.push(Check::near(label, format!("epsilon0[p={p}]"), report.epsilon0, tau0, step));
        }
        if wants(run, CheckKind::GrowthBound) {
            growth_check(b, run, p, out)?;
        }
        if wants(run, CheckKind::KernelAgreement) {
            kernel_agreement(b, p, report.holds, out)?;
        }
    }
    if wants(run, CheckKind::HalfFlux) {
        let theta = match b.case.operator {
            OperatorConfig::Maxwell { theta, .. } | OperatorConfig::Diffuse { theta, .. } => theta,
            _ => 1.0,
        };
        let flux = half_flux(&b.grids.incoming, theta);
        let worst = flux.iter().copied().fold(f64::NAN, |m, f| {
            if m.is_nan() || (f - tolerance::HALF_FLUX_VALUE).abs() > (m - tolerance::HALF_FLUX_VALUE).abs() {
                f
            } else {
                m
            }
        });
        out.checks.push(Check::near(
            label,
            CheckKind::HalfFlux.name(),
            worst,
            tolerance::HALF_FLUX_VALUE,
            tolerance::HALF_FLUX,
        ));
    }
    Ok(())
}

fn kernel_agreement(b: &Built, p: f64, direct: bool, out: &mut Outcome) -> Result<()> {
    let label = b.label();
    let name = format!("kernel-agreement[p={p}]");
    let mut rows = Vec::new();
    let ok = match (b.operator.kind(), p == 1.0) {
        (OperatorKind::NonlocalKernel, true) => {
            let v = nonlocal_criterion_l1(&b.operator)?;
            rows.push(vec![
                "nonlocal-l1".into(),
                v.limit.to_string(),
                v.right.to_string(),
                v.holds.to_string(),
                direct.to_string(),
            ]);
            v.holds == direct
        }
        (_, true) if b.operator.is_local() => {
            let v = maxwell_criterion_p1(&b.operator, None)?;
            rows.push(vec![
                "local-l1".into(),
                v.limit.to_string(),
                v.right.to_string(),
                v.holds.to_string(),
                direct.to_string(),
            ]);
            v.holds == direct
        }
        (_, false) if b.operator.is_local() => {
            // a sufficient condition: it may fail where the direct profile holds
            let r = maxwell_criterion_pq(&b.operator, p)?;
            let v = r.verdict;
            rows.push(vec![
                "local-lp".into(),
                v.limit.to_string(),
                v.right.to_string(),
                v.holds.to_string(),
                direct.to_string(),
            ]);
            !v.holds || direct
        }
        _ => {
            return Err(Error::Unsupported(format!("case {label}: no kernel criterion for this operator and p = {p}")))
        }
    };
    out.tables.insert(
        format!("kernel_{label}_p{p}.csv"),
        table(&["criterion", "limit", "budget", "kernel_verdict", "direct_verdict"], rows)?,
    );
    out.checks.push(Check::flag(label, name, ok));
    Ok(())
}

fn resolvent(b: &Built, run: &RunConfig, out: &mut Outcome) -> Result<()> {
    let label = b.label();
    let p = run.p[0];
    let phi = b.case.initial.function(b.space());
    let phase = &b.grids.phase;
    let phi_norm = DensityField::from_fn(phase.clone(), &phi).norm_p(p);
    let record = if wants(run, CheckKind::Laplace) {
        Some(b.run(run, p).with_engine(Engine::TimeMarching).keeping_fields().propagate(&phi)?)
    } else {
        None
    };
    let mut rows = Vec::new();
    for &lambda in &run.lambdas {
        let res = Resolvent::new(&b.grids, &b.operator, lambda)?.with_p(p);
        let certified = res.certify()?;
        let sol = res.apply(&phi)?;
        let mut row = vec![
            lambda.to_string(),
            certified.to_string(),
            sol.terms.to_string(),
            sol.tail_bound.to_string(),
            sol.field.norm_p(p).to_string(),
        ];
        if let Some(record) = &record {
            let n = phase.len();
            let mut lap = vec![0.0; n];
            for w in record.fields.windows(2) {
                let ((t0, f0), (t1, f1)) = (&w[0], &w[1]);
                let (e0, e1) = ((-lambda * t0).exp(), (-lambda * t1).exp());
                let h = t1 - t0;
                for ((l, a), b) in lap.iter_mut().zip(&f0.values).zip(&f1.values) {
                    *l += 0.5 * h * (e0 * a + e1 * b);
                }
            }
            let diff: Vec<f64> = lap.iter().zip(&sol.field.values).map(|(a, b)| a - b).collect();
            let rel = weighted_norm(phase.weights(), &diff, p) / phi_norm;
            row.push(rel.to_string());
            out.checks.push(Check::at_most(label, format!("laplace[lambda={lambda}]"), rel, 0.0, tolerance::LAPLACE));
        } else {
            row.push(String::new());
        }
        if wants(run, CheckKind::Balance) {
            let rep = l1_balance(&b.grids, &b.operator, lambda, &phi)?;
            row.push(rep.relative_residual.to_string());
            out.checks.push(Check::at_most(
                label,
                format!("balance[lambda={lambda}]"),
                rep.relative_residual,
                0.0,
                tolerance::BALANCE,
            ));
            if rep.lower_bound_holds.is_some() {
                let name = format!("balance-lower-bound[lambda={lambda}]");
                out.checks.push(Check::at_least(label, name, rep.psi_norm, rep.phi_norm / lambda, 0.0));
            }
        } else {
            row.push(String::new());
        }
        if wants(run, CheckKind::NormBounds) {
            let worst = norm_bounds(b, &res, lambda, p, run)?;
            row.push(worst.to_string());
            out.checks.push(Check::at_most(label, format!("norm-bounds[lambda={lambda}]"), worst, 1.0, 0.0));
        } else {
            row.push(String::new());
        }
        rows.push(row);
    }
    out.tables.insert(
        format!("resolvent_{label}.csv"),
        table(
            &[
                "lambda",
                "certified_ratio",
                "neumann_terms",
                "tail_bound",
                "psi_norm",
                "laplace_error",
                "balance_residual",
                "bound_ratio",
            ],
            rows,
        )?,
    );
    Ok(())
}

/// Largest ratio of a measured norm to its bound over seeded random inputs.
fn norm_bounds(b: &Built, res: &Resolvent, lambda: f64, p: f64, run: &RunConfig) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let inc = &b.grids.incoming;
    let q = if p > 1.0 { p / (p - 1.0) } else { f64::INFINITY };
    let b_bound = (p * lambda).powf(-1.0 / p);
    let g_bound = if q.is_finite() { (q * lambda).powf(-1.0 / q) } else { 1.0 };
    let c_bound = 1.0 / lambda;
    let slack = 1.0 + tolerance::QUADRATURE_SLACK;
    let mut worst = 0.0f64;
    for _ in 0..run.samples {
        let u = TraceField::new(inc.clone(), (0..inc.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let un = u.norm_p(p);
        worst = worst.max(res.apply_m(&u)?.norm_p(p) / un);
        worst = worst.max(res.apply_b(&u)?.norm_p(p) / (b_bound * un));
        let c: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let phi = move |x: &Vec3, v: &Vec3| c[0] + c[1] * x.x + c[2] * v.x;
        let pn = DensityField::from_fn(b.grids.phase.clone(), &phi).norm_p(p);
        worst = worst.max(res.apply_g(&phi).norm_p(p) / (g_bound * pn * slack));
        worst = worst.max(res.apply_c(&phi).norm_p(p) / (c_bound * pn * slack));
    }
    Ok(worst)
}

fn probe(b: &Built, run: &RunConfig, out: &mut Outcome) -> Result<()> {
    let label = b.label();
    let alpha = match b.case.operator {
        OperatorConfig::BounceBack { alpha } => alpha,
        _ => return Err(Error::Config(format!("probe case {label} needs a bounce-back operator"))),
    };
    if wants(run, CheckKind::CenterRate) {
        let Geometry::Ball { radius, .. } = *b.space().geometry() else { unreachable!("validated") };
        let rate = chord_rate(b.space(), &Vec3::zeros(), &Vec3::x(), alpha)?;
        let oracle = alpha.ln() / (2.0 * radius);
        out.checks.push(Check::near(
            label,
            CheckKind::CenterRate.name(),
            rate,
            oracle,
            tolerance::CENTER_RATE * oracle.abs(),
        ));
    }
    if !run.deltas.is_empty() {
        let rep = blowup_experiment(&b.grids, alpha, &run.deltas, &BlowupSettings::default())?;
        let rows = rep.rows.iter().map(|r| {
            [r.delta, r.chord_time, r.predicted, r.measured, r.relative_error].iter().map(f64::to_string).collect()
        });
        out.tables.insert(
            format!("beams_{label}.csv"),
            table(&["delta", "chord_time", "predicted_rate", "measured_rate", "relative_error"], rows)?,
        );
        if wants(run, CheckKind::BeamRates) {
            for r in &rep.rows {
                out.checks.push(Check::at_most(
                    label,
                    format!("beam-rate[delta={}]", r.delta),
                    r.relative_error,
                    0.0,
                    tolerance::BEAM_RATE,
                ));
            }
        }
        if wants(run, CheckKind::BeamMonotone) {
            out.checks.push(Check::flag(label, CheckKind::BeamMonotone.name(), rep.monotone));
        }
    }
    Ok(())
}

fn voigt(case: &CaseConfig, v_max: f64, run: &RunConfig, out: &mut Outcome) -> Result<()> {
    let label = &case.label;
    let nx = case.grid.resolution.first().copied().unwrap_or(8);
    let rows = voigt_demo(&run.ns, v_max, nx)?;
    out.tables.insert(
        format!("voigt_{label}.csv"),
        table(
            &["n", "distance_to_limit", "generator_norm", "trace_norm", "trace_oracle", "relative_error"],
            rows.iter().map(|r| {
                [r.n, r.distance, r.generator_norm, r.trace_norm, r.oracle, r.relative_error]
                    .iter()
                    .map(f64::to_string)
                    .collect()
            }),
        )?,
    );
    if wants(run, CheckKind::VoigtTrace) {
        for r in &rows {
            out.checks.push(Check::at_most(
                label,
                format!("voigt-trace[n={}]", r.n),
                r.relative_error,
                0.0,
                tolerance::VOIGT_TRACE,
            ));
        }
    }
    if wants(run, CheckKind::VoigtDiverges) {
        let mut sorted = rows.clone();
        sorted.sort_by(|a, b| a.n.total_cmp(&b.n));
        let ok = sorted.windows(2).all(|w| w[1].trace_norm > w[0].trace_norm && w[1].distance < w[0].distance);
        out.checks.push(Check::flag(label, CheckKind::VoigtDiverges.name(), ok));
    }
    if wants(run, CheckKind::VoigtGenerator) {
        let worst = rows.iter().map(|r| r.generator_norm).fold(0.0, f64::max);
        out.checks.push(Check::at_most(label, CheckKind::VoigtGenerator.name(), worst, 0.0, 0.0));
    }
    Ok(())
}

fn population(b: &Built, run: &RunConfig, out: &mut Outcome) -> Result<()> {
    let label = b.label();
    let model = b.model.as_ref().expect("validated birth law");
    let phi = b.case.initial.function(b.space());
    let record = cell_propagate(model, &b.grids, &phi, run.t_final, b.case.grid.dt, run.outputs)?;
    out.tables.insert(format!("population_{label}.csv"), record_csv(&record)?);
    if wants(run, CheckKind::Wellposedness) {
        for &p in &run.p {
            let verdict = cell_wellposedness(model, &b.grids, p)?;
            let direct = criterion_epsilon0(&b.operator, p)?.holds;
            out.checks.push(Check::flag(label, format!("wellposedness[p={p}]"), verdict.holds() == direct));
        }
    }
    if wants(run, CheckKind::Positive) {
        let min = record.final_field().values.iter().copied().fold(f64::INFINITY, f64::min);
        out.checks.push(Check::at_least(label, CheckKind::Positive.name(), min, 0.0, 0.0));
    }
    if wants(run, CheckKind::RenewalRate) {
        let OperatorConfig::BirthLaw { kernel, c, mortality } = &b.case.operator else { unreachable!("validated") };
        let (Some(k), Some(0.0), 0.0) = (kernel.constant(), mortality.constant(), *c) else {
            return Err(Error::Config(format!(
                "case {label}: the renewal oracle needs a constant kernel, no mortality and c = 0"
            )));
        };
        let oracle = renewal_rate(|_| k, model.l1, model.l2)?;
        let rate = measured_rate(&record)?;
        out.checks.push(Check::near(
            label,
            CheckKind::RenewalRate.name(),
            rate,
            oracle,
            tolerance::RENEWAL * oracle.abs(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_parse_and_are_named() {
        assert!(!bundled().is_empty());
        for (name, text) in bundled() {
            let cfg = ScenarioConfig::parse(text).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(&cfg.name, name);
            assert!(!cfg.run.checks.is_empty(), "{name} declares no checks");
        }
        for name in ["slab-mitosis", "ball-specular-conservation", "voigt-nonclosed"] {
            assert!(bundled_config(name).is_some());
        }
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        let base = r#"
name = "x"
reproduces = "y"
pipeline = "sojourn"
[run]
checks = ["tau-lower-bound"]
[[case]]
label = "a"
geometry = { kind = "slab", half_width = 1.0, speed = [0.0, 1.0] }
grid = { resolution = [10, 10] }
"#;
        assert!(ScenarioConfig::parse(base).is_ok());
        let typo = base.replace("half_width", "halfwidth");
        assert!(matches!(ScenarioConfig::parse(&typo), Err(Error::Config(_))));
        let extra = base.replace("[run]", "[run]\nbogus = 1");
        let err = ScenarioConfig::parse(&extra).unwrap_err().to_string();
        assert!(err.contains("bogus") && err.contains("line"), "{err}");
        let wrong_check = base.replace("tau-lower-bound", "laplace");
        assert!(ScenarioConfig::parse(&wrong_check).is_err());
        let bad_p = base.replace("[run]", "[run]\np = [0.5]");
        assert!(ScenarioConfig::parse(&bad_p).is_err());
    }

    #[test]
    fn check_names_are_kebab_case() {
        assert_eq!(CheckKind::TopSpeedTau.name(), "top-speed-tau");
        assert_eq!(CheckKind::Epsilon0.name(), "epsilon0");
    }

    #[test]
    fn small_sojourn_run() {
        let text = r#"
name = "tiny"
reproduces = "slab sojourn bound"
pipeline = "sojourn"
[run]
checks = ["top-speed-tau", "tau-lower-bound"]
[[case]]
label = "a"
geometry = { kind = "slab", half_width = 0.5, speed = [0.0, 1.0] }
grid = { resolution = [8, 8], rule = "trapezoid" }
"#;
        let out = run_scenario(&ScenarioConfig::parse(text).unwrap(), None).unwrap();
        assert!(out.passed(), "{:?}", out.checks);
        assert!(out.tables.contains_key("sojourn_a.csv"));
        assert!(out.summary_csv().unwrap().starts_with("scenario,case,check,value,target,tolerance,margin,passed\n"));
    }
}
