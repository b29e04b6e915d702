//! Lebowitz-Rubinow cell populations: age `a` in `(0, l)`, cycle length `l`
//! in `(l1, l2)`, mortality `mu(a, l)`, and the birth law
//! `psi(0, l) = int k(l, l') psi(l', l') dl' + c psi(l, l)`.

use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use serde::Deserialize;

use crate::boundary::BoundaryOperator;
use crate::criterion::{criterion_epsilon0, nonlocal_criterion_l1, KernelVerdict};
use crate::error::{invalid, Error, Result};
use crate::geometry::{PhaseSpace, Vec3};
use crate::grid::{build_grids, GridSpec, Grids, PhaseFunction};
use crate::quadrature::GaussLegendre;
use crate::semigroup::{Attenuation, Engine, Record, SemigroupRun};

/// Values on a rectilinear grid, interpolated bilinearly and clamped at the
/// edges.
#[derive(Debug, Clone, PartialEq)]
pub struct Table2D {
    xs: Vec<f64>,
    ys: Vec<f64>,
    /// Row-major in `x`: `values[i * ys.len() + j]`.
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct Row {
    x: f64,
    y: f64,
    value: f64,
}

impl Table2D {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let increasing = |v: &[f64]| !v.is_empty() && v.windows(2).all(|w| w[0] < w[1]);
        if !increasing(&xs) || !increasing(&ys) {
            return Err(invalid("table axes must be nonempty and strictly increasing"));
        }
        if values.len() != xs.len() * ys.len() || values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("table needs one finite value per grid point"));
        }
        Ok(Self { xs, ys, values })
    }

    /// Long-format CSV with header `x,y,value`, one row per grid point.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rows: Vec<Row> =
            csv::Reader::from_reader(reader).deserialize().collect::<std::result::Result<_, _>>()?;
        let axis = |f: fn(&Row) -> f64, rows: &[Row]| {
            let mut v: Vec<f64> = rows.iter().map(f).collect();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v
        };
        let xs = axis(|r| r.x, &rows);
        let ys = axis(|r| r.y, &rows);
        if rows.len() != xs.len() * ys.len() {
            return Err(invalid("table rows do not form a complete rectilinear grid"));
        }
        rows.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
        if rows.windows(2).any(|w| w[0].x == w[1].x && w[0].y == w[1].y) {
            return Err(invalid("duplicate table point"));
        }
        Self::new(xs, ys, rows.iter().map(|r| r.value).collect())
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_csv(std::fs::File::open(path)?)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        fn bracket(axis: &[f64], t: f64) -> (usize, f64) {
            if axis.len() == 1 || t <= axis[0] {
                return (0, 0.0);
            }
            let n = axis.len();
            if t >= axis[n - 1] {
                return (n - 2, 1.0);
            }
            let i = axis.partition_point(|&a| a <= t) - 1;
            (i, (t - axis[i]) / (axis[i + 1] - axis[i]))
        }
        let (i, s) = bracket(&self.xs, x);
        let (j, t) = bracket(&self.ys, y);
        let ny = self.ys.len();
        let at = |a: usize, b: usize| self.values[a.min(self.xs.len() - 1) * ny + b.min(ny - 1)];
        (1.0 - s) * ((1.0 - t) * at(i, j) + t * at(i, j + 1)) + s * ((1.0 - t) * at(i + 1, j) + t * at(i + 1, j + 1))
    }
}

/// A function of two variables given as a constant, a table, or a closure.
#[derive(Clone)]
pub enum Profile2D {
    Constant(f64),
    Table(Arc<Table2D>),
    Function(Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for Profile2D {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Profile2D::Constant(c) => write!(f, "Constant({c})"),
            Profile2D::Table(_) => write!(f, "Table(..)"),
            Profile2D::Function(_) => write!(f, "Function(..)"),
        }
    }
}

impl Profile2D {
    pub fn function(f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        Profile2D::Function(Arc::new(f))
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match self {
            Profile2D::Constant(c) => *c,
            Profile2D::Table(t) => t.eval(x, y),
            Profile2D::Function(f) => f(x, y),
        }
    }

    fn is_zero(&self) -> bool {
        matches!(self, Profile2D::Constant(c) if *c == 0.0)
    }
}

impl From<f64> for Profile2D {
    fn from(c: f64) -> Self {
        Profile2D::Constant(c)
    }
}

impl From<Table2D> for Profile2D {
    fn from(t: Table2D) -> Self {
        Profile2D::Table(Arc::new(t))
    }
}

/// Mortality `mu(a, l)`, birth kernel `k(l, l')` and the direct re-entry
/// fraction `c`.
#[derive(Debug, Clone)]
pub struct CellModel {
    pub l1: f64,
    pub l2: f64,
    pub mortality: Profile2D,
    pub kernel: Profile2D,
    pub c: f64,
}

impl CellModel {
    pub fn new(l1: f64, l2: f64) -> Self {
        Self { l1, l2, mortality: 0.0.into(), kernel: 0.0.into(), c: 0.0 }
    }

    pub fn mortality(mut self, mu: impl Into<Profile2D>) -> Self {
        self.mortality = mu.into();
        self
    }

    pub fn kernel(mut self, k: impl Into<Profile2D>) -> Self {
        self.kernel = k.into();
        self
    }

    pub fn reentry(mut self, c: f64) -> Self {
        self.c = c;
        self
    }

    pub fn space(&self) -> Result<Arc<PhaseSpace>> {
        if !(self.c >= 0.0) || !self.c.is_finite() {
            return Err(invalid("c must be finite and nonnegative"));
        }
        Ok(Arc::new(PhaseSpace::population(self.l1, self.l2)?))
    }

    /// Grids with resolution `[ages per cycle, cycle lengths]`; mortality
    /// and kernel are checked on the nodes.
    pub fn grids(&self, resolution: [usize; 2]) -> Result<Grids> {
        let grids = build_grids(self.space()?, &GridSpec::new(resolution))?;
        for x in grids.phase.positions() {
            let mu = self.mortality.eval(x.x, x.y);
            if !(mu >= 0.0) || !mu.is_finite() {
                return Err(invalid(format!("mortality {mu} at ({}, {}) must be finite and nonnegative", x.x, x.y)));
            }
        }
        Ok(grids)
    }

    pub fn operator(&self, grids: &Grids) -> Result<BoundaryOperator> {
        let kernel = self.kernel.clone();
        let h = BoundaryOperator::lebowitz_rubinow(grids, move |l, lp| kernel.eval(l, lp), self.c)?;
        let m = h.kernel_part().min_entry();
        if m < 0.0 {
            return Err(Error::NegativeKernel(m));
        }
        Ok(h)
    }

    pub fn attenuation(&self) -> Attenuation {
        match &self.mortality {
            Profile2D::Constant(c) if *c == 0.0 => Attenuation::None,
            Profile2D::Constant(c) => Attenuation::Constant(*c),
            mu => {
                let mu = mu.clone();
                Attenuation::Field(Arc::new(move |x: &Vec3| mu.eval(x.x, x.y)))
            }
        }
    }
}

/// Ages the population with exact mortality attenuation and couples
/// divisions at `a = l` to births at `a = 0` through the trace history.
pub fn cell_propagate(
    model: &CellModel,
    grids: &Grids,
    initial: &dyn PhaseFunction,
    t_final: f64,
    dt: Option<f64>,
    outputs: usize,
) -> Result<Record> {
    let mut run = SemigroupRun::new(grids.clone(), model.operator(grids)?, 1.0, t_final)
        .with_outputs(outputs)
        .with_attenuation(model.attenuation())
        .with_engine(Engine::TimeMarching);
    if let Some(dt) = dt {
        run = run.with_dt(dt);
    }
    run.propagate(initial)
}

#[derive(Debug, Clone)]
pub enum CellVerdict {
    /// `l1 > 0`: every sojourn is at least `tau0`.
    HoldsByRegularity {
        tau0: f64,
        full_norm: f64,
        growth_exponent: f64,
    },
    Kernel(KernelVerdict),
    /// `c >= 1` with a nonzero kernel leaves no budget.
    NoBudget {
        c: f64,
    },
}

impl CellVerdict {
    pub fn holds(&self) -> bool {
        match self {
            CellVerdict::HoldsByRegularity { .. } => true,
            CellVerdict::Kernel(v) => v.holds,
            CellVerdict::NoBudget { .. } => false,
        }
    }
}

pub fn cell_wellposedness(model: &CellModel, grids: &Grids, p: f64) -> Result<CellVerdict> {
    let h = model.operator(grids)?;
    if model.l1 > 0.0 {
        let tau0 = model.l1;
        let full_norm = criterion_epsilon0(&h, p)?.full_norm;
        return Ok(CellVerdict::HoldsByRegularity { tau0, full_norm, growth_exponent: full_norm.ln().max(0.0) / tau0 });
    }
    if model.c >= 1.0 && !model.kernel.is_zero() {
        return Ok(CellVerdict::NoBudget { c: model.c });
    }
    if p != 1.0 {
        return Err(Error::Precondition("the kernel criterion is stated in L^1".into()));
    }
    Ok(CellVerdict::Kernel(nonlocal_criterion_l1(&h)?))
}

/// Malthusian rate `r` of `1 = int_{l1}^{l2} k(l) e^{-r l} dl`, the renewal
/// equation for a daughter law `k(l)` that ignores the mother's cycle.
pub fn renewal_rate(k: impl Fn(f64) -> f64, l1: f64, l2: f64) -> Result<f64> {
    let gl = GaussLegendre::new(32);
    let lotka = |r: f64| gl.integrate_composite(l1, l2, 16, |l| k(l) * (-r * l).exp()) - 1.0;
    let (mut lo, mut hi) = (-1.0, 1.0);
    while lotka(lo) < 0.0 {
        lo *= 2.0;
        if lo < -1e6 {
            return Err(Error::NoConvergence { iterations: 0, change: lotka(lo) });
        }
    }
    while lotka(hi) > 0.0 {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::NoConvergence { iterations: 0, change: lotka(hi) });
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if lotka(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
