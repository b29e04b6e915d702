//! Propagation of the free-streaming semigroup `U_H(t)`.
//!
//! Values are transported exactly along characteristics. With a general
//! boundary operator, the incoming trace is a delay recursion: the outgoing
//! trace at time `s` is read either from the initial data or from the
//! incoming trace at time `s - tau`, which is stored in a history buffer and
//! interpolated linearly in time. Scaled regular reflections are instead
//! unrolled bounce by bounce with no time step at all.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;

use crate::boundary::{BoundaryOperator, Coefficient, ReflectionMap};
use crate::error::{invalid, Error, Result};
use crate::geometry::{specular, Geometry, Vec3};
use crate::grid::{DensityField, Grids, PhaseFunction, TraceGrid};
use crate::quadrature::GaussLegendre;

/// Default cap on reflections followed per node by the billiard engine.
pub const DEFAULT_BOUNCE_CAP: usize = 10_000;

/// Pointwise absorption `sigma(x)` applied along flights as
/// `exp(-int sigma)`. Negative rates amplify.
#[derive(Clone, Default)]
pub enum Attenuation {
    #[default]
    None,
    Constant(f64),
    Field(Arc<dyn Fn(&Vec3) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for Attenuation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Attenuation::None => write!(f, "None"),
            Attenuation::Constant(s) => write!(f, "Constant({s})"),
            Attenuation::Field(_) => write!(f, "Field(..)"),
        }
    }
}

impl Attenuation {
    /// `exp(-int_0^s sigma(x - r v) dr)`.
    pub fn factor(&self, x: &Vec3, v: &Vec3, s: f64) -> f64 {
        match self {
            Attenuation::None => 1.0,
            Attenuation::Constant(sigma) => (-sigma * s).exp(),
            Attenuation::Field(f) => {
                if s <= 0.0 {
                    return 1.0;
                }
                let gl = gauss8();
                (-gl.integrate(0.0, s, |r| f(&(x - r * v)))).exp()
            }
        }
    }
}

fn gauss8() -> &'static GaussLegendre {
    static RULE: std::sync::OnceLock<GaussLegendre> = std::sync::OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(8))
}

/// Which engine propagates the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Engine {
    /// Billiard for scaled regular reflections, time marching otherwise.
    #[default]
    Auto,
    TimeMarching,
    Billiard,
}

/// A propagation problem.
#[derive(Debug, Clone)]
pub struct SemigroupRun {
    pub grids: Grids,
    pub operator: BoundaryOperator,
    pub p: f64,
    pub t_final: f64,
    /// Time step; defaults to an eighth of the smallest sojourn time.
    pub dt: Option<f64>,
    /// Number of equal recording intervals over `[0, t_final]`.
    pub outputs: usize,
    pub attenuation: Attenuation,
    pub engine: Engine,
    pub bounce_cap: usize,
    /// Keep the field at every recorded time, not only the last one.
    pub keep_fields: bool,
}

impl SemigroupRun {
    pub fn new(grids: Grids, operator: BoundaryOperator, p: f64, t_final: f64) -> Self {
        Self {
            grids,
            operator,
            p,
            t_final,
            dt: None,
            outputs: 50,
            attenuation: Attenuation::None,
            engine: Engine::Auto,
            bounce_cap: DEFAULT_BOUNCE_CAP,
            keep_fields: false,
        }
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = Some(dt);
        self
    }

    pub fn with_outputs(mut self, outputs: usize) -> Self {
        self.outputs = outputs;
        self
    }

    pub fn with_attenuation(mut self, attenuation: Attenuation) -> Self {
        self.attenuation = attenuation;
        self
    }

    pub fn with_engine(mut self, engine: Engine) -> Self {
        self.engine = engine;
        self
    }

    pub fn keeping_fields(mut self) -> Self {
        self.keep_fields = true;
        self
    }

    fn validate(&self) -> Result<()> {
        if !Arc::ptr_eq(self.operator.incoming(), &self.grids.incoming)
            || !Arc::ptr_eq(self.operator.outgoing(), &self.grids.outgoing)
        {
            return Err(Error::GridMismatch("operator was built on other grids".into()));
        }
        if !(self.p >= 1.0) || !self.p.is_finite() {
            return Err(invalid("p must lie in [1, inf)"));
        }
        if !(self.t_final >= 0.0) || !self.t_final.is_finite() {
            return Err(invalid("t_final must be finite and nonnegative"));
        }
        if self.outputs == 0 {
            return Err(invalid("at least one output interval is needed"));
        }
        Ok(())
    }

    /// Smallest sojourn time on the outgoing grid.
    pub fn min_tau(&self) -> f64 {
        self.grids.outgoing.taus().iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_tau(&self) -> f64 {
        self.grids.outgoing.taus().iter().copied().fold(0.0, f64::max)
    }

    /// Propagates with the configured engine.
    pub fn propagate(&self, initial: &dyn PhaseFunction) -> Result<Record> {
        match self.engine {
            Engine::TimeMarching => self.propagate_marching(initial),
            Engine::Billiard => self.propagate_billiard(initial),
            Engine::Auto if self.operator.as_reflection().is_some() => self.propagate_billiard(initial),
            Engine::Auto => self.propagate_marching(initial),
        }
    }

    fn output_times(&self) -> Vec<f64> {
        (0..=self.outputs).map(|m| self.t_final * m as f64 / self.outputs as f64).collect()
    }

    /// Trace-history time marching for an arbitrary boundary operator.
    pub fn propagate_marching(&self, initial: &dyn PhaseFunction) -> Result<Record> {
        self.validate()?;
        let min_tau = self.min_tau();
        let dt_max = self.dt.unwrap_or(min_tau / 8.0);
        if !(dt_max > 0.0) {
            return Err(invalid("dt must be positive"));
        }
        if dt_max > min_tau / 4.0 {
            return Err(Error::HistoryUnderrun { dt: dt_max, min_tau });
        }
        // steps per output interval, so that recordings fall on steps
        let interval = self.t_final / self.outputs as f64;
        let per = if interval > 0.0 { (interval / dt_max).ceil().max(1.0) as usize } else { 1 };
        let steps = per * self.outputs;
        let dt = if self.t_final > 0.0 { self.t_final / steps as f64 } else { dt_max };

        let space = self.grids.space.clone();
        let (inc, out, phase) = (&self.grids.incoming, &self.grids.outgoing, &self.grids.phase);
        let vel = phase.velocities().clone();
        let att = &self.attenuation;

        // backward exits of outgoing nodes
        let out_exits: Vec<Exit> = (0..out.len())
            .into_par_iter()
            .map(|j| Exit::new(inc, out.x(j), out.v(j), out.nodes()[j].velocity, out.taus()[j], att))
            .collect::<Result<_>>()?;
        let phase_exits: Vec<Exit> = phase
            .nodes()
            .par_iter()
            .map(|n| {
                let v = vel.vector(n.velocity);
                let t = space.sojourn_time(&n.x, v)?;
                Exit::new(inc, &n.x, v, n.velocity, t, att)
            })
            .collect::<Result<_>>()?;

        let span = (self.max_tau() / dt).ceil() as usize + 3;
        let mut history = History::new(span.min(steps + 2), dt, inc.len());
        let mut g = vec![0.0; out.len()];
        let mut f_in = vec![0.0; inc.len()];
        let mut record = Record::new(self.p);

        for k in 0..=steps {
            let t = k as f64 * dt;
            g.par_iter_mut().enumerate().for_each(|(j, gj)| {
                let e = &out_exits[j];
                *gj = if t < e.time {
                    att.factor(out.x(j), out.v(j), t)
                        * initial.value_on(&(out.x(j) - t * out.v(j)), out.v(j), e.velocity, &vel)
                } else {
                    e.attenuation * history.read(&e.stencil, t - e.time)
                };
            });
            self.operator.apply_into(&g, &mut f_in);
            history.push(&f_in);
            if k % per == 0 {
                let values: Vec<f64> = phase
                    .nodes()
                    .par_iter()
                    .zip(&phase_exits)
                    .map(|(n, e)| {
                        let v = vel.vector(n.velocity);
                        if t < e.time {
                            att.factor(&n.x, v, t) * initial.value_on(&(n.x - t * v), v, n.velocity, &vel)
                        } else {
                            e.attenuation * history.read(&e.stencil, t - e.time)
                        }
                    })
                    .collect();
                let field = DensityField::new(phase.clone(), values)?;
                record.push(t, field, 0.0, self.keep_fields || k == steps);
            }
        }
        Ok(record)
    }

    /// Exact unrolling of broken characteristics for a scaled regular
    /// reflection.
    pub fn propagate_billiard(&self, initial: &dyn PhaseFunction) -> Result<Record> {
        self.validate()?;
        let (map, alpha) = self
            .operator
            .as_reflection()
            .ok_or_else(|| Error::Precondition("billiard propagation needs a scaled regular reflection".into()))?;
        let times = self.output_times();
        let phase = &self.grids.phase;
        let vel = phase.velocities().clone();
        let tracer = Tracer { run: self, map, alpha };
        let per_node: Vec<Option<Vec<f64>>> = phase
            .nodes()
            .par_iter()
            .map(|n| tracer.trace(&n.x, vel.vector(n.velocity), n.velocity, &vel, &times, initial))
            .collect::<Result<_>>()?;
        let weights = phase.weights();
        let total: f64 = weights.iter().sum();
        let flagged: f64 = per_node.iter().zip(weights).filter(|(v, _)| v.is_none()).map(|(_, w)| w).sum();
        let mut record = Record::new(self.p);
        for (m, &t) in times.iter().enumerate() {
            let values: Vec<f64> = per_node.iter().map(|v| v.as_ref().map_or(0.0, |v| v[m])).collect();
            let field = DensityField::new(phase.clone(), values)?;
            record.push(t, field, flagged / total, self.keep_fields || m + 1 == times.len());
        }
        record.flagged = per_node.iter().map(Option::is_none).collect();
        Ok(record)
    }
}

/// Backward exit of a node onto the incoming grid.
struct Exit {
    time: f64,
    velocity: usize,
    stencil: Vec<(usize, f64)>,
    attenuation: f64,
}

impl Exit {
    fn new(inc: &TraceGrid, x: &Vec3, v: &Vec3, velocity: usize, time: f64, att: &Attenuation) -> Result<Self> {
        if !time.is_finite() {
            return Ok(Self { time, velocity, stencil: Vec::new(), attenuation: 0.0 });
        }
        let z = inc.space().project_to_boundary(&(x - time * v));
        Ok(Self { time, velocity, stencil: inc.node_stencil(&z, velocity), attenuation: att.factor(x, v, time) })
    }
}

/// Ring buffer of incoming traces at `t_k = k dt`.
struct History {
    dt: f64,
    slots: Vec<Vec<f64>>,
    /// Number of steps pushed so far.
    len: usize,
}

impl History {
    fn new(capacity: usize, dt: f64, nodes: usize) -> Self {
        Self { dt, slots: vec![vec![0.0; nodes]; capacity.max(2)], len: 0 }
    }

    fn push(&mut self, f: &[f64]) {
        let cap = self.slots.len();
        self.slots[self.len % cap].copy_from_slice(f);
        self.len += 1;
    }

    fn slot(&self, k: usize) -> &[f64] {
        debug_assert!(k < self.len && k + self.slots.len() >= self.len, "history underrun");
        &self.slots[k % self.slots.len()]
    }

    /// Linear interpolation in time of the stencil value at time `s >= 0`.
    fn read(&self, stencil: &[(usize, f64)], s: f64) -> f64 {
        let u = (s / self.dt).max(0.0);
        let last = self.len - 1;
        let m = (u.floor() as usize).min(last);
        let w = if m == last { 0.0 } else { u - m as f64 };
        let a = self.slot(m);
        let mut val: f64 = stencil.iter().map(|&(i, c)| c * a[i]).sum();
        if w > 0.0 {
            let b = self.slot(m + 1);
            let next: f64 = stencil.iter().map(|&(i, c)| c * b[i]).sum();
            val = (1.0 - w) * val + w * next;
        }
        val
    }
}

struct Tracer<'a> {
    run: &'a SemigroupRun,
    map: ReflectionMap,
    alpha: &'a Coefficient,
}

impl Tracer<'_> {
    /// Values at every output time (ascending), or `None` when the bounce
    /// cap was hit.
    fn trace(
        &self,
        x0: &Vec3,
        v0: &Vec3,
        velocity: usize,
        vel: &Arc<crate::grid::VelocitySet>,
        times: &[f64],
        initial: &dyn PhaseFunction,
    ) -> Result<Option<Vec<f64>>> {
        let space = &self.run.grids.space;
        let att = &self.run.attenuation;
        let mut out = Vec::with_capacity(times.len());
        let (mut x, mut v) = (*x0, *v0);
        let mut index = Some(velocity);
        let mut elapsed = 0.0;
        let mut factor = 1.0;
        let mut bounces = 0;
        let mut m = 0;
        while m < times.len() {
            let s = space.sojourn_time(&x, &v)?;
            // outputs reached inside this flight
            while m < times.len() && times[m] - elapsed < s {
                let r = times[m] - elapsed;
                let y = x - r * v;
                let value = match index {
                    Some(i) => initial.value_on(&y, &v, i, vel),
                    None => initial.value(&y, &v),
                };
                out.push(factor * att.factor(&x, &v, r) * value);
                m += 1;
            }
            if m == times.len() {
                break;
            }
            bounces += 1;
            if bounces > self.run.bounce_cap {
                return Ok(None);
            }
            factor *= att.factor(&x, &v, s);
            elapsed += s;
            let exit = space.backward_exit(&x, &v)?;
            factor *= self.alpha.at(&exit.x);
            let (y, w) = match self.map {
                ReflectionMap::Specular => (exit.x, specular(&v, &exit.normal)),
                ReflectionMap::BounceBack => (exit.x, -v),
                ReflectionMap::Transfer => match space.geometry() {
                    Geometry::PopulationTriangle { .. } => (Vec3::new(exit.x.y, exit.x.y, 0.0), v),
                    _ => return Err(Error::Unsupported("transfer map outside the population geometry".into())),
                },
            };
            if w != v {
                index = vel.locate(&w);
            }
            x = y;
            v = w;
            if factor == 0.0 {
                out.resize(times.len(), 0.0);
                break;
            }
        }
        Ok(Some(out))
    }
}

/// One recorded sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub norm: f64,
    pub flagged_fraction: f64,
}

/// Time series of norms and fields produced by a propagation.
#[derive(Debug, Clone)]
pub struct Record {
    pub p: f64,
    pub samples: Vec<Sample>,
    /// `(t, field)` at recorded times; always holds the final field.
    pub fields: Vec<(f64, DensityField)>,
    /// Phase nodes excluded from norms by the billiard bounce cap.
    pub flagged: Vec<bool>,
}

impl Record {
    fn new(p: f64) -> Self {
        Self { p, samples: Vec::new(), fields: Vec::new(), flagged: Vec::new() }
    }

    fn push(&mut self, t: f64, field: DensityField, flagged_fraction: f64, keep: bool) {
        self.samples.push(Sample { t, norm: field.norm_p(self.p), flagged_fraction });
        if keep {
            self.fields.push((t, field));
        }
    }

    pub fn final_field(&self) -> &DensityField {
        &self.fields.last().expect("a record always keeps its final field").1
    }

    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    pub fn norms(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.norm).collect()
    }

    /// Writes `t,norm_p,flagged_fraction`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "norm_p", "flagged_fraction"])?;
        for s in &self.samples {
            w.serialize((s.t, s.norm, s.flagged_fraction))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Least-squares growth rate of a record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GrowthRate {
    Rate(f64),
    /// Every norm vanished by this time.
    Extinct {
        by: f64,
    },
}

impl GrowthRate {
    pub fn rate(&self) -> f64 {
        match self {
            GrowthRate::Rate(r) => *r,
            GrowthRate::Extinct { .. } => f64::NEG_INFINITY,
        }
    }
}

/// Slope of `ln norm` against `t` over the trailing half of the record.
pub fn growth_rate(record: &Record) -> Result<GrowthRate> {
    let n = record.samples.len();
    if n < 10 {
        return Err(Error::DegenerateWindow(format!("{n} samples; at least 10 are needed")));
    }
    let window = &record.samples[n / 2..];
    if let Some(s) = window.iter().find(|s| s.norm <= 0.0) {
        return Ok(GrowthRate::Extinct { by: s.t });
    }
    let pts: Vec<(f64, f64)> = window.iter().map(|s| (s.t, s.norm.ln())).collect();
    let k = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let stt: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    if stt == 0.0 {
        return Err(Error::DegenerateWindow("all samples at one time".into()));
    }
    let sty: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    Ok(GrowthRate::Rate(sty / stt))
}

/// Weights of the renormalisation `q^{min(t, k)}`.
#[derive(Debug, Clone)]
pub struct RenormalizationWeight {
    pub q: f64,
    pub k_cap: f64,
    /// `q^{t_k}` on phase nodes.
    pub phase: Vec<f64>,
    /// `q^{tau_k}` on outgoing nodes.
    pub outgoing: Vec<f64>,
    /// `q^{0}` on incoming nodes.
    pub incoming: Vec<f64>,
}

impl RenormalizationWeight {
    pub fn new(grids: &Grids, q: f64, k_cap: Option<f64>) -> Result<Self> {
        if !(q > 0.0 && q < 1.0) {
            return Err(invalid("q must lie in (0, 1)"));
        }
        let k = k_cap.unwrap_or_else(|| grids.outgoing.taus().iter().copied().fold(0.0, f64::max));
        if !(k > 0.0) {
            return Err(invalid("k_cap must be positive"));
        }
        let space = &grids.space;
        let vel = grids.phase.velocities();
        let phase = grids
            .phase
            .nodes()
            .iter()
            .map(|n| Ok(q.powf(space.sojourn_time(&n.x, vel.vector(n.velocity))?.min(k))))
            .collect::<Result<_>>()?;
        let outgoing = grids.outgoing.taus().iter().map(|t| q.powf(t.min(k))).collect();
        Ok(Self { q, k_cap: k, phase, outgoing, incoming: vec![1.0; grids.incoming.len()] })
    }

    /// `||B_q||` and `||B_q^{-1}||` on the grid (sup norms of the multipliers).
    pub fn operator_bounds(&self) -> (f64, f64) {
        let max = self.phase.iter().copied().fold(0.0, f64::max);
        let min = self.phase.iter().copied().fold(f64::INFINITY, f64::min);
        (max, 1.0 / min)
    }
}

/// Solves the renormalised problem with boundary operator `H M_q` and rate
/// `-ln q` of amplification along flights, then maps back with `B_q`.
/// `q = safety * ((1 - ||H chi_eps||) / ||H||)^{1/eps}`, which makes
/// `q^eps` small enough that `||H M_q|| < 1`. `safety` lies in `(0, 1)`.
pub fn admissible_q(h: &BoundaryOperator, epsilon: f64, p: f64, safety: f64) -> Result<f64> {
    if !(epsilon > 0.0) || !(safety > 0.0 && safety < 1.0) {
        return Err(invalid("need eps > 0 and safety in (0, 1)"));
    }
    let truncated = h.truncate(epsilon).operator_norm(p)?.value;
    let full = h.operator_norm(p)?.value;
    if truncated >= 1.0 {
        return Err(Error::Precondition(format!("||H chi_eps|| = {truncated} is not below 1")));
    }
    if full == 0.0 {
        return Ok(safety);
    }
    let bound = (1.0 - truncated) / full;
    Ok((safety * bound.powf(1.0 / epsilon)).min(safety))
}

pub fn renormalized_propagate(
    run: &SemigroupRun,
    initial: &dyn PhaseFunction,
    q: f64,
    k_cap: Option<f64>,
) -> Result<(Record, RenormalizationWeight)> {
    let weight = RenormalizationWeight::new(&run.grids, q, k_cap)?;
    let k = weight.k_cap;
    let space = run.grids.space.clone();
    let hq = run.operator.scale_columns(&weight.outgoing)?;
    let sigma = q.ln();
    let attenuation = match &run.attenuation {
        Attenuation::None => Attenuation::Constant(sigma),
        Attenuation::Constant(s) => Attenuation::Constant(s + sigma),
        Attenuation::Field(f) => {
            let f = f.clone();
            Attenuation::Field(Arc::new(move |x: &Vec3| f(x) + sigma))
        }
    };
    let inner =
        SemigroupRun { operator: hq, attenuation, engine: Engine::TimeMarching, keep_fields: true, ..run.clone() };
    let lifted = Lifted { base: initial, space: &space, q, k };
    let mut record = inner.propagate_marching(&lifted)?;
    for ((_, field), sample) in record.fields.iter_mut().zip(record.samples.iter_mut()) {
        field.values.iter_mut().zip(&weight.phase).for_each(|(v, w)| *v *= w);
        sample.norm = field.norm_p(run.p);
    }
    if !run.keep_fields {
        let last = record.fields.pop().expect("final field");
        record.fields = vec![last];
    }
    Ok((record, weight))
}

/// Initial data `q^{-t_k} phi` of the renormalised problem.
struct Lifted<'a> {
    base: &'a dyn PhaseFunction,
    space: &'a crate::geometry::PhaseSpace,
    q: f64,
    k: f64,
}

impl Lifted<'_> {
    fn scale(&self, x: &Vec3, v: &Vec3) -> f64 {
        let t = self.space.sojourn_time(x, v).unwrap_or(0.0).min(self.k);
        self.q.powf(-t)
    }
}

impl PhaseFunction for Lifted<'_> {
    fn value(&self, x: &Vec3, v: &Vec3) -> f64 {
        self.scale(x, v) * self.base.value(x, v)
    }

    fn value_on(&self, x: &Vec3, v: &Vec3, index: usize, velocities: &Arc<crate::grid::VelocitySet>) -> f64 {
        self.scale(x, v) * self.base.value_on(x, v, index, velocities)
    }
}
