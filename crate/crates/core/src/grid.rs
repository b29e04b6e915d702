//! Quadrature grids on `Omega x V` and on the trace sets `Gamma_-`, `Gamma_+`,
//! sampled fields and their `L^p` norms.
//!
//! Velocities are a discrete measure: the velocity nodes are the support and
//! fields are never interpolated in `v`. Velocity sets are generated symmetric
//! under `v -> -v` and, for the slab and the disc, closed under the specular
//! map at every boundary node, so reflections act as node permutations.
//!
//! Trace weights carry the flux factor: a trace node at boundary position `x`
//! with velocity `v` has weight `|v . n(x)| * dgamma(x) * dmu(v)`.

use std::collections::HashMap;
use std::f64::consts::{PI, SQRT_2};
use std::io::Write;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::geometry::{Geometry, PhaseSpace, Side, Vec3, VelocityModel};

/// Default tangential cutoff, relative to the maximal speed (slab) or to the
/// direction cosine `|v . n| / |v|` (ball).
pub const DEFAULT_TANGENTIAL_CUTOFF: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadratureRule {
    /// Cell midpoints; never samples the end points.
    #[default]
    Midpoint,
    /// Cell end points with halved end weights; samples the top speed.
    Trapezoid,
}

#[derive(Debug, Clone)]
pub struct GridSpec {
    /// Cells per axis. Slab: `[nx, nv]`; disc: `[nr, ntheta, nspeed, ndir]`;
    /// ball in 3D: `[nr, npolar, nazimuth, nspeed, ndir_polar, ndir_azimuth]`;
    /// population triangle: `[nage, ncycle]`.
    pub resolution: Vec<usize>,
    pub tangential_cutoff: f64,
    pub velocity_rule: QuadratureRule,
}

impl GridSpec {
    pub fn new(resolution: impl Into<Vec<usize>>) -> Self {
        Self {
            resolution: resolution.into(),
            tangential_cutoff: DEFAULT_TANGENTIAL_CUTOFF,
            velocity_rule: QuadratureRule::Midpoint,
        }
    }

    pub fn cutoff(mut self, cutoff: f64) -> Self {
        self.tangential_cutoff = cutoff;
        self
    }

    pub fn rule(mut self, rule: QuadratureRule) -> Self {
        self.velocity_rule = rule;
        self
    }
}

/// Discrete velocity measure.
#[derive(Debug, Clone)]
pub struct VelocitySet {
    vectors: Vec<Vec3>,
    weights: Vec<f64>,
    index: HashMap<[i64; 3], usize>,
    quantum: f64,
}

impl VelocitySet {
    pub fn new(vectors: Vec<Vec3>, weights: Vec<f64>) -> Self {
        assert_eq!(vectors.len(), weights.len());
        let scale = vectors.iter().map(|v| v.amax()).fold(0.0, f64::max).max(1e-300);
        let quantum = 1e-9 * scale;
        let index = vectors.iter().enumerate().map(|(i, v)| (quantize(v, quantum), i)).collect();
        Self { vectors, weights, index, quantum }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vector(&self, i: usize) -> &Vec3 {
        &self.vectors[i]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn vectors(&self) -> &[Vec3] {
        &self.vectors
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Index of the node equal to `v` up to `1e-8` relative, if any.
    pub fn locate(&self, v: &Vec3) -> Option<usize> {
        if let Some(&i) = self.index.get(&quantize(v, self.quantum)) {
            return Some(i);
        }
        let i = self.nearest(v);
        ((self.vectors[i] - v).amax() <= 10.0 * self.quantum).then_some(i)
    }

    pub fn nearest(&self, v: &Vec3) -> usize {
        self.vectors
            .iter()
            .enumerate()
            .map(|(i, w)| (i, (w - v).norm_squared()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .expect("empty velocity set")
    }
}

fn quantize(v: &Vec3, q: f64) -> [i64; 3] {
    [(v.x / q).round() as i64, (v.y / q).round() as i64, (v.z / q).round() as i64]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseNode {
    pub x: Vec3,
    pub velocity: usize,
    pub position: usize,
}

/// Product structure used for interpolation in `x`.
#[derive(Debug, Clone)]
pub enum PhaseLayout {
    Slab {
        xs: Vec<f64>,
    },
    Polar {
        rs: Vec<f64>,
        thetas: Vec<f64>,
    },
    Spherical {
        rs: Vec<f64>,
        polar: Vec<f64>,
        azimuth: Vec<f64>,
    },
    /// Mapped coordinates `(a / l, l)`.
    Population {
        fractions: Vec<f64>,
        cycles: Vec<f64>,
    },
    Unstructured,
}

/// Quadrature nodes on `Omega x V` with weights approximating `dx dmu(v)`.
#[derive(Debug, Clone)]
pub struct PhaseGrid {
    space: Arc<PhaseSpace>,
    velocities: Arc<VelocitySet>,
    positions: Vec<Vec3>,
    nodes: Vec<PhaseNode>,
    weights: Vec<f64>,
    layout: PhaseLayout,
}

/// Up to eight `(index, weight)` pairs of a multilinear stencil.
#[derive(Debug, Clone, Copy, Default)]
pub struct Stencil {
    entries: [(usize, f64); 8],
    len: usize,
}

impl Stencil {
    fn push(&mut self, i: usize, w: f64) {
        if w != 0.0 {
            self.entries[self.len] = (i, w);
            self.len += 1;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries[..self.len].iter().copied()
    }

    fn single(i: usize) -> Self {
        let mut s = Self::default();
        s.push(i, 1.0);
        s
    }

    fn product(a: &[(usize, f64)], b: &[(usize, f64)], stride: usize) -> Self {
        let mut s = Self::default();
        for &(i, wi) in a {
            for &(j, wj) in b {
                s.push(i * stride + j, wi * wj);
            }
        }
        s
    }
}

/// Linear weights on sorted nodes; `None` outside the hull unless clamped.
fn linear_weights(nodes: &[f64], x: f64, clamp: bool) -> Option<Vec<(usize, f64)>> {
    let n = nodes.len();
    let tol = 1e-12 * (nodes[n - 1] - nodes[0]).abs().max(1.0);
    if x < nodes[0] - tol || x > nodes[n - 1] + tol {
        if !clamp {
            return None;
        }
        return Some(vec![(if x < nodes[0] { 0 } else { n - 1 }, 1.0)]);
    }
    if n == 1 {
        return Some(vec![(0, 1.0)]);
    }
    let k = nodes.partition_point(|&y| y <= x).clamp(1, n - 1) - 1;
    let w = ((x - nodes[k]) / (nodes[k + 1] - nodes[k])).clamp(0.0, 1.0);
    Some(vec![(k, 1.0 - w), (k + 1, w)])
}

/// Linear weights on equispaced periodic nodes `offset + k * 2 pi / n`.
fn periodic_weights(n: usize, offset: f64, angle: f64) -> Vec<(usize, f64)> {
    let d = 2.0 * PI / n as f64;
    let u = (angle - offset).rem_euclid(2.0 * PI) / d;
    let k = (u.floor() as usize).min(n - 1);
    let w = u - k as f64;
    vec![(k, 1.0 - w), ((k + 1) % n, w)]
}

impl PhaseGrid {
    /// A grid with explicit nodes and no product structure.
    pub fn unstructured(
        space: Arc<PhaseSpace>,
        velocities: Arc<VelocitySet>,
        nodes: Vec<PhaseNode>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if nodes.len() != weights.len() {
            return Err(Error::GridMismatch("node and weight counts differ".into()));
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(invalid("phase weights must be positive"));
        }
        let positions = nodes.iter().map(|n| n.x).collect();
        Ok(Self { space, velocities, positions, nodes, weights, layout: PhaseLayout::Unstructured })
    }

    pub fn space(&self) -> &Arc<PhaseSpace> {
        &self.space
    }

    pub fn velocities(&self) -> &Arc<VelocitySet> {
        &self.velocities
    }

    pub fn nodes(&self) -> &[PhaseNode] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn layout(&self) -> &PhaseLayout {
        &self.layout
    }

    /// Velocity vector of node `i`.
    pub fn velocity(&self, i: usize) -> &Vec3 {
        self.velocities.vector(self.nodes[i].velocity)
    }

    /// Position stencil for multilinear interpolation.
    pub fn stencil(&self, x: &Vec3, clamp: bool) -> Result<Stencil> {
        let out = || Error::OutOfHull([x.x, x.y, x.z]);
        let st = match &self.layout {
            PhaseLayout::Slab { xs } => {
                let w = linear_weights(xs, x.x, clamp).ok_or_else(out)?;
                Stencil::product(&[(0, 1.0)], &w, 0)
            }
            PhaseLayout::Polar { rs, thetas } => {
                let wr = linear_weights(rs, x.norm(), clamp).ok_or_else(out)?;
                let wt = periodic_weights(thetas.len(), thetas[0], x.y.atan2(x.x));
                Stencil::product(&wr, &wt, thetas.len())
            }
            PhaseLayout::Spherical { rs, polar, azimuth } => {
                let r = x.norm();
                let wr = linear_weights(rs, r, clamp).ok_or_else(out)?;
                let th = if r > 0.0 { (x.z / r).clamp(-1.0, 1.0).acos() } else { 0.5 * PI };
                let wp = linear_weights(polar, th, true).ok_or_else(out)?;
                let wa = periodic_weights(azimuth.len(), azimuth[0], x.y.atan2(x.x));
                let mut s = Stencil::default();
                for &(i, a) in &wr {
                    for &(j, b) in &wp {
                        for &(k, c) in &wa {
                            s.push((i * polar.len() + j) * azimuth.len() + k, a * b * c);
                        }
                    }
                }
                s
            }
            PhaseLayout::Population { fractions, cycles } => {
                let l = x.y;
                let wl = linear_weights(cycles, l, clamp).ok_or_else(out)?;
                let frac = if l > 0.0 { x.x / l } else { 0.0 };
                let wf = linear_weights(fractions, frac, clamp).ok_or_else(out)?;
                // positions are ordered cycle-major
                Stencil::product(&wl, &wf, fractions.len())
            }
            PhaseLayout::Unstructured => {
                return Err(Error::Unsupported("interpolation on an unstructured grid".into()))
            }
        };
        Ok(st)
    }

    /// Node index of `(position, velocity)` on product grids.
    pub fn node_index(&self, position: usize, velocity: usize) -> usize {
        position * self.velocities.len() + velocity
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryPosition {
    pub x: Vec3,
    pub normal: Vec3,
    /// Surface element `dgamma` attached to this node.
    pub dgamma: f64,
}

#[derive(Debug, Clone)]
pub enum BoundaryLayout {
    /// Slab end points: index 0 is `-a`, index 1 is `a`.
    Walls,
    /// Circle nodes at angles `k * 2 pi / n`.
    Circle {
        count: usize,
    },
    Sphere {
        polar: Vec<f64>,
        azimuth: Vec<f64>,
    },
    /// Population edges parametrised by the cycle length.
    Edge {
        cycles: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceNode {
    pub position: usize,
    pub velocity: usize,
    /// `|v . n(x)|`.
    pub flux: f64,
}

const NO_NODE: u32 = u32::MAX;

/// Quadrature nodes on `Gamma_-` or `Gamma_+` with weights approximating
/// `|v . n(x)| dgamma(x) dmu(v)`.
#[derive(Debug, Clone)]
pub struct TraceGrid {
    space: Arc<PhaseSpace>,
    side: Side,
    velocities: Arc<VelocitySet>,
    positions: Vec<BoundaryPosition>,
    nodes: Vec<TraceNode>,
    weights: Vec<f64>,
    taus: Vec<f64>,
    lookup: Vec<u32>,
    layout: BoundaryLayout,
}

impl TraceGrid {
    fn build(
        space: Arc<PhaseSpace>,
        side: Side,
        velocities: Arc<VelocitySet>,
        positions: Vec<BoundaryPosition>,
        layout: BoundaryLayout,
        cone_cutoff: f64,
    ) -> Result<Self> {
        let nv = velocities.len();
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let mut taus = Vec::new();
        let mut lookup = vec![NO_NODE; positions.len() * nv];
        for (p, pos) in positions.iter().enumerate() {
            for (k, v) in velocities.vectors().iter().enumerate() {
                let speed = v.norm();
                let vn = v.dot(&pos.normal);
                let inside = match side {
                    Side::Incoming => vn < 0.0,
                    Side::Outgoing => vn > 0.0,
                    Side::Tangential => false,
                };
                if !inside || vn.abs() <= cone_cutoff * speed {
                    continue;
                }
                let tau = space.sojourn_time(&pos.x, v)?;
                lookup[p * nv + k] = nodes.len() as u32;
                nodes.push(TraceNode { position: p, velocity: k, flux: vn.abs() });
                weights.push(vn.abs() * pos.dgamma * velocities.weight(k));
                taus.push(tau);
            }
        }
        if nodes.is_empty() {
            return Err(invalid("trace grid is empty; lower the tangential cutoff"));
        }
        Ok(Self { space, side, velocities, positions, nodes, weights, taus, lookup, layout })
    }

    pub fn space(&self) -> &Arc<PhaseSpace> {
        &self.space
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn velocities(&self) -> &Arc<VelocitySet> {
        &self.velocities
    }

    pub fn positions(&self) -> &[BoundaryPosition] {
        &self.positions
    }

    pub fn nodes(&self) -> &[TraceNode] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Sojourn time `tau` at every node (zero on `Gamma_-`).
    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn layout(&self) -> &BoundaryLayout {
        &self.layout
    }

    pub fn position_of(&self, node: usize) -> &BoundaryPosition {
        &self.positions[self.nodes[node].position]
    }

    pub fn x(&self, node: usize) -> &Vec3 {
        &self.positions[self.nodes[node].position].x
    }

    pub fn v(&self, node: usize) -> &Vec3 {
        self.velocities.vector(self.nodes[node].velocity)
    }

    /// Node at `(position, velocity)`, if that pair lies on this side.
    pub fn node_at(&self, position: usize, velocity: usize) -> Option<usize> {
        let i = self.lookup[position * self.velocities.len() + velocity];
        (i != NO_NODE).then_some(i as usize)
    }

    /// Interpolation stencil over boundary positions for a boundary point.
    pub fn stencil(&self, x: &Vec3) -> Stencil {
        match &self.layout {
            BoundaryLayout::Walls => Stencil::single(usize::from(x.x > 0.0)),
            BoundaryLayout::Circle { count } => {
                let w = periodic_weights(*count, 0.0, x.y.atan2(x.x));
                Stencil::product(&[(0, 1.0)], &w, 0)
            }
            BoundaryLayout::Sphere { polar, azimuth } => {
                let r = x.norm();
                let th = (x.z / r).clamp(-1.0, 1.0).acos();
                let wp = linear_weights(polar, th, true).unwrap_or_default();
                let wa = periodic_weights(azimuth.len(), azimuth[0], x.y.atan2(x.x));
                Stencil::product(&wp, &wa, azimuth.len())
            }
            BoundaryLayout::Edge { cycles } => {
                let w = linear_weights(cycles, x.y, true).unwrap_or_default();
                Stencil::product(&[(0, 1.0)], &w, 0)
            }
        }
    }

    /// Nodes and weights for a trace value at `(x, velocity)`, renormalised
    /// over the stencil members that carry this velocity on this side.
    pub fn node_stencil(&self, x: &Vec3, velocity: usize) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> =
            self.stencil(x).iter().filter_map(|(p, w)| self.node_at(p, velocity).map(|n| (n, w))).collect();
        let total: f64 = out.iter().map(|e| e.1).sum();
        if total > 0.0 {
            out.iter_mut().for_each(|e| e.1 /= total);
        } else {
            out.clear();
        }
        out
    }
}

/// A phase-space discretisation together with both trace grids.
#[derive(Debug, Clone)]
pub struct Grids {
    pub space: Arc<PhaseSpace>,
    pub phase: Arc<PhaseGrid>,
    pub incoming: Arc<TraceGrid>,
    pub outgoing: Arc<TraceGrid>,
    pub spec: GridSpec,
}

fn midpoints(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let h = (hi - lo) / n as f64;
    (0..n).map(|k| lo + (k as f64 + 0.5) * h).collect()
}

/// One-dimensional rule on `[lo, hi]` with `n` cells.
fn rule_nodes(rule: QuadratureRule, lo: f64, hi: f64, n: usize) -> Vec<(f64, f64)> {
    let h = (hi - lo) / n as f64;
    match rule {
        QuadratureRule::Midpoint => midpoints(lo, hi, n).into_iter().map(|x| (x, h)).collect(),
        QuadratureRule::Trapezoid => (0..=n)
            .map(|k| {
                let w = if k == 0 || k == n { 0.5 * h } else { h };
                (lo + k as f64 * h, w)
            })
            .collect(),
    }
}

/// Builds the phase grid and both trace grids.
pub fn build_grids(space: Arc<PhaseSpace>, spec: &GridSpec) -> Result<Grids> {
    let cutoff = spec.tangential_cutoff;
    if !(0.0..1.0).contains(&cutoff) {
        return Err(invalid("tangential cutoff must lie in [0, 1) relative to the maximal speed"));
    }
    let res = &spec.resolution;
    let need = |n: usize| -> Result<()> {
        if res.len() != n {
            return Err(invalid(format!("expected {n} resolution entries, got {}", res.len())));
        }
        if res.iter().any(|&r| r < 2) {
            return Err(invalid("resolution must be at least 2 per axis"));
        }
        Ok(())
    };
    let (phase, incoming, outgoing) = match (space.geometry().clone(), space.velocity_model().clone()) {
        (Geometry::Slab { half_width: a }, VelocityModel::Band { min_speed, max_speed }) => {
            need(2)?;
            if !res[1].is_multiple_of(2) {
                return Err(invalid("slab velocity resolution must be even"));
            }
            let half = rule_nodes(spec.velocity_rule, min_speed, max_speed, res[1] / 2);
            let mut vecs = Vec::new();
            let mut ws = Vec::new();
            for &(s, w) in half.iter().rev() {
                if s > cutoff * max_speed {
                    vecs.push(Vec3::new(-s, 0.0, 0.0));
                    ws.push(w);
                }
            }
            for &(s, w) in &half {
                if s > cutoff * max_speed {
                    vecs.push(Vec3::new(s, 0.0, 0.0));
                    ws.push(w);
                }
            }
            let vel = Arc::new(VelocitySet::new(vecs, ws));
            let xs = midpoints(-a, a, res[0]);
            let dx = 2.0 * a / res[0] as f64;
            let positions: Vec<Vec3> = xs.iter().map(|&x| Vec3::new(x, 0.0, 0.0)).collect();
            let phase = product_grid(&space, &vel, positions, vec![dx; res[0]], PhaseLayout::Slab { xs });
            let walls = vec![
                BoundaryPosition { x: Vec3::new(-a, 0.0, 0.0), normal: -Vec3::x(), dgamma: 1.0 },
                BoundaryPosition { x: Vec3::new(a, 0.0, 0.0), normal: Vec3::x(), dgamma: 1.0 },
            ];
            let inc = TraceGrid::build(
                space.clone(),
                Side::Incoming,
                vel.clone(),
                walls.clone(),
                BoundaryLayout::Walls,
                0.0,
            )?;
            let out = TraceGrid::build(space.clone(), Side::Outgoing, vel, walls, BoundaryLayout::Walls, 0.0)?;
            (phase, inc, out)
        }
        (Geometry::Ball { dim: 2, radius }, VelocityModel::Isotropic { min_speed, max_speed }) => {
            need(4)?;
            let (nr, nt, ns, nd) = (res[0], res[1], res[2], res[3]);
            if nd % 2 != 0 || (2 * nd) % nt != 0 {
                return Err(invalid("disc grids need an even direction count divisible into 2*ndir by ntheta"));
            }
            let speeds = rule_nodes(spec.velocity_rule, min_speed, max_speed, ns);
            let dphi = 2.0 * PI / nd as f64;
            let mut vecs = Vec::new();
            let mut ws = Vec::new();
            for &(s, w) in &speeds {
                if s <= 0.0 {
                    continue;
                }
                for j in 0..nd {
                    let phi = (j as f64 + 0.5) * dphi;
                    vecs.push(Vec3::new(s * phi.cos(), s * phi.sin(), 0.0));
                    ws.push(s * w * dphi);
                }
            }
            let vel = Arc::new(VelocitySet::new(vecs, ws));
            let rs = midpoints(0.0, radius, nr);
            let dr = radius / nr as f64;
            let dth = 2.0 * PI / nt as f64;
            let thetas: Vec<f64> = (0..nt).map(|k| (k as f64 + 0.5) * dth).collect();
            let mut positions = Vec::new();
            let mut pw = Vec::new();
            for &r in &rs {
                for &t in &thetas {
                    positions.push(Vec3::new(r * t.cos(), r * t.sin(), 0.0));
                    pw.push(r * dr * dth);
                }
            }
            let phase = product_grid(&space, &vel, positions, pw, PhaseLayout::Polar { rs, thetas });
            let bpos: Vec<BoundaryPosition> = (0..nt)
                .map(|k| {
                    let t = k as f64 * dth;
                    let n = Vec3::new(t.cos(), t.sin(), 0.0);
                    BoundaryPosition { x: n * radius, normal: n, dgamma: radius * dth }
                })
                .collect();
            let layout = BoundaryLayout::Circle { count: nt };
            let inc =
                TraceGrid::build(space.clone(), Side::Incoming, vel.clone(), bpos.clone(), layout.clone(), cutoff)?;
            let out = TraceGrid::build(space.clone(), Side::Outgoing, vel, bpos, layout, cutoff)?;
            (phase, inc, out)
        }
        (Geometry::Ball { radius, .. }, VelocityModel::Isotropic { min_speed, max_speed }) => {
            need(6)?;
            let (nr, np, na, ns, ndp, nda) = (res[0], res[1], res[2], res[3], res[4], res[5]);
            if nda % 2 != 0 || na % 2 != 0 {
                return Err(invalid("azimuthal counts must be even"));
            }
            let speeds = rule_nodes(spec.velocity_rule, min_speed, max_speed, ns);
            let dpp = PI / ndp as f64;
            let dpa = 2.0 * PI / nda as f64;
            let mut vecs = Vec::new();
            let mut ws = Vec::new();
            for &(s, w) in &speeds {
                if s <= 0.0 {
                    continue;
                }
                for i in 0..ndp {
                    let th = (i as f64 + 0.5) * dpp;
                    for j in 0..nda {
                        let ph = (j as f64 + 0.5) * dpa;
                        vecs.push(s * unit_sphere(th, ph));
                        ws.push(s * s * w * th.sin() * dpp * dpa);
                    }
                }
            }
            let vel = Arc::new(VelocitySet::new(vecs, ws));
            let rs = midpoints(0.0, radius, nr);
            let dr = radius / nr as f64;
            let polar = midpoints(0.0, PI, np);
            let azimuth = midpoints(0.0, 2.0 * PI, na);
            let (dp, da) = (PI / np as f64, 2.0 * PI / na as f64);
            let mut positions = Vec::new();
            let mut pw = Vec::new();
            for &r in &rs {
                for &th in &polar {
                    for &ph in &azimuth {
                        positions.push(r * unit_sphere(th, ph));
                        pw.push(r * r * th.sin() * dr * dp * da);
                    }
                }
            }
            let phase = product_grid(
                &space,
                &vel,
                positions,
                pw,
                PhaseLayout::Spherical { rs, polar: polar.clone(), azimuth: azimuth.clone() },
            );
            let mut bpos = Vec::new();
            for &th in &polar {
                for &ph in &azimuth {
                    let n = unit_sphere(th, ph);
                    bpos.push(BoundaryPosition {
                        x: radius * n,
                        normal: n,
                        dgamma: radius * radius * th.sin() * dp * da,
                    });
                }
            }
            let layout = BoundaryLayout::Sphere { polar, azimuth };
            let inc =
                TraceGrid::build(space.clone(), Side::Incoming, vel.clone(), bpos.clone(), layout.clone(), cutoff)?;
            let out = TraceGrid::build(space.clone(), Side::Outgoing, vel, bpos, layout, cutoff)?;
            (phase, inc, out)
        }
        (Geometry::PopulationTriangle { l1, l2 }, VelocityModel::Dirac(v)) => {
            need(2)?;
            let (na, nl) = (res[0], res[1]);
            let vel = Arc::new(VelocitySet::new(vec![v], vec![1.0]));
            let fractions = midpoints(0.0, 1.0, na);
            let cycles = midpoints(l1, l2, nl);
            let dl = (l2 - l1) / nl as f64;
            let mut positions = Vec::new();
            let mut pw = Vec::new();
            for &l in &cycles {
                for &f in &fractions {
                    positions.push(Vec3::new(f * l, l, 0.0));
                    pw.push(l / na as f64 * dl);
                }
            }
            let phase = product_grid(
                &space,
                &vel,
                positions,
                pw,
                PhaseLayout::Population { fractions, cycles: cycles.clone() },
            );
            let inflow: Vec<BoundaryPosition> = cycles
                .iter()
                .map(|&l| BoundaryPosition { x: Vec3::new(0.0, l, 0.0), normal: -Vec3::x(), dgamma: dl })
                .collect();
            let diag = Vec3::new(1.0, -1.0, 0.0) / SQRT_2;
            let outflow: Vec<BoundaryPosition> = cycles
                .iter()
                .map(|&l| BoundaryPosition { x: Vec3::new(l, l, 0.0), normal: diag, dgamma: SQRT_2 * dl })
                .collect();
            let layout = BoundaryLayout::Edge { cycles };
            let inc = TraceGrid::build(space.clone(), Side::Incoming, vel.clone(), inflow, layout.clone(), 0.0)?;
            let out = TraceGrid::build(space.clone(), Side::Outgoing, vel, outflow, layout, 0.0)?;
            (phase, inc, out)
        }
        _ => return Err(Error::Unsupported("geometry/velocity combination".into())),
    };
    Ok(Grids {
        space,
        phase: Arc::new(phase),
        incoming: Arc::new(incoming),
        outgoing: Arc::new(outgoing),
        spec: spec.clone(),
    })
}

fn unit_sphere(theta: f64, phi: f64) -> Vec3 {
    Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos())
}

fn product_grid(
    space: &Arc<PhaseSpace>,
    vel: &Arc<VelocitySet>,
    positions: Vec<Vec3>,
    position_weights: Vec<f64>,
    layout: PhaseLayout,
) -> PhaseGrid {
    let mut nodes = Vec::with_capacity(positions.len() * vel.len());
    let mut weights = Vec::with_capacity(positions.len() * vel.len());
    for (p, (x, pw)) in positions.iter().zip(&position_weights).enumerate() {
        for k in 0..vel.len() {
            nodes.push(PhaseNode { x: *x, velocity: k, position: p });
            weights.push(pw * vel.weight(k));
        }
    }
    PhaseGrid { space: space.clone(), velocities: vel.clone(), positions, nodes, weights, layout }
}

/// Weighted `L^p` norm `(sum w |f|^p)^(1/p)`.
pub fn weighted_norm(weights: &[f64], values: &[f64], p: f64) -> f64 {
    assert!(p >= 1.0, "p must be at least 1");
    if p == 1.0 {
        return weights.iter().zip(values).map(|(w, f)| w * f.abs()).sum();
    }
    if p == 2.0 {
        return weights.iter().zip(values).map(|(w, f)| w * f * f).sum::<f64>().sqrt();
    }
    let scale = values.iter().fold(0.0f64, |m, f| m.max(f.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let s: f64 = weights.iter().zip(values).map(|(w, f)| w * (f.abs() / scale).powf(p)).sum();
    scale * s.powf(1.0 / p)
}

/// A function on phase space that can be sampled along characteristics.
pub trait PhaseFunction: Sync {
    fn value(&self, x: &Vec3, v: &Vec3) -> f64;

    /// Value at `(x, v)` where `v` is node `index` of `velocities`.
    fn value_on(&self, x: &Vec3, v: &Vec3, _index: usize, _velocities: &Arc<VelocitySet>) -> f64 {
        self.value(x, v)
    }
}

impl<F> PhaseFunction for F
where
    F: Fn(&Vec3, &Vec3) -> f64 + Sync,
{
    fn value(&self, x: &Vec3, v: &Vec3) -> f64 {
        self(x, v)
    }
}

/// Sampled function on a [`PhaseGrid`].
#[derive(Debug, Clone)]
pub struct DensityField {
    pub grid: Arc<PhaseGrid>,
    pub values: Vec<f64>,
}

impl DensityField {
    pub fn new(grid: Arc<PhaseGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch("field length differs from grid".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("field values must be finite"));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Arc<PhaseGrid>) -> Self {
        let n = grid.len();
        Self { grid, values: vec![0.0; n] }
    }

    pub fn from_fn(grid: Arc<PhaseGrid>, f: &dyn PhaseFunction) -> Self {
        let values = grid.nodes().iter().map(|n| f.value(&n.x, grid.velocities().vector(n.velocity))).collect();
        Self { grid, values }
    }

    pub fn norm_p(&self, p: f64) -> f64 {
        weighted_norm(self.grid.weights(), &self.values, p)
    }

    /// Multilinear in `x`, nearest node in `v`. Errors outside the node hull.
    pub fn interpolate(&self, x: &Vec3, v: &Vec3) -> Result<f64> {
        let k = self.grid.velocities().nearest(v);
        self.interpolate_indexed(x, k, false)
    }

    fn interpolate_indexed(&self, x: &Vec3, velocity: usize, clamp: bool) -> Result<f64> {
        let st = self.grid.stencil(x, clamp)?;
        Ok(st.iter().map(|(p, w)| w * self.values[self.grid.node_index(p, velocity)]).sum())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x0", "x1", "x2", "v0", "v1", "v2", "weight", "value"])?;
        for (i, n) in self.grid.nodes().iter().enumerate() {
            let v = self.grid.velocities().vector(n.velocity);
            w.serialize((n.x.x, n.x.y, n.x.z, v.x, v.y, v.z, self.grid.weights()[i], self.values[i]))?;
        }
        w.flush()?;
        Ok(())
    }
}

impl PhaseFunction for DensityField {
    /// Clamped interpolation, so characteristics ending near the boundary
    /// still read the nearest nodes.
    fn value(&self, x: &Vec3, v: &Vec3) -> f64 {
        let k = self.grid.velocities().nearest(v);
        self.interpolate_indexed(x, k, true).unwrap_or(0.0)
    }

    fn value_on(&self, x: &Vec3, v: &Vec3, index: usize, velocities: &Arc<VelocitySet>) -> f64 {
        if Arc::ptr_eq(velocities, self.grid.velocities()) {
            self.interpolate_indexed(x, index, true).unwrap_or(0.0)
        } else {
            self.value(x, v)
        }
    }
}

/// Sampled function on a [`TraceGrid`].
#[derive(Debug, Clone)]
pub struct TraceField {
    pub grid: Arc<TraceGrid>,
    pub values: Vec<f64>,
}

impl TraceField {
    pub fn new(grid: Arc<TraceGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch("trace length differs from grid".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Arc<TraceGrid>) -> Self {
        let n = grid.len();
        Self { grid, values: vec![0.0; n] }
    }

    pub fn from_fn(grid: Arc<TraceGrid>, f: impl Fn(&Vec3, &Vec3) -> f64) -> Self {
        let values = (0..grid.len()).map(|i| f(grid.x(i), grid.v(i))).collect();
        Self { grid, values }
    }

    pub fn norm_p(&self, p: f64) -> f64 {
        weighted_norm(self.grid.weights(), &self.values, p)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x0", "x1", "x2", "v0", "v1", "v2", "weight", "value"])?;
        for i in 0..self.grid.len() {
            let (x, v) = (self.grid.x(i), self.grid.v(i));
            w.serialize((x.x, x.y, x.z, v.x, v.y, v.z, self.grid.weights()[i], self.values[i]))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn slab_grids(nx: usize, nv: usize) -> Grids {
        let space = Arc::new(PhaseSpace::slab(1.0, 0.0, 1.0).unwrap());
        build_grids(space, &GridSpec::new([nx, nv])).unwrap()
    }

    #[test]
    fn slab_weights() {
        let g = slab_grids(100, 100);
        let total: f64 = g.phase.weights().iter().sum();
        assert!((total - 4.0).abs() < 1e-12);
        let out: f64 = g.outgoing.weights().iter().sum();
        assert!((out - 1.0).abs() < 1e-12);
        let inc: f64 = g.incoming.weights().iter().sum();
        assert!((inc - 1.0).abs() < 1e-12);
        let one = DensityField::from_fn(g.phase.clone(), &|_: &Vec3, _: &Vec3| 1.0);
        assert!((one.norm_p(1.0) - 4.0).abs() < 1e-12);
        let t = TraceField::from_fn(g.outgoing.clone(), |_, _| 1.0);
        assert!((t.norm_p(1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn slab_boundary_split() {
        let g = slab_grids(4, 8);
        for i in 0..g.outgoing.len() {
            let (x, v) = (g.outgoing.x(i), g.outgoing.v(i));
            assert!(x.x * v.x > 0.0);
        }
        for i in 0..g.incoming.len() {
            let (x, v) = (g.incoming.x(i), g.incoming.v(i));
            assert!(x.x * v.x < 0.0);
            assert_eq!(g.incoming.taus()[i], 0.0);
        }
    }

    #[test]
    fn trace_weights_carry_flux() {
        let space = Arc::new(PhaseSpace::ball(2, 1.0, 0.0, 1.0).unwrap());
        let g = build_grids(space, &GridSpec::new([4, 16, 4, 16]).cutoff(0.05)).unwrap();
        for tg in [&g.incoming, &g.outgoing] {
            for (i, n) in tg.nodes().iter().enumerate() {
                let pos = tg.position_of(i);
                let expect = tg.v(i).dot(&pos.normal).abs() * pos.dgamma * tg.velocities().weight(n.velocity);
                assert_eq!(tg.weights()[i], expect);
                assert!(tg.v(i).normalize().dot(&pos.normal).abs() > 0.05);
            }
        }
        let total: f64 = g.phase.weights().iter().sum();
        // |Omega| * mu(V) = pi * pi
        assert!((total - PI * PI).abs() < 1e-12);
    }

    #[test]
    fn population_weights() {
        let space = Arc::new(PhaseSpace::population(0.2, 1.0).unwrap());
        let g = build_grids(space, &GridSpec::new([10, 20])).unwrap();
        let total: f64 = g.phase.weights().iter().sum();
        assert!((total - 0.5 * (1.0 - 0.04)).abs() < 1e-12);
        let out: f64 = g.outgoing.weights().iter().sum();
        assert!((out - 0.8).abs() < 1e-12);
        let tau0 = crate::geometry::regularity_tau0(&g.outgoing).unwrap();
        assert!((tau0 - 0.22).abs() < 1e-12); // first cycle midpoint
    }

    #[test]
    fn rejects_bad_specs() {
        let space = Arc::new(PhaseSpace::slab(1.0, 0.0, 1.0).unwrap());
        assert!(build_grids(space.clone(), &GridSpec::new([1, 10])).is_err());
        assert!(build_grids(space.clone(), &GridSpec::new([10, 10]).cutoff(1.0)).is_err());
        assert!(build_grids(space, &GridSpec::new([10, 9])).is_err());
    }

    #[test]
    fn interpolation_examples() {
        let g = slab_grids(10, 4);
        let f = DensityField::from_fn(g.phase.clone(), &|x: &Vec3, v: &Vec3| 3.0 * x.x + v.x);
        // exact at nodes
        for (i, n) in g.phase.nodes().iter().enumerate() {
            let v = g.phase.velocity(i);
            assert!((f.interpolate(&n.x, v).unwrap() - f.values[i]).abs() < 1e-14);
        }
        // linear in x reproduced between nodes
        let v = *g.phase.velocities().vector(1);
        let y = f.interpolate(&Vec3::new(0.33, 0.0, 0.0), &v).unwrap();
        assert!((y - (0.99 + v.x)).abs() < 1e-13);
        assert!(matches!(f.interpolate(&Vec3::new(0.99, 0.0, 0.0), &v), Err(Error::OutOfHull(_))));

        let space = Arc::new(PhaseSpace::population(0.0, 1.0).unwrap());
        let g = build_grids(space, &GridSpec::new([8, 8])).unwrap();
        let f = DensityField::from_fn(g.phase.clone(), &|x: &Vec3, _: &Vec3| 1.0 + x.x - 2.0 * x.y);
        let p = Vec3::new(0.3, 0.61, 0.0);
        assert!((f.interpolate(&p, &Vec3::x()).unwrap() - (1.0 + 0.3 - 1.22)).abs() < 1e-13);
        let c = DensityField::from_fn(g.phase.clone(), &|_: &Vec3, _: &Vec3| 2.5);
        assert!((c.interpolate(&Vec3::new(0.2, 0.5, 0.0), &Vec3::x()).unwrap() - 2.5).abs() < 1e-14);
    }

    #[test]
    fn midpoint_refinement_order() {
        // || sin(x) cos(xi) ||_2 on the slab, dyadic refinement
        let exact = {
            let a = 1.0 - (2.0f64).sin() / 2.0; // int_{-1}^{1} sin^2
            let b = 1.0 + (2.0f64).sin() / 2.0; // int_{-1}^{1} cos^2
            (a * b).sqrt()
        };
        let errs: Vec<f64> = [8, 16, 32, 64]
            .iter()
            .map(|&n| {
                let g = slab_grids(n, 2 * n);
                let f = DensityField::from_fn(g.phase.clone(), &|x: &Vec3, v: &Vec3| x.x.sin() * v.x.cos());
                (f.norm_p(2.0) - exact).abs()
            })
            .collect();
        for w in errs.windows(2) {
            assert!((w[0] / w[1]).log2() >= 1.9, "{errs:?}");
        }
    }

    proptest! {
        #[test]
        fn holder_and_homogeneity(vals in proptest::collection::vec(-5.0f64..5.0, 40), c in -3.0f64..3.0, p in 1.0f64..4.0) {
            let g = slab_grids(10, 4);
            let f = DensityField::new(g.phase.clone(), vals.clone()).unwrap();
            let one = DensityField::from_fn(g.phase.clone(), &|_: &Vec3, _: &Vec3| 1.0);
            prop_assert!(f.norm_p(1.0) <= f.norm_p(2.0) * one.norm_p(2.0) * (1.0 + 1e-12) + 1e-12);
            let scaled = DensityField::new(g.phase.clone(), vals.iter().map(|v| c * v).collect()).unwrap();
            prop_assert!((scaled.norm_p(p) - c.abs() * f.norm_p(p)).abs() <= 1e-10 * (1.0 + f.norm_p(p)));
        }
    }
}
