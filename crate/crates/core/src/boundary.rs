//! Boundary operators `H : L^p(Gamma_+) -> L^p(Gamma_-)` on trace grids.
//!
//! An operator is stored as a sum of a contractive part `C` (reflections and
//! other sparse maps) and a kernel part `K`. Both are matrices `A` acting by
//! `(A g)_i = sum_j A_ij g_j`; kernel entries already contain the source
//! quadrature weight. Truncation by `chi_eps` is a column mask.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::geometry::{specular, Vec3};
use crate::grid::{weighted_norm, Grids, TraceField, TraceGrid};

/// Largest dense kernel accepted, in entries.
pub const MAX_DENSE_ENTRIES: usize = 20_000_000;

const POWER_TOLERANCE: f64 = 1e-8;
const POWER_CAP: usize = 20_000;

/// Regular reflection maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReflectionMap {
    Specular,
    BounceBack,
    /// Population birth map: the incoming node at cycle length `l` reads the
    /// outgoing node at the same `l`.
    Transfer,
}

/// Space-dependent coefficient on the boundary.
#[derive(Clone)]
pub enum Coefficient {
    Constant(f64),
    Profile(Arc<dyn Fn(&Vec3) -> f64 + Send + Sync>),
}

impl Coefficient {
    pub fn at(&self, x: &Vec3) -> f64 {
        match self {
            Coefficient::Constant(c) => *c,
            Coefficient::Profile(f) => f(x),
        }
    }
}

impl std::fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Coefficient::Constant(c) => write!(f, "Constant({c})"),
            Coefficient::Profile(_) => write!(f, "Profile(..)"),
        }
    }
}

impl From<f64> for Coefficient {
    fn from(c: f64) -> Self {
        Coefficient::Constant(c)
    }
}

/// How the wall Maxwellian is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaxwellNormalization {
    /// `(2 pi theta)^(-N/2) exp(-|v|^2 / 2 theta)` as written.
    #[default]
    Verbatim,
    /// Divided by its discrete half-flux at each boundary position, which
    /// makes the diffuse part stochastic in `L^1`.
    FluxNormalized,
}

/// Wall Maxwellian at temperature `theta` in dimension `dim`.
pub fn wall_maxwellian(v: &Vec3, theta: f64, dim: usize) -> f64 {
    (2.0 * std::f64::consts::PI * theta).powf(-(dim as f64) / 2.0) * (-v.norm_squared() / (2.0 * theta)).exp()
}

/// Discrete `int_{v.n<0} |v.n| M(v) dv` of the wall Maxwellian at each
/// boundary position of `grid`.
pub fn half_flux(grid: &TraceGrid, theta: f64) -> Vec<f64> {
    let dim = grid.space().dim();
    let mut flux = vec![0.0; grid.positions().len()];
    for (i, n) in grid.nodes().iter().enumerate() {
        flux[n.position] +=
            grid.weights()[i] / grid.positions()[n.position].dgamma * wall_maxwellian(grid.v(i), theta, dim);
    }
    flux
}

/// Targets, sources and row-major entries of one position's kernel block.
pub(crate) type KernelBlock = (Vec<usize>, Vec<usize>, Vec<f64>);

/// Descriptive tag of an operator.
#[derive(Debug, Clone, PartialEq)]
pub enum OperatorKind {
    Zero,
    Reflection(ReflectionMap),
    ScaledReflection(ReflectionMap),
    DiffuseKernel,
    MaxwellMix,
    NonlocalKernel,
    Sum,
}

#[derive(Debug, Clone)]
struct RankOne {
    rows: Vec<usize>,
    u: Vec<f64>,
    cols: Vec<usize>,
    w: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Dense {
    rows: Vec<usize>,
    cols: Vec<usize>,
    /// Row-major `rows.len() x cols.len()`.
    data: Vec<f64>,
}

/// Sum of sparse, rank-one and dense blocks.
#[derive(Debug, Clone, Default)]
struct Matrix {
    sparse: Vec<(usize, usize, f64)>,
    rank_one: Vec<RankOne>,
    dense: Vec<Dense>,
}

impl Matrix {
    fn is_empty(&self) -> bool {
        self.sparse.is_empty() && self.rank_one.is_empty() && self.dense.is_empty()
    }

    fn extend(&mut self, other: &Matrix) {
        self.sparse.extend_from_slice(&other.sparse);
        self.rank_one.extend(other.rank_one.iter().cloned());
        self.dense.extend(other.dense.iter().cloned());
    }

    fn nonnegative(&self) -> bool {
        self.sparse.iter().all(|e| e.2 >= 0.0)
            && self.rank_one.iter().all(|b| {
                let su = b.u.iter().all(|&x| x >= 0.0);
                let sw = b.w.iter().all(|&x| x >= 0.0);
                (su && sw) || (b.u.iter().all(|&x| x <= 0.0) && b.w.iter().all(|&x| x <= 0.0))
            })
            && self.dense.iter().all(|b| b.data.iter().all(|&x| x >= 0.0))
    }

    fn min_entry(&self) -> f64 {
        let mut m = f64::INFINITY;
        for e in &self.sparse {
            m = m.min(e.2);
        }
        for b in &self.rank_one {
            for &u in &b.u {
                for &w in &b.w {
                    m = m.min(u * w);
                }
            }
        }
        for b in &self.dense {
            m = b.data.iter().fold(m, |a, &x| a.min(x));
        }
        m
    }

    fn apply(&self, g: &[f64], out: &mut [f64]) {
        for &(i, j, a) in &self.sparse {
            out[i] += a * g[j];
        }
        for b in &self.rank_one {
            let s: f64 = b.cols.iter().zip(&b.w).map(|(&j, w)| w * g[j]).sum();
            if s != 0.0 {
                for (&i, u) in b.rows.iter().zip(&b.u) {
                    out[i] += u * s;
                }
            }
        }
        for b in &self.dense {
            let n = b.cols.len();
            for (r, &i) in b.rows.iter().enumerate() {
                let row = &b.data[r * n..(r + 1) * n];
                out[i] += row.iter().zip(&b.cols).map(|(a, &j)| a * g[j]).sum::<f64>();
            }
        }
    }

    fn apply_transpose(&self, h: &[f64], out: &mut [f64]) {
        for &(i, j, a) in &self.sparse {
            out[j] += a * h[i];
        }
        for b in &self.rank_one {
            let s: f64 = b.rows.iter().zip(&b.u).map(|(&i, u)| u * h[i]).sum();
            if s != 0.0 {
                for (&j, w) in b.cols.iter().zip(&b.w) {
                    out[j] += w * s;
                }
            }
        }
        for b in &self.dense {
            let n = b.cols.len();
            for (r, &i) in b.rows.iter().enumerate() {
                if h[i] == 0.0 {
                    continue;
                }
                for (a, &j) in b.data[r * n..(r + 1) * n].iter().zip(&b.cols) {
                    out[j] += a * h[i];
                }
            }
        }
    }

    /// `sum_i w_i |A_ij|` per block, summed; equals the column norm of the
    /// total matrix when every entry is nonnegative.
    fn weighted_abs_column_sums(&self, w_in: &[f64], out: &mut [f64]) {
        for &(i, j, a) in &self.sparse {
            out[j] += w_in[i] * a.abs();
        }
        for b in &self.rank_one {
            let s: f64 = b.rows.iter().zip(&b.u).map(|(&i, u)| w_in[i] * u.abs()).sum();
            for (&j, w) in b.cols.iter().zip(&b.w) {
                out[j] += s * w.abs();
            }
        }
        for b in &self.dense {
            let n = b.cols.len();
            for (r, &i) in b.rows.iter().enumerate() {
                for (a, &j) in b.data[r * n..(r + 1) * n].iter().zip(&b.cols) {
                    out[j] += w_in[i] * a.abs();
                }
            }
        }
    }
}

/// Characteristic function of `{tau <= eps}` on the outgoing grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncationMask {
    pub epsilon: f64,
    pub mask: Vec<bool>,
}

impl TruncationMask {
    pub fn new(outgoing: &TraceGrid, epsilon: f64) -> Self {
        let mask = outgoing.taus().iter().map(|&t| t <= epsilon).collect();
        Self { epsilon, mask }
    }
}

/// How an operator norm was obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormMethod {
    ExactColumnSum,
    PowerIteration {
        iterations: usize,
    },
    /// Maximum ratio over sampled inputs; a lower bound on the true norm.
    SampledLowerBound {
        samples: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormEstimate {
    pub value: f64,
    pub method: NormMethod,
}

impl NormEstimate {
    pub fn is_lower_bound(&self) -> bool {
        matches!(self.method, NormMethod::SampledLowerBound { .. })
    }
}

/// A bounded linear map from outgoing to incoming traces.
#[derive(Debug, Clone)]
pub struct BoundaryOperator {
    incoming: Arc<TraceGrid>,
    outgoing: Arc<TraceGrid>,
    kind: OperatorKind,
    contraction: Matrix,
    kernel: Matrix,
    /// True when every kernel block couples nodes at one boundary position.
    local_kernel: bool,
    mask: Option<TruncationMask>,
    /// Set while the operator is exactly one scaled regular reflection.
    reflection: Option<(ReflectionMap, Coefficient)>,
}

impl BoundaryOperator {
    fn empty(grids: &Grids, kind: OperatorKind) -> Self {
        Self {
            incoming: grids.incoming.clone(),
            outgoing: grids.outgoing.clone(),
            kind,
            contraction: Matrix::default(),
            kernel: Matrix::default(),
            local_kernel: true,
            mask: None,
            reflection: None,
        }
    }

    pub fn zero(grids: &Grids) -> Self {
        Self::empty(grids, OperatorKind::Zero)
    }

    /// `alpha(x) * psi(x, V(x, v))` for a regular reflection `V`.
    pub fn reflection(grids: &Grids, map: ReflectionMap, alpha: impl Into<Coefficient>) -> Result<Self> {
        let alpha = alpha.into();
        let kind = match &alpha {
            Coefficient::Constant(a) if *a == 1.0 => OperatorKind::Reflection(map),
            _ => OperatorKind::ScaledReflection(map),
        };
        let mut op = Self::empty(grids, kind);
        op.reflection = Some((map, alpha.clone()));
        let (inc, out) = (&op.incoming, &op.outgoing);
        let vel = inc.velocities();
        for i in 0..inc.len() {
            let node = inc.nodes()[i];
            let pos = &inc.positions()[node.position];
            let v = vel.vector(node.velocity);
            let k = match map {
                ReflectionMap::Specular => vel.locate(&specular(v, &pos.normal)),
                ReflectionMap::BounceBack => vel.locate(&-v),
                ReflectionMap::Transfer => Some(node.velocity),
            };
            let j = k.and_then(|k| out.node_at(node.position, k)).ok_or_else(|| {
                Error::NotReflectionClosed(format!(
                    "no image for velocity {:?} at {:?}",
                    v.as_slice(),
                    pos.x.as_slice()
                ))
            })?;
            let a = alpha.at(&pos.x);
            if !a.is_finite() {
                return Err(invalid("reflection coefficient must be finite"));
            }
            if a != 0.0 {
                op.contraction.sparse.push((i, j, a));
            }
        }
        Ok(op)
    }

    pub fn specular(grids: &Grids, alpha: impl Into<Coefficient>) -> Result<Self> {
        Self::reflection(grids, ReflectionMap::Specular, alpha)
    }

    pub fn bounce_back(grids: &Grids, alpha: impl Into<Coefficient>) -> Result<Self> {
        Self::reflection(grids, ReflectionMap::BounceBack, alpha)
    }

    /// Local kernel `int h(x, v, v') psi(x, v') |v' . n(x)| dv'`.
    pub fn diffuse(grids: &Grids, h: impl Fn(&Vec3, &Vec3, &Vec3) -> f64) -> Result<Self> {
        let mut op = Self::empty(grids, OperatorKind::DiffuseKernel);
        let (inc, out) = (op.incoming.clone(), op.outgoing.clone());
        for p in 0..inc.positions().len() {
            let (rows, cols) = position_nodes(&inc, &out, p);
            if rows.is_empty() || cols.is_empty() {
                continue;
            }
            let x = inc.positions()[p].x;
            let mut data = Vec::with_capacity(rows.len() * cols.len());
            for &i in &rows {
                for &j in &cols {
                    let hij = h(&x, inc.v(i), out.v(j));
                    if !hij.is_finite() {
                        return Err(invalid("kernel values must be finite"));
                    }
                    data.push(hij * source_weight(&out, j));
                }
            }
            op.kernel.dense.push(Dense { rows, cols, data });
        }
        Ok(op)
    }

    /// Separable local kernel `h = beta(x) a(v) b(v')`, stored in rank-one form.
    pub fn diffuse_separable(
        grids: &Grids,
        beta: impl Into<Coefficient>,
        a: impl Fn(&Vec3) -> f64,
        b: impl Fn(&Vec3) -> f64,
    ) -> Result<Self> {
        let beta = beta.into();
        Self::separable_by_position(grids, |_, x| beta.at(x), a, b)
    }

    fn separable_by_position(
        grids: &Grids,
        beta: impl Fn(usize, &Vec3) -> f64,
        a: impl Fn(&Vec3) -> f64,
        b: impl Fn(&Vec3) -> f64,
    ) -> Result<Self> {
        let mut op = Self::empty(grids, OperatorKind::DiffuseKernel);
        let (inc, out) = (op.incoming.clone(), op.outgoing.clone());
        for p in 0..inc.positions().len() {
            let (rows, cols) = position_nodes(&inc, &out, p);
            if rows.is_empty() || cols.is_empty() {
                continue;
            }
            let bx = beta(p, &inc.positions()[p].x);
            let u: Vec<f64> = rows.iter().map(|&i| bx * a(inc.v(i))).collect();
            let w: Vec<f64> = cols.iter().map(|&j| b(out.v(j)) * source_weight(&out, j)).collect();
            if u.iter().chain(&w).any(|x| !x.is_finite()) {
                return Err(invalid("kernel values must be finite"));
            }
            op.kernel.rank_one.push(RankOne { rows, u, cols, w });
        }
        Ok(op)
    }

    /// Maxwell model: `alpha R_specular + (1 - alpha) M(v) int psi |v'.n| dv'`.
    pub fn maxwell(
        grids: &Grids,
        alpha: impl Into<Coefficient>,
        theta: f64,
        normalization: MaxwellNormalization,
    ) -> Result<Self> {
        if !(theta > 0.0) {
            return Err(invalid("wall temperature must be positive"));
        }
        let alpha = alpha.into();
        let dim = grids.space.dim();
        let reflect = Self::specular(grids, alpha.clone())?;
        let inc = grids.incoming.clone();
        let flux = match normalization {
            MaxwellNormalization::FluxNormalized => half_flux(&inc, theta),
            MaxwellNormalization::Verbatim => vec![1.0; inc.positions().len()],
        };
        let diffuse = Self::separable_by_position(
            grids,
            |p, x| (1.0 - alpha.at(x)) / flux[p],
            |v| wall_maxwellian(v, theta, dim),
            |_| 1.0,
        )?;
        let mut op = reflect.plus(&diffuse)?;
        op.kind = OperatorKind::MaxwellMix;
        Ok(op)
    }

    /// Non-local kernel `int_{Gamma_+} kappa(x, v, y, v') psi(y, v') dsigma_+`.
    pub fn nonlocal(grids: &Grids, kappa: impl Fn(&Vec3, &Vec3, &Vec3, &Vec3) -> f64) -> Result<Self> {
        let mut op = Self::empty(grids, OperatorKind::NonlocalKernel);
        let (inc, out) = (op.incoming.clone(), op.outgoing.clone());
        if inc.len().saturating_mul(out.len()) > MAX_DENSE_ENTRIES {
            return Err(invalid(format!("non-local kernel would need {} x {} dense entries", inc.len(), out.len())));
        }
        let mut data = Vec::with_capacity(inc.len() * out.len());
        for i in 0..inc.len() {
            for j in 0..out.len() {
                let k = kappa(inc.x(i), inc.v(i), out.x(j), out.v(j));
                if !k.is_finite() {
                    return Err(invalid("kernel values must be finite"));
                }
                data.push(k * out.weights()[j]);
            }
        }
        op.kernel.dense.push(Dense { rows: (0..inc.len()).collect(), cols: (0..out.len()).collect(), data });
        op.local_kernel = false;
        Ok(op)
    }

    /// Cell-population birth law `int k(l, l') psi(l') dl' + c psi(l)`.
    pub fn lebowitz_rubinow(grids: &Grids, k: impl Fn(f64, f64) -> f64, c: f64) -> Result<Self> {
        if !matches!(grids.space.geometry(), crate::geometry::Geometry::PopulationTriangle { .. }) {
            return Err(Error::Unsupported("the birth law needs the population geometry".into()));
        }
        let kernel = Self::nonlocal(grids, |x, _, y, _| k(x.y, y.y))?;
        let transfer = Self::reflection(grids, ReflectionMap::Transfer, c)?;
        let mut op = kernel.plus(&transfer)?;
        op.kind = OperatorKind::NonlocalKernel;
        Ok(op)
    }

    /// Sum of two operators on the same grids.
    pub fn plus(&self, other: &Self) -> Result<Self> {
        if !Arc::ptr_eq(&self.incoming, &other.incoming) || !Arc::ptr_eq(&self.outgoing, &other.outgoing) {
            return Err(Error::GridMismatch("operands live on different trace grids".into()));
        }
        if self.mask.is_some() || other.mask.is_some() {
            return Err(Error::Precondition("add operators before truncating them".into()));
        }
        let mut op = self.clone();
        op.contraction.extend(&other.contraction);
        op.kernel.extend(&other.kernel);
        op.local_kernel = self.local_kernel && other.local_kernel;
        op.reflection = match (&self.kind, &other.kind) {
            (OperatorKind::Zero, _) => other.reflection.clone(),
            (_, OperatorKind::Zero) => self.reflection.clone(),
            _ => None,
        };
        op.kind = match (&self.kind, &other.kind) {
            (OperatorKind::Zero, k) | (k, OperatorKind::Zero) => k.clone(),
            _ => OperatorKind::Sum,
        };
        Ok(op)
    }

    /// `H` multiplied by a scalar.
    pub fn scaled(&self, s: f64) -> Self {
        let mut op = self.clone();
        for m in [&mut op.contraction, &mut op.kernel] {
            m.sparse.iter_mut().for_each(|e| e.2 *= s);
            m.rank_one.iter_mut().for_each(|b| b.u.iter_mut().for_each(|u| *u *= s));
            m.dense.iter_mut().for_each(|b| b.data.iter_mut().for_each(|a| *a *= s));
        }
        op.reflection = self.reflection.as_ref().map(|(map, c)| {
            let c = match c {
                Coefficient::Constant(a) => Coefficient::Constant(a * s),
                Coefficient::Profile(f) => {
                    let f = f.clone();
                    Coefficient::Profile(Arc::new(move |x: &Vec3| s * f(x)))
                }
            };
            (*map, c)
        });
        op
    }

    /// `H D` for the diagonal `D = diag(factors)` on outgoing nodes.
    pub fn scale_columns(&self, factors: &[f64]) -> Result<Self> {
        if factors.len() != self.outgoing.len() {
            return Err(Error::GridMismatch("one factor per outgoing node expected".into()));
        }
        let mut op = self.clone();
        for m in [&mut op.contraction, &mut op.kernel] {
            m.sparse.iter_mut().for_each(|e| e.2 *= factors[e.1]);
            for b in &mut m.rank_one {
                b.w.iter_mut().zip(&b.cols).for_each(|(w, &j)| *w *= factors[j]);
            }
            for b in &mut m.dense {
                let n = b.cols.len();
                b.data.iter_mut().enumerate().for_each(|(k, a)| *a *= factors[b.cols[k % n]]);
            }
        }
        op.reflection = None;
        Ok(op)
    }

    /// The map and coefficient when the operator is a single scaled regular
    /// reflection without truncation.
    pub fn as_reflection(&self) -> Option<(ReflectionMap, &Coefficient)> {
        match (&self.reflection, &self.mask) {
            (Some((m, c)), None) => Some((*m, c)),
            _ => None,
        }
    }

    /// `H chi_eps`: the input is zeroed where `tau > eps`.
    pub fn truncate(&self, eps: f64) -> Self {
        let mut m = TruncationMask::new(&self.outgoing, eps);
        if let Some(old) = &self.mask {
            m.mask.iter_mut().zip(&old.mask).for_each(|(a, b)| *a &= *b);
            m.epsilon = m.epsilon.min(old.epsilon);
        }
        let mut op = self.clone();
        op.mask = Some(m);
        op
    }

    pub fn kind(&self) -> &OperatorKind {
        &self.kind
    }

    pub fn incoming(&self) -> &Arc<TraceGrid> {
        &self.incoming
    }

    pub fn outgoing(&self) -> &Arc<TraceGrid> {
        &self.outgoing
    }

    pub fn mask(&self) -> Option<&TruncationMask> {
        self.mask.as_ref()
    }

    pub fn has_kernel(&self) -> bool {
        !self.kernel.is_empty()
    }

    pub fn is_local(&self) -> bool {
        self.local_kernel
    }

    /// The contractive part `C` alone.
    pub fn contraction_part(&self) -> Self {
        let mut op = self.clone();
        op.kernel = Matrix::default();
        op.local_kernel = true;
        op
    }

    /// The kernel part `K` alone.
    pub fn kernel_part(&self) -> Self {
        let mut op = self.clone();
        op.contraction = Matrix::default();
        op.reflection = None;
        op
    }

    pub fn min_entry(&self) -> f64 {
        self.contraction.min_entry().min(self.kernel.min_entry())
    }

    pub fn apply(&self, g: &TraceField) -> Result<TraceField> {
        if !Arc::ptr_eq(&g.grid, &self.outgoing) {
            return Err(Error::GridMismatch("trace does not live on the operator's outgoing grid".into()));
        }
        let mut out = vec![0.0; self.incoming.len()];
        self.apply_into(&g.values, &mut out);
        TraceField::new(self.incoming.clone(), out)
    }

    /// `out = H g` on raw node vectors.
    pub fn apply_into(&self, g: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let masked;
        let g = match &self.mask {
            Some(m) => {
                masked = g.iter().zip(&m.mask).map(|(x, &k)| if k { *x } else { 0.0 }).collect::<Vec<_>>();
                &masked[..]
            }
            None => g,
        };
        self.contraction.apply(g, out);
        self.kernel.apply(g, out);
    }

    /// `out = H^T h` (plain transpose, no weights).
    pub fn apply_transpose_into(&self, h: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        self.contraction.apply_transpose(h, out);
        self.kernel.apply_transpose(h, out);
        if let Some(m) = &self.mask {
            out.iter_mut().zip(&m.mask).for_each(|(o, &k)| {
                if !k {
                    *o = 0.0
                }
            });
        }
    }

    /// Exact `L^1` column norms `sum_i w^-_i |A_ij| / w^+_j`, masked.
    pub fn l1_column_norms(&self) -> Vec<f64> {
        let (w_in, w_out) = (self.incoming.weights(), self.outgoing.weights());
        let mut cols = vec![0.0; self.outgoing.len()];
        if self.contraction.nonnegative() && self.kernel.nonnegative() {
            self.contraction.weighted_abs_column_sums(w_in, &mut cols);
            self.kernel.weighted_abs_column_sums(w_in, &mut cols);
        } else {
            // mixed signs: assemble each column explicitly
            let mut e = vec![0.0; self.outgoing.len()];
            let mut col = vec![0.0; self.incoming.len()];
            let unmasked = Self { mask: None, ..self.clone() };
            for j in 0..cols.len() {
                e[j] = 1.0;
                unmasked.apply_into(&e, &mut col);
                cols[j] = col.iter().zip(w_in).map(|(a, w)| w * a.abs()).sum();
                e[j] = 0.0;
            }
        }
        for (j, c) in cols.iter_mut().enumerate() {
            *c /= w_out[j];
            if let Some(m) = &self.mask {
                if !m.mask[j] {
                    *c = 0.0;
                }
            }
        }
        cols
    }

    /// Operator norm on `L^p`: exact for `p = 1`, power iteration for
    /// `p = 2`, and a sampled lower bound otherwise.
    pub fn operator_norm(&self, p: f64) -> Result<NormEstimate> {
        if !(p >= 1.0) || !p.is_finite() {
            return Err(invalid("p must lie in [1, inf)"));
        }
        if p == 1.0 {
            let value = self.l1_column_norms().into_iter().fold(0.0, f64::max);
            return Ok(NormEstimate { value, method: NormMethod::ExactColumnSum });
        }
        if p == 2.0 {
            return self.l2_norm();
        }
        Ok(self.sampled_norm(p, 0, 256))
    }

    fn l2_norm(&self) -> Result<NormEstimate> {
        let (w_in, w_out) = (self.incoming.weights(), self.outgoing.weights());
        let s_in: Vec<f64> = w_in.iter().map(|w| w.sqrt()).collect();
        let s_out: Vec<f64> = w_out.iter().map(|w| 1.0 / w.sqrt()).collect();
        let n = self.outgoing.len();
        // B = S_in A S_out^{-1}; iterate x <- B^T B x
        let mut x: Vec<f64> = (0..n).map(|j| 1.0 + 0.1 * ((j as f64) * 0.618_033_988_7).fract()).collect();
        if let Some(m) = &self.mask {
            x.iter_mut().zip(&m.mask).for_each(|(v, &k)| {
                if !k {
                    *v = 0.0
                }
            });
        }
        let mut tmp_in = vec![0.0; self.incoming.len()];
        let mut tmp_out = vec![0.0; n];
        let mut scaled = vec![0.0; n];
        let mut sigma = 0.0;
        let mut change = f64::INFINITY;
        for it in 1..=POWER_CAP {
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Ok(NormEstimate { value: 0.0, method: NormMethod::PowerIteration { iterations: it } });
            }
            x.iter_mut().for_each(|v| *v /= norm);
            scaled.iter_mut().zip(&x).zip(&s_out).for_each(|((s, v), c)| *s = v * c);
            self.apply_into(&scaled, &mut tmp_in);
            tmp_in.iter_mut().zip(&s_in).for_each(|(y, c)| *y *= c);
            let bx = tmp_in.iter().map(|v| v * v).sum::<f64>().sqrt();
            if bx == 0.0 {
                return Ok(NormEstimate { value: 0.0, method: NormMethod::PowerIteration { iterations: it } });
            }
            tmp_in.iter_mut().zip(&s_in).for_each(|(y, c)| *y *= c);
            self.apply_transpose_into(&tmp_in, &mut tmp_out);
            x.iter_mut().zip(&tmp_out).zip(&s_out).for_each(|((v, t), c)| *v = t * c);
            change = (bx - sigma).abs() / bx;
            sigma = bx;
            if change <= POWER_TOLERANCE && it > 2 {
                return Ok(NormEstimate { value: sigma, method: NormMethod::PowerIteration { iterations: it } });
            }
        }
        Err(Error::NoConvergence { iterations: POWER_CAP, change })
    }

    /// Maximum of `||H g||_p / ||g||_p` over seeded random inputs.
    pub fn sampled_norm(&self, p: f64, seed: u64, samples: usize) -> NormEstimate {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w_in, w_out) = (self.incoming.weights(), self.outgoing.weights());
        let n = self.outgoing.len();
        let mut out = vec![0.0; self.incoming.len()];
        let mut best = 0.0f64;
        let mut ratio = |g: &[f64], best: &mut f64| {
            let d = weighted_norm(w_out, g, p);
            if d > 0.0 {
                self.apply_into(g, &mut out);
                *best = best.max(weighted_norm(w_in, &out, p) / d);
            }
        };
        let mut g = vec![1.0; n];
        ratio(&g, &mut best);
        for s in 0..samples {
            for x in g.iter_mut() {
                *x = if s % 2 == 0 { rng.gen::<f64>() } else { rng.gen_range(-1.0..1.0) };
            }
            ratio(&g, &mut best);
        }
        if n <= 4096 {
            let mut e = vec![0.0; n];
            for j in 0..n {
                e[j] = 1.0;
                ratio(&e, &mut best);
                e[j] = 0.0;
            }
        }
        NormEstimate { value: best, method: NormMethod::SampledLowerBound { samples: samples + 1 } }
    }

    /// Kernel values `h(x_i, v_i, v'_j)` recovered from a local kernel part,
    /// grouped by boundary position: `(rows, cols, h)`.
    pub(crate) fn local_kernel_blocks(&self) -> Result<Vec<KernelBlock>> {
        if !self.local_kernel {
            return Err(Error::Precondition("kernel is not local in x".into()));
        }
        let out = &self.outgoing;
        let mut blocks = Vec::new();
        for b in &self.kernel.rank_one {
            let mut h = Vec::with_capacity(b.rows.len() * b.cols.len());
            for u in &b.u {
                for (&j, w) in b.cols.iter().zip(&b.w) {
                    h.push(u * w / source_weight(out, j));
                }
            }
            blocks.push((b.rows.clone(), b.cols.clone(), h));
        }
        for b in &self.kernel.dense {
            let n = b.cols.len();
            let h = b.data.iter().enumerate().map(|(k, a)| a / source_weight(out, b.cols[k % n])).collect();
            blocks.push((b.rows.clone(), b.cols.clone(), h));
        }
        Ok(blocks)
    }
}

/// `|v' . n(x)| dmu(v')` for an outgoing node: its trace weight without `dgamma`.
fn source_weight(out: &TraceGrid, j: usize) -> f64 {
    out.weights()[j] / out.position_of(j).dgamma
}

fn position_nodes(inc: &TraceGrid, out: &TraceGrid, p: usize) -> (Vec<usize>, Vec<usize>) {
    let nv = inc.velocities().len();
    let rows = (0..nv).filter_map(|k| inc.node_at(p, k)).collect();
    let cols = (0..nv).filter_map(|k| out.node_at(p, k)).collect();
    (rows, cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PhaseSpace;
    use crate::grid::{build_grids, GridSpec, QuadratureRule};
    use proptest::prelude::*;

    fn slab(nv: usize, vmax: f64) -> Grids {
        let space = Arc::new(PhaseSpace::slab(1.0, 0.0, vmax).unwrap());
        build_grids(space, &GridSpec::new([4, nv])).unwrap()
    }

    fn disc() -> Grids {
        let space = Arc::new(PhaseSpace::ball(2, 1.0, 0.0, 1.0).unwrap());
        build_grids(space, &GridSpec::new([4, 16, 4, 32]).cutoff(0.02)).unwrap()
    }

    #[test]
    fn specular_preserves_speed() {
        let g = disc();
        let h = BoundaryOperator::specular(&g, 1.0).unwrap();
        let t = TraceField::from_fn(g.outgoing.clone(), |_, v| v.norm_squared());
        let r = h.apply(&t).unwrap();
        for i in 0..r.values.len() {
            assert!((r.values[i] - g.incoming.v(i).norm_squared()).abs() < 1e-12);
        }
        for p in [1.0, 2.0, 3.0] {
            assert!((h.operator_norm(p).unwrap().value - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn bounce_back_scaled() {
        let g = disc();
        let h = BoundaryOperator::bounce_back(&g, 2.0).unwrap();
        let r = h.apply(&TraceField::from_fn(g.outgoing.clone(), |_, _| 1.0)).unwrap();
        assert!(r.values.iter().all(|&x| x == 2.0));
        assert!((h.operator_norm(1.0).unwrap().value - 2.0).abs() < 1e-12);
        assert!((h.operator_norm(2.0).unwrap().value - 2.0).abs() < 1e-10);
    }

    #[test]
    fn specular_unsupported_in_three_dimensions() {
        let space = Arc::new(PhaseSpace::ball(3, 1.0, 0.0, 1.0).unwrap());
        let g = build_grids(space, &GridSpec::new([2, 4, 6, 2, 4, 6]).cutoff(0.05)).unwrap();
        assert!(matches!(BoundaryOperator::specular(&g, 1.0), Err(Error::NotReflectionClosed(_))));
        assert!(BoundaryOperator::bounce_back(&g, 1.0).is_ok());
    }

    #[test]
    fn half_flux_of_wall_maxwellian() {
        // int_{u<0} |u| (2 pi)^{-1/2} exp(-u^2/2) du = 1/sqrt(2 pi), band truncated at 10
        let space = Arc::new(PhaseSpace::slab(1.0, 0.0, 10.0).unwrap());
        let g = build_grids(space, &GridSpec::new([2, 4000]).cutoff(0.0)).unwrap();
        let h = BoundaryOperator::diffuse(&g, |_, v, _| wall_maxwellian(v, 1.0, 1)).unwrap();
        let n = h.operator_norm(1.0).unwrap().value;
        assert!((n - 0.398942).abs() < 1e-6, "{n}");
        assert!(half_flux(&g.incoming, 1.0).iter().all(|f| (f - n).abs() < 1e-12));
        let sep = BoundaryOperator::diffuse_separable(&g, 1.0, |v| wall_maxwellian(v, 1.0, 1), |_| 1.0).unwrap();
        assert!((sep.operator_norm(1.0).unwrap().value - n).abs() < 1e-12);
    }

    #[test]
    fn maxwell_normalized_is_stochastic() {
        let g = slab(200, 4.0);
        let h = BoundaryOperator::maxwell(&g, 0.3, 1.0, MaxwellNormalization::FluxNormalized).unwrap();
        for c in h.l1_column_norms() {
            assert!((c - 1.0).abs() < 1e-12);
        }
        let t = TraceField::from_fn(g.outgoing.clone(), |x, v| 1.0 + x.x + v.x.abs());
        assert!((h.apply(&t).unwrap().norm_p(1.0) - t.norm_p(1.0)).abs() < 1e-12);
    }

    #[test]
    fn birth_law_examples() {
        let space = Arc::new(PhaseSpace::population(0.0, 1.0).unwrap());
        let g = build_grids(space, &GridSpec::new([4, 50])).unwrap();
        let h = BoundaryOperator::lebowitz_rubinow(&g, |_, _| 0.0, 0.5).unwrap();
        let r = h.apply(&TraceField::from_fn(g.outgoing.clone(), |_, _| 1.0)).unwrap();
        assert!(r.values.iter().all(|&x| (x - 0.5).abs() < 1e-15));
        let mitosis = BoundaryOperator::lebowitz_rubinow(&g, |_, lp| 4.0 * lp, 0.0).unwrap();
        let u = TraceField::from_fn(g.outgoing.clone(), |_, _| 1.0);
        let hu = mitosis.apply(&u).unwrap();
        assert!((hu.norm_p(1.0) - 2.0 * u.norm_p(1.0)).abs() < 1e-12);
        for (c, l) in mitosis.l1_column_norms().iter().zip(g.outgoing.taus()) {
            assert!((c - 4.0 * l).abs() < 1e-12);
        }
    }

    #[test]
    fn truncation_examples() {
        let g = slab(20, 1.0);
        let h = BoundaryOperator::bounce_back(&g, 2.0).unwrap();
        let t = h.truncate(1.99);
        assert_eq!(t.operator_norm(1.0).unwrap().value, 0.0);
        let full = h.truncate(1e6);
        let data = TraceField::from_fn(g.outgoing.clone(), |x, v| x.x + 3.0 * v.x);
        assert_eq!(full.apply(&data).unwrap().values, h.apply(&data).unwrap().values);
        let tt = h.truncate(5.0).truncate(5.0);
        assert_eq!(tt.apply(&data).unwrap().values, h.truncate(5.0).apply(&data).unwrap().values);
    }

    #[test]
    fn zero_and_mismatch() {
        let g = slab(8, 1.0);
        let z = BoundaryOperator::zero(&g);
        let t = TraceField::from_fn(g.outgoing.clone(), |_, _| 1.0);
        assert!(z.apply(&t).unwrap().values.iter().all(|&x| x == 0.0));
        assert_eq!(z.operator_norm(2.0).unwrap().value, 0.0);
        let wrong = TraceField::from_fn(g.incoming.clone(), |_, _| 1.0);
        assert!(matches!(z.apply(&wrong), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn mixed_sign_columns_are_exact() {
        let g = slab(8, 1.0);
        let a = BoundaryOperator::bounce_back(&g, 1.0).unwrap();
        let b = BoundaryOperator::bounce_back(&g, -1.0).unwrap();
        assert_eq!(a.plus(&b).unwrap().operator_norm(1.0).unwrap().value, 0.0);
    }

    proptest! {
        #[test]
        fn conservation_and_positivity(seed in 0u64..1000, p in 1.0f64..4.0) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = build_grids(
                Arc::new(PhaseSpace::slab(1.0, 0.0, 1.0).unwrap()),
                &GridSpec::new([4, 16]).rule(QuadratureRule::Trapezoid),
            ).unwrap();
            let vals: Vec<f64> = (0..g.outgoing.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t = TraceField::new(g.outgoing.clone(), vals).unwrap();
            for op in [BoundaryOperator::specular(&g, 1.0).unwrap(), BoundaryOperator::bounce_back(&g, 1.0).unwrap()] {
                prop_assert!((op.apply(&t).unwrap().norm_p(p) - t.norm_p(p)).abs() < 1e-12);
            }
            let d = disc();
            let vals: Vec<f64> = (0..d.outgoing.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
            let t = TraceField::new(d.outgoing.clone(), vals).unwrap();
            let spec = BoundaryOperator::specular(&d, 1.0).unwrap();
            prop_assert!((spec.apply(&t).unwrap().norm_p(p) - t.norm_p(p)).abs() < 1e-12);
            let m = BoundaryOperator::maxwell(&d, 0.4, 1.0, MaxwellNormalization::Verbatim).unwrap();
            prop_assert!(m.apply(&t).unwrap().values.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn monotone_truncation(e1 in 0.0f64..20.0, e2 in 0.0f64..20.0) {
            let d = disc();
            let h = BoundaryOperator::maxwell(&d, Coefficient::Profile(Arc::new(|x: &Vec3| 0.5 + 0.3 * x.x)), 1.0, MaxwellNormalization::Verbatim).unwrap();
            let (lo, hi) = (e1.min(e2), e1.max(e2));
            let a = h.truncate(lo).operator_norm(1.0).unwrap().value;
            let b = h.truncate(hi).operator_norm(1.0).unwrap().value;
            prop_assert!(a <= b + 1e-15);
            prop_assert!(b <= h.operator_norm(1.0).unwrap().value + 1e-15);
            let ma = TruncationMask::new(&d.outgoing, lo);
            let mb = TruncationMask::new(&d.outgoing, hi);
            prop_assert!(ma.mask.iter().zip(&mb.mask).all(|(x, y)| !x || *y));
        }
    }
}
