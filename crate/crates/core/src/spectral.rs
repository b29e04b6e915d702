//! Numerical probes of two negative results: the unbounded growth bound of
//! bounce-back with `alpha > 1`, and the failure of closedness of the
//! free-streaming operator when traces are not integrable.

use std::sync::Arc;

use rayon::prelude::*;

use crate::boundary::BoundaryOperator;
use crate::error::{invalid, Error, Result};
use crate::geometry::{Geometry, PhaseSpace, Vec3};
use crate::grid::{build_grids, DensityField, GridSpec, Grids, PhaseGrid, PhaseNode, VelocitySet};
use crate::quadrature::GaussLegendre;
use crate::semigroup::{growth_rate, Engine, SemigroupRun};

/// `F_0(x, v) = ln(alpha) / (t(x, v) + t(x, -v))` on the phase grid.
#[derive(Debug, Clone)]
pub struct RateField {
    pub field: DensityField,
    pub sup: f64,
}

/// `ln(alpha)` over the chord time through `(x, v)`.
pub fn chord_rate(space: &PhaseSpace, x: &Vec3, v: &Vec3, alpha: f64) -> Result<f64> {
    let chord = space.sojourn_time(x, v)? + space.sojourn_time(x, &-v)?;
    Ok(alpha.ln() / chord)
}

pub fn bounceback_rate_field(grids: &Grids, alpha: f64) -> Result<RateField> {
    if !matches!(grids.space.geometry(), Geometry::Ball { .. } | Geometry::Slab { .. }) {
        return Err(Error::Unsupported("rate fields need a slab or a ball".into()));
    }
    if !(alpha > 1.0) {
        return Err(invalid("alpha must exceed 1"));
    }
    let phase = &grids.phase;
    let vel = phase.velocities();
    let values: Vec<f64> = phase
        .nodes()
        .par_iter()
        .map(|n| chord_rate(&grids.space, &n.x, vel.vector(n.velocity), alpha))
        .collect::<Result<_>>()?;
    let sup = values.iter().copied().fold(0.0, f64::max);
    Ok(RateField { field: DensityField::new(phase.clone(), values)?, sup })
}

/// A thin bundle of rays around the chord of a ball that subtends the
/// half-angle `delta` at the centre. Rays are spread over `spread * delta` in
/// direction and over the middle of the chord in position.
#[derive(Debug, Clone)]
pub struct BeamSpec {
    pub delta: f64,
    pub spread: f64,
    pub speed: (f64, f64),
    pub along: usize,
    pub directions: usize,
    pub speeds: usize,
}

impl BeamSpec {
    pub fn new(delta: f64) -> Self {
        Self { delta, spread: 0.02, speed: (0.99, 1.01), along: 9, directions: 3, speeds: 3 }
    }

    /// Central ray `(x0, v0)` at unit mean speed in the `x-y` plane.
    pub fn center(&self, radius: f64) -> (Vec3, Vec3) {
        let s = 0.5 * (self.speed.0 + self.speed.1);
        (Vec3::new(radius * self.delta.cos(), 0.0, 0.0), Vec3::new(0.0, s, 0.0))
    }

    fn validate(&self, space: &PhaseSpace, cutoff: f64) -> Result<f64> {
        let Geometry::Ball { radius, .. } = *space.geometry() else {
            return Err(Error::Unsupported("beams are built in a ball".into()));
        };
        if !(self.delta > 0.0 && self.delta < std::f64::consts::FRAC_PI_2) {
            return Err(invalid("beam half-width must lie in (0, pi/2)"));
        }
        if !(self.spread >= 0.0 && self.spread < 1.0) || !(0.0 < self.speed.0 && self.speed.0 <= self.speed.1) {
            return Err(invalid("bad beam spread or speed band"));
        }
        if self.along == 0 || self.directions == 0 || self.speeds == 0 {
            return Err(invalid("a beam needs at least one node per axis"));
        }
        // rays meet the wall at incidence cosine sin(delta) up to the spread
        if (self.delta * (1.0 - self.spread)).sin() <= cutoff {
            return Err(invalid("beam emptied by the tangential cutoff"));
        }
        Ok(radius)
    }

    /// Phase grid of beam nodes (both orientations), equally weighted.
    pub fn grid(&self, space: &Arc<PhaseSpace>, cutoff: f64) -> Result<PhaseGrid> {
        let radius = self.validate(space, cutoff)?;
        let (x0, _) = self.center(radius);
        let half = radius * self.delta.sin();
        let offsets = |n: usize, width: f64| -> Vec<f64> {
            if n == 1 {
                vec![0.0]
            } else {
                (0..n).map(|i| width * (2.0 * i as f64 / (n - 1) as f64 - 1.0)).collect()
            }
        };
        let angles = offsets(self.directions, self.spread * self.delta);
        let (lo, hi) = self.speed;
        let speeds: Vec<f64> =
            (0..self.speeds).map(|i| lo + (hi - lo) * (i as f64 + 0.5) / self.speeds as f64).collect();
        let mut vectors = Vec::new();
        for &s in &speeds {
            for &b in &angles {
                let d = Vec3::new(-b.sin(), b.cos(), 0.0) * s;
                vectors.push(d);
                vectors.push(-d);
            }
        }
        let nv = vectors.len();
        let velocities = Arc::new(VelocitySet::new(vectors, vec![1.0 / nv as f64; nv]));
        let mut nodes = Vec::new();
        for (position, &y) in offsets(self.along, 0.8 * half).iter().enumerate() {
            let x = x0 + Vec3::new(0.0, y, 0.0);
            nodes.extend((0..nv).map(|velocity| PhaseNode { x, velocity, position }));
        }
        let w = 1.0 / nodes.len() as f64;
        let weights = vec![w; nodes.len()];
        PhaseGrid::unstructured(space.clone(), velocities, nodes, weights)
    }

    /// Indicator of the beam: directions within the spread of `+-v0`, speeds
    /// in the band.
    pub fn indicator(&self) -> impl Fn(&Vec3, &Vec3) -> f64 + Sync + '_ {
        let tol = self.spread * self.delta * (1.0 + 1e-9) + 1e-12;
        move |_x: &Vec3, v: &Vec3| {
            let s = v.norm();
            let angle = (v.y.abs() / s).clamp(-1.0, 1.0).acos();
            let in_band = s >= self.speed.0 * (1.0 - 1e-12) && s <= self.speed.1 * (1.0 + 1e-12);
            if in_band && angle <= tol && v.z.abs() <= 1e-12 * s {
                1.0
            } else {
                0.0
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlowupRow {
    pub delta: f64,
    pub chord_time: f64,
    pub predicted: f64,
    pub measured: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone)]
pub struct BlowupReport {
    pub alpha: f64,
    /// Rows in the order of the input sweep.
    pub rows: Vec<BlowupRow>,
    /// Measured rates strictly increase as `delta` shrinks.
    pub monotone: bool,
}

/// Settings shared by every beam of a sweep.
#[derive(Debug, Clone)]
pub struct BlowupSettings {
    /// Propagation horizon in chord times of each beam.
    pub periods: f64,
    pub outputs: usize,
    pub spread: f64,
}

impl Default for BlowupSettings {
    fn default() -> Self {
        Self { periods: 40.0, outputs: 400, spread: 0.02 }
    }
}

/// Propagates beam indicators under bounce-back with factor `alpha` and fits
/// their growth rates. `grids` supplies the trace grids the operator lives
/// on; the phase grid of each beam replaces the grid phase nodes.
pub fn blowup_experiment(grids: &Grids, alpha: f64, deltas: &[f64], settings: &BlowupSettings) -> Result<BlowupReport> {
    if !(alpha > 0.0) {
        return Err(invalid("alpha must be positive"));
    }
    let op = BoundaryOperator::bounce_back(grids, alpha)?;
    let cutoff = grids.spec.tangential_cutoff;
    let rows = deltas
        .par_iter()
        .map(|&delta| {
            let beam = BeamSpec { spread: settings.spread, ..BeamSpec::new(delta) };
            let phase = Arc::new(beam.grid(&grids.space, cutoff)?);
            let radius = match *grids.space.geometry() {
                Geometry::Ball { radius, .. } => radius,
                _ => unreachable!("validated by the beam"),
            };
            let (x0, v0) = beam.center(radius);
            let chord_time = grids.space.sojourn_time(&x0, &v0)? + grids.space.sojourn_time(&x0, &-v0)?;
            let predicted = alpha.ln() / chord_time;
            let beam_grids = Grids { phase, ..grids.clone() };
            let run = SemigroupRun::new(beam_grids, op.clone(), 1.0, settings.periods * chord_time)
                .with_outputs(settings.outputs)
                .with_engine(Engine::Billiard);
            let record = run.propagate(&beam.indicator())?;
            let measured = growth_rate(&record)?.rate();
            Ok(BlowupRow {
                delta,
                chord_time,
                predicted,
                measured,
                relative_error: (measured - predicted).abs() / predicted.abs(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut by_delta = rows.clone();
    by_delta.sort_by(|a, b| b.delta.total_cmp(&a.delta));
    let monotone = by_delta.windows(2).all(|w| w[1].measured > w[0].measured);
    Ok(BlowupReport { alpha, rows, monotone })
}

/// Half-line Voigt example: `Omega = (0, 1)`, velocities in `[0, v_max]`,
/// `h(v) = (1 + v)^{-2}` and `phi_n = h 1_{v < n}`.
#[derive(Debug, Clone, Copy)]
pub struct VoigtRow {
    pub n: f64,
    /// `||phi_n - phi||_1` with `phi = h` truncated at `v_max`.
    pub distance: f64,
    pub generator_norm: f64,
    pub trace_norm: f64,
    /// `ln(1 + n) - n / (1 + n)`.
    pub oracle: f64,
    pub relative_error: f64,
}

pub fn voigt_profile(v: f64) -> f64 {
    (1.0 + v).powi(-2)
}

/// Trace norm oracle `int_0^n h(v) v dv`.
pub fn voigt_trace_oracle(n: f64) -> f64 {
    (1.0 + n).ln() - n / (1.0 + n)
}

/// Graded velocity nodes on `[0, v_max]` whose panel breaks include every
/// `n` of the sweep.
fn voigt_velocities(ns: &[f64], v_max: f64) -> (Vec<f64>, Vec<f64>) {
    let mut breaks = vec![0.0, v_max];
    let mut b = 1e-2;
    while b < v_max {
        breaks.push(b);
        b *= 2.0;
    }
    breaks.extend(ns.iter().copied().filter(|&n| n < v_max));
    breaks.sort_by(f64::total_cmp);
    breaks.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs().max(1.0));
    let gl = GaussLegendre::new(8);
    let (mut nodes, mut weights) = (Vec::new(), Vec::new());
    for w in breaks.windows(2) {
        for (t, wt) in gl.nodes.iter().zip(&gl.weights) {
            nodes.push(0.5 * (w[0] + w[1]) + 0.5 * (w[1] - w[0]) * t);
            weights.push(0.5 * (w[1] - w[0]) * wt);
        }
    }
    (nodes, weights)
}

pub fn voigt_demo(ns: &[f64], v_max: f64, nx: usize) -> Result<Vec<VoigtRow>> {
    if let Some(&n) = ns.iter().find(|&&n| !(n > 0.0) || n > v_max) {
        return Err(invalid(format!("n = {n} must lie in (0, v_max = {v_max}]")));
    }
    if nx < 2 {
        return Err(invalid("need at least two x nodes"));
    }
    let (vs, ws) = voigt_velocities(ns, v_max);
    let dx = 1.0 / nx as f64;
    Ok(ns
        .iter()
        .map(|&n| {
            let phi_n = |_x: f64, v: f64| if v < n { voigt_profile(v) } else { 0.0 };
            let phi = |_x: f64, v: f64| voigt_profile(v);
            let xs: Vec<f64> = (0..nx).map(|i| (i as f64 + 0.5) * dx).collect();
            let mut distance = 0.0;
            let mut generator_norm = 0.0;
            for (&v, &w) in vs.iter().zip(&ws) {
                for (i, &x) in xs.iter().enumerate() {
                    distance += w * dx * (phi_n(x, v) - phi(x, v)).abs();
                    // centred differences of v d/dx phi_n, one-sided at the ends
                    let (l, r) = (xs[i.saturating_sub(1)], xs[(i + 1).min(nx - 1)]);
                    let dphi = (phi_n(r, v) - phi_n(l, v)) / (r - l);
                    generator_norm += w * dx * (v * dphi).abs();
                }
            }
            // outgoing trace at x = 1 with flux weight v
            let trace_norm: f64 = vs.iter().zip(&ws).map(|(&v, &w)| w * v * phi_n(1.0, v)).sum();
            let oracle = voigt_trace_oracle(n);
            VoigtRow {
                n,
                distance,
                generator_norm,
                trace_norm,
                oracle,
                relative_error: (trace_norm - oracle).abs() / oracle,
            }
        })
        .collect())
}

/// Grids for the bounce-back probes: a disc with the given radius.
pub fn disc_grids(radius: f64, resolution: [usize; 4], cutoff: f64) -> Result<Grids> {
    let space = Arc::new(PhaseSpace::ball(2, radius, 0.5, 1.5)?);
    build_grids(space, &GridSpec::new(resolution).cutoff(cutoff))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ball_center_rate() {
        let space = PhaseSpace::ball(2, 1.0, 0.0, 1.0).unwrap();
        let r = chord_rate(&space, &Vec3::zeros(), &Vec3::x(), 2.0).unwrap();
        assert!((r - 2f64.ln() / 2.0).abs() < 1e-14);
        assert!((r - 0.34657).abs() < 5e-6);
    }

    #[test]
    fn slab_rate_field() {
        let space = Arc::new(PhaseSpace::slab(1.0, 0.0, 1.0).unwrap());
        let g = build_grids(space.clone(), &GridSpec::new([10, 10])).unwrap();
        let f = bounceback_rate_field(&g, 2.0).unwrap();
        let vel = g.phase.velocities();
        for (n, val) in g.phase.nodes().iter().zip(&f.field.values) {
            let v = vel.vector(n.velocity);
            let oneway = space.sojourn_time(&n.x, v).unwrap() + space.sojourn_time(&n.x, &-v).unwrap();
            assert!((val - 2f64.ln() / oneway).abs() < 1e-14);
            assert!((val - v.x.abs() * 2f64.ln() / 2.0).abs() < 1e-12);
        }
        let g1 = build_grids(space, &GridSpec::new([10, 10])).unwrap();
        let near_one = bounceback_rate_field(&g1, 1.0 + 1e-9).unwrap();
        assert!(near_one.sup < 1e-9);
    }

    #[test]
    fn sup_grows_under_cutoff_refinement() {
        // halve the cutoff while doubling radial and angular resolution
        let sups: Vec<f64> = [(6, 16, 0.1), (12, 32, 0.05), (24, 64, 0.025), (48, 128, 0.0125)]
            .iter()
            .map(|&(nr, nd, c)| {
                let g = disc_grids(1.0, [nr, 16, 2, nd], c).unwrap();
                bounceback_rate_field(&g, 2.0).unwrap().sup
            })
            .collect();
        assert!(sups.windows(2).all(|w| w[1] > 1.25 * w[0]), "{sups:?}");
        assert!(sups[3] > 2.5 * sups[0]);
        let g = disc_grids(1.0, [6, 16, 2, 16], 0.1).unwrap();
        assert!(bounceback_rate_field(&g, 0.5).is_err());
    }

    #[test]
    fn beam_rates() {
        let g = disc_grids(1.0, [2, 8, 2, 8], 1e-3).unwrap();
        let rep = blowup_experiment(&g, 2.0, &[0.2, 0.1, 0.05], &BlowupSettings::default()).unwrap();
        for row in &rep.rows {
            assert!(row.relative_error < 0.05, "{row:?}");
        }
        assert!(rep.monotone);
        let short = &rep.rows[1];
        assert!((short.chord_time - 2.0 * 0.1f64.sin()).abs() < 1e-12);
        let contractive = blowup_experiment(&g, 0.5, &[0.2, 0.1], &BlowupSettings::default()).unwrap();
        assert!(contractive.rows.iter().all(|r| r.measured < 0.0));
        let tangential = disc_grids(1.0, [2, 8, 2, 8], 0.1).unwrap();
        assert!(blowup_experiment(&tangential, 2.0, &[0.05], &BlowupSettings::default()).is_err());
    }

    #[test]
    fn voigt_examples() {
        let rows = voigt_demo(&[10.0, 100.0, 1e4], 1e6, 4).unwrap();
        assert!((rows[0].oracle - 1.4888).abs() < 1e-3);
        assert!((rows[2].oracle - 8.2113).abs() < 1e-3);
        for r in &rows {
            assert!(r.relative_error < 0.02, "{r:?}");
            assert_eq!(r.generator_norm, 0.0);
        }
        assert!(rows.windows(2).all(|w| w[1].trace_norm > w[0].trace_norm && w[1].distance < w[0].distance));
        assert!(voigt_demo(&[10.0], 5.0, 4).is_err());
    }

    proptest! {
        #[test]
        fn rate_symmetric_in_velocity(r in 0.0f64..0.99, th in 0.0f64..std::f64::consts::TAU, ph in 0.0f64..std::f64::consts::TAU, alpha in 1.01f64..5.0) {
            let space = PhaseSpace::ball(2, 1.0, 0.0, 1.0).unwrap();
            let x = Vec3::new(r * th.cos(), r * th.sin(), 0.0);
            let v = Vec3::new(ph.cos(), ph.sin(), 0.0);
            let a = chord_rate(&space, &x, &v, alpha).unwrap();
            let b = chord_rate(&space, &x, &-v, alpha).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a);
        }

        #[test]
        fn voigt_trace_monotone(a in 1.0f64..1e3, b in 1.0f64..1e3) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assume!(hi - lo > 1e-6);
            prop_assert!(voigt_trace_oracle(hi) > voigt_trace_oracle(lo));
        }
    }
}
