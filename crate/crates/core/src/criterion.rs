//! Generation criteria: the truncated-norm profile `eps -> ||H chi_eps||`,
//! its threshold `eps0`, the resulting growth bound, and the kernel
//! criteria for Maxwell-type and non-local operators.

use crate::boundary::BoundaryOperator;
use crate::error::{Error, Result};
use crate::grid::TraceGrid;

/// Number of points in the default epsilon sweep.
pub const SWEEP_POINTS: usize = 20;

/// Geometric sweep from the largest to the smallest sojourn time on the
/// grid, returned in increasing order.
pub fn default_sweep(outgoing: &TraceGrid) -> Vec<f64> {
    let taus = outgoing.taus();
    let hi = taus.iter().copied().fold(0.0, f64::max);
    let lo = taus.iter().copied().fold(f64::INFINITY, f64::min);
    if !(hi > lo) {
        return vec![hi];
    }
    let r = (lo / hi).ln() / (SWEEP_POINTS - 1) as f64;
    let mut s: Vec<f64> = (0..SWEEP_POINTS).map(|k| hi * (r * k as f64).exp()).collect();
    s[SWEEP_POINTS - 1] = lo;
    s.reverse();
    s
}

/// Limit as `eps -> 0` of a nondecreasing profile. Zero when the space has
/// a positive lower bound on sojourn times, since the truncation is then
/// empty for small `eps`; otherwise the linear extrapolation through the
/// three smallest sweep points, clamped to `[0, cap]`.
fn small_eps_limit(outgoing: &TraceGrid, profile: &[(f64, f64)], cap: f64) -> f64 {
    if outgoing.space().analytic_tau0() > 0.0 {
        return 0.0;
    }
    let pts = &profile[..profile.len().min(3)];
    if pts.len() < 2 {
        return pts.first().map_or(0.0, |p| p.1).clamp(0.0, cap);
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (my - slope * mx).clamp(0.0, cap)
}

/// Outcome of the truncated-norm criterion.
#[derive(Debug, Clone)]
pub struct CriterionReport {
    pub p: f64,
    pub full_norm: f64,
    /// `sup { eps : ||H chi_eps|| < 1 }`, infinite for contractions.
    pub epsilon0: f64,
    /// `(eps, ||H chi_eps||)` in increasing `eps`.
    pub profile: Vec<(f64, f64)>,
    pub small_eps_limit: f64,
    pub holds: bool,
    /// Exponential growth bound `max(0, ln ||H|| / eps0)` when the criterion holds.
    pub growth_bound: Option<f64>,
    /// True when norms for this `p` are sampled lower bounds.
    pub lower_bound: bool,
}

/// Evaluates `||H chi_eps||` over a sweep and locates `eps0`.
pub fn criterion_epsilon0(h: &BoundaryOperator, p: f64) -> Result<CriterionReport> {
    let out = h.outgoing().clone();
    let sweep = default_sweep(&out);
    let columns = (p == 1.0).then(|| h.l1_column_norms());
    let taus = out.taus();
    let norm_at = |eps: f64| -> Result<(f64, bool)> {
        match &columns {
            Some(c) => Ok((c.iter().zip(taus).filter(|(_, &t)| t <= eps).map(|(v, _)| *v).fold(0.0, f64::max), false)),
            None => {
                let n = h.truncate(eps).operator_norm(p)?;
                Ok((n.value, n.is_lower_bound()))
            }
        }
    };
    let (full_norm, lower_bound) = match &columns {
        Some(c) => (c.iter().copied().fold(0.0, f64::max), false),
        None => {
            let n = h.operator_norm(p)?;
            (n.value, n.is_lower_bound())
        }
    };
    let mut profile = Vec::with_capacity(sweep.len());
    for &eps in &sweep {
        profile.push((eps, norm_at(eps)?.0));
    }

    let epsilon0 = if full_norm < 1.0 {
        f64::INFINITY
    } else {
        let mut distinct: Vec<f64> = taus.to_vec();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * b.abs());
        // first distinct tau where the truncated norm reaches 1
        let (mut lo, mut hi) = (0usize, distinct.len() - 1);
        if norm_at(distinct[0])?.0 >= 1.0 {
            hi = 0;
        }
        while lo < hi {
            let mid = (lo + hi) / 2;
            if norm_at(distinct[mid])?.0 >= 1.0 {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        let first = distinct[hi];
        if hi == 0 && out.space().analytic_tau0() == 0.0 {
            0.0
        } else {
            first
        }
    };

    let limit = small_eps_limit(&out, &profile, full_norm);
    let holds = limit < 1.0 && epsilon0 > 0.0;
    let growth_bound =
        holds.then(|| if full_norm <= 1.0 || epsilon0.is_infinite() { 0.0 } else { full_norm.ln() / epsilon0 });
    Ok(CriterionReport { p, full_norm, epsilon0, profile, small_eps_limit: limit, holds, growth_bound, lower_bound })
}

/// Verdict of a kernel criterion `lim left(eps) < right`.
#[derive(Debug, Clone)]
pub struct KernelVerdict {
    /// `(eps, left side)` in increasing `eps`.
    pub profile: Vec<(f64, f64)>,
    pub limit: f64,
    /// `1 - ||C||`, the budget left by the contractive part.
    pub right: f64,
    pub margin: f64,
    pub holds: bool,
}

fn verdict(out: &TraceGrid, profile: Vec<(f64, f64)>, cap: f64, right: f64) -> KernelVerdict {
    let limit = small_eps_limit(out, &profile, cap);
    let margin = right - limit;
    KernelVerdict { profile, limit, right, margin, holds: margin > 0.0 }
}

fn contraction_budget(h: &BoundaryOperator) -> f64 {
    1.0 - h.contraction_part().operator_norm(1.0).map(|n| n.value).unwrap_or(f64::INFINITY)
}

fn restricted_max(columns: &[f64], taus: &[f64], eps: f64) -> f64 {
    columns.iter().zip(taus).filter(|(_, &t)| t <= eps).map(|(c, _)| *c).fold(0.0, f64::max)
}

/// `L^1` criterion for Maxwell-type operators: the diffuse column mass over
/// sources with `tau <= eps`, against `1 - sup alpha`.
pub fn maxwell_criterion_p1(h: &BoundaryOperator, sweep: Option<&[f64]>) -> Result<KernelVerdict> {
    if !h.is_local() {
        return Err(Error::Precondition("Maxwell-type criterion needs a local kernel".into()));
    }
    let out = h.outgoing().clone();
    let sweep = sweep.map(<[f64]>::to_vec).unwrap_or_else(|| default_sweep(&out));
    let cols = h.kernel_part().l1_column_norms();
    let cap = cols.iter().copied().fold(0.0, f64::max);
    let profile = sweep.iter().map(|&e| (e, restricted_max(&cols, out.taus(), e))).collect();
    Ok(verdict(&out, profile, cap, contraction_budget(h)))
}

/// `L^p` criterion (`1 < p < inf`) for Maxwell-type operators.
#[derive(Debug, Clone)]
pub struct MaxwellPqReport {
    pub verdict: KernelVerdict,
    /// Unrestricted integral `sup_x f(x)` that bounds every `f_eps`.
    pub f0: f64,
    /// `f_eps(x) <= f_eps'(x)` held at every boundary position.
    pub monotone: bool,
    /// `sup_x f_eps(x)^(1/p)`, an upper bound on `||K chi_eps||`.
    pub kernel_bound: Vec<(f64, f64)>,
}

pub fn maxwell_criterion_pq(h: &BoundaryOperator, p: f64) -> Result<MaxwellPqReport> {
    if !(p > 1.0) || !p.is_finite() {
        return Err(Error::Precondition("p must lie in (1, inf)".into()));
    }
    let q = p / (p - 1.0);
    let blocks = h.local_kernel_blocks()?;
    let (inc, out) = (h.incoming().clone(), h.outgoing().clone());
    let sweep = default_sweep(&out);
    let taus = out.taus();
    let flux = |g: &TraceGrid, i: usize| g.weights()[i] / g.position_of(i).dgamma;

    // f_eps per block for the unrestricted case and each sweep point
    let f_at = |eps: f64| -> Vec<f64> {
        blocks
            .iter()
            .map(|(rows, cols, hv)| {
                let n = cols.len();
                rows.iter()
                    .enumerate()
                    .map(|(r, &i)| {
                        let inner: f64 = cols
                            .iter()
                            .enumerate()
                            .filter(|(_, &j)| taus[j] <= eps)
                            .map(|(c, &j)| hv[r * n + c].abs().powf(q) * flux(&out, j))
                            .sum();
                        flux(&inc, i) * inner.powf(p / q)
                    })
                    .sum()
            })
            .collect()
    };
    let f_full = f_at(f64::INFINITY);
    let f0 = f_full.iter().copied().fold(0.0, f64::max);
    if !f0.is_finite() {
        return Err(Error::DivergentIntegral);
    }
    let mut monotone = true;
    let mut prev: Option<Vec<f64>> = None;
    let mut profile = Vec::with_capacity(sweep.len());
    for &eps in &sweep {
        let f = f_at(eps);
        if let Some(pr) = &prev {
            monotone &= pr.iter().zip(&f).all(|(a, b)| *a <= *b * (1.0 + 1e-12) + 1e-300);
        }
        monotone &= f.iter().zip(&f_full).all(|(a, b)| *a <= *b * (1.0 + 1e-12) + 1e-300);
        profile.push((eps, f.iter().copied().fold(0.0, f64::max)));
        prev = Some(f);
    }
    let kernel_bound = profile.iter().map(|&(e, f)| (e, f.powf(1.0 / p))).collect();
    Ok(MaxwellPqReport { verdict: verdict(&out, profile, f0, contraction_budget(h)), f0, monotone, kernel_bound })
}

/// `L^1` criterion for non-local kernels with a contractive part.
pub fn nonlocal_criterion_l1(h: &BoundaryOperator) -> Result<KernelVerdict> {
    let k = h.kernel_part();
    let m = k.min_entry();
    if m < 0.0 {
        return Err(Error::NegativeKernel(m));
    }
    let out = h.outgoing().clone();
    let cols = k.l1_column_norms();
    let cap = cols.iter().copied().fold(0.0, f64::max);
    let profile = default_sweep(&out).iter().map(|&e| (e, restricted_max(&cols, out.taus(), e))).collect();
    Ok(verdict(&out, profile, cap, contraction_budget(h)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::{wall_maxwellian, MaxwellNormalization};
    use crate::geometry::{PhaseSpace, Vec3};
    use crate::grid::{build_grids, GridSpec, Grids, QuadratureRule};
    use crate::quadrature::GaussLegendre;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn slab(a: f64) -> Grids {
        let space = Arc::new(PhaseSpace::slab(a, 0.0, 1.0).unwrap());
        build_grids(space, &GridSpec::new([4, 64]).rule(QuadratureRule::Trapezoid)).unwrap()
    }

    fn disc() -> Grids {
        let space = Arc::new(PhaseSpace::ball(2, 1.0, 0.0, 1.0).unwrap());
        build_grids(space, &GridSpec::new([4, 16, 4, 64]).cutoff(0.01)).unwrap()
    }

    #[test]
    fn contraction_has_infinite_threshold() {
        let g = disc();
        let h = BoundaryOperator::bounce_back(&g, 0.5).unwrap();
        let r = criterion_epsilon0(&h, 1.0).unwrap();
        assert!(r.epsilon0.is_infinite() && r.holds);
        assert_eq!(r.growth_bound, Some(0.0));
    }

    #[test]
    fn slab_threshold_is_width() {
        for a in [0.5, 1.0, 2.0] {
            let g = slab(a);
            let h = BoundaryOperator::bounce_back(&g, 2.0).unwrap();
            for p in [1.0, 2.0] {
                let r = criterion_epsilon0(&h, p).unwrap();
                assert!((r.epsilon0 - 2.0 * a).abs() < 1e-12, "{}", r.epsilon0);
                assert!(r.holds);
                let w = r.growth_bound.unwrap();
                assert!((w - 2f64.ln() / (2.0 * a)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ball_bounce_back_fails() {
        let g = disc();
        let h = BoundaryOperator::bounce_back(&g, 2.0).unwrap();
        let r = criterion_epsilon0(&h, 1.0).unwrap();
        assert!(r.profile.iter().all(|&(_, v)| (v - 2.0).abs() < 1e-12));
        assert!(!r.holds);
        assert_eq!(r.epsilon0, 0.0);
        assert!(r.growth_bound.is_none());
    }

    #[test]
    fn maxwell_p1_examples() {
        let g = slab(1.0);
        let pure = BoundaryOperator::specular(&g, 0.3).unwrap();
        let v = maxwell_criterion_p1(&pure, None).unwrap();
        assert!((v.margin - 0.7).abs() < 1e-12 && v.holds);

        let d = disc();
        let m = BoundaryOperator::maxwell(&d, 0.5, 1.0, MaxwellNormalization::Verbatim).unwrap();
        let v = maxwell_criterion_p1(&m, None).unwrap();
        assert!(v.limit <= 0.3989 && v.holds, "{v:?}");

        let full = BoundaryOperator::specular(&d, 1.0)
            .unwrap()
            .plus(&BoundaryOperator::diffuse(&d, |_, v, _| wall_maxwellian(v, 1.0, 2)).unwrap())
            .unwrap();
        assert!(!maxwell_criterion_p1(&full, None).unwrap().holds);
    }

    #[test]
    fn maxwell_pq_f0_oracle() {
        // f0 = (int_{u<0} |u| M(u)^2 du) * (int_0^1 u' du')
        let space = Arc::new(PhaseSpace::slab(1.0, 0.0, 1.0).unwrap());
        let g = build_grids(space, &GridSpec::new([2, 2000]).cutoff(0.0)).unwrap();
        let h = BoundaryOperator::diffuse_separable(&g, 1.0, |v| wall_maxwellian(v, 1.0, 1), |_| 1.0).unwrap();
        let r = maxwell_criterion_pq(&h, 2.0).unwrap();
        let gl = GaussLegendre::new(32);
        let a = gl.integrate(0.0, 1.0, |u| u * wall_maxwellian(&Vec3::new(u, 0.0, 0.0), 1.0, 1).powi(2));
        let oracle = a * 0.5;
        assert!((r.f0 - oracle).abs() < 1e-6 * oracle, "{} vs {oracle}", r.f0);
        assert!(r.monotone && r.verdict.holds);

        let zero = BoundaryOperator::specular(&g, 0.9).unwrap();
        let z = maxwell_criterion_pq(&zero, 2.0).unwrap();
        assert_eq!(z.f0, 0.0);
        assert!(z.verdict.holds);
    }

    #[test]
    fn maxwell_pq_dini_on_disc() {
        let d = disc();
        let h = BoundaryOperator::maxwell(&d, 0.5, 1.0, MaxwellNormalization::Verbatim).unwrap();
        let r = maxwell_criterion_pq(&h, 2.0).unwrap();
        assert!(r.monotone);
        assert!(r.verdict.profile[0].1 < 0.1 * r.f0);
        assert!(r.verdict.holds);
        // ||K chi_eps||_2 never exceeds sup f_eps^(1/2)
        let k = h.kernel_part();
        for &(eps, bound) in r.kernel_bound.iter().step_by(4) {
            let n = k.truncate(eps).operator_norm(2.0).unwrap().value;
            assert!(n <= bound * (1.0 + 1e-9), "{eps}: {n} > {bound}");
        }
    }

    #[test]
    fn nonlocal_examples() {
        let space = Arc::new(PhaseSpace::population(0.0, 1.0).unwrap());
        let g = build_grids(space, &GridSpec::new([4, 200])).unwrap();
        let mitosis = BoundaryOperator::lebowitz_rubinow(&g, |_, lp| 4.0 * lp, 0.0).unwrap();
        let v = nonlocal_criterion_l1(&mitosis).unwrap();
        assert!(v.holds && v.limit < 0.05, "{v:?}");
        let flat = BoundaryOperator::lebowitz_rubinow(&g, |_, _| 2.0, 0.0).unwrap();
        let v = nonlocal_criterion_l1(&flat).unwrap();
        assert!(!v.holds && (v.limit - 2.0).abs() < 1e-12);
        let c = BoundaryOperator::lebowitz_rubinow(&g, |_, _| 0.0, 0.9).unwrap();
        assert!((nonlocal_criterion_l1(&c).unwrap().margin - 0.1).abs() < 1e-12);
        let neg = BoundaryOperator::lebowitz_rubinow(&g, |_, _| -1.0, 0.0).unwrap();
        assert!(matches!(nonlocal_criterion_l1(&neg), Err(Error::NegativeKernel(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn finite_rank_vanishes_under_truncation(c in 0.0f64..0.9, s in 0.1f64..5.0, k in 0usize..4) {
            // rank-one kernel plus a contraction on the disc, p = 2
            let d = disc();
            let kernel = BoundaryOperator::diffuse_separable(
                &d, s, move |v: &Vec3| 1.0 + v.x.powi(k as i32), |w: &Vec3| 1.0 + w.y.abs()).unwrap();
            let h = BoundaryOperator::bounce_back(&d, c).unwrap().plus(&kernel).unwrap();
            let r = criterion_epsilon0(&h, 2.0).unwrap();
            let smallest = r.profile[0].1;
            let tail = kernel.truncate(r.profile[0].0).operator_norm(2.0).unwrap().value;
            prop_assert!(smallest <= c + tail + 1e-9);
            prop_assert!(tail < 0.5 * kernel.operator_norm(2.0).unwrap().value);
        }
    }
}
