//! Maximum-entropy distributions on a bucket scale with a prescribed mean and
//! standard deviation.
//!
//! The maximizer has the form `p_i ∝ exp(λ1 s_i + λ2 s_i²)`. We find the
//! multipliers by damped Newton iteration on the convex dual
//! `log Z(λ) - λ1 m1 - λ2 m2`, working in coordinates where the scale is
//! centered and spans [-1, 1] so the Hessian stays well conditioned.
//! Targets on the edge of the feasible region have no exponential-family
//! representative and are answered with the unique boundary distribution.

use serde::Serialize;

use crate::dist::{BucketScale, ScoreDistribution};
use crate::error::{Error, Result};

pub const DEFAULT_TOLERANCE: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 200;

/// Variance distance from a feasibility bound below which the target is
/// treated as lying on the bound.
pub const BOUNDARY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct MomentTarget {
    pub mu: f64,
    pub sigma: f64,
    pub scale: BucketScale,
}

impl MomentTarget {
    pub fn new(mu: f64, sigma: f64, scale: BucketScale) -> Self {
        Self { mu, sigma, scale }
    }

    /// Largest variance any distribution on the scale with this mean can have.
    pub fn max_variance(&self) -> f64 {
        (self.mu - self.scale.first()) * (self.scale.last() - self.mu)
    }

    /// Smallest variance any distribution on the scale with this mean can
    /// have: mass split between the two buckets bracketing the mean.
    pub fn min_variance(&self) -> f64 {
        match bracket(&self.scale, self.mu) {
            Some((lo, hi)) => {
                let s = self.scale.values();
                (self.mu - s[lo]) * (s[hi] - self.mu)
            }
            None => 0.0,
        }
    }
}

/// Which branch produced a solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolutionKind {
    /// Interior target solved by Newton iteration.
    ExponentialFamily,
    /// Zero-variance target on a bucket value.
    PointMass,
    /// Mass split between the two buckets bracketing the mean (minimum
    /// variance boundary, or a zero-variance target between buckets).
    Adjacent,
    /// Mass split between the first and last bucket (maximum variance).
    Extremes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxEntSolution {
    pub dist: ScoreDistribution,
    /// Multiplier of the mean constraint, in score units. Zero for boundary
    /// solutions.
    pub lambda1: f64,
    /// Multiplier of the second-moment constraint. Zero for boundary
    /// solutions.
    pub lambda2: f64,
    pub iterations: usize,
    /// `sqrt((mean - mu)² + (std - sigma)²)` of the returned distribution.
    pub residual: f64,
    pub kind: SolutionKind,
}

/// Index pair `(j, j+1)` with `s_j <= mu <= s_{j+1}`; `None` when `mu` sits
/// exactly on a bucket.
fn bracket(scale: &BucketScale, mu: f64) -> Option<(usize, usize)> {
    let s = scale.values();
    if scale.position(mu).is_some() {
        return None;
    }
    let hi = s.iter().position(|&v| v > mu)?;
    if hi == 0 {
        return None;
    }
    Some((hi - 1, hi))
}

/// Whether some distribution on the scale has the target mean and standard
/// deviation. A zero standard deviation is always accepted for an in-range
/// mean (see [`fit_maxent`]).
pub fn feasible(target: &MomentTarget) -> bool {
    infeasibility(target).is_none()
}

fn infeasibility(t: &MomentTarget) -> Option<String> {
    if !(t.mu.is_finite() && t.sigma.is_finite()) {
        return Some("non-finite moments".into());
    }
    if t.sigma < 0.0 {
        return Some("negative standard deviation".into());
    }
    if t.mu < t.scale.first() || t.mu > t.scale.last() {
        return Some(format!(
            "mean outside [{}, {}]",
            t.scale.first(),
            t.scale.last()
        ));
    }
    if t.sigma == 0.0 {
        return None;
    }
    let var = t.sigma * t.sigma;
    let upper = t.max_variance();
    if var > upper + BOUNDARY_EPS {
        return Some(format!("variance {var} exceeds bound {upper}"));
    }
    let lower = t.min_variance();
    if var < lower - BOUNDARY_EPS {
        return Some(format!("variance {var} below lattice bound {lower}"));
    }
    None
}

pub fn fit_maxent_default(target: &MomentTarget) -> Result<MaxEntSolution> {
    fit_maxent(target, DEFAULT_TOLERANCE, DEFAULT_MAX_ITER)
}

/// Maximum-entropy distribution matching `target` within `tol`.
pub fn fit_maxent(target: &MomentTarget, tol: f64, max_iter: usize) -> Result<MaxEntSolution> {
    if !(tol.is_finite() && tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    if let Some(reason) = infeasibility(target) {
        return Err(Error::InfeasibleMoments {
            mu: target.mu,
            sigma: target.sigma,
            reason,
        });
    }
    let scale = &target.scale;
    let var = target.sigma * target.sigma;

    if target.sigma == 0.0 || var <= target.min_variance() + BOUNDARY_EPS {
        return boundary_solution(target, adjacent_mass(scale, target.mu));
    }
    if var >= target.max_variance() - BOUNDARY_EPS {
        return boundary_solution(target, extreme_mass(scale, target.mu));
    }
    newton(target, tol, max_iter)
}

fn adjacent_mass(scale: &BucketScale, mu: f64) -> (Vec<f64>, SolutionKind) {
    let s = scale.values();
    let mut mass = vec![0.0; s.len()];
    match bracket(scale, mu) {
        None => {
            let i = scale.position(mu).expect("mean on a bucket");
            mass[i] = 1.0;
            (mass, SolutionKind::PointMass)
        }
        Some((lo, hi)) => {
            let w = (mu - s[lo]) / (s[hi] - s[lo]);
            mass[lo] = 1.0 - w;
            mass[hi] = w;
            (mass, SolutionKind::Adjacent)
        }
    }
}

fn extreme_mass(scale: &BucketScale, mu: f64) -> (Vec<f64>, SolutionKind) {
    let n = scale.len();
    let mut mass = vec![0.0; n];
    let w = (mu - scale.first()) / (scale.last() - scale.first());
    mass[0] = 1.0 - w;
    mass[n - 1] = w;
    let kind = if w == 0.0 || w == 1.0 {
        SolutionKind::PointMass
    } else {
        SolutionKind::Extremes
    };
    (mass, kind)
}

fn boundary_solution(
    target: &MomentTarget,
    (mass, kind): (Vec<f64>, SolutionKind),
) -> Result<MaxEntSolution> {
    let dist = ScoreDistribution::new(target.scale.clone(), mass)?;
    let residual = moment_residual(&dist, target);
    Ok(MaxEntSolution {
        dist,
        lambda1: 0.0,
        lambda2: 0.0,
        iterations: 0,
        residual,
        kind,
    })
}

fn moment_residual(d: &ScoreDistribution, t: &MomentTarget) -> f64 {
    (d.mean() - t.mu).hypot(d.std_dev() - t.sigma)
}

/// Dual state at one multiplier pair, in normalized coordinates.
struct DualEval {
    value: f64,
    grad: [f64; 2],
    /// Covariance of (t, t²): [c11, c12, c22].
    hess: [f64; 3],
    mass: Vec<f64>,
}

fn eval_dual(t: &[f64], lambda: [f64; 2], m: [f64; 2]) -> DualEval {
    let expo: Vec<f64> = t
        .iter()
        .map(|&x| lambda[0] * x + lambda[1] * x * x)
        .collect();
    let max = expo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut mass: Vec<f64> = expo.iter().map(|e| (e - max).exp()).collect();
    let z: f64 = mass.iter().sum();
    mass.iter_mut().for_each(|p| *p /= z);

    let e1: f64 = t.iter().zip(&mass).map(|(x, p)| x * p).sum();
    let e2: f64 = t.iter().zip(&mass).map(|(x, p)| x * x * p).sum();
    // central moments for the covariance, computed around the mean for accuracy
    let (mut c11, mut c12, mut c22) = (0.0, 0.0, 0.0);
    for (x, p) in t.iter().zip(&mass) {
        let a = x - e1;
        let b = x * x - e2;
        c11 += p * a * a;
        c12 += p * a * b;
        c22 += p * b * b;
    }
    DualEval {
        value: z.ln() + max - lambda[0] * m[0] - lambda[1] * m[1],
        grad: [e1 - m[0], e2 - m[1]],
        hess: [c11, c12, c22],
        mass,
    }
}

fn newton(target: &MomentTarget, tol: f64, max_iter: usize) -> Result<MaxEntSolution> {
    let scale = &target.scale;
    let center = 0.5 * (scale.first() + scale.last());
    let half = 0.5 * (scale.last() - scale.first());
    let t: Vec<f64> = scale.values().iter().map(|s| (s - center) / half).collect();
    let m1 = (target.mu - center) / half;
    let m2 = target.sigma * target.sigma / (half * half) + m1 * m1;
    let m = [m1, m2];

    let mut lambda = [0.0, 0.0];
    let mut cur = eval_dual(&t, lambda, m);
    let mut residual = f64::INFINITY;

    for iter in 0..=max_iter {
        let dist = ScoreDistribution::new(scale.clone(), cur.mass.clone())?;
        residual = moment_residual(&dist, target);
        if residual <= tol {
            return Ok(MaxEntSolution {
                dist,
                lambda1: lambda[0] / half - 2.0 * lambda[1] * center / (half * half),
                lambda2: lambda[1] / (half * half),
                iterations: iter,
                residual,
                kind: SolutionKind::ExponentialFamily,
            });
        }
        if iter == max_iter {
            break;
        }

        let step = newton_step(&cur);
        let slope = cur.grad[0] * step[0] + cur.grad[1] * step[1];
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial = [lambda[0] + alpha * step[0], lambda[1] + alpha * step[1]];
            let next = eval_dual(&t, trial, m);
            // near the optimum the dual value is flat to rounding, so a drop in
            // the gradient norm also counts as progress
            let armijo = next.value <= cur.value + 1e-4 * alpha * slope;
            let closer = grad_norm(&next) < (1.0 - 1e-4 * alpha) * grad_norm(&cur);
            if next.value.is_finite() && (armijo || closer) {
                accepted = Some((trial, next));
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((trial, next)) => {
                lambda = trial;
                cur = next;
            }
            // no decrease representable in f64: we are at the numerical optimum
            None => break,
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual,
    })
}

fn grad_norm(e: &DualEval) -> f64 {
    e.grad[0].hypot(e.grad[1])
}

/// Solves `H d = -g`, falling back to a regularized system when `H` is close
/// to singular (mass concentrated on two buckets).
fn newton_step(e: &DualEval) -> [f64; 2] {
    let [h11, h12, h22] = e.hess;
    let [g1, g2] = e.grad;
    let trace = h11 + h22;
    let mut ridge = 0.0;
    loop {
        let a = h11 + ridge;
        let d = h22 + ridge;
        let det = a * d - h12 * h12;
        if det > 1e-14 * trace * trace || ridge > 1e6 {
            return [-(d * g1 - h12 * g2) / det, -(a * g2 - h12 * g1) / det];
        }
        ridge = if ridge == 0.0 {
            1e-12 * trace.max(1e-300)
        } else {
            ridge * 10.0
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ava() -> BucketScale {
        BucketScale::ava()
    }

    #[test]
    fn feasibility_examples() {
        assert!(feasible(&MomentTarget::new(5.5, 4.5, ava())));
        assert!(!feasible(&MomentTarget::new(1.0, 1.0, ava())));
        assert!(feasible(&MomentTarget::new(5.0, 2.0, ava())));
        assert!(!feasible(&MomentTarget::new(0.5, 0.0, ava())));
        assert!(!feasible(&MomentTarget::new(5.0, -1.0, ava())));
        assert!(!feasible(&MomentTarget::new(f64::NAN, 1.0, ava())));
        // mean 5.3 needs at least variance 0.21 on an integer lattice
        assert!(!feasible(&MomentTarget::new(5.3, 0.1, ava())));
        assert!(feasible(&MomentTarget::new(5.3, 0.0, ava())));
    }

    #[test]
    fn uniform_target_gives_zero_multipliers() {
        let t = MomentTarget::new(5.5, 8.25f64.sqrt(), ava());
        let sol = fit_maxent_default(&t).unwrap();
        assert!(sol.lambda1.abs() <= 1e-8 && sol.lambda2.abs() <= 1e-8);
        for m in sol.dist.mass() {
            assert!((m - 0.1).abs() < 1e-9);
        }
        // the rounded target still lands within the uniform distribution's neighborhood
        let t = MomentTarget::new(5.5, 2.872281, ava());
        let sol = fit_maxent_default(&t).unwrap();
        assert!(sol.lambda1.abs() <= 1e-6 && sol.lambda2.abs() <= 1e-6);
    }

    #[test]
    fn zero_sigma_branches() {
        let sol = fit_maxent_default(&MomentTarget::new(7.0, 0.0, ava())).unwrap();
        assert_eq!(sol.kind, SolutionKind::PointMass);
        assert_eq!(sol.dist.mass()[6], 1.0);
        assert_eq!(sol.residual, 0.0);

        let sol = fit_maxent_default(&MomentTarget::new(7.25, 0.0, ava())).unwrap();
        assert_eq!(sol.kind, SolutionKind::Adjacent);
        assert!((sol.dist.mean() - 7.25).abs() < 1e-12);
        assert!((sol.residual - 0.1875f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn extreme_and_lattice_boundaries() {
        let sol = fit_maxent_default(&MomentTarget::new(5.5, 4.5, ava())).unwrap();
        assert_eq!(sol.kind, SolutionKind::Extremes);
        assert_eq!(sol.dist.mass()[0], 0.5);
        assert_eq!(sol.dist.mass()[9], 0.5);

        let sol = fit_maxent_default(&MomentTarget::new(5.5, 0.5, ava())).unwrap();
        assert_eq!(sol.kind, SolutionKind::Adjacent);
        assert!(sol.residual < 1e-12);

        let sol = fit_maxent_default(&MomentTarget::new(10.0, 0.0, ava())).unwrap();
        assert_eq!(sol.dist.mass()[9], 1.0);
    }

    #[test]
    fn fig2_moments_round_trip() {
        for (mu, sigma) in [(7.84, 2.08), (6.36, 1.04), (2.62, 2.15), (3.12, 1.28)] {
            let sol = fit_maxent_default(&MomentTarget::new(mu, sigma, ava())).unwrap();
            assert!((sol.dist.mean() - mu).abs() <= 1e-6);
            assert!((sol.dist.std_dev() - sigma).abs() <= 1e-6);
            assert_eq!(sol.kind, SolutionKind::ExponentialFamily);
        }
    }

    #[test]
    fn solution_is_exponential_family() {
        let sol = fit_maxent_default(&MomentTarget::new(3.3, 1.7, BucketScale::tid())).unwrap();
        let s = sol.dist.scale().values();
        let logits: Vec<f64> = s
            .iter()
            .map(|x| sol.lambda1 * x + sol.lambda2 * x * x)
            .collect();
        let q = crate::dist::softmax_slice(&logits).unwrap();
        for (a, b) in q.iter().zip(sol.dist.mass()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_infeasible_and_bad_tolerance() {
        let err = fit_maxent_default(&MomentTarget::new(1.0, 3.0, ava())).unwrap_err();
        assert!(matches!(err, Error::InfeasibleMoments { .. }));
        assert!(fit_maxent(&MomentTarget::new(5.0, 2.0, ava()), 0.0, 10).is_err());
    }

    #[test]
    fn reports_non_convergence() {
        let err = fit_maxent(&MomentTarget::new(8.7, 0.9, ava()), 1e-12, 1).unwrap_err();
        assert!(matches!(err, Error::NoConvergence { iterations: 1, .. }));
    }

    #[test]
    fn deterministic() {
        let t = MomentTarget::new(6.123, 1.777, ava());
        let a = fit_maxent_default(&t).unwrap();
        let b = fit_maxent_default(&t).unwrap();
        assert_eq!(a, b);
    }
}
