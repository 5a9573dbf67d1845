//! Ordered score distributions, their moments, and the EMD family of
//! distances between them.
//!
//! The EMD here is the closed form for distributions over the same ordered
//! buckets: the r-norm of the difference of the two CDFs, averaged over the
//! bucket count. Distances are measured in bucket *indices*; the bucket
//! values only enter through [`mean`] and [`std_dev`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest deviation of the total mass from 1 that construction will silently
/// renormalize.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-6;

/// Ordered bucket values `s_1 < s_2 < ... < s_N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketScale {
    values: Vec<f64>,
}

impl BucketScale {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidScale(format!(
                "need at least 2 buckets, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("bucket scale"));
        }
        if let Some(i) = values.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::InvalidScale(format!(
                "values not strictly increasing at bucket {}",
                i + 2
            )));
        }
        Ok(Self { values })
    }

    /// Integer buckets `lo, lo+1, ..., hi`.
    pub fn integer_range(lo: i32, hi: i32) -> Result<Self> {
        Self::new((lo..=hi).map(f64::from).collect())
    }

    /// AVA-style 1..10.
    pub fn ava() -> Self {
        Self::integer_range(1, 10).expect("static scale")
    }

    /// TID2013-style 0..9.
    pub fn tid() -> Self {
        Self::integer_range(0, 9).expect("static scale")
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn first(&self) -> f64 {
        self.values[0]
    }

    pub fn last(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    /// Index of the bucket whose value equals `v` exactly.
    pub fn position(&self, v: f64) -> Option<usize> {
        self.values.iter().position(|&s| s == v)
    }
}

/// Probability mass over the buckets of a [`BucketScale`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    scale: BucketScale,
    mass: Vec<f64>,
}

impl ScoreDistribution {
    /// Builds a distribution from probabilities. Totals within
    /// [`RENORMALIZE_TOLERANCE`] of 1 are renormalized; anything else is
    /// rejected.
    pub fn new(scale: BucketScale, mass: Vec<f64>) -> Result<Self> {
        check_mass_shape(&scale, &mass)?;
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > RENORMALIZE_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "mass sums to {total}, not 1"
            )));
        }
        Ok(Self::normalized(scale, mass, total))
    }

    /// Builds a distribution from nonnegative weights of any positive total
    /// (e.g. rating counts).
    pub fn from_weights(scale: BucketScale, weights: Vec<f64>) -> Result<Self> {
        check_mass_shape(&scale, &weights)?;
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidDistribution("total weight is zero".into()));
        }
        Ok(Self::normalized(scale, weights, total))
    }

    fn normalized(scale: BucketScale, mut mass: Vec<f64>, total: f64) -> Self {
        if total != 1.0 {
            mass.iter_mut().for_each(|m| *m /= total);
        }
        Self { scale, mass }
    }

    pub fn point_mass(scale: BucketScale, bucket: usize) -> Result<Self> {
        if bucket >= scale.len() {
            return Err(Error::InvalidArgument(format!(
                "bucket {bucket} out of range for {} buckets",
                scale.len()
            )));
        }
        let mut mass = vec![0.0; scale.len()];
        mass[bucket] = 1.0;
        Ok(Self { scale, mass })
    }

    pub fn uniform(scale: BucketScale) -> Self {
        let n = scale.len();
        Self {
            scale,
            mass: vec![1.0 / n as f64; n],
        }
    }

    pub fn scale(&self) -> &BucketScale {
        &self.scale
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn mean(&self) -> f64 {
        mean(self)
    }

    pub fn std_dev(&self) -> f64 {
        std_dev(self)
    }

    pub fn cdf(&self) -> Vec<f64> {
        cdf(self)
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.mass
            .iter()
            .filter(|&&m| m > 0.0)
            .map(|&m| -m * m.ln())
            .sum()
    }
}

fn check_mass_shape(scale: &BucketScale, mass: &[f64]) -> Result<()> {
    if mass.len() != scale.len() {
        return Err(Error::LengthMismatch {
            expected: scale.len(),
            got: mass.len(),
        });
    }
    if mass.iter().any(|m| !m.is_finite()) {
        return Err(Error::NonFinite("probability mass"));
    }
    if let Some(i) = mass.iter().position(|&m| m < 0.0) {
        return Err(Error::InvalidDistribution(format!(
            "negative mass {} at bucket {}",
            mass[i],
            i + 1
        )));
    }
    Ok(())
}

/// Pre-softmax activations of the scoring head.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(pub Vec<f64>);

impl Logits {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for Logits {
    fn from(v: Vec<f64>) -> Self {
        Logits(v)
    }
}

/// `Σ s_i p_i`.
pub fn mean(d: &ScoreDistribution) -> f64 {
    let m: f64 = d.scale.values.iter().zip(&d.mass).map(|(s, p)| s * p).sum();
    // rounding can push the sum a few ulps past the ends of the scale
    m.clamp(d.scale.first(), d.scale.last())
}

/// `(Σ (s_i - μ)² p_i)^½`.
pub fn std_dev(d: &ScoreDistribution) -> f64 {
    let mu = mean(d);
    d.scale
        .values
        .iter()
        .zip(&d.mass)
        .map(|(s, p)| (s - mu) * (s - mu) * p)
        .sum::<f64>()
        .sqrt()
}

/// Running sum of the mass; the last element is pinned to exactly 1.
pub fn cdf(d: &ScoreDistribution) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out: Vec<f64> = d
        .mass
        .iter()
        .map(|m| {
            acc += m;
            acc
        })
        .collect();
    if let Some(last) = out.last_mut() {
        *last = 1.0;
    }
    out
}

/// Normalized earth mover's distance
/// `((1/N) Σ_k |CDF_p(k) - CDF_q(k)|^r)^(1/r)`.
pub fn emd(p: &ScoreDistribution, q: &ScoreDistribution, r: f64) -> Result<f64> {
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "EMD exponent must be positive, got {r}"
        )));
    }
    if p.scale != q.scale {
        return Err(Error::ScaleMismatch);
    }
    let n = p.len() as f64;
    let sum: f64 = cdf(p)
        .iter()
        .zip(cdf(q))
        .map(|(a, b)| (a - b).abs().powf(r))
        .sum();
    Ok((sum / n).powf(1.0 / r))
}

/// Numerically stable softmax of a raw slice.
pub fn softmax_slice(z: &[f64]) -> Result<Vec<f64>> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}

/// Softmax of `z` as a distribution on `scale`.
pub fn softmax(scale: &BucketScale, z: &Logits) -> Result<ScoreDistribution> {
    if z.len() != scale.len() {
        return Err(Error::LengthMismatch {
            expected: scale.len(),
            got: z.len(),
        });
    }
    let mass = softmax_slice(&z.0)?;
    Ok(ScoreDistribution {
        scale: scale.clone(),
        mass,
    })
}

fn check_logits(p: &ScoreDistribution, z: &Logits) -> Result<()> {
    if z.len() != p.len() {
        return Err(Error::LengthMismatch {
            expected: p.len(),
            got: z.len(),
        });
    }
    Ok(())
}

/// Training loss: the r = 2 EMD squared,
/// `(1/N) Σ_k (CDF_p(k) - CDF_q(k))²` with `q = softmax(z)`.
pub fn squared_emd_loss(p: &ScoreDistribution, z: &Logits) -> Result<f64> {
    check_logits(p, z)?;
    let q = softmax_slice(&z.0)?;
    let n = p.len() as f64;
    let mut cp = 0.0;
    let mut cq = 0.0;
    let mut sum = 0.0;
    for (a, b) in p.mass.iter().zip(&q) {
        cp += a;
        cq += b;
        sum += (cq - cp) * (cq - cp);
    }
    Ok(sum / n)
}

/// Gradient of [`squared_emd_loss`] with respect to the logits.
///
/// With `g_i = (2/N) Σ_{k≥i} (CDF_q(k) - CDF_p(k))` the gradient in
/// probability space, the softmax Jacobian gives
/// `∂L/∂z_j = q_j (g_j - Σ_i q_i g_i)`.
pub fn squared_emd_grad(p: &ScoreDistribution, z: &Logits) -> Result<Vec<f64>> {
    check_logits(p, z)?;
    let q = softmax_slice(&z.0)?;
    let n = p.len();
    let mut diff = vec![0.0; n];
    let (mut cp, mut cq) = (0.0, 0.0);
    for k in 0..n {
        cp += p.mass[k];
        cq += q[k];
        diff[k] = cq - cp;
    }
    let mut g = vec![0.0; n];
    let mut tail = 0.0;
    for k in (0..n).rev() {
        tail += diff[k];
        g[k] = 2.0 * tail / n as f64;
    }
    Ok(softmax_backward(&q, &g))
}

/// Soft-label cross-entropy `-Σ p_i ln q_i`, `q = softmax(z)`.
pub fn cross_entropy_loss(p: &ScoreDistribution, z: &Logits) -> Result<f64> {
    check_logits(p, z)?;
    if z.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let max = z.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_total = z.0.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    Ok(p.mass
        .iter()
        .zip(&z.0)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, zi)| -pi * (zi - log_total))
        .sum())
}

/// Gradient of [`cross_entropy_loss`]: `softmax(z) - p`.
pub fn cross_entropy_grad(p: &ScoreDistribution, z: &Logits) -> Result<Vec<f64>> {
    check_logits(p, z)?;
    let q = softmax_slice(&z.0)?;
    Ok(q.iter().zip(&p.mass).map(|(a, b)| a - b).collect())
}

/// Pulls a probability-space gradient back through softmax.
pub(crate) fn softmax_backward(q: &[f64], g: &[f64]) -> Vec<f64> {
    let dot: f64 = q.iter().zip(g).map(|(a, b)| a * b).sum();
    q.iter().zip(g).map(|(qi, gi)| qi * (gi - dot)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ava() -> BucketScale {
        BucketScale::ava()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn scale_validation() {
        assert!(BucketScale::new(vec![1.0]).is_err());
        assert!(BucketScale::new(vec![1.0, 1.0]).is_err());
        assert!(BucketScale::new(vec![2.0, 1.0]).is_err());
        assert!(BucketScale::new(vec![0.0, f64::NAN]).is_err());
        assert_eq!(BucketScale::tid().first(), 0.0);
        assert_eq!(BucketScale::tid().last(), 9.0);
    }

    #[test]
    fn construction_renormalizes_or_rejects() {
        let s = BucketScale::integer_range(1, 3).unwrap();
        let d = ScoreDistribution::new(s.clone(), vec![0.2, 0.3, 0.5 + 5e-7]).unwrap();
        assert!(close(d.mass().iter().sum(), 1.0, 1e-15));
        assert!(ScoreDistribution::new(s.clone(), vec![0.2, 0.3, 0.6]).is_err());
        assert!(ScoreDistribution::new(s.clone(), vec![-0.1, 0.6, 0.5]).is_err());
        assert!(ScoreDistribution::new(s.clone(), vec![0.5, 0.5]).is_err());
        assert!(ScoreDistribution::from_weights(s, vec![0.0; 3]).is_err());
    }

    #[test]
    fn mean_examples() {
        let d = ScoreDistribution::point_mass(ava(), 6).unwrap();
        assert_eq!(mean(&d), 7.0);
        assert!(close(mean(&ScoreDistribution::uniform(ava())), 5.5, 1e-12));
        let counts = vec![0., 1., 5., 17., 38., 36., 15., 6., 5., 1.];
        let d = ScoreDistribution::from_weights(ava(), counts).unwrap();
        assert!(close(mean(&d), 699.0 / 124.0, 1e-12));
        assert!(close(mean(&d), 5.637096, 1e-6));
    }

    #[test]
    fn std_examples() {
        for b in 0..10 {
            let d = ScoreDistribution::point_mass(ava(), b).unwrap();
            assert_eq!(std_dev(&d), 0.0);
        }
        let mut m = vec![0.0; 10];
        m[0] = 0.5;
        m[9] = 0.5;
        let d = ScoreDistribution::new(ava(), m).unwrap();
        assert!(close(std_dev(&d), 4.5, 1e-12));
        let u = ScoreDistribution::uniform(ava());
        assert!(close(std_dev(&u), 8.25f64.sqrt(), 1e-12));
        assert!(close(std_dev(&u), 2.872281, 1e-6));
    }

    #[test]
    fn cdf_examples() {
        let s4 = BucketScale::integer_range(1, 4).unwrap();
        let d = ScoreDistribution::point_mass(s4.clone(), 0).unwrap();
        assert_eq!(cdf(&d), vec![1.0; 4]);
        assert_eq!(
            cdf(&ScoreDistribution::uniform(s4)),
            vec![0.25, 0.5, 0.75, 1.0]
        );
        let s3 = BucketScale::integer_range(1, 3).unwrap();
        let d = ScoreDistribution::new(s3, vec![0.2, 0.3, 0.5]).unwrap();
        let c = cdf(&d);
        assert!(close(c[0], 0.2, 1e-15) && close(c[1], 0.5, 1e-15) && c[2] == 1.0);
    }

    #[test]
    fn emd_examples() {
        let u = ScoreDistribution::uniform(ava());
        assert_eq!(emd(&u, &u, 2.0).unwrap(), 0.0);
        let a = ScoreDistribution::point_mass(ava(), 0).unwrap();
        let b = ScoreDistribution::point_mass(ava(), 1).unwrap();
        assert!(close(emd(&a, &b, 2.0).unwrap(), 0.1f64.sqrt(), 1e-15));
        let c = ScoreDistribution::point_mass(ava(), 9).unwrap();
        assert!(close(emd(&a, &c, 1.0).unwrap(), 0.9, 1e-15));
    }

    #[test]
    fn emd_rejects_mismatched_scales_and_bad_exponent() {
        let a = ScoreDistribution::uniform(ava());
        let b = ScoreDistribution::uniform(BucketScale::tid());
        assert!(matches!(emd(&a, &b, 1.0), Err(Error::ScaleMismatch)));
        assert!(emd(&a, &a, 0.0).is_err());
        assert!(emd(&a, &a, f64::NAN).is_err());
    }

    #[test]
    fn softmax_examples() {
        let d = softmax(&ava(), &Logits(vec![0.0; 10])).unwrap();
        assert!(d.mass().iter().all(|&m| close(m, 0.1, 1e-15)));
        let d = softmax(&ava(), &Logits(vec![1000.0; 10])).unwrap();
        assert!(d.mass().iter().all(|&m| close(m, 0.1, 1e-15)));
        let s3 = BucketScale::integer_range(1, 3).unwrap();
        let z = Logits(vec![1f64.ln(), 2f64.ln(), 3f64.ln()]);
        let d = softmax(&s3, &z).unwrap();
        for (m, e) in d.mass().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!(close(*m, e, 1e-15));
        }
        assert!(softmax(&s3, &Logits(vec![0.0, f64::INFINITY, 0.0])).is_err());
        assert!(softmax(&s3, &Logits(vec![0.0, 1.0])).is_err());
    }

    #[test]
    fn loss_examples() {
        let u = ScoreDistribution::uniform(ava());
        assert!(close(
            squared_emd_loss(&u, &Logits(vec![0.3; 10])).unwrap(),
            0.0,
            1e-30
        ));
        let s2 = BucketScale::integer_range(1, 2).unwrap();
        let p = ScoreDistribution::point_mass(s2, 0).unwrap();
        assert!(close(
            squared_emd_loss(&p, &Logits(vec![0.0, 0.0])).unwrap(),
            0.125,
            1e-15
        ));
        assert!(squared_emd_loss(&p, &Logits(vec![0.0; 3])).is_err());
        assert!(squared_emd_grad(&p, &Logits(vec![0.0; 3])).is_err());
    }

    #[test]
    fn loss_matches_squared_emd() {
        let z = Logits(vec![0.3, -1.0, 2.0, 0.1, 0.0, -0.5, 1.2, 0.7, -2.0, 0.4]);
        let p = ScoreDistribution::from_weights(ava(), (1..=10).map(f64::from).collect()).unwrap();
        let q = softmax(&ava(), &z).unwrap();
        let e = emd(&p, &q, 2.0).unwrap();
        assert!(close(squared_emd_loss(&p, &z).unwrap(), e * e, 1e-15));
    }

    #[test]
    fn grad_zero_at_minimum_and_shift_invariant() {
        let z = Logits(vec![0.3, -1.0, 2.0, 0.1, 0.0, -0.5, 1.2, 0.7, -2.0, 0.4]);
        let p = softmax(&ava(), &z).unwrap();
        let g = squared_emd_grad(&p, &z).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));

        let p = ScoreDistribution::uniform(ava());
        let g = squared_emd_grad(&p, &z).unwrap();
        let shifted = Logits(z.0.iter().map(|v| v + 3.5).collect());
        let gs = squared_emd_grad(&p, &shifted).unwrap();
        for (a, b) in g.iter().zip(&gs) {
            assert!(close(*a, *b, 1e-14));
        }
        assert!(g.iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_consistency() {
        let z = Logits(vec![0.3, -1.0, 2.0, 0.1, 0.0, -0.5, 1.2, 0.7, -2.0, 0.4]);
        let p = ScoreDistribution::uniform(ava());
        let h = 1e-6;
        let g = cross_entropy_grad(&p, &z).unwrap();
        for j in 0..10 {
            let mut zp = z.clone();
            zp.0[j] += h;
            let mut zm = z.clone();
            zm.0[j] -= h;
            let fd = (cross_entropy_loss(&p, &zp).unwrap() - cross_entropy_loss(&p, &zm).unwrap())
                / (2.0 * h);
            assert!(close(fd, g[j], 1e-8));
        }
    }
}
