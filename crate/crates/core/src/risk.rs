//! Entropic risk measure, its KL penalty, and the exponentially tilted
//! distributions that attain the dual supremum.
//!
//! The soft value exposed here is `β⁻¹ log Σₐ π(a) e^{β q(a)}`, i.e. the
//! risk-seeking certainty equivalent of `q` under `π`. All exponentials are
//! shifted by the maximum of `q` over the support of `π`, so inputs are safe
//! as long as `|β·q| ≤ 700`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `Σ weights = 1` accepted by [`Distribution::new`].
pub const SUM_TOLERANCE: f64 = 1e-12;

/// Tolerance used by [`duality_check`] for the Fenchel inequality and for
/// attainment at the tilt.
pub const DUALITY_TOLERANCE: f64 = 1e-9;

/// A probability vector over a finite index set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Distribution(Vec<f64>);

impl Distribution {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        Self::with_tolerance(weights, SUM_TOLERANCE)
    }

    pub fn with_tolerance(weights: Vec<f64>, tol: f64) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidDistribution("empty weight vector".into()));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "weight {w} is not a finite non-negative number"
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > tol {
            return Err(Error::InvalidDistribution(format!("weights sum to {total}")));
        }
        Ok(Self(weights))
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform distribution over an empty set");
        Self(vec![1.0 / n as f64; n])
    }

    /// Point mass at `index`.
    pub fn point(n: usize, index: usize) -> Self {
        assert!(index < n);
        let mut w = vec![0.0; n];
        w[index] = 1.0;
        Self(w)
    }

    /// Wraps weights already known to be a distribution (internal results).
    pub(crate) fn from_raw(weights: Vec<f64>) -> Self {
        Self(weights)
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn expectation(&self, values: &[f64]) -> f64 {
        self.0.iter().zip(values).map(|(p, v)| p * v).sum()
    }
}

impl TryFrom<Vec<f64>> for Distribution {
    type Error = Error;

    fn try_from(weights: Vec<f64>) -> Result<Self> {
        Self::new(weights)
    }
}

impl From<Distribution> for Vec<f64> {
    fn from(d: Distribution) -> Self {
        d.0
    }
}

impl std::ops::Index<usize> for Distribution {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Risk-seeking temperature `β > 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct RiskParams {
    beta: f64,
}

impl RiskParams {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "beta must be positive and finite, got {beta}"
            )));
        }
        Ok(Self { beta })
    }

    pub fn beta(self) -> f64 {
        self.beta
    }
}

impl TryFrom<f64> for RiskParams {
    type Error = Error;

    fn try_from(beta: f64) -> Result<Self> {
        Self::new(beta)
    }
}

impl From<RiskParams> for f64 {
    fn from(p: RiskParams) -> Self {
        p.beta
    }
}

fn check_lengths(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Dimension { expected, found });
    }
    Ok(())
}

fn check_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Entropic soft value `β⁻¹ log Σₐ π(a) e^{β q(a)}`.
pub fn soft_value(pi: &Distribution, q: &[f64], params: RiskParams) -> Result<f64> {
    check_lengths(pi.len(), q.len())?;
    check_finite(q, "q")?;
    Ok(soft_value_raw(pi.weights(), q, params.beta()))
}

/// Unchecked soft value over raw weights.
///
/// Written as `m + β⁻¹ log1p(Σ π (e^{β(q−m)} − 1) + (Σπ − 1))` with `m` the
/// support maximum, which keeps full relative precision as `β → 0` and
/// tolerates weights that are off-normalized by rounding.
pub(crate) fn soft_value_raw(pi: &[f64], q: &[f64], beta: f64) -> f64 {
    let mut top = f64::NEG_INFINITY;
    for (&p, &v) in pi.iter().zip(q) {
        if p > 0.0 && v > top {
            top = v;
        }
    }
    if top == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut acc = 0.0;
    let mut mass = 0.0;
    for (&p, &v) in pi.iter().zip(q) {
        if p > 0.0 {
            acc += p * (beta * (v - top)).exp_m1();
            mass += p;
        }
    }
    top + (acc + (mass - 1.0)).ln_1p() / beta
}

/// `KL(p̂ ‖ p)` with `0 log 0 = 0`; `f64::INFINITY` when `p̂` puts mass where
/// `p` has none.
pub fn kl_divergence(p_hat: &Distribution, p: &Distribution) -> Result<f64> {
    check_lengths(p.len(), p_hat.len())?;
    Ok(kl_divergence_raw(p_hat.weights(), p.weights()))
}

pub(crate) fn kl_divergence_raw(p_hat: &[f64], p: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&a, &b) in p_hat.iter().zip(p) {
        if a > 0.0 {
            if b <= 0.0 {
                return f64::INFINITY;
            }
            total += a * (a / b).ln();
        }
    }
    total
}

/// Normalized tilt `π̂(a) ∝ π(a) e^{β q(a)}`.
pub fn tilted_distribution(pi: &Distribution, q: &[f64], params: RiskParams) -> Result<Distribution> {
    check_lengths(pi.len(), q.len())?;
    check_finite(q, "q")?;
    let mut out = vec![0.0; q.len()];
    tilt_into(pi.weights(), q, params.beta(), &mut out)?;
    Ok(Distribution(out))
}

pub(crate) fn tilt_into(pi: &[f64], q: &[f64], beta: f64, out: &mut [f64]) -> Result<()> {
    let top = pi
        .iter()
        .zip(q)
        .filter(|(p, _)| **p > 0.0)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return Err(Error::DegenerateDistribution);
    }
    let mut total = 0.0;
    for ((o, &p), &v) in out.iter_mut().zip(pi).zip(q) {
        *o = if p > 0.0 { p * (beta * (v - top)).exp() } else { 0.0 };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualityReport {
    /// `max over candidates of E_{π̂}q − β⁻¹KL(π̂‖π) − soft_value`; `-inf`
    /// when there are no candidates or every candidate breaks absolute
    /// continuity.
    pub max_gap: f64,
    /// The same gap evaluated at the tilted distribution.
    pub tilt_gap: f64,
    pub attained_at_tilt: bool,
}

/// Penalized objective `E_{π̂}q − β⁻¹ KL(π̂‖π)`.
pub fn penalized_objective(candidate: &Distribution, pi: &Distribution, q: &[f64], params: RiskParams) -> Result<f64> {
    check_lengths(pi.len(), candidate.len())?;
    check_lengths(pi.len(), q.len())?;
    let kl = kl_divergence_raw(candidate.weights(), pi.weights());
    if kl.is_infinite() {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(candidate.expectation(q) - kl / params.beta())
}

/// Checks the Fenchel inequality `soft_value ≥ E_{π̂}q − β⁻¹KL(π̂‖π)` over
/// `candidates`, and that the tilted distribution attains it with equality.
pub fn duality_check(
    pi: &Distribution,
    q: &[f64],
    params: RiskParams,
    candidates: &[Distribution],
) -> Result<DualityReport> {
    check_lengths(pi.len(), q.len())?;
    check_finite(q, "q")?;
    let value = soft_value_raw(pi.weights(), q, params.beta());
    let mut max_gap = f64::NEG_INFINITY;
    for c in candidates {
        let gap = penalized_objective(c, pi, q, params)? - value;
        max_gap = max_gap.max(gap);
    }
    let tilt = tilted_distribution(pi, q, params)?;
    let tilt_gap = penalized_objective(&tilt, pi, q, params)? - value;
    let attained_at_tilt = tilt_gap.abs() <= DUALITY_TOLERANCE && tilt_gap >= max_gap - DUALITY_TOLERANCE;
    Ok(DualityReport {
        max_gap,
        tilt_gap,
        attained_at_tilt,
    })
}

/// Every point of the simplex over `n` actions whose coordinates are
/// multiples of `1/resolution`.
pub fn simplex_grid(n: usize, resolution: usize) -> Vec<Distribution> {
    fn fill(slot: usize, remaining: usize, resolution: usize, current: &mut Vec<usize>, out: &mut Vec<Distribution>) {
        if slot + 1 == current.len() {
            current[slot] = remaining;
            out.push(Distribution(
                current.iter().map(|&k| k as f64 / resolution as f64).collect(),
            ));
            return;
        }
        for k in 0..=remaining {
            current[slot] = k;
            fill(slot + 1, remaining - k, resolution, current, out);
        }
    }
    let mut out = Vec::new();
    if n == 0 || resolution == 0 {
        return out;
    }
    let mut current = vec![0; n];
    fill(0, resolution, resolution, &mut current, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn beta(b: f64) -> RiskParams {
        RiskParams::new(b).unwrap()
    }

    fn dist(w: &[f64]) -> Distribution {
        Distribution::new(w.to_vec()).unwrap()
    }

    #[test]
    fn soft_value_of_constant_is_the_constant() {
        let v = soft_value(&dist(&[0.5, 0.5]), &[1.0, 1.0], beta(1.0)).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn soft_value_two_point_closed_form() {
        // log((1 + e) / 2) evaluated in extended precision.
        let v = soft_value(&dist(&[0.5, 0.5]), &[0.0, 1.0], beta(1.0)).unwrap();
        assert!((v - 0.620_114_506_958_277_5).abs() < 1e-14, "{v}");
    }

    #[test]
    fn soft_value_small_beta_near_mean() {
        let pi = dist(&[0.3, 0.7]);
        let q = [2.0, -1.0];
        let v = soft_value(&pi, &q, beta(0.04)).unwrap();
        assert!((v - (-0.1)).abs() <= 0.04 * 9.0 / 2.0);
    }

    #[test]
    fn soft_value_survives_large_exponents() {
        let v = soft_value(&dist(&[0.5, 0.5]), &[700.0, 699.0], beta(1.0)).unwrap();
        assert!(v.is_finite());
        assert!(v < 700.0 && v > 699.0);
        let v = soft_value(&dist(&[0.5, 0.5]), &[-700.0, -699.0], beta(1.0)).unwrap();
        assert!(v.is_finite());
    }

    #[test]
    fn soft_value_rejects_bad_input() {
        assert!(matches!(
            soft_value(&dist(&[1.0]), &[1.0, 2.0], beta(1.0)),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            soft_value(&dist(&[0.5, 0.5]), &[f64::NAN, 2.0], beta(1.0)),
            Err(Error::NonFinite(_))
        ));
        assert!(RiskParams::new(0.0).is_err());
        assert!(RiskParams::new(-1.0).is_err());
    }

    #[test]
    fn kl_cases() {
        let p = dist(&[0.2, 0.3, 0.5]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let v = kl_divergence(&dist(&[1.0, 0.0]), &dist(&[0.5, 0.5])).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(
            kl_divergence(&dist(&[0.5, 0.5]), &dist(&[1.0, 0.0])).unwrap(),
            f64::INFINITY
        );
        assert!(kl_divergence(&dist(&[1.0]), &p).is_err());
    }

    #[test]
    fn tilt_cases() {
        let pi = dist(&[0.2, 0.8]);
        assert_eq!(tilted_distribution(&pi, &[3.0, 3.0], beta(2.0)).unwrap(), pi);

        let t = tilted_distribution(&dist(&[0.5, 0.5]), &[0.0, 1.0], beta(1.0)).unwrap();
        let e = std::f64::consts::E;
        assert!((t[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((t[1] - e / (1.0 + e)).abs() < 1e-15);
        assert!((t[0] - 0.268_941).abs() < 1e-6);

        let t = tilted_distribution(&dist(&[1.0, 0.0]), &[-5.0, 100.0], beta(1.0)).unwrap();
        assert_eq!(t.weights(), &[1.0, 0.0]);
    }

    #[test]
    fn tilt_of_degenerate_weights_fails() {
        let mut out = [0.0; 2];
        assert!(matches!(
            tilt_into(&[0.0, 0.0], &[1.0, 2.0], 1.0, &mut out),
            Err(Error::DegenerateDistribution)
        ));
    }

    #[test]
    fn distribution_validation() {
        assert!(Distribution::new(vec![]).is_err());
        assert!(Distribution::new(vec![0.5, 0.6]).is_err());
        assert!(Distribution::new(vec![1.5, -0.5]).is_err());
        assert!(Distribution::new(vec![0.5, f64::NAN]).is_err());
        let d: Distribution = serde_json::from_str("[0.25, 0.75]").unwrap();
        assert_eq!(d.weights(), &[0.25, 0.75]);
        assert!(serde_json::from_str::<Distribution>("[0.25, 0.5]").is_err());
    }

    #[test]
    fn duality_constant_case() {
        let pi = dist(&[0.4, 0.6]);
        let r = duality_check(&pi, &[2.0, 2.0], beta(1.0), std::slice::from_ref(&pi)).unwrap();
        assert!(r.max_gap.abs() < 1e-15);
        assert!(r.attained_at_tilt);
    }

    #[test]
    fn duality_grid_and_tilt() {
        let pi = dist(&[0.2, 0.5, 0.3]);
        let q = [0.7, -1.3, 2.1];
        let params = beta(1.7);
        let mut candidates = simplex_grid(3, 44);
        assert!(candidates.len() >= 1000);
        let tilt = tilted_distribution(&pi, &q, params).unwrap();
        candidates.push(tilt);
        let r = duality_check(&pi, &q, params, &candidates).unwrap();
        assert!(r.max_gap <= DUALITY_TOLERANCE, "{r:?}");
        assert!(r.tilt_gap.abs() <= DUALITY_TOLERANCE);
        assert!(r.attained_at_tilt);
    }

    #[test]
    fn simplex_grid_counts() {
        // C(n + k - 1, k) points.
        assert_eq!(simplex_grid(3, 4).len(), 15);
        assert_eq!(simplex_grid(2, 10).len(), 11);
        assert!(simplex_grid(3, 7)
            .iter()
            .all(|d| (d.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12));
    }

    fn arb_case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64)> {
        (1usize..6)
            .prop_flat_map(|n| {
                (
                    prop::collection::vec(0.0f64..1.0, n),
                    prop::collection::vec(-20.0f64..20.0, n),
                    0.01f64..5.0,
                )
            })
            .prop_filter_map("needs positive mass", |(w, q, b)| {
                let total: f64 = w.iter().sum();
                (total > 1e-3).then(|| (w.iter().map(|x| x / total).collect(), q, b))
            })
    }

    proptest! {
        #[test]
        fn translation_invariance((w, q, b) in arb_case(), shift in -50.0f64..50.0) {
            let pi = Distribution::from_raw(w);
            let shifted: Vec<f64> = q.iter().map(|x| x + shift).collect();
            let a = soft_value(&pi, &q, beta(b)).unwrap();
            let c = soft_value(&pi, &shifted, beta(b)).unwrap();
            prop_assert!((c - a - shift).abs() <= 1e-10 * (1.0 + a.abs() + shift.abs()));
        }

        #[test]
        fn monotone_in_q((w, q, b) in arb_case(), bump in prop::collection::vec(0.0f64..3.0, 6)) {
            let pi = Distribution::from_raw(w);
            let higher: Vec<f64> = q.iter().zip(&bump).map(|(x, d)| x + d).collect();
            let lo = soft_value(&pi, &q, beta(b)).unwrap();
            let hi = soft_value(&pi, &higher, beta(b)).unwrap();
            prop_assert!(hi >= lo - 1e-12);
        }

        #[test]
        fn between_mean_and_support_max((w, q, b) in arb_case()) {
            let pi = Distribution::from_raw(w.clone());
            let v = soft_value(&pi, &q, beta(b)).unwrap();
            let mean = pi.expectation(&q);
            let support_max = w.iter().zip(&q).filter(|(p, _)| **p > 0.0).map(|(_, x)| *x).fold(f64::NEG_INFINITY, f64::max);
            let range = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - q.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert!(v >= mean - 1e-9);
            prop_assert!(v <= support_max + 1e-9);
            prop_assert!((v - mean).abs() <= b * range * range / 2.0 + 1e-9);
        }

        #[test]
        fn tilt_is_a_distribution_on_the_support((w, q, b) in arb_case(), zero in 0usize..6) {
            let mut w = w;
            if w.len() > 1 {
                let k = zero % w.len();
                w[k] = 0.0;
                let total: f64 = w.iter().sum();
                prop_assume!(total > 0.0);
                for x in w.iter_mut() { *x /= total; }
            }
            let pi = Distribution::from_raw(w.clone());
            let t = tilted_distribution(&pi, &q, beta(b)).unwrap();
            prop_assert!((t.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (p, x) in w.iter().zip(t.weights()) {
                prop_assert!(*x >= 0.0);
                if *p == 0.0 { prop_assert_eq!(*x, 0.0); }
            }
        }

        #[test]
        fn fenchel_inequality((w, q, b) in arb_case(), raw in prop::collection::vec(0.0f64..1.0, 6)) {
            let n = w.len();
            let pi = Distribution::from_raw(w);
            let total: f64 = raw[..n].iter().sum();
            prop_assume!(total > 1e-6);
            let cand = Distribution::from_raw(raw[..n].iter().map(|x| x / total).collect());
            let r = duality_check(&pi, &q, beta(b), &[cand]).unwrap();
            prop_assert!(r.max_gap <= DUALITY_TOLERANCE);
            prop_assert!(r.attained_at_tilt);
        }
    }
}
