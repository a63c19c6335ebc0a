//! Rényi-DP accounting: base mechanism curves, Poisson-subsampling
//! amplification, composition and conversion to (ε, δ).
//!
//! All orders are integers ≥ 2. Curves are plain value types; every function
//! here is pure.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Integer orders 2..=64 plus 128 and 256.
pub fn default_orders() -> Vec<u32> {
    (2..=64).chain([128, 256]).collect()
}

/// Rényi-DP ε (in nats) tabulated on increasing integer orders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    orders: Vec<u32>,
    epsilons: Vec<f64>,
}

impl RdpCurve {
    /// Builds a curve after checking its invariants: matching lengths,
    /// strictly increasing orders ≥ 2, nonnegative finite ε, and
    /// `(α−1)·ε(α)` non-decreasing.
    pub fn new(orders: Vec<u32>, epsilons: Vec<f64>) -> Result<Self> {
        if orders.len() != epsilons.len() {
            return Err(Error::param(format!(
                "{} orders but {} epsilons",
                orders.len(),
                epsilons.len()
            )));
        }
        if orders.is_empty() {
            return Err(Error::param("RDP curve needs at least one order"));
        }
        if orders[0] < 2 {
            return Err(Error::param(format!("orders must be >= 2, got {}", orders[0])));
        }
        if orders.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::param("orders must be strictly increasing"));
        }
        if let Some(bad) = epsilons.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
            return Err(Error::param(format!("RDP epsilon must be finite and >= 0, got {bad}")));
        }
        let scaled: Vec<f64> = orders
            .iter()
            .zip(&epsilons)
            .map(|(&a, &e)| f64::from(a - 1) * e)
            .collect();
        if scaled.windows(2).any(|w| w[1] < w[0] * (1.0 - 1e-9) - 1e-12) {
            return Err(Error::param("(α-1)·ε(α) must be non-decreasing in α"));
        }
        Ok(Self { orders, epsilons })
    }

    fn from_fn(orders: &[u32], f: impl Fn(u32) -> f64) -> Result<Self> {
        check_orders(orders)?;
        Self::new(orders.to_vec(), orders.iter().map(|&a| f(a)).collect())
    }

    pub fn orders(&self) -> &[u32] {
        &self.orders
    }

    pub fn epsilons(&self) -> &[f64] {
        &self.epsilons
    }

    pub fn epsilon_at(&self, order: u32) -> Option<f64> {
        self.orders
            .binary_search(&order)
            .ok()
            .map(|i| self.epsilons[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.orders.iter().copied().zip(self.epsilons.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.orders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orders.is_empty()
    }
}

fn check_orders(orders: &[u32]) -> Result<()> {
    if orders.is_empty() {
        return Err(Error::param("order list is empty"));
    }
    if let Some(a) = orders.iter().find(|&&a| a < 2) {
        return Err(Error::param(format!("orders must be integers >= 2, got {a}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    Gaussian,
    Skellam,
}

impl std::fmt::Display for NoiseFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseFamily::Gaussian => "gaussian",
            NoiseFamily::Skellam => "skellam",
        })
    }
}

impl std::str::FromStr for NoiseFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" => Ok(NoiseFamily::Gaussian),
            "skellam" => Ok(NoiseFamily::Skellam),
            other => Err(Error::param(format!("unknown noise family `{other}`"))),
        }
    }
}

/// Default fixed-point scale for Skellam noise (units per 1.0 of gradient).
pub const DEFAULT_FIXEDPOINT_SCALE: u64 = 1 << 16;

/// A per-step, per-client additive noise mechanism.
///
/// `noise_multiplier` is the Gaussian-equivalent noise std in units of
/// `clip_norm`. For Skellam the Poisson component parameter per coordinate is
/// `μ = (s·C·σ)²/2`, so the noise variance `2μ` matches a Gaussian with std
/// `s·C·σ` in fixed-point units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismSpec {
    pub family: NoiseFamily,
    pub noise_multiplier: f64,
    pub clip_norm: f64,
    #[serde(default = "default_scale")]
    pub fixedpoint_scale: u64,
    #[serde(default = "default_dimension")]
    pub dimension: usize,
}

fn default_scale() -> u64 {
    DEFAULT_FIXEDPOINT_SCALE
}

fn default_dimension() -> usize {
    1
}

impl MechanismSpec {
    pub fn gaussian(noise_multiplier: f64, clip_norm: f64) -> Self {
        Self {
            family: NoiseFamily::Gaussian,
            noise_multiplier,
            clip_norm,
            fixedpoint_scale: 1,
            dimension: 1,
        }
    }

    pub fn skellam(noise_multiplier: f64, clip_norm: f64, fixedpoint_scale: u64, dimension: usize) -> Self {
        Self {
            family: NoiseFamily::Skellam,
            noise_multiplier,
            clip_norm,
            fixedpoint_scale,
            dimension,
        }
    }

    pub fn with_noise_multiplier(self, noise_multiplier: f64) -> Self {
        Self { noise_multiplier, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_multiplier > 0.0 && self.noise_multiplier.is_finite()) {
            return Err(Error::param(format!(
                "noise multiplier must be positive, got {}",
                self.noise_multiplier
            )));
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::param(format!("clip norm must be positive, got {}", self.clip_norm)));
        }
        if self.dimension == 0 {
            return Err(Error::param("dimension must be >= 1"));
        }
        if self.family == NoiseFamily::Skellam {
            if self.fixedpoint_scale == 0 {
                return Err(Error::param("fixed-point scale must be >= 1"));
            }
            let mu = self.poisson_param();
            if !(mu > 0.0 && mu.is_finite()) {
                return Err(Error::param(format!("Skellam Poisson parameter must be finite and > 0, got {mu}")));
            }
        }
        Ok(())
    }

    /// Noise std in gradient units, `σ·C`.
    pub fn noise_std(&self) -> f64 {
        self.noise_multiplier * self.clip_norm
    }

    /// Skellam Poisson-component parameter `(s·C·σ)²/2`.
    pub fn poisson_param(&self) -> f64 {
        let std = self.fixedpoint_scale as f64 * self.noise_std();
        0.5 * std * std
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsamplingSpec {
    pub rate: f64,
}

impl SubsamplingSpec {
    pub fn new(rate: f64) -> Result<Self> {
        let spec = Self { rate };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::param(format!("sampling rate must lie in [0, 1], got {}", self.rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighbourRelation {
    #[default]
    AddRemove,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
    #[serde(default)]
    pub relation: NeighbourRelation,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon >= 0.0 && !epsilon.is_nan()) {
            return Err(Error::param(format!("epsilon must be >= 0, got {epsilon}")));
        }
        if !(0.0..=1.0).contains(&delta) {
            return Err(Error::param(format!("delta must lie in [0, 1], got {delta}")));
        }
        Ok(Self {
            epsilon,
            delta,
            relation: NeighbourRelation::AddRemove,
        })
    }
}

/// Result of converting an RDP curve: the budget and the order that attains it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdpConversion {
    pub budget: PrivacyBudget,
    pub order: u32,
}

/// A base (non-subsampled) mechanism whose RDP can be evaluated at any order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaseMechanism {
    /// Gaussian with noise std `noise_std` and L2 sensitivity `sensitivity`.
    Gaussian { noise_std: f64, sensitivity: f64 },
    /// Skellam with Poisson parameter `mu` and fixed-point sensitivities.
    Skellam { mu: f64, l2: f64, l1: f64 },
}

impl BaseMechanism {
    pub fn epsilon(&self, order: u32) -> f64 {
        let alpha = f64::from(order);
        match *self {
            BaseMechanism::Gaussian { noise_std, sensitivity } => {
                alpha * sensitivity * sensitivity / (2.0 * noise_std * noise_std)
            }
            BaseMechanism::Skellam { mu, l2, l1 } => skellam_epsilon(mu, l2, l1, alpha),
        }
    }

    pub fn curve(&self, orders: &[u32]) -> Result<RdpCurve> {
        RdpCurve::from_fn(orders, |a| self.epsilon(a))
    }
}

/// Skellam RDP upper bound with Poisson parameter `mu` (noise variance `2μ`):
///
/// `ε(α) = αΔ₂²/(4μ) + min(((2α−1)Δ₂² + 6Δ₁)/(16μ²), 3Δ₁/(4μ))`.
fn skellam_epsilon(mu: f64, l2: f64, l1: f64, alpha: f64) -> f64 {
    if l2 == 0.0 && l1 == 0.0 {
        return 0.0;
    }
    let variance = 2.0 * mu;
    let leading = alpha * l2 * l2 / (2.0 * variance);
    let correction = (((2.0 * alpha - 1.0) * l2 * l2 + 6.0 * l1) / (4.0 * variance * variance))
        .min(3.0 * l1 / (2.0 * variance));
    leading + correction
}

/// RDP of the Gaussian mechanism: `ε(α) = α·Δ²/(2(σC)²)`.
pub fn gaussian_rdp(spec: &MechanismSpec, sensitivity: f64, orders: &[u32]) -> Result<RdpCurve> {
    if spec.family != NoiseFamily::Gaussian {
        return Err(Error::param("gaussian_rdp needs a Gaussian mechanism"));
    }
    spec.validate()?;
    if !(sensitivity >= 0.0 && sensitivity.is_finite()) {
        return Err(Error::param(format!("sensitivity must be finite and >= 0, got {sensitivity}")));
    }
    BaseMechanism::Gaussian {
        noise_std: spec.noise_std(),
        sensitivity,
    }
    .curve(orders)
}

/// RDP upper bound of the Skellam mechanism. Sensitivities are in fixed-point
/// units; the L1 sensitivity of an integer vector must be an integer.
pub fn skellam_rdp(spec: &MechanismSpec, l2_sensitivity: f64, l1_sensitivity: f64, orders: &[u32]) -> Result<RdpCurve> {
    if spec.family != NoiseFamily::Skellam {
        return Err(Error::param("skellam_rdp needs a Skellam mechanism"));
    }
    spec.validate()?;
    for (name, v) in [("L2", l2_sensitivity), ("L1", l1_sensitivity)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::param(format!("{name} sensitivity must be finite and >= 0, got {v}")));
        }
    }
    if l1_sensitivity.fract() != 0.0 {
        return Err(Error::param(format!(
            "L1 sensitivity must be an integer in fixed-point units, got {l1_sensitivity}"
        )));
    }
    BaseMechanism::Skellam {
        mu: spec.poisson_param(),
        l2: l2_sensitivity,
        l1: l1_sensitivity,
    }
    .curve(orders)
}

/// Tight RDP amplification by Poisson subsampling at integer orders:
///
/// `ε'(α) = 1/(α−1) · ln Σ_{k=0..α} C(α,k) (1−q)^{α−k} q^k e^{(k−1)ε(k)}`
///
/// with the k = 0, 1 terms carrying `e^0`. The sum is evaluated with
/// log-sum-exp. The result is clamped into `[0, ε(α)]`.
pub fn amplify_poisson<F>(base: F, sampling: SubsamplingSpec, orders: &[u32]) -> Result<RdpCurve>
where
    F: Fn(u32) -> f64,
{
    sampling.validate()?;
    check_orders(orders)?;
    let q = sampling.rate;
    if q == 0.0 {
        return RdpCurve::new(orders.to_vec(), vec![0.0; orders.len()]);
    }
    if q == 1.0 {
        return RdpCurve::from_fn(orders, base);
    }
    let max_order = *orders.iter().max().expect("checked nonempty");
    let base_eps: Vec<f64> = (0..=max_order).map(|k| if k < 2 { 0.0 } else { base(k) }).collect();
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    RdpCurve::from_fn(orders, |alpha| {
        let mut ln_binom = 0.0;
        let mut terms = Vec::with_capacity(alpha as usize + 1);
        for k in 0..=alpha {
            if k > 0 {
                ln_binom += f64::from(alpha - k + 1).ln() - f64::from(k).ln();
            }
            let weight = ln_binom + f64::from(alpha - k) * ln_1mq + f64::from(k) * ln_q;
            let moment = if k < 2 { 0.0 } else { f64::from(k - 1) * base_eps[k as usize] };
            terms.push(weight + moment);
        }
        let amplified = log_sum_exp(&terms) / f64::from(alpha - 1);
        amplified.clamp(0.0, base_eps[alpha as usize])
    })
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Adaptive sequential composition: RDP adds up.
pub fn compose(curve: &RdpCurve, count: u64) -> Result<RdpCurve> {
    if count < 1 {
        return Err(Error::param("composition count must be >= 1"));
    }
    let c = count as f64;
    RdpCurve::new(
        curve.orders.clone(),
        curve.epsilons.iter().map(|e| e * c).collect(),
    )
}

/// Converts RDP to approximate DP: `ε = min_α ε(α) + ln(1/δ)/(α−1)`.
pub fn rdp_to_adp(curve: &RdpCurve, delta: f64) -> Result<AdpConversion> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::param(format!("delta must lie in (0, 1), got {delta}")));
    }
    let ln_inv_delta = -delta.ln();
    let (order, epsilon) = curve
        .iter()
        .map(|(a, e)| (a, e + ln_inv_delta / f64::from(a - 1)))
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .ok_or_else(|| Error::param("RDP curve is empty"))?;
    Ok(AdpConversion {
        budget: PrivacyBudget::new(epsilon, delta)?,
        order,
    })
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Exact δ(ε) of the Gaussian mechanism, i.e. the hockey-stick divergence
/// `H_{e^ε}(N(Δ, σ²) ‖ N(0, σ²))`:
///
/// `δ = Φ(Δ/(2σ) − εσ/Δ) − e^ε Φ(−Δ/(2σ) − εσ/Δ)`.
pub fn adp_delta_exact_gaussian(sigma_eff: f64, sensitivity: f64, epsilon: f64) -> Result<f64> {
    if !(sigma_eff > 0.0 && sigma_eff.is_finite()) {
        return Err(Error::param(format!("noise std must be positive, got {sigma_eff}")));
    }
    if !(sensitivity >= 0.0 && sensitivity.is_finite()) {
        return Err(Error::param(format!("sensitivity must be finite and >= 0, got {sensitivity}")));
    }
    if epsilon.is_nan() {
        return Err(Error::param("epsilon is NaN"));
    }
    if sensitivity == 0.0 {
        return Ok(if epsilon >= 0.0 { 0.0 } else { 1.0 - epsilon.exp() });
    }
    if epsilon == f64::INFINITY {
        return Ok(0.0);
    }
    let a = sensitivity / (2.0 * sigma_eff);
    let b = epsilon * sigma_eff / sensitivity;
    let head = std_normal_cdf(a - b);
    let tail = std_normal_cdf(-a - b);
    let scaled_tail = if tail > 0.0 { (epsilon + tail.ln()).exp() } else { 0.0 };
    Ok((head - scaled_tail).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;
    use proptest::prelude::*;

    fn g(sigma: f64, c: f64) -> MechanismSpec {
        MechanismSpec::gaussian(sigma, c)
    }

    #[test]
    fn default_grid() {
        let o = default_orders();
        assert_eq!(o.len(), 65);
        assert_eq!(o[0], 2);
        assert_eq!(o[62], 64);
        assert_eq!(&o[63..], &[128, 256]);
    }

    #[test]
    fn curve_invariants_enforced() {
        assert!(RdpCurve::new(vec![2, 3], vec![1.0]).is_err());
        assert!(RdpCurve::new(vec![3, 2], vec![1.0, 1.0]).is_err());
        assert!(RdpCurve::new(vec![1, 2], vec![0.0, 0.0]).is_err());
        assert!(RdpCurve::new(vec![2, 3], vec![-0.1, 1.0]).is_err());
        // (α−1)ε: 1·1.0 then 2·0.4 = 0.8 decreases.
        assert!(RdpCurve::new(vec![2, 3], vec![1.0, 0.4]).is_err());
        assert!(RdpCurve::new(vec![2, 3], vec![1.0, 0.5]).is_ok());
    }

    #[test]
    fn gaussian_closed_form() {
        let c = gaussian_rdp(&g(1.0, 1.0), 1.0, &[2]).unwrap();
        assert_eq!(c.epsilon_at(2), Some(1.0));
        let z = gaussian_rdp(&g(1.0, 1.0), 0.0, &default_orders()).unwrap();
        assert!(z.epsilons().iter().all(|&e| e == 0.0));
        assert!(gaussian_rdp(&g(0.0, 1.0), 1.0, &[2]).is_err());
        assert!(gaussian_rdp(&g(1.0, 1.0), -1.0, &[2]).is_err());
        assert!(gaussian_rdp(&g(1.0, 1.0), 1.0, &[1]).is_err());
    }

    #[test]
    fn gaussian_matches_numeric_oracle() {
        let c = gaussian_rdp(&g(1.0, 1.0), 1.0, &[2]).unwrap();
        let numeric = oracles::renyi_gaussian_numeric(1.0, 1.0, 2.0).unwrap();
        assert!((c.epsilon_at(2).unwrap() - numeric).abs() < 1e-6);
    }

    #[test]
    fn skellam_examples() {
        let zero = skellam_rdp(&MechanismSpec::skellam(1.0, 1.0, 16, 1), 0.0, 0.0, &default_orders()).unwrap();
        assert!(zero.epsilons().iter().all(|&e| e == 0.0));

        // μ = (s C σ)²/2 = 10 with s = 1, C = 1, σ = √20.
        let spec = MechanismSpec::skellam(20f64.sqrt(), 1.0, 1, 1);
        assert!((spec.poisson_param() - 10.0).abs() < 1e-12);
        let bound = skellam_rdp(&spec, 1.0, 1.0, &[2]).unwrap().epsilon_at(2).unwrap();
        let numeric = oracles::renyi_skellam_numeric(1, 10.0, 2).unwrap();
        assert!(bound >= numeric, "bound={bound} numeric={numeric}");
    }

    #[test]
    fn skellam_large_mu_approaches_gaussian() {
        let spec = MechanismSpec::skellam(2e6f64.sqrt(), 1.0, 1, 1);
        assert!((spec.poisson_param() - 1e6).abs() < 1e-6);
        let c = skellam_rdp(&spec, 1.0, 1.0, &default_orders()).unwrap();
        for (a, e) in c.iter() {
            let gauss = f64::from(a) / (4.0 * 1e6);
            assert!((e - gauss) / gauss < 0.01, "order {a}");
        }
    }

    #[test]
    fn skellam_rejects_bad_inputs() {
        let spec = MechanismSpec::skellam(1.0, 1.0, 16, 1);
        assert!(skellam_rdp(&spec, 1.0, 1.5, &[2]).is_err());
        assert!(skellam_rdp(&MechanismSpec::skellam(1.0, 1.0, 0, 1), 1.0, 1.0, &[2]).is_err());
        assert!(skellam_rdp(&g(1.0, 1.0), 1.0, 1.0, &[2]).is_err());
    }

    #[test]
    fn amplification_degenerate_rates() {
        let base = BaseMechanism::Gaussian { noise_std: 1.0, sensitivity: 1.0 };
        let orders = default_orders();
        let none = amplify_poisson(|a| base.epsilon(a), SubsamplingSpec { rate: 0.0 }, &orders).unwrap();
        assert!(none.epsilons().iter().all(|&e| e == 0.0));
        let full = amplify_poisson(|a| base.epsilon(a), SubsamplingSpec { rate: 1.0 }, &orders).unwrap();
        assert_eq!(full, base.curve(&orders).unwrap());
        assert!(amplify_poisson(|a| base.epsilon(a), SubsamplingSpec { rate: 1.5 }, &orders).is_err());
    }

    #[test]
    fn amplification_matches_mixture_oracle() {
        let base = BaseMechanism::Gaussian { noise_std: 1.0, sensitivity: 1.0 };
        let orders: Vec<u32> = (2..=64).step_by(7).collect();
        let amp = amplify_poisson(|a| base.epsilon(a), SubsamplingSpec { rate: 0.1 }, &orders).unwrap();
        for (a, e) in amp.iter() {
            let numeric = oracles::renyi_subsampled_gaussian_numeric(1.0, 1.0, 0.1, f64::from(a)).unwrap();
            assert!((e - numeric).abs() < 1e-4, "order {a}: {e} vs {numeric}");
        }
    }

    #[test]
    fn amplification_high_orders_stay_finite() {
        let base = BaseMechanism::Gaussian { noise_std: 0.3, sensitivity: 1.0 };
        let amp = amplify_poisson(|a| base.epsilon(a), SubsamplingSpec { rate: 0.5 }, &default_orders()).unwrap();
        assert!(amp.epsilons().iter().all(|e| e.is_finite()));
    }

    #[test]
    fn composition() {
        let c = RdpCurve::new(vec![2], vec![0.5]).unwrap();
        assert_eq!(compose(&c, 1).unwrap().epsilon_at(2), Some(0.5));
        assert_eq!(compose(&c, 4).unwrap().epsilon_at(2), Some(2.0));
        assert!(compose(&c, 0).is_err());

        let base = BaseMechanism::Gaussian { noise_std: 2.0, sensitivity: 1.0 };
        let step = amplify_poisson(|a| base.epsilon(a), SubsamplingSpec { rate: 0.1 }, &default_orders()).unwrap();
        let total = compose(&step, 200).unwrap();
        for ((_, one), (_, all)) in step.iter().zip(total.iter()) {
            assert_eq!(all, 200.0 * one);
        }
    }

    #[test]
    fn conversion_examples() {
        let c = RdpCurve::new(vec![2], vec![1.0]).unwrap();
        let r = rdp_to_adp(&c, 1e-5).unwrap();
        assert!((r.budget.epsilon - (1.0 + 1e5f64.ln())).abs() < 1e-12);
        assert!((r.budget.epsilon - 12.5129).abs() < 1e-4);
        assert_eq!(r.order, 2);

        let zeros = |max: u32| RdpCurve::new((2..=max).collect(), vec![0.0; max as usize - 1]).unwrap();
        let e10 = rdp_to_adp(&zeros(10), 1e-5).unwrap();
        let e64 = rdp_to_adp(&zeros(64), 1e-5).unwrap();
        assert!((e64.budget.epsilon - 1e5f64.ln() / 63.0).abs() < 1e-12);
        assert_eq!(e64.order, 64);
        assert!(e64.budget.epsilon < e10.budget.epsilon);

        assert!(rdp_to_adp(&c, 0.0).is_err());
        assert!(rdp_to_adp(&c, 1.0).is_err());
    }

    #[test]
    fn exact_gaussian_delta() {
        let d = adp_delta_exact_gaussian(1.0, 1.0, 1.0).unwrap();
        let numeric = oracles::hockey_stick_numeric(
            oracles::Density::Gaussian { mean: 1.0, std: 1.0 },
            oracles::Density::Gaussian { mean: 0.0, std: 1.0 },
            1f64.exp(),
        )
        .unwrap();
        assert!((d - numeric).abs() < 1e-6);
        assert!((d - 0.1269).abs() < 1e-4);
        assert_eq!(adp_delta_exact_gaussian(1.0, 0.0, 0.0).unwrap(), 0.0);
        assert!(adp_delta_exact_gaussian(1.0, 1.0, 50.0).unwrap() < 1e-12);
        assert!(adp_delta_exact_gaussian(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn conversion_is_conservative_against_exact_gaussian() {
        for &sigma in &[0.7, 1.0, 3.0] {
            let curve = gaussian_rdp(&g(sigma, 1.0), 1.0, &default_orders()).unwrap();
            for &delta in &[1e-3, 1e-5, 1e-8] {
                let eps = rdp_to_adp(&curve, delta).unwrap().budget.epsilon;
                // δ at the RDP-derived ε can only be smaller than the target.
                assert!(adp_delta_exact_gaussian(sigma, 1.0, eps).unwrap() <= delta);
            }
        }
    }

    proptest! {
        #[test]
        fn base_curves_monotone_in_order(sigma in 0.1f64..20.0, sens in 0.0f64..5.0, scale in 1u64..1024) {
            let orders = default_orders();
            let gc = gaussian_rdp(&g(sigma, 1.0), sens, &orders).unwrap();
            prop_assert!(gc.epsilons().windows(2).all(|w| w[1] >= w[0]));
            let spec = MechanismSpec::skellam(sigma, 1.0, scale, 100);
            let l2 = (scale as f64) * sens;
            let sc = skellam_rdp(&spec, l2, l2.ceil(), &orders).unwrap();
            prop_assert!(sc.epsilons().windows(2).all(|w| w[1] >= w[0]));
        }

        #[test]
        fn amplification_sandwich(sigma in 0.3f64..10.0, q in 0.0f64..=1.0) {
            let base = BaseMechanism::Gaussian { noise_std: sigma, sensitivity: 1.0 };
            let orders = default_orders();
            let amp = amplify_poisson(|a| base.epsilon(a), SubsamplingSpec { rate: q }, &orders).unwrap();
            for (a, e) in amp.iter() {
                prop_assert!(e >= 0.0);
                prop_assert!(e <= base.epsilon(a));
            }
        }

        #[test]
        fn conversion_non_increasing_in_delta(sigma in 0.3f64..10.0, d1 in 1e-10f64..0.5, d2 in 1e-10f64..0.5) {
            let curve = gaussian_rdp(&g(sigma, 1.0), 1.0, &default_orders()).unwrap();
            let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
            let e_lo = rdp_to_adp(&curve, lo).unwrap().budget.epsilon;
            let e_hi = rdp_to_adp(&curve, hi).unwrap().budget.epsilon;
            prop_assert!(e_hi <= e_lo);
        }
    }
}
