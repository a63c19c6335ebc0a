//! Joint noise scaling across clients.
//!
//! Each local step of a round releases, through the trusted aggregator, the
//! sum of N per-client noisy clipped-gradient sums. With infinitely divisible
//! noise that sum is dominated by a single mechanism whose noise variance is the
//! sum of the client variances. Accounting a full run then means composing the
//! per-step dominating mechanism over `S·T` steps.

use serde::{Deserialize, Serialize};

use crate::accounting::{
    amplify_poisson, compose, default_orders, rdp_to_adp, AdpConversion, BaseMechanism, MechanismSpec, NoiseFamily,
    PrivacyBudget, RdpCurve, SubsamplingSpec,
};
use crate::error::{Error, Result};

/// Lower and upper ends of the noise-multiplier search in calibration.
pub const CALIBRATION_RANGE: (f64, f64) = (1e-3, 1e6);
const CALIBRATION_MAX_ITERS: usize = 200;

/// Steps per epoch under Poisson sampling: the expected number of steps to
/// touch every sample once, `round(1/q)`.
pub fn epochs_to_steps(epochs: u32, rate: f64) -> Result<u32> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::param(format!("epochs need a sampling rate in (0, 1], got {rate}")));
    }
    let per_epoch = (1.0 / rate).round() as u32;
    Ok(epochs * per_epoch.max(1))
}

/// A client whose `steps_taken` fine steps are fused in groups of
/// `fusion_factor` for accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub steps_taken: u32,
    pub fusion_factor: u32,
}

/// Departures from the shared (γ, C, σ, S) setting.
///
/// Per-client lists are indexed by client and have length N. For a fused
/// client, `per_client_clip` is the clip applied at each fine step and
/// `per_client_sigma` is the noise multiplier of the noise added once per fused
/// step, relative to the fused clip `fusion_factor · C_i`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityDescriptor {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_step_lr: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_lr_divisors: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_client_clip: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_client_sigma: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<Vec<FusionSpec>>,
}

impl HeterogeneityDescriptor {
    fn validate(&self, n_clients: u32, local_steps: u32) -> Result<()> {
        let n = n_clients as usize;
        let positive = |name: &str, v: &[f64]| -> Result<()> {
            if let Some(x) = v.iter().find(|x| !(**x > 0.0 && x.is_finite())) {
                return Err(Error::Plan(format!("{name} entries must be positive, got {x}")));
            }
            Ok(())
        };
        let per_client = |name: &str, v: &Option<Vec<f64>>| -> Result<()> {
            if let Some(v) = v {
                if v.len() != n {
                    return Err(Error::Plan(format!("{name} has {} entries for {n} clients", v.len())));
                }
                positive(name, v)?;
            }
            Ok(())
        };
        if let Some(lr) = &self.per_step_lr {
            if lr.len() != local_steps as usize {
                return Err(Error::Plan(format!(
                    "per_step_lr has {} entries for {local_steps} steps",
                    lr.len()
                )));
            }
            positive("per_step_lr", lr)?;
        }
        per_client("client_lr_divisors", &self.client_lr_divisors)?;
        if let Some(l) = &self.client_lr_divisors {
            if l[0] != 1.0 {
                return Err(Error::Plan(format!("client_lr_divisors[0] must be 1, got {}", l[0])));
            }
        }
        per_client("per_client_clip", &self.per_client_clip)?;
        per_client("per_client_sigma", &self.per_client_sigma)?;
        if let Some(fusion) = &self.fusion {
            if fusion.len() != n {
                return Err(Error::Fusion(format!("fusion has {} entries for {n} clients", fusion.len())));
            }
            for (i, f) in fusion.iter().enumerate() {
                if f.fusion_factor == 0
                    || f.steps_taken % f.fusion_factor != 0
                    || f.steps_taken / f.fusion_factor != local_steps
                {
                    return Err(Error::Fusion(format!(
                        "client {i}: {} steps fused by {} do not land on {local_steps} steps",
                        f.steps_taken, f.fusion_factor
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The composition structure of a training run: N clients, S local steps per
/// round, T rounds, Poisson subsampling and the per-client noise template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountingPlan {
    pub n_clients: u32,
    pub local_steps: u32,
    pub rounds: u32,
    pub subsampling: SubsamplingSpec,
    pub mechanism: MechanismSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heterogeneity: Option<HeterogeneityDescriptor>,
    #[serde(default = "default_orders")]
    pub orders: Vec<u32>,
}

impl AccountingPlan {
    pub fn homogeneous(
        n_clients: u32,
        local_steps: u32,
        rounds: u32,
        sampling_rate: f64,
        mechanism: MechanismSpec,
    ) -> Self {
        Self {
            n_clients,
            local_steps,
            rounds,
            subsampling: SubsamplingSpec { rate: sampling_rate },
            mechanism,
            heterogeneity: None,
            orders: default_orders(),
        }
    }

    pub fn with_noise_multiplier(&self, sigma: f64) -> Self {
        Self {
            mechanism: self.mechanism.with_noise_multiplier(sigma),
            ..self.clone()
        }
    }

    pub fn with_clients(&self, n_clients: u32) -> Self {
        Self { n_clients, ..self.clone() }
    }

    pub fn with_rounds(&self, rounds: u32) -> Self {
        Self { rounds, ..self.clone() }
    }

    pub fn total_steps(&self) -> u64 {
        u64::from(self.local_steps) * u64::from(self.rounds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clients < 1 || self.local_steps < 1 || self.rounds < 1 {
            return Err(Error::Plan(format!(
                "N, S and T must all be >= 1 (got N={}, S={}, T={})",
                self.n_clients, self.local_steps, self.rounds
            )));
        }
        self.subsampling.validate()?;
        self.mechanism.validate()?;
        if self.orders.is_empty() || self.orders.iter().any(|&a| a < 2) {
            return Err(Error::Plan("orders must be a nonempty list of integers >= 2".into()));
        }
        if let Some(h) = &self.heterogeneity {
            h.validate(self.n_clients, self.local_steps)?;
        }
        Ok(())
    }
}

/// The per-step mechanism dominating the sum of all client mechanisms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SumDominatingSpec {
    /// Joint noise std in units of the plan's template clip norm.
    pub effective_sigma: f64,
    /// Dominating L2 sensitivity, in gradient units.
    pub effective_sensitivity: f64,
    /// Joint noise std in gradient units.
    pub noise_std: f64,
}

/// Builds the sum-dominating mechanism of one local step.
///
/// Client i contributes noise std `C_i'·σ_i/l_i` and sensitivity `C_i'/l_i`,
/// where `C_i' = fusion_factor_i · C_i`. Variances add; the sensitivity is the
/// largest single-client one.
pub fn build_sum_dominating(plan: &AccountingPlan) -> Result<SumDominatingSpec> {
    plan.validate()?;
    let n = plan.n_clients as usize;
    let template = plan.mechanism;
    let h = plan.heterogeneity.clone().unwrap_or_default();
    let pick = |v: &Option<Vec<f64>>, i: usize, default: f64| v.as_ref().map_or(default, |v| v[i]);

    if template.family == NoiseFamily::Skellam {
        if let Some(l) = &h.client_lr_divisors {
            if l.iter().any(|&x| x != 1.0) {
                return Err(Error::UnsupportedMechanism(
                    "Skellam noise rescaled by client-specific learning rates is no longer Skellam".into(),
                ));
            }
        }
    }

    let mut variances = Vec::with_capacity(n);
    let mut sensitivity: f64 = 0.0;
    for i in 0..n {
        let factor = h.fusion.as_ref().map_or(1, |f| f[i].fusion_factor);
        let clip = f64::from(factor) * pick(&h.per_client_clip, i, template.clip_norm);
        let sigma = pick(&h.per_client_sigma, i, template.noise_multiplier);
        let divisor = pick(&h.client_lr_divisors, i, 1.0);
        let std = clip * sigma / divisor;
        variances.push(std * std);
        sensitivity = sensitivity.max(clip / divisor);
    }
    // Canonical summation order: the result does not depend on how clients
    // are listed.
    variances.sort_by(f64::total_cmp);
    let noise_std = variances.iter().sum::<f64>().sqrt();
    Ok(SumDominatingSpec {
        effective_sigma: noise_std / template.clip_norm,
        effective_sensitivity: sensitivity,
        noise_std,
    })
}

/// RDP base mechanism for one step of a family, with the given joint noise
/// std and sensitivity (both in gradient units).
fn base_mechanism(template: &MechanismSpec, noise_std: f64, sensitivity: f64) -> BaseMechanism {
    match template.family {
        NoiseFamily::Gaussian => BaseMechanism::Gaussian { noise_std, sensitivity },
        NoiseFamily::Skellam => {
            let s = template.fixedpoint_scale as f64;
            let fp_std = s * noise_std;
            let l2 = s * sensitivity;
            // For integer vectors ‖v‖₁ ≤ min(√d‖v‖₂, ‖v‖₂²).
            let l1 = ((template.dimension as f64).sqrt() * l2).min(l2 * l2).ceil();
            BaseMechanism::Skellam {
                mu: 0.5 * fp_std * fp_std,
                l2,
                l1,
            }
        }
    }
}

/// Full accounting trace of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointAccounting {
    pub sum_dominating: SumDominatingSpec,
    pub total_steps: u64,
    /// Amplified RDP of a single step.
    pub step_curve: RdpCurve,
    /// RDP of the whole run.
    pub total_curve: RdpCurve,
    pub conversion: AdpConversion,
}

/// Accounts a plan and returns the full trace; see [`account_joint`].
pub fn account_joint_detailed(plan: &AccountingPlan, delta: f64) -> Result<JointAccounting> {
    let spec = build_sum_dominating(plan)?;
    let base = base_mechanism(&plan.mechanism, spec.noise_std, spec.effective_sensitivity);
    let step_curve = amplify_poisson(|a| base.epsilon(a), plan.subsampling, &plan.orders)?;
    let total_curve = compose(&step_curve, plan.total_steps())?;
    let mut conversion = rdp_to_adp(&total_curve, delta)?;
    if total_curve.epsilons().iter().all(|&e| e == 0.0) {
        // Output independent of the data (q = 0 or zero sensitivity).
        conversion.budget.epsilon = 0.0;
    }
    Ok(JointAccounting {
        sum_dominating: spec,
        total_steps: plan.total_steps(),
        step_curve,
        total_curve,
        conversion,
    })
}

/// Joint (ε, δ) of a full training run: sum-dominating mechanism per step,
/// amplified by Poisson subsampling, composed over `S·T` steps and converted
/// to approximate DP.
pub fn account_joint(plan: &AccountingPlan, delta: f64) -> Result<PrivacyBudget> {
    Ok(account_joint_detailed(plan, delta)?.conversion.budget)
}

/// Smallest shared per-client noise multiplier whose joint budget stays within
/// `target`. Bisects on a log scale over [`CALIBRATION_RANGE`].
pub fn calibrate_joint_noise(plan: &AccountingPlan, target: PrivacyBudget) -> Result<f64> {
    if !(target.epsilon > 0.0 && target.epsilon.is_finite()) {
        return Err(Error::param(format!("target epsilon must be positive, got {}", target.epsilon)));
    }
    if !(target.delta > 0.0 && target.delta < 1.0) {
        return Err(Error::param(format!("target delta must lie in (0, 1), got {}", target.delta)));
    }
    if plan.heterogeneity.as_ref().is_some_and(|h| h.per_client_sigma.is_some()) {
        return Err(Error::Plan(
            "calibration finds one shared sigma; drop per_client_sigma from the plan".into(),
        ));
    }
    let eps_at = |sigma: f64| account_joint(&plan.with_noise_multiplier(sigma), target.delta).map(|b| b.epsilon);
    let (mut lo, mut hi) = CALIBRATION_RANGE;
    if eps_at(hi)? > target.epsilon {
        return Err(Error::CalibrationRange {
            target: target.epsilon,
            lo,
            hi,
        });
    }
    if eps_at(lo)? <= target.epsilon {
        return Ok(lo);
    }
    for _ in 0..CALIBRATION_MAX_ITERS {
        let mid = (lo * hi).sqrt();
        if mid <= lo || mid >= hi || hi / lo - 1.0 < 1e-12 {
            break;
        }
        if eps_at(mid)? <= target.epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Triangle-inequality sensitivity of a sum of `steps` clipped updates.
pub fn naive_multi_step_sensitivity(clip_norm: f64, steps: u32) -> f64 {
    f64::from(steps) * clip_norm
}

/// Accounts a plan the naive way: each round's summed update is treated as a
/// single release with sensitivity `S·Δ` and noise std `√S·σ_joint`, amplified
/// by the probability `1 − (1−q)^S` that a sample enters any step.
pub fn account_naive_whole_sum(plan: &AccountingPlan, delta: f64) -> Result<PrivacyBudget> {
    let spec = build_sum_dominating(plan)?;
    let s = plan.local_steps;
    let sensitivity = naive_multi_step_sensitivity(spec.effective_sensitivity, s);
    let noise_std = f64::from(s).sqrt() * spec.noise_std;
    let base = base_mechanism(&plan.mechanism, noise_std, sensitivity);
    let rate = 1.0 - (1.0 - plan.subsampling.rate).powi(s as i32);
    let round_curve = amplify_poisson(|a| base.epsilon(a), SubsamplingSpec { rate }, &plan.orders)?;
    let total = compose(&round_curve, u64::from(plan.rounds))?;
    let mut budget = rdp_to_adp(&total, delta)?.budget;
    if total.epsilons().iter().all(|&e| e == 0.0) {
        budget.epsilon = 0.0;
    }
    Ok(budget)
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Fuses consecutive groups of `factor` per-step clipped contributions into
/// single steps. Each input must have norm at most `fused_clip / factor`, so
/// every fused contribution has norm at most `fused_clip`.
pub fn fuse_steps(updates: &[Vec<f64>], factor: usize, fused_clip: f64) -> Result<Vec<Vec<f64>>> {
    if factor == 0 {
        return Err(Error::Fusion("fusion factor must be >= 1".into()));
    }
    if updates.len() % factor != 0 {
        return Err(Error::Fusion(format!(
            "{} steps cannot be fused in groups of {factor}",
            updates.len()
        )));
    }
    let bound = fused_clip / factor as f64;
    for u in updates {
        let norm = l2_norm(u);
        if norm > bound * (1.0 + 1e-12) {
            return Err(Error::ClippingContract { norm, bound });
        }
    }
    if let Some(first) = updates.first() {
        if updates.iter().any(|u| u.len() != first.len()) {
            return Err(Error::Fusion("contributions differ in dimension".into()));
        }
    }
    Ok(updates
        .chunks(factor)
        .map(|group| {
            let mut sum = vec![0.0; group[0].len()];
            for u in group {
                for (s, x) in sum.iter_mut().zip(u) {
                    *s += x;
                }
            }
            sum
        })
        .collect())
}

/// Per-client noise multiplier such that the honest clients alone supply the
/// joint noise level originally provided by all N: `σ·√(N/(N−k))`.
pub fn hbc_rescale(sigma_per_client: f64, n_clients: u32, colluders_tolerated: u32) -> Result<f64> {
    if colluders_tolerated >= n_clients {
        return Err(Error::TrustModel(format!(
            "cannot tolerate {colluders_tolerated} colluders among {n_clients} clients"
        )));
    }
    if !(sigma_per_client > 0.0 && sigma_per_client.is_finite()) {
        return Err(Error::param(format!("sigma must be positive, got {sigma_per_client}")));
    }
    let n = f64::from(n_clients);
    let honest = f64::from(n_clients - colluders_tolerated);
    Ok(sigma_per_client * (n / honest).sqrt())
}
