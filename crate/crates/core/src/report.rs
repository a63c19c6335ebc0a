//! Machine-readable accounting reports.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::joint::{account_joint_detailed, hbc_rescale, AccountingPlan, SumDominatingSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderEpsilon {
    pub order: u32,
    /// RDP of one amplified step.
    pub step_epsilon: f64,
    /// RDP after composing all steps.
    pub total_epsilon: f64,
}

/// Noise needed when up to `colluders` clients may drop their share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustAdjustment {
    pub colluders: u32,
    pub sigma_per_client: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountingReport {
    pub plan: AccountingPlan,
    pub epsilon: f64,
    pub delta: f64,
    pub minimizing_order: u32,
    pub sigma_per_client: Vec<f64>,
    pub sigma_total: f64,
    pub sum_dominating: SumDominatingSpec,
    pub total_steps: u64,
    pub curve: Vec<OrderEpsilon>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trust_model: Option<TrustAdjustment>,
}

pub fn accounting_report(plan: &AccountingPlan, delta: f64, colluders: Option<u32>) -> Result<AccountingReport> {
    let joint = account_joint_detailed(plan, delta)?;
    let sigma_per_client = plan
        .heterogeneity
        .as_ref()
        .and_then(|h| h.per_client_sigma.clone())
        .unwrap_or_else(|| vec![plan.mechanism.noise_multiplier; plan.n_clients as usize]);
    let trust_model = colluders
        .map(|k| {
            hbc_rescale(plan.mechanism.noise_multiplier, plan.n_clients, k).map(|s| TrustAdjustment {
                colluders: k,
                sigma_per_client: s,
            })
        })
        .transpose()?;
    let curve = joint
        .step_curve
        .iter()
        .zip(joint.total_curve.epsilons())
        .map(|((order, step_epsilon), &total_epsilon)| OrderEpsilon {
            order,
            step_epsilon,
            total_epsilon,
        })
        .collect();
    Ok(AccountingReport {
        plan: plan.clone(),
        epsilon: joint.conversion.budget.epsilon,
        delta: joint.conversion.budget.delta,
        minimizing_order: joint.conversion.order,
        sigma_per_client,
        sigma_total: joint.sum_dominating.effective_sigma,
        sum_dominating: joint.sum_dominating,
        total_steps: joint.total_steps,
        curve,
        trust_model,
    })
}

impl AccountingReport {
    /// Short human-readable summary.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "epsilon = {:.6} at delta = {:e} (order {})\nsigma_total = {:.6} over {} clients, {} steps\n",
            self.epsilon,
            self.delta,
            self.minimizing_order,
            self.sigma_total,
            self.plan.n_clients,
            self.total_steps
        );
        if let Some(t) = &self.trust_model {
            s.push_str(&format!(
                "tolerating {} colluders needs sigma = {:.6} per client\n",
                t.colluders, t.sigma_per_client
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::accounting::MechanismSpec;
    use crate::joint::account_joint;

    #[test]
    fn report_matches_accounting_and_round_trips() {
        let plan = AccountingPlan::homogeneous(4, 3, 2, 0.1, MechanismSpec::gaussian(1.1, 1.0));
        let r = accounting_report(&plan, 1e-5, Some(1)).unwrap();
        assert_eq!(r.epsilon, account_joint(&plan, 1e-5).unwrap().epsilon);
        assert!((r.sigma_total - 2.2).abs() < 1e-12);
        assert_eq!(r.sigma_per_client, vec![1.1; 4]);
        assert_eq!(r.total_steps, 6);
        let t = r.trust_model.as_ref().unwrap();
        assert!((t.sigma_per_client - 1.1 * (4.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let json = serde_json::to_string(&r).unwrap();
        let back: AccountingReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        let at_min = r.curve.iter().find(|o| o.order == r.minimizing_order).unwrap();
        let expected = at_min.total_epsilon + (1e5f64).ln() / (f64::from(r.minimizing_order) - 1.0);
        assert!((r.epsilon - expected).abs() < 1e-9);
    }
}
