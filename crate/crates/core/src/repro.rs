//! Reproduction of the averaged-models privacy table: each party trains a
//! (5, 1e-5)-LDP model with Skellam noise, Poisson rate 0.1, and the average of
//! N such models is accounted jointly.

use serde::{Deserialize, Serialize};

use crate::accounting::{MechanismSpec, PrivacyBudget, DEFAULT_FIXEDPOINT_SCALE};
use crate::error::Result;
use crate::joint::{account_joint_detailed, calibrate_joint_noise, epochs_to_steps, AccountingPlan};

pub const TABLE1_RATE: f64 = 0.1;
pub const TABLE1_DELTA: f64 = 1e-5;
pub const TABLE1_LDP_EPSILON: f64 = 5.0;
/// Linear head on 1024-d features with 10 classes.
pub const TABLE1_DIMENSION: usize = 10 * (1024 + 1);

/// Printed values: (regime, parties, σ_total, averaged-model ε).
pub const TABLE1_PRINTED: [(Regime, u32, f64, f64); 12] = [
    (Regime::Steps(1), 1, 0.69, 5.0),
    (Regime::Steps(1), 2, 0.98, 2.78),
    (Regime::Steps(1), 5, 1.54, 1.22),
    (Regime::Steps(1), 10, 2.18, 0.64),
    (Regime::Epochs(1), 1, 0.90, 5.0),
    (Regime::Epochs(1), 2, 1.28, 2.61),
    (Regime::Epochs(1), 5, 2.02, 1.19),
    (Regime::Epochs(1), 10, 2.85, 0.72),
    (Regime::Epochs(5), 1, 1.18, 5.0),
    (Regime::Epochs(5), 2, 1.67, 2.85),
    (Regime::Epochs(5), 5, 2.64, 1.55),
    (Regime::Epochs(5), 10, 3.73, 1.03),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    Steps(u32),
    Epochs(u32),
}

impl Regime {
    pub fn steps(self) -> Result<u32> {
        match self {
            Regime::Steps(s) => Ok(s),
            Regime::Epochs(e) => epochs_to_steps(e, TABLE1_RATE),
        }
    }

    pub fn label(self) -> String {
        match self {
            Regime::Steps(1) => "1 step".into(),
            Regime::Steps(s) => format!("{s} steps"),
            Regime::Epochs(1) => "1 epoch".into(),
            Regime::Epochs(e) => format!("{e} epochs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub regime: Regime,
    pub local_steps: u32,
    pub parties: u32,
    /// Calibrated per-party noise multiplier.
    pub sigma_ldp: f64,
    pub sigma_total: f64,
    pub epsilon: f64,
    pub minimizing_order: u32,
    pub printed_sigma_total: f64,
    pub printed_epsilon: f64,
}

impl Table1Row {
    pub fn sigma_deviation(&self) -> f64 {
        (self.sigma_total - self.printed_sigma_total) / self.printed_sigma_total
    }

    pub fn epsilon_deviation(&self) -> f64 {
        (self.epsilon - self.printed_epsilon) / self.printed_epsilon
    }
}

pub fn table1_plan(parties: u32, steps: u32, sigma: f64) -> AccountingPlan {
    AccountingPlan::homogeneous(
        parties,
        steps,
        1,
        TABLE1_RATE,
        MechanismSpec::skellam(sigma, 1.0, DEFAULT_FIXEDPOINT_SCALE, TABLE1_DIMENSION),
    )
}

/// Calibrates σ_LDP once per regime, then accounts the average of N parties.
pub fn reproduce_table1() -> Result<Vec<Table1Row>> {
    let target = PrivacyBudget::new(TABLE1_LDP_EPSILON, TABLE1_DELTA)?;
    let mut rows = Vec::with_capacity(TABLE1_PRINTED.len());
    let mut calibrated: Option<(Regime, f64)> = None;
    for (regime, parties, printed_sigma_total, printed_epsilon) in TABLE1_PRINTED {
        let steps = regime.steps()?;
        let sigma_ldp = match calibrated {
            Some((r, s)) if r == regime => s,
            _ => {
                let s = calibrate_joint_noise(&table1_plan(1, steps, 1.0), target)?;
                calibrated = Some((regime, s));
                s
            }
        };
        let joint = account_joint_detailed(&table1_plan(parties, steps, sigma_ldp), TABLE1_DELTA)?;
        rows.push(Table1Row {
            regime,
            local_steps: steps,
            parties,
            sigma_ldp,
            sigma_total: joint.sum_dominating.effective_sigma,
            epsilon: joint.conversion.budget.epsilon,
            minimizing_order: joint.conversion.order,
            printed_sigma_total,
            printed_epsilon,
        });
    }
    Ok(rows)
}

pub fn render_table1(rows: &[Table1Row]) -> String {
    let mut out = format!(
        "{:<10} {:>7} {:>9} {:>9} {:>8} {:>8} {:>9} {:>8} {:>8} {:>6}\n",
        "regime", "parties", "sigma_ldp", "sig_total", "printed", "dev", "eps", "printed", "dev", "order"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<10} {:>7} {:>9.4} {:>9.4} {:>8.2} {:>+7.2}% {:>9.4} {:>8.2} {:>+7.2}% {:>6}\n",
            r.regime.label(),
            r.parties,
            r.sigma_ldp,
            r.sigma_total,
            r.printed_sigma_total,
            100.0 * r.sigma_deviation(),
            r.epsilon,
            r.printed_epsilon,
            100.0 * r.epsilon_deviation(),
            r.minimizing_order
        ));
    }
    out
}
