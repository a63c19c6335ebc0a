//! Brute-force numeric references for the accounting closed forms.
//!
//! Nothing in here calls into [`crate::accounting`]. Every value is obtained
//! by integrating or summing the defining expression of a divergence directly,
//! so the closed forms can be checked against something that shares no
//! algebra with them.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Number of panels a window is pre-split into before adaptive refinement.
const PANELS: usize = 256;
/// Samples used to locate the peak of a log-integrand.
const PEAK_GRID: usize = 4097;
const MAX_INTERVALS: usize = 200_000;
/// Relative accuracy of the oracle integrals. The Gauss–Kronrod error
/// estimate has a round-off floor around 1e-12 on wide windows.
const LOG_INTEGRAL_REL_TOL: f64 = 1e-10;

// 15-point Kronrod nodes and weights with the embedded 7-point Gauss rule.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// One Gauss–Kronrod (7, 15) panel: returns (Kronrod estimate, error estimate).
fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = half * XGK[j];
        let pair = f(center - dx) + f(center + dx);
        kronrod += WGK[j] * pair;
        // Gauss nodes are the odd-indexed Kronrod nodes.
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

/// Adaptive Gauss–Kronrod quadrature with interval bisection.
///
/// Refines the panel with the largest error estimate until the summed estimate
/// drops below `abs_tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64) -> Result<f64> {
    integrate_panels(&f, &split(a, b, 1), abs_tol, 0.0)
}

fn split(a: f64, b: f64, n: usize) -> Vec<(f64, f64)> {
    let h = (b - a) / n as f64;
    (0..n)
        .map(|i| {
            let lo = a + h * i as f64;
            let hi = if i + 1 == n { b } else { a + h * (i + 1) as f64 };
            (lo, hi)
        })
        .collect()
}

fn integrate_panels<F: Fn(f64) -> f64>(
    f: &F,
    panels: &[(f64, f64)],
    abs_tol: f64,
    rel_tol: f64,
) -> Result<f64> {
    let mut heap = BinaryHeap::new();
    let mut value = 0.0;
    let mut error = 0.0;
    for &(a, b) in panels {
        let (v, e) = gk15(f, a, b);
        value += v;
        error += e;
        heap.push(Panel { a, b, value: v, error: e });
    }
    let mut refinements = 0usize;
    while error > abs_tol.max(rel_tol * value.abs()) {
        if !error.is_finite() {
            return Err(Error::Oracle("non-finite integrand".into()));
        }
        refinements += 1;
        if refinements >= MAX_INTERVALS {
            return Err(Error::Oracle(format!(
                "quadrature did not converge: error estimate {error:e} > {:e}",
                abs_tol.max(rel_tol * value.abs())
            )));
        }
        let worst = heap.pop().expect("nonempty panel heap");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            return Err(Error::Oracle("quadrature interval underflow".into()));
        }
        let (v1, e1) = gk15(f, worst.a, mid);
        let (v2, e2) = gk15(f, mid, worst.b);
        value += v1 + v2 - worst.value;
        error += e1 + e2 - worst.error;
        heap.push(Panel { a: worst.a, b: mid, value: v1, error: e1 });
        heap.push(Panel { a: mid, b: worst.b, value: v2, error: e2 });
        if refinements % 1024 == 0 {
            // Re-sum to stop the running totals drifting.
            value = heap.iter().map(|p| p.value).sum();
            error = heap.iter().map(|p| p.error).sum();
        }
    }
    Ok(value)
}

struct Panel {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}

impl Eq for Panel {}

impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// Returns `ln ∫ exp(log_f)` over `[lo, hi]`, rescaling by the peak so that
/// integrands of size e^±700 stay representable.
fn log_integrate<F: Fn(f64) -> f64>(log_f: F, lo: f64, hi: f64, rel_tol: f64) -> Result<f64> {
    let step = (hi - lo) / (PEAK_GRID - 1) as f64;
    let peak = (0..PEAK_GRID)
        .map(|i| log_f(lo + step * i as f64))
        .fold(f64::NEG_INFINITY, f64::max);
    if !peak.is_finite() {
        return Err(Error::Oracle(format!("log-integrand peak is {peak}")));
    }
    let scaled = |t: f64| (log_f(t) - peak).exp();
    let value = integrate_panels(&scaled, &split(lo, hi, PANELS), 0.0, rel_tol)?;
    if value <= 0.0 {
        return Err(Error::Oracle("integral vanished".into()));
    }
    Ok(peak + value.ln())
}

fn normal_log_pdf(t: f64, mean: f64, std: f64) -> f64 {
    let z = (t - mean) / std;
    -0.5 * z * z - std.ln() - LN_SQRT_2PI
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let values: Vec<f64> = values.into_iter().collect();
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn check_gaussian_args(std: f64, order: f64) -> Result<()> {
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::param(format!("std must be positive, got {std}")));
    }
    if !(order > 1.0 && order.is_finite()) {
        return Err(Error::param(format!("order must exceed 1, got {order}")));
    }
    Ok(())
}

/// Integration window covering every Gaussian bump that can appear in
/// `p^α q^(1-α)` for means in {0, Δ}.
fn gaussian_window(shift: f64, std: f64, order: f64) -> (f64, f64) {
    let centers = [0.0, shift, order * shift, (1.0 - order) * shift];
    let lo = centers.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = centers.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo - 30.0 * std, hi + 30.0 * std)
}

/// Numeric Rényi divergence `D_α(N(Δ, σ²) ‖ N(0, σ²))` by quadrature of the
/// defining integral `E_Q[(p/q)^α]`.
pub fn renyi_gaussian_numeric(shift: f64, std: f64, order: f64) -> Result<f64> {
    check_gaussian_args(std, order)?;
    let (lo, hi) = gaussian_window(shift, std, order);
    let log_i = log_integrate(
        |t| order * normal_log_pdf(t, shift, std) + (1.0 - order) * normal_log_pdf(t, 0.0, std),
        lo,
        hi,
        LOG_INTEGRAL_REL_TOL,
    )?;
    Ok(log_i / (order - 1.0))
}

/// Numeric Rényi divergence between the Poisson-subsampled Gaussian mixture
/// `(1−q)N(0,σ²) + qN(Δ,σ²)` and `N(0,σ²)`, maximised over both directions.
pub fn renyi_subsampled_gaussian_numeric(shift: f64, std: f64, rate: f64, order: f64) -> Result<f64> {
    check_gaussian_args(std, order)?;
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::param(format!("sampling rate must lie in [0, 1], got {rate}")));
    }
    let ln_keep = (1.0 - rate).ln();
    let ln_take = rate.ln();
    let log_mix = |t: f64| {
        log_add_exp(
            ln_keep + normal_log_pdf(t, 0.0, std),
            ln_take + normal_log_pdf(t, shift, std),
        )
    };
    let (lo, hi) = gaussian_window(shift, std, order);
    let forward = log_integrate(
        |t| order * log_mix(t) + (1.0 - order) * normal_log_pdf(t, 0.0, std),
        lo,
        hi,
        LOG_INTEGRAL_REL_TOL,
    )?;
    let reverse = log_integrate(
        |t| order * normal_log_pdf(t, 0.0, std) + (1.0 - order) * log_mix(t),
        lo,
        hi,
        LOG_INTEGRAL_REL_TOL,
    )?;
    Ok(forward.max(reverse) / (order - 1.0))
}

/// Log-pmf of the symmetric Skellam distribution `X − Y`, `X, Y ~ Poisson(μ)`,
/// tabulated on `0..=k_max` (the pmf is symmetric in k).
///
/// Uses `pmf(k) = e^{-2μ} I_k(2μ)`. The ratios `I_{k+1}/I_k` come from a
/// backward recurrence started far in the tail, and the table is normalised
/// through `Σ_k pmf(k) = 1`, so no Bessel function is ever evaluated directly.
#[derive(Debug, Clone)]
pub struct SkellamLogPmf {
    log_pmf: Vec<f64>,
    tail_mass: f64,
}

impl SkellamLogPmf {
    pub fn new(mu: f64, k_max: usize) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::param(format!("Poisson parameter must be positive, got {mu}")));
        }
        let x = 2.0 * mu;
        // Start the recurrence where the pmf is negligible relative to k_max so
        // the start-up error is damped below double precision.
        let n = k_max + (30.0 * (x + 1.0).sqrt()) as usize + 200;
        let mut ln_ratio = vec![0.0; n];
        let mut r = 0.0;
        for nu in (1..=n).rev() {
            r = 1.0 / (2.0 * nu as f64 / x + r);
            ln_ratio[nu - 1] = r.ln();
        }
        // cumulative[k] = ln(I_k / I_0)
        let mut cumulative = Vec::with_capacity(n + 1);
        cumulative.push(0.0);
        for lr in &ln_ratio {
            let last = *cumulative.last().expect("nonempty");
            cumulative.push(last + lr);
        }
        let ln_total = log_sum_exp(
            std::iter::once(0.0).chain(cumulative[1..].iter().map(|c| c + std::f64::consts::LN_2)),
        );
        let log_pmf: Vec<f64> = cumulative.iter().map(|c| c - ln_total).collect();
        let tail_mass: f64 = log_pmf[k_max + 1..].iter().map(|l| 2.0 * l.exp()).sum();
        Ok(Self {
            log_pmf: log_pmf[..=k_max].to_vec(),
            tail_mass,
        })
    }

    pub fn k_max(&self) -> usize {
        self.log_pmf.len() - 1
    }

    /// Probability mass outside `[-k_max, k_max]`.
    pub fn tail_mass(&self) -> f64 {
        self.tail_mass
    }

    /// `ln pmf(k)`, or `-inf` outside the table.
    pub fn ln_pmf(&self, k: i64) -> f64 {
        self.log_pmf
            .get(k.unsigned_abs() as usize)
            .copied()
            .unwrap_or(f64::NEG_INFINITY)
    }

    pub fn pmf(&self, k: i64) -> f64 {
        self.ln_pmf(k).exp()
    }
}

/// Numeric Rényi divergence of the shifted Skellam pair `(Sk + Δ, Sk)` by
/// direct summation over the integer support, maximised over both directions.
pub fn renyi_skellam_numeric(shift: i64, mu: f64, order: u32) -> Result<f64> {
    if order < 2 {
        return Err(Error::param(format!("order must be an integer >= 2, got {order}")));
    }
    let alpha = f64::from(order);
    let d = shift.unsigned_abs() as f64;
    let mut k_max = (d * (2.0 * alpha + 1.0) + 40.0 * (2.0 * mu + 1.0).sqrt() + 80.0) as usize;
    for _ in 0..6 {
        let table = SkellamLogPmf::new(mu, k_max + shift.unsigned_abs() as usize)?;
        let k = k_max as i64;
        let forward: Vec<f64> = (-k..=k)
            .map(|j| alpha * table.ln_pmf(j - shift) + (1.0 - alpha) * table.ln_pmf(j))
            .collect();
        let reverse: Vec<f64> = (-k..=k)
            .map(|j| alpha * table.ln_pmf(j) + (1.0 - alpha) * table.ln_pmf(j - shift))
            .collect();
        let tail_ok = table.tail_mass() < 1e-12;
        let edge_ok = [&forward, &reverse].iter().all(|terms| {
            let peak = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let edge = terms[0].max(terms[terms.len() - 1]);
            edge - peak < -40.0
        });
        if tail_ok && edge_ok {
            let value = log_sum_exp(forward).max(log_sum_exp(reverse)) / (alpha - 1.0);
            return Ok(value.max(0.0));
        }
        k_max *= 2;
    }
    Err(Error::Oracle(format!(
        "Skellam support truncation did not converge (mu={mu}, shift={shift}, order={order})"
    )))
}

/// A one-dimensional distribution the hockey-stick oracle can evaluate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Density {
    Gaussian { mean: f64, std: f64 },
    /// Symmetric Skellam with Poisson parameter `mu`, translated by `shift`.
    Skellam { shift: i64, mu: f64 },
}

/// Numeric hockey-stick divergence `H_α(P ‖ Q) = ∫ (p − α q)_+`.
pub fn hockey_stick_numeric(p: Density, q: Density, alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::param(format!("alpha must be a finite nonnegative real, got {alpha}")));
    }
    match (p, q) {
        (Density::Gaussian { mean: mp, std: sp }, Density::Gaussian { mean: mq, std: sq }) => {
            if !(sp > 0.0 && sq > 0.0) {
                return Err(Error::param("Gaussian std must be positive"));
            }
            let integrand = |t: f64| {
                let lp = normal_log_pdf(t, mp, sp);
                let lq = normal_log_pdf(t, mq, sq);
                (lp.exp() - alpha * lq.exp()).max(0.0)
            };
            let s = sp.max(sq);
            let lo = mp.min(mq) - 40.0 * s;
            let hi = mp.max(mq) + 40.0 * s;
            // Split at sign changes so every panel integrates a smooth function.
            let grid = 8192;
            let h = (hi - lo) / grid as f64;
            let diff = |t: f64| normal_log_pdf(t, mp, sp) - (alpha.ln() + normal_log_pdf(t, mq, sq));
            let mut cuts = vec![lo];
            for i in 0..grid {
                let (a, b) = (lo + h * i as f64, lo + h * (i + 1) as f64);
                if diff(a).signum() != diff(b).signum() {
                    cuts.push(bisect_root(&diff, a, b));
                }
            }
            cuts.push(hi);
            let panels: Vec<(f64, f64)> = cuts
                .windows(2)
                .flat_map(|w| split(w[0], w[1], 16))
                .filter(|(a, b)| b > a)
                .collect();
            integrate_panels(&integrand, &panels, 1e-11, 0.0)
        }
        (Density::Skellam { shift: shp, mu: mup }, Density::Skellam { shift: shq, mu: muq }) => {
            let span = (shp - shq).unsigned_abs() as f64;
            let k_max = (span + 40.0 * (2.0 * mup.max(muq) + 1.0).sqrt() + 80.0) as usize;
            let tp = SkellamLogPmf::new(mup, k_max * 2)?;
            let tq = SkellamLogPmf::new(muq, k_max * 2)?;
            if tp.tail_mass() > 1e-12 || tq.tail_mass() > 1e-12 {
                return Err(Error::Oracle("Skellam tail bound failed".into()));
            }
            let center = shp.min(shq);
            let k = k_max as i64;
            Ok(((center - k)..=(center + span as i64 + k))
                .map(|j| (tp.pmf(j - shp) - alpha * tq.pmf(j - shq)).max(0.0))
                .sum())
        }
        _ => Err(Error::Oracle(
            "hockey-stick divergence needs two continuous or two discrete densities".into(),
        )),
    }
}

fn bisect_root<F: Fn(f64) -> f64>(f: &F, mut a: f64, mut b: f64) -> f64 {
    let fa = f(a);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        if f(m).signum() == fa.signum() {
            a = m;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_polynomial_and_gaussian() {
        let v = integrate(|x| x * x * x - 2.0 * x, 0.0, 2.0, 1e-12).unwrap();
        assert!((v - 0.0).abs() < 1e-12);
        let v = integrate(|x| (-x * x / 2.0).exp(), -40.0, 40.0, 1e-12).unwrap();
        assert!((v - (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-11);
    }

    #[test]
    fn gaussian_zero_shift_is_zero() {
        for &(s, a) in &[(0.5, 2.0), (1.0, 7.0), (3.0, 32.0)] {
            assert!(renyi_gaussian_numeric(0.0, s, a).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_matches_known_values() {
        assert!((renyi_gaussian_numeric(1.0, 1.0, 2.0).unwrap() - 1.0).abs() < 1e-9);
        assert!((renyi_gaussian_numeric(1.0, 2.0, 5.0).unwrap() - 0.625).abs() < 1e-9);
        // High orders put the integrand's bump at αΔ, far outside ±20σ.
        assert!((renyi_gaussian_numeric(1.0, 1.0, 64.0).unwrap() - 32.0).abs() < 1e-8);
    }

    #[test]
    fn gaussian_rejects_bad_arguments() {
        assert!(renyi_gaussian_numeric(1.0, 0.0, 2.0).is_err());
        assert!(renyi_gaussian_numeric(1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn skellam_pmf_normalised_and_symmetric_moments() {
        for &mu in &[0.2, 2.0, 8.0, 500.0] {
            let k = (40.0 * (2.0 * mu + 1.0f64).sqrt() + 80.0) as i64;
            let table = SkellamLogPmf::new(mu, k as usize).unwrap();
            let mass: f64 = (-k..=k).map(|j| table.pmf(j)).sum();
            let var: f64 = (-k..=k).map(|j| (j * j) as f64 * table.pmf(j)).sum();
            assert!((mass - 1.0).abs() < 1e-12, "mu={mu} mass={mass}");
            assert!((var - 2.0 * mu).abs() < 1e-9 * (1.0 + mu), "mu={mu} var={var}");
        }
    }

    #[test]
    fn skellam_pmf_matches_poisson_convolution() {
        // Independent route: convolve two Poisson pmfs directly.
        let mu: f64 = 3.0;
        let pois: Vec<f64> = (0..80)
            .scan(( -mu).exp(), |p, n| {
                let cur = *p;
                *p *= mu / (n as f64 + 1.0);
                Some(cur)
            })
            .collect();
        let table = SkellamLogPmf::new(mu, 40).unwrap();
        for k in -10i64..=10 {
            let conv: f64 = (0..80usize)
                .filter_map(|x| {
                    let y = x as i64 - k;
                    (0..80).contains(&y).then(|| pois[x] * pois[y as usize])
                })
                .sum();
            assert!((table.pmf(k) - conv).abs() < 1e-14, "k={k}");
        }
    }

    #[test]
    fn skellam_divergence_limits() {
        assert_eq!(renyi_skellam_numeric(0, 10.0, 2).unwrap(), 0.0);
        let v = renyi_skellam_numeric(1, 10.0, 2).unwrap();
        assert!(v > 0.0);
        let big = renyi_skellam_numeric(1, 1e6, 2).unwrap();
        let gauss = 2.0 / (4.0 * 1e6);
        assert!(((big - gauss) / gauss).abs() < 0.01, "big={big} gauss={gauss}");
    }

    #[test]
    fn hockey_stick_basics() {
        let n01 = Density::Gaussian { mean: 0.0, std: 1.0 };
        let n11 = Density::Gaussian { mean: 1.0, std: 1.0 };
        for &a in &[1.0, 2.0, 5.0] {
            assert!(hockey_stick_numeric(n01, n01, a).unwrap().abs() < 1e-10);
        }
        assert!((hockey_stick_numeric(n11, n01, 0.0).unwrap() - 1.0).abs() < 1e-9);
        // Reference value from the standard normal CDF: Φ(-0.5) - e Φ(-1.5).
        let expected = 0.308_537_538_725_986_9 - std::f64::consts::E * 0.066_807_201_268_858_06;
        let v = hockey_stick_numeric(n11, n01, std::f64::consts::E).unwrap();
        assert!((v - expected).abs() < 1e-8, "v={v} expected={expected}");

        let s0 = Density::Skellam { shift: 0, mu: 4.0 };
        let s1 = Density::Skellam { shift: 1, mu: 4.0 };
        assert!(hockey_stick_numeric(s0, s0, 1.0).unwrap().abs() < 1e-14);
        assert!((hockey_stick_numeric(s1, s0, 0.0).unwrap() - 1.0).abs() < 1e-12);
        assert!(hockey_stick_numeric(s1, n01, 1.0).is_err());
    }

    #[test]
    fn subsampled_degenerate_rates() {
        for &a in &[2.0, 9.0, 33.0] {
            let full = renyi_subsampled_gaussian_numeric(1.0, 1.0, 1.0, a).unwrap();
            let plain = renyi_gaussian_numeric(1.0, 1.0, a).unwrap();
            assert!((full - plain).abs() < 1e-9 * plain.max(1.0));
            assert!(renyi_subsampled_gaussian_numeric(1.0, 1.0, 0.0, a).unwrap().abs() < 1e-12);
        }
    }
}
