//! Client-side DP-SGD: Poisson minibatches, per-sample clipping, per-step
//! noise and the round's pseudo-gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data_models::{per_sample_grad, Dataset, LinearModel};
use crate::error::{Error, Result};
use crate::mechanisms::{
    decode_fixed, headroom_limit, sample_gaussian, sample_skellam, NoiseDraw, NoiseValues, RingElementVector, SeedPurpose,
    SeedRecord,
};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `g` by `min(1, C/‖g‖₂)`.
pub fn clip(g: &[f64], clip_norm: f64) -> Vec<f64> {
    let mut out = g.to_vec();
    clip_in_place(&mut out, clip_norm);
    out
}

/// In-place [`clip`]; returns the norm before clipping.
pub fn clip_in_place(g: &mut [f64], clip_norm: f64) -> f64 {
    let n = norm(g);
    if n > clip_norm {
        let f = clip_norm / n;
        g.iter_mut().for_each(|x| *x *= f);
    }
    n
}

/// Includes each of `0..n` independently with probability `rate`.
pub fn poisson_minibatch(n: usize, rate: f64, record: SeedRecord) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::param(format!("sampling rate must lie in [0, 1], got {rate}")));
    }
    if rate == 0.0 {
        return Ok(Vec::new());
    }
    if rate == 1.0 {
        return Ok((0..n).collect());
    }
    let mut rng = record.with_purpose(SeedPurpose::Batch).rng();
    Ok((0..n).filter(|_| rng.random::<f64>() < rate).collect())
}

/// Where the noise lives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseMode {
    /// Real-valued Gaussian noise.
    Real,
    /// Fixed-point encoding on the `1/scale` grid, Skellam noise in the ring
    /// `Z_{2^width}` shared by up to `max_clients` contributions.
    Discrete { width: u32, scale: u64, max_clients: u32 },
}

/// One client's local optimiser settings for a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalConfig {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub sampling_rate: f64,
    /// `γ_s` for each (fused) step; the length is the number of steps S.
    pub step_sizes: Vec<f64>,
    /// L2 penalty folded into every per-sample gradient before clipping.
    pub l2: f64,
    /// Fine steps per accounted step. A fused step draws `fusion_factor`
    /// Poisson batches, evaluates all of them at the parameters at the start
    /// of the step, and adds one noise draw with std `σ·fusion_factor·C`.
    pub fusion_factor: u32,
    pub mode: NoiseMode,
}

impl LocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::param(format!("clip norm must be positive, got {}", self.clip_norm)));
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return Err(Error::param(format!(
                "noise multiplier must be finite and >= 0, got {}",
                self.noise_multiplier
            )));
        }
        if !(0.0..=1.0).contains(&self.sampling_rate) {
            return Err(Error::param(format!("sampling rate must lie in [0, 1], got {}", self.sampling_rate)));
        }
        if self.step_sizes.is_empty() {
            return Err(Error::param("a local round needs at least one step"));
        }
        if let Some(g) = self.step_sizes.iter().find(|g| !(**g >= 0.0 && g.is_finite())) {
            return Err(Error::param(format!("step sizes must be finite and >= 0, got {g}")));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::param(format!("L2 penalty must be finite and >= 0, got {}", self.l2)));
        }
        if self.fusion_factor == 0 {
            return Err(Error::Fusion("fusion factor must be >= 1".into()));
        }
        if let NoiseMode::Discrete { width, scale, .. } = self.mode {
            if !(2..=64).contains(&width) || scale == 0 {
                return Err(Error::param(format!("invalid ring: width {width}, scale {scale}")));
            }
            if self.step_sizes.iter().any(|&g| g != self.step_sizes[0]) {
                return Err(Error::UnsupportedMechanism(
                    "discrete mode needs one step size for all steps so the round sum stays on the grid".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.step_sizes.len()
    }
}

/// Trace of one (fused) local step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalStepRecord {
    pub step: usize,
    pub expected_batch: f64,
    /// Samples drawn across the step's batches.
    pub batch_size: usize,
    /// Sum of clipped per-sample gradients (in discrete mode, the decoded sum
    /// of their fixed-point encodings).
    pub clipped_sum: Vec<f64>,
    pub noise: NoiseDraw,
    pub step_size: f64,
    /// Largest norm of a per-sample contribution entering the sum.
    pub max_contribution_norm: f64,
    /// Fixed-point scale of integer noise (discrete mode).
    pub scale: Option<u64>,
}

impl LocalStepRecord {
    /// Noise in gradient units.
    pub fn noise_reals(&self) -> Vec<f64> {
        let s = self.scale.unwrap_or(1) as f64;
        self.noise.to_reals().into_iter().map(|x| x / s).collect()
    }
}

/// The update a client hands to the aggregator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Delta {
    Real(Vec<f64>),
    /// `Δ = −step_size · decode(sum)`, with `sum = Σ_s (encoded g_s + ξ_s)`.
    Ring { sum: RingElementVector, step_size: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoGradient {
    pub delta: Delta,
    pub round: u64,
    pub client: u64,
}

impl PseudoGradient {
    pub fn to_reals(&self) -> Vec<f64> {
        match &self.delta {
            Delta::Real(v) => v.clone(),
            Delta::Ring { sum, step_size } => decode_fixed(sum).into_iter().map(|x| -step_size * x).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LocalRoundOutput {
    pub pseudo_gradient: PseudoGradient,
    pub steps: Vec<LocalStepRecord>,
}

/// Runs S DP-SGD steps from `global` on `data` and returns `θ_S − θ_0`.
///
/// `seed` fixes run, round and client; step and purpose are filled in here.
/// In discrete mode every per-sample clipped gradient is rounded to the grid
/// (after clipping to `C − √d/(2s)`, so the rounded vector still has norm at
/// most `C`), summed as integers, and Skellam noise with
/// `μ = (s·σ·k·C)²/2` is added in the ring.
pub fn local_round(global: &LinearModel, data: &Dataset, config: &LocalConfig, seed: SeedRecord) -> Result<LocalRoundOutput> {
    config.validate()?;
    if data.n_features() != global.n_features() || data.num_classes() > global.num_classes() {
        return Err(Error::Data(format!(
            "data ({} features, {} classes) does not fit the model ({} features, {} classes)",
            data.n_features(),
            data.num_classes(),
            global.n_features(),
            global.num_classes()
        )));
    }
    let dim = global.n_params();
    let k = config.fusion_factor as usize;
    let fused_clip = config.clip_norm * k as f64;
    let noise_std = config.noise_multiplier * fused_clip;
    let mut local = global.clone();
    let mut steps = Vec::with_capacity(config.steps());

    let discrete = match config.mode {
        NoiseMode::Real => None,
        NoiseMode::Discrete { width, scale, max_clients } => {
            let s = scale as f64;
            let per_sample_clip = config.clip_norm - (dim as f64).sqrt() / (2.0 * s);
            if per_sample_clip <= 0.0 {
                return Err(Error::param(format!(
                    "scale {scale} is too coarse for clip {} in dimension {dim}",
                    config.clip_norm
                )));
            }
            Some((RingElementVector::zeros(dim, width, scale)?, s, per_sample_clip, headroom_limit(width, max_clients)))
        }
    };
    let mut ring = discrete;

    for (step, &gamma) in config.step_sizes.iter().enumerate() {
        let at = local.clone();
        let mut batch_size = 0;
        let mut max_norm: f64 = 0.0;
        let mut real_sum = vec![0.0; dim];
        let mut int_sum = vec![0i64; dim];
        for fine in 0..k {
            let rec = SeedRecord { step: (step * k + fine) as u64, ..seed };
            let batch = poisson_minibatch(data.len(), config.sampling_rate, rec)?;
            batch_size += batch.len();
            for i in batch {
                let mut g = per_sample_grad(&at, data.row(i), data.label(i), config.l2);
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient at step {step}, sample {i}")));
                }
                match &ring {
                    None => {
                        clip_in_place(&mut g, config.clip_norm);
                        max_norm = max_norm.max(norm(&g));
                        real_sum.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                    Some((_, s, per_sample_clip, _)) => {
                        clip_in_place(&mut g, *per_sample_clip);
                        let q: Vec<i64> = g.iter().map(|x| (x * s).round() as i64).collect();
                        let qn = q.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt() / s;
                        max_norm = max_norm.max(qn);
                        int_sum.iter_mut().zip(&q).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
        let noise_rec = SeedRecord {
            step: step as u64,
            purpose: SeedPurpose::Noise,
            ..seed
        };
        let (clipped_sum, noise, scale) = match &mut ring {
            None => {
                let noise = sample_gaussian(dim, noise_std, noise_rec)?;
                let NoiseValues::Real(xi) = &noise.values else { unreachable!() };
                for ((p, g), n) in local.params_mut().iter_mut().zip(&real_sum).zip(xi) {
                    *p -= gamma * (g + n);
                }
                (real_sum, noise, None)
            }
            Some((acc, s, _, limit)) => {
                let fp_std = *s * noise_std;
                let noise = sample_skellam(dim, 0.5 * fp_std * fp_std, noise_rec)?;
                let NoiseValues::Integer(xi) = &noise.values else { unreachable!() };
                let total: Vec<i64> = int_sum.iter().zip(xi).map(|(a, b)| a + b).collect();
                acc.add_integer_noise(&total)?;
                if let Some(v) = acc.signed_values().into_iter().find(|v| (*v as f64).abs() >= *limit) {
                    return Err(Error::Overflow {
                        scaled: (v as f64).abs(),
                        limit: *limit,
                    });
                }
                for (p, t) in local.params_mut().iter_mut().zip(&total) {
                    *p -= gamma * (*t as f64 / *s);
                }
                (int_sum.iter().map(|&v| v as f64 / *s).collect(), noise, Some(acc.scale()))
            }
        };
        if local.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric(format!("local parameters diverged at step {step}")));
        }
        steps.push(LocalStepRecord {
            step,
            expected_batch: config.sampling_rate * data.len() as f64 * k as f64,
            batch_size,
            clipped_sum,
            noise,
            step_size: gamma,
            max_contribution_norm: max_norm,
            scale,
        });
    }

    let delta = match ring {
        None => Delta::Real(local.params().iter().zip(global.params()).map(|(a, b)| a - b).collect()),
        Some((sum, ..)) => Delta::Ring {
            sum,
            step_size: config.step_sizes[0],
        },
    };
    Ok(LocalRoundOutput {
        pseudo_gradient: PseudoGradient {
            delta,
            round: seed.round,
            client: seed.client,
        },
        steps,
    })
}
