//! Noise samplers and the fixed-point ring codec used by the discrete
//! pipeline.
//!
//! Every sampler is a pure function of its parameters and a [`SeedRecord`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedPurpose {
    Noise,
    Batch,
    Data,
    Init,
}

impl SeedPurpose {
    fn tag(self) -> &'static [u8] {
        match self {
            SeedPurpose::Noise => b"noise",
            SeedPurpose::Batch => b"batch",
            SeedPurpose::Data => b"data",
            SeedPurpose::Init => b"init",
        }
    }
}

/// Where a random stream comes from: `hash(run_seed, t, i, s, purpose)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedRecord {
    pub run_seed: u64,
    pub round: u64,
    pub client: u64,
    pub step: u64,
    pub purpose: SeedPurpose,
}

impl SeedRecord {
    pub fn new(run_seed: u64, round: u64, client: u64, step: u64, purpose: SeedPurpose) -> Self {
        Self {
            run_seed,
            round,
            client,
            step,
            purpose,
        }
    }

    pub fn with_purpose(self, purpose: SeedPurpose) -> Self {
        Self { purpose, ..self }
    }

    pub fn rng(&self) -> ChaCha20Rng {
        let mut h = Sha256::new();
        h.update(self.run_seed.to_le_bytes());
        h.update(self.round.to_le_bytes());
        h.update(self.client.to_le_bytes());
        h.update(self.step.to_le_bytes());
        h.update(self.purpose.tag());
        let digest: [u8; 32] = h.finalize().into();
        ChaCha20Rng::from_seed(digest)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NoiseValues {
    Real(Vec<f64>),
    Integer(Vec<i64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseDraw {
    pub values: NoiseValues,
    pub record: SeedRecord,
}

impl NoiseDraw {
    pub fn len(&self) -> usize {
        match &self.values {
            NoiseValues::Real(v) => v.len(),
            NoiseValues::Integer(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The draw as reals, in the units it was sampled in.
    pub fn to_reals(&self) -> Vec<f64> {
        match &self.values {
            NoiseValues::Real(v) => v.clone(),
            NoiseValues::Integer(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

/// iid `N(0, std²)` per coordinate.
pub fn sample_gaussian(dim: usize, std: f64, record: SeedRecord) -> Result<NoiseDraw> {
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::param(format!("noise std must be finite and >= 0, got {std}")));
    }
    let values = if std == 0.0 {
        vec![0.0; dim]
    } else {
        let mut rng = record.rng();
        (0..dim)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    Ok(NoiseDraw {
        values: NoiseValues::Real(values),
        record,
    })
}

/// iid symmetric Skellam per coordinate: `X − Y` with `X, Y ~ Poisson(μ)`.
pub fn sample_skellam(dim: usize, mu: f64, record: SeedRecord) -> Result<NoiseDraw> {
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(Error::param(format!("Poisson parameter must be finite and >= 0, got {mu}")));
    }
    let values = if mu == 0.0 {
        vec![0; dim]
    } else {
        let mut rng = record.rng();
        (0..dim)
            .map(|_| sample_poisson(&mut rng, mu) as i64 - sample_poisson(&mut rng, mu) as i64)
            .collect()
    };
    Ok(NoiseDraw {
        values: NoiseValues::Integer(values),
        record,
    })
}

/// Poisson sampler: sequential inversion below 30, Hörmann's PTRS
/// transformed rejection above.
pub fn sample_poisson<R: Rng + ?Sized>(rng: &mut R, mu: f64) -> u64 {
    if mu <= 0.0 {
        0
    } else if mu < 30.0 {
        poisson_inversion(rng, mu)
    } else {
        poisson_ptrs(rng, mu)
    }
}

fn poisson_inversion<R: Rng + ?Sized>(rng: &mut R, mu: f64) -> u64 {
    let u: f64 = rng.random();
    let mut k = 0u64;
    let mut p = (-mu).exp();
    let mut cdf = p;
    while u > cdf && p > 0.0 {
        k += 1;
        p *= mu / k as f64;
        cdf += p;
    }
    k
}

fn poisson_ptrs<R: Rng + ?Sized>(rng: &mut R, mu: f64) -> u64 {
    let slam = mu.sqrt();
    let loglam = mu.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = rng.random::<f64>() - 0.5;
        let v: f64 = rng.random();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + mu + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        if v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln() <= -mu + k * loglam - ln_gamma(k + 1.0) {
            return k as u64;
        }
    }
}

/// A vector of elements of `Z / 2^w`, carrying fixed-point values at `scale`
/// units per 1.0 in two's-complement representation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RingElementVector {
    values: Vec<u64>,
    width: u32,
    scale: u64,
}

fn check_width(width: u32) -> Result<()> {
    if !(2..=64).contains(&width) {
        return Err(Error::param(format!("ring width must be in 2..=64 bits, got {width}")));
    }
    Ok(())
}

fn mask(width: u32) -> u64 {
    if width == 64 {
        u64::MAX
    } else {
        (1u64 << width) - 1
    }
}

impl RingElementVector {
    /// Wraps raw ring elements; every value must be below `2^width`.
    pub fn from_raw(values: Vec<u64>, width: u32, scale: u64) -> Result<Self> {
        check_width(width)?;
        if scale == 0 {
            return Err(Error::param("fixed-point scale must be >= 1"));
        }
        if let Some(v) = values.iter().find(|&&v| v > mask(width)) {
            return Err(Error::param(format!("ring value {v} does not fit in {width} bits")));
        }
        Ok(Self { values, width, scale })
    }

    pub fn zeros(dim: usize, width: u32, scale: u64) -> Result<Self> {
        Self::from_raw(vec![0; dim], width, scale)
    }

    pub fn values(&self) -> &[u64] {
        &self.values
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn scale(&self) -> u64 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn to_ring(&self, x: i128) -> u64 {
        (x.rem_euclid(1i128 << self.width)) as u64
    }

    /// Additive inverse in the ring.
    pub fn negated(&self) -> Self {
        let m = mask(self.width);
        Self {
            values: self.values.iter().map(|&v| v.wrapping_neg() & m).collect(),
            ..self.clone()
        }
    }

    /// Adds integer noise (fixed-point units) coordinate-wise, modulo `2^w`.
    pub fn add_integer_noise(&mut self, noise: &[i64]) -> Result<()> {
        if noise.len() != self.values.len() {
            return Err(Error::Aggregation(format!(
                "noise has {} coordinates, vector has {}",
                noise.len(),
                self.values.len()
            )));
        }
        let m = mask(self.width);
        for (v, &n) in self.values.iter_mut().zip(noise) {
            *v = v.wrapping_add(n as u64) & m;
        }
        Ok(())
    }

    /// Adds another ring vector in place.
    pub fn add_assign(&mut self, other: &RingElementVector) -> Result<()> {
        if other.width != self.width || other.scale != self.scale || other.len() != self.len() {
            return Err(Error::Aggregation(format!(
                "shape mismatch: (w={}, s={}, d={}) vs (w={}, s={}, d={})",
                self.width,
                self.scale,
                self.len(),
                other.width,
                other.scale,
                other.len()
            )));
        }
        let m = mask(self.width);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a = a.wrapping_add(*b) & m;
        }
        Ok(())
    }

    /// Signed integer value of each element (two's complement).
    pub fn signed_values(&self) -> Vec<i128> {
        let half = 1i128 << (self.width - 1);
        self.values
            .iter()
            .map(|&v| {
                let v = i128::from(v);
                if v >= half {
                    v - (1i128 << self.width)
                } else {
                    v
                }
            })
            .collect()
    }
}

/// Largest admissible `|x|·s` for a ring of width `w` shared by up to
/// `max_clients` contributions: `2^{w−1} / (N_max + 1)`.
pub fn headroom_limit(width: u32, max_clients: u32) -> f64 {
    2f64.powi(width as i32 - 1) / f64::from(max_clients + 1)
}

/// Rounds each coordinate to the nearest point of the `1/scale` grid and maps
/// it into the ring. Fails if any `|x|·s` exceeds the aggregation headroom.
pub fn encode_fixed(x: &[f64], scale: u64, width: u32, max_clients: u32) -> Result<RingElementVector> {
    check_width(width)?;
    if scale == 0 {
        return Err(Error::param("fixed-point scale must be >= 1"));
    }
    let limit = headroom_limit(width, max_clients);
    let s = scale as f64;
    let mut out = RingElementVector {
        values: Vec::with_capacity(x.len()),
        width,
        scale,
    };
    for &xj in x {
        if !xj.is_finite() {
            return Err(Error::Numeric(format!("cannot encode non-finite value {xj}")));
        }
        let scaled = xj * s;
        if scaled.abs() >= limit {
            return Err(Error::Overflow {
                scaled: scaled.abs(),
                limit,
            });
        }
        let v = out.to_ring(scaled.round() as i128);
        out.values.push(v);
    }
    Ok(out)
}

/// Inverse of [`encode_fixed`] on the decode window `(−2^{w−1}/s, 2^{w−1}/s)`.
pub fn decode_fixed(v: &RingElementVector) -> Vec<f64> {
    let s = v.scale as f64;
    v.signed_values().into_iter().map(|x| x as f64 / s).collect()
}

/// Coordinate-wise sum modulo `2^w` of vectors sharing width, scale and
/// dimension.
pub fn aggregate_ring(inputs: &[RingElementVector]) -> Result<RingElementVector> {
    let (first, rest) = inputs
        .split_first()
        .ok_or_else(|| Error::Aggregation("nothing to aggregate".into()))?;
    let mut acc = first.clone();
    for v in rest {
        acc.add_assign(v)?;
    }
    Ok(acc)
}
