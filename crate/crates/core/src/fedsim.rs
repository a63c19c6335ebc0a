//! Federated rounds: parallel local DP-SGD, trusted aggregation, FedAvg and
//! per-round metrics.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accounting::{MechanismSpec, NoiseFamily, PrivacyBudget, SubsamplingSpec, DEFAULT_FIXEDPOINT_SCALE};
use crate::data_models::{iid_partition, load_csv, make_synthetic, train_test_split, CsvSchema, Dataset, LinearModel, Normalization};
use crate::dpsgd::{local_round, Delta, LocalConfig, NoiseMode, PseudoGradient};
use crate::error::{Error, Result};
use crate::joint::{account_joint, calibrate_joint_noise, epochs_to_steps, AccountingPlan, FusionSpec, HeterogeneityDescriptor};
use crate::mechanisms::{decode_fixed, RingElementVector, SeedPurpose, SeedRecord};
use crate::report::{accounting_report, AccountingReport};

pub const DEFAULT_DELTA: f64 = 1e-5;
pub const DEFAULT_RING_WIDTH: u32 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalModel {
    pub model: LinearModel,
    pub round: u32,
}

impl GlobalModel {
    pub fn new(model: LinearModel) -> Self {
        Self { model, round: 0 }
    }
}

/// A client: its training rows (indices into the shared training set, used to
/// check disjointness), the rows themselves and its local optimiser settings.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: u64,
    pub rows: Vec<usize>,
    pub data: Dataset,
    pub config: LocalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u32,
    pub loss: f64,
    pub accuracy: f64,
    pub wall_time_s: f64,
    pub eps_spent: f64,
}

/// The server's view of one round: the sum of all submitted updates and
/// nothing else.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    clients: usize,
    sum: Vec<f64>,
}

impl Aggregate {
    pub fn clients(&self) -> usize {
        self.clients
    }

    pub fn sum(&self) -> &[f64] {
        &self.sum
    }
}

enum Accumulator {
    Empty,
    Real(Vec<f64>),
    Ring { sum: RingElementVector, step_size: f64 },
}

/// Idealised secure aggregation. Updates go in one at a time and are
/// consumed; only [`Aggregate`] comes out.
pub struct TrustedAggregator {
    acc: Accumulator,
    submitted: usize,
}

impl Default for TrustedAggregator {
    fn default() -> Self {
        Self::new()
    }
}

impl TrustedAggregator {
    pub fn new() -> Self {
        Self {
            acc: Accumulator::Empty,
            submitted: 0,
        }
    }

    pub fn submit(&mut self, update: PseudoGradient) -> Result<()> {
        self.acc = match (std::mem::replace(&mut self.acc, Accumulator::Empty), update.delta) {
            (Accumulator::Empty, Delta::Real(v)) => Accumulator::Real(v),
            (Accumulator::Empty, Delta::Ring { sum, step_size }) => Accumulator::Ring { sum, step_size },
            (Accumulator::Real(mut acc), Delta::Real(v)) => {
                if acc.len() != v.len() {
                    return Err(Error::Aggregation(format!("update of length {} into sum of length {}", v.len(), acc.len())));
                }
                acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
                Accumulator::Real(acc)
            }
            (Accumulator::Ring { mut sum, step_size }, Delta::Ring { sum: s, step_size: g }) => {
                if g != step_size {
                    return Err(Error::Aggregation(format!(
                        "ring updates need a common step size, got {g} and {step_size}"
                    )));
                }
                sum.add_assign(&s)?;
                Accumulator::Ring { sum, step_size }
            }
            _ => return Err(Error::Aggregation("cannot mix real and ring updates".into())),
        };
        self.submitted += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<Aggregate> {
        let sum = match self.acc {
            Accumulator::Empty => return Err(Error::Aggregation("no updates submitted".into())),
            Accumulator::Real(v) => v,
            Accumulator::Ring { sum, step_size } => decode_fixed(&sum).into_iter().map(|x| -step_size * x).collect(),
        };
        Ok(Aggregate {
            clients: self.submitted,
            sum,
        })
    }
}

/// `θ ← θ + (1/N)·Σ Δ_i`.
pub fn apply_aggregate(model: &GlobalModel, aggregate: &Aggregate) -> Result<GlobalModel> {
    if aggregate.sum.len() != model.model.n_params() {
        return Err(Error::Aggregation(format!(
            "aggregate has {} coordinates, model has {}",
            aggregate.sum.len(),
            model.model.n_params()
        )));
    }
    let n = aggregate.clients as f64;
    let params = model
        .model
        .params()
        .iter()
        .zip(&aggregate.sum)
        .map(|(p, s)| p + s / n)
        .collect();
    Ok(GlobalModel {
        model: LinearModel::from_params(model.model.n_features(), model.model.num_classes(), params)?,
        round: model.round + 1,
    })
}

/// Clients, held-out data and the accounting plan of a run.
#[derive(Debug, Clone)]
pub struct Federation {
    pub clients: Vec<ClientState>,
    pub test: Dataset,
    pub plan: AccountingPlan,
    pub delta: f64,
}

impl Federation {
    pub fn new(clients: Vec<ClientState>, test: Dataset, plan: AccountingPlan, delta: f64) -> Result<Self> {
        plan.validate()?;
        if clients.len() != plan.n_clients as usize {
            return Err(Error::Plan(format!(
                "{} clients but the plan accounts for {}",
                clients.len(),
                plan.n_clients
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &clients {
            if c.rows.len() != c.data.len() {
                return Err(Error::Data(format!("client {}: {} row ids for {} rows", c.id, c.rows.len(), c.data.len())));
            }
            for &r in &c.rows {
                if !seen.insert(r) {
                    return Err(Error::Data(format!("row {r} belongs to more than one client")));
                }
            }
        }
        Ok(Self {
            clients,
            test,
            plan,
            delta,
        })
    }

    /// ε spent after `rounds` rounds.
    pub fn epsilon_after(&self, rounds: u32) -> Result<f64> {
        if rounds == 0 {
            return Ok(0.0);
        }
        Ok(account_joint(&self.plan.with_rounds(rounds), self.delta)?.epsilon)
    }

    /// One FedAvg round with every client participating.
    pub fn run_round(&self, model: &GlobalModel, run_seed: u64) -> Result<(GlobalModel, RoundMetrics)> {
        let start = Instant::now();
        let round = model.round + 1;
        let updates: Vec<PseudoGradient> = self
            .clients
            .par_iter()
            .map(|c| {
                let seed = SeedRecord::new(run_seed, u64::from(round), c.id, 0, SeedPurpose::Noise);
                local_round(&model.model, &c.data, &c.config, seed).map(|out| out.pseudo_gradient)
            })
            .collect::<Result<_>>()?;
        let mut aggregator = TrustedAggregator::new();
        for u in updates {
            aggregator.submit(u)?;
        }
        let next = apply_aggregate(model, &aggregator.finish()?)?;
        let (loss, accuracy) = next.model.evaluate(&self.test);
        let metrics = RoundMetrics {
            round,
            loss,
            accuracy,
            wall_time_s: start.elapsed().as_secs_f64(),
            eps_spent: self.epsilon_after(round)?,
        };
        Ok((next, metrics))
    }
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_separation() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    /// Gaussian blobs split iid across `clients`.
    Synthetic {
        samples: usize,
        features: usize,
        classes: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        clients: usize,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    /// A CSV file; clients come from the schema's group column, or from an
    /// iid split into `clients` shares when there is none.
    Csv {
        path: PathBuf,
        schema: CsvSchema,
        #[serde(default)]
        normalization: Normalization,
        #[serde(default)]
        clients: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    /// Step size per unit of mean gradient; the step applied to the noisy
    /// gradient sum is `lr / (q · mean client size)`.
    pub lr: f64,
    #[serde(default)]
    pub local_steps: Option<u32>,
    #[serde(default)]
    pub local_epochs: Option<u32>,
    pub sampling_rate: f64,
    #[serde(default)]
    pub l2: f64,
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

fn default_scale() -> u64 {
    DEFAULT_FIXEDPOINT_SCALE
}

fn default_ring_width() -> u32 {
    DEFAULT_RING_WIDTH
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyConfig {
    pub mechanism: NoiseFamily,
    pub clip_norm: f64,
    /// Per-client noise multiplier; mutually exclusive with `target_epsilon`.
    #[serde(default)]
    pub noise_multiplier: Option<f64>,
    /// Calibrate the per-client noise multiplier to this ε over all rounds.
    #[serde(default)]
    pub target_epsilon: Option<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_scale")]
    pub scale: u64,
    #[serde(default = "default_ring_width")]
    pub ring_width: u32,
    #[serde(default)]
    pub heterogeneity: Option<HeterogeneityDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: u32,
    pub data: DataConfig,
    pub training: TrainingConfig,
    pub privacy: PrivacyConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string().trim_end().to_string()]))
    }

    /// Reads a config file; a relative CSV path is resolved against the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text)?;
        if let DataConfig::Csv { path: csv, .. } = &mut config.data {
            if csv.is_relative() {
                if let Some(dir) = path.parent() {
                    *csv = dir.join(&*csv);
                }
            }
        }
        Ok(config)
    }

    /// Every problem found, each prefixed with its key path.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                errs.push(msg);
            }
        };
        match &self.data {
            DataConfig::Synthetic {
                samples,
                features,
                classes,
                separation,
                clients,
                test_fraction,
            } => {
                check(*samples >= 1, "data.samples: must be >= 1".into());
                check(*features >= 1, "data.features: must be >= 1".into());
                check(*classes >= 2, "data.classes: must be >= 2".into());
                check(
                    *separation >= 0.0 && separation.is_finite(),
                    format!("data.separation: must be finite and >= 0, got {separation}"),
                );
                check(*clients >= 1, "data.clients: must be >= 1".into());
                check(
                    (0.0..1.0).contains(test_fraction),
                    format!("data.test_fraction: must lie in [0, 1), got {test_fraction}"),
                );
                check(
                    ((*samples as f64) * (1.0 - test_fraction)).round() as usize >= *clients,
                    format!("data.clients: {clients} clients need at least as many training rows"),
                );
            }
            DataConfig::Csv { schema, clients, .. } => {
                check(
                    (0.0..1.0).contains(&schema.test_fraction),
                    format!("data.schema.test_fraction: must lie in [0, 1), got {}", schema.test_fraction),
                );
                check(
                    schema.group.is_some() != clients.is_some(),
                    "data: give exactly one of schema.group and clients".into(),
                );
                check(clients.is_none_or(|c| c >= 1), "data.clients: must be >= 1".into());
            }
        }
        let t = &self.training;
        check(t.lr >= 0.0 && t.lr.is_finite(), format!("training.lr: must be finite and >= 0, got {}", t.lr));
        check(
            (0.0..=1.0).contains(&t.sampling_rate),
            format!("training.sampling_rate: must lie in [0, 1], got {}", t.sampling_rate),
        );
        check(t.l2 >= 0.0 && t.l2.is_finite(), format!("training.l2: must be finite and >= 0, got {}", t.l2));
        match (t.local_steps, t.local_epochs) {
            (Some(s), None) => check(s >= 1, "training.local_steps: must be >= 1".into()),
            (None, Some(e)) => {
                check(e >= 1, "training.local_epochs: must be >= 1".into());
                check(t.sampling_rate > 0.0, "training.local_epochs: needs sampling_rate > 0".into());
            }
            _ => check(false, "training: give exactly one of local_steps and local_epochs".into()),
        }
        let p = &self.privacy;
        check(
            p.clip_norm > 0.0 && p.clip_norm.is_finite(),
            format!("privacy.clip_norm: must be positive, got {}", p.clip_norm),
        );
        match (p.noise_multiplier, p.target_epsilon) {
            (Some(s), None) => check(
                s >= 0.0 && s.is_finite(),
                format!("privacy.noise_multiplier: must be finite and >= 0, got {s}"),
            ),
            (None, Some(e)) => check(e > 0.0 && e.is_finite(), format!("privacy.target_epsilon: must be positive, got {e}")),
            _ => check(false, "privacy: give exactly one of noise_multiplier and target_epsilon".into()),
        }
        check(
            p.delta > 0.0 && p.delta < 1.0,
            format!("privacy.delta: must lie in (0, 1), got {}", p.delta),
        );
        check(p.scale >= 1, "privacy.scale: must be >= 1".into());
        check(
            (2..=64).contains(&p.ring_width),
            format!("privacy.ring_width: must lie in 2..=64, got {}", p.ring_width),
        );
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn local_steps(&self) -> Result<u32> {
        match (self.training.local_steps, self.training.local_epochs) {
            (Some(s), _) => Ok(s),
            (None, Some(e)) => epochs_to_steps(e, self.training.sampling_rate),
            (None, None) => Err(Error::Config(vec!["training: missing local_steps".into()])),
        }
    }
}

/// Final results of a run besides the per-round table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub local_steps: u32,
    pub noise_multiplier: f64,
    pub step_size: f64,
    pub client_sizes: Vec<usize>,
    pub test_size: usize,
    pub majority_baseline: f64,
    pub final_loss: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub best_accuracy: Option<f64>,
    pub best_round: Option<u32>,
    pub eps_spent: f64,
    /// Absent when no round ran.
    pub accounting: Option<AccountingReport>,
    /// Per-round metrics, including wall time (kept out of the CSV so that it
    /// stays reproducible).
    pub rounds: Vec<RoundMetrics>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub metrics: Vec<RoundMetrics>,
    pub report: ExperimentReport,
    pub model: GlobalModel,
}

fn load_data(config: &ExperimentConfig) -> Result<(Dataset, Vec<Vec<usize>>, Dataset)> {
    match &config.data {
        DataConfig::Synthetic {
            samples,
            features,
            classes,
            separation,
            clients,
            test_fraction,
        } => {
            let data = make_synthetic(*samples, *features, *classes, *separation, config.seed)?;
            let (train, test) = train_test_split(&data, *test_fraction, config.seed)?;
            let parts = iid_partition(train.len(), *clients, config.seed)?;
            Ok((train, parts, test))
        }
        DataConfig::Csv {
            path,
            schema,
            normalization,
            clients,
        } => {
            let table = load_csv(path, schema, *normalization)?;
            let parts = match clients {
                Some(n) => iid_partition(table.train.len(), *n, config.seed)?,
                None => table.client_partition(),
            };
            Ok((table.train, parts, table.test))
        }
    }
}

/// Builds the federation of a config without running it; also returns the
/// per-client noise multiplier (given or calibrated) and the step size.
pub fn build_federation(config: &ExperimentConfig) -> Result<(Federation, f64, f64)> {
    config.validate()?;
    let (train, parts, test) = load_data(config)?;
    if let Some(i) = parts.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("client {i} has no training rows")));
    }
    let n_clients = parts.len() as u32;
    let (d, k) = (train.n_features(), train.num_classes());
    let dim = k * (d + 1);
    let steps = config.local_steps()?;
    let p = &config.privacy;
    let q = config.training.sampling_rate;
    let mechanism = match p.mechanism {
        NoiseFamily::Gaussian => MechanismSpec::gaussian(p.noise_multiplier.unwrap_or(1.0), p.clip_norm),
        NoiseFamily::Skellam => MechanismSpec::skellam(p.noise_multiplier.unwrap_or(1.0), p.clip_norm, p.scale, dim),
    };
    let mut plan = AccountingPlan::homogeneous(n_clients, steps, config.rounds.max(1), q, mechanism);
    plan.subsampling = SubsamplingSpec::new(q)?;
    plan.heterogeneity = p.heterogeneity.clone();
    let sigma = match (p.noise_multiplier, p.target_epsilon) {
        (Some(s), _) => s,
        (None, Some(eps)) if config.rounds > 0 => calibrate_joint_noise(&plan, PrivacyBudget::new(eps, p.delta)?)?,
        // Nothing is released without rounds; any level is private.
        (None, _) => 1.0,
    };
    plan = plan.with_noise_multiplier(sigma).with_rounds(config.rounds.max(1));
    plan.validate()?;

    let mean_size = parts.iter().map(Vec::len).sum::<usize>() as f64 / parts.len() as f64;
    let step_size = config.training.lr / (q * mean_size).max(1.0);
    let h = p.heterogeneity.clone().unwrap_or_default();
    let mode = match p.mechanism {
        NoiseFamily::Gaussian => NoiseMode::Real,
        NoiseFamily::Skellam => NoiseMode::Discrete {
            width: p.ring_width,
            scale: p.scale,
            max_clients: n_clients,
        },
    };
    let clients = parts
        .into_iter()
        .enumerate()
        .map(|(i, rows)| {
            let pick = |v: &Option<Vec<f64>>, default: f64| v.as_ref().map_or(default, |v| v[i]);
            let divisor = pick(&h.client_lr_divisors, 1.0);
            let fusion = h.fusion.as_ref().map_or(
                FusionSpec {
                    steps_taken: steps,
                    fusion_factor: 1,
                },
                |f| f[i],
            );
            let step_sizes = (0..steps as usize)
                .map(|s| step_size * h.per_step_lr.as_ref().map_or(1.0, |lr| lr[s]) / divisor)
                .collect();
            ClientState {
                id: i as u64,
                data: train.subset(&rows),
                rows,
                config: LocalConfig {
                    clip_norm: pick(&h.per_client_clip, p.clip_norm),
                    noise_multiplier: pick(&h.per_client_sigma, sigma),
                    sampling_rate: q,
                    step_sizes,
                    l2: config.training.l2,
                    fusion_factor: fusion.fusion_factor,
                    mode,
                },
            }
        })
        .collect();
    Ok((Federation::new(clients, test, plan, p.delta)?, sigma, step_size))
}

/// Runs all rounds of a config from a zero-initialised model.
pub fn run_training(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let start = Instant::now();
    let (fed, sigma, step_size) = build_federation(config)?;
    let first = &fed.clients[0].data;
    let k = fed.clients.iter().map(|c| c.data.num_classes()).max().unwrap_or(1).max(fed.test.num_classes());
    let mut model = GlobalModel::new(LinearModel::zeros(first.n_features(), k));
    let mut metrics = Vec::with_capacity(config.rounds as usize);
    for _ in 0..config.rounds {
        let (next, m) = fed.run_round(&model, config.seed)?;
        model = next;
        metrics.push(m);
    }
    let best = metrics.iter().max_by(|a, b| a.accuracy.total_cmp(&b.accuracy).then(b.round.cmp(&a.round)));
    let accounting = if config.rounds > 0 {
        Some(accounting_report(&fed.plan.with_rounds(config.rounds), fed.delta, None)?)
    } else {
        None
    };
    let report = ExperimentReport {
        config: config.clone(),
        local_steps: fed.plan.local_steps,
        noise_multiplier: sigma,
        step_size,
        client_sizes: fed.clients.iter().map(|c| c.data.len()).collect(),
        test_size: fed.test.len(),
        majority_baseline: fed.test.majority_fraction(),
        final_loss: metrics.last().map(|m| m.loss),
        final_accuracy: metrics.last().map(|m| m.accuracy),
        best_accuracy: best.map(|m| m.accuracy),
        best_round: best.map(|m| m.round),
        eps_spent: metrics.last().map_or(0.0, |m| m.eps_spent),
        accounting,
        rounds: metrics.clone(),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok(ExperimentOutcome { metrics, report, model })
}

/// Writes `round,loss,accuracy,eps_spent` rows (header only when empty).
pub fn write_metrics_csv<W: std::io::Write>(metrics: &[RoundMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["round", "loss", "accuracy", "eps_spent"])?;
    for m in metrics {
        w.write_record([
            m.round.to_string(),
            m.loss.to_string(),
            m.accuracy.to_string(),
            m.eps_spent.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("metrics.csv", e))?;
    Ok(())
}

/// Runs a config and writes `metrics.csv` and `report.json` into `out_dir`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutcome> {
    let outcome = run_training(config)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join("metrics.csv");
    let file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    write_metrics_csv(&outcome.metrics, std::io::BufWriter::new(file))?;
    let json_path = out_dir.join("report.json");
    let json = serde_json::to_string_pretty(&outcome.report)?;
    std::fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;
    Ok(outcome)
}

/// How one pretrained model was made private.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelProvenance {
    pub mechanism: MechanismSpec,
    pub local_steps: u32,
    pub sampling_rate: f64,
}

/// Uniform average of independently trained private models and the budget
/// the average enjoys as one joint release.
///
/// Models with more steps are fused down to the smallest step count: a model
/// with `k·S` steps at clip `C_k` and multiplier `σ_k` becomes an `S`-step
/// model with clip `k·C_k` and multiplier `σ_k/√k` (the per-step noise of the
/// `k` fine steps adds up). Fused clips must agree.
pub fn average_pretrained_models(
    params: &[Vec<f64>],
    provenance: &[ModelProvenance],
    delta: f64,
) -> Result<(Vec<f64>, PrivacyBudget)> {
    if params.is_empty() || params.len() != provenance.len() {
        return Err(Error::Provenance(format!(
            "{} models with {} provenance records",
            params.len(),
            provenance.len()
        )));
    }
    let dim = params[0].len();
    if params.iter().any(|p| p.len() != dim) {
        return Err(Error::Provenance("models differ in parameter count".into()));
    }
    let first = provenance[0];
    for (i, p) in provenance.iter().enumerate() {
        p.mechanism.validate()?;
        let m = &p.mechanism;
        if m.family != first.mechanism.family
            || m.fixedpoint_scale != first.mechanism.fixedpoint_scale
            || m.dimension != first.mechanism.dimension
            || p.sampling_rate != first.sampling_rate
        {
            return Err(Error::Provenance(format!(
                "model {i}: noise family, grid or sampling rate differs from model 0"
            )));
        }
    }
    let steps = provenance.iter().map(|p| p.local_steps).min().unwrap_or(0);
    if steps == 0 {
        return Err(Error::Provenance("models must have taken at least one step".into()));
    }
    let mut fusion = Vec::with_capacity(provenance.len());
    let mut clips = Vec::with_capacity(provenance.len());
    let mut sigmas = Vec::with_capacity(provenance.len());
    for (i, p) in provenance.iter().enumerate() {
        if p.local_steps % steps != 0 {
            return Err(Error::Provenance(format!(
                "model {i}: {} steps cannot be fused onto {steps}",
                p.local_steps
            )));
        }
        let k = p.local_steps / steps;
        fusion.push(FusionSpec {
            steps_taken: p.local_steps,
            fusion_factor: k,
        });
        clips.push(p.mechanism.clip_norm);
        sigmas.push(p.mechanism.noise_multiplier / f64::from(k).sqrt());
    }
    let fused: Vec<f64> = fusion.iter().zip(&clips).map(|(f, c)| f64::from(f.fusion_factor) * c).collect();
    if fused.iter().any(|c| (c - fused[0]).abs() > 1e-9 * fused[0]) {
        return Err(Error::Provenance(format!("fused clip norms disagree: {fused:?}")));
    }
    let mut plan = AccountingPlan::homogeneous(
        params.len() as u32,
        steps,
        1,
        first.sampling_rate,
        MechanismSpec {
            clip_norm: fused[0],
            ..first.mechanism
        },
    );
    if provenance.iter().any(|p| p.local_steps != steps || p.mechanism != first.mechanism) {
        plan.heterogeneity = Some(HeterogeneityDescriptor {
            per_client_clip: Some(clips),
            per_client_sigma: Some(sigmas),
            fusion: Some(fusion),
            ..Default::default()
        });
    }
    let n = params.len() as f64;
    let mut avg = vec![0.0; dim];
    for p in params {
        avg.iter_mut().zip(p).for_each(|(a, x)| *a += x);
    }
    avg.iter_mut().for_each(|a| *a /= n);
    Ok((avg, account_joint(&plan, delta)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(mechanism: NoiseFamily, rounds: u32) -> ExperimentConfig {
        ExperimentConfig::from_toml(&format!(
            r#"
            seed = 3
            rounds = {rounds}
            [data]
            source = "synthetic"
            samples = 600
            features = 5
            classes = 3
            separation = 3.0
            clients = 4
            [training]
            lr = 0.5
            local_steps = 3
            sampling_rate = 0.1
            [privacy]
            mechanism = "{mechanism}"
            clip_norm = 1.0
            noise_multiplier = 1.0
            "#
        ))
        .unwrap()
    }

    fn real(v: Vec<f64>, client: u64) -> PseudoGradient {
        PseudoGradient {
            delta: Delta::Real(v),
            round: 1,
            client,
        }
    }

    fn global() -> GlobalModel {
        GlobalModel::new(LinearModel::from_params(1, 2, vec![0.5, -0.25, 1.0, 2.0]).unwrap())
    }

    #[test]
    fn fedavg_identities() {
        let g = global();
        let mut agg = TrustedAggregator::new();
        agg.submit(real(vec![0.0; 4], 0)).unwrap();
        agg.submit(real(vec![0.0; 4], 1)).unwrap();
        assert_eq!(apply_aggregate(&g, &agg.finish().unwrap()).unwrap().model, g.model);

        let mut agg = TrustedAggregator::new();
        let d = vec![0.1, 0.2, -0.3, 0.4];
        agg.submit(real(d.clone(), 0)).unwrap();
        let next = apply_aggregate(&g, &agg.finish().unwrap()).unwrap();
        for ((a, b), c) in next.model.params().iter().zip(g.model.params()).zip(&d) {
            assert_eq!(*a, b + c);
        }
        assert_eq!(next.round, 1);

        // Opposite ring updates cancel exactly inside the aggregate.
        let mut u = RingElementVector::zeros(4, 32, 1 << 10).unwrap();
        u.add_integer_noise(&[5, -7, 1 << 12, -3]).unwrap();
        let mut agg = TrustedAggregator::new();
        for (client, sum) in [(0, u.clone()), (1, u.negated())] {
            agg.submit(PseudoGradient {
                delta: Delta::Ring { sum, step_size: 0.3 },
                round: 1,
                client,
            })
            .unwrap();
        }
        assert_eq!(apply_aggregate(&g, &agg.finish().unwrap()).unwrap().model, g.model);
    }

    #[test]
    fn aggregator_rejects_mixed_updates() {
        let mut agg = TrustedAggregator::new();
        agg.submit(real(vec![0.0; 4], 0)).unwrap();
        let ring = PseudoGradient {
            delta: Delta::Ring {
                sum: RingElementVector::zeros(4, 32, 1).unwrap(),
                step_size: 1.0,
            },
            round: 1,
            client: 1,
        };
        assert!(agg.submit(ring).is_err());
        assert!(TrustedAggregator::new().finish().is_err());
    }

    #[test]
    fn discrete_round_equals_mean_of_client_updates() {
        let (fed, _, _) = build_federation(&config(NoiseFamily::Skellam, 1)).unwrap();
        let g = GlobalModel::new(LinearModel::zeros(5, 3));
        let (next, _) = fed.run_round(&g, 3).unwrap();
        // Recompute each client's update outside the aggregator.
        let mut sum = vec![0i128; g.model.n_params()];
        let mut gamma = 0.0;
        for c in &fed.clients {
            let seed = SeedRecord::new(3, 1, c.id, 0, SeedPurpose::Noise);
            let out = local_round(&g.model, &c.data, &c.config, seed).unwrap();
            let Delta::Ring { sum: u, step_size } = out.pseudo_gradient.delta else { panic!() };
            gamma = step_size;
            sum.iter_mut().zip(u.signed_values()).for_each(|(a, b)| *a += b);
        }
        let s = 65536.0;
        for (p, v) in next.model.params().iter().zip(&sum) {
            assert_eq!(*p, 0.0 + (-gamma * (*v as f64 / s)) / 4.0);
        }
    }

    #[test]
    fn epsilon_matches_accounting_and_is_monotone() {
        let cfg = config(NoiseFamily::Skellam, 4);
        let out = run_training(&cfg).unwrap();
        let (fed, ..) = build_federation(&cfg).unwrap();
        let mut prev = 0.0;
        for m in &out.metrics {
            let expected = account_joint(&fed.plan.with_rounds(m.round), 1e-5).unwrap().epsilon;
            assert_eq!(m.eps_spent, expected);
            assert!(m.eps_spent >= prev);
            prev = m.eps_spent;
        }
        assert_eq!(out.report.accounting.as_ref().unwrap().epsilon, prev);
    }

    #[test]
    fn zero_rounds_gives_header_only_csv() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&config(NoiseFamily::Gaussian, 0), dir.path()).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(out.report.eps_spent, 0.0);
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv, "round,loss,accuracy,eps_spent\n");
        assert!(dir.path().join("report.json").exists());
    }

    #[test]
    fn discrete_runs_are_bit_identical() {
        let cfg = config(NoiseFamily::Skellam, 3);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run_experiment(&cfg, a.path()).unwrap();
        run_experiment(&cfg, b.path()).unwrap();
        let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("metrics.csv")).unwrap();
        assert_eq!(read(&a), read(&b));
        let mut other = cfg.clone();
        other.seed = 4;
        let c = tempfile::tempdir().unwrap();
        run_experiment(&other, c.path()).unwrap();
        assert_ne!(read(&a), read(&c));
    }

    #[test]
    fn huge_noise_gives_baseline_accuracy() {
        let mut diffs = Vec::new();
        for seed in 0..5 {
            let mut cfg = config(NoiseFamily::Skellam, 5);
            cfg.seed = seed;
            cfg.privacy.noise_multiplier = Some(1e3);
            let out = run_training(&cfg).unwrap();
            diffs.push(out.report.final_accuracy.unwrap() - out.report.majority_baseline);
        }
        let mean = diffs.iter().sum::<f64>() / 5.0;
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        // Paired differences: accuracy of a random linear classifier versus the
        // majority baseline; allow three standard errors plus a small slack.
        assert!(mean.abs() < 3.0 * sd / 5f64.sqrt() + 0.1, "mean={mean}, sd={sd}");
    }

    #[test]
    fn low_noise_training_learns() {
        let mut cfg = config(NoiseFamily::Gaussian, 10);
        cfg.privacy.noise_multiplier = Some(0.1);
        let out = run_training(&cfg).unwrap();
        assert!(out.report.final_accuracy.unwrap() > 0.9, "{:?}", out.report.final_accuracy);
    }

    #[test]
    fn disjointness_is_checked() {
        let (fed, ..) = build_federation(&config(NoiseFamily::Gaussian, 1)).unwrap();
        let mut clients = fed.clients.clone();
        clients[1].rows[0] = clients[0].rows[0];
        assert!(Federation::new(clients, fed.test.clone(), fed.plan.clone(), 1e-5).is_err());
    }

    #[test]
    fn config_errors_carry_paths() {
        let mut cfg = config(NoiseFamily::Gaussian, 1);
        cfg.training.lr = -1.0;
        cfg.training.local_epochs = Some(1);
        cfg.privacy.target_epsilon = Some(1.0);
        let Err(Error::Config(errs)) = cfg.validate() else { panic!() };
        assert!(errs.iter().any(|e| e.starts_with("training.lr")));
        assert!(errs.iter().any(|e| e.starts_with("training:")));
        assert!(errs.iter().any(|e| e.starts_with("privacy:")));
        assert!(ExperimentConfig::from_toml("seed = 1\nrounds = 2\nbogus = 3").is_err());
    }

    #[test]
    fn target_epsilon_is_met() {
        let mut cfg = config(NoiseFamily::Skellam, 4);
        cfg.privacy.noise_multiplier = None;
        cfg.privacy.target_epsilon = Some(2.0);
        let out = run_training(&cfg).unwrap();
        assert!(out.report.eps_spent <= 2.0 && out.report.eps_spent > 1.99, "{}", out.report.eps_spent);
    }

    fn skellam_provenance(sigma: f64, clip: f64, steps: u32) -> ModelProvenance {
        ModelProvenance {
            mechanism: MechanismSpec::skellam(sigma, clip, DEFAULT_FIXEDPOINT_SCALE, 10_250),
            local_steps: steps,
            sampling_rate: 0.1,
        }
    }

    #[test]
    fn averaging_pretrained_models() {
        let one = vec![vec![1.0, 2.0]];
        let (avg, budget) = average_pretrained_models(&one, &[skellam_provenance(0.69, 1.0, 1)], 1e-5).unwrap();
        assert_eq!(avg, one[0]);
        let ldp = account_joint(
            &AccountingPlan::homogeneous(1, 1, 1, 0.1, skellam_provenance(0.69, 1.0, 1).mechanism),
            1e-5,
        )
        .unwrap();
        assert_eq!(budget, ldp);

        let two = vec![vec![1.0, 2.0], vec![3.0, -2.0]];
        let (avg, budget) = average_pretrained_models(&two, &[skellam_provenance(0.69, 1.0, 1); 2], 1e-5).unwrap();
        assert_eq!(avg, vec![2.0, 0.0]);
        assert!((budget.epsilon - 2.78).abs() / 2.78 < 0.07, "{}", budget.epsilon);

        let ten = vec![vec![0.0]; 10];
        let (_, budget) = average_pretrained_models(&ten, &[skellam_provenance(1.18, 1.0, 50); 10], 1e-5).unwrap();
        assert!((budget.epsilon - 1.03).abs() / 1.03 < 0.07, "{}", budget.epsilon);
    }

    #[test]
    fn averaging_fuses_longer_runs() {
        // 2S steps at clip C/2 and σ·√2 per fine step fuse onto S steps at C, σ.
        let models = vec![vec![0.0]; 2];
        let homogeneous = average_pretrained_models(&models, &[skellam_provenance(0.9, 1.0, 10); 2], 1e-5).unwrap();
        let fused = average_pretrained_models(
            &models,
            &[skellam_provenance(0.9, 1.0, 10), skellam_provenance(0.9 * 2f64.sqrt(), 0.5, 20)],
            1e-5,
        )
        .unwrap();
        assert!((homogeneous.1.epsilon - fused.1.epsilon).abs() < 1e-9 * homogeneous.1.epsilon);
        let bad = average_pretrained_models(
            &models,
            &[skellam_provenance(0.9, 1.0, 10), skellam_provenance(0.9, 1.0, 20)],
            1e-5,
        );
        assert!(matches!(bad, Err(Error::Provenance(_))));
        let odd = average_pretrained_models(
            &models,
            &[skellam_provenance(0.9, 1.0, 10), skellam_provenance(0.9, 1.0, 15)],
            1e-5,
        );
        assert!(matches!(odd, Err(Error::Provenance(_))));
    }
}
