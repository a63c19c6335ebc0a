//! Datasets, the linear softmax classifier and its per-sample gradients.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, RowError};
use crate::mechanisms::{SeedPurpose, SeedRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    None,
    Zscore,
    Minmax,
}

/// Per-feature affine map `x ↦ (x − offset) / scale` fitted on a training split.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub kind: Normalization,
    /// Feature indices the map applies to; the rest pass through.
    pub columns: Vec<usize>,
    pub offsets: Vec<f64>,
    pub scales: Vec<f64>,
}

impl NormalizationRecord {
    fn fit(kind: Normalization, features: &[f64], n_features: usize, columns: Vec<usize>) -> Self {
        let n = features.len() / n_features.max(1);
        let mut offsets = Vec::with_capacity(columns.len());
        let mut scales = Vec::with_capacity(columns.len());
        for &c in &columns {
            let col = (0..n).map(|i| features[i * n_features + c]);
            let (offset, scale) = match kind {
                Normalization::None => (0.0, 1.0),
                Normalization::Zscore => {
                    let mean = col.clone().sum::<f64>() / n as f64;
                    let var = col.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
                    (mean, var.sqrt())
                }
                Normalization::Minmax => {
                    let lo = col.clone().fold(f64::INFINITY, f64::min);
                    let hi = col.fold(f64::NEG_INFINITY, f64::max);
                    (lo, hi - lo)
                }
            };
            offsets.push(offset);
            // Constant columns are only shifted.
            scales.push(if scale > 0.0 && scale.is_finite() { scale } else { 1.0 });
        }
        Self {
            kind,
            columns,
            offsets,
            scales,
        }
    }

    fn apply(&self, features: &mut [f64], n_features: usize) {
        if self.kind == Normalization::None {
            return;
        }
        for row in features.chunks_mut(n_features) {
            for ((&c, o), s) in self.columns.iter().zip(&self.offsets).zip(&self.scales) {
                row[c] = (row[c] - o) / s;
            }
        }
    }
}

/// Row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Vec<f64>,
    n_features: usize,
    labels: Vec<usize>,
    num_classes: usize,
    pub normalization: NormalizationRecord,
}

impl Dataset {
    pub fn new(features: Vec<f64>, n_features: usize, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if n_features == 0 || num_classes == 0 {
            return Err(Error::Data("datasets need at least one feature and one class".into()));
        }
        if features.len() != labels.len() * n_features {
            return Err(Error::Data(format!(
                "{} feature values for {} rows of width {n_features}",
                features.len(),
                labels.len()
            )));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::Data("features contain NaN or Inf".into()));
        }
        if let Some(y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Data(format!("label {y} out of range for {num_classes} classes")));
        }
        Ok(Self {
            features,
            n_features,
            labels,
            num_classes,
            normalization: NormalizationRecord::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            features,
            n_features: self.n_features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            normalization: self.normalization.clone(),
        }
    }

    /// Fits a normalization on this dataset (all features) and applies it.
    pub fn normalize(&mut self, kind: Normalization) -> NormalizationRecord {
        let record = NormalizationRecord::fit(kind, &self.features, self.n_features, (0..self.n_features).collect());
        record.apply(&mut self.features, self.n_features);
        self.normalization = record.clone();
        record
    }

    /// Applies a normalization fitted elsewhere (e.g. on the training split).
    pub fn apply_normalization(&mut self, record: &NormalizationRecord) {
        record.apply(&mut self.features, self.n_features);
        self.normalization = record.clone();
    }

    /// Fraction of rows carrying the most common label.
    pub fn majority_fraction(&self) -> f64 {
        let mut counts = vec![0usize; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts.into_iter().max().unwrap_or(0) as f64 / self.len().max(1) as f64
    }
}

/// Shuffles row indices and splits them into `test_fraction` test and the
/// rest train.
pub fn train_test_split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::param(format!("test fraction must lie in [0, 1), got {test_fraction}")));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut SeedRecord::new(seed, 0, 0, 0, SeedPurpose::Data).rng());
    let n_test = (test_fraction * data.len() as f64).round() as usize;
    let (test, train) = idx.split_at(n_test);
    Ok((data.subset(train), data.subset(test)))
}

/// Random, pairwise disjoint, (nearly) equal shares of `0..n`.
pub fn iid_partition(n: usize, parts: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if parts == 0 || parts > n {
        return Err(Error::param(format!("cannot split {n} rows into {parts} parts")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut SeedRecord::new(seed, 0, 1, 0, SeedPurpose::Data).rng());
    let base = n / parts;
    let extra = n % parts;
    let mut start = 0;
    Ok((0..parts)
        .map(|p| {
            let len = base + usize::from(p < extra);
            let share = idx[start..start + len].to_vec();
            start += len;
            share
        })
        .collect())
}

/// [`iid_partition`] applied to a dataset.
pub fn split_iid(data: &Dataset, parts: usize, seed: u64) -> Result<Vec<Dataset>> {
    Ok(iid_partition(data.len(), parts, seed)?.iter().map(|idx| data.subset(idx)).collect())
}

/// Gaussian class blobs: class k is centred at `(separation/√2)·e_k` (random
/// unit directions when there are more classes than features) with unit
/// isotropic noise, so class means sit `separation` apart. Classes are
/// balanced and rows shuffled.
pub fn make_synthetic(n: usize, n_features: usize, num_classes: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || n_features == 0 || num_classes == 0 {
        return Err(Error::param("n, d and K must all be >= 1"));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::param(format!("separation must be finite and >= 0, got {separation}")));
    }
    let mut rng = SeedRecord::new(seed, 0, 0, 0, SeedPurpose::Data).rng();
    let radius = separation / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|k| {
            if num_classes <= n_features {
                let mut m = vec![0.0; n_features];
                m[k] = radius;
                m
            } else {
                let v: Vec<f64> = (0..n_features).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| radius * x / norm).collect()
            }
        })
        .collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    labels.shuffle(&mut rng);
    let mut features = Vec::with_capacity(n * n_features);
    for &y in &labels {
        for mean in &means[y] {
            features.push(mean + rng.sample::<f64, _>(StandardNormal));
        }
    }
    Dataset::new(features, n_features, labels, num_classes)
}

/// Multinomial logistic regression: `K × d` weights (row-major) followed by
/// `K` biases in one flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    n_features: usize,
    num_classes: usize,
    params: Vec<f64>,
}

impl LinearModel {
    pub fn zeros(n_features: usize, num_classes: usize) -> Self {
        Self {
            n_features,
            num_classes,
            params: vec![0.0; num_classes * (n_features + 1)],
        }
    }

    pub fn from_params(n_features: usize, num_classes: usize, params: Vec<f64>) -> Result<Self> {
        if params.len() != num_classes * (n_features + 1) {
            return Err(Error::param(format!(
                "expected {} parameters, got {}",
                num_classes * (n_features + 1),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("model parameters must be finite".into()));
        }
        Ok(Self {
            n_features,
            num_classes,
            params,
        })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    fn bias_offset(&self) -> usize {
        self.num_classes * self.n_features
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let b = self.bias_offset();
        (0..self.num_classes)
            .map(|k| {
                let w = &self.params[k * self.n_features..(k + 1) * self.n_features];
                w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.params[b + k]
            })
            .collect()
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits(x);
        (0..z.len()).max_by(|&a, &b| z[a].total_cmp(&z[b])).unwrap_or(0)
    }

    /// Cross-entropy of one sample.
    pub fn loss(&self, x: &[f64], y: usize) -> f64 {
        let z = self.logits(x);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        lse - z[y]
    }

    /// Mean cross-entropy and accuracy over a dataset.
    pub fn evaluate(&self, data: &Dataset) -> (f64, f64) {
        if data.is_empty() {
            return (0.0, 0.0);
        }
        let mut loss = 0.0;
        let mut correct = 0usize;
        for i in 0..data.len() {
            loss += self.loss(data.row(i), data.label(i));
            correct += usize::from(self.predict(data.row(i)) == data.label(i));
        }
        let n = data.len() as f64;
        (loss / n, correct as f64 / n)
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Gradient of the cross-entropy at one sample, flattened like the model's
/// parameters: `∂/∂W_k = (p_k − [k=y])·x`, `∂/∂b_k = p_k − [k=y]`. An L2
/// penalty `λ/2·‖W‖²` adds `λ·W` to the weight block.
pub fn per_sample_grad(model: &LinearModel, x: &[f64], y: usize, l2: f64) -> Vec<f64> {
    let d = model.n_features;
    let mut grad = vec![0.0; model.n_params()];
    let p = model.probabilities(x);
    let b = model.bias_offset();
    for (k, pk) in p.iter().enumerate() {
        let r = pk - if k == y { 1.0 } else { 0.0 };
        for (j, xj) in x.iter().enumerate() {
            grad[k * d + j] = r * xj + l2 * model.params[k * d + j];
        }
        grad[b + k] = r;
    }
    grad
}

/// Roles of the columns of a CSV file with a header row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub label: String,
    #[serde(default)]
    pub numeric: Vec<String>,
    #[serde(default)]
    pub categorical: Vec<String>,
    /// Column whose values define the client partition.
    #[serde(default)]
    pub group: Option<String>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_test_fraction() -> f64 {
    0.2
}

/// Encoded tabular data with train/test split and optional client groups.
#[derive(Debug, Clone)]
pub struct TabularData {
    pub train: Dataset,
    pub test: Dataset,
    /// Group index of each train row (all zero without a group column).
    pub train_groups: Vec<usize>,
    pub test_groups: Vec<usize>,
    pub group_names: Vec<String>,
    pub label_names: Vec<String>,
    pub feature_names: Vec<String>,
    /// Test-split categorical values unseen in training, encoded as all-zeros.
    pub unknown_categories: usize,
}

impl TabularData {
    /// Training-row indices of each group.
    pub fn client_partition(&self) -> Vec<Vec<usize>> {
        (0..self.group_names.len())
            .map(|g| (0..self.train.len()).filter(|&i| self.train_groups[i] == g).collect())
            .collect()
    }

    /// Training rows of each group, one dataset per client.
    pub fn client_datasets(&self) -> Vec<Dataset> {
        self.client_partition().iter().map(|idx| self.train.subset(idx)).collect()
    }
}

struct RawRow {
    numeric: Vec<f64>,
    categorical: Vec<String>,
    label: String,
    group: String,
}

/// Loads a CSV file: numeric columns are parsed, categoricals one-hot encoded
/// with a vocabulary fitted on the training split, and numeric columns
/// normalised with statistics of the training split. Each group (or the whole
/// file) is split into train and test separately.
pub fn load_csv(path: &Path, schema: &CsvSchema, normalization: Normalization) -> Result<TabularData> {
    if !(0.0..1.0).contains(&schema.test_fraction) {
        return Err(Error::param(format!(
            "test fraction must lie in [0, 1), got {}",
            schema.test_fraction
        )));
    }
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Data(format!("{}: {other:?}", path.display())),
        })?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let mut missing = Vec::new();
    let mut lookup = |name: &String| {
        col(name).or_else(|| {
            missing.push(name.clone());
            None
        })
    };
    let label_col = lookup(&schema.label);
    let numeric_cols: Vec<Option<usize>> = schema.numeric.iter().map(&mut lookup).collect();
    let cat_cols: Vec<Option<usize>> = schema.categorical.iter().map(&mut lookup).collect();
    let group_col = schema.group.as_ref().map(&mut lookup);
    if !missing.is_empty() {
        return Err(Error::Data(format!("columns not found in header: {}", missing.join(", "))));
    }
    let label_col = label_col.expect("checked");
    let numeric_cols: Vec<usize> = numeric_cols.into_iter().flatten().collect();
    let cat_cols: Vec<usize> = cat_cols.into_iter().flatten().collect();
    let group_col = group_col.flatten();

    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != headers.len() {
            errors.push(RowError {
                line,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
            continue;
        }
        let mut numeric = Vec::with_capacity(numeric_cols.len());
        let mut bad = None;
        for (&c, name) in numeric_cols.iter().zip(&schema.numeric) {
            match record[c].trim().parse::<f64>() {
                Ok(v) if v.is_finite() => numeric.push(v),
                _ => {
                    bad = Some(format!("column `{name}`: `{}` is not a finite number", &record[c]));
                    break;
                }
            }
        }
        if let Some(message) = bad {
            errors.push(RowError { line, message });
            continue;
        }
        rows.push(RawRow {
            numeric,
            categorical: cat_cols.iter().map(|&c| record[c].trim().to_string()).collect(),
            label: record[label_col].trim().to_string(),
            group: group_col.map_or_else(String::new, |c| record[c].trim().to_string()),
        });
    }
    if !errors.is_empty() {
        return Err(Error::MalformedRows(errors));
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{} has no data rows", path.display())));
    }

    let label_names: Vec<String> = rows.iter().map(|r| r.label.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let group_names: Vec<String> = rows.iter().map(|r| r.group.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let group_of: Vec<usize> = rows
        .iter()
        .map(|r| group_names.binary_search(&r.group).expect("group present"))
        .collect();

    // Per-group shuffle and split.
    let mut is_test = vec![false; rows.len()];
    for g in 0..group_names.len() {
        let mut idx: Vec<usize> = (0..rows.len()).filter(|&i| group_of[i] == g).collect();
        idx.shuffle(&mut SeedRecord::new(schema.split_seed, 0, g as u64, 0, SeedPurpose::Data).rng());
        let n_test = (schema.test_fraction * idx.len() as f64).round() as usize;
        for &i in &idx[..n_test] {
            is_test[i] = true;
        }
    }

    let vocab: Vec<BTreeMap<String, usize>> = (0..cat_cols.len())
        .map(|c| {
            rows.iter()
                .zip(&is_test)
                .filter(|(_, &t)| !t)
                .map(|(r, _)| r.categorical[c].clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .enumerate()
                .map(|(i, v)| (v, i))
                .collect()
        })
        .collect();
    let mut feature_names = schema.numeric.clone();
    for (name, v) in schema.categorical.iter().zip(&vocab) {
        feature_names.extend(v.keys().map(|value| format!("{name}={value}")));
    }
    let n_features = feature_names.len();
    if n_features == 0 {
        return Err(Error::Data("schema selects no feature columns".into()));
    }

    let mut unknown = 0usize;
    let mut encode = |r: &RawRow| {
        let mut f = r.numeric.clone();
        for (value, v) in r.categorical.iter().zip(&vocab) {
            let start = f.len();
            f.resize(start + v.len(), 0.0);
            match v.get(value) {
                Some(&i) => f[start + i] = 1.0,
                None => unknown += 1,
            }
        }
        f
    };
    let (mut train_f, mut test_f) = (Vec::new(), Vec::new());
    let (mut train_y, mut test_y) = (Vec::new(), Vec::new());
    let (mut train_g, mut test_g) = (Vec::new(), Vec::new());
    for (i, r) in rows.iter().enumerate() {
        let y = label_names.binary_search(&r.label).expect("label present");
        if is_test[i] {
            test_f.extend(encode(r));
            test_y.push(y);
            test_g.push(group_of[i]);
        } else {
            train_f.extend(encode(r));
            train_y.push(y);
            train_g.push(group_of[i]);
        }
    }
    let record = NormalizationRecord::fit(normalization, &train_f, n_features, (0..schema.numeric.len()).collect());
    record.apply(&mut train_f, n_features);
    record.apply(&mut test_f, n_features);
    let mut train = Dataset::new(train_f, n_features, train_y, label_names.len())?;
    let mut test = Dataset::new(test_f, n_features, test_y, label_names.len())?;
    train.normalization = record.clone();
    test.normalization = record;
    Ok(TabularData {
        train,
        test,
        train_groups: train_g,
        test_groups: test_g,
        group_names,
        label_names,
        feature_names,
        unknown_categories: unknown,
    })
}
