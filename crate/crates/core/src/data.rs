//! Domain types, dataset and expert-prediction file I/O, deterministic splits.
//!
//! A [`Dataset`] is the framework's only view of the world: features, class
//! labels, and protected-group labels. Whatever private information the human
//! experts use is never represented here; it exists only inside the synthetic
//! generators that simulate those experts.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Feature matrix plus per-sample class and protected-group labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>, // row-major, n_samples x feature_dim
    feature_dim: usize,
    labels: Vec<usize>,
    groups: Vec<usize>,
    num_classes: usize,
    num_groups: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        feature_dim: usize,
        labels: Vec<usize>,
        groups: Vec<usize>,
        num_classes: usize,
        num_groups: usize,
    ) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::Validation("feature_dim must be positive".into()));
        }
        if features.len() % feature_dim != 0 {
            return Err(Error::Validation(format!(
                "feature buffer length {} is not a multiple of feature_dim {}",
                features.len(),
                feature_dim
            )));
        }
        let n = features.len() / feature_dim;
        if labels.len() != n || groups.len() != n {
            return Err(Error::Validation(format!(
                "inconsistent sample counts: {} feature rows, {} labels, {} groups",
                n,
                labels.len(),
                groups.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::Validation("num_classes must be at least 2".into()));
        }
        if num_groups < 1 {
            return Err(Error::Validation("num_groups must be at least 1".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if let Some(&bad) = groups.iter().find(|&&z| z >= num_groups) {
            return Err(Error::Validation(format!(
                "group {bad} out of range for {num_groups} groups"
            )));
        }
        Ok(Dataset {
            features,
            feature_dim,
            labels,
            groups,
            num_classes,
            num_groups,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn features(&self, sample: usize) -> &[f64] {
        &self.features[sample * self.feature_dim..(sample + 1) * self.feature_dim]
    }

    pub fn label(&self, sample: usize) -> usize {
        self.labels[sample]
    }

    pub fn group(&self, sample: usize) -> usize {
        self.groups[sample]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }
}

/// Per-sample, per-expert class predictions with an observation mask.
///
/// Only the `m - 1` human experts are stored. The identity expert is the
/// classifier and is materialized at evaluation time, never serialized.
/// Missingness is explicit (`mask`), so "class 0" and "no prediction" are
/// distinct states.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPredictionMatrix {
    predictions: Vec<usize>, // row-major, n_samples x num_experts
    mask: Vec<bool>,
    num_samples: usize,
    num_experts: usize,
}

impl ExpertPredictionMatrix {
    /// All-unobserved matrix.
    pub fn empty(num_samples: usize, num_experts: usize) -> Self {
        ExpertPredictionMatrix {
            predictions: vec![0; num_samples * num_experts],
            mask: vec![false; num_samples * num_experts],
            num_samples,
            num_experts,
        }
    }

    pub fn set(&mut self, sample: usize, expert: usize, class: usize) {
        let idx = sample * self.num_experts + expert;
        self.predictions[idx] = class;
        self.mask[idx] = true;
    }

    pub fn clear(&mut self, sample: usize, expert: usize) {
        let idx = sample * self.num_experts + expert;
        self.mask[idx] = false;
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    /// Predicted class of `(sample, expert)`, or `None` when unobserved.
    pub fn class_of(&self, sample: usize, expert: usize) -> Option<usize> {
        let idx = sample * self.num_experts + expert;
        if self.mask[idx] {
            Some(self.predictions[idx])
        } else {
            None
        }
    }

    pub fn observed(&self, sample: usize, expert: usize) -> bool {
        self.mask[sample * self.num_experts + expert]
    }

    /// Raw class row for a sample (entries are meaningful only where observed).
    pub fn class_row(&self, sample: usize) -> &[usize] {
        &self.predictions[sample * self.num_experts..(sample + 1) * self.num_experts]
    }

    pub fn mask_row(&self, sample: usize) -> &[bool] {
        &self.mask[sample * self.num_experts..(sample + 1) * self.num_experts]
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// One-hot view of an observed prediction: a vertex of the label simplex.
    pub fn one_hot(&self, sample: usize, expert: usize, num_classes: usize) -> Option<Vec<f64>> {
        self.class_of(sample, expert).map(|c| {
            let mut v = vec![0.0; num_classes];
            v[c] = 1.0;
            v
        })
    }

    /// Check that every observed prediction is a valid class index.
    pub fn validate_labels(&self, num_classes: usize) -> Result<()> {
        for (idx, (&class, &seen)) in self.predictions.iter().zip(&self.mask).enumerate() {
            if seen && class >= num_classes {
                return Err(Error::Validation(format!(
                    "expert prediction {} at sample {} expert {} out of range for {} classes",
                    class,
                    idx / self.num_experts,
                    idx % self.num_experts,
                    num_classes
                )));
            }
        }
        Ok(())
    }
}

/// Train/test partition of `0..n`, deterministic per seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Nonnegative per-consultation cost of each human expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertCostVector {
    costs: Vec<f64>,
}

impl ExpertCostVector {
    pub fn new(costs: Vec<f64>) -> Result<Self> {
        if costs.iter().any(|&c| !(c >= 0.0)) {
            return Err(Error::Validation("expert costs must be nonnegative".into()));
        }
        Ok(ExpertCostVector { costs })
    }

    pub fn uniform(num_experts: usize, cost: f64) -> Result<Self> {
        Self::new(vec![cost; num_experts])
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn len(&self) -> usize {
        self.costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.costs.is_empty()
    }
}

/// Optional declared ranges for dataset loading. When a bound is declared the
/// loader rejects out-of-range values; otherwise counts are inferred from the
/// file contents (with the `num_classes >= 2` floor).
#[derive(Debug, Clone, Default)]
pub struct DatasetFormat {
    pub num_classes: Option<usize>,
    pub num_groups: Option<usize>,
}

fn strip_crlf(line: &str) -> &str {
    line.strip_suffix('\r').unwrap_or(line)
}

/// Load a dataset CSV with header `f0,...,f{n-1},label,group`.
pub fn load_dataset(path: impl AsRef<Path>, format: &DatasetFormat) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty file"))?;
    let header_cols: Vec<&str> = strip_crlf(header).split(',').collect();
    if header_cols.len() < 3
        || header_cols[header_cols.len() - 2] != "label"
        || header_cols[header_cols.len() - 1] != "group"
    {
        return Err(Error::parse(
            path,
            1,
            "header must end with `label,group` after the feature columns",
        ));
    }
    let feature_dim = header_cols.len() - 2;
    for (i, col) in header_cols[..feature_dim].iter().enumerate() {
        if *col != format!("f{i}") {
            return Err(Error::parse(
                path,
                1,
                format!("feature column {i} is named `{col}`, expected `f{i}`"),
            ));
        }
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    for (line_idx, raw) in lines {
        let line = strip_crlf(raw);
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != header_cols.len() {
            return Err(Error::parse(
                path,
                line_idx + 1,
                format!(
                    "expected {} columns, found {}",
                    header_cols.len(),
                    cols.len()
                ),
            ));
        }
        for col in &cols[..feature_dim] {
            let v: f64 = col.parse().map_err(|_| {
                Error::parse(path, line_idx + 1, format!("invalid feature value `{col}`"))
            })?;
            features.push(v);
        }
        let label: usize = cols[feature_dim].parse().map_err(|_| {
            Error::parse(
                path,
                line_idx + 1,
                format!("invalid label `{}`", cols[feature_dim]),
            )
        })?;
        let group: usize = cols[feature_dim + 1].parse().map_err(|_| {
            Error::parse(
                path,
                line_idx + 1,
                format!("invalid group `{}`", cols[feature_dim + 1]),
            )
        })?;
        labels.push(label);
        groups.push(group);
    }

    let inferred_classes = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    let inferred_groups = groups.iter().max().map_or(0, |&m| m + 1).max(1);
    let num_classes = format.num_classes.unwrap_or(inferred_classes);
    let num_groups = format.num_groups.unwrap_or(inferred_groups);
    Dataset::new(
        features,
        feature_dim,
        labels,
        groups,
        num_classes,
        num_groups,
    )
}

/// Write a dataset as CSV (the exact format `load_dataset` reads back).
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for i in 0..dataset.feature_dim() {
        out.push_str(&format!("f{i},"));
    }
    out.push_str("label,group\n");
    for s in 0..dataset.n_samples() {
        for v in dataset.features(s) {
            // `{:?}` prints the shortest representation that round-trips.
            out.push_str(&format!("{v:?},"));
        }
        out.push_str(&format!("{},{}\n", dataset.label(s), dataset.group(s)));
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Load long-format expert predictions (`sample_id,expert_id,label`).
///
/// The mask is true exactly where a pair appears; duplicate pairs resolve
/// last-one-wins and are counted in the returned tally.
pub fn load_expert_predictions(
    path: impl AsRef<Path>,
    num_samples: usize,
    num_experts: usize,
) -> Result<(ExpertPredictionMatrix, usize)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut matrix = ExpertPredictionMatrix::empty(num_samples, num_experts);
    let mut duplicates = 0;

    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty file"))?;
    if strip_crlf(header) != "sample_id,expert_id,label" {
        return Err(Error::parse(
            path,
            1,
            "header must be `sample_id,expert_id,label`",
        ));
    }

    for (line_idx, raw) in lines {
        let line = strip_crlf(raw);
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(Error::parse(path, line_idx + 1, "expected 3 columns"));
        }
        let parse_col = |i: usize| -> Result<usize> {
            cols[i].parse().map_err(|_| {
                Error::parse(path, line_idx + 1, format!("invalid integer `{}`", cols[i]))
            })
        };
        let sample = parse_col(0)?;
        let expert = parse_col(1)?;
        let label = parse_col(2)?;
        if sample >= num_samples {
            return Err(Error::Validation(format!(
                "sample_id {sample} out of range for {num_samples} samples"
            )));
        }
        if expert >= num_experts {
            return Err(Error::Validation(format!(
                "expert_id {expert} out of range for {num_experts} experts"
            )));
        }
        if matrix.observed(sample, expert) {
            duplicates += 1;
        }
        matrix.set(sample, expert, label);
    }
    Ok((matrix, duplicates))
}

/// Write observed expert predictions in the long format.
pub fn save_expert_predictions(
    matrix: &ExpertPredictionMatrix,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("sample_id,expert_id,label\n");
    for s in 0..matrix.num_samples() {
        for e in 0..matrix.num_experts() {
            if let Some(c) = matrix.class_of(s, e) {
                out.push_str(&format!("{s},{e},{c}\n"));
            }
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Partition a dataset into train/test index lists. `|test|` is
/// `round(test_fraction * n)`; membership is a seeded shuffle, and both
/// lists come back sorted.
pub fn split(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<SplitIndices> {
    let n = dataset.n_samples();
    if n == 0 {
        return Err(Error::Validation("cannot split an empty dataset".into()));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Validation(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let n_test = (test_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut test: Vec<usize> = order[..n_test].to_vec();
    let mut train: Vec<usize> = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok(SplitIndices { train, test })
}
