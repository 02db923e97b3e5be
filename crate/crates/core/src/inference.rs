//! Full-committee prediction, sparse committee sampling, top-k selection, and
//! the dispersion diagnostics bounding the sparse-vs-full prediction gap.
//!
//! At inference time the identity expert contributes a hard one-hot at the
//! classifier's predicted class (every decision-matrix column is a simplex
//! vertex); unobserved experts are excluded from both the weight mass and the
//! score. Per-sample randomness comes from streams derived from
//! `(seed, sample index)` so batch inference parallelizes reproducibly.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, ExpertPredictionMatrix};
use crate::error::{Error, Result};
use crate::exec;
use crate::losses::{aggregate_scores, proba_from_scores, IdentityColumn};
use crate::models::{ClassifierModel, DeferrerModel};
use crate::numeric::argmax;

/// A sampled expert committee: `k` i.i.d. draws (repeats kept) from the
/// distribution proportional to the effective deferrer weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CommitteeDraw {
    pub members: Vec<usize>,
    /// L1 mass of the effective weights the draw was taken from.
    pub weight_mass: f64,
    pub weights: Vec<f64>,
}

/// Deferrer weights with unobserved experts zeroed out (identity always last,
/// always observed).
pub fn effective_weights(deferrer_out: &[f64], observed: &[bool]) -> Vec<f64> {
    debug_assert_eq!(deferrer_out.len(), observed.len() + 1);
    let mut w = deferrer_out.to_vec();
    for (i, &seen) in observed.iter().enumerate() {
        if !seen {
            w[i] = 0.0;
        }
    }
    w
}

/// Class-1 coordinate of every expert column (binary tasks), identity last.
fn class1_indicators(
    expert_classes: &[usize],
    observed: &[bool],
    identity_class: usize,
) -> Vec<f64> {
    let mut v: Vec<f64> = expert_classes
        .iter()
        .zip(observed)
        .map(|(&c, &seen)| if seen && c == 1 { 1.0 } else { 0.0 })
        .collect();
    v.push(if identity_class == 1 { 1.0 } else { 0.0 });
    v
}

/// Full-committee prediction for one sample. Returns the label (argmax of the
/// aggregated distribution, ties toward the lowest class) and the
/// distribution itself.
pub fn predict(
    classifier: &ClassifierModel,
    deferrer: &DeferrerModel,
    x: &[f64],
    expert_classes: &[usize],
    observed: &[bool],
) -> Result<(usize, Vec<f64>)> {
    let identity = classifier.predict_class(x);
    let weights = effective_weights(&deferrer.forward(x)?, observed);
    let score = aggregate_scores(
        &weights,
        expert_classes,
        observed,
        IdentityColumn::Hard(identity),
        classifier.num_classes,
    );
    let probs = proba_from_scores(&score);
    Ok((argmax(&probs), probs))
}

/// Draw `k` committee members i.i.d. proportional to `weights`. Zero-weight
/// experts are never sampled; an all-zero vector cannot be normalized.
pub fn sample_committee(weights: &[f64], k: usize, rng: &mut impl Rng) -> Result<CommitteeDraw> {
    assert!(k >= 1, "committee size must be at least 1");
    let mass: f64 = weights.iter().sum();
    if !(mass > 0.0) {
        return Err(Error::ZeroWeightMass);
    }
    let mut cumulative = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for &w in weights {
        acc += w;
        cumulative.push(acc);
    }
    let mut members = Vec::with_capacity(k);
    for _ in 0..k {
        let u = rng.random::<f64>() * mass;
        let idx = cumulative
            .partition_point(|&c| c <= u)
            .min(weights.len() - 1);
        members.push(idx);
    }
    Ok(CommitteeDraw {
        members,
        weight_mass: mass,
        weights: weights.to_vec(),
    })
}

/// Sparse prediction: the mean one-hot vote of a sampled committee, scaled by
/// the total weight mass, replaces the full weighted aggregate.
pub fn predict_sparse(
    classifier: &ClassifierModel,
    deferrer: &DeferrerModel,
    x: &[f64],
    expert_classes: &[usize],
    observed: &[bool],
    k: usize,
    rng: &mut impl Rng,
) -> Result<(usize, Vec<f64>, CommitteeDraw)> {
    let identity = classifier.predict_class(x);
    let weights = effective_weights(&deferrer.forward(x)?, observed);
    let draw = sample_committee(&weights, k, rng)?;
    let num_classes = classifier.num_classes;
    let m = weights.len();
    let mut mean_vote = vec![0.0; num_classes];
    for &member in &draw.members {
        let class = if member == m - 1 {
            identity
        } else {
            expert_classes[member]
        };
        mean_vote[class] += 1.0 / k as f64;
    }
    let scores: Vec<f64> = mean_vote.iter().map(|&v| draw.weight_mass * v).collect();
    let probs = proba_from_scores(&crate::losses::AggregatedScore { scores });
    Ok((argmax(&probs), probs, draw))
}

/// Indices of the `k` largest weights; ties resolve toward the lower index.
/// Returned sorted ascending.
pub fn top_k_committee(weights: &[f64], k: usize) -> Vec<usize> {
    assert!(
        k <= weights.len(),
        "k must not exceed the number of experts"
    );
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].partial_cmp(&weights[a]).unwrap().then(a.cmp(&b)));
    let mut chosen: Vec<usize> = order[..k].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Mean absolute deviation of the expert class-1 indicators under the
/// categorical distribution induced by the weights.
pub fn mad(weights: &[f64], indicators: &[f64]) -> Result<f64> {
    assert_eq!(weights.len(), indicators.len());
    let mass: f64 = weights.iter().sum();
    if !(mass > 0.0) {
        return Err(Error::ZeroWeightMass);
    }
    let mean: f64 = weights
        .iter()
        .zip(indicators)
        .map(|(w, v)| w * v)
        .sum::<f64>()
        / mass;
    Ok(weights
        .iter()
        .zip(indicators)
        .map(|(w, v)| (w / mass) * (v - mean).abs())
        .sum())
}

/// Per-sample check of the sparse-prediction loss bound.
#[derive(Debug, Clone)]
pub struct SampleBound {
    pub sample: usize,
    /// Monte-Carlo estimate of `E |log full - log sparse|`.
    pub lhs: f64,
    /// `s_D * ||D||_1 + max(2 ||D||_1, 1)`.
    pub rhs: f64,
    pub holds: bool,
}

#[derive(Debug, Clone)]
pub struct SparsityReport {
    pub per_sample: Vec<SampleBound>,
    pub all_hold: bool,
}

/// Estimate, for each listed sample, the expected absolute log-probability
/// gap between the full prediction and a size-`k` sparse committee prediction
/// (`trials` draws per sample), against its closed-form dispersion bound.
/// Binary tasks only.
pub fn sparsity_bound_check(
    classifier: &ClassifierModel,
    deferrer: &DeferrerModel,
    data: &Dataset,
    experts: &ExpertPredictionMatrix,
    indices: &[usize],
    k: usize,
    trials: usize,
    seed: u64,
) -> Result<SparsityReport> {
    if data.num_classes() != 2 {
        return Err(Error::Validation(
            "the sparsity bound applies to binary tasks".into(),
        ));
    }
    if trials == 0 {
        return Err(Error::Validation("need at least one trial".into()));
    }
    let m = deferrer.num_experts_total;

    let results: Vec<Result<SampleBound>> = exec::map_collect(indices, |&row| {
        let x = data.features(row);
        let identity = classifier.predict_class(x);
        let weights = effective_weights(&deferrer.forward(x)?, experts.mask_row(row));
        let mass: f64 = weights.iter().sum();
        if !(mass > 0.0) {
            return Err(Error::ZeroWeightMass);
        }
        let indicators = class1_indicators(experts.class_row(row), experts.mask_row(row), identity);
        let s1_full: f64 = weights.iter().zip(&indicators).map(|(w, v)| w * v).sum();
        let log_full = crate::losses::sigma(s1_full).ln();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(row as u64);
        let mut total = 0.0;
        for _ in 0..trials {
            let draw = sample_committee(&weights, k, &mut rng)?;
            let mut vote1 = 0.0;
            for &member in &draw.members {
                let class = if member == m - 1 {
                    identity
                } else {
                    experts.class_row(row)[member]
                };
                if class == 1 {
                    vote1 += 1.0 / k as f64;
                }
            }
            let log_sparse = crate::losses::sigma(mass * vote1).ln();
            total += (log_full - log_sparse).abs();
        }
        let lhs = total / trials as f64;
        let dispersion = mad(&weights, &indicators)?;
        let rhs = dispersion * mass + (2.0 * mass).max(1.0);
        Ok(SampleBound {
            sample: row,
            lhs,
            rhs,
            holds: lhs < rhs,
        })
    });

    let mut per_sample = Vec::with_capacity(results.len());
    for r in results {
        per_sample.push(r?);
    }
    let all_hold = per_sample.iter().all(|b| b.holds);
    Ok(SparsityReport {
        per_sample,
        all_hold,
    })
}

/// One output row of batch prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub sample_id: usize,
    pub label: usize,
    /// Committee member indices for sparse prediction; `None` when the full
    /// weighted aggregate was used.
    pub committee: Option<Vec<usize>>,
}

/// Predict every listed sample with the full committee.
pub fn batch_predict(
    classifier: &ClassifierModel,
    deferrer: &DeferrerModel,
    data: &Dataset,
    experts: &ExpertPredictionMatrix,
    indices: &[usize],
) -> Result<Vec<PredictionRow>> {
    let rows: Vec<Result<PredictionRow>> = exec::map_collect(indices, |&row| {
        let (label, _) = predict(
            classifier,
            deferrer,
            data.features(row),
            experts.class_row(row),
            experts.mask_row(row),
        )?;
        Ok(PredictionRow {
            sample_id: row,
            label,
            committee: None,
        })
    });
    rows.into_iter().collect()
}

/// Predict every listed sample with a size-`k` sampled committee; the
/// per-sample RNG stream is derived from `(seed, sample index)`.
pub fn batch_predict_sparse(
    classifier: &ClassifierModel,
    deferrer: &DeferrerModel,
    data: &Dataset,
    experts: &ExpertPredictionMatrix,
    indices: &[usize],
    k: usize,
    seed: u64,
) -> Result<Vec<PredictionRow>> {
    let rows: Vec<Result<PredictionRow>> = exec::map_collect(indices, |&row| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(row as u64);
        let (label, _, draw) = predict_sparse(
            classifier,
            deferrer,
            data.features(row),
            experts.class_row(row),
            experts.mask_row(row),
            k,
            &mut rng,
        )?;
        Ok(PredictionRow {
            sample_id: row,
            label,
            committee: Some(draw.members),
        })
    });
    rows.into_iter().collect()
}

/// Write rows as `sample_id,label_pred,committee` (committee entries joined
/// by semicolons, empty for full prediction).
pub fn write_predictions_csv(rows: &[PredictionRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("sample_id,label_pred,committee\n");
    for row in rows {
        let committee = row
            .committee
            .as_ref()
            .map(|members| {
                members
                    .iter()
                    .map(|m| m.to_string())
                    .collect::<Vec<_>>()
                    .join(";")
            })
            .unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", row.sample_id, row.label, committee));
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Read back a predictions CSV written by [`write_predictions_csv`].
pub fn read_predictions_csv(path: impl AsRef<Path>) -> Result<Vec<PredictionRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if idx == 0 {
            if line != "sample_id,label_pred,committee" {
                return Err(Error::parse(path, 1, "unexpected predictions header"));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(Error::parse(path, idx + 1, "expected 3 columns"));
        }
        let sample_id = cols[0]
            .parse()
            .map_err(|_| Error::parse(path, idx + 1, "invalid sample_id"))?;
        let label = cols[1]
            .parse()
            .map_err(|_| Error::parse(path, idx + 1, "invalid label"))?;
        let committee = if cols[2].is_empty() {
            None
        } else {
            let mut members = Vec::new();
            for part in cols[2].split(';') {
                members.push(
                    part.parse()
                        .map_err(|_| Error::parse(path, idx + 1, "invalid committee index"))?,
                );
            }
            Some(members)
        };
        rows.push(PredictionRow {
            sample_id,
            label,
            committee,
        });
    }
    Ok(rows)
}
