//! Evaluation metrics: overall and per-group accuracy, per-group losses,
//! worker load, and weight/accuracy association diagnostics.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ExpertPredictionMatrix};
use crate::error::{Error, Result};

/// Metrics of one evaluated run.
///
/// `expert_load` covers all workers with the classifier last and sums to 1:
/// committee-slot frequencies when committees were sampled, otherwise the
/// mean normalized deferrer weight. `classifier_share` is the fraction of
/// samples whose committee consulted the classifier (with committees), or the
/// classifier's load entry (without).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall_accuracy: f64,
    pub group_accuracy: Vec<Option<f64>>,
    pub group_loss: Vec<Option<f64>>,
    pub expert_load: Vec<f64>,
    pub classifier_share: f64,
    /// Per human expert: (mean assigned weight, accuracy on this split).
    pub weight_accuracy: Vec<(f64, f64)>,
}

/// Everything `compute_metrics` can draw on. Committees and weights are
/// optional; absent groups report `None` rather than zero.
pub struct EvalInputs<'a> {
    pub predictions: &'a [usize],
    pub labels: &'a [usize],
    pub groups: &'a [usize],
    pub num_groups: usize,
    /// Total worker count including the classifier.
    pub num_workers: usize,
    /// Sampled committee per sample (worker indices, classifier last).
    pub committees: Option<&'a [Vec<usize>]>,
    /// Effective deferrer weights per sample (length `num_workers`).
    pub deferrer_weights: Option<&'a [Vec<f64>]>,
    /// Per-group losses computed by the caller (may be empty).
    pub group_loss: Vec<Option<f64>>,
    /// Per human expert accuracy on this split (pairs up with mean weights).
    pub expert_accuracy: Vec<Option<f64>>,
}

pub fn compute_metrics(inputs: &EvalInputs<'_>) -> Result<MetricsReport> {
    let n = inputs.predictions.len();
    if n == 0 {
        return Err(Error::Validation("cannot evaluate zero predictions".into()));
    }
    if inputs.labels.len() != n || inputs.groups.len() != n {
        return Err(Error::Validation(
            "predictions, labels, groups must align".into(),
        ));
    }
    if let Some(c) = inputs.committees {
        if c.len() != n {
            return Err(Error::Validation(
                "committees must align with predictions".into(),
            ));
        }
    }
    if let Some(w) = inputs.deferrer_weights {
        if w.len() != n {
            return Err(Error::Validation(
                "weights must align with predictions".into(),
            ));
        }
    }

    let mut hits = 0usize;
    let mut group_hits = vec![0usize; inputs.num_groups];
    let mut group_n = vec![0usize; inputs.num_groups];
    for ((&p, &y), &z) in inputs
        .predictions
        .iter()
        .zip(inputs.labels)
        .zip(inputs.groups)
    {
        group_n[z] += 1;
        if p == y {
            hits += 1;
            group_hits[z] += 1;
        }
    }
    let overall_accuracy = hits as f64 / n as f64;
    let group_accuracy: Vec<Option<f64>> = group_hits
        .iter()
        .zip(&group_n)
        .map(|(&h, &c)| {
            if c > 0 {
                Some(h as f64 / c as f64)
            } else {
                None
            }
        })
        .collect();

    let m = inputs.num_workers;
    let (expert_load, classifier_share) = match inputs.committees {
        Some(committees) => {
            let mut slots = vec![0usize; m];
            let mut consulted = 0usize;
            let mut total = 0usize;
            for committee in committees {
                let mut saw_classifier = false;
                for &member in committee {
                    slots[member] += 1;
                    total += 1;
                    if member == m - 1 {
                        saw_classifier = true;
                    }
                }
                if saw_classifier {
                    consulted += 1;
                }
            }
            let load: Vec<f64> = if total > 0 {
                slots.iter().map(|&s| s as f64 / total as f64).collect()
            } else {
                vec![0.0; m]
            };
            (load, consulted as f64 / n as f64)
        }
        None => match inputs.deferrer_weights {
            Some(weights) => {
                let mut load = vec![0.0; m];
                for w in weights {
                    let mass: f64 = w.iter().sum();
                    if mass > 0.0 {
                        for (l, &wi) in load.iter_mut().zip(w) {
                            *l += wi / mass / n as f64;
                        }
                    }
                }
                let share = load[m - 1];
                (load, share)
            }
            None => (vec![0.0; m], 0.0),
        },
    };

    let weight_accuracy: Vec<(f64, f64)> = match inputs.deferrer_weights {
        Some(weights) => (0..m.saturating_sub(1))
            .map(|e| {
                let mean_w = weights.iter().map(|w| w[e]).sum::<f64>() / n as f64;
                (
                    mean_w,
                    inputs
                        .expert_accuracy
                        .get(e)
                        .copied()
                        .flatten()
                        .unwrap_or(f64::NAN),
                )
            })
            .collect(),
        None => Vec::new(),
    };

    Ok(MetricsReport {
        overall_accuracy,
        group_accuracy,
        group_loss: inputs.group_loss.clone(),
        expert_load,
        classifier_share,
        weight_accuracy,
    })
}

/// Accuracy of each human expert over its observed predictions on `indices`.
pub fn expert_accuracies(
    experts: &ExpertPredictionMatrix,
    data: &Dataset,
    indices: &[usize],
) -> Vec<Option<f64>> {
    (0..experts.num_experts())
        .map(|e| {
            let mut hits = 0usize;
            let mut seen = 0usize;
            for &i in indices {
                if let Some(class) = experts.class_of(i, e) {
                    seen += 1;
                    if class == data.label(i) {
                        hits += 1;
                    }
                }
            }
            if seen > 0 {
                Some(hits as f64 / seen as f64)
            } else {
                None
            }
        })
        .collect()
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        var_a += (x - mean) * (x - mean);
        var_b += (y - mean) * (y - mean);
    }
    if var_a == 0.0 || var_b == 0.0 {
        return 0.0;
    }
    cov / (var_a.sqrt() * var_b.sqrt())
}

/// Mean and standard error over repetition values.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
