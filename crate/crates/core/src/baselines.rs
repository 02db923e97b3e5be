//! Reference policies: classifier-only, random committees, reliability-based
//! worker selection, and per-expert correctness models with input-specific
//! committees.
//!
//! The two crowdsourcing-style baselines treat the pre-trained classifier as
//! just another worker. Their upstream selection rules are approximated as
//! top-k by scalar reliability (input-independent by construction) and top-k
//! by predicted per-input correctness respectively; both live behind this
//! module's interface.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, ExpertPredictionMatrix};
use crate::error::{Error, Result};
use crate::exec;
use crate::models::{ClassifierKind, ClassifierModel};
use crate::training::fit_classifier;

/// Scalar train-split accuracy per worker; the classifier occupies the last
/// slot, after the human experts.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityTable {
    pub values: Vec<f64>,
}

/// One correctness predictor per worker (same order as [`ReliabilityTable`]):
/// a small binary network estimating P(worker is correct | x).
#[derive(Debug, Clone)]
pub struct ErrorModelSet {
    pub models: Vec<ClassifierModel>,
}

/// Training settings for the correctness predictors.
#[derive(Debug, Clone)]
pub struct ErrorModelConfig {
    pub hidden_dim: usize,
    pub eta: f64,
    pub iters: usize,
    pub seed: u64,
}

impl Default for ErrorModelConfig {
    fn default() -> Self {
        ErrorModelConfig {
            hidden_dim: 16,
            eta: 0.1,
            iters: 150,
            seed: 0,
        }
    }
}

/// Majority vote over class votes; ties resolve toward the lowest class.
pub fn majority_vote(votes: &[usize], num_classes: usize) -> usize {
    let mut counts = vec![0usize; num_classes];
    for &v in votes {
        counts[v] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate().skip(1) {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

/// Predicted class of a worker on a sample: human experts answer where
/// observed, the classifier always answers.
pub fn worker_class(
    experts: &ExpertPredictionMatrix,
    classifier: &ClassifierModel,
    data: &Dataset,
    worker: usize,
    sample: usize,
) -> Option<usize> {
    if worker < experts.num_experts() {
        experts.class_of(sample, worker)
    } else {
        Some(classifier.predict_class(data.features(sample)))
    }
}

/// Train-split accuracy of every worker (humans over their observed samples,
/// the classifier over all of them).
pub fn reliabilities(
    experts: &ExpertPredictionMatrix,
    classifier: &ClassifierModel,
    data: &Dataset,
    indices: &[usize],
) -> ReliabilityTable {
    let num_workers = experts.num_experts() + 1;
    let mut values = Vec::with_capacity(num_workers);
    for w in 0..num_workers {
        let mut hits = 0usize;
        let mut seen = 0usize;
        for &i in indices {
            if let Some(class) = worker_class(experts, classifier, data, w, i) {
                seen += 1;
                if class == data.label(i) {
                    hits += 1;
                }
            }
        }
        values.push(if seen > 0 {
            hits as f64 / seen as f64
        } else {
            0.0
        });
    }
    ReliabilityTable { values }
}

/// Uniform committee of `k` distinct members out of `num_workers`.
pub fn random_committee(num_workers: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    assert!(k <= num_workers, "committee cannot exceed the worker pool");
    let mut order: Vec<usize> = (0..num_workers).collect();
    order.shuffle(rng);
    let mut chosen: Vec<usize> = order[..k].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Per-expert, per-group accuracy estimates over observed train predictions.
/// Entries with no observations come back as `None`.
pub fn expert_group_accuracies(
    experts: &ExpertPredictionMatrix,
    data: &Dataset,
    indices: &[usize],
) -> Vec<Vec<Option<f64>>> {
    let num_groups = data.num_groups();
    let mut hits = vec![vec![0usize; num_groups]; experts.num_experts()];
    let mut totals = vec![vec![0usize; num_groups]; experts.num_experts()];
    for &i in indices {
        let z = data.group(i);
        for e in 0..experts.num_experts() {
            if let Some(class) = experts.class_of(i, e) {
                totals[e][z] += 1;
                if class == data.label(i) {
                    hits[e][z] += 1;
                }
            }
        }
    }
    hits.into_iter()
        .zip(totals)
        .map(|(h, t)| {
            h.into_iter()
                .zip(t)
                .map(|(hz, tz)| {
                    if tz > 0 {
                        Some(hz as f64 / tz as f64)
                    } else {
                        None
                    }
                })
                .collect()
        })
        .collect()
}

/// Group-aware random committee: choose uniformly among the experts whose
/// estimated accuracy for the input's group strictly exceeds their best
/// accuracy on any other group. An empty eligible pool falls back to the
/// whole expert pool.
pub fn random_fair_committee(
    group_accuracies: &[Vec<Option<f64>>],
    group: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let eligible: Vec<usize> = group_accuracies
        .iter()
        .enumerate()
        .filter(|(_, accs)| {
            let own = accs.get(group).copied().flatten();
            match own {
                None => false,
                Some(own) => accs
                    .iter()
                    .enumerate()
                    .filter(|&(z, _)| z != group)
                    .all(|(_, other)| other.map_or(true, |o| own > o)),
            }
        })
        .map(|(e, _)| e)
        .collect();
    let pool: Vec<usize> = if eligible.is_empty() {
        (0..group_accuracies.len()).collect()
    } else {
        eligible
    };
    let take = k.min(pool.len());
    let mut order = pool;
    order.shuffle(rng);
    let mut chosen: Vec<usize> = order[..take].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Reliability-based selection: the `k` most reliable workers, ties toward
/// the lower index. The committee is input-independent; every prediction is
/// the majority vote of the same workers.
pub fn ll_select(table: &ReliabilityTable, k: usize) -> Vec<usize> {
    assert!(k <= table.values.len(), "k exceeds the worker pool");
    let mut order: Vec<usize> = (0..table.values.len()).collect();
    order.sort_by(|&a, &b| {
        table.values[b]
            .partial_cmp(&table.values[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut chosen: Vec<usize> = order[..k].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Majority vote of a fixed committee on one sample; members without an
/// observed prediction abstain.
pub fn committee_vote(
    committee: &[usize],
    experts: &ExpertPredictionMatrix,
    classifier: &ClassifierModel,
    data: &Dataset,
    sample: usize,
) -> usize {
    let votes: Vec<usize> = committee
        .iter()
        .filter_map(|&w| worker_class(experts, classifier, data, w, sample))
        .collect();
    majority_vote(&votes, data.num_classes())
}

/// Fit one correctness predictor per worker on the train split. Binary tasks
/// only; every human prediction must be observed on the split.
pub fn crowdselect_train(
    data: &Dataset,
    experts: &ExpertPredictionMatrix,
    classifier: &ClassifierModel,
    indices: &[usize],
    cfg: &ErrorModelConfig,
) -> Result<ErrorModelSet> {
    if data.num_classes() != 2 {
        return Err(Error::Validation(
            "correctness-model selection applies to binary tasks only".into(),
        ));
    }
    for &i in indices {
        for e in 0..experts.num_experts() {
            if !experts.observed(i, e) {
                return Err(Error::Validation(format!(
                    "expert {e} has no prediction for train sample {i}"
                )));
            }
        }
    }
    let num_workers = experts.num_experts() + 1;
    let workers: Vec<usize> = (0..num_workers).collect();
    let models: Vec<Result<ClassifierModel>> = exec::map_collect(&workers, |&w| {
        let mut correct = vec![0usize; data.n_samples()];
        for &i in indices {
            let class = worker_class(experts, classifier, data, w, i).expect("observed");
            correct[i] = usize::from(class == data.label(i));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0x6572726d + w as u64);
        let mut model = ClassifierModel::new(
            ClassifierKind::TwoLayer,
            data.feature_dim(),
            cfg.hidden_dim,
            2,
            &mut rng,
        )?;
        fit_classifier(
            &mut model,
            data,
            indices,
            Some(&correct),
            cfg.eta,
            cfg.iters,
        )?;
        Ok(model)
    });
    let mut set = Vec::with_capacity(num_workers);
    for m in models {
        set.push(m?);
    }
    Ok(ErrorModelSet { models: set })
}

/// Input-specific committee: the `k` workers with the highest predicted
/// correctness at `x` (among workers that answered), plus their majority vote.
pub fn crowdselect_predict(
    error_models: &ErrorModelSet,
    experts: &ExpertPredictionMatrix,
    classifier: &ClassifierModel,
    data: &Dataset,
    sample: usize,
    k: usize,
) -> (Vec<usize>, usize) {
    let x = data.features(sample);
    let mut scored: Vec<(usize, f64, usize)> = error_models
        .models
        .iter()
        .enumerate()
        .filter_map(|(w, h)| {
            worker_class(experts, classifier, data, w, sample).map(|class| (w, h.dist(x)[1], class))
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let take = k.min(scored.len());
    let committee: Vec<usize> = {
        let mut c: Vec<usize> = scored[..take].iter().map(|&(w, _, _)| w).collect();
        c.sort_unstable();
        c
    };
    let votes: Vec<usize> = scored[..take].iter().map(|&(_, _, class)| class).collect();
    let label = majority_vote(&votes, data.num_classes());
    (committee, label)
}
