//! Loss functions and their analytic gradients: the binary deferral loss
//! built on `sigma`, the multi-class softmax deferral loss, the classifier
//! log-loss, group-conditional losses, the consultation-cost regularizer, and
//! expert dropout.
//!
//! Conventions, used consistently everywhere:
//!
//! - The total loss is MINIMIZED. The deferral term is the negative
//!   log-likelihood of the aggregated prediction.
//! - The identity expert is materialized from the current classifier at
//!   evaluation time. Its column is the classifier's soft distribution, so the
//!   deferral term carries gradient back into the classifier even when
//!   `alpha1 = 0`.
//! - An expert that is unobserved for a sample, or dropped out for an
//!   iteration, contributes neither score, nor gradient, nor consultation
//!   cost for that sample.

use rand::Rng;

use crate::data::{Dataset, ExpertCostVector, ExpertPredictionMatrix};
use crate::error::{Error, Result};
use crate::exec;
use crate::models::{ClassifierModel, DeferrerModel, ParamGradient};
use crate::numeric::{logsumexp, softplus};

/// The score squashing function e^x / (e^x + e^(1-x)), evaluated in a form
/// that never exponentiates a large positive argument.
///
/// Fixed point at `sigma(0.5) = 0.5`; satisfies `sigma(x) + sigma(1-x) = 1`.
pub fn sigma(x: f64) -> f64 {
    // e^x / (e^x + e^(1-x)) = 1 / (1 + e^(1-2x))
    let t = 1.0 - 2.0 * x;
    if t <= 0.0 {
        1.0 / (1.0 + t.exp())
    } else {
        let e = (-t).exp();
        e / (1.0 + e)
    }
}

/// Negative log of `sigma(s)` (`positive = true`) or of `1 - sigma(s)`.
fn sigma_nll(s: f64, positive: bool) -> f64 {
    if positive {
        softplus(1.0 - 2.0 * s) // -ln sigma(s)
    } else {
        softplus(2.0 * s - 1.0) // -ln (1 - sigma(s))
    }
}

/// Hyperparameters of the combined loss.
#[derive(Debug, Clone)]
pub struct LossConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub lambda: f64,
    pub dropout_rate: f64,
    pub costs: ExpertCostVector,
}

impl LossConfig {
    pub fn new(
        alpha1: f64,
        alpha2: f64,
        lambda: f64,
        dropout_rate: f64,
        costs: ExpertCostVector,
    ) -> Result<Self> {
        if !(alpha1 >= 0.0) || !(alpha2 >= 0.0) || !(lambda >= 0.0) {
            return Err(Error::Validation(
                "alpha1, alpha2, lambda must be nonnegative".into(),
            ));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::Validation(format!(
                "dropout_rate must be in [0, 1), got {dropout_rate}"
            )));
        }
        Ok(LossConfig {
            alpha1,
            alpha2,
            lambda,
            dropout_rate,
            costs,
        })
    }
}

/// The classifier-as-expert column of the decision matrix.
#[derive(Debug, Clone, Copy)]
pub enum IdentityColumn<'a> {
    /// One-hot vertex at the classifier's predicted class (inference).
    Hard(usize),
    /// The classifier's soft distribution (training; differentiable).
    Soft(&'a [f64]),
}

/// Per-class aggregation scores `s_j = sum_i D_i * column_i[j]`.
#[derive(Debug, Clone)]
pub struct AggregatedScore {
    pub scores: Vec<f64>,
}

impl AggregatedScore {
    pub fn num_classes(&self) -> usize {
        self.scores.len()
    }
}

/// Aggregate active expert columns under the deferrer weights. `weights` has
/// the identity expert last; `expert_classes[i]` is meaningful only where
/// `active[i]` is true.
pub fn aggregate_scores(
    weights: &[f64],
    expert_classes: &[usize],
    active: &[bool],
    identity: IdentityColumn<'_>,
    num_classes: usize,
) -> AggregatedScore {
    debug_assert_eq!(weights.len(), expert_classes.len() + 1);
    debug_assert_eq!(expert_classes.len(), active.len());
    let mut scores = vec![0.0; num_classes];
    for (i, (&class, &on)) in expert_classes.iter().zip(active).enumerate() {
        if on {
            scores[class] += weights[i];
        }
    }
    let w_id = weights[weights.len() - 1];
    match identity {
        IdentityColumn::Hard(class) => scores[class] += w_id,
        IdentityColumn::Soft(dist) => {
            debug_assert_eq!(dist.len(), num_classes);
            for (s, &p) in scores.iter_mut().zip(dist) {
                *s += w_id * p;
            }
        }
    }
    AggregatedScore { scores }
}

/// Label distribution from aggregation scores: `sigma` on the class-1 score
/// for binary tasks, softmax otherwise.
pub fn proba_from_scores(score: &AggregatedScore) -> Vec<f64> {
    if score.scores.len() == 2 {
        let p1 = sigma(score.scores[1]);
        vec![1.0 - p1, p1]
    } else {
        let lse = logsumexp(&score.scores);
        score.scores.iter().map(|&s| (s - lse).exp()).collect()
    }
}

/// Aggregated label distribution of the deferral system for one sample.
pub fn predict_proba(
    weights: &[f64],
    expert_classes: &[usize],
    active: &[bool],
    identity: IdentityColumn<'_>,
    num_classes: usize,
) -> Vec<f64> {
    proba_from_scores(&aggregate_scores(
        weights,
        expert_classes,
        active,
        identity,
        num_classes,
    ))
}

/// Deferral negative log-likelihood and its score gradient.
struct DeferralEval {
    nll: f64,
    /// dNLL/ds_j; for binary tasks only index 1 is nonzero.
    dscore: Vec<f64>,
}

fn deferral_eval(scores: &[f64], y: usize) -> DeferralEval {
    if scores.len() == 2 {
        let s1 = scores[1];
        let p1 = sigma(s1);
        let (nll, d1) = if y == 1 {
            (sigma_nll(s1, true), -2.0 * (1.0 - p1))
        } else {
            (sigma_nll(s1, false), 2.0 * p1)
        };
        DeferralEval {
            nll,
            dscore: vec![0.0, d1],
        }
    } else {
        let lse = logsumexp(scores);
        let mut dscore: Vec<f64> = scores.iter().map(|&s| (s - lse).exp()).collect();
        dscore[y] -= 1.0;
        DeferralEval {
            nll: lse - scores[y],
            dscore,
        }
    }
}

/// Theorem-form gradient of the binary deferral loss with respect to the
/// weight vector, for a single sample.
///
/// `y_e1` holds each expert's class-1 coordinate (the identity column may be
/// soft). Component `i` is zero whenever that coordinate is zero; nonzero
/// components share the factor `-2(1-sigma(s))` when `y = 1` and `2 sigma(s)`
/// when `y = 0`, with `s = weights . y_e1`.
pub fn deferrer_gradient_binary(weights: &[f64], y: usize, y_e1: &[f64]) -> Vec<f64> {
    assert_eq!(weights.len(), y_e1.len());
    let s: f64 = weights.iter().zip(y_e1).map(|(w, v)| w * v).sum();
    let factor = if y == 1 {
        -2.0 * (1.0 - sigma(s))
    } else {
        2.0 * sigma(s)
    };
    y_e1.iter().map(|&v| factor * v).collect()
}

/// Per-sample dropout mask over the human experts (true = kept). The identity
/// expert is not part of the mask and can never be dropped.
pub fn apply_dropout(num_experts: usize, rate: f64, rng: &mut impl Rng) -> Vec<bool> {
    assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
    (0..num_experts)
        .map(|_| rng.random::<f64>() >= rate)
        .collect()
}

// --- batch evaluation --------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub(crate) enum AlphaPolicy {
    Const(f64, f64),
    /// `alpha1 = 1`, `alpha2 = 1[argmax F(x) != y]`, recomputed per sample.
    Indicator,
}

pub(crate) struct BatchParams<'a> {
    pub data: &'a Dataset,
    pub experts: &'a ExpertPredictionMatrix,
    /// Dataset rows forming the batch.
    pub indices: &'a [usize],
    /// Dropout keep-mask, `indices.len() x num_experts`; `None` keeps all.
    pub kept: Option<&'a [bool]>,
    /// Per-dataset-row sample weights; `None` means uniform 1.
    pub sample_weight: Option<&'a [f64]>,
    pub alpha: AlphaPolicy,
    pub lambda: f64,
    pub costs: &'a [f64],
}

pub(crate) struct BatchEval {
    /// Weighted mean of `a1*L_clf + a2*L_defer + lambda*cost` over the batch.
    pub loss: f64,
    /// Unweighted per-group means of `a1*L_clf + a2*L_defer` (no regularizer);
    /// `None` for groups absent from the batch.
    pub group_loss: Vec<Option<f64>>,
    pub grad_classifier: Option<ParamGradient>,
    pub grad_deferrer: Option<ParamGradient>,
}

struct Accum {
    loss: f64,
    group_sum: Vec<f64>,
    group_n: Vec<usize>,
    grad_f: Vec<f64>,
    grad_d: Vec<f64>,
}

pub(crate) fn eval_batch(
    classifier: &ClassifierModel,
    deferrer: &DeferrerModel,
    p: &BatchParams<'_>,
    want_grads: bool,
) -> Result<BatchEval> {
    let n = p.indices.len();
    if n == 0 {
        return Err(Error::Validation("batch must be nonempty".into()));
    }
    let num_experts = p.experts.num_experts();
    if deferrer.num_experts_total != num_experts + 1 {
        return Err(Error::DimensionMismatch {
            expected: num_experts + 1,
            actual: deferrer.num_experts_total,
        });
    }
    if p.costs.len() != num_experts {
        return Err(Error::DimensionMismatch {
            expected: num_experts,
            actual: p.costs.len(),
        });
    }
    if let Some(kept) = p.kept {
        if kept.len() != n * num_experts {
            return Err(Error::DimensionMismatch {
                expected: n * num_experts,
                actual: kept.len(),
            });
        }
    }
    let num_classes = p.data.num_classes();
    let num_groups = p.data.num_groups();
    let m = deferrer.num_experts_total;

    let items: Vec<(usize, usize)> = p.indices.iter().cloned().enumerate().collect();
    let make = || Accum {
        loss: 0.0,
        group_sum: vec![0.0; num_groups],
        group_n: vec![0; num_groups],
        grad_f: if want_grads {
            vec![0.0; classifier.param_count()]
        } else {
            Vec::new()
        },
        grad_d: if want_grads {
            vec![0.0; deferrer.param_count()]
        } else {
            Vec::new()
        },
    };

    let fold = |acc: &mut Accum, item: &(usize, usize)| {
        let (pos, row) = *item;
        let x = p.data.features(row);
        let y = p.data.label(row);
        let z = p.data.group(row);
        let (dist, nll_clf) = classifier.dist_and_nll(x, y);
        let (a1, a2) = match p.alpha {
            AlphaPolicy::Const(a1, a2) => (a1, a2),
            AlphaPolicy::Indicator => {
                let correct = crate::numeric::argmax(&dist) == y;
                (1.0, if correct { 0.0 } else { 1.0 })
            }
        };
        let weights = deferrer.weights(x);

        let mut active = vec![false; num_experts];
        for (i, slot) in active.iter_mut().enumerate() {
            *slot = p.experts.observed(row, i) && p.kept.map_or(true, |k| k[pos * num_experts + i]);
        }
        let classes = p.experts.class_row(row);
        let agg = aggregate_scores(
            &weights,
            classes,
            &active,
            IdentityColumn::Soft(&dist),
            num_classes,
        );
        let defer = deferral_eval(&agg.scores, y);

        let mut cost_sum = 0.0;
        for (i, &on) in active.iter().enumerate() {
            if on {
                cost_sum += p.costs[i] * weights[i];
            }
        }

        let w = p.sample_weight.map_or(1.0, |sw| sw[row]);
        let base = a1 * nll_clf + a2 * defer.nll;
        acc.loss += w * (base + p.lambda * cost_sum);
        acc.group_sum[z] += base;
        acc.group_n[z] += 1;

        if want_grads {
            let w_id = weights[m - 1];
            let dist_cot: Vec<f64> = defer.dscore.iter().map(|&g| w * a2 * w_id * g).collect();
            classifier.accumulate_grads(x, y, w * a1, Some(&dist_cot), &mut acc.grad_f);

            let mut weight_cot = vec![0.0; m];
            for (i, &on) in active.iter().enumerate() {
                if on {
                    weight_cot[i] = w * (a2 * defer.dscore[classes[i]] + p.lambda * p.costs[i]);
                }
            }
            weight_cot[m - 1] = w
                * a2
                * defer
                    .dscore
                    .iter()
                    .zip(&dist)
                    .map(|(g, pj)| g * pj)
                    .sum::<f64>();
            deferrer.accumulate_grad(x, &weight_cot, &mut acc.grad_d);
        }
    };

    let merge = |acc: &mut Accum, part: Accum| {
        acc.loss += part.loss;
        for (a, b) in acc.group_sum.iter_mut().zip(part.group_sum) {
            *a += b;
        }
        for (a, b) in acc.group_n.iter_mut().zip(part.group_n) {
            *a += b;
        }
        for (a, b) in acc.grad_f.iter_mut().zip(part.grad_f) {
            *a += b;
        }
        for (a, b) in acc.grad_d.iter_mut().zip(part.grad_d) {
            *a += b;
        }
    };

    let mut total = exec::fold_chunks(&items, make, fold, merge);
    let scale = 1.0 / n as f64;
    total.loss *= scale;
    for g in total.grad_f.iter_mut() {
        *g *= scale;
    }
    for g in total.grad_d.iter_mut() {
        *g *= scale;
    }
    let group_loss = total
        .group_sum
        .iter()
        .zip(&total.group_n)
        .map(|(&s, &c)| if c > 0 { Some(s / c as f64) } else { None })
        .collect();

    Ok(BatchEval {
        loss: total.loss,
        group_loss,
        grad_classifier: want_grads.then_some(total.grad_f),
        grad_deferrer: want_grads.then_some(total.grad_d),
    })
}

/// Combined loss over a batch:
/// `alpha1 * mean(L_clf) + alpha2 * mean(L_defer) + lambda * mean(cost . D(x))`.
///
/// `dropout_kept` is a per-(batch-position, expert) keep mask as produced by
/// [`apply_dropout`]; `None` keeps every observed expert.
pub fn joint_loss(
    classifier: &ClassifierModel,
    deferrer: &DeferrerModel,
    data: &Dataset,
    experts: &ExpertPredictionMatrix,
    indices: &[usize],
    cfg: &LossConfig,
    dropout_kept: Option<&[bool]>,
) -> Result<f64> {
    let eval = eval_batch(
        classifier,
        deferrer,
        &BatchParams {
            data,
            experts,
            indices,
            kept: dropout_kept,
            sample_weight: None,
            alpha: AlphaPolicy::Const(cfg.alpha1, cfg.alpha2),
            lambda: cfg.lambda,
            costs: cfg.costs.costs(),
        },
        false,
    )?;
    Ok(eval.loss)
}

/// [`joint_loss`] plus analytic parameter gradients for both models.
pub fn joint_loss_and_grads(
    classifier: &ClassifierModel,
    deferrer: &DeferrerModel,
    data: &Dataset,
    experts: &ExpertPredictionMatrix,
    indices: &[usize],
    cfg: &LossConfig,
    dropout_kept: Option<&[bool]>,
) -> Result<(f64, ParamGradient, ParamGradient)> {
    let eval = eval_batch(
        classifier,
        deferrer,
        &BatchParams {
            data,
            experts,
            indices,
            kept: dropout_kept,
            sample_weight: None,
            alpha: AlphaPolicy::Const(cfg.alpha1, cfg.alpha2),
            lambda: cfg.lambda,
            costs: cfg.costs.costs(),
        },
        true,
    )?;
    Ok((
        eval.loss,
        eval.grad_classifier.unwrap(),
        eval.grad_deferrer.unwrap(),
    ))
}

/// Group-conditional losses `L^z`: the alpha terms of [`joint_loss`]
/// restricted to each group (the cost regularizer is not part of `L^z`).
/// Groups without samples in the batch report `None`.
pub fn group_losses(
    classifier: &ClassifierModel,
    deferrer: &DeferrerModel,
    data: &Dataset,
    experts: &ExpertPredictionMatrix,
    indices: &[usize],
    cfg: &LossConfig,
) -> Result<Vec<Option<f64>>> {
    let eval = eval_batch(
        classifier,
        deferrer,
        &BatchParams {
            data,
            experts,
            indices,
            kept: None,
            sample_weight: None,
            alpha: AlphaPolicy::Const(cfg.alpha1, cfg.alpha2),
            lambda: 0.0,
            costs: cfg.costs.costs(),
        },
        false,
    )?;
    Ok(eval.group_loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ClassifierKind, DeferrerKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::E;

    fn naive_sigma(x: f64) -> f64 {
        x.exp() / (x.exp() + (1.0 - x).exp())
    }

    #[test]
    fn sigma_fixed_points() {
        assert!((sigma(0.5) - 0.5).abs() < 1e-15);
        assert!((sigma(1.0) - E / (E + 1.0)).abs() < 1e-15);
        assert!((sigma(50.0) - 1.0).abs() < 1e-12);
        assert!(sigma(50.0).is_finite() && sigma(-50.0).is_finite());
    }

    #[test]
    fn sigma_matches_naive_form() {
        for i in -60..=60 {
            let x = i as f64 * 0.1;
            assert!((sigma(x) - naive_sigma(x)).abs() < 1e-14, "x = {x}");
        }
    }

    #[test]
    fn sigma_complement_identity_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // Strictly increasing wherever f64 can still resolve the increments
        // (the tails saturate at 0 and 1 beyond |x| ~ 19).
        let mut prev = sigma(-16.0);
        for i in 1..=320 {
            let x = -16.0 + i as f64 * 0.1;
            let s = sigma(x);
            assert!(s > prev, "sigma must be strictly increasing at x = {x}");
            prev = s;
        }
        for _ in 0..200 {
            let x = rng.random_range(-20.0..20.0);
            assert!((sigma(x) + sigma(1.0 - x) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_proba_binary_matches_sigma_formula() {
        // D = (1, 1), one human expert and the identity both predicting 1.
        let p = predict_proba(&[1.0, 1.0], &[1], &[true], IdentityColumn::Hard(1), 2);
        let expected = naive_sigma(2.0);
        assert!((p[1] - expected).abs() < 1e-12);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn predict_proba_multiclass_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let weights: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
            let classes: Vec<usize> = (0..3).map(|_| rng.random_range(0..3)).collect();
            let p = predict_proba(&weights, &classes, &[true; 3], IdentityColumn::Hard(0), 3);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let p = predict_proba(
            &[0.0; 4],
            &[0, 1, 2],
            &[true; 3],
            IdentityColumn::Hard(0),
            3,
        );
        for &pi in &p {
            assert!((pi - 1.0 / 3.0).abs() < 1e-12);
        }
        // In the binary case zero scores sit at sigma(0) = 1/(1+e), not 0.5:
        // the squashing function is symmetric around 0.5, not 0.
        let p2 = predict_proba(&[0.0, 0.0], &[1], &[true], IdentityColumn::Hard(1), 2);
        assert!((p2[1] - 1.0 / (1.0 + E)).abs() < 1e-12);
    }

    #[test]
    fn scores_sum_to_active_weight_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let weights: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
            let classes: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
            let active: Vec<bool> = (0..4).map(|_| rng.random::<f64>() < 0.7).collect();
            let dist = vec![0.2, 0.5, 0.3];
            let agg = aggregate_scores(&weights, &classes, &active, IdentityColumn::Soft(&dist), 3);
            let mass: f64 = classes
                .iter()
                .zip(&active)
                .enumerate()
                .filter(|(_, (_, &on))| on)
                .map(|(i, _)| weights[i])
                .sum::<f64>()
                + weights[4];
            assert!((agg.scores.iter().sum::<f64>() - mass).abs() < 1e-12);
        }
    }

    // --- joint loss -----------------------------------------------------

    fn tiny_world(
        n: usize,
        num_experts: usize,
        num_classes: usize,
        seed: u64,
    ) -> (Dataset, ExpertPredictionMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 2;
        let features: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..num_classes)).collect();
        let groups: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let data = Dataset::new(features, dim, labels, groups, num_classes, 2).unwrap();
        let mut experts = ExpertPredictionMatrix::empty(n, num_experts);
        for s in 0..n {
            for e in 0..num_experts {
                if rng.random::<f64>() < 0.85 {
                    experts.set(s, e, rng.random_range(0..num_classes));
                }
            }
        }
        (data, experts)
    }

    #[test]
    fn alpha1_only_is_mean_classifier_log_loss() {
        let (data, experts) = tiny_world(40, 3, 2, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let clf = ClassifierModel::new(ClassifierKind::LinearLogistic, 2, 0, 2, &mut rng).unwrap();
        let def = DeferrerModel::new(DeferrerKind::GlobalWeights, 2, 0, 4, &mut rng).unwrap();
        let indices: Vec<usize> = (0..40).collect();
        let cfg = LossConfig::new(
            1.0,
            0.0,
            0.0,
            0.0,
            ExpertCostVector::uniform(3, 1.0).unwrap(),
        )
        .unwrap();
        let loss = joint_loss(&clf, &def, &data, &experts, &indices, &cfg, None).unwrap();
        let expected: f64 = indices
            .iter()
            .map(|&i| clf.nll(data.features(i), data.label(i)))
            .sum::<f64>()
            / 40.0;
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn single_sample_closed_form_deferral_loss() {
        // One human expert and the identity, D = (1, 1), y = 1, both correct.
        // The classifier is saturated so its soft column is exactly one-hot.
        let data = Dataset::new(vec![1.0], 1, vec![1], vec![0], 2, 1).unwrap();
        let mut experts = ExpertPredictionMatrix::empty(1, 1);
        experts.set(0, 0, 1);
        let mut clf = ClassifierModel::zeros(ClassifierKind::LinearLogistic, 1, 0, 2).unwrap();
        clf.params = vec![40.0, 0.0]; // logit 40 -> P(1) rounds to exactly 1.0
        let mut def = DeferrerModel::zeros(DeferrerKind::GlobalWeights, 1, 0, 2).unwrap();
        def.params = vec![1.0, 1.0];
        let cfg = LossConfig::new(
            0.0,
            1.0,
            0.0,
            0.0,
            ExpertCostVector::uniform(1, 1.0).unwrap(),
        )
        .unwrap();
        let loss = joint_loss(&clf, &def, &data, &experts, &[0], &cfg, None).unwrap();
        let expected = -naive_sigma(2.0).ln(); // = ln(1 + e^-3)
        assert!((loss - expected).abs() < 1e-12, "loss {loss} vs {expected}");
    }

    #[test]
    fn cost_regularizer_contributes_exactly() {
        // alpha terms off; human weights sum to 2, unit costs, lambda = 0.05.
        let (data, _) = tiny_world(5, 3, 2, 12);
        let mut experts = ExpertPredictionMatrix::empty(5, 3);
        for s in 0..5 {
            for e in 0..3 {
                experts.set(s, e, 0);
            }
        }
        let clf = ClassifierModel::zeros(ClassifierKind::LinearLogistic, 2, 0, 2).unwrap();
        let mut def = DeferrerModel::zeros(DeferrerKind::GlobalWeights, 2, 0, 4).unwrap();
        def.params = vec![1.0, 0.7, 0.3, 0.9];
        let cfg = LossConfig::new(
            0.0,
            0.0,
            0.05,
            0.0,
            ExpertCostVector::uniform(3, 1.0).unwrap(),
        )
        .unwrap();
        let indices: Vec<usize> = (0..5).collect();
        let loss = joint_loss(&clf, &def, &data, &experts, &indices, &cfg, None).unwrap();
        assert!((loss - 0.1).abs() < 1e-15);
    }

    #[test]
    fn group_losses_recombine_to_joint_loss() {
        let (data, experts) = tiny_world(60, 4, 3, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let clf = ClassifierModel::new(ClassifierKind::TwoLayer, 2, 4, 3, &mut rng).unwrap();
        let def = DeferrerModel::new(DeferrerKind::InputConditioned, 2, 4, 5, &mut rng).unwrap();
        let indices: Vec<usize> = (0..60).collect();
        let cfg = LossConfig::new(
            0.7,
            1.3,
            0.0,
            0.0,
            ExpertCostVector::uniform(4, 1.0).unwrap(),
        )
        .unwrap();
        let per_group = group_losses(&clf, &def, &data, &experts, &indices, &cfg).unwrap();
        let joint = joint_loss(&clf, &def, &data, &experts, &indices, &cfg, None).unwrap();
        let n = indices.len() as f64;
        let mut recombined = 0.0;
        for (z, lz) in per_group.iter().enumerate() {
            let nz = indices.iter().filter(|&&i| data.group(i) == z).count() as f64;
            if let Some(lz) = lz {
                recombined += (nz / n) * lz;
            }
        }
        assert!((recombined - joint).abs() < 1e-9);
    }

    #[test]
    fn group_losses_single_group_and_symmetry() {
        // Single-group batch: the group loss vector is exactly the joint loss.
        let data =
            Dataset::new(vec![0.5, 1.0, -0.5, 0.2], 2, vec![0, 1], vec![0, 0], 2, 1).unwrap();
        let mut experts = ExpertPredictionMatrix::empty(2, 1);
        experts.set(0, 0, 0);
        experts.set(1, 0, 1);
        let clf = ClassifierModel::zeros(ClassifierKind::LinearLogistic, 2, 0, 2).unwrap();
        let mut def = DeferrerModel::zeros(DeferrerKind::GlobalWeights, 2, 0, 2).unwrap();
        def.params = vec![0.6, 0.4];
        let cfg = LossConfig::new(
            1.0,
            1.0,
            0.0,
            0.0,
            ExpertCostVector::uniform(1, 1.0).unwrap(),
        )
        .unwrap();
        let per_group = group_losses(&clf, &def, &data, &experts, &[0, 1], &cfg).unwrap();
        let joint = joint_loss(&clf, &def, &data, &experts, &[0, 1], &cfg, None).unwrap();
        assert_eq!(per_group.len(), 1);
        assert!((per_group[0].unwrap() - joint).abs() < 1e-12);

        // Two groups with identical contents give identical losses.
        let data2 = Dataset::new(
            vec![0.5, 1.0, -0.5, 0.2, 0.5, 1.0, -0.5, 0.2],
            2,
            vec![0, 1, 0, 1],
            vec![0, 0, 1, 1],
            2,
            2,
        )
        .unwrap();
        let mut experts2 = ExpertPredictionMatrix::empty(4, 1);
        for s in 0..4 {
            experts2.set(s, 0, s % 2);
        }
        let per_group2 = group_losses(&clf, &def, &data2, &experts2, &[0, 1, 2, 3], &cfg).unwrap();
        assert!((per_group2[0].unwrap() - per_group2[1].unwrap()).abs() < 1e-12);
    }

    // --- theorem-form gradient -------------------------------------------

    #[test]
    fn gradient_closed_form_examples() {
        // y = 1, D = (0,0), y_e1 = (1,0): first component -2e/(1+e), second 0.
        let g = deferrer_gradient_binary(&[0.0, 0.0], 1, &[1.0, 0.0]);
        assert!((g[0] - (-2.0 * E / (1.0 + E))).abs() < 1e-12);
        assert_eq!(g[1], 0.0);

        // y = 0, y_e1 = (1,1), D = (0,0): both components 2 sigma(0) > 0.
        let g = deferrer_gradient_binary(&[0.0, 0.0], 0, &[1.0, 1.0]);
        let expected = 2.0 / (1.0 + E);
        assert!((g[0] - expected).abs() < 1e-12);
        assert!((g[1] - expected).abs() < 1e-12);
    }

    #[test]
    fn gradient_case_table_zero_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..50 {
            let m = rng.random_range(2..6usize);
            let d: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
            let v: Vec<f64> = (0..m)
                .map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 })
                .collect();
            let y = rng.random_range(0..2usize);
            let g = deferrer_gradient_binary(&d, y, &v);
            for (gi, &vi) in g.iter().zip(&v) {
                if vi == 0.0 {
                    assert_eq!(*gi, 0.0);
                }
            }
        }
    }

    #[test]
    fn gradient_shared_proportionality_constant() {
        // Conditional on y, every nonzero component of -dL/dD divided by the
        // theorem's exponential factor is the same constant 2/(e^s + e^(1-s)).
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for trial in 0..20 {
            let m = rng.random_range(2..7usize);
            let d: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
            let mut v: Vec<f64> = (0..m)
                .map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 })
                .collect();
            v[0] = 1.0; // keep at least one nonzero component
            let y = trial % 2;
            let s: f64 = d.iter().zip(&v).map(|(a, b)| a * b).sum();
            let g = deferrer_gradient_binary(&d, y, &v);
            let factor = if y == 1 { (1.0 - s).exp() } else { -(s.exp()) };
            let constants: Vec<f64> = g
                .iter()
                .zip(&v)
                .filter(|(_, &vi)| vi != 0.0)
                .map(|(&gi, _)| -gi / factor)
                .collect();
            let first = constants[0];
            for c in &constants {
                assert!(((c - first) / first).abs() < 1e-9);
            }
            let expected = 2.0 / (s.exp() + (1.0 - s).exp());
            assert!(((first - expected) / expected).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_of_deferral_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let m = rng.random_range(2..6usize);
            let d: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
            let v: Vec<f64> = (0..m)
                .map(|i| {
                    if i == m - 1 {
                        rng.random::<f64>()
                    } else {
                        f64::from(rng.random::<bool>())
                    }
                })
                .collect();
            let y = rng.random_range(0..2usize);
            let nll = |d: &[f64]| {
                let s: f64 = d.iter().zip(&v).map(|(a, b)| a * b).sum();
                sigma_nll(s, y == 1)
            };
            let analytic = deferrer_gradient_binary(&d, y, &v);
            let h = 1e-6;
            for i in 0..m {
                let mut up = d.clone();
                up[i] += h;
                let mut down = d.clone();
                down[i] -= h;
                let numeric = (nll(&up) - nll(&down)) / (2.0 * h);
                let denom = numeric.abs().max(analytic[i].abs()).max(1e-8);
                assert!((numeric - analytic[i]).abs() / denom < 1e-5);
            }
        }
    }

    #[test]
    fn batch_gradient_for_unobserved_expert_is_zero() {
        let (data, _) = tiny_world(10, 2, 2, 18);
        let mut experts = ExpertPredictionMatrix::empty(10, 2);
        for s in 0..10 {
            experts.set(s, 0, s % 2); // expert 1 never observed
        }
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let clf = ClassifierModel::new(ClassifierKind::LinearLogistic, 2, 0, 2, &mut rng).unwrap();
        let def = DeferrerModel::new(DeferrerKind::GlobalWeights, 2, 0, 3, &mut rng).unwrap();
        let cfg = LossConfig::new(
            0.5,
            1.0,
            0.0,
            0.0,
            ExpertCostVector::uniform(2, 1.0).unwrap(),
        )
        .unwrap();
        let indices: Vec<usize> = (0..10).collect();
        let (_, _, grad_d) =
            joint_loss_and_grads(&clf, &def, &data, &experts, &indices, &cfg, None).unwrap();
        assert_eq!(grad_d[1], 0.0);
        assert!(grad_d[0] != 0.0);
    }

    #[test]
    fn dropout_masked_expert_contributes_nothing() {
        let (data, mut experts) = tiny_world(6, 2, 2, 20);
        for s in 0..6 {
            experts.set(s, 0, 0);
            experts.set(s, 1, 1);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let clf = ClassifierModel::new(ClassifierKind::LinearLogistic, 2, 0, 2, &mut rng).unwrap();
        let def = DeferrerModel::new(DeferrerKind::GlobalWeights, 2, 0, 3, &mut rng).unwrap();
        let cfg = LossConfig::new(
            0.0,
            1.0,
            0.1,
            0.0,
            ExpertCostVector::uniform(2, 1.0).unwrap(),
        )
        .unwrap();
        let indices: Vec<usize> = (0..6).collect();

        // Dropping expert 1 everywhere must equal physically removing it.
        let kept: Vec<bool> = (0..6).flat_map(|_| [true, false]).collect();
        let (loss_masked, _, grad_masked) =
            joint_loss_and_grads(&clf, &def, &data, &experts, &indices, &cfg, Some(&kept)).unwrap();
        assert_eq!(grad_masked[1], 0.0);

        let mut removed = experts.clone();
        for s in 0..6 {
            removed.clear(s, 1);
        }
        let (loss_removed, _, _) =
            joint_loss_and_grads(&clf, &def, &data, &removed, &indices, &cfg, None).unwrap();
        assert!((loss_masked - loss_removed).abs() < 1e-15);
    }

    #[test]
    fn dropout_mask_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        assert!(apply_dropout(8, 0.0, &mut rng).iter().all(|&b| b));
        let mut dropped = 0usize;
        let total = 100_000;
        for _ in 0..total {
            if !apply_dropout(1, 0.2, &mut rng)[0] {
                dropped += 1;
            }
        }
        let rate = dropped as f64 / total as f64;
        assert!((rate - 0.2).abs() < 0.005, "empirical drop rate {rate}");
    }

    #[test]
    fn indicator_alpha_gates_deferral_term() {
        let (data, experts) = tiny_world(30, 2, 2, 23);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let clf = ClassifierModel::new(ClassifierKind::LinearLogistic, 2, 0, 2, &mut rng).unwrap();
        let def = DeferrerModel::new(DeferrerKind::GlobalWeights, 2, 0, 3, &mut rng).unwrap();
        let indices: Vec<usize> = (0..30).collect();
        let eval = eval_batch(
            &clf,
            &def,
            &BatchParams {
                data: &data,
                experts: &experts,
                indices: &indices,
                kept: None,
                sample_weight: None,
                alpha: AlphaPolicy::Indicator,
                lambda: 0.0,
                costs: &[1.0, 1.0],
            },
            false,
        )
        .unwrap();
        // Manual recomputation.
        let mut expected = 0.0;
        for &i in &indices {
            let x = data.features(i);
            let y = data.label(i);
            let dist = clf.forward(x).unwrap();
            let a2 = if crate::numeric::argmax(&dist) == y {
                0.0
            } else {
                1.0
            };
            let w = def.weights(x);
            let active: Vec<bool> = (0..2).map(|e| experts.observed(i, e)).collect();
            let agg = aggregate_scores(
                &w,
                experts.class_row(i),
                &active,
                IdentityColumn::Soft(&dist),
                2,
            );
            expected += clf.nll(x, y) + a2 * deferral_eval(&agg.scores, y).nll;
        }
        expected /= 30.0;
        assert!((eval.loss - expected).abs() < 1e-12);
    }
}
