//! Optimization loops: full-batch projected gradient descent, minibatch SGD,
//! alpha schedules, balanced training, and the minimax two-player loop.
//!
//! A run is sequential in its parameter state; batch loss/gradient evaluation
//! parallelizes over samples with a fixed reduction order, so identical
//! configs and seeds produce bitwise-identical loss traces.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, ExpertCostVector, ExpertPredictionMatrix};
use crate::error::{Error, Result};
use crate::losses::{self, AlphaPolicy, BatchParams, LossConfig};
use crate::models::{project_box_in_place, ClassifierModel, DeferrerKind, DeferrerModel};

/// How the loss mixing weights evolve over iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaMode {
    Constant {
        alpha1: f64,
        alpha2: f64,
    },
    /// `alpha1 = 1`, `alpha2 = 1 - t^(-c)`: the classifier gets a head start.
    TimeDecay {
        c: f64,
    },
    /// `alpha1 = 1`, `alpha2 = 1[argmax F(x) != y]`, per sample.
    Indicator,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fairness {
    None,
    Balanced,
    Minimax { rounds: usize, group_lr: f64 },
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub eta: f64,
    pub iters: usize,
    /// `None` runs full-batch steps.
    pub batch_size: Option<usize>,
    pub alpha: AlphaMode,
    pub fairness: Fairness,
    pub dropout_rate: f64,
    pub lambda: f64,
    pub seed: u64,
    /// Optional smoothness estimate of the classifier loss, used only by
    /// [`suggested_eta`] diagnostics.
    pub lipschitz_hint: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::Validation("eta must be positive".into()));
        }
        if self.iters == 0 {
            return Err(Error::Validation("iters must be at least 1".into()));
        }
        if let AlphaMode::TimeDecay { c } = self.alpha {
            if !(c > 0.0) {
                return Err(Error::Validation(
                    "time-decay exponent c must be positive".into(),
                ));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Validation("dropout_rate must be in [0, 1)".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Validation("lambda must be nonnegative".into()));
        }
        if let Fairness::Minimax { rounds, group_lr } = self.fairness {
            if rounds == 0 {
                return Err(Error::Validation(
                    "minimax rounds must be at least 1".into(),
                ));
            }
            if !(group_lr > 0.0) {
                return Err(Error::Validation(
                    "minimax group_lr must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Everything a training run reads: dataset, expert predictions, the rows to
/// train on, and the consultation costs.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub dataset: &'a Dataset,
    pub experts: &'a ExpertPredictionMatrix,
    pub indices: &'a [usize],
    pub costs: &'a ExpertCostVector,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub loss_trace: Vec<f64>,
    /// Per-iteration group losses on the evaluated batch; `None` where a
    /// group had no samples in that batch.
    pub group_loss_trace: Vec<Vec<Option<f64>>>,
    pub classifier: ClassifierModel,
    pub deferrer: DeferrerModel,
    pub iterations: usize,
    pub wall_clock: Duration,
}

/// Resolve the alpha pair for iteration `t >= 1`. Indicator mode needs the
/// per-sample correctness bit and errors without it.
pub fn alpha_schedule(
    mode: &AlphaMode,
    t: usize,
    classifier_correct: Option<bool>,
) -> Result<(f64, f64)> {
    match *mode {
        AlphaMode::Constant { alpha1, alpha2 } => Ok((alpha1, alpha2)),
        AlphaMode::TimeDecay { c } => {
            let alpha2 = 1.0 - (t as f64).powf(-c);
            Ok((1.0, alpha2))
        }
        AlphaMode::Indicator => match classifier_correct {
            Some(correct) => Ok((1.0, if correct { 0.0 } else { 1.0 })),
            None => Err(Error::Validation(
                "indicator alpha mode needs the classifier correctness bit".into(),
            )),
        },
    }
}

fn alpha_policy_at(mode: &AlphaMode, t: usize) -> AlphaPolicy {
    match *mode {
        AlphaMode::Constant { alpha1, alpha2 } => AlphaPolicy::Const(alpha1, alpha2),
        AlphaMode::TimeDecay { c } => AlphaPolicy::Const(1.0, 1.0 - (t as f64).powf(-c)),
        AlphaMode::Indicator => AlphaPolicy::Indicator,
    }
}

/// Group sample counts over the given rows; errors if any group is empty.
fn group_counts(data: &Dataset, indices: &[usize]) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; data.num_groups()];
    for &i in indices {
        counts[data.group(i)] += 1;
    }
    if let Some(z) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Validation(format!(
            "group {z} has no samples in the training split"
        )));
    }
    Ok(counts)
}

/// Per-row weights realizing the group-weighted objective
/// `sum_z mu_z * L^z` as a weighted mean over the batch.
fn group_sample_weights(
    data: &Dataset,
    indices: &[usize],
    mu: &[f64],
    counts: &[usize],
) -> Vec<f64> {
    let n = indices.len() as f64;
    let mut weights = vec![0.0; data.n_samples()];
    for &i in indices {
        let z = data.group(i);
        weights[i] = mu[z] * n / counts[z] as f64;
    }
    weights
}

struct Loop<'a> {
    data: TrainData<'a>,
    cfg: &'a TrainConfig,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    t: usize,
}

impl<'a> Loop<'a> {
    fn new(data: TrainData<'a>, cfg: &'a TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0x7261696e); // training stream
        Loop {
            data,
            cfg,
            rng,
            order: data.indices.to_vec(),
            cursor: 0,
            t: 0,
        }
    }

    /// Next batch of dataset rows; reshuffles at each epoch boundary.
    fn next_batch(&mut self) -> Vec<usize> {
        match self.cfg.batch_size {
            None => self.data.indices.to_vec(),
            Some(size) => {
                let size = size.min(self.order.len()).max(1);
                if self.cursor + size > self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                let batch = self.order[self.cursor..self.cursor + size].to_vec();
                self.cursor += size;
                batch
            }
        }
    }

    fn dropout_mask(&mut self, batch_len: usize) -> Option<Vec<bool>> {
        if self.cfg.dropout_rate == 0.0 {
            return None;
        }
        let num_experts = self.data.experts.num_experts();
        let mut kept = Vec::with_capacity(batch_len * num_experts);
        for _ in 0..batch_len {
            for _ in 0..num_experts {
                kept.push(self.rng.random::<f64>() >= self.cfg.dropout_rate);
            }
        }
        Some(kept)
    }

    /// One gradient step; returns (loss, per-group batch losses).
    fn step(
        &mut self,
        classifier: &mut ClassifierModel,
        deferrer: &mut DeferrerModel,
        sample_weight: Option<&[f64]>,
    ) -> Result<(f64, Vec<Option<f64>>)> {
        self.t += 1;
        let batch = self.next_batch();
        let kept = self.dropout_mask(batch.len());
        let eval = losses::eval_batch(
            classifier,
            deferrer,
            &BatchParams {
                data: self.data.dataset,
                experts: self.data.experts,
                indices: &batch,
                kept: kept.as_deref(),
                sample_weight,
                alpha: alpha_policy_at(&self.cfg.alpha, self.t),
                lambda: self.cfg.lambda,
                costs: self.data.costs.costs(),
            },
            true,
        )?;
        if !eval.loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: self.t });
        }
        let grad_f = eval.grad_classifier.expect("gradients requested");
        let grad_d = eval.grad_deferrer.expect("gradients requested");
        for (p, g) in classifier.params.iter_mut().zip(&grad_f) {
            *p -= self.cfg.eta * g;
        }
        for (p, g) in deferrer.params.iter_mut().zip(&grad_d) {
            *p -= self.cfg.eta * g;
        }
        if deferrer.kind == DeferrerKind::GlobalWeights {
            project_box_in_place(&mut deferrer.params);
            debug_assert!(deferrer.params.iter().all(|&w| (0.0..=1.0).contains(&w)));
        }
        Ok((eval.loss, eval.group_loss))
    }
}

fn check_models(
    data: &TrainData<'_>,
    classifier: &ClassifierModel,
    deferrer: &DeferrerModel,
) -> Result<()> {
    if classifier.input_dim != data.dataset.feature_dim() {
        return Err(Error::DimensionMismatch {
            expected: data.dataset.feature_dim(),
            actual: classifier.input_dim,
        });
    }
    if classifier.num_classes != data.dataset.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: data.dataset.num_classes(),
            actual: classifier.num_classes,
        });
    }
    if deferrer.num_experts_total != data.experts.num_experts() + 1 {
        return Err(Error::DimensionMismatch {
            expected: data.experts.num_experts() + 1,
            actual: deferrer.num_experts_total,
        });
    }
    if data.costs.len() != data.experts.num_experts() {
        return Err(Error::DimensionMismatch {
            expected: data.experts.num_experts(),
            actual: data.costs.len(),
        });
    }
    data.experts.validate_labels(data.dataset.num_classes())
}

/// Train classifier and deferrer together under the combined loss.
pub fn train_joint(
    data: TrainData<'_>,
    mut classifier: ClassifierModel,
    mut deferrer: DeferrerModel,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_models(&data, &classifier, &deferrer)?;
    let start = Instant::now();
    let mut lp = Loop::new(data, cfg);
    let mut loss_trace = Vec::with_capacity(cfg.iters);
    let mut group_loss_trace = Vec::with_capacity(cfg.iters);
    for _ in 0..cfg.iters {
        let (loss, groups) = lp.step(&mut classifier, &mut deferrer, None)?;
        loss_trace.push(loss);
        group_loss_trace.push(groups);
    }
    Ok(TrainReport {
        loss_trace,
        group_loss_trace,
        classifier,
        deferrer,
        iterations: cfg.iters,
        wall_clock: start.elapsed(),
    })
}

/// Balanced variant: every group contributes equally to the objective,
/// realized as per-sample weights proportional to `1 / P(Z = z)`.
pub fn train_balanced(
    data: TrainData<'_>,
    mut classifier: ClassifierModel,
    mut deferrer: DeferrerModel,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_models(&data, &classifier, &deferrer)?;
    let counts = group_counts(data.dataset, data.indices)?;
    let mu = vec![1.0 / counts.len() as f64; counts.len()];
    let weights = group_sample_weights(data.dataset, data.indices, &mu, &counts);
    let start = Instant::now();
    let mut lp = Loop::new(data, cfg);
    let mut loss_trace = Vec::with_capacity(cfg.iters);
    let mut group_loss_trace = Vec::with_capacity(cfg.iters);
    for _ in 0..cfg.iters {
        let (loss, groups) = lp.step(&mut classifier, &mut deferrer, Some(&weights))?;
        loss_trace.push(loss);
        group_loss_trace.push(groups);
    }
    Ok(TrainReport {
        loss_trace,
        group_loss_trace,
        classifier,
        deferrer,
        iterations: cfg.iters,
        wall_clock: start.elapsed(),
    })
}

/// Minimax-fair variant: minimize the worst group loss via a two-player loop.
///
/// A simplex weight vector over groups starts uniform; each round runs
/// `iters / rounds` weighted gradient steps, then multiplies group `z`'s
/// weight by `exp(group_lr * L^z)` and renormalizes. The iterate with the
/// smallest recorded `max_z L^z` is returned.
pub fn train_minimax(
    data: TrainData<'_>,
    mut classifier: ClassifierModel,
    mut deferrer: DeferrerModel,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_models(&data, &classifier, &deferrer)?;
    let (rounds, group_lr) = match cfg.fairness {
        Fairness::Minimax { rounds, group_lr } => (rounds, group_lr),
        _ => (20, 1.0),
    };
    let counts = group_counts(data.dataset, data.indices)?;
    let num_groups = counts.len();
    let steps_per_round = (cfg.iters / rounds).max(1);

    let start = Instant::now();
    let mut mu = vec![1.0 / num_groups as f64; num_groups];
    let mut lp = Loop::new(data, cfg);
    let mut loss_trace = Vec::new();
    let mut group_loss_trace = Vec::new();
    let mut best: Option<(f64, ClassifierModel, DeferrerModel)> = None;

    for _ in 0..rounds {
        let weights = group_sample_weights(data.dataset, data.indices, &mu, &counts);
        for _ in 0..steps_per_round {
            let (loss, groups) = lp.step(&mut classifier, &mut deferrer, Some(&weights))?;
            loss_trace.push(loss);
            group_loss_trace.push(groups);
        }
        let alpha = match alpha_policy_at(&cfg.alpha, lp.t) {
            AlphaPolicy::Const(a1, a2) => (a1, a2),
            AlphaPolicy::Indicator => (1.0, 1.0),
        };
        let loss_cfg = LossConfig::new(alpha.0, alpha.1, 0.0, 0.0, data.costs.clone())?;
        let per_group = losses::group_losses(
            &classifier,
            &deferrer,
            data.dataset,
            data.experts,
            data.indices,
            &loss_cfg,
        )?;
        let group_vals: Vec<f64> = per_group
            .iter()
            .map(|g| g.expect("nonempty group"))
            .collect();
        let worst = group_vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if best.as_ref().map_or(true, |(b, _, _)| worst < *b) {
            best = Some((worst, classifier.clone(), deferrer.clone()));
        }
        for (m, &lz) in mu.iter_mut().zip(&group_vals) {
            *m *= (group_lr * lz).exp();
        }
        let total: f64 = mu.iter().sum();
        for m in mu.iter_mut() {
            *m /= total;
        }
    }

    let (_, best_classifier, best_deferrer) = best.expect("at least one round");
    let iterations = loss_trace.len();
    Ok(TrainReport {
        loss_trace,
        group_loss_trace,
        classifier: best_classifier,
        deferrer: best_deferrer,
        iterations,
        wall_clock: start.elapsed(),
    })
}

/// Plain full-batch log-loss fit of a classifier, optionally against
/// override labels (used by baselines to model expert correctness).
pub fn fit_classifier(
    classifier: &mut ClassifierModel,
    data: &Dataset,
    indices: &[usize],
    labels: Option<&[usize]>,
    eta: f64,
    iters: usize,
) -> Result<Vec<f64>> {
    if indices.is_empty() {
        return Err(Error::Validation("cannot fit on an empty index set".into()));
    }
    if let Some(labels) = labels {
        if labels.len() != data.n_samples() {
            return Err(Error::DimensionMismatch {
                expected: data.n_samples(),
                actual: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classifier.num_classes) {
            return Err(Error::Validation(format!(
                "override label {bad} out of range"
            )));
        }
    }
    let n = indices.len() as f64;
    let mut trace = Vec::with_capacity(iters);
    for t in 1..=iters {
        let items: Vec<usize> = indices.to_vec();
        let (loss, grad) = crate::exec::fold_chunks(
            &items,
            || (0.0f64, vec![0.0; classifier.param_count()]),
            |acc, &row| {
                let x = data.features(row);
                let y = labels.map_or(data.label(row), |l| l[row]);
                acc.0 += classifier.nll(x, y);
                classifier.accumulate_grads(x, y, 1.0, None, &mut acc.1);
            },
            |acc, part| {
                acc.0 += part.0;
                for (a, b) in acc.1.iter_mut().zip(part.1) {
                    *a += b;
                }
            },
        );
        let loss = loss / n;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: t });
        }
        for (p, g) in classifier.params.iter_mut().zip(&grad) {
            *p -= eta * g / n;
        }
        trace.push(loss);
    }
    Ok(trace)
}

/// Largest eigenvalue of the (bias-augmented) feature second-moment matrix,
/// the smoothness constant of the logistic log-loss on this data. Power
/// iteration with a fixed start vector; diagnostic only.
pub fn estimate_lipschitz(data: &Dataset, indices: &[usize]) -> f64 {
    let d = data.feature_dim() + 1;
    let n = indices.len().max(1) as f64;
    let mut cov = vec![0.0; d * d];
    for &i in indices {
        let x = data.features(i);
        for a in 0..d {
            let xa = if a < x.len() { x[a] } else { 1.0 };
            for b in 0..d {
                let xb = if b < x.len() { x[b] } else { 1.0 };
                cov[a * d + b] += xa * xb / n;
            }
        }
    }
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut eig = 0.0;
    for _ in 0..200 {
        let mut w = vec![0.0; d];
        for a in 0..d {
            for b in 0..d {
                w[a] += cov[a * d + b] * v[b];
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        eig = norm;
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
    }
    eig
}

/// Step size `1 / (2 (l + m))` from a smoothness hint, matching the descent
/// regime of the combined loss.
pub fn suggested_eta(lipschitz_hint: f64, num_experts_total: usize) -> f64 {
    1.0 / (2.0 * (lipschitz_hint + num_experts_total as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ClassifierKind, DeferrerKind};
    use crate::synthetic;

    fn convex_world(seed: u64) -> (Dataset, ExpertPredictionMatrix) {
        let data = synthetic::gen_grouped_feature_dataset(120, 2, 0.4, 2.0, seed).unwrap();
        let specs = synthetic::gen_biased_experts(4, seed + 1).unwrap();
        let experts =
            synthetic::simulate_expert_predictions(&specs, &data, None, seed + 2).unwrap();
        (data, experts)
    }

    fn base_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            eta: 0.1,
            iters: 60,
            batch_size: None,
            alpha: AlphaMode::Constant {
                alpha1: 1.0,
                alpha2: 1.0,
            },
            fairness: Fairness::None,
            dropout_rate: 0.0,
            lambda: 0.0,
            seed,
            lipschitz_hint: None,
        }
    }

    #[test]
    fn alpha_schedule_values() {
        let td = AlphaMode::TimeDecay { c: 0.5 };
        assert_eq!(alpha_schedule(&td, 1, None).unwrap(), (1.0, 0.0));
        assert_eq!(alpha_schedule(&td, 4, None).unwrap(), (1.0, 0.5));
        let ind = AlphaMode::Indicator;
        assert_eq!(alpha_schedule(&ind, 3, Some(true)).unwrap(), (1.0, 0.0));
        assert_eq!(alpha_schedule(&ind, 3, Some(false)).unwrap(), (1.0, 1.0));
        assert!(alpha_schedule(&ind, 3, None).is_err());
    }

    #[test]
    fn classifier_only_full_batch_descends() {
        // No human experts: the joint loop reduces to plain logistic training
        // with a non-increasing full-batch loss trace.
        let data = synthetic::gen_grouped_feature_dataset(100, 2, 0.5, 2.0, 3).unwrap();
        let experts = ExpertPredictionMatrix::empty(100, 0);
        let indices: Vec<usize> = (0..100).collect();
        let costs = ExpertCostVector::new(vec![]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let clf = ClassifierModel::new(ClassifierKind::LinearLogistic, 2, 0, 2, &mut rng).unwrap();
        let def = DeferrerModel::new(DeferrerKind::GlobalWeights, 2, 0, 1, &mut rng).unwrap();
        let mut cfg = base_cfg(5);
        cfg.alpha = AlphaMode::Constant {
            alpha1: 1.0,
            alpha2: 0.0,
        };
        cfg.eta = 0.2;
        let report = train_joint(
            TrainData {
                dataset: &data,
                experts: &experts,
                indices: &indices,
                costs: &costs,
            },
            clf,
            def,
            &cfg,
        )
        .unwrap();
        for w in report.loss_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn indicator_alpha_trains_to_completion() {
        let (data, experts) = convex_world(80);
        let indices: Vec<usize> = (0..data.n_samples()).collect();
        let costs = ExpertCostVector::uniform(experts.num_experts(), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let clf = ClassifierModel::new(ClassifierKind::LinearLogistic, 2, 0, 2, &mut rng).unwrap();
        let def = DeferrerModel::new(
            DeferrerKind::GlobalWeights,
            2,
            0,
            experts.num_experts() + 1,
            &mut rng,
        )
        .unwrap();
        let mut cfg = base_cfg(82);
        cfg.alpha = AlphaMode::Indicator;
        cfg.batch_size = Some(40);
        let td = TrainData {
            dataset: &data,
            experts: &experts,
            indices: &indices,
            costs: &costs,
        };
        let report = train_joint(td, clf, def, &cfg).unwrap();
        assert_eq!(report.loss_trace.len(), cfg.iters);
        assert!(report.loss_trace.iter().all(|l| l.is_finite()));
        // The deferral term only fires on misclassified samples, so the late
        // losses sit well below the all-on equivalent would.
        assert!(report.loss_trace.last().unwrap() < &report.loss_trace[0]);
    }

    #[test]
    fn oversized_minibatch_clamps_to_split() {
        let (data, experts) = convex_world(90);
        let indices: Vec<usize> = (0..data.n_samples()).collect();
        let costs = ExpertCostVector::uniform(experts.num_experts(), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let clf = ClassifierModel::new(ClassifierKind::LinearLogistic, 2, 0, 2, &mut rng).unwrap();
        let def = DeferrerModel::new(
            DeferrerKind::GlobalWeights,
            2,
            0,
            experts.num_experts() + 1,
            &mut rng,
        )
        .unwrap();
        let mut cfg = base_cfg(92);
        cfg.iters = 5;
        cfg.batch_size = Some(10_000);
        let td = TrainData {
            dataset: &data,
            experts: &experts,
            indices: &indices,
            costs: &costs,
        };
        let report = train_joint(td, clf, def, &cfg).unwrap();
        assert_eq!(report.iterations, 5);
    }

    #[test]
    fn traces_are_bitwise_deterministic() {
        let (data, experts) = convex_world(7);
        let indices: Vec<usize> = (0..data.n_samples()).collect();
        let costs = ExpertCostVector::uniform(experts.num_experts(), 1.0).unwrap();
        let mut cfg = base_cfg(11);
        cfg.batch_size = Some(32);
        cfg.dropout_rate = 0.1;
        cfg.lambda = 0.02;
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let clf =
                ClassifierModel::new(ClassifierKind::LinearLogistic, 2, 0, 2, &mut rng).unwrap();
            let def = DeferrerModel::new(
                DeferrerKind::InputConditioned,
                2,
                8,
                experts.num_experts() + 1,
                &mut rng,
            )
            .unwrap();
            train_joint(
                TrainData {
                    dataset: &data,
                    experts: &experts,
                    indices: &indices,
                    costs: &costs,
                },
                clf,
                def,
                &cfg,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        let bits = |t: &[f64]| t.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.loss_trace), bits(&b.loss_trace));
        assert_eq!(a.classifier.params, b.classifier.params);
        assert_eq!(a.deferrer.params, b.deferrer.params);
    }

    #[test]
    fn global_weights_stay_in_box_every_step() {
        let (data, experts) = convex_world(9);
        let indices: Vec<usize> = (0..data.n_samples()).collect();
        let costs = ExpertCostVector::uniform(experts.num_experts(), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let clf = ClassifierModel::new(ClassifierKind::LinearLogistic, 2, 0, 2, &mut rng).unwrap();
        let def = DeferrerModel::new(
            DeferrerKind::GlobalWeights,
            2,
            0,
            experts.num_experts() + 1,
            &mut rng,
        )
        .unwrap();
        let mut cfg = base_cfg(12);
        cfg.eta = 1.5; // aggressive steps so the projection actually binds
        let report = train_joint(
            TrainData {
                dataset: &data,
                experts: &experts,
                indices: &indices,
                costs: &costs,
            },
            clf,
            def,
            &cfg,
        )
        .unwrap();
        assert!(report
            .deferrer
            .params
            .iter()
            .all(|&w| (0.0..=1.0).contains(&w)));
    }

    #[test]
    fn balanced_weights_are_inverse_frequency() {
        // 90/10 imbalance: minority rows carry 9x the weight of majority rows.
        let n = 100;
        let groups: Vec<usize> = (0..n).map(|i| usize::from(i < 10)).collect();
        let data = Dataset::new(
            (0..n * 2).map(|i| i as f64 * 0.01).collect(),
            2,
            vec![0; n],
            groups,
            2,
            2,
        )
        .unwrap();
        let indices: Vec<usize> = (0..n).collect();
        let counts = group_counts(&data, &indices).unwrap();
        let mu = vec![0.5, 0.5];
        let w = group_sample_weights(&data, &indices, &mu, &counts);
        let ratio = w[0] / w[99];
        assert!((ratio - 9.0).abs() < 1e-12);
    }

    #[test]
    fn balanced_equals_joint_on_equal_groups() {
        // Alternating groups of equal size: the reweighting is uniform and the
        // trajectory matches plain joint training exactly.
        let data = synthetic::gen_grouped_feature_dataset(80, 2, 0.5, 2.0, 20).unwrap();
        let mut groups_balanced: Vec<usize> = Vec::new();
        for i in 0..80 {
            groups_balanced.push(i % 2);
        }
        let data = Dataset::new(
            (0..80).flat_map(|i| data.features(i).to_vec()).collect(),
            2,
            data.labels().to_vec(),
            groups_balanced,
            2,
            2,
        )
        .unwrap();
        let specs = synthetic::gen_biased_experts(3, 21).unwrap();
        let experts = synthetic::simulate_expert_predictions(&specs, &data, None, 22).unwrap();
        let indices: Vec<usize> = (0..80).collect();
        let costs = ExpertCostVector::uniform(experts.num_experts(), 1.0).unwrap();
        let cfg = base_cfg(23);
        let make_models = || {
            let mut rng = ChaCha8Rng::seed_from_u64(24);
            (
                ClassifierModel::new(ClassifierKind::LinearLogistic, 2, 0, 2, &mut rng).unwrap(),
                DeferrerModel::new(
                    DeferrerKind::GlobalWeights,
                    2,
                    0,
                    experts.num_experts() + 1,
                    &mut rng,
                )
                .unwrap(),
            )
        };
        let td = TrainData {
            dataset: &data,
            experts: &experts,
            indices: &indices,
            costs: &costs,
        };
        let (c1, d1) = make_models();
        let joint = train_joint(td, c1, d1, &cfg).unwrap();
        let (c2, d2) = make_models();
        let balanced = train_balanced(td, c2, d2, &cfg).unwrap();
        for (a, b) in joint.loss_trace.iter().zip(&balanced.loss_trace) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn balanced_objective_decomposes_into_group_losses() {
        let (data, experts) = convex_world(30);
        let indices: Vec<usize> = (0..data.n_samples()).collect();
        let costs = ExpertCostVector::uniform(experts.num_experts(), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let clf = ClassifierModel::new(ClassifierKind::LinearLogistic, 2, 0, 2, &mut rng).unwrap();
        let def = DeferrerModel::new(
            DeferrerKind::GlobalWeights,
            2,
            0,
            experts.num_experts() + 1,
            &mut rng,
        )
        .unwrap();
        let counts = group_counts(&data, &indices).unwrap();
        let g = counts.len();
        let mu = vec![1.0 / g as f64; g];
        let weights = group_sample_weights(&data, &indices, &mu, &counts);
        let eval = losses::eval_batch(
            &clf,
            &def,
            &BatchParams {
                data: &data,
                experts: &experts,
                indices: &indices,
                kept: None,
                sample_weight: Some(&weights),
                alpha: AlphaPolicy::Const(1.0, 1.0),
                lambda: 0.0,
                costs: costs.costs(),
            },
            false,
        )
        .unwrap();
        let cfg = LossConfig::new(1.0, 1.0, 0.0, 0.0, costs.clone()).unwrap();
        let per_group = losses::group_losses(&clf, &def, &data, &experts, &indices, &cfg).unwrap();
        let sum: f64 = per_group.iter().map(|x| x.unwrap()).sum();
        // Weighted loss equals sum_z L^z up to the global 1/G factor.
        assert!((eval.loss * g as f64 - sum).abs() < 1e-9);
    }

    #[test]
    fn minimax_single_group_matches_joint() {
        let data = synthetic::gen_grouped_feature_dataset(60, 2, 0.5, 2.0, 40).unwrap();
        let data = Dataset::new(
            (0..60).flat_map(|i| data.features(i).to_vec()).collect(),
            2,
            data.labels().to_vec(),
            vec![0; 60],
            2,
            1,
        )
        .unwrap();
        let specs = synthetic::gen_biased_experts(3, 41).unwrap();
        let experts = synthetic::simulate_expert_predictions(&specs, &data, None, 42).unwrap();
        let indices: Vec<usize> = (0..60).collect();
        let costs = ExpertCostVector::uniform(experts.num_experts(), 1.0).unwrap();
        let mut cfg = base_cfg(43);
        cfg.iters = 40;
        cfg.fairness = Fairness::Minimax {
            rounds: 4,
            group_lr: 1.0,
        };
        let make_models = || {
            let mut rng = ChaCha8Rng::seed_from_u64(44);
            (
                ClassifierModel::new(ClassifierKind::LinearLogistic, 2, 0, 2, &mut rng).unwrap(),
                DeferrerModel::new(
                    DeferrerKind::GlobalWeights,
                    2,
                    0,
                    experts.num_experts() + 1,
                    &mut rng,
                )
                .unwrap(),
            )
        };
        let td = TrainData {
            dataset: &data,
            experts: &experts,
            indices: &indices,
            costs: &costs,
        };
        let (c1, d1) = make_models();
        let minimax = train_minimax(td, c1, d1, &cfg).unwrap();
        let mut joint_cfg = cfg.clone();
        joint_cfg.fairness = Fairness::None;
        let (c2, d2) = make_models();
        let joint = train_joint(td, c2, d2, &joint_cfg).unwrap();
        assert_eq!(minimax.loss_trace.len(), joint.loss_trace.len());
        for (a, b) in minimax.loss_trace.iter().zip(&joint.loss_trace) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(minimax.classifier.params, joint.classifier.params);
    }

    #[test]
    fn minimax_symmetric_groups_keep_balanced_mu() {
        // Groups drawn from the same distribution: after training, neither
        // group's loss should dominate by a wide margin.
        let (data, experts) = convex_world(50);
        let indices: Vec<usize> = (0..data.n_samples()).collect();
        let costs = ExpertCostVector::uniform(experts.num_experts(), 1.0).unwrap();
        let mut cfg = base_cfg(51);
        cfg.iters = 100;
        cfg.fairness = Fairness::Minimax {
            rounds: 5,
            group_lr: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let clf = ClassifierModel::new(ClassifierKind::LinearLogistic, 2, 0, 2, &mut rng).unwrap();
        let def = DeferrerModel::new(
            DeferrerKind::GlobalWeights,
            2,
            0,
            experts.num_experts() + 1,
            &mut rng,
        )
        .unwrap();
        let td = TrainData {
            dataset: &data,
            experts: &experts,
            indices: &indices,
            costs: &costs,
        };
        let report = train_minimax(td, clf, def, &cfg).unwrap();
        assert_eq!(report.iterations, report.loss_trace.len());
        assert!(report.loss_trace.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn nonfinite_loss_aborts_with_diagnostic() {
        // An extreme feature value drives the logits past f64 range within a
        // couple of updates; the loop must stop with a diagnostic instead of
        // carrying NaNs forward.
        let data = Dataset::new(
            vec![1e155, -1e155, 2.0, -1.0],
            2,
            vec![1, 0],
            vec![0, 0],
            2,
            1,
        )
        .unwrap();
        let mut experts = ExpertPredictionMatrix::empty(2, 1);
        experts.set(0, 0, 1);
        experts.set(1, 0, 0);
        let costs = ExpertCostVector::uniform(1, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let clf = ClassifierModel::new(ClassifierKind::LinearLogistic, 2, 0, 2, &mut rng).unwrap();
        let def = DeferrerModel::new(DeferrerKind::GlobalWeights, 2, 0, 2, &mut rng).unwrap();
        let mut cfg = base_cfg(62);
        cfg.eta = 1.0;
        let indices = vec![0, 1];
        let td = TrainData {
            dataset: &data,
            experts: &experts,
            indices: &indices,
            costs: &costs,
        };
        match train_joint(td, clf, def, &cfg) {
            Err(Error::NonFiniteLoss { iteration }) => assert!(iteration >= 1),
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn descent_with_suggested_step_size() {
        let (data, experts) = convex_world(70);
        let indices: Vec<usize> = (0..data.n_samples()).collect();
        let costs = ExpertCostVector::uniform(experts.num_experts(), 1.0).unwrap();
        let ell = estimate_lipschitz(&data, &indices);
        assert!(ell > 0.0);
        let m = experts.num_experts() + 1;
        let mut cfg = base_cfg(71);
        cfg.eta = suggested_eta(ell, m);
        cfg.iters = 80;
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let clf = ClassifierModel::new(ClassifierKind::LinearLogistic, 2, 0, 2, &mut rng).unwrap();
        let def = DeferrerModel::new(DeferrerKind::GlobalWeights, 2, 0, m, &mut rng).unwrap();
        let td = TrainData {
            dataset: &data,
            experts: &experts,
            indices: &indices,
            costs: &costs,
        };
        let report = train_joint(td, clf, def, &cfg).unwrap();
        for w in report.loss_trace.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-10,
                "non-monotone descent: {} -> {}",
                w[0],
                w[1]
            );
        }
    }
}
