//! Seeded generators for synthetic datasets and synthetic experts.
//!
//! Experts here are simulations with access to side information (cluster
//! identity, group membership) that is deliberately NOT representable in a
//! [`Dataset`]: the framework only ever sees features, labels, and groups.
//! Generator metadata carrying that side information is written to a sidecar
//! file so tests can check expert behavior against its specification.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ExpertPredictionMatrix};
use crate::error::{Error, Result};

/// An expert competent on exactly one cluster: correct label there, a
/// uniformly random label anywhere else.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterExpertSpec {
    pub competent_cluster: usize,
}

/// An expert with group-dependent accuracy: correct with probability `p` on
/// its favored group and `q <= p` on the other. A wrong binary answer is the
/// flipped label; with more classes it is uniform over the wrong labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasedExpertSpec {
    pub favored_group: usize,
    pub p: f64,
    pub q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SyntheticExpert {
    Cluster(ClusterExpertSpec),
    Biased(BiasedExpertSpec),
}

/// Generator provenance for a synthetic dataset: cluster assignments (when
/// the generator has clusters) and the expert specifications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMeta {
    pub generator: String,
    pub seed: u64,
    pub clusters: Option<Vec<usize>>,
    pub experts: Vec<SyntheticExpert>,
}

impl SyntheticMeta {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(text.as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))
    }
}

pub const CLUSTER_ORANGE: usize = 0;
pub const CLUSTER_BLUE: usize = 1;
pub const CLUSTER_GREEN: usize = 2;

/// The three-cluster planar benchmark: 1000 two-feature samples.
///
/// A shared mean is drawn uniformly from the unit square and a shared
/// diagonal covariance from the unit interval. The orange cluster splits into
/// two separable sub-clusters at offsets 0 and 3 with deterministic labels 1
/// and 0; the blue (offset 6) and green (offset 9) clusters carry fair-coin
/// labels that only the matching expert can resolve. Expert 0 is competent on
/// blue, expert 1 on green; cluster identity lives in the returned metadata,
/// never in the dataset.
pub fn gen_three_cluster_dataset(seed: u64) -> (Dataset, SyntheticMeta) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu = [rng.random::<f64>(), rng.random::<f64>()];
    let std = [rng.random::<f64>().sqrt(), rng.random::<f64>().sqrt()];

    // 334 orange (167 per sub-cluster), 333 blue, 333 green.
    let mut features = Vec::with_capacity(2000);
    let mut labels = Vec::with_capacity(1000);
    let mut clusters = Vec::with_capacity(1000);
    let push = |rng: &mut ChaCha8Rng,
                features: &mut Vec<f64>,
                offset: f64,
                label: usize,
                cluster: usize,
                labels: &mut Vec<usize>,
                clusters: &mut Vec<usize>| {
        for d in 0..2 {
            let n = Normal::new(mu[d] + offset, std[d]).expect("valid normal");
            features.push(n.sample(rng));
        }
        labels.push(label);
        clusters.push(cluster);
    };

    for _ in 0..167 {
        push(
            &mut rng,
            &mut features,
            0.0,
            1,
            CLUSTER_ORANGE,
            &mut labels,
            &mut clusters,
        );
    }
    for _ in 0..167 {
        push(
            &mut rng,
            &mut features,
            3.0,
            0,
            CLUSTER_ORANGE,
            &mut labels,
            &mut clusters,
        );
    }
    for _ in 0..333 {
        let label = usize::from(rng.random::<bool>());
        push(
            &mut rng,
            &mut features,
            6.0,
            label,
            CLUSTER_BLUE,
            &mut labels,
            &mut clusters,
        );
    }
    for _ in 0..333 {
        let label = usize::from(rng.random::<bool>());
        push(
            &mut rng,
            &mut features,
            9.0,
            label,
            CLUSTER_GREEN,
            &mut labels,
            &mut clusters,
        );
    }

    let dataset = Dataset::new(features, 2, labels, vec![0; 1000], 2, 1).expect("valid dataset");
    let meta = SyntheticMeta {
        generator: "three-cluster".into(),
        seed,
        clusters: Some(clusters),
        experts: vec![
            SyntheticExpert::Cluster(ClusterExpertSpec {
                competent_cluster: CLUSTER_BLUE,
            }),
            SyntheticExpert::Cluster(ClusterExpertSpec {
                competent_cluster: CLUSTER_GREEN,
            }),
        ],
    };
    (dataset, meta)
}

/// Group-dependent expert population for a pipeline with `m` experts in total
/// (the identity expert included), so `m - 1` specs come back.
///
/// `floor(3m/4)` specs favor group 0 (`p ~ U(0.6, 1)` there, `q ~ U(0.6, p)`
/// on group 1) and `ceil(m/4)` favor group 1 with the roles flipped. Those
/// tallies account for the identity expert's slot, so the last flipped spec
/// is generated and then dropped.
pub fn gen_biased_experts(m: usize, seed: u64) -> Result<Vec<SyntheticExpert>> {
    if m < 2 {
        return Err(Error::Validation(
            "need m >= 2 experts including the identity".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anti_protected = 3 * m / 4;
    let anti_non_protected = m - anti_protected; // = ceil(m/4)
    let mut specs = Vec::with_capacity(m);
    for _ in 0..anti_protected {
        let p = rng.random_range(0.6..1.0);
        let q = rng.random_range(0.6..p);
        specs.push(SyntheticExpert::Biased(BiasedExpertSpec {
            favored_group: 0,
            p,
            q,
        }));
    }
    for _ in 0..anti_non_protected {
        let p = rng.random_range(0.6..1.0);
        let q = rng.random_range(0.6..p);
        specs.push(SyntheticExpert::Biased(BiasedExpertSpec {
            favored_group: 1,
            p,
            q,
        }));
    }
    specs.pop();
    Ok(specs)
}

fn wrong_label(correct: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> usize {
    if num_classes == 2 {
        1 - correct
    } else {
        let offset = rng.random_range(1..num_classes);
        (correct + offset) % num_classes
    }
}

/// Simulate the experts' predictions on every sample (fully observed mask).
/// Cluster experts need the generator's cluster assignments.
pub fn simulate_expert_predictions(
    specs: &[SyntheticExpert],
    dataset: &Dataset,
    clusters: Option<&[usize]>,
    seed: u64,
) -> Result<ExpertPredictionMatrix> {
    if specs
        .iter()
        .any(|s| matches!(s, SyntheticExpert::Cluster(_)))
        && clusters.is_none()
    {
        return Err(Error::Validation(
            "cluster experts need the generator's cluster metadata".into(),
        ));
    }
    if let Some(clusters) = clusters {
        if clusters.len() != dataset.n_samples() {
            return Err(Error::DimensionMismatch {
                expected: dataset.n_samples(),
                actual: clusters.len(),
            });
        }
    }
    for spec in specs {
        if let SyntheticExpert::Biased(b) = spec {
            if b.favored_group >= dataset.num_groups() {
                return Err(Error::Validation(format!(
                    "expert favors group {} but the dataset has {} groups",
                    b.favored_group,
                    dataset.num_groups()
                )));
            }
            if !(0.0 < b.q && b.q <= b.p && b.p <= 1.0) {
                return Err(Error::Validation(
                    "biased expert needs 0 < q <= p <= 1".into(),
                ));
            }
        }
    }

    let n = dataset.n_samples();
    let num_classes = dataset.num_classes();
    let mut matrix = ExpertPredictionMatrix::empty(n, specs.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x65787065); // expert simulation stream
    for s in 0..n {
        let y = dataset.label(s);
        for (e, spec) in specs.iter().enumerate() {
            let prediction = match spec {
                SyntheticExpert::Cluster(c) => {
                    if clusters.expect("checked above")[s] == c.competent_cluster {
                        y
                    } else {
                        rng.random_range(0..num_classes)
                    }
                }
                SyntheticExpert::Biased(b) => {
                    let acc = if dataset.group(s) == b.favored_group {
                        b.p
                    } else {
                        b.q
                    };
                    if rng.random::<f64>() < acc {
                        y
                    } else {
                        wrong_label(y, num_classes, &mut rng)
                    }
                }
            };
            matrix.set(s, e, prediction);
        }
    }
    Ok(matrix)
}

/// Keep an exact `round(fraction * n)`-sized uniform subset of each expert's
/// predictions observed, independently per expert.
pub fn mask_predictions(
    matrix: &ExpertPredictionMatrix,
    per_expert_coverage: f64,
    seed: u64,
) -> Result<ExpertPredictionMatrix> {
    if !(per_expert_coverage > 0.0 && per_expert_coverage <= 1.0) {
        return Err(Error::Validation(format!(
            "coverage must be in (0, 1], got {per_expert_coverage}"
        )));
    }
    if per_expert_coverage == 1.0 {
        return Ok(matrix.clone());
    }
    let n = matrix.num_samples();
    let keep = (per_expert_coverage * n as f64).round() as usize;
    let mut out = matrix.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x6d61736b); // masking stream
    for e in 0..matrix.num_experts() {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for &s in &order[keep..] {
            out.clear(s, e);
        }
    }
    Ok(out)
}

/// Stand-in for an embedding-based corpus: two Gaussian class clouds at the
/// given separation (unit variance per coordinate), with the protected group
/// drawn independently of the features at the given rate. The group label is
/// therefore informative about expert behavior but not recoverable from the
/// features themselves.
pub fn gen_grouped_feature_dataset(
    n: usize,
    dim: usize,
    group_fraction: f64,
    class_sep: f64,
    seed: u64,
) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Validation("need at least 2 samples".into()));
    }
    if dim == 0 {
        return Err(Error::Validation("dim must be positive".into()));
    }
    if !(group_fraction > 0.0 && group_fraction < 1.0) {
        return Err(Error::Validation("group_fraction must be in (0, 1)".into()));
    }
    if !(class_sep >= 0.0) {
        return Err(Error::Validation("class_sep must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    // Class means sit at +-(class_sep / 2) along the unit diagonal.
    let shift = class_sep / (2.0 * (dim as f64).sqrt());
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    for _ in 0..n {
        let y = usize::from(rng.random::<bool>());
        let sign = if y == 1 { 1.0 } else { -1.0 };
        for _ in 0..dim {
            features.push(sign * shift + normal.sample(&mut rng));
        }
        labels.push(y);
        groups.push(usize::from(rng.random::<f64>() < group_fraction));
    }
    Dataset::new(features, dim, labels, groups, 2, 2)
}
