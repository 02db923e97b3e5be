/*!
Joint learning of a classifier and a deferrer for prediction pipelines with
multiple human experts.

The pipeline consists of a classifier `F` mapping features to a label
distribution and a deferrer `D` mapping features to a weight in `[0, 1]` per
expert. The last "expert" is always the classifier itself (the *identity
expert*), so the system can answer without consulting any human. Expert votes
are aggregated with the deferrer weights into a final prediction; training
minimizes a combined log-loss over both components so that the deferrer learns
*which* expert to trust for *which* input while the classifier learns the
region nobody covers better.

On top of the plain joint objective the crate provides:

- **balanced** training (group-conditional losses summed equally) and
  **minimax-fair** training (minimize the worst group loss via multiplicative
  group-weight updates),
- **sparse committees**: sample `k` experts proportionally to their deferrer
  weight instead of querying everyone, with a dispersion diagnostic bounding
  the induced loss gap,
- expert **dropout** and a consultation **cost regularizer** for load/cost
  control,
- synthetic data + expert generators, partial-observation masking for
  crowdsourced regimes, and crowdsourcing-style worker-selection baselines,
- a config-driven experiment harness with seeded, reproducible sweeps.

Batch evaluation, Monte-Carlo diagnostics, and sweep cells run data-parallel
when the default `parallel` feature is enabled; reduction order is fixed so
results are bit-identical with and without it.
*/

pub mod baselines;
pub mod data;
mod error;
mod exec;
pub mod experiment;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod models;
mod numeric;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
