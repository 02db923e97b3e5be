//! Parametric classifier and deferrer with forward evaluation and analytic
//! parameter gradients.
//!
//! Two classifier kinds: a linear logistic model (single logit for binary,
//! one logit row per class otherwise) and a two-layer tanh network with a
//! softmax head. Two deferrer kinds: a free weight vector in `[0,1]^m` kept
//! feasible by box projection, and a two-layer network whose `m` outputs are
//! squashed through the logistic so the range constraint never binds on the
//! parameters.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{argmax, logistic, logsumexp};

/// Flat gradient vector aligned with the owning model's parameters.
pub type ParamGradient = Vec<f64>;

const INIT_RANGE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierKind {
    LinearLogistic,
    TwoLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub kind: ClassifierKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub params: Vec<f64>,
    norm: InputNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeferrerKind {
    GlobalWeights,
    InputConditioned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeferrerModel {
    pub kind: DeferrerKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_experts_total: usize,
    pub params: Vec<f64>,
    norm: InputNorm,
}

/// Affine input standardization baked into a model, so checkpoints carry it
/// and gradient steps see well-conditioned coordinates. Identity by default.
#[derive(Debug, Clone, PartialEq)]
struct InputNorm {
    shift: Vec<f64>,
    scale: Vec<f64>,
}

impl InputNorm {
    fn identity(dim: usize) -> Self {
        InputNorm {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.shift)
            .zip(&self.scale)
            .map(|((&xi, &sh), &sc)| (xi - sh) / sc)
            .collect()
    }
}

/// Per-dimension mean and standard deviation of the listed rows (std floored
/// at 1e-9 so constant features stay harmless).
pub fn feature_standardization(
    data: &crate::data::Dataset,
    indices: &[usize],
) -> (Vec<f64>, Vec<f64>) {
    let d = data.feature_dim();
    let n = indices.len().max(1) as f64;
    let mut mean = vec![0.0; d];
    for &i in indices {
        for (m, &xi) in mean.iter_mut().zip(data.features(i)) {
            *m += xi / n;
        }
    }
    let mut var = vec![0.0; d];
    for &i in indices {
        for ((v, &xi), &m) in var.iter_mut().zip(data.features(i)).zip(&mean) {
            *v += (xi - m) * (xi - m) / n;
        }
    }
    let std = var.into_iter().map(|v| v.sqrt().max(1e-9)).collect();
    (mean, std)
}

/// Euclidean projection onto the unit box: coordinatewise clamp to `[0, 1]`.
pub fn project_box(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.clamp(0.0, 1.0)).collect()
}

pub(crate) fn project_box_in_place(v: &mut [f64]) {
    for x in v.iter_mut() {
        *x = x.clamp(0.0, 1.0);
    }
}

fn init_params(count: usize, range: f64, rng: &mut impl Rng) -> Vec<f64> {
    (0..count)
        .map(|_| rng.random_range(-range..range))
        .collect()
}

// Flat two-layer layout: W1 (h x d), b1 (h), W2 (c x h), b2 (c).
fn two_layer_count(d: usize, h: usize, c: usize) -> usize {
    h * d + h + c * h + c
}

fn two_layer_forward(
    params: &[f64],
    d: usize,
    h: usize,
    c: usize,
    x: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (w1, rest) = params.split_at(h * d);
    let (b1, rest) = rest.split_at(h);
    let (w2, b2) = rest.split_at(c * h);
    let mut hidden = vec![0.0; h];
    for j in 0..h {
        let mut u = b1[j];
        for (i, &xi) in x.iter().enumerate() {
            u += w1[j * d + i] * xi;
        }
        hidden[j] = u.tanh();
    }
    let mut out = vec![0.0; c];
    for k in 0..c {
        let mut z = b2[k];
        for (j, &aj) in hidden.iter().enumerate() {
            z += w2[k * h + j] * aj;
        }
        out[k] = z;
    }
    (hidden, out)
}

fn two_layer_backward(
    params: &[f64],
    d: usize,
    h: usize,
    c: usize,
    x: &[f64],
    hidden: &[f64],
    dz: &[f64],
    grad: &mut [f64],
) {
    let w2_off = h * d + h;
    let b2_off = w2_off + c * h;
    let mut da = vec![0.0; h];
    for k in 0..c {
        let g = dz[k];
        if g == 0.0 {
            continue;
        }
        for j in 0..h {
            grad[w2_off + k * h + j] += g * hidden[j];
            da[j] += g * params[w2_off + k * h + j];
        }
        grad[b2_off + k] += g;
    }
    for j in 0..h {
        let du = da[j] * (1.0 - hidden[j] * hidden[j]);
        if du == 0.0 {
            continue;
        }
        for (i, &xi) in x.iter().enumerate() {
            grad[j * d + i] += du * xi;
        }
        grad[h * d + j] += du;
    }
}

impl ClassifierModel {
    pub fn new(
        kind: ClassifierKind,
        input_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::new_with_init(kind, input_dim, hidden_dim, num_classes, INIT_RANGE, rng)
    }

    /// Like [`ClassifierModel::new`] with an explicit init half-range.
    pub fn new_with_init(
        kind: ClassifierKind,
        input_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
        init_range: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut model = Self::zeros(kind, input_dim, hidden_dim, num_classes)?;
        model.params = init_params(model.params.len(), init_range, rng);
        Ok(model)
    }

    /// All-zero parameters (forward output is the uniform distribution).
    pub fn zeros(
        kind: ClassifierKind,
        input_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Validation(
                "classifier needs at least 2 classes".into(),
            ));
        }
        if input_dim == 0 {
            return Err(Error::Validation("input_dim must be positive".into()));
        }
        let count = match kind {
            ClassifierKind::LinearLogistic => {
                if num_classes == 2 {
                    input_dim + 1
                } else {
                    num_classes * (input_dim + 1)
                }
            }
            ClassifierKind::TwoLayer => {
                if hidden_dim == 0 {
                    return Err(Error::Validation(
                        "two-layer classifier needs hidden_dim > 0".into(),
                    ));
                }
                two_layer_count(input_dim, hidden_dim, num_classes)
            }
        };
        Ok(ClassifierModel {
            kind,
            input_dim,
            hidden_dim,
            num_classes,
            params: vec![0.0; count],
            norm: InputNorm::identity(input_dim),
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Standardize inputs with the given per-dimension shift and scale from
    /// here on (typically train-split statistics).
    pub fn set_input_normalization(&mut self, shift: Vec<f64>, scale: Vec<f64>) -> Result<()> {
        check_norm(self.input_dim, &shift, &scale)?;
        self.norm = InputNorm { shift, scale };
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Class logits (binary linear keeps a single logit expanded to two).
    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let x = &self.norm.apply(x)[..];
        self.logits_normed(x)
    }

    fn logits_normed(&self, x: &[f64]) -> Vec<f64> {
        match self.kind {
            ClassifierKind::LinearLogistic => {
                if self.num_classes == 2 {
                    let z = linear_logit(&self.params, x);
                    vec![0.0, z]
                } else {
                    let stride = self.input_dim + 1;
                    (0..self.num_classes)
                        .map(|c| linear_logit(&self.params[c * stride..(c + 1) * stride], x))
                        .collect()
                }
            }
            ClassifierKind::TwoLayer => {
                two_layer_forward(
                    &self.params,
                    self.input_dim,
                    self.hidden_dim,
                    self.num_classes,
                    x,
                )
                .1
            }
        }
    }

    /// Probability distribution over the classes.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.dist(x))
    }

    pub(crate) fn dist(&self, x: &[f64]) -> Vec<f64> {
        let z = self.logits(x);
        let lse = logsumexp(&z);
        z.iter().map(|&zi| (zi - lse).exp()).collect()
    }

    /// Stable log-loss of the prediction at `(x, y)`.
    pub fn nll(&self, x: &[f64], y: usize) -> f64 {
        let z = self.logits(x);
        logsumexp(&z) - z[y]
    }

    /// Distribution and stable log-loss in one forward pass.
    pub(crate) fn dist_and_nll(&self, x: &[f64], y: usize) -> (Vec<f64>, f64) {
        let z = self.logits(x);
        let lse = logsumexp(&z);
        let dist = z.iter().map(|&zi| (zi - lse).exp()).collect();
        (dist, lse - z[y])
    }

    /// Predicted class; ties break toward the lowest index.
    pub fn predict_class(&self, x: &[f64]) -> usize {
        argmax(&self.dist(x))
    }

    /// Accumulate the parameter gradient of
    /// `nll_scale * nll(x, y) + dist_cot . dist(x)` into `grad`.
    ///
    /// One forward pass; both cotangents merge in logit space, which keeps the
    /// log-loss path stable even when the predicted probability underflows.
    pub(crate) fn accumulate_grads(
        &self,
        x: &[f64],
        y: usize,
        nll_scale: f64,
        dist_cot: Option<&[f64]>,
        grad: &mut [f64],
    ) {
        debug_assert_eq!(grad.len(), self.params.len());
        let x = &self.norm.apply(x)[..];
        match self.kind {
            ClassifierKind::LinearLogistic if self.num_classes == 2 => {
                let z = linear_logit(&self.params, x);
                let p1 = logistic(z);
                let mut dz = nll_scale * (p1 - if y == 1 { 1.0 } else { 0.0 });
                if let Some(v) = dist_cot {
                    dz += (v[1] - v[0]) * p1 * (1.0 - p1);
                }
                accumulate_linear(x, dz, grad);
            }
            ClassifierKind::LinearLogistic => {
                let z = self.logits(x);
                let dz = logit_cotangent(&z, y, nll_scale, dist_cot);
                let stride = self.input_dim + 1;
                for (c, &dzc) in dz.iter().enumerate() {
                    accumulate_linear(x, dzc, &mut grad[c * stride..(c + 1) * stride]);
                }
            }
            ClassifierKind::TwoLayer => {
                let (hidden, z) = two_layer_forward(
                    &self.params,
                    self.input_dim,
                    self.hidden_dim,
                    self.num_classes,
                    x,
                );
                let dz = logit_cotangent(&z, y, nll_scale, dist_cot);
                two_layer_backward(
                    &self.params,
                    self.input_dim,
                    self.hidden_dim,
                    self.num_classes,
                    x,
                    &hidden,
                    &dz,
                    grad,
                );
            }
        }
    }
}

fn check_norm(dim: usize, shift: &[f64], scale: &[f64]) -> Result<()> {
    if shift.len() != dim || scale.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: shift.len().max(scale.len()),
        });
    }
    if scale.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Validation(
            "normalization scale must be positive".into(),
        ));
    }
    Ok(())
}

fn linear_logit(params: &[f64], x: &[f64]) -> f64 {
    let mut z = params[x.len()];
    for (w, xi) in params[..x.len()].iter().zip(x) {
        z += w * xi;
    }
    z
}

fn accumulate_linear(x: &[f64], dz: f64, grad: &mut [f64]) {
    if dz == 0.0 {
        return;
    }
    for (g, &xi) in grad[..x.len()].iter_mut().zip(x) {
        *g += dz * xi;
    }
    grad[x.len()] += dz;
}

/// Softmax-head logit cotangent for `nll_scale * NLL + dist_cot . probs`.
fn logit_cotangent(z: &[f64], y: usize, nll_scale: f64, dist_cot: Option<&[f64]>) -> Vec<f64> {
    let lse = logsumexp(z);
    let p: Vec<f64> = z.iter().map(|&zi| (zi - lse).exp()).collect();
    let mut dz: Vec<f64> = p.iter().map(|&pc| nll_scale * pc).collect();
    dz[y] -= nll_scale;
    if let Some(v) = dist_cot {
        let dot: f64 = v.iter().zip(&p).map(|(vj, pj)| vj * pj).sum();
        for ((dzc, &pc), &vc) in dz.iter_mut().zip(&p).zip(v) {
            *dzc += pc * (vc - dot);
        }
    }
    dz
}

impl DeferrerModel {
    pub fn new(
        kind: DeferrerKind,
        input_dim: usize,
        hidden_dim: usize,
        num_experts_total: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::new_with_init(
            kind,
            input_dim,
            hidden_dim,
            num_experts_total,
            INIT_RANGE,
            rng,
        )
    }

    /// Like [`DeferrerModel::new`] with an explicit init half-range.
    pub fn new_with_init(
        kind: DeferrerKind,
        input_dim: usize,
        hidden_dim: usize,
        num_experts_total: usize,
        init_range: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut model = Self::zeros(kind, input_dim, hidden_dim, num_experts_total)?;
        model.params = init_params(model.params.len(), init_range, rng);
        if kind == DeferrerKind::GlobalWeights {
            project_box_in_place(&mut model.params);
        }
        Ok(model)
    }

    pub fn zeros(
        kind: DeferrerKind,
        input_dim: usize,
        hidden_dim: usize,
        num_experts_total: usize,
    ) -> Result<Self> {
        if num_experts_total == 0 {
            return Err(Error::Validation(
                "deferrer needs at least the identity expert".into(),
            ));
        }
        let count = match kind {
            DeferrerKind::GlobalWeights => num_experts_total,
            DeferrerKind::InputConditioned => {
                if input_dim == 0 {
                    return Err(Error::Validation("input_dim must be positive".into()));
                }
                if hidden_dim == 0 {
                    return Err(Error::Validation(
                        "input-conditioned deferrer needs hidden_dim > 0".into(),
                    ));
                }
                two_layer_count(input_dim, hidden_dim, num_experts_total)
            }
        };
        Ok(DeferrerModel {
            kind,
            input_dim,
            hidden_dim,
            num_experts_total,
            params: vec![0.0; count],
            norm: InputNorm::identity(input_dim),
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Standardize inputs with the given per-dimension shift and scale from
    /// here on (typically train-split statistics).
    pub fn set_input_normalization(&mut self, shift: Vec<f64>, scale: Vec<f64>) -> Result<()> {
        check_norm(self.input_dim, &shift, &scale)?;
        self.norm = InputNorm { shift, scale };
        Ok(())
    }

    /// Shift every output pre-activation by a constant, moving the initial
    /// weights away from one half. With many experts this keeps the initial
    /// aggregate score mass of order one (weights near `1/m`) instead of
    /// `m/2`, which would pin the squashed score against its ceiling.
    pub fn shift_output_bias(&mut self, delta: f64) {
        match self.kind {
            DeferrerKind::GlobalWeights => {
                for p in self.params.iter_mut() {
                    *p = (*p + delta).clamp(0.0, 1.0);
                }
            }
            DeferrerKind::InputConditioned => {
                let m = self.num_experts_total;
                let b2_off = self.params.len() - m;
                for p in self.params[b2_off..].iter_mut() {
                    *p += delta;
                }
            }
        }
    }

    /// Per-expert weights in `[0, 1]^m` (identity expert last).
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.kind == DeferrerKind::InputConditioned && x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        Ok(self.weights(x))
    }

    pub(crate) fn weights(&self, x: &[f64]) -> Vec<f64> {
        match self.kind {
            DeferrerKind::GlobalWeights => self.params.clone(),
            DeferrerKind::InputConditioned => {
                let x = &self.norm.apply(x)[..];
                let (_, pre) = two_layer_forward(
                    &self.params,
                    self.input_dim,
                    self.hidden_dim,
                    self.num_experts_total,
                    x,
                );
                pre.into_iter().map(logistic).collect()
            }
        }
    }

    /// Accumulate the parameter gradient of `weight_cot . D(x)` into `grad`.
    pub(crate) fn accumulate_grad(&self, x: &[f64], weight_cot: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.params.len());
        match self.kind {
            DeferrerKind::GlobalWeights => {
                for (g, &c) in grad.iter_mut().zip(weight_cot) {
                    *g += c;
                }
            }
            DeferrerKind::InputConditioned => {
                let x = &self.norm.apply(x)[..];
                let m = self.num_experts_total;
                let (hidden, pre) =
                    two_layer_forward(&self.params, self.input_dim, self.hidden_dim, m, x);
                let dz: Vec<f64> = pre
                    .iter()
                    .zip(weight_cot)
                    .map(|(&u, &c)| {
                        let w = logistic(u);
                        c * w * (1.0 - w)
                    })
                    .collect();
                two_layer_backward(
                    &self.params,
                    self.input_dim,
                    self.hidden_dim,
                    m,
                    x,
                    &hidden,
                    &dz,
                    grad,
                );
            }
        }
    }
}

// --- checkpoint files -------------------------------------------------------
//
// Versioned text format, one parameter per line printed with the shortest
// round-trip representation:
//
//     multidefer-model v1
//     classifier linear-logistic        (or: deferrer global-weights, ...)
//     input_dim 2
//     hidden_dim 16
//     outputs 2                          (num_classes or num_experts_total)
//     shift 0 0                          (input standardization, one value per dim)
//     scale 1 1
//     params 3
//     0.5
//     ...

const CHECKPOINT_MAGIC: &str = "multidefer-model v1";

fn kind_name_classifier(kind: ClassifierKind) -> &'static str {
    match kind {
        ClassifierKind::LinearLogistic => "linear-logistic",
        ClassifierKind::TwoLayer => "two-layer",
    }
}

fn kind_name_deferrer(kind: DeferrerKind) -> &'static str {
    match kind {
        DeferrerKind::GlobalWeights => "global-weights",
        DeferrerKind::InputConditioned => "input-conditioned",
    }
}

fn write_checkpoint(
    path: &Path,
    role: &str,
    kind: &str,
    input_dim: usize,
    hidden_dim: usize,
    outputs: usize,
    norm: &InputNorm,
    params: &[f64],
) -> Result<()> {
    let join = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:?}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut out = String::new();
    out.push_str(CHECKPOINT_MAGIC);
    out.push('\n');
    out.push_str(&format!("{role} {kind}\n"));
    out.push_str(&format!("input_dim {input_dim}\n"));
    out.push_str(&format!("hidden_dim {hidden_dim}\n"));
    out.push_str(&format!("outputs {outputs}\n"));
    out.push_str(&format!("shift {}\n", join(&norm.shift)));
    out.push_str(&format!("scale {}\n", join(&norm.scale)));
    out.push_str(&format!("params {}\n", params.len()));
    for p in params {
        out.push_str(&format!("{p:?}\n"));
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(path, e))
}

struct Checkpoint {
    role: String,
    kind: String,
    input_dim: usize,
    hidden_dim: usize,
    outputs: usize,
    norm: InputNorm,
    params: Vec<f64>,
}

struct CheckpointReader<'a> {
    path: &'a Path,
    lines: Vec<(usize, String)>,
    cursor: usize,
}

impl<'a> CheckpointReader<'a> {
    fn next(&mut self, what: &str) -> Result<(usize, String)> {
        let item = self
            .lines
            .get(self.cursor)
            .ok_or_else(|| Error::parse(self.path, 0, format!("missing {what}")))?;
        self.cursor += 1;
        Ok((item.0, item.1.clone()))
    }

    fn field_value(&mut self, name: &str) -> Result<(usize, String)> {
        let (line, l) = self.next(name)?;
        let rest = l
            .strip_prefix(name)
            .ok_or_else(|| Error::parse(self.path, line, format!("expected `{name} ...`")))?;
        Ok((line, rest.trim().to_string()))
    }

    fn usize_field(&mut self, name: &str) -> Result<usize> {
        let (line, value) = self.field_value(name)?;
        value
            .parse()
            .map_err(|_| Error::parse(self.path, line, format!("invalid {name}")))
    }

    fn vec_field(&mut self, name: &str) -> Result<Vec<f64>> {
        let (line, value) = self.field_value(name)?;
        value
            .split_whitespace()
            .map(|tok| {
                tok.parse().map_err(|_| {
                    Error::parse(self.path, line, format!("invalid {name} value `{tok}`"))
                })
            })
            .collect()
    }
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = CheckpointReader {
        path,
        lines: text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim_end_matches('\r').to_string()))
            .collect(),
        cursor: 0,
    };

    let (line, magic) = reader.next("header")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::parse(
            path,
            line,
            "not a multidefer model checkpoint",
        ));
    }
    let (line, role_line) = reader.next("role line")?;
    let mut parts = role_line.split_whitespace();
    let role = parts
        .next()
        .ok_or_else(|| Error::parse(path, line, "missing role"))?
        .to_string();
    let kind = parts
        .next()
        .ok_or_else(|| Error::parse(path, line, "missing kind"))?
        .to_string();

    let input_dim = reader.usize_field("input_dim")?;
    let hidden_dim = reader.usize_field("hidden_dim")?;
    let outputs = reader.usize_field("outputs")?;
    let shift = reader.vec_field("shift")?;
    let scale = reader.vec_field("scale")?;
    let count = reader.usize_field("params")?;

    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let (line, l) = reader.next("parameter")?;
        let v: f64 = l
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, line, format!("invalid parameter `{l}`")))?;
        params.push(v);
    }
    Ok(Checkpoint {
        role,
        kind,
        input_dim,
        hidden_dim,
        outputs,
        norm: InputNorm { shift, scale },
        params,
    })
}

pub fn save_classifier(model: &ClassifierModel, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(
        path.as_ref(),
        "classifier",
        kind_name_classifier(model.kind),
        model.input_dim,
        model.hidden_dim,
        model.num_classes,
        &model.norm,
        &model.params,
    )
}

pub fn load_classifier(path: impl AsRef<Path>) -> Result<ClassifierModel> {
    let path = path.as_ref();
    let ck = read_checkpoint(path)?;
    if ck.role != "classifier" {
        return Err(Error::Validation(format!(
            "{} holds a {}, not a classifier",
            path.display(),
            ck.role
        )));
    }
    let kind = match ck.kind.as_str() {
        "linear-logistic" => ClassifierKind::LinearLogistic,
        "two-layer" => ClassifierKind::TwoLayer,
        other => {
            return Err(Error::Validation(format!(
                "unknown classifier kind `{other}`"
            )))
        }
    };
    let mut model = ClassifierModel::zeros(kind, ck.input_dim, ck.hidden_dim, ck.outputs)?;
    if model.params.len() != ck.params.len() {
        return Err(Error::Validation(format!(
            "checkpoint has {} params, model shape needs {}",
            ck.params.len(),
            model.params.len()
        )));
    }
    model.params = ck.params;
    model.set_input_normalization(ck.norm.shift, ck.norm.scale)?;
    Ok(model)
}

pub fn save_deferrer(model: &DeferrerModel, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(
        path.as_ref(),
        "deferrer",
        kind_name_deferrer(model.kind),
        model.input_dim,
        model.hidden_dim,
        model.num_experts_total,
        &model.norm,
        &model.params,
    )
}

pub fn load_deferrer(path: impl AsRef<Path>) -> Result<DeferrerModel> {
    let path = path.as_ref();
    let ck = read_checkpoint(path)?;
    if ck.role != "deferrer" {
        return Err(Error::Validation(format!(
            "{} holds a {}, not a deferrer",
            path.display(),
            ck.role
        )));
    }
    let kind = match ck.kind.as_str() {
        "global-weights" => DeferrerKind::GlobalWeights,
        "input-conditioned" => DeferrerKind::InputConditioned,
        other => {
            return Err(Error::Validation(format!(
                "unknown deferrer kind `{other}`"
            )))
        }
    };
    let mut model = DeferrerModel::zeros(kind, ck.input_dim, ck.hidden_dim, ck.outputs)?;
    if model.params.len() != ck.params.len() {
        return Err(Error::Validation(format!(
            "checkpoint has {} params, model shape needs {}",
            ck.params.len(),
            model.params.len()
        )));
    }
    model.params = ck.params;
    model.set_input_normalization(ck.norm.shift, ck.norm.scale)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_give_uniform_distribution() {
        let m = ClassifierModel::zeros(ClassifierKind::LinearLogistic, 3, 0, 2).unwrap();
        let p = m.forward(&[0.4, -1.0, 2.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let m3 = ClassifierModel::zeros(ClassifierKind::TwoLayer, 2, 4, 3).unwrap();
        let p3 = m3.forward(&[1.0, 1.0]).unwrap();
        for &pi in &p3 {
            assert!((pi - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_logit_gives_logistic_of_one() {
        // w = (1, 0), b = 0, x = (1, 5) -> z = 1 -> P(1) = e/(e+1)
        let mut m = ClassifierModel::zeros(ClassifierKind::LinearLogistic, 2, 0, 2).unwrap();
        m.params = vec![1.0, 0.0, 0.0];
        let p = m.forward(&[1.0, 5.0]).unwrap();
        let expected = std::f64::consts::E / (std::f64::consts::E + 1.0);
        assert!((p[1] - expected).abs() < 1e-12);
    }

    #[test]
    fn forward_outputs_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in [ClassifierKind::LinearLogistic, ClassifierKind::TwoLayer] {
            for num_classes in [2usize, 4] {
                let m = ClassifierModel::new(kind, 3, 8, num_classes, &mut rng).unwrap();
                for _ in 0..100 {
                    let x: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
                    let p = m.forward(&x).unwrap();
                    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    assert!(p.iter().all(|&pi| pi >= 0.0));
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let m = ClassifierModel::zeros(ClassifierKind::LinearLogistic, 2, 0, 2).unwrap();
        assert!(matches!(
            m.forward(&[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        let d = DeferrerModel::zeros(DeferrerKind::InputConditioned, 2, 4, 3).unwrap();
        assert!(matches!(
            d.forward(&[1.0, 2.0, 3.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn global_weights_ignore_input() {
        let mut d = DeferrerModel::zeros(DeferrerKind::GlobalWeights, 2, 0, 3).unwrap();
        d.params = vec![0.3, 0.9, 0.1];
        assert_eq!(d.forward(&[5.0, -2.0]).unwrap(), vec![0.3, 0.9, 0.1]);
        assert_eq!(d.forward(&[]).unwrap(), vec![0.3, 0.9, 0.1]);
    }

    #[test]
    fn zero_input_conditioned_outputs_half() {
        let d = DeferrerModel::zeros(DeferrerKind::InputConditioned, 2, 4, 3).unwrap();
        let w = d.forward(&[0.7, -0.3]).unwrap();
        assert_eq!(w, vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn deferrer_outputs_stay_in_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = DeferrerModel::new(DeferrerKind::InputConditioned, 2, 8, 4, &mut rng).unwrap();
        for _ in 0..100 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-10.0..10.0)).collect();
            let w = d.forward(&x).unwrap();
            assert!(w.iter().all(|&wi| (0.0..=1.0).contains(&wi)));
        }
    }

    #[test]
    fn project_box_clamps() {
        assert_eq!(project_box(&[1.7, -0.2, 0.5]), vec![1.0, 0.0, 0.5]);
        let inside = vec![0.2, 0.8, 0.0, 1.0];
        assert_eq!(project_box(&inside), inside);
    }

    #[test]
    fn projected_norm_bounded_by_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let m = rng.random_range(1..12usize);
            let v: Vec<f64> = (0..m).map(|_| rng.random_range(-40.0..40.0)).collect();
            let p = project_box(&v);
            let sq: f64 = p.iter().map(|x| x * x).sum();
            assert!(sq <= m as f64 + 1e-12);
        }
    }

    fn fd_grad(f: impl Fn(&[f64]) -> f64, params: &[f64], h: f64) -> Vec<f64> {
        let mut grad = vec![0.0; params.len()];
        let mut p = params.to_vec();
        for i in 0..p.len() {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            grad[i] = (up - down) / (2.0 * h);
        }
        grad
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        diff / norm.max(1e-8)
    }

    #[test]
    fn classifier_nll_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for kind in [ClassifierKind::LinearLogistic, ClassifierKind::TwoLayer] {
            for num_classes in [2usize, 3] {
                for _ in 0..5 {
                    let m = ClassifierModel::new(kind, 3, 5, num_classes, &mut rng).unwrap();
                    let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
                    let y = rng.random_range(0..num_classes);
                    let mut analytic = vec![0.0; m.param_count()];
                    m.accumulate_grads(&x, y, 1.0, None, &mut analytic);
                    let numeric = fd_grad(
                        |p| {
                            let mut probe = m.clone();
                            probe.params = p.to_vec();
                            probe.nll(&x, y)
                        },
                        &m.params,
                        1e-5,
                    );
                    assert!(rel_err(&analytic, &numeric) < 1e-6);
                }
            }
        }
    }

    #[test]
    fn classifier_dist_cotangent_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for kind in [ClassifierKind::LinearLogistic, ClassifierKind::TwoLayer] {
            let num_classes = 3;
            let m = ClassifierModel::new(kind, 2, 4, num_classes, &mut rng).unwrap();
            let x = vec![0.3, -1.1];
            let cot: Vec<f64> = (0..num_classes)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let mut analytic = vec![0.0; m.param_count()];
            m.accumulate_grads(&x, 0, 0.0, Some(&cot), &mut analytic);
            let numeric = fd_grad(
                |p| {
                    let mut probe = m.clone();
                    probe.params = p.to_vec();
                    probe
                        .dist(&x)
                        .iter()
                        .zip(&cot)
                        .map(|(pi, ci)| pi * ci)
                        .sum()
                },
                &m.params,
                1e-5,
            );
            assert!(rel_err(&analytic, &numeric) < 1e-6);
        }
    }

    #[test]
    fn deferrer_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for kind in [DeferrerKind::GlobalWeights, DeferrerKind::InputConditioned] {
            let d = DeferrerModel::new(kind, 2, 4, 3, &mut rng).unwrap();
            let x = vec![0.5, 2.0];
            let cot: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut analytic = vec![0.0; d.param_count()];
            d.accumulate_grad(&x, &cot, &mut analytic);
            let numeric = fd_grad(
                |p| {
                    let mut probe = d.clone();
                    probe.params = p.to_vec();
                    probe
                        .weights(&x)
                        .iter()
                        .zip(&cot)
                        .map(|(wi, ci)| wi * ci)
                        .sum()
                },
                &d.params,
                1e-5,
            );
            assert!(rel_err(&analytic, &numeric) < 1e-6);
        }
    }

    #[test]
    fn checkpoints_round_trip() {
        let dir = std::env::temp_dir().join("multidefer_model_test");
        fs::create_dir_all(&dir).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);

        let mut clf = ClassifierModel::new(ClassifierKind::TwoLayer, 3, 6, 4, &mut rng).unwrap();
        clf.set_input_normalization(vec![0.5, -2.0, 3.25], vec![1.5, 0.25, 2.0])
            .unwrap();
        let path = dir.join("clf.ckpt");
        save_classifier(&clf, &path).unwrap();
        let loaded = load_classifier(&path).unwrap();
        assert_eq!(loaded, clf);
        let x = [0.4, -1.0, 2.0];
        assert_eq!(loaded.forward(&x).unwrap(), clf.forward(&x).unwrap());

        let def = DeferrerModel::new(DeferrerKind::GlobalWeights, 3, 0, 5, &mut rng).unwrap();
        let path = dir.join("def.ckpt");
        save_deferrer(&def, &path).unwrap();
        assert_eq!(load_deferrer(&path).unwrap(), def);

        assert!(load_classifier(&path).is_err()); // role mismatch
    }

    #[test]
    fn normalization_shifts_decision_surface() {
        let mut m = ClassifierModel::zeros(ClassifierKind::LinearLogistic, 1, 0, 2).unwrap();
        m.params = vec![1.0, 0.0];
        let raw = m.forward(&[6.0]).unwrap()[1];
        m.set_input_normalization(vec![6.0], vec![2.0]).unwrap();
        let normed = m.forward(&[6.0]).unwrap()[1];
        assert!((raw - logistic(6.0)).abs() < 1e-15);
        assert!((normed - 0.5).abs() < 1e-15);
        assert!(m.set_input_normalization(vec![0.0], vec![0.0]).is_err());
        assert!(m
            .set_input_normalization(vec![0.0, 1.0], vec![1.0, 1.0])
            .is_err());
    }
}
