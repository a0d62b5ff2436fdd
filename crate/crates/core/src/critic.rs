//! Acceptability critic: label derivation from annotator ratings, a
//! one-hidden-layer multi-task network, its training loop and metrics.
//!
//! The network maps a feature `x` to a shared hidden layer
//! `a = tanh(W1·x + b1)` feeding three linear heads: a classification logit
//! `c = w_cls·a + b_cls` and two rating regressions `r_qa`, `r_qar`. The
//! batch loss is `BCE(σ(c), y) + λ·(MSE(r_qa, y_qa) + MSE(r_qar, y_qar))`,
//! each term averaged over the batch.
//!
//! Checkpoints are JSON objects:
//!
//! ```text
//! { "format": "qarsmith-critic", "version": 1,
//!   "input_dim": d, "hidden_dim": h, "lambda": λ, "seed": s,
//!   "params": [W1 row-major (h·d), b1 (h), w_cls (h), b_cls,
//!              w_qa (h), b_qa, w_qar (h), b_qar] }
//! ```

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, EmbedBackend, EmbedRequest};
use crate::model::{AnnotatorRating, CriticLabel, CriticScore, QarInstance, Validate, VerbalizationBundle};
use crate::util::sha256_hex;
use crate::verbalize::{render_context, DescriptorMask};

pub const CHECKPOINT_FORMAT: &str = "qarsmith-critic";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CriticError {
    #[error("expected 2 annotator ratings, got {0}")]
    AnnotatorCount(usize),
    #[error("invalid rating: {0}")]
    InvalidRating(String),
    #[error("feature has dimension {actual}, model expects {expected}")]
    Dimension { expected: usize, actual: usize },
    #[error("{features} features but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("no training data")]
    Empty,
    #[error("invalid training config: {0}")]
    InvalidConfig(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

fn rating_ok(r: u8) -> Result<(), CriticError> {
    if (1..=3).contains(&r) {
        Ok(())
    } else {
        Err(CriticError::InvalidRating(format!("{r} is outside 1..=3")))
    }
}

fn target(ratings: &[u8], any_reject: bool) -> f64 {
    if any_reject || ratings.is_empty() {
        return 0.0;
    }
    let mean = ratings.iter().map(|&r| r as f64).sum::<f64>() / ratings.len() as f64;
    (mean - 1.0) / 2.0
}

/// Training label for one instance from exactly two annotators.
///
/// An annotator who rejects the QA gives no QAR rating, and any other
/// annotator must give one. Any reject (or missing QAR rating) makes the
/// instance negative and zeroes the matching regression target.
pub fn derive_labels(instance_id: &str, ratings: &[AnnotatorRating]) -> Result<CriticLabel, CriticError> {
    if ratings.len() != 2 {
        return Err(CriticError::AnnotatorCount(ratings.len()));
    }
    for r in ratings {
        rating_ok(r.qa_rating)?;
        match r.qar_rating {
            Some(q) if r.qa_rating == 1 => {
                return Err(CriticError::InvalidRating(format!(
                    "qar rating {q} given after a qa reject"
                )))
            }
            Some(q) => rating_ok(q)?,
            None if r.qa_rating != 1 => {
                return Err(CriticError::InvalidRating("qar rating missing".into()))
            }
            None => {}
        }
    }
    let qa: Vec<u8> = ratings.iter().map(|r| r.qa_rating).collect();
    let qar: Vec<u8> = ratings.iter().filter_map(|r| r.qar_rating).collect();
    let qa_reject = qa.contains(&1);
    let qar_reject = qar.len() < ratings.len() || qar.contains(&1);
    Ok(CriticLabel {
        instance_id: instance_id.to_string(),
        annotator_ratings: ratings.to_vec(),
        binary_accept: u8::from(!(qa_reject || qar_reject)),
        y_qa: target(&qa, qa_reject),
        y_qar: target(&qar, qar_reject),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub lambda: f64,
    pub seed: u64,
    /// Row-major `hidden_dim × input_dim`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w_cls: Vec<f64>,
    pub b_cls: f64,
    pub w_qa: Vec<f64>,
    pub b_qa: f64,
    pub w_qar: Vec<f64>,
    pub b_qar: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Forward {
    pub logit: f64,
    pub prob: f64,
    pub r_qa: f64,
    pub r_qar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: f64,
    pub y_qa: f64,
    pub y_qar: f64,
}

impl Sample {
    pub fn from_label(x: Vec<f64>, label: &CriticLabel) -> Self {
        Self {
            x,
            y: label.binary_accept as f64,
            y_qa: label.y_qa,
            y_qar: label.y_qar,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub mse_qa: f64,
    pub mse_qar: f64,
    pub total: f64,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-[y·ln σ(z) + (1-y)·ln(1-σ(z))]`, computed without overflow.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

impl CriticParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize, lambda: f64) -> Self {
        Self {
            input_dim,
            hidden_dim,
            lambda,
            seed: 0,
            w1: vec![0.0; input_dim * hidden_dim],
            b1: vec![0.0; hidden_dim],
            w_cls: vec![0.0; hidden_dim],
            b_cls: 0.0,
            w_qa: vec![0.0; hidden_dim],
            b_qa: 0.0,
            w_qar: vec![0.0; hidden_dim],
            b_qar: 0.0,
        }
    }

    /// Weights uniform in `[-1/√d, 1/√d]`, biases zero.
    pub fn init(input_dim: usize, hidden_dim: usize, lambda: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (input_dim.max(1) as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..=bound)).collect() };
        let w1 = draw(input_dim * hidden_dim);
        let w_cls = draw(hidden_dim);
        let w_qa = draw(hidden_dim);
        let w_qar = draw(hidden_dim);
        Self {
            seed,
            w1,
            w_cls,
            w_qa,
            w_qar,
            ..Self::zeros(input_dim, hidden_dim, lambda)
        }
    }

    pub fn param_count(&self) -> usize {
        self.hidden_dim * self.input_dim + 4 * self.hidden_dim + 3
    }

    /// Parameters in checkpoint order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        v.extend(&self.w1);
        v.extend(&self.b1);
        v.extend(&self.w_cls);
        v.push(self.b_cls);
        v.extend(&self.w_qa);
        v.push(self.b_qa);
        v.extend(&self.w_qar);
        v.push(self.b_qar);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), CriticError> {
        if flat.len() != self.param_count() {
            return Err(CriticError::Checkpoint(format!(
                "{} parameters, expected {}",
                flat.len(),
                self.param_count()
            )));
        }
        let (h, d) = (self.hidden_dim, self.input_dim);
        let mut it = flat.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
        self.w1 = take(h * d);
        self.b1 = take(h);
        self.w_cls = take(h);
        self.b_cls = take(1)[0];
        self.w_qa = take(h);
        self.b_qa = take(1)[0];
        self.w_qar = take(h);
        self.b_qar = take(1)[0];
        Ok(())
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        let d = self.input_dim;
        (0..self.hidden_dim)
            .map(|j| {
                let row = &self.w1[j * d..(j + 1) * d];
                (row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.b1[j]).tanh()
            })
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward, CriticError> {
        if x.len() != self.input_dim {
            return Err(CriticError::Dimension {
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        let a = self.hidden(x);
        let dot = |w: &[f64]| w.iter().zip(&a).map(|(p, q)| p * q).sum::<f64>();
        let logit = dot(&self.w_cls) + self.b_cls;
        Ok(Forward {
            logit,
            prob: sigmoid(logit),
            r_qa: dot(&self.w_qa) + self.b_qa,
            r_qar: dot(&self.w_qar) + self.b_qar,
        })
    }

    pub fn loss(&self, batch: &[Sample]) -> Result<LossBreakdown, CriticError> {
        if batch.is_empty() {
            return Err(CriticError::Empty);
        }
        let mut l = LossBreakdown::default();
        for s in batch {
            let f = self.forward(&s.x)?;
            l.bce += bce_with_logit(f.logit, s.y);
            l.mse_qa += (f.r_qa - s.y_qa).powi(2);
            l.mse_qar += (f.r_qar - s.y_qar).powi(2);
        }
        let n = batch.len() as f64;
        l.bce /= n;
        l.mse_qa /= n;
        l.mse_qar /= n;
        l.total = l.bce + self.lambda * (l.mse_qa + l.mse_qar);
        Ok(l)
    }

    /// Analytic gradient split into the classification term and the
    /// λ-weighted regression term; their sum is the gradient of the loss.
    pub fn gradient_parts(&self, batch: &[Sample]) -> Result<(Vec<f64>, Vec<f64>), CriticError> {
        if batch.is_empty() {
            return Err(CriticError::Empty);
        }
        let mut cls = CriticParams::zeros(self.input_dim, self.hidden_dim, self.lambda);
        let mut reg = cls.clone();
        let n = batch.len() as f64;
        let d = self.input_dim;
        for s in batch {
            let f = self.forward(&s.x)?;
            let a = self.hidden(&s.x);
            let dc = (f.prob - s.y) / n;
            let dqa = self.lambda * (2.0 * (f.r_qa - s.y_qa) / n);
            let dqar = self.lambda * (2.0 * (f.r_qar - s.y_qar) / n);
            cls.b_cls += dc;
            reg.b_qa += dqa;
            reg.b_qar += dqar;
            for j in 0..self.hidden_dim {
                cls.w_cls[j] += dc * a[j];
                reg.w_qa[j] += dqa * a[j];
                reg.w_qar[j] += dqar * a[j];
                let slope = 1.0 - a[j] * a[j];
                let dz_cls = dc * self.w_cls[j] * slope;
                let dz_reg = (dqa * self.w_qa[j] + dqar * self.w_qar[j]) * slope;
                cls.b1[j] += dz_cls;
                reg.b1[j] += dz_reg;
                for k in 0..d {
                    cls.w1[j * d + k] += dz_cls * s.x[k];
                    reg.w1[j * d + k] += dz_reg * s.x[k];
                }
            }
        }
        Ok((cls.flatten(), reg.flatten()))
    }

    pub fn gradient(&self, batch: &[Sample]) -> Result<Vec<f64>, CriticError> {
        let (c, r) = self.gradient_parts(batch)?;
        Ok(c.iter().zip(&r).map(|(a, b)| a + b).collect())
    }

    pub fn score(&self, x: &[f64]) -> Result<f64, CriticError> {
        Ok(self.forward(x)?.prob)
    }

    /// Short content digest identifying these parameters.
    pub fn version(&self) -> String {
        let bytes: Vec<u8> = self.flatten().iter().flat_map(|v| v.to_le_bytes()).collect();
        format!("critic-{}", &sha256_hex(&bytes)[..12])
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            lambda: self.lambda,
            seed: self.seed,
            params: self.flatten(),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, CriticError> {
        c.check().map_err(CriticError::Checkpoint)?;
        let mut p = Self::zeros(c.input_dim, c.hidden_dim, c.lambda);
        p.seed = c.seed;
        p.set_flat(&c.params)?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub lambda: f64,
    pub seed: u64,
    pub params: Vec<f64>,
}

impl Validate for Checkpoint {
    fn check(&self) -> Result<(), String> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint {} v{}", self.format, self.version));
        }
        let want = self.hidden_dim * self.input_dim + 4 * self.hidden_dim + 3;
        if self.params.len() != want {
            return Err(format!("{} parameters, expected {want}", self.params.len()));
        }
        if self.params.iter().any(|v| !v.is_finite()) {
            return Err("non-finite parameter".into());
        }
        Ok(())
    }
}

/// Central-difference check of the analytic gradient over every parameter.
///
/// Relative error per coordinate is `|g - ĝ| / max(|g| + |ĝ|, 1e-8)`.
pub fn gradient_check(params: &CriticParams, batch: &[Sample], step: f64) -> Result<f64, CriticError> {
    let analytic = params.gradient(batch)?;
    let base = params.flatten();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut v = base.clone();
        v[i] = base[i] + step;
        probe.set_flat(&v)?;
        let up = probe.loss(batch)?.total;
        v[i] = base[i] - step;
        probe.set_flat(&v)?;
        let down = probe.loss(batch)?.total;
        let numeric = (up - down) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub lambda: f64,
    pub hidden_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 256,
            max_epochs: 10,
            seed: 0,
            lambda: 1.0,
            hidden_dim: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CriticError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CriticError::InvalidConfig("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(CriticError::InvalidConfig("batch_size must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(CriticError::InvalidConfig("max_epochs must be positive"));
        }
        if self.hidden_dim == 0 {
            return Err(CriticError::InvalidConfig("hidden_dim must be positive"));
        }
        if !(self.lambda >= 0.0) {
            return Err(CriticError::InvalidConfig("lambda must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub train_accuracy: f64,
}

impl Validate for EpochLog {
    fn check(&self) -> Result<(), String> {
        if !self.loss.total.is_finite() {
            return Err("non-finite loss".into());
        }
        Ok(())
    }
}

pub fn accuracy(params: &CriticParams, data: &[Sample]) -> Result<f64, CriticError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut hit = 0usize;
    for s in data {
        let pred = params.score(&s.x)? >= 0.5;
        hit += usize::from(pred == (s.y >= 0.5));
    }
    Ok(hit as f64 / data.len() as f64)
}

/// Mini-batch gradient descent from a seeded initialization.
pub fn train_critic(data: &[Sample], cfg: &TrainConfig) -> Result<(CriticParams, Vec<EpochLog>), CriticError> {
    cfg.validate()?;
    let first = data.first().ok_or(CriticError::Empty)?;
    let d = first.x.len();
    let mut params = CriticParams::init(d, cfg.hidden_dim, cfg.lambda, cfg.seed);
    train_from(&mut params, data, cfg).map(|log| (params, log))
}

/// Continue training existing parameters; returns the per-epoch log.
pub fn train_from(params: &mut CriticParams, data: &[Sample], cfg: &TrainConfig) -> Result<Vec<EpochLog>, CriticError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(CriticError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.max_epochs);
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Sample> = chunk.iter().map(|&i| data[i].clone()).collect();
            let g = params.gradient(&batch)?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(CriticError::NonFinite { epoch, batch: bi });
            }
            let mut flat = params.flatten();
            for (p, gi) in flat.iter_mut().zip(&g) {
                *p -= cfg.learning_rate * gi;
            }
            params.set_flat(&flat)?;
        }
        let loss = params.loss(data)?;
        if !loss.total.is_finite() {
            return Err(CriticError::NonFinite { epoch, batch: 0 });
        }
        log.push(EpochLog {
            epoch: epoch + 1,
            loss,
            train_accuracy: accuracy(params, data)?,
        });
    }
    Ok(log)
}

/// Feature text for an instance: its image context followed by the QAR.
pub fn feature_text(instance: &QarInstance, bundle: &VerbalizationBundle) -> String {
    format!(
        "{}\n{}\n{}\n{}",
        render_context(bundle, instance.mode, &DescriptorMask::all()),
        instance.question,
        instance.answer,
        instance.rationale
    )
}

pub fn featurize(
    instance: &QarInstance,
    bundle: &VerbalizationBundle,
    backend: &dyn EmbedBackend,
) -> Result<Vec<f64>, CriticError> {
    featurize_batch(&[(instance, bundle)], backend).map(|mut v| v.remove(0))
}

pub fn featurize_batch(
    items: &[(&QarInstance, &VerbalizationBundle)],
    backend: &dyn EmbedBackend,
) -> Result<Vec<Vec<f64>>, CriticError> {
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let texts: Vec<String> = items.iter().map(|(i, b)| feature_text(i, b)).collect();
    let resp = backend.embed(&EmbedRequest {
        texts: Some(texts),
        image_b64: None,
    })?;
    if resp.vectors.len() != items.len() {
        return Err(CriticError::LengthMismatch {
            features: resp.vectors.len(),
            labels: items.len(),
        });
    }
    Ok(resp.vectors)
}

pub fn score_instance(params: &CriticParams, instance_id: &str, feature: &[f64]) -> Result<CriticScore, CriticError> {
    Ok(CriticScore {
        instance_id: instance_id.to_string(),
        score: params.score(feature)?,
        model_version: params.version(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when nothing was predicted positive; precision is then reported as 0.
    pub precision_undefined: bool,
}

/// Precision/recall/F1 with `score ≥ threshold` predicted positive.
pub fn binary_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<BinaryMetrics, CriticError> {
    if scores.len() != labels.len() {
        return Err(CriticError::LengthMismatch {
            features: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(CriticError::Empty);
    }
    let mut m = BinaryMetrics::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => m.tp += 1,
            (true, false) => m.fp += 1,
            (false, true) => m.fn_ += 1,
            (false, false) => m.tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    m.precision_undefined = m.tp + m.fp == 0;
    m.precision = ratio(m.tp, m.tp + m.fp);
    m.recall = ratio(m.tp, m.tp + m.fn_);
    m.f1 = if m.precision + m.recall > 0.0 {
        2.0 * m.precision * m.recall / (m.precision + m.recall)
    } else {
        0.0
    };
    Ok(m)
}

pub fn evaluate_critic(params: &CriticParams, data: &[Sample]) -> Result<BinaryMetrics, CriticError> {
    let scores: Vec<f64> = data.iter().map(|s| params.score(&s.x)).collect::<Result<_, _>>()?;
    let labels: Vec<u8> = data.iter().map(|s| u8::from(s.y >= 0.5)).collect();
    binary_metrics(&scores, &labels, 0.5)
}

/// Area under the ROC curve via average ranks (ties share rank).
///
/// Returns `None` when only one class is present.
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 || scores.len() != labels.len() {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    let rank_sum: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(y, _)| **y == 1)
        .map(|(_, r)| r)
        .sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(qa: u8, qar: Option<u8>) -> AnnotatorRating {
        AnnotatorRating { qa_rating: qa, qar_rating: qar }
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Sample> {
        (0..n)
            .map(|_| Sample {
                x: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                y: f64::from(rng.random::<bool>()),
                y_qa: rng.random(),
                y_qar: rng.random(),
            })
            .collect()
    }

    #[test]
    fn label_examples() {
        let l = derive_labels("a", &[r(3, Some(3)), r(3, Some(2))]).unwrap();
        assert_eq!((l.binary_accept, l.y_qa, l.y_qar), (1, 1.0, 0.75));
        let l = derive_labels("b", &[r(1, None), r(3, Some(3))]).unwrap();
        assert_eq!((l.binary_accept, l.y_qa, l.y_qar), (0, 0.0, 0.0));
        let l = derive_labels("c", &[r(2, Some(2)), r(2, Some(2))]).unwrap();
        assert_eq!((l.binary_accept, l.y_qa, l.y_qar), (1, 0.5, 0.5));
        assert!(matches!(derive_labels("d", &[r(3, Some(3))]), Err(CriticError::AnnotatorCount(1))));
        assert!(derive_labels("e", &[r(1, Some(2)), r(3, Some(3))]).is_err());
        assert!(derive_labels("f", &[r(2, None), r(3, Some(3))]).is_err());
    }

    #[test]
    fn zero_params_give_ln2_and_half() {
        let p = CriticParams::zeros(3, 2, 1.0);
        let batch = vec![
            Sample { x: vec![1.0, 2.0, 3.0], y: 1.0, y_qa: 0.0, y_qar: 0.0 },
            Sample { x: vec![-1.0, 0.5, 0.0], y: 0.0, y_qa: 0.0, y_qar: 0.0 },
        ];
        assert!((p.loss(&batch).unwrap().bce - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(p.score(&[0.0, 0.0, 0.0]).unwrap(), 0.5);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..5 {
            let p = CriticParams::init(8, 4, 1.0, seed);
            let batch = random_batch(&mut rng, 6, 8);
            assert!(gradient_check(&p, &batch, 1e-5).unwrap() < 1e-4);
        }
    }

    #[test]
    fn lambda_zero_silences_regression() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = CriticParams::init(5, 3, 0.0, 4);
        let (_, reg) = p.gradient_parts(&random_batch(&mut rng, 4, 5)).unwrap();
        assert!(reg.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn lambda_doubling_doubles_regression_part() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = random_batch(&mut rng, 4, 5);
        let mut p = CriticParams::init(5, 3, 0.7, 4);
        let (c1, r1) = p.gradient_parts(&batch).unwrap();
        p.lambda = 1.4;
        let (c2, r2) = p.gradient_parts(&batch).unwrap();
        assert_eq!(c1, c2);
        assert!(r1.iter().zip(&r2).all(|(a, b)| *b == 2.0 * a));
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = CriticParams::init(4, 3, 1.0, 8);
        let c = p.to_checkpoint();
        let json = serde_json::to_string(&c).unwrap();
        let back = CriticParams::from_checkpoint(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.version(), p.version());
    }

    #[test]
    fn metrics_hand_table() {
        // tp=3 fp=1 fn=2 tn=4
        let scores = [0.9, 0.8, 0.7, 0.6, 0.4, 0.3, 0.2, 0.1, 0.05, 0.45];
        let labels = [1, 1, 1, 0, 1, 1, 0, 0, 0, 0];
        let m = binary_metrics(&scores, &labels, 0.5).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (3, 1, 2, 4));
        assert!((m.precision - 0.75).abs() < 1e-12);
        assert!((m.recall - 0.6).abs() < 1e-12);
        assert!((m.f1 - 2.0 * 0.75 * 0.6 / 1.35).abs() < 1e-12);
        let none = binary_metrics(&[0.1, 0.2], &[1, 0], 0.5).unwrap();
        assert!(none.precision_undefined && none.recall == 0.0);
    }

    #[test]
    fn auc_matches_pair_counting() {
        let scores = [0.1, 0.4, 0.35, 0.8, 0.4, 0.9];
        let labels = [0, 0, 1, 1, 1, 0];
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        assert!((auc(&scores, &labels).unwrap() - wins / pairs).abs() < 1e-12);
    }
}
