//! Threshold filtering, precision/retention curves, the random-retention
//! baseline and the descriptor ablation harness.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::backend::{ChatBackend, EmbedBackend, ScoreBackend, ScoreRequest};
use crate::critic::{featurize, CriticError, CriticParams};
use crate::generate::{run_generation, GenerateError, GenerationConfig, PromptTemplates};
use crate::model::{CriticScore, ImageRecord, QarInstance, ReferenceMode, Validate, VerbalizationBundle};
use crate::util::derive_seed;
use crate::verbalize::{render_context, DescriptorMask};

pub const DEFAULT_THRESHOLD: f64 = 0.8;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("no labels")]
    Empty,
    #[error("non-finite score for {0}")]
    NonFinite(String),
    #[error(transparent)]
    Generate(#[from] GenerateError),
    #[error(transparent)]
    Critic(#[from] CriticError),
    #[error("scoring failed: {0}")]
    Scorer(String),
    #[error("descriptor mask selects nothing")]
    EmptyMask,
}

/// Ids whose score is strictly above `tau`, in input order.
pub fn filter_by_threshold(scores: &[CriticScore], tau: f64) -> Vec<String> {
    scores
        .iter()
        .filter(|s| s.score > tau)
        .map(|s| s.instance_id.clone())
        .collect()
}

/// `0.00, 0.05, …, 0.95`.
pub fn default_thresholds() -> Vec<f64> {
    (0..20).map(|i| (i * 5) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCurvePoint {
    pub threshold: f64,
    pub retained_count: usize,
    pub retained_fraction: f64,
    /// Reported as 0 when nothing is retained; see `precision_undefined`.
    pub precision: f64,
    pub precision_undefined: bool,
}

impl Validate for ThresholdCurvePoint {
    fn check(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.retained_fraction) || !(0.0..=1.0).contains(&self.precision) {
            return Err("fraction or precision outside [0,1]".into());
        }
        Ok(())
    }
}

fn precision_of(labels: impl Iterator<Item = u8>) -> (usize, f64, bool) {
    let (mut n, mut pos) = (0usize, 0usize);
    for y in labels {
        n += 1;
        pos += usize::from(y == 1);
    }
    if n == 0 {
        (0, 0.0, true)
    } else {
        (n, pos as f64 / n as f64, false)
    }
}

pub fn precision_curve(
    scores: &[f64],
    labels: &[u8],
    thresholds: &[f64],
) -> Result<Vec<ThresholdCurvePoint>, FilterError> {
    if scores.len() != labels.len() {
        return Err(FilterError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(FilterError::Empty);
    }
    let n = labels.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| {
            let kept = scores.iter().zip(labels).filter(|(s, _)| **s > t).map(|(_, y)| *y);
            let (count, precision, undefined) = precision_of(kept);
            ThresholdCurvePoint {
                threshold: t,
                retained_count: count,
                retained_fraction: count as f64 / n,
                precision,
                precision_undefined: undefined,
            }
        })
        .collect())
}

/// Precision of the top `fraction` of instances by score.
///
/// The retained count is `round(fraction · n)`; equal scores are broken by
/// input position. Returns `None` if that count is zero.
pub fn precision_at_retention(scores: &[f64], labels: &[u8], fraction: f64) -> Option<f64> {
    let m = (fraction.clamp(0.0, 1.0) * labels.len() as f64).round() as usize;
    if m == 0 || scores.len() != labels.len() {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let pos = idx[..m].iter().filter(|&&i| labels[i] == 1).count();
    Some(pos as f64 / m as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselinePoint {
    pub fraction: f64,
    pub retained_count: usize,
    pub precision: f64,
    pub precision_undefined: bool,
}

impl Validate for BaselinePoint {
    fn check(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.fraction) || !(0.0..=1.0).contains(&self.precision) {
            return Err("fraction and precision must lie in [0,1]".into());
        }
        Ok(())
    }
}

/// Mean precision of uniformly random retention of `round(f · n)` instances.
pub fn random_baseline(
    labels: &[u8],
    fractions: &[f64],
    repetitions: usize,
    seed: u64,
) -> Result<Vec<BaselinePoint>, FilterError> {
    if labels.is_empty() {
        return Err(FilterError::Empty);
    }
    let n = labels.len();
    Ok(fractions
        .iter()
        .enumerate()
        .map(|(fi, &f)| {
            let m = (f.clamp(0.0, 1.0) * n as f64).round() as usize;
            if m == 0 {
                return BaselinePoint {
                    fraction: f,
                    retained_count: 0,
                    precision: 0.0,
                    precision_undefined: true,
                };
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["baseline", &fi.to_string()]));
            let reps = repetitions.max(1);
            let total: f64 = (0..reps)
                .map(|_| {
                    let pos = sample(&mut rng, n, m).iter().filter(|&i| labels[i] == 1).count();
                    pos as f64 / m as f64
                })
                .sum();
            BaselinePoint {
                fraction: f,
                retained_count: m,
                precision: total / reps as f64,
                precision_undefined: false,
            }
        })
        .collect())
}

pub fn curve_to_csv(curve: &[ThresholdCurvePoint]) -> String {
    let mut s = String::from("threshold,retained_count,retained_fraction,precision\n");
    for p in curve {
        let precision = if p.precision_undefined {
            String::new()
        } else {
            format!("{:.6}", p.precision)
        };
        let _ = writeln!(s, "{:.2},{},{:.6},{}", p.threshold, p.retained_count, p.retained_fraction, precision);
    }
    s
}

/// Plot-ready JSON: parallel arrays plus the raw points.
pub fn curve_to_json(curve: &[ThresholdCurvePoint], baseline: &[BaselinePoint]) -> serde_json::Value {
    json!({
        "x_retained_fraction": curve.iter().map(|p| p.retained_fraction).collect::<Vec<_>>(),
        "y_precision": curve.iter().map(|p| if p.precision_undefined { None } else { Some(p.precision) }).collect::<Vec<_>>(),
        "points": curve,
        "random_baseline": baseline,
    })
}

pub fn curve_table(curve: &[ThresholdCurvePoint]) -> String {
    let mut s = format!("{:>9} {:>9} {:>9} {:>9}\n", "threshold", "retained", "fraction", "precision");
    for p in curve {
        let prec = if p.precision_undefined { "-".to_string() } else { format!("{:.3}", p.precision) };
        let _ = writeln!(s, "{:>9.2} {:>9} {:>9.3} {:>9}", p.threshold, p.retained_count, p.retained_fraction, prec);
    }
    s
}

/// Anything that assigns an acceptability score to a QAR in context.
pub trait Scorer {
    fn score(&self, instance: &QarInstance, bundle: &VerbalizationBundle) -> Result<f64, FilterError>;
    fn version(&self) -> String;
}

/// The built-in critic over embedding-backend features.
pub struct CriticScorer<'a> {
    pub params: &'a CriticParams,
    pub embed: &'a dyn EmbedBackend,
}

impl Scorer for CriticScorer<'_> {
    fn score(&self, instance: &QarInstance, bundle: &VerbalizationBundle) -> Result<f64, FilterError> {
        let x = featurize(instance, bundle, self.embed)?;
        Ok(self.params.score(&x)?)
    }

    fn version(&self) -> String {
        self.params.version()
    }
}

/// Payload sent to `/v1/score`: the QAR text and its full descriptor context.
pub fn score_payload(instance: &QarInstance, bundle: &VerbalizationBundle) -> serde_json::Value {
    json!({
        "instance_id": instance.instance_id,
        "mode": instance.mode.as_str(),
        "question": instance.question,
        "answer": instance.answer,
        "rationale": instance.rationale,
        "text": instance.qar_text(),
        "context": render_context(bundle, instance.mode, &DescriptorMask::all()),
    })
}

/// An external scorer behind the backend protocol.
pub struct RemoteScorer<'a> {
    pub backend: &'a dyn ScoreBackend,
    pub name: String,
}

impl Scorer for RemoteScorer<'_> {
    fn score(&self, instance: &QarInstance, bundle: &VerbalizationBundle) -> Result<f64, FilterError> {
        let s = self
            .backend
            .score(&ScoreRequest {
                payload: score_payload(instance, bundle),
            })
            .map_err(|e| FilterError::Scorer(e.to_string()))?
            .score;
        if !s.is_finite() {
            return Err(FilterError::NonFinite(instance.instance_id.clone()));
        }
        Ok(s.clamp(0.0, 1.0))
    }

    fn version(&self) -> String {
        self.name.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub descriptors: String,
    pub mean_score: f64,
    pub count: usize,
}

/// Regenerate QARs with only the masked-in descriptors in the prompt and
/// report their mean score.
///
/// The scorer always sees the full context, so removing a descriptor the
/// scorer values lowers the mean.
pub fn descriptor_ablation_score(
    images: &[(VerbalizationBundle, ImageRecord)],
    mask: &DescriptorMask,
    modes: &[ReferenceMode],
    cfg: &GenerationConfig,
    templates: &PromptTemplates,
    llm: &dyn ChatBackend,
    scorer: &dyn Scorer,
) -> Result<AblationResult, FilterError> {
    if mask.is_empty() {
        return Err(FilterError::EmptyMask);
    }
    let mut total = 0.0;
    let mut count = 0;
    for (bundle, image) in images {
        for &mode in modes {
            if mode == ReferenceMode::IdBased && bundle.region_boxes.is_empty() {
                continue;
            }
            let out = run_generation(bundle, image, mode, cfg, templates, mask, llm)?;
            for inst in &out.instances {
                total += scorer.score(inst, bundle)?;
                count += 1;
            }
        }
    }
    Ok(AblationResult {
        descriptors: mask.label(),
        mean_score: if count == 0 { 0.0 } else { total / count as f64 },
        count,
    })
}
