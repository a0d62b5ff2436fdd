//! Downsampling detector proposals to a handful of "interesting" regions.
//!
//! The rules run in a fixed order:
//!
//! 1. keep at most `max_people` person proposals, best by [`region_score`];
//! 2. rank the remaining proposals by `region_score × rarity_weight`;
//! 3. keep at most `per_class_cap` proposals of any non-person class;
//! 4. greedily suppress any proposal overlapping an already kept, higher
//!    ranked one with IoU above `overlap_iou`;
//! 5. truncate to `max_regions`.
//!
//! Survivors are re-indexed `0..n` in descending score.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BoxGeometry, Region};

/// Proposals per image the detector is allowed to emit.
pub const MAX_PROPOSALS: usize = 300;

/// Distance from the image center to a corner in normalized coordinates.
const MAX_CENTER_DISTANCE: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[derive(Debug, Error, PartialEq)]
pub enum CurationError {
    #[error("{0} proposals exceeds the limit of {MAX_PROPOSALS}")]
    TooManyProposals(usize),
    #[error("invalid curation config: {0}")]
    InvalidConfig(&'static str),
    #[error("proposal {index}: {reason}")]
    InvalidProposal { index: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawProposal {
    #[serde(rename = "box")]
    pub bbox: BoxGeometry,
    pub class_label: String,
    pub confidence: f64,
    pub class_prior_frequency: f64,
}

/// One line of the detector input file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorRecord {
    pub image_id: String,
    pub width_px: u32,
    pub height_px: u32,
    pub proposals: Vec<RawProposal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_uri: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurationConfig {
    pub max_people: usize,
    pub per_class_cap: usize,
    pub overlap_iou: f64,
    pub max_regions: usize,
    pub size_centrality_blend: f64,
    pub rarity_temperature: f64,
    pub seed: u64,
    /// Class labels treated as people.
    pub person_labels: Vec<String>,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            max_people: 4,
            per_class_cap: 2,
            overlap_iou: 0.7,
            max_regions: 10,
            size_centrality_blend: 0.5,
            rarity_temperature: 1.0,
            seed: 0,
            person_labels: vec!["person".into()],
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<(), CurationError> {
        if !(0.0..=1.0).contains(&self.size_centrality_blend) {
            return Err(CurationError::InvalidConfig("size_centrality_blend must be in [0,1]"));
        }
        if !(self.rarity_temperature > 0.0 && self.rarity_temperature.is_finite()) {
            return Err(CurationError::InvalidConfig("rarity_temperature must be positive"));
        }
        if !(0.0..=1.0).contains(&self.overlap_iou) {
            return Err(CurationError::InvalidConfig("overlap_iou must be in [0,1]"));
        }
        Ok(())
    }

    pub fn is_person(&self, label: &str) -> bool {
        self.person_labels.iter().any(|p| p.eq_ignore_ascii_case(label))
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BoxGeometry, b: &BoxGeometry) -> f64 {
    let ix = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let iy = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// `1` at the image center falling linearly to `0` at a corner.
pub fn centrality(b: &BoxGeometry) -> f64 {
    let (cx, cy) = b.center();
    let d = ((cx - 0.5).powi(2) + (cy - 0.5).powi(2)).sqrt();
    (1.0 - d / MAX_CENTER_DISTANCE).clamp(0.0, 1.0)
}

/// Size/centrality blend `α·area + (1−α)·centrality`.
pub fn region_score(b: &BoxGeometry, alpha: f64) -> f64 {
    alpha * b.area() + (1.0 - alpha) * centrality(b)
}

pub fn rarity_weight(class_prior_frequency: f64, temperature: f64) -> f64 {
    (1.0 / (1.0 + class_prior_frequency.max(0.0))).powf(1.0 / temperature)
}

#[derive(Debug, Clone)]
struct Candidate<'a> {
    index: usize,
    proposal: &'a RawProposal,
    score: f64,
    is_person: bool,
}

fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| b.proposal.confidence.total_cmp(&a.proposal.confidence))
        .then_with(|| a.proposal.class_label.cmp(&b.proposal.class_label))
        .then_with(|| a.index.cmp(&b.index))
}

fn check_proposal(index: usize, p: &RawProposal) -> Result<(), CurationError> {
    let bad = |reason: String| CurationError::InvalidProposal { index, reason };
    p.bbox.validate().map_err(|e| bad(e.to_string()))?;
    if !(0.0..=1.0).contains(&p.confidence) {
        return Err(bad(format!("confidence {} out of [0,1]", p.confidence)));
    }
    if !(p.class_prior_frequency >= 0.0 && p.class_prior_frequency.is_finite()) {
        return Err(bad("class_prior_frequency must be a non-negative number".into()));
    }
    Ok(())
}

/// Apply the curation rules; see the module docs for the order.
pub fn curate_regions(
    proposals: &[RawProposal],
    cfg: &CurationConfig,
) -> Result<Vec<Region>, CurationError> {
    cfg.validate()?;
    if proposals.len() > MAX_PROPOSALS {
        return Err(CurationError::TooManyProposals(proposals.len()));
    }
    for (i, p) in proposals.iter().enumerate() {
        check_proposal(i, p)?;
    }

    let alpha = cfg.size_centrality_blend;
    let (mut people, mut others): (Vec<_>, Vec<_>) = proposals
        .iter()
        .enumerate()
        .map(|(index, proposal)| {
            let is_person = cfg.is_person(&proposal.class_label);
            let base = region_score(&proposal.bbox, alpha);
            let score = if is_person {
                base
            } else {
                base * rarity_weight(proposal.class_prior_frequency, cfg.rarity_temperature)
            };
            Candidate {
                index,
                proposal,
                score,
                is_person,
            }
        })
        .partition(|c| c.is_person);

    people.sort_by(rank);
    people.truncate(cfg.max_people);

    others.sort_by(rank);
    let mut per_class: BTreeMap<&str, usize> = BTreeMap::new();
    others.retain(|c| {
        let n = per_class.entry(c.proposal.class_label.as_str()).or_default();
        *n += 1;
        *n <= cfg.per_class_cap
    });

    let mut pool = people;
    pool.extend(others);
    pool.sort_by(rank);

    let mut kept: Vec<Candidate> = Vec::new();
    for c in pool {
        if kept.len() == cfg.max_regions {
            break;
        }
        if kept
            .iter()
            .all(|k| iou(&k.proposal.bbox, &c.proposal.bbox) <= cfg.overlap_iou)
        {
            kept.push(c);
        }
    }

    Ok(kept
        .into_iter()
        .enumerate()
        .map(|(id, c)| Region {
            region_id: id as u32,
            bbox: c.proposal.bbox,
            class_label: c.proposal.class_label.clone(),
            detector_confidence: c.proposal.confidence,
            is_person: c.is_person,
        })
        .collect())
}
