//! Canonical record types shared by every pipeline stage, plus their validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mentions::has_bracket_ids;

/// Upper bound on region IDs a single QAR may mention.
pub const MAX_MENTIONS: usize = 5;

const BOX_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid box ({x}, {y}, {w}, {h}): {reason}")]
    InvalidBox {
        x: f64,
        y: f64,
        w: f64,
        h: f64,
        reason: &'static str,
    },
    #[error("instance belongs to image {instance} but was checked against image {image}")]
    ImageMismatch { instance: String, image: String },
}

/// Axis-aligned box in fractions of image width/height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxGeometry {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxGeometry {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, ModelError> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    /// Clip an arbitrary detector box into the unit square.
    ///
    /// Fails only when nothing of positive area is left.
    pub fn clamped(x: f64, y: f64, w: f64, h: f64) -> Result<Self, ModelError> {
        let x0 = x.clamp(0.0, 1.0);
        let y0 = y.clamp(0.0, 1.0);
        let x1 = (x + w).clamp(0.0, 1.0);
        let y1 = (y + h).clamp(0.0, 1.0);
        Self::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |reason| ModelError::InvalidBox {
            x: self.x,
            y: self.y,
            w: self.w,
            h: self.h,
            reason,
        };
        if ![self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) {
            return Err(err("non-finite coordinate"));
        }
        if self.x < 0.0 || self.y < 0.0 {
            return Err(err("negative origin"));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(err("non-positive extent"));
        }
        if self.x + self.w > 1.0 + BOX_EPS || self.y + self.h > 1.0 + BOX_EPS {
            return Err(err("extends past the image edge"));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub region_id: u32,
    #[serde(rename = "box")]
    pub bbox: BoxGeometry,
    pub class_label: String,
    pub detector_confidence: f64,
    pub is_person: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub width_px: u32,
    pub height_px: u32,
    pub source_uri: String,
    pub regions: Vec<Region>,
}

impl ImageRecord {
    pub fn region(&self, id: u32) -> Option<&Region> {
        self.regions.iter().find(|r| r.region_id == id)
    }

    pub fn region_ids(&self) -> BTreeSet<u32> {
        self.regions.iter().map(|r| r.region_id).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeQa {
    pub question: String,
    pub answer: String,
}

/// Full text rendering of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerbalizationBundle {
    pub image_id: String,
    pub places: Vec<String>,
    pub objects: Vec<String>,
    pub concepts: Vec<String>,
    pub narratives: Vec<String>,
    pub region_captions: BTreeMap<u32, String>,
    pub probe_qas: Vec<ProbeQa>,
    /// Box of every captioned region, needed to list coordinates in ID-based prompts.
    pub region_boxes: BTreeMap<u32, BoxGeometry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ReferenceMode {
    IdBased,
    DescriptionBased,
}

impl ReferenceMode {
    pub const ALL: [ReferenceMode; 2] = [ReferenceMode::IdBased, ReferenceMode::DescriptionBased];

    pub fn as_str(&self) -> &'static str {
        match self {
            ReferenceMode::IdBased => "id",
            ReferenceMode::DescriptionBased => "desc",
        }
    }
}

impl fmt::Display for ReferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReferenceMode::IdBased => "IdBased",
            ReferenceMode::DescriptionBased => "DescriptionBased",
        })
    }
}

/// One localized question/answer/rationale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QarInstance {
    pub instance_id: String,
    pub image_id: String,
    pub mode: ReferenceMode,
    pub question: String,
    pub answer: String,
    pub rationale: String,
    pub mentioned_ids: BTreeSet<u32>,
    pub generation_round: u32,
    pub turn: u32,
    pub raw_llm_text: String,
}

impl QarInstance {
    /// Question, answer and rationale joined into one text unit.
    pub fn qar_text(&self) -> String {
        format!("{} {} {}", self.question, self.answer, self.rationale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatorRating {
    pub qa_rating: u8,
    pub qar_rating: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticLabel {
    pub instance_id: String,
    pub annotator_ratings: Vec<AnnotatorRating>,
    pub binary_accept: u8,
    pub y_qa: f64,
    pub y_qar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticScore {
    pub instance_id: String,
    pub score: f64,
    pub model_version: String,
}

/// A single broken QAR invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyField(&'static str),
    IdModeWithoutMentions,
    TooManyMentions(usize),
    DescriptionModeWithMentions,
    UnknownRegion(u32),
    BadRoundOrTurn,
}

impl Violation {
    /// Stable rule name used by drop counters.
    pub fn rule(&self) -> &'static str {
        match self {
            Violation::EmptyField(_) => "empty_field",
            Violation::IdModeWithoutMentions => "id_mode_without_mentions",
            Violation::TooManyMentions(_) => "too_many_mentions",
            Violation::DescriptionModeWithMentions => "description_mode_with_ids",
            Violation::UnknownRegion(_) => "unknown_region_id",
            Violation::BadRoundOrTurn => "bad_round_or_turn",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyField(name) => write!(f, "{name} is empty"),
            Violation::IdModeWithoutMentions => f.write_str("id-mode requires ≥1 mention"),
            Violation::TooManyMentions(n) => write!(f, "exceeds {MAX_MENTIONS} mentions ({n})"),
            Violation::DescriptionModeWithMentions => {
                f.write_str("description-mode text must not mention region ids")
            }
            Violation::UnknownRegion(id) => write!(f, "region [{id}] does not exist in the image"),
            Violation::BadRoundOrTurn => f.write_str("generation round and turn start at 1"),
        }
    }
}

/// Invariants that hold for a QAR on its own, independent of its image.
pub fn intrinsic_violations(instance: &QarInstance) -> Vec<Violation> {
    let mut out = Vec::new();
    for (name, text) in [
        ("question", &instance.question),
        ("answer", &instance.answer),
        ("rationale", &instance.rationale),
    ] {
        if text.trim().is_empty() {
            out.push(Violation::EmptyField(name));
        }
    }
    let n = instance.mentioned_ids.len();
    if n > MAX_MENTIONS {
        out.push(Violation::TooManyMentions(n));
    }
    match instance.mode {
        ReferenceMode::IdBased if n == 0 => out.push(Violation::IdModeWithoutMentions),
        ReferenceMode::DescriptionBased => {
            let text_has_ids = [&instance.question, &instance.answer, &instance.rationale]
                .iter()
                .any(|t| has_bracket_ids(t));
            if n > 0 || text_has_ids {
                out.push(Violation::DescriptionModeWithMentions);
            }
        }
        _ => {}
    }
    if instance.generation_round == 0 || instance.turn == 0 {
        out.push(Violation::BadRoundOrTurn);
    }
    out
}

/// Check a QAR against the image it claims to describe.
///
/// An empty list means the instance is valid. A mismatched `image_id` is an
/// error rather than a violation.
pub fn validate_qar(
    instance: &QarInstance,
    image: &ImageRecord,
) -> Result<Vec<Violation>, ModelError> {
    if instance.image_id != image.image_id {
        return Err(ModelError::ImageMismatch {
            instance: instance.image_id.clone(),
            image: image.image_id.clone(),
        });
    }
    let mut out = intrinsic_violations(instance);
    let known = image.region_ids();
    out.extend(
        instance
            .mentioned_ids
            .iter()
            .filter(|id| !known.contains(id))
            .map(|id| Violation::UnknownRegion(*id)),
    );
    Ok(out)
}

/// Schema-level checks applied before a record is persisted.
pub trait Validate {
    fn check(&self) -> Result<(), String>;
}

impl Validate for QarInstance {
    fn check(&self) -> Result<(), String> {
        match intrinsic_violations(self).first() {
            Some(v) => Err(v.to_string()),
            None => Ok(()),
        }
    }
}

impl Validate for ImageRecord {
    fn check(&self) -> Result<(), String> {
        if self.image_id.is_empty() {
            return Err("image_id is empty".into());
        }
        if self.width_px == 0 || self.height_px == 0 {
            return Err("image dimensions must be positive".into());
        }
        for (i, r) in self.regions.iter().enumerate() {
            r.bbox.validate().map_err(|e| e.to_string())?;
            if r.region_id as usize != i {
                return Err(format!("region ids must be 0..n-1, found {} at {i}", r.region_id));
            }
            if !(0.0..=1.0).contains(&r.detector_confidence) {
                return Err(format!("region {i} confidence out of [0,1]"));
            }
        }
        Ok(())
    }
}

impl Validate for VerbalizationBundle {
    fn check(&self) -> Result<(), String> {
        if self.image_id.is_empty() {
            return Err("image_id is empty".into());
        }
        if let Some(id) = self.region_captions.keys().find(|id| !self.region_boxes.contains_key(id))
        {
            return Err(format!("caption for region {id} has no box"));
        }
        for b in self.region_boxes.values() {
            b.validate().map_err(|e| e.to_string())?;
        }
        Ok(())
    }
}

fn valid_rating(r: u8) -> bool {
    (1..=3).contains(&r)
}

impl Validate for CriticLabel {
    fn check(&self) -> Result<(), String> {
        if self.binary_accept > 1 {
            return Err("binary_accept must be 0 or 1".into());
        }
        for y in [self.y_qa, self.y_qar] {
            if !(0.0..=1.0).contains(&y) {
                return Err("regression targets must lie in [0,1]".into());
            }
        }
        for r in &self.annotator_ratings {
            if !valid_rating(r.qa_rating) || r.qar_rating.is_some_and(|q| !valid_rating(q)) {
                return Err("ratings must be in {1,2,3}".into());
            }
        }
        Ok(())
    }
}

impl Validate for CriticScore {
    fn check(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(format!("score {} out of [0,1]", self.score));
        }
        Ok(())
    }
}

impl Validate for serde_json::Value {
    fn check(&self) -> Result<(), String> {
        Ok(())
    }
}
