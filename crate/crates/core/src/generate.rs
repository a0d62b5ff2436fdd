//! QAR generation: prompt construction, multi-turn conversations and
//! parsing of the labeled Question/Answer/Rationale replies.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ChatBackend, ChatMessage, ChatRequest};
use crate::mentions::extract_id_mentions;
use crate::model::{validate_qar, ImageRecord, QarInstance, ReferenceMode, Validate, VerbalizationBundle};
use crate::util::{derive_seed, sha256_hex};
use crate::verbalize::{render_context, DescriptorMask};

pub const DEFAULT_ID_TEMPLATE: &str = include_str!("../templates/qar_id.txt");
pub const DEFAULT_DESC_TEMPLATE: &str = include_str!("../templates/qar_desc.txt");
pub const DEFAULT_FOLLOWUP: &str = include_str!("../templates/followup.txt");

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("id-based prompts need at least one region (image {0})")]
    NoRegions(String),
    #[error("template `{0}` lacks the {{context}} placeholder")]
    BadTemplate(&'static str),
    #[error("invalid generation config: {0}")]
    InvalidConfig(&'static str),
    #[error("backend failed after {} partial instance(s): {source}", partial.instances.len())]
    Backend {
        source: BackendError,
        partial: Box<GenerationOutcome>,
    },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("missing: {}", missing.join(", "))]
pub struct ParseError {
    pub missing: Vec<&'static str>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub rounds_per_mode: u32,
    pub qars_per_round: u32,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            rounds_per_mode: 3,
            qars_per_round: 3,
            temperature: 0.8,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), GenerateError> {
        if self.rounds_per_mode == 0 {
            return Err(GenerateError::InvalidConfig("rounds_per_mode must be at least 1"));
        }
        if self.qars_per_round == 0 {
            return Err(GenerateError::InvalidConfig("qars_per_round must be at least 1"));
        }
        Ok(())
    }
}

/// Prompt wording; each template is a plain text file with a `{context}` slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub id_based: String,
    pub description_based: String,
    pub followup: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            id_based: DEFAULT_ID_TEMPLATE.to_string(),
            description_based: DEFAULT_DESC_TEMPLATE.to_string(),
            followup: DEFAULT_FOLLOWUP.to_string(),
        }
    }
}

impl PromptTemplates {
    pub fn validate(&self) -> Result<(), GenerateError> {
        if !self.id_based.contains("{context}") {
            return Err(GenerateError::BadTemplate("id_based"));
        }
        if !self.description_based.contains("{context}") {
            return Err(GenerateError::BadTemplate("description_based"));
        }
        Ok(())
    }

    /// Digest over all three templates, recorded with the run config.
    pub fn digest(&self) -> String {
        let joined = format!(
            "{}\u{0}{}\u{0}{}",
            self.id_based, self.description_based, self.followup
        );
        sha256_hex(joined.as_bytes())
    }

    fn for_mode(&self, mode: ReferenceMode) -> &str {
        match mode {
            ReferenceMode::IdBased => &self.id_based,
            ReferenceMode::DescriptionBased => &self.description_based,
        }
    }
}

pub fn build_prompt(
    bundle: &VerbalizationBundle,
    mode: ReferenceMode,
    templates: &PromptTemplates,
    mask: &DescriptorMask,
) -> Result<String, GenerateError> {
    if mode == ReferenceMode::IdBased && bundle.region_boxes.is_empty() {
        return Err(GenerateError::NoRegions(bundle.image_id.clone()));
    }
    let context = render_context(bundle, mode, mask);
    Ok(templates.for_mode(mode).replace("{context}", &context).trim_end().to_string())
}

static LABEL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?im)^[ \t*#]*(question|answer|rationale)[ \t*]*:[ \t*]*").unwrap());

/// Pull the three labeled fields out of an LLM reply.
///
/// Labels are matched case-insensitively at line starts, in any order; a
/// field runs until the next label. When a label repeats, the first wins.
pub fn parse_qar_block(text: &str) -> Result<(String, String, String), ParseError> {
    let marks: Vec<(usize, usize, String)> = LABEL
        .captures_iter(text)
        .map(|c| {
            let m = c.get(0).unwrap();
            (m.start(), m.end(), c[1].to_lowercase())
        })
        .collect();
    let mut fields: BTreeMap<String, String> = BTreeMap::new();
    for (i, (_, end, label)) in marks.iter().enumerate() {
        let stop = marks.get(i + 1).map_or(text.len(), |m| m.0);
        let value = text[*end..stop].trim().to_string();
        if !value.is_empty() {
            fields.entry(label.clone()).or_insert(value);
        }
    }
    let missing: Vec<&'static str> = ["question", "answer", "rationale"]
        .into_iter()
        .filter(|k| !fields.contains_key(*k))
        .collect();
    if !missing.is_empty() {
        return Err(ParseError { missing });
    }
    Ok((
        fields.remove("question").unwrap(),
        fields.remove("answer").unwrap(),
        fields.remove("rationale").unwrap(),
    ))
}

/// A generated turn that did not become an instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropRecord {
    pub image_id: String,
    pub mode: ReferenceMode,
    pub generation_round: u32,
    pub turn: u32,
    pub rule: String,
    pub detail: String,
    pub raw_llm_text: String,
}

impl Validate for DropRecord {
    fn check(&self) -> Result<(), String> {
        if self.rule.is_empty() {
            return Err("drop without a rule".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GenerationOutcome {
    pub instances: Vec<QarInstance>,
    pub drops: Vec<DropRecord>,
}

impl GenerationOutcome {
    /// Drop count per rule name.
    pub fn drop_counts(&self) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for d in &self.drops {
            *out.entry(d.rule.clone()).or_insert(0) += 1;
        }
        out
    }

    pub fn extend(&mut self, other: GenerationOutcome) {
        self.instances.extend(other.instances);
        self.drops.extend(other.drops);
    }
}

pub fn instance_id(image_id: &str, mode: ReferenceMode, round: u32, turn: u32) -> String {
    format!("{image_id}-{}-r{round}-t{turn}", mode.as_str())
}

/// Turn one reply into an instance, or the reason it was dropped.
pub fn interpret_reply(
    raw: &str,
    image: &ImageRecord,
    mode: ReferenceMode,
    round: u32,
    turn: u32,
) -> Result<QarInstance, (String, String)> {
    let (question, answer, rationale) =
        parse_qar_block(raw).map_err(|e| ("unparseable".to_string(), e.to_string()))?;
    let mentioned_ids = match mode {
        ReferenceMode::IdBased => extract_id_mentions(&format!("{question}\n{answer}\n{rationale}")),
        ReferenceMode::DescriptionBased => Default::default(),
    };
    let inst = QarInstance {
        instance_id: instance_id(&image.image_id, mode, round, turn),
        image_id: image.image_id.clone(),
        mode,
        question,
        answer,
        rationale,
        mentioned_ids,
        generation_round: round,
        turn,
        raw_llm_text: raw.to_string(),
    };
    let violations = validate_qar(&inst, image).map_err(|e| ("image_mismatch".to_string(), e.to_string()))?;
    match violations.first() {
        Some(v) => Err((v.rule().to_string(), v.to_string())),
        None => Ok(inst),
    }
}

/// Run `rounds_per_mode` independent conversations for one image and mode.
///
/// Within a conversation each turn sees every earlier reply and is asked for
/// a different QAR. Invalid replies are dropped and recorded; a backend
/// failure aborts with everything gathered so far.
pub fn run_generation(
    bundle: &VerbalizationBundle,
    image: &ImageRecord,
    mode: ReferenceMode,
    cfg: &GenerationConfig,
    templates: &PromptTemplates,
    mask: &DescriptorMask,
    llm: &dyn ChatBackend,
) -> Result<GenerationOutcome, GenerateError> {
    cfg.validate()?;
    let prompt = build_prompt(bundle, mode, templates, mask)?;
    let mut out = GenerationOutcome::default();
    for round in 1..=cfg.rounds_per_mode {
        let conv_seed = derive_seed(cfg.seed, &[&image.image_id, mode.as_str(), &round.to_string()]);
        let mut messages = vec![ChatMessage::user(prompt.clone())];
        for turn in 1..=cfg.qars_per_round {
            if turn > 1 {
                messages.push(ChatMessage::user(templates.followup.trim_end()));
            }
            let req = ChatRequest {
                messages: messages.clone(),
                temperature: cfg.temperature,
                seed: Some(derive_seed(conv_seed, &[&turn.to_string()])),
            };
            let raw = match llm.chat(&req) {
                Ok(r) => r.text,
                Err(source) => {
                    return Err(GenerateError::Backend {
                        source,
                        partial: Box::new(out),
                    })
                }
            };
            match interpret_reply(&raw, image, mode, round, turn) {
                Ok(inst) => out.instances.push(inst),
                Err((rule, detail)) => out.drops.push(DropRecord {
                    image_id: image.image_id.clone(),
                    mode,
                    generation_round: round,
                    turn,
                    rule,
                    detail,
                    raw_llm_text: raw.clone(),
                }),
            }
            messages.push(ChatMessage::assistant(raw));
        }
    }
    Ok(out)
}
