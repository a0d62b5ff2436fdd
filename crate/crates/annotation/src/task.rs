//! Task, rating and vote records plus the two aggregation rules.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use qarsmith_core::critic::{derive_labels, CriticError};
use qarsmith_core::model::{AnnotatorRating, CriticLabel, ReferenceMode, Validate};

pub const DEFAULT_REQUIRED_ANNOTATORS: usize = 2;
pub const DEFAULT_REQUIRED_VOTES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Rating,
    Pairwise,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Rating => "rating",
            TaskKind::Pairwise => "pairwise",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rating" => Some(TaskKind::Rating),
            "pairwise" => Some(TaskKind::Pairwise),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Open,
    Complete,
}

/// A QAR shown to annotators for the two-criterion rating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingTask {
    pub task_id: String,
    pub instance_id: String,
    pub image_id: String,
    pub mode: ReferenceMode,
    pub render_uri: String,
    pub question: String,
    pub answer: String,
    pub rationale: String,
    pub required_annotators: usize,
}

pub fn rating_task_id(instance_id: &str) -> String {
    format!("rating-{instance_id}")
}

impl Validate for RatingTask {
    fn check(&self) -> Result<(), String> {
        if self.task_id != rating_task_id(&self.instance_id) {
            return Err(format!("task id {} does not match instance", self.task_id));
        }
        if self.required_annotators == 0 {
            return Err("required_annotators must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Correctness,
    Informativeness,
    Plausibility,
    Overall,
}

impl Criterion {
    pub const ALL: [Criterion; 4] = [
        Criterion::Correctness,
        Criterion::Informativeness,
        Criterion::Plausibility,
        Criterion::Overall,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::Correctness => "correctness",
            Criterion::Informativeness => "informativeness",
            Criterion::Plausibility => "plausibility",
            Criterion::Overall => "overall",
        }
    }
}

/// Input for one head-to-head comparison, in source order: `response_a`
/// is always system A regardless of how it is displayed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseItem {
    pub item_id: String,
    pub image_uri: String,
    pub question: String,
    pub response_a: String,
    pub response_b: String,
    pub criterion: Criterion,
}

pub fn pairwise_task_id(item_id: &str, criterion: Criterion) -> String {
    format!("pair-{item_id}-{}", criterion.as_str())
}

/// A comparison task. Responses are stored in source order; `swapped`
/// says whether annotators see them the other way round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTask {
    pub task_id: String,
    pub item_id: String,
    pub image_uri: String,
    pub question: String,
    pub response_a: String,
    pub response_b: String,
    pub criterion: Criterion,
    pub randomized_order_seed: u64,
    pub swapped: bool,
    pub required_votes: usize,
}

impl PairwiseTask {
    /// Responses in display order.
    pub fn displayed(&self) -> (&str, &str) {
        if self.swapped {
            (&self.response_b, &self.response_a)
        } else {
            (&self.response_a, &self.response_b)
        }
    }

    /// Map a choice on the displayed pair back to source order.
    pub fn to_source(&self, shown: Choice) -> Choice {
        match (self.swapped, shown) {
            (true, Choice::A) => Choice::B,
            (true, Choice::B) => Choice::A,
            (_, c) => c,
        }
    }
}

impl Validate for PairwiseTask {
    fn check(&self) -> Result<(), String> {
        if self.task_id != pairwise_task_id(&self.item_id, self.criterion) {
            return Err(format!("task id {} does not match item", self.task_id));
        }
        if self.required_votes == 0 {
            return Err("required_votes must be positive".into());
        }
        if self.swapped != (self.randomized_order_seed & 1 == 1) {
            return Err("presentation order disagrees with its seed".into());
        }
        Ok(())
    }
}

fn check_rating_value(r: u8) -> Result<(), String> {
    if (1..=3).contains(&r) {
        Ok(())
    } else {
        Err(format!("rating {r} is outside 1..=3"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rating {
    pub task_id: String,
    pub annotator_id: String,
    pub qa_rating: u8,
    #[serde(default)]
    pub qar_rating: Option<u8>,
}

impl Rating {
    pub fn as_annotator_rating(&self) -> AnnotatorRating {
        AnnotatorRating {
            qa_rating: self.qa_rating,
            qar_rating: self.qar_rating,
        }
    }
}

impl Validate for Rating {
    fn check(&self) -> Result<(), String> {
        if self.annotator_id.is_empty() {
            return Err("annotator_id is empty".into());
        }
        check_rating_value(self.qa_rating)?;
        match self.qar_rating {
            Some(_) if self.qa_rating == 1 => {
                Err("qar_rating must be absent when the qa is rejected".into())
            }
            Some(q) => check_rating_value(q),
            None if self.qa_rating != 1 => Err("qar_rating is required unless the qa is rejected".into()),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Choice {
    A,
    B,
    Tie,
}

/// A vote as cast on the displayed pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub task_id: String,
    pub annotator_id: String,
    pub choice: Choice,
}

/// Stored form of a vote: the displayed choice and its source-order meaning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub task_id: String,
    pub annotator_id: String,
    pub shown_choice: Choice,
    pub source_choice: Choice,
}

impl Validate for VoteRecord {
    fn check(&self) -> Result<(), String> {
        if self.annotator_id.is_empty() {
            return Err("annotator_id is empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    A,
    B,
    Tie,
    Discarded,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VoteError {
    #[error("expected {expected} votes, got {actual}")]
    Count { expected: usize, actual: usize },
}

/// The choice backed by a strict majority of `required` votes, else `Discarded`.
pub fn majority_vote(votes: &[Choice], required: usize) -> Result<Verdict, VoteError> {
    if votes.len() != required {
        return Err(VoteError::Count {
            expected: required,
            actual: votes.len(),
        });
    }
    let count = |c: Choice| votes.iter().filter(|&&v| v == c).count();
    let need = required / 2 + 1;
    Ok(if count(Choice::A) >= need {
        Verdict::A
    } else if count(Choice::B) >= need {
        Verdict::B
    } else if count(Choice::Tie) >= need {
        Verdict::Tie
    } else {
        Verdict::Discarded
    })
}

/// Aggregated outcome of a complete pairwise task, in source order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseVerdict {
    pub task_id: String,
    pub item_id: String,
    pub criterion: Criterion,
    pub swapped: bool,
    pub source_votes: Vec<Choice>,
    pub verdict: Verdict,
}

impl Validate for PairwiseVerdict {
    fn check(&self) -> Result<(), String> {
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error("task {task_id} has {have} of {need} ratings")]
    Incomplete { task_id: String, have: usize, need: usize },
    #[error(transparent)]
    Critic(#[from] CriticError),
}

/// Critic label of a complete rating task; the rule itself lives in
/// [`derive_labels`].
pub fn aggregate_ratings(task: &RatingTask, ratings: &[Rating]) -> Result<CriticLabel, AggregateError> {
    if ratings.len() < task.required_annotators {
        return Err(AggregateError::Incomplete {
            task_id: task.task_id.clone(),
            have: ratings.len(),
            need: task.required_annotators,
        });
    }
    let rs: Vec<AnnotatorRating> = ratings.iter().map(Rating::as_annotator_rating).collect();
    Ok(derive_labels(&task.instance_id, &rs)?)
}
