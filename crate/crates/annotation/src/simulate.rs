//! Scripted annotators for mock runs.
//!
//! They reject QARs that mention one of the mock backend's hallucination
//! words missing from the image context, and otherwise mostly accept with
//! some seeded noise.

use std::collections::BTreeMap;

use qarsmith_core::backend::mock::HALLUCINATED_WORDS;
use qarsmith_core::util::{derive_seed, word_tokens};

use crate::service::{AnnotationService, ServiceError};
use crate::task::{Rating, RatingTask, TaskKind};

#[derive(Debug, Clone)]
pub struct SimulatedAnnotators {
    pub ids: Vec<String>,
    /// Verbalized context per image id.
    pub contexts: BTreeMap<String, String>,
    /// Probability that a grounded QAR is rejected anyway.
    pub noise: f64,
    pub seed: u64,
}

fn unit(seed: u64, parts: &[&str]) -> f64 {
    (derive_seed(seed, parts) >> 11) as f64 / (1u64 << 53) as f64
}

impl SimulatedAnnotators {
    pub fn new(count: usize, seed: u64) -> Self {
        Self {
            ids: (0..count).map(|i| format!("sim-{i}")).collect(),
            contexts: BTreeMap::new(),
            noise: 0.08,
            seed,
        }
    }

    /// True when the QAR names a hallucination word the context lacks.
    pub fn unsupported(&self, task: &RatingTask) -> bool {
        let context = self.contexts.get(&task.image_id).map(String::as_str).unwrap_or("");
        let ctx_words = word_tokens(context);
        let text = format!("{} {} {}", task.question, task.answer, task.rationale);
        word_tokens(&text)
            .iter()
            .any(|w| HALLUCINATED_WORDS.contains(&w.as_str()) && !ctx_words.contains(w))
    }

    pub fn rate(&self, task: &RatingTask, annotator: &str) -> Rating {
        let u = |tag: &str| unit(self.seed, &[tag, &task.task_id, annotator]);
        let (qa, qar) = if self.unsupported(task) {
            if u("qa") < 0.6 {
                (1, None)
            } else {
                (2 + u8::from(u("qa-level") < 0.5), Some(1))
            }
        } else if u("qa") < self.noise {
            (1, None)
        } else {
            let qa = if u("qa-level") < 0.7 { 3 } else { 2 };
            let r = u("qar");
            let qar = if r < self.noise / 2.0 {
                1
            } else if r < 0.6 {
                3
            } else {
                2
            };
            (qa, Some(qar))
        };
        Rating {
            task_id: task.task_id.clone(),
            annotator_id: annotator.to_string(),
            qa_rating: qa,
            qar_rating: qar,
        }
    }

    /// Each annotator pulls and rates tasks until none are left for them.
    /// Returns the number of ratings submitted.
    pub fn run(&self, service: &AnnotationService) -> Result<usize, ServiceError> {
        let mut submitted = 0;
        loop {
            let mut progressed = false;
            for a in &self.ids {
                let Some(view) = service.next_task(TaskKind::Rating, a) else {
                    continue;
                };
                let (task, _) = service
                    .rating_task(view.task_id())
                    .ok_or_else(|| ServiceError::UnknownTask(view.task_id().to_string()))?;
                service.submit_rating(self.rate(&task, a))?;
                submitted += 1;
                progressed = true;
            }
            if !progressed {
                return Ok(submitted);
            }
        }
    }
}
