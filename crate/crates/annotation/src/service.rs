//! Store-backed task service.
//!
//! Every accepted submission is appended to its stage before the in-memory
//! index changes, so a restart rebuilds exactly the acknowledged state.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use qarsmith_core::model::{CriticLabel, QarInstance, Validate};
use qarsmith_core::store::{Store, StoreError};
use qarsmith_core::util::derive_seed;

use crate::task::*;

pub const RATING_TASKS_STAGE: &str = "rating_tasks";
pub const RATINGS_STAGE: &str = "ratings";
pub const PAIRWISE_TASKS_STAGE: &str = "pairwise_tasks";
pub const VOTES_STAGE: &str = "votes";
pub const LABELS_STAGE: &str = "labels";
pub const VERDICTS_STAGE: &str = "verdicts";
pub const RENDERS_DIR: &str = "renders";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub required_annotators: usize,
    pub required_votes: usize,
    pub seed: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            required_annotators: DEFAULT_REQUIRED_ANNOTATORS,
            required_votes: DEFAULT_REQUIRED_VOTES,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("missing renders for instances: {}", .0.join(", "))]
    MissingRenders(Vec<String>),
    #[error("unknown instances: {}", .0.join(", "))]
    UnknownInstances(Vec<String>),
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("task {0} is already complete")]
    TaskClosed(String),
    #[error("annotator {annotator_id} already answered task {task_id}")]
    DuplicateAnnotator { task_id: String, annotator_id: String },
    #[error("task {task_id} is not a {expected} task")]
    WrongKind { task_id: String, expected: &'static str },
    #[error("invalid submission: {0}")]
    Invalid(String),
    #[error("no complete tasks to export")]
    NothingComplete,
    #[error("inconsistent annotation state: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Vote(#[from] VoteError),
}

type Result<T> = std::result::Result<T, ServiceError>;

#[derive(Debug, Clone)]
struct RatingEntry {
    task: RatingTask,
    ratings: Vec<Rating>,
}

impl RatingEntry {
    fn state(&self) -> TaskState {
        if self.ratings.len() >= self.task.required_annotators {
            TaskState::Complete
        } else {
            TaskState::Open
        }
    }
}

#[derive(Debug, Clone)]
struct PairEntry {
    task: PairwiseTask,
    votes: Vec<VoteRecord>,
}

impl PairEntry {
    fn state(&self) -> TaskState {
        if self.votes.len() >= self.task.required_votes {
            TaskState::Complete
        } else {
            TaskState::Open
        }
    }
}

struct Inner {
    store: Store,
    ratings: BTreeMap<String, RatingEntry>,
    pairs: BTreeMap<String, PairEntry>,
}

/// What an annotator sees. Pairwise responses are in display order and the
/// swap flag is withheld.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskView {
    Rating {
        task_id: String,
        instance_id: String,
        render_uri: String,
        question: String,
        answer: String,
        rationale: String,
        required_annotators: usize,
        submissions: usize,
        state: TaskState,
    },
    Pairwise {
        task_id: String,
        image_uri: String,
        question: String,
        response_a: String,
        response_b: String,
        criterion: Criterion,
        required_votes: usize,
        submissions: usize,
        state: TaskState,
    },
}

impl TaskView {
    pub fn task_id(&self) -> &str {
        match self {
            TaskView::Rating { task_id, .. } | TaskView::Pairwise { task_id, .. } => task_id,
        }
    }
}

fn rating_view(e: &RatingEntry) -> TaskView {
    TaskView::Rating {
        task_id: e.task.task_id.clone(),
        instance_id: e.task.instance_id.clone(),
        render_uri: e.task.render_uri.clone(),
        question: e.task.question.clone(),
        answer: e.task.answer.clone(),
        rationale: e.task.rationale.clone(),
        required_annotators: e.task.required_annotators,
        submissions: e.ratings.len(),
        state: e.state(),
    }
}

fn pair_view(e: &PairEntry) -> TaskView {
    let (a, b) = e.task.displayed();
    TaskView::Pairwise {
        task_id: e.task.task_id.clone(),
        image_uri: e.task.image_uri.clone(),
        question: e.task.question.clone(),
        response_a: a.to_string(),
        response_b: b.to_string(),
        criterion: e.task.criterion,
        required_votes: e.task.required_votes,
        submissions: e.votes.len(),
        state: e.state(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub labels: usize,
    pub verdicts: usize,
    pub open_rating_tasks: usize,
    pub open_pairwise_tasks: usize,
    /// False when the stage already held exactly these records.
    pub labels_rewritten: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCounts {
    pub rating_open: usize,
    pub rating_complete: usize,
    pub pairwise_open: usize,
    pub pairwise_complete: usize,
}

pub struct AnnotationService {
    cfg: ServiceConfig,
    root: PathBuf,
    inner: RwLock<Inner>,
}

fn read_if_present<T: serde::de::DeserializeOwned>(store: &Store, stage: &str) -> Result<Vec<T>> {
    if store.has_stage(stage) {
        Ok(store.read_stage(stage)?)
    } else {
        Ok(Vec::new())
    }
}

impl AnnotationService {
    /// Rebuild the task index from the store's annotation stages.
    pub fn open(store: Store, cfg: ServiceConfig) -> Result<Self> {
        let mut ratings = BTreeMap::new();
        for task in read_if_present::<RatingTask>(&store, RATING_TASKS_STAGE)? {
            ratings.insert(task.task_id.clone(), RatingEntry { task, ratings: Vec::new() });
        }
        for r in read_if_present::<Rating>(&store, RATINGS_STAGE)? {
            let e = ratings
                .get_mut(&r.task_id)
                .ok_or_else(|| ServiceError::Inconsistent(format!("rating for unknown task {}", r.task_id)))?;
            if e.ratings.len() >= e.task.required_annotators {
                return Err(ServiceError::Inconsistent(format!("task {} is over-rated", r.task_id)));
            }
            e.ratings.push(r);
        }
        let mut pairs = BTreeMap::new();
        for task in read_if_present::<PairwiseTask>(&store, PAIRWISE_TASKS_STAGE)? {
            pairs.insert(task.task_id.clone(), PairEntry { task, votes: Vec::new() });
        }
        for v in read_if_present::<VoteRecord>(&store, VOTES_STAGE)? {
            let e = pairs
                .get_mut(&v.task_id)
                .ok_or_else(|| ServiceError::Inconsistent(format!("vote for unknown task {}", v.task_id)))?;
            if e.votes.len() >= e.task.required_votes {
                return Err(ServiceError::Inconsistent(format!("task {} has too many votes", v.task_id)));
            }
            e.votes.push(v);
        }
        Ok(Self {
            cfg,
            root: store.root().to_path_buf(),
            inner: RwLock::new(Inner { store, ratings, pairs }),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    pub fn renders_dir(&self) -> PathBuf {
        self.root.join(RENDERS_DIR)
    }

    pub fn render_path(&self, instance_id: &str) -> PathBuf {
        self.renders_dir().join(format!("{instance_id}.png"))
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Inner> {
        self.inner.read().unwrap_or_else(|p| p.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, Inner> {
        self.inner.write().unwrap_or_else(|p| p.into_inner())
    }

    /// One rating task per instance. Existing tasks are kept as they are,
    /// so re-submitting a batch returns the same ids.
    pub fn create_rating_tasks(&self, instances: &[QarInstance]) -> Result<Vec<String>> {
        let missing: Vec<String> = instances
            .iter()
            .filter(|i| !self.render_path(&i.instance_id).is_file())
            .map(|i| i.instance_id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(ServiceError::MissingRenders(missing));
        }
        let mut inner = self.write();
        let mut ids = Vec::with_capacity(instances.len());
        let mut fresh: Vec<RatingTask> = Vec::new();
        let mut seen = BTreeSet::new();
        for inst in instances {
            let task_id = rating_task_id(&inst.instance_id);
            ids.push(task_id.clone());
            if inner.ratings.contains_key(&task_id) || !seen.insert(task_id.clone()) {
                continue;
            }
            fresh.push(RatingTask {
                task_id,
                instance_id: inst.instance_id.clone(),
                image_id: inst.image_id.clone(),
                mode: inst.mode,
                render_uri: format!("/{RENDERS_DIR}/{}.png", inst.instance_id),
                question: inst.question.clone(),
                answer: inst.answer.clone(),
                rationale: inst.rationale.clone(),
                required_annotators: self.cfg.required_annotators,
            });
        }
        if !fresh.is_empty() {
            inner.store.append_records(RATING_TASKS_STAGE, &fresh)?;
            for task in fresh {
                inner.ratings.insert(task.task_id.clone(), RatingEntry { task, ratings: Vec::new() });
            }
        }
        Ok(ids)
    }

    /// Rating tasks for instances of a stored stage; `None` takes all of them.
    pub fn create_rating_tasks_from_stage(&self, stage: &str, ids: Option<&[String]>) -> Result<Vec<String>> {
        let all: Vec<QarInstance> = self.read().store.read_stage(stage)?;
        let chosen = match ids {
            None => all,
            Some(ids) => {
                let by_id: BTreeMap<&str, &QarInstance> =
                    all.iter().map(|i| (i.instance_id.as_str(), i)).collect();
                let unknown: Vec<String> = ids
                    .iter()
                    .filter(|id| !by_id.contains_key(id.as_str()))
                    .cloned()
                    .collect();
                if !unknown.is_empty() {
                    return Err(ServiceError::UnknownInstances(unknown));
                }
                ids.iter().map(|id| by_id[id.as_str()].clone()).collect()
            }
        };
        self.create_rating_tasks(&chosen)
    }

    pub fn create_pairwise_tasks(&self, items: &[PairwiseItem]) -> Result<Vec<String>> {
        let mut inner = self.write();
        let mut ids = Vec::with_capacity(items.len());
        let mut fresh: Vec<PairwiseTask> = Vec::new();
        let mut seen = BTreeSet::new();
        for item in items {
            let task_id = pairwise_task_id(&item.item_id, item.criterion);
            ids.push(task_id.clone());
            if inner.pairs.contains_key(&task_id) || !seen.insert(task_id.clone()) {
                continue;
            }
            let seed = derive_seed(self.cfg.seed, &["pairwise", &task_id]);
            fresh.push(PairwiseTask {
                task_id,
                item_id: item.item_id.clone(),
                image_uri: item.image_uri.clone(),
                question: item.question.clone(),
                response_a: item.response_a.clone(),
                response_b: item.response_b.clone(),
                criterion: item.criterion,
                randomized_order_seed: seed,
                swapped: seed & 1 == 1,
                required_votes: self.cfg.required_votes,
            });
        }
        if !fresh.is_empty() {
            inner.store.append_records(PAIRWISE_TASKS_STAGE, &fresh)?;
            for task in fresh {
                inner.pairs.insert(task.task_id.clone(), PairEntry { task, votes: Vec::new() });
            }
        }
        Ok(ids)
    }

    pub fn submit_rating(&self, rating: Rating) -> Result<TaskState> {
        rating.check().map_err(ServiceError::Invalid)?;
        let mut inner = self.write();
        let Inner { store, ratings, pairs } = &mut *inner;
        let entry = match ratings.get_mut(&rating.task_id) {
            Some(e) => e,
            None if pairs.contains_key(&rating.task_id) => {
                return Err(ServiceError::WrongKind {
                    task_id: rating.task_id,
                    expected: "rating",
                })
            }
            None => return Err(ServiceError::UnknownTask(rating.task_id)),
        };
        if entry.ratings.iter().any(|r| r.annotator_id == rating.annotator_id) {
            return Err(ServiceError::DuplicateAnnotator {
                task_id: rating.task_id,
                annotator_id: rating.annotator_id,
            });
        }
        if entry.state() == TaskState::Complete {
            return Err(ServiceError::TaskClosed(rating.task_id));
        }
        store.append_records(RATINGS_STAGE, std::slice::from_ref(&rating))?;
        entry.ratings.push(rating);
        Ok(entry.state())
    }

    pub fn submit_vote(&self, vote: Vote) -> Result<TaskState> {
        if vote.annotator_id.is_empty() {
            return Err(ServiceError::Invalid("annotator_id is empty".into()));
        }
        let mut inner = self.write();
        let Inner { store, ratings, pairs } = &mut *inner;
        let entry = match pairs.get_mut(&vote.task_id) {
            Some(e) => e,
            None if ratings.contains_key(&vote.task_id) => {
                return Err(ServiceError::WrongKind {
                    task_id: vote.task_id,
                    expected: "pairwise",
                })
            }
            None => return Err(ServiceError::UnknownTask(vote.task_id)),
        };
        if entry.votes.iter().any(|v| v.annotator_id == vote.annotator_id) {
            return Err(ServiceError::DuplicateAnnotator {
                task_id: vote.task_id,
                annotator_id: vote.annotator_id,
            });
        }
        if entry.state() == TaskState::Complete {
            return Err(ServiceError::TaskClosed(vote.task_id));
        }
        let record = VoteRecord {
            source_choice: entry.task.to_source(vote.choice),
            task_id: vote.task_id,
            annotator_id: vote.annotator_id,
            shown_choice: vote.choice,
        };
        store.append_records(VOTES_STAGE, std::slice::from_ref(&record))?;
        entry.votes.push(record);
        Ok(entry.state())
    }

    /// The open task this annotator has not answered with the fewest
    /// submissions so far; ties go to the smallest task id.
    pub fn next_task(&self, kind: TaskKind, annotator_id: &str) -> Option<TaskView> {
        let inner = self.read();
        match kind {
            TaskKind::Rating => inner
                .ratings
                .values()
                .filter(|e| e.state() == TaskState::Open)
                .filter(|e| e.ratings.iter().all(|r| r.annotator_id != annotator_id))
                .min_by_key(|e| (e.ratings.len(), &e.task.task_id))
                .map(rating_view),
            TaskKind::Pairwise => inner
                .pairs
                .values()
                .filter(|e| e.state() == TaskState::Open)
                .filter(|e| e.votes.iter().all(|v| v.annotator_id != annotator_id))
                .min_by_key(|e| (e.votes.len(), &e.task.task_id))
                .map(pair_view),
        }
    }

    pub fn task(&self, task_id: &str) -> Option<TaskView> {
        let inner = self.read();
        inner
            .ratings
            .get(task_id)
            .map(rating_view)
            .or_else(|| inner.pairs.get(task_id).map(pair_view))
    }

    pub fn rating_task(&self, task_id: &str) -> Option<(RatingTask, Vec<Rating>)> {
        self.read()
            .ratings
            .get(task_id)
            .map(|e| (e.task.clone(), e.ratings.clone()))
    }

    pub fn pairwise_task(&self, task_id: &str) -> Option<(PairwiseTask, Vec<VoteRecord>)> {
        self.read()
            .pairs
            .get(task_id)
            .map(|e| (e.task.clone(), e.votes.clone()))
    }

    pub fn counts(&self) -> TaskCounts {
        let inner = self.read();
        let complete_r = inner.ratings.values().filter(|e| e.state() == TaskState::Complete).count();
        let complete_p = inner.pairs.values().filter(|e| e.state() == TaskState::Complete).count();
        TaskCounts {
            rating_open: inner.ratings.len() - complete_r,
            rating_complete: complete_r,
            pairwise_open: inner.pairs.len() - complete_p,
            pairwise_complete: complete_p,
        }
    }

    pub fn aggregate(&self, task_id: &str) -> Result<CriticLabel> {
        let inner = self.read();
        let e = inner
            .ratings
            .get(task_id)
            .ok_or_else(|| ServiceError::UnknownTask(task_id.to_string()))?;
        Ok(aggregate_ratings(&e.task, &e.ratings)?)
    }

    pub fn verdict(&self, task_id: &str) -> Result<PairwiseVerdict> {
        let inner = self.read();
        let e = inner
            .pairs
            .get(task_id)
            .ok_or_else(|| ServiceError::UnknownTask(task_id.to_string()))?;
        pair_verdict(e)
    }

    /// Overwrite the labels and verdicts stages with every complete task.
    ///
    /// A stage whose stored records already equal the new ones is left
    /// untouched, so repeated exports keep identical files.
    pub fn export_labels(&self) -> Result<ExportSummary> {
        let mut inner = self.write();
        let mut labels = Vec::new();
        for e in inner.ratings.values().filter(|e| e.state() == TaskState::Complete) {
            labels.push(aggregate_ratings(&e.task, &e.ratings)?);
        }
        let mut verdicts = Vec::new();
        for e in inner.pairs.values().filter(|e| e.state() == TaskState::Complete) {
            verdicts.push(pair_verdict(e)?);
        }
        if labels.is_empty() && verdicts.is_empty() {
            return Err(ServiceError::NothingComplete);
        }
        let labels_rewritten = replace_if_changed(&mut inner.store, LABELS_STAGE, &labels)?;
        replace_if_changed(&mut inner.store, VERDICTS_STAGE, &verdicts)?;
        let open_rating_tasks = inner.ratings.values().filter(|e| e.state() == TaskState::Open).count();
        let open_pairwise_tasks = inner.pairs.values().filter(|e| e.state() == TaskState::Open).count();
        Ok(ExportSummary {
            labels: labels.len(),
            verdicts: verdicts.len(),
            open_rating_tasks,
            open_pairwise_tasks,
            labels_rewritten,
        })
    }

    /// Hand back the store, e.g. to read exported stages after shutdown.
    pub fn into_store(self) -> Store {
        self.inner.into_inner().unwrap_or_else(|p| p.into_inner()).store
    }
}

fn pair_verdict(e: &PairEntry) -> Result<PairwiseVerdict> {
    let source: Vec<Choice> = e.votes.iter().map(|v| v.source_choice).collect();
    let verdict = majority_vote(&source, e.task.required_votes)?;
    Ok(PairwiseVerdict {
        task_id: e.task.task_id.clone(),
        item_id: e.task.item_id.clone(),
        criterion: e.task.criterion,
        swapped: e.task.swapped,
        source_votes: source,
        verdict,
    })
}

fn replace_if_changed<T>(store: &mut Store, stage: &str, records: &[T]) -> Result<bool>
where
    T: Serialize + serde::de::DeserializeOwned + PartialEq + Validate,
{
    if store.has_stage(stage) {
        let current: Vec<T> = store.read_stage(stage)?;
        if current == records {
            return Ok(false);
        }
    }
    store.write_stage(stage, records)?;
    Ok(true)
}
