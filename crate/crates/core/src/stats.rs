//! Corpus analytics: summary table, question-type taxonomy, mention and
//! box-size distributions, word frequencies and Pearson correlation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{BoxGeometry, QarInstance, ReferenceMode, MAX_MENTIONS};
use crate::util::{token_len, word_tokens};

pub const DEFAULT_QUESTION_TYPES: &str = include_str!("../data/question_types.json");
pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("question type rules: {0}")]
    Rules(String),
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionTypeRule {
    pub name: String,
    pub priority: u32,
    pub patterns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionTypeRules {
    pub version: u32,
    pub fallback: String,
    pub rules: Vec<QuestionTypeRule>,
    #[serde(skip)]
    compiled: Vec<(String, Vec<Vec<String>>)>,
}

impl QuestionTypeRules {
    pub fn from_json(text: &str) -> Result<Self, StatsError> {
        let mut r: Self = serde_json::from_str(text).map_err(|e| StatsError::Rules(e.to_string()))?;
        r.compile()?;
        Ok(r)
    }

    pub fn builtin() -> Self {
        Self::from_json(DEFAULT_QUESTION_TYPES).expect("bundled question types are valid")
    }

    fn compile(&mut self) -> Result<(), StatsError> {
        if self.rules.is_empty() {
            return Err(StatsError::Rules("no rules".into()));
        }
        let priorities: BTreeSet<u32> = self.rules.iter().map(|r| r.priority).collect();
        if priorities.len() != self.rules.len() {
            return Err(StatsError::Rules("priorities must be unique".into()));
        }
        for rule in &self.rules {
            if let Some(p) = rule.patterns.iter().find(|p| p.to_lowercase() != **p || p.trim().is_empty()) {
                return Err(StatsError::Rules(format!("pattern {p:?} must be lowercase and non-empty")));
            }
        }
        let mut ordered: Vec<&QuestionTypeRule> = self.rules.iter().collect();
        ordered.sort_by_key(|r| r.priority);
        self.compiled = ordered
            .into_iter()
            .map(|r| (r.name.clone(), r.patterns.iter().map(|p| word_tokens(p)).collect()))
            .collect();
        Ok(())
    }

    /// Type names in priority order, followed by the fallback.
    pub fn type_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.compiled.iter().map(|(n, _)| n.clone()).collect();
        v.push(self.fallback.clone());
        v
    }
}

fn contains_ngram(tokens: &[String], gram: &[String]) -> bool {
    !gram.is_empty() && tokens.windows(gram.len()).any(|w| w == gram)
}

/// First rule by priority with a pattern occurring as a word n-gram.
pub fn classify_question(question: &str, rules: &QuestionTypeRules) -> String {
    let tokens = word_tokens(question);
    rules
        .compiled
        .iter()
        .find(|(_, grams)| grams.iter().any(|g| contains_ngram(&tokens, g)))
        .map(|(n, _)| n.clone())
        .unwrap_or_else(|| rules.fallback.clone())
}

/// Additive sufficient statistics for one slice of the corpus.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SummaryAccumulator {
    pub image_ids: BTreeSet<String>,
    pub qars: u64,
    pub question_tokens: u64,
    pub answer_tokens: u64,
    pub rationale_tokens: u64,
    pub mentions: u64,
}

impl SummaryAccumulator {
    pub fn add(&mut self, q: &QarInstance) {
        self.image_ids.insert(q.image_id.clone());
        self.qars += 1;
        self.question_tokens += token_len(&q.question) as u64;
        self.answer_tokens += token_len(&q.answer) as u64;
        self.rationale_tokens += token_len(&q.rationale) as u64;
        self.mentions += q.mentioned_ids.len() as u64;
    }

    pub fn merge(&mut self, other: &SummaryAccumulator) {
        self.image_ids.extend(other.image_ids.iter().cloned());
        self.qars += other.qars;
        self.question_tokens += other.question_tokens;
        self.answer_tokens += other.answer_tokens;
        self.rationale_tokens += other.rationale_tokens;
        self.mentions += other.mentions;
    }

    pub fn finish(&self) -> SummaryColumn {
        let per = |x: u64| if self.qars == 0 { 0.0 } else { x as f64 / self.qars as f64 };
        let images = self.image_ids.len() as u64;
        SummaryColumn {
            images,
            qars: self.qars,
            qs_per_image: if images == 0 { 0.0 } else { self.qars as f64 / images as f64 },
            avg_q_len: per(self.question_tokens),
            avg_a_len: per(self.answer_tokens),
            avg_r_len: per(self.rationale_tokens),
            avg_mentioned_ids: per(self.mentions),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SummaryColumn {
    pub images: u64,
    pub qars: u64,
    pub qs_per_image: f64,
    pub avg_q_len: f64,
    pub avg_a_len: f64,
    pub avg_r_len: f64,
    pub avg_mentioned_ids: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub with_region_ids: SummaryColumn,
    pub with_region_descriptions: SummaryColumn,
    pub total: SummaryColumn,
    pub empty: bool,
}

/// Per-mode accumulators; merge shards with [`SummaryShard::merge`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SummaryShard {
    pub id_based: SummaryAccumulator,
    pub description_based: SummaryAccumulator,
}

impl SummaryShard {
    pub fn from_instances<'a>(it: impl IntoIterator<Item = &'a QarInstance>) -> Self {
        let mut s = Self::default();
        for q in it {
            match q.mode {
                ReferenceMode::IdBased => s.id_based.add(q),
                ReferenceMode::DescriptionBased => s.description_based.add(q),
            }
        }
        s
    }

    pub fn merge(&mut self, other: &SummaryShard) {
        self.id_based.merge(&other.id_based);
        self.description_based.merge(&other.description_based);
    }

    pub fn finish(&self) -> CorpusSummary {
        let mut total = self.id_based.clone();
        total.merge(&self.description_based);
        CorpusSummary {
            with_region_ids: self.id_based.finish(),
            with_region_descriptions: self.description_based.finish(),
            empty: total.qars == 0,
            total: total.finish(),
        }
    }
}

pub fn corpus_summary(instances: &[QarInstance]) -> CorpusSummary {
    SummaryShard::from_instances(instances).finish()
}

/// 20 equal bins over `[0,1]`, normalized to sum to 1 (all zero when empty).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub fractions: Vec<f64>,
    pub count: usize,
}

pub fn bin_index(v: f64, bins: usize) -> usize {
    // Tiny slack so values written as exact bin edges land in that bin.
    ((v.clamp(0.0, 1.0) * bins as f64 + 1e-9).floor() as usize).min(bins - 1)
}

pub fn histogram(values: &[f64]) -> Histogram {
    let mut counts = vec![0usize; HISTOGRAM_BINS];
    for &v in values {
        counts[bin_index(v, HISTOGRAM_BINS)] += 1;
    }
    let n = values.len();
    Histogram {
        edges: (0..=HISTOGRAM_BINS).map(|i| i as f64 / HISTOGRAM_BINS as f64).collect(),
        fractions: counts
            .iter()
            .map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
            .collect(),
        count: n,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxHistograms {
    pub width: Histogram,
    pub height: Histogram,
    pub area: Histogram,
}

pub fn bbox_histograms(boxes: &[BoxGeometry]) -> BoxHistograms {
    let col = |f: fn(&BoxGeometry) -> f64| boxes.iter().map(f).collect::<Vec<_>>();
    BoxHistograms {
        width: histogram(&col(|b| b.w)),
        height: histogram(&col(|b| b.h)),
        area: histogram(&col(|b| b.area())),
    }
}

pub fn histograms_to_csv(h: &BoxHistograms) -> String {
    let mut s = String::from("bin_start,bin_end,width,height,area\n");
    for i in 0..HISTOGRAM_BINS {
        let _ = writeln!(
            s,
            "{:.2},{:.2},{:.6},{:.6},{:.6}",
            h.width.edges[i],
            h.width.edges[i + 1],
            h.width.fractions[i],
            h.height.fractions[i],
            h.area.fractions[i]
        );
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pearson {
    /// `None` when either series has zero variance.
    pub rho: Option<f64>,
    pub n: usize,
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Pearson, StatsError> {
    if xs.len() != ys.len() {
        return Err(StatsError::LengthMismatch(xs.len(), ys.len()));
    }
    let n = xs.len();
    if n < 2 {
        return Err(StatsError::TooFewPoints(n));
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let rho = if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
    };
    Ok(Pearson { rho, n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeCount {
    pub question_type: String,
    pub count: usize,
    pub fraction: f64,
}

pub fn question_type_distribution(instances: &[QarInstance], rules: &QuestionTypeRules) -> Vec<TypeCount> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for q in instances {
        *counts.entry(classify_question(&q.question, rules)).or_insert(0) += 1;
    }
    let n = instances.len();
    rules
        .type_names()
        .into_iter()
        .map(|t| {
            let c = counts.get(&t).copied().unwrap_or(0);
            TypeCount {
                fraction: if n == 0 { 0.0 } else { c as f64 / n as f64 },
                question_type: t,
                count: c,
            }
        })
        .collect()
}

/// Fraction of id-based instances mentioning `k` regions, `k = 0..=5`.
pub fn mention_distribution(instances: &[QarInstance]) -> Vec<f64> {
    let mut counts = vec![0usize; MAX_MENTIONS + 1];
    let mut n = 0;
    for q in instances.iter().filter(|q| q.mode == ReferenceMode::IdBased) {
        counts[q.mentioned_ids.len().min(MAX_MENTIONS)] += 1;
        n += 1;
    }
    counts
        .into_iter()
        .map(|c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
        .collect()
}

const FREQ_STOPWORDS: [&str; 30] = [
    "the", "a", "an", "of", "is", "are", "and", "to", "in", "on", "it", "this", "that", "be", "with",
    "for", "as", "at", "by", "or", "they", "their", "its", "was", "what", "which", "from", "can",
    "might", "there",
];

/// Most frequent non-stopword tokens, count descending then alphabetical.
pub fn word_frequencies<'a>(texts: impl IntoIterator<Item = &'a str>, top: usize) -> Vec<(String, usize)> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for t in texts {
        for w in word_tokens(&crate::mentions::strip_mentions(t)) {
            if !FREQ_STOPWORDS.contains(&w.as_str()) && !w.chars().all(|c| c.is_ascii_digit()) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
    }
    let mut v: Vec<(String, usize)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v.truncate(top);
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordClouds {
    pub question: Vec<(String, usize)>,
    pub answer: Vec<(String, usize)>,
    pub rationale: Vec<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub rules_version: u32,
    pub summary: CorpusSummary,
    pub question_types: Vec<TypeCount>,
    pub mention_distribution: Vec<f64>,
    pub boxes: BoxHistograms,
    pub words: WordClouds,
}

pub fn build_report(instances: &[QarInstance], boxes: &[BoxGeometry], rules: &QuestionTypeRules) -> StatsReport {
    StatsReport {
        rules_version: rules.version,
        summary: corpus_summary(instances),
        question_types: question_type_distribution(instances, rules),
        mention_distribution: mention_distribution(instances),
        boxes: bbox_histograms(boxes),
        words: WordClouds {
            question: word_frequencies(instances.iter().map(|q| q.question.as_str()), 25),
            answer: word_frequencies(instances.iter().map(|q| q.answer.as_str()), 25),
            rationale: word_frequencies(instances.iter().map(|q| q.rationale.as_str()), 25),
        },
    }
}

/// Human-readable rendering of a report.
pub fn report_text(r: &StatsReport) -> String {
    let mut s = String::new();
    let cols = [
        &r.summary.with_region_ids,
        &r.summary.with_region_descriptions,
        &r.summary.total,
    ];
    let _ = writeln!(s, "{:<24} {:>12} {:>12} {:>12}", "", "region ids", "descriptions", "total");
    let row = |s: &mut String, name: &str, f: &dyn Fn(&SummaryColumn) -> String| {
        let _ = writeln!(s, "{:<24} {:>12} {:>12} {:>12}", name, f(cols[0]), f(cols[1]), f(cols[2]));
    };
    row(&mut s, "# of images", &|c| c.images.to_string());
    row(&mut s, "# of QARs", &|c| c.qars.to_string());
    row(&mut s, "avg # of Qs per image", &|c| format!("{:.2}", c.qs_per_image));
    row(&mut s, "avg Q length", &|c| format!("{:.1}", c.avg_q_len));
    row(&mut s, "avg A length", &|c| format!("{:.1}", c.avg_a_len));
    row(&mut s, "avg R length", &|c| format!("{:.1}", c.avg_r_len));
    row(&mut s, "avg # of mentioned IDs", &|c| format!("{:.2}", c.avg_mentioned_ids));
    s.push('\n');
    let _ = writeln!(s, "{:<14} {:>8} {:>8}", "question type", "count", "freq %");
    for t in &r.question_types {
        let _ = writeln!(s, "{:<14} {:>8} {:>8.1}", t.question_type, t.count, 100.0 * t.fraction);
    }
    s.push('\n');
    let _ = writeln!(s, "mentioned ids  {}", (0..r.mention_distribution.len()).map(|k| format!("{k:>6}")).collect::<String>());
    let _ = writeln!(s, "fraction       {}", r.mention_distribution.iter().map(|f| format!("{f:>6.3}")).collect::<String>());
    s
}
