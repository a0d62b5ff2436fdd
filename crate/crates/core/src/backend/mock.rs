//! Deterministic in-process backends.
//!
//! Every response is a pure function of the mock's seed and the request, so
//! two runs with the same configuration are byte-identical regardless of
//! thread scheduling. The chat mock recognises the pipeline's own prompts
//! (probe-question requests and QAR generation conversations) and answers
//! them in the expected format; an optional fuzz rate makes it emit the
//! malformed outputs real LLMs produce.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::LazyLock;

use base64::Engine;
use rand::seq::IndexedRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::*;
use crate::util::{derive_seed, parse_number_word, sha256_hex, word_tokens};

/// Words the mock LLM inserts when it "hallucinates" content absent from the image.
pub const HALLUCINATED_WORDS: [&str; 8] = [
    "surfboard", "giraffe", "violin", "helicopter", "snowman", "canoe", "trophy", "parrot",
];

const NOUNS: [&str; 24] = [
    "table", "chair", "window", "bicycle", "umbrella", "dog", "bag", "lamp", "tree", "car",
    "bottle", "book", "hat", "phone", "cup", "bench", "door", "plate", "fence", "jacket", "clock",
    "sign", "basket", "shelf",
];

const ADJECTIVES: [&str; 12] = [
    "busy", "quiet", "sunny", "crowded", "small", "bright", "dim", "colorful", "wooden", "modern",
    "rustic", "open",
];

const FILLER: [&str; 6] = [
    "probably", "typically", "usually", "generally", "seemingly", "plausibly",
];

const STOPWORDS: [&str; 40] = [
    "the", "and", "with", "that", "this", "from", "what", "which", "there", "their", "they",
    "them", "have", "been", "into", "about", "near", "while", "where", "region", "regions",
    "image", "photo", "scene", "showing", "appears", "looks", "like", "some", "very", "also",
    "might", "would", "could", "other", "each", "here", "places", "objects", "concepts",
];

static REGION_ID_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?m)^\[(\d+)\] \([^)]*\)(?::\s*(.*))?$").unwrap());
static QA_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?m)^Q: (.*?) A: (.*)$").unwrap());
static ASK_COUNT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)ask (\w+) interesting").unwrap());

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    pub seed: u64,
    /// Embedding dimension.
    pub dim: usize,
    /// Probability that a generated QAR mentions an object absent from the context.
    pub hallucination_rate: f64,
    /// Probability that a generated QAR is malformed or breaks the reference-mode rules.
    pub fuzz_rate: f64,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dim: 64,
            hallucination_rate: 0.35,
            fuzz_rate: 0.0,
        }
    }
}

/// One mock serving every endpoint.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    pub cfg: MockConfig,
}

impl MockBackend {
    pub fn new(cfg: MockConfig) -> Self {
        Self { cfg }
    }

    pub fn with_seed(seed: u64) -> Self {
        Self::new(MockConfig {
            seed,
            ..MockConfig::default()
        })
    }

    fn rng(&self, parts: &[&str]) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, parts))
    }

    /// Unit vector derived from a key; deterministic per (mock seed, key).
    fn hash_vector(&self, key: &str) -> Vec<f64> {
        let mut rng = self.rng(&["vec", key]);
        let mut v: Vec<f64> = (0..self.cfg.dim)
            .map(|_| {
                // Sum of uniforms is close enough to a Gaussian for direction sampling.
                (0..4).map(|_| rng.random::<f64>() - 0.5).sum()
            })
            .collect();
        normalize(&mut v);
        v
    }

    /// Feature-hashing text embedding: per-token random directions, summed.
    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let tokens = word_tokens(text);
        if tokens.is_empty() {
            return self.hash_vector(&format!("raw:{text}"));
        }
        let mut acc = vec![0.0; self.cfg.dim];
        for t in &tokens {
            for (a, b) in acc.iter_mut().zip(self.hash_vector(&format!("tok:{t}"))) {
                *a += b;
            }
        }
        normalize(&mut acc);
        acc
    }

    fn chat_text(&self, req: &ChatRequest) -> String {
        let transcript: String = req
            .messages
            .iter()
            .map(|m| format!("{}:{}\n", m.role, m.content))
            .collect();
        let seed = req.seed.unwrap_or(0).to_string();
        let mut rng = self.rng(&["chat", &seed, &sha256_hex(transcript.as_bytes())]);
        let first_user = req
            .messages
            .iter()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
            .unwrap_or("");

        if let Some(cap) = ASK_COUNT.captures(first_user) {
            let n = parse_number_word(&cap[1]).unwrap_or(15);
            return probe_questions(first_user, n, &mut rng);
        }
        if first_user.contains("Question:") && first_user.contains("Rationale:") {
            let ctx = PromptContext::parse(first_user);
            let turn = req.messages.iter().filter(|m| m.role == "assistant").count();
            if self.cfg.fuzz_rate > 0.0 && rng.random::<f64>() < self.cfg.fuzz_rate {
                return fuzzed_qar(&ctx, &mut rng);
            }
            let hallucinate = rng.random::<f64>() < self.cfg.hallucination_rate;
            return compliant_qar(&ctx, turn, hallucinate, &mut rng);
        }
        "I am not sure what you are asking.".to_string()
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Content words worth reusing in generated text.
pub fn content_words(text: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    word_tokens(text)
        .into_iter()
        .filter(|t| t.len() >= 4 && t.chars().all(|c| c.is_alphabetic()))
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .filter(|t| seen.insert(t.clone()))
        .collect()
}

/// What the mock can read back out of a generation prompt.
#[derive(Debug, Default)]
struct PromptContext {
    region_ids: Vec<u32>,
    captions: Vec<String>,
    qa_answers: Vec<String>,
    words: Vec<String>,
}

impl PromptContext {
    fn parse(prompt: &str) -> Self {
        let mut ctx = PromptContext::default();
        for cap in REGION_ID_LINE.captures_iter(prompt) {
            ctx.region_ids.push(cap[1].parse().unwrap_or(0));
            if let Some(c) = cap.get(2) {
                ctx.captions.push(c.as_str().trim().to_string());
            }
        }
        if ctx.region_ids.is_empty() {
            let mut in_regions = false;
            for line in prompt.lines() {
                if line.starts_with("Regions:") {
                    in_regions = true;
                } else if in_regions {
                    match line.strip_prefix("- ") {
                        Some(c) => ctx.captions.push(c.trim().to_string()),
                        None => in_regions = false,
                    }
                }
            }
        }
        ctx.qa_answers = QA_LINE
            .captures_iter(prompt)
            .map(|c| c[2].trim().to_string())
            .collect();
        // Only the descriptor block carries image content; instructions come after it.
        let content = prompt.split("\n\nWrite ").next().unwrap_or(prompt);
        ctx.words = content_words(content);
        ctx
    }
}

fn pick<'a, R: RngCore>(items: &'a [String], fallback: &'a str, rng: &mut R) -> &'a str {
    items.choose(rng).map(|s| s.as_str()).unwrap_or(fallback)
}

fn probe_questions<R: RngCore>(prompt: &str, n: usize, rng: &mut R) -> String {
    let words = content_words(prompt);
    const FORMS: [&str; 5] = [
        "What color is the {w}?",
        "Is the {w} close to the camera?",
        "How many people are near the {w}?",
        "What is next to the {w}?",
        "Is the {w} being used?",
    ];
    (1..=n)
        .map(|i| {
            let w = pick(&words, "scene", rng);
            let form = FORMS[(i - 1) % FORMS.len()];
            format!("{i}. {}\n", form.replace("{w}", w))
        })
        .collect()
}

const QUESTION_FORMS: [&str; 13] = [
    "What is the purpose of {r} in this setting?",
    "What is the relationship between {r} and the surroundings?",
    "What kind of place is {r} located in?",
    "What emotion might {r} be feeling?",
    "Where could {r} be heading next?",
    "What condition is {r} in?",
    "What activity is {r} engaged in?",
    "What can you infer about {r}?",
    "Why is {r} positioned like this?",
    "What is the role of {r} in the scene?",
    "What stands out about {r}?",
    "What atmosphere does {r} create?",
    "Do you think {r} belongs here?",
];

fn region_refs<R: RngCore>(ctx: &PromptContext, rng: &mut R) -> (String, Vec<u32>) {
    if ctx.region_ids.is_empty() {
        let caption = pick(&ctx.captions, "the main subject", rng);
        return (format!("the {}", strip_article(caption)), Vec::new());
    }
    let k = rng.random_range(1..=ctx.region_ids.len().min(2));
    let mut ids: Vec<u32> = ctx.region_ids.choose_multiple(rng, k).copied().collect();
    ids.sort_unstable();
    let text = ids
        .iter()
        .map(|i| format!("[{i}]"))
        .collect::<Vec<_>>()
        .join(" and ");
    (text, ids)
}

fn strip_article(caption: &str) -> String {
    let c = caption.trim().trim_end_matches('.');
    c.strip_prefix("a ")
        .or_else(|| c.strip_prefix("an "))
        .or_else(|| c.strip_prefix("the "))
        .unwrap_or(c)
        .to_string()
}

fn compliant_qar<R: RngCore>(
    ctx: &PromptContext,
    turn: usize,
    hallucinate: bool,
    rng: &mut R,
) -> String {
    let (subject, _) = region_refs(ctx, rng);
    let form = QUESTION_FORMS[(turn + rng.random_range(0..QUESTION_FORMS.len())) % QUESTION_FORMS.len()];
    let question = form.replace("{r}", &subject);
    let w1 = pick(&ctx.words, "surroundings", rng).to_string();
    let w2 = pick(&ctx.words, "context", rng).to_string();
    let evidence = if hallucinate {
        HALLUCINATED_WORDS.choose(rng).unwrap().to_string()
    } else {
        w2.clone()
    };
    let answer = format!("{subject} is most likely connected to the {w1} and the {evidence}.");
    let rationale = match ctx.qa_answers.choose(rng) {
        Some(qa) => format!(
            "The {w1} is visible and when asked, the image suggests {}, which supports this.",
            qa.trim_end_matches('.')
        ),
        None => format!(
            "This is {} {} the case in similar situations.",
            FILLER.choose(rng).unwrap(),
            FILLER.choose(rng).unwrap()
        ),
    };
    format!("Question: {question}\nAnswer: {answer}\nRationale: {rationale}")
}

fn fuzzed_qar<R: RngCore>(ctx: &PromptContext, rng: &mut R) -> String {
    let subject = if ctx.region_ids.is_empty() { "the person" } else { "someone" };
    match rng.random_range(0..6) {
        // Missing rationale.
        0 => format!("Question: What is {subject} doing?\nAnswer: Waiting."),
        // Free-form text with no labels.
        1 => "Sure! Here is an interesting fact about the picture.".to_string(),
        // Bracketed IDs where none are allowed, or no IDs where they are required.
        2 => format!(
            "Question: What is [0] holding?\nAnswer: {subject} holds a cup.\nRationale: [1] is nearby."
        ),
        3 => "Question: What is the mood?\nAnswer: Calm.\nRationale: Soft light fills the room."
            .to_string(),
        // Too many mentions.
        4 => "Question: Are [0], [1], [2], [3], [4] and [5] together?\nAnswer: Yes.\nRationale: They stand close."
            .to_string(),
        // Out-of-range region id.
        _ => "Question: What is [97] for?\nAnswer: Storage.\nRationale: It has shelves.".to_string(),
    }
}

fn b64_key(image_b64: &str) -> String {
    sha256_hex(image_b64.as_bytes())
}

impl EmbedBackend for MockBackend {
    fn embed(&self, req: &EmbedRequest) -> Result<EmbedResponse, BackendError> {
        let mut vectors = Vec::new();
        if let Some(texts) = &req.texts {
            vectors.extend(texts.iter().map(|t| self.embed_text(t)));
        }
        if let Some(img) = &req.image_b64 {
            vectors.push(self.hash_vector(&format!("img:{}", b64_key(img))));
        }
        if vectors.is_empty() {
            return Err(BackendError::Invalid("embed request carries neither texts nor image".into()));
        }
        Ok(EmbedResponse { vectors })
    }
}

impl ChatBackend for MockBackend {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        if req.messages.is_empty() {
            return Err(BackendError::Invalid("empty conversation".into()));
        }
        Ok(ChatResponse {
            text: self.chat_text(req),
        })
    }
}

impl CaptionBackend for MockBackend {
    fn caption(&self, req: &CaptionRequest) -> Result<CaptionResponse, BackendError> {
        base64::engine::general_purpose::STANDARD
            .decode(&req.image_b64)
            .map_err(|e| BackendError::Invalid(format!("image_b64: {e}")))?;
        let key = b64_key(&req.image_b64);
        let seed = req.seed.unwrap_or(0).to_string();
        let temp = format!("{:.3}", req.temperature.unwrap_or(1.0));
        let mut rng = self.rng(&["caption", &key, &seed, &temp]);
        let adj = ADJECTIVES.choose(&mut rng).unwrap();
        let noun = NOUNS.choose(&mut rng).unwrap();
        let text = match req.bbox {
            Some(_) => format!("a {adj} {noun}"),
            None => {
                let other = NOUNS.choose(&mut rng).unwrap();
                format!("In this {adj} picture we can see a {noun} and a {other}.")
            }
        };
        Ok(CaptionResponse { text })
    }
}

impl VqaBackend for MockBackend {
    fn vqa(&self, req: &VqaRequest) -> Result<VqaResponse, BackendError> {
        let mut rng = self.rng(&["vqa", &b64_key(&req.image_b64), &req.question]);
        let lower = req.question.to_lowercase();
        let answer = if lower.starts_with("is ") || lower.starts_with("are ") {
            if rng.random::<bool>() { "yes" } else { "no" }.to_string()
        } else {
            format!(
                "a {} {}",
                ADJECTIVES.choose(&mut rng).unwrap(),
                NOUNS.choose(&mut rng).unwrap()
            )
        };
        Ok(VqaResponse { answer })
    }
}

/// Mock acceptability score: how much of a QAR is grounded in its context.
///
/// Expects `payload = {"text": <qar text>, "context": <descriptor text>}`.
pub fn grounding_score(text: &str, context: &str) -> f64 {
    let ctx: BTreeSet<String> = content_words(context).into_iter().collect();
    let words = content_words(&crate::mentions::strip_mentions(text));
    if words.is_empty() {
        return 0.05;
    }
    let grounded = words.iter().filter(|w| ctx.contains(*w)).count() as f64;
    let hallucinated = words
        .iter()
        .filter(|w| HALLUCINATED_WORDS.contains(&w.as_str()) && !ctx.contains(*w))
        .count() as f64;
    let frac = grounded / words.len() as f64;
    (0.05 + 0.9 * frac - 0.3 * hallucinated).clamp(0.01, 0.99)
}

impl ScoreBackend for MockBackend {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        let field = |k: &str| {
            req.payload
                .get(k)
                .and_then(|v| v.as_str())
                .ok_or_else(|| BackendError::Invalid(format!("score payload lacks `{k}`")))
        };
        Ok(ScoreResponse {
            score: grounding_score(field("text")?, field("context")?),
        })
    }
}

/// Wrapper failing the first `failures` calls with a transport error.
#[derive(Debug)]
pub struct Flaky<B> {
    pub inner: B,
    remaining: AtomicU32,
    calls: AtomicU32,
}

impl<B> Flaky<B> {
    pub fn new(inner: B, failures: u32) -> Self {
        Self {
            inner,
            remaining: AtomicU32::new(failures),
            calls: AtomicU32::new(0),
        }
    }

    pub fn calls(&self) -> u32 {
        self.calls.load(Ordering::SeqCst)
    }

    fn gate(&self) -> Result<(), BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let failed = self
            .remaining
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |r| r.checked_sub(1))
            .is_ok();
        if failed {
            Err(BackendError::Transport("simulated connection reset".into()))
        } else {
            Ok(())
        }
    }
}

impl<B: ChatBackend> ChatBackend for Flaky<B> {
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.gate()?;
        self.inner.chat(req)
    }
}

impl<B: CaptionBackend> CaptionBackend for Flaky<B> {
    fn caption(&self, req: &CaptionRequest) -> Result<CaptionResponse, BackendError> {
        self.gate()?;
        self.inner.caption(req)
    }
}

impl<B: EmbedBackend> EmbedBackend for Flaky<B> {
    fn embed(&self, req: &EmbedRequest) -> Result<EmbedResponse, BackendError> {
        self.gate()?;
        self.inner.embed(req)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn text_embeddings_are_deterministic_unit_vectors() {
        let m = MockBackend::with_seed(3);
        let a = m.embed_text("a red cup on the table");
        assert_eq!(a, m.embed_text("a red cup on the table"));
        assert!((cos(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distinct_texts_are_not_parallel() {
        // Statistical check over 100 random text pairs.
        let m = MockBackend::with_seed(11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut below = 0;
        for i in 0..100 {
            let a = format!("{} {} {i}", NOUNS.choose(&mut rng).unwrap(), ADJECTIVES.choose(&mut rng).unwrap());
            let b = format!("{} {} x{i}", NOUNS.choose(&mut rng).unwrap(), FILLER.choose(&mut rng).unwrap());
            if cos(&m.embed_text(&a), &m.embed_text(&b)) < 1.0 - 1e-9 {
                below += 1;
            }
        }
        assert_eq!(below, 100);
    }

    #[test]
    fn probe_prompt_yields_requested_count() {
        let m = MockBackend::default();
        let req = ChatRequest {
            messages: vec![ChatMessage::user(
                "Here is the context for the image: a kitchen with a kettle\n\nNow, ask fifteen interesting but simple questions",
            )],
            temperature: 1.0,
            seed: None,
        };
        let text = m.chat(&req).unwrap().text;
        assert_eq!(text.lines().count(), 15);
        assert!(text.starts_with("1. "));
    }

    #[test]
    fn flaky_fails_then_recovers() {
        let f = Flaky::new(MockBackend::default(), 2);
        let req = ChatRequest { messages: vec![ChatMessage::user("hi")], temperature: 0.0, seed: None };
        assert!(f.chat(&req).is_err());
        assert!(f.chat(&req).is_err());
        assert!(f.chat(&req).is_ok());
        assert_eq!(f.calls(), 3);
    }

    #[test]
    fn grounding_rewards_context_overlap() {
        let ctx = "kitchen kettle stove window";
        assert!(grounding_score("the kettle near the stove", ctx) > grounding_score("a giraffe on a surfboard", ctx));
    }
}
