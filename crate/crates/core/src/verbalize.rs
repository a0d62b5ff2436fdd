//! Turning an image into text: concept retrieval, narratives, region
//! captions and the probe question loop, plus the context block the
//! generation prompts are built from.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::LazyLock;

use base64::Engine as _;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{render_regions, ColorPalette, DrawItem, RenderConfig};
use crate::backend::{
    BackendError, CaptionBackend, CaptionRequest, ChatBackend, ChatMessage, ChatRequest,
    EmbedBackend, EmbedRequest, VqaBackend, VqaRequest,
};
use crate::embedding::{retrieve_concepts, EmbeddingError, EmbeddingVector, LabelVocabulary};
use crate::model::{BoxGeometry, ImageRecord, ProbeQa, ReferenceMode, Region, VerbalizationBundle};
use crate::util::{derive_seed, number_word};

/// Instruction used to elicit probe questions. `{global descriptors}`,
/// `{local descriptors}` and `{count}` are substituted.
pub const PROBE_TEMPLATE: &str = "Here is the context for the image: {global descriptors}\n\n{local descriptors}\n\nNow, ask {count} interesting but simple questions that you want to ask so you can get more understanding about the image";

#[derive(Debug, Error)]
pub enum VerbalizeError {
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("vocabulary `{name}` has {available} labels, {k} requested")]
    VocabularyTooSmall { name: String, k: usize, available: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("backend returned an empty {0}")]
    EmptyOutput(&'static str),
    #[error("expected {expected} probe questions, parsed {parsed}")]
    TooFewQuestions { expected: usize, parsed: usize },
    #[error("unrecognized question list format at line {line}: {text:?}")]
    QuestionFormat { line: usize, text: String },
    #[error("bundle field `{field}`: {reason}")]
    Cardinality { field: &'static str, reason: String },
    #[error("region render failed: {0}")]
    Render(String),
    #[error("descriptor mask selects nothing")]
    EmptyMask,
    #[error("unknown descriptor `{0}`")]
    UnknownDescriptor(String),
}

/// How many items of each descriptor a bundle carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BundleShape {
    pub places: usize,
    pub objects: usize,
    pub concepts: usize,
    pub narratives: usize,
    pub probe_qas: usize,
}

impl Default for BundleShape {
    fn default() -> Self {
        Self {
            places: 2,
            objects: 3,
            concepts: 3,
            narratives: 5,
            probe_qas: 15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalVocabularies {
    pub places: LabelVocabulary,
    pub objects: LabelVocabulary,
    pub concepts: LabelVocabulary,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GlobalDescriptors {
    pub places: Vec<String>,
    pub objects: Vec<String>,
    pub concepts: Vec<String>,
}

fn top_labels(
    e: &EmbeddingVector,
    vocab: &LabelVocabulary,
    k: usize,
) -> Result<Vec<String>, VerbalizeError> {
    if k > vocab.len() {
        return Err(VerbalizeError::VocabularyTooSmall {
            name: vocab.name.clone(),
            k,
            available: vocab.len(),
        });
    }
    Ok(retrieve_concepts(e, vocab, k)?.into_iter().map(|(l, _)| l).collect())
}

pub fn build_global_descriptors(
    image_embedding: &EmbeddingVector,
    vocabs: &GlobalVocabularies,
    shape: &BundleShape,
) -> Result<GlobalDescriptors, VerbalizeError> {
    Ok(GlobalDescriptors {
        places: top_labels(image_embedding, &vocabs.places, shape.places)?,
        objects: top_labels(image_embedding, &vocabs.objects, shape.objects)?,
        concepts: top_labels(image_embedding, &vocabs.concepts, shape.concepts)?,
    })
}

pub fn encode_b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

/// Image embedding from the embedding backend.
pub fn embed_image(image_bytes: &[u8], backend: &dyn EmbedBackend) -> Result<EmbeddingVector, VerbalizeError> {
    let resp = backend.embed(&EmbedRequest {
        texts: None,
        image_b64: Some(encode_b64(image_bytes)),
    })?;
    let v = resp
        .vectors
        .into_iter()
        .next()
        .ok_or(VerbalizeError::EmptyOutput("image embedding"))?;
    Ok(EmbeddingVector::new(v)?)
}

/// Build a vocabulary by embedding each label through a prompt template
/// such as `"a photo of {label}"`.
pub fn embed_vocabulary(
    name: &str,
    labels: &[String],
    template: &str,
    backend: &dyn EmbedBackend,
) -> Result<LabelVocabulary, VerbalizeError> {
    let texts: Vec<String> = labels.iter().map(|l| template.replace("{label}", l)).collect();
    let resp = backend.embed(&EmbedRequest {
        texts: Some(texts),
        image_b64: None,
    })?;
    if resp.vectors.len() != labels.len() {
        return Err(VerbalizeError::EmptyOutput("vocabulary embedding"));
    }
    Ok(LabelVocabulary::normalized(name, labels.to_vec(), resp.vectors)?)
}

/// `n` narrative captions of the whole image at the given temperature.
pub fn sample_narratives(
    image_b64: &str,
    n: usize,
    temperature: f64,
    seed: u64,
    backend: &dyn CaptionBackend,
) -> Result<Vec<String>, VerbalizeError> {
    (0..n)
        .map(|i| {
            let resp = backend.caption(&CaptionRequest {
                image_b64: image_b64.to_string(),
                bbox: None,
                temperature: Some(temperature),
                seed: Some(derive_seed(seed, &["narrative", &i.to_string()])),
            })?;
            let text = resp.text.trim().to_string();
            if text.is_empty() {
                return Err(VerbalizeError::EmptyOutput("narrative"));
            }
            Ok(text)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RegionCaptions {
    pub captions: BTreeMap<u32, String>,
    pub errors: BTreeMap<u32, String>,
}

/// Caption each region from an image variant with that region's box drawn in.
pub fn describe_regions(
    image_bytes: &[u8],
    regions: &[Region],
    backend: &dyn CaptionBackend,
    palette: &ColorPalette,
    render: &RenderConfig,
) -> RegionCaptions {
    let mut out = RegionCaptions::default();
    for r in regions {
        let item = DrawItem {
            bbox: r.bbox,
            color_index: r.region_id,
        };
        let result = render_regions(image_bytes, &[item], palette, render)
            .map_err(|e| e.to_string())
            .and_then(|png| {
                backend
                    .caption(&CaptionRequest {
                        image_b64: encode_b64(&png),
                        bbox: Some(r.bbox),
                        temperature: None,
                        seed: None,
                    })
                    .map_err(|e| e.to_string())
            });
        match result {
            Ok(resp) if !resp.text.trim().is_empty() => {
                out.captions.insert(r.region_id, resp.text.trim().to_string());
            }
            Ok(_) => {
                out.errors.insert(r.region_id, "empty caption".into());
            }
            Err(e) => {
                out.errors.insert(r.region_id, e);
            }
        }
    }
    out
}

static NUMBERED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*\d+\s*[.)]\s*(.+?)\s*$").unwrap());

/// Questions from a numbered list (`1. ...`, `2) ...`) or one question per line.
///
/// A list mixing the two styles, or any unnumbered line that is not a
/// question, is rejected.
pub fn parse_questions(text: &str) -> Result<Vec<String>, VerbalizeError> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect();
    let numbered = lines.first().is_some_and(|(_, l)| NUMBERED.is_match(l));
    lines
        .into_iter()
        .map(|(line, l)| {
            let q = if numbered {
                NUMBERED.captures(l).map(|c| c[1].to_string())
            } else if l.ends_with('?') && !NUMBERED.is_match(l) {
                Some(l.to_string())
            } else {
                None
            };
            q.ok_or_else(|| VerbalizeError::QuestionFormat {
                line,
                text: l.to_string(),
            })
        })
        .collect()
}

fn global_block(globals: &GlobalDescriptors, narratives: &[String]) -> String {
    let mut s = format!(
        "Places: {}\nObjects: {}\nConcepts: {}",
        globals.places.join(", "),
        globals.objects.join(", "),
        globals.concepts.join(", ")
    );
    if !narratives.is_empty() {
        s.push_str("\nNarratives:");
        for n in narratives {
            let _ = write!(s, "\n* {n}");
        }
    }
    s
}

pub fn probe_prompt(
    globals: &GlobalDescriptors,
    narratives: &[String],
    captions: &BTreeMap<u32, String>,
    n: usize,
) -> String {
    let mut local = String::from("Regions:");
    for c in captions.values() {
        let _ = write!(local, "\n- {c}");
    }
    let count = number_word(n);
    PROBE_TEMPLATE
        .replace("{global descriptors}", &global_block(globals, narratives))
        .replace("{local descriptors}", &local)
        .replace("{count}", &count)
}

/// Ask the LLM for `n` questions in one call, then answer each with VQA.
#[allow(clippy::too_many_arguments)]
pub fn generate_probe_qas(
    globals: &GlobalDescriptors,
    narratives: &[String],
    captions: &BTreeMap<u32, String>,
    image_b64: &str,
    n: usize,
    seed: u64,
    llm: &dyn ChatBackend,
    vqa: &dyn VqaBackend,
) -> Result<Vec<ProbeQa>, VerbalizeError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let prompt = probe_prompt(globals, narratives, captions, n);
    let resp = llm.chat(&ChatRequest {
        messages: vec![ChatMessage::user(prompt)],
        temperature: 0.0,
        seed: Some(seed),
    })?;
    let questions = parse_questions(&resp.text)?;
    if questions.len() < n {
        return Err(VerbalizeError::TooFewQuestions {
            expected: n,
            parsed: questions.len(),
        });
    }
    questions
        .into_iter()
        .take(n)
        .map(|question| {
            let answer = vqa
                .vqa(&VqaRequest {
                    image_b64: image_b64.to_string(),
                    question: question.clone(),
                })?
                .answer;
            Ok(ProbeQa { question, answer })
        })
        .collect()
}

fn exact(field: &'static str, got: usize, want: usize) -> Result<(), VerbalizeError> {
    if got != want {
        return Err(VerbalizeError::Cardinality {
            field,
            reason: format!("expected {want} items, got {got}"),
        });
    }
    Ok(())
}

pub fn assemble_bundle(
    image: &ImageRecord,
    globals: GlobalDescriptors,
    narratives: Vec<String>,
    region_captions: BTreeMap<u32, String>,
    probe_qas: Vec<ProbeQa>,
    shape: &BundleShape,
) -> Result<VerbalizationBundle, VerbalizeError> {
    exact("places", globals.places.len(), shape.places)?;
    exact("objects", globals.objects.len(), shape.objects)?;
    exact("concepts", globals.concepts.len(), shape.concepts)?;
    exact("narratives", narratives.len(), shape.narratives)?;
    exact("probe_qas", probe_qas.len(), shape.probe_qas)?;
    let known: BTreeSet<u32> = image.region_ids().into_iter().collect();
    if let Some(id) = region_captions.keys().find(|id| !known.contains(id)) {
        return Err(VerbalizeError::Cardinality {
            field: "region_captions",
            reason: format!("region {id} is not in image {}", image.image_id),
        });
    }
    let region_boxes: BTreeMap<u32, BoxGeometry> = image
        .regions
        .iter()
        .filter(|r| region_captions.contains_key(&r.region_id))
        .map(|r| (r.region_id, r.bbox))
        .collect();
    Ok(VerbalizationBundle {
        image_id: image.image_id.clone(),
        places: globals.places,
        objects: globals.objects,
        concepts: globals.concepts,
        narratives,
        region_captions,
        probe_qas,
        region_boxes,
    })
}

/// Which descriptor families appear in a rendered context block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptorMask {
    pub concepts: bool,
    pub narratives: bool,
    pub local: bool,
    pub qas: bool,
}

impl Default for DescriptorMask {
    fn default() -> Self {
        Self::all()
    }
}

impl DescriptorMask {
    pub const NAMES: [&'static str; 5] = ["concepts", "narratives", "global", "local", "qas"];

    pub fn all() -> Self {
        Self {
            concepts: true,
            narratives: true,
            local: true,
            qas: true,
        }
    }

    /// Mask enabling the named descriptors; `global` means concepts and narratives.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self, VerbalizeError> {
        let mut m = Self {
            concepts: false,
            narratives: false,
            local: false,
            qas: false,
        };
        for n in names {
            match n.as_ref() {
                "concepts" => m.concepts = true,
                "narratives" => m.narratives = true,
                "global" => {
                    m.concepts = true;
                    m.narratives = true;
                }
                "local" => m.local = true,
                "qas" => m.qas = true,
                other => return Err(VerbalizeError::UnknownDescriptor(other.to_string())),
            }
        }
        if m.is_empty() {
            return Err(VerbalizeError::EmptyMask);
        }
        Ok(m)
    }

    pub fn is_empty(&self) -> bool {
        !(self.concepts || self.narratives || self.local || self.qas)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        for (on, name) in [
            (self.concepts, "concepts"),
            (self.narratives, "narratives"),
            (self.local, "local"),
            (self.qas, "qas"),
        ] {
            if on {
                parts.push(name);
            }
        }
        parts.join("+")
    }
}

pub fn format_box(b: &BoxGeometry) -> String {
    format!("({:.2}, {:.2}, {:.2}, {:.2})", b.x, b.y, b.w, b.h)
}

/// The descriptor block shared by all prompts for one image.
///
/// Sections appear in a fixed order: global labels, narratives, regions,
/// probe QAs. In id mode every region is listed as `[id] (x, y, w, h): caption`
/// (the caption is omitted when local descriptors are masked); in
/// description mode only captions are listed, without ids or coordinates.
pub fn render_context(bundle: &VerbalizationBundle, mode: ReferenceMode, mask: &DescriptorMask) -> String {
    let mut s = String::new();
    if mask.concepts {
        let _ = writeln!(s, "Places: {}", bundle.places.join(", "));
        let _ = writeln!(s, "Objects: {}", bundle.objects.join(", "));
        let _ = writeln!(s, "Concepts: {}", bundle.concepts.join(", "));
    }
    if mask.narratives && !bundle.narratives.is_empty() {
        s.push_str("Narratives:\n");
        for n in &bundle.narratives {
            let _ = writeln!(s, "* {n}");
        }
    }
    match mode {
        ReferenceMode::IdBased if !bundle.region_boxes.is_empty() => {
            s.push_str("Regions:\n");
            for (id, b) in &bundle.region_boxes {
                match bundle.region_captions.get(id).filter(|_| mask.local) {
                    Some(c) => writeln!(s, "[{id}] {}: {c}", format_box(b)),
                    None => writeln!(s, "[{id}] {}", format_box(b)),
                }
                .ok();
            }
        }
        ReferenceMode::DescriptionBased if mask.local && !bundle.region_captions.is_empty() => {
            s.push_str("Regions:\n");
            for c in bundle.region_captions.values() {
                let _ = writeln!(s, "- {c}");
            }
        }
        _ => {}
    }
    if mask.qas && !bundle.probe_qas.is_empty() {
        s.push_str("Questions and answers:\n");
        for qa in &bundle.probe_qas {
            let _ = writeln!(s, "Q: {} A: {}", qa.question, qa.answer);
        }
    }
    s.trim_end().to_string()
}

/// Everything needed to verbalize one image.
pub struct VerbalizeHandles<'a> {
    pub embed: &'a dyn EmbedBackend,
    pub chat: &'a dyn ChatBackend,
    pub caption: &'a dyn CaptionBackend,
    pub vqa: &'a dyn VqaBackend,
    pub vocabs: &'a GlobalVocabularies,
    pub palette: &'a ColorPalette,
    pub render: &'a RenderConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerbalizeConfig {
    pub shape: BundleShape,
    pub narrative_temperature: f64,
    pub label_template: String,
}

impl Default for VerbalizeConfig {
    fn default() -> Self {
        Self {
            shape: BundleShape::default(),
            narrative_temperature: 1.1,
            label_template: "a photo of {label}".into(),
        }
    }
}

/// Run every verbalizer for one image and assemble its bundle.
///
/// A region whose caption fails makes the whole image fail, since id-mode
/// prompts must describe every listed region.
pub fn verbalize_image(
    image: &ImageRecord,
    image_bytes: &[u8],
    handles: &VerbalizeHandles<'_>,
    cfg: &VerbalizeConfig,
    seed: u64,
) -> Result<VerbalizationBundle, VerbalizeError> {
    let b64 = encode_b64(image_bytes);
    let image_seed = derive_seed(seed, &["verbalize", &image.image_id]);
    let e = embed_image(image_bytes, handles.embed)?;
    let globals = build_global_descriptors(&e, handles.vocabs, &cfg.shape)?;
    let narratives = sample_narratives(
        &b64,
        cfg.shape.narratives,
        cfg.narrative_temperature,
        image_seed,
        handles.caption,
    )?;
    let regions = describe_regions(image_bytes, &image.regions, handles.caption, handles.palette, handles.render);
    if let Some((id, err)) = regions.errors.iter().next() {
        return Err(VerbalizeError::Render(format!("region {id}: {err}")));
    }
    let qas = generate_probe_qas(
        &globals,
        &narratives,
        &regions.captions,
        &b64,
        cfg.shape.probe_qas,
        image_seed,
        handles.chat,
        handles.vqa,
    )?;
    assemble_bundle(image, globals, narratives, regions.captions, qas, &cfg.shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::MockBackend;
    use crate::backend::{CaptionResponse, ChatResponse, VqaResponse};
    use crate::mentions::has_bracket_ids;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn png() -> Vec<u8> {
        crate::augment::encode_png(&image::RgbImage::from_pixel(20, 20, image::Rgb([1, 2, 3]))).unwrap()
    }

    fn region(id: u32, x: f64) -> Region {
        Region {
            region_id: id,
            bbox: BoxGeometry::new(x, 0.1, 0.2, 0.3).unwrap(),
            class_label: "cup".into(),
            detector_confidence: 0.8,
            is_person: false,
        }
    }

    fn image(n: u32) -> ImageRecord {
        ImageRecord {
            image_id: "img".into(),
            width_px: 20,
            height_px: 20,
            source_uri: "img.png".into(),
            regions: (0..n).map(|i| region(i, 0.2 * i as f64)).collect(),
        }
    }

    fn globals() -> GlobalDescriptors {
        GlobalDescriptors {
            places: vec!["street".into(), "plaza".into()],
            objects: vec!["car".into(), "bus".into(), "bench".into()],
            concepts: vec!["traffic".into(), "city".into(), "commute".into()],
        }
    }

    fn qas(n: usize) -> Vec<ProbeQa> {
        (0..n)
            .map(|i| ProbeQa {
                question: format!("What is item {i}?"),
                answer: format!("a thing {i}"),
            })
            .collect()
    }

    struct EchoBox;
    impl CaptionBackend for EchoBox {
        fn caption(&self, req: &CaptionRequest) -> Result<CaptionResponse, BackendError> {
            let b = req.bbox.unwrap();
            Ok(CaptionResponse {
                text: format!("box {}", format_box(&b)),
            })
        }
    }

    struct Canned(String, AtomicUsize);
    impl ChatBackend for Canned {
        fn chat(&self, _: &ChatRequest) -> Result<ChatResponse, BackendError> {
            self.1.fetch_add(1, Ordering::SeqCst);
            Ok(ChatResponse { text: self.0.clone() })
        }
    }

    struct ReverseVqa;
    impl VqaBackend for ReverseVqa {
        fn vqa(&self, req: &VqaRequest) -> Result<VqaResponse, BackendError> {
            Ok(VqaResponse {
                answer: req.question.chars().rev().collect(),
            })
        }
    }

    #[test]
    fn narratives_count_and_determinism() {
        let m = MockBackend::with_seed(3);
        let b64 = encode_b64(&png());
        let a = sample_narratives(&b64, 5, 1.1, 9, &m).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, sample_narratives(&b64, 5, 1.1, 9, &m).unwrap());
        assert!(sample_narratives(&b64, 0, 1.1, 9, &m).unwrap().is_empty());
    }

    #[test]
    fn region_requests_are_isolated() {
        let img = image(3);
        let out = describe_regions(&png(), &img.regions, &EchoBox, &ColorPalette::default(), &RenderConfig::default());
        assert_eq!(out.captions.keys().copied().collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(out.captions[&1].contains(&format_box(&img.regions[1].bbox)));
        assert!(out.errors.is_empty());
        let none = describe_regions(&png(), &[], &EchoBox, &ColorPalette::default(), &RenderConfig::default());
        assert!(none.captions.is_empty());
    }

    #[test]
    fn probe_prompt_is_the_fixed_instruction() {
        let p = probe_prompt(&globals(), &[], &BTreeMap::new(), 15);
        assert!(p.starts_with("Here is the context for the image: Places: street, plaza"));
        assert!(p.ends_with(
            "Now, ask fifteen interesting but simple questions that you want to ask so you can get more understanding about the image"
        ));
    }

    #[test]
    fn probe_counts() {
        let b64 = encode_b64(&png());
        let list = |n: usize| (1..=n).map(|i| format!("{i}. Question {i}?\n")).collect::<String>();
        let ok = Canned(list(15), AtomicUsize::new(0));
        let got = generate_probe_qas(&globals(), &[], &BTreeMap::new(), &b64, 15, 0, &ok, &ReverseVqa).unwrap();
        assert_eq!(got.len(), 15);
        assert_eq!(ok.1.load(Ordering::SeqCst), 1);
        assert_eq!(got[0].answer, "?1 noitseuQ");
        let short = Canned(list(14), AtomicUsize::new(0));
        let err = generate_probe_qas(&globals(), &[], &BTreeMap::new(), &b64, 15, 0, &short, &ReverseVqa).unwrap_err();
        assert!(matches!(err, VerbalizeError::TooFewQuestions { parsed: 14, .. }));
    }

    #[test]
    fn question_formats() {
        assert_eq!(parse_questions("1. A?\n2) B?").unwrap(), vec!["A?", "B?"]);
        assert_eq!(parse_questions("A?\n\nB?").unwrap(), vec!["A?", "B?"]);
        assert!(parse_questions("Sure, here you go:\n1. A?").is_err());
        assert!(parse_questions("1. A?\nB?").is_err());
    }

    #[test]
    fn bundle_cardinalities() {
        let img = image(2);
        let caps = BTreeMap::from([(0, "a red car".to_string()), (1, "a tall man".to_string())]);
        let narr: Vec<String> = (0..5).map(|i| format!("narrative {i}")).collect();
        let b = assemble_bundle(&img, globals(), narr.clone(), caps.clone(), qas(15), &BundleShape::default()).unwrap();
        assert_eq!(
            (b.places.len(), b.objects.len(), b.concepts.len(), b.narratives.len(), b.probe_qas.len()),
            (2, 3, 3, 5, 15)
        );
        let ctx = render_context(&b, ReferenceMode::IdBased, &DescriptorMask::all());
        for c in caps.values() {
            assert!(ctx.contains(c.as_str()));
        }
        let err = assemble_bundle(&img, globals(), vec![], caps, qas(15), &BundleShape::default()).unwrap_err();
        assert!(err.to_string().contains("narratives"));
    }

    #[test]
    fn description_context_has_no_ids() {
        let img = image(2);
        let caps = BTreeMap::from([(0, "a red car".to_string()), (1, "a tall man".to_string())]);
        let narr: Vec<String> = (0..5).map(|i| format!("narrative {i}")).collect();
        let b = assemble_bundle(&img, globals(), narr, caps, qas(15), &BundleShape::default()).unwrap();
        let id = render_context(&b, ReferenceMode::IdBased, &DescriptorMask::all());
        assert!(id.contains("[0] (0.00, 0.10, 0.20, 0.30): a red car"));
        let desc = render_context(&b, ReferenceMode::DescriptionBased, &DescriptorMask::all());
        assert!(!has_bracket_ids(&desc));
        assert!(desc.contains("- a tall man"));
        let order: Vec<usize> = ["Places:", "Narratives:", "Regions:", "Questions and answers:"]
            .iter()
            .map(|h| id.find(h).unwrap())
            .collect();
        assert!(order.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn masks() {
        assert!(matches!(DescriptorMask::from_names::<&str>(&[]), Err(VerbalizeError::EmptyMask)));
        let g = DescriptorMask::from_names(&["global"]).unwrap();
        assert!(g.concepts && g.narratives && !g.local && !g.qas);
        assert!(DescriptorMask::from_names(&["colors"]).is_err());
    }

    #[test]
    fn small_vocab_is_rejected() {
        let one = LabelVocabulary::new("places", vec!["beach".into()], vec![vec![1.0, 0.0]]).unwrap();
        let two = LabelVocabulary::normalized(
            "objects",
            (0..3).map(|i| format!("o{i}")).collect(),
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
        )
        .unwrap();
        let vocabs = GlobalVocabularies {
            places: one,
            objects: two.clone(),
            concepts: two,
        };
        let e = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            build_global_descriptors(&e, &vocabs, &BundleShape::default()),
            Err(VerbalizeError::VocabularyTooSmall { .. })
        ));
    }
}
