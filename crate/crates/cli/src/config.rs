//! Run configuration, read from one TOML file.
//!
//! Relative paths in the file are resolved against the file's directory.
//! Per-stage seeds are derived from the run seed, so `--seed` alone
//! re-seeds the whole pipeline.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use qarsmith_core::augment::{ExportFormat, RenderConfig};
use qarsmith_core::backend::RetryPolicy;
use qarsmith_core::critic::TrainConfig;
use qarsmith_core::curation::CurationConfig;
use qarsmith_core::dedup::DedupText;
use qarsmith_core::filter::DEFAULT_THRESHOLD;
use qarsmith_core::generate::PromptTemplates;
use qarsmith_core::util::{derive_seed, sha256_hex};
use qarsmith_core::verbalize::{DescriptorMask, VerbalizeConfig};

pub const API_KEY_ENV: &str = "QARSMITH_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendMode {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    #[default]
    Critic,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockSection {
    pub dim: usize,
    pub hallucination_rate: f64,
    pub fuzz_rate: f64,
}

impl Default for MockSection {
    fn default() -> Self {
        Self {
            dim: 64,
            hallucination_rate: 0.35,
            fuzz_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub mode: BackendMode,
    /// Base URL used for any endpoint not given separately.
    pub url: Option<String>,
    pub chat_url: Option<String>,
    pub embed_url: Option<String>,
    pub caption_url: Option<String>,
    pub vqa_url: Option<String>,
    pub score_url: Option<String>,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
    pub mock: MockSection,
    pub scorer: ScorerKind,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            mode: BackendMode::Mock,
            url: None,
            chat_url: None,
            embed_url: None,
            caption_url: None,
            vqa_url: None,
            score_url: None,
            timeout_secs: 60,
            retry: RetryPolicy::default(),
            mock: MockSection::default(),
            scorer: ScorerKind::Critic,
        }
    }
}

impl BackendSection {
    /// URL for one endpoint family, falling back to the shared base.
    pub fn endpoint(&self, name: &str) -> Option<&str> {
        let specific = match name {
            "chat" => &self.chat_url,
            "embed" => &self.embed_url,
            "caption" => &self.caption_url,
            "vqa" => &self.vqa_url,
            "score" => &self.score_url,
            _ => &None,
        };
        specific.as_deref().or(self.url.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputSection {
    /// JSONL of detector records.
    pub detections: PathBuf,
    /// Directory image `source_uri`s are relative to; defaults to the
    /// detections file's directory.
    pub images_root: Option<PathBuf>,
    /// Label lists (`.txt`, one per line) or prepared vocabularies (`.json`).
    pub places: PathBuf,
    pub objects: PathBuf,
    pub concepts: PathBuf,
}

impl InputSection {
    pub fn images_root(&self) -> PathBuf {
        self.images_root.clone().unwrap_or_else(|| {
            self.detections
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_default()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplatePaths {
    pub id_based: Option<PathBuf>,
    pub description_based: Option<PathBuf>,
    pub followup: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    pub rounds_per_mode: u32,
    pub qars_per_round: u32,
    pub temperature: f64,
    /// Descriptor groups shown to the LLM: concepts, narratives, global, local, qas.
    pub descriptors: Vec<String>,
    pub templates: TemplatePaths,
}

impl Default for GenerationSection {
    fn default() -> Self {
        Self {
            rounds_per_mode: 3,
            qars_per_round: 3,
            temperature: 0.8,
            descriptors: ["concepts", "narratives", "local", "qas"].map(String::from).to_vec(),
            templates: TemplatePaths::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DedupSection {
    pub text: DedupText,
    /// Annotation candidates kept per image.
    pub representatives: usize,
}

impl Default for DedupSection {
    fn default() -> Self {
        Self {
            text: DedupText::FullQar,
            representatives: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationSection {
    pub bind: String,
    pub required_annotators: usize,
    pub required_votes: usize,
    /// Rate candidates with scripted annotators instead of serving them.
    pub simulate: bool,
    pub simulated_annotators: usize,
    pub simulated_noise: f64,
}

impl Default for AnnotationSection {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8088".into(),
            required_annotators: 2,
            required_votes: 3,
            simulate: false,
            simulated_annotators: 2,
            simulated_noise: 0.08,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lambda: f64,
    pub hidden_dim: usize,
}

impl Default for CriticSection {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 8,
            max_epochs: 400,
            lambda: 1.0,
            hidden_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub threshold: f64,
    pub baseline_repetitions: usize,
}

impl Default for FilterSection {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            baseline_repetitions: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub cap: usize,
    pub multiplicity: u32,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self { cap: 8, multiplicity: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportSection {
    pub format: ExportFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub seed: u64,
    pub run_dir: PathBuf,
    /// Upper bound on images processed at once inside a stage.
    pub concurrency: usize,
    pub backend: BackendSection,
    pub inputs: InputSection,
    pub curation: CurationConfig,
    pub verbalize: VerbalizeConfig,
    pub render: RenderConfig,
    pub generation: GenerationSection,
    pub dedup: DedupSection,
    pub annotation: AnnotationSection,
    pub critic: CriticSection,
    pub filter: FilterSection,
    pub augment: AugmentSection,
    pub export: ExportSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            seed: 0,
            run_dir: PathBuf::from("runs/default"),
            concurrency: 4,
            backend: BackendSection::default(),
            inputs: InputSection::default(),
            curation: CurationConfig::default(),
            verbalize: VerbalizeConfig::default(),
            render: RenderConfig::default(),
            generation: GenerationSection::default(),
            dedup: DedupSection::default(),
            annotation: AnnotationSection::default(),
            critic: CriticSection::default(),
            filter: FilterSection::default(),
            augment: AugmentSection::default(),
            export: ExportSection::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if !p.as_os_str().is_empty() && p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).context("parsing config")?;
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let parent = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let base = std::fs::canonicalize(parent).with_context(|| format!("resolving {}", parent.display()))?;
        Self::from_toml(&text, &base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.run_dir);
        let i = &mut self.inputs;
        for p in [&mut i.detections, &mut i.places, &mut i.objects, &mut i.concepts] {
            resolve(base, p);
        }
        if let Some(p) = i.images_root.as_mut() {
            resolve(base, p);
        }
        let t = &mut self.generation.templates;
        for p in [&mut t.id_based, &mut t.description_based, &mut t.followup].into_iter().flatten() {
            resolve(base, p);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.concurrency == 0 {
            bail!("concurrency must be at least 1");
        }
        if self.backend.mode == BackendMode::Http {
            let mut needed = vec!["chat", "embed", "caption", "vqa"];
            if self.backend.scorer == ScorerKind::Remote {
                needed.push("score");
            }
            for name in needed {
                match self.backend.endpoint(name) {
                    Some(u) if u.starts_with("http://") || u.starts_with("https://") => {}
                    Some(u) => bail!("backend endpoint for {name} is not an http(s) URL: {u}"),
                    None => bail!("backend endpoint for {name} is not configured"),
                }
            }
        }
        if !(0.0..=1.0).contains(&self.filter.threshold) {
            bail!("filter threshold must lie in [0,1]");
        }
        if self.dedup.representatives == 0 {
            bail!("dedup.representatives must be at least 1");
        }
        self.curation.validate().map_err(anyhow::Error::msg)?;
        self.mask()?;
        Ok(())
    }

    pub fn mask(&self) -> Result<DescriptorMask> {
        DescriptorMask::from_names(&self.generation.descriptors).map_err(anyhow::Error::msg)
    }

    pub fn templates(&self) -> Result<PromptTemplates> {
        let mut t = PromptTemplates::default();
        let paths = &self.generation.templates;
        for (slot, path) in [
            (&mut t.id_based, &paths.id_based),
            (&mut t.description_based, &paths.description_based),
            (&mut t.followup, &paths.followup),
        ] {
            if let Some(p) = path {
                *slot = std::fs::read_to_string(p).with_context(|| format!("reading template {}", p.display()))?;
            }
        }
        t.validate().map_err(anyhow::Error::msg)?;
        Ok(t)
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, &["stage", stage])
    }

    pub fn curation_config(&self) -> CurationConfig {
        CurationConfig {
            seed: self.stage_seed("curate"),
            ..self.curation.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let c = &self.critic;
        TrainConfig {
            learning_rate: c.learning_rate,
            batch_size: c.batch_size,
            max_epochs: c.max_epochs,
            seed: self.stage_seed("train-critic"),
            lambda: c.lambda,
            hidden_dim: c.hidden_dim,
        }
    }

    /// Digest of everything that affects stage outputs, including the
    /// prompt templates. Paths, the run directory and the concurrency cap
    /// are left out.
    pub fn digest(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(m) = v.as_object_mut() {
            m.remove("run_dir");
            m.remove("concurrency");
            m.remove("run_id");
        }
        let templates = self.templates()?;
        let text = format!("{}\u{0}{}", serde_json::to_string(&v)?, templates.digest());
        Ok(sha256_hex(text.as_bytes()))
    }
}
