//! Stage graph and stage implementations.
//!
//! A stage is complete when its primary output (the last one it writes) is
//! in the manifest. Re-running a complete stage is a no-op unless forced;
//! forcing a stage also clears every stage downstream of it.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use qarsmith_annotate::simulate::SimulatedAnnotators;
use qarsmith_annotate::{AnnotationService, ServiceConfig};
use qarsmith_backend::HttpBackend;
use qarsmith_core::augment::{
    augment_instance, decode_rgb, encode_png, export_training_pairs, pairs_to_tsv, render_regions,
    AugmentedInstance, ColorPalette, DrawItem, ExportFormat, TrainingPair, VaryConfig,
};
use qarsmith_core::backend::mock::{MockBackend, MockConfig};
use qarsmith_core::backend::{Backends, RetryPolicy, Retrying};
use qarsmith_core::critic::{
    accuracy, auc, evaluate_critic, featurize_batch, score_instance, train_critic, Checkpoint, CriticParams, EpochLog,
    Sample,
};
use qarsmith_core::curation::{curate_regions, DetectorRecord};
use qarsmith_core::dedup::{agglomerative_cluster, embed_texts, select_representatives, ClusterAssignment, DedupText};
use qarsmith_core::embedding::LabelVocabulary;
use qarsmith_core::filter::{
    default_thresholds, filter_by_threshold, precision_curve, random_baseline, BaselinePoint, RemoteScorer, Scorer,
    ThresholdCurvePoint,
};
use qarsmith_core::generate::{run_generation, DropRecord, GenerationConfig};
use qarsmith_core::model::{
    CriticLabel, CriticScore, ImageRecord, QarInstance, ReferenceMode, Validate, VerbalizationBundle,
};
use qarsmith_core::stats::{build_report, histograms_to_csv, report_text, QuestionTypeRules};
use qarsmith_core::store::Store;
use qarsmith_core::verbalize::{
    embed_vocabulary, render_context, verbalize_image, DescriptorMask, GlobalVocabularies, VerbalizeHandles,
};

use crate::config::{BackendMode, RunConfig, ScorerKind, API_KEY_ENV};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Curate,
    Verbalize,
    Generate,
    Dedup,
    Annotate,
    TrainCritic,
    Score,
    Filter,
    Augment,
    Export,
    Stats,
}

impl Stage {
    /// Pipeline order; `run-all` follows it.
    pub const ALL: [Stage; 11] = [
        Stage::Curate,
        Stage::Verbalize,
        Stage::Generate,
        Stage::Dedup,
        Stage::Annotate,
        Stage::TrainCritic,
        Stage::Score,
        Stage::Filter,
        Stage::Augment,
        Stage::Export,
        Stage::Stats,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Curate => "curate",
            Stage::Verbalize => "verbalize",
            Stage::Generate => "generate",
            Stage::Dedup => "dedup",
            Stage::Annotate => "annotate",
            Stage::TrainCritic => "train-critic",
            Stage::Score => "score",
            Stage::Filter => "filter",
            Stage::Augment => "augment",
            Stage::Export => "export",
            Stage::Stats => "stats",
        }
    }

    pub fn parse(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Curate => &[],
            Stage::Verbalize => &[Stage::Curate],
            Stage::Generate => &[Stage::Verbalize],
            Stage::Dedup => &[Stage::Generate],
            Stage::Annotate => &[Stage::Dedup],
            Stage::TrainCritic => &[Stage::Annotate],
            Stage::Score => &[Stage::TrainCritic],
            Stage::Filter => &[Stage::Score],
            Stage::Augment => &[Stage::Filter],
            Stage::Export => &[Stage::Augment],
            Stage::Stats => &[Stage::Generate],
        }
    }

    /// Store stages written, primary output last.
    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::Curate => &["curate_skips", "images"],
            Stage::Verbalize => &["verbalize_skips", "bundles"],
            Stage::Generate => &["drops", "instances"],
            Stage::Dedup => &["clusters", "candidates"],
            Stage::Annotate => &["rating_tasks", "ratings", "verdicts", "labels"],
            Stage::TrainCritic => &["training_log", "critic_eval", "critic"],
            Stage::Score => &["scores"],
            Stage::Filter => &["filter_curve", "filter_baseline", "filtered"],
            Stage::Augment => &["augmented"],
            Stage::Export => &["export_issues", "training_pairs"],
            Stage::Stats => &["stats"],
        }
    }

    pub fn primary(self) -> &'static str {
        self.outputs().last().expect("every stage writes something")
    }

    /// Stages that depend on this one, directly or not.
    pub fn dependents(self) -> Vec<Stage> {
        let mut out: BTreeSet<Stage> = BTreeSet::new();
        let mut frontier = vec![self];
        while let Some(s) = frontier.pop() {
            for t in Stage::ALL {
                if t.deps().contains(&s) && out.insert(t) {
                    frontier.push(t);
                }
            }
        }
        out.into_iter().collect()
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// An image left out by a stage, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub image_id: String,
    pub stage: String,
    pub reason: String,
}

impl Validate for SkipRecord {
    fn check(&self) -> Result<(), String> {
        if self.image_id.is_empty() {
            return Err("image_id is empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StageStatus {
    Ran { summary: String },
    AlreadyComplete,
}

/// Map `f` over `items` on up to `cap` threads, keeping input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], cap: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let workers = cap.clamp(1, items.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every slot filled"))
        .collect()
}

pub fn build_backends(cfg: &RunConfig) -> Result<Backends> {
    let b = &cfg.backend;
    match b.mode {
        BackendMode::Mock => {
            let mock = Arc::new(MockBackend::new(MockConfig {
                seed: cfg.stage_seed("mock"),
                dim: b.mock.dim,
                hallucination_rate: b.mock.hallucination_rate,
                fuzz_rate: b.mock.fuzz_rate,
            }));
            let r = Arc::new(Retrying::new(mock, RetryPolicy::immediate()));
            Ok(Backends {
                embed: r.clone(),
                chat: r.clone(),
                caption: r.clone(),
                vqa: r.clone(),
                score: Some(r),
            })
        }
        BackendMode::Http => {
            let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
            let timeout = Duration::from_secs(b.timeout_secs);
            let client = |name: &str| -> Result<Arc<Retrying<HttpBackend>>> {
                let url = b
                    .endpoint(name)
                    .ok_or_else(|| anyhow!("backend endpoint for {name} is not configured"))?;
                let http = HttpBackend::new(url, key.clone(), timeout).map_err(anyhow::Error::msg)?;
                Ok(Arc::new(Retrying::new(http, b.retry.clone())))
            };
            let score = match b.endpoint("score") {
                Some(_) => Some(client("score")? as Arc<dyn qarsmith_core::backend::ScoreBackend>),
                None => None,
            };
            Ok(Backends {
                embed: client("embed")?,
                chat: client("chat")?,
                caption: client("caption")?,
                vqa: client("vqa")?,
                score,
            })
        }
    }
}

pub struct Pipeline {
    pub cfg: RunConfig,
    backends: Backends,
    store: Store,
    pub quiet: bool,
}

fn index_by<T, K: Ord>(items: Vec<T>, key: impl Fn(&T) -> K) -> BTreeMap<K, T> {
    items.into_iter().map(|t| (key(&t), t)).collect()
}

impl Pipeline {
    /// Open (or create) the run directory for this config.
    ///
    /// A run created under a different config digest is refused unless
    /// `force` is set, in which case the manifest is re-keyed.
    pub fn open(cfg: RunConfig, force: bool) -> Result<Self> {
        cfg.validate()?;
        let backends = build_backends(&cfg)?;
        Self::with_backends(cfg, backends, force)
    }

    pub fn with_backends(cfg: RunConfig, backends: Backends, force: bool) -> Result<Self> {
        let digest = cfg.digest()?;
        let mut store = Store::open_or_create(&cfg.run_dir, &cfg.run_id, cfg.seed, &digest)
            .with_context(|| format!("opening run directory {}", cfg.run_dir.display()))?;
        if store.manifest().config_digest != digest {
            if !force {
                bail!(
                    "run directory {} was created with a different config (digest {}); pass --force to re-key it",
                    cfg.run_dir.display(),
                    store.manifest().config_digest
                );
            }
            store.set_config_digest(&digest)?;
        }
        Ok(Self {
            cfg,
            backends,
            store,
            quiet: false,
        })
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn note(&self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        self.store.has_stage(stage.primary())
    }

    pub fn check_deps(&self, stage: Stage) -> Result<()> {
        for dep in stage.deps() {
            if !self.is_complete(*dep) {
                bail!("requires stage: {dep}");
            }
        }
        Ok(())
    }

    fn clear_outputs(&mut self, stage: Stage) -> Result<()> {
        for out in stage.outputs() {
            self.store.remove_stage(out)?;
        }
        Ok(())
    }

    /// Dependency and completion checks shared by every stage entry point.
    /// Returns false when the stage is complete and not forced. Otherwise
    /// downstream outputs are cleared, and with `reset_own` so are this
    /// stage's partial outputs.
    pub fn begin_stage(&mut self, stage: Stage, force: bool, reset_own: bool) -> Result<bool> {
        self.check_deps(stage)?;
        if self.is_complete(stage) && !force {
            self.note(&format!("{stage}: already complete"));
            return Ok(false);
        }
        for d in stage.dependents() {
            if d.outputs().iter().any(|o| self.store.has_stage(o)) {
                self.note(&format!("{stage}: clearing downstream stage {d}"));
                self.clear_outputs(d)?;
            }
        }
        if reset_own || force {
            self.clear_outputs(stage)?;
        }
        Ok(true)
    }

    pub fn run_stage(&mut self, stage: Stage, force: bool) -> Result<StageStatus> {
        if !self.begin_stage(stage, force, true)? {
            return Ok(StageStatus::AlreadyComplete);
        }
        let summary = match stage {
            Stage::Curate => self.curate()?,
            Stage::Verbalize => self.verbalize()?,
            Stage::Generate => self.generate()?,
            Stage::Dedup => self.dedup()?,
            Stage::Annotate => self.annotate_simulated()?,
            Stage::TrainCritic => self.train()?,
            Stage::Score => self.score()?,
            Stage::Filter => self.filter()?,
            Stage::Augment => self.augment()?,
            Stage::Export => self.export()?,
            Stage::Stats => self.stats()?,
        };
        self.note(&format!("{stage}: {summary}"));
        Ok(StageStatus::Ran { summary })
    }

    /// Run every stage in order, up to and including `until`.
    pub fn run_all(&mut self, until: Option<Stage>, force: bool) -> Result<Vec<(Stage, StageStatus)>> {
        let mut out = Vec::new();
        for stage in Stage::ALL {
            let status = self.run_stage(stage, force)?;
            out.push((stage, status));
            if Some(stage) == until {
                break;
            }
        }
        Ok(out)
    }

    fn images_root(&self) -> PathBuf {
        self.cfg.inputs.images_root()
    }

    fn image_file(&self, image: &ImageRecord) -> PathBuf {
        self.images_root().join(&image.source_uri)
    }

    fn read<T: serde::de::DeserializeOwned>(&self, stage: &str) -> Result<Vec<T>> {
        self.store.read_stage(stage).with_context(|| format!("reading stage {stage}"))
    }

    fn curate(&mut self) -> Result<String> {
        let path = &self.cfg.inputs.detections;
        if path.as_os_str().is_empty() {
            bail!("inputs.detections is not set");
        }
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg = self.cfg.curation_config();
        let mut images = Vec::new();
        let mut skips = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: DetectorRecord = serde_json::from_str(line)
                .with_context(|| format!("{}:{}: bad detector record", path.display(), n + 1))?;
            let skip = |reason: String| SkipRecord {
                image_id: rec.image_id.clone(),
                stage: "curate".into(),
                reason,
            };
            let Some(source_uri) = rec.source_uri.clone() else {
                skips.push(skip("no source image".into()));
                continue;
            };
            match curate_regions(&rec.proposals, &cfg) {
                Ok(regions) if regions.is_empty() => skips.push(skip("no regions survive curation".into())),
                Ok(regions) => images.push(ImageRecord {
                    image_id: rec.image_id.clone(),
                    width_px: rec.width_px,
                    height_px: rec.height_px,
                    source_uri,
                    regions,
                }),
                Err(e) => skips.push(skip(e.to_string())),
            }
        }
        self.store.write_stage("curate_skips", &skips)?;
        self.store.write_stage("images", &images)?;
        Ok(format!("{} images curated, {} skipped", images.len(), skips.len()))
    }

    fn load_vocab(&self, name: &str, path: &Path) -> Result<LabelVocabulary> {
        if path.as_os_str().is_empty() {
            bail!("inputs.{name} is not set");
        }
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        if path.extension().is_some_and(|e| e == "json") {
            let v: LabelVocabulary =
                serde_json::from_str(&text).with_context(|| format!("parsing vocabulary {}", path.display()))?;
            v.validate().map_err(anyhow::Error::msg)?;
            return Ok(v);
        }
        let labels: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        embed_vocabulary(name, &labels, &self.cfg.verbalize.label_template, &*self.backends.embed)
            .with_context(|| format!("embedding vocabulary {name}"))
    }

    fn verbalize(&mut self) -> Result<String> {
        let images: Vec<ImageRecord> = self.read("images")?;
        let i = &self.cfg.inputs;
        let vocabs = GlobalVocabularies {
            places: self.load_vocab("places", &i.places)?,
            objects: self.load_vocab("objects", &i.objects)?,
            concepts: self.load_vocab("concepts", &i.concepts)?,
        };
        let palette = ColorPalette::default();
        let handles = VerbalizeHandles {
            embed: &*self.backends.embed,
            chat: &*self.backends.chat,
            caption: &*self.backends.caption,
            vqa: &*self.backends.vqa,
            vocabs: &vocabs,
            palette: &palette,
            render: &self.cfg.render,
        };
        let seed = self.cfg.stage_seed("verbalize");
        let results = parallel_map(&images, self.cfg.concurrency, |img| {
            let bytes = std::fs::read(self.image_file(img))
                .map_err(|e| format!("{}: {e}", self.image_file(img).display()))?;
            verbalize_image(img, &bytes, &handles, &self.cfg.verbalize, seed).map_err(|e| e.to_string())
        });
        let mut bundles = Vec::new();
        let mut skips = Vec::new();
        for (img, r) in images.iter().zip(results) {
            match r {
                Ok(b) => bundles.push(b),
                Err(reason) => skips.push(SkipRecord {
                    image_id: img.image_id.clone(),
                    stage: "verbalize".into(),
                    reason,
                }),
            }
        }
        self.store.write_stage("verbalize_skips", &skips)?;
        self.store.write_stage("bundles", &bundles)?;
        Ok(format!("{} images verbalized, {} skipped", bundles.len(), skips.len()))
    }

    fn generation_config(&self) -> GenerationConfig {
        let g = &self.cfg.generation;
        GenerationConfig {
            rounds_per_mode: g.rounds_per_mode,
            qars_per_round: g.qars_per_round,
            temperature: g.temperature,
            seed: self.cfg.stage_seed("generate"),
        }
    }

    fn generate(&mut self) -> Result<String> {
        let images = index_by(self.read::<ImageRecord>("images")?, |i| i.image_id.clone());
        let bundles: Vec<VerbalizationBundle> = self.read("bundles")?;
        let gcfg = self.generation_config();
        let templates = self.cfg.templates()?;
        let mask = self.cfg.mask()?;
        let chat = &*self.backends.chat;
        let results = parallel_map(&bundles, self.cfg.concurrency, |b| -> Result<_> {
            let image = images
                .get(&b.image_id)
                .ok_or_else(|| anyhow!("bundle for unknown image {}", b.image_id))?;
            let mut instances = Vec::new();
            let mut drops = Vec::new();
            for mode in ReferenceMode::ALL {
                let out = run_generation(b, image, mode, &gcfg, &templates, &mask, chat)
                    .with_context(|| format!("generating for {} ({})", b.image_id, mode.as_str()))?;
                instances.extend(out.instances);
                drops.extend(out.drops);
            }
            Ok((instances, drops))
        });
        let mut instances = Vec::new();
        let mut drops: Vec<DropRecord> = Vec::new();
        for r in results {
            let (i, d) = r?;
            instances.extend(i);
            drops.extend(d);
        }
        self.store.write_stage("drops", &drops)?;
        self.store.write_stage("instances", &instances)?;
        Ok(format!("{} instances, {} dropped", instances.len(), drops.len()))
    }

    fn dedup(&mut self) -> Result<String> {
        let instances: Vec<QarInstance> = self.read("instances")?;
        let mut groups: BTreeMap<String, Vec<QarInstance>> = BTreeMap::new();
        for inst in instances {
            groups.entry(inst.image_id.clone()).or_default().push(inst);
        }
        let groups: Vec<Vec<QarInstance>> = groups.into_values().collect();
        let k = self.cfg.dedup.representatives;
        let text_kind = self.cfg.dedup.text;
        let embed = &*self.backends.embed;
        let results = parallel_map(&groups, self.cfg.concurrency, |group| -> Result<_> {
            let texts: Vec<String> = group
                .iter()
                .map(|q| match text_kind {
                    DedupText::QuestionOnly => q.question.clone(),
                    DedupText::FullQar => q.qar_text(),
                })
                .collect();
            let vectors = embed_texts(&texts, embed)?;
            let dendro = agglomerative_cluster(&vectors)?;
            let reps = select_representatives(&dendro, &vectors, k)?;
            let labels = dendro.cut(k);
            let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
            for l in &labels {
                *sizes.entry(*l).or_default() += 1;
            }
            let rep_set: BTreeSet<usize> = reps.iter().copied().collect();
            let assignments: Vec<ClusterAssignment> = group
                .iter()
                .zip(&labels)
                .enumerate()
                .map(|(i, (q, &l))| ClusterAssignment {
                    instance_id: q.instance_id.clone(),
                    image_id: q.image_id.clone(),
                    cluster: l,
                    cluster_size: sizes[&l],
                    representative: rep_set.contains(&i),
                })
                .collect();
            let candidates: Vec<QarInstance> = reps.iter().map(|&i| group[i].clone()).collect();
            Ok((assignments, candidates))
        });
        let mut clusters = Vec::new();
        let mut candidates = Vec::new();
        for r in results {
            let (a, c) = r?;
            clusters.extend(a);
            candidates.extend(c);
        }
        self.store.write_stage("clusters", &clusters)?;
        self.store.write_stage("candidates", &candidates)?;
        Ok(format!(
            "{} instances in {} groups, {} candidates",
            clusters.len(),
            groups.len(),
            candidates.len()
        ))
    }

    /// Draw each candidate's mentioned regions for annotators.
    pub fn write_annotation_renders(&self) -> Result<usize> {
        let candidates: Vec<QarInstance> = self.read("candidates")?;
        let images = index_by(self.read::<ImageRecord>("images")?, |i| i.image_id.clone());
        let dir = self.cfg.run_dir.join(qarsmith_annotate::service::RENDERS_DIR);
        std::fs::create_dir_all(&dir)?;
        let palette = ColorPalette::default();
        for c in &candidates {
            let image = images
                .get(&c.image_id)
                .ok_or_else(|| anyhow!("candidate {} has unknown image", c.instance_id))?;
            let bytes = std::fs::read(self.image_file(image))
                .with_context(|| format!("reading {}", self.image_file(image).display()))?;
            let draw: Vec<DrawItem> = c
                .mentioned_ids
                .iter()
                .filter_map(|id| image.region(*id))
                .map(|r| DrawItem {
                    bbox: r.bbox,
                    color_index: r.region_id,
                })
                .collect();
            let png = if draw.is_empty() {
                encode_png(&decode_rgb(&bytes)?)?
            } else {
                render_regions(&bytes, &draw, &palette, &self.cfg.render)?
            };
            std::fs::write(dir.join(format!("{}.png", c.instance_id)), png)?;
        }
        Ok(candidates.len())
    }

    fn service_config(&self) -> ServiceConfig {
        ServiceConfig {
            required_annotators: self.cfg.annotation.required_annotators,
            required_votes: self.cfg.annotation.required_votes,
            seed: self.cfg.stage_seed("annotate"),
        }
    }

    /// Render candidates, create rating tasks and hand the store to the
    /// annotation service. [`Pipeline::finish_annotation`] takes it back.
    pub fn start_annotation(&mut self) -> Result<(AnnotationService, Vec<String>)> {
        self.check_deps(Stage::Annotate)?;
        self.write_annotation_renders()?;
        let store = Store::open(&self.cfg.run_dir)?;
        let service = AnnotationService::open(store, self.service_config())?;
        let ids = service.create_rating_tasks_from_stage("candidates", None)?;
        Ok((service, ids))
    }

    pub fn finish_annotation(&mut self, service: AnnotationService) -> Result<()> {
        drop(service.into_store());
        self.store = Store::open(&self.cfg.run_dir)?;
        Ok(())
    }

    /// What scripted annotators count as visible evidence, per image.
    pub fn annotation_contexts(&self) -> Result<BTreeMap<String, String>> {
        let bundles: Vec<VerbalizationBundle> = self.read("bundles")?;
        let all = DescriptorMask::all();
        Ok(bundles
            .iter()
            .map(|b| {
                let ctx = format!(
                    "{}\n{}",
                    render_context(b, ReferenceMode::IdBased, &all),
                    render_context(b, ReferenceMode::DescriptionBased, &all)
                );
                (b.image_id.clone(), ctx)
            })
            .collect())
    }

    fn annotate_simulated(&mut self) -> Result<String> {
        if !self.cfg.annotation.simulate {
            bail!(
                "stage annotate needs human ratings: run `qarsmith serve-annotation`, or pass --simulate to use scripted annotators"
            );
        }
        let (service, ids) = self.start_annotation()?;
        let mut sim = SimulatedAnnotators::new(
            self.cfg.annotation.simulated_annotators.max(self.cfg.annotation.required_annotators),
            self.cfg.stage_seed("simulated-annotators"),
        );
        sim.noise = self.cfg.annotation.simulated_noise;
        sim.contexts = self.annotation_contexts()?;
        let submitted = sim.run(&service)?;
        let summary = service.export_labels()?;
        self.finish_annotation(service)?;
        Ok(format!(
            "{} tasks, {submitted} simulated ratings, {} labels exported",
            ids.len(),
            summary.labels
        ))
    }

    fn featurize(&self, items: &[(&QarInstance, &VerbalizationBundle)]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(64) {
            out.extend(featurize_batch(chunk, &*self.backends.embed)?);
        }
        Ok(out)
    }

    fn train(&mut self) -> Result<String> {
        let labels: Vec<CriticLabel> = self.read("labels")?;
        let instances = index_by(self.read::<QarInstance>("instances")?, |i| i.instance_id.clone());
        let bundles = index_by(self.read::<VerbalizationBundle>("bundles")?, |b| b.image_id.clone());
        let mut pairs = Vec::new();
        for l in &labels {
            let inst = instances
                .get(&l.instance_id)
                .ok_or_else(|| anyhow!("label for unknown instance {}", l.instance_id))?;
            let b = bundles
                .get(&inst.image_id)
                .ok_or_else(|| anyhow!("no bundle for image {}", inst.image_id))?;
            pairs.push((inst, b));
        }
        let features = self.featurize(&pairs)?;
        let data: Vec<Sample> = features
            .into_iter()
            .zip(&labels)
            .map(|(x, l)| Sample::from_label(x, l))
            .collect();
        let (params, log) = train_critic(&data, &self.cfg.train_config())?;
        let metrics = evaluate_critic(&params, &data)?;
        let train_acc = accuracy(&params, &data)?;
        let scores: Vec<f64> = data.iter().map(|s| params.score(&s.x)).collect::<Result<_, _>>()?;
        let ys: Vec<u8> = labels.iter().map(|l| l.binary_accept).collect();
        let eval = json!({
            "split": "train",
            "samples": data.len(),
            "positives": ys.iter().filter(|&&y| y == 1).count(),
            "auc": auc(&scores, &ys),
            "accuracy": train_acc,
            "metrics": metrics,
        });
        self.store.write_stage::<EpochLog>("training_log", &log)?;
        self.store.write_stage("critic_eval", &[eval])?;
        self.store.write_stage("critic", &[params.to_checkpoint()])?;
        let last = log.last().map(|l| l.loss.total).unwrap_or(f64::NAN);
        Ok(format!(
            "{} samples, {} epochs, final loss {last:.4}, train accuracy {:.3}",
            data.len(),
            log.len(),
            train_acc
        ))
    }

    fn critic(&self) -> Result<CriticParams> {
        let ck: Vec<Checkpoint> = self.read("critic")?;
        let ck = ck.first().ok_or_else(|| anyhow!("critic stage is empty"))?;
        Ok(CriticParams::from_checkpoint(ck)?)
    }

    fn score(&mut self) -> Result<String> {
        let instances: Vec<QarInstance> = self.read("instances")?;
        let bundles = index_by(self.read::<VerbalizationBundle>("bundles")?, |b| b.image_id.clone());
        let bundle_of = |i: &QarInstance| {
            bundles
                .get(&i.image_id)
                .ok_or_else(|| anyhow!("no bundle for image {}", i.image_id))
        };
        let scores: Vec<CriticScore> = match self.cfg.backend.scorer {
            ScorerKind::Critic => {
                let params = self.critic()?;
                let pairs: Vec<_> = instances
                    .iter()
                    .map(|i| Ok((i, bundle_of(i)?)))
                    .collect::<Result<_>>()?;
                let features = self.featurize(&pairs)?;
                instances
                    .iter()
                    .zip(&features)
                    .map(|(i, x)| score_instance(&params, &i.instance_id, x))
                    .collect::<Result<_, _>>()?
            }
            ScorerKind::Remote => {
                let backend = self
                    .backends
                    .score
                    .as_deref()
                    .ok_or_else(|| anyhow!("remote scorer selected but no score endpoint configured"))?;
                let scorer = RemoteScorer {
                    backend,
                    name: "remote".into(),
                };
                instances
                    .iter()
                    .map(|i| {
                        Ok(CriticScore {
                            instance_id: i.instance_id.clone(),
                            score: scorer.score(i, bundle_of(i)?)?,
                            model_version: scorer.version(),
                        })
                    })
                    .collect::<Result<_>>()?
            }
        };
        self.store.write_stage("scores", &scores)?;
        let mean = scores.iter().map(|s| s.score).sum::<f64>() / scores.len().max(1) as f64;
        Ok(format!("{} instances scored, mean score {mean:.3}", scores.len()))
    }

    fn filter(&mut self) -> Result<String> {
        let instances: Vec<QarInstance> = self.read("instances")?;
        let scores: Vec<CriticScore> = self.read("scores")?;
        let tau = self.cfg.filter.threshold;
        let kept: BTreeSet<String> = filter_by_threshold(&scores, tau).into_iter().collect();
        let filtered: Vec<QarInstance> = instances
            .iter()
            .filter(|i| kept.contains(&i.instance_id))
            .cloned()
            .collect();

        let labels: Vec<CriticLabel> = if self.store.has_stage("labels") {
            self.read("labels")?
        } else {
            Vec::new()
        };
        let by_id: BTreeMap<&str, f64> = scores.iter().map(|s| (s.instance_id.as_str(), s.score)).collect();
        let (xs, ys): (Vec<f64>, Vec<u8>) = labels
            .iter()
            .filter_map(|l| by_id.get(l.instance_id.as_str()).map(|&s| (s, l.binary_accept)))
            .unzip();
        let (curve, baseline): (Vec<ThresholdCurvePoint>, Vec<BaselinePoint>) = if ys.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            let curve = precision_curve(&xs, &ys, &default_thresholds())?;
            let fractions: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
            let baseline = random_baseline(
                &ys,
                &fractions,
                self.cfg.filter.baseline_repetitions,
                self.cfg.stage_seed("filter-baseline"),
            )?;
            (curve, baseline)
        };
        self.store.write_stage("filter_curve", &curve)?;
        self.store.write_stage("filter_baseline", &baseline)?;
        self.store.write_stage("filtered", &filtered)?;
        Ok(format!(
            "{} of {} instances kept at threshold {tau}",
            filtered.len(),
            instances.len()
        ))
    }

    fn augment(&mut self) -> Result<String> {
        let filtered: Vec<QarInstance> = self.read("filtered")?;
        let images = index_by(self.read::<ImageRecord>("images")?, |i| i.image_id.clone());
        let vary = VaryConfig {
            cap: self.cfg.augment.cap,
            seed: self.cfg.stage_seed("augment"),
        };
        let mut out: Vec<AugmentedInstance> = Vec::new();
        for inst in &filtered {
            let image = images
                .get(&inst.image_id)
                .ok_or_else(|| anyhow!("instance {} has unknown image", inst.instance_id))?;
            out.extend(augment_instance(inst, &image.regions, &vary, self.cfg.augment.multiplicity)?);
        }
        self.store.write_stage("augmented", &out)?;
        Ok(format!("{} augmented copies of {} instances", out.len(), filtered.len()))
    }

    fn export(&mut self) -> Result<String> {
        let augmented: Vec<AugmentedInstance> = self.read("augmented")?;
        let images = index_by(self.read::<ImageRecord>("images")?, |i| i.image_id.clone());
        let root = self.images_root();
        let lookup = |id: &str| images.get(id).map(|i| root.join(&i.source_uri));
        let render_dir = self.cfg.run_dir.join("train_renders");
        let (pairs, issues) = export_training_pairs(
            &augmented,
            &lookup,
            &render_dir,
            Some(&self.cfg.run_dir),
            &ColorPalette::default(),
            &self.cfg.render,
        );
        if self.cfg.export.format == ExportFormat::Tsv {
            std::fs::write(self.cfg.run_dir.join("training_pairs.tsv"), pairs_to_tsv(&pairs))?;
        }
        self.store.write_stage("export_issues", &issues)?;
        self.store.write_stage::<TrainingPair>("training_pairs", &pairs)?;
        Ok(format!("{} training pairs, {} issues", pairs.len(), issues.len()))
    }

    fn stats(&mut self) -> Result<String> {
        let instances: Vec<QarInstance> = self.read("instances")?;
        let images: Vec<ImageRecord> = self.read("images")?;
        let boxes: Vec<_> = images.iter().flat_map(|i| i.regions.iter().map(|r| r.bbox)).collect();
        let report = build_report(&instances, &boxes, &QuestionTypeRules::builtin());
        let dir = self.cfg.run_dir.join("stats");
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("report.txt"), report_text(&report))?;
        std::fs::write(dir.join("box_histograms.csv"), histograms_to_csv(&report.boxes))?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        self.store.write_stage("stats", &[serde_json::to_value(&report)?])?;
        Ok(format!(
            "{} instances over {} images summarized",
            report.summary.total.qars, report.summary.total.images
        ))
    }
}
