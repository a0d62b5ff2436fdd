//! Training-data preparation: region ID remapping with a fixed color code,
//! highlight rendering, region-set variation and training-pair export.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, Rgb, RgbImage};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mentions::{extract_id_mentions, rewrite_mentions};
use crate::model::{BoxGeometry, QarInstance, ReferenceMode, Region, Validate, MAX_MENTIONS};
use crate::util::derive_seed;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("mapping does not cover region id {0}")]
    MissingMapping(u32),
    #[error("mapping is not injective: {0} targets are shared")]
    NotInjective(usize),
    #[error("region {index} is outside the unit square")]
    RegionOutOfBounds { index: usize },
    #[error("image decode failed: {0}")]
    Decode(String),
    #[error("image encode failed: {0}")]
    Encode(String),
    #[error("region cap {0} is below the mention limit")]
    CapTooSmall(usize),
}

/// Index-addressed highlight colors; index 0 is always pink.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorPalette {
    pub colors: Vec<(String, [u8; 3])>,
}

impl Default for ColorPalette {
    fn default() -> Self {
        let colors = [
            ("pink", [255, 105, 180]),
            ("cyan", [0, 255, 255]),
            ("yellow", [255, 255, 0]),
            ("green", [0, 200, 0]),
            ("orange", [255, 165, 0]),
            ("purple", [128, 0, 128]),
            ("blue", [0, 0, 255]),
            ("red", [255, 0, 0]),
        ];
        Self {
            colors: colors.iter().map(|(n, c)| (n.to_string(), *c)).collect(),
        }
    }
}

impl ColorPalette {
    /// Color for a region id; ids past the palette length wrap around.
    pub fn color(&self, id: u32) -> [u8; 3] {
        self.colors[id as usize % self.colors.len()].1
    }

    pub fn name(&self, id: u32) -> &str {
        &self.colors[id as usize % self.colors.len()].0
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }
}

/// Rewrite bracket mentions and `mentioned_ids` through an injective mapping.
pub fn remap_ids(
    instance: &QarInstance,
    mapping: &BTreeMap<u32, u32>,
) -> Result<QarInstance, AugmentError> {
    let targets: BTreeSet<u32> = mapping.values().copied().collect();
    if targets.len() != mapping.len() {
        return Err(AugmentError::NotInjective(mapping.len() - targets.len()));
    }
    let mut out = instance.clone();
    for text in [&mut out.question, &mut out.answer, &mut out.rationale] {
        *text = rewrite_mentions(text, mapping).map_err(AugmentError::MissingMapping)?;
    }
    out.mentioned_ids = instance
        .mentioned_ids
        .iter()
        .map(|id| mapping.get(id).copied().ok_or(AugmentError::MissingMapping(*id)))
        .collect::<Result<_, _>>()?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HighlightStyle {
    Outline,
    /// Translucent fill; `alpha` in `[0,1]`.
    Overlay { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub stroke_px: u32,
    pub style: HighlightStyle,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            stroke_px: 3,
            style: HighlightStyle::Outline,
        }
    }
}

/// One box to draw, colored by `palette[color_index]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrawItem {
    #[serde(rename = "box")]
    pub bbox: BoxGeometry,
    pub color_index: u32,
}

/// Integer pixel rectangle `[x0, x1) × [y0, y1)` covered by a normalized box.
pub fn pixel_rect(b: &BoxGeometry, width: u32, height: u32) -> (u32, u32, u32, u32) {
    let snap = |v: f64, size: u32, up: bool| {
        let p = v * size as f64;
        let p = if up { (p - 1e-9).ceil() } else { (p + 1e-9).floor() };
        (p.max(0.0) as u32).min(size)
    };
    let x0 = snap(b.x, width, false).min(width.saturating_sub(1));
    let y0 = snap(b.y, height, false).min(height.saturating_sub(1));
    let x1 = snap(b.x + b.w, width, true).max(x0 + 1).min(width);
    let y1 = snap(b.y + b.h, height, true).max(y0 + 1).min(height);
    (x0, y0, x1, y1)
}

fn draw_outline(img: &mut RgbImage, rect: (u32, u32, u32, u32), stroke: u32, color: Rgb<u8>) {
    let (x0, y0, x1, y1) = rect;
    let s = stroke.max(1);
    let bands = [
        (x0, y0, x1, (y0 + s).min(y1)),
        (x0, y1.saturating_sub(s).max(y0), x1, y1),
        (x0, y0, (x0 + s).min(x1), y1),
        (x1.saturating_sub(s).max(x0), y0, x1, y1),
    ];
    for (bx0, by0, bx1, by1) in bands {
        for y in by0..by1 {
            for x in bx0..bx1 {
                img.put_pixel(x, y, color);
            }
        }
    }
}

fn blend(img: &mut RgbImage, rect: (u32, u32, u32, u32), alpha: f64, color: [u8; 3]) {
    let a = alpha.clamp(0.0, 1.0);
    let (x0, y0, x1, y1) = rect;
    for y in y0..y1 {
        for x in x0..x1 {
            let p = img.get_pixel_mut(x, y);
            for c in 0..3 {
                p[c] = (p[c] as f64 * (1.0 - a) + color[c] as f64 * a).round() as u8;
            }
        }
    }
}

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage, AugmentError> {
    image::load_from_memory(bytes)
        .map(|i| i.to_rgb8())
        .map_err(|e| AugmentError::Decode(e.to_string()))
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, AugmentError> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| AugmentError::Encode(e.to_string()))?;
    Ok(out.into_inner())
}

/// Draw highlights onto an encoded image, returning PNG bytes.
///
/// An empty draw list returns the input bytes untouched. Later items paint
/// over earlier ones.
pub fn render_regions(
    image_bytes: &[u8],
    draw: &[DrawItem],
    palette: &ColorPalette,
    cfg: &RenderConfig,
) -> Result<Vec<u8>, AugmentError> {
    if draw.is_empty() {
        return Ok(image_bytes.to_vec());
    }
    for (index, item) in draw.iter().enumerate() {
        item.bbox
            .validate()
            .map_err(|_| AugmentError::RegionOutOfBounds { index })?;
    }
    let mut img = decode_rgb(image_bytes)?;
    let (w, h) = img.dimensions();
    for item in draw {
        let rect = pixel_rect(&item.bbox, w, h);
        let color = palette.color(item.color_index);
        match cfg.style {
            HighlightStyle::Outline => draw_outline(&mut img, rect, cfg.stroke_px, Rgb(color)),
            HighlightStyle::Overlay { alpha } => blend(&mut img, rect, alpha, color),
        }
    }
    encode_png(&img)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaryConfig {
    /// Most regions drawn in one augmented image.
    pub cap: usize,
    pub seed: u64,
}

impl Default for VaryConfig {
    fn default() -> Self {
        Self { cap: 8, seed: 0 }
    }
}

/// A region drawn in an augmented image: its curated id and the id it takes in the text.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrawRegion {
    pub source_id: u32,
    pub new_id: u32,
    #[serde(rename = "box")]
    pub bbox: BoxGeometry,
}

/// Choose which regions to draw and a fresh id assignment for them.
///
/// Mentioned regions are always drawn. The list is padded with random
/// unmentioned regions to a size drawn uniformly from `[|mentioned|, cap]`
/// (bounded by what the image has), then the drawn regions receive a random
/// permutation of `0..len` as their new ids.
pub fn vary_region_set(
    instance: &QarInstance,
    regions: &[Region],
    cfg: &VaryConfig,
    salt: &str,
) -> Result<(Vec<DrawRegion>, QarInstance), AugmentError> {
    if cfg.cap < MAX_MENTIONS {
        return Err(AugmentError::CapTooSmall(cfg.cap));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[&instance.instance_id, salt]));
    let by_id: BTreeMap<u32, &Region> = regions.iter().map(|r| (r.region_id, r)).collect();
    let mentioned: Vec<u32> = instance
        .mentioned_ids
        .iter()
        .copied()
        .filter(|id| by_id.contains_key(id))
        .collect();
    if let Some(missing) = instance.mentioned_ids.iter().find(|id| !by_id.contains_key(id)) {
        return Err(AugmentError::MissingMapping(*missing));
    }
    let others: Vec<u32> = by_id
        .keys()
        .copied()
        .filter(|id| !instance.mentioned_ids.contains(id))
        .collect();
    let lo = mentioned.len();
    let hi = cfg.cap.min(regions.len()).max(lo);
    let size = rng.random_range(lo..=hi);
    let mut drawn: Vec<u32> = mentioned;
    drawn.extend(others.choose_multiple(&mut rng, size - lo).copied());
    drawn.sort_unstable();

    let mut new_ids: Vec<u32> = (0..drawn.len() as u32).collect();
    new_ids.shuffle(&mut rng);
    let mapping: BTreeMap<u32, u32> = drawn.iter().copied().zip(new_ids).collect();

    let remapped = remap_ids(instance, &mapping)?;
    let mut draw: Vec<DrawRegion> = mapping
        .iter()
        .map(|(&old, &new)| DrawRegion {
            source_id: old,
            new_id: new,
            bbox: by_id[&old].bbox,
        })
        .collect();
    draw.sort_by_key(|d| d.new_id);
    Ok((draw, remapped))
}

/// One augmented copy of a filtered QAR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedInstance {
    pub augmented_id: String,
    pub source_instance_id: String,
    pub image_id: String,
    pub copy_index: u32,
    pub instance: QarInstance,
    pub draw: Vec<DrawRegion>,
}

impl Validate for AugmentedInstance {
    fn check(&self) -> Result<(), String> {
        self.instance.check()?;
        let drawn: BTreeSet<u32> = self.draw.iter().map(|d| d.new_id).collect();
        if let Some(id) = self.instance.mentioned_ids.iter().find(|id| !drawn.contains(id)) {
            return Err(format!("mentioned region [{id}] is not drawn"));
        }
        Ok(())
    }
}

/// Produce `multiplicity` augmented copies of an instance.
///
/// Description-based instances carry no ids and are passed through undrawn.
pub fn augment_instance(
    instance: &QarInstance,
    regions: &[Region],
    cfg: &VaryConfig,
    multiplicity: u32,
) -> Result<Vec<AugmentedInstance>, AugmentError> {
    (0..multiplicity)
        .map(|k| {
            let (draw, inst) = match instance.mode {
                ReferenceMode::IdBased => vary_region_set(instance, regions, cfg, &k.to_string())?,
                ReferenceMode::DescriptionBased => (Vec::new(), instance.clone()),
            };
            Ok(AugmentedInstance {
                augmented_id: format!("{}-a{k}", instance.instance_id),
                source_instance_id: instance.instance_id.clone(),
                image_id: instance.image_id.clone(),
                copy_index: k,
                instance: inst,
                draw,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub image_path: String,
    pub text_in: String,
    pub text_out: String,
}

impl Validate for TrainingPair {
    fn check(&self) -> Result<(), String> {
        if self.text_in.is_empty() || self.text_out.is_empty() {
            return Err("training text is empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportIssue {
    pub augmented_id: String,
    pub reason: String,
}

impl Validate for ExportIssue {
    fn check(&self) -> Result<(), String> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    #[default]
    Jsonl,
    Tsv,
}

pub fn training_texts(instance: &QarInstance) -> (String, String) {
    (
        instance.question.clone(),
        format!("Answer: {}\nRationale: {}", instance.answer, instance.rationale),
    )
}

/// Render highlights for each augmented instance and build training triples.
///
/// `image_path` maps image ids to source image files; rendered PNGs are
/// written under `render_dir`. Recorded paths are made relative to
/// `path_base` when they lie under it. A missing or undecodable image
/// becomes an issue entry and the export continues.
pub fn export_training_pairs(
    augmented: &[AugmentedInstance],
    image_path: &dyn Fn(&str) -> Option<PathBuf>,
    render_dir: &Path,
    path_base: Option<&Path>,
    palette: &ColorPalette,
    render: &RenderConfig,
) -> (Vec<TrainingPair>, Vec<ExportIssue>) {
    let mut pairs = Vec::new();
    let mut issues = Vec::new();
    for aug in augmented {
        let issue = |reason: String| ExportIssue {
            augmented_id: aug.augmented_id.clone(),
            reason,
        };
        let Some(src) = image_path(&aug.image_id) else {
            issues.push(issue(format!("unknown image {}", aug.image_id)));
            continue;
        };
        let bytes = match std::fs::read(&src) {
            Ok(b) => b,
            Err(e) => {
                issues.push(issue(format!("{}: {e}", src.display())));
                continue;
            }
        };
        let out_path = if aug.draw.is_empty() {
            src.clone()
        } else {
            let items: Vec<DrawItem> = aug
                .draw
                .iter()
                .map(|d| DrawItem {
                    bbox: d.bbox,
                    color_index: d.new_id,
                })
                .collect();
            let png = match render_regions(&bytes, &items, palette, render) {
                Ok(p) => p,
                Err(e) => {
                    issues.push(issue(e.to_string()));
                    continue;
                }
            };
            let p = render_dir.join(format!("{}.png", aug.augmented_id));
            if let Err(e) = std::fs::create_dir_all(render_dir).and_then(|_| std::fs::write(&p, png))
            {
                issues.push(issue(format!("{}: {e}", p.display())));
                continue;
            }
            p
        };
        let (text_in, text_out) = training_texts(&aug.instance);
        let shown = path_base
            .and_then(|b| out_path.strip_prefix(b).ok())
            .unwrap_or(&out_path);
        pairs.push(TrainingPair {
            image_path: shown.to_string_lossy().into_owned(),
            text_in,
            text_out,
        });
    }
    (pairs, issues)
}

/// Tab-separated rendering of training pairs with a header row.
pub fn pairs_to_tsv(pairs: &[TrainingPair]) -> String {
    let esc = |s: &str| s.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n");
    let mut out = String::from("image_path\ttext_in\ttext_out\n");
    for p in pairs {
        out.push_str(&format!("{}\t{}\t{}\n", esc(&p.image_path), esc(&p.text_in), esc(&p.text_out)));
    }
    out
}

/// Palette color implied by each bracket mention in the instance text.
pub fn mention_colors(instance: &QarInstance, palette: &ColorPalette) -> BTreeMap<u32, [u8; 3]> {
    extract_id_mentions(&instance.qar_text())
        .into_iter()
        .map(|id| (id, palette.color(id)))
        .collect()
}
