//! Synthetic inputs for demos and tests: small PNG images, a detector
//! proposal file and label lists for the three vocabularies.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{encode_png, pixel_rect};
use crate::curation::{DetectorRecord, RawProposal};
use crate::model::BoxGeometry;
use crate::util::derive_seed;

pub const PLACES: [&str; 12] = [
    "street", "kitchen", "park", "beach", "office", "market", "restaurant", "living room",
    "train station", "playground", "harbor", "classroom",
];

pub const OBJECTS: [&str; 16] = [
    "car", "bicycle", "dog", "umbrella", "bench", "cup", "table", "chair", "laptop", "bag",
    "bottle", "boat", "kite", "book", "clock", "phone",
];

pub const CONCEPTS: [&str; 14] = [
    "leisure", "commute", "celebration", "work", "family", "travel", "sport", "shopping",
    "friendship", "weather", "cooking", "learning", "rest", "crowd",
];

/// Detector classes with their prior frequency in a large detection corpus.
pub const CLASSES: [(&str, f64); 10] = [
    ("person", 30.0),
    ("car", 8.0),
    ("chair", 6.0),
    ("cup", 4.0),
    ("dog", 2.0),
    ("umbrella", 1.5),
    ("bicycle", 1.2),
    ("kite", 0.6),
    ("clock", 0.5),
    ("boat", 0.4),
];

pub struct FixturePaths {
    pub root: PathBuf,
    pub images_dir: PathBuf,
    pub detector_path: PathBuf,
    pub places: PathBuf,
    pub objects: PathBuf,
    pub concepts: PathBuf,
}

fn random_box(rng: &mut ChaCha8Rng) -> BoxGeometry {
    let w = rng.random_range(0.08..0.5);
    let h = rng.random_range(0.08..0.6);
    let x = rng.random_range(0.0..(1.0 - w));
    let y = rng.random_range(0.0..(1.0 - h));
    BoxGeometry::clamped(x, y, w, h).expect("sampled inside the unit square")
}

/// Proposals for one synthetic image; some boxes are jittered copies of
/// others so overlap suppression has work to do.
pub fn synthetic_proposals(rng: &mut ChaCha8Rng, count: usize) -> Vec<RawProposal> {
    let mut out: Vec<RawProposal> = Vec::with_capacity(count);
    while out.len() < count {
        let (label, freq) = *CLASSES.choose(rng).unwrap();
        let bbox = match out.choose(rng) {
            Some(prev) if rng.random::<f64>() < 0.25 => {
                let b = prev.bbox;
                let dx = rng.random_range(-0.02..0.02);
                let dy = rng.random_range(-0.02..0.02);
                BoxGeometry::clamped(b.x + dx, b.y + dy, b.w, b.h).unwrap_or(b)
            }
            _ => random_box(rng),
        };
        out.push(RawProposal {
            bbox,
            class_label: label.to_string(),
            confidence: (rng.random_range(0.3..1.0f64) * 1000.0).round() / 1000.0,
            class_prior_frequency: freq,
        });
    }
    out
}

/// A flat background with one filled rectangle per proposal.
pub fn synthetic_image(rng: &mut ChaCha8Rng, width: u32, height: u32, boxes: &[BoxGeometry]) -> RgbImage {
    let bg = [rng.random_range(30..220), rng.random_range(30..220), rng.random_range(30..220)];
    let mut img = RgbImage::from_pixel(width, height, Rgb(bg));
    for b in boxes {
        let c = Rgb([rng.random(), rng.random(), rng.random()]);
        let (x0, y0, x1, y1) = pixel_rect(b, width, height);
        for y in y0..y1 {
            for x in x0..x1 {
                img.put_pixel(x, y, c);
            }
        }
    }
    img
}

fn write_lines(path: &Path, lines: &[&str]) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    for l in lines {
        writeln!(f, "{l}")?;
    }
    Ok(())
}

/// Write `n` images, their detector file and label lists under `root`.
pub fn write_fixture_corpus(root: &Path, n: usize, seed: u64) -> std::io::Result<FixturePaths> {
    let images_dir = root.join("images");
    std::fs::create_dir_all(&images_dir)?;
    let detector_path = root.join("detections.jsonl");
    let mut det = std::fs::File::create(&detector_path)?;
    for i in 0..n {
        let image_id = format!("img{i:03}");
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["fixture", &image_id]));
        let (w, h) = (160, 120);
        let count = rng.random_range(8..=24);
        let proposals = synthetic_proposals(&mut rng, count);
        let boxes: Vec<BoxGeometry> = proposals.iter().map(|p| p.bbox).collect();
        let img = synthetic_image(&mut rng, w, h, &boxes);
        let file = format!("{image_id}.png");
        let bytes = encode_png(&img).map_err(|e| std::io::Error::other(e.to_string()))?;
        std::fs::write(images_dir.join(&file), bytes)?;
        let rec = DetectorRecord {
            image_id,
            width_px: w,
            height_px: h,
            proposals,
            source_uri: Some(format!("images/{file}")),
        };
        writeln!(det, "{}", serde_json::to_string(&rec)?)?;
    }
    let places = root.join("places.txt");
    let objects = root.join("objects.txt");
    let concepts = root.join("concepts.txt");
    write_lines(&places, &PLACES)?;
    write_lines(&objects, &OBJECTS)?;
    write_lines(&concepts, &CONCEPTS)?;
    Ok(FixturePaths {
        root: root.to_path_buf(),
        images_dir,
        detector_path,
        places,
        objects,
        concepts,
    })
}
