//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on
//! any failure. Run with `cargo test -p qarsmith-cli --test acceptance`.

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use qarsmith_cli::config::RunConfig;
use qarsmith_cli::pipeline::{Pipeline, Stage};
use qarsmith_core::augment::{decode_rgb, encode_png, remap_ids, render_regions, vary_region_set, ColorPalette, DrawItem, RenderConfig, VaryConfig};
use qarsmith_core::backend::mock::{MockBackend, MockConfig};
use qarsmith_core::critic::{auc, derive_labels, train_critic, CriticParams, Sample, TrainConfig};
use qarsmith_core::curation::{curate_regions, iou, CurationConfig};
use qarsmith_core::dedup::{agglomerative_cluster, distance_matrix, medoid, select_representatives, TIE_EPSILON};
use qarsmith_core::embedding::EmbeddingVector;
use qarsmith_core::filter::{default_thresholds, filter_by_threshold, precision_at_retention, random_baseline};
use qarsmith_core::generate::{run_generation, GenerationConfig, PromptTemplates};
use qarsmith_core::mentions::{extract_id_mentions, has_bracket_ids};
use qarsmith_core::model::{BoxGeometry, CriticScore, ImageRecord, QarInstance, ReferenceMode, Region, VerbalizationBundle};
use qarsmith_core::stats::{bbox_histograms, classify_question, corpus_summary, pearson, QuestionTypeRules};
use qarsmith_core::store::Store;
use qarsmith_core::verbalize::DescriptorMask;

use oracles::*;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn mock_config(corpus: &Path, run_dir: &Path, seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        run_dir: run_dir.to_path_buf(),
        ..RunConfig::default()
    };
    cfg.inputs.detections = corpus.join("detections.jsonl");
    cfg.inputs.places = corpus.join("places.txt");
    cfg.inputs.objects = corpus.join("objects.txt");
    cfg.inputs.concepts = corpus.join("concepts.txt");
    cfg.annotation.simulate = true;
    cfg.filter.threshold = 0.5;
    cfg
}

struct Corpus {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

fn fixture_corpus(images: usize) -> Corpus {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("corpus");
    qarsmith_core::fixtures::write_fixture_corpus(&root, images, 0).unwrap();
    Corpus { _tmp: tmp, root }
}

fn counting(corpus: &Corpus) -> Outcome {
    let out = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let mut p = Pipeline::open(mock_config(&corpus.root, &out.path().join("run"), 0), false).map_err(|e| e.to_string())?;
    p.quiet = true;
    p.run_all(Some(Stage::Generate), false).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let instances: Vec<QarInstance> = p.store().read_stage("instances").unwrap();
    let mut per_image: BTreeMap<String, usize> = BTreeMap::new();
    for i in &instances {
        *per_image.entry(i.image_id.clone()).or_default() += 1;
    }
    check(per_image.len() == 10, format!("{} images produced instances", per_image.len()))?;
    check(per_image.values().all(|&c| c == 18), format!("per-image counts {per_image:?}"))?;
    check(secs < 60.0, format!("took {secs:.1}s"))?;
    Ok(format!("18 QARs on each of 10 images, {} total, {secs:.1}s (limit 60s)", instances.len()))
}

fn reference_modes(corpus: &Corpus) -> Outcome {
    let out = tempfile::tempdir().unwrap();
    let mut p = Pipeline::open(mock_config(&corpus.root, &out.path().join("run"), 0), false).map_err(|e| e.to_string())?;
    p.quiet = true;
    p.run_all(Some(Stage::Verbalize), false).map_err(|e| e.to_string())?;
    let images: BTreeMap<String, ImageRecord> = p
        .store()
        .read_stage::<ImageRecord>("images")
        .unwrap()
        .into_iter()
        .map(|i| (i.image_id.clone(), i))
        .collect();
    let bundles: Vec<VerbalizationBundle> = p.store().read_stage("bundles").unwrap();
    let (mut turns, mut kept, mut dropped) = (0, 0, 0);
    let mut seed = 0;
    while turns < 1000 {
        let llm = MockBackend::new(MockConfig { seed, fuzz_rate: 0.5, ..MockConfig::default() });
        let cfg = GenerationConfig { seed, ..GenerationConfig::default() };
        for b in &bundles {
            let image = &images[&b.image_id];
            for mode in ReferenceMode::ALL {
                let o = run_generation(b, image, mode, &cfg, &PromptTemplates::default(), &DescriptorMask::all(), &llm)
                    .map_err(|e| e.to_string())?;
                turns += o.instances.len() + o.drops.len();
                dropped += o.drops.len();
                for inst in &o.instances {
                    kept += 1;
                    let text = format!("{} {} {}", inst.question, inst.answer, inst.rationale);
                    match inst.mode {
                        ReferenceMode::IdBased => {
                            let n = inst.mentioned_ids.len();
                            check((1..=5).contains(&n), format!("{}: {n} mentions", inst.instance_id))?;
                            check(
                                inst.mentioned_ids.is_subset(&image.region_ids()),
                                format!("{}: unknown region", inst.instance_id),
                            )?;
                            check(extract_id_mentions(&text) == inst.mentioned_ids, format!("{}: mention set differs from text", inst.instance_id))?;
                        }
                        ReferenceMode::DescriptionBased => {
                            check(!has_bracket_ids(&text), format!("{}: bracket id in description mode", inst.instance_id))?;
                            check(inst.mentioned_ids.is_empty(), format!("{}: mentions in description mode", inst.instance_id))?;
                        }
                    }
                }
            }
        }
        seed += 1;
    }
    check(dropped > 0, "fuzzing produced no invalid turns")?;
    Ok(format!("{turns} fuzzed turns, {kept} retained all valid, {dropped} dropped"))
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Sample> {
    (0..n)
        .map(|_| Sample {
            x: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            y: f64::from(rng.random_bool(0.5) as u8),
            y_qa: rng.random_range(0.0..=1.0),
            y_qar: rng.random_range(0.0..=1.0),
        })
        .collect()
}

fn critic_numerics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for cfg in 0..20u64 {
        let lambda = rng.random_range(0.0..2.0);
        let p = CriticParams::init(8, 4, lambda, cfg);
        let batch = random_batch(&mut rng, 12, 8);
        let analytic = p.gradient(&batch).map_err(|e| e.to_string())?;
        let numeric = finite_difference_gradient(&p, &batch, 1e-5);
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max((a - n).abs() / (a.abs() + n.abs()).max(1e-8));
        }
    }
    check(worst < 1e-4, format!("max relative error {worst:.2e}"))?;
    let zero = CriticParams::zeros(8, 4, 1.0);
    let mut batch = random_batch(&mut rng, 10, 8);
    for (i, s) in batch.iter_mut().enumerate() {
        s.y = (i % 2) as f64;
    }
    let bce = zero.loss(&batch).unwrap().bce;
    check((bce - std::f64::consts::LN_2).abs() <= 1e-6, format!("zero-parameter BCE {bce}"))?;
    Ok(format!("20 configs (d=8, h=4), max relative error {worst:.2e} (< 1e-4); zero-parameter BCE - ln 2 = {:.1e}", bce - std::f64::consts::LN_2))
}

fn label_rule() -> Outcome {
    let (mut complete, mut malformed) = (0, 0);
    for pair in all_rating_pairs() {
        let got = derive_labels("x", &pair);
        match (got, label_oracle(&pair)) {
            (Ok(l), Some((accept, y_qa, y_qar))) => {
                complete += 1;
                let any_reject = pair.iter().any(|r| r.qa_rating == 1 || r.qar_rating == Some(1));
                check((l.binary_accept == 0) == any_reject, format!("{pair:?}: accept {}", l.binary_accept))?;
                check(l.binary_accept == accept, format!("{pair:?}"))?;
                check((l.y_qa - y_qa).abs() < 1e-12 && (l.y_qar - y_qar).abs() < 1e-12, format!("{pair:?}: targets"))?;
            }
            (Err(_), None) => malformed += 1,
            (got, want) => return Err(format!("{pair:?}: got {got:?}, expected {want:?}")),
        }
    }
    Ok(format!("{complete} well-formed and {malformed} ill-formed rating pairs, 0 mismatches"))
}

/// Features with one informative direction; exactly 45% positives.
fn planted(rng: &mut ChaCha8Rng, n: usize) -> Vec<Sample> {
    let positives = (n as f64 * 0.45).round() as usize;
    let mut ys: Vec<u8> = (0..n).map(|i| u8::from(i < positives)).collect();
    ys.shuffle(rng);
    ys.into_iter()
        .map(|y| {
            let mut x: Vec<f64> = (0..8).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            x[0] += if y == 1 { 0.9 } else { -0.9 };
            x[1] += if y == 1 { 0.5 } else { -0.5 };
            let (y_qa, y_qar) = if y == 1 {
                (rng.random_range(2..=4) as f64 / 4.0, rng.random_range(2..=4) as f64 / 4.0)
            } else {
                (0.0, 0.0)
            };
            Sample { x, y: y as f64, y_qa, y_qar }
        })
        .collect()
}

fn filtering_curve() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let train = planted(&mut rng, 1000);
    let test = planted(&mut rng, 1000);
    let cfg = TrainConfig {
        learning_rate: 0.05,
        batch_size: 32,
        max_epochs: 60,
        seed: 3,
        lambda: 1.0,
        hidden_dim: 8,
    };
    let (params, _) = train_critic(&train, &cfg).map_err(|e| e.to_string())?;
    let scores: Vec<f64> = test.iter().map(|s| params.score(&s.x).unwrap()).collect();
    let labels: Vec<u8> = test.iter().map(|s| s.y as u8).collect();
    let a = auc(&scores, &labels).ok_or("auc undefined")?;
    let a_ref = auc_oracle(&scores, &labels);
    check((a - a_ref).abs() < 1e-12, format!("auc {a} vs pair count {a_ref}"))?;
    check(a >= 0.8, format!("AUC {a:.3}"))?;
    let p20 = precision_at_retention(&scores, &labels, 0.2).ok_or("nothing retained")?;
    check(p20 >= 0.65, format!("precision at 20% retention {p20:.3}"))?;

    let fractions: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
    let base = random_baseline(&labels, &fractions, 1000, 9).map_err(|e| e.to_string())?;
    let worst = base.iter().map(|b| (b.precision - 0.45).abs()).fold(0.0, f64::max);
    check(worst <= 0.02, format!("baseline deviation {worst:.4}"))?;

    let items: Vec<CriticScore> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| CriticScore { instance_id: format!("q{i}"), score: s, model_version: params.version() })
        .collect();
    let grid = default_thresholds();
    let kept: Vec<BTreeSet<String>> = grid.iter().map(|&t| filter_by_threshold(&items, t).into_iter().collect()).collect();
    for i in 0..grid.len() {
        for j in i..grid.len() {
            check(kept[j].is_subset(&kept[i]), format!("retained({}) not within retained({})", grid[j], grid[i]))?;
        }
    }
    Ok(format!(
        "AUC {a:.3} (>= 0.8), precision@20% {p20:.3} (>= 0.65), baseline max |p - 0.45| = {worst:.4} (<= 0.02), subsets hold on {} thresholds",
        grid.len()
    ))
}

fn region_curation() -> Outcome {
    let cfg = CurationConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..200 {
        let n = rng.random_range(0..=80);
        let props = random_proposals(&mut rng, n);
        let out = curate_regions(&props, &cfg).map_err(|e| e.to_string())?;
        let people = out.iter().filter(|r| r.is_person).count();
        check(people <= cfg.max_people, format!("case {case}: {people} people"))?;
        let mut per_class: BTreeMap<&str, usize> = BTreeMap::new();
        for r in out.iter().filter(|r| !r.is_person) {
            *per_class.entry(r.class_label.as_str()).or_default() += 1;
        }
        check(per_class.values().all(|&c| c <= cfg.per_class_cap), format!("case {case}: class cap"))?;
        for (i, a) in out.iter().enumerate() {
            for b in &out[i + 1..] {
                check(iou(&a.bbox, &b.bbox) <= cfg.overlap_iou, format!("case {case}: overlap"))?;
            }
        }
        check(out.len() <= cfg.max_regions, format!("case {case}: {} regions", out.len()))?;
        check(
            out.iter().enumerate().all(|(k, r)| r.region_id as usize == k),
            format!("case {case}: ids not contiguous"),
        )?;
    }
    let mut exact = 0;
    for case in 0..200 {
        let n = rng.random_range(0..=10);
        let props = random_proposals(&mut rng, n);
        let small = CurationConfig { max_regions: rng.random_range(1..=6), ..cfg.clone() };
        let got: Vec<_> = curate_regions(&props, &small).unwrap().into_iter().map(|r| (r.bbox, r.class_label, r.detector_confidence)).collect();
        let want: Vec<_> = curation_oracle(&props, &small).into_iter().map(|i| (props[i].bbox, props[i].class_label.clone(), props[i].confidence)).collect();
        check(got == want, format!("small case {case}: differs from oracle"))?;
        exact += 1;
    }
    Ok(format!("200 random sets, 0 constraint violations; {exact}/200 small sets equal the brute-force oracle"))
}

fn clustering() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for case in 0..50 {
        let n = rng.random_range(1..=10);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let vecs: Vec<EmbeddingVector> = pts.iter().cloned().map(|v| EmbeddingVector::new(v).unwrap()).collect();
        let dendro = agglomerative_cluster(&vecs).map_err(|e| e.to_string())?;
        let want = average_linkage_oracle(&pts, TIE_EPSILON);
        let got: Vec<(usize, usize, usize)> = dendro.merges.iter().map(|m| (m.a, m.b, m.size)).collect();
        let want_ids: Vec<(usize, usize, usize)> = want.iter().map(|w| (w.0, w.1, w.2)).collect();
        check(got == want_ids, format!("case {case}: merge order differs"))?;
        check(
            dendro.merges.iter().zip(&want).all(|(m, w)| (m.distance - w.3).abs() < 1e-9),
            format!("case {case}: merge distances differ"),
        )?;
        let reps = select_representatives(&dendro, &vecs, 5).unwrap();
        check(reps.len() == n.min(5), format!("case {case}: {} representatives for {n} points", reps.len()))?;
        let labels = dendro.cut(5);
        let dist = distance_matrix(&vecs).unwrap();
        let rep_clusters: BTreeSet<usize> = reps.iter().map(|&r| labels[r]).collect();
        check(rep_clusters.len() == reps.len(), format!("case {case}: two representatives share a cluster"))?;
        for &r in &reps {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == labels[r]).collect();
            check(medoid(&members, &dist) == r, format!("case {case}: representative is not the medoid"))?;
        }
    }
    Ok("50 random sets match the naive average-linkage oracle; representatives = min(5, clusters)".into())
}

fn qar_with(text: &str) -> QarInstance {
    QarInstance {
        instance_id: "aug".into(),
        image_id: "img".into(),
        mode: ReferenceMode::IdBased,
        question: text.into(),
        answer: "They are talking.".into(),
        rationale: "Both face each other.".into(),
        mentioned_ids: extract_id_mentions(text),
        generation_round: 1,
        turn: 1,
        raw_llm_text: String::new(),
    }
}

fn augmentation() -> Outcome {
    let q = qar_with("What might be [0] and [1] discussing?");
    let out = remap_ids(&q, &BTreeMap::from([(0, 1), (1, 3)])).map_err(|e| e.to_string())?;
    check(out.question == "What might be [1] and [3] discussing?", format!("remapped to {:?}", out.question))?;

    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for case in 0..100 {
        let k = rng.random_range(1..=5);
        let mut ids: Vec<u32> = (0..10).collect();
        ids.shuffle(&mut rng);
        let text: String = ids[..k].iter().map(|i| format!("Is [{i}] here? ")).collect();
        let inst = qar_with(text.trim());
        let mut targets: Vec<u32> = (0..10).collect();
        targets.shuffle(&mut rng);
        let fwd: BTreeMap<u32, u32> = ids[..k].iter().copied().zip(targets).collect();
        let inv: BTreeMap<u32, u32> = fwd.iter().map(|(&a, &b)| (b, a)).collect();
        let back = remap_ids(&remap_ids(&inst, &fwd).unwrap(), &inv).unwrap();
        check(back == inst, format!("round trip {case} changed the instance"))?;
    }

    let blank = encode_png(&image_rgb(40, 40)).unwrap();
    let item = DrawItem { bbox: BoxGeometry::new(0.25, 0.25, 0.5, 0.5).unwrap(), color_index: 0 };
    let drawn = decode_rgb(&render_regions(&blank, &[item], &ColorPalette::default(), &RenderConfig::default()).unwrap()).unwrap();
    let pink = [255, 105, 180];
    let outline = [(10, 10), (29, 10), (10, 29), (29, 29), (20, 10), (10, 20)];
    check(outline.iter().all(|&(x, y)| drawn.get_pixel(x, y).0 == pink), "index 0 outline is not pink")?;
    check(drawn.get_pixel(20, 20).0 == [0, 0, 0], "interior was painted")?;

    let regions: Vec<Region> = (0..9)
        .map(|i| Region {
            region_id: i,
            bbox: BoxGeometry::new(0.1 * i as f64, 0.05, 0.1, 0.2).unwrap(),
            class_label: "cup".into(),
            detector_confidence: 0.5,
            is_person: false,
        })
        .collect();
    for s in 0..500u64 {
        let k = rng.random_range(1..=5);
        let mut ids: Vec<u32> = (0..9).collect();
        ids.shuffle(&mut rng);
        let text: String = ids[..k].iter().map(|i| format!("Near [{i}]? ")).collect();
        let inst = qar_with(text.trim());
        let (draw, remapped) = vary_region_set(&inst, &regions, &VaryConfig { cap: 8, seed: s }, "").map_err(|e| e.to_string())?;
        let sources: BTreeSet<u32> = draw.iter().map(|d| d.source_id).collect();
        check(inst.mentioned_ids.is_subset(&sources), format!("sample {s}: a mentioned region is not drawn"))?;
        let new_ids: BTreeSet<u32> = draw.iter().map(|d| d.new_id).collect();
        check(remapped.mentioned_ids.is_subset(&new_ids), format!("sample {s}: remapped mention not drawn"))?;
        check(draw.len() <= 8, format!("sample {s}: {} regions drawn", draw.len()))?;
    }
    Ok("remap example exact; 100 round trips identity; index 0 outline pink; mentions drawn in 500/500 samples".into())
}

fn image_rgb(w: u32, h: u32) -> image::RgbImage {
    image::RgbImage::new(w, h)
}

fn inst(id: &str, image: &str, mode: ReferenceMode, q: &str, a: &str, r: &str) -> QarInstance {
    QarInstance {
        instance_id: id.into(),
        image_id: image.into(),
        mode,
        question: q.into(),
        answer: a.into(),
        rationale: r.into(),
        mentioned_ids: extract_id_mentions(&format!("{q} {a} {r}")),
        generation_round: 1,
        turn: 1,
        raw_llm_text: String::new(),
    }
}

fn stats(corpus: &Corpus) -> Outcome {
    let rules = QuestionTypeRules::builtin();
    let examples: [(&str, &[&str]); 13] = [
        ("Purpose", &["What is the purpose", "What is the significance"]),
        ("Relationship", &["What is the relationship", "How are they related"]),
        ("Type", &["What kind of", "What is the type of"]),
        ("Emotion", &["What emotion", "What might be the feeling of"]),
        ("Scene", &["Where", "What time", "What situation"]),
        ("Attribute", &["What state", "What condition", "What color"]),
        ("Action", &["What activity", "What event", "What are they doing"]),
        ("Inference", &["What can you infer", "What would likely", "How might"]),
        ("Reason", &["Why", "What is the intention"]),
        ("Role", &["What is the role", "What is the occupation"]),
        ("Focus", &["What is the main focus", "What stands out"]),
        ("Ambiance", &["What atmosphere", "What is the mood", "What vibe"]),
        ("Factual", &["Is there", "Are there", "Do you think"]),
    ];
    let mut phrases = 0;
    for (ty, list) in examples {
        for phrase in list {
            let got = classify_question(phrase, &rules);
            check(got == ty, format!("{phrase:?} classified as {got}, expected {ty}"))?;
            phrases += 1;
        }
    }

    use ReferenceMode::*;
    let hand = [
        inst("a", "img-a", IdBased, "What is [0] doing here?", "Waiting for a bus.", "They stand at the stop."),
        inst("b", "img-a", IdBased, "Why are [0] and [1] close?", "They are friends.", "They smile at each other warmly."),
        inst("c", "img-a", DescriptionBased, "What is the man holding?", "A red umbrella.", "It looks like rain."),
        inst("d", "img-b", DescriptionBased, "Where is this?", "A park.", "There are trees and grass everywhere."),
    ];
    let s = corpus_summary(&hand);
    let expect = [
        (&s.with_region_ids, [1.0, 2.0, 2.0, 5.5, 3.5, 5.5, 1.5]),
        (&s.with_region_descriptions, [2.0, 2.0, 1.0, 4.0, 2.5, 5.0, 0.0]),
        (&s.total, [2.0, 4.0, 2.0, 4.75, 3.0, 5.25, 0.75]),
    ];
    for (col, want) in expect {
        let got = [
            col.images as f64,
            col.qars as f64,
            col.qs_per_image,
            col.avg_q_len,
            col.avg_a_len,
            col.avg_r_len,
            col.avg_mentioned_ids,
        ];
        check(got.iter().zip(want).all(|(g, w)| (g - w).abs() <= 1e-9), format!("summary {got:?}, expected {want:?}"))?;
    }

    // The same means recomputed on a mock-generated corpus.
    let out = tempfile::tempdir().unwrap();
    let mut p = Pipeline::open(mock_config(&corpus.root, &out.path().join("run"), 0), false).map_err(|e| e.to_string())?;
    p.quiet = true;
    p.run_all(Some(Stage::Generate), false).map_err(|e| e.to_string())?;
    let gen: Vec<QarInstance> = p.store().read_stage("instances").unwrap();
    let total = corpus_summary(&gen).total;
    let mean = |f: &dyn Fn(&QarInstance) -> usize| gen.iter().map(|q| f(q) as f64).sum::<f64>() / gen.len() as f64;
    let words = |t: &str| t.split_whitespace().count();
    let hand_means = [
        mean(&|q| words(&q.question)),
        mean(&|q| words(&q.answer)),
        mean(&|q| words(&q.rationale)),
        mean(&|q| q.mentioned_ids.len()),
    ];
    let got = [total.avg_q_len, total.avg_a_len, total.avg_r_len, total.avg_mentioned_ids];
    check(got.iter().zip(hand_means).all(|(g, w)| (g - w).abs() <= 1e-9), format!("fixture means {got:?} vs {hand_means:?}"))?;

    let images: Vec<ImageRecord> = p.store().read_stage("images").unwrap();
    let boxes: Vec<BoxGeometry> = images.iter().flat_map(|i| i.regions.iter().map(|r| r.bbox)).collect();
    let h = bbox_histograms(&boxes);
    let worst = [&h.width, &h.height, &h.area]
        .iter()
        .map(|x| (x.fractions.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    check(worst <= 1e-12, format!("histogram sum off by {worst:e}"))?;

    let xs: Vec<f64> = (0..25).map(|i| i as f64 * 0.37).collect();
    let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x - 2.0).collect();
    let rho = pearson(&xs, &ys).unwrap().rho.ok_or("no correlation")?;
    check((rho - 1.0).abs() < 1e-12, format!("pearson {rho}"))?;
    Ok(format!("{phrases} taxonomy phrases classified; summary means exact to 1e-9; histogram sums within {worst:.0e}; pearson {rho}"))
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn determinism(corpus: &Corpus) -> Outcome {
    let out = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for name in ["first", "second"] {
        let dir = out.path().join(name);
        let mut p = Pipeline::open(mock_config(&corpus.root, &dir, 11), false).map_err(|e| e.to_string())?;
        p.quiet = true;
        p.run_all(None, false).map_err(|e| e.to_string())?;
        runs.push(files_under(&dir));
    }
    let (a, b) = (&runs[0], &runs[1]);
    check(a.keys().eq(b.keys()), "runs wrote different file sets")?;
    let differing: Vec<_> = a.iter().filter(|(k, v)| b[*k] != **v).map(|(k, _)| k.display().to_string()).collect();
    check(differing.is_empty(), format!("files differ: {differing:?}"))?;
    let store = Store::open(out.path().join("first")).unwrap();
    check(store.has_stage("training_pairs"), "run did not reach export")?;
    Ok(format!("two full runs wrote {} byte-identical files", a.len()))
}

fn main() {
    // The test harness passes flags such as --nocapture; none apply here.
    let corpus = fixture_corpus(10);
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("pipeline counting", Box::new(|| counting(&corpus))),
        ("reference-mode validity", Box::new(|| reference_modes(&corpus))),
        ("critic numerics", Box::new(critic_numerics)),
        ("label rule", Box::new(label_rule)),
        ("filtering curve", Box::new(filtering_curve)),
        ("region curation", Box::new(region_curation)),
        ("clustering equivalence", Box::new(clustering)),
        ("augmentation", Box::new(augmentation)),
        ("stats", Box::new(|| stats(&corpus))),
        ("determinism", Box::new(|| determinism(&corpus))),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run))
            .unwrap_or_else(|_| Err("panicked".to_string()));
        match result {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
