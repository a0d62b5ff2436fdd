mod oracles;

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qarsmith_core::augment::remap_ids;
use qarsmith_core::critic::derive_labels;
use qarsmith_core::curation::{curate_regions, iou, CurationConfig};
use qarsmith_core::dedup::{agglomerative_cluster, TIE_EPSILON};
use qarsmith_core::embedding::{retrieve_concepts, EmbeddingVector, LabelVocabulary};
use qarsmith_core::filter::filter_by_threshold;
use qarsmith_core::mentions::{extract_id_mentions, strip_mentions};
use qarsmith_core::model::{BoxGeometry, CriticScore, QarInstance, ReferenceMode};
use qarsmith_core::stats::{bbox_histograms, pearson};
use qarsmith_core::store::Store;
use qarsmith_core::util::sha256_hex;

use oracles::*;

fn unit_box() -> impl Strategy<Value = BoxGeometry> {
    (0.0..0.9f64, 0.0..0.9f64, 0.01..1.0f64, 0.01..1.0f64)
        .prop_map(|(x, y, w, h)| BoxGeometry::clamped(x, y, w.min(1.0 - x), h.min(1.0 - y)).unwrap())
}

fn small_config() -> impl Strategy<Value = CurationConfig> {
    (1usize..=4, 1usize..=3, 1usize..=10, 0.0..=1.0f64, 0.3..=0.9f64).prop_map(|(people, cap, max, alpha, iou)| {
        CurationConfig {
            max_people: people,
            per_class_cap: cap,
            max_regions: max,
            size_centrality_blend: alpha,
            overlap_iou: iou,
            ..CurationConfig::default()
        }
    })
}

fn random_vectors(seed: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

fn id_qar(text: &str) -> QarInstance {
    QarInstance {
        instance_id: "i".into(),
        image_id: "img".into(),
        mode: ReferenceMode::IdBased,
        question: text.into(),
        answer: format!("{text} answer"),
        rationale: "because".into(),
        mentioned_ids: extract_id_mentions(text),
        generation_round: 1,
        turn: 1,
        raw_llm_text: String::new(),
    }
}

/// Partition of leaves at a cut, as a set of sorted member lists.
fn partition(labels: &[usize]) -> BTreeSet<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    groups.into_values().collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn store_round_trips(records in prop::collection::vec((".{0,12}", any::<i64>(), -1e6..1e6f64), 0..20)) {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open_or_create(dir.path(), "r", 1, "d").unwrap();
        let values: Vec<serde_json::Value> = records
            .iter()
            .map(|(s, i, f)| serde_json::json!({"s": s, "i": i, "f": f}))
            .collect();
        store.write_stage("things", &values).unwrap();
        let back: Vec<serde_json::Value> = store.read_stage("things").unwrap();
        prop_assert_eq!(&back, &values);
        let entry = store.manifest().stage("things").unwrap().clone();
        prop_assert_eq!(entry.count as usize, values.len());
        let bytes = std::fs::read(store.stage_path("things")).unwrap();
        prop_assert_eq!(entry.sha256, sha256_hex(&bytes));
        let reopened = Store::open(dir.path()).unwrap();
        prop_assert_eq!(reopened.read_stage::<serde_json::Value>("things").unwrap(), values);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in unit_box(), b in unit_box()) {
        let x = iou(&a, &b);
        prop_assert_eq!(x, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert!((x - iou_oracle(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn curation_matches_brute_force(seed in any::<u64>(), n in 0usize..=9, cfg in small_config()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let props = random_proposals(&mut rng, n);
        let got = curate_regions(&props, &cfg).unwrap();
        let want = curation_oracle(&props, &cfg);
        let got_keys: Vec<_> = got.iter().map(|r| (r.bbox, r.class_label.clone(), r.detector_confidence)).collect();
        let want_keys: Vec<_> = want.iter().map(|&i| (props[i].bbox, props[i].class_label.clone(), props[i].confidence)).collect();
        prop_assert_eq!(got_keys, want_keys);
        for (k, r) in got.iter().enumerate() {
            prop_assert_eq!(r.region_id as usize, k);
        }
    }

    #[test]
    fn curation_constraints_hold(seed in any::<u64>(), n in 0usize..=60) {
        let cfg = CurationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let props = random_proposals(&mut rng, n);
        let out = curate_regions(&props, &cfg).unwrap();
        prop_assert!(out.len() <= cfg.max_regions);
        prop_assert!(out.iter().filter(|r| r.is_person).count() <= cfg.max_people);
        let mut per_class: BTreeMap<&str, usize> = BTreeMap::new();
        for r in out.iter().filter(|r| !r.is_person) {
            *per_class.entry(&r.class_label).or_default() += 1;
        }
        prop_assert!(per_class.values().all(|&c| c <= cfg.per_class_cap));
        for (i, a) in out.iter().enumerate() {
            for b in &out[i + 1..] {
                prop_assert!(iou(&a.bbox, &b.bbox) <= cfg.overlap_iou);
            }
        }
    }

    #[test]
    fn raising_max_regions_keeps_a_prefix(seed in any::<u64>(), n in 0usize..=40, lo in 1usize..=6, extra in 0usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let props = random_proposals(&mut rng, n);
        let small = CurationConfig { max_regions: lo, ..CurationConfig::default() };
        let big = CurationConfig { max_regions: lo + extra, ..CurationConfig::default() };
        let a = curate_regions(&props, &small).unwrap();
        let b = curate_regions(&props, &big).unwrap();
        prop_assert!(a.len() <= b.len());
        prop_assert_eq!(&b[..a.len()], &a[..]);
    }

    #[test]
    fn raising_class_cap_without_overlap_is_monotone(seed in any::<u64>(), cap in 1usize..=3) {
        // Disjoint grid cells rule out suppression, where monotonicity can fail.
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let props: Vec<_> = (0..16)
            .map(|i| qarsmith_core::curation::RawProposal {
                bbox: BoxGeometry::new((i % 4) as f64 * 0.25, (i / 4) as f64 * 0.25, 0.2, 0.2).unwrap(),
                class_label: CLASS_POOL[1 + rng.random_range(0..4)].to_string(),
                confidence: rng.random_range(0.0..1.0),
                class_prior_frequency: rng.random_range(0.0..3.0),
            })
            .collect();
        let with = |c: usize| {
            let cfg = CurationConfig { per_class_cap: c, max_regions: 16, ..CurationConfig::default() };
            curate_regions(&props, &cfg).unwrap().into_iter().map(|r| r.bbox.x + 10.0 * r.bbox.y).map(|v| (v * 1e6) as i64).collect::<BTreeSet<_>>()
        };
        prop_assert!(with(cap).is_subset(&with(cap + 1)));
    }

    #[test]
    fn remap_then_inverse_is_identity(seed in any::<u64>(), ids in prop::collection::btree_set(0u32..10, 1..=5), words in prop::collection::vec("[a-z]{1,6}", 1..6)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<u32> = ids.into_iter().collect();
        let mut text = String::new();
        for (i, w) in words.iter().enumerate() {
            text.push_str(w);
            text.push_str(&format!(" [{}] ", ids[i % ids.len()]));
        }
        let q = id_qar(&text);
        let mut targets: Vec<u32> = (0..10).collect();
        targets.shuffle(&mut rng);
        let all: BTreeSet<u32> = q.mentioned_ids.clone();
        let fwd: BTreeMap<u32, u32> = all.iter().copied().zip(targets).collect();
        let inv: BTreeMap<u32, u32> = fwd.iter().map(|(&a, &b)| (b, a)).collect();
        let there = remap_ids(&q, &fwd).unwrap();
        prop_assert_eq!(strip_mentions(&there.question), strip_mentions(&q.question));
        prop_assert_eq!(strip_mentions(&there.answer), strip_mentions(&q.answer));
        prop_assert_eq!(&there.rationale, &q.rationale);
        let expected: BTreeSet<u32> = q.mentioned_ids.iter().map(|i| fwd[i]).collect();
        prop_assert_eq!(&there.mentioned_ids, &expected);
        prop_assert_eq!(remap_ids(&there, &inv).unwrap(), q);
    }

    #[test]
    fn retrieval_prefix_and_scale(seed in any::<u64>(), n in 1usize..12, k in 0usize..12, shift in -4i32..=4) {
        let k = k.min(n - 1);
        let raw = random_vectors(seed, n + 1, 6);
        let labels: Vec<String> = (0..n).map(|i| format!("l{i}")).collect();
        let vocab = LabelVocabulary::normalized("v", labels, raw[..n].to_vec()).unwrap();
        let q = EmbeddingVector::new(raw[n].clone()).unwrap();
        let short = retrieve_concepts(&q, &vocab, k).unwrap();
        let long = retrieve_concepts(&q, &vocab, k + 1).unwrap();
        prop_assert_eq!(&long[..k], &short[..]);
        // Powers of two scale exactly, so the ranking must not move at all.
        let s = 2f64.powi(shift);
        let scaled = EmbeddingVector::new(raw[n].iter().map(|v| v * s).collect()).unwrap();
        let names = |v: &[(String, f64)]| v.iter().map(|x| x.0.clone()).collect::<Vec<_>>();
        prop_assert_eq!(names(&retrieve_concepts(&scaled, &vocab, k + 1).unwrap()), names(&long));
    }

    #[test]
    fn clustering_matches_naive_oracle(seed in any::<u64>(), n in 1usize..=10) {
        let pts = random_vectors(seed, n, 4);
        let vecs: Vec<EmbeddingVector> = pts.iter().cloned().map(|v| EmbeddingVector::new(v).unwrap()).collect();
        let dendro = agglomerative_cluster(&vecs).unwrap();
        let want = average_linkage_oracle(&pts, TIE_EPSILON);
        prop_assert_eq!(dendro.merges.len(), want.len());
        for (m, w) in dendro.merges.iter().zip(&want) {
            prop_assert_eq!((m.a, m.b, m.size), (w.0, w.1, w.2));
            prop_assert!((m.distance - w.3).abs() < 1e-9);
        }
    }

    #[test]
    fn clustering_is_permutation_invariant(seed in any::<u64>(), n in 2usize..=10) {
        let pts = random_vectors(seed, n, 4);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| pts[i].clone()).collect();
        let to_vecs = |p: &[Vec<f64>]| p.iter().cloned().map(|v| EmbeddingVector::new(v).unwrap()).collect::<Vec<_>>();
        let a = agglomerative_cluster(&to_vecs(&pts)).unwrap();
        let b = agglomerative_cluster(&to_vecs(&permuted)).unwrap();
        for (ma, mb) in a.merges.iter().zip(&b.merges) {
            prop_assert!((ma.distance - mb.distance).abs() < 1e-9);
        }
        for k in 1..=n {
            let pa = partition(&a.cut(k));
            let pb: BTreeSet<Vec<usize>> = partition(&b.cut(k))
                .into_iter()
                .map(|g| {
                    let mut g: Vec<usize> = g.into_iter().map(|i| perm[i]).collect();
                    g.sort_unstable();
                    g
                })
                .collect();
            prop_assert_eq!(pa, pb);
        }
    }

    #[test]
    fn threshold_filter_is_monotone(scores in prop::collection::vec(0.0..=1.0f64, 0..50), t1 in 0.0..=1.0f64, t2 in 0.0..=1.0f64) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let items: Vec<CriticScore> = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| CriticScore { instance_id: format!("q{i}"), score: s, model_version: "m".into() })
            .collect();
        let a: BTreeSet<String> = filter_by_threshold(&items, lo).into_iter().collect();
        let b: BTreeSet<String> = filter_by_threshold(&items, hi).into_iter().collect();
        prop_assert!(b.is_subset(&a));
        let strict: BTreeSet<String> = items.iter().filter(|s| s.score > hi).map(|s| s.instance_id.clone()).collect();
        prop_assert_eq!(b, strict);
    }

    #[test]
    fn histograms_are_normalized(boxes in prop::collection::vec(unit_box(), 1..40)) {
        let h = bbox_histograms(&boxes);
        for hist in [&h.width, &h.height, &h.area] {
            prop_assert!((hist.fractions.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn pearson_of_affine_data(xs in prop::collection::vec(-100.0..100.0f64, 3..30), a in 0.1..10.0f64, b in -5.0..5.0f64) {
        prop_assume!(xs.iter().any(|&x| (x - xs[0]).abs() > 1e-3));
        let ys: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
        prop_assert!((pearson(&xs, &ys).unwrap().rho.unwrap() - 1.0).abs() < 1e-9);
        let neg: Vec<f64> = xs.iter().map(|x| -a * x + b).collect();
        prop_assert!((pearson(&xs, &neg).unwrap().rho.unwrap() + 1.0).abs() < 1e-9);
    }
}

#[test]
fn label_rule_matches_table() {
    let mut complete = 0;
    for pair in all_rating_pairs() {
        match (derive_labels("x", &pair), label_oracle(&pair)) {
            (Ok(l), Some((accept, y_qa, y_qar))) => {
                complete += 1;
                assert_eq!(l.binary_accept, accept, "{pair:?}");
                assert!((l.y_qa - y_qa).abs() < 1e-12, "{pair:?}");
                assert!((l.y_qar - y_qar).abs() < 1e-12, "{pair:?}");
            }
            (Err(_), None) => {}
            (got, want) => panic!("{pair:?}: got {got:?}, oracle {want:?}"),
        }
    }
    assert_eq!(complete, 49);
}
