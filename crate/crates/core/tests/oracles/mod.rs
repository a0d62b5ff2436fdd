//! Independent reference implementations used by the property and
//! acceptance tests. Nothing here calls the code under test except for
//! plain data types and the loss function being differentiated.
#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::BTreeMap;

use qarsmith_core::critic::{CriticParams, Sample};
use qarsmith_core::curation::{CurationConfig, RawProposal};
use qarsmith_core::model::{AnnotatorRating, BoxGeometry};
use rand::Rng;

pub const CLASS_POOL: [&str; 5] = ["person", "dog", "cup", "car", "tree"];

/// Proposals on a coarse grid with some near-duplicates, so that caps and
/// overlap suppression both have work to do. No two proposals are equal.
pub fn random_proposals<R: Rng>(rng: &mut R, n: usize) -> Vec<RawProposal> {
    let mut out: Vec<RawProposal> = Vec::with_capacity(n);
    while out.len() < n {
        let bbox = if !out.is_empty() && rng.random_bool(0.3) {
            let prev = out[rng.random_range(0..out.len())].bbox;
            let dx = rng.random_range(-2i32..=2) as f64 * 0.01;
            BoxGeometry::clamped(prev.x + dx, prev.y, prev.w, prev.h).unwrap()
        } else {
            let w = rng.random_range(1..=5) as f64 * 0.1;
            let h = rng.random_range(1..=5) as f64 * 0.1;
            let x = rng.random_range(0..=((1.0 - w) * 10.0).round() as i32) as f64 * 0.1;
            let y = rng.random_range(0..=((1.0 - h) * 10.0).round() as i32) as f64 * 0.1;
            BoxGeometry::clamped(x, y, w, h).unwrap()
        };
        let p = RawProposal {
            bbox,
            class_label: CLASS_POOL[rng.random_range(0..CLASS_POOL.len())].to_string(),
            confidence: rng.random_range(1..=99) as f64 / 100.0,
            class_prior_frequency: rng.random_range(0..=30) as f64 / 10.0,
        };
        if !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

pub fn iou_oracle(a: &BoxGeometry, b: &BoxGeometry) -> f64 {
    let overlap = |a0: f64, a1: f64, b0: f64, b1: f64| (a1.min(b1) - a0.max(b0)).max(0.0);
    let inter = overlap(a.x, a.x + a.w, b.x, b.x + b.w) * overlap(a.y, a.y + a.h, b.y, b.y + b.h);
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn score_oracle(p: &RawProposal, cfg: &CurationConfig, person: bool) -> f64 {
    let b = &p.bbox;
    let cx = b.x + b.w / 2.0;
    let cy = b.y + b.h / 2.0;
    let dist = ((cx - 0.5) * (cx - 0.5) + (cy - 0.5) * (cy - 0.5)).sqrt();
    let central = (1.0 - dist / 0.5f64.sqrt()).max(0.0);
    let a = cfg.size_centrality_blend;
    let base = a * b.w * b.h + (1.0 - a) * central;
    if person {
        base
    } else {
        base * (1.0 + p.class_prior_frequency).powf(-1.0 / cfg.rarity_temperature)
    }
}

/// Brute-force curation: take the rank-ordered eligible proposals and
/// search every subset for the lexicographically greatest one that obeys
/// the overlap and size limits. Returns proposal indices in output order.
pub fn curation_oracle(props: &[RawProposal], cfg: &CurationConfig) -> Vec<usize> {
    let person = |p: &RawProposal| cfg.person_labels.iter().any(|l| l.eq_ignore_ascii_case(&p.class_label));
    let scores: Vec<f64> = props.iter().map(|p| score_oracle(p, cfg, person(p))).collect();
    let cmp = |&a: &usize, &b: &usize| -> Ordering {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(props[b].confidence.partial_cmp(&props[a].confidence).unwrap())
            .then(props[a].class_label.cmp(&props[b].class_label))
            .then(a.cmp(&b))
    };
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(cmp);

    let mut people_seen = 0;
    let mut per_class: BTreeMap<&str, usize> = BTreeMap::new();
    let eligible: Vec<usize> = order
        .into_iter()
        .filter(|&i| {
            if person(&props[i]) {
                people_seen += 1;
                people_seen <= cfg.max_people
            } else {
                let c = per_class.entry(props[i].class_label.as_str()).or_default();
                *c += 1;
                *c <= cfg.per_class_cap
            }
        })
        .collect();

    let n = eligible.len();
    assert!(n <= 16, "oracle is exponential; keep inputs small");
    let feasible = |mask: u32| {
        let chosen: Vec<usize> = (0..n).filter(|k| mask & (1 << k) != 0).map(|k| eligible[k]).collect();
        chosen.len() <= cfg.max_regions
            && chosen.iter().enumerate().all(|(x, &a)| {
                chosen[x + 1..]
                    .iter()
                    .all(|&b| iou_oracle(&props[a].bbox, &props[b].bbox) <= cfg.overlap_iou)
            })
    };
    // Bit k stands for the k-th ranked candidate, so lexicographic order
    // over rank is numeric order over bit-reversed masks.
    let lex_key = |mask: u32| -> Vec<bool> { (0..n).map(|k| mask & (1 << k) != 0).collect() };
    let best = (0..(1u32 << n))
        .filter(|&m| feasible(m))
        .max_by(|&a, &b| lex_key(a).cmp(&lex_key(b)))
        .unwrap_or(0);
    (0..n).filter(|k| best & (1 << k) != 0).map(|k| eligible[k]).collect()
}

pub fn cosine_distance_oracle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        1.0
    } else {
        (1.0 - dot / (na * nb)).max(0.0)
    }
}

/// Naive average linkage: every step recomputes each cluster-pair
/// distance as the mean over member pairs. Returns (a, b, size, distance)
/// per merge with the scipy-style id convention.
pub fn average_linkage_oracle(points: &[Vec<f64>], tie_eps: f64) -> Vec<(usize, usize, usize, f64)> {
    let n = points.len();
    let d = |i: usize, j: usize| cosine_distance_oracle(&points[i], &points[j]);
    // (cluster id, members)
    let mut active: Vec<(usize, Vec<usize>)> = (0..n).map(|i| (i, vec![i])).collect();
    let mut merges = Vec::new();
    for step in 0..n.saturating_sub(1) {
        let mut best: Option<(f64, (usize, usize), usize, usize)> = None;
        for x in 0..active.len() {
            for y in x + 1..active.len() {
                let (ma, mb) = (&active[x].1, &active[y].1);
                let mut sum = 0.0;
                for &i in ma {
                    for &j in mb {
                        sum += d(i, j);
                    }
                }
                let dist = sum / (ma.len() * mb.len()) as f64;
                let la = *ma.iter().min().unwrap();
                let lb = *mb.iter().min().unwrap();
                let key = (la.min(lb), la.max(lb));
                let better = match best {
                    None => true,
                    Some((bd, bk, _, _)) => dist < bd - tie_eps || ((dist - bd).abs() <= tie_eps && key < bk),
                };
                if better {
                    best = Some((dist, key, x, y));
                }
            }
        }
        let (dist, _, x, y) = best.unwrap();
        let (id_b, mut mem_b) = active.remove(y);
        let (id_a, mem_a) = active.remove(x);
        mem_b.extend(mem_a);
        merges.push((id_a.min(id_b), id_a.max(id_b), mem_b.len(), dist));
        active.push((n + step, mem_b));
    }
    merges
}

/// All 144 pairs of (qa, qar) ratings a two-annotator task can receive,
/// including the ill-formed ones.
pub fn all_rating_pairs() -> Vec<[AnnotatorRating; 2]> {
    let mut singles = Vec::new();
    for qa in 1..=3u8 {
        for qar in [None, Some(1u8), Some(2), Some(3)] {
            singles.push(AnnotatorRating { qa_rating: qa, qar_rating: qar });
        }
    }
    let mut out = Vec::new();
    for &a in &singles {
        for &b in &singles {
            out.push([a, b]);
        }
    }
    out
}

/// Expected (binary_accept, y_qa, y_qar), or `None` for an ill-formed pair.
/// Ratings are 1 reject, 2 maybe, 3 accept; a QAR rating is present exactly
/// when the QA was not rejected.
pub fn label_oracle(pair: &[AnnotatorRating; 2]) -> Option<(u8, f64, f64)> {
    if pair.iter().any(|r| (r.qa_rating == 1) != r.qar_rating.is_none()) {
        return None;
    }
    let qa_reject = pair.iter().any(|r| r.qa_rating == 1);
    let qar_reject = pair.iter().any(|r| r.qar_rating == Some(1));
    let accept = u8::from(!qa_reject && !qar_reject);
    let scaled = |vals: [u8; 2], reject: bool| {
        if reject {
            0.0
        } else {
            ((vals[0] + vals[1]) as f64 / 2.0 - 1.0) / 2.0
        }
    };
    let y_qa = scaled([pair[0].qa_rating, pair[1].qa_rating], qa_reject);
    let y_qar = if qa_reject {
        0.0
    } else {
        scaled([pair[0].qar_rating.unwrap(), pair[1].qar_rating.unwrap()], qar_reject)
    };
    Some((accept, y_qa, y_qar))
}

/// Central finite-difference gradient of the total loss.
pub fn finite_difference_gradient(params: &CriticParams, batch: &[Sample], h: f64) -> Vec<f64> {
    let flat = params.flatten();
    let mut p = params.clone();
    (0..flat.len())
        .map(|i| {
            let mut up = flat.clone();
            up[i] += h;
            p.set_flat(&up).unwrap();
            let lu = p.loss(batch).unwrap().total;
            let mut dn = flat.clone();
            dn[i] -= h;
            p.set_flat(&dn).unwrap();
            let ld = p.loss(batch).unwrap().total;
            (lu - ld) / (2.0 * h)
        })
        .collect()
}

/// Probability that a random positive outscores a random negative, ties half.
pub fn auc_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &yi) in labels.iter().enumerate() {
        for (j, &yj) in labels.iter().enumerate() {
            if yi == 1 && yj == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}
