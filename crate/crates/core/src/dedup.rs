//! Semantic deduplication: average-linkage agglomerative clustering over
//! cosine distance, and medoid representatives of a flat cut.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, EmbedBackend, EmbedRequest};
use crate::embedding::{cosine_distance, EmbeddingVector};
use crate::model::Validate;

/// Distances closer than this are treated as tied.
pub const TIE_EPSILON: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DedupError {
    #[error("nothing to cluster")]
    Empty,
    #[error("vector {index} has dimension {actual}, expected {expected}")]
    Dimension { index: usize, expected: usize, actual: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("backend returned {got} vectors for {want} texts")]
    Count { want: usize, got: usize },
    #[error(transparent)]
    Embedding(#[from] crate::embedding::EmbeddingError),
}

/// One merge. Cluster ids follow the usual convention: leaves are
/// `0..n`, and the cluster formed by merge `i` gets id `n + i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub leaf_count: usize,
    pub merges: Vec<Merge>,
}

pub fn embed_texts(texts: &[String], backend: &dyn EmbedBackend) -> Result<Vec<EmbeddingVector>, DedupError> {
    if texts.is_empty() {
        return Err(DedupError::Empty);
    }
    let resp = backend.embed(&EmbedRequest {
        texts: Some(texts.to_vec()),
        image_b64: None,
    })?;
    if resp.vectors.len() != texts.len() {
        return Err(DedupError::Count {
            want: texts.len(),
            got: resp.vectors.len(),
        });
    }
    resp.vectors
        .into_iter()
        .map(|v| EmbeddingVector::new(v).map_err(DedupError::from))
        .collect()
}

pub fn distance_matrix(vectors: &[EmbeddingVector]) -> Result<Vec<Vec<f64>>, DedupError> {
    let dim = vectors.first().ok_or(DedupError::Empty)?.dim();
    if let Some((index, v)) = vectors.iter().enumerate().find(|(_, v)| v.dim() != dim) {
        return Err(DedupError::Dimension {
            index,
            expected: dim,
            actual: v.dim(),
        });
    }
    let n = vectors.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let x = cosine_distance(&vectors[i].values, &vectors[j].values).max(0.0);
            d[i][j] = x;
            d[j][i] = x;
        }
    }
    Ok(d)
}

/// Average-linkage clustering on cosine distance.
///
/// Each step merges the closest pair of active clusters. Pairs within
/// [`TIE_EPSILON`] of the minimum are ordered by the smallest leaf index in
/// either cluster, then by the other cluster's smallest leaf. Cluster
/// distances are updated with the Lance-Williams recurrence.
pub fn agglomerative_cluster(vectors: &[EmbeddingVector]) -> Result<Dendrogram, DedupError> {
    let mut d = distance_matrix(vectors)?;
    let n = vectors.len();
    // Slot i holds one active cluster: (cluster id, size, smallest leaf).
    let mut slots: Vec<Option<(usize, usize, usize)>> = (0..n).map(|i| Some((i, 1, i))).collect();
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for step in 0..n.saturating_sub(1) {
        let active: Vec<usize> = (0..n).filter(|&i| slots[i].is_some()).collect();
        let mut best: Option<(f64, (usize, usize), usize, usize)> = None;
        for (ai, &i) in active.iter().enumerate() {
            for &j in &active[ai + 1..] {
                let li = slots[i].unwrap().2;
                let lj = slots[j].unwrap().2;
                let key = (li.min(lj), li.max(lj));
                let dist = d[i][j];
                let better = match best {
                    None => true,
                    Some((bd, bkey, _, _)) => {
                        dist < bd - TIE_EPSILON || ((dist - bd).abs() <= TIE_EPSILON && key < bkey)
                    }
                };
                if better {
                    best = Some((dist, key, i, j));
                }
            }
        }
        let (dist, _, i, j) = best.expect("at least two active clusters");
        let (id_i, n_i, l_i) = slots[i].unwrap();
        let (id_j, n_j, l_j) = slots[j].unwrap();
        for &k in &active {
            if k != i && k != j {
                let v = (n_i as f64 * d[k][i] + n_j as f64 * d[k][j]) / (n_i + n_j) as f64;
                d[k][i] = v;
                d[i][k] = v;
            }
        }
        slots[i] = Some((n + step, n_i + n_j, l_i.min(l_j)));
        slots[j] = None;
        merges.push(Merge {
            a: id_i.min(id_j),
            b: id_i.max(id_j),
            distance: dist,
            size: n_i + n_j,
        });
    }
    Ok(Dendrogram { leaf_count: n, merges })
}

impl Dendrogram {
    /// Flat labels for a cut into `k` clusters (clamped to `1..=leaf_count`).
    ///
    /// Labels are numbered by each cluster's smallest leaf index.
    pub fn cut(&self, k: usize) -> Vec<usize> {
        let n = self.leaf_count;
        let k = k.clamp(1, n.max(1));
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while p[r] != r {
                r = p[r];
            }
            let mut y = x;
            while p[y] != r {
                let next = p[y];
                p[y] = r;
                y = next;
            }
            r
        }
        // Representative leaf of each cluster id formed so far.
        let mut rep: Vec<usize> = (0..n).collect();
        for m in self.merges.iter().take(n - k) {
            let ra = find(&mut parent, rep[m.a]);
            let rb = find(&mut parent, rep[m.b]);
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            parent[hi] = lo;
            rep.push(lo);
        }
        let mut roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
        let mut order: Vec<usize> = roots.clone();
        order.sort_unstable();
        order.dedup();
        for r in roots.iter_mut() {
            *r = order.binary_search(r).unwrap();
        }
        roots
    }
}

/// Member with the smallest summed distance to the rest; ties go to the lowest index.
pub fn medoid(members: &[usize], dist: &[Vec<f64>]) -> usize {
    let mut best = (f64::INFINITY, usize::MAX);
    for &m in members {
        let s: f64 = members.iter().map(|&o| dist[m][o]).sum();
        if s < best.0 - TIE_EPSILON || ((s - best.0).abs() <= TIE_EPSILON && m < best.1) {
            best = (s, m);
        }
    }
    best.1
}

/// Medoids of a cut into `min(k, n)` clusters, largest cluster first.
pub fn select_representatives(
    dendrogram: &Dendrogram,
    vectors: &[EmbeddingVector],
    k: usize,
) -> Result<Vec<usize>, DedupError> {
    let dist = distance_matrix(vectors)?;
    let labels = dendrogram.cut(k.max(1));
    let count = labels.iter().max().map_or(0, |m| m + 1);
    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); count];
    for (i, &l) in labels.iter().enumerate() {
        clusters[l].push(i);
    }
    // Stable: equal sizes keep smallest-leaf order.
    clusters.sort_by(|a, b| b.len().cmp(&a.len()));
    Ok(clusters.iter().map(|c| medoid(c, &dist)).collect())
}

/// Which text of a QAR gets embedded for clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DedupText {
    QuestionOnly,
    #[default]
    FullQar,
}

/// Cluster membership of one instance, as written to the dedup stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub instance_id: String,
    pub image_id: String,
    pub cluster: usize,
    pub cluster_size: usize,
    pub representative: bool,
}

impl Validate for ClusterAssignment {
    fn check(&self) -> Result<(), String> {
        if self.cluster_size == 0 {
            return Err("empty cluster".into());
        }
        Ok(())
    }
}
