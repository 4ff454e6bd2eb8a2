//! Top-k maximal inner product search over unit vectors.
//!
//! Exact mode scans every vector. Approximate mode is an inverted file:
//! vectors are partitioned by spherical k-means and a query scans only the
//! `nprobe` partitions whose centroids score highest.

use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{dot, is_unit, norm, EmbeddingVector, VectorStore};

const SNAPSHOT_FORMAT: &str = "xlpivot-index";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("cannot build an index over an empty store")]
    EmptyStore,
    #[error("store is not normalized (vector `{0}` is not unit-norm)")]
    NotNormalized(String),
    #[error("store is not flagged as normalized")]
    NormalizationFlagUnset,
    #[error("query dim {found} does not match index dim {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid index snapshot: {0}")]
    Snapshot(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IvfParams {
    /// Partition count; `None` picks roughly `sqrt(n)`.
    pub nlist: Option<usize>,
    pub nprobe: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for IvfParams {
    fn default() -> Self {
        Self {
            nlist: None,
            nprobe: 8,
            iterations: 12,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IndexMode {
    #[default]
    Exact,
    Approximate(IvfParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateMatch {
    pub hrl_id: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Partitions {
    centroids: Vec<f32>,
    lists: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Index {
    dim: usize,
    mode: IndexMode,
    ids: Vec<String>,
    data: Vec<f32>,
    partitions: Option<Partitions>,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    format: String,
    version: u32,
    index: Index,
}

/// Descending score, then ascending id.
fn rank_order(a: (f64, &str), b: (f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

pub fn build_index(store: &VectorStore, mode: IndexMode) -> Result<Index, IndexError> {
    if store.is_empty() {
        return Err(IndexError::EmptyStore);
    }
    if !store.meta.normalized {
        return Err(IndexError::NormalizationFlagUnset);
    }
    if let Some((id, _)) = store.iter().find(|(_, v)| !is_unit(v)) {
        return Err(IndexError::NotNormalized(id.to_owned()));
    }
    let dim = store.dim();
    let ids: Vec<String> = store.ids().to_vec();
    let data: Vec<f32> = store.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    let partitions = match mode {
        IndexMode::Exact => None,
        IndexMode::Approximate(params) => Some(train_partitions(&data, dim, &params)),
    };
    Ok(Index {
        dim,
        mode,
        ids,
        data,
        partitions,
    })
}

fn train_partitions(data: &[f32], dim: usize, params: &IvfParams) -> Partitions {
    let n = data.len() / dim;
    let nlist = params
        .nlist
        .unwrap_or_else(|| (n as f64).sqrt().round() as usize)
        .clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centroids: Vec<f32> = sample(&mut rng, n, nlist)
        .into_iter()
        .flat_map(|i| data[i * dim..(i + 1) * dim].iter().copied())
        .collect();

    let mut assignment = vec![0usize; n];
    for _ in 0..params.iterations.max(1) {
        for (i, slot) in assignment.iter_mut().enumerate() {
            *slot = nearest_centroid(&centroids, dim, &data[i * dim..(i + 1) * dim]);
        }
        let mut sums = vec![0f64; nlist * dim];
        let mut counts = vec![0usize; nlist];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, &x) in sums[c * dim..(c + 1) * dim]
                .iter_mut()
                .zip(&data[i * dim..(i + 1) * dim])
            {
                *s += x as f64;
            }
        }
        for c in 0..nlist {
            if counts[c] == 0 {
                continue;
            }
            let sum = &sums[c * dim..(c + 1) * dim];
            let len = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
            if len > 0.0 {
                for (dst, &s) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(sum) {
                    *dst = (s / len) as f32;
                }
            }
        }
    }

    let mut lists = vec![Vec::new(); nlist];
    for i in 0..n {
        let c = nearest_centroid(&centroids, dim, &data[i * dim..(i + 1) * dim]);
        lists[c].push(i as u32);
    }
    Partitions { centroids, lists }
}

fn nearest_centroid(centroids: &[f32], dim: usize, v: &[f32]) -> usize {
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let s = dot(centroid, v);
        if s > best.0 {
            best = (s, c);
        }
    }
    best.1
}

impl Index {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn mode(&self) -> IndexMode {
        self.mode
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn search_topk(
        &self,
        query: &EmbeddingVector,
        k: usize,
    ) -> Result<Vec<CandidateMatch>, IndexError> {
        self.search_slice(query.values(), k)
    }

    pub fn search_slice(&self, query: &[f32], k: usize) -> Result<Vec<CandidateMatch>, IndexError> {
        if query.len() != self.dim {
            return Err(IndexError::DimMismatch {
                expected: self.dim,
                found: query.len(),
            });
        }
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        let mut scored: Vec<(f64, usize)> = match &self.partitions {
            None => (0..self.len())
                .map(|i| (dot(query, self.vector(i)), i))
                .collect(),
            Some(p) => self.probe(p, query),
        };
        let order = |a: &(f64, usize), b: &(f64, usize)| {
            rank_order((a.0, &self.ids[a.1]), (b.0, &self.ids[b.1]))
        };
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_by(order);
        Ok(scored
            .into_iter()
            .map(|(s, i)| CandidateMatch {
                hrl_id: self.ids[i].clone(),
                similarity: s,
            })
            .collect())
    }

    fn probe(&self, p: &Partitions, query: &[f32]) -> Vec<(f64, usize)> {
        let nprobe = match self.mode {
            IndexMode::Approximate(params) => params.nprobe.max(1),
            IndexMode::Exact => p.lists.len(),
        };
        let mut lists: Vec<(f64, usize)> = p
            .centroids
            .chunks_exact(self.dim)
            .map(|c| dot(query, c))
            .enumerate()
            .map(|(i, s)| (s, i))
            .collect();
        lists.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        lists
            .iter()
            .take(nprobe)
            .flat_map(|&(_, l)| p.lists[l].iter())
            .map(|&i| (dot(query, self.vector(i as usize)), i as usize))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let snapshot = Snapshot {
            format: SNAPSHOT_FORMAT.to_owned(),
            version: SNAPSHOT_VERSION,
            index: self.clone(),
        };
        let bytes =
            serde_json::to_vec(&snapshot).map_err(|e| IndexError::Snapshot(e.to_string()))?;
        fs::write(path, bytes).map_err(|source| IndexError::Io {
            path: path.to_owned(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let bytes = fs::read(path).map_err(|source| IndexError::Io {
            path: path.to_owned(),
            source,
        })?;
        let snapshot: Snapshot =
            serde_json::from_slice(&bytes).map_err(|e| IndexError::Snapshot(e.to_string()))?;
        if snapshot.format != SNAPSHOT_FORMAT || snapshot.version != SNAPSHOT_VERSION {
            return Err(IndexError::Snapshot(format!(
                "unsupported snapshot {} v{}",
                snapshot.format, snapshot.version
            )));
        }
        let index = snapshot.index;
        if index.dim == 0 || index.data.len() != index.ids.len() * index.dim {
            return Err(IndexError::Snapshot(
                "vector table does not match id table".into(),
            ));
        }
        Ok(index)
    }
}

/// Brute-force cosine scan, kept separate from the index code path.
pub fn exhaustive_topk(store: &VectorStore, query: &[f32], k: usize) -> Vec<CandidateMatch> {
    let qn = norm(query);
    let mut all: Vec<CandidateMatch> = store
        .iter()
        .map(|(id, v)| {
            let s: f64 = v
                .iter()
                .zip(query)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            CandidateMatch {
                hrl_id: id.to_owned(),
                similarity: s / (norm(v) * qn),
            }
        })
        .collect();
    all.sort_by(|a, b| rank_order((a.similarity, &a.hrl_id), (b.similarity, &b.hrl_id)));
    all.truncate(k);
    all
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{l2_normalize, StoreMeta};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
        loop {
            let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            if let Ok(u) = l2_normalize(&EmbeddingVector::new(v)) {
                return u.into_values();
            }
        }
    }

    fn random_store(n: usize, dim: usize, seed: u64) -> VectorStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = VectorStore::new(dim, StoreMeta::new("test")).unwrap();
        for i in 0..n {
            store
                .push(&format!("v{i:05}"), &random_unit(&mut rng, dim))
                .unwrap();
        }
        store
    }

    fn ids(c: &[CandidateMatch]) -> Vec<&str> {
        c.iter().map(|m| m.hrl_id.as_str()).collect()
    }

    #[test]
    fn builds_over_all_entries() {
        let index = build_index(&random_store(1000, 64, 1), IndexMode::Exact).unwrap();
        assert_eq!(index.len(), 1000);
        assert_eq!(index.dim(), 64);
    }

    #[test]
    fn rejects_empty_and_unnormalized() {
        let empty = VectorStore::new(4, StoreMeta::new("t")).unwrap();
        assert!(matches!(
            build_index(&empty, IndexMode::Exact),
            Err(IndexError::EmptyStore)
        ));

        let mut raw = VectorStore::new(
            2,
            StoreMeta {
                normalized: false,
                ..StoreMeta::new("t")
            },
        )
        .unwrap();
        raw.push("a", &[3.0, 4.0]).unwrap();
        assert!(matches!(
            build_index(&raw, IndexMode::Exact),
            Err(IndexError::NormalizationFlagUnset)
        ));
        raw.meta.normalized = true;
        assert!(matches!(
            build_index(&raw, IndexMode::Exact),
            Err(IndexError::NotNormalized(_))
        ));
    }

    #[test]
    fn self_match_ranks_first() {
        let store = random_store(200, 32, 2);
        let index = build_index(&store, IndexMode::Exact).unwrap();
        let q = EmbeddingVector::new(store.get("v00042").unwrap().to_vec());
        let top = index.search_topk(&q, 3).unwrap();
        assert_eq!(top[0].hrl_id, "v00042");
        assert!((top[0].similarity - 1.0).abs() < 1e-5);
    }

    #[test]
    fn k_beyond_size_truncates() {
        let store = random_store(7, 8, 3);
        let index = build_index(&store, IndexMode::Exact).unwrap();
        let q = EmbeddingVector::new(store.vector(0).to_vec());
        assert_eq!(index.search_topk(&q, 50).unwrap().len(), 7);
        assert!(matches!(
            index.search_topk(&q, 0),
            Err(IndexError::InvalidK)
        ));
        assert!(matches!(
            index.search_topk(&EmbeddingVector::new(vec![1.0]), 1),
            Err(IndexError::DimMismatch { .. })
        ));
    }

    #[test]
    fn matches_brute_force_on_small_store() {
        let store = random_store(50, 16, 4);
        let index = build_index(&store, IndexMode::Exact).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let q = random_unit(&mut rng, 16);
        let got = index.search_slice(&q, 5).unwrap();
        let want = exhaustive_topk(&store, &q, 5);
        assert_eq!(ids(&got), ids(&want));
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let mut store = VectorStore::new(2, StoreMeta::new("t")).unwrap();
        for id in ["c", "a", "b"] {
            store.push(id, &[1.0, 0.0]).unwrap();
        }
        store.push("z", &[0.0, 1.0]).unwrap();
        let index = build_index(&store, IndexMode::Exact).unwrap();
        let top = index.search_slice(&[1.0, 0.0], 4).unwrap();
        assert_eq!(ids(&top), vec!["a", "b", "c", "z"]);
    }

    #[test]
    fn rebuild_is_deterministic() {
        let store = random_store(300, 24, 5);
        let a = build_index(&store, IndexMode::Exact).unwrap();
        let b = build_index(&store, IndexMode::Exact).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let q = random_unit(&mut rng, 24);
            assert_eq!(
                a.search_slice(&q, 10).unwrap(),
                b.search_slice(&q, 10).unwrap()
            );
        }
    }

    #[test]
    fn snapshot_answers_identically() {
        let store = random_store(120, 12, 7);
        let dir = tempfile::tempdir().unwrap();
        for mode in [
            IndexMode::Exact,
            IndexMode::Approximate(IvfParams::default()),
        ] {
            let index = build_index(&store, mode).unwrap();
            let path = dir.path().join("idx.json");
            index.save(&path).unwrap();
            let loaded = Index::load(&path).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            for _ in 0..20 {
                let q = random_unit(&mut rng, 12);
                assert_eq!(
                    index.search_slice(&q, 5).unwrap(),
                    loaded.search_slice(&q, 5).unwrap()
                );
            }
        }
    }

    #[test]
    fn snapshot_rejects_other_formats() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(&path, r#"{"format":"other","version":1,"index":null}"#).unwrap();
        assert!(matches!(Index::load(&path), Err(IndexError::Snapshot(_))));
    }

    /// Clustered synthetic data: 100 random centers, points jittered around
    /// them.
    fn clustered_store(n: usize, dim: usize, seed: u64) -> VectorStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<Vec<f32>> = (0..100).map(|_| random_unit(&mut rng, dim)).collect();
        let mut store = VectorStore::new(dim, StoreMeta::new("test")).unwrap();
        for i in 0..n {
            let c = &centers[rng.gen_range(0..centers.len())];
            let v: Vec<f32> = c
                .iter()
                .map(|&x| x + rng.gen_range(-0.08f32..0.08))
                .collect();
            let u = l2_normalize(&EmbeddingVector::new(v)).unwrap();
            store.push(&format!("c{i:05}"), u.values()).unwrap();
        }
        store
    }

    #[test]
    fn approximate_top1_recall_on_clustered_data() {
        let store = clustered_store(10_000, 32, 11);
        let exact = build_index(&store, IndexMode::Exact).unwrap();
        let approx = build_index(&store, IndexMode::Approximate(IvfParams::default())).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut hits = 0;
        let probes = 1000;
        for _ in 0..probes {
            let base = store.vector(rng.gen_range(0..store.len()));
            let v: Vec<f32> = base
                .iter()
                .map(|&x| x + rng.gen_range(-0.05f32..0.05))
                .collect();
            let q = l2_normalize(&EmbeddingVector::new(v)).unwrap();
            let e = exact.search_topk(&q, 1).unwrap();
            let a = approx.search_topk(&q, 1).unwrap();
            if e[0].hrl_id == a[0].hrl_id {
                hits += 1;
            }
        }
        let recall = hits as f64 / probes as f64;
        assert!(recall >= 0.95, "top-1 recall {recall}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn topk_is_prefix_of_topk_plus_one(n in 1usize..80, dim in 2usize..12, k in 1usize..20, seed in any::<u64>()) {
            let store = random_store(n, dim, seed);
            let index = build_index(&store, IndexMode::Exact).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let q = random_unit(&mut rng, dim);
            let a = index.search_slice(&q, k).unwrap();
            let b = index.search_slice(&q, k + 1).unwrap();
            prop_assert_eq!(&a[..], &b[..a.len()]);
            for m in &b {
                prop_assert!(m.similarity >= -1.0 - 1e-5 && m.similarity <= 1.0 + 1e-5);
                let recomputed = dot(&q, store.get(&m.hrl_id).unwrap());
                prop_assert!((m.similarity - recomputed).abs() <= 1e-5);
            }
        }
    }
}
