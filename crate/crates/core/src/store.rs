//! Embedded store of historical task summaries with exact cosine search.
//!
//! The store is a flat list scanned linearly per query, which keeps results
//! exact. Readers take `&self`; writers need `&mut self`, so sharing a store
//! across threads means wrapping it in a `RwLock` and every query sees the
//! snapshot it locked.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::status::CompletionStatus;

pub const DEFAULT_DIMENSION: usize = 64;
pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("embedding dimension {actual} does not match store dimension {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("duplicate record id '{0}'")]
    DuplicateId(String),
    #[error("record '{0}' has an empty summary")]
    EmptySummary(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("store file: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummaryRecord {
    pub id: String,
    pub agent_name: String,
    pub task_text: String,
    pub status: CompletionStatus,
    pub summary: String,
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalHit {
    pub record: TaskSummaryRecord,
    pub distance: f64,
    /// 1-based.
    pub rank: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SearchFilter {
    pub agent_name: Option<String>,
    pub status: Option<CompletionStatus>,
}

impl SearchFilter {
    pub fn matches(&self, record: &TaskSummaryRecord) -> bool {
        self.agent_name
            .as_deref()
            .is_none_or(|a| a == record.agent_name)
            && self.status.is_none_or(|s| s == record.status)
    }
}

/// `1 - cos(a, b)` clamped to `[0, 2]`. A zero vector on either side has
/// distance 1.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    // sqrt(na * nb) rather than sqrt(na) * sqrt(nb): identical vectors then
    // give exactly cos = 1.
    (1.0 - dot / (na * nb).sqrt()).clamp(0.0, 2.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStore {
    dimension: usize,
    records: Vec<TaskSummaryRecord>,
    ids: HashSet<String>,
}

impl TrajectoryStore {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            records: Vec::new(),
            ids: HashSet::new(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[TaskSummaryRecord] {
        &self.records
    }

    pub fn insert(&mut self, record: TaskSummaryRecord) -> Result<(), StoreError> {
        if record.embedding.len() != self.dimension {
            return Err(StoreError::DimensionMismatch {
                expected: self.dimension,
                actual: record.embedding.len(),
            });
        }
        if record.summary.trim().is_empty() {
            return Err(StoreError::EmptySummary(record.id));
        }
        if self.ids.contains(&record.id) {
            return Err(StoreError::DuplicateId(record.id));
        }
        self.ids.insert(record.id.clone());
        self.records.push(record);
        Ok(())
    }

    /// Filters first, then ranks by increasing cosine distance with ties
    /// broken by ascending id, returning at most `k` hits.
    pub fn nearest_neighbors(
        &self,
        query: &[f32],
        k: usize,
        filter: &SearchFilter,
    ) -> Result<Vec<RetrievalHit>, StoreError> {
        if k == 0 {
            return Err(StoreError::ZeroK);
        }
        if query.len() != self.dimension {
            return Err(StoreError::DimensionMismatch {
                expected: self.dimension,
                actual: query.len(),
            });
        }
        let mut scored: Vec<(f64, &TaskSummaryRecord)> = self
            .records
            .iter()
            .filter(|r| filter.matches(r))
            .map(|r| (cosine_distance(query, &r.embedding), r))
            .collect();
        scored.sort_by(|(da, ra), (db, rb)| {
            da.partial_cmp(db)
                .unwrap_or(Ordering::Equal)
                .then_with(|| ra.id.cmp(&rb.id))
        });
        Ok(scored
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(i, (distance, record))| RetrievalHit {
                record: record.clone(),
                distance,
                rank: i + 1,
            })
            .collect())
    }

    /// One JSON object per line.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        let mut out = BufWriter::new(File::create(path)?);
        for record in &self.records {
            let line = serde_json::to_string(record).map_err(std::io::Error::other)?;
            writeln!(out, "{line}")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Loads a JSON-lines file. Blank lines are skipped; any other bad line
    /// fails the load with its 1-based line number.
    pub fn load(path: impl AsRef<Path>, dimension: usize) -> Result<Self, StoreError> {
        let reader = BufReader::new(File::open(path)?);
        let mut store = Self::new(dimension);
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: TaskSummaryRecord =
                serde_json::from_str(&line).map_err(|e| StoreError::Malformed {
                    line: line_no,
                    message: e.to_string(),
                })?;
            store.insert(record).map_err(|e| StoreError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        }
        Ok(store)
    }
}

/// Text embedder used for both stored summaries and similarity queries.
pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f32>;
}

/// Deterministic feature-hashing embedder: lowercase alphanumeric tokens are
/// hashed (FNV-1a) into signed buckets and the result is L2-normalized. Empty
/// input embeds to the zero vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEmbedder {
    dimension: usize,
}

impl HashingEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension }
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIMENSION)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl Embedder for HashingEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0.0f64; self.dimension];
        for token in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            let h = fnv1a(token.to_lowercase().as_bytes());
            let bucket = (h % self.dimension as u64) as usize;
            let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
            v[bucket] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v.into_iter().map(|x| x as f32).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, agent: &str, status: CompletionStatus, embedding: Vec<f32>) -> TaskSummaryRecord {
        TaskSummaryRecord {
            id: id.into(),
            agent_name: agent.into(),
            task_text: format!("task {id}"),
            status,
            summary: format!("summary {id}"),
            embedding,
        }
    }

    fn unit(dim: usize, axis: usize) -> Vec<f32> {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        v
    }

    #[test]
    fn self_query_is_rank_one_distance_zero() {
        let e = HashingEmbedder::default();
        let mut store = TrajectoryStore::new(64);
        let v = e.embed("what assets are at site MAIN");
        store
            .insert(record("a", "IoT Data Download", CompletionStatus::Accomplished, v.clone()))
            .unwrap();
        store
            .insert(record("b", "IoT Data Download", CompletionStatus::Accomplished, e.embed("chiller 9 anomalies")))
            .unwrap();
        let hits = store.nearest_neighbors(&v, 2, &SearchFilter::default()).unwrap();
        assert_eq!(hits[0].record.id, "a");
        assert_eq!(hits[0].rank, 1);
        assert_eq!(hits[0].distance, 0.0);
    }

    #[test]
    fn insert_rejects_wrong_dimension_and_duplicates() {
        let mut store = TrajectoryStore::new(3);
        assert!(matches!(
            store.insert(record("a", "x", CompletionStatus::Accomplished, vec![1.0; 4])),
            Err(StoreError::DimensionMismatch { expected: 3, actual: 4 })
        ));
        store
            .insert(record("a", "x", CompletionStatus::Accomplished, vec![1.0; 3]))
            .unwrap();
        assert!(matches!(
            store.insert(record("a", "x", CompletionStatus::Accomplished, vec![1.0; 3])),
            Err(StoreError::DuplicateId(_))
        ));
    }

    #[test]
    fn unit_vectors_rank_and_ties() {
        let mut store = TrajectoryStore::new(3);
        for (id, axis) in [("e1", 0), ("e3", 2), ("e2", 1)] {
            store
                .insert(record(id, "x", CompletionStatus::Accomplished, unit(3, axis)))
                .unwrap();
        }
        let hits = store
            .nearest_neighbors(&unit(3, 0), 2, &SearchFilter::default())
            .unwrap();
        let ids: Vec<_> = hits.iter().map(|h| h.record.id.as_str()).collect();
        // e2 and e3 are both orthogonal to e1; the id tie-break picks e2.
        assert_eq!(ids, vec!["e1", "e2"]);
        assert_eq!(hits[1].distance, 1.0);
    }

    #[test]
    fn status_filter_applies_before_ranking() {
        let mut store = TrajectoryStore::new(2);
        store
            .insert(record("a", "x", CompletionStatus::NotAccomplished, vec![1.0, 0.0]))
            .unwrap();
        store
            .insert(record("b", "x", CompletionStatus::Accomplished, vec![0.0, 1.0]))
            .unwrap();
        let filter = SearchFilter {
            status: Some(CompletionStatus::Accomplished),
            ..Default::default()
        };
        let hits = store.nearest_neighbors(&[1.0, 0.0], 5, &filter).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].record.id, "b");
    }

    #[test]
    fn opposite_vectors_have_distance_two() {
        assert_eq!(cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]), 2.0);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), 1.0);
    }

    #[test]
    fn load_reports_malformed_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let mut store = TrajectoryStore::new(2);
        store
            .insert(record("a", "x", CompletionStatus::Accomplished, vec![1.0, 0.0]))
            .unwrap();
        store.save(&path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{\"id\": \"b\", \"agent_name\": \n");
        std::fs::write(&path, text).unwrap();
        match TrajectoryStore::load(&path, 2) {
            Err(StoreError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed line error, got {other:?}"),
        }
    }

    #[test]
    fn embedder_is_deterministic_and_normalized() {
        let e = HashingEmbedder::new(64);
        let a = e.embed("User question: x\nAgent: y\nTask: z");
        assert_eq!(a, e.embed("User question: x\nAgent: y\nTask: z"));
        let norm: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
        assert!(e.embed("").iter().all(|&x| x == 0.0));
    }
}
