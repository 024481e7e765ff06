//! Evolving knowledge base: incremental ingest with redundancy merging,
//! rule-based validation, temporal-decay freshness, pruning, and snapshots.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, cosine};

pub const SNAPSHOT_FORMAT: &str = "crag-corpus/1";
const UNIT_NORM_TOL: f64 = 1e-6;

/// One unit of the evolving knowledge base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub id: u64,
    pub embedding: Vec<f64>,
    pub text: String,
    pub domain: String,
    /// task-id -> relevance score in [0,1]
    pub relevance: BTreeMap<String, f64>,
    pub created_at: u64,
    pub last_validated: u64,
    pub uncertainty: f64,
    pub source: String,
}

impl KnowledgeEntry {
    pub fn max_relevance(&self) -> f64 {
        self.relevance.values().cloned().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub dim: usize,
    /// Decay half-life in ticks.
    pub half_life: f64,
    /// Cosine similarity in (0,1] above which an ingest merges.
    pub redundancy_threshold: f64,
    pub relevance_floor: f64,
    pub capacity: usize,
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.half_life <= 0.0 {
            return Err(CorpusError::BadConfig("half_life must be > 0"));
        }
        if !(self.redundancy_threshold > 0.0 && self.redundancy_threshold <= 1.0) {
            return Err(CorpusError::BadConfig("redundancy_threshold must be in (0,1]"));
        }
        if !(0.0..=1.0).contains(&self.relevance_floor) {
            return Err(CorpusError::BadConfig("relevance_floor must be in [0,1]"));
        }
        if self.capacity < 1 {
            return Err(CorpusError::BadConfig("capacity must be >= 1"));
        }
        Ok(())
    }
}

/// Why an entry fails validation. A failed validation is a value, not an
/// error: the ingest pipeline reports it as `Rejected`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationFailure {
    EmptyPayload,
    NotUnitNorm,
    NonFiniteEmbedding,
    DimensionMismatch,
    ScoreOutOfRange,
    UncertaintyOutOfRange,
    TimestampOrder,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IngestOutcome {
    Accepted,
    Merged(u64),
    Rejected(ValidationFailure),
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus config: {0}")]
    BadConfig(&'static str),
    #[error("duplicate entry id {0}")]
    DuplicateId(u64),
    #[error("snapshot entries not sorted ascending by id")]
    Unsorted,
    #[error("snapshot exceeds capacity")]
    OverCapacity,
    #[error("entry {id} failed validation: {failure:?}")]
    InvalidEntry { id: u64, failure: ValidationFailure },
    #[error("bad snapshot header: {0}")]
    BadHeader(String),
    #[error("snapshot parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSnapshot {
    pub config: CorpusConfig,
    pub entries: Vec<KnowledgeEntry>,
    pub tick: u64,
}

/// The knowledge base K_t. Entries are keyed by id; iteration order is always
/// ascending id, which keeps every scan deterministic.
#[derive(Debug, Clone)]
pub struct Corpus {
    config: CorpusConfig,
    entries: BTreeMap<u64, KnowledgeEntry>,
}

impl Corpus {
    pub fn new(config: CorpusConfig) -> Result<Self, CorpusError> {
        config.validate()?;
        Ok(Self { config, entries: BTreeMap::new() })
    }

    pub fn config(&self) -> &CorpusConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&KnowledgeEntry> {
        self.entries.get(&id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &KnowledgeEntry> {
        self.entries.values()
    }

    pub fn next_id(&self) -> u64 {
        self.entries.keys().next_back().map_or(0, |id| id + 1)
    }

    /// Rule-based quality filter applied before ingest.
    pub fn validate(&self, entry: &KnowledgeEntry) -> Result<(), ValidationFailure> {
        if entry.text.is_empty() {
            return Err(ValidationFailure::EmptyPayload);
        }
        if entry.embedding.len() != self.config.dim {
            return Err(ValidationFailure::DimensionMismatch);
        }
        if entry.embedding.iter().any(|v| !v.is_finite()) {
            return Err(ValidationFailure::NonFiniteEmbedding);
        }
        if !linalg::is_unit_norm(&entry.embedding, UNIT_NORM_TOL) {
            return Err(ValidationFailure::NotUnitNorm);
        }
        if entry.relevance.values().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(ValidationFailure::ScoreOutOfRange);
        }
        if !(0.0..=1.0).contains(&entry.uncertainty) {
            return Err(ValidationFailure::UncertaintyOutOfRange);
        }
        if entry.created_at > entry.last_validated {
            return Err(ValidationFailure::TimestampOrder);
        }
        Ok(())
    }

    /// Incremental update: near-duplicates merge into the most similar
    /// existing entry (existing embedding kept, relevance maps unioned by
    /// max); otherwise insert, evicting the lowest-freshness entry at
    /// capacity.
    pub fn ingest(&mut self, entry: KnowledgeEntry, now: u64) -> IngestOutcome {
        if let Err(failure) = self.validate(&entry) {
            return IngestOutcome::Rejected(failure);
        }
        // Most similar existing entry; ties resolved by lowest id via scan order.
        let mut best: Option<(u64, f64)> = None;
        for e in self.entries.values() {
            let c = cosine(&entry.embedding, &e.embedding);
            if best.map_or(true, |(_, bc)| c > bc) {
                best = Some((e.id, c));
            }
        }
        if let Some((id, c)) = best {
            if c >= self.config.redundancy_threshold {
                let existing = self.entries.get_mut(&id).unwrap();
                for (task, score) in entry.relevance {
                    let slot = existing.relevance.entry(task).or_insert(0.0);
                    if score > *slot {
                        *slot = score;
                    }
                }
                existing.last_validated = now;
                return IngestOutcome::Merged(id);
            }
        }
        if self.entries.len() >= self.config.capacity {
            // Evict lowest freshness, ties by lowest id.
            let victim = self
                .entries
                .values()
                .map(|e| (self.freshness_weight(e, now), e.id))
                .fold(None::<(f64, u64)>, |acc, (w, id)| match acc {
                    Some((bw, bid)) if bw < w || (bw == w && bid < id) => Some((bw, bid)),
                    _ => Some((w, id)),
                })
                .map(|(_, id)| id);
            if let Some(id) = victim {
                self.entries.remove(&id);
            }
        }
        self.entries.insert(entry.id, entry);
        IngestOutcome::Accepted
    }

    /// Exponential decay with configurable half-life: 2^(-(age)/half_life).
    pub fn freshness_weight(&self, entry: &KnowledgeEntry, now: u64) -> f64 {
        debug_assert!(now >= entry.created_at);
        let age = now.saturating_sub(entry.last_validated) as f64;
        (2.0f64).powf(-age / self.config.half_life)
    }

    /// Removes entries that are both stale (freshness below the floor) and
    /// low-value (max task relevance below the floor). Returns removed ids in
    /// ascending order.
    ///
    /// Performance-driven validation signals would slot in here as an extra
    /// predicate; only the decay + relevance rules are implemented.
    pub fn prune(&mut self, now: u64) -> Vec<u64> {
        let floor = self.config.relevance_floor;
        let removed: Vec<u64> = self
            .entries
            .values()
            .filter(|e| self.freshness_weight(e, now) < floor && e.max_relevance() < floor)
            .map(|e| e.id)
            .collect();
        for id in &removed {
            self.entries.remove(id);
        }
        removed
    }

    /// Consistent point-in-time copy of the corpus.
    pub fn snapshot(&self, tick: u64) -> CorpusSnapshot {
        CorpusSnapshot {
            config: self.config.clone(),
            entries: self.entries.values().cloned().collect(),
            tick,
        }
    }

    pub fn load(snapshot: CorpusSnapshot) -> Result<Self, CorpusError> {
        snapshot.config.validate()?;
        if snapshot.entries.len() > snapshot.config.capacity {
            return Err(CorpusError::OverCapacity);
        }
        let mut corpus = Self { config: snapshot.config, entries: BTreeMap::new() };
        let mut last_id: Option<u64> = None;
        for entry in snapshot.entries {
            match last_id {
                Some(prev) if entry.id == prev => return Err(CorpusError::DuplicateId(entry.id)),
                Some(prev) if entry.id < prev => return Err(CorpusError::Unsorted),
                _ => {}
            }
            last_id = Some(entry.id);
            if let Err(failure) = corpus.validate(&entry) {
                return Err(CorpusError::InvalidEntry { id: entry.id, failure });
            }
            corpus.entries.insert(entry.id, entry);
        }
        Ok(corpus)
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    format: String,
    config: CorpusConfig,
    tick: u64,
}

impl CorpusSnapshot {
    /// Line-delimited format: a header record carrying the config and format
    /// version, then one entry per line in ascending id order. Embedding
    /// components are pinned at 9 significant decimal digits.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CorpusError> {
        let header = SnapshotHeader {
            format: SNAPSHOT_FORMAT.to_string(),
            config: self.config.clone(),
            tick: self.tick,
        };
        writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        for entry in &self.entries {
            let mut e = entry.clone();
            for v in &mut e.embedding {
                *v = linalg::round_sig(*v, 9);
            }
            writeln!(w, "{}", serde_json::to_string(&e).expect("entry serializes"))?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, CorpusError> {
        let mut lines = r.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| CorpusError::BadHeader("empty snapshot".into()))??;
        let header: SnapshotHeader = serde_json::from_str(&header_line)
            .map_err(|e| CorpusError::BadHeader(e.to_string()))?;
        if header.format != SNAPSHOT_FORMAT {
            return Err(CorpusError::BadHeader(format!(
                "unsupported format {:?}",
                header.format
            )));
        }
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: KnowledgeEntry = serde_json::from_str(&line)
                .map_err(|e| CorpusError::Parse { line: i + 2, msg: e.to_string() })?;
            entries.push(entry);
        }
        Ok(Self { config: header.config, entries, tick: header.tick })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CorpusError> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn open(path: &std::path::Path) -> Result<Self, CorpusError> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::normalized;

    pub(crate) fn test_config(dim: usize) -> CorpusConfig {
        CorpusConfig {
            dim,
            half_life: 10.0,
            redundancy_threshold: 0.95,
            relevance_floor: 0.1,
            capacity: 100,
        }
    }

    pub(crate) fn entry(id: u64, embedding: Vec<f64>, tick: u64) -> KnowledgeEntry {
        KnowledgeEntry {
            id,
            embedding: normalized(embedding),
            text: format!("entry {id}"),
            domain: "traffic".into(),
            relevance: BTreeMap::new(),
            created_at: tick,
            last_validated: tick,
            uncertainty: 0.0,
            source: "test".into(),
        }
    }

    #[test]
    fn validate_rules() {
        let corpus = Corpus::new(test_config(4)).unwrap();
        let good = entry(1, vec![1.0, 0.0, 0.0, 0.0], 0);
        assert_eq!(corpus.validate(&good), Ok(()));

        let mut empty_text = good.clone();
        empty_text.text.clear();
        assert_eq!(corpus.validate(&empty_text), Err(ValidationFailure::EmptyPayload));

        let mut short = good.clone();
        short.embedding = vec![0.5, 0.0, 0.0, 0.0];
        assert_eq!(corpus.validate(&short), Err(ValidationFailure::NotUnitNorm));

        let mut bad_score = good.clone();
        bad_score.relevance.insert("t".into(), 1.5);
        assert_eq!(corpus.validate(&bad_score), Err(ValidationFailure::ScoreOutOfRange));

        let mut bad_time = good;
        bad_time.created_at = 5;
        bad_time.last_validated = 3;
        assert_eq!(corpus.validate(&bad_time), Err(ValidationFailure::TimestampOrder));
    }

    #[test]
    fn first_ingest_accepted_exact_duplicate_merged() {
        let mut corpus = Corpus::new(test_config(4)).unwrap();
        let e = entry(1, vec![1.0, 0.0, 0.0, 0.0], 0);
        assert_eq!(corpus.ingest(e.clone(), 0), IngestOutcome::Accepted);
        let mut dup = e;
        dup.id = 2;
        assert_eq!(corpus.ingest(dup, 1), IngestOutcome::Merged(1));
        assert_eq!(corpus.len(), 1);
        assert_eq!(corpus.get(1).unwrap().last_validated, 1);
    }

    #[test]
    fn near_duplicates_merge_into_nearest_per_brute_force_oracle() {
        // Hand-built 4-entry corpus with well separated directions.
        let base = [
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ];
        let mut corpus = Corpus::new(test_config(4)).unwrap();
        for (i, b) in base.iter().enumerate() {
            assert_eq!(corpus.ingest(entry(i as u64, b.clone(), 0), 0), IngestOutcome::Accepted);
        }
        // Near-duplicates of entries 0, 2, 3.
        let probes = [
            (vec![1.0, 0.05, 0.0, 0.0], 10u64),
            (vec![0.03, 0.0, 1.0, 0.0], 11),
            (vec![0.0, 0.02, 0.04, 1.0], 12),
        ];
        for (emb, id) in probes {
            // Oracle: exhaustive cosine scan against the current corpus.
            let emb_n = normalized(emb.clone());
            let expected = corpus
                .entries()
                .map(|e| (e.id, cosine(&emb_n, &e.embedding)))
                .fold((u64::MAX, f64::NEG_INFINITY), |acc, (id, c)| {
                    if c > acc.1 {
                        (id, c)
                    } else {
                        acc
                    }
                })
                .0;
            match corpus.ingest(entry(id, emb, 1), 1) {
                IngestOutcome::Merged(got) => assert_eq!(got, expected),
                other => panic!("expected merge, got {other:?}"),
            }
        }
    }

    #[test]
    fn ingest_rejects_invalid() {
        let mut corpus = Corpus::new(test_config(4)).unwrap();
        let mut e = entry(1, vec![1.0, 0.0, 0.0, 0.0], 0);
        e.text.clear();
        assert_eq!(
            corpus.ingest(e, 0),
            IngestOutcome::Rejected(ValidationFailure::EmptyPayload)
        );
    }

    #[test]
    fn freshness_weight_halves_per_half_life() {
        let corpus = Corpus::new(test_config(4)).unwrap();
        let e = entry(1, vec![1.0, 0.0, 0.0, 0.0], 0);
        assert_eq!(corpus.freshness_weight(&e, 0), 1.0);
        assert!((corpus.freshness_weight(&e, 10) - 0.5).abs() < 1e-12);
        assert!((corpus.freshness_weight(&e, 30) - 0.125).abs() < 1e-12);
    }

    #[test]
    fn capacity_eviction_removes_stalest() {
        let mut cfg = test_config(4);
        cfg.capacity = 2;
        cfg.redundancy_threshold = 1.0;
        let mut corpus = Corpus::new(cfg).unwrap();
        corpus.ingest(entry(1, vec![1.0, 0.0, 0.0, 0.0], 0), 0);
        corpus.ingest(entry(2, vec![0.0, 1.0, 0.0, 0.0], 5), 5);
        // Entry 1 is stalest at now=6.
        assert_eq!(corpus.ingest(entry(3, vec![0.0, 0.0, 1.0, 0.0], 6), 6), IngestOutcome::Accepted);
        assert_eq!(corpus.len(), 2);
        assert!(corpus.get(1).is_none());
        assert!(corpus.get(2).is_some() && corpus.get(3).is_some());
    }

    #[test]
    fn prune_requires_both_staleness_and_low_relevance() {
        let mut cfg = test_config(4);
        cfg.relevance_floor = 0.3;
        let mut corpus = Corpus::new(cfg).unwrap();
        // Mixed 6-entry corpus; oracle evaluates the rule entry-by-entry.
        let dirs = [
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0, 0.0],
            vec![0.0, 1.0, 1.0, 0.0],
        ];
        let ticks = [0u64, 0, 50, 50, 100, 100];
        let rels = [0.0, 0.9, 0.0, 0.5, 0.0, 0.2];
        for i in 0..6 {
            let mut e = entry(i as u64, dirs[i as usize].clone(), ticks[i as usize]);
            if rels[i as usize] > 0.0 {
                e.relevance.insert("t".into(), rels[i as usize]);
            }
            assert_eq!(corpus.ingest(e, ticks[i as usize]), IngestOutcome::Accepted);
        }
        let now = 120;
        let expected: Vec<u64> = corpus
            .entries()
            .filter(|e| corpus.freshness_weight(e, now) < 0.3 && e.max_relevance() < 0.3)
            .map(|e| e.id)
            .collect();
        let mut corpus2 = corpus.clone();
        let removed = corpus2.prune(now);
        assert_eq!(removed, expected);
        // Entry 1 is stale but high-relevance: kept. Entry with age 10*hl and
        // zero relevance: removed (2^-10 < 0.3 floor... here ages differ).
        assert!(corpus2.get(1).is_some());
        assert!(corpus2.get(0).is_none());
    }

    #[test]
    fn prune_empty_corpus_is_empty_list() {
        let mut corpus = Corpus::new(test_config(4)).unwrap();
        assert!(corpus.prune(100).is_empty());
    }

    #[test]
    fn snapshot_load_round_trip_field_equality() {
        let mut corpus = Corpus::new(test_config(4)).unwrap();
        // Components exactly representable at 9 significant digits.
        corpus.ingest(entry(1, vec![1.0, 0.0, 0.0, 0.0], 0), 0);
        corpus.ingest(entry(2, vec![0.0, 0.6, 0.8, 0.0], 3), 3);
        let snap = corpus.snapshot(3);
        let mut buf = Vec::new();
        snap.write_to(&mut buf).unwrap();
        let loaded = Corpus::load(CorpusSnapshot::read_from(&buf[..]).unwrap()).unwrap();
        assert_eq!(loaded.config(), corpus.config());
        let a: Vec<_> = corpus.entries().collect();
        let b: Vec<_> = loaded.entries().collect();
        assert_eq!(a, b);
    }

    #[test]
    fn load_rejects_duplicate_ids() {
        let corpus = {
            let mut c = Corpus::new(test_config(4)).unwrap();
            c.ingest(entry(1, vec![1.0, 0.0, 0.0, 0.0], 0), 0);
            c
        };
        let mut snap = corpus.snapshot(0);
        let mut dup = snap.entries[0].clone();
        dup.embedding = normalized(vec![0.0, 1.0, 0.0, 0.0]);
        snap.entries.push(dup);
        match Corpus::load(snap) {
            Err(CorpusError::DuplicateId(1)) => {}
            other => panic!("expected DuplicateId, got {other:?}"),
        }
    }
}
