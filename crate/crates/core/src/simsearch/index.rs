use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::embed::{embed_test, Embedder, EmbeddingRecord};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::filtering::KnowledgeBase;
use crate::fsutil;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHit {
    pub test_id: String,
    pub score: f64,
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let (mut dot, mut nu, mut nv) = (0f64, 0f64, 0f64);
    for (a, b) in u.iter().zip(v) {
        let (a, b) = (f64::from(*a), f64::from(*b));
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (nu.sqrt() * nv.sqrt()))
}

/// Top-r retrieval over a knowledge base. The exact index below is the
/// reference; an approximate backend must honour the same contract.
pub trait NeighborSearch: Send + Sync {
    fn search(
        &self,
        query: &[f32],
        kb: &KnowledgeBase,
        r: usize,
        corpus: &Corpus,
    ) -> Result<Vec<SimilarityHit>>;
}

/// In-memory store of one embedding per test case, searched exhaustively.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    pub embedder: String,
    pub dimension: usize,
    records: BTreeMap<String, EmbeddingRecord>,
}

impl EmbeddingIndex {
    pub fn new(embedder: impl Into<String>, dimension: usize) -> Self {
        EmbeddingIndex {
            embedder: embedder.into(),
            dimension,
            records: BTreeMap::new(),
        }
    }

    /// Embeds every case of `corpus` in parallel.
    pub fn build(corpus: &Corpus, embedder: &dyn Embedder) -> Result<Self> {
        let records = corpus
            .cases()
            .par_iter()
            .map(|tc| embed_test(tc, embedder))
            .collect::<Result<Vec<_>>>()?;
        let mut index = EmbeddingIndex::new(embedder.name(), embedder.dimension());
        for rec in records {
            index.insert(rec)?;
        }
        Ok(index)
    }

    pub fn insert(&mut self, record: EmbeddingRecord) -> Result<()> {
        if record.vector.len() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                actual: record.vector.len(),
            });
        }
        self.records.insert(record.test_id.clone(), record);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingRecord> {
        self.records.get(id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &EmbeddingRecord> {
        self.records.values()
    }

    /// Checks that every corpus case has a record of the right width.
    pub fn covers(&self, corpus: &Corpus) -> Result<()> {
        for tc in corpus.iter() {
            let rec = self
                .get(&tc.id)
                .ok_or_else(|| Error::MissingEmbedding(tc.id.clone()))?;
            if rec.vector.len() != self.dimension {
                return Err(Error::DimensionMismatch {
                    expected: self.dimension,
                    actual: rec.vector.len(),
                });
            }
        }
        Ok(())
    }
}

impl NeighborSearch for EmbeddingIndex {
    /// Exact top-r by descending cosine; ties go to the earlier failure,
    /// then the smaller id.
    fn search(
        &self,
        query: &[f32],
        kb: &KnowledgeBase,
        r: usize,
        corpus: &Corpus,
    ) -> Result<Vec<SimilarityHit>> {
        if kb.contains(&kb.query_id) {
            return Err(Error::LabelLeak(kb.query_id.clone()));
        }
        let mut scored = Vec::with_capacity(kb.len());
        for id in &kb.members {
            let rec = self
                .get(id)
                .ok_or_else(|| Error::MissingEmbedding(id.clone()))?;
            let ts = corpus
                .get(id)
                .map(|tc| tc.failure_ts.epoch_ms)
                .ok_or_else(|| Error::UnknownId(id.clone()))?;
            scored.push((cosine(query, &rec.vector)?, ts, id));
        }
        scored.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.cmp(&b.1))
                .then_with(|| a.2.cmp(b.2))
        });
        Ok(scored
            .into_iter()
            .take(r)
            .map(|(score, _, id)| SimilarityHit {
                test_id: id.clone(),
                score,
            })
            .collect())
    }
}

const SIDECAR_MAGIC: &[u8; 8] = b"SPKEMB01";

/// Binary sidecar layout (all integers little-endian u32):
/// magic, name length, name bytes, dimension, record count, then per record
/// id length, id bytes, chunk count, `dimension` f32 values.
pub fn write_sidecar(index: &EmbeddingIndex) -> Vec<u8> {
    fn put_u32(buf: &mut Vec<u8>, v: usize) {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(SIDECAR_MAGIC);
    put_u32(&mut buf, index.embedder.len());
    buf.extend_from_slice(index.embedder.as_bytes());
    put_u32(&mut buf, index.dimension);
    put_u32(&mut buf, index.len());
    for rec in index.records() {
        put_u32(&mut buf, rec.test_id.len());
        buf.extend_from_slice(rec.test_id.as_bytes());
        put_u32(&mut buf, rec.chunk_count);
        for x in &rec.vector {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf
}

pub fn read_sidecar(bytes: &[u8]) -> Result<EmbeddingIndex> {
    struct Cursor<'a>(&'a [u8]);
    impl<'a> Cursor<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            if self.0.len() < n {
                return Err(Error::MalformedSidecar("truncated".into()));
            }
            let (head, tail) = self.0.split_at(n);
            self.0 = tail;
            Ok(head)
        }
        fn u32(&mut self) -> Result<usize> {
            let b = self.take(4)?;
            Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
        }
        fn string(&mut self) -> Result<String> {
            let n = self.u32()?;
            String::from_utf8(self.take(n)?.to_vec())
                .map_err(|_| Error::MalformedSidecar("non-UTF-8 string".into()))
        }
    }

    let mut cur = Cursor(bytes);
    if cur.take(SIDECAR_MAGIC.len())? != SIDECAR_MAGIC {
        return Err(Error::MalformedSidecar("bad magic".into()));
    }
    let name = cur.string()?;
    let dimension = cur.u32()?;
    let count = cur.u32()?;
    let mut index = EmbeddingIndex::new(name, dimension);
    for _ in 0..count {
        let test_id = cur.string()?;
        let chunk_count = cur.u32()?;
        let vector = cur
            .take(dimension * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        index.insert(EmbeddingRecord {
            test_id,
            vector,
            chunk_count,
        })?;
    }
    if !cur.0.is_empty() {
        return Err(Error::MalformedSidecar("trailing bytes".into()));
    }
    Ok(index)
}

#[derive(Serialize, Deserialize)]
struct JsonSidecar {
    embedder: String,
    dim: usize,
    count: usize,
    records: Vec<JsonRecord>,
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    test_id: String,
    chunk_count: usize,
    vector: Vec<f32>,
}

/// Human-readable form of the sidecar, for debugging.
pub fn sidecar_to_json(index: &EmbeddingIndex) -> Result<String> {
    let doc = JsonSidecar {
        embedder: index.embedder.clone(),
        dim: index.dimension,
        count: index.len(),
        records: index
            .records()
            .map(|r| JsonRecord {
                test_id: r.test_id.clone(),
                chunk_count: r.chunk_count,
                vector: r.vector.clone(),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn sidecar_from_json(text: &str) -> Result<EmbeddingIndex> {
    let doc: JsonSidecar = serde_json::from_str(text)?;
    if doc.count != doc.records.len() {
        return Err(Error::MalformedSidecar(format!(
            "count {} but {} records",
            doc.count,
            doc.records.len()
        )));
    }
    let mut index = EmbeddingIndex::new(doc.embedder, doc.dim);
    for r in doc.records {
        index.insert(EmbeddingRecord {
            test_id: r.test_id,
            vector: r.vector,
            chunk_count: r.chunk_count,
        })?;
    }
    Ok(index)
}

/// Saves as JSON when the path ends in `.json`, binary otherwise.
pub fn save_index(index: &EmbeddingIndex, path: &Path) -> Result<()> {
    let bytes = if is_json(path) {
        sidecar_to_json(index)?.into_bytes()
    } else {
        write_sidecar(index)
    };
    fsutil::atomic_write(path, &bytes)
}

pub fn load_index(path: &Path) -> Result<EmbeddingIndex> {
    if is_json(path) {
        sidecar_from_json(&fsutil::read_to_string(path)?)
    } else {
        read_sidecar(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "json")
}
