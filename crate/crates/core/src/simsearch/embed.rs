use std::ops::Range;

use crate::corpus::TestCase;
use crate::error::{Error, Result};

/// Chunk overlap as a fraction of the embedder window.
pub const CHUNK_OVERLAP_FRACTION: f64 = 0.10;

/// Anything that turns a chunk of text into a fixed-size vector.
///
/// `max_chunk_len` is measured in the embedder's own units; the built-in
/// embedder counts characters.
pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn dimension(&self) -> usize;
    fn max_chunk_len(&self) -> usize;
    fn encode_chunk(&self, text: &str) -> Result<Vec<f32>>;

    fn encode_chunks(&self, chunks: &[String]) -> Result<Vec<Vec<f32>>> {
        chunks.iter().map(|c| self.encode_chunk(c)).collect()
    }
}

/// One pooled, unit-length vector per test case.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub test_id: String,
    pub vector: Vec<f32>,
    pub chunk_count: usize,
}

/// Sliding windows over `len` units: each window is `window` long (the last
/// may be shorter) and consecutive windows share `overlap` units.
pub fn chunk_spans(len: usize, window: usize, overlap: usize) -> Result<Vec<Range<usize>>> {
    if window <= overlap {
        return Err(Error::InvalidWindow { window, overlap });
    }
    let stride = window - overlap;
    let mut spans = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + window).min(len);
        spans.push(start..end);
        if end == len {
            return Ok(spans);
        }
        start += stride;
    }
}

/// Character-based chunking of `text`.
pub fn chunk(text: &str, window: usize, overlap: usize) -> Result<Vec<String>> {
    let chars: Vec<char> = text.chars().collect();
    Ok(chunk_spans(chars.len(), window, overlap)?
        .into_iter()
        .map(|r| chars[r].iter().collect())
        .collect())
}

/// The string that represents a test case for retrieval: error message,
/// newline, then the code lines joined by newlines.
pub fn embedding_input(tc: &TestCase) -> String {
    let mut s = String::with_capacity(
        tc.error_message.len() + tc.lines.iter().map(|l| l.len() + 1).sum::<usize>(),
    );
    s.push_str(&tc.error_message);
    for line in &tc.lines {
        s.push('\n');
        s.push_str(line);
    }
    s
}

pub fn l2_normalize(v: &mut [f32]) {
    let norm = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x = (f64::from(*x) / norm) as f32);
    }
}

/// Embeds a test case: chunk, encode each chunk, mean-pool, renormalize.
pub fn embed_test(tc: &TestCase, embedder: &dyn Embedder) -> Result<EmbeddingRecord> {
    let wrap = |reason: String| Error::Embedding {
        embedder: embedder.name().to_string(),
        test_id: tc.id.clone(),
        reason,
    };
    let window = embedder.max_chunk_len();
    let overlap = (CHUNK_OVERLAP_FRACTION * window as f64).round() as usize;
    let chunks = chunk(&embedding_input(tc), window, overlap).map_err(|e| wrap(e.to_string()))?;
    let vectors = embedder
        .encode_chunks(&chunks)
        .map_err(|e| wrap(e.to_string()))?;
    if vectors.len() != chunks.len() {
        return Err(wrap(format!(
            "{} vectors for {} chunks",
            vectors.len(),
            chunks.len()
        )));
    }
    let dim = embedder.dimension();
    let mut pooled = vec![0f64; dim];
    for v in &vectors {
        if v.len() != dim {
            return Err(wrap(
                Error::DimensionMismatch {
                    expected: dim,
                    actual: v.len(),
                }
                .to_string(),
            ));
        }
        pooled.iter_mut().zip(v).for_each(|(p, x)| *p += f64::from(*x));
    }
    let n = vectors.len() as f64;
    let mut vector: Vec<f32> = pooled.into_iter().map(|p| (p / n) as f32).collect();
    l2_normalize(&mut vector);
    Ok(EmbeddingRecord {
        test_id: tc.id.clone(),
        vector,
        chunk_count: chunks.len(),
    })
}

/// Character-trigram feature hashing into `dimension` buckets.
///
/// Deterministic and seedless: the bucket is FNV-1a of the trigram's UTF-8
/// bytes. Texts shorter than three characters hash as a single feature.
#[derive(Debug, Clone)]
pub struct NgramHashEmbedder {
    dimension: usize,
    max_chunk_len: usize,
}

impl NgramHashEmbedder {
    pub const NAME: &'static str = "ngram-hash-v1";
    pub const DEFAULT_DIMENSION: usize = 1024;
    pub const DEFAULT_CHUNK_LEN: usize = 8192;

    pub fn new(dimension: usize) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::Config("embedding dimension must be >= 1".into()));
        }
        Ok(NgramHashEmbedder {
            dimension,
            max_chunk_len: Self::DEFAULT_CHUNK_LEN,
        })
    }

    pub fn with_chunk_len(mut self, max_chunk_len: usize) -> Self {
        self.max_chunk_len = max_chunk_len.max(1);
        self
    }

    fn bucket(&self, feature: &[char]) -> usize {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0100_0000_01b3;
        let mut buf = [0u8; 4];
        let mut h = OFFSET;
        for c in feature {
            for b in c.encode_utf8(&mut buf).bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(PRIME);
            }
        }
        (h % self.dimension as u64) as usize
    }
}

impl Default for NgramHashEmbedder {
    fn default() -> Self {
        NgramHashEmbedder {
            dimension: Self::DEFAULT_DIMENSION,
            max_chunk_len: Self::DEFAULT_CHUNK_LEN,
        }
    }
}

impl Embedder for NgramHashEmbedder {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn max_chunk_len(&self) -> usize {
        self.max_chunk_len
    }

    fn encode_chunk(&self, text: &str) -> Result<Vec<f32>> {
        let chars: Vec<char> = text.chars().collect();
        let mut counts = vec![0f32; self.dimension];
        match chars.len() {
            0 => {}
            1 | 2 => counts[self.bucket(&chars)] += 1.0,
            _ => chars
                .windows(3)
                .for_each(|tri| counts[self.bucket(tri)] += 1.0),
        }
        l2_normalize(&mut counts);
        Ok(counts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Meta, Timestamp};
    use crate::simsearch::cosine;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn case(error: &str, lines: &[&str]) -> TestCase {
        TestCase {
            id: "t".into(),
            lines: lines.iter().map(|s| s.to_string()).collect(),
            original_line_map: (1..=lines.len()).collect(),
            error_message: error.into(),
            failure_ts: Timestamp::parse("2025-01-01T00:00:00Z").unwrap(),
            faulty_lines: BTreeSet::new(),
            meta: Meta::new(),
        }
    }

    /// Counts characters of the input into a 4-d vector; handy for pooling checks.
    struct Toy {
        window: usize,
    }

    impl Embedder for Toy {
        fn name(&self) -> &str {
            "toy"
        }
        fn dimension(&self) -> usize {
            4
        }
        fn max_chunk_len(&self) -> usize {
            self.window
        }
        fn encode_chunk(&self, text: &str) -> Result<Vec<f32>> {
            let mut v = vec![0.0; 4];
            for c in text.chars() {
                v[(c as usize) % 4] += 1.0;
            }
            Ok(v)
        }
    }

    #[test]
    fn chunk_spans_overlap_by_exactly_the_overlap() {
        assert_eq!(chunk_spans(20, 10, 1).unwrap(), vec![0..10, 9..19, 18..20]);
        assert_eq!(chunk_spans(5, 10, 1).unwrap(), vec![0..5]);
        assert_eq!(chunk_spans(0, 10, 1).unwrap(), vec![0..0]);
        assert!(matches!(
            chunk_spans(20, 10, 10),
            Err(Error::InvalidWindow { window: 10, overlap: 10 })
        ));
    }

    #[test]
    fn chunk_respects_char_boundaries() {
        let chunks = chunk("äbcdé", 3, 1).unwrap();
        assert_eq!(chunks, vec!["äbc", "cdé"]);
    }

    #[test]
    fn single_chunk_record_is_normalized_chunk_vector() {
        let e = NgramHashEmbedder::default();
        let tc = case("ValueError", &["x = 1", "assert x == 2"]);
        let rec = embed_test(&tc, &e).unwrap();
        let direct = e.encode_chunk(&embedding_input(&tc)).unwrap();
        assert_eq!(rec.chunk_count, 1);
        for (a, b) in rec.vector.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_chunks_pool_to_the_single_chunk_vector() {
        // 19 chars, window 10, overlap 1: chunks "aaaaaaaaa\n" and
        // "\naaaaaaaaa", which the bag-of-chars toy encodes identically.
        let toy = Toy { window: 10 };
        let rec = embed_test(&case("aaaaaaaaa", &["aaaaaaaaa"]), &toy).unwrap();
        assert_eq!(rec.chunk_count, 2);
        let mut single = toy.encode_chunk("aaaaaaaaa\n").unwrap();
        l2_normalize(&mut single);
        assert_eq!(rec.vector, single);

        let rec = embed_test(&case("", &["aaaaaaaaaaaaaaaaaaa"]), &toy).unwrap();
        assert_eq!(rec.chunk_count, 3);
        let norm: f32 = rec.vector.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn empty_error_message_is_fine() {
        let rec = embed_test(&case("", &["run()"]), &NgramHashEmbedder::default()).unwrap();
        let norm: f32 = rec.vector.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn embedder_dimension_errors_carry_test_id() {
        struct Bad;
        impl Embedder for Bad {
            fn name(&self) -> &str {
                "bad"
            }
            fn dimension(&self) -> usize {
                3
            }
            fn max_chunk_len(&self) -> usize {
                100
            }
            fn encode_chunk(&self, _: &str) -> Result<Vec<f32>> {
                Ok(vec![1.0])
            }
        }
        let err = embed_test(&case("e", &["x"]), &Bad).unwrap_err();
        assert!(matches!(err, Error::Embedding { ref test_id, .. } if test_id == "t"));
    }

    #[test]
    fn single_trigram_has_one_bucket() {
        let v = NgramHashEmbedder::default().encode_chunk("abc").unwrap();
        assert_eq!(v.iter().filter(|x| **x != 0.0).count(), 1);
        assert_eq!(v.len(), 1024);
    }

    #[test]
    fn self_similarity_is_one() {
        let e = NgramHashEmbedder::default();
        for s in ["abc", "assert result == 5", "def test_x():\n    pass"] {
            let v = e.encode_chunk(s).unwrap();
            assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn line_order_matters() {
        let e = NgramHashEmbedder::default();
        let a = embed_test(&case("E", &["alpha()", "beta()"]), &e).unwrap();
        let b = embed_test(&case("E", &["beta()", "alpha()"]), &e).unwrap();
        assert_ne!(a.vector, b.vector);
        assert_eq!(a, embed_test(&case("E", &["alpha()", "beta()"]), &e).unwrap());
    }

    fn mutate(rng: &mut ChaCha8Rng, s: &[char], edits: usize) -> String {
        let mut out = s.to_vec();
        let alphabet: Vec<char> = "abcdefghijklmnopqrstuvwxyz_ =()".chars().collect();
        for _ in 0..edits {
            let i = rng.random_range(0..out.len());
            out[i] = alphabet[rng.random_range(0..alphabet.len())];
        }
        out.into_iter().collect()
    }

    /// Empirical check of how trigram hashing behaves under small edits.
    /// Each substituted character disturbs up to three trigrams, so a 5%
    /// edit rate on random text lands near 0.85, while 1% stays above 0.95.
    #[test]
    fn near_duplicates_stay_close() {
        let e = NgramHashEmbedder::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let alphabet: Vec<char> = "abcdefghijklmnopqrstuvwxyz_ =()\n".chars().collect();
        let mut worst_1pct: f64 = 1.0;
        let mut worst_5pct: f64 = 1.0;
        for _ in 0..200 {
            let len = rng.random_range(200..600);
            let base: Vec<char> = (0..len)
                .map(|_| alphabet[rng.random_range(0..alphabet.len())])
                .collect();
            let a = e.encode_chunk(&base.iter().collect::<String>()).unwrap();
            let b1 = e.encode_chunk(&mutate(&mut rng, &base, len / 100)).unwrap();
            let b5 = e.encode_chunk(&mutate(&mut rng, &base, len / 20)).unwrap();
            worst_1pct = worst_1pct.min(cosine(&a, &b1).unwrap());
            worst_5pct = worst_5pct.min(cosine(&a, &b5).unwrap());
        }
        assert!(worst_1pct > 0.95, "1% edits: {worst_1pct}");
        assert!(worst_5pct > 0.75, "5% edits: {worst_5pct}");
    }
}
