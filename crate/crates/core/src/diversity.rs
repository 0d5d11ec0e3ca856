//! Embedding-based novelty: canonical text, pluggable embedding providers and
//! the k-nearest-neighbour cosine diversity score.

use std::hash::Hasher;
use std::sync::Arc;
use std::time::Duration;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::transport::{with_retries, HttpTransport, JsonTransport};

pub const DEFAULT_DIMENSION: usize = 256;
pub const MIN_DIMENSION: usize = 8;
pub const EMBED_URL_ENV: &str = "HELIX_EMBED_URL";

#[derive(Debug, Error, PartialEq)]
pub enum DiversityError {
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("embedding has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding dimension {0} is below the minimum of {MIN_DIMENSION}")]
    DimensionTooSmall(usize),
    #[error("http embedding provider needs an endpoint")]
    MissingEndpoint,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    #[default]
    HashedNgram,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingProviderSpec {
    #[serde(default)]
    pub kind: ProviderKind,
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model_name: Option<String>,
}

fn default_dimension() -> usize {
    DEFAULT_DIMENSION
}

impl Default for EmbeddingProviderSpec {
    fn default() -> Self {
        Self { kind: ProviderKind::HashedNgram, dimension: DEFAULT_DIMENSION, endpoint: None, model_name: None }
    }
}

impl EmbeddingProviderSpec {
    pub fn build(&self) -> Result<Arc<dyn Embedder>, DiversityError> {
        self.build_with_transport(Arc::new(HttpTransport::new(Duration::from_secs(60))))
    }

    pub fn build_with_transport(&self, transport: Arc<dyn JsonTransport>) -> Result<Arc<dyn Embedder>, DiversityError> {
        if self.dimension < MIN_DIMENSION {
            return Err(DiversityError::DimensionTooSmall(self.dimension));
        }
        Ok(match self.kind {
            ProviderKind::HashedNgram => Arc::new(HashedNgramEmbedder::new(self.dimension)),
            ProviderKind::Http => Arc::new(HttpEmbedder {
                endpoint: self
                    .endpoint
                    .clone()
                    .or_else(|| std::env::var(EMBED_URL_ENV).ok())
                    .filter(|e| !e.is_empty())
                    .ok_or(DiversityError::MissingEndpoint)?,
                model: self.model_name.clone().unwrap_or_default(),
                dimension: self.dimension,
                transport,
                retries: 2,
                base_delay: Duration::from_millis(250),
            }),
        })
    }

    pub fn redacted(&self) -> Self {
        Self { endpoint: self.endpoint.as_ref().map(|_| crate::mutators::llm::REDACTED.to_string()), ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiversityConfig {
    pub k: usize,
    pub canonicalize: bool,
}

impl Default for DiversityConfig {
    fn default() -> Self {
        Self { k: 5, canonicalize: true }
    }
}

/// Normalizes line endings, strips trailing whitespace, collapses blank-line
/// runs and trims leading/trailing blank lines.
pub fn canonicalize(content: &str) -> String {
    let unified = content.replace("\r\n", "\n").replace('\r', "\n");
    let mut out: Vec<&str> = Vec::new();
    let mut last_blank = true;
    for line in unified.split('\n') {
        let line = line.trim_end();
        let blank = line.is_empty();
        if blank && last_blank {
            continue;
        }
        out.push(line);
        last_blank = blank;
    }
    while out.last().is_some_and(|l| l.is_empty()) {
        out.pop();
    }
    out.join("\n")
}

pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    /// Returns a unit-norm vector of length [`Embedder::dimension`].
    fn embed(&self, content: &str) -> Result<Vec<f64>, DiversityError>;
}

/// Rescales to unit L2 norm; the zero vector maps to the first basis vector.
pub fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        v.iter_mut().for_each(|x| *x = 0.0);
        if let Some(first) = v.first_mut() {
            *first = 1.0;
        }
        return v;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Character-trigram counts hashed into a fixed number of buckets.
#[derive(Debug, Clone)]
pub struct HashedNgramEmbedder {
    dimension: usize,
}

impl HashedNgramEmbedder {
    pub fn new(dimension: usize) -> Self {
        Self { dimension }
    }

    fn bucket(&self, gram: &[char]) -> usize {
        let mut h = FnvHasher::default();
        let mut buf = [0u8; 4];
        for c in gram {
            h.write(c.encode_utf8(&mut buf).as_bytes());
        }
        (h.finish() % self.dimension as u64) as usize
    }
}

impl Embedder for HashedNgramEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, content: &str) -> Result<Vec<f64>, DiversityError> {
        let chars: Vec<char> = content.chars().collect();
        let mut counts = vec![0.0; self.dimension];
        if chars.len() < 3 {
            if !chars.is_empty() {
                counts[self.bucket(&chars)] += 1.0;
            }
        } else {
            for gram in chars.windows(3) {
                counts[self.bucket(gram)] += 1.0;
            }
        }
        Ok(normalize(counts))
    }
}

/// Client for the `{model, input} -> {data: [{embedding}]}` wire shape.
pub struct HttpEmbedder {
    endpoint: String,
    model: String,
    dimension: usize,
    transport: Arc<dyn JsonTransport>,
    retries: u32,
    base_delay: Duration,
}

impl HttpEmbedder {
    pub fn with_base_delay(mut self, delay: Duration) -> Self {
        self.base_delay = delay;
        self
    }
}

impl Embedder for HttpEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, content: &str) -> Result<Vec<f64>, DiversityError> {
        let body = json!({ "model": self.model, "input": [content] });
        let resp = with_retries(self.retries, self.base_delay, || {
            self.transport.post_json(&self.endpoint, None, &body)
        })
        .map_err(DiversityError::ProviderUnavailable)?;
        let values = resp["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| DiversityError::ProviderUnavailable("response has no data[0].embedding".into()))?;
        let v: Vec<f64> = values
            .iter()
            .map(|x| x.as_f64().filter(|f| f.is_finite()))
            .collect::<Option<_>>()
            .ok_or_else(|| DiversityError::ProviderUnavailable("embedding holds non-numeric values".into()))?;
        if v.len() != self.dimension {
            return Err(DiversityError::DimensionMismatch { expected: self.dimension, got: v.len() });
        }
        Ok(normalize(v))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn score_from_top(mut top: Vec<f64>, k: usize) -> f64 {
    let m = k.min(top.len());
    if m == 0 {
        return 1.0;
    }
    if top.len() > m {
        top.select_nth_unstable_by(m - 1, |a, b| b.total_cmp(a));
        top.truncate(m);
    }
    score_from_sorted(&mut top)
}

/// `1 - mean` of the given similarities, summed largest first and clamped.
fn score_from_sorted(top: &mut [f64]) -> f64 {
    if top.is_empty() {
        return 1.0;
    }
    top.sort_unstable_by(|a, b| b.total_cmp(a));
    let mean = top.iter().sum::<f64>() / top.len() as f64;
    (1.0 - mean).clamp(0.0, 1.0)
}

/// One minus the mean cosine similarity to the `k` most similar other
/// embeddings. Uses all others when fewer than `k` exist; a lone embedding
/// scores 1.
pub fn knn_diversity(target_index: usize, embeddings: &[Vec<f64>], k: usize) -> f64 {
    let target = &embeddings[target_index];
    let sims: Vec<f64> = embeddings
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target_index)
        .map(|(_, e)| dot(target, e))
        .collect();
    score_from_top(sims, k)
}

pub fn score_all(embeddings: &[Vec<f64>], k: usize) -> Vec<f64> {
    (0..embeddings.len()).map(|i| knn_diversity(i, embeddings, k)).collect()
}

/// Incrementally maintained neighbourhoods for an append-only dataset. Each
/// entry keeps its `k` largest similarities, so rescoring after a new
/// generation costs `O(new * total)` instead of a full recomputation, while
/// giving the same values as [`score_all`].
#[derive(Debug, Clone, Default)]
pub struct DiversityIndex {
    k: usize,
    embeddings: Vec<Vec<f64>>,
    // Sorted descending, length <= k.
    top: Vec<Vec<f64>>,
}

impl DiversityIndex {
    pub fn new(k: usize) -> Self {
        Self { k: k.max(1), embeddings: Vec::new(), top: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn push(&mut self, embedding: Vec<f64>) {
        let k = self.k;
        let mut own = Vec::with_capacity(self.embeddings.len());
        for (other, top) in self.embeddings.iter().zip(self.top.iter_mut()) {
            let s = dot(&embedding, other);
            own.push(s);
            insert_bounded(top, s, k);
        }
        own.sort_unstable_by(|a, b| b.total_cmp(a));
        own.truncate(k);
        self.embeddings.push(embedding);
        self.top.push(own);
    }

    pub fn score(&self, index: usize) -> f64 {
        let mut top = self.top[index].clone();
        score_from_sorted(&mut top)
    }

    pub fn scores(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.score(i)).collect()
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }
}

fn insert_bounded(top: &mut Vec<f64>, s: f64, k: usize) {
    if top.len() == k && top.last().is_some_and(|&last| s <= last) {
        return;
    }
    let pos = top.partition_point(|&x| x >= s);
    top.insert(pos, s);
    top.truncate(k);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn oracle(embeddings: &[Vec<f64>], k: usize) -> Vec<f64> {
        let n = embeddings.len();
        (0..n)
            .map(|i| {
                let mut sims = Vec::new();
                for j in 0..n {
                    if i != j {
                        let s: f64 = (0..embeddings[i].len()).map(|d| embeddings[i][d] * embeddings[j][d]).sum();
                        sims.push(s);
                    }
                }
                sims.sort_by(|a, b| b.partial_cmp(a).unwrap());
                let m = k.min(sims.len());
                if m == 0 {
                    1.0
                } else {
                    (1.0 - sims[..m].iter().sum::<f64>() / m as f64).clamp(0.0, 1.0)
                }
            })
            .collect()
    }

    fn random_unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
        normalize((0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
    }

    #[test]
    fn canonicalize_rules() {
        assert_eq!(canonicalize("a \r\n\r\n\r\nb"), "a\n\nb");
        assert_eq!(canonicalize(""), "");
        assert_eq!(canonicalize("\n\n  x  \n\n\n\ty\t\n\n"), "  x\n\n\ty");
        let c = canonicalize("p\r\nq  \n\n\nr");
        assert_eq!(canonicalize(&c), c);
    }

    #[test]
    fn hashed_ngram_is_deterministic_unit() {
        let e = HashedNgramEmbedder::new(256);
        let a = e.embed("(* p0 (var 0))").unwrap();
        assert_eq!(a, e.embed("(* p0 (var 0))").unwrap());
        assert!((dot(&a, &a).sqrt() - 1.0).abs() < 1e-9);
        let empty = e.embed("").unwrap();
        assert_eq!(empty[0], 1.0);
        assert!((dot(&empty, &empty) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_trigrams_are_orthogonal() {
        let e = HashedNgramEmbedder::new(256);
        // Texts over disjoint alphabets; verify the hashed buckets are disjoint
        // too before checking the dot product.
        let a_text = "aaaaaa";
        let b_text = "bcbcbcb";
        let a = e.embed(a_text).unwrap();
        let b = e.embed(b_text).unwrap();
        let buckets = |v: &[f64]| v.iter().enumerate().filter(|(_, x)| **x > 0.0).map(|(i, _)| i).collect::<Vec<_>>();
        let (ba, bb) = (buckets(&a), buckets(&b));
        assert!(ba.iter().all(|i| !bb.contains(i)));
        assert_eq!(dot(&a, &b), 0.0);
    }

    #[test]
    fn knn_examples() {
        let v = vec![1.0, 0.0, 0.0];
        let w = vec![0.0, 1.0, 0.0];
        assert_eq!(score_all(&[v.clone(), v.clone()], 1), vec![0.0, 0.0]);
        assert_eq!(score_all(&[v.clone(), w.clone()], 1), vec![1.0, 1.0]);
        assert_eq!(score_all(std::slice::from_ref(&v), 5), vec![1.0]);
        assert_eq!(score_all(&[v.clone(), v.clone(), v.clone()], 2), vec![0.0; 3]);
    }

    #[test]
    fn knn_matches_oracle_on_random_sets() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let five: Vec<_> = (0..5).map(|_| random_unit(&mut rng, 16)).collect();
        assert_eq!(score_all(&five, 2), oracle(&five, 2));
        let ten: Vec<_> = (0..10).map(|_| random_unit(&mut rng, 16)).collect();
        for (got, want) in score_all(&ten, 3).iter().zip(oracle(&ten, 3)) {
            assert!((got - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn negative_similarity_is_clamped() {
        let v = vec![1.0, 0.0];
        let w = vec![-1.0, 0.0];
        assert_eq!(score_all(&[v, w], 1), vec![1.0, 1.0]);
    }

    #[test]
    fn duplicate_drives_diversity_to_zero() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut set: Vec<_> = (0..6).map(|_| random_unit(&mut rng, 8)).collect();
        set.push(set[2].clone());
        assert_eq!(knn_diversity(2, &set, 1), 0.0);
    }

    #[test]
    fn index_matches_batch_scoring() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut index = DiversityIndex::new(3);
        let mut all = Vec::new();
        for _ in 0..40 {
            let e = random_unit(&mut rng, 12);
            index.push(e.clone());
            all.push(e);
            assert_eq!(index.scores(), score_all(&all, 3));
        }
    }

    #[test]
    fn dimension_guard() {
        let spec = EmbeddingProviderSpec { dimension: 4, ..Default::default() };
        assert!(matches!(spec.build(), Err(DiversityError::DimensionTooSmall(4))));
    }

    struct FixedTransport(serde_json::Value);
    impl JsonTransport for FixedTransport {
        fn post_json(&self, _: &str, _: Option<&str>, body: &serde_json::Value) -> Result<serde_json::Value, String> {
            assert!(body["input"].is_array());
            Ok(self.0.clone())
        }
    }

    struct DownTransport;
    impl JsonTransport for DownTransport {
        fn post_json(&self, _: &str, _: Option<&str>, _: &serde_json::Value) -> Result<serde_json::Value, String> {
            Err("connection refused".into())
        }
    }

    fn http_spec(d: usize) -> EmbeddingProviderSpec {
        EmbeddingProviderSpec {
            kind: ProviderKind::Http,
            dimension: d,
            endpoint: Some("http://localhost:1/embeddings".into()),
            model_name: Some("m".into()),
        }
    }

    #[test]
    fn http_provider_normalizes() {
        let resp = json!({"data": [{"embedding": [3.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]}]});
        let e = http_spec(8).build_with_transport(Arc::new(FixedTransport(resp))).unwrap();
        let v = e.embed("x").unwrap();
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn http_provider_errors() {
        let resp = json!({"data": [{"embedding": [1.0, 2.0]}]});
        let e = http_spec(8).build_with_transport(Arc::new(FixedTransport(resp))).unwrap();
        assert_eq!(e.embed("x").unwrap_err(), DiversityError::DimensionMismatch { expected: 8, got: 2 });

        let down = HttpEmbedder {
            endpoint: "http://localhost:1".into(),
            model: String::new(),
            dimension: 8,
            transport: Arc::new(DownTransport),
            retries: 2,
            base_delay: Duration::from_millis(1),
        };
        assert!(matches!(down.embed("x"), Err(DiversityError::ProviderUnavailable(_))));
        let missing = EmbeddingProviderSpec { endpoint: None, ..http_spec(8) };
        assert!(matches!(missing.build(), Err(DiversityError::MissingEndpoint)));
    }

    proptest! {
        #[test]
        fn scores_in_unit_interval(seed in any::<u64>(), n in 1usize..20, k in 1usize..6) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let set: Vec<_> = (0..n).map(|_| random_unit(&mut rng, 8)).collect();
            for s in score_all(&set, k) {
                prop_assert!((0.0..=1.0).contains(&s));
            }
        }

        #[test]
        fn permutation_permutes_scores(seed in any::<u64>(), n in 2usize..15) {
            use rand::seq::SliceRandom;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let set: Vec<_> = (0..n).map(|_| random_unit(&mut rng, 8)).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let shuffled: Vec<_> = perm.iter().map(|&i| set[i].clone()).collect();
            let base = score_all(&set, 2);
            let moved = score_all(&shuffled, 2);
            for (pos, &i) in perm.iter().enumerate() {
                prop_assert!((moved[pos] - base[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn hashed_ngram_never_needs_clamp(a in ".{0,40}", b in ".{0,40}") {
            let e = HashedNgramEmbedder::new(64);
            let (va, vb) = (e.embed(&a).unwrap(), e.embed(&b).unwrap());
            let raw = 1.0 - dot(&va, &vb);
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&raw));
        }
    }
}
