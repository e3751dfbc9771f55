//! Tokenization and the two retrievers: a BM25 inverted index and a dense
//! cosine index built from hashed random token projections (or imported
//! embeddings).
//!
//! # BM25
//!
//! ```text
//! score(D, Q) = Σ_{t ∈ distinct(Q)} IDF(t) · tf·(k1 + 1) / (tf + k1·(1 − b + b·|D|/avgdl))
//! IDF(t)      = ln(1 + (N − df + 0.5) / (df + 0.5))
//! ```
//!
//! Query terms are deduplicated and visited in lexicographic order, so the
//! floating-point summation order is fixed for every code path that scores.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tokenizer {
    pub lowercase: bool,
    pub min_len: usize,
    /// Dropped after splitting; empty by default.
    pub stopwords: BTreeSet<String>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self {
            lowercase: true,
            min_len: 1,
            stopwords: BTreeSet::new(),
        }
    }
}

impl Tokenizer {
    /// Splits on non-alphanumeric characters.
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|s| !s.is_empty())
            .map(|s| {
                if self.lowercase {
                    s.to_lowercase()
                } else {
                    s.to_string()
                }
            })
            .filter(|s| s.chars().count() >= self.min_len.max(1))
            .filter(|s| !self.stopwords.contains(s))
            .collect()
    }
}

/// Tokenizes with the default tokenizer.
pub fn tokenize(text: &str) -> Vec<String> {
    Tokenizer::default().tokenize(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn idf(&self, n_docs: usize, df: usize) -> f64 {
        let n = n_docs as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Contribution of one query term occurring `tf` times in a document.
    pub fn term_score(&self, idf: f64, tf: u32, doc_len: u32, avg_len: f64) -> f64 {
        if tf == 0 {
            return 0.0;
        }
        let tf = f64::from(tf);
        let norm = self.k1 * (1.0 - self.b + self.b * f64::from(doc_len) / avg_len);
        idf * tf * (self.k1 + 1.0) / (tf + norm)
    }
}

/// Distinct query terms in lexicographic order.
pub fn query_terms(tokens: &[String]) -> Vec<&str> {
    let set: BTreeSet<&str> = tokens.iter().map(String::as_str).collect();
    set.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub score: f64,
}

/// Ranked documents ordered by (score desc, doc id asc).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoredRanking {
    pub entries: Vec<ScoredDoc>,
}

impl ScoredRanking {
    /// Sorts `(doc, score)` pairs into ranking order and keeps the top `k`.
    pub fn from_scores(mut scored: Vec<ScoredDoc>, k: usize) -> Self {
        scored.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.doc_id.cmp(&b.doc_id))
        });
        scored.truncate(k);
        Self { entries: scored }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.doc_id.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseIndex {
    pub params: Bm25Params,
    pub tokenizer: Tokenizer,
    doc_ids: Vec<String>,
    doc_lens: Vec<u32>,
    total_len: u64,
    /// term → (doc ordinal, term frequency), ordinals ascending.
    postings: BTreeMap<String, Vec<(u32, u32)>>,
}

impl SparseIndex {
    pub fn build<'a, I>(docs: I, tokenizer: Tokenizer, params: Bm25Params) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut seen = std::collections::HashSet::new();
        let mut index = Self {
            params,
            tokenizer,
            doc_ids: Vec::new(),
            doc_lens: Vec::new(),
            total_len: 0,
            postings: BTreeMap::new(),
        };
        for (id, text) in docs {
            if !seen.insert(id.to_string()) {
                return Err(Error::Build(format!("duplicate doc-ref {id:?}")));
            }
            let tokens = index.tokenizer.tokenize(text);
            index.add(id, &tokens);
        }
        Ok(index)
    }

    fn add(&mut self, id: &str, tokens: &[String]) {
        let ordinal = self.doc_ids.len() as u32;
        let mut tf: BTreeMap<&str, u32> = BTreeMap::new();
        for t in tokens {
            *tf.entry(t.as_str()).or_default() += 1;
        }
        for (term, count) in tf {
            self.postings
                .entry(term.to_string())
                .or_default()
                .push((ordinal, count));
        }
        self.doc_ids.push(id.to_string());
        self.doc_lens.push(tokens.len() as u32);
        self.total_len += tokens.len() as u64;
    }

    pub fn n_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_len(&self) -> f64 {
        if self.doc_ids.is_empty() {
            0.0
        } else {
            self.total_len as f64 / self.doc_ids.len() as f64
        }
    }

    pub fn df(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn tf(&self, term: &str, doc_id: &str) -> u32 {
        let Some(ord) = self.ordinal(doc_id) else {
            return 0;
        };
        self.postings
            .get(term)
            .and_then(|p| p.iter().find(|(o, _)| *o as usize == ord))
            .map_or(0, |(_, tf)| *tf)
    }

    pub fn doc_len(&self, doc_id: &str) -> Option<u32> {
        self.ordinal(doc_id).map(|o| self.doc_lens[o])
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.postings.keys().map(String::as_str)
    }

    fn ordinal(&self, doc_id: &str) -> Option<usize> {
        self.doc_ids.iter().position(|d| d == doc_id)
    }

    pub fn score(&self, query_tokens: &[String], doc_id: &str) -> f64 {
        let Some(ord) = self.ordinal(doc_id) else {
            return 0.0;
        };
        let avg = self.avg_doc_len();
        let mut total = 0.0;
        for term in query_terms(query_tokens) {
            let Some(postings) = self.postings.get(term) else {
                continue;
            };
            if let Some((_, tf)) = postings.iter().find(|(o, _)| *o as usize == ord) {
                let idf = self.params.idf(self.n_docs(), postings.len());
                total += self.params.term_score(idf, *tf, self.doc_lens[ord], avg);
            }
        }
        total
    }

    /// Scores every document with at least one matching term.
    pub fn score_all(&self, query_tokens: &[String]) -> Vec<(usize, f64)> {
        let avg = self.avg_doc_len();
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for term in query_terms(query_tokens) {
            let Some(postings) = self.postings.get(term) else {
                continue;
            };
            let idf = self.params.idf(self.n_docs(), postings.len());
            for &(ord, tf) in postings {
                let ord = ord as usize;
                *acc.entry(ord).or_insert(0.0) +=
                    self.params.term_score(idf, tf, self.doc_lens[ord], avg);
            }
        }
        acc.into_iter().collect()
    }

    pub fn retrieve_tokens(&self, query_tokens: &[String], k: usize) -> ScoredRanking {
        let scored = self
            .score_all(query_tokens)
            .into_iter()
            .filter(|(_, s)| *s > 0.0)
            .map(|(ord, score)| ScoredDoc {
                doc_id: self.doc_ids[ord].clone(),
                score,
            })
            .collect();
        ScoredRanking::from_scores(scored, k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseIndex {
    pub dim: usize,
    pub seed: u64,
    pub tokenizer: Tokenizer,
    doc_ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
    /// Documents without tokens (or with an all-zero imported vector).
    zero: Vec<bool>,
}

/// Deterministic pseudo-random unit vector for a token.
pub fn token_vector(token: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(token.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(key);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v);
    v
}

/// Normalizes in place; returns false (leaving zeros) for a zero vector.
fn normalize(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        v.iter_mut().for_each(|x| *x = 0.0);
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl DenseIndex {
    pub fn build<'a, I>(docs: I, dim: usize, seed: u64, tokenizer: Tokenizer) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        if dim < 8 {
            return Err(Error::Build(format!("dense dimension {dim} < 8")));
        }
        let mut index = Self {
            dim,
            seed,
            tokenizer,
            doc_ids: Vec::new(),
            vectors: Vec::new(),
            zero: Vec::new(),
        };
        let mut cache = HashMap::new();
        let mut seen = std::collections::HashSet::new();
        for (id, text) in docs {
            if !seen.insert(id.to_string()) {
                return Err(Error::Build(format!("duplicate doc-ref {id:?}")));
            }
            let v = index.embed_cached(text, &mut cache);
            index.push(id, v);
        }
        Ok(index)
    }

    fn push(&mut self, id: &str, mut v: Vec<f64>) {
        let ok = normalize(&mut v);
        if !ok {
            log::debug!("document {id:?} has a zero vector and scores 0");
        }
        self.doc_ids.push(id.to_string());
        self.vectors.push(v);
        self.zero.push(!ok);
    }

    fn embed_cached(&self, text: &str, cache: &mut HashMap<String, Vec<f64>>) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for tok in self.tokenizer.tokenize(text) {
            let tv = cache
                .entry(tok)
                .or_insert_with_key(|t| token_vector(t, self.dim, self.seed));
            acc.iter_mut().zip(tv.iter()).for_each(|(a, x)| *a += x);
        }
        acc
    }

    /// Unit embedding of a text (zero vector when it has no tokens).
    pub fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = self.embed_cached(text, &mut HashMap::new());
        normalize(&mut v);
        v
    }

    /// Loads `doc-id<TAB>v1,v2,...` lines; dimension comes from the first line.
    pub fn load_embeddings(path: &Path, seed: u64, tokenizer: Tokenizer) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::Ingestion {
            file: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut index = Self {
            dim: 0,
            seed,
            tokenizer,
            doc_ids: Vec::new(),
            vectors: Vec::new(),
            zero: Vec::new(),
        };
        let malformed = |line: usize, message: String| Error::Malformed {
            file: path.to_path_buf(),
            line,
            message,
        };
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (id, values) = line
                .split_once('\t')
                .ok_or_else(|| malformed(i + 1, "missing tab separator".into()))?;
            let v = values
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| malformed(i + 1, e.to_string()))?;
            if index.doc_ids.is_empty() {
                index.dim = v.len();
            } else if v.len() != index.dim {
                return Err(malformed(
                    i + 1,
                    format!("dimension {} differs from {}", v.len(), index.dim),
                ));
            }
            if index.doc_ids.iter().any(|d| d == id) {
                return Err(Error::Build(format!("duplicate doc-ref {id:?}")));
            }
            index.push(id, v);
        }
        Ok(index)
    }

    pub fn n_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn vector(&self, doc_id: &str) -> Option<&[f64]> {
        self.doc_ids
            .iter()
            .position(|d| d == doc_id)
            .map(|i| self.vectors[i].as_slice())
    }

    pub fn is_zero(&self, doc_id: &str) -> bool {
        self.doc_ids
            .iter()
            .position(|d| d == doc_id)
            .is_some_and(|i| self.zero[i])
    }

    pub fn retrieve_vector(&self, query: &[f64], k: usize) -> ScoredRanking {
        let scored = self
            .doc_ids
            .iter()
            .zip(&self.vectors)
            .map(|(id, v)| ScoredDoc {
                doc_id: id.clone(),
                score: dot(query, v),
            })
            .collect();
        ScoredRanking::from_scores(scored, k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum RetrievalIndex {
    Sparse(SparseIndex),
    Dense(DenseIndex),
}

/// Which retriever to build; serialized in configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RetrieverKind {
    #[default]
    Bm25,
    Dense { dim: usize, seed: u64 },
}

impl RetrieverKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Bm25 => "BM25",
            Self::Dense { .. } => "dense-hash",
        }
    }
}

pub fn build_sparse_index<'a, I>(docs: I) -> Result<RetrievalIndex>
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    SparseIndex::build(docs, Tokenizer::default(), Bm25Params::default()).map(RetrievalIndex::Sparse)
}

pub fn build_dense_index<'a, I>(docs: I, dim: usize, seed: u64) -> Result<RetrievalIndex>
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    DenseIndex::build(docs, dim, seed, Tokenizer::default()).map(RetrievalIndex::Dense)
}

impl RetrievalIndex {
    pub fn build<'a, I>(kind: RetrieverKind, docs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        match kind {
            RetrieverKind::Bm25 => build_sparse_index(docs),
            RetrieverKind::Dense { dim, seed } => build_dense_index(docs, dim, seed),
        }
    }

    pub fn sparse(&self) -> Result<&SparseIndex> {
        match self {
            Self::Sparse(s) => Ok(s),
            Self::Dense(_) => Err(Error::Variant { expected: "sparse" }),
        }
    }

    pub fn n_docs(&self) -> usize {
        match self {
            Self::Sparse(s) => s.n_docs(),
            Self::Dense(d) => d.n_docs(),
        }
    }

    pub fn doc_ids(&self) -> &[String] {
        match self {
            Self::Sparse(s) => s.doc_ids(),
            Self::Dense(d) => d.doc_ids(),
        }
    }

    /// Top-`k` documents for a query; sparse rankings omit zero-score documents.
    pub fn retrieve(&self, query_text: &str, k: usize) -> ScoredRanking {
        let k = k.max(1);
        match self {
            Self::Sparse(s) => s.retrieve_tokens(&s.tokenizer.tokenize(query_text), k),
            Self::Dense(d) => d.retrieve_vector(&d.embed(query_text), k),
        }
    }
}

pub fn bm25_score(index: &RetrievalIndex, query_tokens: &[String], doc_id: &str) -> Result<f64> {
    Ok(index.sparse()?.score(query_tokens, doc_id))
}

pub fn retrieve(index: &RetrievalIndex, query_text: &str, k: usize) -> ScoredRanking {
    index.retrieve(query_text, k)
}
