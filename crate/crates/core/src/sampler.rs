//! Composite batch sampling.
//!
//! A batch holds `q` queries, `d_pos` relevant documents per query and
//! `d_neg` filler documents that no raw batch query can retrieve. It is a
//! closed retrieval world: rewards are computed against its documents only.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusItem, Dataset, QueryItem};
use crate::error::{Error, Result};
use crate::retrieval::SparseIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Query,
    RelevantDoc,
    IrrelevantDoc,
}

impl SourceKind {
    pub const ALL: [SourceKind; 3] = [Self::Query, Self::RelevantDoc, Self::IrrelevantDoc];

    pub fn is_query(self) -> bool {
        self == Self::Query
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Query => "query",
            Self::RelevantDoc => "relevant-doc",
            Self::IrrelevantDoc => "irrelevant-doc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchShape {
    pub q: usize,
    pub d_pos: usize,
    pub d_neg: usize,
}

impl BatchShape {
    pub fn text_count(&self) -> usize {
        self.q + self.q * self.d_pos + self.d_neg
    }

    pub fn doc_count(&self) -> usize {
        self.q * self.d_pos + self.d_neg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeBatch {
    pub queries: Vec<QueryItem>,
    /// query id → its sampled relevant documents.
    pub relevant: BTreeMap<String, Vec<CorpusItem>>,
    pub irrelevant: Vec<CorpusItem>,
    pub seed: u64,
}

impl CompositeBatch {
    pub fn text_count(&self) -> usize {
        self.queries.len() + self.relevant.values().map(Vec::len).sum::<usize>() + self.irrelevant.len()
    }

    /// Relevant documents in query order, then the irrelevant ones.
    pub fn docs(&self) -> Vec<(&CorpusItem, SourceKind)> {
        let mut out = Vec::new();
        for q in &self.queries {
            if let Some(docs) = self.relevant.get(&q.id) {
                out.extend(docs.iter().map(|d| (d, SourceKind::RelevantDoc)));
            }
        }
        out.extend(self.irrelevant.iter().map(|d| (d, SourceKind::IrrelevantDoc)));
        out
    }

    pub fn doc_ids(&self) -> Vec<&str> {
        self.docs().into_iter().map(|(d, _)| d.id.as_str()).collect()
    }
}

/// How filler documents are certified irrelevant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroScorePredicate {
    /// Zero BM25 score against every raw batch query.
    Bm25,
    /// Only "not judged relevant to any batch query" (dense-only runs).
    QrelsOnly,
}

/// Precomputed eligibility tables for repeated batch sampling over one dataset.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    shape: BatchShape,
    predicate: ZeroScorePredicate,
    eligible: Vec<usize>,
    /// per query: doc ordinals with a positive grade
    relevant: Vec<Vec<usize>>,
    /// per query: doc ordinals with a nonzero raw BM25 score
    matching: Vec<BTreeSet<usize>>,
}

impl BatchSampler {
    /// `index` must be a sparse index over the raw corpus; `None` selects
    /// the qrels-only fallback predicate.
    pub fn new(dataset: &Dataset, index: Option<&SparseIndex>, shape: BatchShape) -> Result<Self> {
        if shape.q == 0 || shape.d_pos == 0 {
            return Err(Error::Config("q and d_pos must be at least 1".into()));
        }
        let ordinal: HashMap<&str, usize> = dataset
            .corpus
            .iter()
            .enumerate()
            .map(|(i, d)| (d.id.as_str(), i))
            .collect();
        let relevant: Vec<Vec<usize>> = dataset
            .queries
            .iter()
            .map(|q| {
                dataset
                    .qrels
                    .relevant(&q.id)
                    .into_iter()
                    .filter_map(|d| ordinal.get(d).copied())
                    .collect()
            })
            .collect();
        let matching: Vec<BTreeSet<usize>> = match index {
            Some(idx) => {
                let by_id: HashMap<&str, usize> = idx
                    .doc_ids()
                    .iter()
                    .enumerate()
                    .map(|(i, d)| (d.as_str(), i))
                    .collect();
                dataset
                    .queries
                    .iter()
                    .map(|q| {
                        let hits = idx.score_all(&idx.tokenizer.tokenize(&q.text));
                        hits.into_iter()
                            .filter(|(_, s)| *s > 0.0)
                            .filter_map(|(o, _)| {
                                let id = idx.doc_ids()[o].as_str();
                                by_id.get(id).and(ordinal.get(id).copied())
                            })
                            .collect()
                    })
                    .collect()
            }
            None => {
                log::warn!("no sparse index: irrelevant docs certified by qrels only");
                vec![BTreeSet::new(); dataset.queries.len()]
            }
        };
        let eligible: Vec<usize> = (0..dataset.queries.len())
            .filter(|&i| relevant[i].len() >= shape.d_pos)
            .collect();
        if eligible.len() < shape.q {
            return Err(Error::Sampling(format!(
                "only {} queries have at least d_pos={} relevant documents; need q={}",
                eligible.len(),
                shape.d_pos,
                shape.q
            )));
        }
        Ok(Self {
            shape,
            predicate: if index.is_some() {
                ZeroScorePredicate::Bm25
            } else {
                ZeroScorePredicate::QrelsOnly
            },
            eligible,
            relevant,
            matching,
        })
    }

    pub fn shape(&self) -> BatchShape {
        self.shape
    }

    pub fn predicate(&self) -> ZeroScorePredicate {
        self.predicate
    }

    pub fn eligible_queries<'a>(&self, dataset: &'a Dataset) -> Vec<&'a QueryItem> {
        self.eligible.iter().map(|&i| &dataset.queries[i]).collect()
    }

    /// Draws one batch; uniform without replacement within each category.
    pub fn sample<R: Rng + ?Sized>(&self, dataset: &Dataset, rng: &mut R) -> Result<CompositeBatch> {
        let seed = rng.random::<u64>();
        let BatchShape { q, d_pos, d_neg } = self.shape;
        let picked: Vec<usize> = sample(rng, self.eligible.len(), q)
            .into_iter()
            .map(|i| self.eligible[i])
            .collect();

        let mut used: BTreeSet<usize> = BTreeSet::new();
        let mut relevant = BTreeMap::new();
        for &qi in &picked {
            let pool: Vec<usize> = self.relevant[qi]
                .iter()
                .copied()
                .filter(|d| !used.contains(d))
                .collect();
            if pool.len() < d_pos {
                return Err(Error::Sampling(format!(
                    "query {} has {} unused relevant documents, d_pos={} required",
                    dataset.queries[qi].id,
                    pool.len(),
                    d_pos
                )));
            }
            let docs: Vec<usize> = sample(rng, pool.len(), d_pos)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            used.extend(&docs);
            relevant.insert(
                dataset.queries[qi].id.clone(),
                docs.iter().map(|&d| dataset.corpus[d].clone()).collect(),
            );
        }

        let blocked: BTreeSet<usize> = picked
            .iter()
            .flat_map(|&qi| self.matching[qi].iter().chain(&self.relevant[qi]))
            .copied()
            .chain(used.iter().copied())
            .collect();
        let pool: Vec<usize> = (0..dataset.corpus.len())
            .filter(|d| !blocked.contains(d))
            .collect();
        if pool.len() < d_neg {
            return Err(Error::Sampling(format!(
                "only {} zero-score documents available for d_neg={}; try a smaller d_neg",
                pool.len(),
                d_neg
            )));
        }
        let irrelevant = sample(rng, pool.len(), d_neg)
            .into_iter()
            .map(|i| dataset.corpus[pool[i]].clone())
            .collect();

        Ok(CompositeBatch {
            queries: picked.iter().map(|&i| dataset.queries[i].clone()).collect(),
            relevant,
            irrelevant,
            seed,
        })
    }
}

/// One-shot form of [`BatchSampler::sample`].
pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    index: Option<&SparseIndex>,
    shape: BatchShape,
    rng: &mut R,
) -> Result<CompositeBatch> {
    BatchSampler::new(dataset, index, shape)?.sample(dataset, rng)
}

/// System prompt templates; `{text}` is replaced by the raw text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptSet {
    pub query: String,
    pub document: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        // Placeholder wording; the built-in policy ignores prompts.
        Self {
            query: "Summarize the query, then write expansion terms inside <answer></answer>.\nQuery: {text}".into(),
            document: "Summarize the document, then write keywords inside <answer></answer>.\nDocument: {text}".into(),
        }
    }
}

impl PromptSet {
    pub fn render(&self, kind: SourceKind, text: &str) -> String {
        let template = if kind.is_query() {
            &self.query
        } else {
            &self.document
        };
        template.replace("{text}", text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptedRecord {
    pub source_id: String,
    pub kind: SourceKind,
    pub prompt: String,
    pub text: String,
}

/// One record per batch text: queries first, then documents in [`CompositeBatch::docs`] order.
pub fn attach_prompts(batch: &CompositeBatch, prompts: &PromptSet) -> Vec<PromptedRecord> {
    let mut out: Vec<PromptedRecord> = batch
        .queries
        .iter()
        .map(|q| PromptedRecord {
            source_id: q.id.clone(),
            kind: SourceKind::Query,
            prompt: prompts.render(SourceKind::Query, &q.text),
            text: q.text.clone(),
        })
        .collect();
    out.extend(batch.docs().into_iter().map(|(d, kind)| {
        let text = d.full_text();
        PromptedRecord {
            source_id: d.id.clone(),
            kind,
            prompt: prompts.render(kind, &text),
            text,
        }
    }));
    out
}
