//! NDCG@k and word-distribution cross-entropy.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::QrelSet;
use crate::error::{Error, Result};
use crate::retrieval::{ScoredRanking, Tokenizer};

/// Relevance grades over a candidate set (a batch, or the whole corpus).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceView {
    grades: BTreeMap<String, u32>,
}

impl RelevanceView {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, doc_id: impl Into<String>, grade: u32) {
        self.grades.insert(doc_id.into(), grade);
    }

    /// Grades of `candidates` for `query_id`.
    pub fn from_qrels<'a>(
        qrels: &QrelSet,
        query_id: &str,
        candidates: impl IntoIterator<Item = &'a str>,
    ) -> Self {
        Self {
            grades: candidates
                .into_iter()
                .map(|d| (d.to_string(), qrels.grade(query_id, d)))
                .collect(),
        }
    }

    /// All judged documents of a query; the candidate set is the corpus.
    pub fn from_judgments(qrels: &QrelSet, query_id: &str) -> Self {
        Self {
            grades: qrels
                .judged(query_id)
                .map(|(d, g)| (d.to_string(), g))
                .collect(),
        }
    }

    pub fn grade(&self, doc_id: &str) -> u32 {
        self.grades.get(doc_id).copied().unwrap_or(0)
    }

    pub fn grades(&self) -> impl Iterator<Item = u32> + '_ {
        self.grades.values().copied()
    }
}

fn gain(grade: u32) -> f64 {
    2f64.powi(grade as i32) - 1.0
}

fn discount(position: usize) -> f64 {
    // position is 1-based
    ((position + 1) as f64).log2()
}

/// DCG of a graded list truncated to `k`.
pub fn dcg(grades: impl IntoIterator<Item = u32>, k: usize) -> f64 {
    grades
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, g)| gain(g) / discount(i + 1))
        .fold(0.0, |acc, x| acc + x)
}

/// NDCG@k with exponential gain; 0 when the candidate set has no relevant document.
pub fn ndcg_at_k(ranking: &ScoredRanking, rel: &RelevanceView, k: usize) -> f64 {
    let k = k.max(1);
    let mut ideal: Vec<u32> = rel.grades().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(ideal, k);
    if idcg == 0.0 {
        return 0.0;
    }
    let actual = dcg(ranking.doc_ids().map(|d| rel.grade(d)), k);
    (actual / idcg).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordDistribution {
    probs: BTreeMap<String, f64>,
    pub epsilon: f64,
}

impl WordDistribution {
    pub fn prob(&self, token: &str) -> f64 {
        self.probs.get(token).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.probs.iter().map(|(t, p)| (t.as_str(), *p))
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Builds a distribution directly from probabilities (renormalized).
    pub fn from_probs(probs: BTreeMap<String, f64>, epsilon: f64) -> Result<Self> {
        let total: f64 = probs.values().sum();
        if probs.is_empty() || !(total > 0.0) || probs.values().any(|p| *p < 0.0) {
            return Err(Error::Validation("invalid probability table".into()));
        }
        Ok(Self {
            probs: probs.into_iter().map(|(t, p)| (t, p / total)).collect(),
            epsilon,
        })
    }
}

/// Add-epsilon smoothed unigram distribution of `texts` over `vocab`.
///
/// Tokens outside `vocab` are ignored.
pub fn build_word_distribution<S: AsRef<str>>(
    texts: &[S],
    vocab: &BTreeSet<String>,
    epsilon: f64,
    tokenizer: &Tokenizer,
) -> Result<WordDistribution> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Config(format!("smoothing epsilon must be > 0, got {epsilon}")));
    }
    if vocab.is_empty() {
        return Err(Error::Validation("word distribution over an empty vocabulary".into()));
    }
    let mut counts: BTreeMap<&str, u64> = vocab.iter().map(|t| (t.as_str(), 0)).collect();
    for text in texts {
        for tok in tokenizer.tokenize(text.as_ref()) {
            if let Some(c) = counts.get_mut(tok.as_str()) {
                *c += 1;
            }
        }
    }
    let total: f64 = counts.values().map(|c| *c as f64).sum::<f64>() + epsilon * vocab.len() as f64;
    Ok(WordDistribution {
        probs: counts
            .into_iter()
            .map(|(t, c)| (t.to_string(), (c as f64 + epsilon) / total))
            .collect(),
        epsilon,
    })
}

/// H(Q, D) = −Σ_w P_Q(w) ln P_D(w).
pub fn cross_entropy(p_q: &WordDistribution, p_d: &WordDistribution) -> f64 {
    -p_q
        .iter()
        .filter(|(_, p)| *p > 0.0)
        .map(|(t, p)| p * p_d.prob(t).ln())
        .sum::<f64>()
}

pub fn entropy(p: &WordDistribution) -> f64 {
    cross_entropy(p, p)
}
