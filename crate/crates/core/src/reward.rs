//! Within-batch rewards.
//!
//! One *iteration* fixes one rollout per batch document, indexes the
//! resulting augmented documents, and scores every query rollout by NDCG@k
//! over that index. Query rollouts are credited with their NDCG; each
//! selected document rollout is credited with the mean NDCG of all query
//! rollouts in the iteration.
//!
//! [`exact_reward`] averages over every document-rollout combination
//! (`n_rollout^docs` of them). [`sampled_reward`] runs `n_samp` iterations in
//! blocks of `n_rollout`, each block drawing a fresh permutation of rollout
//! indices per document, so every document rollout is selected once per block.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::QrelSet;
use crate::error::{Error, Result};
use crate::metrics::{dcg, ndcg_at_k, RelevanceView};
use crate::policy::{apply_augmentation, Rollout};
use crate::retrieval::{
    dot, token_vector, Bm25Params, DenseIndex, RetrievalIndex, RetrieverKind, SparseIndex,
    Tokenizer,
};
use crate::sampler::CompositeBatch;

pub const DEFAULT_COMBINATION_CAP: u128 = 100_000;

/// Everything needed to score one batch of rollouts.
#[derive(Debug, Clone)]
pub struct RewardTask {
    pub batch: CompositeBatch,
    /// Aligned with `batch.queries`.
    pub query_rollouts: Vec<Vec<Rollout>>,
    /// Aligned with `batch.docs()`.
    pub doc_rollouts: Vec<Vec<Rollout>>,
    pub retriever: RetrieverKind,
    pub n_samp: usize,
    pub k: usize,
    pub tokenizer: Tokenizer,
    pub bm25: Bm25Params,
    doc_ids: Vec<String>,
    /// `grades[query][doc]`
    grades: Vec<Vec<u32>>,
    n_rollout: usize,
}

impl RewardTask {
    /// `rollouts` maps source id → its rollouts; every batch text needs
    /// exactly `n_rollout` of them.
    pub fn new(
        batch: CompositeBatch,
        mut rollouts: HashMap<String, Vec<Rollout>>,
        qrels: &QrelSet,
        retriever: RetrieverKind,
        n_samp: usize,
        k: usize,
    ) -> Result<Self> {
        if n_samp == 0 {
            return Err(Error::Config("n_samp must be at least 1".into()));
        }
        let doc_ids: Vec<String> = batch.doc_ids().into_iter().map(String::from).collect();
        let mut take = |id: &str| {
            rollouts
                .remove(id)
                .ok_or_else(|| Error::Validation(format!("no rollouts for batch text {id:?}")))
        };
        let query_rollouts = batch
            .queries
            .iter()
            .map(|q| take(&q.id))
            .collect::<Result<Vec<_>>>()?;
        let doc_rollouts = doc_ids.iter().map(|d| take(d)).collect::<Result<Vec<_>>>()?;
        let n_rollout = query_rollouts
            .first()
            .or(doc_rollouts.first())
            .map_or(0, Vec::len);
        if n_rollout == 0 {
            return Err(Error::Validation("empty rollout groups".into()));
        }
        if query_rollouts
            .iter()
            .chain(&doc_rollouts)
            .any(|r| r.len() != n_rollout)
        {
            return Err(Error::Validation(format!(
                "every batch text needs exactly n_rollout={n_rollout} rollouts"
            )));
        }
        if n_samp < n_rollout {
            log::warn!("n_samp={n_samp} < n_rollout={n_rollout}: some document rollouts go unselected");
        }
        let grades = batch
            .queries
            .iter()
            .map(|q| doc_ids.iter().map(|d| qrels.grade(&q.id, d)).collect())
            .collect();
        Ok(Self {
            batch,
            query_rollouts,
            doc_rollouts,
            retriever,
            n_samp,
            k: k.max(1),
            tokenizer: Tokenizer::default(),
            bm25: Bm25Params::default(),
            doc_ids,
            grades,
            n_rollout,
        })
    }

    pub fn n_rollout(&self) -> usize {
        self.n_rollout
    }

    pub fn n_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    /// Matching pairs a full enumeration evaluates: `q · n_rollout · n_rollout^docs`.
    pub fn matching_pairs(&self) -> u128 {
        self.batch.queries.len() as u128 * self.n_rollout as u128 * self.combinations()
    }

    /// Number of document-rollout combinations, saturating.
    pub fn combinations(&self) -> u128 {
        (0..self.n_docs()).fold(1u128, |acc, _| acc.saturating_mul(self.n_rollout as u128))
    }

    fn query_text(&self, qi: usize, r: usize) -> String {
        apply_augmentation(&self.batch.queries[qi].text, &self.query_rollouts[qi][r].augmentation).combined
    }

    fn doc_text(&self, di: usize, r: usize) -> String {
        let docs = self.batch.docs();
        apply_augmentation(&docs[di].0.full_text(), &self.doc_rollouts[di][r].augmentation).combined
    }

    fn relevance(&self, qi: usize) -> RelevanceView {
        let mut rel = RelevanceView::new();
        for (d, g) in self.doc_ids.iter().zip(&self.grades[qi]) {
            rel.insert(d.clone(), *g);
        }
        rel
    }
}

/// Result of one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReward {
    /// `query_ndcg[query][rollout]`
    pub query_ndcg: Vec<Vec<f64>>,
    /// Credit for every selected document rollout: mean of `query_ndcg`.
    pub doc_reward: f64,
}

impl IterationReward {
    fn from_ndcg(query_ndcg: Vec<Vec<f64>>) -> Self {
        let n: usize = query_ndcg.iter().map(Vec::len).sum();
        let sum: f64 = query_ndcg.iter().flatten().sum();
        let doc_reward = if n == 0 { 0.0 } else { sum / n as f64 };
        Self {
            query_ndcg,
            doc_reward,
        }
    }
}

/// Reference iteration: builds a fresh index over the selected documents'
/// combined texts and retrieves with every query rollout.
pub fn iteration_reward(task: &RewardTask, doc_selection: &[usize]) -> Result<IterationReward> {
    if doc_selection.len() != task.n_docs() {
        return Err(Error::Validation(format!(
            "selection covers {} of {} batch documents",
            doc_selection.len(),
            task.n_docs()
        )));
    }
    let texts: Vec<String> = doc_selection
        .iter()
        .enumerate()
        .map(|(di, &r)| task.doc_text(di, r))
        .collect();
    let pairs = task.doc_ids.iter().map(String::as_str).zip(texts.iter().map(String::as_str));
    let index = match task.retriever {
        RetrieverKind::Bm25 => RetrievalIndex::Sparse(SparseIndex::build(pairs, task.tokenizer.clone(), task.bm25)?),
        RetrieverKind::Dense { dim, seed } => {
            RetrievalIndex::Dense(DenseIndex::build(pairs, dim, seed, task.tokenizer.clone())?)
        }
    };
    let query_ndcg = (0..task.batch.queries.len())
        .map(|qi| {
            let rel = task.relevance(qi);
            (0..task.n_rollout)
                .map(|r| ndcg_at_k(&index.retrieve(&task.query_text(qi, r), task.k), &rel, task.k))
                .collect()
        })
        .collect();
    Ok(IterationReward::from_ndcg(query_ndcg))
}

enum DocRep {
    /// Term frequencies over the task's query-term dictionary, plus length.
    Sparse { tf: Vec<u32>, len: u32 },
    Dense(Vec<f64>),
}

enum QueryRep {
    /// Distinct term ids; id order equals lexicographic term order.
    Sparse(Vec<u32>),
    Dense(Vec<f64>),
}

/// Pre-tokenized form of a [`RewardTask`] for repeated iterations.
///
/// Produces bit-identical results to [`iteration_reward`].
pub struct PreparedTask<'a> {
    task: &'a RewardTask,
    n_terms: usize,
    docs: Vec<Vec<DocRep>>,
    queries: Vec<Vec<QueryRep>>,
    /// Position of each doc in doc-id order (ranking tie-break).
    id_rank: Vec<usize>,
    ideal_dcg: Vec<f64>,
}

impl<'a> PreparedTask<'a> {
    pub fn new(task: &'a RewardTask) -> Self {
        let tok = &task.tokenizer;
        let query_tokens: Vec<Vec<Vec<String>>> = (0..task.batch.queries.len())
            .map(|qi| {
                (0..task.n_rollout)
                    .map(|r| tok.tokenize(&task.query_text(qi, r)))
                    .collect()
            })
            .collect();
        let doc_tokens: Vec<Vec<Vec<String>>> = (0..task.n_docs())
            .map(|di| (0..task.n_rollout).map(|r| tok.tokenize(&task.doc_text(di, r))).collect())
            .collect();

        let (docs, queries, n_terms) = match task.retriever {
            RetrieverKind::Bm25 => {
                let terms: BTreeSet<&str> = query_tokens
                    .iter()
                    .flatten()
                    .flatten()
                    .map(String::as_str)
                    .collect();
                let ids: HashMap<&str, u32> = terms.iter().enumerate().map(|(i, t)| (*t, i as u32)).collect();
                let queries = query_tokens
                    .iter()
                    .map(|rs| {
                        rs.iter()
                            .map(|toks| {
                                let mut v: Vec<u32> = toks.iter().map(|t| ids[t.as_str()]).collect();
                                v.sort_unstable();
                                v.dedup();
                                QueryRep::Sparse(v)
                            })
                            .collect()
                    })
                    .collect();
                let docs = doc_tokens
                    .iter()
                    .map(|rs| {
                        rs.iter()
                            .map(|toks| {
                                let mut tf = vec![0u32; terms.len()];
                                for t in toks {
                                    if let Some(&i) = ids.get(t.as_str()) {
                                        tf[i as usize] += 1;
                                    }
                                }
                                DocRep::Sparse {
                                    tf,
                                    len: toks.len() as u32,
                                }
                            })
                            .collect()
                    })
                    .collect();
                (docs, queries, terms.len())
            }
            RetrieverKind::Dense { dim, seed } => {
                let mut cache: HashMap<String, Vec<f64>> = HashMap::new();
                let mut embed = |toks: &[String]| {
                    let mut acc = vec![0.0; dim];
                    for t in toks {
                        let tv = cache
                            .entry(t.clone())
                            .or_insert_with_key(|t| token_vector(t, dim, seed));
                        acc.iter_mut().zip(tv.iter()).for_each(|(a, x)| *a += x);
                    }
                    let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm == 0.0 || !norm.is_finite() {
                        acc.iter_mut().for_each(|x| *x = 0.0);
                    } else {
                        acc.iter_mut().for_each(|x| *x /= norm);
                    }
                    acc
                };
                let queries = query_tokens
                    .iter()
                    .map(|rs| rs.iter().map(|t| QueryRep::Dense(embed(t))).collect())
                    .collect();
                let docs = doc_tokens
                    .iter()
                    .map(|rs| rs.iter().map(|t| DocRep::Dense(embed(t))).collect())
                    .collect();
                (docs, queries, 0)
            }
        };

        let mut order: Vec<usize> = (0..task.n_docs()).collect();
        order.sort_by(|&a, &b| task.doc_ids[a].cmp(&task.doc_ids[b]));
        let mut id_rank = vec![0; order.len()];
        for (rank, &d) in order.iter().enumerate() {
            id_rank[d] = rank;
        }
        let ideal_dcg = task
            .grades
            .iter()
            .map(|g| {
                let mut g = g.clone();
                g.sort_unstable_by(|a, b| b.cmp(a));
                dcg(g, task.k)
            })
            .collect();
        Self {
            task,
            n_terms,
            docs,
            queries,
            id_rank,
            ideal_dcg,
        }
    }

    pub fn iteration(&self, selection: &[usize]) -> IterationReward {
        let task = self.task;
        let n = selection.len();
        let bm25 = task.bm25;
        let mut df = vec![0usize; self.n_terms];
        let mut total_len = 0u64;
        for (di, &r) in selection.iter().enumerate() {
            if let DocRep::Sparse { tf, len } = &self.docs[di][r] {
                total_len += u64::from(*len);
                for (d, &c) in df.iter_mut().zip(tf) {
                    if c > 0 {
                        *d += 1;
                    }
                }
            }
        }
        let avg = if n == 0 { 0.0 } else { total_len as f64 / n as f64 };
        let idf: Vec<f64> = df.iter().map(|&d| bm25.idf(n, d)).collect();

        let mut scored: Vec<(f64, usize)> = Vec::with_capacity(n);
        let query_ndcg = self
            .queries
            .iter()
            .enumerate()
            .map(|(qi, rs)| {
                rs.iter()
                    .map(|q| {
                        scored.clear();
                        for (di, &r) in selection.iter().enumerate() {
                            match (q, &self.docs[di][r]) {
                                (QueryRep::Sparse(terms), DocRep::Sparse { tf, len }) => {
                                    let mut s = 0.0;
                                    let mut hit = false;
                                    for &t in terms {
                                        let c = tf[t as usize];
                                        if c > 0 {
                                            s += bm25.term_score(idf[t as usize], c, *len, avg);
                                            hit = true;
                                        }
                                    }
                                    if hit && s > 0.0 {
                                        scored.push((s, di));
                                    }
                                }
                                (QueryRep::Dense(qv), DocRep::Dense(dv)) => scored.push((dot(qv, dv), di)),
                                _ => unreachable!("mixed representations"),
                            }
                        }
                        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(self.id_rank[a.1].cmp(&self.id_rank[b.1])));
                        let idcg = self.ideal_dcg[qi];
                        if idcg == 0.0 {
                            return 0.0;
                        }
                        let actual = dcg(scored.iter().map(|&(_, di)| task.grades[qi][di]), task.k);
                        (actual / idcg).clamp(0.0, 1.0)
                    })
                    .collect()
            })
            .collect();
        IterationReward::from_ndcg(query_ndcg)
    }
}

/// Per-rollout reward estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardEstimate {
    /// `query[query][rollout]`, each averaged over all iterations.
    pub query: Vec<Vec<f64>>,
    /// `docs[doc][rollout]`, averaged over the iterations selecting it.
    pub docs: Vec<Vec<f64>>,
    pub doc_selections: Vec<Vec<u64>>,
    pub iterations: u64,
    /// Mean over query rollouts of the squared standard error of their NDCG mean.
    pub mean_query_sem2: f64,
}

impl RewardEstimate {
    /// Every estimated reward, queries first.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.query.iter().chain(&self.docs).flatten().copied()
    }

    pub fn max_abs_diff(&self, other: &RewardEstimate) -> f64 {
        self.values()
            .zip(other.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Writes rewards into the task's rollouts (queries, then documents).
    pub fn assign(&self, task: &mut RewardTask) {
        for (rs, est) in task.query_rollouts.iter_mut().zip(&self.query) {
            for (r, v) in rs.iter_mut().zip(est) {
                r.reward = Some(*v);
            }
        }
        for (rs, est) in task.doc_rollouts.iter_mut().zip(&self.docs) {
            for (r, v) in rs.iter_mut().zip(est) {
                r.reward = Some(*v);
            }
        }
    }

    /// Reward groups keyed by source id.
    pub fn by_source(&self, task: &RewardTask) -> BTreeMap<String, Vec<f64>> {
        task.batch
            .queries
            .iter()
            .map(|q| q.id.clone())
            .zip(self.query.iter().cloned())
            .chain(task.doc_ids.iter().cloned().zip(self.docs.iter().cloned()))
            .collect()
    }
}

struct Accumulator {
    query_sum: Vec<Vec<f64>>,
    query_sq: Vec<Vec<f64>>,
    doc_sum: Vec<Vec<f64>>,
    doc_count: Vec<Vec<u64>>,
    iterations: u64,
}

impl Accumulator {
    fn new(task: &RewardTask) -> Self {
        let nq = task.batch.queries.len();
        let nr = task.n_rollout;
        Self {
            query_sum: vec![vec![0.0; nr]; nq],
            query_sq: vec![vec![0.0; nr]; nq],
            doc_sum: vec![vec![0.0; nr]; task.n_docs()],
            doc_count: vec![vec![0; nr]; task.n_docs()],
            iterations: 0,
        }
    }

    fn add(&mut self, selection: &[usize], it: &IterationReward) {
        for (sums, (sqs, vals)) in self.query_sum.iter_mut().zip(self.query_sq.iter_mut().zip(&it.query_ndcg)) {
            for (s, (q, v)) in sums.iter_mut().zip(sqs.iter_mut().zip(vals)) {
                *s += v;
                *q += v * v;
            }
        }
        for (di, &r) in selection.iter().enumerate() {
            self.doc_sum[di][r] += it.doc_reward;
            self.doc_count[di][r] += 1;
        }
        self.iterations += 1;
    }

    fn finish(self) -> RewardEstimate {
        let n = self.iterations as f64;
        let query: Vec<Vec<f64>> = self
            .query_sum
            .iter()
            .map(|s| s.iter().map(|v| v / n).collect())
            .collect();
        let mut sem2 = 0.0;
        let mut count = 0usize;
        for (means, sqs) in query.iter().zip(&self.query_sq) {
            for (m, sq) in means.iter().zip(sqs) {
                let var = (sq / n - m * m).max(0.0);
                sem2 += var / n;
                count += 1;
            }
        }
        let docs = self
            .doc_sum
            .iter()
            .zip(&self.doc_count)
            .map(|(s, c)| {
                s.iter()
                    .zip(c)
                    .map(|(v, &k)| if k == 0 { 0.0 } else { v / k as f64 })
                    .collect()
            })
            .collect();
        RewardEstimate {
            query,
            docs,
            doc_selections: self.doc_count,
            iterations: self.iterations,
            mean_query_sem2: if count == 0 { 0.0 } else { sem2 / count as f64 },
        }
    }
}

fn evaluate_schedule(task: &RewardTask, schedule: &[Vec<usize>]) -> RewardEstimate {
    let prepared = PreparedTask::new(task);
    let results: Vec<IterationReward> = schedule.par_iter().map(|sel| prepared.iteration(sel)).collect();
    let mut acc = Accumulator::new(task);
    for (sel, it) in schedule.iter().zip(&results) {
        acc.add(sel, it);
    }
    acc.finish()
}

/// Ground truth: uniform average over every document-rollout combination.
pub fn exact_reward(task: &RewardTask, cap: u128) -> Result<RewardEstimate> {
    let combos = task.combinations();
    if combos > cap {
        return Err(Error::TooManyCombinations {
            combinations: combos,
            cap,
        });
    }
    let n_docs = task.n_docs();
    let nr = task.n_rollout;
    let schedule: Vec<Vec<usize>> = (0..combos as u64)
        .map(|mut c| {
            (0..n_docs)
                .map(|_| {
                    let r = (c % nr as u64) as usize;
                    c /= nr as u64;
                    r
                })
                .collect()
        })
        .collect();
    Ok(evaluate_schedule(task, &schedule))
}

/// Stratified selection schedule: one permutation per document per block of `n_rollout` iterations.
pub fn stratified_schedule<R: Rng + ?Sized>(n_docs: usize, n_rollout: usize, n_samp: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut schedule = Vec::with_capacity(n_samp);
    while schedule.len() < n_samp {
        let perms: Vec<Vec<usize>> = (0..n_docs)
            .map(|_| {
                let mut p: Vec<usize> = (0..n_rollout).collect();
                p.shuffle(rng);
                p
            })
            .collect();
        for i in 0..n_rollout.min(n_samp - schedule.len()) {
            schedule.push(perms.iter().map(|p| p[i]).collect());
        }
    }
    schedule
}

/// Multi-sampling estimate over `task.n_samp` iterations.
pub fn sampled_reward<R: Rng + ?Sized>(task: &RewardTask, rng: &mut R) -> RewardEstimate {
    let schedule = stratified_schedule(task.n_docs(), task.n_rollout, task.n_samp, rng);
    evaluate_schedule(task, &schedule)
}
