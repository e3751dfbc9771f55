//! Batch-unbatch alternating training of the toy policy, plus evaluation
//! over full corpora with precomputed document augmentations.
//!
//! One step:
//!
//! 1. sample `batch_size` composite batches (batch level);
//! 2. generate `n_rollout` rollouts for every prompted text, each text on its
//!    own RNG stream (sample level);
//! 3. estimate within-batch rewards and compute advantages per source text
//!    (batch level);
//! 4. accumulate `Σ a·∇log p` over micro-batches and apply one gradient-ascent
//!    update per mini-batch (sample level).
//!
//! Batch sizes count composite batches: one composite batch is one micro
//! batch.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advantage::{compute_advantages, AdvantageConfig, RewardGroup};
use crate::corpus::{CorpusItem, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{build_word_distribution, cross_entropy, ndcg_at_k, RelevanceView};
use crate::policy::{apply_augmentation, AugmentationPolicy, AugmentedText, IdentityPolicy, Rollout, ToyPolicy, ToyPolicyConfig};
use crate::retrieval::{Bm25Params, RetrievalIndex, RetrieverKind, SparseIndex, Tokenizer};
use crate::reward::{sampled_reward, RewardTask};
use crate::sampler::{attach_prompts, BatchSampler, BatchShape, PromptSet, PromptedRecord, SourceKind};

/// Which text kinds receive a training signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainSides {
    #[default]
    Both,
    QueryOnly,
    DocOnly,
}

impl TrainSides {
    pub fn trains(self, kind: SourceKind) -> bool {
        match self {
            Self::Both => true,
            Self::QueryOnly => kind.is_query(),
            Self::DocOnly => !kind.is_query(),
        }
    }

    pub fn augments_queries(self) -> bool {
        self != Self::DocOnly
    }

    pub fn augments_docs(self) -> bool {
        self != Self::QueryOnly
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub q: usize,
    pub d_pos: usize,
    pub d_neg: usize,
    pub n_rollout: usize,
    pub n_samp: usize,
    /// NDCG cutoff for rewards and evaluation.
    pub k: usize,
    pub retriever: RetrieverKind,
    pub advantage: AdvantageConfig,
    pub learning_rate: f64,
    /// Composite batches per step.
    pub batch_size: usize,
    /// Composite batches per parameter update.
    pub mini_batch_size: usize,
    /// Composite batches per gradient-accumulation chunk.
    pub micro_batch_size: usize,
    pub policy: ToyPolicyConfig,
    pub sides: TrainSides,
    pub prompts: PromptSet,
    /// Certify fillers by qrels only instead of raw BM25 scores.
    pub qrels_only_fillers: bool,
    pub seed: u64,
    pub eval_every: u64,
    /// Smoothing for the H(Q,D) column of the history.
    pub hqd_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            q: 4,
            d_pos: 2,
            d_neg: 10,
            n_rollout: 4,
            n_samp: 32,
            k: 10,
            retriever: RetrieverKind::Bm25,
            advantage: AdvantageConfig::default(),
            learning_rate: 100.0,
            batch_size: 1,
            mini_batch_size: 1,
            micro_batch_size: 1,
            policy: ToyPolicyConfig::default(),
            sides: TrainSides::Both,
            prompts: PromptSet::default(),
            qrels_only_fillers: false,
            seed: 0,
            eval_every: 25,
            hqd_epsilon: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn shape(&self) -> BatchShape {
        BatchShape {
            q: self.q,
            d_pos: self.d_pos,
            d_neg: self.d_neg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("steps", self.steps as usize),
            ("q", self.q),
            ("d_pos", self.d_pos),
            ("n_rollout", self.n_rollout),
            ("n_samp", self.n_samp),
            ("k", self.k),
            ("batch_size", self.batch_size),
            ("mini_batch_size", self.mini_batch_size),
            ("micro_batch_size", self.micro_batch_size),
            ("eval_every", self.eval_every as usize),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("train.{name} must be at least 1")));
        }
        if !(self.micro_batch_size <= self.mini_batch_size && self.mini_batch_size <= self.batch_size) {
            return Err(Error::Config(
                "batch sizes must satisfy micro_batch_size ≤ mini_batch_size ≤ batch_size".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("train.learning_rate must be finite and non-negative".into()));
        }
        if !(self.hqd_epsilon > 0.0) {
            return Err(Error::Config("train.hqd_epsilon must be positive".into()));
        }
        self.advantage.validate().map_err(Error::Config)
    }

    /// Stable hash of the configuration (hex SHA-256 of its JSON form).
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

pub fn config_hash<T: Serialize>(value: &T) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// One history row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    /// Mean within-batch reward over query rollouts.
    pub mean_reward: f64,
    pub ndcg10: Option<f64>,
    pub hqd: Option<f64>,
    pub amp_var: f64,
    pub same_sign: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub policy: ToyPolicy,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub history: Vec<StepRecord>,
    pub best: Option<BestCheckpoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestCheckpoint {
    pub step: u64,
    pub ndcg10: f64,
    pub policy: ToyPolicy,
}

/// Wall-clock breakdown and the history row of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub record: StepRecord,
    pub rollout_secs: f64,
    pub reward_secs: f64,
    pub update_secs: f64,
    /// Reward groups the advantages were computed from.
    pub groups: Vec<RewardGroup>,
}

/// Immutable training inputs shared by every step.
pub struct TrainContext<'a> {
    pub config: &'a TrainConfig,
    pub dataset: &'a Dataset,
    pub sampler: BatchSampler,
}

impl<'a> TrainContext<'a> {
    pub fn new(config: &'a TrainConfig, dataset: &'a Dataset) -> Result<Self> {
        config.validate()?;
        let raw = raw_sparse_index(dataset)?;
        let index = (!config.qrels_only_fillers).then_some(&raw);
        let sampler = BatchSampler::new(dataset, index, config.shape())?;
        Ok(Self {
            config,
            dataset,
            sampler,
        })
    }
}

pub fn raw_sparse_index(dataset: &Dataset) -> Result<SparseIndex> {
    let texts: Vec<String> = dataset.corpus.iter().map(CorpusItem::full_text).collect();
    SparseIndex::build(
        dataset.corpus.iter().map(|d| d.id.as_str()).zip(texts.iter().map(String::as_str)),
        Tokenizer::default(),
        Bm25Params::default(),
    )
}

impl TrainState {
    /// Fresh state with a policy over `dataset` plus `extra_vocab` (bridge tokens).
    pub fn new(config: &TrainConfig, dataset: &Dataset, extra_vocab: &[String]) -> Result<Self> {
        let policy = ToyPolicy::for_dataset(dataset, extra_vocab, &config.policy, config.seed ^ 0x9e37_79b9_7f4a_7c15)?;
        Ok(Self::with_policy(config, policy))
    }

    pub fn with_policy(config: &TrainConfig, policy: ToyPolicy) -> Self {
        Self {
            policy,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            history: Vec::new(),
            best: None,
        }
    }
}

struct BatchRollouts {
    records: Vec<PromptedRecord>,
    rollouts: Vec<Vec<Rollout>>,
}

/// Runs one step on a copy of `state`; the state is replaced only on success.
pub fn train_step(state: &mut TrainState, ctx: &TrainContext) -> Result<StepReport> {
    let cfg = ctx.config;
    let mut next = state.clone();
    next.step += 1;
    let step = next.step;

    // batch-level sampling
    let batches = (0..cfg.batch_size)
        .map(|_| ctx.sampler.sample(ctx.dataset, &mut next.rng))
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<Vec<PromptedRecord>> = batches.iter().map(|b| attach_prompts(b, &cfg.prompts)).collect();
    let rollout_seeds: Vec<Vec<u64>> = records
        .iter()
        .map(|rs| rs.iter().map(|_| next.rng.random()).collect())
        .collect();
    let reward_seeds: Vec<u64> = batches.iter().map(|_| next.rng.random()).collect();

    // sample-level inference
    let t0 = Instant::now();
    let policy = &next.policy;
    let mut generated: Vec<BatchRollouts> = records
        .into_iter()
        .zip(&rollout_seeds)
        .map(|(recs, seeds)| {
            let rollouts = recs
                .par_iter()
                .zip(seeds)
                .map(|(rec, seed)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                    policy.rollouts(rec, cfg.n_rollout, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(BatchRollouts { records: recs, rollouts })
        })
        .collect::<Result<Vec<_>>>()?;
    let rollout_secs = t0.elapsed().as_secs_f64();

    // batch-level reward and advantage
    let t1 = Instant::now();
    let mut groups: Vec<RewardGroup> = Vec::new();
    let mut query_rewards: Vec<f64> = Vec::new();
    for ((batch, gen), seed) in batches.iter().zip(&generated).zip(&reward_seeds) {
        let by_source: HashMap<String, Vec<Rollout>> = gen
            .records
            .iter()
            .zip(&gen.rollouts)
            .map(|(rec, rs)| (rec.source_id.clone(), rs.clone()))
            .collect();
        let task = RewardTask::new(batch.clone(), by_source, &ctx.dataset.qrels, cfg.retriever, cfg.n_samp, cfg.k)?;
        let est = sampled_reward(&task, &mut ChaCha8Rng::seed_from_u64(*seed));
        let by_id = est.by_source(&task);
        for rec in &gen.records {
            let rewards = by_id[&rec.source_id].clone();
            if rec.kind.is_query() {
                query_rewards.extend(&rewards);
            }
            groups.push(RewardGroup {
                source_id: rec.source_id.clone(),
                kind: rec.kind,
                rewards,
            });
        }
    }
    let reward_secs = t1.elapsed().as_secs_f64();
    let report = compute_advantages(&groups, &cfg.advantage);
    let mut g = 0;
    for gen in &mut generated {
        for (rec, rs) in gen.records.iter().zip(gen.rollouts.iter_mut()) {
            let train = cfg.sides.trains(rec.kind);
            for (r, (&a, &reward)) in rs.iter_mut().zip(report.advantages[g].iter().zip(&groups[g].rewards)) {
                r.reward = Some(reward);
                r.advantage = if train { a } else { 0.0 };
            }
            g += 1;
        }
    }

    // sample-level update
    let t2 = Instant::now();
    for mini in generated.chunks(cfg.mini_batch_size) {
        let n_rollouts: usize = mini.iter().flat_map(|b| &b.rollouts).map(Vec::len).sum();
        let mut grad = vec![0.0; next.policy.weights().len()];
        for micro in mini.chunks(cfg.micro_batch_size) {
            accumulate_micro(&next.policy, micro, n_rollouts as f64, &mut grad);
        }
        if let Some(pos) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                step,
                diagnostics: format!(
                    "gradient entry {pos} = {}; lr = {}; max |advantage| = {}",
                    grad[pos],
                    cfg.learning_rate,
                    generated
                        .iter()
                        .flat_map(|b| b.rollouts.iter().flatten())
                        .map(|r| r.advantage.abs())
                        .fold(0.0, f64::max)
                ),
            });
        }
        let lr = cfg.learning_rate;
        for (i, (w, g)) in next.policy.weights_mut().iter_mut().zip(&grad).enumerate() {
            if *g != 0.0 {
                *w += lr * g;
                if !w.is_finite() {
                    return Err(Error::NonFinite {
                        step,
                        diagnostics: format!("weight {i} became {w} after an update with gradient {g} and lr {lr}"),
                    });
                }
            }
        }
    }
    let update_secs = t2.elapsed().as_secs_f64();

    let mean_reward = if query_rewards.is_empty() {
        0.0
    } else {
        query_rewards.iter().fold(0.0, |a, x| a + x) / query_rewards.len() as f64
    };
    let mut record = StepRecord {
        step,
        mean_reward,
        ndcg10: None,
        hqd: None,
        amp_var: report.amplified_variance,
        same_sign: report.same_sign,
    };
    if step % cfg.eval_every == 0 || step == cfg.steps {
        let (ndcg, hqd) = run_eval(&next.policy, ctx)?;
        record.ndcg10 = Some(ndcg);
        record.hqd = Some(hqd);
        if next.best.as_ref().is_none_or(|b| ndcg > b.ndcg10) {
            next.best = Some(BestCheckpoint {
                step,
                ndcg10: ndcg,
                policy: next.policy.clone(),
            });
        }
    }
    next.history.push(record.clone());
    *state = next;
    Ok(StepReport {
        record,
        rollout_secs,
        reward_secs,
        update_secs,
        groups,
    })
}

fn accumulate_micro(policy: &ToyPolicy, micro: &[BatchRollouts], n_rollouts: f64, grad: &mut [f64]) {
    for batch in micro {
        for (rec, rollouts) in batch.records.iter().zip(&batch.rollouts) {
            if rollouts.iter().all(|r| r.advantage == 0.0) {
                continue;
            }
            let feats = policy.features(&rec.text, rec.kind);
            for r in rollouts {
                policy.accumulate_gradient(&feats, &r.tokens, r.advantage / n_rollouts, grad);
            }
        }
    }
}

fn run_eval(policy: &ToyPolicy, ctx: &TrainContext) -> Result<(f64, f64)> {
    let sides = ctx.config.sides;
    let identity = IdentityPolicy;
    let qp: &dyn AugmentationPolicy = if sides.augments_queries() { policy } else { &identity };
    let dp: &dyn AugmentationPolicy = if sides.augments_docs() { policy } else { &identity };
    let eval = evaluate(qp, dp, ctx.dataset, ctx.config.retriever, ctx.config.k)?;
    let hqd = hqd_of(qp, dp, ctx.dataset, ctx.config.hqd_epsilon)?;
    Ok((eval.mean_ndcg, hqd))
}

/// Runs `train_step` until `config.steps`, calling `on_step` after each.
pub fn train(
    state: &mut TrainState,
    ctx: &TrainContext,
    mut on_step: impl FnMut(&StepReport),
) -> Result<()> {
    while state.step < ctx.config.steps {
        let report = train_step(state, ctx)?;
        on_step(&report);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    Argmax,
    Sample,
}

/// One augmentation per document, keyed by document id.
pub fn precompute_doc_augmentations(
    policy: &dyn AugmentationPolicy,
    corpus: &[CorpusItem],
    mode: AugmentMode,
    seed: u64,
) -> Result<BTreeMap<String, AugmentedText>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for d in corpus {
        let text = d.full_text();
        let aug = match mode {
            AugmentMode::Argmax => policy.augment(&text, SourceKind::RelevantDoc)?,
            AugmentMode::Sample => {
                let rec = PromptedRecord {
                    source_id: d.id.clone(),
                    kind: SourceKind::RelevantDoc,
                    prompt: String::new(),
                    text: text.clone(),
                };
                policy
                    .rollouts(&rec, 1, &mut rng)?
                    .pop()
                    .map(|r| r.augmentation)
                    .unwrap_or_default()
            }
        };
        out.insert(d.id.clone(), apply_augmentation(&text, &aug));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEval {
    pub query_id: String,
    pub ndcg: f64,
    pub base_ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub retriever: RetrieverKind,
    pub k: usize,
    pub mean_ndcg: f64,
    pub base_mean_ndcg: f64,
    pub per_query: Vec<QueryEval>,
}

fn mean_ndcg(index: &RetrievalIndex, queries: &[(String, String)], dataset: &Dataset, k: usize) -> Vec<f64> {
    queries
        .par_iter()
        .map(|(id, text)| {
            let rel = RelevanceView::from_judgments(&dataset.qrels, id);
            ndcg_at_k(&index.retrieve(text, k), &rel, k)
        })
        .collect()
}

/// Augmented texts of all queries and documents (argmax mode).
pub fn augmented_texts(
    query_policy: &dyn AugmentationPolicy,
    doc_policy: &dyn AugmentationPolicy,
    dataset: &Dataset,
) -> Result<(Vec<(String, String)>, Vec<(String, String)>)> {
    let docs = precompute_doc_augmentations(doc_policy, &dataset.corpus, AugmentMode::Argmax, 0)?;
    let docs = dataset
        .corpus
        .iter()
        .map(|d| (d.id.clone(), docs[&d.id].combined.clone()))
        .collect();
    let queries = dataset
        .queries
        .iter()
        .map(|q| {
            let aug = query_policy.augment(&q.text, SourceKind::Query)?;
            Ok((q.id.clone(), apply_augmentation(&q.text, &aug).combined))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((queries, docs))
}

/// NDCG@k over the full corpus with augmented queries and documents, next to
/// the base retriever on raw texts. Queries without judgments are skipped.
pub fn evaluate(
    query_policy: &dyn AugmentationPolicy,
    doc_policy: &dyn AugmentationPolicy,
    dataset: &Dataset,
    retriever: RetrieverKind,
    k: usize,
) -> Result<EvalReport> {
    let judged: BTreeSet<&str> = dataset.qrels.query_ids().collect();
    let (aug_queries, aug_docs) = augmented_texts(query_policy, doc_policy, dataset)?;
    let aug_queries: Vec<(String, String)> = aug_queries.into_iter().filter(|(id, _)| judged.contains(id.as_str())).collect();
    let raw_queries: Vec<(String, String)> = dataset
        .queries
        .iter()
        .filter(|q| judged.contains(q.id.as_str()))
        .map(|q| (q.id.clone(), q.text.clone()))
        .collect();
    let raw_docs: Vec<String> = dataset.corpus.iter().map(CorpusItem::full_text).collect();
    let base_index = RetrievalIndex::build(
        retriever,
        dataset.corpus.iter().map(|d| d.id.as_str()).zip(raw_docs.iter().map(String::as_str)),
    )?;
    let aug_index = RetrievalIndex::build(retriever, aug_docs.iter().map(|(a, b)| (a.as_str(), b.as_str())))?;
    let base = mean_ndcg(&base_index, &raw_queries, dataset, k);
    let aug = mean_ndcg(&aug_index, &aug_queries, dataset, k);
    let per_query: Vec<QueryEval> = raw_queries
        .iter()
        .zip(aug.iter().zip(&base))
        .map(|((id, _), (n, b))| QueryEval {
            query_id: id.clone(),
            ndcg: *n,
            base_ndcg: *b,
        })
        .collect();
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().fold(0.0, |a, x| a + x) / v.len() as f64 };
    Ok(EvalReport {
        retriever,
        k,
        mean_ndcg: mean(&aug),
        base_mean_ndcg: mean(&base),
        per_query,
    })
}

/// H(Q,D) of augmented queries against augmented documents over their union vocabulary.
pub fn hqd_of(
    query_policy: &dyn AugmentationPolicy,
    doc_policy: &dyn AugmentationPolicy,
    dataset: &Dataset,
    epsilon: f64,
) -> Result<f64> {
    let (queries, docs) = augmented_texts(query_policy, doc_policy, dataset)?;
    let tok = Tokenizer::default();
    let q_texts: Vec<&str> = queries.iter().map(|(_, t)| t.as_str()).collect();
    let d_texts: Vec<&str> = docs.iter().map(|(_, t)| t.as_str()).collect();
    hqd_texts(&q_texts, &d_texts, epsilon, &tok)
}

pub fn hqd_texts(queries: &[&str], docs: &[&str], epsilon: f64, tok: &Tokenizer) -> Result<f64> {
    let vocab: BTreeSet<String> = queries.iter().chain(docs).flat_map(|t| tok.tokenize(t)).collect();
    let p_q = build_word_distribution(queries, &vocab, epsilon, tok)?;
    let p_d = build_word_distribution(docs, &vocab, epsilon, tok)?;
    Ok(cross_entropy(&p_q, &p_d))
}

pub const CHECKPOINT_FORMAT: &str = "coaug-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub config: TrainConfig,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(config: &TrainConfig, state: &TrainState) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: config.hash(),
            config: config.clone(),
            state: state.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::Ingestion {
            file: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let ck: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "{} is not a {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION} file (found {} v{})",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        Ok(ck)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `step,mean_reward,ndcg10,hqd,amp_var,same_sign`; eval columns are empty between evaluations.
pub fn history_csv(history: &[StepRecord]) -> String {
    let mut out = String::from("step,mean_reward,ndcg10,hqd,amp_var,same_sign\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step,
            r.mean_reward,
            opt(r.ndcg10),
            opt(r.hqd),
            r.amp_var,
            r.same_sign
        ));
    }
    out
}

pub fn write_history(history: &[StepRecord], csv_path: &Path, json_path: &Path) -> Result<()> {
    fs::File::create(csv_path)?.write_all(history_csv(history).as_bytes())?;
    fs::File::create(json_path)?.write_all(serde_json::to_string_pretty(history)?.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticSpec};

    fn small() -> (crate::corpus::SyntheticCorpus, TrainConfig) {
        let syn = generate_synthetic(&SyntheticSpec {
            n_topics: 4,
            n_queries: 8,
            n_docs: 24,
            query_vocab_size: 16,
            doc_vocab_size: 32,
            bridge_vocab_size: 4,
            doc_len: 6,
            query_len: 2,
            seed: 3,
        })
        .unwrap();
        let cfg = TrainConfig {
            steps: 6,
            q: 1,
            d_pos: 2,
            d_neg: 4,
            n_rollout: 3,
            n_samp: 6,
            eval_every: 3,
            policy: ToyPolicyConfig {
                tokens_per_rollout: 3,
                ..Default::default()
            },
            learning_rate: 5.0,
            seed: 11,
            ..Default::default()
        };
        (syn, cfg)
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.mini_batch_size = 2;
        assert!(c.validate().is_err());
        c = TrainConfig {
            n_rollout: 0,
            ..Default::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("n_rollout"));
    }

    #[test]
    fn frozen_side_rows_stay_fixed() {
        let (syn, base) = small();
        let cfg = TrainConfig {
            sides: TrainSides::QueryOnly,
            ..base
        };
        let ctx = TrainContext::new(&cfg, &syn.dataset).unwrap();
        let mut state = TrainState::new(&cfg, &syn.dataset, &syn.bridge_tokens()).unwrap();
        let before = state.policy.clone();
        train(&mut state, &ctx, |_| {}).unwrap();
        assert_ne!(state.policy.weights(), before.weights());
        // document-only tokens feed rows that only document rollouts touch
        let params = state.policy.params();
        let a = state.policy.aug_dim();
        for (i, tok) in params.input_vocab.iter().enumerate() {
            if tok.starts_with('d') {
                assert_eq!(&state.policy.weights()[i * a..(i + 1) * a], &before.weights()[i * a..(i + 1) * a], "{tok}");
            }
        }
    }

    #[test]
    fn zero_learning_rate_keeps_weights_bitwise() {
        let (syn, base) = small();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..base
        };
        let ctx = TrainContext::new(&cfg, &syn.dataset).unwrap();
        let mut state = TrainState::new(&cfg, &syn.dataset, &[]).unwrap();
        let before = state.policy.weights().to_vec();
        train_step(&mut state, &ctx).unwrap();
        assert_eq!(state.step, 1);
        assert!(state.policy.weights().iter().zip(&before).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn same_seed_same_history() {
        let (syn, cfg) = small();
        let run = || {
            let ctx = TrainContext::new(&cfg, &syn.dataset).unwrap();
            let mut st = TrainState::new(&cfg, &syn.dataset, &syn.bridge_tokens()).unwrap();
            train(&mut st, &ctx, |_| {}).unwrap();
            st
        };
        let a = run();
        let b = run();
        assert_eq!(history_csv(&a.history), history_csv(&b.history));
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.history.len(), 6);
        assert!(a.history[2].ndcg10.is_some() && a.history[1].ndcg10.is_none());
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (syn, cfg) = small();
        let ctx = TrainContext::new(&cfg, &syn.dataset).unwrap();
        let mut full = TrainState::new(&cfg, &syn.dataset, &syn.bridge_tokens()).unwrap();
        train(&mut full, &ctx, |_| {}).unwrap();

        let mut part = TrainState::new(&cfg, &syn.dataset, &syn.bridge_tokens()).unwrap();
        for _ in 0..4 {
            train_step(&mut part, &ctx).unwrap();
        }
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("ck.json");
        Checkpoint::new(&cfg, &part).save(&path).unwrap();
        let mut resumed = Checkpoint::load(&path).unwrap().state;
        train(&mut resumed, &ctx, |_| {}).unwrap();
        assert_eq!(resumed, full);
    }

    #[test]
    fn failed_step_leaves_state_unchanged() {
        let (syn, cfg) = small();
        let ctx = TrainContext::new(&cfg, &syn.dataset).unwrap();
        let mut state = TrainState::new(&cfg, &syn.dataset, &[]).unwrap();
        train_step(&mut state, &ctx).unwrap();
        let bad = TrainConfig {
            learning_rate: f64::MAX,
            ..cfg.clone()
        };
        let bad_ctx = TrainContext::new(&bad, &syn.dataset).unwrap();
        // poison the weights so the gradient overflows
        let mut poisoned = state.clone();
        poisoned.policy.weights_mut().iter_mut().for_each(|w| *w = f64::MAX);
        let snapshot = poisoned.clone();
        let err = train_step(&mut poisoned, &bad_ctx);
        assert!(matches!(err, Err(Error::NonFinite { .. })), "{err:?}");
        assert_eq!(poisoned, snapshot);
    }

    #[test]
    fn identity_eval_equals_base() {
        let (syn, _) = small();
        let r = evaluate(&IdentityPolicy, &IdentityPolicy, &syn.dataset, RetrieverKind::Bm25, 10).unwrap();
        assert_eq!(r.mean_ndcg, r.base_mean_ndcg);
        assert_eq!(r.base_mean_ndcg, 0.0);
        let r = evaluate(
            &IdentityPolicy,
            &IdentityPolicy,
            &syn.dataset,
            RetrieverKind::Dense { dim: 32, seed: 1 },
            10,
        )
        .unwrap();
        assert_eq!(r.mean_ndcg, r.base_mean_ndcg);
    }

    #[test]
    fn precompute_covers_corpus() {
        let (syn, cfg) = small();
        let p = ToyPolicy::for_dataset(&syn.dataset, &[], &cfg.policy, 1).unwrap();
        let a = precompute_doc_augmentations(&p, &syn.dataset.corpus, AugmentMode::Argmax, 0).unwrap();
        let b = precompute_doc_augmentations(&p, &syn.dataset.corpus, AugmentMode::Argmax, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), syn.dataset.corpus.len());
        let s = precompute_doc_augmentations(&p, &syn.dataset.corpus, AugmentMode::Sample, 0).unwrap();
        assert_eq!(s.len(), syn.dataset.corpus.len());
        let id = precompute_doc_augmentations(&IdentityPolicy, &syn.dataset.corpus, AugmentMode::Argmax, 0).unwrap();
        assert!(id.values().all(|t| t.combined == t.original));
    }

    #[test]
    fn history_csv_layout() {
        let h = vec![
            StepRecord {
                step: 1,
                mean_reward: 0.5,
                ndcg10: None,
                hqd: None,
                amp_var: 0.0,
                same_sign: 0.0,
            },
            StepRecord {
                step: 2,
                mean_reward: 0.25,
                ndcg10: Some(0.75),
                hqd: Some(3.5),
                amp_var: 0.125,
                same_sign: 0.0,
            },
        ];
        assert_eq!(
            history_csv(&h),
            "step,mean_reward,ndcg10,hqd,amp_var,same_sign\n1,0.5,,,0,0\n2,0.25,0.75,3.5,0.125,0\n"
        );
    }
}
