//! Independent reference implementations shared by the oracle and acceptance tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use coaug::corpus::{CorpusItem, QrelSet, QueryItem};
use coaug::policy::{Rollout, ToyPolicy, ToyPolicyConfig};
use coaug::retrieval::{RetrieverKind, Tokenizer};
use coaug::reward::RewardTask;
use coaug::sampler::{CompositeBatch, SourceKind};

/// Textbook BM25 over whitespace tokens: every document scored, zero scores
/// dropped, ties broken by id.
pub fn oracle_bm25(docs: &[(String, String)], query: &str) -> Vec<(String, f64)> {
    let (k1, b) = (1.2, 0.75);
    let toks: Vec<Vec<&str>> = docs.iter().map(|(_, t)| t.split_whitespace().collect()).collect();
    let n = docs.len() as f64;
    let avg = toks.iter().map(|t| t.len() as f64).sum::<f64>() / n;
    let terms: BTreeSet<&str> = query.split_whitespace().collect();
    let mut out = Vec::new();
    for ((id, _), dt) in docs.iter().zip(&toks) {
        let mut score = 0.0;
        for term in &terms {
            let df = toks.iter().filter(|t| t.contains(term)).count() as f64;
            let tf = dt.iter().filter(|t| *t == term).count() as f64;
            if tf == 0.0 {
                continue;
            }
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            score += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dt.len() as f64 / avg));
        }
        if score > 0.0 {
            out.push((id.clone(), score));
        }
    }
    out.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then_with(|| x.0.cmp(&y.0)));
    out
}

fn perm_max_dcg(grades: &mut Vec<u32>, k: usize, start: usize, best: &mut f64) {
    if start == grades.len() {
        let d = grades
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, &g)| (2f64.powi(g as i32) - 1.0) / ((i + 2) as f64).log2())
            .sum::<f64>();
        *best = best.max(d);
        return;
    }
    for i in start..grades.len() {
        grades.swap(start, i);
        perm_max_dcg(grades, k, start + 1, best);
        grades.swap(start, i);
    }
}

/// NDCG@k where IDCG is the best DCG over every ordering of the candidate set.
pub fn brute_ndcg(ranking: &[String], grades: &BTreeMap<String, u32>, k: usize) -> f64 {
    let mut all: Vec<u32> = grades.values().copied().collect();
    let mut idcg = 0.0;
    perm_max_dcg(&mut all, k, 0, &mut idcg);
    if idcg == 0.0 {
        return 0.0;
    }
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| {
            let g = grades.get(d).copied().unwrap_or(0);
            (2f64.powi(g as i32) - 1.0) / ((i + 2) as f64).log2()
        })
        .sum();
    dcg / idcg
}

fn rollout(id: &str, kind: SourceKind, aug: String) -> Rollout {
    Rollout {
        source_id: id.into(),
        kind,
        tokens: Vec::new(),
        augmentation: aug,
        log_prob: 0.0,
        reward: None,
        advantage: 0.0,
    }
}

/// A random composite batch with fixed augmentations; raw texts share no
/// tokens, so every match comes from the augmentations.
pub fn random_reward_task(
    rng: &mut ChaCha8Rng,
    q: usize,
    d_pos: usize,
    d_neg: usize,
    n_rollout: usize,
    n_samp: usize,
) -> RewardTask {
    let shared: Vec<String> = (0..6).map(|i| format!("x{i}")).collect();
    let aug = |rng: &mut ChaCha8Rng| -> String {
        let n = rng.random_range(0..=3);
        (0..n).map(|_| shared.choose(rng).unwrap().as_str()).collect::<Vec<_>>().join(" ")
    };
    let queries: Vec<QueryItem> = (0..q).map(|i| QueryItem::new(format!("q{i}"), format!("qa{i} qb{i}"))).collect();
    let mut qrels = QrelSet::new();
    let mut relevant = BTreeMap::new();
    let mut rollouts = HashMap::new();
    for qi in &queries {
        let docs: Vec<CorpusItem> = (0..d_pos)
            .map(|j| CorpusItem::new(format!("r{}_{j}", qi.id), "", format!("ra{}{j} rb{}{j}", qi.id, qi.id)))
            .collect();
        for d in &docs {
            qrels.insert(qi.id.clone(), d.id.clone(), rng.random_range(1..=2));
            rollouts.insert(d.id.clone(), (0..n_rollout).map(|_| rollout(&d.id, SourceKind::RelevantDoc, aug(rng))).collect());
        }
        relevant.insert(qi.id.clone(), docs);
        rollouts.insert(qi.id.clone(), (0..n_rollout).map(|_| rollout(&qi.id, SourceKind::Query, aug(rng))).collect());
    }
    let irrelevant: Vec<CorpusItem> = (0..d_neg).map(|j| CorpusItem::new(format!("n{j}"), "", format!("na{j}"))).collect();
    for d in &irrelevant {
        rollouts.insert(d.id.clone(), (0..n_rollout).map(|_| rollout(&d.id, SourceKind::IrrelevantDoc, aug(rng))).collect());
    }
    let batch = CompositeBatch {
        queries,
        relevant,
        irrelevant,
        seed: 0,
    };
    RewardTask::new(batch, rollouts, &qrels, RetrieverKind::Bm25, n_samp, 10).unwrap()
}

/// Tiny policy with random weights, vocabularies and temperature.
pub fn random_policy(rng: &mut ChaCha8Rng) -> (ToyPolicy, String, SourceKind, Vec<u32>) {
    let n_in = rng.random_range(2..=5);
    let n_aug = rng.random_range(3..=7);
    let m = rng.random_range(1..=n_aug.min(4));
    let cfg = ToyPolicyConfig {
        temperature: rng.random_range(0.5..2.0),
        tokens_per_rollout: m,
        without_replacement: rng.random_bool(0.7),
        init_std: 1.0,
        max_vocab: 0,
    };
    let input: Vec<String> = (0..n_in).map(|i| format!("w{i}")).collect();
    let aug: Vec<String> = (0..n_aug).map(|i| format!("a{i}")).collect();
    let policy = ToyPolicy::new(input.clone(), aug, &cfg, Tokenizer::default(), rng.random()).unwrap();
    let len = rng.random_range(1..=6);
    let text = (0..len).map(|_| input.choose(rng).unwrap().as_str()).collect::<Vec<_>>().join(" ");
    let kind = if rng.random_bool(0.5) { SourceKind::Query } else { SourceKind::RelevantDoc };
    let tokens = if cfg.without_replacement {
        let mut idx: Vec<u32> = (0..n_aug as u32).collect();
        idx.shuffle(rng);
        idx.truncate(m);
        idx
    } else {
        (0..m).map(|_| rng.random_range(0..n_aug as u32)).collect()
    };
    (policy, text, kind, tokens)
}

/// Central finite-difference gradient of the sequence log-probability.
pub fn fd_gradient(policy: &ToyPolicy, text: &str, kind: SourceKind, tokens: &[u32], h: f64) -> Vec<f64> {
    let mut p = policy.clone();
    (0..p.weights().len())
        .map(|i| {
            let w = p.weights()[i];
            p.weights_mut()[i] = w + h;
            let up = p.log_prob(text, kind, tokens);
            p.weights_mut()[i] = w - h;
            let down = p.log_prob(text, kind, tokens);
            p.weights_mut()[i] = w;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt())
        .max(1e-12);
    diff / scale
}

/// Random corpus of at most `max_docs` documents over a small vocabulary,
/// ids inserted out of order so tie-breaks cannot rely on insertion.
pub fn random_corpus(rng: &mut ChaCha8Rng, max_docs: usize) -> (Vec<(String, String)>, Vec<String>) {
    let vocab: Vec<String> = (0..rng.random_range(3..12)).map(|i| format!("t{i}")).collect();
    let n = rng.random_range(1..=max_docs);
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(rng);
    let docs = ids
        .into_iter()
        .map(|i| {
            let len = rng.random_range(1..8);
            let text = (0..len).map(|_| vocab.choose(rng).unwrap().as_str()).collect::<Vec<_>>().join(" ");
            (format!("doc{i:03}"), text)
        })
        .collect();
    let queries = (0..5)
        .map(|_| {
            let len = rng.random_range(1..4);
            (0..len).map(|_| vocab.choose(rng).unwrap().as_str()).collect::<Vec<_>>().join(" ")
        })
        .collect();
    (docs, queries)
}

/// Random ranking over a random candidate set with graded judgments.
pub fn random_ndcg_instance(rng: &mut ChaCha8Rng) -> (Vec<String>, BTreeMap<String, u32>) {
    let n = rng.random_range(1..=7);
    let grades: BTreeMap<String, u32> = (0..n).map(|i| (format!("c{i}"), rng.random_range(0..=3))).collect();
    let mut pool: Vec<String> = grades.keys().cloned().collect();
    pool.extend((0..rng.random_range(0..6)).map(|i| format!("u{i}")));
    pool.shuffle(rng);
    pool.truncate(rng.random_range(0..=pool.len()));
    (pool, grades)
}
