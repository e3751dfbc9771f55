mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use coaug::analysis::case_extract;
use coaug::corpus::{generate_synthetic, CorpusItem, Dataset, QrelSet, SyntheticSpec};
use coaug::metrics::{ndcg_at_k, RelevanceView};
use coaug::policy::{ToyPolicy, ToyPolicyConfig};
use coaug::retrieval::{build_sparse_index, RetrieverKind, ScoredDoc, ScoredRanking, Tokenizer};
use coaug::reward::{exact_reward, sampled_reward, DEFAULT_COMBINATION_CAP};
use coaug::sampler::SourceKind;
use coaug::trainer::{train_step, TrainConfig, TrainContext, TrainState};

use common::*;

fn ranking(ids: &[String]) -> ScoredRanking {
    ScoredRanking {
        entries: ids
            .iter()
            .enumerate()
            .map(|(i, d)| ScoredDoc {
                doc_id: d.clone(),
                score: (ids.len() - i) as f64,
            })
            .collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ndcg_matches_permutation_oracle(seed in any::<u64>(), k in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ids, grades) = random_ndcg_instance(&mut rng);
        let mut rel = RelevanceView::new();
        for (d, g) in &grades {
            rel.insert(d.clone(), *g);
        }
        let got = ndcg_at_k(&ranking(&ids), &rel, k);
        let want = brute_ndcg(&ids, &grades, k);
        prop_assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn bm25_matches_exhaustive_scoring(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (docs, queries) = random_corpus(&mut rng, 50);
        let index = build_sparse_index(docs.iter().map(|(a, b)| (a.as_str(), b.as_str()))).unwrap();
        for q in &queries {
            let got = index.retrieve(q, docs.len());
            let want = oracle_bm25(&docs, q);
            prop_assert_eq!(got.entries.len(), want.len());
            for (g, (id, s)) in got.entries.iter().zip(&want) {
                prop_assert_eq!(&g.doc_id, id);
                prop_assert!((g.score - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (policy, text, kind, tokens) = random_policy(&mut rng);
        let analytic = policy.log_prob_gradient(&text, kind, &tokens);
        let numeric = fd_gradient(&policy, &text, kind, &tokens, 1e-5);
        prop_assert!(relative_error(&analytic, &numeric) < 1e-4);
    }
}

fn mean_error(n_samp: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..8 {
        let task = random_reward_task(&mut rng, 1, 1, 2, 3, n_samp);
        let exact = exact_reward(&task, DEFAULT_COMBINATION_CAP).unwrap();
        for _ in 0..4 {
            total += sampled_reward(&task, &mut rng).max_abs_diff(&exact);
        }
    }
    total / 32.0
}

#[test]
fn sampled_reward_error_shrinks_with_budget() {
    let coarse = mean_error(16, 5);
    let fine = mean_error(1024, 5);
    assert!(fine < coarse, "{fine} vs {coarse}");
    assert!(fine < 5e-2, "{fine}");
}

#[test]
fn sampling_budget_covering_all_combinations_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // 2 docs with 2 rollouts each: 4 combinations, 4 samples per stratified block
    let task = random_reward_task(&mut rng, 1, 1, 1, 2, 4);
    let exact = exact_reward(&task, DEFAULT_COMBINATION_CAP).unwrap();
    let est = sampled_reward(&task, &mut rng);
    assert!(est.max_abs_diff(&exact) < 1e-12);
}

/// One query whose relevant document is reachable only through a bridge
/// token. Noise tokens also occur in filler documents, so emitting them
/// pulls fillers up and earns less than the bridge.
fn bridge_world() -> (Dataset, ToyPolicy, String) {
    let syn = generate_synthetic(&SyntheticSpec {
        n_topics: 1,
        n_queries: 1,
        n_docs: 1,
        query_vocab_size: 3,
        doc_vocab_size: 3,
        bridge_vocab_size: 1,
        doc_len: 3,
        query_len: 2,
        seed: 4,
    })
    .unwrap();
    let mut ds = syn.dataset;
    let bridge = syn.topics[0].bridge[0].clone();
    let noise: Vec<String> = (0..4).map(|i| format!("noise{i}")).collect();
    for (i, n) in noise.iter().enumerate() {
        ds.corpus.push(CorpusItem::new(format!("f{i}"), "", format!("{n} {n} filler{i}")));
    }
    let mut qrels = QrelSet::new();
    for (q, d, g) in ds.qrels.iter() {
        qrels.insert(q, d, g);
    }
    ds.qrels = qrels;
    let input: Vec<String> = {
        let tok = Tokenizer::default();
        let mut v: Vec<String> = ds
            .corpus
            .iter()
            .map(|d| d.full_text())
            .chain(ds.queries.iter().map(|q| q.text.clone()))
            .flat_map(|t| tok.tokenize(&t))
            .collect();
        v.sort();
        v.dedup();
        v
    };
    let mut aug = noise.clone();
    aug.push(bridge.clone());
    let cfg = ToyPolicyConfig {
        tokens_per_rollout: 1,
        ..Default::default()
    };
    let policy = ToyPolicy::new(input, aug, &cfg, Tokenizer::default(), 3).unwrap();
    (ds, policy, bridge)
}

fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    xs.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect()
}

#[test]
fn bridge_emission_rises_on_both_sides() {
    let (ds, policy, bridge) = bridge_world();
    let cfg = TrainConfig {
        steps: 500,
        q: 1,
        d_pos: 1,
        d_neg: 4,
        n_rollout: 4,
        n_samp: 16,
        learning_rate: 20.0,
        eval_every: 500,
        policy: ToyPolicyConfig {
            tokens_per_rollout: 1,
            ..Default::default()
        },
        seed: 9,
        ..Default::default()
    };
    let ctx = TrainContext::new(&cfg, &ds).unwrap();
    let mut state = TrainState::with_policy(&cfg, policy);
    let b = state.policy.aug_token_index(&bridge).unwrap();
    let query = ds.queries[0].text.clone();
    let doc = ds.corpus[0].full_text();
    let mut pq = Vec::new();
    let mut pd = Vec::new();
    for _ in 0..cfg.steps {
        train_step(&mut state, &ctx).unwrap();
        pq.push(state.policy.probabilities(&query, SourceKind::Query)[b]);
        pd.push(state.policy.probabilities(&doc, SourceKind::RelevantDoc)[b]);
    }
    for (name, series) in [("query", &pq), ("doc", &pd)] {
        let ma = moving_average(series, 50);
        let checkpoints: Vec<f64> = ma.iter().step_by(ma.len() / 5).copied().collect();
        assert!(
            checkpoints.windows(2).all(|w| w[1] >= w[0]),
            "{name} bridge probability not rising: {checkpoints:?}"
        );
        assert!(ma.last().unwrap() > &0.5, "{name}: {}", ma.last().unwrap());
    }

    let case = case_extract(&state.policy, &state.policy, &ds, RetrieverKind::Bm25, &ds.queries[0].id, 5).unwrap();
    let relevant = case.ranking.iter().find(|d| d.grade > 0).expect("relevant doc retrieved");
    assert!(relevant.shared_tokens.contains(&bridge), "{:?}", relevant.shared_tokens);
    assert_eq!(case.ranking[0].doc_id, relevant.doc_id);
}
