use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use coaug::advantage::AdvantageMode;
use coaug::analysis::{ablation_grid, anomaly_table, anomaly_text_table, case_extract, hqd_report, Arm, Variant};
use coaug::corpus::{generate_synthetic, load_beir, save_beir, Dataset, SyntheticSpec};
use coaug::policy::{AugmentationPolicy, ExternalPolicy, IdentityPolicy};
use coaug::retrieval::{RetrievalIndex, RetrieverKind};
use coaug::trainer::{
    config_hash, evaluate, train, write_history, Checkpoint, TrainConfig, TrainContext, TrainSides, TrainState,
};

const EXTRA_VOCAB_FILE: &str = "extra_vocab.json";

#[derive(Parser)]
#[command(name = "coaug", version, about = "Query-document co-augmentation for retrieval")]
struct Cli {
    /// JSON file with optional `corpus` and `train` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the corpus and the training run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic BEIR-format corpus.
    GenCorpus(GenArgs),
    /// Build a retrieval index over a corpus.
    Index(IndexArgs),
    /// Train the toy augmentation policy.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the full corpus.
    Eval(EvalArgs),
    /// Run the ablation grid.
    Ablate(AblateArgs),
    /// H(Q,D) report and a case study for one query.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct DataArgs {
    /// BEIR-format directory (corpus.jsonl, queries.jsonl, qrels/).
    #[arg(long)]
    data: PathBuf,
    /// Qrels split to load.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args)]
struct RetrieverArgs {
    /// Retriever to use (defaults to the configured one).
    #[arg(long, value_enum)]
    retriever: Option<RetrieverChoice>,
    /// Dense embedding dimension.
    #[arg(long, default_value_t = 64)]
    dim: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum RetrieverChoice {
    Bm25,
    Dense,
}

#[derive(Args)]
struct GenArgs {
    /// Number of topics.
    #[arg(long)]
    topics: Option<usize>,
    /// Number of queries.
    #[arg(long)]
    queries: Option<usize>,
    /// Number of documents.
    #[arg(long)]
    docs: Option<usize>,
    /// Name of the qrels split to write.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct IndexArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    retriever: RetrieverArgs,
}

#[derive(Args)]
struct TrainOverrides {
    /// Training steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Advantage mode.
    #[arg(long, value_enum)]
    mode: Option<ModeChoice>,
    /// Which text kinds receive a training signal.
    #[arg(long, value_enum)]
    sides: Option<SidesChoice>,
    /// Queries per composite batch.
    #[arg(long)]
    q: Option<usize>,
    /// Relevant documents per query in a composite batch.
    #[arg(long)]
    d_pos: Option<usize>,
    /// Irrelevant filler documents per composite batch.
    #[arg(long)]
    d_neg: Option<usize>,
    /// Rollouts per text.
    #[arg(long)]
    n_rollout: Option<usize>,
    /// Sampled index combinations per reward estimate.
    #[arg(long)]
    n_samp: Option<usize>,
    /// Evaluate on the full corpus every this many steps.
    #[arg(long)]
    eval_every: Option<u64>,
    #[command(flatten)]
    retriever: RetrieverArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeChoice {
    Centering,
    GroupNorm,
    BatchNorm,
}

#[derive(Clone, Copy, ValueEnum)]
enum SidesChoice {
    Both,
    Query,
    Doc,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    overrides: TrainOverrides,
    /// Continue from a checkpoint; its configuration is used as-is except for `--steps`.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint to evaluate; without it only the base retriever is scored.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use the best checkpoint recorded during training instead of the final one.
    #[arg(long)]
    best: bool,
    /// Augment through an external program speaking the JSON-line protocol.
    #[arg(long, conflicts_with = "checkpoint")]
    external: Option<String>,
    #[command(flatten)]
    retriever: RetrieverArgs,
}

#[derive(Args)]
struct AblateArgs {
    /// BEIR directory; without it a synthetic corpus is generated per seed.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Qrels split to load.
    #[arg(long)]
    split: Option<String>,
    /// Comma-separated seeds; each seed trains its own runs.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    /// Comma-separated arm names; all arms by default.
    #[arg(long, value_delimiter = ',')]
    arms: Vec<String>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint to analyze; without it only the raw texts are reported.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Query for the case study (defaults to the first query).
    #[arg(long)]
    query: Option<String>,
    /// Logarithm base for H(Q,D).
    #[arg(long, default_value_t = std::f64::consts::E)]
    log_base: f64,
    /// Ranking depth of the case study.
    #[arg(long, default_value_t = 10)]
    k: usize,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    corpus: SyntheticSpec,
    train: TrainConfig,
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    config_hash: String,
    artifacts: BTreeMap<String, PathBuf>,
    summary: serde_json::Value,
}

struct Run {
    out: PathBuf,
    config: FileConfig,
    seed: Option<u64>,
}

impl Run {
    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let path = self.out.join(name);
        fs::write(&path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    fn manifest<C: Serialize>(
        &self,
        command: &str,
        config: &C,
        artifacts: BTreeMap<String, PathBuf>,
        summary: serde_json::Value,
    ) -> Result<()> {
        let m = Manifest {
            command: command.into(),
            config_hash: config_hash(config),
            artifacts,
            summary,
        };
        let path = self.write_json("manifest.json", &m)?;
        println!("{}", serde_json::to_string_pretty(&m.summary)?);
        log::info!("manifest written to {}", path.display());
        Ok(())
    }

    fn train_config(&self, o: &TrainOverrides) -> Result<TrainConfig> {
        let mut c = self.config.train.clone();
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(v) = o.steps {
            c.steps = v;
        }
        if let Some(v) = o.lr {
            c.learning_rate = v;
        }
        if let Some(m) = o.mode {
            c.advantage.mode = match m {
                ModeChoice::Centering => AdvantageMode::Centering,
                ModeChoice::GroupNorm => AdvantageMode::GroupNorm,
                ModeChoice::BatchNorm => AdvantageMode::BatchNorm,
            };
        }
        if let Some(s) = o.sides {
            c.sides = match s {
                SidesChoice::Both => TrainSides::Both,
                SidesChoice::Query => TrainSides::QueryOnly,
                SidesChoice::Doc => TrainSides::DocOnly,
            };
        }
        for (field, value) in [
            (&mut c.q, o.q),
            (&mut c.d_pos, o.d_pos),
            (&mut c.d_neg, o.d_neg),
            (&mut c.n_rollout, o.n_rollout),
            (&mut c.n_samp, o.n_samp),
        ] {
            if let Some(v) = value {
                *field = v;
            }
        }
        if let Some(v) = o.eval_every {
            c.eval_every = v;
        }
        c.retriever = retriever_kind(&o.retriever, c.retriever, c.seed);
        c.validate()?;
        Ok(c)
    }
}

fn retriever_kind(args: &RetrieverArgs, fallback: RetrieverKind, seed: u64) -> RetrieverKind {
    match args.retriever {
        None => fallback,
        Some(RetrieverChoice::Bm25) => RetrieverKind::Bm25,
        Some(RetrieverChoice::Dense) => RetrieverKind::Dense { dim: args.dim, seed },
    }
}

fn load_data(args: &DataArgs) -> Result<(Dataset, Vec<String>)> {
    let ds = load_beir(&args.data, args.split.as_deref())
        .with_context(|| format!("loading dataset from {}", args.data.display()))?;
    Ok((ds, load_extra_vocab(&args.data)?))
}

fn load_extra_vocab(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join(EXTRA_VOCAB_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if n == 0 {
            bail!("--workers must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let config: FileConfig = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => FileConfig::default(),
    };
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let run = Run {
        out: cli.out.clone(),
        config,
        seed: cli.seed,
    };
    match &cli.command {
        Command::GenCorpus(a) => gen_corpus(&run, a),
        Command::Index(a) => index(&run, a),
        Command::Train(a) => train_cmd(&run, a),
        Command::Eval(a) => eval_cmd(&run, a),
        Command::Ablate(a) => ablate(&run, a),
        Command::Analyze(a) => analyze(&run, a),
    }
}

fn gen_corpus(run: &Run, a: &GenArgs) -> Result<()> {
    let mut spec = run.config.corpus.clone();
    if let Some(s) = run.seed {
        spec.seed = s;
    }
    if let Some(v) = a.topics {
        spec.n_topics = v;
    }
    if let Some(v) = a.queries {
        spec.n_queries = v;
    }
    if let Some(v) = a.docs {
        spec.n_docs = v;
    }
    let syn = generate_synthetic(&spec)?;
    save_beir(&syn.dataset, &run.out, &a.split)?;
    let vocab = run.write_json(EXTRA_VOCAB_FILE, &syn.bridge_tokens())?;
    let topics = run.write_json("topics.json", &syn)?;
    let artifacts = BTreeMap::from([
        ("corpus".into(), run.out.join("corpus.jsonl")),
        ("queries".into(), run.out.join("queries.jsonl")),
        ("qrels".into(), run.out.join("qrels").join(format!("{}.tsv", a.split))),
        ("extra_vocab".into(), vocab),
        ("topics".into(), topics),
    ]);
    let summary = serde_json::json!({
        "documents": syn.dataset.corpus.len(),
        "queries": syn.dataset.queries.len(),
        "judgments": syn.dataset.qrels.len(),
    });
    run.manifest("gen-corpus", &spec, artifacts, summary)
}

fn index(run: &Run, a: &IndexArgs) -> Result<()> {
    let (ds, _) = load_data(&a.data)?;
    let kind = retriever_kind(&a.retriever, RetrieverKind::Bm25, run.seed.unwrap_or(0));
    let texts: Vec<String> = ds.corpus.iter().map(|d| d.full_text()).collect();
    let index = RetrievalIndex::build(kind, ds.corpus.iter().map(|d| d.id.as_str()).zip(texts.iter().map(String::as_str)))?;
    let path = run.write_json("index.json", &index)?;
    let summary = match &index {
        RetrievalIndex::Sparse(s) => serde_json::json!({
            "retriever": kind.name(),
            "documents": s.n_docs(),
            "vocabulary": s.vocabulary().count(),
            "avg_doc_len": s.avg_doc_len(),
        }),
        RetrievalIndex::Dense(d) => serde_json::json!({
            "retriever": kind.name(),
            "documents": d.n_docs(),
            "dim": d.dim,
        }),
    };
    run.manifest("index", &kind, BTreeMap::from([("index".into(), path)]), summary)
}

fn train_cmd(run: &Run, a: &TrainArgs) -> Result<()> {
    let (ds, extra) = load_data(&a.data)?;
    let (config, mut state) = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            let mut config = ck.config;
            if let Some(s) = a.overrides.steps {
                config.steps = s;
            }
            log::info!("resuming from step {} of {}", ck.state.step, config.steps);
            (config, ck.state)
        }
        None => {
            let config = run.train_config(&a.overrides)?;
            let state = TrainState::new(&config, &ds, &extra)?;
            (config, state)
        }
    };
    let ctx = TrainContext::new(&config, &ds)?;
    let (mut rollout, mut reward) = (0.0, 0.0);
    train(&mut state, &ctx, |r| {
        rollout += r.rollout_secs;
        reward += r.reward_secs;
        match r.record.ndcg10 {
            Some(n) => log::info!("step {}: reward {:.4} ndcg@{} {:.4}", r.record.step, r.record.mean_reward, config.k, n),
            None => log::debug!("step {}: reward {:.4}", r.record.step, r.record.mean_reward),
        }
    })?;
    let ck = run.out.join("checkpoint.json");
    Checkpoint::new(&config, &state).save(&ck)?;
    let csv = run.out.join("history.csv");
    let json = run.out.join("history.json");
    write_history(&state.history, &csv, &json)?;
    let mut artifacts = BTreeMap::from([
        ("checkpoint".into(), ck),
        ("history_csv".into(), csv),
        ("history_json".into(), json),
    ]);
    if let Some(best) = &state.best {
        let mut best_state = state.clone();
        best_state.policy = best.policy.clone();
        let path = run.out.join("best.json");
        Checkpoint::new(&config, &best_state).save(&path)?;
        artifacts.insert("best_checkpoint".into(), path);
    }
    let summary = serde_json::json!({
        "steps": state.step,
        "final_ndcg": state.history.iter().rev().find_map(|r| r.ndcg10),
        "best_ndcg": state.best.as_ref().map(|b| b.ndcg10),
        "best_step": state.best.as_ref().map(|b| b.step),
        "rollout_secs": rollout,
        "reward_secs": reward,
    });
    run.manifest("train", &config, artifacts, summary)
}

fn eval_cmd(run: &Run, a: &EvalArgs) -> Result<()> {
    let (ds, _) = load_data(&a.data)?;
    let identity = IdentityPolicy;
    let mut config = run.config.train.clone();
    let loaded;
    let external;
    let (qp, dp): (&dyn AugmentationPolicy, &dyn AugmentationPolicy) = if let Some(path) = &a.checkpoint {
        let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        config = ck.config;
        loaded = if a.best {
            ck.state.best.context("checkpoint has no best policy")?.policy
        } else {
            ck.state.policy
        };
        (
            if config.sides.augments_queries() { &loaded } else { &identity },
            if config.sides.augments_docs() { &loaded } else { &identity },
        )
    } else if let Some(program) = &a.external {
        let parts: Vec<String> = program.split_whitespace().map(String::from).collect();
        let (prog, args) = parts.split_first().context("empty --external command")?;
        external = ExternalPolicy::spawn(prog, args, config.prompts.clone())?;
        (&external, &external)
    } else {
        (&identity, &identity)
    };
    let kind = retriever_kind(&a.retriever, config.retriever, run.seed.unwrap_or(config.seed));
    let report = evaluate(qp, dp, &ds, kind, config.k)?;
    let path = run.write_json("eval.json", &report)?;
    let summary = serde_json::json!({
        "retriever": kind.name(),
        "k": report.k,
        "ndcg": report.mean_ndcg,
        "base_ndcg": report.base_mean_ndcg,
        "queries": report.per_query.len(),
    });
    run.manifest("eval", &(&config, kind), BTreeMap::from([("eval".into(), path)]), summary)
}

fn ablate(run: &Run, a: &AblateArgs) -> Result<()> {
    let config = run.train_config(&a.overrides)?;
    let arms: Vec<Arm> = if a.arms.is_empty() {
        Arm::ALL.to_vec()
    } else {
        a.arms
            .iter()
            .map(|n| Arm::parse(n).with_context(|| format!("unknown arm {n:?}")))
            .collect::<Result<_>>()?
    };
    let spec = run.config.corpus.clone();
    let grid = match &a.data {
        Some(dir) => {
            let ds = load_beir(dir, a.split.as_deref())?;
            let extra = load_extra_vocab(dir)?;
            ablation_grid(&config, &arms, &a.seeds, |_| Ok((ds.clone(), extra.clone())))?
        }
        None => ablation_grid(&config, &arms, &a.seeds, |seed| {
            let syn = generate_synthetic(&SyntheticSpec { seed, ..spec.clone() })?;
            let extra = syn.bridge_tokens();
            Ok((syn.dataset, extra))
        })?,
    };
    let json = run.write_json("ablation.json", &grid)?;
    let table = run.out.join("ablation.txt");
    let anomalies = anomaly_table(&grid);
    fs::write(&table, format!("{}\n{}", grid.to_text_table(), anomaly_text_table(&anomalies)))?;
    let anomaly_path = run.write_json("anomalies.json", &anomalies)?;
    print!("{}", grid.to_text_table());
    let failed = grid.cells.iter().filter(|c| c.error.is_some()).count();
    let summary = serde_json::json!({
        "cells": grid.cells.len(),
        "failed": failed,
        "median_ndcg": arms.iter().map(|a| (a.name(), grid.median_ndcg(*a))).collect::<BTreeMap<_, _>>(),
    });
    let artifacts = BTreeMap::from([
        ("grid_json".into(), json),
        ("grid_table".into(), table),
        ("anomalies".into(), anomaly_path),
    ]);
    run.manifest("ablate", &(&config, &a.seeds, &arms), artifacts, summary)
}

fn analyze(run: &Run, a: &AnalyzeArgs) -> Result<()> {
    let (ds, _) = load_data(&a.data)?;
    let identity = IdentityPolicy;
    let mut config = run.config.train.clone();
    let mut history = Vec::new();
    let loaded;
    let mut variants = vec![Variant {
        name: "base",
        query_policy: &identity,
        doc_policy: &identity,
    }];
    if let Some(path) = &a.checkpoint {
        let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        config = ck.config;
        history = ck.state.history;
        loaded = ck.state.policy;
        variants.push(Variant {
            name: "checkpoint",
            query_policy: if config.sides.augments_queries() { &loaded } else { &identity },
            doc_policy: if config.sides.augments_docs() { &loaded } else { &identity },
        });
    }
    let report = hqd_report(&variants, &ds, config.retriever, config.hqd_epsilon, a.log_base)?;
    let last = variants.last().expect("base variant");
    let query = match &a.query {
        Some(q) => q.clone(),
        None => ds.queries.first().context("dataset has no queries")?.id.clone(),
    };
    let case = case_extract(last.query_policy, last.doc_policy, &ds, config.retriever, &query, a.k)?;
    let n = history.len().max(1) as f64;
    let anomalies = serde_json::json!({
        "mode": config.advantage.mode.as_str(),
        "steps": history.len(),
        "amplified_variance": history.iter().map(|r| r.amp_var).fold(0.0, |x, y| x + y) / n,
        "same_sign": history.iter().map(|r| r.same_sign).fold(0.0, |x, y| x + y) / n,
    });
    let hqd_path = run.write_json("hqd.json", &report)?;
    let hqd_table = run.out.join("hqd.txt");
    fs::write(&hqd_table, report.to_text_table())?;
    let case_path = run.write_json("case.json", &case)?;
    let anomaly_path = run.write_json("anomalies.json", &anomalies)?;
    let summary = serde_json::json!({
        "hqd": report.rows.iter().map(|r| (r.variant.clone(), r.hqd)).collect::<BTreeMap<_, _>>(),
        "log_base": report.log_base,
        "case_query": case.query_id,
        "case_ndcg": case.ndcg,
        "case_base_ndcg": case.base_ndcg,
        "anomalies": anomalies,
    });
    let artifacts = BTreeMap::from([
        ("hqd".into(), hqd_path),
        ("hqd_table".into(), hqd_table),
        ("case".into(), case_path),
        ("anomalies".into(), anomaly_path),
    ]);
    run.manifest("analyze", &config, artifacts, summary)
}
