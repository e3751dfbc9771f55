//! Queries, documents and relevance judgments.
//!
//! Two sources are supported: datasets in the BEIR on-disk layout
//! (`corpus.jsonl`, `queries.jsonl`, `qrels/<split>.tsv`) and a synthetic
//! generator whose queries and documents are drawn from disjoint per-topic
//! vocabularies, so that raw lexical retrieval finds nothing and every hit has
//! to come from augmentation.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

impl CorpusItem {
    pub fn new(id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            text: text.into(),
        }
    }

    /// Canonical text used for retrieval: `title + " " + text` when a title is present.
    pub fn full_text(&self) -> String {
        if self.title.is_empty() {
            self.text.clone()
        } else {
            format!("{} {}", self.title, self.text)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryItem {
    pub id: String,
    pub text: String,
}

impl QueryItem {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
        }
    }
}

/// Graded relevance judgments keyed by query id then document id.
///
/// Absent pairs have grade 0.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QrelSet {
    grades: BTreeMap<String, BTreeMap<String, u32>>,
}

impl QrelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: impl Into<String>, doc_id: impl Into<String>, grade: u32) {
        self.grades
            .entry(query_id.into())
            .or_default()
            .insert(doc_id.into(), grade);
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> u32 {
        self.grades
            .get(query_id)
            .and_then(|m| m.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    /// All judged documents for a query, including explicit zero grades.
    pub fn judged(&self, query_id: &str) -> impl Iterator<Item = (&str, u32)> {
        self.grades
            .get(query_id)
            .into_iter()
            .flat_map(|m| m.iter().map(|(d, g)| (d.as_str(), *g)))
    }

    /// Documents with a positive grade for the query, in id order.
    pub fn relevant(&self, query_id: &str) -> Vec<&str> {
        self.judged(query_id)
            .filter(|(_, g)| *g > 0)
            .map(|(d, _)| d)
            .collect()
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.grades.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.grades.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, u32)> {
        self.grades.iter().flat_map(|(q, m)| {
            m.iter()
                .map(move |(d, g)| (q.as_str(), d.as_str(), *g))
        })
    }

    /// Checks that every referenced id exists in the given collections.
    pub fn validate(&self, corpus: &[CorpusItem], queries: &[QueryItem]) -> Result<()> {
        let doc_ids: HashSet<&str> = corpus.iter().map(|d| d.id.as_str()).collect();
        let query_ids: HashSet<&str> = queries.iter().map(|q| q.id.as_str()).collect();
        let mut offenders = BTreeSet::new();
        for (q, d, _) in self.iter() {
            if !query_ids.contains(q) {
                offenders.insert(format!("query:{q}"));
            }
            if !doc_ids.contains(d) {
                offenders.insert(format!("doc:{d}"));
            }
        }
        if offenders.is_empty() {
            Ok(())
        } else {
            let list: Vec<_> = offenders.into_iter().collect();
            Err(Error::Validation(format!(
                "qrels reference unknown ids: {}",
                list.join(", ")
            )))
        }
    }
}

/// A loaded or generated retrieval dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub corpus: Vec<CorpusItem>,
    pub queries: Vec<QueryItem>,
    pub qrels: QrelSet,
}

impl Dataset {
    pub fn doc(&self, id: &str) -> Option<&CorpusItem> {
        self.corpus.iter().find(|d| d.id == id)
    }

    pub fn query(&self, id: &str) -> Option<&QueryItem> {
        self.queries.iter().find(|q| q.id == id)
    }
}

#[derive(Deserialize)]
struct BeirDoc {
    #[serde(rename = "_id")]
    id: String,
    #[serde(default)]
    title: String,
    #[serde(default)]
    text: String,
}

#[derive(Deserialize)]
struct BeirQuery {
    #[serde(rename = "_id")]
    id: String,
    text: String,
}

#[derive(Serialize)]
struct BeirDocOut<'a> {
    #[serde(rename = "_id")]
    id: &'a str,
    title: &'a str,
    text: &'a str,
}

#[derive(Serialize)]
struct BeirQueryOut<'a> {
    #[serde(rename = "_id")]
    id: &'a str,
    text: &'a str,
}

/// Resolves the qrels file for a split, preferring `train` when no split is given.
pub fn qrels_path(dir: &Path, split: Option<&str>) -> Result<PathBuf> {
    let qdir = dir.join("qrels");
    match split {
        Some(s) => {
            let p = qdir.join(format!("{s}.tsv"));
            if p.is_file() {
                Ok(p)
            } else {
                Err(Error::Ingestion {
                    file: p,
                    message: "qrels split file not found".into(),
                })
            }
        }
        None => ["train", "dev", "test"]
            .iter()
            .map(|s| qdir.join(format!("{s}.tsv")))
            .find(|p| p.is_file())
            .ok_or_else(|| Error::Ingestion {
                file: qdir.join("train.tsv"),
                message: "no qrels split file (train/dev/test) found".into(),
            }),
    }
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let file = fs::File::open(path).map_err(|e| Error::Ingestion {
        file: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l)))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (line_no, line) in open_lines(path)? {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            file: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn read_qrels(path: &Path) -> Result<QrelSet> {
    let mut qrels = QrelSet::new();
    let mut first = true;
    for (line_no, line) in open_lines(path)? {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        let is_first = std::mem::replace(&mut first, false);
        if cols.len() < 3 {
            return Err(Error::Malformed {
                file: path.to_path_buf(),
                line: line_no,
                message: format!("expected 3 tab-separated columns, found {}", cols.len()),
            });
        }
        let grade = match cols[2].parse::<i64>() {
            Ok(g) => g,
            // header row such as "query-id\tcorpus-id\tscore"
            Err(_) if is_first => continue,
            Err(e) => {
                return Err(Error::Malformed {
                    file: path.to_path_buf(),
                    line: line_no,
                    message: format!("bad grade {:?}: {e}", cols[2]),
                })
            }
        };
        if grade < 0 {
            return Err(Error::Malformed {
                file: path.to_path_buf(),
                line: line_no,
                message: format!("negative grade {grade}"),
            });
        }
        qrels.insert(cols[0], cols[1], grade as u32);
    }
    Ok(qrels)
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a str>, what: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if id.is_empty() {
            return Err(Error::Validation(format!("empty {what} id")));
        }
        if !seen.insert(id) {
            return Err(Error::Validation(format!("duplicate {what} id {id:?}")));
        }
    }
    Ok(())
}

/// Loads a BEIR-layout dataset. `split` picks `qrels/<split>.tsv`; `None`
/// takes the first of train, dev, test that exists.
pub fn load_beir(dir: &Path, split: Option<&str>) -> Result<Dataset> {
    let corpus_path = dir.join("corpus.jsonl");
    let queries_path = dir.join("queries.jsonl");
    let qrels_file = qrels_path(dir, split)?;

    let corpus: Vec<CorpusItem> = read_jsonl::<BeirDoc>(&corpus_path)?
        .into_iter()
        .map(|d| CorpusItem {
            id: d.id,
            title: d.title,
            text: d.text,
        })
        .collect();
    if corpus.is_empty() {
        return Err(Error::Ingestion {
            file: corpus_path,
            message: "no documents".into(),
        });
    }
    if let Some(d) = corpus.iter().find(|d| d.full_text().trim().is_empty()) {
        return Err(Error::Validation(format!("document {:?} has no text", d.id)));
    }
    let queries: Vec<QueryItem> = read_jsonl::<BeirQuery>(&queries_path)?
        .into_iter()
        .map(|q| QueryItem { id: q.id, text: q.text })
        .collect();
    if queries.is_empty() {
        return Err(Error::Ingestion {
            file: queries_path,
            message: "no queries".into(),
        });
    }
    if let Some(q) = queries.iter().find(|q| q.text.trim().is_empty()) {
        return Err(Error::Validation(format!("query {:?} has no text", q.id)));
    }
    check_unique(corpus.iter().map(|d| d.id.as_str()), "document")?;
    check_unique(queries.iter().map(|q| q.id.as_str()), "query")?;

    let qrels = read_qrels(&qrels_file)?;
    qrels.validate(&corpus, &queries)?;
    log::info!(
        "loaded {} documents, {} queries, {} judgments from {}",
        corpus.len(),
        queries.len(),
        qrels.len(),
        dir.display()
    );
    Ok(Dataset {
        corpus,
        queries,
        qrels,
    })
}

/// Writes a dataset in BEIR layout; qrels go to `qrels/<split>.tsv` with a header row.
pub fn save_beir(dataset: &Dataset, dir: &Path, split: &str) -> Result<()> {
    fs::create_dir_all(dir.join("qrels"))?;
    let mut w = BufWriter::new(fs::File::create(dir.join("corpus.jsonl"))?);
    for d in &dataset.corpus {
        let rec = BeirDocOut {
            id: &d.id,
            title: &d.title,
            text: &d.text,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let mut w = BufWriter::new(fs::File::create(dir.join("queries.jsonl"))?);
    for q in &dataset.queries {
        serde_json::to_writer(&mut w, &BeirQueryOut { id: &q.id, text: &q.text })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let mut w = BufWriter::new(fs::File::create(dir.join("qrels").join(format!("{split}.tsv")))?);
    writeln!(w, "query-id\tcorpus-id\tscore")?;
    for (q, d, g) in dataset.qrels.iter() {
        writeln!(w, "{q}\t{d}\t{g}")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_topics: usize,
    pub n_queries: usize,
    pub n_docs: usize,
    pub query_vocab_size: usize,
    pub doc_vocab_size: usize,
    pub bridge_vocab_size: usize,
    pub doc_len: usize,
    pub query_len: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// Eight topics, so four-query batches always leave topics for fillers.
    fn default() -> Self {
        Self {
            n_topics: 8,
            n_queries: 80,
            n_docs: 240,
            query_vocab_size: 160,
            doc_vocab_size: 480,
            bridge_vocab_size: 16,
            doc_len: 12,
            query_len: 3,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    /// The small two-topic bridge corpus: 20 queries, 60 documents and the
    /// same per-topic vocabulary sizes as the default.
    pub fn two_topic(seed: u64) -> Self {
        Self {
            n_topics: 2,
            n_queries: 20,
            n_docs: 60,
            query_vocab_size: 40,
            doc_vocab_size: 120,
            bridge_vocab_size: 4,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_topics", self.n_topics),
            ("n_queries", self.n_queries),
            ("n_docs", self.n_docs),
            ("query_vocab_size", self.query_vocab_size),
            ("doc_vocab_size", self.doc_vocab_size),
            ("bridge_vocab_size", self.bridge_vocab_size),
            ("doc_len", self.doc_len),
            ("query_len", self.query_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Spec(format!("{name} must be at least 1")));
        }
        for (name, size) in [
            ("query_vocab_size", self.query_vocab_size),
            ("doc_vocab_size", self.doc_vocab_size),
            ("bridge_vocab_size", self.bridge_vocab_size),
        ] {
            if size < self.n_topics {
                return Err(Error::Spec(format!(
                    "{name}={size} leaves some of the {} topics without vocabulary",
                    self.n_topics
                )));
            }
        }
        Ok(())
    }
}

/// Per-topic vocabularies of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicVocab {
    pub query: Vec<String>,
    pub doc: Vec<String>,
    pub bridge: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub dataset: Dataset,
    pub topics: Vec<TopicVocab>,
    pub query_topic: Vec<usize>,
    pub doc_topic: Vec<usize>,
}

impl SyntheticCorpus {
    pub fn bridge_tokens(&self) -> Vec<String> {
        self.topics.iter().flat_map(|t| t.bridge.clone()).collect()
    }

    pub fn topic_of_query(&self, query_id: &str) -> Option<usize> {
        self.dataset
            .queries
            .iter()
            .position(|q| q.id == query_id)
            .map(|i| self.query_topic[i])
    }

    pub fn topic_of_doc(&self, doc_id: &str) -> Option<usize> {
        self.dataset
            .corpus
            .iter()
            .position(|d| d.id == doc_id)
            .map(|i| self.doc_topic[i])
    }
}

fn padded_id(prefix: char, i: usize, n: usize) -> String {
    let width = n.saturating_sub(1).to_string().len();
    format!("{prefix}{i:0width$}")
}

/// Generates a bridge-vocabulary corpus; a pure function of `spec`.
///
/// Query `i` and document `j` belong to topics `i % n_topics` and
/// `j % n_topics`. Surface tokens look like `q3t1` (query word 3 of topic 1),
/// `d7t0` and `b0t1` (bridge words, never used in surface text).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let t = spec.n_topics;
    let topics: Vec<TopicVocab> = (0..t)
        .map(|topic| TopicVocab {
            query: (0..spec.query_vocab_size / t)
                .map(|w| format!("q{w}t{topic}"))
                .collect(),
            doc: (0..spec.doc_vocab_size / t)
                .map(|w| format!("d{w}t{topic}"))
                .collect(),
            bridge: (0..spec.bridge_vocab_size / t)
                .map(|w| format!("b{w}t{topic}"))
                .collect(),
        })
        .collect();

    let mut draw = |vocab: &[String], len: usize| -> String {
        (0..len)
            .map(|_| vocab.choose(&mut rng).expect("nonempty vocab").as_str())
            .collect::<Vec<_>>()
            .join(" ")
    };

    let query_topic: Vec<usize> = (0..spec.n_queries).map(|i| i % t).collect();
    let doc_topic: Vec<usize> = (0..spec.n_docs).map(|j| j % t).collect();
    let queries: Vec<QueryItem> = query_topic
        .iter()
        .enumerate()
        .map(|(i, &topic)| {
            QueryItem::new(
                padded_id('q', i, spec.n_queries),
                draw(&topics[topic].query, spec.query_len),
            )
        })
        .collect();
    let corpus: Vec<CorpusItem> = doc_topic
        .iter()
        .enumerate()
        .map(|(j, &topic)| {
            CorpusItem::new(
                padded_id('d', j, spec.n_docs),
                "",
                draw(&topics[topic].doc, spec.doc_len),
            )
        })
        .collect();
    let mut qrels = QrelSet::new();
    for (q, &qt) in queries.iter().zip(&query_topic) {
        for (d, &dt) in corpus.iter().zip(&doc_topic) {
            if qt == dt {
                qrels.insert(q.id.clone(), d.id.clone(), 1);
            }
        }
    }
    Ok(SyntheticCorpus {
        dataset: Dataset {
            corpus,
            queries,
            qrels,
        },
        topics,
        query_topic,
        doc_topic,
    })
}
