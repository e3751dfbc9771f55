//! Augmentation policies.
//!
//! [`ToyPolicy`] is a linear-softmax bag-of-words policy: the text's
//! L1-normalized term frequencies (plus a query/document indicator) are mapped
//! by a weight matrix to logits over an augmentation vocabulary, and a rollout
//! draws `m` tokens from `softmax(logits / temperature)`, by default without
//! replacement. Its log-probability is differentiable in the weights, which
//! is all the policy-gradient update needs.
//!
//! LLM-backed policies plug in through [`ExternalPolicy`], which speaks a
//! line-delimited JSON protocol over a child process's standard streams and
//! extracts `<answer>…</answer>` content from each raw output.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::retrieval::Tokenizer;
use crate::sampler::{PromptedRecord, SourceKind};

/// One sampled augmentation of one source text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub source_id: String,
    pub kind: SourceKind,
    /// Augmentation-vocabulary indices (empty for external backends).
    pub tokens: Vec<u32>,
    pub augmentation: String,
    pub log_prob: f64,
    pub reward: Option<f64>,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedText {
    pub original: String,
    pub augmentation: String,
    pub combined: String,
}

/// Concatenates original and augmentation; an empty augmentation leaves the original.
pub fn apply_augmentation(original: &str, augmentation: &str) -> AugmentedText {
    let combined = if augmentation.trim().is_empty() {
        original.to_string()
    } else if original.is_empty() {
        augmentation.to_string()
    } else {
        format!("{original} {augmentation}")
    };
    AugmentedText {
        original: original.to_string(),
        augmentation: augmentation.to_string(),
        combined,
    }
}

/// Content of the first `<answer>…</answer>` pair, or "" when there is none.
pub fn parse_augmentation(model_output: &str) -> String {
    const OPEN: &str = "<answer>";
    const CLOSE: &str = "</answer>";
    let Some(start) = model_output.find(OPEN) else {
        return String::new();
    };
    let body = &model_output[start + OPEN.len()..];
    match body.find(CLOSE) {
        Some(end) => body[..end].trim().to_string(),
        None => String::new(),
    }
}

/// Common interface of the built-in and external policies.
pub trait AugmentationPolicy: Send + Sync {
    fn rollouts(&self, record: &PromptedRecord, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Rollout>>;

    /// Deterministic augmentation used for evaluation and precomputation.
    fn augment(&self, text: &str, kind: SourceKind) -> Result<String>;
}

/// Emits nothing; reproduces the base retriever.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityPolicy;

impl AugmentationPolicy for IdentityPolicy {
    fn rollouts(&self, record: &PromptedRecord, n: usize, _rng: &mut ChaCha8Rng) -> Result<Vec<Rollout>> {
        Ok((0..n)
            .map(|_| Rollout {
                source_id: record.source_id.clone(),
                kind: record.kind,
                tokens: Vec::new(),
                augmentation: String::new(),
                log_prob: 0.0,
                reward: None,
                advantage: 0.0,
            })
            .collect())
    }

    fn augment(&self, _text: &str, _kind: SourceKind) -> Result<String> {
        Ok(String::new())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyPolicyConfig {
    pub temperature: f64,
    pub tokens_per_rollout: usize,
    pub without_replacement: bool,
    /// Standard deviation of the initial weights.
    pub init_std: f64,
    /// Caps the input and augmentation vocabularies by frequency (0 = no cap).
    pub max_vocab: usize,
}

impl Default for ToyPolicyConfig {
    fn default() -> Self {
        Self {
            temperature: 1.2,
            tokens_per_rollout: 8,
            without_replacement: true,
            init_std: 0.01,
            max_vocab: 0,
        }
    }
}

/// Serializable parameters of the toy policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicyParams {
    pub input_vocab: Vec<String>,
    pub aug_vocab: Vec<String>,
    /// Row-major `(input_vocab.len() + 1) × aug_vocab.len()`; the last row is
    /// the query indicator.
    pub weights: Vec<f64>,
    pub temperature: f64,
    pub tokens_per_rollout: usize,
    pub without_replacement: bool,
    pub tokenizer: Tokenizer,
}

/// Sparse feature vector: (row, value) pairs, indicator last when present.
pub type Features = Vec<(usize, f64)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "ToyPolicyParams", into = "ToyPolicyParams")]
pub struct ToyPolicy {
    params: ToyPolicyParams,
    input_index: HashMap<String, usize>,
    aug_index: HashMap<String, usize>,
}

impl From<ToyPolicyParams> for ToyPolicy {
    fn from(params: ToyPolicyParams) -> Self {
        let input_index = params
            .input_vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let aug_index = params
            .aug_vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            params,
            input_index,
            aug_index,
        }
    }
}

impl From<ToyPolicy> for ToyPolicyParams {
    fn from(p: ToyPolicy) -> Self {
        p.params
    }
}

/// Vocabularies for a policy over a dataset: input = all surface tokens,
/// augmentation = input ∪ `extra` (e.g. bridge tokens). Both sorted.
pub fn policy_vocab(
    dataset: &Dataset,
    extra: &[String],
    tokenizer: &Tokenizer,
    max_vocab: usize,
) -> (Vec<String>, Vec<String>) {
    let mut freq: BTreeMap<String, u64> = BTreeMap::new();
    let texts = dataset
        .corpus
        .iter()
        .map(|d| d.full_text())
        .chain(dataset.queries.iter().map(|q| q.text.clone()));
    for text in texts {
        for tok in tokenizer.tokenize(&text) {
            *freq.entry(tok).or_default() += 1;
        }
    }
    let mut input: Vec<String> = if max_vocab > 0 && freq.len() > max_vocab {
        let mut by_freq: Vec<(String, u64)> = freq.into_iter().collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        by_freq.truncate(max_vocab);
        by_freq.into_iter().map(|(t, _)| t).collect()
    } else {
        freq.into_keys().collect()
    };
    input.sort();
    let mut aug = input.clone();
    aug.extend(extra.iter().cloned());
    aug.sort();
    aug.dedup();
    (input, aug)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl ToyPolicy {
    pub fn new(
        input_vocab: Vec<String>,
        aug_vocab: Vec<String>,
        config: &ToyPolicyConfig,
        tokenizer: Tokenizer,
        seed: u64,
    ) -> Result<Self> {
        if !(config.temperature > 0.0) || !config.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                config.temperature
            )));
        }
        if aug_vocab.is_empty() {
            return Err(Error::Config("empty augmentation vocabulary".into()));
        }
        if config.without_replacement && config.tokens_per_rollout > aug_vocab.len() {
            return Err(Error::Config(format!(
                "tokens_per_rollout={} exceeds the augmentation vocabulary ({}) without replacement",
                config.tokens_per_rollout,
                aug_vocab.len()
            )));
        }
        let n = (input_vocab.len() + 1) * aug_vocab.len();
        let weights = if config.init_std > 0.0 {
            let normal = Normal::new(0.0, config.init_std)
                .map_err(|e| Error::Config(format!("init_std: {e}")))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        } else {
            vec![0.0; n]
        };
        Ok(ToyPolicyParams {
            input_vocab,
            aug_vocab,
            weights,
            temperature: config.temperature,
            tokens_per_rollout: config.tokens_per_rollout,
            without_replacement: config.without_replacement,
            tokenizer,
        }
        .into())
    }

    /// Builds a policy whose vocabularies cover `dataset` plus `extra` tokens.
    pub fn for_dataset(dataset: &Dataset, extra: &[String], config: &ToyPolicyConfig, seed: u64) -> Result<Self> {
        let tokenizer = Tokenizer::default();
        let (input, aug) = policy_vocab(dataset, extra, &tokenizer, config.max_vocab);
        Self::new(input, aug, config, tokenizer, seed)
    }

    pub fn params(&self) -> &ToyPolicyParams {
        &self.params
    }

    pub fn weights(&self) -> &[f64] {
        &self.params.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.params.weights
    }

    pub fn input_dim(&self) -> usize {
        self.params.input_vocab.len() + 1
    }

    pub fn aug_dim(&self) -> usize {
        self.params.aug_vocab.len()
    }

    pub fn temperature(&self) -> f64 {
        self.params.temperature
    }

    pub fn tokens_per_rollout(&self) -> usize {
        self.params.tokens_per_rollout
    }

    pub fn aug_token(&self, idx: u32) -> &str {
        &self.params.aug_vocab[idx as usize]
    }

    pub fn aug_token_index(&self, token: &str) -> Option<usize> {
        self.aug_index.get(token).copied()
    }

    /// Sparse features: L1-normalized term frequencies, then the query indicator.
    pub fn features(&self, text: &str, kind: SourceKind) -> Features {
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        let mut total = 0.0;
        for tok in self.params.tokenizer.tokenize(text) {
            if let Some(&i) = self.input_index.get(&tok) {
                *counts.entry(i).or_default() += 1.0;
                total += 1.0;
            }
        }
        let mut feats: Features = counts.into_iter().map(|(i, c)| (i, c / total)).collect();
        if kind.is_query() {
            feats.push((self.params.input_vocab.len(), 1.0));
        }
        feats
    }

    /// Dense feature vector of length `input_dim()`.
    pub fn featurize(&self, text: &str, kind: SourceKind) -> Vec<f64> {
        let mut dense = vec![0.0; self.input_dim()];
        for (i, v) in self.features(text, kind) {
            dense[i] = v;
        }
        dense
    }

    /// Tempered logits `W^T x / T`.
    pub fn logits(&self, feats: &Features) -> Vec<f64> {
        let a = self.aug_dim();
        let mut z = vec![0.0; a];
        for &(i, x) in feats {
            let row = &self.params.weights[i * a..(i + 1) * a];
            z.iter_mut().zip(row).for_each(|(z, w)| *z += x * w);
        }
        let t = self.params.temperature;
        z.iter_mut().for_each(|v| *v /= t);
        z
    }

    pub fn probabilities(&self, text: &str, kind: SourceKind) -> Vec<f64> {
        let z = self.logits(&self.features(text, kind));
        let lse = log_sum_exp(z.iter().copied());
        z.iter().map(|v| (v - lse).exp()).collect()
    }

    fn draw<R: Rng + ?Sized>(z: &[f64], taken: &[bool], rng: &mut R) -> usize {
        let max = z
            .iter()
            .zip(taken)
            .filter(|(_, t)| !**t)
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = z
            .iter()
            .zip(taken)
            .map(|(v, t)| if *t { 0.0 } else { (v - max).exp() })
            .collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut last = 0;
        for (j, w) in weights.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            last = j;
            if u < *w {
                return j;
            }
            u -= w;
        }
        last
    }

    /// Samples one augmentation (token indices) from logits `z`.
    pub fn sample_tokens<R: Rng + ?Sized>(&self, z: &[f64], rng: &mut R) -> Vec<u32> {
        let m = self.params.tokens_per_rollout;
        let mut taken = vec![false; z.len()];
        let mut out = Vec::with_capacity(m);
        for _ in 0..m {
            let j = Self::draw(z, &taken, rng);
            if self.params.without_replacement {
                taken[j] = true;
            }
            out.push(j as u32);
        }
        out
    }

    /// Log-probability of an ordered token draw under logits `z`.
    pub fn sequence_log_prob(&self, z: &[f64], tokens: &[u32]) -> f64 {
        let mut taken = vec![false; z.len()];
        let mut total = 0.0;
        for &t in tokens {
            let t = t as usize;
            let lse = log_sum_exp(z.iter().zip(&taken).filter(|(_, k)| !**k).map(|(v, _)| *v));
            total += z[t] - lse;
            if self.params.without_replacement {
                taken[t] = true;
            }
        }
        total
    }

    pub fn log_prob(&self, text: &str, kind: SourceKind, tokens: &[u32]) -> f64 {
        self.sequence_log_prob(&self.logits(&self.features(text, kind)), tokens)
    }

    /// ∂ log p / ∂ z (with respect to the tempered logits).
    pub fn logit_gradient(&self, z: &[f64], tokens: &[u32]) -> Vec<f64> {
        let mut grad = vec![0.0; z.len()];
        let mut taken = vec![false; z.len()];
        for &t in tokens {
            let t = t as usize;
            let lse = log_sum_exp(z.iter().zip(&taken).filter(|(_, k)| !**k).map(|(v, _)| *v));
            for (j, g) in grad.iter_mut().enumerate() {
                if !taken[j] {
                    *g -= (z[j] - lse).exp();
                }
            }
            grad[t] += 1.0;
            if self.params.without_replacement {
                taken[t] = true;
            }
        }
        grad
    }

    /// Adds `coef · ∂ log p(tokens | text) / ∂W` into `grad` (same layout as the weights).
    pub fn accumulate_gradient(&self, feats: &Features, tokens: &[u32], coef: f64, grad: &mut [f64]) {
        if coef == 0.0 {
            return;
        }
        let z = self.logits(feats);
        let dz = self.logit_gradient(&z, tokens);
        let a = self.aug_dim();
        let t = self.params.temperature;
        for &(i, x) in feats {
            let scale = coef * x / t;
            let row = &mut grad[i * a..(i + 1) * a];
            row.iter_mut().zip(&dz).for_each(|(g, d)| *g += scale * d);
        }
    }

    /// Dense gradient of log p with respect to the weights.
    pub fn log_prob_gradient(&self, text: &str, kind: SourceKind, tokens: &[u32]) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.weights.len()];
        self.accumulate_gradient(&self.features(text, kind), tokens, 1.0, &mut grad);
        grad
    }

    pub fn tokens_to_string(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .map(|&t| self.aug_token(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Top-m tokens by probability, ties by vocabulary order.
    pub fn argmax_tokens(&self, text: &str, kind: SourceKind) -> Vec<u32> {
        let z = self.logits(&self.features(text, kind));
        let mut order: Vec<u32> = (0..z.len() as u32).collect();
        order.sort_by(|&a, &b| z[b as usize].total_cmp(&z[a as usize]).then(a.cmp(&b)));
        order.truncate(self.params.tokens_per_rollout);
        order
    }

    pub fn rollout<R: Rng + ?Sized>(
        &self,
        source_id: &str,
        text: &str,
        kind: SourceKind,
        n_rollout: usize,
        rng: &mut R,
    ) -> Result<Vec<Rollout>> {
        if n_rollout == 0 {
            return Err(Error::Config("n_rollout must be at least 1".into()));
        }
        let z = self.logits(&self.features(text, kind));
        Ok((0..n_rollout)
            .map(|_| {
                let tokens = self.sample_tokens(&z, rng);
                Rollout {
                    source_id: source_id.to_string(),
                    kind,
                    augmentation: self.tokens_to_string(&tokens),
                    log_prob: self.sequence_log_prob(&z, &tokens),
                    tokens,
                    reward: None,
                    advantage: 0.0,
                }
            })
            .collect())
    }
}

impl AugmentationPolicy for ToyPolicy {
    fn rollouts(&self, record: &PromptedRecord, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Rollout>> {
        self.rollout(&record.source_id, &record.text, record.kind, n, rng)
    }

    fn augment(&self, text: &str, kind: SourceKind) -> Result<String> {
        Ok(self.tokens_to_string(&self.argmax_tokens(text, kind)))
    }
}

#[derive(Serialize)]
struct ExternalRequest<'a> {
    kind: &'a str,
    prompt: &'a str,
    text: &'a str,
    n: usize,
}

struct ExternalIo {
    child: Child,
    stdin: BufWriter<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

/// A policy served by a child process.
///
/// Each request is one JSON line `{"kind","prompt","text","n"}` on the
/// child's stdin; the child answers with exactly `n` lines of raw model
/// output. Log-probabilities are not reported by the protocol (they read as 0).
pub struct ExternalPolicy {
    io: Mutex<ExternalIo>,
    prompts: crate::sampler::PromptSet,
}

impl ExternalPolicy {
    pub fn spawn(program: &str, args: &[String], prompts: crate::sampler::PromptSet) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::External(format!("spawning {program}: {e}")))?;
        let stdin = BufWriter::new(child.stdin.take().expect("piped stdin"));
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            io: Mutex::new(ExternalIo { child, stdin, stdout }),
            prompts,
        })
    }

    /// Sends one request and returns the `n` raw output lines.
    pub fn request(&self, kind: SourceKind, prompt: &str, text: &str, n: usize) -> Result<Vec<String>> {
        let mut io = self.io.lock().map_err(|_| Error::External("poisoned connection".into()))?;
        let req = ExternalRequest {
            kind: kind.as_str(),
            prompt,
            text,
            n,
        };
        serde_json::to_writer(&mut io.stdin, &req)?;
        io.stdin.write_all(b"\n")?;
        io.stdin.flush()?;
        let mut lines = Vec::with_capacity(n);
        for _ in 0..n {
            let mut line = String::new();
            if io.stdout.read_line(&mut line)? == 0 {
                return Err(Error::External(format!(
                    "backend closed its output after {} of {n} lines",
                    lines.len()
                )));
            }
            lines.push(line.trim_end_matches(['\n', '\r']).to_string());
        }
        Ok(lines)
    }
}

impl Drop for ExternalPolicy {
    fn drop(&mut self) {
        if let Ok(io) = self.io.get_mut() {
            let _ = io.child.kill();
            let _ = io.child.wait();
        }
    }
}

impl AugmentationPolicy for ExternalPolicy {
    fn rollouts(&self, record: &PromptedRecord, n: usize, _rng: &mut ChaCha8Rng) -> Result<Vec<Rollout>> {
        let outputs = self.request(record.kind, &record.prompt, &record.text, n)?;
        Ok(outputs
            .iter()
            .map(|raw| Rollout {
                source_id: record.source_id.clone(),
                kind: record.kind,
                tokens: Vec::new(),
                augmentation: parse_augmentation(raw),
                log_prob: 0.0,
                reward: None,
                advantage: 0.0,
            })
            .collect())
    }

    fn augment(&self, text: &str, kind: SourceKind) -> Result<String> {
        let prompt = self.prompts.render(kind, text);
        let out = self.request(kind, &prompt, text, 1)?;
        Ok(parse_augmentation(&out[0]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn vocab(ts: &[&str]) -> Vec<String> {
        ts.iter().map(|t| t.to_string()).collect()
    }

    fn policy(input: &[&str], aug: &[&str], cfg: ToyPolicyConfig, seed: u64) -> ToyPolicy {
        ToyPolicy::new(vocab(input), vocab(aug), &cfg, Tokenizer::default(), seed).unwrap()
    }

    #[test]
    fn featurize_by_hand() {
        let cfg = ToyPolicyConfig {
            tokens_per_rollout: 1,
            ..Default::default()
        };
        let p = policy(&["x", "y"], &["a"], cfg, 0);
        assert_eq!(p.featurize("x x y", SourceKind::Query), vec![2.0 / 3.0, 1.0 / 3.0, 1.0]);
        assert_eq!(p.featurize("", SourceKind::RelevantDoc), vec![0.0, 0.0, 0.0]);
        assert_eq!(p.featurize("zzz", SourceKind::Query), vec![0.0, 0.0, 1.0]);
        let q = p.featurize("x y", SourceKind::Query);
        let d = p.featurize("x y", SourceKind::IrrelevantDoc);
        assert_eq!(q[..2], d[..2]);
        assert_ne!(q[2], d[2]);
    }

    #[test]
    fn parse_answer_tags() {
        assert_eq!(parse_augmentation("junk <answer>gut microbiome</answer> junk"), "gut microbiome");
        assert_eq!(parse_augmentation("no tags here"), "");
        assert_eq!(parse_augmentation("<answer></answer>"), "");
        assert_eq!(parse_augmentation("<answer>open only"), "");
        assert_eq!(parse_augmentation("</answer><answer>a</answer><answer>b</answer>"), "a");
    }

    #[test]
    fn apply_concatenates() {
        assert_eq!(apply_augmentation("probiotics", "gut health").combined, "probiotics gut health");
        assert_eq!(apply_augmentation("doc", "").combined, "doc");
        let a = apply_augmentation("Gut, flora", "(210)Po risk");
        let mut joined = crate::retrieval::tokenize(&a.combined);
        let mut parts = crate::retrieval::tokenize("Gut, flora");
        parts.extend(crate::retrieval::tokenize("(210)Po risk"));
        joined.sort();
        parts.sort();
        assert_eq!(joined, parts);
    }

    #[test]
    fn too_many_tokens_without_replacement_is_config_error() {
        let cfg = ToyPolicyConfig {
            tokens_per_rollout: 3,
            ..Default::default()
        };
        let r = ToyPolicy::new(vocab(&["x"]), vocab(&["a", "b"]), &cfg, Tokenizer::default(), 0);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn rollouts_have_distinct_tokens_and_recomputable_log_probs() {
        let cfg = ToyPolicyConfig {
            tokens_per_rollout: 4,
            init_std: 1.0,
            ..Default::default()
        };
        let p = policy(&["x", "y", "z"], &["a", "b", "c", "d", "e", "f"], cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rs = p.rollout("s", "x y y", SourceKind::Query, 20, &mut rng).unwrap();
        assert_eq!(rs.len(), 20);
        for r in &rs {
            let mut t = r.tokens.clone();
            t.sort();
            t.dedup();
            assert_eq!(t.len(), 4);
            assert!(r.log_prob <= 0.0);
            assert_abs_diff_eq!(r.log_prob, p.log_prob("x y y", SourceKind::Query, &r.tokens), epsilon = 1e-12);
        }
        assert!(p.rollout("s", "x", SourceKind::Query, 0, &mut rng).is_err());
    }

    #[test]
    fn cold_one_hot_policy_repeats_argmax() {
        let cfg = ToyPolicyConfig {
            temperature: 1e-3,
            tokens_per_rollout: 3,
            without_replacement: false,
            init_std: 0.0,
            ..Default::default()
        };
        let mut p = policy(&["x"], &["a", "b", "c"], cfg, 0);
        // indicator row, token "b"
        let a = p.aug_dim();
        p.weights_mut()[a + 1] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = &p.rollout("s", "", SourceKind::Query, 1, &mut rng).unwrap()[0];
        assert_eq!(r.tokens, vec![1, 1, 1]);
        assert!(r.log_prob > -1e-12);
    }

    #[test]
    fn hot_policy_is_near_uniform() {
        let cfg = ToyPolicyConfig {
            temperature: 1e6,
            tokens_per_rollout: 1,
            init_std: 1.0,
            ..Default::default()
        };
        let p = policy(&["x"], &["a", "b", "c", "d"], cfg, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 8000;
        let mut counts = [0f64; 4];
        for r in p.rollout("s", "x", SourceKind::Query, n, &mut rng).unwrap() {
            counts[r.tokens[0] as usize] += 1.0;
        }
        let e = n as f64 / 4.0;
        let chi2: f64 = counts.iter().map(|o| (o - e).powi(2) / e).sum();
        // df = 3; 99.9th percentile ≈ 16.27
        assert!(chi2 < 16.27, "chi2 = {chi2}");
    }

    #[test]
    fn argmax_is_deterministic_top_m() {
        let cfg = ToyPolicyConfig {
            tokens_per_rollout: 2,
            init_std: 0.0,
            ..Default::default()
        };
        let mut p = policy(&["x"], &["a", "b", "c"], cfg, 0);
        p.weights_mut()[2] = 2.0; // row x, token c
        p.weights_mut()[0] = 1.0; // row x, token a
        assert_eq!(p.augment("x", SourceKind::RelevantDoc).unwrap(), "c a");
        // all-equal logits fall back to vocabulary order
        assert_eq!(p.augment("", SourceKind::RelevantDoc).unwrap(), "a b");
    }

    #[test]
    fn serde_round_trip_rebuilds_indices() {
        let p = policy(&["x", "y"], &["a", "b"], ToyPolicyConfig { tokens_per_rollout: 1, ..Default::default() }, 5);
        let back: ToyPolicy = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(p, back);
        assert_eq!(back.aug_token_index("b"), Some(1));
    }

    #[test]
    fn identity_policy_is_empty() {
        let rec = PromptedRecord {
            source_id: "d".into(),
            kind: SourceKind::RelevantDoc,
            prompt: String::new(),
            text: "t".into(),
        };
        let rs = IdentityPolicy.rollouts(&rec, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(rs.len(), 3);
        assert!(rs.iter().all(|r| r.augmentation.is_empty()));
    }
}
