//! Post-hoc analysis: vocabulary-gap reports, ranked case studies, the
//! ablation grid and advantage anomaly tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advantage::AdvantageMode;
use crate::corpus::{CorpusItem, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{ndcg_at_k, RelevanceView};
use crate::policy::{apply_augmentation, AugmentationPolicy, IdentityPolicy, ToyPolicy};
use crate::retrieval::{RetrievalIndex, RetrieverKind, Tokenizer};
use crate::sampler::SourceKind;
use crate::trainer::{
    augmented_texts, config_hash, evaluate, hqd_texts, precompute_doc_augmentations, train, AugmentMode,
    TrainConfig, TrainContext, TrainSides, TrainState,
};

/// One row of an H(Q,D) table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HqdRow {
    pub variant: String,
    pub retriever: String,
    pub hqd: f64,
    /// Set on the row(s) with the lowest H(Q,D).
    pub minimum: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HqdReport {
    pub log_base: f64,
    pub epsilon: f64,
    pub rows: Vec<HqdRow>,
}

/// A named pair of query-side and document-side policies.
pub struct Variant<'a> {
    pub name: &'a str,
    pub query_policy: &'a dyn AugmentationPolicy,
    pub doc_policy: &'a dyn AugmentationPolicy,
}

/// Cross entropy between augmented queries and documents for each variant.
pub fn hqd_report(
    variants: &[Variant],
    dataset: &Dataset,
    retriever: RetrieverKind,
    epsilon: f64,
    log_base: f64,
) -> Result<HqdReport> {
    if !(log_base > 0.0 && log_base != 1.0) {
        return Err(Error::Config(format!("log base {log_base} is not a valid logarithm base")));
    }
    let tok = Tokenizer::default();
    let ln_base = log_base.ln();
    let mut rows = variants
        .iter()
        .map(|v| {
            let (q, d) = augmented_texts(v.query_policy, v.doc_policy, dataset)?;
            let q: Vec<&str> = q.iter().map(|(_, t)| t.as_str()).collect();
            let d: Vec<&str> = d.iter().map(|(_, t)| t.as_str()).collect();
            Ok(HqdRow {
                variant: v.name.to_string(),
                retriever: retriever.name().to_string(),
                hqd: hqd_texts(&q, &d, epsilon, &tok)? / ln_base,
                minimum: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let min = rows.iter().map(|r| r.hqd).fold(f64::INFINITY, f64::min);
    for r in &mut rows {
        r.minimum = r.hqd == min;
    }
    Ok(HqdReport {
        log_base,
        epsilon,
        rows,
    })
}

impl HqdReport {
    pub fn get(&self, variant: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.variant == variant).map(|r| r.hqd)
    }

    pub fn to_text_table(&self) -> String {
        let mut table = vec![vec!["variant".to_string(), "retriever".into(), "H(Q,D)".into(), "".into()]];
        table.extend(self.rows.iter().map(|r| {
            vec![
                r.variant.clone(),
                r.retriever.clone(),
                format!("{:.4}", r.hqd),
                if r.minimum { "min".into() } else { String::new() },
            ]
        }));
        align(&table)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseDoc {
    pub doc_id: String,
    pub score: f64,
    pub grade: u32,
    pub augmentation: String,
    pub augmented_text: String,
    /// Tokens of the augmented document that also occur in the augmented query.
    pub shared_tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseStudy {
    pub query_id: String,
    pub raw_query: String,
    pub query_augmentation: String,
    pub base_ndcg: f64,
    pub ndcg: f64,
    pub base_ranking: Vec<CaseDoc>,
    pub ranking: Vec<CaseDoc>,
}

/// Top-`k` rankings of one query before and after augmentation.
pub fn case_extract(
    query_policy: &dyn AugmentationPolicy,
    doc_policy: &dyn AugmentationPolicy,
    dataset: &Dataset,
    retriever: RetrieverKind,
    query_id: &str,
    k: usize,
) -> Result<CaseStudy> {
    let query = dataset
        .queries
        .iter()
        .find(|q| q.id == query_id)
        .ok_or_else(|| Error::Lookup(format!("query {query_id} not found")))?;
    let tok = Tokenizer::default();
    let q_aug = query_policy.augment(&query.text, SourceKind::Query)?;
    let augmented_query = apply_augmentation(&query.text, &q_aug);
    let q_tokens: BTreeSet<String> = tok.tokenize(&augmented_query.combined).into_iter().collect();
    let docs = precompute_doc_augmentations(doc_policy, &dataset.corpus, AugmentMode::Argmax, 0)?;
    let raw: Vec<String> = dataset.corpus.iter().map(CorpusItem::full_text).collect();
    let base_index = RetrievalIndex::build(
        retriever,
        dataset.corpus.iter().map(|d| d.id.as_str()).zip(raw.iter().map(String::as_str)),
    )?;
    let aug_index = RetrievalIndex::build(retriever, docs.iter().map(|(id, t)| (id.as_str(), t.combined.as_str())))?;
    let rel = RelevanceView::from_judgments(&dataset.qrels, query_id);
    let describe = |ranking: &crate::retrieval::ScoredRanking| -> Vec<CaseDoc> {
        ranking
            .entries
            .iter()
            .map(|e| {
                let aug = &docs[&e.doc_id];
                let shared = tok
                    .tokenize(&aug.combined)
                    .into_iter()
                    .filter(|t| q_tokens.contains(t))
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect();
                CaseDoc {
                    doc_id: e.doc_id.clone(),
                    score: e.score,
                    grade: rel.grade(&e.doc_id),
                    augmentation: aug.augmentation.clone(),
                    augmented_text: aug.combined.clone(),
                    shared_tokens: shared,
                }
            })
            .collect()
    };
    let base = base_index.retrieve(&query.text, k);
    let after = aug_index.retrieve(&augmented_query.combined, k);
    Ok(CaseStudy {
        query_id: query_id.to_string(),
        raw_query: query.text.clone(),
        query_augmentation: q_aug,
        base_ndcg: ndcg_at_k(&base, &rel, k),
        ndcg: ndcg_at_k(&after, &rel, k),
        base_ranking: describe(&base),
        ranking: describe(&after),
    })
}

/// Rows of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    #[serde(rename = "Base")]
    Base,
    #[serde(rename = "Base-Q")]
    BaseQ,
    #[serde(rename = "Base-D")]
    BaseD,
    #[serde(rename = "Base-Q+Base-D")]
    BaseQBaseD,
    #[serde(rename = "RL-Q")]
    RlQ,
    #[serde(rename = "RL-D")]
    RlD,
    #[serde(rename = "RL-Q+RL-D")]
    RlQRlD,
    #[serde(rename = "RL-QD")]
    RlQd,
    #[serde(rename = "centering")]
    Centering,
    #[serde(rename = "group-norm")]
    GroupNorm,
    #[serde(rename = "batch-norm")]
    BatchNorm,
    #[serde(rename = "no-scale")]
    NoScale,
}

impl Arm {
    pub const ALL: [Arm; 12] = [
        Arm::Base,
        Arm::BaseQ,
        Arm::BaseD,
        Arm::BaseQBaseD,
        Arm::RlQ,
        Arm::RlD,
        Arm::RlQRlD,
        Arm::RlQd,
        Arm::Centering,
        Arm::GroupNorm,
        Arm::BatchNorm,
        Arm::NoScale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Base => "Base",
            Arm::BaseQ => "Base-Q",
            Arm::BaseD => "Base-D",
            Arm::BaseQBaseD => "Base-Q+Base-D",
            Arm::RlQ => "RL-Q",
            Arm::RlD => "RL-D",
            Arm::RlQRlD => "RL-Q+RL-D",
            Arm::RlQd => "RL-QD",
            Arm::Centering => "centering",
            Arm::GroupNorm => "group-norm",
            Arm::BatchNorm => "batch-norm",
            Arm::NoScale => "no-scale",
        }
    }

    pub fn parse(name: &str) -> Option<Arm> {
        Arm::ALL.into_iter().find(|a| a.name().eq_ignore_ascii_case(name))
    }

    /// Training configurations this arm needs, derived from `base`.
    fn runs(self, base: &TrainConfig) -> Vec<TrainConfig> {
        let with = |sides: TrainSides, mode: Option<AdvantageMode>, unscaled: bool| {
            let mut c = base.clone();
            c.sides = sides;
            if let Some(m) = mode {
                c.advantage.mode = m;
            }
            if unscaled {
                c.advantage = c.advantage.clone().unscaled();
            }
            c
        };
        match self {
            Arm::Base | Arm::BaseQ | Arm::BaseD | Arm::BaseQBaseD => vec![],
            Arm::RlQ => vec![with(TrainSides::QueryOnly, None, false)],
            Arm::RlD => vec![with(TrainSides::DocOnly, None, false)],
            Arm::RlQRlD => vec![
                with(TrainSides::QueryOnly, None, false),
                with(TrainSides::DocOnly, None, false),
            ],
            Arm::RlQd => vec![with(TrainSides::Both, None, false)],
            Arm::Centering => vec![with(TrainSides::Both, Some(AdvantageMode::Centering), false)],
            Arm::GroupNorm => vec![with(TrainSides::Both, Some(AdvantageMode::GroupNorm), false)],
            Arm::BatchNorm => vec![with(TrainSides::Both, Some(AdvantageMode::BatchNorm), false)],
            Arm::NoScale => vec![with(TrainSides::Both, None, true)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub arm: Arm,
    pub seed: u64,
    pub config_hash: String,
    pub ndcg: Option<f64>,
    pub hqd: Option<f64>,
    /// Mean amplified-variance share over training steps (trained arms only).
    pub amp_var: Option<f64>,
    pub same_sign: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub retriever: RetrieverKind,
    pub k: usize,
    pub seeds: Vec<u64>,
    pub cells: Vec<AblationCell>,
}

struct RunOutcome {
    policy: ToyPolicy,
    amp_var: f64,
    same_sign: f64,
}

fn run_training(config: &TrainConfig, dataset: &Dataset, extra: &[String]) -> Result<RunOutcome> {
    let ctx = TrainContext::new(config, dataset)?;
    let mut state = TrainState::new(config, dataset, extra)?;
    train(&mut state, &ctx, |r| log::debug!("seed {} step {}: reward {:.4}", config.seed, r.record.step, r.record.mean_reward))?;
    let n = state.history.len().max(1) as f64;
    Ok(RunOutcome {
        amp_var: state.history.iter().map(|r| r.amp_var).sum::<f64>() / n,
        same_sign: state.history.iter().map(|r| r.same_sign).sum::<f64>() / n,
        policy: state.policy,
    })
}

/// Evaluates every `arm` for every seed. `data(seed)` supplies the dataset
/// and the extra policy vocabulary for that seed; `base.seed` is overridden
/// per seed. A failing cell is recorded with its error and the grid continues.
pub fn ablation_grid<F>(base: &TrainConfig, arms: &[Arm], seeds: &[u64], data: F) -> Result<AblationGrid>
where
    F: Fn(u64) -> Result<(Dataset, Vec<String>)> + Sync,
{
    base.validate()?;
    let datasets: BTreeMap<u64, (Dataset, Vec<String>)> =
        seeds.iter().map(|&s| Ok((s, data(s)?))).collect::<Result<_>>()?;

    // distinct training runs, keyed by config hash
    let mut runs: BTreeMap<(u64, String), TrainConfig> = BTreeMap::new();
    for &seed in seeds {
        let seeded = TrainConfig {
            seed,
            ..base.clone()
        };
        for arm in arms {
            for c in arm.runs(&seeded) {
                runs.insert((seed, c.hash()), c);
            }
        }
    }
    let outcomes: BTreeMap<(u64, String), std::result::Result<RunOutcome, String>> = runs
        .into_par_iter()
        .map(|(key, cfg)| {
            let (ds, extra) = &datasets[&key.0];
            let out = run_training(&cfg, ds, extra).map_err(|e| e.to_string());
            (key, out)
        })
        .collect();

    let mut cells = Vec::new();
    for &seed in seeds {
        let (ds, extra) = &datasets[&seed];
        let seeded = TrainConfig {
            seed,
            ..base.clone()
        };
        let init = TrainState::new(&seeded, ds, extra).map(|s| s.policy);
        for &arm in arms {
            let run_cfgs = arm.runs(&seeded);
            let config_hash = if run_cfgs.is_empty() {
                config_hash(&(arm.name(), &seeded))
            } else {
                config_hash(&run_cfgs)
            };
            let mut cell = AblationCell {
                arm,
                seed,
                config_hash,
                ndcg: None,
                hqd: None,
                amp_var: None,
                same_sign: None,
                error: None,
            };
            let result = (|| -> std::result::Result<(), String> {
                let trained: Vec<&RunOutcome> = run_cfgs
                    .iter()
                    .map(|c| outcomes[&(seed, c.hash())].as_ref().map_err(Clone::clone))
                    .collect::<std::result::Result<_, _>>()?;
                let init = init.as_ref().map_err(|e| e.to_string())?;
                let identity = IdentityPolicy;
                let (qp, dp): (&dyn AugmentationPolicy, &dyn AugmentationPolicy) = match arm {
                    Arm::Base => (&identity, &identity),
                    Arm::BaseQ => (init, &identity),
                    Arm::BaseD => (&identity, init),
                    Arm::BaseQBaseD => (init, init),
                    Arm::RlQ => (&trained[0].policy, &identity),
                    Arm::RlD => (&identity, &trained[0].policy),
                    Arm::RlQRlD => (&trained[0].policy, &trained[1].policy),
                    _ => (&trained[0].policy, &trained[0].policy),
                };
                let eval = evaluate(qp, dp, ds, base.retriever, base.k).map_err(|e| e.to_string())?;
                let variant = Variant {
                    name: arm.name(),
                    query_policy: qp,
                    doc_policy: dp,
                };
                let hqd = hqd_report(&[variant], ds, base.retriever, base.hqd_epsilon, std::f64::consts::E)
                    .map_err(|e| e.to_string())?;
                cell.ndcg = Some(eval.mean_ndcg);
                cell.hqd = Some(hqd.rows[0].hqd);
                if !trained.is_empty() {
                    let n = trained.len() as f64;
                    cell.amp_var = Some(trained.iter().map(|t| t.amp_var).sum::<f64>() / n);
                    cell.same_sign = Some(trained.iter().map(|t| t.same_sign).sum::<f64>() / n);
                }
                Ok(())
            })();
            if let Err(e) = result {
                log::warn!("ablation cell {} seed {seed} failed: {e}", arm.name());
                cell.error = Some(e);
            }
            cells.push(cell);
        }
    }
    Ok(AblationGrid {
        retriever: base.retriever,
        k: base.k,
        seeds: seeds.to_vec(),
        cells,
    })
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

impl AblationGrid {
    pub fn cell(&self, arm: Arm, seed: u64) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.arm == arm && c.seed == seed)
    }

    pub fn arms(&self) -> Vec<Arm> {
        let mut seen = Vec::new();
        for c in &self.cells {
            if !seen.contains(&c.arm) {
                seen.push(c.arm);
            }
        }
        seen
    }

    /// Median NDCG over the seeds whose cell succeeded.
    pub fn median_ndcg(&self, arm: Arm) -> Option<f64> {
        let v: Vec<f64> = self.cells.iter().filter(|c| c.arm == arm).filter_map(|c| c.ndcg).collect();
        median(&v)
    }

    pub fn median_hqd(&self, arm: Arm) -> Option<f64> {
        let v: Vec<f64> = self.cells.iter().filter(|c| c.arm == arm).filter_map(|c| c.hqd).collect();
        median(&v)
    }

    /// Aligned text table: one row per arm, one NDCG column per seed, then medians.
    pub fn to_text_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "FAILED".into());
        let mut header = vec!["arm".to_string()];
        header.extend(self.seeds.iter().map(|s| format!("seed {s}")));
        header.extend(["median".into(), "H(Q,D)".into(), "hash".into()]);
        let mut rows = vec![header];
        for arm in self.arms() {
            let mut row = vec![arm.name().to_string()];
            let mut hash = String::new();
            for &s in &self.seeds {
                let cell = self.cell(arm, s);
                row.push(fmt(cell.and_then(|c| c.ndcg)));
                if hash.is_empty() {
                    hash = cell.map(|c| c.config_hash.clone()).unwrap_or_default();
                }
            }
            row.push(fmt(self.median_ndcg(arm)));
            row.push(fmt(self.median_hqd(arm)));
            row.push(hash);
            rows.push(row);
        }
        align(&rows)
    }
}

fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|i| rows.iter().filter_map(|r| r.get(i)).map(|c| c.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, c)| if i == 0 { format!("{c:<w$}", w = widths[i]) } else { format!("{c:>w$}", w = widths[i]) })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyRow {
    pub arm: Arm,
    pub amplified_variance: Option<f64>,
    pub same_sign: Option<f64>,
}

/// Training-time anomaly rates of the advantage arms, as medians over seeds.
pub fn anomaly_table(grid: &AblationGrid) -> Vec<AnomalyRow> {
    grid.arms()
        .into_iter()
        .filter(|a| matches!(a, Arm::Centering | Arm::GroupNorm | Arm::BatchNorm | Arm::NoScale | Arm::RlQd))
        .map(|arm| {
            let pick = |f: fn(&AblationCell) -> Option<f64>| {
                let v: Vec<f64> = grid.cells.iter().filter(|c| c.arm == arm).filter_map(f).collect();
                median(&v)
            };
            AnomalyRow {
                arm,
                amplified_variance: pick(|c| c.amp_var),
                same_sign: pick(|c| c.same_sign),
            }
        })
        .collect()
}

pub fn anomaly_text_table(rows: &[AnomalyRow]) -> String {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    let mut table = vec![vec!["arm".to_string(), "amplified_variance".into(), "same_sign".into()]];
    table.extend(
        rows.iter()
            .map(|r| vec![r.arm.name().to_string(), fmt(r.amplified_variance), fmt(r.same_sign)]),
    );
    align(&table)
}
