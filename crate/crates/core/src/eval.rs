//! Retrieval evaluation: embed the candidate pool and the queries, rank by
//! cosine similarity, and report R@1/R@5/R@10/MRR overall and per split
//! (language, condition count, OOD tags).
//!
//! Ranking is a brute-force full sort. A query's own condition products are
//! excluded from its candidate list; they are never positives.

use crate::catalog::{Catalog, ProductId};
use crate::encoder::{
    build_product_input, build_query_input, embed_for_retrieval, InputMode, ModelParams,
};
use crate::sampler::Query;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("k must be >= 1")]
    BadK,
    #[error("positives must be non-empty")]
    NoPositives,
    #[error("empty embedding store")]
    EmptyStore,
    #[error(transparent)]
    Encode(#[from] crate::encoder::EncodeError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Unit-norm embeddings keyed by product id, in ascending id order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    pub ids: Vec<ProductId>,
    pub vectors: Vec<Vec<f64>>,
}

impl EmbeddingStore {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Embed every product in the catalog with the given checkpoint parameters.
pub fn embed_pool(
    params: &ModelParams,
    catalog: &Catalog,
    mode: InputMode,
) -> Result<EmbeddingStore, EvalError> {
    let mut ids = Vec::with_capacity(catalog.products.len());
    let mut vectors = Vec::with_capacity(catalog.products.len());
    for p in &catalog.products {
        let input = build_product_input(p, mode, catalog.vocab.eos)?;
        vectors.push(embed_for_retrieval(params, &input)?);
        ids.push(p.id.clone());
    }
    Ok(EmbeddingStore { ids, vectors })
}

pub fn embed_query(
    params: &ModelParams,
    query: &Query,
    catalog: &Catalog,
    mode: InputMode,
) -> Result<Vec<f64>, EvalError> {
    let input = build_query_input(query, catalog, mode)?;
    Ok(embed_for_retrieval(params, &input)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    /// Candidate ids by descending cosine similarity, ties by ascending id.
    pub ranking: Vec<ProductId>,
}

/// Full sort of the store by similarity to the query embedding. Store
/// vectors are unit norm, so the dot product is the cosine. `exclude` drops
/// candidates (the query's own condition products) from the ranking.
pub fn rank(
    query_id: &str,
    query_embedding: &[f64],
    store: &EmbeddingStore,
    exclude: &BTreeSet<ProductId>,
) -> Result<RankedList, EvalError> {
    if store.is_empty() {
        return Err(EvalError::EmptyStore);
    }
    let mut scored: Vec<(usize, f64)> = store
        .ids
        .iter()
        .enumerate()
        .filter(|(_, id)| !exclude.contains(id))
        .map(|(i, _)| {
            let dot: f64 = store.vectors[i]
                .iter()
                .zip(query_embedding)
                .map(|(a, b)| a * b)
                .sum();
            (i, dot)
        })
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then_with(|| store.ids[a.0].cmp(&store.ids[b.0]))
    });
    Ok(RankedList {
        query_id: query_id.to_string(),
        ranking: scored.into_iter().map(|(i, _)| store.ids[i].clone()).collect(),
    })
}

/// 1 if any positive appears in the top k, else 0.
pub fn recall_at_k(
    ranking: &[ProductId],
    positives: &BTreeSet<ProductId>,
    k: usize,
) -> Result<u8, EvalError> {
    if k == 0 {
        return Err(EvalError::BadK);
    }
    if positives.is_empty() {
        return Err(EvalError::NoPositives);
    }
    Ok(ranking
        .iter()
        .take(k)
        .any(|id| positives.contains(id)) as u8)
}

/// Reciprocal rank of the first positive; 0 when no positive appears (only
/// possible on truncated rankings).
pub fn reciprocal_rank(ranking: &[ProductId], positives: &BTreeSet<ProductId>) -> f64 {
    for (i, id) in ranking.iter().enumerate() {
        if positives.contains(id) {
            return 1.0 / (i as f64 + 1.0);
        }
    }
    0.0
}

/// Mean reciprocal rank over aligned rankings and positives.
pub fn mrr(rankings: &[RankedList], positives: &BTreeMap<String, BTreeSet<ProductId>>) -> f64 {
    if rankings.is_empty() {
        return 0.0;
    }
    let sum: f64 = rankings
        .iter()
        .map(|r| {
            positives
                .get(&r.query_id)
                .map(|p| reciprocal_rank(&r.ranking, p))
                .unwrap_or(0.0)
        })
        .sum();
    sum / rankings.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub mrr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub n: usize,
    /// Omitted for empty splits.
    pub metrics: Option<MetricValues>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub splits: BTreeMap<String, SplitReport>,
    pub pool_size: usize,
    pub config_hash: String,
    pub checkpoint_hash: String,
}

impl MetricsReport {
    pub fn overall(&self) -> Option<&MetricValues> {
        self.splits.get("overall").and_then(|s| s.metrics.as_ref())
    }

    /// Aligned table mirroring the ablation column layout.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<28} {:>6} {:>8} {:>8} {:>8} {:>8}\n",
            "split", "n", "R@1", "R@5", "R@10", "MRR"
        ));
        for (name, rep) in &self.splits {
            match &rep.metrics {
                Some(m) => out.push_str(&format!(
                    "{:<28} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
                    name, rep.n, m.r_at_1, m.r_at_5, m.r_at_10, m.mrr
                )),
                None => out.push_str(&format!("{:<28} {:>6} {:>35}\n", name, rep.n, "-")),
            }
        }
        out
    }
}

/// Per-query evaluation rows, reusable across split aggregations.
struct QueryOutcome {
    hit1: u8,
    hit5: u8,
    hit10: u8,
    rr: f64,
}

fn aggregate(outcomes: &[&QueryOutcome]) -> Option<MetricValues> {
    if outcomes.is_empty() {
        return None;
    }
    let n = outcomes.len() as f64;
    Some(MetricValues {
        r_at_1: outcomes.iter().map(|o| o.hit1 as f64).sum::<f64>() / n,
        r_at_5: outcomes.iter().map(|o| o.hit5 as f64).sum::<f64>() / n,
        r_at_10: outcomes.iter().map(|o| o.hit10 as f64).sum::<f64>() / n,
        mrr: outcomes.iter().map(|o| o.rr).sum::<f64>() / n,
    })
}

/// Embed, rank and score a query set. Splits: `overall`, per language, per
/// condition count, plus one split per `ood:` tag present.
pub fn evaluate(
    params: &ModelParams,
    catalog: &Catalog,
    queries: &[Query],
    mode: InputMode,
    config_hash: &str,
    checkpoint_hash: &str,
) -> Result<MetricsReport, EvalError> {
    let store = embed_pool(params, catalog, mode)?;
    let mut outcomes: Vec<QueryOutcome> = Vec::with_capacity(queries.len());
    for q in queries {
        let emb = embed_query(params, q, catalog, mode)?;
        let exclude: BTreeSet<ProductId> =
            q.conditions.iter().map(|c| c.product_id.clone()).collect();
        let ranked = rank(&q.id, &emb, &store, &exclude)?;
        let positives: BTreeSet<ProductId> = q.positives.iter().cloned().collect();
        outcomes.push(QueryOutcome {
            hit1: recall_at_k(&ranked.ranking, &positives, 1)?,
            hit5: recall_at_k(&ranked.ranking, &positives, 5)?,
            hit10: recall_at_k(&ranked.ranking, &positives, 10)?,
            rr: reciprocal_rank(&ranked.ranking, &positives),
        });
    }

    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, q) in queries.iter().enumerate() {
        groups.entry("overall".into()).or_default().push(i);
        groups
            .entry(format!("language:{}", q.language))
            .or_default()
            .push(i);
        groups
            .entry(format!("conditions:{}", q.conditions.len()))
            .or_default()
            .push(i);
        for tag in &q.split_tags {
            if tag.starts_with("ood:") {
                groups.entry(tag.clone()).or_default().push(i);
            }
        }
    }
    let mut splits = BTreeMap::new();
    for (name, idx) in groups {
        let rows: Vec<&QueryOutcome> = idx.iter().map(|&i| &outcomes[i]).collect();
        splits.insert(
            name,
            SplitReport {
                n: rows.len(),
                metrics: aggregate(&rows),
            },
        );
    }
    if queries.is_empty() {
        splits.insert(
            "overall".into(),
            SplitReport {
                n: 0,
                metrics: None,
            },
        );
    }
    Ok(MetricsReport {
        splits,
        pool_size: store.len(),
        config_hash: config_hash.to_string(),
        checkpoint_hash: checkpoint_hash.to_string(),
    })
}

/// Analytic chance level for R@1 under random embeddings: the probability
/// that a uniformly ranked pool puts some positive first, averaged over
/// queries.
pub fn chance_r_at_1(queries: &[Query], pool_size: usize) -> f64 {
    if queries.is_empty() {
        return 0.0;
    }
    let sum: f64 = queries
        .iter()
        .map(|q| {
            let candidates = pool_size.saturating_sub(q.conditions.len()).max(1);
            q.positives.len() as f64 / candidates as f64
        })
        .sum();
    sum / queries.len() as f64
}

/// Two-sided exact binomial test that `hits` out of `n` is consistent with
/// hit probability `p`. Returns the p-value.
pub fn binomial_two_sided(hits: u64, n: u64, p: f64) -> f64 {
    use statrs::distribution::{Binomial, DiscreteCDF};
    if n == 0 {
        return 1.0;
    }
    let b = Binomial::new(p.clamp(0.0, 1.0), n).expect("valid binomial");
    let lower = b.cdf(hits);
    let upper = 1.0 - if hits == 0 { 0.0 } else { b.cdf(hits - 1) };
    (2.0 * lower.min(upper)).min(1.0)
}

/// Export embeddings as flat text vectors keyed by entity id.
pub fn save_embeddings(store: &EmbeddingStore, path: &Path) -> Result<(), EvalError> {
    let mut body = String::new();
    for (id, v) in store.ids.iter().zip(&store.vectors) {
        body.push_str(&id.0);
        for x in v {
            body.push(' ');
            body.push_str(&format!("{x:?}"));
        }
        body.push('\n');
    }
    crate::catalog::write_atomic(path, body.as_bytes())?;
    Ok(())
}
