//! Multi-condition query composition over a refined catalog: three sampling
//! strategies, rule-based filtering, dedup, stratified train/test splitting,
//! and out-of-distribution holdouts.
//!
//! All sampling is rejection-based. Each sampler draws the condition count
//! once and then retries the remaining choices internally, so the accepted
//! stream keeps the configured 2/3/4-condition mix even when per-count
//! acceptance rates differ.

use crate::catalog::{
    attribute_histogram, cosine, Catalog, CategoryId, Language, Product, ProductId,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error("sampling stalled: {attempts} consecutive rejected attempts")]
    Stalled { attempts: u64 },
    #[error("stratum {0} too small to split")]
    StratumTooSmall(String),
    #[error("test_fraction must be in [0, 1], got {0}")]
    BadFraction(f64),
    #[error("OOD split {0} has an empty test set")]
    EmptyOodSplit(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

/// One retrieval constraint: the target must match `attribute` of the
/// referenced product.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub product_id: ProductId,
    pub attribute: String,
}

/// A piece of the rendered instruction: literal tokens or a reference to the
/// image of the k-th condition product.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstructionSpan {
    Text(Vec<u32>),
    Image(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub conditions: Vec<Condition>,
    pub instruction: Vec<InstructionSpan>,
    /// Products matching every condition, ranked by mean feature similarity
    /// to the condition products (descending, ties by ascending id).
    pub positives: Vec<ProductId>,
    pub language: Language,
    pub category: CategoryId,
    pub country: String,
    #[serde(default)]
    pub split_tags: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Probabilities for 2, 3 and 4 conditions. Must sum to 1.
    pub condition_count_weights: [f64; 3],
    /// Exponent gamma for the `count^-gamma` down-weighting of frequent
    /// attributes.
    pub frequent_attribute_suppression: f64,
    /// Cap on the ranked positives kept per query.
    pub max_candidates_ranked: usize,
    /// Mix of conventional / attribute-uniform / high-similarity sampling.
    /// Must sum to 1.
    pub mix: [f64; 3],
    /// Probability that the remaining condition products are drawn from the
    /// first condition product's language.
    pub monolingual_bias: f64,
    /// Attributes whose values must be carried by images, never spelled in
    /// the instruction text.
    pub visual_attributes: BTreeSet<String>,
    pub vision_centric: bool,
    /// Probability a non-visual condition also spells its value in text.
    pub text_value_prob: f64,
    /// Neighborhood size for high-similarity pair picking.
    pub knn_k: usize,
    /// Internal retries per emitted query before a sampler reports rejection.
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            condition_count_weights: [0.75, 0.10, 0.15],
            frequent_attribute_suppression: 1.0,
            max_candidates_ranked: 50,
            mix: [0.8, 0.1, 0.1],
            monolingual_bias: 0.75,
            visual_attributes: ["color", "pattern", "shape"]
                .into_iter()
                .map(String::from)
                .collect(),
            vision_centric: true,
            text_value_prob: 0.8,
            knn_k: 5,
            max_attempts: 400,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let wsum: f64 = self.condition_count_weights.iter().sum();
        if (wsum - 1.0).abs() > 1e-9 {
            return Err(SamplerError::InvalidConfig(format!(
                "condition_count_weights sum to {wsum}, expected 1"
            )));
        }
        let msum: f64 = self.mix.iter().sum();
        if (msum - 1.0).abs() > 1e-9 {
            return Err(SamplerError::InvalidConfig(format!(
                "mix weights sum to {msum}, expected 1"
            )));
        }
        if self.condition_count_weights.iter().any(|w| *w < 0.0)
            || self.mix.iter().any(|w| *w < 0.0)
        {
            return Err(SamplerError::InvalidConfig("negative weight".into()));
        }
        if self.knn_k == 0 || self.max_attempts == 0 || self.max_candidates_ranked == 0 {
            return Err(SamplerError::InvalidConfig(
                "knn_k, max_attempts and max_candidates_ranked must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Catalog index: posting lists per (attribute, value), cached mean features,
// optional KNN table. A read-only view over a refined catalog.
// ---------------------------------------------------------------------------

pub struct CatalogIndex<'c> {
    pub catalog: &'c Catalog,
    posting: BTreeMap<(String, String), Vec<usize>>,
    mean_features: Vec<Vec<f64>>,
    knn: Option<Vec<Vec<usize>>>,
}

impl<'c> CatalogIndex<'c> {
    pub fn new(catalog: &'c Catalog) -> Self {
        let mut posting: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
        for (i, p) in catalog.products.iter().enumerate() {
            for (a, v) in &p.attributes {
                posting.entry((a.clone(), v.clone())).or_default().push(i);
            }
        }
        let mean_features = catalog.products.iter().map(|p| p.mean_feature()).collect();
        CatalogIndex {
            catalog,
            posting,
            mean_features,
            knn: None,
        }
    }

    /// Index with a precomputed k-nearest-neighbor table (cosine over mean
    /// features), needed by the high-similarity sampler.
    pub fn with_knn(catalog: &'c Catalog, k: usize) -> Self {
        let mut idx = Self::new(catalog);
        let n = catalog.products.len();
        let mut knn = Vec::with_capacity(n);
        for i in 0..n {
            let mut sims: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, cosine(&idx.mean_features[i], &idx.mean_features[j])))
                .collect();
            sims.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap()
                    .then_with(|| catalog.products[a.0].id.cmp(&catalog.products[b.0].id))
            });
            knn.push(sims.into_iter().take(k).map(|(j, _)| j).collect());
        }
        idx.knn = Some(knn);
        idx
    }

    pub fn mean_feature(&self, product_idx: usize) -> &[f64] {
        &self.mean_features[product_idx]
    }

    fn carriers(&self, attr: &str, value: &str) -> &[usize] {
        self.posting
            .get(&(attr.to_string(), value.to_string()))
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    /// Product indices satisfying every condition, excluding the condition
    /// products themselves. Posting-list intersection.
    pub fn recall(&self, conditions: &[Condition]) -> Vec<usize> {
        let mut lists: Vec<&[usize]> = Vec::with_capacity(conditions.len());
        let mut excluded = BTreeSet::new();
        for c in conditions {
            let Some(pi) = self.catalog.index_of(&c.product_id) else {
                return vec![];
            };
            excluded.insert(pi);
            let Some(value) = self.catalog.products[pi].attributes.get(&c.attribute) else {
                return vec![];
            };
            lists.push(self.carriers(&c.attribute, value));
        }
        lists.sort_by_key(|l| l.len());
        let Some((first, rest)) = lists.split_first() else {
            return vec![];
        };
        first
            .iter()
            .copied()
            .filter(|i| !excluded.contains(i))
            .filter(|i| rest.iter().all(|l| l.binary_search(i).is_ok()))
            .collect()
    }
}

/// Products matching every condition's attribute value, excluding the
/// condition products. Empty on invalid references.
pub fn recall_candidates(catalog: &Catalog, conditions: &[Condition]) -> Vec<ProductId> {
    let index = CatalogIndex::new(catalog);
    index
        .recall(conditions)
        .into_iter()
        .map(|i| catalog.products[i].id.clone())
        .collect()
}

/// Candidates sorted by mean cosine similarity to the condition products,
/// descending; ties broken by ascending product id.
pub fn rank_by_similarity(
    catalog: &Catalog,
    candidate_ids: &[ProductId],
    condition_product_ids: &[ProductId],
) -> Vec<ProductId> {
    let cond_feats: Vec<Vec<f64>> = condition_product_ids
        .iter()
        .filter_map(|id| catalog.product(id).map(|p| p.mean_feature()))
        .collect();
    let mut scored: Vec<(ProductId, f64)> = candidate_ids
        .iter()
        .filter_map(|id| catalog.product(id).map(|p| (id.clone(), p.mean_feature())))
        .map(|(id, f)| {
            let s = if cond_feats.is_empty() {
                0.0
            } else {
                cond_feats.iter().map(|c| cosine(&f, c)).sum::<f64>() / cond_feats.len() as f64
            };
            (id, s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    scored.into_iter().map(|(id, _)| id).collect()
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Outcome of one sampler invocation: an accepted query (or none) plus
/// attempt accounting for the acceptance statistics.
#[derive(Debug)]
pub struct SampleAttempt {
    pub query: Option<Query>,
    pub attempts: u32,
    pub reasons: BTreeMap<&'static str, u32>,
}

impl SampleAttempt {
    fn rejected(attempts: u32, reasons: BTreeMap<&'static str, u32>) -> Self {
        SampleAttempt {
            query: None,
            attempts,
            reasons,
        }
    }
}

fn weighted_index(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

fn draw_condition_count(rng: &mut ChaCha8Rng, cfg: &SamplerConfig) -> usize {
    2 + weighted_index(rng, &cfg.condition_count_weights)
}

/// `count^-gamma` weights over an attribute list.
fn suppression_weights(
    attrs: &[&String],
    counts: &BTreeMap<String, usize>,
    gamma: f64,
) -> Vec<f64> {
    attrs
        .iter()
        .map(|a| {
            let c = counts.get(*a).copied().unwrap_or(1).max(1);
            (c as f64).powf(-gamma)
        })
        .collect()
}

struct SamplerCtx<'c> {
    index: &'c CatalogIndex<'c>,
    cfg: &'c SamplerConfig,
    attr_counts: BTreeMap<String, usize>,
    /// Product indices with at least one attribute, per language and overall.
    usable: Vec<usize>,
    usable_by_lang: BTreeMap<Language, Vec<usize>>,
    /// Distinct (attribute, value) pairs across all tables.
    table_pairs: Vec<(String, String)>,
}

impl<'c> SamplerCtx<'c> {
    fn new(index: &'c CatalogIndex<'c>, cfg: &'c SamplerConfig) -> Self {
        let catalog = index.catalog;
        let attr_counts = attribute_histogram(catalog);
        let mut usable = Vec::new();
        let mut usable_by_lang: BTreeMap<Language, Vec<usize>> = BTreeMap::new();
        for (i, p) in catalog.products.iter().enumerate() {
            if !p.attributes.is_empty() {
                usable.push(i);
                usable_by_lang.entry(p.language).or_default().push(i);
            }
        }
        let mut pairs = BTreeSet::new();
        for t in catalog.tables.values() {
            for (a, vs) in &t.attributes {
                for v in vs {
                    pairs.insert((a.clone(), v.clone()));
                }
            }
        }
        SamplerCtx {
            index,
            cfg,
            attr_counts,
            usable,
            usable_by_lang,
            table_pairs: pairs.into_iter().collect(),
        }
    }

    fn product(&self, i: usize) -> &Product {
        &self.index.catalog.products[i]
    }

    /// Pool for follow-up condition products given the anchor language.
    fn follow_pool(&self, lang: Language, rng: &mut ChaCha8Rng) -> &[usize] {
        if rng.gen_range(0.0..1.0) < self.cfg.monolingual_bias {
            if let Some(pool) = self.usable_by_lang.get(&lang) {
                if pool.len() > 4 {
                    return pool;
                }
            }
        }
        &self.usable
    }

    /// Choose `count` distinct attributes of `seed`, suppression-weighted,
    /// and anchor each at another carrier of the seed's value. The seed then
    /// matches every condition, so recall is never empty. Returns None when
    /// the seed lacks attributes or distinct carriers.
    fn seed_anchored_conditions(
        &self,
        seed_idx: usize,
        count: usize,
        rng: &mut ChaCha8Rng,
    ) -> Option<Vec<(usize, String)>> {
        let seed = self.product(seed_idx);
        if seed.attributes.len() < count {
            return None;
        }
        let mut pool: Vec<&String> = seed.attributes.keys().collect();
        let mut chosen: Vec<String> = Vec::with_capacity(count);
        for _ in 0..count {
            let w = suppression_weights(
                &pool,
                &self.attr_counts,
                self.cfg.frequent_attribute_suppression,
            );
            let k = weighted_index(rng, &w);
            chosen.push(pool.remove(k).clone());
        }
        let mut used = vec![seed_idx];
        let mut conds = Vec::with_capacity(count);
        let prefer_lang = rng.gen_range(0.0..1.0) < self.cfg.monolingual_bias;
        for attr in chosen {
            let value = &seed.attributes[&attr];
            let carriers: Vec<usize> = self
                .index
                .carriers(&attr, value)
                .iter()
                .copied()
                .filter(|i| !used.contains(i))
                .collect();
            if carriers.is_empty() {
                return None;
            }
            let lang_carriers: Vec<usize> = if prefer_lang {
                carriers
                    .iter()
                    .copied()
                    .filter(|&i| self.product(i).language == seed.language)
                    .collect()
            } else {
                vec![]
            };
            let pick_from = if lang_carriers.is_empty() { &carriers } else { &lang_carriers };
            let anchor = pick_from[rng.gen_range(0..pick_from.len())];
            used.push(anchor);
            conds.push((anchor, attr));
        }
        Some(conds)
    }

    /// Pick an attribute carried by the product, down-weighting globally
    /// frequent names.
    fn pick_attribute(&self, product: &Product, rng: &mut ChaCha8Rng) -> Option<String> {
        let attrs: Vec<&String> = product.attributes.keys().collect();
        if attrs.is_empty() {
            return None;
        }
        let w = suppression_weights(
            &attrs,
            &self.attr_counts,
            self.cfg.frequent_attribute_suppression,
        );
        Some(attrs[weighted_index(rng, &w)].clone())
    }

    /// Inequality constraint: two conditions may share an attribute name only
    /// with differing values; identical (attribute, value) pairs are
    /// redundant and rejected.
    fn violates_inequality(&self, conditions: &[(usize, String)]) -> bool {
        for i in 0..conditions.len() {
            for j in i + 1..conditions.len() {
                if conditions[i].1 == conditions[j].1 {
                    let vi = self.product(conditions[i].0).attributes.get(&conditions[i].1);
                    let vj = self.product(conditions[j].0).attributes.get(&conditions[j].1);
                    if vi == vj {
                        return true;
                    }
                }
            }
        }
        false
    }

    /// Recall, rank, cap, and assemble the query. `guaranteed` is forced into
    /// the positives even if the cap would drop it.
    fn finish(
        &self,
        cond_idx: &[(usize, String)],
        guaranteed: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Option<Query> {
        let conditions: Vec<Condition> = cond_idx
            .iter()
            .map(|(i, a)| Condition {
                product_id: self.product(*i).id.clone(),
                attribute: a.clone(),
            })
            .collect();
        let recalled = self.index.recall(&conditions);
        if recalled.is_empty() {
            return None;
        }
        if let Some(g) = guaranteed {
            debug_assert!(recalled.contains(&g), "guaranteed positive not recalled");
        }

        // rank by mean similarity to the condition products
        let cond_feats: Vec<&[f64]> = cond_idx
            .iter()
            .map(|(i, _)| self.index.mean_feature(*i))
            .collect();
        let mut scored: Vec<(usize, f64)> = recalled
            .iter()
            .map(|&i| {
                let f = self.index.mean_feature(i);
                let s = cond_feats.iter().map(|c| cosine(f, c)).sum::<f64>()
                    / cond_feats.len() as f64;
                (i, s)
            })
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap()
                .then_with(|| self.product(a.0).id.cmp(&self.product(b.0).id))
        });
        let mut positives: Vec<usize> = scored
            .iter()
            .take(self.cfg.max_candidates_ranked)
            .map(|(i, _)| *i)
            .collect();
        if let Some(g) = guaranteed {
            if !positives.contains(&g) {
                positives.push(g);
            }
        }

        let anchor = self.product(cond_idx[0].0);
        let language = anchor.language;
        let instruction = build_instruction(self, cond_idx, language, rng);
        Some(Query {
            id: String::new(), // assigned by compose_query_set
            conditions,
            instruction,
            positives: positives
                .into_iter()
                .map(|i| self.product(i).id.clone())
                .collect(),
            language,
            category: anchor.category.clone(),
            country: anchor.country.clone(),
            split_tags: BTreeSet::new(),
        })
    }
}

fn bump(reasons: &mut BTreeMap<&'static str, u32>, key: &'static str) {
    *reasons.entry(key).or_insert(0) += 1;
}

/// Per-language filler words for the instruction templates. Rendering goes
/// through the language's token partition, so the same word maps to different
/// ids per language.
const TEMPLATE_VARIANTS: &[&[&str]] = &[
    &["find", "a", "product"],
    &["search", "for", "item"],
    &["show", "matching", "product"],
];

fn build_instruction(
    ctx: &SamplerCtx,
    cond_idx: &[(usize, String)],
    lang: Language,
    rng: &mut ChaCha8Rng,
) -> Vec<InstructionSpan> {
    let vocab = &ctx.index.catalog.vocab;
    let t = |s: &str| vocab.token_for(lang, s);
    // vision-centric rule: tokens of visual condition values must not appear
    // in the text, so spelled values avoid them (hash collisions included)
    let forbidden: BTreeSet<u32> = cond_idx
        .iter()
        .filter(|(_, attr)| ctx.cfg.visual_attributes.contains(attr))
        .filter_map(|(pi, attr)| ctx.product(*pi).attributes.get(attr))
        .map(|v| t(v))
        .collect();
    let variant = TEMPLATE_VARIANTS[rng.gen_range(0..TEMPLATE_VARIANTS.len())];
    let mut spans = vec![InstructionSpan::Text(
        variant.iter().map(|w| t(w)).collect(),
    )];
    for (k, (pi, attr)) in cond_idx.iter().enumerate() {
        let product = ctx.product(*pi);
        let value = &product.attributes[attr];
        let visual = ctx.cfg.visual_attributes.contains(attr);
        let spell_value = !visual && rng.gen_range(0.0..1.0) < ctx.cfg.text_value_prob;
        let mut head = vec![t("with"), t("same"), t(attr)];
        if spell_value && !forbidden.contains(&t(value)) {
            head.push(t(value));
        }
        head.push(t("as"));
        spans.push(InstructionSpan::Text(head));
        spans.push(InstructionSpan::Image(k));
    }
    spans
}

/// Conventional uniform sampling: random condition products, suppressed
/// attribute choice, recall + similarity ranking. The condition count is
/// drawn once; product/attribute choices are retried internally.
pub fn conventional_uniform_sample(
    index: &CatalogIndex,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> SampleAttempt {
    let ctx = SamplerCtx::new(index, cfg);
    conventional_with_ctx(&ctx, cfg, rng)
}

fn conventional_with_ctx(
    ctx: &SamplerCtx,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> SampleAttempt {
    let mut reasons = BTreeMap::new();
    let count = draw_condition_count(rng, cfg);
    if ctx.usable.len() < count + 1 {
        bump(&mut reasons, "too_few_products");
        return SampleAttempt::rejected(1, reasons);
    }
    for attempt in 1..=cfg.max_attempts as u32 {
        // Independent anchor draws match coverage thin out fast as the
        // condition count grows; past half the budget, switch to anchoring
        // all conditions on one seed product's values so a positive exists
        // by construction and the accepted stream keeps the count mix.
        if attempt as usize * 2 > cfg.max_attempts {
            let seed_idx = ctx.usable[rng.gen_range(0..ctx.usable.len())];
            let Some(conds) = ctx.seed_anchored_conditions(seed_idx, count, rng) else {
                bump(&mut reasons, "no_carrier");
                continue;
            };
            match ctx.finish(&conds, Some(seed_idx), rng) {
                Some(q) => {
                    return SampleAttempt {
                        query: Some(q),
                        attempts: attempt,
                        reasons,
                    }
                }
                None => {
                    bump(&mut reasons, "empty_recall");
                    continue;
                }
            }
        }
        let first = ctx.usable[rng.gen_range(0..ctx.usable.len())];
        let lang = ctx.product(first).language;
        let mut picked = vec![first];
        let mut guard = 0;
        while picked.len() < count && guard < 64 {
            guard += 1;
            let pool = ctx.follow_pool(lang, rng);
            let cand = pool[rng.gen_range(0..pool.len())];
            if !picked.contains(&cand) {
                picked.push(cand);
            }
        }
        if picked.len() < count {
            bump(&mut reasons, "too_few_products");
            continue;
        }
        let mut conds: Vec<(usize, String)> = Vec::with_capacity(count);
        let mut ok = true;
        for &pi in &picked {
            match ctx.pick_attribute(ctx.product(pi), rng) {
                Some(a) => conds.push((pi, a)),
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            bump(&mut reasons, "no_attribute");
            continue;
        }
        if ctx.violates_inequality(&conds) {
            bump(&mut reasons, "duplicate_attr_value");
            continue;
        }
        match ctx.finish(&conds, None, rng) {
            Some(q) => {
                return SampleAttempt {
                    query: Some(q),
                    attempts: attempt,
                    reasons,
                }
            }
            None => {
                bump(&mut reasons, "empty_recall");
            }
        }
    }
    SampleAttempt::rejected(cfg.max_attempts as u32, reasons)
}

/// Attribute-uniform sampling: the first condition starts from a uniformly
/// chosen (attribute, value) table pair, lifting the long-tail attributes;
/// remaining conditions follow the conventional scheme.
pub fn attribute_uniform_sample(
    index: &CatalogIndex,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> SampleAttempt {
    let ctx = SamplerCtx::new(index, cfg);
    attribute_uniform_with_ctx(&ctx, cfg, rng)
}

fn attribute_uniform_with_ctx(
    ctx: &SamplerCtx,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> SampleAttempt {
    let mut reasons = BTreeMap::new();
    let count = draw_condition_count(rng, cfg);
    if ctx.table_pairs.is_empty() || ctx.usable.len() < count + 1 {
        bump(&mut reasons, "too_few_products");
        return SampleAttempt::rejected(1, reasons);
    }
    for attempt in 1..=cfg.max_attempts as u32 {
        let (attr, value) = &ctx.table_pairs[rng.gen_range(0..ctx.table_pairs.len())];
        let carriers = ctx.index.carriers(attr, value);
        if carriers.is_empty() {
            bump(&mut reasons, "no_carrier");
            continue;
        }
        let first = carriers[rng.gen_range(0..carriers.len())];

        // guaranteed phase: seed on another carrier of the same pair and
        // anchor the remaining conditions on the seed's values
        if attempt as usize * 2 > cfg.max_attempts {
            let others: Vec<usize> = carriers.iter().copied().filter(|&i| i != first).collect();
            if others.is_empty() {
                bump(&mut reasons, "no_carrier");
                continue;
            }
            let seed_idx = others[rng.gen_range(0..others.len())];
            let seed = ctx.product(seed_idx);
            let extra_attrs: Vec<&String> =
                seed.attributes.keys().filter(|a| *a != attr).collect();
            if extra_attrs.len() + 1 < count {
                bump(&mut reasons, "no_attribute");
                continue;
            }
            let mut conds: Vec<(usize, String)> = vec![(first, attr.clone())];
            let mut used = vec![seed_idx, first];
            let mut pool = extra_attrs;
            let mut ok = true;
            while conds.len() < count {
                let w = suppression_weights(
                    &pool,
                    &ctx.attr_counts,
                    cfg.frequent_attribute_suppression,
                );
                let k = weighted_index(rng, &w);
                let a = pool.remove(k);
                let v = &seed.attributes[a];
                let anchors: Vec<usize> = ctx
                    .index
                    .carriers(a, v)
                    .iter()
                    .copied()
                    .filter(|i| !used.contains(i))
                    .collect();
                if anchors.is_empty() {
                    if pool.is_empty() {
                        ok = false;
                        break;
                    }
                    continue;
                }
                let anchor = anchors[rng.gen_range(0..anchors.len())];
                used.push(anchor);
                conds.push((anchor, a.clone()));
            }
            if !ok || conds.len() < count {
                bump(&mut reasons, "no_carrier");
                continue;
            }
            if ctx.violates_inequality(&conds) {
                bump(&mut reasons, "duplicate_attr_value");
                continue;
            }
            // the seed matches the shared pair and all its own values
            match ctx.finish(&conds, Some(seed_idx), rng) {
                Some(q) => {
                    return SampleAttempt {
                        query: Some(q),
                        attempts: attempt,
                        reasons,
                    }
                }
                None => {
                    bump(&mut reasons, "empty_recall");
                    continue;
                }
            }
        }

        let lang = ctx.product(first).language;
        let mut conds: Vec<(usize, String)> = vec![(first, attr.clone())];
        let mut picked = vec![first];
        let mut ok = true;
        let mut guard = 0;
        while conds.len() < count {
            guard += 1;
            if guard > 64 {
                ok = false;
                break;
            }
            let pool = ctx.follow_pool(lang, rng);
            let cand = pool[rng.gen_range(0..pool.len())];
            if picked.contains(&cand) {
                continue;
            }
            match ctx.pick_attribute(ctx.product(cand), rng) {
                Some(a) => {
                    picked.push(cand);
                    conds.push((cand, a));
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            bump(&mut reasons, "no_attribute");
            continue;
        }
        if ctx.violates_inequality(&conds) {
            bump(&mut reasons, "duplicate_attr_value");
            continue;
        }
        match ctx.finish(&conds, None, rng) {
            Some(q) => {
                return SampleAttempt {
                    query: Some(q),
                    attempts: attempt,
                    reasons,
                }
            }
            None => bump(&mut reasons, "empty_recall"),
        }
    }
    SampleAttempt::rejected(cfg.max_attempts as u32, reasons)
}

/// High-similarity pair sampling: take a product A and a nearest neighbor B,
/// derive conditions from the attributes where they differ (valued at B,
/// anchored at another carrier of B's value) plus attributes they share
/// (anchored at A), so B is guaranteed to satisfy every condition.
pub fn high_similarity_sample(
    catalog: &Catalog,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> SampleAttempt {
    let index = CatalogIndex::with_knn(catalog, cfg.knn_k);
    let ctx = SamplerCtx::new(&index, cfg);
    high_similarity_with_ctx(&ctx, cfg, rng)
}

fn high_similarity_with_ctx(
    ctx: &SamplerCtx,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> SampleAttempt {
    let mut reasons = BTreeMap::new();
    let knn = ctx
        .index
        .knn
        .as_ref()
        .expect("high-similarity sampling needs an index built with_knn");
    let count = draw_condition_count(rng, cfg);
    if ctx.usable.len() < count + 2 {
        bump(&mut reasons, "too_few_products");
        return SampleAttempt::rejected(1, reasons);
    }
    for attempt in 1..=cfg.max_attempts as u32 {
        let a_idx = ctx.usable[rng.gen_range(0..ctx.usable.len())];
        let neighbors = &knn[a_idx];
        if neighbors.is_empty() {
            bump(&mut reasons, "no_neighbor");
            continue;
        }
        let b_idx = neighbors[rng.gen_range(0..neighbors.len().min(cfg.knn_k))];
        let a = ctx.product(a_idx);
        let b = ctx.product(b_idx);

        let mut diff: Vec<&String> = Vec::new();
        let mut shared: Vec<&String> = Vec::new();
        for (name, av) in &a.attributes {
            if let Some(bv) = b.attributes.get(name) {
                if av == bv {
                    shared.push(name);
                } else {
                    diff.push(name);
                }
            }
        }
        if diff.is_empty() {
            bump(&mut reasons, "identical_pair");
            continue;
        }
        // at least one differing attribute, the rest filled from shared ones
        let d_take = count
            .saturating_sub(shared.len())
            .max(1)
            .min(diff.len())
            .min(count);
        let s_take = count - d_take;
        if s_take > shared.len() {
            bump(&mut reasons, "too_few_attributes");
            continue;
        }

        // differing attributes, frequency-suppressed, without replacement
        let mut diff_pool = diff.clone();
        let mut chosen_diff: Vec<String> = Vec::new();
        for _ in 0..d_take {
            let w = suppression_weights(
                &diff_pool,
                &ctx.attr_counts,
                cfg.frequent_attribute_suppression,
            );
            let k = weighted_index(rng, &w);
            chosen_diff.push(diff_pool.remove(k).clone());
        }
        let mut shared_pool = shared.clone();
        let mut chosen_shared: Vec<String> = Vec::new();
        for _ in 0..s_take {
            let k = rng.gen_range(0..shared_pool.len());
            chosen_shared.push(shared_pool.remove(k).clone());
        }

        // anchor each differing condition at a carrier of B's value other
        // than B itself (B must stay retrievable as a positive)
        let mut conds: Vec<(usize, String)> = Vec::new();
        let mut used = vec![a_idx, b_idx];
        let mut ok = true;
        for attr in &chosen_diff {
            let bv = &b.attributes[attr];
            let carriers: Vec<usize> = ctx
                .index
                .carriers(attr, bv)
                .iter()
                .copied()
                .filter(|i| !used.contains(i))
                .collect();
            if carriers.is_empty() {
                ok = false;
                break;
            }
            let anchor = carriers[rng.gen_range(0..carriers.len())];
            used.push(anchor);
            conds.push((anchor, attr.clone()));
        }
        if !ok {
            bump(&mut reasons, "no_carrier");
            continue;
        }
        for attr in &chosen_shared {
            conds.push((a_idx, attr.clone()));
        }
        if ctx.violates_inequality(&conds) {
            bump(&mut reasons, "duplicate_attr_value");
            continue;
        }
        match ctx.finish(&conds, Some(b_idx), rng) {
            Some(q) => {
                return SampleAttempt {
                    query: Some(q),
                    attempts: attempt,
                    reasons,
                }
            }
            None => bump(&mut reasons, "empty_recall"),
        }
    }
    SampleAttempt::rejected(cfg.max_attempts as u32, reasons)
}

// ---------------------------------------------------------------------------
// Automated filtering
// ---------------------------------------------------------------------------

/// Machine-readable rejection reasons for [`auto_filter`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterReason {
    /// An attribute named by a condition is missing from the instruction text.
    Omission,
    /// A visual attribute is spelled out in text or lacks an image span.
    NonVisual,
    /// Some positive fails a condition, or structural invariants are broken.
    Inaccurate,
}

pub fn auto_filter(
    query: &Query,
    catalog: &Catalog,
    cfg: &SamplerConfig,
) -> Result<(), FilterReason> {
    let index = CatalogIndex::new(catalog);
    auto_filter_with_index(query, &index, cfg)
}

pub fn auto_filter_with_index(
    query: &Query,
    index: &CatalogIndex,
    cfg: &SamplerConfig,
) -> Result<(), FilterReason> {
    let catalog = index.catalog;
    let vocab = &catalog.vocab;
    let text_tokens: BTreeSet<u32> = query
        .instruction
        .iter()
        .filter_map(|s| match s {
            InstructionSpan::Text(toks) => Some(toks.iter().copied()),
            InstructionSpan::Image(_) => None,
        })
        .flatten()
        .collect();
    let image_refs: BTreeSet<usize> = query
        .instruction
        .iter()
        .filter_map(|s| match s {
            InstructionSpan::Image(k) => Some(*k),
            InstructionSpan::Text(_) => None,
        })
        .collect();

    // (1) non-omission: every condition's attribute name appears in text
    for c in &query.conditions {
        let tok = vocab.token_for(query.language, &c.attribute);
        if !text_tokens.contains(&tok) {
            return Err(FilterReason::Omission);
        }
    }

    // (2) vision-centricity: visual attribute values ride on image spans
    if cfg.vision_centric {
        for (k, c) in query.conditions.iter().enumerate() {
            if !cfg.visual_attributes.contains(&c.attribute) {
                continue;
            }
            if !image_refs.contains(&k) {
                return Err(FilterReason::NonVisual);
            }
            if let Some(p) = catalog.product(&c.product_id) {
                if let Some(value) = p.attributes.get(&c.attribute) {
                    let vtok = vocab.token_for(query.language, value);
                    if text_tokens.contains(&vtok) {
                        return Err(FilterReason::NonVisual);
                    }
                }
            }
        }
    }

    // (3) accuracy: structure plus re-check of every positive against recall
    if query.positives.is_empty() || query.conditions.len() < 2 || query.conditions.len() > 4 {
        return Err(FilterReason::Inaccurate);
    }
    let recalled: BTreeSet<usize> = index.recall(&query.conditions).into_iter().collect();
    for pid in &query.positives {
        match catalog.index_of(pid) {
            Some(i) if recalled.contains(&i) => {}
            _ => return Err(FilterReason::Inaccurate),
        }
    }
    let cond_ids: BTreeSet<&ProductId> = query.conditions.iter().map(|c| &c.product_id).collect();
    if query.positives.iter().any(|p| cond_ids.contains(p)) {
        return Err(FilterReason::Inaccurate);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Composition
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MixStats {
    pub emitted: u64,
    pub attempts: u64,
    pub rejected: u64,
    pub rejection_reasons: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerStats {
    pub per_sampler: BTreeMap<String, MixStats>,
    pub filter_rejected: BTreeMap<String, u64>,
    pub dedup_dropped: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuerySet {
    pub queries: Vec<Query>,
    pub stats: SamplerStats,
    pub seed: u64,
}

const SAMPLER_NAMES: [&str; 3] = ["conventional", "attribute_uniform", "high_similarity"];
/// Consecutive fully-rejected compose attempts before the catalog is declared
/// degenerate (acceptance below 0.1% over the window).
const STALL_WINDOW: u64 = 5000;

/// Mix the three samplers, filter, dedup, and collect acceptance statistics.
pub fn compose_query_set(
    catalog: &Catalog,
    cfg: &SamplerConfig,
    target_count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<QuerySet, SamplerError> {
    cfg.validate()?;
    if target_count == 0 {
        return Err(SamplerError::InvalidConfig("target_count must be >= 1".into()));
    }
    let index = CatalogIndex::with_knn(catalog, cfg.knn_k);
    let ctx = SamplerCtx::new(&index, cfg);

    let mut stats = SamplerStats::default();
    for name in SAMPLER_NAMES {
        stats.per_sampler.insert(name.to_string(), MixStats::default());
    }
    let mut queries: Vec<Query> = Vec::with_capacity(target_count);
    let mut seen_keys: BTreeSet<String> = BTreeSet::new();
    let mut consecutive_failures: u64 = 0;

    while queries.len() < target_count {
        if consecutive_failures >= STALL_WINDOW {
            return Err(SamplerError::Stalled {
                attempts: consecutive_failures,
            });
        }
        let which = weighted_index(rng, &cfg.mix);
        let name = SAMPLER_NAMES[which];
        let attempt = match which {
            0 => conventional_with_ctx(&ctx, cfg, rng),
            1 => attribute_uniform_with_ctx(&ctx, cfg, rng),
            _ => high_similarity_with_ctx(&ctx, cfg, rng),
        };
        let entry = stats.per_sampler.get_mut(name).unwrap();
        entry.attempts += attempt.attempts as u64;
        for (r, n) in &attempt.reasons {
            *entry.rejection_reasons.entry((*r).to_string()).or_insert(0) += *n as u64;
        }
        let Some(mut query) = attempt.query else {
            entry.rejected += 1;
            consecutive_failures += 1;
            continue;
        };
        if let Err(reason) = auto_filter_with_index(&query, &index, cfg) {
            *stats
                .filter_rejected
                .entry(format!("{reason:?}").to_lowercase())
                .or_insert(0) += 1;
            consecutive_failures += 1;
            continue;
        }
        let key = dedup_key(&query, catalog);
        if !seen_keys.insert(key) {
            stats.dedup_dropped += 1;
            consecutive_failures += 1;
            continue;
        }
        query.id = format!("q-{:06}", queries.len());
        entry.emitted += 1;
        consecutive_failures = 0;
        queries.push(query);
    }

    Ok(QuerySet {
        queries,
        stats,
        seed: cfg.seed,
    })
}

/// Dedup key: the multiset of (attribute, value) constraints plus the
/// positive set. Anchor products and template variants don't distinguish
/// queries.
fn dedup_key(query: &Query, catalog: &Catalog) -> String {
    let mut pairs: Vec<String> = query
        .conditions
        .iter()
        .map(|c| {
            let v = catalog
                .product(&c.product_id)
                .and_then(|p| p.attributes.get(&c.attribute))
                .cloned()
                .unwrap_or_default();
            format!("{}={}", c.attribute, v)
        })
        .collect();
    pairs.sort();
    let mut pos: Vec<&str> = query.positives.iter().map(|p| p.0.as_str()).collect();
    pos.sort();
    format!("{}|{}", pairs.join(","), pos.join(","))
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

/// Stratification key used by [`split_train_test`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strata {
    LanguageAndCategory,
    Language,
    Category,
    /// Degenerate single stratum: a plain random split.
    Single,
}

fn stratum_key(q: &Query, strata: Strata) -> String {
    match strata {
        Strata::LanguageAndCategory => format!("{}|{}", q.language, q.category),
        Strata::Language => q.language.to_string(),
        Strata::Category => q.category.to_string(),
        Strata::Single => "all".to_string(),
    }
}

/// Proportional stratified split. Test quotas are apportioned by largest
/// remainder so every stratum's test share tracks `test_fraction`.
pub fn split_train_test(
    queries: &[Query],
    test_fraction: f64,
    strata: Strata,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Query>, Vec<Query>), SamplerError> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(SamplerError::BadFraction(test_fraction));
    }
    let total_test = (test_fraction * queries.len() as f64).round() as usize;
    if total_test == 0 {
        let train = queries
            .iter()
            .cloned()
            .map(|mut q| {
                q.split_tags.insert("train".into());
                q
            })
            .collect();
        return Ok((train, Vec::new()));
    }

    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, q) in queries.iter().enumerate() {
        groups.entry(stratum_key(q, strata)).or_default().push(i);
    }
    if test_fraction < 1.0 {
        for (key, members) in &groups {
            if members.len() < 2 {
                return Err(SamplerError::StratumTooSmall(key.clone()));
            }
        }
    }

    // largest-remainder apportionment of the test quota
    let mut quotas: Vec<(String, usize, f64)> = groups
        .iter()
        .map(|(k, m)| {
            let exact = test_fraction * m.len() as f64;
            (k.clone(), exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = quotas.iter().map(|(_, q, _)| *q).sum();
    let mut leftover = total_test.saturating_sub(assigned);
    quotas.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then_with(|| a.0.cmp(&b.0)));
    for q in quotas.iter_mut() {
        if leftover == 0 {
            break;
        }
        if q.1 < groups[&q.0].len() {
            q.1 += 1;
            leftover -= 1;
        }
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    let quota_map: BTreeMap<String, usize> = quotas.into_iter().map(|(k, q, _)| (k, q)).collect();
    for (key, mut members) in groups {
        // Fisher-Yates on the stratum, then take the quota
        for i in (1..members.len()).rev() {
            let j = rng.gen_range(0..=i);
            members.swap(i, j);
        }
        let quota = quota_map[&key].min(members.len());
        for (pos, idx) in members.into_iter().enumerate() {
            let mut q = queries[idx].clone();
            if pos < quota {
                q.split_tags.insert("test".into());
                test.push(q);
            } else {
                q.split_tags.insert("train".into());
                train.push(q);
            }
        }
    }
    train.sort_by(|a, b| a.id.cmp(&b.id));
    test.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((train, test))
}

/// What to hold out for the OOD protocol.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OodSpec {
    pub languages: Vec<Language>,
    pub categories: Vec<String>,
    pub attributes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodSplit {
    pub name: String,
    /// Queries safe to train on: nothing in them touches the held-out value.
    pub train: Vec<Query>,
    /// Queries entirely inside the held-out value (language/category), or
    /// conditioning on the held-out attribute.
    pub test: Vec<Query>,
}

fn query_products<'q>(q: &'q Query) -> impl Iterator<Item = &'q ProductId> {
    q.conditions
        .iter()
        .map(|c| &c.product_id)
        .chain(q.positives.iter())
}

/// Build one train/test pair per held-out value. Training excludes every
/// query touching the value; the OOD test keeps only queries entirely inside
/// it. Errors if any holdout yields an empty test set.
pub fn make_ood_splits(
    queries: &[Query],
    catalog: &Catalog,
    spec: &OodSpec,
) -> Result<Vec<OodSplit>, SamplerError> {
    let mut out = Vec::new();
    let lang_of = |pid: &ProductId| catalog.product(pid).map(|p| p.language);
    let cat_of = |pid: &ProductId| catalog.product(pid).map(|p| p.category.clone());

    for &lang in &spec.languages {
        let name = format!("language:{lang}");
        let mut train = Vec::new();
        let mut test = Vec::new();
        for q in queries {
            let touches = query_products(q).any(|pid| lang_of(pid) == Some(lang));
            let all_in = query_products(q).all(|pid| lang_of(pid) == Some(lang));
            if all_in {
                let mut q = q.clone();
                q.split_tags.insert(format!("ood:{name}"));
                test.push(q);
            } else if !touches {
                train.push(q.clone());
            }
        }
        if test.is_empty() {
            return Err(SamplerError::EmptyOodSplit(name));
        }
        out.push(OodSplit { name, train, test });
    }

    for cat in &spec.categories {
        let cat = CategoryId(cat.clone());
        let name = format!("category:{cat}");
        let mut train = Vec::new();
        let mut test = Vec::new();
        for q in queries {
            let touches = query_products(q).any(|pid| cat_of(pid).as_ref() == Some(&cat));
            let all_in = query_products(q).all(|pid| cat_of(pid).as_ref() == Some(&cat));
            if all_in {
                let mut q = q.clone();
                q.split_tags.insert(format!("ood:{name}"));
                test.push(q);
            } else if !touches {
                train.push(q.clone());
            }
        }
        if test.is_empty() {
            return Err(SamplerError::EmptyOodSplit(name));
        }
        out.push(OodSplit { name, train, test });
    }

    for attr in &spec.attributes {
        let name = format!("attribute:{attr}");
        let mut train = Vec::new();
        let mut test = Vec::new();
        for q in queries {
            let uses = q.conditions.iter().any(|c| &c.attribute == attr);
            if uses {
                let mut q = q.clone();
                q.split_tags.insert(format!("ood:{name}"));
                test.push(q);
            } else {
                train.push(q.clone());
            }
        }
        if test.is_empty() {
            return Err(SamplerError::EmptyOodSplit(name));
        }
        out.push(OodSplit { name, train, test });
    }

    Ok(out)
}

// ---------------------------------------------------------------------------
// Serialization: one JSON record per query (jsonl), stats alongside.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ConditionRecord {
    product_id: ProductId,
    attribute: String,
    value: String,
}

#[derive(Serialize, Deserialize)]
struct QueryRecord {
    id: String,
    conditions: Vec<ConditionRecord>,
    instruction: Vec<InstructionSpan>,
    positives: Vec<ProductId>,
    language: Language,
    category: CategoryId,
    country: String,
    split_tags: BTreeSet<String>,
}

pub fn save_queries(queries: &[Query], catalog: &Catalog, path: &Path) -> Result<(), SamplerError> {
    let mut body = String::new();
    for q in queries {
        let rec = QueryRecord {
            id: q.id.clone(),
            conditions: q
                .conditions
                .iter()
                .map(|c| ConditionRecord {
                    product_id: c.product_id.clone(),
                    attribute: c.attribute.clone(),
                    value: catalog
                        .product(&c.product_id)
                        .and_then(|p| p.attributes.get(&c.attribute))
                        .cloned()
                        .unwrap_or_default(),
                })
                .collect(),
            instruction: q.instruction.clone(),
            positives: q.positives.clone(),
            language: q.language,
            category: q.category.clone(),
            country: q.country.clone(),
            split_tags: q.split_tags.clone(),
        };
        body.push_str(
            &serde_json::to_string(&rec).map_err(|e| SamplerError::Parse(e.to_string()))?,
        );
        body.push('\n');
    }
    crate::catalog::write_atomic(path, body.as_bytes())?;
    Ok(())
}

pub fn load_queries(path: &Path) -> Result<Vec<Query>, SamplerError> {
    let body = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in body.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: QueryRecord =
            serde_json::from_str(line).map_err(|e| SamplerError::Parse(e.to_string()))?;
        out.push(Query {
            id: rec.id,
            conditions: rec
                .conditions
                .into_iter()
                .map(|c| Condition {
                    product_id: c.product_id,
                    attribute: c.attribute,
                })
                .collect(),
            instruction: rec.instruction,
            positives: rec.positives,
            language: rec.language,
            category: rec.category,
            country: rec.country,
            split_tags: rec.split_tags,
        });
    }
    Ok(out)
}
