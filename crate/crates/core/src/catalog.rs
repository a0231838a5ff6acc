//! Synthetic product catalog: closed per-category attribute tables, products
//! with attribute-derived image features and token-rendered titles, and the
//! post-annotation refinement filters.
//!
//! Generation is a pure function of `(config, seed)`; the same pair yields a
//! byte-identical catalog after serialization.

use crate::rng::{hash_str, seeded, Stream};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("invalid catalog config: {0}")]
    InvalidConfig(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

/// Two-level category id, `primary/secondary`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryId(pub String);

impl CategoryId {
    pub fn secondary(&self) -> &str {
        self.0.rsplit('/').next().unwrap_or(&self.0)
    }
    /// Filesystem-safe form used in product file names.
    pub fn slug(&self) -> String {
        self.0.replace('/', "-")
    }
}

impl fmt::Display for CategoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProductId(pub String);

impl fmt::Display for ProductId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Language tags. Titles and instructions render into disjoint per-language
/// token ranges, so cross-language text never shares ids.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    En,
    Id,
    Th,
    Ms,
    Vi,
}

impl Language {
    pub const ALL: [Language; 5] = [
        Language::En,
        Language::Id,
        Language::Th,
        Language::Ms,
        Language::Vi,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Language::En => "en",
            Language::Id => "id",
            Language::Th => "th",
            Language::Ms => "ms",
            Language::Vi => "vi",
        }
    }

    pub fn parse(s: &str) -> Option<Language> {
        Language::ALL.iter().copied().find(|l| l.as_str() == s)
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Closed attribute/value table for one category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeTable {
    pub category: CategoryId,
    /// Attribute name -> ordered list of allowed values.
    pub attributes: BTreeMap<String, Vec<String>>,
}

impl AttributeTable {
    pub fn allows(&self, attr: &str, value: &str) -> bool {
        self.attributes
            .get(attr)
            .map(|vs| vs.iter().any(|v| v == value))
            .unwrap_or(false)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Product {
    pub id: ProductId,
    pub category: CategoryId,
    pub language: Language,
    pub country: String,
    /// Token-id sequence rendered from the attributes in the product's
    /// language partition. Capped at `title_max_tokens`.
    pub title: Vec<u32>,
    /// One or more feature vectors of dimension `d_v`.
    pub image_features: Vec<Vec<f64>>,
    pub attributes: BTreeMap<String, String>,
}

impl Product {
    /// Mean over the product's image feature vectors; the similarity anchor
    /// used for ranking and nearest-neighbor lookups.
    pub fn mean_feature(&self) -> Vec<f64> {
        let d = self.image_features[0].len();
        let mut out = vec![0.0; d];
        for f in &self.image_features {
            for (o, x) in out.iter_mut().zip(f) {
                *o += x;
            }
        }
        let n = self.image_features.len() as f64;
        out.iter_mut().for_each(|x| *x /= n);
        out
    }
}

/// Per-language token ranges over a shared vocabulary, plus the reserved
/// `[EOS]` id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub size: u32,
    pub eos: u32,
    /// language -> (start, len)
    pub ranges: BTreeMap<Language, (u32, u32)>,
}

impl VocabSpec {
    pub fn with_size(size: u32) -> Self {
        assert!(size >= 16, "vocabulary too small to partition");
        let eos = size - 1;
        let usable = size - 1;
        let base = usable / 5;
        let rem = usable % 5;
        let mut ranges = BTreeMap::new();
        let mut at = 0u32;
        for (i, lang) in Language::ALL.iter().enumerate() {
            let len = base + if (i as u32) < rem { 1 } else { 0 };
            ranges.insert(*lang, (at, len));
            at += len;
        }
        VocabSpec { size, eos, ranges }
    }

    /// Deterministic token id for a string in a language's partition.
    pub fn token_for(&self, lang: Language, s: &str) -> u32 {
        let (start, len) = self.ranges[&lang];
        start + (hash_str(s) % len as u64) as u32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub products: Vec<Product>,
    pub tables: BTreeMap<CategoryId, AttributeTable>,
    pub vocab: VocabSpec,
    pub seed: u64,
}

impl Catalog {
    pub fn product(&self, id: &ProductId) -> Option<&Product> {
        self.products.iter().find(|p| &p.id == id)
    }

    /// Index of a product by id (products are stored sorted by id).
    pub fn index_of(&self, id: &ProductId) -> Option<usize> {
        self.products.binary_search_by(|p| p.id.cmp(id)).ok()
    }
}

/// How values are distributed over a value list during generation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ValueDistribution {
    Uniform,
    /// Weight of the i-th value (0-based) is `(i+1)^-s`.
    Zipf { s: f64 },
}

impl ValueDistribution {
    /// Declared probability mass over `n` values.
    pub fn pmf(&self, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = match self {
            ValueDistribution::Uniform => vec![1.0; n],
            ValueDistribution::Zipf { s } => {
                (0..n).map(|i| ((i + 1) as f64).powf(-s)).collect()
            }
        };
        let z: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / z).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogConfig {
    /// `primary/secondary` category names.
    pub categories: Vec<String>,
    pub products_per_category: usize,
    pub attributes_per_category: usize,
    pub values_per_attribute: usize,
    /// How many attributes per category draw values from per-language value
    /// partitions (market-specific attributes like brand). Keeps language-OOD
    /// test splits non-empty at small scale.
    pub language_scoped_attributes: usize,
    /// Image feature dimension.
    pub d_v: usize,
    pub images_per_product: usize,
    pub language_weights: BTreeMap<Language, f64>,
    pub value_distribution: ValueDistribution,
    /// Probability an attribute is present on a product at all.
    pub attribute_presence: f64,
    /// Std-dev of the Gaussian noise added to each image feature.
    pub feature_noise_sigma: f64,
    /// At most this many attributes are rendered into the title.
    pub title_attr_limit: usize,
    pub title_max_tokens: usize,
    pub vocab_size: u32,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        let mut language_weights = BTreeMap::new();
        language_weights.insert(Language::Id, 0.35);
        language_weights.insert(Language::En, 0.20);
        language_weights.insert(Language::Th, 0.20);
        language_weights.insert(Language::Ms, 0.125);
        language_weights.insert(Language::Vi, 0.125);
        CatalogConfig {
            categories: vec![
                "food/beverages".into(),
                "clothing/tops".into(),
                "clothing/pants".into(),
                "electronics/phones".into(),
                "bags/backpacks".into(),
                "jewelry/silver".into(),
                "furniture/chairs".into(),
            ],
            products_per_category: 286,
            attributes_per_category: 20,
            values_per_attribute: 20,
            language_scoped_attributes: 4,
            d_v: 32,
            images_per_product: 1,
            language_weights,
            value_distribution: ValueDistribution::Zipf { s: 0.7 },
            attribute_presence: 0.95,
            feature_noise_sigma: 0.05,
            title_attr_limit: 20,
            title_max_tokens: 190,
            vocab_size: 1024,
        }
    }
}

const SHARED_ATTRS: &[&str] = &[
    "color", "material", "size", "pattern", "shape", "style", "texture", "finish",
];
const LANG_SCOPED_ATTRS: &[&str] = &["brand", "origin", "seller", "collection"];

const GENERIC_VALUES: &[&str] = &[
    "compact",
    "deluxe",
    "standard",
    "premium",
    "basic",
    "heavy",
    "light",
    "double",
    "single",
    "hybrid",
    "curved",
    "straight",
    "high",
    "low",
    "wide",
    "narrow",
    "long",
    "short",
    "open",
    "closed",
    "soft",
    "firm",
    "fixed",
    "adjustable",
    "classic",
    "sport",
];

const NATO: &[&str] = &[
    "alfa", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india",
    "juliett", "kilo", "lima", "mike", "november", "oscar", "papa", "quebec", "romeo",
    "sierra", "tango", "uniform", "victor", "whiskey", "xray", "yankee", "zulu",
];

fn curated_values(attr: &str) -> Option<Vec<&'static str>> {
    let vs: &[&str] = match attr {
        "color" => &[
            "red", "blue", "green", "black", "white", "gray", "pink", "purple", "orange",
            "yellow", "brown", "beige", "navy", "teal", "maroon", "olive", "cream",
            "burgundy", "khaki", "mint",
        ],
        "material" => &[
            "cotton", "wool", "silk", "linen", "leather", "denim", "polyester", "nylon",
            "suede", "canvas", "velvet", "satin", "mesh", "fleece", "bamboo", "rubber",
            "metal", "wood", "glass", "ceramic",
        ],
        "size" => &[
            "extra small", "small", "medium", "large", "extra large", "petite", "tall",
            "oversized", "slim", "regular", "compact", "mini", "midi", "maxi", "wide",
            "narrow", "short", "long", "standard", "plus",
        ],
        "pattern" => &[
            "striped", "spotted", "solid", "floral", "plaid", "checked", "geometric",
            "paisley", "camouflage", "herringbone", "houndstooth", "chevron", "polka dot",
            "abstract", "animal print", "tie dye", "gradient", "marble", "pinstripe",
            "graphic",
        ],
        "shape" => &[
            "round", "oval", "square", "rectangular", "elongated", "tapered", "boxy",
            "slender", "curved", "angular", "hexagonal", "cylindrical", "flat", "domed",
            "asymmetric", "triangular", "lobed", "fluted", "ribbed", "sculpted",
        ],
        _ => return None,
    };
    Some(vs.to_vec())
}

fn category_specific_attrs(secondary: &str) -> Vec<&'static str> {
    match secondary {
        "tops" => vec!["collar", "sleeve", "neckline", "closure", "fit", "hem", "cuff", "pocket"],
        "pants" => vec!["waist", "rise", "leg", "inseam", "pocket", "closure", "fit", "tightness"],
        "phones" => vec!["storage", "camera", "battery", "screen", "processor", "memory", "connectivity", "body"],
        "backpacks" => vec!["capacity", "straps", "compartments", "closure", "frame", "padding", "sleeve", "handle"],
        "silver" => vec!["setting", "gemstone", "clasp", "band", "polish", "engraving", "chain", "pendant"],
        "chairs" => vec!["backrest", "armrest", "legs", "upholstery", "swivel", "height", "cushion", "frame"],
        "beverages" => vec!["flavor", "sweetness", "packaging", "volume", "carbonation", "caffeine", "temperature", "blend"],
        _ => vec![],
    }
}

/// Full value list for one attribute, `n` entries, all lower-case and
/// underscore-free.
fn values_for(attr: &str, n: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(n);
    if let Some(c) = curated_values(attr) {
        out.extend(c.into_iter().map(String::from));
    }
    if out.len() < n {
        // rotate the generic pool by a per-attribute offset so different
        // attributes don't all share the same value words
        let off = (hash_str(attr) % GENERIC_VALUES.len() as u64) as usize;
        for i in 0..GENERIC_VALUES.len() {
            let w = GENERIC_VALUES[(off + i) % GENERIC_VALUES.len()];
            let v = w.to_string();
            if !out.contains(&v) {
                out.push(v);
            }
            if out.len() >= n {
                break;
            }
        }
    }
    // still short (large n): extend with nato words suffixed to the attr
    let mut k = 0;
    while out.len() < n {
        let v = format!("{} {}", attr, NATO[k % NATO.len()]);
        if !out.contains(&v) {
            out.push(v);
        }
        k += 1;
        if k > 8 * n {
            // compound nato pairs as a last resort
            let v = format!("{} {}", NATO[out.len() % NATO.len()], NATO[(out.len() / NATO.len()) % NATO.len()]);
            if !out.contains(&v) {
                out.push(v);
            }
        }
    }
    out.truncate(n);
    out
}

/// Values for a language-scoped attribute: one disjoint slice per language.
fn lang_scoped_values(attr: &str, n: usize) -> Vec<String> {
    (0..n)
        .map(|i| format!("{} {}", attr, NATO[i % NATO.len()]))
        .collect()
}

/// The slice of a language-scoped value list owned by `lang`.
pub fn language_value_slice(values: &[String], lang: Language) -> &[String] {
    let per = (values.len() / Language::ALL.len()).max(1);
    let idx = Language::ALL.iter().position(|l| l == &lang).unwrap();
    let start = (idx * per).min(values.len().saturating_sub(1));
    let end = ((idx + 1) * per).min(values.len());
    &values[start..end]
}

fn is_language_scoped(attr: &str) -> bool {
    LANG_SCOPED_ATTRS.contains(&attr)
}

fn build_table(cat: &CategoryId, config: &CatalogConfig) -> AttributeTable {
    let mut names: Vec<String> = Vec::new();
    for a in SHARED_ATTRS {
        names.push((*a).to_string());
    }
    for a in LANG_SCOPED_ATTRS.iter().take(config.language_scoped_attributes) {
        names.push((*a).to_string());
    }
    for a in category_specific_attrs(cat.secondary()) {
        if !names.iter().any(|n| n == a) {
            names.push(a.to_string());
        }
    }
    let mut k = 0;
    while names.len() < config.attributes_per_category {
        let cand = format!("feature {}", NATO[k % NATO.len()]);
        if !names.iter().any(|n| n == &cand) {
            names.push(cand);
        }
        k += 1;
    }
    names.truncate(config.attributes_per_category);

    let mut attributes = BTreeMap::new();
    for name in names {
        let vals = if is_language_scoped(&name) {
            lang_scoped_values(&name, config.values_per_attribute)
        } else {
            values_for(&name, config.values_per_attribute)
        };
        attributes.insert(name, vals);
    }
    AttributeTable {
        category: cat.clone(),
        attributes,
    }
}

/// Fixed random unit direction for an `(attribute, value)` pair.
fn pair_direction(seed: u64, attr: &str, value: &str, d_v: usize) -> Vec<f64> {
    let h = hash_str(&format!("{seed}|dir|{attr}|{value}"));
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    let mut v: Vec<f64> = (0..d_v).map(|_| gaussian(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per sample keeps the stream arithmetic simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn weighted_choice(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
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

fn country_for(lang: Language, rng: &mut ChaCha8Rng) -> String {
    match lang {
        Language::Id => "indonesia".into(),
        Language::Th => "thailand".into(),
        Language::Ms => "malaysia".into(),
        Language::Vi => "vietnam".into(),
        Language::En => {
            if rng.gen_range(0.0..1.0) < 0.8 {
                "philippines".into()
            } else {
                "singapore".into()
            }
        }
    }
}

fn render_title(
    vocab: &VocabSpec,
    lang: Language,
    category: &CategoryId,
    attrs: &BTreeMap<String, String>,
    limit: usize,
    max_tokens: usize,
) -> Vec<u32> {
    let mut toks = vec![vocab.token_for(lang, category.secondary())];
    for (name, value) in attrs.iter().take(limit) {
        toks.push(vocab.token_for(lang, name));
        toks.push(vocab.token_for(lang, value));
    }
    toks.truncate(max_tokens);
    toks
}

fn validate(config: &CatalogConfig) -> Result<(), CatalogError> {
    if config.categories.is_empty() {
        return Err(CatalogError::InvalidConfig("no categories".into()));
    }
    if config.values_per_attribute < 2 {
        return Err(CatalogError::InvalidConfig(
            "values_per_attribute must be >= 2".into(),
        ));
    }
    if config.attributes_per_category == 0 {
        return Err(CatalogError::InvalidConfig(
            "attributes_per_category must be >= 1".into(),
        ));
    }
    if config.products_per_category == 0 {
        return Err(CatalogError::InvalidConfig(
            "products_per_category must be >= 1".into(),
        ));
    }
    if config.images_per_product == 0 {
        return Err(CatalogError::InvalidConfig(
            "images_per_product must be >= 1".into(),
        ));
    }
    if config.d_v == 0 {
        return Err(CatalogError::InvalidConfig("d_v must be >= 1".into()));
    }
    let wsum: f64 = config.language_weights.values().sum();
    if config.language_weights.is_empty() || wsum <= 0.0 {
        return Err(CatalogError::InvalidConfig(
            "language_weights must be non-empty with positive mass".into(),
        ));
    }
    if !(0.0..=1.0).contains(&config.attribute_presence) {
        return Err(CatalogError::InvalidConfig(
            "attribute_presence must be in [0, 1]".into(),
        ));
    }
    Ok(())
}

/// Generate a catalog. Pure in `(config, seed)`.
pub fn generate_catalog(config: &CatalogConfig, seed: u64) -> Result<Catalog, CatalogError> {
    validate(config)?;
    let vocab = VocabSpec::with_size(config.vocab_size);
    let mut rng = seeded(seed, Stream::Catalog);

    let mut tables = BTreeMap::new();
    for c in &config.categories {
        let cat = CategoryId(c.clone());
        tables.insert(cat.clone(), build_table(&cat, config));
    }

    let langs: Vec<Language> = config.language_weights.keys().copied().collect();
    let lang_weights: Vec<f64> = config.language_weights.values().copied().collect();

    let mut products = Vec::new();
    for c in &config.categories {
        let cat = CategoryId(c.clone());
        let table = &tables[&cat];
        for num in 0..config.products_per_category {
            let lang = langs[weighted_choice(&mut rng, &lang_weights)];
            let country = country_for(lang, &mut rng);

            let mut attrs = BTreeMap::new();
            for (name, values) in &table.attributes {
                if rng.gen_range(0.0..1.0) >= config.attribute_presence {
                    continue;
                }
                let pool: &[String] = if is_language_scoped(name) {
                    language_value_slice(values, lang)
                } else {
                    values
                };
                let pmf = config.value_distribution.pmf(pool.len());
                let v = pool[weighted_choice(&mut rng, &pmf)].clone();
                attrs.insert(name.clone(), v);
            }

            // feature = normalized sum of the pair directions, plus noise
            let mut base = vec![0.0; config.d_v];
            for (name, value) in &attrs {
                let dir = pair_direction(seed, name, value, config.d_v);
                for (b, x) in base.iter_mut().zip(&dir) {
                    *b += x;
                }
            }
            let norm = base.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            base.iter_mut().for_each(|x| *x /= norm);

            let mut image_features = Vec::with_capacity(config.images_per_product);
            for _ in 0..config.images_per_product {
                let f: Vec<f64> = base
                    .iter()
                    .map(|&b| b + config.feature_noise_sigma * gaussian(&mut rng))
                    .collect();
                image_features.push(f);
            }

            let id = ProductId(format!("{}-{:05}", cat.slug(), num));
            let title = render_title(
                &vocab,
                lang,
                &cat,
                &attrs,
                config.title_attr_limit,
                config.title_max_tokens,
            );
            products.push(Product {
                id,
                category: cat.clone(),
                language: lang,
                country,
                title,
                image_features,
                attributes: attrs,
            });
        }
    }
    products.sort_by(|a, b| a.id.cmp(&b.id));

    Ok(Catalog {
        products,
        tables,
        vocab,
        seed,
    })
}

/// Exact per-attribute-name product counts, by brute-force tally.
pub fn attribute_histogram(catalog: &Catalog) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for p in &catalog.products {
        for name in p.attributes.keys() {
            *out.entry(name.clone()).or_insert(0) += 1;
        }
    }
    out
}

/// Per `(attribute, value)` pair counts across the whole catalog.
pub fn value_histogram(catalog: &Catalog) -> BTreeMap<(String, String), usize> {
    let mut out = BTreeMap::new();
    for p in &catalog.products {
        for (name, value) in &p.attributes {
            *out.entry((name.clone(), value.clone())).or_insert(0) += 1;
        }
    }
    out
}

/// Attribute refinement. Removes, in order:
/// (a) entries valued `none`/`skip`,
/// (b) attribute names absent from the category table,
/// (c) per attribute, the single most frequent value across the catalog
///     (ties broken toward the lexicographically smallest value),
/// (d) values occurring exactly once.
/// (c) and (d) are evaluated on one shared tally taken after (a)/(b).
/// Returns a new catalog; the input is unchanged.
pub fn refine_attributes(catalog: &Catalog) -> Catalog {
    let mut refined = catalog.clone();
    for p in &mut refined.products {
        let table = &catalog.tables[&p.category];
        p.attributes.retain(|name, value| {
            value != "none" && value != "skip" && table.attributes.contains_key(name)
        });
    }

    let counts = value_histogram(&refined);
    let mut most_frequent: BTreeMap<&String, (&String, usize)> = BTreeMap::new();
    for ((name, value), &n) in &counts {
        match most_frequent.get(name) {
            Some(&(_, best)) if best >= n => {}
            _ => {
                most_frequent.insert(name, (value, n));
            }
        }
    }

    for p in &mut refined.products {
        p.attributes.retain(|name, value| {
            let n = counts[&(name.clone(), value.clone())];
            if n <= 1 {
                return false;
            }
            match most_frequent.get(name) {
                Some(&(top, _)) => top != value,
                None => true,
            }
        });
    }
    refined
}

// ---------------------------------------------------------------------------
// On-disk layout: one JSON file per product plus flat text feature vectors,
// and a tables.json with the shared structures.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TablesFile {
    seed: u64,
    vocab: VocabSpec,
    tables: BTreeMap<CategoryId, AttributeTable>,
    product_files: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ProductFile {
    id: ProductId,
    category: CategoryId,
    language: Language,
    country: String,
    title: Vec<u32>,
    image_count: usize,
    attributes: BTreeMap<String, String>,
}

fn format_vector(v: &[f64]) -> String {
    let mut s = String::new();
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        // shortest round-trip representation
        s.push_str(&format!("{x:?}"));
    }
    s.push('\n');
    s
}

fn parse_vector(s: &str) -> Result<Vec<f64>, CatalogError> {
    s.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|e| CatalogError::Parse(format!("bad float {t:?}: {e}")))
        })
        .collect()
}

/// Atomic file write: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".tmp.{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out")
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_catalog(catalog: &Catalog, dir: &Path) -> Result<(), CatalogError> {
    let products_dir = dir.join("products");
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&products_dir)?;
    std::fs::create_dir_all(&images_dir)?;

    let mut product_files = Vec::new();
    let mut per_category: BTreeMap<&CategoryId, usize> = BTreeMap::new();
    for p in &catalog.products {
        let num = per_category.entry(&p.category).or_insert(0);
        let fname = format!("product_{}_{:05}.json", p.category.slug(), num);
        *num += 1;
        let rec = ProductFile {
            id: p.id.clone(),
            category: p.category.clone(),
            language: p.language,
            country: p.country.clone(),
            title: p.title.clone(),
            image_count: p.image_features.len(),
            attributes: p.attributes.clone(),
        };
        let body = serde_json::to_string_pretty(&rec)
            .map_err(|e| CatalogError::Parse(e.to_string()))?;
        write_atomic(&products_dir.join(&fname), body.as_bytes())?;
        product_files.push(fname);

        for (i, f) in p.image_features.iter().enumerate() {
            let img = images_dir.join(format!("image_{}_{}.txt", p.id, i));
            write_atomic(&img, format_vector(f).as_bytes())?;
        }
    }

    let tf = TablesFile {
        seed: catalog.seed,
        vocab: catalog.vocab.clone(),
        tables: catalog.tables.clone(),
        product_files,
    };
    let body =
        serde_json::to_string_pretty(&tf).map_err(|e| CatalogError::Parse(e.to_string()))?;
    write_atomic(&dir.join("tables.json"), body.as_bytes())?;
    Ok(())
}

pub fn load_catalog(dir: &Path) -> Result<Catalog, CatalogError> {
    let body = std::fs::read_to_string(dir.join("tables.json"))?;
    let tf: TablesFile =
        serde_json::from_str(&body).map_err(|e| CatalogError::Parse(e.to_string()))?;
    let mut products = Vec::new();
    for fname in &tf.product_files {
        let body = std::fs::read_to_string(dir.join("products").join(fname))?;
        let rec: ProductFile =
            serde_json::from_str(&body).map_err(|e| CatalogError::Parse(e.to_string()))?;
        let mut image_features = Vec::with_capacity(rec.image_count);
        for i in 0..rec.image_count {
            let img = dir.join("images").join(format!("image_{}_{}.txt", rec.id, i));
            image_features.push(parse_vector(&std::fs::read_to_string(img)?)?);
        }
        products.push(Product {
            id: rec.id,
            category: rec.category,
            language: rec.language,
            country: rec.country,
            title: rec.title,
            image_features,
            attributes: rec.attributes,
        });
    }
    products.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Catalog {
        products,
        tables: tf.tables,
        vocab: tf.vocab,
        seed: tf.seed,
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}
