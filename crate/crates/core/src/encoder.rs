//! Toy interleaved multimodal encoder: a frozen random image featurizer, a
//! trainable linear projector, a token embedding table, a small stack of
//! bidirectional transformer blocks, and extraction of the `[EOS]` hidden
//! state as the retrieval embedding.
//!
//! Forward passes run on a [`Tape`](crate::tensor::Tape) so every loss built
//! on top is differentiable with respect to all trainable parameters.

use crate::catalog::{Catalog, Product};
use crate::rng::{seeded, Stream};
use crate::sampler::{InstructionSpan, Query};
use crate::tensor::{Matrix, Tape, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("entity has no images but the template needs one")]
    NoImages,
    #[error("zero-length text segment")]
    EmptyTextSegment,
    #[error("input has {got} slots, exceeding max_seq_len {max}")]
    TooLong { got: usize, max: usize },
    #[error("image feature dimension {got} does not match d_v {want}")]
    BadFeatureDim { got: usize, want: usize },
    #[error("expected exactly one [EOS] at the final position")]
    BadEos,
    #[error("unknown product {0}")]
    UnknownProduct(String),
    #[error("token id {0} outside vocabulary")]
    BadToken(u32),
}

/// How multiple images are fed to the encoder: one interleaved image span
/// per image, or all images pooled into a single span.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    Seq,
    Cat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Hidden width of the sequence model.
    pub d: usize,
    /// Image feature dimension produced by the catalog.
    pub d_v: usize,
    /// Slots each image expands to after the featurizer.
    pub n_v_slots: usize,
    pub n_layers: usize,
    pub vocab_size: u32,
    pub max_seq_len: usize,
    /// MLP hidden width multiplier.
    pub mlp_mult: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d: 64,
            d_v: 32,
            n_v_slots: 4,
            n_layers: 2,
            vocab_size: 1024,
            max_seq_len: 256,
            mlp_mult: 4,
        }
    }
}

/// Low-rank adapter settings. Attached by `coral::apply_lora`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

/// Weight matrices of the sequence-model blocks that receive adapters.
pub const LORA_TARGETS: [&str; 6] = ["attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.w1", "mlp.w2"];

/// All model tensors by name. Persistence goes through the versioned binary
/// checkpoint format in `trainer`, not serde.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: EncoderConfig,
    pub tensors: BTreeMap<String, Matrix>,
    pub lora: Option<LoraConfig>,
    pub seed: u64,
}

impl ModelParams {
    /// Frozen tensors never receive optimizer updates: the vision featurizer
    /// always; under LoRA also the token table and all base sequence-model
    /// weights (adapters, projector, decoders and the shared lm head stay
    /// trainable).
    pub fn is_trainable(&self, name: &str) -> bool {
        if name.starts_with("vision.") {
            return false;
        }
        if self.lora.is_some() {
            let lora_frozen = (name.starts_with("lm.") || name == "embed.table")
                && !name.contains(".lora_");
            return !lora_frozen;
        }
        true
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|n| self.is_trainable(n))
            .cloned()
            .collect()
    }

    pub fn total_params(&self) -> usize {
        self.tensors.values().map(|m| m.len()).sum()
    }
}

fn gauss_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, std: f64) -> Matrix {
    Matrix::from_shape_fn((r, c), |_| {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

/// Initialize all model tensors, including the reconstruction decoders.
pub fn init_params(config: &EncoderConfig, seed: u64) -> ModelParams {
    let mut rng = seeded(seed, Stream::ModelInit);
    let d = config.d;
    let dv = config.d_v;
    let v = config.vocab_size as usize;
    let h = d * config.mlp_mult;
    let mut t: BTreeMap<String, Matrix> = BTreeMap::new();

    // frozen image featurizer: one random map per slot
    for s in 0..config.n_v_slots {
        t.insert(format!("vision.w{s}"), gauss_matrix(&mut rng, dv, dv, (dv as f64).powf(-0.5)));
        t.insert(format!("vision.b{s}"), gauss_matrix(&mut rng, 1, dv, 0.1));
    }
    t.insert("proj.w".into(), gauss_matrix(&mut rng, dv, d, 0.02));
    t.insert("proj.b".into(), Matrix::zeros((1, d)));
    t.insert("embed.table".into(), gauss_matrix(&mut rng, v, d, 0.02));
    t.insert("lm.pos".into(), gauss_matrix(&mut rng, config.max_seq_len, d, 0.02));
    for l in 0..config.n_layers {
        let p = format!("lm.{l}");
        t.insert(format!("{p}.ln1.g"), Matrix::ones((1, d)));
        t.insert(format!("{p}.ln1.b"), Matrix::zeros((1, d)));
        for w in ["wq", "wk", "wv", "wo"] {
            t.insert(format!("{p}.attn.{w}"), gauss_matrix(&mut rng, d, d, 0.02));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            t.insert(format!("{p}.attn.{b}"), Matrix::zeros((1, d)));
        }
        t.insert(format!("{p}.ln2.g"), Matrix::ones((1, d)));
        t.insert(format!("{p}.ln2.b"), Matrix::zeros((1, d)));
        t.insert(format!("{p}.mlp.w1"), gauss_matrix(&mut rng, d, h, 0.02));
        t.insert(format!("{p}.mlp.b1"), Matrix::zeros((1, h)));
        t.insert(format!("{p}.mlp.w2"), gauss_matrix(&mut rng, h, d, 0.02));
        t.insert(format!("{p}.mlp.b2"), Matrix::zeros((1, d)));
    }
    t.insert("lm.lnf.g".into(), Matrix::ones((1, d)));
    t.insert("lm.lnf.b".into(), Matrix::zeros((1, d)));
    t.insert("lm_head.w".into(), gauss_matrix(&mut rng, d, v, 0.02));
    t.insert("lm_head.b".into(), Matrix::zeros((1, v)));

    // reconstruction decoder blocks, one per modality
    for dec in ["dec.vis", "dec.lang"] {
        for w in ["wq", "wk", "wv"] {
            t.insert(format!("{dec}.attn.{w}"), gauss_matrix(&mut rng, d, d, 0.02));
        }
        t.insert(format!("{dec}.pos"), gauss_matrix(&mut rng, config.max_seq_len, d, 0.02));
        t.insert(format!("{dec}.ln1.g"), Matrix::ones((1, d)));
        t.insert(format!("{dec}.ln1.b"), Matrix::zeros((1, d)));
        t.insert(format!("{dec}.mlp.w1"), gauss_matrix(&mut rng, d, h, 0.02));
        t.insert(format!("{dec}.mlp.b1"), Matrix::zeros((1, h)));
        t.insert(format!("{dec}.mlp.w2"), gauss_matrix(&mut rng, h, d, 0.02));
        t.insert(format!("{dec}.mlp.b2"), Matrix::zeros((1, d)));
        t.insert(format!("{dec}.ln2.g"), Matrix::ones((1, d)));
        t.insert(format!("{dec}.ln2.b"), Matrix::zeros((1, d)));
    }
    // vision decoder projects back to embedding space; the language decoder
    // reuses lm_head.w / lm_head.b by name
    t.insert("dec.vis.out.w".into(), gauss_matrix(&mut rng, d, d, 0.02));
    t.insert("dec.vis.out.b".into(), Matrix::zeros((1, d)));

    ModelParams {
        config: config.clone(),
        tensors: t,
        lora: None,
        seed,
    }
}

// ---------------------------------------------------------------------------
// Interleaved inputs
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub enum Segment {
    /// One image span: a raw feature vector of dimension d_v.
    Image { features: Vec<f64> },
    /// A run of text tokens.
    Text { tokens: Vec<u32> },
}

/// Ordered image/text spans with the `[EOS]` token as the final text slot.
#[derive(Clone, Debug, PartialEq)]
pub struct InterleavedInput {
    pub segments: Vec<Segment>,
    pub eos_token: u32,
}

impl InterleavedInput {
    pub fn validate(&self) -> Result<(), EncodeError> {
        let mut eos_count = 0;
        let mut last_token = None;
        for seg in &self.segments {
            if let Segment::Text { tokens } = seg {
                if tokens.is_empty() {
                    return Err(EncodeError::EmptyTextSegment);
                }
                for &t in tokens {
                    if t == self.eos_token {
                        eos_count += 1;
                    }
                    last_token = Some(t);
                }
            } else {
                last_token = None;
            }
        }
        if eos_count != 1 || last_token != Some(self.eos_token) {
            return Err(EncodeError::BadEos);
        }
        Ok(())
    }
}

fn mean_of(features: &[Vec<f64>]) -> Vec<f64> {
    let d = features[0].len();
    let mut out = vec![0.0; d];
    for f in features {
        for (o, x) in out.iter_mut().zip(f) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|x| *x /= features.len() as f64);
    out
}

/// Product input: image span(s), the title, then `[EOS]`.
/// Seq keeps one span per image; Cat pools them into a single averaged span.
pub fn build_product_input(
    product: &Product,
    mode: InputMode,
    eos_token: u32,
) -> Result<InterleavedInput, EncodeError> {
    if product.image_features.is_empty() {
        return Err(EncodeError::NoImages);
    }
    let mut segments = Vec::new();
    match mode {
        InputMode::Seq => {
            for f in &product.image_features {
                segments.push(Segment::Image { features: f.clone() });
            }
        }
        InputMode::Cat => segments.push(Segment::Image {
            features: mean_of(&product.image_features),
        }),
    }
    let mut tokens = product.title.clone();
    tokens.push(eos_token);
    segments.push(Segment::Text { tokens });
    Ok(InterleavedInput {
        segments,
        eos_token,
    })
}

/// Query input: the instruction template with image placeholders resolved to
/// condition-product features. In Cat mode all referenced images pool into
/// the first placeholder and later placeholders collapse.
pub fn build_query_input(
    query: &Query,
    catalog: &Catalog,
    mode: InputMode,
) -> Result<InterleavedInput, EncodeError> {
    let eos_token = catalog.vocab.eos;
    let mut cond_features: Vec<Vec<f64>> = Vec::new();
    for c in &query.conditions {
        let p = catalog
            .product(&c.product_id)
            .ok_or_else(|| EncodeError::UnknownProduct(c.product_id.to_string()))?;
        if p.image_features.is_empty() {
            return Err(EncodeError::NoImages);
        }
        cond_features.push(mean_of(&p.image_features));
    }
    if cond_features.is_empty() {
        return Err(EncodeError::NoImages);
    }

    let mut segments = Vec::new();
    let mut first_image_done = false;
    for span in &query.instruction {
        match span {
            InstructionSpan::Text(tokens) => {
                segments.push(Segment::Text {
                    tokens: tokens.clone(),
                });
            }
            InstructionSpan::Image(k) => {
                let f = cond_features
                    .get(*k)
                    .ok_or(EncodeError::NoImages)?
                    .clone();
                match mode {
                    InputMode::Seq => segments.push(Segment::Image { features: f }),
                    InputMode::Cat => {
                        if !first_image_done {
                            segments.push(Segment::Image {
                                features: mean_of(&cond_features),
                            });
                            first_image_done = true;
                        }
                    }
                }
            }
        }
    }
    segments.push(Segment::Text {
        tokens: vec![eos_token],
    });
    Ok(InterleavedInput {
        segments,
        eos_token,
    })
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Per-position roles of an encoded sequence, for modality masking and the
/// reconstruction targets.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqLayout {
    pub len: usize,
    pub visual_positions: Vec<usize>,
    /// Text positions aligned with `token_ids` (includes the final `[EOS]`).
    pub token_positions: Vec<usize>,
    pub token_ids: Vec<u32>,
    pub eos_position: usize,
}

impl SeqLayout {
    /// Linguistic positions eligible for masking: every token except `[EOS]`.
    pub fn maskable_linguistic(&self) -> Vec<usize> {
        self.token_positions
            .iter()
            .copied()
            .filter(|&p| p != self.eos_position)
            .collect()
    }
}

/// Tape-backed forward state: parameter leaves are cached per name so shared
/// weights (the lm head and the language decoder projection) are one node and
/// accumulate gradients together.
pub struct Session<'p> {
    pub tape: Tape,
    pub params: &'p ModelParams,
    cache: BTreeMap<String, Var>,
    pub train: bool,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        Session {
            tape: Tape::new(),
            params,
            cache: BTreeMap::new(),
            train: false,
        }
    }

    pub fn training(params: &'p ModelParams) -> Self {
        let mut s = Self::new(params);
        s.train = true;
        s
    }

    /// Leaf for a named tensor. Trainable tensors become gradient-carrying
    /// params; frozen ones enter as constants.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(v) = self.cache.get(name) {
            return *v;
        }
        let value = self.params.tensors[name].clone();
        let var = if self.params.is_trainable(name) {
            self.tape.param(name, value)
        } else {
            self.tape.constant(value)
        };
        self.cache.insert(name.to_string(), var);
        var
    }

    /// `x @ W` for a sequence-model weight, routing through the low-rank
    /// adapters when attached: `x W + (alpha/r) * drop(x) A B`.
    fn lm_matmul(
        &mut self,
        x: Var,
        wname: &str,
        dropout_rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Var {
        let w = self.param(wname);
        let base = self.tape.matmul(x, w);
        let Some(lora) = self.params.lora else {
            return base;
        };
        let a_name = format!("{wname}.lora_a");
        if !self.params.tensors.contains_key(&a_name) {
            return base;
        }
        let a = self.param(&a_name);
        let b = self.param(&format!("{wname}.lora_b"));
        let mut xin = x;
        if self.train && lora.dropout > 0.0 {
            if let Some(rng) = dropout_rng.as_deref_mut() {
                let dim = self.tape.value(x).dim();
                let keep = 1.0 - lora.dropout;
                let mask = Matrix::from_shape_fn(dim, |_| {
                    if rng.gen_range(0.0..1.0) < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                let m = self.tape.constant(mask);
                xin = self.tape.mul(x, m);
            }
        }
        let xa = self.tape.matmul(xin, a);
        let xab = self.tape.matmul(xa, b);
        let scaled = self.tape.scale(xab, lora.alpha / lora.rank as f64);
        self.tape.add(base, scaled)
    }

    fn layer_norm(&mut self, x: Var, prefix: &str) -> Var {
        let g = self.param(&format!("{prefix}.g"));
        let b = self.param(&format!("{prefix}.b"));
        let n = self.tape.layer_norm_rows(x, 1e-5);
        let n = self.tape.mul_row(n, g);
        self.tape.add_row(n, b)
    }
}

/// Outputs of one encoder forward pass, all tape vars.
pub struct EncodedSeq {
    /// Input embedding sequence `[e_img; e_txt]`, before position terms.
    pub e: Var,
    /// Final hidden states.
    pub h: Var,
    /// Hidden state at the `[EOS]` position, `1 x d`.
    pub h_eos: Var,
    pub layout: SeqLayout,
}

/// Run the encoder. `dropout_rng` is only consumed when adapters with
/// dropout are attached and the session is in training mode.
pub fn encode(
    sess: &mut Session,
    input: &InterleavedInput,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<EncodedSeq, EncodeError> {
    input.validate()?;
    let cfg = &sess.params.config;
    let d = cfg.d;

    // assemble E = [e_img; e_txt] segment by segment
    let mut parts: Vec<Var> = Vec::new();
    let mut visual_positions = Vec::new();
    let mut token_positions = Vec::new();
    let mut token_ids = Vec::new();
    let mut at = 0usize;
    for seg in &input.segments {
        match seg {
            Segment::Image { features } => {
                if features.len() != cfg.d_v {
                    return Err(EncodeError::BadFeatureDim {
                        got: features.len(),
                        want: cfg.d_v,
                    });
                }
                // frozen featurizer runs off-tape; its output enters as a
                // constant feeding the trainable projector
                let mut p = Matrix::zeros((cfg.n_v_slots, cfg.d_v));
                for s in 0..cfg.n_v_slots {
                    let w = &sess.params.tensors[&format!("vision.w{s}")];
                    let b = &sess.params.tensors[&format!("vision.b{s}")];
                    let x = Matrix::from_shape_vec((1, cfg.d_v), features.clone()).unwrap();
                    let row = (x.dot(w) + &b.row(0)).mapv(f64::tanh);
                    p.row_mut(s).assign(&row.row(0));
                }
                let pv = sess.tape.constant(p);
                let wp = sess.param("proj.w");
                let bp = sess.param("proj.b");
                let e_img = sess.tape.linear(pv, wp, bp);
                parts.push(e_img);
                for s in 0..cfg.n_v_slots {
                    visual_positions.push(at + s);
                }
                at += cfg.n_v_slots;
            }
            Segment::Text { tokens } => {
                for &tok in tokens {
                    if tok >= cfg.vocab_size {
                        return Err(EncodeError::BadToken(tok));
                    }
                }
                let table = sess.param("embed.table");
                let rows: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
                let e_txt = sess.tape.select_rows(table, &rows);
                parts.push(e_txt);
                for (i, &tok) in tokens.iter().enumerate() {
                    token_positions.push(at + i);
                    token_ids.push(tok);
                }
                at += tokens.len();
            }
        }
    }
    let total = at;
    if total + 1 > cfg.max_seq_len {
        return Err(EncodeError::TooLong {
            got: total,
            max: cfg.max_seq_len,
        });
    }
    let e = sess.tape.concat_rows(&parts);
    let eos_position = total - 1;

    // sequence model: learned positions, pre-LN blocks, final norm
    let pos_table = sess.param("lm.pos");
    let pos = sess.tape.select_rows(pos_table, &(0..total).collect::<Vec<_>>());
    let mut x = sess.tape.add(e, pos);
    let scale = 1.0 / (d as f64).sqrt();
    for l in 0..cfg.n_layers {
        let p = format!("lm.{l}");
        let hn = sess.layer_norm(x, &format!("{p}.ln1"));
        let bq = sess.param(&format!("{p}.attn.bq"));
        let bk = sess.param(&format!("{p}.attn.bk"));
        let bv = sess.param(&format!("{p}.attn.bv"));
        let q = sess.lm_matmul(hn, &format!("{p}.attn.wq"), &mut dropout_rng);
        let q = sess.tape.add_row(q, bq);
        let k = sess.lm_matmul(hn, &format!("{p}.attn.wk"), &mut dropout_rng);
        let k = sess.tape.add_row(k, bk);
        let v = sess.lm_matmul(hn, &format!("{p}.attn.wv"), &mut dropout_rng);
        let v = sess.tape.add_row(v, bv);
        let scores = sess.tape.matmul_tb(q, k);
        let scores = sess.tape.scale(scores, scale);
        let attn = sess.tape.row_softmax(scores);
        let ctx = sess.tape.matmul(attn, v);
        let bo = sess.param(&format!("{p}.attn.bo"));
        let out = sess.lm_matmul(ctx, &format!("{p}.attn.wo"), &mut dropout_rng);
        let out = sess.tape.add_row(out, bo);
        x = sess.tape.add(x, out);

        let hn2 = sess.layer_norm(x, &format!("{p}.ln2"));
        let b1 = sess.param(&format!("{p}.mlp.b1"));
        let b2 = sess.param(&format!("{p}.mlp.b2"));
        let m = sess.lm_matmul(hn2, &format!("{p}.mlp.w1"), &mut dropout_rng);
        let m = sess.tape.add_row(m, b1);
        let m = sess.tape.gelu(m);
        let m = sess.lm_matmul(m, &format!("{p}.mlp.w2"), &mut dropout_rng);
        let m = sess.tape.add_row(m, b2);
        x = sess.tape.add(x, m);
    }
    let h = sess.layer_norm(x, "lm.lnf");
    let h_eos = sess.tape.select_rows(h, &[eos_position]);

    Ok(EncodedSeq {
        e,
        h,
        h_eos,
        layout: SeqLayout {
            len: total,
            visual_positions,
            token_positions,
            token_ids,
            eos_position,
        },
    })
}

/// L2-normalized `[EOS]` hidden state as a plain vector; the retrieval
/// embedding for queries and candidates alike.
pub fn embed_for_retrieval(
    params: &ModelParams,
    input: &InterleavedInput,
) -> Result<Vec<f64>, EncodeError> {
    let mut sess = Session::new(params);
    let enc = encode(&mut sess, input, None)?;
    let normed = sess.tape.l2_normalize_rows(enc.h_eos, 1e-12);
    Ok(sess.tape.value(normed).row(0).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{generate_catalog, refine_attributes, CatalogConfig};
    use crate::sampler::{compose_query_set, SamplerConfig};

    fn tiny_encoder() -> EncoderConfig {
        EncoderConfig {
            d: 16,
            d_v: 8,
            n_v_slots: 2,
            n_layers: 2,
            vocab_size: 64,
            max_seq_len: 64,
            mlp_mult: 2,
        }
    }

    fn tiny_input(cfg: &EncoderConfig) -> InterleavedInput {
        InterleavedInput {
            segments: vec![
                Segment::Image {
                    features: (0..cfg.d_v).map(|i| 0.1 * i as f64).collect(),
                },
                Segment::Text {
                    tokens: vec![3, 7, 11, cfg.vocab_size - 1],
                },
            ],
            eos_token: cfg.vocab_size - 1,
        }
    }

    #[test]
    fn build_product_input_modes() {
        let cfg = CatalogConfig {
            categories: vec!["clothing/tops".into()],
            products_per_category: 4,
            attributes_per_category: 3,
            values_per_attribute: 3,
            language_scoped_attributes: 0,
            images_per_product: 2,
            ..CatalogConfig::default()
        };
        let cat = generate_catalog(&cfg, 3).unwrap();
        let p = &cat.products[0];
        let seq = build_product_input(p, InputMode::Seq, cat.vocab.eos).unwrap();
        let image_count = |inp: &InterleavedInput| {
            inp.segments
                .iter()
                .filter(|s| matches!(s, Segment::Image { .. }))
                .count()
        };
        assert_eq!(image_count(&seq), 2);
        let pooled = build_product_input(p, InputMode::Cat, cat.vocab.eos).unwrap();
        assert_eq!(image_count(&pooled), 1);
        if let Segment::Image { features } = &pooled.segments[0] {
            for (i, f) in features.iter().enumerate() {
                let want = (p.image_features[0][i] + p.image_features[1][i]) / 2.0;
                assert!((f - want).abs() < 1e-12);
            }
        }
        // single image: Seq and Cat agree
        let mut single = p.clone();
        single.image_features.truncate(1);
        let a = build_product_input(&single, InputMode::Seq, cat.vocab.eos).unwrap();
        let b = build_product_input(&single, InputMode::Cat, cat.vocab.eos).unwrap();
        assert_eq!(a, b);
        // no images is an error
        let mut none = p.clone();
        none.image_features.clear();
        assert!(matches!(
            build_product_input(&none, InputMode::Seq, cat.vocab.eos),
            Err(EncodeError::NoImages)
        ));
    }

    #[test]
    fn build_query_input_modes() {
        let cfg = CatalogConfig {
            categories: vec!["clothing/tops".into(), "food/beverages".into()],
            products_per_category: 100,
            attributes_per_category: 6,
            values_per_attribute: 5,
            language_scoped_attributes: 1,
            ..CatalogConfig::default()
        };
        let cat = refine_attributes(&generate_catalog(&cfg, 5).unwrap());
        let mut rng = seeded(1, Stream::Sampler);
        let qs = compose_query_set(&cat, &SamplerConfig::default(), 20, &mut rng).unwrap();
        let two_cond = qs
            .queries
            .iter()
            .find(|q| q.conditions.len() == 2)
            .expect("no 2-condition query");
        let seq = build_query_input(two_cond, &cat, InputMode::Seq).unwrap();
        let images = |inp: &InterleavedInput| {
            inp.segments
                .iter()
                .filter(|s| matches!(s, Segment::Image { .. }))
                .count()
        };
        assert_eq!(images(&seq), 2);
        let pooled = build_query_input(two_cond, &cat, InputMode::Cat).unwrap();
        assert_eq!(images(&pooled), 1);
        seq.validate().unwrap();
        pooled.validate().unwrap();
    }

    #[test]
    fn encode_rejects_malformed_inputs() {
        let cfg = tiny_encoder();
        let params = init_params(&cfg, 1);
        let mut sess = Session::new(&params);
        let mut input = tiny_input(&cfg);
        input.segments.insert(
            1,
            Segment::Text { tokens: vec![] },
        );
        assert!(matches!(
            encode(&mut sess, &input, None),
            Err(EncodeError::EmptyTextSegment)
        ));
        // missing EOS
        let input = InterleavedInput {
            segments: vec![Segment::Text { tokens: vec![3, 4] }],
            eos_token: cfg.vocab_size - 1,
        };
        assert!(matches!(
            encode(&mut Session::new(&params), &input, None),
            Err(EncodeError::BadEos)
        ));
        // wrong feature dim
        let input = InterleavedInput {
            segments: vec![
                Segment::Image { features: vec![0.0; 3] },
                Segment::Text {
                    tokens: vec![cfg.vocab_size - 1],
                },
            ],
            eos_token: cfg.vocab_size - 1,
        };
        assert!(matches!(
            encode(&mut Session::new(&params), &input, None),
            Err(EncodeError::BadFeatureDim { .. })
        ));
    }

    #[test]
    fn encode_is_deterministic_and_batch_equivariant() {
        let cfg = tiny_encoder();
        let params = init_params(&cfg, 2);
        let a = tiny_input(&cfg);
        let mut b = tiny_input(&cfg);
        if let Segment::Text { tokens } = &mut b.segments[1] {
            tokens[0] = 5;
        }
        let emb = |inp: &InterleavedInput| embed_for_retrieval(&params, inp).unwrap();
        // identical entities -> identical embeddings
        assert_eq!(emb(&a), emb(&a));
        // a batch is a map over inputs: permuting inputs permutes outputs
        let batch1 = [emb(&a), emb(&b)];
        let batch2 = [emb(&b), emb(&a)];
        assert_eq!(batch1[0], batch2[1]);
        assert_eq!(batch1[1], batch2[0]);
    }

    #[test]
    fn retrieval_embedding_is_unit_norm() {
        let cfg = tiny_encoder();
        let params = init_params(&cfg, 3);
        let v = embed_for_retrieval(&params, &tiny_input(&cfg)).unwrap();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        let cos: f64 = v.iter().map(|x| x * x).sum();
        assert!((cos - 1.0).abs() < 1e-9);
    }

    #[test]
    fn h_eos_depends_on_every_slot() {
        let cfg = tiny_encoder();
        let params = init_params(&cfg, 4);
        let base = embed_for_retrieval(&params, &tiny_input(&cfg)).unwrap();
        // perturb one image coordinate
        let mut p1 = tiny_input(&cfg);
        if let Segment::Image { features } = &mut p1.segments[0] {
            features[3] += 0.25;
        }
        assert_ne!(base, embed_for_retrieval(&params, &p1).unwrap());
        // change one non-EOS token
        let mut p2 = tiny_input(&cfg);
        if let Segment::Text { tokens } = &mut p2.segments[1] {
            tokens[1] = 9;
        }
        assert_ne!(base, embed_for_retrieval(&params, &p2).unwrap());
    }

    #[test]
    fn gradient_of_eos_probe_matches_finite_differences() {
        let cfg = tiny_encoder();
        let mut params = init_params(&cfg, 5);
        let input = tiny_input(&cfg);

        let loss_of = |params: &ModelParams| -> f64 {
            let mut sess = Session::new(params);
            let enc = encode(&mut sess, &input, None).unwrap();
            let l = sess.tape.sum_all(enc.h_eos);
            sess.tape.scalar(l)
        };
        let mut sess = Session::new(&params);
        let enc = encode(&mut sess, &input, None).unwrap();
        let loss = sess.tape.sum_all(enc.h_eos);
        let grads = sess.tape.backward(loss);
        let by_name = sess.tape.param_grads(&grads);

        let eps = 1e-6;
        let mut rng = seeded(11, Stream::Other);
        for name in ["proj.w", "embed.table", "lm.0.attn.wq", "lm.1.mlp.w2"] {
            let g = &by_name[name];
            for _ in 0..5 {
                let r = rng.gen_range(0..g.nrows());
                let c = rng.gen_range(0..g.ncols());
                let orig = params.tensors[name][[r, c]];
                params.tensors.get_mut(name).unwrap()[[r, c]] = orig + eps;
                let up = loss_of(&params);
                params.tensors.get_mut(name).unwrap()[[r, c]] = orig - eps;
                let down = loss_of(&params);
                params.tensors.get_mut(name).unwrap()[[r, c]] = orig;
                let fd = (up - down) / (2.0 * eps);
                let an = g[[r, c]];
                // below the FD noise floor both sides are numeric zero
                let denom = fd.abs().max(an.abs());
                assert!(
                    denom < 1e-6 || ((fd - an) / denom).abs() < 1e-4,
                    "{name}[{r},{c}]: fd={fd} analytic={an}"
                );
            }
        }
    }

    use crate::rng::{seeded, Stream};
    use rand::Rng;
}
