//! Training loop: AdamW with linear warmup, ablation presets over the loss
//! terms, LoRA or full fine-tuning, a divergence guard, and versioned binary
//! checkpoints that reproduce the next step bitwise after reload.

use crate::catalog::Catalog;
use crate::coral::{apply_lora, coral_objective, CoralHyper, LossBreakdown};
use crate::encoder::{
    build_product_input, build_query_input, init_params, EncoderConfig, InputMode,
    InterleavedInput, ModelParams, Session,
};
use crate::rng::{seeded, Stream};
use crate::sampler::Query;
use crate::tensor::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    NoData,
    #[error("loss diverged (non-finite) at step {0}")]
    Diverged(u64),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Loss(#[from] crate::coral::LossError),
    #[error(transparent)]
    Encode(#[from] crate::encoder::EncodeError),
    #[error(transparent)]
    Catalog(#[from] crate::catalog::CatalogError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

/// Which loss terms are active, mirroring the ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationPreset {
    /// Contrastive learning only.
    Cl,
    /// Contrastive plus vision reconstruction.
    ClVision,
    /// Contrastive plus language reconstruction.
    ClLanguage,
    /// Both reconstruction streams.
    Coral,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneMode {
    Full,
    Lora,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub global_batch: usize,
    /// Peak learning rate. Paper-scale defaults are 1e-5 (full) and 1e-4
    /// (LoRA); the desk presets override this since the toy model needs a
    /// larger step to move in one epoch.
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub preset: AblationPreset,
    pub finetune: FinetuneMode,
    pub input_mode: InputMode,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
    pub hyper: CoralHyper,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            global_batch: 64,
            lr: 1e-5,
            weight_decay: 5e-4,
            warmup_ratio: 0.01,
            epochs: 1,
            preset: AblationPreset::Coral,
            finetune: FinetuneMode::Full,
            input_mode: InputMode::Seq,
            lora_rank: 8,
            lora_alpha: 16.0,
            lora_dropout: 0.05,
            hyper: CoralHyper::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Paper-scale LoRA defaults: 10x the full fine-tuning learning rate.
    pub fn lora_default() -> Self {
        TrainConfig {
            lr: 1e-4,
            finetune: FinetuneMode::Lora,
            ..TrainConfig::default()
        }
    }

    /// The hyperparameters with the preset's term gating applied.
    pub fn effective_hyper(&self) -> CoralHyper {
        let mut h = self.hyper;
        match self.preset {
            AblationPreset::Cl => {
                h.lambda1 = 0.0;
                h.lambda2 = 0.0;
                h.vision_terms = false;
                h.language_terms = false;
            }
            AblationPreset::ClVision => {
                h.vision_terms = true;
                h.language_terms = false;
            }
            AblationPreset::ClLanguage => {
                h.vision_terms = false;
                h.language_terms = true;
            }
            AblationPreset::Coral => {
                h.vision_terms = true;
                h.language_terms = true;
            }
        }
        h
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.global_batch < 2 {
            return Err(TrainError::InvalidConfig(
                "global_batch must be >= 2 for in-batch negatives".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(TrainError::InvalidConfig(
                "warmup_ratio must be in [0, 1]".into(),
            ));
        }
        if self.lr < 0.0 || self.weight_decay < 0.0 {
            return Err(TrainError::InvalidConfig(
                "lr and weight_decay must be >= 0".into(),
            ));
        }
        self.hyper.validate()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Matrix>,
    pub v: BTreeMap<String, Matrix>,
    pub t: u64,
}

/// Decoupled weight decay step. Decay skips row vectors (biases) and the
/// layer-norm affine terms.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Matrix>,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    for (name, g) in grads {
        if !params.is_trainable(name) {
            continue;
        }
        let w = params.tensors.get_mut(name).expect("unknown tensor in grads");
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Matrix::zeros(g.dim()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Matrix::zeros(g.dim()));
        let decay = w.nrows() > 1 && !name.contains(".ln");
        for ((wv, gv), (mv, vv)) in w.iter_mut().zip(g.iter()).zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mv = BETA1 * *mv + (1.0 - BETA1) * gv;
            *vv = BETA2 * *vv + (1.0 - BETA2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            if decay {
                *wv -= lr * weight_decay * *wv;
            }
            *wv -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}

/// Linear warmup to the peak, then constant. Step 0 runs at lr = 0; the peak
/// is reached at `ceil(warmup_ratio * total_steps)`.
pub fn lr_at(step: u64, total_steps: u64, peak: f64, warmup_ratio: f64) -> f64 {
    let warm = (warmup_ratio * total_steps as f64).ceil() as u64;
    if warm == 0 || step >= warm {
        peak
    } else {
        peak * step as f64 / warm as f64
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub opt: AdamState,
    pub step: u64,
    pub config_hash: String,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub steps: Vec<StepRecord>,
}

pub fn config_hash(enc: &EncoderConfig, cfg: &TrainConfig) -> String {
    let blob = serde_json::to_string(&(enc, cfg)).expect("config serializes");
    let mut h = Sha256::new();
    h.update(blob.as_bytes());
    hex_string(&h.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One optimizer step over an aligned batch of query/target inputs.
pub fn training_step(
    params: &mut ModelParams,
    opt: &mut AdamState,
    rng: &mut ChaCha8Rng,
    q_inputs: &[InterleavedInput],
    t_inputs: &[InterleavedInput],
    hyper: &CoralHyper,
    lr: f64,
    weight_decay: f64,
) -> Result<LossBreakdown, TrainError> {
    let mut sess = Session::training(params);
    let out = coral_objective(&mut sess, q_inputs, t_inputs, hyper, rng)?;
    let grads = sess.tape.backward(out.total);
    let by_name = sess.tape.param_grads(&grads);
    adamw_step(params, &by_name, opt, lr, weight_decay);
    Ok(out.breakdown)
}

/// Training pair: encoder inputs plus the positive-set bookkeeping used to
/// keep a query's other true positives out of its in-batch negatives.
struct TrainPair {
    query: InterleavedInput,
    target: InterleavedInput,
    target_idx: usize,
    positive_idx: BTreeSet<usize>,
}

/// Build (query, primary-positive) input pairs. The first ranked positive is
/// the training target.
fn build_pairs(
    catalog: &Catalog,
    queries: &[Query],
    mode: InputMode,
) -> Result<Vec<TrainPair>, TrainError> {
    let mut pairs = Vec::with_capacity(queries.len());
    for q in queries {
        let qi = build_query_input(q, catalog, mode)?;
        let pid = q.positives.first().ok_or(TrainError::NoData)?;
        let product = catalog
            .product(pid)
            .ok_or_else(|| TrainError::InvalidConfig(format!("unknown positive {pid}")))?;
        let ti = build_product_input(product, mode, catalog.vocab.eos)?;
        let positive_idx: BTreeSet<usize> = q
            .positives
            .iter()
            .filter_map(|p| catalog.index_of(p))
            .collect();
        pairs.push(TrainPair {
            query: qi,
            target: ti,
            target_idx: catalog.index_of(pid).unwrap_or(usize::MAX),
            positive_idx,
        });
    }
    Ok(pairs)
}

/// Greedy batch assembly that keeps any query's true positives out of the
/// batch it lands in. At a small pool scale roughly one in thirteen random
/// batch slots would otherwise be a false negative, which the sharp InfoNCE
/// temperature amplifies badly. Conflicting entries are deferred to later
/// batches; irreducible leftovers are emitted as-is.
fn assemble_batches(pairs: &[TrainPair], order: &[usize], batch: usize) -> Vec<Vec<usize>> {
    let conflicts = |members: &[usize], cand: usize| -> bool {
        members.iter().any(|&m| {
            pairs[m].positive_idx.contains(&pairs[cand].target_idx)
                || pairs[cand].positive_idx.contains(&pairs[m].target_idx)
        })
    };
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::with_capacity(batch);
    let mut pending: Vec<usize> = Vec::new();
    let mut feed = order.iter().copied();
    loop {
        // refill from deferred entries first, then the shuffled stream
        let mut progressed = false;
        pending.retain(|&cand| {
            if current.len() < batch && !conflicts(&current, cand) {
                current.push(cand);
                progressed = true;
                false
            } else {
                true
            }
        });
        while current.len() < batch {
            let Some(cand) = feed.next() else { break };
            if conflicts(&current, cand) {
                pending.push(cand);
            } else {
                current.push(cand);
            }
            progressed = true;
        }
        if current.len() == batch {
            batches.push(std::mem::take(&mut current));
            continue;
        }
        if !progressed {
            break;
        }
    }
    // leftovers: current partial batch, then conflicting stragglers
    for cand in pending {
        if current.len() >= batch {
            batches.push(std::mem::take(&mut current));
        }
        current.push(cand);
    }
    if current.len() >= 2 {
        batches.push(current);
    }
    batches
}

/// Run the configured epochs and return the final checkpoint plus the loss
/// curve. Deterministic in `(catalog, queries, configs, seed)`.
pub fn train(
    catalog: &Catalog,
    train_queries: &[Query],
    enc: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    if train_queries.is_empty() {
        return Err(TrainError::NoData);
    }
    let mut params = init_params(enc, cfg.seed);
    if cfg.finetune == FinetuneMode::Lora {
        params = apply_lora(&params, cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout)?;
    }
    let hyper = cfg.effective_hyper();
    let pairs = build_pairs(catalog, train_queries, cfg.input_mode)?;

    let n = pairs.len();
    let steps_per_epoch = batch_starts(n, cfg.global_batch).len() as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;

    let mut rng = seeded(cfg.seed, Stream::Train);
    let mut opt = AdamState::default();
    let mut records = Vec::new();
    let mut step: u64 = 0;
    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for idx in assemble_batches(&pairs, &order, cfg.global_batch) {
            let q_inputs: Vec<InterleavedInput> =
                idx.iter().map(|&i| pairs[i].query.clone()).collect();
            let t_inputs: Vec<InterleavedInput> =
                idx.iter().map(|&i| pairs[i].target.clone()).collect();
            let lr = lr_at(step, total_steps, cfg.lr, cfg.warmup_ratio);
            let loss = training_step(
                &mut params,
                &mut opt,
                &mut rng,
                &q_inputs,
                &t_inputs,
                &hyper,
                lr,
                cfg.weight_decay,
            )?;
            if !loss.total.is_finite() {
                return Err(TrainError::Diverged(step));
            }
            records.push(StepRecord { step, lr, loss });
            step += 1;
        }
    }

    let checkpoint = Checkpoint {
        params,
        opt,
        step,
        config_hash: config_hash(enc, cfg),
        rng_seed: cfg.seed,
        rng_word_pos: rng.get_word_pos(),
    };
    Ok(TrainOutput {
        checkpoint,
        steps: records,
    })
}

/// Batch offsets, keeping a trailing partial batch when it still has the two
/// samples in-batch negatives need.
fn batch_starts(n: usize, batch: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut at = 0;
    while at + batch <= n {
        out.push((at, batch));
        at += batch;
    }
    if n - at >= 2 {
        out.push((at, n - at));
    }
    out
}

// ---------------------------------------------------------------------------
// Gradient audit
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuditEntry {
    pub preset: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuditReport {
    pub entries: Vec<AuditEntry>,
    pub max_rel_err: f64,
    pub runtime_secs: f64,
}

/// Central finite differences against the analytic gradients for every
/// preset, on a d=16 toy model. Near-zero pairs (both below the FD noise
/// floor) count as agreement.
pub fn gradient_audit(seed: u64) -> Result<AuditReport, TrainError> {
    use crate::catalog::{generate_catalog, refine_attributes, CatalogConfig};
    use crate::sampler::{compose_query_set, SamplerConfig};

    let started = std::time::Instant::now();
    let enc = EncoderConfig {
        d: 16,
        d_v: 8,
        n_v_slots: 2,
        n_layers: 2,
        vocab_size: 128,
        max_seq_len: 64,
        mlp_mult: 2,
    };
    let cat_cfg = CatalogConfig {
        categories: vec!["clothing/tops".into(), "food/beverages".into()],
        products_per_category: 60,
        attributes_per_category: 5,
        values_per_attribute: 4,
        language_scoped_attributes: 1,
        d_v: enc.d_v,
        vocab_size: enc.vocab_size,
        title_attr_limit: 4,
        ..CatalogConfig::default()
    };
    let catalog = refine_attributes(&generate_catalog(&cat_cfg, seed)?);
    let mut srng = seeded(seed, Stream::Sampler);
    let qs = compose_query_set(&catalog, &SamplerConfig::default(), 4, &mut srng)
        .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    let pairs = build_pairs(&catalog, &qs.queries, InputMode::Seq)?;
    let q_inputs: Vec<InterleavedInput> = pairs.iter().map(|p| p.query.clone()).collect();
    let t_inputs: Vec<InterleavedInput> = pairs.iter().map(|p| p.target.clone()).collect();

    let presets = [
        AblationPreset::Cl,
        AblationPreset::ClVision,
        AblationPreset::ClLanguage,
        AblationPreset::Coral,
    ];
    let mut entries = Vec::new();
    let mut overall: f64 = 0.0;
    for preset in presets {
        let cfg = TrainConfig {
            preset,
            ..TrainConfig::default()
        };
        let hyper = cfg.effective_hyper();
        let mut params = init_params(&enc, seed ^ 0x5eed);

        let loss_of = |p: &ModelParams| -> f64 {
            let mut rng = seeded(seed, Stream::Train);
            let mut sess = Session::training(p);
            coral_objective(&mut sess, &q_inputs, &t_inputs, &hyper, &mut rng)
                .expect("objective evaluates")
                .breakdown
                .total
        };
        // zero perturbation sanity: re-evaluation is bit-identical
        debug_assert_eq!(loss_of(&params), loss_of(&params));

        let mut rng = seeded(seed, Stream::Train);
        let mut sess = Session::training(&params);
        let out = coral_objective(&mut sess, &q_inputs, &t_inputs, &hyper, &mut rng)?;
        let grads = sess.tape.backward(out.total);
        let by_name = sess.tape.param_grads(&grads);

        let names: Vec<String> = params.trainable_names();
        let mut pick = seeded(seed ^ 0xa0d1, Stream::Other);
        let mut max_rel: f64 = 0.0;
        let mut checked = 0;
        let eps = 1e-5;
        while checked < 24 {
            let name = &names[pick.gen_range(0..names.len())];
            let dim = params.tensors[name].dim();
            let r = pick.gen_range(0..dim.0);
            let c = pick.gen_range(0..dim.1);
            let analytic = by_name.get(name).map(|g| g[[r, c]]).unwrap_or(0.0);
            let orig = params.tensors[name][[r, c]];
            params.tensors.get_mut(name).unwrap()[[r, c]] = orig + eps;
            let up = loss_of(&params);
            params.tensors.get_mut(name).unwrap()[[r, c]] = orig - eps;
            let down = loss_of(&params);
            params.tensors.get_mut(name).unwrap()[[r, c]] = orig;
            let fd = (up - down) / (2.0 * eps);
            let denom = fd.abs().max(analytic.abs());
            if denom >= 1e-6 {
                max_rel = max_rel.max(((fd - analytic) / denom).abs());
            }
            checked += 1;
        }
        overall = overall.max(max_rel);
        entries.push(AuditEntry {
            preset: format!("{preset:?}"),
            max_rel_err: max_rel,
            checked,
        });
    }

    Ok(AuditReport {
        entries,
        max_rel_err: overall,
        runtime_secs: started.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// Checkpoint serialization: versioned binary, little-endian f64 payloads.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"CRCK";
const CKPT_VERSION: u32 = 1;

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn put_matrix(buf: &mut Vec<u8>, m: &Matrix) {
    buf.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for x in m.iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_tensor_map(buf: &mut Vec<u8>, map: &BTreeMap<String, Matrix>) {
    buf.extend_from_slice(&(map.len() as u32).to_le_bytes());
    for (name, m) in map {
        put_str(buf, name);
        put_matrix(buf, m);
    }
}

pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    put_str(&mut buf, &ckpt.config_hash);
    buf.extend_from_slice(&ckpt.params.seed.to_le_bytes());
    buf.extend_from_slice(&ckpt.step.to_le_bytes());
    buf.extend_from_slice(&ckpt.rng_seed.to_le_bytes());
    buf.extend_from_slice(&ckpt.rng_word_pos.to_le_bytes());
    let enc_json = serde_json::to_string(&ckpt.params.config).expect("encoder config serializes");
    put_str(&mut buf, &enc_json);
    match ckpt.params.lora {
        None => buf.push(0),
        Some(l) => {
            buf.push(1);
            buf.extend_from_slice(&(l.rank as u64).to_le_bytes());
            buf.extend_from_slice(&l.alpha.to_le_bytes());
            buf.extend_from_slice(&l.dropout.to_le_bytes());
        }
    }
    put_tensor_map(&mut buf, &ckpt.params.tensors);
    put_tensor_map(&mut buf, &ckpt.opt.m);
    put_tensor_map(&mut buf, &ckpt.opt.v);
    buf.extend_from_slice(&ckpt.opt.t.to_le_bytes());
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.at + n > self.buf.len() {
            return Err(TrainError::BadCheckpoint("truncated".into()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128, TrainError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, TrainError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String, TrainError> {
        let n = self.u32()? as usize;
        let s = self.take(n)?;
        String::from_utf8(s.to_vec()).map_err(|e| TrainError::BadCheckpoint(e.to_string()))
    }
    fn matrix(&mut self) -> Result<Matrix, TrainError> {
        let r = self.u32()? as usize;
        let c = self.u32()? as usize;
        let mut m = Matrix::zeros((r, c));
        for x in m.iter_mut() {
            *x = self.f64()?;
        }
        Ok(m)
    }
    fn tensor_map(&mut self) -> Result<BTreeMap<String, Matrix>, TrainError> {
        let n = self.u32()? as usize;
        let mut map = BTreeMap::new();
        for _ in 0..n {
            let name = self.string()?;
            let m = self.matrix()?;
            map.insert(name, m);
        }
        Ok(map)
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint, TrainError> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return Err(TrainError::BadCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(TrainError::BadCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let config_hash = r.string()?;
    let seed = r.u64()?;
    let step = r.u64()?;
    let rng_seed = r.u64()?;
    let rng_word_pos = r.u128()?;
    let enc_json = r.string()?;
    let config: EncoderConfig =
        serde_json::from_str(&enc_json).map_err(|e| TrainError::BadCheckpoint(e.to_string()))?;
    let lora = match r.take(1)?[0] {
        0 => None,
        1 => Some(crate::encoder::LoraConfig {
            rank: r.u64()? as usize,
            alpha: r.f64()?,
            dropout: r.f64()?,
        }),
        _ => return Err(TrainError::BadCheckpoint("bad lora flag".into())),
    };
    let tensors = r.tensor_map()?;
    let m = r.tensor_map()?;
    let v = r.tensor_map()?;
    let t = r.u64()?;
    Ok(Checkpoint {
        params: ModelParams {
            config,
            tensors,
            lora,
            seed,
        },
        opt: AdamState { m, v, t },
        step,
        config_hash,
        rng_seed,
        rng_word_pos,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    let bytes = checkpoint_to_bytes(ckpt);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    checkpoint_from_bytes(&bytes)
}

/// SHA-256 of the serialized checkpoint.
pub fn checkpoint_digest(ckpt: &Checkpoint) -> String {
    let mut h = Sha256::new();
    h.update(checkpoint_to_bytes(ckpt));
    hex_string(&h.finalize())
}

/// Restore a ChaCha stream to a saved position.
pub fn restore_rng(seed: u64, word_pos: u128) -> ChaCha8Rng {
    let mut rng = seeded(seed, Stream::Train);
    rng.set_word_pos(word_pos);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{generate_catalog, refine_attributes, CatalogConfig};
    use crate::sampler::{compose_query_set, SamplerConfig};

    fn tiny_world() -> (Catalog, Vec<Query>, EncoderConfig) {
        let enc = EncoderConfig {
            d: 16,
            d_v: 8,
            n_v_slots: 2,
            n_layers: 1,
            vocab_size: 128,
            max_seq_len: 64,
            mlp_mult: 2,
        };
        let cat_cfg = CatalogConfig {
            categories: vec!["clothing/tops".into()],
            products_per_category: 80,
            attributes_per_category: 5,
            values_per_attribute: 4,
            language_scoped_attributes: 1,
            d_v: enc.d_v,
            vocab_size: enc.vocab_size,
            title_attr_limit: 4,
            ..CatalogConfig::default()
        };
        let catalog = refine_attributes(&generate_catalog(&cat_cfg, 3).unwrap());
        let mut rng = seeded(3, Stream::Sampler);
        let qs = compose_query_set(&catalog, &SamplerConfig::default(), 24, &mut rng).unwrap();
        (catalog, qs.queries, enc)
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            global_batch: 8,
            lr: 1e-3,
            epochs: 1,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn warmup_schedule_shape() {
        // 100 steps at ratio 0.01: peak from step ceil(1) = 1
        assert_eq!(lr_at(0, 100, 2.0, 0.01), 0.0);
        assert_eq!(lr_at(1, 100, 2.0, 0.01), 2.0);
        assert_eq!(lr_at(99, 100, 2.0, 0.01), 2.0);
        // longer warmup ramps linearly
        assert_eq!(lr_at(0, 100, 1.0, 0.1), 0.0);
        assert!((lr_at(5, 100, 1.0, 0.1) - 0.5).abs() < 1e-12);
        assert_eq!(lr_at(10, 100, 1.0, 0.1), 1.0);
    }

    #[test]
    fn cl_preset_equals_coral_with_zero_weights() {
        let (catalog, queries, enc) = tiny_world();
        let a = train(
            &catalog,
            &queries,
            &enc,
            &TrainConfig {
                preset: AblationPreset::Cl,
                ..tiny_train_cfg()
            },
        )
        .unwrap();
        let b = train(
            &catalog,
            &queries,
            &enc,
            &TrainConfig {
                preset: AblationPreset::Coral,
                hyper: CoralHyper {
                    lambda1: 0.0,
                    lambda2: 0.0,
                    vision_terms: false,
                    language_terms: false,
                    ..CoralHyper::default()
                },
                ..tiny_train_cfg()
            },
        )
        .unwrap();
        let curve_a: Vec<f64> = a.steps.iter().map(|s| s.loss.total).collect();
        let curve_b: Vec<f64> = b.steps.iter().map(|s| s.loss.total).collect();
        assert_eq!(curve_a, curve_b);
    }

    #[test]
    fn zero_lr_keeps_parameters_and_curve_flat() {
        let (catalog, queries, enc) = tiny_world();
        // one full batch per epoch so every step scores the same data
        let cfg = TrainConfig {
            lr: 0.0,
            global_batch: queries.len(),
            epochs: 3,
            preset: AblationPreset::Cl,
            seed: 5,
            ..TrainConfig::default()
        };
        let out = train(&catalog, &queries, &enc, &cfg).unwrap();
        let init = init_params(&enc, cfg.seed);
        for (name, m) in &init.tensors {
            assert_eq!(m, &out.checkpoint.params.tensors[name], "{name} changed");
        }
        let cls: Vec<f64> = out.steps.iter().map(|s| s.loss.l_cl).collect();
        assert_eq!(cls.len(), 3);
        for w in cls.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-9, "l_cl moved with lr = 0: {cls:?}");
        }
    }

    #[test]
    fn training_is_reproducible() {
        let (catalog, queries, enc) = tiny_world();
        let cfg = tiny_train_cfg();
        let a = train(&catalog, &queries, &enc, &cfg).unwrap();
        let b = train(&catalog, &queries, &enc, &cfg).unwrap();
        assert_eq!(checkpoint_digest(&a.checkpoint), checkpoint_digest(&b.checkpoint));
        assert_eq!(a.steps, b.steps);
    }

    #[test]
    fn frozen_tensors_stay_bitwise_identical() {
        let (catalog, queries, enc) = tiny_world();
        let cfg = tiny_train_cfg();
        let out = train(&catalog, &queries, &enc, &cfg).unwrap();
        let init = init_params(&enc, cfg.seed);
        for (name, m) in &init.tensors {
            if name.starts_with("vision.") {
                let trained = &out.checkpoint.params.tensors[name];
                assert_eq!(m, trained, "frozen tower tensor {name} changed");
            }
        }

        // LoRA: base sequence-model weights and the token table stay frozen
        let lora_cfg = TrainConfig {
            finetune: FinetuneMode::Lora,
            lr: 1e-3,
            ..tiny_train_cfg()
        };
        let out = train(&catalog, &queries, &enc, &lora_cfg).unwrap();
        let base = apply_lora(
            &init_params(&enc, lora_cfg.seed),
            lora_cfg.lora_rank,
            lora_cfg.lora_alpha,
            lora_cfg.lora_dropout,
        )
        .unwrap();
        let mut adapters_moved = false;
        for (name, m) in &base.tensors {
            let trained = &out.checkpoint.params.tensors[name];
            if !base.is_trainable(name) {
                assert_eq!(m, trained, "frozen tensor {name} changed under LoRA");
            } else if name.contains(".lora_") && m != trained {
                adapters_moved = true;
            }
        }
        assert!(adapters_moved, "adapters never updated");
    }

    #[test]
    fn divergence_is_reported() {
        let (catalog, queries, enc) = tiny_world();
        let cfg = TrainConfig {
            // the first update pushes weights past 1e190, so the next forward
            // overflows and the guard must fire
            lr: 1e200,
            global_batch: 8,
            epochs: 2,
            seed: 5,
            ..TrainConfig::default()
        };
        match train(&catalog, &queries, &enc, &cfg) {
            Err(TrainError::Diverged(_)) => {}
            other => panic!("expected divergence, got {:?}", other.map(|o| o.checkpoint.step)),
        }
    }

    #[test]
    fn checkpoint_round_trip_and_next_step_bitwise() {
        let (catalog, queries, enc) = tiny_world();
        let cfg = tiny_train_cfg();
        let out = train(&catalog, &queries, &enc, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&out.checkpoint, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(out.checkpoint, loaded);

        // one more step from the in-memory state vs the reloaded state
        let hyper = cfg.effective_hyper();
        let pairs = build_pairs(&catalog, &queries[..8], cfg.input_mode).unwrap();
        let qi: Vec<InterleavedInput> = pairs.iter().map(|p| p.query.clone()).collect();
        let ti: Vec<InterleavedInput> = pairs.iter().map(|p| p.target.clone()).collect();

        let mut mem = out.checkpoint;
        let mut mem_rng = restore_rng(mem.rng_seed, mem.rng_word_pos);
        let la = training_step(
            &mut mem.params, &mut mem.opt, &mut mem_rng, &qi, &ti, &hyper, cfg.lr, cfg.weight_decay,
        )
        .unwrap();

        let mut re = loaded;
        let mut re_rng = restore_rng(re.rng_seed, re.rng_word_pos);
        let lb = training_step(
            &mut re.params, &mut re.opt, &mut re_rng, &qi, &ti, &hyper, cfg.lr, cfg.weight_decay,
        )
        .unwrap();

        assert_eq!(la, lb);
        assert_eq!(checkpoint_digest(&mem), checkpoint_digest(&re));
    }

    #[test]
    fn gradient_audit_passes_for_all_presets() {
        let report = gradient_audit(7).unwrap();
        assert_eq!(report.entries.len(), 4);
        for e in &report.entries {
            assert!(
                e.max_rel_err < 1e-4,
                "{}: max rel err {}",
                e.preset,
                e.max_rel_err
            );
        }
        assert!(report.runtime_secs < 60.0);
    }
}
