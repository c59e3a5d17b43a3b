//! Training loop: configuration, block selection, the combined objective per
//! batch, Adam updates, checkpoints and the metrics log.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{CorpusError, LabeledSequence, LabelingOptions, Record, Vocabulary};
use crate::encoder::{Encoder, EncoderError, ModelConfig, NamedTensor};
use crate::objectives::{self, LossBundle, ObjectiveError};
use crate::tensor::{finite_diff_check, GradCheckReport, NodeId, Tape, TensorError};

pub const CHECKPOINT_FORMAT: &str = "ebdreg-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error("non-finite loss at step {step}; last good checkpoint: {}", last_checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    NonFinite { step: usize, last_checkpoint: Option<PathBuf> },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Which blocks receive attention and sub-inference supervision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockStrategy {
    #[serde(rename = "all")]
    All,
    #[serde(rename = "top-1")]
    Top1,
    #[serde(rename = "top-3")]
    Top3,
    #[serde(rename = "top-6")]
    Top6,
    #[serde(rename = "bottom-3")]
    Bottom3,
    #[serde(rename = "bottom-6")]
    Bottom6,
    #[serde(rename = "alternating-6")]
    Alternating6,
}

impl BlockStrategy {
    pub const ALL: [BlockStrategy; 7] = [
        BlockStrategy::All,
        BlockStrategy::Top1,
        BlockStrategy::Top3,
        BlockStrategy::Top6,
        BlockStrategy::Bottom3,
        BlockStrategy::Bottom6,
        BlockStrategy::Alternating6,
    ];
}

/// 1-based, ascending block indices for `strategy` on a `num_blocks` encoder.
/// Strategies asking for more blocks than exist are clipped with a warning.
pub fn resolve_blocks(strategy: BlockStrategy, num_blocks: usize) -> Vec<usize> {
    assert!(num_blocks >= 1, "encoder has no blocks");
    let take = |want: usize| {
        if want > num_blocks {
            warn!("{strategy:?} asks for {want} blocks but the encoder has {num_blocks}; clipping");
        }
        want.min(num_blocks)
    };
    let mut out: Vec<usize> = match strategy {
        BlockStrategy::All => (1..=num_blocks).collect(),
        BlockStrategy::Top1 => vec![num_blocks],
        BlockStrategy::Top3 => (num_blocks + 1 - take(3)..=num_blocks).collect(),
        BlockStrategy::Top6 => (num_blocks + 1 - take(6)..=num_blocks).collect(),
        BlockStrategy::Bottom3 => (1..=take(3)).collect(),
        BlockStrategy::Bottom6 => (1..=take(6)).collect(),
        BlockStrategy::Alternating6 => {
            let v: Vec<usize> = (1..=num_blocks).rev().step_by(2).take(6).collect();
            if v.len() < 6 {
                warn!("alternating-6 yields {} blocks on a {num_blocks}-block encoder", v.len());
            }
            v
        }
    };
    out.sort_unstable();
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSwitches {
    pub er: bool,
    pub sa: bool,
    pub si: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        Self {
            er: true,
            sa: true,
            si: true,
        }
    }
}

/// Input files. Only the CLI reads these; library calls take data directly.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    /// Fixed vocabulary file; built from the training split when absent.
    pub vocab: Option<PathBuf>,
    /// Synonym lexicon for swap evaluation.
    pub lexicon: Option<PathBuf>,
}

/// Settings for the analysis commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// `bias`, `keyword-intersect` or `keyword-distinct`.
    pub swap_category: String,
    pub swap_rounds: usize,
    /// Blocks for attention reports; the supervised set when empty.
    pub report_blocks: Vec<usize>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            swap_category: "bias".into(),
            swap_rounds: 8,
            report_blocks: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub block_strategy: BlockStrategy,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Optimizer steps; overrides `epochs` when set.
    pub steps: Option<usize>,
    pub epochs: usize,
    pub seed: u64,
    pub losses: LossSwitches,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Squared rather than absolute attention deviations.
    pub sa_squared: bool,
    pub stopwords: Vec<String>,
    pub model: ModelConfig,
    pub data: DataPaths,
    pub checkpoint_interval: Option<usize>,
    pub checkpoint_path: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    pub analysis: AnalysisConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            beta: 0.8,
            block_strategy: BlockStrategy::Top3,
            learning_rate: 1e-3,
            batch_size: 32,
            steps: None,
            epochs: 1,
            seed: 0,
            losses: LossSwitches::default(),
            clip_norm: Some(1.0),
            sa_squared: false,
            stopwords: Vec::new(),
            model: ModelConfig::default(),
            data: DataPaths::default(),
            checkpoint_interval: None,
            checkpoint_path: None,
            metrics_path: None,
            analysis: AnalysisConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("alpha and beta must be finite and non-negative, got {} and {}", self.alpha, self.beta));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        if self.checkpoint_interval == Some(0) {
            return bad("checkpoint_interval must be at least 1".into());
        }
        self.model.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn labeling(&self) -> LabelingOptions {
        LabelingOptions {
            stopwords: self.stopwords.clone(),
        }
    }

    pub fn supervised_blocks(&self) -> Vec<usize> {
        resolve_blocks(self.block_strategy, self.model.blocks)
    }

    /// Whether the block-level terms run at all.
    pub fn block_terms_active(&self) -> bool {
        self.beta > 0.0 && (self.losses.sa || self.losses.si)
    }

    /// SHA-256 over the settings that shape the optimization trajectory.
    /// Run length, file locations and analysis settings are excluded so a
    /// resumed run with more steps still matches.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            for k in ["steps", "epochs", "checkpoint_interval", "checkpoint_path", "metrics_path", "data", "analysis"] {
                m.remove(k);
            }
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

/// A trained or freshly initialized model with its vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub vocab: Vocabulary,
    pub encoder: Encoder,
}

impl Model {
    pub fn new(vocab: Vocabulary, config: ModelConfig, seed: u64) -> Result<Self, EncoderError> {
        let encoder = Encoder::new(config, vocab.len(), seed)?;
        Ok(Self { vocab, encoder })
    }

    pub fn tokens(&self, record: &Record) -> Result<Vec<u32>, CorpusError> {
        crate::corpus::assemble_pair(&record.premise, &record.hypothesis, &self.vocab)
    }
}

/// Labels `records` for training. Pairs longer than `max_len` are dropped
/// with a warning; the second value counts them.
pub fn prepare(
    records: &[Record],
    vocab: &Vocabulary,
    options: &LabelingOptions,
    max_len: usize,
) -> Result<(Vec<LabeledSequence>, usize), CorpusError> {
    let mut out = Vec::with_capacity(records.len());
    let mut dropped = 0;
    for r in records {
        if r.pair_len() > max_len {
            dropped += 1;
            continue;
        }
        out.push(LabeledSequence::from_record(r, vocab, options)?);
    }
    if dropped > 0 {
        warn!("dropped {dropped} pairs longer than {max_len} tokens");
    }
    Ok((out, dropped))
}

/// Adam state, one moment pair per parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(encoder: &Encoder) -> Self {
        let zeros: Vec<Vec<f64>> = encoder.params().iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, encoder: &mut Encoder, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = encoder.param_mut(i).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..g.len() {
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Per-example loss graph: the scalar objective and its components.
struct ExampleLoss {
    total: NodeId,
    main: NodeId,
    er: Option<NodeId>,
    sa: Vec<NodeId>,
    si: Vec<NodeId>,
    bundle: LossBundle,
}

fn example_loss(
    tape: &mut Tape,
    encoder: &Encoder,
    bound: &crate::encoder::Bound,
    seq: &LabeledSequence,
    config: &TrainConfig,
    blocks: &[usize],
) -> Result<ExampleLoss, TrainError> {
    let top = encoder.blocks();
    let full = encoder.encode_on(tape, bound, &seq.tokens)?;
    let mut mains: BTreeMap<usize, NodeId> = BTreeMap::new();
    let main = encoder.relation_on(tape, bound, full[top - 1]);
    mains.insert(top, main);
    let l_main = objectives::loss_main_on(tape, main, seq.gold);
    let mut total = l_main;
    let supervised = seq.supervised();

    let mut l_er_v = 0.0;
    let mut er_node = None;
    if config.losses.er && supervised {
        let tok = encoder.classify_tokens_on(tape, bound, full[top - 1]);
        let l_er = objectives::loss_er_on(tape, tok, &seq.labels);
        l_er_v = tape.value(l_er).item();
        er_node = Some(l_er);
        let w = tape.scale(l_er, config.alpha);
        total = tape.add(total, w);
    }

    let mut l_sa = BTreeMap::new();
    let mut l_si = BTreeMap::new();
    let mut sa_nodes = Vec::new();
    let mut si_nodes = Vec::new();
    if config.block_terms_active() && supervised && !blocks.is_empty() {
        let mut block_sum: Option<NodeId> = None;
        let mut push = |tape: &mut Tape, n: NodeId| {
            block_sum = Some(match block_sum {
                None => n,
                Some(s) => tape.add(s, n),
            });
        };
        if config.losses.sa {
            for &h in blocks {
                let attn = Encoder::cls_attention_on(tape, full[h - 1]);
                let l = objectives::loss_sa_on(tape, attn, &seq.targets, config.sa_squared);
                l_sa.insert(h, tape.value(l).item());
                sa_nodes.push(l);
                push(tape, l);
            }
        }
        if config.losses.si {
            let deepest = *blocks.last().expect("non-empty");
            let psi = encoder.encode_upto_on(tape, bound, &seq.psi_tokens, deepest)?;
            let sigma = encoder.encode_upto_on(tape, bound, &seq.sigma_tokens, deepest)?;
            for &h in blocks {
                let m = match mains.get(&h) {
                    Some(&m) => m,
                    None => {
                        let m = encoder.relation_on(tape, bound, full[h - 1]);
                        mains.insert(h, m);
                        m
                    }
                };
                let p = encoder.relation_on(tape, bound, psi[h - 1]);
                let s = encoder.relation_on(tape, bound, sigma[h - 1]);
                let l = objectives::loss_si_on(tape, m, p, s);
                l_si.insert(h, tape.value(l).item());
                si_nodes.push(l);
                push(tape, l);
            }
        }
        if let Some(s) = block_sum {
            let w = tape.scale(s, config.beta / blocks.len() as f64);
            total = tape.add(total, w);
        }
    }

    let bundle = LossBundle::combine(
        tape.value(l_main).item(),
        l_er_v,
        l_sa,
        l_si,
        config.alpha,
        config.beta,
        blocks,
    )?;
    Ok(ExampleLoss {
        total,
        main: l_main,
        er: er_node,
        sa: sa_nodes,
        si: si_nodes,
        bundle,
    })
}

/// Batch-mean objective and its gradient with respect to every parameter,
/// in parameter order.
pub fn batch_gradients(
    encoder: &Encoder,
    batch: &[LabeledSequence],
    config: &TrainConfig,
    blocks: &[usize],
) -> Result<(LossBundle, Vec<Vec<f64>>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut grads: Vec<Vec<f64>> = encoder.params().iter().map(|p| vec![0.0; p.tensor.len()]).collect();
    let mut bundles = Vec::with_capacity(batch.len());
    let scale = 1.0 / batch.len() as f64;
    for seq in batch {
        let mut tape = Tape::new();
        let bound = encoder.bind(&mut tape);
        let ex = example_loss(&mut tape, encoder, &bound, seq, config, blocks)?;
        let g = tape.backward(ex.total)?;
        for (i, acc) in grads.iter_mut().enumerate() {
            g.accumulate_into(bound.node(i), scale, acc);
        }
        bundles.push(ex.bundle);
    }
    let mut mean = LossBundle::mean(&bundles).expect("non-empty batch");
    if config.beta > 0.0 && !blocks.is_empty() {
        mean.h = blocks.len();
        mean.total = mean.recombine();
    }
    Ok((mean, grads))
}

/// Loss components for `batch` without touching parameters.
pub fn batch_loss(
    encoder: &Encoder,
    batch: &[LabeledSequence],
    config: &TrainConfig,
    blocks: &[usize],
) -> Result<LossBundle, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut bundles = Vec::with_capacity(batch.len());
    for seq in batch {
        let mut tape = Tape::new();
        let bound = encoder.bind(&mut tape);
        bundles.push(example_loss(&mut tape, encoder, &bound, seq, config, blocks)?.bundle);
    }
    Ok(LossBundle::mean(&bundles).expect("non-empty batch"))
}

/// A scalar that the gradient check differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Main,
    Er,
    Sa,
    Si,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 5] = [LossTerm::Main, LossTerm::Er, LossTerm::Sa, LossTerm::Si, LossTerm::Total];

    pub fn as_str(self) -> &'static str {
        match self {
            LossTerm::Main => "l_main",
            LossTerm::Er => "l_er",
            LossTerm::Sa => "l_sa",
            LossTerm::Si => "l_si",
            LossTerm::Total => "total",
        }
    }
}

fn term_node(tape: &mut Tape, ex: &ExampleLoss, term: LossTerm) -> Option<NodeId> {
    let sum = |tape: &mut Tape, xs: &[NodeId]| -> Option<NodeId> {
        let (&first, rest) = xs.split_first()?;
        Some(rest.iter().fold(first, |acc, &n| tape.add(acc, n)))
    };
    match term {
        LossTerm::Main => Some(ex.main),
        LossTerm::Er => ex.er,
        LossTerm::Sa => sum(tape, &ex.sa),
        LossTerm::Si => sum(tape, &ex.si),
        LossTerm::Total => Some(ex.total),
    }
}

/// Batch mean of one loss term and its analytic gradient over the flattened
/// parameters. Terms inactive for an example contribute zero.
pub fn term_value_and_gradient(
    encoder: &Encoder,
    batch: &[LabeledSequence],
    config: &TrainConfig,
    term: LossTerm,
    want_grad: bool,
) -> Result<(f64, Vec<f64>), TrainError> {
    let blocks = config.supervised_blocks();
    let scale = 1.0 / batch.len().max(1) as f64;
    let mut value = 0.0;
    let mut grads: Vec<Vec<f64>> = encoder.params().iter().map(|p| vec![0.0; p.tensor.len()]).collect();
    for seq in batch {
        let mut tape = Tape::new();
        let bound = encoder.bind(&mut tape);
        let ex = example_loss(&mut tape, encoder, &bound, seq, config, &blocks)?;
        let Some(node) = term_node(&mut tape, &ex, term) else {
            continue;
        };
        value += scale * tape.value(node).item();
        if want_grad {
            let g = tape.backward(node)?;
            for (i, acc) in grads.iter_mut().enumerate() {
                g.accumulate_into(bound.node(i), scale, acc);
            }
        }
    }
    Ok((value, grads.concat()))
}

/// Finite-difference check of every loss term over all parameters.
pub fn gradient_check(
    encoder: &Encoder,
    batch: &[LabeledSequence],
    config: &TrainConfig,
    step: f64,
) -> Result<Vec<(LossTerm, GradCheckReport)>, TrainError> {
    let mut out = Vec::new();
    for term in LossTerm::ALL {
        let (_, analytic) = term_value_and_gradient(encoder, batch, config, term, true)?;
        let point = encoder.flat_params();
        let mut probe = encoder.clone();
        let report = finite_diff_check(
            |x| {
                probe.set_flat_params(x);
                term_value_and_gradient(&probe, batch, config, term, false)
                    .map(|(v, _)| v)
                    .unwrap_or(f64::NAN)
            },
            &point,
            &analytic,
            step,
        )
        .map_err(|e| TrainError::Config(e.to_string()))?;
        out.push((term, report));
    }
    Ok(out)
}

fn clip(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// One optimizer step on `batch`; returns the pre-update batch-mean losses.
/// Parameters are left untouched when the loss is not finite.
pub fn train_step(
    model: &mut Model,
    optimizer: &mut AdamState,
    batch: &[LabeledSequence],
    config: &TrainConfig,
) -> Result<LossBundle, TrainError> {
    let blocks = config.supervised_blocks();
    let (bundle, mut grads) = batch_gradients(&model.encoder, batch, config, &blocks)?;
    if !bundle.total.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFinite {
            step: optimizer.t as usize,
            last_checkpoint: None,
        });
    }
    if let Some(c) = config.clip_norm {
        clip(&mut grads, c);
    }
    optimizer.step(&mut model.encoder, &grads, config.learning_rate);
    Ok(bundle)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub l_main: f64,
    pub l_er: f64,
    pub l_sa_sum: f64,
    pub l_si_sum: f64,
    pub total: f64,
}

impl StepMetrics {
    pub fn new(step: usize, b: &LossBundle) -> Self {
        Self {
            step,
            l_main: b.l_main,
            l_er: b.l_er,
            l_sa_sum: b.l_sa_sum(),
            l_si_sum: b.l_si_sum(),
            total: b.total,
        }
    }
}

/// Batch indices for optimizer step `step` (0-based). The shuffle for each
/// epoch is a pure function of the seed and epoch number.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: usize) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch_size);
    let epoch = step / per_epoch;
    let k = step % per_epoch;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    perm.shuffle(&mut rng);
    perm[k * batch_size..((k + 1) * batch_size).min(n)].to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabBlob {
    pub words: Vec<String>,
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub step: usize,
    pub config_hash: String,
    pub seed: u64,
    pub config: TrainConfig,
    /// Ordinary words; ids follow the special tokens in this order.
    pub vocab: Vec<String>,
    pub params: Vec<NamedTensor>,
    pub optimizer: AdamState,
}

impl Checkpoint {
    pub fn capture(model: &Model, optimizer: &AdamState, config: &TrainConfig, step: usize) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            step,
            config_hash: config.hash(),
            seed: config.seed,
            config: config.clone(),
            vocab: model.vocab.words().to_vec(),
            params: model.encoder.params().to_vec(),
            optimizer: optimizer.clone(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(format!("unexpected format {:?}", ck.format));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(format!("unsupported version {}", ck.version));
        }
        if ck.config_hash != ck.config.hash() {
            return Err("config hash does not match the stored config".into());
        }
        let n = ck.params.len();
        if ck.optimizer.m.len() != n || ck.optimizer.v.len() != n {
            return Err("optimizer state does not match parameters".into());
        }
        for (i, p) in ck.params.iter().enumerate() {
            if ck.optimizer.m[i].len() != p.tensor.len() || ck.optimizer.v[i].len() != p.tensor.len() {
                return Err(format!("optimizer state for {} has the wrong length", p.name));
            }
        }
        Ok(ck)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text).map_err(|reason| TrainError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_string(self).expect("checkpoint serializes")).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn model(&self) -> Result<Model, TrainError> {
        let vocab = Vocabulary::from_words(self.vocab.iter());
        let encoder = Encoder::from_params(self.config.model.clone(), vocab.len(), self.params.clone())?;
        Ok(Model { vocab, encoder })
    }
}

/// Final state of a training run.
pub struct TrainOutcome {
    pub model: Model,
    pub checkpoint: Checkpoint,
    /// Metrics for the steps executed in this call.
    pub log: Vec<StepMetrics>,
}

/// Total optimizer steps for a dataset of `n` sequences.
pub fn planned_steps(config: &TrainConfig, n: usize) -> usize {
    config
        .steps
        .unwrap_or_else(|| config.epochs * n.div_ceil(config.batch_size))
}

/// Trains from scratch (`resume = None`) or continues `resume` until the
/// configured step count. Writes metrics and checkpoints when paths are set.
pub fn train(
    data: &[LabeledSequence],
    vocab: &Vocabulary,
    config: &TrainConfig,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if config.block_terms_active() {
        LossBundle::combine(0.0, 0.0, BTreeMap::new(), BTreeMap::new(), config.alpha, config.beta, &config.supervised_blocks())?;
    }
    let (mut model, mut optimizer, start) = match resume {
        Some(ck) => {
            if ck.config_hash != config.hash() {
                return Err(TrainError::Config(
                    "checkpoint was produced with different training settings".into(),
                ));
            }
            let m = ck.model()?;
            if &m.vocab != vocab {
                return Err(TrainError::Config("checkpoint vocabulary differs from the data vocabulary".into()));
            }
            (m, ck.optimizer, ck.step)
        }
        None => {
            let m = Model::new(vocab.clone(), config.model.clone(), config.seed)?;
            let o = AdamState::new(&m.encoder);
            (m, o, 0)
        }
    };
    let total_steps = planned_steps(config, data.len());
    let mut metrics = match &config.metrics_path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
            }
            let f = if start > 0 {
                OpenOptions::new().append(true).create(true).open(p)
            } else {
                File::create(p)
            }
            .map_err(io_err(p))?;
            Some((BufWriter::new(f), p.clone()))
        }
        None => None,
    };
    let mut last_good: Option<PathBuf> = None;
    let mut log = Vec::new();
    for step in start..total_steps {
        let idx = batch_indices(data.len(), config.batch_size, config.seed, step);
        let batch: Vec<LabeledSequence> = idx.iter().map(|&i| data[i].clone()).collect();
        let bundle = match train_step(&mut model, &mut optimizer, &batch, config) {
            Err(TrainError::NonFinite { .. }) => {
                return Err(TrainError::NonFinite {
                    step,
                    last_checkpoint: last_good,
                })
            }
            r => r?,
        };
        let m = StepMetrics::new(step, &bundle);
        if let Some((w, p)) = metrics.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&m).expect("metrics serialize")).map_err(io_err(p))?;
        }
        log.push(m);
        let done = step + 1;
        if let (Some(every), Some(path)) = (config.checkpoint_interval, &config.checkpoint_path) {
            if done % every == 0 && done < total_steps {
                if let Some((w, p)) = metrics.as_mut() {
                    w.flush().map_err(io_err(p))?;
                }
                Checkpoint::capture(&model, &optimizer, config, done).save(path)?;
                last_good = Some(path.clone());
            }
        }
        if done % 50 == 0 {
            info!("step {done}/{total_steps} total {:.5}", bundle.total);
        }
    }
    if let Some((w, p)) = metrics.as_mut() {
        w.flush().map_err(io_err(p))?;
    }
    let checkpoint = Checkpoint::capture(&model, &optimizer, config, total_steps.max(start));
    if let Some(path) = &config.checkpoint_path {
        checkpoint.save(path)?;
    }
    Ok(TrainOutcome { model, checkpoint, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Label, Record};

    fn tiny() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                d_model: 8,
                heads: 2,
                ff: 16,
                blocks: 2,
                max_len: 16,
                ata_dim: 4,
                ln_eps: 1e-12,
            },
            batch_size: 2,
            block_strategy: BlockStrategy::All,
            ..TrainConfig::default()
        }
    }

    fn data() -> (Vec<LabeledSequence>, Vocabulary) {
        let recs = vec![
            Record::from_text("a girl plays violin", "a girl plays music", "violin is music", Label::Entailed).unwrap(),
            Record::from_text("a dog runs", "a cat sleeps", "dog is not cat", Label::Contradicted).unwrap(),
            Record::from_text("a man cooks", "a man cooks pasta", "", Label::Neutral).unwrap(),
        ];
        let vocab = Vocabulary::from_records(&recs);
        let (seqs, _) = prepare(&recs, &vocab, &LabelingOptions::default(), 16).unwrap();
        (seqs, vocab)
    }

    #[test]
    fn block_resolution() {
        use BlockStrategy::*;
        assert_eq!(resolve_blocks(Top1, 4), vec![4]);
        assert_eq!(resolve_blocks(Top3, 4), vec![2, 3, 4]);
        assert_eq!(resolve_blocks(Top3, 12), vec![10, 11, 12]);
        assert_eq!(resolve_blocks(Bottom3, 4), vec![1, 2, 3]);
        assert_eq!(resolve_blocks(Top6, 4), vec![1, 2, 3, 4]);
        assert_eq!(resolve_blocks(Bottom6, 12), vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(resolve_blocks(All, 3), vec![1, 2, 3]);
        assert_eq!(resolve_blocks(Alternating6, 12), vec![2, 4, 6, 8, 10, 12]);
        assert_eq!(resolve_blocks(Alternating6, 4), vec![2, 4]);
        assert_eq!(resolve_blocks(Alternating6, 1), vec![1]);
        assert_eq!(resolve_blocks(Top3, 1), vec![1]);
    }

    #[test]
    fn config_json_roundtrip_and_unknown_keys() {
        let c = TrainConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), c);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"alpha": 0.1, "gamma": 2}"#).is_err());
        let p: TrainConfig = serde_json::from_str(r#"{"block_strategy": "alternating-6"}"#).unwrap();
        assert_eq!(p.block_strategy, BlockStrategy::Alternating6);
        assert_eq!(p.alpha, 0.4);
        assert_eq!(p.beta, 0.8);
        assert!(TrainConfig { alpha: -0.1, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..c }.validate().is_err());
    }

    #[test]
    fn hash_ignores_run_length() {
        let a = TrainConfig::default();
        let b = TrainConfig {
            steps: Some(99),
            metrics_path: Some("m.jsonl".into()),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), TrainConfig { alpha: 0.5, ..a }.hash());
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut seen: Vec<usize> = (0..4).flat_map(|s| batch_indices(10, 3, 5, s)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(10, 3, 5, 3).len(), 1);
        assert_eq!(batch_indices(10, 3, 5, 7), batch_indices(10, 3, 5, 7));
    }

    #[test]
    fn total_recombines_from_components() {
        let (seqs, vocab) = data();
        let cfg = tiny();
        let model = Model::new(vocab, cfg.model.clone(), 1).unwrap();
        let blocks = cfg.supervised_blocks();
        let b = batch_loss(&model.encoder, &seqs, &cfg, &blocks).unwrap();
        assert!((b.total - b.recombine()).abs() < 1e-12);
        assert!(b.l_er > 0.0 && b.l_sa_sum() > 0.0 && b.l_si_sum() > 0.0);
        assert_eq!(b.l_sa.keys().copied().collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn disabled_terms_leave_their_parameters_alone() {
        let (seqs, vocab) = data();
        let model = Model::new(vocab, tiny().model, 1).unwrap();
        let (tw, tb) = model.encoder.token_head();
        let cfg = TrainConfig {
            alpha: 0.0,
            beta: 0.0,
            ..tiny()
        };
        let (_, g) = batch_gradients(&model.encoder, &seqs, &cfg, &cfg.supervised_blocks()).unwrap();
        assert!(g[tw].iter().chain(&g[tb]).all(|&v| v == 0.0));

        let cfg = TrainConfig {
            losses: LossSwitches {
                er: false,
                sa: true,
                si: true,
            },
            ..tiny()
        };
        let (b, g) = batch_gradients(&model.encoder, &seqs, &cfg, &cfg.supervised_blocks()).unwrap();
        assert_eq!(b.l_er, 0.0);
        assert!(g[tw].iter().chain(&g[tb]).all(|&v| v == 0.0));

        let on = tiny();
        let (_, g) = batch_gradients(&model.encoder, &seqs, &on, &on.supervised_blocks()).unwrap();
        assert!(g[tw].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn beta_zero_total_matches_skipped_passes() {
        let (seqs, vocab) = data();
        let model = Model::new(vocab, tiny().model, 1).unwrap();
        let cfg = TrainConfig { beta: 0.0, ..tiny() };
        let b = batch_loss(&model.encoder, &seqs, &cfg, &cfg.supervised_blocks()).unwrap();
        assert_eq!(b.l_sa_sum(), 0.0);
        assert_eq!(b.l_si_sum(), 0.0);
        let no_aux = TrainConfig {
            losses: LossSwitches {
                er: true,
                sa: false,
                si: false,
            },
            ..cfg.clone()
        };
        let c = batch_loss(&model.encoder, &seqs, &no_aux, &cfg.supervised_blocks()).unwrap();
        assert_eq!(b.total.to_bits(), c.total.to_bits());
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let (seqs, vocab) = data();
        let cfg = TrainConfig { steps: Some(0), ..tiny() };
        let out = train(&seqs, &vocab, &cfg, None).unwrap();
        let init = Model::new(vocab, cfg.model.clone(), cfg.seed).unwrap();
        assert_eq!(out.model, init);
        assert!(out.log.is_empty());
        assert_eq!(out.checkpoint.step, 0);
    }

    #[test]
    fn overfits_fixed_batch() {
        let (seqs, vocab) = data();
        let cfg = TrainConfig {
            steps: Some(200),
            batch_size: 3,
            learning_rate: 5e-3,
            ..tiny()
        };
        let out = train(&seqs, &vocab, &cfg, None).unwrap();
        assert_eq!(out.log.len(), 200);
        assert!(out.log[199].total < out.log[0].total);
        for m in &out.log {
            assert!(m.total.is_finite());
        }
    }

    #[test]
    fn gradient_check_passes_on_tiny_model() {
        let (seqs, vocab) = data();
        let cfg = tiny();
        let model = Model::new(vocab, cfg.model.clone(), 2).unwrap();
        let reports = gradient_check(&model.encoder, &seqs[..2], &cfg, 1e-5).unwrap();
        assert_eq!(reports.len(), 5);
        for (term, r) in reports {
            assert!(r.passes(1e-4), "{term:?}: {r:?}");
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let (seqs, vocab) = data();
        let cfg = TrainConfig { steps: Some(3), ..tiny() };
        let out = train(&seqs, &vocab, &cfg, None).unwrap();
        let text = serde_json::to_string(&out.checkpoint).unwrap();
        let back = Checkpoint::parse(&text).unwrap();
        assert_eq!(back, out.checkpoint);
        assert_eq!(back.model().unwrap(), out.model);
        let mut tampered = back.clone();
        tampered.config.alpha = 0.3;
        assert!(Checkpoint::parse(&serde_json::to_string(&tampered).unwrap()).is_err());
    }
}
