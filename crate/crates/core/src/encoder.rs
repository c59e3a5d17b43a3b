//! Post-layer-norm transformer encoder with adaptive token attention (ATA)
//! pooling, a relation head, a token-label head and the `[CLS]`-centred
//! attention distribution used for attention supervision.
//!
//! Block indices in this API are 1-based: block `h` is the output of the
//! `h`-th transformer block.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{softmax, NodeId, Tape, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("sequence length {len} outside 1..={max_len}")]
    BadLength { len: usize, max_len: usize },
    #[error("token id {id} outside vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("block {block} outside 1..={blocks}")]
    BlockOutOfRange { block: usize, blocks: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("parameter mismatch: {0}")]
    Params(String),
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ff: usize,
    pub blocks: usize,
    pub max_len: usize,
    /// Hidden width of the ATA scorer.
    pub ata_dim: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            ff: 128,
            blocks: 4,
            max_len: 64,
            ata_dim: 32,
            ln_eps: 1e-12,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::Config(m.to_string()));
        if self.d_model == 0 || self.heads == 0 || self.ff == 0 || self.ata_dim == 0 {
            return bad("widths must be positive");
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be divisible by heads");
        }
        if self.blocks == 0 {
            return bad("at least one block is required");
        }
        if self.max_len == 0 {
            return bad("max_len must be positive");
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            return bad("ln_eps must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
struct BlockLayout {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln1_g: usize,
    ln1_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2_g: usize,
    ln2_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    emb_ln_g: usize,
    emb_ln_b: usize,
    blocks: Vec<BlockLayout>,
    ata_w1: usize,
    ata_b1: usize,
    ata_w2: usize,
    ata_b2: usize,
    rel_w: usize,
    rel_b: usize,
    tok_w: usize,
    tok_b: usize,
}

enum Init {
    Normal(f64),
    Xavier,
    Zeros,
    Ones,
}

struct Builder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((name, shape, init));
        self.specs.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        let w = self.add(format!("{prefix}.weight"), vec![fan_in, fan_out], Init::Xavier);
        let b = self.add(format!("{prefix}.bias"), vec![1, fan_out], Init::Zeros);
        (w, b)
    }

    fn norm(&mut self, prefix: &str, width: usize) -> (usize, usize) {
        let g = self.add(format!("{prefix}.gain"), vec![1, width], Init::Ones);
        let b = self.add(format!("{prefix}.bias"), vec![1, width], Init::Zeros);
        (g, b)
    }
}

fn layout(config: &ModelConfig, vocab_size: usize) -> (Layout, Vec<(String, Vec<usize>, Init)>) {
    let d = config.d_model;
    let mut b = Builder { specs: Vec::new() };
    let tok_emb = b.add("embed.tokens".into(), vec![vocab_size, d], Init::Normal(1.0));
    let pos_emb = b.add("embed.positions".into(), vec![config.max_len, d], Init::Normal(0.5));
    let (emb_ln_g, emb_ln_b) = b.norm("embed.norm", d);
    let mut blocks = Vec::with_capacity(config.blocks);
    for h in 1..=config.blocks {
        let p = format!("block{h}");
        let (wq, bq) = b.linear(&format!("{p}.attn.query"), d, d);
        let (wk, bk) = b.linear(&format!("{p}.attn.key"), d, d);
        let (wv, bv) = b.linear(&format!("{p}.attn.value"), d, d);
        let (wo, bo) = b.linear(&format!("{p}.attn.output"), d, d);
        let (ln1_g, ln1_b) = b.norm(&format!("{p}.attn_norm"), d);
        let (w1, b1) = b.linear(&format!("{p}.ff.inner"), d, config.ff);
        let (w2, b2) = b.linear(&format!("{p}.ff.outer"), config.ff, d);
        let (ln2_g, ln2_b) = b.norm(&format!("{p}.ff_norm"), d);
        blocks.push(BlockLayout {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln1_g,
            ln1_b,
            w1,
            b1,
            w2,
            b2,
            ln2_g,
            ln2_b,
        });
    }
    let (ata_w1, ata_b1) = b.linear("ata.inner", d, config.ata_dim);
    let (ata_w2, ata_b2) = b.linear("ata.outer", config.ata_dim, 1);
    let (rel_w, rel_b) = b.linear("head.relation", d, 3);
    let (tok_w, tok_b) = b.linear("head.token", d, 3);
    let l = Layout {
        tok_emb,
        pos_emb,
        emb_ln_g,
        emb_ln_b,
        blocks,
        ata_w1,
        ata_b1,
        ata_w2,
        ata_b2,
        rel_w,
        rel_b,
        tok_w,
        tok_b,
    };
    (l, b.specs)
}

/// Parameter nodes of an [`Encoder`] registered on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    nodes: Vec<NodeId>,
}

impl Bound {
    pub fn node(&self, param: usize) -> NodeId {
        self.nodes[param]
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }
}

/// Everything a forward pass exposes.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockOutputs {
    /// `reps[h - 1]` is the `l × d` output of block `h`.
    pub reps: Vec<Tensor>,
    /// Raw ATA weights `λ` per block.
    pub lambda: Vec<Vec<f64>>,
    /// Normalized ATA weights `λ̃` per block.
    pub lambda_norm: Vec<Vec<f64>>,
    /// `[CLS]`-centred attention per block.
    pub attention: Vec<Vec<f64>>,
    /// Relation distribution computed from each block's representations.
    pub relation: Vec<[f64; 3]>,
}

impl BlockOutputs {
    pub fn final_reps(&self) -> &Tensor {
        self.reps.last().expect("at least one block")
    }

    /// The evaluation-path relation distribution (top block).
    pub fn prediction(&self) -> [f64; 3] {
        *self.relation.last().expect("at least one block")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: ModelConfig,
    vocab_size: usize,
    params: Vec<NamedTensor>,
    layout: Layout,
}

fn to3(v: &[f64]) -> [f64; 3] {
    [v[0], v[1], v[2]]
}

impl Encoder {
    /// Freshly initialized encoder; initialization is a function of `seed`.
    pub fn new(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(EncoderError::Config("empty vocabulary".into()));
        }
        let (layout, specs) = layout(&config, vocab_size);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = specs
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Normal(std) => {
                        let dist = Normal::new(0.0, std).expect("positive std");
                        (0..n).map(|_| dist.sample(&mut rng)).collect()
                    }
                    Init::Xavier => {
                        let std = (2.0 / (shape[0] + shape[1]) as f64).sqrt();
                        let dist = Normal::new(0.0, std).expect("positive std");
                        (0..n).map(|_| dist.sample(&mut rng)).collect()
                    }
                };
                NamedTensor {
                    name,
                    tensor: Tensor::new(shape, data).expect("shape from layout").with_grad(true),
                }
            })
            .collect();
        Ok(Self {
            config,
            vocab_size,
            params,
            layout,
        })
    }

    /// Rebuilds an encoder from stored parameters; names and shapes must match
    /// the layout implied by `config` and `vocab_size`.
    pub fn from_params(config: ModelConfig, vocab_size: usize, params: Vec<NamedTensor>) -> Result<Self, EncoderError> {
        config.validate()?;
        let (layout, specs) = layout(&config, vocab_size);
        if specs.len() != params.len() {
            return Err(EncoderError::Params(format!(
                "expected {} tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        let mut out = Vec::with_capacity(params.len());
        for ((name, shape, _), p) in specs.into_iter().zip(params) {
            if p.name != name || p.tensor.shape() != shape.as_slice() {
                return Err(EncoderError::Params(format!(
                    "expected {name} {shape:?}, found {} {:?}",
                    p.name,
                    p.tensor.shape()
                )));
            }
            if !p.tensor.all_finite() {
                return Err(EncoderError::Params(format!("{name} holds non-finite values")));
            }
            out.push(NamedTensor {
                name,
                tensor: p.tensor.with_grad(true),
            });
        }
        Ok(Self {
            config,
            vocab_size,
            params: out,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn blocks(&self) -> usize {
        self.config.blocks
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn param_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.params[index].tensor
    }

    /// Index of the relation-head weight matrix.
    pub fn relation_head(&self) -> (usize, usize) {
        (self.layout.rel_w, self.layout.rel_b)
    }

    /// Index of the token-label head weight matrix and bias.
    pub fn token_head(&self) -> (usize, usize) {
        (self.layout.tok_w, self.layout.tok_b)
    }

    pub fn token_embedding(&self) -> usize {
        self.layout.tok_emb
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.tensor.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars(), "flat parameter length");
        let mut off = 0;
        for p in &mut self.params {
            let n = p.tensor.len();
            p.tensor.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Sets every transformer-block weight and bias to zero and every block
    /// norm to the identity. Embeddings and heads are untouched.
    pub fn zero_blocks(&mut self) {
        for b in self.layout.blocks.clone() {
            for idx in [b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo, b.w1, b.b1, b.w2, b.b2, b.ln1_b, b.ln2_b] {
                self.params[idx].tensor.data_mut().fill(0.0);
            }
            for idx in [b.ln1_g, b.ln2_g] {
                self.params[idx].tensor.data_mut().fill(1.0);
            }
        }
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> Bound {
        Bound {
            nodes: self.params.iter().map(|p| tape.param(&p.tensor)).collect(),
        }
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<(), EncoderError> {
        if tokens.is_empty() || tokens.len() > self.config.max_len {
            return Err(EncoderError::BadLength {
                len: tokens.len(),
                max_len: self.config.max_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(EncoderError::TokenOutOfRange {
                id,
                vocab_size: self.vocab_size,
            });
        }
        Ok(())
    }

    pub fn check_block(&self, block: usize) -> Result<(), EncoderError> {
        if block == 0 || block > self.config.blocks {
            return Err(EncoderError::BlockOutOfRange {
                block,
                blocks: self.config.blocks,
            });
        }
        Ok(())
    }

    /// Embedding output (input to block 1).
    pub fn embed_on(&self, tape: &mut Tape, bound: &Bound, tokens: &[u32]) -> Result<NodeId, EncoderError> {
        self.check_tokens(tokens)?;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let l = &self.layout;
        let tok = tape.gather(bound.node(l.tok_emb), &ids);
        let pos = tape.gather(bound.node(l.pos_emb), &positions);
        let x = tape.add(tok, pos);
        Ok(tape.layer_norm(x, bound.node(l.emb_ln_g), bound.node(l.emb_ln_b), self.config.ln_eps))
    }

    fn linear(tape: &mut Tape, bound: &Bound, x: NodeId, w: usize, b: usize) -> NodeId {
        let y = tape.matmul(x, bound.node(w));
        tape.add_row(y, bound.node(b))
    }

    /// One post-norm transformer block.
    pub fn block_on(&self, tape: &mut Tape, bound: &Bound, x: NodeId, block: usize) -> NodeId {
        let p = &self.layout.blocks[block - 1];
        let d = self.config.d_model;
        let heads = self.config.heads;
        let dh = d / heads;
        let q = Self::linear(tape, bound, x, p.wq, p.bq);
        let k = Self::linear(tape, bound, x, p.wk, p.bk);
        let v = Self::linear(tape, bound, x, p.wv, p.bv);
        let temperature = (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (tape.slice_cols(q, s, e), tape.slice_cols(k, s, e), tape.slice_cols(v, s, e))
            };
            let scores = tape.matmul_nt(qh, kh);
            let weights = tape
                .softmax_rows(scores, temperature)
                .expect("finite scores from finite parameters");
            outs.push(tape.matmul(weights, vh));
        }
        let merged = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
        let attn = Self::linear(tape, bound, merged, p.wo, p.bo);
        let res1 = tape.add(x, attn);
        let x1 = tape.layer_norm(res1, bound.node(p.ln1_g), bound.node(p.ln1_b), self.config.ln_eps);
        let inner = Self::linear(tape, bound, x1, p.w1, p.b1);
        let act = tape.gelu(inner);
        let ff = Self::linear(tape, bound, act, p.w2, p.b2);
        let res2 = tape.add(x1, ff);
        tape.layer_norm(res2, bound.node(p.ln2_g), bound.node(p.ln2_b), self.config.ln_eps)
    }

    /// Outputs of blocks `1..=upto`; element `h - 1` belongs to block `h`.
    pub fn encode_upto_on(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: &[u32],
        upto: usize,
    ) -> Result<Vec<NodeId>, EncoderError> {
        self.check_block(upto)?;
        let mut x = self.embed_on(tape, bound, tokens)?;
        let mut out = Vec::with_capacity(upto);
        for h in 1..=upto {
            x = self.block_on(tape, bound, x, h);
            out.push(x);
        }
        Ok(out)
    }

    pub fn encode_on(&self, tape: &mut Tape, bound: &Bound, tokens: &[u32]) -> Result<Vec<NodeId>, EncoderError> {
        self.encode_upto_on(tape, bound, tokens, self.config.blocks)
    }

    /// `(λ, λ̃)` as `1 × l` rows: `λ_i = sigmoid(W₂ tanh(W₁ v_i))`,
    /// `λ̃ = λ / Σλ`.
    pub fn ata_on(&self, tape: &mut Tape, bound: &Bound, reps: NodeId) -> (NodeId, NodeId) {
        let l = &self.layout;
        let hidden = Self::linear(tape, bound, reps, l.ata_w1, l.ata_b1);
        let hidden = tape.tanh(hidden);
        let score = Self::linear(tape, bound, hidden, l.ata_w2, l.ata_b2);
        let lambda_col = tape.sigmoid(score);
        let lambda = tape.transpose(lambda_col);
        let norm = tape.normalize_sum(lambda);
        (lambda, norm)
    }

    /// Relation distribution `softmax(W_y · (1/l) Σ λ̃_i v_i)` as `1 × 3`.
    pub fn classify_main_on(&self, tape: &mut Tape, bound: &Bound, reps: NodeId, lambda_norm: NodeId) -> NodeId {
        let len = tape.value(reps).rows();
        let weighted = tape.matmul(lambda_norm, reps);
        let pooled = tape.scale(weighted, 1.0 / len as f64);
        let logits = Self::linear(tape, bound, pooled, self.layout.rel_w, self.layout.rel_b);
        tape.softmax_rows(logits, 1.0).expect("finite logits")
    }

    /// ATA pooling followed by the relation head.
    pub fn relation_on(&self, tape: &mut Tape, bound: &Bound, reps: NodeId) -> NodeId {
        let (_, norm) = self.ata_on(tape, bound, reps);
        self.classify_main_on(tape, bound, reps, norm)
    }

    /// Token-label distributions, `l × 3`.
    pub fn classify_tokens_on(&self, tape: &mut Tape, bound: &Bound, reps: NodeId) -> NodeId {
        let logits = Self::linear(tape, bound, reps, self.layout.tok_w, self.layout.tok_b);
        tape.softmax_rows(logits, 1.0).expect("finite logits")
    }

    /// `softmax_i(v_1 · v_i / sqrt(l))` as `1 × l`.
    pub fn cls_attention_on(tape: &mut Tape, reps: NodeId) -> NodeId {
        let len = tape.value(reps).rows();
        let cls = tape.row(reps, 0);
        let scores = tape.matmul_nt(cls, reps);
        tape.softmax_rows(scores, (len as f64).sqrt()).expect("finite scores")
    }

    /// Full forward pass with every per-block view.
    pub fn encode(&self, tokens: &[u32]) -> Result<BlockOutputs, EncoderError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let blocks = self.encode_on(&mut tape, &bound, tokens)?;
        let mut out = BlockOutputs {
            reps: Vec::with_capacity(blocks.len()),
            lambda: Vec::new(),
            lambda_norm: Vec::new(),
            attention: Vec::new(),
            relation: Vec::new(),
        };
        for &b in &blocks {
            let (lam, norm) = self.ata_on(&mut tape, &bound, b);
            let rel = self.classify_main_on(&mut tape, &bound, b, norm);
            let attn = Self::cls_attention_on(&mut tape, b);
            out.reps.push(tape.value(b).clone().with_grad(false));
            out.lambda.push(tape.value(lam).data().to_vec());
            out.lambda_norm.push(tape.value(norm).data().to_vec());
            out.attention.push(tape.value(attn).data().to_vec());
            out.relation.push(to3(tape.value(rel).data()));
        }
        Ok(out)
    }

    /// Evaluation-path prediction: top block, ATA pooling, relation head.
    pub fn predict(&self, tokens: &[u32]) -> Result<[f64; 3], EncoderError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let blocks = self.encode_on(&mut tape, &bound, tokens)?;
        let top = *blocks.last().expect("at least one block");
        let rel = self.relation_on(&mut tape, &bound, top);
        Ok(to3(tape.value(rel).data()))
    }

    /// `(λ, λ̃)` for an `l × d` representation matrix.
    pub fn ata_weights(&self, reps: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let r = tape.constant(reps.clone());
        let (lam, norm) = self.ata_on(&mut tape, &bound, r);
        (tape.value(lam).data().to_vec(), tape.value(norm).data().to_vec())
    }

    pub fn classify_main(&self, reps: &Tensor, lambda_norm: &[f64]) -> [f64; 3] {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let r = tape.constant(reps.clone());
        let w = tape.constant(Tensor::vector(lambda_norm.to_vec()));
        let rel = self.classify_main_on(&mut tape, &bound, r, w);
        to3(tape.value(rel).data())
    }

    pub fn classify_tokens(&self, reps: &Tensor) -> Vec<[f64; 3]> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let r = tape.constant(reps.clone());
        let p = self.classify_tokens_on(&mut tape, &bound, r);
        tape.value(p).data().chunks_exact(3).map(to3).collect()
    }

    /// Token-label distributions from the top block for `tokens`.
    pub fn predict_tokens(&self, tokens: &[u32]) -> Result<Vec<[f64; 3]>, EncoderError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let blocks = self.encode_on(&mut tape, &bound, tokens)?;
        let top = *blocks.last().expect("at least one block");
        let p = self.classify_tokens_on(&mut tape, &bound, top);
        Ok(tape.value(p).data().chunks_exact(3).map(to3).collect())
    }

    /// Relation distribution from block `block` for a (masked) sequence.
    pub fn sub_distribution(&self, block: usize, tokens: &[u32]) -> Result<[f64; 3], EncoderError> {
        self.check_block(block)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let blocks = self.encode_upto_on(&mut tape, &bound, tokens, block)?;
        let rel = self.relation_on(&mut tape, &bound, blocks[block - 1]);
        Ok(to3(tape.value(rel).data()))
    }
}

/// `[CLS]`-centred attention over an `l × d` representation matrix.
pub fn cls_attention(reps: &Tensor) -> Vec<f64> {
    let len = reps.rows();
    let cls = reps.row(0);
    let scores: Vec<f64> = (0..len)
        .map(|i| cls.iter().zip(reps.row(i)).map(|(a, b)| a * b).sum())
        .collect();
    softmax(&scores, (len as f64).sqrt()).expect("finite representations")
}
