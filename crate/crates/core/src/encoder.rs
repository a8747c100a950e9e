//! Tiny pre-norm transformer encoder with a masked-LM head.

use std::fmt;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointError};
use crate::nn::{visit_child, visit_child_mut, EncoderBlock, LayerNorm, Module};
use crate::optim::{AdamW, AdamWConfig, OptimError};
use crate::rng;
use crate::synthlang::{Sentence, TokenId};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor, TensorError};

/// Placeholder id marking a prompt slot inside a token sequence.
pub const SLOT: TokenId = TokenId::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Filled from the vocabulary when zero.
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub tie_mlm_head: bool,
    /// Dropout on the input embeddings during pretraining.
    pub dropout: f32,
    pub init_std: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            vocab_size: 0,
            max_seq_len: 48,
            tie_mlm_head: true,
            dropout: 0.0,
            init_std: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_ff == 0 || self.max_seq_len == 0 || self.vocab_size == 0 {
            return bad("d_ff, max_seq_len and vocab_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0,1)", self.dropout));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad(format!("init_std {} must be positive", self.init_std));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum ModelError {
    Config(String),
    SeqTooLong { len: usize, max: usize },
    SlotMismatch { slots: usize, prompt_rows: usize },
    TokenOutOfRange { token: TokenId, vocab: usize },
    NotMask { pos: usize },
    PositionOutOfRange { pos: usize, len: usize },
    EmptyCorpus,
    Tensor(TensorError),
    Optim(OptimError),
    Checkpoint(CheckpointError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Config(m) => write!(f, "model config: {m}"),
            ModelError::SeqTooLong { len, max } => write!(f, "sequence of length {len} exceeds max_seq_len {max}"),
            ModelError::SlotMismatch { slots, prompt_rows } => {
                write!(f, "input marks {slots} prompt slots but the prompt has {prompt_rows} rows")
            }
            ModelError::TokenOutOfRange { token, vocab } => write!(f, "token {token} outside vocabulary of {vocab}"),
            ModelError::NotMask { pos } => write!(f, "position {pos} does not hold [MASK]"),
            ModelError::PositionOutOfRange { pos, len } => write!(f, "position {pos} out of range for length {len}"),
            ModelError::EmptyCorpus => write!(f, "pretraining corpus is empty"),
            ModelError::Tensor(e) => write!(f, "{e}"),
            ModelError::Optim(e) => write!(f, "{e}"),
            ModelError::Checkpoint(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

impl From<OptimError> for ModelError {
    fn from(e: OptimError) -> Self {
        ModelError::Optim(e)
    }
}

impl From<CheckpointError> for ModelError {
    fn from(e: CheckpointError) -> Self {
        ModelError::Checkpoint(e)
    }
}

/// One sequence to encode; `SLOT` entries take their rows from `prompt`.
#[derive(Debug, Clone, Copy)]
pub struct EncodeItem<'a> {
    pub tokens: &'a [TokenId],
    pub prompt: Option<Var>,
}

/// Hidden states of a batch stacked row-wise.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub hidden: Var,
    pub offsets: Vec<usize>,
    pub lens: Vec<usize>,
}

impl Encoded {
    /// Row index in `hidden` of position `pos` in item `i`.
    pub fn row(&self, i: usize, pos: usize) -> usize {
        self.offsets[i] + pos
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLm {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<EncoderBlock>,
    pub ln_f: LayerNorm,
    /// Untied head weight `vocab × d`; `None` when the head reuses `tok_emb`.
    pub head_w: Option<Tensor>,
    pub head_b: Tensor,
}

impl EncoderLm {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = rng::stream(seed, "encoder-init");
        let (d, l, std) = (config.d_model, config.vocab_size, config.init_std);
        let head_dim = d / config.n_heads;
        let tok_emb = Tensor::randn(vec![l, d], std, &mut rng).trainable();
        let pos_emb = Tensor::randn(vec![config.max_seq_len, d], std, &mut rng).trainable();
        let blocks = (0..config.n_layers)
            .map(|_| EncoderBlock::new(d, config.n_heads, head_dim, config.d_ff, std, &mut rng))
            .collect();
        let head_w = (!config.tie_mlm_head).then(|| Tensor::randn(vec![l, d], std, &mut rng).trainable());
        Ok(EncoderLm {
            ln_f: LayerNorm::new(d),
            head_b: Tensor::zeros(vec![l]).trainable(),
            config,
            tok_emb,
            pos_emb,
            blocks,
            head_w,
        })
    }

    /// The `vocab × d` matrix the MLM head projects onto.
    pub fn head_weight(&self) -> &Tensor {
        self.head_w.as_ref().unwrap_or(&self.tok_emb)
    }

    /// Input rows (token or slot embedding plus position) for a batch.
    fn embed<F: Real>(&self, tape: &mut Tape<F>, items: &[EncodeItem<'_>]) -> Result<(Var, Vec<(usize, usize)>), ModelError> {
        let l = self.config.vocab_size;
        let table = tape.param(&self.tok_emb);
        let pos_table = tape.param(&self.pos_emb);
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(items.len());
        // (is_prompt, item, start, len) runs in stacking order
        let mut runs: Vec<(bool, usize, usize, usize)> = Vec::new();
        let mut offset = 0;
        for (i, item) in items.iter().enumerate() {
            let n = item.tokens.len();
            if n == 0 || n > self.config.max_seq_len {
                return Err(ModelError::SeqTooLong {
                    len: n,
                    max: self.config.max_seq_len,
                });
            }
            let slots: Vec<usize> = (0..n).filter(|&p| item.tokens[p] == SLOT).collect();
            let rows = item.prompt.map_or(0, |p| tape.shape(p).0);
            let contiguous = slots.windows(2).all(|w| w[1] == w[0] + 1);
            if slots.len() != rows || !contiguous {
                return Err(ModelError::SlotMismatch {
                    slots: slots.len(),
                    prompt_rows: rows,
                });
            }
            let mut pos = 0;
            while pos < n {
                if item.tokens[pos] == SLOT {
                    runs.push((true, i, pos, rows));
                    pos += rows;
                    continue;
                }
                let start = pos;
                while pos < n && item.tokens[pos] != SLOT {
                    let t = item.tokens[pos];
                    if t as usize >= l {
                        return Err(ModelError::TokenOutOfRange { token: t, vocab: l });
                    }
                    ids.push(t as usize);
                    pos += 1;
                }
                runs.push((false, i, start, pos - start));
            }
            positions.extend(0..n);
            segments.push((offset, n));
            offset += n;
        }
        let tok = if ids.is_empty() { None } else { Some(tape.embedding(table, &ids)?) };
        let x = if runs.len() == 1 && !runs[0].0 {
            tok.expect("one token run")
        } else {
            let mut parts = Vec::with_capacity(runs.len());
            let mut cursor = 0;
            for &(is_prompt, i, _, len) in &runs {
                if is_prompt {
                    parts.push(items[i].prompt.expect("checked above"));
                } else {
                    parts.push(tape.slice_rows(tok.expect("token run"), cursor, len)?);
                    cursor += len;
                }
            }
            tape.concat_rows(&parts)?
        };
        let pe = tape.embedding(pos_table, &positions)?;
        Ok((tape.add(x, pe)?, segments))
    }

    /// Encodes a batch of sequences. Prompt slots bypass the embedding table;
    /// attention never crosses sequence boundaries.
    pub fn encode_batch<F: Real>(&self, tape: &mut Tape<F>, items: &[EncodeItem<'_>]) -> Result<Encoded, ModelError> {
        self.encode_inner(tape, items, None)
    }

    fn encode_inner<F: Real>(&self, tape: &mut Tape<F>, items: &[EncodeItem<'_>], dropout: Option<&mut ChaCha8Rng>) -> Result<Encoded, ModelError> {
        let (mut x, segments) = self.embed(tape, items)?;
        if let Some(rng) = dropout {
            let p = self.config.dropout;
            if p > 0.0 {
                let (r, c) = tape.shape(x);
                let keep = 1.0 / (1.0 - p as f64);
                let mask: Vec<F> = (0..r * c)
                    .map(|_| if rng.random::<f32>() < p { F::zero() } else { F::lit(keep) })
                    .collect();
                let m = tape.constant(r, c, mask)?;
                x = tape.mul(x, m)?;
            }
        }
        for block in &self.blocks {
            x = block.forward_segments(tape, x, &segments)?;
        }
        let hidden = self.ln_f.forward(tape, x)?;
        Ok(Encoded {
            hidden,
            offsets: segments.iter().map(|s| s.0).collect(),
            lens: segments.iter().map(|s| s.1).collect(),
        })
    }

    /// `L × d` hidden states of one sequence.
    pub fn encode<F: Real>(&self, tape: &mut Tape<F>, tokens: &[TokenId], prompt: Option<Var>) -> Result<Var, ModelError> {
        Ok(self.encode_batch(tape, &[EncodeItem { tokens, prompt }])?.hidden)
    }

    /// Stacks the hidden rows at the given `(item, position)` pairs.
    pub fn gather_rows<F: Real>(&self, tape: &mut Tape<F>, enc: &Encoded, at: &[(usize, usize)]) -> Result<Var, ModelError> {
        let mut rows = Vec::with_capacity(at.len());
        for &(i, pos) in at {
            if pos >= enc.lens[i] {
                return Err(ModelError::PositionOutOfRange { pos, len: enc.lens[i] });
            }
            rows.push(enc.row(i, pos));
        }
        Ok(tape.embedding(enc.hidden, &rows)?)
    }

    /// The hidden row at `mask_pos`, which must hold `[MASK]`.
    pub fn mask_representation<F: Real>(&self, tape: &mut Tape<F>, hidden: Var, tokens: &[TokenId], mask_pos: usize, mask_id: TokenId) -> Result<Var, ModelError> {
        let len = tape.shape(hidden).0;
        if mask_pos >= len || mask_pos >= tokens.len() {
            return Err(ModelError::PositionOutOfRange { pos: mask_pos, len });
        }
        if tokens[mask_pos] != mask_id {
            return Err(ModelError::NotMask { pos: mask_pos });
        }
        Ok(tape.slice_rows(hidden, mask_pos, 1)?)
    }

    /// Vocabulary logits `h W_lh^T + b` for each row of `h`.
    pub fn mlm_logits<F: Real>(&self, tape: &mut Tape<F>, h: Var) -> Result<Var, ModelError> {
        let w = tape.param(self.head_weight());
        let b = tape.param(&self.head_b);
        let wt = tape.transpose(w);
        let z = tape.matmul(h, wt)?;
        Ok(tape.add_row_bias(z, b)?)
    }

    /// Row-wise distribution over the full vocabulary.
    pub fn mlm_distribution<F: Real>(&self, tape: &mut Tape<F>, h: Var) -> Result<Var, ModelError> {
        let z = self.mlm_logits(tape, h)?;
        Ok(tape.softmax_rows(z))
    }

    pub fn save(&self, stem: &Path, vocab: &[String], steps: u64) -> Result<(), ModelError> {
        let meta = serde_json::json!({
            "kind": "encoder",
            "config": self.config,
            "vocab": vocab,
            "steps": steps,
        });
        checkpoint::save_module(stem, meta, self)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`EncoderLm::save`]; returns the model,
    /// its vocabulary and the pretraining step count.
    pub fn load(stem: &Path) -> Result<(Self, Vec<String>, u64), ModelError> {
        let manifest = checkpoint::read_manifest(stem)?;
        let header: Header = serde_json::from_value(manifest.meta)
            .map_err(|e| ModelError::Config(format!("checkpoint header: {e}")))?;
        let mut model = EncoderLm::new(header.config, 0)?;
        checkpoint::load_into(stem, &mut model)?;
        Ok((model, header.vocab, header.steps))
    }
}

#[derive(Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vec<String>,
    steps: u64,
}

impl Module for EncoderLm {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("tok_emb", &self.tok_emb);
        f("pos_emb", &self.pos_emb);
        for (i, b) in self.blocks.iter().enumerate() {
            visit_child(&format!("block{i}"), b, f);
        }
        visit_child("ln_f", &self.ln_f, f);
        if let Some(w) = &self.head_w {
            f("head_w", w);
        }
        f("head_b", &self.head_b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("tok_emb", &mut self.tok_emb);
        f("pos_emb", &mut self.pos_emb);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            visit_child_mut(&format!("block{i}"), b, f);
        }
        visit_child_mut("ln_f", &mut self.ln_f, f);
        if let Some(w) = &mut self.head_w {
            f("head_w", w);
        }
        f("head_b", &mut self.head_b);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub optimizer: AdamWConfig,
    /// Fraction of the corpus held out for masked-token accuracy.
    pub heldout_fraction: f64,
    pub seed: u64,
    /// Loss is logged every this many steps.
    pub log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            batch_size: 32,
            mask_prob: 0.15,
            optimizer: AdamWConfig {
                lr: 3e-3,
                ..AdamWConfig::default()
            },
            heldout_fraction: 0.05,
            seed: 1,
            log_every: 50,
        }
    }
}

/// A masked copy of a sequence and the positions to predict.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSeq {
    pub input: Sentence,
    pub positions: Vec<usize>,
    pub targets: Vec<TokenId>,
}

/// Selects ~`prob` of the positions (at least one); each selected token is
/// replaced by `[MASK]` 80% of the time, a random token 10%, kept 10%.
pub fn mask_tokens<R: Rng + ?Sized>(seq: &[TokenId], prob: f64, mask_id: TokenId, vocab: usize, rng: &mut R) -> MaskedSeq {
    let mut positions: Vec<usize> = (0..seq.len()).filter(|_| rng.random_bool(prob)).collect();
    if positions.is_empty() {
        positions.push(rng.random_range(0..seq.len()));
    }
    let mut input = seq.to_vec();
    let targets = positions.iter().map(|&p| seq[p]).collect();
    for &p in &positions {
        let r: f64 = rng.random();
        if r < 0.8 {
            input[p] = mask_id;
        } else if r < 0.9 {
            input[p] = rng.random_range(0..vocab) as TokenId;
        }
    }
    MaskedSeq {
        input,
        positions,
        targets,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    /// `(step, mean loss since the previous entry)`.
    pub losses: Vec<(u64, f64)>,
    pub heldout_accuracy: f64,
    /// Accuracy of always predicting the most frequent token.
    pub majority_rate: f64,
    /// Accuracy of guessing by corpus unigram frequencies, `Σ p²`.
    pub chance_rate: f64,
    pub steps: u64,
}

/// Masked-LM cross-entropy over a batch of masked sequences.
pub fn mlm_loss(model: &EncoderLm, tape: &mut Tape<f32>, batch: &[MaskedSeq], dropout: Option<&mut ChaCha8Rng>) -> Result<Var, ModelError> {
    let items: Vec<EncodeItem> = batch
        .iter()
        .map(|m| EncodeItem {
            tokens: &m.input,
            prompt: None,
        })
        .collect();
    let enc = model.encode_inner(tape, &items, dropout)?;
    let at: Vec<(usize, usize)> = batch
        .iter()
        .enumerate()
        .flat_map(|(i, m)| m.positions.iter().map(move |&p| (i, p)))
        .collect();
    let h = model.gather_rows(tape, &enc, &at)?;
    let z = model.mlm_logits(tape, h)?;
    let logp = tape.log_softmax_rows(z);
    let l = model.config.vocab_size;
    let mut onehot = vec![0.0f32; at.len() * l];
    for (r, t) in batch.iter().flat_map(|m| m.targets.iter()).enumerate() {
        onehot[r * l + *t as usize] = 1.0;
    }
    let oh = tape.constant(at.len(), l, onehot)?;
    let picked = tape.mul(logp, oh)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / at.len() as f64))
}

/// Accuracy of argmax predictions at masked positions.
pub fn masked_accuracy(model: &EncoderLm, batch: &[MaskedSeq]) -> Result<f64, ModelError> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for chunk in batch.chunks(64) {
        let mut tape = Tape::<f32>::new();
        let items: Vec<EncodeItem> = chunk
            .iter()
            .map(|m| EncodeItem {
                tokens: &m.input,
                prompt: None,
            })
            .collect();
        let enc = model.encode_batch(&mut tape, &items)?;
        let at: Vec<(usize, usize)> = chunk
            .iter()
            .enumerate()
            .flat_map(|(i, m)| m.positions.iter().map(move |&p| (i, p)))
            .collect();
        let h = model.gather_rows(&mut tape, &enc, &at)?;
        let z = model.mlm_logits(&mut tape, h)?;
        let l = model.config.vocab_size;
        let targets = chunk.iter().flat_map(|m| m.targets.iter());
        for (row, &t) in tape.value(z).chunks(l).zip(targets) {
            if argmax(row) == t as usize {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<F: PartialOrd + Copy>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Majority and unigram-guessing accuracies for predicting tokens of `corpus`.
pub fn chance_rates(corpus: &[Sentence], vocab: usize) -> (f64, f64) {
    let mut counts = vec![0usize; vocab];
    let mut n = 0usize;
    for s in corpus {
        for &t in s {
            counts[t as usize] += 1;
            n += 1;
        }
    }
    if n == 0 {
        return (0.0, 0.0);
    }
    let majority = *counts.iter().max().unwrap() as f64 / n as f64;
    let chance = counts.iter().map(|&c| (c as f64 / n as f64).powi(2)).sum();
    (majority, chance)
}

/// Standard masked-LM pretraining. `start_step` continues a step counter
/// from an earlier run; the optimizer state starts fresh.
pub fn pretrain_mlm(model: &mut EncoderLm, corpus: &[Sentence], cfg: &PretrainConfig, mask_id: TokenId, start_step: u64) -> Result<PretrainReport, ModelError> {
    if corpus.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    if !(cfg.mask_prob > 0.0 && cfg.mask_prob < 1.0) {
        return Err(ModelError::Config(format!("mask_prob {} outside (0,1)", cfg.mask_prob)));
    }
    let l = model.config.vocab_size;
    if let Some(&t) = corpus.iter().flatten().find(|&&t| t as usize >= l) {
        return Err(ModelError::TokenOutOfRange { token: t, vocab: l });
    }
    let n_held = ((corpus.len() as f64 * cfg.heldout_fraction) as usize).min(corpus.len() - 1);
    let (held, train) = corpus.split_at(n_held);
    let mut rng = if start_step == 0 {
        rng::stream(cfg.seed, "pretrain-steps")
    } else {
        rng::stream(cfg.seed, &format!("pretrain-steps@{start_step}"))
    };
    let mut held_rng = rng::stream(cfg.seed, "pretrain-heldout");
    let held_masked: Vec<MaskedSeq> = held
        .iter()
        .map(|s| mask_tokens(s, cfg.mask_prob, mask_id, l, &mut held_rng))
        .collect();
    let (majority_rate, chance_rate) = chance_rates(corpus, l);
    model.set_trainable(true);
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut losses = Vec::new();
    let mut window = 0.0;
    let mut in_window = 0;
    let mut dropout_rng = rng::stream(cfg.seed ^ start_step, "pretrain-dropout");
    for step in 0..cfg.steps {
        let batch: Vec<MaskedSeq> = (0..cfg.batch_size)
            .map(|_| {
                let s = train.choose(&mut rng).expect("non-empty");
                mask_tokens(s, cfg.mask_prob, mask_id, l, &mut rng)
            })
            .collect();
        let mut tape = Tape::<f32>::new();
        let loss = mlm_loss(model, &mut tape, &batch, Some(&mut dropout_rng))?;
        window += tape.scalar(loss) as f64;
        in_window += 1;
        let grads = tape.backward(loss)?;
        model.zero_grad();
        let mut err = None;
        model.visit_mut(&mut |_, t| {
            if let Err(e) = grads.accumulate_into(t) {
                err.get_or_insert(e);
            }
        });
        if let Some(e) = err {
            return Err(e.into());
        }
        opt.step(&mut [("", model)])?;
        let done = start_step + step as u64 + 1;
        if in_window == cfg.log_every.max(1) || step + 1 == cfg.steps {
            losses.push((done, window / in_window as f64));
            window = 0.0;
            in_window = 0;
        }
    }
    model.zero_grad();
    let heldout_accuracy = masked_accuracy(model, &held_masked)?;
    Ok(PretrainReport {
        losses,
        heldout_accuracy,
        majority_rate,
        chance_rate,
        steps: start_step + cfg.steps as u64,
    })
}
