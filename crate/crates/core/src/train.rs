//! Losses, the joint training loop, the SP and FT baselines, inference and
//! evaluation.

use std::fmt;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncodeItem, EncoderLm, ModelError};
use crate::nn::Module;
use crate::optim::{AdamW, AdamWConfig, OptimError};
use crate::prompt::{build_cloze, ClozeInput, PromptConfig, PromptError, SoftPrompt, Template, Verbalizer};
use crate::rng;
use crate::synthlang::{few_shot_sample, DataError, Label, NliExample, ParallelPair, Testbed};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor, TensorError};
use crate::translator::{Translator, TranslatorConfig, TranslatorError};

/// Probability floor applied before every logarithm in the losses.
pub const CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mpt,
    Sp,
    Ft,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Mpt => "mpt",
            Method::Sp => "sp",
            Method::Ft => "ft",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mpt" => Ok(Method::Mpt),
            "sp" => Ok(Method::Sp),
            "ft" => Ok(Method::Ft),
            _ => Err(TrainError::Config(format!("unknown method `{s}` (expected mpt, sp or ft)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    /// Weight of the task loss; `1 - alpha` weighs the alignment loss.
    pub alpha: f64,
    /// Learning rate of the prompt and translator parameters.
    pub lr: f64,
    /// Learning rate of backbone parameters (FT, or with `tune_backbone`).
    pub backbone_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub parallel_batch_size: usize,
    pub epochs: usize,
    pub k: usize,
    pub seeds: Vec<u64>,
    pub tune_backbone: bool,
    /// Renormalize label-word probabilities before the task loss.
    pub renormalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Mpt,
            alpha: 0.5,
            lr: 3e-3,
            backbone_lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 24,
            parallel_batch_size: 24,
            epochs: 50,
            k: 64,
            seeds: vec![1, 2, 3, 4, 5],
            tune_backbone: false,
            renormalize: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0,1]", self.alpha));
        }
        if !(self.lr > 0.0 && self.backbone_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.batch_size == 0 || self.parallel_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        Ok(())
    }

    pub fn backbone_trains(&self) -> bool {
        self.method == Method::Ft || self.tune_backbone
    }
}

/// Everything one training run needs besides data and the backbone.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub prompt: PromptConfig,
    pub translator: TranslatorConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.train.validate()?;
        if self.train.method != Method::Ft && self.prompt.length == 0 {
            return Err(TrainError::Config("prompt methods need prompt.length >= 1".into()));
        }
        if !(self.prompt.init_std >= 0.0 && self.translator.init_std >= 0.0) {
            return Err(TrainError::Config("init_std must be non-negative".into()));
        }
        if self.translator.width == Some(0) {
            return Err(TrainError::Config("translator.width must be positive".into()));
        }
        Ok(())
    }

    /// Prompt slots used by this method's cloze.
    pub fn slots(&self) -> usize {
        match self.train.method {
            Method::Ft => 0,
            _ => self.prompt.length,
        }
    }

    pub fn translates(&self) -> bool {
        self.train.method == Method::Mpt && self.translator.enabled
    }
}

#[derive(Debug)]
pub enum TrainError {
    Config(String),
    EmptyBatch,
    Data(DataError),
    Model(ModelError),
    Prompt(PromptError),
    Translator(TranslatorError),
    Tensor(TensorError),
    Optim(OptimError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Config(m) => write!(f, "train config: {m}"),
            TrainError::EmptyBatch => write!(f, "empty batch"),
            TrainError::Data(e) => write!(f, "{e}"),
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Prompt(e) => write!(f, "{e}"),
            TrainError::Translator(e) => write!(f, "{e}"),
            TrainError::Tensor(e) => write!(f, "{e}"),
            TrainError::Optim(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

macro_rules! from_err {
    ($($t:ty => $v:ident),*) => {
        $(impl From<$t> for TrainError {
            fn from(e: $t) -> Self {
                TrainError::$v(e)
            }
        })*
    };
}

from_err!(DataError => Data, ModelError => Model, PromptError => Prompt, TranslatorError => Translator, TensorError => Tensor, OptimError => Optim);

/// Mean of `-log max(P_CLS[gold], 1e-12)` over the rows of a `B × 3` matrix.
pub fn ce_loss<F: Real>(tape: &mut Tape<F>, p_cls: Var, gold: &[usize]) -> Result<Var, TensorError> {
    let (b, n) = tape.shape(p_cls);
    if gold.len() != b {
        return Err(TensorError::Shape {
            op: "ce_loss",
            lhs: vec![b, n],
            rhs: vec![gold.len()],
        });
    }
    let mut onehot = vec![F::zero(); b * n];
    for (r, &g) in gold.iter().enumerate() {
        if g >= n {
            return Err(TensorError::Index {
                op: "ce_loss",
                index: g,
                bound: n,
            });
        }
        onehot[r * n + g] = F::one();
    }
    let clamped = tape.clamp_min(p_cls, CLAMP);
    let logp = tape.log(clamped);
    let oh = tape.constant(b, n, onehot)?;
    let picked = tape.mul(logp, oh)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / b as f64))
}

/// Task loss on label-word probabilities renormalized to sum to one.
pub fn ce_loss_renormalized<F: Real>(tape: &mut Tape<F>, p_cls: Var, gold: &[usize]) -> Result<Var, TensorError> {
    let (b, n) = tape.shape(p_cls);
    let clamped = tape.clamp_min(p_cls, CLAMP);
    let logp = tape.log(clamped);
    let norm = tape.log_softmax_rows(logp);
    let mut onehot = vec![F::zero(); b * n];
    for (r, &g) in gold.iter().enumerate() {
        onehot[r * n + g.min(n - 1)] = F::one();
    }
    let oh = tape.constant(b, n, onehot)?;
    let picked = tape.mul(norm, oh)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / b as f64))
}

/// Batch mean of `KL(P_S‖P_T) + KL(P_T‖P_S)` over full-vocabulary rows,
/// with both distributions floored at 1e-12.
///
/// Computed as `Σ (s - t)(log s - log t)`, which is symmetric in its
/// arguments bit for bit.
pub fn kld_loss<F: Real>(tape: &mut Tape<F>, p_s: Var, p_t: Var) -> Result<Var, TensorError> {
    let b = tape.shape(p_s).0;
    let s = tape.clamp_min(p_s, CLAMP);
    let t = tape.clamp_min(p_t, CLAMP);
    let ls = tape.log(s);
    let lt = tape.log(t);
    let dp = tape.sub(s, t)?;
    let dl = tape.sub(ls, lt)?;
    let prod = tape.mul(dp, dl)?;
    let total = tape.sum(prod);
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// `alpha · ce + (1 - alpha) · kld`.
pub fn total_loss<F: Real>(tape: &mut Tape<F>, alpha: f64, ce: Var, kld: Var) -> Result<Var, TensorError> {
    let a = tape.scale(ce, alpha);
    let b = tape.scale(kld, 1.0 - alpha);
    tape.add(a, b)
}

/// Losses observed at one optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: usize,
    pub epoch: usize,
    pub l_ce: f64,
    /// `None` when the step had no alignment batch.
    pub l_kld: Option<f64>,
    pub l_total: f64,
}

/// Loss nodes of one recorded step and the clamp activity behind them.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub total: Var,
    pub ce: Var,
    pub kld: Option<Var>,
    pub ce_clamps: usize,
    pub kld_clamps: usize,
}

/// Clozes of a parallel pair: source side, target side.
#[derive(Debug, Clone)]
pub struct ParallelCloze {
    pub source: ClozeInput,
    pub target: ClozeInput,
}

/// Trainable state of one run plus its optimizers.
#[derive(Debug, Clone)]
pub struct Learner {
    pub config: RunConfig,
    pub model: EncoderLm,
    pub prompt: Option<SoftPrompt>,
    pub translator: Option<Translator>,
    pub verbalizer: Verbalizer,
    prompt_opt: AdamW,
    backbone_opt: AdamW,
    /// Entries floored by the task loss clamp so far.
    pub ce_clamps: usize,
    /// Entries floored by the alignment loss clamp so far.
    pub kld_clamps: usize,
    pub steps: usize,
}

impl Learner {
    pub fn new(backbone: &EncoderLm, verbalizer: Verbalizer, config: RunConfig, seed: u64) -> Result<Self, TrainError> {
        config.validate()?;
        let mut model = backbone.clone();
        model.set_trainable(config.train.backbone_trains());
        let d = model.config.d_model;
        let p = &config.prompt;
        let prompt = match config.train.method {
            Method::Ft => None,
            _ => Some(SoftPrompt::new(p.length, d, p.init_std, p.reparam, seed)?),
        };
        let translator = match config.train.method {
            Method::Mpt => Some(config.translator.build(d, seed)),
            _ => None,
        };
        let t = &config.train;
        let opt = |lr: f64| {
            AdamW::new(AdamWConfig {
                lr: lr as f32,
                weight_decay: t.weight_decay as f32,
                ..AdamWConfig::default()
            })
        };
        Ok(Learner {
            prompt_opt: opt(t.lr),
            backbone_opt: opt(t.backbone_lr),
            config,
            model,
            prompt,
            translator,
            verbalizer,
            ce_clamps: 0,
            kld_clamps: 0,
            steps: 0,
        })
    }

    /// Records the forward pass of one step.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, task: &[(&ClozeInput, Label)], parallel: &[&ParallelCloze]) -> Result<StepVars, TrainError> {
        if task.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let p_s = match &self.prompt {
            Some(sp) => Some(sp.effective(tape)?),
            None => None,
        };
        let align = self.config.train.method == Method::Mpt && !parallel.is_empty();
        let p_t = match (&self.translator, p_s) {
            (Some(tr), Some(ps)) if align && self.config.translator.enabled => Some(tr.translate(tape, ps)?),
            _ => p_s,
        };
        let mut items: Vec<EncodeItem> = task
            .iter()
            .map(|(c, _)| EncodeItem {
                tokens: &c.tokens,
                prompt: p_s,
            })
            .collect();
        if align {
            items.extend(parallel.iter().map(|pc| EncodeItem {
                tokens: &pc.source.tokens,
                prompt: p_s,
            }));
            items.extend(parallel.iter().map(|pc| EncodeItem {
                tokens: &pc.target.tokens,
                prompt: p_t,
            }));
        }
        let enc = self.model.encode_batch(tape, &items)?;
        let mut at: Vec<(usize, usize)> = task.iter().enumerate().map(|(i, (c, _))| (i, c.mask_pos)).collect();
        if align {
            let nt = task.len();
            let np = parallel.len();
            at.extend(parallel.iter().enumerate().map(|(j, pc)| (nt + j, pc.source.mask_pos)));
            at.extend(parallel.iter().enumerate().map(|(j, pc)| (nt + np + j, pc.target.mask_pos)));
        }
        let h = self.model.gather_rows(tape, &enc, &at)?;
        let p = self.model.mlm_distribution(tape, h)?;
        let nt = task.len();
        let p_task = if align { tape.slice_rows(p, 0, nt)? } else { p };
        let cls = self.verbalizer.classify_var(tape, p_task)?;
        let gold: Vec<usize> = task.iter().map(|(_, l)| l.index()).collect();
        let c0 = tape.clamp_hits();
        let ce = if self.config.train.renormalize {
            ce_loss_renormalized(tape, cls, &gold)?
        } else {
            ce_loss(tape, cls, &gold)?
        };
        let ce_clamps = tape.clamp_hits() - c0;
        if !align {
            return Ok(StepVars {
                total: ce,
                ce,
                kld: None,
                ce_clamps,
                kld_clamps: 0,
            });
        }
        let np = parallel.len();
        let ps = tape.slice_rows(p, nt, np)?;
        let pt = tape.slice_rows(p, nt + np, np)?;
        let c1 = tape.clamp_hits();
        let kld = kld_loss(tape, ps, pt)?;
        let kld_clamps = tape.clamp_hits() - c1;
        let total = total_loss(tape, self.config.train.alpha, ce, kld)?;
        Ok(StepVars {
            total,
            ce,
            kld: Some(kld),
            ce_clamps,
            kld_clamps,
        })
    }

    /// One optimization step on a task batch and an optional alignment batch.
    pub fn step(&mut self, task: &[(&ClozeInput, Label)], parallel: &[&ParallelCloze], epoch: usize) -> Result<StepLosses, TrainError> {
        let mut tape = Tape::<f32>::new();
        let v = self.forward(&mut tape, task, parallel)?;
        let losses = StepLosses {
            step: self.steps + 1,
            epoch,
            l_ce: tape.scalar(v.ce) as f64,
            l_kld: v.kld.map(|k| tape.scalar(k) as f64),
            l_total: tape.scalar(v.total) as f64,
        };
        self.ce_clamps += v.ce_clamps;
        self.kld_clamps += v.kld_clamps;
        let grads = tape.backward(v.total)?;
        let mut err = None;
        let mut apply = |m: &mut dyn Module| {
            m.zero_grad();
            m.visit_mut(&mut |_, t| {
                if let Err(e) = grads.accumulate_into(t) {
                    err.get_or_insert(e);
                }
            });
        };
        if let Some(sp) = &mut self.prompt {
            apply(sp);
        }
        if let Some(tr) = &mut self.translator {
            apply(tr);
        }
        if self.config.train.backbone_trains() {
            apply(&mut self.model);
        }
        if let Some(e) = err {
            return Err(e.into());
        }
        {
            let mut groups: Vec<(&str, &mut dyn Module)> = Vec::new();
            if let Some(sp) = &mut self.prompt {
                groups.push(("prompt.", sp));
            }
            if let Some(tr) = &mut self.translator {
                groups.push(("translator.", tr));
            }
            if !groups.is_empty() {
                self.prompt_opt.step(&mut groups)?;
            }
        }
        if self.config.train.backbone_trains() {
            self.backbone_opt.step(&mut [("backbone.", &mut self.model)])?;
        }
        self.steps += 1;
        Ok(losses)
    }

    /// The frozen inference pipeline for this learner's method.
    pub fn pipeline(&self) -> Result<Pipeline, TrainError> {
        Ok(match (&self.prompt, &self.translator) {
            (None, _) => Pipeline::Promptless,
            (Some(sp), Some(tr)) if self.config.translates() => Pipeline::Translated {
                source: sp.effective_tensor()?,
                translator: tr.clone(),
            },
            (Some(sp), _) => Pipeline::Fixed(sp.effective_tensor()?),
        })
    }
}

/// How a trained run obtains the prompt for a language at inference time.
#[derive(Debug, Clone)]
pub enum Pipeline {
    /// No prompt slots (fine-tuning).
    Promptless,
    /// One prompt for every language.
    Fixed(Tensor),
    /// The source prompt for the source language and its translation for
    /// every other language.
    Translated { source: Tensor, translator: Translator },
}

/// Stages of one inference call, reported to instrumentation hooks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Translate,
    FillTemplate,
    Predict,
}

impl Pipeline {
    /// The prompt used for `lang`.
    pub fn prompt_for(&self, lang: usize, hook: &mut dyn FnMut(Stage)) -> Result<Option<Tensor>, TrainError> {
        Ok(match self {
            Pipeline::Promptless => None,
            Pipeline::Fixed(p) => Some(p.clone()),
            Pipeline::Translated { source, .. } if lang == 0 => Some(source.clone()),
            Pipeline::Translated { source, translator } => {
                hook(Stage::Translate);
                Some(translator.translate_tensor(source)?)
            }
        })
    }

    pub fn slots(&self) -> usize {
        match self {
            Pipeline::Promptless => 0,
            Pipeline::Fixed(p) | Pipeline::Translated { source: p, .. } => p.shape()[0],
        }
    }
}

/// Predicts the label of one example rendered in `ex.lang`.
pub fn infer(model: &EncoderLm, pipeline: &Pipeline, template: &Template, verbalizer: &Verbalizer, ex: &NliExample, hook: &mut dyn FnMut(Stage)) -> Result<Label, TrainError> {
    let prompt = pipeline.prompt_for(ex.lang, hook)?;
    let cloze = build_cloze(&ex.premise, &ex.hypothesis, template, pipeline.slots(), model.config.max_seq_len, ex.lang)?;
    hook(Stage::FillTemplate);
    let mut tape = Tape::<f32>::new();
    let pv = match &prompt {
        Some(p) => {
            let (r, c) = p.dims2();
            Some(tape.constant(r, c, p.data().to_vec())?)
        }
        None => None,
    };
    let h = model.encode(&mut tape, &cloze.tokens, pv)?;
    let hx = model.mask_representation(&mut tape, h, &cloze.tokens, cloze.mask_pos, template.mask)?;
    let p = model.mlm_distribution(&mut tape, hx)?;
    hook(Stage::Predict);
    Ok(verbalizer.predict(tape.value(p)))
}

/// Predictions for a whole split, batched.
pub fn predict_split(model: &EncoderLm, prompt: Option<&Tensor>, template: &Template, verbalizer: &Verbalizer, split: &[NliExample]) -> Result<Vec<Label>, TrainError> {
    let m = prompt.map_or(0, |p| p.shape()[0]);
    let mut out = Vec::with_capacity(split.len());
    for chunk in split.chunks(128) {
        let clozes = chunk
            .iter()
            .map(|e| build_cloze(&e.premise, &e.hypothesis, template, m, model.config.max_seq_len, e.lang))
            .collect::<Result<Vec<_>, _>>()?;
        let mut tape = Tape::<f32>::new();
        let pv = match prompt {
            Some(p) => {
                let (r, c) = p.dims2();
                Some(tape.constant(r, c, p.data().to_vec())?)
            }
            None => None,
        };
        let items: Vec<EncodeItem> = clozes
            .iter()
            .map(|c| EncodeItem {
                tokens: &c.tokens,
                prompt: pv,
            })
            .collect();
        let enc = model.encode_batch(&mut tape, &items)?;
        let at: Vec<(usize, usize)> = clozes.iter().enumerate().map(|(i, c)| (i, c.mask_pos)).collect();
        let h = model.gather_rows(&mut tape, &enc, &at)?;
        let p = model.mlm_distribution(&mut tape, h)?;
        let l = model.config.vocab_size;
        out.extend(tape.value(p).chunks(l).map(|row| verbalizer.predict(row)));
    }
    Ok(out)
}

/// Accuracy of one language's split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangAccuracy {
    pub lang: usize,
    pub correct: usize,
    pub n_test: usize,
    pub accuracy: f64,
}

pub fn accuracy(pred: &[Label], gold: &[NliExample]) -> Result<LangAccuracy, TrainError> {
    if gold.is_empty() {
        return Err(TrainError::Config("empty test split".into()));
    }
    let correct = pred.iter().zip(gold).filter(|(p, g)| **p == g.label).count();
    Ok(LangAccuracy {
        lang: gold[0].lang,
        correct,
        n_test: gold.len(),
        accuracy: correct as f64 / gold.len() as f64,
    })
}

/// Accuracy on every language's test split; parameters are only read.
pub fn evaluate(model: &EncoderLm, pipeline: &Pipeline, template: &Template, verbalizer: &Verbalizer, test: &[Vec<NliExample>]) -> Result<Vec<LangAccuracy>, TrainError> {
    let mut out = Vec::with_capacity(test.len());
    for split in test {
        if split.is_empty() {
            return Err(TrainError::Config("empty test split".into()));
        }
        let prompt = pipeline.prompt_for(split[0].lang, &mut |_| {})?;
        let pred = predict_split(model, prompt.as_ref(), template, verbalizer, split)?;
        out.push(accuracy(&pred, split)?);
    }
    Ok(out)
}

/// Macro average of per-language accuracies.
pub fn macro_average(rows: &[LangAccuracy]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().map(|r| r.accuracy).sum::<f64>() / rows.len() as f64
}

/// Inputs shared by every run over one data directory.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub testbed: &'a Testbed,
    pub train_pool: &'a [NliExample],
    pub test: &'a [Vec<NliExample>],
    pub parallel: &'a [ParallelPair],
}

/// Everything one seed produced.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub learner: Learner,
    pub curve: Vec<StepLosses>,
    pub accuracies: Vec<LangAccuracy>,
    /// The few-shot split, for paired-comparison checks.
    pub train_split: Vec<NliExample>,
}

pub fn parallel_clozes(pairs: &[ParallelPair], template: &Template, m: usize, max_len: usize) -> Result<Vec<ParallelCloze>, TrainError> {
    pairs
        .iter()
        .map(|pp| {
            Ok(ParallelCloze {
                source: build_cloze(&pp.source_premise, &pp.source_hypothesis, template, m, max_len, 0)?,
                target: build_cloze(&pp.target_premise, &pp.target_hypothesis, template, m, max_len, pp.target_lang)?,
            })
        })
        .collect()
}

/// Trains one seed and evaluates it on every language.
///
/// `on_step` sees each step's losses; it may stop early by returning false.
pub fn train_seed(backbone: &EncoderLm, data: TrainData<'_>, config: &RunConfig, seed: u64, on_step: &mut dyn FnMut(&Learner, &StepLosses) -> bool) -> Result<SeedRun, TrainError> {
    let vocab = &data.testbed.vocab;
    let verbalizer = Verbalizer::new(vocab.label_words);
    let template = Template::new(config.prompt.position, vocab);
    let mut learner = Learner::new(backbone, verbalizer, config.clone(), seed)?;
    let tc = &config.train;
    let m = config.slots();
    let max_len = backbone.config.max_seq_len;
    let train_split = few_shot_sample(data.train_pool, tc.k, seed)?;
    let clozes = train_split
        .iter()
        .map(|e| Ok((build_cloze(&e.premise, &e.hypothesis, &template, m, max_len, 0)?, e.label)))
        .collect::<Result<Vec<_>, TrainError>>()?;
    let par = if tc.method == Method::Mpt {
        parallel_clozes(data.parallel, &template, m, max_len)?
    } else {
        Vec::new()
    };
    if tc.method == Method::Mpt && par.is_empty() {
        log::info!("empty parallel corpus: no alignment batches, equivalent to alpha = 1");
    }
    let mut order_rng: ChaCha8Rng = rng::stream(seed, "epoch-order");
    let mut par_rng: ChaCha8Rng = rng::stream(seed, "parallel-order");
    let mut par_order: Vec<usize> = (0..par.len()).collect();
    par_order.shuffle(&mut par_rng);
    let mut par_cursor = 0;
    let mut curve = Vec::new();
    let mut idx: Vec<usize> = (0..clozes.len()).collect();
    'outer: for epoch in 1..=tc.epochs {
        idx.shuffle(&mut order_rng);
        for chunk in idx.chunks(tc.batch_size) {
            let task: Vec<(&ClozeInput, Label)> = chunk.iter().map(|&i| (&clozes[i].0, clozes[i].1)).collect();
            let mut pbatch: Vec<&ParallelCloze> = Vec::new();
            if !par.is_empty() {
                for _ in 0..tc.parallel_batch_size.min(par.len()) {
                    if par_cursor == par_order.len() {
                        par_order.shuffle(&mut par_rng);
                        par_cursor = 0;
                    }
                    pbatch.push(&par[par_order[par_cursor]]);
                    par_cursor += 1;
                }
            }
            let losses = learner.step(&task, &pbatch, epoch)?;
            let keep_going = on_step(&learner, &losses);
            curve.push(losses);
            if !keep_going {
                break 'outer;
            }
        }
    }
    let pipeline = learner.pipeline()?;
    let accuracies = evaluate(&learner.model, &pipeline, &template, &verbalizer, data.test)?;
    Ok(SeedRun {
        seed,
        learner,
        curve,
        accuracies,
        train_split,
    })
}

/// Hash of every parameter value of a module, for purity checks.
pub fn module_fingerprint(m: &dyn Module) -> String {
    let mut bytes = Vec::new();
    m.visit(&mut |name, t| {
        bytes.extend_from_slice(name.as_bytes());
        for x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    });
    crate::dataio::sha256_hex(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelConfig;
    use crate::synthlang::DataConfig;
    use crate::prompt::Position;
    use crate::translator::TranslatorTag;
    use proptest::prelude::*;

    fn ce_value(p: &[[f64; 3]], gold: &[usize]) -> f64 {
        let mut tape = Tape::<f64>::new();
        let flat: Vec<f64> = p.iter().flatten().copied().collect();
        let v = tape.constant(p.len(), 3, flat).unwrap();
        let l = ce_loss(&mut tape, v, gold).unwrap();
        tape.scalar(l)
    }

    fn kld_value(s: &[f64], t: &[f64]) -> f64 {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(1, s.len(), s.to_vec()).unwrap();
        let b = tape.constant(1, t.len(), t.to_vec()).unwrap();
        let l = kld_loss(&mut tape, a, b).unwrap();
        tape.scalar(l)
    }

    #[test]
    fn ce_examples() {
        assert_eq!(ce_value(&[[1.0, 0.0, 0.0]], &[0]), 0.0);
        assert!((ce_value(&[[1.0 / 3.0; 3]], &[1]) - 3f64.ln()).abs() < 1e-12);
        assert!((ce_value(&[[0.25, 0.25, 0.5]], &[2]) - 0.5f64.ln().abs()).abs() < 1e-12);
    }

    #[test]
    fn ce_zero_probability_is_clamped_and_counted() {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(1, 3, vec![0.0, 0.5, 0.5]).unwrap();
        let l = ce_loss(&mut tape, v, &[0]).unwrap();
        assert!((tape.scalar(l) - (-(1e-12f64).ln())).abs() < 1e-9);
        assert_eq!(tape.clamp_hits(), 1);
    }

    #[test]
    fn kld_examples() {
        assert_eq!(kld_value(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5]), 0.0);
        let direct = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln() + 0.25 * (0.25f64 / 0.5).ln() + 0.75 * (0.75f64 / 0.5).ln();
        let got = kld_value(&[0.5, 0.5], &[0.25, 0.75]);
        assert!((got - direct).abs() < 1e-12);
        assert!((got - 0.2747).abs() < 1e-4);
    }

    #[test]
    fn total_loss_boundaries() {
        let mut tape = Tape::<f64>::new();
        let ce = tape.constant(1, 1, vec![1.0]).unwrap();
        let kld = tape.constant(1, 1, vec![0.5]).unwrap();
        for (alpha, want) in [(1.0, 1.0), (0.0, 0.5), (0.5, 0.75)] {
            let t = total_loss(&mut tape, alpha, ce, kld).unwrap();
            assert_eq!(tape.scalar(t), want);
        }
    }

    proptest! {
        #[test]
        fn kld_is_symmetric_and_nonnegative(a in proptest::collection::vec(0.01f64..1.0, 5), b in proptest::collection::vec(0.01f64..1.0, 5)) {
            let na: f64 = a.iter().sum();
            let nb: f64 = b.iter().sum();
            let p: Vec<f64> = a.iter().map(|x| x / na).collect();
            let q: Vec<f64> = b.iter().map(|x| x / nb).collect();
            let pq = kld_value(&p, &q);
            prop_assert_eq!(pq, kld_value(&q, &p));
            prop_assert!(pq >= 0.0);
        }
    }

    fn tiny_setup() -> (Testbed, crate::dataio::Corpora, EncoderLm) {
        let bed = Testbed::new(DataConfig {
            n_languages: 3,
            train_pool: 60,
            test_per_lang: 30,
            parallel_pool: 40,
            parallel_size: 20,
            pretrain_per_lang: 10,
            ..DataConfig::default()
        })
        .unwrap();
        let c = bed.generate().unwrap();
        let model = EncoderLm::new(
            ModelConfig {
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                d_ff: 16,
                vocab_size: bed.vocab.len(),
                max_seq_len: 24,
                ..ModelConfig::default()
            },
            1,
        )
        .unwrap();
        (bed, c, model)
    }

    fn quick(method: Method) -> RunConfig {
        RunConfig {
            train: TrainConfig {
                method,
                k: 4,
                epochs: 2,
                batch_size: 6,
                parallel_batch_size: 4,
                seeds: vec![1],
                ..TrainConfig::default()
            },
            ..RunConfig::default()
        }
    }

    fn with(mut c: RunConfig, f: impl FnOnce(&mut RunConfig)) -> RunConfig {
        f(&mut c);
        c
    }

    #[test]
    fn alpha_one_leaves_translator_gradients_zero() {
        let (bed, c, model) = tiny_setup();
        let data = TrainData {
            testbed: &bed,
            train_pool: &c.train_pool,
            test: &c.test,
            parallel: &c.parallel,
        };
        let cfg = with(quick(Method::Mpt), |c| c.train.alpha = 1.0);
        let mut saw = 0;
        let run = train_seed(&model, data, &cfg, 1, &mut |l, losses| {
            assert!(losses.l_kld.is_some());
            l.translator.as_ref().unwrap().visit(&mut |_, t| {
                assert!(t.grad().unwrap().iter().all(|&g| g == 0.0));
                saw += 1;
            });
            true
        })
        .unwrap();
        assert!(saw > 0);
        assert_eq!(run.accuracies.len(), 3);
    }

    #[test]
    fn identity_language_and_identity_translator_give_zero_alignment_loss() {
        let (bed, c, model) = tiny_setup();
        let template = Template::new(Position::Suffix, &bed.vocab);
        let pairs: Vec<ParallelPair> = c
            .parallel_pool
            .iter()
            .take(5)
            .map(|(p, h)| ParallelPair {
                source_premise: p.clone(),
                source_hypothesis: h.clone(),
                target_lang: 0,
                target_premise: p.clone(),
                target_hypothesis: h.clone(),
            })
            .collect();
        let par = parallel_clozes(&pairs, &template, 4, 24).unwrap();
        let cfg = with(quick(Method::Mpt), |c| c.translator.tag = TranslatorTag::Linear1);
        let mut learner = Learner::new(&model, Verbalizer::new(bed.vocab.label_words), cfg, 1).unwrap();
        let task = build_cloze(&c.train_pool[0].premise, &c.train_pool[0].hypothesis, &template, 4, 24, 0).unwrap();
        for _ in 0..3 {
            let tr = learner.translator.as_mut().unwrap();
            tr.visit_mut(&mut |n, t| {
                if n == "linear.w" {
                    t.assign(Tensor::identity(8).data()).unwrap();
                } else {
                    t.data_mut().iter_mut().for_each(|x| *x = 0.0);
                }
            });
            let refs: Vec<&ParallelCloze> = par.iter().collect();
            let losses = learner.step(&[(&task, c.train_pool[0].label)], &refs, 1).unwrap();
            assert_eq!(losses.l_kld, Some(0.0));
        }
    }

    #[test]
    fn paired_methods_share_few_shot_splits() {
        let (bed, c, model) = tiny_setup();
        let data = TrainData {
            testbed: &bed,
            train_pool: &c.train_pool,
            test: &c.test,
            parallel: &c.parallel,
        };
        let splits: Vec<Vec<NliExample>> = [Method::Mpt, Method::Sp, Method::Ft]
            .iter()
            .map(|&m| {
                let cfg = with(quick(m), |c| c.train.epochs = 1);
                train_seed(&model, data, &cfg, 3, &mut |_, _| true).unwrap().train_split
            })
            .collect();
        assert_eq!(splits[0], splits[1]);
        assert_eq!(splits[1], splits[2]);
    }

    #[test]
    fn mpt_inference_translates_then_fills_then_predicts() {
        let (bed, c, model) = tiny_setup();
        let learner = Learner::new(&model, Verbalizer::new(bed.vocab.label_words), quick(Method::Mpt), 1).unwrap();
        let pipe = learner.pipeline().unwrap();
        let template = Template::new(Position::Suffix, &bed.vocab);
        let ex = &c.test[2][0];
        let mut stages = Vec::new();
        let a = infer(&model, &pipe, &template, &learner.verbalizer, ex, &mut |s| stages.push(s)).unwrap();
        assert_eq!(stages, vec![Stage::Translate, Stage::FillTemplate, Stage::Predict]);
        let b = infer(&model, &pipe, &template, &learner.verbalizer, ex, &mut |_| {}).unwrap();
        assert_eq!(a, b);
        let batched = predict_split(&model, pipe.prompt_for(2, &mut |_| {}).unwrap().as_ref(), &template, &learner.verbalizer, &c.test[2][..1]).unwrap();
        assert_eq!(batched[0], a);
    }

    #[test]
    fn evaluation_recounts_and_is_pure() {
        let (bed, c, model) = tiny_setup();
        let learner = Learner::new(&model, Verbalizer::new(bed.vocab.label_words), quick(Method::Sp), 1).unwrap();
        let pipe = learner.pipeline().unwrap();
        let template = Template::new(Position::Suffix, &bed.vocab);
        let before = (module_fingerprint(&model), module_fingerprint(learner.prompt.as_ref().unwrap()));
        let rows = evaluate(&model, &pipe, &template, &learner.verbalizer, &c.test).unwrap();
        let after = (module_fingerprint(&model), module_fingerprint(learner.prompt.as_ref().unwrap()));
        assert_eq!(before, after);
        for (row, split) in rows.iter().zip(&c.test) {
            let mut correct = 0;
            for ex in split {
                if infer(&model, &pipe, &template, &learner.verbalizer, ex, &mut |_| {}).unwrap() == ex.label {
                    correct += 1;
                }
            }
            assert_eq!(row.correct, correct);
            assert_eq!(row.accuracy, correct as f64 / split.len() as f64);
        }
        let avg = macro_average(&rows);
        let mean = rows.iter().map(|r| r.accuracy).sum::<f64>() / rows.len() as f64;
        assert!((avg - mean).abs() < 1e-9);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let (_, c, _) = tiny_setup();
        let pred: Vec<Label> = c.test[1].iter().map(|e| e.label).collect();
        assert_eq!(accuracy(&pred, &c.test[1]).unwrap().accuracy, 1.0);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn ft_without_epochs_trains_nothing() {
        let (bed, c, model) = tiny_setup();
        let data = TrainData {
            testbed: &bed,
            train_pool: &c.train_pool,
            test: &c.test,
            parallel: &c.parallel,
        };
        let cfg = with(quick(Method::Ft), |c| c.train.epochs = 0);
        let run = train_seed(&model, data, &cfg, 1, &mut |_, _| true).unwrap();
        assert!(run.curve.is_empty());
        assert_eq!(module_fingerprint(&run.learner.model), module_fingerprint(&model));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { alpha: 1.5, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { seeds: vec![], ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
        assert_eq!(TrainConfig::default().seeds, vec![1, 2, 3, 4, 5]);
        assert_eq!(RunConfig::default().prompt.length, 4);
        assert!(with(RunConfig::default(), |c| c.prompt.length = 0).validate().is_err());
        assert!(with(quick(Method::Ft), |c| c.prompt.length = 0).validate().is_ok());
    }
}
