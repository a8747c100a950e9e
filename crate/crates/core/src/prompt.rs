//! Soft prompts, cloze templates and the verbalizer.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointError};
use crate::encoder::SLOT;
use crate::nn::{visit_child, visit_child_mut, Linear, Lstm, Module};
use crate::rng;
use crate::synthlang::{Label, TokenId, Vocab};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor, TensorError};

#[derive(Debug)]
pub enum PromptError {
    EmptySentence,
    TooLong { premise: usize, hypothesis: usize, m: usize, total: usize, max: usize },
    Tensor(TensorError),
    Checkpoint(CheckpointError),
    Format(String),
}

impl fmt::Display for PromptError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PromptError::EmptySentence => write!(f, "premise and hypothesis must be non-empty"),
            PromptError::TooLong { premise, hypothesis, m, total, max } => write!(
                f,
                "cloze of length {total} (premise {premise}, hypothesis {hypothesis}, prompt {m}) exceeds max_seq_len {max}"
            ),
            PromptError::Tensor(e) => write!(f, "{e}"),
            PromptError::Checkpoint(e) => write!(f, "{e}"),
            PromptError::Format(m) => write!(f, "prompt artifact: {m}"),
        }
    }
}

impl std::error::Error for PromptError {}

impl From<TensorError> for PromptError {
    fn from(e: TensorError) -> Self {
        PromptError::Tensor(e)
    }
}

impl From<CheckpointError> for PromptError {
    fn from(e: CheckpointError) -> Self {
        PromptError::Checkpoint(e)
    }
}

/// Where the prompt span sits in the cloze.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    /// `[p] P . H ? [MASK] .`
    Prefix,
    /// `P . [p] H ? [MASK] .`
    Midfix,
    /// `P . H ? [p] [MASK] .`
    Suffix,
    /// `P . H ? [MASK] [p] .`
    Endfix,
}

impl Position {
    pub const ALL: [Position; 4] = [Position::Prefix, Position::Midfix, Position::Suffix, Position::Endfix];

    pub fn name(self) -> &'static str {
        match self {
            Position::Prefix => "prefix",
            Position::Midfix => "midfix",
            Position::Suffix => "suffix",
            Position::Endfix => "endfix",
        }
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    /// Number of prompt rows `m`.
    pub length: usize,
    pub position: Position,
    /// Route the raw prompt through the BiLSTM + MLP reparameterization.
    pub reparam: bool,
    pub init_std: f32,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            length: 4,
            position: Position::Suffix,
            reparam: true,
            init_std: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Template {
    pub position: Position,
    pub period: TokenId,
    pub question: TokenId,
    pub mask: TokenId,
}

impl Template {
    pub fn new(position: Position, vocab: &Vocab) -> Self {
        Template {
            position,
            period: vocab.period,
            question: vocab.question,
            mask: vocab.mask,
        }
    }
}

/// A rendered cloze: `tokens` holds [`SLOT`] at prompt positions.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ClozeInput {
    pub tokens: Vec<TokenId>,
    /// `(start, m)`.
    pub prompt_span: (usize, usize),
    pub mask_pos: usize,
    pub lang: usize,
}

pub fn build_cloze(premise: &[TokenId], hypothesis: &[TokenId], template: &Template, m: usize, max_len: usize, lang: usize) -> Result<ClozeInput, PromptError> {
    if premise.is_empty() || hypothesis.is_empty() {
        return Err(PromptError::EmptySentence);
    }
    let total = premise.len() + hypothesis.len() + 4 + m;
    if total > max_len {
        return Err(PromptError::TooLong {
            premise: premise.len(),
            hypothesis: hypothesis.len(),
            m,
            total,
            max: max_len,
        });
    }
    let slots = std::iter::repeat_n(SLOT, m);
    let mut t = Vec::with_capacity(total);
    let mut start = 0;
    if template.position == Position::Prefix {
        t.extend(slots.clone());
    }
    t.extend_from_slice(premise);
    t.push(template.period);
    if template.position == Position::Midfix {
        start = t.len();
        t.extend(slots.clone());
    }
    t.extend_from_slice(hypothesis);
    t.push(template.question);
    if template.position == Position::Suffix {
        start = t.len();
        t.extend(slots.clone());
    }
    let mask_pos = t.len();
    t.push(template.mask);
    if template.position == Position::Endfix {
        start = t.len();
        t.extend(slots);
    }
    t.push(template.period);
    debug_assert_eq!(t.len(), total);
    Ok(ClozeInput {
        tokens: t,
        prompt_span: (start, m),
        mask_pos,
        lang,
    })
}

/// Ordered label words; word `i` stands for class `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verbalizer {
    pub label_words: [TokenId; 3],
}

impl Verbalizer {
    pub fn new(label_words: [TokenId; 3]) -> Self {
        Verbalizer { label_words }
    }

    fn cols(&self) -> [usize; 3] {
        self.label_words.map(|t| t as usize)
    }

    /// Label-word probabilities, not renormalized.
    pub fn classify<F: Copy>(&self, p_mlm: &[F]) -> [F; 3] {
        self.label_words.map(|t| p_mlm[t as usize])
    }

    /// `B × 3` label-word probabilities of `B × l` distributions.
    pub fn classify_var<F: Real>(&self, tape: &mut Tape<F>, p_mlm: Var) -> Result<Var, TensorError> {
        tape.gather_cols(p_mlm, &self.cols())
    }

    pub fn predict<F: PartialOrd + Copy>(&self, p_mlm: &[F]) -> Label {
        let cls = self.classify(p_mlm);
        Label::from_index(crate::encoder::argmax(&cls)).expect("three classes")
    }
}

/// Trainable prompt `p` plus its reparameterization.
///
/// The effective prompt is `p + MLP(BiLSTM(p))`: a bidirectional LSTM
/// with `d/2` units per direction reads the rows, and a two-layer ReLU MLP
/// maps the concatenated states back to width `d`. Zeroing the last MLP
/// layer makes the reparameterization the identity.
#[derive(Debug, Clone)]
pub struct SoftPrompt {
    pub raw: Tensor,
    /// `None` disables the reparameterization entirely.
    pub reparam: Option<Reparam>,
}

#[derive(Debug, Clone)]
pub struct Reparam {
    pub fwd: Lstm,
    pub bwd: Lstm,
    /// First MLP layer, forward-state half (with the bias).
    pub mlp1: Linear,
    /// First MLP layer, backward-state half.
    pub mlp1_bwd: Tensor,
    pub mlp2: Linear,
}

impl SoftPrompt {
    pub fn new(m: usize, d: usize, init_std: f32, reparam: bool, seed: u64) -> Result<Self, PromptError> {
        if m == 0 || d == 0 {
            return Err(PromptError::Format(format!("prompt shape {m}×{d} must be positive")));
        }
        let mut rng = rng::stream(seed, "soft-prompt");
        let raw = Tensor::randn(vec![m, d], init_std, &mut rng).trainable();
        let reparam = reparam.then(|| {
            let h = (d / 2).max(1);
            let s1 = (1.0 / (2 * h) as f32).sqrt();
            Reparam {
                fwd: Lstm::new(d, h, &mut rng),
                bwd: Lstm::new(d, h, &mut rng),
                mlp1: Linear::new(h, d, s1, &mut rng),
                mlp1_bwd: Tensor::randn(vec![h, d], s1, &mut rng).trainable(),
                mlp2: Linear::new(d, d, 0.1 * init_std, &mut rng),
            }
        });
        Ok(SoftPrompt { raw, reparam })
    }

    pub fn m(&self) -> usize {
        self.raw.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.raw.shape()[1]
    }

    /// Records the effective prompt on `tape`.
    pub fn effective<F: Real>(&self, tape: &mut Tape<F>) -> Result<Var, TensorError> {
        let p = tape.param(&self.raw);
        let Some(r) = &self.reparam else { return Ok(p) };
        let hf = r.fwd.forward(tape, p, false)?;
        let hb = r.bwd.forward(tape, p, true)?;
        let a = r.mlp1.forward(tape, hf)?;
        let wb = tape.param(&r.mlp1_bwd);
        let b = tape.matmul(hb, wb)?;
        let z = tape.add(a, b)?;
        let z = tape.relu(z);
        let delta = r.mlp2.forward(tape, z)?;
        tape.add(p, delta)
    }

    /// The effective prompt as a plain tensor.
    pub fn effective_tensor(&self) -> Result<Tensor, TensorError> {
        let mut tape = Tape::<f32>::new();
        let v = self.effective(&mut tape)?;
        let (r, c) = tape.shape(v);
        Tensor::new(vec![r, c], tape.value(v).to_vec())
    }
}

impl Module for Reparam {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_child("lstm_fwd", &self.fwd, f);
        visit_child("lstm_bwd", &self.bwd, f);
        visit_child("mlp1", &self.mlp1, f);
        f("mlp1_bwd", &self.mlp1_bwd);
        visit_child("mlp2", &self.mlp2, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_child_mut("lstm_fwd", &mut self.fwd, f);
        visit_child_mut("lstm_bwd", &mut self.bwd, f);
        visit_child_mut("mlp1", &mut self.mlp1, f);
        f("mlp1_bwd", &mut self.mlp1_bwd);
        visit_child_mut("mlp2", &mut self.mlp2, f);
    }
}

impl Module for SoftPrompt {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("raw", &self.raw);
        if let Some(r) = &self.reparam {
            visit_child("reparam", r, f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("raw", &mut self.raw);
        if let Some(r) = &mut self.reparam {
            visit_child_mut("reparam", r, f);
        }
    }
}

/// A frozen effective prompt, as stored on disk.
#[derive(Debug, Clone)]
pub struct PromptArtifact {
    pub position: Position,
    /// `"L0"` for a source prompt, `"multilingual"` for a translated one.
    pub language: String,
    pub prompt: Tensor,
}

#[derive(Serialize, Deserialize)]
struct ArtifactMeta {
    kind: String,
    m: usize,
    d: usize,
    variant: Position,
    language: String,
}

impl PromptArtifact {
    pub fn m(&self) -> usize {
        self.prompt.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.prompt.shape()[1]
    }

    pub fn save(&self, stem: &Path) -> Result<(), PromptError> {
        let meta = ArtifactMeta {
            kind: "prompt".into(),
            m: self.m(),
            d: self.d(),
            variant: self.position,
            language: self.language.clone(),
        };
        let meta = serde_json::to_value(meta).map_err(|e| PromptError::Format(e.to_string()))?;
        checkpoint::save(stem, meta, &[("prompt".into(), &self.prompt)])?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self, PromptError> {
        let (meta, mut tensors) = checkpoint::load(stem)?;
        let meta: ArtifactMeta = serde_json::from_value(meta).map_err(|e| PromptError::Format(e.to_string()))?;
        if meta.kind != "prompt" || tensors.len() != 1 {
            return Err(PromptError::Format("not a prompt artifact".into()));
        }
        let (_, prompt) = tensors.pop().expect("one tensor");
        if prompt.shape() != [meta.m, meta.d] {
            return Err(PromptError::Format(format!(
                "header says {}×{}, tensor is {:?}",
                meta.m,
                meta.d,
                prompt.shape()
            )));
        }
        Ok(PromptArtifact {
            position: meta.variant,
            language: meta.language,
            prompt,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthlang::{DataConfig, Testbed};
    use proptest::prelude::*;

    fn template(pos: Position) -> Template {
        Template {
            position: pos,
            period: 1,
            question: 2,
            mask: 0,
        }
    }

    #[test]
    fn suffix_layout_arithmetic() {
        let c = build_cloze(&[10, 11, 12], &[13, 14], &template(Position::Suffix), 4, 48, 0).unwrap();
        assert_eq!(c.tokens.len(), 13);
        assert_eq!(c.mask_pos, 11);
        assert_eq!(c.prompt_span, (7, 4));
        assert_eq!(c.tokens, vec![10, 11, 12, 1, 13, 14, 2, SLOT, SLOT, SLOT, SLOT, 0, 1]);
    }

    #[test]
    fn prefix_layout_arithmetic() {
        let c = build_cloze(&[10, 11, 12], &[13, 14], &template(Position::Prefix), 4, 48, 0).unwrap();
        assert_eq!(c.prompt_span, (0, 4));
        assert_eq!(c.mask_pos, 11);
    }

    #[test]
    fn midfix_and_endfix_layouts() {
        let c = build_cloze(&[10, 11, 12], &[13, 14], &template(Position::Midfix), 4, 48, 0).unwrap();
        assert_eq!(c.prompt_span, (4, 4));
        assert_eq!(c.mask_pos, 11);
        let c = build_cloze(&[10, 11, 12], &[13, 14], &template(Position::Endfix), 4, 48, 0).unwrap();
        assert_eq!(c.mask_pos, 7);
        assert_eq!(c.prompt_span, (8, 4));
        assert_eq!(*c.tokens.last().unwrap(), 1);
    }

    #[test]
    fn promptless_cloze() {
        let c = build_cloze(&[10, 11, 12], &[13, 14], &template(Position::Suffix), 0, 48, 0).unwrap();
        assert_eq!(c.tokens.len(), 9);
        assert_eq!(c.prompt_span.1, 0);
        assert!(!c.tokens.contains(&SLOT));
    }

    #[test]
    fn overflow_names_lengths() {
        let err = build_cloze(&[10; 8], &[11; 4], &template(Position::Suffix), 4, 19, 0).unwrap_err();
        match err {
            PromptError::TooLong { total, max, .. } => assert_eq!((total, max), (20, 19)),
            e => panic!("{e}"),
        }
    }

    proptest! {
        #[test]
        fn one_mask_and_m_contiguous_slots(plen in 1usize..10, hlen in 1usize..6, m in 0usize..9, pi in 0usize..4) {
            let pos = Position::ALL[pi];
            let c = build_cloze(&vec![10; plen], &vec![11; hlen], &template(pos), m, 48, 0).unwrap();
            prop_assert_eq!(c.tokens.iter().filter(|&&t| t == 0).count(), 1);
            prop_assert_eq!(c.tokens[c.mask_pos], 0);
            let slots: Vec<usize> = (0..c.tokens.len()).filter(|&i| c.tokens[i] == SLOT).collect();
            prop_assert_eq!(slots.len(), m);
            if m > 0 {
                prop_assert_eq!(slots[0], c.prompt_span.0);
                prop_assert_eq!(*slots.last().unwrap(), c.prompt_span.0 + m - 1);
            }
            prop_assert_eq!(c.tokens.len(), plen + hlen + 4 + m);
        }

        #[test]
        fn prediction_ignores_renormalization(p in proptest::collection::vec(0.001f64..1.0, 8)) {
            let total: f64 = p.iter().sum();
            let p: Vec<f64> = p.iter().map(|x| x / total).collect();
            let v = Verbalizer::new([1, 4, 6]);
            let cls = v.classify(&p);
            prop_assert!(cls.iter().sum::<f64>() <= 1.0 + 1e-12);
            let s: f64 = cls.iter().sum();
            let renorm = cls.map(|x| x / s);
            prop_assert_eq!(crate::encoder::argmax(&cls), crate::encoder::argmax(&renorm));
        }

        #[test]
        fn raising_a_label_logit_never_lowers_its_rank(z in proptest::collection::vec(-3.0f64..3.0, 8), bump in 0.0f64..5.0, i in 0usize..3) {
            let v = Verbalizer::new([1, 4, 6]);
            let soft = |z: &[f64]| {
                let mut r = z.to_vec();
                crate::tape::softmax_in_place(&mut r);
                r
            };
            let rank = |cls: [f64; 3], i: usize| cls.iter().filter(|&&x| x > cls[i]).count();
            let before = v.classify(&soft(&z));
            let mut z2 = z.clone();
            z2[v.label_words[i] as usize] += bump;
            let after = v.classify(&soft(&z2));
            prop_assert!(rank(after, i) <= rank(before, i));
        }
    }

    #[test]
    fn classify_extracts_without_renormalizing() {
        let mut p = vec![0.0f32; 16];
        p[5] = 0.2;
        p[9] = 0.1;
        p[13] = 0.3;
        let v = Verbalizer::new([5, 9, 13]);
        assert_eq!(v.classify(&p), [0.2, 0.1, 0.3]);
        assert_eq!(v.predict(&p), Label::Neutral);
        let uniform = vec![1.0f32 / 16.0; 16];
        assert_eq!(v.classify(&uniform), [1.0 / 16.0; 3]);
        assert_eq!(v.predict(&uniform), Label::Entailment);
    }

    #[test]
    fn effective_prompt_shape_and_identity() {
        let mut sp = SoftPrompt::new(4, 8, 0.5, true, 3).unwrap();
        let e = sp.effective_tensor().unwrap();
        assert_eq!(e.shape(), &[4, 8]);
        assert_ne!(e.data(), sp.raw.data());
        let r = sp.reparam.as_mut().unwrap();
        r.mlp2.w.data_mut().iter_mut().for_each(|x| *x = 0.0);
        r.mlp2.b.data_mut().iter_mut().for_each(|x| *x = 0.0);
        let e = sp.effective_tensor().unwrap();
        assert_eq!(e.data(), sp.raw.data());
        assert_ne!(e.id(), sp.raw.id());
    }

    #[test]
    fn effective_prompt_is_deterministic() {
        let sp = SoftPrompt::new(4, 8, 0.5, true, 3).unwrap();
        let a = sp.effective_tensor().unwrap();
        let b = sp.effective_tensor().unwrap();
        assert_eq!(a.data(), b.data());
        let sp2 = SoftPrompt::new(4, 8, 0.5, true, 3).unwrap();
        assert_eq!(sp2.effective_tensor().unwrap().data(), a.data());
    }

    #[test]
    fn artifact_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("p");
        let sp = SoftPrompt::new(4, 8, 0.5, true, 3).unwrap();
        let art = PromptArtifact {
            position: Position::Midfix,
            language: "L0".into(),
            prompt: sp.effective_tensor().unwrap(),
        };
        art.save(&stem).unwrap();
        let back = PromptArtifact::load(&stem).unwrap();
        assert_eq!(back.position, Position::Midfix);
        assert_eq!(back.language, "L0");
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.prompt), bits(&art.prompt));
    }

    #[test]
    fn template_uses_vocab_punctuation() {
        let bed = Testbed::new(DataConfig::default()).unwrap();
        let t = Template::new(Position::Suffix, &bed.vocab);
        assert_eq!((t.period, t.question, t.mask), (bed.vocab.period, bed.vocab.question, bed.vocab.mask));
    }
}
