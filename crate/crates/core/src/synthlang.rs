//! Synthetic multilingual NLI testbed.
//!
//! A base language (lang 0) draws sentences from a block of content tokens.
//! Every other language owns its own block and is reached through a token
//! bijection, optionally followed by a word-order transform; "far" languages
//! add the order transform, "near" ones do not. Labels depend only on set
//! relations between premise and hypothesis, so they survive rendering into
//! any language unchanged.

use std::collections::{HashMap, HashSet};
use std::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;

pub type TokenId = u32;
pub type Sentence = Vec<TokenId>;

pub const MASK: &str = "[MASK]";
pub const PERIOD: &str = ".";
pub const QUESTION: &str = "?";
pub const NEG: &str = "[NEG]";
pub const LABEL_WORDS: [&str; 3] = ["[ENT]", "[CON]", "[NEU]"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Entailment,
    Contradiction,
    Neutral,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Entailment, Label::Contradiction, Label::Neutral];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Label::Entailment => "entailment",
            Label::Contradiction => "contradiction",
            Label::Neutral => "neutral",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataError {
    UnreachableMix(String),
    TokenOutsideDomain { token: TokenId, lang: usize },
    UnknownToken(String),
    UnknownLanguage(String),
    InsufficientSupport { label: Label, have: usize, need: usize },
    NoTargets,
    PoolTooSmall { have: usize, need: usize },
    Io(String),
    Parse { line: usize, msg: String },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::UnreachableMix(m) => write!(f, "label mix unreachable: {m}"),
            DataError::TokenOutsideDomain { token, lang } => {
                write!(f, "token {token} is outside the rendering domain of language {lang}")
            }
            DataError::UnknownToken(t) => write!(f, "unknown token `{t}`"),
            DataError::UnknownLanguage(l) => write!(f, "unknown language `{l}`"),
            DataError::InsufficientSupport { label, have, need } => {
                write!(f, "class {label} has {have} examples, need {need}")
            }
            DataError::NoTargets => write!(f, "no target languages"),
            DataError::PoolTooSmall { have, need } => {
                write!(f, "pool has {have} sentence pairs, need {need}")
            }
            DataError::Io(m) => write!(f, "{m}"),
            DataError::Parse { line, msg } => write!(f, "line {line}: {msg}"),
        }
    }
}

impl std::error::Error for DataError {}

/// Which pretraining sequences carry an answer word after the question mark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMode {
    /// Plain sentence pairs only.
    None,
    /// Only source-language pairs, answered with the label words.
    SourceOnly,
    /// Every language, each with its own three answer words; the source
    /// language's answer words are the label words.
    PerLanguage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    /// Source plus target languages.
    pub n_languages: usize,
    pub content_per_lang: usize,
    pub premise_len_min: usize,
    pub premise_len_max: usize,
    pub hypothesis_len_max: usize,
    /// Relative weights of entailment, contradiction, neutral.
    pub label_mix: [f64; 3],
    pub train_pool: usize,
    pub test_per_lang: usize,
    pub parallel_pool: usize,
    pub parallel_size: usize,
    pub pretrain_per_lang: usize,
    /// Pretraining pairs for the source language; `None` uses `pretrain_per_lang`.
    pub pretrain_source: Option<usize>,
    pub pretrain_answers: AnswerMode,
    /// Fraction of eligible pretraining pairs that carry an answer word.
    pub answer_rate: f64,
    /// Answer rate for target-language pairs; `None` uses `answer_rate`.
    pub target_answer_rate: Option<f64>,
    /// Fraction of content words a near language shares with the source.
    pub near_shared: f64,
    /// Fraction of content words a far language shares with the source.
    pub far_shared: f64,
    /// Render the negation marker as a distinct word in every language.
    pub lexical_neg: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 7,
            n_languages: 7,
            content_per_lang: 24,
            premise_len_min: 4,
            premise_len_max: 8,
            hypothesis_len_max: 4,
            label_mix: [1.0, 1.0, 1.0],
            train_pool: 3000,
            test_per_lang: 300,
            parallel_pool: 2000,
            parallel_size: 500,
            pretrain_per_lang: 2000,
            pretrain_source: Some(9000),
            pretrain_answers: AnswerMode::SourceOnly,
            answer_rate: 1.0,
            target_answer_rate: None,
            near_shared: 0.25,
            far_shared: 0.0,
            lexical_neg: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    Source,
    Near,
    Far,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "by")]
pub enum OrderTransform {
    Identity,
    Reverse,
    Rotate(usize),
}

impl OrderTransform {
    fn apply(self, s: &mut Sentence) {
        match self {
            OrderTransform::Identity => {}
            OrderTransform::Reverse => s.reverse(),
            OrderTransform::Rotate(r) => {
                if !s.is_empty() {
                    let n = s.len();
                    s.rotate_left(r % n);
                }
            }
        }
    }

    fn invert(self, s: &mut Sentence) {
        match self {
            OrderTransform::Identity => {}
            OrderTransform::Reverse => s.reverse(),
            OrderTransform::Rotate(r) => {
                if !s.is_empty() {
                    let n = s.len();
                    s.rotate_right(r % n);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub id: usize,
    pub name: String,
    pub distance: Distance,
    pub order: OrderTransform,
    /// `perm[i]` is the index, inside this language's content block, of the
    /// word that renders base content word `i`.
    pub perm: Vec<usize>,
    /// `shared[i]` marks base word `i` as a cognate: it renders as the base
    /// token itself.
    #[serde(default)]
    pub shared: Vec<bool>,
}

/// Token inventory: reserved symbols, per-language answer words, then one
/// block of content words per language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
    pub mask: TokenId,
    pub period: TokenId,
    pub question: TokenId,
    pub neg: TokenId,
    pub label_words: [TokenId; 3],
    /// Answer words per language (index 0 equals `label_words`).
    pub answer_words: Vec<[TokenId; 3]>,
    /// Negation word per language (index 0 equals `neg`).
    #[serde(default)]
    pub neg_words: Vec<TokenId>,
    pub content_start: TokenId,
    pub content_per_lang: usize,
}

impl Vocab {
    fn build(n_languages: usize, content_per_lang: usize, answers: AnswerMode, lexical_neg: bool) -> Vocab {
        let mut tokens: Vec<String> = [MASK, PERIOD, QUESTION, NEG]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let label_words = std::array::from_fn(|i| (4 + i) as TokenId);
        tokens.extend(LABEL_WORDS.iter().map(|s| s.to_string()));
        let mut answer_words = vec![label_words];
        for k in 1..n_languages {
            if answers == AnswerMode::PerLanguage {
                let base = tokens.len() as TokenId;
                for w in LABEL_WORDS {
                    tokens.push(format!("{}@L{k}", &w[..w.len() - 1]) + "]");
                }
                answer_words.push([base, base + 1, base + 2]);
            } else {
                answer_words.push(label_words);
            }
        }
        let mut neg_words = vec![3];
        for k in 1..n_languages {
            if lexical_neg {
                neg_words.push(tokens.len() as TokenId);
                tokens.push(format!("[NEG@L{k}]"));
            } else {
                neg_words.push(3);
            }
        }
        let content_start = tokens.len() as TokenId;
        for k in 0..n_languages {
            for j in 0..content_per_lang {
                tokens.push(format!("L{k}:w{j}"));
            }
        }
        let mut v = Vocab {
            tokens,
            index: HashMap::new(),
            mask: 0,
            period: 1,
            question: 2,
            neg: 3,
            label_words,
            answer_words,
            neg_words,
            content_start,
            content_per_lang,
        };
        v.reindex();
        v
    }

    pub(crate) fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Symbols that are not content words.
    pub fn reserved_count(&self) -> usize {
        self.content_start as usize
    }

    pub fn id(&self, token: &str) -> Result<TokenId, DataError> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| DataError::UnknownToken(token.to_string()))
    }

    pub fn name(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    /// Content word `index` of language `lang`.
    pub fn content(&self, lang: usize, index: usize) -> TokenId {
        self.content_start + (lang * self.content_per_lang + index) as TokenId
    }

    /// `(lang, index)` of a content token, `None` for reserved symbols.
    pub fn content_coords(&self, id: TokenId) -> Option<(usize, usize)> {
        if id < self.content_start || id as usize >= self.tokens.len() {
            return None;
        }
        let off = (id - self.content_start) as usize;
        Some((off / self.content_per_lang, off % self.content_per_lang))
    }

    pub fn encode(&self, words: &[String]) -> Result<Sentence, DataError> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, s: &[TokenId]) -> Vec<String> {
        s.iter().map(|&t| self.name(t).to_string()).collect()
    }
}

/// Gold label of a base-language pair.
///
/// Contradiction if the hypothesis negates and its remaining tokens all occur
/// in the premise; entailment if every hypothesis token occurs in the premise;
/// neutral otherwise.
pub fn label_oracle(premise: &[TokenId], hypothesis: &[TokenId], neg: TokenId) -> Label {
    let pset: HashSet<TokenId> = premise.iter().copied().collect();
    let has_neg = hypothesis.contains(&neg);
    let rest_in_premise = hypothesis.iter().filter(|&&t| t != neg).all(|t| pset.contains(t));
    if has_neg && rest_in_premise {
        Label::Contradiction
    } else if !has_neg && rest_in_premise {
        Label::Entailment
    } else {
        Label::Neutral
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NliExample {
    pub premise: Sentence,
    pub hypothesis: Sentence,
    pub label: Label,
    pub lang: usize,
}

/// A base-language sentence pair and its rendering in one target language.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelPair {
    pub source_premise: Sentence,
    pub source_hypothesis: Sentence,
    pub target_lang: usize,
    pub target_premise: Sentence,
    pub target_hypothesis: Sentence,
}

/// One pretraining sequence: a sentence pair in `lang`, optionally answered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PretrainItem {
    pub lang: usize,
    pub premise: Sentence,
    pub hypothesis: Sentence,
    pub answer: Option<TokenId>,
}

impl PretrainItem {
    /// `P . H ?` followed by `a .` when answered.
    pub fn tokens(&self, vocab: &Vocab) -> Sentence {
        let mut s = self.premise.clone();
        s.push(vocab.period);
        s.extend_from_slice(&self.hypothesis);
        s.push(vocab.question);
        if let Some(a) = self.answer {
            s.push(a);
            s.push(vocab.period);
        }
        s
    }
}

/// Vocabulary, language inventory and the generator settings that built them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Testbed {
    pub config: DataConfig,
    pub vocab: Vocab,
    pub languages: Vec<LanguageSpec>,
}

impl Testbed {
    pub fn new(config: DataConfig) -> Result<Testbed, DataError> {
        validate(&config)?;
        let vocab = Vocab::build(config.n_languages, config.content_per_lang, config.pretrain_answers, config.lexical_neg);
        let mut rng = rng::stream(config.seed, "languages");
        let n_targets = config.n_languages - 1;
        let n_near = n_targets.div_ceil(2);
        let mut languages = vec![LanguageSpec {
            id: 0,
            name: "L0".into(),
            distance: Distance::Source,
            order: OrderTransform::Identity,
            perm: (0..config.content_per_lang).collect(),
            shared: vec![true; config.content_per_lang],
        }];
        for k in 1..config.n_languages {
            let far = k > n_near;
            let perm = if far {
                derangement(config.content_per_lang, &mut rng)
            } else {
                let mut p: Vec<usize> = (0..config.content_per_lang).collect();
                p.shuffle(&mut rng);
                p
            };
            let frac = if far { config.far_shared } else { config.near_shared };
            let n_shared = (frac * config.content_per_lang as f64).round() as usize;
            let mut shared = vec![false; config.content_per_lang];
            for i in rand::seq::index::sample(&mut rng, config.content_per_lang, n_shared) {
                shared[i] = true;
            }
            languages.push(LanguageSpec {
                id: k,
                name: format!("L{k}"),
                distance: if far { Distance::Far } else { Distance::Near },
                order: if far { OrderTransform::Reverse } else { OrderTransform::Identity },
                perm,
                shared,
            });
        }
        Ok(Testbed {
            config,
            vocab,
            languages,
        })
    }

    pub fn n_languages(&self) -> usize {
        self.languages.len()
    }

    pub fn target_langs(&self) -> Vec<usize> {
        (1..self.languages.len()).collect()
    }

    pub fn lang_by_name(&self, name: &str) -> Result<usize, DataError> {
        self.languages
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| DataError::UnknownLanguage(name.to_string()))
    }

    /// Maps a base-language sentence into `lang`: token bijection, then the
    /// order transform.
    pub fn render(&self, sentence: &[TokenId], lang: usize) -> Result<Sentence, DataError> {
        let spec = &self.languages[lang];
        let mut out = Vec::with_capacity(sentence.len());
        for &t in sentence {
            match self.vocab.content_coords(t) {
                None if t == self.vocab.neg => out.push(self.vocab.neg_words[lang]),
                None => out.push(t),
                Some((0, i)) if spec.shared[i] => out.push(t),
                Some((0, i)) => out.push(self.vocab.content(lang, spec.perm[i])),
                Some(_) => return Err(DataError::TokenOutsideDomain { token: t, lang }),
            }
        }
        spec.order.apply(&mut out);
        Ok(out)
    }

    /// Inverse of [`Testbed::render`].
    pub fn unrender(&self, sentence: &[TokenId], lang: usize) -> Result<Sentence, DataError> {
        let spec = &self.languages[lang];
        let mut inv = vec![0; spec.perm.len()];
        for (i, &p) in spec.perm.iter().enumerate() {
            inv[p] = i;
        }
        let mut s = sentence.to_vec();
        spec.order.invert(&mut s);
        for t in s.iter_mut() {
            match self.vocab.content_coords(*t) {
                None if *t == self.vocab.neg_words[lang] => *t = self.vocab.neg,
                None if self.vocab.neg_words.contains(t) => return Err(DataError::TokenOutsideDomain { token: *t, lang }),
                None => {}
                Some((0, i)) if spec.shared[i] => {}
                Some((l, j)) if l == lang && l != 0 && !spec.shared[inv[j]] => *t = self.vocab.content(0, inv[j]),
                Some(_) => return Err(DataError::TokenOutsideDomain { token: *t, lang }),
            }
        }
        Ok(s)
    }

    pub fn render_example(&self, ex: &NliExample, lang: usize) -> Result<NliExample, DataError> {
        Ok(NliExample {
            premise: self.render(&ex.premise, lang)?,
            hypothesis: self.render(&ex.hypothesis, lang)?,
            label: ex.label,
            lang,
        })
    }

    pub fn label_of(&self, premise: &[TokenId], hypothesis: &[TokenId]) -> Label {
        label_oracle(premise, hypothesis, self.vocab.neg)
    }

    /// Draws one base-language pair with the requested label.
    fn draw_pair<R: Rng + ?Sized>(&self, label: Label, rng: &mut R) -> (Sentence, Sentence) {
        let c = &self.config;
        let plen = rng.random_range(c.premise_len_min..=c.premise_len_max);
        let mut words: Vec<usize> = (0..c.content_per_lang).collect();
        words.shuffle(rng);
        let premise: Sentence = words[..plen].iter().map(|&i| self.vocab.content(0, i)).collect();
        let outside: Vec<TokenId> = words[plen..].iter().map(|&i| self.vocab.content(0, i)).collect();
        let hmax = c.hypothesis_len_max;
        let mut hyp: Sentence = match label {
            Label::Entailment => {
                let n = rng.random_range(1..=hmax.min(plen));
                premise.choose_multiple(rng, n).copied().collect()
            }
            Label::Contradiction => {
                let n = rng.random_range(1..=(hmax - 1).max(1).min(plen));
                let mut h: Sentence = premise.choose_multiple(rng, n).copied().collect();
                h.push(self.vocab.neg);
                h
            }
            Label::Neutral => {
                let total = rng.random_range(1..=hmax);
                let novel = rng.random_range(1..=total.min(2).min(outside.len()));
                let kept = (total - novel).min(plen);
                let mut h: Sentence = premise.choose_multiple(rng, kept).copied().collect();
                h.extend(outside.choose_multiple(rng, novel).copied());
                h
            }
        };
        hyp.shuffle(rng);
        (premise, hyp)
    }

    /// `n` labelled base-language examples with exact per-class counts from
    /// the configured mix. Pairs already in `seen` are skipped and new ones
    /// are added, which keeps separately drawn pools disjoint.
    pub fn gen_base_corpus(&self, n: usize, seed: u64, tag: &str, seen: &mut HashSet<(Sentence, Sentence)>) -> Result<Vec<NliExample>, DataError> {
        let counts = mix_counts(&self.config.label_mix, n);
        let mut rng = rng::stream(seed, tag);
        let mut out = Vec::with_capacity(n);
        for (label, &count) in Label::ALL.iter().zip(&counts) {
            let mut made = 0;
            let mut attempts = 0usize;
            while made < count {
                attempts += 1;
                if attempts > 1000 * (count + 10) {
                    return Err(DataError::UnreachableMix(format!(
                        "could not draw {count} distinct {label} pairs"
                    )));
                }
                let (p, h) = self.draw_pair(*label, &mut rng);
                debug_assert_eq!(self.label_of(&p, &h), *label);
                if seen.insert((p.clone(), h.clone())) {
                    out.push(NliExample {
                        premise: p,
                        hypothesis: h,
                        label: *label,
                        lang: 0,
                    });
                    made += 1;
                }
            }
        }
        out.shuffle(&mut rng);
        Ok(out)
    }

    /// Source pairs for the alignment corpus, relation drawn uniformly; the
    /// label is dropped.
    pub fn gen_parallel_pool(&self, n: usize, seed: u64, seen: &mut HashSet<(Sentence, Sentence)>) -> Result<Vec<(Sentence, Sentence)>, DataError> {
        let mut rng = rng::stream(seed, "parallel-pool");
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 1000 * (n + 10) {
                return Err(DataError::PoolTooSmall { have: out.len(), need: n });
            }
            let label = Label::ALL[rng.random_range(0..3)];
            let (p, h) = self.draw_pair(label, &mut rng);
            if seen.insert((p.clone(), h.clone())) {
                out.push((p, h));
            }
        }
        Ok(out)
    }

    /// Selects `size` source pairs from `pool` and renders each into one
    /// uniformly chosen target language.
    pub fn build_parallel_corpus(&self, pool: &[(Sentence, Sentence)], targets: &[usize], size: usize, seed: u64) -> Result<Vec<ParallelPair>, DataError> {
        if targets.is_empty() {
            return Err(DataError::NoTargets);
        }
        if size > pool.len() {
            return Err(DataError::PoolTooSmall {
                have: pool.len(),
                need: size,
            });
        }
        let mut rng = rng::stream(seed, "parallel-corpus");
        let picked = rand::seq::index::sample(&mut rng, pool.len(), size);
        let mut out = Vec::with_capacity(size);
        for i in picked.into_iter() {
            let (p, h) = &pool[i];
            let lang = targets[rng.random_range(0..targets.len())];
            out.push(ParallelPair {
                source_premise: p.clone(),
                source_hypothesis: h.clone(),
                target_lang: lang,
                target_premise: self.render(p, lang)?,
                target_hypothesis: self.render(h, lang)?,
            });
        }
        Ok(out)
    }

    /// Mixed-language pretraining sequences, `pretrain_per_lang` per language.
    pub fn gen_pretrain_corpus(&self, seed: u64, seen: &mut HashSet<(Sentence, Sentence)>) -> Result<Vec<PretrainItem>, DataError> {
        let c = &self.config;
        let mut rng = rng::stream(seed, "pretrain");
        let mut out = Vec::with_capacity(c.pretrain_per_lang * self.n_languages());
        for lang in 0..self.n_languages() {
            let answered_lang = match c.pretrain_answers {
                AnswerMode::None => false,
                AnswerMode::SourceOnly => lang == 0,
                AnswerMode::PerLanguage => true,
            };
            let want = if lang == 0 { c.pretrain_source.unwrap_or(c.pretrain_per_lang) } else { c.pretrain_per_lang };
            let mut made = 0;
            let mut attempts = 0usize;
            while made < want {
                attempts += 1;
                if attempts > 1000 * (want + 10) {
                    return Err(DataError::PoolTooSmall {
                        have: made,
                        need: want,
                    });
                }
                let label = Label::ALL[rng.random_range(0..3)];
                let (p, h) = self.draw_pair(label, &mut rng);
                if !seen.insert((p.clone(), h.clone())) {
                    continue;
                }
                let rate = if lang == 0 { c.answer_rate } else { c.target_answer_rate.unwrap_or(c.answer_rate) };
                let answer = (answered_lang && rng.random_bool(rate))
                    .then(|| self.vocab.answer_words[lang][label.index()]);
                out.push(PretrainItem {
                    lang,
                    premise: self.render(&p, lang)?,
                    hypothesis: self.render(&h, lang)?,
                    answer,
                });
                made += 1;
            }
        }
        out.shuffle(&mut rng);
        Ok(out)
    }
}

fn validate(c: &DataConfig) -> Result<(), DataError> {
    let bad = |m: String| Err(DataError::UnreachableMix(m));
    if c.n_languages == 0 {
        return bad("n_languages must be at least 1".into());
    }
    if c.premise_len_min == 0 || c.premise_len_min > c.premise_len_max {
        return bad(format!(
            "premise length range {}..={} is empty",
            c.premise_len_min, c.premise_len_max
        ));
    }
    if c.content_per_lang <= c.premise_len_max {
        return bad(format!(
            "{} content words cannot leave a novel word outside a {}-word premise",
            c.content_per_lang, c.premise_len_max
        ));
    }
    if c.hypothesis_len_max < 2 {
        return bad("hypothesis_len_max must be at least 2 to fit a negation".into());
    }
    if c.label_mix.iter().any(|w| !w.is_finite() || *w < 0.0) || c.label_mix.iter().sum::<f64>() <= 0.0 {
        return bad(format!("label weights {:?} must be non-negative with a positive sum", c.label_mix));
    }
    if !(0.0..=1.0).contains(&c.answer_rate) {
        return bad(format!("answer_rate {} outside [0,1]", c.answer_rate));
    }
    for (name, f) in [("near_shared", c.near_shared), ("far_shared", c.far_shared)] {
        if !(0.0..=1.0).contains(&f) {
            return bad(format!("{name} {f} outside [0,1]"));
        }
    }
    if let Some(r) = c.target_answer_rate.filter(|r| !(0.0..=1.0).contains(r)) {
        return bad(format!("target_answer_rate {r} outside [0,1]"));
    }
    Ok(())
}

/// Per-class counts for `n` items by largest remainder.
pub fn mix_counts(weights: &[f64; 3], n: usize) -> [usize; 3] {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: [usize; 3] = std::array::from_fn(|i| exact[i].floor() as usize);
    let mut rem: Vec<(usize, f64)> = exact.iter().enumerate().map(|(i, e)| (i, e - e.floor())).collect();
    rem.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut left = n - counts.iter().sum::<usize>();
    for (i, _) in rem {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

fn derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    if n < 2 {
        return p;
    }
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &x)| i != x) {
            return p;
        }
    }
}

/// Exactly `k` examples of each class, drawn without replacement.
pub fn few_shot_sample(corpus: &[NliExample], k: usize, seed: u64) -> Result<Vec<NliExample>, DataError> {
    let mut rng = rng::stream(seed, "few-shot");
    let mut out = Vec::with_capacity(3 * k);
    for label in Label::ALL {
        let idx: Vec<usize> = corpus
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == label)
            .map(|(i, _)| i)
            .collect();
        if idx.len() < k {
            return Err(DataError::InsufficientSupport {
                label,
                have: idx.len(),
                need: k,
            });
        }
        let picked = rand::seq::index::sample(&mut rng, idx.len(), k);
        out.extend(picked.into_iter().map(|j| corpus[idx[j]].clone()));
    }
    out.shuffle(&mut rng);
    Ok(out)
}
