//! Prompt translators: maps from an `m × d` source prompt to a target prompt.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointError};
use crate::nn::{visit_child, visit_child_mut, EncoderBlock, Linear, Lstm, Module};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TranslatorTag {
    #[serde(rename = "linear-1")]
    Linear1,
    #[serde(rename = "linear-2")]
    Linear2,
    #[serde(rename = "lstm-1")]
    Lstm1,
    #[serde(rename = "lstm-2")]
    Lstm2,
    #[serde(rename = "transformer-1")]
    Transformer1,
    #[serde(rename = "transformer-2")]
    Transformer2,
}

impl TranslatorTag {
    pub const ALL: [TranslatorTag; 6] = [
        TranslatorTag::Linear1,
        TranslatorTag::Linear2,
        TranslatorTag::Lstm1,
        TranslatorTag::Lstm2,
        TranslatorTag::Transformer1,
        TranslatorTag::Transformer2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TranslatorTag::Linear1 => "linear-1",
            TranslatorTag::Linear2 => "linear-2",
            TranslatorTag::Lstm1 => "lstm-1",
            TranslatorTag::Lstm2 => "lstm-2",
            TranslatorTag::Transformer1 => "transformer-1",
            TranslatorTag::Transformer2 => "transformer-2",
        }
    }

    fn depth(self) -> usize {
        match self {
            TranslatorTag::Lstm2 | TranslatorTag::Transformer2 => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for TranslatorTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TranslatorTag {
    type Err = TranslatorError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TranslatorTag::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| TranslatorError::UnknownTag(s.to_string()))
    }
}

#[derive(Debug)]
pub enum TranslatorError {
    UnknownTag(String),
    Shape { expected: usize, got: (usize, usize) },
    Tensor(TensorError),
    Checkpoint(CheckpointError),
    Format(String),
}

impl fmt::Display for TranslatorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TranslatorError::UnknownTag(t) => write!(
                f,
                "unknown translator `{t}` (expected one of linear-1, linear-2, lstm-1, lstm-2, transformer-1, transformer-2)"
            ),
            TranslatorError::Shape { expected, got } => {
                write!(f, "translator expects width {expected}, got a {}×{} prompt", got.0, got.1)
            }
            TranslatorError::Tensor(e) => write!(f, "{e}"),
            TranslatorError::Checkpoint(e) => write!(f, "{e}"),
            TranslatorError::Format(m) => write!(f, "translator checkpoint: {m}"),
        }
    }
}

impl std::error::Error for TranslatorError {}

impl From<TensorError> for TranslatorError {
    fn from(e: TensorError) -> Self {
        TranslatorError::Tensor(e)
    }
}

impl From<CheckpointError> for TranslatorError {
    fn from(e: CheckpointError) -> Self {
        TranslatorError::Checkpoint(e)
    }
}

#[derive(Debug, Clone)]
enum Body {
    Linear1(Linear),
    Linear2 { up: Linear, down: Linear },
    Lstm { layers: Vec<Lstm>, out: Linear },
    Transformer(Vec<EncoderBlock>),
}

#[derive(Debug, Clone)]
pub struct Translator {
    tag: TranslatorTag,
    d: usize,
    width: usize,
    body: Body,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TranslatorConfig {
    pub tag: TranslatorTag,
    /// Hidden width; `None` picks [`default_width`].
    pub width: Option<usize>,
    pub init_std: f32,
    /// When false the alignment branch feeds the source prompt to the
    /// target side unchanged and inference reuses it everywhere.
    pub enabled: bool,
}

impl Default for TranslatorConfig {
    fn default() -> Self {
        TranslatorConfig {
            tag: TranslatorTag::Linear2,
            width: None,
            init_std: INIT_STD,
            enabled: true,
        }
    }
}

impl TranslatorConfig {
    pub fn build(&self, d: usize, seed: u64) -> Translator {
        let width = self.width.unwrap_or_else(|| default_width(self.tag, d));
        make_translator_with(self.tag, d, width, self.init_std, seed)
    }
}

/// Default weight scale for freshly built translators.
pub const INIT_STD: f32 = 0.02;

/// Builds a translator with the default width for `tag`: `2d` for
/// linear-2, and for the recurrent and attention variants the width whose
/// parameter count lands closest to linear-2's.
pub fn make_translator(tag: TranslatorTag, d: usize, seed: u64) -> Translator {
    make_translator_with(tag, d, default_width(tag, d), INIT_STD, seed)
}

pub fn make_translator_with(tag: TranslatorTag, d: usize, width: usize, init_std: f32, seed: u64) -> Translator {
    let mut rng = rng::stream(seed, &format!("translator-{tag}"));
    let body = match tag {
        TranslatorTag::Linear1 => Body::Linear1(Linear::new(d, d, init_std, &mut rng)),
        TranslatorTag::Linear2 => Body::Linear2 {
            up: Linear::new(d, width, init_std, &mut rng),
            down: Linear::new(width, d, init_std, &mut rng),
        },
        TranslatorTag::Lstm1 | TranslatorTag::Lstm2 => {
            let layers = (0..tag.depth())
                .map(|i| Lstm::new(if i == 0 { d } else { width }, width, &mut rng))
                .collect();
            Body::Lstm {
                layers,
                out: Linear::new(width, d, init_std, &mut rng),
            }
        }
        TranslatorTag::Transformer1 | TranslatorTag::Transformer2 => Body::Transformer(
            (0..tag.depth())
                .map(|_| EncoderBlock::new(d, 1, width, width, init_std, &mut rng))
                .collect(),
        ),
    };
    Translator { tag, d, width, body }
}

/// Parameters of a `tag` translator at width `w`.
pub fn param_count(tag: TranslatorTag, d: usize, w: usize) -> usize {
    let lstm = |n_in: usize| 4 * (n_in * w + w + w * w);
    match tag {
        TranslatorTag::Linear1 => d * d + d,
        TranslatorTag::Linear2 => (d * w + w) + (w * d + d),
        TranslatorTag::Lstm1 => lstm(d) + w * d + d,
        TranslatorTag::Lstm2 => lstm(d) + lstm(w) + w * d + d,
        TranslatorTag::Transformer1 | TranslatorTag::Transformer2 => {
            let block = 4 * d + 3 * (d * w + w) + w * d + d + (d * w + w) + (w * d + d);
            tag.depth() * block
        }
    }
}

pub fn default_width(tag: TranslatorTag, d: usize) -> usize {
    match tag {
        TranslatorTag::Linear1 => d,
        TranslatorTag::Linear2 => 2 * d,
        _ => {
            let target = param_count(TranslatorTag::Linear2, d, 2 * d) as i64;
            (1..=8 * d)
                .min_by_key(|&w| (param_count(tag, d, w) as i64 - target).abs())
                .expect("non-empty range")
        }
    }
}

impl Translator {
    pub fn tag(&self) -> TranslatorTag {
        self.tag
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Maps an `m × d` prompt to `m × d`.
    pub fn translate<F: Real>(&self, tape: &mut Tape<F>, p: Var) -> Result<Var, TranslatorError> {
        let (m, d) = tape.shape(p);
        if d != self.d {
            return Err(TranslatorError::Shape {
                expected: self.d,
                got: (m, d),
            });
        }
        let out = match &self.body {
            Body::Linear1(l) => l.forward(tape, p)?,
            Body::Linear2 { up, down } => {
                let h = up.forward(tape, p)?;
                let h = tape.relu(h);
                down.forward(tape, h)?
            }
            Body::Lstm { layers, out } => {
                let mut h = p;
                for layer in layers {
                    h = layer.forward(tape, h, false)?;
                }
                out.forward(tape, h)?
            }
            Body::Transformer(blocks) => {
                let mut h = p;
                for b in blocks {
                    h = b.forward(tape, h)?;
                }
                h
            }
        };
        Ok(out)
    }

    /// Translates a plain tensor.
    pub fn translate_tensor(&self, p: &Tensor) -> Result<Tensor, TranslatorError> {
        let mut tape = Tape::<f32>::new();
        let (r, c) = p.dims2();
        let v = tape.constant(r, c, p.data().to_vec())?;
        let out = self.translate(&mut tape, v)?;
        Ok(Tensor::new(vec![r, c], tape.value(out).to_vec())?)
    }

    pub fn save(&self, stem: &Path) -> Result<(), TranslatorError> {
        let meta = serde_json::json!({
            "kind": "translator",
            "tag": self.tag,
            "d": self.d,
            "width": self.width,
            "param_count": self.param_count(),
        });
        checkpoint::save_module(stem, meta, self)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self, TranslatorError> {
        #[derive(Deserialize)]
        struct Meta {
            kind: String,
            tag: TranslatorTag,
            d: usize,
            width: usize,
        }
        let manifest = checkpoint::read_manifest(stem)?;
        let meta: Meta = serde_json::from_value(manifest.meta).map_err(|e| TranslatorError::Format(e.to_string()))?;
        if meta.kind != "translator" {
            return Err(TranslatorError::Format(format!("kind `{}` is not a translator", meta.kind)));
        }
        let mut t = make_translator_with(meta.tag, meta.d, meta.width, INIT_STD, 0);
        checkpoint::load_into(stem, &mut t)?;
        Ok(t)
    }
}

impl Module for Translator {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        match &self.body {
            Body::Linear1(l) => visit_child("linear", l, f),
            Body::Linear2 { up, down } => {
                visit_child("up", up, f);
                visit_child("down", down, f);
            }
            Body::Lstm { layers, out } => {
                for (i, l) in layers.iter().enumerate() {
                    visit_child(&format!("lstm{i}"), l, f);
                }
                visit_child("out", out, f);
            }
            Body::Transformer(blocks) => {
                for (i, b) in blocks.iter().enumerate() {
                    visit_child(&format!("block{i}"), b, f);
                }
            }
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match &mut self.body {
            Body::Linear1(l) => visit_child_mut("linear", l, f),
            Body::Linear2 { up, down } => {
                visit_child_mut("up", up, f);
                visit_child_mut("down", down, f);
            }
            Body::Lstm { layers, out } => {
                for (i, l) in layers.iter_mut().enumerate() {
                    visit_child_mut(&format!("lstm{i}"), l, f);
                }
                visit_child_mut("out", out, f);
            }
            Body::Transformer(blocks) => {
                for (i, b) in blocks.iter_mut().enumerate() {
                    visit_child_mut(&format!("block{i}"), b, f);
                }
            }
        }
    }
}
