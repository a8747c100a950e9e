//! Parameter containers and the layers shared by the encoder, the prompt
//! reparameterisation and the translator variants.

use rand::Rng;

use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor, TensorError};

/// Anything that owns named parameter tensors.
///
/// Visiting order is stable and defines checkpoint layout.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    fn set_trainable(&mut self, on: bool) {
        self.visit_mut(&mut |_, t| t.set_requires_grad(on));
    }

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |_, t| t.zero_grad());
    }
}

pub(crate) fn visit_child(prefix: &str, child: &dyn Module, f: &mut dyn FnMut(&str, &Tensor)) {
    child.visit(&mut |n, t| f(&format!("{prefix}.{n}"), t));
}

pub(crate) fn visit_child_mut(prefix: &str, child: &mut dyn Module, f: &mut dyn FnMut(&str, &mut Tensor)) {
    child.visit_mut(&mut |n, t| f(&format!("{prefix}.{n}"), t));
}

/// A lone tensor exposed as a module (named `value`).
#[derive(Debug, Clone)]
pub struct Single(pub Tensor);

impl Module for Single {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("value", &self.0);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("value", &mut self.0);
    }
}

/// Row-wise affine map `x W + b`, with `W: in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(n_in: usize, n_out: usize, std: f32, rng: &mut R) -> Self {
        Linear {
            w: Tensor::randn(vec![n_in, n_out], std, rng).trainable(),
            b: Tensor::zeros(vec![n_out]).trainable(),
        }
    }

    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Linear {
            w: Tensor::zeros(vec![n_in, n_out]).trainable(),
            b: Tensor::zeros(vec![n_out]).trainable(),
        }
    }

    pub fn n_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn n_out(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var, TensorError> {
        let w = tape.param(&self.w);
        let b = tape.param(&self.b);
        tape.affine(x, w, b)
    }
}

impl Module for Linear {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("w", &self.w);
        f("b", &self.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("w", &mut self.w);
        f("b", &mut self.b);
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gamma: Tensor::filled(vec![d], 1.0).trainable(),
            beta: Tensor::zeros(vec![d]).trainable(),
        }
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var, TensorError> {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        tape.layer_norm(x, g, b)
    }
}

impl Module for LayerNorm {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("gamma", &self.gamma);
        f("beta", &self.beta);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("gamma", &mut self.gamma);
        f("beta", &mut self.beta);
    }
}

const GATES: [&str; 4] = ["i", "f", "g", "o"];

/// Single-direction LSTM layer over the rows of its input.
#[derive(Debug, Clone)]
pub struct Lstm {
    /// Per gate (i, f, g, o): input projection `in × hidden`.
    pub wx: [Linear; 4],
    /// Per gate: recurrent projection `hidden × hidden`, no bias.
    pub wh: [Tensor; 4],
    pub hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(n_in: usize, hidden: usize, rng: &mut R) -> Self {
        let sx = (1.0 / n_in as f32).sqrt();
        let sh = (1.0 / hidden as f32).sqrt();
        let mut wx: [Linear; 4] = std::array::from_fn(|_| Linear::new(n_in, hidden, sx, rng));
        // forget gate starts open
        wx[1].b.data_mut().iter_mut().for_each(|b| *b = 1.0);
        let wh = std::array::from_fn(|_| Tensor::randn(vec![hidden, hidden], sh, rng).trainable());
        Lstm { wx, wh, hidden }
    }

    /// Runs over `x` (rows = time steps) and returns the hidden state of
    /// every step in original row order.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, x: Var, reverse: bool) -> Result<Var, TensorError> {
        let steps = tape.shape(x).0;
        let mut proj = Vec::with_capacity(4);
        for lin in &self.wx {
            proj.push(lin.forward(tape, x)?);
        }
        let wh: Vec<Var> = self.wh.iter().map(|w| tape.param(w)).collect();
        let mut h = tape.constant(1, self.hidden, vec![F::zero(); self.hidden])?;
        let mut c = h;
        let mut outs = vec![h; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let mut gate = Vec::with_capacity(4);
            for (p, &w) in proj.iter().zip(&wh) {
                let xt = tape.slice_rows(*p, t, 1)?;
                let hh = tape.matmul(h, w)?;
                gate.push(tape.add(xt, hh)?);
            }
            let i = tape.sigmoid(gate[0]);
            let f = tape.sigmoid(gate[1]);
            let g = tape.tanh(gate[2]);
            let o = tape.sigmoid(gate[3]);
            let fc = tape.mul(f, c)?;
            let ig = tape.mul(i, g)?;
            c = tape.add(fc, ig)?;
            let tc = tape.tanh(c);
            h = tape.mul(o, tc)?;
            outs[t] = h;
        }
        tape.concat_rows(&outs)
    }
}

impl Module for Lstm {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (k, lin) in GATES.iter().zip(&self.wx) {
            visit_child(&format!("wx_{k}"), lin, f);
        }
        for (k, w) in GATES.iter().zip(&self.wh) {
            f(&format!("wh_{k}"), w);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (k, lin) in GATES.iter().zip(self.wx.iter_mut()) {
            visit_child_mut(&format!("wx_{k}"), lin, f);
        }
        for (k, w) in GATES.iter().zip(self.wh.iter_mut()) {
            f(&format!("wh_{k}"), w);
        }
    }
}

/// One attention head's projections.
#[derive(Debug, Clone)]
pub struct Head {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    /// Output projection `head_dim × d`, summed across heads.
    pub o: Tensor,
}

impl Module for Head {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_child("q", &self.q, f);
        visit_child("k", &self.k, f);
        visit_child("v", &self.v, f);
        f("o", &self.o);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_child_mut("q", &mut self.q, f);
        visit_child_mut("k", &mut self.k, f);
        visit_child_mut("v", &mut self.v, f);
        f("o", &mut self.o);
    }
}

/// Pre-norm transformer encoder block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub heads: Vec<Head>,
    pub attn_bias: Tensor,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(d: usize, n_heads: usize, head_dim: usize, d_ff: usize, std: f32, rng: &mut R) -> Self {
        let heads = (0..n_heads)
            .map(|_| Head {
                q: Linear::new(d, head_dim, std, rng),
                k: Linear::new(d, head_dim, std, rng),
                v: Linear::new(d, head_dim, std, rng),
                o: Tensor::randn(vec![head_dim, d], std, rng).trainable(),
            })
            .collect();
        EncoderBlock {
            ln1: LayerNorm::new(d),
            heads,
            attn_bias: Tensor::zeros(vec![d]).trainable(),
            ln2: LayerNorm::new(d),
            ff1: Linear::new(d, d_ff, std, rng),
            ff2: Linear::new(d_ff, d, std, rng),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.heads[0].q.n_out()
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var, TensorError> {
        let rows = tape.shape(x).0;
        self.forward_segments(tape, x, &[(0, rows)])
    }

    /// Runs the block over several sequences stacked row-wise; attention is
    /// restricted to each `(start, len)` segment.
    pub fn forward_segments<F: Real>(&self, tape: &mut Tape<F>, x: Var, segments: &[(usize, usize)]) -> Result<Var, TensorError> {
        let a = self.ln1.forward(tape, x)?;
        let inv_sqrt = 1.0 / (self.head_dim() as f64).sqrt();
        let mut attn: Option<Var> = None;
        for head in &self.heads {
            let q = head.q.forward(tape, a)?;
            let k = head.k.forward(tape, a)?;
            let v = head.v.forward(tape, a)?;
            let mut parts = Vec::with_capacity(segments.len());
            for &(start, len) in segments {
                let (qs, ks, vs) = if segments.len() == 1 {
                    (q, k, v)
                } else {
                    (
                        tape.slice_rows(q, start, len)?,
                        tape.slice_rows(k, start, len)?,
                        tape.slice_rows(v, start, len)?,
                    )
                };
                let kt = tape.transpose(ks);
                let scores = tape.matmul(qs, kt)?;
                let scores = tape.scale(scores, inv_sqrt);
                let probs = tape.softmax_rows(scores);
                parts.push(tape.matmul(probs, vs)?);
            }
            let ctx = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
            let o = tape.param(&head.o);
            let out = tape.matmul(ctx, o)?;
            attn = Some(match attn {
                Some(acc) => tape.add(acc, out)?,
                None => out,
            });
        }
        let attn = attn.expect("at least one head");
        let ab = tape.param(&self.attn_bias);
        let attn = tape.add_row_bias(attn, ab)?;
        let x = tape.add(x, attn)?;
        let f = self.ln2.forward(tape, x)?;
        let f = self.ff1.forward(tape, f)?;
        let f = tape.relu(f);
        let f = self.ff2.forward(tape, f)?;
        tape.add(x, f)
    }
}

impl Module for EncoderBlock {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_child("ln1", &self.ln1, f);
        for (i, h) in self.heads.iter().enumerate() {
            visit_child(&format!("head{i}"), h, f);
        }
        f("attn_bias", &self.attn_bias);
        visit_child("ln2", &self.ln2, f);
        visit_child("ff1", &self.ff1, f);
        visit_child("ff2", &self.ff2, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_child_mut("ln1", &mut self.ln1, f);
        for (i, h) in self.heads.iter_mut().enumerate() {
            visit_child_mut(&format!("head{i}"), h, f);
        }
        f("attn_bias", &mut self.attn_bias);
        visit_child_mut("ln2", &mut self.ln2, f);
        visit_child_mut("ff1", &mut self.ff1, f);
        visit_child_mut("ff2", &mut self.ff2, f);
    }
}
