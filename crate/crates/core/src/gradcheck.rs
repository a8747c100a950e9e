//! Finite-difference checks of the tape's analytic gradients, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{EncoderLm, ModelConfig};
use crate::nn::{EncoderBlock, LayerNorm, Linear, Lstm};
use crate::prompt::{build_cloze, ClozeInput, Position, PromptConfig, Template, Verbalizer};
use crate::synthlang::{DataConfig, Label, Testbed};
use crate::tape::{Tape, Var};
use crate::train::{ce_loss, kld_loss, total_loss, Learner, Method, ParallelCloze, RunConfig, TrainConfig};
use crate::translator::{make_translator, TranslatorConfig, TranslatorTag};

/// Central-difference step for f64 leaves.
pub const STEP: f64 = 1e-5;

/// Worst relative error seen for one primitive.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub trials: usize,
    pub max_rel_err: f64,
}

/// `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-12)` over all entries.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / (na + nn).max(1e-12)
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

/// Scalarizes `out` with fixed random weights so every output entry
/// contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, rng: &mut ChaCha8Rng) -> Var {
    let (r, c) = tape.shape(out);
    let w: Vec<f64> = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = tape.constant(r, c, w).expect("weights");
    let prod = tape.mul(out, w).expect("same shape");
    tape.sum(prod)
}

fn eval(build: &Build, inputs: &[(usize, usize, Vec<f64>)], wseed: u64) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(r, c, v)| tape.leaf(*r, *c, v.clone(), true).expect("leaf"))
        .collect();
    let out = build(&mut tape, &vars);
    let mut wrng = ChaCha8Rng::seed_from_u64(wseed);
    let loss = weighted_sum(&mut tape, out, &mut wrng);
    let value = tape.scalar(loss);
    let grads = tape.backward(loss).expect("backward");
    let g = vars
        .iter()
        .zip(inputs)
        .map(|(&v, (r, c, _))| grads.wrt(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; r * c]))
        .collect();
    (value, g)
}

/// Compares analytic and central-difference gradients for every input.
pub fn check_fn(build: &Build, inputs: &[(usize, usize, Vec<f64>)], wseed: u64) -> f64 {
    let (_, analytic) = eval(build, inputs, wseed);
    let mut worst: f64 = 0.0;
    for (i, (_, _, v)) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; v.len()];
        for j in 0..v.len() {
            let mut plus = inputs.to_vec();
            plus[i].2[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].2[j] -= STEP;
            numeric[j] = (eval(build, &plus, wseed).0 - eval(build, &minus, wseed).0) / (2.0 * STEP);
        }
        worst = worst.max(rel_err(&analytic[i], &numeric));
    }
    worst
}

/// Input sampler: values in `[lo, hi]`, kept at least `gap` away from `avoid`.
#[derive(Clone, Copy)]
struct Dom {
    lo: f64,
    hi: f64,
    avoid: Option<(f64, f64)>,
}

const ANY: Dom = Dom { lo: -2.0, hi: 2.0, avoid: None };
const POS: Dom = Dom { lo: 0.1, hi: 2.0, avoid: None };
const AWAY0: Dom = Dom {
    lo: -2.0,
    hi: 2.0,
    avoid: Some((0.0, 0.05)),
};
const PROB: Dom = Dom { lo: 0.05, hi: 1.0, avoid: None };

fn sample(rng: &mut ChaCha8Rng, d: Dom, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let x = rng.random_range(d.lo..d.hi);
            match d.avoid {
                Some((c, gap)) if (x - c).abs() < gap => continue,
                _ => break x,
            }
        })
        .collect()
}

fn normalize_rows(v: &mut [f64], cols: usize) {
    for row in v.chunks_mut(cols) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
}

struct Case {
    name: &'static str,
    shapes: Vec<((usize, usize), Dom)>,
    /// Rows of these inputs are normalized to probability vectors.
    simplex: Vec<usize>,
    build: Box<Build>,
}

fn case(name: &'static str, shapes: Vec<((usize, usize), Dom)>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Var + 'static) -> Case {
    Case {
        name,
        shapes,
        simplex: Vec::new(),
        build: Box::new(build),
    }
}

fn cases() -> Vec<Case> {
    let u = |r, c| ((r, c), ANY);
    let mut v = vec![
        case("matmul", vec![u(3, 4), u(4, 2)], |t, x| t.matmul(x[0], x[1]).unwrap()),
        case("transpose", vec![u(3, 4)], |t, x| t.transpose(x[0])),
        case("add", vec![u(2, 3), u(2, 3)], |t, x| t.add(x[0], x[1]).unwrap()),
        case("sub", vec![u(2, 3), u(2, 3)], |t, x| t.sub(x[0], x[1]).unwrap()),
        case("mul", vec![u(2, 3), u(2, 3)], |t, x| t.mul(x[0], x[1]).unwrap()),
        case("add_row_bias", vec![u(3, 4), u(1, 4)], |t, x| t.add_row_bias(x[0], x[1]).unwrap()),
        case("scale", vec![u(2, 3)], |t, x| t.scale(x[0], -1.7)),
        case("relu", vec![((3, 3), AWAY0)], |t, x| t.relu(x[0])),
        case("tanh", vec![u(3, 3)], |t, x| t.tanh(x[0])),
        case("sigmoid", vec![u(3, 3)], |t, x| t.sigmoid(x[0])),
        case("exp", vec![u(3, 3)], |t, x| t.exp(x[0])),
        case("log", vec![((3, 3), POS)], |t, x| t.log(x[0])),
        case("clamp_min", vec![((3, 3), AWAY0)], |t, x| t.clamp_min(x[0], 0.0)),
        case("softmax_rows", vec![u(3, 5)], |t, x| t.softmax_rows(x[0])),
        case("log_softmax_rows", vec![u(3, 5)], |t, x| t.log_softmax_rows(x[0])),
        case("layer_norm", vec![u(3, 5), u(1, 5), u(1, 5)], |t, x| t.layer_norm(x[0], x[1], x[2]).unwrap()),
        case("embedding", vec![u(5, 3)], |t, x| t.embedding(x[0], &[4, 0, 4, 2]).unwrap()),
        case("concat_rows", vec![u(2, 3), u(1, 3)], |t, x| t.concat_rows(&[x[0], x[1], x[0]]).unwrap()),
        case("slice_rows", vec![u(5, 3)], |t, x| t.slice_rows(x[0], 1, 3).unwrap()),
        case("gather_cols", vec![u(3, 6)], |t, x| t.gather_cols(x[0], &[5, 1, 1, 3]).unwrap()),
        case("sum", vec![u(3, 4)], |t, x| t.sum(x[0])),
        case("mean", vec![u(3, 4)], |t, x| t.mean(x[0])),
        case("affine", vec![u(3, 4), u(4, 2), u(1, 2)], |t, x| t.affine(x[0], x[1], x[2]).unwrap()),
        case("ce_loss", vec![((4, 3), PROB)], |t, x| ce_loss(t, x[0], &[0, 2, 1, 2]).unwrap()),
        case("kld_loss", vec![((4, 3), PROB), ((4, 3), PROB)], |t, x| kld_loss(t, x[0], x[1]).unwrap()),
        case("total_loss", vec![((1, 1), POS), ((1, 1), POS)], |t, x| total_loss(t, 0.3, x[0], x[1]).unwrap()),
    ];
    for c in v.iter_mut().filter(|c| c.name == "ce_loss" || c.name == "kld_loss") {
        c.simplex = (0..c.shapes.len()).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let lin = Linear::new(4, 3, 0.5, &mut rng);
    v.push(case("linear", vec![u(3, 4)], move |t, x| lin.forward(t, x[0]).unwrap()));
    let mut ln = LayerNorm::new(4);
    use crate::nn::Module;
    ln.visit_mut(&mut |_, p| p.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x += 0.1 * i as f32));
    v.push(case("layer_norm_module", vec![u(3, 4)], move |t, x| ln.forward(t, x[0]).unwrap()));
    let lstm = Lstm::new(4, 3, &mut rng);
    v.push(case("lstm", vec![u(5, 4)], move |t, x| lstm.forward(t, x[0], false).unwrap()));
    let lstm_r = Lstm::new(4, 3, &mut rng);
    v.push(case("lstm_reverse", vec![u(5, 4)], move |t, x| lstm_r.forward(t, x[0], true).unwrap()));
    let block = EncoderBlock::new(8, 2, 4, 16, 0.3, &mut rng);
    v.push(case("encoder_block", vec![u(5, 8)], move |t, x| block.forward(t, x[0]).unwrap()));
    for tag in TranslatorTag::ALL {
        let tr = make_translator(tag, 6, 5);
        let name: &'static str = Box::leak(format!("translator_{}", tag.name()).into_boxed_str());
        v.push(case(name, vec![u(4, 6)], move |t, x| tr.translate(t, x[0]).unwrap()));
    }
    v
}

/// Runs `trials` random draws per primitive and returns the worst error
/// per primitive.
pub fn check_primitives(trials: usize, seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cases()
        .into_iter()
        .map(|c| {
            let mut worst: f64 = 0.0;
            for trial in 0..trials {
                let inputs: Vec<(usize, usize, Vec<f64>)> = c
                    .shapes
                    .iter()
                    .enumerate()
                    .map(|(i, &((r, cols), dom))| {
                        let mut v = sample(&mut rng, dom, r * cols);
                        if c.simplex.contains(&i) {
                            normalize_rows(&mut v, cols);
                        }
                        (r, cols, v)
                    })
                    .collect();
                worst = worst.max(check_fn(&*c.build, &inputs, seed ^ trial as u64));
            }
            Check {
                name: c.name.to_string(),
                trials,
                max_rel_err: worst,
            }
        })
        .collect()
}

/// Gradient of a run's loss with respect to the raw (pre-reparameterization)
/// prompt, checked end to end through the encoder on a 1-layer, d=8,
/// length-16 model. Parameters are stored in f32, so each finite difference
/// divides by the step actually representable in the stored prompt.
pub fn check_end_to_end(method: Method, seed: u64) -> f64 {
    let bed = Testbed::new(DataConfig {
        n_languages: 3,
        train_pool: 60,
        test_per_lang: 10,
        parallel_pool: 30,
        parallel_size: 10,
        pretrain_per_lang: 10,
        pretrain_source: Some(10),
        premise_len_max: 5,
        hypothesis_len_max: 3,
        ..DataConfig::default()
    })
    .expect("testbed");
    let c = bed.generate().expect("corpora");
    let max_len = 16;
    let model = EncoderLm::new(
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            vocab_size: bed.vocab.len(),
            max_seq_len: max_len,
            init_std: 0.3,
            ..ModelConfig::default()
        },
        seed,
    )
    .expect("model");
    let cfg = RunConfig {
        train: TrainConfig {
            method,
            alpha: 0.5,
            ..TrainConfig::default()
        },
        prompt: PromptConfig {
            length: 3,
            position: Position::Suffix,
            reparam: true,
            init_std: 0.5,
        },
        translator: TranslatorConfig {
            tag: TranslatorTag::Linear2,
            init_std: 0.3,
            ..TranslatorConfig::default()
        },
    };
    let m = cfg.slots();
    let template = Template::new(cfg.prompt.position, &bed.vocab);
    let mut learner = Learner::new(&model, Verbalizer::new(bed.vocab.label_words), cfg, seed).expect("learner");
    let task: Vec<(ClozeInput, Label)> = c.train_pool[..4]
        .iter()
        .map(|e| (build_cloze(&e.premise, &e.hypothesis, &template, m, max_len, 0).expect("cloze"), e.label))
        .collect();
    let par: Vec<ParallelCloze> = crate::train::parallel_clozes(&c.parallel[..3], &template, m, max_len).expect("parallel");
    let task_refs: Vec<(&ClozeInput, Label)> = task.iter().map(|(c, l)| (c, *l)).collect();
    let par_refs: Vec<&ParallelCloze> = if method == Method::Mpt { par.iter().collect() } else { Vec::new() };
    let loss = |l: &Learner| -> (f64, Option<Vec<f64>>, bool) {
        let mut tape = Tape::<f64>::new();
        let v = l.forward(&mut tape, &task_refs, &par_refs).expect("forward");
        let target = if method == Method::Mpt { v.total } else { v.ce };
        let value = tape.scalar(target);
        let clamped = tape.clamp_hits() > 0;
        let raw = &l.prompt.as_ref().expect("prompt").raw;
        let grads = tape.backward(target).expect("backward");
        (value, grads.wrt_tensor(raw).map(|g| g.to_vec()), clamped)
    };
    let (_, analytic, clamped) = loss(&learner);
    assert!(!clamped, "probability clamp engaged during the gradient check");
    let analytic = analytic.expect("prompt gradient");
    let n = analytic.len();
    let h = 1e-3f32;
    let mut numeric = vec![0.0; n];
    for (j, g) in numeric.iter_mut().enumerate() {
        let orig = learner.prompt.as_ref().unwrap().raw.data()[j];
        let set = |l: &mut Learner, x: f32| l.prompt.as_mut().unwrap().raw.data_mut()[j] = x;
        let (xp, xm) = (orig + h, orig - h);
        set(&mut learner, xp);
        let fp = loss(&learner).0;
        set(&mut learner, xm);
        let fm = loss(&learner).0;
        set(&mut learner, orig);
        *g = (fp - fm) / (xp as f64 - xm as f64);
    }
    rel_err(&analytic, &numeric)
}
