//! Self-contained verification suites: gradient checks over every primitive
//! and loss term, the committed metric fixture table, and the Φ / KL / gate
//! invariants. Used by `cprc verify` and the acceptance tests.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::autodiff::{grad_check, Graph, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::loss::{
    gate_open, generation_xe, kl_divergence, prediction_bce, prediction_consistency, relation_consistency,
    relation_distribution, reinforce_loss, supervised_prediction_loss, total_loss, LossWeights, Reduction,
    SupervisedTerms, UnsupervisedTerms,
};
use crate::metrics::{bleu, cider_d, rouge_l, EvalCorpus, MetricReport};
use crate::model::{CaptionerConfig, CaptionerModel};
use crate::rng::stream;
use crate::tensor::Tensor;

/// Largest accepted relative gradient error.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Largest accepted deviation from a fixture value.
pub const METRIC_TOLERANCE: f64 = 1e-6;
/// Seeded points per gradient check.
pub const GRAD_POINTS: usize = 10;
const GRAD_EPS: f64 = 1e-6;
/// Seed used when [`VerifyOptions::seed`] is unset.
pub const DEFAULT_SEED: u64 = 0x00c0_ffee;

const FIXTURES: &str = include_str!("../fixtures/metrics.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Gradients,
    Metrics,
    Invariants,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Gradients, Suite::Metrics, Suite::Invariants];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Gradients => "gradients",
            Suite::Metrics => "metrics",
            Suite::Invariants => "invariants",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite `{s}`; expected one of gradients, metrics, invariants")))
    }
}

/// Deliberate defects for checking that the suites can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negates the KL divergence before the nonnegativity check.
    KlSignFlip,
}

impl FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl-sign-flip" => Ok(Fault::KlSignFlip),
            _ => Err(Error::Config(format!("unknown fault `{s}`; expected kl-sign-flip"))),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    /// Restrict to these suites; empty means all.
    pub only: Vec<Suite>,
    pub fault: Option<Fault>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub suite: Suite,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}/{}: {}", self.suite, self.name, self.detail)
    }
}

#[derive(Clone, Debug)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
    pub seconds: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

pub fn run(options: &VerifyOptions) -> Result<VerifyReport> {
    let start = Instant::now();
    let seed = options.seed.unwrap_or(DEFAULT_SEED);
    let mut checks = Vec::new();
    for suite in Suite::ALL {
        if !options.only.is_empty() && !options.only.contains(&suite) {
            continue;
        }
        checks.extend(match suite {
            Suite::Gradients => gradient_suite(seed)?,
            Suite::Metrics => metric_suite()?,
            Suite::Invariants => invariant_suite(options.fault, seed)?,
        });
    }
    Ok(VerifyReport { checks, seconds: start.elapsed().as_secs_f64() })
}

// ---------------------------------------------------------------- gradients

type Scalar64Fn = Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var>>;

struct GradCase {
    name: &'static str,
    /// Draws the input point for the given index.
    point: Box<dyn Fn(&mut ChaCha8Rng) -> Tensor<f64>>,
    /// Builds the scalar function; may draw fixed constants from the rng.
    build: Box<dyn Fn(&mut ChaCha8Rng) -> Scalar64Fn>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches data")
}

/// Values in `lo..hi` kept at least `gap` away from every kink in `kinks`.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], gap: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.gen_range(lo..hi);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Random probability vector with entries bounded away from 0 and 1.
fn probabilities(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0.05..0.95)).collect()
}

/// Reduces any tensor to a scalar through a fixed random weighting, so every
/// output coordinate contributes to the checked gradient.
fn weighted_sum(g: &mut Graph<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(w.clone());
    let flat = g.reshape(y, &[g.value(y).numel()])?;
    let prod = g.mul(flat, w)?;
    g.sum(prod)
}

fn unary(
    name: &'static str,
    out_len: usize,
    point: impl Fn(&mut ChaCha8Rng) -> Tensor<f64> + 'static,
    op: impl Fn(&mut Graph<f64>, Var) -> Result<Var> + Clone + 'static,
) -> GradCase {
    GradCase {
        name,
        point: Box::new(point),
        build: Box::new(move |rng| {
            let w = uniform(rng, &[out_len], -1.0, 1.0);
            let op = op.clone();
            Box::new(move |g, x| {
                let y = op(g, x)?;
                weighted_sum(g, y, &w)
            })
        }),
    }
}

/// Binary op checked w.r.t. each operand in turn; the other is a random constant.
fn binary(
    name: &'static str,
    a_shape: &'static [usize],
    b_shape: &'static [usize],
    out_len: usize,
    wrt_second: bool,
    op: impl Fn(&mut Graph<f64>, Var, Var) -> Result<Var> + Clone + 'static,
) -> GradCase {
    let (x_shape, other_shape) = if wrt_second { (b_shape, a_shape) } else { (a_shape, b_shape) };
    GradCase {
        name,
        point: Box::new(move |rng| uniform(rng, x_shape, -1.5, 1.5)),
        build: Box::new(move |rng| {
            let other = uniform(rng, other_shape, -1.5, 1.5);
            let w = uniform(rng, &[out_len], -1.0, 1.0);
            let op = op.clone();
            Box::new(move |g, x| {
                let c = g.constant(other.clone());
                let y = if wrt_second { op(g, c, x)? } else { op(g, x, c)? };
                weighted_sum(g, y, &w)
            })
        }),
    }
}

fn primitive_cases() -> Vec<GradCase> {
    let mut cases = vec![
        binary("matmul/lhs", &[3, 4], &[4, 2], 6, false, |g, a, b| g.matmul(a, b)),
        binary("matmul/rhs", &[3, 4], &[4, 2], 6, true, |g, a, b| g.matmul(a, b)),
        binary("add", &[3, 4], &[3, 4], 12, false, |g, a, b| g.add(a, b)),
        binary("add/row-broadcast", &[3, 4], &[4], 12, true, |g, a, b| g.add(a, b)),
        binary("add/scalar-broadcast", &[3, 4], &[1], 12, true, |g, a, b| g.add(a, b)),
        binary("sub/lhs", &[2, 3], &[2, 3], 6, false, |g, a, b| g.sub(a, b)),
        binary("sub/rhs", &[2, 3], &[2, 3], 6, true, |g, a, b| g.sub(a, b)),
        binary("mul/lhs", &[2, 3], &[2, 3], 6, false, |g, a, b| g.mul(a, b)),
        binary("mul/row-broadcast", &[2, 3], &[3], 6, true, |g, a, b| g.mul(a, b)),
        unary("scalar_mul", 5, |r| uniform(r, &[5], -2.0, 2.0), |g, x| g.scale(x, -1.7)),
        unary("add_scalar", 5, |r| uniform(r, &[5], -2.0, 2.0), |g, x| g.add_scalar(x, 0.3)),
        unary("sigmoid", 6, |r| uniform(r, &[6], -4.0, 4.0), |g, x| g.sigmoid(x)),
        unary("tanh", 6, |r| uniform(r, &[6], -3.0, 3.0), |g, x| g.tanh(x)),
        unary("relu", 6, |r| away_from(r, &[6], -2.0, 2.0, &[0.0], 1e-3), |g, x| g.relu(x)),
        unary("log", 6, |r| uniform(r, &[6], 0.1, 3.0), |g, x| g.log(x)),
        unary("log_clamped", 6,
            |r| away_from(r, &[6], 0.05, 3.0, &[0.2], 1e-3),
            |g, x| g.log_clamped(x, 0.2),
        ),
        unary("softmax", 10, |r| uniform(r, &[2, 5], -3.0, 3.0), |g, x| g.softmax(x)),
        unary("log_softmax", 10, |r| uniform(r, &[2, 5], -3.0, 3.0), |g, x| g.log_softmax(x)),
        unary("mean_axis/0", 3, |r| uniform(r, &[4, 3], -2.0, 2.0), |g, x| g.mean_axis(x, 0)),
        unary("mean_axis/1", 4, |r| uniform(r, &[4, 3], -2.0, 2.0), |g, x| g.mean_axis(x, 1)),
        unary("sum", 1, |r| uniform(r, &[7], -2.0, 2.0), |g, x| g.sum(x)),
        unary("l2_norm", 3, |r| uniform(r, &[3, 4], -2.0, 2.0), |g, x| g.l2_norm(x)),
        unary("concat/0", 12, |r| uniform(r, &[2, 3], -2.0, 2.0), |g, x| {
            let sq = g.mul(x, x)?;
            g.concat(&[x, sq], 0)
        }),
        unary("concat/1", 12, |r| uniform(r, &[2, 3], -2.0, 2.0), |g, x| {
            let t = g.tanh(x)?;
            g.concat(&[t, x], 1)
        }),
        unary("lookup", 15, |r| uniform(r, &[4, 3], -2.0, 2.0), |g, x| g.lookup(x, &[2, 0, 2, 3, 1])),
        unary("reshape", 12, |r| uniform(r, &[2, 6], -2.0, 2.0), |g, x| {
            let r = g.reshape(x, &[3, 4])?;
            g.tanh(r)
        }),
        unary("pick", 3, |r| uniform(r, &[3, 4], -2.0, 2.0), |g, x| g.pick(x, &[3, 0, 1])),
        unary("clamp", 8,
            |r| away_from(r, &[8], -2.0, 2.0, &[-0.5, 0.5], 1e-3),
            |g, x| g.clamp(x, -0.5, 0.5),
        ),
        unary("add_all", 4, |r| uniform(r, &[4], -2.0, 2.0), |g, x| {
            let a = g.tanh(x)?;
            let b = g.sigmoid(x)?;
            g.add_all(&[a, b, x])
        }),
    ];
    cases.push(unary("neg/one_minus", 5, |r| uniform(r, &[5], -2.0, 2.0), |g, x| {
        let n = g.neg(x)?;
        g.one_minus(n)
    }));
    cases
}

const CLASSES: usize = 5;
const VOCAB: usize = 7;

fn loss_cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "l_xe",
            point: Box::new(|r| uniform(r, &[4, VOCAB], -2.0, 2.0)),
            build: Box::new(|r| {
                // PAD (id 0) in the final slot exercises the mask
                let gold: Vec<usize> = (0..3).map(|_| r.gen_range(3..VOCAB)).chain([0]).collect();
                Box::new(move |g, x| {
                    let rows = (0..4).map(|t| row(g, x, t)).collect::<Result<Vec<_>>>()?;
                    generation_xe(g, &rows, &gold)
                })
            }),
        },
        GradCase {
            name: "l_rl_surrogate",
            point: Box::new(|r| uniform(r, &[5, VOCAB], -2.0, 2.0)),
            build: Box::new(|r| {
                let tokens: Vec<usize> = (0..5).map(|_| r.gen_range(0..VOCAB)).collect();
                let advantage = r.gen_range(-2.0..2.0);
                Box::new(move |g, x| {
                    let logp = g.log_softmax(x)?;
                    let picked = g.pick(logp, &tokens)?;
                    reinforce_loss(g, &[picked], advantage)
                })
            }),
        },
        GradCase {
            name: "l_p",
            point: Box::new(|r| uniform(r, &[2, CLASSES], -3.0, 3.0)),
            build: Box::new(|r| {
                let y: Vec<f64> = (0..CLASSES).map(|_| r.gen_range(0..2) as f64).collect();
                Box::new(move |g, x| {
                    let p = g.sigmoid(x)?;
                    let pv = row(g, p, 0)?;
                    let pw = row(g, p, 1)?;
                    let y = g.constant(Tensor::vector(y.clone()));
                    let pv = g.reshape(pv, &[CLASSES])?;
                    let pw = g.reshape(pw, &[CLASSES])?;
                    supervised_prediction_loss(g, pv, pw, y)
                })
            }),
        },
        GradCase {
            name: "l_p/bce",
            point: Box::new(|r| Tensor::vector(probabilities(r, CLASSES))),
            build: Box::new(|r| {
                let y = probabilities(r, CLASSES);
                Box::new(move |g, x| {
                    let y = g.constant(Tensor::vector(y.clone()));
                    prediction_bce(g, x, y)
                })
            }),
        },
        GradCase {
            name: "l_pc",
            point: Box::new(|r| uniform(r, &[4, CLASSES], -3.0, 3.0)),
            build: Box::new(|r| {
                let targets = image_side(r, 4);
                Box::new(move |g, x| {
                    let (pv, pw) = paired(g, x, &targets)?;
                    prediction_consistency(g, &pv, &pw, Reduction::Sum)
                })
            }),
        },
        GradCase {
            name: "l_rc",
            point: Box::new(|r| uniform(r, &[4, CLASSES], -3.0, 3.0)),
            build: Box::new(|r| {
                let targets = image_side(r, 4);
                Box::new(move |g, x| {
                    let (pv, pw) = paired(g, x, &targets)?;
                    relation_consistency(g, &pv, &pw)
                })
            }),
        },
        GradCase {
            name: "l_rc/both-sides",
            point: Box::new(|r| uniform(r, &[8, CLASSES], -3.0, 3.0)),
            build: Box::new(|_| {
                Box::new(|g, x| {
                    let p = g.sigmoid(x)?;
                    let (pv, pw) = split_rows(g, p, 4)?;
                    let qv = relation_distribution(g, &pv)?;
                    let qw = relation_distribution(g, &pw)?;
                    kl_divergence(g, qv, qw)
                })
            }),
        },
        GradCase {
            // rows: caption logits, supervised p^v, supervised p^w, then
            // sentence logits of two undescribed items with 3 variants each
            name: "gated_total",
            point: Box::new(|r| uniform(r, &[9, CLASSES], -3.0, 3.0)),
            build: Box::new(|r| {
                let y: Vec<f64> = (0..CLASSES).map(|_| r.gen_range(0..2) as f64).collect();
                let targets = [image_side(r, 3), image_side(r, 3)];
                let weights = LossWeights { lambda1: 0.01, lambda2: 10.0, tau: 0.5, ..LossWeights::default() };
                Box::new(move |g, x| {
                    let p = g.sigmoid(x)?;
                    let yv = g.constant(Tensor::vector(y.clone()));
                    let caption = {
                        let r0 = row(g, x, 0)?;
                        let sq = g.mul(r0, r0)?;
                        g.sum(sq)?
                    };
                    let pv = vector_row(g, p, 1)?;
                    let pw = vector_row(g, p, 2)?;
                    let prediction = supervised_prediction_loss(g, pv, pw, yv)?;
                    let sup = [SupervisedTerms { caption, prediction }];
                    let mut unsup = Vec::new();
                    // the second item sits below tau and must contribute nothing
                    for (item, confidence) in [(0usize, 0.9), (1, 0.2)] {
                        let rows = g.lookup(x, &(3 + item * 3..6 + item * 3).collect::<Vec<_>>())?;
                        let (pv, pw) = paired(g, rows, &targets[item])?;
                        let consistency = prediction_consistency(g, &pv, &pw, Reduction::Sum)?;
                        let relation = relation_consistency(g, &pv, &pw)?;
                        unsup.push(UnsupervisedTerms { consistency, relation, confidence });
                    }
                    let (total, _) = total_loss(g, &sup, &unsup, &weights)?;
                    Ok(total)
                })
            }),
        },
    ]
}

/// Row `t` of a 2-D value as a `[1, cols]` matrix.
fn row(g: &mut Graph<f64>, x: Var, t: usize) -> Result<Var> {
    g.lookup(x, &[t])
}

fn vector_row(g: &mut Graph<f64>, x: Var, t: usize) -> Result<Var> {
    let r = g.lookup(x, &[t])?;
    let cols = g.shape(r)[1];
    g.reshape(r, &[cols])
}

/// Image-side predictions are detached targets in ℓ_pc and ℓ_rc, so the
/// checks hold them fixed and differentiate the sentence side only.
fn image_side(rng: &mut ChaCha8Rng, count: usize) -> Vec<Vec<f64>> {
    (0..count).map(|_| probabilities(rng, CLASSES)).collect()
}

/// Constant image-side vectors paired with `sigmoid` of each row of `logits`.
fn paired(g: &mut Graph<f64>, logits: Var, targets: &[Vec<f64>]) -> Result<(Vec<Var>, Vec<Var>)> {
    let p = g.sigmoid(logits)?;
    let pv = targets.iter().map(|t| g.constant(Tensor::vector(t.clone()))).collect();
    let pw = (0..targets.len()).map(|k| vector_row(g, p, k)).collect::<Result<Vec<_>>>()?;
    Ok((pv, pw))
}

fn split_rows(g: &mut Graph<f64>, p: Var, count: usize) -> Result<(Vec<Var>, Vec<Var>)> {
    let pv = (0..count).map(|k| vector_row(g, p, k)).collect::<Result<Vec<_>>>()?;
    let pw = (0..count).map(|k| vector_row(g, p, count + k)).collect::<Result<Vec<_>>>()?;
    Ok((pv, pw))
}

fn tiny_model(rng: &mut ChaCha8Rng) -> Result<CaptionerModel<f64>> {
    let config = CaptionerConfig {
        grid_h: 4,
        grid_w: 4,
        channels: 2,
        region_count: 4,
        region_dim: 3,
        hidden_dim: 3,
        vocab_size: VOCAB,
        max_len: 4,
        class_count: CLASSES,
        classifier_hidden: 4,
        attention_refiner: false,
    };
    CaptionerModel::new(config, rng)
}

fn tiny_image(rng: &mut ChaCha8Rng) -> Image {
    let mut image = Image::zeros(4, 4, 2);
    for v in image.data.iter_mut() {
        *v = rng.gen_range(0.0..1.0);
    }
    image
}

/// Gradient w.r.t. one named model parameter tensor.
fn model_case(
    name: &'static str,
    param: &'static str,
    f: fn(&CaptionerModel<f64>, &mut Graph<f64>, &crate::model::ModelVars, &Image) -> Result<Var>,
) -> GradCase {
    GradCase {
        name,
        point: Box::new(move |r| {
            let model = tiny_model(r).expect("valid tiny config");
            let id = model.params().find(param).expect("parameter exists");
            uniform(r, model.params().get(id).shape(), -0.8, 0.8)
        }),
        build: Box::new(move |r| {
            let model = tiny_model(r).expect("valid tiny config");
            let image = tiny_image(r);
            let id = model.params().find(param).expect("parameter exists");
            let w = {
                let mut g = Graph::new();
                let vars = model.bind(&mut g);
                let out = f(&model, &mut g, &vars, &image).expect("forward runs");
                uniform(r, &[g.value(out).numel()], -1.0, 1.0)
            };
            Box::new(move |g, x| {
                let mut vars = model.bind(g);
                vars.set(id, x);
                let out = f(&model, g, &vars, &image)?;
                weighted_sum(g, out, &w)
            })
        }),
    }
}

fn model_cases() -> Vec<GradCase> {
    vec![
        model_case("model/encode", "encoder.weight", |m, g, v, img| m.encode(g, v, img)),
        model_case("model/image_embedding", "encoder.bias", |m, g, v, img| {
            let r = m.encode(g, v, img)?;
            m.image_embedding(g, r)
        }),
        model_case("model/classify", "classifier.0.weight", |m, g, v, img| {
            let r = m.encode(g, v, img)?;
            let e = m.image_embedding(g, r)?;
            m.classify(g, v, e)
        }),
        model_case("model/sentence_embedding", "decoder.context.weight", |m, g, v, img| {
            let r = m.encode(g, v, img)?;
            let trace = m.decode_greedy(g, v, r, 3)?;
            m.sentence_embedding(g, &trace)
        }),
        model_case("model/decode_teacher_forced", "decoder.output.weight", |m, g, v, img| {
            let r = m.encode(g, v, img)?;
            let trace = m.decode_teacher_forced(g, v, r, &[crate::vocab::BOS, 4, 5, 6])?;
            g.concat(&trace.step_logits, 0)
        }),
    ]
}

fn check_case(case: &GradCase, index: usize, seed: u64) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for point in 0..GRAD_POINTS {
        let mut rng = stream(seed, &[index as u64, point as u64]);
        let x = (case.point)(&mut rng);
        let f = (case.build)(&mut rng);
        let check = grad_check(|g, v| f(g, v), &x, GRAD_EPS)?;
        worst = worst.max(check.max_rel_error);
    }
    Ok(CheckResult {
        suite: Suite::Gradients,
        name: case.name.to_string(),
        passed: worst < GRAD_TOLERANCE,
        detail: format!("max rel err {worst:.2e} over {GRAD_POINTS} points"),
    })
}

/// Finite differences cannot see a stop-gradient, so detach is checked
/// directly: identity forward, exactly zero gradient.
fn check_detach(seed: u64) -> Result<CheckResult> {
    let mut failures = 0;
    for point in 0..GRAD_POINTS {
        let mut rng = stream(seed, &[u64::MAX - 1, point as u64]);
        let x = uniform(&mut rng, &[6], -2.0, 2.0);
        let w = uniform(&mut rng, &[6], -1.0, 1.0);
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let d = g.detach(v)?;
        let out = weighted_sum(&mut g, d, &w)?;
        let grads = g.backward(out)?;
        let zero = grads.get(v).map_or(true, |t| t.data().iter().all(|&e| e == 0.0));
        if !zero || !g.value(d).bitwise_eq(&x) {
            failures += 1;
        }
    }
    Ok(CheckResult {
        suite: Suite::Gradients,
        name: "detach".into(),
        passed: failures == 0,
        detail: format!("identity forward and zero gradient at {} of {GRAD_POINTS} points", GRAD_POINTS - failures),
    })
}

pub fn gradient_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let cases: Vec<GradCase> = primitive_cases().into_iter().chain(loss_cases()).chain(model_cases()).collect();
    let mut out = cases.iter().enumerate().map(|(i, c)| check_case(c, i, seed)).collect::<Result<Vec<_>>>()?;
    out.push(check_detach(seed)?);
    Ok(out)
}

// ------------------------------------------------------------------ metrics

#[derive(Debug, Deserialize)]
struct FixtureFile {
    cases: Vec<FixtureCase>,
}

#[derive(Debug, Deserialize)]
pub struct FixtureCase {
    pub name: String,
    pub metric: String,
    pub corpus: Vec<(String, Vec<String>)>,
    pub expected: f64,
    pub derivation: String,
}

pub fn metric_fixtures() -> Result<Vec<FixtureCase>> {
    let file: FixtureFile = serde_json::from_str(FIXTURES)?;
    Ok(file.cases)
}

fn score(case: &FixtureCase) -> Result<f64> {
    let pairs: Vec<(&str, Vec<&str>)> =
        case.corpus.iter().map(|(c, refs)| (c.as_str(), refs.iter().map(String::as_str).collect())).collect();
    let corpus = EvalCorpus::from_text(&pairs)?;
    match case.metric.as_str() {
        "B@1" => bleu(&corpus, 1),
        "B@2" => bleu(&corpus, 2),
        "B@3" => bleu(&corpus, 3),
        "B@4" => bleu(&corpus, 4),
        "ROUGE-L" => rouge_l(&corpus),
        "CIDEr-D" => cider_d(&corpus),
        other => Err(Error::Invalid(format!("fixture `{}` names unknown metric `{other}`", case.name))),
    }
}

/// One check per metric; each needs at least 10 fixture cases.
pub fn metric_suite() -> Result<Vec<CheckResult>> {
    let cases = metric_fixtures()?;
    let mut out = Vec::new();
    for metric in MetricReport::KEYS {
        let mine: Vec<&FixtureCase> = cases.iter().filter(|c| c.metric == metric).collect();
        let mut failed = Vec::new();
        let mut worst = 0.0f64;
        for case in &mine {
            let got = score(case)?;
            let diff = (got - case.expected).abs();
            worst = worst.max(diff);
            if !(diff <= METRIC_TOLERANCE) {
                failed.push(format!("{} (got {got}, expected {})", case.name, case.expected));
            }
        }
        let enough = mine.len() >= 10;
        let detail = if failed.is_empty() {
            format!("{} cases, max deviation {worst:.1e}", mine.len())
        } else {
            format!("{} of {} cases off: {}", failed.len(), mine.len(), failed.join("; "))
        };
        out.push(CheckResult {
            suite: Suite::Metrics,
            name: metric.to_string(),
            passed: enough && failed.is_empty(),
            detail: if enough { detail } else { format!("only {} cases; {detail}", mine.len()) },
        });
    }
    if let Some(stray) = cases.iter().find(|c| !MetricReport::KEYS.contains(&c.metric.as_str())) {
        return Err(Error::Invalid(format!("fixture `{}` names unknown metric `{}`", stray.name, stray.metric)));
    }
    Ok(out)
}

// --------------------------------------------------------------- invariants

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // occasional exact zeros exercise the 0 ln 0 = 0 convention
    let raw: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.1) { 0.0 } else { rng.gen_range(1e-3..1.0) }).collect();
    let total: f64 = raw.iter().sum();
    if total == 0.0 {
        return vec![1.0 / n as f64; n];
    }
    raw.into_iter().map(|v| v / total).collect()
}

fn kl_value(a: &[f64], b: &[f64]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::vector(a.to_vec()));
    let b = g.constant(Tensor::vector(b.to_vec()));
    let kl = kl_divergence(&mut g, a, b)?;
    Ok(g.value(kl).item())
}

fn phi(tuple: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = tuple.iter().map(|p| g.constant(Tensor::vector(p.clone()))).collect();
    let q = relation_distribution(&mut g, &vars)?;
    Ok(g.value(q).data().to_vec())
}

fn bce_value(target: &[f64], p: &[f64]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let p = g.constant(Tensor::vector(p.to_vec()));
    let y = g.constant(Tensor::vector(target.to_vec()));
    let h = prediction_bce(&mut g, p, y)?;
    Ok(g.value(h).item())
}

fn invariant(name: &str, failures: Vec<String>, trials: usize, what: &str) -> CheckResult {
    CheckResult {
        suite: Suite::Invariants,
        name: name.to_string(),
        passed: failures.is_empty(),
        detail: if failures.is_empty() {
            format!("{trials} {what}")
        } else {
            format!("{} of {trials} {what} violate it, first: {}", failures.len(), failures[0])
        },
    }
}

pub fn invariant_suite(fault: Option<Fault>, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = stream(seed, &[u64::MAX]);
    let mut out = Vec::new();

    let mut bad = Vec::new();
    for trial in 0..1000 {
        let n = rng.gen_range(2..12);
        let a = random_distribution(&mut rng, n);
        let b = random_distribution(&mut rng, n);
        let mut kl = kl_value(&a, &b)?;
        if fault == Some(Fault::KlSignFlip) {
            kl = -kl;
        }
        let self_kl = kl_value(&a, &a)?;
        if kl < 0.0 || self_kl.abs() > 1e-12 {
            bad.push(format!("pair {trial}: KL(a||b) = {kl:e}, KL(a||a) = {self_kl:e}"));
        }
    }
    out.push(invariant("kl-nonnegative", bad, 1000, "random pairs"));

    let (mut norm_bad, mut shift_bad, mut perm_bad) = (Vec::new(), Vec::new(), Vec::new());
    for trial in 0..100 {
        let k = rng.gen_range(2..7);
        let c = rng.gen_range(1..9);
        let tuple: Vec<Vec<f64>> = (0..k).map(|_| (0..c).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let q = phi(&tuple)?;
        let total: f64 = q.iter().sum();
        if (total - 1.0).abs() > 1e-6 || q.len() != k * (k - 1) {
            norm_bad.push(format!("tuple {trial}: sum {total}, {} entries", q.len()));
        }

        let offset: Vec<f64> = (0..c).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let shifted: Vec<Vec<f64>> =
            tuple.iter().map(|p| p.iter().zip(&offset).map(|(v, o)| v + o).collect()).collect();
        let qs = phi(&shifted)?;
        let dev = q.iter().zip(&qs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if dev > 1e-9 {
            shift_bad.push(format!("tuple {trial}: max deviation {dev:e}"));
        }

        // Φ of a permuted tuple is Φ with its (m, n) entries relabelled
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| tuple[i].clone()).collect();
        let qp = phi(&permuted)?;
        let pairs = crate::loss::relation_pairs(k);
        let index = |m: usize, n: usize| pairs.iter().position(|&p| p == (m, n)).expect("pair exists");
        let dev = pairs
            .iter()
            .enumerate()
            .map(|(j, &(m, n))| (qp[j] - q[index(perm[m], perm[n])]).abs())
            .fold(0.0, f64::max);
        if dev > 1e-12 {
            perm_bad.push(format!("tuple {trial}: max deviation {dev:e}"));
        }
    }
    out.push(invariant("phi-normalized", norm_bad, 100, "random tuples"));
    out.push(invariant("phi-translation-invariant", shift_bad, 100, "random tuples"));
    out.push(invariant("phi-permutation-invariant", perm_bad, 100, "random tuples"));

    // H(t, p) - H(t, t) is the binary KL, so it is >= 0 and 0 at p == t
    let mut bad = Vec::new();
    for trial in 0..1000 {
        let c = rng.gen_range(1..10);
        let t = probabilities(&mut rng, c);
        let p = probabilities(&mut rng, c);
        let gap = bce_value(&t, &p)? - bce_value(&t, &t)?;
        let at_target = bce_value(&t, &t)? - bce_value(&t, &t)?;
        if gap < -1e-12 || at_target != 0.0 {
            bad.push(format!("pair {trial}: gap {gap:e}"));
        }
    }
    out.push(invariant("l_pc-kl-gap", bad, 1000, "random target/prediction pairs"));

    let mut bad = Vec::new();
    for trial in 0..1000 {
        let confidence = rng.gen_range(0.0..1.0);
        let mut taus = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        taus.sort_by(f64::total_cmp);
        if gate_open(confidence, taus[1]) && !gate_open(confidence, taus[0]) {
            bad.push(format!("trial {trial}: confidence {confidence}, tau {taus:?}"));
        }
        if !gate_open(confidence, 0.0) {
            bad.push(format!("trial {trial}: gate closed at tau 0"));
        }
    }
    out.push(invariant("gate-monotone-in-tau", bad, 1000, "random (confidence, tau pair) draws"));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_and_fault_names_parse() {
        assert_eq!("metrics".parse::<Suite>().unwrap(), Suite::Metrics);
        assert!("everything".parse::<Suite>().is_err());
        assert_eq!("kl-sign-flip".parse::<Fault>().unwrap(), Fault::KlSignFlip);
    }

    #[test]
    fn fixtures_cover_every_metric() {
        let cases = metric_fixtures().unwrap();
        for key in MetricReport::KEYS {
            assert!(cases.iter().filter(|c| c.metric == key).count() >= 10, "{key}");
        }
    }
}
