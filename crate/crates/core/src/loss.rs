//! Captioning, prediction and cross-modal consistency objectives.
//!
//! All functions record into a [`Graph`] and return scalar nodes. Image-side
//! predictions passed to the consistency terms are detached here; they act
//! as soft targets and never receive gradient through these terms.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::metrics::{CiderD, Sentence};
use crate::model::DecodeTrace;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab::{Vocabulary, PAD};

/// Clamp applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionLoss {
    /// Teacher-forced cross-entropy.
    Xe,
    /// Self-critical policy gradient with a CIDEr-D reward.
    Rl,
}

/// How per-variant terms combine over the K+1 augmentations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of prediction consistency.
    pub lambda1: f64,
    /// Weight of relation consistency.
    pub lambda2: f64,
    /// Confidence threshold on the raw image's top class probability.
    pub tau: f64,
    pub caption_loss: CaptionLoss,
    #[serde(default = "default_reduction")]
    pub variant_reduction: Reduction,
}

fn default_reduction() -> Reduction {
    Reduction::Sum
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 0.01, lambda2: 10.0, tau: 0.1, caption_loss: CaptionLoss::Xe, variant_reduction: Reduction::Sum }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config(format!("lambda1/lambda2 must be >= 0, got {}/{}", self.lambda1, self.lambda2)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        Ok(())
    }
}

/// Sum of token negative log-likelihoods. `gold` excludes BOS and lines up
/// with `step_logits`; PAD targets are masked out.
pub fn generation_xe<S: Scalar>(g: &mut Graph<S>, step_logits: &[Var], gold: &[usize]) -> Result<Var> {
    if step_logits.len() != gold.len() || gold.is_empty() {
        return Err(Error::shape(
            "generation_xe",
            format!("{} logit rows for {} gold tokens", step_logits.len(), gold.len()),
        ));
    }
    let logits = g.concat(step_logits, 0)?;
    let logp = g.log_softmax(logits)?;
    let picked = g.pick(logp, gold)?;
    let total = if gold.contains(&PAD) {
        let mask = gold.iter().map(|&t| if t == PAD { S::zero() } else { S::one() }).collect();
        let mask = g.constant(Tensor::vector(mask));
        let masked = g.mul(picked, mask)?;
        g.sum(masked)?
    } else {
        g.sum(picked)?
    };
    g.neg(total)
}

/// REINFORCE surrogate `-advantage * sum(log_probs)`.
pub fn reinforce_loss<S: Scalar>(g: &mut Graph<S>, log_probs: &[Var], advantage: f64) -> Result<Var> {
    let total = g.concat(log_probs, 0)?;
    let total = g.sum(total)?;
    g.scale(total, S::of(-advantage))
}

#[derive(Clone, Copy, Debug)]
pub struct ScstTerm {
    pub loss: Var,
    pub sampled_reward: f64,
    pub greedy_reward: f64,
}

impl ScstTerm {
    pub fn advantage(&self) -> f64 {
        self.sampled_reward - self.greedy_reward
    }
}

/// Self-critical sequence loss: the greedy decode's CIDEr-D is the baseline
/// for the sampled decode's reward. The baseline is a constant.
pub fn scst_loss<S: Scalar>(
    g: &mut Graph<S>,
    sampled: &DecodeTrace,
    greedy: &DecodeTrace,
    references: &[Sentence],
    vocab: &Vocabulary,
    scorer: &CiderD,
) -> Result<ScstTerm> {
    if references.is_empty() {
        return Err(Error::Invalid("self-critical loss needs at least one reference".into()));
    }
    if sampled.log_probs.len() != sampled.tokens.len() {
        return Err(Error::Invalid("sampled trace carries no log-probabilities".into()));
    }
    let sampled_reward = scorer.score(&vocab.decode(&sampled.tokens), references);
    let greedy_reward = scorer.score(&vocab.decode(&greedy.tokens), references);
    let loss = reinforce_loss(g, &sampled.log_probs, sampled_reward - greedy_reward)?;
    Ok(ScstTerm { loss, sampled_reward, greedy_reward })
}

/// Multi-label binary cross-entropy `-sum_j y_j ln p_j + (1-y_j) ln(1-p_j)`
/// with `p` clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub fn prediction_bce<S: Scalar>(g: &mut Graph<S>, p: Var, y: Var) -> Result<Var> {
    if g.value(p).numel() != g.value(y).numel() {
        return Err(Error::shape("prediction_bce", format!("{:?} vs {:?}", g.shape(p), g.shape(y))));
    }
    let y = if g.shape(y) != g.shape(p) { g.reshape(y, &g.shape(p).to_vec())? } else { y };
    let pc = g.clamp(p, S::of(PROB_EPS), S::of(1.0 - PROB_EPS))?;
    let log_p = g.log(pc)?;
    let q = g.one_minus(pc)?;
    let log_q = g.log(q)?;
    let pos = g.mul(log_p, y)?;
    let not_y = g.one_minus(y)?;
    let neg = g.mul(log_q, not_y)?;
    let both = g.add(pos, neg)?;
    let total = g.sum(both)?;
    g.neg(total)
}

/// ℓ_p = H(p^v, y) + H(p^w, y).
pub fn supervised_prediction_loss<S: Scalar>(g: &mut Graph<S>, p_image: Var, p_sentence: Var, y: Var) -> Result<Var> {
    let a = prediction_bce(g, p_image, y)?;
    let b = prediction_bce(g, p_sentence, y)?;
    g.add(a, b)
}

fn check_aligned(op: &'static str, a: &[Var], b: &[Var]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(op, format!("{} image predictions vs {} sentence predictions", a.len(), b.len())));
    }
    Ok(())
}

fn reduce<S: Scalar>(g: &mut Graph<S>, terms: &[Var], reduction: Reduction) -> Result<Var> {
    let total = g.add_all(terms)?;
    match reduction {
        Reduction::Sum => Ok(total),
        Reduction::Mean => g.scale(total, S::one() / S::of(terms.len() as f64)),
    }
}

/// ℓ_pc: BCE of each sentence prediction against the (detached) prediction
/// of the matching image variant.
pub fn prediction_consistency<S: Scalar>(
    g: &mut Graph<S>,
    p_image: &[Var],
    p_sentence: &[Var],
    reduction: Reduction,
) -> Result<Var> {
    check_aligned("prediction_consistency", p_image, p_sentence)?;
    let mut terms = Vec::with_capacity(p_image.len());
    for (&pv, &pw) in p_image.iter().zip(p_sentence) {
        let target = g.detach(pv)?;
        terms.push(prediction_bce(g, pw, target)?);
    }
    reduce(g, &terms, reduction)
}

/// Ordered pairs (m, n), m != n, in row-major order.
pub fn relation_pairs(count: usize) -> Vec<(usize, usize)> {
    (0..count).flat_map(|m| (0..count).filter(move |&n| n != m).map(move |n| (m, n))).collect()
}

fn stack<S: Scalar>(g: &mut Graph<S>, rows: &[Var]) -> Result<Var> {
    let width = g.value(rows[0]).numel();
    let mut flat = Vec::with_capacity(rows.len());
    for &r in rows {
        if g.value(r).numel() != width {
            return Err(Error::shape("stack", format!("vectors of width {} and {width}", g.value(r).numel())));
        }
        flat.push(g.reshape(r, &[1, width])?);
    }
    g.concat(&flat, 0)
}

/// Φ: softmax of negative Euclidean distances over all ordered off-diagonal
/// pairs, laid out as [`relation_pairs`].
pub fn relation_distribution<S: Scalar>(g: &mut Graph<S>, predictions: &[Var]) -> Result<Var> {
    if predictions.len() < 2 {
        return Err(Error::Invalid(format!("relation distribution needs >= 2 vectors, got {}", predictions.len())));
    }
    let stacked = stack(g, predictions)?;
    let (left, right): (Vec<usize>, Vec<usize>) = relation_pairs(predictions.len()).into_iter().unzip();
    let a = g.lookup(stacked, &left)?;
    let b = g.lookup(stacked, &right)?;
    let diff = g.sub(a, b)?;
    let dist = g.l2_norm(diff)?;
    let neg = g.neg(dist)?;
    g.softmax(neg)
}

/// `sum_i a_i ln(a_i / b_i)` with `0 ln 0 = 0` and `b` clamped to >= PROB_EPS.
pub fn kl_divergence<S: Scalar>(g: &mut Graph<S>, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape("kl_divergence", format!("{:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    let log_a = g.log_clamped(a, S::min_positive_value())?;
    let log_b = g.log_clamped(b, S::of(PROB_EPS))?;
    let ratio = g.sub(log_a, log_b)?;
    let weighted = g.mul(a, ratio)?;
    g.sum(weighted)
}

/// ℓ_rc = KL(Φ(image predictions) || Φ(sentence predictions)).
pub fn relation_consistency<S: Scalar>(g: &mut Graph<S>, p_image: &[Var], p_sentence: &[Var]) -> Result<Var> {
    check_aligned("relation_consistency", p_image, p_sentence)?;
    let targets = p_image.iter().map(|&p| g.detach(p)).collect::<Result<Vec<_>>>()?;
    let qv = relation_distribution(g, &targets)?;
    let qw = relation_distribution(g, p_sentence)?;
    kl_divergence(g, qv, qw)
}

fn squared_distance<S: Scalar>(g: &mut Graph<S>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    g.sum(sq)
}

/// Pseudo-label ablation of ℓ_pc: sentence predictions are fit to hard
/// targets `1[p^v >= threshold]`. Returns `None` when the raw image has no
/// class at or above the threshold.
pub fn pseudo_label_loss<S: Scalar>(
    g: &mut Graph<S>,
    p_image: &[Var],
    p_sentence: &[Var],
    threshold: f64,
    reduction: Reduction,
) -> Result<Option<Var>> {
    check_aligned("pseudo_label_loss", p_image, p_sentence)?;
    let hard = |g: &Graph<S>, p: Var| -> Vec<S> {
        g.value(p).data().iter().map(|v| if v.as_f64() >= threshold { S::one() } else { S::zero() }).collect()
    };
    if hard(g, p_image[0]).iter().all(|v| *v == S::zero()) {
        return Ok(None);
    }
    let mut terms = Vec::with_capacity(p_image.len());
    for (&pv, &pw) in p_image.iter().zip(p_sentence) {
        let target = g.constant(Tensor::vector(hard(g, pv)));
        terms.push(prediction_bce(g, pw, target)?);
    }
    reduce(g, &terms, reduction).map(Some)
}

/// Augmentation-consistency ablation of ℓ_rc: squared distance between the
/// sentence predictions of every unordered pair of variants.
pub fn augmentation_consistency<S: Scalar>(g: &mut Graph<S>, p_sentence: &[Var]) -> Result<Var> {
    if p_sentence.len() < 2 {
        return Err(Error::Invalid("augmentation consistency needs >= 2 variants".into()));
    }
    let mut terms = Vec::new();
    for m in 0..p_sentence.len() {
        for n in m + 1..p_sentence.len() {
            terms.push(squared_distance(g, p_sentence[m], p_sentence[n])?);
        }
    }
    g.add_all(&terms)
}

/// Squared L2 between detached image-side vectors and sentence-side vectors,
/// summed over variants. Used on embeddings (Embedding+) and on predictions
/// (Semantic+).
pub fn paired_l2_consistency<S: Scalar>(g: &mut Graph<S>, image_side: &[Var], sentence_side: &[Var]) -> Result<Var> {
    check_aligned("paired_l2_consistency", image_side, sentence_side)?;
    let mut terms = Vec::with_capacity(image_side.len());
    for (&v, &w) in image_side.iter().zip(sentence_side) {
        let target = g.detach(v)?;
        terms.push(squared_distance(g, w, target)?);
    }
    g.add_all(&terms)
}

/// Per described item: ℓ_c and ℓ_p.
#[derive(Clone, Copy, Debug)]
pub struct SupervisedTerms {
    pub caption: Var,
    pub prediction: Var,
}

/// Per undescribed item: the two weighted consistency slots plus gating inputs.
#[derive(Clone, Copy, Debug)]
pub struct UnsupervisedTerms {
    /// Slot weighted by lambda1 (ℓ_pc or its ablation substitute).
    pub consistency: Var,
    /// Slot weighted by lambda2 (ℓ_rc or its ablation substitute).
    pub relation: Var,
    /// max over classes of the raw image's prediction.
    pub confidence: f64,
}

/// Per-batch loss values. `l_pc` and `l_rc` sum only gate-open items, so
/// `total == l_c + l_p + lambda1 * l_pc + lambda2 * l_rc`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_c: f64,
    pub l_p: f64,
    pub l_pc: f64,
    pub l_rc: f64,
    pub gate_open: Vec<bool>,
    pub total: f64,
}

impl LossReport {
    pub fn composed(&self, w: &LossWeights) -> f64 {
        self.l_c + self.l_p + w.lambda1 * self.l_pc + w.lambda2 * self.l_rc
    }
}

/// Confidence gate: unsupervised terms count iff the raw image's top class
/// probability reaches tau.
pub fn gate_open(confidence: f64, tau: f64) -> bool {
    confidence >= tau
}

/// Sums supervised terms and gated, weighted unsupervised terms.
pub fn total_loss<S: Scalar>(
    g: &mut Graph<S>,
    supervised: &[SupervisedTerms],
    unsupervised: &[UnsupervisedTerms],
    weights: &LossWeights,
) -> Result<(Var, LossReport)> {
    weights.validate()?;
    if supervised.is_empty() && unsupervised.is_empty() {
        return Err(Error::Invalid("total loss of an empty batch".into()));
    }
    let mut report = LossReport::default();
    let mut terms = Vec::new();
    for s in supervised {
        report.l_c += g.value(s.caption).item().as_f64();
        report.l_p += g.value(s.prediction).item().as_f64();
        terms.push(g.add(s.caption, s.prediction)?);
    }
    for u in unsupervised {
        let open = gate_open(u.confidence, weights.tau);
        report.gate_open.push(open);
        if !open {
            continue;
        }
        report.l_pc += g.value(u.consistency).item().as_f64();
        report.l_rc += g.value(u.relation).item().as_f64();
        let a = g.scale(u.consistency, S::of(weights.lambda1))?;
        let b = g.scale(u.relation, S::of(weights.lambda2))?;
        terms.push(g.add(a, b)?);
    }
    let total = if terms.is_empty() {
        // every unsupervised item gated out and no supervised items
        g.constant(Tensor::scalar(S::zero()))
    } else {
        g.add_all(&terms)?
    };
    report.total = g.value(total).item().as_f64();
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_var(g: &mut Graph<f64>, v: &[f64]) -> Var {
        g.param(Tensor::vector(v.to_vec()))
    }

    #[test]
    fn xe_length_mismatch_is_an_error() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::matrix(1, 4, vec![0.0; 4]).unwrap());
        assert!(generation_xe(&mut g, &[l], &[1, 2]).is_err());
    }

    #[test]
    fn xe_masks_pad_targets() {
        let mut g = Graph::<f64>::new();
        let rows: Vec<Var> = (0..3).map(|_| g.constant(Tensor::matrix(1, 4, vec![0.0; 4]).unwrap())).collect();
        let xe = generation_xe(&mut g, &rows, &[3, PAD, PAD]).unwrap();
        assert!((g.value(xe).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_dimension_mismatch_is_an_error() {
        let mut g = Graph::<f64>::new();
        let p = vec_var(&mut g, &[0.5, 0.5]);
        let y = vec_var(&mut g, &[1.0]);
        assert!(prediction_bce(&mut g, p, y).is_err());
    }

    #[test]
    fn consistency_lists_must_align() {
        let mut g = Graph::<f64>::new();
        let a = vec_var(&mut g, &[0.5]);
        let b = vec_var(&mut g, &[0.5]);
        assert!(prediction_consistency(&mut g, &[a, b], &[a], Reduction::Sum).is_err());
        assert!(relation_consistency(&mut g, &[a], &[b]).is_err());
        assert!(relation_distribution(&mut g, &[a]).is_err());
    }

    #[test]
    fn image_side_receives_no_gradient_from_consistency() {
        let mut g = Graph::<f64>::new();
        let pv: Vec<Var> = [[0.2, 0.7], [0.3, 0.6], [0.9, 0.1]].iter().map(|v| vec_var(&mut g, v)).collect();
        let pw: Vec<Var> = [[0.4, 0.5], [0.1, 0.8], [0.6, 0.3]].iter().map(|v| vec_var(&mut g, v)).collect();
        let a = prediction_consistency(&mut g, &pv, &pw, Reduction::Sum).unwrap();
        let b = relation_consistency(&mut g, &pv, &pw).unwrap();
        let t = g.add(a, b).unwrap();
        let grads = g.backward(t).unwrap();
        for &v in &pv {
            assert!(grads.wrt(v).data().iter().all(|&x| x == 0.0));
        }
        for &w in &pw {
            assert!(grads.wrt(w).data().iter().any(|&x| x != 0.0));
        }
    }

    #[test]
    fn empty_batch_is_an_error() {
        let mut g = Graph::<f64>::new();
        assert!(total_loss(&mut g, &[], &[], &LossWeights::default()).is_err());
    }

    #[test]
    fn weights_are_validated() {
        assert!(LossWeights { tau: 1.5, ..Default::default() }.validate().is_err());
        assert!(LossWeights { lambda1: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn pseudo_labels_need_a_confident_class() {
        let mut g = Graph::<f64>::new();
        let pv = vec_var(&mut g, &[0.4, 0.3]);
        let pw = vec_var(&mut g, &[0.5, 0.5]);
        assert!(pseudo_label_loss(&mut g, &[pv], &[pw], 0.5, Reduction::Sum).unwrap().is_none());
        let pv = vec_var(&mut g, &[0.6, 0.3]);
        let l = pseudo_label_loss(&mut g, &[pv], &[pw], 0.5, Reduction::Sum).unwrap().unwrap();
        // targets [1, 0] against [0.5, 0.5]
        assert!((g.value(l).item() - 2.0 * 2f64.ln()).abs() < 1e-12);
    }
}
