//! Toy captioning generator (patch encoder + GRU decoder) and the shared
//! multi-label classifier that scores both images and generated sentences.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab::{BOS, EOS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionerConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    /// Number of image regions; must be a square number whose side divides the grid.
    pub region_count: usize,
    pub region_dim: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    /// Maximum decode length T.
    pub max_len: usize,
    pub class_count: usize,
    pub classifier_hidden: usize,
    /// Reserved for an attention refiner over regions; not available.
    #[serde(default)]
    pub attention_refiner: bool,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        CaptionerConfig {
            grid_h: 16,
            grid_w: 16,
            channels: 3,
            region_count: 16,
            region_dim: 32,
            hidden_dim: 32,
            vocab_size: 16,
            max_len: 8,
            class_count: 8,
            classifier_hidden: 32,
            attention_refiner: false,
        }
    }
}

impl CaptionerConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("channels", self.channels),
            ("region_count", self.region_count),
            ("region_dim", self.region_dim),
            ("hidden_dim", self.hidden_dim),
            ("max_len", self.max_len),
            ("class_count", self.class_count),
            ("classifier_hidden", self.classifier_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config("vocab_size must be >= 4 (PAD, BOS, EOS, UNK)".into()));
        }
        if self.region_dim != self.hidden_dim {
            return Err(Error::Config(format!(
                "region_dim ({}) must equal hidden_dim ({}) so one classifier serves both modalities",
                self.region_dim, self.hidden_dim
            )));
        }
        let side = self.region_side();
        if side * side != self.region_count || self.grid_h % side != 0 || self.grid_w % side != 0 {
            return Err(Error::Config(format!(
                "region_count {} must be a square whose side divides the {}x{} grid",
                self.region_count, self.grid_h, self.grid_w
            )));
        }
        if self.attention_refiner {
            return Err(Error::Config("attention_refiner is not available in this model".into()));
        }
        Ok(())
    }

    pub fn region_side(&self) -> usize {
        (self.region_count as f64).sqrt().round() as usize
    }

    pub fn patch_len(&self) -> usize {
        let side = self.region_side();
        (self.grid_h / side) * (self.grid_w / side) * self.channels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn add(&mut self, name: &str, t: Tensor<S>) -> ParamId {
        self.names.push(name.to_string());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Gate {
    input: ParamId,
    context: ParamId,
    recurrent: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Layout {
    enc_w: ParamId,
    enc_b: ParamId,
    ctx_w: ParamId,
    ctx_b: ParamId,
    embed: ParamId,
    update: Gate,
    reset: Gate,
    candidate: Gate,
    out_w: ParamId,
    out_b: ParamId,
    classifier: [(ParamId, ParamId); 3],
}

/// Graph leaves for every model parameter, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    vars: Vec<Var>,
}

impl ModelVars {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Substitutes the leaf used for `id` (for differentiating w.r.t. one tensor).
    pub fn set(&mut self, id: ParamId, v: Var) {
        self.vars[id.0] = v;
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}

/// Tokens and per-step graph values of one decoded sentence.
#[derive(Clone, Debug)]
pub struct DecodeTrace {
    pub tokens: Vec<usize>,
    /// Decoder state after each emitted token, `[1, hidden_dim]` each.
    pub hidden_states: Vec<Var>,
    /// Vocabulary logits per step, `[1, vocab_size]` each.
    pub step_logits: Vec<Var>,
    /// Log-probability of each emitted token; populated by sampled decoding only.
    pub log_probs: Vec<Var>,
}

impl DecodeTrace {
    fn empty() -> Self {
        DecodeTrace { tokens: Vec::new(), hidden_states: Vec::new(), step_logits: Vec::new(), log_probs: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionerModel<S> {
    config: CaptionerConfig,
    params: ParamStore<S>,
    layout: Layout,
}

fn xavier<S: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<S> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| S::of(rng.gen_range(-a..a))).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

impl<S: Scalar> CaptionerModel<S> {
    /// Randomly initialised model.
    pub fn new<R: Rng + ?Sized>(config: CaptionerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let v = config.vocab_size;
        let ch = config.classifier_hidden;
        let mut p = ParamStore::default();
        let mut mat = |p: &mut ParamStore<S>, name: &str, r: usize, c: usize| p.add(name, xavier(r, c, rng));
        let zeros = |p: &mut ParamStore<S>, name: &str, n: usize| p.add(name, Tensor::zeros(&[n]));

        let enc_w = mat(&mut p, "encoder.weight", config.patch_len(), d);
        let enc_b = zeros(&mut p, "encoder.bias", d);
        let ctx_w = mat(&mut p, "decoder.context.weight", config.region_count * d, d);
        let ctx_b = zeros(&mut p, "decoder.context.bias", d);
        let embed = mat(&mut p, "decoder.embedding", v, d);
        let mut gate = |p: &mut ParamStore<S>, g: &str| Gate {
            input: mat(p, &format!("decoder.{g}.input"), d, d),
            context: mat(p, &format!("decoder.{g}.context"), d, d),
            recurrent: mat(p, &format!("decoder.{g}.recurrent"), d, d),
            bias: zeros(p, &format!("decoder.{g}.bias"), d),
        };
        let update = gate(&mut p, "update");
        let reset = gate(&mut p, "reset");
        let candidate = gate(&mut p, "candidate");
        let out_w = mat(&mut p, "decoder.output.weight", d, v);
        let out_b = zeros(&mut p, "decoder.output.bias", v);
        let widths = [(d, ch), (ch, ch), (ch, config.class_count)];
        let classifier = [0, 1, 2].map(|i| {
            let (r, c) = widths[i];
            (mat(&mut p, &format!("classifier.{i}.weight"), r, c), zeros(&mut p, &format!("classifier.{i}.bias"), c))
        });
        let layout = Layout { enc_w, enc_b, ctx_w, ctx_b, embed, update, reset, candidate, out_w, out_b, classifier };
        Ok(CaptionerModel { config, params: p, layout })
    }

    /// Rebuilds a model from named tensors (e.g. a checkpoint).
    pub fn from_named(config: CaptionerConfig, named: &[(String, Tensor<S>)]) -> Result<Self> {
        let mut model = Self::new(config, &mut rand::rngs::mock::StepRng::new(0, 1))?;
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id).to_string();
            let t = named
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` absent")))?;
            let expected = model.params.get(id).shape();
            if t.shape() != expected {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {expected:?}",
                    t.shape()
                )));
            }
            *model.params.get_mut(id) = t.clone();
        }
        Ok(model)
    }

    pub fn config(&self) -> &CaptionerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    /// Parameters of the shared classifier f, in layer order (weight, bias).
    pub fn classifier_params(&self) -> Vec<ParamId> {
        self.layout.classifier.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn decoder_params(&self) -> Vec<ParamId> {
        let l = &self.layout;
        let mut ids = vec![l.ctx_w, l.ctx_b, l.embed, l.out_w, l.out_b];
        for g in [l.update, l.reset, l.candidate] {
            ids.extend([g.input, g.context, g.recurrent, g.bias]);
        }
        ids
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        vec![self.layout.enc_w, self.layout.enc_b]
    }

    pub fn output_params(&self) -> Vec<ParamId> {
        vec![self.layout.out_w, self.layout.out_b]
    }

    /// Registers every parameter as a gradient-tracking leaf.
    pub fn bind(&self, g: &mut Graph<S>) -> ModelVars {
        ModelVars { vars: self.params.tensors().iter().map(|t| g.param(t.clone())).collect() }
    }

    /// Image regions `[region_count, region_dim]`: each patch goes through one
    /// shared linear map followed by tanh.
    pub fn encode(&self, g: &mut Graph<S>, vars: &ModelVars, image: &Image) -> Result<Var> {
        let c = &self.config;
        if image.dims() != (c.grid_h, c.grid_w, c.channels) {
            return Err(Error::shape(
                "encode",
                format!("image is {:?}, model expects {:?}", image.dims(), (c.grid_h, c.grid_w, c.channels)),
            ));
        }
        let side = c.region_side();
        let (ph, pw) = (c.grid_h / side, c.grid_w / side);
        let mut patches = Vec::with_capacity(c.region_count * c.patch_len());
        for gy in 0..side {
            for gx in 0..side {
                for y in gy * ph..(gy + 1) * ph {
                    let start = image.index(y, gx * pw, 0);
                    patches.extend(image.data[start..start + pw * c.channels].iter().map(|&v| S::of(v as f64)));
                }
            }
        }
        let patches = g.constant(Tensor::from_parts(vec![c.region_count, c.patch_len()], patches));
        let lin = g.matmul(patches, vars.get(self.layout.enc_w))?;
        let lin = g.add(lin, vars.get(self.layout.enc_b))?;
        g.tanh(lin)
    }

    /// E_e: mean of the region embeddings, `[region_dim]`.
    pub fn image_embedding(&self, g: &mut Graph<S>, regions: Var) -> Result<Var> {
        if g.shape(regions).len() != 2 {
            return Err(Error::shape("image_embedding", format!("regions must be 2-D, got {:?}", g.shape(regions))));
        }
        g.mean_axis(regions, 0)
    }

    fn context(&self, g: &mut Graph<S>, vars: &ModelVars, regions: Var) -> Result<Var> {
        let c = &self.config;
        if g.shape(regions) != [c.region_count, c.region_dim] {
            return Err(Error::shape("decode", format!("regions have shape {:?}", g.shape(regions))));
        }
        let flat = g.reshape(regions, &[1, c.region_count * c.region_dim])?;
        let ctx = g.matmul(flat, vars.get(self.layout.ctx_w))?;
        let ctx = g.add(ctx, vars.get(self.layout.ctx_b))?;
        g.tanh(ctx)
    }

    /// Per-sequence gate offsets `context . W_c + b`, computed once per decode.
    fn gate_offsets(&self, g: &mut Graph<S>, vars: &ModelVars, ctx: Var) -> Result<[Var; 3]> {
        let l = &self.layout;
        let mut out = [ctx; 3];
        for (slot, gate) in [l.update, l.reset, l.candidate].iter().enumerate() {
            let proj = g.matmul(ctx, vars.get(gate.context))?;
            out[slot] = g.add(proj, vars.get(gate.bias))?;
        }
        Ok(out)
    }

    /// One GRU step on `token` from state `h`; returns (new state, logits).
    fn step(&self, g: &mut Graph<S>, vars: &ModelVars, offsets: &[Var; 3], h: Var, token: usize) -> Result<(Var, Var)> {
        if token >= self.config.vocab_size {
            return Err(Error::shape("decode", format!("token id {token} outside vocabulary of {}", self.config.vocab_size)));
        }
        let l = &self.layout;
        let x = g.lookup(vars.get(l.embed), &[token])?;
        let gate = |g: &mut Graph<S>, gate: Gate, offset: Var, state: Var| -> Result<Var> {
            let a = g.matmul(x, vars.get(gate.input))?;
            let b = g.matmul(state, vars.get(gate.recurrent))?;
            let s = g.add(a, b)?;
            g.add(s, offset)
        };
        let z = gate(g, l.update, offsets[0], h)?;
        let z = g.sigmoid(z)?;
        let r = gate(g, l.reset, offsets[1], h)?;
        let r = g.sigmoid(r)?;
        let rh = g.mul(r, h)?;
        let n = gate(g, l.candidate, offsets[2], rh)?;
        let n = g.tanh(n)?;
        // h' = (1 - z) * n + z * h
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        let h_next = g.add(n, zd)?;
        let logits = g.matmul(h_next, vars.get(l.out_w))?;
        let logits = g.add(logits, vars.get(l.out_b))?;
        Ok((h_next, logits))
    }

    /// Runs the decoder over `gold[..len-1]`; row t of the trace predicts `gold[t + 1]`.
    pub fn decode_teacher_forced(
        &self,
        g: &mut Graph<S>,
        vars: &ModelVars,
        regions: Var,
        gold: &[usize],
    ) -> Result<DecodeTrace> {
        if gold.first() != Some(&BOS) {
            return Err(Error::Invalid("gold sequence must begin with BOS".into()));
        }
        if gold.len() < 2 || gold.len() - 1 > self.config.max_len {
            return Err(Error::Invalid(format!(
                "gold sequence must hold 1..={} tokens after BOS, got {}",
                self.config.max_len,
                gold.len().saturating_sub(1)
            )));
        }
        if let Some(bad) = gold.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::shape("decode", format!("token id {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        let ctx = self.context(g, vars, regions)?;
        let offsets = self.gate_offsets(g, vars, ctx)?;
        let mut h = ctx;
        let mut trace = DecodeTrace::empty();
        for (&input, &target) in gold.iter().zip(&gold[1..]) {
            let (h_next, logits) = self.step(g, vars, &offsets, h, input)?;
            h = h_next;
            trace.tokens.push(target);
            trace.hidden_states.push(h);
            trace.step_logits.push(logits);
        }
        Ok(trace)
    }

    fn decode_with<F>(&self, g: &mut Graph<S>, vars: &ModelVars, regions: Var, max_len: usize, mut choose: F) -> Result<DecodeTrace>
    where
        F: FnMut(&mut Graph<S>, Var) -> Result<(usize, Option<Var>)>,
    {
        if max_len == 0 || max_len > self.config.max_len {
            return Err(Error::Config(format!("max_len must lie in 1..={}, got {max_len}", self.config.max_len)));
        }
        let ctx = self.context(g, vars, regions)?;
        let offsets = self.gate_offsets(g, vars, ctx)?;
        let mut h = ctx;
        let mut token = BOS;
        let mut trace = DecodeTrace::empty();
        while trace.len() < max_len {
            let (h_next, logits) = self.step(g, vars, &offsets, h, token)?;
            h = h_next;
            let (next, log_prob) = choose(g, logits)?;
            token = next;
            trace.tokens.push(token);
            trace.hidden_states.push(h);
            trace.step_logits.push(logits);
            trace.log_probs.extend(log_prob);
            if token == EOS {
                break;
            }
        }
        Ok(trace)
    }

    /// Argmax decoding; ties go to the lowest token id. Gradients reach the
    /// hidden states but not the discrete token choices.
    pub fn decode_greedy(&self, g: &mut Graph<S>, vars: &ModelVars, regions: Var, max_len: usize) -> Result<DecodeTrace> {
        self.decode_with(g, vars, regions, max_len, |g, logits| Ok((argmax(g.value(logits).data()), None)))
    }

    /// Draws each token from `softmax(logits / temperature)` and records its
    /// log-probability under that distribution.
    pub fn decode_sampled<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<S>,
        vars: &ModelVars,
        regions: Var,
        max_len: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<DecodeTrace> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        self.decode_with(g, vars, regions, max_len, |g, logits| {
            let scaled = g.scale(logits, S::of(1.0 / temperature))?;
            let logp = g.log_softmax(scaled)?;
            let token = sample(g.value(logp).data(), rng.gen::<f64>());
            let picked = g.pick(logp, &[token])?;
            Ok((token, Some(picked)))
        })
    }

    /// D_e: mean decoder state over the trace, `[hidden_dim]`.
    pub fn sentence_embedding(&self, g: &mut Graph<S>, trace: &DecodeTrace) -> Result<Var> {
        if trace.hidden_states.is_empty() {
            return Err(Error::Invalid("sentence embedding of an empty trace".into()));
        }
        let stacked = g.concat(&trace.hidden_states, 0)?;
        g.mean_axis(stacked, 0)
    }

    /// Shared classifier f: three affine layers, ReLU between, sigmoid output.
    pub fn classify(&self, g: &mut Graph<S>, vars: &ModelVars, embedding: Var) -> Result<Var> {
        let width = g.value(embedding).numel();
        if width != self.config.hidden_dim {
            return Err(Error::shape(
                "classify",
                format!("embedding width {width}, classifier expects {}", self.config.hidden_dim),
            ));
        }
        let mut x = g.reshape(embedding, &[1, width])?;
        for (i, &(w, b)) in self.layout.classifier.iter().enumerate() {
            x = g.matmul(x, vars.get(w))?;
            x = g.add(x, vars.get(b))?;
            if i < 2 {
                x = g.relu(x)?;
            }
        }
        let p = g.sigmoid(x)?;
        g.reshape(p, &[self.config.class_count])
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<S: Scalar>(values: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn sample<S: Scalar>(log_probs: &[S], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.as_f64().exp();
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver of mass past the end
    argmax(log_probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> CaptionerModel<f64> {
        CaptionerModel::new(CaptionerConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = CaptionerConfig::default();
        assert!(c.validate().is_ok());
        c.region_count = 3;
        assert!(c.validate().is_err());
        let mut c = CaptionerConfig::default();
        c.vocab_size = 3;
        assert!(c.validate().is_err());
        let mut c = CaptionerConfig::default();
        c.hidden_dim = 16;
        assert!(c.validate().is_err());
        let mut c = CaptionerConfig::default();
        c.attention_refiner = true;
        assert!(c.validate().is_err());
    }

    #[test]
    fn sixteen_regions_come_from_four_by_four_patches() {
        let c = CaptionerConfig::default();
        assert_eq!(c.region_side(), 4);
        assert_eq!(c.patch_len(), 4 * 4 * 3);
        let m = model(1);
        let mut g = Graph::new();
        let vars = m.bind(&mut g);
        let r = m.encode(&mut g, &vars, &Image::zeros(16, 16, 3)).unwrap();
        assert_eq!(g.shape(r), &[16, 32]);
    }

    #[test]
    fn zero_image_gives_identical_regions() {
        let m = model(2);
        let mut g = Graph::new();
        let vars = m.bind(&mut g);
        let r = m.encode(&mut g, &vars, &Image::zeros(16, 16, 3)).unwrap();
        let rows: Vec<&[f64]> = g.value(r).data().chunks(32).collect();
        assert!(rows.iter().all(|row| row == &rows[0]));
    }

    #[test]
    fn wrong_grid_is_rejected() {
        let m = model(3);
        let mut g = Graph::new();
        let vars = m.bind(&mut g);
        assert!(m.encode(&mut g, &vars, &Image::zeros(8, 8, 3)).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0f64; 5]), 0);
    }

    #[test]
    fn teacher_forcing_rejects_bad_tokens() {
        let m = model(4);
        let mut g = Graph::new();
        let vars = m.bind(&mut g);
        let r = m.encode(&mut g, &vars, &Image::zeros(16, 16, 3)).unwrap();
        assert!(m.decode_teacher_forced(&mut g, &vars, r, &[BOS, 99]).is_err());
        assert!(m.decode_teacher_forced(&mut g, &vars, r, &[5, 6]).is_err());
    }
}
