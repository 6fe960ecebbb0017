//! Two-layer LSTM language model: forward pass with substitution hooks,
//! trainer, and versioned checkpoints.
//!
//! The model is deliberately small and fully deterministic. Two forward
//! paths exist and must agree:
//!
//! - a plain `f64` path ([`forward_step`], [`run_sentence`]) used for
//!   evaluation, contrast assignment, and traces;
//! - a recorded path ([`ParamNodes::declare`] + [`unroll`]) used whenever
//!   gradients are needed.
//!
//! Both paths expose the same hook point: after the recurrent update of a
//! step, the concatenated hidden vector (layer 0 then layer 1, length
//! `k = num_layers * hidden_size`) can be replaced before it reaches the
//! output projection and the next step. Cell vectors are never touched.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::array::RealArray;
use crate::datagen::EncodedInstance;
use crate::error::{Error, Result};
use crate::graph::{self, Graph, NodeId};

/// Token string <-> dense id bijection with reserved ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

pub const UNK_TOKEN: &str = "<unk>";
pub const EOS_TOKEN: &str = "<eos>";

impl Vocabulary {
    pub const UNK: u32 = 0;
    pub const EOS: u32 = 1;

    /// Build from an iterator of token strings: reserved ids first, then the
    /// unique tokens in sorted order, so the mapping is independent of input
    /// order.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut uniq: Vec<String> = tokens
            .into_iter()
            .map(|s| s.as_ref().to_string())
            .filter(|t| t != UNK_TOKEN && t != EOS_TOKEN)
            .collect();
        uniq.sort();
        uniq.dedup();
        let mut all = vec![UNK_TOKEN.to_string(), EOS_TOKEN.to_string()];
        all.extend(uniq);
        let index = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens: all, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Like [`Vocabulary::id`] but unknown tokens are an error.
    pub fn require(&self, token: &str) -> Result<u32> {
        self.id(token)
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Architecture of the language model.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LMConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub embedding_size: usize,
    pub vocab_size: usize,
    pub tied_output: bool,
}

impl LMConfig {
    pub fn new(hidden_size: usize, embedding_size: usize, vocab_size: usize) -> Result<Self> {
        let cfg = Self {
            num_layers: 2,
            hidden_size,
            embedding_size,
            vocab_size,
            tied_output: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size < 8 {
            return Err(Error::InvalidConfig(format!(
                "hidden_size must be >= 8, got {}",
                self.hidden_size
            )));
        }
        if self.num_layers == 0 || self.vocab_size < 2 || self.embedding_size == 0 {
            return Err(Error::InvalidConfig("degenerate model config".into()));
        }
        if self.tied_output {
            return Err(Error::InvalidConfig("tied output is not supported".into()));
        }
        Ok(())
    }

    /// Total number of interveneable units: concatenation of all layers'
    /// hidden vectors.
    pub fn total_units(&self) -> usize {
        self.num_layers * self.hidden_size
    }
}

/// One layer's weight block. Gate order inside the `4H` rows is
/// input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// `[4H, in_dim]`
    pub w_input: RealArray,
    /// `[4H, H]`
    pub w_hidden: RealArray,
    /// `[4H]`
    pub bias: RealArray,
}

/// All learned parameters of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct LMParameters {
    /// `[V, E]`
    pub embedding: RealArray,
    pub layers: Vec<LayerWeights>,
    /// `[V, H]`
    pub out_weight: RealArray,
    /// `[V]`
    pub out_bias: RealArray,
}

impl LMParameters {
    /// Deterministic uniform initialization in `[-scale, scale]` with
    /// `scale = 1/sqrt(hidden_size)`. Forget-gate biases start at +1 so
    /// fresh cells retain information across the sentence.
    pub fn init(cfg: &LMConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (cfg.hidden_size as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
        };
        let (v, e, h) = (cfg.vocab_size, cfg.embedding_size, cfg.hidden_size);
        let embedding = RealArray::matrix(v, e, draw(v * e)).unwrap();
        let layers = (0..cfg.num_layers)
            .map(|l| {
                let in_dim = if l == 0 { e } else { h };
                let mut bias = draw(4 * h);
                for b in bias[h..2 * h].iter_mut() {
                    *b += 1.0;
                }
                LayerWeights {
                    w_input: RealArray::matrix(4 * h, in_dim, draw(4 * h * in_dim)).unwrap(),
                    w_hidden: RealArray::matrix(4 * h, h, draw(4 * h * h)).unwrap(),
                    bias: RealArray::vector(bias).unwrap(),
                }
            })
            .collect();
        let out_weight = RealArray::matrix(v, h, draw(v * h)).unwrap();
        let out_bias = RealArray::vector(draw(v)).unwrap();
        Self {
            embedding,
            layers,
            out_weight,
            out_bias,
        }
    }

    /// Fixed-order view of every parameter array; the order defines the
    /// checkpoint layout and the optimizer's flattening.
    pub fn named_arrays(&self) -> Vec<(String, &RealArray)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (l, lw) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.w_input"), &lw.w_input));
            out.push((format!("layer{l}.w_hidden"), &lw.w_hidden));
            out.push((format!("layer{l}.bias"), &lw.bias));
        }
        out.push(("output.weight".to_string(), &self.out_weight));
        out.push(("output.bias".to_string(), &self.out_bias));
        out
    }

    fn named_arrays_mut(&mut self) -> Vec<(String, &mut RealArray)> {
        let mut out = vec![("embedding".to_string(), &mut self.embedding)];
        for (l, lw) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{l}.w_input"), &mut lw.w_input));
            out.push((format!("layer{l}.w_hidden"), &mut lw.w_hidden));
            out.push((format!("layer{l}.bias"), &mut lw.bias));
        }
        out.push(("output.weight".to_string(), &mut self.out_weight));
        out.push(("output.bias".to_string(), &mut self.out_bias));
        out
    }
}

/// Per-layer hidden and cell vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LMState {
    /// `(h, c)` per layer, each of length `hidden_size`.
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl LMState {
    pub fn zeros(cfg: &LMConfig) -> Self {
        Self {
            layers: vec![
                (vec![0.0; cfg.hidden_size], vec![0.0; cfg.hidden_size]);
                cfg.num_layers
            ],
        }
    }

    /// Concatenated hidden vectors, layer 0 first. Length `k`.
    pub fn concat_hidden(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layers.len() * self.layers[0].0.len());
        for (h, _) in &self.layers {
            out.extend_from_slice(h);
        }
        out
    }
}

/// A hook that may replace the concatenated hidden vector of a step.
pub type HiddenHook<'a> = &'a mut dyn FnMut(&[f64]) -> Vec<f64>;

/// Advance the model one token. Returns the next-token distribution.
///
/// If a hook is given it receives the concatenated post-update hidden
/// vector; its return value replaces the hidden state before the output
/// projection and before the next step. Cell vectors are untouched.
pub fn forward_step(
    params: &LMParameters,
    cfg: &LMConfig,
    state: &mut LMState,
    token: u32,
    hook: Option<HiddenHook<'_>>,
) -> Result<Vec<f64>> {
    if (token as usize) >= cfg.vocab_size {
        return Err(Error::UnknownToken(format!(
            "token id {token} >= vocab size {}",
            cfg.vocab_size
        )));
    }
    let h_size = cfg.hidden_size;
    let e = cfg.embedding_size;
    let mut x = params.embedding.values()[token as usize * e..(token as usize + 1) * e].to_vec();

    for (layer, lw) in params.layers.iter().enumerate() {
        let (h_prev, c_prev) = &state.layers[layer];
        let mut pre = lw.bias.values().to_vec();
        add_matvec(&mut pre, lw.w_input.values(), &x);
        add_matvec(&mut pre, lw.w_hidden.values(), h_prev);

        let mut h_new = vec![0.0; h_size];
        let mut c_new = vec![0.0; h_size];
        for j in 0..h_size {
            let i_g = graph::sigmoid(pre[j]);
            let f_g = graph::sigmoid(pre[h_size + j]);
            let g_g = pre[2 * h_size + j].tanh();
            let o_g = graph::sigmoid(pre[3 * h_size + j]);
            let c = f_g * c_prev[j] + i_g * g_g;
            c_new[j] = c;
            h_new[j] = o_g * c.tanh();
        }
        x = h_new.clone();
        state.layers[layer] = (h_new, c_new);
    }

    if let Some(hook) = hook {
        let replaced = hook(&state.concat_hidden());
        debug_assert_eq!(replaced.len(), cfg.total_units());
        for (layer, chunk) in replaced.chunks(h_size).enumerate() {
            state.layers[layer].0.copy_from_slice(chunk);
        }
    }

    let top_h = &state.layers[cfg.num_layers - 1].0;
    let mut logits = params.out_bias.values().to_vec();
    add_matvec(&mut logits, params.out_weight.values(), top_h);
    let mut dist = vec![0.0; logits.len()];
    graph::softmax_row(&logits, &mut dist);
    Ok(dist)
}

/// Run a whole token sequence from the zero state. Returns, per step, the
/// next-token distribution and the concatenated hidden vector after any hook.
/// The hook gets the 0-based step index and the pre-replacement vector.
pub fn run_sentence(
    params: &LMParameters,
    cfg: &LMConfig,
    tokens: &[u32],
    mut hook: Option<&mut dyn FnMut(usize, &[f64]) -> Vec<f64>>,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut state = LMState::zeros(cfg);
    let mut dists = Vec::with_capacity(tokens.len());
    let mut hiddens = Vec::with_capacity(tokens.len());
    for (step, &tok) in tokens.iter().enumerate() {
        let dist = match hook.as_mut() {
            Some(hk) => {
                let mut step_hook = |h: &[f64]| hk(step, h);
                forward_step(params, cfg, &mut state, tok, Some(&mut step_hook))?
            }
            None => forward_step(params, cfg, &mut state, tok, None)?,
        };
        dists.push(dist);
        hiddens.push(state.concat_hidden());
    }
    Ok((dists, hiddens))
}

fn add_matvec(out: &mut [f64], mat: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &mat[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (m, v) in row.iter().zip(x) {
            acc += m * v;
        }
        *o += acc;
    }
}

// ── Recorded (differentiable) path ───────────────────────────────────

/// Graph input nodes for every model parameter.
pub struct ParamNodes {
    pub embedding: NodeId,
    pub layers: Vec<(NodeId, NodeId, NodeId)>,
    pub out_weight: NodeId,
    pub out_bias: NodeId,
}

impl ParamNodes {
    /// Declare one named graph input per parameter array.
    pub fn declare(g: &mut Graph, cfg: &LMConfig) -> Self {
        let (v, e, h) = (cfg.vocab_size, cfg.embedding_size, cfg.hidden_size);
        let embedding = g.input("embedding", vec![v, e]);
        let layers = (0..cfg.num_layers)
            .map(|l| {
                let in_dim = if l == 0 { e } else { h };
                (
                    g.input(&format!("layer{l}.w_input"), vec![4 * h, in_dim]),
                    g.input(&format!("layer{l}.w_hidden"), vec![4 * h, h]),
                    g.input(&format!("layer{l}.bias"), vec![4 * h]),
                )
            })
            .collect();
        let out_weight = g.input("output.weight", vec![v, h]);
        let out_bias = g.input("output.bias", vec![v]);
        Self {
            embedding,
            layers,
            out_weight,
            out_bias,
        }
    }

    /// All parameter nodes in [`LMParameters::named_arrays`] order.
    pub fn all(&self) -> Vec<NodeId> {
        let mut out = vec![self.embedding];
        for &(a, b, c) in &self.layers {
            out.extend([a, b, c]);
        }
        out.extend([self.out_weight, self.out_bias]);
        out
    }

    /// Bindings for [`Graph::evaluate`].
    pub fn bind(params: &LMParameters, into: &mut HashMap<String, RealArray>) {
        for (name, arr) in params.named_arrays() {
            into.insert(name, arr.clone());
        }
    }
}

/// Per-step outputs of [`unroll`].
pub struct Unrolled {
    /// Logit vectors, one per consumed token.
    pub step_logits: Vec<NodeId>,
    /// Concatenated hidden vector after the hook, one per step.
    pub step_hidden: Vec<NodeId>,
}

/// Record the forward pass over `tokens` into `g`, starting from the zero
/// state. `hook` may replace the concatenated hidden node of each step; the
/// replacement feeds both the output projection and the next step.
pub fn unroll(
    g: &mut Graph,
    nodes: &ParamNodes,
    cfg: &LMConfig,
    tokens: &[u32],
    mut hook: impl FnMut(&mut Graph, usize, NodeId) -> Result<NodeId>,
) -> Result<Unrolled> {
    let h_size = cfg.hidden_size;
    let zero_h = RealArray::zeros(vec![h_size]);
    let mut hs: Vec<NodeId> = (0..cfg.num_layers)
        .map(|_| g.constant(zero_h.clone()))
        .collect();
    let mut cs: Vec<NodeId> = (0..cfg.num_layers)
        .map(|_| g.constant(zero_h.clone()))
        .collect();

    let mut step_logits = Vec::with_capacity(tokens.len());
    let mut step_hidden = Vec::with_capacity(tokens.len());

    for (step, &tok) in tokens.iter().enumerate() {
        let mut x = g.embed(nodes.embedding, vec![tok as usize])?;
        for (layer, &(w_input, w_hidden, bias)) in nodes.layers.iter().enumerate() {
            let wx = g.matmul(w_input, x)?;
            let wh = g.matmul(w_hidden, hs[layer])?;
            let lin = g.add(wx, wh)?;
            let pre = g.add(lin, bias)?;

            let i_pre = g.slice(pre, 0, h_size)?;
            let f_pre = g.slice(pre, h_size, h_size)?;
            let g_pre = g.slice(pre, 2 * h_size, h_size)?;
            let o_pre = g.slice(pre, 3 * h_size, h_size)?;
            let i_g = g.sigmoid(i_pre);
            let f_g = g.sigmoid(f_pre);
            let g_g = g.tanh(g_pre);
            let o_g = g.sigmoid(o_pre);

            let fc = g.mul(f_g, cs[layer])?;
            let ig = g.mul(i_g, g_g)?;
            let c_new = g.add(fc, ig)?;
            let c_tanh = g.tanh(c_new);
            let h_new = g.mul(o_g, c_tanh)?;

            cs[layer] = c_new;
            hs[layer] = h_new;
            x = h_new;
        }

        let concat = g.concat(&hs)?;
        let replaced = hook(g, step, concat)?;
        for layer in 0..cfg.num_layers {
            hs[layer] = g.slice(replaced, layer * h_size, h_size)?;
        }

        let proj = g.matmul(nodes.out_weight, hs[cfg.num_layers - 1])?;
        let logits = g.add(proj, nodes.out_bias)?;
        step_logits.push(logits);
        step_hidden.push(replaced);
    }

    Ok(Unrolled {
        step_logits,
        step_hidden,
    })
}

// ── Training ─────────────────────────────────────────────────────────

/// Trainer hyperparameters: SGD with momentum, gradient-norm clipping, and
/// per-epoch learning-rate decay.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Per-epoch multiplicative decay of the learning rate.
    pub lr_decay: f64,
    /// Classical momentum on the clipped batch gradient.
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            lr_decay: 0.9,
            momentum: 0.9,
            epochs: 10,
            batch_size: 16,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

/// Train on encoded sentences (an `<eos>` target is appended to each).
/// Returns the parameters and the per-epoch mean cross-entropy in
/// nats per token. Deterministic given the seed.
pub fn train_lm(
    cfg: &LMConfig,
    corpus: &[Vec<u32>],
    train: &TrainConfig,
) -> Result<(LMParameters, Vec<f64>)> {
    if corpus.is_empty() {
        return Err(Error::InvalidConfig("empty training corpus".into()));
    }
    let mut params = LMParameters::init(cfg, train.seed);
    let mut curve = Vec::with_capacity(train.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5eed);
    let mut velocity: HashMap<String, Vec<f64>> = params
        .named_arrays()
        .iter()
        .map(|(n, a)| (n.clone(), vec![0.0; a.len()]))
        .collect();

    for epoch in 0..train.epochs {
        let lr = train.learning_rate * train.lr_decay.powi(epoch as i32);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        shuffle(&mut order, &mut rng);

        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;

        for batch in order.chunks(train.batch_size.max(1)) {
            let mut bound = HashMap::new();
            ParamNodes::bind(&params, &mut bound);

            let names: Vec<String> =
                params.named_arrays().iter().map(|(n, _)| n.clone()).collect();
            let mut grad_acc: HashMap<String, Vec<f64>> = names
                .iter()
                .map(|n| (n.clone(), vec![0.0; bound[n].len()]))
                .collect();
            let mut batch_tokens = 0usize;

            for &si in batch {
                let mut tokens = corpus[si].clone();
                tokens.push(Vocabulary::EOS);
                let inputs = &tokens[..tokens.len() - 1];
                let targets = &tokens[1..];

                let mut g = Graph::new();
                let nodes = ParamNodes::declare(&mut g, cfg);
                let rolled = unroll(&mut g, &nodes, cfg, inputs, |_, _, h| Ok(h))?;
                let mut nlls = Vec::with_capacity(inputs.len());
                for (logits, &tgt) in rolled.step_logits.iter().zip(targets) {
                    let ls = g.log_softmax(*logits)?;
                    let picked = g.gather(ls, tgt as usize)?;
                    nlls.push(picked);
                }
                let stacked = g.concat(&nlls)?;
                let total = g.sum(stacked);
                let loss = g.scale(total, -1.0);

                let eval = g.evaluate(&bound)?;
                let loss_val = eval.scalar(loss);
                if !loss_val.is_finite() {
                    return Err(Error::Numerical(format!(
                        "training loss diverged (epoch {epoch}, sentence {si})"
                    )));
                }
                epoch_loss += loss_val;
                epoch_tokens += inputs.len();
                batch_tokens += inputs.len();

                let grads = eval.backward(loss, &nodes.all())?;
                for (name, node) in names.iter().zip(nodes.all()) {
                    let acc = grad_acc.get_mut(name).unwrap();
                    for (a, gv) in acc.iter_mut().zip(grads.get(node)) {
                        *a += gv;
                    }
                }
            }

            // Mean per token, then clip the global norm.
            let inv = 1.0 / batch_tokens.max(1) as f64;
            let mut sq_norm = 0.0;
            for gvec in grad_acc.values_mut() {
                for gv in gvec.iter_mut() {
                    *gv *= inv;
                    sq_norm += *gv * *gv;
                }
            }
            let norm = sq_norm.sqrt();
            let clip_scale = if norm > train.clip_norm {
                train.clip_norm / norm
            } else {
                1.0
            };

            for (name, arr) in params.named_arrays_mut() {
                let gvec = &grad_acc[&name];
                let vel = velocity.get_mut(&name).unwrap();
                let shape = arr.shape().to_vec();
                let mut vals = arr.values().to_vec();
                for ((v, gv), mv) in vals.iter_mut().zip(gvec).zip(vel.iter_mut()) {
                    *mv = train.momentum * *mv + clip_scale * gv;
                    *v -= lr * *mv;
                }
                *arr = RealArray::new(shape, vals).map_err(|_| {
                    Error::Numerical(format!("parameter {name} became non-finite"))
                })?;
            }
        }

        curve.push(epoch_loss / epoch_tokens.max(1) as f64);
    }
    Ok((params, curve))
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Fraction of instances where the model prefers the grammatical target
/// form over its counterpart at the target position. Instances must carry
/// the pair in gold order (`d` grammatical, `t` ungrammatical).
pub fn agreement_accuracy(
    params: &LMParameters,
    cfg: &LMConfig,
    eval: &[EncodedInstance],
) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let mut correct = 0usize;
    for inst in eval {
        let prefix = &inst.tokens[..inst.target_index()];
        let (dists, _) = run_sentence(params, cfg, prefix, None)?;
        let dist = dists.last().expect("nonempty prefix");
        if dist[inst.d as usize] > dist[inst.t as usize] {
            correct += 1;
        }
    }
    Ok(correct as f64 / eval.len() as f64)
}

/// Mean perplexity (exp of mean cross-entropy per token) over sentences.
pub fn perplexity(params: &LMParameters, cfg: &LMConfig, corpus: &[Vec<u32>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for sent in corpus {
        let mut tokens = sent.clone();
        tokens.push(Vocabulary::EOS);
        let (dists, _) = run_sentence(params, cfg, &tokens[..tokens.len() - 1], None)?;
        for (dist, &tgt) in dists.iter().zip(&tokens[1..]) {
            total -= (dist[tgt as usize].max(1e-300)).ln();
            count += 1;
        }
    }
    Ok((total / count.max(1) as f64).exp())
}

// ── Checkpointing ────────────────────────────────────────────────────

const CHECKPOINT_MAGIC: &str = "intervene-checkpoint v1";

/// Write config, vocabulary, and parameters: a text header followed by named
/// arrays as little-endian 64-bit floats. The write is atomic (temp file +
/// rename).
pub fn save_checkpoint(
    path: &Path,
    cfg: &LMConfig,
    params: &LMParameters,
    vocab: &Vocabulary,
) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        writeln!(w, "num_layers {}", cfg.num_layers)?;
        writeln!(w, "hidden_size {}", cfg.hidden_size)?;
        writeln!(w, "embedding_size {}", cfg.embedding_size)?;
        writeln!(w, "vocab_size {}", cfg.vocab_size)?;
        writeln!(w, "tied_output {}", cfg.tied_output)?;
        writeln!(w, "vocab {}", vocab.len())?;
        for tok in vocab.tokens() {
            writeln!(w, "{tok}")?;
        }
        let named = params.named_arrays();
        writeln!(w, "arrays {}", named.len())?;
        for (name, arr) in named {
            let dims: Vec<String> = arr.shape().iter().map(|d| d.to_string()).collect();
            writeln!(w, "array {name} {} {}", arr.shape().len(), dims.join(" "))?;
            for v in arr.values() {
                w.write_all(&v.to_le_bytes())?;
            }
            writeln!(w)?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Read back what [`save_checkpoint`] wrote. Fails on version mismatch,
/// truncation, or shapes inconsistent with the header config; never returns
/// partial state.
pub fn load_checkpoint(path: &Path) -> Result<(LMConfig, LMParameters, Vocabulary)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();

    let read_line = |r: &mut BufReader<File>, line: &mut String| -> Result<String> {
        line.clear();
        if r.read_line(line)? == 0 {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };

    let magic = read_line(&mut r, &mut line)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic: expected `{CHECKPOINT_MAGIC}`, got `{magic}`"
        )));
    }
    let field = |r: &mut BufReader<File>, line: &mut String, key: &str| -> Result<String> {
        let l = read_line(r, line)?;
        let (k, v) = l
            .split_once(' ')
            .ok_or_else(|| Error::Checkpoint(format!("malformed header line `{l}`")))?;
        if k != key {
            return Err(Error::Checkpoint(format!("expected `{key}`, got `{k}`")));
        }
        Ok(v.to_string())
    };
    let parse = |v: String, key: &str| -> Result<usize> {
        v.parse()
            .map_err(|_| Error::Checkpoint(format!("bad value for `{key}`: {v}")))
    };

    let num_layers = parse(field(&mut r, &mut line, "num_layers")?, "num_layers")?;
    let hidden_size = parse(field(&mut r, &mut line, "hidden_size")?, "hidden_size")?;
    let embedding_size = parse(field(&mut r, &mut line, "embedding_size")?, "embedding_size")?;
    let vocab_size = parse(field(&mut r, &mut line, "vocab_size")?, "vocab_size")?;
    let tied = field(&mut r, &mut line, "tied_output")?;
    let cfg = LMConfig {
        num_layers,
        hidden_size,
        embedding_size,
        vocab_size,
        tied_output: tied == "true",
    };
    cfg.validate()
        .map_err(|e| Error::Checkpoint(format!("invalid config in header: {e}")))?;

    let vocab_len = parse(field(&mut r, &mut line, "vocab")?, "vocab")?;
    if vocab_len != vocab_size {
        return Err(Error::Checkpoint(format!(
            "vocab listing length {vocab_len} != vocab_size {vocab_size}"
        )));
    }
    let mut tokens = Vec::with_capacity(vocab_len);
    for _ in 0..vocab_len {
        tokens.push(read_line(&mut r, &mut line)?);
    }
    if tokens.first().map(String::as_str) != Some(UNK_TOKEN)
        || tokens.get(1).map(String::as_str) != Some(EOS_TOKEN)
    {
        return Err(Error::Checkpoint("reserved tokens missing".into()));
    }
    let vocab = Vocabulary {
        index: tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect(),
        tokens,
    };

    let n_arrays = parse(field(&mut r, &mut line, "arrays")?, "arrays")?;
    let mut arrays: HashMap<String, RealArray> = HashMap::new();
    for _ in 0..n_arrays {
        let l = read_line(&mut r, &mut line)?;
        let parts: Vec<&str> = l.split(' ').collect();
        if parts.len() < 3 || parts[0] != "array" {
            return Err(Error::Checkpoint(format!("malformed array header `{l}`")));
        }
        let name = parts[1].to_string();
        let ndims: usize = parts[2]
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad ndims in `{l}`")))?;
        if parts.len() != 3 + ndims {
            return Err(Error::Checkpoint(format!("bad shape in `{l}`")));
        }
        let mut shape = Vec::with_capacity(ndims);
        for p in &parts[3..] {
            shape.push(
                p.parse()
                    .map_err(|_| Error::Checkpoint(format!("bad dim `{p}`")))?,
            );
        }
        let numel: usize = shape.iter().product();
        let mut buf = vec![0u8; numel * 8];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint(format!("truncated array `{name}`")))?;
        let values: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = RealArray::new(shape, values)
            .map_err(|e| Error::Checkpoint(format!("array `{name}`: {e}")))?;
        arrays.insert(name, arr);
        // trailing newline after the binary block
        read_line(&mut r, &mut line)?;
    }

    let mut take = |name: String, shape: Vec<usize>| -> Result<RealArray> {
        let arr = arrays
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))?;
        if arr.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: format!("checkpoint array `{name}`"),
                expected: shape,
                actual: arr.shape().to_vec(),
            });
        }
        Ok(arr)
    };

    let (v, e, h) = (cfg.vocab_size, cfg.embedding_size, cfg.hidden_size);
    let embedding = take("embedding".into(), vec![v, e])?;
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let in_dim = if l == 0 { e } else { h };
        layers.push(LayerWeights {
            w_input: take(format!("layer{l}.w_input"), vec![4 * h, in_dim])?,
            w_hidden: take(format!("layer{l}.w_hidden"), vec![4 * h, h])?,
            bias: take(format!("layer{l}.bias"), vec![4 * h])?,
        });
    }
    let out_weight = take("output.weight".into(), vec![v, h])?;
    let out_bias = take("output.bias".into(), vec![v])?;

    Ok((
        cfg,
        LMParameters {
            embedding,
            layers,
            out_weight,
            out_bias,
        },
        vocab,
    ))
}
