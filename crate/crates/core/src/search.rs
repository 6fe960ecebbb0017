//! Learning sparse interventions: Lagrangian-constrained ratio minimization
//! over a relaxed mask, a REINFORCE baseline estimator for comparison, and
//! evaluation of the discretized result.
//!
//! The training objective per instance is the probability ratio
//! `p(d) / p(t)` at the target position under the intervened forward pass,
//! plus a KL retention term over all emission steps. Two constraints are
//! enforced through multipliers ascended alongside the descent on the mask
//! locations and the baseline:
//!
//! - expected number of open units `C0 <= alpha * k`, and
//! - expected relaxed mass strictly inside `(0, 1)`, `C(0,1) <= beta`.
//!
//! `alpha` is a fraction of the unit count; the interior budget `beta` is
//! absolute. The baseline is parameterized as `b = tanh(b_raw)` so learned
//! substitution values stay in `[-1, 1]`.
//!
//! After training, the mask is discretized (`E[z] > 0.5`) and the result is
//! re-evaluated with the frozen binary mask: accuracy is the fraction of
//! evaluation instances whose ratio drops below 1.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::array::RealArray;
use crate::datagen::{Attribute, EncodedInstance, Task};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::hard_concrete::{noise_logits, HardConcreteParams};
use crate::intervention::{
    apply_mask_node, forward_with_intervention, intervened_steps, InterventionMode,
    InterventionParams, MaskSpec,
};
use crate::lstm::{run_sentence, LMConfig, LMParameters, ParamNodes, Vocabulary};

/// Probability floor inside ratio and KL computations.
pub const PROB_FLOOR: f64 = 1e-9;

/// Decay of the REINFORCE moving-average baseline.
pub const MOVING_AVERAGE_DECAY: f64 = 0.9;

/// Which form the intervention drives the model toward; fixes which member
/// of the contrast pair plays `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    ToSingular,
    ToPlural,
    ToHe,
    ToShe,
}

impl Direction {
    pub fn task(self) -> Task {
        match self {
            Direction::ToSingular | Direction::ToPlural => Task::Agreement,
            Direction::ToHe | Direction::ToShe => Task::Gender,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Direction::ToSingular => "to-singular",
            Direction::ToPlural => "to-plural",
            Direction::ToHe => "to-he",
            Direction::ToShe => "to-she",
        };
        write!(f, "{s}")
    }
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "to-singular" => Ok(Direction::ToSingular),
            "to-plural" => Ok(Direction::ToPlural),
            "to-he" => Ok(Direction::ToHe),
            "to-she" => Ok(Direction::ToShe),
            other => Err(Error::InvalidConfig(format!("unknown direction `{other}`"))),
        }
    }
}

/// Gradient estimator for the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    /// Reparameterized Hard Concrete relaxation.
    Relaxed,
    /// Score-function estimation over Bernoulli masks with a moving-average
    /// baseline.
    Reinforce,
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Estimator::Relaxed => write!(f, "relaxed"),
            Estimator::Reinforce => write!(f, "reinforce"),
        }
    }
}

impl FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relaxed" => Ok(Estimator::Relaxed),
            "reinforce" => Ok(Estimator::Reinforce),
            other => Err(Error::InvalidConfig(format!("unknown estimator `{other}`"))),
        }
    }
}

/// Search hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SearchConfig {
    /// Sparsity budget as a fraction of `k`: constraint `C0 <= alpha * k`.
    pub alpha: f64,
    /// Interior-mass budget, absolute: `C(0,1) <= beta`.
    pub beta: f64,
    /// Initial value for both multipliers.
    pub lambda_init: f64,
    /// Adaptive per-coordinate descent rate for mask locations and baseline.
    pub lr_params: f64,
    /// Ascent rate for the multipliers.
    pub lr_lambda: f64,
    pub kl_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub samples_per_step: usize,
    /// Cap on the number of training instances used by the search
    /// (deterministically subsampled); 0 means no cap.
    pub max_train_instances: usize,
    pub seed: u64,
    pub mode: InterventionMode,
    pub direction: Direction,
    pub estimator: Estimator,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            beta: 0.5,
            lambda_init: 0.0,
            lr_params: 5e-2,
            lr_lambda: 1e-2,
            kl_weight: 1.0,
            epochs: 50,
            batch_size: 32,
            samples_per_step: 1,
            max_train_instances: 1024,
            seed: 0,
            mode: InterventionMode::Single,
            direction: Direction::ToPlural,
            estimator: Estimator::Relaxed,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidConfig("alpha must be positive".into()));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::InvalidConfig("beta must lie in (0, 1]".into()));
        }
        if self.lambda_init < 0.0 {
            return Err(Error::InvalidConfig("lambda_init must be >= 0".into()));
        }
        if self.lr_params < 0.0 || self.lr_lambda < 0.0 {
            return Err(Error::InvalidConfig("learning rates must be >= 0".into()));
        }
        if self.batch_size == 0 || self.samples_per_step == 0 {
            return Err(Error::InvalidConfig("batch and sample sizes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Adam moments over the concatenated `[gamma; b_raw]` vector.
#[derive(Debug, Clone)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl AdamState {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = B1 * *m + (1.0 - B1) * g;
            *v = B2 * *v + (1.0 - B2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + EPS);
        }
    }
}

/// Mutable optimization state.
#[derive(Debug, Clone)]
pub struct SearchState {
    /// Mask location logits, length `k`.
    pub gamma: Vec<f64>,
    /// Pre-squash baseline; the substituted values are `tanh(b_raw)`.
    pub b_raw: Vec<f64>,
    /// Multiplier for the `C0` constraint, kept `>= 0`.
    pub lambda0: f64,
    /// Multiplier for the interior-mass constraint, kept `>= 0`.
    pub lambda1: f64,
    /// REINFORCE moving-average baseline.
    pub moving_avg: f64,
    pub step: usize,
    opt: AdamState,
    temperature: f64,
    stretch_lo: f64,
    stretch_hi: f64,
}

impl SearchState {
    pub fn init(k: usize, config: &SearchConfig) -> Self {
        let hc = HardConcreteParams::init_half_open(k);
        Self {
            gamma: hc.gamma.values().to_vec(),
            b_raw: vec![0.0; k],
            lambda0: config.lambda_init,
            lambda1: config.lambda_init,
            moving_avg: 0.0,
            step: 0,
            opt: AdamState::new(2 * k),
            temperature: hc.temperature,
            stretch_lo: hc.stretch_lo,
            stretch_hi: hc.stretch_hi,
        }
    }

    pub fn num_units(&self) -> usize {
        self.gamma.len()
    }

    pub fn hard_concrete(&self) -> HardConcreteParams {
        HardConcreteParams::new(
            RealArray::vector(self.gamma.clone()).expect("finite gamma"),
            self.temperature,
            self.stretch_lo,
            self.stretch_hi,
        )
        .expect("valid shape")
    }

    /// Learned baseline values in `[-1, 1]`.
    pub fn baseline(&self) -> Vec<f64> {
        self.b_raw.iter().map(|v| v.tanh()).collect()
    }

    /// Bernoulli open-probabilities used by the REINFORCE estimator.
    pub fn bernoulli_probs(&self) -> Vec<f64> {
        self.gamma.iter().map(|&g| crate::graph::sigmoid(g)).collect()
    }

    /// Update the moving-average baseline with one observed loss:
    /// `ma <- decay * (ma + loss)`. After losses 1.0 then 0.0 with decay 0.9
    /// the value reads 0.9 then 0.81.
    pub fn update_moving_average(&mut self, loss: f64) {
        self.moving_avg = MOVING_AVERAGE_DECAY * (self.moving_avg + loss);
    }
}

/// Probability ratio `p(d) / p(t)` with the floor applied to both sides.
/// Below 1 means the intervention flipped the preference.
pub fn ratio_loss(distribution: &[f64], d: u32, t: u32) -> Result<f64> {
    if d == t {
        return Err(Error::InvalidConfig("contrast pair with d == t".into()));
    }
    let pd = distribution[d as usize].max(PROB_FLOOR);
    let pt = distribution[t as usize].max(PROB_FLOOR);
    Ok(pd / pt)
}

/// Set `d` to the model-preferred member of the pair on this instance and
/// `t` to the other, reading the uninstrumented model. Exact ties resolve
/// by token id: the lower id becomes `d`.
pub fn assign_contrast(
    instance: &mut EncodedInstance,
    lm: &LMParameters,
    cfg: &LMConfig,
) -> Result<(u32, u32)> {
    let prefix = &instance.tokens[..instance.target_index()];
    let (dists, _) = run_sentence(lm, cfg, prefix, None)?;
    let dist = dists.last().expect("nonempty prefix");
    let (a, b) = (instance.d, instance.t);
    let (pa, pb) = (dist[a as usize], dist[b as usize]);
    let (d, t) = if pa > pb {
        (a, b)
    } else if pb > pa {
        (b, a)
    } else if a < b {
        (a, b)
    } else {
        (b, a)
    };
    instance.d = d;
    instance.t = t;
    Ok((d, t))
}

/// Mean forward KL over aligned steps, original distribution as reference.
pub fn kl_retention_loss(original: &[Vec<f64>], intervened: &[Vec<f64>]) -> Result<f64> {
    if original.len() != intervened.len() {
        return Err(Error::ShapeMismatch {
            op: "kl_retention_loss".into(),
            expected: vec![original.len()],
            actual: vec![intervened.len()],
        });
    }
    if original.is_empty() {
        return Err(Error::InvalidConfig("no steps to compare".into()));
    }
    let mut total = 0.0;
    for (po, pi) in original.iter().zip(intervened) {
        let mut step = 0.0;
        for (&o, &i) in po.iter().zip(pi) {
            if o > 0.0 {
                step += o * (o / i.max(PROB_FLOOR)).ln();
            }
        }
        total += step;
    }
    Ok(total / original.len() as f64)
}

/// A training or evaluation instance with its cached uninstrumented run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub instance: EncodedInstance,
    /// Per-step distributions of the original model over the instance.
    pub original: Vec<Vec<f64>>,
    /// Per-step `sum_v p log p` of the original distributions.
    entropy_terms: Vec<f64>,
}

/// Assign contrasts, filter by direction, and cache original runs.
pub fn prepare_instances(
    instances: &[EncodedInstance],
    lm: &LMParameters,
    cfg: &LMConfig,
    vocab: &Vocabulary,
    direction: Direction,
) -> Result<Vec<Prepared>> {
    let mut out = Vec::new();
    for inst in instances {
        if inst.task != direction.task() {
            continue;
        }
        let mut inst = inst.clone();
        assign_contrast(&mut inst, lm, cfg)?;
        let target = direction_target(&inst, vocab, direction)?;
        if inst.t != target {
            continue;
        }
        let inputs = &inst.tokens[..inst.tokens.len() - 1];
        let (original, _) = run_sentence(lm, cfg, inputs, None)?;
        let entropy_terms = original
            .iter()
            .map(|dist| {
                dist.iter()
                    .filter(|&&p| p > 0.0)
                    .map(|&p| p * p.ln())
                    .sum()
            })
            .collect();
        out.push(Prepared {
            instance: inst,
            original,
            entropy_terms,
        });
    }
    Ok(out)
}

/// The token the direction drives toward, for this instance's pair.
fn direction_target(
    inst: &EncodedInstance,
    vocab: &Vocabulary,
    direction: Direction,
) -> Result<u32> {
    debug_assert_eq!(inst.task, direction.task());
    match direction {
        Direction::ToHe => vocab.require("he"),
        Direction::ToShe => vocab.require("she"),
        Direction::ToSingular | Direction::ToPlural => {
            // The token at the target position is the gold form, inflected
            // per the attribute; contrast assignment may have swapped d/t
            // but never touches the sentence itself.
            let gold = inst.tokens[inst.target_index()];
            let counterpart = if inst.d == gold { inst.t } else { inst.d };
            let plural = if inst.attribute == Attribute::Plural {
                gold
            } else {
                counterpart
            };
            let singular = if plural == gold { counterpart } else { gold };
            Ok(match direction {
                Direction::ToPlural => plural,
                _ => singular,
            })
        }
    }
}

// ── Objective graph ──────────────────────────────────────────────────

struct ObjectiveNodes {
    gamma: NodeId,
    b_raw: NodeId,
    ratio: NodeId,
    kl: NodeId,
    contribution: NodeId,
}

/// Record the per-instance objective `ratio + kl_weight * kl` with the mask
/// given either as a relaxed sample of `gamma` (noise baked in) or as a
/// frozen binary constant.
#[allow(clippy::too_many_arguments)]
fn build_objective(
    g: &mut Graph,
    lm_nodes: &ParamNodes,
    cfg: &LMConfig,
    state_hc: &HardConcreteParams,
    prepared: &Prepared,
    mode: InterventionMode,
    kl_weight: f64,
    mask_source: MaskSource<'_>,
) -> Result<ObjectiveNodes> {
    let k = cfg.total_units();
    let gamma = g.input("gamma", vec![k]);
    let b_raw = g.input("b_raw", vec![k]);
    let b = g.tanh(b_raw);

    let z = match mask_source {
        MaskSource::RelaxedNoise(u) => {
            let logits = RealArray::vector(noise_logits(u))?;
            let noise = g.constant(logits);
            state_hc.sample_node(g, gamma, noise)?
        }
        MaskSource::FrozenBinary(mask) => {
            let vals: Vec<f64> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            g.constant(RealArray::vector(vals)?)
        }
    };

    let inst = &prepared.instance;
    let steps = intervened_steps(mode, inst);
    let inputs = &inst.tokens[..inst.tokens.len() - 1];
    let rolled = crate::lstm::unroll(g, lm_nodes, cfg, inputs, |g, step, h| {
        if steps.contains(&step) {
            apply_mask_node(g, h, z, b)
        } else {
            Ok(h)
        }
    })?;

    // Ratio at the target step, via the log-domain difference.
    let target_step = inst.target_index() - 1;
    let mut kl_dots = Vec::with_capacity(rolled.step_logits.len());
    let mut ratio = None;
    for (s, &logits) in rolled.step_logits.iter().enumerate() {
        let ls = g.log_softmax(logits)?;
        if s == target_step {
            let ld = g.gather(ls, inst.d as usize)?;
            let lt = g.gather(ls, inst.t as usize)?;
            let diff = g.sub(ld, lt)?;
            ratio = Some(g.exp(diff));
        }
        let po = g.constant(RealArray::vector(prepared.original[s].clone())?);
        let dot = g.mul(po, ls)?;
        kl_dots.push(g.sum(dot));
    }
    let ratio = ratio.expect("target step within range");

    // KL = mean_s [ sum_v po ln po - sum_v po ls ]
    let t_count = rolled.step_logits.len() as f64;
    let mean_entropy = prepared.entropy_terms.iter().sum::<f64>() / t_count;
    let dots = g.concat(&kl_dots)?;
    let dot_sum = g.sum(dots);
    let neg_mean_dot = g.scale(dot_sum, -1.0 / t_count);
    let kl = g.shift(neg_mean_dot, mean_entropy);

    let weighted_kl = g.scale(kl, kl_weight);
    let contribution = g.add(ratio, weighted_kl)?;

    Ok(ObjectiveNodes {
        gamma,
        b_raw,
        ratio,
        kl,
        contribution,
    })
}

enum MaskSource<'a> {
    RelaxedNoise(&'a [f64]),
    FrozenBinary(&'a [bool]),
}

/// Diagnostics of one optimizer step.
#[derive(Debug, Clone)]
pub struct StepDiagnostics {
    pub mean_ratio: f64,
    pub mean_kl: f64,
    /// Fraction of sampled evaluations in the batch with ratio < 1.
    pub flip_rate: f64,
    pub expected_c0: f64,
    pub interior_mass: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    /// Mean gamma gradient of this step (REINFORCE diagnostics).
    pub gamma_grad: Vec<f64>,
}

/// Shared context for optimizer steps.
pub struct SearchContext<'a> {
    pub lm: &'a LMParameters,
    pub cfg: &'a LMConfig,
    pub config: &'a SearchConfig,
}

fn lm_bindings(lm: &LMParameters) -> HashMap<String, RealArray> {
    let mut bound = HashMap::new();
    ParamNodes::bind(lm, &mut bound);
    bound
}

/// One descent step on `(gamma, b_raw)` and one ascent step on the
/// multipliers, over a batch, using the reparameterized relaxation with one
/// fresh mask sample per instance per sample slot.
pub fn lagrangian_step(
    state: &mut SearchState,
    ctx: &SearchContext<'_>,
    batch: &[&Prepared],
    rng: &mut ChaCha8Rng,
) -> Result<StepDiagnostics> {
    let k = state.num_units();
    let hc = state.hard_concrete();
    let alpha_budget = ctx.config.alpha * k as f64;

    let mut bound = lm_bindings(ctx.lm);
    bound.insert("gamma".into(), RealArray::vector(state.gamma.clone())?);
    bound.insert("b_raw".into(), RealArray::vector(state.b_raw.clone())?);

    let mut grad = vec![0.0; 2 * k];
    let mut sum_ratio = 0.0;
    let mut sum_kl = 0.0;
    let mut flips = 0usize;
    let mut count = 0usize;

    for prepared in batch {
        for _ in 0..ctx.config.samples_per_step {
            let u: Vec<f64> = (0..k).map(|_| rng.gen_range(1e-12..1.0 - 1e-12)).collect();
            let mut g = Graph::new();
            let lm_nodes = ParamNodes::declare(&mut g, ctx.cfg);
            let obj = build_objective(
                &mut g,
                &lm_nodes,
                ctx.cfg,
                &hc,
                prepared,
                ctx.config.mode,
                ctx.config.kl_weight,
                MaskSource::RelaxedNoise(&u),
            )?;
            let eval = g.evaluate(&bound)?;
            let ratio_val = eval.scalar(obj.ratio);
            let kl_val = eval.scalar(obj.kl);
            if !ratio_val.is_finite() || !kl_val.is_finite() {
                return Err(Error::Numerical(format!(
                    "objective diverged at step {}",
                    state.step
                )));
            }
            sum_ratio += ratio_val;
            sum_kl += kl_val;
            if ratio_val < 1.0 {
                flips += 1;
            }
            count += 1;

            let grads = eval.backward(obj.contribution, &[obj.gamma, obj.b_raw])?;
            for (acc, gv) in grad[..k].iter_mut().zip(grads.get(obj.gamma)) {
                *acc += gv;
            }
            for (acc, gv) in grad[k..].iter_mut().zip(grads.get(obj.b_raw)) {
                *acc += gv;
            }
        }
    }

    let inv = 1.0 / count.max(1) as f64;
    for gv in grad.iter_mut() {
        *gv *= inv;
    }

    // Constraint penalties: lambda0 * (C0 - alpha k) + lambda1 * (C01 - beta),
    // closed-form in gamma.
    let c0_value = hc.expected_c0();
    let interior_value = hc.interior_mass();
    {
        let mut g = Graph::new();
        let gamma = g.input("gamma", vec![k]);
        let c0 = hc.expected_c0_node(&mut g, gamma);
        let interior = hc.interior_mass_node(&mut g, gamma)?;
        let sc0 = g.scale(c0, state.lambda0);
        let si = g.scale(interior, state.lambda1);
        let penalty = g.add(sc0, si)?;
        let pbound: HashMap<String, RealArray> =
            [("gamma".to_string(), RealArray::vector(state.gamma.clone())?)].into();
        let eval = g.evaluate(&pbound)?;
        let grads = eval.backward(penalty, &[gamma])?;
        for (acc, gv) in grad[..k].iter_mut().zip(grads.get(gamma)) {
            *acc += gv;
        }
    }

    // Descent on (gamma, b_raw); ascent on the multipliers, clipped at zero.
    let mut theta: Vec<f64> = state.gamma.iter().chain(&state.b_raw).cloned().collect();
    state.opt.update(&mut theta, &grad, ctx.config.lr_params);
    state.gamma.copy_from_slice(&theta[..k]);
    state.b_raw.copy_from_slice(&theta[k..]);

    // Ascend on the per-unit-normalized violation so the multiplier scale
    // does not grow with k.
    state.lambda0 = (state.lambda0
        + ctx.config.lr_lambda * (c0_value - alpha_budget) / k as f64)
        .max(0.0);
    state.lambda1 = (state.lambda1
        + ctx.config.lr_lambda * (interior_value - ctx.config.beta) / k as f64)
        .max(0.0);
    state.step += 1;

    Ok(StepDiagnostics {
        mean_ratio: sum_ratio * inv,
        mean_kl: sum_kl * inv,
        flip_rate: flips as f64 / count.max(1) as f64,
        expected_c0: c0_value,
        interior_mass: interior_value,
        lambda0: state.lambda0,
        lambda1: state.lambda1,
        gamma_grad: grad[..k].to_vec(),
    })
}

/// The score-function gradient contribution for one Bernoulli mask sample:
/// `(loss - baseline) * (m - p)` per unit.
pub fn score_function_gradient(
    probs: &[f64],
    mask: &[bool],
    loss: f64,
    baseline: f64,
) -> Vec<f64> {
    probs
        .iter()
        .zip(mask)
        .map(|(&p, &m)| (loss - baseline) * (if m { 1.0 } else { 0.0 } - p))
        .collect()
}

/// One REINFORCE step: Bernoulli masks with probabilities `sigmoid(gamma)`,
/// score-function gradient for `gamma` with the moving-average baseline,
/// pathwise gradient for the continuous `b`. The sparsity penalty
/// `lambda0 * (sum_j sigmoid(gamma_j) - alpha k)` is differentiated exactly;
/// there is no interior constraint for exact binary masks.
pub fn reinforce_step(
    state: &mut SearchState,
    ctx: &SearchContext<'_>,
    batch: &[&Prepared],
    rng: &mut ChaCha8Rng,
) -> Result<StepDiagnostics> {
    let k = state.num_units();
    let hc = state.hard_concrete();
    let alpha_budget = ctx.config.alpha * k as f64;
    let probs = state.bernoulli_probs();
    let expected_units: f64 = probs.iter().sum();

    let mut bound = lm_bindings(ctx.lm);
    bound.insert("gamma".into(), RealArray::vector(state.gamma.clone())?);
    bound.insert("b_raw".into(), RealArray::vector(state.b_raw.clone())?);

    let mut grad = vec![0.0; 2 * k];
    let mut sum_ratio = 0.0;
    let mut sum_kl = 0.0;
    let mut sum_loss = 0.0;
    let mut flips = 0usize;
    let mut count = 0usize;

    for prepared in batch {
        for _ in 0..ctx.config.samples_per_step {
            let mask: Vec<bool> = probs.iter().map(|&p| rng.gen_range(0.0..1.0) < p).collect();
            let mut g = Graph::new();
            let lm_nodes = ParamNodes::declare(&mut g, ctx.cfg);
            let obj = build_objective(
                &mut g,
                &lm_nodes,
                ctx.cfg,
                &hc,
                prepared,
                ctx.config.mode,
                ctx.config.kl_weight,
                MaskSource::FrozenBinary(&mask),
            )?;
            let eval = g.evaluate(&bound)?;
            let ratio_val = eval.scalar(obj.ratio);
            let kl_val = eval.scalar(obj.kl);
            let loss = eval.scalar(obj.contribution);
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "objective diverged at step {}",
                    state.step
                )));
            }
            sum_ratio += ratio_val;
            sum_kl += kl_val;
            sum_loss += loss;
            if ratio_val < 1.0 {
                flips += 1;
            }
            count += 1;

            let score = score_function_gradient(&probs, &mask, loss, state.moving_avg);
            for (acc, sv) in grad[..k].iter_mut().zip(&score) {
                *acc += sv;
            }
            let grads = eval.backward(obj.contribution, &[obj.b_raw])?;
            for (acc, gv) in grad[k..].iter_mut().zip(grads.get(obj.b_raw)) {
                *acc += gv;
            }
        }
    }

    let inv = 1.0 / count.max(1) as f64;
    for gv in grad.iter_mut() {
        *gv *= inv;
    }
    // Pathwise sparsity penalty: d/dgamma lambda0 * sum sigmoid(gamma).
    for (acc, &p) in grad[..k].iter_mut().zip(&probs) {
        *acc += state.lambda0 * p * (1.0 - p);
    }

    let mut theta: Vec<f64> = state.gamma.iter().chain(&state.b_raw).cloned().collect();
    state.opt.update(&mut theta, &grad, ctx.config.lr_params);
    state.gamma.copy_from_slice(&theta[..k]);
    state.b_raw.copy_from_slice(&theta[k..]);

    state.lambda0 = (state.lambda0
        + ctx.config.lr_lambda * (expected_units - alpha_budget) / k as f64)
        .max(0.0);
    state.step += 1;
    state.update_moving_average(sum_loss * inv);

    Ok(StepDiagnostics {
        mean_ratio: sum_ratio * inv,
        mean_kl: sum_kl * inv,
        flip_rate: flips as f64 / count.max(1) as f64,
        expected_c0: expected_units,
        interior_mass: 0.0,
        lambda0: state.lambda0,
        lambda1: state.lambda1,
        gamma_grad: grad[..k].to_vec(),
    })
}

// ── Evaluation and the driver ────────────────────────────────────────

/// Metrics of a frozen (binary mask + fixed baseline) intervention over a
/// prepared evaluation set.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvalMetrics {
    /// Fraction of instances with post-intervention ratio < 1.
    pub accuracy: f64,
    /// Mean per-instance KL to the original model, all steps.
    pub mean_kl: f64,
    /// Number of open units in the mask.
    pub units: usize,
}

/// Evaluate a frozen mask/baseline pair.
pub fn evaluate_frozen(
    lm: &LMParameters,
    cfg: &LMConfig,
    mask: &[bool],
    baseline: &[f64],
    mode: InterventionMode,
    eval: &[Prepared],
) -> Result<EvalMetrics> {
    if eval.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let params = InterventionParams::new(
        MaskSpec::Binary(mask.to_vec()),
        RealArray::vector(baseline.to_vec())?,
        mode,
    )?;
    let mask_values = params.mask.binary_values().expect("binary mask");
    let mut flips = 0usize;
    let mut kl_total = 0.0;
    for prepared in eval {
        let (target, trace) =
            forward_with_intervention(lm, cfg, &params, &prepared.instance, &mask_values)?;
        let ratio = ratio_loss(&target, prepared.instance.d, prepared.instance.t)?;
        if ratio < 1.0 {
            flips += 1;
        }
        let intervened: Vec<Vec<f64>> =
            trace.steps.iter().map(|s| s.distribution.clone()).collect();
        kl_total += kl_retention_loss(&prepared.original, &intervened)?;
    }
    Ok(EvalMetrics {
        accuracy: flips as f64 / eval.len() as f64,
        mean_kl: kl_total / eval.len() as f64,
        units: mask.iter().filter(|&&m| m).count(),
    })
}

impl SearchResult {
    /// Rebuild the frozen binary mask and baseline vector this result
    /// describes, for re-evaluation or tracing. Units not selected carry a
    /// zero baseline, which the zero mask entry makes irrelevant.
    pub fn frozen(&self, k: usize) -> (Vec<bool>, Vec<f64>) {
        let mut mask = vec![false; k];
        let mut baseline = vec![0.0; k];
        for (&unit, &b) in self.unit_ids.iter().zip(&self.baselines) {
            mask[unit] = true;
            baseline[unit] = b;
        }
        (mask, baseline)
    }
}

/// Outcome of one search run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SearchResult {
    pub run_id: usize,
    pub config: SearchConfig,
    /// Discovered unit ids in concatenated-layer indexing.
    pub unit_ids: Vec<usize>,
    /// Learned baseline values at the discovered units.
    pub baselines: Vec<f64>,
    pub accuracy: f64,
    pub units: usize,
    pub mean_kl: f64,
    /// Epochs actually run (early stopping may cut the budget).
    pub epochs_run: usize,
    pub steps: usize,
    pub wall_seconds: f64,
    /// Set when the discretized mask is empty.
    pub degenerate: bool,
    /// Set when the discretized unit count exceeds the `alpha * k` budget.
    pub budget_exceeded: bool,
    /// Training instances used after direction filtering and subsampling.
    pub train_instances: usize,
    /// Evaluation instances after direction filtering.
    pub eval_instances: usize,
}

/// Run the full search: assign contrasts, filter by direction, optimize,
/// discretize, and evaluate the frozen mask on the evaluation split.
pub fn run_search(
    lm: &LMParameters,
    cfg: &LMConfig,
    vocab: &Vocabulary,
    train: &[EncodedInstance],
    eval: &[EncodedInstance],
    config: &SearchConfig,
) -> Result<SearchResult> {
    config.validate()?;
    let started = Instant::now();
    let k = cfg.total_units();

    let mut prepared_train = prepare_instances(train, lm, cfg, vocab, config.direction)?;
    let prepared_eval = prepare_instances(eval, lm, cfg, vocab, config.direction)?;
    if prepared_train.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "no training instances match direction {}",
            config.direction
        )));
    }
    if prepared_eval.is_empty() {
        return Err(Error::EmptyEvalSet);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    if config.max_train_instances > 0 && prepared_train.len() > config.max_train_instances {
        shuffle(&mut prepared_train, &mut rng);
        prepared_train.truncate(config.max_train_instances);
    }

    let mut state = SearchState::init(k, config);
    let ctx = SearchContext {
        lm,
        cfg,
        config,
    };

    let mut epochs_run = 0;
    let mut stable_epochs = 0;
    let mut prev_flip: Option<f64> = None;
    let mut prev_c0: Option<f64> = None;

    for _epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..prepared_train.len()).collect();
        shuffle(&mut order, &mut rng);

        let mut epoch_flip = 0.0;
        let mut epoch_batches = 0usize;
        let mut last_c0 = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &prepared_train[i]).collect();
            let diag = match config.estimator {
                Estimator::Relaxed => lagrangian_step(&mut state, &ctx, &batch, &mut rng)?,
                Estimator::Reinforce => reinforce_step(&mut state, &ctx, &batch, &mut rng)?,
            };
            epoch_flip += diag.flip_rate;
            last_c0 = diag.expected_c0;
            epoch_batches += 1;
        }
        epochs_run += 1;
        let flip = epoch_flip / epoch_batches.max(1) as f64;

        let stable = match (prev_flip, prev_c0) {
            (Some(pf), Some(pc)) => (flip - pf).abs() <= 0.01 && (last_c0 - pc).abs() <= 0.1,
            _ => false,
        };
        stable_epochs = if stable { stable_epochs + 1 } else { 0 };
        prev_flip = Some(flip);
        prev_c0 = Some(last_c0);
        if stable_epochs >= 5 {
            break;
        }
    }

    // Discretize and evaluate with the frozen mask.
    let mask = match config.estimator {
        Estimator::Relaxed => state.hard_concrete().discretize(config.seed ^ 0xd15c, 10_000),
        // Bernoulli expectation is sigmoid(gamma) itself.
        Estimator::Reinforce => {
            crate::hard_concrete::discretize_from_expected(&state.bernoulli_probs())
        }
    };
    let baseline = state.baseline();
    let metrics = evaluate_frozen(lm, cfg, &mask, &baseline, config.mode, &prepared_eval)?;

    let unit_ids: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(j, _)| j)
        .collect();
    let baselines = unit_ids.iter().map(|&j| baseline[j]).collect();

    Ok(SearchResult {
        run_id: 0,
        config: config.clone(),
        degenerate: unit_ids.is_empty(),
        budget_exceeded: (unit_ids.len() as f64) > config.alpha * k as f64,
        unit_ids,
        baselines,
        accuracy: metrics.accuracy,
        units: metrics.units,
        mean_kl: metrics.mean_kl,
        epochs_run,
        steps: state.step,
        wall_seconds: started.elapsed().as_secs_f64(),
        train_instances: prepared_train.len(),
        eval_instances: prepared_eval.len(),
    })
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Finite-difference check of the full search objective against the
/// recorded gradients, with common random numbers (the mask noise is baked
/// into the record, so both sides of every difference see the same draw).
/// Noise is drawn away from the rectification kinks. Returns the max
/// relative error over the mask locations and the raw baseline.
pub fn objective_gradient_check(
    lm: &LMParameters,
    cfg: &LMConfig,
    prepared: &Prepared,
    config: &SearchConfig,
    epsilon: f64,
) -> Result<f64> {
    let k = cfg.total_units();
    let state = SearchState::init(k, config);
    let hc = state.hard_concrete();

    // Rejection-sample noise whose pre-rectification value keeps a margin
    // from both clamp kinks, so central differences stay valid.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xfd);
    let span = hc.stretch_hi - hc.stretch_lo;
    let noise: Vec<f64> = (0..k)
        .map(|j| loop {
            let u: f64 = rng.gen_range(0.02..0.98);
            let logit = (u.ln() - (1.0 - u).ln() + state.gamma[j]) / hc.temperature;
            let pre = crate::graph::sigmoid(logit) * span + hc.stretch_lo;
            if pre.abs() > 1e-3 && (pre - crate::hard_concrete::UPPER_CAP).abs() > 1e-3 {
                break u;
            }
        })
        .collect();

    let mut g = Graph::new();
    let lm_nodes = ParamNodes::declare(&mut g, cfg);
    let obj = build_objective(
        &mut g,
        &lm_nodes,
        cfg,
        &hc,
        prepared,
        config.mode,
        config.kl_weight,
        MaskSource::RelaxedNoise(&noise),
    )?;
    let mut bound = lm_bindings(lm);
    bound.insert("gamma".into(), RealArray::vector(state.gamma.clone())?);
    bound.insert("b_raw".into(), RealArray::vector(state.b_raw.clone())?);

    let err_gamma = crate::graph::finite_difference_check(
        &g,
        &bound,
        obj.contribution,
        obj.gamma,
        "gamma",
        epsilon,
    )?;
    let err_b = crate::graph::finite_difference_check(
        &g,
        &bound,
        obj.contribution,
        obj.b_raw,
        "b_raw",
        epsilon,
    )?;
    Ok(err_gamma.max(err_b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{
        generate_agreement_corpus, task_vocabulary, LexiconPools, SentenceInstance,
    };
    use crate::lstm::LayerWeights;

    fn agreement_fixture(
        n_train: usize,
        n_eval: usize,
    ) -> (
        LMParameters,
        LMConfig,
        Vocabulary,
        Vec<EncodedInstance>,
        Vec<EncodedInstance>,
    ) {
        let pools = LexiconPools::default();
        let vocab = task_vocabulary(&pools, Task::Agreement);
        let cfg = LMConfig::new(8, 8, vocab.len()).unwrap();
        let params = LMParameters::init(&cfg, 7);
        let (train, eval) = generate_agreement_corpus(&pools, 21, n_train, n_eval).unwrap();
        let enc = |v: Vec<SentenceInstance>, vocab: &Vocabulary| -> Vec<EncodedInstance> {
            v.iter().map(|i| i.encode(vocab).unwrap()).collect()
        };
        let train = enc(train, &vocab);
        let eval = enc(eval, &vocab);
        (params, cfg, vocab, train, eval)
    }

    /// An LM whose output is a fixed distribution regardless of input:
    /// all weights zero except the output bias.
    fn rigged_lm(cfg: &LMConfig, bias: &[(usize, f64)]) -> LMParameters {
        let h = cfg.hidden_size;
        let mut out_bias = vec![0.0; cfg.vocab_size];
        for &(idx, v) in bias {
            out_bias[idx] = v;
        }
        LMParameters {
            embedding: RealArray::zeros(vec![cfg.vocab_size, cfg.embedding_size]),
            layers: vec![
                LayerWeights {
                    w_input: RealArray::zeros(vec![4 * h, cfg.embedding_size]),
                    w_hidden: RealArray::zeros(vec![4 * h, h]),
                    bias: RealArray::zeros(vec![4 * h]),
                },
                LayerWeights {
                    w_input: RealArray::zeros(vec![4 * h, h]),
                    w_hidden: RealArray::zeros(vec![4 * h, h]),
                    bias: RealArray::zeros(vec![4 * h]),
                },
            ],
            out_weight: RealArray::zeros(vec![cfg.vocab_size, h]),
            out_bias: RealArray::vector(out_bias).unwrap(),
        }
    }

    #[test]
    fn ratio_loss_arithmetic() {
        let mut dist = vec![0.0; 4];
        dist[1] = 0.6;
        dist[2] = 0.3;
        assert_eq!(ratio_loss(&dist, 1, 2).unwrap(), 2.0);
        dist[2] = 0.6;
        assert_eq!(ratio_loss(&dist, 1, 2).unwrap(), 1.0);
        dist[1] = 0.1;
        dist[2] = 0.4;
        assert_eq!(ratio_loss(&dist, 1, 2).unwrap(), 0.25);
        assert!(ratio_loss(&dist, 1, 1).is_err());
    }

    #[test]
    fn ratio_loss_survives_zero_probability() {
        let mut dist = vec![0.0; 3];
        dist[0] = 1.0;
        let r = ratio_loss(&dist, 0, 1).unwrap();
        assert!(r.is_finite() && r > 1e6);
    }

    #[test]
    fn assign_contrast_follows_model_preference() {
        let (_, cfg, vocab, train, _) = agreement_fixture(4, 2);
        let mut inst = train[0].clone();
        let (a, b) = (inst.d, inst.t);

        let prefer_a = rigged_lm(&cfg, &[(a as usize, 5.0)]);
        assign_contrast(&mut inst, &prefer_a, &cfg).unwrap();
        assert_eq!((inst.d, inst.t), (a, b));

        let prefer_b = rigged_lm(&cfg, &[(b as usize, 5.0)]);
        assign_contrast(&mut inst, &prefer_b, &cfg).unwrap();
        assert_eq!((inst.d, inst.t), (b, a));

        // exact tie: the lower token id becomes d
        let uniform = rigged_lm(&cfg, &[]);
        assign_contrast(&mut inst, &uniform, &cfg).unwrap();
        assert_eq!(inst.d, a.min(b));
        assert_eq!(inst.t, a.max(b));
        let _ = vocab;
    }

    #[test]
    fn kl_identical_distributions_is_exactly_zero() {
        let p = vec![vec![0.25, 0.25, 0.5], vec![0.9, 0.05, 0.05]];
        assert_eq!(kl_retention_loss(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_single_step_example() {
        let po = vec![vec![0.5, 0.5]];
        let pi = vec![vec![0.9, 0.1]];
        let kl = kl_retention_loss(&po, &pi).unwrap();
        let expected = 0.5 * (0.5_f64 / 0.9).ln() + 0.5 * (0.5_f64 / 0.1).ln();
        assert!((kl - expected).abs() < 1e-12);
        assert!((kl - 0.5108).abs() < 1e-4);
    }

    #[test]
    fn kl_is_nonnegative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.gen_range(2..8);
            let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
                let sum: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / sum).collect()
            };
            let po = vec![draw(&mut rng)];
            let pi = vec![draw(&mut rng)];
            assert!(kl_retention_loss(&po, &pi).unwrap() >= -1e-9);
        }
    }

    #[test]
    fn moving_average_recursion() {
        let config = SearchConfig::default();
        let mut state = SearchState::init(4, &config);
        state.update_moving_average(1.0);
        assert!((state.moving_avg - 0.9).abs() < 1e-15);
        state.update_moving_average(0.0);
        assert!((state.moving_avg - 0.81).abs() < 1e-15);
    }

    #[test]
    fn lambda_ascends_when_constraint_violated() {
        let (lm, cfg, vocab, train, _) = agreement_fixture(8, 2);
        let config = SearchConfig {
            lr_params: 0.0,
            max_train_instances: 0,
            ..SearchConfig::default()
        };
        let prepared =
            prepare_instances(&train, &lm, &cfg, &vocab, Direction::ToPlural).unwrap();
        assert!(!prepared.is_empty());
        let mut state = SearchState::init(cfg.total_units(), &config);
        let ctx = SearchContext {
            lm: &lm,
            cfg: &cfg,
            config: &config,
        };
        // Default init: every unit at P(nonzero) = 0.5, so C0 = k/2 far
        // above the budget; lambda0 must strictly increase.
        let before = state.lambda0;
        let batch: Vec<&Prepared> = prepared.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let diag = lagrangian_step(&mut state, &ctx, &batch, &mut rng).unwrap();
        assert!(diag.expected_c0 > config.alpha * cfg.total_units() as f64);
        assert!(state.lambda0 > before);
    }

    #[test]
    fn lambda_descends_toward_zero_when_satisfied() {
        let (lm, cfg, vocab, train, _) = agreement_fixture(8, 2);
        let config = SearchConfig {
            lr_params: 0.0,
            lambda_init: 0.05,
            max_train_instances: 0,
            ..SearchConfig::default()
        };
        let prepared =
            prepare_instances(&train, &lm, &cfg, &vocab, Direction::ToPlural).unwrap();
        let mut state = SearchState::init(cfg.total_units(), &config);
        // Close every unit: C0 near zero, far below the budget.
        for gv in state.gamma.iter_mut() {
            *gv = -20.0;
        }
        let ctx = SearchContext {
            lm: &lm,
            cfg: &cfg,
            config: &config,
        };
        let batch: Vec<&Prepared> = prepared.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        lagrangian_step(&mut state, &ctx, &batch, &mut rng).unwrap();
        assert!(state.lambda0 < 0.05);
        assert!(state.lambda0 >= 0.0);
        // Drive it into the clip.
        for _ in 0..200 {
            lagrangian_step(&mut state, &ctx, &batch, &mut rng).unwrap();
        }
        assert_eq!(state.lambda0, 0.0);
    }

    #[test]
    fn zero_learning_rates_leave_state_unchanged() {
        let (lm, cfg, vocab, train, _) = agreement_fixture(6, 2);
        let config = SearchConfig {
            lr_params: 0.0,
            lr_lambda: 0.0,
            max_train_instances: 0,
            ..SearchConfig::default()
        };
        let prepared =
            prepare_instances(&train, &lm, &cfg, &vocab, Direction::ToPlural).unwrap();
        let mut state = SearchState::init(cfg.total_units(), &config);
        let (g0, b0, l0, l1) = (
            state.gamma.clone(),
            state.b_raw.clone(),
            state.lambda0,
            state.lambda1,
        );
        let ctx = SearchContext {
            lm: &lm,
            cfg: &cfg,
            config: &config,
        };
        let batch: Vec<&Prepared> = prepared.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        lagrangian_step(&mut state, &ctx, &batch, &mut rng).unwrap();
        assert_eq!(state.gamma, g0);
        assert_eq!(state.b_raw, b0);
        assert_eq!(state.lambda0, l0);
        assert_eq!(state.lambda1, l1);
    }

    #[test]
    fn score_function_estimator_is_unbiased_on_constant_loss() {
        // Constant loss surface: the expected gamma gradient is zero.
        let probs = vec![0.4, 0.7];
        let loss = 2.5;
        let baseline = 0.3;
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut mean = vec![0.0; 2];
        for _ in 0..n {
            let mask: Vec<bool> = probs.iter().map(|&p| rng.gen_range(0.0..1.0) < p).collect();
            let g = score_function_gradient(&probs, &mask, loss, baseline);
            for (m, gv) in mean.iter_mut().zip(&g) {
                *m += gv;
            }
        }
        for (j, m) in mean.iter_mut().enumerate() {
            *m /= n as f64;
            let se = (loss - baseline).abs()
                * (probs[j] * (1.0 - probs[j]) / n as f64).sqrt();
            assert!(
                m.abs() < 3.0 * se,
                "unit {j}: mean grad {m} exceeds 3 se {se}"
            );
        }
    }

    #[test]
    fn reinforce_solves_single_unit_toy() {
        // Masking unit 0 yields loss 0, leaving it yields loss 1:
        // sigma(gamma) must converge to 1.
        let mut gamma = vec![0.0];
        let mut opt = AdamState::new(1);
        let mut ma = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..3000 {
            let p = crate::graph::sigmoid(gamma[0]);
            let mask = vec![rng.gen_range(0.0..1.0) < p];
            let loss = if mask[0] { 0.0 } else { 1.0 };
            let grad = score_function_gradient(&[p], &mask, loss, ma);
            opt.update(&mut gamma, &grad, 0.05);
            ma = MOVING_AVERAGE_DECAY * (ma + loss);
        }
        assert!(
            crate::graph::sigmoid(gamma[0]) > 0.95,
            "sigma(gamma) = {}",
            crate::graph::sigmoid(gamma[0])
        );
    }

    #[test]
    fn direction_filter_partitions_agreement_instances() {
        let (lm, cfg, vocab, train, _) = agreement_fixture(30, 2);
        let plural = prepare_instances(&train, &lm, &cfg, &vocab, Direction::ToPlural).unwrap();
        let singular =
            prepare_instances(&train, &lm, &cfg, &vocab, Direction::ToSingular).unwrap();
        assert_eq!(plural.len() + singular.len(), train.len());
        // gender directions never match agreement pairs
        let she = prepare_instances(&train, &lm, &cfg, &vocab, Direction::ToShe).unwrap();
        assert!(she.is_empty());
    }

    #[test]
    fn zero_mask_evaluation_has_zero_accuracy_and_zero_kl() {
        let (lm, cfg, vocab, _, eval) = agreement_fixture(4, 20);
        let prepared = prepare_instances(&eval, &lm, &cfg, &vocab, Direction::ToPlural).unwrap();
        let k = cfg.total_units();
        let metrics = evaluate_frozen(
            &lm,
            &cfg,
            &vec![false; k],
            &vec![0.0; k],
            InterventionMode::Every,
            &prepared,
        )
        .unwrap();
        assert_eq!(metrics.accuracy, 0.0);
        assert_eq!(metrics.mean_kl, 0.0);
        assert_eq!(metrics.units, 0);
    }

    #[test]
    fn full_mask_reports_unit_count_for_budget_bookkeeping() {
        let (lm, cfg, vocab, _, eval) = agreement_fixture(4, 8);
        let prepared = prepare_instances(&eval, &lm, &cfg, &vocab, Direction::ToPlural).unwrap();
        let k = cfg.total_units();
        let metrics = evaluate_frozen(
            &lm,
            &cfg,
            &vec![true; k],
            &vec![0.1; k],
            InterventionMode::Every,
            &prepared,
        )
        .unwrap();
        assert_eq!(metrics.units, k);
        let config = SearchConfig::default();
        assert!(metrics.units as f64 > config.alpha * k as f64);
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        let (lm, cfg, vocab, train, _) = agreement_fixture(10, 2);
        for mode in [InterventionMode::Single, InterventionMode::Every] {
            let config = SearchConfig {
                mode,
                ..SearchConfig::default()
            };
            let mut prepared =
                prepare_instances(&train, &lm, &cfg, &vocab, Direction::ToPlural).unwrap();
            if prepared.is_empty() {
                prepared =
                    prepare_instances(&train, &lm, &cfg, &vocab, Direction::ToSingular).unwrap();
            }
            let err =
                objective_gradient_check(&lm, &cfg, &prepared[0], &config, 1e-4).unwrap();
            assert!(err < 1e-3, "mode {mode}: fd error {err}");
        }
    }

    #[test]
    fn run_search_smoke_and_determinism() {
        let (lm, cfg, vocab, train, eval) = agreement_fixture(24, 12);
        let config = SearchConfig {
            epochs: 3,
            batch_size: 8,
            max_train_instances: 16,
            ..SearchConfig::default()
        };
        let r1 = run_search(&lm, &cfg, &vocab, &train, &eval, &config).unwrap();
        let r2 = run_search(&lm, &cfg, &vocab, &train, &eval, &config).unwrap();
        assert_eq!(r1.unit_ids, r2.unit_ids);
        assert_eq!(r1.accuracy, r2.accuracy);
        assert_eq!(r1.baselines, r2.baselines);
        assert_eq!(r1.units, r1.unit_ids.len());
        assert!(r1.accuracy >= 0.0 && r1.accuracy <= 1.0);
        assert!(r1.steps > 0);
        assert_eq!(r1.degenerate, r1.unit_ids.is_empty());
    }

    #[test]
    fn run_search_rejects_unmatched_direction() {
        let (lm, cfg, vocab, train, eval) = agreement_fixture(6, 3);
        let config = SearchConfig {
            direction: Direction::ToShe,
            ..SearchConfig::default()
        };
        assert!(run_search(&lm, &cfg, &vocab, &train, &eval, &config).is_err());
    }

    fn result_with_units(units: &[usize]) -> SearchResult {
        SearchResult {
            run_id: 0,
            config: SearchConfig::default(),
            unit_ids: units.to_vec(),
            baselines: units.iter().map(|&u| u as f64 / 100.0).collect(),
            accuracy: 0.9,
            units: units.len(),
            mean_kl: 0.01,
            epochs_run: 1,
            steps: 1,
            wall_seconds: 0.0,
            degenerate: units.is_empty(),
            budget_exceeded: false,
            train_instances: 10,
            eval_instances: 10,
        }
    }

    #[test]
    fn aggregate_single_run_is_all_full_prevalence() {
        let agg = aggregate_runs(&[result_with_units(&[3, 9])]).unwrap();
        assert_eq!(agg.rows.len(), 2);
        assert!(agg.rows.iter().all(|r| r.prevalence == 1.0));
    }

    #[test]
    fn aggregate_prevalence_fraction() {
        // a unit selected in 11 of 25 runs sits at 44%
        let mut results = Vec::new();
        for i in 0..25 {
            if i < 11 {
                results.push(result_with_units(&[5]));
            } else {
                results.push(result_with_units(&[6]));
            }
        }
        let agg = aggregate_runs(&results).unwrap();
        let row = agg.rows.iter().find(|r| r.unit == 5).unwrap();
        assert!((row.prevalence - 0.44).abs() < 1e-12);
    }

    #[test]
    fn aggregate_disjoint_runs_split_half() {
        let agg =
            aggregate_runs(&[result_with_units(&[1, 2]), result_with_units(&[3, 4])]).unwrap();
        assert_eq!(agg.rows.len(), 4);
        assert!(agg.rows.iter().all(|r| (r.prevalence - 0.5).abs() < 1e-12));
        assert!(aggregate_runs(&[]).is_err());
    }
}

// ── Aggregation across runs ──────────────────────────────────────────

/// Per-unit prevalence and baseline statistics across runs of one direction.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PrevalenceRow {
    pub unit: usize,
    /// Fraction of runs that selected this unit.
    pub prevalence: f64,
    pub mean_baseline: f64,
    pub std_baseline: f64,
    pub runs_selecting: usize,
}

/// Aggregate of several [`SearchResult`]s.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunAggregate {
    pub runs: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_units: f64,
    pub std_units: f64,
    pub mean_kl: f64,
    /// Sorted by descending prevalence, then unit id.
    pub rows: Vec<PrevalenceRow>,
}

/// Prevalence table over independent runs: how often each unit is selected,
/// with mean and standard deviation of its learned baseline.
pub fn aggregate_runs(results: &[SearchResult]) -> Result<RunAggregate> {
    if results.is_empty() {
        return Err(Error::InvalidConfig("no runs to aggregate".into()));
    }
    let n = results.len() as f64;
    let mut per_unit: HashMap<usize, Vec<f64>> = HashMap::new();
    for res in results {
        for (&unit, &b) in res.unit_ids.iter().zip(&res.baselines) {
            per_unit.entry(unit).or_default().push(b);
        }
    }
    let mut rows: Vec<PrevalenceRow> = per_unit
        .into_iter()
        .map(|(unit, baselines)| {
            let count = baselines.len();
            let mean = baselines.iter().sum::<f64>() / count as f64;
            let var = baselines
                .iter()
                .map(|b| (b - mean) * (b - mean))
                .sum::<f64>()
                / count as f64;
            PrevalenceRow {
                unit,
                prevalence: count as f64 / n,
                mean_baseline: mean,
                std_baseline: var.sqrt(),
                runs_selecting: count,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        b.prevalence
            .partial_cmp(&a.prevalence)
            .unwrap()
            .then(a.unit.cmp(&b.unit))
    });

    let mean = |f: &dyn Fn(&SearchResult) -> f64| results.iter().map(|r| f(r)).sum::<f64>() / n;
    let std = |f: &dyn Fn(&SearchResult) -> f64, mu: f64| {
        (results.iter().map(|r| (f(r) - mu) * (f(r) - mu)).sum::<f64>() / n).sqrt()
    };
    let acc = mean(&|r| r.accuracy);
    let units = mean(&|r| r.units as f64);
    Ok(RunAggregate {
        runs: results.len(),
        mean_accuracy: acc,
        std_accuracy: std(&|r| r.accuracy, acc),
        mean_units: units,
        std_units: std(&|r| r.units as f64, units),
        mean_kl: mean(&|r| r.mean_kl),
        rows,
    })
}
