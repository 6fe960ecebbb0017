//! Applying a mask/baseline substitution to the language model's hidden
//! states, in single-step or every-step mode.
//!
//! The substitution is `h_hat = (1 - m) * h + m * b` elementwise over the
//! `k` concatenated hidden units: where the mask is zero the unit is
//! untouched, where it is one the unit's activation becomes the learned
//! baseline value. The altered state feeds both the output projection and
//! the recurrence, so one substitution propagates to every later step.
//! Cell states are never modified.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use crate::array::RealArray;
use crate::datagen::EncodedInstance;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::hard_concrete::HardConcreteParams;
use crate::lstm::{run_sentence, LMConfig, LMParameters};

/// Where the substitution applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterventionMode {
    /// Only at the instance's annotated position `i`.
    Single,
    /// At every step `1..n-1`, with the same mask and baseline.
    Every,
}

impl fmt::Display for InterventionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InterventionMode::Single => write!(f, "single"),
            InterventionMode::Every => write!(f, "every"),
        }
    }
}

impl FromStr for InterventionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(InterventionMode::Single),
            "every" => Ok(InterventionMode::Every),
            other => Err(Error::InvalidConfig(format!("unknown mode `{other}`"))),
        }
    }
}

/// Mask distribution during training, or a frozen binary mask after
/// discretization.
#[derive(Debug, Clone)]
pub enum MaskSpec {
    Relaxed(HardConcreteParams),
    Binary(Vec<bool>),
}

impl MaskSpec {
    pub fn num_units(&self) -> usize {
        match self {
            MaskSpec::Relaxed(p) => p.num_units(),
            MaskSpec::Binary(m) => m.len(),
        }
    }

    /// Binary mask as mask values.
    pub fn binary_values(&self) -> Option<Vec<f64>> {
        match self {
            MaskSpec::Binary(m) => {
                Some(m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
            }
            MaskSpec::Relaxed(_) => None,
        }
    }
}

/// A learned intervention: mask spec, baseline vector, and mode.
#[derive(Debug, Clone)]
pub struct InterventionParams {
    pub mask: MaskSpec,
    /// Substitute activations, length `k`, entries in `[-1, 1]`.
    pub baseline: RealArray,
    pub mode: InterventionMode,
}

impl InterventionParams {
    /// Build, clamping baseline entries into `[-1, 1]`.
    pub fn new(mask: MaskSpec, baseline: RealArray, mode: InterventionMode) -> Result<Self> {
        if baseline.len() != mask.num_units() {
            return Err(Error::ShapeMismatch {
                op: "InterventionParams::new".into(),
                expected: vec![mask.num_units()],
                actual: vec![baseline.len()],
            });
        }
        let clamped: Vec<f64> = baseline.values().iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        Ok(Self {
            mask,
            baseline: RealArray::vector(clamped)?,
            mode,
        })
    }
}

/// `h_hat = (1 - m) * h + m * b`, elementwise.
pub fn apply_mask(h: &[f64], m: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if h.len() != m.len() || h.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "apply_mask".into(),
            expected: vec![h.len()],
            actual: vec![m.len(), b.len()],
        });
    }
    Ok(h.iter()
        .zip(m.iter().zip(b))
        .map(|(&hj, (&mj, &bj))| (1.0 - mj) * hj + mj * bj)
        .collect())
}

/// Recorded form of [`apply_mask`].
pub fn apply_mask_node(g: &mut Graph, h: NodeId, m: NodeId, b: NodeId) -> Result<NodeId> {
    let neg_m = g.scale(m, -1.0);
    let one_minus_m = g.shift(neg_m, 1.0);
    let keep = g.mul(one_minus_m, h)?;
    let subst = g.mul(m, b)?;
    g.add(keep, subst)
}

/// The 0-based emission steps at which a mode intervenes, given the
/// instance's 1-based positions. Step `s` consumes token `s`, producing the
/// paper's `h_{s+1}`.
pub fn intervened_steps(mode: InterventionMode, instance: &EncodedInstance) -> Vec<usize> {
    match mode {
        InterventionMode::Single => vec![instance.intervention_index()],
        InterventionMode::Every => (0..instance.target_index()).collect(),
    }
}

/// Per-step record of an intervened run.
#[derive(Debug, Clone)]
pub struct TraceStep {
    /// Concatenated hidden vector after the recurrent update, before any
    /// substitution (within the intervened run).
    pub original_hidden: Vec<f64>,
    /// Hidden vector after substitution; equals `original_hidden` at
    /// non-intervened steps.
    pub altered_hidden: Vec<f64>,
    /// Next-token distribution produced from the altered state.
    pub distribution: Vec<f64>,
}

/// All emission steps of one intervened run: `sentence length - 1` entries.
#[derive(Debug, Clone)]
pub struct InterventionTrace {
    pub steps: Vec<TraceStep>,
}

impl InterventionTrace {
    /// Export selected units as TSV with columns
    /// `step  token  unit  original  altered  p_d  p_t`.
    /// One row per (step, unit): `(len - 1) * |units|` rows after the header.
    pub fn write_tsv(
        &self,
        path: &Path,
        tokens: &[String],
        units: &[usize],
        d: usize,
        t: usize,
    ) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            writeln!(w, "step\ttoken\tunit\toriginal\taltered\tp_d\tp_t")?;
            for (s, step) in self.steps.iter().enumerate() {
                for &unit in units {
                    writeln!(
                        w,
                        "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                        s + 1,
                        tokens[s],
                        unit,
                        step.original_hidden[unit],
                        step.altered_hidden[unit],
                        step.distribution[d],
                        step.distribution[t],
                    )?;
                }
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

/// Run the frozen model over an instance with the substitution applied
/// according to `params.mode`, using explicit mask values (a relaxed sample
/// or a binarized mask). Returns the target-position distribution
/// `p(x_n | x_{<n}, h_hat)` and the full trace.
pub fn forward_with_intervention(
    lm: &LMParameters,
    cfg: &LMConfig,
    params: &InterventionParams,
    instance: &EncodedInstance,
    mask: &[f64],
) -> Result<(Vec<f64>, InterventionTrace)> {
    if instance.i >= instance.n {
        return Err(Error::InvalidConfig(format!(
            "intervention position i={} must precede target n={}",
            instance.i, instance.n
        )));
    }
    let steps = intervened_steps(params.mode, instance);
    let inputs = &instance.tokens[..instance.tokens.len() - 1];
    let b = params.baseline.values();

    let mut originals: Vec<Vec<f64>> = Vec::with_capacity(inputs.len());
    let mut altereds: Vec<Vec<f64>> = Vec::with_capacity(inputs.len());
    {
        let mut hook = |step: usize, h: &[f64]| -> Vec<f64> {
            originals.push(h.to_vec());
            let out = if steps.contains(&step) {
                apply_mask(h, mask, b).expect("validated lengths")
            } else {
                h.to_vec()
            };
            altereds.push(out.clone());
            out
        };
        let (dists, _) = run_sentence(lm, cfg, inputs, Some(&mut hook))?;
        let trace_steps = originals
            .drain(..)
            .zip(altereds.drain(..))
            .zip(dists)
            .map(|((original_hidden, altered_hidden), distribution)| TraceStep {
                original_hidden,
                altered_hidden,
                distribution,
            })
            .collect::<Vec<_>>();
        let target = trace_steps[instance.target_index() - 1].distribution.clone();
        Ok((
            target,
            InterventionTrace { steps: trace_steps },
        ))
    }
}
