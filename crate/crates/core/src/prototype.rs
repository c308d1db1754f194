//! The trainable reference model: a small CNN (valid convolutions, ReLU,
//! 2x2 max-pool per conv stage, optional dense hidden layer, softmax or
//! linear head) implemented directly over `f64` with exact analytic
//! gradients for both weights (training) and input pixels (attribution).
//!
//! Weight layout is a single flat vector, ordered:
//!   for each conv layer: filters[out][in][kr][kc], then biases[out];
//!   hidden layer: W[unit][flat_input] row-major, then biases;
//!   head: W[output][prev] row-major, then biases.
//! Planes are channel-major row-major: index = ch*h*w + r*w + c.
//!
//! Initialization draws weights in layout order from one PRNG stream
//! (uniform on [-sqrt(3/fan_in), sqrt(3/fan_in)]); biases start at zero.
//! Epoch shuffles use stream index = epoch, so training is a fixed,
//! reproducible update sequence.

use crate::corpus::{DatasetManifest, ImageSlice, TaskKind};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PrototypeError {
    #[error("invalid architecture: {0}")]
    ArchError(String),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("label error: {0}")]
    LabelError(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Softmax { classes: usize },
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub input_size: usize,
    pub conv_layers: Vec<ConvSpec>,
    pub hidden_units: usize,
    pub head: Head,
}

impl ArchSpec {
    /// Two 3x3 conv stages (8 then 16 filters) + 32 hidden units.
    pub fn default_for(input_size: usize, head: Head) -> Self {
        ArchSpec {
            input_size,
            conv_layers: vec![
                ConvSpec {
                    filters: 8,
                    kernel: 3,
                    stride: 1,
                },
                ConvSpec {
                    filters: 16,
                    kernel: 3,
                    stride: 1,
                },
            ],
            hidden_units: 32,
            head,
        }
    }

    pub fn outputs(&self) -> usize {
        match self.head {
            Head::Softmax { classes } => classes,
            Head::Linear => 1,
        }
    }
}

/// Spatial bookkeeping for one conv stage.
#[derive(Debug, Clone, Copy)]
struct StageDims {
    in_ch: usize,
    in_h: usize,
    in_w: usize,
    out_ch: usize,
    conv_h: usize,
    conv_w: usize,
    pool_h: usize,
    pool_w: usize,
    w_off: usize,
    b_off: usize,
}

/// Resolved layout: per-stage dims plus dense offsets.
#[derive(Debug, Clone)]
struct Layout {
    stages: Vec<StageDims>,
    flat_len: usize,
    hidden_w_off: usize,
    hidden_b_off: usize,
    head_w_off: usize,
    head_b_off: usize,
    head_in: usize,
    total: usize,
}

fn layout(arch: &ArchSpec) -> Result<Layout, PrototypeError> {
    if arch.input_size == 0 {
        return Err(PrototypeError::ArchError("input_size must be positive".into()));
    }
    if let Head::Softmax { classes } = arch.head {
        if classes < 2 {
            return Err(PrototypeError::ArchError(format!(
                "softmax head needs >= 2 classes, got {classes}"
            )));
        }
    }
    let (mut ch, mut h, mut w) = (1usize, arch.input_size, arch.input_size);
    let mut off = 0usize;
    let mut stages = Vec::new();
    for (i, conv) in arch.conv_layers.iter().enumerate() {
        if conv.filters == 0 || conv.stride == 0 {
            return Err(PrototypeError::ArchError(format!(
                "conv layer {i}: filters and stride must be positive"
            )));
        }
        if conv.kernel == 0 || conv.kernel % 2 == 0 {
            return Err(PrototypeError::ArchError(format!(
                "conv layer {i}: kernel must be odd, got {}",
                conv.kernel
            )));
        }
        if conv.kernel > h || conv.kernel > w {
            return Err(PrototypeError::ArchError(format!(
                "conv layer {i}: kernel {} exceeds input {h}x{w}",
                conv.kernel
            )));
        }
        let conv_h = (h - conv.kernel) / conv.stride + 1;
        let conv_w = (w - conv.kernel) / conv.stride + 1;
        let pool_h = conv_h / 2;
        let pool_w = conv_w / 2;
        if pool_h == 0 || pool_w == 0 {
            return Err(PrototypeError::ArchError(format!(
                "conv layer {i}: spatial size collapses to zero after pooling"
            )));
        }
        let w_off = off;
        off += conv.filters * ch * conv.kernel * conv.kernel;
        let b_off = off;
        off += conv.filters;
        stages.push(StageDims {
            in_ch: ch,
            in_h: h,
            in_w: w,
            out_ch: conv.filters,
            conv_h,
            conv_w,
            pool_h,
            pool_w,
            w_off,
            b_off,
        });
        ch = conv.filters;
        h = pool_h;
        w = pool_w;
    }
    let flat_len = ch * h * w;
    let (hidden_w_off, hidden_b_off) = (off, off + arch.hidden_units * flat_len);
    if arch.hidden_units > 0 {
        off = hidden_b_off + arch.hidden_units;
    }
    let head_in = if arch.hidden_units > 0 {
        arch.hidden_units
    } else {
        flat_len
    };
    let head_w_off = off;
    off += arch.outputs() * head_in;
    let head_b_off = off;
    off += arch.outputs();
    Ok(Layout {
        stages,
        flat_len,
        hidden_w_off,
        hidden_b_off,
        head_w_off,
        head_b_off,
        head_in,
        total: off,
    })
}

/// Number of weights the architecture implies.
pub fn param_count(arch: &ArchSpec) -> Result<usize, PrototypeError> {
    Ok(layout(arch)?.total)
}

/// How raw pixels become model inputs. Resolved from the training config
/// and stored in the checkpoint so audits reproduce the exact transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NormState {
    /// (p - mean) / std per image; a flat image divides by 1.
    PerImageZscore,
    /// (p - min) / (max - min) with min/max over the training corpus.
    GlobalMinmax { min: f64, max: f64 },
    /// Raw pixel values, untouched.
    Raw,
}

/// A real-valued single-channel image, the model's input format.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width * height, "plane size mismatch");
        Plane {
            width,
            height,
            values,
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Plane {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }
}

impl NormState {
    pub fn apply(&self, slice: &ImageSlice) -> Plane {
        let values = match *self {
            NormState::PerImageZscore => {
                let n = slice.pixels.len() as f64;
                let mean = slice.pixels.iter().map(|&p| p as f64).sum::<f64>() / n;
                let var = slice
                    .pixels
                    .iter()
                    .map(|&p| (p as f64 - mean).powi(2))
                    .sum::<f64>()
                    / n;
                let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
                slice
                    .pixels
                    .iter()
                    .map(|&p| (p as f64 - mean) / sd)
                    .collect()
            }
            NormState::GlobalMinmax { min, max } => {
                let span = if max > min { max - min } else { 1.0 };
                slice
                    .pixels
                    .iter()
                    .map(|&p| (p as f64 - min) / span)
                    .collect()
            }
            NormState::Raw => slice.pixels.iter().map(|&p| p as f64).collect(),
        };
        Plane::new(slice.width, slice.height, values)
    }
}

#[derive(Debug, Clone)]
pub struct PrototypeModel {
    pub arch: ArchSpec,
    pub weights: Vec<f64>,
    pub seed: u64,
    pub norm: NormState,
}

impl PrototypeModel {
    /// The model-input plane for a raw slice under this model's
    /// normalization state.
    pub fn input_plane(&self, slice: &ImageSlice) -> Plane {
        self.norm.apply(slice)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    Classification { probs: Vec<f64> },
    Regression { value: f64 },
}

impl Prediction {
    /// Max probability for classification, 1 for regression.
    pub fn confidence(&self) -> f64 {
        match self {
            Prediction::Classification { probs } => probs.iter().copied().fold(0.0, f64::max),
            Prediction::Regression { .. } => 1.0,
        }
    }

    pub fn class(&self) -> Option<usize> {
        match self {
            Prediction::Classification { probs } => probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i),
            Prediction::Regression { .. } => None,
        }
    }

    pub fn scalar(&self) -> f64 {
        match self {
            Prediction::Classification { probs } => {
                probs.iter().copied().fold(0.0, f64::max)
            }
            Prediction::Regression { value } => *value,
        }
    }
}

/// What to differentiate in `grad_input`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// The logit of this class (pre-softmax).
    Class(usize),
    /// The scalar regression output.
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    PerImageZscore,
    GlobalMinmax,
    Raw,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub normalization: Normalization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.05,
            seed: 0,
            normalization: Normalization::PerImageZscore,
        }
    }
}

pub fn init_model(arch: &ArchSpec, seed: u64) -> Result<PrototypeModel, PrototypeError> {
    let lay = layout(arch)?;
    let mut weights = vec![0.0f64; lay.total];
    let mut rng = Rng::new(seed);
    let mut fill = |range: std::ops::Range<usize>, fan_in: usize, w: &mut Vec<f64>| {
        let limit = (3.0 / fan_in as f64).sqrt();
        for i in range {
            w[i] = rng.range_f64(-limit, limit);
        }
    };
    for (stage, conv) in lay.stages.iter().zip(&arch.conv_layers) {
        let fan_in = stage.in_ch * conv.kernel * conv.kernel;
        fill(stage.w_off..stage.b_off, fan_in, &mut weights);
    }
    if arch.hidden_units > 0 {
        fill(lay.hidden_w_off..lay.hidden_b_off, lay.flat_len, &mut weights);
    }
    fill(lay.head_w_off..lay.head_b_off, lay.head_in, &mut weights);
    Ok(PrototypeModel {
        arch: arch.clone(),
        weights,
        seed,
        norm: NormState::Raw,
    })
}

/// Everything the backward pass needs from a forward evaluation.
struct Activations {
    input: Vec<f64>,
    /// Per stage: pre-activation conv output.
    conv_pre: Vec<Vec<f64>>,
    /// Per stage: pooled ReLU output.
    pool_out: Vec<Vec<f64>>,
    /// Per stage: flat index into the conv plane that won each pool window.
    pool_src: Vec<Vec<usize>>,
    hidden_pre: Vec<f64>,
    hidden_out: Vec<f64>,
    outputs: Vec<f64>,
}

fn forward_pass(model: &PrototypeModel, lay: &Layout, plane: &Plane) -> Activations {
    let w = &model.weights;
    let mut current = plane.values.clone();
    let input = current.clone();
    let mut conv_pre = Vec::new();
    let mut pool_out = Vec::new();
    let mut pool_src = Vec::new();

    for (stage, conv) in lay.stages.iter().zip(&model.arch.conv_layers) {
        let k = conv.kernel;
        let s = conv.stride;
        let mut pre = vec![0.0f64; stage.out_ch * stage.conv_h * stage.conv_w];
        for f in 0..stage.out_ch {
            let bias = w[stage.b_off + f];
            for r in 0..stage.conv_h {
                for c in 0..stage.conv_w {
                    let mut acc = bias;
                    for ic in 0..stage.in_ch {
                        let in_base = ic * stage.in_h * stage.in_w;
                        let w_base = stage.w_off + ((f * stage.in_ch + ic) * k) * k;
                        for kr in 0..k {
                            let row = in_base + (r * s + kr) * stage.in_w + c * s;
                            let wrow = w_base + kr * k;
                            for kc in 0..k {
                                acc += w[wrow + kc] * current[row + kc];
                            }
                        }
                    }
                    pre[(f * stage.conv_h + r) * stage.conv_w + c] = acc;
                }
            }
        }
        // 2x2 max-pool over ReLU(pre); first maximum wins ties.
        let mut pooled = vec![0.0f64; stage.out_ch * stage.pool_h * stage.pool_w];
        let mut src = vec![0usize; pooled.len()];
        for f in 0..stage.out_ch {
            for pr in 0..stage.pool_h {
                for pc in 0..stage.pool_w {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for dr in 0..2 {
                        for dc in 0..2 {
                            let idx = (f * stage.conv_h + pr * 2 + dr) * stage.conv_w
                                + pc * 2
                                + dc;
                            let v = pre[idx].max(0.0);
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    pooled[(f * stage.pool_h + pr) * stage.pool_w + pc] = best;
                    src[(f * stage.pool_h + pr) * stage.pool_w + pc] = best_idx;
                }
            }
        }
        conv_pre.push(pre);
        pool_src.push(src);
        current = pooled.clone();
        pool_out.push(pooled);
    }

    let flat = &current;
    let (hidden_pre, hidden_out) = if model.arch.hidden_units > 0 {
        let units = model.arch.hidden_units;
        let mut pre = vec![0.0f64; units];
        for u in 0..units {
            let mut acc = w[lay.hidden_b_off + u];
            let row = lay.hidden_w_off + u * lay.flat_len;
            for (i, x) in flat.iter().enumerate() {
                acc += w[row + i] * x;
            }
            pre[u] = acc;
        }
        let out: Vec<f64> = pre.iter().map(|&z| z.max(0.0)).collect();
        (pre, out)
    } else {
        (Vec::new(), Vec::new())
    };

    let head_input: &[f64] = if model.arch.hidden_units > 0 {
        &hidden_out
    } else {
        flat
    };
    let outs = model.arch.outputs();
    let mut outputs = vec![0.0f64; outs];
    for o in 0..outs {
        let mut acc = w[lay.head_b_off + o];
        let row = lay.head_w_off + o * lay.head_in;
        for (i, x) in head_input.iter().enumerate() {
            acc += w[row + i] * x;
        }
        outputs[o] = acc;
    }

    Activations {
        input,
        conv_pre,
        pool_out,
        pool_src,
        hidden_pre,
        hidden_out,
        outputs,
    }
}

/// Numerically-stable softmax.
fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Backward pass from a gradient over the raw outputs (logits / scalar).
/// Returns (gradient over weights, gradient over input pixels); either
/// may be skipped.
fn backward_pass(
    model: &PrototypeModel,
    lay: &Layout,
    acts: &Activations,
    d_outputs: &[f64],
    want_weights: bool,
    want_input: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let w = &model.weights;
    let mut dw = if want_weights {
        Some(vec![0.0f64; lay.total])
    } else {
        None
    };

    // Head.
    let head_input: &[f64] = if model.arch.hidden_units > 0 {
        &acts.hidden_out
    } else if let Some(last) = acts.pool_out.last() {
        last
    } else {
        &acts.input
    };
    let mut d_head_in = vec![0.0f64; lay.head_in];
    for (o, &g) in d_outputs.iter().enumerate() {
        let row = lay.head_w_off + o * lay.head_in;
        if let Some(dw) = dw.as_mut() {
            dw[lay.head_b_off + o] += g;
            for (i, x) in head_input.iter().enumerate() {
                dw[row + i] += g * x;
            }
        }
        for (i, d) in d_head_in.iter_mut().enumerate() {
            *d += g * w[row + i];
        }
    }

    // Hidden layer.
    let mut d_flat = if model.arch.hidden_units > 0 {
        let mut d_flat = vec![0.0f64; lay.flat_len];
        let flat: &[f64] = if let Some(last) = acts.pool_out.last() {
            last
        } else {
            &acts.input
        };
        for (u, d_out) in d_head_in.iter().enumerate() {
            // ReLU gate on the hidden pre-activation.
            let g = if acts.hidden_pre[u] > 0.0 { *d_out } else { 0.0 };
            if g == 0.0 {
                continue;
            }
            let row = lay.hidden_w_off + u * lay.flat_len;
            if let Some(dw) = dw.as_mut() {
                dw[lay.hidden_b_off + u] += g;
                for (i, x) in flat.iter().enumerate() {
                    dw[row + i] += g * x;
                }
            }
            for (i, d) in d_flat.iter_mut().enumerate() {
                *d += g * w[row + i];
            }
        }
        d_flat
    } else {
        d_head_in
    };

    // Conv stages, last to first.
    for (idx, stage) in lay.stages.iter().enumerate().rev() {
        let conv = &model.arch.conv_layers[idx];
        let k = conv.kernel;
        let s = conv.stride;
        // Un-pool: route each pooled gradient to its winning conv cell,
        // gated by ReLU (winner value 0 means the window was all-negative;
        // its gradient does not flow).
        let mut d_pre = vec![0.0f64; stage.out_ch * stage.conv_h * stage.conv_w];
        for (pi, &g) in d_flat.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let srci = acts.pool_src[idx][pi];
            if acts.conv_pre[idx][srci] > 0.0 {
                d_pre[srci] += g;
            }
        }
        let stage_input: &[f64] = if idx == 0 {
            &acts.input
        } else {
            &acts.pool_out[idx - 1]
        };
        let mut d_in = vec![0.0f64; stage.in_ch * stage.in_h * stage.in_w];
        for f in 0..stage.out_ch {
            for r in 0..stage.conv_h {
                for c in 0..stage.conv_w {
                    let g = d_pre[(f * stage.conv_h + r) * stage.conv_w + c];
                    if g == 0.0 {
                        continue;
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw[stage.b_off + f] += g;
                    }
                    for ic in 0..stage.in_ch {
                        let in_base = ic * stage.in_h * stage.in_w;
                        let w_base = stage.w_off + ((f * stage.in_ch + ic) * k) * k;
                        for kr in 0..k {
                            let row = in_base + (r * s + kr) * stage.in_w + c * s;
                            let wrow = w_base + kr * k;
                            for kc in 0..k {
                                if let Some(dw) = dw.as_mut() {
                                    dw[wrow + kc] += g * stage_input[row + kc];
                                }
                                d_in[row + kc] += g * w[wrow + kc];
                            }
                        }
                    }
                }
            }
        }
        d_flat = d_in;
    }

    let d_input = if want_input { Some(d_flat) } else { None };
    (dw, d_input)
}

fn check_shape(model: &PrototypeModel, plane: &Plane) -> Result<Layout, PrototypeError> {
    let lay = layout(&model.arch)?;
    let expected = (model.arch.input_size, model.arch.input_size);
    if (plane.width, plane.height) != expected {
        return Err(PrototypeError::ShapeMismatch {
            expected,
            got: (plane.width, plane.height),
        });
    }
    Ok(lay)
}

pub fn forward(model: &PrototypeModel, plane: &Plane) -> Result<Prediction, PrototypeError> {
    let lay = check_shape(model, plane)?;
    let acts = forward_pass(model, &lay, plane);
    Ok(match model.arch.head {
        Head::Softmax { .. } => Prediction::Classification {
            probs: softmax(&acts.outputs),
        },
        Head::Linear => Prediction::Regression {
            value: acts.outputs[0],
        },
    })
}

/// Clamp a probability at 1e-12 without masking NaN (f64::max would).
fn clamp_prob(p: f64) -> f64 {
    if p.is_nan() {
        f64::NAN
    } else {
        p.max(1e-12)
    }
}

/// Cross-entropy (probabilities clamped at 1e-12) or squared error.
pub fn loss(pred: &Prediction, label: f64) -> f64 {
    match pred {
        Prediction::Classification { probs } => {
            let class = label as usize;
            let p = clamp_prob(probs.get(class).copied().unwrap_or(0.0));
            -p.ln()
        }
        Prediction::Regression { value } => (value - label) * (value - label),
    }
}

/// Exact derivative of the target logit (classification) or the output
/// (regression) with respect to every input pixel.
pub fn grad_input(
    model: &PrototypeModel,
    plane: &Plane,
    target: Target,
) -> Result<Plane, PrototypeError> {
    let lay = check_shape(model, plane)?;
    let acts = forward_pass(model, &lay, plane);
    let outs = model.arch.outputs();
    let mut d_outputs = vec![0.0f64; outs];
    match (target, &model.arch.head) {
        (Target::Class(k), Head::Softmax { classes }) => {
            if k >= *classes {
                return Err(PrototypeError::LabelError(format!(
                    "target class {k} out of range for {classes} classes"
                )));
            }
            d_outputs[k] = 1.0;
        }
        (Target::Regression, Head::Linear) => d_outputs[0] = 1.0,
        _ => {
            return Err(PrototypeError::LabelError(
                "target does not match model head".into(),
            ))
        }
    }
    let (_, d_input) = backward_pass(model, &lay, &acts, &d_outputs, false, true);
    Ok(Plane::new(
        plane.width,
        plane.height,
        d_input.expect("input gradient requested"),
    ))
}

/// Loss gradient over the flat weight vector for one example; also returns
/// the loss value.
fn example_grad(
    model: &PrototypeModel,
    lay: &Layout,
    plane: &Plane,
    label: f64,
) -> (f64, Vec<f64>) {
    let acts = forward_pass(model, lay, plane);
    let (loss_val, d_outputs) = match model.arch.head {
        Head::Softmax { .. } => {
            let probs = softmax(&acts.outputs);
            let class = label as usize;
            let p = clamp_prob(probs[class]);
            // d(-ln p_class)/d logits = probs - onehot(class)
            let mut d: Vec<f64> = probs.clone();
            d[class] -= 1.0;
            (-p.ln(), d)
        }
        Head::Linear => {
            let v = acts.outputs[0];
            ((v - label) * (v - label), vec![2.0 * (v - label)])
        }
    };
    let (dw, _) = backward_pass(model, lay, &acts, &d_outputs, true, false);
    (loss_val, dw.expect("weight gradient requested"))
}

/// Loss and its exact gradient over the flat weight vector for a single
/// example, exposed for gradient diagnostics and custom optimizers.
pub fn loss_gradient(
    model: &PrototypeModel,
    plane: &Plane,
    label: f64,
) -> Result<(f64, Vec<f64>), PrototypeError> {
    if let Head::Softmax { classes } = model.arch.head {
        let class = label as usize;
        if label.fract() != 0.0 || class >= classes {
            return Err(PrototypeError::LabelError(format!(
                "class label {label} invalid for {classes} classes"
            )));
        }
    }
    let lay = check_shape(model, plane)?;
    Ok(example_grad(model, &lay, plane, label))
}

/// Smallest |pre-activation| across ReLU sites and smallest winner margin
/// across max-pool windows, in that order. Finite-difference probes of the
/// gradient are only trustworthy when both margins are comfortably larger
/// than the probe step; an all-clipped pool window (winner 0) passes no
/// gradient on either side of the probe, so only ties between positive
/// values count against the pool margin.
pub fn kink_margins(
    model: &PrototypeModel,
    plane: &Plane,
) -> Result<(f64, f64), PrototypeError> {
    let lay = check_shape(model, plane)?;
    let acts = forward_pass(model, &lay, plane);
    let mut relu_margin = f64::INFINITY;
    for pre in &acts.conv_pre {
        for &z in pre {
            relu_margin = relu_margin.min(z.abs());
        }
    }
    for &z in &acts.hidden_pre {
        relu_margin = relu_margin.min(z.abs());
    }
    let mut pool_margin = f64::INFINITY;
    for (idx, stage) in lay.stages.iter().enumerate() {
        for f in 0..stage.out_ch {
            for pr in 0..stage.pool_h {
                for pc in 0..stage.pool_w {
                    let mut vals = Vec::with_capacity(4);
                    for dr in 0..2 {
                        for dc in 0..2 {
                            let i = (f * stage.conv_h + pr * 2 + dr) * stage.conv_w
                                + pc * 2
                                + dc;
                            vals.push(acts.conv_pre[idx][i].max(0.0));
                        }
                    }
                    vals.sort_by(f64::total_cmp);
                    if vals[3] > 0.0 {
                        pool_margin = pool_margin.min(vals[3] - vals[2]);
                    }
                }
            }
        }
    }
    Ok((relu_margin, pool_margin))
}

fn resolve_norm(
    normalization: Normalization,
    images: &[ImageSlice],
) -> NormState {
    match normalization {
        Normalization::PerImageZscore => NormState::PerImageZscore,
        Normalization::Raw => NormState::Raw,
        Normalization::GlobalMinmax => {
            let mut min = f64::INFINITY;
            let mut max = f64::NEG_INFINITY;
            for image in images {
                for &p in &image.pixels {
                    min = min.min(p as f64);
                    max = max.max(p as f64);
                }
            }
            if !min.is_finite() || !max.is_finite() {
                (min, max) = (0.0, 1.0);
            }
            NormState::GlobalMinmax { min, max }
        }
    }
}

/// Plain mini-batch SGD. Epoch e shuffles indices with PRNG stream e of
/// `cfg.seed`; updates apply in batch order; history holds per-epoch mean
/// loss as evaluated during the pass.
pub fn train(
    model: &PrototypeModel,
    manifest: &DatasetManifest,
    images: &[ImageSlice],
    cfg: &TrainConfig,
) -> Result<(PrototypeModel, Vec<f64>), PrototypeError> {
    if images.is_empty() || manifest.entries.is_empty() {
        return Err(PrototypeError::EmptyDataset);
    }
    if images.len() != manifest.entries.len() {
        return Err(PrototypeError::LabelError(format!(
            "{} manifest entries vs {} images",
            manifest.entries.len(),
            images.len()
        )));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(PrototypeError::LabelError(
            "epochs and batch_size must be >= 1".into(),
        ));
    }
    match (manifest.task, &model.arch.head) {
        (TaskKind::Classification, Head::Softmax { classes }) => {
            if manifest.class_count != Some(*classes) {
                return Err(PrototypeError::LabelError(format!(
                    "manifest class_count {:?} does not match {classes}-way head",
                    manifest.class_count
                )));
            }
        }
        (TaskKind::Regression, Head::Linear) => {}
        (task, head) => {
            return Err(PrototypeError::LabelError(format!(
                "task {task} does not match head {head:?}"
            )));
        }
    }

    let mut out = model.clone();
    out.norm = resolve_norm(cfg.normalization, images);
    let lay = layout(&out.arch)?;
    let planes: Vec<Plane> = images.iter().map(|s| out.norm.apply(s)).collect();
    for (image, plane) in images.iter().zip(&planes) {
        if plane.width != out.arch.input_size || plane.height != out.arch.input_size {
            return Err(PrototypeError::ShapeMismatch {
                expected: (out.arch.input_size, out.arch.input_size),
                got: (image.width, image.height),
            });
        }
    }
    let labels: Vec<f64> = manifest.entries.iter().map(|e| e.label).collect();

    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..planes.len()).collect();
        Rng::stream(cfg.seed, epoch as u64).shuffle(&mut order);
        let mut epoch_loss = 0.0f64;
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grad = vec![0.0f64; lay.total];
            let mut batch_loss = 0.0f64;
            for &i in batch {
                let (l, g) = example_grad(&out, &lay, &planes[i], labels[i]);
                batch_loss += l;
                for (acc, gi) in grad.iter_mut().zip(&g) {
                    *acc += gi;
                }
            }
            if !batch_loss.is_finite() {
                return Err(PrototypeError::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                });
            }
            epoch_loss += batch_loss;
            let scale = cfg.learning_rate / batch.len() as f64;
            for (w, g) in out.weights.iter_mut().zip(&grad) {
                *w -= scale * g;
            }
        }
        history.push(epoch_loss / planes.len() as f64);
    }
    Ok((out, history))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"AUDLPRT1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    version: u32,
    arch: ArchSpec,
    seed: u64,
    normalization: NormState,
}

/// Serializes a model: magic, little-endian header length + JSON header,
/// little-endian weight count, then each weight as a little-endian f64.
pub fn checkpoint_bytes(model: &PrototypeModel) -> Vec<u8> {
    let header = serde_json::to_vec(&CheckpointHeader {
        version: 1,
        arch: model.arch.clone(),
        seed: model.seed,
        normalization: model.norm,
    })
    .expect("header serializes");
    let mut bytes = Vec::with_capacity(20 + header.len() + model.weights.len() * 8);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&(model.weights.len() as u64).to_le_bytes());
    for w in &model.weights {
        bytes.extend_from_slice(&w.to_le_bytes());
    }
    bytes
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<PrototypeModel, PrototypeError> {
    let bad = |msg: &str| PrototypeError::Checkpoint(msg.into());
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing or unknown magic"));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12 + header_len;
    if bytes.len() < header_end + 8 {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..header_end])
        .map_err(|e| PrototypeError::Checkpoint(format!("header: {e}")))?;
    if header.version != 1 {
        return Err(PrototypeError::Checkpoint(format!(
            "unsupported version {}",
            header.version
        )));
    }
    let count =
        u64::from_le_bytes(bytes[header_end..header_end + 8].try_into().unwrap()) as usize;
    let expected = param_count(&header.arch)?;
    if count != expected {
        return Err(PrototypeError::Checkpoint(format!(
            "weight count {count} does not match architecture ({expected})"
        )));
    }
    let payload = &bytes[header_end + 8..];
    if payload.len() != count * 8 {
        return Err(bad("weight payload length mismatch"));
    }
    let mut weights = Vec::with_capacity(count);
    for chunk in payload.chunks_exact(8) {
        let w = f64::from_le_bytes(chunk.try_into().unwrap());
        if !w.is_finite() {
            return Err(bad("non-finite weight"));
        }
        weights.push(w);
    }
    Ok(PrototypeModel {
        arch: header.arch,
        weights,
        seed: header.seed,
        norm: header.normalization,
    })
}

pub fn save_checkpoint(path: &Path, model: &PrototypeModel) -> Result<(), PrototypeError> {
    std::fs::write(path, checkpoint_bytes(model)).map_err(|e| PrototypeError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<PrototypeModel, PrototypeError> {
    let bytes = std::fs::read(path).map_err(|e| PrototypeError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    model_from_bytes(&bytes)
}
