//! Attention interpretability: trace capture, last-layer attribution, and
//! gradient-weighted attention rollout, with patch-aligned heatmap export.
//!
//! Rollout per layer: A_bar = normalize_rows(I + mean_heads(relu(G .* A))),
//! then R = A_bar_L * ... * A_bar_1. The prediction-token row of R, with the
//! prediction token itself removed and renormalized, attributes the output
//! over image patches and time-series tokens. Gradients are taken from the
//! regression output, not a loss.

use std::path::Path;

use crate::error::{Error, Result};
use crate::img::write_pgm;
use crate::model::{
    bind_params, forward_on_tape, ModelInput, PatchShape, SampleNodes, SmtConfig, SmtParams,
};
use crate::tensor::{matmul_raw, Tape};

/// Attention probabilities and their output-gradients for one encoder layer,
/// both `heads * T * T` row-major.
#[derive(Debug, Clone)]
pub struct LayerAttention {
    pub attn: Vec<f64>,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub heads: usize,
    pub seq_len: usize,
    pub layers: Vec<LayerAttention>,
}

impl AttentionTrace {
    /// Collect attention values and gradients after a backward pass over the
    /// prediction node.
    pub fn from_tape(tape: &Tape, nodes: &SampleNodes, heads: usize) -> Result<Self> {
        let mut layers = Vec::with_capacity(nodes.attn.len());
        let mut seq_len = 0;
        for layer_nodes in &nodes.attn {
            let mut attn = Vec::new();
            let mut grad = Vec::new();
            for &id in layer_nodes {
                let t = tape.shape(id)[0];
                seq_len = t;
                attn.extend_from_slice(tape.values(id));
                let g = tape.grad(id).ok_or_else(|| {
                    Error::Contract("attention trace requested before backward".into())
                })?;
                grad.extend_from_slice(g);
            }
            layers.push(LayerAttention { attn, grad });
        }
        if layers.is_empty() {
            return Err(Error::Contract("model produced no attention layers".into()));
        }
        Ok(AttentionTrace { heads, seq_len, layers })
    }
}

/// Forward plus backward-from-prediction, returning the prediction and the
/// captured trace.
pub fn forward_traced(params: &SmtParams, input: &ModelInput) -> Result<(f64, AttentionTrace)> {
    let mut tape = Tape::new();
    let binding = bind_params(&mut tape, params);
    let nodes = forward_on_tape(&mut tape, params, &binding, input)?;
    tape.backward(nodes.pred)?;
    let trace = AttentionTrace::from_tape(&tape, &nodes, params.config.heads)?;
    Ok((tape.scalar(nodes.pred), trace))
}

/// Attribution over the non-prediction tokens, in token order
/// (image tokens first, then time-series tokens).
#[derive(Debug, Clone)]
pub struct TokenAttribution {
    pub weights: Vec<f64>,
    /// Set when all mass stayed on the prediction token and no signal
    /// reached the inputs (identity rollout).
    pub degenerate: bool,
}

fn strip_cls_and_renormalize(cls_row: &[f64]) -> TokenAttribution {
    let rest = &cls_row[1..];
    let mass: f64 = rest.iter().sum();
    if mass <= 0.0 {
        return TokenAttribution { weights: vec![0.0; rest.len()], degenerate: true };
    }
    TokenAttribution {
        weights: rest.iter().map(|v| v / mass).collect(),
        degenerate: false,
    }
}

/// Head-averaged prediction-token attention of the final layer.
pub fn last_layer_attention(trace: &AttentionTrace) -> Result<TokenAttribution> {
    let t = trace.seq_len;
    let last = trace.layers.last().ok_or_else(|| Error::Contract("empty trace".into()))?;
    let mut row = vec![0.0; t];
    for h in 0..trace.heads {
        let base = h * t * t; // query row 0 of head h
        for (j, r) in row.iter_mut().enumerate() {
            *r += last.attn[base + j];
        }
    }
    for r in row.iter_mut() {
        *r /= trace.heads as f64;
    }
    Ok(strip_cls_and_renormalize(&row))
}

/// One rollout stage: normalize_rows(I + mean_heads(relu(G .* A))).
fn rollout_stage(layer: &LayerAttention, heads: usize, t: usize) -> Vec<f64> {
    let mut mixed = vec![0.0; t * t];
    for h in 0..heads {
        let base = h * t * t;
        for i in 0..t * t {
            let w = layer.grad[base + i] * layer.attn[base + i];
            if w > 0.0 {
                mixed[i] += w;
            }
        }
    }
    for v in mixed.iter_mut() {
        *v /= heads as f64;
    }
    for i in 0..t {
        mixed[i * t + i] += 1.0;
        let row = &mut mixed[i * t..(i + 1) * t];
        let sum: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    mixed
}

/// Gradient-weighted attention rollout across all layers.
pub fn weighted_rollout(trace: &AttentionTrace) -> Result<TokenAttribution> {
    let t = trace.seq_len;
    if trace.layers.is_empty() {
        return Err(Error::Contract("empty trace".into()));
    }
    // R = A_bar_L * ... * A_bar_1
    let mut rollout = rollout_stage(&trace.layers[0], trace.heads, t);
    for layer in &trace.layers[1..] {
        let stage = rollout_stage(layer, trace.heads, t);
        rollout = matmul_raw(&stage, &rollout, t, t, t);
    }
    Ok(strip_cls_and_renormalize(&rollout[..t]))
}

#[cfg(test)]
pub(crate) fn rollout_stages_for_test(trace: &AttentionTrace) -> Vec<Vec<f64>> {
    trace
        .layers
        .iter()
        .map(|l| rollout_stage(l, trace.heads, trace.seq_len))
        .collect()
}

fn scale_to_bytes(weights: &[f64]) -> Vec<u8> {
    let min = weights.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return vec![128; weights.len()];
    }
    weights
        .iter()
        .map(|&w| (((w - min) / (max - min)) * 255.0).round() as u8)
        .collect()
}

/// Pixel region covered by one token on the exported canvas.
fn token_region(config: &SmtConfig, token: usize) -> (usize, usize, usize, usize) {
    let (a, b) = config.patch_dims();
    let (h, w) = (config.image_h, config.image_w);
    let n = config.n_patches();
    let img_tokens = config.image_tokens();
    let m = config.ts_tokens();
    if token < img_tokens {
        let frame = token / n;
        let inner = token % n;
        let cols = w / b;
        let (pr, pc) = (inner / cols, inner % cols);
        (frame * w + pc * b, pr * a, b, a) // (x, y, width, height)
    } else {
        let k = token - img_tokens;
        let frames = config.effective_frames();
        match config.patch_shape {
            PatchShape::Row => {
                // time-series strip appended below the frames
                (0, h + k, w, 1)
            }
            PatchShape::Column => (frames * w + k, 0, 1, h),
            PatchShape::Square { b, .. } => {
                let block = h / m.max(1);
                let y = k * block;
                let height = if k + 1 == m { h - y } else { block };
                (frames * w, y, b, height)
            }
        }
    }
}

fn canvas_dims(config: &SmtConfig) -> (usize, usize) {
    let (_, b) = config.patch_dims();
    let frames = config.effective_frames();
    let m = config.ts_tokens();
    let (h, w) = (config.image_h, config.image_w);
    match config.patch_shape {
        PatchShape::Row => (frames.max(1) * w, h + m),
        PatchShape::Column => (frames * w + m, h),
        PatchShape::Square { .. } => (frames * w + if m > 0 { b } else { 0 }, h),
    }
}

/// Render a token attribution back onto image geometry as 8-bit grayscale
/// PGM, with the time-series contribution appended as an extra strip, and
/// emit `token_index,kind,weight` CSV alongside.
pub fn export_heatmap(
    attribution: &TokenAttribution,
    config: &SmtConfig,
    pgm_path: &Path,
    csv_path: &Path,
) -> Result<()> {
    let expected = config.image_tokens() + config.ts_tokens();
    if attribution.weights.len() != expected {
        return Err(Error::Shape {
            op: "export_heatmap",
            lhs: vec![attribution.weights.len()],
            rhs: vec![expected],
        });
    }
    let bytes = scale_to_bytes(&attribution.weights);
    let (cw, ch) = canvas_dims(config);
    let mut canvas = vec![0u8; cw * ch];
    for (token, &value) in bytes.iter().enumerate() {
        let (x, y, w, h) = token_region(config, token);
        for yy in y..y + h {
            for xx in x..x + w {
                canvas[yy * cw + xx] = value;
            }
        }
    }
    write_pgm(pgm_path, cw, ch, &canvas)?;

    let img_tokens = config.image_tokens();
    let mut csv = String::from("token_index,kind,weight\n");
    for (i, w) in attribution.weights.iter().enumerate() {
        let kind = if i < img_tokens { "img" } else { "ts" };
        csv.push_str(&format!("{i},{kind},{w}\n"));
    }
    std::fs::write(csv_path, csv).map_err(|e| Error::io(csv_path.display().to_string(), e))
}
