//! The Solar Multimodal Transformer: patchify, embed, early-fuse, encode,
//! predict.
//!
//! Image patches and GHI windows are linearly projected into a shared
//! embedding space, tagged with positional embeddings and fixed modality-type
//! vectors, concatenated behind a learnable prediction token, and run through
//! a pre-norm transformer encoder. The prediction token's final state feeds a
//! linear head producing one normalized-GHI value.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorId};

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchShape {
    /// a x b pixel tiles in grid order, top-left to bottom-right.
    Square { a: usize, b: usize },
    /// 1 x W strips, top to bottom.
    Row,
    /// H x 1 strips, left to right.
    Column,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pillars {
    Both,
    ImageOnly,
    TsOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmtConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub image_c: usize,
    pub patch_shape: PatchShape,
    /// Number of input time series, M.
    pub ts_count: usize,
    /// Window length per series, S.
    pub ts_len: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Image frames stacked token-wise, 1..=3.
    pub frames: usize,
    pub pillars: Pillars,
    /// Extra LN before the head. Off by default: the head reads the raw
    /// final-block token state.
    pub final_layer_norm: bool,
}

impl Default for SmtConfig {
    fn default() -> Self {
        SmtConfig {
            image_h: 224,
            image_w: 224,
            image_c: 3,
            patch_shape: PatchShape::Square { a: 16, b: 16 },
            ts_count: 1,
            ts_len: 144,
            embed_dim: 192,
            layers: 3,
            heads: 6,
            mlp_ratio: 4,
            frames: 1,
            pillars: Pillars::Both,
            final_layer_norm: false,
        }
    }
}

impl SmtConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.patch_dims();
        if a == 0 || b == 0 || self.image_h % a != 0 || self.image_w % b != 0 {
            return Err(Error::Config(format!(
                "patch {a}x{b} does not tile a {}x{} image",
                self.image_h, self.image_w
            )));
        }
        if self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !(1..=3).contains(&self.frames) {
            return Err(Error::Config(format!("frames must be 1..=3, got {}", self.frames)));
        }
        if self.layers == 0 {
            return Err(Error::Config("at least one encoder layer required".into()));
        }
        match self.pillars {
            Pillars::ImageOnly if self.ts_count != 0 => {
                return Err(Error::Config("image_only requires ts_count = 0".into()))
            }
            Pillars::Both | Pillars::TsOnly if self.ts_count == 0 => {
                return Err(Error::Config("time-series pillar requires ts_count >= 1".into()))
            }
            _ => {}
        }
        if self.has_ts() && self.ts_len == 0 {
            return Err(Error::Config("ts_len must be positive".into()));
        }
        Ok(())
    }

    pub fn patch_dims(&self) -> (usize, usize) {
        match self.patch_shape {
            PatchShape::Square { a, b } => (a, b),
            PatchShape::Row => (1, self.image_w),
            PatchShape::Column => (self.image_h, 1),
        }
    }

    /// Flattened patch length a*b*C.
    pub fn patch_dim(&self) -> usize {
        let (a, b) = self.patch_dims();
        a * b * self.image_c
    }

    /// Patches per frame, N.
    pub fn n_patches(&self) -> usize {
        let (a, b) = self.patch_dims();
        (self.image_h * self.image_w) / (a * b)
    }

    pub fn has_image(&self) -> bool {
        !matches!(self.pillars, Pillars::TsOnly)
    }

    pub fn has_ts(&self) -> bool {
        !matches!(self.pillars, Pillars::ImageOnly)
    }

    /// Frames actually consumed (the frames knob is ignored without images).
    pub fn effective_frames(&self) -> usize {
        if self.has_image() {
            self.frames
        } else {
            0
        }
    }

    pub fn image_tokens(&self) -> usize {
        self.effective_frames() * self.n_patches()
    }

    pub fn ts_tokens(&self) -> usize {
        if self.has_ts() {
            self.ts_count
        } else {
            0
        }
    }

    /// 1 + F*N + M.
    pub fn seq_len(&self) -> usize {
        1 + self.image_tokens() + self.ts_tokens()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Learnable scalar count, in closed form.
    pub fn count_params(&self) -> usize {
        let d = self.embed_dim;
        let mut total = 0;
        if self.has_image() {
            total += self.patch_dim() * d + d; // projection + bias
            total += self.image_tokens() * d; // positional
        }
        if self.has_ts() {
            total += self.ts_len * d + d;
            total += self.ts_tokens() * d;
        }
        total += d; // prediction token
        let hidden = self.mlp_ratio * d;
        total += self.layers * (2 * d + 4 * (d * d + d) + 2 * d + d * hidden + hidden + hidden * d + d);
        if self.final_layer_norm {
            total += 2 * d;
        }
        total += d + 1; // head
        total
    }
}

/// One named parameter array. `learnable == false` marks the fixed
/// modality-type vectors, which travel with checkpoints but never update.
#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub learnable: bool,
    pub weight_decay: bool,
}

impl ParamTensor {
    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockIndex {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    mlp_w1: usize,
    mlp_b1: usize,
    mlp_w2: usize,
    mlp_b2: usize,
}

#[derive(Debug, Clone)]
struct ParamIndex {
    embed_img: Option<(usize, usize)>,
    embed_ts: Option<(usize, usize)>,
    pos_img: Option<usize>,
    pos_ts: Option<usize>,
    type_img: Option<usize>,
    type_ts: Option<usize>,
    pred_token: usize,
    blocks: Vec<BlockIndex>,
    final_ln: Option<(usize, usize)>,
    head_w: usize,
    head_b: usize,
}

/// All model arrays in canonical declaration order (the checkpoint order).
pub struct SmtParams {
    pub config: SmtConfig,
    pub tensors: Vec<ParamTensor>,
    index: ParamIndex,
}

struct Builder {
    tensors: Vec<ParamTensor>,
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Builder {
    fn weight(&mut self, name: &str, shape: Vec<usize>) -> usize {
        let n = shape.iter().product();
        let values = (0..n).map(|_| self.normal.sample(&mut self.rng)).collect();
        self.push(name, shape, values, true, true)
    }

    fn embedding(&mut self, name: &str, shape: Vec<usize>) -> usize {
        let n = shape.iter().product();
        let values = (0..n).map(|_| self.normal.sample(&mut self.rng)).collect();
        self.push(name, shape, values, true, false)
    }

    fn bias(&mut self, name: &str, len: usize) -> usize {
        self.push(name, vec![len], vec![0.0; len], true, false)
    }

    fn gamma(&mut self, name: &str, len: usize) -> usize {
        self.push(name, vec![len], vec![1.0; len], true, false)
    }

    fn fixed(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) -> usize {
        self.push(name, shape, values, false, false)
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>, learnable: bool, decay: bool) -> usize {
        self.tensors.push(ParamTensor {
            name: name.to_string(),
            shape,
            values,
            learnable,
            weight_decay: decay,
        });
        self.tensors.len() - 1
    }
}

impl SmtParams {
    /// Fresh parameters: weights and embeddings N(0, 0.02^2), biases zero,
    /// LN gains one, fixed type vectors as documented constants.
    pub fn init(config: SmtConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut b = Builder {
            tensors: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, 0.02).expect("valid stddev"),
        };

        let embed_img = config.has_image().then(|| {
            (
                b.weight("embed.img.weight", vec![config.patch_dim(), d]),
                b.bias("embed.img.bias", d),
            )
        });
        let embed_ts = config.has_ts().then(|| {
            (
                b.weight("embed.ts.weight", vec![config.ts_len, d]),
                b.bias("embed.ts.bias", d),
            )
        });
        let pos_img = config
            .has_image()
            .then(|| b.embedding("pos.img", vec![config.image_tokens(), d]));
        let pos_ts = config
            .has_ts()
            .then(|| b.embedding("pos.ts", vec![config.ts_tokens(), d]));

        // Fixed modality-type indicators: frame k carries k/sqrt(D) in every
        // coordinate; the time-series type is 1/sqrt(D).
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let type_img = config.has_image().then(|| {
            let f = config.effective_frames();
            let mut values = Vec::with_capacity(f * d);
            for frame in 0..f {
                values.extend(std::iter::repeat(frame as f64 * inv_sqrt_d).take(d));
            }
            b.fixed("type.img", vec![f, d], values)
        });
        let type_ts = config
            .has_ts()
            .then(|| b.fixed("type.ts", vec![1, d], vec![inv_sqrt_d; d]));

        let pred_token = b.embedding("pred_token", vec![1, d]);

        let hidden = config.mlp_ratio * d;
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |s: &str| format!("block.{l}.{s}");
            blocks.push(BlockIndex {
                ln1_g: b.gamma(&p("ln1.gamma"), d),
                ln1_b: b.bias(&p("ln1.beta"), d),
                wq: b.weight(&p("attn.wq"), vec![d, d]),
                bq: b.bias(&p("attn.bq"), d),
                wk: b.weight(&p("attn.wk"), vec![d, d]),
                bk: b.bias(&p("attn.bk"), d),
                wv: b.weight(&p("attn.wv"), vec![d, d]),
                bv: b.bias(&p("attn.bv"), d),
                wo: b.weight(&p("attn.wo"), vec![d, d]),
                bo: b.bias(&p("attn.bo"), d),
                ln2_g: b.gamma(&p("ln2.gamma"), d),
                ln2_b: b.bias(&p("ln2.beta"), d),
                mlp_w1: b.weight(&p("mlp.w1"), vec![d, hidden]),
                mlp_b1: b.bias(&p("mlp.b1"), hidden),
                mlp_w2: b.weight(&p("mlp.w2"), vec![hidden, d]),
                mlp_b2: b.bias(&p("mlp.b2"), d),
            });
        }

        let final_ln = config
            .final_layer_norm
            .then(|| (b.gamma("final_ln.gamma", d), b.bias("final_ln.beta", d)));
        let head_w = b.weight("head.weight", vec![d, 1]);
        let head_b = b.bias("head.bias", 1);

        Ok(SmtParams {
            config,
            index: ParamIndex {
                embed_img,
                embed_ts,
                pos_img,
                pos_ts,
                type_img,
                type_ts,
                pred_token,
                blocks,
                final_ln,
                head_w,
                head_b,
            },
            tensors: b.tensors,
        })
    }

    pub fn learnable_scalars(&self) -> usize {
        self.tensors.iter().filter(|t| t.learnable).map(|t| t.numel()).sum()
    }

    pub fn tensor_by_name(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Split an H x W x C channel-last image into the N x (a*b*C) patch matrix.
pub fn patchify(image: &[f64], config: &SmtConfig) -> Result<Vec<f64>> {
    let (h, w, c) = (config.image_h, config.image_w, config.image_c);
    if image.len() != h * w * c {
        return Err(Error::Shape {
            op: "patchify",
            lhs: vec![image.len()],
            rhs: vec![h, w, c],
        });
    }
    let (a, b) = config.patch_dims();
    let (rows, cols) = (h / a, w / b);
    let pd = a * b * c;
    let mut out = vec![0.0; rows * cols * pd];
    for pr in 0..rows {
        for pc in 0..cols {
            let patch = pr * cols + pc;
            for r in 0..a {
                let src = ((pr * a + r) * w + pc * b) * c;
                let dst = patch * pd + r * b * c;
                out[dst..dst + b * c].copy_from_slice(&image[src..src + b * c]);
            }
        }
    }
    Ok(out)
}

/// One forecasting sample: F frames of H*W*C pixels in [0,1] plus M windows
/// of S normalized GHI values.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub images: Vec<Vec<f64>>,
    pub ts: Vec<Vec<f64>>,
}

impl ModelInput {
    fn validate(&self, config: &SmtConfig) -> Result<()> {
        let f = config.effective_frames();
        if self.images.len() < f {
            return Err(Error::Shape {
                op: "forward(images)",
                lhs: vec![self.images.len()],
                rhs: vec![f],
            });
        }
        let pixels = config.image_h * config.image_w * config.image_c;
        for img in self.images.iter().take(f) {
            if img.len() != pixels {
                return Err(Error::Shape {
                    op: "forward(image)",
                    lhs: vec![img.len()],
                    rhs: vec![pixels],
                });
            }
        }
        if config.has_ts() {
            if self.ts.len() != config.ts_count {
                return Err(Error::Shape {
                    op: "forward(ts)",
                    lhs: vec![self.ts.len()],
                    rhs: vec![config.ts_count],
                });
            }
            for series in &self.ts {
                if series.len() != config.ts_len {
                    return Err(Error::Shape {
                        op: "forward(ts)",
                        lhs: vec![series.len()],
                        rhs: vec![config.ts_len],
                    });
                }
                if !series.iter().all(|v| v.is_finite()) {
                    return Err(Error::Contract("non-finite time-series input".into()));
                }
            }
        }
        Ok(())
    }
}

/// Parameter tensors inserted into a tape, aligned with `SmtParams::tensors`.
pub struct TapeBinding {
    pub leaves: Vec<TensorId>,
}

pub fn bind_params(tape: &mut Tape, params: &SmtParams) -> TapeBinding {
    let leaves = params
        .tensors
        .iter()
        .map(|t| tape.leaf(t.values.clone(), t.shape.clone()))
        .collect();
    TapeBinding { leaves }
}

/// Node handles produced by one sample's forward pass.
pub struct SampleNodes {
    /// 1x1 prediction on the normalized scale.
    pub pred: TensorId,
    /// attention probabilities, `[layer][head]`, each T x T
    pub attn: Vec<Vec<TensorId>>,
    /// fused token matrix z_0, T x D
    pub tokens: TensorId,
}

fn check_finite(tape: &Tape, id: TensorId, what: &'static str, layer: usize) -> Result<()> {
    if tape.values(id).iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { what, layer })
    }
}

/// Run one sample through bound parameters, appending to `tape`.
pub fn forward_on_tape(
    tape: &mut Tape,
    params: &SmtParams,
    binding: &TapeBinding,
    input: &ModelInput,
) -> Result<SampleNodes> {
    input.validate(&params.config)?;
    let config = &params.config;
    let ix = &params.index;
    let leaf = |i: usize| binding.leaves[i];
    let d = config.embed_dim;

    let mut sequence_parts = vec![leaf(ix.pred_token)];

    if config.has_image() {
        let f = config.effective_frames();
        let n = config.n_patches();
        let pd = config.patch_dim();
        let mut patch_values = Vec::with_capacity(f * n * pd);
        for frame in input.images.iter().take(f) {
            patch_values.extend(patchify(frame, config)?);
        }
        let patches = tape.leaf(patch_values, vec![f * n, pd]);
        let (w, bias) = ix.embed_img.expect("image pillar");
        let projected = tape.matmul(patches, leaf(w))?;
        let projected = tape.add_bias(projected, leaf(bias))?;
        let with_pos = tape.add(projected, leaf(ix.pos_img.expect("image pillar")))?;
        // expand the per-frame type vectors over that frame's N token rows
        let type_tensor = &params.tensors[ix.type_img.expect("image pillar")];
        let mut type_rows = Vec::with_capacity(f * n * d);
        for frame in 0..f {
            for _ in 0..n {
                type_rows.extend_from_slice(&type_tensor.values[frame * d..(frame + 1) * d]);
            }
        }
        let type_mat = tape.leaf(type_rows, vec![f * n, d]);
        sequence_parts.push(tape.add(with_pos, type_mat)?);
    }

    if config.has_ts() {
        let m = config.ts_count;
        let mut ts_values = Vec::with_capacity(m * config.ts_len);
        for series in &input.ts {
            ts_values.extend_from_slice(series);
        }
        let ts = tape.leaf(ts_values, vec![m, config.ts_len]);
        let (w, bias) = ix.embed_ts.expect("ts pillar");
        let projected = tape.matmul(ts, leaf(w))?;
        let projected = tape.add_bias(projected, leaf(bias))?;
        let with_pos = tape.add(projected, leaf(ix.pos_ts.expect("ts pillar")))?;
        let type_tensor = &params.tensors[ix.type_ts.expect("ts pillar")];
        let mut type_rows = Vec::with_capacity(m * d);
        for _ in 0..m {
            type_rows.extend_from_slice(&type_tensor.values);
        }
        let type_mat = tape.leaf(type_rows, vec![m, d]);
        sequence_parts.push(tape.add(with_pos, type_mat)?);
    }

    let tokens = tape.concat_rows(&sequence_parts)?;
    check_finite(tape, tokens, "token embedding", 0)?;
    let mut z = tokens;

    let head_dim = config.head_dim();
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut attn_nodes = Vec::with_capacity(config.layers);

    for (l, block) in ix.blocks.iter().enumerate() {
        let normed = tape.layer_norm(z, leaf(block.ln1_g), leaf(block.ln1_b), LN_EPS)?;
        let q = tape.matmul(normed, leaf(block.wq))?;
        let q = tape.add_bias(q, leaf(block.bq))?;
        let k = tape.matmul(normed, leaf(block.wk))?;
        let k = tape.add_bias(k, leaf(block.bk))?;
        let v = tape.matmul(normed, leaf(block.wv))?;
        let v = tape.add_bias(v, leaf(block.bv))?;

        let mut layer_attn = Vec::with_capacity(config.heads);
        let mut head_outputs = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            let qi = tape.slice_cols(q, h * head_dim, head_dim)?;
            let ki = tape.slice_cols(k, h * head_dim, head_dim)?;
            let vi = tape.slice_cols(v, h * head_dim, head_dim)?;
            let ki_t = tape.transpose(ki)?;
            let scores = tape.matmul(qi, ki_t)?;
            let scores = tape.scale(scores, scale);
            let probs = tape.softmax_lastdim(scores);
            layer_attn.push(probs);
            head_outputs.push(tape.matmul(probs, vi)?);
        }
        attn_nodes.push(layer_attn);

        let merged = tape.concat_cols(&head_outputs)?;
        let projected = tape.matmul(merged, leaf(block.wo))?;
        let projected = tape.add_bias(projected, leaf(block.bo))?;
        z = tape.add(z, projected)?;

        let normed2 = tape.layer_norm(z, leaf(block.ln2_g), leaf(block.ln2_b), LN_EPS)?;
        let hidden = tape.matmul(normed2, leaf(block.mlp_w1))?;
        let hidden = tape.add_bias(hidden, leaf(block.mlp_b1))?;
        let hidden = tape.gelu(hidden);
        let out = tape.matmul(hidden, leaf(block.mlp_w2))?;
        let out = tape.add_bias(out, leaf(block.mlp_b2))?;
        z = tape.add(z, out)?;
        check_finite(tape, z, "encoder block", l + 1)?;
    }

    if let Some((g, b)) = ix.final_ln {
        z = tape.layer_norm(z, leaf(g), leaf(b), LN_EPS)?;
    }

    let first = tape.slice_rows(z, 0, 1)?;
    let pred = tape.matmul(first, leaf(ix.head_w))?;
    let pred = tape.add_bias(pred, leaf(ix.head_b))?;
    check_finite(tape, pred, "prediction head", config.layers + 1)?;

    Ok(SampleNodes { pred, attn: attn_nodes, tokens })
}

/// Single-sample convenience forward.
pub fn predict(params: &SmtParams, input: &ModelInput) -> Result<f64> {
    let mut tape = Tape::new();
    let binding = bind_params(&mut tape, params);
    let nodes = forward_on_tape(&mut tape, params, &binding, input)?;
    Ok(tape.scalar(nodes.pred))
}
