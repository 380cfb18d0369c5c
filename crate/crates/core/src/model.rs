//! The generator: encoder, five hierarchical attention blocks with down/up
//! convolutions and skip fusion, decoder, plus the ablation variants.
//!
//! All architecture variants share one forward builder; standalone ops
//! (`self_attention`, `transformer_layer`, ...) wrap the same graph code so
//! tests exercise the real path.

use crate::adam::ParamMap;
use crate::geometry::{hourglass_schedule, GeomError, PatchSequence, StageSpec};
use crate::graph::{Graph, TensorId};
use crate::rng::stream_for;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};
use std::collections::BTreeMap;
use thiserror::Error;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;
/// Encoder output channels; the hourglass ladder is 16/64/256/64/16.
pub const BASE_CHANNELS: usize = 16;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("bad input: {0}")]
    BadInput(String),
}

pub type ModelResult<V> = Result<V, ModelError>;

/// Architecture selector: the full network or one of the ablation arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchVariant {
    /// Full hourglass: 5 blocks, down/up convolutions, skip fusion.
    UAttention,
    /// Three cascaded blocks at a fixed partition (P=2), no down/up, no skips.
    BaselineCascade3,
    /// Three blocks with P = 2,4,8 at constant extent and width, no skips.
    Pyramid3,
    /// P = 2,4,8,4,2 at constant extent and width with skip fusion but
    /// without the down/up convolutions.
    SimplifiedHourglass5,
}

impl ArchVariant {
    pub fn name(self) -> &'static str {
        match self {
            ArchVariant::UAttention => "uattn",
            ArchVariant::BaselineCascade3 => "baseline",
            ArchVariant::Pyramid3 => "pyramid",
            ArchVariant::SimplifiedHourglass5 => "hourglass-simple",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "uattn" => Some(ArchVariant::UAttention),
            "baseline" => Some(ArchVariant::BaselineCascade3),
            "pyramid" => Some(ArchVariant::Pyramid3),
            "hourglass-simple" => Some(ArchVariant::SimplifiedHourglass5),
            _ => None,
        }
    }

    pub fn block_count(self) -> usize {
        match self {
            ArchVariant::UAttention | ArchVariant::SimplifiedHourglass5 => 5,
            ArchVariant::BaselineCascade3 | ArchVariant::Pyramid3 => 3,
        }
    }
}

/// Per-variant stage geometry.
pub fn stage_schedule(variant: ArchVariant, input_hw: usize) -> Result<Vec<StageSpec>, GeomError> {
    if input_hw == 0 || input_hw % 32 != 0 {
        return Err(GeomError::BadInputSize(input_hw));
    }
    let s = input_hw;
    Ok(match variant {
        ArchVariant::UAttention => hourglass_schedule(s, BASE_CHANNELS)?,
        ArchVariant::BaselineCascade3 => (1..=3).map(|i| StageSpec::new(i, s, BASE_CHANNELS, 2)).collect(),
        ArchVariant::Pyramid3 => [2usize, 4, 8]
            .iter()
            .enumerate()
            .map(|(i, &p)| StageSpec::new(i + 1, s, BASE_CHANNELS, p))
            .collect(),
        ArchVariant::SimplifiedHourglass5 => [2usize, 4, 8, 4, 2]
            .iter()
            .enumerate()
            .map(|(i, &p)| StageSpec::new(i + 1, s, BASE_CHANNELS, p))
            .collect(),
    })
}

/// Feed-forward kernel size for a block: 1x1 at the hourglass bottleneck
/// (patches there are tiny), 3x3 everywhere else.
fn ffn_kernel(variant: ArchVariant, stage_index: usize) -> usize {
    match variant {
        ArchVariant::UAttention if stage_index == 3 => 1,
        _ => 3,
    }
}

/// Named parameter store for one architecture variant. Weight shapes do not
/// depend on the input size, so the same weights serve 128 and 256 synthesis.
#[derive(Debug, Clone)]
pub struct ModelWeights<T> {
    pub variant: ArchVariant,
    pub params: ParamMap<T>,
}

impl<T: Scalar> PartialEq for ModelWeights<T> {
    fn eq(&self, other: &Self) -> bool {
        self.variant == other.variant && self.params == other.params
    }
}

impl<T: Scalar> ModelWeights<T> {
    pub fn get(&self, name: &str) -> ModelResult<&Tensor<T>> {
        self.params.get(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        ModelWeights {
            variant: self.variant,
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// He-style scaled uniform draw U(-b, b), b = sqrt(6 / fan_in), from the
/// (seed, name) stream. Values pass through f64 so the f32 build is the
/// rounded image of the f64 build.
pub(crate) fn he_uniform<T: Scalar>(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut rng = stream_for(seed, name);
    Tensor::uniform(shape, -bound, bound, &mut rng)
}

fn push_conv<T: Scalar>(params: &mut ParamMap<T>, seed: u64, name: &str, co: usize, ci: usize, kh: usize, kw: usize) {
    let w_name = format!("{name}.w");
    params.insert(w_name.clone(), he_uniform(seed, &w_name, &[co, ci, kh, kw], ci * kh * kw));
    params.insert(format!("{name}.b"), Tensor::zeros(&[co]));
}

fn push_block<T: Scalar>(params: &mut ParamMap<T>, seed: u64, block: usize, c: usize, k: usize) {
    for layer in 1..=2 {
        let pre = format!("tb{block}.l{layer}");
        for proj in ["wq", "wk", "wv", "wo"] {
            push_conv(params, seed, &format!("{pre}.{proj}"), c, c, 1, 1);
        }
        push_conv(params, seed, &format!("{pre}.ffn"), c, c, k, k);
        for norm in ["n1", "n2"] {
            params.insert(format!("{pre}.{norm}.g"), Tensor::full(&[c], T::one()));
            params.insert(format!("{pre}.{norm}.b"), Tensor::zeros(&[c]));
        }
    }
}

/// Deterministic weight construction: same seed, same bytes.
pub fn build_model<T: Scalar>(variant: ArchVariant, input_hw: usize, seed: u64) -> ModelResult<ModelWeights<T>> {
    let schedule = stage_schedule(variant, input_hw)?;
    let bc = BASE_CHANNELS;
    let mut params: ParamMap<T> = ParamMap::new();
    push_conv(&mut params, seed, "enc.c1", bc, 3, 3, 3);
    push_conv(&mut params, seed, "enc.c2", bc, bc, 1, 1);
    for spec in &schedule {
        push_block(&mut params, seed, spec.index, spec.c, ffn_kernel(variant, spec.index));
    }
    match variant {
        ArchVariant::UAttention => {
            push_conv(&mut params, seed, "down1.c1", 4 * bc, bc, 4, 4);
            push_conv(&mut params, seed, "down1.c2", 4 * bc, 4 * bc, 1, 1);
            push_conv(&mut params, seed, "down2.c1", 16 * bc, 4 * bc, 4, 4);
            push_conv(&mut params, seed, "down2.c2", 16 * bc, 16 * bc, 1, 1);
            push_conv(&mut params, seed, "up1.c1", 4 * bc, 16 * bc, 1, 1);
            push_conv(&mut params, seed, "up1.c2", 4 * bc, 4 * bc, 1, 1);
            push_conv(&mut params, seed, "up2.c1", bc, 4 * bc, 1, 1);
            push_conv(&mut params, seed, "up2.c2", bc, bc, 1, 1);
            push_conv(&mut params, seed, "fuse1.c1", 4 * bc, 8 * bc, 1, 1);
            push_conv(&mut params, seed, "fuse1.c2", 4 * bc, 4 * bc, 1, 1);
            push_conv(&mut params, seed, "fuse2.c1", bc, 2 * bc, 1, 1);
            push_conv(&mut params, seed, "fuse2.c2", bc, bc, 1, 1);
        }
        ArchVariant::SimplifiedHourglass5 => {
            push_conv(&mut params, seed, "fuse1.c1", bc, 2 * bc, 1, 1);
            push_conv(&mut params, seed, "fuse1.c2", bc, bc, 1, 1);
            push_conv(&mut params, seed, "fuse2.c1", bc, 2 * bc, 1, 1);
            push_conv(&mut params, seed, "fuse2.c2", bc, bc, 1, 1);
        }
        _ => {}
    }
    push_conv(&mut params, seed, "dec.c1", 3, bc, 3, 3);
    push_conv(&mut params, seed, "dec.c2", 3, 3, 1, 1);
    Ok(ModelWeights { variant, params })
}

// ---- in-graph builders --------------------------------------------------

pub(crate) type LeafMap = BTreeMap<String, TensorId>;

/// Insert every weight as a graph leaf.
pub(crate) fn leaf_params<T: Scalar>(g: &mut Graph<T>, weights: &ModelWeights<T>, requires_grad: bool) -> LeafMap {
    weights
        .params
        .iter()
        .map(|(name, t)| (name.clone(), g.leaf_labeled(t.clone(), requires_grad, name)))
        .collect()
}

fn lookup(ids: &LeafMap, name: &str) -> ModelResult<TensorId> {
    ids.get(name).copied().ok_or_else(|| ModelError::MissingParam(name.to_string()))
}

fn conv_named<T: Scalar>(
    g: &mut Graph<T>,
    ids: &LeafMap,
    name: &str,
    x: TensorId,
    stride: usize,
    pad: usize,
) -> ModelResult<TensorId> {
    let w = lookup(ids, &format!("{name}.w"))?;
    let b = lookup(ids, &format!("{name}.b"))?;
    Ok(g.conv2d(x, w, b, stride, pad)?)
}

fn conv_lrelu<T: Scalar>(
    g: &mut Graph<T>,
    ids: &LeafMap,
    name: &str,
    x: TensorId,
    stride: usize,
    pad: usize,
) -> ModelResult<TensorId> {
    let y = conv_named(g, ids, name, x, stride, pad)?;
    Ok(g.leaky_relu(y, LEAKY_SLOPE)?)
}

pub(crate) fn encode_graph<T: Scalar>(g: &mut Graph<T>, ids: &LeafMap, img: TensorId) -> ModelResult<TensorId> {
    let x = conv_lrelu(g, ids, "enc.c1", img, 1, 1)?;
    conv_lrelu(g, ids, "enc.c2", x, 1, 0)
}

pub(crate) fn decode_graph<T: Scalar>(g: &mut Graph<T>, ids: &LeafMap, feat: TensorId) -> ModelResult<TensorId> {
    let x = conv_lrelu(g, ids, "dec.c1", feat, 1, 1)?;
    let y = conv_named(g, ids, "dec.c2", x, 1, 0)?;
    Ok(g.tanh(y)?)
}

pub(crate) fn conv_down_graph<T: Scalar>(g: &mut Graph<T>, ids: &LeafMap, i: usize, x: TensorId) -> ModelResult<TensorId> {
    let y = conv_lrelu(g, ids, &format!("down{i}.c1"), x, 2, 1)?;
    conv_lrelu(g, ids, &format!("down{i}.c2"), y, 1, 0)
}

pub(crate) fn conv_up_graph<T: Scalar>(g: &mut Graph<T>, ids: &LeafMap, i: usize, x: TensorId) -> ModelResult<TensorId> {
    let up = g.bilinear_up2x(x)?;
    let y = conv_lrelu(g, ids, &format!("up{i}.c1"), up, 1, 0)?;
    conv_lrelu(g, ids, &format!("up{i}.c2"), y, 1, 0)
}

pub(crate) fn conv_fuse_graph<T: Scalar>(
    g: &mut Graph<T>,
    ids: &LeafMap,
    i: usize,
    skip: TensorId,
    up: TensorId,
) -> ModelResult<TensorId> {
    let cat = g.concat_channels(skip, up)?;
    let y = conv_lrelu(g, ids, &format!("fuse{i}.c1"), cat, 1, 0)?;
    conv_lrelu(g, ids, &format!("fuse{i}.c2"), y, 1, 0)
}

/// Patch self-attention of one layer. Returns the transformed map and the
/// row-stochastic attention matrix node.
fn attention_graph<T: Scalar>(
    g: &mut Graph<T>,
    ids: &LeafMap,
    prefix: &str,
    map: TensorId,
    stage: &StageSpec,
) -> ModelResult<(TensorId, TensorId)> {
    let q_map = conv_named(g, ids, &format!("{prefix}.wq"), map, 1, 0)?;
    let k_map = conv_named(g, ids, &format!("{prefix}.wk"), map, 1, 0)?;
    let v_map = conv_named(g, ids, &format!("{prefix}.wv"), map, 1, 0)?;
    let q = g.patches_to_rows(q_map, stage.p)?;
    let kk = g.patches_to_rows(k_map, stage.p)?;
    let v = g.patches_to_rows(v_map, stage.p)?;
    let logits = g.matmul_bt(q, kk)?;
    let scaled = g.scale(logits, 1.0 / (stage.d as f64).sqrt())?;
    let attn = g.softmax_rows(scaled)?;
    let out_rows = g.matmul(attn, v)?;
    let out_map = g.rows_to_map(out_rows, stage.p, (stage.c, stage.h, stage.w))?;
    let projected = conv_named(g, ids, &format!("{prefix}.wo"), out_map, 1, 0)?;
    Ok((projected, attn))
}

/// One transformer layer: post-norm residual attention, then a per-patch
/// feed-forward convolution with zero padding, again post-norm residual.
fn transformer_layer_graph<T: Scalar>(
    g: &mut Graph<T>,
    ids: &LeafMap,
    prefix: &str,
    map: TensorId,
    stage: &StageSpec,
    k: usize,
) -> ModelResult<(TensorId, TensorId)> {
    let (attn_out, attn) = attention_graph(g, ids, prefix, map, stage)?;
    let res1 = g.add(map, attn_out)?;
    let n1g = lookup(ids, &format!("{prefix}.n1.g"))?;
    let n1b = lookup(ids, &format!("{prefix}.n1.b"))?;
    let x1 = g.layer_norm_channels(res1, n1g, n1b, NORM_EPS)?;

    let pb = g.map_to_patch_batch(x1, stage.p)?;
    let fw = lookup(ids, &format!("{prefix}.ffn.w"))?;
    let fb = lookup(ids, &format!("{prefix}.ffn.b"))?;
    let f = g.conv2d(pb, fw, fb, 1, (k - 1) / 2)?;
    let f = g.leaky_relu(f, LEAKY_SLOPE)?;
    let fm = g.patch_batch_to_map(f, stage.p)?;

    let res2 = g.add(x1, fm)?;
    let n2g = lookup(ids, &format!("{prefix}.n2.g"))?;
    let n2b = lookup(ids, &format!("{prefix}.n2.b"))?;
    let out = g.layer_norm_channels(res2, n2g, n2b, NORM_EPS)?;
    Ok((out, attn))
}

/// Two stacked transformer layers.
fn t_block_graph<T: Scalar>(
    g: &mut Graph<T>,
    ids: &LeafMap,
    block: usize,
    map: TensorId,
    stage: &StageSpec,
    k: usize,
) -> ModelResult<(TensorId, Vec<TensorId>)> {
    let (x1, a1) = transformer_layer_graph(g, ids, &format!("tb{block}.l1"), map, stage, k)?;
    let (x2, a2) = transformer_layer_graph(g, ids, &format!("tb{block}.l2"), x1, stage, k)?;
    Ok((x2, vec![a1, a2]))
}

/// Attention matrices and stage geometry captured during a forward pass.
#[derive(Debug, Clone)]
pub struct StageCapture<T> {
    /// 1-based stage index.
    pub stage: usize,
    pub geom: StageSpec,
    /// Channel-mean of the block's input feature map, `[H, W]`.
    pub input_mean: Tensor<T>,
    /// One `[P*P, P*P]` row-stochastic matrix per transformer layer.
    pub attention: Vec<Tensor<T>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    pub capture_attention: bool,
    pub trace_shapes: bool,
}

pub(crate) struct GraphForward<T> {
    pub output: TensorId,
    pub stages: Vec<StageCapture<T>>,
    pub shapes: Vec<(String, Vec<usize>)>,
}

fn channel_mean<T: Scalar>(g: &Graph<T>, map: TensorId) -> Tensor<T> {
    let shape = g.shape(map);
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let data = g.value(map);
    let mut out = vec![T::zero(); h * w];
    for ci in 0..c {
        for (o, &v) in out.iter_mut().zip(&data[ci * h * w..(ci + 1) * h * w]) {
            *o = *o + v;
        }
    }
    let cf = T::of_usize(c);
    for o in out.iter_mut() {
        *o = *o / cf;
    }
    Tensor::new(vec![h, w], out).expect("consistent")
}

/// Full generator forward on an existing graph. `img` must be `[1,3,S,S]`
/// with `S` divisible by 32 and matching the weights' variant schedule.
pub(crate) fn forward_on_graph<T: Scalar>(
    g: &mut Graph<T>,
    ids: &LeafMap,
    variant: ArchVariant,
    img: TensorId,
    opts: ForwardOptions,
) -> ModelResult<GraphForward<T>> {
    let shape = g.shape(img).to_vec();
    if shape.len() != 4 || shape[0] != 1 || shape[1] != 3 || shape[2] != shape[3] {
        return Err(ModelError::BadInput(format!("expected [1,3,S,S] input, got {shape:?}")));
    }
    let s = shape[2];
    let schedule = stage_schedule(variant, s)?;
    let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
    let mut stages: Vec<StageCapture<T>> = Vec::new();

    macro_rules! record {
        ($name:expr, $id:expr) => {
            if opts.trace_shapes {
                shapes.push(($name.to_string(), g.shape($id).to_vec()));
            }
        };
    }

    let mut run_block = |g: &mut Graph<T>,
                         block: usize,
                         map: TensorId,
                         shapes: &mut Vec<(String, Vec<usize>)>,
                         stages: &mut Vec<StageCapture<T>>|
     -> ModelResult<TensorId> {
        let stage = schedule[block - 1];
        if opts.capture_attention {
            stages.push(StageCapture {
                stage: block,
                geom: stage,
                input_mean: channel_mean(g, map),
                attention: Vec::new(),
            });
        }
        if opts.trace_shapes {
            let d = stage.d;
            shapes.push((format!("tb{block}.rows"), vec![stage.p * stage.p, d]));
        }
        let (out, attns) = t_block_graph(g, ids, block, map, &stage, ffn_kernel(variant, stage.index))?;
        if opts.capture_attention {
            let cap = stages.last_mut().expect("pushed above");
            cap.attention = attns.iter().map(|&a| g.detach(a)).collect();
        }
        if opts.trace_shapes {
            shapes.push((format!("tb{block}.out"), g.shape(out).to_vec()));
        }
        Ok(out)
    };

    let enc = encode_graph(g, ids, img)?;
    record!("enc.out", enc);

    let out = match variant {
        ArchVariant::UAttention => {
            let t1 = run_block(g, 1, enc, &mut shapes, &mut stages)?;
            let d1 = conv_down_graph(g, ids, 1, t1)?;
            record!("down1.out", d1);
            let t2 = run_block(g, 2, d1, &mut shapes, &mut stages)?;
            let d2 = conv_down_graph(g, ids, 2, t2)?;
            record!("down2.out", d2);
            let t3 = run_block(g, 3, d2, &mut shapes, &mut stages)?;
            let u1 = conv_up_graph(g, ids, 1, t3)?;
            record!("up1.out", u1);
            let f1 = conv_fuse_graph(g, ids, 1, t2, u1)?;
            record!("fuse1.out", f1);
            let t4 = run_block(g, 4, f1, &mut shapes, &mut stages)?;
            let u2 = conv_up_graph(g, ids, 2, t4)?;
            record!("up2.out", u2);
            let f2 = conv_fuse_graph(g, ids, 2, t1, u2)?;
            record!("fuse2.out", f2);
            run_block(g, 5, f2, &mut shapes, &mut stages)?
        }
        ArchVariant::BaselineCascade3 | ArchVariant::Pyramid3 => {
            let t1 = run_block(g, 1, enc, &mut shapes, &mut stages)?;
            let t2 = run_block(g, 2, t1, &mut shapes, &mut stages)?;
            run_block(g, 3, t2, &mut shapes, &mut stages)?
        }
        ArchVariant::SimplifiedHourglass5 => {
            let t1 = run_block(g, 1, enc, &mut shapes, &mut stages)?;
            let t2 = run_block(g, 2, t1, &mut shapes, &mut stages)?;
            let t3 = run_block(g, 3, t2, &mut shapes, &mut stages)?;
            let f1 = conv_fuse_graph(g, ids, 1, t2, t3)?;
            record!("fuse1.out", f1);
            let t4 = run_block(g, 4, f1, &mut shapes, &mut stages)?;
            let f2 = conv_fuse_graph(g, ids, 2, t1, t4)?;
            record!("fuse2.out", f2);
            run_block(g, 5, f2, &mut shapes, &mut stages)?
        }
    };

    let dec = decode_graph(g, ids, out)?;
    record!("dec.out", dec);
    Ok(GraphForward { output: dec, stages, shapes })
}

/// Result of a standalone forward pass.
#[derive(Debug, Clone)]
pub struct ForwardRecord<T> {
    /// Synthesized image `[3,S,S]`, values strictly inside (-1, 1).
    pub output: Tensor<T>,
    pub stages: Vec<StageCapture<T>>,
    pub shapes: Vec<(String, Vec<usize>)>,
}

/// Run the generator on one `[3,S,S]` image.
pub fn forward<T: Scalar>(image: &Tensor<T>, weights: &ModelWeights<T>, opts: ForwardOptions) -> ModelResult<ForwardRecord<T>> {
    let [c, h, w] = *image.shape() else {
        return Err(ModelError::BadInput(format!("expected [3,S,S] image, got {:?}", image.shape())));
    };
    if c != 3 || h != w {
        return Err(ModelError::BadInput(format!("expected [3,S,S] image, got {:?}", image.shape())));
    }
    let mut g: Graph<T> = Graph::new();
    let ids = leaf_params(&mut g, weights, false);
    let img = g.leaf(image.clone().reshaped(vec![1, 3, h, w])?, false);
    let built = forward_on_graph(&mut g, &ids, weights.variant, img, opts)?;
    let output = g.detach(built.output).reshaped(vec![3, h, w])?;
    Ok(ForwardRecord { output, stages: built.stages, shapes: built.shapes })
}

// ---- standalone ops over plain tensors -----------------------------------

/// 1x1 projection weights of one attention layer.
#[derive(Debug, Clone)]
pub struct ConvParams<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

/// Query/key/value embeddings plus the output projection.
#[derive(Debug, Clone)]
pub struct AttentionParams<T> {
    pub wq: ConvParams<T>,
    pub wk: ConvParams<T>,
    pub wv: ConvParams<T>,
    pub wo: ConvParams<T>,
}

impl<T: Scalar> AttentionParams<T> {
    /// Seeded random parameters for a channel width (test helper).
    pub fn seeded(c: usize, seed: u64) -> Self {
        let conv = |tag: &str| ConvParams {
            w: he_uniform(seed, tag, &[c, c, 1, 1], c),
            b: Tensor::zeros(&[c]),
        };
        AttentionParams { wq: conv("wq"), wk: conv("wk"), wv: conv("wv"), wo: conv("wo") }
    }
}

/// Full parameter set of one transformer layer.
#[derive(Debug, Clone)]
pub struct LayerParams<T> {
    pub attn: AttentionParams<T>,
    pub ffn: ConvParams<T>,
    pub ffn_kernel: usize,
    pub norm1: (Tensor<T>, Tensor<T>),
    pub norm2: (Tensor<T>, Tensor<T>),
}

impl<T: Scalar> LayerParams<T> {
    pub fn seeded(c: usize, k: usize, seed: u64) -> Self {
        LayerParams {
            attn: AttentionParams::seeded(c, seed),
            ffn: ConvParams { w: he_uniform(seed, "ffn", &[c, c, k, k], c * k * k), b: Tensor::zeros(&[c]) },
            ffn_kernel: k,
            norm1: (Tensor::full(&[c], T::one()), Tensor::zeros(&[c])),
            norm2: (Tensor::full(&[c], T::one()), Tensor::zeros(&[c])),
        }
    }
}

impl<T: Scalar> ModelWeights<T> {
    /// Extract one layer's parameters by (block, layer) coordinates.
    pub fn layer_params(&self, block: usize, layer: usize) -> ModelResult<LayerParams<T>> {
        let pre = format!("tb{block}.l{layer}");
        let conv = |tag: &str| -> ModelResult<ConvParams<T>> {
            Ok(ConvParams { w: self.get(&format!("{pre}.{tag}.w"))?.clone(), b: self.get(&format!("{pre}.{tag}.b"))?.clone() })
        };
        let ffn = conv("ffn")?;
        let k = ffn.w.shape()[2];
        Ok(LayerParams {
            attn: AttentionParams { wq: conv("wq")?, wk: conv("wk")?, wv: conv("wv")?, wo: conv("wo")? },
            ffn,
            ffn_kernel: k,
            norm1: (self.get(&format!("{pre}.n1.g"))?.clone(), self.get(&format!("{pre}.n1.b"))?.clone()),
            norm2: (self.get(&format!("{pre}.n2.g"))?.clone(), self.get(&format!("{pre}.n2.b"))?.clone()),
        })
    }
}

fn attn_leafs<T: Scalar>(g: &mut Graph<T>, params: &AttentionParams<T>, prefix: &str) -> LeafMap {
    let mut ids = LeafMap::new();
    for (tag, cp) in [("wq", &params.wq), ("wk", &params.wk), ("wv", &params.wv), ("wo", &params.wo)] {
        ids.insert(format!("{prefix}.{tag}.w"), g.leaf(cp.w.clone(), false));
        ids.insert(format!("{prefix}.{tag}.b"), g.leaf(cp.b.clone(), false));
    }
    ids
}

/// Patch self-attention over a sequence, returning the new sequence and
/// the `[P*P, P*P]` attention matrix.
pub fn self_attention<T: Scalar>(
    seq: &PatchSequence<T>,
    params: &AttentionParams<T>,
) -> ModelResult<(PatchSequence<T>, Tensor<T>)> {
    let map = crate::geometry::arrange_back(seq)?;
    let spec = seq.origin;
    let mut g: Graph<T> = Graph::new();
    let ids = attn_leafs(&mut g, params, "a");
    let x = g.leaf(map.reshaped(vec![1, spec.c, spec.h, spec.w])?, false);
    let (out, attn) = attention_graph(&mut g, &ids, "a", x, &spec)?;
    let out_map = g.detach(out).reshaped(vec![spec.c, spec.h, spec.w])?;
    let mut out_seq = crate::geometry::partition(&out_map, spec.p)?;
    out_seq.origin.index = spec.index;
    Ok((out_seq, g.detach(attn)))
}

fn layer_leafs<T: Scalar>(g: &mut Graph<T>, params: &LayerParams<T>, prefix: &str) -> LeafMap {
    let mut ids = attn_leafs(g, &params.attn, prefix);
    ids.insert(format!("{prefix}.ffn.w"), g.leaf(params.ffn.w.clone(), false));
    ids.insert(format!("{prefix}.ffn.b"), g.leaf(params.ffn.b.clone(), false));
    ids.insert(format!("{prefix}.n1.g"), g.leaf(params.norm1.0.clone(), false));
    ids.insert(format!("{prefix}.n1.b"), g.leaf(params.norm1.1.clone(), false));
    ids.insert(format!("{prefix}.n2.g"), g.leaf(params.norm2.0.clone(), false));
    ids.insert(format!("{prefix}.n2.b"), g.leaf(params.norm2.1.clone(), false));
    ids
}

/// One transformer layer over a plain `[C,H,W]` map.
pub fn transformer_layer<T: Scalar>(map: &Tensor<T>, stage: &StageSpec, params: &LayerParams<T>) -> ModelResult<Tensor<T>> {
    let [c, h, w] = *map.shape() else {
        return Err(ModelError::BadInput(format!("expected [C,H,W], got {:?}", map.shape())));
    };
    if (c, h, w) != (stage.c, stage.h, stage.w) {
        return Err(ModelError::BadInput(format!("map {:?} does not match stage {stage:?}", map.shape())));
    }
    let mut g: Graph<T> = Graph::new();
    let ids = layer_leafs(&mut g, params, "l");
    let x = g.leaf(map.clone().reshaped(vec![1, c, h, w])?, false);
    let (out, _) = transformer_layer_graph(&mut g, &ids, "l", x, stage, params.ffn_kernel)?;
    Ok(g.detach(out).reshaped(vec![c, h, w])?)
}

/// Two stacked transformer layers over a plain map.
pub fn t_block<T: Scalar>(map: &Tensor<T>, stage: &StageSpec, layers: &[LayerParams<T>; 2]) -> ModelResult<Tensor<T>> {
    let x1 = transformer_layer(map, stage, &layers[0])?;
    transformer_layer(&x1, stage, &layers[1])
}

macro_rules! standalone_map_op {
    ($fname:ident, $builder:ident) => {
        /// Standalone wrapper over the in-graph builder; takes and returns
        /// plain `[C,H,W]` maps.
        pub fn $fname<T: Scalar>(map: &Tensor<T>, weights: &ModelWeights<T>, i: usize) -> ModelResult<Tensor<T>> {
            let [c, h, w] = *map.shape() else {
                return Err(ModelError::BadInput(format!("expected [C,H,W], got {:?}", map.shape())));
            };
            let mut g: Graph<T> = Graph::new();
            let ids = leaf_params(&mut g, weights, false);
            let x = g.leaf(map.clone().reshaped(vec![1, c, h, w])?, false);
            let out = $builder(&mut g, &ids, i, x)?;
            let os = g.shape(out).to_vec();
            Ok(g.detach(out).reshaped(vec![os[1], os[2], os[3]])?)
        }
    };
}

standalone_map_op!(conv_down, conv_down_graph);
standalone_map_op!(conv_up, conv_up_graph);

/// Fuse a skip map with an upsampled map (channel concat + two 1x1 convs).
pub fn conv_fuse<T: Scalar>(skip: &Tensor<T>, up: &Tensor<T>, weights: &ModelWeights<T>, i: usize) -> ModelResult<Tensor<T>> {
    let [cs, h, w] = *skip.shape() else {
        return Err(ModelError::BadInput(format!("expected [C,H,W], got {:?}", skip.shape())));
    };
    let [cu, hu, wu] = *up.shape() else {
        return Err(ModelError::BadInput(format!("expected [C,H,W], got {:?}", up.shape())));
    };
    let mut g: Graph<T> = Graph::new();
    let ids = leaf_params(&mut g, weights, false);
    let s = g.leaf(skip.clone().reshaped(vec![1, cs, h, w])?, false);
    let u = g.leaf(up.clone().reshaped(vec![1, cu, hu, wu])?, false);
    let out = conv_fuse_graph(&mut g, &ids, i, s, u)?;
    let os = g.shape(out).to_vec();
    Ok(g.detach(out).reshaped(vec![os[1], os[2], os[3]])?)
}

/// Project an image into feature space: `[3,H,W] -> [16,H,W]`.
pub fn encode<T: Scalar>(image: &Tensor<T>, weights: &ModelWeights<T>) -> ModelResult<Tensor<T>> {
    let [c, h, w] = *image.shape() else {
        return Err(ModelError::BadInput(format!("expected [3,H,W], got {:?}", image.shape())));
    };
    if c != 3 {
        return Err(ModelError::BadInput(format!("expected 3 channels, got {c}")));
    }
    let mut g: Graph<T> = Graph::new();
    let ids = leaf_params(&mut g, weights, false);
    let x = g.leaf(image.clone().reshaped(vec![1, 3, h, w])?, false);
    let out = encode_graph(&mut g, &ids, x)?;
    Ok(g.detach(out).reshaped(vec![BASE_CHANNELS, h, w])?)
}

/// Decode features back to an image: `[16,H,W] -> [3,H,W]`, range (-1, 1).
pub fn decode<T: Scalar>(feat: &Tensor<T>, weights: &ModelWeights<T>) -> ModelResult<Tensor<T>> {
    let [c, h, w] = *feat.shape() else {
        return Err(ModelError::BadInput(format!("expected [16,H,W], got {:?}", feat.shape())));
    };
    if c != BASE_CHANNELS {
        return Err(ModelError::BadInput(format!("expected {BASE_CHANNELS} channels, got {c}")));
    }
    let mut g: Graph<T> = Graph::new();
    let ids = leaf_params(&mut g, weights, false);
    let x = g.leaf(feat.clone().reshaped(vec![1, c, h, w])?, false);
    let out = decode_graph(&mut g, &ids, x)?;
    Ok(g.detach(out).reshaped(vec![3, h, w])?)
}
