//! Set-prediction network: patch-embedding backbone, transformer
//! encoder-decoder over learned queries, and two shared MLP heads
//! (hand type with a no-hand class, and 21 joints in normalized UVD).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, HandSide, JointSetUVD, NUM_JOINTS};
use crate::image::Image;
use crate::nn::graph::Graph;
use crate::nn::layers::{self, init_attention, init_layer_norm, init_linear, init_mlp};
use crate::nn::{softmax, NnError, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

/// Classification outputs per query: left, right, no hand.
pub const NUM_CLASSES: usize = 3;
pub const NO_HAND_CLASS: usize = 2;
/// 21 joints times (u, v, d).
pub const JOINT_OUTPUTS: usize = NUM_JOINTS * 3;
/// Decoded depths never go below this many millimeters.
pub const MIN_DECODED_DEPTH_MM: f64 = 1.0;
/// Parameters whose name starts with this prefix form the backbone group.
pub const BACKBONE_PREFIX: &str = "backbone.";

const CLASS_HEAD_LAYERS: usize = 2;
const JOINT_HEAD_LAYERS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DepthMode {
    /// Every joint depth is an absolute value in `[z_min, z_max]`.
    AbsolutePerJoint,
    /// Wrist depth absolute; other joints as offsets within `±δ` of the wrist.
    RootPlusRelative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionEncoding {
    Sinusoidal,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub n_queries: usize,
    pub ffn_dim: usize,
    pub depth_mode: DepthMode,
    /// `[z_min, z_max]` in mm.
    pub depth_range: [f64; 2],
    /// δ in mm.
    pub relative_depth_half_range: f64,
    pub position_encoding: PositionEncoding,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            patch_size: 8,
            embed_dim: 32,
            n_heads: 4,
            n_encoder_layers: 6,
            n_decoder_layers: 6,
            n_queries: 4,
            ffn_dim: 64,
            depth_mode: DepthMode::AbsolutePerJoint,
            depth_range: [200.0, 1000.0],
            relative_depth_half_range: 150.0,
            position_encoding: PositionEncoding::Sinusoidal,
        }
    }
}

impl ModelConfig {
    /// 32x32 input, 8-pixel patches, width 16, one encoder and one decoder
    /// layer, two heads, three queries.
    pub fn tiny() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            patch_size: 8,
            embed_dim: 16,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            n_queries: 3,
            ffn_dim: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.patch_size == 0 || self.image_height == 0 || self.image_width == 0 {
            return err("image and patch sizes must be positive");
        }
        if self.image_height % self.patch_size != 0 || self.image_width % self.patch_size != 0 {
            return err("image dims must be divisible by patch_size");
        }
        if self.embed_dim == 0 || self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return err("embed_dim must be a positive multiple of n_heads");
        }
        if self.position_encoding == PositionEncoding::Sinusoidal && self.embed_dim % 4 != 0 {
            return err("sinusoidal position encodings need embed_dim divisible by 4");
        }
        if self.n_queries < 2 {
            return err("n_queries must be at least 2");
        }
        if self.ffn_dim == 0 {
            return err("ffn_dim must be positive");
        }
        let [z_min, z_max] = self.depth_range;
        if !(z_min > 0.0 && z_max > z_min && z_max.is_finite()) {
            return err("depth_range must satisfy 0 < z_min < z_max");
        }
        if !(self.relative_depth_half_range > 0.0 && self.relative_depth_half_range.is_finite()) {
            return err("relative_depth_half_range must be positive");
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch_size, self.image_width / self.patch_size)
    }

    pub fn n_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// One query's raw outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryPrediction<T> {
    class_logits: [T; NUM_CLASSES],
    joints_norm: Vec<T>,
}

impl<T: Scalar> QueryPrediction<T> {
    pub fn new(class_logits: [T; NUM_CLASSES], joints_norm: Vec<T>) -> Result<Self, ModelError> {
        if joints_norm.len() != JOINT_OUTPUTS {
            return Err(ModelError::Shape(format!("expected {JOINT_OUTPUTS} joint values, got {}", joints_norm.len())));
        }
        Ok(Self { class_logits, joints_norm })
    }

    pub fn class_logits(&self) -> &[T; NUM_CLASSES] {
        &self.class_logits
    }

    pub fn class_probs(&self) -> Vec<T> {
        softmax(&self.class_logits)
    }

    /// `(u, v, d)` per joint, interleaved.
    pub fn joints_norm(&self) -> &[T] {
        &self.joints_norm
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet<T> {
    pub queries: Vec<QueryPrediction<T>>,
}

impl<T: Scalar> DetectionSet<T> {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

fn sinusoid_1d(pos: f64, dim: usize, out: &mut [f64]) {
    for i in 0..dim / 2 {
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        out[2 * i] = (pos * freq).sin();
        out[2 * i + 1] = (pos * freq).cos();
    }
}

/// Fixed 2D sinusoidal encodings, one row per patch in row-major grid order;
/// the first half of the features encodes the patch row, the second half
/// the patch column.
pub fn sinusoidal_position_encoding<T: Scalar>(grid_rows: usize, grid_cols: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = Tensor::zeros(grid_rows * grid_cols, dim);
    let mut buf = vec![0.0; half];
    for r in 0..grid_rows {
        for c in 0..grid_cols {
            let row = out.row_mut(r * grid_cols + c);
            sinusoid_1d(r as f64, half, &mut buf);
            for (o, &v) in row[..half].iter_mut().zip(&buf) {
                *o = T::of(v);
            }
            sinusoid_1d(c as f64, half, &mut buf);
            for (o, &v) in row[half..].iter_mut().zip(&buf) {
                *o = T::of(v);
            }
        }
    }
    out
}

/// Flattens non-overlapping patches into rows, each in (row, col, channel) order.
pub fn patchify<T: Scalar>(image: &Image, cfg: &ModelConfig) -> Result<Tensor<T>, ModelError> {
    if image.height() != cfg.image_height || image.width() != cfg.image_width || image.channels() != 3 {
        return Err(ModelError::Shape(format!(
            "image is {}x{}x{}, model expects {}x{}x3",
            image.height(),
            image.width(),
            image.channels(),
            cfg.image_height,
            cfg.image_width
        )));
    }
    let p = cfg.patch_size;
    let (gr, gc) = cfg.grid();
    let mut out = Tensor::zeros(gr * gc, cfg.patch_dim());
    for pr in 0..gr {
        for pc in 0..gc {
            let row = out.row_mut(pr * gc + pc);
            let mut k = 0;
            for y in 0..p {
                for x in 0..p {
                    for ch in 0..3 {
                        row[k] = T::of(image.get(pr * p + y, pc * p + x, ch) as f64);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Deterministic initialization: linear weights uniform in
/// `±sqrt(6 / (fan_in + fan_out))`, biases zero, normalization gains one.
pub fn build_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let d = cfg.embed_dim;
    init_linear(&mut s, &mut rng, "backbone.patch", cfg.patch_dim(), d)?;
    if cfg.position_encoding == PositionEncoding::Learned {
        s.init_uniform("backbone.pos_embed", cfg.n_patches(), d, cfg.n_patches(), d, &mut rng)?;
    }
    for i in 0..cfg.n_encoder_layers {
        let p = format!("encoder.{i}");
        init_attention(&mut s, &mut rng, &format!("{p}.self_attn"), d)?;
        init_layer_norm(&mut s, &format!("{p}.norm1"), d)?;
        init_mlp(&mut s, &mut rng, &format!("{p}.ffn"), &[d, cfg.ffn_dim, d])?;
        init_layer_norm(&mut s, &format!("{p}.norm2"), d)?;
    }
    s.init_uniform("decoder.query_embed", cfg.n_queries, d, cfg.n_queries, d, &mut rng)?;
    for i in 0..cfg.n_decoder_layers {
        let p = format!("decoder.{i}");
        init_attention(&mut s, &mut rng, &format!("{p}.self_attn"), d)?;
        init_layer_norm(&mut s, &format!("{p}.norm1"), d)?;
        init_attention(&mut s, &mut rng, &format!("{p}.cross_attn"), d)?;
        init_layer_norm(&mut s, &format!("{p}.norm2"), d)?;
        init_mlp(&mut s, &mut rng, &format!("{p}.ffn"), &[d, cfg.ffn_dim, d])?;
        init_layer_norm(&mut s, &format!("{p}.norm3"), d)?;
    }
    init_mlp(&mut s, &mut rng, "head.class", &[d, d, NUM_CLASSES])?;
    init_mlp(&mut s, &mut rng, "head.joints", &[d, d, d, JOINT_OUTPUTS])?;
    Ok(s)
}

/// Graph nodes for the two heads: `logits` is `n_queries x 3`, `joints` is
/// `n_queries x 63` after the sigmoid.
#[derive(Debug, Clone, Copy)]
pub struct DetectionVars {
    pub logits: Var,
    pub joints: Var,
}

/// Records the full forward pass for `image` on `g`.
pub fn forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    image: &Image,
) -> Result<DetectionVars, ModelError> {
    let tokens = patchify(image, cfg)?;
    let tokens = g.input(tokens);
    let pos = match cfg.position_encoding {
        PositionEncoding::Sinusoidal => {
            let (gr, gc) = cfg.grid();
            g.input(sinusoidal_position_encoding(gr, gc, cfg.embed_dim))
        }
        PositionEncoding::Learned => g.param(params, "backbone.pos_embed")?,
    };
    forward_tokens_graph(g, params, cfg, tokens, pos)
}

/// Forward pass from flattened patches and their position encodings. Rows of
/// `tokens` and `pos` correspond one to one.
pub fn forward_tokens_graph<T: Scalar>(
    g: &mut Graph<T>,
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    tokens: Var,
    pos: Var,
) -> Result<DetectionVars, ModelError> {
    let h = cfg.n_heads;
    let mut x = layers::linear(g, params, "backbone.patch", tokens)?;
    for i in 0..cfg.n_encoder_layers {
        let p = format!("encoder.{i}");
        let q = g.add(x, pos)?;
        let a = layers::multi_head_attention(g, params, &format!("{p}.self_attn"), q, q, x, h)?;
        let r = g.add(x, a)?;
        x = layers::layer_norm(g, params, &format!("{p}.norm1"), r)?;
        let f = layers::mlp(g, params, &format!("{p}.ffn"), 2, x)?;
        let r = g.add(x, f)?;
        x = layers::layer_norm(g, params, &format!("{p}.norm2"), r)?;
    }
    let memory = x;
    let memory_keys = g.add(memory, pos)?;

    let query_pos = g.param(params, "decoder.query_embed")?;
    let mut t = query_pos;
    for i in 0..cfg.n_decoder_layers {
        let p = format!("decoder.{i}");
        let q = g.add(t, query_pos)?;
        let a = layers::multi_head_attention(g, params, &format!("{p}.self_attn"), q, q, t, h)?;
        let r = g.add(t, a)?;
        t = layers::layer_norm(g, params, &format!("{p}.norm1"), r)?;
        let q = g.add(t, query_pos)?;
        let c = layers::multi_head_attention(g, params, &format!("{p}.cross_attn"), q, memory_keys, memory, h)?;
        let r = g.add(t, c)?;
        t = layers::layer_norm(g, params, &format!("{p}.norm2"), r)?;
        let f = layers::mlp(g, params, &format!("{p}.ffn"), 2, t)?;
        let r = g.add(t, f)?;
        t = layers::layer_norm(g, params, &format!("{p}.norm3"), r)?;
    }

    let logits = layers::mlp(g, params, "head.class", CLASS_HEAD_LAYERS, t)?;
    let raw = layers::mlp(g, params, "head.joints", JOINT_HEAD_LAYERS, t)?;
    let joints = g.sigmoid(raw);
    Ok(DetectionVars { logits, joints })
}

/// Reads the head outputs off a graph.
pub fn detection_set<T: Scalar>(g: &Graph<T>, vars: DetectionVars) -> Result<DetectionSet<T>, ModelError> {
    let logits = g.value(vars.logits);
    let joints = g.value(vars.joints);
    let queries = (0..logits.rows())
        .map(|q| {
            let l = logits.row(q);
            QueryPrediction::new([l[0], l[1], l[2]], joints.row(q).to_vec())
        })
        .collect::<Result<_, _>>()?;
    Ok(DetectionSet { queries })
}

pub fn forward<T: Scalar>(params: &ParamStore<T>, image: &Image, cfg: &ModelConfig) -> Result<DetectionSet<T>, ModelError> {
    let mut g = Graph::new();
    let vars = forward_graph(&mut g, params, cfg, image)?;
    detection_set(&g, vars)
}

/// Normalized regression targets for a ground-truth hand, laid out like
/// [`QueryPrediction::joints_norm`]. Values outside `[0, 1]` are kept.
pub fn normalize_joints<T: Scalar>(uvd: &JointSetUVD<T>, cfg: &ModelConfig) -> Vec<T> {
    let w = T::of(cfg.image_width as f64);
    let h = T::of(cfg.image_height as f64);
    let z_min = T::of(cfg.depth_range[0]);
    let span = T::of(cfg.depth_range[1] - cfg.depth_range[0]);
    let two_delta = T::of(2.0 * cfg.relative_depth_half_range);
    let half = T::of(0.5);
    let wrist_d = uvd.joint(0)[2];
    let mut out = Vec::with_capacity(JOINT_OUTPUTS);
    for (i, &[u, v, d]) in uvd.joints().iter().enumerate() {
        out.push(u / w);
        out.push(v / h);
        out.push(match cfg.depth_mode {
            DepthMode::AbsolutePerJoint => (d - z_min) / span,
            DepthMode::RootPlusRelative if i == 0 => (d - z_min) / span,
            DepthMode::RootPlusRelative => (d - wrist_d) / two_delta + half,
        });
    }
    out
}

/// Maps normalized joint outputs back to pixels and millimeters. Depths are
/// clamped below at [`MIN_DECODED_DEPTH_MM`].
pub fn denormalize_joints<T: Scalar>(joints_norm: &[T], cfg: &ModelConfig) -> Result<JointSetUVD<T>, ModelError> {
    if joints_norm.len() != JOINT_OUTPUTS {
        return Err(ModelError::Shape(format!("expected {JOINT_OUTPUTS} joint values")));
    }
    let w = T::of(cfg.image_width as f64);
    let h = T::of(cfg.image_height as f64);
    let z_min = T::of(cfg.depth_range[0]);
    let span = T::of(cfg.depth_range[1] - cfg.depth_range[0]);
    let delta = T::of(cfg.relative_depth_half_range);
    let two = T::of(2.0);
    let floor = T::of(MIN_DECODED_DEPTH_MM);
    let wrist_d = z_min + joints_norm[2] * span;
    let mut joints = [[T::zero(); 3]; NUM_JOINTS];
    for (i, j) in joints.iter_mut().enumerate() {
        let n = &joints_norm[3 * i..3 * i + 3];
        let d = match cfg.depth_mode {
            DepthMode::AbsolutePerJoint => z_min + n[2] * span,
            DepthMode::RootPlusRelative if i == 0 => wrist_d,
            DepthMode::RootPlusRelative => wrist_d + (two * n[2] - T::one()) * delta,
        };
        *j = [n[0] * w, n[1] * h, d.max(floor)];
    }
    Ok(JointSetUVD::new(joints)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedHand<T> {
    pub side: HandSide,
    pub query_index: usize,
    /// Softmax probability of `side` for the selected query.
    pub confidence: T,
    /// Whether the selected query's most probable class is `side`.
    pub predicted_as_side: bool,
    pub uvd: JointSetUVD<T>,
}

/// Index of the query with the highest probability for `side`; ties go to
/// the lowest index.
pub fn select_query<T: Scalar>(det: &DetectionSet<T>, side: HandSide) -> Option<(usize, T)> {
    let mut best: Option<(usize, T)> = None;
    for (i, q) in det.queries.iter().enumerate() {
        let p = q.class_probs()[side.class_index()];
        if best.map_or(true, |(_, bp)| p > bp) {
            best = Some((i, p));
        }
    }
    best
}

/// One prediction per side (left first), always produced.
pub fn decode_predictions<T: Scalar>(det: &DetectionSet<T>, cfg: &ModelConfig) -> Result<[DecodedHand<T>; 2], ModelError> {
    let decode = |side: HandSide| -> Result<DecodedHand<T>, ModelError> {
        let (qi, p) = select_query(det, side).ok_or_else(|| ModelError::Shape("empty detection set".into()))?;
        let q = &det.queries[qi];
        let probs = q.class_probs();
        let top = (0..NUM_CLASSES).fold(0, |b, c| if probs[c] > probs[b] { c } else { b });
        Ok(DecodedHand {
            side,
            query_index: qi,
            confidence: p,
            predicted_as_side: top == side.class_index(),
            uvd: denormalize_joints(q.joints_norm(), cfg)?,
        })
    };
    Ok([decode(HandSide::Left)?, decode(HandSide::Right)?])
}
